#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "hob/autodiff.hpp"
#include "hob/model_zoo.hpp"
#include "hob/nn_ops.hpp"
#include "hob/seeds.hpp"
#include "hob/synth_data.hpp"

namespace hob {

enum class LossKind { cross_entropy, binary_sigmoid };

inline std::string to_string(LossKind k) { return k == LossKind::cross_entropy ? "cross-entropy" : "binary-sigmoid"; }
inline LossKind parse_loss(const std::string& s) {
  if (s == "cross-entropy") return LossKind::cross_entropy;
  if (s == "binary-sigmoid") return LossKind::binary_sigmoid;
  throw ConfigError("loss '" + s + "' not in {cross-entropy, binary-sigmoid}");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 0.01;
  std::vector<std::size_t> lr_steps{15};  // epochs (0-based) from which the rate is divided by 10
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LossKind loss = LossKind::cross_entropy;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be finite and >= 0");
  }

  double lr_at(std::size_t epoch) const {
    double r = lr;
    for (std::size_t s : lr_steps)
      if (epoch >= s) r /= 10.0;
    return r;
  }
};

// ---------------------------------------------------------------------------
// SGD with momentum; decay is folded into the velocity for flagged parameters only.

template <class T>
struct SgdState {
  std::vector<Tensor5<T>> velocity;
};

template <class T>
void sgd_step(ParameterStore<T>& store, SgdState<T>& state, double lr, double momentum, double weight_decay) {
  auto& params = store.params();
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.push_back(Tensor5<T>::zeros(p.value.shape()));
  }
  if (state.velocity.size() != params.size()) throw ContractError("sgd: optimizer state does not match parameters");
  for (const auto& p : params)
    if (!p.grad.all_finite()) throw NumericError("sgd: non-finite gradient in parameter '" + p.name + "'");
  const T m = static_cast<T>(momentum), l = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto v = state.velocity[i].data();
    if (v.size() != p.value.size()) throw ContractError("sgd: velocity shape mismatch for '" + p.name + "'");
    const T wd = p.decay ? static_cast<T>(weight_decay) : T{0};
    auto th = p.value.data();
    const auto g = p.grad.data();
    for (std::size_t k = 0; k < th.size(); ++k) {
      v[k] = m * v[k] + g[k] + wd * th[k];
      th[k] -= l * v[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Training and evaluation

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = NAN;
  double train_acc = NAN;
  double eval_acc = NAN;
};

inline std::string log_header() { return "epoch\tlr\ttrain_loss\ttrain_acc\teval_acc"; }

inline std::string format_log(const EpochLog& e) {
  auto num = [](double v) {
    if (std::isnan(v)) return std::string("-");
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  return std::to_string(e.epoch) + "\t" + num(e.lr) + "\t" + num(e.train_loss) + "\t" + num(e.train_acc) + "\t" +
         num(e.eval_acc);
}

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

template <class T>
Var<T> loss_of(LossKind kind, Var<T> logits, std::span<const int> labels) {
  return kind == LossKind::cross_entropy ? cross_entropy(logits, labels) : binary_sigmoid_loss(logits, labels);
}

template <class T>
std::size_t count_correct(const Tensor5<T>& logits, std::span<const int> labels) {
  const std::size_t K = logits.shape().c;
  std::size_t correct = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const T* row = logits.data().data() + n * K;
    const std::size_t pred = static_cast<std::size_t>(std::max_element(row, row + K) - row);
    correct += pred == static_cast<std::size_t>(labels[n]) ? 1 : 0;
  }
  return correct;
}

template <class T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t batch_size, LossKind loss = LossKind::cross_entropy) {
  EvalResult r;
  std::size_t correct = 0;
  for (const auto& idx : batch_indices(data.size(), batch_size, false, 0)) {
    Batch b = make_batch(data, idx);
    Tape<T> tape;
    Var<T> logits = model.forward(tape.constant(b.clips.template cast<T>()), false);
    r.loss += static_cast<double>(loss_of(loss, logits, b.labels).value().item()) * static_cast<double>(idx.size());
    correct += count_correct(logits.value(), b.labels);
  }
  r.loss /= static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

struct TrainResult {
  std::vector<EpochLog> log;
  double final_eval_acc = 0;
  double first_batch_loss = NAN;
  double seconds = 0;
};

using LogSink = std::function<void(const std::string&)>;

// Trains in place. Batch order for epoch e is shuffled with shuffle_seed + e.
template <class T>
TrainResult train(Model<T>& model, const Dataset& train_set, const Dataset& eval_set, const TrainConfig& cfg,
                  std::uint64_t shuffle_seed, const LogSink& sink = {}) {
  cfg.validate();
  if (train_set.classes != model.spec().classes) {
    throw ConfigError("dataset has " + std::to_string(train_set.classes) + " classes, model has " +
                      std::to_string(model.spec().classes));
  }
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  if (sink) sink(log_header());
  SgdState<T> opt;
  if (cfg.epochs == 0) {
    EpochLog e{0, cfg.lr_at(0), NAN, NAN, evaluate(model, eval_set, cfg.batch_size, cfg.loss).accuracy};
    result.log.push_back(e);
    if (sink) sink(format_log(e));
  }
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (const auto& idx : batch_indices(train_set.size(), cfg.batch_size, true, shuffle_seed + epoch)) {
      Batch b = make_batch(train_set, idx);
      Tape<T> tape;
      Var<T> logits = model.forward(tape.constant(b.clips.template cast<T>()), true);
      Var<T> loss = loss_of(cfg.loss, logits, b.labels);
      const double lv = static_cast<double>(loss.value().item());
      if (!std::isfinite(lv)) throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch + 1));
      if (std::isnan(result.first_batch_loss)) result.first_batch_loss = lv;
      loss_sum += lv * static_cast<double>(idx.size());
      correct += count_correct(logits.value(), b.labels);
      tape.backward(loss);
      sgd_step(model.store(), opt, lr, cfg.momentum, cfg.weight_decay);
    }
    EpochLog e{epoch + 1, lr, loss_sum / static_cast<double>(train_set.size()),
               static_cast<double>(correct) / static_cast<double>(train_set.size()),
               evaluate(model, eval_set, cfg.batch_size, cfg.loss).accuracy};
    result.log.push_back(e);
    if (sink) sink(format_log(e));
  }
  result.final_eval_acc = result.log.back().eval_acc;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

inline void write_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::binary);
  out << log_header() << '\n';
  for (const auto& e : log) out << format_log(e) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Higher-order vs first-order comparison

struct OrderComparison {
  double higher_order = 0;     // H: H-blocks at the planned sites
  double static_control = 0;   // S: same sites, static depthwise conv over the same kernel
  double frame_shuffled = 0;   // H trained and tested on clips with shuffled frames
  double gap() const { return higher_order - static_control; }
};

struct CompareOptions {
  bool frame_shuffled_control = true;
};

template <class T>
OrderComparison compare_orders(const Dataset& train_set, const Dataset& test_set, const BackboneSpec& spec,
                               InsertionPlan plan, const TrainConfig& cfg, std::uint64_t seed,
                               const CompareOptions& opts = {}, const LogSink& sink = {}) {
  OrderComparison r;
  auto run = [&](const std::string& tag, BlockKind kind, const Dataset& tr, const Dataset& te) {
    plan.kind = kind;
    Model<T> model(spec, plan, seed);
    LogSink tagged;
    if (sink) tagged = [&](const std::string& line) { sink(tag + "\t" + line); };
    return train(model, tr, te, cfg, derive_seed(seed, SeedStream::shuffle), tagged).final_eval_acc;
  };
  r.higher_order = run("H", BlockKind::higher_order, train_set, test_set);
  r.static_control = run("S", BlockKind::static_depthwise, train_set, test_set);
  if (opts.frame_shuffled_control) {
    const std::uint64_t fs = derive_seed(seed, SeedStream::shuffle) * 2654435761u;
    r.frame_shuffled =
        run("H-shuffled", BlockKind::higher_order, shuffle_frames(train_set, fs), shuffle_frames(test_set, fs + 1));
  } else {
    r.frame_shuffled = NAN;
  }
  return r;
}

}  // namespace hob
