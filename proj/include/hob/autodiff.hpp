#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include "hob/errors.hpp"
#include "hob/hot1.hpp"
#include "hob/tensor.hpp"

namespace hob {

template <class T>
struct Parameter {
  std::string name;
  Tensor5<T> value;
  Tensor5<T> grad;
  // Weight decay applies only to parameters flagged here (conv / linear weights).
  bool decay = true;
};

// Non-learned model state that still belongs in checkpoints (e.g. running statistics).
template <class T>
struct Buffer {
  std::string name;
  Tensor5<T> value;
};

// Owns every parameter and buffer of a model. Element addresses are stable.
template <class T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(std::string name, Tensor5<T> value, bool decay = true) {
    claim(name);
    Shape5 s = value.shape();
    params_.push_back({std::move(name), std::move(value), Tensor5<T>::zeros(s), decay});
    return params_.back();
  }

  Buffer<T>& add_buffer(std::string name, Tensor5<T> value) {
    claim(name);
    buffers_.push_back({std::move(name), std::move(value)});
    return buffers_.back();
  }

  std::deque<Parameter<T>>& params() { return params_; }
  const std::deque<Parameter<T>>& params() const { return params_; }
  std::deque<Buffer<T>>& buffers() { return buffers_; }
  const std::deque<Buffer<T>>& buffers() const { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.size();
    return total;
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

 private:
  void claim(const std::string& name) {
    if (name.empty() || name.find_first_of("/\\ \t\n") != std::string::npos) {
      throw ContractError("invalid parameter name '" + name + "'");
    }
    if (!names_.insert(name).second) throw ContractError("duplicate parameter name '" + name + "'");
  }

  std::deque<Parameter<T>> params_;
  std::deque<Buffer<T>> buffers_;
  std::unordered_set<std::string> names_;
};

template <class T>
class Tape;

// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor5<T>& value() const { return tape->value(id); }
  const Shape5& shape() const { return value().shape(); }
};

// Define-by-run record of tensor operations for reverse-mode differentiation.
template <class T>
class Tape {
 public:
  // Called with the gradient of the node's output; accumulates into input grad slots.
  using BackwardFn = std::function<void(Tape&, const Tensor5<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor5<T> value) {
    Node node;
    node.owned = std::move(value);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  // The parameter must outlive the tape and stay unmodified until backward() returns.
  Var<T> parameter(Parameter<T>& p) {
    Node node;
    node.external = &p.value;
    node.param = &p;
    node.requires_grad = true;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  // Input-gradient leaf: like a constant, but backward() keeps its gradient.
  Var<T> input(Tensor5<T> value) {
    Var<T> v = constant(std::move(value));
    nodes_[v.id].requires_grad = true;
    return v;
  }

  Var<T> record(Tensor5<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var<T> record(Tensor5<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
    Node node;
    node.owned = std::move(value);
    for (const Var<T>& in : inputs) {
      if (in.tape != this) throw ContractError("operand recorded on a different tape");
      node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  const Tensor5<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }

  // Zero-initialised gradient accumulator of node `id`.
  Tensor5<T>& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad) n.grad = Tensor5<T>::zeros(value(id).shape());
    return *n.grad;
  }

  // Gradient of a leaf after backward(); nullptr when nothing flowed into it.
  const Tensor5<T>* grad(Var<T> v) const {
    const auto& g = nodes_[v.id].grad;
    return g ? &*g : nullptr;
  }

  std::size_t size() const { return nodes_.size(); }

  // Fills Parameter::grad with d loss / d value for every parameter on the tape.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("loss recorded on a different tape");
    if (value(loss.id).shape() != scalar_shape()) {
      throw ContractError("backward requires a scalar loss, got shape " + value(loss.id).shape().str());
    }
    for (Node& n : nodes_) {
      n.grad.reset();
      if (n.param) n.param->grad = Tensor5<T>::zeros(n.param->value.shape());
    }
    grad_slot(loss.id).data()[0] = T{1};
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.grad || !n.backward) continue;
      n.backward(*this, *n.grad);
      // Intermediate gradients are no longer needed once propagated.
      n.grad.reset();
    }
    for (Node& n : nodes_) {
      if (n.param && n.grad) accumulate(n.param->grad, *n.grad);
    }
  }

 private:
  struct Node {
    Tensor5<T> owned;
    const Tensor5<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
    std::optional<Tensor5<T>> grad;
  };

  // Deque keeps node addresses stable while backward functions append nothing.
  std::deque<Node> nodes_;
};

// Stops gradient flow; the value is unchanged.
template <class T>
Var<T> detach(Var<T> x) {
  return x.tape->constant(x.value());
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (f64 only).

struct GradcheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  std::size_t max_coords = 500;
  std::uint64_t seed = 0x9e3779b97f4a7c15ULL;
  // Denominator floor for the relative error of near-zero gradients.
  double abs_floor = 1e-6;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// `f` builds a scalar-valued graph on the given tape from the parameters in `params`.
// Every coordinate is checked when there are at most opt.max_coords of them; otherwise
// opt.max_coords coordinates are drawn uniformly without replacement using opt.seed.
template <class Fn>
GradcheckReport gradcheck(Fn&& f, std::span<Parameter<double>* const> params, const GradcheckOptions& opt = {}) {
  auto evaluate = [&](const char* what, std::size_t pi, std::size_t idx) {
    Tape<double> tape;
    Var<double> loss = f(tape);
    double v = loss.value().item();
    if (!std::isfinite(v)) {
      throw NumericError(std::string("gradcheck: non-finite loss at ") + what + " of " + params[pi]->name + "[" +
                         std::to_string(idx) + "]");
    }
    return v;
  };

  // Parameters absent from the graph must read as zero, not as a stale gradient.
  for (auto* p : params) p->grad = Tensor5<double>::zeros(p->value.shape());
  {
    Tape<double> tape;
    Var<double> loss = f(tape);
    if (!std::isfinite(loss.value().item())) throw NumericError("gradcheck: non-finite loss at base point");
    tape.backward(loss);
  }
  std::vector<Tensor5<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t pi = 0; pi < params.size(); ++pi)
    for (std::size_t i = 0; i < params[pi]->value.size(); ++i) coords.emplace_back(pi, i);
  if (coords.size() > opt.max_coords) {
    std::vector<std::pair<std::size_t, std::size_t>> picked;
    std::mt19937_64 rng(opt.seed);
    std::sample(coords.begin(), coords.end(), std::back_inserter(picked), opt.max_coords, rng);
    coords = std::move(picked);
  }

  GradcheckReport report;
  for (auto [pi, i] : coords) {
    double& theta = params[pi]->value.data()[i];
    const double saved = theta;
    theta = saved + opt.step;
    const double up = evaluate("+h", pi, i);
    theta = saved - opt.step;
    const double down = evaluate("-h", pi, i);
    theta = saved;
    const double numeric = (up - down) / (2.0 * opt.step);
    const double a = analytic[pi].data()[i];
    if (!std::isfinite(a)) {
      throw NumericError("gradcheck: non-finite analytic gradient at " + params[pi]->name + "[" +
                         std::to_string(i) + "]");
    }
    const double err = relative_error(a, numeric, opt.abs_floor);
    ++report.coords_checked;
    if (err > report.max_rel_error || report.coords_checked == 1) {
      report.max_rel_error = err;
      report.worst_param = params[pi]->name;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  report.passed = report.max_rel_error <= opt.tol;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: one HOT1 file per parameter / buffer plus manifest.txt listing names in order.

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const ParameterStore<T>& store) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  for (const auto& p : store.params()) {
    write_hot1(dir / (p.name + ".hot1"), p.value);
    manifest << p.name << '\n';
  }
  for (const auto& b : store.buffers()) {
    write_hot1(dir / (b.name + ".hot1"), b.value);
    manifest << b.name << '\n';
  }
}

template <class T>
void load_checkpoint(const std::filesystem::path& dir, ParameterStore<T>& store) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw FormatError((dir / "manifest.txt").string() + ": cannot open");
  std::vector<std::string> names;
  for (std::string line; std::getline(manifest, line);)
    if (!line.empty()) names.push_back(line);

  std::vector<std::pair<std::string, Tensor5<T>*>> slots;
  for (auto& p : store.params()) slots.emplace_back(p.name, &p.value);
  for (auto& b : store.buffers()) slots.emplace_back(b.name, &b.value);
  if (names.size() != slots.size()) {
    throw FormatError(dir.string() + ": manifest lists " + std::to_string(names.size()) + " entries, model has " +
                      std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (names[i] != slots[i].first) {
      throw FormatError(dir.string() + ": manifest entry " + std::to_string(i) + " is '" + names[i] +
                        "', expected '" + slots[i].first + "'");
    }
    Tensor5<T> v = read_hot1<T>(dir / (names[i] + ".hot1"));
    if (v.shape() != slots[i].second->shape()) {
      throw FormatError(names[i] + ".hot1: shape " + v.shape().str() + " does not match model " +
                        slots[i].second->shape().str());
    }
    *slots[i].second = std::move(v);
  }
}

}  // namespace hob
