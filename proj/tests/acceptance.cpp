// End-to-end acceptance run. One PASS/FAIL line per criterion; exit status 1 if any fails.
// Usage: acceptance [criterion ...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hob/analysis.hpp"
#include "hob/config.hpp"
#include "hob/gradcheck_suite.hpp"
#include "hob/train.hpp"
#include "oracles.hpp"

namespace {

namespace fs = std::filesystem;
using namespace hob;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Volume of an "AxBxC" grid string, parsed here rather than through OffsetGrid.
std::size_t volume_of(const std::string& s) {
  std::size_t v = 1;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, 'x');) v *= std::stoul(part);
  return v;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto r = run_gradcheck_suite(1);
  double worst = 0;
  std::string worst_op;
  for (const auto& c : r.checks)
    if (c.report.max_rel_error >= worst) {
      worst = c.report.max_rel_error;
      worst_op = c.op;
    }
  const bool fast = r.seconds < 120.0;
  return {r.passed() && fast, std::to_string(r.checks.size()) + " ops, worst rel err " + fmt("%.2e", worst) + " (" +
                                  worst_op + "), " + fmt("%.1f", r.seconds) + " s"};
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(2024);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  double worst[4] = {0, 0, 0, 0};
  const int cases = 24;
  for (int trial = 0; trial < cases; ++trial) {
    // plain and grouped convolution
    for (int grouped = 0; grouped < 2; ++grouped) {
      const std::size_t groups = grouped ? pick(2, 3) : 1;
      const std::size_t cin = groups * pick(1, 3), cout = groups * pick(1, 3);
      OffsetGrid grid(int(pick(0, 1)), int(pick(0, 2)), int(pick(0, 2)));
      Stride stride{pick(1, 2), pick(1, 2), pick(1, 2)};
      ConvSpec spec{cin, cout, grid, groups, stride, trial % 2 == 0};
      auto x = oracle::randn({pick(1, 2), cin, pick(2, 5), pick(3, 7), pick(3, 7)}, 1000 + trial);
      auto w = oracle::randn(spec.weight_shape(), 2000 + trial);
      auto b = oracle::randn(spec.bias_shape(), 3000 + trial);
      const Tensor5<double>* bp = spec.bias ? &b : nullptr;
      auto got = kernels::conv3d_forward(x, w, bp, spec);
      auto want = oracle::conv3d(x, w, bp, groups, stride.t, stride.h, stride.w);
      worst[grouped] = std::max(worst[grouped], got.shape() == want.shape() ? max_abs_diff(got, want) : INFINITY);
    }
    {
      const int kt = int(pick(0, 1)), kh = int(pick(0, 2)), kw = int(pick(0, 2));
      OffsetGrid k(kt, kh, kw);
      const Shape5 s{pick(1, 2), pick(1, 3), pick(1, 4), pick(2, 6), pick(2, 6)};
      auto x = oracle::randn(s, 4000 + trial);
      auto w = oracle::randn({s.n, s.c * k.size(), s.t, s.h, s.w}, 5000 + trial);
      worst[2] = std::max(worst[2], max_abs_diff(kernels::dynamic_depthwise_forward(x, w, k),
                                                 oracle::dynamic_apply(x, w, kt, kh, kw)));
    }
    {
      const char* ks = kKernelMenu[pick(0, kKernelMenu.size() - 1)];
      const char* cs = kContextMenu[pick(0, 2)];
      OffsetGrid k = OffsetGrid::parse(ks), ctx = OffsetGrid::parse(cs);
      const Shape5 s{pick(1, 2), pick(1, 3), 3, 4, 4};
      auto x = oracle::randn(s, 6000 + trial);
      auto theta = oracle::randn(single_conv_generator_spec(s.c, k, ctx).weight_shape(), 7000 + trial);
      Tape<double> tape;
      auto got = generate_weights_singleconv(tape.constant(x), tape.constant(theta), k, ctx).value();
      const Extents e = ctx.extents();
      worst[3] = std::max(worst[3], max_abs_diff(got, oracle::singleconv_logits(x, theta, k.size(), e.t, e.h, e.w)));
    }
  }
  const double m = *std::max_element(worst, worst + 4);
  return {m <= 1e-12, std::to_string(cases) + " cases each; max |diff| conv " + fmt("%.1e", worst[0]) + ", group " +
                          fmt("%.1e", worst[1]) + ", dynamic " + fmt("%.1e", worst[2]) + ", generator " +
                          fmt("%.1e", worst[3])};
}

template <class T>
double softmax_sum_error(GeneratorKind g, std::uint64_t seed) {
  ParameterStore<T> store;
  Rng rng(seed);
  HBlockConfig cfg{27, OffsetGrid::parse("3x3x3"), OffsetGrid::parse("5x5x5"), g, Activation::softmax, false};
  HBlock<T> block(store, "h", cfg, rng);
  Rng init(seed + 1);
  for (auto* p : block.parameters()) p->value = uniform_tensor<T>(p->value.shape(), T(-0.5), T(0.5), init);
  Tape<T> tape;
  auto x = uniform_tensor<T>({2, 27, 3, 4, 4}, T(-2), T(2), init);
  double err = 0;
  const Tensor5<T> sums = offset_sums(block.weights(tape.constant(x)).value(), 27);
  for (T s : sums.data())
    err = std::max(err, std::abs(static_cast<double>(s) - 1.0));
  return err;
}

Outcome normalization() {
  double e64 = 0, e32 = 0;
  for (auto g : {GeneratorKind::single_conv, GeneratorKind::convnet})
    for (std::uint64_t s = 0; s < 3; ++s) {
      e64 = std::max(e64, softmax_sum_error<double>(g, 10 + s));
      e32 = std::max(e32, softmax_sum_error<float>(g, 20 + s));
    }
  return {e64 <= 1e-12 && e32 <= 1e-6, "max |sum - 1| f64 " + fmt("%.1e", e64) + ", f32 " + fmt("%.1e", e32)};
}

Outcome degeneration() {
  double box = 0, stat = 0;
  for (auto g : {GeneratorKind::single_conv, GeneratorKind::convnet}) {
    ParameterStore<double> store;
    Rng rng(2);
    HBlockConfig cfg{27, OffsetGrid::parse("3x3x3"), OffsetGrid::parse("3x3x3"), g, Activation::softmax, false};
    HBlock<double> block(store, "h", cfg, rng);
    for (auto* p : block.parameters()) p->value.fill(0.0);
    auto x = oracle::randn({2, 27, 3, 4, 4}, 3);
    Tape<double> tape;
    box = std::max(box, max_abs_diff(block.forward(tape.constant(x)).value(), oracle::box_average(x, 1, 1, 1)));
  }
  for (const char* kernel : kKernelMenu) {
    OffsetGrid k = OffsetGrid::parse(kernel);
    const std::size_t C = 4;
    auto x = oracle::randn({2, C, 3, 5, 6}, 8);
    ConvSpec dw{C, C, k, C, {}, false};
    auto sw = oracle::randn(dw.weight_shape(), 9);
    Tensor5<double> w({2, k.size() * C, 3, 5, 6});
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t q = 0; q < k.size(); ++q)
        for (std::size_t c = 0; c < C; ++c) std::fill_n(w.plane(n, q * C + c), x.shape().volume(), sw.data()[c * k.size() + q]);
    Tape<double> tape;
    auto dyn = dynamic_depthwise_apply(tape.constant(x), tape.constant(w), k).value();
    stat = std::max(stat, max_abs_diff(dyn, oracle::conv3d(x, sw, nullptr, C, 1, 1, 1)));
  }
  return {box <= 1e-12 && stat <= 1e-12,
          "zero generator vs box average " + fmt("%.1e", box) + ", constant weights vs depthwise " + fmt("%.1e", stat)};
}

Outcome channel_arithmetic() {
  std::size_t configs = 0, mismatches = 0;
  for (const char* ks : kKernelMenu)
    for (const char* cs : kContextMenu)
      for (std::size_t C : {1, 2, 5}) {
        const Extents ke = OffsetGrid::parse(ks).extents(), ce = OffsetGrid::parse(cs).extents();
        if (ke.t > ce.t || ke.h > ce.h || ke.w > ce.w) continue;  // context must cover the kernel
        ParameterStore<float> store;
        Rng rng(0);
        HBlock<float> block(store, "h",
                            {C, OffsetGrid::parse(ks), OffsetGrid::parse(cs), GeneratorKind::single_conv,
                             Activation::softmax, false},
                            rng);
        ++configs;
        if (block.param_count() != C * C * volume_of(ks) * volume_of(cs)) ++mismatches;
      }
  const auto v = kernel_volume_comparison(OffsetGrid::parse("5x5x5"));
  const auto plan55 = make_generator_plan(27, OffsetGrid::parse("3x3x3"), OffsetGrid::parse("5x5x5"));
  std::size_t plan_volume = 0;
  for (const auto& l : plan55.layers) plan_volume += l.grid.size();
  const bool b_ok = v.factorized == 39 && v.single == 125 && plan_volume == 39;
  // |R| = 9 with C = 19: the middle layer keeps 19 // 9 = 2 groups of 9.
  const auto plan19 = make_generator_plan(19, OffsetGrid::parse("1x3x3"), OffsetGrid::parse("3x3x3"));
  const bool c_ok = plan19.layers[1].out_channels == 2 * 9 && plan19.layers[2].groups == 9 &&
                    plan19.layers[2].out_channels == 19 * 9;
  return {mismatches == 0 && b_ok && c_ok,
          "(a) " + std::to_string(configs - mismatches) + "/" + std::to_string(configs) + " configs equal C^2|R||R'|; (b) " +
              std::to_string(v.factorized) + " vs " + std::to_string(v.single) + "; (c) 19//9 -> " +
              std::to_string(plan19.layers[1].out_channels / 9)};
}

Outcome receptive_fields() {
  std::size_t hits = 0;
  std::string got;
  for (const char* ctx : kContextMenu) {
    HBlockConfig cfg{27, OffsetGrid::parse("3x3x3"), OffsetGrid::parse(ctx), GeneratorKind::convnet,
                     Activation::softmax, false};
    const Support s = probe_generator(cfg, probe_volume(cfg.context.extents()));
    hits += s.str() == ctx ? 1 : 0;
    got += (got.empty() ? "" : " ") + s.str();
  }
  return {hits == kContextMenu.size(), std::to_string(hits) + "/" + std::to_string(kContextMenu.size()) +
                                           " exact (" + got + ")"};
}

Outcome backbone_shapes() {
  std::size_t rows = 0, ok = 0;
  for (std::size_t T : {8, 32}) {
    BackboneSpec spec;
    spec.input = {T, 224, 224};
    // stage, channels, T x H x W as printed in the backbone table
    const std::vector<std::tuple<std::string, std::size_t, std::size_t, std::size_t>> table{
        {"conv1", 64, T, 112},       {"pool1", 64, T, 56},        {"res2", 256, T, 56},       {"pool2", 256, T / 2, 56},
        {"res3", 512, T / 2, 28},    {"res4", 1024, T / 2, 14},   {"res5", 2048, T / 2, 14}};
    const auto shapes = Model<float>::stage_shapes(spec);
    for (std::size_t i = 0; i < table.size(); ++i) {
      ++rows;
      const auto& [name, c, t, hw] = table[i];
      if (i < shapes.size() && shapes[i].stage == name && shapes[i].output == Shape5{1, c, t, hw, hw}) ++ok;
    }
  }
  return {ok == rows, std::to_string(ok) + "/" + std::to_string(rows) + " rows (T = 8 and 32)"};
}

Outcome flops() {
  InsertionPlan plan;
  plan.sites = InsertionPlan::preset("5-block");
  const BackboneSpec spec;
  const auto rep = count_costs(spec, plan, FlopConvention::mac1);
  auto macs = [&](const std::string& n) {
    for (const auto& r : rep.rows)
      if (r.name == n) return r.macs;
    return std::uint64_t{0};
  };
  const std::vector<std::pair<std::string, std::uint64_t>> hand{
      {"conv1", 64ull * 32 * 112 * 112 * (3 * 5 * 7 * 7)},
      {"res2.1.a", 64ull * 32 * 56 * 56 * (64 * 3)},
      {"res3.1.b", 128ull * 16 * 28 * 28 * (128 * 9)},
      {"res4.1.proj", 1024ull * 16 * 14 * 14 * 512},
      {"fc", 400ull * 2048}};
  std::size_t exact = 0;
  for (const auto& [n, m] : hand) exact += macs(n) == m ? 1 : 0;
  const double target = 368.0 / 326.0;
  bool in_band = false;
  std::string ratios;
  for (auto conv : {FlopConvention::mac1, FlopConvention::mac2}) {
    const double r = flop_ratio(spec, plan, conv).ratio();
    in_band = in_band || std::abs(r - target) <= 0.15;
    ratios += " " + to_string(conv) + " " + fmt("%.3f", r);
  }
  const auto base2 = count_costs(spec, InsertionPlan{}, FlopConvention::mac2).total_flops();
  return {exact == hand.size() && in_band,
          "(a) " + std::to_string(exact) + "/5 spot checks exact; (b) HO/baseline" + ratios + " vs " +
              fmt("%.3f", target) + " +- 0.15 (baseline MAC=2 " + fmt("%.1f", base2 / 1e9) + "G vs 326G)"};
}

Outcome xor_learnability() {
  const auto base = load_config(fs::path(HOB_CONFIGS) / "xor.json");
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    auto j = to_json(base);
    j["seed"] = seed;
    const auto cfg = parse_config(nlohmann::json::parse(j.dump()));
    const auto t0 = std::chrono::steady_clock::now();
    const Splits data = load_splits(cfg);
    const auto r = compare_orders<float>(data.train, data.test, cfg.backbone, cfg.insertion, cfg.train,
                                         derive_seed(cfg.seed, SeedStream::init));
    const double secs = seconds_since(t0);
    const bool pass = r.higher_order >= 0.90 && r.static_control <= 0.70 && r.frame_shuffled <= 0.55;
    std::printf("    seed %llu: H %.3f  S %.3f  H-shuffled %.3f  (%.0f s)%s\n", static_cast<unsigned long long>(seed),
                r.higher_order, r.static_control, r.frame_shuffled, secs, pass ? "" : "  <- fails");
    std::fflush(stdout);
    ok = ok && pass;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " H " +
              fmt("%.2f", r.higher_order) + " S " + fmt("%.2f", r.static_control) + " shuf " +
              fmt("%.2f", r.frame_shuffled);
  }
  return {ok, detail + " (need H >= 0.90, S <= 0.70, shuf <= 0.55)"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism() {
  auto cfg = load_config(fs::path(HOB_CONFIGS) / "smoke.json");
  cfg.precision = Precision::f64;
  cfg.train.epochs = 3;
  std::vector<std::string> bytes;
  std::size_t files = 0;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = fs::temp_directory_path() / ("hob_accept_det_" + std::to_string(run));
    fs::remove_all(dir);
    const Splits data = load_splits(cfg);
    Model<double> model(cfg.backbone, cfg.insertion, derive_seed(cfg.seed, SeedStream::init));
    const auto r = train(model, data.train, data.test, cfg.train, derive_seed(cfg.seed, SeedStream::shuffle));
    fs::create_directories(dir);
    write_log(dir / "log.tsv", r.log);
    save_checkpoint(dir / "checkpoint", model.store());
    std::vector<fs::path> paths{dir / "log.tsv"};
    for (const auto& e : fs::directory_iterator(dir / "checkpoint")) paths.push_back(e.path());
    std::sort(paths.begin() + 1, paths.end());
    std::string all;
    for (const auto& p : paths) all += p.filename().string() + '\0' + slurp(p);
    files = paths.size();
    bytes.push_back(std::move(all));
  }
  return {bytes[0] == bytes[1], std::to_string(files) + " files, " + std::to_string(bytes[0].size()) + " bytes, " +
                                    (bytes[0] == bytes[1] ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient fidelity", gradient_fidelity}, {"oracle equivalence", oracle_equivalence},
      {"normalization", normalization},         {"degeneration", degeneration},
      {"channel arithmetic", channel_arithmetic},   {"receptive fields", receptive_fields},
      {"backbone shapes", backbone_shapes},     {"flops", flops},
      {"xor learnability", xor_learnability},   {"determinism", determinism}};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("criterion %2d %-20s %s  %s [%.1f s]\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
