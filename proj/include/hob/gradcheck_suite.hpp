#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hob/hblock.hpp"
#include "hob/nn_ops.hpp"

namespace hob {

struct OpCheck {
  std::string op;
  GradcheckReport report;
};

struct GradcheckSuiteResult {
  std::vector<OpCheck> checks;
  double seconds = 0;
  bool passed() const {
    for (const auto& c : checks)
      if (!c.report.passed) return false;
    return true;
  }
};

namespace gradcheck_detail {

inline Tensor5<double> normal(Shape5 s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> d(0.0, sd);
  Tensor5<double> t(s);
  for (double& v : t.data()) v = d(rng);
  return t;
}

// Owns the parameters of one check; the loss is mean(y * y) unless the op is itself a loss.
struct Case {
  ParameterStore<double> store;
  std::vector<Parameter<double>*> params;
  std::uint64_t seed;
  explicit Case(std::uint64_t s) : seed(s) {}
  Parameter<double>& add(const std::string& name, Shape5 shape, double sd = 1.0) {
    params.push_back(&store.add(name, normal(shape, seed++, sd)));
    return *params.back();
  }
  template <class F>
  GradcheckReport run(F&& f, double tol) {
    GradcheckOptions opt;
    opt.tol = tol;
    return gradcheck(f, params, opt);
  }
};

inline Var<double> sq_mean(Var<double> y) { return mean(mul(y, y)); }

}  // namespace gradcheck_detail

// Every differentiable op and the full H-block (both generators, all activations) on
// shapes no larger than (2, 4, 3, 5, 5), in f64.
inline GradcheckSuiteResult run_gradcheck_suite(std::uint64_t seed, double tol = 1e-4,
                                                const std::function<void(const OpCheck&)>& on_check = {}) {
  using namespace gradcheck_detail;
  const auto start = std::chrono::steady_clock::now();
  GradcheckSuiteResult result;
  const Shape5 xs{2, 4, 3, 5, 5};
  auto record = [&](std::string op, GradcheckReport r) {
    result.checks.push_back({std::move(op), std::move(r)});
    if (on_check) on_check(result.checks.back());
  };
  std::uint64_t s = seed * 1000;

  {
    Case c(s += 10);
    ConvSpec spec{4, 6, OffsetGrid(1, 1, 1), 1, {1, 2, 2}, true};
    auto& x = c.add("x", xs);
    auto& w = c.add("w", spec.weight_shape(), 0.3);
    auto& b = c.add("b", spec.bias_shape());
    record("conv3d", c.run([&](Tape<double>& t) {
      return sq_mean(conv3d(t.parameter(x), t.parameter(w), t.parameter(b), spec));
    }, tol));
  }
  {
    Case c(s += 10);
    ConvSpec spec{4, 6, OffsetGrid(1, 1, 1), 2, {1, 1, 1}, false};
    auto& x = c.add("x", xs);
    auto& w = c.add("w", spec.weight_shape(), 0.3);
    record("conv3d-grouped", c.run([&](Tape<double>& t) {
      return sq_mean(conv3d(t.parameter(x), t.parameter(w), std::nullopt, spec));
    }, tol));
  }
  {
    Case c(s += 10);
    ConvSpec spec{4, 4, OffsetGrid(1, 1, 1), 4, {1, 1, 1}, false};
    auto& x = c.add("x", xs);
    auto& w = c.add("w", spec.weight_shape(), 0.3);
    record("conv3d-depthwise", c.run([&](Tape<double>& t) {
      return sq_mean(conv3d(t.parameter(x), t.parameter(w), std::nullopt, spec));
    }, tol));
  }
  for (int which = 0; which < 3; ++which) {
    Case c(s += 10);
    auto& x = c.add("x", xs);
    const char* names[] = {"selu", "relu", "tanh"};
    record(names[which], c.run([&](Tape<double>& t) {
      Var<double> v = t.parameter(x);
      return sq_mean(which == 0 ? selu(v) : which == 1 ? relu(v) : tanh(v));
    }, tol));
  }
  {
    Case c(s += 10);
    auto& a = c.add("a", xs);
    auto& b = c.add("b", xs);
    record("add", c.run([&](Tape<double>& t) { return sq_mean(add(t.parameter(a), t.parameter(b))); }, tol));
    record("mul", c.run([&](Tape<double>& t) { return sq_mean(mul(t.parameter(a), t.parameter(b))); }, tol));
    record("scale-sum", c.run([&](Tape<double>& t) { return sum(scale(mul(t.parameter(a), t.parameter(a)), 0.25)); }, tol));
  }
  {
    Case c(s += 10);
    auto& z = c.add("z", {2, 9 * 2, 3, 4, 4});
    auto& g = c.add("g", {2, 9 * 2, 3, 4, 4});
    record("softmax-over-offsets", c.run([&](Tape<double>& t) {
      return sum(mul(softmax_over_offsets(t.parameter(z), 9), t.parameter(g)));
    }, tol));
  }
  {
    Case c(s += 10);
    auto& x = c.add("x", xs);
    record("maxpool3d", c.run([&](Tape<double>& t) {
      return sq_mean(maxpool3d(t.parameter(x), OffsetGrid(1, 1, 1), Stride{1, 2, 2}));
    }, tol));
  }
  {
    Case c(s += 10);
    auto& x = c.add("x", xs);
    auto& w = c.add("w", {3, 4, 1, 1, 1}, 0.5);
    auto& b = c.add("b", {1, 3, 1, 1, 1});
    const std::vector<int> labels{2, 0};
    record("gap-linear-cross-entropy", c.run([&](Tape<double>& t) {
      return cross_entropy(linear(global_avg_pool(t.parameter(x)), t.parameter(w), t.parameter(b)),
                           std::span<const int>(labels));
    }, tol));
    record("binary-sigmoid", c.run([&](Tape<double>& t) {
      return binary_sigmoid_loss(linear(global_avg_pool(t.parameter(x)), t.parameter(w), t.parameter(b)),
                                 std::span<const int>(labels));
    }, tol));
  }
  {
    Case c(s += 10);
    auto& x = c.add("x", xs);
    auto& gamma = c.add("gamma", {1, 4, 1, 1, 1});
    auto& beta = c.add("beta", {1, 4, 1, 1, 1});
    auto& probe = c.add("probe", xs);
    record("batchnorm-train", c.run([&](Tape<double>& t) {
      return sum(mul(batchnorm_train(t.parameter(x), t.parameter(gamma), t.parameter(beta), 1e-5),
                     t.parameter(probe)));
    }, tol));
    const std::vector<double> mu{0.1, -0.2, 0.3, 0.0}, var{1.0, 0.5, 2.0, 0.8};
    record("batchnorm-eval", c.run([&](Tape<double>& t) {
      return sq_mean(batchnorm_eval(t.parameter(x), t.parameter(gamma), t.parameter(beta), std::span<const double>(mu),
                                    std::span<const double>(var), 1e-5));
    }, tol));
  }
  {
    Case c(s += 10);
    const OffsetGrid k(1, 1, 1);
    auto& x = c.add("x", xs);
    auto& w = c.add("w", {2, k.size() * 4, 3, 5, 5}, 0.3);
    record("dynamic-depthwise-apply", c.run([&](Tape<double>& t) {
      return sq_mean(dynamic_depthwise_apply(t.parameter(x), t.parameter(w), k));
    }, tol));
  }
  {
    Case c(s += 10);
    const OffsetGrid k(1, 1, 1), ctx(1, 1, 1);
    auto& x = c.add("x", xs);
    auto& th = c.add("theta", single_conv_generator_spec(4, k, ctx).weight_shape(), 0.05);
    record("generate-weights-singleconv", c.run([&](Tape<double>& t) {
      return sq_mean(generate_weights_singleconv(t.parameter(x), t.parameter(th), k, ctx));
    }, tol));
  }
  struct BlockCase {
    const char* kernel;
    GeneratorKind gen;
  };
  // The convnet generator needs C >= |R|, so at C = 4 it runs with a 3x1x1 kernel.
  for (BlockCase bc : {BlockCase{"3x3x3", GeneratorKind::single_conv}, BlockCase{"3x1x1", GeneratorKind::convnet}}) {
    for (Activation a : {Activation::softmax, Activation::relu, Activation::tanh}) {
      Case c(s += 10);
      HBlockConfig cfg{4, OffsetGrid::parse(bc.kernel), OffsetGrid::parse("3x3x3"), bc.gen, a, false};
      Rng rng(c.seed);
      HBlock<double> block(c.store, "h", cfg, rng);
      std::uint64_t ps = c.seed + 100;
      for (auto* p : block.parameters()) p->value = normal(p->value.shape(), ps++, 0.4);
      auto& x = c.add("x", xs);
      for (auto* p : block.parameters()) c.params.push_back(p);
      record("hblock-" + to_string(bc.gen) + "-" + to_string(a), c.run([&](Tape<double>& t) {
        return mean(block.forward(t.parameter(x)));
      }, tol));
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace hob
