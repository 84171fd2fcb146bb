#pragma once

// Higher-order block: a depthwise convolution whose per-position filters are produced
// from the input's spatiotemporal context by a generator network.
//
//   logits = generator(x)                      single conv over the context field, or
//                                              a three-layer factorised ConvNet
//   w      = activation(logits)                softmax over offsets, relu or tanh
//   y_p    = sum_q w_{p,q} * x_{p+q}           (+ x when residual)
//
// Generator outputs use an offset-major channel layout: channel q * C + c holds the
// weight of offset q for feature channel c.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "hob/autodiff.hpp"
#include "hob/costs.hpp"
#include "hob/errors.hpp"
#include "hob/nn_ops.hpp"
#include "hob/tensor.hpp"

namespace hob {

enum class GeneratorKind { single_conv, convnet };
enum class Activation { softmax, relu, tanh };

inline std::string to_string(GeneratorKind k) { return k == GeneratorKind::single_conv ? "single-conv" : "convnet"; }
inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::softmax: return "softmax";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline GeneratorKind parse_generator(const std::string& s) {
  if (s == "single-conv") return GeneratorKind::single_conv;
  if (s == "convnet") return GeneratorKind::convnet;
  throw ConfigError("unknown generator '" + s + "' (expected single-conv or convnet)");
}

inline Activation parse_activation(const std::string& s) {
  if (s == "softmax") return Activation::softmax;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "' (expected softmax, relu or tanh)");
}

// Ablation menus.
inline const std::array<const char*, 4> kKernelMenu{"3x1x1", "1x3x3", "3x3x3", "3x5x5"};
inline const std::array<const char*, 5> kContextMenu{"3x3x3", "3x5x5", "5x5x5", "5x7x7", "7x7x7"};

struct HBlockConfig {
  std::size_t channels = 0;
  OffsetGrid kernel = OffsetGrid(1, 1, 1);
  OffsetGrid context = OffsetGrid(2, 2, 2);
  GeneratorKind generator = GeneratorKind::convnet;
  Activation activation = Activation::softmax;
  bool residual = true;

  void validate() const {
    auto in_menu = [](const OffsetGrid& g, const auto& menu) {
      for (const char* m : menu)
        if (g.str() == m) return true;
      return false;
    };
    if (!in_menu(kernel, kKernelMenu)) throw ConfigError("kernel " + kernel.str() + " not in {3x1x1, 1x3x3, 3x3x3, 3x5x5}");
    if (!in_menu(context, kContextMenu)) {
      throw ConfigError("context " + context.str() + " not in {3x3x3, 3x5x5, 5x5x5, 5x7x7, 7x7x7}");
    }
    if (!context.extents().covers(kernel.extents())) {
      throw ConfigError("context field " + context.str() + " must cover kernel " + kernel.str());
    }
    if (channels == 0) throw ConfigError("H-block needs at least one channel");
    if (generator == GeneratorKind::convnet && channels < kernel.size()) {
      throw ConfigError("convnet generator needs channels >= |R| (C // |R| >= 1): C = " + std::to_string(channels) +
                        ", |R| = " + std::to_string(kernel.size()) + " for kernel " + kernel.str());
    }
  }
};

// ---------------------------------------------------------------------------
// Generator plans

struct GeneratorPlan {
  std::array<ConvSpec, 3> layers;

  // Per-axis sum of half-widths of the stacked layers.
  Extents composed_extents() const {
    Extents e;
    for (const auto& l : layers) {
      e.t += l.grid.extents().t;
      e.h += l.grid.extents().h;
      e.w += l.grid.extents().w;
    }
    return e;
  }
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
  }
};

// Factorisation of each context field into three stacked kernels.
inline std::array<OffsetGrid, 3> context_factorization(const OffsetGrid& context) {
  const std::string c = context.str();
  auto g = [](const char* s) { return OffsetGrid::parse(s); };
  if (c == "3x3x3") return {g("1x3x3"), g("3x1x1"), g("1x1x1")};
  if (c == "3x5x5") return {g("1x3x3"), g("3x3x3"), g("1x1x1")};
  if (c == "5x5x5") return {g("1x3x3"), g("3x3x3"), g("3x1x1")};
  if (c == "5x7x7") return {g("1x3x3"), g("3x3x3"), g("3x3x3")};
  if (c == "7x7x7") return {g("3x3x3"), g("3x3x3"), g("3x3x3")};
  throw ConfigError("no factorisation for context field " + c);
}

// Channel plan: (C -> C), (C -> C // |R| * |R|), (C // |R| * |R| -> C * |R|) with |R| groups.
inline GeneratorPlan make_generator_plan(std::size_t channels, const OffsetGrid& kernel, const OffsetGrid& context) {
  const std::size_t r = kernel.size();
  const std::size_t mid = channels / r * r;
  if (mid == 0) {
    throw ConfigError("convnet generator: C // |R| = " + std::to_string(channels) + " // " + std::to_string(r) +
                      " = 0; the H-block needs at least |R| channels");
  }
  auto k = context_factorization(context);
  GeneratorPlan plan;
  plan.layers[0] = ConvSpec{channels, channels, k[0], 1, {}, true};
  plan.layers[1] = ConvSpec{channels, mid, k[1], 1, {}, true};
  plan.layers[2] = ConvSpec{mid, channels * r, k[2], r, {}, false};
  for (const auto& l : plan.layers) l.validate();
  return plan;
}

struct KernelVolumes {
  std::size_t factorized = 0;
  std::size_t single = 0;
};

// Kernel volumes of the three factorised layers vs one kernel spanning the context field.
inline KernelVolumes kernel_volume_comparison(const OffsetGrid& context) {
  KernelVolumes v;
  for (const auto& g : context_factorization(context)) v.factorized += g.size();
  v.single = context.size();
  return v;
}

// C^2 * |R| * |R'|
inline std::size_t single_conv_param_count(std::size_t channels, const OffsetGrid& kernel, const OffsetGrid& context) {
  return channels * channels * kernel.size() * context.size();
}

// ---------------------------------------------------------------------------
// Dynamic depthwise application

namespace kernels {

template <class T>
void check_dynamic_shapes(const Shape5& x, const Shape5& w, const OffsetGrid& kernel) {
  if (w.n != x.n || w.t != x.t || w.h != x.h || w.w != x.w || w.c != kernel.size() * x.c) {
    throw ShapeError("dynamic weights " + w.str() + " do not match input " + x.str() + " with |R| = " +
                     std::to_string(kernel.size()));
  }
}

template <class T>
Tensor5<T> dynamic_depthwise_forward(const Tensor5<T>& x, const Tensor5<T>& w, const OffsetGrid& kernel) {
  const Shape5 s = x.shape();
  check_dynamic_shapes<T>(s, w.shape(), kernel);
  Tensor5<T> y(s);
  const Stride unit;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xp = x.plane(n, c);
      T* yp = y.plane(n, c);
      for (std::size_t k = 0; k < kernel.size(); ++k) {
        const Offset& q = kernel[k];
        const T* wp = w.plane(n, k * s.c + c);
        for_each_row(s, s, unit, q, [&](std::size_t yo, std::size_t xo, std::size_t lo, std::size_t hi) {
          const T* xs = xp + xo + static_cast<long>(lo) + q.dw;
          const T* ws = wp + yo + lo;
          T* ys = yp + yo + lo;
          for (std::size_t i = 0; i < hi - lo; ++i) ys[i] += ws[i] * xs[i];
        });
      }
    }
  return y;
}

template <class T>
void dynamic_depthwise_backward(const Tensor5<T>& dy, const Tensor5<T>& x, const Tensor5<T>& w,
                                const OffsetGrid& kernel, Tensor5<T>* dx, Tensor5<T>* dw) {
  const Shape5 s = x.shape();
  const Stride unit;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* xp = x.plane(n, c);
      const T* gp = dy.plane(n, c);
      T* dxp = dx ? dx->plane(n, c) : nullptr;
      for (std::size_t k = 0; k < kernel.size(); ++k) {
        const Offset& q = kernel[k];
        const T* wp = w.plane(n, k * s.c + c);
        T* dwp = dw ? dw->plane(n, k * s.c + c) : nullptr;
        for_each_row(s, s, unit, q, [&](std::size_t yo, std::size_t xo, std::size_t lo, std::size_t hi) {
          const long xoff = static_cast<long>(xo + lo) + q.dw;
          const T* g = gp + yo + lo;
          if (dxp) {
            const T* ws = wp + yo + lo;
            T* d = dxp + xoff;
            for (std::size_t i = 0; i < hi - lo; ++i) d[i] += ws[i] * g[i];
          }
          if (dwp) {
            const T* xs = xp + xoff;
            T* d = dwp + yo + lo;
            for (std::size_t i = 0; i < hi - lo; ++i) d[i] += g[i] * xs[i];
          }
        });
      }
    }
}

}  // namespace kernels

// y[n, c, p] = sum_q w[n, q * C + c, p] * x[n, c, p + q], zero padded.
template <class T>
Var<T> dynamic_depthwise_apply(Var<T> x, Var<T> w, const OffsetGrid& kernel) {
  Tensor5<T> y = kernels::dynamic_depthwise_forward(x.value(), w.value(), kernel);
  const std::size_t xi = x.id, wi = w.id;
  return x.tape->record(std::move(y), {x, w}, [xi, wi, kernel](Tape<T>& t, const Tensor5<T>& dy) {
    Tensor5<T>* dx = t.requires_grad(xi) ? &t.grad_slot(xi) : nullptr;
    Tensor5<T>* dw = t.requires_grad(wi) ? &t.grad_slot(wi) : nullptr;
    kernels::dynamic_depthwise_backward(dy, t.value(xi), t.value(wi), kernel, dx, dw);
  });
}

// Per-(n, c, p) sums over the offset axis of an offset-major weight tensor.
template <class T>
Tensor5<T> offset_sums(const Tensor5<T>& w, std::size_t offsets) {
  const Shape5 s = w.shape();
  if (offsets == 0 || s.c % offsets != 0) throw ShapeError("offset_sums: channel count not divisible by |R|");
  const std::size_t C = s.c / offsets;
  Tensor5<T> out({s.n, C, s.t, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t q = 0; q < offsets; ++q)
      for (std::size_t c = 0; c < C; ++c) {
        const T* wp = w.plane(n, q * C + c);
        T* op = out.plane(n, c);
        for (std::size_t i = 0; i < s.volume(); ++i) op[i] += wp[i];
      }
  return out;
}

// ---------------------------------------------------------------------------
// Generators (pre-activation logits)

// One convolution over the context field: C -> C * |R| channels.
inline ConvSpec single_conv_generator_spec(std::size_t channels, const OffsetGrid& kernel, const OffsetGrid& context) {
  return ConvSpec{channels, channels * kernel.size(), context, 1, {}, false};
}

template <class T>
Var<T> generate_weights_singleconv(Var<T> x, Var<T> theta, const OffsetGrid& kernel, const OffsetGrid& context) {
  return conv3d(x, theta, std::nullopt, single_conv_generator_spec(x.shape().c, kernel, context));
}

// Identity activations turn the generator into a linear map (receptive-field probing).
enum class GeneratorMode { normal, linear_probe };

template <class T>
struct ConvNetGeneratorParams {
  std::array<Var<T>, 3> weights;
  std::array<std::optional<Var<T>>, 2> biases;
};

template <class T>
Var<T> generate_weights_convnet(Var<T> x, const GeneratorPlan& plan, const ConvNetGeneratorParams<T>& p,
                                GeneratorMode mode = GeneratorMode::normal) {
  Var<T> h = conv3d(x, p.weights[0], p.biases[0], plan.layers[0]);
  if (mode == GeneratorMode::normal) h = selu(h);
  h = conv3d(h, p.weights[1], p.biases[1], plan.layers[1]);
  if (mode == GeneratorMode::normal) h = selu(h);
  return conv3d(h, p.weights[2], std::nullopt, plan.layers[2]);
}

template <class T>
Var<T> apply_activation(Var<T> logits, Activation a, std::size_t offsets) {
  switch (a) {
    case Activation::softmax: return softmax_over_offsets(logits, offsets);
    case Activation::relu: return relu(logits);
    case Activation::tanh: return tanh(logits);
  }
  throw ConfigError("unknown activation");
}

// Which input routes carry gradient. Disabling one detaches it without changing values.
struct GradientPaths {
  bool content = true;  // x inside the dynamic application
  bool context = true;  // x feeding the generator
};

template <class T>
class HBlock {
 public:
  HBlock(ParameterStore<T>& store, const std::string& name, HBlockConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t C = cfg_.channels;
    if (cfg_.generator == GeneratorKind::single_conv) {
      ConvSpec spec = single_conv_generator_spec(C, cfg_.kernel, cfg_.context);
      params_.push_back(&store.add(name + ".gen.weight", Tensor5<T>::zeros(spec.weight_shape()), true));
      return;
    }
    plan_ = make_generator_plan(C, cfg_.kernel, cfg_.context);
    for (std::size_t i = 0; i < 3; ++i) {
      const ConvSpec& spec = plan_->layers[i];
      const std::string lname = name + ".gen" + std::to_string(i + 1);
      Tensor5<T> w = Tensor5<T>::zeros(spec.weight_shape());
      if (i < 2) {
        // Variance 1 / fan_in suits the SELU layers.
        const double bound = std::sqrt(3.0 / static_cast<double>((spec.in_channels / spec.groups) * spec.grid.size()));
        w = uniform_tensor<T>(spec.weight_shape(), static_cast<T>(-bound), static_cast<T>(bound), rng);
      }
      params_.push_back(&store.add(lname + ".weight", std::move(w), true));
      if (spec.bias) params_.push_back(&store.add(lname + ".bias", Tensor5<T>::zeros(spec.bias_shape()), false));
    }
  }

  const HBlockConfig& config() const { return cfg_; }
  const std::optional<GeneratorPlan>& plan() const { return plan_; }
  const std::vector<Parameter<T>*>& parameters() const { return params_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto* p : params_) n += p->value.size();
    return n;
  }

  Var<T> logits(Var<T> x, GeneratorMode mode = GeneratorMode::normal) const {
    Tape<T>& tape = *x.tape;
    if (cfg_.generator == GeneratorKind::single_conv) {
      return generate_weights_singleconv(x, tape.parameter(*params_[0]), cfg_.kernel, cfg_.context);
    }
    ConvNetGeneratorParams<T> p{{tape.parameter(*params_[0]), tape.parameter(*params_[2]), tape.parameter(*params_[4])},
                                {tape.parameter(*params_[1]), tape.parameter(*params_[3])}};
    return generate_weights_convnet(x, *plan_, p, mode);
  }

  Var<T> weights(Var<T> x) const { return apply_activation(logits(x), cfg_.activation, cfg_.kernel.size()); }

  Var<T> forward(Var<T> x, GradientPaths paths = {}) const {
    if (x.shape().c != cfg_.channels) {
      throw ShapeError("H-block expects " + std::to_string(cfg_.channels) + " channels, got " + x.shape().str());
    }
    Var<T> ctx = paths.context ? x : detach(x);
    Var<T> content = paths.content ? x : detach(x);
    Var<T> y = dynamic_depthwise_apply(content, weights(ctx), cfg_.kernel);
    return cfg_.residual ? add(y, x) : y;
  }

  CostRows describe(const std::string& name, Shape5 in) const { return describe(name, cfg_, in); }

  static CostRows describe(const std::string& name, const HBlockConfig& cfg, Shape5 in) {
    CostRows rows;
    const std::size_t R = cfg.kernel.size();
    const Shape5 wshape{in.n, in.c * R, in.t, in.h, in.w};
    if (cfg.generator == GeneratorKind::single_conv) {
      rows.push_back(conv_cost(name + ".gen", single_conv_generator_spec(in.c, cfg.kernel, cfg.context), in));
    } else {
      GeneratorPlan plan = make_generator_plan(in.c, cfg.kernel, cfg.context);
      Shape5 s = in;
      for (std::size_t i = 0; i < 3; ++i) {
        rows.push_back(conv_cost(name + ".gen" + std::to_string(i + 1), plan.layers[i], s));
        s = plan.layers[i].output_shape(s);
        if (i < 2) rows.push_back(elementwise_cost(name + ".gen" + std::to_string(i + 1) + ".selu", s));
      }
    }
    rows.push_back(elementwise_cost(name + "." + to_string(cfg.activation), wshape));
    rows.push_back({name + ".apply", in, 0, static_cast<std::uint64_t>(in.numel()) * R, 0});
    if (cfg.residual) rows.push_back(elementwise_cost(name + ".residual", in));
    return rows;
  }

 private:
  HBlockConfig cfg_;
  std::optional<GeneratorPlan> plan_;
  std::vector<Parameter<T>*> params_;
};

// First-order counterpart: a learned static depthwise conv over the same kernel,
// initialised to the box average so both variants start from the same function.
template <class T>
class StaticDepthwise {
 public:
  StaticDepthwise(ParameterStore<T>& store, const std::string& name, const HBlockConfig& cfg)
      : spec_{cfg.channels, cfg.channels, cfg.kernel, cfg.channels, {}, false}, residual_(cfg.residual) {
    const T init = T{1} / static_cast<T>(cfg.kernel.size());
    weight_ = &store.add(name + ".dw.weight", Tensor5<T>(spec_.weight_shape(), init), true);
  }

  std::size_t param_count() const { return weight_->value.size(); }
  const ConvSpec& spec() const { return spec_; }

  Var<T> forward(Var<T> x) const {
    Var<T> y = conv3d(x, x.tape->parameter(*weight_), std::nullopt, spec_);
    return residual_ ? add(y, x) : y;
  }

  static CostRows describe(const std::string& name, const HBlockConfig& cfg, Shape5 in) {
    CostRows rows{conv_cost(name + ".dw", ConvSpec{cfg.channels, cfg.channels, cfg.kernel, cfg.channels, {}, false}, in)};
    if (cfg.residual) rows.push_back(elementwise_cost(name + ".residual", in));
    return rows;
  }

 private:
  ConvSpec spec_;
  bool residual_ = true;
  Parameter<T>* weight_ = nullptr;
};

}  // namespace hob
