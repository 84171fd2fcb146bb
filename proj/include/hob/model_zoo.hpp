#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "hob/autodiff.hpp"
#include "hob/costs.hpp"
#include "hob/hblock.hpp"
#include "hob/nn_ops.hpp"
#include "hob/seeds.hpp"

namespace hob {

inline constexpr std::array<const char*, 4> kStageNames{"res2", "res3", "res4", "res5"};

struct ClipShape {
  std::size_t t = 32, h = 224, w = 224;
  friend bool operator==(const ClipShape&, const ClipShape&) = default;
};

// ResNet-50 I3D with every channel count divided by width_scale.
struct BackboneSpec {
  std::size_t width_scale = 1;
  std::array<std::size_t, 4> blocks{3, 4, 6, 3};
  ClipShape input;
  std::size_t in_channels = 3;
  std::size_t classes = 400;
  NormMode norm = NormMode::batch;

  std::size_t stem_channels() const { return 64 / width_scale; }
  std::size_t inner_channels(std::size_t stage) const { return (std::size_t{64} << stage) / width_scale; }
  std::size_t out_channels(std::size_t stage) const { return 4 * inner_channels(stage); }
  Shape5 input_shape(std::size_t batch = 1) const { return {batch, in_channels, input.t, input.h, input.w}; }

  void validate() const {
    if (width_scale == 0 || 64 % width_scale != 0) {
      throw ConfigError("width_scale must divide 64, got " + std::to_string(width_scale));
    }
    for (std::size_t s = 0; s < 4; ++s)
      if (blocks[s] == 0) throw ConfigError(std::string(kStageNames[s]) + " needs at least one block");
    if (classes == 0) throw ConfigError("classes must be positive");
    if (in_channels == 0) throw ConfigError("in_channels must be positive");
    // conv1, pool1, res3 and res4 each halve H and W; pool2 halves T.
    if (input.t < 2 || input.h < 16 || input.w < 16) {
      throw ConfigError("input " + std::to_string(input.t) + "x" + std::to_string(input.h) + "x" +
                        std::to_string(input.w) + " underflows the stride ladder (need T >= 2, H, W >= 16)");
    }
  }
};

// ---------------------------------------------------------------------------
// Insertion sites

struct Site {
  std::size_t stage = 1;  // 0 = res2 .. 3 = res5
  std::size_t index = 1;  // 1-based position within the stage

  std::string str() const { return std::string(kStageNames[stage]) + "-" + std::to_string(index); }
  friend bool operator==(const Site&, const Site&) = default;
  friend auto operator<=>(const Site&, const Site&) = default;

  static Site parse(const std::string& s) {
    for (std::size_t k = 0; k < 4; ++k) {
      const std::string prefix = std::string(kStageNames[k]) + "-";
      if (s.rfind(prefix, 0) != 0) continue;
      const std::string rest = s.substr(prefix.size());
      if (rest.empty() || !std::all_of(rest.begin(), rest.end(), [](char c) { return c >= '0' && c <= '9'; })) break;
      const std::size_t i = std::stoul(rest);
      if (i == 0) break;
      return {k, i};
    }
    throw ConfigError("bad insertion site '" + s + "' (expected resK-i, e.g. res3-2)");
  }
};

enum class BlockKind { higher_order, static_depthwise };

inline std::string to_string(BlockKind k) { return k == BlockKind::higher_order ? "higher-order" : "static-depthwise"; }
inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "higher-order") return BlockKind::higher_order;
  if (s == "static-depthwise") return BlockKind::static_depthwise;
  throw ConfigError("block kind '" + s + "' not in {higher-order, static-depthwise}");
}

// Sites plus one block configuration shared by all of them. The channel count in
// `block` is ignored; each site uses its stage's output width.
struct InsertionPlan {
  std::vector<Site> sites;
  HBlockConfig block;
  BlockKind kind = BlockKind::higher_order;

  static std::vector<Site> preset(const std::string& name) {
    if (name == "none") return {};
    if (name == "1-block") return {{1, 2}};
    if (name == "3-block") return {{1, 2}, {2, 2}, {2, 4}};
    if (name == "5-block") return {{1, 1}, {1, 3}, {2, 1}, {2, 3}, {2, 5}};
    throw ConfigError("unknown insertion preset '" + name + "' (none, 1-block, 3-block, 5-block)");
  }

  HBlockConfig config_for(const BackboneSpec& spec, const Site& s) const {
    HBlockConfig c = block;
    c.channels = spec.out_channels(s.stage);
    return c;
  }

  bool has(const Site& s) const { return std::find(sites.begin(), sites.end(), s) != sites.end(); }

  void validate(const BackboneSpec& spec) const {
    std::vector<Site> seen;
    for (const Site& s : sites) {
      if (s.stage >= 4 || s.index == 0 || s.index > spec.blocks[s.stage]) {
        throw ConfigError("insertion site " + (s.stage < 4 ? s.str() : std::string("?")) + " out of range (" +
                          (s.stage < 4 ? std::string(kStageNames[s.stage]) + " has " +
                                             std::to_string(spec.blocks[s.stage]) + " blocks"
                                       : std::string("unknown stage")) +
                          ")");
      }
      if (std::find(seen.begin(), seen.end(), s) != seen.end()) {
        throw ConfigError("duplicate insertion site " + s.str());
      }
      seen.push_back(s);
      HBlockConfig c = config_for(spec, s);
      if (kind == BlockKind::higher_order) {
        c.validate();
      } else {
        HBlockConfig probe = c;
        probe.generator = GeneratorKind::single_conv;  // static blocks have no channel floor
        probe.validate();
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Layer plan shared by the live model and the cost description

struct BottleneckPlan {
  std::string name;  // e.g. res3.2
  std::size_t stage = 0, index = 1;
  ConvSpec a, b, c;
  std::optional<ConvSpec> proj;
};

inline ConvSpec stem_spec(const BackboneSpec& s) {
  return ConvSpec{s.in_channels, s.stem_channels(), OffsetGrid(2, 3, 3), 1, {1, 2, 2}, s.norm == NormMode::off};
}
inline OffsetGrid pool1_window() { return OffsetGrid(0, 1, 1); }
inline Stride pool1_stride() { return {1, 2, 2}; }
inline OffsetGrid pool2_window() { return OffsetGrid(1, 0, 0); }
inline Stride pool2_stride() { return {2, 1, 1}; }

inline std::vector<BottleneckPlan> bottleneck_plans(const BackboneSpec& s) {
  std::vector<BottleneckPlan> out;
  const bool bias = s.norm == NormMode::off;
  std::size_t in = s.stem_channels();
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t inner = s.inner_channels(k), width = s.out_channels(k);
    for (std::size_t i = 1; i <= s.blocks[k]; ++i) {
      const Stride st = (i == 1 && (k == 1 || k == 2)) ? Stride{1, 2, 2} : Stride{};
      BottleneckPlan p;
      p.name = std::string(kStageNames[k]) + "." + std::to_string(i);
      p.stage = k;
      p.index = i;
      p.a = ConvSpec{in, inner, OffsetGrid(1, 0, 0), 1, {}, bias};
      p.b = ConvSpec{inner, inner, OffsetGrid(0, 1, 1), 1, st, bias};
      p.c = ConvSpec{inner, width, OffsetGrid(0, 0, 0), 1, {}, bias};
      if (in != width || !st.unit()) p.proj = ConvSpec{in, width, OffsetGrid(0, 0, 0), 1, st, bias};
      out.push_back(std::move(p));
      in = width;
    }
  }
  return out;
}

// One row per stage output, in forward order.
struct StageShape {
  std::string stage;
  Shape5 output;
};

using FeatureMaps = std::map<std::string, Tensor5<double>>;

// ---------------------------------------------------------------------------
// Live model

template <class T>
class Model {
 public:
  Model(const BackboneSpec& spec, const InsertionPlan& plan, std::uint64_t seed) : spec_(spec), plan_(plan) {
    spec_.validate();
    plan_.validate(spec_);
    Rng rng(derive_seed(seed, SeedStream::init));
    Rng insert_rng(derive_seed(seed, SeedStream::insert));

    stem_ = Conv3d<T>(store_, "conv1", stem_spec(spec_), he_uniform<T>(stem_spec(spec_), rng));
    stem_bn_ = BatchNorm3d<T>(store_, "conv1.bn", spec_.stem_channels(), spec_.norm);
    for (auto& p : bottleneck_plans(spec_)) {
      auto b = std::make_unique<Bottleneck>();
      b->plan = p;
      b->a = Conv3d<T>(store_, p.name + ".a", p.a, he_uniform<T>(p.a, rng));
      b->a_bn = BatchNorm3d<T>(store_, p.name + ".a.bn", p.a.out_channels, spec_.norm);
      b->b = Conv3d<T>(store_, p.name + ".b", p.b, he_uniform<T>(p.b, rng));
      b->b_bn = BatchNorm3d<T>(store_, p.name + ".b.bn", p.b.out_channels, spec_.norm);
      // The last layer of each residual branch starts at zero so every block begins as
      // the identity: through the normalisation scale when there is one, else the weights.
      Tensor5<T> wc = he_uniform<T>(p.c, rng);
      if (spec_.norm == NormMode::off) wc.fill(T{0});
      b->c = Conv3d<T>(store_, p.name + ".c", p.c, std::move(wc));
      b->c_bn = BatchNorm3d<T>(store_, p.name + ".c.bn", p.c.out_channels, spec_.norm, T{0});
      if (p.proj) {
        b->proj = Conv3d<T>(store_, p.name + ".proj", *p.proj, he_uniform<T>(*p.proj, rng));
        b->proj_bn = BatchNorm3d<T>(store_, p.name + ".proj.bn", p.proj->out_channels, spec_.norm);
      }
      const Site site{p.stage, p.index};
      if (plan_.has(site)) {
        HBlockConfig cfg = plan_.config_for(spec_, site);
        if (plan_.kind == BlockKind::higher_order) {
          b->hblock = std::make_unique<HBlock<T>>(store_, p.name + ".hblock", cfg, insert_rng);
        } else {
          b->static_block = std::make_unique<StaticDepthwise<T>>(store_, p.name + ".hblock", cfg);
        }
      }
      blocks_.push_back(std::move(b));
    }
    const std::size_t feat = spec_.out_channels(3);
    fc_weight_ = &store_.add("fc.weight", Tensor5<T>::zeros({spec_.classes, feat, 1, 1, 1}), true);
    fc_bias_ = &store_.add("fc.bias", Tensor5<T>::zeros({1, spec_.classes, 1, 1, 1}), false);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const BackboneSpec& spec() const { return spec_; }
  const InsertionPlan& plan() const { return plan_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }
  std::size_t parameter_count() const { return store_.parameter_count(); }

  std::size_t inserted_blocks() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += (b->hblock || b->static_block) ? 1 : 0;
    return n;
  }

  std::vector<const HBlock<T>*> hblocks() const {
    std::vector<const HBlock<T>*> out;
    for (const auto& b : blocks_)
      if (b->hblock) out.push_back(b->hblock.get());
    return out;
  }

  // Returns logits of shape (n, classes, 1, 1, 1). Stage outputs are copied into
  // `features` when it is given.
  Var<T> forward(Var<T> x, bool training, FeatureMaps* features = nullptr) {
    if (x.shape().c != spec_.in_channels || x.shape().t != spec_.input.t || x.shape().h != spec_.input.h ||
        x.shape().w != spec_.input.w) {
      throw ShapeError("model expects input " + spec_.input_shape(x.shape().n).str() + ", got " + x.shape().str());
    }
    auto keep = [&](const std::string& name, const Var<T>& v) {
      if (features) (*features)[name] = v.value().template cast<double>();
    };
    Var<T> h = relu(stem_bn_.forward(stem_.forward(x), training));
    keep("conv1", h);
    h = maxpool3d(h, pool1_window(), pool1_stride());
    keep("pool1", h);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      Bottleneck& b = *blocks_[i];
      h = b.forward(h, training);
      const bool last_in_stage = i + 1 == blocks_.size() || blocks_[i + 1]->plan.stage != b.plan.stage;
      if (last_in_stage) keep(kStageNames[b.plan.stage], h);
      if (last_in_stage && b.plan.stage == 0) {
        h = maxpool3d(h, pool2_window(), pool2_stride());
        keep("pool2", h);
      }
    }
    Var<T> pooled = global_avg_pool(h);
    return linear(pooled, x.tape->parameter(*fc_weight_), x.tape->parameter(*fc_bias_));
  }

  // Spec-level per-layer costs; allocates nothing, so it also serves full-scale inputs.
  static CostRows describe(const BackboneSpec& spec, const InsertionPlan& plan, std::size_t batch = 1) {
    spec.validate();
    plan.validate(spec);
    CostRows rows;
    const std::uint64_t bn = spec.norm == NormMode::batch ? 1 : 0;
    auto norm_relu = [&](const std::string& name, Shape5 s, bool relu_after) {
      if (bn) rows.push_back(elementwise_cost(name + ".bn", s, 2 * s.c));
      if (relu_after) rows.push_back(elementwise_cost(name + ".relu", s));
    };
    Shape5 s = spec.input_shape(batch);
    rows.push_back(conv_cost("conv1", stem_spec(spec), s));
    s = rows.back().output;
    norm_relu("conv1", s, true);
    s = strided_shape(s, s.c, pool1_stride());
    rows.push_back(elementwise_cost("pool1", s));
    const auto plans = bottleneck_plans(spec);
    for (std::size_t i = 0; i < plans.size(); ++i) {
      const BottleneckPlan& p = plans[i];
      const Shape5 in = s;
      rows.push_back(conv_cost(p.name + ".a", p.a, s));
      s = rows.back().output;
      norm_relu(p.name + ".a", s, true);
      rows.push_back(conv_cost(p.name + ".b", p.b, s));
      s = rows.back().output;
      norm_relu(p.name + ".b", s, true);
      rows.push_back(conv_cost(p.name + ".c", p.c, s));
      s = rows.back().output;
      norm_relu(p.name + ".c", s, false);
      if (p.proj) {
        rows.push_back(conv_cost(p.name + ".proj", *p.proj, in));
        norm_relu(p.name + ".proj", s, false);
      }
      rows.push_back(elementwise_cost(p.name + ".add", s));
      rows.push_back(elementwise_cost(p.name + ".relu", s));
      const Site site{p.stage, p.index};
      if (plan.has(site)) {
        const HBlockConfig cfg = plan.config_for(spec, site);
        CostRows h = plan.kind == BlockKind::higher_order ? HBlock<T>::describe(p.name + ".hblock", cfg, s)
                                                           : StaticDepthwise<T>::describe(p.name + ".hblock", cfg, s);
        rows.insert(rows.end(), h.begin(), h.end());
      }
      const bool last_in_stage = i + 1 == plans.size() || plans[i + 1].stage != p.stage;
      if (last_in_stage && p.stage == 0) {
        s = strided_shape(s, s.c, pool2_stride());
        rows.push_back(elementwise_cost("pool2", s));
      }
    }
    const std::size_t feat = s.c;
    rows.push_back({"gap", {batch, feat, 1, 1, 1}, 0, 0, s.numel()});
    rows.push_back({"fc", {batch, spec.classes, 1, 1, 1}, spec.classes * feat + spec.classes,
                    static_cast<std::uint64_t>(batch) * spec.classes * feat, batch * spec.classes});
    return rows;
  }

  // Output shape after each named stage, as laid out in the backbone table.
  static std::vector<StageShape> stage_shapes(const BackboneSpec& spec, std::size_t batch = 1) {
    CostRows rows = describe(spec, InsertionPlan{}, batch);
    std::vector<StageShape> out;
    auto last_row = [&](const std::string& prefix) {
      Shape5 found{};
      for (const auto& r : rows)
        if (r.name.rfind(prefix, 0) == 0) found = r.output;
      return found;
    };
    out.push_back({"conv1", last_row("conv1")});
    out.push_back({"pool1", last_row("pool1")});
    out.push_back({"res2", last_row("res2.")});
    out.push_back({"pool2", last_row("pool2")});
    for (std::size_t k = 1; k < 4; ++k) out.push_back({kStageNames[k], last_row(std::string(kStageNames[k]) + ".")});
    return out;
  }

 private:
  struct Bottleneck {
    BottleneckPlan plan;
    Conv3d<T> a, b, c, proj;
    BatchNorm3d<T> a_bn, b_bn, c_bn, proj_bn;
    std::unique_ptr<HBlock<T>> hblock;
    std::unique_ptr<StaticDepthwise<T>> static_block;

    Var<T> forward(Var<T> x, bool training) {
      Var<T> h = relu(a_bn.forward(a.forward(x), training));
      h = relu(b_bn.forward(b.forward(h), training));
      h = c_bn.forward(c.forward(h), training);
      Var<T> shortcut = plan.proj ? proj_bn.forward(proj.forward(x), training) : x;
      Var<T> y = relu(add(h, shortcut));
      if (hblock) y = hblock->forward(y);
      if (static_block) y = static_block->forward(y);
      return y;
    }
  };

  BackboneSpec spec_;
  InsertionPlan plan_;
  ParameterStore<T> store_;
  Conv3d<T> stem_;
  BatchNorm3d<T> stem_bn_;
  std::vector<std::unique_ptr<Bottleneck>> blocks_;
  Parameter<T>* fc_weight_ = nullptr;
  Parameter<T>* fc_bias_ = nullptr;
};

}  // namespace hob
