#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hob/costs.hpp"
#include "hob/hblock.hpp"
#include "hob/model_zoo.hpp"

namespace hob {

// ---------------------------------------------------------------------------
// Cost accounting

enum class FlopConvention { mac1 = 1, mac2 = 2 };

inline FlopConvention parse_convention(const std::string& s) {
  if (s == "MAC=1") return FlopConvention::mac1;
  if (s == "MAC=2") return FlopConvention::mac2;
  throw ConfigError("FLOP convention '" + s + "' not in {MAC=1, MAC=2}");
}
inline std::string to_string(FlopConvention c) { return c == FlopConvention::mac1 ? "MAC=1" : "MAC=2"; }

struct CostReport {
  CostRows rows;
  FlopConvention convention = FlopConvention::mac1;

  std::uint64_t flops(const CostRow& r) const {
    return r.macs * static_cast<std::uint64_t>(convention) + r.elementwise;
  }
  std::uint64_t total_flops() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += flops(r);
    return t;
  }
  std::uint64_t total_params() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.params;
    return t;
  }
  std::uint64_t total_macs() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.macs;
    return t;
  }

  std::string table() const {
    std::size_t wn = 5, ws = 12;
    for (const auto& r : rows) {
      wn = std::max(wn, r.name.size());
      ws = std::max(ws, r.output.str().size());
    }
    std::ostringstream o;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s  %-*s  %14s  %18s\n", int(wn), "layer", int(ws), "output", "params",
                  ("flops " + to_string(convention)).c_str());
    o << buf;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%-*s  %-*s  %14llu  %18llu\n", int(wn), r.name.c_str(), int(ws),
                    r.output.str().c_str(), static_cast<unsigned long long>(r.params),
                    static_cast<unsigned long long>(flops(r)));
      o << buf;
    }
    std::snprintf(buf, sizeof buf, "%-*s  %-*s  %14llu  %18llu\n", int(wn), "total", int(ws), "",
                  static_cast<unsigned long long>(total_params()), static_cast<unsigned long long>(total_flops()));
    o << buf;
    return o.str();
  }

  void write_tsv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    out << "layer\toutput\tparams\tmacs\telementwise\tflops\n";
    for (const auto& r : rows)
      out << r.name << '\t' << r.output.str() << '\t' << r.params << '\t' << r.macs << '\t' << r.elementwise << '\t'
          << flops(r) << '\n';
    out << "total\t\t" << total_params() << '\t' << total_macs() << "\t\t" << total_flops() << '\n';
    if (!out) throw std::runtime_error("failed writing " + path.string());
  }
};

inline CostReport count_costs(const BackboneSpec& spec, const InsertionPlan& plan, FlopConvention c,
                              std::size_t batch = 1) {
  return {Model<float>::describe(spec, plan, batch), c};
}

struct FlopRatio {
  std::uint64_t baseline = 0;
  std::uint64_t instrumented = 0;
  double ratio() const { return static_cast<double>(instrumented) / static_cast<double>(baseline); }
};

inline FlopRatio flop_ratio(const BackboneSpec& spec, const InsertionPlan& plan, FlopConvention c) {
  return {count_costs(spec, InsertionPlan{}, c).total_flops(), count_costs(spec, plan, c).total_flops()};
}

// ---------------------------------------------------------------------------
// Receptive-field probing

struct Support {
  std::size_t t = 0, h = 0, w = 0;
  std::string str() const { return std::to_string(t) + "x" + std::to_string(h) + "x" + std::to_string(w); }
  friend bool operator==(const Support&, const Support&) = default;
};

// Nonzero extent of d(sum of outputs at the centre position)/dx for a shape-preserving
// subnet. The probe volume must be large enough that the support stays interior.
inline Support probe_receptive_field(const std::function<Var<double>(Var<double>)>& subnet, Shape5 probe) {
  Tape<double> tape;
  Var<double> x = tape.input(Tensor5<double>::zeros(probe));
  Var<double> y = subnet(x);
  const Shape5 ys = y.shape();
  if (ys.t != probe.t || ys.h != probe.h || ys.w != probe.w) throw ContractError("probe subnet must preserve shape");
  Tensor5<double> mask(ys);
  for (std::size_t n = 0; n < ys.n; ++n)
    for (std::size_t c = 0; c < ys.c; ++c) mask(n, c, ys.t / 2, ys.h / 2, ys.w / 2) = 1.0;
  tape.backward(sum(mul(y, tape.constant(mask))));
  const Tensor5<double>* g = tape.grad(x);
  std::size_t lo[3] = {SIZE_MAX, SIZE_MAX, SIZE_MAX}, hi[3] = {0, 0, 0};
  bool any = false;
  for (std::size_t n = 0; n < probe.n; ++n)
    for (std::size_t c = 0; c < probe.c; ++c)
      for (std::size_t t = 0; t < probe.t; ++t)
        for (std::size_t h = 0; h < probe.h; ++h)
          for (std::size_t w = 0; w < probe.w; ++w) {
            if (!g || (*g)(n, c, t, h, w) == 0.0) continue;
            any = true;
            const std::size_t p[3] = {t, h, w};
            for (int a = 0; a < 3; ++a) {
              lo[a] = std::min(lo[a], p[a]);
              hi[a] = std::max(hi[a], p[a]);
            }
          }
  if (!any) throw ContractError("receptive-field probe: gradient vanished everywhere");
  const std::size_t dims[3] = {probe.t, probe.h, probe.w};
  for (int a = 0; a < 3; ++a)
    if (lo[a] == 0 || hi[a] + 1 == dims[a]) {
      throw ContractError("receptive-field probe touches the border of a " + probe.str() +
                          " volume; the support would be clipped");
    }
  return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
}

// Linear stack of convolutions with all-positive weights, so no contribution cancels.
inline Support probe_conv_stack(const std::vector<ConvSpec>& layers, Shape5 probe) {
  std::vector<Tensor5<double>> weights;
  for (const auto& l : layers) weights.emplace_back(l.weight_shape(), 1.0);
  return probe_receptive_field(
      [&](Var<double> x) {
        for (std::size_t i = 0; i < layers.size(); ++i)
          x = conv3d(x, x.tape->constant(weights[i]), std::nullopt,
                     ConvSpec{layers[i].in_channels, layers[i].out_channels, layers[i].grid, layers[i].groups, {},
                              false});
        return x;
      },
      probe);
}

// Context field actually read by an H-block generator, probed in linear mode with positive weights.
inline Support probe_generator(const HBlockConfig& cfg, Shape5 probe) {
  ParameterStore<double> store;
  Rng rng(0);
  HBlock<double> block(store, "probe", cfg, rng);
  for (auto* p : block.parameters()) p->value.fill(0.01);
  probe.c = cfg.channels;
  return probe_receptive_field([&](Var<double> x) { return block.logits(x, GeneratorMode::linear_probe); }, probe);
}

// Smallest probe volume that keeps a support of the given extents interior.
inline Shape5 probe_volume(const Extents& e, std::size_t channels = 1) {
  return {1, channels, 2 * static_cast<std::size_t>(e.t) + 3, 2 * static_cast<std::size_t>(e.h) + 3,
          2 * static_cast<std::size_t>(e.w) + 3};
}

// ---------------------------------------------------------------------------
// Feature-map export

struct Graymap {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> pixels;
};

inline void write_pgm(const std::filesystem::path& path, const Graymap& g) {
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << g.width << ' ' << g.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

// Channel-mean of |a| for one frame, min-max scaled to 0..255, resized by nearest neighbour.
// A frame with zero range becomes uniform mid-gray.
inline Graymap render_frame(const Tensor5<double>& a, std::size_t n, std::size_t t, std::size_t out_h,
                            std::size_t out_w) {
  const Shape5 s = a.shape();
  std::vector<double> m(s.h * s.w, 0.0);
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t i = 0; i < s.h * s.w; ++i) m[i] += std::abs(a(n, c, t, i / s.w, i % s.w));
  for (double& v : m) v /= static_cast<double>(s.c);
  const auto [mn, mx] = std::minmax_element(m.begin(), m.end());
  const double lo = *mn, range = *mx - *mn;
  Graymap g{out_w, out_h, std::vector<unsigned char>(out_h * out_w)};
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const double v = m[(y * s.h / out_h) * s.w + x * s.w / out_w];
      g.pixels[y * out_w + x] =
          range > 0 ? static_cast<unsigned char>(std::lround(255.0 * (v - lo) / range)) : static_cast<unsigned char>(128);
    }
  return g;
}

inline std::vector<std::string> feature_stages() { return {"conv1", "pool1", "res2", "pool2", "res3", "res4", "res5"}; }

// Writes <stage>_frameNN.pgm for the first clip in `clip`; returns the written paths.
template <class T>
std::vector<std::filesystem::path> dump_feature_maps(Model<T>& model, const Tensor5<float>& clip, const std::string& stage,
                                                     const std::filesystem::path& out_dir) {
  const auto stages = feature_stages();
  if (std::find(stages.begin(), stages.end(), stage) == stages.end()) {
    throw ConfigError("unknown stage '" + stage + "' (conv1, pool1, res2, pool2, res3, res4, res5)");
  }
  FeatureMaps features;
  Tape<T> tape;
  model.forward(tape.constant(clip.cast<T>()), false, &features);
  const Tensor5<double>& a = features.at(stage);
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t t = 0; t < a.shape().t; ++t) {
    char name[96];
    std::snprintf(name, sizeof name, "%s_frame%02zu.pgm", stage.c_str(), t);
    paths.push_back(out_dir / name);
    write_pgm(paths.back(), render_frame(a, 0, t, clip.shape().h, clip.shape().w));
  }
  return paths;
}

}  // namespace hob
