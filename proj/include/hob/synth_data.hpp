#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hob/errors.hpp"
#include "hob/hot1.hpp"
#include "hob/tensor.hpp"
#include "json.hpp"

namespace hob {

// xor: a hand square slides horizontally past a static object square.
//   A = hand moves left to right, B = hand is right of the object.
// texture: a static striped patch, horizontal or vertical. No motion at all.
enum class TaskKind { xor_motion, texture };
enum class LabelRule { two_class, four_class };

inline std::string to_string(TaskKind k) { return k == TaskKind::xor_motion ? "xor" : "texture"; }
inline std::string to_string(LabelRule r) { return r == LabelRule::two_class ? "two-class" : "four-class"; }
inline TaskKind parse_task(const std::string& s) {
  if (s == "xor") return TaskKind::xor_motion;
  if (s == "texture") return TaskKind::texture;
  throw ConfigError("task '" + s + "' not in {xor, texture}");
}
inline LabelRule parse_label_rule(const std::string& s) {
  if (s == "two-class") return LabelRule::two_class;
  if (s == "four-class") return LabelRule::four_class;
  throw ConfigError("label rule '" + s + "' not in {two-class, four-class}");
}

struct XorTaskConfig {
  TaskKind task = TaskKind::xor_motion;
  std::size_t frames = 8, height = 32, width = 32;
  std::size_t object_size = 8;
  std::size_t hand_size = 4;
  std::size_t speed = 2;  // pixels per frame
  double noise = 0.05;
  std::uint64_t seed = 0;
  std::size_t train_count = 512;
  std::size_t test_count = 256;
  LabelRule rule = LabelRule::two_class;

  std::size_t classes() const { return task == TaskKind::texture || rule == LabelRule::two_class ? 2 : 4; }
  std::size_t travel() const { return speed * (frames - 1); }

  void validate() const {
    if (frames < 2 || height == 0 || width == 0) throw ConfigError("clip needs at least 2 frames and a nonempty frame");
    if (object_size == 0 || hand_size == 0) throw ConfigError("object and hand sizes must be positive");
    if (noise < 0 || !std::isfinite(noise)) throw ConfigError("noise must be a finite value >= 0");
    if (train_count % 4 != 0 || test_count % 4 != 0 || train_count == 0 || test_count == 0) {
      throw ConfigError("sample counts must be positive multiples of 4 for exact class balance");
    }
    if (task == TaskKind::texture) {
      if (object_size < 4 || object_size > height || object_size > width) {
        throw ConfigError("texture patch of " + std::to_string(object_size) + " px does not fit the frame");
      }
      return;
    }
    // Object, one-pixel gap and the hand's whole sweep must fit side by side.
    const std::size_t need = object_size + 1 + hand_size + travel();
    if (need > width || object_size > height || hand_size > height) {
      throw ConfigError("infeasible geometry: object " + std::to_string(object_size) + " + gap 1 + hand " +
                        std::to_string(hand_size) + " + sweep " + std::to_string(travel()) + " = " +
                        std::to_string(need) + " px exceeds frame width " + std::to_string(width));
    }
  }

  nlohmann::ordered_json to_json() const {
    return {{"task", to_string(task)},     {"frames", frames},
            {"height", height},            {"width", width},
            {"object_size", object_size},  {"hand_size", hand_size},
            {"speed", speed},              {"noise", noise},
            {"seed", seed},                {"train_count", train_count},
            {"test_count", test_count},    {"label_rule", to_string(rule)}};
  }
};

struct ClipMeta {
  int label = 0;
  bool a = false;
  bool b = false;
};

inline int label_for(LabelRule rule, bool a, bool b) {
  return rule == LabelRule::two_class ? static_cast<int>(a != b) : 2 * static_cast<int>(a) + static_cast<int>(b);
}

struct LabeledClip {
  Tensor5<float> clip;  // (1, 1, T, H, W)
  ClipMeta meta;
};

namespace detail {

inline void fill_rect(Tensor5<float>& x, std::size_t t, std::size_t y0, std::size_t x0, std::size_t size, float v) {
  for (std::size_t h = y0; h < y0 + size; ++h)
    for (std::size_t w = x0; w < x0 + size; ++w) x(0, 0, t, h, w) = v;
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace detail

// Renders one clip for the given factor pair.
inline LabeledClip render_clip(const XorTaskConfig& cfg, bool a, bool b, std::mt19937_64& rng) {
  LabeledClip out{Tensor5<float>({1, 1, cfg.frames, cfg.height, cfg.width}), {label_for(cfg.rule, a, b), a, b}};
  if (cfg.task == TaskKind::texture) {
    out.meta = {static_cast<int>(a), a, false};
    const std::size_t s = cfg.object_size;
    const std::size_t y0 = detail::uniform_index(rng, 0, cfg.height - s);
    const std::size_t x0 = detail::uniform_index(rng, 0, cfg.width - s);
    const std::size_t phase = detail::uniform_index(rng, 0, 1);
    for (std::size_t t = 0; t < cfg.frames; ++t)
      for (std::size_t h = 0; h < s; ++h)
        for (std::size_t w = 0; w < s; ++w) {
          const std::size_t k = (a ? w : h) + phase;
          out.clip(0, 0, t, y0 + h, x0 + w) = (k / 2) % 2 == 0 ? 1.0f : 0.25f;
        }
  } else {
    const std::size_t obj = cfg.object_size, hand = cfg.hand_size, sweep = cfg.travel();
    const std::size_t span = hand + sweep;  // horizontal extent covered by the hand
    // Place the object so the hand's span fits on the requested side.
    const std::size_t obj_x = b ? detail::uniform_index(rng, 0, cfg.width - obj - 1 - span)
                                : detail::uniform_index(rng, span + 1, cfg.width - obj);
    const std::size_t lo = b ? obj_x + obj + 1 : 0;
    const std::size_t hi = b ? cfg.width - span : obj_x - 1 - span;
    // The start of the sweep is drawn independently of the direction, so the set of
    // hand positions in a clip carries no information about A.
    const std::size_t left = detail::uniform_index(rng, lo, hi);
    const std::size_t obj_y = detail::uniform_index(rng, 0, cfg.height - obj);
    const std::size_t hand_y = detail::uniform_index(rng, 0, cfg.height - hand);
    for (std::size_t t = 0; t < cfg.frames; ++t) {
      const std::size_t step = cfg.speed * (a ? t : cfg.frames - 1 - t);
      detail::fill_rect(out.clip, t, obj_y, obj_x, obj, 0.5f);
      detail::fill_rect(out.clip, t, hand_y, left + step, hand, 1.0f);
    }
  }
  if (cfg.noise > 0) {
    std::normal_distribution<double> d(0.0, cfg.noise);
    for (float& v : out.clip.data()) v += static_cast<float>(d(rng));
  }
  return out;
}

// Balanced set: factor pairs cycle (A, B) in {00, 01, 10, 11}, then the order is shuffled.
inline std::vector<LabeledClip> generate_clips(const XorTaskConfig& cfg, std::size_t count, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::vector<std::pair<bool, bool>> factors;
  for (std::size_t i = 0; i < count; ++i) factors.emplace_back((i & 2) != 0, (i & 1) != 0);
  std::shuffle(factors.begin(), factors.end(), rng);
  std::vector<LabeledClip> clips;
  clips.reserve(count);
  for (auto [a, b] : factors) clips.push_back(render_clip(cfg, a, b, rng));
  return clips;
}

inline std::string clip_filename(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.hot1", i);
  return buf;
}

inline void write_dataset(const std::filesystem::path& dir, const XorTaskConfig& cfg, const std::string& split,
                          const std::vector<LabeledClip>& clips) {
  std::filesystem::create_directories(dir / "clips");
  std::ofstream labels(dir / "labels.tsv", std::ios::binary);
  labels << "index\tlabel\tA\tB\n";
  for (std::size_t i = 0; i < clips.size(); ++i) {
    write_hot1(dir / "clips" / clip_filename(i), clips[i].clip);
    labels << i << '\t' << clips[i].meta.label << '\t' << int(clips[i].meta.a) << '\t' << int(clips[i].meta.b) << '\n';
  }
  if (!labels) throw std::runtime_error("failed writing " + (dir / "labels.tsv").string());
  nlohmann::ordered_json meta = cfg.to_json();
  meta["split"] = split;
  meta["count"] = clips.size();
  meta["classes"] = cfg.classes();
  std::ofstream(dir / "meta.json", std::ios::binary) << meta.dump(2) << '\n';
}

// Writes <out>/train and <out>/test. Train and test draw from disjoint seed streams.
inline void generate_dataset(const std::filesystem::path& out, const XorTaskConfig& cfg) {
  cfg.validate();
  write_dataset(out / "train", cfg, "train", generate_clips(cfg, cfg.train_count, cfg.seed * 2 + 0));
  write_dataset(out / "test", cfg, "test", generate_clips(cfg, cfg.test_count, cfg.seed * 2 + 1));
}

// ---------------------------------------------------------------------------
// Loading

struct Dataset {
  std::vector<Tensor5<float>> clips;  // each (1, 1, T, H, W), normalised per clip
  std::vector<ClipMeta> meta;
  std::size_t classes = 2;

  std::size_t size() const { return clips.size(); }
  Shape5 clip_shape() const { return clips.empty() ? Shape5{} : clips.front().shape(); }
};

// Zero mean, unit variance per clip. A constant clip only loses its mean.
inline void normalize_clip(Tensor5<float>& x) {
  double mean = 0, sq = 0;
  for (float v : x.data()) mean += v;
  mean /= static_cast<double>(x.size());
  for (float v : x.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(x.size()));
  const double inv = sd > 1e-12 ? 1.0 / sd : 1.0;
  for (float& v : x.data()) v = static_cast<float>((v - mean) * inv);
}

inline Dataset from_clips(const std::vector<LabeledClip>& clips, std::size_t classes) {
  Dataset d;
  d.classes = classes;
  for (const auto& c : clips) {
    d.clips.push_back(c.clip);
    normalize_clip(d.clips.back());
    d.meta.push_back(c.meta);
  }
  return d;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto labels_path = dir / "labels.tsv";
  std::ifstream in(labels_path);
  if (!in) throw FormatError("missing " + labels_path.string());
  Dataset d;
  if (std::ifstream meta_in(dir / "meta.json"); meta_in) {
    try {
      auto meta = nlohmann::json::parse(meta_in);
      d.classes = meta.at("classes").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError((dir / "meta.json").string() + ": " + e.what());
    }
  } else {
    throw FormatError("missing " + (dir / "meta.json").string());
  }
  std::string line;
  std::getline(in, line);
  if (line != "index\tlabel\tA\tB") throw FormatError(labels_path.string() + ": bad header '" + line + "'");
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::size_t index;
    int label, a, b;
    if (!(fields >> index >> label >> a >> b) || index != row || label < 0 ||
        static_cast<std::size_t>(label) >= d.classes) {
      throw FormatError(labels_path.string() + ": malformed row " + std::to_string(row + 2) + " '" + line + "'");
    }
    Tensor5<float> clip = read_hot1<float>(dir / "clips" / clip_filename(index));
    if (!d.clips.empty() && clip.shape() != d.clips.front().shape()) {
      throw FormatError((dir / "clips" / clip_filename(index)).string() + ": shape " + clip.shape().str() +
                        " differs from " + d.clips.front().shape().str());
    }
    if (clip.shape().n != 1 || clip.shape().c != 1) {
      throw FormatError((dir / "clips" / clip_filename(index)).string() + ": expected one grayscale clip, got " +
                        clip.shape().str());
    }
    normalize_clip(clip);
    d.clips.push_back(std::move(clip));
    d.meta.push_back({label, a != 0, b != 0});
    ++row;
  }
  if (d.clips.empty()) throw FormatError(labels_path.string() + ": no clips");
  return d;
}

// Each clip gets its own random frame order; order-dependent signal is destroyed.
inline Dataset shuffle_frames(Dataset d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& clip : d.clips) {
    const Shape5 s = clip.shape();
    std::vector<std::size_t> perm(s.t);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor5<float> out(s);
    const std::size_t frame = s.h * s.w;
    for (std::size_t t = 0; t < s.t; ++t)
      std::copy_n(clip.data().data() + perm[t] * frame, frame, out.data().data() + t * frame);
    clip = std::move(out);
  }
  return d;
}

struct Batch {
  Tensor5<float> clips;  // (n, 1, T, H, W)
  std::vector<int> labels;
};

// Index lists for one pass; shuffled with `seed` when shuffle is set. The last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size, bool shuffle,
                                                           std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(count, i + batch_size)));
  return out;
}

inline Batch make_batch(const Dataset& d, const std::vector<std::size_t>& idx) {
  const Shape5 s = d.clip_shape();
  Batch b{Tensor5<float>({idx.size(), s.c, s.t, s.h, s.w}), {}};
  const std::size_t per = s.c * s.volume();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(d.clips.at(idx[i]).data().data(), per, b.clips.data().data() + i * per);
    b.labels.push_back(d.meta[idx[i]].label);
  }
  return b;
}

}  // namespace hob
