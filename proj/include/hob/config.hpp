#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include "hob/model_zoo.hpp"
#include "hob/synth_data.hpp"
#include "hob/train.hpp"
#include "json.hpp"

namespace hob {

enum class Precision { f32, f64 };

// Everything a CLI run needs. Defaults describe the desk-scale XOR experiment.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  BackboneSpec backbone = [] {
    BackboneSpec b;
    b.width_scale = 16;
    b.blocks = {1, 1, 1, 1};
    b.input = {8, 32, 32};
    b.in_channels = 1;
    b.classes = 2;
    return b;
  }();
  std::optional<std::string> insertion_preset;
  InsertionPlan insertion = [] {
    InsertionPlan p;
    p.sites = {{1, 1}};
    return p;
  }();
  XorTaskConfig data;
  std::optional<std::string> data_path;  // load <path>/train and <path>/test instead of generating
  TrainConfig train = [] {
    TrainConfig t;
    t.epochs = 15;
    t.lr_steps = {10};
    return t;
  }();
  bool texture_control = true;

  void validate() const {
    backbone.validate();
    insertion.validate(backbone);
    train.validate();
    if (!data_path) data.validate();
  }
};

namespace config_detail {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }
  ~Section() noexcept(false) = default;

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }
  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::optional<Section> sub(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), path_ + "." + key);
  }

  // Strict schema: any key never asked for is a typo.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + path_ + "." + it.key());
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void check_unsigned(const json& j, const std::string& where) {
  if (!j.is_number_unsigned()) throw ConfigError(where + " must be a non-negative integer");
}

}  // namespace config_detail

inline ExperimentConfig parse_config(const nlohmann::json& root) {
  using config_detail::Section;
  ExperimentConfig c;
  Section top(root, "config");
  if (top.has("seed")) config_detail::check_unsigned(root.at("seed"), "config.seed");
  top.get("seed", c.seed);
  std::string precision = "f32";
  top.get("precision", precision);
  if (precision == "f32") c.precision = Precision::f32;
  else if (precision == "f64") c.precision = Precision::f64;
  else throw ConfigError("config.precision '" + precision + "' not in {f32, f64}");

  if (auto b = top.sub("backbone")) {
    b->get("width_scale", c.backbone.width_scale);
    b->get("blocks", c.backbone.blocks);
    if (b->has("input")) {
      std::array<std::size_t, 3> in{};
      b->get("input", in);
      c.backbone.input = {in[0], in[1], in[2]};
    }
    b->get("in_channels", c.backbone.in_channels);
    b->get("classes", c.backbone.classes);
    std::string norm = "batch";
    b->get("norm", norm);
    if (norm == "batch") c.backbone.norm = NormMode::batch;
    else if (norm == "off") c.backbone.norm = NormMode::off;
    else throw ConfigError("config.backbone.norm '" + norm + "' not in {batch, off}");
    b->finish();
  }

  if (auto h = top.sub("hblock")) {
    std::string kernel = c.insertion.block.kernel.str(), context = c.insertion.block.context.str();
    std::string generator = to_string(c.insertion.block.generator), activation = to_string(c.insertion.block.activation);
    h->get("kernel", kernel);
    h->get("context", context);
    h->get("generator", generator);
    h->get("activation", activation);
    h->get("residual", c.insertion.block.residual);
    c.insertion.block.kernel = OffsetGrid::parse(kernel);
    c.insertion.block.context = OffsetGrid::parse(context);
    c.insertion.block.generator = parse_generator(generator);
    c.insertion.block.activation = parse_activation(activation);
    h->finish();
  }

  if (auto ins = top.sub("insertion")) {
    if (ins->has("preset") && ins->has("sites")) throw ConfigError("config.insertion: give preset or sites, not both");
    if (ins->has("preset")) {
      std::string preset;
      ins->get("preset", preset);
      c.insertion.sites = InsertionPlan::preset(preset);
      c.insertion_preset = preset;
    }
    if (ins->has("sites")) {
      std::vector<std::string> sites;
      ins->get("sites", sites);
      c.insertion.sites.clear();
      for (const auto& s : sites) c.insertion.sites.push_back(Site::parse(s));
    }
    std::string kind = to_string(c.insertion.kind);
    ins->get("kind", kind);
    c.insertion.kind = parse_block_kind(kind);
    ins->finish();
  }

  if (auto d = top.sub("data")) {
    if (d->has("path")) {
      std::string p;
      d->get("path", p);
      c.data_path = p;
    }
    std::string task = to_string(c.data.task), rule = to_string(c.data.rule);
    d->get("task", task);
    d->get("frames", c.data.frames);
    d->get("height", c.data.height);
    d->get("width", c.data.width);
    d->get("object_size", c.data.object_size);
    d->get("hand_size", c.data.hand_size);
    d->get("speed", c.data.speed);
    d->get("noise", c.data.noise);
    d->get("train_count", c.data.train_count);
    d->get("test_count", c.data.test_count);
    d->get("label_rule", rule);
    c.data.task = parse_task(task);
    c.data.rule = parse_label_rule(rule);
    d->finish();
  }
  c.data.seed = derive_seed(c.seed, SeedStream::data);

  if (auto t = top.sub("train")) {
    t->get("epochs", c.train.epochs);
    t->get("batch_size", c.train.batch_size);
    t->get("lr", c.train.lr);
    t->get("lr_steps", c.train.lr_steps);
    t->get("momentum", c.train.momentum);
    t->get("weight_decay", c.train.weight_decay);
    std::string loss = to_string(c.train.loss);
    t->get("loss", loss);
    c.train.loss = parse_loss(loss);
    t->finish();
  }

  if (auto cmp = top.sub("compare")) {
    cmp->get("texture_control", c.texture_control);
    cmp->finish();
  }
  top.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

// Fully resolved form; parse_config(to_json(c)) reproduces c.
inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["precision"] = c.precision == Precision::f32 ? "f32" : "f64";
  j["backbone"] = {{"width_scale", c.backbone.width_scale},
                   {"blocks", c.backbone.blocks},
                   {"input", {c.backbone.input.t, c.backbone.input.h, c.backbone.input.w}},
                   {"in_channels", c.backbone.in_channels},
                   {"classes", c.backbone.classes},
                   {"norm", c.backbone.norm == NormMode::batch ? "batch" : "off"}};
  std::vector<std::string> sites;
  for (const auto& s : c.insertion.sites) sites.push_back(s.str());
  j["insertion"] = {{"sites", sites}, {"kind", to_string(c.insertion.kind)}};
  const auto& h = c.insertion.block;
  j["hblock"] = {{"kernel", h.kernel.str()},
                 {"context", h.context.str()},
                 {"generator", to_string(h.generator)},
                 {"activation", to_string(h.activation)},
                 {"residual", h.residual}};
  nlohmann::ordered_json d = c.data.to_json();
  d.erase("seed");  // derived from the top-level seed
  if (c.data_path) d["path"] = *c.data_path;
  j["data"] = d;
  j["train"] = {{"epochs", c.train.epochs},   {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},           {"lr_steps", c.train.lr_steps},
                {"momentum", c.train.momentum}, {"weight_decay", c.train.weight_decay},
                {"loss", to_string(c.train.loss)}};
  j["compare"] = {{"texture_control", c.texture_control}};
  return j;
}

inline void write_resolved_config(const std::filesystem::path& dir, const ExperimentConfig& c) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "resolved_config.json", std::ios::binary) << to_json(c).dump(2) << '\n';
}

struct Splits {
  Dataset train, test;
};

// Generated in memory from the data section, or read from <data.path>/{train,test}.
inline Splits load_splits(const ExperimentConfig& c) {
  Splits s;
  if (c.data_path) {
    s.train = load_dataset(std::filesystem::path(*c.data_path) / "train");
    s.test = load_dataset(std::filesystem::path(*c.data_path) / "test");
    const Shape5 want = c.backbone.input_shape(1);
    for (const Dataset* d : {&s.train, &s.test}) {
      if (d->clip_shape() != want) {
        throw ConfigError("dataset clips are " + d->clip_shape().str() + ", backbone expects " + want.str());
      }
      if (d->classes != c.backbone.classes) {
        throw ConfigError("dataset has " + std::to_string(d->classes) + " classes, backbone.classes is " +
                          std::to_string(c.backbone.classes));
      }
    }
    return s;
  }
  if (c.backbone.in_channels != 1) throw ConfigError("synthetic clips are grayscale: backbone.in_channels must be 1");
  if (ClipShape{c.data.frames, c.data.height, c.data.width} != c.backbone.input) {
    throw ConfigError("data clip shape differs from backbone.input");
  }
  if (c.data.classes() != c.backbone.classes) {
    throw ConfigError("data has " + std::to_string(c.data.classes()) + " classes, backbone.classes is " +
                      std::to_string(c.backbone.classes));
  }
  s.train = from_clips(generate_clips(c.data, c.data.train_count, c.data.seed * 2 + 0), c.data.classes());
  s.test = from_clips(generate_clips(c.data, c.data.test_count, c.data.seed * 2 + 1), c.data.classes());
  return s;
}

}  // namespace hob
