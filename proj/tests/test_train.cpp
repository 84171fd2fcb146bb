#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "hob/train.hpp"
#include "oracles.hpp"

namespace {

namespace fs = std::filesystem;
using hob::ParameterStore;
using hob::SgdState;
using hob::Tensor5;

Tensor5<double> vec3(double a, double b, double c) { return Tensor5<double>({1, 1, 1, 1, 3}, std::vector<double>{a, b, c}); }

TEST(Sgd, PlainStepWithoutMomentumOrDecay) {
  ParameterStore<double> s;
  auto& p = s.add("w", vec3(1.0, -2.0, 0.5));
  p.grad = vec3(0.5, 0.25, -1.0);
  SgdState<double> st;
  hob::sgd_step(s, st, 0.1, 0.0, 0.0);
  EXPECT_EQ(p.value.vec(), (std::vector<double>{1.0 - 0.05, -2.0 - 0.025, 0.5 + 0.1}));
}

TEST(Sgd, ZeroGradientWithoutDecayLeavesParameters) {
  ParameterStore<double> s;
  auto& p = s.add("w", vec3(1.0, -2.0, 0.5));
  SgdState<double> st;
  for (int i = 0; i < 20; ++i) hob::sgd_step(s, st, 0.1, 0.9, 0.0);
  EXPECT_EQ(p.value.vec(), vec3(1.0, -2.0, 0.5).vec());
}

TEST(Sgd, QuadraticBowlMatchesRecurrence) {
  ParameterStore<double> s;
  auto& p = s.add("theta", vec3(1.5, -0.7, 3.0));
  SgdState<double> st;
  std::vector<double> theta = p.value.vec(), v(3, 0.0);
  for (int step = 0; step < 10; ++step) {
    p.grad = p.value;  // f = theta^2 / 2
    hob::sgd_step(s, st, 0.1, 0.9, 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
      v[i] = 0.9 * v[i] + theta[i];
      theta[i] -= 0.1 * v[i];
    }
    for (std::size_t i = 0; i < 3; ++i) ASSERT_NEAR(p.value.data()[i], theta[i], 1e-12) << "step " << step;
  }
}

TEST(Sgd, ZeroLearningRateChangesNothing) {
  ParameterStore<double> s;
  auto& p = s.add("w", vec3(1.0, 2.0, 3.0));
  auto& b = s.add("b", vec3(4.0, 5.0, 6.0), false);
  p.grad = vec3(1.0, 1.0, 1.0);
  b.grad = vec3(-1.0, 2.0, 0.0);
  SgdState<double> st;
  hob::sgd_step(s, st, 0.0, 0.9, 1e-2);
  EXPECT_EQ(p.value.vec(), vec3(1.0, 2.0, 3.0).vec());
  EXPECT_EQ(b.value.vec(), vec3(4.0, 5.0, 6.0).vec());
}

TEST(Sgd, DecayOnlyTouchesFlaggedParameters) {
  ParameterStore<double> s;
  auto& w = s.add("conv.weight", vec3(1.0, 1.0, 1.0), true);
  auto& b = s.add("conv.bias", vec3(1.0, 1.0, 1.0), false);
  SgdState<double> st;
  hob::sgd_step(s, st, 0.1, 0.9, 0.1);
  EXPECT_EQ(b.value.vec(), vec3(1.0, 1.0, 1.0).vec());
  for (double x : w.value.data()) EXPECT_NEAR(x, 1.0 - 0.1 * 0.1, 1e-15);
}

TEST(Sgd, NonFiniteGradientNamesParameter) {
  ParameterStore<double> s;
  s.add("ok", vec3(1, 1, 1));
  auto& bad = s.add("res3.1.a.weight", vec3(1, 1, 1));
  bad.grad.data()[1] = std::nan("");
  SgdState<double> st;
  try {
    hob::sgd_step(s, st, 0.1, 0.9, 0.0);
    FAIL();
  } catch (const hob::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("res3.1.a.weight"), std::string::npos);
  }
  EXPECT_EQ(bad.value.vec(), vec3(1, 1, 1).vec());
}

TEST(TrainConfig, ScheduleAndValidation) {
  hob::TrainConfig c;
  EXPECT_EQ(c.lr_at(0), 0.01);
  EXPECT_EQ(c.lr_at(14), 0.01);
  EXPECT_NEAR(c.lr_at(15), 0.001, 1e-18);
  EXPECT_NEAR(c.lr_at(29), 0.001, 1e-18);
  EXPECT_EQ(c.momentum, 0.9);
  EXPECT_EQ(c.weight_decay, 1e-4);
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), hob::ConfigError);
  c = {};
  c.weight_decay = -1;
  EXPECT_THROW(c.validate(), hob::ConfigError);
}

// ---------------------------------------------------------------------------
// End-to-end on tiny models

hob::BackboneSpec tiny_spec() {
  hob::BackboneSpec s;
  s.width_scale = 16;
  s.blocks = {1, 1, 1, 1};
  s.input = {2, 16, 16};
  s.in_channels = 1;
  s.classes = 2;
  return s;
}

hob::InsertionPlan one_block() {
  hob::InsertionPlan p;
  p.sites = {{1, 1}};
  return p;
}

hob::Dataset random_dataset(std::size_t n, std::uint64_t seed, const hob::BackboneSpec& spec) {
  hob::Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    d.clips.push_back(oracle::randn({1, 1, spec.input.t, spec.input.h, spec.input.w}, seed + i).cast<float>());
    d.meta.push_back({static_cast<int>(i % 2), false, false});
  }
  return d;
}

TEST(Train, MemorisesFourSamples) {
  auto spec = tiny_spec();
  hob::Model<float> model(spec, one_block(), 1);
  auto data = random_dataset(4, 10, spec);
  hob::TrainConfig cfg;
  cfg.epochs = 500;
  cfg.batch_size = 4;
  cfg.weight_decay = 0;
  cfg.lr_steps = {};
  auto r = hob::train(model, data, data, cfg, 2);
  double best = 1e9;
  for (const auto& e : r.log) best = std::min(best, e.train_loss);
  EXPECT_LT(best, 0.01);
  EXPECT_NEAR(r.first_batch_loss, std::log(2.0), 1e-6);
}

TEST(Train, ZeroEpochsOnlyEvaluates) {
  auto spec = tiny_spec();
  hob::Model<float> model(spec, one_block(), 1);
  auto data = random_dataset(8, 20, spec);
  hob::TrainConfig cfg;
  cfg.epochs = 0;
  const auto before = model.store().params()[0].value.vec();
  std::vector<std::string> lines;
  auto r = hob::train(model, data, data, cfg, 3, [&](const std::string& l) { lines.push_back(l); });
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.log[0].epoch, 0u);
  EXPECT_TRUE(std::isnan(r.log[0].train_loss));
  EXPECT_NEAR(r.final_eval_acc, 0.5, 1e-12);  // zero classifier predicts class 0 for every clip
  EXPECT_EQ(model.store().params()[0].value.vec(), before);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], hob::log_header());
  EXPECT_EQ(lines[1].substr(0, 2), "0\t");
}

TEST(Train, BinarySigmoidLossTrains) {
  auto spec = tiny_spec();
  hob::Model<float> model(spec, hob::InsertionPlan{}, 1);
  auto data = random_dataset(4, 30, spec);
  hob::TrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 4;
  cfg.loss = hob::LossKind::binary_sigmoid;
  cfg.lr_steps = {};
  auto r = hob::train(model, data, data, cfg, 4);
  EXPECT_NEAR(r.first_batch_loss, std::log(2.0), 1e-6);
  EXPECT_LT(r.log.back().train_loss, 0.5 * std::log(2.0));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Train, SameSeedGivesIdenticalLogsAndCheckpoints) {
  auto spec = tiny_spec();
  auto data = random_dataset(8, 40, spec);
  hob::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  std::vector<std::string> outputs;
  for (int run = 0; run < 2; ++run) {
    hob::Model<double> model(spec, one_block(), 7);
    auto r = hob::train(model, data, data, cfg, 9);
    auto dir = fs::temp_directory_path() / ("hob_train_det_" + std::to_string(run));
    fs::remove_all(dir);
    fs::create_directories(dir);
    hob::write_log(dir / "log.tsv", r.log);
    hob::save_checkpoint(dir / "checkpoint", model.store());
    std::string all = slurp(dir / "log.tsv");
    for (const auto& p : model.store().params()) all += slurp(dir / "checkpoint" / (p.name + ".hot1"));
    outputs.push_back(all);
  }
  EXPECT_EQ(outputs[0], outputs[1]);
}

}  // namespace
