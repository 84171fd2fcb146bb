#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sys/wait.h>

#include "hob/config.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

hob::ExperimentConfig parse(const std::string& text) { return hob::parse_config(json::parse(text)); }

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const hob::ConfigError& e) {
    return e.what();
  }
  return "<no error>";
}

TEST(Config, EmptyDocumentResolvesToDefaults) {
  auto c = parse("{}");
  EXPECT_EQ(c.backbone.width_scale, 16u);
  EXPECT_EQ(c.insertion.sites.size(), 1u);
  EXPECT_EQ(c.insertion.sites[0].str(), "res3-1");
  EXPECT_EQ(c.train.epochs, 15u);
  EXPECT_EQ(c.data.seed, hob::derive_seed(0, hob::SeedStream::data));
}

TEST(Config, ResolvedFormRoundTrips) {
  for (const char* name : {"smoke.json", "xor.json", "full_scale.json"}) {
    auto c = hob::load_config(fs::path(HOB_CONFIGS) / name);
    const auto j = hob::to_json(c);
    auto again = hob::parse_config(json::parse(j.dump()));
    EXPECT_EQ(hob::to_json(again).dump(), j.dump()) << name;
  }
}

TEST(Config, PresetExpandsToSites) {
  auto c = hob::load_config(fs::path(HOB_CONFIGS) / "full_scale.json");
  EXPECT_EQ(c.insertion.sites, hob::InsertionPlan::preset("5-block"));
  EXPECT_EQ(c.insertion.block.context.str(), "5x5x5");
}

TEST(Config, UnknownKeysAreRejectedByPath) {
  EXPECT_NE(error_of(R"({"sed": 3})").find("config.sed"), std::string::npos);
  EXPECT_NE(error_of(R"({"hblock": {"contxt": "5x5x5"}})").find("config.hblock.contxt"), std::string::npos);
  EXPECT_NE(error_of(R"({"train": {"epochs": 2, "lr_step": [1]}})").find("lr_step"), std::string::npos);
}

TEST(Config, EnumsAreCheckedAgainstMenus) {
  EXPECT_THROW(parse(R"({"hblock": {"kernel": "5x5x5"}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"hblock": {"context": "9x9x9"}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"hblock": {"activation": "gelu"}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"hblock": {"generator": "mlp"}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"insertion": {"kind": "dynamic"}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"insertion": {"preset": "2-block"}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"precision": "f16"})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"backbone": {"norm": "layer"}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"train": {"loss": "hinge"}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"data": {"label_rule": "three-class"}})"), hob::ConfigError);
}

TEST(Config, StructuralErrors) {
  EXPECT_THROW(parse("[]"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"seed": -1})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"seed": "7"})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"train": {"epochs": "ten"}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"backbone": {"input": [8, 32]}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"insertion": {"preset": "1-block", "sites": ["res3-1"]}})"), hob::ConfigError);
  // res3-2 does not exist with one block per stage
  EXPECT_THROW(parse(R"({"insertion": {"sites": ["res3-2"]}})"), hob::ConfigError);
  EXPECT_THROW(parse(R"({"data": {"train_count": 10}})"), hob::ConfigError);
  EXPECT_THROW(hob::load_config("/nonexistent/config.json"), hob::ConfigError);
}

TEST(Config, SyntheticDataMustMatchBackbone) {
  auto c = parse(R"({"backbone": {"input": [4, 32, 32]}})");
  EXPECT_THROW(hob::load_splits(c), hob::ConfigError);
  c = parse(R"({"data": {"label_rule": "four-class"}})");
  EXPECT_THROW(hob::load_splits(c), hob::ConfigError);
}

TEST(Config, DatasetOnDiskEqualsInMemory) {
  auto c = hob::load_config(fs::path(HOB_CONFIGS) / "smoke.json");
  const auto mem = hob::load_splits(c);
  auto dir = fs::temp_directory_path() / "hob_cfg_data";
  fs::remove_all(dir);
  hob::generate_dataset(dir, c.data);
  c.data_path = dir.string();
  const auto disk = hob::load_splits(c);
  ASSERT_EQ(disk.train.size(), mem.train.size());
  ASSERT_EQ(disk.test.size(), mem.test.size());
  for (std::size_t i = 0; i < mem.train.size(); ++i) {
    EXPECT_EQ(disk.train.clips[i].vec(), mem.train.clips[i].vec());
    EXPECT_EQ(disk.train.meta[i].label, mem.train.meta[i].label);
  }
}

// ---------------------------------------------------------------------------
// Command line

int run(const std::string& args, const fs::path& out_file = {}) {
  std::string cmd = std::string(HOB_CLI) + " " + args;
  cmd += out_file.empty() ? " > /dev/null 2>&1" : " > " + out_file.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const std::string smoke = std::string(HOB_CONFIGS) + "/smoke.json";

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("train --out /tmp/x"), 1);
  EXPECT_EQ(run("costs --config /nonexistent.json"), 1);
  EXPECT_EQ(run("frobnicate --config " + smoke), 1);
}

TEST(Cli, InvalidConfigExitsOne) {
  auto bad = fs::temp_directory_path() / "hob_bad.json";
  std::ofstream(bad) << R"({"hblock": {"kernel": "3x3x3", "colour": 1}})";
  auto log = fs::temp_directory_path() / "hob_bad.out";
  EXPECT_EQ(run("costs --config " + bad.string(), log), 1);
  EXPECT_NE(slurp(log).find("colour"), std::string::npos);
}

TEST(Cli, MissingCheckpointExitsOne) {
  EXPECT_EQ(run("eval --config " + smoke + " --checkpoint /nonexistent"), 1);
}

TEST(Cli, GradcheckPasses) {
  auto log = fs::temp_directory_path() / "hob_gradcheck.out";
  EXPECT_EQ(run("gradcheck --config " + smoke, log), 0);
  const std::string out = slurp(log);
  EXPECT_NE(out.find("hblock-convnet-softmax"), std::string::npos);
  EXPECT_EQ(out.find("FAIL"), std::string::npos);
}

TEST(Cli, CostsWritesTableAndRatio) {
  auto dir = fs::temp_directory_path() / "hob_costs_cli";
  fs::remove_all(dir);
  auto log = fs::temp_directory_path() / "hob_costs.out";
  ASSERT_EQ(run("costs --config " + std::string(HOB_CONFIGS) + "/full_scale.json --out " + dir.string(), log), 0);
  EXPECT_TRUE(fs::exists(dir / "costs.tsv"));
  EXPECT_TRUE(fs::exists(dir / "resolved_config.json"));
  const std::string out = slurp(log);
  EXPECT_NE(out.find("MAC=1: baseline"), std::string::npos);
  EXPECT_NE(out.find("MAC=2: baseline"), std::string::npos);
}

TEST(Cli, TrainTwiceGivesIdenticalLogs) {
  std::vector<std::string> logs;
  for (int i = 0; i < 2; ++i) {
    auto dir = fs::temp_directory_path() / ("hob_cli_train_" + std::to_string(i));
    fs::remove_all(dir);
    ASSERT_EQ(run("train --config " + smoke + " --out " + dir.string()), 0);
    logs.push_back(slurp(dir / "log.tsv") + slurp(dir / "checkpoint" / "fc.weight.hot1"));
    EXPECT_TRUE(fs::exists(dir / "resolved_config.json"));
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_GT(logs[0].size(), 100u);
}

TEST(Cli, ResolvedConfigReproducesRun) {
  auto a = fs::temp_directory_path() / "hob_cli_rerun_a", b = fs::temp_directory_path() / "hob_cli_rerun_b";
  fs::remove_all(a);
  fs::remove_all(b);
  ASSERT_EQ(run("train --config " + smoke + " --out " + a.string()), 0);
  ASSERT_EQ(run("train --config " + (a / "resolved_config.json").string() + " --out " + b.string()), 0);
  EXPECT_EQ(slurp(a / "log.tsv"), slurp(b / "log.tsv"));
  EXPECT_EQ(slurp(a / "resolved_config.json"), slurp(b / "resolved_config.json"));
}

TEST(Cli, AnalysisAndComparisonSubcommands) {
  auto dir = fs::temp_directory_path() / "hob_cli_misc";
  fs::remove_all(dir);
  auto log = fs::temp_directory_path() / "hob_cli_misc.out";
  EXPECT_EQ(run("probe-rf --config " + smoke, log), 0);
  EXPECT_NE(slurp(log).find("7x7x7\t7x7x7\tyes"), std::string::npos);
  ASSERT_EQ(run("compare-orders --config " + smoke + " --out " + (dir / "cmp").string(), log), 0);
  const std::string cmp = slurp(dir / "cmp" / "compare.tsv");
  EXPECT_EQ(cmp.substr(0, cmp.find('\n')), "model\teval_acc");
  EXPECT_NE(cmp.find("H-shuffled\t"), std::string::npos);
  ASSERT_EQ(run("dump-features --config " + smoke + " --stage conv1 --out " + (dir / "maps").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "maps" / "conv1_frame03.pgm"));
  EXPECT_EQ(run("dump-features --config " + smoke + " --stage res9 --out " + (dir / "maps").string()), 1);
}

TEST(Cli, GenDataThenTrainFromDisk) {
  auto dir = fs::temp_directory_path() / "hob_cli_gen";
  fs::remove_all(dir);
  ASSERT_EQ(run("gen-data --config " + smoke + " --out " + (dir / "data").string()), 0);
  auto c = hob::to_json(hob::load_config(smoke));
  c["data"]["path"] = (dir / "data").string();
  std::ofstream(dir / "disk.json") << c.dump();
  ASSERT_EQ(run("train --config " + (dir / "disk.json").string() + " --out " + (dir / "a").string()), 0);
  ASSERT_EQ(run("train --config " + smoke + " --out " + (dir / "b").string()), 0);
  EXPECT_EQ(slurp(dir / "a" / "log.tsv"), slurp(dir / "b" / "log.tsv"));
}

}  // namespace
