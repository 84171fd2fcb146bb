#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "hob/analysis.hpp"
#include "hob/config.hpp"
#include "hob/gradcheck_suite.hpp"
#include "hob/train.hpp"

namespace fs = std::filesystem;
using namespace hob;

namespace {

struct Args {
  std::string config, out, checkpoint, stage;
};

void print(const std::string& line) { std::cout << line << '\n' << std::flush; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

int gen_data(const ExperimentConfig& c, const Args& a) {
  if (c.data_path) throw ConfigError("gen-data: data.path is set; nothing to generate");
  generate_dataset(a.out, c.data);
  write_resolved_config(a.out, c);
  print("wrote " + std::to_string(c.data.train_count) + " train and " + std::to_string(c.data.test_count) +
        " test clips to " + a.out);
  return 0;
}

template <class T>
int train_cmd(const ExperimentConfig& c, const Args& a) {
  const Splits data = load_splits(c);
  Model<T> model(c.backbone, c.insertion, derive_seed(c.seed, SeedStream::init));
  if (!a.checkpoint.empty()) load_checkpoint(a.checkpoint, model.store());
  write_resolved_config(a.out, c);
  auto r = train(model, data.train, data.test, c.train, derive_seed(c.seed, SeedStream::shuffle), print);
  write_log(fs::path(a.out) / "log.tsv", r.log);
  save_checkpoint(fs::path(a.out) / "checkpoint", model.store());
  print("final eval accuracy " + fmt("%.4f", r.final_eval_acc) + " in " + fmt("%.1f", r.seconds) + " s");
  return 0;
}

template <class T>
int eval_cmd(const ExperimentConfig& c, const Args& a) {
  const Splits data = load_splits(c);
  Model<T> model(c.backbone, c.insertion, derive_seed(c.seed, SeedStream::init));
  load_checkpoint(a.checkpoint, model.store());
  const EvalResult r = evaluate(model, data.test, c.train.batch_size, c.train.loss);
  print("loss\t" + fmt("%.17g", r.loss));
  print("accuracy\t" + fmt("%.17g", r.accuracy));
  if (!a.out.empty()) {
    write_resolved_config(a.out, c);
    std::ofstream(fs::path(a.out) / "eval.tsv", std::ios::binary)
        << "loss\taccuracy\n" << fmt("%.17g", r.loss) << '\t' << fmt("%.17g", r.accuracy) << '\n';
  }
  return 0;
}

template <class T>
int compare_cmd(const ExperimentConfig& c, const Args& a) {
  const Splits data = load_splits(c);
  const std::uint64_t seed = derive_seed(c.seed, SeedStream::init);
  std::vector<std::pair<std::string, double>> rows;
  auto r = compare_orders<T>(data.train, data.test, c.backbone, c.insertion, c.train, seed, {}, print);
  rows = {{"H", r.higher_order}, {"S", r.static_control}, {"H-shuffled", r.frame_shuffled}};
  if (c.texture_control && !c.data_path) {
    // Static texture task: both block kinds should solve it, separating capacity from order.
    ExperimentConfig tex = c;
    tex.data.task = TaskKind::texture;
    const Splits td = load_splits(tex);
    auto t = compare_orders<T>(td.train, td.test, c.backbone, c.insertion, c.train, seed, {false},
                               [](const std::string& l) { print("texture-" + l); });
    rows.push_back({"texture-H", t.higher_order});
    rows.push_back({"texture-S", t.static_control});
  }
  print("model\teval_acc");
  for (const auto& [tag, acc] : rows) print(tag + "\t" + fmt("%.4f", acc));
  if (!a.out.empty()) {
    write_resolved_config(a.out, c);
    std::ofstream out(fs::path(a.out) / "compare.tsv", std::ios::binary);
    out << "model\teval_acc\n";
    for (const auto& [tag, acc] : rows) out << tag << '\t' << fmt("%.17g", acc) << '\n';
  }
  return 0;
}

int gradcheck_cmd(const ExperimentConfig& c, const Args&) {
  print("op\tmax_rel_err\tcoords\tresult");
  auto r = run_gradcheck_suite(derive_seed(c.seed, SeedStream::gradcheck), 1e-4, [](const OpCheck& k) {
    print(k.op + "\t" + fmt("%.3e", k.report.max_rel_error) + "\t" + std::to_string(k.report.coords_checked) + "\t" +
          (k.report.passed ? "ok" : "FAIL (worst " + k.report.worst_param + "[" +
                                        std::to_string(k.report.worst_index) + "])"));
  });
  print(std::string(r.passed() ? "all ops within" : "gradient check FAILED at") + " rel-tol 1e-4 (" +
        fmt("%.1f", r.seconds) + " s)");
  return r.passed() ? 0 : 2;
}

int costs_cmd(const ExperimentConfig& c, const Args& a) {
  const auto rep = count_costs(c.backbone, c.insertion, FlopConvention::mac1);
  std::cout << rep.table();
  for (FlopConvention conv : {FlopConvention::mac1, FlopConvention::mac2}) {
    const FlopRatio r = flop_ratio(c.backbone, c.insertion, conv);
    print(to_string(conv) + ": baseline " + fmt("%.4g", double(r.baseline)) + " FLOPs, instrumented " +
          fmt("%.4g", double(r.instrumented)) + " FLOPs, ratio " + fmt("%.4f", r.ratio()));
  }
  const fs::path out = a.out.empty() ? fs::path(".") : fs::path(a.out);
  fs::create_directories(out);
  rep.write_tsv(out / "costs.tsv");
  count_costs(c.backbone, InsertionPlan{}, FlopConvention::mac1).write_tsv(out / "costs_baseline.tsv");
  write_resolved_config(out, c);
  return 0;
}

int probe_rf_cmd(const ExperimentConfig& c, const Args&) {
  print("context\tgenerator_support\tmatch");
  bool ok = true;
  // One row per generator configuration; the configured generator kind, a 3x3x3 kernel.
  for (const char* ctx : kContextMenu) {
    HBlockConfig cfg = c.insertion.block;
    cfg.kernel = OffsetGrid::parse("3x3x3");
    cfg.context = OffsetGrid::parse(ctx);
    cfg.channels = 27;
    const Support s = probe_generator(cfg, probe_volume(cfg.context.extents()));
    const bool match = s.str() == ctx;
    ok = ok && match;
    print(std::string(ctx) + "\t" + s.str() + "\t" + (match ? "yes" : "NO"));
  }
  return ok ? 0 : 2;
}

template <class T>
int dump_cmd(const ExperimentConfig& c, const Args& a) {
  const Splits data = load_splits(c);
  Model<T> model(c.backbone, c.insertion, derive_seed(c.seed, SeedStream::init));
  if (!a.checkpoint.empty()) load_checkpoint(a.checkpoint, model.store());
  const auto paths = dump_feature_maps(model, data.test.clips.front(), a.stage, a.out);
  write_resolved_config(a.out, c);
  print("wrote " + std::to_string(paths.size()) + " frames of " + a.stage + " to " + a.out);
  return 0;
}

template <template <class> class F>
int by_precision(const ExperimentConfig& c, const Args& a) {
  return c.precision == Precision::f64 ? F<double>::run(c, a) : F<float>::run(c, a);
}
template <class T> struct Train { static int run(const ExperimentConfig& c, const Args& a) { return train_cmd<T>(c, a); } };
template <class T> struct Eval { static int run(const ExperimentConfig& c, const Args& a) { return eval_cmd<T>(c, a); } };
template <class T> struct Compare { static int run(const ExperimentConfig& c, const Args& a) { return compare_cmd<T>(c, a); } };
template <class T> struct Dump { static int run(const ExperimentConfig& c, const Args& a) { return dump_cmd<T>(c, a); } };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Higher-order video blocks: data, training, analysis"};
  app.require_subcommand(1);
  Args args;
  std::function<int(const ExperimentConfig&, const Args&)> action;

  auto sub = [&](const char* name, const char* help, auto fn) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("--config", args.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    s->callback([&action, fn] { action = fn; });
    return s;
  };
  auto* gd = sub("gen-data", "write the synthetic train/test clips", gen_data);
  gd->add_option("--out", args.out, "output directory")->required();
  auto* tr = sub("train", "train a model; writes log.tsv and checkpoint/", by_precision<Train>);
  tr->add_option("--out", args.out, "output directory")->required();
  tr->add_option("--checkpoint", args.checkpoint, "initialise from this checkpoint");
  auto* ev = sub("eval", "evaluate a checkpoint on the test split", by_precision<Eval>);
  ev->add_option("--checkpoint", args.checkpoint, "checkpoint directory")->required();
  ev->add_option("--out", args.out, "optional output directory");
  auto* co = sub("compare-orders", "higher-order vs static vs frame-shuffled", by_precision<Compare>);
  co->add_option("--out", args.out, "optional output directory");
  sub("gradcheck", "finite-difference check of every op", gradcheck_cmd);
  auto* cs = sub("costs", "per-layer params and FLOPs; writes costs.tsv", costs_cmd);
  cs->add_option("--out", args.out, "output directory (default: current)");
  sub("probe-rf", "impulse-probe the generator context field", probe_rf_cmd);
  auto* df = sub("dump-features", "write per-frame feature maps as PGM", by_precision<Dump>);
  df->add_option("--stage", args.stage, "conv1, pool1, res2, pool2, res3, res4 or res5")->required();
  df->add_option("--out", args.out, "output directory")->required();
  df->add_option("--checkpoint", args.checkpoint, "optional checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const ExperimentConfig cfg = load_config(args.config);
    return action(cfg, args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
