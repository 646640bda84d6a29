// stagenet: synthetic data generation, staged training, evaluation,
// ablation and saliency export.
//
// Exit codes: 0 success, 2 usage error, 1 runtime or data error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stagenet/data.hpp"
#include "stagenet/metrics.hpp"
#include "stagenet/model.hpp"
#include "stagenet/pipeline.hpp"
#include "stagenet/report.hpp"

namespace fs = std::filesystem;
using namespace stagenet;

namespace {

nlohmann::json read_json(const std::string& path) {
  const auto bytes = io::read_file(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path + "': invalid JSON: " + e.what());
  }
}

void write_json(const std::string& path, const nlohmann::json& j) {
  const std::string text = j.dump(2) + "\n";
  io::write_file(path, std::span<const char>(text.data(), text.size()));
}

std::string counts_str(const std::vector<std::size_t>& counts) {
  std::string s = "[";
  for (std::size_t i = 0; i < counts.size(); ++i) s += (i ? "," : "") + std::to_string(counts[i]);
  return s + "]";
}

struct SynthArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a) {
  SynthSpec spec = synth_spec_from_json(read_json(a.spec));
  if (a.seed) spec.seed = *a.seed;
  const Dataset ds = synth_generate(spec);
  save_dataset(ds, a.out);
  std::cout << "wrote " << ds.size() << " samples to " << a.out << "\nclass counts " << counts_str(ds.class_counts()) << "\n";
  return 0;
}

struct TrainArgs {
  std::string plan, out_dir;
  std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a) {
  const StagePlan plan = load_plan(a.plan);
  validate_plan(plan);
  fs::create_directories(a.out_dir);
  const PlanResult result = run_plan(plan, a.seed);
  const fs::path dir(a.out_dir);
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    const std::string name = plan.stages[i].name;
    RunRecord rec = result.records[i];
    rec.checkpoint = name + ".ckpt";
    save_checkpoint(result.checkpoints[i], (dir / rec.checkpoint).string());
    write_json((dir / (name + ".run.json")).string(), to_json(rec));
    std::cout << "stage " << name << ": best epoch " << rec.best_epoch << ", val loss "
              << detail::fmt("%.6f", rec.val_losses[rec.best_epoch - 1]) << "\n";
  }
  if (plan.evaluate.kind != InitRef::Kind::none) save_checkpoint(result.evaluated, (dir / "evaluated.ckpt").string());
  write_json((dir / "metrics.json").string(), to_json(result.metrics));
  std::cout << "\n" << render_metrics(result.metrics);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, dataset, report;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a) {
  const Network net = network_from_checkpoint(load_checkpoint(a.checkpoint));
  const Dataset ds = load_dataset(a.dataset);
  const MetricsReport rep = evaluate(net, ds);
  write_json(a.report, to_json(rep));
  std::cout << render_metrics(rep);
  return 0;
}

struct AblateArgs {
  std::string plans, report;
  std::size_t seeds = 10;
  std::uint64_t seed = 0;
  std::vector<std::string> ensemble;
  std::string ensemble_base;
  unsigned threads = 0;
};

int run_ablate(const AblateArgs& a) {
  if (!fs::is_directory(a.plans)) throw ConfigError("'" + a.plans + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.plans)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  if (files.empty()) throw ConfigError("no plan files (*.json) in '" + a.plans + "'");
  std::sort(files.begin(), files.end());
  std::vector<StagePlan> plans;
  for (const auto& f : files) plans.push_back(load_plan(f.string()));

  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(a.seed + i);
  AblationOptions opts;
  for (const auto& m : a.ensemble) opts.ensemble_modes.push_back(ensemble_mode_from_string(m));
  opts.ensemble_base = a.ensemble_base;
  opts.threads = a.threads;
  const AblationReport rep = ablate(plans, seeds, opts);
  write_json(a.report, to_json(rep));
  std::cout << render_ablation(rep);
  return 0;
}

struct CamArgs {
  std::string checkpoint, dataset, layer = "conv2", out;
  std::size_t index = 0;
  std::uint64_t seed = 0;
};

int run_cam(const CamArgs& a) {
  const Network net = network_from_checkpoint(load_checkpoint(a.checkpoint));
  const Dataset ds = load_dataset(a.dataset);
  if (a.index >= ds.size()) {
    throw IndexError("sample index " + std::to_string(a.index) + " out of range (dataset has " + std::to_string(ds.size()) + ")");
  }
  const auto& sample = ds.samples[a.index];
  const std::size_t predicted = net.predict(sample.image);
  const SaliencyMap map = grad_cam(net, sample.image, predicted, a.layer);
  write_pgm(map, a.out);
  std::cout << "sample " << a.index << ": label " << sample.label << ", predicted " << predicted << "; wrote " << map.w << "x"
            << map.h << " map to " << a.out << "\n";
  return 0;
}

struct ReportArgs {
  std::string input;
  std::uint64_t seed = 0;
};

int run_report(const ReportArgs& a) {
  const auto j = read_json(a.input);
  if (j.is_object() && j.contains("rows")) {
    std::cout << render_ablation(ablation_from_json(j));
  } else if (j.is_object() && j.contains("confusion")) {
    std::cout << render_metrics(metrics_from_json(j));
  } else if (j.is_object() && j.contains("stage") && j.contains("val_losses")) {
    std::cout << "stage " << j["stage"].get<std::string>() << ", best epoch " << j["best_epoch"].get<std::size_t>() << "\n"
              << "epoch  train_loss    val_loss\n";
    const auto tr = j["train_losses"].get<std::vector<double>>();
    const auto va = j["val_losses"].get<std::vector<double>>();
    for (std::size_t e = 0; e < va.size(); ++e) std::cout << detail::fmt("%5zu  %10.6f  %10.6f\n", e + 1, tr.at(e), va[e]);
    if (!j["metrics"].is_null()) std::cout << "\n" << render_metrics(metrics_from_json(j["metrics"]));
  } else {
    throw ConfigError("'" + a.input + "' is not a metrics, run record or ablation report");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stagenet: staged transfer learning on synthetic ordinal data"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic dataset file from a JSON spec");
  c_synth->add_option("--spec", synth.spec, "SynthSpec JSON file")->required();
  c_synth->add_option("--out", synth.out, "Output dataset file")->required();
  c_synth->add_option("--seed", synth.seed, "Override the spec's seed");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Run a stage plan");
  c_train->add_option("--plan", train.plan, "StagePlan JSON file")->required();
  c_train->add_option("--out-dir", train.out_dir, "Directory for checkpoints and reports")->required();
  c_train->add_option("--seed", train.seed, "Run seed")->capture_default_str();

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  c_eval->add_option("--checkpoint", eval.checkpoint)->required();
  c_eval->add_option("--dataset", eval.dataset)->required();
  c_eval->add_option("--report", eval.report, "Output metrics JSON")->required();
  c_eval->add_option("--seed", eval.seed, "Accepted for uniformity; evaluation is deterministic");

  AblateArgs abl;
  auto* c_ablate = app.add_subcommand("ablate", "Run every plan in a directory over several seeds");
  c_ablate->add_option("--plans", abl.plans, "Directory of plan JSON files")->required();
  c_ablate->add_option("--seeds", abl.seeds, "Number of run seeds")->capture_default_str()->check(CLI::PositiveNumber);
  c_ablate->add_option("--seed", abl.seed, "First run seed")->capture_default_str();
  c_ablate->add_option("--report", abl.report, "Output ablation JSON")->required();
  c_ablate->add_option("--ensemble", abl.ensemble, "Add parallel-ensemble rows (sum, average)")->check(CLI::IsMember({"sum", "average"}));
  c_ablate->add_option("--ensemble-base", abl.ensemble_base, "Plan whose stages are ensembled (default: last plan)");
  c_ablate->add_option("--threads", abl.threads, "Worker threads (0 = hardware concurrency)")->capture_default_str();

  CamArgs cam;
  auto* c_cam = app.add_subcommand("cam", "Export a Grad-CAM saliency map as PGM");
  c_cam->add_option("--checkpoint", cam.checkpoint)->required();
  c_cam->add_option("--dataset", cam.dataset)->required();
  c_cam->add_option("--index", cam.index, "Sample index")->required();
  c_cam->add_option("--layer", cam.layer, "Conv layer to explain")->capture_default_str();
  c_cam->add_option("--out", cam.out, "Output PGM file")->required();
  c_cam->add_option("--seed", cam.seed, "Accepted for uniformity; saliency is deterministic");

  ReportArgs report;
  auto* c_report = app.add_subcommand("report", "Render a metrics, run record or ablation JSON as text");
  c_report->add_option("--input", report.input)->required();
  c_report->add_option("--seed", report.seed, "Accepted for uniformity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (c_synth->parsed()) return run_synth(synth);
    if (c_train->parsed()) return run_train(train);
    if (c_eval->parsed()) return run_eval(eval);
    if (c_ablate->parsed()) return run_ablate(abl);
    if (c_cam->parsed()) return run_cam(cam);
    if (c_report->parsed()) return run_report(report);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
