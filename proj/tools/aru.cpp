// Experiment runner CLI for the attack-and-reset unlearning toolkit.
//
//   aru run <config.json> --out DIR      multi-seed experiment -> report files
//   aru evaluate <model> <dataset>       utility / forgetting / NoMUS as JSON
//   aru attack <model> <dataset>         PGD noise for the forget set -> files
//   aru mask <model> <dataset> --strategy S   filter mask -> text file
//   aru report <dir>                     pretty-print + recheck a run report
//
// <dataset> is either a directory (images/ + labels.csv) or a JSON file with
// a {"synthetic": {...}} generator spec. Exit codes: 0 ok, 1 config error,
// 2 runtime error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "aru/experiment.hpp"

namespace {

using namespace aru;
namespace fs = std::filesystem;

DatasetBundle<float> load_dataset_arg(const std::string& path) {
  if (fs::is_directory(path)) return load_directory_dataset<float>(path);
  if (path.size() > 5 && path.substr(path.size() - 5) == ".json") {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset spec: " + path);
    Json j;
    try {
      in >> j;
    } catch (const Json::exception& e) {
      throw ConfigError("dataset spec parse error: " + std::string(e.what()));
    }
    if (j.contains("synthetic"))
      return generate_synthetic<float>(detail::parse_synthetic_config(j.at("synthetic")));
    return generate_synthetic<float>(detail::parse_synthetic_config(j));
  }
  throw ConfigError("dataset must be a directory or a .json synthetic spec: " + path);
}

std::string default_cache_dir(const std::string& out_dir) {
  if (const char* env = std::getenv("ARU_CACHE_DIR"); env && *env) return env;
  return (fs::path(out_dir) / "cache").string();
}

int cmd_run(const std::string& config_path, std::string out_dir, std::string cache_dir,
            bool export_artifacts) {
  const ExperimentConfig cfg = load_experiment_config(config_path);
  if (cache_dir.empty()) cache_dir = default_cache_dir(out_dir);
  const RunReport report = run_experiment<float>(cfg, cache_dir);
  write_report_files(report, out_dir);
  if (export_artifacts) {
    const std::size_t n = export_masks_and_noise<float>(out_dir, cache_dir);
    std::fprintf(stderr, "exported %zu artifact files\n", n);
  }
  std::printf("%-14s %10s %10s %10s\n", "method", "utility", "forgetting", "nomus");
  for (const auto& a : report.aggregates)
    std::printf("%-14s %7.4f +-%.4f %5.4f +-%.4f %5.4f +-%.4f\n", a.method.c_str(), a.utility_mean,
                a.utility_std, a.forgetting_mean, a.forgetting_std, a.nomus_mean, a.nomus_std);
  std::fprintf(stderr, "report written to %s\n", (fs::path(out_dir) / "report.json").c_str());
  return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& dataset, double lambda) {
  const auto model = load_model<float>(model_path);
  const auto bundle = load_dataset_arg(dataset);
  MIAResult mia;
  const Metrics m = evaluate(model, bundle, lambda, &mia);
  if (mia.degenerate)
    std::fprintf(stderr, "warning: degenerate MIA fit (all losses identical); "
                         "accuracy equals the majority class prior\n");
  const Json out{{"utility", m.utility},
                 {"forgetting", m.forgetting},
                 {"nomus", m.nomus_score},
                 {"mia_accuracy", m.mia_accuracy},
                 {"lambda", m.lambda}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_attack(const std::string& model_path, const std::string& dataset, AdvConfig adv,
               int batch_size, const std::string& out_dir) {
  const auto model = load_model<float>(model_path);
  const auto bundle = load_dataset_arg(dataset);
  const auto noises = attack_forget_set(model, bundle, adv, batch_size);
  fs::create_directories(out_dir);
  double max_abs = 0.0;
  char name[48];
  for (std::size_t i = 0; i < noises.size(); ++i) {
    std::snprintf(name, sizeof(name), "noise_%06zu", i);
    write_png((fs::path(out_dir) / (std::string(name) + ".png")).string(),
              noise_visualization(noises[i].noise, adv.epsilon));
    save_tensor(noises[i].noise, (fs::path(out_dir) / (std::string(name) + ".tns")).string());
    for (float v : noises[i].noise.values()) max_abs = std::max(max_abs, std::abs(double(v)));
  }
  const Json out{{"count", noises.size()}, {"epsilon", adv.epsilon}, {"max_abs_noise", max_abs}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_mask(const std::string& model_path, const std::string& dataset,
             const std::string& strategy, double ratio, std::uint64_t seed, AdvConfig adv,
             int batch_size, const std::string& out_file) {
  const auto model = load_model<float>(model_path);
  const auto bundle = load_dataset_arg(dataset);
  const std::span<const ImageRecord<float>> forget(bundle.forget);

  FilterMask mask;
  if (strategy == "aru") {
    const auto noises = attack_forget_set(model, bundle, adv, batch_size);
    mask = build_mask(gradient_discrepancy_scores(model, forget, noises, batch_size), ratio);
  } else if (strategy == "random") {
    mask = random_mask(model, ratio, derive_seed(seed, "random-mask"));
  } else if (strategy == "top_grad") {
    mask = top_gradient_mask(model, forget, ratio, batch_size);
  } else if (strategy == "random_noise") {
    mask = random_noise_mask(model, forget, adv, ratio, derive_seed(seed, "random-noise"),
                             batch_size);
  } else {
    throw ConfigError("unknown mask strategy: " + strategy);
  }
  if (out_file.empty()) {
    std::cout << serialize_mask(mask);
  } else {
    save_mask(mask, out_file);
    std::fprintf(stderr, "mask written to %s (%zu filters reset)\n", out_file.c_str(),
                 mask.total_masked());
  }
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const auto path = fs::path(run_dir) / "report.json";
  std::ifstream in(path);
  if (!in) throw ConfigError("missing report.json in " + run_dir);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError("report.json parse error: " + std::string(e.what()));
  }

  std::printf("%-14s %6s %10s %12s %10s\n", "method", "seed", "utility", "forgetting", "nomus");
  for (const auto& row : j.at("rows"))
    std::printf("%-14s %6llu %10.4f %12.4f %10.4f\n",
                row.at("method").get<std::string>().c_str(),
                static_cast<unsigned long long>(row.at("seed").get<std::uint64_t>()),
                row.at("utility").get<double>(), row.at("forgetting").get<double>(),
                row.at("nomus").get<double>());

  // recompute aggregates from rows and cross-check the stored ones
  std::printf("\n%-14s %18s %18s %18s\n", "method", "utility", "forgetting", "nomus");
  bool mismatch = false;
  for (const auto& agg : j.at("aggregates")) {
    const std::string method = agg.at("method").get<std::string>();
    std::vector<double> us, fs_, ns;
    for (const auto& row : j.at("rows")) {
      if (row.at("method").get<std::string>() != method) continue;
      us.push_back(row.at("utility").get<double>());
      fs_.push_back(row.at("forgetting").get<double>());
      ns.push_back(row.at("nomus").get<double>());
    }
    double um, us_, fm, fstd, nm, nstd;
    detail::mean_std(us, um, us_);
    detail::mean_std(fs_, fm, fstd);
    detail::mean_std(ns, nm, nstd);
    std::printf("%-14s %9.4f +-%.4f %9.4f +-%.4f %9.4f +-%.4f\n", method.c_str(), um, us_, fm, fstd,
                nm, nstd);
    mismatch |= std::abs(um - agg.at("utility_mean").get<double>()) > 1e-12 ||
                std::abs(fm - agg.at("forgetting_mean").get<double>()) > 1e-12 ||
                std::abs(nm - agg.at("nomus_mean").get<double>()) > 1e-12;
  }
  if (mismatch) {
    std::fprintf(stderr, "error: stored aggregates do not match the per-seed rows\n");
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attack-and-reset machine unlearning toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "aru-run", cache_dir;
  bool export_artifacts = false;
  auto* run = app.add_subcommand("run", "Run a multi-seed unlearning experiment");
  run->add_option("config", config_path, "experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "output directory for report files");
  run->add_option("--cache-dir", cache_dir, "original-model cache (default $ARU_CACHE_DIR)");
  run->add_flag("--export-artifacts", export_artifacts, "also write masks and noise files");

  std::string model_path, dataset;
  double lambda = 0.5;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate a saved model against a dataset");
  evaluate_cmd->add_option("model", model_path, "model file")->required();
  evaluate_cmd->add_option("dataset", dataset, "dataset directory or synthetic .json")->required();
  evaluate_cmd->add_option("--lambda", lambda, "NoMUS weight (default 0.5)");

  AdvConfig adv;
  int batch_size = 64;
  std::string attack_out = "noise-out";
  auto* attack_cmd = app.add_subcommand("attack", "Generate PGD noise for the forget set");
  attack_cmd->add_option("model", model_path, "model file")->required();
  attack_cmd->add_option("dataset", dataset, "dataset directory or synthetic .json")->required();
  attack_cmd->add_option("--steps", adv.steps, "PGD steps (default 7)");
  attack_cmd->add_option("--epsilon", adv.epsilon, "l-inf bound (default 8/255)");
  attack_cmd->add_option("--alpha", adv.alpha, "step size (default 2/255)");
  attack_cmd->add_option("--batch", batch_size, "attack batch size");
  attack_cmd->add_option("--out", attack_out, "output directory");

  std::string strategy = "aru", mask_out;
  double ratio = 0.5;
  std::uint64_t mask_seed = 0;
  auto* mask_cmd = app.add_subcommand("mask", "Build a filter mask for a model");
  mask_cmd->add_option("model", model_path, "model file")->required();
  mask_cmd->add_option("dataset", dataset, "dataset directory or synthetic .json")->required();
  mask_cmd->add_option("--strategy", strategy, "aru | random | top_grad | random_noise");
  mask_cmd->add_option("--ratio", ratio, "masked fraction per layer (default 0.5)");
  mask_cmd->add_option("--seed", mask_seed, "seed for seeded strategies");
  mask_cmd->add_option("--steps", adv.steps, "PGD steps");
  mask_cmd->add_option("--epsilon", adv.epsilon, "l-inf bound");
  mask_cmd->add_option("--alpha", adv.alpha, "step size");
  mask_cmd->add_option("--batch", batch_size, "batch size");
  mask_cmd->add_option("--out", mask_out, "mask file (stdout if omitted)");

  std::string run_dir;
  auto* report_cmd = app.add_subcommand("report", "Print and recheck a run report");
  report_cmd->add_option("dir", run_dir, "run directory containing report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (run->parsed()) return cmd_run(config_path, out_dir, cache_dir, export_artifacts);
    if (evaluate_cmd->parsed()) return cmd_evaluate(model_path, dataset, lambda);
    if (attack_cmd->parsed()) return cmd_attack(model_path, dataset, adv, batch_size, attack_out);
    if (mask_cmd->parsed())
      return cmd_mask(model_path, dataset, strategy, ratio, mask_seed, adv, batch_size, mask_out);
    if (report_cmd->parsed()) return cmd_report(run_dir);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const IngestError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
