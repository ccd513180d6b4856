// Config-driven experiment runner: resolves a JSON config (paper defaults
// pre-filled), trains/caches the original model per seed, executes each
// unlearning method, and emits report.json / report.csv plus mask and noise
// artifacts. report.json carries no wall-clock or other nondeterministic
// fields, so reruns of the same config are byte-identical.
#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aru/attack.hpp"
#include "aru/data.hpp"
#include "aru/eval.hpp"
#include "aru/masking.hpp"
#include "aru/nn.hpp"
#include "aru/unlearn.hpp"

namespace aru {

using Json = nlohmann::json;

inline constexpr int kReportSchemaVersion = 1;

struct MethodSpec {
  std::string id;
  std::string label;  // report key; defaults to id
  MethodParams params;
};

struct ExperimentConfig {
  std::optional<SyntheticConfig> synthetic;
  std::optional<std::string> dataset_dir;
  int hidden_units = 128;
  TrainConfig original{0.01, 0.9, 64, 10, 0};
  TrainConfig finetune{0.001, 0.9, 64, 10, 0};
  AdvConfig attack;          // t=7, eps=8/255, alpha=2/255
  double ratio = 0.5;
  double lambda = 0.5;
  int cf_k = 3;
  double forget_weight = 1.0;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<MethodSpec> methods;  // resolved; defaults to the full roster
};

// ---------------------------------------------------------------------------
// JSON <-> config

namespace detail {

inline void require_known_keys(const Json& j, std::initializer_list<const char*> known,
                               const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok |= key == k;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

inline TrainConfig parse_train_config(const Json& j, TrainConfig base, const std::string& where) {
  require_known_keys(j, {"learning_rate", "momentum", "batch_size", "epochs"}, where);
  if (j.contains("learning_rate")) base.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("momentum")) base.momentum = j.at("momentum").get<double>();
  if (j.contains("batch_size")) base.batch_size = j.at("batch_size").get<int>();
  if (j.contains("epochs")) base.epochs = j.at("epochs").get<int>();
  validate(base);
  return base;
}

inline AdvConfig parse_adv_config(const Json& j, AdvConfig base, const std::string& where) {
  require_known_keys(j, {"steps", "epsilon", "alpha"}, where);
  if (j.contains("steps")) base.steps = j.at("steps").get<int>();
  if (j.contains("epsilon")) base.epsilon = j.at("epsilon").get<double>();
  if (j.contains("alpha")) base.alpha = j.at("alpha").get<double>();
  validate(base);
  return base;
}

inline SyntheticConfig parse_synthetic_config(const Json& j) {
  SyntheticConfig cfg;
  require_known_keys(j,
                     {"num_classes", "num_identities", "images_per_identity", "image_shape",
                      "forget_identity_fraction", "noise_std", "class_amplitude",
                      "identity_amplitude", "seed"},
                     "dataset.synthetic");
  if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<int>();
  if (j.contains("num_identities")) cfg.num_identities = j.at("num_identities").get<int>();
  if (j.contains("images_per_identity"))
    cfg.images_per_identity = j.at("images_per_identity").get<int>();
  if (j.contains("image_shape")) {
    const auto shape = j.at("image_shape").get<std::vector<int>>();
    if (shape.size() != 3) throw ConfigError("image_shape must be [C,H,W]");
    cfg.image_shape = {shape[0], shape[1], shape[2]};
  }
  if (j.contains("forget_identity_fraction"))
    cfg.forget_identity_fraction = j.at("forget_identity_fraction").get<double>();
  if (j.contains("noise_std")) cfg.noise_std = j.at("noise_std").get<double>();
  if (j.contains("class_amplitude")) cfg.class_amplitude = j.at("class_amplitude").get<double>();
  if (j.contains("identity_amplitude"))
    cfg.identity_amplitude = j.at("identity_amplitude").get<double>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  validate(cfg);
  return cfg;
}

inline Json train_config_json(const TrainConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs}};
}

inline Json adv_config_json(const AdvConfig& c) {
  return Json{{"steps", c.steps}, {"epsilon", c.epsilon}, {"alpha", c.alpha}};
}

inline Json synthetic_config_json(const SyntheticConfig& c) {
  return Json{{"num_classes", c.num_classes},
              {"num_identities", c.num_identities},
              {"images_per_identity", c.images_per_identity},
              {"image_shape", std::vector<int>{c.image_shape.begin(), c.image_shape.end()}},
              {"forget_identity_fraction", c.forget_identity_fraction},
              {"noise_std", c.noise_std},
              {"class_amplitude", c.class_amplitude},
              {"identity_amplitude", c.identity_amplitude},
              {"seed", c.seed}};
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const Json& j) {
  ExperimentConfig cfg;
  detail::require_known_keys(j,
                             {"dataset", "model", "original", "finetune", "attack", "ratio",
                              "lambda", "cf_k", "forget_weight", "seeds", "methods"},
                             "config");
  if (!j.contains("dataset")) throw ConfigError("config: missing 'dataset'");
  const Json& ds = j.at("dataset");
  detail::require_known_keys(ds, {"synthetic", "directory"}, "dataset");
  if (ds.contains("synthetic") == ds.contains("directory"))
    throw ConfigError("dataset: provide exactly one of 'synthetic' or 'directory'");
  if (ds.contains("synthetic"))
    cfg.synthetic = detail::parse_synthetic_config(ds.at("synthetic"));
  else
    cfg.dataset_dir = ds.at("directory").get<std::string>();

  if (j.contains("model")) {
    detail::require_known_keys(j.at("model"), {"hidden_units"}, "model");
    if (j.at("model").contains("hidden_units"))
      cfg.hidden_units = j.at("model").at("hidden_units").get<int>();
  }
  if (j.contains("original"))
    cfg.original = detail::parse_train_config(j.at("original"), cfg.original, "original");
  if (j.contains("finetune"))
    cfg.finetune = detail::parse_train_config(j.at("finetune"), cfg.finetune, "finetune");
  if (j.contains("attack")) cfg.attack = detail::parse_adv_config(j.at("attack"), cfg.attack, "attack");
  if (j.contains("ratio")) cfg.ratio = j.at("ratio").get<double>();
  if (j.contains("lambda")) cfg.lambda = j.at("lambda").get<double>();
  if (j.contains("cf_k")) cfg.cf_k = j.at("cf_k").get<int>();
  if (j.contains("forget_weight")) cfg.forget_weight = j.at("forget_weight").get<double>();
  if (cfg.ratio < 0.0 || cfg.ratio >= 1.0) throw ConfigError("config: ratio must be in [0,1)");
  if (cfg.lambda < 0.0 || cfg.lambda > 1.0) throw ConfigError("config: lambda must be in [0,1]");

  if (j.contains("seeds")) {
    cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (cfg.seeds.empty()) throw ConfigError("config: seeds must be non-empty");
  }

  MethodParams base;
  base.ratio = cfg.ratio;
  base.cf_k = cfg.cf_k;
  base.forget_weight = cfg.forget_weight;
  base.attack = cfg.attack;
  base.finetune = cfg.finetune;
  base.original = cfg.original;

  std::vector<Json> method_entries;
  if (j.contains("methods")) {
    for (const auto& entry : j.at("methods")) method_entries.push_back(entry);
    if (method_entries.empty()) throw ConfigError("config: methods must be non-empty if given");
  } else {
    for (const char* id :
         {"aru", "retrain", "finetune", "neggrad", "advneggrad", "cf_k", "random_mask"})
      method_entries.push_back(Json{{"id", id}});
  }
  for (const auto& entry : method_entries) {
    detail::require_known_keys(
        entry, {"id", "label", "ratio", "cf_k", "forget_weight", "attack", "finetune"},
        "methods[]");
    MethodSpec spec;
    spec.params = base;
    if (!entry.contains("id")) throw ConfigError("methods[]: missing 'id'");
    spec.id = entry.at("id").get<std::string>();
    if (std::find(method_ids().begin(), method_ids().end(), spec.id) == method_ids().end())
      throw ConfigError("unknown unlearning method: " + spec.id);
    spec.label = entry.contains("label") ? entry.at("label").get<std::string>() : spec.id;
    if (entry.contains("ratio")) spec.params.ratio = entry.at("ratio").get<double>();
    if (entry.contains("cf_k")) spec.params.cf_k = entry.at("cf_k").get<int>();
    if (entry.contains("forget_weight"))
      spec.params.forget_weight = entry.at("forget_weight").get<double>();
    if (entry.contains("attack"))
      spec.params.attack = detail::parse_adv_config(entry.at("attack"), spec.params.attack,
                                                    "methods[].attack");
    if (entry.contains("finetune"))
      spec.params.finetune = detail::parse_train_config(entry.at("finetune"),
                                                        spec.params.finetune, "methods[].finetune");
    if (spec.params.ratio < 0.0 || spec.params.ratio >= 1.0)
      throw ConfigError("methods[]: ratio must be in [0,1)");
    cfg.methods.push_back(std::move(spec));
  }
  // report keys must be unique
  for (std::size_t i = 0; i < cfg.methods.size(); ++i)
    for (std::size_t k = i + 1; k < cfg.methods.size(); ++k)
      if (cfg.methods[i].label == cfg.methods[k].label)
        throw ConfigError("duplicate method label '" + cfg.methods[i].label +
                          "'; set distinct 'label' fields");
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_experiment_config(j);
}

// Canonical resolved-config echo (also the reproduction recipe in reports).
inline Json config_echo(const ExperimentConfig& cfg) {
  Json dataset;
  if (cfg.synthetic)
    dataset["synthetic"] = detail::synthetic_config_json(*cfg.synthetic);
  else
    dataset["directory"] = *cfg.dataset_dir;
  Json methods = Json::array();
  for (const auto& m : cfg.methods) {
    methods.push_back(Json{{"id", m.id},
                           {"label", m.label},
                           {"ratio", m.params.ratio},
                           {"cf_k", m.params.cf_k},
                           {"forget_weight", m.params.forget_weight},
                           {"attack", detail::adv_config_json(m.params.attack)},
                           {"finetune", detail::train_config_json(m.params.finetune)}});
  }
  return Json{{"dataset", dataset},
              {"model", Json{{"hidden_units", cfg.hidden_units}}},
              {"original", detail::train_config_json(cfg.original)},
              {"finetune", detail::train_config_json(cfg.finetune)},
              {"attack", detail::adv_config_json(cfg.attack)},
              {"ratio", cfg.ratio},
              {"lambda", cfg.lambda},
              {"cf_k", cfg.cf_k},
              {"forget_weight", cfg.forget_weight},
              {"seeds", cfg.seeds},
              {"methods", methods}};
}

// ---------------------------------------------------------------------------
// Original-model cache

namespace detail {

inline std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

template <typename T>
std::uint64_t original_cache_key(const DatasetBundle<T>& bundle, const ExperimentConfig& cfg,
                                 std::uint64_t seed) {
  std::uint64_t h = checksum(bundle);
  h = fnv1a64(&cfg.original.learning_rate, sizeof(double), h);
  h = fnv1a64(&cfg.original.momentum, sizeof(double), h);
  h = fnv1a64(&cfg.original.batch_size, sizeof(int), h);
  h = fnv1a64(&cfg.original.epochs, sizeof(int), h);
  h = fnv1a64(&cfg.hidden_units, sizeof(int), h);
  h = fnv1a64(&seed, sizeof(seed), h);
  return h;
}

}  // namespace detail

template <typename T>
struct OriginalModel {
  Model<T> model;
  std::vector<EpochStats> epoch_log;
  bool cache_hit = false;
};

// Trains theta on the full train split (retain + forget) or loads it from the
// cache directory, keyed by (dataset, recipe, architecture, seed).
template <typename T = float>
OriginalModel<T> train_original(const DatasetBundle<T>& bundle, const ExperimentConfig& cfg,
                                std::uint64_t seed, const std::string& cache_dir,
                                AccessAudit* audit = nullptr) {
  namespace fs = std::filesystem;
  const std::uint64_t key = detail::original_cache_key(bundle, cfg, seed);
  const fs::path path = fs::path(cache_dir) / ("theta-" + detail::hex64(key) + ".bin");
  const fs::path log_path = fs::path(cache_dir) / ("theta-" + detail::hex64(key) + ".log.json");

  OriginalModel<T> out;
  if (fs::exists(path) && fs::exists(log_path)) {
    out.model = load_model<T>(path.string());
    std::ifstream in(log_path);
    Json log;
    in >> log;
    for (const auto& e : log)
      out.epoch_log.push_back(
          EpochStats{e.at("loss").get<double>(), e.at("accuracy").get<double>()});
    out.cache_hit = true;
    return out;
  }
  const auto& shape = bundle.train.front().image.shape();
  out.model = build_model<T>(bundle.num_classes, {shape[0], shape[1], shape[2]},
                             derive_seed(seed, "original-init"), cfg.hidden_units);
  TrainConfig tc = cfg.original;
  tc.seed = derive_seed(seed, "original-train");
  const auto items = train_items<T>(bundle.train);
  TrainHooks hooks;
  if (audit)
    hooks.on_consume = [audit](int tag, std::size_t n) {
      audit->log("original_train", static_cast<Split>(tag), n);
    };
  out.epoch_log = sgd_train(out.model, std::span<const TrainItem<T>>(items), tc, hooks);
  fs::create_directories(path.parent_path());
  save_model(out.model, path.string());
  {
    Json log = Json::array();
    for (const auto& e : out.epoch_log)
      log.push_back(Json{{"loss", e.loss}, {"accuracy", e.accuracy}});
    std::ofstream lout(log_path, std::ios::binary);
    lout << log.dump() << '\n';
  }
  return out;
}

template <typename T = float>
DatasetBundle<T> load_experiment_dataset(const ExperimentConfig& cfg) {
  if (cfg.synthetic) return generate_synthetic<T>(*cfg.synthetic);
  return load_directory_dataset<T>(*cfg.dataset_dir);
}

// ---------------------------------------------------------------------------
// Runner

struct RunRow {
  std::string method;
  std::uint64_t seed = 0;
  Metrics metrics;
  std::uint64_t model_checksum = 0;
  std::optional<std::uint64_t> mask_checksum;
  std::vector<EpochStats> epoch_log;
  AccessAudit audit;
  double wall_seconds = 0.0;
};

struct MethodAggregate {
  std::string method;
  double utility_mean = 0, utility_std = 0;
  double forgetting_mean = 0, forgetting_std = 0;
  double nomus_mean = 0, nomus_std = 0;
};

struct RunReport {
  ExperimentConfig config;
  std::vector<RunRow> rows;                 // seed-major, method order as configured
  std::vector<Json> originals;              // per-seed original model summary
  std::vector<MethodAggregate> aggregates;  // method order as configured
};

namespace detail {

inline Json audit_json(const AccessAudit& audit) {
  Json j = Json::object();
  for (const auto& [stage, counts] : audit.counts) {
    j[stage] = Json{{"forget", counts[0]},
                    {"retain", counts[1]},
                    {"test", counts[2]},
                    {"unseen", counts[3]}};
  }
  return j;
}

inline Json epoch_log_json(const std::vector<EpochStats>& log) {
  Json j = Json::array();
  for (const auto& e : log) j.push_back(Json{{"loss", e.loss}, {"accuracy", e.accuracy}});
  return j;
}

inline void mean_std(const std::vector<double>& xs, double& mean, double& stddev) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  stddev = std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace detail

template <typename T = float>
RunReport run_experiment(const ExperimentConfig& cfg, const std::string& cache_dir) {
  RunReport report;
  report.config = cfg;
  const DatasetBundle<T> bundle = load_experiment_dataset<T>(cfg);
  NoiseCache<T> noise_cache;

  for (std::uint64_t seed : cfg.seeds) {
    AccessAudit original_audit;
    const auto original = train_original<T>(bundle, cfg, seed, cache_dir, &original_audit);
    const Metrics original_metrics = evaluate(original.model, bundle, cfg.lambda);
    report.originals.push_back(
        Json{{"seed", seed},
             {"model_checksum", detail::hex64(checksum(original.model))},
             {"utility", original_metrics.utility},
             {"forgetting", original_metrics.forgetting},
             {"nomus", original_metrics.nomus_score},
             {"mia_accuracy", original_metrics.mia_accuracy},
             {"train_epoch_log", detail::epoch_log_json(original.epoch_log)}});

    for (const auto& spec : cfg.methods) {
      UnlearnRequest request{spec.id, spec.params, seed};
      UnlearnedModel<T> result = run_method(request, original.model, bundle, cfg.hidden_units,
                                            &noise_cache);
      RunRow row;
      row.method = spec.label;
      row.seed = seed;
      row.metrics = evaluate(result.model, bundle, cfg.lambda);
      row.model_checksum = result.provenance.model_checksum;
      row.mask_checksum = result.provenance.mask_checksum;
      row.epoch_log = result.provenance.epoch_log;
      row.audit = result.provenance.audit;
      row.wall_seconds = result.provenance.wall_seconds;
      report.rows.push_back(std::move(row));
    }
  }

  for (const auto& spec : cfg.methods) {
    std::vector<double> us, fs, ns;
    for (const auto& row : report.rows) {
      if (row.method != spec.label) continue;
      us.push_back(row.metrics.utility);
      fs.push_back(row.metrics.forgetting);
      ns.push_back(row.metrics.nomus_score);
    }
    MethodAggregate agg;
    agg.method = spec.label;
    detail::mean_std(us, agg.utility_mean, agg.utility_std);
    detail::mean_std(fs, agg.forgetting_mean, agg.forgetting_std);
    detail::mean_std(ns, agg.nomus_mean, agg.nomus_std);
    report.aggregates.push_back(agg);
  }
  return report;
}

// report.json: deterministic (no wall-clock). report.csv: per-row wall-clock.
inline Json report_json(const RunReport& report) {
  Json rows = Json::array();
  for (const auto& row : report.rows) {
    Json r{{"method", row.method},
           {"seed", row.seed},
           {"utility", row.metrics.utility},
           {"forgetting", row.metrics.forgetting},
           {"nomus", row.metrics.nomus_score},
           {"mia_accuracy", row.metrics.mia_accuracy},
           {"lambda", row.metrics.lambda},
           {"model_checksum", detail::hex64(row.model_checksum)},
           {"epoch_log", detail::epoch_log_json(row.epoch_log)},
           {"audit", detail::audit_json(row.audit)}};
    if (row.mask_checksum) r["mask_checksum"] = detail::hex64(*row.mask_checksum);
    rows.push_back(std::move(r));
  }
  Json aggregates = Json::array();
  for (const auto& a : report.aggregates)
    aggregates.push_back(Json{{"method", a.method},
                              {"utility_mean", a.utility_mean},
                              {"utility_std", a.utility_std},
                              {"forgetting_mean", a.forgetting_mean},
                              {"forgetting_std", a.forgetting_std},
                              {"nomus_mean", a.nomus_mean},
                              {"nomus_std", a.nomus_std}});
  return Json{{"schema_version", kReportSchemaVersion},
              {"config", config_echo(report.config)},
              {"originals", report.originals},
              {"rows", rows},
              {"aggregates", aggregates}};
}

inline std::string report_csv(const RunReport& report) {
  std::ostringstream out;
  out << "method,seed,utility,forgetting,nomus,wall_clock_s\n";
  out << std::fixed;
  for (const auto& row : report.rows) {
    out << row.method << ',' << row.seed << ',' << std::setprecision(6) << row.metrics.utility
        << ',' << row.metrics.forgetting << ',' << row.metrics.nomus_score << ','
        << std::setprecision(3) << row.wall_seconds << '\n';
  }
  return out.str();
}

inline void write_report_files(const RunReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "report.json", std::ios::binary);
    if (!out) throw IngestError("cannot write report.json under " + out_dir);
    out << report_json(report).dump(2) << '\n';
  }
  {
    std::ofstream out(fs::path(out_dir) / "report.csv", std::ios::binary);
    if (!out) throw IngestError("cannot write report.csv under " + out_dir);
    out << report_csv(report);
  }
}

// ---------------------------------------------------------------------------
// Artifact export: mask bitstrings and noise visualizations for ARU rows,
// reproduced deterministically from the run's config echo.

inline ExperimentConfig config_from_report_file(const std::string& run_dir) {
  const auto path = std::filesystem::path(run_dir) / "report.json";
  std::ifstream in(path);
  if (!in) throw ConfigError("missing report.json in " + run_dir);
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("report.json parse error: ") + e.what());
  }
  if (!j.contains("config")) throw ConfigError("report.json has no config echo");
  return parse_experiment_config(j.at("config"));
}

template <typename T = float>
std::size_t export_masks_and_noise(const std::string& run_dir, const std::string& cache_dir) {
  namespace fs = std::filesystem;
  const ExperimentConfig cfg = config_from_report_file(run_dir);
  const DatasetBundle<T> bundle = load_experiment_dataset<T>(cfg);

  std::size_t files = 0;
  for (std::uint64_t seed : cfg.seeds) {
    const auto original = train_original<T>(bundle, cfg, seed, cache_dir);
    for (const auto& spec : cfg.methods) {
      if (spec.id != "aru" || spec.params.ratio <= 0.0) continue;
      const fs::path dir =
          fs::path(run_dir) / "artifacts" / (spec.label + "-seed" + std::to_string(seed));
      fs::create_directories(dir / "noise");

      const auto noises =
          attack_forget_set(original.model, bundle, spec.params.attack,
                            spec.params.finetune.batch_size);
      const FilterScores scores = gradient_discrepancy_scores(
          original.model, std::span<const ImageRecord<T>>(bundle.forget), noises,
          spec.params.finetune.batch_size);
      const FilterMask mask = build_mask(scores, spec.params.ratio);
      save_mask(mask, (dir / "mask.txt").string());
      ++files;
      char name[48];
      for (std::size_t i = 0; i < noises.size(); ++i) {
        std::snprintf(name, sizeof(name), "noise_%06zu", i);
        const Tensor<T> vis = noise_visualization(noises[i].noise, spec.params.attack.epsilon);
        write_png((dir / "noise" / (std::string(name) + ".png")).string(), vis);
        save_tensor(noises[i].noise, (dir / "noise" / (std::string(name) + ".tns")).string());
        files += 2;
      }
    }
  }
  return files;
}

}  // namespace aru
