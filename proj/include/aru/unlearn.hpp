// Unlearning method roster behind one interface: the attack-and-reset
// pipeline (attack -> score -> mask -> reset -> retain fine-tune) plus the
// baselines (retrain, finetune, NegGrad, AdvNegGrad, CF-k, masked variants).
// Every method is deterministic given (model, bundle, params, seed), and all
// retain fine-tuning stages share one seed stream so degenerate configs
// collapse onto plain fine-tuning bit-for-bit.
#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "aru/attack.hpp"
#include "aru/data.hpp"
#include "aru/eval.hpp"
#include "aru/masking.hpp"
#include "aru/nn.hpp"

namespace aru {

inline const std::vector<std::string>& method_ids() {
  static const std::vector<std::string> ids = {
      "aru",  "retrain",     "finetune",        "neggrad",          "advneggrad",
      "cf_k", "random_mask", "top_grad_mask",   "random_noise_mask"};
  return ids;
}

struct MethodParams {
  double ratio = 0.5;          // masked filter fraction
  int cf_k = 3;                // trainable tail length for cf_k
  double forget_weight = 1.0;  // forget-loss weight in advneggrad
  AdvConfig attack;
  TrainConfig finetune;        // retain fine-tune recipe (also NegGrad's recipe)
  TrainConfig original;        // from-scratch recipe used by retrain
};

inline MethodParams default_method_params() {
  MethodParams p;
  p.finetune = TrainConfig{0.001, 0.9, 64, 10, 0};
  p.original = TrainConfig{0.01, 0.9, 64, 10, 0};
  return p;
}

struct UnlearnRequest {
  std::string method;
  MethodParams params = default_method_params();
  std::uint64_t seed = 0;
};

// AdvNegGrad per-step loss decomposition.
struct JointLossEntry {
  double retain_ce = 0.0;
  double forget_ce = 0.0;
  double total = 0.0;
};

struct Provenance {
  std::string method;
  std::uint64_t seed = 0;
  MethodParams params;
  std::vector<EpochStats> epoch_log;
  std::vector<JointLossEntry> step_log;  // advneggrad only
  std::optional<FilterMask> mask;
  std::optional<std::uint64_t> mask_checksum;
  std::uint64_t model_checksum = 0;
  AccessAudit audit;
  double wall_seconds = 0.0;
  bool halted = false;  // ascent methods stop early once the loss diverges
};

template <typename T>
struct UnlearnedModel {
  Model<T> model;
  Provenance provenance;
};

namespace detail {

// Shared retain fine-tune stage. One seed stream for every method that ends
// in fine-tuning on the retain set, so ARU with an empty mask, CF-k with all
// layers trainable, and plain finetune walk identical batch orders.
template <typename T>
std::vector<EpochStats> finetune_stage(Model<T>& model, const DatasetBundle<T>& bundle,
                                       TrainConfig cfg, std::uint64_t seed, AccessAudit& audit,
                                       std::function<bool(int)> trainable = {}) {
  cfg.seed = derive_seed(seed, "finetune");
  const auto items = train_items<T>(bundle.retain);
  TrainHooks hooks;
  hooks.trainable = std::move(trainable);
  hooks.on_consume = [&audit](int tag, std::size_t n) {
    audit.log("finetune", static_cast<Split>(tag), n);
  };
  return sgd_train(model, std::span<const TrainItem<T>>(items), cfg, hooks);
}

class WallTimer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace detail

// ---------------------------------------------------------------------------
// ARU: attack -> gradient-discrepancy scores -> median mask -> reset ->
// fine-tune on retain. ratio <= 0 degenerates to an empty mask (no reset).
template <typename T>
UnlearnedModel<T> aru_unlearn(const Model<T>& original, const DatasetBundle<T>& bundle,
                              const AdvConfig& adv_cfg, double ratio, const TrainConfig& ft_cfg,
                              std::uint64_t seed, NoiseCache<T>* noise_cache = nullptr) {
  detail::WallTimer timer;
  UnlearnedModel<T> out{original, {}};
  Provenance& prov = out.provenance;
  prov.method = "aru";
  prov.seed = seed;
  prov.params.attack = adv_cfg;
  prov.params.ratio = ratio;
  prov.params.finetune = ft_cfg;

  const auto noises =
      noise_cache
          ? noise_cache->get_or_compute(original, bundle, adv_cfg, ft_cfg.batch_size, &prov.audit)
          : attack_forget_set(original, bundle, adv_cfg, ft_cfg.batch_size, &prov.audit);
  FilterMask mask;
  if (ratio > 0.0) {
    const FilterScores scores = gradient_discrepancy_scores(
        original, std::span<const ImageRecord<T>>(bundle.forget), noises, ft_cfg.batch_size,
        &prov.audit);
    mask = build_mask(scores, ratio);
  } else {
    mask = empty_mask(original);
  }
  out.model = reset_filters(original, mask, derive_seed(seed, "reset"));
  prov.mask_checksum = checksum(mask);
  prov.mask = std::move(mask);
  prov.epoch_log = detail::finetune_stage(out.model, bundle, ft_cfg, seed, prov.audit);
  prov.model_checksum = checksum(out.model);
  prov.wall_seconds = timer.seconds();
  return out;
}

// Gold standard: fresh init trained on the retain set only.
template <typename T>
UnlearnedModel<T> retrain_scratch(const DatasetBundle<T>& bundle, const TrainConfig& train_cfg,
                                  std::uint64_t seed, int hidden_units = 128) {
  if (bundle.retain.empty()) throw ConfigError("retrain_scratch: empty retain set");
  detail::WallTimer timer;
  const auto& shape = bundle.retain.front().image.shape();
  UnlearnedModel<T> out{
      build_model<T>(bundle.num_classes, {shape[0], shape[1], shape[2]},
                     derive_seed(seed, "retrain-init"), hidden_units),
      {}};
  Provenance& prov = out.provenance;
  prov.method = "retrain";
  prov.seed = seed;
  prov.params.original = train_cfg;

  TrainConfig cfg = train_cfg;
  cfg.seed = derive_seed(seed, "retrain-train");
  const auto items = train_items<T>(bundle.retain);
  TrainHooks hooks;
  hooks.on_consume = [&prov](int tag, std::size_t n) {
    prov.audit.log("train", static_cast<Split>(tag), n);
  };
  prov.epoch_log = sgd_train(out.model, std::span<const TrainItem<T>>(items), cfg, hooks);
  prov.model_checksum = checksum(out.model);
  prov.wall_seconds = timer.seconds();
  return out;
}

template <typename T>
UnlearnedModel<T> finetune(const Model<T>& original, const DatasetBundle<T>& bundle,
                           const TrainConfig& ft_cfg, std::uint64_t seed) {
  detail::WallTimer timer;
  UnlearnedModel<T> out{original, {}};
  Provenance& prov = out.provenance;
  prov.method = "finetune";
  prov.seed = seed;
  prov.params.finetune = ft_cfg;
  prov.epoch_log = detail::finetune_stage(out.model, bundle, ft_cfg, seed, prov.audit);
  prov.model_checksum = checksum(out.model);
  prov.wall_seconds = timer.seconds();
  return out;
}

// Gradient ascent on the forget set.
template <typename T>
UnlearnedModel<T> neg_grad(const Model<T>& original, const DatasetBundle<T>& bundle,
                           const TrainConfig& cfg_in, std::uint64_t seed) {
  if (bundle.forget.empty()) throw ConfigError("neg_grad: empty forget set");
  detail::WallTimer timer;
  UnlearnedModel<T> out{original, {}};
  Provenance& prov = out.provenance;
  prov.method = "neggrad";
  prov.seed = seed;
  prov.params.finetune = cfg_in;

  TrainConfig cfg = cfg_in;
  cfg.seed = derive_seed(seed, "neggrad");
  const auto items = train_items<T>(bundle.forget);
  TrainHooks hooks;
  hooks.ascend = true;
  hooks.halt_on_divergence = true;
  hooks.halted = &prov.halted;
  hooks.on_consume = [&prov](int tag, std::size_t n) {
    prov.audit.log("neggrad", static_cast<Split>(tag), n);
  };
  prov.epoch_log = sgd_train(out.model, std::span<const TrainItem<T>>(items), cfg, hooks);
  prov.model_checksum = checksum(out.model);
  prov.wall_seconds = timer.seconds();
  return out;
}

// Joint loss CE(retain batch) - forget_weight * CE(forget batch) per step,
// with forget batches cycled when the forget set is smaller.
template <typename T>
UnlearnedModel<T> adv_neg_grad(const Model<T>& original, const DatasetBundle<T>& bundle,
                               const TrainConfig& cfg_in, std::uint64_t seed,
                               double forget_weight = 1.0) {
  if (bundle.forget.empty()) throw ConfigError("adv_neg_grad: empty forget set");
  detail::WallTimer timer;
  UnlearnedModel<T> out{original, {}};
  Provenance& prov = out.provenance;
  prov.method = "advneggrad";
  prov.seed = seed;
  prov.params.finetune = cfg_in;
  prov.params.forget_weight = forget_weight;

  TrainConfig cfg = cfg_in;
  cfg.seed = derive_seed(seed, "finetune");  // retain stream matches finetune's
  validate(cfg);

  const auto retain_items = train_items<T>(bundle.retain);
  const auto forget_items = train_items<T>(bundle.forget);
  const std::span<const TrainItem<T>> retain(retain_items);
  const std::span<const TrainItem<T>> forget(forget_items);

  detail::Momentum<T> mom;
  std::vector<int> labels;
  std::map<int, LayerGrads<T>> snapshot;
  auto save_params = [&] {
    for (int id : out.model.parameterized_layer_ids())
      snapshot[id] = LayerGrads<T>{out.model.layers[id].weight, out.model.layers[id].bias};
  };
  auto restore_params = [&] {
    for (auto& [id, saved] : snapshot) {
      out.model.layers[id].weight = saved.weight;
      out.model.layers[id].bias = saved.bias;
    }
  };
  for (int epoch = 0; epoch < cfg.epochs && !prov.halted; ++epoch) {
    const auto retain_plan =
        batch_index_plan(retain.size(), static_cast<std::size_t>(cfg.batch_size),
                         derive_seed(cfg.seed, "epoch", epoch));
    const auto forget_plan =
        batch_index_plan(forget.size(), static_cast<std::size_t>(cfg.batch_size),
                         derive_seed(seed, "advneg-forget", epoch));
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t bi = 0; bi < retain_plan.size() && !prov.halted; ++bi) {
      const auto& ridx = retain_plan[bi];
      const Tensor<T> rx = gather_batch(retain, ridx, &labels);
      ForwardCache<T> cache;
      Tensor<T> logits;
      try {
        logits = forward(out.model, rx, &cache);
      } catch (const ContractError&) {
        restore_params();
        prov.halted = true;
        break;
      }
      const double retain_ce = cross_entropy(logits, labels);
      if (!std::isfinite(retain_ce) || retain_ce > kDivergenceLossCap) {
        prov.halted = true;
        break;
      }
      loss_sum += retain_ce * static_cast<double>(ridx.size());
      seen += ridx.size();
      const int K = logits.dim(1);
      for (std::size_t i = 0; i < ridx.size(); ++i) {
        const T* z = logits.data() + i * K;
        int arg = 0;
        for (int k = 1; k < K; ++k)
          if (z[k] > z[arg]) arg = k;
        if (arg == labels[i]) ++correct;
      }
      ParamGrads<T> grads;
      detail::backward_from_cache(out.model, cache, cross_entropy_grad_logits(logits, labels),
                                  &grads, static_cast<Tensor<T>*>(nullptr));
      prov.audit.log("finetune", Split::Retain, ridx.size());

      double forget_ce = 0.0;
      if (forget_weight != 0.0) {
        const auto& fidx = forget_plan[bi % forget_plan.size()];
        const Tensor<T> fx = gather_batch(forget, fidx, &labels);
        ForwardCache<T> fcache;
        Tensor<T> flogits;
        try {
          flogits = forward(out.model, fx, &fcache);
        } catch (const ContractError&) {
          restore_params();
          prov.halted = true;
          break;
        }
        forget_ce = cross_entropy(flogits, labels);
        if (!std::isfinite(forget_ce) || forget_ce > kDivergenceLossCap) {
          prov.halted = true;
          break;
        }
        ParamGrads<T> fgrads;
        detail::backward_from_cache(out.model, fcache,
                                    cross_entropy_grad_logits(flogits, labels), &fgrads,
                                    static_cast<Tensor<T>*>(nullptr));
        const T fw = static_cast<T>(forget_weight);
        for (auto& [id, g] : grads) {
          const auto& fg = fgrads.at(id);
          for (std::size_t k = 0; k < g.weight.size(); ++k) g.weight[k] -= fw * fg.weight[k];
          for (std::size_t k = 0; k < g.bias.size(); ++k) g.bias[k] -= fw * fg.bias[k];
        }
        prov.audit.log("neggrad", Split::Forget, fidx.size());
      }
      prov.step_log.push_back(
          JointLossEntry{retain_ce, forget_ce, retain_ce - forget_weight * forget_ce});
      save_params();
      detail::sgd_step(out.model, grads, cfg, TrainHooks{}, mom);
    }
    if (prov.halted) {
      if (seen > 0)
        prov.epoch_log.push_back(EpochStats{loss_sum / static_cast<double>(seen),
                                            static_cast<double>(correct) /
                                                static_cast<double>(seen)});
      break;
    }
    prov.epoch_log.push_back(EpochStats{loss_sum / static_cast<double>(retain.size()),
                                        static_cast<double>(correct) /
                                            static_cast<double>(retain.size())});
  }

  prov.model_checksum = checksum(out.model);
  prov.wall_seconds = timer.seconds();
  return out;
}

// Fine-tune only the last k parameterized layers on retain; others frozen.
template <typename T>
UnlearnedModel<T> cf_k(const Model<T>& original, const DatasetBundle<T>& bundle, int k,
                       const TrainConfig& ft_cfg, std::uint64_t seed) {
  const auto param_ids = original.parameterized_layer_ids();
  if (k < 1 || k > static_cast<int>(param_ids.size()))
    throw ConfigError("cf_k: k must be in [1, parameterized layer count]");
  detail::WallTimer timer;
  UnlearnedModel<T> out{original, {}};
  Provenance& prov = out.provenance;
  prov.method = "cf_k";
  prov.seed = seed;
  prov.params.cf_k = k;
  prov.params.finetune = ft_cfg;

  std::vector<int> tail(param_ids.end() - k, param_ids.end());
  auto trainable = [tail](int id) {
    return std::find(tail.begin(), tail.end(), id) != tail.end();
  };
  prov.epoch_log =
      detail::finetune_stage(out.model, bundle, ft_cfg, seed, prov.audit, trainable);
  prov.model_checksum = checksum(out.model);
  prov.wall_seconds = timer.seconds();
  return out;
}

enum class MaskStrategy { Random, TopGradient, RandomNoise };

// Registry ids, so a provenance echo re-dispatches through run_method.
inline const char* mask_strategy_name(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::Random: return "random_mask";
    case MaskStrategy::TopGradient: return "top_grad_mask";
    case MaskStrategy::RandomNoise: return "random_noise_mask";
  }
  return "?";
}

// Ablation pipeline: reset via the chosen strategy, then the same retain
// fine-tune stage as ARU (identical reset/finetune seed streams, so runs
// differ from ARU only in the mask bits).
template <typename T>
UnlearnedModel<T> masked_variant(const Model<T>& original, const DatasetBundle<T>& bundle,
                                 MaskStrategy strategy, double ratio, const AdvConfig& adv_cfg,
                                 const TrainConfig& ft_cfg, std::uint64_t seed) {
  detail::WallTimer timer;
  UnlearnedModel<T> out{original, {}};
  Provenance& prov = out.provenance;
  prov.method = mask_strategy_name(strategy);
  prov.seed = seed;
  prov.params.ratio = ratio;
  prov.params.attack = adv_cfg;
  prov.params.finetune = ft_cfg;

  FilterMask mask;
  switch (strategy) {
    case MaskStrategy::Random:
      mask = random_mask(original, ratio, derive_seed(seed, "random-mask"));
      break;
    case MaskStrategy::TopGradient:
      mask = top_gradient_mask(original, std::span<const ImageRecord<T>>(bundle.forget), ratio,
                               ft_cfg.batch_size, &prov.audit);
      break;
    case MaskStrategy::RandomNoise:
      mask = random_noise_mask(original, std::span<const ImageRecord<T>>(bundle.forget), adv_cfg,
                               ratio, derive_seed(seed, "random-noise"), ft_cfg.batch_size,
                               &prov.audit);
      break;
  }
  out.model = reset_filters(original, mask, derive_seed(seed, "reset"));
  prov.mask_checksum = checksum(mask);
  prov.mask = std::move(mask);
  prov.epoch_log = detail::finetune_stage(out.model, bundle, ft_cfg, seed, prov.audit);
  prov.model_checksum = checksum(out.model);
  prov.wall_seconds = timer.seconds();
  return out;
}

// String-id registry used by the CLI and the experiment runner.
template <typename T>
UnlearnedModel<T> run_method(const UnlearnRequest& request, const Model<T>& original,
                             const DatasetBundle<T>& bundle, int hidden_units = 128,
                             NoiseCache<T>* noise_cache = nullptr) {
  const auto& id = request.method;
  const MethodParams& p = request.params;
  if (id == "aru")
    return aru_unlearn(original, bundle, p.attack, p.ratio, p.finetune, request.seed,
                       noise_cache);
  if (id == "retrain") return retrain_scratch<T>(bundle, p.original, request.seed, hidden_units);
  if (id == "finetune") return finetune(original, bundle, p.finetune, request.seed);
  if (id == "neggrad") return neg_grad(original, bundle, p.finetune, request.seed);
  if (id == "advneggrad")
    return adv_neg_grad(original, bundle, p.finetune, request.seed, p.forget_weight);
  if (id == "cf_k") return cf_k(original, bundle, p.cf_k, p.finetune, request.seed);
  if (id == "random_mask")
    return masked_variant(original, bundle, MaskStrategy::Random, p.ratio, p.attack, p.finetune,
                          request.seed);
  if (id == "top_grad_mask")
    return masked_variant(original, bundle, MaskStrategy::TopGradient, p.ratio, p.attack,
                          p.finetune, request.seed);
  if (id == "random_noise_mask")
    return masked_variant(original, bundle, MaskStrategy::RandomNoise, p.ratio, p.attack,
                          p.finetune, request.seed);
  throw ConfigError("unknown unlearning method: " + id);
}

}  // namespace aru
