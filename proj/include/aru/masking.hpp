// Stage II: score each convolutional filter by the gradient discrepancy between
// raw forget images and their adversarial noises, build the median-threshold
// filter mask, and re-initialize masked filters. Ablation mask strategies
// (random, top-gradient, error-minimizing noise) live here too.
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "aru/attack.hpp"
#include "aru/data.hpp"
#include "aru/nn.hpp"
#include "aru/tensor.hpp"

namespace aru {

// Per conv layer: one non-negative score per output filter.
struct FilterScores {
  std::map<int, std::vector<double>> per_layer;  // model layer id -> scores
};

// Per conv layer: true marks a filter whose weights get reset.
struct FilterMask {
  std::map<int, std::vector<std::uint8_t>> per_layer;

  std::size_t masked_count(int layer_id) const {
    auto it = per_layer.find(layer_id);
    if (it == per_layer.end()) return 0;
    std::size_t n = 0;
    for (auto b : it->second) n += b != 0;
    return n;
  }
  std::size_t total_masked() const {
    std::size_t n = 0;
    for (const auto& [id, bits] : per_layer)
      for (auto b : bits) n += b != 0;
    return n;
  }
  bool empty_mask() const { return total_masked() == 0; }
};

inline std::uint64_t checksum(const FilterMask& mask) {
  std::uint64_t h = fnv1a64("mask");
  for (const auto& [id, bits] : mask.per_layer) {
    h = fnv1a64(&id, sizeof(id), h);
    h = fnv1a64(bits.data(), bits.size(), h);
  }
  return h;
}

// All-false mask matching the model's conv layers.
template <typename T>
FilterMask empty_mask(const Model<T>& model) {
  FilterMask mask;
  for (int id : model.conv_layer_ids())
    mask.per_layer[id] =
        std::vector<std::uint8_t>(static_cast<std::size_t>(model.layers[id].spec.out_filters), 0);
  return mask;
}

// ---------------------------------------------------------------------------
// Mask text format: one line per conv layer, "<layer-id> <bitstring>".

inline std::string serialize_mask(const FilterMask& mask) {
  std::string out;
  for (const auto& [id, bits] : mask.per_layer) {
    out += std::to_string(id);
    out += ' ';
    for (auto b : bits) out += b ? '1' : '0';
    out += '\n';
  }
  return out;
}

inline FilterMask parse_mask(const std::string& text) {
  FilterMask mask;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    const std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    const std::size_t sp = line.find(' ');
    if (sp == std::string::npos) throw IngestError("mask line missing separator: " + line);
    int id = 0;
    try {
      id = std::stoi(line.substr(0, sp));
    } catch (const std::exception&) {
      throw IngestError("bad mask layer id: " + line);
    }
    std::vector<std::uint8_t> bits;
    for (char c : line.substr(sp + 1)) {
      if (c == '0')
        bits.push_back(0);
      else if (c == '1')
        bits.push_back(1);
      else
        throw IngestError("bad mask bit in line: " + line);
    }
    mask.per_layer[id] = std::move(bits);
  }
  return mask;
}

inline void save_mask(const FilterMask& mask, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IngestError("cannot open for writing: " + path);
  out << serialize_mask(mask);
}

inline FilterMask load_mask(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_mask(text);
}

// ---------------------------------------------------------------------------
// Scoring

namespace detail {

// Mean parameter gradient over a record list, accumulated in double across
// batches so the result is permutation-stable to float tolerance.
template <typename T>
std::map<int, std::vector<double>> mean_param_grads(const Model<T>& model,
                                                    std::span<const ImageRecord<T>> records,
                                                    const std::vector<NoisePair<T>>* noises,
                                                    int batch_size, const char* stage,
                                                    AccessAudit* audit) {
  std::map<int, std::vector<double>> acc;
  for (int id : model.parameterized_layer_ids())
    acc[id] = std::vector<double>(model.layers[id].weight.size(), 0.0);

  std::vector<int> labels;
  const std::size_t n = records.size();
  for (std::size_t off = 0; off < n; off += static_cast<std::size_t>(batch_size)) {
    const std::size_t hi = std::min(n, off + static_cast<std::size_t>(batch_size));
    const auto& first = records[off].image;
    Tensor<T> x({static_cast<int>(hi - off), first.dim(0), first.dim(1), first.dim(2)});
    labels.resize(hi - off);
    const std::size_t stride = first.size();
    for (std::size_t i = off; i < hi; ++i) {
      const T* src = records[i].image.data();
      T* dst = x.data() + (i - off) * stride;
      if (noises) {
        // noise-only input: delta centered into pixel bounds
        const T* d = (*noises)[i].noise.data();
        for (std::size_t k = 0; k < stride; ++k) dst[k] = d[k] + static_cast<T>(0.5);
      } else {
        std::copy(src, src + stride, dst);
      }
      labels[i - off] = records[i].label;
    }
    const ParamGrads<T> grads = grad_wrt_params(model, x, labels);
    const double weight = static_cast<double>(hi - off) / static_cast<double>(n);
    for (const auto& [id, g] : grads) {
      auto& dst = acc[id];
      const T* gw = g.weight.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += weight * double(gw[k]);
    }
    if (audit) audit->log(stage, records[off].split, hi - off);
  }
  return acc;
}

template <typename T>
std::vector<double> per_filter_mean_abs(const Model<T>& model, int layer_id,
                                        const std::vector<double>& flat) {
  const ConvLayerSpec& spec = model.layers[layer_id].spec;
  const std::size_t per_filter =
      std::size_t(spec.in_channels) * spec.kernel_h * spec.kernel_w;
  std::vector<double> scores(static_cast<std::size_t>(spec.out_filters), 0.0);
  for (int f = 0; f < spec.out_filters; ++f) {
    double s = 0.0;
    const double* p = flat.data() + std::size_t(f) * per_filter;
    for (std::size_t k = 0; k < per_filter; ++k) s += std::abs(p[k]);
    scores[static_cast<std::size_t>(f)] = s / static_cast<double>(per_filter);
  }
  return scores;
}

}  // namespace detail

// score_f = mean over the filter's (in_channels x kh x kw) weights of
// |G_noise - G_img|, where both gradient passes are single mean-reduced
// sweeps through the original model (no parameter updates).
template <typename T>
FilterScores gradient_discrepancy_scores(const Model<T>& model,
                                         std::span<const ImageRecord<T>> forget,
                                         const std::vector<NoisePair<T>>& noises,
                                         int batch_size = 64, AccessAudit* audit = nullptr) {
  if (forget.empty()) throw ContractError("gradient_discrepancy_scores: empty forget set");
  if (noises.size() != forget.size())
    throw ContractError("gradient_discrepancy_scores: noises misaligned with forget records");
  for (std::size_t i = 0; i < noises.size(); ++i)
    if (!noises[i].noise.same_shape(forget[i].image))
      throw ContractError("gradient_discrepancy_scores: noise shape mismatch");

  const auto g_img =
      detail::mean_param_grads(model, forget, static_cast<const std::vector<NoisePair<T>>*>(nullptr),
                               batch_size, "scoring", audit);
  const auto g_noise =
      detail::mean_param_grads(model, forget, &noises, batch_size, "scoring", audit);

  FilterScores scores;
  for (int id : model.conv_layer_ids()) {
    std::vector<double> diff = g_noise.at(id);
    const std::vector<double>& img = g_img.at(id);
    for (std::size_t k = 0; k < diff.size(); ++k) diff[k] -= img[k];
    scores.per_layer[id] = detail::per_filter_mean_abs(model, id, diff);
  }
  return scores;
}

// ---------------------------------------------------------------------------
// Mask construction

// Masks the floor(ratio * out_filters) filters with the SMALLEST scores in
// each layer (the most influenced, per the discrepancy reading). Ties at the
// threshold mask lower filter indices first.
inline FilterMask build_mask(const FilterScores& scores, double ratio = 0.5) {
  if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("build_mask: ratio must be in (0,1)");
  FilterMask mask;
  for (const auto& [id, layer_scores] : scores.per_layer) {
    const std::size_t n = layer_scores.size();
    if (n < 2) throw ConfigError("build_mask: layer with fewer than 2 filters");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (layer_scores[a] != layer_scores[b]) return layer_scores[a] < layer_scores[b];
      return a < b;
    });
    const std::size_t k = static_cast<std::size_t>(ratio * static_cast<double>(n));
    std::vector<std::uint8_t> bits(n, 0);
    for (std::size_t i = 0; i < k; ++i) bits[order[i]] = 1;
    mask.per_layer[id] = std::move(bits);
  }
  return mask;
}

// Ablation: mask the floor(ratio * out_filters) filters with the LARGEST
// mean |gradient| on the forget set, per layer, same tie rule.
template <typename T>
FilterMask top_gradient_mask(const Model<T>& model, std::span<const ImageRecord<T>> forget,
                             double ratio = 0.5, int batch_size = 64,
                             AccessAudit* audit = nullptr) {
  if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("top_gradient_mask: ratio must be in (0,1)");
  if (forget.empty()) throw ContractError("top_gradient_mask: empty forget set");
  const auto g_img =
      detail::mean_param_grads(model, forget, static_cast<const std::vector<NoisePair<T>>*>(nullptr),
                               batch_size, "scoring", audit);
  FilterMask mask;
  for (int id : model.conv_layer_ids()) {
    const std::vector<double> layer_scores = detail::per_filter_mean_abs(model, id, g_img.at(id));
    const std::size_t n = layer_scores.size();
    if (n < 2) throw ConfigError("top_gradient_mask: layer with fewer than 2 filters");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (layer_scores[a] != layer_scores[b]) return layer_scores[a] > layer_scores[b];
      return a < b;
    });
    const std::size_t k = static_cast<std::size_t>(ratio * static_cast<double>(n));
    std::vector<std::uint8_t> bits(n, 0);
    for (std::size_t i = 0; i < k; ++i) bits[order[i]] = 1;
    mask.per_layer[id] = std::move(bits);
  }
  return mask;
}

// Ablation: uniformly random floor(ratio * out_filters) per layer, seeded.
template <typename T>
FilterMask random_mask(const Model<T>& model, double ratio, std::uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("random_mask: ratio must be in (0,1)");
  FilterMask mask;
  for (int id : model.conv_layer_ids()) {
    const std::size_t n = static_cast<std::size_t>(model.layers[id].spec.out_filters);
    if (n < 2) throw ConfigError("random_mask: layer with fewer than 2 filters");
    Rng rng(derive_seed(seed, "random-mask", static_cast<std::uint64_t>(id)));
    const auto perm = rng.permutation(n);
    const std::size_t k = static_cast<std::size_t>(ratio * static_cast<double>(n));
    std::vector<std::uint8_t> bits(n, 0);
    for (std::size_t i = 0; i < k; ++i) bits[perm[i]] = 1;
    mask.per_layer[id] = std::move(bits);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Error-minimizing noise (random-noise ablation)

// Noise initialized uniformly in [-eps, eps], then optimized for cfg.steps
// PGD steps to MINIMIZE cross-entropy on the forget labels (descent with the
// same alpha/epsilon/clip machinery). With steps taken as 0 this degenerates
// to the raw random initialization.
template <typename T>
std::vector<NoisePair<T>> error_minimizing_noise(const Model<T>& model,
                                                 std::span<const ImageRecord<T>> forget,
                                                 const AdvConfig& cfg, std::uint64_t seed,
                                                 int opt_steps, int batch_size = 64,
                                                 AccessAudit* audit = nullptr,
                                                 std::vector<double>* step_losses = nullptr) {
  validate(cfg);
  if (forget.empty()) throw ContractError("error_minimizing_noise: empty forget set");
  if (opt_steps < 0) throw ConfigError("error_minimizing_noise: negative steps");

  std::vector<NoisePair<T>> pairs(forget.size());
  if (step_losses) step_losses->assign(static_cast<std::size_t>(opt_steps) + 1, 0.0);

  std::vector<int> labels;
  const std::size_t n = forget.size();
  for (std::size_t off = 0; off < n; off += static_cast<std::size_t>(batch_size)) {
    const std::size_t hi = std::min(n, off + static_cast<std::size_t>(batch_size));
    const auto& first = forget[off].image;
    const std::size_t stride = first.size();
    Tensor<T> anchor({static_cast<int>(hi - off), first.dim(0), first.dim(1), first.dim(2)});
    labels.resize(hi - off);
    for (std::size_t i = off; i < hi; ++i) {
      std::copy(forget[i].image.values().begin(), forget[i].image.values().end(),
                anchor.values().begin() + (i - off) * stride);
      labels[i - off] = forget[i].label;
    }
    // x'_0 = clamp(x + U[-eps,eps]); per-record streams so batching does not
    // change the noise.
    Tensor<T> x_adv = anchor;
    for (std::size_t i = off; i < hi; ++i) {
      Rng rng(derive_seed(seed, "noise-init", static_cast<std::uint64_t>(i)));
      T* xv = x_adv.data() + (i - off) * stride;
      for (std::size_t k = 0; k < stride; ++k) {
        T v = xv[k] + static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon));
        xv[k] = std::min(std::max(v, T{0}), T{1});
      }
    }
    const double frac = static_cast<double>(hi - off) / static_cast<double>(n);
    for (int t = 0; t < opt_steps; ++t) {
      if (step_losses)
        (*step_losses)[static_cast<std::size_t>(t)] +=
            frac * cross_entropy(forward(model, x_adv), labels);
      const Tensor<T> g = grad_wrt_input(model, x_adv, labels);
      detail::pgd_step(x_adv, g, anchor, cfg.alpha, cfg.epsilon, /*descend=*/true);
    }
    if (step_losses)
      (*step_losses)[static_cast<std::size_t>(opt_steps)] +=
          frac * cross_entropy(forward(model, x_adv), labels);
    for (std::size_t i = off; i < hi; ++i) {
      pairs[i].record_index = i;
      pairs[i].noise = Tensor<T>(forget[i].image.shape());
      const T* xv = x_adv.data() + (i - off) * stride;
      const T* av = anchor.data() + (i - off) * stride;
      for (std::size_t k = 0; k < stride; ++k) pairs[i].noise[k] = xv[k] - av[k];
    }
    if (audit) audit->log("attack", forget[off].split, hi - off);
  }
  return pairs;
}

// Full random-noise ablation: optimize error-minimizing noise, then score and
// threshold exactly like the adversarial pipeline.
template <typename T>
FilterMask random_noise_mask(const Model<T>& model, std::span<const ImageRecord<T>> forget,
                             const AdvConfig& cfg, double ratio, std::uint64_t seed,
                             int batch_size = 64, AccessAudit* audit = nullptr) {
  const auto noises =
      error_minimizing_noise(model, forget, cfg, seed, cfg.steps, batch_size, audit);
  const FilterScores scores =
      gradient_discrepancy_scores(model, forget, noises, batch_size, audit);
  return build_mask(scores, ratio);
}

// ---------------------------------------------------------------------------
// Re-initialization

// Masked filters' weights are re-drawn from the recorded per-layer init
// distribution. A full fresh weight tensor is sampled per layer (same draw
// order as construction) and only masked filter slices are copied, so the
// values a given (seed, layer, filter) receives do not depend on which other
// filters are masked. Unmasked filters, all biases, and the dense head stay
// bit-identical.
template <typename T>
Model<T> reset_filters(const Model<T>& model, const FilterMask& mask, std::uint64_t seed) {
  const auto conv_ids = model.conv_layer_ids();
  for (const auto& [id, bits] : mask.per_layer) {
    if (std::find(conv_ids.begin(), conv_ids.end(), id) == conv_ids.end())
      throw ContractError("reset_filters: mask names non-conv layer " + std::to_string(id));
    if (bits.size() != static_cast<std::size_t>(model.layers[id].spec.out_filters))
      throw ContractError("reset_filters: mask length mismatch on layer " + std::to_string(id));
  }
  Model<T> out = model;
  for (const auto& [id, bits] : mask.per_layer) {
    bool any = false;
    for (auto b : bits) any |= b != 0;
    if (!any) continue;
    Layer<T>& layer = out.layers[id];
    const ConvLayerSpec& spec = layer.spec;
    const std::size_t per_filter = std::size_t(spec.in_channels) * spec.kernel_h * spec.kernel_w;
    Rng rng(derive_seed(seed, "reset-layer", static_cast<std::uint64_t>(id)));
    Tensor<T> fresh(layer.weight.shape());
    const double limit = static_cast<double>(layer.init_limit);
    for (T& v : fresh.values()) v = static_cast<T>(rng.uniform(-limit, limit));
    for (int f = 0; f < spec.out_filters; ++f) {
      if (!bits[static_cast<std::size_t>(f)]) continue;
      const std::size_t base = std::size_t(f) * per_filter;
      for (std::size_t k = 0; k < per_filter; ++k)
        layer.weight[base + k] = fresh[base + k];
    }
  }
  return out;
}

}  // namespace aru
