// Stage I: sample-wise adversarial noise for the forget set via multi-step
// PGD on the l-infinity ball, deterministic (no random start).
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "aru/data.hpp"
#include "aru/nn.hpp"
#include "aru/tensor.hpp"

namespace aru {

struct AdvConfig {
  int steps = 7;
  double epsilon = 8.0 / 255.0;  // l-inf radius, fraction of dynamic range
  double alpha = 2.0 / 255.0;    // step size, same units
};

inline void validate(const AdvConfig& cfg) {
  if (cfg.steps < 1) throw ConfigError("AdvConfig: steps must be >= 1");
  if (cfg.alpha <= 0 || cfg.alpha > cfg.epsilon)
    throw ConfigError("AdvConfig: require 0 < alpha <= epsilon");
  if (cfg.epsilon > 0.5) throw ConfigError("AdvConfig: epsilon must be <= 0.5");
}

template <typename T>
struct NoisePair {
  std::size_t record_index = 0;  // position in the attacked record list
  Tensor<T> noise;               // delta, same shape as the image
};

namespace detail {

template <typename T>
T sign_of(T v) {
  if (v > T{}) return T{1};
  if (v < T{}) return T{-1};
  return T{};  // sign(0) = 0 by convention
}

// One projected step: add alpha*sign(g), clamp to the epsilon box around the
// anchor, then to pixel bounds.
template <typename T>
void pgd_step(Tensor<T>& x_adv, const Tensor<T>& g, const Tensor<T>& anchor, double alpha,
              double epsilon, bool descend) {
  const T a = static_cast<T>(descend ? -alpha : alpha);
  const T eps = static_cast<T>(epsilon);
  T* xv = x_adv.data();
  const T* gv = g.data();
  const T* x0 = anchor.data();
  for (std::size_t i = 0; i < x_adv.size(); ++i) {
    T v = xv[i] + a * sign_of(gv[i]);
    v = std::min(std::max(v, x0[i] - eps), x0[i] + eps);
    v = std::min(std::max(v, T{0}), T{1});
    xv[i] = v;
  }
}

}  // namespace detail

// Loss-ascending PGD iterates starting from x itself:
//   x'_{t+1} = Clip_{x,eps}( x'_t + alpha * sign(grad_x CE(model, x'_t, y)) )
// Returns delta = x'_T - x for the whole batch.
template <typename T>
Tensor<T> pgd_attack(const Model<T>& model, const Tensor<T>& x, std::span<const int> labels,
                     const AdvConfig& cfg) {
  validate(cfg);
  Tensor<T> x_adv = x;
  for (int t = 0; t < cfg.steps; ++t) {
    const Tensor<T> g = grad_wrt_input(model, x_adv, labels);
    detail::pgd_step(x_adv, g, x, cfg.alpha, cfg.epsilon, /*descend=*/false);
  }
  Tensor<T> delta = x_adv;
  T* dv = delta.data();
  const T* xv = x.data();
  for (std::size_t i = 0; i < delta.size(); ++i) dv[i] -= xv[i];
  return delta;
}

// Attacks every forget record (order preserved), batched for throughput.
template <typename T>
std::vector<NoisePair<T>> attack_forget_set(const Model<T>& model, const DatasetBundle<T>& bundle,
                                            const AdvConfig& cfg, int batch_size = 64,
                                            AccessAudit* audit = nullptr) {
  validate(cfg);
  if (bundle.forget.empty()) throw ConfigError("attack_forget_set: empty forget set");
  if (batch_size < 1) throw ConfigError("attack_forget_set: batch_size must be >= 1");

  const auto& records = bundle.forget;
  std::vector<NoisePair<T>> pairs;
  pairs.reserve(records.size());
  std::vector<int> labels;
  for (std::size_t off = 0; off < records.size(); off += static_cast<std::size_t>(batch_size)) {
    const std::size_t hi = std::min(records.size(), off + static_cast<std::size_t>(batch_size));
    const auto& first = records[off].image;
    Tensor<T> x({static_cast<int>(hi - off), first.dim(0), first.dim(1), first.dim(2)});
    labels.resize(hi - off);
    const std::size_t stride = first.size();
    for (std::size_t i = off; i < hi; ++i) {
      std::copy(records[i].image.values().begin(), records[i].image.values().end(),
                x.values().begin() + (i - off) * stride);
      labels[i - off] = records[i].label;
    }
    const Tensor<T> delta = pgd_attack(model, x, labels, cfg);
    for (std::size_t i = off; i < hi; ++i) {
      NoisePair<T> pair;
      pair.record_index = i;
      pair.noise = Tensor<T>(records[i].image.shape());
      std::copy(delta.values().begin() + (i - off) * stride,
                delta.values().begin() + (i - off + 1) * stride, pair.noise.values().begin());
      pairs.push_back(std::move(pair));
    }
    if (audit) audit->log("attack", Split::Forget, hi - off);
  }
  return pairs;
}

// Memo for attack results keyed by (model checksum, forget-set checksum,
// attack config). The attack is a pure function, so cached entries are
// indistinguishable from recomputation.
template <typename T>
class NoiseCache {
 public:
  const std::vector<NoisePair<T>>& get_or_compute(const Model<T>& model,
                                                  const DatasetBundle<T>& bundle,
                                                  const AdvConfig& cfg, int batch_size = 64,
                                                  AccessAudit* audit = nullptr) {
    std::uint64_t key = checksum(model);
    for (const auto& r : bundle.forget) {
      const std::uint64_t rh = record_hash(r);
      key = fnv1a64(&rh, sizeof(rh), key);
    }
    key = fnv1a64(&cfg.steps, sizeof(cfg.steps), key);
    key = fnv1a64(&cfg.epsilon, sizeof(cfg.epsilon), key);
    key = fnv1a64(&cfg.alpha, sizeof(cfg.alpha), key);
    auto it = cache_.find(key);
    if (it == cache_.end())
      it = cache_.emplace(key, attack_forget_set(model, bundle, cfg, batch_size, audit)).first;
    else if (audit)
      audit->log("attack", Split::Forget, bundle.forget.size());
    return it->second;
  }

 private:
  std::map<std::uint64_t, std::vector<NoisePair<T>>> cache_;
};

// Noise visualization used for exports: delta in [-eps, eps] mapped to [0,1].
template <typename T>
Tensor<T> noise_visualization(const Tensor<T>& delta, double epsilon) {
  Tensor<T> vis = delta;
  for (T& v : vis.values())
    v = static_cast<T>(std::clamp(double(v) / (2.0 * epsilon) + 0.5, 0.0, 1.0));
  return vis;
}

}  // namespace aru
