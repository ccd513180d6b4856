// Utility / forgetting / NoMUS evaluation. The MIA is a single-feature
// logistic regression on per-sample cross-entropy loss, fit by a fixed
// deterministic full-batch schedule so scores are identical across platforms.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "aru/data.hpp"
#include "aru/nn.hpp"

namespace aru {

// Per-sample cross-entropy losses, order preserved.
template <typename T>
std::vector<double> collect_losses(const Model<T>& model, std::span<const ImageRecord<T>> records,
                                   int batch_size = 256) {
  if (records.empty()) throw ContractError("collect_losses: empty records");
  std::vector<double> losses;
  losses.reserve(records.size());
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
    const Tensor<T> logits = forward(model, x);
    const int K = logits.dim(1);
    for (std::size_t i = 0; i < hi - off; ++i) {
      const T* z = logits.data() + i * K;
      double zmax = z[0];
      for (int k = 1; k < K; ++k) zmax = std::max(zmax, double(z[k]));
      double sum = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(double(z[k]) - zmax);
      losses.push_back(zmax + std::log(sum) - double(z[labels[i]]));
    }
  }
  return losses;
}

struct MIAResult {
  std::vector<double> forget_losses;
  std::vector<double> unseen_losses;
  double weight = 0.0;  // on the standardized loss feature
  double bias = 0.0;
  double accuracy = 0.5;  // M, evaluated on the pooled fit data
  bool degenerate = false;
};

inline constexpr int kMiaIterations = 500;
inline constexpr double kMiaStep = 0.5;

// Logistic regression psi(loss) -> {1 = forget, 0 = unseen}: inputs
// standardized by pooled mean/std, zero init, 500 full-batch steps of fixed
// size. M is the 0.5-threshold accuracy on the same pooled data. If every
// loss is identical the fit degenerates to predicting the majority class, so
// M equals the larger class prior (flagged via `degenerate`).
inline MIAResult fit_mia(std::span<const double> forget_losses,
                         std::span<const double> unseen_losses) {
  if (forget_losses.empty() || unseen_losses.empty())
    throw ContractError("fit_mia: both loss lists must be non-empty");

  MIAResult result;
  result.forget_losses.assign(forget_losses.begin(), forget_losses.end());
  result.unseen_losses.assign(unseen_losses.begin(), unseen_losses.end());

  const std::size_t n1 = forget_losses.size(), n0 = unseen_losses.size();
  const std::size_t n = n1 + n0;
  std::vector<double> z;
  z.reserve(n);
  for (double v : forget_losses) z.push_back(v);
  for (double v : unseen_losses) z.push_back(v);

  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  double stddev = std::sqrt(var);
  if (stddev < 1e-12) {
    result.degenerate = true;
    stddev = 1.0;
  }
  for (double& v : z) v = (v - mean) / stddev;

  double w = 0.0, b = 0.0;
  for (int it = 0; it < kMiaIterations; ++it) {
    double gw = 0.0, gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = i < n1 ? 1.0 : 0.0;
      const double p = 1.0 / (1.0 + std::exp(-(w * z[i] + b)));
      gw += (p - y) * z[i];
      gb += (p - y);
    }
    w -= kMiaStep * gw / static_cast<double>(n);
    b -= kMiaStep * gb / static_cast<double>(n);
  }
  result.weight = w;
  result.bias = b;

  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int pred = (w * z[i] + b) >= 0.0 ? 1 : 0;
    const int y = i < n1 ? 1 : 0;
    if (pred == y) ++correct;
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return result;
}

// F = |M - 0.5|: 0 means forget and unseen are indistinguishable.
inline double forgetting_score(double mia_accuracy) { return std::abs(mia_accuracy - 0.5); }

// NoMUS = U*lambda + (1 - 2F)*(1 - lambda).
inline double nomus(double utility, double forgetting, double lambda = 0.5) {
  return utility * lambda + (1.0 - 2.0 * forgetting) * (1.0 - lambda);
}

struct Metrics {
  double utility = 0.0;      // test accuracy
  double forgetting = 0.0;   // |M - 0.5|
  double nomus_score = 0.0;
  double mia_accuracy = 0.5;
  double lambda = 0.5;
  bool mia_degenerate = false;
};

template <typename T>
Metrics evaluate(const Model<T>& model, const DatasetBundle<T>& bundle, double lambda = 0.5,
                 MIAResult* mia_out = nullptr) {
  const auto test_items = train_items<T>(bundle.test);
  Metrics m;
  m.lambda = lambda;
  m.utility = accuracy(model, std::span<const TrainItem<T>>(test_items));
  const auto forget_losses = collect_losses(model, std::span<const ImageRecord<T>>(bundle.forget));
  const auto unseen_losses = collect_losses(model, std::span<const ImageRecord<T>>(bundle.unseen));
  MIAResult mia = fit_mia(forget_losses, unseen_losses);
  m.mia_accuracy = mia.accuracy;
  m.mia_degenerate = mia.degenerate;
  m.forgetting = forgetting_score(mia.accuracy);
  m.nomus_score = nomus(m.utility, m.forgetting, lambda);
  if (mia_out) *mia_out = std::move(mia);
  return m;
}

}  // namespace aru
