// CNN substrate: a fixed 4-conv-block classifier with explicit forward and
// reverse-mode gradients (w.r.t. parameters and inputs), cross-entropy loss,
// and momentum-SGD training. Single-threaded and deterministic per seed.
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "aru/tensor.hpp"

namespace aru {

struct ConvLayerSpec {
  int out_filters = 0;
  int in_channels = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  int index_in_model = -1;
};

enum class LayerKind { Conv, ReLU, MaxPool, Flatten, Dense };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Dense: return "dense";
  }
  return "?";
}

template <typename T>
struct Layer {
  LayerKind kind = LayerKind::ReLU;
  ConvLayerSpec spec{};   // Conv only
  int in_features = 0;    // Dense only
  int out_features = 0;   // Dense only
  Tensor<T> weight;       // Conv: (out,in,kh,kw); Dense: (out,in)
  Tensor<T> bias;         // (out)
  T init_limit = T{};     // recorded fan-in bound, re-sampled by reset_filters

  bool has_params() const { return kind == LayerKind::Conv || kind == LayerKind::Dense; }
};

template <typename T>
struct Model {
  int num_classes = 0;
  std::array<int, 3> image_shape{};  // C, H, W
  std::uint64_t init_seed = 0;
  std::vector<Layer<T>> layers;

  std::vector<int> conv_layer_ids() const {
    std::vector<int> ids;
    for (int i = 0; i < static_cast<int>(layers.size()); ++i)
      if (layers[i].kind == LayerKind::Conv) ids.push_back(i);
    return ids;
  }

  std::vector<int> parameterized_layer_ids() const {
    std::vector<int> ids;
    for (int i = 0; i < static_cast<int>(layers.size()); ++i)
      if (layers[i].has_params()) ids.push_back(i);
    return ids;
  }
};

template <typename T>
std::uint64_t checksum(const Model<T>& m) {
  std::uint64_t h = fnv1a64("model");
  h = fnv1a64(&m.num_classes, sizeof(m.num_classes), h);
  for (int d : m.image_shape) h = fnv1a64(&d, sizeof(d), h);
  for (const auto& layer : m.layers) {
    const int k = static_cast<int>(layer.kind);
    h = fnv1a64(&k, sizeof(k), h);
    if (layer.has_params()) {
      const std::uint64_t w = checksum(layer.weight);
      const std::uint64_t b = checksum(layer.bias);
      h = fnv1a64(&w, sizeof(w), h);
      h = fnv1a64(&b, sizeof(b), h);
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Model construction

namespace detail {

// Fan-in-scaled uniform with ReLU gain: U(-limit, limit), limit = sqrt(6/fan_in).
// The per-layer limit is recorded so masked filters can be re-sampled from the
// identical distribution later.
template <typename T>
void init_layer_params(Layer<T>& layer, Rng& rng) {
  double fan_in = 0.0;
  if (layer.kind == LayerKind::Conv)
    fan_in = double(layer.spec.in_channels) * layer.spec.kernel_h * layer.spec.kernel_w;
  else
    fan_in = double(layer.in_features);
  const double limit = std::sqrt(6.0 / fan_in);
  layer.init_limit = static_cast<T>(limit);
  for (T& v : layer.weight.values()) v = static_cast<T>(rng.uniform(-limit, limit));
  layer.bias.fill(T{});
}

}  // namespace detail

// Fixed architecture: four 3x3 conv blocks (16/32/64/64 filters, ReLU, 2x2
// max-pool after the first three), then a 128-unit hidden dense layer and the
// classifier head. Fan-in-scaled uniform init, zero biases, seeded per layer.
template <typename T = float>
Model<T> build_model(int num_classes, std::array<int, 3> image_shape, std::uint64_t init_seed,
                     int hidden_units = 128) {
  const int C = image_shape[0], H = image_shape[1], W = image_shape[2];
  if (num_classes < 2) throw ConfigError("build_model: num_classes must be >= 2");
  if (C < 1 || H < 8 || W < 8) throw ConfigError("build_model: image dims must be >= 8x8");
  if (hidden_units < 1) throw ConfigError("build_model: hidden_units must be >= 1");

  Model<T> m;
  m.num_classes = num_classes;
  m.image_shape = image_shape;
  m.init_seed = init_seed;
  auto plain = [](LayerKind k) {
    Layer<T> l;
    l.kind = k;
    return l;
  };

  const int filters[4] = {16, 32, 64, 64};
  int c = C, h = H, w = W;
  for (int block = 0; block < 4; ++block) {
    Layer<T> conv;
    conv.kind = LayerKind::Conv;
    conv.spec = ConvLayerSpec{filters[block], c, 3, 3, static_cast<int>(m.layers.size())};
    conv.weight = Tensor<T>({filters[block], c, 3, 3});
    conv.bias = Tensor<T>({filters[block]});
    m.layers.push_back(std::move(conv));
    m.layers.push_back(plain(LayerKind::ReLU));
    c = filters[block];
    if (block < 3) {
      m.layers.push_back(plain(LayerKind::MaxPool));
      h /= 2;
      w /= 2;
      if (h < 1 || w < 1) throw ConfigError("build_model: image too small for pooling stack");
    }
  }
  m.layers.push_back(plain(LayerKind::Flatten));

  Layer<T> fc1;
  fc1.kind = LayerKind::Dense;
  fc1.in_features = c * h * w;
  fc1.out_features = hidden_units;
  fc1.weight = Tensor<T>({hidden_units, fc1.in_features});
  fc1.bias = Tensor<T>({hidden_units});
  m.layers.push_back(std::move(fc1));
  m.layers.push_back(plain(LayerKind::ReLU));

  Layer<T> fc2;
  fc2.kind = LayerKind::Dense;
  fc2.in_features = hidden_units;
  fc2.out_features = num_classes;
  fc2.weight = Tensor<T>({num_classes, hidden_units});
  fc2.bias = Tensor<T>({num_classes});
  m.layers.push_back(std::move(fc2));

  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (!m.layers[i].has_params()) continue;
    Rng rng(derive_seed(init_seed, "layer-init", i));
    detail::init_layer_params(m.layers[i], rng);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
struct ForwardCache {
  // acts[0] is the input batch; acts[i+1] is the output of layers[i].
  std::vector<Tensor<T>> acts;
  // Per layer: flat (H*W) argmax per pooled output element, empty for non-pool.
  std::vector<std::vector<int>> pool_argmax;
};

namespace detail {

template <typename T>
Tensor<T> conv2d_forward(const Layer<T>& layer, const Tensor<T>& x) {
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = layer.spec.out_filters, kh = layer.spec.kernel_h, kw = layer.spec.kernel_w;
  const int ph = kh / 2, pw = kw / 2;
  Tensor<T> y({B, Cout, H, W});
  const T* wp = layer.weight.data();
  for (int b = 0; b < B; ++b) {
    const T* xin = x.data() + std::size_t(b) * Cin * H * W;
    T* yout = y.data() + std::size_t(b) * Cout * H * W;
    for (int oc = 0; oc < Cout; ++oc) {
      T* yplane = yout + std::size_t(oc) * H * W;
      const T bv = layer.bias[oc];
      for (int i = 0; i < H * W; ++i) yplane[i] = bv;
      for (int ic = 0; ic < Cin; ++ic) {
        const T* xplane = xin + std::size_t(ic) * H * W;
        const T* wk = wp + (std::size_t(oc) * Cin + ic) * kh * kw;
        for (int ky = 0; ky < kh; ++ky) {
          const int oy_lo = std::max(0, ph - ky), oy_hi = std::min(H, H + ph - ky);
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = wk[ky * kw + kx];
            const int ox_lo = std::max(0, pw - kx), ox_hi = std::min(W, W + pw - kx);
            const int dx = kx - pw;
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const T* src = xplane + std::size_t(oy + ky - ph) * W + dx;
              T* dst = yplane + std::size_t(oy) * W;
              for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox] += wv * src[ox];
            }
          }
        }
      }
    }
  }
  return y;
}

// Accumulates dW/db, and dX when requested.
template <typename T>
void conv2d_backward(const Layer<T>& layer, const Tensor<T>& x, const Tensor<T>& dy,
                     Tensor<T>* dw, Tensor<T>* db, Tensor<T>* dx) {
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = layer.spec.out_filters, kh = layer.spec.kernel_h, kw = layer.spec.kernel_w;
  const int ph = kh / 2, pw = kw / 2;
  const T* wp = layer.weight.data();
  for (int b = 0; b < B; ++b) {
    const T* xin = x.data() + std::size_t(b) * Cin * H * W;
    const T* dyb = dy.data() + std::size_t(b) * Cout * H * W;
    T* dxb = dx ? dx->data() + std::size_t(b) * Cin * H * W : nullptr;
    for (int oc = 0; oc < Cout; ++oc) {
      const T* dyplane = dyb + std::size_t(oc) * H * W;
      if (db) {
        T s{};
        for (int i = 0; i < H * W; ++i) s += dyplane[i];
        (*db)[oc] += s;
      }
      for (int ic = 0; ic < Cin; ++ic) {
        const T* xplane = xin + std::size_t(ic) * H * W;
        T* dxplane = dxb ? dxb + std::size_t(ic) * H * W : nullptr;
        const std::size_t wbase = (std::size_t(oc) * Cin + ic) * kh * kw;
        for (int ky = 0; ky < kh; ++ky) {
          const int oy_lo = std::max(0, ph - ky), oy_hi = std::min(H, H + ph - ky);
          for (int kx = 0; kx < kw; ++kx) {
            const int ox_lo = std::max(0, pw - kx), ox_hi = std::min(W, W + pw - kx);
            const int dxoff = kx - pw;
            if (dw) {
              T acc{};
              for (int oy = oy_lo; oy < oy_hi; ++oy) {
                const T* src = xplane + std::size_t(oy + ky - ph) * W + dxoff;
                const T* g = dyplane + std::size_t(oy) * W;
                for (int ox = ox_lo; ox < ox_hi; ++ox) acc += g[ox] * src[ox];
              }
              (*dw)[wbase + ky * kw + kx] += acc;
            }
            if (dxplane) {
              const T wv = wp[wbase + ky * kw + kx];
              for (int oy = oy_lo; oy < oy_hi; ++oy) {
                T* d = dxplane + std::size_t(oy + ky - ph) * W + dxoff;
                const T* g = dyplane + std::size_t(oy) * W;
                for (int ox = ox_lo; ox < ox_hi; ++ox) d[ox] += wv * g[ox];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> maxpool_forward(const Tensor<T>& x, std::vector<int>* argmax) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H / 2, Wo = W / 2;
  if (Ho < 1 || Wo < 1) throw ContractError("maxpool: spatial dims too small");
  Tensor<T> y({B, C, Ho, Wo});
  if (argmax) argmax->assign(std::size_t(B) * C * Ho * Wo, 0);
  std::size_t oi = 0;
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T* xplane = x.data() + (std::size_t(b) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          const int y0 = oy * 2, x0 = ox * 2;
          int best = y0 * W + x0;
          T bv = xplane[best];
          // ties keep the first element in scan order
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = (y0 + dy) * W + (x0 + dx);
              if (xplane[idx] > bv) {
                bv = xplane[idx];
                best = idx;
              }
            }
          }
          y[oi] = bv;
          if (argmax) (*argmax)[oi] = best;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> maxpool_backward(const Tensor<T>& x, const Tensor<T>& dy,
                           const std::vector<int>& argmax) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = dy.dim(2), Wo = dy.dim(3);
  Tensor<T> dx({B, C, H, W});
  std::size_t oi = 0;
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      T* dxplane = dx.data() + (std::size_t(b) * C + c) * H * W;
      for (int i = 0; i < Ho * Wo; ++i, ++oi) dxplane[argmax[oi]] += dy[oi];
    }
  }
  return dx;
}

template <typename T>
Tensor<T> dense_forward(const Layer<T>& layer, const Tensor<T>& x) {
  const int B = x.dim(0), Fin = layer.in_features, Fout = layer.out_features;
  Tensor<T> y({B, Fout});
  const T* wp = layer.weight.data();
  for (int b = 0; b < B; ++b) {
    const T* xr = x.data() + std::size_t(b) * Fin;
    T* yr = y.data() + std::size_t(b) * Fout;
    for (int o = 0; o < Fout; ++o) {
      const T* wr = wp + std::size_t(o) * Fin;
      T acc = layer.bias[o];
      for (int i = 0; i < Fin; ++i) acc += wr[i] * xr[i];
      yr[o] = acc;
    }
  }
  return y;
}

template <typename T>
void dense_backward(const Layer<T>& layer, const Tensor<T>& x, const Tensor<T>& dy,
                    Tensor<T>* dw, Tensor<T>* db, Tensor<T>* dx) {
  const int B = x.dim(0), Fin = layer.in_features, Fout = layer.out_features;
  const T* wp = layer.weight.data();
  for (int b = 0; b < B; ++b) {
    const T* xr = x.data() + std::size_t(b) * Fin;
    const T* gr = dy.data() + std::size_t(b) * Fout;
    T* dxr = dx ? dx->data() + std::size_t(b) * Fin : nullptr;
    for (int o = 0; o < Fout; ++o) {
      const T g = gr[o];
      if (db) (*db)[o] += g;
      if (dw) {
        T* dwr = dw->data() + std::size_t(o) * Fin;
        for (int i = 0; i < Fin; ++i) dwr[i] += g * xr[i];
      }
      if (dxr) {
        const T* wr = wp + std::size_t(o) * Fin;
        for (int i = 0; i < Fin; ++i) dxr[i] += g * wr[i];
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& batch, ForwardCache<T>* cache = nullptr) {
  if (batch.ndim() != 4 || batch.dim(1) != m.image_shape[0] || batch.dim(2) != m.image_shape[1] ||
      batch.dim(3) != m.image_shape[2])
    throw ContractError("forward: batch shape does not match model image shape");

  if (cache) {
    cache->acts.clear();
    cache->pool_argmax.assign(m.layers.size(), {});
    cache->acts.reserve(m.layers.size() + 1);
    cache->acts.push_back(batch);
  }
  Tensor<T> a = batch;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const Layer<T>& layer = m.layers[li];
    Tensor<T> next;
    switch (layer.kind) {
      case LayerKind::Conv:
        next = detail::conv2d_forward(layer, a);
        break;
      case LayerKind::ReLU: {
        next = a;
        for (T& v : next.values()) v = v > T{} ? v : T{};
        break;
      }
      case LayerKind::MaxPool:
        next = detail::maxpool_forward(a, cache ? &cache->pool_argmax[li] : nullptr);
        break;
      case LayerKind::Flatten: {
        next = a;
        const int B = a.dim(0);
        const int F = static_cast<int>(a.size()) / B;
        next = Tensor<T>({B, F});
        std::copy(a.values().begin(), a.values().end(), next.values().begin());
        break;
      }
      case LayerKind::Dense:
        next = detail::dense_forward(layer, a);
        break;
    }
    a = std::move(next);
    if (cache) cache->acts.push_back(a);
  }
  if (!a.all_finite()) throw ContractError("forward: non-finite logits");
  return a;
}

// ---------------------------------------------------------------------------
// Loss and gradients

// Mean negative log-softmax probability of the true class. Accumulated in
// double so the value is stable for oracle comparisons.
template <typename T>
double cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const int B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw ContractError("cross_entropy: labels size mismatch");
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || y >= K) throw ContractError("cross_entropy: label out of range");
    const T* z = logits.data() + std::size_t(b) * K;
    double zmax = z[0];
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, double(z[k]));
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(double(z[k]) - zmax);
    total += zmax + std::log(sum) - double(z[y]);
  }
  return total / B;
}

// d(mean CE)/d(logits): (softmax - onehot) / B.
template <typename T>
Tensor<T> cross_entropy_grad_logits(const Tensor<T>& logits, std::span<const int> labels) {
  const int B = logits.dim(0), K = logits.dim(1);
  Tensor<T> dz({B, K});
  for (int b = 0; b < B; ++b) {
    const T* z = logits.data() + std::size_t(b) * K;
    T* g = dz.data() + std::size_t(b) * K;
    double zmax = z[0];
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, double(z[k]));
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(double(z[k]) - zmax);
    for (int k = 0; k < K; ++k)
      g[k] = static_cast<T>(std::exp(double(z[k]) - zmax) / sum / B);
    g[labels[b]] -= static_cast<T>(1.0 / B);
  }
  return dz;
}

template <typename T>
struct LayerGrads {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
using ParamGrads = std::map<int, LayerGrads<T>>;

template <typename T>
struct BackpropResult {
  double loss = 0.0;
  ParamGrads<T> params;
  Tensor<T> input;  // filled when want_input
};

namespace detail {

// Reverse sweep through cached activations starting from d(loss)/d(logits).
template <typename T>
void backward_from_cache(const Model<T>& m, const ForwardCache<T>& cache, Tensor<T> grad,
                         ParamGrads<T>* params, Tensor<T>* input) {
  if (params) {
    for (int id : m.parameterized_layer_ids()) {
      auto it = params->find(id);
      if (it == params->end())
        (*params)[id] = LayerGrads<T>{Tensor<T>(m.layers[id].weight.shape()),
                                      Tensor<T>(m.layers[id].bias.shape())};
    }
  }
  for (int li = static_cast<int>(m.layers.size()) - 1; li >= 0; --li) {
    const Layer<T>& layer = m.layers[li];
    const Tensor<T>& x = cache.acts[li];
    const bool need_dx = li > 0 || input != nullptr;
    Tensor<T> dx;
    switch (layer.kind) {
      case LayerKind::Conv: {
        if (need_dx) dx = Tensor<T>(x.shape());
        LayerGrads<T>* g = params ? &(*params)[li] : nullptr;
        detail::conv2d_backward(layer, x, grad, g ? &g->weight : nullptr,
                                g ? &g->bias : nullptr, need_dx ? &dx : nullptr);
        break;
      }
      case LayerKind::ReLU: {
        dx = grad;
        const T* xs = x.data();
        T* ds = dx.data();
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (!(xs[i] > T{})) ds[i] = T{};
        break;
      }
      case LayerKind::MaxPool:
        dx = detail::maxpool_backward(x, grad, cache.pool_argmax[li]);
        break;
      case LayerKind::Flatten: {
        dx = Tensor<T>(x.shape());
        std::copy(grad.values().begin(), grad.values().end(), dx.values().begin());
        break;
      }
      case LayerKind::Dense: {
        if (need_dx) dx = Tensor<T>(x.shape());
        LayerGrads<T>* g = params ? &(*params)[li] : nullptr;
        detail::dense_backward(layer, x, grad, g ? &g->weight : nullptr,
                               g ? &g->bias : nullptr, need_dx ? &dx : nullptr);
        break;
      }
    }
    if (!need_dx) break;
    grad = std::move(dx);
  }
  if (input) *input = std::move(grad);
}

}  // namespace detail

template <typename T>
BackpropResult<T> backprop(const Model<T>& m, const Tensor<T>& batch, std::span<const int> labels,
                           bool want_params, bool want_input) {
  ForwardCache<T> cache;
  const Tensor<T> logits = forward(m, batch, &cache);
  BackpropResult<T> result;
  result.loss = cross_entropy(logits, labels);
  Tensor<T> grad = cross_entropy_grad_logits(logits, labels);
  detail::backward_from_cache(m, cache, std::move(grad), want_params ? &result.params : nullptr,
                              want_input ? &result.input : nullptr);
  return result;
}

// Mean-reduced gradient of cross-entropy w.r.t. every parameter tensor.
template <typename T>
ParamGrads<T> grad_wrt_params(const Model<T>& m, const Tensor<T>& batch,
                              std::span<const int> labels) {
  return backprop(m, batch, labels, true, false).params;
}

// Gradient of cross-entropy w.r.t. the batch pixels, same shape as the batch.
template <typename T>
Tensor<T> grad_wrt_input(const Model<T>& m, const Tensor<T>& batch,
                         std::span<const int> labels) {
  return backprop(m, batch, labels, false, true).input;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  int batch_size = 64;
  int epochs = 10;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.learning_rate <= 0) throw ConfigError("TrainConfig: learning_rate must be > 0");
  if (cfg.momentum < 0 || cfg.momentum >= 1) throw ConfigError("TrainConfig: momentum in [0,1)");
  if (cfg.batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (cfg.epochs < 0) throw ConfigError("TrainConfig: epochs must be >= 0");
}

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

// A sample reference handed to the trainer. audit_tag carries the dataset
// split ordinal through to the access-audit hook.
template <typename T>
struct TrainItem {
  const Tensor<T>* image = nullptr;
  int label = 0;
  int audit_tag = -1;
};

struct TrainHooks {
  std::function<bool(int layer_id)> trainable;               // default: all layers
  std::function<void(int audit_tag, std::size_t n)> on_consume;
  bool ascend = false;  // negate the loss gradient (gradient-ascent methods)
  // Ascent runs blow the loss up without bound; with this set the loop stops
  // before an update whose batch loss is non-finite or past the cap, keeping
  // the returned model finite and evaluable.
  bool halt_on_divergence = false;
  bool* halted = nullptr;
};

inline constexpr double kDivergenceLossCap = 1e4;

// Seeded epoch permutations: one shuffled pass per epoch, final partial batch
// included. Shared by sgd_train and the dataset batch iterator.
inline std::vector<std::vector<std::size_t>> batch_index_plan(std::size_t n,
                                                              std::size_t batch_size,
                                                              std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> perm = rng.permutation(n);
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t off = 0; off < n; off += batch_size) {
    const std::size_t hi = std::min(n, off + batch_size);
    plan.emplace_back(perm.begin() + off, perm.begin() + hi);
  }
  return plan;
}

template <typename T>
Tensor<T> gather_batch(std::span<const TrainItem<T>> items, std::span<const std::size_t> idx,
                       std::vector<int>* labels) {
  const Tensor<T>& first = *items[idx[0]].image;
  Tensor<T> x({static_cast<int>(idx.size()), first.dim(0), first.dim(1), first.dim(2)});
  const std::size_t stride = first.size();
  if (labels) labels->resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const TrainItem<T>& it = items[idx[i]];
    std::copy(it.image->values().begin(), it.image->values().end(),
              x.values().begin() + i * stride);
    if (labels) (*labels)[i] = it.label;
  }
  return x;
}

namespace detail {

template <typename T>
struct Momentum {
  std::map<int, LayerGrads<T>> v;  // velocity per parameterized layer
};

// v = momentum * v + g ; w -= lr * v, applied only to trainable layers.
template <typename T>
void sgd_step(Model<T>& m, const ParamGrads<T>& grads, const TrainConfig& cfg,
              const TrainHooks& hooks, Momentum<T>& mom) {
  const T lr = static_cast<T>(hooks.ascend ? -cfg.learning_rate : cfg.learning_rate);
  const T mu = static_cast<T>(cfg.momentum);
  for (const auto& [id, g] : grads) {
    if (hooks.trainable && !hooks.trainable(id)) continue;
    auto [it, inserted] = mom.v.try_emplace(id);
    if (inserted) {
      it->second.weight = Tensor<T>(g.weight.shape());
      it->second.bias = Tensor<T>(g.bias.shape());
    }
    Layer<T>& layer = m.layers[id];
    T* vw = it->second.weight.data();
    const T* gw = g.weight.data();
    T* w = layer.weight.data();
    for (std::size_t i = 0; i < layer.weight.size(); ++i) {
      vw[i] = mu * vw[i] + gw[i];
      w[i] -= lr * vw[i];
    }
    T* vb = it->second.bias.data();
    const T* gb = g.bias.data();
    T* b = layer.bias.data();
    for (std::size_t i = 0; i < layer.bias.size(); ++i) {
      vb[i] = mu * vb[i] + gb[i];
      b[i] -= lr * vb[i];
    }
  }
}

}  // namespace detail

// In-place momentum-SGD training. Returns per-epoch mean loss and accuracy
// (computed from the pre-update predictions of each batch).
template <typename T>
std::vector<EpochStats> sgd_train(Model<T>& m, std::span<const TrainItem<T>> data,
                                  const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  validate(cfg);
  if (data.empty()) throw ConfigError("sgd_train: empty dataset");

  detail::Momentum<T> mom;
  std::vector<EpochStats> log;
  log.reserve(static_cast<std::size_t>(cfg.epochs));
  std::vector<int> labels;
  if (hooks.halted) *hooks.halted = false;

  // Rollback state for the divergence guard: the last update is undone when
  // it produced a state whose forward pass overflows.
  std::map<int, LayerGrads<T>> snapshot;
  auto save_params = [&] {
    for (int id : m.parameterized_layer_ids())
      snapshot[id] = LayerGrads<T>{m.layers[id].weight, m.layers[id].bias};
  };
  auto restore_params = [&] {
    for (auto& [id, saved] : snapshot) {
      m.layers[id].weight = saved.weight;
      m.layers[id].bias = saved.bias;
    }
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto plan = batch_index_plan(data.size(), static_cast<std::size_t>(cfg.batch_size),
                                       derive_seed(cfg.seed, "epoch", epoch));
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    bool halted = false;
    for (const auto& idx : plan) {
      const Tensor<T> x = gather_batch(data, idx, &labels);
      ForwardCache<T> cache;
      Tensor<T> logits;
      if (hooks.halt_on_divergence) {
        try {
          logits = forward(m, x, &cache);
        } catch (const ContractError&) {
          restore_params();
          halted = true;
          break;
        }
      } else {
        logits = forward(m, x, &cache);
      }
      const double batch_loss = cross_entropy(logits, labels);
      if (hooks.halt_on_divergence &&
          (!std::isfinite(batch_loss) || batch_loss > kDivergenceLossCap)) {
        halted = true;
        break;
      }
      loss_sum += batch_loss * static_cast<double>(idx.size());
      seen += idx.size();
      const int K = logits.dim(1);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const T* z = logits.data() + i * K;
        int arg = 0;
        for (int k = 1; k < K; ++k)
          if (z[k] > z[arg]) arg = k;
        if (arg == labels[i]) ++correct;
      }
      // Backward reusing the cached forward.
      ParamGrads<T> grads;
      detail::backward_from_cache(m, cache, cross_entropy_grad_logits(logits, labels), &grads,
                                  static_cast<Tensor<T>*>(nullptr));
      if (hooks.halt_on_divergence) save_params();
      detail::sgd_step(m, grads, cfg, hooks, mom);
      if (hooks.on_consume)
        for (std::size_t i : idx) hooks.on_consume(data[i].audit_tag, 1);
    }
    if (seen > 0)
      log.push_back(EpochStats{loss_sum / static_cast<double>(seen),
                               static_cast<double>(correct) / static_cast<double>(seen)});
    if (halted) {
      if (hooks.halted) *hooks.halted = true;
      break;
    }
  }
  return log;
}

// Fraction of argmax-correct predictions; argmax ties go to the lowest class.
template <typename T>
double accuracy(const Model<T>& m, std::span<const TrainItem<T>> data, int eval_batch = 256) {
  if (data.empty()) throw ContractError("accuracy: empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t off = 0; off < data.size(); off += static_cast<std::size_t>(eval_batch)) {
    const std::size_t hi = std::min(data.size(), off + static_cast<std::size_t>(eval_batch));
    idx.resize(hi - off);
    std::iota(idx.begin(), idx.end(), off);
    const Tensor<T> x = gather_batch(data, idx, &labels);
    const Tensor<T> logits = forward(m, x);
    const int K = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* z = logits.data() + i * K;
      int arg = 0;
      for (int k = 1; k < K; ++k)
        if (z[k] > z[arg]) arg = k;
      if (arg == labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Model serialization (little-endian binary, float32 payloads)

inline constexpr char kModelMagic[8] = {'A', 'R', 'U', 'M', 'D', 'L', '1', '\n'};

template <typename T>
void save_model(const Model<T>& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot open for writing: " + path);
  out.write(kModelMagic, sizeof(kModelMagic));
  auto put_i32 = [&](std::int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_u64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
  put_i32(m.num_classes);
  for (int d : m.image_shape) put_i32(d);
  put_u64(m.init_seed);
  put_i32(static_cast<std::int32_t>(m.layers.size()));
  for (const auto& layer : m.layers) {
    put_i32(static_cast<std::int32_t>(layer.kind));
    if (layer.kind == LayerKind::Conv) {
      put_i32(layer.spec.out_filters);
      put_i32(layer.spec.in_channels);
      put_i32(layer.spec.kernel_h);
      put_i32(layer.spec.kernel_w);
    } else if (layer.kind == LayerKind::Dense) {
      put_i32(layer.in_features);
      put_i32(layer.out_features);
    }
    if (layer.has_params()) {
      const float limit = static_cast<float>(layer.init_limit);
      out.write(reinterpret_cast<const char*>(&limit), 4);
      save_tensor(layer.weight, out);
      save_tensor(layer.bias, out);
    }
  }
  if (!out) throw IngestError("write failed: " + path);
}

template <typename T = float>
Model<T> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kModelMagic, sizeof(magic)) != 0)
    throw IngestError("not a model file: " + path);
  auto get_i32 = [&] {
    std::int32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  auto get_u64 = [&] {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  Model<T> m;
  m.num_classes = get_i32();
  for (int& d : m.image_shape) d = get_i32();
  m.init_seed = get_u64();
  const int n_layers = get_i32();
  if (!in || n_layers < 1 || n_layers > 256) throw IngestError("corrupt model header");
  for (int i = 0; i < n_layers; ++i) {
    Layer<T> layer;
    layer.kind = static_cast<LayerKind>(get_i32());
    if (layer.kind == LayerKind::Conv) {
      layer.spec.out_filters = get_i32();
      layer.spec.in_channels = get_i32();
      layer.spec.kernel_h = get_i32();
      layer.spec.kernel_w = get_i32();
      layer.spec.index_in_model = i;
    } else if (layer.kind == LayerKind::Dense) {
      layer.in_features = get_i32();
      layer.out_features = get_i32();
    }
    if (layer.has_params()) {
      float limit = 0.0f;
      in.read(reinterpret_cast<char*>(&limit), 4);
      layer.init_limit = static_cast<T>(limit);
      layer.weight = load_tensor<T>(in);
      layer.bias = load_tensor<T>(in);
    }
    m.layers.push_back(std::move(layer));
  }
  if (!in) throw IngestError("truncated model file: " + path);
  return m;
}

}  // namespace aru
