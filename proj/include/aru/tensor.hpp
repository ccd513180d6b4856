// Dense float tensors, deterministic RNG, and checksum/serialization helpers.
// Everything downstream (models, datasets, attacks) is built on these types.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace aru {

// Error categories used across the library.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IngestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hashing / seed derivation

inline constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline constexpr std::uint64_t fnv1a64(const void* data, std::size_t n,
                                       std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stable sub-stream seeds: derive_seed(seed, "finetune"), etc.
inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  return mix64(base ^ fnv1a64(tag));
}

inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                           std::uint64_t index) {
  return mix64(mix64(base ^ fnv1a64(tag)) + index);
}

// ---------------------------------------------------------------------------
// Deterministic RNG (xoshiro256++, splitmix64-seeded). Hand-rolled so streams
// are identical across standard libraries and platforms.

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t s = seed;
    for (auto& w : state_) {
      s += 0x9e3779b97f4a7c15ull;
      std::uint64_t z = s;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      w = z ^ (z >> 31);
    }
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller with a cached spare.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  // Unbiased integer in [0, n). Lemire-style rejection.
  std::uint64_t index(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::index: n must be positive");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    shuffle(p);
    return p;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Tensor: dense row-major multi-dimensional array.

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, T fill = T{}) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (int d : shape_) {
      if (d <= 0) throw ContractError("Tensor: shape dims must be positive");
      n *= static_cast<std::size_t>(d);
    }
    data_.assign(n, fill);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 4-D accessor for (B, C, H, W) tensors; hot loops use raw pointers instead.
  T& at4(int b, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at4(int b, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  T min_value() const { return *std::min_element(data_.begin(), data_.end()); }
  T max_value() const { return *std::max_element(data_.begin(), data_.end()); }

  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

// Bitwise checksum over shape and payload. For T=float this hashes the exact
// bit patterns, so equal checksums mean bit-identical tensors.
template <typename T>
std::uint64_t checksum(const Tensor<T>& t) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (int d : t.shape()) h = fnv1a64(&d, sizeof(d), h);
  static_assert(std::is_floating_point_v<T>);
  if constexpr (sizeof(T) == 4) {
    for (const T& v : t.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      h = fnv1a64(&bits, sizeof(bits), h);
    }
  } else {
    for (const T& v : t.values()) {
      const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(v));
      h = fnv1a64(&bits, sizeof(bits), h);
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Raw tensor file format (".tns"): magic, ndim, dims, float32 payload.
// Used for exported adversarial noise and other inspectable artifacts.

inline constexpr char kTensorMagic[8] = {'A', 'R', 'U', 'T', 'N', 'S', '1', '\n'};

template <typename T>
void save_tensor(const Tensor<T>& t, std::ostream& out) {
  out.write(kTensorMagic, sizeof(kTensorMagic));
  const std::int32_t nd = t.ndim();
  out.write(reinterpret_cast<const char*>(&nd), sizeof(nd));
  for (int d : t.shape()) {
    const std::int32_t d32 = d;
    out.write(reinterpret_cast<const char*>(&d32), sizeof(d32));
  }
  for (const T& v : t.values()) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
}

template <typename T>
void save_tensor(const Tensor<T>& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot open for writing: " + path);
  save_tensor(t, out);
}

template <typename T = float>
Tensor<T> load_tensor(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0)
    throw IngestError("not a tensor file");
  std::int32_t nd = 0;
  in.read(reinterpret_cast<char*>(&nd), sizeof(nd));
  if (!in || nd < 0 || nd > 8) throw IngestError("corrupt tensor header");
  std::vector<int> shape(static_cast<std::size_t>(nd));
  for (auto& d : shape) {
    std::int32_t d32 = 0;
    in.read(reinterpret_cast<char*>(&d32), sizeof(d32));
    d = d32;
  }
  Tensor<T> t(shape);
  for (T& v : t.values()) {
    float f = 0.0f;
    in.read(reinterpret_cast<char*>(&f), sizeof(f));
    v = static_cast<T>(f);
  }
  if (!in) throw IngestError("truncated tensor file");
  return t;
}

template <typename T = float>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open: " + path);
  return load_tensor<T>(in);
}

}  // namespace aru
