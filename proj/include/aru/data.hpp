// Cohort-structured datasets: the five-way split bundle (train/test/forget/
// retain/unseen), a synthetic generator with per-identity visual signatures,
// and the PNG-directory ingest/export layout.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "aru/nn.hpp"
#include "aru/png_io.hpp"
#include "aru/tensor.hpp"

namespace aru {

enum class Split { Forget, Retain, Test, Unseen };

inline const char* split_tag(Split s) {
  switch (s) {
    case Split::Forget: return "train_forget";
    case Split::Retain: return "train_retain";
    case Split::Test: return "test";
    case Split::Unseen: return "unseen";
  }
  return "?";
}

inline std::optional<Split> parse_split_tag(std::string_view tag) {
  if (tag == "train_forget") return Split::Forget;
  if (tag == "train_retain") return Split::Retain;
  if (tag == "test") return Split::Test;
  if (tag == "unseen") return Split::Unseen;
  return std::nullopt;
}

template <typename T>
struct ImageRecord {
  Tensor<T> image;  // (C,H,W), values in [0,1]
  int label = 0;
  int identity = 0;  // cohort id
  Split split = Split::Retain;
};

// Per-stage record of which split every consumed sample came from. Unlearning
// methods fill this so tests can prove, e.g., that fine-tuning never touched
// the forget set.
struct AccessAudit {
  std::map<std::string, std::array<std::uint64_t, 4>> counts;  // stage -> per-split totals

  void log(const std::string& stage, Split split, std::uint64_t n = 1) {
    counts[stage][static_cast<std::size_t>(split)] += n;
  }
  std::uint64_t count(const std::string& stage, Split split) const {
    auto it = counts.find(stage);
    return it == counts.end() ? 0 : it->second[static_cast<std::size_t>(split)];
  }
  std::uint64_t split_total(Split split) const {
    std::uint64_t total = 0;
    for (const auto& [stage, c] : counts) total += c[static_cast<std::size_t>(split)];
    return total;
  }
};

template <typename T>
std::uint64_t record_hash(const ImageRecord<T>& r) {
  std::uint64_t h = checksum(r.image);
  h = fnv1a64(&r.label, sizeof(r.label), h);
  h = fnv1a64(&r.identity, sizeof(r.identity), h);
  return h;
}

template <typename T>
struct DatasetBundle {
  int num_classes = 0;
  std::vector<ImageRecord<T>> train;  // forget followed by retain
  std::vector<ImageRecord<T>> test;
  std::vector<ImageRecord<T>> forget;
  std::vector<ImageRecord<T>> retain;
  std::vector<ImageRecord<T>> unseen;
};

template <typename T>
std::uint64_t checksum(const DatasetBundle<T>& b) {
  std::uint64_t h = fnv1a64("bundle");
  h = fnv1a64(&b.num_classes, sizeof(b.num_classes), h);
  for (const auto* list : {&b.train, &b.test, &b.forget, &b.retain, &b.unseen}) {
    for (const auto& r : *list) {
      const std::uint64_t rh = record_hash(r);
      h = fnv1a64(&rh, sizeof(rh), h);
    }
  }
  return h;
}

namespace detail {

template <typename T>
std::set<int> identity_set(const std::vector<ImageRecord<T>>& records) {
  std::set<int> ids;
  for (const auto& r : records) ids.insert(r.identity);
  return ids;
}

inline bool disjoint(const std::set<int>& a, const std::set<int>& b) {
  for (int x : a)
    if (b.count(x)) return false;
  return true;
}

}  // namespace detail

// Re-checkable bundle invariants: forget/retain partition the train set,
// identity cohorts of forget/retain/unseen are pairwise disjoint, the test
// set shares no record with train, and every record is well-formed.
template <typename T>
void validate(const DatasetBundle<T>& b) {
  auto check_records = [&](const std::vector<ImageRecord<T>>& list, Split expected,
                           const char* name) {
    for (const auto& r : list) {
      if (r.label < 0 || r.label >= b.num_classes)
        throw IngestError(std::string("bundle: label out of range in ") + name);
      if (r.identity < 0)
        throw IngestError(std::string("bundle: negative identity in ") + name);
      if (r.split != expected)
        throw IngestError(std::string("bundle: split tag mismatch in ") + name);
      if (!r.image.all_finite())
        throw IngestError(std::string("bundle: non-finite pixel in ") + name);
      for (const T& v : r.image.values())
        if (v < T{0} || v > T{1})
          throw IngestError(std::string("bundle: pixel outside [0,1] in ") + name);
    }
  };
  check_records(b.test, Split::Test, "test");
  check_records(b.forget, Split::Forget, "forget");
  check_records(b.retain, Split::Retain, "retain");
  check_records(b.unseen, Split::Unseen, "unseen");
  for (const auto& r : b.train) {
    if (r.split != Split::Forget && r.split != Split::Retain)
      throw IngestError("bundle: train record tagged outside forget/retain");
  }

  const auto f_ids = detail::identity_set(b.forget);
  const auto r_ids = detail::identity_set(b.retain);
  const auto u_ids = detail::identity_set(b.unseen);
  if (!detail::disjoint(f_ids, r_ids))
    throw IngestError("bundle: identity appears in both forget and retain");
  if (!detail::disjoint(f_ids, u_ids))
    throw IngestError("bundle: identity appears in both forget and unseen");
  if (!detail::disjoint(r_ids, u_ids))
    throw IngestError("bundle: identity appears in both retain and unseen");

  // train must equal forget + retain as a multiset.
  std::vector<std::uint64_t> lhs, rhs;
  lhs.reserve(b.train.size());
  for (const auto& r : b.train) lhs.push_back(record_hash(r));
  rhs.reserve(b.forget.size() + b.retain.size());
  for (const auto& r : b.forget) rhs.push_back(record_hash(r));
  for (const auto& r : b.retain) rhs.push_back(record_hash(r));
  std::sort(lhs.begin(), lhs.end());
  std::sort(rhs.begin(), rhs.end());
  if (lhs != rhs) throw IngestError("bundle: train != forget + retain");

  std::set<std::uint64_t> train_hashes(lhs.begin(), lhs.end());
  for (const auto& r : b.test)
    if (train_hashes.count(record_hash(r)))
      throw IngestError("bundle: test record also present in train");
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SyntheticConfig {
  int num_classes = 8;
  int num_identities = 50;        // train cohorts; unseen/test cohorts are extra
  int images_per_identity = 8;
  std::array<int, 3> image_shape = {3, 16, 16};
  double forget_identity_fraction = 0.25;
  double noise_std = 0.06;
  // signal strengths: the class pattern must be learnable from retain data
  // alone, the identity patch strong enough that cohort membership is
  // statistically detectable (otherwise forgetting is unmeasurable)
  double class_amplitude = 0.12;
  double identity_amplitude = 0.35;
  std::uint64_t seed = 1234;
};

inline void validate(const SyntheticConfig& cfg) {
  if (cfg.num_classes < 2) throw ConfigError("SyntheticConfig: num_classes must be >= 2");
  if (cfg.num_identities < 1 || cfg.images_per_identity < 1)
    throw ConfigError("SyntheticConfig: counts must be >= 1");
  if (cfg.image_shape[0] < 1 || cfg.image_shape[1] < 8 || cfg.image_shape[2] < 8)
    throw ConfigError("SyntheticConfig: image dims must be >= 8x8");
  if (cfg.forget_identity_fraction <= 0.0 || cfg.forget_identity_fraction >= 1.0)
    throw ConfigError("SyntheticConfig: forget_identity_fraction must be in (0,1)");
  const int f = static_cast<int>(cfg.forget_identity_fraction * cfg.num_identities);
  if (f < 1)
    throw ConfigError("SyntheticConfig: forget_identity_fraction yields no forget identity");
  if (f >= cfg.num_identities)
    throw ConfigError("SyntheticConfig: forget_identity_fraction leaves no retain identity");
  if (cfg.noise_std < 0) throw ConfigError("SyntheticConfig: noise_std must be >= 0");
  if (cfg.class_amplitude < 0 || cfg.identity_amplitude < 0)
    throw ConfigError("SyntheticConfig: amplitudes must be >= 0");
}

namespace detail {

// Bilinear upsample of a g x g grid to H x W, sampled at pixel centers.
template <typename T>
void add_upsampled_grid(Tensor<T>& image, int channel, const std::vector<double>& grid, int g,
                        double amplitude) {
  const int H = image.dim(1), W = image.dim(2);
  T* plane = image.data() + static_cast<std::size_t>(channel) * H * W;
  for (int y = 0; y < H; ++y) {
    const double gy = std::clamp((y + 0.5) / H * g - 0.5, 0.0, g - 1.0);
    const int y0 = static_cast<int>(gy), y1 = std::min(g - 1, y0 + 1);
    const double fy = gy - y0;
    for (int x = 0; x < W; ++x) {
      const double gx = std::clamp((x + 0.5) / W * g - 0.5, 0.0, g - 1.0);
      const int x0 = static_cast<int>(gx), x1 = std::min(g - 1, x0 + 1);
      const double fx = gx - x0;
      const double v = (1 - fy) * ((1 - fx) * grid[y0 * g + x0] + fx * grid[y0 * g + x1]) +
                       fy * ((1 - fx) * grid[y1 * g + x0] + fx * grid[y1 * g + x1]);
      plane[static_cast<std::size_t>(y) * W + x] += static_cast<T>(amplitude * v);
    }
  }
}

struct IdentitySignature {
  int y0 = 0, x0 = 0, ph = 0, pw = 0;
  std::vector<double> patch;  // C*ph*pw
};

}  // namespace detail

// Each identity carries a fixed random patch at a fixed location (the cohort
// signature the model can memorize); each class carries a smooth global
// pattern (the learnable task signal); each image adds fresh pixel noise.
template <typename T = float>
class SyntheticGenerator {
 public:
  explicit SyntheticGenerator(const SyntheticConfig& cfg) : cfg_(cfg) { validate(cfg); }

  ImageRecord<T> make_record(int identity, int klass, int image_index, Split split) const {
    const auto [C, H, W] = cfg_.image_shape;
    ImageRecord<T> rec;
    rec.image = Tensor<T>({C, H, W}, static_cast<T>(0.5));
    rec.label = klass;
    rec.identity = identity;
    rec.split = split;

    // class pattern
    for (int c = 0; c < C; ++c) {
      Rng rng(derive_seed(cfg_.seed, "class-pattern", std::uint64_t(klass) * 64 + c));
      std::vector<double> grid(kGrid * kGrid);
      for (double& v : grid) v = rng.uniform(-1.0, 1.0);
      detail::add_upsampled_grid(rec.image, c, grid, kGrid, cfg_.class_amplitude);
    }
    // identity signature
    const auto sig = signature(identity);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < sig.ph; ++y)
        for (int x = 0; x < sig.pw; ++x)
          rec.image[(std::size_t(c) * H + sig.y0 + y) * W + sig.x0 + x] +=
              static_cast<T>(sig.patch[(std::size_t(c) * sig.ph + y) * sig.pw + x]);
    // pixel noise
    Rng noise(derive_seed(cfg_.seed, "image-noise",
                          std::uint64_t(identity) * 1000003 + std::uint64_t(image_index)));
    for (T& v : rec.image.values()) {
      v += static_cast<T>(noise.normal(0.0, cfg_.noise_std));
      v = std::clamp(v, T{0}, T{1});
    }
    return rec;
  }

  detail::IdentitySignature signature(int identity) const {
    const auto [C, H, W] = cfg_.image_shape;
    detail::IdentitySignature sig;
    sig.ph = std::max(2, H / 2);
    sig.pw = std::max(2, W / 2);
    Rng rng(derive_seed(cfg_.seed, "identity-signature", std::uint64_t(identity)));
    sig.y0 = static_cast<int>(rng.index(std::uint64_t(H - sig.ph + 1)));
    sig.x0 = static_cast<int>(rng.index(std::uint64_t(W - sig.pw + 1)));
    sig.patch.resize(std::size_t(C) * sig.ph * sig.pw);
    for (double& v : sig.patch)
      v = rng.uniform(-cfg_.identity_amplitude, cfg_.identity_amplitude);
    return sig;
  }

  static constexpr int kGrid = 4;

 private:
  SyntheticConfig cfg_;
};

template <typename T = float>
DatasetBundle<T> generate_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  SyntheticGenerator<T> gen(cfg);
  const int N = cfg.num_identities;
  const int f = static_cast<int>(cfg.forget_identity_fraction * N);
  const int m = cfg.images_per_identity;

  DatasetBundle<T> bundle;
  bundle.num_classes = cfg.num_classes;
  // Train identities 0..N-1 (first f are the forget cohort); unseen and test
  // cohorts get fresh identity ids. Classes are assigned round-robin within
  // each group so forget/unseen/test class distributions match.
  for (int id = 0; id < N; ++id) {
    const Split split = id < f ? Split::Forget : Split::Retain;
    auto& list = id < f ? bundle.forget : bundle.retain;
    for (int j = 0; j < m; ++j) list.push_back(gen.make_record(id, id % cfg.num_classes, j, split));
  }
  for (int j = 0; j < f; ++j) {
    const int id = N + j;
    for (int i = 0; i < m; ++i)
      bundle.unseen.push_back(gen.make_record(id, j % cfg.num_classes, i, Split::Unseen));
  }
  for (int j = 0; j < f; ++j) {
    const int id = N + f + j;
    for (int i = 0; i < m; ++i)
      bundle.test.push_back(gen.make_record(id, j % cfg.num_classes, i, Split::Test));
  }
  bundle.train.reserve(bundle.forget.size() + bundle.retain.size());
  bundle.train.insert(bundle.train.end(), bundle.forget.begin(), bundle.forget.end());
  bundle.train.insert(bundle.train.end(), bundle.retain.begin(), bundle.retain.end());
  validate(bundle);
  return bundle;
}

// ---------------------------------------------------------------------------
// Batch iteration

template <typename T>
struct Batch {
  Tensor<T> x;  // (B,C,H,W)
  std::vector<int> y;
  std::vector<std::size_t> indices;  // positions in the source record list
};

// One seeded shuffled pass over the records; the final partial batch is kept.
template <typename T>
class BatchIterator {
 public:
  BatchIterator(std::span<const ImageRecord<T>> records, std::size_t batch_size,
                std::uint64_t shuffle_seed)
      : records_(records) {
    if (records.empty()) throw ContractError("batch_iterator: empty records");
    if (batch_size < 1) throw ContractError("batch_iterator: batch_size must be >= 1");
    plan_ = batch_index_plan(records.size(), batch_size, shuffle_seed);
  }

  std::optional<Batch<T>> next() {
    if (cursor_ >= plan_.size()) return std::nullopt;
    const auto& idx = plan_[cursor_++];
    Batch<T> batch;
    batch.indices = idx;
    batch.y.resize(idx.size());
    const auto& first = records_[idx[0]].image;
    batch.x = Tensor<T>({static_cast<int>(idx.size()), first.dim(0), first.dim(1), first.dim(2)});
    const std::size_t stride = first.size();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& rec = records_[idx[i]];
      std::copy(rec.image.values().begin(), rec.image.values().end(),
                batch.x.values().begin() + i * stride);
      batch.y[i] = rec.label;
    }
    return batch;
  }

  std::size_t num_batches() const { return plan_.size(); }

 private:
  std::span<const ImageRecord<T>> records_;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t cursor_ = 0;
};

// View adapter feeding records to the nn training loop.
template <typename T>
std::vector<TrainItem<T>> train_items(std::span<const ImageRecord<T>> records) {
  std::vector<TrainItem<T>> items;
  items.reserve(records.size());
  for (const auto& r : records)
    items.push_back(TrainItem<T>{&r.image, r.label, static_cast<int>(r.split)});
  return items;
}

// ---------------------------------------------------------------------------
// Directory layout: root/images/*.png + root/labels.csv with columns
// filename,label,identity,split. Violated bundle invariants are rejected.

template <typename T = float>
DatasetBundle<T> load_directory_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path labels_path = fs::path(root) / "labels.csv";
  std::ifstream in(labels_path);
  if (!in) throw IngestError("missing labels file: " + labels_path.string());

  DatasetBundle<T> bundle;
  std::string line;
  if (!std::getline(in, line)) throw IngestError("empty labels file: " + labels_path.string());
  auto strip = [](std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && s[i] == ' ') ++i;
    return s.substr(i);
  };
  if (strip(line) != "filename,label,identity,split")
    throw IngestError("labels header must be 'filename,label,identity,split'");

  std::map<int, Split> identity_split;  // forget/retain/unseen cohort bookkeeping
  int max_label = -1;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = strip(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(strip(field));
    const std::string at_row = " at row " + std::to_string(row);
    if (fields.size() != 4) throw IngestError("expected 4 columns" + at_row);

    ImageRecord<T> rec;
    try {
      rec.label = std::stoi(fields[1]);
      rec.identity = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw IngestError("non-numeric label/identity" + at_row);
    }
    if (rec.label < 0) throw IngestError("negative label" + at_row);
    if (rec.identity < 0) throw IngestError("negative identity" + at_row);
    const auto split = parse_split_tag(fields[3]);
    if (!split) throw IngestError("unknown split tag '" + fields[3] + "'" + at_row);
    rec.split = *split;

    const fs::path img_path = fs::path(root) / "images" / fields[0];
    if (!fs::exists(img_path))
      throw IngestError("missing image file '" + fields[0] + "'" + at_row);
    rec.image = read_png<T>(img_path.string());
    max_label = std::max(max_label, rec.label);

    if (rec.split != Split::Test) {
      auto [it, inserted] = identity_split.try_emplace(rec.identity, rec.split);
      if (!inserted && it->second != rec.split)
        throw IngestError("identity " + std::to_string(rec.identity) + " appears in both " +
                          split_tag(it->second) + " and " + split_tag(rec.split) + at_row);
    }
    switch (rec.split) {
      case Split::Forget: bundle.forget.push_back(std::move(rec)); break;
      case Split::Retain: bundle.retain.push_back(std::move(rec)); break;
      case Split::Test: bundle.test.push_back(std::move(rec)); break;
      case Split::Unseen: bundle.unseen.push_back(std::move(rec)); break;
    }
  }
  if (bundle.forget.empty() && bundle.retain.empty())
    throw IngestError("no train rows in " + labels_path.string());

  bundle.num_classes = max_label + 1;
  if (bundle.num_classes < 2) bundle.num_classes = 2;
  bundle.train.reserve(bundle.forget.size() + bundle.retain.size());
  bundle.train.insert(bundle.train.end(), bundle.forget.begin(), bundle.forget.end());
  bundle.train.insert(bundle.train.end(), bundle.retain.begin(), bundle.retain.end());
  validate(bundle);
  return bundle;
}

template <typename T>
void export_bundle(const DatasetBundle<T>& bundle, const std::string& root) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "images");
  std::ofstream csv(fs::path(root) / "labels.csv");
  if (!csv) throw IngestError("cannot write labels.csv under " + root);
  csv << "filename,label,identity,split\n";
  std::size_t counter = 0;
  auto dump = [&](const std::vector<ImageRecord<T>>& list) {
    for (const auto& rec : list) {
      char name[32];
      std::snprintf(name, sizeof(name), "img_%06zu.png", counter++);
      write_png((fs::path(root) / "images" / name).string(), rec.image);
      csv << name << ',' << rec.label << ',' << rec.identity << ',' << split_tag(rec.split)
          << '\n';
    }
  };
  dump(bundle.forget);
  dump(bundle.retain);
  dump(bundle.test);
  dump(bundle.unseen);
}

}  // namespace aru
