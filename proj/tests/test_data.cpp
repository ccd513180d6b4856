#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "aru/data.hpp"
#include "aru/nn.hpp"

using namespace aru;
namespace fs = std::filesystem;

namespace {

SyntheticConfig small_cfg() {
  SyntheticConfig cfg;
  cfg.num_classes = 8;
  cfg.num_identities = 60;
  cfg.images_per_identity = 10;
  cfg.image_shape = {3, 16, 16};
  cfg.forget_identity_fraction = 0.2;
  cfg.seed = 100;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Synthetic, ArithmeticFromConfig) {
  const auto bundle = generate_synthetic<float>(small_cfg());
  EXPECT_EQ(bundle.forget.size(), 120u);  // 12 identities x 10 images
  EXPECT_EQ(bundle.retain.size(), 480u);
  EXPECT_EQ(bundle.train.size(), 600u);
  EXPECT_EQ(bundle.unseen.size(), 120u);
  EXPECT_EQ(bundle.test.size(), 120u);
  EXPECT_NO_THROW(validate(bundle));

  std::set<int> f, r, u;
  for (const auto& rec : bundle.forget) f.insert(rec.identity);
  for (const auto& rec : bundle.retain) r.insert(rec.identity);
  for (const auto& rec : bundle.unseen) u.insert(rec.identity);
  for (int id : f) {
    EXPECT_FALSE(r.count(id));
    EXPECT_FALSE(u.count(id));
  }
  for (int id : r) EXPECT_FALSE(u.count(id));
}

TEST(Synthetic, SeedDeterminism) {
  const auto a = generate_synthetic<float>(small_cfg());
  const auto b = generate_synthetic<float>(small_cfg());
  EXPECT_EQ(checksum(a), checksum(b));
  auto cfg = small_cfg();
  cfg.seed = 101;
  const auto c = generate_synthetic<float>(cfg);
  EXPECT_NE(checksum(a), checksum(c));
}

TEST(Synthetic, IdentitySignatureFixedAcrossImages) {
  const auto cfg = small_cfg();
  SyntheticGenerator<float> gen(cfg);
  const auto s1 = gen.signature(17);
  const auto s2 = gen.signature(17);
  EXPECT_EQ(s1.y0, s2.y0);
  EXPECT_EQ(s1.x0, s2.x0);
  EXPECT_EQ(s1.patch, s2.patch);
  const auto other = gen.signature(18);
  EXPECT_NE(s1.patch, other.patch);
}

TEST(Synthetic, ForgetAndUnseenShareClassDistribution) {
  const auto bundle = generate_synthetic<float>(small_cfg());
  std::map<int, int> fc, uc;
  for (const auto& rec : bundle.forget) fc[rec.label]++;
  for (const auto& rec : bundle.unseen) uc[rec.label]++;
  EXPECT_EQ(fc, uc);
}

TEST(Synthetic, InfeasibleFractionsRejected) {
  auto cfg = small_cfg();
  cfg.num_identities = 10;
  cfg.forget_identity_fraction = 0.05;  // floor(0.5) = 0 forget identities
  EXPECT_THROW(generate_synthetic<float>(cfg), ConfigError);
  cfg.num_identities = 1;
  cfg.forget_identity_fraction = 0.999;
  EXPECT_THROW(generate_synthetic<float>(cfg), ConfigError);
}

TEST(Synthetic, RetainTrainedModelGeneralizes) {
  // pinned desk-scale run: a classifier trained on retain alone must clear
  // 0.7 test accuracy, i.e. the class signal is learnable without forget data
  SyntheticConfig cfg;
  cfg.num_classes = 4;
  cfg.num_identities = 24;
  cfg.images_per_identity = 8;
  cfg.forget_identity_fraction = 0.25;
  cfg.noise_std = 0.08;       // moderate-noise configuration
  cfg.class_amplitude = 0.2;
  cfg.seed = 2024;
  const auto bundle = generate_synthetic<float>(cfg);
  auto model = build_model<float>(cfg.num_classes, cfg.image_shape, 77);
  const auto items = train_items<float>(bundle.retain);
  TrainConfig tc{0.01, 0.9, 64, 10, 78};
  sgd_train(model, std::span<const TrainItem<float>>(items), tc);
  const auto test_items = train_items<float>(bundle.test);
  EXPECT_GE(accuracy(model, std::span<const TrainItem<float>>(test_items)), 0.7);
}

TEST(Validate, CatchesCrossSplitIdentity) {
  auto bundle = generate_synthetic<float>(small_cfg());
  bundle.unseen.front().identity = bundle.forget.front().identity;
  EXPECT_THROW(validate(bundle), IngestError);
}

TEST(Validate, CatchesTrainPartitionMismatch) {
  auto bundle = generate_synthetic<float>(small_cfg());
  bundle.train.pop_back();
  EXPECT_THROW(validate(bundle), IngestError);
}

TEST(Validate, CatchesOutOfRangePixels) {
  auto bundle = generate_synthetic<float>(small_cfg());
  bundle.retain.front().image[0] = 1.5f;
  // keep train in sync so the partition check is not the failure we hit
  bundle.train[bundle.forget.size()].image[0] = 1.5f;
  EXPECT_THROW(validate(bundle), IngestError);
}

TEST(Validate, CatchesBadLabel) {
  auto bundle = generate_synthetic<float>(small_cfg());
  bundle.test.front().label = bundle.num_classes;
  EXPECT_THROW(validate(bundle), IngestError);
}

TEST(BatchIteratorTest, SplitsIntoFullAndPartialBatches) {
  SyntheticConfig cfg = small_cfg();
  cfg.num_identities = 10;
  cfg.images_per_identity = 1;
  cfg.forget_identity_fraction = 0.2;
  const auto bundle = generate_synthetic<float>(cfg);
  ASSERT_EQ(bundle.train.size(), 10u);

  BatchIterator<float> it(std::span<const ImageRecord<float>>(bundle.train), 4, 55);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> seen;
  while (auto batch = it.next()) {
    sizes.push_back(batch->y.size());
    EXPECT_EQ(batch->x.dim(0), static_cast<int>(batch->y.size()));
    for (std::size_t i : batch->indices) seen.push_back(i);
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> expect(10);
  std::iota(expect.begin(), expect.end(), 0u);
  EXPECT_EQ(seen, expect);  // union of emitted records equals the input multiset
}

TEST(BatchIteratorTest, SeededOrderIsStable) {
  const auto bundle = generate_synthetic<float>(small_cfg());
  BatchIterator<float> a(std::span<const ImageRecord<float>>(bundle.train), 32, 9);
  BatchIterator<float> b(std::span<const ImageRecord<float>>(bundle.train), 32, 9);
  while (true) {
    auto ba = a.next();
    auto bb = b.next();
    ASSERT_EQ(ba.has_value(), bb.has_value());
    if (!ba) break;
    EXPECT_EQ(ba->indices, bb->indices);
  }
  BatchIterator<float> c(std::span<const ImageRecord<float>>(bundle.train), 32, 10);
  auto first_a =
      BatchIterator<float>(std::span<const ImageRecord<float>>(bundle.train), 32, 9).next();
  auto first_c = c.next();
  EXPECT_NE(first_a->indices, first_c->indices);
}

TEST(BatchIteratorTest, RejectsEmptyAndZeroBatch) {
  const auto bundle = generate_synthetic<float>(small_cfg());
  EXPECT_THROW(BatchIterator<float>(std::span<const ImageRecord<float>>{}, 4, 0), ContractError);
  EXPECT_THROW(BatchIterator<float>(std::span<const ImageRecord<float>>(bundle.train), 0, 0),
               ContractError);
}

// ---------------------------------------------------------------------------
// Directory layout

TEST(DirectoryDataset, ExportLoadRoundTrip) {
  TempDir dir("aru_test_roundtrip");
  SyntheticConfig cfg = small_cfg();
  cfg.num_identities = 10;
  cfg.images_per_identity = 2;
  const auto bundle = generate_synthetic<float>(cfg);
  export_bundle(bundle, dir.path.string());

  const auto loaded = load_directory_dataset<float>(dir.path.string());
  EXPECT_EQ(loaded.num_classes, bundle.num_classes);
  ASSERT_EQ(loaded.forget.size(), bundle.forget.size());
  ASSERT_EQ(loaded.retain.size(), bundle.retain.size());
  ASSERT_EQ(loaded.test.size(), bundle.test.size());
  ASSERT_EQ(loaded.unseen.size(), bundle.unseen.size());
  // 8-bit PNG quantization: half a level max error
  for (std::size_t i = 0; i < bundle.forget.size(); ++i) {
    EXPECT_EQ(loaded.forget[i].label, bundle.forget[i].label);
    EXPECT_EQ(loaded.forget[i].identity, bundle.forget[i].identity);
    const auto& a = bundle.forget[i].image;
    const auto& b = loaded.forget[i].image;
    ASSERT_TRUE(a.same_shape(b));
    for (std::size_t k = 0; k < a.size(); ++k) ASSERT_NEAR(a[k], b[k], 0.5 / 255.0 + 1e-6);
  }
}

TEST(DirectoryDataset, WellFormedTwelveRowCsv) {
  TempDir dir("aru_test_12row");
  fs::create_directories(dir.path / "images");
  Tensor<float> img({1, 8, 8}, 0.5f);
  std::ofstream csv(dir.path / "labels.csv");
  csv << "filename,label,identity,split\n";
  int row = 0;
  auto add = [&](int label, int identity, const char* split) {
    const std::string name = "img" + std::to_string(row++) + ".png";
    img[0] = static_cast<float>(row) / 16.0f;  // make records distinct
    write_png((dir.path / "images" / name).string(), img);
    csv << name << ',' << label << ',' << identity << ',' << split << '\n';
  };
  for (int i = 0; i < 3; ++i) add(i % 2, 100 + i, "train_forget");
  for (int i = 0; i < 5; ++i) add(i % 2, 200 + i, "train_retain");
  for (int i = 0; i < 2; ++i) add(i % 2, 300 + i, "test");
  for (int i = 0; i < 2; ++i) add(i % 2, 400 + i, "unseen");
  csv.close();

  const auto bundle = load_directory_dataset<float>(dir.path.string());
  EXPECT_EQ(bundle.forget.size(), 3u);
  EXPECT_EQ(bundle.retain.size(), 5u);
  EXPECT_EQ(bundle.train.size(), 8u);
  EXPECT_EQ(bundle.test.size(), 2u);
  EXPECT_EQ(bundle.unseen.size(), 2u);
  EXPECT_EQ(bundle.num_classes, 2);
}

TEST(DirectoryDataset, RejectsCrossSplitIdentityNamingRow) {
  TempDir dir("aru_test_badident");
  fs::create_directories(dir.path / "images");
  Tensor<float> img({1, 8, 8}, 0.25f);
  write_png((dir.path / "images" / "a.png").string(), img);
  img[0] = 0.75f;
  write_png((dir.path / "images" / "b.png").string(), img);
  {
    std::ofstream csv(dir.path / "labels.csv");
    csv << "filename,label,identity,split\n";
    csv << "a.png,0,7,train_forget\n";
    csv << "b.png,1,7,unseen\n";
  }
  try {
    load_directory_dataset<float>(dir.path.string());
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("identity 7"), std::string::npos) << msg;
  }
}

TEST(DirectoryDataset, RejectsUnknownSplitAndMissingFile) {
  TempDir dir("aru_test_badsplit");
  fs::create_directories(dir.path / "images");
  Tensor<float> img({1, 8, 8}, 0.25f);
  write_png((dir.path / "images" / "a.png").string(), img);
  {
    std::ofstream csv(dir.path / "labels.csv");
    csv << "filename,label,identity,split\n";
    csv << "a.png,0,1,validation\n";
  }
  EXPECT_THROW(load_directory_dataset<float>(dir.path.string()), IngestError);
  {
    std::ofstream csv(dir.path / "labels.csv");
    csv << "filename,label,identity,split\n";
    csv << "missing.png,0,1,test\n";
  }
  EXPECT_THROW(load_directory_dataset<float>(dir.path.string()), IngestError);
  EXPECT_THROW(load_directory_dataset<float>((dir.path / "nope").string()), IngestError);
}

TEST(DirectoryDataset, BenchmarkScaleCounts) {
  // Benchmark-scale manifest: 10,025 train rows (1,500 forget + 8,525 retain),
  // 1,539 test, 1,504 unseen.
  TempDir dir("aru_test_bench_counts");
  fs::create_directories(dir.path / "images");

  Tensor<float> img({1, 8, 8}, 0.5f);
  write_png((dir.path / "images" / "shared.png").string(), img);
  const auto shared = dir.path / "images" / "shared.png";

  std::ofstream csv(dir.path / "labels.csv");
  csv << "filename,label,identity,split\n";
  int row = 0;
  auto add_rows = [&](int count, int ident_base, int per_ident, const char* split) {
    for (int i = 0; i < count; ++i) {
      const std::string name = "r" + std::to_string(row++) + ".png";
      fs::create_hard_link(shared, dir.path / "images" / name);
      csv << name << ',' << i % 8 << ',' << ident_base + i / per_ident << ',' << split << '\n';
    }
  };
  add_rows(1500, 0, 10, "train_forget");
  add_rows(8525, 1000, 10, "train_retain");
  add_rows(1539, 20000, 10, "test");
  add_rows(1504, 30000, 10, "unseen");
  csv.close();

  const auto bundle = load_directory_dataset<float>(dir.path.string());
  EXPECT_EQ(bundle.train.size(), 10025u);
  EXPECT_EQ(bundle.forget.size(), 1500u);
  EXPECT_EQ(bundle.retain.size(), 8525u);
  EXPECT_EQ(bundle.test.size(), 1539u);
  EXPECT_EQ(bundle.unseen.size(), 1504u);
}
