#include <gtest/gtest.h>

#include "aru/attack.hpp"
#include "aru/data.hpp"
#include "aru/nn.hpp"

using namespace aru;

namespace {

// Hand-built linear probe: flatten a (1,2,2) image, logits = W x with
// W row 0 = e_0, row 1 = 0. For label 1 the loss is log(1 + e^{x0}), so the
// input gradient is sigmoid(x0) > 0 at pixel 0 and exactly 0 elsewhere.
Model<float> linear_probe() {
  Model<float> m;
  m.num_classes = 2;
  m.image_shape = {1, 2, 2};
  Layer<float> flatten;
  flatten.kind = LayerKind::Flatten;
  m.layers.push_back(flatten);
  Layer<float> dense;
  dense.kind = LayerKind::Dense;
  dense.in_features = 4;
  dense.out_features = 2;
  dense.weight = Tensor<float>({2, 4});
  dense.bias = Tensor<float>({2});
  dense.weight[0] = 1.0f;  // logit0 = x0
  dense.init_limit = 1.0f;
  m.layers.push_back(dense);
  return m;
}

DatasetBundle<float> attack_bundle(int forget_images) {
  SyntheticConfig cfg;
  cfg.num_classes = 4;
  cfg.num_identities = 2 * forget_images;  // 1 image per identity, half forget
  cfg.images_per_identity = 1;
  cfg.forget_identity_fraction = 0.5;
  cfg.seed = 300;
  return generate_synthetic<float>(cfg);
}

}  // namespace

TEST(AdvConfigTest, DefaultsAndValidation) {
  AdvConfig cfg;
  EXPECT_EQ(cfg.steps, 7);
  EXPECT_DOUBLE_EQ(cfg.epsilon, 8.0 / 255.0);
  EXPECT_DOUBLE_EQ(cfg.alpha, 2.0 / 255.0);
  EXPECT_NO_THROW(validate(cfg));
  cfg.steps = 0;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = AdvConfig{};
  cfg.alpha = cfg.epsilon * 2;
  EXPECT_THROW(validate(cfg), ConfigError);
}

TEST(PgdAttack, OneStepAnalytic) {
  const auto m = linear_probe();
  Tensor<float> x({1, 1, 2, 2}, 0.5f);
  std::vector<int> y = {1};
  AdvConfig cfg;
  cfg.steps = 1;
  const auto delta = pgd_attack(m, x, y, cfg);
  EXPECT_NEAR(delta[0], 2.0f / 255.0f, 1e-7);  // ascending pixel
  EXPECT_EQ(delta[1], 0.0f);                   // sign(0) = 0 elsewhere
  EXPECT_EQ(delta[2], 0.0f);
  EXPECT_EQ(delta[3], 0.0f);
}

TEST(PgdAttack, MultiStepSaturatesAtEpsilon) {
  const auto m = linear_probe();
  Tensor<float> x({1, 1, 2, 2}, 0.5f);
  std::vector<int> y = {1};
  AdvConfig cfg;  // 7 steps x 2/255 > 8/255
  const auto delta = pgd_attack(m, x, y, cfg);
  EXPECT_NEAR(delta[0], 8.0f / 255.0f, 1e-7);
  EXPECT_EQ(delta[1], 0.0f);
}

TEST(PgdAttack, RespectsPixelUpperBound) {
  const auto m = linear_probe();
  Tensor<float> x({1, 1, 2, 2}, 0.99f);  // head-room below 1 is only 0.01
  std::vector<int> y = {1};
  AdvConfig cfg;
  const auto delta = pgd_attack(m, x, y, cfg);
  EXPECT_NEAR(delta[0], 0.01f, 1e-6);
  EXPECT_LE(x[0] + delta[0], 1.0f + 1e-7);
}

TEST(PgdAttack, ZeroGradientModelYieldsZeroNoise) {
  auto m = linear_probe();
  m.layers[1].weight.fill(0.0f);  // uniform logits everywhere
  Tensor<float> x({2, 1, 2, 2}, 0.3f);
  std::vector<int> y = {0, 1};
  const auto delta = pgd_attack(m, x, y, AdvConfig{});
  for (float v : delta.values()) EXPECT_EQ(v, 0.0f);
}

TEST(PgdAttack, LossNonDecreaseOnSyntheticBatch) {
  const auto bundle = attack_bundle(50);  // 50 forget records
  auto model = build_model<float>(bundle.num_classes, {3, 16, 16}, 301);
  // brief training so gradients carry signal
  const auto items = train_items<float>(bundle.train);
  TrainConfig tc{0.01, 0.9, 32, 2, 302};
  sgd_train(model, std::span<const TrainItem<float>>(items), tc);

  AdvConfig cfg;
  const auto& records = bundle.forget;
  ASSERT_EQ(records.size(), 50u);
  int increased = 0;
  double max_abs = 0.0, mean_delta_loss = 0.0;
  for (const auto& rec : records) {
    Tensor<float> x({1, 3, 16, 16});
    std::copy(rec.image.values().begin(), rec.image.values().end(), x.values().begin());
    std::vector<int> y = {rec.label};
    const auto delta = pgd_attack(model, x, y, cfg);
    const double before = cross_entropy(forward(model, x), y);
    Tensor<float> xa = x;
    for (std::size_t i = 0; i < xa.size(); ++i) {
      xa[i] += delta[i];
      max_abs = std::max(max_abs, std::abs(double(delta[i])));
      ASSERT_GE(xa[i], -1e-7f);
      ASSERT_LE(xa[i], 1.0f + 1e-7f);
    }
    const double after = cross_entropy(forward(model, xa), y);
    mean_delta_loss += (after - before) / static_cast<double>(records.size());
    if (after >= before) ++increased;
  }
  EXPECT_LE(max_abs, 8.0 / 255.0 + 1e-7);
  EXPECT_GE(increased, 45);        // >= 90% of 50
  EXPECT_GT(mean_delta_loss, 0.0);  // ascent holds on average over the set
}

TEST(AttackForgetSet, OnePairPerRecordInOrder) {
  const auto bundle = attack_bundle(6);
  auto model = build_model<float>(bundle.num_classes, {3, 16, 16}, 303);
  const auto pairs = attack_forget_set(model, bundle, AdvConfig{}, 4);
  ASSERT_EQ(pairs.size(), bundle.forget.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pairs[i].record_index, i);
    EXPECT_TRUE(pairs[i].noise.same_shape(bundle.forget[i].image));
  }
}

TEST(AttackForgetSet, BatchedMatchesOneAtATime) {
  const auto bundle = attack_bundle(5);
  auto model = build_model<float>(bundle.num_classes, {3, 16, 16}, 304);
  const auto batched = attack_forget_set(model, bundle, AdvConfig{}, 64);
  const auto single = attack_forget_set(model, bundle, AdvConfig{}, 1);
  ASSERT_EQ(batched.size(), single.size());
  for (std::size_t i = 0; i < batched.size(); ++i)
    for (std::size_t k = 0; k < batched[i].noise.size(); ++k)
      ASSERT_NEAR(batched[i].noise[k], single[i].noise[k], 1e-6);
}

TEST(AttackForgetSet, EpsilonBoundHoldsForAllPairs) {
  const auto bundle = attack_bundle(10);
  auto model = build_model<float>(bundle.num_classes, {3, 16, 16}, 305);
  AdvConfig cfg;
  const auto pairs = attack_forget_set(model, bundle, cfg, 8);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& rec = bundle.forget[i];
    for (std::size_t k = 0; k < pairs[i].noise.size(); ++k) {
      ASSERT_LE(std::abs(pairs[i].noise[k]), cfg.epsilon + 1e-7);
      const float moved = rec.image[k] + pairs[i].noise[k];
      ASSERT_GE(moved, -1e-7f);
      ASSERT_LE(moved, 1.0f + 1e-7f);
    }
  }
}

TEST(AttackForgetSet, EmptyForgetRejected) {
  auto bundle = attack_bundle(4);
  auto model = build_model<float>(bundle.num_classes, {3, 16, 16}, 306);
  bundle.train = bundle.retain;
  bundle.forget.clear();
  EXPECT_THROW(attack_forget_set(model, bundle, AdvConfig{}), ConfigError);
}

TEST(AttackForgetSet, DeterministicAndAudited) {
  const auto bundle = attack_bundle(6);
  auto model = build_model<float>(bundle.num_classes, {3, 16, 16}, 307);
  AccessAudit audit;
  const auto a = attack_forget_set(model, bundle, AdvConfig{}, 4, &audit);
  const auto b = attack_forget_set(model, bundle, AdvConfig{}, 4);
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_EQ(checksum(a[i].noise), checksum(b[i].noise));
  EXPECT_EQ(audit.count("attack", Split::Forget), bundle.forget.size());
  EXPECT_EQ(audit.split_total(Split::Retain), 0u);
}

TEST(NoiseCacheTest, SecondLookupReturnsCachedNoise) {
  const auto bundle = attack_bundle(5);
  auto model = build_model<float>(bundle.num_classes, {3, 16, 16}, 308);
  NoiseCache<float> cache;
  AccessAudit audit;
  const auto& first = cache.get_or_compute(model, bundle, AdvConfig{}, 4, &audit);
  const auto* first_ptr = first.data();
  const auto& second = cache.get_or_compute(model, bundle, AdvConfig{}, 4, &audit);
  EXPECT_EQ(second.data(), first_ptr);  // same stored entry
  EXPECT_EQ(audit.count("attack", Split::Forget), 2 * bundle.forget.size());

  // a different model misses the cache
  auto other = build_model<float>(bundle.num_classes, {3, 16, 16}, 309);
  const auto& third = cache.get_or_compute(other, bundle, AdvConfig{}, 4, &audit);
  EXPECT_NE(third.data(), first_ptr);
}

TEST(NoiseVisualization, MapsIntoUnitRange) {
  Tensor<float> delta({1, 2, 2});
  const double eps = 8.0 / 255.0;
  delta[0] = static_cast<float>(eps);
  delta[1] = static_cast<float>(-eps);
  delta[2] = 0.0f;
  delta[3] = static_cast<float>(eps / 2);
  const auto vis = noise_visualization(delta, eps);
  EXPECT_NEAR(vis[0], 1.0f, 1e-6);
  EXPECT_NEAR(vis[1], 0.0f, 1e-6);
  EXPECT_NEAR(vis[2], 0.5f, 1e-6);
  EXPECT_NEAR(vis[3], 0.75f, 1e-6);
}
