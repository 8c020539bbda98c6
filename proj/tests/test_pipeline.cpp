#include <gtest/gtest.h>

#include <cmath>

#include "model_util.hpp"
#include "skattn/archive.hpp"
#include "skattn/diffusion.hpp"
#include "skattn/error.hpp"
#include "skattn/grad_check.hpp"
#include "skattn/harness.hpp"
#include "skattn/ops.hpp"
#include "skattn/pipeline.hpp"

using namespace skattn;
using namespace skattn::testing;

namespace {

TEST(NoiseSchedule, LinearBetas) {
  const auto s = NoiseSchedule::linear();
  ASSERT_EQ(s.steps, 1000);
  EXPECT_DOUBLE_EQ(s.betas.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.betas.back(), 0.02);
  for (int t = 0; t < 1000; ++t) {
    EXPECT_GT(s.betas[t], 0.0);
    EXPECT_LT(s.betas[t], 1.0);
    if (t > 0) EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
  }
  EXPECT_DOUBLE_EQ(s.alpha_bar(0), 1.0 - 1e-4);
  EXPECT_THROW(s.alpha_bar(1000), StepOutOfRange);
  EXPECT_THROW(s.alpha_bar(-1), StepOutOfRange);
}

TEST(QSample, Examples) {
  const auto s = NoiseSchedule::linear();
  std::mt19937_64 rng(1);
  const Tensor z0 = random_tensor({2, 3, 3}, rng);
  const Tensor noise = random_tensor({2, 3, 3}, rng);
  const Tensor zt0 = q_sample(z0, 0, noise, s);
  EXPECT_LT(max_abs_diff(zt0.data(), z0.data()), 0.011);
  const Tensor clean = q_sample(z0, 400, Tensor::zeros({2, 3, 3}), s);
  for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_EQ(clean.data()[i], std::sqrt(s.alpha_bar(400)) * z0.data()[i]);
  EXPECT_THROW(q_sample(z0, 1000, noise, s), StepOutOfRange);
  EXPECT_THROW(q_sample(z0, 5, Tensor::zeros({2, 3, 2}), s), ShapeMismatch);
}

TEST(QSample, MonteCarloVariance) {
  const auto s = NoiseSchedule::linear();
  std::mt19937_64 rng(2);
  const Tensor z0 = Tensor::zeros({1});
  for (int t : {10, 300, 999}) {
    double sum = 0.0, sq = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const double v = q_sample(z0, t, gaussian_noise({1}, rng), s).data()[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    const double expect = 1.0 - s.alpha_bar(t);
    // Sample variance of a Gaussian has relative std sqrt(2/n) ~ 1.4%; allow 4 sigma.
    EXPECT_NEAR(var, expect, 4.0 * std::sqrt(2.0 / n) * expect) << "t=" << t;
  }
}

TEST(WeightedLoss, HandExamples) {
  std::mt19937_64 rng(3);
  const Tensor z = random_tensor({4, 4, 4}, rng);
  const Tensor zh = random_tensor({4, 4, 4}, rng);
  Tensor mask = Tensor::zeros({1, 4, 4});
  mask.mutable_data()[5] = 1.0;
  const auto pure = weighted_loss(z, zh, mask, 1000, 1e-8);
  double mse = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) mse += std::pow(z.data()[i] - zh.data()[i], 2);
  mse /= static_cast<double>(z.numel());
  EXPECT_EQ(pure.total.item(), pure.mean_term);
  EXPECT_NEAR(pure.mean_term, mse, 1e-15);

  const auto none = weighted_loss(z, zh, Tensor::zeros({1, 4, 4}), 0, 1e-8);
  EXPECT_EQ(none.masked_term, 0.0);
  EXPECT_EQ(none.total.item(), none.mean_term);

  const auto two = weighted_loss(Tensor::zeros({1, 4, 4}), Tensor::full({1, 4, 4}, 1.0),
                                 Tensor::full({1, 4, 4}, 1.0), 0, 0.0);
  EXPECT_EQ(two.total.item(), 2.0);
}

TEST(WeightedLoss, TimestepZeroWeightIsBeta) {
  std::mt19937_64 rng(4);
  const Tensor z = random_tensor({2, 3, 3}, rng);
  const Tensor zh = random_tensor({2, 3, 3}, rng);
  const Tensor mask = Tensor::create({2, 3, 3}, {1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0});
  const auto l = weighted_loss(z, zh, mask, 0, 1e-8);
  double s = 0.0, m = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    s += mask.data()[i] * std::pow(z.data()[i] - zh.data()[i], 2);
    m += mask.data()[i];
  }
  EXPECT_NEAR(l.masked_term, s / (m + 1e-8), 1e-15);
}

TEST(WeightedLoss, BroadcastMaskMatchesFullMask) {
  std::mt19937_64 rng(5);
  const Tensor z = random_tensor({3, 4, 4}, rng);
  const Tensor zh = random_tensor({3, 4, 4}, rng);
  std::vector<double> m1(16), m3;
  for (int i = 0; i < 16; ++i) m1[i] = (i % 3 == 0) ? 1.0 : 0.0;
  for (int c = 0; c < 3; ++c) m3.insert(m3.end(), m1.begin(), m1.end());
  const auto a = weighted_loss(z, zh, Tensor::create({1, 4, 4}, m1), 250, 1e-8);
  const auto b = weighted_loss(z, zh, Tensor::create({3, 4, 4}, m3), 250, 1e-8);
  EXPECT_NEAR(a.total.item(), b.total.item(), 1e-14);
}

TEST(WeightedLoss, NeverBelowMeanTerm) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> t(0, 1000);
  for (int i = 0; i < 2000; ++i) {
    const Tensor z = random_tensor({1, 3, 3}, rng, false, -3, 3);
    const Tensor zh = random_tensor({1, 3, 3}, rng, false, -3, 3);
    Tensor m = random_tensor({1, 3, 3}, rng, false, 0, 1);
    for (double& v : m.mutable_data()) v = v < 0.5 ? 0.0 : 1.0;
    const auto l = weighted_loss(z, zh, m, t(rng), 1e-8);
    ASSERT_GE(l.total.item(), l.mean_term);
  }
}

TEST(WeightedLoss, Errors) {
  const Tensor z = Tensor::zeros({2, 3, 3});
  EXPECT_THROW(weighted_loss(z, Tensor::zeros({2, 3, 2}), Tensor::zeros({1, 3, 3}), 0, 1e-8), ShapeMismatch);
  EXPECT_THROW(weighted_loss(z, z, Tensor::zeros({1, 2, 3}), 0, 1e-8), ShapeMismatch);
  EXPECT_THROW(weighted_loss(z, z, Tensor::zeros({1, 3, 3}), 1001, 1e-8), StepOutOfRange);
  EXPECT_THROW(weighted_loss(z, z, Tensor::zeros({1, 3, 3}), -1, 1e-8), StepOutOfRange);
}

TEST(WeightedLoss, GradientCheck) {
  std::mt19937_64 rng(7);
  const Tensor z = random_tensor({2, 3, 3}, rng);
  const Tensor zh = random_tensor({2, 3, 3}, rng, true);
  const Tensor m = Tensor::create({1, 3, 3}, {1, 0, 0, 1, 1, 0, 0, 0, 1});
  const auto r = grad_check([&] { return weighted_loss(z, zh, m, 123, 1e-8).total; }, {{"z_hat", zh}});
  EXPECT_LT(r.max_rel_error(), 1e-4);
}

TEST(Ddim, Timesteps) {
  EXPECT_EQ(ddim_timesteps(999, 1), (std::vector<int>{999}));
  EXPECT_EQ(ddim_timesteps(999, 4), (std::vector<int>{999, 749, 500, 250}));
  EXPECT_EQ(ddim_timesteps(3, 8), (std::vector<int>{3, 2, 1, 0}));
  EXPECT_THROW(ddim_timesteps(999, 0), InvalidArgument);
}

TEST(Ddim, FinalUpdateReturnsX0Estimate) {
  const auto s = NoiseSchedule::linear();
  const std::vector<double> x{0.3, -2.0, 1.5};
  const std::vector<double> e{0.1, 0.2, -0.3};
  const auto out = ddim_update(x, e, 700, -1, s, false);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(out[i], (x[i] - std::sqrt(1 - s.alpha_bar(700)) * e[i]) / std::sqrt(s.alpha_bar(700)), 1e-14);
  }
  const auto clipped = ddim_update(x, e, 700, -1, s, true);
  for (double v : clipped) EXPECT_LE(std::abs(v), 1.0);
}

class TinyModel : public ::testing::Test {
 protected:
  TinyModel() : unet_(tiny_unet(8)), adapter_(tiny_adapter()), model_(Model::create(unet_, adapter_, {})) {}

  void SetUp() override {
    std::mt19937_64 rng(8);
    ref_ = reference_pass(random_tensor({4, 8, 8}, rng), model_.base);
    noise_ = gaussian_noise({4, 8, 8}, rng);
  }
  void open() {
    std::mt19937_64 rng(9);
    open_gates(model_.adapters, rng, 0.2);
  }
  std::vector<ControlPyramid> controls(int n, bool constant) {
    std::vector<ControlPyramid> out;
    for (int i = 0; i < n; ++i) out.push_back(encode_condition(model_, random_condition(unet_, adapter_, constant ? 1 : 1 + i)));
    return out;
  }

  UNetConfig unet_;
  AdapterConfig adapter_;
  Model model_;
  ReferenceFeatures ref_;
  Tensor noise_;
};

TEST_F(TinyModel, DdimSampleDeterministic) {
  open();
  const auto c = controls(1, true);
  const Tensor a = ddim_sample(model_, noise_, &c[0], &ref_, 3);
  const Tensor b = ddim_sample(model_, noise_, &c[0], &ref_, 3);
  EXPECT_TRUE(bit_equal(a.data(), b.data()));
}

TEST_F(TinyModel, OneStepIsX0Prediction) {
  open();
  const auto c = controls(1, true);
  const Tensor out = unet_forward(model_.base, &model_.adapters, noise_, 999, &c[0], &ref_);
  const auto eps = noise_estimate(model_, noise_.data(), out.data(), 999);
  const auto expect = ddim_update(noise_.data(), eps, 999, -1, model_.schedule, false);
  const Tensor got = ddim_sample(model_, noise_, &c[0], &ref_, 1, false);
  EXPECT_LT(max_abs_diff(got.data(), expect), 1e-12);
}

TEST_F(TinyModel, FreshAdaptersIgnoreConditions) {
  const auto c = controls(3, false);
  std::mt19937_64 rng(10);
  const auto other_ref = reference_pass(random_tensor({4, 8, 8}, rng), model_.base);
  const Tensor a = ddim_sample(model_, noise_, &c[0], &ref_, 3);
  const Tensor b = ddim_sample(model_, noise_, &c[1], &other_ref, 3);
  const Tensor n = ddim_sample(model_, noise_, nullptr, nullptr, 3);
  EXPECT_TRUE(bit_equal(a.data(), b.data()));
  EXPECT_TRUE(bit_equal(a.data(), n.data()));
}

TEST_F(TinyModel, Stage1SharedNoise) {
  open();
  const auto same = stage1_generate(model_, ref_, controls(3, true), noise_, 2);
  ASSERT_EQ(same.frames.size(), 3u);
  EXPECT_TRUE(bit_equal(same.frames[0].data(), same.frames[2].data()));
  const auto diff = stage1_generate(model_, ref_, controls(3, false), noise_, 2);
  EXPECT_GT(max_abs_diff(diff.frames[0].data(), diff.frames[1].data()), 0.0);
}

TEST(PatchStarts, Examples) {
  EXPECT_EQ(patch_starts(24, 16, 4), (std::vector<int>{0, 12}));
  EXPECT_EQ(patch_starts(16, 16, 4), (std::vector<int>{0}));
  EXPECT_EQ(patch_starts(5, 16, 4), (std::vector<int>{0}));
  EXPECT_EQ(patch_starts(10, 6, 2), (std::vector<int>{0, 4}));
  EXPECT_EQ(patch_starts(12, 6, 2), (std::vector<int>{0, 4, 8}));
}

TEST(Stage2Config, Validation) {
  Stage2Config c;
  EXPECT_NO_THROW(c.validate());
  c.renoise_strength = 0.0;
  EXPECT_THROW(c.validate(), PatchConfigInvalid);
  c = {};
  c.overlap = 0;
  EXPECT_THROW(c.validate(), PatchConfigInvalid);
  c.overlap = c.patch_len;
  EXPECT_THROW(c.validate(), PatchConfigInvalid);
  c = {};
  c.renoise_strength = 1.2;
  EXPECT_THROW(c.validate(), PatchConfigInvalid);
}

TEST_F(TinyModel, Stage2BlendsOverlapsWithLinearWeights) {
  open();
  const auto conds = controls(12, false);
  const auto s1 = stage1_generate(model_, ref_, conds, noise_, 2);
  Stage2Config cfg;
  cfg.patch_len = 6;
  cfg.overlap = 2;
  cfg.steps = 2;
  std::mt19937_64 rng(11);
  const auto r = stage2_generate(model_, s1, ref_, conds, gaussian_noise({4, 8, 8}, rng), cfg);
  ASSERT_EQ(r.patches.size(), 3u);
  ASSERT_EQ(r.clip.frames.size(), 12u);
  std::vector<int> owner(12, -1);
  for (std::size_t p = 0; p < r.patches.size(); ++p) {
    const auto& patch = r.patches[p];
    for (std::size_t i = 0; i < patch.frames.size(); ++i) {
      const int f = patch.start + static_cast<int>(i);
      if (owner[f] < 0) {
        owner[f] = static_cast<int>(p);
        continue;
      }
      const auto& prev = r.patches[owner[f]];
      const double w = static_cast<double>(i + 1) / (cfg.overlap + 1);
      const auto a = patch.frames[i].data();
      const auto b = prev.frames[f - prev.start].data();
      for (std::size_t k = 0; k < a.size(); ++k) {
        ASSERT_EQ(r.clip.frames[f].data()[k], w * a[k] + (1.0 - w) * b[k]) << "frame " << f;
      }
      owner[f] = static_cast<int>(p) + 100;  // already blended
    }
  }
  for (int f : {0, 1, 2, 3, 6, 7, 10, 11}) {
    const int p = owner[f];
    ASSERT_LT(p, 100);
    EXPECT_TRUE(bit_equal(r.clip.frames[f].data(), r.patches[p].frames[f - r.patches[p].start].data()));
  }
}

TEST_F(TinyModel, Stage2ShortClipIsOnePatch) {
  open();
  const auto conds = controls(3, false);
  const auto s1 = stage1_generate(model_, ref_, conds, noise_, 1);
  Stage2Config cfg;
  cfg.steps = 1;
  const auto r = stage2_generate(model_, s1, ref_, conds, noise_, cfg);
  ASSERT_EQ(r.patches.size(), 1u);
  for (int f = 0; f < 3; ++f) EXPECT_TRUE(bit_equal(r.clip.frames[f].data(), r.patches[0].frames[f].data()));
}

TEST_F(TinyModel, Stage2ConstantConditionsDoNotAddFlicker) {
  open();
  const auto conds = controls(6, true);
  const auto s1 = stage1_generate(model_, ref_, conds, noise_, 2);
  Stage2Config cfg;
  cfg.patch_len = 4;
  cfg.overlap = 3;
  cfg.steps = 2;
  const auto r = stage2_generate(model_, s1, ref_, conds, noise_, cfg);
  EXPECT_LE(mean_adjacent_difference(r.clip), mean_adjacent_difference(s1));
}

TEST_F(TinyModel, TrainingLeavesBaseUntouched) {
  SynthConfig sc;
  sc.image_size = 8;
  const auto data = synth_dataset(8, 12, sc);
  std::vector<TrainExample> ex;
  for (const auto& s : data) ex.push_back({s.reference, s.driving, s.condition(), s.mask, nullptr});
  AdamConfig ac;
  ac.lr_max = 1e-3;
  ac.total_steps = 100;
  Adam adam(model_.adapters.appearance_parameters(), ac);
  const auto before = weights_digest(model_.base.named());
  const auto motion_before = weights_digest(model_.adapters.motion_parameters());
  std::mt19937_64 rng(13);
  for (int i = 0; i < 100; ++i) {
    const auto r = train_step(model_, adam, std::span<const TrainExample>(&ex[i % 8], 1), rng, {});
    ASSERT_TRUE(std::isfinite(r.loss_total));
    ASSERT_EQ(r.timesteps.size(), 1u);
    ASSERT_GE(r.timesteps[0], 0);
    ASSERT_LT(r.timesteps[0], 1000);
  }
  EXPECT_EQ(weights_digest(model_.base.named()), before);
  EXPECT_EQ(weights_digest(model_.adapters.motion_parameters()), motion_before);
}

TEST_F(TinyModel, MotionStepUpdatesOnlyMotionBlocks) {
  SynthConfig sc;
  sc.image_size = 8;
  const auto clip = synth_clip(3, 14, sc);
  MotionExample ex;
  for (const auto& s : clip) {
    ex.latents.push_back(s.driving);
    ex.conditions.push_back(s.condition());
  }
  const auto clip_ref = reference_pass(clip.front().reference, model_.base);
  ex.reference_features = &clip_ref;
  AdamConfig ac;
  ac.lr_max = 1e-3;
  Adam adam(model_.adapters.motion_parameters(), ac);
  const auto appearance = weights_digest(model_.adapters.appearance_parameters());
  const auto motion = weights_digest(model_.adapters.motion_parameters());
  std::mt19937_64 rng(15);
  const auto r = motion_train_step(model_, adam, ex, rng, {});
  EXPECT_TRUE(std::isfinite(r.loss_total));
  EXPECT_EQ(weights_digest(model_.adapters.appearance_parameters()), appearance);
  EXPECT_NE(weights_digest(model_.adapters.motion_parameters()), motion);
}

TEST(Training, LossHalvesOnSmallSet) {
  // Default-size model, 500 steps over 32 samples.
  RunConfig cfg;
  cfg.train.steps = 500;
  cfg.train.batch_size = 1;
  cfg.train.samples = 32;
  cfg.train.base_steps = 0;
  cfg.train.motion_steps = 0;
  cfg.finalize();
  Model m = build_model(cfg);
  const auto r = run_training(m, cfg, nullptr, nullptr);
  double initial = 0.0;
  for (int i = 0; i < 20; ++i) initial += r.log[i].loss_total;
  initial /= 20.0;
  EXPECT_LT(smoothed_loss(r.log), 0.5 * initial);
  EXPECT_EQ(r.base_digest_before, r.base_digest_after);
}

}  // namespace
