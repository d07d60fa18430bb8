#include <gtest/gtest.h>

#include <filesystem>

#include "support/oracles.hpp"

using namespace atx;

namespace {

struct Tiny {
  Denoiser model;
  FeatureNet fext;
  NoiseSchedule sched = default_schedule(8);
  Tensor x_s0, x_a0;
  Mask mask;

  Tiny() {
    DenoiserArch da;
    da.image_size = 16;
    da.w0 = 4;
    da.w1 = 4;
    da.w2 = 8;
    da.time_dim = 8;
    da.timesteps = 8;
    model = Denoiser::init(da, 1);
    FeatureArch fa;
    fa.image_size = 16;
    fa.dim = 16;
    fa.mlp = 32;
    fext = FeatureNet::init(fa, 2);
    const SynthSample s = gen_structure(10, 0, 16);
    x_s0 = s.image;
    x_a0 = gen_appearance(20, 4, 16).image;
    mask = mask_from_binary(s.gt_mask);
  }

  GuidanceConfig config(std::uint64_t seed) const {
    GuidanceConfig c;
    c.T = 8;
    c.n_resample = 2;
    c.seed = seed;
    c.mask_skip_prob = 0.0;
    return c;
  }
};

const Tiny& tiny() {
  static const Tiny t;
  return t;
}

}  // namespace

TEST(Encode, ZeroNoiseScalesImage) {
  const auto s = default_schedule(8);
  Rng rng(1);
  const Tensor x = oracle::uniform_tensor(rng, {3, 4, 4});
  const Tensor r = encode_appearance_with(x, s, Tensor::zeros(x.shape()));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(r[i], std::sqrt(s.alpha_bar[7]) * x[i]);
}

TEST(Encode, SeededAndUnbiased) {
  const auto s = respaced_schedule(60, 0.4);
  Rng rng(2);
  const Tensor x = oracle::uniform_tensor(rng, {3, 2, 2});
  EXPECT_EQ(encode_appearance(x, s, 5).values(), encode_appearance(x, s, 5).values());
  const std::size_t trials = 10000;
  std::vector<double> mean(x.size(), 0.0);
  for (std::size_t k = 0; k < trials; ++k) {
    const Tensor e = encode_appearance(x, s, 1000 + k);
    for (std::size_t i = 0; i < x.size(); ++i) mean[i] += e[i] / trials;
  }
  const double se = std::sqrt((1.0 - s.alpha_bar[59]) / trials);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(mean[i] - std::sqrt(s.alpha_bar[59]) * x[i]), 4.0 * se);
}

TEST(Trajectory, SharedNoiseAndLength) {
  const auto s = default_schedule(12);
  Rng rng(3);
  const Tensor x = oracle::uniform_tensor(rng, {3, 4, 4});
  const auto traj = structure_trajectory(x, s, 9);
  ASSERT_EQ(traj.size(), 12u);
  std::vector<double> first;
  for (int t = 0; t < 12; ++t) {
    const auto i = static_cast<std::size_t>(t);
    std::vector<double> eps(x.size());
    for (std::size_t p = 0; p < x.size(); ++p) {
      eps[p] = (traj[i][p] - std::sqrt(s.alpha_bar[i]) * x[p]) / std::sqrt(1.0 - s.alpha_bar[i]);
    }
    if (t == 0) {
      first = eps;
    } else {
      for (std::size_t p = 0; p < x.size(); ++p) ASSERT_NEAR(eps[p], first[p], 1e-9);
    }
  }
  const double bound = std::sqrt(1.0 - s.alpha_bar[0]) * std::sqrt(static_cast<double>(x.size()));
  EXPECT_LT(l2_norm(sub(traj[0], x)).item(), bound * 5.0);
  EXPECT_LT(l2_norm(sub(traj[0], x)).item(), l2_norm(sub(traj[11], x)).item());
}

TEST(DenoiseStep, MatchesMeanOfPrediction) {
  const Tiny& t = tiny();
  Rng rng(4);
  const Tensor x = rng.randn({3, 16, 16});
  EXPECT_EQ(denoise_step(x, 5, t.model, 1, t.sched).values(), predict_mu(x, 5, t.model(x, 5, 1), t.sched).values());
  const auto two = make_schedule(2, 0.1, 0.2);
  EXPECT_NEAR(predict_mu(Tensor({1}, {1.0}), 1, Tensor({1}, {1.0}), two).item(), 0.6954, 1e-4);
}

TEST(MaskMix, Examples) {
  Rng rng(5);
  const Tensor a = oracle::uniform_tensor(rng, {3, 2, 2}), s = oracle::uniform_tensor(rng, {3, 2, 2});
  EXPECT_EQ(mask_mix(a, s, full_mask(2, 2), 0.98).values(), a.values());
  const Mask none = mask_from_binary(Tensor::zeros({2, 2}));
  const Tensor one = mask_mix(a, s, none, 1.0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(one[i], s[i]);
  EXPECT_EQ(mask_mix(a, s, none, 0.0).values(), a.values());
  const Tensor px = mask_mix(Tensor::full({1, 1, 1}, 1.0), Tensor::zeros({1, 1, 1}), mask_from_binary(Tensor::zeros({1, 1})), 0.98);
  EXPECT_NEAR(px.item(), 0.02, 1e-15);
  EXPECT_THROW(mask_mix(a, Tensor::zeros({3, 2, 3}), none, 0.5), ShapeError);
  EXPECT_THROW(mask_mix(a, s, none, 1.5), std::invalid_argument);
}

TEST(Transfer, DisabledFeaturesEqualPlainSampling) {
  const Tiny& t = tiny();
  GuidanceConfig c = t.config(77);
  c.lambda_app = c.lambda_struct = 0.0;
  c.n_resample = 1;
  const auto res = transfer(t.x_s0, t.x_a0, full_mask(16, 16), t.model, t.fext, c, t.sched, 2);
  Rng noise(derive_seed(77, 4));
  const Tensor start = encode_appearance(t.x_a0, t.sched, derive_seed(77, 1));
  Tensor plain = sample_conditional(t.model, start, 2, t.sched, noise);
  std::vector<double> v(plain.data().begin(), plain.data().end());
  for (double& x : v) x = std::clamp(x, -1.0, 1.0);
  EXPECT_EQ(res.output.values(), v);
}

TEST(Transfer, SameSeedSameOutputAndTrace) {
  const Tiny& t = tiny();
  const auto a = transfer(t.x_s0, t.x_a0, t.mask, t.model, t.fext, t.config(3), t.sched, 0);
  const auto b = transfer(t.x_s0, t.x_a0, t.mask, t.model, t.fext, t.config(3), t.sched, 0);
  EXPECT_EQ(a.output.values(), b.output.values());
  ASSERT_EQ(a.trace.records.size(), b.trace.records.size());
  for (std::size_t i = 0; i < a.trace.records.size(); ++i) {
    EXPECT_EQ(a.trace.records[i].post_mix.values(), b.trace.records[i].post_mix.values());
    EXPECT_EQ(a.trace.records[i].report.l_total, b.trace.records[i].report.l_total);
  }
  const auto c = transfer(t.x_s0, t.x_a0, t.mask, t.model, t.fext, t.config(4), t.sched, 0);
  EXPECT_NE(a.output.values(), c.output.values());
}

TEST(Transfer, TraceInvariants) {
  const Tiny& t = tiny();
  int skipped = 0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    GuidanceConfig c = t.config(seed);
    c.mask_skip_prob = 0.5;
    c.mask_guidance_fraction = 0.4;  // ceil(0.4 * 8) = 4 steps
    const auto r = transfer(t.x_s0, t.x_a0, t.mask, t.model, t.fext, c, t.sched, 1);
    ASSERT_EQ(r.trace.records.size(), 8u);
    skipped += r.trace.mask_skipped ? 1 : 0;
    for (std::size_t k = 0; k < 8; ++k) {
      const auto& rec = r.trace.records[k];
      EXPECT_EQ(rec.t, 7 - static_cast<int>(k));
      EXPECT_EQ(rec.mixing_active, !r.trace.mask_skipped && k < 4);
      EXPECT_NEAR(rec.report.l_total, c.lambda_struct * rec.report.l_struct + c.lambda_app * rec.report.l_app, 1e-9);
      for (double v : rec.post_mix.data()) ASSERT_TRUE(std::isfinite(v));
    }
    for (double v : r.output.data()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_GT(skipped, 0);
  EXPECT_LT(skipped, 12);
}

TEST(Transfer, MixingKeepsBackgroundNearStructureLatent) {
  // With omega = 1 and one repetition, every active post-mix latent equals the
  // structure trajectory outside the mask.
  const Tiny& t = tiny();
  GuidanceConfig c = t.config(6);
  c.omega_mix = 1.0;
  c.n_resample = 1;
  const auto r = transfer(t.x_s0, t.x_a0, t.mask, t.model, t.fext, c, t.sched, 0);
  const auto traj = structure_trajectory(t.x_s0, t.sched, derive_seed(6, 2));
  for (const auto& rec : r.trace.records) {
    if (!rec.mixing_active) continue;
    const Tensor& ref = rec.t > 0 ? traj[static_cast<std::size_t>(rec.t - 1)] : t.x_s0;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < 256; ++p) {
        const std::size_t i = ch * 256 + p;
        if (t.mask.binary[p] == 0.0) {
          ASSERT_EQ(rec.post_mix[i], ref[i]);
        } else {
          ASSERT_EQ(rec.post_mix[i], rec.pre_mix[i]);
        }
      }
  }
}

TEST(Transfer, ConfigMismatchRejected) {
  const Tiny& t = tiny();
  GuidanceConfig c = t.config(1);
  c.T = 9;
  EXPECT_THROW(transfer(t.x_s0, t.x_a0, t.mask, t.model, t.fext, c, t.sched, 0), std::invalid_argument);
  c = t.config(1);
  c.omega_mix = 2.0;
  EXPECT_THROW(transfer(t.x_s0, t.x_a0, t.mask, t.model, t.fext, c, t.sched, 0), ConfigError);
}

TEST(Transfer, NonFiniteLatentReportsStep) {
  const Tiny& t = tiny();
  GuidanceConfig c = t.config(2);
  c.guidance_scale = 1e308;
  try {
    transfer(t.x_s0, t.x_a0, t.mask, t.model, t.fext, c, t.sched, 0);
    FAIL() << "no throw";
  } catch (const NonFiniteLatentError& e) {
    EXPECT_EQ(e.step, 7);
  }
}

TEST(Transfer, TraceWritesIndexAndLatents) {
  const Tiny& t = tiny();
  const auto r = transfer(t.x_s0, t.x_a0, t.mask, t.model, t.fext, t.config(8), t.sched, 0);
  const auto dir = std::filesystem::temp_directory_path() / "atx_trace_test";
  std::filesystem::remove_all(dir);
  write_trace(r.trace, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "index.txt"));
  EXPECT_EQ(load_tnsr((dir / "output.tnsr").string()).values(), r.output.values());
  EXPECT_EQ(load_tnsr((dir / "t3_post.tnsr").string()).values(), r.trace.records[4].post_mix.values());
  std::filesystem::remove_all(dir);
}
