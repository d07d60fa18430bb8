#pragma once

// Mask-guided appearance transfer. The appearance image is encoded to the
// last noise level and denoised under the conditioning label. Each step
// shifts the reverse mean by the feature-guidance gradient. During the
// leading mask window, background pixels are pulled towards the forward-noised
// structure image, and each step is repeated after one re-noising step.
//
// Random streams (all derived from cfg.seed): 1 encode noise, 2 structure
// trajectory noise, 3 run-level mask skip, 4 reverse-step noise,
// 5 re-noising for repetitions.

#include <filesystem>
#include <fstream>

#include "atx/guidance.hpp"
#include "atx/image_io.hpp"

namespace atx {

inline Tensor encode_appearance(const Tensor& x_a0, const NoiseSchedule& s, std::uint64_t seed) {
  Rng rng(seed);
  return q_sample(x_a0, s.steps() - 1, rng.randn(x_a0.shape()), s);
}

// Same encoding with caller-supplied noise.
inline Tensor encode_appearance_with(const Tensor& x_a0, const NoiseSchedule& s, const Tensor& eps) {
  return q_sample(x_a0, s.steps() - 1, eps, s);
}

// Forward latents of x_s0 at every level, all built from one shared noise draw.
inline std::vector<Tensor> structure_trajectory(const Tensor& x_s0, const NoiseSchedule& s, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor eps = rng.randn(x_s0.shape());
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(s.steps()));
  for (int t = 0; t < s.steps(); ++t) out.push_back(q_sample(x_s0, t, eps, s));
  return out;
}

// Reverse mean from level t_in (>= 1) to t_in - 1 under the model's prediction.
inline Tensor denoise_step(const Tensor& x, int t_in, const Denoiser& model, int label, const NoiseSchedule& s) {
  return predict_mu(x, t_in, model(x, t_in, label), s);
}

// M*x_a + (1-M)*(omega*x_s + (1-omega)*x_a), mask broadcast over channels.
inline Tensor mask_mix(const Tensor& x_a, const Tensor& x_s, const Mask& mask, double omega) {
  detail::require_same("mask_mix", x_a, x_s);
  if (!(omega >= 0.0 && omega <= 1.0)) throw std::invalid_argument("mask_mix: omega_mix must lie in [0, 1]");
  const Tensor m = mask_channels(mask.binary, x_a.dim(0));
  detail::require_same("mask_mix", x_a, m);
  std::vector<double> out(x_a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = m[i] * x_a[i] + (1.0 - m[i]) * (omega * x_s[i] + (1.0 - omega) * x_a[i]);
  }
  return Tensor(x_a.shape(), std::move(out));
}

struct TransferRecord {
  int t = 0;
  Tensor pre_mix;
  Tensor post_mix;
  GuidanceLossReport report;
  bool mixing_active = false;
};

struct TransferTrace {
  std::vector<TransferRecord> records;
  Tensor output;
  GuidanceConfig config;
  std::uint64_t seed = 0;
  bool mask_skipped = false;
  int label = 0;
};

class NonFiniteLatentError : public NonFiniteError {
 public:
  NonFiniteLatentError(int t, const std::string& what) : NonFiniteError(what), step(t) {}
  int step;
};

struct TransferResult {
  Tensor output;
  TransferTrace trace;
};

inline TransferResult transfer(const Tensor& x_s0, const Tensor& x_a0, const Mask& mask, const Denoiser& model,
                               const FeatureNet& fext, const GuidanceConfig& cfg, const NoiseSchedule& s, int label) {
  cfg.validate();
  if (cfg.T != s.steps()) {
    throw std::invalid_argument("transfer: config T = " + std::to_string(cfg.T) + " but schedule has " +
                                std::to_string(s.steps()) + " steps");
  }
  detail::require_same("transfer", x_s0, x_a0);
  const int T = s.steps();
  const std::uint64_t seed = cfg.seed;
  const std::vector<Tensor> traj = structure_trajectory(x_s0, s, derive_seed(seed, 2));
  Rng skip_rng(derive_seed(seed, 3));
  const bool skipped = skip_rng.bernoulli(cfg.mask_skip_prob);
  Rng step_rng(derive_seed(seed, 4));
  Rng renoise_rng(derive_seed(seed, 5));
  const bool guided = cfg.lambda_struct != 0.0 || cfg.lambda_app != 0.0;
  const GuidanceContext ctx(model, fext, x_s0, x_a0, mask, label);

  TransferResult res;
  res.trace.config = cfg;
  res.trace.seed = seed;
  res.trace.mask_skipped = skipped;
  res.trace.label = label;
  res.trace.records.reserve(static_cast<std::size_t>(T));

  Tensor x = encode_appearance(x_a0, s, derive_seed(seed, 1));
  for (int k = 0; k < T; ++k) {
    const int t = T - 1 - k;
    const bool active = !skipped && k < cfg.mask_steps();
    const int reps = active ? cfg.n_resample : 1;
    TransferRecord rec;
    rec.t = t;
    rec.mixing_active = active;
    try {
      for (int r = 0; r < reps; ++r) {
        const Tensor eps_hat = model(x, t, label);
        Tensor mu = reverse_mean(x, t, eps_hat, s);
        if (guided) {
          GuidanceResult g = guidance_gradient(x, t, ctx, cfg, s);
          mu = guided_mu(mu, s.sigma(t), scale(g.grad, -cfg.guidance_scale));
          rec.report = std::move(g.report);
        }
        Tensor next = t > 0 ? add(mu, scale(step_rng.randn(x.shape()), s.sigma(t))) : mu;
        rec.pre_mix = next;
        if (active) next = mask_mix(next, t > 0 ? traj[static_cast<std::size_t>(t - 1)] : x_s0, mask, cfg.omega_mix);
        for (double v : next.data()) {
          if (!std::isfinite(v)) throw NonFiniteLatentError(t, "transfer: non-finite latent at step t = " + std::to_string(t));
        }
        if (r + 1 < reps) {
          const double a = s.alpha[static_cast<std::size_t>(t)];
          x = add(scale(next, std::sqrt(a)), scale(renoise_rng.randn(x.shape()), std::sqrt(1.0 - a)));
        } else {
          x = next;
        }
      }
    } catch (const NonFiniteLatentError&) {
      throw;
    } catch (const NonFiniteError& e) {
      throw NonFiniteLatentError(t, "transfer: non-finite value at step t = " + std::to_string(t) + " (" + e.what() + ")");
    }
    rec.post_mix = x;
    res.trace.records.push_back(std::move(rec));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = std::clamp(v, -1.0, 1.0);
  res.output = Tensor(x.shape(), std::move(out));
  res.trace.output = res.output;
  return res;
}

// Writes one TNSR file per record latent, the output, and index.txt.
inline void write_trace(const TransferTrace& trace, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream idx(dir / "index.txt");
  if (!idx) throw std::runtime_error("write_trace: cannot write index in '" + dir.string() + "'");
  idx << "seed " << trace.seed << "\n";
  idx << "label " << trace.label << "\n";
  idx << "mask_skipped " << (trace.mask_skipped ? 1 : 0) << "\n";
  idx << "records " << trace.records.size() << "\n";
  for (const auto& r : trace.records) {
    const std::string stem = "t" + std::to_string(r.t);
    save_tnsr((dir / (stem + "_pre.tnsr")).string(), r.pre_mix);
    save_tnsr((dir / (stem + "_post.tnsr")).string(), r.post_mix);
    idx << "t " << r.t << " mix " << (r.mixing_active ? 1 : 0) << " l_struct " << fmt_double(r.report.l_struct)
        << " l_app " << fmt_double(r.report.l_app) << " l_total " << fmt_double(r.report.l_total) << " pre "
        << stem << "_pre.tnsr post " << stem << "_post.tnsr\n";
  }
  save_tnsr((dir / "output.tnsr").string(), trace.output);
  idx << "output output.tnsr\n";
  if (!idx) throw std::runtime_error("write_trace: write failed in '" + dir.string() + "'");
}

}  // namespace atx
