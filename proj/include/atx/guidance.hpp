#pragma once

// Feature-space guidance. Structure: contrastive loss between same-position
// patch keys of the structure image and the current estimate. Appearance:
// distance between [CLS] tokens of the appearance image and the masked
// estimate, plus a masked pixel term.

#include "atx/config.hpp"
#include "atx/denoiser.hpp"
#include "atx/feature_net.hpp"
#include "atx/mask_gen.hpp"

namespace atx {

// exp(cos(a, b) / tau) for vectors.
inline double sim(const Tensor& a, const Tensor& b, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("sim: tau must be positive");
  if (a.ndim() != 1) throw ShapeError("sim: expected vectors, got " + shape_str(a.shape()));
  return std::exp(cosine_similarity(a, b).item() / tau);
}

// -sum_i log( s_ii / sum_j s_ij ) with s_ij = exp(cos(kS_i, kA_j) / tau).
inline Tensor structure_loss(const Tensor& keys_s, const Tensor& keys_a, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("structure_loss: tau must be positive");
  if (keys_s.ndim() != 2 || keys_s.shape() != keys_a.shape()) {
    throw ShapeError("structure_loss: key sets differ: " + shape_str(keys_s.shape()) + " vs " + shape_str(keys_a.shape()));
  }
  const Tensor logits = scale(pairwise_cosine(keys_s, keys_a), 1.0 / tau);
  const Tensor e = exp(logits);
  return sum(sub(log(sum(e, 1)), diag(logits)));
}

// Mask [h, w] broadcast over c channels.
inline Tensor mask_channels(const Tensor& mask, std::size_t c) {
  if (mask.ndim() != 2) throw ShapeError("mask: expected [h, w], got " + shape_str(mask.shape()));
  std::vector<double> v;
  v.reserve(c * mask.size());
  for (std::size_t i = 0; i < c; ++i) v.insert(v.end(), mask.data().begin(), mask.data().end());
  return Tensor({c, mask.dim(0), mask.dim(1)}, std::move(v));
}

struct AppearanceTerms {
  Tensor cls_distance;
  Tensor masked_mse;
};

inline AppearanceTerms appearance_terms(const Tensor& x_a0, const Tensor& x_hat, const FeatureNet& fext, const Mask& mask) {
  detail::require_same("appearance_loss", x_a0, x_hat);
  const Tensor m = mask_channels(mask.binary, x_hat.dim(0));
  detail::require_same("appearance_loss", x_hat, m);
  const Tensor cls_a = fext.extract(x_a0.detach()).cls;
  const Tensor cls_hat = fext.extract(mul(x_hat, m)).cls;
  return {l2_norm(sub(cls_a, cls_hat)), l2_norm(mul(sub(x_a0, x_hat), m))};
}

inline Tensor appearance_loss(const Tensor& x_a0, const Tensor& x_hat, const FeatureNet& fext, const Mask& mask,
                              double lambda_mse) {
  if (!(lambda_mse >= 0.0)) throw std::invalid_argument("appearance_loss: lambda_mse must be nonnegative");
  const AppearanceTerms t = appearance_terms(x_a0, x_hat, fext, mask);
  return add(t.cls_distance, scale(t.masked_mse, lambda_mse));
}

struct GuidanceLossReport {
  double l_app = 0.0;
  double l_struct = 0.0;
  double l_total = 0.0;
  double cls_distance = 0.0;
  double masked_mse = 0.0;
  std::vector<double> patch_terms;  // per-patch structure terms
};

namespace detail {

struct LossGraph {
  Tensor total;
  GuidanceLossReport report;
};

inline LossGraph build_total_loss(const Tensor& keys_s, const Tensor& x_a0, const Tensor& x_hat, const FeatureNet& fext,
                                  const Mask& mask, const GuidanceConfig& cfg) {
  const Tensor keys_hat = fext.extract(x_hat).keys;
  const Tensor logits = scale(pairwise_cosine(keys_s, keys_hat), 1.0 / cfg.tau);
  const Tensor per_patch = sub(log(sum(exp(logits), 1)), diag(logits));
  const Tensor l_struct = sum(per_patch);
  const AppearanceTerms at = appearance_terms(x_a0, x_hat, fext, mask);
  const Tensor l_app = add(at.cls_distance, scale(at.masked_mse, cfg.lambda_mse));
  LossGraph g;
  g.total = add(scale(l_struct, cfg.lambda_struct), scale(l_app, cfg.lambda_app));
  g.report.l_struct = l_struct.item();
  g.report.l_app = l_app.item();
  g.report.l_total = cfg.lambda_struct * g.report.l_struct + cfg.lambda_app * g.report.l_app;
  g.report.cls_distance = at.cls_distance.item();
  g.report.masked_mse = at.masked_mse.item();
  g.report.patch_terms.assign(per_patch.data().begin(), per_patch.data().end());
  return g;
}

}  // namespace detail

inline GuidanceLossReport total_loss(const Tensor& x_s0, const Tensor& x_a0, const Tensor& x_hat, const FeatureNet& fext,
                                     const Mask& mask, const GuidanceConfig& cfg) {
  detail::require_same("total_loss", x_s0, x_hat);
  const Tensor keys_s = fext.extract(x_s0.detach()).keys;
  return detail::build_total_loss(keys_s, x_a0, x_hat.detach(), fext, mask, cfg).report;
}

// Everything the guidance gradient needs besides the latent.
struct GuidanceContext {
  const Denoiser* model = nullptr;
  const FeatureNet* fext = nullptr;
  Tensor x_s0;
  Tensor x_a0;
  Tensor keys_s;  // keys of x_s0, computed once
  Mask mask;
  int label = 0;

  GuidanceContext(const Denoiser& m, const FeatureNet& f, const Tensor& s0, const Tensor& a0, const Mask& mk, int y)
      : model(&m), fext(&f), x_s0(s0.detach()), x_a0(a0.detach()), keys_s(f.extract(s0.detach()).keys), mask(mk), label(y) {}
};

// Total loss at the Tweedie estimate of x_t as a function of x_t (for checks).
inline double guidance_objective(const Tensor& x_t, int t, const GuidanceContext& ctx, const GuidanceConfig& cfg,
                                 const NoiseSchedule& sched) {
  const Tensor x = x_t.detach();
  const Tensor x_hat = tweedie_x0(x, t, (*ctx.model)(x, t, ctx.label), sched);
  return detail::build_total_loss(ctx.keys_s, ctx.x_a0, x_hat, *ctx.fext, ctx.mask, cfg).total.item();
}

struct GuidanceResult {
  Tensor grad;
  GuidanceLossReport report;
};

// d(total loss at tweedie_x0(x_t))/d(x_t). Returns zeros (and an all-zero
// report) when both loss weights vanish.
inline GuidanceResult guidance_gradient(const Tensor& x_t, int t, const GuidanceContext& ctx, const GuidanceConfig& cfg,
                                        const NoiseSchedule& sched) {
  GuidanceResult r;
  if (cfg.lambda_struct == 0.0 && cfg.lambda_app == 0.0) {
    r.grad = Tensor::zeros(x_t.shape());
    return r;
  }
  const Tensor x = x_t.tracked();
  const Tensor x_hat = tweedie_x0(x, t, (*ctx.model)(x, t, ctx.label), sched);
  detail::LossGraph g = detail::build_total_loss(ctx.keys_s, ctx.x_a0, x_hat, *ctx.fext, ctx.mask, cfg);
  backward(g.total);
  r.grad = x.grad_tensor();
  detail::require_finite("guidance_gradient", r.grad);
  r.report = std::move(g.report);
  return r;
}

}  // namespace atx
