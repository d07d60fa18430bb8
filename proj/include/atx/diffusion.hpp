#pragma once

// DDPM schedule, closed-form forward noising, reverse mean/step, Tweedie
// estimate, the noise-prediction objective and the guided mean shift.
//
// Timesteps are 0-based: latent index t in [0, T) carries noise level
// alpha_bar[t]. A reverse step at index t maps a latent at level t to level
// t - 1; the step at t == 0 produces the clean estimate.

#include <cstdint>

#include "atx/ops.hpp"
#include "atx/rng.hpp"

namespace atx {

struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  int steps() const { return static_cast<int>(beta.size()); }
  double sigma(int t) const { return std::sqrt(beta.at(static_cast<std::size_t>(t))); }
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  const auto n = static_cast<std::size_t>(T);
  s.beta.resize(n);
  s.alpha.resize(n);
  s.alpha_bar.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(n - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = t == 0 ? s.alpha[0] : s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

// Linear schedule whose endpoints scale with 1000/T so that a short chain keeps
// roughly the cumulative noise of the usual 1000-step one.
inline NoiseSchedule default_schedule(int T) {
  if (T < 1) throw std::invalid_argument("default_schedule: T must be >= 1");
  const double k = 1000.0 / static_cast<double>(T);
  const double start = std::min(1e-4 * k, 0.999);
  const double end = std::min(0.02 * k, 0.999);
  return make_schedule(T, start, end);
}

// The standard 1000-step linear schedule (1e-4 .. 0.02) cut at `span` of its
// length and respaced to T steps: level i sits at 1000-step index
// k_i = round(i * (span*1000 - 1) / (T - 1)) and beta_i = 1 - abar(k_i)/abar(k_{i-1}).
// With span < 1 the last latent keeps part of the image.
inline NoiseSchedule respaced_schedule(int T, double span) {
  if (T < 1) throw std::invalid_argument("respaced_schedule: T must be >= 1");
  if (!(span > 0.0 && span <= 1.0)) throw std::invalid_argument("respaced_schedule: span must lie in (0, 1]");
  constexpr int kFull = 1000;
  std::vector<double> full_ab(kFull);
  double ab = 1.0;
  for (int k = 0; k < kFull; ++k) {
    ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * static_cast<double>(k) / (kFull - 1));
    full_ab[static_cast<std::size_t>(k)] = ab;
  }
  const double last = std::max(0.0, std::round(span * kFull) - 1.0);
  if (static_cast<double>(T) > last + 1.0) throw std::invalid_argument("respaced_schedule: span too short for T steps");
  NoiseSchedule s;
  const auto n = static_cast<std::size_t>(T);
  s.beta.resize(n);
  s.alpha.resize(n);
  s.alpha_bar.resize(n);
  double prev = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = n == 1 ? last : std::round(static_cast<double>(i) * last / static_cast<double>(n - 1));
    const double cur = full_ab[static_cast<std::size_t>(pos)];
    s.beta[i] = 1.0 - cur / prev;
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = i == 0 ? s.alpha[0] : s.alpha_bar[i - 1] * s.alpha[i];
    prev = cur;
  }
  return s;
}

// "linear" -> default_schedule(T); "respaced:<span>" -> respaced_schedule(T, span).
inline NoiseSchedule schedule_by_name(const std::string& name, int T) {
  if (name == "linear") return default_schedule(T);
  const std::string prefix = "respaced:";
  if (name.rfind(prefix, 0) == 0) {
    std::size_t used = 0;
    double span = 0.0;
    try {
      span = std::stod(name.substr(prefix.size()), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != name.size() - prefix.size()) {
      throw std::invalid_argument("schedule '" + name + "': malformed span");
    }
    return respaced_schedule(T, span);
  }
  throw std::invalid_argument("unknown schedule '" + name + "' (expected linear or respaced:<span>)");
}

namespace detail {

inline void require_step(const NoiseSchedule& s, int t, std::string_view op) {
  if (t < 0 || t >= s.steps()) {
    throw std::out_of_range(std::string(op) + ": timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(s.steps()) + ")");
  }
}

}  // namespace detail

inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  detail::require_step(s, t, "q_sample");
  detail::require_same("q_sample", x0, eps);
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

// Mean of p(x_{t-1} | x_t) from a noise estimate.
inline Tensor predict_mu(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& s) {
  detail::require_step(s, t, "predict_mu");
  if (t == 0) throw std::out_of_range("predict_mu: t = 0 has no previous step");
  detail::require_same("predict_mu", x_t, eps_hat);
  const auto i = static_cast<std::size_t>(t);
  const double coef = (1.0 - s.alpha[i]) / std::sqrt(1.0 - s.alpha_bar[i]);
  return scale(sub(x_t, scale(eps_hat, coef)), 1.0 / std::sqrt(s.alpha[i]));
}

inline Tensor p_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Tensor& z, const NoiseSchedule& s) {
  detail::require_same("p_step", x_t, z);
  return add(predict_mu(x_t, t, eps_hat, s), scale(z, s.sigma(t)));
}

inline Tensor tweedie_x0(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& s) {
  detail::require_step(s, t, "tweedie_x0");
  detail::require_same("tweedie_x0", x_t, eps_hat);
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  return sub(scale(x_t, 1.0 / std::sqrt(ab)), scale(eps_hat, std::sqrt(1.0 - ab) / std::sqrt(ab)));
}

inline Tensor guided_mu(const Tensor& mu, double sigma_t, const Tensor& grad_log_p) {
  if (sigma_t < 0.0) throw std::invalid_argument("guided_mu: sigma_t must be nonnegative");
  detail::require_same("guided_mu", mu, grad_log_p);
  return add(mu, scale(grad_log_p, sigma_t));
}

// Mean reverse-step estimate at any index: predict_mu for t >= 1,
// and the Tweedie estimate at t == 0 (where both coincide algebraically).
inline Tensor reverse_mean(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& s) {
  return t == 0 ? tweedie_x0(x_t, 0, eps_hat, s) : predict_mu(x_t, t, eps_hat, s);
}

// Noise-prediction objective: mean over elements of (eps - model(x_t, t, label))^2.
// `model` is any callable (const Tensor&, int t, int label) -> Tensor.
template <class Model>
Tensor ddpm_loss(Model&& model, const Tensor& x0, int t, const Tensor& eps, int label, const NoiseSchedule& s) {
  const Tensor x_t = q_sample(x0, t, eps, s);
  const Tensor pred = model(x_t, t, label);
  return scale(squared_error(pred, eps), 1.0 / static_cast<double>(eps.size()));
}

// Plain label-conditional ancestral sampling from x_start at level T-1.
// Step noise for indices T-1..1 is drawn in that order from `noise`; the last
// step is noiseless.
template <class Model>
Tensor sample_conditional(Model&& model, const Tensor& x_start, int label, const NoiseSchedule& s, Rng& noise) {
  Tensor x = x_start;
  for (int t = s.steps() - 1; t >= 0; --t) {
    const Tensor eps_hat = model(x, t, label);
    Tensor mu = reverse_mean(x, t, eps_hat, s);
    x = t > 0 ? add(mu, scale(noise.randn(x.shape()), s.sigma(t))) : mu;
  }
  return x;
}

}  // namespace atx
