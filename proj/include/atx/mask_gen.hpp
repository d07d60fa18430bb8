#pragma once

// Foreground masks from label-conditioned noise estimates.
//
// The structure image is noised to T-1 and denoised under the positive label
// to the half-way step; the Tweedie clean estimate there is scored by the
// noise predictor under the positive label and under each negative label.
// The signed, channel-averaged difference (positive minus mean negative) is
// standardized over the image and thresholded.
//
// `Predictor` is any callable (const Tensor& x [c, h, w], int t, int label) -> Tensor.

#include <cstdint>
#include <limits>

#include "atx/diffusion.hpp"

namespace atx {

struct Mask {
  Tensor binary;     // [h, w] in {0, 1}
  Tensor diff_map;   // [h, w] standardized difference score
  double threshold_used = 0.0;
  int positive_label = 0;
  std::vector<int> negative_labels;

  double fraction() const {
    double s = 0.0;
    for (double v : binary.data()) s += v;
    return s / static_cast<double>(binary.size());
  }
};

inline Mask full_mask(std::size_t h, std::size_t w) {
  Mask m;
  m.binary = Tensor::full({h, w}, 1.0);
  m.diff_map = Tensor::zeros({h, w});
  return m;
}

inline Mask mask_from_binary(const Tensor& binary) {
  if (binary.ndim() != 2) throw ShapeError("mask: expected [h, w], got " + shape_str(binary.shape()));
  Mask m;
  std::vector<double> v(binary.data().begin(), binary.data().end());
  for (double& x : v) x = x >= 0.5 ? 1.0 : 0.0;
  m.binary = Tensor(binary.shape(), std::move(v));
  m.diff_map = Tensor::zeros(binary.shape());
  return m;
}

// Timestep index at which masks are read off.
inline int mask_timestep(const NoiseSchedule& s) { return s.steps() / 2; }

// Encodes to T-1 with seeded noise, then applies the reverse steps at
// t = T-1 ... floor(T/2) under label y_p.
template <class Predictor>
Tensor half_denoise(const Tensor& x_s0, const Predictor& predict, const NoiseSchedule& s, int y_p, std::uint64_t seed) {
  Rng rng(seed);
  const int T = s.steps();
  Tensor x = q_sample(x_s0, T - 1, rng.randn(x_s0.shape()), s);
  for (int t = T - 1; t >= mask_timestep(s); --t) {
    const Tensor eps_hat = predict(x, t, y_p);
    x = t > 0 ? p_step(x, t, eps_hat, rng.randn(x.shape()), s) : reverse_mean(x, t, eps_hat, s);
  }
  return x;
}

template <class Predictor>
Tensor positive_noise_map(const Tensor& x_hat, const Predictor& predict, int y_p, int t_half) {
  return predict(x_hat, t_half, y_p);
}

template <class Predictor>
Tensor negative_noise_map(const Tensor& x_hat, const Predictor& predict, const std::vector<int>& negatives, int t_half) {
  if (negatives.empty()) throw std::invalid_argument("negative_noise_map: need at least one negative label");
  Tensor acc = predict(x_hat, t_half, negatives[0]);
  for (std::size_t i = 1; i < negatives.size(); ++i) acc = add(acc, predict(x_hat, t_half, negatives[i]));
  return scale(acc, 1.0 / static_cast<double>(negatives.size()));
}

// diff[p] = mean_c(M_p - M_n)[c, p]; score = (diff - mean(diff)) / std(diff)
// with population std; foreground where score >= theta.
inline Mask binarize(const Tensor& m_pos, const Tensor& m_neg, double theta) {
  detail::require_same("binarize", m_pos, m_neg);
  if (m_pos.ndim() != 3) throw ShapeError("binarize: expected noise maps [c, h, w], got " + shape_str(m_pos.shape()));
  const std::size_t c = m_pos.dim(0), h = m_pos.dim(1), w = m_pos.dim(2), n = h * w;
  std::vector<double> d(n, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < n; ++p) d[p] += m_pos[ch * n + p] - m_neg[ch * n + p];
  for (double& v : d) v /= static_cast<double>(c);
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : d) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double sd = std::sqrt(var);
  if (!(sd > 0.0)) throw std::domain_error("binarize: degenerate noise difference");
  std::vector<double> bin(n);
  for (std::size_t p = 0; p < n; ++p) {
    d[p] = (d[p] - mean) / sd;
    bin[p] = d[p] >= theta ? 1.0 : 0.0;
  }
  Mask m;
  m.binary = Tensor({h, w}, std::move(bin));
  m.diff_map = Tensor({h, w}, std::move(d));
  m.threshold_used = theta;
  return m;
}

// Index of the mask whose foreground fraction is nearest `target`; ties go
// to the lowest index.
inline std::size_t select_mask(const std::vector<double>& fractions, double target = 0.35) {
  if (fractions.empty()) throw std::invalid_argument("select_mask: no candidates");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double d = std::abs(fractions[i] - target);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

struct MaskSet {
  std::vector<Mask> masks;
  std::size_t selected = 0;

  const Mask& best() const { return masks.at(selected); }
};

// Negative label sets used when none are given: texture triples.
inline std::vector<std::vector<int>> default_negative_sets() { return {{4, 5, 6}, {4, 5, 7}, {5, 6, 7}}; }

// Seed used for the k-th negative set's denoising run.
inline std::uint64_t mask_run_seed(std::uint64_t seed, std::size_t k) { return derive_seed(seed, 0x3A5C0 + k); }

template <class Predictor>
Mask generate_mask(const Tensor& x_s0, const Predictor& predict, const NoiseSchedule& s, int y_p,
                   const std::vector<int>& negatives, double theta, std::uint64_t run_seed) {
  const int t_half = mask_timestep(s);
  const Tensor x_half = half_denoise(x_s0, predict, s, y_p, run_seed);
  const Tensor x_hat = tweedie_x0(x_half, t_half, predict(x_half, t_half, y_p), s);
  Mask m = binarize(positive_noise_map(x_hat, predict, y_p, t_half),
                    negative_noise_map(x_hat, predict, negatives, t_half), theta);
  m.positive_label = y_p;
  m.negative_labels = negatives;
  return m;
}

template <class Predictor>
MaskSet generate_masks(const Tensor& x_s0, const Predictor& predict, const NoiseSchedule& s, int y_p,
                       const std::vector<std::vector<int>>& negative_sets, double theta, std::uint64_t seed) {
  if (negative_sets.empty()) throw std::invalid_argument("generate_masks: need at least one negative label set");
  MaskSet out;
  std::vector<double> fractions;
  for (std::size_t k = 0; k < negative_sets.size(); ++k) {
    out.masks.push_back(generate_mask(x_s0, predict, s, y_p, negative_sets[k], theta, mask_run_seed(seed, k)));
    fractions.push_back(out.masks.back().fraction());
  }
  out.selected = select_mask(fractions);
  return out;
}

}  // namespace atx
