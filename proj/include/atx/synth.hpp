#pragma once

// Procedural toy dataset: four object silhouettes ("structure" classes) drawn
// dark on a light backdrop with exact ground-truth masks, and four full-frame
// textures ("appearance" classes).

#include <array>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "atx/rng.hpp"
#include "atx/tensor.hpp"

namespace atx {

enum class SynthClass : int { bag = 0, phone, pillow, cup, stripes, dots, waves, checker };

inline constexpr int kNumSynthClasses = 8;
inline constexpr std::array<std::string_view, kNumSynthClasses> kSynthClassNames = {
    "bag", "phone", "pillow", "cup", "stripes", "dots", "waves", "checker"};

inline bool is_structure_class(int label) { return label >= 0 && label < 4; }

inline int synth_class_id(std::string_view name) {
  for (int i = 0; i < kNumSynthClasses; ++i) {
    if (kSynthClassNames[static_cast<std::size_t>(i)] == name) return i;
  }
  throw std::invalid_argument("unknown synthetic class '" + std::string(name) + "'");
}

inline std::string_view synth_class_name(int label) {
  if (label < 0 || label >= kNumSynthClasses) throw std::out_of_range("synthetic class id out of range");
  return kSynthClassNames[static_cast<std::size_t>(label)];
}

struct SynthSample {
  Tensor image;    // [3, h, w] in [-1, 1]
  int label = 0;
  Tensor gt_mask;  // [h, w] in {0, 1}; structure classes only
  bool has_mask = false;
  std::uint64_t seed = 0;
};

namespace detail {

using Color = std::array<double, 3>;

inline double mask_fraction(const std::vector<double>& m) {
  double s = 0.0;
  for (double v : m) s += v;
  return s / static_cast<double>(m.size());
}

// Inside test for each silhouette in unit coordinates (u, v) in [0, 1]^2.
struct ShapeParams {
  double cx, cy, r;
};

inline bool inside_bag(double u, double v, const ShapeParams& p, double px) {
  const double by = p.cy + 0.08;
  const double du = u - p.cx, dv = v - by;
  if (du * du + dv * dv <= p.r * p.r) return true;
  // Handle: upper half of a ring whose horizontal diameter lies inside the body.
  const double hy = by - 0.7 * p.r;
  const double ro = 0.6 * p.r;
  const double ri = ro - std::max(0.18 * p.r, 2.2 * px);
  const double hu = u - p.cx, hv = v - hy;
  const double d2 = hu * hu + hv * hv;
  return hv <= 0.0 && d2 <= ro * ro && d2 >= ri * ri;
}

inline bool inside_phone(double u, double v, const ShapeParams& p) {
  const double a = p.r, b = 1.9 * p.r, rc = 0.3 * p.r;
  const double du = std::abs(u - p.cx), dv = std::abs(v - p.cy);
  if (du > a || dv > b) return false;
  const double qu = du - (a - rc), qv = dv - (b - rc);
  if (qu <= 0.0 || qv <= 0.0) return true;
  return qu * qu + qv * qv <= rc * rc;
}

inline bool inside_pillow(double u, double v, const ShapeParams& p) {
  const double a = p.r, b = 0.7 * p.r;
  const double x = (u - p.cx) / a, y = (v - p.cy) / b;
  return x * x * x * x + y * y * y * y <= 1.0;
}

inline bool inside_cup(double u, double v, const ShapeParams& p, double px) {
  const double h = p.r;
  const double dv = v - p.cy;
  if (std::abs(dv) <= h) {
    const double frac = (dv + h) / (2.0 * h);  // 0 at the rim, 1 at the base
    const double half_w = 0.8 * h + (0.65 * h - 0.8 * h) * frac;
    if (std::abs(u - p.cx) <= half_w) return true;
  }
  const double mid_w = 0.725 * h;
  const double hu = u - (p.cx + mid_w), hv = v - p.cy;
  const double ro = 0.45 * h;
  const double ri = ro - std::max(0.14 * h, 2.2 * px);
  const double d2 = hu * hu + hv * hv;
  return hu >= 0.0 && d2 <= ro * ro && d2 >= ri * ri;
}

inline Color random_color(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

}  // namespace detail

inline SynthSample gen_structure(std::uint64_t seed, int class_id, std::size_t size = 32) {
  if (!is_structure_class(class_id)) {
    throw std::invalid_argument("gen_structure: class id " + std::to_string(class_id) + " is not a shape class");
  }
  if (size < 8) throw std::invalid_argument("gen_structure: image size must be >= 8");
  Rng rng(derive_seed(seed, 0x5700 + static_cast<std::uint64_t>(class_id)));
  const double px = 1.0 / static_cast<double>(size);
  std::vector<double> mask(size * size);
  for (int attempt = 0;; ++attempt) {
    detail::ShapeParams p{};
    p.cx = rng.uniform(0.42, 0.58);
    p.cy = rng.uniform(0.42, 0.58);
    switch (class_id) {
      case 0: p.r = rng.uniform(0.27, 0.33); break;
      case 1: p.r = rng.uniform(0.17, 0.21); break;
      case 2: p.r = rng.uniform(0.36, 0.44); break;
      default: p.r = rng.uniform(0.27, 0.32); break;
    }
    if (class_id == 0) p.cy -= 0.04;
    if (class_id == 3) p.cx -= 0.06;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double u = (static_cast<double>(x) + 0.5) * px, v = (static_cast<double>(y) + 0.5) * px;
        bool in = false;
        switch (class_id) {
          case 0: in = detail::inside_bag(u, v, p, px); break;
          case 1: in = detail::inside_phone(u, v, p); break;
          case 2: in = detail::inside_pillow(u, v, p); break;
          default: in = detail::inside_cup(u, v, p, px); break;
        }
        mask[y * size + x] = in ? 1.0 : 0.0;
      }
    const double f = detail::mask_fraction(mask);
    if ((f >= 0.1 && f <= 0.7) || attempt > 64) break;
  }

  // Light, slightly tinted backdrop; dark saturated object with a soft
  // vertical shading ramp.
  const double grey = rng.uniform(0.55, 0.85);
  detail::Color bg{};
  for (double& c : bg) c = std::clamp(grey + rng.uniform(-0.1, 0.1), 0.35, 0.95);
  const detail::Color fg = detail::random_color(rng, -0.95, -0.45);
  const double shade = rng.uniform(0.0, 0.1);
  std::vector<double> img(3 * size * size);
  for (std::size_t y = 0; y < size; ++y) {
    const double ramp = shade * (2.0 * (static_cast<double>(y) + 0.5) * px - 1.0);
    for (std::size_t x = 0; x < size; ++x) {
      const bool in = mask[y * size + x] > 0.5;
      for (std::size_t c = 0; c < 3; ++c) {
        img[(c * size + y) * size + x] = in ? std::clamp(fg[c] + ramp, -1.0, 1.0) : bg[c];
      }
    }
  }
  SynthSample s;
  s.image = Tensor(Shape{3, size, size}, std::move(img));
  s.gt_mask = Tensor(Shape{size, size}, std::move(mask));
  s.has_mask = true;
  s.label = class_id;
  s.seed = seed;
  return s;
}

inline SynthSample gen_appearance(std::uint64_t seed, int texture_id, std::size_t size = 32) {
  if (texture_id < 4 || texture_id >= kNumSynthClasses) {
    throw std::invalid_argument("gen_appearance: class id " + std::to_string(texture_id) + " is not a texture");
  }
  Rng rng(derive_seed(seed, 0x7E00 + static_cast<std::uint64_t>(texture_id)));
  detail::Color c1{}, c2{};
  do {
    c1 = detail::random_color(rng, -0.1, 0.95);
    c2 = detail::random_color(rng, -0.1, 0.95);
  } while (std::max({std::abs(c1[0] - c2[0]), std::abs(c1[1] - c2[1]), std::abs(c1[2] - c2[2])}) < 0.6);

  constexpr std::array<std::size_t, 4> periods = {4, 5, 6, 8};
  const std::size_t period = periods[rng.index(periods.size())];
  const std::size_t phase = rng.index(period);
  const double wave_len = rng.uniform(6.0, 12.0);
  const double wave_amp = rng.uniform(0.5, 2.0);
  const double wave_rows = rng.uniform(10.0, 20.0);
  const double dot_off_x = rng.uniform(0.0, 8.0), dot_off_y = rng.uniform(0.0, 8.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;

  std::vector<double> img(3 * size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double t = 0.0;  // blend weight of c1
      switch (texture_id) {
        case 4: t = ((x + phase) % period) < period / 2 ? 1.0 : 0.0; break;
        case 5: {
          const double sp = static_cast<double>(period) + 2.0;
          const double fx = std::fmod(static_cast<double>(x) + dot_off_x, sp) - 0.5 * sp;
          const double fy = std::fmod(static_cast<double>(y) + dot_off_y, sp) - 0.5 * sp;
          t = fx * fx + fy * fy <= (0.3 * sp) * (0.3 * sp) ? 1.0 : 0.0;
          break;
        }
        case 6: {
          const double ph = two_pi * static_cast<double>(x) / wave_len +
                            wave_amp * std::sin(two_pi * static_cast<double>(y) / wave_rows);
          t = 0.5 * (1.0 + std::sin(ph));
          break;
        }
        default: t = (((x + phase) / period) + ((y + phase) / period)) % 2 == 0 ? 1.0 : 0.0; break;
      }
      for (std::size_t c = 0; c < 3; ++c) img[(c * size + y) * size + x] = t * c1[c] + (1.0 - t) * c2[c];
    }
  SynthSample s;
  s.image = Tensor(Shape{3, size, size}, std::move(img));
  s.label = texture_id;
  s.seed = seed;
  return s;
}

inline SynthSample gen_sample(std::uint64_t seed, int class_id, std::size_t size = 32) {
  if (class_id < 0 || class_id >= kNumSynthClasses) throw std::invalid_argument("unknown synthetic class id");
  return is_structure_class(class_id) ? gen_structure(seed, class_id, size) : gen_appearance(seed, class_id, size);
}

// n_per_class samples of each of the eight classes, in a seeded shuffled order.
inline std::vector<SynthSample> gen_dataset(std::size_t n_per_class, std::uint64_t seed, std::size_t size = 32) {
  if (n_per_class < 1) throw std::invalid_argument("gen_dataset: n_per_class must be >= 1");
  std::vector<SynthSample> out;
  out.reserve(n_per_class * kNumSynthClasses);
  for (int c = 0; c < kNumSynthClasses; ++c)
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(c) * 1000003ULL + i) % 1000000000ULL;
      out.push_back(gen_sample(s, c, size));
    }
  Rng rng(derive_seed(seed, 0xD5));
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.index(i)]);
  return out;
}

}  // namespace atx
