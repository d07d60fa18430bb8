#pragma once

#include "atx/mask_gen.hpp"

namespace atx {

namespace detail {

inline std::vector<double> color_histogram(const Tensor& img, const Tensor* mask, std::size_t bins) {
  if (img.ndim() != 3 || img.dim(0) != 3) throw ShapeError("cdh: expected [3, h, w] image, got " + shape_str(img.shape()));
  const std::size_t n = img.dim(1) * img.dim(2);
  std::vector<double> hist(bins * bins * bins, 0.0);
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    if (mask && (*mask)[p] < 0.5) continue;
    std::size_t cell = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double u = std::clamp((img[c * n + p] + 1.0) * 0.5, 0.0, 1.0);
      const std::size_t b = std::min(bins - 1, static_cast<std::size_t>(u * static_cast<double>(bins)));
      cell = cell * bins + b;
    }
    hist[cell] += 1.0;
    total += 1.0;
  }
  if (total == 0.0) throw std::invalid_argument("cdh: no pixels selected");
  for (double& v : hist) v /= total;
  return hist;
}

inline double tv_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

}  // namespace detail

// Colour-histogram distance: each image is quantized to bins^3 RGB cells and
// the total-variation distance between the normalized histograms returned.
inline double cdh_distance(const Tensor& a, const Tensor& b, std::size_t bins = 4) {
  if (bins < 2) throw std::invalid_argument("cdh_distance: bins_per_channel must be >= 2");
  detail::require_same("cdh_distance", a, b);
  return detail::tv_distance(detail::color_histogram(a, nullptr, bins), detail::color_histogram(b, nullptr, bins));
}

// Same distance restricted to the pixels where `mask` [h, w] is set, in both images.
inline double cdh_distance_masked(const Tensor& a, const Tensor& b, const Tensor& mask, std::size_t bins = 4) {
  if (bins < 2) throw std::invalid_argument("cdh_distance: bins_per_channel must be >= 2");
  detail::require_same("cdh_distance", a, b);
  if (mask.ndim() != 2 || mask.dim(0) != a.dim(1) || mask.dim(1) != a.dim(2)) {
    throw ShapeError("cdh_distance_masked: mask " + shape_str(mask.shape()) + " does not match image " + shape_str(a.shape()));
  }
  return detail::tv_distance(detail::color_histogram(a, &mask, bins), detail::color_histogram(b, &mask, bins));
}

// Intersection over union of two binary [h, w] maps; two empty masks give 1.
inline double mask_iou(const Tensor& a, const Tensor& b) {
  detail::require_same("mask_iou", a, b);
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] >= 0.5, y = b[i] >= 0.5;
    inter += (x && y) ? 1.0 : 0.0;
    uni += (x || y) ? 1.0 : 0.0;
  }
  return uni == 0.0 ? 1.0 : inter / uni;
}

inline double mask_iou(const Mask& a, const Mask& b) { return mask_iou(a.binary, b.binary); }

// Mean |a - b| over the pixels where `region` [h, w] is set (all channels).
inline double mean_abs_diff(const Tensor& a, const Tensor& b, const Tensor& region) {
  detail::require_same("mean_abs_diff", a, b);
  const std::size_t c = a.dim(0), n = a.dim(1) * a.dim(2);
  double s = 0.0, cnt = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    if (region[p] < 0.5) continue;
    for (std::size_t ch = 0; ch < c; ++ch) s += std::abs(a[ch * n + p] - b[ch * n + p]);
    cnt += static_cast<double>(c);
  }
  if (cnt == 0.0) throw std::invalid_argument("mean_abs_diff: empty region");
  return s / cnt;
}

// Cross-entropy of a classifier's logits against `label`. `logits_fn` maps an
// image to logits [1, k] (or [k]).
template <class LogitsFn>
double classifier_loss(const LogitsFn& logits_fn, const Tensor& image, int label) {
  Tensor logits = logits_fn(image);
  if (logits.ndim() == 1) logits = logits.reshaped_copy({1, logits.dim(0)});
  if (label < 0 || static_cast<std::size_t>(label) >= logits.dim(1)) {
    throw std::out_of_range("classifier_loss: label " + std::to_string(label) + " out of range");
  }
  return cross_entropy(logits.detach(), {label}).item();
}

}  // namespace atx
