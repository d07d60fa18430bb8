#include <gtest/gtest.h>

#include <map>
#include <queue>
#include <sstream>

#include "support/oracles.hpp"

using namespace atx;

namespace {

std::size_t components4(const Tensor& mask) {
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  std::vector<int> seen(h * w, 0);
  std::size_t count = 0;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (mask[start] < 0.5 || seen[start]) continue;
    ++count;
    std::queue<std::size_t> q;
    q.push(start);
    seen[start] = 1;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop();
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t n) {
        if (mask[n] >= 0.5 && !seen[n]) {
          seen[n] = 1;
          q.push(n);
        }
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
    }
  }
  return count;
}

double fraction(const Tensor& m) {
  double s = 0.0;
  for (double v : m.data()) s += v;
  return s / static_cast<double>(m.size());
}

}  // namespace

TEST(Synth, StructureIsDeterministic) {
  for (int c = 0; c < 4; ++c) {
    const SynthSample a = gen_structure(42, c), b = gen_structure(42, c);
    EXPECT_EQ(a.image.values(), b.image.values());
    EXPECT_EQ(a.gt_mask.values(), b.gt_mask.values());
    EXPECT_TRUE(a.has_mask);
    EXPECT_EQ(a.label, c);
    EXPECT_NE(a.image.values(), gen_structure(43, c).image.values());
  }
}

TEST(Synth, UnknownClassesRejected) {
  EXPECT_THROW(gen_structure(1, 4), std::invalid_argument);
  EXPECT_THROW(gen_structure(1, -1), std::invalid_argument);
  EXPECT_THROW(gen_appearance(1, 3), std::invalid_argument);
  EXPECT_THROW(gen_appearance(1, 8), std::invalid_argument);
  EXPECT_THROW(synth_class_id("fish"), std::invalid_argument);
  EXPECT_EQ(synth_class_id("cup"), 3);
  EXPECT_EQ(synth_class_name(6), "waves");
}

TEST(Synth, MaskFractionWithinBoundsForManySeeds) {
  for (int c = 0; c < 4; ++c)
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const double f = fraction(gen_structure(seed, c).gt_mask);
      ASSERT_GE(f, 0.1) << "class " << c << " seed " << seed;
      ASSERT_LE(f, 0.7) << "class " << c << " seed " << seed;
    }
}

TEST(Synth, BagIsOneFourConnectedComponent) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    ASSERT_EQ(components4(gen_structure(seed, 0).gt_mask), 1u) << seed;
  }
}

TEST(Synth, ForegroundDiffersFromBackground) {
  for (int c = 0; c < 4; ++c)
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const SynthSample s = gen_structure(seed, c);
      const std::size_t n = s.gt_mask.size();
      std::size_t bg = n;
      for (std::size_t p = 0; p < n && bg == n; ++p)
        if (s.gt_mask[p] < 0.5) bg = p;
      ASSERT_LT(bg, n);
      for (std::size_t p = 0; p < n; ++p) {
        if (s.gt_mask[p] < 0.5) continue;
        double linf = 0.0;
        for (std::size_t ch = 0; ch < 3; ++ch) linf = std::max(linf, std::abs(s.image[ch * n + p] - s.image[ch * n + bg]));
        ASSERT_GT(linf, 0.2) << "class " << c << " seed " << seed;
      }
    }
}

TEST(Synth, AppearanceDeterministicMaskFreeAndInRange) {
  for (int c = 4; c < 8; ++c) {
    const SynthSample a = gen_appearance(7, c), b = gen_appearance(7, c);
    EXPECT_EQ(a.image.values(), b.image.values());
    EXPECT_FALSE(a.has_mask);
    for (double v : a.image.data()) {
      ASSERT_GE(v, -1.0);
      ASSERT_LE(v, 1.0);
    }
  }
  for (int c = 0; c < 4; ++c) {
    const Tensor img = gen_structure(7, c).image;
    for (double v : img.data()) {
      ASSERT_GE(v, -1.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Synth, StripesAutocorrelateAtTheirPeriod) {
  // Find the period from the first row, then correlate each row with itself
  // shifted by that period.
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const SynthSample s = gen_appearance(seed, 4);
    const std::size_t w = 32;
    double best = -2.0;
    for (std::size_t lag = 3; lag <= 10; ++lag) {
      double num = 0.0, da = 0.0, db = 0.0, ma = 0.0, mb = 0.0;
      const std::size_t m = w - lag;
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < m; ++x) {
          ma += s.image[y * w + x];
          mb += s.image[y * w + x + lag];
        }
      ma /= static_cast<double>(32 * m);
      mb /= static_cast<double>(32 * m);
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < m; ++x) {
          const double a = s.image[y * w + x] - ma, b = s.image[y * w + x + lag] - mb;
          num += a * b;
          da += a * a;
          db += b * b;
        }
      best = std::max(best, num / std::sqrt(da * db));
    }
    EXPECT_GT(best, 0.8) << seed;
  }
}

TEST(Synth, DatasetCountBalanceAndOrder) {
  const auto a = gen_dataset(2, 5, 16);
  EXPECT_EQ(a.size(), 16u);
  std::map<int, int> hist;
  for (const auto& s : a) ++hist[s.label];
  EXPECT_EQ(hist.size(), 8u);
  for (const auto& [label, n] : hist) EXPECT_EQ(n, 2) << label;
  const auto b = gen_dataset(2, 5, 16);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_EQ(a[i].seed, b[i].seed);
    EXPECT_EQ(a[i].image.values(), b[i].image.values());
  }
  std::vector<int> order;
  for (const auto& s : a) order.push_back(s.label);
  EXPECT_FALSE(std::is_sorted(order.begin(), order.end()));
  EXPECT_THROW(gen_dataset(0, 1), std::invalid_argument);
}

TEST(Synth, ImagesRoundTripTheCodec) {
  for (int c = 0; c < 8; ++c) {
    const SynthSample s = gen_sample(100 + static_cast<std::uint64_t>(c), c);
    std::stringstream ss;
    write_image(ss, s.image);
    const Tensor back = read_image(ss);
    ASSERT_EQ(back.shape(), s.image.shape());
    for (std::size_t i = 0; i < back.size(); ++i) ASSERT_LE(std::abs(back[i] - s.image[i]), 1.0 / 255.0 + 1e-12);
  }
}
