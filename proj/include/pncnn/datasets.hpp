#pragma once
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "errors.hpp"
#include "idx.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "special.hpp"
#include "tensor.hpp"

namespace pncnn {

namespace detail {

struct Pt {
  double x, y;
};

using Stroke = std::vector<Pt>;

inline void add_arc(std::vector<Stroke>& strokes, double cx, double cy, double rx, double ry,
                    double th0, double th1) {
  Stroke s;
  const int steps = 40;
  for (int i = 0; i <= steps; ++i) {
    const double th = th0 + (th1 - th0) * i / steps;
    s.push_back({cx + rx * std::cos(th), cy + ry * std::sin(th)});
  }
  strokes.push_back(std::move(s));
}

// stroke skeletons on a unit canvas, y pointing down
inline std::vector<Stroke> digit_strokes(int digit) {
  std::vector<Stroke> s;
  switch (digit) {
    case 0:
      add_arc(s, 0.5, 0.5, 0.21, 0.3, 0.0, kTwoPi);
      break;
    case 1:
      s.push_back({{0.40, 0.28}, {0.54, 0.18}, {0.54, 0.82}});
      break;
    case 2:
      add_arc(s, 0.5, 0.36, 0.20, 0.17, -3.14159, 0.45);
      s.push_back({{0.68, 0.43}, {0.30, 0.82}, {0.73, 0.82}});
      break;
    case 3:
      add_arc(s, 0.48, 0.35, 0.20, 0.16, -2.7, 1.3);
      add_arc(s, 0.48, 0.65, 0.21, 0.17, -1.3, 2.7);
      break;
    case 4:
      s.push_back({{0.60, 0.18}, {0.30, 0.58}, {0.76, 0.58}});
      s.push_back({{0.63, 0.36}, {0.63, 0.84}});
      break;
    case 5:
      s.push_back({{0.70, 0.18}, {0.37, 0.18}, {0.35, 0.45}});
      add_arc(s, 0.49, 0.61, 0.20, 0.19, -1.5, 2.4);
      break;
    case 6:
      add_arc(s, 0.50, 0.63, 0.19, 0.19, 0.0, kTwoPi);
      s.push_back({{0.60, 0.17}, {0.44, 0.38}, {0.35, 0.58}});
      break;
    case 7:
      s.push_back({{0.28, 0.18}, {0.73, 0.18}, {0.44, 0.84}});
      break;
    case 8:
      add_arc(s, 0.50, 0.34, 0.16, 0.15, 0.0, kTwoPi);
      add_arc(s, 0.50, 0.66, 0.19, 0.17, 0.0, kTwoPi);
      break;
    case 9:
      add_arc(s, 0.50, 0.37, 0.17, 0.16, 0.0, kTwoPi);
      s.push_back({{0.66, 0.40}, {0.63, 0.84}});
      break;
    default:
      throw ShapeMismatch("digit out of range");
  }
  return s;
}

inline double seg_dist2(Pt p, Pt a, Pt b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = p.x - (a.x + t * dx), ey = p.y - (a.y + t * dy);
  return ex * ex + ey * ey;
}

}  // namespace detail

// grayscale glyph on the 0..255 scale with random affine jitter
inline Tensor render_digit(int digit, std::size_t h, std::size_t w, Rng& rng) {
  std::vector<detail::Stroke> strokes = detail::digit_strokes(digit);
  const double th = -0.12 + 0.24 * rng.uniform();
  const double sx = 0.85 + 0.25 * rng.uniform(), sy = 0.85 + 0.25 * rng.uniform();
  const double tx = -0.06 + 0.12 * rng.uniform(), ty = -0.06 + 0.12 * rng.uniform();
  const double c = std::cos(th), s = std::sin(th);
  for (detail::Stroke& st : strokes)
    for (detail::Pt& p : st) {
      const double ux = sx * (p.x - 0.5), uy = sy * (p.y - 0.5);
      p = {0.5 + c * ux - s * uy + tx, 0.5 + s * ux + c * uy + ty};
    }
  const double sigma = 0.045 + 0.02 * rng.uniform();
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  Tensor img{{h, w}};
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col) {
      const detail::Pt p{(col + 0.5) / static_cast<double>(w),
                         (r + 0.5) / static_cast<double>(h)};
      double best = 1e300;
      for (const detail::Stroke& st : strokes)
        for (std::size_t i = 0; i + 1 < st.size(); ++i)
          best = std::min(best, detail::seg_dist2(p, st[i], st[i + 1]));
      img(r, col) = 255.0 * std::exp(-best * inv2s2);
    }
  return img;
}

struct RawDigits {
  std::vector<std::uint8_t> images_idx;
  std::vector<std::uint8_t> labels_idx;
};

// round-robin labels; every sample is jittered by its own substream so any
// index range is a seed-stable, disjoint split
inline RawDigits render_digits_idx(std::size_t count, std::size_t h, std::size_t w,
                                   std::uint64_t seed) {
  IdxData images, labels;
  images.shape = {count, h, w};
  images.data.reserve(count * h * w);
  labels.shape = {count};
  const Rng root(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const int digit = static_cast<int>(i % 10);
    Rng rng = root.substream(i);
    const Tensor img = render_digit(digit, h, w, rng);
    for (std::size_t j = 0; j < img.numel(); ++j)
      images.data.push_back(static_cast<std::uint8_t>(std::lround(img[j])));
    labels.data.push_back(static_cast<std::uint8_t>(digit));
  }
  return RawDigits{write_idx(images), write_idx(labels)};
}

enum class SubsampleMode { kUniform, kIntensity };

// n distinct pixel centers of a 0..255 grayscale image, mapped to [0,1]^2
// with values scaled to [0,1]; intensity weighting is (value + 1)
inline ObservedField subsample_superpixels(const Tensor& image, std::size_t n_points,
                                           SubsampleMode mode, Rng& rng) {
  check_shape(image.rank() == 2, "subsample_superpixels wants an H x W image");
  const std::size_t h = image.dim(0), w = image.dim(1), total = h * w;
  if (n_points > total) throw TooManyPoints("more sample points than pixels");

  std::vector<std::size_t> chosen;
  if (mode == SubsampleMode::kUniform) {
    std::vector<std::size_t> idx(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    rng.shuffle(idx);
    chosen.assign(idx.begin(), idx.begin() + n_points);
  } else {
    std::vector<double> weight(total);
    double left = 0.0;
    for (std::size_t i = 0; i < total; ++i) {
      weight[i] = image[i] + 1.0;
      left += weight[i];
    }
    for (std::size_t k = 0; k < n_points; ++k) {
      double u = rng.uniform() * left;
      std::size_t pick = 0;
      for (std::size_t i = 0; i < total; ++i) {
        if (weight[i] <= 0.0) continue;
        u -= weight[i];
        pick = i;
        if (u < 0.0) break;
      }
      chosen.push_back(pick);
      left -= weight[pick];
      weight[pick] = 0.0;
    }
  }

  ObservedField f;
  f.X = Tensor{{n_points, 2}};
  f.Y = Tensor{{n_points, 1}};
  f.V = Tensor{{n_points, 1}};
  for (std::size_t i = 0; i < n_points; ++i) {
    const std::size_t r = chosen[i] / w, col = chosen[i] % w;
    f.X(i, 0) = (col + 0.5) / static_cast<double>(w);
    f.X(i, 1) = (r + 0.5) / static_cast<double>(h);
    f.Y(i, 0) = image[chosen[i]] / 255.0;
  }
  return f;
}

struct TimeseriesConfig {
  std::size_t channels = 2;
  std::size_t obs_per_channel = 10;
  std::size_t statics = 0;  // fully observed constant channels
  double p_positive = 0.5;
};

// Irregular multichannel series on a union grid. The label sets the sign of a
// shared linear trend, slope +-1.8 over [0,1], under a per-channel sinusoid
// (amplitude 0.4) plus 0.05 observation noise, so the trend sign stays
// decodable from a handful of points per channel. Each dynamic channel keeps
// its own sorted times; rows it does not observe carry the missing sentinel.
inline Sample gen_timeseries(const TimeseriesConfig& cfg, Rng& rng) {
  check_shape(cfg.channels >= 1, "gen_timeseries wants a dynamic channel");
  check_shape(cfg.obs_per_channel >= 2, "gen_timeseries wants at least 2 points per channel");
  const int label = rng.uniform() < cfg.p_positive ? 1 : 0;
  const double slope = label == 1 ? 1.8 : -1.8;

  struct Row {
    double t;
    std::size_t chan;
    double value;
  };
  std::vector<Row> rows;
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    const double freq = 0.8 + 0.8 * rng.uniform();
    const double phase = rng.uniform();
    const double base = -0.3 + 0.6 * rng.uniform();
    for (std::size_t i = 0; i < cfg.obs_per_channel; ++i) {
      const double t = rng.uniform();
      const double v = slope * (t - 0.5) + 0.4 * std::sin(kTwoPi * (freq * t + phase)) + base +
                       0.05 * rng.gaussian();
      rows.push_back({t, c, v});
    }
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.t < b.t; });

  const std::size_t n = rows.size(), ctotal = cfg.channels + cfg.statics;
  Sample out;
  out.label = label;
  out.field.X = Tensor{{n, 1}};
  out.field.Y = Tensor{{n, ctotal}};
  out.field.V = Tensor{{n, ctotal}, kMissingVar};
  std::vector<double> static_value(cfg.statics);
  for (double& v : static_value) v = -1.0 + 2.0 * rng.uniform();
  for (std::size_t i = 0; i < n; ++i) {
    out.field.X(i, 0) = rows[i].t;
    out.field.Y(i, rows[i].chan) = rows[i].value;
    out.field.V(i, rows[i].chan) = 0.0;
    for (std::size_t s = 0; s < cfg.statics; ++s) {
      out.field.Y(i, cfg.channels + s) = static_value[s];
      out.field.V(i, cfg.channels + s) = 0.0;
    }
  }
  return out;
}

}  // namespace pncnn
