#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "ntg/error.hpp"
#include "ntg/grid.hpp"

namespace ntg::metrics {

namespace detail {
inline void require_single_channel_pair(const Grid& a, const Grid& b, const char* what) {
  require_same_shape(a, b, what);
  if (a.channels() != 1) throw ShapeError(std::string(what) + ": expected single-channel images");
}
}  // namespace detail

/// [0,1] image -> 8-bit scale: clamp, x255, round half to even.
inline Grid to_8bit(const Grid& g) {
  Grid out = g;
  for (double& v : out.values()) v = std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0);
  return out;
}

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size * size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double sum = 0.0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
      w[y * size + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      sum += w[y * size + x];
    }
  for (double& v : w) v /= sum;
  return w;
}

/// Mean SSIM over all valid positions of an 11x11 Gaussian window
/// (sigma 1.5), c1 = (0.01 * 255)^2, c2 = (0.03 * 255)^2, for images on the
/// 0..255 scale. Images smaller than the window use the largest odd window
/// that fits.
inline double ssim(const Grid& x, const Grid& y) {
  detail::require_single_channel_pair(x, y, "ssim");
  constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  std::size_t win = std::min<std::size_t>({11, x.height(), x.width()});
  if (win % 2 == 0) --win;
  const std::vector<double> w = gaussian_window(win, 1.5);
  const std::size_t ny = x.height() - win + 1, nx = x.width() - win + 1;
  double total = 0.0;
  for (std::size_t py = 0; py < ny; ++py)
    for (std::size_t px = 0; px < nx; ++px) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t dy = 0; dy < win; ++dy)
        for (std::size_t dx = 0; dx < win; ++dx) {
          const double wt = w[dy * win + dx];
          const double a = x(0, py + dy, px + dx), b = y(0, py + dy, px + dx);
          mx += wt * a;
          my += wt * b;
          sxx += wt * a * a;
          syy += wt * b * b;
          sxy += wt * a * b;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
      total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return total / static_cast<double>(ny * nx);
}

/// Mean squared error.
inline double mse(const Grid& g, const Grid& t) {
  require_same_shape(g, t, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += (g[i] - t[i]) * (g[i] - t[i]);
  return s / static_cast<double>(g.size());
}

/// 20 log10(max_f / sqrt(mse)); +inf when mse is zero.
inline double psnr_from_mse(double mse_value, double max_f = 255.0) {
  if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(max_f / std::sqrt(mse_value));
}

inline double psnr(const Grid& g, const Grid& t, double max_f = 255.0) { return psnr_from_mse(mse(g, t), max_f); }

/// 256-bin intensity histogram; bin k covers [k, k+1), the last bin is closed.
inline std::array<double, 256> histogram(const Grid& g) {
  std::array<double, 256> h{};
  for (double v : g.values()) {
    const double c = std::clamp(v, 0.0, 255.0);
    h[std::min<std::size_t>(255, static_cast<std::size_t>(c))] += 1.0;
  }
  return h;
}

/// Pearson correlation of the two histograms. If either histogram is flat:
/// 1 when they are equal, else 0.
inline double histogram_correlation(const Grid& a, const Grid& b) {
  const auto ha = histogram(a), hb = histogram(b);
  const double ma = std::accumulate(ha.begin(), ha.end(), 0.0) / 256.0;
  const double mb = std::accumulate(hb.begin(), hb.end(), 0.0) / 256.0;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t k = 0; k < 256; ++k) {
    cov += (ha[k] - ma) * (hb[k] - mb);
    va += (ha[k] - ma) * (ha[k] - ma);
    vb += (hb[k] - mb) * (hb[k] - mb);
  }
  if (va == 0.0 || vb == 0.0) return ha == hb ? 1.0 : 0.0;
  if (ha == hb) return 1.0;
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

struct MetricRow {
  std::string id;
  double ssim = 0;
  double mse = 0;
  double psnr = 0;
  double histcorr = 0;
};

inline MetricRow evaluate(const std::string& id, const Grid& output8, const Grid& target8) {
  detail::require_single_channel_pair(output8, target8, "evaluate");
  const double m = mse(output8, target8);
  return {id, ssim(output8, target8), m, psnr_from_mse(m), histogram_correlation(output8, target8)};
}

struct Summary {
  double mean = 0;
  double median = 0;
  double q1 = 0;
  double q3 = 0;
  std::vector<std::size_t> outliers;  // indices into the input sequence
};

namespace detail {
/// Linear-interpolated quantile of sorted values at fraction q.
inline double quantile_sorted(const std::vector<double>& s, double q) {
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0 || s[lo] == s[hi]) return s[lo];
  return s[lo] + (s[hi] - s[lo]) * frac;
}
}  // namespace detail

/// Mean, median, quartiles and 1.5 IQR outliers of one metric column.
inline Summary summarize(const std::vector<double>& values) {
  if (values.empty()) throw ArgumentError("summarize: no rows");
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  Summary s;
  // Sum in sorted order so the result does not depend on row order.
  s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
  s.median = detail::quantile_sorted(sorted, 0.5);
  s.q1 = detail::quantile_sorted(sorted, 0.25);
  s.q3 = detail::quantile_sorted(sorted, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo = s.q1 - 1.5 * iqr, hi = s.q3 + 1.5 * iqr;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] < lo || values[i] > hi) s.outliers.push_back(i);
  }
  return s;
}

}  // namespace ntg::metrics
