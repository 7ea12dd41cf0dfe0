#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ntg/error.hpp"
#include "ntg/parallel.hpp"

namespace ntg {

struct Shape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;

  std::string to_string() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
};

/// Dense channels x height x width array, row-major within each channel plane.
template <class T>
class BasicGrid {
 public:
  using value_type = T;

  BasicGrid() = default;

  BasicGrid(std::size_t channels, std::size_t height, std::size_t width, T fill = T{})
      : shape_{channels, height, width} {
    check_dims();
    data_.assign(shape_.size(), fill);
  }

  BasicGrid(std::size_t channels, std::size_t height, std::size_t width, std::vector<T> data)
      : shape_{channels, height, width}, data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_.size()) {
      throw ShapeError("grid data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.to_string());
    }
  }

  explicit BasicGrid(Shape shape, T fill = T{}) : BasicGrid(shape.channels, shape.height, shape.width, fill) {}

  std::size_t channels() const { return shape_.channels; }
  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  std::size_t plane_size() const { return shape_.height * shape_.width; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }

  T& operator()(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * shape_.height + y) * shape_.width + x]; }
  const T& operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_.height + y) * shape_.width + x];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() & { return data_; }
  std::span<const T> values() const& { return data_; }
  std::span<const T> values() && = delete;  // would dangle
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  std::span<T> plane(std::size_t c) { return std::span<T>(data_).subspan(c * plane_size(), plane_size()); }
  std::span<const T> plane(std::size_t c) const {
    return std::span<const T>(data_).subspan(c * plane_size(), plane_size());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const BasicGrid& other) const = default;

 private:
  void check_dims() const {
    if (shape_.channels == 0 || shape_.height == 0 || shape_.width == 0) {
      throw ShapeError("grid dimensions must be positive, got " + shape_.to_string());
    }
  }

  Shape shape_{};
  std::vector<T> data_;
};

using Grid = BasicGrid<double>;
using IndexGrid = BasicGrid<std::int32_t>;

template <class T>
void require_same_shape(const BasicGrid<T>& a, const BasicGrid<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape().to_string() + " vs " + b.shape().to_string());
  }
}

template <class T>
bool all_finite(const BasicGrid<T>& g) {
  return std::all_of(g.values().begin(), g.values().end(), [](T v) { return std::isfinite(v); });
}

// Elementwise helpers. All return new grids.

template <class T>
BasicGrid<T> add(const BasicGrid<T>& a, const BasicGrid<T>& b) {
  require_same_shape(a, b, "add");
  BasicGrid<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
BasicGrid<T> subtract(const BasicGrid<T>& a, const BasicGrid<T>& b) {
  require_same_shape(a, b, "subtract");
  BasicGrid<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <class T>
BasicGrid<T> multiply(const BasicGrid<T>& a, const BasicGrid<T>& b) {
  require_same_shape(a, b, "multiply");
  BasicGrid<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

/// alpha * g + beta, elementwise.
template <class T>
BasicGrid<T> affine(const BasicGrid<T>& g, T alpha, T beta = T{}) {
  BasicGrid<T> out = g;
  for (auto& v : out.values()) v = alpha * v + beta;
  return out;
}

template <class T>
BasicGrid<T> relu(const BasicGrid<T>& g) {
  BasicGrid<T> out = g;
  for (auto& v : out.values()) v = v > T{} ? v : T{};
  return out;
}

template <class T>
BasicGrid<T> clamp(const BasicGrid<T>& g, T lo, T hi) {
  BasicGrid<T> out = g;
  for (auto& v : out.values()) v = std::clamp(v, lo, hi);
  return out;
}

/// Multiplies every channel of `g` by the single-channel `map`.
template <class T>
BasicGrid<T> multiply_by_map(const BasicGrid<T>& g, const BasicGrid<T>& map) {
  if (map.channels() != 1 || map.height() != g.height() || map.width() != g.width()) {
    throw ShapeError("multiply_by_map: map " + map.shape().to_string() + " incompatible with " + g.shape().to_string());
  }
  BasicGrid<T> out = g;
  const std::size_t plane = g.plane_size();
  for (std::size_t c = 0; c < g.channels(); ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] *= map[i];
  return out;
}

/// Channel-wise concatenation; a's planes come first.
template <class T>
BasicGrid<T> concat_channels(const BasicGrid<T>& a, const BasicGrid<T>& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("concat_channels: spatial mismatch " + a.shape().to_string() + " vs " + b.shape().to_string());
  }
  std::vector<T> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.values().begin(), a.values().end());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return BasicGrid<T>(a.channels() + b.channels(), a.height(), a.width(), std::move(data));
}

/// Planes [first, first + count) of g.
template <class T>
BasicGrid<T> slice_channels(const BasicGrid<T>& g, std::size_t first, std::size_t count) {
  if (count == 0 || first + count > g.channels()) {
    throw ShapeError("slice_channels: range [" + std::to_string(first) + ", " + std::to_string(first + count) +
                     ") outside " + g.shape().to_string());
  }
  auto begin = g.values().begin() + static_cast<std::ptrdiff_t>(first * g.plane_size());
  std::vector<T> data(begin, begin + static_cast<std::ptrdiff_t>(count * g.plane_size()));
  return BasicGrid<T>(count, g.height(), g.width(), std::move(data));
}

// ---------------------------------------------------------------------------
// Convolution

/// Geometry of a cross-correlation layer with `out` kernels of in x kh x kw.
struct ConvGeometry {
  std::size_t in = 1;
  std::size_t out = 1;
  std::size_t kh = 1;
  std::size_t kw = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t weight_count() const { return out * in * kh * kw; }
  std::size_t patch_length() const { return in * kh * kw; }

  std::size_t out_height(std::size_t h) const { return out_dim(h, kh); }
  std::size_t out_width(std::size_t w) const { return out_dim(w, kw); }

  void validate(const Shape& input) const {
    if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
    if (input.channels != in) {
      throw ShapeError("conv2d: input " + input.to_string() + " has " + std::to_string(input.channels) +
                       " channels but kernels " + kernel_string() + " expect " + std::to_string(in));
    }
    if (input.height + 2 * pad < kh || input.width + 2 * pad < kw) {
      throw ShapeError("conv2d: kernels " + kernel_string() + " do not fit input " + input.to_string() +
                       " with padding " + std::to_string(pad));
    }
  }

  std::string kernel_string() const {
    return std::to_string(out) + "x" + std::to_string(in) + "x" + std::to_string(kh) + "x" + std::to_string(kw);
  }

 private:
  std::size_t out_dim(std::size_t n, std::size_t k) const { return (n + 2 * pad - k) / stride + 1; }
};

namespace detail {
template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace detail

/// Kernel bank of `out` kernels, each in x kh x kw, stored row-major as
/// out, in, kh, kw.
template <class T>
struct BasicKernelBank {
  std::size_t out = 0;
  std::size_t in = 0;
  std::size_t kh = 0;
  std::size_t kw = 0;
  std::vector<T> data;

  BasicKernelBank() = default;
  BasicKernelBank(std::size_t out_, std::size_t in_, std::size_t kh_, std::size_t kw_, T fill = T{})
      : out(out_), in(in_), kh(kh_), kw(kw_), data(out_ * in_ * kh_ * kw_, fill) {}

  T& operator()(std::size_t o, std::size_t i, std::size_t y, std::size_t x) {
    return data[((o * in + i) * kh + y) * kw + x];
  }
  const T& operator()(std::size_t o, std::size_t i, std::size_t y, std::size_t x) const {
    return data[((o * in + i) * kh + y) * kw + x];
  }
};

using KernelBank = BasicKernelBank<double>;

namespace detail {

/// Unfolds input patches into a (in*kh*kw) x (oh*ow) row-major matrix.
template <class T>
void im2col(const T* x, const Shape& s, const ConvGeometry& g, T* cols) {
  const std::size_t oh = g.out_height(s.height), ow = g.out_width(s.width);
  const std::size_t n = oh * ow;
  const auto H = static_cast<std::ptrdiff_t>(s.height), W = static_cast<std::ptrdiff_t>(s.width);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.in; ++c) {
    const T* plane = x + c * s.height * s.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * n;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + ow, T{});
            continue;
          }
          const T* src = plane + iy * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            dst[ox] = (ix < 0 || ix >= W) ? T{} : src[ix];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-and-adds columns back into dx.
template <class T>
void col2im_add(const T* cols, const Shape& s, const ConvGeometry& g, T* dx) {
  const std::size_t oh = g.out_height(s.height), ow = g.out_width(s.width);
  const std::size_t n = oh * ow;
  const auto H = static_cast<std::ptrdiff_t>(s.height), W = static_cast<std::ptrdiff_t>(s.width);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.in; ++c) {
    T* plane = dx + c * s.height * s.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * n;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= H) continue;
          T* dst = plane + iy * W;
          const T* src = row + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

/// out = W * cols (+ bias), split over output columns when threads allow.
template <class T>
void gemm_bias(const T* w, const T* cols, const T* bias, std::size_t m, std::size_t k, std::size_t n, T* out) {
  using Mat = RowMatrix<T>;
  Eigen::Map<const Mat> W(w, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  auto body = [&](std::size_t lo, std::size_t hi) {
    const auto cols_n = static_cast<Eigen::Index>(hi - lo);
    Eigen::Map<const Mat, 0, Eigen::OuterStride<>> X(cols + lo, static_cast<Eigen::Index>(k), cols_n,
                                                     Eigen::OuterStride<>(static_cast<Eigen::Index>(n)));
    Eigen::Map<Mat, 0, Eigen::OuterStride<>> O(out + lo, static_cast<Eigen::Index>(m), cols_n,
                                               Eigen::OuterStride<>(static_cast<Eigen::Index>(n)));
    O.noalias() = W * X;
    if (bias) {
      for (std::size_t r = 0; r < m; ++r) O.row(static_cast<Eigen::Index>(r)).array() += bias[r];
    }
  };
  // Below ~1 MFLOP per call thread startup costs more than it saves.
  parallel::parallel_for(0, n, body, std::max<std::size_t>(64, (1u << 20) / std::max<std::size_t>(1, m * k)));
}

/// Forward convolution on raw buffers. When `cols_keep` is non-null the
/// unfolded input is left there for the backward pass.
template <class T>
BasicGrid<T> conv_forward(const BasicGrid<T>& x, std::span<const T> weights, std::span<const T> bias,
                          const ConvGeometry& g, std::vector<T>* cols_keep = nullptr) {
  g.validate(x.shape());
  if (weights.size() != g.weight_count()) {
    throw ShapeError("conv2d: kernel bank " + g.kernel_string() + " needs " + std::to_string(g.weight_count()) +
                     " weights, got " + std::to_string(weights.size()));
  }
  if (!bias.empty() && bias.size() != g.out) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " does not match " +
                     std::to_string(g.out) + " kernels");
  }
  const std::size_t oh = g.out_height(x.height()), ow = g.out_width(x.width());
  BasicGrid<T> out(g.out, oh, ow);
  const T* cols = x.data();
  std::vector<T> local;
  if (!is_pointwise(g)) {
    std::vector<T>& buf = cols_keep ? *cols_keep : local;
    buf.resize(g.patch_length() * oh * ow);
    im2col(x.data(), x.shape(), g, buf.data());
    cols = buf.data();
  }
  gemm_bias(weights.data(), cols, bias.empty() ? nullptr : bias.data(), g.out, g.patch_length(), oh * ow, out.data());
  return out;
}

/// Accumulates weight, bias and input gradients of a convolution.
/// `cols` is the unfolded input (or the input itself for pointwise kernels).
template <class T>
void conv_backward(const BasicGrid<T>& grad_out, const T* cols, const Shape& in_shape, std::span<const T> weights,
                   const ConvGeometry& g, T* grad_in, T* grad_w, T* grad_b) {
  using Mat = RowMatrix<T>;
  const auto m = static_cast<Eigen::Index>(g.out);
  const auto k = static_cast<Eigen::Index>(g.patch_length());
  const auto n = static_cast<Eigen::Index>(grad_out.plane_size());
  Eigen::Map<const Mat> G(grad_out.data(), m, n);
  if (grad_w) {
    Eigen::Map<const Mat> X(cols, k, n);
    Eigen::Map<Mat> dW(grad_w, m, k);
    dW.noalias() += G * X.transpose();
  }
  if (grad_b) {
    // Plain loop: Eigen's vectorized sum peels to an aligned address, so its
    // order (and the rounding) would depend on where the buffer lives.
    for (Eigen::Index r = 0; r < m; ++r) {
      const T* row = grad_out.data() + r * n;
      T s{};
      for (Eigen::Index j = 0; j < n; ++j) s += row[j];
      grad_b[r] += s;
    }
  }
  if (grad_in) {
    Eigen::Map<const Mat> W(weights.data(), m, k);
    if (is_pointwise(g)) {
      Eigen::Map<Mat> dX(grad_in, k, n);
      dX.noalias() += W.transpose() * G;
    } else {
      Mat dcols(k, n);
      dcols.noalias() = W.transpose() * G;
      col2im_add(dcols.data(), in_shape, g, grad_in);
    }
  }
}

}  // namespace detail

/// Cross-correlation (no kernel flip) of `input` with every kernel of the
/// bank, plus a per-kernel bias (empty span means zero bias).
template <class T>
BasicGrid<T> conv2d(const BasicGrid<T>& input, const BasicKernelBank<T>& kernels, std::span<const T> bias,
                    std::size_t stride = 1, std::size_t padding = 0) {
  ConvGeometry g{kernels.in, kernels.out, kernels.kh, kernels.kw, stride, padding};
  return detail::conv_forward(input, std::span<const T>(kernels.data), bias, g);
}

// ---------------------------------------------------------------------------
// Bicubic resampling

/// Keys cubic convolution kernel with a = -0.5 (Catmull-Rom).
inline double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

/// Four clamped taps per output sample along one axis.
struct ResampleAxis {
  std::size_t in_size = 0;
  std::size_t out_size = 0;
  std::vector<std::array<std::size_t, 4>> index;
  std::vector<std::array<double, 4>> weight;

  ResampleAxis(std::size_t in_n, std::size_t out_n) : in_size(in_n), out_size(out_n), index(out_n), weight(out_n) {
    const double ratio = static_cast<double>(in_n) / static_cast<double>(out_n);
    const auto last = static_cast<std::ptrdiff_t>(in_n) - 1;
    for (std::size_t i = 0; i < out_n; ++i) {
      const double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
      const double base = std::floor(src);
      const double t = src - base;
      for (int tap = 0; tap < 4; ++tap) {
        const auto j = static_cast<std::ptrdiff_t>(base) + tap - 1;
        index[i][tap] = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(j, 0, last));
        weight[i][tap] = cubic_weight(t - static_cast<double>(tap - 1));
      }
    }
  }
};

inline std::size_t resampled_size(std::size_t n, double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ArgumentError("bicubic_resample: scale must be positive");
  const double v = std::round(static_cast<double>(n) * scale);
  if (v < 1.0) {
    throw ArgumentError("bicubic_resample: scale " + std::to_string(scale) + " shrinks dimension " +
                        std::to_string(n) + " to zero");
  }
  return static_cast<std::size_t>(v);
}

namespace detail {

/// Separable application: rows first, then columns. With `adjoint` set the
/// transposed operator is applied (out-shaped grid -> in-shaped grid).
template <class T>
BasicGrid<T> apply_resample(const BasicGrid<T>& g, const ResampleAxis& ay, const ResampleAxis& ax, bool adjoint) {
  const std::size_t src_h = adjoint ? ay.out_size : ay.in_size;
  const std::size_t src_w = adjoint ? ax.out_size : ax.in_size;
  const std::size_t dst_h = adjoint ? ay.in_size : ay.out_size;
  const std::size_t dst_w = adjoint ? ax.in_size : ax.out_size;
  if (g.height() != src_h || g.width() != src_w) throw ShapeError("resample: unexpected input " + g.shape().to_string());
  BasicGrid<T> out(g.channels(), dst_h, dst_w);
  std::vector<T> tmp(src_h * dst_w);
  for (std::size_t c = 0; c < g.channels(); ++c) {
    auto src = g.plane(c);
    auto dst = out.plane(c);
    std::fill(tmp.begin(), tmp.end(), T{});
    // Horizontal pass.
    for (std::size_t y = 0; y < src_h; ++y) {
      const T* row = src.data() + y * src_w;
      T* trow = tmp.data() + y * dst_w;
      if (!adjoint) {
        for (std::size_t x = 0; x < dst_w; ++x) {
          T acc{};
          for (int t = 0; t < 4; ++t) acc += static_cast<T>(ax.weight[x][t]) * row[ax.index[x][t]];
          trow[x] = acc;
        }
      } else {
        for (std::size_t x = 0; x < src_w; ++x)
          for (int t = 0; t < 4; ++t) trow[ax.index[x][t]] += static_cast<T>(ax.weight[x][t]) * row[x];
      }
    }
    // Vertical pass.
    if (!adjoint) {
      for (std::size_t y = 0; y < dst_h; ++y) {
        T* drow = dst.data() + y * dst_w;
        for (int t = 0; t < 4; ++t) {
          const T w = static_cast<T>(ay.weight[y][t]);
          const T* trow = tmp.data() + ay.index[y][t] * dst_w;
          for (std::size_t x = 0; x < dst_w; ++x) drow[x] += w * trow[x];
        }
      }
    } else {
      for (std::size_t y = 0; y < src_h; ++y) {
        const T* trow = tmp.data() + y * dst_w;
        for (int t = 0; t < 4; ++t) {
          const T w = static_cast<T>(ay.weight[y][t]);
          T* drow = dst.data() + ay.index[y][t] * dst_w;
          for (std::size_t x = 0; x < dst_w; ++x) drow[x] += w * trow[x];
        }
      }
    }
  }
  return out;
}

}  // namespace detail

/// Bicubic resize by `scale` (output dims round(h*scale) x round(w*scale)),
/// clamp-to-edge, each channel independently. Scale 1 returns a copy.
template <class T>
BasicGrid<T> bicubic_resample(const BasicGrid<T>& input, double scale) {
  const std::size_t oh = resampled_size(input.height(), scale);
  const std::size_t ow = resampled_size(input.width(), scale);
  if (oh == input.height() && ow == input.width()) return input;
  return detail::apply_resample(input, ResampleAxis(input.height(), oh), ResampleAxis(input.width(), ow), false);
}

/// Resize to explicit output dimensions.
template <class T>
BasicGrid<T> bicubic_resize(const BasicGrid<T>& input, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ArgumentError("bicubic_resize: output dims must be positive");
  if (out_h == input.height() && out_w == input.width()) return input;
  return detail::apply_resample(input, ResampleAxis(input.height(), out_h), ResampleAxis(input.width(), out_w), false);
}

/// Down-scale then up-scale by the same factor; the "blurred" reference used
/// for matching. Output dims equal input dims.
template <class T>
BasicGrid<T> down_up_blur(const BasicGrid<T>& input, double factor = 2.0) {
  if (!(factor >= 1.0)) throw ArgumentError("down_up_blur: factor must be >= 1");
  BasicGrid<T> small = bicubic_resample(input, 1.0 / factor);
  return bicubic_resize(small, input.height(), input.width());
}

}  // namespace ntg
