#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ntg/error.hpp"
#include "ntg/grid.hpp"

namespace ntg::ad {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Grid& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

namespace testing {
/// Test-only fault injection: when set, the Gram product's backward pass
/// returns a slightly wrong gradient. Used as a negative control for the
/// gradient checker.
inline std::atomic<bool>& corrupt_gram_backward() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace testing

/// Records a computation graph with cached forward values and replays it in
/// reverse to accumulate exact gradients. Nodes are appended in evaluation
/// order, so index order is a topological order.
class Tape {
 public:
  /// Called during backward with the node's own index; reads grad(self) and
  /// accumulates into its inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives a gradient.
  Var variable(Grid value) { return push(std::move(value), true, nullptr); }
  /// Leaf that never receives a gradient.
  Var constant(Grid value) { return push(std::move(value), false, nullptr); }

  /// Appends an op node. It requires a gradient iff one of `inputs` does.
  Var record(Grid value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || requires_grad(v);
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Grid& value(std::size_t id) const { return nodes_.at(id).value; }
  const Grid& value(const Var& v) const { return value(v.id()); }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id()).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient of the last backward() loss with respect to `v`; zeros if the
  /// loss does not depend on it.
  Grid gradient(const Var& v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad.empty() ? Grid(n.value.shape()) : n.grad;
  }

  /// Adjoint buffer of node `id` during the backward sweep.
  const Grid& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Adds `delta` into the adjoint of node `id` (ignored for constants).
  void accumulate(std::size_t id, const Grid& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = delta;
      return;
    }
    require_same_shape(n.grad, delta, "accumulate");
    for (std::size_t i = 0; i < delta.size(); ++i) n.grad[i] += delta[i];
  }

  /// Mutable adjoint of node `id`, allocated as zeros on first use. Returns
  /// nullptr for nodes that do not require a gradient.
  Grid* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Grid(n.value.shape());
    return &n.grad;
  }

  /// Reverse sweep from a scalar loss. A tape supports one sweep; record a
  /// fresh forward pass (after reset()) before calling it again.
  void backward(const Var& loss) {
    if (consumed_) throw StaleTapeError("backward: tape already consumed; record a new forward pass first");
    if (loss.tape_ != this) throw ArgumentError("backward: loss belongs to a different tape");
    const Grid& v = value(loss);
    if (v.size() != 1) throw ShapeError("backward: loss must be scalar, got " + v.shape().to_string());
    consumed_ = true;
    nodes_[loss.id()].grad = Grid(v.shape(), 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Grid value;
    Grid grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Grid value, bool requires_grad, BackwardFn backward) {
    if (consumed_) throw StaleTapeError("tape already consumed by backward; call reset() before recording");
    nodes_.push_back(Node{std::move(value), Grid{}, requires_grad, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

inline const Grid& Var::value() const { return tape_->value(id_); }

namespace detail {
inline Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ArgumentError("operands recorded on different tapes");
  return a.tape();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  Grid out = ntg::add(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    tp.accumulate(ia, tp.grad(self));
    tp.accumulate(ib, tp.grad(self));
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  Grid out = ntg::subtract(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    tp.accumulate(ia, tp.grad(self));
    tp.accumulate(ib, affine(tp.grad(self), -1.0));
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  Grid out = ntg::multiply(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Grid& g = tp.grad(self);
    if (tp.requires_grad(ia)) tp.accumulate(ia, ntg::multiply(g, tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, ntg::multiply(g, tp.value(ia)));
  });
}

/// alpha * x + beta.
inline Var affine(const Var& x, double alpha, double beta = 0.0) {
  Tape& t = x.tape();
  const std::size_t ix = x.id();
  return t.record(ntg::affine(x.value(), alpha, beta), {x}, [ix, alpha](Tape& tp, std::size_t self) {
    tp.accumulate(ix, ntg::affine(tp.grad(self), alpha));
  });
}

inline Var scale(const Var& x, double alpha) { return affine(x, alpha, 0.0); }

/// Multiplies each channel of x by a one-channel map of the same spatial size.
inline Var mul_map(const Var& x, const Var& map) {
  Tape& t = detail::same_tape(x, map);
  Grid out = multiply_by_map(x.value(), map.value());
  const std::size_t ix = x.id(), im = map.id();
  return t.record(std::move(out), {x, map}, [ix, im](Tape& tp, std::size_t self) {
    const Grid& g = tp.grad(self);
    const Grid& m = tp.value(im);
    if (tp.requires_grad(ix)) tp.accumulate(ix, multiply_by_map(g, m));
    if (tp.requires_grad(im)) {
      const Grid& xv = tp.value(ix);
      Grid gm(m.shape());
      const std::size_t plane = m.size();
      for (std::size_t c = 0; c < xv.channels(); ++c)
        for (std::size_t i = 0; i < plane; ++i) gm[i] += g[c * plane + i] * xv[c * plane + i];
      tp.accumulate(im, gm);
    }
  });
}

/// Applies f elementwise with derivative df evaluated at the input.
template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  Tape& t = x.tape();
  Grid out = x.value();
  for (double& v : out.values()) v = f(v);
  const std::size_t ix = x.id();
  return t.record(std::move(out), {x}, [ix, df](Tape& tp, std::size_t self) {
    const Grid& g = tp.grad(self);
    const Grid& xv = tp.value(ix);
    Grid d(g.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * df(xv[i]);
    tp.accumulate(ix, d);
  });
}

/// ReLU; the kink at 0 takes subgradient 0.
inline Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(const Var& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; }, [slope](double v) { return v > 0.0 ? 1.0 : slope; });
}

inline Var sigmoid(const Var& x) {
  auto s = [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
  return unary(x, s, [s](double v) {
    const double y = s(v);
    return y * (1.0 - y);
  });
}

inline constexpr double kLogFloor = 1e-12;

/// log(max(v, 1e-12)); gradient is zero below the floor.
inline Var log_guarded(const Var& x) {
  return unary(
      x, [](double v) { return std::log(std::max(v, kLogFloor)); },
      [](double v) { return v > kLogFloor ? 1.0 / v : 0.0; });
}

/// |x| with subgradient 0 at 0.
inline Var abs(const Var& x) {
  return unary(x, [](double v) { return std::abs(v); },
               [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  Tape& t = x.tape();
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t ix = x.id();
  return t.record(Grid(1, 1, 1, s), {x}, [ix](Tape& tp, std::size_t self) {
    tp.accumulate(ix, Grid(tp.value(ix).shape(), tp.grad(self)[0]));
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Sum of squares.
inline Var square_sum(const Var& x) {
  Tape& t = x.tape();
  double s = 0.0;
  for (double v : x.value().values()) s += v * v;
  const std::size_t ix = x.id();
  return t.record(Grid(1, 1, 1, s), {x}, [ix](Tape& tp, std::size_t self) {
    tp.accumulate(ix, ntg::affine(tp.value(ix), 2.0 * tp.grad(self)[0]));
  });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var concat(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t ca = a.value().channels(), cb = b.value().channels();
  return t.record(concat_channels(a.value(), b.value()), {a, b}, [ia, ib, ca, cb](Tape& tp, std::size_t self) {
    const Grid& g = tp.grad(self);
    if (tp.requires_grad(ia)) tp.accumulate(ia, slice_channels(g, 0, ca));
    if (tp.requires_grad(ib)) tp.accumulate(ib, slice_channels(g, ca, cb));
  });
}

/// 2x2 average pooling, stride 2, ceil mode: edge windows average only the
/// elements they cover.
inline Var avg_pool2(const Var& x) {
  Tape& t = x.tape();
  const Grid& v = x.value();
  const std::size_t H = v.height(), W = v.width();
  const std::size_t oh = (H + 1) / 2, ow = (W + 1) / 2;
  Grid out(v.channels(), oh, ow);
  for (std::size_t c = 0; c < v.channels(); ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t iy = 2 * y + dy, ix = 2 * xx + dx;
            if (iy < H && ix < W) {
              s += v(c, iy, ix);
              ++n;
            }
          }
        out(c, y, xx) = s / static_cast<double>(n);
      }
  const std::size_t id = x.id();
  return t.record(std::move(out), {x}, [id, H, W](Tape& tp, std::size_t self) {
    const Grid& g = tp.grad(self);
    Grid d(tp.value(id).shape());
    for (std::size_t c = 0; c < g.channels(); ++c)
      for (std::size_t y = 0; y < g.height(); ++y)
        for (std::size_t xx = 0; xx < g.width(); ++xx) {
          const std::size_t ny = std::min<std::size_t>(2, H - 2 * y), nx = std::min<std::size_t>(2, W - 2 * xx);
          const double share = g(c, y, xx) / static_cast<double>(ny * nx);
          for (std::size_t dy = 0; dy < ny; ++dy)
            for (std::size_t dx = 0; dx < nx; ++dx) d(c, 2 * y + dy, 2 * xx + dx) += share;
        }
    tp.accumulate(id, d);
  });
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample_nearest2(const Var& x) {
  Tape& t = x.tape();
  const Grid& v = x.value();
  Grid out(v.channels(), v.height() * 2, v.width() * 2);
  for (std::size_t c = 0; c < v.channels(); ++c)
    for (std::size_t y = 0; y < out.height(); ++y)
      for (std::size_t xx = 0; xx < out.width(); ++xx) out(c, y, xx) = v(c, y / 2, xx / 2);
  const std::size_t id = x.id();
  return t.record(std::move(out), {x}, [id](Tape& tp, std::size_t self) {
    const Grid& g = tp.grad(self);
    Grid d(tp.value(id).shape());
    for (std::size_t c = 0; c < g.channels(); ++c)
      for (std::size_t y = 0; y < g.height(); ++y)
        for (std::size_t xx = 0; xx < g.width(); ++xx) d(c, y / 2, xx / 2) += g(c, y, xx);
    tp.accumulate(id, d);
  });
}

/// Bicubic resize to explicit dims; backward applies the transposed operator.
inline Var resample(const Var& x, std::size_t out_h, std::size_t out_w) {
  Tape& t = x.tape();
  const Grid& v = x.value();
  auto ay = std::make_shared<ResampleAxis>(v.height(), out_h);
  auto ax = std::make_shared<ResampleAxis>(v.width(), out_w);
  const std::size_t id = x.id();
  return t.record(ntg::detail::apply_resample(v, *ay, *ax, false), {x}, [id, ay, ax](Tape& tp, std::size_t self) {
    tp.accumulate(id, ntg::detail::apply_resample(tp.grad(self), *ay, *ax, true));
  });
}

// ---------------------------------------------------------------------------
// Convolution and Gram product

/// conv2d(x, weight, bias). `weight` holds geometry.weight_count() values in
/// out, in, kh, kw order (any grid shape with that many elements); `bias`
/// holds `out` values and may be an invalid Var for no bias.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, const ConvGeometry& geom) {
  Tape& t = detail::same_tape(x, weight);
  auto cols = std::make_shared<std::vector<double>>();
  std::span<const double> b;
  if (bias.valid()) b = bias.value().values();
  Grid out = ntg::detail::conv_forward(x.value(), weight.value().values(), b, geom, cols.get());
  const std::size_t ix = x.id(), iw = weight.id();
  const bool has_bias = bias.valid();
  const std::size_t ib = has_bias ? bias.id() : 0;
  if (has_bias) {
    return t.record(std::move(out), {x, weight, bias}, [=](Tape& tp, std::size_t self) {
      const Grid& xv = tp.value(ix);
      const double* c = ntg::detail::is_pointwise(geom) ? xv.data() : cols->data();
      Grid* gx = tp.grad_buffer(ix);
      Grid* gw = tp.grad_buffer(iw);
      Grid* gb = tp.grad_buffer(ib);
      ntg::detail::conv_backward<double>(tp.grad(self), c, xv.shape(), tp.value(iw).values(), geom, gx ? gx->data() : nullptr,
                                 gw ? gw->data() : nullptr, gb ? gb->data() : nullptr);
    });
  }
  return t.record(std::move(out), {x, weight}, [=](Tape& tp, std::size_t self) {
    const Grid& xv = tp.value(ix);
    const double* c = ntg::detail::is_pointwise(geom) ? xv.data() : cols->data();
    Grid* gx = tp.grad_buffer(ix);
    Grid* gw = tp.grad_buffer(iw);
    ntg::detail::conv_backward<double>(tp.grad(self), c, xv.shape(), tp.value(iw).values(), geom, gx ? gx->data() : nullptr,
                               gw ? gw->data() : nullptr, nullptr);
  });
}

/// Gram matrix G_ab = sum_xy F_a(x,y) F_b(x,y), returned as a 1 x C x C grid.
inline Var gram(const Var& f) {
  Tape& t = f.tape();
  const Grid& v = f.value();
  const auto C = static_cast<Eigen::Index>(v.channels());
  const auto N = static_cast<Eigen::Index>(v.plane_size());
  using Mat = ntg::detail::RowMatrix<double>;
  Eigen::Map<const Mat> F(v.data(), C, N);
  Grid out(1, v.channels(), v.channels());
  Eigen::Map<Mat> G(out.data(), C, C);
  G.noalias() = F * F.transpose();
  const std::size_t id = f.id();
  return t.record(std::move(out), {f}, [id, C, N](Tape& tp, std::size_t self) {
    const Grid& fv = tp.value(id);
    Eigen::Map<const Mat> F(fv.data(), C, N);
    Eigen::Map<const Mat> Gg(tp.grad(self).data(), C, C);
    Grid d(fv.shape());
    Eigen::Map<Mat> D(d.data(), C, N);
    D.noalias() = (Gg + Gg.transpose()) * F;
    if (testing::corrupt_gram_backward()) D *= 1.01;
    tp.accumulate(id, d);
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares `analytic` against central differences (f(p+h) - f(p-h)) / 2h at
/// the listed coordinates of `point` (all coordinates when `coords` is
/// empty). Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator.
template <class F>
GradCheckResult finite_diff_check(F&& f, std::vector<double> point, std::span<const double> analytic, double h,
                                  std::span<const std::size_t> coords = {}) {
  if (!(h > 0.0)) throw ArgumentError("finite_diff_check: step must be positive");
  if (analytic.size() != point.size()) throw ShapeError("finite_diff_check: gradient and point differ in length");
  auto eval = [&](const std::vector<double>& p) {
    const double v = f(std::span<const double>(p));
    if (!std::isfinite(v)) throw NumericError("objective", "finite_diff_check: objective is not finite");
    return v;
  };
  eval(point);
  GradCheckResult res;
  auto check_one = [&](std::size_t i) {
    if (i >= point.size()) throw ArgumentError("finite_diff_check: coordinate out of range");
    const double saved = point[i];
    point[i] = saved + h;
    const double up = eval(point);
    point[i] = saved - h;
    const double down = eval(point);
    point[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double err = std::abs(analytic[i] - numeric) / denom;
    ++res.checked;
    if (err > res.max_relative_error || res.checked == 1) {
      if (err >= res.max_relative_error) {
        res.max_relative_error = err;
        res.worst_coordinate = i;
        res.worst_analytic = analytic[i];
        res.worst_numeric = numeric;
      }
    }
  };
  if (coords.empty()) {
    for (std::size_t i = 0; i < point.size(); ++i) check_one(i);
  } else {
    for (std::size_t i : coords) check_one(i);
  }
  return res;
}

}  // namespace ntg::ad
