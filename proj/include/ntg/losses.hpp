#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ntg/autograd.hpp"
#include "ntg/featnet.hpp"
#include "ntg/matchswap.hpp"

namespace ntg {

struct LossWeights {
  double lambda_cyc = 10.0;
  double lambda_tex = 1e-4;

  /// Per-level texture normalizer 1 / (4 C^2 (H W)^2).
  static double level_normalizer(std::size_t channels, std::size_t height, std::size_t width) {
    const double c = static_cast<double>(channels);
    const double hw = static_cast<double>(height) * static_cast<double>(width);
    return 1.0 / (4.0 * c * c * hw * hw);
  }
};

/// Gram matrix of a feature map as a 1 x C x C grid.
inline Grid gram(const Grid& features) {
  const std::size_t C = features.channels(), n = features.plane_size();
  Grid g(1, C, C);
  for (std::size_t a = 0; a < C; ++a) {
    auto fa = features.plane(a);
    for (std::size_t b = a; b < C; ++b) {
      auto fb = features.plane(b);
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += fa[i] * fb[i];
      g(0, a, b) = s;
      g(0, b, a) = s;
    }
  }
  return g;
}

namespace detail {
inline void check_texture_levels(std::size_t pyramid_levels, const TextureMaps& swaps) {
  if (swaps.size() != pyramid_levels) {
    throw ShapeError("texture_loss: pyramid has " + std::to_string(pyramid_levels) + " levels, swaps cover " +
                     std::to_string(swaps.size()));
  }
}
}  // namespace detail

/// Sum over swapped levels of lambda_l * |Gr(phi_l(out) * S*_l) - Gr(T_l * S*_l)|_F^2.
inline double texture_loss(const FeaturePyramid& output, const TextureMaps& swaps) {
  detail::check_texture_levels(output.size(), swaps);
  double total = 0.0;
  for (std::size_t l = 0; l < output.size(); ++l) {
    if (!swaps[l]) continue;
    const SwapResult& s = *swaps[l];
    require_same_shape(output[l], s.swapped, "texture_loss");
    const Grid go = gram(multiply_by_map(output[l], s.weight_map));
    const Grid gt = gram(multiply_by_map(s.swapped, s.weight_map));
    double fro = 0.0;
    for (std::size_t i = 0; i < go.size(); ++i) fro += (go[i] - gt[i]) * (go[i] - gt[i]);
    total += LossWeights::level_normalizer(output[l].channels(), output[l].height(), output[l].width()) * fro;
  }
  return total;
}

/// Recording variant; gradients flow into the output pyramid.
inline ad::Var texture_loss(std::span<const ad::Var> output, const TextureMaps& swaps) {
  detail::check_texture_levels(output.size(), swaps);
  ad::Tape& tape = output.front().tape();
  ad::Var total = tape.constant(Grid(1, 1, 1));
  for (std::size_t l = 0; l < output.size(); ++l) {
    if (!swaps[l]) continue;
    const SwapResult& s = *swaps[l];
    const Grid& f = output[l].value();
    require_same_shape(f, s.swapped, "texture_loss");
    ad::Var weight = tape.constant(s.weight_map);
    ad::Var target = tape.constant(gram(multiply_by_map(s.swapped, s.weight_map)));
    ad::Var diff = ad::sub(ad::gram(ad::mul_map(output[l], weight)), target);
    const double lambda = LossWeights::level_normalizer(f.channels(), f.height(), f.width());
    total = ad::add(total, ad::scale(ad::square_sum(diff), lambda));
  }
  return total;
}

inline double guarded_log(double v) { return std::log(std::max(v, ad::kLogFloor)); }

/// ln D(real) + ln(1 - D(fake)); the discriminator maximizes it.
inline double adversarial_loss(double d_real, double d_fake) {
  return guarded_log(d_real) + guarded_log(1.0 - d_fake);
}

/// Non-saturating generator surrogate -ln D(fake).
inline double generator_adversarial_loss(double d_fake) { return -guarded_log(d_fake); }

inline ad::Var adversarial_loss(const ad::Var& d_real, const ad::Var& d_fake) {
  return ad::add(ad::log_guarded(d_real), ad::log_guarded(ad::affine(d_fake, -1.0, 1.0)));
}

inline ad::Var generator_adversarial_loss(const ad::Var& d_fake) { return ad::scale(ad::log_guarded(d_fake), -1.0); }

inline double mean_abs_diff(const Grid& a, const Grid& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// mean|F(G(x)) - x| + mean|G(F(y)) - y|.
inline double cycle_loss(const Grid& x, const Grid& fgx, const Grid& y, const Grid& gfy) {
  require_same_shape(x, fgx, "cycle_loss");
  require_same_shape(y, gfy, "cycle_loss");
  return mean_abs_diff(fgx, x) + mean_abs_diff(gfy, y);
}

inline ad::Var cycle_loss(const ad::Var& x, const ad::Var& fgx, const ad::Var& y, const ad::Var& gfy) {
  require_same_shape(x.value(), fgx.value(), "cycle_loss");
  require_same_shape(y.value(), gfy.value(), "cycle_loss");
  return ad::add(ad::mean(ad::abs(ad::sub(fgx, x))), ad::mean(ad::abs(ad::sub(gfy, y))));
}

/// adv_G + adv_F + lambda_cyc * cyc + lambda_tex * (tex_G + tex_F).
inline double total_objective(double adv_g, double adv_f, double cyc, double tex_g, double tex_f,
                              const LossWeights& w = {}) {
  return adv_g + adv_f + w.lambda_cyc * cyc + w.lambda_tex * (tex_g + tex_f);
}

inline ad::Var total_objective(const ad::Var& adv_g, const ad::Var& adv_f, const ad::Var& cyc, const ad::Var& tex_g,
                               const ad::Var& tex_f, const LossWeights& w = {}) {
  return ad::add(ad::add(ad::add(adv_g, adv_f), ad::scale(cyc, w.lambda_cyc)),
                 ad::scale(ad::add(tex_g, tex_f), w.lambda_tex));
}

}  // namespace ntg
