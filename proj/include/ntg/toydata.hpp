#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ntg/formats.hpp"
#include "ntg/grid.hpp"

namespace ntg {

enum class ToyFill { stripes, checkerboard };

/// Synthetic two-domain corpus: the same shape layouts filled with
/// horizontal stripes (domain X) or a checkerboard (domain Y), period 4.
struct ToyDomainSpec {
  std::size_t image_size = 32;
  std::size_t train_count = 64;  // per domain
  std::size_t val_count = 16;    // paired
  std::uint64_t seed = 0;
};

struct ToyCorpus {
  std::vector<Grid> x_train;
  std::vector<Grid> y_train;
  std::vector<Grid> val_x;
  std::vector<Grid> val_y;
};

inline constexpr double kToyBackground = 0.1;
inline constexpr double kToyDark = 0.35;
inline constexpr double kToyBright = 0.85;

/// Boolean mask of 1 to 3 rectangles and discs.
inline std::vector<bool> toy_layout(WeightStream& rng, std::size_t n) {
  std::vector<bool> mask(n * n, false);
  const double unit = static_cast<double>(n) / 32.0;
  const auto scaled = [&](std::size_t v) { return std::max<std::size_t>(1, static_cast<std::size_t>(v * unit)); };
  const std::size_t shapes = 1 + rng.next_index(3);
  for (std::size_t s = 0; s < shapes; ++s) {
    if (rng.next_index(2) == 0) {
      const std::size_t h = scaled(8) + rng.next_index(scaled(13));
      const std::size_t w = scaled(8) + rng.next_index(scaled(13));
      const std::size_t y0 = rng.next_index(n - std::min(h, n) + 1);
      const std::size_t x0 = rng.next_index(n - std::min(w, n) + 1);
      for (std::size_t y = y0; y < std::min(n, y0 + h); ++y)
        for (std::size_t x = x0; x < std::min(n, x0 + w); ++x) mask[y * n + x] = true;
    } else {
      const std::size_t r = scaled(4) + rng.next_index(scaled(6));
      const std::size_t span = n > 2 * r ? n - 2 * r : 1;
      const double cy = static_cast<double>(r + rng.next_index(span));
      const double cx = static_cast<double>(r + rng.next_index(span));
      const double rr = static_cast<double>(r) * static_cast<double>(r);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          if (dy * dy + dx * dx <= rr) mask[y * n + x] = true;
        }
    }
  }
  return mask;
}

inline Grid toy_render(const std::vector<bool>& mask, std::size_t n, ToyFill fill) {
  Grid g(1, n, n, kToyBackground);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      if (!mask[y * n + x]) continue;
      const bool on = fill == ToyFill::stripes ? (y / 2) % 2 == 0 : ((y / 2) + (x / 2)) % 2 == 0;
      g(0, y, x) = on ? kToyBright : kToyDark;
    }
  return g;
}

/// The X and Y training sets use independent layouts; validation pairs share
/// one layout per pair. Each part draws from its own derived stream, so the
/// training images do not depend on the validation count.
inline ToyCorpus make_toy_corpus(const ToyDomainSpec& spec) {
  if (spec.image_size < 8) throw ArgumentError("toy corpus: image size must be at least 8");
  ToyCorpus c;
  const std::size_t n = spec.image_size;
  WeightStream xs(derive_seed(spec.seed, 0x58)), ys(derive_seed(spec.seed, 0x59)), vs(derive_seed(spec.seed, 0x56));
  for (std::size_t i = 0; i < spec.train_count; ++i) c.x_train.push_back(toy_render(toy_layout(xs, n), n, ToyFill::stripes));
  for (std::size_t i = 0; i < spec.train_count; ++i) {
    c.y_train.push_back(toy_render(toy_layout(ys, n), n, ToyFill::checkerboard));
  }
  for (std::size_t i = 0; i < spec.val_count; ++i) {
    const auto mask = toy_layout(vs, n);
    c.val_x.push_back(toy_render(mask, n, ToyFill::stripes));
    c.val_y.push_back(toy_render(mask, n, ToyFill::checkerboard));
  }
  return c;
}

}  // namespace ntg
