#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ntg/featnet.hpp"
#include "ntg/formats.hpp"
#include "ntg/grid.hpp"
#include "ntg/parallel.hpp"

namespace ntg {

inline constexpr double kPatchNormEps = 1e-12;

struct PatchCoord {
  std::size_t y = 0;
  std::size_t x = 0;
};

/// Valid (unpadded) k x k patches in row-major position order. Each vector
/// is flattened channel-major, then row-major.
struct PatchSet {
  std::size_t level = 0;
  std::size_t patch_size = 0;
  std::size_t stride = 1;
  std::size_t channels = 0;
  std::vector<PatchCoord> coords;
  std::vector<double> vectors;

  std::size_t size() const { return coords.size(); }
  std::size_t length() const { return channels * patch_size * patch_size; }
  std::span<const double> patch(std::size_t i) const {
    return std::span<const double>(vectors).subspan(i * length(), length());
  }
};

inline PatchSet extract_patches(const Grid& features, std::size_t patch_size, std::size_t stride = 1,
                                std::size_t level = 0) {
  if (stride == 0) throw ArgumentError("extract_patches: stride must be positive");
  if (patch_size == 0 || patch_size > features.height() || patch_size > features.width()) {
    throw ArgumentError("extract_patches: patch size " + std::to_string(patch_size) + " does not fit " +
                        features.shape().to_string());
  }
  PatchSet set;
  set.level = level;
  set.patch_size = patch_size;
  set.stride = stride;
  set.channels = features.channels();
  const std::size_t ny = (features.height() - patch_size) / stride + 1;
  const std::size_t nx = (features.width() - patch_size) / stride + 1;
  set.coords.reserve(ny * nx);
  set.vectors.reserve(ny * nx * set.length());
  for (std::size_t py = 0; py < ny; ++py)
    for (std::size_t px = 0; px < nx; ++px) {
      const PatchCoord pc{py * stride, px * stride};
      set.coords.push_back(pc);
      for (std::size_t c = 0; c < features.channels(); ++c)
        for (std::size_t dy = 0; dy < patch_size; ++dy)
          for (std::size_t dx = 0; dx < patch_size; ++dx) set.vectors.push_back(features(c, pc.y + dy, pc.x + dx));
    }
  return set;
}

namespace detail {

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Row-normalized copy of the patch vectors, q / (|q| + eps).
inline std::vector<double> normalized_patches(const PatchSet& set) {
  std::vector<double> out(set.vectors.size());
  const std::size_t len = set.length();
  for (std::size_t j = 0; j < set.size(); ++j) {
    auto q = set.patch(j);
    const double inv = 1.0 / (norm2(q) + kPatchNormEps);
    for (std::size_t i = 0; i < len; ++i) out[j * len + i] = q[i] * inv;
  }
  return out;
}

}  // namespace detail

/// Score maps S_j(y, x) = <input patch at (y, x), q_j / (|q_j| + eps)> for every
/// reference patch j, realized as a correlation of the input with the
/// normalized patches used as kernels. Channel j of the result is S_j; the
/// spatial dims are the valid-position grid (H - k + 1) x (W - k + 1).
inline Grid similarity_maps(const Grid& input_features, const PatchSet& ref_patches) {
  if (ref_patches.size() == 0) throw ArgumentError("similarity_maps: empty reference patch set");
  if (ref_patches.channels != input_features.channels()) {
    throw ShapeError("similarity_maps: input has " + std::to_string(input_features.channels()) +
                     " channels, reference patches have " + std::to_string(ref_patches.channels));
  }
  const std::size_t k = ref_patches.patch_size;
  KernelBank bank(ref_patches.size(), ref_patches.channels, k, k);
  bank.data = detail::normalized_patches(ref_patches);
  return conv2d(input_features, bank, std::span<const double>{}, 1, 0);
}

struct SwapOptions {
  std::size_t patch_size = 3;
  /// Select by fully cosine-normalized scores instead of reference-only
  /// normalization. Selection is identical up to floating-point ties.
  bool normalize_input = false;
};

/// Swapped features of one pyramid level.
///   swapped    - same shape as the input features; reference-raw patches of
///                the best matches, overlap-averaged.
///   weight_map - 1 x H x W; overlap average of the best cosine score of the
///                patches covering each pixel, in [-1, 1].
///   index_map  - 1 x (H-k+1) x (W-k+1); best reference patch index for the
///                patch whose top-left corner is at that position. With
///                several references, indices run through them in order.
struct SwapResult {
  std::size_t level = 0;
  Grid swapped;
  Grid weight_map;
  IndexGrid index_map;
};

namespace detail {

struct RefBank {
  std::size_t channels = 0, k = 0;
  std::vector<double> normalized;   // count x length
  std::vector<double> norms;        // |q_j|
  std::vector<std::size_t> source;  // which reference
  std::vector<PatchCoord> coords;

  std::size_t count() const { return coords.size(); }
  std::size_t length() const { return channels * k * k; }
};

inline RefBank build_ref_bank(std::span<const Grid> blur, std::size_t k) {
  RefBank bank;
  bank.channels = blur.front().channels();
  bank.k = k;
  for (std::size_t r = 0; r < blur.size(); ++r) {
    PatchSet set = extract_patches(blur[r], k, 1);
    std::vector<double> normed = normalized_patches(set);
    bank.normalized.insert(bank.normalized.end(), normed.begin(), normed.end());
    for (std::size_t j = 0; j < set.size(); ++j) {
      bank.norms.push_back(norm2(set.patch(j)));
      bank.source.push_back(r);
      bank.coords.push_back(set.coords[j]);
    }
  }
  return bank;
}

}  // namespace detail

/// Matches every input patch against the blurred references and swaps in the
/// raw-reference patch with the highest score (lowest index on ties).
inline SwapResult swap_features(const Grid& input, std::span<const Grid> refs_raw, std::span<const Grid> refs_blur,
                                const SwapOptions& opt = {}, std::size_t level = 0) {
  if (refs_raw.empty() || refs_raw.size() != refs_blur.size()) {
    throw ArgumentError("swap_features: need matching non-empty raw and blurred reference lists");
  }
  const std::size_t k = opt.patch_size;
  for (std::size_t r = 0; r < refs_raw.size(); ++r) {
    if (refs_raw[r].shape() != refs_blur[r].shape()) {
      throw ShapeError("swap_features: raw reference " + refs_raw[r].shape().to_string() +
                       " and blurred reference " + refs_blur[r].shape().to_string() + " differ");
    }
    if (refs_raw[r].channels() != input.channels()) {
      throw ShapeError("swap_features: input " + input.shape().to_string() + " and reference " +
                       refs_raw[r].shape().to_string() + " differ in channels");
    }
  }
  if (k == 0 || k > input.height() || k > input.width()) {
    throw ArgumentError("swap_features: patch size " + std::to_string(k) + " does not fit input " +
                        input.shape().to_string());
  }

  const detail::RefBank bank = detail::build_ref_bank(refs_blur, k);
  const std::size_t len = bank.length();
  const std::size_t nref = bank.count();
  const ConvGeometry geom{input.channels(), 1, k, k, 1, 0};
  const std::size_t oh = geom.out_height(input.height()), ow = geom.out_width(input.width());
  const std::size_t npos = oh * ow;

  // Input patches as columns: len x npos.
  std::vector<double> cols(len * npos);
  ntg::detail::im2col(input.data(), input.shape(), geom, cols.data());
  std::vector<double> in_norm(npos, 0.0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t p = 0; p < npos; ++p) in_norm[p] += cols[i * npos + p] * cols[i * npos + p];
  for (double& v : in_norm) v = std::sqrt(v);

  std::vector<double> best(npos, -std::numeric_limits<double>::infinity());
  std::vector<std::int32_t> best_j(npos, 0);

  // Fixed-size column chunks keep every score's arithmetic independent of the
  // thread count.
  constexpr std::size_t kColChunk = 64;
  constexpr std::size_t kRowBlock = 256;
  const std::size_t chunks = (npos + kColChunk - 1) / kColChunk;
  using Mat = ntg::detail::RowMatrix<double>;
  parallel::parallel_for(0, chunks, [&](std::size_t c_lo, std::size_t c_hi) {
    Mat scores;
    for (std::size_t chunk = c_lo; chunk < c_hi; ++chunk) {
      const std::size_t p0 = chunk * kColChunk;
      const std::size_t pn = std::min(kColChunk, npos - p0);
      Eigen::Map<const Mat, 0, Eigen::OuterStride<>> X(cols.data() + p0, static_cast<Eigen::Index>(len),
                                                       static_cast<Eigen::Index>(pn),
                                                       Eigen::OuterStride<>(static_cast<Eigen::Index>(npos)));
      for (std::size_t j0 = 0; j0 < nref; j0 += kRowBlock) {
        const std::size_t jn = std::min(kRowBlock, nref - j0);
        Eigen::Map<const Mat> Q(bank.normalized.data() + j0 * len, static_cast<Eigen::Index>(jn),
                                static_cast<Eigen::Index>(len));
        scores.noalias() = Q * X;
        for (std::size_t p = 0; p < pn; ++p) {
          const double inv = (opt.normalize_input && in_norm[p0 + p] > 0.0) ? 1.0 / in_norm[p0 + p] : 1.0;
          double b = best[p0 + p];
          std::int32_t bj = best_j[p0 + p];
          for (std::size_t j = 0; j < jn; ++j) {
            double s = scores(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(p));
            if (opt.normalize_input) s *= inv;
            if (s > b) {
              b = s;
              bj = static_cast<std::int32_t>(j0 + j);
            }
          }
          best[p0 + p] = b;
          best_j[p0 + p] = bj;
        }
      }
    }
  }, 1);

  SwapResult res;
  res.level = level;
  res.swapped = Grid(input.shape());
  res.weight_map = Grid(1, input.height(), input.width());
  res.index_map = IndexGrid(1, oh, ow);
  Grid count(1, input.height(), input.width());
  const std::size_t C = input.channels();
  for (std::size_t py = 0; py < oh; ++py)
    for (std::size_t px = 0; px < ow; ++px) {
      const std::size_t p = py * ow + px;
      const auto j = static_cast<std::size_t>(best_j[p]);
      res.index_map[p] = best_j[p];
      const Grid& raw = refs_raw[bank.source[j]];
      const PatchCoord src = bank.coords[j];
      // Cosine between the input patch and the chosen blurred patch.
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += cols[i * npos + p] * bank.normalized[j * len + i];
      double cosine = 0.0;
      if (in_norm[p] > 0.0 && bank.norms[j] > 0.0) {
        cosine = std::clamp(dot * (bank.norms[j] + kPatchNormEps) / (bank.norms[j] * in_norm[p]), -1.0, 1.0);
      }
      for (std::size_t dy = 0; dy < k; ++dy)
        for (std::size_t dx = 0; dx < k; ++dx) {
          for (std::size_t c = 0; c < C; ++c) res.swapped(c, py + dy, px + dx) += raw(c, src.y + dy, src.x + dx);
          res.weight_map(0, py + dy, px + dx) += cosine;
          count(0, py + dy, px + dx) += 1.0;
        }
    }
  for (std::size_t i = 0; i < count.size(); ++i) {
    const double n = count[i];
    if (n == 0.0) continue;
    res.weight_map[i] /= n;
    for (std::size_t c = 0; c < C; ++c) res.swapped[c * count.size() + i] /= n;
  }
  return res;
}

inline SwapResult swap_features(const Grid& input, const Grid& ref_raw, const Grid& ref_blur,
                                const SwapOptions& opt = {}, std::size_t level = 0) {
  return swap_features(input, std::span<const Grid>(&ref_raw, 1), std::span<const Grid>(&ref_blur, 1), opt, level);
}

/// One optional SwapResult per pyramid level (finest first); empty slots are
/// levels where no swapping was performed.
using TextureMaps = std::vector<std::optional<SwapResult>>;

/// Swaps each requested level independently against the pooled references.
inline TextureMaps swap_pyramid(const FeaturePyramid& input, std::span<const FeaturePyramid> refs_raw,
                                std::span<const FeaturePyramid> refs_blur, std::span<const std::size_t> levels,
                                const SwapOptions& opt = {}) {
  if (refs_raw.size() != refs_blur.size() || refs_raw.empty()) {
    throw ArgumentError("swap_pyramid: need matching non-empty reference pyramids");
  }
  TextureMaps out(input.size());
  for (std::size_t l : levels) {
    if (l >= input.size()) throw ArgumentError("swap_pyramid: level " + std::to_string(l) + " out of range");
    std::vector<Grid> raw, blur;
    for (std::size_t r = 0; r < refs_raw.size(); ++r) {
      if (refs_raw[r].size() != input.size() || refs_blur[r].size() != input.size()) {
        throw ShapeError("swap_pyramid: reference pyramid depth differs from input");
      }
      raw.push_back(refs_raw[r][l]);
      blur.push_back(refs_blur[r][l]);
    }
    out[l] = swap_features(input[l], raw, blur, opt, l);
  }
  return out;
}

inline NtxArray to_ntx(const IndexGrid& g) {
  NtxArray a{{static_cast<std::uint32_t>(g.channels()), static_cast<std::uint32_t>(g.height()),
              static_cast<std::uint32_t>(g.width())},
             {}};
  a.values.reserve(g.size());
  for (auto v : g.values()) a.values.push_back(static_cast<double>(v));
  return a;
}

}  // namespace ntg
