#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ntg/autograd.hpp"
#include "ntg/network.hpp"

namespace ntg {

inline const std::vector<std::size_t> kDefaultChannelPlan{16, 32, 64};

struct LevelGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t downsample = 1;  // relative to the input image
};

/// Per-level features, level 0 finest. Level l has dims ceil(input / 2^l).
struct FeaturePyramid {
  std::vector<Grid> levels;

  std::size_t size() const { return levels.size(); }
  const Grid& operator[](std::size_t l) const { return levels[l]; }

  std::vector<LevelGeometry> geometry() const {
    std::vector<LevelGeometry> out;
    for (std::size_t l = 0; l < levels.size(); ++l) {
      out.push_back({levels[l].channels(), levels[l].height(), levels[l].width(), std::size_t{1} << l});
    }
    return out;
  }
};

/// Fixed feature extractor: per level a 3x3 conv (stride 1, pad 1) and ReLU,
/// followed for every level after the first by 2x2 average pooling.
struct FeatureExtractor {
  std::size_t in_channels = 1;
  std::vector<ConvLayer> levels;

  std::size_t level_count() const { return levels.size(); }

  std::vector<std::size_t> channel_plan() const {
    std::vector<std::size_t> plan;
    for (const auto& l : levels) plan.push_back(l.geom.out);
    return plan;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.parameter_count();
    return n;
  }

  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    for (std::size_t l = 0; l < levels.size(); ++l) append_params(out, "phi.level" + std::to_string(l + 1), levels[l]);
    return out;
  }
};

/// Builds the extractor with weights drawn in layer order from one seeded
/// stream, so equal seeds give bitwise-equal networks.
inline FeatureExtractor build_extractor(std::uint64_t seed, std::size_t level_count,
                                        std::span<const std::size_t> channel_plan, std::size_t in_channels = 1) {
  if (level_count == 0 || channel_plan.empty()) throw ArgumentError("build_extractor: need at least one level");
  if (channel_plan.size() != level_count) {
    throw ArgumentError("build_extractor: channel plan has " + std::to_string(channel_plan.size()) + " entries for " +
                        std::to_string(level_count) + " levels");
  }
  FeatureExtractor net;
  net.in_channels = in_channels;
  WeightStream stream(seed);
  std::size_t in = in_channels;
  for (std::size_t c : channel_plan) {
    if (c == 0) throw ArgumentError("build_extractor: zero-width level");
    net.levels.emplace_back(in, c, 3, 1, 1);
    net.levels.back().initialize(stream);
    in = c;
  }
  return net;
}

/// Recording variant: the extractor weights are constants, so gradients flow
/// only to `image`.
inline std::vector<ad::Var> extract_pyramid(Binding& bind, const FeatureExtractor& net, const ad::Var& image,
                                            std::size_t max_levels = SIZE_MAX) {
  if (image.value().channels() != net.in_channels) {
    throw ShapeError("extract_pyramid: image has " + std::to_string(image.value().channels()) +
                     " channels, extractor expects " + std::to_string(net.in_channels));
  }
  std::vector<ad::Var> out;
  ad::Var x = image;
  const std::size_t n = std::min(max_levels, net.levels.size());
  for (std::size_t l = 0; l < n; ++l) {
    x = ad::relu(apply(bind, net.levels[l], x));
    if (l > 0) x = ad::avg_pool2(x);
    out.push_back(x);
  }
  return out;
}

inline FeaturePyramid extract_pyramid(const FeatureExtractor& net, const Grid& image) {
  ad::Tape tape;
  Binding bind(tape, false);
  auto vars = extract_pyramid(bind, net, tape.constant(image));
  FeaturePyramid p;
  for (const auto& v : vars) p.levels.push_back(v.value());
  return p;
}

}  // namespace ntg
