#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ntg/featnet.hpp"
#include "ntg/generator.hpp"
#include "ntg/grid.hpp"
#include "ntg/matchswap.hpp"
#include "ntg/trainer.hpp"

namespace ntg {

/// Extractor plus one translation network, loaded from a checkpoint.
struct Pipeline {
  FeatureExtractor phi;
  GeneratorNet net;
};

/// `which` selects the network section prefix ("G" or "F").
inline Pipeline load_pipeline(const NtxMap& weights, const std::string& which = "G", int scale_factor = 1) {
  if (which != "G" && which != "F") throw ArgumentError("generator must be G or F");
  if (scale_factor != 1 && scale_factor != 2) throw ArgumentError("scale must be 1 or 2");
  const auto plan = plan_from_weights(weights);
  Pipeline p;
  p.phi = build_extractor(0, plan.size(), plan);
  p.net = build_generator(0, plan);
  p.net.scale_factor = scale_factor;
  load_params(weights, p.phi.parameters());
  load_params(weights, p.net.parameters(which));
  return p;
}

/// Extract -> match -> swap -> generate. The texture pyramid is taken at output
/// resolution, so with scale 2 the input is bicubically enlarged for matching.
inline Grid synthesize(const Pipeline& p, const Grid& input, std::span<const Grid> refs, TrainMode mode,
                       std::size_t blur_factor = 2, std::size_t patch_size = 3) {
  const std::size_t L = p.phi.level_count();
  const std::size_t div = std::size_t{1} << (L - 1);
  const std::size_t oh = input.height() * static_cast<std::size_t>(p.net.scale_factor);
  const std::size_t ow = input.width() * static_cast<std::size_t>(p.net.scale_factor);
  if (oh % div != 0 || ow % div != 0) {
    throw ShapeError("synthesize: output size " + std::to_string(oh) + "x" + std::to_string(ow) +
                     " is not divisible by " + std::to_string(div));
  }
  const auto levels = texture_levels(mode, L);
  if (levels.empty()) return generate_without_texture(p.net, input);
  if (refs.empty()) throw ArgumentError("synthesize: texture modes need at least one reference");
  const Grid at_output = p.net.scale_factor == 1 ? input : bicubic_resize(input, oh, ow);
  const RefPyramids pools = reference_pyramids(p.phi, refs, blur_factor);
  const TextureMaps maps = match_image(p.phi, at_output, pools, levels, patch_size);
  ad::Tape tape;
  Binding bind(tape, false);
  return generate(bind, p.net, tape.constant(input), stage_textures(p.net, maps)).value();
}

}  // namespace ntg
