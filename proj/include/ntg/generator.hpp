#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ntg/autograd.hpp"
#include "ntg/matchswap.hpp"
#include "ntg/network.hpp"

namespace ntg {

/// One recursive fusion stage: xi' = up(Res(xi (+) T) + xi), where
/// Res = conv3x3 -> ReLU -> conv3x3 and up = nearest 2x then conv3x3.
struct FusionStage {
  ConvLayer res_a;
  ConvLayer res_b;
  ConvLayer up;
};

/// Translation network. The encoder maps the input to the base code xi_0 at
/// the coarsest pyramid resolution; stage t consumes the texture map of
/// pyramid level L-1-t (0 = finest) and doubles the resolution; the head maps
/// the final code to an image.
///
/// The texture pyramid is always taken at output resolution. In
/// super-resolution mode (scale_factor 2) the first encoder layer runs with
/// stride 1, so a H x W input yields a 2H x 2W output.
struct GeneratorNet {
  std::vector<std::size_t> plan;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  int scale_factor = 1;
  std::vector<ConvLayer> encoder;
  std::vector<FusionStage> stages;
  ConvLayer head;

  std::size_t levels() const { return plan.size(); }

  /// Pyramid level whose texture map stage `t` consumes.
  std::size_t stage_level(std::size_t t) const { return plan.size() - 1 - t; }

  std::vector<ParamRef> parameters(const std::string& prefix) {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < encoder.size(); ++i) append_params(out, prefix + ".enc" + std::to_string(i), encoder[i]);
    for (std::size_t t = 0; t < stages.size(); ++t) {
      const std::string s = prefix + ".stage" + std::to_string(t);
      append_params(out, s + ".res_a", stages[t].res_a);
      append_params(out, s + ".res_b", stages[t].res_b);
      append_params(out, s + ".up", stages[t].up);
    }
    append_params(out, prefix + ".head", head);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters("g")) n += p.value->size();
    return n;
  }
};

inline GeneratorNet build_generator(std::uint64_t seed, std::span<const std::size_t> plan, std::size_t in_channels = 1,
                                    std::size_t out_channels = 1) {
  if (plan.size() < 2) throw ArgumentError("build_generator: need at least two pyramid levels");
  GeneratorNet net;
  net.plan.assign(plan.begin(), plan.end());
  net.in_channels = in_channels;
  net.out_channels = out_channels;
  const std::size_t L = plan.size();
  WeightStream stream(seed);
  std::size_t in = in_channels;
  for (std::size_t i = 0; i + 1 < L; ++i) {
    net.encoder.emplace_back(in, plan[i + 1], 3, 2, 1);
    net.encoder.back().initialize(stream);
    in = plan[i + 1];
  }
  for (std::size_t t = 0; t + 1 < L; ++t) {
    const std::size_t lv = L - 1 - t;
    const std::size_t c = plan[lv];
    FusionStage st{ConvLayer(2 * c, c, 3, 1, 1), ConvLayer(c, c, 3, 1, 1), ConvLayer(c, plan[lv - 1], 3, 1, 1)};
    st.res_a.initialize(stream);
    st.res_b.initialize(stream);
    st.up.initialize(stream);
    net.stages.push_back(std::move(st));
  }
  net.head = ConvLayer(plan[0], out_channels, 3, 1, 1);
  net.head.initialize(stream);
  return net;
}

/// Recording forward pass. `stage_textures` holds one map per stage, coarsest
/// first; an empty grid stands for an all-zero map. When `trace` is given the
/// code xi_t after every stage (xi_0 first) is appended to it.
inline ad::Var generate(Binding& bind, const GeneratorNet& net, const ad::Var& input,
                        std::span<const Grid> stage_textures, std::vector<Grid>* trace = nullptr) {
  if (input.value().channels() != net.in_channels) {
    throw ShapeError("generate: input has " + std::to_string(input.value().channels()) + " channels, expected " +
                     std::to_string(net.in_channels));
  }
  if (net.scale_factor != 1 && net.scale_factor != 2) throw ArgumentError("generate: scale factor must be 1 or 2");
  if (stage_textures.size() != net.stages.size()) {
    throw ArgumentError("generate: expected " + std::to_string(net.stages.size()) + " texture maps, got " +
                        std::to_string(stage_textures.size()));
  }
  ad::Tape& tape = bind.tape();
  ad::Var xi = input;
  for (std::size_t i = 0; i < net.encoder.size(); ++i) {
    ConvGeometry g = net.encoder[i].geom;
    if (i == 0 && net.scale_factor == 2) g.stride = 1;
    xi = ad::relu(ad::conv2d(xi, bind(net.encoder[i].weight), bind(net.encoder[i].bias), g));
  }
  if (trace) trace->push_back(xi.value());
  for (std::size_t t = 0; t < net.stages.size(); ++t) {
    const FusionStage& st = net.stages[t];
    const Shape xs = xi.value().shape();
    const std::size_t level = net.stage_level(t);
    ad::Var tex;
    if (stage_textures[t].empty()) {
      tex = tape.constant(Grid(st.res_a.geom.in - xs.channels, xs.height, xs.width));
    } else {
      const Grid& T = stage_textures[t];
      if (T.height() != xs.height || T.width() != xs.width || T.channels() + xs.channels != st.res_a.geom.in) {
        throw ShapeError("generate: texture map for pyramid level " + std::to_string(level + 1) + " is " +
                         T.shape().to_string() + ", stage expects " +
                         std::to_string(st.res_a.geom.in - xs.channels) + "x" + std::to_string(xs.height) + "x" +
                         std::to_string(xs.width));
      }
      tex = tape.constant(T);
    }
    ad::Var r = apply(bind, st.res_b, ad::relu(apply(bind, st.res_a, ad::concat(xi, tex))));
    xi = apply(bind, st.up, ad::upsample_nearest2(ad::add(r, xi)));
    if (trace) trace->push_back(xi.value());
  }
  return apply(bind, net.head, xi);
}

/// Texture maps the stages consume, coarsest first, taken from per-level
/// swap results (empty grid where a level was not swapped).
inline std::vector<Grid> stage_textures(const GeneratorNet& net, const TextureMaps& maps) {
  std::vector<Grid> out;
  for (std::size_t t = 0; t < net.stages.size(); ++t) {
    const std::size_t l = net.stage_level(t);
    out.push_back(l < maps.size() && maps[l] ? maps[l]->swapped : Grid{});
  }
  return out;
}

/// Runs the generator with swapped maps given coarsest first (one per stage).
inline Grid generate(const GeneratorNet& net, const Grid& input, std::span<const SwapResult> swaps,
                     std::vector<Grid>* trace = nullptr) {
  if (swaps.size() != net.stages.size()) {
    throw ArgumentError("generate: expected " + std::to_string(net.stages.size()) + " swap results, got " +
                        std::to_string(swaps.size()));
  }
  std::vector<Grid> tex;
  for (const auto& s : swaps) tex.push_back(s.swapped);
  ad::Tape tape;
  Binding bind(tape, false);
  return generate(bind, net, tape.constant(input), tex, trace).value();
}

/// Same recursion with every texture map replaced by zeros.
inline Grid generate_without_texture(const GeneratorNet& net, const Grid& input, std::vector<Grid>* trace = nullptr) {
  std::vector<Grid> tex(net.stages.size());
  ad::Tape tape;
  Binding bind(tape, false);
  return generate(bind, net, tape.constant(input), tex, trace).value();
}

}  // namespace ntg
