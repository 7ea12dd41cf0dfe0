#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <locale>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <type_traits>
#include <vector>

#include "ntg/autograd.hpp"
#include "ntg/featnet.hpp"
#include "ntg/formats.hpp"
#include "ntg/generator.hpp"
#include "ntg/losses.hpp"
#include "ntg/matchswap.hpp"
#include "ntg/metrics.hpp"
#include "ntg/network.hpp"
#include "ntg/toydata.hpp"

namespace ntg {

enum class TrainMode { full, single_scale_texture, no_texture };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::full: return "full";
    case TrainMode::single_scale_texture: return "single_scale_texture";
    case TrainMode::no_texture: return "no_texture";
  }
  return "?";
}

inline TrainMode parse_mode(std::string_view s) {
  if (s == "full") return TrainMode::full;
  if (s == "single_scale_texture" || s == "single") return TrainMode::single_scale_texture;
  if (s == "no_texture" || s == "none") return TrainMode::no_texture;
  throw ArgumentError("unknown mode '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 1;
  double lr0 = 2e-4;
  std::size_t lr_halving_period = 50;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_cyc = 10.0;
  double lambda_tex = 1e-4;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::full;
  std::vector<std::size_t> channel_plan = kDefaultChannelPlan;
  std::size_t ref_count = 4;
  std::size_t patch_size = 3;
  std::size_t blur_factor = 2;  // 1 disables the reference blur
  std::size_t checkpoint_period = 10;
  ToyDomainSpec corpus;

  double learning_rate(std::size_t epoch) const {
    return lr0 / std::ldexp(1.0, static_cast<int>(epoch / lr_halving_period));
  }

  LossWeights loss_weights() const { return {lambda_cyc, lambda_tex}; }

  void validate() const {
    if (batch_size < 1) throw ArgumentError("config: batch_size must be at least 1");
    if (lr_halving_period < 1) throw ArgumentError("config: lr_halving_period must be at least 1");
    if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw ArgumentError("config: lr0 must be finite and non-negative");
    if (channel_plan.size() < 2) throw ArgumentError("config: channel_plan needs at least two levels");
    if (ref_count < 1) throw ArgumentError("config: ref_count must be at least 1");
    if (blur_factor < 1) throw ArgumentError("config: blur_factor must be at least 1");
    if (checkpoint_period < 1) throw ArgumentError("config: checkpoint_period must be at least 1");
    const std::size_t div = std::size_t{1} << (channel_plan.size() - 1);
    if (corpus.image_size % div != 0) {
      throw ArgumentError("config: image_size must be divisible by " + std::to_string(div));
    }
  }
};

namespace detail {
inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  in.imbue(std::locale::classic());
  T out{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!v.empty() && v[0] == '-') throw ArgumentError("config: '" + key + "' must be non-negative");
  }
  in >> out;
  if (in.fail() || !in.eof()) throw ArgumentError("config: bad value '" + v + "' for '" + key + "'");
  return out;
}

inline std::vector<std::size_t> parse_plan(const std::string& key, const std::string& v) {
  std::vector<std::size_t> plan;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) plan.push_back(parse_number<std::size_t>(key, trim(item)));
  return plan;
}
}  // namespace detail

/// Applies one `key = value` setting.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  if (key == "epochs") c.epochs = parse_number<std::size_t>(key, value);
  else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "lr0") c.lr0 = parse_number<double>(key, value);
  else if (key == "lr_halving_period") c.lr_halving_period = parse_number<std::size_t>(key, value);
  else if (key == "adam_beta1") c.adam_beta1 = parse_number<double>(key, value);
  else if (key == "adam_beta2") c.adam_beta2 = parse_number<double>(key, value);
  else if (key == "adam_eps") c.adam_eps = parse_number<double>(key, value);
  else if (key == "lambda_cyc") c.lambda_cyc = parse_number<double>(key, value);
  else if (key == "lambda_tex") c.lambda_tex = parse_number<double>(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "mode") c.mode = parse_mode(value);
  else if (key == "channel_plan") c.channel_plan = detail::parse_plan(key, value);
  else if (key == "ref_count") c.ref_count = parse_number<std::size_t>(key, value);
  else if (key == "patch_size") c.patch_size = parse_number<std::size_t>(key, value);
  else if (key == "blur_factor") c.blur_factor = parse_number<std::size_t>(key, value);
  else if (key == "checkpoint_period") c.checkpoint_period = parse_number<std::size_t>(key, value);
  else if (key == "image_size") c.corpus.image_size = parse_number<std::size_t>(key, value);
  else if (key == "train_count") c.corpus.train_count = parse_number<std::size_t>(key, value);
  else if (key == "val_count") c.corpus.val_count = parse_number<std::size_t>(key, value);
  else throw ArgumentError("config: unknown key '" + key + "'");
}

/// Parses flat `key = value` text; `#` starts a comment.
inline TrainConfig parse_config(std::string_view text, TrainConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ArgumentError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ArgumentError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    apply_setting(base, key, value);
  }
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Three 3x3 stride-2 conv + leaky ReLU(0.2) layers, a 1x1 conv, a sigmoid
/// and a spatial mean.
struct Discriminator {
  std::vector<ConvLayer> convs;
  ConvLayer head;

  std::vector<ParamRef> parameters(const std::string& prefix) {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < convs.size(); ++i) append_params(out, prefix + ".conv" + std::to_string(i), convs[i]);
    append_params(out, prefix + ".head", head);
    return out;
  }
};

inline constexpr double kLeakySlope = 0.2;

inline Discriminator build_discriminator(std::uint64_t seed, std::size_t in_channels = 1,
                                         std::span<const std::size_t> widths = std::array<std::size_t, 3>{16, 32, 64}) {
  Discriminator d;
  WeightStream stream(seed);
  std::size_t in = in_channels;
  for (std::size_t w : widths) {
    d.convs.emplace_back(in, w, 3, 2, 1);
    d.convs.back().initialize(stream);
    in = w;
  }
  d.head = ConvLayer(in, 1, 1, 1, 0);
  d.head.initialize(stream);
  return d;
}

/// Probability that `x` is real, as a 1x1x1 node.
inline ad::Var discriminate(Binding& bind, const Discriminator& d, const ad::Var& x) {
  ad::Var h = x;
  for (const auto& c : d.convs) h = ad::leaky_relu(apply(bind, c, h), kLeakySlope);
  return ad::mean(ad::sigmoid(apply(bind, d.head, h)));
}

inline double discriminate(const Discriminator& d, const Grid& x) {
  ad::Tape tape;
  Binding bind(tape, false);
  return discriminate(bind, d, tape.constant(x)).value()[0];
}

/// Pre-extracted pyramids of a reference pool (raw for swapping, blurred for
/// matching).
struct RefPyramids {
  std::vector<FeaturePyramid> raw;
  std::vector<FeaturePyramid> blur;
};

inline RefPyramids reference_pyramids(const FeatureExtractor& phi, std::span<const Grid> images, std::size_t blur_factor) {
  RefPyramids r;
  for (const Grid& img : images) {
    r.raw.push_back(extract_pyramid(phi, img));
    r.blur.push_back(blur_factor > 1 ? extract_pyramid(phi, down_up_blur(img, blur_factor)) : r.raw.back());
  }
  return r;
}

/// Pyramid levels swapped for the texture loss in each mode (0 = finest).
inline std::vector<std::size_t> texture_levels(TrainMode mode, std::size_t level_count) {
  std::vector<std::size_t> out;
  if (mode == TrainMode::full) {
    for (std::size_t l = 0; l < level_count; ++l) out.push_back(l);
  } else if (mode == TrainMode::single_scale_texture) {
    out.push_back(0);
  }
  return out;
}

/// Texture maps for `image` against a reference pool at `levels`.
inline TextureMaps match_image(const FeatureExtractor& phi, const Grid& image, const RefPyramids& refs,
                               std::span<const std::size_t> levels, std::size_t patch_size) {
  if (levels.empty()) return TextureMaps(phi.level_count());
  SwapOptions opt;
  opt.patch_size = patch_size;
  return swap_pyramid(extract_pyramid(phi, image), refs.raw, refs.blur, levels, opt);
}

/// Both translation networks, both discriminators and their optimizers.
struct TrainState {
  FeatureExtractor phi;
  GeneratorNet G;  // X -> Y
  GeneratorNet F;  // Y -> X
  Discriminator DX;
  Discriminator DY;
  Adam opt_gen;
  Adam opt_disc;
  std::size_t steps = 0;

  std::vector<ParamRef> generator_params() {
    auto p = G.parameters("G");
    auto f = F.parameters("F");
    p.insert(p.end(), f.begin(), f.end());
    return p;
  }

  std::vector<ParamRef> discriminator_params() {
    auto p = DX.parameters("DX");
    auto y = DY.parameters("DY");
    p.insert(p.end(), y.begin(), y.end());
    return p;
  }

  std::vector<ParamRef> all_params() {
    auto p = phi.parameters();
    auto g = generator_params();
    auto d = discriminator_params();
    p.insert(p.end(), g.begin(), g.end());
    p.insert(p.end(), d.begin(), d.end());
    return p;
  }
};

/// Seed tags for the independent parameter streams.
enum : std::uint64_t { kTagPhi = 1, kTagG = 2, kTagF = 3, kTagDX = 4, kTagDY = 5, kTagOrder = 6, kTagRefs = 7 };

inline TrainState make_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s{build_extractor(derive_seed(cfg.seed, kTagPhi), cfg.channel_plan.size(), cfg.channel_plan),
               build_generator(derive_seed(cfg.seed, kTagG), cfg.channel_plan),
               build_generator(derive_seed(cfg.seed, kTagF), cfg.channel_plan),
               build_discriminator(derive_seed(cfg.seed, kTagDX)),
               build_discriminator(derive_seed(cfg.seed, kTagDY)),
               Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
               Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)};
  return s;
}

/// One unpaired training example: an X image, a Y image, each with its
/// texture maps against the opposite domain (empty in no_texture mode) and
/// the reference pools used to re-match the reconstructions.
struct StepInput {
  Grid x;
  Grid y;
  TextureMaps x_maps;          // phi(x) vs Y references
  TextureMaps y_maps;          // phi(y) vs X references
  const RefPyramids* refs_y = nullptr;  // for G(F(y))
  const RefPyramids* refs_x = nullptr;  // for F(G(x))
};

struct LossReport {
  double adv_G = 0;
  double adv_F = 0;
  double cyc = 0;
  double tex_G = 0;
  double tex_F = 0;
  double total = 0;
  double disc_X = 0;  // ln D_X(x) + ln(1 - D_X(F(y)))
  double disc_Y = 0;  // ln D_Y(y) + ln(1 - D_Y(G(x)))

  LossReport& operator+=(const LossReport& o) {
    adv_G += o.adv_G, adv_F += o.adv_F, cyc += o.cyc, tex_G += o.tex_G, tex_F += o.tex_F, total += o.total;
    disc_X += o.disc_X, disc_Y += o.disc_Y;
    return *this;
  }
  LossReport scaled(double a) const {
    return {adv_G * a, adv_F * a, cyc * a, tex_G * a, tex_F * a, total * a, disc_X * a, disc_Y * a};
  }
};

namespace detail {
inline void check_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericError(term, std::string("non-finite ") + term + " loss");
}

inline std::vector<Grid> collect_gradients(const Binding& bind, const std::vector<ParamRef>& params) {
  std::vector<Grid> g;
  g.reserve(params.size());
  for (const auto& p : params) g.push_back(bind.gradient(*p.value));
  return g;
}

inline void accumulate_into(std::vector<Grid>& sum, const std::vector<Grid>& g) {
  if (sum.empty()) {
    sum = g;
    return;
  }
  for (std::size_t k = 0; k < g.size(); ++k)
    for (std::size_t i = 0; i < g[k].size(); ++i) sum[k][i] += g[k][i];
}

inline std::vector<Grid*> pointers(const std::vector<ParamRef>& params) {
  std::vector<Grid*> out;
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

/// Texture maps for a generated image at the levels its consumer's stages use.
inline std::vector<Grid> reconstruction_textures(const TrainState& s, const GeneratorNet& net, const Grid& fake,
                                                 const RefPyramids* refs, TrainMode mode, std::size_t patch_size) {
  if (mode != TrainMode::full || refs == nullptr) return std::vector<Grid>(net.stages.size());
  std::vector<std::size_t> levels;
  for (std::size_t t = 0; t < net.stages.size(); ++t) levels.push_back(net.stage_level(t));
  return stage_textures(net, match_image(s.phi, fake, *refs, levels, patch_size));
}

/// Generator forward pass of Eqs. 4 and 8 recorded on `tape`.
struct GeneratorPass {
  ad::Var x, y, gx, fy, fgx, gfy;
};

inline GeneratorPass generator_forward(Binding& bind, TrainState& s, const StepInput& in, TrainMode mode,
                                       std::size_t patch_size) {
  ad::Tape& tape = bind.tape();
  GeneratorPass p;
  p.x = tape.constant(in.x);
  p.y = tape.constant(in.y);
  p.gx = generate(bind, s.G, p.x, stage_textures(s.G, in.x_maps));
  p.fy = generate(bind, s.F, p.y, stage_textures(s.F, in.y_maps));
  p.fgx = generate(bind, s.F, p.gx, reconstruction_textures(s, s.F, p.gx.value(), in.refs_x, mode, patch_size));
  p.gfy = generate(bind, s.G, p.fy, reconstruction_textures(s, s.G, p.fy.value(), in.refs_y, mode, patch_size));
  return p;
}
}  // namespace detail

/// Texture loss of a generated image's pyramid (recorded) against the maps
/// of its input. Zero when no level is swapped.
inline ad::Var recorded_texture_loss(const FeatureExtractor& phi, const ad::Var& image, const TextureMaps& maps) {
  ad::Tape& tape = image.tape();
  bool any = false;
  for (const auto& m : maps) any = any || m.has_value();
  if (!any) return tape.constant(Grid(1, 1, 1));
  Binding frozen(tape, false);
  auto pyr = extract_pyramid(frozen, phi, image);
  return texture_loss(pyr, maps);
}

/// One optimization step over a batch: a discriminator ascent step on Eqs. 6
/// and 7 for D_X and D_Y, then a generator descent step on Eq. 9 for G and F
/// against the updated discriminators. Gradients are averaged over the batch.
inline LossReport train_batch(TrainState& s, std::span<const StepInput> batch, const TrainConfig& cfg, double lr) {
  if (batch.empty()) throw ArgumentError("train_batch: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  const LossWeights w = cfg.loss_weights();
  LossReport report;

  // Generator forward passes are recorded first; the discriminator step only
  // sees their values.
  std::vector<std::unique_ptr<ad::Tape>> tapes;
  std::vector<std::unique_ptr<Binding>> binds;
  std::vector<detail::GeneratorPass> passes;
  for (const StepInput& in : batch) {
    tapes.push_back(std::make_unique<ad::Tape>());
    binds.push_back(std::make_unique<Binding>(*tapes.back(), true));
    passes.push_back(detail::generator_forward(*binds.back(), s, in, cfg.mode, cfg.patch_size));
  }

  auto dparams = s.discriminator_params();
  std::vector<Grid> dgrad;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ad::Tape tape;
    Binding bind(tape, true);
    ad::Var ly = adversarial_loss(discriminate(bind, s.DY, tape.constant(batch[b].y)),
                                  discriminate(bind, s.DY, tape.constant(passes[b].gx.value())));
    ad::Var lx = adversarial_loss(discriminate(bind, s.DX, tape.constant(batch[b].x)),
                                  discriminate(bind, s.DX, tape.constant(passes[b].fy.value())));
    detail::check_finite(ly.value()[0], "adv_G");
    detail::check_finite(lx.value()[0], "adv_F");
    report.disc_Y += ly.value()[0] * inv;
    report.disc_X += lx.value()[0] * inv;
    // Ascent on the adversarial objective.
    tape.backward(ad::scale(ad::add(lx, ly), -inv));
    detail::accumulate_into(dgrad, detail::collect_gradients(bind, dparams));
  }
  s.opt_disc.step(detail::pointers(dparams), dgrad, lr);

  auto gparams = s.generator_params();
  std::vector<Grid> ggrad;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const detail::GeneratorPass& p = passes[b];
    Binding& bind = *binds[b];
    ad::Tape& tape = *tapes[b];
    Binding frozen(tape, false);
    ad::Var adv_g = generator_adversarial_loss(discriminate(frozen, s.DY, p.gx));
    ad::Var adv_f = generator_adversarial_loss(discriminate(frozen, s.DX, p.fy));
    ad::Var cyc = cycle_loss(p.x, p.fgx, p.y, p.gfy);
    ad::Var tex_g = recorded_texture_loss(s.phi, p.gx, batch[b].x_maps);
    ad::Var tex_f = recorded_texture_loss(s.phi, p.fy, batch[b].y_maps);
    ad::Var total = total_objective(adv_g, adv_f, cyc, tex_g, tex_f, w);
    const LossReport r{adv_g.value()[0], adv_f.value()[0], cyc.value()[0], tex_g.value()[0], tex_f.value()[0],
                       total.value()[0], 0.0, 0.0};
    detail::check_finite(r.adv_G, "adv_G");
    detail::check_finite(r.adv_F, "adv_F");
    detail::check_finite(r.cyc, "cyc");
    detail::check_finite(r.tex_G, "tex_G");
    detail::check_finite(r.tex_F, "tex_F");
    detail::check_finite(r.total, "total");
    LossReport scaled = r.scaled(inv);
    report.adv_G += scaled.adv_G, report.adv_F += scaled.adv_F, report.cyc += scaled.cyc;
    report.tex_G += scaled.tex_G, report.tex_F += scaled.tex_F, report.total += scaled.total;
    tape.backward(ad::scale(total, inv));
    detail::accumulate_into(ggrad, detail::collect_gradients(bind, gparams));
  }
  s.opt_gen.step(detail::pointers(gparams), ggrad, lr);
  ++s.steps;
  return report;
}

inline LossReport train_step(TrainState& s, const StepInput& in, const TrainConfig& cfg, double lr) {
  return train_batch(s, std::span<const StepInput>(&in, 1), cfg, lr);
}

// ---------------------------------------------------------------------------
// Training run

/// Formats a value for CSV output with 9 significant digits.
inline std::string csv_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct EpochRow {
  std::size_t epoch = 0;
  double lr = 0;
  LossReport loss;
  double val_psnr = 0;
  double val_ssim = 0;
};

inline const char* kTrainCsvHeader = "epoch,lr,adv_G,adv_F,cyc,tex_G,tex_F,total,val_psnr,val_ssim";

inline std::string csv_row(const EpochRow& r) {
  std::string s = std::to_string(r.epoch);
  for (double v : {r.lr, r.loss.adv_G, r.loss.adv_F, r.loss.cyc, r.loss.tex_G, r.loss.tex_F, r.loss.total, r.val_psnr,
                   r.val_ssim}) {
    s += ',';
    s += csv_number(v);
  }
  return s;
}

/// Fixed per-image sample of `count` distinct reference indices from a pool.
inline std::vector<std::vector<std::size_t>> sample_references(std::uint64_t seed, std::size_t images, std::size_t pool,
                                                               std::size_t count) {
  if (pool == 0) throw ArgumentError("sample_references: empty reference pool");
  count = std::min(count, pool);
  WeightStream rng(seed);
  std::vector<std::vector<std::size_t>> out(images);
  for (auto& sel : out) {
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.next_index(pool - i)]);
    sel.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
  }
  return out;
}

inline std::vector<std::size_t> shuffled(WeightStream& rng, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next_index(i)]);
  return idx;
}

/// Checkpoint content: every parameter plus the channel plan.
inline NtxMap checkpoint(TrainState& s) {
  NtxMap m;
  store_params(m, s.all_params());
  NtxArray plan{{static_cast<std::uint32_t>(s.G.plan.size())}, {}};
  for (std::size_t c : s.G.plan) plan.values.push_back(static_cast<double>(c));
  m["meta.plan"] = plan;
  return m;
}

inline std::vector<std::size_t> plan_from_weights(const NtxMap& m) {
  auto it = m.find("meta.plan");
  if (it == m.end()) throw FormatError(FormatIssue::unsupported, "weights file lacks section 'meta.plan'");
  std::vector<std::size_t> plan;
  for (double v : it->second.values) {
    if (!(v >= 1.0) || v != std::floor(v) || v > 65536.0) {
      throw FormatError(FormatIssue::unsupported, "weights file has an invalid channel plan");
    }
    plan.push_back(static_cast<std::size_t>(v));
  }
  if (plan.size() < 2) throw FormatError(FormatIssue::unsupported, "weights file channel plan needs two levels");
  return plan;
}

/// Everything prepared once per run: corpus, models, reference pyramids and
/// the cached texture maps of the real training images.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg) : cfg_(cfg), state_(make_train_state(cfg)) {
    corpus_ = make_toy_corpus(cfg.corpus);
    if (corpus_.x_train.empty() || corpus_.y_train.empty()) throw ArgumentError("train: empty training corpus");
    const std::size_t n = corpus_.x_train.size();
    const std::size_t levels = cfg.channel_plan.size();
    const auto tex_levels = texture_levels(cfg.mode, levels);
    // refs for x_i come from Y; refs for y_j from X.
    const auto sel_y = sample_references(derive_seed(cfg.seed, kTagRefs), n, corpus_.y_train.size(), cfg.ref_count);
    const auto sel_x = sample_references(derive_seed(cfg.seed, kTagRefs + 100), corpus_.y_train.size(), n, cfg.ref_count);
    const auto val_sel = sample_references(derive_seed(cfg.seed, kTagRefs + 200), 1, corpus_.y_train.size(), cfg.ref_count);
    const bool textured = cfg.mode != TrainMode::no_texture;
    auto pool = [&](const std::vector<Grid>& src, const std::vector<std::size_t>& sel) {
      std::vector<Grid> imgs;
      for (std::size_t i : sel) imgs.push_back(src[i]);
      return reference_pyramids(state_.phi, imgs, cfg.blur_factor);
    };
    for (std::size_t i = 0; i < n; ++i) {
      refs_for_x_.push_back(textured ? pool(corpus_.y_train, sel_y[i]) : RefPyramids{});
      x_maps_.push_back(textured ? match_image(state_.phi, corpus_.x_train[i], refs_for_x_.back(), tex_levels,
                                               cfg.patch_size)
                                 : TextureMaps(levels));
    }
    for (std::size_t j = 0; j < corpus_.y_train.size(); ++j) {
      refs_for_y_.push_back(textured ? pool(corpus_.x_train, sel_x[j]) : RefPyramids{});
      y_maps_.push_back(textured ? match_image(state_.phi, corpus_.y_train[j], refs_for_y_.back(), tex_levels,
                                               cfg.patch_size)
                                 : TextureMaps(levels));
    }
    if (textured) val_refs_ = pool(corpus_.y_train, val_sel[0]);
    order_rng_.emplace(derive_seed(cfg.seed, kTagOrder));
  }

  TrainState& state() { return state_; }
  const ToyCorpus& corpus() const { return corpus_; }
  const TrainConfig& config() const { return cfg_; }

  /// G(x) for a validation or test image, using the validation references.
  Grid translate(const Grid& x) {
    if (cfg_.mode != TrainMode::full) return generate_without_texture(state_.G, x);
    const auto levels = texture_levels(TrainMode::full, cfg_.channel_plan.size());
    const auto maps = match_image(state_.phi, x, val_refs_, levels, cfg_.patch_size);
    ad::Tape tape;
    Binding bind(tape, false);
    return generate(bind, state_.G, tape.constant(x), stage_textures(state_.G, maps)).value();
  }

  /// Mean PSNR and SSIM of G(x) against the paired ground truth.
  std::pair<double, double> validate() {
    if (corpus_.val_x.empty()) return {0.0, 0.0};
    double p = 0, q = 0;
    for (std::size_t i = 0; i < corpus_.val_x.size(); ++i) {
      const Grid out = metrics::to_8bit(translate(corpus_.val_x[i]));
      const Grid tgt = metrics::to_8bit(corpus_.val_y[i]);
      p += metrics::psnr(out, tgt);
      q += metrics::ssim(out, tgt);
    }
    const double n = static_cast<double>(corpus_.val_x.size());
    return {p / n, q / n};
  }

  /// One epoch over a fresh shuffle of both domains.
  EpochRow run_epoch(std::size_t epoch) {
    const double lr = cfg_.learning_rate(epoch);
    const std::size_t n = corpus_.x_train.size();
    const auto px = shuffled(*order_rng_, n);
    const auto py = shuffled(*order_rng_, corpus_.y_train.size());
    LossReport sum;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < n; i += cfg_.batch_size) {
      std::vector<StepInput> batch;
      for (std::size_t k = i; k < std::min(n, i + cfg_.batch_size); ++k) {
        const std::size_t xi = px[k], yi = py[k % py.size()];
        const bool textured = cfg_.mode != TrainMode::no_texture;
        batch.push_back(StepInput{corpus_.x_train[xi], corpus_.y_train[yi], x_maps_[xi], y_maps_[yi],
                                  textured ? &refs_for_x_[xi] : nullptr, textured ? &refs_for_y_[yi] : nullptr});
      }
      sum += train_batch(state_, batch, cfg_, lr);
      ++batches;
    }
    EpochRow row{epoch, lr, sum.scaled(1.0 / static_cast<double>(batches)), 0, 0};
    std::tie(row.val_psnr, row.val_ssim) = validate();
    return row;
  }

 private:
  TrainConfig cfg_;
  TrainState state_;
  ToyCorpus corpus_;
  std::vector<RefPyramids> refs_for_x_, refs_for_y_;
  std::vector<TextureMaps> x_maps_, y_maps_;
  RefPyramids val_refs_;
  std::optional<WeightStream> order_rng_;
};

inline std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_epoch_%03zu.ntx1", epoch);
  return buf;
}

inline void ensure_writable(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("output directory " + dir.string() + " is not writable");
  const auto probe = dir / ".ntg_write_probe";
  {
    std::ofstream f(probe, std::ios::binary);
    if (!f) throw IoError("output directory " + dir.string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

struct TrainResult {
  std::vector<EpochRow> rows;
};

/// Runs the full schedule, writing `metrics.csv`, periodic checkpoints and
/// `final.ntx1` into `out_dir`. `on_epoch` is called after each epoch.
template <class OnEpoch>
TrainResult run_training(const TrainConfig& cfg, const std::filesystem::path& out_dir, OnEpoch&& on_epoch) {
  cfg.validate();
  ensure_writable(out_dir);
  Trainer trainer(cfg);
  TrainResult result;
  std::string csv = std::string(kTrainCsvHeader) + "\n";
  write_ntx1(checkpoint(trainer.state()), out_dir / checkpoint_name(0));
  detail::write_text_atomic(out_dir / "metrics.csv", csv);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochRow row = trainer.run_epoch(e);
    result.rows.push_back(row);
    csv += csv_row(row) + "\n";
    detail::write_text_atomic(out_dir / "metrics.csv", csv);
    if ((e + 1) % cfg.checkpoint_period == 0) write_ntx1(checkpoint(trainer.state()), out_dir / checkpoint_name(e + 1));
    on_epoch(row);
  }
  if (cfg.epochs >= 1) write_ntx1(checkpoint(trainer.state()), out_dir / "final.ntx1");
  return result;
}

inline TrainResult run_training(const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  return run_training(cfg, out_dir, [](const EpochRow&) {});
}

}  // namespace ntg
