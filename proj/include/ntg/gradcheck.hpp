#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ntg/autograd.hpp"
#include "ntg/featnet.hpp"
#include "ntg/generator.hpp"
#include "ntg/losses.hpp"
#include "ntg/matchswap.hpp"
#include "ntg/trainer.hpp"

namespace ntg {

/// Seeded toy instance of the whole objective: two generators, two
/// discriminators, one image per domain and fixed texture maps.
///
/// Texture maps (including those of the reconstruction pass) are computed
/// once at the base point and held constant; the patch argmax is piecewise
/// constant, so this is the derivative almost everywhere.
class GradcheckInstance {
 public:
  GradcheckInstance(std::size_t size, std::uint64_t seed) : size_(size) {
    if (size < 6 || size > 16 || size % 2 != 0) throw ArgumentError("gradcheck: size must be even and in [6, 16]");
    const std::vector<std::size_t> plan{4, 8};
    phi_ = build_extractor(derive_seed(seed, 11), plan.size(), plan);
    G_ = build_generator(derive_seed(seed, 12), plan);
    F_ = build_generator(derive_seed(seed, 13), plan);
    DX_ = build_discriminator(derive_seed(seed, 14));
    DY_ = build_discriminator(derive_seed(seed, 15));
    WeightStream rng(derive_seed(seed, 16));
    auto image = [&] {
      Grid g(1, size, size);
      for (double& v : g.values()) v = 0.1 + 0.8 * rng.next_unit();
      return g;
    };
    x_ = image();
    y_ = image();
    const std::vector<Grid> xs{image(), image()}, ys{image(), image()};
    const RefPyramids refs_x = reference_pyramids(phi_, xs, 2), refs_y = reference_pyramids(phi_, ys, 2);
    const std::vector<std::size_t> levels{0, 1};
    x_maps_ = match_image(phi_, x_, refs_y, levels, 3);
    y_maps_ = match_image(phi_, y_, refs_x, levels, 3);
    tex_x_ = stage_textures(G_, x_maps_);
    tex_y_ = stage_textures(F_, y_maps_);
    recon_x_ = stage_textures(F_, match_image(phi_, generate(G_, x_, stage_results(tex_x_)), refs_x, levels, 3));
    recon_y_ = stage_textures(G_, match_image(phi_, generate(F_, y_, stage_results(tex_y_)), refs_y, levels, 3));

    groups_.push_back({"G", refs_of(G_.parameters("G"))});
    groups_.push_back({"F", refs_of(F_.parameters("F"))});
    groups_.push_back({"D_X", refs_of(DX_.parameters("DX"))});
    groups_.push_back({"D_Y", refs_of(DY_.parameters("DY"))});
    groups_.push_back({"x", {&x_}});
    groups_.push_back({"y", {&y_}});
  }

  enum class Term { texture, adversarial_G, adversarial_F, cycle, total };
  static constexpr Term kTerms[] = {Term::texture, Term::adversarial_G, Term::adversarial_F, Term::cycle, Term::total};

  static const char* name(Term t) {
    switch (t) {
      case Term::texture: return "texture";
      case Term::adversarial_G: return "adversarial_G";
      case Term::adversarial_F: return "adversarial_F";
      case Term::cycle: return "cycle";
      case Term::total: return "total";
    }
    return "?";
  }

  struct Group {
    std::string name;
    std::vector<Grid*> arrays;
    std::size_t size() const {
      std::size_t n = 0;
      for (const Grid* g : arrays) n += g->size();
      return n;
    }
  };

  const std::vector<Group>& groups() const { return groups_; }

  /// Loss value with every array as a constant.
  double value(Term term) {
    ad::Tape tape;
    Binding bind(tape, false);
    return record(bind, term).value()[0];
  }

  /// Analytic gradient of the term for every group, flattened per group.
  std::vector<std::vector<double>> gradients(Term term) {
    ad::Tape tape;
    Binding bind(tape, true);
    ad::Var loss = record(bind, term);
    tape.backward(loss);
    std::vector<std::vector<double>> out;
    for (const auto& g : groups_) {
      std::vector<double> flat;
      for (const Grid* a : g.arrays) {
        const Grid d = bind.gradient(*a);
        flat.insert(flat.end(), d.values().begin(), d.values().end());
      }
      out.push_back(std::move(flat));
    }
    return out;
  }

  double& coordinate(std::size_t group, std::size_t i) {
    for (Grid* a : groups_[group].arrays) {
      if (i < a->size()) return (*a)[i];
      i -= a->size();
    }
    throw ArgumentError("gradcheck: coordinate out of range");
  }

 private:
  static std::vector<Grid*> refs_of(const std::vector<ParamRef>& params) {
    std::vector<Grid*> out;
    for (const auto& p : params) out.push_back(p.value);
    return out;
  }

  static std::vector<SwapResult> stage_results(const std::vector<Grid>& tex) {
    std::vector<SwapResult> out(tex.size());
    for (std::size_t i = 0; i < tex.size(); ++i) out[i].swapped = tex[i];
    return out;
  }

  ad::Var record(Binding& bind, Term term) {
    ad::Tape& tape = bind.tape();
    // Input pixels go through the binding so they become leaves when trainable.
    ad::Var x = bind(x_), y = bind(y_);
    ad::Var gx = generate(bind, G_, x, tex_x_);
    ad::Var fy = generate(bind, F_, y, tex_y_);
    switch (term) {
      case Term::texture:
        return ad::add(recorded_texture_loss(phi_, gx, x_maps_), recorded_texture_loss(phi_, fy, y_maps_));
      case Term::adversarial_G:
        return adversarial_loss(discriminate(bind, DY_, y), discriminate(bind, DY_, gx));
      case Term::adversarial_F:
        return adversarial_loss(discriminate(bind, DX_, x), discriminate(bind, DX_, fy));
      case Term::cycle:
      case Term::total: {
        ad::Var fgx = generate(bind, F_, gx, recon_x_);
        ad::Var gfy = generate(bind, G_, fy, recon_y_);
        ad::Var cyc = cycle_loss(x, fgx, y, gfy);
        if (term == Term::cycle) return cyc;
        return total_objective(generator_adversarial_loss(discriminate(bind, DY_, gx)),
                               generator_adversarial_loss(discriminate(bind, DX_, fy)), cyc,
                               recorded_texture_loss(phi_, gx, x_maps_), recorded_texture_loss(phi_, fy, y_maps_));
      }
    }
    (void)tape;
    throw ArgumentError("gradcheck: unknown term");
  }

  std::size_t size_;
  FeatureExtractor phi_;
  GeneratorNet G_, F_;
  Discriminator DX_, DY_;
  Grid x_, y_;
  TextureMaps x_maps_, y_maps_;
  std::vector<Grid> tex_x_, tex_y_, recon_x_, recon_y_;
  std::vector<Group> groups_;
};

struct GradcheckGroupResult {
  std::string group;
  ad::GradCheckResult result;
};

struct GradcheckTermResult {
  std::string term;
  double max_relative_error = 0;
  std::string worst_group;
  std::vector<GradcheckGroupResult> groups;
};

struct GradcheckReport {
  double tolerance = 1e-4;
  std::vector<GradcheckTermResult> terms;

  bool passed() const {
    return std::all_of(terms.begin(), terms.end(),
                       [&](const GradcheckTermResult& t) { return t.max_relative_error < tolerance; });
  }

  /// First failing term, or empty.
  std::string first_failure() const {
    for (const auto& t : terms)
      if (!(t.max_relative_error < tolerance)) return t.term;
    return {};
  }

  std::string text() const {
    std::string s = "term,max_rel_error,worst_group,coords,status\n";
    for (const auto& t : terms) {
      std::size_t n = 0;
      for (const auto& g : t.groups) n += g.result.checked;
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s,%.3e,%s,%zu,%s\n", t.term.c_str(), t.max_relative_error, t.worst_group.c_str(),
                    n, t.max_relative_error < tolerance ? "ok" : "FAIL");
      s += buf;
    }
    return s;
  }
};

/// Central-difference check of every term against the recorded gradients,
/// over up to `per_group` seeded random coordinates of each group.
inline GradcheckReport run_gradcheck(std::size_t size, std::uint64_t seed, double h = 1e-5,
                                     std::size_t per_group = 250, double tolerance = 1e-4) {
  GradcheckInstance inst(size, seed);
  GradcheckReport report;
  report.tolerance = tolerance;
  WeightStream pick(derive_seed(seed, 17));
  std::vector<std::vector<std::size_t>> coords;
  for (const auto& g : inst.groups()) {
    const std::size_t n = g.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t m = std::min(n, per_group);
    for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + pick.next_index(n - i)]);
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    coords.push_back(std::move(idx));
  }
  for (auto term : GradcheckInstance::kTerms) {
    GradcheckTermResult tr;
    tr.term = GradcheckInstance::name(term);
    const auto grads = inst.gradients(term);
    for (std::size_t gi = 0; gi < inst.groups().size(); ++gi) {
      // Only the checked coordinates are perturbed; the point vector is the
      // list of their current values.
      const auto& cs = coords[gi];
      std::vector<double> point, analytic;
      for (std::size_t c : cs) {
        point.push_back(inst.coordinate(gi, c));
        analytic.push_back(grads[gi][c]);
      }
      auto f = [&](std::span<const double> p) {
        for (std::size_t k = 0; k < cs.size(); ++k) inst.coordinate(gi, cs[k]) = p[k];
        return inst.value(term);
      };
      auto res = ad::finite_diff_check(f, point, analytic, h);
      for (std::size_t k = 0; k < cs.size(); ++k) inst.coordinate(gi, cs[k]) = point[k];
      res.worst_coordinate = cs.empty() ? 0 : cs[res.worst_coordinate];
      if (res.max_relative_error > tr.max_relative_error || tr.groups.empty()) {
        if (res.max_relative_error >= tr.max_relative_error) {
          tr.max_relative_error = res.max_relative_error;
          tr.worst_group = inst.groups()[gi].name;
        }
      }
      tr.groups.push_back({inst.groups()[gi].name, res});
    }
    report.terms.push_back(std::move(tr));
  }
  return report;
}

}  // namespace ntg
