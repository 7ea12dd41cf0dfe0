#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "ntg/autograd.hpp"
#include "ntg/formats.hpp"
#include "ntg/grid.hpp"

namespace ntg {

/// A convolution layer's parameters. Weights are stored as out x in x (kh*kw).
struct ConvLayer {
  ConvGeometry geom;
  Grid weight;
  Grid bias;

  ConvLayer() = default;
  ConvLayer(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad)
      : geom{in, out, k, k, stride, pad}, weight(out, in, k * k), bias(out, 1, 1) {}

  std::size_t parameter_count() const { return weight.size() + bias.size(); }

  /// He-scaled weights from the stream (out, in, kh, kw order); zero biases.
  void initialize(WeightStream& stream) {
    stream.fill_he(weight.values(), geom.patch_length());
    bias.fill(0.0);
  }

  /// Weight dims for serialization: out, in, kh, kw.
  std::vector<std::uint32_t> weight_dims() const {
    return {static_cast<std::uint32_t>(geom.out), static_cast<std::uint32_t>(geom.in),
            static_cast<std::uint32_t>(geom.kh), static_cast<std::uint32_t>(geom.kw)};
  }
};

/// Named pointer to one trainable array.
struct ParamRef {
  std::string name;
  Grid* value;
  std::vector<std::uint32_t> dims;
};

inline void append_params(std::vector<ParamRef>& out, const std::string& prefix, ConvLayer& layer) {
  out.push_back({prefix + ".weight", &layer.weight, layer.weight_dims()});
  out.push_back({prefix + ".bias", &layer.bias, {static_cast<std::uint32_t>(layer.geom.out)}});
}

/// Maps parameter arrays onto tape leaves for one forward pass. Leaves are
/// created on first use; with `trainable` false they are constants.
class Binding {
 public:
  Binding(ad::Tape& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

  ad::Var operator()(const Grid& param) {
    auto it = vars_.find(&param);
    if (it != vars_.end()) return it->second;
    ad::Var v = trainable_ ? tape_->variable(param) : tape_->constant(param);
    vars_.emplace(&param, v);
    return v;
  }

  /// Gradient for `param` after backward; zeros if it was never used.
  Grid gradient(const Grid& param) const {
    auto it = vars_.find(&param);
    return it == vars_.end() ? Grid(param.shape()) : tape_->gradient(it->second);
  }

  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Tape* tape_;
  bool trainable_;
  std::unordered_map<const Grid*, ad::Var> vars_;
};

inline ad::Var apply(Binding& bind, const ConvLayer& layer, const ad::Var& x) {
  return ad::conv2d(x, bind(layer.weight), bind(layer.bias), layer.geom);
}

/// Copies parameters into NTX1 sections under their names.
inline void store_params(NtxMap& out, const std::vector<ParamRef>& params) {
  for (const auto& p : params) out[p.name] = NtxArray{p.dims, std::vector<double>(p.value->values().begin(), p.value->values().end())};
}

/// Loads parameters from NTX1 sections; every name must be present with
/// matching dims.
inline void load_params(const NtxMap& in, const std::vector<ParamRef>& params) {
  for (const auto& p : params) {
    auto it = in.find(p.name);
    if (it == in.end()) throw FormatError(FormatIssue::unsupported, "weights file lacks section '" + p.name + "'");
    if (it->second.dims != p.dims) {
      throw ShapeError("weights section '" + p.name + "' has incompatible dims");
    }
    std::copy(it->second.values.begin(), it->second.values.end(), p.value->values().begin());
  }
}

/// Adam with bias correction; one moment pair per parameter array.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Grid*>& params, const std::vector<Grid>& grads, double lr) {
    if (params.size() != grads.size()) throw ShapeError("Adam: parameter and gradient counts differ");
    if (m_.empty()) {
      for (Grid* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    }
    if (m_.size() != params.size()) throw ShapeError("Adam: parameter set changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Grid& p = *params[k];
      const Grid& g = grads[k];
      require_same_shape(p, g, "Adam");
      Grid& m = m_[k];
      Grid& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Grid> m_, v_;
};

}  // namespace ntg
