// model.hpp - the toy patchifier: a frozen-weight convolutional front-end
// with two heads (features and descriptors) sharing a trunk.
//
// The roster covers every layer species the quantization engine has to
// handle: an initial 7x7 stride-2 conv, 3x3 convs in residual blocks with
// additive skips, a 1x1 stride-2 downsampling shortcut, and a tail 1x1
// conv per head. 10 conv layers total. Normalization is folded into a
// frozen per-channel affine applied as a conv epilogue.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "quantfuse/quant.hpp"
#include "quantfuse/rng.hpp"
#include "quantfuse/sha256.hpp"
#include "quantfuse/tensor.hpp"

namespace qf {

struct ConvLayer {
  std::string name;
  Tensor weight;  // [C_out, C_in, kH, kW], frozen after build
  int stride = 1;
  int padding = 0;
  std::vector<float> affine_scale;  // per C_out; empty = identity
  std::vector<float> affine_shift;
  bool relu = false;
  bool quantized = false;
  ScaleParams scales;
  QuantConfig qcfg;

  int64_t c_out() const { return weight.shape[0]; }
  int64_t c_in() const { return weight.shape[1]; }
};

// Fixed roster order. The forward topology is hard-wired to these
// indices (see exec.hpp / frontend.hpp).
enum RosterIndex : int {
  kConvIn = 0,
  kRes1Conv1,
  kRes1Conv2,
  kRes2Conv1,
  kRes2Conv2,
  kRes2Down,
  kRes3Conv1,
  kRes3Conv2,
  kFnetOut,
  kInetOut,
  kRosterSize
};

enum class ModelWidth { Small, Base };

inline ModelWidth parse_width(const std::string& s) {
  if (s == "small") return ModelWidth::Small;
  if (s == "base") return ModelWidth::Base;
  throw ValueError("unknown model width '" + s + "' (expected small|base)");
}

inline std::string width_name(ModelWidth w) {
  return w == ModelWidth::Small ? "small" : "base";
}

struct FrontendModel {
  ModelWidth width = ModelWidth::Small;
  uint64_t seed = 0;
  std::vector<ConvLayer> layers;  // kRosterSize entries in roster order

  const ConvLayer& layer(int idx) const { return layers[static_cast<size_t>(idx)]; }
  ConvLayer& layer(int idx) { return layers[static_cast<size_t>(idx)]; }
  int64_t feature_channels() const { return layers[kFnetOut].c_out(); }
};

namespace detail {

// Per-layer RNG streams. Weight element k of layer L draws
// normal(seed, stream=L*2, index=k); the affine draws on stream L*2+1.
inline Tensor he_weights(uint64_t seed, int layer_idx, int64_t c_out,
                         int64_t c_in, int64_t k) {
  Tensor w = Tensor::zeros({c_out, c_in, k, k});
  const CounterRng rng{seed, static_cast<uint64_t>(layer_idx) * 2};
  const double std = std::sqrt(2.0 / static_cast<double>(c_in * k * k));
  for (int64_t i = 0; i < w.numel(); ++i) {
    w.data[static_cast<size_t>(i)] =
        static_cast<float>(std * rng.normal(static_cast<uint64_t>(i)));
  }
  return w;
}

// Frozen folded-norm affine: scale near 1, small shift.
inline void frozen_affine(uint64_t seed, int layer_idx, int64_t c_out,
                          std::vector<float>& scale, std::vector<float>& shift) {
  const CounterRng rng{seed, static_cast<uint64_t>(layer_idx) * 2 + 1};
  scale.resize(static_cast<size_t>(c_out));
  shift.resize(static_cast<size_t>(c_out));
  for (int64_t c = 0; c < c_out; ++c) {
    scale[static_cast<size_t>(c)] =
        static_cast<float>(1.0 + 0.1 * rng.normal(static_cast<uint64_t>(2 * c)));
    shift[static_cast<size_t>(c)] =
        static_cast<float>(0.05 * rng.normal(static_cast<uint64_t>(2 * c + 1)));
  }
}

}  // namespace detail

// Deterministic toy patchifier. Same seed => bitwise-identical model.
// width small: trunk channels 8 -> 8 -> 16, features C=16 at 1/4 scale.
// width base doubles every channel count.
inline FrontendModel build_toy_patchifier(uint64_t seed, ModelWidth width) {
  const int64_t c1 = width == ModelWidth::Small ? 8 : 16;   // stem / block 1
  const int64_t c2 = c1 * 2;                                // blocks 2-3, heads

  FrontendModel m;
  m.width = width;
  m.seed = seed;
  m.layers.resize(kRosterSize);

  auto make = [&](int idx, const std::string& name, int64_t co, int64_t ci,
                  int64_t k, int stride, int padding, bool relu, bool affine) {
    ConvLayer& l = m.layers[static_cast<size_t>(idx)];
    l.name = name;
    l.weight = detail::he_weights(seed, idx, co, ci, k);
    l.stride = stride;
    l.padding = padding;
    l.relu = relu;
    if (affine) detail::frozen_affine(seed, idx, co, l.affine_scale, l.affine_shift);
    l.quantized = false;
  };

  make(kConvIn,    "conv_in",    c1, 3,  7, 2, 3, true,  true);
  make(kRes1Conv1, "res1_conv1", c1, c1, 3, 1, 1, true,  true);
  make(kRes1Conv2, "res1_conv2", c1, c1, 3, 1, 1, false, true);
  make(kRes2Conv1, "res2_conv1", c2, c1, 3, 2, 1, true,  true);
  make(kRes2Conv2, "res2_conv2", c2, c2, 3, 1, 1, false, true);
  make(kRes2Down,  "res2_down",  c2, c1, 1, 2, 0, false, true);
  make(kRes3Conv1, "res3_conv1", c2, c2, 3, 1, 1, true,  true);
  make(kRes3Conv2, "res3_conv2", c2, c2, 3, 1, 1, false, true);
  make(kFnetOut,   "fnet_out",   c2, c2, 1, 1, 0, false, false);
  make(kInetOut,   "inet_out",   c2, c2, 1, 1, 0, false, false);
  return m;
}

// SHA-256 over all weight bytes (shape-prefixed). Injection, training and
// inference must never change this.
inline std::string weight_hash(const FrontendModel& m) {
  Sha256 h;
  for (const ConvLayer& l : m.layers) {
    for (int64_t d : l.weight.shape) {
      h.update(&d, sizeof(d));
    }
    h.update(l.weight.data.data(), l.weight.data.size() * sizeof(float));
  }
  return Sha256::to_hex(h.digest());
}

}  // namespace qf
