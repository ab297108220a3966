// frontend.hpp - QAT injection, checkpoint serialization, and the cached
// forward/backward walk the trainer differentiates through.
//
// Weights are frozen everywhere: injection binds ScaleParams to layers
// without touching a single weight bit, and the only gradients ever
// produced are with respect to the log scales.

#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "quantfuse/exec.hpp"
#include "quantfuse/model.hpp"
#include "quantfuse/quant.hpp"
#include "quantfuse/tensor_io.hpp"

namespace qf {

// Named scale set, the unit the trainer produces and eval consumes.
struct ScaleSet {
  std::map<std::string, ScaleParams> by_layer;
};

inline std::string roster_names(const FrontendModel& m) {
  std::string s;
  for (const auto& l : m.layers) s += (s.empty() ? "" : ",") + l.name;
  return s;
}

inline std::string scale_set_names(const ScaleSet& s) {
  std::string out;
  for (const auto& [k, v] : s.by_layer) out += (out.empty() ? "" : ",") + k;
  return out;
}

// Every conv gets quantized=true and its ScaleParams bound. The original
// weight tensors are preserved bit for bit.
inline FrontendModel inject_qat(const FrontendModel& model, const QuantConfig& cfg,
                                const ScaleSet& scales) {
  cfg.validate();
  if (scales.by_layer.size() != model.layers.size()) {
    throw ValueError("inject_qat: scale set has " +
                     std::to_string(scales.by_layer.size()) + " layers [" +
                     scale_set_names(scales) + "] but the model roster has " +
                     std::to_string(model.layers.size()) + " [" +
                     roster_names(model) + "]");
  }
  FrontendModel out = model;
  for (ConvLayer& l : out.layers) {
    auto it = scales.by_layer.find(l.name);
    if (it == scales.by_layer.end()) {
      throw ValueError("inject_qat: no scales for layer '" + l.name +
                       "'; scale set has [" + scale_set_names(scales) +
                       "], roster is [" + roster_names(model) + "]");
    }
    if (static_cast<int64_t>(it->second.log_w_scale.size()) != l.c_out()) {
      throw ShapeError("inject_qat: layer '" + l.name + "' expects " +
                       std::to_string(l.c_out()) + " weight scales, got " +
                       std::to_string(it->second.log_w_scale.size()));
    }
    l.quantized = true;
    l.scales = it->second;
    l.qcfg = cfg;
  }
  return out;
}

// Remove quantization wrappers; weights untouched.
inline FrontendModel strip_qat(const FrontendModel& model) {
  FrontendModel out = model;
  for (ConvLayer& l : out.layers) {
    l.quantized = false;
    l.scales = ScaleParams{};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cached forward / backward (the trainer's autodiff-by-hand path).
// ---------------------------------------------------------------------------

struct LayerCache {
  Tensor x;         // conv input before fake quantization
  Tensor qa;        // quantized activation (== x when not quantized)
  Tensor qw;        // quantized weight (unused when not quantized)
  Tensor pre_relu;  // affine(conv(...)) before the activation
};

struct ForwardCache {
  std::array<LayerCache, kRosterSize> layers;
  Tensor sum1, sum2, sum3;  // pre-relu skip sums
  FrontendOutput out;
};

namespace detail {

inline Tensor layer_forward_train(const ConvLayer& l, const Tensor& x,
                                  LayerCache& c) {
  c.x = x;
  const Tensor* conv_in = &x;
  const Tensor* conv_w = &l.weight;
  if (l.quantized) {
    const double sa = resolve_scale(l.scales.log_a_scale, l.qcfg, x.precision);
    const std::vector<double> sw = resolve_scale(
        std::span<const double>(l.scales.log_w_scale), l.qcfg);
    c.qa = fake_quantize(x, sa, l.qcfg);
    c.qw = fake_quantize(l.weight, std::span<const double>(sw), l.qcfg);
    conv_in = &c.qa;
    conv_w = &c.qw;
  }
  c.pre_relu = conv2d(*conv_in, *conv_w, l.stride, l.padding,
                      ConvEpilogue{l.affine_scale, l.affine_shift, false});
  return l.relu ? relu(c.pre_relu) : c.pre_relu;
}

inline Tensor relu_backward(const Tensor& d, const Tensor& pre) {
  Tensor out = d;
  for (size_t i = 0; i < out.data.size(); ++i) {
    if (!(pre.data[i] > 0.0f)) out.data[i] = 0.0f;
  }
  return out;
}

inline Tensor scale_channels(const Tensor& d, std::span<const float> gamma) {
  if (gamma.empty()) return d;
  Tensor out = d;
  const int64_t per = d.numel() / d.shape[0];
  for (int64_t c = 0; c < d.shape[0]; ++c) {
    const float g = gamma[static_cast<size_t>(c)];
    float* p = out.data.data() + c * per;
    for (int64_t i = 0; i < per; ++i) p[i] *= g;
  }
  return out;
}

}  // namespace detail

// Gradient accumulator over the trainable set (log scales only).
struct ScaleGrads {
  std::array<std::vector<double>, kRosterSize> d_log_w;
  std::array<double, kRosterSize> d_log_a{};

  static ScaleGrads zeros_like(const FrontendModel& m) {
    ScaleGrads g;
    for (int i = 0; i < kRosterSize; ++i) {
      g.d_log_w[static_cast<size_t>(i)].assign(
          static_cast<size_t>(m.layer(i).c_out()), 0.0);
    }
    return g;
  }

  bool all_finite() const {
    for (double v : d_log_a)
      if (!std::isfinite(v)) return false;
    for (const auto& vec : d_log_w)
      for (double v : vec)
        if (!std::isfinite(v)) return false;
    return true;
  }
};

// Forward with every intermediate the backward pass needs. `half_acts`
// mirrors the optional autocast-FP16 training forward (off by default).
inline ForwardCache forward_train(const FrontendModel& m, const Tensor& image,
                                  bool half_acts = false) {
  ForwardCache fc;
  auto maybe_half = [&](Tensor t) { return half_acts ? demote_half(t) : std::move(t); };
  auto L = [&](int idx, const Tensor& x) {
    return detail::layer_forward_train(m.layer(idx), x,
                                       fc.layers[static_cast<size_t>(idx)]);
  };

  const Tensor x_in = maybe_half(image);
  const Tensor x0 = L(kConvIn, x_in);
  Tensor r = L(kRes1Conv1, x0);
  r = L(kRes1Conv2, r);
  fc.sum1 = add(x0, r);
  const Tensor x1 = maybe_half(relu(fc.sum1));

  r = L(kRes2Conv1, x1);
  r = L(kRes2Conv2, r);
  const Tensor sc = L(kRes2Down, x1);
  fc.sum2 = add(r, sc);
  const Tensor x2 = maybe_half(relu(fc.sum2));

  r = L(kRes3Conv1, x2);
  r = L(kRes3Conv2, r);
  fc.sum3 = add(x2, r);
  const Tensor x3 = maybe_half(relu(fc.sum3));

  fc.out.features = L(kFnetOut, x3);
  fc.out.descriptors = L(kInetOut, x3);
  for (int idx = 0; idx < kRosterSize; ++idx) {
    if (!all_finite(fc.layers[static_cast<size_t>(idx)].pre_relu)) {
      throw NonFiniteError("non-finite activations in layer " + m.layer(idx).name);
    }
  }
  return fc;
}

namespace detail {

// One conv layer's backward: d(layer output) -> d(layer input), scale
// gradients accumulated into g.
inline Tensor layer_backward_train(const ConvLayer& l, const LayerCache& c,
                                   const Tensor& d_out, int idx, ScaleGrads& g) {
  Tensor d_pre = l.relu ? relu_backward(d_out, c.pre_relu) : d_out;
  Tensor d_conv = scale_channels(d_pre, l.affine_scale);
  const Tensor& qw = l.quantized ? c.qw : l.weight;
  Tensor d_qa = conv2d_backward_input(d_conv, qw, l.stride, l.padding, c.x.shape);
  if (!l.quantized) return d_qa;

  const Tensor& qa = c.qa;
  Tensor d_qw = conv2d_backward_weight(d_conv, qa, l.stride, l.padding, l.weight.shape);
  FakeQuantGrad gw = fake_quantize_backward(
      l.weight, std::span<const double>(l.scales.log_w_scale), l.qcfg, d_qw);
  for (size_t i = 0; i < gw.d_log_scale.size(); ++i) {
    g.d_log_w[static_cast<size_t>(idx)][i] += gw.d_log_scale[i];
  }
  FakeQuantGrad ga = fake_quantize_backward(c.x, l.scales.log_a_scale, l.qcfg,
                                            d_qa, c.x.precision);
  g.d_log_a[static_cast<size_t>(idx)] += ga.d_log_scale[0];
  return ga.d_input;
}

}  // namespace detail

// Backward through the full roster. Returns the image gradient (unused by
// the trainer, handy for tests).
inline Tensor backward_train(const FrontendModel& m, const ForwardCache& fc,
                             const Tensor& d_features, const Tensor& d_descriptors,
                             ScaleGrads& g) {
  auto B = [&](int idx, const Tensor& d) {
    return detail::layer_backward_train(m.layer(idx),
                                        fc.layers[static_cast<size_t>(idx)], d, idx, g);
  };

  const Tensor d_x3 = add(B(kFnetOut, d_features), B(kInetOut, d_descriptors));
  const Tensor d_sum3 = detail::relu_backward(d_x3, fc.sum3);
  Tensor d = B(kRes3Conv2, d_sum3);
  const Tensor d_x2 = add(d_sum3, B(kRes3Conv1, d));

  const Tensor d_sum2 = detail::relu_backward(d_x2, fc.sum2);
  d = B(kRes2Conv2, d_sum2);
  const Tensor d_x1 = add(B(kRes2Conv1, d), B(kRes2Down, d_sum2));

  const Tensor d_sum1 = detail::relu_backward(d_x1, fc.sum1);
  d = B(kRes1Conv2, d_sum1);
  const Tensor d_x0 = add(d_sum1, B(kRes1Conv1, d));

  return B(kConvIn, d_x0);
}

// ---------------------------------------------------------------------------
// Calibration: one float forward over a calibration image, then
// log_s = softplus^-1(max|.| / q_max) per tensor (per channel for weights).
// ---------------------------------------------------------------------------

inline ScaleSet calibrate_scales(const FrontendModel& model, const QuantConfig& cfg,
                                 const Tensor& calibration_image) {
  cfg.validate();
  const FrontendModel teacher = strip_qat(model);
  const ForwardCache fc = forward_train(teacher, calibration_image);

  ScaleSet out;
  for (int idx = 0; idx < kRosterSize; ++idx) {
    const ConvLayer& l = model.layer(idx);
    const LayerCache& c = fc.layers[static_cast<size_t>(idx)];
    ScaleParams p;

    double a_max = 0.0;
    for (float v : c.x.data) a_max = std::max(a_max, std::abs(static_cast<double>(v)));
    p.log_a_scale = softplus_inv(std::max(a_max / cfg.q_max(), cfg.s_min));

    p.log_w_scale.resize(static_cast<size_t>(l.c_out()));
    const int64_t per = l.weight.numel() / l.c_out();
    for (int64_t ch = 0; ch < l.c_out(); ++ch) {
      double w_max = 0.0;
      const float* w = l.weight.data.data() + ch * per;
      for (int64_t i = 0; i < per; ++i) {
        w_max = std::max(w_max, std::abs(static_cast<double>(w[i])));
      }
      p.log_w_scale[static_cast<size_t>(ch)] =
          softplus_inv(std::max(w_max / cfg.q_max(), cfg.s_min));
    }
    out.by_layer[l.name] = std::move(p);
  }
  return out;
}

// Default-initialized injection: calibrate on the given image, then bind.
inline FrontendModel inject_qat_default(const FrontendModel& model,
                                        const QuantConfig& cfg,
                                        const Tensor& calibration_image) {
  return inject_qat(model, cfg, calibrate_scales(model, cfg, calibration_image));
}

// Convenience inference entry point: fresh context per call.
inline FrontendOutput forward(const FrontendModel& m, const Tensor& image,
                              const ExecutionPlan& plan) {
  ExecutionContext ctx(plan);
  return run_frontend(ctx, m, image);
}

// ---------------------------------------------------------------------------
// Checkpoint file (QCKP): tensor blobs in the QSIM format plus a JSON
// manifest mapping layer name -> offsets / conv hyperparameters.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const FrontendModel& m) {
  std::string blobs;
  nlohmann::ordered_json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["width"] = width_name(m.width);
  manifest["seed"] = m.seed;
  manifest["layers"] = nlohmann::ordered_json::array();

  const size_t header_size = 4 + 4 + 8 + 8;
  auto blob_offset = [&](const Tensor& t) {
    const size_t off = header_size + blobs.size();
    blobs += serialize_tensor(t);
    return off;
  };

  for (const ConvLayer& l : m.layers) {
    nlohmann::ordered_json jl;
    jl["name"] = l.name;
    jl["stride"] = l.stride;
    jl["padding"] = l.padding;
    jl["relu"] = l.relu;
    jl["quantized"] = l.quantized;
    jl["weight_off"] = blob_offset(l.weight);
    if (!l.affine_scale.empty()) {
      jl["affine_scale_off"] = blob_offset(
          Tensor({static_cast<int64_t>(l.affine_scale.size())}, l.affine_scale));
      jl["affine_shift_off"] = blob_offset(
          Tensor({static_cast<int64_t>(l.affine_shift.size())}, l.affine_shift));
    }
    if (l.quantized) {
      std::vector<float> lw(l.scales.log_w_scale.begin(), l.scales.log_w_scale.end());
      jl["log_w_scale_off"] = blob_offset(Tensor({static_cast<int64_t>(lw.size())}, lw));
      jl["log_a_scale_off"] = blob_offset(
          Tensor({1}, {static_cast<float>(l.scales.log_a_scale)}));
    }
    manifest["layers"].push_back(std::move(jl));
  }

  const std::string mstr = manifest.dump();
  std::string out;
  out.append("QCKP", 4);
  detail::put_le<uint32_t>(out, kCheckpointVersion);
  detail::put_le<uint64_t>(out, header_size + blobs.size());  // manifest offset
  detail::put_le<uint64_t>(out, mstr.size());
  out += blobs;
  out += mstr;
  return out;
}

inline void save_checkpoint(const std::string& path, const FrontendModel& m) {
  write_file(path, serialize_checkpoint(m));
}

inline FrontendModel parse_checkpoint(const std::string& buf) {
  if (buf.size() < 24 || buf.compare(0, 4, "QCKP") != 0) {
    throw IoError("bad checkpoint magic (expected QCKP)");
  }
  const uint32_t ver = detail::get_le<uint32_t>(buf.data() + 4);
  if (ver != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(ver));
  }
  const uint64_t moff = detail::get_le<uint64_t>(buf.data() + 8);
  const uint64_t mlen = detail::get_le<uint64_t>(buf.data() + 16);
  if (moff + mlen > buf.size()) throw IoError("checkpoint manifest out of bounds");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(buf.substr(moff, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint manifest parse error: ") + e.what());
  }

  FrontendModel m;
  m.width = parse_width(manifest.at("width").get<std::string>());
  m.seed = manifest.at("seed").get<uint64_t>();
  const auto& layers = manifest.at("layers");
  if (layers.size() != kRosterSize) {
    throw IoError("checkpoint roster has " + std::to_string(layers.size()) +
                  " layers, expected " + std::to_string(int(kRosterSize)));
  }
  m.layers.resize(kRosterSize);
  auto tensor_at = [&](uint64_t off) {
    size_t o = static_cast<size_t>(off);
    return parse_tensor(buf, o);
  };
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& jl = layers[i];
    ConvLayer& l = m.layers[i];
    l.name = jl.at("name").get<std::string>();
    l.stride = jl.at("stride").get<int>();
    l.padding = jl.at("padding").get<int>();
    l.relu = jl.at("relu").get<bool>();
    l.quantized = jl.at("quantized").get<bool>();
    l.weight = tensor_at(jl.at("weight_off").get<uint64_t>());
    if (jl.contains("affine_scale_off")) {
      l.affine_scale = tensor_at(jl.at("affine_scale_off").get<uint64_t>()).data;
      l.affine_shift = tensor_at(jl.at("affine_shift_off").get<uint64_t>()).data;
    }
    if (l.quantized) {
      const Tensor lw = tensor_at(jl.at("log_w_scale_off").get<uint64_t>());
      l.scales.log_w_scale.assign(lw.data.begin(), lw.data.end());
      l.scales.log_a_scale = static_cast<double>(
          tensor_at(jl.at("log_a_scale_off").get<uint64_t>()).data.at(0));
    }
  }
  return m;
}

inline FrontendModel load_checkpoint(const std::string& path) {
  return parse_checkpoint(read_file(path));
}

// "toy:<width>:<seed>" builds a model; anything else loads a checkpoint.
inline FrontendModel resolve_model_ref(const std::string& ref) {
  if (ref.rfind("toy:", 0) == 0) {
    const size_t c1 = ref.find(':', 4);
    if (c1 == std::string::npos) {
      throw ValueError("bad model ref '" + ref + "' (expected toy:<width>:<seed>)");
    }
    const ModelWidth w = parse_width(ref.substr(4, c1 - 4));
    const uint64_t seed = std::stoull(ref.substr(c1 + 1));
    return build_toy_patchifier(seed, w);
  }
  return load_checkpoint(ref);
}

}  // namespace qf
