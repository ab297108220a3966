// quant.hpp - symmetric INT8 fake quantization with learnable log-domain
// scales.
//
// Forward:  FQ(x, s) = s * round(clip(x/s, -q_max, q_max)), round half to
// even. The scalar kernel runs entirely in float32 so that a per-operator
// pipeline that materializes each sub-op (divide, clip, round, multiply)
// is bit-identical to a fused single-pass evaluation.
//
// Scales live in log space and are resolved as
//   s = clip(softplus(log_s) + eps, s_min, s_max)
// always at full precision, whatever the tensor precision mode.
//
// Backward uses a straight-through estimator for the input and the LSQ
// construction for the scale:
//   d_input = upstream            where |x/s| <= q_max, else 0
//   dFQ/ds  = round(z) - z        where |z| <= q_max, else sign(z)*q_max
// chained through ds/dlog_s = sigmoid(log_s), gated to zero where the
// clamp saturates.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "quantfuse/errors.hpp"
#include "quantfuse/tensor.hpp"

namespace qf {

enum class Rounding : uint8_t { HalfToEven = 0 };

struct QuantConfig {
  int bits = 8;
  double s_min = 1e-6;       // lower clamp on the Full-precision path
  double s_min_half = 1e-4;  // stricter lower bound on the FP16 path
  double s_max = 64.0;
  double eps = 1e-8;
  Rounding rounding = Rounding::HalfToEven;

  int q_max() const { return (1 << (bits - 1)) - 1; }

  double s_min_for(Precision p) const {
    return p == Precision::EmulatedHalf ? s_min_half : s_min;
  }

  void validate() const {
    if (bits < 2 || bits > 16) throw ValueError("QuantConfig: bits out of range");
    if (!(s_min > 0.0) || !(s_min < s_max)) {
      throw ValueError("QuantConfig: require 0 < s_min < s_max");
    }
    if (!(eps > 0.0) || !(eps < s_min)) {
      throw ValueError("QuantConfig: require 0 < eps < s_min");
    }
    if (!(s_min_half > 0.0) || !(s_min_half < s_max)) {
      throw ValueError("QuantConfig: require 0 < s_min_half < s_max");
    }
  }
};

// Log-domain learnable scales of one conv layer: a per-output-channel
// weight vector and a per-tensor activation scalar. These are the only
// trainable parameters anywhere.
struct ScaleParams {
  std::vector<double> log_w_scale;  // length C_out
  double log_a_scale = 0.0;
};

inline double softplus(double x) {
  // log(1 + e^x), stable for large |x|.
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Inverse of softplus: log(e^y - 1).
inline double softplus_inv(double y) {
  if (y <= 0.0) throw ValueError("softplus_inv: argument must be positive");
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

// s = clip(softplus(log_s) + eps, s_min, s_max). Computed in 64-bit,
// regardless of any half-precision tensor mode.
inline double resolve_scale(double log_s, const QuantConfig& cfg,
                            Precision mode = Precision::Full) {
  if (!std::isfinite(log_s)) throw NonFiniteError("resolve_scale: non-finite log scale");
  const double lo = cfg.s_min_for(mode);
  const double raw = softplus(log_s) + cfg.eps;
  return std::min(std::max(raw, lo), cfg.s_max);
}

inline std::vector<double> resolve_scale(std::span<const double> log_s,
                                         const QuantConfig& cfg,
                                         Precision mode = Precision::Full) {
  std::vector<double> out(log_s.size());
  for (size_t i = 0; i < log_s.size(); ++i) out[i] = resolve_scale(log_s[i], cfg, mode);
  return out;
}

// The four sub-op scalar kernel, all in float32. Per-operator execution
// materializes z, c, r between sweeps; since storing a float is exact,
// both pipelines produce identical bits.
inline float fq_div(float x, float s) { return x / s; }
inline float fq_clip(float z, float q) { return std::min(std::max(z, -q), q); }
inline float fq_round(float c) { return std::nearbyintf(c); }
inline float fq_mul(float r, float s) { return s * r; }

inline float fake_quantize_value(float x, float s, float q) {
  return fq_mul(fq_round(fq_clip(fq_div(x, s), q)), s);
}

namespace detail {

inline void check_scales_positive(std::span<const double> s) {
  for (double v : s) {
    if (!(v > 0.0)) throw ValueError("fake_quantize: scale must be positive, got " + std::to_string(v));
  }
}

}  // namespace detail

// Per-tensor fake quantization. Output tag equals the input's; on the
// EmulatedHalf path the result is re-rounded to the binary16 grid so the
// tag's invariant holds (the FP32<->FP16 store step of the half pipeline).
inline Tensor fake_quantize(const Tensor& x, double s, const QuantConfig& cfg) {
  detail::check_scales_positive(std::span<const double>(&s, 1));
  const float sf = static_cast<float>(s);
  const float q = static_cast<float>(cfg.q_max());
  Tensor out = x;
  for (float& v : out.data) v = fake_quantize_value(v, sf, q);
  if (x.precision == Precision::EmulatedHalf) {
    out = demote_half(out);
  }
  return out;
}

// Per-channel fake quantization along axis 0 of [C_out, C_in, kH, kW]
// (weight tensors).
inline Tensor fake_quantize(const Tensor& x, std::span<const double> s,
                            const QuantConfig& cfg) {
  detail::check_scales_positive(s);
  if (x.shape.empty() || static_cast<int64_t>(s.size()) != x.shape[0]) {
    throw ShapeError("fake_quantize: per-channel scale length " +
                     std::to_string(s.size()) + " != leading dim of " +
                     Tensor::shape_str(x.shape));
  }
  const float q = static_cast<float>(cfg.q_max());
  const int64_t per = x.numel() / x.shape[0];
  Tensor out = x;
  for (int64_t c = 0; c < x.shape[0]; ++c) {
    const float sf = static_cast<float>(s[static_cast<size_t>(c)]);
    float* p = out.data.data() + c * per;
    for (int64_t i = 0; i < per; ++i) p[i] = fake_quantize_value(p[i], sf, q);
  }
  if (x.precision == Precision::EmulatedHalf) {
    out = demote_half(out);
  }
  return out;
}

// Integer image round(clip(x/s)): the codes a true INT8 backend would
// consume. fake_quantize(x, s) == s * int8_codes(x, s) exactly.
struct IntTensor {
  std::vector<int64_t> shape;
  std::vector<int8_t> data;
};

inline IntTensor int8_codes(const Tensor& x, double s, const QuantConfig& cfg) {
  detail::check_scales_positive(std::span<const double>(&s, 1));
  const float sf = static_cast<float>(s);
  const float q = static_cast<float>(cfg.q_max());
  IntTensor out{x.shape, std::vector<int8_t>(x.data.size())};
  for (size_t i = 0; i < x.data.size(); ++i) {
    out.data[i] = static_cast<int8_t>(fq_round(fq_clip(fq_div(x.data[i], sf), q)));
  }
  return out;
}

inline IntTensor int8_codes(const Tensor& x, std::span<const double> s,
                            const QuantConfig& cfg) {
  detail::check_scales_positive(s);
  if (x.shape.empty() || static_cast<int64_t>(s.size()) != x.shape[0]) {
    throw ShapeError("int8_codes: per-channel scale length mismatch");
  }
  const float q = static_cast<float>(cfg.q_max());
  const int64_t per = x.numel() / x.shape[0];
  IntTensor out{x.shape, std::vector<int8_t>(x.data.size())};
  for (int64_t c = 0; c < x.shape[0]; ++c) {
    const float sf = static_cast<float>(s[static_cast<size_t>(c)]);
    for (int64_t i = 0; i < per; ++i) {
      const size_t idx = static_cast<size_t>(c * per + i);
      out.data[idx] = static_cast<int8_t>(fq_round(fq_clip(fq_div(x.data[idx], sf), q)));
    }
  }
  return out;
}

struct FakeQuantGrad {
  Tensor d_input;                    // same shape as x
  std::vector<double> d_log_scale;   // length 1 (per-tensor) or C_out
};

namespace detail {

// Per-element STE/LSQ pieces, evaluated in 64-bit.
struct FqGradTerms {
  double d_in_mask;  // 1 inside the clip range, 0 outside
  double d_ds;       // dFQ/ds
};

inline FqGradTerms fq_grad_terms(double x, double s, double q) {
  const double z = x / s;
  if (std::abs(z) <= q) {
    return {1.0, std::nearbyint(z) - z};
  }
  return {0.0, z > 0.0 ? q : -q};
}

}  // namespace detail

// STE backward for per-tensor scales.
inline FakeQuantGrad fake_quantize_backward(const Tensor& x, double log_s,
                                            const QuantConfig& cfg,
                                            const Tensor& upstream,
                                            Precision mode = Precision::Full) {
  if (!same_shape(x, upstream)) {
    throw ShapeError("fake_quantize_backward: x " + Tensor::shape_str(x.shape) +
                     " vs upstream " + Tensor::shape_str(upstream.shape));
  }
  const double s = resolve_scale(log_s, cfg, mode);
  const double raw = softplus(log_s) + cfg.eps;
  const bool clamped = !(raw > cfg.s_min_for(mode) && raw < cfg.s_max);
  const double chain = clamped ? 0.0 : sigmoid(log_s);
  const double q = static_cast<double>(cfg.q_max());

  FakeQuantGrad g;
  g.d_input = Tensor::zeros(x.shape);
  std::vector<double> per_elem(x.data.size());
  for (size_t i = 0; i < x.data.size(); ++i) {
    const auto t = detail::fq_grad_terms(x.data[i], s, q);
    g.d_input.data[i] = static_cast<float>(t.d_in_mask * upstream.data[i]);
    per_elem[i] = t.d_ds * static_cast<double>(upstream.data[i]);
  }
  g.d_log_scale = {pairwise_sum(per_elem.data(), static_cast<int64_t>(per_elem.size())) * chain};
  return g;
}

// STE backward for per-channel weight scales (axis 0). Channel reductions
// use the fixed pairwise tree.
inline FakeQuantGrad fake_quantize_backward(const Tensor& x,
                                            std::span<const double> log_s,
                                            const QuantConfig& cfg,
                                            const Tensor& upstream,
                                            Precision mode = Precision::Full) {
  if (!same_shape(x, upstream)) {
    throw ShapeError("fake_quantize_backward: shape mismatch");
  }
  if (x.shape.empty() || static_cast<int64_t>(log_s.size()) != x.shape[0]) {
    throw ShapeError("fake_quantize_backward: per-channel scale length mismatch");
  }
  const double q = static_cast<double>(cfg.q_max());
  const int64_t per = x.numel() / x.shape[0];

  FakeQuantGrad g;
  g.d_input = Tensor::zeros(x.shape);
  g.d_log_scale.resize(log_s.size());
  std::vector<double> per_elem(static_cast<size_t>(per));
  for (int64_t c = 0; c < x.shape[0]; ++c) {
    const double ls = log_s[static_cast<size_t>(c)];
    const double s = resolve_scale(ls, cfg, mode);
    const double raw = softplus(ls) + cfg.eps;
    const bool clamped = !(raw > cfg.s_min_for(mode) && raw < cfg.s_max);
    const double chain = clamped ? 0.0 : sigmoid(ls);
    for (int64_t i = 0; i < per; ++i) {
      const size_t idx = static_cast<size_t>(c * per + i);
      const auto t = detail::fq_grad_terms(x.data[idx], s, q);
      g.d_input.data[idx] = static_cast<float>(t.d_in_mask * upstream.data[idx]);
      per_elem[static_cast<size_t>(i)] = t.d_ds * static_cast<double>(upstream.data[idx]);
    }
    g.d_log_scale[static_cast<size_t>(c)] = pairwise_sum(per_elem.data(), per) * chain;
  }
  return g;
}

}  // namespace qf
