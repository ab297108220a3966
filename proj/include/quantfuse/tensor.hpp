// tensor.hpp - minimal deterministic dense tensor substrate.
//
// Row-major, float32 canonical storage, 64-bit internal accumulation.
// Tensors are immutable by convention once an op has returned them; all
// ops here are pure functions, so concurrent calls are safe. Reductions
// use a fixed pairwise tree so results are bit-identical across runs and
// across any internal parallel split.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "quantfuse/errors.hpp"
#include "quantfuse/half.hpp"

namespace qf {

enum class Precision : uint8_t { Full = 0, EmulatedHalf = 1 };

struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;
  Precision precision = Precision::Full;
  // Metadata: how many elements saturated during the last binary16 demotion.
  uint64_t half_overflows = 0;

  Tensor() = default;
  Tensor(std::vector<int64_t> s, std::vector<float> d,
         Precision p = Precision::Full)
      : shape(std::move(s)), data(std::move(d)), precision(p) {
    if (numel_of(shape) != static_cast<int64_t>(data.size())) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  static Tensor zeros(std::vector<int64_t> s, Precision p = Precision::Full) {
    const int64_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), 0.0f), p);
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }

  // Indexing helpers for the ranks the engine uses.
  float& at3(int64_t c, int64_t y, int64_t x) {
    return data[static_cast<size_t>((c * shape[1] + y) * shape[2] + x)];
  }
  float at3(int64_t c, int64_t y, int64_t x) const {
    return data[static_cast<size_t>((c * shape[1] + y) * shape[2] + x)];
  }
  float& at4(int64_t o, int64_t i, int64_t y, int64_t x) {
    return data[static_cast<size_t>(((o * shape[1] + i) * shape[2] + y) * shape[3] + x)];
  }
  float at4(int64_t o, int64_t i, int64_t y, int64_t x) const {
    return data[static_cast<size_t>(((o * shape[1] + i) * shape[2] + y) * shape[3] + x)];
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d <= 0) throw ShapeError("non-positive dim in shape " + shape_str(s));
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape;
}

inline bool all_finite(const Tensor& t) {
  for (float v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Reductions: fixed pairwise (tree) summation, 64-bit accumulation.
// The tree is a function of the length only, so any parallel split that
// follows the same tree produces identical bits.
// ---------------------------------------------------------------------------

template <typename T>
inline double pairwise_sum(const T* p, int64_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += static_cast<double>(p[i]);
    return s;
  }
  const int64_t h = n / 2;
  return pairwise_sum(p, h) + pairwise_sum(p + h, n - h);
}

inline double reduce_sum(const Tensor& t) {
  if (t.numel() == 0) throw ValueError("reduce_sum: empty tensor");
  return pairwise_sum(t.data.data(), t.numel());
}

inline double reduce_mean(const Tensor& t) {
  if (t.numel() == 0) throw ValueError("reduce_mean: empty tensor");
  return reduce_sum(t) / static_cast<double>(t.numel());
}

// ---------------------------------------------------------------------------
// Elementwise ops. Shape-preserving, order-deterministic. Results carry
// Full precision unless the op maps the binary16 grid to itself.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw ShapeError("add: shape mismatch " + Tensor::shape_str(a.shape) +
                     " vs " + Tensor::shape_str(b.shape));
  }
  Tensor out(a.shape, a.data, Precision::Full);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] += b.data[static_cast<size_t>(i)];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw ShapeError("sub: shape mismatch " + Tensor::shape_str(a.shape) +
                     " vs " + Tensor::shape_str(b.shape));
  }
  Tensor out(a.shape, a.data, Precision::Full);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] -= b.data[static_cast<size_t>(i)];
  return out;
}

// max(x, 0). Maps the binary16 grid to itself, so the tag is preserved.
inline Tensor relu(const Tensor& t) {
  Tensor out = t;
  for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
  return out;
}

// ---------------------------------------------------------------------------
// binary16 emulation.
// ---------------------------------------------------------------------------

// Round every element through binary16 (RNE). Magnitudes above 65504
// saturate and are counted in the result's half_overflows. Idempotent.
inline Tensor demote_half(const Tensor& t) {
  if (!all_finite(t)) throw NonFiniteError("demote_half: non-finite input");
  Tensor out = t;
  out.precision = Precision::EmulatedHalf;
  out.half_overflows = 0;
  for (float& v : out.data) {
    bool sat = false;
    v = round_to_half(v, &sat);
    if (sat) ++out.half_overflows;
  }
  return out;
}

// Tag change only; EmulatedHalf values are already exact floats.
inline Tensor promote_full(const Tensor& t) {
  Tensor out = t;
  out.precision = Precision::Full;
  out.half_overflows = 0;
  return out;
}

// ---------------------------------------------------------------------------
// Reference 2-D convolution (cross-correlation, zero padding).
//
// input  [C_in, H, W], weight [C_out, C_in, kH, kW].
// Accumulation is 64-bit with a fixed order (input-channel major, then
// kernel rows/cols); the result is stored at Full precision.
//
// The optional per-output-channel affine (y = scale*acc + shift) and ReLU
// epilogue are applied while writing the output, so they cost no extra
// pass over memory.
// ---------------------------------------------------------------------------

struct ConvEpilogue {
  std::span<const float> scale;  // empty = identity
  std::span<const float> shift;  // empty = zero
  bool relu = false;
  bool demote_output = false;  // store results on the binary16 grid
};

inline std::vector<int64_t> conv2d_out_shape(const std::vector<int64_t>& in_shape,
                                             const std::vector<int64_t>& w_shape,
                                             int stride, int padding) {
  const int64_t oh = (in_shape[1] + 2 * padding - w_shape[2]) / stride + 1;
  const int64_t ow = (in_shape[2] + 2 * padding - w_shape[3]) / stride + 1;
  return {w_shape[0], oh, ow};
}

// Core convolution over raw buffers (the engine feeds it arena-backed
// quantized tensors). Validation happens in the Tensor wrapper below.
inline Tensor conv2d_raw(const float* input, const std::vector<int64_t>& in_shape,
                         const float* weight, const std::vector<int64_t>& w_shape,
                         int stride, int padding, const ConvEpilogue& ep = {}) {
  const int64_t c_in = in_shape[0], h = in_shape[1], w = in_shape[2];
  const int64_t c_out = w_shape[0];
  const int64_t kh = w_shape[2], kw = w_shape[3];
  const int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const int64_t ow = (w + 2 * padding - kw) / stride + 1;

  Tensor out = Tensor::zeros({c_out, oh, ow},
                             ep.demote_output ? Precision::EmulatedHalf : Precision::Full);
  std::vector<double> acc(static_cast<size_t>(oh * ow));
  const int64_t w_per_co = c_in * kh * kw;
  for (int64_t co = 0; co < c_out; ++co) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t ci = 0; ci < c_in; ++ci) {
      const float* in_plane = input + ci * h * w;
      const float* w_base = weight + co * w_per_co + ci * kh * kw;
      for (int64_t ky = 0; ky < kh; ++ky) {
        for (int64_t kx = 0; kx < kw; ++kx) {
          const double wv = static_cast<double>(w_base[ky * kw + kx]);
          if (wv == 0.0) continue;
          for (int64_t y = 0; y < oh; ++y) {
            const int64_t iy = y * stride + ky - padding;
            if (iy < 0 || iy >= h) continue;
            const float* in_row = in_plane + iy * w;
            double* acc_row = acc.data() + y * ow;
            // valid x range so that 0 <= x*stride + off < w
            const int64_t off = kx - padding;
            if (off > w - 1) continue;
            const int64_t x0 = off < 0 ? (-off + stride - 1) / stride : 0;
            const int64_t x1 = std::min<int64_t>(ow, (w - 1 - off) / stride + 1);
            for (int64_t x = x0; x < x1; ++x) {
              acc_row[x] += wv * static_cast<double>(in_row[x * stride + off]);
            }
          }
        }
      }
    }
    const double g = ep.scale.empty() ? 1.0 : static_cast<double>(ep.scale[static_cast<size_t>(co)]);
    const double b = ep.shift.empty() ? 0.0 : static_cast<double>(ep.shift[static_cast<size_t>(co)]);
    float* out_plane = out.data.data() + co * oh * ow;
    for (int64_t i = 0; i < oh * ow; ++i) {
      double v = g * acc[static_cast<size_t>(i)] + b;
      if (ep.relu && v < 0.0) v = 0.0;
      float f = static_cast<float>(v);
      if (ep.demote_output) f = round_to_half(f);
      out_plane[i] = f;
    }
  }
  return out;
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, int stride,
                     int padding, const ConvEpilogue& ep = {}) {
  if (input.shape.size() != 3 || weight.shape.size() != 4) {
    throw ShapeError("conv2d: expected input rank 3 and weight rank 4, got " +
                     Tensor::shape_str(input.shape) + " and " +
                     Tensor::shape_str(weight.shape));
  }
  const int64_t c_in = input.shape[0], h = input.shape[1], w = input.shape[2];
  const int64_t c_out = weight.shape[0], kc = weight.shape[1];
  const int64_t kh = weight.shape[2], kw = weight.shape[3];
  if (kc != c_in) {
    throw ShapeError("conv2d: input channels " + std::to_string(c_in) +
                     " != weight channels " + std::to_string(kc));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("conv2d: kernel dims must be odd, got " +
                     std::to_string(kh) + "x" + std::to_string(kw));
  }
  if (stride < 1 || padding < 0) {
    throw ValueError("conv2d: stride must be >= 1 and padding >= 0");
  }
  const int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const int64_t ow = (w + 2 * padding - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " does not fit input " +
                     Tensor::shape_str(input.shape) + " with padding " +
                     std::to_string(padding));
  }
  if (!ep.scale.empty() && static_cast<int64_t>(ep.scale.size()) != c_out) {
    throw ShapeError("conv2d: epilogue scale length " +
                     std::to_string(ep.scale.size()) + " != C_out " +
                     std::to_string(c_out));
  }
  return conv2d_raw(input.data.data(), input.shape, weight.data.data(),
                    weight.shape, stride, padding, ep);
}

// Gradient of conv2d w.r.t. its input (no epilogue; callers unchain the
// epilogue themselves). Fixed accumulation order, 64-bit accumulators.
inline Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                                    int stride, int padding,
                                    const std::vector<int64_t>& input_shape) {
  const int64_t c_in = input_shape[0], h = input_shape[1], w = input_shape[2];
  const int64_t c_out = weight.shape[0];
  const int64_t kh = weight.shape[2], kw = weight.shape[3];
  const int64_t oh = grad_out.shape[1], ow = grad_out.shape[2];

  std::vector<double> acc(static_cast<size_t>(c_in * h * w), 0.0);
  for (int64_t co = 0; co < c_out; ++co) {
    const float* go_plane = grad_out.data.data() + co * oh * ow;
    for (int64_t ci = 0; ci < c_in; ++ci) {
      double* acc_plane = acc.data() + ci * h * w;
      for (int64_t ky = 0; ky < kh; ++ky) {
        for (int64_t kx = 0; kx < kw; ++kx) {
          const double wv = static_cast<double>(weight.at4(co, ci, ky, kx));
          if (wv == 0.0) continue;
          for (int64_t y = 0; y < oh; ++y) {
            const int64_t iy = y * stride + ky - padding;
            if (iy < 0 || iy >= h) continue;
            const float* go_row = go_plane + y * ow;
            double* acc_row = acc_plane + iy * w;
            for (int64_t x = 0; x < ow; ++x) {
              const int64_t ix = x * stride + kx - padding;
              if (ix < 0 || ix >= w) continue;
              acc_row[ix] += wv * static_cast<double>(go_row[x]);
            }
          }
        }
      }
    }
  }
  Tensor out = Tensor::zeros(input_shape);
  for (size_t i = 0; i < acc.size(); ++i) out.data[i] = static_cast<float>(acc[i]);
  return out;
}

// Gradient of conv2d w.r.t. the weight.
inline Tensor conv2d_backward_weight(const Tensor& grad_out, const Tensor& input,
                                     int stride, int padding,
                                     const std::vector<int64_t>& weight_shape) {
  const int64_t c_in = input.shape[0], h = input.shape[1], w = input.shape[2];
  const int64_t c_out = weight_shape[0];
  const int64_t kh = weight_shape[2], kw = weight_shape[3];
  const int64_t oh = grad_out.shape[1], ow = grad_out.shape[2];

  Tensor out = Tensor::zeros(weight_shape);
  for (int64_t co = 0; co < c_out; ++co) {
    const float* go_plane = grad_out.data.data() + co * oh * ow;
    for (int64_t ci = 0; ci < c_in; ++ci) {
      const float* in_plane = input.data.data() + ci * h * w;
      for (int64_t ky = 0; ky < kh; ++ky) {
        for (int64_t kx = 0; kx < kw; ++kx) {
          double acc = 0.0;
          for (int64_t y = 0; y < oh; ++y) {
            const int64_t iy = y * stride + ky - padding;
            if (iy < 0 || iy >= h) continue;
            const float* go_row = go_plane + y * ow;
            const float* in_row = in_plane + iy * w;
            for (int64_t x = 0; x < ow; ++x) {
              const int64_t ix = x * stride + kx - padding;
              if (ix < 0 || ix >= w) continue;
              acc += static_cast<double>(go_row[x]) * static_cast<double>(in_row[ix]);
            }
          }
          out.at4(co, ci, ky, kx) = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

}  // namespace qf
