// oracles.hpp - independent reference implementations used only by tests.
//
// Everything here is deliberately written the dumb way (quadruple loops,
// exhaustive searches, numeric differentiation) and stays independent of
// the library code paths it checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "quantfuse/rng.hpp"
#include "quantfuse/tensor.hpp"

namespace oracle {

// Brute-force cross-correlation: one accumulator per output element,
// natural output-centric loop order.
inline qf::Tensor conv2d_bruteforce(const qf::Tensor& in, const qf::Tensor& w,
                                    int stride, int padding) {
  const int64_t ci_n = in.shape[0], h = in.shape[1], ww = in.shape[2];
  const int64_t co_n = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  const int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const int64_t ow = (ww + 2 * padding - kw) / stride + 1;
  qf::Tensor out = qf::Tensor::zeros({co_n, oh, ow});
  for (int64_t co = 0; co < co_n; ++co) {
    for (int64_t y = 0; y < oh; ++y) {
      for (int64_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (int64_t ci = 0; ci < ci_n; ++ci) {
          for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t iy = y * stride + ky - padding;
              const int64_t ix = x * stride + kx - padding;
              if (iy < 0 || iy >= h || ix < 0 || ix >= ww) continue;
              acc += static_cast<double>(in.at3(ci, iy, ix)) *
                     static_cast<double>(w.at4(co, ci, ky, kx));
            }
          }
        }
        out.at3(co, y, x) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

// Nearest binary16 by exhaustive search over all finite half codes,
// ties broken toward the even mantissa code.
inline float nearest_half_bruteforce(float x) {
  float best = 0.0f;
  double best_err = std::numeric_limits<double>::infinity();
  uint16_t best_code = 0;
  for (uint32_t code = 0; code < 0x10000u; ++code) {
    const uint16_t h = static_cast<uint16_t>(code);
    const uint32_t exp = (h >> 10) & 0x1f;
    if (exp == 31) continue;  // skip inf/NaN
    const float v = qf::f16_to_f32(h);
    const double err = std::abs(static_cast<double>(v) - static_cast<double>(x));
    if (err < best_err ||
        (err == best_err && (h & 1u) == 0 && (best_code & 1u) != 0)) {
      best_err = err;
      best = v;
      best_code = h;
    }
  }
  return best;
}

// Kahan compensated summation in 64-bit.
inline double compensated_sum(const std::vector<float>& v) {
  double s = 0.0, c = 0.0;
  for (float f : v) {
    const double y = static_cast<double>(f) - c;
    const double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return s;
}

// Central finite difference of a scalar function.
inline double central_diff(const std::function<double(double)>& f, double x,
                           double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline qf::Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed,
                                uint64_t stream, double lo = -1.0, double hi = 1.0) {
  qf::Tensor t = qf::Tensor::zeros(std::move(shape));
  const qf::CounterRng rng{seed, stream};
  for (int64_t i = 0; i < t.numel(); ++i) {
    t.data[static_cast<size_t>(i)] =
        static_cast<float>(rng.uniform(static_cast<uint64_t>(i), lo, hi));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Brute-force trajectory alignment: iterative least squares with NUMERIC
// Jacobians over (axis-angle, translation, optional log-scale), multiple
// starts. Independent of the closed-form Umeyama route it cross-checks.
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::Matrix3d rot_from_aa(const Eigen::Vector3d& aa) {
  const double th = aa.norm();
  if (th < 1e-14) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(th, aa / th).toRotationMatrix();
}

inline Eigen::VectorXd align_residuals(const Eigen::VectorXd& p,
                                       const Eigen::Matrix3Xd& src,
                                       const Eigen::Matrix3Xd& dst,
                                       bool with_scale) {
  const Eigen::Matrix3d r = rot_from_aa(p.segment<3>(0));
  const Eigen::Vector3d t = p.segment<3>(3);
  const double s = with_scale ? std::exp(p[6]) : 1.0;
  Eigen::VectorXd res(3 * src.cols());
  for (Eigen::Index i = 0; i < src.cols(); ++i) {
    res.segment<3>(3 * i) = dst.col(i) - (s * (r * src.col(i)) + t);
  }
  return res;
}

}  // namespace detail

inline double brute_force_alignment_rmse(const Eigen::Matrix3Xd& src,
                                         const Eigen::Matrix3Xd& dst,
                                         bool with_scale) {
  const int dim = with_scale ? 7 : 6;
  const Eigen::Index n = src.cols();
  double best_cost = std::numeric_limits<double>::infinity();

  std::vector<Eigen::VectorXd> starts;
  starts.push_back(Eigen::VectorXd::Zero(dim));
  const qf::CounterRng rng{424242, 0};
  for (int s = 0; s < 4; ++s) {
    Eigen::VectorXd p = Eigen::VectorXd::Zero(dim);
    for (int a = 0; a < 3; ++a) {
      p[a] = rng.uniform(static_cast<uint64_t>(8 * s + a), -2.0, 2.0);
    }
    starts.push_back(p);
  }

  for (const Eigen::VectorXd& start : starts) {
    Eigen::VectorXd p = start;
    double lambda = 1e-6;
    Eigen::VectorXd res = detail::align_residuals(p, src, dst, with_scale);
    double cost = res.squaredNorm();
    for (int it = 0; it < 200; ++it) {
      // numeric Jacobian, central differences
      Eigen::MatrixXd jac(3 * n, dim);
      const double h = 1e-6;
      for (int d = 0; d < dim; ++d) {
        Eigen::VectorXd pp = p, pm = p;
        pp[d] += h;
        pm[d] -= h;
        jac.col(d) = (detail::align_residuals(pp, src, dst, with_scale) -
                      detail::align_residuals(pm, src, dst, with_scale)) /
                     (2 * h);
      }
      const Eigen::MatrixXd jtj = jac.transpose() * jac;
      const Eigen::VectorXd jtr = jac.transpose() * res;
      const Eigen::VectorXd step =
          (jtj + lambda * Eigen::MatrixXd::Identity(dim, dim)).ldlt().solve(-jtr);
      const Eigen::VectorXd cand = p + step;
      const Eigen::VectorXd cres = detail::align_residuals(cand, src, dst, with_scale);
      const double ccost = cres.squaredNorm();
      if (ccost < cost) {
        p = cand;
        res = cres;
        const double drop = cost - ccost;
        cost = ccost;
        lambda = std::max(lambda / 10.0, 1e-12);
        if (step.norm() < 1e-12 || drop < 1e-16) break;
      } else {
        lambda *= 10.0;
        if (lambda > 1e8) break;
      }
    }
    best_cost = std::min(best_cost, cost);
  }
  return std::sqrt(best_cost / static_cast<double>(n));
}

}  // namespace oracle
