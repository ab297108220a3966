// distill.hpp - scale-only teacher-student training.
//
// The joint loss couples numerical proximity and directional consistency:
//   L = MSE(F_s,F_t) + MSE(I_s,I_t)
//     + lambda*(1 - CosSim(F_s,F_t)) + lambda*(1 - CosSim(I_s,I_t))
// MSE averages over all elements; CosSim is taken per spatial location
// over the channel axis and averaged over locations (matching happens
// per location, so that is where direction matters).
//
// Adam is applied to the log scales and to nothing else. Weights stay
// frozen; the trainer asserts the student/teacher weight hashes agree.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "quantfuse/frontend.hpp"
#include "quantfuse/quant.hpp"
#include "quantfuse/tensor_io.hpp"

namespace qf {

struct DistillConfig {
  double lambda_cos = 1.0;
  // From the LSQ-style init the optimum sits a few log units away; 1e-3
  // cannot cover that distance in a 200-step run.
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t steps = 200;
  int64_t chunk_len = 2;
  uint64_t seed = 0;
  bool half_forward = false;  // optional autocast-style FP16 student forward

  void validate() const {
    if (steps < 1) throw ValueError("DistillConfig: steps must be >= 1");
    if (chunk_len < 1) throw ValueError("DistillConfig: chunk_len must be >= 1");
    if (lambda_cos < 0) throw ValueError("DistillConfig: lambda_cos must be >= 0");
  }
};

struct DistillLoss {
  double total = 0.0;
  double mse_f = 0.0, mse_i = 0.0;
  double cos_f = 0.0, cos_i = 0.0;  // mean cosine similarities
  Tensor d_features;
  Tensor d_descriptors;
};

namespace detail {

// MSE + mean-per-location cosine for one tensor pair; accumulates the
// gradient w.r.t. the student tensor.
struct PairTerms {
  double mse = 0.0;
  double cos_mean = 0.0;
};

inline PairTerms pair_loss(const Tensor& s, const Tensor& t, double lambda,
                           Tensor& d_s) {
  if (!same_shape(s, t)) {
    throw ShapeError("distill_loss: student " + Tensor::shape_str(s.shape) +
                     " vs teacher " + Tensor::shape_str(t.shape));
  }
  const int64_t c = s.shape[0];
  const int64_t hw = s.numel() / c;
  const int64_t n = s.numel();

  d_s = Tensor::zeros(s.shape);
  PairTerms out;

  // MSE over all elements (pairwise reduction for determinism).
  std::vector<double> sq(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(s.data[static_cast<size_t>(i)]) -
                     static_cast<double>(t.data[static_cast<size_t>(i)]);
    sq[static_cast<size_t>(i)] = d * d;
    d_s.data[static_cast<size_t>(i)] +=
        static_cast<float>(2.0 * d / static_cast<double>(n));
  }
  out.mse = pairwise_sum(sq.data(), n) / static_cast<double>(n);

  // Per-location cosine over the channel axis.
  std::vector<double> cos_loc(static_cast<size_t>(hw));
  for (int64_t p = 0; p < hw; ++p) {
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int64_t ch = 0; ch < c; ++ch) {
      const double a = s.data[static_cast<size_t>(ch * hw + p)];
      const double b = t.data[static_cast<size_t>(ch * hw + p)];
      dot += a * b;
      na2 += a * a;
      nb2 += b * b;
    }
    if (na2 == 0.0 || nb2 == 0.0) {
      cos_loc[static_cast<size_t>(p)] = 0.0;  // guarded: no gradient either
      continue;
    }
    // dot/sqrt(na2*nb2): identical vectors give exactly 1.0 under
    // round-to-nearest, so the identity pair yields L == 0 bit-exactly.
    const double nrm = std::sqrt(na2 * nb2);
    const double cosv = dot / nrm;
    cos_loc[static_cast<size_t>(p)] = cosv;
    // d(1-cos)/da = -(b/nrm - cos*a/na2); averaged over locations
    const double w = lambda / static_cast<double>(hw);
    for (int64_t ch = 0; ch < c; ++ch) {
      const double a = s.data[static_cast<size_t>(ch * hw + p)];
      const double b = t.data[static_cast<size_t>(ch * hw + p)];
      d_s.data[static_cast<size_t>(ch * hw + p)] +=
          static_cast<float>(-w * (b / nrm - cosv * a / na2));
    }
  }
  out.cos_mean = pairwise_sum(cos_loc.data(), hw) / static_cast<double>(hw);
  return out;
}

}  // namespace detail

inline DistillLoss distill_loss(const Tensor& f_s, const Tensor& f_t,
                                const Tensor& i_s, const Tensor& i_t,
                                double lambda_cos) {
  if (f_s.shape.empty() || f_s.shape[0] < 1) {
    throw ShapeError("distill_loss: channel dim must be >= 1");
  }
  DistillLoss out;
  const auto tf = detail::pair_loss(f_s, f_t, lambda_cos, out.d_features);
  const auto ti = detail::pair_loss(i_s, i_t, lambda_cos, out.d_descriptors);
  out.mse_f = tf.mse;
  out.mse_i = ti.mse;
  out.cos_f = tf.cos_mean;
  out.cos_i = ti.cos_mean;
  out.total = tf.mse + ti.mse + lambda_cos * (1.0 - tf.cos_mean) +
              lambda_cos * (1.0 - ti.cos_mean);
  return out;
}

// ---------------------------------------------------------------------------
// Trainer.
// ---------------------------------------------------------------------------

struct StepLog {
  int64_t step = 0;
  double loss = 0.0, mse_f = 0.0, mse_i = 0.0, cos_f = 0.0, cos_i = 0.0;
  int64_t skipped_so_far = 0;
};

struct TrainState {
  std::vector<double> m, v;  // Adam moments, one per trainable scale entry
  int64_t step = 0;
  int64_t skipped_steps = 0;
  std::vector<StepLog> history;
  size_t param_count = 0;
};

struct TrainResult {
  TrainState state;
  ScaleSet scales;
  FrontendModel student;  // scales updated, weights untouched
};

namespace detail {

// Flattened view over the trainable set, roster order: per layer all
// log_w entries then log_a.
inline size_t scale_param_count(const FrontendModel& m) {
  size_t n = 0;
  for (const auto& l : m.layers) n += l.scales.log_w_scale.size() + 1;
  return n;
}

template <typename Fn>
inline void for_each_scale(FrontendModel& m, Fn&& fn) {
  size_t k = 0;
  for (ConvLayer& l : m.layers) {
    for (double& w : l.scales.log_w_scale) fn(k++, w);
    fn(k++, l.scales.log_a_scale);
  }
}

template <typename Fn>
inline void for_each_grad(const FrontendModel& m, const ScaleGrads& g, Fn&& fn) {
  size_t k = 0;
  for (int idx = 0; idx < kRosterSize; ++idx) {
    for (double v : g.d_log_w[static_cast<size_t>(idx)]) fn(k++, v);
    fn(k++, g.d_log_a[static_cast<size_t>(idx)]);
  }
  (void)m;
}

}  // namespace detail

// Scale-only distillation. `frames` is the training stream, consumed in
// order as independent chunks of cfg.chunk_len (wrapping around when the
// stream is shorter than steps*chunk_len).
inline TrainResult train_scales(const FrontendModel& student_in,
                                const FrontendModel& teacher,
                                const std::vector<Tensor>& frames,
                                const DistillConfig& cfg) {
  cfg.validate();
  if (frames.empty()) throw ValueError("train_scales: empty data stream");
  for (const auto& l : student_in.layers) {
    if (!l.quantized) {
      throw ValueError("train_scales: student layer '" + l.name +
                       "' is not quantized");
    }
  }
  if (weight_hash(student_in) != weight_hash(teacher)) {
    throw ValueError("train_scales: student weights differ from teacher's");
  }

  TrainResult res;
  res.student = student_in;
  FrontendModel& student = res.student;

  TrainState& st = res.state;
  st.param_count = detail::scale_param_count(student);
  st.m.assign(st.param_count, 0.0);
  st.v.assign(st.param_count, 0.0);

  int64_t frame_cursor = 0;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    ScaleGrads grads = ScaleGrads::zeros_like(student);
    double loss = 0.0, mse_f = 0.0, mse_i = 0.0, cos_f = 0.0, cos_i = 0.0;
    bool bad = false;

    for (int64_t k = 0; k < cfg.chunk_len; ++k) {
      const Tensor& frame =
          frames[static_cast<size_t>(frame_cursor % static_cast<int64_t>(frames.size()))];
      ++frame_cursor;
      try {
        ForwardCache sc = forward_train(student, frame, cfg.half_forward);
        ForwardCache tc = forward_train(teacher, frame, false);
        DistillLoss dl = distill_loss(promote_full(sc.out.features),
                                      tc.out.features,
                                      promote_full(sc.out.descriptors),
                                      tc.out.descriptors, cfg.lambda_cos);
        const double inv = 1.0 / static_cast<double>(cfg.chunk_len);
        loss += dl.total * inv;
        mse_f += dl.mse_f * inv;
        mse_i += dl.mse_i * inv;
        cos_f += dl.cos_f * inv;
        cos_i += dl.cos_i * inv;
        for (float& gv : dl.d_features.data) gv = static_cast<float>(gv * inv);
        for (float& gv : dl.d_descriptors.data) gv = static_cast<float>(gv * inv);
        backward_train(student, sc, dl.d_features, dl.d_descriptors, grads);
      } catch (const NonFiniteError&) {
        bad = true;
        break;
      }
    }

    if (bad || !std::isfinite(loss) || !grads.all_finite()) {
      ++st.skipped_steps;
      ++st.step;
      continue;
    }

    // Adam over the flattened trainable set.
    ++st.step;
    const int64_t t = st.step - st.skipped_steps;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    std::vector<double> flat_g(st.param_count, 0.0);
    detail::for_each_grad(student, grads, [&](size_t k, double v) { flat_g[k] = v; });
    detail::for_each_scale(student, [&](size_t k, double& p) {
      double& mk = st.m[k];
      double& vk = st.v[k];
      mk = cfg.beta1 * mk + (1.0 - cfg.beta1) * flat_g[k];
      vk = cfg.beta2 * vk + (1.0 - cfg.beta2) * flat_g[k] * flat_g[k];
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      p -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    });

    st.history.push_back(StepLog{st.step, loss, mse_f, mse_i, cos_f, cos_i,
                                 st.skipped_steps});
  }

  for (const auto& l : student.layers) res.scales.by_layer[l.name] = l.scales;
  return res;
}

// ---------------------------------------------------------------------------
// Scales checkpoint (QSCL): magic, version, JSON manifest of offsets,
// then raw little-endian float32 log-scale vectors.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kScalesVersion = 1;

inline std::string serialize_scales(const ScaleSet& set) {
  std::string payload;
  nlohmann::ordered_json manifest;
  manifest["version"] = kScalesVersion;
  manifest["layers"] = nlohmann::ordered_json::object();
  for (const auto& [name, p] : set.by_layer) {
    nlohmann::ordered_json jl;
    jl["log_w_off"] = payload.size();
    jl["log_w_count"] = p.log_w_scale.size();
    for (double v : p.log_w_scale) detail::put_f32(payload, static_cast<float>(v));
    jl["log_a_off"] = payload.size();
    detail::put_f32(payload, static_cast<float>(p.log_a_scale));
    manifest["layers"][name] = std::move(jl);
  }
  const std::string mstr = manifest.dump();
  std::string out;
  out.append("QSCL", 4);
  detail::put_le<uint32_t>(out, kScalesVersion);
  detail::put_le<uint64_t>(out, mstr.size());
  out += mstr;
  out += payload;
  return out;
}

inline void save_scales(const std::string& path, const ScaleSet& set) {
  write_file(path, serialize_scales(set));
}

inline ScaleSet parse_scales(const std::string& buf) {
  if (buf.size() < 16 || buf.compare(0, 4, "QSCL") != 0) {
    throw IoError("bad scales magic (expected QSCL)");
  }
  const uint32_t ver = detail::get_le<uint32_t>(buf.data() + 4);
  if (ver != kScalesVersion) {
    throw IoError("unsupported scales version " + std::to_string(ver));
  }
  const uint64_t mlen = detail::get_le<uint64_t>(buf.data() + 8);
  if (16 + mlen > buf.size()) throw IoError("scales manifest out of bounds");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(buf.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("scales manifest parse error: ") + e.what());
  }
  const size_t payload_base = 16 + mlen;
  ScaleSet set;
  for (const auto& [name, jl] : manifest.at("layers").items()) {
    ScaleParams p;
    const size_t woff = payload_base + jl.at("log_w_off").get<size_t>();
    const size_t wcount = jl.at("log_w_count").get<size_t>();
    const size_t aoff = payload_base + jl.at("log_a_off").get<size_t>();
    if (woff + 4 * wcount > buf.size() || aoff + 4 > buf.size()) {
      throw IoError("scales payload truncated");
    }
    p.log_w_scale.resize(wcount);
    for (size_t i = 0; i < wcount; ++i) {
      p.log_w_scale[i] = static_cast<double>(detail::get_f32(buf.data() + woff + 4 * i));
    }
    p.log_a_scale = static_cast<double>(detail::get_f32(buf.data() + aoff));
    set.by_layer[name] = std::move(p);
  }
  return set;
}

inline ScaleSet load_scales(const std::string& path) {
  return parse_scales(read_file(path));
}

// ---------------------------------------------------------------------------
// Training-start scale init and the standard synthetic task.
// ---------------------------------------------------------------------------

// LSQ-style init, s = 2*mean|x| / sqrt(q_max), from one calibration
// frame. Max-abs calibration (the inject-time default) already sits at
// the distillation floor for INT8; this init leaves the scales a real
// optimization distance away, which is what training is for.
inline ScaleSet lsq_init_scales(const FrontendModel& model, const QuantConfig& cfg,
                                const Tensor& calibration_image) {
  cfg.validate();
  const FrontendModel teacher = strip_qat(model);
  const ForwardCache fc = forward_train(teacher, calibration_image);
  const double rq = std::sqrt(static_cast<double>(cfg.q_max()));

  ScaleSet out;
  for (int idx = 0; idx < kRosterSize; ++idx) {
    const ConvLayer& l = model.layer(idx);
    const LayerCache& c = fc.layers[static_cast<size_t>(idx)];
    ScaleParams p;

    double a_mean = 0.0;
    for (float v : c.x.data) a_mean += std::abs(static_cast<double>(v));
    a_mean /= static_cast<double>(c.x.data.size());
    p.log_a_scale = softplus_inv(std::max(2.0 * a_mean / rq, cfg.s_min));

    const int64_t per = l.weight.numel() / l.c_out();
    p.log_w_scale.resize(static_cast<size_t>(l.c_out()));
    for (int64_t ch = 0; ch < l.c_out(); ++ch) {
      double w_mean = 0.0;
      const float* w = l.weight.data.data() + ch * per;
      for (int64_t i = 0; i < per; ++i) w_mean += std::abs(static_cast<double>(w[i]));
      w_mean /= static_cast<double>(per);
      p.log_w_scale[static_cast<size_t>(ch)] =
          softplus_inv(std::max(2.0 * w_mean / rq, cfg.s_min));
    }
    out.by_layer[l.name] = std::move(p);
  }
  return out;
}

// The synthetic training stream: deterministic uniform-noise frames.
inline std::vector<Tensor> make_training_frames(uint64_t seed, int64_t count,
                                                int64_t hw = 64) {
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t f = 0; f < count; ++f) {
    Tensor t = Tensor::zeros({3, hw, hw});
    const CounterRng rng{seed, 5000 + static_cast<uint64_t>(f)};
    for (int64_t i = 0; i < t.numel(); ++i) {
      t.data[static_cast<size_t>(i)] =
          static_cast<float>(rng.uniform(static_cast<uint64_t>(i), 0.0, 1.0));
    }
    out.push_back(std::move(t));
  }
  return out;
}

// Training log CSV: step,loss,mse_f,mse_i,cos_f,cos_i,skipped
inline std::string train_log_csv(const TrainState& st) {
  std::string out = "step,loss,mse_f,mse_i,cos_f,cos_i,skipped\n";
  char buf[256];
  for (const StepLog& s : st.history) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%lld\n",
                  static_cast<long long>(s.step), s.loss, s.mse_f, s.mse_i,
                  s.cos_f, s.cos_i, static_cast<long long>(s.skipped_so_far));
    out += buf;
  }
  return out;
}

}  // namespace qf
