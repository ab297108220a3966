// exec.hpp - fake-quantized convolution under two interchangeable plans.
//
// PerOperator decomposes each fake quantization into four whole-tensor
// sweeps (divide, clip, round, multiply) with materialized intermediates
// drawn from the arena; the intermediates stay live until the end of the
// expression, the way an eager framework keeps the op chain alive. Fused
// evaluates the whole expression in one sweep per tensor type plus one
// tiny sweep for scales. Both plans produce bit-identical outputs under
// FullOnly precision.
//
// The trace models each sweep as one kernel launch that reads its inputs
// and writes its output exactly once (elements x 4 bytes). The counters
// cover the quantization pipeline and the convolution itself; auxiliary
// elementwise work (skip adds, activation epilogues) is identical across
// plans and excluded, so plan deltas isolate the fake-quant path.
//
// Per quantized layer:  PerOperator = 1 + 4 + 4 sweeps + 1 conv,
//                       Fused       = 1 + 1 + 1 sweeps + 1 conv.

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "quantfuse/arena.hpp"
#include "quantfuse/model.hpp"
#include "quantfuse/quant.hpp"
#include "quantfuse/tensor.hpp"

namespace qf {

enum class ExecMode { PerOperator, Fused };
enum class PrecisionPolicy { FullOnly, HalfActivations };

inline std::string mode_name(ExecMode m) {
  return m == ExecMode::PerOperator ? "peroperator" : "fused";
}

// The fused path signals failure with this; with fallback enabled the
// engine re-executes the layer per-operator.
struct FusedPathError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ExecutionPlan {
  ExecMode mode = ExecMode::Fused;
  PrecisionPolicy policy = PrecisionPolicy::FullOnly;
  bool fallback_enabled = true;
  // Quantize frozen weights once per run instead of once per frame.
  bool cache_weights = false;
  // Test hook: make the fused path throw at this roster index (-1 = off).
  int fault_inject_layer = -1;
  // Worker threads for in-sweep data parallelism; 0 = sequential.
  int threads = 0;
};

struct LayerTrace {
  std::string name;
  int64_t passes = 0;
  int64_t bytes_read = 0;
  int64_t bytes_written = 0;
  int64_t wall_ns = 0;
};

struct ExecutionTrace {
  int64_t pass_count = 0;
  int64_t bytes_read = 0;
  int64_t bytes_written = 0;
  int64_t peak_allocated = 0;
  int64_t peak_reserved = 0;
  int64_t wall_clock_ns = 0;
  int64_t frames = 0;
  bool fell_back = false;
  std::vector<LayerTrace> per_layer;

  // Aggregation: counters sum, peaks take the max.
  void merge(const ExecutionTrace& o) {
    pass_count += o.pass_count;
    bytes_read += o.bytes_read;
    bytes_written += o.bytes_written;
    wall_clock_ns += o.wall_clock_ns;
    frames += o.frames;
    peak_allocated = std::max(peak_allocated, o.peak_allocated);
    peak_reserved = std::max(peak_reserved, o.peak_reserved);
    fell_back = fell_back || o.fell_back;
    per_layer.insert(per_layer.end(), o.per_layer.begin(), o.per_layer.end());
  }
};

// ---------------------------------------------------------------------------
// Dispatcher: a fixed pool of workers with deterministic contiguous
// chunking. Elementwise sweeps write disjoint ranges, so results are
// bit-identical to sequential execution for any thread count.
// ---------------------------------------------------------------------------

class Dispatcher {
 public:
  explicit Dispatcher(int threads = 0) {
    const int n = threads > 0 ? threads : 0;
    for (int i = 0; i < n; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Dispatcher() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  Dispatcher(const Dispatcher&) = delete;
  Dispatcher& operator=(const Dispatcher&) = delete;

  void sweep(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (workers_.empty() || n < 4096) {
      body(0, n);
      return;
    }
    const int64_t parts = static_cast<int64_t>(workers_.size());
    {
      std::lock_guard<std::mutex> lk(mu_);
      task_ = &body;
      task_n_ = n;
      task_parts_ = parts;
      next_part_ = 0;
      done_parts_ = 0;
      ++generation_;
    }
    cv_.notify_all();
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return done_parts_ == task_parts_; });
    task_ = nullptr;
  }

  int thread_count() const { return static_cast<int>(workers_.size()); }

 private:
  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      while (next_part_ < task_parts_) {
        const int64_t part = next_part_++;
        const int64_t lo = task_n_ * part / task_parts_;
        const int64_t hi = task_n_ * (part + 1) / task_parts_;
        auto* task = task_;
        lk.unlock();
        (*task)(lo, hi);
        lk.lock();
        if (++done_parts_ == task_parts_) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int64_t, int64_t)>* task_ = nullptr;
  int64_t task_n_ = 0, task_parts_ = 0, next_part_ = 0, done_parts_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

// One execution context = plan + arena + trace (+ caches). Externally
// single-threaded; distinct contexts may run on distinct threads.
struct ExecutionContext {
  ExecutionPlan plan;
  ArenaAllocator arena;
  ExecutionTrace trace;
  Dispatcher dispatcher;
  std::map<int, Tensor> cached_weights;   // quantized weights, cache_weights mode
  std::map<int, Tensor> last_scales;      // resolved scales per layer (debug)

  explicit ExecutionContext(const ExecutionPlan& p, int64_t arena_block = 1 << 20)
      : plan(p), arena(arena_block), dispatcher(p.threads) {}

  void sync_peaks() {
    trace.peak_allocated = arena.peak_allocated();
    trace.peak_reserved = arena.peak_reserved();
  }
};

namespace detail {

inline int64_t fbytes(int64_t n) { return n * static_cast<int64_t>(sizeof(float)); }

struct SweepCounter {
  LayerTrace* lt;
  ExecutionTrace* tr;
  void count(int64_t bytes_in, int64_t bytes_out) {
    lt->passes += 1;
    lt->bytes_read += bytes_in;
    lt->bytes_written += bytes_out;
    tr->pass_count += 1;
    tr->bytes_read += bytes_in;
    tr->bytes_written += bytes_out;
  }
};

}  // namespace detail

// Runs one conv layer under the context's plan. Input precision tag is
// honored: under HalfActivations the quantized activation is re-rounded
// to the binary16 grid inside the final write (the in-kernel FP32->FP16
// store), and scale resolution still happens in 64-bit.
inline Tensor run_quant_conv(ExecutionContext& ctx, const ConvLayer& layer,
                             int layer_idx, const Tensor& input) {
  const auto t0 = std::chrono::steady_clock::now();
  LayerTrace lt;
  lt.name = layer.name;
  detail::SweepCounter counter{&lt, &ctx.trace};

  const bool half_acts = ctx.plan.policy == PrecisionPolicy::HalfActivations;
  const Precision act_mode = half_acts ? Precision::EmulatedHalf : Precision::Full;
  ConvEpilogue ep{layer.affine_scale, layer.affine_shift, layer.relu, half_acts};

  Tensor out;
  if (!layer.quantized) {
    out = conv2d(input, layer.weight, layer.stride, layer.padding, ep);
    counter.count(detail::fbytes(input.numel() + layer.weight.numel()),
                  detail::fbytes(out.numel()));
  } else {
    const int64_t c_out = layer.c_out();
    const int64_t na = input.numel();
    const int64_t nw = layer.weight.numel();
    const float q = static_cast<float>(layer.qcfg.q_max());
    const float* x = input.data.data();
    const float* w = layer.weight.data.data();

    // Scale pass: resolve softplus+clamp for C_out weight scales plus the
    // activation scale into one small buffer. Always FP32+ precision.
    auto resolve_pass = [&](ArenaLease& sbuf) {
      for (int64_t c = 0; c < c_out; ++c) {
        sbuf.data()[c] = static_cast<float>(
            resolve_scale(layer.scales.log_w_scale[static_cast<size_t>(c)], layer.qcfg));
      }
      sbuf.data()[c_out] = static_cast<float>(
          resolve_scale(layer.scales.log_a_scale, layer.qcfg, act_mode));
      counter.count(detail::fbytes(c_out + 1), detail::fbytes(c_out + 1));
      Tensor snapshot({c_out + 1}, std::vector<float>(sbuf.data(), sbuf.data() + c_out + 1),
                      Precision::Full);
      ctx.last_scales[layer_idx] = std::move(snapshot);
    };

    const bool use_cache = ctx.plan.cache_weights && ctx.cached_weights.count(layer_idx) > 0;

    auto conv_pass = [&](const float* qa, const float* qw) {
      out = conv2d_raw(qa, input.shape, qw, layer.weight.shape, layer.stride,
                       layer.padding, ep);
      counter.count(detail::fbytes(na + nw), detail::fbytes(out.numel()));
    };

    auto maybe_cache = [&](const float* qw) {
      if (ctx.plan.cache_weights && !use_cache) {
        ctx.cached_weights[layer_idx] =
            Tensor(layer.weight.shape, std::vector<float>(qw, qw + nw));
      }
    };

    auto per_operator = [&] {
      ArenaLease sbuf(ctx.arena, c_out + 1);
      resolve_pass(sbuf);
      const float sa = sbuf.data()[c_out];
      const float* sw = sbuf.data();

      // Activations: divide, clip, round, multiply. All four intermediates
      // stay live until the expression completes.
      ArenaLease t1(ctx.arena, na), t2(ctx.arena, na), t3(ctx.arena, na),
          qa(ctx.arena, na);
      ctx.dispatcher.sweep(na, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) t1.data()[i] = fq_div(x[i], sa);
      });
      counter.count(detail::fbytes(na) + 4, detail::fbytes(na));
      ctx.dispatcher.sweep(na, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) t2.data()[i] = fq_clip(t1.data()[i], q);
      });
      counter.count(detail::fbytes(na), detail::fbytes(na));
      ctx.dispatcher.sweep(na, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) t3.data()[i] = fq_round(t2.data()[i]);
      });
      counter.count(detail::fbytes(na), detail::fbytes(na));
      ctx.dispatcher.sweep(na, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
          float v = fq_mul(t3.data()[i], sa);
          if (half_acts) v = round_to_half(v);
          qa.data()[i] = v;
        }
      });
      counter.count(detail::fbytes(na) + 4, detail::fbytes(na));
      t1.reset();
      t2.reset();
      t3.reset();

      if (use_cache) {
        sbuf.reset();
        conv_pass(qa.data(), ctx.cached_weights[layer_idx].data.data());
        return;
      }

      const int64_t per = nw / c_out;
      ArenaLease u1(ctx.arena, nw), u2(ctx.arena, nw), u3(ctx.arena, nw),
          qw(ctx.arena, nw);
      ctx.dispatcher.sweep(nw, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) u1.data()[i] = fq_div(w[i], sw[i / per]);
      });
      counter.count(detail::fbytes(nw + c_out), detail::fbytes(nw));
      ctx.dispatcher.sweep(nw, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) u2.data()[i] = fq_clip(u1.data()[i], q);
      });
      counter.count(detail::fbytes(nw), detail::fbytes(nw));
      ctx.dispatcher.sweep(nw, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) u3.data()[i] = fq_round(u2.data()[i]);
      });
      counter.count(detail::fbytes(nw), detail::fbytes(nw));
      ctx.dispatcher.sweep(nw, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) qw.data()[i] = fq_mul(u3.data()[i], sw[i / per]);
      });
      counter.count(detail::fbytes(nw + c_out), detail::fbytes(nw));
      u1.reset();
      u2.reset();
      u3.reset();
      sbuf.reset();

      maybe_cache(qw.data());
      conv_pass(qa.data(), qw.data());
    };

    auto fused = [&] {
      if (ctx.plan.fault_inject_layer == layer_idx) {
        throw FusedPathError("injected fault in fused path at layer " + layer.name);
      }
      ArenaLease sbuf(ctx.arena, c_out + 1);
      resolve_pass(sbuf);
      const float sa = sbuf.data()[c_out];
      const float* sw = sbuf.data();

      ArenaLease qa(ctx.arena, na);
      ctx.dispatcher.sweep(na, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
          float v = fake_quantize_value(x[i], sa, q);
          if (half_acts) v = round_to_half(v);
          qa.data()[i] = v;
        }
      });
      counter.count(detail::fbytes(na) + 4, detail::fbytes(na));

      if (use_cache) {
        sbuf.reset();
        conv_pass(qa.data(), ctx.cached_weights[layer_idx].data.data());
        return;
      }

      const int64_t per = nw / c_out;
      ArenaLease qw(ctx.arena, nw);
      ctx.dispatcher.sweep(nw, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
          qw.data()[i] = fake_quantize_value(w[i], sw[i / per], q);
        }
      });
      counter.count(detail::fbytes(nw + c_out), detail::fbytes(nw));
      sbuf.reset();

      maybe_cache(qw.data());
      conv_pass(qa.data(), qw.data());
    };

    if (ctx.plan.mode == ExecMode::PerOperator) {
      per_operator();
    } else {
      try {
        fused();
      } catch (const FusedPathError&) {
        if (!ctx.plan.fallback_enabled) throw;
        per_operator();
        ctx.trace.fell_back = true;
      }
    }
  }

  if (!all_finite(out)) {
    throw NonFiniteError("non-finite activations in layer " + layer.name);
  }
  lt.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                   std::chrono::steady_clock::now() - t0)
                   .count();
  ctx.trace.per_layer.push_back(std::move(lt));
  ctx.sync_peaks();
  return out;
}

struct FrontendOutput {
  Tensor features;     // fnet head
  Tensor descriptors;  // inet head
};

// Runs the full roster in order: stem, three residual blocks, two heads.
// Skip adds are plain elementwise work shared by both plans (uncounted).
// The arena is drained between frames: live returns to 0, reserved
// persists.
inline FrontendOutput run_frontend(ExecutionContext& ctx, const FrontendModel& m,
                                   const Tensor& image) {
  if (image.shape.size() != 3 || image.shape[0] != m.layer(kConvIn).c_in()) {
    throw ShapeError("run_frontend: expected input [" +
                     std::to_string(m.layer(kConvIn).c_in()) + ",H,W], got " +
                     Tensor::shape_str(image.shape));
  }
  if (image.shape[1] % 4 != 0 || image.shape[2] % 4 != 0) {
    throw ShapeError("run_frontend: H and W must be divisible by 4, got " +
                     Tensor::shape_str(image.shape));
  }
  const bool half_acts = ctx.plan.policy == PrecisionPolicy::HalfActivations;
  const auto t0 = std::chrono::steady_clock::now();

  // Input cast (FP16 cache on the half path); not a modeled sweep.
  Tensor x = half_acts ? demote_half(image) : image;

  auto maybe_half = [&](Tensor t) { return half_acts ? demote_half(t) : std::move(t); };

  const Tensor x0 = run_quant_conv(ctx, m.layer(kConvIn), kConvIn, x);
  Tensor r = run_quant_conv(ctx, m.layer(kRes1Conv1), kRes1Conv1, x0);
  r = run_quant_conv(ctx, m.layer(kRes1Conv2), kRes1Conv2, r);
  const Tensor x1 = maybe_half(relu(add(x0, r)));

  r = run_quant_conv(ctx, m.layer(kRes2Conv1), kRes2Conv1, x1);
  r = run_quant_conv(ctx, m.layer(kRes2Conv2), kRes2Conv2, r);
  const Tensor sc = run_quant_conv(ctx, m.layer(kRes2Down), kRes2Down, x1);
  const Tensor x2 = maybe_half(relu(add(r, sc)));

  r = run_quant_conv(ctx, m.layer(kRes3Conv1), kRes3Conv1, x2);
  r = run_quant_conv(ctx, m.layer(kRes3Conv2), kRes3Conv2, r);
  const Tensor x3 = maybe_half(relu(add(x2, r)));

  FrontendOutput out;
  out.features = run_quant_conv(ctx, m.layer(kFnetOut), kFnetOut, x3);
  out.descriptors = run_quant_conv(ctx, m.layer(kInetOut), kInetOut, x3);

  ctx.arena.check_drained();
  ctx.trace.frames += 1;
  ctx.trace.wall_clock_ns += std::chrono::duration_cast<std::chrono::nanoseconds>(
                                 std::chrono::steady_clock::now() - t0)
                                 .count();
  ctx.sync_peaks();
  return out;
}

// ---------------------------------------------------------------------------
// Trace reports.
// CSV: seq,mode,frames,pass_count,bytes_read,bytes_written,peak_alloc,
//      peak_reserved,wall_ms,fell_back
// ---------------------------------------------------------------------------

inline std::string trace_csv_header() {
  return "seq,mode,frames,pass_count,bytes_read,bytes_written,peak_alloc,"
         "peak_reserved,wall_ms,fell_back";
}

inline std::string format_ms(int64_t ns) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << static_cast<double>(ns) / 1e6;
  return os.str();
}

inline std::string trace_csv_row(const std::string& seq, const std::string& mode,
                                 const ExecutionTrace& t) {
  std::ostringstream os;
  os << seq << ',' << mode << ',' << t.frames << ',' << t.pass_count << ','
     << t.bytes_read << ',' << t.bytes_written << ',' << t.peak_allocated << ','
     << t.peak_reserved << ',' << format_ms(t.wall_clock_ns) << ','
     << (t.fell_back ? 1 : 0);
  return os.str();
}

inline nlohmann::ordered_json trace_json(const std::string& seq,
                                         const std::string& mode,
                                         const ExecutionTrace& t) {
  nlohmann::ordered_json j;
  j["seq"] = seq;
  j["mode"] = mode;
  j["frames"] = t.frames;
  j["pass_count"] = t.pass_count;
  j["bytes_read"] = t.bytes_read;
  j["bytes_written"] = t.bytes_written;
  j["peak_alloc"] = t.peak_allocated;
  j["peak_reserved"] = t.peak_reserved;
  j["wall_ms"] = static_cast<double>(t.wall_clock_ns) / 1e6;
  j["fell_back"] = t.fell_back;
  return j;
}

}  // namespace qf
