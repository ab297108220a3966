#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "oracles.hpp"
#include "quantfuse/exec.hpp"
#include "quantfuse/frontend.hpp"

using namespace qf;

namespace {

Tensor test_image(uint64_t seed = 3) {
  return oracle::random_tensor({3, 64, 64}, seed, 42, 0.0, 1.0);
}

FrontendModel quantized_toy(uint64_t seed = 7) {
  FrontendModel m = build_toy_patchifier(seed, ModelWidth::Small);
  QuantConfig cfg;
  return inject_qat_default(m, cfg, test_image(seed + 1));
}

// Independent schedule walker: recomputes the expected pass/byte counters
// for the all-quantized roster from layer shapes alone.
struct Expected {
  int64_t passes = 0;
  int64_t bytes_read = 0;
  int64_t bytes_written = 0;
};

Expected walk_schedule(const FrontendModel& m, int64_t h, int64_t w, ExecMode mode) {
  Expected e;
  auto sweep = [&](int64_t br, int64_t bw) {
    e.passes += 1;
    e.bytes_read += br;
    e.bytes_written += bw;
  };
  // activation spatial dims flowing through the hard-wired topology
  struct S { int64_t c, h, w; };
  auto after = [](const ConvLayer& l, S in) {
    return S{l.c_out(), (in.h + 2 * l.padding - l.weight.shape[2]) / l.stride + 1,
             (in.w + 2 * l.padding - l.weight.shape[3]) / l.stride + 1};
  };
  S x{3, h, w};
  std::array<S, kRosterSize> in_shapes;
  S x0 = after(m.layer(kConvIn), x);
  in_shapes[kConvIn] = x;
  in_shapes[kRes1Conv1] = x0;
  S r1 = after(m.layer(kRes1Conv1), x0);
  in_shapes[kRes1Conv2] = r1;
  S x1 = x0;  // skip add keeps dims
  in_shapes[kRes2Conv1] = x1;
  S r3 = after(m.layer(kRes2Conv1), x1);
  in_shapes[kRes2Conv2] = r3;
  in_shapes[kRes2Down] = x1;
  S x2 = after(m.layer(kRes2Conv2), r3);
  in_shapes[kRes3Conv1] = x2;
  S r5 = after(m.layer(kRes3Conv1), x2);
  in_shapes[kRes3Conv2] = r5;
  in_shapes[kFnetOut] = x2;
  in_shapes[kInetOut] = x2;

  for (int idx = 0; idx < kRosterSize; ++idx) {
    const ConvLayer& l = m.layer(idx);
    const S is = in_shapes[static_cast<size_t>(idx)];
    const int64_t na = is.c * is.h * is.w;
    const int64_t nw = l.weight.numel();
    const S os = after(l, is);
    const int64_t no = os.c * os.h * os.w;
    const int64_t co = l.c_out();
    if (!l.quantized) {
      sweep(4 * (na + nw), 4 * no);
      continue;
    }
    sweep(4 * (co + 1), 4 * (co + 1));  // scale resolution
    if (mode == ExecMode::PerOperator) {
      sweep(4 * na + 4, 4 * na);   // div
      sweep(4 * na, 4 * na);       // clip
      sweep(4 * na, 4 * na);       // round
      sweep(4 * na + 4, 4 * na);   // mul
      sweep(4 * (nw + co), 4 * nw);
      sweep(4 * nw, 4 * nw);
      sweep(4 * nw, 4 * nw);
      sweep(4 * (nw + co), 4 * nw);
    } else {
      sweep(4 * na + 4, 4 * na);
      sweep(4 * (nw + co), 4 * nw);
    }
    sweep(4 * (na + nw), 4 * no);  // conv
  }
  return e;
}

}  // namespace

TEST_CASE("per-layer pass deltas: 9+1 per-operator, 3+1 fused", "[exec]") {
  FrontendModel m = quantized_toy();
  Tensor x = test_image();
  const ConvLayer& l = m.layer(kConvIn);

  ExecutionContext per(ExecutionPlan{ExecMode::PerOperator});
  run_quant_conv(per, l, kConvIn, x);
  CHECK(per.trace.pass_count == 10);

  ExecutionContext fus(ExecutionPlan{ExecMode::Fused});
  run_quant_conv(fus, l, kConvIn, x);
  CHECK(fus.trace.pass_count == 4);
}

TEST_CASE("fused and per-operator outputs are bit-identical (FullOnly)", "[exec]") {
  FrontendModel m = quantized_toy();
  for (uint64_t s = 0; s < 3; ++s) {
    Tensor x = test_image(100 + s);
    ExecutionContext a(ExecutionPlan{ExecMode::PerOperator});
    ExecutionContext b(ExecutionPlan{ExecMode::Fused});
    FrontendOutput fa = run_frontend(a, m, x);
    FrontendOutput fb = run_frontend(b, m, x);
    REQUIRE(std::memcmp(fa.features.data.data(), fb.features.data.data(),
                        fa.features.data.size() * 4) == 0);
    REQUIRE(std::memcmp(fa.descriptors.data.data(), fb.descriptors.data.data(),
                        fa.descriptors.data.size() * 4) == 0);
  }
}

TEST_CASE("counters match the schedule-walking oracle exactly", "[exec]") {
  FrontendModel m = quantized_toy();
  Tensor x = test_image();
  for (ExecMode mode : {ExecMode::PerOperator, ExecMode::Fused}) {
    ExecutionContext ctx(ExecutionPlan{mode});
    run_frontend(ctx, m, x);
    const Expected e = walk_schedule(m, 64, 64, mode);
    CHECK(ctx.trace.pass_count == e.passes);
    CHECK(ctx.trace.bytes_read == e.bytes_read);
    CHECK(ctx.trace.bytes_written == e.bytes_written);
  }
}

TEST_CASE("pass-count ratio is exactly 2.5 on the all-quantized roster", "[exec]") {
  FrontendModel m = quantized_toy();
  Tensor x = test_image();
  ExecutionContext a(ExecutionPlan{ExecMode::PerOperator});
  ExecutionContext b(ExecutionPlan{ExecMode::Fused});
  run_frontend(a, m, x);
  run_frontend(b, m, x);
  CHECK(a.trace.pass_count * 2 == b.trace.pass_count * 5);
  // modeled byte traffic drops by at least 2x under fusion
  CHECK(a.trace.bytes_read + a.trace.bytes_written >=
        2 * (b.trace.bytes_read + b.trace.bytes_written));
}

TEST_CASE("arena: reserved never shrinks, per-operator reserves more", "[exec]") {
  FrontendModel m = quantized_toy();
  ExecutionContext a(ExecutionPlan{ExecMode::PerOperator});
  ExecutionContext b(ExecutionPlan{ExecMode::Fused});
  int64_t last_reserved = 0;
  for (uint64_t f = 0; f < 3; ++f) {
    run_frontend(a, m, test_image(f));
    CHECK(a.arena.reserved_bytes() >= last_reserved);
    last_reserved = a.arena.reserved_bytes();
    CHECK(a.arena.live_bytes() == 0);  // drained between frames
    run_frontend(b, m, test_image(f));
  }
  CHECK(a.trace.peak_reserved > b.trace.peak_reserved);
  CHECK(a.trace.peak_allocated >= a.arena.peak_allocated());
  CHECK(b.trace.peak_reserved >= b.trace.peak_allocated);
}

TEST_CASE("zero-layer path: unquantized model runs conv-only passes", "[exec]") {
  FrontendModel m = build_toy_patchifier(7, ModelWidth::Small);
  ExecutionContext ctx(ExecutionPlan{ExecMode::Fused});
  run_frontend(ctx, m, test_image());
  CHECK(ctx.trace.pass_count == kRosterSize);  // one conv pass per layer
}

TEST_CASE("fallback: fault in fused path reruns per-operator, bit-identical", "[exec]") {
  FrontendModel m = quantized_toy();
  Tensor x = test_image(55);

  ExecutionPlan faulty{ExecMode::Fused};
  faulty.fault_inject_layer = kRes2Conv2;
  ExecutionContext cf(faulty);
  FrontendOutput out_f = run_frontend(cf, m, x);
  CHECK(cf.trace.fell_back);

  ExecutionContext cp(ExecutionPlan{ExecMode::PerOperator});
  FrontendOutput out_p = run_frontend(cp, m, x);
  CHECK(!cp.trace.fell_back);
  REQUIRE(std::memcmp(out_f.features.data.data(), out_p.features.data.data(),
                      out_f.features.data.size() * 4) == 0);
  REQUIRE(std::memcmp(out_f.descriptors.data.data(), out_p.descriptors.data.data(),
                      out_f.descriptors.data.size() * 4) == 0);

  // without fallback the error propagates
  ExecutionPlan strict = faulty;
  strict.fallback_enabled = false;
  ExecutionContext cs(strict);
  REQUIRE_THROWS_AS(run_frontend(cs, m, x), FusedPathError);
}

TEST_CASE("trace aggregation is a monoid: sums and max-peaks", "[exec]") {
  ExecutionTrace a, b;
  a.pass_count = 10; a.bytes_read = 100; a.bytes_written = 50;
  a.peak_allocated = 7; a.peak_reserved = 9; a.wall_clock_ns = 1000; a.frames = 1;
  b.pass_count = 4; b.bytes_read = 40; b.bytes_written = 20;
  b.peak_allocated = 11; b.peak_reserved = 12; b.wall_clock_ns = 500; b.frames = 2;
  ExecutionTrace m = a;
  m.merge(b);
  CHECK(m.pass_count == 14);
  CHECK(m.bytes_read == 140);
  CHECK(m.peak_allocated == 11);
  CHECK(m.peak_reserved == 12);
  CHECK(m.frames == 3);

  ExecutionTrace empty;
  CHECK(trace_csv_row("s", "fused", empty) == "s,fused,0,0,0,0,0,0,0.000,0");
}

TEST_CASE("trace CSV and JSON mirrors share keys and values", "[exec]") {
  ExecutionTrace t;
  t.pass_count = 44; t.bytes_read = 123; t.bytes_written = 456;
  t.peak_allocated = 1024; t.peak_reserved = 2048;
  t.wall_clock_ns = 1500000; t.frames = 2; t.fell_back = true;
  CHECK(trace_csv_row("orbit", "peroperator", t) ==
        "orbit,peroperator,2,44,123,456,1024,2048,1.500,1");
  auto j = trace_json("orbit", "peroperator", t);
  CHECK(j["pass_count"] == 44);
  CHECK(j["peak_reserved"] == 2048);
  CHECK(j["fell_back"] == true);
  // same column set as the CSV header
  std::string header = trace_csv_header();
  for (auto it = j.begin(); it != j.end(); ++it) {
    CHECK(header.find(it.key()) != std::string::npos);
  }
}

TEST_CASE("weight cache: quantizes weights once, outputs unchanged", "[exec]") {
  FrontendModel m = quantized_toy();
  Tensor x = test_image(8);

  ExecutionPlan cached{ExecMode::Fused};
  cached.cache_weights = true;
  ExecutionContext cc(cached);
  FrontendOutput o1 = run_frontend(cc, m, x);
  const int64_t passes_first = cc.trace.pass_count;
  FrontendOutput o2 = run_frontend(cc, m, x);
  const int64_t passes_second = cc.trace.pass_count - passes_first;
  // second frame skips all 10 weight-quant sweeps
  CHECK(passes_second == passes_first - kRosterSize);

  ExecutionContext cn(ExecutionPlan{ExecMode::Fused});
  FrontendOutput o3 = run_frontend(cn, m, x);
  REQUIRE(std::memcmp(o1.features.data.data(), o3.features.data.data(),
                      o1.features.data.size() * 4) == 0);
  REQUIRE(std::memcmp(o2.features.data.data(), o3.features.data.data(),
                      o2.features.data.size() * 4) == 0);
}

TEST_CASE("HalfActivations: scale resolution stays full precision", "[exec]") {
  FrontendModel m = quantized_toy();
  ExecutionPlan plan{ExecMode::Fused, PrecisionPolicy::HalfActivations};
  ExecutionContext ctx(plan);
  FrontendOutput out = run_frontend(ctx, m, test_image(9));
  // every resolved-scale tensor carries the Full tag
  for (const auto& [idx, scales] : ctx.last_scales) {
    CHECK(scales.precision == Precision::Full);
  }
  // features live on the binary16 grid
  CHECK(out.features.precision == Precision::EmulatedHalf);
  for (float v : out.features.data) CHECK(v == round_to_half(v));
  // activation scales respect the stricter half-path lower bound
  for (const auto& [idx, scales] : ctx.last_scales) {
    const float sa = scales.data.back();
    CHECK(sa >= 1e-4f);
  }
}

TEST_CASE("dispatcher: threaded sweeps are bit-identical to sequential", "[exec]") {
  FrontendModel m = quantized_toy();
  Tensor x = test_image(31);
  ExecutionPlan seq{ExecMode::Fused};
  ExecutionPlan par{ExecMode::Fused};
  par.threads = 3;
  ExecutionContext cs(seq), cp(par);
  FrontendOutput a = run_frontend(cs, m, x);
  FrontendOutput b = run_frontend(cp, m, x);
  REQUIRE(std::memcmp(a.features.data.data(), b.features.data.data(),
                      a.features.data.size() * 4) == 0);
  REQUIRE(std::memcmp(a.descriptors.data.data(), b.descriptors.data.data(),
                      a.descriptors.data.size() * 4) == 0);
}
