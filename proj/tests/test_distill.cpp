#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "quantfuse/distill.hpp"

using namespace qf;

namespace {

std::vector<Tensor> noise_frames(uint64_t seed, int64_t count, int64_t hw = 32) {
  std::vector<Tensor> out;
  for (int64_t i = 0; i < count; ++i) {
    out.push_back(oracle::random_tensor({3, hw, hw}, seed, 1000 + static_cast<uint64_t>(i),
                                        0.0, 1.0));
  }
  return out;
}

}  // namespace

TEST_CASE("distill_loss: identity pairs give exactly zero", "[distill]") {
  Tensor f = oracle::random_tensor({4, 3, 3}, 1, 0, -1.0, 1.0);
  Tensor i = oracle::random_tensor({4, 3, 3}, 1, 1, -1.0, 1.0);
  DistillLoss l = distill_loss(f, f, i, i, 1.0);
  CHECK(l.total == 0.0);
  CHECK(l.mse_f == 0.0);
  CHECK(l.cos_f == 1.0);
  for (float v : l.d_features.data) CHECK(v == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("distill_loss: orthogonal single-location hand case", "[distill]") {
  // F_s=[1,0], F_t=[0,1]: MSE = mean([1,1]) = 1, CosSim = 0.
  // Descriptor pair identical, so it contributes nothing. L = 1 + 1 = 2.
  Tensor fs({2, 1, 1}, {1.0f, 0.0f});
  Tensor ft({2, 1, 1}, {0.0f, 1.0f});
  Tensor ii({2, 1, 1}, {0.5f, 0.25f});
  DistillLoss l = distill_loss(fs, ft, ii, ii, 1.0);
  CHECK(l.mse_f == 1.0);
  CHECK(l.cos_f == 0.0);
  CHECK(l.mse_i == 0.0);
  CHECK(l.cos_i == 1.0);
  CHECK(l.total == 2.0);
}

TEST_CASE("distill_loss: zero-norm location is guarded, not NaN", "[distill]") {
  Tensor fs({2, 2, 1}, {0.0f, 1.0f, 0.0f, 0.5f});   // location 0 all-zero
  Tensor ft({2, 2, 1}, {0.0f, 1.0f, 0.0f, 0.5f});
  DistillLoss l = distill_loss(fs, ft, fs, ft, 1.0);
  CHECK(std::isfinite(l.total));
  // location 0 contributes CosSim 0; location 1 contributes 1
  CHECK(l.cos_f == Catch::Approx(0.5));
  for (float v : l.d_features.data) CHECK(std::isfinite(v));
  CHECK(l.d_features.data[0] == 0.0f);  // zero-norm location: zero gradient
  CHECK(l.d_features.data[2] == 0.0f);
}

TEST_CASE("distill_loss is non-negative and zero only at the fixpoint", "[distill]") {
  for (uint64_t trial = 0; trial < 10; ++trial) {
    Tensor fs = oracle::random_tensor({3, 4, 4}, trial, 0, -1.0, 1.0);
    Tensor ft = oracle::random_tensor({3, 4, 4}, trial, 1, -1.0, 1.0);
    Tensor is = oracle::random_tensor({3, 4, 4}, trial, 2, -1.0, 1.0);
    Tensor it = oracle::random_tensor({3, 4, 4}, trial, 3, -1.0, 1.0);
    DistillLoss l = distill_loss(fs, ft, is, it, 0.7);
    CHECK(l.total >= 0.0);
    CHECK(l.total > 0.0);  // random pairs never coincide
  }
}

TEST_CASE("distill_loss gradients match central finite differences", "[distill]") {
  const CounterRng pick{31, 9};
  for (uint64_t trial = 0; trial < 20; ++trial) {
    Tensor fs = oracle::random_tensor({3, 3, 2}, 50 + trial, 0, -1.0, 1.0);
    Tensor ft = oracle::random_tensor({3, 3, 2}, 50 + trial, 1, -1.0, 1.0);
    Tensor is = oracle::random_tensor({3, 3, 2}, 50 + trial, 2, -1.0, 1.0);
    Tensor it = oracle::random_tensor({3, 3, 2}, 50 + trial, 3, -1.0, 1.0);
    const double lambda = 0.5 + 0.1 * static_cast<double>(trial % 3);
    DistillLoss l = distill_loss(fs, ft, is, it, lambda);

    for (int probe = 0; probe < 4; ++probe) {
      const size_t idx = static_cast<size_t>(
          pick.word(trial * 16 + static_cast<uint64_t>(probe)) % fs.data.size());
      const double h = 1e-4;
      Tensor p = fs, m = fs;
      p.data[idx] = static_cast<float>(static_cast<double>(p.data[idx]) + h);
      m.data[idx] = static_cast<float>(static_cast<double>(m.data[idx]) - h);
      const double eff_h = (static_cast<double>(p.data[idx]) -
                            static_cast<double>(m.data[idx])) / 2.0;
      const double fd = (distill_loss(p, ft, is, it, lambda).total -
                         distill_loss(m, ft, is, it, lambda).total) /
                        (2.0 * eff_h);
      CHECK(static_cast<double>(l.d_features.data[idx]) ==
            Catch::Approx(fd).epsilon(1e-4).margin(1e-9));
    }
  }
}

TEST_CASE("train_scales: frozen weights, exact trainable set, descent", "[distill]") {
  FrontendModel base = build_toy_patchifier(7, ModelWidth::Small);
  QuantConfig cfg;
  std::vector<Tensor> frames = noise_frames(7, 16);
  FrontendModel student = inject_qat_default(base, cfg, frames[0]);
  FrontendModel teacher = strip_qat(student);
  const std::string h0 = weight_hash(student);

  DistillConfig dc;
  dc.steps = 30;
  dc.chunk_len = 2;
  TrainResult r = train_scales(student, teacher, frames, dc);

  // freeze contract
  CHECK(weight_hash(r.student) == h0);
  CHECK(weight_hash(teacher) == h0);

  // optimizer state covers exactly the log scales
  size_t expect = 0;
  for (const auto& l : student.layers) {
    expect += static_cast<size_t>(l.c_out()) + 1;
  }
  CHECK(r.state.param_count == expect);
  CHECK(r.state.m.size() == expect);
  CHECK(r.state.v.size() == expect);

  REQUIRE(r.state.history.size() == 30);
  CHECK(r.state.history.back().loss < r.state.history.front().loss);
  CHECK(r.state.skipped_steps == 0);
}

TEST_CASE("train_scales: lr=0 leaves scales bitwise unchanged", "[distill]") {
  FrontendModel base = build_toy_patchifier(3, ModelWidth::Small);
  QuantConfig cfg;
  // single repeated frame: with a no-op optimizer the loss cannot move
  std::vector<Tensor> frames = noise_frames(3, 1);
  FrontendModel student = inject_qat_default(base, cfg, frames[0]);
  FrontendModel teacher = strip_qat(student);

  DistillConfig dc;
  dc.steps = 5;
  dc.chunk_len = 1;
  dc.lr = 0.0;
  TrainResult r = train_scales(student, teacher, frames, dc);
  for (int idx = 0; idx < kRosterSize; ++idx) {
    CHECK(r.student.layer(idx).scales.log_a_scale ==
          student.layer(idx).scales.log_a_scale);
    CHECK(r.student.layer(idx).scales.log_w_scale ==
          student.layer(idx).scales.log_w_scale);
  }
  // loss history is constant
  for (const StepLog& s : r.state.history) {
    CHECK(s.loss == r.state.history.front().loss);
  }
}

TEST_CASE("train_scales: a NaN frame causes exactly one skipped step", "[distill]") {
  FrontendModel base = build_toy_patchifier(5, ModelWidth::Small);
  QuantConfig cfg;
  std::vector<Tensor> frames = noise_frames(5, 6);
  frames[3].data[100] = std::numeric_limits<float>::quiet_NaN();
  FrontendModel student = inject_qat_default(base, cfg, frames[0]);
  FrontendModel teacher = strip_qat(student);

  DistillConfig dc;
  dc.steps = 6;
  dc.chunk_len = 1;
  TrainResult r = train_scales(student, teacher, frames, dc);
  CHECK(r.state.skipped_steps == 1);
  CHECK(r.state.history.size() == 5);  // log has steps - skipped rows
  CHECK(r.state.step == 6);            // training continued to the end
}

TEST_CASE("train_scales rejects an empty stream and foreign weights", "[distill]") {
  FrontendModel base = build_toy_patchifier(5, ModelWidth::Small);
  QuantConfig cfg;
  std::vector<Tensor> frames = noise_frames(5, 2);
  FrontendModel student = inject_qat_default(base, cfg, frames[0]);
  FrontendModel teacher = strip_qat(student);
  DistillConfig dc;
  REQUIRE_THROWS_AS(train_scales(student, teacher, {}, dc), ValueError);

  FrontendModel other = strip_qat(build_toy_patchifier(6, ModelWidth::Small));
  REQUIRE_THROWS_AS(train_scales(student, other, frames, dc), ValueError);
}

TEST_CASE("scales checkpoint: save -> load -> save is byte identical", "[distill]") {
  FrontendModel base = build_toy_patchifier(9, ModelWidth::Small);
  QuantConfig cfg;
  Tensor calib = noise_frames(9, 1)[0];
  ScaleSet set = calibrate_scales(base, cfg, calib);

  const std::string b1 = serialize_scales(set);
  ScaleSet loaded = parse_scales(b1);
  const std::string b2 = serialize_scales(loaded);
  REQUIRE(b1 == b2);

  // loading into a mismatched roster raises at injection
  ScaleSet short_set = loaded;
  short_set.by_layer.erase("fnet_out");
  REQUIRE_THROWS_AS(inject_qat(base, cfg, short_set), ValueError);

  std::string bad = b1;
  bad[2] = 'X';
  REQUIRE_THROWS_AS(parse_scales(bad), IoError);
}

TEST_CASE("training log CSV matches the step history", "[distill]") {
  TrainState st;
  st.history.push_back(StepLog{1, 0.5, 0.2, 0.1, 0.99, 0.98, 0});
  st.history.push_back(StepLog{3, 0.25, 0.1, 0.05, 0.995, 0.99, 1});
  const std::string csv = train_log_csv(st);
  CHECK(csv.rfind("step,loss,mse_f,mse_i,cos_f,cos_i,skipped\n", 0) == 0);
  CHECK(csv.find("1,0.5,0.2,0.1,0.99,0.98,0\n") != std::string::npos);
  CHECK(csv.find("3,0.25,0.1,0.05,0.995,0.99,1\n") != std::string::npos);
}

TEST_CASE("half-forward training keeps the full-precision scale contract", "[distill]") {
  FrontendModel base = build_toy_patchifier(4, ModelWidth::Small);
  QuantConfig cfg;
  std::vector<Tensor> frames = noise_frames(4, 4);
  FrontendModel student = inject_qat_default(base, cfg, frames[0]);
  FrontendModel teacher = strip_qat(student);
  DistillConfig dc;
  dc.steps = 3;
  dc.chunk_len = 1;
  dc.half_forward = true;
  TrainResult r = train_scales(student, teacher, frames, dc);
  CHECK(r.state.skipped_steps == 0);
  for (const StepLog& s : r.state.history) CHECK(std::isfinite(s.loss));
}
