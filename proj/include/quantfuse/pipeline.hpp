// pipeline.hpp - frame loop: render -> (fake-quantized) front-end ->
// descriptor matching -> Gauss-Newton pose -> trajectory + ATE.
//
// The depth prior comes from scene ground truth, so matching stays the
// quantization-sensitive element: a wrong cell pairs a landmark with a
// different landmark's observation, and the solver feels it.

#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "quantfuse/exec.hpp"
#include "quantfuse/frontend.hpp"
#include "quantfuse/geometry.hpp"

namespace qf {

struct PipelineOptions {
  int grid_stride = 1;
  int search_radius = 3;
  double ratio = 0.9;
  GnOptions gn;
  bool ate_with_scale = true;
  int64_t arena_block = 1 << 20;
};

struct PipelineResult {
  Trajectory trajectory;
  ExecutionTrace trace;
  double ate = 0.0;
  int frames = 0;
  int flagged_frames = 0;    // pose kept but solver unconverged
  int match_failures = 0;    // frames that reused the previous relative pose
  std::vector<double> frame_ms;
  double ttfp_ms = 0.0;
};

namespace detail {

inline Eigen::Vector3d backproject(const Camera& cam, const Eigen::Vector2d& uv,
                                   double depth) {
  return {(uv.x() - cam.cx) / cam.fx * depth, (uv.y() - cam.cy) / cam.fy * depth,
          depth};
}

// Matched cells -> 3D/2D correspondences. The previous frame's cell gives
// the landmark (exact projection + depth prior), backprojected through
// the previous *estimated* pose; the matched current cell supplies the
// observation.
inline std::vector<Correspondence> build_correspondences(
    const std::vector<CellMatch>& matches, const FrameAux& prev_aux,
    const FrameAux& cur_aux, const Camera& cam, const Pose& prev_pose_wc) {
  std::vector<Correspondence> out;
  out.reserve(matches.size());
  for (const CellMatch& m : matches) {
    const int32_t lid = prev_aux.cell_lid[static_cast<size_t>(m.prev_cell)];
    const int32_t cid = cur_aux.cell_lid[static_cast<size_t>(m.cur_cell)];
    if (lid < 0 || cid < 0) continue;
    const LandmarkObs& prev_ob = prev_aux.obs[static_cast<size_t>(lid)];
    const LandmarkObs& cur_ob = cur_aux.obs[static_cast<size_t>(cid)];
    if (!prev_ob.visible || !cur_ob.visible) continue;
    Correspondence c;
    c.point_world = prev_pose_wc.transform(backproject(cam, prev_ob.uv, prev_ob.depth));
    c.obs_px = cur_ob.uv;
    out.push_back(c);
  }
  return out;
}

inline std::vector<int> cells_with_landmarks(const FrameAux& aux) {
  std::vector<int> out;
  for (size_t i = 0; i < aux.cell_lid.size(); ++i) {
    if (aux.cell_lid[i] >= 0) out.push_back(static_cast<int>(i));
  }
  return out;
}

}  // namespace detail

inline PipelineResult run_pipeline(const FrontendModel& model,
                                   const ExecutionPlan& plan,
                                   const SyntheticScene& scene,
                                   const PipelineOptions& opts = {}) {
  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();

  ExecutionContext ctx(plan, opts.arena_block);
  PipelineResult res;
  res.frames = scene.frames();

  Tensor prev_desc;
  FrameAux prev_aux;
  Pose prev_wc;                      // previous estimated camera-to-world
  Pose last_rel = Pose::identity();  // previous relative motion (wc domain)

  for (int k = 0; k < scene.frames(); ++k) {
    const auto t_frame = clock::now();
    RenderedFrame rf = render_frame(scene, k);
    FrontendOutput fo = run_frontend(ctx, model, rf.image);
    // the geometric back-end is full precision only
    const Tensor desc = promote_full(fo.descriptors);
    detail::assert_backend_full(desc, "descriptors");

    Pose cur_wc;
    if (k == 0) {
      cur_wc = scene.gt.poses[0];  // anchor; ATE alignment removes it anyway
      res.ttfp_ms = std::chrono::duration<double, std::milli>(clock::now() - t_start)
                        .count();
    } else {
      bool fallback = false;
      std::vector<Correspondence> corrs;
      try {
        const std::vector<CellMatch> matches = match_descriptors(
            prev_desc, desc, opts.grid_stride, opts.search_radius, opts.ratio,
            detail::cells_with_landmarks(prev_aux));
        corrs = detail::build_correspondences(matches, prev_aux, rf.aux,
                                              scene.cam, prev_wc);
        if (corrs.size() < 6) {
          throw InsufficientMatchesError("insufficient correspondences after "
                                         "depth-prior filtering: " +
                                         std::to_string(corrs.size()) + " < 6");
        }
      } catch (const InsufficientMatchesError&) {
        fallback = true;
      }

      if (fallback) {
        // reuse the previous relative pose and flag the frame
        cur_wc = prev_wc.compose(last_rel);
        ++res.match_failures;
        ++res.flagged_frames;
      } else {
        const Pose pred_wc = prev_wc.compose(last_rel);
        GnResult gn = solve_pose_gn(corrs, scene.cam, pred_wc.inverse(), opts.gn);
        cur_wc = gn.pose_cw.inverse();
        if (gn.flagged) ++res.flagged_frames;
      }
      last_rel = prev_wc.inverse().compose(cur_wc);
    }

    res.trajectory.push(scene.gt.timestamps[static_cast<size_t>(k)], cur_wc);
    prev_wc = cur_wc;
    prev_desc = desc;
    prev_aux = std::move(rf.aux);
    res.frame_ms.push_back(
        std::chrono::duration<double, std::milli>(clock::now() - t_frame).count());
  }

  ctx.sync_peaks();
  res.trace = std::move(ctx.trace);
  res.ate = ate_rmse(res.trajectory, scene.gt, opts.ate_with_scale);
  return res;
}

}  // namespace qf
