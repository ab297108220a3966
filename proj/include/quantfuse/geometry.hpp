// geometry.hpp - full-precision synthetic geometric back-end.
//
// A desk-scale stand-in for a VO back-end: deterministic scenes of
// Gaussian-splat landmarks, cosine nearest-neighbor descriptor matching,
// Gauss-Newton pose refinement with Levenberg damping on reprojection
// residuals, and Umeyama-aligned ATE. Everything here runs in 64-bit;
// entry points reject EmulatedHalf tensors.

#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "quantfuse/errors.hpp"
#include "quantfuse/rng.hpp"
#include "quantfuse/tensor.hpp"

namespace qf {

struct Camera {
  double fx = 64.0, fy = 64.0, cx = 32.0, cy = 32.0;
  int width = 64, height = 64;
};

// Camera-to-world rigid transform (the TUM convention).
struct Pose {
  Eigen::Quaterniond q = Eigen::Quaterniond::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  static Pose identity() { return Pose{}; }

  Eigen::Vector3d transform(const Eigen::Vector3d& p) const { return q * p + t; }

  Pose inverse() const {
    Pose out;
    out.q = q.conjugate();
    out.t = -(out.q * t);
    return out;
  }

  // this ∘ other: apply `other` first, then this.
  Pose compose(const Pose& other) const {
    Pose out;
    out.q = q * other.q;
    out.t = q * other.t + t;
    out.normalize();
    return out;
  }

  void normalize() { q.normalize(); }
};

struct Trajectory {
  std::vector<double> timestamps;
  std::vector<Pose> poses;

  size_t size() const { return poses.size(); }

  void push(double ts, const Pose& p) {
    if (!timestamps.empty() && ts <= timestamps.back()) {
      throw ValueError("Trajectory: timestamps must be strictly increasing");
    }
    timestamps.push_back(ts);
    poses.push_back(p);
  }

  // 3xN translation matrix (ATE input).
  Eigen::Matrix3Xd translations() const {
    Eigen::Matrix3Xd m(3, static_cast<Eigen::Index>(poses.size()));
    for (size_t i = 0; i < poses.size(); ++i) {
      m.col(static_cast<Eigen::Index>(i)) = poses[i].t;
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// TUM trajectory files: "timestamp tx ty tz qx qy qz qw", one pose/line.
// ---------------------------------------------------------------------------

inline std::string format_tum(const Trajectory& traj) {
  std::string out;
  char buf[320];
  for (size_t i = 0; i < traj.size(); ++i) {
    const Pose& p = traj.poses[i];
    std::snprintf(buf, sizeof(buf),
                  "%.6f %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  traj.timestamps[i], p.t.x(), p.t.y(), p.t.z(), p.q.x(),
                  p.q.y(), p.q.z(), p.q.w());
    out += buf;
  }
  return out;
}

inline void save_tum(const std::string& path, const Trajectory& traj) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << format_tum(traj);
}

inline Trajectory parse_tum(const std::string& text) {
  Trajectory traj;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    const std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty() || line[0] == '#') continue;
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (std::sscanf(line.c_str(), "%lf %lf %lf %lf %lf %lf %lf %lf", &ts, &tx,
                    &ty, &tz, &qx, &qy, &qz, &qw) != 8) {
      throw IoError("bad TUM line: " + line);
    }
    Pose p;
    p.t = {tx, ty, tz};
    p.q = Eigen::Quaterniond(qw, qx, qy, qz);
    p.normalize();
    traj.push(ts, p);
  }
  return traj;
}

inline Trajectory load_tum(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_tum(s);
}

// ---------------------------------------------------------------------------
// Synthetic scenes.
// ---------------------------------------------------------------------------

enum class Motion { Orbit, Line, RandomWalk };

inline Motion parse_motion(const std::string& s) {
  if (s == "orbit") return Motion::Orbit;
  if (s == "line") return Motion::Line;
  if (s == "random-walk" || s == "random_walk") return Motion::RandomWalk;
  throw ValueError("unknown motion '" + s + "' (orbit|line|random-walk)");
}

inline std::string motion_name(Motion m) {
  switch (m) {
    case Motion::Orbit: return "orbit";
    case Motion::Line: return "line";
    default: return "random-walk";
  }
}

struct SyntheticScene {
  uint64_t seed = 0;
  Motion motion = Motion::Orbit;
  Camera cam;
  int image_size = 64;
  double splat_sigma = 1.2;
  std::vector<Eigen::Vector3d> landmarks;
  std::vector<Eigen::Vector3d> colors;
  Trajectory gt;

  int frames() const { return static_cast<int>(gt.size()); }
};

namespace detail {

constexpr double kMinVisibleLandmarks = 12;
constexpr double kDeg = M_PI / 180.0;

inline bool project(const Camera& cam, const Eigen::Vector3d& x_cam, double margin,
                    Eigen::Vector2d* uv) {
  if (x_cam.z() < 0.5) return false;
  const double u = cam.fx * x_cam.x() / x_cam.z() + cam.cx;
  const double v = cam.fy * x_cam.y() / x_cam.z() + cam.cy;
  if (u < margin || u > cam.width - margin || v < margin || v > cam.height - margin) {
    return false;
  }
  *uv = {u, v};
  return true;
}

}  // namespace detail

// Deterministic scene. Ground-truth motion is smooth: per-frame rotation
// <= 5 degrees, translation <= 0.1 m. Cameras keep a fixed attitude
// (orbit = translation on a circle), landmarks sit on a jittered lateral
// grid deep enough that every frame sees at least 12 of them.
inline SyntheticScene generate_scene(uint64_t seed, int n_frames, Motion motion) {
  if (n_frames < 2) throw ValueError("generate_scene: n_frames must be >= 2");

  SyntheticScene sc;
  sc.seed = seed;
  sc.motion = motion;
  const CounterRng rng{seed, 1};

  // trajectory
  double span_x = 0.0, span_y = 0.0;
  switch (motion) {
    case Motion::Orbit: {
      // full circle that closes on itself; radius capped so the per-frame
      // step stays under 0.1 m
      const double r =
          std::min(0.9, 0.095 * static_cast<double>(n_frames) / (2.0 * M_PI));
      for (int k = 0; k < n_frames; ++k) {
        const double th = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n_frames);
        Pose p;
        p.t = {r * std::cos(th) - r, r * std::sin(th), 0.0};
        sc.gt.push(0.1 * k, p);
      }
      span_x = 2.0 * r;
      span_y = r;
      break;
    }
    case Motion::Line: {
      const double step = std::min(0.1, 1.2 / static_cast<double>(n_frames));
      const Eigen::Vector3d dir = Eigen::Vector3d(1.0, 0.35, 0.15).normalized();
      for (int k = 0; k < n_frames; ++k) {
        const double s = (static_cast<double>(k) - 0.5 * (n_frames - 1)) * step;
        Pose p;
        p.t = s * dir;
        sc.gt.push(0.1 * k, p);
      }
      span_x = 0.65 * n_frames * step;
      span_y = 0.3 * n_frames * step;
      break;
    }
    case Motion::RandomWalk: {
      Pose p;
      for (int k = 0; k < n_frames; ++k) {
        sc.gt.push(0.1 * k, p);
        // bounded step, reflected at a +-0.5 m box
        Eigen::Vector3d d(rng.uniform(3 * static_cast<uint64_t>(k), -1.0, 1.0),
                          rng.uniform(3 * static_cast<uint64_t>(k) + 1, -1.0, 1.0),
                          rng.uniform(3 * static_cast<uint64_t>(k) + 2, -0.4, 0.4));
        if (d.norm() > 0) d = 0.06 * d.normalized();
        Eigen::Vector3d nt = p.t + d;
        for (int a = 0; a < 3; ++a) {
          if (std::abs(nt[a]) > 0.5) nt[a] = p.t[a] - d[a];
        }
        // small attitude wobble, well under the 5-degree bound
        const Eigen::Vector3d ax(rng.uniform(7000 + 3 * static_cast<uint64_t>(k), -1.0, 1.0),
                                 rng.uniform(7000 + 3 * static_cast<uint64_t>(k) + 1, -1.0, 1.0),
                                 rng.uniform(7000 + 3 * static_cast<uint64_t>(k) + 2, -1.0, 1.0));
        const double ang = 1.5 * detail::kDeg;
        if (ax.norm() > 0) {
          p.q = Eigen::Quaterniond(Eigen::AngleAxisd(ang, ax.normalized())) * p.q;
          p.q.normalize();
        }
        p.t = nt;
      }
      span_x = 1.0;
      span_y = 1.0;
      break;
    }
  }

  // landmarks: lateral grid, jittered, at depths 3.5..5.5; pitch keeps
  // projections at least a couple of feature cells apart
  const double half_x = span_x / 2.0 + 1.5;
  const double half_y = span_y / 2.0 + 1.5;
  const double cx0 = -span_x / 2.0;  // orbit center offset
  const int nx = std::max(4, static_cast<int>(std::ceil(2.0 * half_x / 0.8)) + 1);
  const int ny = std::max(4, static_cast<int>(std::ceil(2.0 * half_y / 0.8)) + 1);
  int idx = 0;
  for (int gy = 0; gy < ny; ++gy) {
    for (int gx = 0; gx < nx; ++gx, ++idx) {
      const double jx = rng.uniform(100000 + 4 * static_cast<uint64_t>(idx), -0.18, 0.18);
      const double jy = rng.uniform(100000 + 4 * static_cast<uint64_t>(idx) + 1, -0.18, 0.18);
      const double z = rng.uniform(100000 + 4 * static_cast<uint64_t>(idx) + 2, 3.5, 5.5);
      const double x = cx0 - half_x + 2.0 * half_x * gx / (nx - 1) + jx;
      const double y = -half_y + 2.0 * half_y * gy / (ny - 1) + jy;
      sc.landmarks.push_back({x, y, z});
      sc.colors.push_back(
          {rng.uniform(500000 + 3 * static_cast<uint64_t>(idx), 0.25, 1.0),
           rng.uniform(500000 + 3 * static_cast<uint64_t>(idx) + 1, 0.25, 1.0),
           rng.uniform(500000 + 3 * static_cast<uint64_t>(idx) + 2, 0.25, 1.0)});
    }
  }

  // every frame must observe enough landmarks
  for (int k = 0; k < n_frames; ++k) {
    const Pose cw = sc.gt.poses[static_cast<size_t>(k)].inverse();
    int visible = 0;
    for (const auto& lm : sc.landmarks) {
      Eigen::Vector2d uv;
      if (detail::project(sc.cam, cw.transform(lm), 3.0, &uv)) ++visible;
    }
    if (visible < detail::kMinVisibleLandmarks) {
      throw ValueError("generate_scene: frame " + std::to_string(k) +
                       " observes only " + std::to_string(visible) + " landmarks");
    }
  }
  return sc;
}

// ---------------------------------------------------------------------------
// Renderer: Gaussian splats with per-landmark color, plus the aux maps
// the geometric back-end consumes (per-landmark projection/depth and the
// dominant landmark per feature cell).
// ---------------------------------------------------------------------------

struct LandmarkObs {
  Eigen::Vector2d uv{0, 0};
  double depth = 0.0;
  bool visible = false;
};

struct FrameAux {
  std::vector<LandmarkObs> obs;    // indexed by landmark id
  std::vector<int32_t> cell_lid;   // feature-grid cells, -1 = empty
  int grid = 0;                    // cells per side (image_size / 4)
};

struct RenderedFrame {
  Tensor image;  // [3, S, S]
  FrameAux aux;
};

inline RenderedFrame render_frame(const SyntheticScene& sc, int frame_idx) {
  const int S = sc.image_size;
  const int grid = S / 4;
  RenderedFrame out;
  out.image = Tensor::zeros({3, S, S});
  out.aux.obs.resize(sc.landmarks.size());
  out.aux.grid = grid;
  out.aux.cell_lid.assign(static_cast<size_t>(grid * grid), -1);

  const Pose cw = sc.gt.poses[static_cast<size_t>(frame_idx)].inverse();
  const double sigma = sc.splat_sigma;
  const int win = static_cast<int>(std::ceil(3.0 * sigma));

  for (size_t lid = 0; lid < sc.landmarks.size(); ++lid) {
    const Eigen::Vector3d x_cam = cw.transform(sc.landmarks[lid]);
    Eigen::Vector2d uv;
    if (!detail::project(sc.cam, x_cam, 3.0, &uv)) continue;
    LandmarkObs& ob = out.aux.obs[lid];
    ob.uv = uv;
    ob.depth = x_cam.z();
    ob.visible = true;

    // splat
    const int px0 = std::max(0, static_cast<int>(std::floor(uv.x())) - win);
    const int px1 = std::min(S - 1, static_cast<int>(std::floor(uv.x())) + win);
    const int py0 = std::max(0, static_cast<int>(std::floor(uv.y())) - win);
    const int py1 = std::min(S - 1, static_cast<int>(std::floor(uv.y())) + win);
    for (int py = py0; py <= py1; ++py) {
      for (int px = px0; px <= px1; ++px) {
        const double dx = px + 0.5 - uv.x();
        const double dy = py + 0.5 - uv.y();
        const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        for (int c = 0; c < 3; ++c) {
          out.image.at3(c, py, px) += static_cast<float>(sc.colors[lid][static_cast<size_t>(c)] * w);
        }
      }
    }

    // dominant landmark per feature cell (front-most wins)
    const int cxg = static_cast<int>(uv.x()) / 4;
    const int cyg = static_cast<int>(uv.y()) / 4;
    if (cxg >= 0 && cxg < grid && cyg >= 0 && cyg < grid) {
      int32_t& slot = out.aux.cell_lid[static_cast<size_t>(cyg * grid + cxg)];
      if (slot < 0 || x_cam.z() < out.aux.obs[static_cast<size_t>(slot)].depth) {
        slot = static_cast<int32_t>(lid);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Descriptor matching: cosine nearest neighbor on feature-grid cells
// within a search radius, with a ratio test on cosine distance.
// ---------------------------------------------------------------------------

struct CellMatch {
  int prev_cell = -1;
  int cur_cell = -1;
  double cos_sim = 0.0;
};

namespace detail {

inline void assert_backend_full(const Tensor& t, const char* what) {
  if (t.precision != Precision::Full) {
    throw ValueError(std::string("backend requires Full-precision tensors: ") + what);
  }
}

inline double cell_cosine(const Tensor& a, int pa, const Tensor& b, int pb) {
  const int64_t c = a.shape[0];
  const int64_t hw = a.shape[1] * a.shape[2];
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (int64_t ch = 0; ch < c; ++ch) {
    const double va = a.data[static_cast<size_t>(ch * hw + pa)];
    const double vb = b.data[static_cast<size_t>(ch * hw + pb)];
    dot += va * vb;
    na2 += va * va;
    nb2 += vb * vb;
  }
  if (na2 == 0.0 || nb2 == 0.0) return 0.0;
  return dot / std::sqrt(na2 * nb2);
}

}  // namespace detail

// `valid_prev` restricts the query set (the pipeline passes cells that
// carry a depth prior); empty = all cells. Throws when fewer than 6
// matches survive.
inline std::vector<CellMatch> match_descriptors(const Tensor& desc_prev,
                                                const Tensor& desc_cur,
                                                int grid_stride = 1,
                                                int search_radius = 3,
                                                double ratio = 0.9,
                                                const std::vector<int>& valid_prev = {}) {
  detail::assert_backend_full(desc_prev, "descriptors (prev)");
  detail::assert_backend_full(desc_cur, "descriptors (cur)");
  if (!same_shape(desc_prev, desc_cur)) {
    throw ShapeError("match_descriptors: descriptor maps differ in shape");
  }
  const int gh = static_cast<int>(desc_prev.shape[1]);
  const int gw = static_cast<int>(desc_prev.shape[2]);

  std::vector<int> queries;
  if (valid_prev.empty()) {
    for (int y = 0; y < gh; y += grid_stride) {
      for (int x = 0; x < gw; x += grid_stride) queries.push_back(y * gw + x);
    }
  } else {
    queries = valid_prev;
  }

  std::vector<CellMatch> out;
  for (int pc : queries) {
    const int py = pc / gw, px = pc % gw;
    double best = -2.0, second = -2.0;
    int best_cell = -1;
    for (int dy = -search_radius; dy <= search_radius; ++dy) {
      for (int dx = -search_radius; dx <= search_radius; ++dx) {
        const int y = py + dy, x = px + dx;
        if (y < 0 || y >= gh || x < 0 || x >= gw) continue;
        const double cs = detail::cell_cosine(desc_prev, pc, desc_cur, y * gw + x);
        if (cs > best) {
          second = best;
          best = cs;
          best_cell = y * gw + x;
        } else if (cs > second) {
          second = cs;
        }
      }
    }
    if (best_cell < 0) continue;
    // ratio test on cosine distance
    const double d1 = 1.0 - best;
    const double d2 = 1.0 - second;
    if (second > -2.0 && !(d1 < ratio * d2)) continue;
    out.push_back(CellMatch{pc, best_cell, best});
  }
  if (out.size() < 6) {
    throw InsufficientMatchesError("insufficient correspondences: " +
                                   std::to_string(out.size()) + " < 6");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gauss-Newton pose refinement with Levenberg damping.
// ---------------------------------------------------------------------------

struct Correspondence {
  Eigen::Vector3d point_world;
  Eigen::Vector2d obs_px;
};

struct GnOptions {
  int max_iters = 20;
  double lambda0 = 1e-4;
  double step_tol = 1e-10;
  double cost_tol = 1e-12;
  bool planar = false;  // SE(2) mode: x, y, yaw only
};

struct GnResult {
  Pose pose_cw;  // world-to-camera
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  bool converged = false;
  bool flagged = false;  // kept but unconverged
  std::vector<double> cost_history;
};

namespace detail {

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// SE(3) exponential; delta = [rho(3), omega(3)].
inline Pose se3_exp(const Eigen::Matrix<double, 6, 1>& d) {
  const Eigen::Vector3d rho = d.head<3>();
  const Eigen::Vector3d omega = d.tail<3>();
  const double th = omega.norm();
  Pose out;
  Eigen::Matrix3d v_mat;
  if (th < 1e-10) {
    out.q = Eigen::Quaterniond::Identity();
    v_mat = Eigen::Matrix3d::Identity() + 0.5 * skew(omega);
  } else {
    out.q = Eigen::Quaterniond(Eigen::AngleAxisd(th, omega / th));
    const Eigen::Matrix3d w = skew(omega);
    v_mat = Eigen::Matrix3d::Identity() + (1.0 - std::cos(th)) / (th * th) * w +
            (th - std::sin(th)) / (th * th * th) * (w * w);
  }
  out.t = v_mat * rho;
  return out;
}

inline double reprojection_cost(const std::vector<Correspondence>& corrs,
                                const Camera& cam, const Pose& pose_cw) {
  double cost = 0.0;
  for (const auto& c : corrs) {
    const Eigen::Vector3d x = pose_cw.transform(c.point_world);
    if (x.z() < 1e-6) {
      cost += 1e12;  // behind the camera: prohibitive
      continue;
    }
    const double u = cam.fx * x.x() / x.z() + cam.cx;
    const double v = cam.fy * x.y() / x.z() + cam.cy;
    const double du = u - c.obs_px.x();
    const double dv = v - c.obs_px.y();
    cost += du * du + dv * dv;
  }
  return cost;
}

}  // namespace detail

// Analytic 2x6 reprojection Jacobian w.r.t. a left perturbation of the
// world-to-camera pose, columns [translation, rotation].
inline Eigen::Matrix<double, 2, 6> reprojection_jacobian(const Camera& cam,
                                                         const Eigen::Vector3d& x_cam) {
  const double z = x_cam.z();
  const double z2 = z * z;
  Eigen::Matrix<double, 2, 3> dpi;
  dpi << cam.fx / z, 0.0, -cam.fx * x_cam.x() / z2,
         0.0, cam.fy / z, -cam.fy * x_cam.y() / z2;
  Eigen::Matrix<double, 2, 6> j;
  j.block<2, 3>(0, 0) = dpi;
  j.block<2, 3>(0, 3) = -dpi * detail::skew(x_cam);
  return j;
}

inline GnResult solve_pose_gn(const std::vector<Correspondence>& corrs,
                              const Camera& cam, const Pose& init_pose_cw,
                              const GnOptions& opts = {}) {
  if (corrs.size() < 6) {
    throw InsufficientMatchesError("solve_pose_gn: need >= 6 correspondences, got " +
                                   std::to_string(corrs.size()));
  }
  GnResult res;
  res.pose_cw = init_pose_cw;
  res.pose_cw.normalize();
  double cost = detail::reprojection_cost(corrs, cam, res.pose_cw);
  res.initial_cost = cost;
  res.cost_history.push_back(cost);
  if (cost < opts.cost_tol) {
    res.final_cost = cost;
    res.converged = true;
    return res;
  }

  double lambda = opts.lambda0;
  for (int it = 0; it < opts.max_iters; ++it) {
    res.iterations = it + 1;
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& c : corrs) {
      const Eigen::Vector3d x = res.pose_cw.transform(c.point_world);
      if (x.z() < 1e-6) continue;
      const Eigen::Matrix<double, 2, 6> j = reprojection_jacobian(cam, x);
      Eigen::Vector2d r(cam.fx * x.x() / x.z() + cam.cx - c.obs_px.x(),
                        cam.fy * x.y() / x.z() + cam.cy - c.obs_px.y());
      h += j.transpose() * j;
      g += j.transpose() * r;
    }

    Eigen::Matrix<double, 6, 1> delta = Eigen::Matrix<double, 6, 1>::Zero();
    if (opts.planar) {
      // SE(2): translation x,y and yaw (indices 0, 1, 5)
      const int sel[3] = {0, 1, 5};
      Eigen::Matrix3d hs;
      Eigen::Vector3d gs;
      for (int a = 0; a < 3; ++a) {
        gs[a] = g[sel[a]];
        for (int b = 0; b < 3; ++b) hs(a, b) = h(sel[a], sel[b]);
      }
      hs += lambda * Eigen::Matrix3d::Identity();
      const Eigen::Vector3d ds = hs.ldlt().solve(-gs);
      for (int a = 0; a < 3; ++a) delta[sel[a]] = ds[a];
    } else {
      const Eigen::Matrix<double, 6, 6> damped =
          h + lambda * Eigen::Matrix<double, 6, 6>::Identity();
      delta = damped.ldlt().solve(-g);
    }

    const Pose candidate = detail::se3_exp(delta).compose(res.pose_cw);
    const double new_cost = detail::reprojection_cost(corrs, cam, candidate);
    if (new_cost < cost) {
      const double reduction = cost - new_cost;
      res.pose_cw = candidate;
      res.pose_cw.normalize();
      cost = new_cost;
      res.cost_history.push_back(cost);
      lambda /= 10.0;
      if (delta.norm() < opts.step_tol || reduction < opts.cost_tol) {
        res.converged = true;
        break;
      }
    } else {
      lambda *= 10.0;
    }
  }
  res.final_cost = cost;
  if (!res.converged) {
    // accept the best pose found; flag unless it is already essentially exact
    res.converged = cost < opts.cost_tol;
    res.flagged = !res.converged;
  }
  return res;
}

// ---------------------------------------------------------------------------
// ATE: closed-form Umeyama alignment, then RMSE of residual translations.
// ---------------------------------------------------------------------------

inline double ate_rmse(const Trajectory& estimated, const Trajectory& gt,
                       bool with_scale = true) {
  if (estimated.size() != gt.size() || estimated.size() < 2) {
    throw ValueError("ate_rmse: trajectories must have equal length >= 2");
  }
  for (size_t i = 0; i < estimated.size(); ++i) {
    if (std::abs(estimated.timestamps[i] - gt.timestamps[i]) > 1e-9) {
      throw ValueError("ate_rmse: timestamps do not match at index " + std::to_string(i));
    }
  }
  const Eigen::Matrix3Xd src = estimated.translations();
  const Eigen::Matrix3Xd dst = gt.translations();
  const Eigen::Vector3d mean_src = src.rowwise().mean();
  double var = 0.0;
  for (Eigen::Index i = 0; i < src.cols(); ++i) {
    var += (src.col(i) - mean_src).squaredNorm();
  }
  if (var == 0.0) throw ValueError("ate_rmse: degenerate estimate (all points coincide)");

  const Eigen::Matrix4d t = Eigen::umeyama(src, dst, with_scale);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < src.cols(); ++i) {
    const Eigen::Vector3d aligned =
        t.block<3, 3>(0, 0) * src.col(i) + t.block<3, 1>(0, 3);
    acc += (dst.col(i) - aligned).squaredNorm();
  }
  return std::sqrt(acc / static_cast<double>(src.cols()));
}

}  // namespace qf
