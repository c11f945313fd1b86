#pragma once

#include <hicts/geometry.hpp>
#include <hicts/io_util.hpp>
#include <hicts/scan.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hicts {

struct SceneBox {
  Vec3 center{Vec3::Zero()};
  Vec3 size{Vec3::Ones()};  // full extents
};

struct ScenePlane {
  Vec3 normal{Vec3::UnitZ()};  // normal . x = offset
  double offset{0.0};
};

/// Axis-aligned boxes and infinite planes; plane hits beyond bounds are
/// discarded so rooms built from planes stay finite.
struct SceneModel {
  std::vector<SceneBox> boxes;
  std::vector<ScenePlane> planes;
  Vec3 bounds{500.0, 500.0, 500.0};  // half-extent around the origin

  bool empty() const { return boxes.empty() && planes.empty(); }
};

struct TimedPose {
  Timestamp stamp{0.0};
  Pose pose;
};

struct SimConfig {
  int rings{16};
  double vertical_fov_deg{30.0};
  double max_range{100.0};
  int lines_per_scan{24};
  double line_period{1.33e-3};
  double rotation_rate_rpm{60.0 / (24 * 1.33e-3)};  // one turn per scan
  double noise_sigma{0.0};
  std::vector<TimedPose> trajectory;
  std::uint64_t seed{0};
};

struct SimulatedScan {
  ScanFrame frame;               // points in per-line sensor frames
  std::vector<Pose> line_poses;  // ground truth, one per line
  Pose scan_pose;                // ground truth at the scan stamp (last line)
};

namespace detail {

inline std::optional<double> ray_box_hit(const Vec3& origin, const Vec3& dir,
                                         const SceneBox& box) {
  double t_enter = -std::numeric_limits<double>::infinity();
  double t_exit = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double lo = box.center[a] - 0.5 * box.size[a];
    const double hi = box.center[a] + 0.5 * box.size[a];
    if (std::abs(dir[a]) < 1e-15) {
      if (origin[a] < lo || origin[a] > hi) return std::nullopt;
      continue;
    }
    double t0 = (lo - origin[a]) / dir[a];
    double t1 = (hi - origin[a]) / dir[a];
    if (t0 > t1) std::swap(t0, t1);
    t_enter = std::max(t_enter, t0);
    t_exit = std::min(t_exit, t1);
  }
  if (t_exit < t_enter) return std::nullopt;
  if (t_enter > 1e-9) return t_enter;
  if (t_exit > 1e-9) return t_exit;  // origin inside: hit the far face
  return std::nullopt;
}

inline std::optional<double> ray_plane_hit(const Vec3& origin, const Vec3& dir,
                                           const ScenePlane& plane, const Vec3& bounds) {
  const double denom = plane.normal.dot(dir);
  if (std::abs(denom) < 1e-12) return std::nullopt;
  const double t = (plane.offset - plane.normal.dot(origin)) / denom;
  if (t <= 1e-9) return std::nullopt;
  const Vec3 p = origin + t * dir;
  if (std::abs(p.x()) > bounds.x() || std::abs(p.y()) > bounds.y() ||
      std::abs(p.z()) > bounds.z()) {
    return std::nullopt;
  }
  return t;
}

inline std::optional<double> cast_ray(const SceneModel& scene, const Vec3& origin,
                                      const Vec3& dir, double max_range) {
  std::optional<double> best;
  for (const auto& box : scene.boxes) {
    const auto t = ray_box_hit(origin, dir, box);
    if (t && *t <= max_range && (!best || *t < *best)) best = t;
  }
  for (const auto& plane : scene.planes) {
    const auto t = ray_plane_hit(origin, dir, plane, scene.bounds);
    if (t && *t <= max_range && (!best || *t < *best)) best = t;
  }
  return best;
}

inline std::uint64_t scan_seed(std::uint64_t base, int scan_index) {
  // splitmix-style spread so consecutive scans decorrelate.
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(scan_index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Ground truth between trajectory samples: constant twist per segment.
inline Pose interpolate_ground_truth(const std::vector<TimedPose>& trajectory, Timestamp t) {
  if (trajectory.empty()) {
    throw std::invalid_argument("interpolate_ground_truth: empty trajectory");
  }
  if (t <= trajectory.front().stamp) return trajectory.front().pose;
  if (t >= trajectory.back().stamp) return trajectory.back().pose;
  std::size_t hi = 1;
  while (trajectory[hi].stamp < t) ++hi;
  const TimedPose& a = trajectory[hi - 1];
  const TimedPose& b = trajectory[hi];
  const double alpha = (t - a.stamp) / (b.stamp - a.stamp);
  const Twist segment = log_map(a.pose.inverse() * b.pose);
  return a.pose * exp_map(Twist(segment.rot * alpha, segment.trans * alpha));
}

inline void validate_sim_config(const SimConfig& config) {
  if (config.rings < 1 || config.lines_per_scan < 1) {
    throw std::invalid_argument("simulate: rings and lines per scan must be positive");
  }
  if (config.vertical_fov_deg <= 0.0 || config.max_range <= 0.0 ||
      config.line_period <= 0.0 || config.rotation_rate_rpm <= 0.0) {
    throw std::invalid_argument("simulate: config values must be positive");
  }
  if (config.trajectory.size() < 2) {
    throw std::invalid_argument("simulate: trajectory needs at least two samples");
  }
  for (std::size_t i = 0; i + 1 < config.trajectory.size(); ++i) {
    if (config.trajectory[i + 1].stamp <= config.trajectory[i].stamp) {
      throw std::invalid_argument("simulate: trajectory stamps not increasing");
    }
  }
}

/// Spinning-scanner synthesis: each line fires `rings` beams from the
/// ground-truth pose at its stamp; ranges get Gaussian noise. Deterministic
/// under the seed, scan by scan.
inline std::vector<SimulatedScan> simulate(const SceneModel& scene, const SimConfig& config) {
  validate_sim_config(config);
  if (scene.empty()) throw std::invalid_argument("simulate: empty scene");
  for (const auto& box : scene.boxes) {
    for (int a = 0; a < 3; ++a) {
      if (std::abs(box.center[a]) + 0.5 * box.size[a] > scene.bounds[a]) {
        throw std::invalid_argument("simulate: box outside scene bounds");
      }
    }
  }
  const double start = config.trajectory.front().stamp;
  const double span = config.trajectory.back().stamp - start;
  const double scan_duration = config.lines_per_scan * config.line_period;
  const int scan_count = static_cast<int>(std::floor(span / scan_duration + 1e-9));
  if (scan_count < 1) {
    throw std::invalid_argument("simulate: trajectory shorter than one scan span");
  }

  const double spin_rate = config.rotation_rate_rpm / 60.0 * 2.0 * M_PI;  // rad/s
  std::vector<SimulatedScan> out(scan_count);
  for (int k = 0; k < scan_count; ++k) {
    std::mt19937_64 rng(detail::scan_seed(config.seed, k));
    std::normal_distribution<double> noise(0.0, config.noise_sigma);
    SimulatedScan& scan = out[k];
    std::vector<ScanLine> lines(config.lines_per_scan);
    scan.line_poses.resize(config.lines_per_scan);
    for (int l = 0; l < config.lines_per_scan; ++l) {
      const double stamp = start + (static_cast<double>(k) * config.lines_per_scan + l) *
                                       config.line_period;
      const Pose pose = interpolate_ground_truth(config.trajectory, stamp);
      scan.line_poses[l] = pose;
      ScanLine& line = lines[l];
      line.stamp = stamp;
      // Azimuth advances by the line index so identical sweeps reproduce
      // bit-identical directions; each scan starts a fresh revolution.
      const double azimuth = spin_rate * config.line_period * l;
      for (int r = 0; r < config.rings; ++r) {
        const double elevation =
            config.rings == 1
                ? 0.0
                : (-0.5 + static_cast<double>(r) / (config.rings - 1)) *
                      config.vertical_fov_deg * M_PI / 180.0;
        const Vec3 dir_sensor(std::cos(elevation) * std::cos(azimuth),
                              std::cos(elevation) * std::sin(azimuth), std::sin(elevation));
        const Vec3 origin = pose.translation;
        const Vec3 dir_world = pose.rotation * dir_sensor;
        const auto range = detail::cast_ray(scene, origin, dir_world, config.max_range);
        if (!range) continue;
        const double measured = *range + (config.noise_sigma > 0.0 ? noise(rng) : 0.0);
        line.points.push_back(measured * dir_sensor);
      }
    }
    scan.frame = assemble_scan(lines);
    scan.scan_pose = scan.line_poses.back();
  }
  return out;
}

/// Perturbs k distinct poses by up to the given magnitudes; the relative
/// offset magnitudes are exact bounds on pose_delta.
inline std::vector<Pose> perturb_alignment(const std::vector<Pose>& poses, int k,
                                           double max_translation, double max_rotation_deg,
                                           std::uint64_t seed) {
  if (k < 0 || k > static_cast<int>(poses.size())) {
    throw std::invalid_argument("perturb_alignment: k out of range");
  }
  std::vector<Pose> out = poses;
  std::mt19937_64 rng(seed);
  std::vector<int> order(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int pick = 0; pick < k; ++pick) {
    Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
    while (axis.norm() < 1e-12) axis = Vec3(gauss(rng), gauss(rng), gauss(rng));
    axis.normalize();
    Vec3 dir(gauss(rng), gauss(rng), gauss(rng));
    while (dir.norm() < 1e-12) dir = Vec3(gauss(rng), gauss(rng), gauss(rng));
    dir.normalize();
    const double angle = max_rotation_deg * M_PI / 180.0 * u01(rng);
    const double dist = max_translation * u01(rng);
    if (angle == 0.0 && dist == 0.0) continue;  // keep untouched poses bitwise equal
    const Pose offset(Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis)), dir * dist);
    Pose& target = out[order[pick]];
    target = target * offset;
  }
  return out;
}

struct AteResult {
  double translation_rmse{0.0};
  double rotation_rmse_deg{0.0};
  int matched{0};
};

/// Absolute trajectory error against ground truth. The first matched pair is
/// aligned by translation only, so global rotations remain visible in both
/// error channels.
inline AteResult ate(const std::vector<TimedPose>& estimated,
                     const std::vector<TimedPose>& truth,
                     double stamp_tolerance = 0.5 * 1.33e-3) {
  AteResult result;
  double sum_t2 = 0.0;
  double sum_r2 = 0.0;
  bool aligned = false;
  Vec3 shift = Vec3::Zero();
  for (const auto& est : estimated) {
    const TimedPose* best = nullptr;
    double best_dt = stamp_tolerance;
    for (const auto& ref : truth) {
      const double dt = std::abs(ref.stamp - est.stamp);
      if (dt <= best_dt) {
        best_dt = dt;
        best = &ref;
      }
    }
    if (!best) continue;
    if (!aligned) {
      shift = best->pose.translation - est.pose.translation;
      aligned = true;
    }
    const Vec3 err = est.pose.translation + shift - best->pose.translation;
    sum_t2 += err.squaredNorm();
    const Pose rel(best->pose.rotation.inverse() * est.pose.rotation, Vec3::Zero());
    const double rot = rel.rotation_angle();
    sum_r2 += rot * rot;
    result.matched += 1;
  }
  if (result.matched == 0) {
    throw std::runtime_error("ate: no matching stamps between trajectories");
  }
  result.translation_rmse = std::sqrt(sum_t2 / result.matched);
  result.rotation_rmse_deg =
      std::sqrt(sum_r2 / result.matched) * 180.0 / M_PI;
  return result;
}

inline std::string scene_to_string(const SceneModel& scene) {
  if (scene.empty()) throw std::invalid_argument("scene_to_string: empty scene");
  std::string out;
  for (const auto& box : scene.boxes) {
    out += "BOX " + format_double(box.center.x()) + " " + format_double(box.center.y()) +
           " " + format_double(box.center.z()) + " " + format_double(box.size.x()) + " " +
           format_double(box.size.y()) + " " + format_double(box.size.z()) + "\n";
  }
  for (const auto& plane : scene.planes) {
    out += "PLANE " + format_double(plane.normal.x()) + " " +
           format_double(plane.normal.y()) + " " + format_double(plane.normal.z()) + " " +
           format_double(plane.offset) + "\n";
  }
  return out;
}

inline SceneModel scene_from_string(const std::string& text) {
  SceneModel scene;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "BOX") {
      SceneBox box;
      if (!(ls >> box.center.x() >> box.center.y() >> box.center.z() >> box.size.x() >>
            box.size.y() >> box.size.z())) {
        throw std::runtime_error("scene_from_string: bad BOX line " + std::to_string(line_no));
      }
      scene.boxes.push_back(box);
    } else if (kind == "PLANE") {
      ScenePlane plane;
      if (!(ls >> plane.normal.x() >> plane.normal.y() >> plane.normal.z() >> plane.offset)) {
        throw std::runtime_error("scene_from_string: bad PLANE line " +
                                 std::to_string(line_no));
      }
      scene.planes.push_back(plane);
    } else {
      throw std::runtime_error("scene_from_string: unknown primitive '" + kind + "' line " +
                               std::to_string(line_no));
    }
  }
  if (scene.empty()) throw std::runtime_error("scene_from_string: no primitives");
  return scene;
}

inline void write_scene_file(const std::string& path, const SceneModel& scene) {
  write_text_atomic(path, scene_to_string(scene));
}

inline SceneModel read_scene_file(const std::string& path) {
  return scene_from_string(read_text_file(path));
}

/// Line-granularity ground truth rows, `stamp,x,y,z,qx,qy,qz,qw`.
inline std::string groundtruth_csv(const std::vector<SimulatedScan>& scans) {
  std::string out = "stamp,x,y,z,qx,qy,qz,qw\n";
  for (const auto& scan : scans) {
    for (std::size_t l = 0; l < scan.frame.lines.size(); ++l) {
      const Pose& pose = scan.line_poses[l];
      const Eigen::Quaterniond& q = pose.rotation;
      out += format_double(scan.frame.lines[l].stamp) + "," +
             format_double(pose.translation.x()) + "," + format_double(pose.translation.y()) +
             "," + format_double(pose.translation.z()) + "," + format_double(q.x()) + "," +
             format_double(q.y()) + "," + format_double(q.z()) + "," + format_double(q.w()) +
             "\n";
    }
  }
  return out;
}

}  // namespace hicts
