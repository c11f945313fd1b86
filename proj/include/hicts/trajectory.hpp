#pragma once

#include <hicts/geometry.hpp>
#include <hicts/io_util.hpp>
#include <hicts/pose_graph.hpp>
#include <hicts/scan.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace hicts {

/// Cumulative cubic B-spline over scan-node poses. Valid between the second
/// and the second-to-last knot, where all four controls of an interval exist.
struct TrajectorySpline {
  std::vector<Pose> control_poses;
  std::vector<Timestamp> knot_times;
  double knot_spacing{0.0};

  Timestamp valid_begin() const { return knot_times[1]; }
  Timestamp valid_end() const { return knot_times[knot_times.size() - 2]; }
  bool covers(Timestamp t) const { return t >= valid_begin() && t < valid_end(); }
};

inline TrajectorySpline build_spline(const std::vector<Pose>& poses,
                                     const std::vector<Timestamp>& stamps) {
  if (poses.size() != stamps.size()) {
    throw std::invalid_argument("build_spline: pose/stamp count mismatch");
  }
  if (poses.size() < 4) {
    throw std::invalid_argument("build_spline: need at least 4 control poses");
  }
  double mean_spacing = 0.0;
  for (std::size_t i = 0; i + 1 < stamps.size(); ++i) {
    const double d = stamps[i + 1] - stamps[i];
    if (d <= 0.0) throw std::invalid_argument("build_spline: stamps not increasing");
    mean_spacing += d;
  }
  mean_spacing /= static_cast<double>(stamps.size() - 1);
  for (std::size_t i = 0; i + 1 < stamps.size(); ++i) {
    if (std::abs(stamps[i + 1] - stamps[i] - mean_spacing) > 0.01 * mean_spacing) {
      throw std::invalid_argument("build_spline: knot times not uniform");
    }
  }
  TrajectorySpline spline;
  spline.control_poses = poses;
  spline.knot_times = stamps;
  spline.knot_spacing = mean_spacing;
  return spline;
}

inline TrajectorySpline build_spline(const std::vector<ScanNode>& nodes) {
  std::vector<Pose> poses;
  std::vector<Timestamp> stamps;
  poses.reserve(nodes.size());
  stamps.reserve(nodes.size());
  for (const auto& node : nodes) {
    poses.push_back(node.pose);
    stamps.push_back(node.stamp);
  }
  return build_spline(poses, stamps);
}

namespace detail {

/// Cumulative uniform cubic basis; partial sums of the standard blend.
inline Vec3 cumulative_cubic_basis(double u) {
  const double u2 = u * u;
  const double u3 = u2 * u;
  return Vec3((u3 - 3.0 * u2 + 3.0 * u + 5.0) / 6.0,
              (-2.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0);
}

inline Twist scaled(const Twist& w, double s) { return Twist(w.rot * s, w.trans * s); }

}  // namespace detail

/// Pose along the spline: the interval's leading control times three
/// cumulative-blended relative twists of the following controls.
inline Pose evaluate(const TrajectorySpline& spline, Timestamp t) {
  if (!spline.covers(t)) {
    throw std::invalid_argument("evaluate: time outside the valid interval");
  }
  const auto& knots = spline.knot_times;
  const auto it = std::upper_bound(knots.begin(), knots.end(), t);
  const int interval = static_cast<int>(it - knots.begin()) - 1;
  const int i = std::clamp(interval, 1, static_cast<int>(knots.size()) - 3);
  const double u = (t - knots[i]) / spline.knot_spacing;

  const Vec3 basis = detail::cumulative_cubic_basis(u);
  Pose out = spline.control_poses[i - 1];
  for (int j = 0; j < 3; ++j) {
    const int k = i + j;  // relative twist between controls k-1 and k
    const Twist omega =
        log_map(spline.control_poses[k - 1].inverse() * spline.control_poses[k]);
    out = out * exp_map(detail::scaled(omega, basis[j]));
  }
  return out;
}

struct LinePoseRow {
  Timestamp stamp{0.0};
  Pose pose;
};

struct ScanLinePoses {
  int scan_id{-1};
  std::vector<LinePoseRow> lines;
};

/// Smooth per-line poses for every scan of the sub-graph: spline where the
/// stamp is covered, the scan node's rigid pose elsewhere.
inline std::vector<ScanLinePoses> interpolate_lines(const TrajectorySpline& spline,
                                                    const HierGraph& graph,
                                                    const SubGraph& sub) {
  std::vector<ScanLinePoses> out;
  out.reserve(sub.scan_ids.size());
  for (int id : sub.scan_ids) {
    const ScanNode& node = graph.scan_node(id);
    if (!node.frame) {
      throw std::invalid_argument("interpolate_lines: scan " + std::to_string(id) +
                                  " has no frame");
    }
    ScanLinePoses entry;
    entry.scan_id = id;
    entry.lines.reserve(node.frame->lines.size());
    for (const auto& line : node.frame->lines) {
      const Pose pose = spline.covers(line.stamp) ? evaluate(spline, line.stamp) : node.pose;
      entry.lines.push_back(LinePoseRow{line.stamp, pose});
    }
    out.push_back(std::move(entry));
  }
  return out;
}

inline std::string trajectory_to_csv(const std::vector<ScanLinePoses>& scans) {
  std::string out = "stamp,x,y,z,qx,qy,qz,qw\n";
  for (const auto& scan : scans) {
    for (const auto& row : scan.lines) {
      const Eigen::Quaterniond& q = row.pose.rotation;
      out += format_double(row.stamp) + "," + format_double(row.pose.translation.x()) + "," +
             format_double(row.pose.translation.y()) + "," +
             format_double(row.pose.translation.z()) + "," + format_double(q.x()) + "," +
             format_double(q.y()) + "," + format_double(q.z()) + "," + format_double(q.w()) +
             "\n";
    }
  }
  return out;
}

}  // namespace hicts
