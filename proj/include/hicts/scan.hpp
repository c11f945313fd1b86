#pragma once

#include <hicts/geometry.hpp>
#include <hicts/io_util.hpp>

#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace hicts {

/// Default maximum sensor range in meters.
inline constexpr double kMaxSensorRange = 100.0;

/// Smallest unit of a scan: points captured close enough in time to share one
/// stamp and, once estimated, one pose.
struct ScanLine {
  std::vector<Vec3> points;  // sensor frame, meters
  Timestamp stamp{0.0};
  std::optional<Pose> line_pose;  // refined pose, world frame
};

/// One full sweep assembled from ordered lines. Immutable after assembly;
/// deskew returns a new frame.
struct ScanFrame {
  std::vector<ScanLine> lines;
  Timestamp scan_stamp{0.0};  // stamp of the last line
  std::optional<Pose> motion_prior;  // relative motion over the sweep

  std::size_t point_count() const {
    std::size_t n = 0;
    for (const auto& l : lines) n += l.points.size();
    return n;
  }
};

inline ScanFrame assemble_scan(std::vector<ScanLine> lines) {
  if (lines.empty()) throw std::invalid_argument("assemble_scan: no lines");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (!(lines[i - 1].stamp < lines[i].stamp)) {
      throw std::invalid_argument("assemble_scan: line stamps must be strictly increasing");
    }
  }
  ScanFrame frame;
  frame.scan_stamp = lines.back().stamp;
  frame.lines = std::move(lines);
  return frame;
}

/// Re-expresses every line's points in the reference frame using that line's
/// estimated pose: p' = inverse(reference) * line_pose * p. The result is a
/// rigid frame; each output line carries the reference as its pose, so a
/// second deskew against the same reference is the identity.
inline ScanFrame deskew(const ScanFrame& frame, const std::vector<Pose>& line_poses,
                        const Pose& reference) {
  if (line_poses.size() != frame.lines.size()) {
    throw std::invalid_argument("deskew: one pose per line required");
  }
  ScanFrame out;
  out.scan_stamp = frame.scan_stamp;
  out.motion_prior = frame.motion_prior;
  out.lines.reserve(frame.lines.size());
  const Pose ref_inv = reference.inverse();
  for (std::size_t i = 0; i < frame.lines.size(); ++i) {
    const Pose correction = ref_inv * line_poses[i];
    ScanLine line;
    line.stamp = frame.lines[i].stamp;
    line.line_pose = reference;
    line.points.reserve(frame.lines[i].points.size());
    for (const Vec3& p : frame.lines[i].points) {
      line.points.push_back(correction * p);
    }
    out.lines.push_back(std::move(line));
  }
  return out;
}

// --- Scan dataset format ---
//
// One file per scan:
//   HICTS-SCAN v1 <line_count>
//   LINE <stamp_seconds> <point_count>
//   x y z
//   ...

inline std::string scan_to_string(const ScanFrame& frame) {
  std::string out;
  out += "HICTS-SCAN v1 " + std::to_string(frame.lines.size()) + "\n";
  for (const auto& line : frame.lines) {
    out += "LINE " + format_double(line.stamp) + " " + std::to_string(line.points.size()) + "\n";
    for (const Vec3& p : line.points) {
      out += format_double(p.x()) + " " + format_double(p.y()) + " " + format_double(p.z()) + "\n";
    }
  }
  return out;
}

inline ScanFrame scan_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string magic, version;
  std::size_t line_count = 0;
  if (!(in >> magic >> version >> line_count) || magic != "HICTS-SCAN" || version != "v1") {
    throw std::runtime_error("scan_from_string: bad header");
  }
  std::vector<ScanLine> lines;
  lines.reserve(line_count);
  for (std::size_t i = 0; i < line_count; ++i) {
    std::string tag;
    ScanLine line;
    std::size_t point_count = 0;
    if (!(in >> tag >> line.stamp >> point_count) || tag != "LINE") {
      throw std::runtime_error("scan_from_string: bad LINE record");
    }
    line.points.reserve(point_count);
    for (std::size_t j = 0; j < point_count; ++j) {
      Vec3 p;
      if (!(in >> p.x() >> p.y() >> p.z())) {
        throw std::runtime_error("scan_from_string: truncated point data");
      }
      line.points.push_back(p);
    }
    lines.push_back(std::move(line));
  }
  return assemble_scan(std::move(lines));
}

inline void write_scan_file(const std::filesystem::path& path, const ScanFrame& frame) {
  write_text_atomic(path, scan_to_string(frame));
}

inline ScanFrame read_scan_file(const std::filesystem::path& path) {
  return scan_from_string(read_text_file(path));
}

}  // namespace hicts
