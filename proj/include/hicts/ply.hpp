#pragma once

#include <hicts/geometry.hpp>
#include <hicts/io_util.hpp>

#include <sstream>
#include <string>
#include <vector>

namespace hicts {

/// Point cloud as exchanged on disk: positions plus the index of the scan
/// each point came from.
struct PlyCloud {
  std::vector<Vec3> points;
  std::vector<int> scan_indices;  // same length as points
};

inline std::string ply_to_string(const PlyCloud& cloud) {
  if (cloud.scan_indices.size() != cloud.points.size()) {
    throw std::invalid_argument("ply_to_string: scan_indices size mismatch");
  }
  std::string out;
  out += "ply\n";
  out += "format ascii 1.0\n";
  out += "element vertex " + std::to_string(cloud.points.size()) + "\n";
  out += "property double x\n";
  out += "property double y\n";
  out += "property double z\n";
  out += "property int scan_index\n";
  out += "end_header\n";
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Vec3& p = cloud.points[i];
    out += format_double(p.x()) + " " + format_double(p.y()) + " " + format_double(p.z()) + " " +
           std::to_string(cloud.scan_indices[i]) + "\n";
  }
  return out;
}

/// Parses ASCII PLY with x/y/z vertex properties in any column order;
/// scan_index is optional and defaults to 0. Non-vertex elements and unknown
/// properties are skipped.
inline PlyCloud ply_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "ply") {
    throw std::runtime_error("ply_from_string: missing ply magic");
  }
  std::size_t vertex_count = 0;
  bool in_vertex_element = false;
  bool saw_format = false;
  int col_x = -1, col_y = -1, col_z = -1, col_scan = -1;
  int column = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string token;
    ls >> token;
    if (token == "format") {
      std::string kind;
      ls >> kind;
      if (kind != "ascii") throw std::runtime_error("ply_from_string: only ascii supported");
      saw_format = true;
    } else if (token == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      in_vertex_element = (name == "vertex");
      if (in_vertex_element) vertex_count = count;
    } else if (token == "property" && in_vertex_element) {
      std::string type, name;
      ls >> type >> name;
      if (name == "x") col_x = column;
      if (name == "y") col_y = column;
      if (name == "z") col_z = column;
      if (name == "scan_index") col_scan = column;
      ++column;
    } else if (token == "end_header") {
      break;
    } else if (token == "comment" || token == "property") {
      continue;
    } else {
      throw std::runtime_error("ply_from_string: unexpected header line: " + line);
    }
  }
  if (!saw_format || col_x < 0 || col_y < 0 || col_z < 0) {
    throw std::runtime_error("ply_from_string: header lacks x/y/z vertex properties");
  }
  PlyCloud cloud;
  cloud.points.reserve(vertex_count);
  cloud.scan_indices.reserve(vertex_count);
  for (std::size_t i = 0; i < vertex_count; ++i) {
    if (!std::getline(in, line)) {
      throw std::runtime_error("ply_from_string: truncated vertex data");
    }
    std::istringstream ls(line);
    std::vector<double> values;
    double v;
    while (ls >> v) values.push_back(v);
    if (static_cast<int>(values.size()) < column) {
      throw std::runtime_error("ply_from_string: short vertex row");
    }
    cloud.points.emplace_back(values[col_x], values[col_y], values[col_z]);
    cloud.scan_indices.push_back(col_scan >= 0 ? static_cast<int>(values[col_scan]) : 0);
  }
  return cloud;
}

inline void write_ply_file(const std::filesystem::path& path, const PlyCloud& cloud) {
  write_text_atomic(path, ply_to_string(cloud));
}

inline PlyCloud read_ply_file(const std::filesystem::path& path) {
  return ply_from_string(read_text_file(path));
}

}  // namespace hicts
