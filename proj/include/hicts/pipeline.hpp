#pragma once

#include <hicts/config.hpp>
#include <hicts/ply.hpp>
#include <hicts/pose_graph.hpp>
#include <hicts/refinement.hpp>
#include <hicts/simulator.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hicts {

/// Missing, malformed, or mutually inconsistent inputs.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A computation that ran on valid inputs but produced no usable result.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::vector<ScanFrame> scans;        // stamp order
  std::vector<TimedPose> groundtruth;  // line granularity; empty when absent
  SceneModel scene;                    // empty when the dataset carries none
};

inline std::string scan_file_name(int index) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "scan_%05d.txt", index);
  return buffer;
}

/// `stamp,x,y,z,qx,qy,qz,qw` rows, one per pose.
inline std::string trajectory_to_csv(const std::vector<TimedPose>& rows) {
  std::string out = "stamp,x,y,z,qx,qy,qz,qw\n";
  for (const auto& row : rows) {
    const Eigen::Quaterniond& q = row.pose.rotation;
    out += format_double(row.stamp) + "," + format_double(row.pose.translation.x()) + "," +
           format_double(row.pose.translation.y()) + "," +
           format_double(row.pose.translation.z()) + "," + format_double(q.x()) + "," +
           format_double(q.y()) + "," + format_double(q.z()) + "," + format_double(q.w()) +
           "\n";
  }
  return out;
}

inline std::vector<TimedPose> trajectory_from_csv(const std::string& text) {
  std::istringstream stream(text);
  std::string line;
  if (!std::getline(stream, line) || line != "stamp,x,y,z,qx,qy,qz,qw") {
    throw DataError("trajectory csv: bad header");
  }
  std::vector<TimedPose> rows;
  int line_no = 1;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    TimedPose row;
    Vec3 t;
    double qx, qy, qz, qw;
    if (!(ls >> row.stamp >> t.x() >> t.y() >> t.z() >> qx >> qy >> qz >> qw)) {
      throw DataError("trajectory csv: bad row at line " + std::to_string(line_no));
    }
    row.pose = Pose(Eigen::Quaterniond(qw, qx, qy, qz), t);
    rows.push_back(row);
  }
  return rows;
}

/// Scene, per-scan files, and line-level ground truth under one directory.
inline void write_dataset(const std::filesystem::path& dir,
                          const std::vector<SimulatedScan>& scans, const SceneModel& scene) {
  std::filesystem::create_directories(dir);
  write_scene_file((dir / "scene.txt").string(), scene);
  write_text_atomic(dir / "groundtruth.csv", groundtruth_csv(scans));
  for (std::size_t i = 0; i < scans.size(); ++i) {
    write_scan_file(dir / scan_file_name(static_cast<int>(i)), scans[i].frame);
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw DataError("dataset directory not found: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("scan_", 0) == 0 && entry.path().extension() == ".txt") {
      files.push_back(entry.path());
    }
  }
  if (files.empty()) throw DataError("no scan files in dataset: " + dir.string());
  std::sort(files.begin(), files.end());

  Dataset dataset;
  try {
    for (const auto& file : files) dataset.scans.push_back(read_scan_file(file));
    if (std::filesystem::exists(dir / "groundtruth.csv")) {
      dataset.groundtruth = trajectory_from_csv(read_text_file(dir / "groundtruth.csv"));
    }
    if (std::filesystem::exists(dir / "scene.txt")) {
      dataset.scene = read_scene_file((dir / "scene.txt").string());
    }
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError("dataset " + dir.string() + ": " + e.what());
  }
  return dataset;
}

/// Straight constant-speed ground truth along +x covering exactly the
/// configured number of scans.
inline std::vector<TimedPose> simulation_trajectory(const PipelineConfig& config) {
  const double duration =
      config.sim_scan_count * config.sim_lines * config.sim_line_period + 1e-9;
  return {{0.0, Pose::identity()},
          {duration,
           Pose(Eigen::Quaterniond::Identity(), Vec3(config.sim_speed * duration, 0.0, 0.0))}};
}

inline SimConfig sim_config(const PipelineConfig& config) {
  SimConfig sim;
  sim.rings = config.sim_rings;
  sim.vertical_fov_deg = config.sim_vertical_fov_deg;
  sim.max_range = config.sim_max_range;
  sim.lines_per_scan = config.sim_lines;
  sim.line_period = config.sim_line_period;
  sim.rotation_rate_rpm = 60.0 / (config.sim_lines * config.sim_line_period);
  sim.noise_sigma = config.sim_noise_sigma;
  sim.trajectory = simulation_trajectory(config);
  sim.seed = config.seed;
  return sim;
}

struct SlamOptions {
  bool online_refine{true};
  bool continuous_time{true};
};

struct SlamResult {
  HierGraph graph{GraphConfig()};
  int processed{0};
  int skipped{0};
};

namespace detail {

/// Constant-twist line poses between the last accepted pose and the
/// prediction; the online stand-in for the spline that refinement fits later.
inline std::vector<Pose> predicted_line_poses(const ScanFrame& frame, Timestamp prev_stamp,
                                              const Pose& prev_pose, const Pose& predicted) {
  const std::vector<TimedPose> segment = {{prev_stamp, prev_pose},
                                          {frame.scan_stamp, predicted}};
  std::vector<Pose> poses;
  poses.reserve(frame.lines.size());
  for (const auto& line : frame.lines) {
    poses.push_back(interpolate_ground_truth(segment, line.stamp));
  }
  return poses;
}

inline RegistrationResult identity_anchor(const Covariance6& covariance) {
  RegistrationResult result;
  result.transform = Pose::identity();
  result.covariance = covariance;
  result.converged = true;
  result.matched_pairs = 1;
  return result;
}

}  // namespace detail

/// Sequential odometry and mapping: each scan is deskewed under a
/// constant-velocity prediction, registered to the active node's map, and
/// appended to the graph; new map nodes spawn past the distance threshold,
/// each followed by one loop-closure attempt; refinement and cross-level
/// synchronization interleave when enabled. Scans whose registration fails
/// are skipped and counted.
inline SlamResult run_slam(const Dataset& dataset, const PipelineConfig& config,
                           const SlamOptions& options = {}) {
  if (dataset.scans.empty()) throw DataError("run_slam: dataset has no scans");
  SlamResult out;
  out.graph = HierGraph(graph_config(config));
  HierGraph& graph = out.graph;
  const RegistrationConfig reg = registration_config(config);
  RefineConfig refine = refine_config(config);
  refine.continuous_time = options.continuous_time;

  int current_map = -1;
  int prev_scan = -1;
  Pose last_delta;  // identity: constant-position prediction until two scans exist
  Timestamp prev_stamp = 0.0;

  for (const ScanFrame& frame : dataset.scans) {
    if (prev_scan < 0) {
      // The first scan fixes the gauge: world origin, first map node, and an
      // anchor constraint too sharp for refinement to ever reselect.
      MapNode& node = graph.add_map_node_unchecked(Pose::identity());
      current_map = node.id;
      ScanNode scan;
      scan.pose = Pose::identity();
      scan.stamp = frame.scan_stamp;
      scan.frame = std::make_shared<ScanFrame>(frame);
      const GraphEdge& edge = graph.add_scan_constraint(
          current_map, std::move(scan), detail::identity_anchor(1e-8 * Covariance6::Identity()));
      node.map->insert_scan(frame, Pose::identity(), edge.b);
      prev_scan = edge.b;
      prev_stamp = frame.scan_stamp;
      ++out.processed;
      continue;
    }

    const Pose prev_pose = graph.scan_node(prev_scan).pose;
    const Pose predicted = prev_pose * last_delta;
    ScanFrame working = frame;
    if (options.continuous_time) {
      working = deskew(
          frame, detail::predicted_line_poses(frame, prev_stamp, prev_pose, predicted),
          predicted);
    }

    MapNode& node = graph.map_node(current_map);
    const Pose prior = node.pose.inverse() * predicted;
    const RegistrationResult result = register_scan_to_map(working, *node.map, prior, reg);
    if (!result.converged || result.ill_conditioned) {
      ++out.skipped;
      continue;
    }
    const Pose pose = node.pose * result.transform;

    ScanNode scan;
    scan.pose = pose;
    scan.stamp = frame.scan_stamp;
    scan.frame = std::make_shared<ScanFrame>(frame);

    MapNode* spawned = graph.maybe_add_map_node(pose);
    if (spawned) {
      // The node is created at the scan pose, so the scan-map registration
      // uncertainty applies unchanged to the consecutive map-map edge.
      GraphEdge link;
      link.a = current_map;
      link.b = spawned->id;
      link.relative = node.pose.inverse() * spawned->pose;
      link.information = HierGraph::invert_covariance(result.covariance, "run_slam");
      graph.add_map_edge(link);

      const GraphEdge& edge = graph.add_scan_constraint(
          spawned->id, std::move(scan), detail::identity_anchor(result.covariance));
      spawned->map->insert_scan(working, Pose::identity(), edge.b);
      current_map = spawned->id;
      prev_scan = edge.b;

      const auto candidate = graph.loop_closure_candidate(
          current_map, detail::scan_seed(config.seed, current_map));
      if (candidate) graph.close_loop(current_map, *candidate, reg);
    } else {
      const GraphEdge& edge = graph.add_scan_constraint(current_map, std::move(scan), result);
      node.map->insert_scan(working, node.pose.inverse() * pose, edge.b);
      prev_scan = edge.b;
    }

    if (options.online_refine && graph.subgraph(current_map).scan_ids.size() >= 2) {
      refine_once(graph, current_map, refine);
    }
    graph.propagate();
    if (graph.consume_global_needed() && !graph.map_edges().empty()) {
      graph.optimize_global();
      graph.propagate();
    }

    last_delta = prev_pose.inverse() * graph.scan_node(prev_scan).pose;
    prev_stamp = frame.scan_stamp;
    ++out.processed;
  }
  return out;
}

/// All scan-node poses in stamp order.
inline std::vector<TimedPose> graph_trajectory(const HierGraph& graph) {
  std::vector<TimedPose> rows;
  for (int map_id : graph.map_order()) {
    for (int id : graph.subgraph(map_id).scan_ids) {
      const ScanNode& scan = graph.scan_node(id);
      rows.push_back({scan.stamp, scan.pose});
    }
  }
  std::sort(rows.begin(), rows.end(),
            [](const TimedPose& a, const TimedPose& b) { return a.stamp < b.stamp; });
  return rows;
}

/// Map contents of every node, placed in the world frame.
inline PlyCloud export_world_cloud(const HierGraph& graph) {
  PlyCloud cloud;
  for (int id : graph.map_order()) {
    const MapNode& node = graph.map_node(id);
    if (!node.map) continue;
    const PlyCloud part = node.map->export_points();
    for (std::size_t i = 0; i < part.points.size(); ++i) {
      cloud.points.push_back(node.pose * part.points[i]);
      cloud.scan_indices.push_back(part.scan_indices[i]);
    }
  }
  return cloud;
}

/// Pairs the graph's scan nodes with dataset scans by stamp and attaches the
/// frames; a node without a matching scan means the snapshot and dataset do
/// not belong together.
inline void attach_frames(HierGraph& graph, const Dataset& dataset,
                          double stamp_tolerance = 0.5 * 1.33e-3) {
  for (int map_id : graph.map_order()) {
    for (int id : graph.subgraph(map_id).scan_ids) {
      ScanNode& scan = graph.scan_node(id);
      const ScanFrame* best = nullptr;
      double best_dt = stamp_tolerance;
      for (const ScanFrame& frame : dataset.scans) {
        const double dt = std::abs(frame.scan_stamp - scan.stamp);
        if (dt <= best_dt) {
          best_dt = dt;
          best = &frame;
        }
      }
      if (!best) {
        throw DataError("snapshot does not match dataset: no scan at stamp " +
                        format_double(scan.stamp));
      }
      scan.frame = std::make_shared<ScanFrame>(*best);
    }
  }
}

/// Restores a graph from snapshot text, re-attaches dataset frames, and
/// rebuilds every node's map so refinement can run.
inline HierGraph load_graph(const std::string& snapshot_text, const Dataset& dataset,
                            const PipelineConfig& config, bool continuous_time = true) {
  HierGraph graph = [&] {
    try {
      return HierGraph::from_snapshot(snapshot_text, graph_config(config));
    } catch (const std::exception& e) {
      throw DataError(std::string("graph snapshot: ") + e.what());
    }
  }();
  attach_frames(graph, dataset);
  for (int map_id : graph.map_order()) {
    refresh_subgraph_map(graph, map_id, continuous_time);
  }
  return graph;
}

}  // namespace hicts
