#pragma once

#include <hicts/evaluation.hpp>
#include <hicts/pose_graph.hpp>
#include <hicts/registration.hpp>
#include <hicts/trajectory.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hicts {

inline constexpr double kEntropyDetFloor = 1e-60;

/// Alignment entropy of a constraint, up to constant offsets: ln(det Sigma).
inline double edge_entropy(const Covariance6& covariance) {
  return std::log(std::max(covariance.determinant(), kEntropyDetFloor));
}

struct RefineConfig {
  RegistrationConfig registration;
  // A re-registration replaces an edge only when its entropy drops by more
  // than this margin, so refinement is structurally monotone.
  double min_entropy_drop_abs{1e-9};
  double min_entropy_drop_rel{1e-6};
  double mme_radius{kMmeDefaultRadius};  // neighborhood for the logged map quality
  // Spline line poses for map building and re-registration; false treats
  // every scan as rigid at its node pose.
  bool continuous_time{true};
  // Entropy-guided scan selection; false picks uniformly at random instead
  // (the ablation baseline).
  bool covariance_selection{true};
  std::uint64_t selection_seed{0};
};

struct RefineOutcome {
  int subgraph_id{-1};
  int selected_scan{-1};  // -1: nothing qualified
  double entropy_before{0.0};
  double entropy_after{0.0};
  bool attempted{false};
  bool accepted{false};
  std::string message;
};

struct RefinementState {
  std::map<int, int> iterations;                       // refine calls per sub-graph
  std::map<int, std::vector<double>> entropy_history;  // selected-edge entropy per call
  std::map<int, bool> needs_local;                     // from the last propagate()
  bool needs_global{false};
};

struct ConvergenceRow {
  int iteration{0};
  int subgraph_id{-1};
  int selected_scan{-1};
  double entropy_before{0.0};
  double entropy_after{0.0};
  bool global_opt_ran{false};
  double mme{0.0};
};

struct SchedulerReport {
  std::vector<ConvergenceRow> rows;
  RefinementState state;
};

namespace detail {

inline const GraphEdge* find_scan_edge(const SubGraph& sub, int scan_id) {
  for (const auto& edge : sub.edges) {
    if (edge.kind == EdgeKind::scan_map && edge.a == sub.owner && edge.b == scan_id) {
      return &edge;
    }
  }
  return nullptr;
}

inline GraphEdge* find_scan_edge(SubGraph& sub, int scan_id) {
  return const_cast<GraphEdge*>(find_scan_edge(static_cast<const SubGraph&>(sub), scan_id));
}

inline Covariance6 edge_covariance(const GraphEdge& edge) {
  const Eigen::FullPivLU<Mat6> lu(edge.information);
  if (!lu.isInvertible()) {
    throw std::domain_error("edge_covariance: information matrix not invertible");
  }
  const Mat6 raw = lu.inverse();
  return 0.5 * (raw + raw.transpose());
}

inline ScanFrame deskewed_frame(const ScanNode& scan, const std::vector<ScanLinePoses>& rows) {
  for (const auto& r : rows) {
    if (r.scan_id != scan.id) continue;
    std::vector<Pose> poses;
    poses.reserve(r.lines.size());
    for (const auto& row : r.lines) poses.push_back(row.pose);
    return deskew(*scan.frame, poses, scan.pose);
  }
  throw std::invalid_argument("deskewed_frame: no line poses for scan " +
                              std::to_string(scan.id));
}

/// Map content in the node frame: own scans deskewed under the given line
/// poses, borrowed window scans rigidly (their motion belongs to their home
/// sub-graph).
inline std::shared_ptr<MultiresMap> build_subgraph_map(const HierGraph& graph, int map_id,
                                                       const std::vector<ScanLinePoses>& rows,
                                                       int skip_scan = -1) {
  const MapNode& node = graph.map_node(map_id);
  const SubGraph& sub = graph.subgraph(map_id);
  auto map = std::make_shared<MultiresMap>(node.map ? node.map->config() : graph.config().map,
                                           Pose::identity());
  const Pose world_to_map = node.pose.inverse();
  for (int id : sub.scan_ids) {
    if (id == skip_scan) continue;
    const ScanNode& scan = graph.scan_node(id);
    if (!scan.frame) continue;
    map->insert_scan(deskewed_frame(scan, rows), world_to_map * scan.pose, id);
  }
  for (int id : sub.window_ids) {
    const ScanNode& scan = graph.scan_node(id);
    if (!scan.frame) continue;
    map->insert_scan(*scan.frame, world_to_map * scan.pose, id);
  }
  return map;
}

}  // namespace detail

/// Per-line world poses for every scan of the sub-graph: continuous-time when
/// requested and at least four uniformly stamped scans allow a spline, the
/// rigid node pose otherwise.
inline std::vector<ScanLinePoses> subgraph_line_poses(const HierGraph& graph,
                                                      const SubGraph& sub,
                                                      bool continuous_time = true) {
  if (continuous_time && sub.scan_ids.size() >= 4) {
    std::vector<ScanNode> nodes;
    nodes.reserve(sub.scan_ids.size());
    for (int id : sub.scan_ids) nodes.push_back(graph.scan_node(id));
    std::optional<TrajectorySpline> spline;
    try {
      spline = build_spline(nodes);
    } catch (const std::invalid_argument&) {
      // Non-uniform stamps: fall back to rigid poses below.
    }
    if (spline) return interpolate_lines(*spline, graph, sub);
  }
  std::vector<ScanLinePoses> out;
  out.reserve(sub.scan_ids.size());
  for (int id : sub.scan_ids) {
    const ScanNode& node = graph.scan_node(id);
    if (!node.frame) {
      throw std::invalid_argument("subgraph_line_poses: scan " + std::to_string(id) +
                                  " has no frame");
    }
    ScanLinePoses rows;
    rows.scan_id = id;
    rows.lines.reserve(node.frame->lines.size());
    for (const auto& line : node.frame->lines) rows.lines.push_back({line.stamp, node.pose});
    out.push_back(std::move(rows));
  }
  return out;
}

/// Rebuilds the node's map from current poses: spline-interpolated line poses,
/// re-deskewed points, borrowed scans kept.
inline void refresh_subgraph_map(HierGraph& graph, int map_id, bool continuous_time = true) {
  const auto rows = subgraph_line_poses(graph, graph.subgraph(map_id), continuous_time);
  graph.map_node(map_id).map = detail::build_subgraph_map(graph, map_id, rows);
}

/// The scan whose map constraint carries maximal entropy, provided some
/// later-added constraint has strictly lower entropy (evidence that
/// realignment can do better). Ties break toward the earliest stamp.
inline std::optional<int> select_scan(const HierGraph& graph, const SubGraph& sub) {
  struct Entry {
    int scan_id;
    Timestamp stamp;
    double entropy;
  };
  std::vector<Entry> entries;  // acquisition order
  entries.reserve(sub.scan_ids.size());
  for (int scan_id : sub.scan_ids) {
    const GraphEdge* edge = detail::find_scan_edge(sub, scan_id);
    if (!edge) continue;
    entries.push_back({scan_id, graph.scan_node(scan_id).stamp,
                       edge_entropy(detail::edge_covariance(*edge))});
  }
  if (entries.empty()) return std::nullopt;
  double max_entropy = entries.front().entropy;
  for (const auto& e : entries) max_entropy = std::max(max_entropy, e.entropy);
  const Entry* best = nullptr;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].entropy != max_entropy) continue;
    bool later_lower = false;
    for (std::size_t j = i + 1; j < entries.size() && !later_lower; ++j) {
      later_lower = entries[j].entropy < entries[i].entropy;
    }
    if (later_lower && (!best || entries[i].stamp < best->stamp)) best = &entries[i];
  }
  if (!best) return std::nullopt;
  return best->scan_id;
}

/// One refinement step: re-register the selected scan against its map rebuilt
/// without that scan, replace the constraint only when registration converges
/// and the entropy drops, then re-optimize and rebuild the map.
inline RefineOutcome refine_once(HierGraph& graph, int map_id, const RefineConfig& config = {},
                                 std::optional<int> forced_scan = std::nullopt) {
  RefineOutcome out;
  out.subgraph_id = map_id;
  SubGraph& sub = graph.subgraph(map_id);
  MapNode& node = graph.map_node(map_id);

  std::optional<int> selected = forced_scan ? forced_scan : select_scan(graph, sub);
  if (!selected) {
    out.message = "no scan qualifies";
    return out;
  }
  GraphEdge* edge = detail::find_scan_edge(sub, *selected);
  if (!edge) {
    throw std::invalid_argument("refine_once: scan " + std::to_string(*selected) +
                                " has no map constraint");
  }
  out.selected_scan = *selected;
  out.entropy_before = edge_entropy(detail::edge_covariance(*edge));
  out.entropy_after = out.entropy_before;

  const auto rows = subgraph_line_poses(graph, sub, config.continuous_time);
  const auto without = detail::build_subgraph_map(graph, map_id, rows, *selected);
  const ScanNode& scan = graph.scan_node(*selected);
  const ScanFrame source = detail::deskewed_frame(scan, rows);
  const Pose prior = node.pose.inverse() * scan.pose;
  const RegistrationResult result =
      register_scan_to_map(source, *without, prior, config.registration);
  out.attempted = true;
  if (!result.converged) {
    out.message = "registration did not converge";
    return out;
  }
  if (result.ill_conditioned) {
    out.message = "registration ill-conditioned";
    return out;
  }
  out.entropy_after = edge_entropy(result.covariance);
  const double margin = std::max(config.min_entropy_drop_abs,
                                 std::abs(out.entropy_before) * config.min_entropy_drop_rel);
  if (!(out.entropy_after < out.entropy_before - margin)) {
    out.message = "no entropy improvement";
    return out;
  }

  edge->relative = result.transform;
  edge->information = HierGraph::invert_covariance(result.covariance, "refine_once");
  graph.scan_node(*selected).pose = node.pose * result.transform;
  out.accepted = true;
  graph.optimize_subgraph(map_id);
  refresh_subgraph_map(graph, map_id, config.continuous_time);
  sub.needs_refinement = false;
  return out;
}

/// Borrows scans from map-level neighbors whose positions fall inside this
/// map's finest window. Borrowed scans add points only; their poses stay
/// owned by their home sub-graph.
inline int expand_window(HierGraph& graph, int map_id) {
  SubGraph& sub = graph.subgraph(map_id);
  MapNode& node = graph.map_node(map_id);
  const double extent =
      node.map ? node.map->half_extent(0) : graph.config().map.base_half_extent;
  const Pose world_to_map = node.pose.inverse();
  int borrowed = 0;
  for (const auto& edge : graph.map_edges()) {
    if (edge.a != map_id && edge.b != map_id) continue;
    const int other = edge.a == map_id ? edge.b : edge.a;
    for (int scan_id : graph.subgraph(other).scan_ids) {
      if (std::find(sub.window_ids.begin(), sub.window_ids.end(), scan_id) !=
          sub.window_ids.end()) {
        continue;
      }
      const ScanNode& scan = graph.scan_node(scan_id);
      if (!scan.frame) continue;
      const Vec3 local = world_to_map * scan.pose.translation;
      if (local.cwiseAbs().maxCoeff() > extent) continue;
      if (node.map) node.map->insert_scan(*scan.frame, world_to_map * scan.pose, scan_id);
      sub.window_ids.push_back(scan_id);
      ++borrowed;
    }
  }
  return borrowed;
}

/// Mean map entropy of all map contents placed in the world frame; 0 when
/// there is nothing evaluable yet.
inline double graph_mme(const HierGraph& graph, double radius = kMmeDefaultRadius) {
  std::vector<Vec3> cloud;
  for (int id : graph.map_order()) {
    const MapNode& node = graph.map_node(id);
    if (!node.map) continue;
    const PlyCloud points = node.map->export_points();
    cloud.reserve(cloud.size() + points.points.size());
    for (const Vec3& p : points.points) cloud.push_back(node.pose * p);
  }
  if (cloud.empty()) return 0.0;
  try {
    return mean_map_entropy(cloud, radius).mme;
  } catch (const std::runtime_error&) {
    return 0.0;  // too sparse for any neighborhood
  }
}

/// Budgeted refinement rounds: refine every sub-graph, propagate, run global
/// optimization only when flagged, propagate again, log entropy and map
/// quality.
inline SchedulerReport run_scheduler(HierGraph& graph, int budget,
                                     const RefineConfig& config = {}) {
  SchedulerReport report;
  std::mt19937_64 pick_rng(config.selection_seed);
  for (int iteration = 0; iteration < budget; ++iteration) {
    const std::size_t row_begin = report.rows.size();
    for (int map_id : graph.map_order()) {
      std::optional<int> forced;
      if (!config.covariance_selection) {
        const auto& ids = graph.subgraph(map_id).scan_ids;
        if (!ids.empty()) {
          std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 1);
          forced = ids[pick(pick_rng)];
        }
      }
      const RefineOutcome outcome = refine_once(graph, map_id, config, forced);
      report.state.iterations[map_id] += 1;
      if (outcome.selected_scan >= 0) {
        report.state.entropy_history[map_id].push_back(
            outcome.accepted ? outcome.entropy_after : outcome.entropy_before);
      }
      ConvergenceRow row;
      row.iteration = iteration;
      row.subgraph_id = map_id;
      row.selected_scan = outcome.selected_scan;
      row.entropy_before = outcome.entropy_before;
      row.entropy_after = outcome.entropy_after;
      report.rows.push_back(row);
    }
    graph.propagate();
    bool global_ran = false;
    if (graph.consume_global_needed()) {
      graph.optimize_global();
      graph.propagate();
      global_ran = true;
    }
    for (int map_id : graph.map_order()) {
      report.state.needs_local[map_id] = graph.subgraph(map_id).needs_refinement;
    }
    report.state.needs_global = graph.global_needed();
    const double mme = graph_mme(graph, config.mme_radius);
    for (std::size_t r = row_begin; r < report.rows.size(); ++r) {
      report.rows[r].global_opt_ran = global_ran;
      report.rows[r].mme = mme;
    }
  }
  return report;
}

inline std::string convergence_csv(const std::vector<ConvergenceRow>& rows) {
  std::string out = "iteration,subgraph_id,selected_scan,entropy_before,entropy_after,global_opt_ran,mme\n";
  for (const auto& row : rows) {
    out += std::to_string(row.iteration) + "," + std::to_string(row.subgraph_id) + "," +
           std::to_string(row.selected_scan) + "," + format_double(row.entropy_before) + "," +
           format_double(row.entropy_after) + "," + (row.global_opt_ran ? "1" : "0") + "," +
           format_double(row.mme) + "\n";
  }
  return out;
}

}  // namespace hicts
