#pragma once

#include <hicts/geometry.hpp>
#include <hicts/io_util.hpp>
#include <hicts/local_map.hpp>
#include <hicts/registration.hpp>
#include <hicts/scan.hpp>

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hicts {

struct GraphConfig {
  double map_node_distance{5.0};                     // meters between map nodes
  double propagate_translation{0.01};                // meters
  double propagate_rotation{1.0 * M_PI / 180.0};     // radians
  double loop_sigma{5.0};                            // meters, candidate sampling
  double huber_delta{1.0};                           // on map-edge residual norm
  double step_tolerance{1e-8};
  int max_iterations{100};
  MapConfig map;                                     // layout of per-node maps
};

struct ScanNode {
  int id{-1};
  Pose pose;  // world frame
  Timestamp stamp{0.0};
  std::shared_ptr<const ScanFrame> frame;
};

struct MapNode {
  int id{-1};
  Pose pose;  // world frame
  std::shared_ptr<MultiresMap> map;  // content in this node's frame
};

enum class EdgeKind { map_map, scan_map };

/// Relative-pose constraint: residual log(relative^-1 * X_a^-1 * X_b),
/// weighted by information.
struct GraphEdge {
  EdgeKind kind{EdgeKind::scan_map};
  int a{-1};
  int b{-1};
  Pose relative;
  Mat6 information{Mat6::Identity()};
};

/// Scan-level graph owned by one map node. Scan poses live in the world
/// frame; sync state records how the world placement looked when map node
/// and sub-graph last agreed.
struct SubGraph {
  int owner{-1};
  std::vector<int> scan_ids;  // insertion order; last one is the reference
  std::vector<GraphEdge> edges;
  std::vector<int> window_ids;  // borrowed neighbor scans (map rebuild only)
  Pose synced_map_pose;         // map-node pose at the last down-sync
  Pose ref_offset;              // map-frame pose of the reference at last sync
  bool needs_refinement{false};

  int reference_id() const { return scan_ids.empty() ? -1 : scan_ids.back(); }
};

struct OptimizeReport {
  double initial_cost{0.0};
  double final_cost{0.0};
  int iterations{0};
  bool converged{false};
  std::vector<RegistrationStep> steps;  // accepted costs, in order
};

enum class PropagateActionKind {
  map_pose_updated,     // up: reference scan moved the map node
  global_marked,        // up: global optimization now needed
  carried_scans,        // down: sub-graph rigidly followed its map node
  marked_refinement,    // down: shift was large, sub-graph needs refinement
};

struct PropagateAction {
  PropagateActionKind kind;
  int map_id;
};

namespace detail {

inline Vec6 edge_residual(const GraphEdge& edge, const Pose& xa, const Pose& xb) {
  return log_map(edge.relative.inverse() * xa.inverse() * xb).vector();
}

inline void validate_information(const Mat6& information, const char* where) {
  if (!information.allFinite()) {
    throw std::invalid_argument(std::string(where) + ": information not finite");
  }
  // Tolerances scale with the matrix so huge informations stay checkable.
  const double scale = std::max(1.0, information.cwiseAbs().maxCoeff());
  if (!is_symmetric(information, 1e-9 * scale)) {
    throw std::invalid_argument(std::string(where) + ": information not symmetric");
  }
  if (!is_positive_semidefinite(information, 1e-9 * scale)) {
    throw std::invalid_argument(std::string(where) + ": information not PSD");
  }
}

/// Damped Gauss-Newton over a set of pose variables tied by relative-pose
/// edges. Poses are updated through right-multiplied twists; Jacobians are
/// central differences. huber_delta <= 0 disables the robust kernel.
class PoseProblem {
 public:
  PoseProblem(std::vector<int> variable_ids, std::unordered_map<int, Pose> poses,
              std::vector<GraphEdge> edges, double huber_delta)
      : variable_ids_(std::move(variable_ids)),
        poses_(std::move(poses)),
        edges_(std::move(edges)),
        huber_delta_(huber_delta) {
    std::sort(variable_ids_.begin(), variable_ids_.end());
    for (std::size_t i = 0; i < variable_ids_.size(); ++i) {
      slot_[variable_ids_[i]] = static_cast<int>(i);
    }
  }

  OptimizeReport run(double step_tolerance, int max_iterations) {
    OptimizeReport report;
    report.initial_cost = cost(poses_);
    report.final_cost = report.initial_cost;
    if (variable_ids_.empty()) {
      report.converged = true;
      return report;
    }
    const int dim = static_cast<int>(variable_ids_.size()) * 6;
    double damping = 1e-4;

    for (int iter = 0; iter < max_iterations; ++iter) {
      report.iterations = iter + 1;
      Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
      Eigen::VectorXd g = Eigen::VectorXd::Zero(dim);
      const double current = accumulate(poses_, &h, &g);

      const Eigen::VectorXd diag = h.diagonal().cwiseMax(1e-12);
      bool stepped = false;
      for (int attempt = 0; attempt < 40; ++attempt) {
        Eigen::MatrixXd damped = h;
        damped.diagonal() += damping * diag;
        const Eigen::VectorXd delta = damped.ldlt().solve(-g);
        if (!delta.allFinite()) {
          damping *= 10.0;
          continue;
        }
        std::unordered_map<int, Pose> candidate = poses_;
        for (std::size_t v = 0; v < variable_ids_.size(); ++v) {
          const Vec6 d = delta.segment<6>(static_cast<int>(v) * 6);
          Pose& pose = candidate[variable_ids_[v]];
          pose = pose * exp_map(Twist::from_vector(d));
        }
        const double candidate_cost = cost(candidate);
        if (candidate_cost < current) {
          report.steps.push_back(RegistrationStep{current, candidate_cost});
          poses_ = std::move(candidate);
          damping = std::max(damping * 0.5, 1e-12);
          stepped = true;
          if (delta.norm() < step_tolerance) report.converged = true;
          break;
        }
        if (delta.norm() < step_tolerance) {
          report.converged = true;
          break;
        }
        damping *= 10.0;
      }
      if (report.converged || !stepped) break;
    }
    report.final_cost = cost(poses_);
    return report;
  }

  const Pose& pose(int id) const { return poses_.at(id); }

 private:
  double rho(double s2) const {
    if (huber_delta_ <= 0.0) return s2;
    const double s = std::sqrt(s2);
    if (s <= huber_delta_) return s2;
    return 2.0 * huber_delta_ * s - huber_delta_ * huber_delta_;
  }

  double cost(const std::unordered_map<int, Pose>& poses) const {
    double total = 0.0;
    for (const auto& edge : edges_) {
      const Vec6 r = edge_residual(edge, poses.at(edge.a), poses.at(edge.b));
      total += rho(r.dot(edge.information * r));
    }
    return total;
  }

  double accumulate(const std::unordered_map<int, Pose>& poses, Eigen::MatrixXd* h,
                    Eigen::VectorXd* g) const {
    double total = 0.0;
    for (const auto& edge : edges_) {
      const Pose& xa = poses.at(edge.a);
      const Pose& xb = poses.at(edge.b);
      const Vec6 r = edge_residual(edge, xa, xb);
      const double s2 = r.dot(edge.information * r);
      total += rho(s2);
      double weight = 1.0;
      if (huber_delta_ > 0.0) {
        const double s = std::sqrt(std::max(s2, 1e-300));
        if (s > huber_delta_) weight = huber_delta_ / s;
      }
      const Mat6 info = weight * edge.information;

      const int slot_a = slot_of(edge.a);
      const int slot_b = slot_of(edge.b);
      Eigen::Matrix<double, 6, 6> ja, jb;
      if (slot_a >= 0) ja = numeric_jacobian(edge, xa, xb, true);
      if (slot_b >= 0) jb = numeric_jacobian(edge, xa, xb, false);

      if (slot_a >= 0) {
        h->block<6, 6>(slot_a * 6, slot_a * 6) += ja.transpose() * info * ja;
        g->segment<6>(slot_a * 6) += ja.transpose() * info * r;
      }
      if (slot_b >= 0) {
        h->block<6, 6>(slot_b * 6, slot_b * 6) += jb.transpose() * info * jb;
        g->segment<6>(slot_b * 6) += jb.transpose() * info * r;
      }
      if (slot_a >= 0 && slot_b >= 0) {
        const Mat6 cross = ja.transpose() * info * jb;
        h->block<6, 6>(slot_a * 6, slot_b * 6) += cross;
        h->block<6, 6>(slot_b * 6, slot_a * 6) += cross.transpose();
      }
    }
    return total;
  }

  Eigen::Matrix<double, 6, 6> numeric_jacobian(const GraphEdge& edge, const Pose& xa,
                                               const Pose& xb, bool wrt_a) const {
    constexpr double kStep = 1e-6;
    Eigen::Matrix<double, 6, 6> jac;
    for (int k = 0; k < 6; ++k) {
      Vec6 d = Vec6::Zero();
      d[k] = kStep;
      const Pose plus = (wrt_a ? xa : xb) * exp_map(Twist::from_vector(d));
      d[k] = -kStep;
      const Pose minus = (wrt_a ? xa : xb) * exp_map(Twist::from_vector(d));
      const Vec6 r_plus =
          wrt_a ? edge_residual(edge, plus, xb) : edge_residual(edge, xa, plus);
      const Vec6 r_minus =
          wrt_a ? edge_residual(edge, minus, xb) : edge_residual(edge, xa, minus);
      jac.col(k) = (r_plus - r_minus) / (2.0 * kStep);
    }
    return jac;
  }

  int slot_of(int id) const {
    const auto it = slot_.find(id);
    return it == slot_.end() ? -1 : it->second;
  }

  std::vector<int> variable_ids_;
  std::unordered_map<int, Pose> poses_;
  std::vector<GraphEdge> edges_;
  double huber_delta_{0.0};
  std::unordered_map<int, int> slot_;
};

}  // namespace detail

/// Two-level pose graph: map nodes with map-map edges on top, one scan-level
/// sub-graph per map node below. All poses are world-frame.
class HierGraph {
 public:
  explicit HierGraph(const GraphConfig& config = GraphConfig()) : config_(config) {}

  const GraphConfig& config() const { return config_; }
  const std::vector<int>& map_order() const { return map_order_; }
  const std::vector<GraphEdge>& map_edges() const { return map_edges_; }
  bool global_needed() const { return global_needed_; }
  void mark_global_needed() { global_needed_ = true; }
  bool consume_global_needed() { return std::exchange(global_needed_, false); }
  const std::vector<std::string>& events() const { return events_; }

  const MapNode& map_node(int id) const { return map_nodes_.at(id); }
  MapNode& map_node(int id) { return map_nodes_.at(id); }
  const ScanNode& scan_node(int id) const { return scan_nodes_.at(id); }
  ScanNode& scan_node(int id) { return scan_nodes_.at(id); }
  const SubGraph& subgraph(int map_id) const { return subgraphs_.at(map_id); }
  SubGraph& subgraph(int map_id) { return subgraphs_.at(map_id); }
  bool has_map_node(int id) const { return map_nodes_.count(id) > 0; }
  std::size_t scan_count() const { return scan_nodes_.size(); }

  /// Creates a map node at current_pose when no existing node is within the
  /// distance threshold. Returns nullptr when the nearest node is too close.
  MapNode* maybe_add_map_node(const Pose& current_pose) {
    for (int id : map_order_) {
      if ((map_nodes_.at(id).pose.translation - current_pose.translation).norm() <
          config_.map_node_distance) {
        return nullptr;
      }
    }
    return &add_map_node_unchecked(current_pose);
  }

  /// Unconditional map-node creation (graph construction from known
  /// layouts); maybe_add_map_node is the gated path.
  MapNode& add_map_node_unchecked(const Pose& pose) {
    const int id = next_node_id_++;
    MapNode node;
    node.id = id;
    node.pose = pose;
    // Content is stored in the node's own frame; the window sits at its origin.
    node.map = std::make_shared<MultiresMap>(config_.map, Pose::identity());
    map_nodes_.emplace(id, std::move(node));
    map_order_.push_back(id);
    SubGraph sub;
    sub.owner = id;
    sub.synced_map_pose = pose;
    sub.ref_offset = Pose::identity();
    subgraphs_.emplace(id, std::move(sub));
    return map_nodes_.at(id);
  }

  /// Appends the scan to the map node's sub-graph with a scan-map edge from
  /// the registration result. The scan becomes the sub-graph reference.
  const GraphEdge& add_scan_constraint(int map_id, ScanNode scan,
                                       const RegistrationResult& result) {
    if (!result.converged) {
      throw std::invalid_argument("add_scan_constraint: registration did not converge");
    }
    const Mat6 information = invert_covariance(result.covariance, "add_scan_constraint");
    SubGraph& sub = subgraphs_.at(map_id);
    scan.id = next_node_id_++;
    const int scan_id = scan.id;
    scan_nodes_.emplace(scan_id, std::move(scan));
    sub.scan_ids.push_back(scan_id);

    GraphEdge edge;
    edge.kind = EdgeKind::scan_map;
    edge.a = map_id;
    edge.b = scan_id;
    edge.relative = result.transform;
    edge.information = information;
    sub.edges.push_back(edge);

    // The new scan is the reference; record how it sits relative to the map
    // node so only later refinement (not this append) can trigger an
    // up-propagation.
    const MapNode& node = map_nodes_.at(map_id);
    sub.ref_offset = node.pose.inverse() * scan_nodes_.at(scan_id).pose;
    return sub.edges.back();
  }

  /// Extra scan-level edge (odometry between consecutive scans, window
  /// constraints). Both endpoints must already exist.
  const GraphEdge& add_subgraph_edge(int map_id, GraphEdge edge) {
    detail::validate_information(edge.information, "add_subgraph_edge");
    require_subgraph_endpoint(map_id, edge.a);
    require_subgraph_endpoint(map_id, edge.b);
    edge.kind = EdgeKind::scan_map;
    SubGraph& sub = subgraphs_.at(map_id);
    sub.edges.push_back(std::move(edge));
    return sub.edges.back();
  }

  /// Map-level edge between existing map nodes.
  const GraphEdge& add_map_edge(GraphEdge edge) {
    detail::validate_information(edge.information, "add_map_edge");
    if (!map_nodes_.count(edge.a) || !map_nodes_.count(edge.b)) {
      throw std::invalid_argument("add_map_edge: unknown endpoint");
    }
    edge.kind = EdgeKind::map_map;
    map_edges_.push_back(std::move(edge));
    return map_edges_.back();
  }

  bool maps_connected(int a, int b) const {
    for (const auto& edge : map_edges_) {
      if ((edge.a == a && edge.b == b) || (edge.a == b && edge.b == a)) return true;
    }
    return false;
  }

  /// Minimizes the sub-graph's edge residuals over its scan poses with the
  /// owning map node fixed as gauge.
  OptimizeReport optimize_subgraph(int map_id) {
    SubGraph& sub = subgraphs_.at(map_id);
    if (sub.edges.empty()) {
      throw std::invalid_argument("optimize_subgraph: sub-graph has no edge");
    }
    check_constrained(sub);

    std::unordered_map<int, Pose> poses;
    poses[map_id] = map_nodes_.at(map_id).pose;
    for (int id : sub.scan_ids) poses[id] = scan_nodes_.at(id).pose;
    detail::PoseProblem problem(sub.scan_ids, std::move(poses), sub.edges, 0.0);
    OptimizeReport report = problem.run(config_.step_tolerance, config_.max_iterations);
    for (int id : sub.scan_ids) scan_nodes_.at(id).pose = problem.pose(id);
    return report;
  }

  /// Minimizes map-edge residuals over map-node poses; the first map node is
  /// the gauge and a Huber kernel tempers outlier edges.
  OptimizeReport optimize_global() {
    if (map_edges_.empty()) {
      throw std::invalid_argument("optimize_global: no map edges");
    }
    check_map_connectivity();

    std::vector<int> variables(map_order_.begin() + 1, map_order_.end());
    std::unordered_map<int, Pose> poses;
    for (int id : map_order_) poses[id] = map_nodes_.at(id).pose;
    detail::PoseProblem problem(std::move(variables), std::move(poses), map_edges_,
                                config_.huber_delta);
    OptimizeReport report = problem.run(config_.step_tolerance, config_.max_iterations);
    for (int id : map_order_) map_nodes_.at(id).pose = problem.pose(id);
    return report;
  }

  /// Cross-level synchronization. Down phase: map nodes moved by global
  /// optimization rigidly carry their sub-graphs, marking refinement past the
  /// thresholds. Up phase: references moved by sub-graph optimization pull
  /// their map nodes along and mark global optimization. Running propagate
  /// again with no optimization in between triggers nothing.
  std::vector<PropagateAction> propagate() {
    std::vector<PropagateAction> actions;
    // Down.
    for (int map_id : map_order_) {
      SubGraph& sub = subgraphs_.at(map_id);
      MapNode& node = map_nodes_.at(map_id);
      const auto [dt, dr] = pose_delta(sub.synced_map_pose, node.pose);
      if (dt == 0.0 && dr == 0.0) continue;
      const Pose carry = node.pose * sub.synced_map_pose.inverse();
      for (int id : sub.scan_ids) {
        ScanNode& scan = scan_nodes_.at(id);
        scan.pose = carry * scan.pose;
      }
      sub.synced_map_pose = node.pose;
      actions.push_back({PropagateActionKind::carried_scans, map_id});
      if (dt > config_.propagate_translation || dr > config_.propagate_rotation) {
        sub.needs_refinement = true;
        actions.push_back({PropagateActionKind::marked_refinement, map_id});
      }
    }
    // Up.
    for (int map_id : map_order_) {
      SubGraph& sub = subgraphs_.at(map_id);
      if (sub.scan_ids.empty()) continue;
      MapNode& node = map_nodes_.at(map_id);
      const Pose expected_ref = node.pose * sub.ref_offset;
      const Pose& actual_ref = scan_nodes_.at(sub.reference_id()).pose;
      const auto [dt, dr] = pose_delta(expected_ref, actual_ref);
      if (dt > config_.propagate_translation || dr > config_.propagate_rotation) {
        node.pose = actual_ref * sub.ref_offset.inverse();
        sub.synced_map_pose = node.pose;
        actions.push_back({PropagateActionKind::map_pose_updated, map_id});
        global_needed_ = true;
        actions.push_back({PropagateActionKind::global_marked, map_id});
      }
    }
    return actions;
  }

  /// Samples a loop-closure partner for the reference map node, weighting
  /// closer nodes higher (Gaussian in distance, normalized over candidates).
  /// Already-connected pairs and the node itself are excluded.
  std::optional<int> loop_closure_candidate(int reference_id, std::uint64_t seed) const {
    const MapNode& reference = map_nodes_.at(reference_id);
    std::vector<int> candidates;
    std::vector<double> weights;
    double total = 0.0;
    for (int id : map_order_) {
      if (id == reference_id || maps_connected(reference_id, id)) continue;
      const double d = (map_nodes_.at(id).pose.translation - reference.pose.translation).norm();
      const double w =
          std::exp(-d * d / (2.0 * config_.loop_sigma * config_.loop_sigma));
      candidates.push_back(id);
      weights.push_back(w);
      total += w;
    }
    if (candidates.empty() || total <= 0.0) return std::nullopt;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double pick = u(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      acc += weights[i];
      if (pick <= acc) return candidates[i];
    }
    return candidates.back();
  }

  /// Registers map a onto map b and, on success, adds the map edge and marks
  /// global optimization. Returns the edge, or nullopt with a logged event.
  std::optional<GraphEdge> close_loop(int a, int b, const RegistrationConfig& reg = {}) {
    if (a == b) throw std::invalid_argument("close_loop: identical endpoints");
    const MapNode& node_a = map_nodes_.at(a);
    const MapNode& node_b = map_nodes_.at(b);
    const Pose prior = node_b.pose.inverse() * node_a.pose;
    const RegistrationResult result =
        register_map_to_map(*node_a.map, *node_b.map, prior, reg);
    if (!result.converged) {
      events_.push_back("close_loop " + std::to_string(a) + "->" + std::to_string(b) +
                        " failed: registration did not converge");
      return std::nullopt;
    }
    // result.transform maps a-frame content into b's frame, i.e. X_b^-1 X_a.
    GraphEdge edge;
    edge.kind = EdgeKind::map_map;
    edge.a = a;
    edge.b = b;
    edge.relative = result.transform.inverse();
    // (T exp(e))^-1 = T^-1 exp(-Adj(T) e): the inverse carries Adj(T).
    const Mat6 adj = adjoint(result.transform);
    const Mat6 cov = adj * result.covariance * adj.transpose();
    edge.information = invert_covariance(cov, "close_loop");
    add_map_edge(edge);
    global_needed_ = true;
    return map_edges_.back();
  }

  /// Plain-text snapshot of all nodes and edges.
  std::string snapshot() const {
    std::string out;
    for (int map_id : map_order_) {
      const MapNode& node = map_nodes_.at(map_id);
      out += "MAPNODE " + std::to_string(node.id) + " " + pose_fields(node.pose) + "\n";
    }
    for (int map_id : map_order_) {
      for (int id : subgraphs_.at(map_id).scan_ids) {
        const ScanNode& scan = scan_nodes_.at(id);
        out += "SCANNODE " + std::to_string(map_id) + " " + std::to_string(scan.id) + " " +
               format_double(scan.stamp) + " " + pose_fields(scan.pose) + "\n";
      }
    }
    for (const auto& edge : map_edges_) out += edge_line(edge, "P");
    for (int map_id : map_order_) {
      for (const auto& edge : subgraphs_.at(map_id).edges) out += edge_line(edge, "D");
    }
    return out;
  }

  /// Rebuilds a graph from snapshot text; serializing the result reproduces
  /// well-formed input byte for byte. Scan frames, map content, and window
  /// borrowings are not part of the snapshot; sync state is re-seeded as
  /// agreed at the stored poses.
  static HierGraph from_snapshot(const std::string& text,
                                 const GraphConfig& config = GraphConfig()) {
    HierGraph graph(config);
    std::istringstream stream(text);
    std::string line;
    std::unordered_map<int, int> scan_owner;
    int line_no = 0;
    const auto fail = [&](const std::string& what) {
      throw std::runtime_error("from_snapshot: " + what + " at line " +
                               std::to_string(line_no));
    };
    const auto read_pose = [&](std::istringstream& in) {
      Vec3 t;
      double qx, qy, qz, qw;
      if (!(in >> t.x() >> t.y() >> t.z() >> qx >> qy >> qz >> qw)) {
        fail("truncated pose fields");
      }
      return Pose(Eigen::Quaterniond(qw, qx, qy, qz), t);
    };
    while (std::getline(stream, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::istringstream in(line);
      std::string kind;
      in >> kind;
      if (kind == "MAPNODE") {
        MapNode node;
        if (!(in >> node.id)) fail("bad MAPNODE id");
        node.pose = read_pose(in);
        if (graph.map_nodes_.count(node.id)) fail("duplicate map node");
        SubGraph sub;
        sub.owner = node.id;
        sub.synced_map_pose = node.pose;
        graph.map_order_.push_back(node.id);
        graph.subgraphs_.emplace(node.id, std::move(sub));
        graph.next_node_id_ = std::max(graph.next_node_id_, node.id + 1);
        graph.map_nodes_.emplace(node.id, std::move(node));
      } else if (kind == "SCANNODE") {
        int map_id = -1;
        ScanNode scan;
        if (!(in >> map_id >> scan.id >> scan.stamp)) fail("bad SCANNODE fields");
        scan.pose = read_pose(in);
        if (!graph.subgraphs_.count(map_id)) fail("scan references unknown map node");
        if (graph.scan_nodes_.count(scan.id)) fail("duplicate scan node");
        graph.subgraphs_.at(map_id).scan_ids.push_back(scan.id);
        scan_owner[scan.id] = map_id;
        graph.next_node_id_ = std::max(graph.next_node_id_, scan.id + 1);
        graph.scan_nodes_.emplace(scan.id, std::move(scan));
      } else if (kind == "EDGE") {
        std::string tag;
        GraphEdge edge;
        if (!(in >> tag >> edge.a >> edge.b)) fail("bad EDGE fields");
        edge.relative = read_pose(in);
        for (int i = 0; i < 6; ++i) {
          for (int j = i; j < 6; ++j) {
            double v;
            if (!(in >> v)) fail("truncated EDGE information");
            edge.information(i, j) = v;
            edge.information(j, i) = v;
          }
        }
        detail::validate_information(edge.information, "from_snapshot");
        if (tag == "P") {
          edge.kind = EdgeKind::map_map;
          if (!graph.map_nodes_.count(edge.a) || !graph.map_nodes_.count(edge.b)) {
            fail("map edge references unknown node");
          }
          graph.map_edges_.push_back(edge);
        } else if (tag == "D") {
          edge.kind = EdgeKind::scan_map;
          const int owner = graph.subgraphs_.count(edge.a)
                                ? edge.a
                                : (scan_owner.count(edge.a) ? scan_owner.at(edge.a) : -1);
          if (owner < 0) fail("sub-graph edge references unknown node");
          try {
            graph.require_subgraph_endpoint(owner, edge.a);
            graph.require_subgraph_endpoint(owner, edge.b);
          } catch (const std::invalid_argument&) {
            fail("edge endpoint outside its owning sub-graph");
          }
          graph.subgraphs_.at(owner).edges.push_back(edge);
        } else {
          fail("unknown edge tag '" + tag + "'");
        }
      } else {
        fail("unknown record '" + kind + "'");
      }
    }
    for (auto& [map_id, sub] : graph.subgraphs_) {
      if (sub.scan_ids.empty()) continue;
      const int ref = sub.reference_id();
      if (!graph.scan_nodes_.count(ref)) fail("dangling reference scan");
      sub.ref_offset = graph.map_nodes_.at(map_id).pose.inverse() *
                       graph.scan_nodes_.at(ref).pose;
    }
    return graph;
  }

  static Mat6 invert_covariance(const Covariance6& covariance, const char* where) {
    if (!covariance.allFinite()) {
      throw std::invalid_argument(std::string(where) + ": covariance not finite");
    }
    const Eigen::FullPivLU<Mat6> lu(covariance);
    if (!lu.isInvertible()) {
      throw std::invalid_argument(std::string(where) + ": covariance is singular");
    }
    const Mat6 raw = lu.inverse();
    const Mat6 info = 0.5 * (raw + raw.transpose());
    detail::validate_information(info, where);
    return info;
  }

 private:
  static std::string pose_fields(const Pose& pose) {
    const Eigen::Quaterniond& q = pose.rotation;
    return format_double(pose.translation.x()) + " " + format_double(pose.translation.y()) +
           " " + format_double(pose.translation.z()) + " " + format_double(q.x()) + " " +
           format_double(q.y()) + " " + format_double(q.z()) + " " + format_double(q.w());
  }

  static std::string edge_line(const GraphEdge& edge, const char* kind) {
    std::string out = "EDGE ";
    out += kind;
    out += " " + std::to_string(edge.a) + " " + std::to_string(edge.b) + " " +
           pose_fields(edge.relative);
    for (int i = 0; i < 6; ++i) {
      for (int j = i; j < 6; ++j) out += " " + format_double(edge.information(i, j));
    }
    return out + "\n";
  }

  void require_subgraph_endpoint(int map_id, int id) const {
    if (id == map_id) return;
    const SubGraph& sub = subgraphs_.at(map_id);
    if (std::find(sub.scan_ids.begin(), sub.scan_ids.end(), id) == sub.scan_ids.end()) {
      throw std::invalid_argument("add_subgraph_edge: node " + std::to_string(id) +
                                  " not in sub-graph " + std::to_string(map_id));
    }
  }

  /// Every scan node must reach the gauge (owner) through edges.
  void check_constrained(const SubGraph& sub) const {
    std::unordered_set<int> reached{sub.owner};
    bool grew = true;
    while (grew) {
      grew = false;
      for (const auto& edge : sub.edges) {
        const bool has_a = reached.count(edge.a) > 0;
        const bool has_b = reached.count(edge.b) > 0;
        if (has_a != has_b) {
          reached.insert(has_a ? edge.b : edge.a);
          grew = true;
        }
      }
    }
    for (int id : sub.scan_ids) {
      if (!reached.count(id)) {
        throw std::invalid_argument("optimize_subgraph: node " + std::to_string(id) +
                                    " is unconstrained");
      }
    }
  }

  void check_map_connectivity() const {
    std::unordered_set<int> reached{map_order_.front()};
    bool grew = true;
    while (grew) {
      grew = false;
      for (const auto& edge : map_edges_) {
        const bool has_a = reached.count(edge.a) > 0;
        const bool has_b = reached.count(edge.b) > 0;
        if (has_a != has_b) {
          reached.insert(has_a ? edge.b : edge.a);
          grew = true;
        }
      }
    }
    for (int id : map_order_) {
      if (!reached.count(id)) {
        throw std::invalid_argument("optimize_global: map node " + std::to_string(id) +
                                    " disconnected from gauge");
      }
    }
  }

  GraphConfig config_;
  std::vector<int> map_order_;
  std::unordered_map<int, MapNode> map_nodes_;
  std::unordered_map<int, ScanNode> scan_nodes_;
  std::unordered_map<int, SubGraph> subgraphs_;
  std::vector<GraphEdge> map_edges_;
  int next_node_id_{0};
  bool global_needed_{false};
  std::vector<std::string> events_;
};

}  // namespace hicts
