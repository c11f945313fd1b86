#pragma once

#include <hicts/geometry.hpp>
#include <hicts/kdtree.hpp>
#include <hicts/local_map.hpp>
#include <hicts/scan.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>
#include <vector>

namespace hicts {

struct RegistrationConfig {
  double sigma_floor{0.01};  // meters added in quadrature to every pair model
  double step_tolerance{1e-6};
  double cost_tolerance{1e-9};  // relative stagnation between accepted steps
  int max_iterations{50};  // 0 evaluates cost/covariance at the prior only
  double initial_damping{1e-4};
  double damping_increase{10.0};
  double damping_decrease{0.5};
  double association_radius_factor{2.0};  // gate = factor * cell size
};

struct RegistrationStep {
  double cost_before{0.0};
  double cost_after{0.0};
};

struct RegistrationResult {
  Pose transform;
  /// Covariance of the estimate over right-applied twists
  /// (truth = transform * exp(eps)); its inverse is an edge information
  /// matrix.
  Covariance6 covariance{Covariance6::Zero()};
  int iterations{0};
  int matched_pairs{0};
  bool converged{false};
  bool ill_conditioned{false};
  double final_cost{0.0};
  std::vector<RegistrationStep> steps;  // accepted damped steps, in order
};

/// Bins a frame's points at one cell size and keeps cells with enough points
/// for a covariance. Output is ordered by cell index.
inline std::vector<Surfel> make_surfel_cloud(const ScanFrame& frame, double cell_size) {
  if (frame.lines.empty()) throw std::invalid_argument("make_surfel_cloud: empty frame");
  if (!(cell_size > 0.0)) throw std::invalid_argument("make_surfel_cloud: bad cell size");
  std::unordered_map<CellIndex, Cell, CellIndexHash> cells;
  for (const auto& line : frame.lines) {
    for (const Vec3& p : line.points) {
      Cell& cell = cells[CellIndex{static_cast<int>(std::floor(p.x() / cell_size)),
                                   static_cast<int>(std::floor(p.y() / cell_size)),
                                   static_cast<int>(std::floor(p.z() / cell_size))}];
      cell.count += 1;
      cell.s1 += p;
      cell.s2 += p * p.transpose();
    }
  }
  std::vector<CellIndex> keys;
  keys.reserve(cells.size());
  for (const auto& [index, cell] : cells) {
    if (cell.count >= 3) keys.push_back(index);
  }
  std::sort(keys.begin(), keys.end(), cell_index_less);
  std::vector<Surfel> out;
  out.reserve(keys.size());
  for (const CellIndex& key : keys) out.push_back(cells.at(key).surfel());
  return out;
}

namespace detail {

struct PairTerm {
  int source_index;
  int target_index;
};

inline std::vector<PairTerm> associate(const std::vector<Surfel>& source, const KdTree& targets,
                                       const Pose& pose, double gate) {
  std::vector<PairTerm> pairs;
  pairs.reserve(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto j = targets.nearest_within(pose * source[i].mean, gate);
    if (j) pairs.push_back(PairTerm{static_cast<int>(i), *j});
  }
  return pairs;
}

struct CostTerms {
  double cost{0.0};
  Mat6 hessian{Mat6::Zero()};
  Vec6 gradient{Vec6::Zero()};
};

/// Squared Mahalanobis cost of pairs under pose, with Gauss-Newton
/// linearization against a left-applied twist (pose <- exp(d) * pose).
inline CostTerms evaluate_pairs(const std::vector<Surfel>& source,
                                const std::vector<Surfel>& target,
                                const std::vector<PairTerm>& pairs, const Pose& pose,
                                double sigma_floor, bool with_derivatives) {
  CostTerms terms;
  const Mat3 r = pose.rotation_matrix();
  const Mat3 floor_term = sigma_floor * sigma_floor * Mat3::Identity();
  for (const PairTerm& pair : pairs) {
    const Surfel& s = source[pair.source_index];
    const Surfel& t = target[pair.target_index];
    const Vec3 p = pose * s.mean;
    const Vec3 residual = t.mean - p;
    const Mat3 combined = t.covariance + r * s.covariance * r.transpose() + floor_term;
    const Mat3 weight = combined.inverse();
    terms.cost += residual.dot(weight * residual);
    if (!with_derivatives) continue;
    Eigen::Matrix<double, 3, 6> jac;
    jac.leftCols<3>() = skew(p);
    jac.rightCols<3>() = -Mat3::Identity();
    terms.hessian += jac.transpose() * weight * jac;
    terms.gradient += jac.transpose() * weight * residual;
  }
  return terms;
}

inline RegistrationResult finalize(const std::vector<Surfel>& source,
                                   const std::vector<Surfel>& target, const KdTree& targets,
                                   const Pose& pose, double gate,
                                   const RegistrationConfig& config, RegistrationResult result) {
  const std::vector<PairTerm> pairs = associate(source, targets, pose, gate);
  result.transform = pose;
  result.matched_pairs = static_cast<int>(pairs.size());
  if (pairs.empty()) {
    result.converged = false;
    return result;
  }
  const CostTerms terms = evaluate_pairs(source, target, pairs, pose, config.sigma_floor, true);
  result.final_cost = terms.cost;

  Eigen::SelfAdjointEigenSolver<Mat6> eig(terms.hessian);
  const Vec6 eigenvalues = eig.eigenvalues();
  const double lambda_max = eigenvalues.maxCoeff();
  if (!(lambda_max > 0.0)) {
    result.ill_conditioned = true;
    result.converged = false;
    return result;
  }
  const double floor = lambda_max * 1e-9;
  result.ill_conditioned = eigenvalues.minCoeff() < floor;
  const double scale = std::max(terms.cost / static_cast<double>(pairs.size()), 1e-12);
  Vec6 inv;
  for (int i = 0; i < 6; ++i) inv[i] = scale / std::max(eigenvalues[i], floor);
  const Mat6 left_cov = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
  // The solver perturbs on the left (target frame); edges consume a
  // relative-frame covariance, so conjugate it across.
  const Mat6 adj = adjoint(pose.inverse());
  const Mat6 right_cov = adj * left_cov * adj.transpose();
  result.covariance = 0.5 * (right_cov + right_cov.transpose());
  return result;
}

}  // namespace detail

/// Aligns source surfels onto target surfels starting from prior, by damped
/// Gauss-Newton on the twist. cell_size fixes the association gate.
inline RegistrationResult register_surfels(const std::vector<Surfel>& source,
                                           const std::vector<Surfel>& target, const Pose& prior,
                                           double cell_size,
                                           const RegistrationConfig& config = {}) {
  if (source.empty() || target.empty()) {
    throw std::invalid_argument("register_surfels: empty surfel list");
  }
  if (!(cell_size > 0.0)) throw std::invalid_argument("register_surfels: bad cell size");

  std::vector<Vec3> target_means;
  target_means.reserve(target.size());
  for (const auto& t : target) target_means.push_back(t.mean);
  const KdTree targets(std::move(target_means));
  const double gate = config.association_radius_factor * cell_size;

  RegistrationResult result;
  Pose pose = prior;
  double damping = config.initial_damping;
  // Re-association can cycle between basins; keep the pose with the best
  // per-pair cost seen at iteration start and stop once no new best appears.
  double best_cost = std::numeric_limits<double>::infinity();
  Pose best_pose = prior;
  int stalled = 0;

  for (int iter = 0; iter < config.max_iterations; ++iter) {
    const std::vector<detail::PairTerm> pairs = detail::associate(source, targets, pose, gate);
    if (pairs.empty()) break;
    result.iterations = iter + 1;
    const detail::CostTerms terms =
        detail::evaluate_pairs(source, target, pairs, pose, config.sigma_floor, true);
    const double normalized = terms.cost / static_cast<double>(pairs.size());
    if (normalized < best_cost * (1.0 - config.cost_tolerance)) {
      best_cost = normalized;
      best_pose = pose;
      stalled = 0;
    } else if (++stalled >= 3) {
      pose = best_pose;
      result.converged = true;
      break;
    }

    Vec6 damping_diag = terms.hessian.diagonal().cwiseMax(1e-12);
    bool stepped = false;
    for (int attempt = 0; attempt < 40; ++attempt) {
      const Mat6 damped = terms.hessian + damping * Mat6(damping_diag.asDiagonal());
      const Vec6 delta = damped.ldlt().solve(Vec6(-terms.gradient));
      if (!delta.allFinite()) {
        damping *= config.damping_increase;
        continue;
      }
      const Pose candidate = exp_map(Twist::from_vector(delta)) * pose;
      const double candidate_cost =
          detail::evaluate_pairs(source, target, pairs, candidate, config.sigma_floor, false)
              .cost;
      if (candidate_cost < terms.cost) {
        result.steps.push_back(RegistrationStep{terms.cost, candidate_cost});
        pose = candidate;
        damping = std::max(damping * config.damping_decrease, 1e-12);
        stepped = true;
        if (delta.norm() < config.step_tolerance ||
            terms.cost - candidate_cost < config.cost_tolerance * std::max(terms.cost, 1.0)) {
          // Association churn keeps producing microscopic accepted steps near
          // the optimum; a stagnant cost is as terminal as a vanishing step.
          result.converged = true;
        }
        break;
      }
      if (delta.norm() < config.step_tolerance) {
        // At a local optimum within resolution; stay put.
        result.converged = true;
        break;
      }
      damping *= config.damping_increase;
    }
    if (result.converged || !stepped) break;
  }
  if (!result.converged && std::isfinite(best_cost)) pose = best_pose;

  if (config.max_iterations == 0) {
    // Evaluation mode: report cost and covariance at the prior.
    RegistrationResult evaluated = detail::finalize(source, target, targets, pose, gate, config,
                                                    std::move(result));
    evaluated.converged = evaluated.matched_pairs > 0;
    return evaluated;
  }
  return detail::finalize(source, target, targets, pose, gate, config, std::move(result));
}

/// Coarse-to-fine alignment of a scan against a local map. Levels without
/// surfels on either side are skipped; the returned result is the finest
/// level that had associations.
inline RegistrationResult register_scan_to_map(const ScanFrame& frame, const MultiresMap& map,
                                               const Pose& prior,
                                               const RegistrationConfig& config = {}) {
  RegistrationResult best;
  best.transform = prior;
  Pose estimate = prior;
  bool any = false;
  for (int level = map.levels() - 1; level >= 0; --level) {
    const std::vector<SurfelEntry> entries = map.query_surfels(level);
    if (entries.empty()) continue;
    std::vector<Surfel> target;
    target.reserve(entries.size());
    for (const auto& e : entries) target.push_back(e.surfel);
    const std::vector<Surfel> source = make_surfel_cloud(frame, map.cell_size(level));
    if (source.empty()) continue;
    const RegistrationResult result =
        register_surfels(source, target, estimate, map.cell_size(level), config);
    if (result.matched_pairs == 0) continue;
    estimate = result.transform;
    best = result;
    any = true;
  }
  if (!any) {
    best.converged = false;
    best.matched_pairs = 0;
  }
  return best;
}

/// Level-by-level alignment of one local map onto another, coarse to fine.
/// The transform maps points in a's frame to b's frame.
inline RegistrationResult register_map_to_map(const MultiresMap& a, const MultiresMap& b,
                                              const Pose& prior,
                                              const RegistrationConfig& config = {}) {
  RegistrationResult best;
  best.transform = prior;
  Pose estimate = prior;
  bool any = false;
  const int levels = std::min(a.levels(), b.levels());
  for (int level = levels - 1; level >= 0; --level) {
    std::vector<Surfel> source, target;
    for (const auto& e : a.query_surfels(level)) source.push_back(e.surfel);
    for (const auto& e : b.query_surfels(level)) target.push_back(e.surfel);
    if (source.empty() || target.empty()) continue;
    const RegistrationResult result =
        register_surfels(source, target, estimate, a.cell_size(level), config);
    if (result.matched_pairs == 0) continue;
    estimate = result.transform;
    best = result;
    any = true;
  }
  if (!any) {
    best.converged = false;
    best.matched_pairs = 0;
  }
  return best;
}

}  // namespace hicts
