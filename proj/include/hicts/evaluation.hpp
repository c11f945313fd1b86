#pragma once

#include <hicts/geometry.hpp>
#include <hicts/io_util.hpp>
#include <hicts/kdtree.hpp>

#include <cmath>
#include <optional>
#include <thread>
#include <vector>

namespace hicts {

/// Map-quality summary: mean differential entropy of local point
/// neighborhoods. Lower means crisper structure.
struct MmeReport {
  double mme{0.0};
  std::size_t evaluated_points{0};
  std::size_t skipped_points{0};
  double radius{0.0};
};

inline constexpr double kMmeDefaultRadius = 0.5;
inline constexpr int kMmeMinNeighbors = 10;
inline constexpr double kMmeDetFloor = 1e-30;

/// Entropy of the Gaussian fitted to all cloud points within r of q
/// (inclusive; q's own entry counts when q is a cloud point):
/// h = 1/2 ln((2 pi e)^3 det(Sigma)), with unbiased sample covariance.
/// Returns nullopt when fewer than min_neighbors points fall in the ball or
/// the covariance determinant underflows the floor.
inline std::optional<double> point_entropy(const std::vector<Vec3>& cloud, const KdTree& index,
                                           const Vec3& q, double r,
                                           int min_neighbors = kMmeMinNeighbors) {
  if (!(r > 0.0)) throw std::invalid_argument("point_entropy: radius must be positive");
  const std::vector<int> nb = index.radius_indices(q, r);
  if (static_cast<int>(nb.size()) < min_neighbors) return std::nullopt;

  Vec3 mean = Vec3::Zero();
  for (int i : nb) mean += cloud[i];
  mean /= static_cast<double>(nb.size());
  Mat3 scatter = Mat3::Zero();
  for (int i : nb) {
    const Vec3 d = cloud[i] - mean;
    scatter += d * d.transpose();
  }
  const Mat3 cov = scatter / static_cast<double>(nb.size() - 1);
  const double det = cov.determinant();
  if (det < kMmeDetFloor) return std::nullopt;
  constexpr double two_pi_e = 2.0 * M_PI * M_E;
  return 0.5 * std::log(two_pi_e * two_pi_e * two_pi_e * det);
}

/// Mean of point_entropy over every cloud point with an evaluable
/// neighborhood. Per-point entropies are independent; with threads > 1 they
/// are computed in index chunks and reduced serially in index order, so the
/// result does not depend on the thread count.
inline MmeReport mean_map_entropy(const std::vector<Vec3>& cloud, double r = kMmeDefaultRadius,
                                  int min_neighbors = kMmeMinNeighbors, int threads = 1) {
  if (cloud.empty()) throw std::invalid_argument("mean_map_entropy: empty cloud");
  if (!(r > 0.0)) throw std::invalid_argument("mean_map_entropy: radius must be positive");
  const KdTree index(cloud);

  std::vector<std::optional<double>> entropies(cloud.size());
  const auto worker = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      entropies[i] = point_entropy(cloud, index, cloud[i], r, min_neighbors);
    }
  };
  const int n_threads = std::max(1, threads);
  if (n_threads == 1 || cloud.size() < 2 * static_cast<std::size_t>(n_threads)) {
    worker(0, cloud.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (cloud.size() + n_threads - 1) / n_threads;
    for (int t = 0; t < n_threads; ++t) {
      const std::size_t begin = t * chunk;
      const std::size_t end = std::min(cloud.size(), begin + chunk);
      if (begin >= end) break;
      pool.emplace_back(worker, begin, end);
    }
    for (auto& th : pool) th.join();
  }

  MmeReport report;
  report.radius = r;
  double sum = 0.0;
  for (const auto& h : entropies) {
    if (h) {
      sum += *h;
      ++report.evaluated_points;
    } else {
      ++report.skipped_points;
    }
  }
  if (report.evaluated_points == 0) {
    throw std::runtime_error("mean_map_entropy: no evaluable points");
  }
  report.mme = sum / static_cast<double>(report.evaluated_points);
  return report;
}

/// Plain-text report form consumed by downstream tooling.
inline std::string mme_report_to_string(const MmeReport& report) {
  std::string out = "{";
  out += "\"mme\": " + format_double(report.mme);
  out += ", \"evaluated\": " + std::to_string(report.evaluated_points);
  out += ", \"skipped\": " + std::to_string(report.skipped_points);
  out += ", \"radius\": " + format_double(report.radius);
  out += "}\n";
  return out;
}

}  // namespace hicts
