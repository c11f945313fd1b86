#pragma once

#include <hicts/geometry.hpp>

#include <algorithm>
#include <limits>
#include <optional>
#include <vector>

namespace hicts {

/// Static 3-d tree over a point list. Queries return indices into the list
/// passed at construction. Ties and output order are index-deterministic.
class KdTree {
 public:
  KdTree() = default;

  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
    if (points_.empty()) return;
    std::vector<int> order(points_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    nodes_.reserve(points_.size());
    root_ = build(order, 0, static_cast<int>(order.size()), 0);
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

  /// Indices of all points with distance(q, p) <= r, ascending.
  std::vector<int> radius_indices(const Vec3& q, double r) const {
    std::vector<int> out;
    if (root_ >= 0) radius_recurse(root_, q, r * r, r, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Index of the closest point; equal distances break toward the smaller
  /// index. Empty tree yields nullopt.
  std::optional<int> nearest(const Vec3& q) const {
    if (root_ < 0) return std::nullopt;
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    nearest_recurse(root_, q, best, best_d2);
    return best;
  }

  /// Nearest neighbor within max_dist (inclusive), if any.
  std::optional<int> nearest_within(const Vec3& q, double max_dist) const {
    auto idx = nearest(q);
    if (!idx) return std::nullopt;
    if ((points_[*idx] - q).norm() > max_dist) return std::nullopt;
    return idx;
  }

 private:
  struct Node {
    int index;
    int axis;
    int left{-1};
    int right{-1};
  };

  int build(std::vector<int>& order, int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const int mid = lo + (hi - lo) / 2;
    std::nth_element(order.begin() + lo, order.begin() + mid, order.begin() + hi,
                     [&](int a, int b) {
                       const double ca = points_[a][axis];
                       const double cb = points_[b][axis];
                       return ca < cb || (ca == cb && a < b);
                     });
    const int node_id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{order[mid], axis});
    const int left = build(order, lo, mid, depth + 1);
    const int right = build(order, mid + 1, hi, depth + 1);
    nodes_[node_id].left = left;
    nodes_[node_id].right = right;
    return node_id;
  }

  void radius_recurse(int node_id, const Vec3& q, double r2, double r,
                      std::vector<int>& out) const {
    const Node& node = nodes_[node_id];
    const Vec3& p = points_[node.index];
    if ((p - q).squaredNorm() <= r2) out.push_back(node.index);
    const double diff = q[node.axis] - p[node.axis];
    if (diff <= r && node.left >= 0) radius_recurse(node.left, q, r2, r, out);
    if (diff >= -r && node.right >= 0) radius_recurse(node.right, q, r2, r, out);
  }

  void nearest_recurse(int node_id, const Vec3& q, int& best, double& best_d2) const {
    const Node& node = nodes_[node_id];
    const Vec3& p = points_[node.index];
    const double d2 = (p - q).squaredNorm();
    if (d2 < best_d2 || (d2 == best_d2 && node.index < best)) {
      best = node.index;
      best_d2 = d2;
    }
    const double diff = q[node.axis] - p[node.axis];
    const int near_child = diff < 0.0 ? node.left : node.right;
    const int far_child = diff < 0.0 ? node.right : node.left;
    if (near_child >= 0) nearest_recurse(near_child, q, best, best_d2);
    if (far_child >= 0 && diff * diff <= best_d2) nearest_recurse(far_child, q, best, best_d2);
  }

  std::vector<Vec3> points_;
  std::vector<Node> nodes_;
  int root_{-1};
};

}  // namespace hicts
