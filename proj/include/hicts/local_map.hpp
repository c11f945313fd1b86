#pragma once

#include <hicts/geometry.hpp>
#include <hicts/ply.hpp>
#include <hicts/scan.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace hicts {

struct MapConfig {
  double base_cell_size{0.25};   // finest level, meters
  int levels{4};                 // level l has cell size base * 2^l
  double base_half_extent{4.0};  // finest level window half width; doubles per level
  std::size_t cell_capacity{100};
  std::size_t scan_ring_capacity{20};
  double log_odds_hit{0.85};
  double log_odds_miss{-0.4};
  double log_odds_min{-2.0};
  double log_odds_max{3.5};
};

/// Second-moment summary of the points attributed to one cell.
struct Surfel {
  std::int64_t count{0};
  Vec3 mean{Vec3::Zero()};
  Mat3 covariance{Mat3::Zero()};  // unbiased; meaningful once count >= 3
};

struct CellIndex {
  int x{0}, y{0}, z{0};
  bool operator==(const CellIndex&) const = default;
};

struct CellIndexHash {
  std::size_t operator()(const CellIndex& c) const {
    std::size_t h = static_cast<std::size_t>(c.x) * 73856093u;
    h ^= static_cast<std::size_t>(c.y) * 19349669u;
    h ^= static_cast<std::size_t>(c.z) * 83492791u;
    return h;
  }
};

inline bool cell_index_less(const CellIndex& a, const CellIndex& b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  return a.z < b.z;
}

struct StoredPoint {
  Vec3 position;  // map frame
  int scan_index;
};

/// One occupancy + surfel cell. Moment sums run over exactly the points held
/// in the deque, so batch recomputation always reproduces them.
struct Cell {
  double log_odds{0.0};
  std::deque<StoredPoint> points;
  std::int64_t count{0};
  Vec3 s1{Vec3::Zero()};
  Mat3 s2{Mat3::Zero()};

  void add_point(const Vec3& p, int scan_index, std::size_t capacity) {
    points.push_back(StoredPoint{p, scan_index});
    if (points.size() > capacity) {
      points.pop_front();
      recompute_moments();
    } else {
      count += 1;
      s1 += p;
      s2 += p * p.transpose();
    }
  }

  /// Drops every point of the given scan. Returns true if anything changed.
  bool remove_scan(int scan_index) {
    const std::size_t before = points.size();
    std::erase_if(points, [&](const StoredPoint& sp) { return sp.scan_index == scan_index; });
    if (points.size() == before) return false;
    recompute_moments();
    return true;
  }

  void recompute_moments() {
    count = static_cast<std::int64_t>(points.size());
    s1.setZero();
    s2.setZero();
    for (const auto& sp : points) {
      s1 += sp.position;
      s2 += sp.position * sp.position.transpose();
    }
  }

  bool has_surfel() const { return count >= 3; }

  Surfel surfel() const {
    Surfel s;
    s.count = count;
    if (count == 0) return s;
    const double n = static_cast<double>(count);
    s.mean = s1 / n;
    if (count >= 2) {
      s.covariance = (s2 - s1 * s1.transpose() / n) / (n - 1.0);
    }
    return s;
  }
};

struct SurfelEntry {
  CellIndex index;
  Vec3 center;  // cell center, map frame
  Surfel surfel;
};

struct InsertStats {
  std::vector<std::size_t> binned_per_level;
  std::size_t dropped{0};  // outside the coarsest window
};

/// Robot-centric sparse multiresolution grid. Cells live on a fixed world
/// lattice per level; the map is the lattice window around the current
/// center, so recentering moves the window instead of rewriting content.
class MultiresMap {
 public:
  explicit MultiresMap(const MapConfig& config = MapConfig(),
                       const Pose& center = Pose::identity())
      : config_(config), center_(center) {
    if (config_.levels < 1) throw std::invalid_argument("MultiresMap: need at least one level");
    grids_.resize(config_.levels);
  }

  const MapConfig& config() const { return config_; }
  const Pose& center() const { return center_; }
  int levels() const { return config_.levels; }
  double cell_size(int level) const {
    return config_.base_cell_size * static_cast<double>(1 << level);
  }
  double half_extent(int level) const {
    return config_.base_half_extent * static_cast<double>(1 << level);
  }
  const std::vector<int>& scan_ring() const { return scan_ring_; }

  CellIndex cell_of(int level, const Vec3& p) const {
    const double cs = cell_size(level);
    return CellIndex{static_cast<int>(std::floor(p.x() / cs)),
                     static_cast<int>(std::floor(p.y() / cs)),
                     static_cast<int>(std::floor(p.z() / cs))};
  }

  Vec3 cell_center(int level, const CellIndex& c) const {
    const double cs = cell_size(level);
    return Vec3((c.x + 0.5) * cs, (c.y + 0.5) * cs, (c.z + 0.5) * cs);
  }

  /// Lattice window of the level: cell indices in [lo, lo + span) per axis.
  bool in_window(int level, const CellIndex& c) const {
    const CellIndex lo = window_lo(level);
    const int span = window_span(level);
    return c.x >= lo.x && c.x < lo.x + span && c.y >= lo.y && c.y < lo.y + span && c.z >= lo.z &&
           c.z < lo.z + span;
  }

  bool contains(int level, const Vec3& p) const { return in_window(level, cell_of(level, p)); }

  /// Adds a registered scan: each point, expressed in the map frame through
  /// pose, lands in every level whose window contains it. A new scan index
  /// beyond the ring capacity evicts the oldest scan first.
  InsertStats insert_scan(const ScanFrame& frame, const Pose& pose, int scan_index) {
    if (!pose.translation.allFinite() || !pose.rotation.coeffs().allFinite()) {
      throw std::invalid_argument("insert_scan: non-finite pose");
    }
    if (frame.lines.empty()) throw std::invalid_argument("insert_scan: empty frame");

    if (std::find(scan_ring_.begin(), scan_ring_.end(), scan_index) == scan_ring_.end()) {
      if (scan_ring_.size() >= config_.scan_ring_capacity) {
        remove_scan(scan_ring_.front());
      }
      scan_ring_.push_back(scan_index);
    }

    InsertStats stats;
    stats.binned_per_level.assign(config_.levels, 0);
    for (const auto& line : frame.lines) {
      for (const Vec3& raw : line.points) {
        const Vec3 p = pose * raw;
        bool anywhere = false;
        for (int level = 0; level < config_.levels; ++level) {
          const CellIndex c = cell_of(level, p);
          if (!in_window(level, c)) continue;
          grids_[level][c].add_point(p, scan_index, config_.cell_capacity);
          ++stats.binned_per_level[level];
          anywhere = true;
        }
        if (!anywhere) ++stats.dropped;
      }
    }
    return stats;
  }

  /// Ray-based occupancy on the coarsest level (finer levels keep surfels
  /// only). The frame must already be in the map frame. Cells crossed by any
  /// ray take one miss update, endpoint cells one hit update; a cell that is
  /// both hit and crossed counts as hit.
  void update_occupancy(const ScanFrame& frame, const Pose& sensor_origin) {
    const int level = config_.levels - 1;
    const Vec3 origin = sensor_origin.translation;
    std::unordered_set<CellIndex, CellIndexHash> hit_cells;
    std::unordered_set<CellIndex, CellIndexHash> miss_cells;
    for (const auto& line : frame.lines) {
      for (const Vec3& p : line.points) {
        const CellIndex end = cell_of(level, p);
        hit_cells.insert(end);
        traverse_ray(level, origin, p, end, miss_cells);
      }
    }
    for (const auto& c : hit_cells) {
      if (in_window(level, c)) apply_log_odds(c, config_.log_odds_hit);
    }
    for (const auto& c : miss_cells) {
      if (hit_cells.count(c)) continue;
      if (in_window(level, c)) apply_log_odds(c, config_.log_odds_miss);
    }
  }

  /// All cells at the level whose surfel is valid (count >= 3), ordered by
  /// cell index.
  std::vector<SurfelEntry> query_surfels(int level) const {
    if (level < 0 || level >= config_.levels) {
      throw std::invalid_argument("query_surfels: level out of range");
    }
    std::vector<SurfelEntry> out;
    out.reserve(grids_[level].size());
    for (const auto& [index, cell] : grids_[level]) {
      if (!cell.has_surfel()) continue;
      out.push_back(SurfelEntry{index, cell_center(level, index), cell.surfel()});
    }
    std::sort(out.begin(), out.end(),
              [](const SurfelEntry& a, const SurfelEntry& b) {
                return cell_index_less(a.index, b.index);
              });
    return out;
  }

  /// Moves the window to the new center; content on the lattice is kept
  /// where still covered and discarded where the window moved away.
  void recenter(const Pose& new_center) {
    center_ = new_center;
    for (int level = 0; level < config_.levels; ++level) {
      auto& grid = grids_[level];
      for (auto it = grid.begin(); it != grid.end();) {
        if (!in_window(level, it->first)) {
          it = grid.erase(it);
        } else {
          ++it;
        }
      }
    }
  }

  void remove_scan(int scan_index) {
    for (auto& grid : grids_) {
      for (auto it = grid.begin(); it != grid.end();) {
        it->second.remove_scan(scan_index);
        if (it->second.points.empty() && it->second.log_odds == 0.0) {
          it = grid.erase(it);
        } else {
          ++it;
        }
      }
    }
    std::erase(scan_ring_, scan_index);
  }

  /// Export for evaluation: each stored point once, taken from the finest
  /// level whose window contains it, ordered by level, cell, then insertion.
  PlyCloud export_points() const {
    PlyCloud cloud;
    for (int level = 0; level < config_.levels; ++level) {
      std::vector<CellIndex> keys;
      keys.reserve(grids_[level].size());
      for (const auto& [index, cell] : grids_[level]) keys.push_back(index);
      std::sort(keys.begin(), keys.end(), cell_index_less);
      for (const CellIndex& key : keys) {
        const Cell& cell = grids_[level].at(key);
        for (const auto& sp : cell.points) {
          bool finer_holds_it = false;
          for (int finer = 0; finer < level && !finer_holds_it; ++finer) {
            const Cell* fc = find_cell(finer, cell_of(finer, sp.position));
            if (!fc) continue;
            for (const auto& fsp : fc->points) {
              if (fsp.scan_index == sp.scan_index && fsp.position == sp.position) {
                finer_holds_it = true;
                break;
              }
            }
          }
          if (finer_holds_it) continue;
          cloud.points.push_back(sp.position);
          cloud.scan_indices.push_back(sp.scan_index);
        }
      }
    }
    return cloud;
  }

  std::size_t total_stored_points() const {
    std::size_t n = 0;
    for (const auto& grid : grids_) {
      for (const auto& [index, cell] : grid) n += cell.points.size();
    }
    return n;
  }

  const Cell* find_cell(int level, const CellIndex& c) const {
    const auto it = grids_[level].find(c);
    return it == grids_[level].end() ? nullptr : &it->second;
  }

  double log_odds_at(int level, const Vec3& p) const {
    const Cell* cell = find_cell(level, cell_of(level, p));
    return cell ? cell->log_odds : 0.0;
  }

 private:
  CellIndex window_lo(int level) const {
    const double cs = cell_size(level);
    const int span = window_span(level);
    const Vec3& t = center_.translation;
    return CellIndex{static_cast<int>(std::floor(t.x() / cs)) - span / 2,
                     static_cast<int>(std::floor(t.y() / cs)) - span / 2,
                     static_cast<int>(std::floor(t.z() / cs)) - span / 2};
  }

  int window_span(int level) const {
    // Window width in cells; identical at every level because the extent and
    // the cell size both double.
    (void)level;
    return std::max(1, static_cast<int>(std::round(2.0 * config_.base_half_extent /
                                                   config_.base_cell_size)));
  }

  void apply_log_odds(const CellIndex& c, double delta) {
    const int level = config_.levels - 1;
    Cell& cell = grids_[level][c];
    cell.log_odds =
        std::clamp(cell.log_odds + delta, config_.log_odds_min, config_.log_odds_max);
  }

  /// Amanatides-Woo voxel walk from origin to endpoint, recording crossed
  /// cells (endpoint excluded) into out.
  void traverse_ray(int level, const Vec3& origin, const Vec3& end, const CellIndex& end_cell,
                    std::unordered_set<CellIndex, CellIndexHash>& out) const {
    const double cs = cell_size(level);
    CellIndex v = cell_of(level, origin);
    if (v == end_cell) return;
    const Vec3 dir = end - origin;

    std::array<int, 3> step{};
    Vec3 t_max, t_delta;
    for (int i = 0; i < 3; ++i) {
      if (dir[i] > 0.0) {
        step[i] = 1;
        const double boundary = (std::floor(origin[i] / cs) + 1.0) * cs;
        t_max[i] = (boundary - origin[i]) / dir[i];
        t_delta[i] = cs / dir[i];
      } else if (dir[i] < 0.0) {
        step[i] = -1;
        const double boundary = std::floor(origin[i] / cs) * cs;
        t_max[i] = (boundary - origin[i]) / dir[i];
        t_delta[i] = cs / -dir[i];
      } else {
        step[i] = 0;
        t_max[i] = std::numeric_limits<double>::infinity();
        t_delta[i] = std::numeric_limits<double>::infinity();
      }
    }

    // Hard bound: a segment can cross at most the Manhattan cell distance.
    int guard = std::abs(end_cell.x - v.x) + std::abs(end_cell.y - v.y) +
                std::abs(end_cell.z - v.z) + 3;
    while (guard-- > 0) {
      out.insert(v);
      int axis = 0;
      if (t_max[1] < t_max[axis]) axis = 1;
      if (t_max[2] < t_max[axis]) axis = 2;
      if (axis == 0) v.x += step[0];
      if (axis == 1) v.y += step[1];
      if (axis == 2) v.z += step[2];
      t_max[axis] += t_delta[axis];
      if (v == end_cell) return;
      // Numerical safety: past the endpoint without landing in its cell.
      if (t_max.minCoeff() > 1.0) return;
    }
  }

  MapConfig config_;
  Pose center_;
  std::vector<std::unordered_map<CellIndex, Cell, CellIndexHash>> grids_;
  std::vector<int> scan_ring_;  // insertion order, oldest first
};

}  // namespace hicts
