#include <hicts/trajectory.hpp>

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <sstream>
#include <vector>

using namespace hicts;

namespace {

std::vector<Timestamp> uniform_stamps(std::size_t n, double spacing = 1.0, double start = 0.0) {
  std::vector<Timestamp> stamps;
  for (std::size_t i = 0; i < n; ++i) stamps.push_back(start + spacing * static_cast<double>(i));
  return stamps;
}

std::vector<Pose> x_line_controls(const std::vector<double>& xs) {
  std::vector<Pose> poses;
  for (double x : xs) poses.emplace_back(Eigen::Quaterniond::Identity(), Vec3(x, 0.0, 0.0));
  return poses;
}

ScanNode scan_with_lines(const Pose& pose, double stamp,
                         const std::vector<double>& line_stamps) {
  std::vector<ScanLine> lines;
  for (double s : line_stamps) {
    ScanLine line;
    line.stamp = s;
    line.points = {Vec3(1.0, 0.0, 0.0)};
    lines.push_back(line);
  }
  ScanNode node;
  node.pose = pose;
  node.stamp = stamp;
  node.frame = std::make_shared<const ScanFrame>(assemble_scan(lines));
  return node;
}

RegistrationResult ok_result(const Pose& transform) {
  RegistrationResult result;
  result.transform = transform;
  result.covariance = Covariance6::Identity();
  result.converged = true;
  result.matched_pairs = 10;
  return result;
}

}  // namespace

TEST_CASE("spline construction checks size and uniformity", "[trajectory]") {
  const auto poses = x_line_controls({0.0, 1.0, 2.0, 3.0});
  const TrajectorySpline spline = build_spline(poses, uniform_stamps(4));
  CHECK(spline.valid_begin() == 1.0);
  CHECK(spline.valid_end() == 2.0);
  CHECK(spline.covers(1.0));
  CHECK(spline.covers(1.999));
  CHECK_FALSE(spline.covers(2.0));
  CHECK_FALSE(spline.covers(0.999));

  CHECK_THROWS_AS(build_spline(x_line_controls({0.0, 1.0, 2.0}), uniform_stamps(3)),
                  std::invalid_argument);
  CHECK_THROWS_AS(build_spline(poses, {0.0, 1.1, 2.0, 3.05}), std::invalid_argument);
  CHECK_THROWS_AS(build_spline(poses, {0.0, 1.0, 1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(build_spline(poses, uniform_stamps(3)), std::invalid_argument);

  // 1% relative jitter stays within tolerance.
  CHECK_NOTHROW(build_spline(poses, {0.0, 1.005, 2.0, 3.0}));
}

TEST_CASE("identical control poses give a constant trajectory", "[trajectory]") {
  auto rng = oracles::seeded_rng(3);
  const Pose fixed = oracles::random_pose(rng);
  const std::vector<Pose> poses(6, fixed);
  const TrajectorySpline spline = build_spline(poses, uniform_stamps(6, 0.5));
  for (double t = 0.5; t < 2.0; t += 0.07) {
    const auto [dt, dr] = pose_delta(evaluate(spline, t), fixed);
    CHECK(dt < 1e-12);
    CHECK(dr < 1e-12);
  }
  CHECK_THROWS_AS(evaluate(spline, 0.49), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(spline, 2.0), std::invalid_argument);
}

TEST_CASE("cumulative basis matches the de Boor partial sums", "[trajectory]") {
  // Pinned values at the interval midpoint.
  const Vec3 mid = detail::cumulative_cubic_basis(0.5);
  CHECK(std::abs(mid[0] - 5.875 / 6.0) < 1e-15);
  CHECK(std::abs(mid[1] - 0.5) < 1e-15);
  CHECK(std::abs(mid[2] - 0.125 / 6.0) < 1e-15);

  // At u = 0 the blend of controls (i-1 .. i+2) is (1/6, 4/6, 1/6, 0),
  // i.e. cumulative (5/6, 1/6, 0).
  const Vec3 at_zero = detail::cumulative_cubic_basis(0.0);
  CHECK(std::abs(at_zero[0] - 5.0 / 6.0) < 1e-15);
  CHECK(std::abs(at_zero[1] - 1.0 / 6.0) < 1e-15);
  CHECK(std::abs(at_zero[2]) < 1e-15);

  auto rng = oracles::seeded_rng(11);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int k = 0; k < 100; ++k) {
    const double u = u01(rng);
    const Vec3 mine = detail::cumulative_cubic_basis(u);
    const Eigen::Vector3d ref = oracles::cumulative_cubic_basis_deboor(u);
    CHECK((mine - ref).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("uniform x translations blend to 1.5 m at the midpoint", "[trajectory]") {
  const TrajectorySpline spline =
      build_spline(x_line_controls({0.0, 1.0, 2.0, 3.0}), uniform_stamps(4));
  const Pose mid = evaluate(spline, 1.5);
  CHECK(std::abs(mid.translation.x() - 1.5) < 1e-12);
  CHECK(std::abs(mid.translation.y()) < 1e-15);
  CHECK(mid.rotation_angle() < 1e-15);
}

TEST_CASE("translation-only splines match a de Boor evaluation", "[trajectory]") {
  auto rng = oracles::seeded_rng(21);
  std::uniform_real_distribution<double> coord(-5.0, 5.0);
  std::vector<Pose> poses;
  std::vector<Vec3> controls;
  for (int i = 0; i < 8; ++i) {
    const Vec3 c(coord(rng), coord(rng), coord(rng));
    controls.push_back(c);
    poses.emplace_back(Eigen::Quaterniond::Identity(), c);
  }
  const TrajectorySpline spline = build_spline(poses, uniform_stamps(8, 0.25));

  std::uniform_real_distribution<double> time(spline.valid_begin(),
                                              spline.valid_end() - 1e-9);
  for (int k = 0; k < 100; ++k) {
    const double t = time(rng);
    const Pose pose = evaluate(spline, t);
    // Interval i covers [t_i, t_{i+1}); de Boor blends controls i-1 .. i+2.
    const int i = static_cast<int>(std::floor(t / 0.25));
    const double u = (t - 0.25 * i) / 0.25;
    const Eigen::Vector4d w = oracles::uniform_cubic_basis_deboor(u);
    const Vec3 expected = w[0] * controls[i - 1] + w[1] * controls[i] +
                          w[2] * controls[i + 1] + w[3] * controls[i + 2];
    CHECK((pose.translation - expected).norm() < 1e-9);
    CHECK(pose.rotation_angle() < 1e-12);
  }
}

TEST_CASE("translation velocity is continuous across knots", "[trajectory]") {
  // One-sided secants differ by ~h * acceleration at a C1 point, so gentle
  // accelerations keep the numeric jump below the bound while a genuine
  // velocity break would still show up at ~0.1 m/s.
  auto rng = oracles::seeded_rng(31);
  std::vector<Pose> poses;
  for (int i = 0; i < 8; ++i) poses.push_back(oracles::random_pose(rng, 0.1, 0.1));
  const TrajectorySpline spline = build_spline(poses, uniform_stamps(8, 1.0));

  const double h = 1e-6;
  for (int knot = 2; knot <= 5; ++knot) {
    const double t = 1.0 * knot;
    const Vec3 before =
        (evaluate(spline, t).translation - evaluate(spline, t - h).translation) / h;
    const Vec3 after =
        (evaluate(spline, t + h).translation - evaluate(spline, t).translation) / h;
    CHECK((after - before).norm() < 1e-6);
  }
}

TEST_CASE("constant-velocity controls reproduce linear motion", "[trajectory]") {
  // Ten controls along a screw of fixed twist per knot: the spline must
  // reproduce the screw exactly.
  const Twist per_knot(Vec3(0.0, 0.0, 4.0 * M_PI / 180.0), Vec3(0.3, -0.1, 0.05));
  std::vector<Pose> poses{Pose::identity()};
  for (int i = 1; i < 10; ++i) poses.push_back(poses.back() * exp_map(per_knot));
  const TrajectorySpline spline = build_spline(poses, uniform_stamps(10, 0.2));

  auto rng = oracles::seeded_rng(41);
  std::uniform_real_distribution<double> time(spline.valid_begin(),
                                              spline.valid_end() - 1e-9);
  for (int k = 0; k < 50; ++k) {
    const double t = time(rng);
    const double knots = t / 0.2;  // fractional knot index from control 0
    const Pose screw = exp_map(Twist(per_knot.rot * knots, per_knot.trans * knots));
    const auto [dt, dr] = pose_delta(evaluate(spline, t), screw);
    CHECK(dt < 1e-9);
    CHECK(dr < 1e-9);
  }
}

TEST_CASE("a control pose only influences its four intervals", "[trajectory]") {
  auto rng = oracles::seeded_rng(51);
  std::vector<Pose> poses;
  for (int i = 0; i < 10; ++i) poses.push_back(oracles::random_pose(rng, 0.5, 2.0));
  const TrajectorySpline base = build_spline(poses, uniform_stamps(10));

  std::vector<Pose> perturbed = poses;
  perturbed[7] = perturbed[7] * exp_map(Twist(Vec3(0.01, 0.0, 0.0), Vec3(0.2, 0.0, 0.0)));
  const TrajectorySpline moved = build_spline(perturbed, uniform_stamps(10));

  // Control 7 feeds intervals 5..8; earlier intervals are bitwise untouched.
  for (double t = 1.0; t < 5.0; t += 0.13) {
    const Pose a = evaluate(base, t);
    const Pose b = evaluate(moved, t);
    CHECK(a.translation == b.translation);
    CHECK(a.rotation.coeffs() == b.rotation.coeffs());
  }
  bool any_changed = false;
  for (double t = 5.0; t < 8.0; t += 0.13) {
    const auto [dt, dr] = pose_delta(evaluate(base, t), evaluate(moved, t));
    if (dt > 1e-9 || dr > 1e-9) any_changed = true;
  }
  CHECK(any_changed);
}

TEST_CASE("premultiplying controls premultiplies the trajectory", "[trajectory]") {
  auto rng = oracles::seeded_rng(61);
  std::vector<Pose> poses;
  for (int i = 0; i < 7; ++i) poses.push_back(oracles::random_pose(rng, 0.7, 3.0));
  const Pose g = oracles::random_pose(rng, 2.0, 15.0);
  std::vector<Pose> moved;
  for (const auto& p : poses) moved.push_back(g * p);

  const TrajectorySpline base = build_spline(poses, uniform_stamps(7, 0.4));
  const TrajectorySpline shifted = build_spline(moved, uniform_stamps(7, 0.4));
  for (double t = base.valid_begin(); t < base.valid_end(); t += 0.09) {
    const auto [dt, dr] = pose_delta(g * evaluate(base, t), evaluate(shifted, t));
    CHECK(dt < 1e-9);
    CHECK(dr < 1e-9);
  }
}

TEST_CASE("interpolate_lines blends inside the window and falls back outside",
          "[trajectory]") {
  // Constant-velocity walk along x, one scan node per second, lines at
  // quarter-second offsets.
  HierGraph graph;
  graph.maybe_add_map_node(Pose::identity());
  std::vector<ScanNode> nodes;
  for (int i = 0; i < 6; ++i) {
    const double stamp = static_cast<double>(i);
    const Pose pose(Eigen::Quaterniond::Identity(), Vec3(stamp, 0.0, 0.0));
    const ScanNode node =
        scan_with_lines(pose, stamp, {stamp, stamp + 0.25, stamp + 0.5, stamp + 0.75});
    nodes.push_back(node);
    graph.add_scan_constraint(0, node, ok_result(pose));
  }
  const TrajectorySpline spline = build_spline(nodes);
  const auto per_scan = interpolate_lines(spline, graph, graph.subgraph(0));
  REQUIRE(per_scan.size() == 6);

  for (const auto& scan : per_scan) {
    REQUIRE(scan.lines.size() == 4);
    for (const auto& row : scan.lines) {
      if (spline.covers(row.stamp)) {
        // Linear reproduction: x equals the stamp.
        CHECK(std::abs(row.pose.translation.x() - row.stamp) < 1e-9);
      } else {
        // Rigid fallback to the owning node pose.
        const ScanNode& node = graph.scan_node(scan.scan_id);
        CHECK(row.pose.translation == node.pose.translation);
      }
    }
  }
  // The first scan lies fully before the valid interval.
  for (const auto& row : per_scan.front().lines) {
    CHECK(row.pose.translation.x() == 0.0);
  }

  const std::string csv = trajectory_to_csv(per_scan);
  std::istringstream stream(csv);
  std::string line;
  std::getline(stream, line);
  CHECK(line == "stamp,x,y,z,qx,qy,qz,qw");
  int rows = 0;
  while (std::getline(stream, line)) ++rows;
  CHECK(rows == 24);
}

TEST_CASE("static trajectories pin every line to the shared pose", "[trajectory]") {
  HierGraph graph;
  graph.maybe_add_map_node(Pose::identity());
  const Pose fixed(Eigen::Quaterniond(Eigen::AngleAxisd(0.4, Vec3::UnitZ())),
                   Vec3(2.0, -1.0, 0.5));
  std::vector<ScanNode> nodes;
  for (int i = 0; i < 5; ++i) {
    const double stamp = 0.1 * static_cast<double>(i);
    const ScanNode node = scan_with_lines(fixed, stamp, {stamp, stamp + 0.03, stamp + 0.06});
    nodes.push_back(node);
    graph.add_scan_constraint(0, node, ok_result(fixed));
  }
  const TrajectorySpline spline = build_spline(nodes);
  for (const auto& scan : interpolate_lines(spline, graph, graph.subgraph(0))) {
    for (const auto& row : scan.lines) {
      const auto [dt, dr] = pose_delta(row.pose, fixed);
      CHECK(dt < 1e-12);
      CHECK(dr < 1e-12);
    }
  }
}
