#include <hicts/registration.hpp>

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace hicts;

namespace {

ScanFrame frame_of(const std::vector<Vec3>& points) {
  ScanLine line;
  line.stamp = 0.0;
  line.points = points;
  return assemble_scan({line});
}

/// Three mutually orthogonal planes meeting at the origin corner.
std::vector<Vec3> corner_room(double spacing = 0.1, double size = 3.95) {
  std::vector<Vec3> pts;
  for (double a = 0.05; a <= size; a += spacing) {
    for (double b = 0.05; b <= size; b += spacing) {
      pts.emplace_back(0.0, a, b);
      pts.emplace_back(a, 0.0, b);
      pts.emplace_back(a, b, 0.0);
    }
  }
  return pts;
}

std::vector<Vec3> single_plane(double spacing, int per_side) {
  std::vector<Vec3> pts;
  for (int i = 0; i < per_side; ++i) {
    for (int j = 0; j < per_side; ++j) {
      pts.emplace_back(0.05 + spacing * i, 0.05 + spacing * j, 0.0);
    }
  }
  return pts;
}

std::vector<Vec3> transformed(const std::vector<Vec3>& pts, const Pose& pose) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(pose * p);
  return out;
}

std::vector<Surfel> transformed(const std::vector<Surfel>& surfels, const Pose& pose) {
  const Mat3 r = pose.rotation_matrix();
  std::vector<Surfel> out;
  out.reserve(surfels.size());
  for (const auto& s : surfels) {
    Surfel t = s;
    t.mean = pose * s.mean;
    t.covariance = r * s.covariance * r.transpose();
    out.push_back(t);
  }
  return out;
}

}  // namespace

TEST_CASE("make_surfel_cloud basics", "[registration]") {
  // Three collinear points in one cell: a single rank-1 surfel.
  const std::vector<Vec3> collinear{Vec3(0.10, 0.10, 0.10), Vec3(0.12, 0.10, 0.10),
                                    Vec3(0.14, 0.10, 0.10)};
  const auto one = make_surfel_cloud(frame_of(collinear), 0.25);
  REQUIRE(one.size() == 1);
  CHECK(one[0].count == 3);
  Eigen::SelfAdjointEigenSolver<Mat3> eig(one[0].covariance);
  CHECK(eig.eigenvalues()(0) < 1e-15);
  CHECK(eig.eigenvalues()(1) < 1e-15);
  CHECK(eig.eigenvalues()(2) > 1e-6);

  // Fewer than three points per cell everywhere: nothing valid.
  const std::vector<Vec3> sparse{Vec3(0.1, 0.1, 0.1), Vec3(5.0, 5.0, 5.0), Vec3(-3.0, 2.0, 1.0)};
  CHECK(make_surfel_cloud(frame_of(sparse), 0.25).empty());

  // A sampled plane yields flat surfels.
  const auto surfels = make_surfel_cloud(frame_of(single_plane(0.05, 40)), 0.25);
  REQUIRE(surfels.size() > 10);
  for (const auto& s : surfels) {
    Eigen::SelfAdjointEigenSolver<Mat3> e(s.covariance);
    CHECK(e.eigenvalues()(0) < 0.01 * e.eigenvalues()(2));
  }

  CHECK_THROWS_AS(make_surfel_cloud(ScanFrame{}, 0.25), std::invalid_argument);
  CHECK_THROWS_AS(make_surfel_cloud(frame_of(collinear), 0.0), std::invalid_argument);
}

TEST_CASE("self-registration from identity stays at identity", "[registration]") {
  const auto cloud = make_surfel_cloud(frame_of(corner_room()), 0.5);
  const RegistrationResult result = register_surfels(cloud, cloud, Pose::identity(), 0.5);
  CHECK(result.converged);
  CHECK(result.matched_pairs == static_cast<int>(cloud.size()));
  CHECK(result.transform.rotation_angle() < 1e-9);
  CHECK(result.transform.translation.norm() < 1e-9);
  CHECK(result.final_cost < 1e-9);
  CHECK(is_symmetric(result.covariance, 1e-12));
  CHECK(is_positive_semidefinite(result.covariance, 1e-15));
}

TEST_CASE("corner-room offset is recovered from an identity prior", "[registration]") {
  const Pose truth = exp_map(Twist(Vec3(0.0, 0.0, 5.0 * M_PI / 180.0), Vec3(0.2, 0.1, 0.0)));
  const std::vector<Vec3> world = corner_room();
  const auto target = make_surfel_cloud(frame_of(world), 0.5);
  const auto source = transformed(target, truth.inverse());

  const RegistrationResult result = register_surfels(source, target, Pose::identity(), 0.5);
  CHECK(result.converged);
  const auto [dt, dr] = pose_delta(result.transform, truth);
  CHECK(dt < 1e-3);
  CHECK(dr < 0.05 * M_PI / 180.0);

  // Accepted damped steps never increase the cost they were accepted on.
  REQUIRE(!result.steps.empty());
  for (const auto& step : result.steps) {
    CHECK(step.cost_after < step.cost_before);
  }
}

TEST_CASE("single-plane registration is flagged ill-conditioned", "[registration]") {
  // Idealized slices of one infinite plane: in-plane spread far beyond any
  // lever arm, zero thickness. Sliding or spinning in the plane is free.
  std::vector<Surfel> plane;
  for (double x = -2.0; x <= 2.0; x += 0.5) {
    for (double y = -2.0; y <= 2.0; y += 0.5) {
      Surfel s;
      s.count = 100;
      s.mean = Vec3(x, y, 0.0);
      s.covariance = Vec3(1e6, 1e6, 0.0).asDiagonal();
      plane.push_back(s);
    }
  }
  const RegistrationResult result = register_surfels(plane, plane, Pose::identity(), 0.5);
  CHECK(result.converged);
  CHECK(result.ill_conditioned);
  Eigen::SelfAdjointEigenSolver<Mat6> eig(result.covariance);
  const Vec6 ev = eig.eigenvalues();
  CHECK(ev(5) >= 1e4 * ev(0));
}

TEST_CASE("richer constraints shrink the covariance", "[registration]") {
  // Same point count: three orthogonal planes versus one plane.
  const std::vector<Vec3> corner = corner_room(0.1, 3.95);
  std::vector<Vec3> plane = single_plane(0.05, 69);
  plane.resize(corner.size());
  const auto corner_surfels = make_surfel_cloud(frame_of(corner), 0.5);
  const auto plane_surfels = make_surfel_cloud(frame_of(plane), 0.5);
  const auto corner_result =
      register_surfels(corner_surfels, corner_surfels, Pose::identity(), 0.5);
  const auto plane_result = register_surfels(plane_surfels, plane_surfels, Pose::identity(), 0.5);
  CHECK(corner_result.covariance.trace() < plane_result.covariance.trace());
}

TEST_CASE("disjoint clouds fail with no associations", "[registration]") {
  const auto near = make_surfel_cloud(frame_of(corner_room()), 0.5);
  const auto far = transformed(near, Pose(Eigen::Quaterniond::Identity(), Vec3(500, 0, 0)));
  const RegistrationResult result = register_surfels(near, far, Pose::identity(), 0.5);
  CHECK_FALSE(result.converged);
  CHECK(result.matched_pairs == 0);

  CHECK_THROWS_AS(register_surfels({}, near, Pose::identity(), 0.5), std::invalid_argument);
  CHECK_THROWS_AS(register_surfels(near, {}, Pose::identity(), 0.5), std::invalid_argument);
}

TEST_CASE("registration is equivariant under a rigid change of frame", "[registration]") {
  auto rng = oracles::seeded_rng(151);
  const Pose truth = exp_map(Twist(Vec3(0.0, 0.0, 0.05), Vec3(0.15, -0.1, 0.05)));
  const std::vector<Vec3> world = corner_room(0.1, 2.95);
  const auto target = make_surfel_cloud(frame_of(world), 0.5);
  const auto source = make_surfel_cloud(frame_of(transformed(world, truth.inverse())), 0.5);
  const RegistrationResult base = register_surfels(source, target, Pose::identity(), 0.5);
  REQUIRE(base.converged);

  const Pose r = oracles::random_pose(rng, 2.0, 5.0);
  const RegistrationResult moved = register_surfels(
      transformed(source, r), transformed(target, r), r * Pose::identity() * r.inverse(), 0.5);
  REQUIRE(moved.converged);
  const Pose expected = r * base.transform * r.inverse();
  const auto [dt, dr] = pose_delta(moved.transform, expected);
  CHECK(dt < 1e-6);
  CHECK(dr < 1e-6);
}

TEST_CASE("scan-to-map registration of identical content is identity", "[registration]") {
  const std::vector<Vec3> world = corner_room();
  MultiresMap map;
  map.insert_scan(frame_of(world), Pose::identity(), 0);
  const RegistrationResult result =
      register_scan_to_map(frame_of(world), map, Pose::identity());
  CHECK(result.converged);
  const auto [dt, dr] = pose_delta(result.transform, Pose::identity());
  CHECK(dt < 1e-6);
  CHECK(dr < 1e-6);
}

TEST_CASE("empty map registration fails cleanly", "[registration]") {
  MultiresMap map;
  const RegistrationResult result =
      register_scan_to_map(frame_of(corner_room()), map, Pose::identity());
  CHECK_FALSE(result.converged);
  CHECK(result.matched_pairs == 0);
}

TEST_CASE("coarse levels widen the convergence basin", "[registration]") {
  const Pose truth(Eigen::Quaterniond::Identity(), Vec3(1.0, 0.0, 0.0));
  const std::vector<Vec3> world = corner_room();
  MultiresMap map;
  map.insert_scan(frame_of(world), Pose::identity(), 0);
  const ScanFrame frame = frame_of(transformed(world, truth.inverse()));

  const RegistrationResult multi = register_scan_to_map(frame, map, Pose::identity());
  CHECK(multi.converged);
  const auto [dt, dr] = pose_delta(multi.transform, truth);
  CHECK(dt < 1e-2);
  CHECK(dr < 1e-2);

  // Finest level alone: the 1 m offset exceeds the association gate along
  // the displaced wall, so the estimate stays far from the truth.
  std::vector<Surfel> fine_target;
  for (const auto& e : map.query_surfels(0)) fine_target.push_back(e.surfel);
  const auto fine_source = make_surfel_cloud(frame, map.cell_size(0));
  const RegistrationResult fine =
      register_surfels(fine_source, fine_target, Pose::identity(), map.cell_size(0));
  const auto [fine_dt, fine_dr] = pose_delta(fine.transform, truth);
  CHECK(fine_dt > 0.5);
  CHECK(fine_dt > 10.0 * dt);
}

TEST_CASE("map-to-map registration recovers the relative pose", "[registration]") {
  const std::vector<Vec3> world = corner_room();
  const Pose xa = Pose::identity();
  const Pose xb = exp_map(Twist(Vec3(0.0, 0.0, 10.0 * M_PI / 180.0), Vec3(3.0, 0.5, 0.0)));

  MultiresMap map_a(MapConfig(), xa);
  map_a.insert_scan(frame_of(world), xa.inverse(), 0);
  MultiresMap map_b(MapConfig(), Pose::identity());
  map_b.insert_scan(frame_of(world), xb.inverse(), 1);

  SECTION("a map registered to itself is identity") {
    const RegistrationResult self = register_map_to_map(map_a, map_a, Pose::identity());
    CHECK(self.converged);
    CHECK(self.transform.rotation_angle() < 1e-9);
    CHECK(self.transform.translation.norm() < 1e-9);
  }

  SECTION("two views three meters apart align from a perturbed prior") {
    const Pose truth = xb.inverse() * xa;
    const Pose perturb = exp_map(Twist(Vec3(0.0, 3.0 * M_PI / 180.0, 0.0), Vec3(0.3, 0.0, 0.0)));
    const RegistrationResult result = register_map_to_map(map_a, map_b, truth * perturb);
    CHECK(result.converged);
    const auto [dt, dr] = pose_delta(result.transform, truth);
    CHECK(dt < 5e-3);
    CHECK(dr < 0.1 * M_PI / 180.0);
  }

  SECTION("disjoint content fails with no associations") {
    MultiresMap far_map;
    std::vector<Vec3> far_pts;
    for (const auto& p : world) far_pts.push_back(p + Vec3(500.0, 0.0, 0.0));
    far_map.insert_scan(frame_of(far_pts), Pose(Eigen::Quaterniond::Identity(),
                                                Vec3(500.0, 0.0, 0.0)),
                        2);
    // Both maps hold content, but nothing associates at any level.
    const RegistrationResult result = register_map_to_map(map_a, far_map, Pose::identity());
    CHECK_FALSE(result.converged);
    CHECK(result.matched_pairs == 0);
  }
}

TEST_CASE("evaluation mode reports cost at the prior without moving", "[registration]") {
  const std::vector<Vec3> world = corner_room();
  const auto cloud = make_surfel_cloud(frame_of(world), 0.5);
  RegistrationConfig eval_cfg;
  eval_cfg.max_iterations = 0;

  const RegistrationResult at_truth =
      register_surfels(cloud, cloud, Pose::identity(), 0.5, eval_cfg);
  CHECK(at_truth.converged);
  CHECK(at_truth.iterations == 0);
  CHECK(at_truth.final_cost < 1e-9);
  CHECK(at_truth.transform.translation.norm() == 0.0);

  const Pose offset(Eigen::Quaterniond::Identity(), Vec3(0.15, 0.0, 0.0));
  const RegistrationResult at_offset = register_surfels(cloud, cloud, offset, 0.5, eval_cfg);
  CHECK(at_offset.converged);
  const auto [dt, dr] = pose_delta(at_offset.transform, offset);
  CHECK(dt == 0.0);
  CHECK(dr == 0.0);
  CHECK(at_offset.final_cost > at_truth.final_cost);
  CHECK(at_offset.covariance.trace() > at_truth.covariance.trace());
}
