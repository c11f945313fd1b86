#include <hicts/evaluation.hpp>
#include <hicts/kdtree.hpp>
#include <hicts/ply.hpp>

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

using namespace hicts;

namespace {

std::vector<Vec3> random_cloud(std::mt19937_64& rng, std::size_t n, double half_extent) {
  std::uniform_real_distribution<double> u(-half_extent, half_extent);
  std::vector<Vec3> pts;
  pts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
  return pts;
}

std::vector<Vec3> clipped_gaussian_cloud(std::mt19937_64& rng, std::size_t n, double sigma,
                                         double clip_sigmas) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vec3> pts;
  pts.reserve(n);
  while (pts.size() < n) {
    const Vec3 p(g(rng), g(rng), g(rng));
    if (p.cwiseAbs().maxCoeff() <= clip_sigmas) pts.push_back(sigma * p);
  }
  return pts;
}

double entropy_of_covariance(const Mat3& cov) {
  constexpr double two_pi_e = 2.0 * M_PI * M_E;
  return 0.5 * std::log(two_pi_e * two_pi_e * two_pi_e * cov.determinant());
}

}  // namespace

TEST_CASE("radius queries match brute force exactly", "[kdtree]") {
  auto rng = oracles::seeded_rng(53);
  const std::vector<Vec3> cloud = random_cloud(rng, 10000, 5.0);
  const KdTree tree(cloud);
  std::uniform_real_distribution<double> uq(-6.0, 6.0);
  std::uniform_real_distribution<double> ur(0.05, 3.0);
  for (int k = 0; k < 50; ++k) {
    const Vec3 q(uq(rng), uq(rng), uq(rng));
    const double r = ur(rng);
    const std::vector<int> got = tree.radius_indices(q, r);
    const std::vector<int> expected = oracles::brute_force_radius(cloud, q, r);
    CHECK(got == expected);
  }
}

TEST_CASE("radius query boundary is inclusive", "[kdtree]") {
  const std::vector<Vec3> cloud{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0)};
  const KdTree tree(cloud);
  CHECK(tree.radius_indices(Vec3::Zero(), 1.0) == std::vector<int>{0, 1});
  CHECK(tree.radius_indices(Vec3::Zero(), 0.999999) == std::vector<int>{0});
}

TEST_CASE("nearest matches brute force with index tie-breaking", "[kdtree]") {
  auto rng = oracles::seeded_rng(59);
  std::vector<Vec3> cloud = random_cloud(rng, 2000, 5.0);
  // Duplicates force distance ties.
  for (int i = 0; i < 50; ++i) cloud.push_back(cloud[i]);
  const KdTree tree(cloud);
  std::uniform_real_distribution<double> uq(-6.0, 6.0);
  for (int k = 0; k < 200; ++k) {
    const Vec3 q(uq(rng), uq(rng), uq(rng));
    int expected = -1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const double d2 = (cloud[i] - q).squaredNorm();
      if (d2 < best) {
        best = d2;
        expected = static_cast<int>(i);
      }
    }
    const auto got = tree.nearest(q);
    REQUIRE(got.has_value());
    CHECK(*got == expected);
  }
  // Querying a duplicated location returns the smaller index.
  const auto dup = tree.nearest(cloud[2000]);
  REQUIRE(dup.has_value());
  CHECK(*dup == 0);
}

TEST_CASE("nearest_within respects the distance bound", "[kdtree]") {
  const std::vector<Vec3> cloud{Vec3(0, 0, 0), Vec3(3, 0, 0)};
  const KdTree tree(cloud);
  CHECK(tree.nearest_within(Vec3(1.0, 0, 0), 1.0).value() == 0);
  CHECK_FALSE(tree.nearest_within(Vec3(1.5, 0, 0), 1.0).has_value());
  CHECK(tree.nearest_within(Vec3(1.0, 0, 0), 2.0).value() == 0);
  const KdTree empty;
  CHECK_FALSE(empty.nearest(Vec3::Zero()).has_value());
}

TEST_CASE("point_entropy skips sparse neighborhoods", "[evaluation]") {
  std::vector<Vec3> cloud;
  for (int i = 0; i < 9; ++i) cloud.emplace_back(0.1 * i, 0.0, 0.0);
  const KdTree tree(cloud);
  CHECK_FALSE(point_entropy(cloud, tree, Vec3::Zero(), 10.0).has_value());
}

TEST_CASE("point_entropy on unit-cube corners matches direct covariance", "[evaluation]") {
  std::vector<Vec3> corners;
  for (int sx : {-1, 1})
    for (int sy : {-1, 1})
      for (int sz : {-1, 1}) corners.emplace_back(0.5 * sx, 0.5 * sy, 0.5 * sz);

  // Oracle: covariance straight from the definition.
  Vec3 mean = Vec3::Zero();
  for (const auto& p : corners) mean += p;
  mean /= 8.0;
  Mat3 scatter = Mat3::Zero();
  for (const auto& p : corners) scatter += (p - mean) * (p - mean).transpose();
  const Mat3 cov = scatter / 7.0;
  CHECK((cov - (2.0 / 7.0) * Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-15);
  const double expected = entropy_of_covariance(cov);
  CHECK(expected == Catch::Approx(2.378).margin(1e-3));

  const KdTree tree(corners);
  const auto h = point_entropy(corners, tree, Vec3::Zero(), 1.0, 8);
  REQUIRE(h.has_value());
  CHECK(*h == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("isotropic Gaussian cloud entropy matches the analytic value", "[evaluation]") {
  auto rng = oracles::seeded_rng(61);
  const double sigma = 0.01;
  const std::vector<Vec3> cloud = clipped_gaussian_cloud(rng, 10000, sigma, 4.0);
  const double analytic = 3.0 * std::log(sigma) + 1.5 * std::log(2.0 * M_PI * M_E);
  CHECK(analytic == Catch::Approx(-9.5587).margin(1e-3));

  const KdTree tree(cloud);
  const auto h = point_entropy(cloud, tree, Vec3::Zero(), 0.5);
  REQUIRE(h.has_value());
  CHECK(*h == Catch::Approx(analytic).margin(0.1));

  const std::vector<Vec3> small(cloud.begin(), cloud.begin() + 2000);
  const MmeReport report = mean_map_entropy(small, 0.5);
  CHECK(report.mme == Catch::Approx(analytic).margin(0.1));
  CHECK(report.evaluated_points + report.skipped_points == small.size());
  CHECK(report.skipped_points == 0);
  CHECK(report.radius == 0.5);
}

TEST_CASE("two identical far-apart sub-clouds average to one sub-cloud's MME", "[evaluation]") {
  auto rng = oracles::seeded_rng(67);
  const std::vector<Vec3> sub = clipped_gaussian_cloud(rng, 500, 0.05, 4.0);
  std::vector<Vec3> both = sub;
  for (const auto& p : sub) both.push_back(p + Vec3(100.0, 0.0, 0.0));
  const MmeReport one = mean_map_entropy(sub, 0.5);
  const MmeReport two = mean_map_entropy(both, 0.5);
  CHECK(two.mme == Catch::Approx(one.mme).margin(1e-12));
  CHECK(two.evaluated_points == 2 * one.evaluated_points);
}

TEST_CASE("scaling a cloud shifts entropy by the analytic offset", "[evaluation]") {
  auto rng = oracles::seeded_rng(71);
  const std::vector<Vec3> unit = clipped_gaussian_cloud(rng, 3000, 1.0, 2.5);
  std::vector<Vec3> tight, loose;
  for (const auto& p : unit) {
    tight.push_back(0.01 * p);
    loose.push_back(0.1 * p);
  }
  // Central query sees the whole cloud in both cases, so the offset is exact.
  const KdTree tight_tree(tight);
  const KdTree loose_tree(loose);
  const double h_tight = *point_entropy(tight, tight_tree, Vec3::Zero(), 0.5);
  const double h_loose = *point_entropy(loose, loose_tree, Vec3::Zero(), 0.5);
  CHECK(h_loose - h_tight == Catch::Approx(3.0 * std::log(10.0)).margin(1e-9));

  // Full MME: neighborhoods differ slightly near the loose cloud's rim.
  const MmeReport mme_tight = mean_map_entropy(tight, 0.5, kMmeMinNeighbors, 4);
  const MmeReport mme_loose = mean_map_entropy(loose, 0.5, kMmeMinNeighbors, 4);
  CHECK(mme_loose.mme - mme_tight.mme == Catch::Approx(6.908).margin(0.2));
}

TEST_CASE("MME is invariant under rigid transformation", "[evaluation]") {
  auto rng = oracles::seeded_rng(73);
  const std::vector<Vec3> cloud = clipped_gaussian_cloud(rng, 2000, 0.05, 4.0);
  const Pose t = oracles::random_pose(rng);
  std::vector<Vec3> moved;
  moved.reserve(cloud.size());
  for (const auto& p : cloud) moved.push_back(t * p);
  const MmeReport a = mean_map_entropy(cloud, 0.5);
  const MmeReport b = mean_map_entropy(moved, 0.5);
  CHECK(a.evaluated_points == b.evaluated_points);
  CHECK(b.mme == Catch::Approx(a.mme).margin(1e-9));
}

TEST_CASE("MME grows with noise scale", "[evaluation]") {
  auto rng = oracles::seeded_rng(79);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<Vec3> base, noisy;
  for (int i = 0; i < 3000; ++i) {
    const Vec3 on_plane(u(rng), u(rng), 0.0);
    const double n = 0.01 * g(rng);
    base.push_back(on_plane + Vec3(0.0, 0.0, n));
    noisy.push_back(on_plane + Vec3(0.0, 0.0, 3.0 * n));
  }
  const MmeReport a = mean_map_entropy(base, 0.5);
  const MmeReport b = mean_map_entropy(noisy, 0.5);
  CHECK(b.mme > a.mme);
}

TEST_CASE("degenerate neighborhoods are skipped or rejected", "[evaluation]") {
  // Exactly coplanar points: covariance determinant collapses below the floor.
  std::vector<Vec3> plane;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) plane.emplace_back(0.05 * i, 0.05 * j, 0.0);
  const KdTree tree(plane);
  CHECK_FALSE(point_entropy(plane, tree, Vec3::Zero(), 1.0).has_value());
  CHECK_THROWS_AS(mean_map_entropy(plane, 1.0), std::runtime_error);

  CHECK_THROWS_AS(mean_map_entropy({}, 0.5), std::invalid_argument);
}

TEST_CASE("mean_map_entropy result is identical across thread counts", "[evaluation]") {
  auto rng = oracles::seeded_rng(83);
  const std::vector<Vec3> cloud = clipped_gaussian_cloud(rng, 2500, 0.05, 4.0);
  const MmeReport serial = mean_map_entropy(cloud, 0.5, kMmeMinNeighbors, 1);
  const MmeReport parallel = mean_map_entropy(cloud, 0.5, kMmeMinNeighbors, 4);
  CHECK(serial.mme == parallel.mme);
  CHECK(serial.evaluated_points == parallel.evaluated_points);
}

TEST_CASE("mme report renders all fields", "[evaluation]") {
  MmeReport r;
  r.mme = -2.5;
  r.evaluated_points = 10;
  r.skipped_points = 3;
  r.radius = 0.5;
  const std::string s = mme_report_to_string(r);
  CHECK(s.find("\"mme\": -2.5") != std::string::npos);
  CHECK(s.find("\"evaluated\": 10") != std::string::npos);
  CHECK(s.find("\"skipped\": 3") != std::string::npos);
  CHECK(s.find("\"radius\": 0.5") != std::string::npos);
}

TEST_CASE("ply round-trip is exact and deterministic", "[ply]") {
  auto rng = oracles::seeded_rng(89);
  PlyCloud cloud;
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (int i = 0; i < 100; ++i) {
    cloud.points.emplace_back(u(rng), u(rng), u(rng));
    cloud.scan_indices.push_back(i % 7);
  }
  const std::string text = ply_to_string(cloud);
  const PlyCloud back = ply_from_string(text);
  REQUIRE(back.points.size() == cloud.points.size());
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    CHECK(back.points[i] == cloud.points[i]);
    CHECK(back.scan_indices[i] == cloud.scan_indices[i]);
  }
  CHECK(ply_to_string(back) == text);
}

TEST_CASE("ply reader tolerates reordered and extra properties", "[ply]") {
  const std::string text =
      "ply\n"
      "format ascii 1.0\n"
      "comment synthetic\n"
      "element vertex 2\n"
      "property float intensity\n"
      "property double z\n"
      "property double x\n"
      "property double y\n"
      "end_header\n"
      "9 3 1 2\n"
      "8 6 4 5\n";
  const PlyCloud cloud = ply_from_string(text);
  REQUIRE(cloud.points.size() == 2);
  CHECK(cloud.points[0] == Vec3(1, 2, 3));
  CHECK(cloud.points[1] == Vec3(4, 5, 6));
  CHECK(cloud.scan_indices == std::vector<int>{0, 0});
}

TEST_CASE("ply reader rejects malformed input", "[ply]") {
  CHECK_THROWS_AS(ply_from_string("not a ply\n"), std::runtime_error);
  CHECK_THROWS_AS(ply_from_string("ply\nformat binary_little_endian 1.0\nend_header\n"),
                  std::runtime_error);
  CHECK_THROWS_AS(
      ply_from_string("ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty "
                      "double y\nproperty double z\nend_header\n1 2 3\n"),
      std::runtime_error);
}
