#include "nnqn/mesh.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace nnqn;

TEST(DiskMesh, ReferenceWaterTankSize) {
  auto g = build_disk_mesh(14.0, 2034, 16, 0.5);
  EXPECT_NEAR(g.mesh.n_elements(), 2034, 0.25 * 2034);
  EXPECT_EQ(g.layout.n_electrodes(), 16);
  test::expect_valid_mesh(g);
  EXPECT_NEAR(g.mesh.total_area(), std::numbers::pi * 14.0 * 14.0, 0.02 * std::numbers::pi * 196.0);
}

TEST(DiskMesh, MinimalConfiguration) {
  auto g = build_disk_mesh(1.0, 50, 2, 0.1);
  EXPECT_NEAR(g.mesh.n_elements(), 50, 0.25 * 50);
  EXPECT_EQ(g.layout.n_electrodes(), 2);
  test::expect_valid_mesh(g);
  EXPECT_NEAR(g.mesh.total_area(), std::numbers::pi, 0.02 * std::numbers::pi);
}

TEST(DiskMesh, AreaAcrossSizes) {
  for (int target : {60, 200, 500, 1000, 3000}) {
    auto g = build_disk_mesh(2.5, target, 16, 0.5);
    test::expect_valid_mesh(g);
    EXPECT_NEAR(g.mesh.n_elements(), target, 0.25 * target) << target;
    EXPECT_NEAR(g.mesh.total_area(), std::numbers::pi * 6.25, 0.02 * std::numbers::pi * 6.25) << target;
  }
}

TEST(DiskMesh, ElectrodesCoverRequestedFraction) {
  auto g = build_disk_mesh(14.0, 1000, 16, 0.5);
  double covered = 0.0, total = 0.0;
  for (const auto& be : g.mesh.boundary_edges) total += g.mesh.edge_length(be);
  for (const auto& el : g.layout.electrodes)
    for (int e : el) covered += g.mesh.edge_length(g.mesh.boundary_edges[e]);
  EXPECT_NEAR(covered / total, 0.5, 0.02);
}

TEST(DiskMesh, InvariantUnderElectrodePitchRotation) {
  auto g = build_disk_mesh(1.0, 500, 16, 0.5);
  const double th = 2.0 * std::numbers::pi / 16;
  const Eigen::Matrix2d R{{std::cos(th), -std::sin(th)}, {std::sin(th), std::cos(th)}};
  for (const auto& p : g.mesh.nodes) {
    Point q = R * p;
    double best = 1e300;
    for (const auto& r : g.mesh.nodes) best = std::min(best, (r - q).norm());
    EXPECT_LT(best, 1e-12);
  }
}

TEST(DiskMesh, RejectsInvalidConfiguration) {
  EXPECT_THROW(build_disk_mesh(1.0, 100, 16, 1.0), ConfigError);
  EXPECT_THROW(build_disk_mesh(1.0, 100, 16, 1.5), ConfigError);
  EXPECT_THROW(build_disk_mesh(-1.0, 100, 16, 0.5), ConfigError);
  EXPECT_THROW(build_disk_mesh(1.0, 10, 16, 0.5), ConfigError);
  EXPECT_THROW(build_disk_mesh(1.0, 100, 1, 0.5), ConfigError);
}

TEST(SquareMesh, ReferenceLaminateSize) {
  auto g = build_square_mesh(9.54, 2528, 16, 0.5);
  EXPECT_NEAR(g.mesh.n_elements(), 2528, 0.25 * 2528);
  EXPECT_EQ(g.layout.n_electrodes(), 16);
  test::expect_valid_mesh(g);
  EXPECT_NEAR(g.mesh.total_area(), 9.54 * 9.54, 1e-10);
}

TEST(SquareMesh, MinimalConfiguration) {
  auto g = build_square_mesh(2.0, 8, 4, 0.25);
  test::expect_valid_mesh(g);
  EXPECT_EQ(g.layout.n_electrodes(), 4);
  EXPECT_NEAR(g.mesh.total_area(), 4.0, 1e-10);
}

TEST(SquareMesh, ElectrodesRunCounterClockwise) {
  auto g = build_square_mesh(4.0, 400, 16, 0.5);
  test::expect_valid_mesh(g);
  std::vector<double> angle;
  for (const auto& el : g.layout.electrodes) {
    Point mid = Point::Zero();
    for (int e : el) mid += 0.5 * (g.mesh.nodes[g.mesh.boundary_edges[e][0]] + g.mesh.nodes[g.mesh.boundary_edges[e][1]]);
    mid /= static_cast<double>(el.size());
    angle.push_back(std::atan2(mid.y(), mid.x()));
  }
  int wraps = 0;
  for (size_t i = 0; i < angle.size(); ++i) {
    double d = angle[(i + 1) % angle.size()] - angle[i];
    if (d < 0) {
      d += 2 * std::numbers::pi;
      ++wraps;
    }
    EXPECT_GT(d, 0.0);
    EXPECT_LT(d, 1.0);
  }
  EXPECT_EQ(wraps, 1);
}

TEST(SquareMesh, RejectsElectrodeCountNotDivisibleByFour) {
  EXPECT_THROW(build_square_mesh(1.0, 100, 6, 0.5), ConfigError);
}

TEST(AdjacencyLaplacian, TwoTriangles) {
  Mesh m;
  m.nodes = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  m.elements = {{0, 1, 2}, {0, 2, 3}};
  m.finalize();
  Mat L = Mat(element_adjacency_laplacian(m));
  Mat expected{{1, -1}, {-1, 1}};
  EXPECT_EQ(L, expected);
  ASSERT_EQ(m.interior_edges.size(), 1u);
  EXPECT_NEAR(m.interior_edges[0].length, std::sqrt(2.0), 1e-15);
}

TEST(AdjacencyLaplacian, ZeroRowSumsAndPositiveSemidefinite) {
  auto g = build_disk_mesh(1.0, 150, 8, 0.5);
  Mat L = Mat(element_adjacency_laplacian(g.mesh));
  EXPECT_LT(L.rowwise().sum().cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ((L - L.transpose()).cwiseAbs().maxCoeff(), 0.0);
  Eigen::SelfAdjointEigenSolver<Mat> es(L);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
}
