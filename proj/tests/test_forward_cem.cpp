#include "nnqn/forward_cem.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace nnqn;

namespace {

Mesh two_triangles() {
  Mesh m;
  m.nodes = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  m.elements = {{0, 1, 2}, {0, 2, 3}};
  m.finalize();
  return m;
}

CEMProblem disk_problem(int target, int electrodes = 16, double z = 1e-2) {
  return make_adjacent_problem(build_disk_mesh(1.0, target, electrodes, 0.5), z);
}

Vec random_field(int n, std::uint64_t seed, double lo = 0.5, double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

struct AffineModel {
  Mat M;
  Vec c;
  Vec evaluate(const Vec& x) const { return M * x + c; }
};

}  // namespace

TEST(Stiffness, TwoElementHandAssembly) {
  Mesh m = two_triangles();
  Mat K = Mat(stiffness_matrix(m, ConductivityField::constant(2, 1.0)));
  Mat expected{{1.0, -0.5, 0.0, -0.5}, {-0.5, 1.0, -0.5, 0.0}, {0.0, -0.5, 1.0, -0.5}, {-0.5, 0.0, -0.5, 1.0}};
  EXPECT_LT((K - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(AssembleSystem, TwoElementContactBlocks) {
  MeshWithElectrodes g;
  g.mesh = two_triangles();
  // Boundary edges 0 (bottom) and the top edge serve as electrodes.
  int bottom = -1, top = -1;
  for (int e = 0; e < static_cast<int>(g.mesh.boundary_edges.size()); ++e) {
    const auto& be = g.mesh.boundary_edges[e];
    if (be[0] == 0 && be[1] == 1) bottom = e;
    if (be[0] == 2 && be[1] == 3) top = e;
  }
  ASSERT_GE(bottom, 0);
  ASSERT_GE(top, 0);
  g.layout.electrodes = {{bottom}, {top}};
  CEMProblem p = make_adjacent_problem(g, 0.5);
  auto sys = assemble_system(p, ConductivityField::constant(2, 1.0));
  Mat A = Mat(sys.matrix);
  ASSERT_EQ(A.rows(), 5);
  // Nodal block = stiffness + (1/z) edge mass on electrode edges.
  Mat expected = Mat(stiffness_matrix(g.mesh, ConductivityField::constant(2, 1.0)));
  const double w = 2.0;  // 1/z
  expected(0, 0) += w / 3; expected(1, 1) += w / 3; expected(0, 1) += w / 6; expected(1, 0) += w / 6;
  expected(2, 2) += w / 3; expected(3, 3) += w / 3; expected(2, 3) += w / 6; expected(3, 2) += w / 6;
  EXPECT_LT((A.topLeftCorner(4, 4) - expected).cwiseAbs().maxCoeff(), 1e-15);
  // Grounded electrode coordinate b: U0 = b, U1 = -b.
  Vec coupling{{-w / 2, -w / 2, w / 2, w / 2}};
  EXPECT_LT((A.col(4).head(4) - coupling).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(A(4, 4), 2.0 * w, 1e-15);
  EXPECT_NEAR(sys.rhs(4, 0), 2.0, 1e-15);
}

TEST(AssembleSystem, ExactSymmetry) {
  CEMProblem p = disk_problem(300);
  auto sys = assemble_system(p, ConductivityField(random_field(p.mesh.n_elements(), 3)));
  Mat A = Mat(sys.matrix);
  EXPECT_EQ((A - A.transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(AssembleSystem, DoublingConductivityAndHalvingImpedanceDoublesMatrix) {
  CEMProblem p = disk_problem(200);
  Vec s = random_field(p.mesh.n_elements(), 4);
  Mat A1 = Mat(assemble_system(p, ConductivityField(s)).matrix);
  CEMProblem q = p;
  q.contact_impedance *= 0.5;
  Mat A2 = Mat(assemble_system(q, ConductivityField(Vec(2.0 * s))).matrix);
  EXPECT_EQ((A2 - 2.0 * A1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(AssembleSystem, CachedPatternMatchesTripletAssembly) {
  CEMProblem p = disk_problem(200);
  CemForwardModel model(p);
  ConductivityField s(random_field(p.mesh.n_elements(), 5));
  Mat A1 = Mat(assemble_system(p, s).matrix);
  Mat A2 = Mat(model.system_matrix(s));
  EXPECT_LT((A1 - A2).cwiseAbs().maxCoeff(), 1e-12 * A1.cwiseAbs().maxCoeff());
}

TEST(AssembleSystem, RejectsNonPositiveConductivity) {
  CEMProblem p = disk_problem(100);
  Vec s = Vec::Ones(p.mesh.n_elements());
  s[3] = 0.0;
  EXPECT_THROW(assemble_system(p, ConductivityField(s)), DomainError);
  s[3] = -1.0;
  CemForwardModel model(p);
  EXPECT_THROW(model.evaluate(s), DomainError);
}

TEST(SolveForward, ReciprocityHomogeneousAndRandom) {
  CEMProblem p = disk_problem(400);
  CemForwardModel model(p);
  const int L = p.n_electrodes();
  for (int trial = 0; trial < 11; ++trial) {
    Vec s = trial == 0 ? Vec(Vec::Ones(p.mesh.n_elements())) : random_field(p.mesh.n_elements(), 100 + trial);
    Vec v = model.evaluate(s);
    ASSERT_EQ(v.size(), L * L);
    const double scale = v.cwiseAbs().maxCoeff();
    for (int i = 0; i < L; ++i)
      for (int k = 0; k < L; ++k) EXPECT_NEAR(v[i * L + k], v[k * L + i], 1e-8 * scale);
  }
}

TEST(SolveForward, ConductivityScalingLaw) {
  CEMProblem p = disk_problem(300);
  Vec s = random_field(p.mesh.n_elements(), 7);
  Vec v1 = CemForwardModel(p).evaluate(s);
  for (double c : {2.0, 3.0}) {
    CEMProblem q = p;
    q.contact_impedance /= c;
    Vec vc = CemForwardModel(q).evaluate(c * s);
    if (c == 2.0)
      EXPECT_EQ((vc - v1 / c).cwiseAbs().maxCoeff(), 0.0);
    else
      EXPECT_LT((vc - v1 / c).norm(), 1e-12 * v1.norm());
  }
}

TEST(SolveForward, CurrentConservation) {
  CEMProblem p = disk_problem(300);
  CemForwardModel model(p);
  auto sol = model.solve(ConductivityField(random_field(p.mesh.n_elements(), 8)));
  Mat I = model.electrode_currents(sol);
  for (Index c = 0; c < I.cols(); ++c) {
    EXPECT_LT(std::abs(I.col(c).sum()), 1e-10);
    EXPECT_LT((I.col(c) - p.injections.row(c).transpose()).cwiseAbs().maxCoeff(), 1e-9);
  }
  EXPECT_LT(sol.electrode.colwise().sum().cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SolveForward, MeasurementCountMatchesProtocol) {
  CEMProblem p = make_adjacent_problem(build_disk_mesh(14.0, 600, 16, 0.5));
  EXPECT_EQ(p.n_measurements(), 256);
  EXPECT_EQ(CemForwardModel(p).evaluate(Vec::Ones(p.mesh.n_elements())).size(), 256);
}

// With z*sigma/R = 1 the electrode-edge singularities are mild enough for
// P1 elements to resolve at ~500 elements. At the default z = 1e-2 the
// injecting-electrode voltages converge at O(h); see the refinement test.
TEST(SolveForward, ConvergesToFineMeshReference) {
  auto eval = [](int target) {
    CEMProblem p = disk_problem(target, 16, 1.0);
    return CemForwardModel(p).evaluate(Vec::Ones(p.mesh.n_elements()));
  };
  Vec coarse = eval(500);
  Vec fine = eval(8000);
  EXPECT_LT((coarse - fine).norm() / fine.norm(), 0.02);
}

TEST(SolveForward, RefinementReducesDiscretizationError) {
  CEMProblem ref_p = disk_problem(20000);
  Vec ref = CemForwardModel(ref_p).evaluate(Vec::Ones(ref_p.mesh.n_elements()));
  double prev = 1e300;
  for (int target : {120, 480, 1920}) {
    CEMProblem p = disk_problem(target);
    Vec v = CemForwardModel(p).evaluate(Vec::Ones(p.mesh.n_elements()));
    double err = (v - ref).norm() / ref.norm();
    EXPECT_LT(err, prev) << target;
    prev = err;
  }
}

TEST(JacobianPerturbation, ExactForAffineModel) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  AffineModel model{Mat::NullaryExpr(6, 4, [&] { return n(rng); }), Vec::NullaryExpr(6, [&] { return n(rng); })};
  Vec x = Vec::Constant(4, 1.5);
  Mat J = jacobian_perturbation(model, x);
  EXPECT_LT((J - model.M).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(JacobianPerturbation, ColumnMatchesIndependentRecomputation) {
  CEMProblem p = disk_problem(100);
  CemForwardModel model(p);
  Vec s = random_field(p.mesh.n_elements(), 9);
  Mat J = jacobian_perturbation(model, s, {}, 2);
  for (int j : {0, 17, static_cast<int>(s.size()) - 1}) {
    Vec sj = s;
    const double h = std::max(1e-4 * s[j], 1e-8);
    sj[j] += h;
    Vec col = (model.evaluate(sj) - model.evaluate(s)) / h;
    EXPECT_EQ((col - J.col(j)).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(JacobianAdjoint, AgreesWithPerturbation) {
  CEMProblem p = disk_problem(200);
  CemForwardModel model(p);
  for (std::uint64_t seed : {0u, 11u}) {
    Vec s = seed == 0 ? Vec(Vec::Ones(p.mesh.n_elements())) : random_field(p.mesh.n_elements(), seed);
    Mat Ja = model.jacobian_adjoint(ConductivityField(s));
    Mat Jp = jacobian_perturbation(model, s);
    EXPECT_LT((Ja - Jp).norm() / Ja.norm(), 1e-3);
  }
}

TEST(JacobianAdjoint, RespectsRotationalSymmetry) {
  CEMProblem p = disk_problem(400);
  CemForwardModel model(p);
  const int N = p.mesh.n_elements();
  const int L = p.n_electrodes();
  Mat J = model.jacobian_adjoint(ConductivityField::constant(N, 1.0));
  const double th = 2.0 * std::numbers::pi / L;
  const Eigen::Matrix2d R{{std::cos(th), -std::sin(th)}, {std::sin(th), std::cos(th)}};
  std::vector<int> perm(N);
  for (int e = 0; e < N; ++e) {
    Point q = R * p.mesh.centroid(e);
    double best = 1e300;
    for (int f = 0; f < N; ++f) {
      double d = (p.mesh.centroid(f) - q).norm();
      if (d < best) {
        best = d;
        perm[e] = f;
      }
    }
    ASSERT_LT(best, 1e-10);
  }
  const double scale = J.cwiseAbs().maxCoeff();
  double worst = 0.0;
  for (int i = 0; i < L; ++i)
    for (int k = 0; k < L; ++k)
      for (int e = 0; e < N; ++e) {
        const int row = i * L + k;
        const int rot = ((i + 1) % L) * L + (k + 1) % L;
        worst = std::max(worst, std::abs(J(row, e) - J(rot, perm[e])));
      }
  EXPECT_LT(worst, 1e-8 * scale);
}

TEST(JacobianAdjoint, DirectionalDerivativeFirstOrderDecay) {
  CEMProblem p = disk_problem(200);
  CemForwardModel model(p);
  Vec s = random_field(p.mesh.n_elements(), 12);
  Vec d = random_field(p.mesh.n_elements(), 13, -1.0, 1.0);
  Mat J = model.jacobian_adjoint(ConductivityField(s));
  const Vec base = model.evaluate(s);
  const Vec lin = J * d;
  std::vector<double> err;
  for (double t : {1e-2, 1e-3, 1e-4}) err.push_back(((model.evaluate(s + t * d) - base) / t - lin).norm() / lin.norm());
  for (size_t k = 0; k + 1 < err.size(); ++k) {
    const double ratio = err[k] / err[k + 1];
    EXPECT_GT(ratio, 7.0);
    EXPECT_LT(ratio, 13.0);
  }
}

TEST(AddNoise, ZeroLevelIsIdentity) {
  MeasurementFrame f{Vec::LinSpaced(10, -1, 1), {}};
  auto g = add_noise(f, 0.0, 42);
  EXPECT_EQ(g.values, f.values);
}

TEST(AddNoise, DeterministicUnderSeed) {
  MeasurementFrame f{Vec::LinSpaced(32, 0.5, 3.0), {}};
  auto a = add_noise(f, 0.01, 7);
  auto b = add_noise(f, 0.01, 7);
  auto c = add_noise(f, 0.01, 8);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
  EXPECT_TRUE(a.has_noise_model());
  EXPECT_GT(a.noise_std.minCoeff(), 0.0);
}

TEST(AddNoise, SampleStdMatchesPrescribed) {
  MeasurementFrame f{Vec::Constant(10000, 2.0), {}};
  auto g = add_noise(f, 0.01, 99);
  Vec r = g.values - f.values;
  const double mean = r.mean();
  const double sd = std::sqrt((r.array() - mean).square().sum() / (r.size() - 1));
  EXPECT_NEAR(sd, g.noise_std[0], 0.05 * g.noise_std[0]);
  EXPECT_THROW(add_noise(f, -0.1, 1), DomainError);
}

TEST(CEMProblem, RejectsInvalidPatternsAndImpedances) {
  CEMProblem p = disk_problem(100);
  CEMProblem bad = p;
  bad.injections(0, 0) += 1e-6;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = p;
  bad.contact_impedance[2] = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}
