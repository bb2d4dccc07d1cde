#include "nnqn/sampler.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

using namespace nnqn;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("nnqn_test_" + name)).string();
}

FieldSamplerConfig default_cfg() {
  FieldSamplerConfig c;
  c.sigma_exp = 1.0;
  c.kernel_length_scale = 0.2;
  c.amplitude_std = 0.5;
  c.lower_bound = 0.1;
  c.rng_seed = 42;
  return c;
}

}  // namespace

TEST(Sampler, ZeroAmplitudeGivesExpectedConductivity) {
  auto g = build_disk_mesh(1.0, 100, 8, 0.5);
  auto cfg = default_cfg();
  cfg.amplitude_std = 0.0;
  auto s = sample_conductivity(g.mesh, cfg, 3);
  EXPECT_EQ(s.values, Vec::Constant(g.mesh.n_elements(), 1.0));
}

TEST(Sampler, ConfigValidation) {
  auto cfg = default_cfg();
  cfg.lower_bound = 2.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = default_cfg();
  cfg.kernel_length_scale = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = default_cfg();
  cfg.amplitude_std = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = default_cfg();
  cfg.amplitude_spread = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.amplitude_spread = -0.1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Sampler, AmplitudeSpreadVariesSampleStrength) {
  auto g = build_disk_mesh(1.0, 200, 8, 0.5);
  auto cfg = default_cfg();
  cfg.amplitude_spread = 1.0;
  cfg.lower_bound = 1e-6;
  FieldSampler s(g.mesh, cfg);
  double lo = 1e300, hi = 0.0;
  for (int i = 0; i < 40; ++i) {
    const Vec v = s.sample(i).values;
    const double sd = std::sqrt((v.array() - v.mean()).square().mean());
    lo = std::min(lo, sd);
    hi = std::max(hi, sd);
  }
  // Factors are uniform on (0, 1]: forty draws span most of that range.
  EXPECT_LT(lo, 0.25 * hi);
}

TEST(Sampler, DeterministicPerIndex) {
  auto g = build_disk_mesh(1.0, 200, 8, 0.5);
  FieldSampler s(g.mesh, default_cfg());
  EXPECT_EQ(s.sample(5).values, s.sample(5).values);
  EXPECT_NE(s.sample(5).values, s.sample(6).values);
  auto other = default_cfg();
  other.rng_seed = 43;
  EXPECT_NE(FieldSampler(g.mesh, other).sample(5).values, s.sample(5).values);
}

TEST(Sampler, SamplesArePositiveAndClamped) {
  auto g = build_disk_mesh(1.0, 200, 8, 0.5);
  auto cfg = default_cfg();
  cfg.amplitude_std = 5.0;
  FieldSampler s(g.mesh, cfg);
  double lo = 1e300;
  for (int i = 0; i < 50; ++i) lo = std::min(lo, s.sample(i).values.minCoeff());
  EXPECT_EQ(lo, cfg.lower_bound);
}

TEST(Sampler, MeanCenteredAtExpectedConductivity) {
  auto g = build_disk_mesh(1.0, 60, 8, 0.5);
  auto cfg = default_cfg();
  cfg.amplitude_std = 0.3;  // clamping at 0.1 essentially never triggers
  FieldSampler s(g.mesh, cfg);
  const int n_samples = 10000;
  const Index n = g.mesh.n_elements();
  Vec sum = Vec::Zero(n), sq = Vec::Zero(n);
  for (int i = 0; i < n_samples; ++i) {
    const Vec v = s.sample(i).values;
    sum += v;
    sq += v.cwiseProduct(v);
  }
  const Vec mean = sum / n_samples;
  const Vec var = sq / n_samples - mean.cwiseProduct(mean);
  for (Index e = 0; e < n; ++e) {
    const double se = std::sqrt(var[e] / n_samples);
    EXPECT_LT(std::abs(mean[e] - cfg.sigma_exp), 3.0 * se) << "element " << e;
  }
}

TEST(Sampler, CorrelationDecaysWithDistance) {
  auto g = build_disk_mesh(1.0, 600, 8, 0.5);
  auto cfg = default_cfg();
  FieldSampler s(g.mesh, cfg);
  const Index n = g.mesh.n_elements();
  // Anchor near the centre; partners closest to 0.5 ell and 3 ell away.
  int anchor = 0;
  for (int e = 0; e < n; ++e)
    if (g.mesh.centroid(e).norm() < g.mesh.centroid(anchor).norm()) anchor = e;
  auto closest_at = [&](double d) {
    int best = -1;
    double err = 1e300;
    for (int e = 0; e < n; ++e) {
      const double de = std::abs((g.mesh.centroid(e) - g.mesh.centroid(anchor)).norm() - d);
      if (e != anchor && de < err) err = de, best = e;
    }
    return best;
  };
  const int near = closest_at(0.5 * cfg.kernel_length_scale);
  const int far = closest_at(3.0 * cfg.kernel_length_scale);
  const int n_samples = 3000;
  Eigen::Matrix<double, Eigen::Dynamic, 3> X(n_samples, 3);
  for (int i = 0; i < n_samples; ++i) {
    const Vec v = s.sample(i).values;
    X.row(i) << v[anchor], v[near], v[far];
  }
  const Eigen::RowVector3d mu = X.colwise().mean();
  const auto C = X.rowwise() - mu;
  auto corr = [&](int a, int b) { return C.col(a).dot(C.col(b)) / (C.col(a).norm() * C.col(b).norm()); };
  EXPECT_LT(corr(0, 2), corr(0, 1));
  EXPECT_GT(corr(0, 1), 0.0);
}

TEST(Sampler, NinetyFivePercentWithinTwoStd) {
  auto g = build_disk_mesh(1.0, 200, 8, 0.5);
  auto cfg = default_cfg();
  FieldSampler s(g.mesh, cfg);
  std::vector<double> all;
  for (int i = 0; i < 1000; ++i) {
    const Vec v = s.sample(i).values;
    all.insert(all.end(), v.data(), v.data() + v.size());
  }
  const Eigen::Map<const Vec> a(all.data(), static_cast<Index>(all.size()));
  const double sd = std::sqrt((a.array() - a.mean()).square().mean());
  const double inside = (((a.array() - cfg.sigma_exp).abs() <= 2.0 * sd).cast<double>()).mean();
  EXPECT_GE(inside, 0.95);
}

class DatasetTest : public ::testing::Test {
 protected:
  void SetUp() override {
    geom_ = build_disk_mesh(1.0, 50, 16, 0.5);
    model_ = std::make_unique<CemForwardModel>(make_adjacent_problem(geom_));
  }
  MeshWithElectrodes geom_;
  std::unique_ptr<CemForwardModel> model_;
};

TEST_F(DatasetTest, ShapesAndTargetInvariants) {
  auto ds = build_dataset(*model_, default_cfg(), 2, 1);
  EXPECT_EQ(ds.inputs.rows(), 3);
  EXPECT_EQ(ds.inputs.cols(), 256);
  EXPECT_EQ(ds.targets.rows(), 3);
  EXPECT_EQ(ds.targets.cols(), 256);
  EXPECT_NO_THROW(ds.validate());
  EXPECT_EQ(ds.n_train, 2);
  EXPECT_EQ(ds.n_val, 1);
  EXPECT_THROW(build_dataset(*model_, default_cfg(), 0, 1), ConfigError);
}

TEST_F(DatasetTest, HomogeneousTargetsEqualAnchorSingularValues) {
  auto cfg = default_cfg();
  cfg.amplitude_std = 0.0;
  auto ds = build_dataset(*model_, cfg, 1, 1);
  const Vec expected =
      jacobian_singular_values(model_->jacobian_adjoint(ConductivityField::constant(model_->n_params(), 1.0)));
  EXPECT_EQ(Vec(ds.targets.row(0).transpose()), expected);
  EXPECT_EQ(Vec(ds.targets.row(1).transpose()), expected);
}

TEST_F(DatasetTest, AnchorIsTheFirstTrainingRow) {
  const Vec anchor =
      jacobian_singular_values(model_->jacobian_adjoint(ConductivityField::constant(model_->n_params(), 1.0)));
  auto ds = build_dataset(*model_, default_cfg(), 2, 1);
  EXPECT_EQ(Vec(ds.targets.row(0).transpose()), anchor);
  EXPECT_EQ(Vec(ds.inputs.row(0).transpose()), model_->evaluate(Vec::Constant(model_->n_params(), 1.0)));
  EXPECT_NE(Vec(ds.targets.row(1).transpose()), anchor);

  auto cfg = default_cfg();
  cfg.include_anchor = false;
  auto plain = build_dataset(*model_, cfg, 2, 1);
  EXPECT_EQ(Vec(plain.inputs.row(0).transpose()), model_->evaluate(FieldSampler(geom_.mesh, cfg).sample(0).values));
  EXPECT_EQ(plain.inputs.bottomRows(2), ds.inputs.bottomRows(2));
}

TEST_F(DatasetTest, PerturbationTargetsAgreeWithAdjoint) {
  auto a = build_dataset(*model_, default_cfg(), 2, 1);
  auto p = build_dataset(*model_, default_cfg(), 2, 1, 1, TargetJacobian::Perturbation);
  EXPECT_EQ(a.inputs, p.inputs);
  for (Index i = 0; i < a.size(); ++i) {
    const double rel = (a.targets.row(i) - p.targets.row(i)).norm() / a.targets.row(i).norm();
    EXPECT_LT(rel, 1e-3) << "sample " << i;
  }
}

TEST_F(DatasetTest, ThreadCountDoesNotChangeBits) {
  auto one = build_dataset(*model_, default_cfg(), 5, 2, 1);
  auto three = build_dataset(*model_, default_cfg(), 5, 2, 3);
  EXPECT_EQ(one.inputs, three.inputs);
  EXPECT_EQ(one.targets, three.targets);
}

TEST_F(DatasetTest, BinaryRoundTripAndCorruption) {
  auto ds = build_dataset(*model_, default_cfg(), 3, 2);
  const auto path = temp_path("dataset.bin");
  save_dataset(path, ds);
  auto back = load_dataset(path);
  EXPECT_EQ(back.inputs, ds.inputs);
  EXPECT_EQ(back.targets, ds.targets);
  EXPECT_EQ(back.n_train, 3);
  EXPECT_EQ(back.n_val, 2);
  EXPECT_EQ(back.meta["sampler"]["seed"], 42);

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 8);
  EXPECT_THROW(load_dataset(path), FormatError);
  {
    std::ofstream f(path, std::ios::binary);
    f << "JUNKJUNKJUNK";
  }
  EXPECT_THROW(load_dataset(path), FormatError);
  std::remove(path.c_str());
}

TEST_F(DatasetTest, CsvExport) {
  auto ds = build_dataset(*model_, default_cfg(), 1, 1);
  std::ostringstream os;
  write_dataset_csv(os, ds);
  std::istringstream is(os.str());
  std::string header, row1, row2, extra;
  std::getline(is, header);
  std::getline(is, row1);
  std::getline(is, row2);
  EXPECT_FALSE(std::getline(is, extra));
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 512);
  EXPECT_EQ(row1.rfind("train,", 0), 0u);
  EXPECT_EQ(row2.rfind("val,", 0), 0u);
}
