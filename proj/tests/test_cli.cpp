#include "nnqn/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace nnqn;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nnqn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("nnqn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }

  // Small unit-disk mesh shared by most tests.
  void make_small_mesh() {
    ASSERT_EQ(run_cli({"mesh", "--size", "1", "--elements", "300", "--out", dir.string()}).code, 0);
  }

  fs::path dir;
};

const char* kEasyPhantom =
    R"({"background": 1.0, "inclusions": [{"shape": "disk", "center": [0.35, 0.2], "size": 0.35, "value": 2.0}]})";

double pearson(const Vec& a, const Vec& b) {
  const Vec x = a.array() - a.mean(), y = b.array() - b.mean();
  return x.dot(y) / (x.norm() * y.norm());
}

}  // namespace

TEST_F(CliTest, HelpAndUsageErrors) {
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"mesh", "--elements", "many"}).code, 2);
}

TEST_F(CliTest, MeshDiskHitsTargetCount) {
  const auto r = run_cli({"mesh", "--shape", "disk", "--size", "14", "--elements", "2000", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto g = load_mesh(p("mesh.json"));
  EXPECT_NEAR(g.mesh.n_elements(), 2000, 200);
  EXPECT_EQ(g.layout.n_electrodes(), 16);
  EXPECT_NE(r.out.find("elements"), std::string::npos);
}

TEST_F(CliTest, MeshSquareHasExactArea) {
  ASSERT_EQ(run_cli({"mesh", "--shape", "square", "--elements", "500", "--out", dir.string()}).code, 0);
  const auto g = load_mesh(p("mesh.json"));
  EXPECT_NEAR(g.mesh.total_area(), 9.54 * 9.54, 1e-9 * 9.54 * 9.54);
}

TEST_F(CliTest, MeshCreatesMissingOutputDirectory) {
  const std::string nested = p("a/b/c");
  ASSERT_EQ(run_cli({"mesh", "--size", "1", "--elements", "100", "--out", nested}).code, 0);
  EXPECT_TRUE(fs::exists(fs::path(nested) / "mesh.json"));
}

TEST_F(CliTest, InvalidGeometryIsAValidationError) {
  EXPECT_EQ(run_cli({"mesh", "--size", "-1", "--out", dir.string()}).code, 2);
  EXPECT_EQ(run_cli({"mesh", "--shape", "hexagon", "--out", dir.string()}).code, 2);
  EXPECT_EQ(run_cli({"mesh", "--electrodes", "1", "--out", dir.string()}).code, 2);
}

TEST_F(CliTest, ConfigErrors) {
  write_text(p("typo.json"), R"({"geometry": {"radius": 3}})");
  EXPECT_EQ(run_cli({"mesh", "--config", p("typo.json"), "--out", dir.string()}).code, 2);
  write_text(p("broken.json"), "{ not json");
  EXPECT_EQ(run_cli({"mesh", "--config", p("broken.json"), "--out", dir.string()}).code, 2);
  EXPECT_EQ(run_cli({"mesh", "--config", p("missing.json"), "--out", dir.string()}).code, 2);
  write_text(p("badmethod.json"), R"({"solver": {"method": "bfgs"}})");
  EXPECT_EQ(run_cli({"mesh", "--config", p("badmethod.json"), "--out", dir.string()}).code, 2);
}

TEST_F(CliTest, ConfigFileDrivesGeometry) {
  write_text(p("cfg.json"), R"({"geometry": {"shape": "disk", "size": 2.0, "target_elements": 200}, "seed": 9})");
  ASSERT_EQ(run_cli({"mesh", "--config", p("cfg.json"), "--out", dir.string()}).code, 0);
  const auto j = read_json_file(p("mesh.json"));
  EXPECT_EQ(j["meta"]["config"]["geometry"]["size"], 2.0);
  EXPECT_EQ(j["meta"]["seed"], 9);
  EXPECT_NEAR(load_mesh(p("mesh.json")).mesh.total_area(), std::numbers::pi * 4.0, 0.02 * std::numbers::pi * 4.0);
}

TEST_F(CliTest, SimulateHomogeneousSatisfiesReciprocity) {
  make_small_mesh();
  write_text(p("ph.json"), R"({"background": 1.0, "inclusions": []})");
  const auto r = run_cli({"simulate", "--mesh", p("mesh.json"), "--phantom", p("ph.json"), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const CsvTable t = read_csv_table(p("measurements_clean.csv"));
  EXPECT_EQ(t.meta["reciprocity_ok"], true);
  EXPECT_LT(t.meta["reciprocity_residual"].get<double>(), 1e-8);
  EXPECT_EQ(t.values.rows(), 256);
  EXPECT_TRUE(fs::exists(p("truth.csv")));
}

TEST_F(CliTest, SimulateWithoutNoiseWritesIdenticalValues) {
  make_small_mesh();
  write_text(p("ph.json"), kEasyPhantom);
  ASSERT_EQ(run_cli({"simulate", "--mesh", p("mesh.json"), "--phantom", p("ph.json"), "--noise", "0", "--out",
                     dir.string()}).code, 0);
  EXPECT_EQ(read_measurement_csv(p("measurements.csv")).values, read_measurement_csv(p("measurements_clean.csv")).values);
}

TEST_F(CliTest, SimulateIsReproducibleUnderAFixedSeed) {
  make_small_mesh();
  write_text(p("ph.json"), kEasyPhantom);
  const std::vector<std::string> args{"simulate", "--mesh", p("mesh.json"), "--phantom", p("ph.json"),
                                      "--noise", "0.01", "--seed", "17", "--out", dir.string()};
  ASSERT_EQ(run_cli(args).code, 0);
  const std::string first = slurp(p("measurements.csv"));
  ASSERT_EQ(run_cli(args).code, 0);
  EXPECT_EQ(slurp(p("measurements.csv")), first);
  auto other = args;
  other[8] = "18";
  ASSERT_EQ(run_cli(other).code, 0);
  EXPECT_NE(slurp(p("measurements.csv")), first);
}

TEST_F(CliTest, PhantomOutsideTheDomainIsRejected) {
  make_small_mesh();
  write_text(p("ph.json"),
             R"({"background": 1.0, "inclusions": [{"shape": "disk", "center": [3, 0], "size": 0.3, "value": 2}]})");
  const auto r = run_cli({"simulate", "--mesh", p("mesh.json"), "--phantom", p("ph.json"), "--out", dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("outside"), std::string::npos);
}

TEST_F(CliTest, PredictorOfTheWrongWidthIsRejected) {
  make_small_mesh();
  write_text(p("ph.json"), kEasyPhantom);
  ASSERT_EQ(run_cli({"simulate", "--mesh", p("mesh.json"), "--phantom", p("ph.json"), "--out", dir.string()}).code, 0);
  save_weights(p("small.nnqn"), MLP::singular_value_network(10, 4));
  const auto r = run_cli({"reconstruct", "--mesh", p("mesh.json"), "--measurements", p("measurements.csv"),
                          "--method", "nnqn", "--weights", p("small.nnqn"), "--out", dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("predictor"), std::string::npos);
}

TEST_F(CliTest, TrainingDivergenceIsANumericalFailure) {
  TrainingSet ds;
  ds.inputs = Mat::Ones(12, 4);
  ds.targets = Mat::Constant(12, 4, 1e160);
  ds.n_train = 10;
  ds.n_val = 2;
  save_dataset(p("huge.bin"), ds);
  write_text(p("cfg.json"), R"({"training": {"normalize_targets": false}})");
  const auto r = run_cli({"train", "--dataset", p("huge.bin"), "--config", p("cfg.json"), "--out", dir.string()});
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_TRUE(fs::exists(p("history.csv")));
}

TEST_F(CliTest, PlotIsDeterministicAndRejectsMalformedInput) {
  make_small_mesh();
  write_text(p("ph.json"), kEasyPhantom);
  ASSERT_EQ(run_cli({"simulate", "--mesh", p("mesh.json"), "--phantom", p("ph.json"), "--out", dir.string()}).code, 0);
  const std::vector<std::string> args{"plot", "--mesh", p("mesh.json"), "--values", p("truth.csv"),
                                      "--out", p("plots")};
  ASSERT_EQ(run_cli(args).code, 0);
  const std::string first = slurp(p("plots/truth.ppm"));
  ASSERT_EQ(run_cli(args).code, 0);
  EXPECT_EQ(slurp(p("plots/truth.ppm")), first);
  EXPECT_EQ(first.substr(0, 3), "P6\n");

  write_text(p("bad.csv"), "element,cx,cy,sigma\n0,1,2\n");
  EXPECT_EQ(run_cli({"plot", "--mesh", p("mesh.json"), "--values", p("bad.csv"), "--out", p("plots")}).code, 2);
  write_text(p("bad_series.csv"), "a,b\n1,2\n");
  EXPECT_EQ(run_cli({"plot", "--series", p("bad_series.csv"), "--out", p("plots")}).code, 2);
  EXPECT_EQ(run_cli({"plot", "--out", p("plots")}).code, 2);
}

// Whole pipeline on a small problem with a briefly trained predictor.
TEST_F(CliTest, PipelineNnqnAgreesWithGaussNewtonOnEasyPhantom) {
  make_small_mesh();
  write_text(p("ph.json"), kEasyPhantom);
  write_text(p("cfg.json"), R"({"training": {"initial_lr": 1e-3, "max_epochs": 60},
                                "dataset": {"n_train": 400, "n_val": 100}, "prior": {"kind": "tv", "weight": 1.0}})");
  const std::string cfg = p("cfg.json"), mesh = p("mesh.json");
  ASSERT_EQ(run_cli({"simulate", "--config", cfg, "--mesh", mesh, "--phantom", p("ph.json"), "--noise", "0", "--out",
                     dir.string()}).code, 0);
  ASSERT_EQ(run_cli({"dataset", "--config", cfg, "--mesh", mesh, "--out", dir.string()}).code, 0);
  const auto tr = run_cli({"train", "--config", cfg, "--dataset", p("dataset.bin"), "--out", dir.string()});
  ASSERT_EQ(tr.code, 0) << tr.err;
  for (const char* m : {"gn", "nnqn"}) {
    const auto r = run_cli({"reconstruct", "--config", cfg, "--mesh", mesh, "--measurements", p("measurements.csv"),
                            "--method", m, "--weights", p("weights.nnqn"), "--out", p(m)});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const Vec gn = read_element_values(p("gn/reconstruction.csv"));
  const Vec nq = read_element_values(p("nnqn/reconstruction.csv"));
  const double c = pearson(gn, nq);
  std::cout << "  pearson(gn, nnqn) = " << c << '\n';
  EXPECT_GT(c, 0.9);
  const auto j = read_json_file(p("nnqn/reconstruction.json"));
  EXPECT_EQ(j["method"], "nnqn");
  EXPECT_EQ(j["mesh"], mesh);
  EXPECT_EQ(j["sigma"].size(), static_cast<size_t>(gn.size()));

  const auto b = run_cli({"benchmark", "--config", cfg, "--mesh", mesh, "--measurements", p("measurements.csv"),
                          "--weights", p("weights.nnqn"), "--out", p("bench")});
  ASSERT_EQ(b.code, 0) << b.err;
  const std::string table = slurp(p("bench/benchmark.csv"));
  EXPECT_NE(table.find("method,mean_time_s,mean_iterations,init_s,converged_runs"), std::string::npos);
  for (const char* f : {"jacobian_error.csv", "jacobian_error.ppm", "singular_values.csv", "singular_values.ppm"})
    EXPECT_TRUE(fs::exists(p(std::string("bench/") + f))) << f;
}
