#pragma once

// Randomized conductivity fields sigma = G^{-1} r + sigma_exp with
// G = I + (ell / h)^2 L (element adjacency Laplacian), and the supervised
// dataset of (model output, Jacobian singular values) pairs built from them.

#include "nnqn/binio.hpp"
#include "nnqn/core.hpp"
#include "nnqn/forward_cem.hpp"
#include "nnqn/mesh.hpp"
#include "nnqn/parallel.hpp"
#include "nnqn/solvers.hpp"

#include <Eigen/SparseCholesky>

#include <fstream>
#include <iomanip>
#include <random>
#include <string>

namespace nnqn {

struct FieldSamplerConfig {
  double sigma_exp = 1.0;
  double kernel_length_scale = 0.2;  // same length unit as the mesh
  double amplitude_std = 1.0;        // std of the white field r; 0 gives sigma_exp exactly
  double lower_bound = 0.1;
  // Per-sample amplitude factor 1 - spread * u with u ~ U(0, 1); 0 keeps
  // every sample at amplitude_std.
  double amplitude_spread = 0.0;
  // Puts the homogeneous field sigma_exp in the first training row.
  bool include_anchor = true;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(sigma_exp > lower_bound && lower_bound > 0.0))
      throw ConfigError("sampler needs sigma_exp > lower_bound > 0");
    if (!(kernel_length_scale > 0.0)) throw ConfigError("kernel_length_scale must be positive");
    if (!(amplitude_std >= 0.0) || !std::isfinite(amplitude_std))
      throw ConfigError("amplitude_std must be non-negative");
    if (!(amplitude_spread >= 0.0 && amplitude_spread <= 1.0))
      throw ConfigError("amplitude_spread must lie in [0, 1]");
  }
};

inline nlohmann::json to_json(const FieldSamplerConfig& c) {
  return {{"sigma_exp", c.sigma_exp},
          {"kernel_length_scale", c.kernel_length_scale},
          {"amplitude_std", c.amplitude_std},
          {"lower_bound", c.lower_bound},
          {"amplitude_spread", c.amplitude_spread},
          {"include_anchor", c.include_anchor},
          {"seed", c.rng_seed}};
}

/// Samples with a cached factorization of G. Sample i draws from its own
/// stream seeded by (seed, i), so results do not depend on scheduling.
class FieldSampler {
 public:
  FieldSampler(const Mesh& mesh, FieldSamplerConfig cfg) : cfg_(cfg), n_(mesh.n_elements()) {
    cfg_.validate();
    const double h = mesh.mean_element_diameter();
    const double c = (cfg_.kernel_length_scale * cfg_.kernel_length_scale) / (h * h);
    SpMat G = c * element_adjacency_laplacian(mesh);
    for (Index i = 0; i < n_; ++i) G.coeffRef(i, i) += 1.0;
    G.makeCompressed();
    ldlt_.compute(G);
    if (ldlt_.info() != Eigen::Success) throw NumericalError("sampler: smoothing operator factorization failed");
  }

  const FieldSamplerConfig& config() const { return cfg_; }
  Index size() const { return n_; }

  /// Smoothed field before shifting and clamping.
  Vec smooth(const Vec& r) const { return ldlt_.solve(r); }

  ConductivityField sample(std::uint64_t index) const {
    if (cfg_.amplitude_std == 0.0) return ConductivityField::constant(static_cast<int>(n_), cfg_.sigma_exp);
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.rng_seed), static_cast<std::uint32_t>(cfg_.rng_seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    double amplitude = cfg_.amplitude_std;
    if (cfg_.amplitude_spread > 0.0)
      amplitude *= 1.0 - cfg_.amplitude_spread * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    std::normal_distribution<double> normal(0.0, amplitude);
    Vec r(n_);
    for (Index i = 0; i < n_; ++i) r[i] = normal(rng);
    Vec s = smooth(r).array() + cfg_.sigma_exp;
    return ConductivityField(s.cwiseMax(cfg_.lower_bound));
  }

 private:
  FieldSamplerConfig cfg_;
  Index n_;
  Eigen::SimplicialLDLT<SpMat> ldlt_;
};

inline ConductivityField sample_conductivity(const Mesh& mesh, const FieldSamplerConfig& cfg,
                                             std::uint64_t index = 0) {
  return FieldSampler(mesh, cfg).sample(index);
}

/// Rows [0, n_train) are training samples, the remaining n_val validation.
struct TrainingSet {
  Mat inputs;   // N x m model outputs
  Mat targets;  // N x m singular values, non-increasing
  Index n_train = 0;
  Index n_val = 0;
  nlohmann::json meta;  // sampler config and provenance

  Index size() const { return inputs.rows(); }
  Index width() const { return inputs.cols(); }

  /// Shapes, split and finiteness only.
  void validate_shapes() const {
    if (inputs.rows() != targets.rows() || inputs.cols() != targets.cols())
      throw FormatError("dataset inputs and targets differ in shape");
    if (n_train < 0 || n_val < 0 || n_train + n_val != inputs.rows())
      throw FormatError("dataset split does not cover all rows");
    if (!inputs.allFinite() || !targets.allFinite()) throw FormatError("dataset contains non-finite values");
  }

  /// Adds the singular-value invariants: non-negative, non-increasing rows.
  void validate() const {
    validate_shapes();
    for (Index i = 0; i < targets.rows(); ++i)
      for (Index j = 0; j < targets.cols(); ++j) {
        if (targets(i, j) < 0.0) throw FormatError("dataset target is negative");
        if (j > 0 && targets(i, j) > targets(i, j - 1)) throw FormatError("dataset targets are not sorted");
      }
  }
};

/// Singular values of J(sigma), padded with zeros to the row count when the
/// mesh has fewer elements than measurements.
inline Vec jacobian_singular_values(const Mat& J) {
  Vec s = Vec::Zero(J.rows());
  const Vec sv = singular_values(J);
  s.head(sv.size()) = sv;
  return s;
}

enum class TargetJacobian { Adjoint, Perturbation };

inline TrainingSet build_dataset(const CemForwardModel& model, const FieldSamplerConfig& cfg, Index n_train,
                                 Index n_val, int threads = 1, TargetJacobian route = TargetJacobian::Adjoint) {
  if (n_train < 1 || n_val < 1) throw ConfigError("dataset needs at least one training and one validation sample");
  const FieldSampler sampler(model.problem().mesh, cfg);
  const Index n = n_train + n_val;
  const Index m = model.n_outputs();
  TrainingSet out;
  out.inputs.resize(n, m);
  out.targets.resize(n, m);
  out.n_train = n_train;
  out.n_val = n_val;
  parallel_for(static_cast<int>(n), threads, [&](int i, int) {
    try {
      const ConductivityField sigma =
          i == 0 && cfg.include_anchor ? ConductivityField::constant(static_cast<int>(model.n_params()), cfg.sigma_exp)
                                       : sampler.sample(static_cast<std::uint64_t>(i));
      const ForwardSolution sol = model.solve(sigma, route == TargetJacobian::Adjoint);
      const Mat J = route == TargetJacobian::Adjoint ? model.jacobian_from_solution(sol)
                                                     : jacobian_perturbation(model, sigma.values);
      out.inputs.row(i) = sol.measurements.transpose();
      out.targets.row(i) = jacobian_singular_values(J).transpose();
    } catch (const NumericalError& e) {
      throw NumericalError("dataset sample " + std::to_string(i) + ": " + e.what());
    }
  });
  out.meta = {{"sampler", to_json(cfg)}, {"n_elements", model.n_params()}};
  return out;
}

inline constexpr char kDatasetMagic[5] = "NNQD";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::string& path, const TrainingSet& ds) {
  ds.validate();
  nlohmann::json h = {{"n", ds.size()}, {"m", ds.width()}, {"split", {ds.n_train, ds.n_val}}, {"meta", ds.meta}};
  if (ds.meta.contains("sampler")) h["seed"] = ds.meta["sampler"]["seed"];
  std::vector<double> payload;
  payload.reserve(static_cast<size_t>(2 * ds.size() * ds.width()));
  for (const Mat* M : {&ds.inputs, &ds.targets})
    for (Index i = 0; i < M->rows(); ++i)
      for (Index j = 0; j < M->cols(); ++j) payload.push_back((*M)(i, j));
  write_blob(path, kDatasetMagic, kDatasetVersion, h, payload);
}

inline TrainingSet load_dataset(const std::string& path) {
  BinaryBlob b = read_blob(path, kDatasetMagic, kDatasetVersion);
  TrainingSet ds;
  try {
    const Index n = b.header.at("n").get<Index>();
    const Index m = b.header.at("m").get<Index>();
    ds.n_train = b.header.at("split").at(0).get<Index>();
    ds.n_val = b.header.at("split").at(1).get<Index>();
    ds.meta = b.header.value("meta", nlohmann::json::object());
    if (n < 0 || m < 0 || b.payload.size() != static_cast<size_t>(2 * n * m))
      throw FormatError(path + ": payload size does not match header");
    ds.inputs.resize(n, m);
    ds.targets.resize(n, m);
    size_t k = 0;
    for (Mat* M : {&ds.inputs, &ds.targets})
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) (*M)(i, j) = b.payload[k++];
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad dataset header: " + e.what());
  }
  ds.validate();
  return ds;
}

/// One row per sample: split, in_0..in_{m-1}, sv_0..sv_{m-1}.
inline void write_dataset_csv(std::ostream& os, const TrainingSet& ds) {
  os << "split";
  for (Index j = 0; j < ds.width(); ++j) os << ",in_" << j;
  for (Index j = 0; j < ds.width(); ++j) os << ",sv_" << j;
  os << '\n' << std::setprecision(17);
  for (Index i = 0; i < ds.size(); ++i) {
    os << (i < ds.n_train ? "train" : "val");
    for (Index j = 0; j < ds.width(); ++j) os << ',' << ds.inputs(i, j);
    for (Index j = 0; j < ds.width(); ++j) os << ',' << ds.targets(i, j);
    os << '\n';
  }
}

}  // namespace nnqn
