#pragma once

// Complete Electrode Model forward map on linear triangles.

#include "nnqn/core.hpp"
#include "nnqn/mesh.hpp"
#include "nnqn/parallel.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <vector>

namespace nnqn {

/// Per-element conductivity. Entries must be strictly positive.
struct ConductivityField {
  Vec values;

  ConductivityField() = default;
  explicit ConductivityField(Vec v) : values(std::move(v)) {}
  static ConductivityField constant(int n, double value) { return ConductivityField(Vec::Constant(n, value)); }

  Index size() const { return values.size(); }
  void validate() const {
    for (Index i = 0; i < values.size(); ++i)
      if (!(values[i] > 0.0) || !std::isfinite(values[i]))
        throw DomainError("conductivity must be strictly positive (element " + std::to_string(i) + ")");
  }
};

/// Stacked electrode voltages, optionally with a per-entry noise model.
struct MeasurementFrame {
  Vec values;
  Vec noise_std;  // empty when no noise model is attached

  bool has_noise_model() const { return noise_std.size() > 0; }
};

struct CEMProblem {
  Mesh mesh;
  ElectrodeLayout layout;
  Vec contact_impedance;  // per electrode
  Mat injections;         // n_patterns x n_electrodes, rows sum to zero
  Mat measurements;       // n_meas x n_electrodes, voltage = row . U

  int n_electrodes() const { return layout.n_electrodes(); }
  int n_patterns() const { return static_cast<int>(injections.rows()); }
  int n_meas_per_pattern() const { return static_cast<int>(measurements.rows()); }
  int n_measurements() const { return n_patterns() * n_meas_per_pattern(); }

  void validate() const {
    const int L = n_electrodes();
    if (L < 2) throw ConfigError("CEM problem needs at least two electrodes");
    if (contact_impedance.size() != L) throw ConfigError("one contact impedance per electrode required");
    for (Index l = 0; l < L; ++l)
      if (!(contact_impedance[l] > 0.0)) throw ConfigError("contact impedances must be positive");
    if (injections.cols() != L || measurements.cols() != L) throw ConfigError("pattern width must equal electrode count");
    for (Index p = 0; p < injections.rows(); ++p)
      if (std::abs(injections.row(p).sum()) > 1e-12) throw ConfigError("injection pattern does not conserve current");
    std::vector<int> seen(mesh.boundary_edges.size(), 0);
    for (const auto& el : layout.electrodes) {
      if (el.empty()) throw ConfigError("electrode without edges");
      for (int e : el) {
        if (e < 0 || e >= static_cast<int>(seen.size())) throw ConfigError("electrode edge index out of range");
        if (seen[e]++) throw ConfigError("electrodes overlap");
      }
    }
  }
};

/// Adjacent drive / adjacent measurement protocol: pattern i drives
/// `amplitude` into electrode i and out of i+1; measurement j reads
/// U_j - U_{j+1}. Gives n_electrodes^2 measurements, ordered i*L + j.
inline CEMProblem make_adjacent_problem(const MeshWithElectrodes& geom, double contact_impedance = 1e-2,
                                        double amplitude = 1.0) {
  CEMProblem p;
  p.mesh = geom.mesh;
  p.layout = geom.layout;
  const int L = geom.layout.n_electrodes();
  p.contact_impedance = Vec::Constant(L, contact_impedance);
  p.injections = Mat::Zero(L, L);
  p.measurements = Mat::Zero(L, L);
  for (int i = 0; i < L; ++i) {
    p.injections(i, i) = amplitude;
    p.injections(i, (i + 1) % L) = -amplitude;
    p.measurements(i, i) = 1.0;
    p.measurements(i, (i + 1) % L) = -1.0;
  }
  p.validate();
  return p;
}

/// Gradients of the three P1 basis functions of each element (rows).
inline std::vector<Eigen::Matrix<double, 3, 2>> basis_gradients(const Mesh& mesh) {
  std::vector<Eigen::Matrix<double, 3, 2>> grads(mesh.elements.size());
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const auto& t = mesh.elements[e];
    const double two_a = 2.0 * mesh.signed_area(e);
    for (int i = 0; i < 3; ++i) {
      const Point& pj = mesh.nodes[t[(i + 1) % 3]];
      const Point& pk = mesh.nodes[t[(i + 2) % 3]];
      grads[e](i, 0) = (pj.y() - pk.y()) / two_a;
      grads[e](i, 1) = (pk.x() - pj.x()) / two_a;
    }
  }
  return grads;
}

/// P1 stiffness matrix of sum_e sigma_e * int_e grad(u) . grad(v).
inline SpMat stiffness_matrix(const Mesh& mesh, const ConductivityField& sigma) {
  require(sigma.size() == mesh.n_elements(), "conductivity length must equal element count");
  sigma.validate();
  const auto grads = basis_gradients(mesh);
  std::vector<Triplet> trip;
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const double a = mesh.area(e);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        trip.emplace_back(mesh.elements[e][i], mesh.elements[e][j],
                          sigma.values[e] * a * grads[e].row(i).dot(grads[e].row(j)));
  }
  SpMat K(mesh.n_nodes(), mesh.n_nodes());
  K.setFromTriplets(trip.begin(), trip.end());
  return K;
}

/// Assembled CEM system. Unknowns are nodal potentials followed by L-1
/// electrode coordinates b with U_l = b_l (l < L-1) and U_{L-1} = -sum(b),
/// which enforces sum_l U_l = 0 and leaves a symmetric positive definite
/// matrix.
struct CEMSystem {
  SpMat matrix;
  Mat rhs;  // one column per injection pattern
  int n_nodes = 0;
  int n_electrodes = 0;
};

namespace detail {

struct ContactEntry {
  int row;
  int col;
  double value;
};

// sigma-independent contact terms, already mapped to the grounded basis.
inline std::vector<ContactEntry> contact_entries(const CEMProblem& prob) {
  const Mesh& mesh = prob.mesh;
  const int nu = mesh.n_nodes();
  const int L = prob.n_electrodes();
  std::vector<ContactEntry> out;
  std::vector<std::vector<std::pair<int, double>>> load(L);  // int_E phi_i per electrode
  std::vector<double> len(L, 0.0);
  for (int l = 0; l < L; ++l) {
    const double inv_z = 1.0 / prob.contact_impedance[l];
    for (int be : prob.layout.electrodes[l]) {
      const auto& ed = mesh.boundary_edges[be];
      const double h = mesh.edge_length(ed);
      len[l] += h;
      out.push_back({ed[0], ed[0], inv_z * h / 3.0});
      out.push_back({ed[1], ed[1], inv_z * h / 3.0});
      out.push_back({ed[0], ed[1], inv_z * h / 6.0});
      out.push_back({ed[1], ed[0], inv_z * h / 6.0});
      load[l].push_back({ed[0], -inv_z * h / 2.0});
      load[l].push_back({ed[1], -inv_z * h / 2.0});
    }
  }
  const int last = L - 1;
  for (int k = 0; k < L - 1; ++k) {
    for (const auto& [i, v] : load[k]) {
      out.push_back({i, nu + k, v});
      out.push_back({nu + k, i, v});
    }
    for (const auto& [i, v] : load[last]) {
      out.push_back({i, nu + k, -v});
      out.push_back({nu + k, i, -v});
    }
    for (int k2 = 0; k2 < L - 1; ++k2) {
      double v = len[last] / prob.contact_impedance[last];
      if (k == k2) v += len[k] / prob.contact_impedance[k];
      out.push_back({nu + k, nu + k2, v});
    }
  }
  return out;
}

}  // namespace detail

inline Mat grounded_rhs(const CEMProblem& prob, const Mat& currents) {
  const int nu = prob.mesh.n_nodes();
  const int L = prob.n_electrodes();
  Mat rhs = Mat::Zero(nu + L - 1, currents.rows());
  for (Index p = 0; p < currents.rows(); ++p)
    for (int k = 0; k < L - 1; ++k) rhs(nu + k, p) = currents(p, k) - currents(p, L - 1);
  return rhs;
}

inline CEMSystem assemble_system(const CEMProblem& prob, const ConductivityField& sigma) {
  require(sigma.size() == prob.mesh.n_elements(), "conductivity length must equal element count");
  sigma.validate();
  const int nu = prob.mesh.n_nodes();
  const int L = prob.n_electrodes();
  const auto grads = basis_gradients(prob.mesh);
  std::vector<Triplet> trip;
  for (int e = 0; e < prob.mesh.n_elements(); ++e) {
    const double a = prob.mesh.area(e);
    const auto& t = prob.mesh.elements[e];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) trip.emplace_back(t[i], t[j], sigma.values[e] * a * grads[e].row(i).dot(grads[e].row(j)));
  }
  for (const auto& c : detail::contact_entries(prob)) trip.emplace_back(c.row, c.col, c.value);
  CEMSystem sys;
  sys.n_nodes = nu;
  sys.n_electrodes = L;
  sys.matrix.resize(nu + L - 1, nu + L - 1);
  sys.matrix.setFromTriplets(trip.begin(), trip.end());
  sys.rhs = grounded_rhs(prob, prob.injections);
  return sys;
}

/// Potentials for every injection pattern at one conductivity.
struct ForwardSolution {
  Vec measurements;        // n_patterns * n_meas_per_pattern
  Mat nodal;               // n_nodes x n_patterns
  Mat electrode;           // n_electrodes x n_patterns
  Mat measurement_fields;  // n_nodes x n_meas_per_pattern (adjoint fields), may be empty
};

/// Immutable, thread-safe CEM forward operator. Assembly reuses a fixed
/// sparsity pattern; each concurrent caller borrows its own factorization
/// workspace from an internal pool.
class CemForwardModel {
 public:
  explicit CemForwardModel(CEMProblem problem) : prob_(std::move(problem)) {
    prob_.validate();
    const Mesh& mesh = prob_.mesh;
    nu_ = mesh.n_nodes();
    ne_ = prob_.n_electrodes();
    grads_ = basis_gradients(mesh);
    areas_.resize(mesh.n_elements());
    for (int e = 0; e < mesh.n_elements(); ++e) areas_[e] = mesh.area(e);

    // Pattern with placeholder values, then locate the storage slot of
    // every element and contact contribution.
    std::vector<Triplet> trip;
    for (const auto& t : mesh.elements)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) trip.emplace_back(t[i], t[j], 1.0);
    const auto contacts = detail::contact_entries(prob_);
    for (const auto& c : contacts) trip.emplace_back(c.row, c.col, 1.0);
    const int dof = nu_ + ne_ - 1;
    pattern_.resize(dof, dof);
    pattern_.setFromTriplets(trip.begin(), trip.end());
    pattern_.makeCompressed();

    auto slot = [this](int r, int c) {
      const int* inner = pattern_.innerIndexPtr();
      const int* outer = pattern_.outerIndexPtr();
      const int* it = std::lower_bound(inner + outer[c], inner + outer[c + 1], r);
      return static_cast<int>(it - inner);
    };
    element_slots_.resize(mesh.elements.size());
    element_unit_.resize(mesh.elements.size());
    for (int e = 0; e < mesh.n_elements(); ++e) {
      const auto& t = mesh.elements[e];
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          element_slots_[e][3 * i + j] = slot(t[i], t[j]);
          element_unit_[e][3 * i + j] = areas_[e] * grads_[e].row(i).dot(grads_[e].row(j));
        }
    }
    base_values_ = Vec::Zero(pattern_.nonZeros());
    for (const auto& c : contacts) base_values_[slot(c.row, c.col)] += c.value;

    rhs_inject_ = grounded_rhs(prob_, prob_.injections);
    rhs_measure_ = grounded_rhs(prob_, prob_.measurements);
  }

  const CEMProblem& problem() const { return prob_; }
  int n_outputs() const { return prob_.n_measurements(); }
  int n_params() const { return prob_.mesh.n_elements(); }

  /// System matrix at sigma, assembled through the cached pattern.
  SpMat system_matrix(const ConductivityField& sigma) const {
    require(sigma.size() == n_params(), "conductivity length must equal element count");
    sigma.validate();
    SpMat A = pattern_;
    Eigen::Map<Vec> vals(A.valuePtr(), A.nonZeros());
    vals = base_values_;
    for (int e = 0; e < n_params(); ++e) {
      const double s = sigma.values[e];
      for (int k = 0; k < 9; ++k) vals[element_slots_[e][k]] += s * element_unit_[e][k];
    }
    return A;
  }

  /// Solves every injection pattern. With `with_adjoint`, also solves the
  /// measurement patterns as currents (needed for the adjoint Jacobian).
  ForwardSolution solve(const ConductivityField& sigma, bool with_adjoint = false) const {
    SpMat A = system_matrix(sigma);
    auto ws = acquire();
    ws->ldlt.factorize(A);
    if (ws->ldlt.info() != Eigen::Success) {
      release(std::move(ws));
      throw NumericalError(diagnose_failure(A));
    }
    ForwardSolution out;
    Mat x = ws->ldlt.solve(rhs_inject_);
    Mat xm;
    if (with_adjoint) xm = ws->ldlt.solve(rhs_measure_);
    release(std::move(ws));
    if (!x.allFinite()) throw NumericalError("forward solve produced non-finite potentials");

    const int P = prob_.n_patterns();
    const int Q = prob_.n_meas_per_pattern();
    out.nodal = x.topRows(nu_);
    out.electrode = electrode_potentials(x);
    out.measurements.resize(static_cast<Index>(P) * Q);
    const Mat volt = prob_.measurements * out.electrode;  // Q x P
    for (int p = 0; p < P; ++p)
      for (int q = 0; q < Q; ++q) out.measurements[static_cast<Index>(p) * Q + q] = volt(q, p);
    if (with_adjoint) out.measurement_fields = xm.topRows(nu_);
    return out;
  }

  Vec evaluate(const Vec& sigma) const { return solve(ConductivityField(sigma)).measurements; }

  /// Electrode currents (1/z_l) int_{E_l} (U_l - u) ds for each pattern.
  Mat electrode_currents(const ForwardSolution& sol) const {
    const Mesh& mesh = prob_.mesh;
    Mat I = Mat::Zero(ne_, sol.nodal.cols());
    for (int l = 0; l < ne_; ++l) {
      const double inv_z = 1.0 / prob_.contact_impedance[l];
      for (int be : prob_.layout.electrodes[l]) {
        const auto& ed = mesh.boundary_edges[be];
        const double h = mesh.edge_length(ed);
        for (Index p = 0; p < sol.nodal.cols(); ++p) {
          const double mean_u = 0.5 * (sol.nodal(ed[0], p) + sol.nodal(ed[1], p));
          I(l, p) += inv_z * h * (sol.electrode(l, p) - mean_u);
        }
      }
    }
    return I;
  }

  /// dV_{p,q}/dsigma_e = -area_e * grad(u_p) . grad(w_q) on element e.
  Mat jacobian_adjoint(const ConductivityField& sigma) const {
    const ForwardSolution sol = solve(sigma, true);
    return jacobian_from_solution(sol);
  }

  Mat jacobian_from_solution(const ForwardSolution& sol) const {
    require(sol.measurement_fields.cols() == prob_.n_meas_per_pattern(), "solution lacks adjoint fields");
    const Mesh& mesh = prob_.mesh;
    const int P = prob_.n_patterns();
    const int Q = prob_.n_meas_per_pattern();
    const int N = mesh.n_elements();
    Mat J(static_cast<Index>(P) * Q, N);
    Mat gu(2, P), gw(2, Q);
    for (int e = 0; e < N; ++e) {
      const auto& t = mesh.elements[e];
      gu.setZero();
      gw.setZero();
      for (int i = 0; i < 3; ++i) {
        gu += grads_[e].row(i).transpose() * sol.nodal.row(t[i]);
        gw += grads_[e].row(i).transpose() * sol.measurement_fields.row(t[i]);
      }
      const Mat block = -areas_[e] * (gw.transpose() * gu);  // Q x P
      for (int p = 0; p < P; ++p)
        for (int q = 0; q < Q; ++q) J(static_cast<Index>(p) * Q + q, e) = block(q, p);
    }
    return J;
  }

 private:
  struct Workspace {
    Eigen::SimplicialLDLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt;
  };

  std::unique_ptr<Workspace> acquire() const {
    {
      std::lock_guard lock(pool_mutex_);
      if (!pool_.empty()) {
        auto ws = std::move(pool_.back());
        pool_.pop_back();
        return ws;
      }
    }
    auto ws = std::make_unique<Workspace>();
    ws->ldlt.analyzePattern(pattern_);
    return ws;
  }
  void release(std::unique_ptr<Workspace> ws) const {
    std::lock_guard lock(pool_mutex_);
    pool_.push_back(std::move(ws));
  }

  Mat electrode_potentials(const Mat& x) const {
    Mat U(ne_, x.cols());
    for (Index p = 0; p < x.cols(); ++p) {
      double s = 0.0;
      for (int k = 0; k < ne_ - 1; ++k) {
        U(k, p) = x(nu_ + k, p);
        s += U(k, p);
      }
      U(ne_ - 1, p) = -s;
    }
    return U;
  }

  std::string diagnose_failure(const SpMat& A) const {
    std::ostringstream os;
    os << "CEM system factorization failed (" << A.rows() << " unknowns";
    int tiny = 0;
    for (int e = 0; e < n_params(); ++e)
      if (areas_[e] < 1e-14) ++tiny;
    os << ", " << tiny << " near-degenerate elements)";
    return os.str();
  }

  CEMProblem prob_;
  int nu_ = 0;
  int ne_ = 0;
  std::vector<Eigen::Matrix<double, 3, 2>> grads_;
  std::vector<double> areas_;
  SpMat pattern_;
  std::vector<std::array<int, 9>> element_slots_;
  std::vector<std::array<double, 9>> element_unit_;
  Vec base_values_;
  Mat rhs_inject_;
  Mat rhs_measure_;
  mutable std::mutex pool_mutex_;
  mutable std::vector<std::unique_ptr<Workspace>> pool_;
};

/// Forward-difference step h_j = max(relative * sigma_j, absolute).
struct PerturbationStep {
  double relative = 1e-4;
  double absolute = 1e-8;
};

/// Forward-difference Jacobian of any map with a const, thread-safe
/// `Vec evaluate(const Vec&)`. One extra evaluation per column.
template <class Model>
Mat jacobian_perturbation(const Model& model, const Vec& sigma, PerturbationStep step = {}, int threads = 1) {
  const Vec base = model.evaluate(sigma);
  Mat J(base.size(), sigma.size());
  parallel_for(static_cast<int>(sigma.size()), threads, [&](int j, int) {
    Vec s = sigma;
    const double h = std::max(step.relative * sigma[j], step.absolute);
    s[j] += h;
    J.col(j) = (model.evaluate(s) - base) / h;
  });
  return J;
}

/// Adds zero-mean Gaussian noise with std_i = level * (|g_i| + floor_fraction * max|g|).
/// The std is recorded for weighting. Level 0 returns the input unchanged.
inline MeasurementFrame add_noise(const MeasurementFrame& frame, double noise_level, std::uint64_t seed,
                                  double floor_fraction = 0.01) {
  if (!(noise_level >= 0.0)) throw DomainError("noise level must be non-negative");
  if (noise_level == 0.0) return frame;
  MeasurementFrame out;
  out.values = frame.values;
  const double gmax = frame.values.cwiseAbs().maxCoeff();
  out.noise_std = noise_level * (frame.values.cwiseAbs().array() + floor_fraction * gmax).matrix();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < out.values.size(); ++i) out.values[i] += out.noise_std[i] * normal(rng);
  return out;
}

/// The std model add_noise would use at `noise_level`, without drawing noise.
inline Vec nominal_noise_std(const Vec& g, double noise_level, double floor_fraction = 0.01) {
  const double gmax = g.cwiseAbs().maxCoeff();
  return noise_level * (g.cwiseAbs().array() + floor_fraction * gmax).matrix();
}

}  // namespace nnqn
