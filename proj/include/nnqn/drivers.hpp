#pragma once

// Reconstruction drivers: Gauss-Newton with a perturbation Jacobian,
// Broyden's method, and the NN-augmented quasi-Newton iteration that keeps
// the singular vectors of J(f0) fixed and predicts only the singular values.
//
// All three minimize L(f) = r^T W r + R(f), r = g - A(f), with the shared
// Gauss-Newton step (J^T W J + Gamma_R / 2) df = J^T W r - dR / 2.

#include "nnqn/core.hpp"
#include "nnqn/forward_cem.hpp"
#include "nnqn/parallel.hpp"
#include "nnqn/priors.hpp"
#include "nnqn/solvers.hpp"

#include <chrono>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace nnqn {

enum class SolverMethod { GaussNewton, Broyden, NNQN };

inline std::string to_string(SolverMethod m) {
  switch (m) {
    case SolverMethod::GaussNewton: return "gn";
    case SolverMethod::Broyden: return "broyden";
    case SolverMethod::NNQN: return "nnqn";
  }
  return "?";
}
inline SolverMethod solver_method_from_string(const std::string& s) {
  if (s == "gn") return SolverMethod::GaussNewton;
  if (s == "broyden") return SolverMethod::Broyden;
  if (s == "nnqn") return SolverMethod::NNQN;
  throw ConfigError("unknown solver method '" + s + "' (expected gn, broyden or nnqn)");
}

/// Type-erased forward map with its two Jacobian routes. `evaluate` must be
/// safe to call concurrently.
struct ForwardOperator {
  std::function<Vec(const Vec&)> evaluate;
  std::function<Mat(const Vec&)> jacobian_accurate;      // e.g. adjoint formula
  std::function<Mat(const Vec&)> jacobian_perturbation;  // one solve per column
};

inline ForwardOperator make_forward_operator(std::shared_ptr<const CemForwardModel> model, int threads = 1,
                                             PerturbationStep step = {}) {
  ForwardOperator op;
  op.evaluate = [model](const Vec& s) { return model->evaluate(s); };
  op.jacobian_accurate = [model](const Vec& s) { return model->jacobian_adjoint(ConductivityField(s)); };
  op.jacobian_perturbation = [model, threads, step](const Vec& s) {
    return jacobian_perturbation(*model, s, step, threads);
  };
  return op;
}

/// Everything a driver needs besides the method itself.
struct InverseProblemSpec {
  Vec data;             // g
  Vec weights;          // diag(W)
  Prior prior;          // R, dR, Gamma_R
  double sigma_exp = 1.0;
  int max_iterations = 100;
  double tolerance = 1e-2;
  double floor_fraction = 0.05;  // iterates are clamped at floor_fraction * sigma_exp
  bool diagnostics = false;      // per-iteration ||J_accurate - J||_2, excluded from timing
  int threads = 1;               // line-search evaluations

  Vec sigma0(Index n) const { return Vec::Constant(n, sigma_exp); }
  double lower_bound() const { return floor_fraction * sigma_exp; }

  void validate(Index n_outputs) const {
    if (!(sigma_exp > 0.0)) throw ConfigError("sigma_exp must be positive");
    if (!(tolerance > 0.0)) throw ConfigError("stopping tolerance must be positive");
    if (max_iterations < 1) throw ConfigError("max_iterations must be at least 1");
    if (!(floor_fraction > 0.0 && floor_fraction < 1.0)) throw ConfigError("floor_fraction must be in (0, 1)");
    require(data.size() == n_outputs && weights.size() == n_outputs, "data/weight length must equal output count");
    for (Index i = 0; i < weights.size(); ++i)
      if (!(weights[i] > 0.0) || !std::isfinite(weights[i])) throw DomainError("weights must be positive and finite");
  }
};

struct IterationRecord {
  int iteration = 0;  // 1-based
  double objective = 0.0;
  double step_length = 0.0;
  double criterion = 0.0;
  double wall_ms = 0.0;  // cumulative since the end of initialization
  double jac_err = std::numeric_limits<double>::quiet_NaN();
  int forward_evaluations = 0;      // main evaluations of A(f_k)
  int line_search_evaluations = 0;  // objective evaluations inside the search
  int jacobian_evaluations = 0;     // full Jacobian recomputations
  bool lifted = false;
  int pcg_iterations = 0;
};

enum class Termination { Converged, MaxIterations, NonDescent };

inline std::string to_string(Termination t) {
  switch (t) {
    case Termination::Converged: return "converged";
    case Termination::MaxIterations: return "max_iterations";
    case Termination::NonDescent: return "non_descent";
  }
  return "?";
}

struct SolverTrace {
  SolverMethod method = SolverMethod::GaussNewton;
  double initial_objective = 0.0;
  double init_ms = 0.0;
  std::vector<IterationRecord> records;
  std::vector<Vec> iterates;  // f_1, f_2, ... (f_0 is sigma0)
  Termination termination = Termination::MaxIterations;

  int iterations() const { return static_cast<int>(records.size()); }
  bool converged() const { return termination == Termination::Converged; }
  double total_ms() const { return records.empty() ? 0.0 : records.back().wall_ms; }
  int forward_evaluations() const {
    int n = 0;
    for (const auto& r : records) n += r.forward_evaluations;
    return n;
  }
  int jacobian_evaluations() const {
    int n = 0;
    for (const auto& r : records) n += r.jacobian_evaluations;
    return n;
  }
};

struct Reconstruction {
  Vec sigma;
  SolverTrace trace;
};

/// Predicts singular values from the current model output A(f_k); the
/// iterate itself is passed for oracle predictors used in ablations.
using SingularValueSource = std::function<Vec(const Vec& output, const Vec& sigma)>;

inline void write_trace_csv(std::ostream& os, const SolverTrace& t) {
  os << "iteration,objective,step_length,criterion,wall_ms,jac_err_spectral\n";
  os << std::setprecision(17);
  for (const auto& r : t.records) {
    os << r.iteration << ',' << r.objective << ',' << r.step_length << ',' << r.criterion << ',' << r.wall_ms << ',';
    if (std::isnan(r.jac_err))
      os << "";
    else
      os << r.jac_err;
    os << '\n';
  }
}

inline void write_trace_csv(const std::string& path, const SolverTrace& t) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  write_trace_csv(f, t);
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

inline double objective(const InverseProblemSpec& spec, const Vec& output, const Vec& sigma) {
  const Vec r = spec.data - output;
  return r.dot(spec.weights.asDiagonal() * r) + spec.prior.value(sigma);
}

inline Vec clamp_below(Vec v, double lo) { return v.cwiseMax(lo); }

// Per-iteration Jacobian supplied by each method. `step` receives the
// regularized direction; the base loop handles everything else.
struct StepPolicy {
  // Called once before the first iteration, inside the initialization window.
  std::function<void(const Vec& sigma0, const Vec& output0)> initialize;
  // Returns the direction for iterate sigma with output A(sigma). Fills
  // jacobian_evaluations and may expose the matrix used for diagnostics.
  std::function<QnStepResult(const Vec& sigma, const Vec& output, const PriorTerms& half_prior, const Vec& residual,
                             IterationRecord& rec)>
      step;
  // Jacobian used by the last step, densified (diagnostics only).
  std::function<Mat()> current_jacobian;
  // Called after the iterate moved from (s_old, g_old) to s_new with output g_new.
  std::function<void(const Vec& s_old, const Vec& g_old, const Vec& s_new, const Vec& g_new)> accept;
};

inline Reconstruction run_driver(const ForwardOperator& op, const InverseProblemSpec& spec, Index n_params,
                                 SolverMethod method, StepPolicy policy) {
  const auto t_init = Clock::now();
  Vec sigma = spec.sigma0(n_params);
  Vec output = op.evaluate(sigma);
  spec.validate(output.size());
  if (policy.initialize) policy.initialize(sigma, output);

  Reconstruction out;
  out.trace.method = method;
  out.trace.init_ms = ms_since(t_init);
  out.trace.initial_objective = objective(spec, output, sigma);
  const double lo = spec.lower_bound();

  double elapsed = 0.0;  // excludes diagnostics
  for (int k = 1; k <= spec.max_iterations; ++k) {
    auto t0 = Clock::now();
    IterationRecord rec;
    rec.iteration = k;
    output = op.evaluate(sigma);
    rec.forward_evaluations = 1;

    const PriorTerms pt = spec.prior.evaluate(sigma);
    const Vec residual = spec.data - output;
    const double phi0 = residual.dot(spec.weights.asDiagonal() * residual) + pt.value;
    PriorTerms half;
    half.value = 0.5 * pt.value;
    half.gradient = 0.5 * pt.gradient;
    half.curvature = 0.5 * pt.curvature;
    const QnStepResult dir = policy.step(sigma, output, half, residual, rec);
    rec.lifted = dir.lifted;
    rec.pcg_iterations = dir.pcg_iterations;

    // Grid search, evaluated in parallel; outputs kept for the accepted step.
    std::array<double, kStepGrid.size()> values{};
    std::array<Vec, kStepGrid.size()> outputs;
    std::array<Vec, kStepGrid.size()> candidates;
    parallel_for(static_cast<int>(kStepGrid.size()), spec.threads, [&](int i, int) {
      candidates[i] = clamp_below(sigma + kStepGrid[i] * dir.step, lo);
      try {
        outputs[i] = op.evaluate(candidates[i]);
        values[i] = objective(spec, outputs[i], candidates[i]);
      } catch (const NumericalError&) {
        values[i] = std::numeric_limits<double>::quiet_NaN();
      }
    });
    auto grid_index = [](double lam) {
      std::size_t i = 0;
      while (kStepGrid[i] != lam) ++i;
      return i;
    };
    const LineSearchResult ls = line_search([&](double lam) { return values[grid_index(lam)]; }, phi0);
    rec.line_search_evaluations = ls.evaluations;
    rec.step_length = ls.step;
    elapsed += ms_since(t0);

    if (spec.diagnostics && policy.current_jacobian) {
      const Mat Jacc = op.jacobian_accurate(sigma);
      rec.jac_err = spectral_norm(Jacc - policy.current_jacobian());
    }

    if (!ls.descent) {
      rec.objective = phi0;
      rec.criterion = 0.0;
      rec.step_length = 0.0;
      rec.wall_ms = elapsed;
      out.trace.records.push_back(rec);
      out.trace.iterates.push_back(sigma);
      out.trace.termination = Termination::NonDescent;
      break;
    }

    t0 = Clock::now();
    const std::size_t best = grid_index(ls.step);
    Vec sigma_new = candidates[best];
    rec.criterion = stopping_criterion(sigma_new, sigma);
    rec.objective = ls.value;
    if (policy.accept) policy.accept(sigma, output, sigma_new, outputs[best]);
    sigma = std::move(sigma_new);
    elapsed += ms_since(t0);
    rec.wall_ms = elapsed;
    out.trace.records.push_back(rec);
    out.trace.iterates.push_back(sigma);
    if (rec.criterion <= spec.tolerance) {
      out.trace.termination = Termination::Converged;
      break;
    }
  }
  out.sigma = sigma;
  return out;
}

}  // namespace detail

/// Gauss-Newton with the Jacobian recomputed by perturbation every iteration.
inline Reconstruction run_gauss_newton(const ForwardOperator& op, const InverseProblemSpec& spec, Index n_params) {
  require(static_cast<bool>(op.jacobian_perturbation), "run_gauss_newton needs a perturbation Jacobian");
  auto J = std::make_shared<Mat>();
  detail::StepPolicy p;
  p.step = [&op, &spec, J](const Vec& sigma, const Vec&, const PriorTerms& half, const Vec& r, IterationRecord& rec) {
    *J = op.jacobian_perturbation(sigma);
    rec.jacobian_evaluations = 1;
    return qn_step(*J, spec.weights, half.curvature, half.gradient, r);
  };
  p.current_jacobian = [J] { return *J; };
  return detail::run_driver(op, spec, n_params, SolverMethod::GaussNewton, std::move(p));
}

/// Broyden's method: J0 from the accurate route at sigma0, then rank-one
/// secant updates with dg = A(f_{k+1}) - A(f_k).
inline Reconstruction run_broyden(const ForwardOperator& op, const InverseProblemSpec& spec, Index n_params) {
  require(static_cast<bool>(op.jacobian_accurate), "run_broyden needs an initial Jacobian");
  auto J = std::make_shared<Mat>();
  detail::StepPolicy p;
  p.initialize = [&op, J](const Vec& s0, const Vec&) { *J = op.jacobian_accurate(s0); };
  p.step = [&spec, J](const Vec&, const Vec&, const PriorTerms& half, const Vec& r, IterationRecord&) {
    return qn_step(*J, spec.weights, half.curvature, half.gradient, r);
  };
  p.current_jacobian = [J] { return *J; };
  p.accept = [J](const Vec& s_old, const Vec& g_old, const Vec& s_new, const Vec& g_new) {
    const Vec df = s_new - s_old;
    if (df.squaredNorm() > 0.0) broyden_update_inplace(*J, df, g_new - g_old);
  };
  return detail::run_driver(op, spec, n_params, SolverMethod::Broyden, std::move(p));
}

/// NN-QN: anchor the singular vectors at sigma0 and predict the singular
/// values from A(f_k) each iteration. If `anchor` is null it is computed
/// from the accurate Jacobian at sigma0 inside the initialization window.
inline Reconstruction run_nnqn(const ForwardOperator& op, const InverseProblemSpec& spec, Index n_params,
                               SingularValueSource predictor, std::shared_ptr<const SVDAnchor> anchor = nullptr) {
  require(static_cast<bool>(predictor), "run_nnqn needs a singular-value predictor");
  auto a = std::make_shared<std::shared_ptr<const SVDAnchor>>(std::move(anchor));
  auto current = std::make_shared<Vec>();
  detail::StepPolicy p;
  p.initialize = [&op, a](const Vec& s0, const Vec&) {
    if (!*a) *a = std::make_shared<SVDAnchor>(thin_svd(op.jacobian_accurate(s0)));
    require((*a)->cols() == s0.size(), "anchor column count does not match the parameter count");
  };
  p.step = [&spec, a, current, predictor](const Vec& sigma, const Vec& output, const PriorTerms& half, const Vec& r,
                                          IterationRecord&) {
    Vec s = predictor(output, sigma);
    if (s.size() != (*a)->S0.size())
      throw ConfigError("predictor returns " + std::to_string(s.size()) + " singular values, anchor has " +
                        std::to_string((*a)->S0.size()));
    if (!s.allFinite()) throw NumericalError("predictor returned non-finite singular values");
    *current = s.cwiseMax(0.0);
    const FactoredJacobian J = assemble_learned_jacobian(**a, *current);
    return qn_step(J, spec.weights, half.curvature, half.gradient, r);
  };
  p.current_jacobian = [a, current] { return assemble_learned_jacobian(**a, *current).dense(); };
  return detail::run_driver(op, spec, n_params, SolverMethod::NNQN, std::move(p));
}

/// Predictor returning the exact singular values of the accurate Jacobian at
/// the current iterate (ablation: isolates the fixed-singular-vector error).
inline SingularValueSource oracle_singular_values(const ForwardOperator& op) {
  return [&op](const Vec&, const Vec& sigma) { return singular_values(op.jacobian_accurate(sigma)); };
}

inline Reconstruction run_method(SolverMethod m, const ForwardOperator& op, const InverseProblemSpec& spec,
                                 Index n_params, SingularValueSource predictor = {},
                                 std::shared_ptr<const SVDAnchor> anchor = nullptr) {
  switch (m) {
    case SolverMethod::GaussNewton: return run_gauss_newton(op, spec, n_params);
    case SolverMethod::Broyden: return run_broyden(op, spec, n_params);
    case SolverMethod::NNQN: return run_nnqn(op, spec, n_params, std::move(predictor), std::move(anchor));
  }
  throw ConfigError("unknown method");
}

}  // namespace nnqn
