#pragma once

// Linear-algebra building blocks of the quasi-Newton reconstruction:
// SVD anchoring, the regularized normal-equations step, the reduced
// (factored) update, Broyden's rank-one update and the step-length search.

#include "nnqn/core.hpp"

#include <Eigen/SVD>
#include <Eigen/SparseCholesky>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace nnqn {

/// Thin SVD J(f0) = U0 diag(S0) V0^T, singular values descending.
struct SVDAnchor {
  Mat U0;  // m x m
  Mat V0;  // n x m
  Vec S0;  // m

  Index rows() const { return U0.rows(); }
  Index cols() const { return V0.rows(); }
  Mat reconstruct() const { return U0 * S0.asDiagonal() * V0.transpose(); }
};

inline SVDAnchor thin_svd(const Mat& J) {
  require(J.rows() <= J.cols(), "thin_svd expects rows <= cols");
  if (!J.allFinite()) throw NumericalError("thin_svd: non-finite matrix entries");
  Eigen::BDCSVD<Mat> svd(J, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SVDAnchor a;
  a.U0 = svd.matrixU();
  a.V0 = svd.matrixV();
  a.S0 = svd.singularValues();
  return a;
}

/// Singular values only, descending.
inline Vec singular_values(const Mat& J) {
  if (!J.allFinite()) throw NumericalError("singular_values: non-finite matrix entries");
  Eigen::BDCSVD<Mat> svd(J);
  return svd.singularValues();
}

/// J_L = U0 diag(s) V0^T kept in factored form.
struct FactoredJacobian {
  const SVDAnchor* anchor = nullptr;
  Vec s;

  Index rows() const { return anchor->U0.rows(); }
  Index cols() const { return anchor->V0.rows(); }
  Mat dense() const { return anchor->U0 * s.asDiagonal() * anchor->V0.transpose(); }
  Vec apply(const Vec& x) const { return anchor->U0 * (s.asDiagonal() * (anchor->V0.transpose() * x)); }
  Vec apply_transpose(const Vec& y) const { return anchor->V0 * (s.asDiagonal() * (anchor->U0.transpose() * y)); }
};

inline FactoredJacobian assemble_learned_jacobian(const SVDAnchor& anchor, const Vec& s_pred) {
  require(s_pred.size() == anchor.S0.size(), "predicted singular values have the wrong length");
  for (Index i = 0; i < s_pred.size(); ++i)
    if (!(s_pred[i] >= 0.0)) throw ContractError("predicted singular values must be non-negative");
  return FactoredJacobian{&anchor, s_pred};
}

struct QnStepResult {
  Vec step;
  bool lifted = false;     // diagonal lift applied to a singular system
  int pcg_iterations = 0;  // 0 for the dense path
};

namespace detail {

// Dense solve of (Gamma + Z Z^T) x = b, lifting by eps*I (eps =
// 1e-12 trace / n) when the matrix is singular to working precision.
inline QnStepResult solve_dense_normal(const Mat& Z, const SpMat& gamma, const Vec& b) {
  const Index n = b.size();
  Mat H = Mat::Zero(n, n);
  if (gamma.nonZeros() > 0) H = Mat(gamma);
  H.selfadjointView<Eigen::Lower>().rankUpdate(Z);
  H.triangularView<Eigen::StrictlyUpper>() = H.transpose();
  QnStepResult out;
  Eigen::LLT<Mat> llt(H);
  if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-14)) {
    const double eps = 1e-12 * H.trace() / static_cast<double>(n);
    H.diagonal().array() += eps;
    llt.compute(H);
    out.lifted = true;
    if (llt.info() != Eigen::Success) throw NumericalError("qn_step: normal matrix is not positive definite");
  }
  out.step = llt.solve(b);
  return out;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// X <- L^{-1} X for the unit lower-triangular factor of a SimplicialLDLT.
// X is row-major so each elimination is one contiguous row update across
// all right-hand sides.
template <class Factor>
void unit_lower_solve_rows(const Factor& f, RowMat& X) {
  const auto& L = f.matrixL().nestedExpression();
  for (Index j = 0; j < L.outerSize(); ++j) {
    for (typename std::decay_t<decltype(L)>::InnerIterator it(L, j); it; ++it) {
      if (it.row() > j) X.row(it.row()).noalias() -= it.value() * X.row(j);
    }
  }
}

// (Gamma + Z Z^T) x = b with Z = V F (F = identity when null), by conjugate
// gradients preconditioned with (Gamma + eps I + Z Z^T)^{-1} applied through
// the Woodbury identity. The preconditioner shares eigenvectors with the
// operator, so the iteration count depends only on eps relative to the
// smallest eigenvalue.
inline std::optional<QnStepResult> solve_low_rank_pcg(const Mat& V, const Mat* F, const SpMat& gamma, const Vec& b) {
  const Index n = b.size();
  const Index k = V.cols();
  const double mean_diag = gamma.diagonal().sum() / static_cast<double>(n);
  if (!(mean_diag > 0.0)) return std::nullopt;
  const double eps = 1e-6 * mean_diag;
  SpMat K = gamma;
  for (Index i = 0; i < n; ++i) K.coeffRef(i, i) += eps;
  Eigen::SimplicialLDLT<SpMat> kfac(K);
  if (kfac.info() != Eigen::Success) return std::nullopt;

  // G = V^T K^{-1} V = (L^{-1} P V)^T D^{-1} (L^{-1} P V)
  RowMat X = kfac.permutationP() * V;
  unit_lower_solve_rows(kfac, X);
  const Vec dinv = kfac.vectorD().cwiseInverse();
  if (!dinv.allFinite() || (dinv.array() <= 0.0).any()) return std::nullopt;
  const RowMat Xs = dinv.cwiseSqrt().asDiagonal() * X;
  Mat G = Mat::Zero(k, k);
  G.selfadjointView<Eigen::Lower>().rankUpdate(Xs.transpose());
  G.triangularView<Eigen::StrictlyUpper>() = G.transpose();
  Mat C = F ? Mat(F->transpose() * G * *F) : G;
  C.diagonal().array() += 1.0;
  Eigen::LLT<Mat> cfac(C);
  if (cfac.info() != Eigen::Success) return std::nullopt;

  auto z_apply = [&](const Vec& c) -> Vec { return F ? Vec(V * (*F * c)) : Vec(V * c); };
  auto zt_apply = [&](const Vec& v) -> Vec {
    Vec t = V.transpose() * v;
    return F ? Vec(F->transpose() * t) : t;
  };
  auto precond = [&](const Vec& v) -> Vec {
    const Vec kv = kfac.solve(v);
    return kfac.solve(v - z_apply(cfac.solve(zt_apply(kv))));
  };
  auto apply = [&](const Vec& v) -> Vec { return gamma * v + z_apply(zt_apply(v)); };

  QnStepResult out;
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    out.step = Vec::Zero(n);
    return out;
  }
  Vec x = precond(b);
  Vec r = b - apply(x);
  Vec z = precond(r);
  Vec p = z;
  double rz = r.dot(z);
  constexpr int max_iter = 200;
  for (int it = 0; it < max_iter; ++it) {
    if (r.norm() <= 1e-13 * bnorm) {
      out.step = std::move(x);
      out.pcg_iterations = it;
      return out;
    }
    const Vec Ap = apply(p);
    const double pAp = p.dot(Ap);
    if (!(pAp > 0.0)) return std::nullopt;
    const double alpha = rz / pAp;
    x += alpha * p;
    r -= alpha * Ap;
    z = precond(r);
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  return std::nullopt;
}

}  // namespace detail

/// Problems with more unknowns than this use the low-rank + sparse solver.
inline constexpr Index kDenseStepLimit = 400;

/// Solves (Z Z^T + Gamma_R) step = rhs with Z = V F (F = identity when
/// null); the common core of every quasi-Newton direction. J^T W J is never
/// formed on its own.
inline QnStepResult solve_normal_equations(const Mat& V, const Mat* F, const SpMat& gamma_r, const Vec& rhs) {
  if (!V.allFinite() || !rhs.allFinite() || (F && !F->allFinite())) throw NumericalError("qn_step: non-finite inputs");
  if (rhs.size() > kDenseStepLimit && gamma_r.nonZeros() > 0) {
    if (auto r = detail::solve_low_rank_pcg(V, F, gamma_r, rhs)) return *r;
  }
  return detail::solve_dense_normal(F ? Mat(V * *F) : V, gamma_r, rhs);
}

inline QnStepResult solve_normal_equations(const Mat& Z, const SpMat& gamma_r, const Vec& rhs) {
  return solve_normal_equations(Z, nullptr, gamma_r, rhs);
}

/// Regularized weighted step (J^T W J + Gamma_R) dx = J^T W r - dR.
inline QnStepResult qn_step(const Mat& J, const Vec& w, const SpMat& gamma_r, const Vec& grad_r, const Vec& residual) {
  require(J.rows() == residual.size() && w.size() == residual.size(), "qn_step: residual/weight size mismatch");
  require(grad_r.size() == J.cols(), "qn_step: gradient size mismatch");
  require(gamma_r.rows() == J.cols() || gamma_r.nonZeros() == 0, "qn_step: curvature size mismatch");
  if (!J.allFinite() || !w.allFinite() || !grad_r.allFinite() || !residual.allFinite())
    throw NumericalError("qn_step: non-finite inputs");
  const Vec sw = w.cwiseSqrt();
  const Mat Z = J.transpose() * sw.asDiagonal();
  const Vec rhs = J.transpose() * (w.asDiagonal() * residual) - grad_r;
  SpMat g = gamma_r.rows() == J.cols() ? gamma_r : SpMat(J.cols(), J.cols());
  return solve_normal_equations(Z, g, rhs);
}

/// Components of a factored Jacobian with s_i <= this fraction of max(s)
/// are dropped from the step; their effect is below working precision.
inline constexpr double kFactoredDropTolerance = 1e-10;

/// Same step with the learned Jacobian in factored form. With
/// N = U_r^T W U_r = R R^T over the kept components, J^T W J = V_r F F^T V_r^T
/// where F = diag(s_r) R, so only an r x r core is ever factorized.
inline QnStepResult qn_step(const FactoredJacobian& J, const Vec& w, const SpMat& gamma_r, const Vec& grad_r,
                            const Vec& residual) {
  require(J.rows() == residual.size() && w.size() == residual.size(), "qn_step: residual/weight size mismatch");
  require(grad_r.size() == J.cols(), "qn_step: gradient size mismatch");
  if (!J.s.allFinite() || !w.allFinite() || !grad_r.allFinite() || !residual.allFinite())
    throw NumericalError("qn_step: non-finite inputs");
  const SVDAnchor& a = *J.anchor;
  const Vec rhs = J.apply_transpose(w.asDiagonal() * residual) - grad_r;
  SpMat g = gamma_r.rows() == J.cols() ? gamma_r : SpMat(J.cols(), J.cols());

  const double cut = kFactoredDropTolerance * J.s.maxCoeff();
  std::vector<Index> keep;
  for (Index i = 0; i < J.s.size(); ++i)
    if (J.s[i] > cut) keep.push_back(i);
  const Index r = static_cast<Index>(keep.size());
  Mat Vr(J.cols(), r), Ur(J.rows(), r);
  Vec sr(r);
  for (Index c = 0; c < r; ++c) {
    Vr.col(c) = a.V0.col(keep[c]);
    Ur.col(c) = a.U0.col(keep[c]);
    sr[c] = J.s[keep[c]];
  }
  const Mat N = Ur.transpose() * w.asDiagonal() * Ur;
  Eigen::LLT<Mat> nfac(N);
  if (nfac.info() != Eigen::Success) throw NumericalError("qn_step: weighted anchor Gram matrix is not positive definite");
  const Mat F = sr.asDiagonal() * Mat(nfac.matrixL());
  return solve_normal_equations(Vr, &F, g, rhs);
}

struct ReducedUpdateResult {
  Vec step;
  int truncated = 0;  // singular values dropped
};

/// Unweighted, unregularized update dx = V0 diag(1/s) U0^T r. Singular
/// values below rel_threshold * max(s), or beyond `rank` when given, are
/// dropped.
inline ReducedUpdateResult reduced_update(const SVDAnchor& anchor, const Vec& s_pred, const Vec& residual,
                                          std::optional<Index> rank = std::nullopt, double rel_threshold = 1e-8) {
  require(s_pred.size() == anchor.S0.size() && residual.size() == anchor.U0.rows(), "reduced_update: size mismatch");
  const double cut = rel_threshold * s_pred.maxCoeff();
  Vec inv = Vec::Zero(s_pred.size());
  ReducedUpdateResult out;
  for (Index i = 0; i < s_pred.size(); ++i) {
    if (s_pred[i] > cut && (!rank || i < *rank))
      inv[i] = 1.0 / s_pred[i];
    else
      ++out.truncated;
  }
  out.step = anchor.V0 * (inv.asDiagonal() * (anchor.U0.transpose() * residual));
  return out;
}

/// In-place Broyden update J += (dg - J df) df^T / (df^T df).
inline void broyden_update_inplace(Mat& J, const Vec& df, const Vec& dg) {
  require(J.cols() == df.size() && J.rows() == dg.size(), "broyden_update: size mismatch");
  const double dd = df.squaredNorm();
  if (!(dd > 0.0)) throw ContractError("broyden_update: zero step");
  const Vec corr = (dg - J * df) / dd;
  J.noalias() += corr * df.transpose();
}

inline Mat broyden_update(const Mat& J, const Vec& df, const Vec& dg) {
  Mat out = J;
  broyden_update_inplace(out, df, dg);
  return out;
}

/// ||f_next - f_curr||^2 / ||f_curr||^2
inline double stopping_criterion(const Vec& f_next, const Vec& f_curr) {
  require(f_next.size() == f_curr.size(), "stopping_criterion: size mismatch");
  const double d = f_curr.squaredNorm();
  if (!(d > 0.0)) throw ContractError("stopping_criterion: current iterate is zero");
  return (f_next - f_curr).squaredNorm() / d;
}

inline constexpr std::array<double, 7> kStepGrid{2.0, 1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125};

struct LineSearchResult {
  double step = 0.0;
  double value = 0.0;
  bool descent = true;
  int evaluations = 0;
};

/// Best-of-grid search over kStepGrid. phi(lambda) is the objective at
/// sigma_k + lambda * dx; phi0 its value at lambda = 0. Ties keep the
/// larger step. When no grid point reaches phi0, the smallest step is
/// returned with descent = false.
template <class Phi>
LineSearchResult line_search(Phi&& phi, double phi0) {
  LineSearchResult best;
  best.value = std::numeric_limits<double>::infinity();
  bool any_finite = false;
  for (double lam : kStepGrid) {
    const double v = phi(lam);
    ++best.evaluations;
    if (!std::isfinite(v)) continue;
    any_finite = true;
    if (v < best.value) {
      best.value = v;
      best.step = lam;
    }
  }
  if (!any_finite) throw NumericalError("line search: objective non-finite at every step length");
  if (!(best.value <= phi0)) {
    best.descent = false;
    best.step = kStepGrid.back();
  }
  return best;
}

/// Spectral norm by power iteration on A^T A.
inline double spectral_norm(const Mat& A, int max_iter = 50, double tol = 1e-6) {
  if (A.size() == 0) return 0.0;
  // Fixed pseudo-random start so results are reproducible.
  Vec v(A.cols());
  std::uint64_t state = 0x9E3779B97F4A7C15ull;
  for (Index i = 0; i < v.size(); ++i) {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    v[i] = static_cast<double>(state >> 11) * 0x1.0p-53 - 0.5;
  }
  v.normalize();
  double sigma = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Vec u = A * v;
    const double un = u.norm();
    if (un == 0.0) return 0.0;
    Vec w = A.transpose() * (u / un);
    const double wn = w.norm();
    v = w / wn;
    const double prev = sigma;
    sigma = wn;
    if (std::abs(sigma - prev) <= tol * sigma) break;
  }
  return sigma;
}

}  // namespace nnqn
