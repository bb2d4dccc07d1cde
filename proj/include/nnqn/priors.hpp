#pragma once

#include "nnqn/core.hpp"
#include "nnqn/forward_cem.hpp"
#include "nnqn/mesh.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace nnqn {

enum class PriorKind { TotalVariation, LaplacianSmoothness };

inline std::string to_string(PriorKind k) { return k == PriorKind::TotalVariation ? "tv" : "laplacian"; }
inline PriorKind prior_kind_from_string(const std::string& s) {
  if (s == "tv") return PriorKind::TotalVariation;
  if (s == "laplacian") return PriorKind::LaplacianSmoothness;
  throw ConfigError("unknown prior kind '" + s + "' (expected tv or laplacian)");
}

struct Regularizer {
  PriorKind kind = PriorKind::TotalVariation;
  double weight = 1.0;
  double beta = 1e-4;  // TV smoothing

  void validate() const {
    if (!(weight > 0.0)) throw ConfigError("regularization weight must be positive");
    if (kind == PriorKind::TotalVariation && !(beta > 0.0)) throw ConfigError("TV smoothing beta must be positive");
  }
};

/// Value R, gradient dR and Gauss-Newton curvature Gamma_R of a prior.
struct PriorTerms {
  double value = 0.0;
  Vec gradient;
  SpMat curvature;
};

/// R = w * sum_edges l_e sqrt((s_a - s_b)^2 + beta) over element pairs
/// sharing an edge of length l_e. Curvature is w * D^T diag(l_e / sqrt(.)) D.
inline PriorTerms tv_terms(const std::vector<ElementEdge>& edges, const Vec& sigma, const Regularizer& reg) {
  require(reg.kind == PriorKind::TotalVariation, "tv_terms needs a TV regularizer");
  reg.validate();
  const Index n = sigma.size();
  PriorTerms out;
  out.gradient = Vec::Zero(n);
  std::vector<Triplet> trip;
  trip.reserve(edges.size() * 4);
  for (const auto& e : edges) {
    const double d = sigma[e.a] - sigma[e.b];
    const double root = std::sqrt(d * d + reg.beta);
    out.value += e.length * root;
    const double g = reg.weight * e.length * d / root;
    out.gradient[e.a] += g;
    out.gradient[e.b] -= g;
    const double c = reg.weight * e.length / root;
    trip.emplace_back(e.a, e.a, c);
    trip.emplace_back(e.b, e.b, c);
    trip.emplace_back(e.a, e.b, -c);
    trip.emplace_back(e.b, e.a, -c);
  }
  out.value *= reg.weight;
  out.curvature.resize(n, n);
  out.curvature.setFromTriplets(trip.begin(), trip.end());
  return out;
}

inline PriorTerms tv_value_and_gradient(const Mesh& mesh, const ConductivityField& sigma, const Regularizer& reg) {
  require(sigma.size() == mesh.n_elements(), "conductivity length must equal element count");
  return tv_terms(mesh.interior_edges, sigma.values, reg);
}

/// R = w ||L (s - s_ref)||^2 with L the element adjacency Laplacian.
inline PriorTerms laplacian_terms(const SpMat& laplacian, const Vec& sigma, const Vec& sigma_ref, const Regularizer& reg) {
  require(reg.kind == PriorKind::LaplacianSmoothness, "laplacian_terms needs a Laplacian regularizer");
  reg.validate();
  require(sigma.size() == laplacian.cols() && sigma_ref.size() == sigma.size(), "dimension mismatch");
  PriorTerms out;
  const Vec Ld = laplacian * (sigma - sigma_ref);
  out.value = reg.weight * Ld.squaredNorm();
  out.gradient = 2.0 * reg.weight * (laplacian.transpose() * Ld);
  out.curvature = (2.0 * reg.weight) * SpMat(laplacian.transpose() * laplacian);
  return out;
}

inline PriorTerms laplacian_value_and_gradient(const Mesh& mesh, const ConductivityField& sigma,
                                               const ConductivityField& sigma_ref, const Regularizer& reg) {
  require(sigma.size() == mesh.n_elements(), "conductivity length must equal element count");
  return laplacian_terms(element_adjacency_laplacian(mesh), sigma.values, sigma_ref.values, reg);
}

/// A regularizer bound to one mesh, with the mesh-derived operators cached.
class Prior {
 public:
  Prior(const Mesh& mesh, Regularizer reg, Vec sigma_ref)
      : reg_(reg), edges_(mesh.interior_edges), sigma_ref_(std::move(sigma_ref)) {
    reg_.validate();
    if (reg_.kind == PriorKind::LaplacianSmoothness) laplacian_ = element_adjacency_laplacian(mesh);
  }

  PriorTerms evaluate(const Vec& sigma) const {
    if (reg_.kind == PriorKind::TotalVariation) return tv_terms(edges_, sigma, reg_);
    return laplacian_terms(laplacian_, sigma, sigma_ref_, reg_);
  }
  double value(const Vec& sigma) const {
    if (reg_.kind == PriorKind::TotalVariation) {
      double r = 0.0;
      for (const auto& e : edges_) {
        const double d = sigma[e.a] - sigma[e.b];
        r += e.length * std::sqrt(d * d + reg_.beta);
      }
      return reg_.weight * r;
    }
    return reg_.weight * (laplacian_ * (sigma - sigma_ref_)).squaredNorm();
  }

  const Regularizer& regularizer() const { return reg_; }
  /// Same prior with a different weight.
  Prior with_weight(double w) const {
    Prior p = *this;
    p.reg_.weight = w;
    p.reg_.validate();
    return p;
  }

 private:
  Regularizer reg_;
  std::vector<ElementEdge> edges_;
  SpMat laplacian_;
  Vec sigma_ref_;
};

/// Diagonal noise weighting: W = diag(1/std^2), L_e = diag(std), so that
/// L_e^T L_e = W^{-1}.
struct NoiseWeighting {
  Vec w;   // diag(W)
  Vec le;  // diag(L_e)
};

inline NoiseWeighting build_noise_weighting(const Vec& noise_std) {
  for (Index i = 0; i < noise_std.size(); ++i)
    if (!(noise_std[i] > 0.0) || !std::isfinite(noise_std[i]))
      throw DomainError("noise standard deviations must be positive");
  NoiseWeighting out;
  out.le = noise_std;
  out.w = noise_std.array().square().inverse().matrix();
  return out;
}

}  // namespace nnqn
