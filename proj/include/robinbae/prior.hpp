#pragma once

// Gaussian priors with covariance built from the square of an inverse
// elliptic operator,
//
//   K = alpha * (int gamma grad phi_i . grad phi_j + phi_i phi_j) + kappa * (boundary mass),
//
// optionally weighted by a diagonal W that flattens the pointwise variance.
// With L = W K^{-1} M the prior covariance operator on R^n_M is
// Gamma = L L^* and the covariance of the coefficient vector is
// C = W K^{-1} M K^{-1} W.

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>

#include "robinbae/fem.hpp"

namespace robinbae {

enum class BoundaryVariant { Neumann, Dirichlet, Robin, Weighted };

inline const char* to_string(BoundaryVariant v)
{
  switch (v) {
    case BoundaryVariant::Neumann: return "NEUMANN";
    case BoundaryVariant::Dirichlet: return "DIRICHLET";
    case BoundaryVariant::Robin: return "ROBIN";
    case BoundaryVariant::Weighted: return "WEIGHTED";
  }
  return "?";
}

/// Marginal standard deviation targeted by the weighted prior,
/// Ga(nu) / ((4 pi)^{d/2} gamma^nu alpha^2) with nu = 2 - d/2. A tensor gamma
/// enters through det(gamma)^{1/d}.
inline double prior_marginal_sigma(double alpha, const Matrix& gamma)
{
  const int d = static_cast<int>(gamma.rows());
  const double nu = 2.0 - 0.5 * d;
  const double g = std::pow(gamma.determinant(), 1.0 / d);
  return std::tgamma(nu) / (std::pow(4.0 * std::numbers::pi, 0.5 * d) * std::pow(g, nu) * alpha * alpha);
}

/// Deterministic generator for a given seed.
inline std::mt19937_64 make_rng(std::uint64_t seed)
{
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32)};
  return std::mt19937_64(seq);
}

/// Independent child seed number `index` of `master`.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index)
{
  std::seed_seq seq{static_cast<std::uint32_t>(master & 0xffffffffu), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(index & 0xffffffffu), static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline Vector standard_normal(std::mt19937_64& rng, Eigen::Index n)
{
  std::normal_distribution<double> N(0.0, 1.0);
  Vector z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = N(rng);
  return z;
}

struct PriorCostGrad {
  double cost = 0.0;
  Vector gradient;  // M-Riesz representative, Gamma^{-1}(x - mean)
};

class EllipticPrior {
 public:
  /// Assembles the operator on `mesh` (the parameter's own domain). Computes the
  /// variance weight for the WEIGHTED variant; DIRICHLET pins boundary nodes to
  /// the mean, so its covariance vanishes there and the precision is undefined.
  EllipticPrior(const SlabMesh& mesh, double alpha, const Matrix& gamma, double kappa, Vector mean,
                BoundaryVariant variant)
      : mesh_(&mesh), alpha_(alpha), gamma_(gamma), kappa_(kappa), variant_(variant), mean_(std::move(mean))
  {
    if (!(alpha > 0.0)) throw std::invalid_argument("assemble_prior: alpha must be positive");
    if (!(kappa >= 0.0)) throw std::invalid_argument("assemble_prior: kappa must be nonnegative");
    if (gamma.rows() != mesh.dim || gamma.cols() != mesh.dim)
      throw std::invalid_argument("assemble_prior: gamma must be dim x dim");
    if ((gamma - gamma.transpose()).norm() > 1e-14 * gamma.norm() ||
        Eigen::SelfAdjointEigenSolver<Matrix>(gamma).eigenvalues().minCoeff() <= 0.0)
      throw std::invalid_argument("assemble_prior: gamma must be symmetric positive definite");
    require_size(mean_, mesh.num_nodes(), "assemble_prior: mean");

    const int n = mesh.num_nodes();
    M_ = assemble_mass(mesh);
    K_ = alpha * (assemble_stiffness_cells(mesh, Vector::Ones(mesh.num_cells()), gamma) + M_);
    if (variant == BoundaryVariant::Robin && kappa > 0.0)
      for (FacetTag tag : {FacetTag::Top, FacetTag::Bottom, FacetTag::Side}) K_ += assemble_facet_mass(mesh, tag, kappa);
    K_.makeCompressed();

    if (variant == BoundaryVariant::Dirichlet)
      dofs_ = DofMap(n, boundary_nodes(mesh));
    else
      dofs_ = DofMap::all_free(n);
    K_solver_ = std::make_shared<SpdSolver>(dofs_.restrict_matrix(K_));
    M_solver_ = std::make_shared<SpdSolver>(M_);

    sigma_ = prior_marginal_sigma(alpha, gamma);
    weight_ = Vector::Ones(n);
    if (variant == BoundaryVariant::Weighted) weight_ = compute_variance_weight();
  }

  const SlabMesh& mesh() const { return *mesh_; }
  int size() const { return mesh_->num_nodes(); }
  double alpha() const { return alpha_; }
  const Matrix& gamma() const { return gamma_; }
  double kappa() const { return kappa_; }
  BoundaryVariant variant() const { return variant_; }
  const Vector& mean() const { return mean_; }
  const SparseMatrix& stiffness() const { return K_; }
  const SparseMatrix& mass() const { return M_; }
  const Vector& weight() const { return weight_; }
  double sigma() const { return sigma_; }
  const SpdSolver& mass_solver() const { return *M_solver_; }

  /// K^{-1} x (zero on pinned nodes for DIRICHLET).
  Vector solve_K(const Vector& x) const { return dofs_.prolong(K_solver_->solve(dofs_.restrict_vector(x))); }
  Vector solve_M(const Vector& x) const { return M_solver_->solve(x); }

  /// Diagonal of K^{-1} M K^{-1}: pointwise variance of the unweighted field.
  /// Computed exactly with one K-solve per node, in column blocks.
  Vector unweighted_variance() const
  {
    const int n = size();
    Vector c = Vector::Zero(n);
    const int nf = dofs_.num_free();
    const int block = 256;
    const SparseMatrix Mff = dofs_.restrict_matrix(M_);
    for (int start = 0; start < nf; start += block) {
      const int w = std::min(block, nf - start);
      Matrix E = Matrix::Zero(nf, w);
      for (int j = 0; j < w; ++j) E(start + j, j) = 1.0;
      const Matrix Z = K_solver_->solve(E);
      const Matrix MZ = Mff * Z;
      for (int j = 0; j < w; ++j) c[dofs_.free_dofs()[start + j]] = Z.col(j).dot(MZ.col(j));
    }
    return c;
  }

  /// w_i = sigma / sqrt(c_i), which makes the weighted variance sigma^2 everywhere.
  Vector compute_variance_weight() const
  {
    const Vector c = unweighted_variance();
    Vector w(c.size());
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      if (!(c[i] > 0.0)) throw NumericalFailure("compute_variance_weight: nonpositive pointwise variance");
      w[i] = sigma_ / std::sqrt(c[i]);
    }
    return w;
  }

  /// Diagonal of the coefficient covariance, W_i^2 c_i.
  Vector pointwise_variance() const { return weight_.array().square() * unweighted_variance().array(); }

  // Factor L = W K^{-1} M and its relatives. Starred operators are adjoints in
  // the M-inner product, B^* = M^{-1} B^T M.

  Vector apply_L(const Vector& z) const
  {
    require_size(z, size(), "apply_L");
    return weight_.cwiseProduct(solve_K(M_ * z));
  }
  Vector apply_L_inverse(const Vector& x) const
  {
    require_precision("apply_L_inverse");
    require_size(x, size(), "apply_L_inverse");
    return solve_M(K_ * x.cwiseQuotient(weight_));
  }
  /// L^* z = K^{-1} W M z.
  Vector apply_L_adjoint(const Vector& z) const { return solve_K(weight_.cwiseProduct(M_ * z)); }
  /// L^* M^{-1} y = K^{-1} W y, for a dual (load-like) vector y.
  Vector apply_L_adjoint_dual(const Vector& y) const { return solve_K(weight_.cwiseProduct(y)); }
  /// (L^*)^{-1} x = M^{-1} W^{-1} K x.
  Vector apply_L_adjoint_inverse(const Vector& x) const
  {
    require_precision("apply_L_adjoint_inverse");
    return solve_M((K_ * x).cwiseQuotient(weight_));
  }

  /// Gamma z = L L^* z.
  Vector covariance_apply(const Vector& z) const { return apply_L(apply_L_adjoint(z)); }
  /// Gamma^{-1} x = L^{-*} L^{-1} x.
  Vector precision_apply(const Vector& x) const { return apply_L_adjoint_inverse(apply_L_inverse(x)); }
  /// C y = W K^{-1} M K^{-1} W y (coefficient covariance, dual -> primal).
  Vector coefficient_covariance_apply(const Vector& y) const
  {
    return weight_.cwiseProduct(solve_K(M_ * solve_K(weight_.cwiseProduct(y))));
  }
  /// C^{-1} x = W^{-1} K M^{-1} K W^{-1} x (primal -> dual).
  Vector precision_dual_apply(const Vector& x) const
  {
    require_precision("precision_dual_apply");
    return (K_ * solve_M(K_ * x.cwiseQuotient(weight_))).cwiseQuotient(weight_);
  }

  /// M-white noise: coefficient covariance M^{-1}, via the Cholesky factor of M.
  /// Meshes beyond the direct-solver limit fall back to the lumped mass.
  Vector white_noise(std::mt19937_64& rng) const
  {
    const Vector xi = standard_normal(rng, size());
    if (!white_noise_lumped()) return M_solver_->inverse_sqrt_apply(xi);
    const Vector lumped = M_ * Vector::Ones(size());
    return xi.cwiseQuotient(lumped.cwiseSqrt());
  }
  bool white_noise_lumped() const { return M_solver_->size() > SpdSolver::direct_limit; }

  Vector sample(std::uint64_t seed) const
  {
    auto rng = make_rng(seed);
    return mean_ + apply_L(white_noise(rng));
  }

  /// 1/2 <Gamma^{-1}(x - mean), x - mean>_M and its M-gradient.
  PriorCostGrad cost_and_grad(const Vector& x) const
  {
    require_size(x, size(), "prior_cost_and_grad");
    const Vector dx = x - mean_;
    const Vector dual = precision_dual_apply(dx);
    return {0.5 * dx.dot(dual), solve_M(dual)};
  }

  std::uint64_t fingerprint() const
  {
    std::uint64_t h = mesh_->fingerprint();
    h = detail::fnv1a(&alpha_, sizeof alpha_, h);
    h = detail::fnv1a(gamma_.data(), sizeof(double) * gamma_.size(), h);
    h = detail::fnv1a(&kappa_, sizeof kappa_, h);
    const int v = static_cast<int>(variant_);
    h = detail::fnv1a(&v, sizeof v, h);
    return detail::fnv1a(mean_.data(), sizeof(double) * mean_.size(), h);
  }

 private:
  void require_precision(const char* what) const
  {
    if (variant_ == BoundaryVariant::Dirichlet)
      throw std::invalid_argument(std::string(what) + ": precision is undefined for the DIRICHLET variant");
  }

  const SlabMesh* mesh_;
  double alpha_;
  Matrix gamma_;
  double kappa_;
  BoundaryVariant variant_;
  Vector mean_;
  SparseMatrix K_, M_;
  DofMap dofs_;
  std::shared_ptr<SpdSolver> K_solver_, M_solver_;
  Vector weight_;
  double sigma_ = 0.0;
};

inline EllipticPrior assemble_prior(const SlabMesh& mesh, double alpha, const Matrix& gamma, double kappa,
                                    const Vector& mean, BoundaryVariant variant)
{
  return EllipticPrior(mesh, alpha, gamma, kappa, mean, variant);
}

/// Robin coefficient that approximately cancels boundary variance inflation.
inline double robin_kappa(double alpha, double gamma) { return 1.42 * std::sqrt(gamma / alpha); }

}  // namespace robinbae
