#pragma once

// Low-rank Laplace approximation. With the prior factor Gamma_beta = L L^*
// and the prior-preconditioned misfit Hessian L^* H_mis L ~ V Lambda V^*
// (V^* = V^T M), the posterior covariance is
//
//   Gamma_post = L (I - V D V^*) L^*,   D = diag(lambda / (lambda + 1)),
//
// and samples are beta_MAP + L (V P V^* + I) w with P = diag(1/sqrt(lambda+1) - 1)
// and w M-white noise.

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>

#include "robinbae/forward_model.hpp"
#include "robinbae/prior.hpp"

namespace robinbae {

struct EigenPairs {
  Vector values;   // descending
  Matrix vectors;  // M-orthonormal columns
  bool probe_warning = false;
};

/// Flips each column so that its first significant entry is positive.
inline void normalize_signs(Matrix& V)
{
  for (Eigen::Index j = 0; j < V.cols(); ++j) {
    const double tol = 1e-12 * V.col(j).cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < V.rows(); ++i) {
      if (std::abs(V(i, j)) > tol) {
        if (V(i, j) < 0.0) V.col(j) *= -1.0;
        break;
      }
    }
  }
}

/// Double-pass randomized eigensolver for an operator that is self-adjoint in
/// the M-inner product. `mass_factor` must be a direct factorization of M.
template <class Op>
EigenPairs double_pass_eigs(Op&& apply, const SparseMatrix& M, const SpdSolver& mass_factor, int n_probe,
                            std::uint64_t seed, int expected_rank = 0)
{
  const int n = static_cast<int>(M.rows());
  if (n_probe < 1) throw std::invalid_argument("double_pass_eigs: need at least one probe");
  if (!mass_factor.is_direct()) throw std::invalid_argument("double_pass_eigs: mass factor must be direct");
  const int k = std::min(n_probe, n);
  EigenPairs out;
  out.probe_warning = n_probe < std::min(expected_rank, n);

  auto rng = make_rng(seed);
  Matrix Y(n, k);
  for (int j = 0; j < k; ++j) Y.col(j) = apply(standard_normal(rng, n));

  // M-orthonormal basis of range(Y): orthonormalize F Y with F^T F = M.
  Matrix FY(n, k);
  for (int j = 0; j < k; ++j) FY.col(j) = mass_factor.sqrt_apply(Y.col(j));
  Eigen::HouseholderQR<Matrix> qr(FY);
  const Matrix Qt = qr.householderQ() * Matrix::Identity(n, k);
  Matrix Q(n, k);
  for (int j = 0; j < k; ++j) Q.col(j) = mass_factor.inverse_sqrt_apply(Qt.col(j));

  Matrix AQ(n, k);
  for (int j = 0; j < k; ++j) AQ.col(j) = apply(Vector(Q.col(j)));
  Matrix T = Q.transpose() * (M * AQ);
  T = 0.5 * (T + T.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(T);
  // Ascending -> descending.
  out.values = es.eigenvalues().reverse();
  const Matrix U = es.eigenvectors().rowwise().reverse();
  out.vectors = Q * U;
  normalize_signs(out.vectors);
  return out;
}

class LowRankPosterior {
 public:
  /// Keeps the eigenpairs with lambda > threshold. The full computed spectrum
  /// stays available through `spectrum()`.
  LowRankPosterior(const EllipticPrior& prior, Vector map, EigenPairs pairs, double threshold = 0.1)
      : prior_(&prior), map_(std::move(map)), all_(std::move(pairs)), threshold_(threshold)
  {
    require_size(map_, prior.size(), "LowRankPosterior: map");
    int r = 0;
    while (r < all_.values.size() && all_.values[r] > threshold) ++r;
    set_rank(r);
  }

  /// Retains the leading r pairs regardless of the threshold.
  void set_rank(int r)
  {
    if (r < 0 || r > all_.values.size()) throw std::invalid_argument("LowRankPosterior: bad rank");
    lambda_ = all_.values.head(r).cwiseMax(0.0);
    V_ = all_.vectors.leftCols(r);
    D_ = lambda_.array() / (lambda_.array() + 1.0);
    P_ = (lambda_.array() + 1.0).rsqrt() - 1.0;
    LV_.resize(prior_->size(), r);
    for (int j = 0; j < r; ++j) LV_.col(j) = prior_->apply_L(V_.col(j));
  }

  int rank() const { return static_cast<int>(lambda_.size()); }
  double threshold() const { return threshold_; }
  const Vector& eigenvalues() const { return lambda_; }
  const Matrix& eigenvectors() const { return V_; }
  const EigenPairs& spectrum() const { return all_; }
  const Vector& map() const { return map_; }
  const EllipticPrior& prior() const { return *prior_; }
  bool probe_warning() const { return all_.probe_warning; }

  /// L (I - V D V^T M) L^* z.
  Vector cov_apply(const Vector& z) const
  {
    const Vector y = prior_->apply_L_adjoint(z);
    return prior_->apply_L(y - V_ * D_.cwiseProduct(V_.transpose() * (prior_->mass() * y)));
  }

  /// S w = L (V P V^T M + I) w.
  Vector sqrt_apply(const Vector& w) const
  {
    return prior_->apply_L(w + V_ * P_.cwiseProduct(V_.transpose() * (prior_->mass() * w)));
  }

  /// S^* z = (V P V^T M + I) L^* z.
  Vector sqrt_adjoint_apply(const Vector& z) const
  {
    const Vector y = prior_->apply_L_adjoint(z);
    return y + V_ * P_.cwiseProduct(V_.transpose() * (prior_->mass() * y));
  }

  Vector sample(std::uint64_t seed) const
  {
    auto rng = make_rng(seed);
    return map_ + sqrt_apply(prior_->white_noise(rng));
  }

  /// Prior variance minus sum_i D_i (L v_i)^2, node by node.
  Vector pointwise_variance() const
  {
    Vector var = prior_->pointwise_variance();
    for (int j = 0; j < rank(); ++j) var -= D_[j] * LV_.col(j).cwiseAbs2();
    return var;
  }

  /// Same, reusing a precomputed prior variance.
  Vector pointwise_variance(const Vector& prior_variance) const
  {
    Vector var = prior_variance;
    for (int j = 0; j < rank(); ++j) var -= D_[j] * LV_.col(j).cwiseAbs2();
    return var;
  }

 private:
  const EllipticPrior* prior_;
  Vector map_;
  EigenPairs all_;
  double threshold_;
  Vector lambda_, D_, P_;
  Matrix V_, LV_;
};

/// z -> L^* H_mis L z for a dual misfit-Hessian action.
inline std::function<Vector(const Vector&)> preconditioned_misfit_operator(
    const EllipticPrior& prior, std::function<Vector(const Vector&)> hmis_dual)
{
  return [&prior, hmis_dual](const Vector& z) { return prior.apply_L_adjoint_dual(hmis_dual(prior.apply_L(z))); };
}

/// Eigenpairs of the prior-preconditioned misfit Hessian at the model's cached
/// state (the MAP point), with n_probe probes.
inline LowRankPosterior ppmisfit_eigs(PoissonForwardModel& model, const EllipticPrior& prior, const ErrorModel& err,
                                      const Vector& map, int n_probe, std::uint64_t seed, double threshold = 0.1)
{
  model.ensure_state(map);
  auto op = preconditioned_misfit_operator(prior, [&](const Vector& v) { return model.gn_hessian_action(v, err); });
  EigenPairs pairs = double_pass_eigs(op, prior.mass(), prior.mass_solver(), n_probe, seed, model.num_observations());
  return LowRankPosterior(prior, map, std::move(pairs), threshold);
}

}  // namespace robinbae
