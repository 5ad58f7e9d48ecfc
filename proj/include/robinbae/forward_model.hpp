#pragma once

// Parameter-to-observable map beta -> B u(beta) for
//
//   -div(exp(a) grad u) = 0          in the slab
//   exp(a) du/dn = g                 on TOP
//   exp(a) du/dn + exp(beta) u = 0   on BOTTOM
//   u = 0                            on SIDE
//
// with adjoint-based gradients and Gauss-Newton Hessian actions. Every linear
// solve with the state operator is counted as one Poisson solve.

#include <Eigen/Cholesky>

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "robinbae/fem.hpp"

namespace robinbae {

/// Point measurements on the TOP surface: q x n_volume P1 interpolation matrix.
struct ObservationOperator {
  std::vector<std::vector<double>> points;  // full d-dimensional coordinates
  SparseMatrix B;

  int size() const { return static_cast<int>(B.rows()); }
};

/// `surface_points` carry the d-1 horizontal coordinates; the vertical
/// coordinate is set to the slab height.
inline ObservationOperator make_observation_operator(const SlabMesh& volume,
                                                     const std::vector<std::vector<double>>& surface_points)
{
  ObservationOperator obs;
  PointLocator locator(volume);
  Triplets t;
  int row = 0;
  for (const auto& sp : surface_points) {
    if (static_cast<int>(sp.size()) != volume.dim - 1)
      throw std::invalid_argument("make_observation_operator: point must have dim-1 coordinates");
    std::vector<double> x(sp);
    x.push_back(volume.height);
    const PointLocation loc = locator.locate(x);
    auto v = volume.cell(loc.cell);
    for (int i = 0; i <= volume.dim; ++i)
      if (loc.bary[i] != 0.0) t.emplace_back(row, v[i], loc.bary[i]);
    obs.points.push_back(std::move(x));
    ++row;
  }
  obs.B.resize(row, volume.num_nodes());
  obs.B.setFromTriplets(t.begin(), t.end());
  obs.B.makeCompressed();
  return obs;
}

inline Vector observe(const ObservationOperator& obs, const Vector& u)
{
  require_size(u, obs.B.cols(), "observe");
  return obs.B * u;
}

struct SolveCounter {
  long forward = 0;
  long adjoint = 0;
  long incr_forward = 0;
  long incr_adjoint = 0;

  long total() const { return forward + adjoint + incr_forward + incr_adjoint; }
};

/// Gaussian total-error model: mean shift nu_* and covariance Gamma_nu.
class ErrorModel {
 public:
  ErrorModel() = default;
  ErrorModel(Vector mean_shift, Matrix covariance) : mean_(std::move(mean_shift)), cov_(std::move(covariance))
  {
    if (cov_.rows() != cov_.cols() || cov_.rows() != mean_.size())
      throw std::invalid_argument("ErrorModel: dimension mismatch");
    if (!mean_.allFinite()) throw std::invalid_argument("ErrorModel: mean shift must be finite");
    chol_.compute(cov_);
    if (chol_.info() != Eigen::Success) throw NumericalFailure("ErrorModel: covariance is not positive definite");
  }

  /// Zero-mean white noise with standard deviation delta.
  static ErrorModel noise_only(double delta, int q)
  {
    if (!(delta > 0.0)) throw std::invalid_argument("ErrorModel: noise level must be positive");
    return ErrorModel(Vector::Zero(q), Matrix::Identity(q, q) * (delta * delta));
  }

  int size() const { return static_cast<int>(mean_.size()); }
  const Vector& mean_shift() const { return mean_; }
  const Matrix& covariance() const { return cov_; }

  Vector apply_inverse(const Vector& r) const { return chol_.solve(r); }
  /// Gamma^{-1/2} r in the Cholesky sense (L^{-1} r).
  Vector whiten(const Vector& r) const { return chol_.matrixL().solve(r); }
  double weighted_norm2(const Vector& r) const { return whiten(r).squaredNorm(); }

 private:
  Vector mean_;
  Matrix cov_;
  Eigen::LLT<Matrix> chol_;
};

struct MisfitGradient {
  double cost = 0.0;
  Vector gradient;  // dual (load-like) vector on the bottom surface
};

class PoissonForwardModel {
 public:
  /// `a` lives on `volume`, `flux` is a nodal flux on `volume` (only TOP values
  /// matter) and `bottom` is extract_bottom_mesh(volume).
  PoissonForwardModel(const SlabMesh& volume, const SlabMesh& bottom, const Vector& a, const Vector& flux,
                      ObservationOperator obs)
      : volume_(&volume), bottom_(&bottom), obs_(std::move(obs))
  {
    if (bottom.num_nodes() != static_cast<int>(volume.bottom_trace.size()))
      throw std::invalid_argument("PoissonForwardModel: bottom mesh does not match the volume");
    if (obs_.B.cols() != volume.num_nodes())
      throw std::invalid_argument("PoissonForwardModel: observation operator lives on another mesh");
    dofs_ = side_dirichlet_dofs(volume);
    load_ = dofs_.restrict_vector(assemble_flux_load(volume, flux));
    B_free_ = restrict_columns(obs_.B);
    const int nv = bottom.dim + 1;
    bottom_mass_.resize(bottom.num_cells());
    for (int c = 0; c < bottom.num_cells(); ++c) {
      const double meas = cell_measure(bottom, c);
      Matrix Me(nv, nv);
      for (int i = 0; i < nv; ++i)
        for (int j = 0; j < nv; ++j) Me(i, j) = p1_mass_entry(meas, bottom.dim, i == j);
      bottom_mass_[c] = Me;
    }
    set_conductivity(a);
  }

  /// Replaces the conductivity field and invalidates the cached state.
  void set_conductivity(const Vector& a)
  {
    require_size(a, volume_->num_nodes(), "set_conductivity");
    a_ = a;
    K_ = dofs_.restrict_matrix(assemble_stiffness(*volume_, a));
    has_state_ = false;
  }

  const SlabMesh& volume() const { return *volume_; }
  const SlabMesh& bottom() const { return *bottom_; }
  const ObservationOperator& observation() const { return obs_; }
  const Vector& conductivity() const { return a_; }
  int parameter_size() const { return bottom_->num_nodes(); }
  int num_observations() const { return obs_.size(); }
  const SolveCounter& counter() const { return counter_; }
  void reset_counter() { counter_ = {}; }

  /// Solves the forward problem at beta and caches (beta, u, factorization).
  const Vector& forward_solve(const Vector& beta)
  {
    require_size(beta, parameter_size(), "forward_solve");
    has_state_ = false;
    beta_ = beta;
    cell_exp_beta_ = cell_centroid_values(*bottom_, beta).array().exp();
    SparseMatrix A = K_ + dofs_.restrict_matrix(assemble_robin_mass(*volume_, *bottom_, beta));
    // Counted as issued even if the factorization fails.
    ++counter_.forward;
    solver_.compute(A);
    u_free_ = solver_.solve(load_);
    u_ = dofs_.prolong(u_free_);
    has_state_ = true;
    return u_;
  }

  bool has_state() const { return has_state_; }
  const Vector& state() const
  {
    require_state("state");
    return u_;
  }
  const Vector& state_beta() const
  {
    require_state("state_beta");
    return beta_;
  }

  /// Re-solves only if beta differs from the cached linearization point.
  void ensure_state(const Vector& beta)
  {
    if (!has_state_ || beta.size() != beta_.size() || beta != beta_) forward_solve(beta);
  }

  Vector observed() const
  {
    require_state("observed");
    return B_free_ * u_free_;
  }

  Vector misfit_residual(const Vector& d_obs, const ErrorModel& err) const
  {
    require_size(d_obs, num_observations(), "misfit");
    if (err.size() != num_observations()) throw std::invalid_argument("misfit: error model size mismatch");
    return observed() - d_obs + err.mean_shift();
  }

  /// 1/2 |B u - d + nu_*|^2 in the Gamma_nu^{-1} norm, at the cached state.
  double misfit_cost(const Vector& d_obs, const ErrorModel& err) const
  {
    return 0.5 * err.weighted_norm2(misfit_residual(d_obs, err));
  }

  /// Adjoint solve at the cached state; returns the dual gradient with entries
  /// int_bottom exp(beta) u p phi_i (centroid rule, exact derivative of the
  /// discrete Lagrangian).
  Vector misfit_gradient_at_state(const Vector& d_obs, const ErrorModel& err)
  {
    const Vector r = misfit_residual(d_obs, err);
    const Vector rhs = -(B_free_.transpose() * err.apply_inverse(r));
    const Vector p = solver_.solve(rhs);
    ++counter_.adjoint;
    return robin_sensitivity(dofs_.prolong(p), u_);
  }

  /// Forward plus adjoint solve.
  MisfitGradient misfit_gradient(const Vector& beta, const Vector& d_obs, const ErrorModel& err)
  {
    forward_solve(beta);
    MisfitGradient out;
    out.cost = misfit_cost(d_obs, err);
    out.gradient = misfit_gradient_at_state(d_obs, err);
    return out;
  }

  /// Incremental forward solve: u_hat = -A^{-1} (dR[beta_hat] u).
  Vector incremental_state(const Vector& beta_hat)
  {
    require_state("incremental_state");
    require_size(beta_hat, parameter_size(), "incremental_state");
    const Vector rhs = -dofs_.restrict_vector(apply_robin_derivative(beta_hat, u_));
    Vector u_hat = solver_.solve(rhs);
    ++counter_.incr_forward;
    return u_hat;  // free-dof vector
  }

  /// F beta_hat = B u_hat.
  Vector linearized_obs_action(const Vector& beta_hat) { return B_free_ * incremental_state(beta_hat); }

  /// F^T w as a dual vector on the bottom surface (adjoint solve with source -B^T w).
  Vector linearized_obs_adjoint_dual(const Vector& w)
  {
    require_state("linearized_obs_adjoint");
    require_size(w, num_observations(), "linearized_obs_adjoint");
    const Vector p = solver_.solve(Vector(-(B_free_.transpose() * w)));
    ++counter_.adjoint;
    return robin_sensitivity(dofs_.prolong(p), u_);
  }

  /// Gauss-Newton misfit Hessian action F^T Gamma^{-1} F beta_hat (dual vector):
  /// one incremental forward and one incremental adjoint solve.
  Vector gn_hessian_action(const Vector& beta_hat, const ErrorModel& err)
  {
    const Vector u_hat = incremental_state(beta_hat);
    const Vector rhs = -(B_free_.transpose() * err.apply_inverse(B_free_ * u_hat));
    const Vector p_hat = solver_.solve(rhs);
    ++counter_.incr_adjoint;
    return robin_sensitivity(dofs_.prolong(p_hat), u_);
  }

 private:
  void require_state(const char* what) const
  {
    if (!has_state_) throw std::logic_error(std::string(what) + ": no forward state; call forward_solve first");
  }

  SparseMatrix restrict_columns(const SparseMatrix& B) const
  {
    Triplets t;
    for (int k = 0; k < B.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(B, k); it; ++it) {
        const int c = dofs_.free_index(static_cast<int>(it.col()));
        if (c >= 0) t.emplace_back(static_cast<int>(it.row()), c, it.value());
      }
    SparseMatrix out(B.rows(), dofs_.num_free());
    out.setFromTriplets(t.begin(), t.end());
    out.makeCompressed();
    return out;
  }

  /// (dR/dbeta [beta_hat]) u as a volume-length dual vector.
  Vector apply_robin_derivative(const Vector& beta_hat, const Vector& u) const
  {
    const SlabMesh& b = *bottom_;
    const int nv = b.dim + 1;
    Vector out = Vector::Zero(volume_->num_nodes());
    Vector ue(nv);
    for (int c = 0; c < b.num_cells(); ++c) {
      auto v = b.cell(c);
      double hat = 0.0;
      for (int i = 0; i < nv; ++i) {
        hat += beta_hat[v[i]];
        ue[i] = u[b.bottom_trace[v[i]]];
      }
      const Vector contrib = (cell_exp_beta_[c] * hat / nv) * (bottom_mass_[c] * ue);
      for (int i = 0; i < nv; ++i) out[b.bottom_trace[v[i]]] += contrib[i];
    }
    return out;
  }

  /// g_i = d/dbeta_i [p^T R(beta) u].
  Vector robin_sensitivity(const Vector& p, const Vector& u) const
  {
    const SlabMesh& b = *bottom_;
    const int nv = b.dim + 1;
    Vector g = Vector::Zero(b.num_nodes());
    Vector ue(nv), pe(nv);
    for (int c = 0; c < b.num_cells(); ++c) {
      auto v = b.cell(c);
      for (int i = 0; i < nv; ++i) {
        ue[i] = u[b.bottom_trace[v[i]]];
        pe[i] = p[b.bottom_trace[v[i]]];
      }
      const double s = cell_exp_beta_[c] * pe.dot(bottom_mass_[c] * ue) / nv;
      for (int i = 0; i < nv; ++i) g[v[i]] += s;
    }
    return g;
  }

  const SlabMesh* volume_;
  const SlabMesh* bottom_;
  ObservationOperator obs_;
  DofMap dofs_;
  Vector a_;
  SparseMatrix K_;
  Vector load_;
  SparseMatrix B_free_;
  std::vector<Matrix> bottom_mass_;

  bool has_state_ = false;
  Vector beta_;
  Vector cell_exp_beta_;
  SpdSolver solver_;
  Vector u_free_, u_;
  SolveCounter counter_;
};

}  // namespace robinbae
