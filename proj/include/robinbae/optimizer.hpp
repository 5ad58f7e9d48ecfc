#pragma once

// Inexact Gauss-Newton for the MAP point
//
//   min_beta  1/2 |f(beta) - d + nu_*|^2_{Gamma_nu^{-1}} + 1/2 |beta - beta_*|^2_{Gamma_beta^{-1}}
//
// with prior-preconditioned CG inner solves, Eisenstat-Walker forcing and
// Armijo backtracking. Inner products and norms are M-weighted.

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "robinbae/forward_model.hpp"
#include "robinbae/prior.hpp"

namespace robinbae {

struct GNConfig {
  double rel_grad_tol = 1e-7;
  int max_gn_iters = 100;
  double ew_max_forcing = 0.5;
  double armijo_c = 1e-4;
  double armijo_shrink = 0.5;
  int max_backtracks = 20;
  int max_cg_iters = 0;  // 0: parameter dimension

  void validate() const
  {
    if (!(rel_grad_tol > 0.0 && rel_grad_tol < 1.0)) throw std::invalid_argument("GNConfig: rel_grad_tol must lie in (0,1)");
    if (max_gn_iters < 1) throw std::invalid_argument("GNConfig: max_gn_iters must be positive");
    if (!(ew_max_forcing > 0.0 && ew_max_forcing < 1.0))
      throw std::invalid_argument("GNConfig: ew_max_forcing must lie in (0,1)");
    if (!(armijo_c > 0.0 && armijo_c < 1.0)) throw std::invalid_argument("GNConfig: armijo_c must lie in (0,1)");
    if (!(armijo_shrink > 0.0 && armijo_shrink < 1.0))
      throw std::invalid_argument("GNConfig: armijo_shrink must lie in (0,1)");
    if (max_backtracks < 1) throw std::invalid_argument("GNConfig: max_backtracks must be positive");
    if (max_cg_iters < 0) throw std::invalid_argument("GNConfig: max_cg_iters must be nonnegative");
  }
};

struct ConvergenceRow {
  int gn_iter = 0;
  double cost = 0.0;
  double misfit_cost = 0.0;
  double prior_cost = 0.0;
  double grad_norm = 0.0;
  int cg_iters = 0;
  int backtracks = 0;
  long cumulative_poisson_solves = 0;
};

struct ConvergenceRecord {
  std::vector<ConvergenceRow> rows;
  bool converged = false;
  bool max_iters_hit = false;
  bool line_search_failed = false;

  int gn_iterations() const { return rows.empty() ? 0 : static_cast<int>(rows.size()) - 1; }
  long total_cg() const
  {
    long s = 0;
    for (const auto& r : rows) s += r.cg_iters;
    return s;
  }
  long total_backtracks() const
  {
    long s = 0;
    for (const auto& r : rows) s += r.backtracks;
    return s;
  }
  long total_poisson_solves() const { return rows.empty() ? 0 : rows.back().cumulative_poisson_solves; }
  /// Sum over rows of 2 + 2 #CG + #back.
  long accounted_poisson_solves() const
  {
    long s = 0;
    for (const auto& r : rows) s += 2 + 2L * r.cg_iters + r.backtracks;
    return s;
  }
};

inline void write_convergence_csv(std::ostream& os, const ConvergenceRecord& rec)
{
  os << "gn_iter,cost,misfit_cost,prior_cost,grad_norm,cg_iters,backtracks,cumulative_poisson_solves\n";
  char buf[256];
  for (const auto& r : rec.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%d,%d,%ld\n", r.gn_iter, r.cost, r.misfit_cost,
                  r.prior_cost, r.grad_norm, r.cg_iters, r.backtracks, r.cumulative_poisson_solves);
    os << buf;
  }
}

struct CgResult {
  Vector step;
  int iterations = 0;
  bool negative_curvature = false;
};

/// Preconditioned CG for H x = -grad in the inner product `inner`. Stops when
/// the residual norm drops below forcing * (initial residual norm). On
/// nonpositive curvature it returns the current iterate, or the preconditioned
/// steepest-descent direction if no step has been taken yet.
template <class HessAction, class Precond, class Inner>
CgResult cg_inner(HessAction&& hess_action, const Vector& grad, Precond&& preconditioner, double forcing, int max_iters,
                  Inner&& inner)
{
  CgResult out;
  out.step = Vector::Zero(grad.size());
  Vector r = -grad;
  const double r0 = std::sqrt(std::max(inner(r, r), 0.0));
  if (r0 == 0.0) return out;
  Vector z = preconditioner(r);
  Vector p = z;
  double rz = inner(r, z);
  for (int it = 0; it < max_iters; ++it) {
    const Vector Hp = hess_action(p);
    ++out.iterations;
    const double pHp = inner(p, Hp);
    if (!(pHp > 0.0)) {
      out.negative_curvature = true;
      if (it == 0) out.step = z;
      break;
    }
    const double alpha = rz / pHp;
    out.step += alpha * p;
    r -= alpha * Hp;
    if (std::sqrt(std::max(inner(r, r), 0.0)) <= forcing * r0) break;
    z = preconditioner(r);
    const double rz_new = inner(r, z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  return out;
}

template <class HessAction, class Precond>
CgResult cg_inner(HessAction&& hess_action, const Vector& grad, Precond&& preconditioner, double forcing, int max_iters)
{
  return cg_inner(hess_action, grad, preconditioner, forcing, max_iters,
                  [](const Vector& x, const Vector& y) { return x.dot(y); });
}

struct ObjectiveValue {
  double misfit = 0.0;
  double prior = 0.0;
  double total() const { return misfit + prior; }
};

/// The MAP objective for one (model, prior, error model, data) combination.
/// `evaluate` performs one forward solve and caches the state; `gradient` and
/// `hessian_action` work at the last evaluated point. Vectors are nodal
/// (M-Riesz) representatives.
class MapProblem {
 public:
  MapProblem(PoissonForwardModel& model, const EllipticPrior& prior, const ErrorModel& err, Vector d_obs)
      : model_(&model), prior_(&prior), err_(&err), d_(std::move(d_obs))
  {
    if (prior.size() != model.parameter_size()) throw std::invalid_argument("MapProblem: prior and model disagree");
    require_size(d_, model.num_observations(), "MapProblem: data");
    if (err.size() != model.num_observations()) throw std::invalid_argument("MapProblem: error model size mismatch");
  }

  int size() const { return prior_->size(); }
  PoissonForwardModel& model() { return *model_; }
  const EllipticPrior& prior() const { return *prior_; }
  const ErrorModel& error_model() const { return *err_; }
  const Vector& data() const { return d_; }

  ObjectiveValue evaluate(const Vector& beta)
  {
    model_->forward_solve(beta);
    const Vector dx = beta - prior_->mean();
    prior_dual_ = prior_->precision_dual_apply(dx);
    return {model_->misfit_cost(d_, *err_), 0.5 * dx.dot(prior_dual_)};
  }

  Vector gradient()
  {
    return prior_->solve_M(model_->misfit_gradient_at_state(d_, *err_) + prior_dual_);
  }

  Vector hessian_action(const Vector& v)
  {
    return prior_->solve_M(model_->gn_hessian_action(v, *err_) + prior_->precision_dual_apply(v));
  }

  Vector preconditioner(const Vector& r) const { return prior_->covariance_apply(r); }

  double inner(const Vector& x, const Vector& y) const { return x.dot(prior_->mass() * y); }

  long poisson_solves() const { return model_->counter().total(); }

 private:
  PoissonForwardModel* model_;
  const EllipticPrior* prior_;
  const ErrorModel* err_;
  Vector d_;
  Vector prior_dual_;
};

struct MapResult {
  Vector beta;
  ConvergenceRecord record;
  bool converged() const { return record.converged; }
};

/// Raised when neither the Gauss-Newton direction nor the steepest-descent
/// fallback yields sufficient decrease. Carries the last accepted iterate.
class LineSearchFailure : public std::runtime_error {
 public:
  LineSearchFailure(const std::string& what, MapResult partial)
      : std::runtime_error(what), partial_(std::move(partial))
  {
  }
  const MapResult& partial() const { return partial_; }

 private:
  MapResult partial_;
};

/// Inexact Gauss-Newton-CG. `Problem` provides evaluate / gradient /
/// hessian_action / preconditioner / inner / poisson_solves / size (see
/// MapProblem).
template <class Problem>
MapResult solve_map(Problem& problem, const Vector& beta0, const GNConfig& cfg = {})
{
  cfg.validate();
  require_size(beta0, problem.size(), "solve_map: beta0");
  const int max_cg = cfg.max_cg_iters > 0 ? cfg.max_cg_iters : problem.size();
  auto norm = [&](const Vector& x) { return std::sqrt(std::max(problem.inner(x, x), 0.0)); };

  const long base = problem.poisson_solves();
  auto solves = [&] { return problem.poisson_solves() - base; };
  MapResult res;
  res.beta = beta0;
  ObjectiveValue J = problem.evaluate(res.beta);
  Vector g = problem.gradient();
  const double g0 = norm(g);

  for (int k = 0;; ++k) {
    ConvergenceRow row;
    row.gn_iter = k;
    row.cost = J.total();
    row.misfit_cost = J.misfit;
    row.prior_cost = J.prior;
    row.grad_norm = norm(g);

    if (row.grad_norm <= cfg.rel_grad_tol * g0) {
      res.record.converged = true;
      row.cumulative_poisson_solves = solves();
      res.record.rows.push_back(row);
      return res;
    }
    if (k == cfg.max_gn_iters) {
      res.record.max_iters_hit = true;
      row.cumulative_poisson_solves = solves();
      res.record.rows.push_back(row);
      return res;
    }

    const double forcing = std::min(cfg.ew_max_forcing, std::sqrt(row.grad_norm / g0));
    const CgResult cg = cg_inner([&](const Vector& v) { return problem.hessian_action(v); }, g,
                                 [&](const Vector& r) { return problem.preconditioner(r); }, forcing, max_cg,
                                 [&](const Vector& x, const Vector& y) { return problem.inner(x, y); });
    row.cg_iters = cg.iterations;

    // Armijo backtracking on the GN direction, then once on steepest descent.
    bool accepted = false;
    int trials = 0;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      const Vector dir = attempt == 0 ? cg.step : Vector(-g);
      const double slope = problem.inner(g, dir);
      if (!(slope < 0.0)) continue;
      double t = 1.0;
      for (int b = 0; b <= cfg.max_backtracks; ++b) {
        const Vector trial = res.beta + t * dir;
        ObjectiveValue Jt;
        try {
          Jt = problem.evaluate(trial);
        } catch (const NumericalFailure&) {
          // exp(beta) overflowed or the operator lost definiteness: reject the trial.
          Jt.misfit = std::numeric_limits<double>::infinity();
        }
        ++trials;
        if (std::isfinite(Jt.total()) && Jt.total() <= J.total() + cfg.armijo_c * t * slope) {
          res.beta = trial;
          J = Jt;
          accepted = true;
          break;
        }
        t *= cfg.armijo_shrink;
      }
    }
    if (!accepted) {
      // The rejected trials were all forward solves; the row still accounts for
      // them so the solve-count identity holds for the partial record.
      row.backtracks = trials;
      row.cumulative_poisson_solves = solves();
      res.record.rows.push_back(row);
      res.record.line_search_failed = true;
      // Restore the model state at the last accepted iterate (outside the record).
      problem.evaluate(res.beta);
      throw LineSearchFailure("solve_map: line search failed at Gauss-Newton iteration " + std::to_string(k), res);
    }
    row.backtracks = trials - 1;
    g = problem.gradient();
    // Row k closes once its adjoint solve has been issued; the accepted trial's
    // forward solve belongs to row k + 1.
    row.cumulative_poisson_solves = solves() - 2;
    res.record.rows.push_back(row);
  }
}

}  // namespace robinbae
