#pragma once

// Approximation-error statistics. For draws (a, beta) from the joint prior,
//
//   eps = f(a, beta) - f_{a*}(beta),
//
// where f is the accurate model (fine mesh, random conductivity) and f_{a*}
// the approximate one (inversion mesh, conductivity fixed at the prior mean).
// The Gaussian fit of eps enters the likelihood as nu_* = e_* + eps_* and
// Gamma_nu = Gamma_e + Gamma_eps.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "robinbae/forward_model.hpp"
#include "robinbae/prior.hpp"

namespace robinbae {

struct ErrorStats {
  int r = 0;
  Vector eps_mean;
  Matrix eps_cov;
  std::uint64_t master_seed = 0;
  std::vector<std::uint64_t> sample_seeds;  // (a, beta) seed pairs, flattened
  std::map<std::string, std::uint64_t> fingerprints;
};

/// Everything needed to evaluate one error sample. The factories are called
/// once per worker thread so that each thread owns its models.
struct ErrorSampleSetup {
  std::function<PoissonForwardModel()> make_accurate;
  std::function<PoissonForwardModel()> make_approximate;
  /// Conductivity draw on the accurate volume mesh (normally a prior sample).
  std::function<Vector(std::uint64_t seed)> draw_a;
  /// Robin-coefficient draw on the accurate bottom mesh.
  std::function<Vector(std::uint64_t seed)> draw_beta;
  /// Maps beta from the accurate bottom mesh to the approximate one.
  std::function<Vector(const Vector&)> transfer_beta;
};

inline std::uint64_t conductivity_seed(std::uint64_t master, int l) { return derive_seed(master, 2 * std::uint64_t(l)); }
inline std::uint64_t robin_seed(std::uint64_t master, int l) { return derive_seed(master, 2 * std::uint64_t(l) + 1); }

/// r samples of eps. Sample l uses its own seeds, so the result does not depend
/// on the thread count. A failed solve aborts with the sample index.
inline std::vector<Vector> compute_error_samples(const ErrorSampleSetup& setup, int r, std::uint64_t master_seed,
                                                 int threads = 1)
{
  if (r < 1) throw std::invalid_argument("compute_error_samples: r must be positive");
  if (!setup.make_accurate || !setup.make_approximate || !setup.draw_a || !setup.draw_beta)
    throw std::invalid_argument("compute_error_samples: incomplete setup");
  threads = std::max(1, std::min(threads, r));
  std::vector<Vector> out(r);
  std::exception_ptr failure;
  int failed_index = r;
  std::mutex lock;

  auto worker = [&](int t) {
    try {
      PoissonForwardModel accurate = setup.make_accurate();
      PoissonForwardModel approx = setup.make_approximate();
      for (int l = t; l < r; l += threads) {
        {
          std::lock_guard<std::mutex> g(lock);
          if (failed_index < l) return;
        }
        try {
          const Vector a = setup.draw_a(conductivity_seed(master_seed, l));
          const Vector beta = setup.draw_beta(robin_seed(master_seed, l));
          accurate.set_conductivity(a);
          accurate.forward_solve(beta);
          approx.forward_solve(setup.transfer_beta ? setup.transfer_beta(beta) : beta);
          out[l] = accurate.observed() - approx.observed();
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> g(lock);
          if (l < failed_index) {
            failed_index = l;
            failure = std::make_exception_ptr(
                NumericalFailure("compute_error_samples: sample " + std::to_string(l) + ": " + e.what()));
          }
          return;
        }
      }
    } catch (...) {
      std::lock_guard<std::mutex> g(lock);
      if (!failure) failure = std::current_exception();
    }
  };

  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

/// Sample mean and unbiased (1/(r-1)) covariance, reduced in index order.
inline ErrorStats sample_stats(const std::vector<Vector>& samples)
{
  const int r = static_cast<int>(samples.size());
  if (r < 2) throw std::invalid_argument("sample_stats: need at least two samples");
  const Eigen::Index q = samples[0].size();
  ErrorStats s;
  s.r = r;
  s.eps_mean = Vector::Zero(q);
  for (const auto& e : samples) {
    require_size(e, q, "sample_stats");
    s.eps_mean += e;
  }
  s.eps_mean /= r;
  s.eps_cov = Matrix::Zero(q, q);
  for (const auto& e : samples) {
    const Vector d = e - s.eps_mean;
    s.eps_cov.noalias() += d * d.transpose();
  }
  s.eps_cov /= (r - 1);
  return s;
}

/// nu_* = e_* + eps_*, Gamma_nu = Gamma_e + Gamma_eps with eigenvalues floored
/// at 1e-12 trace(Gamma_nu).
inline ErrorModel enhanced_model(const ErrorStats& stats, const Matrix& noise_cov, const Vector& noise_mean)
{
  const Eigen::Index q = noise_mean.size();
  if (stats.eps_mean.size() != q || stats.eps_cov.rows() != q || noise_cov.rows() != q || noise_cov.cols() != q)
    throw std::invalid_argument("enhanced_model: dimension mismatch");
  Matrix cov = noise_cov + stats.eps_cov;
  cov = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const double floor = 1e-12 * cov.trace();
  if (es.eigenvalues().minCoeff() < floor) {
    const Vector lam = es.eigenvalues().cwiseMax(floor);
    cov = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
    cov = 0.5 * (cov + cov.transpose());
  }
  return ErrorModel(noise_mean + stats.eps_mean, cov);
}

struct DominanceReport {
  bool global = false;
  double noise_side = 0.0;  // |e_*|^2 + tr Gamma_e
  double error_side = 0.0;  // |eps_*|^2 + tr Gamma_eps
  std::vector<double> noise_component;
  std::vector<double> error_component;
  std::vector<bool> component;

  int dominant_count() const { return static_cast<int>(std::count(component.begin(), component.end(), true)); }
};

/// Rule of thumb: the approximation error matters when it dominates the noise,
/// globally and per observation.
inline DominanceReport dominance_check(const ErrorStats& stats, const Vector& noise_mean, const Matrix& noise_cov)
{
  const Eigen::Index q = noise_mean.size();
  if (stats.eps_mean.size() != q || noise_cov.rows() != q) throw std::invalid_argument("dominance_check: dimension mismatch");
  DominanceReport rep;
  rep.noise_side = noise_mean.squaredNorm() + noise_cov.trace();
  rep.error_side = stats.eps_mean.squaredNorm() + stats.eps_cov.trace();
  rep.global = rep.noise_side < rep.error_side;
  for (Eigen::Index k = 0; k < q; ++k) {
    const double n = noise_mean[k] * noise_mean[k] + noise_cov(k, k);
    const double e = stats.eps_mean[k] * stats.eps_mean[k] + stats.eps_cov(k, k);
    rep.noise_component.push_back(n);
    rep.error_component.push_back(e);
    rep.component.push_back(n < e);
  }
  return rep;
}

inline std::string hex64(std::uint64_t v)
{
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t parse_hex64(const std::string& s)
{
  std::size_t pos = 0;
  const unsigned long long v = std::stoull(s, &pos, 16);
  if (pos != s.size()) throw std::invalid_argument("bad fingerprint '" + s + "'");
  return v;
}

inline nlohmann::json to_json(const ErrorStats& s)
{
  nlohmann::json j;
  j["r"] = s.r;
  j["eps_mean"] = std::vector<double>(s.eps_mean.data(), s.eps_mean.data() + s.eps_mean.size());
  std::vector<double> cov;
  for (Eigen::Index i = 0; i < s.eps_cov.rows(); ++i)
    for (Eigen::Index k = 0; k < s.eps_cov.cols(); ++k) cov.push_back(s.eps_cov(i, k));
  j["eps_cov"] = cov;
  j["master_seed"] = s.master_seed;
  nlohmann::json fp = nlohmann::json::object();
  for (const auto& [k, v] : s.fingerprints) fp[k] = hex64(v);
  j["fingerprints"] = fp;
  return j;
}

inline ErrorStats error_stats_from_json(const nlohmann::json& j)
{
  ErrorStats s;
  s.r = j.at("r").get<int>();
  const auto mean = j.at("eps_mean").get<std::vector<double>>();
  const auto cov = j.at("eps_cov").get<std::vector<double>>();
  const auto q = static_cast<Eigen::Index>(mean.size());
  if (static_cast<Eigen::Index>(cov.size()) != q * q) throw std::invalid_argument("error stats: eps_cov must be q*q");
  s.eps_mean = Eigen::Map<const Vector>(mean.data(), q);
  s.eps_cov.resize(q, q);
  for (Eigen::Index i = 0; i < q; ++i)
    for (Eigen::Index k = 0; k < q; ++k) s.eps_cov(i, k) = cov[i * q + k];
  s.master_seed = j.at("master_seed").get<std::uint64_t>();
  if (j.contains("fingerprints"))
    for (const auto& [k, v] : j.at("fingerprints").items()) s.fingerprints[k] = parse_hex64(v.get<std::string>());
  return s;
}

}  // namespace robinbae
