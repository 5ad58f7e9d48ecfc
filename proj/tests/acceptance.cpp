// Acceptance checks. Prints one PASS/FAIL line per criterion; exits 1 if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "robinbae/experiment.hpp"

using namespace robinbae;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args)
{
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void criterion(int id, double budget_s, const std::function<Verdict()>& body)
{
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0 && dt > budget_s) {
    v.pass = false;
    v.detail += fmt("; over the %.0f s budget", budget_s);
  }
  if (!v.pass) ++failures;
  std::printf("CRITERION %2d %s  %s  [%.1f s]\n", id, v.pass ? "PASS" : "FAIL", v.detail.c_str(), dt);
  std::fflush(stdout);
}

std::string slurp(const fs::path& p)
{
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

int run_cli(const std::string& args)
{
  const std::string cmd = std::string(ROBINBAE_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double sampled_rel_error(int n, std::uint64_t seed, int count, const std::function<Vector(const Vector&)>& a,
                         const std::function<Vector(const Vector&)>& b)
{
  auto rng = make_rng(seed);
  double err = 0.0, scale = 0.0;
  for (int k = 0; k < count; ++k) {
    Vector z = standard_normal(rng, n);
    z /= z.norm();
    const Vector bz = b(z);
    err = std::max(err, (a(z) - bz).norm());
    scale = std::max(scale, bz.norm());
  }
  return err / scale;
}

// Desk-scale isotropic problem at a = a_true with the synthesized data.
struct DeskProblem {
  ExperimentSetup setup{ExperimentConfig::defaults(Case::Isotropic, false)};
  SynthesisRecord rec = synthesize_data(setup);
  PoissonForwardModel model = setup.inversion_model(rec.a_true);
  ErrorModel err = noise_model(rec);
  MapProblem problem{model, setup.beta_prior(), err, rec.d_obs};
};

// 2-D slab with 51 parameter nodes and 8 observations.
struct DenseInstance {
  SlabMesh volume = build_slab_mesh(50, 0, 2, 1.0, 0.01, 2);
  SlabMesh bottom = extract_bottom_mesh(volume);
  EllipticPrior prior{bottom, 7.0, Matrix::Identity(1, 1) * 0.01, 0.0, Vector::Ones(bottom.num_nodes()),
                      BoundaryVariant::Weighted};
  PoissonForwardModel model{volume, bottom, Vector::Zero(volume.num_nodes()), Vector::Ones(volume.num_nodes()),
                            make_observation_operator(volume, points())};
  ErrorModel err;
  Vector beta;

  static std::vector<std::vector<double>> points()
  {
    std::vector<std::vector<double>> p;
    for (int k = 0; k < 8; ++k) p.push_back({0.1 + 0.8 * k / 7.0});
    return p;
  }

  DenseInstance()
  {
    beta = prior.sample(8);
    model.forward_solve(beta);
    const Vector y = model.observed();
    err = ErrorModel::noise_only(noise_level(y, 1.0), model.num_observations());
  }

  int n() const { return bottom.num_nodes(); }
};

struct CaseRun {
  std::string name;
  fs::path dir;
  int rc = -1;
  double seconds = 0.0;
  json manifest, error_stats;
};

CaseRun run_case(const std::string& name, const fs::path& dir)
{
  fs::remove_all(dir);
  CaseRun c;
  c.name = name;
  c.dir = dir;
  const auto t0 = std::chrono::steady_clock::now();
  c.rc = run_cli("--case " + name + " --bae-samples 1000 --out " + dir.string() + " run-all");
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (fs::exists(dir / "manifest.json")) c.manifest = read_json(dir / "manifest.json");
  if (fs::exists(dir / "error_stats.json")) c.error_stats = read_json(dir / "error_stats.json");
  return c;
}

}  // namespace

int main()
{
  const fs::path work = fs::temp_directory_path() / "robinbae_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  criterion(1, 60, [] {
    DeskProblem d;
    const auto& prior = d.setup.beta_prior();
    const int n = prior.size();
    auto rng = make_rng(101);
    const Vector beta = prior.sample(102);
    double worst = 0.0;
    for (int k = 0; k < 5; ++k) {
      const Vector v = standard_normal(rng, n);
      d.problem.evaluate(beta);
      const double slope = d.problem.inner(d.problem.gradient(), v);
      double best = 1e300;
      for (double h = 1e-2; h >= 1e-8 * 0.99; h /= 10) {
        const double fd = (d.problem.evaluate(beta + h * v).total() - d.problem.evaluate(beta - h * v).total()) / (2 * h);
        best = std::min(best, std::abs(fd - slope) / std::abs(slope));
      }
      worst = std::max(worst, best);
    }
    return Verdict{worst <= 1e-4, fmt("worst over 5 directions of the min relative error %.2e (<= 1e-4)", worst)};
  });

  criterion(2, 60, [] {
    DeskProblem d;
    const auto& prior = d.setup.beta_prior();
    const int n = prior.size();
    d.problem.evaluate(prior.sample(103));
    auto rng = make_rng(104);
    double worst_sym = 0.0, min_curv = 1e300;
    auto check = [&](const std::function<Vector(const Vector&)>& H) {
      for (int k = 0; k < 10; ++k) {
        const Vector v = standard_normal(rng, n), w = standard_normal(rng, n);
        const Vector Hv = H(v), Hw = H(w);
        const double m = [&](const Vector& x) { return std::sqrt(d.problem.inner(x, x)); }(Hv) *
                         std::sqrt(d.problem.inner(w, w));
        worst_sym = std::max(worst_sym, std::abs(d.problem.inner(Hv, w) - d.problem.inner(v, Hw)) / m);
        min_curv = std::min(min_curv, d.problem.inner(Hv, v));
      }
    };
    check([&](const Vector& v) { return d.problem.hessian_action(v); });
    check([&](const Vector& v) { return prior.solve_M(d.model.gn_hessian_action(v, d.err)); });
    return Verdict{worst_sym <= 1e-8 && min_curv >= 0.0,
                   fmt("max symmetry defect %.2e (<= 1e-8), min <Hv,v>_M %.3e (>= 0), full and misfit-only", worst_sym,
                       min_curv)};
  });

  criterion(3, 300, [] {
    DeskProblem d;
    const ExperimentConfig& cfg = d.setup.config();
    const LowRankPosterior lr =
        ppmisfit_eigs(d.model, d.setup.beta_prior(), d.err, d.setup.beta_prior().mean(), cfg.probes(), 105);
    const Vector& lam = lr.spectrum().values;
    const int q = cfg.num_observations();
    const double ratio = lam[q] / lam[0];
    return Verdict{q == 33 && ratio <= 1e-10,
                   fmt("q = %d, lambda_1 = %.3e, lambda_%d / lambda_1 = %.2e (<= 1e-10), %d probes", q, lam[0], q + 1,
                       ratio, static_cast<int>(lam.size()))};
  });

  criterion(4, 60, [] {
    DenseInstance d;
    const int n = d.n();
    LowRankPosterior lr = ppmisfit_eigs(d.model, d.prior, d.err, d.beta, n, 106, 0.0);
    lr.set_rank(static_cast<int>(lr.spectrum().values.size()));
    Matrix Hmis(n, n);
    for (int j = 0; j < n; ++j) Hmis.col(j) = d.model.gn_hessian_action(Vector::Unit(n, j), d.err);
    const Matrix K(d.prior.stiffness()), M(d.prior.mass());
    const Matrix Winv = d.prior.weight().cwiseInverse().asDiagonal();
    const Matrix H = 0.5 * (Hmis + Hmis.transpose()) + Winv * K * M.inverse() * K * Winv;
    const Matrix oracle = H.inverse() * M;
    const double rel = sampled_rel_error(n, 107, 20, [&](const Vector& z) { return lr.cov_apply(z); },
                                         [&](const Vector& z) { return Vector(oracle * z); });
    return Verdict{n <= 60 && rel <= 1e-6, fmt("n = %d, sampled relative operator error %.2e (<= 1e-6)", n, rel)};
  });

  criterion(5, 60, [] {
    DenseInstance d;
    const int n = d.n();
    const LowRankPosterior lr = ppmisfit_eigs(d.model, d.prior, d.err, d.beta, 18, 108);
    const double rel = sampled_rel_error(
        n, 109, 20, [&](const Vector& z) { return lr.sqrt_apply(lr.sqrt_adjoint_apply(z)); },
        [&](const Vector& z) { return lr.cov_apply(z); });
    return Verdict{rel <= 1e-8 && lr.rank() > 0, fmt("rank %d, |S S* - C| relative %.2e (<= 1e-8)", lr.rank(), rel)};
  });

  criterion(6, 120, [] {
    auto spread = [](const Vector& v) { return v.maxCoeff() / v.minCoeff() - 1.0; };
    std::string detail;
    bool ok = true;
    for (int nx : {12, 30}) {
      const SlabMesh bottom = extract_bottom_mesh(build_slab_mesh(nx, nx, 1, 1.0, 0.01, 3));
      const Vector mean = Vector::Ones(bottom.num_nodes());
      const Matrix G = Matrix::Identity(2, 2) * 0.01;
      const EllipticPrior w(bottom, 7.0, G, 0.0, mean, BoundaryVariant::Weighted);
      const EllipticPrior u(bottom, 7.0, G, 0.0, mean, BoundaryVariant::Neumann);
      const double sw = spread(w.pointwise_variance()), su = spread(u.pointwise_variance());
      ok = ok && sw <= 1e-8 && su >= 0.5;
      detail += fmt("%s%d nodes: weighted spread %.1e, Neumann spread %.0f%%", detail.empty() ? "" : "; ",
                    bottom.num_nodes(), sw, 100 * su);
    }
    return Verdict{ok, detail};
  });

  // Criteria 7-9 and 11 read the CLI runs.
  const CaseRun iso = run_case("isotropic", work / "iso_a");
  const CaseRun aniso = run_case("anisotropic", work / "aniso");

  criterion(7, 1200, [&] {
    bool ok = true;
    std::string detail;
    for (const CaseRun* c : {&iso, &aniso}) {
      const json& es = c->error_stats;
      if (es.is_null()) return Verdict{false, "error_stats.json missing in " + c->dir.string()};
      const int r = es.at("stats").at("r");
      const double ratio = es.at("trace_eps_cov").get<double>() / es.at("trace_noise_cov").get<double>();
      const bool global = es.at("dominance").at("global");
      ok = ok && r >= 200 && ratio >= 10 && global && c->seconds < 1200;
      detail += fmt("%s%s: r = %d, trace ratio %.1f (>= 10), global %s, run-all %.0f s", detail.empty() ? "" : "; ",
                    c->name.c_str(), r, ratio, global ? "yes" : "no", c->seconds);
    }
    return Verdict{ok, detail};
  });

  criterion(8, 0, [&] {
    bool ok = true;
    std::string detail;
    for (const CaseRun* c : {&iso, &aniso}) {
      if (c->manifest.is_null()) return Verdict{false, "manifest.json missing in " + c->dir.string()};
      const json& cov = c->manifest.at("coverage");
      const double ref = cov.at("ref"), cem = cov.at("cem"), bae = cov.at("bae");
      ok = ok && bae >= 0.85 && bae > cem && ref >= 0.85 && c->seconds < 1800;
      detail += fmt("%s%s: BAE %.3f (>= 0.85, > CEM %.3f), REF %.3f (>= 0.85), run-all %.0f s",
                    detail.empty() ? "" : "; ", c->name.c_str(), bae, cem, ref, c->seconds);
    }
    return Verdict{ok, detail};
  });

  criterion(9, 0, [&] {
    bool ok = true;
    std::string detail;
    for (const CaseRun* c : {&iso, &aniso}) {
      if (c->manifest.is_null()) return Verdict{false, "manifest.json missing in " + c->dir.string()};
      const json& s = c->manifest.at("solve_counts");
      const json& st = c->manifest.at("inversion_status");
      std::string line = c->name + ":";
      for (const char* m : {"ref", "cem", "bae"}) {
        const json& x = s.at(m);
        const bool converged = st.at(m) == "converged";
        const int iters = x.at("gn_iterations");
        const double rel = x.at("relative_gradient");
        const bool identity = x.at("poisson_solves") == x.at("accounted_poisson_solves");
        ok = ok && identity && (!converged || (iters <= 50 && rel <= 1e-7));
        line += fmt(" %s %s %d it %ld solves%s", m, converged ? "converged" : st.at(m).get<std::string>().c_str(), iters,
                    x.at("poisson_solves").get<long>(), identity ? "" : " (accounting mismatch)");
      }
      const long bae = s.at("bae").at("poisson_solves"), cem = s.at("cem").at("poisson_solves");
      ok = ok && bae <= 2 * cem;
      line += fmt(", BAE/CEM solves %.2f (<= 2)", static_cast<double>(bae) / cem);
      detail += (detail.empty() ? "" : "; ") + line;
    }
    return Verdict{ok, detail};
  });

  criterion(10, 300, [&] {
    const ExperimentSetup setup(ExperimentConfig::defaults(Case::Isotropic, false));
    const ExperimentStore store(iso.dir);
    const SynthesisRecord rec = load_synthesis(store, setup);
    const ErrorStats stats = load_error_stats(store, setup);
    const Vector map = load_map(store, setup, ModelKind::Bae);
    const int n = setup.beta_prior().size();
    PoissonForwardModel model = setup.inversion_model(setup.a_star());
    const ErrorModel bae = error_model_for(ModelKind::Bae, rec, &stats);
    const ErrorModel cem = error_model_for(ModelKind::Cem, rec, nullptr);
    LowRankPosterior wide = ppmisfit_eigs(model, setup.beta_prior(), bae, map, n, 110, 0.0);
    LowRankPosterior narrow = ppmisfit_eigs(model, setup.beta_prior(), cem, map, n, 110, 0.0);
    wide.set_rank(static_cast<int>(wide.spectrum().values.size()));
    narrow.set_rank(static_cast<int>(narrow.spectrum().values.size()));
    const SparseMatrix& M = setup.beta_prior().mass();
    auto rng = make_rng(111);
    int wider = 0;
    for (int k = 0; k < 1000; ++k) {
      const Vector z = standard_normal(rng, n);
      const Vector Mz = M * z;
      if (Mz.dot(wide.cov_apply(z)) >= Mz.dot(narrow.cov_apply(z))) ++wider;
    }
    return Verdict{wider >= 990, fmt("%d / 1000 directions wider at the BAE MAP (>= 990), full rank n = %d", wider, n)};
  });

  criterion(11, 0, [&] {
    const CaseRun again = run_case("isotropic", work / "iso_b");
    if (iso.rc != again.rc) return Verdict{false, fmt("exit codes differ: %d vs %d", iso.rc, again.rc)};
    int files = 0, differing = 0;
    for (const auto& e : fs::recursive_directory_iterator(iso.dir)) {
      if (!e.is_regular_file()) continue;
      ++files;
      const fs::path other = again.dir / fs::relative(e.path(), iso.dir);
      if (!fs::exists(other) || slurp(e.path()) != slurp(other)) ++differing;
    }
    int files_b = 0;
    for (const auto& e : fs::recursive_directory_iterator(again.dir)) files_b += e.is_regular_file();
    const bool ok = iso.rc == 0 && files > 0 && files == files_b && differing == 0;
    return Verdict{ok, fmt("run-all exit %d, %d files, %d differing", iso.rc, files, differing)};
  });

  fs::remove_all(work);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
