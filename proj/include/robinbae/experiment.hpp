#pragma once

// Synthetic-data experiment: data synthesis on a fine mesh, the REF/CEM/BAE
// inversion triptych on the inversion mesh, low-rank posteriors and the files
// behind the figures and tables.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "robinbae/bae.hpp"
#include "robinbae/mesh.hpp"
#include "robinbae/optimizer.hpp"
#include "robinbae/posterior.hpp"

namespace robinbae {

using nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage failed to reach its stopping criterion.
class NonConvergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Case { Isotropic, Anisotropic };
enum class ModelKind { Ref, Cem, Bae };

inline const char* to_string(Case c) { return c == Case::Isotropic ? "isotropic" : "anisotropic"; }

inline const char* to_string(ModelKind k)
{
  switch (k) {
    case ModelKind::Ref: return "ref";
    case ModelKind::Cem: return "cem";
    case ModelKind::Bae: return "bae";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s)
{
  if (s == "ref") return ModelKind::Ref;
  if (s == "cem") return ModelKind::Cem;
  if (s == "bae") return ModelKind::Bae;
  throw ConfigError("unknown model '" + s + "' (expected ref, cem or bae)");
}

inline constexpr std::array<ModelKind, 3> all_models{ModelKind::Ref, ModelKind::Cem, ModelKind::Bae};

struct MeshResolution {
  int nx = 1, ny = 1, nz = 1;
  bool operator==(const MeshResolution&) const = default;
};

struct FieldPriorConfig {
  double alpha = 1.0;
  std::vector<double> gamma{1.0};  // one entry: isotropic; dim entries: diagonal
  double kappa = 0.0;
  double mean = 0.0;

  Matrix gamma_matrix(int dim) const
  {
    if (gamma.size() == 1) return gamma[0] * Matrix::Identity(dim, dim);
    if (static_cast<int>(gamma.size()) != dim)
      throw ConfigError("prior gamma needs 1 or " + std::to_string(dim) + " entries");
    return Vector::Map(gamma.data(), dim).asDiagonal();
  }
};

/// 4 rows of 8 points on [0.1, 0.9]^2 plus the centre, scaled by L.
inline std::vector<std::array<double, 2>> default_observation_layout(double L = 1.0)
{
  std::vector<std::array<double, 2>> p;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 8; ++c) p.push_back({L * (0.1 + 0.8 * c / 7.0), L * (0.1 + 0.8 * r / 3.0)});
  p.push_back({0.5 * L, 0.5 * L});
  return p;
}

struct ExperimentConfig {
  Case test_case = Case::Isotropic;
  bool paper_scale = false;
  double length = 1.0;
  double thickness = 0.01;
  MeshResolution synthesis_mesh{24, 24, 6};
  MeshResolution inversion_mesh{12, 12, 3};
  FieldPriorConfig beta_prior{7.0, {0.01}, 0.0, 1.0};
  FieldPriorConfig a_prior{100.0, {1e-3}, 0.0, 0.0};
  double noise_percent = 1.0;
  std::vector<std::array<double, 2>> observation_points = default_observation_layout();
  int bae_samples = 1000;
  std::uint64_t master_seed = 1;
  std::uint64_t truth_seed = 2019;
  GNConfig gn;
  int eig_probes = 0;  // 0: q + 10
  double eig_threshold = 0.1;
  int eigenvector_exports = 4;
  int cross_section_samples = 101;
  int threads = 1;
  std::string output_dir = "robinbae_out";  // not part of the hashed config

  static ExperimentConfig defaults(Case c, bool paper)
  {
    ExperimentConfig cfg;
    cfg.test_case = c;
    cfg.paper_scale = paper;
    if (c == Case::Anisotropic) cfg.a_prior.gamma = {1e-2, 1e-2, 1e-8};
    if (paper) {
      cfg.inversion_mesh = c == Case::Isotropic ? MeshResolution{30, 30, 6} : MeshResolution{30, 30, 30};
      cfg.synthesis_mesh = c == Case::Isotropic ? MeshResolution{50, 50, 10} : MeshResolution{50, 50, 50};
    }
    return cfg;
  }

  int num_observations() const { return static_cast<int>(observation_points.size()); }
  int probes() const { return eig_probes > 0 ? eig_probes : num_observations() + 10; }

  void validate() const
  {
    auto fail = [](const std::string& s) { throw ConfigError(s); };
    if (!(length > 0.0) || !(thickness > 0.0)) fail("length and thickness must be positive");
    for (const MeshResolution* m : {&synthesis_mesh, &inversion_mesh})
      if (m->nx < 1 || m->ny < 1 || m->nz < 1) fail("mesh resolutions must be positive");
    if (!(synthesis_mesh.nx > inversion_mesh.nx && synthesis_mesh.ny > inversion_mesh.ny &&
          synthesis_mesh.nz > inversion_mesh.nz))
      fail("synthesis mesh must be strictly finer than the inversion mesh in every axis (inverse crime)");
    for (const FieldPriorConfig* p : {&beta_prior, &a_prior}) {
      if (!(p->alpha > 0.0)) fail("prior alpha must be positive");
      if (p->gamma.empty()) fail("prior gamma must not be empty");
      for (double g : p->gamma)
        if (!(g > 0.0)) fail("prior gamma entries must be positive");
      if (!(p->kappa >= 0.0)) fail("prior kappa must be nonnegative");
    }
    beta_prior.gamma_matrix(2);
    a_prior.gamma_matrix(3);
    if (!(noise_percent > 0.0)) fail("noise_percent must be positive");
    if (observation_points.empty()) fail("at least one observation point is required");
    for (const auto& p : observation_points)
      if (!(p[0] >= 0.0 && p[0] <= length && p[1] >= 0.0 && p[1] <= length))
        fail("observation point outside the top surface");
    if (bae_samples < 50) fail("bae_samples must be at least 50");
    if (eig_probes < 0) fail("eig_probes must be nonnegative");
    if (!(eig_threshold >= 0.0)) fail("eig_threshold must be nonnegative");
    if (eigenvector_exports < 0) fail("eigenvector_exports must be nonnegative");
    if (cross_section_samples < 2) fail("cross_section_samples must be at least 2");
    if (threads < 1) fail("threads must be positive");
    try {
      gn.validate();
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
  }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where)
{
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& where)
{
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline std::uint64_t get_seed(const json& j, const char* key)
{
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
    throw ConfigError(std::string(key) + ": expected a nonnegative integer");
  return v.get<std::uint64_t>();
}

inline MeshResolution mesh_from_json(const json& j, const std::string& where)
{
  check_keys(j, {"nx", "ny", "nz"}, where);
  MeshResolution m;
  m.nx = get<int>(j, "nx", where);
  m.ny = get<int>(j, "ny", where);
  m.nz = get<int>(j, "nz", where);
  return m;
}

inline void prior_from_json(const json& j, FieldPriorConfig& p, const std::string& where)
{
  check_keys(j, {"alpha", "gamma", "kappa", "mean"}, where);
  if (j.contains("alpha")) p.alpha = get<double>(j, "alpha", where);
  if (j.contains("gamma")) {
    const json& g = j.at("gamma");
    p.gamma = g.is_array() ? get<std::vector<double>>(j, "gamma", where) : std::vector<double>{get<double>(j, "gamma", where)};
  }
  if (j.contains("kappa")) p.kappa = get<double>(j, "kappa", where);
  if (j.contains("mean")) p.mean = get<double>(j, "mean", where);
}

inline json prior_to_json(const FieldPriorConfig& p)
{
  return {{"alpha", p.alpha}, {"gamma", p.gamma}, {"kappa", p.kappa}, {"mean", p.mean}};
}

}  // namespace detail

/// Parses a config object. Keys not listed are rejected; omitted keys take the
/// defaults for the case and scale.
inline ExperimentConfig config_from_json(const json& j, bool force_paper_scale = false)
{
  using namespace detail;
  check_keys(j,
             {"case", "paper_scale", "length", "thickness", "synthesis_mesh", "inversion_mesh", "beta_prior", "a_prior",
              "noise_percent", "observation_points", "bae_samples", "master_seed", "truth_seed", "gn", "eig_probes",
              "eig_threshold", "eigenvector_exports", "cross_section_samples", "threads", "output_dir"},
             "config");
  Case c = Case::Isotropic;
  if (j.contains("case")) {
    const std::string s = get<std::string>(j, "case", "config");
    if (s == "isotropic")
      c = Case::Isotropic;
    else if (s == "anisotropic")
      c = Case::Anisotropic;
    else
      throw ConfigError("config.case: expected isotropic or anisotropic");
  }
  const bool paper = force_paper_scale || (j.contains("paper_scale") && get<bool>(j, "paper_scale", "config"));
  ExperimentConfig cfg = ExperimentConfig::defaults(c, paper);
  if (j.contains("length")) {
    cfg.length = get<double>(j, "length", "config");
    if (!j.contains("observation_points")) cfg.observation_points = default_observation_layout(cfg.length);
  }
  if (j.contains("thickness")) cfg.thickness = get<double>(j, "thickness", "config");
  if (j.contains("synthesis_mesh")) cfg.synthesis_mesh = mesh_from_json(j.at("synthesis_mesh"), "synthesis_mesh");
  if (j.contains("inversion_mesh")) cfg.inversion_mesh = mesh_from_json(j.at("inversion_mesh"), "inversion_mesh");
  if (j.contains("beta_prior")) prior_from_json(j.at("beta_prior"), cfg.beta_prior, "beta_prior");
  if (j.contains("a_prior")) prior_from_json(j.at("a_prior"), cfg.a_prior, "a_prior");
  if (j.contains("noise_percent")) cfg.noise_percent = get<double>(j, "noise_percent", "config");
  if (j.contains("observation_points")) {
    const auto pts = get<std::vector<std::vector<double>>>(j, "observation_points", "config");
    cfg.observation_points.clear();
    for (const auto& p : pts) {
      if (p.size() != 2) throw ConfigError("observation_points: each point needs two coordinates");
      cfg.observation_points.push_back({p[0], p[1]});
    }
  }
  if (j.contains("bae_samples")) cfg.bae_samples = get<int>(j, "bae_samples", "config");
  if (j.contains("master_seed")) cfg.master_seed = get_seed(j, "master_seed");
  if (j.contains("truth_seed")) cfg.truth_seed = get_seed(j, "truth_seed");
  if (j.contains("gn")) {
    const json& g = j.at("gn");
    check_keys(g,
               {"rel_grad_tol", "max_gn_iters", "ew_max_forcing", "armijo_c", "armijo_shrink", "max_backtracks",
                "max_cg_iters"},
               "gn");
    if (g.contains("rel_grad_tol")) cfg.gn.rel_grad_tol = get<double>(g, "rel_grad_tol", "gn");
    if (g.contains("max_gn_iters")) cfg.gn.max_gn_iters = get<int>(g, "max_gn_iters", "gn");
    if (g.contains("ew_max_forcing")) cfg.gn.ew_max_forcing = get<double>(g, "ew_max_forcing", "gn");
    if (g.contains("armijo_c")) cfg.gn.armijo_c = get<double>(g, "armijo_c", "gn");
    if (g.contains("armijo_shrink")) cfg.gn.armijo_shrink = get<double>(g, "armijo_shrink", "gn");
    if (g.contains("max_backtracks")) cfg.gn.max_backtracks = get<int>(g, "max_backtracks", "gn");
    if (g.contains("max_cg_iters")) cfg.gn.max_cg_iters = get<int>(g, "max_cg_iters", "gn");
  }
  if (j.contains("eig_probes")) cfg.eig_probes = get<int>(j, "eig_probes", "config");
  if (j.contains("eig_threshold")) cfg.eig_threshold = get<double>(j, "eig_threshold", "config");
  if (j.contains("eigenvector_exports")) cfg.eigenvector_exports = get<int>(j, "eigenvector_exports", "config");
  if (j.contains("cross_section_samples"))
    cfg.cross_section_samples = get<int>(j, "cross_section_samples", "config");
  if (j.contains("threads")) cfg.threads = get<int>(j, "threads", "config");
  if (j.contains("output_dir")) cfg.output_dir = get<std::string>(j, "output_dir", "config");
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path, bool force_paper_scale = false)
{
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return config_from_json(j, force_paper_scale);
}

/// Canonical form (everything except the output directory).
inline json to_json(const ExperimentConfig& c)
{
  auto mesh = [](const MeshResolution& m) { return json{{"nx", m.nx}, {"ny", m.ny}, {"nz", m.nz}}; };
  json pts = json::array();
  for (const auto& p : c.observation_points) pts.push_back({p[0], p[1]});
  return {{"case", to_string(c.test_case)},
          {"paper_scale", c.paper_scale},
          {"length", c.length},
          {"thickness", c.thickness},
          {"synthesis_mesh", mesh(c.synthesis_mesh)},
          {"inversion_mesh", mesh(c.inversion_mesh)},
          {"beta_prior", detail::prior_to_json(c.beta_prior)},
          {"a_prior", detail::prior_to_json(c.a_prior)},
          {"noise_percent", c.noise_percent},
          {"observation_points", pts},
          {"bae_samples", c.bae_samples},
          {"master_seed", c.master_seed},
          {"truth_seed", c.truth_seed},
          {"gn",
           {{"rel_grad_tol", c.gn.rel_grad_tol},
            {"max_gn_iters", c.gn.max_gn_iters},
            {"ew_max_forcing", c.gn.ew_max_forcing},
            {"armijo_c", c.gn.armijo_c},
            {"armijo_shrink", c.gn.armijo_shrink},
            {"max_backtracks", c.gn.max_backtracks},
            {"max_cg_iters", c.gn.max_cg_iters}}},
          {"eig_probes", c.eig_probes},
          {"eig_threshold", c.eig_threshold},
          {"eigenvector_exports", c.eigenvector_exports},
          {"cross_section_samples", c.cross_section_samples},
          {"threads", c.threads}};
}

inline std::string config_hash(const ExperimentConfig& c)
{
  const std::string s = to_json(c).dump();
  return hex64(detail::fnv1a(s.data(), s.size()));
}

// Seed streams derived from the master seed.
inline std::uint64_t noise_seed(const ExperimentConfig& c) { return derive_seed(c.master_seed, 0); }
inline std::uint64_t bae_seed(const ExperimentConfig& c) { return derive_seed(c.master_seed, 1); }
inline std::uint64_t eig_seed(const ExperimentConfig& c, ModelKind k)
{
  return derive_seed(c.master_seed, 2 + static_cast<std::uint64_t>(k));
}
inline std::uint64_t truth_beta_seed(const ExperimentConfig& c) { return derive_seed(c.truth_seed, 0); }
inline std::uint64_t truth_a_seed(const ExperimentConfig& c) { return derive_seed(c.truth_seed, 1); }

/// One entry per forward-model construction: who built which model on which
/// mesh with which conductivity.
struct ModelAccess {
  std::string stage;
  std::string mesh;  // "synthesis" or "inversion"
  std::string mesh_fingerprint;
  std::string conductivity;  // "a_true", "a_star" or "a_prior_samples"
};

inline json to_json(const ModelAccess& a)
{
  return {{"stage", a.stage}, {"mesh", a.mesh}, {"mesh_fingerprint", a.mesh_fingerprint}, {"conductivity", a.conductivity}};
}

inline json to_json(const std::vector<ModelAccess>& log)
{
  json j = json::array();
  for (const auto& a : log) j.push_back(to_json(a));
  return j;
}

/// Meshes, priors and observation operators shared by every stage.
class ExperimentSetup {
 public:
  explicit ExperimentSetup(ExperimentConfig cfg) : cfg_(std::move(cfg))
  {
    cfg_.validate();
    const auto& s = cfg_.synthesis_mesh;
    const auto& v = cfg_.inversion_mesh;
    fine_ = build_slab_mesh(s.nx, s.ny, s.nz, cfg_.length, cfg_.thickness, 3);
    fine_bottom_ = extract_bottom_mesh(fine_);
    coarse_ = build_slab_mesh(v.nx, v.ny, v.nz, cfg_.length, cfg_.thickness, 3);
    coarse_bottom_ = extract_bottom_mesh(coarse_);
    for (const auto& p : cfg_.observation_points) points_.push_back({p[0], p[1]});
    beta_prior_ = make_beta_prior(coarse_bottom_);
  }

  ExperimentSetup(const ExperimentSetup&) = delete;
  ExperimentSetup& operator=(const ExperimentSetup&) = delete;

  const ExperimentConfig& config() const { return cfg_; }
  const SlabMesh& synthesis_mesh() const { return fine_; }
  const SlabMesh& synthesis_bottom() const { return fine_bottom_; }
  const SlabMesh& inversion_mesh() const { return coarse_; }
  const SlabMesh& inversion_bottom() const { return coarse_bottom_; }
  int num_observations() const { return static_cast<int>(points_.size()); }

  /// Robin-coefficient prior on the inversion mesh.
  const EllipticPrior& beta_prior() const { return *beta_prior_; }

  /// Priors on the synthesis mesh, built on first use.
  const EllipticPrior& synthesis_beta_prior() const
  {
    if (!fine_beta_prior_) fine_beta_prior_ = make_beta_prior(fine_bottom_);
    return *fine_beta_prior_;
  }
  const EllipticPrior& synthesis_a_prior() const
  {
    if (!fine_a_prior_) {
      fine_a_prior_ = std::make_unique<EllipticPrior>(fine_, cfg_.a_prior.alpha, cfg_.a_prior.gamma_matrix(3),
                                                      cfg_.a_prior.kappa, Vector::Constant(fine_.num_nodes(), cfg_.a_prior.mean),
                                                      BoundaryVariant::Neumann);
    }
    return *fine_a_prior_;
  }

  /// a_* on the inversion mesh.
  Vector a_star() const { return Vector::Constant(coarse_.num_nodes(), cfg_.a_prior.mean); }

  PoissonForwardModel inversion_model(const Vector& a) const
  {
    return PoissonForwardModel(coarse_, coarse_bottom_, a, Vector::Ones(coarse_.num_nodes()),
                               make_observation_operator(coarse_, points_));
  }

  PoissonForwardModel synthesis_model(const Vector& a) const
  {
    return PoissonForwardModel(fine_, fine_bottom_, a, Vector::Ones(fine_.num_nodes()),
                               make_observation_operator(fine_, points_));
  }

  ModelAccess access(const std::string& stage, bool synthesis, const std::string& conductivity) const
  {
    return {stage, synthesis ? "synthesis" : "inversion", hex64((synthesis ? fine_ : coarse_).fingerprint()),
            conductivity};
  }

 private:
  std::unique_ptr<EllipticPrior> make_beta_prior(const SlabMesh& bottom) const
  {
    const auto& p = cfg_.beta_prior;
    return std::make_unique<EllipticPrior>(bottom, p.alpha, p.gamma_matrix(2), p.kappa,
                                           Vector::Constant(bottom.num_nodes(), p.mean), BoundaryVariant::Weighted);
  }

  ExperimentConfig cfg_;
  SlabMesh fine_, fine_bottom_, coarse_, coarse_bottom_;
  std::vector<std::vector<double>> points_;
  std::unique_ptr<EllipticPrior> beta_prior_;
  mutable std::unique_ptr<EllipticPrior> fine_beta_prior_, fine_a_prior_;
};

/// (max - min) * percent / 100.
inline double noise_level(const Vector& noiseless, double percent)
{
  if (noiseless.size() == 0) throw std::invalid_argument("noise_level: empty observation vector");
  return (noiseless.maxCoeff() - noiseless.minCoeff()) * percent / 100.0;
}

struct SynthesisRecord {
  Vector beta_true_fine, a_true_fine;
  Vector noiseless, d_obs;
  double delta_e = 0.0;
  Vector beta_true, a_true;  // on the inversion mesh
  std::vector<ModelAccess> access;
};

/// Truth fields from the truth seed, fine forward solve, observation and noise.
/// With add_noise = false the data are the noiseless observations (delta_e is
/// still set from the configured noise level).
inline SynthesisRecord synthesize_data(const ExperimentSetup& setup, bool add_noise = true)
{
  const ExperimentConfig& cfg = setup.config();
  SynthesisRecord rec;
  rec.beta_true_fine = setup.synthesis_beta_prior().sample(truth_beta_seed(cfg));
  rec.a_true_fine = setup.synthesis_a_prior().sample(truth_a_seed(cfg));
  PoissonForwardModel model = setup.synthesis_model(rec.a_true_fine);
  rec.access.push_back(setup.access("synthesize", true, "a_true"));
  model.forward_solve(rec.beta_true_fine);
  rec.noiseless = model.observed();
  rec.delta_e = noise_level(rec.noiseless, cfg.noise_percent);
  rec.d_obs = rec.noiseless;
  if (add_noise) {
    auto rng = make_rng(noise_seed(cfg));
    rec.d_obs += rec.delta_e * standard_normal(rng, rec.noiseless.size());
  }
  rec.beta_true = interpolate_field(setup.synthesis_bottom(), rec.beta_true_fine, setup.inversion_bottom());
  rec.a_true = interpolate_field(setup.synthesis_mesh(), rec.a_true_fine, setup.inversion_mesh());
  return rec;
}

inline ErrorModel noise_model(const SynthesisRecord& rec)
{
  return ErrorModel::noise_only(rec.delta_e, static_cast<int>(rec.d_obs.size()));
}

/// Offline approximation-error statistics: accurate model on the synthesis
/// mesh with prior conductivity draws, approximate model on the inversion mesh
/// with a = a_*.
inline ErrorStats estimate_error_stats(const ExperimentSetup& setup, std::vector<ModelAccess>* log = nullptr)
{
  const ExperimentConfig& cfg = setup.config();
  const EllipticPrior& pa = setup.synthesis_a_prior();
  const EllipticPrior& pb = setup.synthesis_beta_prior();
  ErrorSampleSetup s;
  s.make_accurate = [&] { return setup.synthesis_model(pa.mean()); };
  s.make_approximate = [&] { return setup.inversion_model(setup.a_star()); };
  s.draw_a = [&](std::uint64_t seed) { return pa.sample(seed); };
  s.draw_beta = [&](std::uint64_t seed) { return pb.sample(seed); };
  const PointLocator locator(setup.synthesis_bottom());
  s.transfer_beta = [&](const Vector& b) {
    const SlabMesh& dst = setup.inversion_bottom();
    Vector out(dst.num_nodes());
    for (int i = 0; i < dst.num_nodes(); ++i) out[i] = locator.evaluate(b, dst.point(i));
    return out;
  };
  const std::uint64_t master = bae_seed(cfg);
  ErrorStats stats = sample_stats(compute_error_samples(s, cfg.bae_samples, master, cfg.threads));
  stats.master_seed = master;
  for (int l = 0; l < cfg.bae_samples; ++l) {
    stats.sample_seeds.push_back(conductivity_seed(master, l));
    stats.sample_seeds.push_back(robin_seed(master, l));
  }
  stats.fingerprints["synthesis_mesh"] = setup.synthesis_mesh().fingerprint();
  stats.fingerprints["inversion_mesh"] = setup.inversion_mesh().fingerprint();
  stats.fingerprints["a_prior"] = pa.fingerprint();
  stats.fingerprints["beta_prior"] = pb.fingerprint();
  if (log) {
    log->push_back(setup.access("error-stats", true, "a_prior_samples"));
    log->push_back(setup.access("error-stats", false, "a_star"));
  }
  return stats;
}

inline ErrorModel error_model_for(ModelKind kind, const SynthesisRecord& rec, const ErrorStats* stats)
{
  if (kind != ModelKind::Bae) return noise_model(rec);
  if (!stats) throw std::invalid_argument("error_model_for: the BAE model needs error statistics");
  const int q = static_cast<int>(rec.d_obs.size());
  return enhanced_model(*stats, rec.delta_e * rec.delta_e * Matrix::Identity(q, q), Vector::Zero(q));
}

inline Vector conductivity_for(ModelKind kind, const ExperimentSetup& setup, const SynthesisRecord& rec)
{
  return kind == ModelKind::Ref ? rec.a_true : setup.a_star();
}

inline const char* conductivity_label(ModelKind kind) { return kind == ModelKind::Ref ? "a_true" : "a_star"; }

struct InversionOutcome {
  ModelKind kind = ModelKind::Ref;
  MapResult result;
  std::string status;  // converged, max_iterations, line_search_failed
  SolveCounter counter;
  std::vector<ModelAccess> access;

  bool converged() const { return status == "converged"; }
};

/// MAP estimate from the prior mean. A line-search failure ends the branch with
/// the last accepted iterate.
inline InversionOutcome run_inversion(const ExperimentSetup& setup, ModelKind kind, const SynthesisRecord& rec,
                                      const ErrorStats* stats = nullptr)
{
  InversionOutcome out;
  out.kind = kind;
  const ErrorModel err = error_model_for(kind, rec, stats);
  PoissonForwardModel model = setup.inversion_model(conductivity_for(kind, setup, rec));
  out.access.push_back(setup.access(std::string("invert:") + to_string(kind), false, conductivity_label(kind)));
  MapProblem problem(model, setup.beta_prior(), err, rec.d_obs);
  try {
    out.result = solve_map(problem, setup.beta_prior().mean(), setup.config().gn);
    out.status = out.result.converged() ? "converged" : "max_iterations";
  } catch (const LineSearchFailure& e) {
    out.result = e.partial();
    out.status = "line_search_failed";
  }
  out.counter = model.counter();
  return out;
}

struct PosteriorOutcome {
  ModelKind kind = ModelKind::Ref;
  std::unique_ptr<LowRankPosterior> posterior;
  Vector variance, prior_variance;
  double coverage = 0.0;
  SolveCounter counter;
  std::vector<ModelAccess> access;
};

/// Fraction of nodes with |truth - map| <= 2 sqrt(var).
inline double coverage_report(const Vector& beta_map, const Vector& pointwise_var, const Vector& beta_true)
{
  require_size(pointwise_var, beta_map.size(), "coverage_report: variance");
  require_size(beta_true, beta_map.size(), "coverage_report: truth");
  if (beta_map.size() == 0) return 0.0;
  int inside = 0;
  for (Eigen::Index i = 0; i < beta_map.size(); ++i)
    if (std::abs(beta_true[i] - beta_map[i]) <= 2.0 * std::sqrt(std::max(pointwise_var[i], 0.0))) ++inside;
  return static_cast<double>(inside) / static_cast<double>(beta_map.size());
}

inline PosteriorOutcome run_posterior(const ExperimentSetup& setup, ModelKind kind, const SynthesisRecord& rec,
                                      const Vector& beta_map, const ErrorStats* stats = nullptr)
{
  PosteriorOutcome out;
  out.kind = kind;
  const ErrorModel err = error_model_for(kind, rec, stats);
  PoissonForwardModel model = setup.inversion_model(conductivity_for(kind, setup, rec));
  out.access.push_back(setup.access(std::string("posterior:") + to_string(kind), false, conductivity_label(kind)));
  const ExperimentConfig& cfg = setup.config();
  out.posterior = std::make_unique<LowRankPosterior>(ppmisfit_eigs(model, setup.beta_prior(), err, beta_map,
                                                                   cfg.probes(), eig_seed(cfg, kind), cfg.eig_threshold));
  out.prior_variance = setup.beta_prior().pointwise_variance();
  out.variance = out.posterior->pointwise_variance(out.prior_variance);
  out.coverage = coverage_report(beta_map, out.variance, rec.beta_true);
  out.counter = model.counter();
  return out;
}

enum class SectionLine { P, Q };

inline const char* to_string(SectionLine l) { return l == SectionLine::P ? "p" : "q"; }

/// End points of the two chords across the bottom surface.
inline std::array<std::array<double, 2>, 2> section_endpoints(SectionLine line, double L = 1.0)
{
  if (line == SectionLine::P) return {{{0.1 * L, 0.1 * L}, {0.9 * L, 0.9 * L}}};
  return {{{0.1 * L, 0.9 * L}, {0.9 * L, 0.1 * L}}};
}

inline std::vector<std::array<double, 2>> section_points(SectionLine line, int n_samples, double L = 1.0)
{
  if (n_samples < 2) throw std::invalid_argument("section_points: need at least two samples");
  const auto e = section_endpoints(line, L);
  std::vector<std::array<double, 2>> pts;
  for (int k = 0; k < n_samples; ++k) {
    const double t = static_cast<double>(k) / (n_samples - 1);
    pts.push_back({e[0][0] + t * (e[1][0] - e[0][0]), e[0][1] + t * (e[1][1] - e[0][1])});
  }
  return pts;
}

/// P1 values of a bottom-surface field along a chord.
inline Vector sample_along_line(const SlabMesh& bottom, const Vector& field, SectionLine line, int n_samples,
                                double L = 1.0)
{
  require_size(field, bottom.num_nodes(), "sample_along_line");
  const PointLocator loc(bottom);
  const auto pts = section_points(line, n_samples, L);
  Vector out(n_samples);
  for (int k = 0; k < n_samples; ++k) out[k] = loc.evaluate(field, pts[k]);
  return out;
}

struct SectionTable {
  std::vector<std::array<double, 2>> points;
  Vector arc, map, truth, stddev;
};

inline SectionTable extract_cross_section(const SlabMesh& bottom, const Vector& beta_map, const Vector& variance,
                                          const Vector& beta_true, SectionLine line, int n_samples, double L = 1.0)
{
  SectionTable t;
  t.points = section_points(line, n_samples, L);
  const auto e = section_endpoints(line, L);
  const double len = std::hypot(e[1][0] - e[0][0], e[1][1] - e[0][1]);
  t.arc = Vector::LinSpaced(n_samples, 0.0, len);
  t.map = sample_along_line(bottom, beta_map, line, n_samples, L);
  t.truth = sample_along_line(bottom, beta_true, line, n_samples, L);
  t.stddev = sample_along_line(bottom, variance, line, n_samples, L).cwiseMax(0.0).cwiseSqrt();
  return t;
}

// ---------------------------------------------------------------------------
// Files

inline std::string format_double(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("missing input " + path.string() + " (run the earlier stage first)");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Header x,y[,z],value; one node per line.
inline std::string field_csv(const SlabMesh& mesh, const Vector& values)
{
  require_size(values, mesh.num_nodes(), "field_csv");
  std::string s = mesh.dim == 3 ? "x,y,z,value\n" : mesh.dim == 2 ? "x,y,value\n" : "x,value\n";
  for (int i = 0; i < mesh.num_nodes(); ++i) {
    for (double c : mesh.point(i)) s += format_double(c) + ",";
    s += format_double(values[i]) + "\n";
  }
  return s;
}

inline std::string spectrum_csv(const Vector& values)
{
  std::string s = "index,eigenvalue\n";
  for (Eigen::Index i = 0; i < values.size(); ++i) s += std::to_string(i + 1) + "," + format_double(values[i]) + "\n";
  return s;
}

inline std::string section_csv(const SectionTable& t)
{
  std::string s = "s,x,y,map,truth,stddev,lower,upper\n";
  for (std::size_t k = 0; k < t.points.size(); ++k) {
    const double m = t.map[k], sd = t.stddev[k];
    s += format_double(t.arc[k]) + "," + format_double(t.points[k][0]) + "," + format_double(t.points[k][1]) + "," +
         format_double(m) + "," + format_double(t.truth[k]) + "," + format_double(sd) + "," +
         format_double(m - 2.0 * sd) + "," + format_double(m + 2.0 * sd) + "\n";
  }
  return s;
}

inline std::string convergence_csv(const ConvergenceRecord& rec)
{
  std::ostringstream s;
  write_convergence_csv(s, rec);
  return s.str();
}

inline std::string mesh_text(const SlabMesh& m)
{
  std::ostringstream s;
  write_mesh(s, m);
  return s.str();
}

inline json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vector_from_json(const json& j)
{
  const auto v = j.get<std::vector<double>>();
  return Vector::Map(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json to_json(const SolveCounter& c)
{
  return {{"forward", c.forward},
          {"adjoint", c.adjoint},
          {"incremental_forward", c.incr_forward},
          {"incremental_adjoint", c.incr_adjoint},
          {"total", c.total()}};
}

inline json to_json(const DominanceReport& r)
{
  json comps = json::array();
  for (std::size_t k = 0; k < r.component.size(); ++k)
    comps.push_back({{"noise", r.noise_component[k]}, {"error", r.error_component[k]}, {"dominant", bool(r.component[k])}});
  return {{"global", r.global},
          {"noise_side", r.noise_side},
          {"error_side", r.error_side},
          {"dominant_components", r.dominant_count()},
          {"components", comps}};
}

/// Stage outputs under one directory. Every path recorded in the manifest is
/// relative to it.
class ExperimentStore {
 public:
  explicit ExperimentStore(std::filesystem::path root) : root_(std::move(root)) {}
  const std::filesystem::path& root() const { return root_; }

  void write(const std::string& rel, const std::string& text) const { write_text(root_ / rel, text); }
  void write_json(const std::string& rel, const json& j) const { write(rel, j.dump(2) + "\n"); }
  json read_json(const std::string& rel) const
  {
    try {
      return json::parse(read_text(root_ / rel));
    } catch (const json::exception& e) {
      throw ConfigError(rel + ": " + e.what());
    }
  }
  bool exists(const std::string& rel) const { return std::filesystem::exists(root_ / rel); }

 private:
  std::filesystem::path root_;
};

inline std::string map_file(ModelKind k) { return std::string("map_") + to_string(k) + ".csv"; }
inline std::string variance_file(ModelKind k) { return std::string("variance_") + to_string(k) + ".csv"; }
inline std::string spectrum_file(ModelKind k) { return std::string("spectrum_") + to_string(k) + ".csv"; }
inline std::string convergence_file(ModelKind k) { return std::string("convergence_") + to_string(k) + ".csv"; }
inline std::string inversion_file(ModelKind k) { return std::string("inversion_") + to_string(k) + ".json"; }
inline std::string posterior_file(ModelKind k) { return std::string("posterior_") + to_string(k) + ".json"; }
inline std::string section_file(ModelKind k, SectionLine l)
{
  return std::string("section_") + to_string(l) + "_" + to_string(k) + ".csv";
}
inline std::string eigenvector_file(ModelKind k, int i)
{
  return std::string("eigenvector_") + to_string(k) + "_" + std::to_string(i) + ".csv";
}

inline json stage_header(const ExperimentSetup& setup)
{
  return {{"config_hash", config_hash(setup.config())}};
}

inline void check_stage_header(const ExperimentSetup& setup, const json& j, const std::string& what)
{
  if (!j.contains("config_hash") || j.at("config_hash") != config_hash(setup.config()))
    throw ConfigError(what + " was produced with a different configuration");
}

inline void save_synthesis(const ExperimentStore& store, const ExperimentSetup& setup, const SynthesisRecord& rec)
{
  json j = stage_header(setup);
  j["delta_e"] = rec.delta_e;
  j["noiseless"] = vector_json(rec.noiseless);
  j["d_obs"] = vector_json(rec.d_obs);
  j["beta_true"] = vector_json(rec.beta_true);
  j["a_true"] = vector_json(rec.a_true);
  j["model_access"] = to_json(rec.access);
  store.write_json("synthesis.json", j);
  store.write("beta_true.csv", field_csv(setup.inversion_bottom(), rec.beta_true));
  store.write("beta_true_synthesis.csv", field_csv(setup.synthesis_bottom(), rec.beta_true_fine));
  std::string obs = "x,y,noiseless,d_obs\n";
  const auto& pts = setup.config().observation_points;
  for (std::size_t k = 0; k < pts.size(); ++k)
    obs += format_double(pts[k][0]) + "," + format_double(pts[k][1]) + "," + format_double(rec.noiseless[k]) + "," +
           format_double(rec.d_obs[k]) + "\n";
  store.write("observations.csv", obs);
  store.write("inversion_mesh.txt", mesh_text(setup.inversion_mesh()));
}

inline SynthesisRecord load_synthesis(const ExperimentStore& store, const ExperimentSetup& setup)
{
  const json j = store.read_json("synthesis.json");
  check_stage_header(setup, j, "synthesis.json");
  SynthesisRecord rec;
  rec.delta_e = j.at("delta_e").get<double>();
  rec.noiseless = vector_from_json(j.at("noiseless"));
  rec.d_obs = vector_from_json(j.at("d_obs"));
  rec.beta_true = vector_from_json(j.at("beta_true"));
  rec.a_true = vector_from_json(j.at("a_true"));
  return rec;
}

inline void save_error_stats(const ExperimentStore& store, const ExperimentSetup& setup, const ErrorStats& stats,
                             const SynthesisRecord& rec, const std::vector<ModelAccess>& access)
{
  json j = stage_header(setup);
  j["stats"] = to_json(stats);
  const int q = static_cast<int>(rec.d_obs.size());
  const Matrix noise = rec.delta_e * rec.delta_e * Matrix::Identity(q, q);
  const DominanceReport dom = dominance_check(stats, Vector::Zero(q), noise);
  j["dominance"] = to_json(dom);
  j["trace_eps_cov"] = stats.eps_cov.trace();
  j["trace_noise_cov"] = noise.trace();
  j["model_access"] = to_json(access);
  store.write_json("error_stats.json", j);
}

inline ErrorStats load_error_stats(const ExperimentStore& store, const ExperimentSetup& setup)
{
  const json j = store.read_json("error_stats.json");
  check_stage_header(setup, j, "error_stats.json");
  return error_stats_from_json(j.at("stats"));
}

inline void save_inversion(const ExperimentStore& store, const ExperimentSetup& setup, const InversionOutcome& inv)
{
  const ModelKind k = inv.kind;
  const ConvergenceRecord& rec = inv.result.record;
  json j = stage_header(setup);
  j["model"] = to_string(k);
  j["status"] = inv.status;
  j["beta_map"] = vector_json(inv.result.beta);
  j["gn_iterations"] = rec.gn_iterations();
  j["total_cg"] = rec.total_cg();
  j["total_backtracks"] = rec.total_backtracks();
  j["poisson_solves"] = rec.total_poisson_solves();
  j["accounted_poisson_solves"] = rec.accounted_poisson_solves();
  j["relative_gradient"] = rec.rows.empty() ? 0.0 : rec.rows.back().grad_norm / rec.rows.front().grad_norm;
  j["counter"] = to_json(inv.counter);
  j["model_access"] = to_json(inv.access);
  store.write_json(inversion_file(k), j);
  store.write(map_file(k), field_csv(setup.inversion_bottom(), inv.result.beta));
  store.write(convergence_file(k), convergence_csv(rec));
}

inline Vector load_map(const ExperimentStore& store, const ExperimentSetup& setup, ModelKind k)
{
  const json j = store.read_json(inversion_file(k));
  check_stage_header(setup, j, inversion_file(k));
  return vector_from_json(j.at("beta_map"));
}

inline void save_posterior(const ExperimentStore& store, const ExperimentSetup& setup, const PosteriorOutcome& post,
                           const SynthesisRecord& rec)
{
  const ModelKind k = post.kind;
  const LowRankPosterior& lr = *post.posterior;
  const ExperimentConfig& cfg = setup.config();
  json j = stage_header(setup);
  j["model"] = to_string(k);
  j["rank"] = lr.rank();
  j["probes"] = cfg.probes();
  j["probe_warning"] = lr.probe_warning();
  j["threshold"] = lr.threshold();
  j["coverage"] = post.coverage;
  j["counter"] = to_json(post.counter);
  j["min_variance"] = post.variance.minCoeff();
  j["max_variance"] = post.variance.maxCoeff();
  j["model_access"] = to_json(post.access);
  json vecs = json::array();
  const int nvec = std::min<int>(cfg.eigenvector_exports, static_cast<int>(lr.spectrum().vectors.cols()));
  for (int i = 0; i < nvec; ++i) {
    store.write(eigenvector_file(k, i + 1), field_csv(setup.inversion_bottom(), lr.spectrum().vectors.col(i)));
    vecs.push_back(eigenvector_file(k, i + 1));
  }
  j["eigenvectors"] = vecs;
  store.write_json(posterior_file(k), j);
  store.write(variance_file(k), field_csv(setup.inversion_bottom(), post.variance));
  store.write(spectrum_file(k), spectrum_csv(lr.spectrum().values));
  for (SectionLine l : {SectionLine::P, SectionLine::Q}) {
    const SectionTable t = extract_cross_section(setup.inversion_bottom(), lr.map(), post.variance, rec.beta_true, l,
                                                 cfg.cross_section_samples, cfg.length);
    store.write(section_file(k, l), section_csv(t));
  }
}

/// Collects every stage's outputs into manifest.json and model_access.log.
/// Fails if a stage is missing.
inline json build_manifest(const ExperimentStore& store, const ExperimentSetup& setup)
{
  const ExperimentConfig& cfg = setup.config();
  json m;
  m["config"] = to_json(cfg);
  m["config_hash"] = config_hash(cfg);
  json seeds = {{"master_seed", cfg.master_seed},
                {"truth_seed", cfg.truth_seed},
                {"truth_beta", truth_beta_seed(cfg)},
                {"truth_a", truth_a_seed(cfg)},
                {"noise", noise_seed(cfg)},
                {"bae", bae_seed(cfg)}};
  for (ModelKind k : all_models) seeds[std::string("eig_") + to_string(k)] = eig_seed(cfg, k);
  m["seeds"] = seeds;

  const json synth = store.read_json("synthesis.json");
  check_stage_header(setup, synth, "synthesis.json");
  const json es = store.read_json("error_stats.json");
  check_stage_header(setup, es, "error_stats.json");

  json meta;
  meta["flux"] = "g = 1 on the top surface";
  meta["observation_layout"] = cfg.observation_points.size() == 33 && cfg.observation_points == default_observation_layout(cfg.length)
                                   ? "4 rows of 8 on [0.1,0.9]^2 plus the centre"
                                   : "custom";
  meta["truth_fields"] = "prior draws under truth_seed on the synthesis mesh";
  meta["error_samples"] = "accurate model on the synthesis mesh, approximate model on the inversion mesh with a = a_*";
  meta["white_noise_lumped"] = setup.synthesis_mesh().num_nodes() > SpdSolver::direct_limit;
  json lines;
  for (SectionLine l : {SectionLine::P, SectionLine::Q}) {
    const auto e = section_endpoints(l, cfg.length);
    lines[to_string(l)] = {{e[0][0], e[0][1]}, {e[1][0], e[1][1]}};
  }
  meta["section_lines"] = lines;
  meta["synthesis_mesh"] = {{"nodes", setup.synthesis_mesh().num_nodes()},
                            {"cells", setup.synthesis_mesh().num_cells()},
                            {"parameter_nodes", setup.synthesis_bottom().num_nodes()},
                            {"fingerprint", hex64(setup.synthesis_mesh().fingerprint())}};
  meta["inversion_mesh"] = {{"nodes", setup.inversion_mesh().num_nodes()},
                            {"cells", setup.inversion_mesh().num_cells()},
                            {"parameter_nodes", setup.inversion_bottom().num_nodes()},
                            {"fingerprint", hex64(setup.inversion_mesh().fingerprint())}};
  m["metadata"] = meta;
  m["delta_e"] = synth.at("delta_e");
  m["dominance"] = es.at("dominance");
  m["trace_eps_cov"] = es.at("trace_eps_cov");
  m["trace_noise_cov"] = es.at("trace_noise_cov");

  json access = json::array();
  auto append = [&](const json& j) {
    for (const auto& a : j.at("model_access")) access.push_back(a);
  };
  append(synth);
  append(es);

  std::vector<std::string> artifacts = {"synthesis.json", "beta_true.csv", "beta_true_synthesis.csv",
                                        "observations.csv", "inversion_mesh.txt", "error_stats.json"};
  json maps, variances, spectra, convergence, sections, solves, status, coverage, posterior;
  for (ModelKind k : all_models) {
    const std::string name = to_string(k);
    const json inv = store.read_json(inversion_file(k));
    check_stage_header(setup, inv, inversion_file(k));
    const json post = store.read_json(posterior_file(k));
    check_stage_header(setup, post, posterior_file(k));
    append(inv);
    append(post);
    maps[name] = map_file(k);
    variances[name] = variance_file(k);
    spectra[name] = spectrum_file(k);
    convergence[name] = convergence_file(k);
    sections[name] = {{"p", section_file(k, SectionLine::P)}, {"q", section_file(k, SectionLine::Q)}};
    status[name] = inv.at("status");
    solves[name] = {{"gn_iterations", inv.at("gn_iterations")},
                    {"total_cg", inv.at("total_cg")},
                    {"total_backtracks", inv.at("total_backtracks")},
                    {"poisson_solves", inv.at("poisson_solves")},
                    {"accounted_poisson_solves", inv.at("accounted_poisson_solves")},
                    {"relative_gradient", inv.at("relative_gradient")},
                    {"posterior_poisson_solves", post.at("counter").at("total")}};
    coverage[name] = post.at("coverage");
    posterior[name] = {{"rank", post.at("rank")},
                       {"probes", post.at("probes")},
                       {"probe_warning", post.at("probe_warning")},
                       {"threshold", post.at("threshold")},
                       {"eigenvectors", post.at("eigenvectors")}};
    for (const std::string& f : {inversion_file(k), map_file(k), convergence_file(k), posterior_file(k),
                                 variance_file(k), spectrum_file(k), section_file(k, SectionLine::P),
                                 section_file(k, SectionLine::Q)})
      artifacts.push_back(f);
    for (const auto& f : post.at("eigenvectors")) artifacts.push_back(f.get<std::string>());
  }
  m["maps"] = maps;
  m["variances"] = variances;
  m["spectra"] = spectra;
  m["convergence"] = convergence;
  m["sections"] = sections;
  m["inversion_status"] = status;
  m["solve_counts"] = solves;
  m["coverage"] = coverage;
  m["posterior"] = posterior;
  m["model_access"] = access;
  artifacts.push_back("model_access.log");
  std::sort(artifacts.begin(), artifacts.end());
  m["artifacts"] = artifacts;
  return m;
}

inline std::string access_log_text(const json& access)
{
  std::string s;
  for (const auto& a : access)
    s += a.at("stage").get<std::string>() + " mesh=" + a.at("mesh").get<std::string>() + ":" +
         a.at("mesh_fingerprint").get<std::string>() + " conductivity=" + a.at("conductivity").get<std::string>() + "\n";
  return s;
}

inline void write_report(const ExperimentStore& store, const ExperimentSetup& setup)
{
  const json m = build_manifest(store, setup);
  store.write("model_access.log", access_log_text(m.at("model_access")));
  store.write_json("manifest.json", m);
}

// ---------------------------------------------------------------------------
// Stages. Each reads its inputs from the store and writes its outputs back.

using StageLog = std::function<void(const std::string&)>;

/// Runs f, prefixing any error message with the stage name.
template <class F>
auto labelled(const std::string& stage, F&& f)
{
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(stage + ": " + e.what());
  } catch (const NumericalFailure& e) {
    throw NumericalFailure(stage + ": " + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(stage + ": " + e.what());
  }
}

inline void stage_synthesize(const ExperimentStore& store, const ExperimentSetup& setup, const StageLog& log = {})
{
  const SynthesisRecord rec = synthesize_data(setup);
  save_synthesis(store, setup, rec);
  if (log) log("synthesize: delta_e = " + format_double(rec.delta_e));
}

inline void stage_error_stats(const ExperimentStore& store, const ExperimentSetup& setup, const StageLog& log = {})
{
  const SynthesisRecord rec = load_synthesis(store, setup);
  std::vector<ModelAccess> access;
  const ErrorStats stats = estimate_error_stats(setup, &access);
  save_error_stats(store, setup, stats, rec, access);
  if (log) {
    const int q = static_cast<int>(rec.d_obs.size());
    const DominanceReport dom =
        dominance_check(stats, Vector::Zero(q), rec.delta_e * rec.delta_e * Matrix::Identity(q, q));
    log("error-stats: r = " + std::to_string(stats.r) +
        ", tr(eps) / tr(noise) = " + format_double(stats.eps_cov.trace() / (q * rec.delta_e * rec.delta_e)) +
        ", dominance = " + (dom.global ? "yes" : "no"));
  }
}

/// Returns false when the inversion stopped short of its tolerance.
inline bool stage_invert(const ExperimentStore& store, const ExperimentSetup& setup, ModelKind kind,
                         const StageLog& log = {})
{
  const SynthesisRecord rec = load_synthesis(store, setup);
  std::optional<ErrorStats> stats;
  if (kind == ModelKind::Bae) stats = load_error_stats(store, setup);
  const InversionOutcome inv = run_inversion(setup, kind, rec, stats ? &*stats : nullptr);
  save_inversion(store, setup, inv);
  if (log)
    log(std::string("invert ") + to_string(kind) + ": " + inv.status + " after " +
        std::to_string(inv.result.record.gn_iterations()) + " GN iterations, " +
        std::to_string(inv.result.record.total_poisson_solves()) + " Poisson solves");
  return inv.converged();
}

inline void stage_posterior(const ExperimentStore& store, const ExperimentSetup& setup, ModelKind kind,
                            const StageLog& log = {})
{
  const SynthesisRecord rec = load_synthesis(store, setup);
  std::optional<ErrorStats> stats;
  if (kind == ModelKind::Bae) stats = load_error_stats(store, setup);
  const Vector map = load_map(store, setup, kind);
  const PosteriorOutcome post = run_posterior(setup, kind, rec, map, stats ? &*stats : nullptr);
  save_posterior(store, setup, post, rec);
  if (log) {
    if (post.posterior->probe_warning()) log("warning: fewer probes than observations");
    log(std::string("posterior ") + to_string(kind) + ": rank " + std::to_string(post.posterior->rank()) +
        ", coverage " + format_double(post.coverage));
  }
}

inline void stage_report(const ExperimentStore& store, const ExperimentSetup& setup, const StageLog& log = {})
{
  write_report(store, setup);
  if (log) log("report: " + (store.root() / "manifest.json").string());
}

/// Every stage in order. Returns false if REF or BAE did not converge; a
/// stalled CEM branch (possible under model misspecification) is only reported.
inline bool run_all(const ExperimentStore& store, const ExperimentSetup& setup, const StageLog& log = {})
{
  labelled("synthesize", [&] { stage_synthesize(store, setup, log); });
  labelled("error-stats", [&] { stage_error_stats(store, setup, log); });
  bool ok = true;
  for (ModelKind k : all_models)
    if (!labelled(std::string("invert ") + to_string(k), [&] { return stage_invert(store, setup, k, log); }) &&
        k != ModelKind::Cem)
      ok = false;
  for (ModelKind k : all_models)
    labelled(std::string("posterior ") + to_string(k), [&] { stage_posterior(store, setup, k, log); });
  labelled("report", [&] { stage_report(store, setup, log); });
  return ok;
}

}  // namespace robinbae
