// Command-line driver for the Robin-coefficient experiment.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "robinbae/experiment.hpp"

using namespace robinbae;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool paper_scale = false;
  std::optional<int> bae_samples;
  std::optional<int> threads;
  std::string case_name;
};

ExperimentConfig resolve_config(const GlobalOptions& g)
{
  nlohmann::json j = nlohmann::json::object();
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw ConfigError("cannot open config file " + g.config_path);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + g.config_path + ": " + e.what());
    }
  }
  if (!g.case_name.empty()) j["case"] = g.case_name;
  if (g.seed) j["master_seed"] = *g.seed;
  if (g.bae_samples) j["bae_samples"] = *g.bae_samples;
  if (g.threads) j["threads"] = *g.threads;
  if (!g.out.empty()) j["output_dir"] = g.out;
  ExperimentConfig cfg = config_from_json(j, g.paper_scale);
  if (cfg.bae_samples < 200)
    std::fprintf(stderr, "warning: %d approximation-error samples; statistics below 200 samples are rough\n",
                 cfg.bae_samples);
  return cfg;
}

void say(const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); }

int run(int argc, char** argv)
{
  CLI::App app{"Robin coefficient estimation with premarginalized conductivity"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON experiment configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--out", g.out, "output directory");
  app.add_flag("--paper-scale", g.paper_scale, "use the full-size meshes");
  app.add_option("--bae-samples", g.bae_samples, "number of approximation-error samples");
  app.add_option("--threads", g.threads, "worker threads for error sampling");
  app.add_option("--case", g.case_name, "isotropic or anisotropic")->check(CLI::IsMember({"isotropic", "anisotropic"}));

  std::string model_name;
  auto* synth = app.add_subcommand("synthesize", "draw truth fields and synthesize data");
  auto* errs = app.add_subcommand("error-stats", "estimate approximation-error statistics");
  auto* invert = app.add_subcommand("invert", "compute a MAP estimate");
  invert->add_option("--model", model_name, "ref, cem or bae")->required()->check(CLI::IsMember({"ref", "cem", "bae"}));
  auto* post = app.add_subcommand("posterior", "low-rank Laplace posterior at a MAP estimate");
  post->add_option("--model", model_name, "ref, cem or bae")->required()->check(CLI::IsMember({"ref", "cem", "bae"}));
  auto* report = app.add_subcommand("report", "collect outputs into manifest.json");
  auto* all = app.add_subcommand("run-all", "every stage in order");
  for (auto* sub : {synth, errs, invert, post, report, all}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const ExperimentConfig cfg = resolve_config(g);
    const ExperimentSetup setup(cfg);
    const ExperimentStore store(cfg.output_dir);
    if (*synth) labelled("synthesize", [&] { stage_synthesize(store, setup, say); });
    if (*errs) labelled("error-stats", [&] { stage_error_stats(store, setup, say); });
    if (*invert &&
        !labelled("invert " + model_name, [&] { return stage_invert(store, setup, parse_model_kind(model_name), say); }))
      return 4;
    if (*post) labelled("posterior " + model_name, [&] { stage_posterior(store, setup, parse_model_kind(model_name), say); });
    if (*report) labelled("report", [&] { stage_report(store, setup, say); });
    if (*all && !run_all(store, setup, say)) return 4;
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const NumericalFailure& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const NonConvergence& e) {
    std::fprintf(stderr, "not converged: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
