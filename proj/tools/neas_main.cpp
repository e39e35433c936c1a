#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "neas/errors.hpp"
#include "neas/parallel.hpp"
#include "neas/pipeline.hpp"

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 0;
};

// Overrides are applied to the document before parsing so that every
// seed-derived default (data seed, evolution stream) follows --seed.
neas::PipelineConfig load(const Globals& g) {
  if (g.config.empty()) throw neas::ConfigError("--config is required");
  std::ifstream is(g.config);
  if (!is) throw neas::ConfigError("cannot read config file " + g.config);
  std::stringstream ss;
  ss << is.rdbuf();
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw neas::ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw neas::ConfigError("config must be a JSON object");
  if (g.seed) j["seed"] = *g.seed;
  if (!g.out.empty()) j["output_dir"] = g.out;
  return neas::parse_config(j.dump());
}

int thread_count(const Globals& g) {
  if (g.threads > 0) return g.threads;
  if (const char* env = std::getenv("NEAS_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
    throw neas::ConfigError(std::string("NEAS_THREADS must be a positive integer, got '") +
                            env + "'");
  }
  return neas::resolve_threads(0);
}

int run_grad_check(const Globals& g, double eps, std::size_t per_tensor) {
  using namespace neas;
  PipelineConfig cfg;
  if (!g.config.empty()) {
    cfg = load(g);
  } else {
    cfg = parse_config(R"({"space": {"depth": 4, "k": 2, "channels": [4, 4, 4, 4],
                           "stem": {"channels": 4},
                           "operators": [{"id": 0, "kind": "conv", "kernel_size": 3, "expansion": 1},
                                         {"id": 1, "kind": "conv", "kernel_size": 3, "expansion": 2},
                                         {"id": 2, "kind": "conv", "kernel_size": 5, "expansion": 1}]},
                           "data": {"classes": 4, "image_size": 8, "train_per_class": 1,
                                    "val_per_class": 1, "quality_size": 4, "probe_size": 4}})");
    if (g.seed) cfg.seed = *g.seed;
  }
  const ToyDataset data = generate_dataset(cfg.data);
  Supernet<double> net(cfg.plan(), derive_seed(cfg.seed, "init"));
  jitter_bn_affine(net, derive_seed(cfg.seed, "jitter"));
  const auto arch = sample_uniform(cfg.initial_space(), derive_seed(cfg.seed, "grad_arch"));
  const auto batch = slice(data.train, 0, std::min<std::size_t>(4, data.train.size()));
  const auto r = grad_check(net, arch, batch, eps, per_tensor, derive_seed(cfg.seed, "grad"));
  std::cout << "architecture " << serialize_architecture(arch) << "\n"
            << "checked " << r.checked << " coordinates, max relative error "
            << r.max_relative_error << "\n";
  return r.max_relative_error < 1e-4 ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diversity-guided ensemble architecture search"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory (overrides the config)");
  app.add_option("--threads", g.threads, "Worker threads (default: NEAS_THREADS, else 1)")
      ->check(CLI::NonNegativeNumber);
  app.set_version_flag("--version", neas::kVersion);

  auto* search = app.add_subcommand("search", "Train and shrink the supernet, then evolve");
  bool resume = false;
  int stop_after = -1;
  search->add_flag("--resume", resume, "Continue from the latest checkpoint");
  search->add_option("--stop-after-epoch", stop_after,
                     "Checkpoint this epoch (0-based) and stop");

  auto* compare = app.add_subcommand("compare-search", "Evolution versus random search curves");
  int budget = 0;
  compare->add_option("--budget", budget, "Evaluation budget (overrides the config)");

  auto* rank = app.add_subcommand("rank-study", "Rank correlation with and without shrinking");

  auto* report = app.add_subcommand("report", "Summarize a run directory");
  std::string run_dir;
  report->add_option("run_dir", run_dir, "Run directory (default: --out)");

  auto* prop = app.add_subcommand("verify-property", "Check score monotonicity on random trials");
  int trials = 1000, k = 2, n = 6;
  prop->add_option("--trials", trials)->check(CLI::PositiveNumber);
  prop->add_option("--k", k)->check(CLI::Range(2, 16));
  prop->add_option("--n", n)->check(CLI::PositiveNumber);

  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient check");
  double eps = 1e-5;
  std::size_t per_tensor = 8;
  grad->add_option("--epsilon", eps);
  grad->add_option("--per-tensor", per_tensor, "Coordinates sampled per tensor (0: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*search) {
      const auto cfg = load(g);
      const auto out = neas::cmd_search(cfg, thread_count(g), resume, stop_after);
      if (out.interrupted) {
        std::cout << "interrupted after epoch " << stop_after << "; checkpoint in "
                  << cfg.output_dir << "/checkpoint\n";
      } else {
        std::cout << out.final_record << "\n";
      }
    } else if (*compare) {
      auto cfg = load(g);
      if (budget > 0) cfg.compare.budget = budget;
      neas::cmd_compare_search(cfg, thread_count(g));
      std::cout << "wrote " << cfg.output_dir << "/compare_search.csv\n";
    } else if (*rank) {
      const auto cfg = load(g);
      neas::cmd_rank_study(cfg, thread_count(g));
      std::cout << "wrote " << cfg.output_dir << "/rank_summary.json\n";
    } else if (*report) {
      std::string dir = run_dir.empty() ? g.out : run_dir;
      if (dir.empty() && !g.config.empty()) dir = load(g).output_dir;
      if (dir.empty()) throw neas::ConfigError("report needs a run directory");
      std::cout << neas::cmd_report(dir);
    } else if (*prop) {
      if (n <= k) throw neas::ConfigError("--n must exceed --k");
      const auto r = neas::verify_property(trials, k, n, g.seed.value_or(0));
      std::cout << r.passes << "/" << r.trials << " trials satisfied the property\n";
      if (r.first_failure) {
        std::cout << "first failure:\n" << neas::describe_trial(*r.first_failure) << "\n";
        return 3;
      }
    } else if (*grad) {
      return run_grad_check(g, eps, per_tensor);
    }
  } catch (const neas::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
