#pragma once

// Run configuration and the two-phase orchestration behind the CLI.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "neas/archspace.hpp"
#include "neas/diversity.hpp"
#include "neas/evalbench.hpp"
#include "neas/evolve.hpp"
#include "neas/supernet.hpp"

namespace neas {

inline constexpr const char* kVersion = "0.1.0";

struct SpaceConfig {
  int depth = 0;
  int k = 0;
  int s_min = 1;
  int s_max = 0;  // 0: depth
  std::vector<int> channels;
  std::vector<int> strides;  // empty: all 1
  StemSpec stem{1, 8, 1, 16, 3};
  std::vector<OperatorSpec> operators;
  Activation activation = Activation::relu;
};

struct RankStudyConfig {
  int archs = 16;
  RetrainConfig retrain;
};

struct CompareConfig {
  int budget = 500;
  std::string fitness = "surrogate";  // or "supernet"
  double diversity_weight = 0.5;
  double cost_weight = 0.0;
};

struct PipelineConfig {
  SpaceConfig space;
  TrainConfig train;
  DiversityConfig diversity;
  EvolutionConfig evolution;
  DataParams data;
  RankStudyConfig rank_study;
  CompareConfig compare;
  std::string output_dir = "neas_run";
  std::uint64_t seed = 0;
  bool dump_kernels = false;
  int eval_batch_size = 256;

  NetworkPlan plan() const;
  SearchSpaceState initial_space() const;
  CostModel cost_model() const;
};

/// Parses and validates a JSON config. Unknown keys, missing required keys
/// and K disagreements between sections throw ConfigError naming the key.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::string& path);
/// Canonical JSON with every default made explicit.
std::string dump_config(const PipelineConfig& cfg);
std::uint64_t config_digest(const PipelineConfig& cfg);

/// Check of the architecture family implied by the space section.
void validate_config(const PipelineConfig& cfg);

struct Phase1Result {
  Supernet<double> net;
  SearchSpaceState space;
  std::vector<ShrinkReport> rounds;
  int epochs_trained = 0;
  bool interrupted = false;
};

struct Phase1Options {
  std::string checkpoint_dir;   // empty: no checkpoints
  std::string shrink_log;       // empty: no log
  std::string kernel_dir;       // empty: no kernel dumps
  bool resume = false;
  int stop_after_epoch = -1;    // >= 0: return after checkpointing that epoch
  int threads = 1;
};

/// Supernet training with diversity-guided shrinking.
Phase1Result run_phase1(const PipelineConfig& cfg, const ToyDataset& data,
                        const Phase1Options& opt, ShrinkMetric metric);

struct SearchOutcome {
  bool interrupted = false;
  std::optional<Candidate> best;
  std::string final_record;
};

/// `search`: Phase 1 then Phase 2, writing every artifact under
/// cfg.output_dir.
SearchOutcome cmd_search(const PipelineConfig& cfg, int threads, bool resume,
                         int stop_after_epoch);

struct CompareCurves {
  std::vector<double> evolution;  // running top-50 mean, evaluations 50..budget
  std::vector<double> random;
};

/// Running mean of the 50 best values after each of evaluations 50..n.
std::vector<double> running_top_mean(const std::vector<double>& evals,
                                     std::size_t top = 50);

CompareCurves compare_search(const SearchSpaceState& space, const CostModel& cm,
                             const EvolutionConfig& evo, const FitnessFn& fitness,
                             int budget, int threads);

void cmd_compare_search(const PipelineConfig& cfg, int threads);

struct RankComparison {
  RankReport shrunk;
  RankReport unshrunk;
};

/// Trains a diversity-shrunk and an unshrunk supernet from the same seed,
/// samples architectures from the shrunk space and ranks them with both.
RankComparison run_rank_comparison(const PipelineConfig& cfg, const ToyDataset& data,
                                   int threads);
void cmd_rank_study(const PipelineConfig& cfg, int threads);

/// Summarizes a run directory; corrupt JSONL lines are reported with their
/// line number and skipped. Returns the text summary.
std::string cmd_report(const std::string& run_dir);

}  // namespace neas
