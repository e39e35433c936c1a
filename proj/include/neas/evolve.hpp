#pragma once

// K-path evolution search with layer sharing: seeding by rejection
// sampling, top-k selection, per-layer uniform crossover, split-point and
// layer mutation, random refill.

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "neas/archspace.hpp"

namespace neas {

enum class Origin { seed, crossover, mutation, refill };
std::string to_string(Origin o);

struct EvolutionConfig {
  int population = 50;
  int generations = 20;
  int top_k = 10;
  double p_split = 0.1;
  double p_layer = 0.1;
  int crossover_count = 25;
  int mutation_count = 25;
  double constraint = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  int retry_budget = 10000;     // rejection-sampling attempts
  long max_evaluations = 0;     // 0: no budget

  void validate() const;  // throws ConfigError
};

struct Candidate {
  EnsembleArchitecture arch;
  double cost = 0.0;
  double fitness = std::numeric_limits<double>::quiet_NaN();
  Origin origin = Origin::seed;
  int generation = 0;
};

bool feasible(const EnsembleArchitecture& arch, const SearchSpaceState& space,
              const CostModel& cm, double constraint);

/// P distinct feasible architectures. Throws InfeasibleError after
/// `retry_budget` rejected draws.
std::vector<EnsembleArchitecture> seed_population(const SearchSpaceState& space,
                                                  const CostModel& cm,
                                                  const EvolutionConfig& cfg);

std::optional<EnsembleArchitecture> crossover(const EnsembleArchitecture& a,
                                              const EnsembleArchitecture& b,
                                              const SearchSpaceState& space,
                                              const CostModel& cm,
                                              double constraint, Rng& rng);

std::optional<EnsembleArchitecture> mutate(const EnsembleArchitecture& parent,
                                           const SearchSpaceState& space,
                                           const CostModel& cm,
                                           const EvolutionConfig& cfg, Rng& rng);

/// Fitness of one architecture; `worker` indexes per-thread state.
using FitnessFn = std::function<double(int worker, const EnsembleArchitecture&)>;

struct EvolutionResult {
  Candidate best;
  int best_generation = 0;
  std::vector<Candidate> history;        // every population member, in order
  std::vector<double> evaluations;       // fitness of each distinct evaluation
  std::vector<double> best_per_generation;
  int generations_run = 0;
};

/// Runs cfg.generations reproduction steps after evaluating the seed
/// population. Fitness is cached per architecture. `on_candidate` sees every
/// population member once its fitness is known.
EvolutionResult run_evolution(const SearchSpaceState& space, const CostModel& cm,
                              const EvolutionConfig& cfg, const FitnessFn& fitness,
                              int threads = 1,
                              const std::function<void(const Candidate&)>& on_candidate = {});

/// Evolution reduced to refill-only random search.
EvolutionConfig random_search_config(EvolutionConfig cfg);

/// Ranking used for top-k: higher fitness, then lower cost, then record.
bool ranks_before(const Candidate& a, const Candidate& b);

std::string candidate_json(const Candidate& c);
std::string result_manifest_json(const EvolutionResult& r);

}  // namespace neas
