#include "neas/evolve.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>
#include <set>

#include "neas/errors.hpp"
#include "neas/parallel.hpp"

namespace neas {

std::string to_string(Origin o) {
  switch (o) {
    case Origin::seed: return "seed";
    case Origin::crossover: return "crossover";
    case Origin::mutation: return "mutation";
    case Origin::refill: return "refill";
  }
  return "seed";
}

void EvolutionConfig::validate() const {
  if (population < 1) throw ConfigError("evolution.population must be >= 1");
  if (generations < 0) throw ConfigError("evolution.generations must be >= 0");
  if (top_k < 1 || top_k > population) {
    throw ConfigError("evolution.top_k must lie in [1, population]");
  }
  if (crossover_count < 0 || mutation_count < 0 ||
      crossover_count + mutation_count > population) {
    throw ConfigError(
        "evolution.crossover_count + evolution.mutation_count must not exceed "
        "evolution.population");
  }
  if (!(p_split >= 0 && p_split <= 1)) throw ConfigError("evolution.p_split outside [0, 1]");
  if (!(p_layer >= 0 && p_layer <= 1)) throw ConfigError("evolution.p_layer outside [0, 1]");
  if (retry_budget < 1) throw ConfigError("evolution.retry_budget must be >= 1");
  if (max_evaluations < 0) throw ConfigError("evolution.max_evaluations must be >= 0");
}

bool feasible(const EnsembleArchitecture& arch, const SearchSpaceState& space,
              const CostModel& cm, double constraint) {
  return space.contains(arch) && ensemble_cost(arch, cm) < constraint;
}

std::vector<EnsembleArchitecture> seed_population(const SearchSpaceState& space,
                                                  const CostModel& cm,
                                                  const EvolutionConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "seed_population"));
  std::vector<EnsembleArchitecture> out;
  std::set<EnsembleArchitecture> seen;
  int rejected = 0;
  while (static_cast<int>(out.size()) < cfg.population) {
    EnsembleArchitecture a = sample_uniform(space, rng);
    if (ensemble_cost(a, cm) < cfg.constraint && seen.insert(a).second) {
      out.push_back(std::move(a));
    } else if (++rejected >= cfg.retry_budget) {
      throw InfeasibleError("found only " + std::to_string(out.size()) + " of " +
                            std::to_string(cfg.population) +
                            " distinct architectures under constraint " +
                            std::to_string(cfg.constraint) + " after " +
                            std::to_string(rejected) + " rejected draws");
    }
  }
  return out;
}

namespace {

int shared_gene(const SearchSpaceState& space, int m, Rng& rng) {
  const auto& c = space.shared_candidates(m);
  return c[rng.index(c.size())];
}

Combination combo_gene(const SearchSpaceState& space, int m, Rng& rng) {
  const auto& c = space.survivors(m);
  return c[rng.index(c.size())];
}

}  // namespace

std::optional<EnsembleArchitecture> crossover(const EnsembleArchitecture& a,
                                              const EnsembleArchitecture& b,
                                              const SearchSpaceState& space,
                                              const CostModel& cm,
                                              double constraint, Rng& rng) {
  EnsembleArchitecture child;
  child.k = a.k;
  child.split_point = rng.bernoulli(0.5) ? a.split_point : b.split_point;
  for (int m = 1; m <= space.depth(); ++m) {
    const bool first = rng.bernoulli(0.5);
    const EnsembleArchitecture& u = first ? a : b;
    const EnsembleArchitecture& v = first ? b : a;
    if (m <= child.split_point) {
      if (m <= u.split_point) {
        child.shared_ops.push_back(u.shared_ops[static_cast<std::size_t>(m - 1)]);
      } else if (m <= v.split_point) {
        child.shared_ops.push_back(v.shared_ops[static_cast<std::size_t>(m - 1)]);
      } else {
        child.shared_ops.push_back(shared_gene(space, m, rng));
      }
    } else {
      if (m > u.split_point) {
        child.split_combos.push_back(
            u.split_combos[static_cast<std::size_t>(m - u.split_point - 1)]);
      } else if (m > v.split_point) {
        child.split_combos.push_back(
            v.split_combos[static_cast<std::size_t>(m - v.split_point - 1)]);
      } else {
        child.split_combos.push_back(combo_gene(space, m, rng));
      }
    }
  }
  if (!feasible(child, space, cm, constraint)) return std::nullopt;
  return child;
}

std::optional<EnsembleArchitecture> mutate(const EnsembleArchitecture& parent,
                                           const SearchSpaceState& space,
                                           const CostModel& cm,
                                           const EvolutionConfig& cfg, Rng& rng) {
  EnsembleArchitecture child = parent;
  if (rng.bernoulli(cfg.p_split)) {
    const bool increase = rng.bernoulli(0.5);
    const int s = child.split_point;
    if (increase && s < space.s_max()) {
      // The first split layer becomes shared with one path's operator.
      const Combination& c = child.split_combos.front();
      child.shared_ops.push_back(c[static_cast<int>(rng.index(static_cast<std::size_t>(c.size())))]);
      child.split_combos.erase(child.split_combos.begin());
      child.split_point = s + 1;
    } else if (!increase && s > space.s_min()) {
      // The last shared layer splits; prefer combinations keeping its op.
      const int former = child.shared_ops.back();
      std::vector<Combination> keep;
      for (const auto& c : space.survivors(s)) {
        if (c.contains(former)) keep.push_back(c);
      }
      const Combination pick = keep.empty() ? combo_gene(space, s, rng)
                                            : keep[rng.index(keep.size())];
      child.shared_ops.pop_back();
      child.split_combos.insert(child.split_combos.begin(), pick);
      child.split_point = s - 1;
    }
  }
  for (int m = 1; m <= space.depth(); ++m) {
    if (!rng.bernoulli(cfg.p_layer)) continue;
    if (m <= child.split_point) {
      child.shared_ops[static_cast<std::size_t>(m - 1)] = shared_gene(space, m, rng);
    } else {
      child.split_combos[static_cast<std::size_t>(m - child.split_point - 1)] =
          combo_gene(space, m, rng);
    }
  }
  if (!feasible(child, space, cm, cfg.constraint)) return std::nullopt;
  return child;
}

bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.fitness != b.fitness) return a.fitness > b.fitness;
  if (a.cost != b.cost) return a.cost < b.cost;
  return a.arch < b.arch;
}

EvolutionConfig random_search_config(EvolutionConfig cfg) {
  cfg.p_split = 0.0;
  cfg.p_layer = 0.0;
  cfg.crossover_count = 0;
  cfg.mutation_count = 0;
  return cfg;
}

EvolutionResult run_evolution(const SearchSpaceState& space, const CostModel& cm,
                              const EvolutionConfig& cfg, const FitnessFn& fitness,
                              int threads,
                              const std::function<void(const Candidate&)>& on_candidate) {
  cfg.validate();
  EvolutionResult result;
  std::map<EnsembleArchitecture, double> cache;
  std::vector<Candidate> top;
  bool have_best = false;
  bool budget_hit = false;

  std::vector<Candidate> population;
  for (auto& a : seed_population(space, cm, cfg)) {
    Candidate c;
    c.cost = ensemble_cost(a, cm);
    c.arch = std::move(a);
    c.origin = Origin::seed;
    population.push_back(std::move(c));
  }

  auto evaluate = [&](std::vector<Candidate>& pop, int generation) {
    std::vector<EnsembleArchitecture> todo;
    std::set<EnsembleArchitecture> queued;
    for (const auto& c : pop) {
      if (!cache.count(c.arch) && queued.insert(c.arch).second) todo.push_back(c.arch);
    }
    if (cfg.max_evaluations > 0) {
      const long left = cfg.max_evaluations - static_cast<long>(result.evaluations.size());
      if (static_cast<long>(todo.size()) >= left) {
        budget_hit = true;
        todo.resize(static_cast<std::size_t>(std::max(0L, left)));
      }
    }
    std::vector<double> values(todo.size());
    parallel_for(todo.size(), threads, [&](int worker, std::size_t i) {
      values[i] = fitness(worker, todo[i]);
    });
    for (std::size_t i = 0; i < todo.size(); ++i) {
      cache.emplace(todo[i], values[i]);
      result.evaluations.push_back(values[i]);
    }
    std::vector<Candidate> done;
    for (auto& c : pop) {
      auto it = cache.find(c.arch);
      if (it == cache.end()) continue;  // past the evaluation budget
      c.fitness = it->second;
      c.generation = generation;
      if (on_candidate) on_candidate(c);
      result.history.push_back(c);
      if (!have_best || ranks_before(c, result.best)) {
        result.best = c;
        result.best_generation = generation;
        have_best = true;
      }
      done.push_back(c);
    }
    pop = std::move(done);
  };

  auto select_top = [&](const std::vector<Candidate>& pop) {
    std::vector<Candidate> pool = top;
    for (const auto& c : pop) pool.push_back(c);
    std::sort(pool.begin(), pool.end(), ranks_before);
    std::vector<Candidate> next;
    std::set<EnsembleArchitecture> seen;
    for (auto& c : pool) {
      if (static_cast<int>(next.size()) >= cfg.top_k) break;
      if (seen.insert(c.arch).second) next.push_back(std::move(c));
    }
    top = std::move(next);
  };

  evaluate(population, 0);
  select_top(population);
  result.best_per_generation.push_back(result.best.fitness);

  int stalled = 0;
  for (int gen = 1; gen <= cfg.generations && !budget_hit; ++gen) {
    // Under an evaluation budget, stop once the space yields nothing new.
    if (cfg.max_evaluations > 0 && stalled >= 100) break;
    const std::size_t evaluated_before = result.evaluations.size();
    std::vector<Candidate> next;
    std::set<EnsembleArchitecture> members;
    auto admit = [&](EnsembleArchitecture a, Origin origin) {
      if (!members.insert(a).second) return false;
      Candidate c;
      c.cost = ensemble_cost(a, cm);
      c.arch = std::move(a);
      c.origin = origin;
      next.push_back(std::move(c));
      return true;
    };
    const auto budget_for = [&](int count) { return 10 * std::max(count, 1); };

    int made = 0;
    for (int attempt = 0; made < cfg.crossover_count && attempt < budget_for(cfg.crossover_count);
         ++attempt) {
      Rng rng(derive_seed(cfg.seed, "crossover", static_cast<std::uint64_t>(gen),
                          static_cast<std::uint64_t>(attempt)));
      const auto& pa = top[rng.index(top.size())];
      const auto& pb = top[rng.index(top.size())];
      auto child = crossover(pa.arch, pb.arch, space, cm, cfg.constraint, rng);
      if (child && admit(std::move(*child), Origin::crossover)) ++made;
    }
    made = 0;
    for (int attempt = 0; made < cfg.mutation_count && attempt < budget_for(cfg.mutation_count);
         ++attempt) {
      Rng rng(derive_seed(cfg.seed, "mutation", static_cast<std::uint64_t>(gen),
                          static_cast<std::uint64_t>(attempt)));
      const auto& parent = top[rng.index(top.size())];
      auto child = mutate(parent.arch, space, cm, cfg, rng);
      if (child && admit(std::move(*child), Origin::mutation)) ++made;
    }
    Rng refill(derive_seed(cfg.seed, "refill", static_cast<std::uint64_t>(gen)));
    int rejected = 0;
    while (static_cast<int>(next.size()) < cfg.population) {
      EnsembleArchitecture a = sample_uniform(space, refill);
      if (ensemble_cost(a, cm) < cfg.constraint && admit(std::move(a), Origin::refill)) {
        continue;
      }
      if (++rejected >= cfg.retry_budget) {
        throw InfeasibleError("refill of generation " + std::to_string(gen) +
                              " found only " + std::to_string(next.size()) +
                              " distinct feasible architectures");
      }
    }
    evaluate(next, gen);
    stalled = result.evaluations.size() == evaluated_before ? stalled + 1 : 0;
    select_top(next);
    result.best_per_generation.push_back(result.best.fitness);
    result.generations_run = gen;
  }
  return result;
}

std::string candidate_json(const Candidate& c) {
  nlohmann::ordered_json j;
  j["generation"] = c.generation;
  j["origin"] = to_string(c.origin);
  j["architecture"] = nlohmann::ordered_json::parse(serialize_architecture(c.arch));
  j["cost"] = c.cost;
  j["fitness"] = c.fitness;
  return j.dump();
}

std::string result_manifest_json(const EvolutionResult& r) {
  nlohmann::ordered_json j;
  j["architecture"] = nlohmann::ordered_json::parse(serialize_architecture(r.best.arch));
  j["best_fitness"] = r.best.fitness;
  j["cost"] = r.best.cost;
  j["generation_found"] = r.best_generation;
  j["generations_run"] = r.generations_run;
  j["evaluations"] = r.evaluations.size();
  return j.dump();
}

}  // namespace neas
