#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "neas/errors.hpp"
#include "neas/evalbench.hpp"
#include "neas/evolve.hpp"

using namespace neas;

namespace {

const StemSpec kStem{1, 4, 1, 8, 3};

CostModel cost_model(const SearchSpaceState& space) {
  return analytic_cost_model(kStem, space.layers(), 4);
}

EvolutionConfig small_config(std::uint64_t seed) {
  EvolutionConfig cfg;
  cfg.population = 20;
  cfg.generations = 20;
  cfg.top_k = 5;
  cfg.crossover_count = 8;
  cfg.mutation_count = 8;
  cfg.seed = seed;
  return cfg;
}

double median_cost(const SearchSpaceState& space, const CostModel& cm) {
  std::vector<double> costs;
  for (const auto& a : enumerate_space(space)) costs.push_back(ensemble_cost(a, cm));
  std::sort(costs.begin(), costs.end());
  return costs[costs.size() / 2];
}

}  // namespace

TEST_CASE("unbounded constraint accepts the first distinct draws") {
  auto space = fixture::space(4, 3, 2, 1, 4);
  const auto cm = cost_model(space);
  auto cfg = small_config(3);
  const auto pop = seed_population(space, cm, cfg);
  CHECK(pop.size() == 20);
  CHECK(std::set<EnsembleArchitecture>(pop.begin(), pop.end()).size() == 20);
  for (const auto& a : pop) CHECK(space.contains(a));
  CHECK(seed_population(space, cm, cfg) == pop);
}

TEST_CASE("constraint below the cheapest architecture is infeasible") {
  auto space = fixture::space(3, 3, 2, 1, 3);
  const auto cm = cost_model(space);
  double cheapest = INFINITY;
  for (const auto& a : enumerate_space(space)) cheapest = std::min(cheapest, ensemble_cost(a, cm));
  auto cfg = small_config(1);
  cfg.constraint = cheapest;  // strict bound
  cfg.retry_budget = 500;
  CHECK_THROWS_AS(seed_population(space, cm, cfg), InfeasibleError);
  CHECK_THROWS_AS(run_evolution(space, cm, cfg, [](int, const EnsembleArchitecture&) { return 0.0; }),
                  InfeasibleError);
}

TEST_CASE("every logged candidate respects the median-cost constraint") {
  auto space = fixture::space(4, 4, 2, 1, 4);
  space.remove(3, Combination::canonical({0, 1}));
  space.remove(4, Combination::canonical({2, 3}));
  const auto cm = cost_model(space);
  const double c = median_cost(space, cm);
  const auto fam = fixture::family(space, kStem, 4);
  SurrogateOracle surrogate(space, 9);
  auto cfg = small_config(4);
  cfg.constraint = c;
  int logged = 0;
  const auto r = run_evolution(
      space, cm, cfg, [&](int, const EnsembleArchitecture& a) { return surrogate(a); }, 1,
      [&](const Candidate& cand) {
        ++logged;
        const auto v = oracle::revalidate(serialize_architecture(cand.arch), fam, c);
        CHECK_MESSAGE(v.ok, v.reason);
        CHECK(v.cost == doctest::Approx(cand.cost));
      });
  CHECK(logged == static_cast<int>(r.history.size()));
  CHECK(logged == 20 * 21);
}

TEST_CASE("crossover of identical parents reproduces the parent") {
  auto space = fixture::space(4, 3, 2, 1, 4);
  const auto cm = cost_model(space);
  Rng rng(1);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto a = sample_uniform(space, seed);
    const auto child = crossover(a, a, space, cm, INFINITY, rng);
    REQUIRE(child.has_value());
    CHECK(*child == a);
  }
}

TEST_CASE("crossover children stay inside the space and under the bound") {
  auto space = fixture::space(5, 4, 2, 1, 5);
  space.remove(2, Combination::canonical({0, 3}));
  space.remove(5, Combination::canonical({1, 2}));
  const auto cm = cost_model(space);
  const double c = median_cost(space, cm);
  const auto fam = fixture::family(space, kStem, 4);
  Rng rng(2);
  int made = 0;
  for (int t = 0; made < 1000 && t < 20000; ++t) {
    const auto a = sample_uniform(space, rng);
    const auto b = sample_uniform(space, rng);
    const auto child = crossover(a, b, space, cm, c, rng);
    if (!child) continue;
    ++made;
    const auto v = oracle::revalidate(serialize_architecture(*child), fam, c);
    CHECK_MESSAGE(v.ok, v.reason);
    CHECK((child->split_point == a.split_point || child->split_point == b.split_point));
  }
  CHECK(made == 1000);
}

TEST_CASE("mutation rates") {
  auto space = fixture::space(4, 3, 2, 1, 4);
  const auto cm = cost_model(space);
  EvolutionConfig cfg;
  cfg.p_split = 0;
  cfg.p_layer = 0;
  Rng rng(3);
  const auto parent = sample_uniform(space, 7);
  for (int i = 0; i < 20; ++i) CHECK(*mutate(parent, space, cm, cfg, rng) == parent);

  // at s_max an increase is impossible, so p_split alone never changes s upward
  EnsembleArchitecture top;
  top.k = 2;
  top.split_point = 4;
  top.shared_ops = {0, 1, 2, 0};
  cfg.p_split = 1;
  for (int i = 0; i < 200; ++i) {
    const auto child = mutate(top, space, cm, cfg, rng);
    REQUIRE(child.has_value());
    CHECK(child->split_point <= 4);
    CHECK(child->split_point >= 3);
    CHECK(space.contains(*child));
  }

  // increasing s shares one of the K operators, each with probability 1/K
  EnsembleArchitecture low;
  low.k = 2;
  low.split_point = 1;
  low.shared_ops = {0};
  low.split_combos = {Combination::canonical({1, 2}), Combination::canonical({0, 1}),
                      Combination::canonical({0, 2})};
  int increases = 0, took_first = 0;
  for (int i = 0; i < 4000; ++i) {
    const auto child = mutate(low, space, cm, cfg, rng);
    if (child->split_point != 2) continue;
    ++increases;
    took_first += child->shared_ops[1] == 1;
  }
  CHECK(std::abs(increases / 4000.0 - 0.5) <= 0.05);
  CHECK(std::abs(took_first / double(increases) - 0.5) <= 0.05);

  // per-layer resampling at p_layer = 1 still yields members of the space
  cfg.p_split = 0;
  cfg.p_layer = 1;
  for (int i = 0; i < 200; ++i) CHECK(space.contains(*mutate(low, space, cm, cfg, rng)));
}

TEST_CASE("zero generations return the best seed") {
  auto space = fixture::space(4, 3, 2, 1, 4);
  const auto cm = cost_model(space);
  SurrogateOracle f(space, 5);
  auto cfg = small_config(6);
  cfg.generations = 0;
  const auto r = run_evolution(space, cm, cfg, [&](int, const EnsembleArchitecture& a) { return f(a); });
  double best = -1;
  for (const auto& a : seed_population(space, cm, cfg)) best = std::max(best, f(a));
  CHECK(r.best.fitness == best);
  CHECK(r.history.size() == 20);
  CHECK(r.generations_run == 0);
}

TEST_CASE("best fitness never decreases and populations stay full") {
  auto space = fixture::space(6, 4, 2, 1, 6);
  const auto cm = cost_model(space);
  SurrogateOracle f(space, 8);
  auto cfg = small_config(9);
  std::map<int, int> per_gen;
  const auto r = run_evolution(space, cm, cfg, [&](int, const EnsembleArchitecture& a) { return f(a); },
                               1, [&](const Candidate& c) { per_gen[c.generation]++; });
  CHECK(r.generations_run == 20);
  REQUIRE(r.best_per_generation.size() == 21);
  for (std::size_t g = 1; g < r.best_per_generation.size(); ++g) {
    CHECK(r.best_per_generation[g] >= r.best_per_generation[g - 1]);
  }
  for (int g = 0; g <= 20; ++g) CHECK(per_gen[g] == 20);
  CHECK(r.best.fitness == *std::max_element(r.evaluations.begin(), r.evaluations.end()));
  // cached fitness: every evaluation is a distinct architecture
  std::set<EnsembleArchitecture> distinct;
  for (const auto& c : r.history) distinct.insert(c.arch);
  CHECK(distinct.size() == r.evaluations.size());
}

TEST_CASE("evolution is deterministic for a seed and thread count independent") {
  auto space = fixture::space(5, 4, 2, 1, 5);
  const auto cm = cost_model(space);
  SurrogateOracle f(space, 10);
  auto fit = [&](int, const EnsembleArchitecture& a) { return f(a); };
  const auto a = run_evolution(space, cm, small_config(11), fit, 1);
  const auto b = run_evolution(space, cm, small_config(11), fit, 3);
  const auto c = run_evolution(space, cm, small_config(12), fit, 1);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(candidate_json(a.history[i]) == candidate_json(b.history[i]));
  }
  CHECK(result_manifest_json(a) == result_manifest_json(b));
  CHECK(a.evaluations != c.evaluations);
}

TEST_CASE("random-search configuration reproduces only from refill") {
  auto space = fixture::space(5, 4, 2, 1, 5);
  const auto cm = cost_model(space);
  SurrogateOracle f(space, 13);
  const auto cfg = random_search_config(small_config(14));
  CHECK(cfg.crossover_count == 0);
  CHECK(cfg.mutation_count == 0);
  const auto r = run_evolution(space, cm, cfg, [&](int, const EnsembleArchitecture& a) { return f(a); });
  for (const auto& c : r.history) {
    CHECK((c.origin == Origin::seed || c.origin == Origin::refill));
  }
}

TEST_CASE("evaluation budget caps fitness calls") {
  auto space = fixture::space(5, 4, 2, 1, 5);
  const auto cm = cost_model(space);
  SurrogateOracle f(space, 15);
  auto cfg = small_config(16);
  cfg.generations = 1000;
  cfg.max_evaluations = 137;
  int calls = 0;
  const auto r = run_evolution(space, cm, cfg, [&](int, const EnsembleArchitecture& a) {
    ++calls;
    return f(a);
  });
  CHECK(calls == 137);
  CHECK(r.evaluations.size() == 137);
}

TEST_CASE("evolution finds the enumerated optimum") {
  auto space = fixture::space(4, 3, 2, 2, 3);
  const auto cm = cost_model(space);
  int found = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SurrogateOracle f(space, 100 + seed);
    double best = -1;
    for (const auto& a : enumerate_space(space)) best = std::max(best, f(a));
    auto cfg = small_config(seed);
    const auto r = run_evolution(space, cm, cfg, [&](int, const EnsembleArchitecture& a) { return f(a); });
    found += r.best.fitness == best;
  }
  CHECK(found >= 8);
}

TEST_CASE("candidate records") {
  Candidate c;
  c.arch.k = 1;
  c.arch.split_point = 2;
  c.arch.shared_ops = {0, 1};
  c.cost = 12.5;
  c.fitness = 0.75;
  c.origin = Origin::mutation;
  c.generation = 3;
  CHECK(candidate_json(c) ==
        R"({"generation":3,"origin":"mutation","architecture":{"version":1,"k":1,"split_point":2,"shared_ops":[0,1],"split_combos":[]},"cost":12.5,"fitness":0.75})");
  EvolutionConfig bad;
  bad.top_k = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = EvolutionConfig{};
  bad.crossover_count = 40;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
