// Runs every acceptance criterion and prints one PASS/FAIL line for each.
// Exit status is the number of failed criteria.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "neas/diversity.hpp"
#include "neas/evalbench.hpp"
#include "neas/evolve.hpp"
#include "neas/linalg.hpp"
#include "neas/parallel.hpp"
#include "neas/pipeline.hpp"
#include "neas/supernet.hpp"
#include "oracles.hpp"

using namespace neas;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

std::string g_cli;
int g_threads = 1;

const char* kSmoke = R"({
  "seed": 7,
  "space": {"depth": 4, "k": 2, "channels": [8, 8, 8, 8], "stem": {"channels": 8},
            "operators": [{"id": 0, "kind": "conv", "kernel_size": 3, "expansion": 1},
                          {"id": 1, "kind": "conv", "kernel_size": 3, "expansion": 2},
                          {"id": 2, "kind": "conv", "kernel_size": 5, "expansion": 1}]},
  "train": {"epochs": 2, "batch_size": 32, "learning_rate": 0.1},
  "diversity": {"samples": 4, "k_drop": 4, "epochs_between": 1},
  "evolution": {"population": 8, "generations": 3, "top_k": 4,
                "crossover_count": 4, "mutation_count": 4},
  "data": {"classes": 4, "image_size": 8, "train_per_class": 32, "val_per_class": 16,
           "quality_size": 64, "probe_size": 64}
})";

const char* kRank = R"({
  "space": {"depth": 4, "k": 2, "channels": [8, 8, 8, 8], "stem": {"channels": 8},
            "operators": [{"id": 0, "kind": "conv", "kernel_size": 3, "expansion": 1},
                          {"id": 1, "kind": "conv", "kernel_size": 3, "expansion": 2},
                          {"id": 2, "kind": "conv", "kernel_size": 5, "expansion": 1}]},
  "train": {"epochs": 12, "batch_size": 32, "learning_rate": 0.1},
  "diversity": {"samples": 8, "k_drop": 2, "epochs_between": 3},
  "rank_study": {"archs": 16, "train": {"epochs": 6, "batch_size": 32, "learning_rate": 0.1}},
  "data": {"classes": 4, "image_size": 8, "train_per_class": 64, "val_per_class": 64,
           "quality_size": 128, "probe_size": 128, "noise": 1.0}
})";

PipelineConfig config_with(const char* text, std::uint64_t seed, const fs::path& out) {
  auto j = nlohmann::json::parse(text);
  j["seed"] = seed;
  j["output_dir"] = out.string();
  return parse_config(j.dump());
}

fs::path work_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("neas_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Eigen::MatrixXd random_matrix(int n, Rng& rng) {
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) a(i, j) = rng.uniform(-2, 2);
  }
  return a;
}

// ---------------------------------------------------------------------------

Outcome determinant() {
  Rng rng(1);
  int bad = 0;
  double worst = 0;
  for (int t = 0; t < 10000; ++t) {
    const int n = 1 + t % 5;
    const auto a = random_matrix(n, rng);
    const double ref = oracle::cofactor_det(a);
    const double err = std::abs(lu_determinant(a) - ref) / std::max(1.0, std::abs(ref));
    worst = std::max(worst, err);
    bad += err > 1e-9;
  }
  return {bad == 0, "10000 matrices, worst scaled error " + fmt(worst)};
}

Outcome kernel_identities() {
  Rng rng(2);
  int entry_bad = 0, fact_bad = 0;
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 3 + t % 5;
    Eigen::VectorXd r(n);
    for (int i = 0; i < n; ++i) r[i] = rng.uniform(0.05, 1.5);
    const Eigen::MatrixXd x = random_matrix(n, rng);
    Eigen::MatrixXd s = x * x.transpose();
    const Eigen::VectorXd d = s.diagonal().cwiseSqrt().cwiseInverse();
    s = (d.asDiagonal() * s * d.asDiagonal()).eval();
    const auto l = dpp_kernel(r, s);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) entry_bad += l(i, j) != r[i] * s(i, j) * r[j];
    }
    // random subset y of size 2..n
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(2 + t % (n - 1)));
    Eigen::MatrixXd sy(idx.size(), idx.size());
    double prod = 1;
    for (std::size_t a = 0; a < idx.size(); ++a) {
      prod *= r[idx[a]] * r[idx[a]];
      for (std::size_t b = 0; b < idx.size(); ++b) sy(a, b) = s(idx[a], idx[b]);
    }
    const double lhs = lu_determinant(principal_submatrix(l, idx));
    const double rhs = prod * oracle::cofactor_det(sy);
    const double err = std::abs(lhs - rhs);
    worst = std::max(worst, err);
    fact_bad += err > 1e-9;
  }
  return {entry_bad == 0 && fact_bad == 0,
          "entrywise mismatches " + std::to_string(entry_bad) + ", factorization worst error " +
              fmt(worst)};
}

Outcome monotonicity() {
  std::string detail;
  bool ok = true;
  for (int k : {2, 3}) {
    const auto r = verify_property(1000, k, 6, 1000 + k);
    // recheck each trial's hypotheses and scores independently
    Rng rng(1000 + k);
    int independent = 0;
    for (int t = 0; t < 1000; ++t) {
      const auto trial = draw_property_trial(k, 6, rng);
      bool hyp = trial.r[trial.h[0]] > trial.r[trial.h_prime[0]];
      for (int o = 1; o < k; ++o) {
        hyp = hyp && trial.S(trial.h[0], trial.h[o]) < trial.S(trial.h_prime[0], trial.h[o]);
      }
      auto det_on = [&](const std::vector<int>& h) {
        Eigen::MatrixXd sub(k, k);
        for (int a = 0; a < k; ++a) {
          for (int b = 0; b < k; ++b) sub(a, b) = trial.r[h[a]] * trial.S(h[a], h[b]) * trial.r[h[b]];
        }
        return oracle::cofactor_det(sub);
      };
      independent += hyp && det_on(trial.h) > det_on(trial.h_prime) - 1e-12;
    }
    ok = ok && r.passes == 1000 && r.trials == 1000 && independent == 1000;
    detail += "K=" + std::to_string(k) + " " + std::to_string(r.passes) + "/1000 (oracle " +
              std::to_string(independent) + "/1000) ";
  }
  return {ok, detail};
}

Outcome shrinking() {
  // layers 2..5 hold C(5,2) = 10 combos each
  auto space = fixture::space(5, 5, 2, 1, 1);
  DiversityConfig cfg;
  cfg.k_drop = 7;
  cfg.threshold = 20;
  cfg.epochs_between = 2;
  DiversityKernel kernel;
  for (int m = 2; m <= 5; ++m) {
    LayerKernel lk;
    lk.layer = m;
    for (const auto& op : space.layer(m).candidates) lk.op_ids.push_back(op.op_id);
    lk.r.resize(5);
    // layer 2 scores far below the rest so its floor binds
    for (int i = 0; i < 5; ++i) lk.r[i] = (m == 2 ? 0.01 : 0.1) * (i + 1) + 0.013 * m;
    lk.S = Eigen::MatrixXd::Identity(5, 5);
    lk.S(0, 1) = lk.S(1, 0) = 0.3;
    lk.L = dpp_kernel(lk.r, lk.S);
    kernel.layers.push_back(lk);
  }
  std::vector<oracle::HandEntry> alive;
  for (int m = 2; m <= 5; ++m) {
    const auto& lk = kernel.layer(m);
    for (const auto& c : space.survivors(m)) {
      const int i = lk.index_of(c[0]), j = lk.index_of(c[1]);
      Eigen::Matrix2d sub;
      sub << lk.L(i, i), lk.L(i, j), lk.L(j, i), lk.L(j, j);
      alive.push_back({m, c.ops(), oracle::cofactor_det(sub)});
    }
  }
  std::vector<std::vector<oracle::HandEntry>> expected;
  while (alive.size() > cfg.threshold) expected.push_back(oracle::hand_shrink_round(alive, 7));

  bool ok = true;
  std::size_t prev = space.total_survivors();
  ScheduleHooks hooks;
  hooks.estimate = [&](int, int) { return kernel; };
  hooks.on_round = [&](const ShrinkReport& r) {
    std::size_t droppable = 0;
    for (int m = 2; m <= 5; ++m) droppable += space.survivors(m).size() - 1 + 0;
    // droppable was measured after removal; add back what went
    droppable += r.dropped.size();
    const std::size_t want = std::min<std::size_t>(7, droppable);
    ok = ok && prev - r.survivor_total == want;
    prev = r.survivor_total;
    for (int m = 2; m <= 5; ++m) ok = ok && !space.survivors(m).empty();
  };
  const auto result = run_shrinking_schedule(space, cfg, 20, hooks);
  ok = ok && result.rounds.size() == expected.size() && result.epochs_trained == 20;
  for (std::size_t r = 0; ok && r < expected.size(); ++r) {
    ok = result.rounds[r].dropped.size() == expected[r].size();
    for (std::size_t i = 0; ok && i < expected[r].size(); ++i) {
      ok = result.rounds[r].dropped[i].layer == expected[r][i].layer &&
           result.rounds[r].dropped[i].combo.ops() == expected[r][i].combo;
    }
  }
  ok = ok && space.total_survivors() == alive.size() && space.total_survivors() <= cfg.threshold;
  ok = ok && space.survivors(2).size() == 1;
  return {ok, std::to_string(result.rounds.size()) + " rounds, survivors 40 -> " +
                  std::to_string(space.total_survivors()) + ", layer-2 floor " +
                  std::to_string(space.survivors(2).size())};
}

Outcome space_size_bound() {
  auto space = fixture::space(20, 7, 2, 1, 12);
  const auto size = space_size(space, SizeCounting::with_repetition);
  using boost::multiprecision::cpp_int;
  cpp_int expected = 12;
  for (int i = 0; i < 2 * 20; ++i) expected *= 7;
  const cpp_int bound = cpp_int(7) * boost::multiprecision::pow(cpp_int(10), 33);
  return {size.exact == expected && size.exact >= bound,
          "|A| = " + size.exact.str().substr(0, 6) + "... (" + std::to_string(size.exact.str().size()) +
              " digits, log10 " + fmt(size.log10) + ")"};
}

Outcome gradient_check() {
  Supernet<double> net(fixture::plan(4, 3), 29);
  jitter_bn_affine(net, 30);
  Rng rng(31);
  Samples<double> batch{Tensor<double>(4, 1, 8, 8), {}};
  for (Eigen::Index i = 0; i < batch.images.storage().size(); ++i) batch.images.storage()[i] = rng.normal();
  for (int i = 0; i < 4; ++i) batch.labels.push_back(i);
  EnsembleArchitecture arch;
  arch.k = 2;
  arch.split_point = 2;
  arch.shared_ops = {0, 1};
  arch.split_combos = {Combination::canonical({0, 2}), Combination::canonical({1, 2})};
  const auto r = grad_check(net, arch, batch, 1e-5, 0, 32);
  return {r.max_relative_error < 1e-4,
          std::to_string(r.checked) + " coordinates, max relative error " + fmt(r.max_relative_error)};
}

Outcome ensemble_semantics() {
  Supernet<double> net(fixture::plan(4, 4), 41);
  Rng rng(42);
  Tensor<double> x(16, 1, 8, 8);
  for (Eigen::Index i = 0; i < x.storage().size(); ++i) x.storage()[i] = rng.normal();
  double row_err = 0, collapse = 0;
  int pred_mismatch = 0;
  auto preds = [](const Tensor<double>& p) {
    std::vector<int> v;
    for (int n = 0; n < p.n(); ++n) v.push_back(argmax_row(&p.storage()[n * p.c()], p.c()) );
    return v;
  };
  for (int k = 1; k <= 3; ++k) {
    auto space = fixture::space(4, 4, k, 1, 4);
    for (std::uint64_t s = 0; s < 10; ++s) {
      const auto arch = sample_uniform(space, s);
      const auto out = forward_ensemble(net, arch, x, Mode::eval);
      for (int n = 0; n < x.n(); ++n) {
        double sum = 0;
        for (int c = 0; c < out.ensemble.c(); ++c) sum += out.ensemble(n, c);
        row_err = std::max(row_err, std::abs(sum - 1));
      }
      for (int path = 1; path <= k; ++path) {
        const auto homo = mirror_homogeneous(arch, path);
        const auto single = forward_ensemble(net, fixture::single_path(homo, 0), x, Mode::eval);
        const auto mirrored = forward_ensemble(net, homo, x, Mode::eval);
        collapse = std::max(collapse, (mirrored.ensemble.storage() - single.ensemble.storage())
                                          .cwiseAbs()
                                          .maxCoeff());
        pred_mismatch += preds(mirrored.ensemble) != preds(single.ensemble);
      }
    }
  }
  return {row_err <= 1e-6 && pred_mismatch == 0 && collapse <= 1e-15,
          "row-sum error " + fmt(row_err) + ", collapse deviation " + fmt(collapse) +
              ", prediction mismatches " + std::to_string(pred_mismatch)};
}

EvolutionConfig search_config(std::uint64_t seed) {
  EvolutionConfig cfg;
  cfg.population = 20;
  cfg.generations = 20;
  cfg.top_k = 5;
  cfg.crossover_count = 8;
  cfg.mutation_count = 8;
  cfg.seed = seed;
  return cfg;
}

Outcome evolution_optimum() {
  auto space = fixture::space(4, 3, 2, 2, 3);
  const auto cm = analytic_cost_model({1, 4, 1, 8, 3}, space.layers(), 4);
  const auto all = enumerate_space(space);
  int found = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SurrogateOracle f(space, derive_seed(seed, "landscape"));
    double best = -1;
    for (const auto& a : all) best = std::max(best, f(a));
    const auto r = run_evolution(space, cm, search_config(seed),
                                 [&](int, const EnsembleArchitecture& a) { return f(a); });
    found += r.best.fitness == best;
  }
  return {found >= 8, "optimum of " + std::to_string(all.size()) + " architectures found in " +
                          std::to_string(found) + "/10 seeds"};
}

Outcome evolution_vs_random() {
  auto space = fixture::space(8, 4, 2, 1, 8);
  const auto cm = analytic_cost_model({1, 4, 1, 8, 3}, space.layers(), 4);
  int wins = 0;
  double gap = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SurrogateOracle f(space, derive_seed(seed, "landscape"));
    EvolutionConfig evo;
    evo.seed = seed;
    const auto c = compare_search(space, cm, evo,
                                  [&](int, const EnsembleArchitecture& a) { return f(a); }, 500, 1);
    wins += c.evolution.back() >= c.random.back();
    gap += (c.evolution.back() - c.random.back()) / 10;
  }
  return {wins >= 9, "evolution >= random in " + std::to_string(wins) +
                         "/10 seeds, mean final top-50 gap " + fmt(gap)};
}

Outcome constraint_soundness() {
  const auto dir = work_dir("constraint");
  auto cfg = config_with(kSmoke, 11, dir / "run");
  const auto initial = cfg.initial_space();
  const auto cm = cfg.cost_model();
  std::vector<double> costs;
  for (const auto& a : enumerate_space(initial)) costs.push_back(ensemble_cost(a, cm));
  std::sort(costs.begin(), costs.end());
  const double c = costs[costs.size() / 2];
  cfg.evolution.constraint = c;
  cmd_search(cfg, g_threads, false, -1);

  auto fam = fixture::family(initial, cfg.space.stem, cfg.data.classes);
  std::ifstream shrink(dir / "run" / "shrink_log.jsonl");
  for (std::string line; std::getline(shrink, line);) {
    for (const auto& d : nlohmann::json::parse(line).at("dropped")) {
      auto combo = d.at("combo").get<std::vector<int>>();
      std::sort(combo.begin(), combo.end());
      fam.survivors[d.at("layer").get<std::size_t>() - 1].erase(combo);
    }
  }
  int total = 0, ok = 0;
  std::string first;
  std::ifstream evo(dir / "run" / "evolution_log.jsonl");
  for (std::string line; std::getline(evo, line);) {
    ++total;
    const auto v = oracle::revalidate(nlohmann::json::parse(line).at("architecture").dump(), fam, c);
    ok += v.ok;
    if (!v.ok && first.empty()) first = v.reason;
  }
  fs::remove_all(dir);
  return {total > 0 && ok == total, std::to_string(ok) + "/" + std::to_string(total) +
                                        " logged candidates valid under C = " + fmt(c) +
                                        (first.empty() ? "" : " (" + first + ")")};
}

Outcome rank_direction() {
  double shrunk = 0, plain = 0;
  std::string per;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto cfg = config_with(kRank, seed, work_dir("rank"));
    const auto data = generate_dataset(cfg.data);
    const auto r = run_rank_comparison(cfg, data, g_threads);
    shrunk += r.shrunk.tau / 3;
    plain += r.unshrunk.tau / 3;
    per += " " + fmt(r.shrunk.tau) + "/" + fmt(r.unshrunk.tau);
  }
  fs::remove_all(fs::temp_directory_path() / "neas_acceptance_rank");
  return {shrunk >= plain - 0.05,
          "mean tau shrunk " + fmt(shrunk) + " vs unshrunk " + fmt(plain) + " (per seed" + per + ")"};
}

Outcome determinism() {
  const auto dir = work_dir("determinism");
  {
    std::ofstream os(dir / "smoke.json");
    os << kSmoke;
  }
  auto run = [&](const std::string& out) {
    const std::string cmd = g_cli + " --config " + (dir / "smoke.json").string() + " --out " +
                            (dir / out).string() + " search > " + (dir / (out + ".log")).string() +
                            " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  };
  const int a = run("a"), b = run("b");
  const bool same_record = slurp(dir / "a" / "final_architecture.json") ==
                           slurp(dir / "b" / "final_architecture.json");
  const bool same_log = slurp(dir / "a" / "shrink_log.jsonl") == slurp(dir / "b" / "shrink_log.jsonl");
  const bool nonempty = !slurp(dir / "a" / "final_architecture.json").empty() &&
                        !slurp(dir / "a" / "shrink_log.jsonl").empty();
  fs::remove_all(dir);
  return {a == 0 && b == 0 && same_record && same_log && nonempty,
          "exit codes " + std::to_string(a) + "/" + std::to_string(b) + ", record " +
              (same_record ? "identical" : "DIFFERS") + ", shrink log " +
              (same_log ? "identical" : "DIFFERS")};
}

Outcome bn_recalibration() {
  const auto cfg = config_with(kSmoke, 5, work_dir("bn"));
  const auto data = generate_dataset(cfg.data);
  Phase1Options opt;
  opt.threads = g_threads;
  auto p1 = run_phase1(cfg, data, opt, ShrinkMetric::diversity);
  double worst = 0;
  std::size_t blocks = 0;
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto arch = sample_uniform(p1.space, derive_seed(s, "bn_arch"));
    evaluate(p1.net, arch, data.val, &data.probe.images, 16);
    const auto expected = fixture::probe_moments(p1.net, arch, data.probe.images);
    blocks += expected.size();
    worst = std::max(worst, fixture::bn_stat_deviation(p1.net, expected));
  }
  fs::remove_all(fs::temp_directory_path() / "neas_acceptance_bn");
  return {worst <= 1e-6, std::to_string(blocks) + " BN layers over 8 architectures, max deviation " +
                             fmt(worst)};
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* p = std::getenv("NEAS_CLI")) {
    g_cli = p;
  } else {
    g_cli = (fs::absolute(argv[0]).parent_path().parent_path() / "neas").string();
  }
  g_threads = resolve_threads(0);
  (void)argc;

  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double limit_s;  // 0: no runtime bound
  };
  const std::vector<Criterion> criteria = {
      {"determinant", determinant, 10},
      {"kernel-identities", kernel_identities, 0},
      {"monotonicity", monotonicity, 30},
      {"shrinking", shrinking, 0},
      {"space-size", space_size_bound, 0},
      {"gradient-check", gradient_check, 60},
      {"ensemble-semantics", ensemble_semantics, 0},
      {"evolution-optimum", evolution_optimum, 120},
      {"evolution-vs-random", evolution_vs_random, 0},
      {"constraint-soundness", constraint_soundness, 0},
      {"rank-direction", rank_direction, 3600},
      {"determinism", determinism, 0},
      {"bn-recalibration", bn_recalibration, 0},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& c = criteria[i];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0 && secs >= c.limit_s) {
      o.pass = false;
      o.detail += "; over the " + fmt(c.limit_s) + " s limit";
    }
    failed += !o.pass;
    std::printf("%s %2zu %-21s %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", i + 1, c.name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed;
}
