#include "neas/diversity.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "neas/errors.hpp"
#include "neas/parallel.hpp"

namespace neas {

std::string to_string(ShrinkMetric m) {
  switch (m) {
    case ShrinkMetric::diversity: return "diversity";
    case ShrinkMetric::accuracy: return "accuracy";
    case ShrinkMetric::none: return "none";
  }
  return "diversity";
}

ShrinkMetric shrink_metric_from_string(const std::string& s) {
  if (s == "diversity") return ShrinkMetric::diversity;
  if (s == "accuracy") return ShrinkMetric::accuracy;
  if (s == "none") return ShrinkMetric::none;
  throw ConfigError("diversity.metric: unknown metric '" + s + "'");
}

std::size_t DiversityConfig::threshold_for(const SearchSpaceState& space) const {
  if (threshold > 0) return threshold;
  std::size_t layers = 0;
  for (int m = 1; m <= space.depth(); ++m) layers += space.has_combos(m);
  return layers;
}

void DiversityConfig::validate(const SearchSpaceState& space) const {
  if (!(beta > 0)) throw ConfigError("diversity.beta must be > 0");
  if (!(gamma > 0)) throw ConfigError("diversity.gamma must be > 0");
  if (samples < 1) throw ConfigError("diversity.samples must be >= 1");
  if (k_drop < 1) throw ConfigError("diversity.k_drop must be >= 1");
  if (epochs_between < 1) throw ConfigError("diversity.epochs_between must be >= 1");
  std::size_t layers = 0;
  for (int m = 1; m <= space.depth(); ++m) layers += space.has_combos(m);
  if (threshold_for(space) < layers) {
    throw ConfigError("diversity.threshold " + std::to_string(threshold) +
                      " is below the number of combination layers (" +
                      std::to_string(layers) + ")");
  }
}

int LayerKernel::index_of(int op_id) const {
  for (std::size_t i = 0; i < op_ids.size(); ++i) {
    if (op_ids[i] == op_id) return static_cast<int>(i);
  }
  throw InvariantError("layer " + std::to_string(layer) + " kernel has no op " +
                       std::to_string(op_id));
}

const LayerKernel& DiversityKernel::layer(int m) const {
  for (const auto& l : layers) {
    if (l.layer == m) return l;
  }
  throw InvariantError("no kernel for layer " + std::to_string(m));
}

bool DiversityKernel::has_layer(int m) const {
  return std::any_of(layers.begin(), layers.end(),
                     [m](const LayerKernel& l) { return l.layer == m; });
}

Eigen::MatrixXd dpp_kernel(const Eigen::VectorXd& r, const Eigen::MatrixXd& S) {
  return r.asDiagonal() * S * r.asDiagonal();
}

double path_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                       double beta) {
  return std::exp(-beta * (a - b).norm());
}

std::vector<int> unobserved_layers(const SearchSpaceState& space,
                                   const std::vector<EnsembleObservation>& obs) {
  std::vector<int> missing;
  for (int m = 1; m <= space.depth(); ++m) {
    if (!space.has_combos(m)) continue;
    bool seen = false;
    for (const auto& e : obs) {
      for (std::size_t p = 0; p < e.paths.size() && !seen; ++p) {
        for (std::size_t q = 0; q < e.paths.size() && !seen; ++q) {
          seen = p != q && e.paths[p].ops[static_cast<std::size_t>(m - 1)] !=
                               e.paths[q].ops[static_cast<std::size_t>(m - 1)];
        }
      }
      if (seen) break;
    }
    if (!seen) missing.push_back(m);
  }
  return missing;
}

DiversityKernel assemble_kernel(const SearchSpaceState& space,
                                const std::vector<EnsembleObservation>& obs,
                                const DiversityConfig& cfg) {
  DiversityKernel kernel;
  for (int m = 1; m <= space.depth(); ++m) {
    if (!space.has_combos(m)) continue;
    LayerKernel lk;
    lk.layer = m;
    for (const auto& op : space.layer(m).candidates) lk.op_ids.push_back(op.op_id);
    const auto n = static_cast<Eigen::Index>(lk.op_ids.size());
    Eigen::MatrixXd s_sum = Eigen::MatrixXd::Zero(n, n);
    lk.pair_counts = Eigen::MatrixXi::Zero(n, n);
    Eigen::VectorXd r_sum = Eigen::VectorXd::Zero(n);
    lk.quality_counts.assign(static_cast<std::size_t>(n), 0);
    const auto at = static_cast<std::size_t>(m - 1);
    for (const auto& e : obs) {
      for (std::size_t p = 0; p < e.paths.size(); ++p) {
        const int i = lk.index_of(e.paths[p].ops[at]);
        r_sum[i] += e.paths[p].accuracy;
        ++lk.quality_counts[static_cast<std::size_t>(i)];
        for (std::size_t q = 0; q < e.paths.size(); ++q) {
          if (p == q) continue;
          const int j = lk.index_of(e.paths[q].ops[at]);
          if (i == j) continue;  // shared layer: both paths run the same op
          s_sum(i, j) += path_similarity(e.paths[p].feature, e.paths[q].feature,
                                         cfg.beta);
          ++lk.pair_counts(i, j);
        }
      }
    }
    double s_total = 0;
    int s_observed = 0;
    lk.S = Eigen::MatrixXd::Identity(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j || lk.pair_counts(i, j) == 0) continue;
        lk.S(i, j) = s_sum(i, j) / lk.pair_counts(i, j);
        s_total += lk.S(i, j);
        ++s_observed;
      }
    }
    if (s_observed == 0) {
      throw EstimationError("no path pair observed operators of layer " +
                            std::to_string(m) +
                            "; sample more ensembles or widen the split range");
    }
    const double s_fill = s_total / s_observed;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i != j && lk.pair_counts(i, j) == 0) lk.S(i, j) = s_fill;
      }
    }
    lk.S = (0.5 * (lk.S + lk.S.transpose())).eval();
    lk.S.diagonal().setOnes();

    double r_total = 0;
    int r_observed = 0;
    lk.r = Eigen::VectorXd::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = lk.quality_counts[static_cast<std::size_t>(i)];
      if (c == 0) continue;
      lk.r[i] = cfg.gamma * r_sum[i] / c;
      r_total += lk.r[i];
      ++r_observed;
    }
    const double r_fill = r_observed ? r_total / r_observed : cfg.gamma;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (lk.quality_counts[static_cast<std::size_t>(i)] == 0) lk.r[i] = r_fill;
    }
    if (cfg.metric == ShrinkMetric::accuracy) lk.S.setIdentity();
    lk.L = dpp_kernel(lk.r, lk.S);
    kernel.layers.push_back(std::move(lk));
  }
  return kernel;
}

DiversityKernel estimate_kernel(const Supernet<double>& net,
                                const SearchSpaceState& space,
                                const DiversityConfig& cfg,
                                const EstimationData& data, std::uint64_t seed) {
  if (!data.quality || !data.probe) {
    throw InputError("kernel estimation needs a quality split and a probe set");
  }
  const int threads = std::max(1, data.threads);
  std::vector<Supernet<double>> copies(static_cast<std::size_t>(threads), net);
  std::vector<EnsembleObservation> obs;
  auto observe = [&](std::size_t begin, std::size_t end) {
    std::vector<EnsembleObservation> batch(end - begin);
    parallel_for(end - begin, threads, [&](int worker, std::size_t i) {
      auto& local = copies[static_cast<std::size_t>(worker)];
      const auto arch = sample_uniform(space, derive_seed(seed, "ensemble", begin + i));
      recalibrate_bn(local, arch, *data.probe);
      const auto features = extract_features(local, arch, *data.probe);
      const auto acc = evaluate_paths(local, arch, *data.quality, data.batch_size);
      auto& e = batch[i];
      for (int p = 0; p < arch.k; ++p) {
        e.paths.push_back({arch.path_ops(p), features[static_cast<std::size_t>(p)],
                           acc.path_accuracy[static_cast<std::size_t>(p)]});
      }
    });
    for (auto& e : batch) obs.push_back(std::move(e));
  };
  const auto z = static_cast<std::size_t>(cfg.samples);
  const std::size_t limit = std::max(4 * z, z + 32);
  observe(0, z);
  while (!unobserved_layers(space, obs).empty() && obs.size() < limit) {
    observe(obs.size(), std::min(limit, obs.size() + z));
  }
  return assemble_kernel(space, obs, cfg);
}

double score_combination(const LayerKernel& layer, const Combination& combo) {
  std::vector<int> idx;
  for (int op : combo.ops()) idx.push_back(layer.index_of(op));
  return lu_determinant(principal_submatrix(layer.L, idx));
}

double score_combination(const DiversityKernel& kernel, int m,
                         const Combination& combo) {
  return score_combination(kernel.layer(m), combo);
}

std::vector<ScoredCombination> score_survivors(const SearchSpaceState& space,
                                               const DiversityKernel& kernel,
                                               int round) {
  std::vector<ScoredCombination> out;
  for (int m = 1; m <= space.depth(); ++m) {
    if (!space.has_combos(m)) continue;
    const auto& lk = kernel.layer(m);
    for (const auto& c : space.survivors(m)) {
      out.push_back({m, c, score_combination(lk, c), round});
    }
  }
  return out;
}

ShrinkReport shrink_by_scores(SearchSpaceState& space,
                              const std::vector<ScoredCombination>& scores,
                              const DiversityConfig& cfg, int round, int epoch) {
  ShrinkReport report;
  report.round = round;
  report.epoch = epoch;
  const std::size_t threshold = cfg.threshold_for(space);
  if (space.total_survivors() <= threshold) {
    report.survivor_total = space.total_survivors();
    report.notice = "survivor total " + std::to_string(report.survivor_total) +
                    " already at or below threshold " + std::to_string(threshold);
    return report;
  }
  for (const auto& s : scores) {
    if (!std::isfinite(s.score)) {
      throw EstimationError("non-finite score at layer " + std::to_string(s.layer));
    }
  }
  std::vector<ScoredCombination> order = scores;
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.combo < b.combo;
  });
  std::map<int, std::size_t> remaining;
  for (int m = 1; m <= space.depth(); ++m) {
    if (space.has_combos(m)) remaining[m] = space.survivors(m).size();
  }
  for (const auto& s : order) {
    if (static_cast<int>(report.dropped.size()) >= cfg.k_drop) break;
    auto& left = remaining[s.layer];
    if (left <= 1) continue;
    space.remove(s.layer, s.combo);
    --left;
    report.dropped.push_back(s);
    report.dropped.back().round = round;
  }
  report.performed = true;
  report.survivor_total = space.total_survivors();
  return report;
}

ShrinkReport shrink_round(SearchSpaceState& space, const DiversityKernel& kernel,
                          const DiversityConfig& cfg, int round, int epoch) {
  if (space.total_survivors() <= cfg.threshold_for(space)) {
    return shrink_by_scores(space, {}, cfg, round, epoch);
  }
  return shrink_by_scores(space, score_survivors(space, kernel, round), cfg,
                          round, epoch);
}

ScheduleResult run_shrinking_schedule(SearchSpaceState& space,
                                      const DiversityConfig& cfg,
                                      int total_epochs, const ScheduleHooks& hooks,
                                      ScheduleState start) {
  ScheduleResult result;
  int round = start.next_round;
  const std::size_t threshold = cfg.threshold_for(space);
  for (int epoch = start.next_epoch; epoch < total_epochs; ++epoch) {
    if (hooks.train_epoch) hooks.train_epoch(epoch);
    ++result.epochs_trained;
    if (cfg.metric != ShrinkMetric::none && (epoch + 1) % cfg.epochs_between == 0 &&
        space.total_survivors() > threshold) {
      const DiversityKernel kernel = hooks.estimate(round, epoch + 1);
      ShrinkReport report = shrink_round(space, kernel, cfg, round, epoch + 1);
      if (hooks.on_round) hooks.on_round(report);
      result.rounds.push_back(std::move(report));
      ++round;
    }
    if (hooks.after_epoch) hooks.after_epoch(epoch, round);
  }
  return result;
}

std::string shrink_report_json(const ShrinkReport& report) {
  nlohmann::ordered_json j;
  j["round"] = report.round;
  j["epoch"] = report.epoch;
  auto dropped = nlohmann::ordered_json::array();
  for (const auto& d : report.dropped) {
    nlohmann::ordered_json e;
    e["layer"] = d.layer;
    e["combo"] = d.combo.ops();
    e["score"] = d.score;
    dropped.push_back(std::move(e));
  }
  j["dropped"] = std::move(dropped);
  j["survivor_total"] = report.survivor_total;
  return j.dump();
}

void write_kernel_csv(std::ostream& os, const DiversityKernel& kernel) {
  os << std::setprecision(17);
  for (const auto& lk : kernel.layers) {
    os << "layer," << lk.layer << "\n";
    os << "op_ids";
    for (int id : lk.op_ids) os << ',' << id;
    os << "\nr";
    for (Eigen::Index i = 0; i < lk.r.size(); ++i) os << ',' << lk.r[i];
    os << '\n';
    for (Eigen::Index i = 0; i < lk.S.rows(); ++i) {
      os << "S";
      for (Eigen::Index j = 0; j < lk.S.cols(); ++j) os << ',' << lk.S(i, j);
      os << '\n';
    }
  }
}

namespace {

Eigen::MatrixXd laplacian_similarity(const Eigen::MatrixXd& points, double scale) {
  const auto n = points.rows();
  Eigen::MatrixXd s(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      s(i, j) = std::exp(-scale * (points.row(i) - points.row(j)).norm());
    }
  }
  return s;
}

}  // namespace

PropertyTrial draw_property_trial(int k, int n, Rng& rng) {
  if (k < 2 || n < k + 1) {
    throw ConfigError("property trials need K >= 2 and N >= K + 1");
  }
  const int dim = 3;
  // h = {0, 1, ..., k-1} contains i = 0; i' = k replaces it in h'.
  const int i = 0;
  const int ip = k;
  for (int attempt = 0; attempt < 100000; ++attempt) {
    Eigen::MatrixXd pts(n, dim);
    for (Eigen::Index a = 0; a < pts.size(); ++a) pts.data()[a] = rng.normal();
    const double scale = rng.uniform(0.2, 2.0);
    Eigen::MatrixXd s = laplacian_similarity(pts, scale);
    bool less = true, greater = true;
    for (int o = 1; o < k; ++o) {
      less = less && s(i, o) < s(ip, o);
      greater = greater && s(i, o) > s(ip, o);
    }
    if (!less && !greater) continue;
    if (greater) {
      pts.row(i).swap(pts.row(ip));
      s = laplacian_similarity(pts, scale);
    }
    Eigen::VectorXd r(n);
    for (int a = 0; a < n; ++a) r[a] = rng.uniform(0.05, 1.0);
    if (r[i] == r[ip]) continue;
    if (r[i] < r[ip]) std::swap(r[i], r[ip]);
    PropertyTrial t;
    t.r = r;
    t.S = s;
    for (int a = 0; a < k; ++a) t.h.push_back(a);
    t.h_prime = t.h;
    t.h_prime[0] = ip;
    const Eigen::MatrixXd L = dpp_kernel(r, s);
    t.score_h = lu_determinant(principal_submatrix(L, t.h));
    t.score_h_prime = lu_determinant(principal_submatrix(L, t.h_prime));
    return t;
  }
  throw EstimationError("could not draw a hypothesis-satisfying trial");
}

PropertyResult verify_property(int trials, int k, int n, std::uint64_t seed) {
  PropertyResult result;
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    PropertyTrial trial = draw_property_trial(k, n, rng);
    ++result.trials;
    if (trial.score_h > trial.score_h_prime - 1e-12) {
      ++result.passes;
    } else if (!result.first_failure) {
      result.first_failure = std::move(trial);
    }
  }
  return result;
}

std::string describe_trial(const PropertyTrial& t) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "r = [" << t.r.transpose() << "]\nS =\n" << t.S << "\nh = [";
  for (int v : t.h) os << ' ' << v;
  os << " ] score " << t.score_h << "\nh' = [";
  for (int v : t.h_prime) os << ' ' << v;
  os << " ] score " << t.score_h_prime << '\n';
  return os.str();
}

}  // namespace neas
