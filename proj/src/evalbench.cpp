#include "neas/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <ostream>

#include "neas/errors.hpp"
#include "neas/parallel.hpp"

namespace neas {

SurrogateOracle::SurrogateOracle(const SearchSpaceState& space, std::uint64_t seed,
                                 double diversity_weight, double cost_weight,
                                 double cost_ref, CostModel cost_model,
                                 double sharpness)
    : diversity_weight_(diversity_weight),
      cost_weight_(cost_weight),
      cost_ref_(cost_ref),
      cost_model_(std::move(cost_model)),
      sharpness_(sharpness) {
  if (!(cost_ref > 0)) throw ConfigError("surrogate cost_ref must be > 0");
  for (int m = 1; m <= space.depth(); ++m) {
    std::vector<int> ids;
    for (const auto& op : space.layer(m).candidates) ids.push_back(op.op_id);
    Rng rng(derive_seed(seed, "surrogate", static_cast<std::uint64_t>(m)));
    std::vector<double> g;
    for (std::size_t i = 0; i < ids.size(); ++i) g.push_back(rng.uniform());
    const auto n = static_cast<Eigen::Index>(ids.size());
    Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j) delta(i, j) = delta(j, i) = rng.uniform();
    }
    op_ids_.push_back(std::move(ids));
    gene_.push_back(std::move(g));
    delta_.push_back(std::move(delta));
  }
}

int SurrogateOracle::index(int m, int op_id) const {
  const auto& ids = op_ids_.at(static_cast<std::size_t>(m - 1));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == op_id) return static_cast<int>(i);
  }
  throw InvariantError("surrogate: layer " + std::to_string(m) + " has no op " +
                       std::to_string(op_id));
}

double SurrogateOracle::gene_score(int m, int op_id) const {
  return gene_[static_cast<std::size_t>(m - 1)][static_cast<std::size_t>(index(m, op_id))];
}

double SurrogateOracle::pair_bonus(int m, int a, int b) const {
  return delta_[static_cast<std::size_t>(m - 1)](index(m, a), index(m, b));
}

double SurrogateOracle::operator()(const EnsembleArchitecture& arch) const {
  const double d = arch.depth();
  double genes = 0;
  double bonus = 0;
  for (int m = 1; m <= arch.split_point; ++m) {
    genes += gene_score(m, arch.shared_ops[static_cast<std::size_t>(m - 1)]);
  }
  for (int m = arch.split_point + 1; m <= arch.depth(); ++m) {
    const auto& c = arch.split_combos[static_cast<std::size_t>(m - arch.split_point - 1)];
    double g = 0;
    for (int op : c.ops()) g += gene_score(m, op);
    genes += g / c.size();
    double pairs = 0;
    int count = 0;
    for (int i = 0; i < c.size(); ++i) {
      for (int j = i + 1; j < c.size(); ++j) {
        pairs += pair_bonus(m, c[i], c[j]);
        ++count;
      }
    }
    if (count) bonus += pairs / count;
  }
  double z = genes / d + diversity_weight_ * bonus / d;
  if (cost_weight_ != 0) z -= cost_weight_ * ensemble_cost(arch, cost_model_) / cost_ref_;
  return 1.0 / (1.0 + std::exp(-sharpness_ * (z - 0.5)));
}

namespace {

// Counts inversions of v while merge-sorting it.
long long merge_count(std::vector<double>& v, std::vector<double>& buf,
                      std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  long long swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += static_cast<long long>(mid - i);
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<long>(lo), buf.begin() + static_cast<long>(hi),
            v.begin() + static_cast<long>(lo));
  return swaps;
}

long long tied_pairs(const std::vector<double>& sorted) {
  long long t = 0, run = 1;
  for (std::size_t i = 1; i <= sorted.size(); ++i) {
    if (i < sorted.size() && sorted[i] == sorted[i - 1]) {
      ++run;
    } else {
      t += run * (run - 1) / 2;
      run = 1;
    }
  }
  return t;
}

}  // namespace

double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InputError("kendall_tau: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw InputError("kendall_tau needs at least two pairs");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (x[a] != x[b]) return x[a] < x[b];
    return y[a] < y[b];
  });
  const long long n0 = static_cast<long long>(n) * (static_cast<long long>(n) - 1) / 2;
  long long n1 = 0, n3 = 0;
  {
    long long rx = 1, rxy = 1;
    for (std::size_t i = 1; i <= n; ++i) {
      const bool same_x = i < n && x[order[i]] == x[order[i - 1]];
      const bool same_xy = same_x && y[order[i]] == y[order[i - 1]];
      if (same_x) {
        ++rx;
      } else {
        n1 += rx * (rx - 1) / 2;
        rx = 1;
      }
      if (same_xy) {
        ++rxy;
      } else {
        n3 += rxy * (rxy - 1) / 2;
        rxy = 1;
      }
    }
  }
  std::vector<double> ys(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[order[i]];
  const long long swaps = merge_count(ys, buf, 0, n);
  const long long n2 = tied_pairs(ys);
  const double denom = std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
  if (denom == 0) throw InputError("kendall_tau undefined: a ranking is entirely tied");
  const long long numer = n0 - n1 - n2 + n3 - 2 * swaps;
  return static_cast<double>(numer) / denom;
}

double scratch_fitness(const NetworkPlan& plan, const EnsembleArchitecture& arch,
                       const ToyDataset& data, const RetrainConfig& cfg,
                       std::uint64_t seed) {
  Supernet<double> net(plan, derive_seed(seed, "init"));
  const long per_epoch = steps_per_epoch(data.train.size(), cfg.train.batch_size);
  const long total = per_epoch * cfg.train.epochs;
  long step = 0;
  for (int e = 0; e < cfg.train.epochs; ++e) {
    train_epoch(net, data.train, cfg.train,
                derive_seed(seed, "epoch", static_cast<std::uint64_t>(e)), step, total,
                [&](std::uint64_t) { return arch; });
  }
  return evaluate(net, arch, data.val, &data.probe.images, cfg.batch_size_eval);
}

double inherited_fitness(const Supernet<double>& net,
                         const EnsembleArchitecture& arch, const ToyDataset& data,
                         int batch_size) {
  Supernet<double> local = net;
  return evaluate(local, arch, data.val, &data.probe.images, batch_size);
}

std::vector<double> scratch_fitness_all(const NetworkPlan& plan,
                                        const std::vector<EnsembleArchitecture>& archs,
                                        const ToyDataset& data,
                                        const RetrainConfig& cfg,
                                        std::uint64_t seed, int threads,
                                        std::vector<std::string>* errors) {
  std::vector<double> out(archs.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<std::string> msgs(archs.size());
  parallel_for(archs.size(), threads, [&](int, std::size_t i) {
    try {
      out[i] = scratch_fitness(plan, archs[i], data, cfg,
                               derive_seed(seed, "scratch", static_cast<std::uint64_t>(i)));
    } catch (const TrainingError& e) {
      msgs[i] = serialize_architecture(archs[i]) + ": " + e.what();
    }
  });
  if (errors) {
    for (auto& m : msgs) {
      if (!m.empty()) errors->push_back(std::move(m));
    }
  }
  return out;
}

RankReport rank_report(const Supernet<double>& net,
                       const std::vector<EnsembleArchitecture>& archs,
                       const std::vector<double>& scratch, const ToyDataset& data,
                       int threads) {
  RankReport r;
  std::vector<double> inherited(archs.size());
  const int workers = std::max(1, threads);
  std::vector<Supernet<double>> copies(static_cast<std::size_t>(workers), net);
  parallel_for(archs.size(), workers, [&](int w, std::size_t i) {
    inherited[i] = evaluate(copies[static_cast<std::size_t>(w)], archs[i], data.val,
                            &data.probe.images);
  });
  for (std::size_t i = 0; i < archs.size(); ++i) {
    if (std::isnan(scratch[i])) {
      r.skipped.push_back(serialize_architecture(archs[i]));
      continue;
    }
    r.archs.push_back(archs[i]);
    r.inherited.push_back(inherited[i]);
    r.scratch.push_back(scratch[i]);
  }
  r.n = static_cast<int>(r.archs.size());
  r.tau = kendall_tau(r.inherited, r.scratch);
  return r;
}

RankReport rank_correlation_study(const Supernet<double>& net,
                                  const SearchSpaceState& space, int n_archs,
                                  const ToyDataset& data, const RetrainConfig& cfg,
                                  std::uint64_t seed, int threads) {
  if (n_archs < 2) throw InputError("rank study needs at least two architectures");
  std::vector<EnsembleArchitecture> archs;
  for (int i = 0; i < n_archs; ++i) {
    archs.push_back(sample_uniform(space, derive_seed(seed, "rank_arch",
                                                      static_cast<std::uint64_t>(i))));
  }
  std::vector<std::string> errors;
  const auto scratch = scratch_fitness_all(net.plan(), archs, data, cfg, seed, threads,
                                           &errors);
  RankReport r = rank_report(net, archs, scratch, data, threads);
  if (!errors.empty()) r.skipped = std::move(errors);
  return r;
}

void write_rank_csv(std::ostream& os, const RankReport& r) {
  os << std::setprecision(17) << "architecture,inherited,scratch\n";
  for (int i = 0; i < r.n; ++i) {
    std::string rec = serialize_architecture(r.archs[static_cast<std::size_t>(i)]);
    std::string quoted;
    for (char c : rec) {
      if (c == '"') quoted += '"';
      quoted += c;
    }
    os << '"' << quoted << "\"," << r.inherited[static_cast<std::size_t>(i)] << ','
       << r.scratch[static_cast<std::size_t>(i)] << '\n';
  }
}

std::string rank_summary_json(const RankReport& r) {
  nlohmann::ordered_json j;
  j["tau"] = r.tau;
  j["n"] = r.n;
  j["skipped"] = r.skipped;
  return j.dump();
}

}  // namespace neas
