#include "neas/archspace.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "neas/errors.hpp"

namespace neas {

const OperatorSpec* LayerSpec::find(int op_id) const {
  for (const auto& op : candidates) {
    if (op.op_id == op_id) return &op;
  }
  return nullptr;
}

Combination Combination::canonical(std::vector<int> ops) {
  Combination c = multiset(std::move(ops));
  if (!c.distinct()) {
    throw InvariantError("combination repeats an operator");
  }
  return c;
}

Combination Combination::multiset(std::vector<int> ops) {
  Combination c;
  std::sort(ops.begin(), ops.end());
  c.ops_ = std::move(ops);
  return c;
}

bool Combination::contains(int op_id) const {
  return std::binary_search(ops_.begin(), ops_.end(), op_id);
}

bool Combination::distinct() const {
  return std::adjacent_find(ops_.begin(), ops_.end()) == ops_.end();
}

int EnsembleArchitecture::op_at(int path, int m) const {
  if (m <= split_point) return shared_ops.at(static_cast<std::size_t>(m - 1));
  return split_combos.at(static_cast<std::size_t>(m - split_point - 1))[path];
}

std::vector<int> EnsembleArchitecture::path_ops(int path) const {
  std::vector<int> ops;
  ops.reserve(static_cast<std::size_t>(depth()));
  for (int m = 1; m <= depth(); ++m) ops.push_back(op_at(path, m));
  return ops;
}

std::vector<Combination> k_subsets(const std::vector<int>& ids, int k) {
  std::vector<Combination> out;
  const int n = static_cast<int>(ids.size());
  if (k < 1 || k > n) return out;
  std::vector<int> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    std::vector<int> ops;
    for (int i : idx) ops.push_back(ids[static_cast<std::size_t>(i)]);
    out.push_back(Combination::canonical(std::move(ops)));
    int i = k - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - k + i) --i;
    if (i < 0) break;
    ++idx[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < k; ++j) {
      idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

SearchSpaceState SearchSpaceState::full(std::vector<LayerSpec> layers, int k,
                                        int s_min, int s_max) {
  const int d = static_cast<int>(layers.size());
  if (d < 2) throw ConfigError("search space needs at least 2 layers");
  if (k < 1) throw ConfigError("k must be >= 1");
  if (s_min < 1 || s_max > d || s_min > s_max) {
    throw ConfigError("split range [" + std::to_string(s_min) + ", " +
                      std::to_string(s_max) + "] not inside [1, " +
                      std::to_string(d) + "]");
  }
  SearchSpaceState s;
  s.k_ = k;
  s.s_min_ = s_min;
  s.s_max_ = s_max;
  s.survivors_.resize(static_cast<std::size_t>(d));
  s.shared_candidates_.resize(static_cast<std::size_t>(d));
  for (int m = 1; m <= d; ++m) {
    auto& layer = layers[static_cast<std::size_t>(m - 1)];
    if (layer.index != m) {
      throw ConfigError("layer " + std::to_string(m) + " has index " +
                        std::to_string(layer.index));
    }
    std::vector<int> ids;
    for (const auto& op : layer.candidates) {
      if (op.kind == OpKind::skip && !layer.allows_skip()) {
        throw ConfigError("layer " + std::to_string(m) +
                          ": skip requires stride 1 and equal channels");
      }
      if (op.kind == OpKind::conv &&
          (op.kernel_size < 1 || op.expansion < 1)) {
        throw ConfigError("layer " + std::to_string(m) +
                          ": invalid conv operator " +
                          std::to_string(op.op_id));
      }
      ids.push_back(op.op_id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
      throw ConfigError("layer " + std::to_string(m) + ": duplicate op_id");
    }
    if (ids.empty()) {
      throw ConfigError("layer " + std::to_string(m) + " has no candidates");
    }
    if (m <= s_max) s.shared_candidates_[static_cast<std::size_t>(m - 1)] = ids;
    if (m > s_min) {
      auto combos = k_subsets(ids, k);
      if (combos.empty()) {
        throw ConfigError("layer " + std::to_string(m) + " has " +
                          std::to_string(ids.size()) +
                          " candidates, fewer than k=" + std::to_string(k));
      }
      s.survivors_[static_cast<std::size_t>(m - 1)] = std::move(combos);
    }
  }
  s.layers_ = std::move(layers);
  return s;
}

const std::vector<Combination>& SearchSpaceState::survivors(int m) const {
  if (!has_combos(m)) {
    throw InvariantError("layer " + std::to_string(m) + " carries no combinations");
  }
  return survivors_[static_cast<std::size_t>(m - 1)];
}

const std::vector<int>& SearchSpaceState::shared_candidates(int m) const {
  if (m < 1 || m > s_max_) {
    throw InvariantError("layer " + std::to_string(m) + " is never shared");
  }
  return shared_candidates_[static_cast<std::size_t>(m - 1)];
}

std::size_t SearchSpaceState::total_survivors() const {
  std::size_t n = 0;
  for (const auto& v : survivors_) n += v.size();
  return n;
}

void SearchSpaceState::validate(const EnsembleArchitecture& arch) const {
  if (arch.k != k_) {
    throw InvariantError("architecture k=" + std::to_string(arch.k) +
                         " but space k=" + std::to_string(k_));
  }
  if (arch.split_point < s_min_ || arch.split_point > s_max_) {
    throw InvariantError("split point " + std::to_string(arch.split_point) +
                         " outside [" + std::to_string(s_min_) + ", " +
                         std::to_string(s_max_) + "]");
  }
  if (static_cast<int>(arch.shared_ops.size()) != arch.split_point ||
      arch.depth() != depth()) {
    throw InvariantError("architecture depth does not match space depth " +
                         std::to_string(depth()));
  }
  for (int m = 1; m <= arch.split_point; ++m) {
    const auto& allowed = shared_candidates(m);
    const int op = arch.shared_ops[static_cast<std::size_t>(m - 1)];
    if (std::find(allowed.begin(), allowed.end(), op) == allowed.end()) {
      throw InvariantError("layer " + std::to_string(m) + ": shared op " +
                           std::to_string(op) + " not allowed");
    }
  }
  for (int m = arch.split_point + 1; m <= depth(); ++m) {
    const auto& combo =
        arch.split_combos[static_cast<std::size_t>(m - arch.split_point - 1)];
    if (combo.size() != k_ || !combo.distinct()) {
      throw InvariantError("layer " + std::to_string(m) +
                           ": combination is not a K-subset");
    }
    const auto& surv = survivors(m);
    if (!std::binary_search(surv.begin(), surv.end(), combo)) {
      throw InvariantError("layer " + std::to_string(m) +
                           ": combination not among survivors");
    }
  }
}

bool SearchSpaceState::contains(const EnsembleArchitecture& arch) const {
  try {
    validate(arch);
    return true;
  } catch (const InvariantError&) {
    return false;
  }
}

void SearchSpaceState::remove(int m, const Combination& combo) {
  auto& surv = survivors_.at(static_cast<std::size_t>(m - 1));
  auto it = std::lower_bound(surv.begin(), surv.end(), combo);
  if (it == surv.end() || *it != combo) {
    throw InvariantError("layer " + std::to_string(m) +
                         ": combination to remove is not a survivor");
  }
  if (surv.size() == 1) {
    throw InvariantError("layer " + std::to_string(m) +
                         ": refusing to remove the last survivor");
  }
  surv.erase(it);
}

void SearchSpaceState::restrict(int m, std::vector<Combination> survivors) {
  auto& surv = survivors_.at(static_cast<std::size_t>(m - 1));
  std::sort(survivors.begin(), survivors.end());
  survivors.erase(std::unique(survivors.begin(), survivors.end()),
                  survivors.end());
  if (survivors.empty() ||
      !std::includes(surv.begin(), surv.end(), survivors.begin(),
                     survivors.end())) {
    throw InvariantError("layer " + std::to_string(m) +
                         ": restricted survivors must be a non-empty subset");
  }
  surv = std::move(survivors);
}

std::uint64_t SearchSpaceState::digest() const {
  std::ostringstream os;
  os << "k" << k_ << "s" << s_min_ << "-" << s_max_;
  for (const auto& l : layers_) {
    os << "|L" << l.index << ":" << l.in_channels << "," << l.out_channels
       << "," << l.stride << "," << l.in_size << ":";
    for (const auto& op : l.candidates) {
      os << op.op_id << (op.kind == OpKind::skip ? "s" : "c") << op.kernel_size
         << "x" << op.expansion << ";";
    }
  }
  for (std::size_t m = 0; m < survivors_.size(); ++m) {
    os << "|S" << m + 1 << ":";
    for (const auto& c : survivors_[m]) {
      for (int o : c.ops()) os << o << ",";
      os << ";";
    }
  }
  return fnv1a(os.str());
}

EnsembleArchitecture sample_uniform(const SearchSpaceState& space, Rng& rng) {
  EnsembleArchitecture arch;
  arch.k = space.k();
  arch.split_point = space.s_min() == space.s_max()
                         ? space.s_min()
                         : rng.range(space.s_min(), space.s_max());
  for (int m = 1; m <= arch.split_point; ++m) {
    const auto& cand = space.shared_candidates(m);
    if (cand.empty()) {
      throw InvariantError("layer " + std::to_string(m) +
                           " has no shared candidates");
    }
    arch.shared_ops.push_back(cand[rng.index(cand.size())]);
  }
  for (int m = arch.split_point + 1; m <= space.depth(); ++m) {
    const auto& surv = space.survivors(m);
    if (surv.empty()) {
      throw InvariantError("layer " + std::to_string(m) +
                           " has an empty survivor set");
    }
    arch.split_combos.push_back(surv[rng.index(surv.size())]);
  }
  return arch;
}

EnsembleArchitecture sample_uniform(const SearchSpaceState& space,
                                    std::uint64_t seed) {
  Rng rng(seed);
  return sample_uniform(space, rng);
}

std::vector<EnsembleArchitecture> enumerate_space(
    const SearchSpaceState& space) {
  std::vector<EnsembleArchitecture> out;
  for (int s = space.s_min(); s <= space.s_max(); ++s) {
    // Mixed-radix counter over the per-layer choice lists.
    std::vector<std::size_t> radix;
    for (int m = 1; m <= space.depth(); ++m) {
      radix.push_back(m <= s ? space.shared_candidates(m).size()
                             : space.survivors(m).size());
    }
    std::vector<std::size_t> digit(radix.size(), 0);
    while (true) {
      EnsembleArchitecture a;
      a.k = space.k();
      a.split_point = s;
      for (int m = 1; m <= space.depth(); ++m) {
        const auto i = digit[static_cast<std::size_t>(m - 1)];
        if (m <= s) {
          a.shared_ops.push_back(space.shared_candidates(m)[i]);
        } else {
          a.split_combos.push_back(space.survivors(m)[i]);
        }
      }
      out.push_back(std::move(a));
      int pos = static_cast<int>(radix.size()) - 1;
      while (pos >= 0 && ++digit[static_cast<std::size_t>(pos)] ==
                             radix[static_cast<std::size_t>(pos)]) {
        digit[static_cast<std::size_t>(pos)] = 0;
        --pos;
      }
      if (pos < 0) break;
    }
  }
  return out;
}

double CostModel::layer_cost(int m, int op_id) const {
  if (m < 1 || m > static_cast<int>(op_cost.size())) {
    throw ConfigError("cost table has no layer " + std::to_string(m));
  }
  const auto& table = op_cost[static_cast<std::size_t>(m - 1)];
  auto it = table.find(op_id);
  if (it == table.end()) {
    throw ConfigError("cost table has no op " + std::to_string(op_id) +
                      " at layer " + std::to_string(m));
  }
  return it->second;
}

double conv_op_macs(const LayerSpec& layer, const OperatorSpec& op) {
  if (op.kind == OpKind::skip) return 0.0;
  const double hw_in = static_cast<double>(layer.in_size) * layer.in_size;
  const double hw_out = static_cast<double>(layer.out_size()) * layer.out_size();
  const double hidden = static_cast<double>(layer.in_channels) * op.expansion;
  const double expand = hw_in * layer.in_channels * hidden;
  const double depthwise =
      hw_out * hidden * op.kernel_size * op.kernel_size;
  const double project = hw_out * hidden * layer.out_channels;
  return expand + depthwise + project;
}

CostModel analytic_cost_model(const StemSpec& stem,
                              const std::vector<LayerSpec>& layers,
                              int num_classes) {
  CostModel cm;
  const int stem_out = (stem.in_size + stem.stride - 1) / stem.stride;
  cm.stem = static_cast<double>(stem_out) * stem_out * stem.in_channels *
            stem.out_channels * stem.kernel_size * stem.kernel_size;
  for (const auto& layer : layers) {
    std::map<int, double> row;
    for (const auto& op : layer.candidates) row[op.op_id] = conv_op_macs(layer, op);
    cm.op_cost.push_back(std::move(row));
  }
  const int features = layers.empty() ? stem.out_channels
                                      : layers.back().out_channels;
  cm.head = static_cast<double>(features) * num_classes;
  return cm;
}

double ensemble_cost(const EnsembleArchitecture& arch, const CostModel& cm) {
  double cost = cm.stem;
  for (int m = 1; m <= arch.split_point; ++m) {
    cost += cm.layer_cost(m, arch.shared_ops[static_cast<std::size_t>(m - 1)]);
  }
  for (int m = arch.split_point + 1; m <= arch.depth(); ++m) {
    const auto& combo =
        arch.split_combos[static_cast<std::size_t>(m - arch.split_point - 1)];
    for (int op : combo.ops()) cost += cm.layer_cost(m, op);
  }
  return cost + arch.k * cm.head;
}

SpaceSize space_size(const SearchSpaceState& space, SizeCounting counting) {
  using boost::multiprecision::cpp_int;
  SpaceSize out;
  const int k = space.k();
  const int splits = space.s_max() - space.s_min() + 1;
  if (counting == SizeCounting::survivors) {
    cpp_int total = 0;
    for (int s = space.s_min(); s <= space.s_max(); ++s) {
      cpp_int term = 1;
      for (int m = 1; m <= space.depth(); ++m) {
        term *= m <= s ? space.shared_candidates(m).size()
                       : space.survivors(m).size();
      }
      total += term;
    }
    out.exact = total;
    // log10 via the decimal length and leading digits; exact enough for
    // reporting and safe for values far beyond double range.
    const std::string digits = total.str();
    const std::size_t lead = std::min<std::size_t>(digits.size(), 15);
    out.log10 = std::log10(std::stod(digits.substr(0, lead))) +
                static_cast<double>(digits.size() - lead);
    return out;
  }
  cpp_int total = splits;
  double lg = std::log10(static_cast<double>(splits));
  for (const auto& layer : space.layers()) {
    const int n = static_cast<int>(layer.candidates.size());
    for (int i = 0; i < k; ++i) {
      const int factor = counting == SizeCounting::with_repetition ? n : n - i;
      total *= std::max(factor, 0);
      lg += factor > 0 ? std::log10(static_cast<double>(factor))
                       : -std::numeric_limits<double>::infinity();
    }
  }
  out.exact = total;
  out.log10 = lg;
  return out;
}

EnsembleArchitecture mirror_homogeneous(const EnsembleArchitecture& arch,
                                        int path_index) {
  if (path_index < 1 || path_index > arch.k) {
    throw InputError("path index " + std::to_string(path_index) +
                     " outside [1, " + std::to_string(arch.k) + "]");
  }
  const bool homogeneous = std::all_of(
      arch.split_combos.begin(), arch.split_combos.end(),
      [](const Combination& c) {
        return std::adjacent_find(c.ops().begin(), c.ops().end(),
                                  std::not_equal_to<>()) == c.ops().end();
      });
  if (homogeneous) return arch;
  EnsembleArchitecture out = arch;
  for (auto& combo : out.split_combos) {
    const int op = combo[path_index - 1];
    combo = Combination::multiset(
        std::vector<int>(static_cast<std::size_t>(arch.k), op));
  }
  out.searchable = false;
  return out;
}

}  // namespace neas
