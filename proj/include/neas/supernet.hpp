#pragma once

// Weight-sharing K-path supernet. One parameter block per (layer, conv op);
// every architecture that picks the same pair reads the same block. The
// stem and the classifier head are shared by all architectures and all
// paths.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <tuple>
#include <vector>

#include "neas/archspace.hpp"
#include "neas/netcore.hpp"

namespace neas {

struct NetworkPlan {
  StemSpec stem;
  std::vector<LayerSpec> layers;
  int num_classes = 2;
  Activation activation = Activation::relu;

  int features() const {
    return layers.empty() ? stem.out_channels : layers.back().out_channels;
  }
};

/// Images plus labels, e.g. one dataset split or one mini-batch.
template <typename T>
struct Samples {
  Tensor<T> images;
  std::vector<int> labels;

  int size() const { return images.n(); }
};

template <typename T>
Tensor<T> gather_images(const Tensor<T>& images,
                        std::span<const std::size_t> idx) {
  Tensor<T> out(static_cast<int>(idx.size()), images.c(), images.h(), images.w());
  const std::size_t per = static_cast<std::size_t>(images.c()) * images.h() * images.w();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(images.data() + idx[i] * per, per, out.data() + i * per);
  }
  return out;
}

template <typename T>
Samples<T> gather(const Samples<T>& s, std::span<const std::size_t> idx) {
  Samples<T> out;
  out.images = gather_images(s.images, idx);
  for (std::size_t i : idx) out.labels.push_back(s.labels[i]);
  return out;
}

template <typename T>
Samples<T> slice(const Samples<T>& s, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return gather(s, idx);
}

template <typename T>
class Supernet {
 public:
  using BlockKey = std::pair<int, int>;  // (layer, op_id)

  Supernet() = default;
  Supernet(NetworkPlan plan, std::uint64_t seed) : plan_(std::move(plan)) {
    Rng rng(seed);
    stem_ = make_stem_block<T>(plan_.stem, plan_.activation, rng);
    for (const auto& layer : plan_.layers) {
      for (const auto& op : layer.candidates) {
        if (!op.has_params()) continue;
        grid_.emplace(BlockKey{layer.index, op.op_id},
                      make_mbconv_block<T>(layer, op, plan_.activation, rng));
      }
    }
    head_ = make_head_block<T>(plan_.features(), plan_.num_classes,
                               depth() + 1, rng);
  }

  const NetworkPlan& plan() const { return plan_; }
  int depth() const { return static_cast<int>(plan_.layers.size()); }

  ParamBlock<T>& stem() { return stem_; }
  const ParamBlock<T>& stem() const { return stem_; }
  ParamBlock<T>& head() { return head_; }
  const ParamBlock<T>& head() const { return head_; }

  const OperatorSpec& op_spec(int m, int op_id) const {
    if (m < 1 || m > depth()) {
      throw ConfigError("supernet has no layer " + std::to_string(m));
    }
    const auto* op = plan_.layers[static_cast<std::size_t>(m - 1)].find(op_id);
    if (!op) {
      throw ConfigError("layer " + std::to_string(m) + " has no op " +
                        std::to_string(op_id));
    }
    return *op;
  }
  bool has_block(int m, int op_id) const { return grid_.count({m, op_id}) > 0; }
  ParamBlock<T>& block(int m, int op_id) {
    auto it = grid_.find({m, op_id});
    if (it == grid_.end()) throw_missing(m, op_id);
    return it->second;
  }
  const ParamBlock<T>& block(int m, int op_id) const {
    auto it = grid_.find({m, op_id});
    if (it == grid_.end()) throw_missing(m, op_id);
    return it->second;
  }

  /// stem, grid blocks in (layer, op) order, head.
  std::vector<ParamBlock<T>*> all_blocks() {
    std::vector<ParamBlock<T>*> out{&stem_};
    for (auto& [key, b] : grid_) out.push_back(&b);
    out.push_back(&head_);
    return out;
  }
  std::vector<const ParamBlock<T>*> all_blocks() const {
    std::vector<const ParamBlock<T>*> out{&stem_};
    for (const auto& [key, b] : grid_) out.push_back(&b);
    out.push_back(&head_);
    return out;
  }

  /// Distinct blocks read by `arch`: stem, body blocks in (layer, op) order,
  /// head. Skip operators contribute nothing.
  std::vector<ParamBlock<T>*> blocks_for(const EnsembleArchitecture& arch) {
    std::vector<ParamBlock<T>*> out{&stem_};
    for (const auto& key : body_keys(arch)) out.push_back(&block(key.first, key.second));
    out.push_back(&head_);
    return out;
  }

  std::vector<BlockKey> body_keys(const EnsembleArchitecture& arch) const {
    std::vector<BlockKey> keys;
    for (int m = 1; m <= arch.depth(); ++m) {
      for (int p = 0; p < (m <= arch.split_point ? 1 : arch.k); ++p) {
        const int op = arch.op_at(p, m);
        if (!op_spec(m, op).has_params()) continue;
        keys.emplace_back(m, op);
      }
    }
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    return keys;
  }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

 private:
  [[noreturn]] static void throw_missing(int m, int op_id) {
    throw ConfigError("supernet has no parameter block for layer " +
                      std::to_string(m) + " op " + std::to_string(op_id));
  }

  NetworkPlan plan_;
  ParamBlock<T> stem_;
  ParamBlock<T> head_;
  std::map<BlockKey, ParamBlock<T>> grid_;
  bool frozen_ = false;
};

/// Per-path results of one ensemble forward. Probabilities are softmax rows;
/// the ensemble prediction is their arithmetic mean over paths.
template <typename T>
struct PathOutputs {
  std::vector<Tensor<T>> features;  // (N, F) pooled, pre-head
  std::vector<Tensor<T>> logits;
  std::vector<Tensor<T>> probs;
  Tensor<T> ensemble;
};

/// Caches for backward. std::nullopt marks a skip operator.
template <typename T>
struct EnsembleTrace {
  BlockCache<T> stem;
  std::vector<std::optional<BlockCache<T>>> prefix;             // layers 1..s
  std::vector<std::vector<std::optional<BlockCache<T>>>> paths; // [path][m-s-1]
  std::vector<Shape> pooled_shape;
};

namespace detail {

template <typename T>
Tensor<T> apply_layer(const Supernet<T>& net, int m, int op_id,
                      const Tensor<T>& x, Mode mode,
                      std::optional<BlockCache<T>>* cache) {
  const OperatorSpec& op = net.op_spec(m, op_id);
  if (!op.has_params()) {
    require_shape(x, net.plan().layers[static_cast<std::size_t>(m - 1)].in_channels,
                  "skip(layer " + std::to_string(m) + ")");
    if (cache) cache->reset();
    return x;
  }
  if (cache) {
    cache->emplace();
    return forward_block(net.block(m, op_id), x, mode, &cache->value());
  }
  return forward_block(net.block(m, op_id), x, mode,
                       static_cast<BlockCache<T>*>(nullptr));
}

}  // namespace detail

/// Ensemble forward: stem and layers 1..s run once, layers s+1..d once per
/// path. Never modifies the network (running statistics included).
template <typename T>
PathOutputs<T> forward_ensemble(const Supernet<T>& net,
                                const EnsembleArchitecture& arch,
                                const Tensor<T>& images, Mode mode,
                                EnsembleTrace<T>* trace = nullptr) {
  if (arch.depth() != net.depth()) {
    throw ConfigError("architecture depth " + std::to_string(arch.depth()) +
                      " does not match supernet depth " +
                      std::to_string(net.depth()));
  }
  if (trace) *trace = EnsembleTrace<T>{};
  Tensor<T> x = forward_block(net.stem(), images, mode, trace ? &trace->stem : nullptr);
  if (trace) trace->prefix.resize(static_cast<std::size_t>(arch.split_point));
  for (int m = 1; m <= arch.split_point; ++m) {
    x = detail::apply_layer(net, m, arch.shared_ops[static_cast<std::size_t>(m - 1)],
                            x, mode,
                            trace ? &trace->prefix[static_cast<std::size_t>(m - 1)]
                                  : nullptr);
  }
  PathOutputs<T> out;
  if (trace) {
    trace->paths.resize(static_cast<std::size_t>(arch.k));
    trace->pooled_shape.resize(static_cast<std::size_t>(arch.k));
  }
  for (int p = 0; p < arch.k; ++p) {
    Tensor<T> h = x;
    auto* caches = trace ? &trace->paths[static_cast<std::size_t>(p)] : nullptr;
    if (caches) caches->resize(static_cast<std::size_t>(arch.depth() - arch.split_point));
    for (int m = arch.split_point + 1; m <= arch.depth(); ++m) {
      h = detail::apply_layer(net, m, arch.op_at(p, m), h, mode,
                              caches ? &(*caches)[static_cast<std::size_t>(
                                           m - arch.split_point - 1)]
                                     : nullptr);
    }
    if (trace) trace->pooled_shape[static_cast<std::size_t>(p)] = h.shape();
    Tensor<T> f = global_avg_pool_forward(h);
    Tensor<T> logits = head_forward(net.head(), f);
    out.probs.push_back(softmax(logits));
    out.features.push_back(std::move(f));
    out.logits.push_back(std::move(logits));
  }
  out.ensemble = Tensor<T>(out.probs.front().shape());
  for (const auto& p : out.probs) out.ensemble.storage() += p.storage();
  out.ensemble.storage() /= static_cast<T>(arch.k);
  return out;
}

/// Applies the running-stat update for every block cached in `trace`.
template <typename T>
void update_running_stats(Supernet<T>& net, const EnsembleArchitecture& arch,
                          const EnsembleTrace<T>& trace) {
  update_running_stats(net.stem(), trace.stem);
  for (int m = 1; m <= arch.split_point; ++m) {
    const auto& c = trace.prefix[static_cast<std::size_t>(m - 1)];
    if (c) update_running_stats(net.block(m, arch.op_at(0, m)), *c);
  }
  for (int p = 0; p < arch.k; ++p) {
    for (int m = arch.split_point + 1; m <= arch.depth(); ++m) {
      const auto& c = trace.paths[static_cast<std::size_t>(p)]
                                 [static_cast<std::size_t>(m - arch.split_point - 1)];
      if (c) update_running_stats(net.block(m, arch.op_at(p, m)), *c);
    }
  }
}

/// Forward + backward of the combined loss sum_i L_i. Gradients accumulate
/// into the blocks read by `arch`; running statistics are updated only in
/// train mode when `update_stats` is set. Returns the per-path losses.
template <typename T>
std::vector<T> compute_gradients(Supernet<T>& net, const EnsembleArchitecture& arch,
                                 const Samples<T>& batch, Mode mode,
                                 bool update_stats = true) {
  EnsembleTrace<T> trace;
  PathOutputs<T> out = forward_ensemble(net, arch, batch.images, mode, &trace);
  if (mode == Mode::train && update_stats) update_running_stats(net, arch, trace);

  std::vector<T> losses;
  Tensor<T> d_prefix;
  for (int p = 0; p < arch.k; ++p) {
    auto loss = softmax_cross_entropy(out.logits[static_cast<std::size_t>(p)],
                                      batch.labels);
    losses.push_back(loss.loss);
    Tensor<T> df = head_backward(net.head(), out.features[static_cast<std::size_t>(p)],
                                 loss.grad);
    Tensor<T> d = global_avg_pool_backward(trace.pooled_shape[static_cast<std::size_t>(p)], df);
    for (int m = arch.depth(); m > arch.split_point; --m) {
      const auto& c = trace.paths[static_cast<std::size_t>(p)]
                                 [static_cast<std::size_t>(m - arch.split_point - 1)];
      if (c) d = backward_block(net.block(m, arch.op_at(p, m)), *c, d);
    }
    if (p == 0) {
      d_prefix = std::move(d);
    } else {
      d_prefix.storage() += d.storage();
    }
  }
  for (int m = arch.split_point; m >= 1; --m) {
    const auto& c = trace.prefix[static_cast<std::size_t>(m - 1)];
    if (c) d_prefix = backward_block(net.block(m, arch.op_at(0, m)), *c, d_prefix);
  }
  backward_block(net.stem(), trace.stem, d_prefix);
  return losses;
}

/// One SGD step of `arch` on `batch`. Only the blocks read by `arch` are
/// updated (weight decay included). Returns the combined loss.
template <typename T>
T train_step(Supernet<T>& net, const EnsembleArchitecture& arch,
             const Samples<T>& batch, const TrainConfig& cfg, double lr) {
  if (net.frozen()) throw InvariantError("cannot train a frozen supernet");
  auto blocks = net.blocks_for(arch);
  for (auto* b : blocks) b->zero_grad();
  const auto losses = compute_gradients(net, arch, batch, Mode::train);
  T total = 0;
  for (T l : losses) total += l;
  if (!std::isfinite(static_cast<double>(total))) {
    throw TrainingError("non-finite loss for architecture " +
                        serialize_architecture(arch));
  }
  for (auto* b : blocks) sgd_step(*b, lr, cfg);
  return total;
}

/// Samples an architecture from `space` with `seed`, then trains one step.
template <typename T>
std::pair<T, EnsembleArchitecture> train_iteration(
    Supernet<T>& net, const SearchSpaceState& space, const Samples<T>& batch,
    const TrainConfig& cfg, double lr, std::uint64_t seed) {
  EnsembleArchitecture arch = sample_uniform(space, seed);
  const T loss = train_step(net, arch, batch, cfg, lr);
  return {loss, arch};
}

/// One pass over `train` in shuffled mini-batches. `arch_for(step_seed)`
/// supplies the architecture of each step; `step` is the global step
/// counter used by the learning-rate schedule.
template <typename T, typename ArchFn>
T train_epoch(Supernet<T>& net, const Samples<T>& train, const TrainConfig& cfg,
              std::uint64_t epoch_seed, long& step, long total_steps,
              ArchFn&& arch_for) {
  std::vector<std::size_t> order(static_cast<std::size_t>(train.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(epoch_seed, "shuffle"));
  rng.shuffle(order);
  const auto bs = static_cast<std::size_t>(std::max(cfg.batch_size, 1));
  T total = 0;
  long batches = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += bs) {
    const std::size_t end = std::min(order.size(), begin + bs);
    if (end - begin < 2) break;  // batch-norm needs at least two samples
    std::span<const std::size_t> idx(order.data() + begin, end - begin);
    const Samples<T> batch = gather(train, idx);
    const EnsembleArchitecture arch =
        arch_for(derive_seed(epoch_seed, "arch", static_cast<std::uint64_t>(batches)));
    total += train_step(net, arch, batch, cfg, learning_rate_at(cfg, step, total_steps));
    ++step;
    ++batches;
  }
  return batches ? total / static_cast<T>(batches) : T(0);
}

inline long steps_per_epoch(int samples, int batch_size) {
  const long bs = std::max(batch_size, 1);
  long full = samples / bs;
  if (samples % bs >= 2) ++full;
  return full;
}

/// Replaces the running statistics of every block read by `arch` with the
/// moments of its inputs over the whole probe set, forwarded as one batch.
/// Each BN layer normalizes with its own probe moments, so deeper layers see
/// exactly the inputs a single full-probe training batch would produce.
/// Splitting the probe would not give that: per-batch normalization changes
/// what every later layer receives.
template <typename T>
void recalibrate_bn(Supernet<T>& net, const EnsembleArchitecture& arch,
                    const Tensor<T>& probe) {
  if (probe.n() == 0) throw InputError("empty probe set for BN recalibration");
  auto visit = [&](ParamBlock<T>& b, const BlockCache<T>& c) {
    for (std::size_t i = 0; i < c.bn.size(); ++i) {
      b.bn[i].mean = c.bn[i].batch_mean;
      b.bn[i].var = c.bn[i].batch_var;
    }
  };
  EnsembleTrace<T> trace;
  forward_ensemble(net, arch, probe, Mode::calibrate, &trace);
  visit(net.stem(), trace.stem);
  for (int m = 1; m <= arch.split_point; ++m) {
    const auto& c = trace.prefix[static_cast<std::size_t>(m - 1)];
    if (c) visit(net.block(m, arch.op_at(0, m)), *c);
  }
  for (int p = 0; p < arch.k; ++p) {
    for (int m = arch.split_point + 1; m <= arch.depth(); ++m) {
      const auto& c = trace.paths[static_cast<std::size_t>(p)]
                                 [static_cast<std::size_t>(m - arch.split_point - 1)];
      if (c) visit(net.block(m, arch.op_at(p, m)), *c);
    }
  }
}

struct EvalResult {
  double ensemble_accuracy = 0.0;
  std::vector<double> path_accuracy;
};

inline int argmax_row(const double* row, int n) {
  int best = 0;
  for (int c = 1; c < n; ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

/// Eval-mode top-1 accuracy of the ensemble (mean of path softmaxes) and of
/// each path on its own.
template <typename T>
EvalResult evaluate_paths(const Supernet<T>& net, const EnsembleArchitecture& arch,
                          const Samples<T>& data, int batch_size = 256) {
  if (data.size() == 0) throw InputError("cannot evaluate on an empty split");
  EvalResult r;
  r.path_accuracy.assign(static_cast<std::size_t>(arch.k), 0.0);
  long correct = 0;
  std::vector<long> path_correct(static_cast<std::size_t>(arch.k), 0);
  const int bs = std::max(batch_size, 1);
  std::vector<double> row;
  for (int begin = 0; begin < data.size(); begin += bs) {
    const int end = std::min(data.size(), begin + bs);
    std::vector<std::size_t> idx;
    for (int i = begin; i < end; ++i) idx.push_back(static_cast<std::size_t>(i));
    const Tensor<T> x = gather_images(data.images, idx);
    const auto out = forward_ensemble(net, arch, x, Mode::eval);
    const int classes = out.ensemble.c();
    row.resize(static_cast<std::size_t>(classes));
    for (int n = 0; n < x.n(); ++n) {
      const int label = data.labels[static_cast<std::size_t>(begin + n)];
      for (int c = 0; c < classes; ++c) row[static_cast<std::size_t>(c)] = out.ensemble(n, c);
      correct += argmax_row(row.data(), classes) == label;
      for (int p = 0; p < arch.k; ++p) {
        for (int c = 0; c < classes; ++c) {
          row[static_cast<std::size_t>(c)] = out.probs[static_cast<std::size_t>(p)](n, c);
        }
        path_correct[static_cast<std::size_t>(p)] += argmax_row(row.data(), classes) == label;
      }
    }
  }
  r.ensemble_accuracy = static_cast<double>(correct) / data.size();
  for (int p = 0; p < arch.k; ++p) {
    r.path_accuracy[static_cast<std::size_t>(p)] =
        static_cast<double>(path_correct[static_cast<std::size_t>(p)]) / data.size();
  }
  return r;
}

/// Ensemble accuracy on `data`; with `probe`, BN statistics of the blocks
/// read by `arch` are recalibrated on it first.
template <typename T>
double evaluate(Supernet<T>& net, const EnsembleArchitecture& arch,
                const Samples<T>& data, const Tensor<T>* probe = nullptr,
                int batch_size = 256) {
  if (probe) recalibrate_bn(net, arch, *probe);
  return evaluate_paths(net, arch, data, batch_size).ensemble_accuracy;
}

/// Per-path pooled features averaged over the probe batch.
template <typename T>
std::vector<VectorX<T>> extract_features(const Supernet<T>& net,
                                         const EnsembleArchitecture& arch,
                                         const Tensor<T>& probe) {
  const auto out = forward_ensemble(net, arch, probe, Mode::eval);
  std::vector<VectorX<T>> v;
  for (const auto& f : out.features) {
    v.push_back(as_rows(f).colwise().mean().transpose());
  }
  return v;
}

/// Central-difference check of the combined-loss gradient of `arch` with
/// frozen (eval-mode) batch normalization, over every block read by `arch`.
template <typename T>
GradCheckResult grad_check(Supernet<T>& net, const EnsembleArchitecture& arch,
                           const Samples<T>& batch, double epsilon,
                           std::size_t per_tensor, std::uint64_t seed) {
  auto blocks = net.blocks_for(arch);
  for (auto* b : blocks) b->zero_grad();
  compute_gradients(net, arch, batch, Mode::eval, false);
  auto loss = [&]() {
    const auto out = forward_ensemble(net, arch, batch.images, Mode::eval);
    T total = 0;
    for (const auto& l : out.logits) total += softmax_cross_entropy(l, batch.labels).loss;
    return total;
  };
  Rng rng(seed);
  auto result = numeric_gradient_check<T>(blocks, loss, epsilon, per_tensor, rng);
  for (auto* b : blocks) b->zero_grad();
  return result;
}

/// Moves every BN scale and shift away from its init value (1, 0) by
/// U(-scale, scale). At init a zero input pixel sits exactly on a ReLU kink,
/// where central differences and the analytic gradient legitimately differ.
template <typename T>
void jitter_bn_affine(Supernet<T>& net, std::uint64_t seed, double scale = 0.1) {
  Rng rng(seed);
  for (auto* b : net.all_blocks()) {
    if (b->kind == BlockKind::head) continue;
    for (std::size_t i = 0; i < b->bn.size(); ++i) {
      for (std::size_t t : {3 * i + 1, 3 * i + 2}) {
        auto& w = b->weights[t];
        for (Eigen::Index e = 0; e < w.size(); ++e) {
          w[e] += static_cast<T>(rng.uniform(-scale, scale));
        }
      }
    }
  }
}

/// Binary checkpoint of every block (weights, momentum, BN statistics).
void save_supernet(const Supernet<double>& net, const std::string& path);
void load_supernet(Supernet<double>& net, const std::string& path);

extern template class Supernet<float>;
extern template class Supernet<double>;

}  // namespace neas
