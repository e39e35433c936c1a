#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "neas/rng.hpp"

namespace neas {

enum class OpKind { conv, skip };

struct OperatorSpec {
  int op_id = 0;
  OpKind kind = OpKind::conv;
  int kernel_size = 3;
  int expansion = 1;

  bool has_params() const { return kind == OpKind::conv; }
  bool operator==(const OperatorSpec&) const = default;
};

// One searchable layer of the supernet body. `index` is 1-based; spatial
// sizes are square.
struct LayerSpec {
  int index = 1;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  int in_size = 0;
  std::vector<OperatorSpec> candidates;

  int out_size() const { return (in_size + stride - 1) / stride; }
  bool allows_skip() const {
    return stride == 1 && in_channels == out_channels;
  }
  const OperatorSpec* find(int op_id) const;
};

// Sorted tuple of op ids for one post-split layer. Canonical combinations
// hold K distinct ids in increasing order; mirrored (homogeneous) ones may
// repeat an id and are never part of a search space.
class Combination {
 public:
  Combination() = default;

  // Sorts `ops`; throws InvariantError on repeated ids.
  static Combination canonical(std::vector<int> ops);
  // Sorts `ops`, repetition allowed.
  static Combination multiset(std::vector<int> ops);

  const std::vector<int>& ops() const { return ops_; }
  int size() const { return static_cast<int>(ops_.size()); }
  int operator[](int i) const { return ops_[static_cast<std::size_t>(i)]; }
  bool contains(int op_id) const;
  bool distinct() const;

  auto operator<=>(const Combination&) const = default;

 private:
  std::vector<int> ops_;
};

struct EnsembleArchitecture {
  int k = 1;
  int split_point = 1;
  std::vector<int> shared_ops;             // layers 1..s
  std::vector<Combination> split_combos;   // layers s+1..d
  bool searchable = true;                  // false after mirror_homogeneous

  int depth() const {
    return split_point + static_cast<int>(split_combos.size());
  }
  // Operator of path `path` (0-based) at layer `m` (1-based).
  int op_at(int path, int m) const;
  // All d operators of one path.
  std::vector<int> path_ops(int path) const;

  bool operator==(const EnsembleArchitecture& o) const {
    return k == o.k && split_point == o.split_point &&
           shared_ops == o.shared_ops && split_combos == o.split_combos;
  }
  auto operator<=>(const EnsembleArchitecture& o) const {
    if (auto c = k <=> o.k; c != 0) return c;
    if (auto c = split_point <=> o.split_point; c != 0) return c;
    if (auto c = shared_ops <=> o.shared_ops; c != 0) return c;
    return split_combos <=> o.split_combos;
  }
};

class SearchSpaceState {
 public:
  SearchSpaceState() = default;

  // All K-subsets of each layer's candidates survive; shared candidates are
  // every operator of the layer.
  static SearchSpaceState full(std::vector<LayerSpec> layers, int k,
                               int s_min, int s_max);

  int depth() const { return static_cast<int>(layers_.size()); }
  int k() const { return k_; }
  int s_min() const { return s_min_; }
  int s_max() const { return s_max_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(int m) const { return layers_.at(m - 1); }

  // Layers that ever carry combinations: s_min+1..d.
  bool has_combos(int m) const { return m > s_min_ && m <= depth(); }
  const std::vector<Combination>& survivors(int m) const;
  const std::vector<int>& shared_candidates(int m) const;

  std::size_t total_survivors() const;
  bool contains(const EnsembleArchitecture& arch) const;
  // Throws InvariantError describing the first violated invariant.
  void validate(const EnsembleArchitecture& arch) const;

  // Removes one surviving combination; refuses to empty a layer.
  void remove(int m, const Combination& combo);
  // Replaces a layer's survivor set (checkpoint restore). Must be a
  // non-empty subset of the current set.
  void restrict(int m, std::vector<Combination> survivors);

  std::uint64_t digest() const;

 private:
  std::vector<LayerSpec> layers_;
  int k_ = 1;
  int s_min_ = 1;
  int s_max_ = 1;
  std::vector<std::vector<Combination>> survivors_;   // index m-1
  std::vector<std::vector<int>> shared_candidates_;   // index m-1
};

// All K-subsets of `ids` (sorted input gives lexicographic order).
std::vector<Combination> k_subsets(const std::vector<int>& ids, int k);

EnsembleArchitecture sample_uniform(const SearchSpaceState& space, Rng& rng);
EnsembleArchitecture sample_uniform(const SearchSpaceState& space,
                                    std::uint64_t seed);

// Every architecture of the space, ordered by (s, shared ops, combos).
std::vector<EnsembleArchitecture> enumerate_space(
    const SearchSpaceState& space);

struct CostModel {
  std::vector<std::map<int, double>> op_cost;  // index m-1, op_id -> MACs
  double stem = 0.0;
  double head = 0.0;
  double constraint = std::numeric_limits<double>::infinity();

  double layer_cost(int m, int op_id) const;
};

struct StemSpec {
  int in_channels = 1;
  int out_channels = 8;
  int stride = 1;
  int in_size = 16;
  int kernel_size = 3;
};

// Closed-form multiply-accumulate counts for the toy operator family.
double conv_op_macs(const LayerSpec& layer, const OperatorSpec& op);
CostModel analytic_cost_model(const StemSpec& stem,
                              const std::vector<LayerSpec>& layers,
                              int num_classes);

double ensemble_cost(const EnsembleArchitecture& arch, const CostModel& cm);

enum class SizeCounting {
  with_repetition,   // prod_m N_m^K * |split range|
  ordered_distinct,  // prod_m N_m!/(N_m-K)! * |split range|
  survivors,         // exact count of architectures in the current space
};

struct SpaceSize {
  boost::multiprecision::cpp_int exact;
  double log10 = 0.0;
};

SpaceSize space_size(const SearchSpaceState& space, SizeCounting counting);

EnsembleArchitecture mirror_homogeneous(const EnsembleArchitecture& arch,
                                        int path_index);

// Single-line JSON architecture record:
// {"version":1,"k":..,"split_point":..,"shared_ops":[..],"split_combos":[[..]]}
inline constexpr int kRecordVersion = 1;
std::string serialize_architecture(const EnsembleArchitecture& arch);
// Structural checks only; throws ParseError.
EnsembleArchitecture parse_architecture(std::string_view text);
// Also validates against `space`; throws ParseError.
EnsembleArchitecture parse_architecture(std::string_view text,
                                        const SearchSpaceState& space);

}  // namespace neas
