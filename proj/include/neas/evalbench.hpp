#pragma once

// Toy datasets, a synthetic fitness landscape for search tests, Kendall
// tau-b, and the inherited-vs-scratch rank correlation study.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "neas/archspace.hpp"
#include "neas/supernet.hpp"

namespace neas {

// ---------------------------------------------------------------------------
// Datasets.

struct DataParams {
  int classes = 4;
  int channels = 1;
  int image_size = 16;
  int train_per_class = 256;
  int val_per_class = 64;
  int quality_size = 1024;  // total over classes
  int probe_size = 512;     // total over classes
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::string external_images;  // IDX files; empty selects the generator
  std::string external_labels;

  void validate() const;  // throws ConfigError
};

struct ToyDataset {
  DataParams params;
  Samples<double> train;
  Samples<double> val;
  Samples<double> quality;
  Samples<double> probe;

  const Samples<double>& split(const std::string& name) const;
  std::uint64_t digest() const;
};

/// Class prototypes are oriented sinusoidal gratings with a class-specific
/// Gaussian blob; every sample adds N(0, noise^2) pixel noise. Sample i of
/// every split has class i mod classes.
ToyDataset generate_dataset(const DataParams& params);

/// Binary tensor dump plus a JSON manifest {params, digest} next to it
/// (`path` and `path.json`).
void save_dataset(const ToyDataset& data, const std::string& path);
ToyDataset load_dataset(const std::string& path);

/// IDX (idx3-ubyte images, idx1-ubyte labels) reader; pixels scaled to
/// [0, 1]. Splits are carved per class in file order.
ToyDataset load_idx_dataset(const DataParams& params);

std::uint64_t samples_digest(const Samples<double>& s, std::uint64_t h);

// ---------------------------------------------------------------------------
// Synthetic fitness.

/// fitness = 1 / (1 + exp(-sharpness * (z - 0.5))), with
///   z = (1/d) [ sum_{m<=s} u(m, o_m) + sum_{m>s} (1/K) sum_i u(m, h_i) ]
///       + (lambda/d) sum_{m>s} mean_{i<j} delta(m, h_i, h_j)
///       - mu * cost / cost_ref
/// where u and delta are uniform [0, 1) tables drawn from the seed and
/// delta(m, o, o) = 0.
class SurrogateOracle {
 public:
  SurrogateOracle(const SearchSpaceState& space, std::uint64_t seed,
                  double diversity_weight = 0.5, double cost_weight = 0.0,
                  double cost_ref = 1.0, CostModel cost_model = {},
                  double sharpness = 4.0);

  double operator()(const EnsembleArchitecture& arch) const;

  double gene_score(int m, int op_id) const;
  double pair_bonus(int m, int a, int b) const;
  double diversity_weight() const { return diversity_weight_; }
  double cost_weight() const { return cost_weight_; }
  double cost_ref() const { return cost_ref_; }
  double sharpness() const { return sharpness_; }
  const CostModel& cost_model() const { return cost_model_; }

 private:
  std::vector<std::vector<int>> op_ids_;       // per layer
  std::vector<std::vector<double>> gene_;      // per layer, per op index
  std::vector<Eigen::MatrixXd> delta_;         // per layer
  double diversity_weight_;
  double cost_weight_;
  double cost_ref_;
  CostModel cost_model_;
  double sharpness_;

  int index(int m, int op_id) const;
};

// ---------------------------------------------------------------------------
// Rank correlation.

/// Tau-b by Knight's O(n log n) algorithm. Throws InputError for fewer than
/// two pairs or when either ranking is entirely tied.
double kendall_tau(const std::vector<double>& x, const std::vector<double>& y);

struct RankReport {
  std::vector<EnsembleArchitecture> archs;
  std::vector<double> inherited;  // fitness A
  std::vector<double> scratch;    // fitness B
  std::vector<std::string> skipped;
  double tau = 0.0;
  int n = 0;
};

struct RetrainConfig {
  TrainConfig train{0.1, LrSchedule::linear, 0.9, 4e-5, 32, 10};
  int batch_size_eval = 256;
};

/// Trains a fresh copy of the plan on `arch` alone and returns its
/// validation accuracy with recalibrated BN.
double scratch_fitness(const NetworkPlan& plan, const EnsembleArchitecture& arch,
                       const ToyDataset& data, const RetrainConfig& cfg,
                       std::uint64_t seed);

/// Inherited-weight accuracy of `arch` (BN recalibrated on the probe set).
double inherited_fitness(const Supernet<double>& net,
                         const EnsembleArchitecture& arch, const ToyDataset& data,
                         int batch_size = 256);

/// Scratch fitness values of `archs`, computed on parallel workers.
/// Failed trainings yield NaN and a message in `errors`.
std::vector<double> scratch_fitness_all(const NetworkPlan& plan,
                                        const std::vector<EnsembleArchitecture>& archs,
                                        const ToyDataset& data,
                                        const RetrainConfig& cfg,
                                        std::uint64_t seed, int threads,
                                        std::vector<std::string>* errors = nullptr);

/// Pairs inherited fitness from `net` with precomputed scratch fitness.
RankReport rank_report(const Supernet<double>& net,
                       const std::vector<EnsembleArchitecture>& archs,
                       const std::vector<double>& scratch, const ToyDataset& data,
                       int threads);

RankReport rank_correlation_study(const Supernet<double>& net,
                                  const SearchSpaceState& space, int n_archs,
                                  const ToyDataset& data, const RetrainConfig& cfg,
                                  std::uint64_t seed, int threads);

void write_rank_csv(std::ostream& os, const RankReport& r);
std::string rank_summary_json(const RankReport& r);

}  // namespace neas
