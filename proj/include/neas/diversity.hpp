#pragma once

// Per-layer DPP kernels L_m = diag(r) S diag(r) estimated from sampled
// ensembles, determinant scoring of operator combinations, and the
// search-space shrinking loop.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "neas/archspace.hpp"
#include "neas/linalg.hpp"
#include "neas/supernet.hpp"

namespace neas {

enum class ShrinkMetric {
  diversity,  // det of the DPP kernel submatrix
  accuracy,   // quality only: S forced to the identity
  none,       // never shrink
};

std::string to_string(ShrinkMetric m);
ShrinkMetric shrink_metric_from_string(const std::string& s);

struct DiversityConfig {
  double beta = 1e-3;
  double gamma = 1.0;
  int samples = 20;         // Z ensembles per estimate
  int k_drop = 20;
  std::size_t threshold = 0;  // T; 0 selects one survivor per combo layer
  int epochs_between = 20;  // E
  ShrinkMetric metric = ShrinkMetric::diversity;

  std::size_t threshold_for(const SearchSpaceState& space) const;
  // Throws ConfigError.
  void validate(const SearchSpaceState& space) const;
};

struct LayerKernel {
  int layer = 0;
  std::vector<int> op_ids;  // candidate order of the layer
  Eigen::VectorXd r;
  Eigen::MatrixXd S;
  Eigen::MatrixXd L;
  Eigen::MatrixXi pair_counts;       // observed path pairs per entry of S
  std::vector<int> quality_counts;   // observed paths per entry of r

  int index_of(int op_id) const;
};

struct DiversityKernel {
  std::vector<LayerKernel> layers;  // one per combo layer, ascending

  const LayerKernel& layer(int m) const;
  bool has_layer(int m) const;
};

/// L = diag(r) S diag(r).
Eigen::MatrixXd dpp_kernel(const Eigen::VectorXd& r, const Eigen::MatrixXd& S);

/// Contribution of one path pair to S: exp(-beta * ||a - b||_2).
double path_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                       double beta);

struct PathObservation {
  std::vector<int> ops;  // operator per layer 1..d
  Eigen::VectorXd feature;
  double accuracy = 0.0;
};

struct EnsembleObservation {
  std::vector<PathObservation> paths;
};

/// Builds kernels for every combo layer of `space` from observations:
/// S_ij is the mean similarity over ordered path pairs p != q of one
/// ensemble whose layer-m operators are i and j; r_i is gamma times the
/// mean accuracy of the paths running operator i at layer m. Unobserved
/// entries take the mean of the observed entries of the same matrix.
/// Throws EstimationError when a layer has no path pairs at all.
DiversityKernel assemble_kernel(const SearchSpaceState& space,
                                const std::vector<EnsembleObservation>& obs,
                                const DiversityConfig& cfg);

/// Layers lacking any off-diagonal pair observation.
std::vector<int> unobserved_layers(const SearchSpaceState& space,
                                   const std::vector<EnsembleObservation>& obs);

struct EstimationData {
  const Samples<double>* quality = nullptr;   // ACC_train' split
  const Tensor<double>* probe = nullptr;      // BN recalibration + features
  int threads = 1;
  int batch_size = 256;
};

/// Samples Z ensembles from `space` (seeded by index), recalibrates BN on a
/// private copy of `net` for each, and records per-path features and
/// quality-split accuracies. When some combo layer ends up with no pair
/// observations, further ensembles are drawn, up to max(4Z, Z + 32) in
/// total, before giving up with EstimationError.
DiversityKernel estimate_kernel(const Supernet<double>& net,
                                const SearchSpaceState& space,
                                const DiversityConfig& cfg,
                                const EstimationData& data, std::uint64_t seed);

/// det of the K x K principal submatrix of L_m on the combination.
double score_combination(const DiversityKernel& kernel, int m,
                         const Combination& combo);
double score_combination(const LayerKernel& layer, const Combination& combo);

struct ScoredCombination {
  int layer = 0;
  Combination combo;
  double score = 0.0;
  int round = 0;
};

struct ShrinkReport {
  int round = 0;
  int epoch = 0;
  std::vector<ScoredCombination> dropped;
  std::size_t survivor_total = 0;
  bool performed = false;
  std::string notice;
};

/// Scores every survivor, then removes the k_drop globally lowest, never
/// emptying a layer. Ties: (score, layer, combo) ascending. A space already
/// at or below T is left untouched and the report carries a notice.
ShrinkReport shrink_round(SearchSpaceState& space, const DiversityKernel& kernel,
                          const DiversityConfig& cfg, int round, int epoch);

/// Same rule with scores supplied directly, keyed by (layer, combo).
ShrinkReport shrink_by_scores(SearchSpaceState& space,
                              const std::vector<ScoredCombination>& scores,
                              const DiversityConfig& cfg, int round, int epoch);

std::vector<ScoredCombination> score_survivors(const SearchSpaceState& space,
                                               const DiversityKernel& kernel,
                                               int round);

struct ScheduleHooks {
  std::function<void(int epoch)> train_epoch;
  std::function<DiversityKernel(int round, int epoch)> estimate;
  std::function<void(const ShrinkReport&)> on_round;
  std::function<void(int epoch, int next_round)> after_epoch;
};

struct ScheduleState {
  int next_epoch = 0;
  int next_round = 0;
};

struct ScheduleResult {
  std::vector<ShrinkReport> rounds;
  int epochs_trained = 0;
};

/// Trains `total_epochs` epochs; after every E-th epoch, while the space
/// holds more than T survivors, estimates kernels and shrinks once.
ScheduleResult run_shrinking_schedule(SearchSpaceState& space,
                                      const DiversityConfig& cfg,
                                      int total_epochs, const ScheduleHooks& hooks,
                                      ScheduleState start = {});

std::string shrink_report_json(const ShrinkReport& report);
void write_kernel_csv(std::ostream& os, const DiversityKernel& kernel);

// Property harness for the monotonicity of the score.

struct PropertyTrial {
  Eigen::VectorXd r;
  Eigen::MatrixXd S;
  std::vector<int> h;        // combination containing i
  std::vector<int> h_prime;  // same with i replaced by i'
  double score_h = 0.0;
  double score_h_prime = 0.0;
};

struct PropertyResult {
  int trials = 0;
  int passes = 0;
  std::optional<PropertyTrial> first_failure;
};

/// Draws hypothesis-satisfying trials: N points under a Laplacian kernel
/// give an exactly PSD S; operator i (in h) is strictly less similar than
/// i' to every other member of h and has strictly higher quality.
PropertyTrial draw_property_trial(int k, int n, Rng& rng);
PropertyResult verify_property(int trials, int k, int n, std::uint64_t seed);
std::string describe_trial(const PropertyTrial& t);

}  // namespace neas
