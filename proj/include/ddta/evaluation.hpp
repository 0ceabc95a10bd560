#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ddta/attacks.hpp"
#include "ddta/dataset.hpp"
#include "ddta/network.hpp"

namespace ddta {

/// Fraction of samples whose T=1 argmax equals the ground truth.
double accuracy(const TrainedModel& model, const LabeledDataset& data);

/// Mean over samples of max_i F_i(X) when the argmax is correct, else 0.
double confidence(const TrainedModel& model, const LabeledDataset& data);

struct SensitivityProfile {
  std::string model_id;
  double temperature = 1.0;
  double threshold = 1e-10;
  /// Per sample: mean |dF_i/dX_j| over all outputs i and inputs j.
  std::vector<double> mean_magnitude;
  /// Per output i: max |dF_i/dX_j| over samples and inputs.
  std::vector<double> output_max;
  double near_zero_proportion = 0.0;

  double proportion_below(double threshold) const;
};

/// Jacobian of softmax_T(logits) w.r.t. the input, one backward pass per
/// output, over the first `sample_count` samples of `data`.
SensitivityProfile sensitivity_profile(const TrainedModel& model, const LabeledDataset& data,
                                       double temperature, double threshold = 1e-10,
                                       std::size_t sample_count = std::numeric_limits<std::size_t>::max(),
                                       std::size_t workers = 1);

struct RobustnessReport {
  std::string model_id;
  Norm norm = Norm::kL2;
  AttackMode mode = AttackMode::kUntargeted;
  /// One entry per attacked sample, in sample order.
  std::vector<AttackResult> results;
  /// Successful perturbation sizes in the attack's own norm.
  std::vector<double> perturbations;
  double mean = 0.0;
  double max = 0.0;
  double min = 0.0;
  double success_rate = 0.0;
  std::size_t failed = 0;
  bool mean_defined = false;

  std::size_t attempted() const { return results.size(); }
};

/// Perturbation size of a successful result in `norm`.
double perturbation_size(const AttackResult& r, Norm norm);

/// Attacks the first `sample_count` correctly classified samples of `data`
/// (untargeted only). Sample i uses seed derive(cfg.seed, row).
RobustnessReport robustness(const TrainedModel& model, const LabeledDataset& data,
                            const AttackConfig& cfg, std::size_t sample_count,
                            std::size_t workers = 1, std::string model_id = {});

/// Summary statistics over the successful entries of `results`.
RobustnessReport summarize(std::vector<AttackResult> results, Norm norm, AttackMode mode,
                           std::string model_id);

/// Ranks starting at 1, tied values sharing their average rank.
std::vector<double> average_ranks(std::span<const double> v);

/// Spearman rank correlation; 0 when either side is constant.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace ddta
