#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddta/network.hpp"

namespace ddta {

enum class Norm : std::uint8_t { kL0, kL2, kLinf };
enum class AttackMode : std::uint8_t { kTargeted, kUntargeted };

const char* to_string(Norm n);
const char* to_string(AttackMode m);
Norm parse_norm(const std::string& s);
AttackMode parse_mode(const std::string& s);

struct AttackConfig {
  Norm norm = Norm::kL2;
  AttackMode mode = AttackMode::kUntargeted;
  double kappa = 0.0;
  double learning_rate = 1e-2;
  std::size_t max_iterations = 1000;
  double initial_c = 1e-3;
  double c_threshold = 1e3;
  std::size_t random_starts = 1;
  std::uint64_t seed = 0;
  /// Stop an inner run when the loss has not dropped over a tenth of the
  /// iteration budget.
  bool abort_early = true;

  /// Desk defaults per norm.
  static AttackConfig defaults(Norm norm);
  /// Full-scale settings, including the literal L0 constant limit.
  static AttackConfig paper(Norm norm);

  void validate() const;
};

struct AttackResult {
  std::size_t sample_index = 0;
  std::size_t true_label = 0;
  /// Goal class in targeted mode; equal to true_label otherwise.
  std::size_t target = 0;
  AttackMode mode = AttackMode::kUntargeted;
  Norm norm = Norm::kL2;
  bool success = false;
  std::optional<Tensor<float>> adversarial;
  std::size_t l0 = 0;
  double l2 = 0.0;
  double linf = 0.0;
  double c_final = 0.0;
  std::size_t iterations = 0;
  std::size_t original_prediction = 0;
  std::size_t adversarial_prediction = 0;
  std::uint64_t seed = 0;
  /// Allowed-set size at the start of each L0 outer iteration.
  std::vector<std::size_t> allowed_trace;
  /// Threshold used by each L-infinity round.
  std::vector<double> tau_trace;
};

/// max(max_{i != t} Z_i - Z_t, -kappa)
double objective_f(std::span<const float> logits, std::size_t target, double kappa);
/// max(Z_y - max_{i != y} Z_i, -kappa)
double objective_f_untargeted(std::span<const float> logits, std::size_t label, double kappa);

/// Attack-goal predicate on final logits: the unclamped margin reaches kappa
/// and the argmax agrees with the goal (ties resolve by lowest index).
bool goal_reached(std::span<const float> logits, AttackMode mode, std::size_t cls,
                  double kappa);

struct SearchOutcome {
  double c_final = 0.0;
  bool success = false;
  std::size_t attempts = 0;
};

/// Runs `inner(c)` for c = initial, 2*initial, ... The first attempt always
/// runs; later ones only while c <= threshold. Stops at the first success.
SearchOutcome search_constant_c(double initial_c, double threshold,
                                const std::function<bool(double)>& inner);

/// `cls` is the true label (untargeted) or the target (targeted).
AttackResult attack_l2(const TrainedModel& model, const Tensor<float>& x, std::size_t label,
                       std::size_t cls, const AttackConfig& cfg);
AttackResult attack_l0(const TrainedModel& model, const Tensor<float>& x, std::size_t label,
                       std::size_t cls, const AttackConfig& cfg);
AttackResult attack_linf(const TrainedModel& model, const Tensor<float>& x, std::size_t label,
                         std::size_t cls, const AttackConfig& cfg);
/// Dispatches on cfg.norm.
AttackResult run_attack(const TrainedModel& model, const Tensor<float>& x, std::size_t label,
                        std::size_t cls, const AttackConfig& cfg);

/// Norms of x_adv - x: l0 counts spatial positions where any channel moved
/// by more than 1e-6.
struct PerturbationNorms {
  std::size_t l0 = 0;
  double l2 = 0.0;
  double linf = 0.0;
};
PerturbationNorms perturbation_norms(std::span<const float> x, std::span<const float> x_adv,
                                     const Shape& sample_shape);

/// Recomputes norms and the goal predicate from the stored image. Returns an
/// empty string when the record is consistent, else the first discrepancy.
std::string verify_result(const TrainedModel& model, const Tensor<float>& x,
                          const AttackResult& r, double kappa);

/// Column header and row for the per-attack CSV.
std::string attack_csv_header();
std::string attack_csv_row(const AttackResult& r);

}  // namespace ddta
