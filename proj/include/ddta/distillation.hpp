#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "ddta/dataset.hpp"
#include "ddta/network.hpp"

namespace ddta {

struct TrainingHyperparameters {
  std::size_t batch_size = 128;
  double learning_rate = 0.01;
  double decay = 1e-6;
  double momentum = 0.9;
  std::size_t epochs = 10;
  double temperature = 1.0;
  double dropout_rate = 0.5;
  std::uint64_t seed = 1;

  /// Throws InvalidArgument unless every field is in range (epochs may be 0).
  void validate() const;
};

/// Mean training loss of each epoch, measured on the mini-batches as they
/// were seen (dropout active).
struct TrainingLog {
  std::vector<double> epoch_loss;
};

/// Hard-label training: batched negative log-likelihood of softmax_T outputs.
TrainedModel train_hard(const ArchitectureSpec& spec, const LabeledDataset& data,
                        const TrainingHyperparameters& hp, TrainingLog* log = nullptr);

/// Soft-label training: cross-entropy between the stored distributions and
/// the model's softmax_T output.
TrainedModel train_soft(const ArchitectureSpec& spec, const LabeledDataset& data,
                        const TrainingHyperparameters& hp, TrainingLog* log = nullptr);

/// Mean loss of `model` over `data` at temperature T with dropout disabled.
double dataset_loss(const TrainedModel& model, const LabeledDataset& data, double temperature);

/// Loss of one batch, as used by the training loop but without dropout.
double batch_loss(const TrainedModel& model, const Tensor<float>& images,
                  const Tensor<float>& labels, double temperature);

/// Replaces labels with predict(model, X, T). T must equal the model's
/// training temperature.
LabeledDataset generate_soft_labels(const TrainedModel& model, const LabeledDataset& data,
                                    double temperature);

struct DistillationPlan {
  ArchitectureSpec spec;
  std::uint32_t chain_length = 3;
  TrainingHyperparameters hp;
  /// Per-step seeds; empty means derive(hp.seed, step).
  std::vector<std::uint64_t> seeds;
  /// When set, step i is written to checkpoint_dir / "step{i}.ckpt" and its
  /// soft labels to checkpoint_dir / "step{i}.dslb".
  std::optional<std::filesystem::path> checkpoint_dir;
  /// Called with the step number before that step is trained.
  std::function<void(std::uint32_t)> on_step;

  std::uint64_t seed_for(std::uint32_t step) const;
};

/// model[0] = train_hard, model[i] = train_soft on model[i-1]'s soft labels.
/// With `teacher` given, step 1 is taken from it instead of being trained.
std::vector<TrainedModel> run_distillation_chain(const DistillationPlan& plan,
                                                 const LabeledDataset& data,
                                                 const TrainedModel* teacher = nullptr);

}  // namespace ddta
