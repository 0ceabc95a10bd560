#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ddta/graph.hpp"
#include "ddta/layers.hpp"

namespace ddta {

enum class Preset : std::uint8_t { kPaper = 0, kDesk = 1 };

/// kCnn9 is the 4-conv / 2-pool / 3-dense classifier family. kDense is a
/// plain multilayer perceptron used for toy and oracle models.
enum class Family : std::uint8_t { kCnn9 = 0, kDense = 1 };

const char* to_string(Preset p);
Preset parse_preset(const std::string& s);

struct ArchitectureSpec {
  Family family = Family::kCnn9;
  Preset preset = Preset::kDesk;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t channels = 1;
  std::size_t kernel = 3;
  std::array<std::size_t, 4> conv_channels{16, 16, 32, 32};
  std::vector<std::size_t> dense_widths{128, 128};  // hidden layers
  std::size_t classes = 10;

  static ArchitectureSpec mnist(Preset preset);
  static ArchitectureSpec cifar10(Preset preset);
  static ArchitectureSpec perceptron(std::size_t height, std::size_t width,
                                     std::size_t channels,
                                     std::vector<std::size_t> hidden,
                                     std::size_t classes);

  Shape input_shape() const { return {channels, height, width}; }
  std::size_t input_size() const { return channels * height * width; }

  /// Full layer stack; throws InvalidArgument for an unrealizable spec.
  std::vector<LayerDescriptor> layers() const;
  std::vector<Shape> parameter_shapes() const;
  std::size_t parameter_count() const;

  std::vector<std::uint32_t> encode() const;
  static ArchitectureSpec decode(const std::vector<std::uint32_t>& words);

  bool operator==(const ArchitectureSpec&) const = default;
};

enum class Role : std::uint8_t { kTeacher, kAssistant, kStudent, kChainStep };

struct Provenance {
  Role role = Role::kTeacher;
  std::uint32_t step = 1;  // 1-based position in the distillation chain

  std::string label() const;  // "teacher", "assistant", "student", "step4"
  std::uint8_t encode() const;
  static Provenance decode(std::uint8_t tag);
  /// Naming for position `step` of a chain of length `chain_length`.
  static Provenance for_chain(std::uint32_t step, std::uint32_t chain_length);

  bool operator==(const Provenance&) const = default;
};

struct TrainedModel {
  ArchitectureSpec spec;
  std::vector<Tensor<float>> parameters;
  double temperature = 1.0;  // training temperature
  Provenance provenance;
  std::uint64_t seed = 0;
};

/// He-style uniform weights (bound sqrt(6 / fan_in)) and zero biases drawn
/// from a counter-based stream keyed by `seed`.
TrainedModel build_model(const ArchitectureSpec& spec, std::uint64_t seed);

struct ForwardNodes {
  std::size_t logits = 0;
  std::vector<std::size_t> parameters;
};

/// Builds the model's forward pass on `g` starting from `input` ([B,C,H,W]).
/// Float graphs borrow the model's parameter storage; double graphs hold
/// widened copies.
template <typename Real>
ForwardNodes forward(Graph<Real>& g, const TrainedModel& model,
                     std::size_t input, const ForwardMode& mode = {},
                     bool parameters_require_grad = false);

/// Raw pre-softmax outputs, [B, N]. Processes large batches in chunks.
Tensor<float> logits(const TrainedModel& model, const Tensor<float>& batch);

/// softmax(logits / T) per row, [B, N].
Tensor<float> predict(const TrainedModel& model, const Tensor<float>& batch,
                      double temperature = 1.0);

enum class HeadSpace { kLogits, kProbabilities };

/// Builds a scalar from the logits or probabilities node.
template <typename Real>
using ScalarHead = std::function<std::size_t(Graph<Real>&, std::size_t)>;

/// d head(...) / d X for a single sample X of shape [1,C,H,W] or [C,H,W].
template <typename Real>
Tensor<Real> input_gradient(const TrainedModel& model, const Tensor<Real>& x,
                            const ScalarHead<Real>& head, double temperature,
                            HeadSpace space);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const TrainedModel& model);
TrainedModel decode_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace ddta
