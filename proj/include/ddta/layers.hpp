#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "ddta/graph.hpp"

namespace ddta {

enum class LayerKind : std::uint8_t {
  kConv2d,
  kMaxPool2d,
  kDense,
  kRelu,
  kTanh,
  kFlatten,
  kDropout,
};

const char* to_string(LayerKind kind);

struct LayerDescriptor {
  LayerKind kind = LayerKind::kRelu;
  std::string name;
  Shape input_shape;   // per sample, batch dimension excluded
  Shape output_shape;  // per sample
  std::size_t kernel = 0;   // conv only

  std::size_t parameter_count() const {
    return kind == LayerKind::kConv2d || kind == LayerKind::kDense ? 2 : 0;
  }
};

/// Dropout is the identity unless `training` is set; masks are a pure
/// function of `dropout_key` and the layer index.
struct ForwardMode {
  bool training = false;
  double dropout_rate = 0.0;
  std::uint64_t dropout_key = 0;
};

/// Applies one layer. `params` holds the layer's weight and bias node ids
/// (empty for parameter-free layers). Throws ShapeError naming the layer when
/// the input does not match `layer.input_shape`.
template <typename Real>
std::size_t layer_forward(Graph<Real>& g, const LayerDescriptor& layer,
                          std::size_t input, std::span<const std::size_t> params,
                          const ForwardMode& mode = {},
                          std::size_t layer_index = 0);

}  // namespace ddta
