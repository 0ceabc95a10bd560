#include "ddta/layers.hpp"

#include "ddta/rng.hpp"

namespace ddta {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kMaxPool2d: return "maxpool2d";
    case LayerKind::kDense: return "dense";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kTanh: return "tanh";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kDropout: return "dropout";
  }
  return "unknown";
}

template <typename Real>
std::size_t layer_forward(Graph<Real>& g, const LayerDescriptor& layer,
                          std::size_t input, std::span<const std::size_t> params,
                          const ForwardMode& mode, std::size_t layer_index) {
  const Shape& in = g.shape(input);
  const bool matches =
      in.size() == layer.input_shape.size() + 1 &&
      std::equal(layer.input_shape.begin(), layer.input_shape.end(), in.begin() + 1);
  if (!matches) {
    throw ShapeError("layer '" + layer.name + "' (" + to_string(layer.kind) +
                     ") expects input [B]" + shape_string(layer.input_shape) +
                     ", got " + shape_string(in));
  }
  if (params.size() != layer.parameter_count()) {
    throw InvalidArgument("layer '" + layer.name + "' expects " +
                          std::to_string(layer.parameter_count()) +
                          " parameter nodes, got " + std::to_string(params.size()));
  }
  switch (layer.kind) {
    case LayerKind::kConv2d:
      return conv2d(g, input, params[0], params[1]);
    case LayerKind::kMaxPool2d:
      return maxpool2d(g, input);
    case LayerKind::kDense:
      return dense(g, input, params[0], params[1]);
    case LayerKind::kRelu:
      return relu(g, input);
    case LayerKind::kTanh:
      return tanh(g, input);
    case LayerKind::kFlatten:
      return flatten(g, input);
    case LayerKind::kDropout: {
      if (!mode.training || mode.dropout_rate <= 0.0) return input;
      const double keep = 1.0 - mode.dropout_rate;
      const std::size_t n = g.value(input).size();
      std::vector<Real> mask(n);
      rng::CounterRng r(rng::derive(mode.dropout_key, layer_index));
      for (auto& m : mask) m = r.uniform() < keep ? Real(1.0 / keep) : Real(0);
      return dropout(g, input, std::move(mask));
    }
  }
  throw InvalidArgument("unknown layer kind");
}

template std::size_t layer_forward<float>(Graph<float>&, const LayerDescriptor&,
                                          std::size_t, std::span<const std::size_t>,
                                          const ForwardMode&, std::size_t);
template std::size_t layer_forward<double>(Graph<double>&, const LayerDescriptor&,
                                           std::size_t, std::span<const std::size_t>,
                                           const ForwardMode&, std::size_t);

}  // namespace ddta
