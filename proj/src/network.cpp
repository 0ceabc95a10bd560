#include "ddta/network.hpp"

#include <algorithm>
#include <cmath>

#include "ddta/binary_io.hpp"
#include "ddta/rng.hpp"

namespace ddta {

const char* to_string(Preset p) { return p == Preset::kPaper ? "paper" : "desk"; }

Preset parse_preset(const std::string& s) {
  if (s == "paper") return Preset::kPaper;
  if (s == "desk") return Preset::kDesk;
  throw InvalidArgument("unknown preset '" + s + "' (expected paper or desk)");
}

ArchitectureSpec ArchitectureSpec::mnist(Preset preset) {
  ArchitectureSpec s;
  s.preset = preset;
  s.height = s.width = 28;
  s.channels = 1;
  if (preset == Preset::kPaper) {
    s.conv_channels = {32, 32, 64, 64};
    s.dense_widths = {200, 200};
  }
  return s;
}

ArchitectureSpec ArchitectureSpec::cifar10(Preset preset) {
  ArchitectureSpec s;
  s.preset = preset;
  s.height = s.width = 32;
  s.channels = 3;
  if (preset == Preset::kPaper) {
    s.conv_channels = {64, 64, 128, 128};
    s.dense_widths = {256, 256};
  }
  return s;
}

ArchitectureSpec ArchitectureSpec::perceptron(std::size_t height, std::size_t width,
                                              std::size_t channels,
                                              std::vector<std::size_t> hidden,
                                              std::size_t classes) {
  ArchitectureSpec s;
  s.family = Family::kDense;
  s.height = height;
  s.width = width;
  s.channels = channels;
  s.kernel = 0;
  s.conv_channels = {0, 0, 0, 0};
  s.dense_widths = std::move(hidden);
  s.classes = classes;
  return s;
}

std::vector<LayerDescriptor> ArchitectureSpec::layers() const {
  if (height == 0 || width == 0 || channels == 0) {
    throw InvalidArgument("architecture: input dimensions must be positive");
  }
  if (classes < 2) throw InvalidArgument("architecture: need at least 2 classes");
  std::vector<LayerDescriptor> out;
  Shape cur = input_shape();
  auto push = [&](LayerKind kind, std::string name, Shape next, std::size_t k = 0) {
    out.push_back({kind, std::move(name), cur, next, k});
    cur = std::move(next);
  };

  if (family == Family::kCnn9) {
    if (dense_widths.size() != 2) {
      throw InvalidArgument("architecture: the 9-layer family needs exactly 2 hidden dense layers");
    }
    if (kernel == 0) throw InvalidArgument("architecture: kernel size must be positive");
    auto conv = [&](std::size_t idx) {
      const std::size_t oc = conv_channels[idx];
      if (oc == 0) throw InvalidArgument("architecture: conv channel count must be positive");
      if (cur[1] < kernel || cur[2] < kernel) {
        throw InvalidArgument("architecture: conv" + std::to_string(idx + 1) + " kernel " +
                              std::to_string(kernel) + " does not fit input " +
                              shape_string(cur));
      }
      push(LayerKind::kConv2d, "conv" + std::to_string(idx + 1),
           {oc, cur[1] - kernel + 1, cur[2] - kernel + 1}, kernel);
      push(LayerKind::kRelu, "relu_conv" + std::to_string(idx + 1), cur);
    };
    auto pool = [&](std::size_t idx) {
      if (cur[1] < 2 || cur[2] < 2) {
        throw InvalidArgument("architecture: pool" + std::to_string(idx) +
                              " input too small " + shape_string(cur));
      }
      push(LayerKind::kMaxPool2d, "pool" + std::to_string(idx), {cur[0], cur[1] / 2, cur[2] / 2});
    };
    conv(0);
    conv(1);
    pool(1);
    conv(2);
    conv(3);
    pool(2);
  }
  push(LayerKind::kFlatten, "flatten", {numel(cur)});
  for (std::size_t i = 0; i < dense_widths.size(); ++i) {
    if (dense_widths[i] == 0) throw InvalidArgument("architecture: dense width must be positive");
    const auto n = std::to_string(i + 1);
    push(LayerKind::kDense, "dense" + n, {dense_widths[i]});
    push(LayerKind::kRelu, "relu_dense" + n, cur);
    push(LayerKind::kDropout, "dropout" + n, cur);
  }
  push(LayerKind::kDense, "logits", {classes});
  return out;
}

std::vector<Shape> ArchitectureSpec::parameter_shapes() const {
  std::vector<Shape> shapes;
  for (const auto& l : layers()) {
    if (l.kind == LayerKind::kConv2d) {
      shapes.push_back({l.output_shape[0], l.input_shape[0], l.kernel, l.kernel});
      shapes.push_back({l.output_shape[0]});
    } else if (l.kind == LayerKind::kDense) {
      shapes.push_back({l.output_shape[0], l.input_shape[0]});
      shapes.push_back({l.output_shape[0]});
    }
  }
  return shapes;
}

std::size_t ArchitectureSpec::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : parameter_shapes()) n += numel(s);
  return n;
}

std::vector<std::uint32_t> ArchitectureSpec::encode() const {
  std::vector<std::uint32_t> w = {
      std::uint32_t(family), std::uint32_t(preset),  std::uint32_t(height),
      std::uint32_t(width),  std::uint32_t(channels), std::uint32_t(kernel),
      std::uint32_t(classes), 4};
  for (auto c : conv_channels) w.push_back(std::uint32_t(c));
  w.push_back(std::uint32_t(dense_widths.size()));
  for (auto d : dense_widths) w.push_back(std::uint32_t(d));
  return w;
}

ArchitectureSpec ArchitectureSpec::decode(const std::vector<std::uint32_t>& w) {
  auto bad = [](const std::string& why) {
    return FormatError(FormatErrorKind::kCorrupt, "architecture block: " + why);
  };
  if (w.size() < 13) throw bad("too short");
  if (w[0] > 1) throw bad("unknown family " + std::to_string(w[0]));
  if (w[1] > 1) throw bad("unknown preset " + std::to_string(w[1]));
  if (w[7] != 4) throw bad("expected 4 conv entries");
  ArchitectureSpec s;
  s.family = Family(w[0]);
  s.preset = Preset(w[1]);
  s.height = w[2];
  s.width = w[3];
  s.channels = w[4];
  s.kernel = w[5];
  s.classes = w[6];
  for (std::size_t i = 0; i < 4; ++i) s.conv_channels[i] = w[8 + i];
  const std::size_t nd = w[12];
  if (w.size() != 13 + nd) throw bad("dense width count disagrees with block length");
  s.dense_widths.assign(w.begin() + 13, w.end());
  try {
    (void)s.layers();
  } catch (const InvalidArgument& e) {
    throw bad(e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------

std::string Provenance::label() const {
  switch (role) {
    case Role::kTeacher: return "teacher";
    case Role::kAssistant: return "assistant";
    case Role::kStudent: return "student";
    case Role::kChainStep: return "step" + std::to_string(step);
  }
  return "unknown";
}

// Tag layout: role in bits 5-6, chain step (1..31) in bits 0-4.
std::uint8_t Provenance::encode() const {
  if (step < 1 || step > 31) throw InvalidArgument("provenance step out of range");
  return std::uint8_t((std::uint32_t(role) << 5) | step);
}

Provenance Provenance::decode(std::uint8_t tag) {
  const std::uint32_t role = tag >> 5;
  const std::uint32_t step = tag & 0x1fu;
  if ((tag & 0x80u) || step == 0 || (role == 0 && step != 1)) {
    throw FormatError(FormatErrorKind::kCorrupt, "unknown provenance tag " + std::to_string(tag));
  }
  return {Role(role), step};
}

Provenance Provenance::for_chain(std::uint32_t step, std::uint32_t chain_length) {
  if (step == 1) return {Role::kTeacher, 1};
  if (chain_length == 2 && step == 2) return {Role::kStudent, 2};
  if (chain_length == 3 && step == 2) return {Role::kAssistant, 2};
  if (chain_length == 3 && step == 3) return {Role::kStudent, 3};
  return {Role::kChainStep, step};
}

// ---------------------------------------------------------------------------

TrainedModel build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  TrainedModel m;
  m.spec = spec;
  m.seed = seed;
  const auto shapes = spec.parameter_shapes();
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    Tensor<float> t(shapes[k]);
    if (shapes[k].size() > 1) {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < shapes[k].size(); ++d) fan_in *= shapes[k][d];
      const double bound = std::sqrt(6.0 / double(fan_in));
      rng::CounterRng r(rng::derive(seed, k));
      for (auto& v : t.storage()) v = static_cast<float>(r.uniform(-bound, bound));
    }
    m.parameters.push_back(std::move(t));
  }
  return m;
}

template <typename Real>
ForwardNodes forward(Graph<Real>& g, const TrainedModel& model, std::size_t input,
                     const ForwardMode& mode, bool parameters_require_grad) {
  const auto layers = model.spec.layers();
  ForwardNodes nodes;
  nodes.parameters.reserve(model.parameters.size());
  for (const auto& p : model.parameters) {
    if constexpr (std::is_same_v<Real, float>) {
      nodes.parameters.push_back(g.borrow(p.data(), p.shape(), parameters_require_grad));
    } else {
      nodes.parameters.push_back(g.input(p.template cast<Real>(), parameters_require_grad));
    }
  }
  std::size_t cur = input;
  std::size_t next_param = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::size_t np = l.parameter_count();
    std::span<const std::size_t> params(nodes.parameters.data() + next_param, np);
    cur = layer_forward(g, l, cur, params, mode, i);
    next_param += np;
  }
  nodes.logits = cur;
  return nodes;
}

namespace {

void check_batch(const TrainedModel& model, const Tensor<float>& batch) {
  const Shape want = model.spec.input_shape();
  const Shape& got = batch.shape();
  if (got.size() != 4 || !std::equal(want.begin(), want.end(), got.begin() + 1)) {
    throw ShapeError("model expects batch [B]" + shape_string(want) + ", got " +
                     shape_string(got));
  }
}

constexpr std::size_t kChunk = 256;

}  // namespace

Tensor<float> logits(const TrainedModel& model, const Tensor<float>& batch) {
  check_batch(model, batch);
  const std::size_t B = batch.shape()[0];
  const std::size_t per = model.spec.input_size();
  const std::size_t N = model.spec.classes;
  Tensor<float> out(Shape{B, N});
  for (std::size_t start = 0; start < B; start += kChunk) {
    const std::size_t n = std::min(kChunk, B - start);
    Graph<float> g;
    Shape s = batch.shape();
    s[0] = n;
    const auto x = g.borrow(batch.data().subspan(start * per, n * per), s);
    const auto f = forward(g, model, x);
    auto z = g.value(f.logits);
    std::copy(z.begin(), z.end(), out.data().begin() + std::ptrdiff_t(start * N));
  }
  return out;
}

Tensor<float> predict(const TrainedModel& model, const Tensor<float>& batch,
                      double temperature) {
  auto z = logits(model, batch);
  Graph<float> g;
  const auto zn = g.borrow(z.data(), z.shape());
  const auto p = softmax(g, zn, temperature);
  auto pv = g.value(p);
  return Tensor<float>(z.shape(), std::vector<float>(pv.begin(), pv.end()));
}

template <typename Real>
Tensor<Real> input_gradient(const TrainedModel& model, const Tensor<Real>& x,
                            const ScalarHead<Real>& head, double temperature,
                            HeadSpace space) {
  const Shape want = model.spec.input_shape();
  Shape batched = x.shape();
  if (batched.size() == 3) batched.insert(batched.begin(), 1);
  if (batched.size() != 4 || batched[0] != 1 ||
      !std::equal(want.begin(), want.end(), batched.begin() + 1)) {
    throw ShapeError("input_gradient expects a single sample " + shape_string(want) +
                     ", got " + shape_string(x.shape()));
  }
  Graph<Real> g;
  const auto in = g.input(x.reshaped(batched), true);
  const auto f = forward(g, model, in);
  const auto out = space == HeadSpace::kProbabilities ? softmax(g, f.logits, temperature)
                                                      : f.logits;
  const auto s = head(g, out);
  if (g.value(s).size() != 1) {
    throw InvalidArgument("input_gradient: head must produce a scalar, got " +
                          shape_string(g.shape(s)));
  }
  g.backward(s);
  auto gr = g.grad(in);
  std::vector<Real> data(x.size(), Real(0));
  if (!gr.empty()) std::copy(gr.begin(), gr.end(), data.begin());
  return Tensor<Real>(x.shape(), std::move(data));
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const TrainedModel& model) {
  io::Writer w;
  w.bytes("DDTA", 4);
  w.u32(kCheckpointVersion);
  w.f32(static_cast<float>(model.temperature));
  w.u8(model.provenance.encode());
  w.u64(model.seed);
  const auto words = model.spec.encode();
  w.u32(std::uint32_t(words.size()));
  for (auto v : words) w.u32(v);
  for (const auto& p : model.parameters) {
    w.u8(std::uint8_t(p.rank()));
    for (auto d : p.shape()) w.u32(std::uint32_t(d));
    for (auto v : p.data()) w.f32(v);
  }
  return std::move(w.buffer());
}

TrainedModel decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::Reader r(bytes, "checkpoint");
  if (bytes.size() < 4 && std::memcmp(bytes.data(), "DDTA", bytes.size()) == 0) {
    throw FormatError(FormatErrorKind::kTruncated, "checkpoint shorter than its magic");
  }
  if (std::memcmp(bytes.data(), "DDTA", 4) != 0) {
    throw FormatError(FormatErrorKind::kBadMagic, "checkpoint does not start with DDTA");
  }
  r.take(4);
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch,
                      "checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  TrainedModel m;
  m.temperature = r.f32();
  m.provenance = Provenance::decode(r.u8());
  m.seed = r.u64();
  const auto nwords = r.u32();
  r.need(std::size_t(nwords) * 4);
  std::vector<std::uint32_t> words(nwords);
  for (auto& v : words) v = r.u32();
  m.spec = ArchitectureSpec::decode(words);
  for (const auto& want : m.spec.parameter_shapes()) {
    const auto rank = r.u8();
    Shape got(rank);
    for (auto& d : got) d = r.u32();
    if (got != want) {
      throw FormatError(FormatErrorKind::kShapeMismatch,
                        "parameter " + std::to_string(m.parameters.size()) + " has shape " +
                            shape_string(got) + ", architecture requires " + shape_string(want));
    }
    const std::size_t n = numel(got);
    r.need(n * 4);
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    m.parameters.emplace_back(std::move(got), std::move(data));
  }
  if (r.remaining() != 0) {
    throw FormatError(FormatErrorKind::kCorrupt,
                      std::to_string(r.remaining()) + " trailing bytes after parameters");
  }
  return m;
}

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(model));
}

TrainedModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

template ForwardNodes forward<float>(Graph<float>&, const TrainedModel&, std::size_t,
                                     const ForwardMode&, bool);
template ForwardNodes forward<double>(Graph<double>&, const TrainedModel&, std::size_t,
                                      const ForwardMode&, bool);
template Tensor<float> input_gradient<float>(const TrainedModel&, const Tensor<float>&,
                                             const ScalarHead<float>&, double, HeadSpace);
template Tensor<double> input_gradient<double>(const TrainedModel&, const Tensor<double>&,
                                               const ScalarHead<double>&, double, HeadSpace);

}  // namespace ddta
