#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <numeric>

#include "ddta/binary_io.hpp"
#include "ddta/error.hpp"
#include "ddta/functional.hpp"
#include "ddta/network.hpp"
#include "support.hpp"

using namespace ddta;

namespace {

Tensor<float> random_batch(const ArchitectureSpec& spec, std::size_t n, std::uint64_t seed) {
  rng::CounterRng r(seed);
  Shape s = spec.input_shape();
  s.insert(s.begin(), n);
  Tensor<float> x(s);
  for (auto& v : x.data()) v = float(r.uniform());
  return x;
}

ArchitectureSpec tiny_cnn() {
  ArchitectureSpec s;
  s.height = s.width = 6;
  s.channels = 1;
  s.kernel = 1;
  s.conv_channels = {2, 2, 3, 3};
  s.dense_widths = {5, 4};
  s.classes = 3;
  return s;
}

FormatErrorKind decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  FAIL("decode succeeded");
  return FormatErrorKind::kCorrupt;
}

}  // namespace

TEST_CASE("mnist spec expands to four conv, two pool and three dense layers") {
  for (auto preset : {Preset::kDesk, Preset::kPaper}) {
    const auto layers = ArchitectureSpec::mnist(preset).layers();
    auto count = [&](LayerKind k) {
      return std::count_if(layers.begin(), layers.end(), [k](const auto& l) { return l.kind == k; });
    };
    CHECK(count(LayerKind::kConv2d) == 4);
    CHECK(count(LayerKind::kMaxPool2d) == 2);
    CHECK(count(LayerKind::kDense) == 3);
    CHECK(layers.back().output_shape == Shape{10});
  }
  CHECK(ArchitectureSpec::cifar10(Preset::kDesk).layers().size() ==
        ArchitectureSpec::mnist(Preset::kDesk).layers().size());
}

TEST_CASE("desk preset stays under 200k parameters") {
  CHECK(ArchitectureSpec::mnist(Preset::kDesk).parameter_count() < 200000);
}

TEST_CASE("unrealizable specs are rejected") {
  auto s = ArchitectureSpec::mnist(Preset::kDesk);
  s.dense_widths = {64};
  CHECK_THROWS_AS(s.layers(), InvalidArgument);
  s = ArchitectureSpec::mnist(Preset::kDesk);
  s.height = s.width = 8;
  CHECK_THROWS_AS(s.layers(), InvalidArgument);
}

TEST_CASE("spec encoding round-trips") {
  for (const auto& s : {ArchitectureSpec::mnist(Preset::kPaper), ArchitectureSpec::cifar10(Preset::kDesk),
                        ArchitectureSpec::perceptron(2, 3, 1, {7, 5, 3}, 4), tiny_cnn()}) {
    CHECK(ArchitectureSpec::decode(s.encode()) == s);
  }
  CHECK_THROWS_AS(ArchitectureSpec::decode({9, 9}), FormatError);
}

TEST_CASE("build_model is deterministic per seed") {
  const auto spec = ArchitectureSpec::mnist(Preset::kDesk);
  const auto a = build_model(spec, 1);
  const auto b = build_model(spec, 1);
  const auto c = build_model(spec, 2);
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters.size(); ++i) {
    CHECK(std::memcmp(a.parameters[i].data().data(), b.parameters[i].data().data(),
                      a.parameters[i].size() * sizeof(float)) == 0);
    differs |= a.parameters[i].storage() != c.parameters[i].storage();
  }
  CHECK(differs);
}

TEST_CASE("predict rows are distributions whose argmax matches the logits") {
  const auto spec = ArchitectureSpec::mnist(Preset::kDesk);
  const auto m = build_model(spec, 3);
  const auto x = random_batch(spec, 6, 9);
  const auto z = logits(m, x);
  for (double t : {1.0, 2.0, 40.0}) {
    const auto p = predict(m, x, t);
    for (std::size_t i = 0; i < 6; ++i) {
      const auto row = p.data().subspan(i * 10, 10);
      CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-5));
      CHECK(argmax<float>(row) == argmax<float>(z.data().subspan(i * 10, 10)));
    }
  }
  const auto p1 = predict(m, x, 1.0);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto ref = softmax_with_temperature<float>(z.data().subspan(i * 10, 10), 1.0);
    for (std::size_t k = 0; k < 10; ++k) CHECK(std::abs(ref[k] - p1[i * 10 + k]) <= 1e-6);
  }
}

TEST_CASE("zero-bias model on a zero image is near uniform") {
  const auto spec = ArchitectureSpec::mnist(Preset::kDesk);
  const auto m = build_model(spec, 5);
  Tensor<float> x(Shape{1, 1, 28, 28});
  const auto p = predict(m, x, 1.0);
  for (float v : p.data()) CHECK(std::abs(v - 0.1f) <= 1e-3);
}

TEST_CASE("zero final weights leave the bias vector") {
  const auto spec = ArchitectureSpec::mnist(Preset::kDesk);
  auto m = build_model(spec, 5);
  auto& w = m.parameters[m.parameters.size() - 2];
  auto& b = m.parameters.back();
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = float(i) * 0.25f - 1.0f;
  const auto z = logits(m, random_batch(spec, 3, 1));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t i = 0; i < 10; ++i) CHECK(z[r * 10 + i] == b[i]);
  }
}

TEST_CASE("shifting final biases shifts logits but not probabilities") {
  const auto spec = ArchitectureSpec::mnist(Preset::kDesk);
  auto m = build_model(spec, 5);
  const auto x = random_batch(spec, 4, 2);
  const auto z0 = logits(m, x);
  const auto p0 = predict(m, x, 1.0);
  for (auto& v : m.parameters.back().data()) v += 3.0f;
  const auto z1 = logits(m, x);
  const auto p1 = predict(m, x, 1.0);
  for (std::size_t i = 0; i < z0.size(); ++i) {
    CHECK(z1[i] - z0[i] == doctest::Approx(3.0).epsilon(1e-5));
    CHECK(std::abs(p1[i] - p0[i]) <= 1e-6);
  }
}

TEST_CASE("constant head has zero input gradient") {
  const auto m = build_model(tiny_cnn(), 4);
  const auto x = random_batch(tiny_cnn(), 1, 3).cast<double>();
  const ScalarHead<double> head = [](Graph<double>& g, std::size_t node) {
    return affine(g, select(g, node, 0), 0.0, 1.0);
  };
  const auto grad = input_gradient<double>(m, x, head, 1.0, HeadSpace::kProbabilities);
  for (double v : grad.data()) CHECK(v == 0.0);
}

TEST_CASE("input gradient matches finite differences on a 6x6 model") {
  const auto m = build_model(tiny_cnn(), 4);
  auto x = random_batch(tiny_cnn(), 1, 8).cast<double>();
  for (std::size_t cls = 0; cls < 3; ++cls) {
    const ScalarHead<double> head = [cls](Graph<double>& g, std::size_t p) { return select(g, p, cls); };
    const auto grad = input_gradient<double>(m, x, head, 2.0, HeadSpace::kProbabilities);
    auto value = [&](const Tensor<double>& in) {
      Graph<double> g;
      const auto node = g.input(in);
      const auto f = forward(g, m, node);
      return g.value(select(g, softmax(g, f.logits, 2.0), cls))[0];
    };
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x[i];
      x[i] = keep + h;
      const double up = value(x);
      x[i] = keep - h;
      const double down = value(x);
      x[i] = keep;
      const double num = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(num - grad[i]) / std::max({std::abs(num), std::abs(grad[i]), 1e-6}));
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("probability gradients shrink at high temperature") {
  const auto spec = ArchitectureSpec::mnist(Preset::kDesk);
  const auto m = build_model(spec, 6);
  const auto x = random_batch(spec, 1, 4);
  auto magnitude = [&](double t) {
    const ScalarHead<float> head = [](Graph<float>& g, std::size_t p) { return select(g, p, 3); };
    const auto grad = input_gradient<float>(m, x, head, t, HeadSpace::kProbabilities);
    double s = 0.0;
    for (float v : grad.data()) s += std::abs(v);
    return s / double(grad.size());
  };
  CHECK(magnitude(40.0) < magnitude(1.0));
}

TEST_CASE("provenance naming and tags") {
  CHECK(Provenance::for_chain(1, 3).label() == "teacher");
  CHECK(Provenance::for_chain(2, 3).label() == "assistant");
  CHECK(Provenance::for_chain(3, 3).label() == "student");
  CHECK(Provenance::for_chain(2, 2).label() == "student");
  CHECK(Provenance::for_chain(5, 7).label() == "step5");
  for (std::uint32_t k = 1; k <= 7; ++k) {
    for (std::uint32_t s = 1; s <= k; ++s) {
      const auto p = Provenance::for_chain(s, k);
      CHECK(Provenance::decode(p.encode()) == p);
    }
  }
}

TEST_CASE("checkpoint save and load reproduce predictions bit for bit") {
  const auto spec = ArchitectureSpec::mnist(Preset::kDesk);
  auto m = build_model(spec, 11);
  m.temperature = 40.0;
  m.provenance = Provenance::for_chain(2, 3);
  const auto dir = testing::scratch_dir("ckpt");
  save_checkpoint(m, dir / "m.ckpt");
  const auto back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.spec == m.spec);
  CHECK(back.temperature == 40.0);
  CHECK(back.provenance == m.provenance);
  CHECK(back.seed == 11);
  const auto x = random_batch(spec, 5, 77);
  const auto a = predict(m, x, 1.0);
  const auto b = predict(back, x, 1.0);
  CHECK(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0);
  CHECK(encode_checkpoint(back) == encode_checkpoint(m));
}

TEST_CASE("damaged checkpoints fail with the right kind") {
  const auto bytes = encode_checkpoint(build_model(tiny_cnn(), 1));

  auto truncated = bytes;
  truncated.pop_back();
  CHECK(decode_error(truncated) == FormatErrorKind::kTruncated);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK(decode_error(magic) == FormatErrorKind::kBadMagic);

  auto version = bytes;
  version[4] = 99;
  CHECK(decode_error(version) == FormatErrorKind::kVersionMismatch);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK(decode_error(trailing) == FormatErrorKind::kCorrupt);

  CHECK(decode_error({}) == FormatErrorKind::kTruncated);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.ckpt"), IoError);
}

TEST_CASE("property: truncating a checkpoint anywhere never crashes") {
  const auto bytes = encode_checkpoint(build_model(tiny_cnn(), 2));
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + std::ptrdiff_t(n));
    CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
  }
}

TEST_CASE("property: random perceptron checkpoints round-trip") {
  rng::CounterRng r(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> hidden(r.below(4));
    for (auto& h : hidden) h = 1 + r.below(6);
    const auto spec = ArchitectureSpec::perceptron(1 + r.below(4), 1 + r.below(4), 1 + r.below(3),
                                                   hidden, 2 + r.below(5));
    auto m = build_model(spec, r.next());
    m.temperature = 1.0 + double(r.below(40));
    const auto back = decode_checkpoint(encode_checkpoint(m));
    CHECK(back.spec == spec);
    for (std::size_t i = 0; i < m.parameters.size(); ++i) {
      CHECK(back.parameters[i].storage() == m.parameters[i].storage());
    }
  }
}
