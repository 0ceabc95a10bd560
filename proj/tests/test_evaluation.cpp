#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "ddta/error.hpp"
#include "ddta/evaluation.hpp"
#include "ddta/functional.hpp"
#include "support.hpp"

using namespace ddta;

namespace {

/// Points on a 1x1x2 image labeled by which side of x0 = 0.5 they fall on.
LabeledDataset boundary_grid(std::size_t per_axis) {
  std::vector<float> px;
  std::vector<std::uint8_t> y;
  for (std::size_t i = 0; i < per_axis; ++i) {
    for (std::size_t j = 0; j < per_axis; ++j) {
      const float x0 = (float(i) + 0.5f) / float(per_axis);
      px.push_back(x0);
      px.push_back((float(j) + 0.5f) / float(per_axis));
      y.push_back(x0 > 0.5f ? 1 : 0);
    }
  }
  const std::size_t n = y.size();
  return make_hard_dataset(Tensor<float>(Shape{n, 1, 1, 2}, std::move(px)), std::move(y), 2,
                           Split::kTest);
}

LabeledDataset random_images(std::size_t n, Shape sample, std::size_t classes, std::uint64_t seed) {
  rng::CounterRng r(seed);
  Shape s = sample;
  s.insert(s.begin(), n);
  Tensor<float> img(s);
  for (auto& v : img.data()) v = float(r.uniform());
  std::vector<std::uint8_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = std::uint8_t(i % classes);
  for (std::size_t i = n; i > 1; --i) std::swap(y[i - 1], y[r.below(i)]);
  return make_hard_dataset(std::move(img), std::move(y), classes, Split::kTest);
}

TrainedModel constant_model(std::size_t favored) {
  auto m = build_model(ArchitectureSpec::perceptron(1, 2, 1, {}, 2), 1);
  std::fill(m.parameters[0].data().begin(), m.parameters[0].data().end(), 0.0f);
  m.parameters[1] = Tensor<float>(Shape{2}, {favored == 0 ? 3.0f : -3.0f, favored == 0 ? -3.0f : 3.0f});
  return m;
}

}  // namespace

TEST_CASE("a model unrelated to the labels sits at chance") {
  const auto spec = ArchitectureSpec::perceptron(4, 4, 1, {8}, 10);
  const auto data = random_images(1000, {1, 4, 4}, 10, 5);
  for (std::uint64_t seed : {1, 2, 3}) {
    const double acc = accuracy(build_model(spec, seed), data);
    CAPTURE(seed);
    CHECK(std::abs(acc - 0.1) <= 0.02);
  }
}

TEST_CASE("saturated perfect and inverted classifiers hit the bounds") {
  const auto m = testing::linear_boundary_model(0.5, 1000.0f);
  auto data = boundary_grid(10);
  CHECK(accuracy(m, data) == 1.0);
  CHECK(confidence(m, data) == 1.0);
  for (auto& t : data.targets) t = std::uint8_t(1 - t);
  CHECK(accuracy(m, data) == 0.0);
  CHECK(confidence(m, data) == 0.0);
  CHECK_THROWS_AS(accuracy(m, LabeledDataset{}), InvalidArgument);
  CHECK_THROWS_AS(confidence(m, LabeledDataset{}), InvalidArgument);
}

TEST_CASE("confidence averages the top probability of correct samples") {
  const auto m = testing::linear_boundary_model(0.5, 2.0f);
  const auto data = boundary_grid(4);
  const auto p = predict(m, data.images, 1.0);
  double expect = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = p.data().subspan(i * 2, 2);
    if (argmax<float>(row) == data.targets[i]) expect += *std::max_element(row.begin(), row.end());
  }
  CHECK(confidence(m, data) == doctest::Approx(expect / double(data.size())).epsilon(1e-9));
}

TEST_CASE("property: confidence never exceeds accuracy") {
  rng::CounterRng r(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto spec = ArchitectureSpec::perceptron(3, 3, 1, {5}, 4);
    const auto m = build_model(spec, r.next());
    const auto data = random_images(64, {1, 3, 3}, 4, r.next());
    CHECK(confidence(m, data) <= accuracy(m, data));
  }
}

TEST_CASE("constant model has no gradient anywhere") {
  const auto data = boundary_grid(5);
  const auto prof = sensitivity_profile(constant_model(0), data, 1.0);
  CHECK(prof.near_zero_proportion == 1.0);
  for (double v : prof.mean_magnitude) CHECK(v == 0.0);
}

TEST_CASE("sensitivity of the affine toy matches its closed form") {
  // p1 = sigmoid(2s(x0 - b)/T), so |dp_i/dx0| = 2s p0 p1 / T and dp/dx1 = 0;
  // the mean over 2 outputs x 2 inputs is s p0 p1 / T.
  const float s = 3.0f;
  const auto m = testing::linear_boundary_model(0.5, s);
  const auto data = boundary_grid(4);
  for (double t : {1.0, 4.0}) {
    const auto prof = sensitivity_profile(m, data, t);
    REQUIRE(prof.mean_magnitude.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data.image(i)[0];
      const double p1 = 1.0 / (1.0 + std::exp(-2.0 * s * (x0 - 0.5) / t));
      CHECK(prof.mean_magnitude[i] == doctest::Approx(s * p1 * (1 - p1) / t).epsilon(1e-4));
    }
  }
}

TEST_CASE("near-zero proportion boundaries and monotonicity") {
  const auto spec = ArchitectureSpec::perceptron(3, 3, 1, {5}, 4);
  const auto m = build_model(spec, 4);
  const auto data = random_images(20, {1, 3, 3}, 4, 9);
  const auto prof = sensitivity_profile(m, data, 1.0, std::numeric_limits<double>::infinity());
  CHECK(prof.near_zero_proportion == 1.0);
  CHECK(prof.proportion_below(0.0) == 0.0);
  double prev = 0.0;
  for (double th = 1e-12; th < 10.0; th *= 10.0) {
    const double q = prof.proportion_below(th);
    CHECK(q >= prev);
    prev = q;
  }
  CHECK(sensitivity_profile(m, data, 1.0, 1e-10, 7).mean_magnitude.size() == 7);
  CHECK_THROWS_AS(sensitivity_profile(m, data, 0.0), InvalidArgument);
  CHECK_THROWS_AS(sensitivity_profile(m, data, -1.0), InvalidArgument);
}

TEST_CASE("sensitivity is identical across worker counts") {
  const auto m = build_model(ArchitectureSpec::perceptron(3, 3, 1, {5}, 4), 6);
  const auto data = random_images(16, {1, 3, 3}, 4, 2);
  CHECK(sensitivity_profile(m, data, 2.0, 1e-10, 16, 1).mean_magnitude ==
        sensitivity_profile(m, data, 2.0, 1e-10, 16, 3).mean_magnitude);
}

TEST_CASE("constant model cannot be pushed off its class") {
  auto data = boundary_grid(3);
  for (auto& t : data.targets) t = 0;
  const auto rep = robustness(constant_model(0), data, AttackConfig::defaults(Norm::kL2), 5);
  CHECK(rep.attempted() == 5);
  CHECK(rep.success_rate == 0.0);
  CHECK(rep.failed == 5);
  CHECK_FALSE(rep.mean_defined);
  CHECK(rep.perturbations.empty());
}

TEST_CASE("robustness on the affine toy matches the mean distance to the boundary") {
  const auto m = testing::linear_boundary_model(0.5);
  const auto data = boundary_grid(10);
  double analytic = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) analytic += std::abs(data.image(i)[0] - 0.5);
  analytic /= double(data.size());

  for (auto n : {Norm::kL2, Norm::kLinf}) {
    auto cfg = AttackConfig::defaults(n);
    cfg.seed = 3;
    const auto rep = robustness(m, data, cfg, 100);
    CAPTURE(to_string(n));
    REQUIRE(rep.attempted() == 100);
    CHECK(rep.success_rate == 1.0);
    REQUIRE(rep.mean_defined);
    CHECK(std::abs(rep.mean - analytic) <= 0.1 * analytic);
    CHECK(rep.max >= rep.mean);
    CHECK(rep.mean >= rep.min);
    for (const auto& r : rep.results) {
      const auto img = data.image(r.sample_index);
      const Tensor<float> x(Shape{1, 1, 2}, std::vector<float>(img.begin(), img.end()));
      CHECK(verify_result(m, x, r, 0.0) == "");
    }
  }
}

TEST_CASE("robustness skips misclassified samples and seeds per row") {
  const auto m = testing::linear_boundary_model(0.5);
  auto data = boundary_grid(4);
  data.targets[0] = 1;  // x0 = 0.125 is predicted 0
  auto cfg = AttackConfig::defaults(Norm::kL2);
  cfg.max_iterations = 200;
  cfg.seed = 11;
  const auto rep = robustness(m, data, cfg, 3);
  REQUIRE(rep.attempted() == 3);
  CHECK(rep.results[0].sample_index == 1);
  for (const auto& r : rep.results) CHECK(r.seed == rng::derive(11, r.sample_index));

  auto targeted = cfg;
  targeted.mode = AttackMode::kTargeted;
  CHECK_THROWS_AS(robustness(m, data, targeted, 3), InvalidArgument);
}

TEST_CASE("summaries use successful results only") {
  std::vector<AttackResult> rs(4);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    rs[i].sample_index = i;
    rs[i].norm = Norm::kL2;
  }
  rs[0].success = true;
  rs[0].l2 = 0.5;
  rs[2].success = true;
  rs[2].l2 = 1.5;
  rs[3].success = true;
  rs[3].l2 = 1.0;
  const auto rep = summarize(rs, Norm::kL2, AttackMode::kUntargeted, "m");
  CHECK(rep.mean == doctest::Approx(1.0));
  CHECK(rep.max == 1.5);
  CHECK(rep.min == 0.5);
  CHECK(rep.failed == 1);
  CHECK(rep.success_rate == 0.75);

  AttackResult r;
  r.success = true;
  r.l0 = 3;
  r.l2 = 0.25;
  r.linf = 0.125;
  CHECK(perturbation_size(r, Norm::kL0) == 3.0);
  CHECK(perturbation_size(r, Norm::kL2) == 0.25);
  CHECK(perturbation_size(r, Norm::kLinf) == 0.125);
}

TEST_CASE("average ranks share ties") {
  const std::vector<double> v{10, 20, 20, 5};
  CHECK(average_ranks(v) == std::vector<double>{2, 3.5, 3.5, 1});
}

TEST_CASE("spearman closed forms") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> b{2, 1, 4, 3, 5};
  const std::vector<double> rev{5, 4, 3, 2, 1};
  const std::vector<double> flat{7, 7, 7, 7, 7};
  CHECK(spearman(a, b) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(spearman(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(spearman(a, rev) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(spearman(a, flat) == 0.0);
  std::vector<double> squares;
  for (double x : a) squares.push_back(x * x * x);
  CHECK(spearman(a, squares) == doctest::Approx(1.0).epsilon(1e-12));
}
