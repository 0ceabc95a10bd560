#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "ddta/distillation.hpp"
#include "ddta/error.hpp"
#include "ddta/evaluation.hpp"
#include "ddta/functional.hpp"
#include "support.hpp"

using namespace ddta;

namespace {

/// Two clusters in opposite corners of the unit square, about 1 apart.
LabeledDataset corner_clusters(std::size_t n, std::uint64_t seed) {
  rng::CounterRng r(seed);
  std::vector<float> px;
  std::vector<std::uint8_t> y;
  for (std::size_t i = 0; i < n; ++i) {
    const bool hi = i % 2 == 1;
    for (int d = 0; d < 2; ++d) px.push_back(float(hi ? r.uniform(0.85, 1.0) : r.uniform(0.0, 0.15)));
    y.push_back(hi ? 1 : 0);
  }
  return make_hard_dataset(Tensor<float>(Shape{n, 1, 1, 2}, std::move(px)), std::move(y), 2, Split::kTrain);
}

/// Three noisy classes on a 4x4 image, each lighting up its own quadrant.
LabeledDataset quadrant_data(std::size_t n, std::uint64_t seed) {
  rng::CounterRng r(seed);
  std::vector<float> px(n * 16);
  std::vector<std::uint8_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::uint8_t(i % 3);
    for (std::size_t p = 0; p < 16; ++p) {
      const std::size_t quad = (p / 8) * 2 + (p % 4) / 2;
      const bool lit = quad == y[i];
      px[i * 16 + p] = float(std::clamp(r.uniform(-0.3, 0.3) + (lit ? 0.6 : 0.2), 0.0, 1.0));
    }
  }
  return make_hard_dataset(Tensor<float>(Shape{n, 1, 4, 4}, std::move(px)), std::move(y), 3, Split::kTrain);
}

ArchitectureSpec quadrant_spec() { return ArchitectureSpec::perceptron(4, 4, 1, {12}, 3); }

TrainingHyperparameters quick_hp(double t, std::size_t epochs = 5) {
  TrainingHyperparameters hp;
  hp.batch_size = 16;
  hp.learning_rate = 0.05;
  hp.epochs = epochs;
  hp.temperature = t;
  hp.dropout_rate = 0.0;
  hp.seed = 3;
  return hp;
}

double mean_entropy(const LabeledDataset& soft) {
  double s = 0.0;
  for (std::size_t i = 0; i < soft.size(); ++i) s += entropy<float>(soft.label(i));
  return s / double(soft.size());
}

}  // namespace

TEST_CASE("hyperparameter validation") {
  TrainingHyperparameters hp;
  hp.validate();
  hp.epochs = 0;
  hp.validate();
  auto bad = hp;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = hp;
  bad.temperature = 0.5;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = hp;
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = hp;
  bad.learning_rate = -1;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("zero epochs returns the initialization") {
  const auto data = quadrant_data(30, 1);
  auto hp = quick_hp(1.0, 0);
  const auto m = train_hard(quadrant_spec(), data, hp);
  const auto init = build_model(quadrant_spec(), hp.seed);
  for (std::size_t i = 0; i < m.parameters.size(); ++i) {
    CHECK(m.parameters[i].storage() == init.parameters[i].storage());
  }
}

TEST_CASE("separable two-class toy is fit perfectly within 200 epochs") {
  const auto data = corner_clusters(64, 2);
  auto hp = quick_hp(1.0, 200);
  hp.learning_rate = 0.1;
  const auto m = train_hard(ArchitectureSpec::perceptron(1, 2, 1, {4}, 2), data, hp);
  CHECK(accuracy(m, data) == 1.0);
}

TEST_CASE("first epoch lowers the training loss") {
  const auto data = quadrant_data(150, 4);
  for (double t : {1.0, 20.0}) {
    const auto hp = quick_hp(t, 1);
    const double before = dataset_loss(build_model(quadrant_spec(), hp.seed), data, t);
    const double after = dataset_loss(train_hard(quadrant_spec(), data, hp), data, t);
    CHECK(after <= before);
  }
}

TEST_CASE("training is bit-reproducible and records each epoch") {
  const auto data = quadrant_data(60, 5);
  TrainingLog log;
  const auto a = train_hard(quadrant_spec(), data, quick_hp(2.0, 3), &log);
  const auto b = train_hard(quadrant_spec(), data, quick_hp(2.0, 3));
  CHECK(log.epoch_loss.size() == 3);
  for (std::size_t i = 0; i < a.parameters.size(); ++i) CHECK(a.parameters[i].storage() == b.parameters[i].storage());
  CHECK(a.temperature == 2.0);
}

TEST_CASE("label kind is enforced") {
  const auto data = quadrant_data(30, 1);
  CHECK_THROWS_AS(train_soft(quadrant_spec(), data, quick_hp(1.0)), InvalidArgument);
  const auto m = train_hard(quadrant_spec(), data, quick_hp(1.0, 1));
  const auto soft = generate_soft_labels(m, data, 1.0);
  CHECK_THROWS_AS(train_hard(quadrant_spec(), soft, quick_hp(1.0)), InvalidArgument);
}

TEST_CASE("soft labels are normalized and keep the T=1 prediction") {
  const auto data = quadrant_data(90, 6);
  const auto m = train_hard(quadrant_spec(), data, quick_hp(10.0, 5));
  const auto soft = generate_soft_labels(m, data, 10.0);
  CHECK(soft.kind == LabelKind::kSoft);
  const auto p1 = predict(m, data.images, 1.0);
  for (std::size_t i = 0; i < soft.size(); ++i) {
    const auto row = soft.label(i);
    CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(argmax<float>(row) == argmax<float>(p1.data().subspan(i * 3, 3)));
    CHECK(soft.targets[i] == data.targets[i]);
  }
  CHECK_THROWS_AS(generate_soft_labels(m, data, 1.0), InvalidArgument);
}

TEST_CASE("soft labels get softer with temperature") {
  const auto data = quadrant_data(90, 7);
  const auto cold = train_hard(quadrant_spec(), data, quick_hp(1.0, 5));
  const auto hot = train_hard(quadrant_spec(), data, quick_hp(40.0, 5));
  CHECK(mean_entropy(generate_soft_labels(hot, data, 40.0)) >
        mean_entropy(generate_soft_labels(cold, data, 1.0)));
}

TEST_CASE("one-hot soft labels train exactly like hard labels") {
  const auto data = quadrant_data(48, 8);
  auto soft = data;
  soft.kind = LabelKind::kSoft;
  const auto hp = quick_hp(3.0, 2);
  const auto a = train_hard(quadrant_spec(), data, hp);
  const auto b = train_soft(quadrant_spec(), soft, hp);
  for (std::size_t i = 0; i < a.parameters.size(); ++i) CHECK(a.parameters[i].storage() == b.parameters[i].storage());
  CHECK(batch_loss(a, data.images, data.labels, 3.0) ==
        doctest::Approx(batch_loss(a, soft.images, soft.labels, 3.0)).epsilon(1e-6));
}

TEST_CASE("chain of one is the directly trained teacher") {
  const auto data = quadrant_data(60, 9);
  DistillationPlan plan;
  plan.spec = quadrant_spec();
  plan.chain_length = 1;
  plan.hp = quick_hp(5.0, 2);
  const auto chain = run_distillation_chain(plan, data);
  REQUIRE(chain.size() == 1);
  auto hp = plan.hp;
  hp.seed = plan.seed_for(1);
  const auto direct = train_hard(plan.spec, data, hp);
  for (std::size_t i = 0; i < direct.parameters.size(); ++i) {
    CHECK(chain[0].parameters[i].storage() == direct.parameters[i].storage());
  }
  CHECK(chain[0].provenance.label() == "teacher");
}

TEST_CASE("chain of three writes tagged checkpoints and soft labels") {
  const auto data = quadrant_data(60, 10);
  const auto dir = testing::scratch_dir("chain3");
  DistillationPlan plan;
  plan.spec = quadrant_spec();
  plan.chain_length = 3;
  plan.hp = quick_hp(20.0, 2);
  plan.checkpoint_dir = dir;
  std::vector<std::uint32_t> seen;
  plan.on_step = [&](std::uint32_t s) { seen.push_back(s); };
  const auto chain = run_distillation_chain(plan, data);
  REQUIRE(chain.size() == 3);
  CHECK(seen == std::vector<std::uint32_t>{1, 2, 3});
  CHECK(chain[0].provenance.label() == "teacher");
  CHECK(chain[1].provenance.label() == "assistant");
  CHECK(chain[2].provenance.label() == "student");
  for (int s = 1; s <= 3; ++s) {
    const auto back = load_checkpoint(dir / ("step" + std::to_string(s) + ".ckpt"));
    CHECK(back.provenance == chain[std::size_t(s - 1)].provenance);
    CHECK(back.temperature == 20.0);
  }
  const auto soft = load_soft_labels(dir / "step1.dslb", data);
  const auto again = generate_soft_labels(chain[0], data, 20.0);
  CHECK(soft.labels.storage() == again.labels.storage());
  CHECK(soft.source_index == again.source_index);

  auto bad = plan;
  bad.seeds = {1};
  CHECK_THROWS_AS(run_distillation_chain(bad, data), InvalidArgument);
}

TEST_CASE("supplied teacher must match the plan") {
  const auto data = quadrant_data(30, 11);
  DistillationPlan plan;
  plan.spec = quadrant_spec();
  plan.chain_length = 2;
  plan.hp = quick_hp(5.0, 1);
  const auto teacher = train_hard(plan.spec, data, quick_hp(2.0, 1));
  CHECK_THROWS_AS(run_distillation_chain(plan, data, &teacher), InvalidArgument);
  plan.hp.temperature = 2.0;
  const auto chain = run_distillation_chain(plan, data, &teacher);
  CHECK(chain[0].parameters[0].storage() == teacher.parameters[0].storage());
  CHECK(chain[1].provenance.label() == "student");
}

TEST_CASE("student distilled on mnist stays close to its teacher") {
  const auto dir = testing::mnist_dir();
  if (!dir) {
    MESSAGE("MNIST not found; set DDTA_DATA_DIR");
    return;
  }
  const auto data = load_mnist(*dir, {3000, 500});
  DistillationPlan plan;
  plan.spec = ArchitectureSpec::mnist(Preset::kDesk);
  plan.chain_length = 2;
  plan.hp.epochs = 10;
  const auto chain = run_distillation_chain(plan, data.train);
  const double teacher = accuracy(chain[0], data.test);
  const double student = accuracy(chain[1], data.test);
  MESSAGE("teacher " << teacher << " student " << student);
  CHECK(teacher > 0.8);
  CHECK(std::abs(student - teacher) <= 0.015);
}
