#include "ddta/distillation.hpp"

#include <algorithm>
#include <cmath>

#include "ddta/optimizer.hpp"
#include "ddta/rng.hpp"

namespace ddta {

namespace {

// Sub-stream tags under a training seed.
constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kDropoutStream = 0xD209;

float stored_temperature(double t) { return static_cast<float>(t); }

TrainedModel train(const ArchitectureSpec& spec, const LabeledDataset& data,
                   const TrainingHyperparameters& hp, TrainingLog* log) {
  hp.validate();
  if (data.empty()) throw InvalidArgument("training set is empty");
  if (data.sample_shape() != spec.input_shape()) {
    throw ShapeError("training images " + shape_string(data.sample_shape()) +
                     " do not match architecture input " + shape_string(spec.input_shape()));
  }
  if (data.classes() != spec.classes) {
    throw ShapeError("dataset has " + std::to_string(data.classes()) +
                     " classes, architecture has " + std::to_string(spec.classes));
  }

  TrainedModel model = build_model(spec, hp.seed);
  model.temperature = stored_temperature(hp.temperature);
  if (log) log->epoch_loss.clear();

  auto opt = OptimizerState::sgd(hp.learning_rate, hp.momentum, hp.decay);
  std::vector<Tensor<float>*> params;
  for (auto& p : model.parameters) {
    p.attach_grad();
    params.push_back(&p);
  }

  const std::size_t n = data.size();
  const std::uint64_t shuffle_key = rng::derive(hp.seed, kShuffleStream);
  const std::uint64_t dropout_key = rng::derive(hp.seed, kDropoutStream);
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    const auto order = rng::permutation(n, rng::derive(shuffle_key, epoch));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += hp.batch_size) {
      const std::size_t b = std::min(hp.batch_size, n - start);
      std::span<const std::size_t> rows(order.data() + start, b);
      const auto x = data.gather_images(rows);
      const auto y = data.gather_labels(rows);

      Graph<float> g;
      const auto xin = g.borrow(x.data(), x.shape());
      ForwardMode mode{true, hp.dropout_rate, rng::derive(dropout_key, step)};
      const auto f = forward(g, model, xin, mode, true);
      const auto loss = softmax_cross_entropy(g, f.logits, y, hp.temperature);
      g.backward(loss);
      loss_sum += g.value(loss)[0];
      ++batches;

      for (std::size_t k = 0; k < params.size(); ++k) {
        auto src = std::as_const(g).grad(f.parameters[k]);
        auto dst = params[k]->grad();
        std::copy(src.begin(), src.end(), dst.begin());
      }
      optimizer_step<float>(opt, params);
      ++step;
    }
    if (log) log->epoch_loss.push_back(loss_sum / double(batches));
  }
  for (auto& p : model.parameters) p.drop_grad();
  return model;
}

}  // namespace

void TrainingHyperparameters::validate() const {
  if (batch_size == 0) throw InvalidArgument("batch size must be positive");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (!(decay >= 0.0)) throw InvalidArgument("decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0,1)");
  if (!(temperature >= 1.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("training temperature must be finite and >= 1");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw InvalidArgument("dropout rate must be in [0,1)");
  }
}

TrainedModel train_hard(const ArchitectureSpec& spec, const LabeledDataset& data,
                        const TrainingHyperparameters& hp, TrainingLog* log) {
  if (data.kind != LabelKind::kHard) throw InvalidArgument("train_hard needs hard labels");
  return train(spec, data, hp, log);
}

TrainedModel train_soft(const ArchitectureSpec& spec, const LabeledDataset& data,
                        const TrainingHyperparameters& hp, TrainingLog* log) {
  if (data.kind != LabelKind::kSoft) throw InvalidArgument("train_soft needs soft labels");
  return train(spec, data, hp, log);
}

double batch_loss(const TrainedModel& model, const Tensor<float>& images,
                  const Tensor<float>& labels, double temperature) {
  Graph<float> g;
  const auto x = g.borrow(images.data(), images.shape());
  const auto f = forward(g, model, x);
  return g.value(softmax_cross_entropy(g, f.logits, labels, temperature))[0];
}

double dataset_loss(const TrainedModel& model, const LabeledDataset& data, double temperature) {
  if (data.empty()) throw InvalidArgument("dataset_loss: empty dataset");
  constexpr std::size_t kChunk = 256;
  double total = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t b = std::min(kChunk, data.size() - start);
    rows.resize(b);
    for (std::size_t i = 0; i < b; ++i) rows[i] = start + i;
    total += batch_loss(model, data.gather_images(rows), data.gather_labels(rows), temperature) *
             double(b);
  }
  return total / double(data.size());
}

LabeledDataset generate_soft_labels(const TrainedModel& model, const LabeledDataset& data,
                                    double temperature) {
  if (stored_temperature(temperature) != stored_temperature(model.temperature)) {
    throw InvalidArgument("soft labels must be generated at the model's training temperature " +
                          std::to_string(model.temperature) + ", got " +
                          std::to_string(temperature));
  }
  if (data.empty()) throw InvalidArgument("generate_soft_labels: empty dataset");
  LabeledDataset out;
  out.images = data.images;
  out.labels = predict(model, data.images, temperature);
  out.targets = data.targets;
  out.source_index = data.source_index;
  out.kind = LabelKind::kSoft;
  out.split = data.split;
  return out;
}

std::uint64_t DistillationPlan::seed_for(std::uint32_t step) const {
  if (!seeds.empty()) {
    if (step == 0 || step > seeds.size()) {
      throw InvalidArgument("no seed for chain step " + std::to_string(step));
    }
    return seeds[step - 1];
  }
  return rng::derive(hp.seed, step);
}

std::vector<TrainedModel> run_distillation_chain(const DistillationPlan& plan,
                                                 const LabeledDataset& data,
                                                 const TrainedModel* teacher) {
  if (plan.chain_length < 1) throw InvalidArgument("chain length must be at least 1");
  if (!plan.seeds.empty() && plan.seeds.size() < plan.chain_length) {
    throw InvalidArgument("plan lists fewer seeds than chain steps");
  }
  if (data.kind != LabelKind::kHard) throw InvalidArgument("chain input must carry hard labels");

  std::vector<TrainedModel> chain;
  chain.reserve(plan.chain_length);
  auto persist = [&](const TrainedModel& m, std::uint32_t step) {
    if (plan.checkpoint_dir) {
      save_checkpoint(m, *plan.checkpoint_dir / ("step" + std::to_string(step) + ".ckpt"));
    }
  };

  if (teacher) {
    if (!(teacher->spec == plan.spec)) {
      throw InvalidArgument("teacher architecture differs from the plan's");
    }
    if (stored_temperature(teacher->temperature) != stored_temperature(plan.hp.temperature)) {
      throw InvalidArgument("teacher temperature differs from the plan's");
    }
    chain.push_back(*teacher);
  } else {
    if (plan.on_step) plan.on_step(1);
    auto hp = plan.hp;
    hp.seed = plan.seed_for(1);
    chain.push_back(train_hard(plan.spec, data, hp));
  }
  chain.back().provenance = Provenance::for_chain(1, plan.chain_length);
  persist(chain.back(), 1);

  for (std::uint32_t step = 2; step <= plan.chain_length; ++step) {
    if (plan.on_step) plan.on_step(step);
    const auto soft = generate_soft_labels(chain.back(), data, plan.hp.temperature);
    if (plan.checkpoint_dir) {
      save_soft_labels(soft,
                       *plan.checkpoint_dir / ("step" + std::to_string(step - 1) + ".dslb"));
    }
    auto hp = plan.hp;
    hp.seed = plan.seed_for(step);
    chain.push_back(train_soft(plan.spec, soft, hp));
    chain.back().provenance = Provenance::for_chain(step, plan.chain_length);
    persist(chain.back(), step);
  }
  return chain;
}

}  // namespace ddta
