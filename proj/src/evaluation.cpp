#include "ddta/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddta/functional.hpp"
#include "ddta/parallel.hpp"
#include "ddta/rng.hpp"

namespace ddta {

namespace {

void require_rows(const LabeledDataset& data, const char* what) {
  if (data.empty()) throw InvalidArgument(std::string(what) + ": empty dataset");
}

Tensor<float> sample_tensor(const LabeledDataset& data, std::size_t i) {
  const auto img = data.image(i);
  Shape s = data.sample_shape();
  s.insert(s.begin(), 1);
  return Tensor<float>(std::move(s), std::vector<float>(img.begin(), img.end()));
}

}  // namespace

double accuracy(const TrainedModel& model, const LabeledDataset& data) {
  require_rows(data, "accuracy");
  const auto z = logits(model, data.images);
  const std::size_t N = model.spec.classes;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ok += argmax<float>(z.data().subspan(i * N, N)) == data.targets[i];
  }
  return double(ok) / double(data.size());
}

double confidence(const TrainedModel& model, const LabeledDataset& data) {
  require_rows(data, "confidence");
  const auto p = predict(model, data.images, 1.0);
  const std::size_t N = model.spec.classes;
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = p.data().subspan(i * N, N);
    const std::size_t top = argmax<float>(row);
    if (top == data.targets[i]) total += row[top];
  }
  return total / double(data.size());
}

double SensitivityProfile::proportion_below(double t) const {
  if (mean_magnitude.empty()) return 0.0;
  const auto below = std::count_if(mean_magnitude.begin(), mean_magnitude.end(),
                                   [t](double m) { return m < t; });
  return double(below) / double(mean_magnitude.size());
}

SensitivityProfile sensitivity_profile(const TrainedModel& model, const LabeledDataset& data,
                                       double temperature, double threshold,
                                       std::size_t sample_count, std::size_t workers) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("sensitivity temperature must be positive");
  }
  require_rows(data, "sensitivity_profile");
  const std::size_t n = std::min(sample_count, data.size());
  const std::size_t N = model.spec.classes;
  const std::size_t D = model.spec.input_size();

  SensitivityProfile prof;
  prof.temperature = temperature;
  prof.threshold = threshold;
  prof.mean_magnitude.assign(n, 0.0);
  std::vector<std::vector<double>> per_sample_max(n, std::vector<double>(N, 0.0));

  parallel_for(n, workers, [&](std::size_t s) {
    const auto x = sample_tensor(data, s);
    Graph<float> g;
    const auto in = g.input(x, true);
    const auto f = forward(g, model, in);
    const auto p = softmax(g, f.logits, temperature);
    std::vector<std::size_t> heads(N);
    for (std::size_t i = 0; i < N; ++i) heads[i] = select(g, p, i);
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      g.backward(heads[i]);
      double row_max = 0.0;
      for (float v : std::as_const(g).grad(in)) {
        const double a = std::abs(double(v));
        total += a;
        row_max = std::max(row_max, a);
      }
      per_sample_max[s][i] = row_max;
    }
    prof.mean_magnitude[s] = total / double(N * D);
  });

  prof.output_max.assign(N, 0.0);
  for (const auto& m : per_sample_max) {
    for (std::size_t i = 0; i < N; ++i) prof.output_max[i] = std::max(prof.output_max[i], m[i]);
  }
  prof.near_zero_proportion = prof.proportion_below(threshold);
  return prof;
}

double perturbation_size(const AttackResult& r, Norm norm) {
  switch (norm) {
    case Norm::kL0: return double(r.l0);
    case Norm::kL2: return r.l2;
    case Norm::kLinf: return r.linf;
  }
  return 0.0;
}

RobustnessReport summarize(std::vector<AttackResult> results, Norm norm, AttackMode mode,
                           std::string model_id) {
  RobustnessReport rep;
  rep.model_id = std::move(model_id);
  rep.norm = norm;
  rep.mode = mode;
  std::sort(results.begin(), results.end(),
            [](const AttackResult& a, const AttackResult& b) { return a.sample_index < b.sample_index; });
  rep.results = std::move(results);
  for (const auto& r : rep.results) {
    if (r.success) {
      rep.perturbations.push_back(perturbation_size(r, norm));
    } else {
      ++rep.failed;
    }
  }
  if (!rep.results.empty()) {
    rep.success_rate = double(rep.perturbations.size()) / double(rep.results.size());
  }
  if (!rep.perturbations.empty()) {
    rep.mean_defined = true;
    double s = 0.0;
    for (double v : rep.perturbations) s += v;
    rep.mean = s / double(rep.perturbations.size());
    const auto [lo, hi] = std::minmax_element(rep.perturbations.begin(), rep.perturbations.end());
    rep.min = *lo;
    rep.max = *hi;
  }
  return rep;
}

RobustnessReport robustness(const TrainedModel& model, const LabeledDataset& data,
                            const AttackConfig& cfg, std::size_t sample_count,
                            std::size_t workers, std::string model_id) {
  if (cfg.mode != AttackMode::kUntargeted) {
    throw InvalidArgument("robustness is defined for untargeted attacks");
  }
  cfg.validate();
  if (sample_count > data.size()) {
    throw InvalidArgument("robustness sample count " + std::to_string(sample_count) +
                          " exceeds dataset size " + std::to_string(data.size()));
  }
  std::vector<std::size_t> rows;
  if (sample_count > 0) {
    const auto z = logits(model, data.images);
    const std::size_t N = model.spec.classes;
    for (std::size_t i = 0; i < data.size() && rows.size() < sample_count; ++i) {
      if (argmax<float>(z.data().subspan(i * N, N)) == data.targets[i]) rows.push_back(i);
    }
  }
  std::vector<AttackResult> results(rows.size());
  parallel_for(rows.size(), workers, [&](std::size_t k) {
    const std::size_t row = rows[k];
    AttackConfig c = cfg;
    c.seed = rng::derive(cfg.seed, row);
    auto x = sample_tensor(data, row).reshaped(data.sample_shape());
    results[k] = run_attack(model, x, data.targets[row], data.targets[row], c);
    results[k].sample_index = row;
  });
  return summarize(std::move(results), cfg.norm, cfg.mode, std::move(model_id));
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("spearman: length mismatch");
  if (a.size() < 2) return 0.0;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = double(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace ddta
