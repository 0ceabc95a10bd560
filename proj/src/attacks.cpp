#include "ddta/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ddta/functional.hpp"
#include "ddta/optimizer.hpp"
#include "ddta/rng.hpp"
#include "ddta/text.hpp"

namespace ddta {

const char* to_string(Norm n) {
  switch (n) {
    case Norm::kL0: return "l0";
    case Norm::kL2: return "l2";
    case Norm::kLinf: return "linf";
  }
  return "unknown";
}

const char* to_string(AttackMode m) {
  return m == AttackMode::kTargeted ? "targeted" : "untargeted";
}

Norm parse_norm(const std::string& s) {
  if (s == "l0") return Norm::kL0;
  if (s == "l2") return Norm::kL2;
  if (s == "linf") return Norm::kLinf;
  throw InvalidArgument("unknown norm '" + s + "' (expected l0, l2 or linf)");
}

AttackMode parse_mode(const std::string& s) {
  if (s == "targeted") return AttackMode::kTargeted;
  if (s == "untargeted") return AttackMode::kUntargeted;
  throw InvalidArgument("unknown attack mode '" + s + "'");
}

AttackConfig AttackConfig::defaults(Norm norm) {
  AttackConfig c;
  c.norm = norm;
  switch (norm) {
    case Norm::kL2:
      break;
    case Norm::kL0:
      c.c_threshold = 1.0;
      break;
    case Norm::kLinf:
      c.learning_rate = 5e-3;
      c.initial_c = 1e-5;
      c.c_threshold = 1.0;
      break;
  }
  return c;
}

AttackConfig AttackConfig::paper(Norm norm) {
  AttackConfig c = defaults(norm);
  c.max_iterations = 10000;
  switch (norm) {
    case Norm::kL2:
      c.random_starts = 10;
      break;
    case Norm::kL0:
      c.c_threshold = 2e-6;
      break;
    case Norm::kLinf:
      c.c_threshold = 20.0;
      break;
  }
  return c;
}

void AttackConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("attack learning rate must be positive");
  if (max_iterations < 1) throw InvalidArgument("attack needs at least one iteration");
  if (!(initial_c > 0.0)) throw InvalidArgument("initial c must be positive");
  if (!(kappa >= 0.0)) throw InvalidArgument("kappa must be non-negative");
  if (random_starts < 1) throw InvalidArgument("random starts must be at least 1");
}

// ---------------------------------------------------------------------------

namespace {

std::size_t runner_up(std::span<const float> z, std::size_t cls) {
  std::size_t best = cls == 0 ? 1 : 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (i != cls && z[i] > z[best]) best = i;
  }
  return best;
}

void check_class(std::span<const float> z, std::size_t cls) {
  if (z.size() < 2) throw InvalidArgument("objective needs at least two classes");
  if (cls >= z.size()) {
    throw InvalidArgument("class " + std::to_string(cls) + " out of range for " +
                          std::to_string(z.size()) + " logits");
  }
}

}  // namespace

double objective_f(std::span<const float> z, std::size_t target, double kappa) {
  check_class(z, target);
  const double inner = double(z[runner_up(z, target)]) - double(z[target]);
  return std::max(inner, -kappa);
}

double objective_f_untargeted(std::span<const float> z, std::size_t label, double kappa) {
  check_class(z, label);
  const double inner = double(z[label]) - double(z[runner_up(z, label)]);
  return std::max(inner, -kappa);
}

bool goal_reached(std::span<const float> z, AttackMode mode, std::size_t cls, double kappa) {
  // The clamp at -kappa makes f <= 0 whenever the raw margin is <= 0, so the
  // confidence margin is tested on the unclamped value.
  const std::size_t top = argmax(z);
  if (mode == AttackMode::kTargeted) return objective_f(z, cls, std::numeric_limits<double>::infinity()) + kappa <= 0.0 && top == cls;
  return objective_f_untargeted(z, cls, std::numeric_limits<double>::infinity()) + kappa <= 0.0 && top != cls;
}

SearchOutcome search_constant_c(double initial_c, double threshold,
                                const std::function<bool(double)>& inner) {
  SearchOutcome out;
  double c = initial_c;
  do {
    out.c_final = c;
    ++out.attempts;
    if (inner(c)) {
      out.success = true;
      return out;
    }
    c *= 2.0;
  } while (c <= threshold);
  return out;
}

PerturbationNorms perturbation_norms(std::span<const float> x, std::span<const float> x_adv,
                                     const Shape& sample_shape) {
  if (x.size() != x_adv.size() || x.size() != numel(sample_shape) || sample_shape.size() != 3) {
    throw ShapeError("perturbation_norms: image sizes disagree");
  }
  PerturbationNorms n;
  const std::size_t C = sample_shape[0], HW = sample_shape[1] * sample_shape[2];
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = double(x_adv[i]) - double(x[i]);
    ss += d * d;
    n.linf = std::max(n.linf, std::abs(d));
  }
  n.l2 = std::sqrt(ss);
  for (std::size_t p = 0; p < HW; ++p) {
    for (std::size_t c = 0; c < C; ++c) {
      if (std::abs(double(x_adv[c * HW + p]) - double(x[c * HW + p])) > 1e-6) {
        ++n.l0;
        break;
      }
    }
  }
  return n;
}

// ---------------------------------------------------------------------------

namespace {

/// Shared per-sample context.
struct Problem {
  const TrainedModel& model;
  const AttackConfig& cfg;
  Shape batched;
  Shape sample;
  std::vector<float> x;
  std::size_t cls;
  MarginGoal goal;

  Problem(const TrainedModel& m, const Tensor<float>& image, std::size_t c, const AttackConfig& k)
      : model(m), cfg(k), sample(m.spec.input_shape()), x(image.data().begin(), image.data().end()),
        cls(c), goal(k.mode == AttackMode::kTargeted ? MarginGoal::kTargeted
                                                     : MarginGoal::kUntargeted) {
    batched = sample;
    batched.insert(batched.begin(), 1);
    if (x.size() != numel(sample)) {
      throw ShapeError("attack input " + shape_string(image.shape()) + " does not match model input " +
                       shape_string(sample));
    }
    for (float v : x) {
      if (!(v >= 0.0f && v <= 1.0f)) throw InvalidArgument("attack input must lie in [0,1]");
    }
    if (cls >= m.spec.classes) throw InvalidArgument("attack class out of range");
  }

  std::vector<float> logits_at(std::span<const float> img) const {
    Tensor<float> t(batched, std::vector<float>(img.begin(), img.end()));
    auto z = logits(model, t);
    return z.storage();
  }
  bool reached(std::span<const float> z) const {
    return goal_reached(z, cfg.mode, cls, cfg.kappa);
  }
};

/// Smallest successful iterate seen so far under one norm.
struct Best {
  bool found = false;
  double size = std::numeric_limits<double>::infinity();
  std::vector<float> image;
  double c = 0.0;

  void offer(double s, std::span<const float> img, double at_c) {
    if (s < size) {
      found = true;
      size = s;
      image.assign(img.begin(), img.end());
      c = at_c;
    }
  }
};

std::vector<float> to_w(std::span<const float> img) {
  std::vector<float> w(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double u = std::clamp(2.0 * double(img[i]) - 1.0, -1.0, 1.0) * (1.0 - 1e-6);
    w[i] = static_cast<float>(std::atanh(u));
  }
  return w;
}

/// One L2 optimization at fixed c over w, optionally restricted to `mask`.
/// Returns whether any iterate reached the goal; `w` holds the final iterate.
bool l2_inner(const Problem& p, double c, std::vector<float>& w, const std::vector<float>* mask,
              Best& best, std::size_t& iterations) {
  const auto& cfg = p.cfg;
  Tensor<float> wt(p.batched, w);
  wt.attach_grad();
  Tensor<float>* params[] = {&wt};
  auto opt = OptimizerState::adam(cfg.learning_rate);
  const std::size_t check_every = std::max<std::size_t>(1, cfg.max_iterations / 10);
  double prev = std::numeric_limits<double>::infinity();
  bool success = false;
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    Graph<float> g;
    const auto wn = g.borrow(wt.data(), p.batched, true);
    auto xs = affine(g, tanh(g, wn), 0.5f, 0.5f);
    if (mask) xs = mask_merge(g, xs, std::span<const float>(*mask), std::span<const float>(p.x));
    const auto fwd = forward(g, p.model, xs);
    const auto dist = squared_distance(g, xs, std::span<const float>(p.x));
    const auto f = margin(g, fwd.logits, p.goal, p.cls, static_cast<float>(cfg.kappa));
    const auto loss = add(g, dist, affine(g, f, static_cast<float>(c), 0.0f));
    ++iterations;

    if (p.reached(g.value(fwd.logits))) {
      success = true;
      best.offer(std::sqrt(double(g.value(dist)[0])), g.value(xs), c);
    }
    const double lv = g.value(loss)[0];
    if (cfg.abort_early && it % check_every == 0 && it > 0) {
      if (lv > prev * 0.9999) break;
      prev = lv;
    } else if (it == 0) {
      prev = lv;
    }

    g.backward(loss);
    auto gw = g.grad(wn);
    std::copy(gw.begin(), gw.end(), wt.grad().begin());
    optimizer_step<float>(opt, params);
  }
  w.assign(wt.data().begin(), wt.data().end());
  return success;
}

/// c-search over l2_inner from a warm start. Returns the outcome and fills
/// `best` with the smallest success at the first successful c.
SearchOutcome l2_search(const Problem& p, std::vector<float>& w, const std::vector<float>* mask,
                        Best& best, std::size_t& iterations) {
  return search_constant_c(p.cfg.initial_c, p.cfg.c_threshold, [&](double c) {
    Best local;
    const bool ok = l2_inner(p, c, w, mask, local, iterations);
    if (ok && local.size < best.size) best = local;
    return ok;
  });
}

AttackResult start_result(const Problem& p, std::size_t label, Norm norm) {
  AttackResult r;
  r.true_label = label;
  r.target = p.cls;
  r.mode = p.cfg.mode;
  r.norm = norm;
  r.seed = p.cfg.seed;
  const auto z = p.logits_at(p.x);
  r.original_prediction = argmax<float>(z);
  r.adversarial_prediction = r.original_prediction;
  return r;
}

void finish(const Problem& p, AttackResult& r, const Best& best) {
  if (!best.found) return;
  const auto z = p.logits_at(best.image);
  if (!p.reached(z)) return;
  r.success = true;
  r.adversarial = Tensor<float>(p.sample, best.image);
  r.adversarial_prediction = argmax<float>(z);
  const auto n = perturbation_norms(p.x, best.image, p.sample);
  r.l0 = n.l0;
  r.l2 = n.l2;
  r.linf = n.linf;
  r.c_final = best.c;
}

std::vector<float> random_start(const Problem& p, double radius, std::uint64_t key) {
  rng::CounterRng r(key);
  const std::size_t n = p.x.size();
  std::vector<double> dir(n);
  double norm = 0.0;
  for (auto& d : dir) {
    d = r.normal();
    norm += d * d;
  }
  norm = std::sqrt(norm);
  const double scale = radius * std::pow(r.uniform(), 1.0 / double(n)) / std::max(norm, 1e-300);
  std::vector<float> img(n);
  for (std::size_t i = 0; i < n; ++i) {
    img[i] = static_cast<float>(std::clamp(double(p.x[i]) + scale * dir[i], 0.0, 1.0));
  }
  return img;
}

}  // namespace

AttackResult attack_l2(const TrainedModel& model, const Tensor<float>& x, std::size_t label,
                       std::size_t cls, const AttackConfig& cfg) {
  cfg.validate();
  Problem p(model, x, cls, cfg);
  AttackResult r = start_result(p, label, Norm::kL2);
  Best best;
  double last_c = cfg.initial_c;
  for (std::size_t s = 0; s < cfg.random_starts; ++s) {
    std::vector<float> w;
    if (s == 0) {
      w = to_w(p.x);
    } else {
      const double radius = best.found ? best.size : 1.0;
      w = to_w(random_start(p, radius, rng::derive(cfg.seed, s)));
    }
    Best local;
    const auto outcome = l2_search(p, w, nullptr, local, r.iterations);
    last_c = outcome.c_final;
    if (outcome.success && local.size < best.size) best = local;
  }
  r.c_final = last_c;
  finish(p, r, best);
  return r;
}

AttackResult attack_l0(const TrainedModel& model, const Tensor<float>& x, std::size_t label,
                       std::size_t cls, const AttackConfig& cfg) {
  cfg.validate();
  Problem p(model, x, cls, cfg);
  AttackResult r = start_result(p, label, Norm::kL0);
  const std::size_t C = p.sample[0], HW = p.sample[1] * p.sample[2];
  std::vector<float> mask(p.x.size(), 1.0f);
  std::vector<bool> allowed(HW, true);
  std::size_t allowed_count = HW;
  std::vector<float> w = to_w(p.x);
  Best last;
  double last_c = cfg.initial_c;

  const ScalarHead<float> head = [&](Graph<float>& g, std::size_t z) {
    return margin(g, z, p.goal, p.cls, static_cast<float>(cfg.kappa));
  };

  while (allowed_count > 0) {
    r.allowed_trace.push_back(allowed_count);
    Best round;
    const auto outcome = l2_search(p, w, &mask, round, r.iterations);
    last_c = outcome.c_final;
    if (!outcome.success || !round.found) break;
    last = round;

    const Tensor<float> xstar(p.sample, round.image);
    const auto grad = input_gradient<float>(model, xstar, head, 1.0, HeadSpace::kLogits);
    std::size_t pick = HW;
    double pick_score = std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < HW; ++q) {
      if (!allowed[q]) continue;
      double score = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t i = c * HW + q;
        score += std::abs(double(grad[i]) * (double(round.image[i]) - double(p.x[i])));
      }
      if (score < pick_score) {
        pick_score = score;
        pick = q;
      }
    }
    allowed[pick] = false;
    --allowed_count;
    for (std::size_t c = 0; c < C; ++c) mask[c * HW + pick] = 0.0f;
  }
  r.c_final = last_c;
  finish(p, r, last);
  return r;
}

AttackResult attack_linf(const TrainedModel& model, const Tensor<float>& x, std::size_t label,
                         std::size_t cls, const AttackConfig& cfg) {
  cfg.validate();
  Problem p(model, x, cls, cfg);
  AttackResult r = start_result(p, label, Norm::kLinf);
  constexpr double kTauFloor = 1.0 / 256.0;
  Tensor<float> delta(p.batched);
  delta.attach_grad();
  Tensor<float>* params[] = {&delta};
  Best best;
  double tau = 1.0;
  double c = cfg.initial_c;

  // Runs until an iterate reaches the goal with every |delta_i| < tau.
  auto inner = [&](double cc) {
    auto opt = OptimizerState::adam(cfg.learning_rate);
    for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
      Graph<float> g;
      const auto xn = g.borrow(std::span<const float>(p.x), p.batched);
      const auto dn = g.borrow(delta.data(), p.batched, true);
      const auto xs = clamp(g, add(g, xn, dn), 0.0f, 1.0f);
      const auto fwd = forward(g, p.model, xs);
      const auto f = margin(g, fwd.logits, p.goal, p.cls, static_cast<float>(cfg.kappa));
      const auto pen = abs_hinge(g, xs, std::span<const float>(p.x), static_cast<float>(tau));
      const auto loss = add(g, affine(g, f, static_cast<float>(cc), 0.0f), pen);
      ++r.iterations;

      if (p.reached(g.value(fwd.logits))) {
        const auto img = g.value(xs);
        double m = 0.0;
        for (std::size_t i = 0; i < img.size(); ++i) {
          m = std::max(m, std::abs(double(img[i]) - double(p.x[i])));
        }
        best.offer(m, img, cc);
        if (m < tau) return true;
      }
      g.backward(loss);
      auto gd = g.grad(dn);
      std::copy(gd.begin(), gd.end(), delta.grad().begin());
      optimizer_step<float>(opt, params);
      auto d = delta.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = std::clamp(p.x[i] + d[i], 0.0f, 1.0f) - p.x[i];
      }
    }
    return false;
  };

  while (tau >= kTauFloor) {
    r.tau_trace.push_back(tau);
    const auto outcome = search_constant_c(c, std::max(c, cfg.c_threshold), inner);
    c = outcome.c_final;
    if (!outcome.success) break;
    tau *= 0.9;
  }
  r.c_final = c;
  finish(p, r, best);
  return r;
}

AttackResult run_attack(const TrainedModel& model, const Tensor<float>& x, std::size_t label,
                        std::size_t cls, const AttackConfig& cfg) {
  switch (cfg.norm) {
    case Norm::kL0: return attack_l0(model, x, label, cls, cfg);
    case Norm::kL2: return attack_l2(model, x, label, cls, cfg);
    case Norm::kLinf: return attack_linf(model, x, label, cls, cfg);
  }
  throw InvalidArgument("unknown norm");
}

std::string verify_result(const TrainedModel& model, const Tensor<float>& x,
                          const AttackResult& r, double kappa) {
  if (!r.success) {
    return r.adversarial ? "failed attack stores an adversarial image" : "";
  }
  if (!r.adversarial) return "successful attack without an adversarial image";
  const auto& adv = *r.adversarial;
  const Shape sample = model.spec.input_shape();
  for (float v : adv.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) return "adversarial pixel outside [0,1]";
  }
  const auto n = perturbation_norms(x.data(), adv.data(), sample);
  if (n.l0 != r.l0) return "l0 " + std::to_string(r.l0) + " recomputes to " + std::to_string(n.l0);
  if (std::abs(n.l2 - r.l2) > 1e-5) return "l2 " + text::num(r.l2) + " recomputes to " + text::num(n.l2);
  if (std::abs(n.linf - r.linf) > 1e-5) {
    return "linf " + text::num(r.linf) + " recomputes to " + text::num(n.linf);
  }
  Shape batched = sample;
  batched.insert(batched.begin(), 1);
  const auto z = logits(model, adv.reshaped(batched));
  const double f = r.mode == AttackMode::kTargeted ? objective_f(z.data(), r.target, kappa)
                                                   : objective_f_untargeted(z.data(), r.target, kappa);
  if (!(f <= 0.0)) return "objective at the stored image is " + text::num(f) + " > 0";
  if (!goal_reached(z.data(), r.mode, r.target, kappa)) return "stored image misses the attack goal";
  if (argmax<float>(z.data()) != r.adversarial_prediction) return "adversarial prediction is stale";
  return "";
}

std::string attack_csv_header() {
  return "sample_index,true_label,orig_pred,adv_pred,mode,norm,success,l0,l2,linf,c_final,"
         "iterations,seed";
}

std::string attack_csv_row(const AttackResult& r) {
  return text::join({std::to_string(r.sample_index), std::to_string(r.true_label),
                     std::to_string(r.original_prediction), std::to_string(r.adversarial_prediction),
                     to_string(r.mode), to_string(r.norm), r.success ? "1" : "0",
                     r.success ? std::to_string(r.l0) : "", r.success ? text::num(r.l2) : "",
                     r.success ? text::num(r.linf) : "", text::num(r.c_final),
                     std::to_string(r.iterations), std::to_string(r.seed)});
}

}  // namespace ddta
