#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <vector>

#include "ddta/graph.hpp"
#include "ddta/network.hpp"
#include "ddta/rng.hpp"

namespace ddta::testing {

inline std::optional<std::filesystem::path> mnist_dir() {
  const char* env = std::getenv("DDTA_DATA_DIR");
  std::filesystem::path p = env && *env ? env : "/root/data/mnist";
  if (std::filesystem::exists(p / "train-images-idx3-ubyte") ||
      std::filesystem::exists(p / "mnist" / "train-images-idx3-ubyte")) {
    return p;
  }
  return std::nullopt;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ddta-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Two-class affine model on a 1x1x2 input: class 1 iff x[0] > boundary.
/// `scale` sets the logit gap per unit of distance.
inline TrainedModel linear_boundary_model(double boundary, float scale = 10.0f) {
  auto m = build_model(ArchitectureSpec::perceptron(1, 2, 1, {}, 2), 1);
  const float b = float(boundary) * scale;
  m.parameters[0] = Tensor<float>(Shape{2, 2}, {-scale, 0, scale, 0});
  m.parameters[1] = Tensor<float>(Shape{2}, {b, -b});
  return m;
}

/// Two-class affine model on `n` pixels whose logits depend on one pixel.
inline TrainedModel single_pixel_model(std::size_t n, std::size_t pixel, float scale = 10.0f) {
  auto m = build_model(ArchitectureSpec::perceptron(1, n, 1, {}, 2), 1);
  std::vector<float> w(2 * n, 0.0f);
  w[pixel] = -scale;
  w[n + pixel] = scale;
  m.parameters[0] = Tensor<float>(Shape{2, n}, std::move(w));
  m.parameters[1] = Tensor<float>(Shape{2}, {scale / 2, -scale / 2});
  return m;
}

/// A small random graph built from every differentiable op. All leaves are
/// held in `leaves` so a finite-difference driver can perturb any of them.
struct RandomGraph {
  std::uint64_t seed = 0;
  std::vector<Tensor<double>> leaves;  // x, conv w/b, dense1 w/b, dense2 w/b
  std::size_t batch = 1, channels = 1, height = 5, width = 5, kernel = 2, conv_out = 2;
  std::size_t hidden = 4, classes = 3;
  double t1 = 1.0, t2 = 1.0, tau = 0.1;
  std::size_t pick = 0;
  bool use_tanh = false;
  std::vector<double> dropout_mask, target, ref, mask, fallback;

  explicit RandomGraph(std::uint64_t s) : seed(s) {
    rng::CounterRng r(rng::derive(s, 77));
    batch = 1 + s % 2;
    channels = 1 + r.below(2);
    height = 5 + r.below(3);
    width = 5 + r.below(3);
    kernel = 1 + r.below(3);
    conv_out = 1 + r.below(3);
    hidden = 3 + r.below(4);
    classes = 2 + r.below(3);
    t1 = r.uniform(0.5, 5.0);
    t2 = r.uniform(0.5, 5.0);
    tau = r.uniform(0.05, 0.3);
    pick = r.below(batch * classes);
    use_tanh = r.below(2) == 1;

    auto fill = [&](Shape shape, double scale) {
      Tensor<double> t(shape);
      for (auto& v : t.data()) v = r.uniform(-scale, scale);
      return t;
    };
    const std::size_t oh = height - kernel + 1, ow = width - kernel + 1;
    const std::size_t flat = conv_out * (oh / 2) * (ow / 2);
    leaves.push_back(fill({batch, channels, height, width}, 1.0));
    leaves.push_back(fill({conv_out, channels, kernel, kernel}, 0.8));
    leaves.push_back(fill({conv_out}, 0.3));
    leaves.push_back(fill({hidden, flat}, 0.8));
    leaves.push_back(fill({hidden}, 0.3));
    leaves.push_back(fill({classes, hidden}, 0.8));
    leaves.push_back(fill({classes}, 0.3));

    for (std::size_t i = 0; i < batch * hidden; ++i) dropout_mask.push_back(r.below(3) ? 1.5 : 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      double total = 0.0;
      std::vector<double> row(classes);
      for (auto& v : row) total += (v = r.uniform(0.1, 1.0));
      for (auto v : row) target.push_back(v / total);
    }
    // Keep |x - ref| away from tau and x away from the clamp bounds so that
    // no finite-difference probe straddles a kink of those ops.
    for (auto& v : leaves[0].data()) {
      if (std::abs(v - 0.5) < 0.01) v += 0.03;
      if (std::abs(v + 0.5) < 0.01) v += 0.03;
    }
    const auto x = leaves[0].data();
    for (double xi : x) {
      double d = r.uniform(0.0, 0.4);
      if (std::abs(d - tau) < 0.02) d = tau + 0.05;
      ref.push_back(xi - (r.below(2) ? d : -d));
      mask.push_back(double(r.below(2)));
      fallback.push_back(r.uniform(-1, 1));
    }
  }

  /// Scalar loss; when `grads` is given, fills d loss / d leaf.
  double eval(std::vector<std::vector<double>>* grads = nullptr) const {
    Graph<double> g;
    std::vector<std::size_t> ids;
    for (const auto& t : leaves) ids.push_back(g.input(t, true));
    auto act = [&](std::size_t n) { return use_tanh ? ddta::tanh(g, n) : relu(g, n); };
    auto h = conv2d(g, ids[0], ids[1], ids[2]);
    h = act(h);
    h = maxpool2d(g, h);
    h = flatten(g, h);
    h = dense(g, h, ids[3], ids[4]);
    h = dropout(g, h, dropout_mask);
    h = use_tanh ? relu(g, h) : ddta::tanh(g, h);
    const auto z = dense(g, h, ids[5], ids[6]);

    const Tensor<double> tgt(Shape{batch, classes}, target);
    auto loss = softmax_cross_entropy(g, z, tgt, t1);
    const auto p = softmax(g, z, t2);
    loss = add(g, loss, cross_entropy(g, p, tgt));
    loss = add(g, loss, dot(g, p, p));
    loss = add(g, loss, affine(g, select(g, p, pick), 2.0, 0.5));
    if (batch == 1) {
      const auto zf = flatten(g, z);
      loss = add(g, loss, margin(g, zf, MarginGoal::kUntargeted, pick % classes, 0.5));
      loss = add(g, loss, margin(g, zf, MarginGoal::kTargeted, (pick + 1) % classes, 0.5));
    }
    const auto x = ids[0];
    loss = add(g, loss, affine(g, squared_distance<double>(g, x, ref), 0.1, 0.0));
    loss = add(g, loss, abs_hinge<double>(g, x, ref, tau));
    const auto merged = mask_merge<double>(g, x, mask, fallback);
    const auto clamped = clamp(g, merged, -0.5, 0.5);
    loss = add(g, loss, sum(g, mul(g, clamped, clamped)));
    loss = sub(g, loss, affine(g, sum(g, merged), 0.05, 0.0));

    if (grads) {
      g.backward(loss);
      grads->clear();
      for (auto id : ids) {
        const auto gr = std::as_const(g).grad(id);
        grads->emplace_back(gr.begin(), gr.end());
      }
    }
    return g.value(loss)[0];
  }
};

struct FdReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

/// Central differences over every entry of every leaf. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline FdReport finite_difference_check(RandomGraph& net, double h, double floor = 1e-4) {
  std::vector<std::vector<double>> analytic;
  net.eval(&analytic);
  FdReport rep;
  for (std::size_t l = 0; l < net.leaves.size(); ++l) {
    auto data = net.leaves[l].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = net.eval();
      data[i] = keep - h;
      const double down = net.eval();
      data[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[l][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      rep.max_relative_error = std::max(rep.max_relative_error, std::abs(a - numeric) / denom);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace ddta::testing
