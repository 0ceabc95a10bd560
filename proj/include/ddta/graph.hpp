#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "ddta/tensor.hpp"

namespace ddta {

enum class Op : std::uint8_t {
  kInput,
  kBorrowed,
  kConv2d,
  kMaxPool2d,
  kDense,
  kRelu,
  kTanh,
  kFlatten,
  kDropout,
  kSoftmax,
  kSoftmaxCrossEntropy,
  kCrossEntropy,
  kSum,
  kDot,
  kAdd,
  kSub,
  kMul,
  kAffine,
  kSelect,
  kSquaredDistance,
  kAbsHinge,
  kMaskMerge,
  kClamp,
  kMargin,
};

const char* to_string(Op op);

/// Reverse-mode tape. Nodes are appended in evaluation order, so the order is
/// topological by construction. A graph belongs to one thread.
template <typename Real>
class Graph {
 public:
  using NodeId = std::size_t;
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Leaf owning its value.
  NodeId input(Tensor<Real> value, bool requires_grad = false);
  /// Leaf referencing caller storage, which must outlive the graph.
  NodeId borrow(std::span<const Real> data, Shape shape,
                bool requires_grad = false);
  /// Appends an operation node. `backward` may be empty for ops whose inputs
  /// never require gradients.
  NodeId emit(Op op, std::vector<NodeId> inputs, Tensor<Real> value,
              BackwardFn backward);

  std::size_t size() const noexcept { return nodes_.size(); }
  Op op(NodeId id) const { return at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return at(id).inputs; }
  const Shape& shape(NodeId id) const;
  std::span<const Real> value(NodeId id) const;
  TensorView<Real> view(NodeId id) const { return {value(id), &shape(id)}; }
  bool requires_grad(NodeId id) const { return at(id).requires_grad; }

  /// Gradient of the last backward seed w.r.t. this node. Empty span when the
  /// node does not require gradients.
  std::span<Real> grad(NodeId id);
  std::span<const Real> grad(NodeId id) const;

  /// Writable access to an owned leaf. Any later backward() fails until the
  /// graph is rebuilt, since downstream values are now stale.
  std::span<Real> mutable_value(NodeId id);

  /// Fills every reachable gradient with d(seed)/d(node). Seed must be scalar.
  void backward(NodeId seed);

  std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    Op op = Op::kInput;
    std::vector<NodeId> inputs;
    Tensor<Real> owned;
    std::span<const Real> borrowed;
    Shape borrowed_shape;
    bool is_borrowed = false;
    bool requires_grad = false;
    std::vector<Real> grad;
    BackwardFn backward;
  };

  Node& at(NodeId id);
  const Node& at(NodeId id) const;

  std::deque<Node> nodes_;
  bool stale_ = false;
  std::size_t visits_ = 0;
};

extern template class Graph<float>;
extern template class Graph<double>;

// ---------------------------------------------------------------------------
// Operations. Every op validates shapes and throws ShapeError naming the op
// and the offending shapes.

/// x [B,C,H,W], w [O,C,K,K], b [O] -> [B,O,H-K+1,W-K+1]. Valid padding,
/// stride 1.
template <typename Real>
std::size_t conv2d(Graph<Real>& g, std::size_t x, std::size_t w, std::size_t b);

/// 2x2 window, stride 2, floor on odd extents.
template <typename Real>
std::size_t maxpool2d(Graph<Real>& g, std::size_t x);

/// x [B,I], w [O,I], b [O] -> [B,O].
template <typename Real>
std::size_t dense(Graph<Real>& g, std::size_t x, std::size_t w, std::size_t b);

template <typename Real>
std::size_t relu(Graph<Real>& g, std::size_t x);

template <typename Real>
std::size_t tanh(Graph<Real>& g, std::size_t x);

/// [B, ...] -> [B, prod(...)].
template <typename Real>
std::size_t flatten(Graph<Real>& g, std::size_t x);

/// Multiplies by a fixed mask (already scaled by 1/keep).
template <typename Real>
std::size_t dropout(Graph<Real>& g, std::size_t x, std::vector<Real> mask);

/// Softmax over the last dimension of z / temperature, with max subtraction.
template <typename Real>
std::size_t softmax(Graph<Real>& g, std::size_t logits, double temperature);

/// Batch mean of -sum_i target_i * log softmax_T(z)_i, via log-sum-exp.
template <typename Real>
std::size_t softmax_cross_entropy(Graph<Real>& g, std::size_t logits,
                                  const Tensor<Real>& target,
                                  double temperature);

/// Batch mean of -sum_i target_i * log(max(p_i, 1e-12)).
template <typename Real>
std::size_t cross_entropy(Graph<Real>& g, std::size_t probs,
                          const Tensor<Real>& target);

template <typename Real>
std::size_t sum(Graph<Real>& g, std::size_t x);

template <typename Real>
std::size_t dot(Graph<Real>& g, std::size_t a, std::size_t b);

template <typename Real>
std::size_t add(Graph<Real>& g, std::size_t a, std::size_t b);

template <typename Real>
std::size_t sub(Graph<Real>& g, std::size_t a, std::size_t b);

template <typename Real>
std::size_t mul(Graph<Real>& g, std::size_t a, std::size_t b);

/// scale * x + shift, elementwise.
template <typename Real>
std::size_t affine(Graph<Real>& g, std::size_t x, Real scale, Real shift);

/// Scalar node holding x[index].
template <typename Real>
std::size_t select(Graph<Real>& g, std::size_t x, std::size_t index);

/// sum_i (x_i - ref_i)^2 against a constant reference.
template <typename Real>
std::size_t squared_distance(Graph<Real>& g, std::size_t x,
                             std::span<const Real> ref);

/// sum_i max(|x_i - ref_i| - tau, 0); subgradient sign(x_i - ref_i) where the
/// hinge is active, else 0.
template <typename Real>
std::size_t abs_hinge(Graph<Real>& g, std::size_t x, std::span<const Real> ref,
                      Real tau);

/// mask_i ? x_i : fallback_i, with mask entries 0 or 1.
template <typename Real>
std::size_t mask_merge(Graph<Real>& g, std::size_t x,
                       std::span<const Real> mask,
                       std::span<const Real> fallback);

/// Clamp to [lo, hi]; gradient passes where lo <= x <= hi.
template <typename Real>
std::size_t clamp(Graph<Real>& g, std::size_t x, Real lo, Real hi);

enum class MarginGoal { kTargeted, kUntargeted };

/// Targeted:   max(max_{i != c} z_i - z_c, -kappa)
/// Untargeted: max(z_c - max_{i != c} z_i, -kappa)
/// z must hold a single sample ([N] or [1,N]).
template <typename Real>
std::size_t margin(Graph<Real>& g, std::size_t logits, MarginGoal goal,
                   std::size_t cls, Real kappa);

}  // namespace ddta
