#include "ddta/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace ddta {

const char* to_string(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kBorrowed: return "borrowed";
    case Op::kConv2d: return "conv2d";
    case Op::kMaxPool2d: return "maxpool2d";
    case Op::kDense: return "dense";
    case Op::kRelu: return "relu";
    case Op::kTanh: return "tanh";
    case Op::kFlatten: return "flatten";
    case Op::kDropout: return "dropout";
    case Op::kSoftmax: return "softmax";
    case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::kCrossEntropy: return "cross_entropy";
    case Op::kSum: return "sum";
    case Op::kDot: return "dot";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAffine: return "affine";
    case Op::kSelect: return "select";
    case Op::kSquaredDistance: return "squared_distance";
    case Op::kAbsHinge: return "abs_hinge";
    case Op::kMaskMerge: return "mask_merge";
    case Op::kClamp: return "clamp";
    case Op::kMargin: return "margin";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Graph

template <typename Real>
typename Graph<Real>::Node& Graph<Real>::at(NodeId id) {
  if (id >= nodes_.size()) {
    throw InvalidArgument("node id " + std::to_string(id) + " out of range");
  }
  return nodes_[id];
}

template <typename Real>
const typename Graph<Real>::Node& Graph<Real>::at(NodeId id) const {
  if (id >= nodes_.size()) {
    throw InvalidArgument("node id " + std::to_string(id) + " out of range");
  }
  return nodes_[id];
}

template <typename Real>
std::size_t Graph<Real>::input(Tensor<Real> value, bool requires_grad) {
  Node n;
  n.op = Op::kInput;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename Real>
std::size_t Graph<Real>::borrow(std::span<const Real> data, Shape shape,
                                bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw ShapeError("borrowed storage of length " +
                     std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  }
  Node n;
  n.op = Op::kBorrowed;
  n.borrowed = data;
  n.borrowed_shape = std::move(shape);
  n.is_borrowed = true;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename Real>
std::size_t Graph<Real>::emit(Op op, std::vector<NodeId> inputs,
                              Tensor<Real> value, BackwardFn backward) {
  Node n;
  n.op = op;
  for (auto in : inputs) {
    if (in >= nodes_.size()) {
      throw InvalidArgument(std::string(to_string(op)) +
                            ": input node does not exist");
    }
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.owned = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename Real>
const Shape& Graph<Real>::shape(NodeId id) const {
  const auto& n = at(id);
  return n.is_borrowed ? n.borrowed_shape : n.owned.shape();
}

template <typename Real>
std::span<const Real> Graph<Real>::value(NodeId id) const {
  const auto& n = at(id);
  return n.is_borrowed ? n.borrowed : n.owned.data();
}

template <typename Real>
std::span<Real> Graph<Real>::grad(NodeId id) {
  auto& n = at(id);
  return n.grad;
}

template <typename Real>
std::span<const Real> Graph<Real>::grad(NodeId id) const {
  const auto& n = at(id);
  return n.grad;
}

template <typename Real>
std::span<Real> Graph<Real>::mutable_value(NodeId id) {
  auto& n = at(id);
  if (n.is_borrowed || !n.inputs.empty()) {
    throw InvalidArgument("only owned leaf nodes are writable");
  }
  stale_ = true;
  return n.owned.data();
}

template <typename Real>
void Graph<Real>::backward(NodeId seed) {
  if (stale_) {
    throw Error("backward: graph mutated since forward; rebuild it");
  }
  auto& s = at(seed);
  const auto seed_len = s.is_borrowed ? s.borrowed.size() : s.owned.size();
  if (seed_len != 1) {
    throw InvalidArgument("backward: seed must be scalar, got shape " +
                          shape_string(shape(seed)));
  }
  for (std::size_t i = 0; i <= seed; ++i) {
    auto& n = nodes_[i];
    if (!n.requires_grad) continue;
    const auto len = n.is_borrowed ? n.borrowed.size() : n.owned.size();
    n.grad.assign(len, Real(0));
  }
  for (std::size_t i = seed + 1; i < nodes_.size(); ++i) nodes_[i].grad.clear();
  visits_ = 0;
  if (!s.requires_grad) return;
  s.grad[0] = Real(1);
  for (std::size_t i = seed + 1; i-- > 0;) {
    ++visits_;
    auto& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward(*this, i);
  }
}

template class Graph<float>;
template class Graph<double>;

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename Real>
inline Real dot_n(const Real* a, const Real* b, std::size_t n) {
  Real acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename Real>
inline void axpy_n(Real alpha, const Real* x, Real* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// cols[(c*KH + kh)*KW + kw][oy*OW + ox] = in[c][oy + kh][ox + kw]
template <typename Real>
void im2col(const Real* in, std::size_t C, std::size_t H, std::size_t W,
            std::size_t KH, std::size_t KW, Real* cols) {
  const std::size_t OH = H - KH + 1, OW = W - KW + 1;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t kh = 0; kh < KH; ++kh) {
      for (std::size_t kw = 0; kw < KW; ++kw) {
        Real* row = cols + ((c * KH + kh) * KW + kw) * OH * OW;
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const Real* src = in + (c * H + oy + kh) * W + kw;
          std::copy(src, src + OW, row + oy * OW);
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds the columns back onto the image.
template <typename Real>
void col2im_add(const Real* cols, std::size_t C, std::size_t H, std::size_t W,
                std::size_t KH, std::size_t KW, Real* out) {
  const std::size_t OH = H - KH + 1, OW = W - KW + 1;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t kh = 0; kh < KH; ++kh) {
      for (std::size_t kw = 0; kw < KW; ++kw) {
        const Real* row = cols + ((c * KH + kh) * KW + kw) * OH * OW;
        for (std::size_t oy = 0; oy < OH; ++oy) {
          axpy_n(Real(1), row + oy * OW, out + (c * H + oy + kh) * W + kw, OW);
        }
      }
    }
  }
}

// y[O,P] += a[O,K] * b[K,P], four output rows per pass.
template <typename Real>
void gemm_nn(const Real* a, const Real* b, Real* y, std::size_t O, std::size_t K,
             std::size_t P) {
  std::size_t o = 0;
  for (; o + 4 <= O; o += 4) {
    Real* y0 = y + o * P;
    Real* y1 = y0 + P;
    Real* y2 = y1 + P;
    Real* y3 = y2 + P;
    for (std::size_t k = 0; k < K; ++k) {
      const Real a0 = a[o * K + k], a1 = a[(o + 1) * K + k];
      const Real a2 = a[(o + 2) * K + k], a3 = a[(o + 3) * K + k];
      const Real* r = b + k * P;
#pragma omp simd
      for (std::size_t p = 0; p < P; ++p) {
        const Real v = r[p];
        y0[p] += a0 * v;
        y1[p] += a1 * v;
        y2[p] += a2 * v;
        y3[p] += a3 * v;
      }
    }
  }
  for (; o < O; ++o) {
    for (std::size_t k = 0; k < K; ++k) axpy_n(a[o * K + k], b + k * P, y + o * P, P);
  }
}

// y[K,P] += a[O,K]^T * b[O,P], four output rows per pass.
template <typename Real>
void gemm_tn(const Real* a, const Real* b, Real* y, std::size_t O, std::size_t K,
             std::size_t P) {
  std::size_t k = 0;
  for (; k + 4 <= K; k += 4) {
    Real* y0 = y + k * P;
    Real* y1 = y0 + P;
    Real* y2 = y1 + P;
    Real* y3 = y2 + P;
    for (std::size_t o = 0; o < O; ++o) {
      const Real* w = a + o * K + k;
      const Real a0 = w[0], a1 = w[1], a2 = w[2], a3 = w[3];
      const Real* r = b + o * P;
#pragma omp simd
      for (std::size_t p = 0; p < P; ++p) {
        const Real v = r[p];
        y0[p] += a0 * v;
        y1[p] += a1 * v;
        y2[p] += a2 * v;
        y3[p] += a3 * v;
      }
    }
  }
  for (; k < K; ++k) {
    for (std::size_t o = 0; o < O; ++o) axpy_n(a[o * K + k], b + o * P, y + k * P, P);
  }
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void check_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw InvalidArgument("temperature must be positive and finite, got " +
                          std::to_string(t));
  }
}

template <typename Real>
void check_same(const Graph<Real>& g, const char* op, std::size_t a,
                std::size_t b) {
  if (g.shape(a) != g.shape(b)) {
    shape_fail(op, "operand shapes differ: " + shape_string(g.shape(a)) +
                       " vs " + shape_string(g.shape(b)));
  }
}

template <typename Real>
void check_ref(const Graph<Real>& g, const char* op, std::size_t x,
               std::size_t ref_len) {
  if (g.value(x).size() != ref_len) {
    shape_fail(op, "reference length " + std::to_string(ref_len) +
                       " does not match " + shape_string(g.shape(x)));
  }
}

}  // namespace

template <typename Real>
std::size_t conv2d(Graph<Real>& g, std::size_t x, std::size_t w,
                   std::size_t b) {
  const Shape& xs = g.shape(x);
  const Shape& ws = g.shape(w);
  const Shape& bs = g.shape(b);
  if (xs.size() != 4) shape_fail("conv2d", "input must be [B,C,H,W], got " + shape_string(xs));
  if (ws.size() != 4) shape_fail("conv2d", "weight must be [O,C,K,K], got " + shape_string(ws));
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t O = ws[0], KH = ws[2], KW = ws[3];
  if (ws[1] != C) {
    shape_fail("conv2d", "input " + shape_string(xs) + " has " +
                             std::to_string(C) + " channels, weight " +
                             shape_string(ws) + " expects " +
                             std::to_string(ws[1]));
  }
  if (bs.size() != 1 || bs[0] != O) {
    shape_fail("conv2d", "bias " + shape_string(bs) + " does not match " +
                             std::to_string(O) + " output channels");
  }
  if (KH > H || KW > W) {
    shape_fail("conv2d", "kernel " + shape_string(ws) +
                             " larger than input " + shape_string(xs));
  }
  const std::size_t OH = H - KH + 1, OW = W - KW + 1;
  const std::size_t K = C * KH * KW, P = OH * OW;
  Tensor<Real> out(Shape{B, O, OH, OW});
  {
    const Real* xd = g.value(x).data();
    const Real* wd = g.value(w).data();
    const Real* bd = g.value(b).data();
    Real* yd = out.data().data();
    std::vector<Real> cols(K * P);
    for (std::size_t n = 0; n < B; ++n) {
      Real* y = yd + n * O * P;
      for (std::size_t o = 0; o < O; ++o) std::fill(y + o * P, y + (o + 1) * P, bd[o]);
      im2col(xd + n * C * H * W, C, H, W, KH, KW, cols.data());
      gemm_nn(wd, cols.data(), y, O, K, P);
    }
  }
  return g.emit(
      Op::kConv2d, {x, w, b}, std::move(out),
      [=](Graph<Real>& gr, std::size_t self) {
        const Real* dy = gr.grad(self).data();
        const Real* xd = gr.value(x).data();
        const Real* wd = gr.value(w).data();
        auto dx = gr.grad(x);
        auto dw = gr.grad(w);
        auto db = gr.grad(b);
        std::vector<Real> cols(K * P);
        for (std::size_t n = 0; n < B; ++n) {
          const Real* gy = dy + n * O * P;
          if (!db.empty()) {
            for (std::size_t o = 0; o < O; ++o) {
              Real acc = 0;
              for (std::size_t i = 0; i < P; ++i) acc += gy[o * P + i];
              db[o] += acc;
            }
          }
          if (!dw.empty()) {
            im2col(xd + n * C * H * W, C, H, W, KH, KW, cols.data());
            for (std::size_t o = 0; o < O; ++o) {
              for (std::size_t k = 0; k < K; ++k) {
                dw[o * K + k] += dot_n(gy + o * P, cols.data() + k * P, P);
              }
            }
          }
          if (!dx.empty()) {
            std::fill(cols.begin(), cols.end(), Real(0));
            gemm_tn(wd, gy, cols.data(), O, K, P);
            col2im_add(cols.data(), C, H, W, KH, KW, dx.data() + n * C * H * W);
          }
        }
      });
}

template <typename Real>
std::size_t maxpool2d(Graph<Real>& g, std::size_t x) {
  const Shape& xs = g.shape(x);
  if (xs.size() != 4) shape_fail("maxpool2d", "input must be [B,C,H,W], got " + shape_string(xs));
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (H < 2 || W < 2) shape_fail("maxpool2d", "input " + shape_string(xs) + " smaller than the 2x2 window");
  const std::size_t OH = H / 2, OW = W / 2;
  Tensor<Real> out(Shape{B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const Real* xd = g.value(x).data();
  Real* yd = out.data().data();
  std::size_t k = 0;
  for (std::size_t p = 0; p < B * C; ++p) {
    const Real* in = xd + p * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox, ++k) {
        std::size_t best = (2 * oy) * W + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (auto c : cand) {
          if (in[c] > in[best]) best = c;
        }
        yd[k] = in[best];
        (*argmax)[k] = p * H * W + best;
      }
    }
  }
  return g.emit(Op::kMaxPool2d, {x}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < dy.size(); ++i) {
                    dx[(*argmax)[i]] += dy[i];
                  }
                });
}

template <typename Real>
std::size_t dense(Graph<Real>& g, std::size_t x, std::size_t w,
                  std::size_t b) {
  const Shape& xs = g.shape(x);
  const Shape& ws = g.shape(w);
  const Shape& bs = g.shape(b);
  if (xs.size() != 2) shape_fail("dense", "input must be [B,I], got " + shape_string(xs));
  if (ws.size() != 2 || ws[1] != xs[1]) {
    shape_fail("dense", "weight " + shape_string(ws) +
                            " incompatible with input " + shape_string(xs));
  }
  if (bs.size() != 1 || bs[0] != ws[0]) {
    shape_fail("dense", "bias " + shape_string(bs) +
                            " incompatible with weight " + shape_string(ws));
  }
  const std::size_t B = xs[0], I = xs[1], O = ws[0];
  Tensor<Real> out(Shape{B, O});
  const Real* xd = g.value(x).data();
  const Real* wd = g.value(w).data();
  const Real* bd = g.value(b).data();
  Real* yd = out.data().data();
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      yd[n * O + o] = bd[o] + dot_n(wd + o * I, xd + n * I, I);
    }
  }
  return g.emit(Op::kDense, {x, w, b}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  const Real* dy = gr.grad(self).data();
                  const Real* xd = gr.value(x).data();
                  const Real* wd = gr.value(w).data();
                  auto dx = gr.grad(x);
                  auto dw = gr.grad(w);
                  auto db = gr.grad(b);
                  for (std::size_t n = 0; n < B; ++n) {
                    for (std::size_t o = 0; o < O; ++o) {
                      const Real gy = dy[n * O + o];
                      if (gy == Real(0)) continue;
                      if (!dx.empty()) axpy_n(gy, wd + o * I, dx.data() + n * I, I);
                      if (!dw.empty()) axpy_n(gy, xd + n * I, dw.data() + o * I, I);
                      if (!db.empty()) db[o] += gy;
                    }
                  }
                });
}

template <typename Real>
std::size_t relu(Graph<Real>& g, std::size_t x) {
  auto xv = g.value(x);
  Tensor<Real> out(g.shape(x));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = xv[i] > Real(0) ? xv[i] : Real(0);
  }
  return g.emit(Op::kRelu, {x}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto xv = gr.value(x);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < dy.size(); ++i) {
                    if (xv[i] > Real(0)) dx[i] += dy[i];
                  }
                });
}

template <typename Real>
std::size_t tanh(Graph<Real>& g, std::size_t x) {
  auto xv = g.value(x);
  Tensor<Real> out(g.shape(x));
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  return g.emit(Op::kTanh, {x}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto yv = gr.value(self);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < dy.size(); ++i) {
                    dx[i] += dy[i] * (Real(1) - yv[i] * yv[i]);
                  }
                });
}

template <typename Real>
std::size_t flatten(Graph<Real>& g, std::size_t x) {
  const Shape& xs = g.shape(x);
  if (xs.size() < 2) shape_fail("flatten", "input must have a batch dimension, got " + shape_string(xs));
  const std::size_t B = xs[0];
  auto xv = g.value(x);
  Tensor<Real> out(Shape{B, xv.size() / B},
                   std::vector<Real>(xv.begin(), xv.end()));
  return g.emit(Op::kFlatten, {x}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                });
}

template <typename Real>
std::size_t dropout(Graph<Real>& g, std::size_t x, std::vector<Real> mask) {
  auto xv = g.value(x);
  if (mask.size() != xv.size()) {
    shape_fail("dropout", "mask length " + std::to_string(mask.size()) +
                              " does not match " + shape_string(g.shape(x)));
  }
  Tensor<Real> out(g.shape(x));
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
  auto m = std::make_shared<std::vector<Real>>(std::move(mask));
  return g.emit(Op::kDropout, {x}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < dy.size(); ++i) {
                    dx[i] += dy[i] * (*m)[i];
                  }
                });
}

template <typename Real>
std::size_t softmax(Graph<Real>& g, std::size_t logits, double temperature) {
  check_temperature(temperature);
  const Shape& zs = g.shape(logits);
  const std::size_t N = zs.back();
  auto zv = g.value(logits);
  const std::size_t rows = zv.size() / N;
  const Real inv_t = Real(1.0 / temperature);
  Tensor<Real> out(zs);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* z = zv.data() + r * N;
    Real* p = out.data().data() + r * N;
    Real m = z[0];
    for (std::size_t i = 0; i < N; ++i) {
      if (!std::isfinite(z[i])) {
        throw InvalidArgument("softmax: non-finite logit at index " +
                              std::to_string(r * N + i));
      }
      m = std::max(m, z[i]);
    }
    Real s = 0;
    for (std::size_t i = 0; i < N; ++i) {
      p[i] = std::exp((z[i] - m) * inv_t);
      s += p[i];
    }
    for (std::size_t i = 0; i < N; ++i) p[i] /= s;
  }
  return g.emit(Op::kSoftmax, {logits}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto pv = gr.value(self);
                  auto dz = gr.grad(logits);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const Real* p = pv.data() + r * N;
                    const Real* d = dy.data() + r * N;
                    Real s = 0;
                    for (std::size_t i = 0; i < N; ++i) s += d[i] * p[i];
                    for (std::size_t i = 0; i < N; ++i) {
                      dz[r * N + i] += p[i] * (d[i] - s) * inv_t;
                    }
                  }
                });
}

template <typename Real>
std::size_t softmax_cross_entropy(Graph<Real>& g, std::size_t logits,
                                  const Tensor<Real>& target,
                                  double temperature) {
  check_temperature(temperature);
  const Shape& zs = g.shape(logits);
  auto zv = g.value(logits);
  if (target.size() != zv.size()) {
    shape_fail("softmax_cross_entropy",
               "target " + shape_string(target.shape()) +
                   " does not match logits " + shape_string(zs));
  }
  const std::size_t N = zs.back();
  const std::size_t rows = zv.size() / N;
  const Real inv_t = Real(1.0 / temperature);
  auto probs = std::make_shared<std::vector<Real>>(zv.size());
  auto tsum = std::make_shared<std::vector<Real>>(rows);
  auto tgt = std::make_shared<std::vector<Real>>(target.storage());
  Real loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* z = zv.data() + r * N;
    const Real* t = tgt->data() + r * N;
    Real m = z[0];
    for (std::size_t i = 1; i < N; ++i) m = std::max(m, z[i]);
    Real s = 0;
    for (std::size_t i = 0; i < N; ++i) {
      (*probs)[r * N + i] = std::exp((z[i] - m) * inv_t);
      s += (*probs)[r * N + i];
    }
    const Real log_s = std::log(s);
    Real ts = 0;
    for (std::size_t i = 0; i < N; ++i) {
      (*probs)[r * N + i] /= s;
      loss -= t[i] * ((z[i] - m) * inv_t - log_s);
      ts += t[i];
    }
    (*tsum)[r] = ts;
  }
  loss /= Real(rows);
  return g.emit(Op::kSoftmaxCrossEntropy, {logits}, Tensor<Real>::scalar(loss),
                [=](Graph<Real>& gr, std::size_t self) {
                  const Real gy = gr.grad(self)[0];
                  auto dz = gr.grad(logits);
                  const Real k = gy * inv_t / Real(rows);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t i = 0; i < N; ++i) {
                      const std::size_t j = r * N + i;
                      dz[j] += k * ((*tsum)[r] * (*probs)[j] - (*tgt)[j]);
                    }
                  }
                });
}

template <typename Real>
std::size_t cross_entropy(Graph<Real>& g, std::size_t probs,
                          const Tensor<Real>& target) {
  constexpr Real kEps = Real(1e-12);
  auto pv = g.value(probs);
  if (target.size() != pv.size()) {
    shape_fail("cross_entropy", "target " + shape_string(target.shape()) +
                                    " does not match prediction " +
                                    shape_string(g.shape(probs)));
  }
  const std::size_t N = g.shape(probs).back();
  const std::size_t rows = pv.size() / N;
  auto tgt = std::make_shared<std::vector<Real>>(target.storage());
  Real loss = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    loss -= (*tgt)[i] * std::log(std::max(pv[i], kEps));
  }
  loss /= Real(rows);
  return g.emit(Op::kCrossEntropy, {probs}, Tensor<Real>::scalar(loss),
                [=](Graph<Real>& gr, std::size_t self) {
                  const Real gy = gr.grad(self)[0] / Real(rows);
                  auto pv = gr.value(probs);
                  auto dp = gr.grad(probs);
                  for (std::size_t i = 0; i < pv.size(); ++i) {
                    if (pv[i] > kEps) dp[i] -= gy * (*tgt)[i] / pv[i];
                  }
                });
}

template <typename Real>
std::size_t sum(Graph<Real>& g, std::size_t x) {
  Real s = 0;
  for (auto v : g.value(x)) s += v;
  return g.emit(Op::kSum, {x}, Tensor<Real>::scalar(s),
                [=](Graph<Real>& gr, std::size_t self) {
                  const Real gy = gr.grad(self)[0];
                  for (auto& d : gr.grad(x)) d += gy;
                });
}

template <typename Real>
std::size_t dot(Graph<Real>& g, std::size_t a, std::size_t b) {
  check_same(g, "dot", a, b);
  auto av = g.value(a);
  auto bv = g.value(b);
  Real s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return g.emit(Op::kDot, {a, b}, Tensor<Real>::scalar(s),
                [=](Graph<Real>& gr, std::size_t self) {
                  const Real gy = gr.grad(self)[0];
                  auto av = gr.value(a);
                  auto bv = gr.value(b);
                  auto da = gr.grad(a);
                  auto db = gr.grad(b);
                  for (std::size_t i = 0; i < av.size(); ++i) {
                    if (!da.empty()) da[i] += gy * bv[i];
                    if (!db.empty()) db[i] += gy * av[i];
                  }
                });
}

namespace {

template <typename Real, typename F, typename DA, typename DB>
std::size_t binary(Graph<Real>& g, Op op, std::size_t a, std::size_t b, F f,
                   DA da_fn, DB db_fn) {
  check_same(g, to_string(op), a, b);
  auto av = g.value(a);
  auto bv = g.value(b);
  Tensor<Real> out(g.shape(a));
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  return g.emit(op, {a, b}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto av = gr.value(a);
                  auto bv = gr.value(b);
                  auto da = gr.grad(a);
                  auto db = gr.grad(b);
                  for (std::size_t i = 0; i < dy.size(); ++i) {
                    if (!da.empty()) da[i] += dy[i] * da_fn(av[i], bv[i]);
                    if (!db.empty()) db[i] += dy[i] * db_fn(av[i], bv[i]);
                  }
                });
}

}  // namespace

template <typename Real>
std::size_t add(Graph<Real>& g, std::size_t a, std::size_t b) {
  return binary(
      g, Op::kAdd, a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real) { return Real(1); }, [](Real, Real) { return Real(1); });
}

template <typename Real>
std::size_t sub(Graph<Real>& g, std::size_t a, std::size_t b) {
  return binary(
      g, Op::kSub, a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real) { return Real(1); }, [](Real, Real) { return Real(-1); });
}

template <typename Real>
std::size_t mul(Graph<Real>& g, std::size_t a, std::size_t b) {
  return binary(
      g, Op::kMul, a, b, [](Real x, Real y) { return x * y; },
      [](Real, Real y) { return y; }, [](Real x, Real) { return x; });
}

template <typename Real>
std::size_t affine(Graph<Real>& g, std::size_t x, Real scale, Real shift) {
  auto xv = g.value(x);
  Tensor<Real> out(g.shape(x));
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = scale * xv[i] + shift;
  return g.emit(Op::kAffine, {x}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += scale * dy[i];
                });
}

template <typename Real>
std::size_t select(Graph<Real>& g, std::size_t x, std::size_t index) {
  auto xv = g.value(x);
  if (index >= xv.size()) {
    shape_fail("select", "index " + std::to_string(index) + " outside " +
                             shape_string(g.shape(x)));
  }
  return g.emit(Op::kSelect, {x}, Tensor<Real>::scalar(xv[index]),
                [=](Graph<Real>& gr, std::size_t self) {
                  gr.grad(x)[index] += gr.grad(self)[0];
                });
}

template <typename Real>
std::size_t squared_distance(Graph<Real>& g, std::size_t x,
                             std::span<const Real> ref) {
  check_ref(g, "squared_distance", x, ref.size());
  auto xv = g.value(x);
  Real s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const Real d = xv[i] - ref[i];
    s += d * d;
  }
  return g.emit(Op::kSquaredDistance, {x}, Tensor<Real>::scalar(s),
                [=](Graph<Real>& gr, std::size_t self) {
                  const Real gy = gr.grad(self)[0];
                  auto xv = gr.value(x);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < xv.size(); ++i) {
                    dx[i] += gy * Real(2) * (xv[i] - ref[i]);
                  }
                });
}

template <typename Real>
std::size_t abs_hinge(Graph<Real>& g, std::size_t x, std::span<const Real> ref,
                      Real tau) {
  check_ref(g, "abs_hinge", x, ref.size());
  auto xv = g.value(x);
  Real s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    s += std::max(std::abs(xv[i] - ref[i]) - tau, Real(0));
  }
  return g.emit(Op::kAbsHinge, {x}, Tensor<Real>::scalar(s),
                [=](Graph<Real>& gr, std::size_t self) {
                  const Real gy = gr.grad(self)[0];
                  auto xv = gr.value(x);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < xv.size(); ++i) {
                    const Real d = xv[i] - ref[i];
                    if (std::abs(d) > tau) dx[i] += d > 0 ? gy : -gy;
                  }
                });
}

template <typename Real>
std::size_t mask_merge(Graph<Real>& g, std::size_t x,
                       std::span<const Real> mask,
                       std::span<const Real> fallback) {
  check_ref(g, "mask_merge", x, mask.size());
  check_ref(g, "mask_merge", x, fallback.size());
  auto xv = g.value(x);
  Tensor<Real> out(g.shape(x));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = mask[i] != Real(0) ? xv[i] : fallback[i];
  }
  return g.emit(Op::kMaskMerge, {x}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < dy.size(); ++i) {
                    if (mask[i] != Real(0)) dx[i] += dy[i];
                  }
                });
}

template <typename Real>
std::size_t clamp(Graph<Real>& g, std::size_t x, Real lo, Real hi) {
  auto xv = g.value(x);
  Tensor<Real> out(g.shape(x));
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::clamp(xv[i], lo, hi);
  return g.emit(Op::kClamp, {x}, std::move(out),
                [=](Graph<Real>& gr, std::size_t self) {
                  auto dy = gr.grad(self);
                  auto xv = gr.value(x);
                  auto dx = gr.grad(x);
                  for (std::size_t i = 0; i < dy.size(); ++i) {
                    if (xv[i] >= lo && xv[i] <= hi) dx[i] += dy[i];
                  }
                });
}

template <typename Real>
std::size_t margin(Graph<Real>& g, std::size_t logits, MarginGoal goal,
                   std::size_t cls, Real kappa) {
  const Shape& zs = g.shape(logits);
  auto zv = g.value(logits);
  const std::size_t N = zs.back();
  if (zv.size() != N) {
    shape_fail("margin", "expects a single sample, got " + shape_string(zs));
  }
  if (N < 2) shape_fail("margin", "needs at least two classes");
  if (cls >= N) {
    throw InvalidArgument("margin: class " + std::to_string(cls) +
                          " out of range for " + std::to_string(N) +
                          " classes");
  }
  std::size_t other = cls == 0 ? 1 : 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (i != cls && zv[i] > zv[other]) other = i;
  }
  const Real inner = goal == MarginGoal::kTargeted ? zv[other] - zv[cls]
                                                   : zv[cls] - zv[other];
  const bool active = inner > -kappa;
  const Real value = active ? inner : -kappa;
  return g.emit(Op::kMargin, {logits}, Tensor<Real>::scalar(value),
                [=](Graph<Real>& gr, std::size_t self) {
                  if (!active) return;
                  const Real gy = gr.grad(self)[0];
                  auto dz = gr.grad(logits);
                  const Real sign = goal == MarginGoal::kTargeted ? Real(1) : Real(-1);
                  dz[other] += sign * gy;
                  dz[cls] -= sign * gy;
                });
}

#define DDTA_INSTANTIATE_OPS(R)                                                \
  template std::size_t conv2d<R>(Graph<R>&, std::size_t, std::size_t,          \
                                 std::size_t);                                 \
  template std::size_t maxpool2d<R>(Graph<R>&, std::size_t);                   \
  template std::size_t dense<R>(Graph<R>&, std::size_t, std::size_t,           \
                                std::size_t);                                  \
  template std::size_t relu<R>(Graph<R>&, std::size_t);                        \
  template std::size_t tanh<R>(Graph<R>&, std::size_t);                        \
  template std::size_t flatten<R>(Graph<R>&, std::size_t);                     \
  template std::size_t dropout<R>(Graph<R>&, std::size_t, std::vector<R>);     \
  template std::size_t softmax<R>(Graph<R>&, std::size_t, double);             \
  template std::size_t softmax_cross_entropy<R>(Graph<R>&, std::size_t,        \
                                                const Tensor<R>&, double);     \
  template std::size_t cross_entropy<R>(Graph<R>&, std::size_t,                \
                                        const Tensor<R>&);                     \
  template std::size_t sum<R>(Graph<R>&, std::size_t);                         \
  template std::size_t dot<R>(Graph<R>&, std::size_t, std::size_t);            \
  template std::size_t add<R>(Graph<R>&, std::size_t, std::size_t);            \
  template std::size_t sub<R>(Graph<R>&, std::size_t, std::size_t);            \
  template std::size_t mul<R>(Graph<R>&, std::size_t, std::size_t);            \
  template std::size_t affine<R>(Graph<R>&, std::size_t, R, R);                \
  template std::size_t select<R>(Graph<R>&, std::size_t, std::size_t);         \
  template std::size_t squared_distance<R>(Graph<R>&, std::size_t,             \
                                           std::span<const R>);                \
  template std::size_t abs_hinge<R>(Graph<R>&, std::size_t,                    \
                                    std::span<const R>, R);                    \
  template std::size_t mask_merge<R>(Graph<R>&, std::size_t,                   \
                                     std::span<const R>, std::span<const R>);  \
  template std::size_t clamp<R>(Graph<R>&, std::size_t, R, R);                 \
  template std::size_t margin<R>(Graph<R>&, std::size_t, MarginGoal,           \
                                 std::size_t, R);

DDTA_INSTANTIATE_OPS(float)
DDTA_INSTANTIATE_OPS(double)

#undef DDTA_INSTANTIATE_OPS

}  // namespace ddta
