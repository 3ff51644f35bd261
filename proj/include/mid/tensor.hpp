#pragma once

// Dense float32 tensors with define-by-run reverse-mode autodiff.
//
// Every op records a node on a thread-local tape when gradients are wanted;
// backward(loss) replays the tape in reverse and then clears it. Layout is
// row-major throughout, images are [B,C,H,W].

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "mid/common.hpp"

namespace mid {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    MID_CHECK(d > 0, "non-positive dim in shape " << shape_str(s));
    n *= d;
  }
  return n;
}

struct TensorData {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  uint64_t tape_epoch = 0;  // matches the graph's epoch while attached
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false) {
    MID_CHECK(shape_numel(shape) == int64_t(values.size()),
              "shape " << shape_str(shape) << " does not match " << values.size() << " values");
    d_ = std::make_shared<TensorData>();
    d_->shape = std::move(shape);
    d_->values = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<float> v(size_t(shape_numel(shape)), 0.0f);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    std::vector<float> v(size_t(shape_numel(shape)), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  bool defined() const { return bool(d_); }
  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[size_t(i)]; }
  int rank() const { return int(d_->shape.size()); }
  int64_t numel() const { return int64_t(d_->values.size()); }

  float* data() { return d_->values.data(); }
  const float* data() const { return d_->values.data(); }
  std::vector<float>& values() { return d_->values; }
  const std::vector<float>& values() const { return d_->values; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  std::vector<float>& grad() {
    MID_CHECK(has_grad(), "tensor has no gradient");
    return d_->grad;
  }
  const std::vector<float>& grad() const {
    MID_CHECK(has_grad(), "tensor has no gradient");
    return d_->grad;
  }
  float* grad_accum() {  // allocate-on-first-use accumulation buffer
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0f);
    return d_->grad.data();
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
  }
  void drop_grad() { d_->grad.clear(); }

  float item() const {
    MID_CHECK(numel() == 1, "item() on non-scalar tensor " << shape_str(shape()));
    return d_->values[0];
  }

  // Same storage, detached from the tape, never a leaf.
  Tensor detach() const {
    Tensor t(d_->shape, d_->values, false);
    return t;
  }

  Tensor clone() const { return Tensor(d_->shape, d_->values, d_->requires_grad); }

  bool same_storage(const Tensor& o) const { return d_.get() == o.d_.get(); }
  const void* storage_id() const { return d_.get(); }
  TensorData* unsafe_data() const { return d_.get(); }

 private:
  std::shared_ptr<TensorData> d_;
};

inline void check_all_finite(const float* p, int64_t n, const char* ctx) {
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) {
      MID_CHECK(false, "non-finite value in " << ctx << " at index " << i << ": " << p[i]);
    }
  }
}

inline void check_finite(const Tensor& t, const char* ctx) {
  check_all_finite(t.data(), t.numel(), ctx);
}

// ---------------------------------------------------------------------------
// Tape

struct GraphNode {
  Tensor out;
  std::vector<Tensor> inputs;
  std::function<void()> backward;
  const char* op;
};

class Graph {
 public:
  uint64_t epoch() const { return epoch_; }
  size_t size() const { return nodes_.size(); }
  const std::vector<GraphNode>& nodes() const { return nodes_; }

  bool attached(const Tensor& t) const {
    return t.defined() && t.unsafe_data()->tape_epoch == epoch_ && epoch_ > 0;
  }

  void record(Tensor out, std::vector<Tensor> inputs, std::function<void()> backward,
              const char* op) {
    if (epoch_ == 0) epoch_ = 1;
    out.unsafe_data()->tape_epoch = epoch_;
    nodes_.push_back(GraphNode{std::move(out), std::move(inputs), std::move(backward), op});
  }

  void backward(const Tensor& loss) {
    MID_CHECK(loss.defined() && loss.numel() == 1,
              "backward needs a scalar loss, got " << (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
    int idx = -1;
    for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
      if (nodes_[size_t(i)].out.same_storage(loss)) {
        idx = i;
        break;
      }
    }
    MID_CHECK(idx >= 0 && attached(loss), "backward on a detached loss (not recorded on this graph)");
    loss.unsafe_data()->grad.assign(1, 1.0f);
    for (int i = idx; i >= 0; --i) {
      GraphNode& n = nodes_[size_t(i)];
      if (!n.out.unsafe_data()->grad.empty()) n.backward();
    }
    for (int i = idx; i >= 0; --i) {
      for (const Tensor& in : nodes_[size_t(i)].inputs) {
        if (in.has_grad()) check_all_finite(in.grad().data(), in.numel(), nodes_[size_t(i)].op);
      }
    }
    clear();
  }

  void clear() {
    nodes_.clear();
    ++epoch_;
  }

 private:
  std::vector<GraphNode> nodes_;
  uint64_t epoch_ = 1;
};

inline Graph& graph() {
  thread_local Graph g;
  return g;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool track(const Tensor& t) {
  return t.requires_grad() || graph().attached(t);
}

template <typename... Ts>
inline bool needs_grad(const Ts&... ts) {
  return grad_mode() && (track(ts) || ...);
}

inline void backward(const Tensor& loss) { graph().backward(loss); }

// ---------------------------------------------------------------------------
// GEMM kernels (row-major). Plain loops; -O3 vectorizes the inner axpy/dot.

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(int M, int N, int K, const float* A, const float* B, float* C) {
  for (int i = 0; i < M; ++i) {
    float* c = C + size_t(i) * N;
    const float* a = A + size_t(i) * K;
    for (int k = 0; k < K; ++k) {
      const float av = a[k];
      const float* b = B + size_t(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C) {
  for (int i = 0; i < M; ++i) {
    const float* a = A + size_t(i) * K;
    float* c = C + size_t(i) * N;
    for (int j = 0; j < N; ++j) {
      const float* b = B + size_t(j) * K;
      float acc = 0.0f;
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(int M, int N, int K, const float* A, const float* B, float* C) {
  for (int k = 0; k < K; ++k) {
    const float* a = A + size_t(k) * M;
    const float* b = B + size_t(k) * N;
    for (int i = 0; i < M; ++i) {
      const float av = a[i];
      float* c = C + size_t(i) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  MID_CHECK(a.shape() == b.shape(),
            op << ": shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
}

template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  check_same_shape(a, b, name);
  const int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  fwd(a.data(), b.data(), out.data(), n);
  check_finite(out, name);
  if (needs_grad(a, b)) {
    Tensor ac = a, bc = b, oc = out;
    graph().record(out, {a, b}, [ac, bc, oc, bwd, n]() mutable { bwd(ac, bc, oc, n); }, name);
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add",
      [](const float* x, const float* y, float* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
      },
      [](Tensor& a, Tensor& b, Tensor& o, int64_t n) {
        const float* g = o.grad().data();
        if (track(a)) {
          float* ga = a.grad_accum();
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (track(b)) {
          float* gb = b.grad_accum();
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub",
      [](const float* x, const float* y, float* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
      },
      [](Tensor& a, Tensor& b, Tensor& o, int64_t n) {
        const float* g = o.grad().data();
        if (track(a)) {
          float* ga = a.grad_accum();
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (track(b)) {
          float* gb = b.grad_accum();
          for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul",
      [](const float* x, const float* y, float* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
      },
      [](Tensor& a, Tensor& b, Tensor& o, int64_t n) {
        const float* g = o.grad().data();
        if (track(a)) {
          float* ga = a.grad_accum();
          const float* y = b.data();
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
        }
        if (track(b)) {
          float* gb = b.grad_accum();
          const float* x = a.data();
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * x[i];
        }
      });
}

inline Tensor scale(const Tensor& a, float s) {
  const int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const float* x = a.data();
  float* o = out.data();
  for (int64_t i = 0; i < n; ++i) o[i] = x[i] * s;
  check_finite(out, "scale");
  if (needs_grad(a)) {
    Tensor ac = a, oc = out;
    graph().record(out, {a},
                   [ac, oc, s, n]() mutable {
                     const float* g = oc.grad().data();
                     float* ga = ac.grad_accum();
                     for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
                   },
                   "scale");
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, float s) {
  const int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const float* x = a.data();
  float* o = out.data();
  for (int64_t i = 0; i < n; ++i) o[i] = x[i] + s;
  check_finite(out, "add_scalar");
  if (needs_grad(a)) {
    Tensor ac = a, oc = out;
    graph().record(out, {a},
                   [ac, oc, n]() mutable {
                     const float* g = oc.grad().data();
                     float* ga = ac.grad_accum();
                     for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
                   },
                   "add_scalar");
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  const int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const float* x = a.data();
  float* o = out.data();
  for (int64_t i = 0; i < n; ++i) o[i] = x[i] > 0.0f ? x[i] : 0.0f;
  check_finite(out, "relu");
  if (needs_grad(a)) {
    Tensor ac = a, oc = out;
    graph().record(out, {a},
                   [ac, oc, n]() mutable {
                     const float* g = oc.grad().data();
                     const float* x = ac.data();
                     float* ga = ac.grad_accum();
                     for (int64_t i = 0; i < n; ++i) ga[i] += x[i] > 0.0f ? g[i] : 0.0f;
                   },
                   "relu");
  }
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  const int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const float* x = a.data();
  float* o = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const float v = x[i];
    o[i] = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
  }
  check_finite(out, "sigmoid");
  if (needs_grad(a)) {
    Tensor ac = a, oc = out;
    graph().record(out, {a},
                   [ac, oc, n]() mutable {
                     const float* g = oc.grad().data();
                     const float* y = oc.data();
                     float* ga = ac.grad_accum();
                     for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i] * (1.0f - y[i]);
                   },
                   "sigmoid");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  MID_CHECK(x.rank() == 2 && w.rank() == 2 && b.rank() == 1,
            "linear expects x[B,I], w[I,O], b[O], got " << shape_str(x.shape()) << " "
                                                        << shape_str(w.shape()) << " "
                                                        << shape_str(b.shape()));
  const int B = x.dim(0), I = x.dim(1), O = w.dim(1);
  MID_CHECK(w.dim(0) == I, "linear: inner dims disagree, x " << shape_str(x.shape()) << " vs w "
                                                             << shape_str(w.shape()));
  MID_CHECK(b.dim(0) == O, "linear: bias dim " << b.dim(0) << " != " << O);
  Tensor out = Tensor::zeros({B, O});
  gemm_nn(B, O, I, x.data(), w.data(), out.data());
  float* o = out.data();
  const float* bias = b.data();
  for (int bi = 0; bi < B; ++bi)
    for (int j = 0; j < O; ++j) o[size_t(bi) * O + j] += bias[j];
  check_finite(out, "linear");
  if (needs_grad(x, w, b)) {
    Tensor xc = x, wc = w, bc = b, oc = out;
    graph().record(out, {x, w, b},
                   [xc, wc, bc, oc, B, I, O]() mutable {
                     const float* g = oc.grad().data();
                     if (track(xc)) gemm_nt(B, I, O, g, wc.data(), xc.grad_accum());
                     if (track(wc)) gemm_tn(I, O, B, xc.data(), g, wc.grad_accum());
                     if (track(bc)) {
                       float* gb = bc.grad_accum();
                       for (int bi = 0; bi < B; ++bi)
                         for (int j = 0; j < O; ++j) gb[j] += g[size_t(bi) * O + j];
                     }
                   },
                   "linear");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), im2col + GEMM

namespace detail {

inline void im2col(const float* x, int C, int H, int W, int S, int stride, int pad, int Ho, int Wo,
                   float* col) {
  const int N = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int u = 0; u < S; ++u) {
      for (int v = 0; v < S; ++v) {
        float* row = col + size_t((c * S + u) * S + v) * N;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride + u - pad;
          float* r = row + size_t(oh) * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(r, r + Wo, 0.0f);
            continue;
          }
          const float* xr = x + (size_t(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride + v - pad;
            r[ow] = (iw >= 0 && iw < W) ? xr[iw] : 0.0f;
          }
        }
      }
    }
  }
}

inline void col2im_acc(const float* col, int C, int H, int W, int S, int stride, int pad, int Ho,
                       int Wo, float* gx) {
  const int N = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int u = 0; u < S; ++u) {
      for (int v = 0; v < S; ++v) {
        const float* row = col + size_t((c * S + u) * S + v) * N;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride + u - pad;
          if (ih < 0 || ih >= H) continue;
          const float* r = row + size_t(oh) * Wo;
          float* xr = gx + (size_t(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride + v - pad;
            if (iw >= 0 && iw < W) xr[iw] += r[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  MID_CHECK(x.rank() == 4 && w.rank() == 4,
            "conv2d expects x[B,C,H,W], w[Cout,Cin,S,S], got " << shape_str(x.shape()) << " and "
                                                               << shape_str(w.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), Ci = w.dim(1), S = w.dim(2);
  MID_CHECK(w.dim(3) == S && S % 2 == 1, "conv2d: filters must be square with odd size, got "
                                             << shape_str(w.shape()));
  MID_CHECK(Ci == C, "conv2d: input has " << C << " channels, filters expect " << Ci);
  MID_CHECK(H >= 1 && W >= 1 && pad >= 0 && stride >= 1, "conv2d: bad geometry");
  MID_CHECK((H + 2 * pad - S) >= 0 && (W + 2 * pad - S) >= 0,
            "conv2d: kernel larger than padded input");
  MID_CHECK((H + 2 * pad - S) % stride == 0 && (W + 2 * pad - S) % stride == 0,
            "conv2d: non-integral output size for H=" << H << " W=" << W << " S=" << S << " stride="
                                                      << stride << " pad=" << pad);
  const int Ho = (H + 2 * pad - S) / stride + 1;
  const int Wo = (W + 2 * pad - S) / stride + 1;
  const int K = C * S * S, N = Ho * Wo;

  Tensor out = Tensor::zeros({B, Co, Ho, Wo});
  std::vector<float> col(size_t(K) * N);
  for (int b = 0; b < B; ++b) {
    detail::im2col(x.data() + size_t(b) * C * H * W, C, H, W, S, stride, pad, Ho, Wo, col.data());
    gemm_nn(Co, N, K, w.data(), col.data(), out.data() + size_t(b) * Co * N);
  }
  check_finite(out, "conv2d");

  if (needs_grad(x, w)) {
    Tensor xc = x, wc = w, oc = out;
    graph().record(out, {x, w},
                   [xc, wc, oc, B, C, H, W, Co, S, stride, pad, Ho, Wo, K, N]() mutable {
                     const float* g = oc.grad().data();
                     std::vector<float> col(size_t(K) * N);
                     const bool need_x = track(xc);
                     const bool need_w = track(wc);
                     float* gw = need_w ? wc.grad_accum() : nullptr;
                     float* gx = need_x ? xc.grad_accum() : nullptr;
                     std::vector<float> gcol;
                     if (need_x) gcol.resize(size_t(K) * N);
                     for (int b = 0; b < B; ++b) {
                       const float* gb = g + size_t(b) * Co * N;
                       if (need_w) {
                         detail::im2col(xc.data() + size_t(b) * C * H * W, C, H, W, S, stride, pad,
                                        Ho, Wo, col.data());
                         gemm_nt(Co, K, N, gb, col.data(), gw);
                       }
                       if (need_x) {
                         std::fill(gcol.begin(), gcol.end(), 0.0f);
                         gemm_tn(K, N, Co, wc.data(), gb, gcol.data());
                         detail::col2im_acc(gcol.data(), C, H, W, S, stride, pad, Ho, Wo,
                                            gx + size_t(b) * C * H * W);
                       }
                     }
                   },
                   "conv2d");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over [B,C,H,W], per channel, eps 1e-5. Normalization uses
// the biased batch variance; the running estimate tracks the unbiased one.

inline Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           Tensor& running_mean, Tensor& running_var, bool training,
                           float momentum = 0.1f, float eps = 1e-5f,
                           bool update_running = true) {
  MID_CHECK(x.rank() == 4, "batch_norm2d expects [B,C,H,W], got " << shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  MID_CHECK(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 && beta.dim(0) == C,
            "batch_norm2d: gamma/beta must be [C]");
  MID_CHECK(running_mean.numel() == C && running_var.numel() == C,
            "batch_norm2d: running stats must be [C]");
  const int64_t n_per_c = int64_t(B) * H * W;
  MID_CHECK(!training || n_per_c >= 2, "batch_norm2d: train mode needs at least 2 elements per channel");

  const int64_t plane = int64_t(H) * W;
  std::vector<float> mean(size_t(C), 0.0f), inv_std(size_t(C), 0.0f);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0, s2 = 0.0;
      for (int b = 0; b < B; ++b) {
        const float* p = x.data() + (size_t(b) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          s += p[i];
          s2 += double(p[i]) * p[i];
        }
      }
      const double m = s / double(n_per_c);
      const double var = std::max(0.0, s2 / double(n_per_c) - m * m);
      mean[size_t(c)] = float(m);
      inv_std[size_t(c)] = float(1.0 / std::sqrt(var + eps));
      if (update_running) {
        const double var_u = var * double(n_per_c) / double(n_per_c - 1);
        running_mean.data()[c] = (1.0f - momentum) * running_mean.data()[c] + momentum * float(m);
        running_var.data()[c] =
            (1.0f - momentum) * running_var.data()[c] + momentum * float(var_u);
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[size_t(c)] = running_mean.data()[c];
      inv_std[size_t(c)] = 1.0f / std::sqrt(running_var.data()[c] + eps);
    }
  }

  Tensor out = Tensor::zeros(x.shape());
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const float* p = x.data() + (size_t(b) * C + c) * plane;
      float* o = out.data() + (size_t(b) * C + c) * plane;
      const float m = mean[size_t(c)], is = inv_std[size_t(c)];
      const float g = gamma.data()[c], bt = beta.data()[c];
      for (int64_t i = 0; i < plane; ++i) o[i] = (p[i] - m) * is * g + bt;
    }
  }
  check_finite(out, "batch_norm2d");

  if (needs_grad(x, gamma, beta)) {
    Tensor xc = x, gc = gamma, bc = beta, oc = out;
    graph().record(
        out, {x, gamma, beta},
        [xc, gc, bc, oc, mean, inv_std, B, C, plane, n_per_c, training]() mutable {
          const float* g = oc.grad().data();
          const bool need_x = track(xc);
          std::vector<float> sum_g(size_t(C), 0.0f), sum_gx(size_t(C), 0.0f);
          for (int c = 0; c < C; ++c) {
            double sg = 0.0, sgx = 0.0;
            for (int b = 0; b < B; ++b) {
              const size_t off = (size_t(b) * C + c) * size_t(plane);
              const float* gp = g + off;
              const float* xp = xc.data() + off;
              const float m = mean[size_t(c)], is = inv_std[size_t(c)];
              for (int64_t i = 0; i < plane; ++i) {
                sg += gp[i];
                sgx += double(gp[i]) * ((xp[i] - m) * is);
              }
            }
            sum_g[size_t(c)] = float(sg);
            sum_gx[size_t(c)] = float(sgx);
          }
          if (track(gc)) {
            float* gg = gc.grad_accum();
            for (int c = 0; c < C; ++c) gg[c] += sum_gx[size_t(c)];
          }
          if (track(bc)) {
            float* gb = bc.grad_accum();
            for (int c = 0; c < C; ++c) gb[c] += sum_g[size_t(c)];
          }
          if (need_x) {
            float* gx = xc.grad_accum();
            const float inv_n = 1.0f / float(n_per_c);
            for (int b = 0; b < B; ++b) {
              for (int c = 0; c < C; ++c) {
                const size_t off = (size_t(b) * C + c) * size_t(plane);
                const float* gp = g + off;
                const float* xp = xc.data() + off;
                float* gxp = gx + off;
                const float m = mean[size_t(c)], is = inv_std[size_t(c)];
                const float ga = gc.data()[c];
                const float mg = sum_g[size_t(c)] * inv_n;
                const float mgx = sum_gx[size_t(c)] * inv_n;
                if (training) {
                  for (int64_t i = 0; i < plane; ++i) {
                    const float xh = (xp[i] - m) * is;
                    gxp[i] += ga * is * (gp[i] - mg - xh * mgx);
                  }
                } else {
                  for (int64_t i = 0; i < plane; ++i) gxp[i] += ga * is * gp[i];
                }
              }
            }
          }
        },
        "batch_norm2d");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling

inline Tensor pool_global_avg(const Tensor& x) {
  MID_CHECK(x.rank() == 4, "pool_global_avg expects [B,C,H,W]");
  const int B = x.dim(0), C = x.dim(1);
  const int64_t plane = int64_t(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros({B, C});
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const float* p = x.data() + (size_t(b) * C + c) * plane;
      double s = 0.0;
      for (int64_t i = 0; i < plane; ++i) s += p[i];
      out.data()[size_t(b) * C + c] = float(s / double(plane));
    }
  }
  check_finite(out, "pool_global_avg");
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc, B, C, plane]() mutable {
                     const float* g = oc.grad().data();
                     float* gx = xc.grad_accum();
                     const float inv = 1.0f / float(plane);
                     for (int b = 0; b < B; ++b)
                       for (int c = 0; c < C; ++c) {
                         const float gv = g[size_t(b) * C + c] * inv;
                         float* p = gx + (size_t(b) * C + c) * plane;
                         for (int64_t i = 0; i < plane; ++i) p[i] += gv;
                       }
                   },
                   "pool_global_avg");
  }
  return out;
}

// Region average pooling: height split into G contiguous stripes, each averaged
// over its rows and the full width. Output [B,C,G].
inline Tensor pool_region_avg(const Tensor& x, int G) {
  MID_CHECK(x.rank() == 4, "pool_region_avg expects [B,C,H,W]");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  MID_CHECK(G >= 1 && G <= H, "pool_region_avg: G=" << G << " exceeds H=" << H);
  Tensor out = Tensor::zeros({B, C, G});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float* p = x.data() + (size_t(b) * C + c) * H * W;
      for (int g = 0; g < G; ++g) {
        auto [lo, hi] = stripe_bounds(H, G, g);
        double s = 0.0;
        for (int h = lo; h < hi; ++h)
          for (int w = 0; w < W; ++w) s += p[size_t(h) * W + w];
        out.data()[(size_t(b) * C + c) * G + g] = float(s / double(int64_t(hi - lo) * W));
      }
    }
  check_finite(out, "pool_region_avg");
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc, B, C, H, W, G]() mutable {
                     const float* g = oc.grad().data();
                     float* gx = xc.grad_accum();
                     for (int b = 0; b < B; ++b)
                       for (int c = 0; c < C; ++c) {
                         float* p = gx + (size_t(b) * C + c) * H * W;
                         for (int r = 0; r < G; ++r) {
                           auto [lo, hi] = stripe_bounds(H, G, r);
                           const float gv =
                               g[(size_t(b) * C + c) * G + r] / float(int64_t(hi - lo) * W);
                           for (int h = lo; h < hi; ++h)
                             for (int w = 0; w < W; ++w) p[size_t(h) * W + w] += gv;
                         }
                       }
                   },
                   "pool_region_avg");
  }
  return out;
}

// 2x2 average pooling with stride 2; needs even H and W.
inline Tensor avg_pool2x2(const Tensor& x) {
  MID_CHECK(x.rank() == 4, "avg_pool2x2 expects [B,C,H,W]");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  MID_CHECK(H % 2 == 0 && W % 2 == 0, "avg_pool2x2 needs even spatial dims, got " << H << "x" << W);
  const int Ho = H / 2, Wo = W / 2;
  Tensor out = Tensor::zeros({B, C, Ho, Wo});
  for (int bc = 0; bc < B * C; ++bc) {
    const float* p = x.data() + size_t(bc) * H * W;
    float* o = out.data() + size_t(bc) * Ho * Wo;
    for (int h = 0; h < Ho; ++h)
      for (int w = 0; w < Wo; ++w)
        o[size_t(h) * Wo + w] = 0.25f * (p[size_t(2 * h) * W + 2 * w] + p[size_t(2 * h) * W + 2 * w + 1] +
                                         p[size_t(2 * h + 1) * W + 2 * w] +
                                         p[size_t(2 * h + 1) * W + 2 * w + 1]);
  }
  check_finite(out, "avg_pool2x2");
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc, B, C, H, W, Ho, Wo]() mutable {
                     const float* g = oc.grad().data();
                     float* gx = xc.grad_accum();
                     for (int bc = 0; bc < B * C; ++bc) {
                       const float* go = g + size_t(bc) * Ho * Wo;
                       float* p = gx + size_t(bc) * H * W;
                       for (int h = 0; h < Ho; ++h)
                         for (int w = 0; w < Wo; ++w) {
                           const float gv = 0.25f * go[size_t(h) * Wo + w];
                           p[size_t(2 * h) * W + 2 * w] += gv;
                           p[size_t(2 * h) * W + 2 * w + 1] += gv;
                           p[size_t(2 * h + 1) * W + 2 * w] += gv;
                           p[size_t(2 * h + 1) * W + 2 * w + 1] += gv;
                         }
                     }
                   },
                   "avg_pool2x2");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Concatenation and slicing

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  MID_CHECK(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                a.dim(3) == b.dim(3),
            "concat_channels: incompatible shapes " << shape_str(a.shape()) << " and "
                                                    << shape_str(b.shape()));
  const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const int64_t plane = int64_t(a.dim(2)) * a.dim(3);
  Tensor out = Tensor::zeros({B, Ca + Cb, a.dim(2), a.dim(3)});
  for (int bi = 0; bi < B; ++bi) {
    std::memcpy(out.data() + size_t(bi) * (Ca + Cb) * plane, a.data() + size_t(bi) * Ca * plane,
                size_t(Ca) * plane * sizeof(float));
    std::memcpy(out.data() + (size_t(bi) * (Ca + Cb) + Ca) * plane,
                b.data() + size_t(bi) * Cb * plane, size_t(Cb) * plane * sizeof(float));
  }
  if (needs_grad(a, b)) {
    Tensor ac = a, bc = b, oc = out;
    graph().record(out, {a, b},
                   [ac, bc, oc, B, Ca, Cb, plane]() mutable {
                     const float* g = oc.grad().data();
                     if (track(ac)) {
                       float* ga = ac.grad_accum();
                       for (int bi = 0; bi < B; ++bi) {
                         const float* gp = g + size_t(bi) * (Ca + Cb) * plane;
                         float* ap = ga + size_t(bi) * Ca * plane;
                         for (int64_t i = 0; i < int64_t(Ca) * plane; ++i) ap[i] += gp[i];
                       }
                     }
                     if (track(bc)) {
                       float* gb = bc.grad_accum();
                       for (int bi = 0; bi < B; ++bi) {
                         const float* gp = g + (size_t(bi) * (Ca + Cb) + Ca) * plane;
                         float* bp = gb + size_t(bi) * Cb * plane;
                         for (int64_t i = 0; i < int64_t(Cb) * plane; ++i) bp[i] += gp[i];
                       }
                     }
                   },
                   "concat_channels");
  }
  return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  MID_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0),
            "concat_cols: incompatible shapes " << shape_str(a.shape()) << " and "
                                                << shape_str(b.shape()));
  const int B = a.dim(0), Da = a.dim(1), Db = b.dim(1);
  Tensor out = Tensor::zeros({B, Da + Db});
  for (int bi = 0; bi < B; ++bi) {
    std::memcpy(out.data() + size_t(bi) * (Da + Db), a.data() + size_t(bi) * Da,
                size_t(Da) * sizeof(float));
    std::memcpy(out.data() + size_t(bi) * (Da + Db) + Da, b.data() + size_t(bi) * Db,
                size_t(Db) * sizeof(float));
  }
  if (needs_grad(a, b)) {
    Tensor ac = a, bc = b, oc = out;
    graph().record(out, {a, b},
                   [ac, bc, oc, B, Da, Db]() mutable {
                     const float* g = oc.grad().data();
                     if (track(ac)) {
                       float* ga = ac.grad_accum();
                       for (int bi = 0; bi < B; ++bi)
                         for (int j = 0; j < Da; ++j)
                           ga[size_t(bi) * Da + j] += g[size_t(bi) * (Da + Db) + j];
                     }
                     if (track(bc)) {
                       float* gb = bc.grad_accum();
                       for (int bi = 0; bi < B; ++bi)
                         for (int j = 0; j < Db; ++j)
                           gb[size_t(bi) * Db + j] += g[size_t(bi) * (Da + Db) + Da + j];
                     }
                   },
                   "concat_cols");
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  MID_CHECK(shape_numel(new_shape) == x.numel(), "reshape: " << shape_str(x.shape()) << " to "
                                                             << shape_str(new_shape)
                                                             << " changes element count");
  Tensor out(new_shape, x.values());
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc]() mutable {
                     const float* g = oc.grad().data();
                     float* gx = xc.grad_accum();
                     for (int64_t i = 0; i < xc.numel(); ++i) gx[i] += g[i];
                   },
                   "reshape");
  }
  return out;
}

// Channel range [c0, c1) of a [B,C,H,W] tensor.
inline Tensor slice_channels(const Tensor& x, int c0, int c1) {
  MID_CHECK(x.rank() == 4, "slice_channels expects [B,C,H,W]");
  const int B = x.dim(0), C = x.dim(1);
  MID_CHECK(0 <= c0 && c0 < c1 && c1 <= C, "slice_channels: bad range [" << c0 << "," << c1
                                                                         << ") for C=" << C);
  const int Cs = c1 - c0;
  const int64_t plane = int64_t(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros({B, Cs, x.dim(2), x.dim(3)});
  for (int b = 0; b < B; ++b)
    std::memcpy(out.data() + size_t(b) * Cs * plane, x.data() + (size_t(b) * C + c0) * plane,
                size_t(Cs) * plane * sizeof(float));
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc, B, C, Cs, c0, plane]() mutable {
                     const float* g = oc.grad().data();
                     float* gx = xc.grad_accum();
                     for (int b = 0; b < B; ++b) {
                       const float* gp = g + size_t(b) * Cs * plane;
                       float* xp = gx + (size_t(b) * C + c0) * plane;
                       for (int64_t i = 0; i < int64_t(Cs) * plane; ++i) xp[i] += gp[i];
                     }
                   },
                   "slice_channels");
  }
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  MID_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
            "concat_rows: incompatible shapes " << shape_str(a.shape()) << " and "
                                                << shape_str(b.shape()));
  const int Na = a.dim(0), Nb = b.dim(0), D = a.dim(1);
  Tensor out = Tensor::zeros({Na + Nb, D});
  std::memcpy(out.data(), a.data(), size_t(Na) * D * sizeof(float));
  std::memcpy(out.data() + size_t(Na) * D, b.data(), size_t(Nb) * D * sizeof(float));
  if (needs_grad(a, b)) {
    Tensor ac = a, bc = b, oc = out;
    graph().record(out, {a, b},
                   [ac, bc, oc, Na, Nb, D]() mutable {
                     const float* g = oc.grad().data();
                     if (track(ac)) {
                       float* ga = ac.grad_accum();
                       for (int64_t i = 0; i < int64_t(Na) * D; ++i) ga[i] += g[i];
                     }
                     if (track(bc)) {
                       float* gb = bc.grad_accum();
                       const float* gp = g + size_t(Na) * D;
                       for (int64_t i = 0; i < int64_t(Nb) * D; ++i) gb[i] += gp[i];
                     }
                   },
                   "concat_rows");
  }
  return out;
}

// Select stripe g from a pooled [B,C,G] tensor -> [B,C].
inline Tensor select_region(const Tensor& x, int g) {
  MID_CHECK(x.rank() == 3, "select_region expects [B,C,G]");
  const int B = x.dim(0), C = x.dim(1), G = x.dim(2);
  MID_CHECK(g >= 0 && g < G, "select_region: index " << g << " out of [0," << G << ")");
  Tensor out = Tensor::zeros({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) out.data()[size_t(b) * C + c] = x.data()[(size_t(b) * C + c) * G + g];
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc, B, C, G, g]() mutable {
                     const float* gr = oc.grad().data();
                     float* gx = xc.grad_accum();
                     for (int b = 0; b < B; ++b)
                       for (int c = 0; c < C; ++c)
                         gx[(size_t(b) * C + c) * G + g] += gr[size_t(b) * C + c];
                   },
                   "select_region");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  const float* p = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) s += p[i];
  Tensor out = Tensor::scalar(float(s));
  check_finite(out, "sum_all");
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc]() mutable {
                     const float g = oc.grad()[0];
                     float* gx = xc.grad_accum();
                     for (int64_t i = 0; i < xc.numel(); ++i) gx[i] += g;
                   },
                   "sum_all");
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  const float* p = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) s += p[i];
  Tensor out = Tensor::scalar(float(s / double(n)));
  check_finite(out, "mean_all");
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc, n]() mutable {
                     const float g = oc.grad()[0] / float(n);
                     float* gx = xc.grad_accum();
                     for (int64_t i = 0; i < n; ++i) gx[i] += g;
                   },
                   "mean_all");
  }
  return out;
}

// Mean over fixed-size consecutive row groups: [Gn*K, D] -> [Gn, D].
inline Tensor group_mean_rows(const Tensor& x, int group_size) {
  MID_CHECK(x.rank() == 2, "group_mean_rows expects [N,D]");
  const int N = x.dim(0), D = x.dim(1);
  MID_CHECK(group_size >= 1 && N % group_size == 0,
            "group_mean_rows: " << N << " rows not divisible into groups of " << group_size);
  const int Gn = N / group_size;
  Tensor out = Tensor::zeros({Gn, D});
  for (int g = 0; g < Gn; ++g)
    for (int k = 0; k < group_size; ++k) {
      const float* r = x.data() + size_t(g * group_size + k) * D;
      float* o = out.data() + size_t(g) * D;
      for (int d = 0; d < D; ++d) o[d] += r[d];
    }
  const float inv = 1.0f / float(group_size);
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] *= inv;
  check_finite(out, "group_mean_rows");
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc, Gn, D, group_size, inv]() mutable {
                     const float* g = oc.grad().data();
                     float* gx = xc.grad_accum();
                     for (int r = 0; r < Gn; ++r)
                       for (int k = 0; k < group_size; ++k) {
                         float* xr = gx + size_t(r * group_size + k) * D;
                         const float* gr = g + size_t(r) * D;
                         for (int d = 0; d < D; ++d) xr[d] += gr[d] * inv;
                       }
                   },
                   "group_mean_rows");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise L2 normalization, y_i = x_i / sqrt(||x_i||^2 + eps)

inline Tensor l2_normalize_rows(const Tensor& x, float eps = 1e-12f) {
  MID_CHECK(x.rank() == 2, "l2_normalize_rows expects [N,D]");
  const int N = x.dim(0), D = x.dim(1);
  Tensor out = Tensor::zeros({N, D});
  std::vector<float> inv_norm(size_t(N), 0.0f);
  for (int i = 0; i < N; ++i) {
    const float* r = x.data() + size_t(i) * D;
    double s = 0.0;
    for (int d = 0; d < D; ++d) s += double(r[d]) * r[d];
    const float inv = float(1.0 / std::sqrt(s + eps));
    inv_norm[size_t(i)] = inv;
    float* o = out.data() + size_t(i) * D;
    for (int d = 0; d < D; ++d) o[d] = r[d] * inv;
  }
  check_finite(out, "l2_normalize_rows");
  if (needs_grad(x)) {
    Tensor xc = x, oc = out;
    graph().record(out, {x},
                   [xc, oc, inv_norm, N, D]() mutable {
                     const float* g = oc.grad().data();
                     float* gx = xc.grad_accum();
                     for (int i = 0; i < N; ++i) {
                       const float* y = oc.data() + size_t(i) * D;
                       const float* gr = g + size_t(i) * D;
                       float* gxr = gx + size_t(i) * D;
                       double dot = 0.0;
                       for (int d = 0; d < D; ++d) dot += double(gr[d]) * y[d];
                       const float inv = inv_norm[size_t(i)];
                       for (int d = 0; d < D; ++d)
                         gxr[d] += inv * (gr[d] - float(dot) * y[d]);
                     }
                   },
                   "l2_normalize_rows");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pairwise Euclidean distances, D[p,q] = sqrt(||a_p - b_q||^2 + eps)

inline Tensor pairwise_dist(const Tensor& a, const Tensor& b, float eps = 1e-12f) {
  MID_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
            "pairwise_dist expects [P,D] and [Q,D], got " << shape_str(a.shape()) << " and "
                                                          << shape_str(b.shape()));
  const int P = a.dim(0), Q = b.dim(0), D = a.dim(1);
  Tensor out = Tensor::zeros({P, Q});
  for (int p = 0; p < P; ++p)
    for (int q = 0; q < Q; ++q) {
      const float* ar = a.data() + size_t(p) * D;
      const float* br = b.data() + size_t(q) * D;
      double s = 0.0;
      for (int d = 0; d < D; ++d) {
        const double df = double(ar[d]) - br[d];
        s += df * df;
      }
      out.data()[size_t(p) * Q + q] = float(std::sqrt(s + eps));
    }
  check_finite(out, "pairwise_dist");
  if (needs_grad(a, b)) {
    Tensor ac = a, bc = b, oc = out;
    graph().record(out, {a, b},
                   [ac, bc, oc, P, Q, D]() mutable {
                     const float* g = oc.grad().data();
                     const float* dv = oc.data();
                     float* ga = track(ac) ? ac.grad_accum() : nullptr;
                     float* gb = track(bc) ? bc.grad_accum() : nullptr;
                     for (int p = 0; p < P; ++p)
                       for (int q = 0; q < Q; ++q) {
                         const float gv = g[size_t(p) * Q + q];
                         if (gv == 0.0f) continue;
                         const float inv = 1.0f / dv[size_t(p) * Q + q];
                         const float* ar = ac.data() + size_t(p) * D;
                         const float* br = bc.data() + size_t(q) * D;
                         for (int d = 0; d < D; ++d) {
                           const float c = gv * inv * (ar[d] - br[d]);
                           if (ga) ga[size_t(p) * D + d] += c;
                           if (gb) gb[size_t(q) * D + d] -= c;
                         }
                       }
                   },
                   "pairwise_dist");
  }
  return out;
}

}  // namespace mid
