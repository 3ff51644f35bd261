#pragma once

// Modality-adaptive convolution decomposition: one decomposed layer stores
// three modality-specific spatial basis banks alpha[K,S,S] and a shared
// coefficient psi[K,Cin,Cout]. The composed filter for a modality is
//   W[o,c,u,v] = sum_k alpha[k,u,v] * psi[k,c,o]
// and the layer can run either as one conv with W (default) or as the
// equivalent two-stage basis-then-1x1 pipeline.

#include <string>

#include "mid/optim.hpp"
#include "mid/tensor.hpp"

namespace mid {

enum class Modality { rgb, ir, mix };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::rgb: return "rgb";
    case Modality::ir: return "ir";
    case Modality::mix: return "mix";
  }
  MID_CHECK(false, "unknown modality tag");
  return "";
}

struct DecomposedConv {
  Tensor alpha_rgb, alpha_ir, alpha_mix;  // [K,S,S] each
  Tensor psi;                             // [K,Cin,Cout]
  int K = 0, S = 0, Cin = 0, Cout = 0;

  const Tensor& alpha(Modality m) const {
    switch (m) {
      case Modality::rgb: return alpha_rgb;
      case Modality::ir: return alpha_ir;
      case Modality::mix: return alpha_mix;
    }
    MID_CHECK(false, "unknown modality tag");
    return alpha_rgb;
  }
};

inline Tensor randn_tensor(Shape shape, Rng& rng, float stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0f, stddev);
  return t;
}

// All three alpha banks start identical (they diverge through training);
// composed-filter variance K * (1/S^2) * (1/(K*Cin)) = 1/(S^2*Cin) matches a
// fan-in conv init.
inline DecomposedConv init_decomposition(int K, int S, int Cin, int Cout, Rng& rng) {
  MID_CHECK(K >= 1 && S >= 1 && S % 2 == 1 && Cin >= 1 && Cout >= 1,
            "init_decomposition: bad config K=" << K << " S=" << S << " Cin=" << Cin
                                                << " Cout=" << Cout);
  DecomposedConv p;
  p.K = K;
  p.S = S;
  p.Cin = Cin;
  p.Cout = Cout;
  p.alpha_rgb = randn_tensor({K, S, S}, rng, 1.0f / float(S));
  p.alpha_ir = p.alpha_rgb.clone();
  p.alpha_mix = p.alpha_rgb.clone();
  p.psi = randn_tensor({K, Cin, Cout}, rng, 1.0f / std::sqrt(float(K) * float(Cin)));
  return p;
}

inline Tensor compose_filters(const DecomposedConv& p, Modality m) {
  const Tensor& alpha = p.alpha(m);
  MID_CHECK(alpha.rank() == 3 && p.psi.rank() == 3 && alpha.dim(0) == p.psi.dim(0),
            "compose_filters: inconsistent decomposition parameters");
  const int K = p.K, S = p.S, Cin = p.Cin, Cout = p.Cout;
  Tensor w = Tensor::zeros({Cout, Cin, S, S});
  const float* a = alpha.data();
  const float* ps = p.psi.data();
  float* wd = w.data();
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < Cin; ++c)
      for (int o = 0; o < Cout; ++o) {
        const float pv = ps[(size_t(k) * Cin + c) * Cout + o];
        const float* av = a + size_t(k) * S * S;
        float* wv = wd + (size_t(o) * Cin + c) * S * S;
        for (int uv = 0; uv < S * S; ++uv) wv[uv] += pv * av[uv];
      }
  check_finite(w, "compose_filters");
  if (needs_grad(alpha, p.psi)) {
    Tensor ac = alpha, pc = p.psi, wc = w;
    graph().record(w, {alpha, p.psi},
                   [ac, pc, wc, K, S, Cin, Cout]() mutable {
                     const float* g = wc.grad().data();
                     float* ga = track(ac) ? ac.grad_accum() : nullptr;
                     float* gp = track(pc) ? pc.grad_accum() : nullptr;
                     for (int k = 0; k < K; ++k)
                       for (int c = 0; c < Cin; ++c)
                         for (int o = 0; o < Cout; ++o) {
                           const float pv = pc.data()[(size_t(k) * Cin + c) * Cout + o];
                           const float* gv = g + (size_t(o) * Cin + c) * S * S;
                           if (ga) {
                             float* av = ga + size_t(k) * S * S;
                             for (int uv = 0; uv < S * S; ++uv) av[uv] += pv * gv[uv];
                           }
                           if (gp) {
                             const float* av = ac.data() + size_t(k) * S * S;
                             float acc = 0.0f;
                             for (int uv = 0; uv < S * S; ++uv) acc += av[uv] * gv[uv];
                             gp[(size_t(k) * Cin + c) * Cout + o] += acc;
                           }
                         }
                   },
                   "compose_filters");
  }
  return w;
}

// Default realization: one conv with the composed filters.
inline Tensor macd_forward(const Tensor& x, const DecomposedConv& p, Modality m, int stride,
                           int pad) {
  return conv2d(x, compose_filters(p, m), stride, pad);
}

// Equivalent factorized realization: every input channel is convolved with
// each spatial basis, then a 1x1 conv with psi mixes the K*Cin maps.
inline Tensor macd_forward_two_stage(const Tensor& x, const DecomposedConv& p, Modality m,
                                     int stride, int pad) {
  MID_CHECK(x.rank() == 4 && x.dim(1) == p.Cin, "macd_forward_two_stage: input has "
                                                    << (x.rank() == 4 ? x.dim(1) : -1)
                                                    << " channels, expected " << p.Cin);
  Tensor basis = reshape(p.alpha(m), {p.K, 1, p.S, p.S});
  Tensor stacked;  // channel order: c-major, k-minor
  for (int c = 0; c < p.Cin; ++c) {
    Tensor maps = conv2d(slice_channels(x, c, c + 1), basis, stride, pad);
    stacked = c == 0 ? maps : concat_channels(stacked, maps);
  }

  // w1[o, c*K + k, 0, 0] = psi[k, c, o]
  const int K = p.K, Cin = p.Cin, Cout = p.Cout;
  Tensor w1 = Tensor::zeros({Cout, K * Cin, 1, 1});
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < Cin; ++c)
      for (int o = 0; o < Cout; ++o)
        w1.data()[size_t(o) * K * Cin + c * K + k] = p.psi.data()[(size_t(k) * Cin + c) * Cout + o];
  if (needs_grad(p.psi)) {
    Tensor pc = p.psi, wc = w1;
    graph().record(w1, {p.psi},
                   [pc, wc, K, Cin, Cout]() mutable {
                     const float* g = wc.grad().data();
                     float* gp = pc.grad_accum();
                     for (int k = 0; k < K; ++k)
                       for (int c = 0; c < Cin; ++c)
                         for (int o = 0; o < Cout; ++o)
                           gp[(size_t(k) * Cin + c) * Cout + o] +=
                               g[size_t(o) * K * Cin + c * K + k];
                   },
                   "psi_as_1x1");
  }
  return conv2d(stacked, w1, 1, 0);
}

inline int64_t decomposed_param_count(int K, int S, int Cin, int Cout) {
  return int64_t(3) * K * S * S + int64_t(K) * Cin * Cout;
}

inline int64_t full_param_count(int S, int Cin, int Cout) {
  return int64_t(3) * S * S * Cin * Cout;
}

}  // namespace mid
