#pragma once

// Supervised loss stack: label-smoothed identification loss, cross-modality
// center triplet loss, batch-hard triplet (baseline configurations), and the
// weighted total.

#include <vector>

#include "mid/tensor.hpp"

namespace mid {

// Cross entropy against smoothed targets: the true class gets 1 - xi*(P-1)/P,
// every other class xi/P. Mean over the batch.
inline Tensor id_loss(const Tensor& logits, const std::vector<int>& labels, float xi) {
  MID_CHECK(logits.rank() == 2, "id_loss expects logits [B,P]");
  const int B = logits.dim(0), P = logits.dim(1);
  MID_CHECK(P >= 2, "id_loss needs at least 2 classes, got " << P);
  MID_CHECK(int(labels.size()) == B, "id_loss: " << labels.size() << " labels for batch " << B);
  MID_CHECK(xi >= 0.0f && xi < 1.0f, "id_loss: smoothing must be in [0,1), got " << xi);
  for (int b = 0; b < B; ++b)
    MID_CHECK(labels[size_t(b)] >= 0 && labels[size_t(b)] < P,
              "id_loss: label " << labels[size_t(b)] << " out of range [0," << P << ")");

  const float q_off = xi / float(P);
  const float q_on = 1.0f - xi * float(P - 1) / float(P);

  // softmax rows are needed by the backward; keep them
  std::vector<float> probs(size_t(B) * P);
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const float* row = logits.data() + size_t(b) * P;
    float mx = row[0];
    for (int i = 1; i < P; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < P; ++i) z += std::exp(double(row[i]) - mx);
    const double log_z = std::log(z) + mx;
    const int y = labels[size_t(b)];
    for (int i = 0; i < P; ++i) {
      const double logp = double(row[i]) - log_z;
      probs[size_t(b) * P + i] = float(std::exp(logp));
      const float q = i == y ? q_on : q_off;
      total -= double(q) * logp;
    }
  }
  Tensor out = Tensor::scalar(float(total / double(B)));
  check_finite(out, "id_loss");
  if (needs_grad(logits)) {
    Tensor lc = logits, oc = out;
    graph().record(out, {logits},
                   [lc, oc, probs = std::move(probs), labels, B, P, q_on, q_off]() mutable {
                     const float g = oc.grad()[0] / float(B);
                     float* gl = lc.grad_accum();
                     for (int b = 0; b < B; ++b) {
                       const int y = labels[size_t(b)];
                       for (int i = 0; i < P; ++i) {
                         const float q = i == y ? q_on : q_off;
                         gl[size_t(b) * P + i] += g * (probs[size_t(b) * P + i] - q);
                       }
                     }
                   },
                   "id_loss");
  }
  return out;
}

// Mean of id_loss over classifier heads (global + part branches).
inline Tensor id_loss_heads(const std::vector<Tensor>& logits_per_head,
                            const std::vector<int>& labels, float xi) {
  MID_CHECK(!logits_per_head.empty(), "id_loss_heads: no heads");
  Tensor acc = id_loss(logits_per_head[0], labels, xi);
  for (size_t h = 1; h < logits_per_head.size(); ++h)
    acc = add(acc, id_loss(logits_per_head[h], labels, xi));
  return scale(acc, 1.0f / float(logits_per_head.size()));
}

// Per-identity feature centers for a PK-ordered feature block: rows are
// grouped identity-major, K consecutive rows per identity.
inline Tensor compute_centers(const Tensor& features, const std::vector<int>& labels, int K) {
  MID_CHECK(features.rank() == 2, "compute_centers expects [P*K, D]");
  const int N = features.dim(0);
  MID_CHECK(K >= 1 && N % K == 0, "compute_centers: " << N << " rows not divisible by K=" << K);
  MID_CHECK(int(labels.size()) == N, "compute_centers: label count mismatch");
  const int P = N / K;
  for (int p = 0; p < P; ++p)
    for (int k = 1; k < K; ++k)
      MID_CHECK(labels[size_t(p * K + k)] == labels[size_t(p * K)],
                "compute_centers: rows of group " << p << " carry mixed identities");
  return group_mean_rows(features, K);
}

// Center triplet loss. For each identity p the positive is ||c_a[p]-c_b[p]||,
// the negative is the hardest center of any other identity in either modality;
// both symmetric hinge terms are summed over identities.
inline Tensor center_triplet(const Tensor& c_a, const Tensor& c_b, float rho) {
  MID_CHECK(c_a.rank() == 2 && c_b.rank() == 2 && c_a.shape() == c_b.shape(),
            "center_triplet expects matching [P,D] center sets");
  const int P = c_a.dim(0);
  MID_CHECK(P >= 2, "center_triplet needs at least 2 identities, got " << P);

  Tensor D_ab = pairwise_dist(c_a, c_b);
  Tensor D_aa = pairwise_dist(c_a, c_a);
  Tensor D_bb = pairwise_dist(c_b, c_b);

  // negative source encoding: 0 = same-modality matrix [p,j], 1 = D_ab[p,j],
  // 2 = D_ab[j,p] (second term's cross entry)
  struct Hinge {
    bool active;
    int src;
    int j;
  };
  std::vector<Hinge> h1(size_t(P), Hinge{}), h2(size_t(P), Hinge{});
  double total = 0.0;
  const float* dab = D_ab.data();
  const float* daa = D_aa.data();
  const float* dbb = D_bb.data();
  for (int p = 0; p < P; ++p) {
    const float pos = dab[size_t(p) * P + p];
    float neg1 = 0.0f, neg2 = 0.0f;
    int j1 = -1, j2 = -1, s1 = 0, s2 = 0;
    for (int j = 0; j < P; ++j) {
      if (j == p) continue;
      if (j1 < 0 || daa[size_t(p) * P + j] < neg1) {
        neg1 = daa[size_t(p) * P + j];
        j1 = j;
        s1 = 0;
      }
      if (dab[size_t(p) * P + j] < neg1) {
        neg1 = dab[size_t(p) * P + j];
        j1 = j;
        s1 = 1;
      }
      if (j2 < 0 || dbb[size_t(p) * P + j] < neg2) {
        neg2 = dbb[size_t(p) * P + j];
        j2 = j;
        s2 = 0;
      }
      if (dab[size_t(j) * P + p] < neg2) {
        neg2 = dab[size_t(j) * P + p];
        j2 = j;
        s2 = 2;
      }
    }
    const float t1 = rho + pos - neg1;
    const float t2 = rho + pos - neg2;
    h1[size_t(p)] = Hinge{t1 > 0.0f, s1, j1};
    h2[size_t(p)] = Hinge{t2 > 0.0f, s2, j2};
    if (t1 > 0.0f) total += t1;
    if (t2 > 0.0f) total += t2;
  }
  Tensor out = Tensor::scalar(float(total));
  check_finite(out, "center_triplet");
  if (needs_grad(D_ab, D_aa, D_bb)) {
    Tensor ab = D_ab, aa = D_aa, bb = D_bb, oc = out;
    graph().record(out, {D_ab, D_aa, D_bb},
                   [ab, aa, bb, oc, h1 = std::move(h1), h2 = std::move(h2), P]() mutable {
                     const float g = oc.grad()[0];
                     float* gab = ab.grad_accum();
                     float* gaa = aa.grad_accum();
                     float* gbb = bb.grad_accum();
                     for (int p = 0; p < P; ++p) {
                       const auto& a = h1[size_t(p)];
                       if (a.active) {
                         gab[size_t(p) * P + p] += g;
                         if (a.src == 0)
                           gaa[size_t(p) * P + a.j] -= g;
                         else
                           gab[size_t(p) * P + a.j] -= g;
                       }
                       const auto& b = h2[size_t(p)];
                       if (b.active) {
                         gab[size_t(p) * P + p] += g;
                         if (b.src == 0)
                           gbb[size_t(p) * P + b.j] -= g;
                         else
                           gab[size_t(b.j) * P + p] -= g;
                       }
                     }
                   },
                   "center_triplet");
  }
  return out;
}

// Standard batch-hard triplet over one feature block (baseline configuration
// replacing the center loss): hardest positive and hardest negative per
// anchor, hinge with margin rho, mean over anchors.
inline Tensor batch_hard_triplet(const Tensor& features, const std::vector<int>& labels,
                                 float rho) {
  MID_CHECK(features.rank() == 2, "batch_hard_triplet expects [N,D]");
  const int N = features.dim(0);
  MID_CHECK(int(labels.size()) == N, "batch_hard_triplet: label count mismatch");

  Tensor D = pairwise_dist(features, features);
  const float* d = D.data();
  struct Pick {
    bool active;
    int pos;
    int neg;
  };
  std::vector<Pick> picks(size_t(N), Pick{});
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    int hp = -1, hn = -1;
    for (int j = 0; j < N; ++j) {
      if (j == i) continue;
      if (labels[size_t(j)] == labels[size_t(i)]) {
        if (hp < 0 || d[size_t(i) * N + j] > d[size_t(i) * N + hp]) hp = j;
      } else {
        if (hn < 0 || d[size_t(i) * N + j] < d[size_t(i) * N + hn]) hn = j;
      }
    }
    MID_CHECK(hp >= 0, "batch_hard_triplet: anchor " << i << " has no positive");
    MID_CHECK(hn >= 0, "batch_hard_triplet: anchor " << i << " has no negative");
    const float t = rho + d[size_t(i) * N + hp] - d[size_t(i) * N + hn];
    picks[size_t(i)] = Pick{t > 0.0f, hp, hn};
    if (t > 0.0f) total += t;
  }
  Tensor out = Tensor::scalar(float(total / double(N)));
  check_finite(out, "batch_hard_triplet");
  if (needs_grad(D)) {
    Tensor dc = D, oc = out;
    graph().record(out, {D},
                   [dc, oc, picks = std::move(picks), N]() mutable {
                     const float g = oc.grad()[0] / float(N);
                     float* gd = dc.grad_accum();
                     for (int i = 0; i < N; ++i) {
                       const auto& p = picks[size_t(i)];
                       if (!p.active) continue;
                       gd[size_t(i) * N + p.pos] += g;
                       gd[size_t(i) * N + p.neg] -= g;
                     }
                   },
                   "batch_hard_triplet");
  }
  return out;
}

// Weighted sum of scalar loss terms; zero-weight terms contribute nothing.
inline Tensor weighted_sum(const std::vector<std::pair<Tensor, float>>& terms) {
  Tensor acc;
  for (const auto& [t, w] : terms) {
    if (w == 0.0f) continue;
    Tensor scaled = scale(t, w);
    acc = acc.defined() ? add(acc, scaled) : scaled;
  }
  return acc.defined() ? acc : Tensor::scalar(0.0f);
}

struct LossWeights {
  float lambda1 = 1.0f;   // center triplet rgb/ir
  float lambda2 = 0.5f;   // center triplet rgb/mix
  float lambda3 = 0.5f;   // center triplet ir/mix
  float lambda4 = 1.0f;   // id loss rgb
  float lambda5 = 1.0f;   // id loss ir
  float lambda6 = 0.1f;   // id loss mix
  float rho = 0.3f;       // triplet margin
  float xi = 0.1f;        // label smoothing
};

}  // namespace mid
