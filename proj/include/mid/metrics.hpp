#pragma once

// Retrieval metrics: cosine similarity matrices, CMC rank-k, mAP, and the
// combined score E(S) = mAP + sum_{k=1..K} (1/k) rank-k. All ranking math in
// double precision. Ranking order: descending similarity, ties broken by
// ascending gallery index.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "mid/tensor.hpp"

namespace mid {

struct SimilarityMatrix {
  int Q = 0;
  int Gal = 0;
  std::vector<double> values;  // [Q, Gal] row-major
  std::vector<int> query_labels;
  std::vector<int> gallery_labels;

  double at(int q, int g) const { return values[size_t(q) * Gal + g]; }
};

inline SimilarityMatrix make_similarity(std::vector<double> values, std::vector<int> query_labels,
                                        std::vector<int> gallery_labels) {
  SimilarityMatrix s;
  s.Q = int(query_labels.size());
  s.Gal = int(gallery_labels.size());
  MID_CHECK(int64_t(values.size()) == int64_t(s.Q) * s.Gal,
            "similarity matrix has " << values.size() << " values for " << s.Q << "x" << s.Gal);
  for (double v : values) MID_CHECK(std::isfinite(v), "non-finite similarity value");
  s.values = std::move(values);
  s.query_labels = std::move(query_labels);
  s.gallery_labels = std::move(gallery_labels);
  for (int q = 0; q < s.Q; ++q) {
    bool has_match = false;
    for (int g = 0; g < s.Gal; ++g)
      if (s.gallery_labels[size_t(g)] == s.query_labels[size_t(q)]) {
        has_match = true;
        break;
      }
    MID_CHECK(has_match, "query " << q << " (label " << s.query_labels[size_t(q)]
                                  << ") has no same-identity gallery item");
  }
  return s;
}

inline SimilarityMatrix cosine_similarity_matrix(const Tensor& A, const Tensor& B,
                                                 const std::vector<int>& a_labels,
                                                 const std::vector<int>& b_labels) {
  MID_CHECK(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(1),
            "cosine_similarity_matrix expects [Q,D] and [Gal,D]");
  const int Q = A.dim(0), Gal = B.dim(0), D = A.dim(1);
  MID_CHECK(int(a_labels.size()) == Q && int(b_labels.size()) == Gal,
            "cosine_similarity_matrix: label count mismatch");
  std::vector<double> a_norm(size_t(Q), 0.0), b_norm(size_t(Gal), 0.0);
  for (int i = 0; i < Q; ++i) {
    double s = 0.0;
    const float* r = A.data() + size_t(i) * D;
    for (int d = 0; d < D; ++d) s += double(r[d]) * r[d];
    MID_CHECK(s > 1e-24, "cosine_similarity_matrix: zero-norm query row " << i);
    a_norm[size_t(i)] = std::sqrt(s);
  }
  for (int j = 0; j < Gal; ++j) {
    double s = 0.0;
    const float* r = B.data() + size_t(j) * D;
    for (int d = 0; d < D; ++d) s += double(r[d]) * r[d];
    MID_CHECK(s > 1e-24, "cosine_similarity_matrix: zero-norm gallery row " << j);
    b_norm[size_t(j)] = std::sqrt(s);
  }
  std::vector<double> vals(size_t(Q) * Gal);
  for (int i = 0; i < Q; ++i) {
    const float* ar = A.data() + size_t(i) * D;
    for (int j = 0; j < Gal; ++j) {
      const float* br = B.data() + size_t(j) * D;
      double dot = 0.0;
      for (int d = 0; d < D; ++d) dot += double(ar[d]) * br[d];
      vals[size_t(i) * Gal + j] = dot / (a_norm[size_t(i)] * b_norm[size_t(j)]);
    }
  }
  return make_similarity(std::move(vals), a_labels, b_labels);
}

inline SimilarityMatrix similarity_sum(const SimilarityMatrix& a, const SimilarityMatrix& b) {
  MID_CHECK(a.Q == b.Q && a.Gal == b.Gal, "similarity_sum: shape mismatch");
  std::vector<double> vals(a.values.size());
  for (size_t i = 0; i < vals.size(); ++i) vals[i] = a.values[i] + b.values[i];
  return make_similarity(std::move(vals), a.query_labels, a.gallery_labels);
}

namespace detail {

// gallery indices for one query, best match first
inline std::vector<int> ranked_gallery(const SimilarityMatrix& s, int q) {
  std::vector<int> order(size_t(s.Gal));
  std::iota(order.begin(), order.end(), 0);
  const double* row = s.values.data() + size_t(q) * s.Gal;
  std::sort(order.begin(), order.end(), [row](int i, int j) {
    if (row[i] != row[j]) return row[i] > row[j];
    return i < j;
  });
  return order;
}

}  // namespace detail

inline double cmc_rank_k(const SimilarityMatrix& s, int k) {
  MID_CHECK(k >= 1 && k <= s.Gal, "cmc_rank_k: k=" << k << " invalid for gallery size " << s.Gal);
  int hits = 0;
  for (int q = 0; q < s.Q; ++q) {
    const auto order = detail::ranked_gallery(s, q);
    for (int r = 0; r < k; ++r)
      if (s.gallery_labels[size_t(order[size_t(r)])] == s.query_labels[size_t(q)]) {
        ++hits;
        break;
      }
  }
  return double(hits) / double(s.Q);
}

inline double mean_ap(const SimilarityMatrix& s) {
  double sum_ap = 0.0;
  for (int q = 0; q < s.Q; ++q) {
    const auto order = detail::ranked_gallery(s, q);
    int relevant_seen = 0;
    double ap = 0.0;
    for (int r = 0; r < s.Gal; ++r) {
      if (s.gallery_labels[size_t(order[size_t(r)])] == s.query_labels[size_t(q)]) {
        ++relevant_seen;
        ap += double(relevant_seen) / double(r + 1);
      }
    }
    MID_CHECK(relevant_seen > 0, "mean_ap: query " << q << " has no relevant gallery item");
    sum_ap += ap / double(relevant_seen);
  }
  return sum_ap / double(s.Q);
}

inline double eval_score_E(const SimilarityMatrix& s, int K) {
  MID_CHECK(K >= 1 && K <= s.Gal, "eval_score_E: K=" << K << " invalid for gallery size " << s.Gal);
  double e = mean_ap(s);
  for (int k = 1; k <= K; ++k) e += cmc_rank_k(s, k) / double(k);
  return e;
}

struct RetrievalReport {
  std::string direction;
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
};

// rank-k columns clamp k to the gallery size so tiny galleries stay usable
inline RetrievalReport retrieval_eval(const Tensor& query_feats, const Tensor& gallery_feats,
                                      const std::vector<int>& query_labels,
                                      const std::vector<int>& gallery_labels,
                                      const std::string& direction) {
  SimilarityMatrix s =
      cosine_similarity_matrix(query_feats, gallery_feats, query_labels, gallery_labels);
  RetrievalReport r;
  r.direction = direction;
  r.rank1 = cmc_rank_k(s, 1);
  r.rank5 = cmc_rank_k(s, std::min(5, s.Gal));
  r.rank10 = cmc_rank_k(s, std::min(10, s.Gal));
  r.map = mean_ap(s);
  return r;
}

}  // namespace mid
