#pragma once

// Two-modality identity-labeled data: synthetic pedestrian generator,
// directory loader, PK batch sampler, and preprocessing.
//
// Synthetic identities are spatial part templates (head/torso/legs plus
// accent rectangles) colored by an identity-specific palette. Every palette
// color of a given part has the same channel sum, so raw RGB intensity carries
// no identity signal; the IR rendering collapses hue through a fixed luminance
// map, making cross-modality matching a learnable but non-trivial channel
// transform.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "mid/common.hpp"
#include "mid/image.hpp"
#include "mid/tensor.hpp"

namespace mid {

struct Dataset {
  int height = 0;
  int width = 0;
  int num_ids = 0;
  std::vector<std::vector<Tensor>> rgb;  // [identity][image] -> Tensor[3,H,W] in [0,1]
  std::vector<std::vector<Tensor>> ir;   // same layout, 3 replicated channels
};

enum class Difficulty { easy, hard };

namespace detail {

constexpr int kMaxParts = 12;

// luminance weights for the IR rendering; deliberately far from the uniform
// (1/3,1/3,1/3) map so hue differences survive the collapse
constexpr float kIrLum[3] = {0.10f, 0.25f, 0.65f};

// per-part RGB channel sum, shared by all identities
inline float part_channel_sum(int part) {
  switch (part) {
    case 0: return 0.45f;   // background
    case 1: return 1.05f;   // head
    case 2: return 1.50f;   // torso
    case 3: return 1.20f;   // legs
    default: return 1.35f;  // accents
  }
}

inline std::array<float, 3> sample_palette_color(Rng& rng, int part) {
  // cubed uniforms concentrate mass near simplex corners: saturated hues
  float w[3];
  float total = 0.0f;
  for (float& v : w) {
    const float u = 0.05f + 0.95f * rng.uniform();
    v = u * u * u;
    total += v;
  }
  const float s = part_channel_sum(part);
  std::array<float, 3> c;
  for (int i = 0; i < 3; ++i) c[size_t(i)] = std::min(1.0f, w[i] / total * s);
  return c;
}

}  // namespace detail

// Part-index map of one identity's template, deterministic in (seed, id).
inline std::vector<int> synthetic_template(uint64_t seed, int id, int H, int W) {
  Rng rng = Rng(seed).fork(1, uint64_t(id));
  std::vector<int> part(size_t(H) * W, 0);
  auto fill_rect = [&](float y0, float y1, float x0, float x1, int p) {
    const int ya = std::max(0, int(y0 * float(H)));
    const int yb = std::min(H, int(y1 * float(H)));
    const int xa = std::max(0, int(x0 * float(W)));
    const int xb = std::min(W, int(x1 * float(W)));
    for (int y = ya; y < yb; ++y)
      for (int x = xa; x < xb; ++x) part[size_t(y) * W + x] = p;
  };
  fill_rect(0.04f, 0.18f, 0.30f, 0.70f, 1);  // head
  fill_rect(0.18f, 0.55f, 0.15f, 0.85f, 2);  // torso
  fill_rect(0.55f, 0.96f, 0.18f, 0.46f, 3);  // left leg
  fill_rect(0.55f, 0.96f, 0.54f, 0.82f, 3);  // right leg
  const int n_accents = 3 + int(rng.uniform_int(3));
  for (int a = 0; a < n_accents; ++a) {
    const bool on_torso = rng.uniform() < 0.6f;
    const float band_y0 = on_torso ? 0.18f : 0.55f;
    const float band_y1 = on_torso ? 0.55f : 0.96f;
    const float hgt = 0.08f + 0.14f * rng.uniform();
    const float wdt = 0.15f + 0.35f * rng.uniform();
    const float y0 = band_y0 + (band_y1 - band_y0 - hgt) * rng.uniform();
    const float x0 = 0.15f + (0.70f - wdt) * rng.uniform();
    fill_rect(y0, y0 + hgt, x0, x0 + wdt, 4 + a % (detail::kMaxParts - 4));
  }
  return part;
}

inline Dataset generate_synthetic_dataset(int n_ids, int imgs_per_id, int H, int W, uint64_t seed,
                                          Difficulty difficulty) {
  MID_CHECK(n_ids >= 2, "generator needs at least 2 identities, got " << n_ids);
  MID_CHECK(H >= 24 && W >= 12, "generator needs H >= 24 and W >= 12, got " << H << "x" << W);
  MID_CHECK(imgs_per_id >= 1, "generator needs at least 1 image per identity");
  const float noise_sigma = difficulty == Difficulty::easy ? 0.05f : 0.15f;

  Dataset ds;
  ds.height = H;
  ds.width = W;
  ds.num_ids = n_ids;
  ds.rgb.resize(size_t(n_ids));
  ds.ir.resize(size_t(n_ids));

  for (int id = 0; id < n_ids; ++id) {
    const std::vector<int> tmpl = synthetic_template(seed, id, H, W);
    Rng palette_rng = Rng(seed).fork(1, uint64_t(id), 1);
    std::array<std::array<float, 3>, detail::kMaxParts> palette;
    for (int p = 0; p < detail::kMaxParts; ++p)
      palette[size_t(p)] = detail::sample_palette_color(palette_rng, p);

    auto part_at = [&](int y, int x, int dy, int dx) {
      const int sy = y - dy, sx = x - dx;
      if (sy < 0 || sy >= H || sx < 0 || sx >= W) return 0;
      return tmpl[size_t(sy) * W + sx];
    };

    for (int k = 0; k < imgs_per_id; ++k) {
      {  // RGB: palette + affine brightness jitter + noise
        Rng rng = Rng(seed).fork(2, uint64_t(id), uint64_t(k));
        const int dy = int(rng.uniform_int(5)) - 2;
        const int dx = int(rng.uniform_int(3)) - 1;
        const float gain = rng.uniform(0.85f, 1.15f);
        const float bias = rng.uniform(-0.05f, 0.05f);
        Tensor img = Tensor::zeros({3, H, W});
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const auto& c = palette[size_t(part_at(y, x, dy, dx))];
            for (int ch = 0; ch < 3; ++ch) {
              float v = gain * c[size_t(ch)] + bias + noise_sigma * rng.normal();
              img.data()[(size_t(ch) * H + y) * W + x] = std::min(1.0f, std::max(0.0f, v));
            }
          }
        ds.rgb[size_t(id)].push_back(img);
      }
      {  // IR: luminance collapse + gamma distortion + noise, replicated
        Rng rng = Rng(seed).fork(3, uint64_t(id), uint64_t(k));
        const int dy = int(rng.uniform_int(5)) - 2;
        const int dx = int(rng.uniform_int(3)) - 1;
        const float gamma = rng.uniform(0.6f, 1.5f);
        Tensor img = Tensor::zeros({3, H, W});
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const auto& c = palette[size_t(part_at(y, x, dy, dx))];
            const float lum = detail::kIrLum[0] * c[0] + detail::kIrLum[1] * c[1] +
                              detail::kIrLum[2] * c[2];
            float v = std::pow(std::max(lum, 1e-4f), gamma) + noise_sigma * rng.normal();
            v = std::min(1.0f, std::max(0.0f, v));
            for (int ch = 0; ch < 3; ++ch) img.data()[(size_t(ch) * H + y) * W + x] = v;
          }
        ds.ir[size_t(id)].push_back(img);
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Directory io. Layout: root/<identity>/<rgb|ir>/<image>.{ppm,pgm}, identities
// mapped to dense labels in name-sorted order.

inline void export_dataset(const Dataset& ds, const std::string& root) {
  namespace fs = std::filesystem;
  char buf[64];
  for (int id = 0; id < ds.num_ids; ++id) {
    std::snprintf(buf, sizeof(buf), "%03d", id);
    const fs::path id_dir = fs::path(root) / buf;
    fs::create_directories(id_dir / "rgb");
    fs::create_directories(id_dir / "ir");
    for (size_t k = 0; k < ds.rgb[size_t(id)].size(); ++k) {
      const Tensor& t = ds.rgb[size_t(id)][k];
      Image im = make_image(3, ds.height, ds.width);
      im.pix.assign(t.data(), t.data() + t.numel());
      std::snprintf(buf, sizeof(buf), "img_%03zu.ppm", k);
      write_pnm((id_dir / "rgb" / buf).string(), im);
    }
    for (size_t k = 0; k < ds.ir[size_t(id)].size(); ++k) {
      const Tensor& t = ds.ir[size_t(id)][k];
      Image im = make_image(1, ds.height, ds.width);  // channels are replicas, store one
      im.pix.assign(t.data(), t.data() + size_t(ds.height) * ds.width);
      std::snprintf(buf, sizeof(buf), "img_%03zu.pgm", k);
      write_pnm((id_dir / "ir" / buf).string(), im);
    }
  }
}

inline Dataset load_image_directory(const std::string& root, int H, int W) {
  namespace fs = std::filesystem;
  MID_CHECK(fs::is_directory(root), "dataset root '" << root << "' is not a directory");
  std::vector<std::string> id_names;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) id_names.push_back(e.path().filename().string());
  std::sort(id_names.begin(), id_names.end());
  MID_CHECK(!id_names.empty(), "dataset root '" << root << "' has no identity directories");

  Dataset ds;
  ds.height = H;
  ds.width = W;
  ds.num_ids = int(id_names.size());
  ds.rgb.resize(id_names.size());
  ds.ir.resize(id_names.size());

  auto load_modality = [&](const fs::path& dir, int id, bool is_rgb) {
    std::vector<std::string> files;
    if (fs::is_directory(dir))
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    MID_CHECK(!files.empty(), "identity '" << id_names[size_t(id)] << "' has no "
                                           << (is_rgb ? "rgb" : "ir") << " images");
    for (const auto& f : files) {
      Image im = bilinear_resize(read_pnm(f), H, W);
      Tensor t = Tensor::zeros({3, H, W});
      if (im.channels == 3) {
        std::copy(im.pix.begin(), im.pix.end(), t.data());
      } else {
        for (int c = 0; c < 3; ++c)
          std::copy(im.pix.begin(), im.pix.end(), t.data() + size_t(c) * H * W);
      }
      (is_rgb ? ds.rgb : ds.ir)[size_t(id)].push_back(t);
    }
  };
  for (int id = 0; id < ds.num_ids; ++id) {
    load_modality(fs::path(root) / id_names[size_t(id)] / "rgb", id, true);
    load_modality(fs::path(root) / id_names[size_t(id)] / "ir", id, false);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// PK sampling: P identities, K images per identity per modality, rows grouped
// identity-major so row p*K+k holds identity id_pool-pick p. RGB row i and IR
// row i share the identity label (the mixup pairing).

struct Batch {
  Tensor rgb;               // [P*K, 3, H, W]
  Tensor ir;                // [P*K, 3, H, W]
  std::vector<int> labels;  // dataset identity per row
};

namespace detail {

inline std::vector<int> pick_k_images(int available, int K, Rng& rng) {
  std::vector<int> idx;
  if (available >= K) {
    std::vector<int> all(size_t(available), 0);
    for (int i = 0; i < available; ++i) all[size_t(i)] = i;
    rng.shuffle(all);
    idx.assign(all.begin(), all.begin() + K);
  } else {
    // short identity: every image appears at least once, the remainder
    // re-drawn uniformly, order shuffled
    for (int i = 0; i < K; ++i) idx.push_back(i < available ? i : rng.uniform_int(available));
    rng.shuffle(idx);
  }
  return idx;
}

}  // namespace detail

inline Batch pk_sample(const Dataset& ds, const std::vector<int>& id_pool, int P, int K,
                       Rng& rng) {
  MID_CHECK(P >= 1 && K >= 1, "pk_sample: bad P/K");
  MID_CHECK(int(id_pool.size()) >= P,
            "pk_sample: pool has " << id_pool.size() << " identities, need " << P);
  std::vector<int> pool = id_pool;
  rng.shuffle(pool);
  pool.resize(size_t(P));

  const int B = P * K;
  const int H = ds.height, W = ds.width;
  Batch batch;
  batch.rgb = Tensor::zeros({B, 3, H, W});
  batch.ir = Tensor::zeros({B, 3, H, W});
  const size_t img_sz = size_t(3) * H * W;
  for (int p = 0; p < P; ++p) {
    const int id = pool[size_t(p)];
    MID_CHECK(!ds.rgb[size_t(id)].empty() && !ds.ir[size_t(id)].empty(),
              "pk_sample: identity " << id << " lacks images in one modality");
    const auto rgb_idx = detail::pick_k_images(int(ds.rgb[size_t(id)].size()), K, rng);
    const auto ir_idx = detail::pick_k_images(int(ds.ir[size_t(id)].size()), K, rng);
    for (int k = 0; k < K; ++k) {
      const int row = p * K + k;
      std::memcpy(batch.rgb.data() + size_t(row) * img_sz,
                  ds.rgb[size_t(id)][size_t(rgb_idx[size_t(k)])].data(), img_sz * sizeof(float));
      std::memcpy(batch.ir.data() + size_t(row) * img_sz,
                  ds.ir[size_t(id)][size_t(ir_idx[size_t(k)])].data(), img_sz * sizeof(float));
      batch.labels.push_back(id);
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Preprocessing. Shared per-channel statistics across both modalities, so
// standardization commutes with mixing.

struct DataStats {
  std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
  std::array<float, 3> stdev{1.0f, 1.0f, 1.0f};
};

inline DataStats compute_stats(const Dataset& ds, const std::vector<int>& ids) {
  DataStats st;
  const int64_t plane = int64_t(ds.height) * ds.width;
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    int64_t n = 0;
    for (int id : ids) {
      for (const auto* mod : {&ds.rgb[size_t(id)], &ds.ir[size_t(id)]}) {
        for (const Tensor& t : *mod) {
          const float* p = t.data() + size_t(c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            s += p[i];
            s2 += double(p[i]) * p[i];
          }
          n += plane;
        }
      }
    }
    MID_CHECK(n > 0, "compute_stats: empty identity selection");
    const double m = s / double(n);
    st.mean[size_t(c)] = float(m);
    st.stdev[size_t(c)] = float(std::max(1e-3, std::sqrt(std::max(0.0, s2 / double(n) - m * m))));
  }
  return st;
}

inline Tensor standardize(const Tensor& x, const DataStats& st) {
  MID_CHECK(x.rank() == 4 && x.dim(1) == 3, "standardize expects [B,3,H,W]");
  const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int64_t plane = int64_t(H) * W;
  Tensor out = Tensor::zeros(x.shape());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < 3; ++c) {
      const float* p = x.data() + (size_t(b) * 3 + c) * plane;
      float* o = out.data() + (size_t(b) * 3 + c) * plane;
      const float m = st.mean[size_t(c)], inv = 1.0f / st.stdev[size_t(c)];
      for (int64_t i = 0; i < plane; ++i) o[i] = (p[i] - m) * inv;
    }
  return out;
}

// Train-time augmentation: per image, horizontal flip with p=0.5 and a
// zero-pad-by-`pad` random crop back to the original size. Draw order per
// image: flip coin, then crop offsets.
inline Tensor augment(const Tensor& x, Rng& rng, int pad = 10) {
  MID_CHECK(x.rank() == 4, "augment expects [B,C,H,W]");
  MID_CHECK(pad >= 0, "augment: negative pad");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = Tensor::zeros(x.shape());
  for (int b = 0; b < B; ++b) {
    const bool flip = rng.uniform() < 0.5f;
    const int oy = int(rng.uniform_int(uint64_t(2 * pad + 1)));
    const int ox = int(rng.uniform_int(uint64_t(2 * pad + 1)));
    for (int c = 0; c < C; ++c) {
      const float* src = x.data() + (size_t(b) * C + c) * H * W;
      float* dst = out.data() + (size_t(b) * C + c) * H * W;
      for (int y = 0; y < H; ++y) {
        const int sy = y + oy - pad;
        if (sy < 0 || sy >= H) continue;  // zero padding
        for (int xw = 0; xw < W; ++xw) {
          const int sx0 = xw + ox - pad;
          if (sx0 < 0 || sx0 >= W) continue;
          const int sx = flip ? W - 1 - sx0 : sx0;
          dst[size_t(y) * W + xw] = src[size_t(sy) * W + sx];
        }
      }
    }
  }
  return out;
}

inline Tensor preprocess(const Tensor& x, bool train, Rng& rng, const DataStats& st,
                         int pad = 10) {
  return train ? standardize(augment(x, rng, pad), st) : standardize(x, st);
}

// ---------------------------------------------------------------------------
// Identity split and the raw-pixel calibration oracle.

struct IdSplit {
  std::vector<int> train_ids;
  std::vector<int> eval_ids;
};

// Last quarter of identities held out (identity-disjoint evaluation).
inline IdSplit split_ids(int n_ids, float eval_fraction = 0.25f) {
  MID_CHECK(n_ids >= 1, "split_ids: empty dataset");
  int n_eval = int(float(n_ids) * eval_fraction);
  if (n_eval == 0 && n_ids >= 2 && eval_fraction > 0.0f) n_eval = 1;
  IdSplit sp;
  for (int i = 0; i < n_ids - n_eval; ++i) sp.train_ids.push_back(i);
  for (int i = n_ids - n_eval; i < n_ids; ++i) sp.eval_ids.push_back(i);
  return sp;
}

// Nearest-centroid accuracy on raw pixels. Within one modality this should be
// high (the task is learnable); across modalities it should be near chance
// (the modality gap is real). Centroids come from the probe's opposite set.
inline double centroid_match_rate(const Dataset& ds, const std::vector<int>& ids,
                                  bool cross_modality) {
  MID_CHECK(ids.size() >= 2, "centroid_match_rate: need at least 2 identities");
  const int64_t n_pix = int64_t(3) * ds.height * ds.width;
  auto centroid = [&](const std::vector<Tensor>& imgs) {
    std::vector<double> c(size_t(n_pix), 0.0);
    for (const Tensor& t : imgs)
      for (int64_t i = 0; i < n_pix; ++i) c[size_t(i)] += t.data()[i];
    for (double& v : c) v /= double(imgs.size());
    return c;
  };
  std::vector<std::vector<double>> rgb_cent, ir_cent;
  for (int id : ids) {
    rgb_cent.push_back(centroid(ds.rgb[size_t(id)]));
    ir_cent.push_back(centroid(ds.ir[size_t(id)]));
  }
  auto classify = [&](const Tensor& img, const std::vector<std::vector<double>>& cents) {
    int best = -1;
    double best_d = 0.0;
    for (size_t j = 0; j < cents.size(); ++j) {
      double d = 0.0;
      for (int64_t i = 0; i < n_pix; ++i) {
        const double df = double(img.data()[i]) - cents[j][size_t(i)];
        d += df * df;
      }
      if (best < 0 || d < best_d) {
        best = int(j);
        best_d = d;
      }
    }
    return best;
  };
  int64_t hits = 0, total = 0;
  for (size_t p = 0; p < ids.size(); ++p) {
    const int id = ids[p];
    for (const Tensor& t : ds.rgb[size_t(id)]) {
      const int pred = classify(t, cross_modality ? ir_cent : rgb_cent);
      hits += pred == int(p);
      ++total;
    }
    for (const Tensor& t : ds.ir[size_t(id)]) {
      const int pred = classify(t, cross_modality ? rgb_cent : ir_cent);
      hits += pred == int(p);
      ++total;
    }
  }
  return double(hits) / double(total);
}

}  // namespace mid
