#pragma once

// The decomposed convolution network: a small residual CNN whose first n_d
// blocks carry modality-specific decomposed convs, followed by a part-pooling
// head with one embedding and one classifier per branch (global + G parts).
//
// Spatial plan (3x3 stride-1 convs preserve dims; downsampling is 2x2 average
// pooling): input -> stem+pool -> block1 -> block2 -> pool -> block3..n ->
// head. With last_stride=2 an extra pool runs before the final block. The
// agent's state is the output of block n_d (stem output when n_d=0).

#include <string>
#include <vector>

#include "mid/losses.hpp"
#include "mid/macd.hpp"
#include "mid/optim.hpp"
#include "mid/tensor.hpp"

namespace mid {

struct NetworkConfig {
  int n_blocks = 5;
  int n_d = 3;  // decomposed blocks, counted from the bottom
  std::vector<int> channels = {16, 32, 64, 128, 128};
  int G_parts = 6;
  int feature_dim = 64;
  int K_bases = 9;
  int last_stride = 1;  // 2 adds a pool before the final block
  int input_h = 72;
  int input_w = 36;
  bool per_modality_bn = false;  // separate BN inside decomposed blocks
};

struct FeatureBundle {
  Tensor state_map;
  Tensor global_emb;              // [B,D]
  std::vector<Tensor> part_embs;  // G x [B,D]
  std::vector<Tensor> logits;     // (G+1) x [B,P], train mode only (global first)
  Tensor retrieval;               // [B,(G+1)*D], concatenated L2-normalized segments
};

namespace detail {

struct BnLayer {
  Tensor gamma, beta, running_mean, running_var;
};

struct ResBlock {
  bool decomposed = false;
  bool has_proj = false;
  DecomposedConv dconv1, dconv2;   // when decomposed
  Tensor conv1_w, conv2_w;         // when plain
  std::vector<BnLayer> bn1, bn2;   // one entry, or three when per-modality
  Tensor proj_w;
  BnLayer proj_bn;
};

struct HeadBranch {
  Tensor emb_w, emb_b;
  Tensor cls_w, cls_b;
};

}  // namespace detail

class Network {
 public:
  Network(const NetworkConfig& cfg, int n_classes, uint64_t seed)
      : cfg_(cfg), n_classes_(n_classes) {
    validate_config();
    Rng rng(splitmix64(seed) ^ 0x6e65747762ull);

    stem_w_ = store_.param("backbone.stem.conv.weight",
                           randn_tensor({cfg_.channels[0], 3, 3, 3}, rng, conv_std(3, 3)));
    stem_bn_ = make_bn("backbone.stem.bn", cfg_.channels[0]);

    for (int i = 0; i < cfg_.n_blocks; ++i) {
      const std::string base = "backbone.block" + std::to_string(i + 1);
      const int cin = cfg_.channels[size_t(std::max(i - 1, 0))];
      const int cout = cfg_.channels[size_t(i)];
      detail::ResBlock blk;
      blk.decomposed = i < cfg_.n_d;
      if (blk.decomposed) {
        blk.dconv1 = make_decomposed(base + ".conv1", cin, cout, rng);
        blk.dconv2 = make_decomposed(base + ".conv2", cout, cout, rng);
      } else {
        blk.conv1_w = store_.param(base + ".conv1.weight",
                                   randn_tensor({cout, cin, 3, 3}, rng, conv_std(cin, 3)));
        blk.conv2_w = store_.param(base + ".conv2.weight",
                                   randn_tensor({cout, cout, 3, 3}, rng, conv_std(cout, 3)));
      }
      const bool split_bn = cfg_.per_modality_bn && blk.decomposed;
      for (int v = 0; v < (split_bn ? 3 : 1); ++v) {
        const std::string tag = split_bn ? "." + std::string(modality_name(Modality(v))) : "";
        blk.bn1.push_back(make_bn(base + ".bn1" + tag, cout));
        blk.bn2.push_back(make_bn(base + ".bn2" + tag, cout));
      }
      blk.has_proj = cin != cout;
      if (blk.has_proj) {
        blk.proj_w = store_.param(base + ".proj.weight",
                                  randn_tensor({cout, cin, 1, 1}, rng, conv_std(cin, 1)));
        blk.proj_bn = make_bn(base + ".proj_bn", cout);
      }
      blocks_.push_back(std::move(blk));
    }

    const int c_final = cfg_.channels.back();
    global_ = make_branch("backbone.head.global", c_final, rng);
    for (int g = 0; g < cfg_.G_parts; ++g)
      parts_.push_back(make_branch("backbone.head.part" + std::to_string(g), c_final, rng));
  }

  const NetworkConfig& config() const { return cfg_; }
  int n_classes() const { return n_classes_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  int state_channels() const {
    return cfg_.n_d == 0 ? cfg_.channels[0] : cfg_.channels[size_t(cfg_.n_d - 1)];
  }

  // spatial dims of the state map, by walking the pool plan
  std::pair<int, int> state_hw() const {
    int h = cfg_.input_h / 2, w = cfg_.input_w / 2;  // stem pool
    if (cfg_.n_d >= 3 && has_mid_pool()) {
      h /= 2;
      w /= 2;
    }
    if (cfg_.last_stride == 2 && cfg_.n_d >= cfg_.n_blocks) {
      h /= 2;
      w /= 2;
    }
    return {h, w};
  }

  Tensor extract_state(const Tensor& x, Modality m, bool train) {
    return trunk(x, m, train, false, cfg_.n_d);
  }

  FeatureBundle forward(const Tensor& x, Modality m, bool train) {
    return forward(x, m, train, train);
  }

  FeatureBundle forward(const Tensor& x, Modality m, bool train, bool update_running) {
    FeatureBundle fb;
    Tensor h = trunk(x, m, train, update_running, -1, &fb.state_map);
    Tensor pooled_global = pool_global_avg(h);
    Tensor pooled_parts = pool_region_avg(h, cfg_.G_parts);

    fb.global_emb = linear(pooled_global, global_.emb_w, global_.emb_b);
    for (int g = 0; g < cfg_.G_parts; ++g)
      fb.part_embs.push_back(
          linear(select_region(pooled_parts, g), parts_[size_t(g)].emb_w, parts_[size_t(g)].emb_b));

    if (train) {
      fb.logits.push_back(linear(fb.global_emb, global_.cls_w, global_.cls_b));
      for (int g = 0; g < cfg_.G_parts; ++g)
        fb.logits.push_back(
            linear(fb.part_embs[size_t(g)], parts_[size_t(g)].cls_w, parts_[size_t(g)].cls_b));
    }

    fb.retrieval = l2_normalize_rows(fb.global_emb);
    for (int g = 0; g < cfg_.G_parts; ++g)
      fb.retrieval = concat_cols(fb.retrieval, l2_normalize_rows(fb.part_embs[size_t(g)]));
    return fb;
  }

  struct ParamReport {
    int64_t total = 0;                  // trainable values in the network
    int64_t decomposed_conv = 0;        // values held by decomposed layers
    int64_t full_conv_equivalent = 0;   // what three full conv banks would cost
  };

  ParamReport param_report() const {
    ParamReport r;
    r.total = store_.num_values(false);
    for (int i = 0; i < cfg_.n_d; ++i) {
      const int cin = cfg_.channels[size_t(std::max(i - 1, 0))];
      const int cout = cfg_.channels[size_t(i)];
      r.decomposed_conv += decomposed_param_count(cfg_.K_bases, 3, cin, cout) +
                           decomposed_param_count(cfg_.K_bases, 3, cout, cout);
      r.full_conv_equivalent += full_param_count(3, cin, cout) + full_param_count(3, cout, cout);
    }
    return r;
  }

 private:
  void validate_config() {
    MID_CHECK(cfg_.n_blocks >= 1, "network needs at least 1 block");
    MID_CHECK(cfg_.n_d >= 0 && cfg_.n_d <= cfg_.n_blocks,
              "n_d=" << cfg_.n_d << " outside [0," << cfg_.n_blocks << "]");
    MID_CHECK(int(cfg_.channels.size()) == cfg_.n_blocks,
              "channels list has " << cfg_.channels.size() << " entries for " << cfg_.n_blocks
                                   << " blocks");
    for (int c : cfg_.channels) MID_CHECK(c >= 1, "non-positive channel count");
    MID_CHECK(cfg_.feature_dim >= 1 && cfg_.G_parts >= 1 && cfg_.K_bases >= 1,
              "bad head/decomposition config");
    MID_CHECK(cfg_.last_stride == 1 || cfg_.last_stride == 2,
              "last_stride must be 1 or 2, got " << cfg_.last_stride);
    MID_CHECK(n_classes_ >= 2, "network needs at least 2 identity classes");
    MID_CHECK(cfg_.input_h % 2 == 0 && cfg_.input_w % 2 == 0,
              "input dims must be even for the stem pool, got " << cfg_.input_h << "x"
                                                                << cfg_.input_w);
    int h = cfg_.input_h / 2;
    if (has_mid_pool()) {
      MID_CHECK(h % 2 == 0, "input height " << cfg_.input_h << " not divisible by 4");
      h /= 2;
    }
    if (cfg_.last_stride == 2) h /= 2;
    MID_CHECK(cfg_.G_parts <= h,
              "G_parts=" << cfg_.G_parts << " exceeds final feature height " << h);
  }

  bool has_mid_pool() const { return cfg_.n_blocks >= 3; }

  static float conv_std(int cin, int s) { return 1.0f / std::sqrt(float(s) * s * cin); }

  detail::BnLayer make_bn(const std::string& base, int c) {
    detail::BnLayer bn;
    bn.gamma = store_.param(base + ".gamma", Tensor::full({c}, 1.0f));
    bn.beta = store_.param(base + ".beta", Tensor::zeros({c}));
    bn.running_mean = store_.buffer(base + ".running_mean", Tensor::zeros({c}));
    bn.running_var = store_.buffer(base + ".running_var", Tensor::full({c}, 1.0f));
    return bn;
  }

  DecomposedConv make_decomposed(const std::string& base, int cin, int cout, Rng& rng) {
    DecomposedConv d = init_decomposition(cfg_.K_bases, 3, cin, cout, rng);
    d.alpha_rgb = store_.param(base + ".alpha.rgb", d.alpha_rgb);
    d.alpha_ir = store_.param(base + ".alpha.ir", d.alpha_ir);
    d.alpha_mix = store_.param(base + ".alpha.mix", d.alpha_mix);
    d.psi = store_.param(base + ".psi", d.psi);
    return d;
  }

  detail::HeadBranch make_branch(const std::string& base, int c_in, Rng& rng) {
    detail::HeadBranch br;
    br.emb_w = store_.param(base + "_emb.weight",
                            randn_tensor({c_in, cfg_.feature_dim}, rng, 1.0f / std::sqrt(float(c_in))));
    br.emb_b = store_.param(base + "_emb.bias", Tensor::zeros({cfg_.feature_dim}));
    br.cls_w = store_.param(base + "_cls.weight",
                            randn_tensor({cfg_.feature_dim, n_classes_}, rng,
                                         1.0f / std::sqrt(float(cfg_.feature_dim))));
    br.cls_b = store_.param(base + "_cls.bias", Tensor::zeros({n_classes_}));
    return br;
  }

  Tensor apply_bn(detail::BnLayer& bn, const Tensor& x, bool train, bool update_running) {
    return batch_norm2d(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, train, 0.1f, 1e-5f,
                        update_running);
  }

  detail::BnLayer& pick_bn(std::vector<detail::BnLayer>& v, Modality m) {
    return v.size() == 1 ? v[0] : v[size_t(int(m))];
  }

  Tensor block_forward(detail::ResBlock& blk, const Tensor& x, Modality m, bool train, bool upd) {
    Tensor h = blk.decomposed ? macd_forward(x, blk.dconv1, m, 1, 1) : conv2d(x, blk.conv1_w, 1, 1);
    h = relu(apply_bn(pick_bn(blk.bn1, m), h, train, upd));
    h = blk.decomposed ? macd_forward(h, blk.dconv2, m, 1, 1) : conv2d(h, blk.conv2_w, 1, 1);
    h = apply_bn(pick_bn(blk.bn2, m), h, train, upd);
    Tensor skip = x;
    if (blk.has_proj) skip = apply_bn(blk.proj_bn, conv2d(x, blk.proj_w, 1, 0), train, upd);
    return relu(add(h, skip));
  }

  // Runs the conv trunk. stop_after >= 0 returns right after that many blocks
  // (0 = stem output); -1 runs everything. state_out, when given, captures the
  // block-n_d output along the way.
  Tensor trunk(const Tensor& x, Modality m, bool train, bool upd, int stop_after,
               Tensor* state_out = nullptr) {
    MID_CHECK(x.rank() == 4 && x.dim(1) == 3 && x.dim(2) == cfg_.input_h && x.dim(3) == cfg_.input_w,
              "network input must be [B,3," << cfg_.input_h << "," << cfg_.input_w << "], got "
                                            << shape_str(x.shape()));
    Tensor h = avg_pool2x2(relu(apply_bn(stem_bn_, conv2d(x, stem_w_, 1, 1), train, upd)));
    if (state_out && cfg_.n_d == 0) *state_out = h;
    if (stop_after == 0) return h;
    for (int i = 0; i < cfg_.n_blocks; ++i) {
      if (i == 2 && has_mid_pool()) h = avg_pool2x2(h);
      if (i == cfg_.n_blocks - 1 && cfg_.last_stride == 2) h = avg_pool2x2(h);
      h = block_forward(blocks_[size_t(i)], h, m, train, upd);
      if (state_out && i + 1 == cfg_.n_d) *state_out = h;
      if (stop_after == i + 1) return h;
    }
    return h;
  }

  NetworkConfig cfg_;
  int n_classes_;
  ParamStore store_;
  Tensor stem_w_;
  detail::BnLayer stem_bn_;
  std::vector<detail::ResBlock> blocks_;
  detail::HeadBranch global_;
  std::vector<detail::HeadBranch> parts_;
};

}  // namespace mid
