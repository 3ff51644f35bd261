#pragma once

// Modality-adaptive mixup and its one-step actor-critic agent. The actor maps
// the concatenated RGB/IR state maps to per-region mixup ratios in (0,1); the
// critic scores (state, action) pairs; the reward is the retrieval-score gain
// from adding the mixed-modality similarities. No replay buffer, no target
// networks: the Q-target is the observed reward itself.

#include <string>
#include <vector>

#include "mid/backbone.hpp"
#include "mid/metrics.hpp"
#include "mid/optim.hpp"
#include "mid/tensor.hpp"

namespace mid {

// Region mixup: stripe g of the output is m[b,g]*rgb + (1-m[b,g])*ir, the
// scalar ratio broadcasting over channels and the stripe's pixels.
inline Tensor mix_regions(const Tensor& x_rgb, const Tensor& x_ir, const Tensor& m) {
  MID_CHECK(x_rgb.rank() == 4 && x_rgb.shape() == x_ir.shape(),
            "mix_regions: image shapes differ, " << shape_str(x_rgb.shape()) << " vs "
                                                 << shape_str(x_ir.shape()));
  MID_CHECK(m.rank() == 2 && m.dim(0) == x_rgb.dim(0),
            "mix_regions: ratios must be [B,G], got " << shape_str(m.shape()));
  const int B = x_rgb.dim(0), C = x_rgb.dim(1), H = x_rgb.dim(2), W = x_rgb.dim(3);
  const int G = m.dim(1);
  MID_CHECK(G <= H, "mix_regions: G=" << G << " exceeds H=" << H);
  for (int64_t i = 0; i < m.numel(); ++i)
    MID_CHECK(m.data()[i] >= 0.0f && m.data()[i] <= 1.0f,
              "mix_regions: ratio " << m.data()[i] << " outside [0,1]");

  Tensor out = Tensor::zeros(x_rgb.shape());
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < G; ++g) {
      auto [lo, hi] = stripe_bounds(H, G, g);
      const float mv = m.data()[size_t(b) * G + g];
      for (int c = 0; c < C; ++c)
        for (int h = lo; h < hi; ++h) {
          const size_t off = ((size_t(b) * C + c) * H + h) * W;
          const float* pr = x_rgb.data() + off;
          const float* pi = x_ir.data() + off;
          float* po = out.data() + off;
          for (int w = 0; w < W; ++w) po[w] = mv * pr[w] + (1.0f - mv) * pi[w];
        }
    }
  check_finite(out, "mix_regions");
  if (needs_grad(x_rgb, x_ir, m)) {
    Tensor rc = x_rgb, ic = x_ir, mc = m, oc = out;
    graph().record(out, {x_rgb, x_ir, m},
                   [rc, ic, mc, oc, B, C, H, W, G]() mutable {
                     const float* gr = oc.grad().data();
                     float* g_rgb = track(rc) ? rc.grad_accum() : nullptr;
                     float* g_ir = track(ic) ? ic.grad_accum() : nullptr;
                     float* g_m = track(mc) ? mc.grad_accum() : nullptr;
                     for (int b = 0; b < B; ++b)
                       for (int g = 0; g < G; ++g) {
                         auto [lo, hi] = stripe_bounds(H, G, g);
                         const float mv = mc.data()[size_t(b) * G + g];
                         double m_acc = 0.0;
                         for (int c = 0; c < C; ++c)
                           for (int h = lo; h < hi; ++h) {
                             const size_t off = ((size_t(b) * C + c) * H + h) * W;
                             for (int w = 0; w < W; ++w) {
                               const float gv = gr[off + w];
                               if (g_rgb) g_rgb[off + w] += mv * gv;
                               if (g_ir) g_ir[off + w] += (1.0f - mv) * gv;
                               if (g_m)
                                 m_acc += double(gv) *
                                          (rc.data()[off + w] - ic.data()[off + w]);
                             }
                           }
                         if (g_m) g_m[size_t(b) * G + g] += float(m_acc);
                       }
                   },
                   "mix_regions");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reward: combined-retrieval-score gain from adding the mixed-feature
// similarity block to each cross-modality direction.

struct RewardRecord {
  double reward = 0.0;
  double e_rgb_ir = 0.0;      // E(S^{rgb,ir})
  double e_rgb_ir_aug = 0.0;  // E(S^{rgb,ir} + S^{mix,ir})
  double e_ir_rgb = 0.0;      // E(S^{ir,rgb})
  double e_ir_rgb_aug = 0.0;  // E(S^{ir,rgb} + S^{mix,rgb})
};

inline SimilarityMatrix similarity_transpose(const SimilarityMatrix& s) {
  std::vector<double> vals(size_t(s.Q) * s.Gal);
  for (int i = 0; i < s.Q; ++i)
    for (int j = 0; j < s.Gal; ++j) vals[size_t(j) * s.Q + i] = s.at(i, j);
  return make_similarity(std::move(vals), s.gallery_labels, s.query_labels);
}

// K is the number of images per identity per modality in the batch; the score
// E sums mAP with 1/k-weighted rank-k for k=1..K. Operates on values only (no
// graph recording), so features should arrive detached.
inline RewardRecord compute_reward(const Tensor& f_rgb, const Tensor& f_ir, const Tensor& f_mix,
                                   const std::vector<int>& labels, int K) {
  MID_CHECK(f_rgb.rank() == 2 && f_rgb.shape() == f_ir.shape() && f_rgb.shape() == f_mix.shape(),
            "compute_reward: feature blocks must share [b,D]");
  const int b = f_rgb.dim(0);
  MID_CHECK(int(labels.size()) == b, "compute_reward: label count mismatch");
  MID_CHECK(b >= 2, "compute_reward: need at least 2 samples");
  bool multi_id = false;
  for (int i = 1; i < b; ++i) multi_id |= labels[size_t(i)] != labels[0];
  MID_CHECK(multi_id, "compute_reward: single-identity batch, metrics undefined");

  const SimilarityMatrix s_ri = cosine_similarity_matrix(f_rgb, f_ir, labels, labels);
  const SimilarityMatrix s_mi = cosine_similarity_matrix(f_mix, f_ir, labels, labels);
  const SimilarityMatrix s_ir = similarity_transpose(s_ri);
  const SimilarityMatrix s_mr = cosine_similarity_matrix(f_mix, f_rgb, labels, labels);

  RewardRecord r;
  r.e_rgb_ir = eval_score_E(s_ri, K);
  r.e_rgb_ir_aug = eval_score_E(similarity_sum(s_ri, s_mi), K);
  r.e_ir_rgb = eval_score_E(s_ir, K);
  r.e_ir_rgb_aug = eval_score_E(similarity_sum(s_ir, s_mr), K);
  r.reward = (r.e_rgb_ir_aug - r.e_rgb_ir) + (r.e_ir_rgb_aug - r.e_ir_rgb);
  MID_CHECK(std::isfinite(r.reward), "compute_reward: non-finite reward");
  return r;
}

// ---------------------------------------------------------------------------
// Actor-critic pair. Both share the trunk shape: 3x3 conv over the
// channel-concatenated state maps, BN, ReLU, global average pooling; the
// critic additionally concatenates the action before its FC stack.

struct AgentConfig {
  int trunk_channels = 32;
  int hidden = 64;
  float noise_sigma = 0.05f;
};

class Agent {
 public:
  Agent(int state_channels, int G, uint64_t seed, AgentConfig acfg = {})
      : cfg_(acfg), state_channels_(state_channels), G_(G) {
    MID_CHECK(state_channels >= 1 && G >= 1, "agent: bad state/region config");
    Rng rng(splitmix64(seed) ^ 0x6167656e74ull);
    const int cin = 2 * state_channels;
    auto build_trunk = [&](const std::string& base, Trunk& t) {
      t.conv_w = store_.param(base + ".conv.weight",
                              randn_tensor({cfg_.trunk_channels, cin, 3, 3}, rng,
                                           1.0f / std::sqrt(9.0f * float(cin))));
      t.bn_gamma = store_.param(base + ".bn.gamma", Tensor::full({cfg_.trunk_channels}, 1.0f));
      t.bn_beta = store_.param(base + ".bn.beta", Tensor::zeros({cfg_.trunk_channels}));
      t.bn_rm = store_.buffer(base + ".bn.running_mean", Tensor::zeros({cfg_.trunk_channels}));
      t.bn_rv = store_.buffer(base + ".bn.running_var", Tensor::full({cfg_.trunk_channels}, 1.0f));
    };
    build_trunk("agent.actor", actor_trunk_);
    actor_fc0_w_ = store_.param("agent.actor.fc0.weight",
                                randn_tensor({cfg_.trunk_channels, cfg_.hidden}, rng,
                                             1.0f / std::sqrt(float(cfg_.trunk_channels))));
    actor_fc0_b_ = store_.param("agent.actor.fc0.bias", Tensor::zeros({cfg_.hidden}));
    actor_fc1_w_ = store_.param("agent.actor.fc1.weight",
                                randn_tensor({cfg_.hidden, G}, rng,
                                             1.0f / std::sqrt(float(cfg_.hidden))));
    actor_fc1_b_ = store_.param("agent.actor.fc1.bias", Tensor::zeros({G}));

    build_trunk("agent.critic", critic_trunk_);
    critic_fc0_w_ = store_.param("agent.critic.fc0.weight",
                                 randn_tensor({cfg_.trunk_channels + G, cfg_.hidden}, rng,
                                              1.0f / std::sqrt(float(cfg_.trunk_channels + G))));
    critic_fc0_b_ = store_.param("agent.critic.fc0.bias", Tensor::zeros({cfg_.hidden}));
    critic_fc1_w_ = store_.param("agent.critic.fc1.weight",
                                 randn_tensor({cfg_.hidden, 1}, rng,
                                              1.0f / std::sqrt(float(cfg_.hidden))));
    critic_fc1_b_ = store_.param("agent.critic.fc1.bias", Tensor::zeros({1}));
  }

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  int regions() const { return G_; }
  const AgentConfig& config() const { return cfg_; }

  std::vector<Tensor> actor_params() const { return store_.parameters_with_prefix("agent.actor."); }
  std::vector<Tensor> critic_params() const {
    return store_.parameters_with_prefix("agent.critic.");
  }

  // m in (0,1)^{B x G}, before any exploration noise
  Tensor actor_forward(const Tensor& state_rgb, const Tensor& state_ir, bool train,
                       bool update_running) {
    Tensor pooled = trunk_forward(actor_trunk_, state_rgb, state_ir, train, update_running);
    Tensor h = relu(linear(pooled, actor_fc0_w_, actor_fc0_b_));
    return sigmoid(linear(h, actor_fc1_w_, actor_fc1_b_));
  }

  // scalar Q: per-pair value averaged over the batch
  Tensor critic_forward(const Tensor& state_rgb, const Tensor& state_ir, const Tensor& action,
                        bool train, bool update_running) {
    MID_CHECK(action.rank() == 2 && action.dim(1) == G_,
              "critic_forward: action must be [B," << G_ << "], got "
                                                   << shape_str(action.shape()));
    Tensor pooled = trunk_forward(critic_trunk_, state_rgb, state_ir, train, update_running);
    Tensor h = relu(linear(concat_cols(pooled, action), critic_fc0_w_, critic_fc0_b_));
    return mean_all(linear(h, critic_fc1_w_, critic_fc1_b_));
  }

  // executed action: actor output plus clamped Gaussian exploration noise,
  // detached from any graph
  Tensor explore(const Tensor& m, Rng& rng) const {
    Tensor out = m.detach();
    for (int64_t i = 0; i < out.numel(); ++i) {
      float v = out.data()[i] + cfg_.noise_sigma * rng.normal();
      out.data()[i] = std::min(1.0f, std::max(0.0f, v));
    }
    return out;
  }

  struct UpdateResult {
    float loss_critic = 0.0f;
    float loss_actor = 0.0f;
  };

  // One-step update: critic regresses Q(s, executed action) onto the observed
  // reward, then the actor ascends the critic's value of its own fresh action.
  // Critic gradients produced by the actor step are discarded.
  UpdateResult update(const Tensor& state_rgb, const Tensor& state_ir, const Tensor& executed,
                      double reward, Adam& critic_opt, Adam& actor_opt) {
    MID_CHECK(std::isfinite(reward), "agent update: reward is not finite");
    UpdateResult res;
    {
      Tensor q = critic_forward(state_rgb, state_ir, executed.detach(), true, true);
      Tensor diff = add_scalar(q, -float(reward));
      Tensor l_q = mul(diff, diff);
      res.loss_critic = l_q.item();
      backward(l_q);
      critic_opt.step();
    }
    {
      Tensor m = actor_forward(state_rgb, state_ir, true, true);
      Tensor q = critic_forward(state_rgb, state_ir, m, true, false);
      Tensor l_a = scale(q, -1.0f);
      res.loss_actor = l_a.item();
      backward(l_a);
      actor_opt.step();
      zero_grads(critic_params());  // actor step leaks grads into the frozen critic
    }
    return res;
  }

 private:
  struct Trunk {
    Tensor conv_w, bn_gamma, bn_beta, bn_rm, bn_rv;
  };

  Tensor trunk_forward(Trunk& t, const Tensor& s_rgb, const Tensor& s_ir, bool train,
                       bool update_running) {
    MID_CHECK(s_rgb.rank() == 4 && s_rgb.shape() == s_ir.shape() &&
                  s_rgb.dim(1) == state_channels_,
              "agent state must be [B," << state_channels_ << ",H,W] per modality");
    Tensor x = concat_channels(s_rgb, s_ir);
    Tensor h = conv2d(x, t.conv_w, 1, 1);
    h = relu(batch_norm2d(h, t.bn_gamma, t.bn_beta, t.bn_rm, t.bn_rv, train, 0.1f, 1e-5f,
                          update_running));
    return pool_global_avg(h);
  }

  AgentConfig cfg_;
  int state_channels_;
  int G_;
  ParamStore store_;
  Trunk actor_trunk_, critic_trunk_;
  Tensor actor_fc0_w_, actor_fc0_b_, actor_fc1_w_, actor_fc1_b_;
  Tensor critic_fc0_w_, critic_fc0_b_, critic_fc1_w_, critic_fc1_b_;
};

}  // namespace mid
