#pragma once

// The alternating optimization loop: one supervised step on the decomposed
// network, then one actor-critic step on the agent, per batch. Owns the
// dataset, the identity split, logging, and checkpointing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mid/agent.hpp"
#include "mid/backbone.hpp"
#include "mid/checkpoint.hpp"
#include "mid/config.hpp"
#include "mid/data.hpp"
#include "mid/losses.hpp"
#include "mid/metrics.hpp"
#include "mid/optim.hpp"

namespace mid {

struct StepLog {
  float l_dcn = 0.0f;
  float l_ct_rgb_ir = 0.0f;  // batch-hard value in the baseline configuration
  float l_ct_rgb_mix = 0.0f;
  float l_ct_ir_mix = 0.0f;
  float l_id_rgb = 0.0f;
  float l_id_ir = 0.0f;
  float l_id_mix = 0.0f;
  float l_a = 0.0f;
  float l_q = 0.0f;
  float reward = 0.0f;
  float mean_m = 0.0f;
};

struct EvalFeatures {
  Tensor rgb, ir;  // [N,D] retrieval features
  std::vector<int> rgb_labels, ir_labels;
};

inline EvalFeatures extract_eval_features(Network& net, const Dataset& ds,
                                          const std::vector<int>& ids, const DataStats& st,
                                          int chunk = 32) {
  NoGradGuard ng;
  MID_CHECK(!ids.empty(), "extract_eval_features: empty identity selection");
  EvalFeatures out;
  const int D = (net.config().G_parts + 1) * net.config().feature_dim;
  auto run_modality = [&](bool is_rgb, Tensor& feats, std::vector<int>& labels) {
    std::vector<std::pair<int, const Tensor*>> imgs;
    for (int id : ids)
      for (const Tensor& t : (is_rgb ? ds.rgb : ds.ir)[size_t(id)]) imgs.push_back({id, &t});
    const int N = int(imgs.size());
    feats = Tensor::zeros({N, D});
    const size_t img_sz = size_t(3) * ds.height * ds.width;
    for (int start = 0; start < N; start += chunk) {
      const int n = std::min(chunk, N - start);
      Tensor x = Tensor::zeros({n, 3, ds.height, ds.width});
      for (int i = 0; i < n; ++i)
        std::memcpy(x.data() + size_t(i) * img_sz, imgs[size_t(start + i)].second->data(),
                    img_sz * sizeof(float));
      FeatureBundle fb =
          net.forward(standardize(x, st), is_rgb ? Modality::rgb : Modality::ir, false);
      std::memcpy(feats.data() + size_t(start) * D, fb.retrieval.data(),
                  size_t(n) * D * sizeof(float));
    }
    for (const auto& [id, t] : imgs) labels.push_back(id);
  };
  run_modality(true, out.rgb, out.rgb_labels);
  run_modality(false, out.ir, out.ir_labels);
  return out;
}

inline std::pair<RetrievalReport, RetrievalReport> evaluate_directions(Network& net,
                                                                       const Dataset& ds,
                                                                       const std::vector<int>& ids,
                                                                       const DataStats& st) {
  EvalFeatures f = extract_eval_features(net, ds, ids, st);
  RetrievalReport a = retrieval_eval(f.rgb, f.ir, f.rgb_labels, f.ir_labels, "rgb_to_ir");
  RetrievalReport b = retrieval_eval(f.ir, f.rgb, f.ir_labels, f.rgb_labels, "ir_to_rgb");
  return {a, b};
}

struct FitResult {
  double best_mean_map = -1.0;
  int best_epoch = -1;
  double last_mean_map = -1.0;
  std::string best_ckpt, last_ckpt;
};

class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg) : cfg_(cfg) {
    validate_config(cfg_);
    if (cfg_.source == "synthetic") {
      ds_ = generate_synthetic_dataset(cfg_.ids, cfg_.imgs_per_id, cfg_.height, cfg_.width,
                                       cfg_.seed,
                                       cfg_.difficulty == "easy" ? Difficulty::easy
                                                                 : Difficulty::hard);
    } else {
      ds_ = load_image_directory(cfg_.root, cfg_.height, cfg_.width);
    }
    split_ = split_ids(ds_.num_ids, cfg_.eval_fraction);
    MID_CHECK(int(split_.train_ids.size()) >= cfg_.p_ids,
              "train split has " << split_.train_ids.size() << " identities, batch needs "
                                 << cfg_.p_ids);
    stats_ = compute_stats(ds_, split_.train_ids);
    for (size_t i = 0; i < split_.train_ids.size(); ++i)
      class_of_[split_.train_ids[i]] = int(i);

    net_ = std::make_unique<Network>(cfg_.net, int(split_.train_ids.size()),
                                     splitmix64(cfg_.seed ^ 0x6261636bull));
    backbone_opt_ = std::make_unique<SgdMomentum>(backbone_train_params(), cfg_.lr, cfg_.momentum);

    if (cfg_.scheme == "mam") {
      AgentConfig acfg;
      acfg.noise_sigma = cfg_.noise_sigma;
      agent_ = std::make_unique<Agent>(net_->state_channels(), cfg_.net.G_parts,
                                       splitmix64(cfg_.seed ^ 0x6167656eull), acfg);
      critic_opt_ = std::make_unique<Adam>(agent_->critic_params(), cfg_.agent_lr);
      actor_opt_ = std::make_unique<Adam>(agent_->actor_params(), cfg_.agent_lr);
      assert_disjoint_optimizers();
    }

    Rng master(cfg_.seed);
    sampler_rng_ = master.fork(100);
    aug_rng_ = master.fork(101);
    noise_rng_ = master.fork(102);
    beta_rng_ = master.fork(103);
  }

  Network& net() { return *net_; }
  Agent* agent() { return agent_.get(); }
  void set_progress(std::ostream* os) { progress_ = os; }
  const Dataset& dataset() const { return ds_; }
  const IdSplit& split() const { return split_; }
  const DataStats& stats() const { return stats_; }
  const RunConfig& config() const { return cfg_; }
  float current_lr() const { return backbone_opt_->lr(); }

  std::vector<ParamStore*> stores() {
    std::vector<ParamStore*> s{&net_->params()};
    if (agent_) s.push_back(&agent_->params());
    return s;
  }

  void save(const std::string& path) {
    std::vector<const ParamStore*> s{&net_->params()};
    if (agent_) s.push_back(&agent_->params());
    save_checkpoint(path, s);
  }

  void load(const std::string& path) { load_checkpoint(path, stores()); }

  StepLog train_step(const Batch& batch) {
    const int B = batch.rgb.dim(0);
    const int G = cfg_.net.G_parts;
    const int K = cfg_.k_imgs;
    const bool mixing = cfg_.scheme != "none";
    ++step_counter_;

    Tensor rgb = preprocess(batch.rgb, true, aug_rng_, stats_, cfg_.pad);
    Tensor ir = preprocess(batch.ir, true, aug_rng_, stats_, cfg_.pad);
    std::vector<int> cls;
    for (int lb : batch.labels) {
      auto it = class_of_.find(lb);
      MID_CHECK(it != class_of_.end(), "batch contains non-train identity " << lb);
      cls.push_back(it->second);
    }

    StepLog log;
    Tensor s_rgb, s_ir, m_exec;
    if (cfg_.scheme == "mam") {
      NoGradGuard ng;
      s_rgb = net_->extract_state(rgb, Modality::rgb, true);
      s_ir = net_->extract_state(ir, Modality::ir, true);
      Tensor m = agent_->actor_forward(s_rgb, s_ir, true, false);
      m_exec = agent_->explore(m, noise_rng_);
    } else if (cfg_.scheme == "fix") {
      m_exec = Tensor::full({B, G}, 0.5f);
    } else if (cfg_.scheme == "beta") {
      // Beta(1,1) = uniform scalar per image, broadcast across regions
      m_exec = Tensor::zeros({B, G});
      for (int b = 0; b < B; ++b) {
        const float u = beta_rng_.uniform();
        for (int g = 0; g < G; ++g) m_exec.data()[size_t(b) * G + g] = u;
      }
    }
    Tensor mixed;
    if (mixing) {
      mixed = mix_regions(rgb, ir, m_exec);
      double sum = 0.0;
      for (int64_t i = 0; i < m_exec.numel(); ++i) sum += m_exec.data()[i];
      log.mean_m = float(sum / double(m_exec.numel()));
    }

    FeatureBundle fb_rgb = net_->forward(rgb, Modality::rgb, true);
    FeatureBundle fb_ir = net_->forward(ir, Modality::ir, true);
    FeatureBundle fb_mix;
    if (mixing) fb_mix = net_->forward(mixed, Modality::mix, true);

    const LossWeights& lw = cfg_.loss;
    std::vector<std::pair<Tensor, float>> terms;
    Tensor l_id_rgb = id_loss_heads(fb_rgb.logits, cls, lw.xi);
    Tensor l_id_ir = id_loss_heads(fb_ir.logits, cls, lw.xi);
    log.l_id_rgb = l_id_rgb.item();
    log.l_id_ir = l_id_ir.item();
    terms.push_back({l_id_rgb, lw.lambda4});
    terms.push_back({l_id_ir, lw.lambda5});
    if (mixing) {
      Tensor l_id_mix = id_loss_heads(fb_mix.logits, cls, lw.xi);
      log.l_id_mix = l_id_mix.item();
      terms.push_back({l_id_mix, lw.lambda6});
    }

    if (cfg_.effective_triplet() == "center") {
      Tensor c_rgb = compute_centers(fb_rgb.retrieval, cls, K);
      Tensor c_ir = compute_centers(fb_ir.retrieval, cls, K);
      Tensor l_ct = center_triplet(c_rgb, c_ir, lw.rho);
      log.l_ct_rgb_ir = l_ct.item();
      terms.push_back({l_ct, lw.lambda1});
      if (mixing) {
        Tensor c_mix = compute_centers(fb_mix.retrieval, cls, K);
        Tensor l_rm = center_triplet(c_rgb, c_mix, lw.rho);
        Tensor l_im = center_triplet(c_ir, c_mix, lw.rho);
        log.l_ct_rgb_mix = l_rm.item();
        log.l_ct_ir_mix = l_im.item();
        terms.push_back({l_rm, lw.lambda2});
        terms.push_back({l_im, lw.lambda3});
      }
    } else {
      std::vector<int> both = cls;
      both.insert(both.end(), cls.begin(), cls.end());
      Tensor l_tri =
          batch_hard_triplet(concat_rows(fb_rgb.retrieval, fb_ir.retrieval), both, lw.rho);
      log.l_ct_rgb_ir = l_tri.item();
      terms.push_back({l_tri, lw.lambda1});
    }

    Tensor l_dcn = weighted_sum(terms);
    log.l_dcn = l_dcn.item();
    MID_CHECK(std::isfinite(log.l_dcn), "non-finite training loss at step " << step_counter_);
    backward(l_dcn);
    backbone_opt_->step();

    if (cfg_.scheme == "mam" && (step_counter_ % cfg_.agent_cadence) == 0) {
      RewardRecord rec;
      {
        NoGradGuard ng;
        FeatureBundle r_rgb = net_->forward(rgb, Modality::rgb, true, false);
        FeatureBundle r_ir = net_->forward(ir, Modality::ir, true, false);
        FeatureBundle r_mix = net_->forward(mixed, Modality::mix, true, false);
        rec = compute_reward(r_rgb.retrieval, r_ir.retrieval, r_mix.retrieval, batch.labels, K);
      }
      Agent::UpdateResult ur =
          agent_->update(s_rgb, s_ir, m_exec, rec.reward, *critic_opt_, *actor_opt_);
      log.reward = float(rec.reward);
      log.l_q = ur.loss_critic;
      log.l_a = ur.loss_actor;
    }
    return log;
  }

  FitResult fit() {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.out_dir);
    std::ofstream train_csv(fs::path(cfg_.out_dir) / "train_log.csv");
    std::ofstream eval_csv(fs::path(cfg_.out_dir) / "eval_log.csv");
    MID_CHECK(train_csv && eval_csv, "cannot create log files in '" << cfg_.out_dir << "'");
    train_csv << "epoch,iter,L_dcn,L_ct_rgb_ir,L_ct_rgb_mix,L_ct_ir_mix,L_id_rgb,L_id_ir,"
                 "L_id_mix,L_A,L_Q,R,mean_m\n";
    eval_csv << "direction,rank1,rank5,rank10,mAP,epoch\n";

    int64_t train_imgs = 0;
    for (int id : split_.train_ids) train_imgs += int64_t(ds_.rgb[size_t(id)].size());
    const int iters = cfg_.iters_per_epoch > 0
                          ? cfg_.iters_per_epoch
                          : std::max(1, int(train_imgs / (int64_t(cfg_.p_ids) * cfg_.k_imgs)));

    FitResult result;
    const fs::path best_path = fs::path(cfg_.out_dir) / "best.ckpt";
    const fs::path last_path = fs::path(cfg_.out_dir) / "last.ckpt";

    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      int passed = 0;
      for (int ms : cfg_.milestones) passed += epoch > ms;
      backbone_opt_->set_lr(cfg_.lr * std::pow(cfg_.lr_gamma, float(passed)));

      double epoch_loss = 0.0;
      for (int it = 1; it <= iters; ++it) {
        Batch batch = pk_sample(ds_, split_.train_ids, cfg_.p_ids, cfg_.k_imgs, sampler_rng_);
        StepLog lg = train_step(batch);
        epoch_loss += lg.l_dcn;
        char row[512];
        std::snprintf(row, sizeof(row), "%d,%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n",
                      epoch, it, double(lg.l_dcn), double(lg.l_ct_rgb_ir), double(lg.l_ct_rgb_mix),
                      double(lg.l_ct_ir_mix), double(lg.l_id_rgb), double(lg.l_id_ir),
                      double(lg.l_id_mix), double(lg.l_a), double(lg.l_q), double(lg.reward),
                      double(lg.mean_m));
        train_csv << row;
      }
      train_csv.flush();

      if (!split_.eval_ids.empty()) {
        auto [a, b] = evaluate_directions(*net_, ds_, split_.eval_ids, stats_);
        char row[256];
        std::snprintf(row, sizeof(row), "%s,%.6g,%.6g,%.6g,%.6g,%d\n", a.direction.c_str(),
                      a.rank1, a.rank5, a.rank10, a.map, epoch);
        eval_csv << row;
        std::snprintf(row, sizeof(row), "%s,%.6g,%.6g,%.6g,%.6g,%d\n", b.direction.c_str(),
                      b.rank1, b.rank5, b.rank10, b.map, epoch);
        eval_csv << row;
        eval_csv.flush();
        const double mean_map = 0.5 * (a.map + b.map);
        result.last_mean_map = mean_map;
        if (mean_map > result.best_mean_map) {
          result.best_mean_map = mean_map;
          result.best_epoch = epoch;
          save(best_path.string());
        }
        if (progress_) {
          char line[256];
          std::snprintf(line, sizeof(line),
                        "epoch %d/%d  loss %.4f  rank1 %.3f/%.3f  mAP %.3f/%.3f  best %.3f@%d\n",
                        epoch, cfg_.epochs, epoch_loss / iters, a.rank1, b.rank1, a.map, b.map,
                        result.best_mean_map, result.best_epoch);
          (*progress_) << line << std::flush;
        }
      } else if (progress_) {
        char line[128];
        std::snprintf(line, sizeof(line), "epoch %d/%d  loss %.4f\n", epoch, cfg_.epochs,
                      epoch_loss / iters);
        (*progress_) << line << std::flush;
      }
    }
    save(last_path.string());
    result.last_ckpt = last_path.string();
    if (result.best_epoch > 0) result.best_ckpt = best_path.string();
    return result;
  }

 private:
  // Mix-bank parameters receive no gradient when nothing is ever mixed; they
  // stay at init and are kept out of the optimizer.
  std::vector<Tensor> backbone_train_params() {
    std::vector<Tensor> out;
    for (const auto& e : net_->params().entries()) {
      if (e.is_buffer) continue;
      if (cfg_.scheme == "none" && e.name.find(".mix") != std::string::npos) continue;
      out.push_back(e.tensor);
    }
    return out;
  }

  void assert_disjoint_optimizers() {
    for (const Tensor& p : backbone_opt_->params())
      for (const auto& list : {agent_->actor_params(), agent_->critic_params()})
        for (const Tensor& q : list)
          MID_CHECK(!p.same_storage(q), "backbone and agent optimizers share a parameter");
    for (const Tensor& p : actor_opt_->params())
      for (const Tensor& q : critic_opt_->params())
        MID_CHECK(!p.same_storage(q), "actor and critic optimizers share a parameter");
  }

  RunConfig cfg_;
  Dataset ds_;
  IdSplit split_;
  DataStats stats_;
  std::map<int, int> class_of_;
  std::unique_ptr<Network> net_;
  std::unique_ptr<Agent> agent_;
  std::unique_ptr<SgdMomentum> backbone_opt_;
  std::unique_ptr<Adam> critic_opt_, actor_opt_;
  Rng sampler_rng_{0}, aug_rng_{0}, noise_rng_{0}, beta_rng_{0};
  std::ostream* progress_ = nullptr;
  int64_t step_counter_ = 0;
};

}  // namespace mid
