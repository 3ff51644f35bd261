#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mid/trainer.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using mid::RunConfig;
using mid::Tensor;
using mid::Trainer;

namespace {

// small end-to-end configuration: tiny images, tiny network, four-image batch
RunConfig tiny_run(const std::string& out_dir) {
  RunConfig c;
  c.ids = 8;
  c.imgs_per_id = 4;
  c.height = 24;
  c.width = 12;
  c.pad = 2;
  c.net.n_blocks = 3;
  c.net.n_d = 2;
  c.net.channels = {4, 6, 8};
  c.net.G_parts = 3;
  c.net.feature_dim = 5;
  c.net.K_bases = 2;
  c.net.input_h = c.height;
  c.net.input_w = c.width;
  c.lr = 0.05f;
  c.epochs = 2;
  c.p_ids = 2;
  c.k_imgs = 2;
  c.iters_per_epoch = 2;
  c.eval_fraction = 0.25f;
  c.seed = 5;
  c.out_dir = out_dir;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::path("trainer_tmp") / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same_steplog(const mid::StepLog& a, const mid::StepLog& b) {
  return a.l_dcn == b.l_dcn && a.l_ct_rgb_ir == b.l_ct_rgb_ir &&
         a.l_ct_rgb_mix == b.l_ct_rgb_mix && a.l_ct_ir_mix == b.l_ct_ir_mix &&
         a.l_id_rgb == b.l_id_rgb && a.l_id_ir == b.l_id_ir && a.l_id_mix == b.l_id_mix &&
         a.l_a == b.l_a && a.l_q == b.l_q && a.reward == b.reward && a.mean_m == b.mean_m;
}

}  // namespace

TEST_CASE("config file parsing") {
  fs::path dir = fresh_dir("cfg");
  {
    std::ofstream out(dir / "run.cfg");
    out << "# experiment settings\n"
        << "[data]\n"
        << "ids = 10\n"
        << "height = 48\n"
        << "width = 24\n"
        << "difficulty = hard\n"
        << "\n"
        << "[network]\n"
        << "n_blocks = 3\n"
        << "n_d = 1\n"
        << "channels = 4, 6, 8\n"
        << "g_parts = 3\n"
        << "[loss]\n"
        << "lambda6 = 0.2\n"
        << "[optim]\n"
        << "lr = 0.2   # inline comment\n"
        << "milestones = 5, 9\n"
        << "gamma = 0.5\n"
        << "[train]\n"
        << "epochs = 7\n"
        << "seed = 42\n";
  }
  RunConfig c = mid::parse_config((dir / "run.cfg").string());
  CHECK(c.ids == 10);
  CHECK(c.height == 48);
  CHECK(c.difficulty == "hard");
  CHECK(c.net.n_blocks == 3);
  CHECK(c.net.channels == std::vector<int>{4, 6, 8});
  CHECK(c.net.input_h == 48);  // network geometry follows the data section
  CHECK(c.net.input_w == 24);
  CHECK(c.loss.lambda6 == 0.2f);
  CHECK(c.lr == 0.2f);
  CHECK(c.milestones == std::vector<int>{5, 9});
  CHECK(c.lr_gamma == 0.5f);
  CHECK(c.epochs == 7);
  CHECK(c.seed == 42);
  // untouched keys keep their defaults
  CHECK(c.scheme == "mam");
  CHECK(c.momentum == 0.9f);

  {
    std::ofstream out(dir / "bad_key.cfg");
    out << "[network]\nblocks = 3\n";
  }
  CHECK_THROWS_AS(mid::parse_config((dir / "bad_key.cfg").string()), mid::ConfigError);
  {
    std::ofstream out(dir / "bad_val.cfg");
    out << "[data]\nids = many\n";
  }
  CHECK_THROWS_AS(mid::parse_config((dir / "bad_val.cfg").string()), mid::ConfigError);
  {
    std::ofstream out(dir / "bad_line.cfg");
    out << "[data]\nids\n";
  }
  CHECK_THROWS_AS(mid::parse_config((dir / "bad_line.cfg").string()), mid::ConfigError);
  CHECK_THROWS_AS(mid::parse_config((dir / "absent.cfg").string()), mid::ConfigError);
}

TEST_CASE("triplet variant selection") {
  RunConfig c;
  c.scheme = "none";
  c.net.n_d = 0;
  CHECK(c.effective_triplet() == "batchhard");  // fully stripped baseline
  c.scheme = "mam";
  CHECK(c.effective_triplet() == "center");
  c.scheme = "none";
  c.net.n_d = 3;
  CHECK(c.effective_triplet() == "center");
  c.triplet = "batchhard";
  c.scheme = "mam";
  CHECK(c.effective_triplet() == "batchhard");  // explicit choice wins
  c.triplet = "center";
  c.scheme = "none";
  c.net.n_d = 0;
  CHECK(c.effective_triplet() == "center");
}

TEST_CASE("learning rate schedule steps at milestones") {
  RunConfig c = tiny_run(fresh_dir("lr").string());
  c.milestones = {1};
  c.lr_gamma = 0.1f;
  c.epochs = 2;
  Trainer t(c);
  CHECK(t.current_lr() == 0.05f);
  t.fit();
  // the final epoch ran past the milestone
  CHECK(t.current_lr() == Catch::Approx(0.005f).margin(1e-9));
}

TEST_CASE("mixing disabled drops the agent and freezes mix banks") {
  RunConfig c = tiny_run(fresh_dir("none_a").string());
  c.scheme = "none";
  c.epochs = 1;
  Trainer t(c);
  CHECK(t.agent() == nullptr);
  mid::FitResult r = t.fit();

  // checkpoint carries no agent parameters
  const std::string bytes = slurp(r.last_ckpt);
  CHECK(bytes.find("agent.") == std::string::npos);
  CHECK(bytes.find("backbone.") != std::string::npos);

  // mix-bank weights never moved while shared banks did
  RunConfig c2 = tiny_run(fresh_dir("none_b").string());
  c2.scheme = "none";
  c2.epochs = 0;
  Trainer fresh(c2);
  mid::ParamStore& trained = t.net().params();
  mid::ParamStore& init = fresh.net().params();
  int mix_seen = 0, moved = 0;
  for (const auto& e : trained.entries()) {
    if (e.is_buffer) continue;
    const Tensor& other = init.get(e.name);
    bool equal = true;
    for (int64_t i = 0; i < e.tensor.numel(); ++i)
      equal &= e.tensor.data()[i] == other.data()[i];
    if (e.name.find(".mix") != std::string::npos) {
      ++mix_seen;
      CHECK(equal);
    } else {
      moved += !equal;
    }
  }
  CHECK(mix_seen > 0);
  CHECK(moved > 0);
}

TEST_CASE("mixing scheme reflected in the step log") {
  RunConfig c = tiny_run(fresh_dir("steplog").string());
  c.scheme = "none";
  Trainer t(c);
  mid::Rng rng(77);
  mid::Batch b = pk_sample(t.dataset(), t.split().train_ids, c.p_ids, c.k_imgs, rng);
  mid::StepLog lg = t.train_step(b);
  CHECK(lg.l_a == 0.0f);
  CHECK(lg.l_q == 0.0f);
  CHECK(lg.reward == 0.0f);
  CHECK(lg.mean_m == 0.0f);
  CHECK(lg.l_id_mix == 0.0f);
  CHECK(lg.l_dcn > 0.0f);
}

TEST_CASE("identical seeds give identical steps") {
  RunConfig ca = tiny_run(fresh_dir("det_a").string());
  RunConfig cb = tiny_run(fresh_dir("det_b").string());
  Trainer ta(ca), tb(cb);
  mid::Rng rng(31);
  for (int i = 0; i < 3; ++i) {
    mid::Batch b = pk_sample(ta.dataset(), ta.split().train_ids, ca.p_ids, ca.k_imgs, rng);
    mid::StepLog la = ta.train_step(b);
    mid::StepLog lb = tb.train_step(b);
    REQUIRE(same_steplog(la, lb));
  }
}

TEST_CASE("full runs are byte-reproducible") {
  RunConfig ca = tiny_run(fresh_dir("rep_a").string());
  RunConfig cb = tiny_run(fresh_dir("rep_b").string());
  mid::FitResult ra = Trainer(ca).fit();
  mid::FitResult rb = Trainer(cb).fit();
  CHECK(slurp(ra.last_ckpt) == slurp(rb.last_ckpt));
  CHECK(slurp(fs::path(ca.out_dir) / "train_log.csv") ==
        slurp(fs::path(cb.out_dir) / "train_log.csv"));
  CHECK(slurp(fs::path(ca.out_dir) / "eval_log.csv") ==
        slurp(fs::path(cb.out_dir) / "eval_log.csv"));
}

TEST_CASE("zero epochs writes headers and a checkpoint only") {
  RunConfig c = tiny_run(fresh_dir("zero").string());
  c.epochs = 0;
  mid::FitResult r = Trainer(c).fit();
  CHECK(r.best_epoch == -1);
  CHECK(r.best_ckpt.empty());
  CHECK(fs::exists(r.last_ckpt));
  auto train_rows = read_csv(fs::path(c.out_dir) / "train_log.csv");
  auto eval_rows = read_csv(fs::path(c.out_dir) / "eval_log.csv");
  REQUIRE(train_rows.size() == 1);
  REQUIRE(eval_rows.size() == 1);
  CHECK(train_rows[0][0] == "epoch");
  CHECK(eval_rows[0][0] == "direction");
}

TEST_CASE("training loss and log structure over several epochs") {
  RunConfig c = tiny_run(fresh_dir("curve").string());
  c.epochs = 4;
  c.iters_per_epoch = 3;
  mid::FitResult r = Trainer(c).fit();
  CHECK(r.best_epoch >= 1);
  CHECK(fs::exists(r.best_ckpt));
  CHECK(r.best_mean_map >= 0.0);
  CHECK(r.best_mean_map <= 1.0);
  CHECK(r.best_mean_map >= r.last_mean_map - 1e-12);

  auto rows = read_csv(fs::path(c.out_dir) / "train_log.csv");
  REQUIRE(rows.size() == size_t(1 + 4 * 3));
  REQUIRE(rows[0].size() == 13);
  double first_epoch = 0.0, last_epoch = 0.0;
  for (size_t i = 1; i < rows.size(); ++i) {
    const int epoch = std::stoi(rows[i][0]);
    const double l = std::stod(rows[i][2]);
    if (epoch == 1) first_epoch += l;
    if (epoch == 4) last_epoch += l;
  }
  // mean total loss must come down on this easy synthetic set
  CHECK(last_epoch / 3.0 < first_epoch / 3.0);

  auto eval_rows = read_csv(fs::path(c.out_dir) / "eval_log.csv");
  REQUIRE(eval_rows.size() == size_t(1 + 4 * 2));
  CHECK(eval_rows[1][0] == "rgb_to_ir");
  CHECK(eval_rows[2][0] == "ir_to_rgb");
}

TEST_CASE("checkpoint restores evaluation behaviour exactly") {
  RunConfig ca = tiny_run(fresh_dir("ckpt_a").string());
  ca.epochs = 1;
  Trainer ta(ca);
  mid::FitResult r = ta.fit();

  RunConfig cb = tiny_run(fresh_dir("ckpt_b").string());
  cb.epochs = 1;
  Trainer tb(cb);
  tb.load(r.last_ckpt);

  mid::EvalFeatures fa =
      mid::extract_eval_features(ta.net(), ta.dataset(), ta.split().eval_ids, ta.stats());
  mid::EvalFeatures fb =
      mid::extract_eval_features(tb.net(), tb.dataset(), tb.split().eval_ids, tb.stats());
  REQUIRE(fa.rgb.shape() == fb.rgb.shape());
  for (int64_t i = 0; i < fa.rgb.numel(); ++i) REQUIRE(fa.rgb.data()[i] == fb.rgb.data()[i]);
  for (int64_t i = 0; i < fa.ir.numel(); ++i) REQUIRE(fa.ir.data()[i] == fb.ir.data()[i]);
}

TEST_CASE("trainer constructor validation") {
  RunConfig c = tiny_run(fresh_dir("ctor").string());
  c.p_ids = 7;  // 8 ids minus 2 eval leaves 6 train identities
  CHECK_THROWS_AS(Trainer(c), mid::Error);

  RunConfig d = tiny_run(fresh_dir("ctor2").string());
  d.source = "directory";
  d.root = "does_not_exist_anywhere";
  CHECK_THROWS_AS(Trainer(d), mid::Error);
}

TEST_CASE("batches must come from the train split") {
  RunConfig c = tiny_run(fresh_dir("foreign").string());
  Trainer t(c);
  REQUIRE_FALSE(t.split().eval_ids.empty());
  const int eval_id = t.split().eval_ids[0];
  mid::Batch b;
  b.rgb = Tensor::full({2, 3, 24, 12}, 0.5f);
  b.ir = Tensor::full({2, 3, 24, 12}, 0.5f);
  b.labels = {eval_id, eval_id};
  CHECK_THROWS_AS(t.train_step(b), mid::Error);
}
