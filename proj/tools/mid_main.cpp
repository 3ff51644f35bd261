// Command line front end: dataset generation, training, checkpoint
// evaluation, and log-curve export. Exit codes: 0 success, 1 runtime
// failure, 2 bad configuration or arguments.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mid/config.hpp"
#include "mid/data.hpp"
#include "mid/trainer.hpp"

namespace {

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  MID_CHECK(in, "cannot open log file '" << path << "'");
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (first) {
      t.columns = cells;
      first = false;
    } else {
      MID_CHECK(cells.size() == t.columns.size(),
                "ragged csv row in '" << path << "': " << line);
      t.rows.push_back(cells);
    }
  }
  MID_CHECK(!t.columns.empty(), "log file '" << path << "' has no header");
  return t;
}

bool is_numeric_column(const std::string& name) {
  return name != "direction" && name != "epoch" && name != "iter";
}

void write_svg_curve(const std::string& path, const std::string& title,
                     const std::vector<double>& ys) {
  const int W = 640, H = 360, M = 40;
  double lo = ys[0], hi = ys[0];
  for (double y : ys) {
    lo = std::min(lo, y);
    hi = std::max(hi, y);
  }
  if (hi - lo < 1e-12) {
    hi += 0.5;
    lo -= 0.5;
  }
  std::ofstream out(path);
  MID_CHECK(out, "cannot write '" << path << "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
      << "</text>\n"
      << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M
      << "\" stroke=\"black\"/>\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", hi);
  out << "<text x=\"" << M - 4 << "\" y=\"" << M + 4
      << "\" text-anchor=\"end\" font-size=\"10\">" << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.4g", lo);
  out << "<text x=\"" << M - 4 << "\" y=\"" << H - M
      << "\" text-anchor=\"end\" font-size=\"10\">" << buf << "</text>\n";
  out << "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"";
  const size_t n = ys.size();
  for (size_t i = 0; i < n; ++i) {
    const double x = M + (n == 1 ? 0.5 : double(i) / double(n - 1)) * (W - 2 * M);
    const double y = (H - M) - (ys[i] - lo) / (hi - lo) * (H - 2 * M);
    out << x << "," << y << " ";
  }
  out << "\"/>\n</svg>\n";
}

int run_gen_data(const std::string& out, int ids, int imgs, int height, int width, uint64_t seed,
                 const std::string& difficulty) {
  mid::Dataset ds = mid::generate_synthetic_dataset(
      ids, imgs, height, width, seed,
      difficulty == "easy" ? mid::Difficulty::easy : mid::Difficulty::hard);
  mid::export_dataset(ds, out);
  std::cout << "wrote " << ids << " identities x " << imgs << " images per modality to " << out
            << "\n";
  return 0;
}

int run_train(const std::string& config_path) {
  mid::RunConfig cfg = mid::parse_config(config_path);
  mid::Trainer trainer(cfg);
  const auto pr = trainer.net().param_report();
  std::cout << "identities: " << trainer.dataset().num_ids << " ("
            << trainer.split().train_ids.size() << " train / " << trainer.split().eval_ids.size()
            << " eval), scheme " << cfg.scheme << ", triplet " << cfg.effective_triplet()
            << "\nbackbone values: " << pr.total << " (decomposed layers hold "
            << pr.decomposed_conv << ", full-rank equivalent " << pr.full_conv_equivalent << ")\n";
  trainer.set_progress(&std::cout);
  mid::FitResult res = trainer.fit();
  if (res.best_epoch > 0)
    std::cout << "best mean mAP " << res.best_mean_map << " at epoch " << res.best_epoch << " -> "
              << res.best_ckpt << "\n";
  std::cout << "final checkpoint -> " << res.last_ckpt << "\n";
  return 0;
}

int run_eval(const std::string& config_path, const std::string& ckpt) {
  namespace fs = std::filesystem;
  mid::RunConfig cfg = mid::parse_config(config_path);
  mid::Trainer trainer(cfg);
  trainer.load(ckpt);
  auto [a, b] = mid::evaluate_directions(trainer.net(), trainer.dataset(),
                                         trainer.split().eval_ids, trainer.stats());
  fs::create_directories(cfg.out_dir);
  std::ofstream report(fs::path(cfg.out_dir) / "eval_report.csv");
  MID_CHECK(report, "cannot write eval report in '" << cfg.out_dir << "'");
  report << "direction,rank1,rank5,rank10,mAP,epoch\n";
  for (const mid::RetrievalReport& r : {a, b}) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-9s rank1 %.4f  rank5 %.4f  rank10 %.4f  mAP %.4f\n",
                  r.direction.c_str(), r.rank1, r.rank5, r.rank10, r.map);
    std::cout << line;
    std::snprintf(line, sizeof(line), "%s,%.6g,%.6g,%.6g,%.6g,0\n", r.direction.c_str(), r.rank1,
                  r.rank5, r.rank10, r.map);
    report << line;
  }
  return 0;
}

int run_export_curves(const std::string& log_path, const std::string& out_dir,
                      const std::string& metric) {
  namespace fs = std::filesystem;
  CsvTable t = read_csv(log_path);
  fs::create_directories(out_dir);
  const bool by_direction =
      std::find(t.columns.begin(), t.columns.end(), "direction") != t.columns.end();
  const size_t dir_col =
      by_direction
          ? size_t(std::find(t.columns.begin(), t.columns.end(), "direction") - t.columns.begin())
          : 0;

  int emitted = 0;
  for (size_t c = 0; c < t.columns.size(); ++c) {
    const std::string& name = t.columns[c];
    if (!is_numeric_column(name)) continue;
    if (!metric.empty() && name != metric) continue;
    // one series per direction for eval logs, a single series otherwise
    std::map<std::string, std::vector<double>> series;
    for (const auto& row : t.rows) {
      const std::string key = by_direction ? row[dir_col] : std::string("all");
      series[key].push_back(std::stod(row[c]));
    }
    for (const auto& [key, ys] : series) {
      if (ys.empty()) continue;
      const std::string stem = by_direction ? name + "_" + key : name;
      std::ofstream csv(fs::path(out_dir) / (stem + ".csv"));
      MID_CHECK(csv, "cannot write curve csv for " << stem);
      csv << "step," << name << "\n";
      for (size_t i = 0; i < ys.size(); ++i) csv << i + 1 << "," << ys[i] << "\n";
      write_svg_curve((fs::path(out_dir) / (stem + ".svg")).string(), stem, ys);
      ++emitted;
    }
  }
  MID_CHECK(emitted > 0, "no matching metric column"
                             << (metric.empty() ? "" : " '" + metric + "'") << " in '" << log_path
                             << "'");
  std::cout << "exported " << emitted << " curve(s) to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modality re-identification trainer"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
  std::string gen_out = "data_out";
  int gen_ids = 16, gen_imgs = 8, gen_h = 72, gen_w = 36;
  uint64_t gen_seed = 1;
  std::string gen_diff = "easy";
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--ids", gen_ids, "number of identities");
  gen->add_option("--imgs", gen_imgs, "images per identity per modality");
  gen->add_option("--height", gen_h, "image height");
  gen->add_option("--width", gen_w, "image width");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--difficulty", gen_diff, "easy or hard")
      ->check(CLI::IsMember({"easy", "hard"}));

  auto* train = app.add_subcommand("train", "train a model from a config file");
  std::string train_cfg;
  train->add_option("--config", train_cfg, "config file path")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
  std::string eval_cfg, eval_ckpt;
  eval->add_option("--config", eval_cfg, "config file path")->required();
  eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();

  auto* curves = app.add_subcommand("export-curves", "emit per-metric csv + svg from a log");
  std::string cur_log, cur_out = "curves", cur_metric;
  curves->add_option("--log", cur_log, "train_log.csv or eval_log.csv")->required();
  curves->add_option("--out", cur_out, "output directory");
  curves->add_option("--metric", cur_metric, "restrict to one metric column");

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      return run_gen_data(gen_out, gen_ids, gen_imgs, gen_h, gen_w, gen_seed, gen_diff);
    if (train->parsed()) return run_train(train_cfg);
    if (eval->parsed()) return run_eval(eval_cfg, eval_ckpt);
    if (curves->parsed()) return run_export_curves(cur_log, cur_out, cur_metric);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help/version exit clean, bad arguments are config errors
  } catch (const mid::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mid::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
