#ifndef CAMH_EXPERIMENTS_HPP_
#define CAMH_EXPERIMENTS_HPP_

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "camh/evaluation.hpp"
#include "camh/training.hpp"

namespace camh {

// One side of a dataset pair as written in config files.
struct TaskRef {
  std::string source;            // mnist|svhn|gtsrb|cifar10|cifar100|cifarm|synthetic
  int cifarm_m = 20;             // for source == cifarm
  uint64_t cifarm_seed = 7;
  // synthetic parameters
  int num_classes = 2;
  Shape3 shape{1, 16, 16};
  int64_t train_count = 1024;
  int64_t test_count = 256;
  uint64_t gen_seed = 0;

  DatasetHandle resolve() const;
};

struct ExperimentConfig {
  std::string name = "experiment";
  enum class Profile { desk, full } profile = Profile::desk;
  std::vector<std::pair<TaskRef, TaskRef>> pairs;  // (original, hijack)
  std::vector<std::string> archs{"smallcnn"};
  std::vector<uint64_t> seeds{1};
  TrainConfig train;  // base; profile defaults + file overrides applied
  enum class SweepAxis { none, cifarm_m, hijack_fraction } sweep_axis = SweepAxis::none;
  std::vector<double> sweep_values;
  bool ablation = false;  // full 4-row {noise, sol} grid
  std::string output_dir = "./runs";
  ErDenominator er_denominator = ErDenominator::benign_hijack;
  // desk-profile caps applied to both sides (0 = no cap)
  int64_t cap_train_orig = 0, cap_train_hijack = 0, cap_test = 0;
  std::string data_root;

  void validate() const;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_digest(const ExperimentConfig& cfg);

struct RunResult {
  std::vector<EvalReport> reports;
  // sweep key (m or fraction) per report, aligned with `reports`
  std::vector<double> keys;
  // volume sweep only: Spearman rank correlation of ER vs fraction
  std::optional<double> er_trend_spearman;
};

// Train-benign/train-attack/evaluate every (pair, arch, seed) cell. Rows are
// written incrementally to output_dir/<name>/reports.csv and a manifest
// records durably completed cells; with resume=true completed cells are
// skipped and their rows are loaded back.
RunResult run_grid(const ExperimentConfig& config, bool resume = false);

// Both CIFARm directions per m value (original=CIFARm/hijack fixed, and
// swapped); emits an ER-vs-m table.
RunResult run_category_sweep(const ExperimentConfig& config, bool resume = false);

// ER-vs-hijack-fraction with a monotone-trend statistic.
RunResult run_volume_sweep(const ExperimentConfig& config, bool resume = false);

// Four rows per (arch, seed): {noise x sol} in Table-1 order
// (off/off, on/off, off/on, on/on).
RunResult run_ablation(const ExperimentConfig& config, bool resume = false);

// SVG charts (bars for plain grids, lines for sweeps) with the source data
// CSV beside each figure; figures are pure functions of their CSV.
void emit_figures(const RunResult& result, const std::string& dir,
                  const std::string& stem);
std::string render_report_bars_svg(const std::vector<std::vector<std::string>>& csv_rows);
std::string render_sweep_lines_svg(const std::vector<std::vector<std::string>>& csv_rows);

double spearman_correlation(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace camh

#endif
