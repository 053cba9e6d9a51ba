#ifndef CAMH_TRAINING_HPP_
#define CAMH_TRAINING_HPP_

#include <optional>
#include <string>
#include <vector>

#include "camh/datasets.hpp"
#include "camh/models.hpp"
#include "camh/noise.hpp"

namespace camh {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  enum class Opt { sgd, sgd_momentum } optimizer = Opt::sgd_momentum;
  double momentum = 0.9;
  double lr = 0.05;
  enum class LrSchedule { constant, step_decay } lr_schedule = LrSchedule::constant;
  std::vector<int> lr_milestones;  // epochs at which lr *= lr_gamma
  double lr_gamma = 0.1;
  double dropout_rate = 0.0;
  double grad_clip_norm = 5.0;     // global L2 clip per step; 0 disables
  int inner_steps_per_outer = 1;   // k: one inner step every k-th outer step
  int noise_refresh_period = 5;    // r: epochs between noise refreshes
  double hijack_fraction = 1.0;
  uint64_t seed = 0;
  std::string arch = "smallcnn";
  NoiseOptConfig noise;            // refresh budget
  int noise_init_steps = 50;       // short budget for the epoch-0 init
  bool use_sol = true;
  bool use_noise = true;
  bool inner_enabled = true;       // false reduces the dual loop to benign training
  int64_t history_eval_cap = 2000; // per-epoch history accuracy subset
  // loss is cross-entropy on logits for both tasks

  void validate() const {
    CAMH_CHECK_ARG(epochs >= 1, "TrainConfig: epochs must be >= 1");
    CAMH_CHECK_ARG(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    CAMH_CHECK_ARG(lr > 0.0, "TrainConfig: lr must be > 0");
    CAMH_CHECK_ARG(inner_steps_per_outer >= 1, "TrainConfig: inner_steps_per_outer must be >= 1");
    CAMH_CHECK_ARG(noise_refresh_period >= 1, "TrainConfig: noise_refresh_period must be >= 1");
    CAMH_CHECK_ARG(hijack_fraction > 0.0 && hijack_fraction <= 1.0,
                   "TrainConfig: hijack_fraction must be in (0,1]");
    CAMH_CHECK_ARG(dropout_rate >= 0.0 && dropout_rate < 1.0,
                   "TrainConfig: dropout_rate must be in [0,1)");
  }
};

enum class HijackMode { none, sol, fold };

struct EpochStats {
  double loss_orig = 0.0;
  double loss_hijack = 0.0;
  double acc_orig = 0.0;
  double acc_hijack = 0.0;
};

struct TrainedBundle {
  ClassifierModel model;
  std::optional<HijackArtifact> artifact;  // present iff hijack training was enabled
  HijackMode mode = HijackMode::none;
  std::vector<EpochStats> history;         // one entry per epoch
  std::string run_id;
};

// Standard supervised training on one task.
TrainedBundle train_benign(const DatasetHandle& data, const TrainConfig& cfg,
                           const std::string& data_root = "");

// CAMH dual-loop: outer steps train theta on the original task; every k-th
// outer step an inner step trains (theta, theta_hat) on noised hijack data;
// delta is optimized before epoch 0 and refreshed every r epochs.
TrainedBundle dual_loop_train(const DatasetHandle& orig, const DatasetHandle& hijack,
                              const TrainConfig& cfg, const std::string& data_root = "");

// epoch, loss_orig, loss_hijack, acc_orig, acc_hijack
void write_history_csv(const TrainedBundle& bundle, const std::string& path);

// Hijack-task predictions for a bundle: SOL mode applies the private layer,
// fold mode compares C1 predictions against labels mod C1.
double hijack_accuracy(const ClassifierModel& model, const HijackArtifact& artifact,
                       HijackMode mode, const InMemoryDataset& hijack_test);

}  // namespace camh

#endif
