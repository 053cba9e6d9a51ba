#ifndef CAMH_NOISE_HPP_
#define CAMH_NOISE_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "camh/tensor.hpp"

namespace camh {

class ClassifierModel;
struct SyncOptLayer;
struct InMemoryDataset;
struct DatasetHandle;

// Universal additive perturbation applied to every hijack input.
// Outputs of apply_noise are always clamped to [0, 1].
struct NoisePattern {
  Tensor delta;             // (C, H, W)
  float linf_bound = 0.0f;  // <= 0 means unbounded (clamp-only policy)

  void validate() const {
    CAMH_CHECK_ARG(delta.ndim() == 3, "NoisePattern: delta must be (C,H,W)");
  }
};

// out = clamp(images + delta, 0, 1), delta broadcast over the batch.
Tensor apply_noise(const Tensor& images, const NoisePattern& noise);

struct NoiseStats {
  double linf = 0.0;
  double l2 = 0.0;
  double mean = 0.0;
};
NoiseStats noise_stats(const NoisePattern& noise);

struct NoiseOptConfig {
  int steps = 200;
  double step_size = 0.05;
  double balance_weight = 1.0;  // weight of the original-task objective term
  // paired: the held probe pairs an original batch with the hijack batches
  // and the trace logs both objective terms; hijack_only logs the second
  // term alone. Either way the first term is constant in delta.
  enum class Pairing { paired, hijack_only } pairing = Pairing::paired;
  bool sign_grad = false;
  uint64_t seed = 0;
  int batch_size = 64;
  int probe_batches = 2;  // held batches for the objective trace
  float linf_bound = 0.0f;

  void validate() const {
    CAMH_CHECK_ARG(steps >= 1, "NoiseOptConfig: steps must be >= 1");
    CAMH_CHECK_ARG(step_size >= 0.0, "NoiseOptConfig: step_size must be >= 0");
    CAMH_CHECK_ARG(balance_weight > 0.0, "NoiseOptConfig: balance_weight must be > 0");
    CAMH_CHECK_ARG(batch_size >= 1, "NoiseOptConfig: batch_size must be >= 1");
  }
};

struct NoiseOptResult {
  NoisePattern noise;
  std::vector<double> objective_trace;  // held-probe objective per step (incl. step 0)
  double initial_objective = 0.0;
  double final_objective = 0.0;
};

// Gradient descent on delta for the two-term objective
//   balance_weight * L(D_M, f) + L(D_H (+) delta, h o f).
// The first term is constant in delta and is only evaluated for the trace.
// Model and SOL parameters are left untouched; delta is the only variable.
// Returns the best-seen delta by held-probe objective, so the final recorded
// objective never exceeds the initial one.
NoiseOptResult optimize_noise(ClassifierModel& model, const SyncOptLayer& sol,
                              const InMemoryDataset& dm, const InMemoryDataset& dh,
                              const NoiseOptConfig& cfg);

// Spec-surface overload resolving dataset handles against the data root.
NoiseOptResult optimize_noise(ClassifierModel& model, const SyncOptLayer& sol,
                              const DatasetHandle& dm, const DatasetHandle& dh,
                              const NoiseOptConfig& cfg, const std::string& data_root);

// delta gradient of the objective at the given delta over one fixed batch
// set; exposed for the finite-difference oracle and the dual-loop inner step.
Tensor noise_objective_grad(ClassifierModel& model, const SyncOptLayer* sol,
                            const Tensor& hijack_images, const std::vector<int>& hijack_labels,
                            const NoisePattern& noise, double* out_objective);

}  // namespace camh

#endif
