#ifndef CAMH_MODELS_HPP_
#define CAMH_MODELS_HPP_

#include <memory>
#include <string>
#include <vector>

#include "camh/datasets.hpp"
#include "camh/nn.hpp"
#include "camh/noise.hpp"

namespace camh {

// Private affine map from C1 original-task logits to C2 hijack-class scores.
// A single fully connected layer: z = logits * W + b, W of shape (C1, C2).
// Never applied on original-task evaluation paths.
struct SyncOptLayer {
  Tensor weight;   // (C1, C2)
  Tensor bias;     // (C2)
  Tensor dweight;
  Tensor dbias;
  int in_dim = 0;
  int out_dim = 0;

  static SyncOptLayer init(int c1, int c2, uint64_t seed);
  // Fixed (untrainable by convention) projection z_j = y_{j mod C1}; used by
  // the no-SOL ablation arm.
  static SyncOptLayer fold(int c1, int c2);

  std::vector<nn::ParamRef> params();
  void zero_grads();
};

Tensor sol_forward(const SyncOptLayer& sol, const Tensor& logits);
// Accumulates dweight/dbias, returns dlogits.
Tensor sol_backward(SyncOptLayer& sol, const Tensor& logits, const Tensor& dz);

// The victim classifier f. Mutable while training (single writer); in
// evaluation mode it is immutable and safe for concurrent readers.
class ClassifierModel {
 public:
  ClassifierModel() = default;

  static ClassifierModel build(const std::string& architecture_id, const TaskSpec& spec,
                               float dropout_rate, uint64_t init_seed);

  Tensor forward_logits(const Tensor& images, nn::Mode mode);
  // Pure evaluation path.
  Tensor forward_logits(const Tensor& images) const;
  Tensor backward(const Tensor& dlogits);

  std::vector<nn::ParamRef> params();
  std::vector<nn::ParamRef> buffers();  // batchnorm running stats
  void zero_grads();

  const std::string& architecture_id() const { return architecture_id_; }
  const TaskSpec& spec() const { return spec_; }
  float dropout_rate() const { return dropout_rate_; }
  uint64_t init_seed() const { return init_seed_; }
  bool valid() const { return net_ != nullptr; }

  void save(const std::string& path) const;
  static ClassifierModel load(const std::string& path);

 private:
  std::string architecture_id_;
  TaskSpec spec_;
  float dropout_rate_ = 0.0f;
  uint64_t init_seed_ = 0;
  std::unique_ptr<nn::Sequential> net_;
};

// Exactly sol_forward(sol, model.forward_logits(images)).
Tensor composed_forward(const ClassifierModel& model, const SyncOptLayer& sol,
                        const Tensor& images);

// Class predictions (argmax, ties to the lowest index) for a batch of logits.
std::vector<int> predict_classes(const Tensor& logits);

// The adversary's private bundle: SOL weights, the universal noise, task
// identities and provenance. Ships separately from the released model.
struct HijackArtifact {
  SyncOptLayer sol;
  NoisePattern noise;
  TaskSpec original_spec;
  TaskSpec hijack_spec;
  std::string run_id;
  uint64_t seed = 0;
  std::string config_hash;
  bool sol_trained = true;    // false: fold-projection ablation artifact
  bool noise_trained = true;  // false: delta fixed at zero

  void validate() const;
};

void save_artifact(const HijackArtifact& artifact, const std::string& path);
HijackArtifact load_artifact(const std::string& path);

}  // namespace camh

#endif
