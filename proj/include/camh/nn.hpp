#ifndef CAMH_NN_HPP_
#define CAMH_NN_HPP_

#include <memory>
#include <string>
#include <vector>

#include "camh/rng.hpp"
#include "camh/tensor.hpp"

namespace camh::nn {

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

// kTrain: full training semantics (dropout active, batchnorm batch stats).
// kEval: pure inference; no member state is written, safe for concurrent use.
// kFrozenGrad: inference semantics (dropout off, batchnorm running stats) but
// caches are kept so backward can propagate gradients to the input. Used by
// the noise optimizer against a frozen model.
enum class Mode { kTrain, kEval, kFrozenGrad };

// Training is single-writer: forward(kTrain/kFrozenGrad) caches what backward
// needs inside the layer. forward(kEval) touches no member state, so an
// evaluation-mode model is safe for concurrent readers.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {}
  // Non-trainable state that still belongs in checkpoints (BN running stats).
  virtual void collect_buffers(const std::string& prefix, std::vector<ParamRef>& out) {}
  virtual void zero_grads() {}
};

class Conv2d : public Layer {
 public:
  Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void zero_grads() override;

 private:
  int in_ch_, out_ch_, k_, stride_, pad_;
  Tensor weight_, bias_, dweight_, dbias_;  // weight: (OC, IC*K*K)
  Tensor cached_in_;
};

class Dense : public Layer {
 public:
  Dense(int in_dim, int out_dim, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void zero_grads() override;

 private:
  int in_dim_, out_dim_;
  Tensor weight_, bias_, dweight_, dbias_;  // weight: (OUT, IN)
  Tensor cached_in_;
};

class Relu : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor cached_out_;
};

class MaxPool2d : public Layer {
 public:
  MaxPool2d(int ksize, int stride) : k_(ksize), stride_(stride) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int k_, stride_;
  std::vector<int64_t> in_shape_;
  std::vector<int32_t> argmax_;
};

class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  std::vector<int64_t> in_shape_;
};

class Flatten : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  std::vector<int64_t> in_shape_;
};

class Dropout : public Layer {
 public:
  Dropout(float rate, uint64_t seed) : rate_(rate), rng_(seed) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;

 private:
  float rate_;
  Rng rng_;
  Tensor mask_;
  bool active_ = false;
};

class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(int channels, float eps = 1e-5f, float momentum = 0.1f);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<ParamRef>& out) override;
  void zero_grads() override;

 private:
  int ch_;
  float eps_, momentum_;
  Tensor gamma_, beta_, dgamma_, dbeta_;
  Tensor running_mean_, running_var_;  // saved/restored with the parameters
  Tensor cached_xhat_;
  std::vector<double> cached_invstd_;
  Mode cached_mode_ = Mode::kEval;
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  void add(std::string name, std::unique_ptr<Layer> layer) {
    names_.push_back(std::move(name));
    layers_.push_back(std::move(layer));
  }
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<ParamRef>& out) override;
  void zero_grads() override;
  size_t size() const { return layers_.size(); }

 private:
  std::vector<std::string> names_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

// y = relu(main(x) + shortcut(x)); empty shortcut = identity.
class Residual : public Layer {
 public:
  Residual(std::unique_ptr<Sequential> main, std::unique_ptr<Sequential> shortcut)
      : main_(std::move(main)), shortcut_(std::move(shortcut)) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<ParamRef>& out) override;
  void zero_grads() override;

 private:
  std::unique_ptr<Sequential> main_;
  std::unique_ptr<Sequential> shortcut_;  // may be null
  Tensor cached_sum_;
};

struct LossResult {
  double loss;
  Tensor dlogits;  // d(mean CE)/dlogits, shape (B, C)
};

// Mean cross-entropy over the batch, accumulated in double. Softmax is
// numerically stabilized by the row max.
LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
double softmax_cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels);

// SGD with optional Nesterov-free momentum: v = m*v + g; p -= lr*v.
// clip_norm > 0 rescales the pooled gradient to that global L2 norm first.
class Sgd {
 public:
  explicit Sgd(float momentum) : momentum_(momentum) {}
  void step(const std::vector<ParamRef>& params, float lr, float clip_norm = 0.0f);

 private:
  float momentum_;
  std::vector<Tensor> velocity_;
};

double params_checksum(const std::vector<ParamRef>& params);

}  // namespace camh::nn

#endif
