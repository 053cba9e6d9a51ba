#ifndef CAMH_TENSOR_HPP_
#define CAMH_TENSOR_HPP_

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "camh/common.hpp"
#include "camh/rng.hpp"

namespace camh {

// Dense row-major float32 tensor. Value semantics; shapes are small vectors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape) { resize(std::move(shape)); }
  Tensor(std::initializer_list<int64_t> shape)
      : Tensor(std::vector<int64_t>(shape)) {}

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, float value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
  }

  void resize(std::vector<int64_t> shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      CAMH_CHECK_ARG(d >= 0, "tensor dimension must be non-negative");
      n *= d;
    }
    shape_ = std::move(shape);
    data_.assign(size_t(n), 0.0f);
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t ndim() const { return shape_.size(); }
  int64_t numel() const { return int64_t(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](int64_t i) { return data_[size_t(i)]; }
  float operator[](int64_t i) const { return data_[size_t(i)]; }

  // NCHW accessors for the common 4-d / 2-d cases.
  float& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[size_t(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  float at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[size_t(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  float& at2(int64_t r, int64_t c) { return data_[size_t(r * shape_[1] + c)]; }
  float at2(int64_t r, int64_t c) const { return data_[size_t(r * shape_[1] + c)]; }

  void fill(float v) {
    for (auto& x : data_) x = v;
  }

  void add_scaled(const Tensor& other, float scale) {
    CAMH_CHECK_ARG(same_shape(other), "add_scaled: shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
  }

  void scale(float s) {
    for (auto& x : data_) x *= s;
  }

  Tensor reshaped(std::vector<int64_t> shape) const {
    Tensor t = *this;
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    CAMH_CHECK_ARG(n == numel(), "reshaped: element count mismatch");
    t.shape_ = std::move(shape);
    return t;
  }

  void init_normal(Rng& rng, float mean, float stddev) {
    for (auto& x : data_) x = float(rng.normal(mean, stddev));
  }
  void init_uniform(Rng& rng, float lo, float hi) {
    for (auto& x : data_) x = float(rng.uniform(lo, hi));
  }

  bool all_finite() const;
  double sum() const;        // accumulated in double
  double abs_max() const;
  double sq_sum() const;     // accumulated in double

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<float> data_;
};

inline int64_t argmax_lowest(const float* row, int64_t n) {
  // Ties break toward the lowest class index.
  int64_t best = 0;
  for (int64_t j = 1; j < n; ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

}  // namespace camh

#endif
