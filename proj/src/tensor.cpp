#include "camh/tensor.hpp"

#include <cmath>

namespace camh {

bool Tensor::all_finite() const {
  for (float x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

double Tensor::sum() const {
  double s = 0.0;
  for (float x : data_) s += x;
  return s;
}

double Tensor::abs_max() const {
  double m = 0.0;
  for (float x : data_) m = std::max(m, double(std::fabs(x)));
  return m;
}

double Tensor::sq_sum() const {
  double s = 0.0;
  for (float x : data_) s += double(x) * double(x);
  return s;
}

}  // namespace camh
