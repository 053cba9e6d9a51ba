#ifndef CAMH_TEST_HELPERS_HPP_
#define CAMH_TEST_HELPERS_HPP_

#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "camh/rng.hpp"
#include "camh/tensor.hpp"

namespace camh::test {

inline double rel_err(double a, double b) {
  const double scale = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / scale;
}

inline Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed, float lo = -1.0f,
                            float hi = 1.0f) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  t.init_uniform(rng, lo, hi);
  return t;
}

// Scratch directory unique per test run.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = (std::filesystem::temp_directory_path() /
             ("camh_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
              std::to_string(counter++)))
                .string();
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

}  // namespace camh::test

#endif
