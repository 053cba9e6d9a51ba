#ifndef CAMH_DATASETS_HPP_
#define CAMH_DATASETS_HPP_

#include <optional>
#include <string>
#include <vector>

#include "camh/common.hpp"
#include "camh/tensor.hpp"

namespace camh {

// Identity of one classification task.
struct TaskSpec {
  std::string name;
  int num_classes = 0;
  Shape3 input_shape;
  int64_t train_count = 0;
  int64_t test_count = 0;

  void validate() const {
    CAMH_CHECK_ARG(num_classes >= 2, "TaskSpec: num_classes must be >= 2");
    CAMH_CHECK_ARG(input_shape.c >= 1 && input_shape.h >= 1 && input_shape.w >= 1,
                   "TaskSpec: input_shape components must be >= 1");
    CAMH_CHECK_ARG(train_count >= 0 && test_count >= 0,
                   "TaskSpec: split sizes must be non-negative");
  }
};

enum class Split { train, test };

struct LabeledBatch {
  Tensor images;            // (B, C, H, W), values in [0, 1]
  std::vector<int> labels;  // length B, each in [0, num_classes)
};

// Immutable description of a (possibly derived) dataset. Safe to copy and
// share across threads; loading resolves it against a data root directory.
struct DatasetHandle {
  TaskSpec spec;                       // effective geometry and split sizes
  std::string source;                  // mnist|svhn|gtsrb|cifar10|cifar100|cifarm|synthetic
  std::string source_uri;              // directory under the data root; empty = source name
  std::vector<int> class_keep;         // original class ids kept (ascending); empty = all
  std::vector<int64_t> train_subset;   // ascending indices into the canonical train view; empty = all
  double fraction = 1.0;               // retained portion of the train split
  uint64_t seed = 0;                   // synthetic content seed
  Shape3 native_shape;                 // geometry of the stored records
  // Size of the underlying corpus (records on disk / generated). Caps and
  // subsets narrow spec.*_count but never these.
  int64_t native_train_count = 0;
  int64_t native_test_count = 0;

  void validate() const {
    spec.validate();
    CAMH_CHECK_ARG(fraction > 0.0 && fraction <= 1.0, "DatasetHandle: fraction must be in (0,1]");
    if (!class_keep.empty()) {
      CAMH_CHECK_ARG(int(class_keep.size()) == spec.num_classes,
                     "DatasetHandle: class_remap must be a bijection onto [0, num_classes)");
      for (size_t i = 1; i < class_keep.size(); ++i) {
        CAMH_CHECK_ARG(class_keep[i] > class_keep[i - 1],
                       "DatasetHandle: class_keep must be strictly ascending");
      }
    }
  }
};

struct InMemoryDataset {
  TaskSpec spec;
  Tensor images;  // (N, C, H, W)
  std::vector<int> labels;
  int64_t size() const { return images.ndim() == 4 ? images.dim(0) : 0; }
};

// Deterministic batch sequence over an in-memory split. With a shuffle seed
// the order is a seeded permutation; otherwise canonical order.
class BatchStream {
 public:
  BatchStream(InMemoryDataset data, int64_t batch_size, std::optional<uint64_t> shuffle_seed);
  std::optional<LabeledBatch> next();
  void reset(std::optional<uint64_t> shuffle_seed);
  const InMemoryDataset& dataset() const { return data_; }

 private:
  InMemoryDataset data_;
  int64_t batch_size_;
  std::vector<int64_t> order_;
  int64_t cursor_ = 0;
};

struct LoadOptions {
  int64_t batch_size = 64;
  std::optional<uint64_t> shuffle_seed;
  std::string data_root;  // empty = resolve from env / default
};

// --data-root flag > CAMH_DATA_ROOT env > ./data
std::string resolve_data_root(const std::string& cli_value);

// Built-in catalog handles (canonical counts and geometry).
DatasetHandle dataset_handle(const std::string& source);

// Procedural k-class grating task; learnable by smallcnn within a few epochs.
DatasetHandle synthetic_handle(const std::string& name, int num_classes, Shape3 shape,
                               int64_t train_count, int64_t test_count, uint64_t seed);

InMemoryDataset load_split(const DatasetHandle& handle, Split split,
                           const std::string& data_root);
std::vector<int> load_labels(const DatasetHandle& handle, Split split,
                             const std::string& data_root);
BatchStream load_dataset(const DatasetHandle& handle, Split split, const LoadOptions& opts);

// m random CIFAR100 classes, remapped ascending. Pure in (seed, m). The train
// split is the full 600-per-class pool; the test split is the standard
// CIFAR100 test subset of those classes (contained in the pool).
// When cache_dir is non-empty the class list is cached as {seed}_{m}.json.
DatasetHandle derive_cifarm(uint64_t seed, int m, const std::string& cache_dir = "");

// P6 PPM reader: returns a (3,H,W) tensor with values in [0,1].
Tensor read_ppm(const std::string& path);

// Bilinear spatial resize plus channel adaptation (1->3 replicate,
// 3->1 rec601 luma). Idempotent when target equals source.
Tensor adapt_images(const Tensor& nchw, Shape3 target);
LabeledBatch adapt_to_shape(const LabeledBatch& batch, Shape3 target);

// Handle whose emitted geometry is `target`; records stay native on disk.
DatasetHandle adapt_handle(DatasetHandle handle, Shape3 target);

// Stratified cap of declared split sizes (first-k per class in canonical order).
DatasetHandle with_counts(DatasetHandle handle, int64_t train_count, int64_t test_count);

// Class-stratified retention of floor(fraction*N) training examples
// (largest-remainder apportionment); the test split is untouched.
DatasetHandle subsample_fraction(const DatasetHandle& handle, double fraction,
                                 uint64_t seed, const std::string& data_root = "");

}  // namespace camh

#endif
