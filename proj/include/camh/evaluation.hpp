#ifndef CAMH_EVALUATION_HPP_
#define CAMH_EVALUATION_HPP_

#include <functional>
#include <string>
#include <vector>

#include "camh/datasets.hpp"
#include "camh/training.hpp"

namespace camh {

// The four accuracy quantities plus CR/ER. The o->h/h->o direction reads
// "model trained on X evaluated on Y's task".
struct EvalReport {
  double acc_o2o = 0.0;  // benign original model on the original test set
  double acc_h2o = 0.0;  // hijacked model (plain path) on the original test set
  double acc_o2h = 0.0;  // benign hijack-task reference model on the hijack test set
  double acc_h2h = 0.0;  // hijacked model (SOL + noise path) on the hijack test set
  double cr = 0.0;       // acc_h2o / acc_o2o
  double er = 0.0;       // acc_h2h / acc_o2h
  int64_t n_test_orig = 0;
  int64_t n_test_hijack = 0;
  std::string run_id;         // hijacked run
  std::string benign_orig_id;
  std::string benign_hijack_id;
  std::string orig_dataset, hijack_dataset, arch;
  uint64_t seed = 0;
};

// (#correct)/(#total) over the whole stream; argmax ties to the lowest index
// happen inside the prediction function. Empty data is an error.
double accuracy(const std::function<std::vector<int>(const Tensor&)>& predict,
                BatchStream& data);

// Convenience: plain-logits accuracy of a model over an in-memory split.
double model_accuracy(const ClassifierModel& model, const InMemoryDataset& ds);

enum class ErDenominator { benign_hijack, benign_orig };

struct EvalOptions {
  ErDenominator er_denominator = ErDenominator::benign_hijack;
  std::string data_root;
};

// Fills cr/er from the four accuracies. CR = acc_h2o / acc_o2o; ER uses the
// configured denominator. Never clamped; zero denominators are errors.
void finalize_ratios(EvalReport& report, ErDenominator er_denominator);

// CR = acc_h2o / acc_o2o, ER = acc_h2h / denominator (Eq. 4-5). The hijack
// test split is adapted to the victim's input geometry before evaluation.
EvalReport evaluate_hijacked(const TrainedBundle& bundle, const TrainedBundle& benign_orig,
                             const TrainedBundle& benign_hijack, const DatasetHandle& orig_test,
                             const DatasetHandle& hijack_test, const EvalOptions& opts = {});

// One row per report, stable column order, 6-decimal fixed formatting.
void report_to_csv(const std::vector<EvalReport>& reports, const std::string& path);
std::string reports_csv_string(const std::vector<EvalReport>& reports);
std::vector<EvalReport> reports_from_csv(const std::string& text);

}  // namespace camh

#endif
