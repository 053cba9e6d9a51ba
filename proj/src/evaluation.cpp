#include "camh/evaluation.hpp"

#include <cstring>

#include "camh/io_util.hpp"

namespace camh {

double accuracy(const std::function<std::vector<int>(const Tensor&)>& predict,
                BatchStream& data) {
  int64_t correct = 0, total = 0;
  while (auto batch = data.next()) {
    const auto pred = predict(batch->images);
    CAMH_CHECK_ARG(pred.size() == batch->labels.size(),
                   "accuracy: prediction/label count mismatch");
    for (size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == batch->labels[i]) ++correct;
    }
    total += int64_t(pred.size());
  }
  if (total == 0) throw UndefinedMetricError("accuracy over an empty dataset is undefined");
  return double(correct) / double(total);
}

double model_accuracy(const ClassifierModel& model, const InMemoryDataset& ds) {
  if (ds.size() == 0) throw UndefinedMetricError("accuracy over an empty dataset is undefined");
  const int64_t item = ds.images.numel() / ds.size();
  int64_t correct = 0;
  const int64_t batch = 256;
  for (int64_t begin = 0; begin < ds.size(); begin += batch) {
    const int64_t b = std::min(batch, ds.size() - begin);
    Tensor x({b, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    std::memcpy(x.data(), ds.images.data() + begin * item, size_t(b * item) * 4);
    const auto pred = predict_classes(model.forward_logits(x));
    for (int64_t i = 0; i < b; ++i) {
      if (pred[size_t(i)] == ds.labels[size_t(begin + i)]) ++correct;
    }
  }
  return double(correct) / double(ds.size());
}

void finalize_ratios(EvalReport& r, ErDenominator er_denominator) {
  if (r.acc_o2o <= 0.0) {
    throw UndefinedMetricError("CR undefined: ACC_o2o is zero");
  }
  r.cr = r.acc_h2o / r.acc_o2o;  // deliberately not clamped at 1
  const double er_denom =
      er_denominator == ErDenominator::benign_hijack ? r.acc_o2h : r.acc_o2o;
  if (er_denom <= 0.0) {
    throw UndefinedMetricError("ER undefined: ACC_o2h is zero");
  }
  r.er = r.acc_h2h / er_denom;
}

EvalReport evaluate_hijacked(const TrainedBundle& bundle, const TrainedBundle& benign_orig,
                             const TrainedBundle& benign_hijack, const DatasetHandle& orig_test,
                             const DatasetHandle& hijack_test, const EvalOptions& opts) {
  CAMH_CHECK_ARG(bundle.artifact.has_value(), "evaluate_hijacked: bundle carries no artifact");
  CAMH_CHECK_ARG(bundle.mode != HijackMode::none, "evaluate_hijacked: bundle is benign");

  const InMemoryDataset orig_data = load_split(orig_test, Split::test, opts.data_root);
  // Hijack test data at the victim geometry for the hijacked path...
  const DatasetHandle hijack_adapted =
      adapt_handle(hijack_test, bundle.model.spec().input_shape);
  const InMemoryDataset hijack_data_victim =
      load_split(hijack_adapted, Split::test, opts.data_root);
  // ...and at the benign reference model's own geometry for ACC_o2h.
  const DatasetHandle hijack_ref =
      adapt_handle(hijack_test, benign_hijack.model.spec().input_shape);
  const InMemoryDataset hijack_data_ref = load_split(hijack_ref, Split::test, opts.data_root);

  EvalReport r;
  // Camouflage side: strictly the plain logits path, no SOL, no noise.
  r.acc_h2o = model_accuracy(bundle.model, orig_data);
  r.acc_o2o = model_accuracy(benign_orig.model, orig_data);
  r.acc_h2h = hijack_accuracy(bundle.model, *bundle.artifact, bundle.mode, hijack_data_victim);
  r.acc_o2h = model_accuracy(benign_hijack.model, hijack_data_ref);

  finalize_ratios(r, opts.er_denominator);

  r.n_test_orig = orig_data.size();
  r.n_test_hijack = hijack_data_victim.size();
  r.run_id = bundle.run_id;
  r.benign_orig_id = benign_orig.run_id;
  r.benign_hijack_id = benign_hijack.run_id;
  r.orig_dataset = orig_test.spec.name;
  r.hijack_dataset = hijack_test.spec.name;
  r.arch = bundle.model.architecture_id();
  r.seed = bundle.artifact->seed;
  return r;
}

static const char* kCsvHeader =
    "run_id,orig_dataset,hijack_dataset,arch,acc_o2o,acc_h2o,acc_o2h,acc_h2h,cr,er,seed";

std::string reports_csv_string(const std::vector<EvalReport>& reports) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : reports) {
    out += r.run_id + "," + r.orig_dataset + "," + r.hijack_dataset + "," + r.arch + "," +
           fmt_real(r.acc_o2o) + "," + fmt_real(r.acc_h2o) + "," + fmt_real(r.acc_o2h) + "," +
           fmt_real(r.acc_h2h) + "," + fmt_real(r.cr) + "," + fmt_real(r.er) + "," +
           std::to_string(r.seed) + "\n";
  }
  return out;
}

void report_to_csv(const std::vector<EvalReport>& reports, const std::string& path) {
  write_file(path, reports_csv_string(reports));
}

std::vector<EvalReport> reports_from_csv(const std::string& text) {
  const auto rows = parse_csv(text);
  CAMH_CHECK_ARG(!rows.empty() && rows[0].size() == 11 && rows[0][0] == "run_id",
                 "reports_from_csv: unexpected header");
  std::vector<EvalReport> out;
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto& c = rows[i];
    if (c.size() == 1 && c[0].empty()) continue;
    CAMH_CHECK_ARG(c.size() == 11, "reports_from_csv: bad row");
    EvalReport r;
    r.run_id = c[0];
    r.orig_dataset = c[1];
    r.hijack_dataset = c[2];
    r.arch = c[3];
    r.acc_o2o = std::stod(c[4]);
    r.acc_h2o = std::stod(c[5]);
    r.acc_o2h = std::stod(c[6]);
    r.acc_h2h = std::stod(c[7]);
    r.cr = std::stod(c[8]);
    r.er = std::stod(c[9]);
    r.seed = uint64_t(std::stoull(c[10]));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace camh
