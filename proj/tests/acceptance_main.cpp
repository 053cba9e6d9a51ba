// Acceptance suite: one self-checking criterion per --criterion value,
// printing a single PASS/FAIL line each. Criteria 5-7 need the real MNIST
// and SVHN files under the data root (--data-root, $CAMH_DATA_ROOT or
// ./data) and fail with a precise message when they are absent.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "camh/evaluation.hpp"
#include "camh/experiments.hpp"
#include "camh/io_util.hpp"
#include "camh/models.hpp"
#include "camh/nn.hpp"
#include "camh/noise.hpp"
#include "camh/serve.hpp"
#include "camh/training.hpp"
#include "httplib.h"
#include "json.hpp"

#ifndef CAMH_CONFIG_DIR
#define CAMH_CONFIG_DIR "./configs"
#endif

using namespace camh;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string g_data_root;
std::string g_work_dir = "./acceptance_runs";

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

double rel(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-12});
}

// ------------------------------------------------------------------ C1

Outcome criterion1() {
  EvalReport r;
  r.acc_o2o = 0.9;
  r.acc_h2o = 0.88;
  r.acc_o2h = 0.8;
  r.acc_h2h = 0.6;
  finalize_ratios(r, ErDenominator::benign_hijack);
  const double cr_expect = 0.88 / 0.9;
  const bool ok = std::fabs(r.cr - cr_expect) < 1e-12 && std::fabs(r.er - 0.75) < 1e-12;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "CR=%.12f (expect %.12f), ER=%.12f (expect 0.75)", r.cr,
                cr_expect, r.er);
  return {ok, buf};
}

// ------------------------------------------------------------------ C2

Outcome criterion2() {
  SyncOptLayer sol = SyncOptLayer::init(6, 9, 17);
  Rng rng(31);
  sol.weight.init_normal(rng, 0.0f, 0.4f);
  sol.bias.init_normal(rng, 0.0f, 0.5f);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Rng ur(1000 + uint64_t(trial)), vr(5000 + uint64_t(trial));
    Tensor u({2, 6}), v({2, 6});
    u.init_uniform(ur, -1.0f, 1.0f);
    v.init_uniform(vr, -1.0f, 1.0f);
    const float a = float(rng.uniform(-2.0, 2.0));
    const float b = float(rng.uniform(-2.0, 2.0));
    Tensor mix({2, 6});
    for (int64_t i = 0; i < mix.numel(); ++i) mix[i] = a * u[i] + b * v[i];
    const Tensor lhs = sol_forward(sol, mix);
    const Tensor su = sol_forward(sol, u);
    const Tensor sv = sol_forward(sol, v);
    for (int64_t n = 0; n < 2; ++n) {
      for (int64_t j = 0; j < 9; ++j) {
        const double rhs = double(a) * su.at2(n, j) + double(b) * sv.at2(n, j) -
                           double(a + b - 1.0f) * sol.bias[j];
        const double scale =
            std::max({std::fabs(double(a)) * std::fabs(su.at2(n, j)),
                      std::fabs(double(b)) * std::fabs(sv.at2(n, j)),
                      std::fabs(double(sol.bias[j])), std::fabs(double(lhs.at2(n, j))), 1e-3});
        worst = std::max(worst, std::fabs(double(lhs.at2(n, j)) - rhs) / scale);
      }
    }
  }
  char buf[120];
  std::snprintf(buf, sizeof(buf), "worst relative violation %.3e over 1000 draws (bound 1e-5)",
                worst);
  return {worst < 1e-5, buf};
}

// ------------------------------------------------------------------ C3

Outcome criterion3() {
  TaskSpec spec{"orig", 3, {1, 12, 12}, 64, 16};
  ClassifierModel model = ClassifierModel::build("smallcnn", spec, 0.4f, 3);
  // probe at a smooth point: with shifted biases no pre-activation sits on a
  // ReLU kink, so central differences are a valid derivative oracle
  for (auto& p : model.params()) {
    if (p.name.find("bias") != std::string::npos) {
      for (int64_t i = 0; i < p.value->numel(); ++i) (*p.value)[i] += 0.5f;
    }
  }
  SyncOptLayer sol = SyncOptLayer::init(3, 5, 3);
  Rng rng(19);
  sol.weight.init_normal(rng, 0.0f, 0.7f);

  Rng ir(21);
  Tensor images({4, 1, 12, 12});
  images.init_uniform(ir, 0.25f, 0.75f);  // interior: the clamp stays inactive
  const std::vector<int> labels{4, 3, 2, 4};
  NoisePattern np;
  Rng dr(23);
  np.delta = Tensor({1, 12, 12});
  np.delta.init_uniform(dr, -0.04f, 0.04f);

  double obj0 = 0.0;
  const Tensor grad = noise_objective_grad(model, &sol, images, labels, np, &obj0);

  Rng mr(25);
  Tensor dm_images({4, 1, 12, 12});
  dm_images.init_uniform(mr, 0.2f, 0.8f);
  const std::vector<int> dm_labels{0, 1, 2, 0};
  auto objective = [&](const NoisePattern& n) {
    // both objective terms; the original-task term is constant in delta
    const double term1 =
        nn::softmax_cross_entropy_loss(model.forward_logits(dm_images), dm_labels);
    const Tensor z = sol_forward(sol, model.forward_logits(apply_noise(images, n)));
    return term1 + nn::softmax_cross_entropy_loss(z, labels);
  };
  auto fd_at = [&](int64_t i, double h) {
    NoisePattern p = np, q = np;
    p.delta[i] += float(h);
    q.delta[i] -= float(h);
    return (objective(p) - objective(q)) / (2.0 * h);
  };

  std::vector<std::pair<double, int64_t>> mag;
  for (int64_t i = 0; i < grad.numel(); ++i) mag.push_back({std::fabs(double(grad[i])), i});
  std::sort(mag.rbegin(), mag.rend());
  int checked = 0;
  double worst = 0.0;
  for (const auto& [m, i] : mag) {
    if (checked >= 4 || m < 0.05) break;
    for (const double h : {2e-2, 1e-2, 5e-3}) {
      const double fd = fd_at(i, h);
      const double fd2 = fd_at(i, h / 2);
      if (rel(fd, fd2) > 5e-4) continue;  // h-unstable probe: interval crosses a kink
      const double fdr = (4.0 * fd2 - fd) / 3.0;
      worst = std::max(worst, rel(fdr, grad[i]));
      ++checked;
      break;
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%d/4 probes, worst relative error %.3e (bound 1e-3), objective %.4f", checked,
                worst, obj0);
  return {checked == 4 && worst < 1e-3, buf};
}

// ------------------------------------------------------------------ C4

Outcome criterion4() {
  const auto task = synthetic_handle("selfhijack", 2, {1, 16, 16}, 1536, 384, 501);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 64;
  cfg.lr = 0.05;
  cfg.seed = 1;
  cfg.noise.steps = 30;
  cfg.noise_init_steps = 10;
  cfg.history_eval_cap = 384;
  const TrainedBundle attacked = dual_loop_train(task, task, cfg);
  const TrainedBundle benign = train_benign(task, cfg);
  const EvalReport r = evaluate_hijacked(attacked, benign, benign, task, task);
  char buf[120];
  std::snprintf(buf, sizeof(buf), "CR=%.4f, ER=%.4f (bounds 0.98/0.98)", r.cr, r.er);
  return {r.cr >= 0.98 && r.er >= 0.98, buf};
}

// ------------------------------------------------------------------ desk-scale harness

bool mnist_svhn_available(std::string& missing) {
  const std::string root = resolve_data_root(g_data_root);
  const std::vector<std::pair<std::string, std::string>> needed = {
      {"mnist", "train-images-idx3-ubyte"},
      {"mnist", "train-labels-idx1-ubyte"},
      {"mnist", "t10k-images-idx3-ubyte"},
      {"mnist", "t10k-labels-idx1-ubyte"},
      {"svhn", "train_32x32.mat"},
      {"svhn", "test_32x32.mat"},
  };
  missing.clear();
  for (const auto& [dir, base] : needed) {
    const std::string p = root + "/" + dir + "/" + base;
    const bool gz_ok = dir == "mnist";  // IDX files may ship gzipped
    if (!file_exists(p) && !(gz_ok && file_exists(p + ".gz"))) {
      missing += " " + p + (gz_ok ? "[.gz]" : "");
    }
  }
  return missing.empty();
}

ExperimentConfig desk_mnist_svhn(const std::string& name) {
  ExperimentConfig cfg;
  cfg.name = name;
  TaskRef orig;
  orig.source = "mnist";
  TaskRef hijack;
  hijack.source = "svhn";
  cfg.pairs = {{orig, hijack}};
  cfg.archs = {"smallcnn"};
  cfg.seeds = {1, 2, 3};
  cfg.train.epochs = 20;
  cfg.train.batch_size = 64;
  cfg.train.lr = 0.05;
  cfg.train.noise.steps = 200;
  cfg.train.noise.step_size = 0.05;
  cfg.train.noise_init_steps = 50;
  cfg.cap_train_orig = 10000;
  cfg.cap_train_hijack = 5000;
  cfg.cap_test = 2000;
  cfg.output_dir = g_work_dir;
  cfg.data_root = g_data_root;
  return cfg;
}

Outcome criterion5() {
  std::string missing;
  if (!mnist_svhn_available(missing)) {
    return {false, "dataset files unavailable:" + missing +
                       " (no network in this environment; place the files under the data root)"};
  }
  const RunResult result = run_grid(desk_mnist_svhn("accept_e2e"), /*resume=*/true);
  if (result.reports.size() != 3) {
    return {false, "expected 3 seed reports, got " + std::to_string(result.reports.size())};
  }
  std::vector<double> crs, ers;
  for (const auto& r : result.reports) {
    crs.push_back(r.cr);
    ers.push_back(r.er);
  }
  const double mcr = median3(crs), mer = median3(ers);
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "median CR=%.4f (>=0.95), median ER=%.4f (>=0.70) over seeds {1,2,3}; "
                "full-scale reference is CR 0.9993 / ER 0.9467",
                mcr, mer);
  return {mcr >= 0.95 && mer >= 0.70, buf};
}

Outcome criterion6() {
  std::string missing;
  if (!mnist_svhn_available(missing)) {
    return {false, "dataset files unavailable:" + missing +
                       " (no network in this environment; place the files under the data root)"};
  }
  ExperimentConfig cfg = desk_mnist_svhn("accept_ablation");
  cfg.ablation = true;
  const RunResult result = run_ablation(cfg, /*resume=*/true);
  if (result.reports.size() != 12) {
    return {false, "expected 4 rows x 3 seeds, got " + std::to_string(result.reports.size())};
  }
  // rows arrive grouped per seed in Table-1 order; the on/on row (key 3) must
  // hold the highest ER of the four in at least 2 of 3 seeds
  int wins = 0;
  std::string per_seed;
  for (int s = 0; s < 3; ++s) {
    double best = -1.0, full = -1.0;
    for (size_t i = 0; i < result.reports.size(); ++i) {
      if (int(result.reports[i].seed) != s + 1) continue;
      best = std::max(best, result.reports[i].er);
      if (result.keys[i] == 3.0) full = result.reports[i].er;
    }
    if (full >= best) ++wins;
    per_seed += " s" + std::to_string(s + 1) + ":" + (full >= best ? "win" : "loss");
  }
  char buf[200];
  std::snprintf(buf, sizeof(buf), "noise+SOL row has the top ER in %d/3 seeds (need >=2):%s",
                wins, per_seed.c_str());
  return {wins >= 2, buf};
}

Outcome criterion7() {
  std::string missing;
  if (!mnist_svhn_available(missing)) {
    return {false, "dataset files unavailable:" + missing +
                       " (no network in this environment; place the files under the data root)"};
  }
  ExperimentConfig cfg = desk_mnist_svhn("accept_volume");
  cfg.sweep_axis = ExperimentConfig::SweepAxis::hijack_fraction;
  cfg.sweep_values = {0.3, 0.6, 1.0};
  const RunResult result = run_volume_sweep(cfg, /*resume=*/true);
  if (result.reports.size() != 9) {
    return {false, "expected 3 fractions x 3 seeds, got " + std::to_string(result.reports.size())};
  }
  std::vector<double> med;
  for (const double f : {0.3, 0.6, 1.0}) {
    std::vector<double> ers;
    for (size_t i = 0; i < result.reports.size(); ++i) {
      if (result.keys[i] == f) ers.push_back(result.reports[i].er);
    }
    if (ers.size() != 3) return {false, "missing fraction cell"};
    med.push_back(median3(ers));
  }
  const bool monotone = med[1] >= med[0] - 0.03 && med[2] >= med[1] - 0.03;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "median ER by fraction: 0.3->%.4f, 0.6->%.4f, 1.0->%.4f "
                "(non-decreasing within 0.03)%s",
                med[0], med[1], med[2],
                result.er_trend_spearman
                    ? ("; Spearman " + fmt_real(*result.er_trend_spearman)).c_str()
                    : "");
  return {monotone, buf};
}

// ------------------------------------------------------------------ C8

Outcome criterion8() {
  const DatasetHandle first = derive_cifarm(7, 20);
  for (int i = 0; i < 9; ++i) {
    if (derive_cifarm(7, 20).class_keep != first.class_keep) {
      return {false, "class set differs across invocations"};
    }
  }
  const bool counts_ok = first.spec.train_count == 12000 && first.spec.num_classes == 20;
  std::string detail = "identical class set across 10 invocations; train split " +
                       std::to_string(first.spec.train_count) + " images (expect 12000)";
  // when the CIFAR100 corpus is present, verify the materialized pool too
  const std::string root = resolve_data_root(g_data_root);
  const bool have_data = file_exists(root + "/cifar100/train.bin") ||
                         file_exists(root + "/cifar100/cifar-100-binary/train.bin");
  if (have_data) {
    const auto labels = load_labels(first, Split::train, g_data_root);
    detail += "; materialized " + std::to_string(labels.size()) + " records";
    return {counts_ok && int64_t(labels.size()) == 12000, detail};
  }
  detail += "; corpus files absent, catalog-level verification only";
  return {counts_ok, detail};
}

// ------------------------------------------------------------------ C9

Outcome criterion9() {
  // a short real attack on a synthetic pair produces the served model and the
  // private artifact
  const auto orig = synthetic_handle("orig", 3, {1, 12, 12}, 384, 128, 901);
  const auto hijack = synthetic_handle("hij", 5, {1, 12, 12}, 256, 128, 902);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  cfg.seed = 4;
  cfg.noise.steps = 20;
  cfg.noise_init_steps = 10;
  cfg.history_eval_cap = 128;
  TrainedBundle bundle = dual_loop_train(orig, hijack, cfg);

  // checkpoint round trip gives the adversary a bit-exact offline copy
  make_dirs(g_work_dir);
  const std::string ckpt = g_work_dir + "/accept_c9_model.ckpt";
  bundle.model.save(ckpt);
  ClassifierModel local = ClassifierModel::load(ckpt);
  VictimService service(std::move(bundle.model), {});
  HijackClientConfig client;
  client.endpoint = "http://127.0.0.1:" + std::to_string(service.port());
  client.artifact = *bundle.artifact;

  const DatasetHandle hijack_adapted = adapt_handle(hijack, orig.spec.input_shape);
  const InMemoryDataset test = load_split(hijack_adapted, Split::test, g_data_root);
  const int64_t item = test.images.numel() / test.size();
  int agree = 0;
  const int n = 50;
  for (int i = 0; i < n; ++i) {
    Tensor img({orig.spec.input_shape.c, orig.spec.input_shape.h, orig.spec.input_shape.w});
    std::memcpy(img.data(), test.images.data() + int64_t(i) * item, size_t(item) * 4);
    const int remote = hijack_predict(client, img);
    Tensor batch = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
    const Tensor z =
        composed_forward(local, bundle.artifact->sol, apply_noise(batch, bundle.artifact->noise));
    if (remote == predict_classes(z)[0]) ++agree;
  }

  // API surface audit: a benign (un-noised) request reveals exactly C1 logits
  // and a version string; no hijack-dimension data exists in any field
  Tensor probe({orig.spec.input_shape.c, orig.spec.input_shape.h, orig.spec.input_shape.w});
  std::memcpy(probe.data(), test.images.data(), size_t(item) * 4);
  httplib::Client raw("127.0.0.1", service.port());
  const auto res = raw.Post("/v1/logits", encode_logits_request(probe), "application/json");
  bool surface_ok = false;
  if (res && res->status == 200) {
    const nlohmann::json j = nlohmann::json::parse(res->body);
    surface_ok = j.size() == 2 && j.contains("logits") && j.contains("model_version") &&
                 int(j.at("logits").size()) == local.spec().num_classes;
  }

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%d/%d service/local predictions identical; response carries exactly %d logits "
                "and nothing else: %s",
                agree, n, local.spec().num_classes, surface_ok ? "yes" : "no");
  return {agree == n && surface_ok, buf};
}

// ------------------------------------------------------------------ C10

Outcome criterion10() {
  // full-scale reproduction is documented and shipped, not gated: the full
  // profile configs must parse and declare the full-scale schedule
  const std::vector<std::string> files = {
      std::string(CAMH_CONFIG_DIR) + "/full_fig2_grid.json",
      std::string(CAMH_CONFIG_DIR) + "/full_ablation_table1.json",
      std::string(CAMH_CONFIG_DIR) + "/full_category_sweep.json",
      std::string(CAMH_CONFIG_DIR) + "/full_volume_sweep.json",
  };
  for (const auto& f : files) {
    if (!file_exists(f)) return {false, "missing shipped config " + f};
    const ExperimentConfig cfg = load_experiment_config(f);
    if (cfg.profile != ExperimentConfig::Profile::full) {
      return {false, f + " is not a full-profile config"};
    }
    if (cfg.train.epochs < 150) return {false, f + " does not use the full-scale schedule"};
  }
  return {true, "full-profile configs ship and parse; opt-in configuration rather than a gate"};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) only = std::atoi(argv[++i]);
    if (std::strcmp(argv[i], "--data-root") == 0 && i + 1 < argc) g_data_root = argv[++i];
    if (std::strcmp(argv[i], "--work-dir") == 0 && i + 1 < argc) g_work_dir = argv[++i];
  }
  struct Entry {
    int id;
    const char* title;
    Outcome (*fn)();
  };
  const Entry entries[] = {
      {1, "metric oracle exactness", criterion1},
      {2, "SOL affinity property", criterion2},
      {3, "noise-gradient finite-difference oracle", criterion3},
      {4, "degenerate self-hijack", criterion4},
      {5, "desk-scale MNIST->SVHN end-to-end attack", criterion5},
      {6, "ablation ordering", criterion6},
      {7, "volume-sweep trend", criterion7},
      {8, "CIFARm determinism", criterion8},
      {9, "serve/client equivalence", criterion9},
      {10, "full-scale profile shipped (not a gate)", criterion10},
  };
  bool all_pass = true;
  for (const auto& e : entries) {
    if (only != 0 && e.id != only) continue;
    Outcome o;
    try {
      o = e.fn();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    std::printf("C%-2d %-4s %s — %s\n", e.id, o.pass ? "PASS" : "FAIL", e.title,
                o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) all_pass = false;
  }
  return all_pass ? 0 : 1;
}
