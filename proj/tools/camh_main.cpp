#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "camh/evaluation.hpp"
#include "camh/experiments.hpp"
#include "camh/io_util.hpp"
#include "camh/serve.hpp"
#include "camh/training.hpp"
#include "json.hpp"

using namespace camh;
using nlohmann::json;

namespace {

TaskRef task_ref_from_json(const json& j) {
  TaskRef t;
  t.source = j.at("source").get<std::string>();
  if (j.contains("m")) t.cifarm_m = j.at("m").get<int>();
  if (j.contains("cifarm_seed")) t.cifarm_seed = j.at("cifarm_seed").get<uint64_t>();
  if (j.contains("num_classes")) t.num_classes = j.at("num_classes").get<int>();
  if (j.contains("shape")) {
    const auto& s = j.at("shape");
    t.shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
  }
  if (j.contains("train_count")) t.train_count = j.at("train_count").get<int64_t>();
  if (j.contains("test_count")) t.test_count = j.at("test_count").get<int64_t>();
  if (j.contains("gen_seed")) t.gen_seed = j.at("gen_seed").get<uint64_t>();
  return t;
}

DatasetHandle handle_from_config(const json& cfg, const char* field, int64_t cap_train,
                                 int64_t cap_test) {
  TaskRef ref = task_ref_from_json(cfg.at(field));
  DatasetHandle h = ref.resolve();
  if (cap_train > 0 || cap_test > 0) {
    h = with_counts(h, cap_train > 0 ? cap_train : h.spec.train_count,
                    cap_test > 0 ? cap_test : h.spec.test_count);
  }
  return h;
}

TrainConfig train_config_from_json(const json& cfg) {
  // reuse the experiment parser so both surfaces accept the same keys
  json wrapper{{"pairs", json::array({json{{"orig", {{"source", "synthetic"}}},
                                           {"hijack", {{"source", "synthetic"}}}}})}};
  if (cfg.contains("train")) wrapper["train"] = cfg.at("train");
  return parse_experiment_config(wrapper.dump()).train;
}

Tensor load_image_any(const std::string& path) {
  if (path.size() > 4 && path.substr(path.size() - 4) == ".ppm") return read_ppm(path);
  return load_raw_tensor(path);
}

int run_train(const std::string& config_path, const std::string& out_dir,
              const std::string& data_root) {
  const json cfg = json::parse(read_file(config_path));
  TrainConfig tc = train_config_from_json(cfg);
  const json caps = cfg.value("caps", json::object());
  const int64_t cap_orig = caps.value("train_orig", int64_t(0));
  const int64_t cap_hijack = caps.value("train_hijack", int64_t(0));
  const int64_t cap_test = caps.value("test", int64_t(0));
  const DatasetHandle orig = handle_from_config(cfg, "orig", cap_orig, cap_test);

  make_dirs(out_dir);
  TrainedBundle bundle;
  if (cfg.contains("hijack")) {
    const DatasetHandle hijack = handle_from_config(cfg, "hijack", cap_hijack, cap_test);
    bundle = dual_loop_train(orig, hijack, tc, data_root);
  } else {
    bundle = train_benign(orig, tc, data_root);
  }
  bundle.model.save(out_dir + "/model.ckpt");
  write_history_csv(bundle, out_dir + "/history.csv");
  json summary{{"run_id", bundle.run_id},
               {"arch", bundle.model.architecture_id()},
               {"orig", orig.spec.name},
               {"epochs", tc.epochs},
               {"seed", tc.seed}};
  if (bundle.artifact) {
    save_artifact(*bundle.artifact, out_dir + "/artifact.camh");
    write_tensor_png(out_dir + "/noise.png", bundle.artifact->noise.delta);
    summary["artifact"] = "artifact.camh";
    summary["mode"] = bundle.mode == HijackMode::sol ? "sol" : "fold";
  }
  write_file(out_dir + "/run.json", summary.dump(2) + "\n");
  std::printf("run %s finished; outputs in %s\n", bundle.run_id.c_str(), out_dir.c_str());
  if (!bundle.history.empty()) {
    const auto& last = bundle.history.back();
    std::printf("final: loss_orig=%.4f acc_orig=%.4f loss_hijack=%.4f acc_hijack=%.4f\n",
                last.loss_orig, last.acc_orig, last.loss_hijack, last.acc_hijack);
  }
  return 0;
}

int run_noise(const std::string& config_path, const std::string& out_path,
              const std::string& data_root) {
  const json cfg = json::parse(read_file(config_path));
  ClassifierModel model = ClassifierModel::load(cfg.at("model").get<std::string>());
  const json caps = cfg.value("caps", json::object());
  const DatasetHandle dm = handle_from_config(cfg, "orig", caps.value("train_orig", int64_t(0)),
                                              caps.value("test", int64_t(0)));
  DatasetHandle dh = handle_from_config(cfg, "hijack", caps.value("train_hijack", int64_t(0)),
                                        caps.value("test", int64_t(0)));
  dh = adapt_handle(dh, model.spec().input_shape);

  HijackArtifact artifact;
  if (cfg.contains("artifact_in")) {
    artifact = load_artifact(cfg.at("artifact_in").get<std::string>());
  } else {
    artifact.original_spec = model.spec();
    artifact.hijack_spec = dh.spec;
    artifact.sol = SyncOptLayer::init(model.spec().num_classes, dh.spec.num_classes,
                                      cfg.value("seed", uint64_t(0)));
    artifact.run_id = "noise-only";
    artifact.seed = cfg.value("seed", uint64_t(0));
    artifact.config_hash = sha256_hex(cfg.dump()).substr(0, 16);
  }

  NoiseOptConfig ncfg;
  if (cfg.contains("noise")) {
    const auto& n = cfg.at("noise");
    ncfg.steps = n.value("steps", ncfg.steps);
    ncfg.step_size = n.value("step_size", ncfg.step_size);
    ncfg.balance_weight = n.value("balance_weight", ncfg.balance_weight);
    ncfg.sign_grad = n.value("sign_grad", ncfg.sign_grad);
    ncfg.seed = n.value("seed", ncfg.seed);
    ncfg.batch_size = n.value("batch_size", ncfg.batch_size);
    ncfg.linf_bound = n.value("linf_bound", ncfg.linf_bound);
  }
  const auto res = optimize_noise(model, artifact.sol, dm, dh, ncfg, data_root);
  artifact.noise = res.noise;
  artifact.noise_trained = true;
  save_artifact(artifact, out_path);
  write_tensor_png(out_path + ".png", artifact.noise.delta);
  std::printf("noise optimized: objective %.6f -> %.6f over %d steps; artifact at %s\n",
              res.initial_objective, res.final_objective, ncfg.steps, out_path.c_str());
  return 0;
}

int run_experiment(const std::string& config_path, const std::string& profile, bool resume,
                   const std::string& data_root) {
  std::string text = read_file(config_path);
  if (!profile.empty()) {
    json j = json::parse(text);
    j["profile"] = profile;
    text = j.dump();
  }
  ExperimentConfig cfg = parse_experiment_config(text);
  if (!data_root.empty()) cfg.data_root = data_root;

  RunResult result;
  if (cfg.ablation) {
    result = run_ablation(cfg, resume);
  } else if (cfg.sweep_axis == ExperimentConfig::SweepAxis::cifarm_m) {
    result = run_category_sweep(cfg, resume);
  } else if (cfg.sweep_axis == ExperimentConfig::SweepAxis::hijack_fraction) {
    result = run_volume_sweep(cfg, resume);
  } else {
    result = run_grid(cfg, resume);
  }
  std::printf("%zu report(s) under %s/%s\n", result.reports.size(), cfg.output_dir.c_str(),
              cfg.name.c_str());
  for (size_t i = 0; i < result.reports.size(); ++i) {
    const auto& r = result.reports[i];
    std::printf("  %s->%s %s seed=%llu cr=%.4f er=%.4f\n", r.orig_dataset.c_str(),
                r.hijack_dataset.c_str(), r.arch.c_str(),
                (unsigned long long)r.seed, r.cr, r.er);
  }
  if (result.er_trend_spearman) {
    std::printf("ER-vs-fraction Spearman correlation: %.4f\n", *result.er_trend_spearman);
  }
  return 0;
}

int run_serve(const std::string& model_path, const std::string& bind) {
  const auto colon = bind.rfind(':');
  CAMH_CHECK_ARG(colon != std::string::npos, "--bind must be host:port");
  ServeOptions opts;
  opts.host = bind.substr(0, colon);
  opts.port = std::stoi(bind.substr(colon + 1));
  VictimService service(ClassifierModel::load(model_path), opts);
  std::printf("victim service on %s:%d (model %s); POST /v1/logits, GET /v1/health\n",
              opts.host.c_str(), service.port(), service.model_version().c_str());
  service.wait();
  return 0;
}

int run_client(const std::string& endpoint, const std::string& artifact_path,
               const std::string& image_path) {
  HijackClientConfig cfg;
  cfg.endpoint = endpoint;
  cfg.artifact = load_artifact(artifact_path);
  Tensor img = load_image_any(image_path);
  const auto& s = cfg.artifact.original_spec.input_shape;
  if (!(int(img.dim(0)) == s.c && int(img.dim(1)) == s.h && int(img.dim(2)) == s.w)) {
    img = adapt_images(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}), s)
              .reshaped({s.c, s.h, s.w});
  }
  const int cls = hijack_predict(cfg, img);
  std::printf("hijack prediction: class %d of %d (%s)\n", cls,
              cfg.artifact.hijack_spec.num_classes, cfg.artifact.hijack_spec.name.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CAMH model-hijacking framework"};
  app.require_subcommand(1);
  std::string data_root;
  app.add_option("--data-root", data_root, "dataset root (default $CAMH_DATA_ROOT or ./data)");

  std::string config_path, out_dir, out_path, model_path, bind = "127.0.0.1:8080";
  std::string endpoint, artifact_path, image_path, profile;
  bool resume = false;
  uint64_t seed = 7;
  int m = 20;

  auto* train = app.add_subcommand("train", "benign or dual-loop training");
  train->add_option("--config", config_path, "training config (JSON)")->required();
  train->add_option("--out-dir", out_dir, "output directory")->required();

  auto* noise = app.add_subcommand("noise", "optimize the universal noise for a frozen model");
  noise->add_option("--config", config_path, "noise config (JSON)")->required();
  noise->add_option("--out", out_path, "output artifact path")->required();

  auto* experiment = app.add_subcommand("experiment", "config-driven grids, sweeps, ablations");
  experiment->add_option("--config", config_path, "experiment config (JSON)")->required();
  experiment->add_option("--profile", profile, "desk | full (overrides the config)")
      ->check(CLI::IsMember({"desk", "full"}));
  experiment->add_flag("--resume", resume, "skip cells already recorded in the manifest");

  auto* serve = app.add_subcommand("serve", "run the victim logits service");
  serve->add_option("--model", model_path, "model checkpoint")->required();
  serve->add_option("--bind", bind, "host:port (default 127.0.0.1:8080)");

  auto* client = app.add_subcommand("hijack-client", "query the service with the private artifact");
  client->add_option("--endpoint", endpoint, "service endpoint, e.g. http://127.0.0.1:8080")
      ->required();
  client->add_option("--artifact", artifact_path, "hijack artifact file")->required();
  client->add_option("--image", image_path, "input image (.ppm or .camht tensor)")->required();

  auto* cifarm = app.add_subcommand("derive-cifarm", "derive and cache a CIFARm class subset");
  cifarm->add_option("--seed", seed, "derivation seed");
  cifarm->add_option("--m", m, "number of classes")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return run_train(config_path, out_dir, data_root);
    if (*noise) return run_noise(config_path, out_path, data_root);
    if (*experiment) return run_experiment(config_path, profile, resume, data_root);
    if (*serve) return run_serve(model_path, bind);
    if (*client) return run_client(endpoint, artifact_path, image_path);
    if (*cifarm) {
      const std::string cache = resolve_data_root(data_root) + "/cifarm";
      const DatasetHandle h = derive_cifarm(seed, m, cache);
      std::printf("cifarm%d (seed %llu): train %lld, test %lld, classes:", m,
                  (unsigned long long)seed, (long long)h.spec.train_count,
                  (long long)h.spec.test_count);
      for (int c : h.class_keep) std::printf(" %d", c);
      std::printf("\ncached under %s\n", cache.c_str());
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
