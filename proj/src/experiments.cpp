#include "camh/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "camh/io_util.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace camh {

// ---------------------------------------------------------------- config

DatasetHandle TaskRef::resolve() const {
  if (source == "cifarm") return derive_cifarm(cifarm_seed, cifarm_m);
  if (source == "synthetic") {
    return synthetic_handle("synthetic" + std::to_string(num_classes) + "c", num_classes, shape,
                            train_count, test_count, gen_seed);
  }
  return dataset_handle(source);
}

void ExperimentConfig::validate() const {
  CAMH_CHECK_ARG(!pairs.empty(), "ExperimentConfig: pairs must be non-empty");
  CAMH_CHECK_ARG(!seeds.empty(), "ExperimentConfig: seeds must be non-empty");
  CAMH_CHECK_ARG(!archs.empty(), "ExperimentConfig: archs must be non-empty");
  train.validate();
  if (sweep_axis == SweepAxis::hijack_fraction) {
    for (double v : sweep_values) {
      CAMH_CHECK_ARG(v > 0.0 && v <= 1.0, "ExperimentConfig: fractions must be in (0,1]");
    }
  }
  if (sweep_axis == SweepAxis::cifarm_m) {
    for (double v : sweep_values) {
      CAMH_CHECK_ARG(v >= 1.0 && v <= 100.0 && v == std::floor(v),
                     "ExperimentConfig: cifarm_m values must be integers in [1,100]");
    }
  }
  if (sweep_axis != SweepAxis::none) {
    CAMH_CHECK_ARG(!sweep_values.empty(), "ExperimentConfig: sweep values must be non-empty");
  }
}

namespace {

TaskRef parse_task_ref(const json& j) {
  TaskRef t;
  t.source = j.at("source").get<std::string>();
  if (j.contains("m")) t.cifarm_m = j.at("m").get<int>();
  if (j.contains("cifarm_seed")) t.cifarm_seed = j.at("cifarm_seed").get<uint64_t>();
  if (j.contains("num_classes")) t.num_classes = j.at("num_classes").get<int>();
  if (j.contains("shape")) {
    const auto s = j.at("shape");
    t.shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
  }
  if (j.contains("train_count")) t.train_count = j.at("train_count").get<int64_t>();
  if (j.contains("test_count")) t.test_count = j.at("test_count").get<int64_t>();
  if (j.contains("gen_seed")) t.gen_seed = j.at("gen_seed").get<uint64_t>();
  return t;
}

void apply_train_overrides(TrainConfig& t, const json& j) {
  if (j.contains("epochs")) t.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) t.batch_size = j.at("batch_size").get<int>();
  if (j.contains("optimizer")) {
    const auto s = j.at("optimizer").get<std::string>();
    CAMH_CHECK_ARG(s == "sgd" || s == "sgd-momentum", "train.optimizer: sgd | sgd-momentum");
    t.optimizer = s == "sgd" ? TrainConfig::Opt::sgd : TrainConfig::Opt::sgd_momentum;
  }
  if (j.contains("momentum")) t.momentum = j.at("momentum").get<double>();
  if (j.contains("lr")) t.lr = j.at("lr").get<double>();
  if (j.contains("lr_schedule")) {
    const auto s = j.at("lr_schedule").get<std::string>();
    CAMH_CHECK_ARG(s == "constant" || s == "step-decay", "train.lr_schedule: constant | step-decay");
    t.lr_schedule = s == "constant" ? TrainConfig::LrSchedule::constant
                                    : TrainConfig::LrSchedule::step_decay;
  }
  if (j.contains("lr_milestones")) t.lr_milestones = j.at("lr_milestones").get<std::vector<int>>();
  if (j.contains("lr_gamma")) t.lr_gamma = j.at("lr_gamma").get<double>();
  if (j.contains("dropout_rate")) t.dropout_rate = j.at("dropout_rate").get<double>();
  if (j.contains("grad_clip_norm")) t.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  if (j.contains("inner_steps_per_outer")) t.inner_steps_per_outer = j.at("inner_steps_per_outer").get<int>();
  if (j.contains("noise_refresh_period")) t.noise_refresh_period = j.at("noise_refresh_period").get<int>();
  if (j.contains("hijack_fraction")) t.hijack_fraction = j.at("hijack_fraction").get<double>();
  if (j.contains("noise_steps")) t.noise.steps = j.at("noise_steps").get<int>();
  if (j.contains("noise_step_size")) t.noise.step_size = j.at("noise_step_size").get<double>();
  if (j.contains("noise_init_steps")) t.noise_init_steps = j.at("noise_init_steps").get<int>();
  if (j.contains("noise_balance_weight")) t.noise.balance_weight = j.at("noise_balance_weight").get<double>();
  if (j.contains("noise_sign_grad")) t.noise.sign_grad = j.at("noise_sign_grad").get<bool>();
  if (j.contains("noise_linf_bound")) t.noise.linf_bound = j.at("noise_linf_bound").get<float>();
  if (j.contains("history_eval_cap")) t.history_eval_cap = j.at("history_eval_cap").get<int64_t>();
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("experiment config: invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c.name = j.value("name", c.name);
    const std::string prof = j.value("profile", std::string("desk"));
    CAMH_CHECK_ARG(prof == "desk" || prof == "full", "profile must be desk | full");
    c.profile = prof == "desk" ? ExperimentConfig::Profile::desk : ExperimentConfig::Profile::full;
    if (c.profile == ExperimentConfig::Profile::full) {
      // full-scale defaults; per-arch adjustments happen at cell time
      c.train.epochs = 150;
      c.train.lr = 0.1;
      c.train.batch_size = 64;
      c.train.lr_schedule = TrainConfig::LrSchedule::step_decay;
      // milestones are derived per cell (50%/75% of the final epoch count)
      c.archs = {"resnet18"};
    } else {
      c.cap_train_orig = 10000;
      c.cap_train_hijack = 5000;
      c.cap_test = 2000;
    }
    for (const auto& p : j.at("pairs")) {
      c.pairs.push_back({parse_task_ref(p.at("orig")), parse_task_ref(p.at("hijack"))});
    }
    if (j.contains("archs")) c.archs = j.at("archs").get<std::vector<std::string>>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    if (j.contains("train")) apply_train_overrides(c.train, j.at("train"));
    if (j.contains("sweep")) {
      const auto s = j.at("sweep").at("axis").get<std::string>();
      CAMH_CHECK_ARG(s == "none" || s == "cifarm_m" || s == "hijack_fraction",
                     "sweep.axis: none | cifarm_m | hijack_fraction");
      c.sweep_axis = s == "cifarm_m" ? ExperimentConfig::SweepAxis::cifarm_m
                     : s == "hijack_fraction" ? ExperimentConfig::SweepAxis::hijack_fraction
                                              : ExperimentConfig::SweepAxis::none;
      if (j.at("sweep").contains("values")) {
        c.sweep_values = j.at("sweep").at("values").get<std::vector<double>>();
      }
    }
    c.ablation = j.value("ablation", false);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("er_denominator")) {
      const auto s = j.at("er_denominator").get<std::string>();
      CAMH_CHECK_ARG(s == "benign_hijack" || s == "benign_orig",
                     "er_denominator: benign_hijack | benign_orig");
      c.er_denominator = s == "benign_hijack" ? ErDenominator::benign_hijack
                                              : ErDenominator::benign_orig;
    }
    if (j.contains("caps")) {
      const auto& caps = j.at("caps");
      if (caps.contains("train_orig")) c.cap_train_orig = caps.at("train_orig").get<int64_t>();
      if (caps.contains("train_hijack")) c.cap_train_hijack = caps.at("train_hijack").get<int64_t>();
      if (caps.contains("test")) c.cap_test = caps.at("test").get<int64_t>();
    }
    c.data_root = j.value("data_root", std::string());
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config(read_file(path));
}

std::string experiment_config_digest(const ExperimentConfig& c) {
  json j{{"name", c.name},
         {"profile", c.profile == ExperimentConfig::Profile::desk ? "desk" : "full"},
         {"archs", c.archs},
         {"seeds", c.seeds},
         {"ablation", c.ablation},
         {"caps", {c.cap_train_orig, c.cap_train_hijack, c.cap_test}},
         {"sweep_values", c.sweep_values}};
  return sha256_hex(j.dump());
}

// ---------------------------------------------------------------- cells

namespace {

json report_to_json(const EvalReport& r) {
  return json{{"run_id", r.run_id},
              {"benign_orig_id", r.benign_orig_id},
              {"benign_hijack_id", r.benign_hijack_id},
              {"orig_dataset", r.orig_dataset},
              {"hijack_dataset", r.hijack_dataset},
              {"arch", r.arch},
              {"acc_o2o", r.acc_o2o},
              {"acc_h2o", r.acc_h2o},
              {"acc_o2h", r.acc_o2h},
              {"acc_h2h", r.acc_h2h},
              {"cr", r.cr},
              {"er", r.er},
              {"n_test_orig", r.n_test_orig},
              {"n_test_hijack", r.n_test_hijack},
              {"seed", r.seed}};
}

EvalReport report_from_json(const json& j) {
  EvalReport r;
  r.run_id = j.at("run_id").get<std::string>();
  r.benign_orig_id = j.at("benign_orig_id").get<std::string>();
  r.benign_hijack_id = j.at("benign_hijack_id").get<std::string>();
  r.orig_dataset = j.at("orig_dataset").get<std::string>();
  r.hijack_dataset = j.at("hijack_dataset").get<std::string>();
  r.arch = j.at("arch").get<std::string>();
  r.acc_o2o = j.at("acc_o2o").get<double>();
  r.acc_h2o = j.at("acc_h2o").get<double>();
  r.acc_o2h = j.at("acc_o2h").get<double>();
  r.acc_h2h = j.at("acc_h2h").get<double>();
  r.cr = j.at("cr").get<double>();
  r.er = j.at("er").get<double>();
  r.n_test_orig = j.at("n_test_orig").get<int64_t>();
  r.n_test_hijack = j.at("n_test_hijack").get<int64_t>();
  r.seed = j.at("seed").get<uint64_t>();
  return r;
}

std::string handle_fingerprint(const DatasetHandle& h) {
  json j{{"source", h.source},
         {"uri", h.source_uri},
         {"name", h.spec.name},
         {"classes", h.spec.num_classes},
         {"shape", {h.spec.input_shape.c, h.spec.input_shape.h, h.spec.input_shape.w}},
         {"train", h.spec.train_count},
         {"test", h.spec.test_count},
         {"keep", h.class_keep},
         {"subset_n", h.train_subset.size()},
         {"seed", h.seed}};
  return sha256_hex(j.dump());
}

std::string train_fingerprint(const TrainConfig& t) {
  json j{{"epochs", t.epochs},       {"batch", t.batch_size},
         {"opt", int(t.optimizer)},  {"momentum", t.momentum},
         {"lr", t.lr},               {"sched", int(t.lr_schedule)},
         {"miles", t.lr_milestones}, {"gamma", t.lr_gamma},
         {"dropout", t.dropout_rate},{"clip", t.grad_clip_norm},
         {"k", t.inner_steps_per_outer},
         {"r", t.noise_refresh_period}, {"frac", t.hijack_fraction},
         {"seed", t.seed},           {"arch", t.arch},
         {"nsteps", t.noise.steps},  {"nstep_size", t.noise.step_size},
         {"ninit", t.noise_init_steps}, {"nlambda", t.noise.balance_weight},
         {"nsign", t.noise.sign_grad},  {"nbound", t.noise.linf_bound},
         {"sol", t.use_sol},        {"noise", t.use_noise},
         {"inner", t.inner_enabled}};
  return sha256_hex(j.dump());
}

struct Cell {
  DatasetHandle orig;
  DatasetHandle hijack;
  TrainConfig train;
  double key = std::numeric_limits<double>::quiet_NaN();
  std::string label;

  std::string id() const {
    return sha256_hex(handle_fingerprint(orig) + handle_fingerprint(hijack) +
                      train_fingerprint(train))
        .substr(0, 16);
  }
};

// Cached benign/attack runs keyed by semantic fingerprints; shared across
// experiments under the same output root.
class RunCache {
 public:
  RunCache(std::string dir, std::string data_root)
      : dir_(std::move(dir)), data_root_(std::move(data_root)) {
    make_dirs(dir_);
  }

  TrainedBundle benign(const DatasetHandle& data, const TrainConfig& cfg) {
    const std::string key =
        sha256_hex("benign" + handle_fingerprint(data) + train_fingerprint(cfg)).substr(0, 24);
    const std::string ckpt = dir_ + "/" + key + ".ckpt";
    const std::string meta = dir_ + "/" + key + ".json";
    if (file_exists(ckpt) && file_exists(meta)) {
      TrainedBundle b;
      b.model = ClassifierModel::load(ckpt);
      b.run_id = json::parse(read_file(meta)).at("run_id").get<std::string>();
      b.mode = HijackMode::none;
      return b;
    }
    TrainedBundle b = train_benign(data, cfg, data_root_);
    b.model.save(ckpt);
    write_file_durable(meta, json{{"run_id", b.run_id}}.dump());
    return b;
  }

  TrainedBundle attack(const DatasetHandle& orig, const DatasetHandle& hijack,
                       const TrainConfig& cfg) {
    const std::string key = sha256_hex("attack" + handle_fingerprint(orig) +
                                       handle_fingerprint(hijack) + train_fingerprint(cfg))
                                .substr(0, 24);
    const std::string ckpt = dir_ + "/" + key + ".ckpt";
    const std::string art = dir_ + "/" + key + ".camh";
    const std::string meta = dir_ + "/" + key + ".json";
    if (file_exists(ckpt) && file_exists(art) && file_exists(meta)) {
      TrainedBundle b;
      b.model = ClassifierModel::load(ckpt);
      b.artifact = load_artifact(art);
      const json m = json::parse(read_file(meta));
      b.run_id = m.at("run_id").get<std::string>();
      b.mode = m.at("mode").get<std::string>() == "sol" ? HijackMode::sol : HijackMode::fold;
      return b;
    }
    TrainedBundle b = dual_loop_train(orig, hijack, cfg, data_root_);
    b.model.save(ckpt);
    save_artifact(*b.artifact, art);
    write_file_durable(
        meta, json{{"run_id", b.run_id}, {"mode", b.mode == HijackMode::sol ? "sol" : "fold"}}
                  .dump());
    return b;
  }

 private:
  std::string dir_;
  std::string data_root_;
};

class GridRunner {
 public:
  GridRunner(const ExperimentConfig& cfg, bool resume)
      : cfg_(cfg),
        out_dir_(cfg.output_dir + "/" + cfg.name),
        cache_(cfg.output_dir + "/cache", cfg.data_root) {
    make_dirs(out_dir_ + "/cells");
    manifest_path_ = out_dir_ + "/manifest.jsonl";
    reports_path_ = out_dir_ + "/reports.csv";
    if (resume && file_exists(manifest_path_)) {
      for (const auto& line : split_lines(read_file(manifest_path_))) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        // a line truncated by a crash is not an obstacle to resuming
        if (j.is_discarded() || !j.contains("status") || !j.contains("cell")) continue;
        if (j.at("status").get<std::string>() == "done") {
          // key must be extracted before j is moved from
          const std::string cell = j.at("cell").get<std::string>();
          done_[cell] = std::move(j);
        }
      }
    } else {
      write_file(manifest_path_, "");
      write_file(reports_path_, reports_csv_string({}));
    }
  }

  RunResult run(const std::vector<Cell>& cells) {
    RunResult result;
    for (const auto& cell : cells) {
      const std::string id = cell.id();
      const auto it = done_.find(id);
      if (it != done_.end()) {
        result.reports.push_back(report_from_json(it->second.at("report")));
        result.keys.push_back(cell.key);
        continue;
      }
      try {
        const EvalReport report = execute(cell, id);
        // report row first, durably; only then the manifest marks completion
        append_line_durable(reports_path_, csv_row(report));
        json entry{{"cell", id},
                   {"status", "done"},
                   {"label", cell.label},
                   {"report", report_to_json(report)}};
        if (!std::isnan(cell.key)) entry["key"] = cell.key;
        append_line_durable(manifest_path_, entry.dump());
        result.reports.push_back(report);
        result.keys.push_back(cell.key);
      } catch (const Error& e) {
        // per-cell failures are recorded and skipped, never fatal to the grid
        std::fprintf(stderr, "[camh] cell %s (%s) failed: %s\n", id.c_str(),
                     cell.label.c_str(), e.what());
        append_line_durable(manifest_path_,
                            json{{"cell", id}, {"status", "failed"}, {"label", cell.label},
                                 {"error", e.what()}}
                                .dump());
      }
    }
    // compact the CSV from the manifest (drops rows orphaned by crashes)
    std::vector<EvalReport> all;
    std::set<std::string> seen;
    for (const auto& line : split_lines(read_file(manifest_path_))) {
      if (line.empty()) continue;
      const json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("status") || !j.contains("cell")) continue;
      if (j.at("status").get<std::string>() == "done" && !seen.count(j.at("cell"))) {
        seen.insert(j.at("cell").get<std::string>());
        all.push_back(report_from_json(j.at("report")));
      }
    }
    report_to_csv(all, reports_path_);
    return result;
  }

  const std::string& out_dir() const { return out_dir_; }

 private:
  static std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
      if (c == '\n') {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
  }

  static std::string csv_row(const EvalReport& r) {
    std::string row = reports_csv_string({r});
    return row.substr(row.find('\n') + 1, row.rfind('\n') - row.find('\n') - 1);
  }

  EvalReport execute(const Cell& cell, const std::string& id) {
    TrainConfig benign_cfg = cell.train;
    benign_cfg.inner_enabled = true;  // irrelevant for benign; keep canonical
    const TrainedBundle benign_orig = cache_.benign(cell.orig, benign_cfg);
    // benign hijack reference: same architecture and budget, trained on the
    // full (fraction-independent) hijack data at the victim geometry
    TrainConfig ref_cfg = cell.train;
    ref_cfg.hijack_fraction = 1.0;
    const DatasetHandle hijack_at_victim = adapt_handle(cell.hijack, cell.orig.spec.input_shape);
    const TrainedBundle benign_hijack = cache_.benign(hijack_at_victim, ref_cfg);

    const TrainedBundle attacked = cache_.attack(cell.orig, cell.hijack, cell.train);

    EvalOptions opts;
    opts.er_denominator = cfg_.er_denominator;
    opts.data_root = cfg_.data_root;
    EvalReport report =
        evaluate_hijacked(attacked, benign_orig, benign_hijack, cell.orig, cell.hijack, opts);

    const std::string cell_dir = out_dir_ + "/cells/" + id;
    make_dirs(cell_dir);
    attacked.model.save(cell_dir + "/model.ckpt");
    save_artifact(*attacked.artifact, cell_dir + "/artifact.camh");
    write_history_csv(attacked, cell_dir + "/history.csv");
    write_tensor_png(cell_dir + "/noise.png", attacked.artifact->noise.delta);
    return report;
  }

  const ExperimentConfig& cfg_;
  std::string out_dir_;
  RunCache cache_;
  std::string manifest_path_;
  std::string reports_path_;
  std::map<std::string, json> done_;
};

DatasetHandle apply_caps(DatasetHandle h, int64_t train_cap, int64_t test_cap) {
  if (train_cap > 0 || test_cap > 0) {
    h = with_counts(h, train_cap > 0 ? train_cap : h.spec.train_count,
                    test_cap > 0 ? test_cap : h.spec.test_count);
  }
  return h;
}

TrainConfig cell_train_config(const ExperimentConfig& cfg, const std::string& arch,
                              uint64_t seed) {
  TrainConfig t = cfg.train;
  t.arch = arch;
  t.seed = seed;
  if (cfg.profile == ExperimentConfig::Profile::full && arch == "resnet34") {
    // deeper model: longer schedule and dropout, mirroring the full-scale setup
    if (t.epochs == 150) t.epochs = 200;
    if (t.dropout_rate == 0.0) t.dropout_rate = 0.4;
  }
  if (t.lr_schedule == TrainConfig::LrSchedule::step_decay && t.lr_milestones.empty()) {
    t.lr_milestones = {t.epochs / 2, t.epochs * 3 / 4};
  }
  return t;
}

std::string pair_label(const DatasetHandle& orig, const DatasetHandle& hijack,
                       const std::string& arch, uint64_t seed) {
  return orig.spec.name + "->" + hijack.spec.name + "/" + arch + "/s" + std::to_string(seed);
}

}  // namespace

RunResult run_grid(const ExperimentConfig& config, bool resume) {
  config.validate();
  GridRunner runner(config, resume);
  std::vector<Cell> cells;
  for (const auto& [orig_ref, hijack_ref] : config.pairs) {
    const DatasetHandle orig =
        apply_caps(orig_ref.resolve(), config.cap_train_orig, config.cap_test);
    const DatasetHandle hijack =
        apply_caps(hijack_ref.resolve(), config.cap_train_hijack, config.cap_test);
    for (const auto& arch : config.archs) {
      for (uint64_t seed : config.seeds) {
        Cell c{orig, hijack, cell_train_config(config, arch, seed)};
        c.label = pair_label(orig, hijack, arch, seed);
        cells.push_back(std::move(c));
      }
    }
  }
  RunResult result = runner.run(cells);
  if (!result.reports.empty()) emit_figures(result, runner.out_dir() + "/figures", "grid");
  return result;
}

namespace {

std::vector<double> dedup_values(std::vector<double> values, const char* axis) {
  std::vector<double> out;
  for (double v : values) {
    if (std::find(out.begin(), out.end(), v) != out.end()) {
      std::fprintf(stderr, "[camh] duplicate %s value %g dropped\n", axis, v);
      continue;
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace

RunResult run_category_sweep(const ExperimentConfig& config, bool resume) {
  config.validate();
  CAMH_CHECK_ARG(config.sweep_axis == ExperimentConfig::SweepAxis::cifarm_m,
                 "run_category_sweep: sweep axis must be cifarm_m");
  GridRunner runner(config, resume);
  const auto values = dedup_values(config.sweep_values, "cifarm_m");
  std::vector<Cell> cells;
  for (const auto& [orig_ref, hijack_ref] : config.pairs) {
    for (double mv : values) {
      const int m = int(mv);
      // the cifarm side takes the swept m; both directions are executed
      auto resolve_with_m = [&](const TaskRef& ref) {
        if (ref.source != "cifarm") return ref.resolve();
        TaskRef r = ref;
        r.cifarm_m = m;
        return r.resolve();
      };
      const DatasetHandle a = apply_caps(resolve_with_m(orig_ref), config.cap_train_orig, config.cap_test);
      const DatasetHandle b = apply_caps(resolve_with_m(hijack_ref), config.cap_train_hijack, config.cap_test);
      for (const auto& arch : config.archs) {
        for (uint64_t seed : config.seeds) {
          Cell fwd{a, b, cell_train_config(config, arch, seed), double(m)};
          fwd.label = pair_label(a, b, arch, seed) + "[m=" + std::to_string(m) + "]";
          cells.push_back(std::move(fwd));
          Cell rev{b, a, cell_train_config(config, arch, seed), double(m)};
          rev.label = pair_label(b, a, arch, seed) + "[m=" + std::to_string(m) + "]";
          cells.push_back(std::move(rev));
        }
      }
    }
  }
  RunResult result = runner.run(cells);
  if (!result.reports.empty()) emit_figures(result, runner.out_dir() + "/figures", "category_sweep");
  return result;
}

RunResult run_volume_sweep(const ExperimentConfig& config, bool resume) {
  config.validate();
  CAMH_CHECK_ARG(config.sweep_axis == ExperimentConfig::SweepAxis::hijack_fraction,
                 "run_volume_sweep: sweep axis must be hijack_fraction");
  GridRunner runner(config, resume);
  const auto values = dedup_values(config.sweep_values, "hijack_fraction");
  std::vector<Cell> cells;
  for (const auto& [orig_ref, hijack_ref] : config.pairs) {
    const DatasetHandle orig =
        apply_caps(orig_ref.resolve(), config.cap_train_orig, config.cap_test);
    const DatasetHandle hijack =
        apply_caps(hijack_ref.resolve(), config.cap_train_hijack, config.cap_test);
    for (const auto& arch : config.archs) {
      for (uint64_t seed : config.seeds) {
        for (double f : values) {
          Cell c{orig, hijack, cell_train_config(config, arch, seed), f};
          c.train.hijack_fraction = f;
          c.label = pair_label(orig, hijack, arch, seed) + "[f=" + fmt_real(f) + "]";
          cells.push_back(std::move(c));
        }
      }
    }
  }
  RunResult result = runner.run(cells);
  if (!result.reports.empty()) {
    std::vector<double> fr, er;
    for (size_t i = 0; i < result.reports.size(); ++i) {
      fr.push_back(result.keys[i]);
      er.push_back(result.reports[i].er);
    }
    result.er_trend_spearman = spearman_correlation(fr, er);
    emit_figures(result, runner.out_dir() + "/figures", "volume_sweep");
  }
  return result;
}

RunResult run_ablation(const ExperimentConfig& config, bool resume) {
  config.validate();
  CAMH_CHECK_ARG(config.ablation, "run_ablation: config.ablation must be enabled");
  GridRunner runner(config, resume);
  // Table-1 row order: noise x sol = (off,off), (on,off), (off,on), (on,on)
  const std::pair<bool, bool> rows[4] = {{false, false}, {true, false}, {false, true}, {true, true}};
  std::vector<Cell> cells;
  for (const auto& [orig_ref, hijack_ref] : config.pairs) {
    const DatasetHandle orig =
        apply_caps(orig_ref.resolve(), config.cap_train_orig, config.cap_test);
    const DatasetHandle hijack =
        apply_caps(hijack_ref.resolve(), config.cap_train_hijack, config.cap_test);
    for (const auto& arch : config.archs) {
      for (uint64_t seed : config.seeds) {
        for (int row = 0; row < 4; ++row) {
          Cell c{orig, hijack, cell_train_config(config, arch, seed), double(row)};
          c.train.use_noise = rows[row].first;
          c.train.use_sol = rows[row].second;
          c.label = pair_label(orig, hijack, arch, seed) + "[noise=" +
                    (rows[row].first ? "y" : "n") + ",sol=" + (rows[row].second ? "y" : "n") + "]";
          cells.push_back(std::move(c));
        }
      }
    }
  }
  RunResult result = runner.run(cells);
  if (!result.reports.empty()) emit_figures(result, runner.out_dir() + "/figures", "ablation");
  return result;
}

// ---------------------------------------------------------------- statistics

double spearman_correlation(const std::vector<double>& xs, const std::vector<double>& ys) {
  CAMH_CHECK_ARG(xs.size() == ys.size(), "spearman: length mismatch");
  const size_t n = xs.size();
  if (n < 2) return 0.0;
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    for (size_t i = 0; i < v.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    size_t i = 0;
    while (i < idx.size()) {
      size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (double(i) + double(j)) / 2.0 + 1.0;  // average rank for ties
      for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(xs), ry = ranks(ys);
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= double(n);
  my /= double(n);
  double num = 0, dx = 0, dy = 0;
  for (size_t i = 0; i < n; ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  if (dx == 0.0 || dy == 0.0) return 0.0;
  return num / std::sqrt(dx * dy);
}

// ---------------------------------------------------------------- figures

namespace {

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

const char* kPalette[6] = {"#c23b22", "#2a6f97", "#3a7d44", "#8a5a83", "#b8860b", "#444444"};

std::string svg_header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
         "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " +
         std::to_string(h) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

}  // namespace

// rows: header label,key,cr,er then data rows
std::string render_report_bars_svg(const std::vector<std::vector<std::string>>& csv_rows) {
  std::vector<std::pair<std::string, std::pair<double, double>>> data;
  for (size_t i = 1; i < csv_rows.size(); ++i) {
    if (csv_rows[i].size() < 4) continue;
    data.push_back({csv_rows[i][0], {std::stod(csv_rows[i][2]), std::stod(csv_rows[i][3])}});
  }
  const int w = 720, h = 420, left = 60, bottom = 80, top = 20;
  const double plot_w = w - left - 20, plot_h = h - top - bottom;
  double ymax = 1.0;
  for (const auto& d : data) ymax = std::max({ymax, d.second.first, d.second.second});
  std::string svg = svg_header(w, h);
  svg += "<line x1=\"" + num(left) + "\" y1=\"" + num(top) + "\" x2=\"" + num(left) + "\" y2=\"" +
         num(top + plot_h) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + num(left) + "\" y1=\"" + num(top + plot_h) + "\" x2=\"" +
         num(left + plot_w) + "\" y2=\"" + num(top + plot_h) + "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 5; ++tick) {
    const double v = ymax * tick / 5.0;
    const double y = top + plot_h - plot_h * tick / 5.0;
    svg += "<text x=\"" + num(left - 8) + "\" y=\"" + num(y + 4) +
           "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" + num(v) +
           "</text>\n";
  }
  const double group_w = data.empty() ? plot_w : plot_w / double(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    const double x0 = left + group_w * double(i);
    const double bw = std::min(28.0, group_w / 3.0);
    const double cr_h = plot_h * data[i].second.first / ymax;
    const double er_h = plot_h * data[i].second.second / ymax;
    svg += "<rect x=\"" + num(x0 + group_w / 2 - bw - 2) + "\" y=\"" + num(top + plot_h - cr_h) +
           "\" width=\"" + num(bw) + "\" height=\"" + num(cr_h) + "\" fill=\"" + kPalette[1] +
           "\"/>\n";
    svg += "<rect x=\"" + num(x0 + group_w / 2 + 2) + "\" y=\"" + num(top + plot_h - er_h) +
           "\" width=\"" + num(bw) + "\" height=\"" + num(er_h) + "\" fill=\"" + kPalette[0] +
           "\"/>\n";
    svg += "<text x=\"" + num(x0 + group_w / 2) + "\" y=\"" + num(top + plot_h + 14) +
           "\" font-size=\"9\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(25 " +
           num(x0 + group_w / 2) + " " + num(top + plot_h + 14) + ")\">" +
           svg_escape(data[i].first) + "</text>\n";
  }
  svg += "<rect x=\"" + num(left) + "\" y=\"" + num(h - 24) + "\" width=\"12\" height=\"12\" fill=\"" +
         std::string(kPalette[1]) + "\"/><text x=\"" + num(left + 16) + "\" y=\"" + num(h - 14) +
         "\" font-size=\"11\" font-family=\"sans-serif\">CR</text>\n";
  svg += "<rect x=\"" + num(left + 60) + "\" y=\"" + num(h - 24) +
         "\" width=\"12\" height=\"12\" fill=\"" + std::string(kPalette[0]) + "\"/><text x=\"" +
         num(left + 76) + "\" y=\"" + num(h - 14) +
         "\" font-size=\"11\" font-family=\"sans-serif\">ER</text>\n";
  svg += "</svg>\n";
  return svg;
}

std::string render_sweep_lines_svg(const std::vector<std::vector<std::string>>& csv_rows) {
  // group series by the label prefix before "[", plot er vs key
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double xmin = 1e300, xmax = -1e300;
  for (size_t i = 1; i < csv_rows.size(); ++i) {
    if (csv_rows[i].size() < 4) continue;
    const std::string& label = csv_rows[i][0];
    const std::string group = label.substr(0, label.find('['));
    const double x = std::stod(csv_rows[i][1]);
    const double y = std::stod(csv_rows[i][3]);
    series[group].push_back({x, y});
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
  }
  const int w = 640, h = 400, left = 60, bottom = 60, top = 20;
  const double plot_w = w - left - 20, plot_h = h - top - bottom;
  if (xmax <= xmin) xmax = xmin + 1.0;
  std::string svg = svg_header(w, h);
  svg += "<line x1=\"" + num(left) + "\" y1=\"" + num(top) + "\" x2=\"" + num(left) + "\" y2=\"" +
         num(top + plot_h) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + num(left) + "\" y1=\"" + num(top + plot_h) + "\" x2=\"" +
         num(left + plot_w) + "\" y2=\"" + num(top + plot_h) + "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 5; ++tick) {
    const double y = top + plot_h - plot_h * tick / 5.0;
    svg += "<text x=\"" + num(left - 8) + "\" y=\"" + num(y + 4) +
           "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" +
           num(tick / 5.0) + "</text>\n";
  }
  int color = 0, legend_y = top + 10;
  for (auto& [group, pts] : series) {
    std::sort(pts.begin(), pts.end());
    std::string poly;
    for (const auto& [x, y] : pts) {
      const double px = left + plot_w * (x - xmin) / (xmax - xmin);
      const double py = top + plot_h - plot_h * std::min(y, 1.0);
      poly += num(px) + "," + num(py) + " ";
      svg += "<circle cx=\"" + num(px) + "\" cy=\"" + num(py) + "\" r=\"3\" fill=\"" +
             kPalette[color % 6] + "\"/>\n";
    }
    svg += "<polyline points=\"" + poly + "\" fill=\"none\" stroke=\"" + kPalette[color % 6] +
           "\" stroke-width=\"1.5\"/>\n";
    svg += "<text x=\"" + num(left + 10) + "\" y=\"" + num(legend_y) +
           "\" font-size=\"11\" font-family=\"sans-serif\" fill=\"" + kPalette[color % 6] + "\">" +
           svg_escape(group) + "</text>\n";
    legend_y += 14;
    ++color;
  }
  svg += "<text x=\"" + num(left + plot_w / 2) + "\" y=\"" + num(h - 10) +
         "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">sweep value</text>\n";
  svg += "</svg>\n";
  return svg;
}

void emit_figures(const RunResult& result, const std::string& dir, const std::string& stem) {
  CAMH_CHECK_ARG(!result.reports.empty(), "emit_figures: no reports");
  make_dirs(dir);
  std::string csv = "label,key,cr,er\n";
  for (size_t i = 0; i < result.reports.size(); ++i) {
    const auto& r = result.reports[i];
    const std::string label = r.orig_dataset + "->" + r.hijack_dataset + "/" + r.arch + "[s" +
                              std::to_string(r.seed) + "]";
    const double key = std::isnan(result.keys[i]) ? double(i) : result.keys[i];
    csv += label + "," + fmt_real(key) + "," + fmt_real(r.cr) + "," + fmt_real(r.er) + "\n";
  }
  const std::string csv_path = dir + "/fig_" + stem + ".csv";
  write_file(csv_path, csv);
  // the figure is rendered from the CSV file alone, so it can be regenerated
  const auto rows = parse_csv(read_file(csv_path));
  const bool sweep = !result.reports.empty() && !std::isnan(result.keys[0]);
  const std::string svg = sweep ? render_sweep_lines_svg(rows) : render_report_bars_svg(rows);
  write_file(dir + "/fig_" + stem + ".svg", svg);
}

}  // namespace camh
