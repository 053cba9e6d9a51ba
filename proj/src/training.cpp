#include "camh/training.hpp"

#include <cmath>

#include "camh/io_util.hpp"
#include "json.hpp"

using nlohmann::json;

namespace camh {

namespace {

double plain_accuracy(const ClassifierModel& model, const InMemoryDataset& ds,
                      int64_t batch = 256) {
  if (ds.size() == 0) return 0.0;
  const int64_t item = ds.images.numel() / ds.size();
  int64_t correct = 0;
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

InMemoryDataset capped_test_split(const DatasetHandle& handle, int64_t cap,
                                  const std::string& data_root) {
  DatasetHandle h = handle;
  if (cap > 0 && cap < h.spec.test_count) h.spec.test_count = cap;
  return load_split(h, Split::test, data_root);
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  if (cfg.lr_schedule == TrainConfig::LrSchedule::step_decay) {
    for (int m : cfg.lr_milestones) {
      if (epoch >= m) lr *= cfg.lr_gamma;
    }
  }
  return lr;
}

std::string train_config_digest(const TrainConfig& cfg, const DatasetHandle& orig,
                                const DatasetHandle* hijack) {
  json j{{"epochs", cfg.epochs},
         {"batch_size", cfg.batch_size},
         {"optimizer", cfg.optimizer == TrainConfig::Opt::sgd ? "sgd" : "sgd-momentum"},
         {"momentum", cfg.momentum},
         {"lr", cfg.lr},
         {"schedule", cfg.lr_schedule == TrainConfig::LrSchedule::constant ? "constant" : "step-decay"},
         {"milestones", cfg.lr_milestones},
         {"gamma", cfg.lr_gamma},
         {"dropout", cfg.dropout_rate},
         {"clip", cfg.grad_clip_norm},
         {"k", cfg.inner_steps_per_outer},
         {"r", cfg.noise_refresh_period},
         {"hijack_fraction", cfg.hijack_fraction},
         {"seed", cfg.seed},
         {"arch", cfg.arch},
         {"noise_steps", cfg.noise.steps},
         {"noise_step_size", cfg.noise.step_size},
         {"noise_init_steps", cfg.noise_init_steps},
         {"use_sol", cfg.use_sol},
         {"use_noise", cfg.use_noise},
         {"inner", cfg.inner_enabled},
         {"orig", orig.spec.name},
         {"orig_train", orig.spec.train_count},
         {"hijack", hijack ? hijack->spec.name : ""},
         {"hijack_train", hijack ? hijack->spec.train_count : 0}};
  return sha256_hex(j.dump());
}

// Cycling hijack-batch source with a per-cycle reshuffle.
class HijackFeed {
 public:
  HijackFeed(const InMemoryDataset* data, int64_t batch_size, Rng base, int epoch)
      : data_(data), batch_(batch_size), base_(base), epoch_(epoch) {
    reshuffle();
  }

  void fill(Tensor& images, std::vector<int>& labels) {
    const int64_t item = data_->images.numel() / data_->size();
    const int64_t b = std::min(batch_, data_->size());
    images.resize({b, data_->images.dim(1), data_->images.dim(2), data_->images.dim(3)});
    labels.resize(size_t(b));
    for (int64_t i = 0; i < b; ++i) {
      if (pos_ >= int64_t(order_.size())) reshuffle();
      const int64_t j = order_[size_t(pos_++)];
      std::memcpy(images.data() + i * item, data_->images.data() + j * item, size_t(item) * 4);
      labels[size_t(i)] = data_->labels[size_t(j)];
    }
  }

 private:
  void reshuffle() {
    Rng rng = base_.fork("shuffle_h", uint64_t(epoch_) * 100000 + uint64_t(cycle_++));
    order_ = rng.permutation(data_->size());
    pos_ = 0;
  }

  const InMemoryDataset* data_;
  int64_t batch_;
  Rng base_;
  int epoch_;
  int cycle_ = 0;
  std::vector<int64_t> order_;
  int64_t pos_ = 0;
};

TrainedBundle run_training(const DatasetHandle& orig, const DatasetHandle* hijack_in,
                           const TrainConfig& cfg, const std::string& data_root) {
  cfg.validate();
  orig.validate();

  const InMemoryDataset orig_train = load_split(orig, Split::train, data_root);
  CAMH_CHECK_ARG(orig_train.size() > 0, "training: empty original train split");
  const InMemoryDataset orig_test_eval =
      capped_test_split(orig, cfg.history_eval_cap, data_root);

  std::optional<DatasetHandle> hijack;
  InMemoryDataset hijack_train, hijack_test_eval;
  if (hijack_in) {
    DatasetHandle h = *hijack_in;
    if (cfg.hijack_fraction < 1.0) {
      h = subsample_fraction(h, cfg.hijack_fraction, Rng(cfg.seed).fork("fraction").next_u64(),
                             data_root);
    }
    h = adapt_handle(h, orig.spec.input_shape);
    hijack = h;
    hijack_train = load_split(h, Split::train, data_root);
    CAMH_CHECK_ARG(hijack_train.size() > 0, "training: empty hijacking train split");
    hijack_test_eval = capped_test_split(h, cfg.history_eval_cap, data_root);
  }

  const Rng base(cfg.seed);
  ClassifierModel model =
      ClassifierModel::build(cfg.arch, orig.spec, float(cfg.dropout_rate), cfg.seed);

  const bool attack = hijack.has_value() && cfg.inner_enabled;
  HijackMode mode = HijackMode::none;
  SyncOptLayer sol;
  NoisePattern noise;
  noise.delta = Tensor({orig.spec.input_shape.c, orig.spec.input_shape.h, orig.spec.input_shape.w});
  if (attack) {
    mode = cfg.use_sol ? HijackMode::sol : HijackMode::fold;
    sol = cfg.use_sol ? SyncOptLayer::init(orig.spec.num_classes, hijack->spec.num_classes, cfg.seed)
                      : SyncOptLayer::fold(orig.spec.num_classes, hijack->spec.num_classes);
  }

  // In fold mode the inner loss is CE(f, label mod C1); an identity SOL over
  // pre-folded labels reproduces that objective exactly for the noise step.
  InMemoryDataset hijack_train_folded;
  SyncOptLayer identity_sol;
  if (attack && !cfg.use_sol) {
    hijack_train_folded = hijack_train;
    for (auto& y : hijack_train_folded.labels) y %= orig.spec.num_classes;
    identity_sol = SyncOptLayer::fold(orig.spec.num_classes, orig.spec.num_classes);
  }
  auto refresh_noise = [&](int steps, uint64_t stream) {
    NoiseOptConfig ncfg = cfg.noise;
    ncfg.steps = std::max(steps, 1);
    ncfg.seed = base.fork("noise", stream).next_u64();
    ncfg.batch_size = cfg.batch_size;
    if (mode == HijackMode::sol) {
      noise = optimize_noise(model, sol, orig_train, hijack_train, ncfg).noise;
    } else {
      noise = optimize_noise(model, identity_sol, orig_train, hijack_train_folded, ncfg).noise;
    }
  };
  if (attack && cfg.use_noise) refresh_noise(cfg.noise_init_steps, 0);

  const float momentum =
      cfg.optimizer == TrainConfig::Opt::sgd_momentum ? float(cfg.momentum) : 0.0f;
  nn::Sgd sgd_theta(momentum);
  nn::Sgd sgd_sol(momentum);

  const int64_t n_orig = orig_train.size();
  const int64_t item = orig_train.images.numel() / n_orig;
  TrainedBundle bundle;
  bundle.history.reserve(size_t(cfg.epochs));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (attack && cfg.use_noise && epoch > 0 && epoch % cfg.noise_refresh_period == 0) {
      refresh_noise(cfg.noise.steps, uint64_t(epoch));
    }
    const float lr = float(lr_at_epoch(cfg, epoch));
    const auto order = base.fork("shuffle_o", uint64_t(epoch)).permutation(n_orig);
    std::optional<HijackFeed> feed;
    if (attack) feed.emplace(&hijack_train, cfg.batch_size, base, epoch);

    double loss_o_sum = 0.0, loss_h_sum = 0.0;
    int64_t steps_o = 0, steps_h = 0;
    Tensor hx;
    std::vector<int> hy;

    for (int64_t begin = 0, ob = 0; begin < n_orig; begin += cfg.batch_size, ++ob) {
      const int64_t b = std::min<int64_t>(cfg.batch_size, n_orig - begin);
      Tensor x({b, orig_train.images.dim(1), orig_train.images.dim(2), orig_train.images.dim(3)});
      std::vector<int> y(size_t(b), 0);
      for (int64_t i = 0; i < b; ++i) {
        const int64_t j = order[size_t(begin + i)];
        std::memcpy(x.data() + i * item, orig_train.images.data() + j * item, size_t(item) * 4);
        y[size_t(i)] = orig_train.labels[size_t(j)];
      }
      // outer step: original task over theta only
      Tensor logits = model.forward_logits(x, nn::Mode::kTrain);
      auto loss = nn::softmax_cross_entropy(logits, y);
      if (!std::isfinite(loss.loss)) {
        throw TrainingError("training diverged on the original task", epoch);
      }
      loss_o_sum += loss.loss;
      ++steps_o;
      model.backward(loss.dlogits);
      sgd_theta.step(model.params(), lr, float(cfg.grad_clip_norm));
      model.zero_grads();

      // inner step: hijack task over (theta, theta_hat) with the current noise
      if (attack && (ob + 1) % cfg.inner_steps_per_outer == 0) {
        feed->fill(hx, hy);
        Tensor noised = apply_noise(hx, noise);
        Tensor hlogits = model.forward_logits(noised, nn::Mode::kTrain);
        double hloss;
        Tensor dlogits;
        if (mode == HijackMode::sol) {
          Tensor z = sol_forward(sol, hlogits);
          auto l = nn::softmax_cross_entropy(z, hy);
          hloss = l.loss;
          dlogits = sol_backward(sol, hlogits, l.dlogits);
        } else {
          std::vector<int> folded(hy.size());
          for (size_t i = 0; i < hy.size(); ++i) folded[i] = hy[i] % orig.spec.num_classes;
          auto l = nn::softmax_cross_entropy(hlogits, folded);
          hloss = l.loss;
          dlogits = std::move(l.dlogits);
        }
        if (!std::isfinite(hloss)) {
          throw TrainingError("training diverged on the hijacking task", epoch);
        }
        loss_h_sum += hloss;
        ++steps_h;
        model.backward(dlogits);
        sgd_theta.step(model.params(), lr, float(cfg.grad_clip_norm));
        if (mode == HijackMode::sol) sgd_sol.step(sol.params(), lr, float(cfg.grad_clip_norm));
        model.zero_grads();
        sol.zero_grads();
      }
    }

    EpochStats st;
    st.loss_orig = steps_o ? loss_o_sum / double(steps_o) : 0.0;
    st.loss_hijack = steps_h ? loss_h_sum / double(steps_h) : 0.0;
    st.acc_orig = plain_accuracy(model, orig_test_eval);
    if (attack) {
      HijackArtifact probe;
      probe.sol = sol;
      probe.noise = noise;
      st.acc_hijack = hijack_accuracy(model, probe, mode, hijack_test_eval);
    }
    bundle.history.push_back(st);
  }

  bundle.model = std::move(model);
  bundle.mode = mode;
  const std::string digest = train_config_digest(cfg, orig, hijack ? &*hijack : nullptr);
  bundle.run_id = "run-" + digest.substr(0, 16);
  if (attack) {
    HijackArtifact art;
    art.sol = std::move(sol);
    art.noise = std::move(noise);
    art.original_spec = orig.spec;
    art.hijack_spec = hijack->spec;
    art.run_id = bundle.run_id;
    art.seed = cfg.seed;
    art.config_hash = digest;
    art.sol_trained = cfg.use_sol;
    art.noise_trained = cfg.use_noise;
    bundle.artifact = std::move(art);
  }
  return bundle;
}

}  // namespace

TrainedBundle train_benign(const DatasetHandle& data, const TrainConfig& cfg,
                           const std::string& data_root) {
  return run_training(data, nullptr, cfg, data_root);
}

TrainedBundle dual_loop_train(const DatasetHandle& orig, const DatasetHandle& hijack,
                              const TrainConfig& cfg, const std::string& data_root) {
  CAMH_CHECK_ARG(orig.spec.num_classes >= 2 && hijack.spec.num_classes >= 2,
                 "dual_loop_train: both tasks need >= 2 classes");
  return run_training(orig, &hijack, cfg, data_root);
}

double hijack_accuracy(const ClassifierModel& model, const HijackArtifact& artifact,
                       HijackMode mode, const InMemoryDataset& hijack_test) {
  CAMH_CHECK_ARG(mode != HijackMode::none, "hijack_accuracy: bundle has no hijack mode");
  if (hijack_test.size() == 0) return 0.0;
  const int64_t item = hijack_test.images.numel() / hijack_test.size();
  const int c1 = model.spec().num_classes;
  int64_t correct = 0;
  const int64_t batch = 256;
  for (int64_t begin = 0; begin < hijack_test.size(); begin += batch) {
    const int64_t b = std::min(batch, hijack_test.size() - begin);
    Tensor x({b, hijack_test.images.dim(1), hijack_test.images.dim(2), hijack_test.images.dim(3)});
    std::memcpy(x.data(), hijack_test.images.data() + begin * item, size_t(b * item) * 4);
    Tensor noised = apply_noise(x, artifact.noise);
    const Tensor logits = model.forward_logits(noised);
    std::vector<int> pred;
    if (mode == HijackMode::sol) {
      pred = predict_classes(sol_forward(artifact.sol, logits));
      for (int64_t i = 0; i < b; ++i) {
        if (pred[size_t(i)] == hijack_test.labels[size_t(begin + i)]) ++correct;
      }
    } else {
      pred = predict_classes(logits);
      for (int64_t i = 0; i < b; ++i) {
        if (pred[size_t(i)] == hijack_test.labels[size_t(begin + i)] % c1) ++correct;
      }
    }
  }
  return double(correct) / double(hijack_test.size());
}

void write_history_csv(const TrainedBundle& bundle, const std::string& path) {
  std::string out = "epoch,loss_orig,loss_hijack,acc_orig,acc_hijack\n";
  for (size_t e = 0; e < bundle.history.size(); ++e) {
    const auto& st = bundle.history[e];
    out += std::to_string(e) + "," + fmt_real(st.loss_orig) + "," + fmt_real(st.loss_hijack) +
           "," + fmt_real(st.acc_orig) + "," + fmt_real(st.acc_hijack) + "\n";
  }
  write_file(path, out);
}

}  // namespace camh
