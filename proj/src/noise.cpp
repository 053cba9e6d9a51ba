#include "camh/noise.hpp"

#include <cmath>
#include <cstring>

#include "camh/models.hpp"
#include "camh/rng.hpp"

namespace camh {

Tensor apply_noise(const Tensor& images, const NoisePattern& noise) {
  noise.validate();
  CAMH_CHECK_ARG(images.ndim() == 4, "apply_noise: expected (B,C,H,W)");
  CAMH_CHECK_ARG(images.dim(1) == noise.delta.dim(0) && images.dim(2) == noise.delta.dim(1) &&
                     images.dim(3) == noise.delta.dim(2),
                 "apply_noise: image/noise shape mismatch");
  const int64_t b = images.dim(0), item = noise.delta.numel();
  Tensor out(images.shape());
  for (int64_t n = 0; n < b; ++n) {
    const float* x = images.data() + n * item;
    float* o = out.data() + n * item;
    for (int64_t i = 0; i < item; ++i) {
      const float v = x[i] + noise.delta[i];
      o[i] = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    }
  }
  return out;
}

NoiseStats noise_stats(const NoisePattern& noise) {
  noise.validate();
  NoiseStats s;
  s.linf = noise.delta.abs_max();
  s.l2 = std::sqrt(noise.delta.sq_sum());
  s.mean = noise.delta.numel() > 0 ? noise.delta.sum() / double(noise.delta.numel()) : 0.0;
  return s;
}

namespace {

// dlogits = dz * W^T, without touching the SOL's gradient buffers.
Tensor sol_backward_data(const SyncOptLayer& sol, const Tensor& dz) {
  const int64_t b = dz.dim(0);
  Tensor dlogits({b, int64_t(sol.in_dim)});
  for (int64_t n = 0; n < b; ++n) {
    for (int j = 0; j < sol.out_dim; ++j) {
      const float g = dz.at2(n, j);
      for (int i = 0; i < sol.in_dim; ++i) {
        dlogits.at2(n, i) += sol.weight.at2(i, j) * g;
      }
    }
  }
  return dlogits;
}

}  // namespace

Tensor noise_objective_grad(ClassifierModel& model, const SyncOptLayer* sol,
                            const Tensor& hijack_images, const std::vector<int>& hijack_labels,
                            const NoisePattern& noise, double* out_objective) {
  const NoisePattern& np = noise;
  Tensor noised = apply_noise(hijack_images, np);
  Tensor logits = model.forward_logits(noised, nn::Mode::kFrozenGrad);
  Tensor z = sol ? sol_forward(*sol, logits) : logits;
  auto loss = nn::softmax_cross_entropy(z, hijack_labels);
  if (out_objective) *out_objective = loss.loss;
  Tensor dlogits = sol ? sol_backward_data(*sol, loss.dlogits) : std::move(loss.dlogits);
  Tensor dinput = model.backward(dlogits);
  model.zero_grads();

  // Clamp subgradient: pass where the pre-clamp value stays inside [0,1]
  // (inclusive, so a zero delta on saturated-at-0 pixels can still move).
  const int64_t b = hijack_images.dim(0), item = np.delta.numel();
  Tensor grad(np.delta.shape());
  for (int64_t n = 0; n < b; ++n) {
    const float* x = hijack_images.data() + n * item;
    const float* di = dinput.data() + n * item;
    for (int64_t i = 0; i < item; ++i) {
      const float u = x[i] + np.delta[i];
      if (u >= 0.0f && u <= 1.0f) grad[i] += di[i];
    }
  }
  return grad;
}

namespace {

struct ProbeSet {
  Tensor dm_images;
  std::vector<int> dm_labels;
  Tensor dh_images;
  std::vector<int> dh_labels;
};

Tensor gather_images(const InMemoryDataset& ds, int64_t begin, int64_t count) {
  const int64_t item = ds.images.numel() / std::max<int64_t>(ds.size(), 1);
  Tensor out({count, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
  std::memcpy(out.data(), ds.images.data() + begin * item, size_t(count * item) * 4);
  return out;
}

double probe_objective(ClassifierModel& model, const SyncOptLayer& sol, const ProbeSet& probe,
                       double term1_weighted, const NoisePattern& np) {
  Tensor noised = apply_noise(probe.dh_images, np);
  const Tensor z = sol_forward(sol, model.forward_logits(noised, nn::Mode::kEval));
  return term1_weighted + nn::softmax_cross_entropy_loss(z, probe.dh_labels);
}

}  // namespace

NoiseOptResult optimize_noise(ClassifierModel& model, const SyncOptLayer& sol,
                              const InMemoryDataset& dm, const InMemoryDataset& dh,
                              const NoiseOptConfig& cfg) {
  cfg.validate();
  CAMH_CHECK_ARG(sol.in_dim == model.spec().num_classes,
                 "optimize_noise: sol/model dimension mismatch");
  CAMH_CHECK_ARG(dh.size() > 0, "optimize_noise: empty hijacking dataset");
  CAMH_CHECK_ARG(int(dh.images.dim(1)) == model.spec().input_shape.c &&
                     int(dh.images.dim(2)) == model.spec().input_shape.h &&
                     int(dh.images.dim(3)) == model.spec().input_shape.w,
                 "optimize_noise: hijack data not adapted to the model input shape");

  const Shape3 shape = model.spec().input_shape;
  NoisePattern np;
  np.delta = Tensor({shape.c, shape.h, shape.w});  // zero init
  np.linf_bound = cfg.linf_bound;

  // Held probe batches: a fixed prefix of both datasets.
  ProbeSet probe;
  const int64_t probe_h = std::min<int64_t>(int64_t(cfg.probe_batches) * cfg.batch_size, dh.size());
  probe.dh_images = gather_images(dh, 0, probe_h);
  probe.dh_labels.assign(dh.labels.begin(), dh.labels.begin() + probe_h);
  double term1 = 0.0;
  if (cfg.pairing == NoiseOptConfig::Pairing::paired && dm.size() > 0) {
    const int64_t probe_m = std::min<int64_t>(int64_t(cfg.probe_batches) * cfg.batch_size, dm.size());
    probe.dm_images = gather_images(dm, 0, probe_m);
    probe.dm_labels.assign(dm.labels.begin(), dm.labels.begin() + probe_m);
    // First objective term; constant in delta, logged but never differentiated.
    term1 = cfg.balance_weight *
            nn::softmax_cross_entropy_loss(
                model.forward_logits(probe.dm_images, nn::Mode::kEval), probe.dm_labels);
  }

  NoiseOptResult res;
  res.noise = np;
  const double initial = probe_objective(model, sol, probe, term1, np);
  res.objective_trace.push_back(initial);
  res.initial_objective = initial;
  double best_obj = initial;
  Tensor best_delta = np.delta;

  Rng base(cfg.seed);
  const int64_t item = np.delta.numel();
  for (int step = 1; step <= cfg.steps; ++step) {
    Rng rng = base.fork("noise_batch", uint64_t(step));
    const int64_t b = std::min<int64_t>(cfg.batch_size, dh.size());
    Tensor batch({b, shape.c, shape.h, shape.w});
    std::vector<int> labels(static_cast<size_t>(b), 0);
    const int64_t ditem = dh.images.numel() / dh.size();
    for (int64_t i = 0; i < b; ++i) {
      const int64_t j = rng.uniform_int(dh.size());
      std::memcpy(batch.data() + i * ditem, dh.images.data() + j * ditem, size_t(ditem) * 4);
      labels[size_t(i)] = dh.labels[size_t(j)];
    }
    double batch_obj = 0.0;
    Tensor grad = noise_objective_grad(model, &sol, batch, labels, np, &batch_obj);
    if (!std::isfinite(batch_obj) || !grad.all_finite()) {
      throw DivergenceError("optimize_noise: non-finite objective", step);
    }
    if (cfg.sign_grad) {
      for (int64_t i = 0; i < item; ++i) {
        const float g = grad[i];
        np.delta[i] -= float(cfg.step_size) * (g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f));
      }
    } else {
      for (int64_t i = 0; i < item; ++i) np.delta[i] -= float(cfg.step_size) * grad[i];
    }
    if (np.linf_bound > 0.0f) {
      for (int64_t i = 0; i < item; ++i) {
        np.delta[i] = std::min(std::max(np.delta[i], -np.linf_bound), np.linf_bound);
      }
    }
    const double obj = probe_objective(model, sol, probe, term1, np);
    res.objective_trace.push_back(obj);
    if (obj < best_obj) {
      best_obj = obj;
      best_delta = np.delta;
    }
  }

  res.noise.delta = std::move(best_delta);
  res.final_objective = best_obj;
  return res;
}

NoiseOptResult optimize_noise(ClassifierModel& model, const SyncOptLayer& sol,
                              const DatasetHandle& dm, const DatasetHandle& dh,
                              const NoiseOptConfig& cfg, const std::string& data_root) {
  const InMemoryDataset dm_data = load_split(dm, Split::train, data_root);
  InMemoryDataset dh_data = load_split(dh, Split::train, data_root);
  if (!(Shape3{int(dh_data.images.dim(1)), int(dh_data.images.dim(2)),
               int(dh_data.images.dim(3))} == model.spec().input_shape)) {
    dh_data.images = adapt_images(dh_data.images, model.spec().input_shape);
  }
  return optimize_noise(model, sol, dm_data, dh_data, cfg);
}

}  // namespace camh
