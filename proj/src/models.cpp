#include "camh/models.hpp"

#include <cstring>

#include "camh/io_util.hpp"
#include "json.hpp"

using nlohmann::json;

namespace camh {

// ---------------------------------------------------------------- SOL

SyncOptLayer SyncOptLayer::init(int c1, int c2, uint64_t seed) {
  CAMH_CHECK_ARG(c1 >= 1 && c2 >= 1, "SyncOptLayer: dims must be >= 1");
  SyncOptLayer sol;
  sol.in_dim = c1;
  sol.out_dim = c2;
  sol.weight = Tensor({c1, c2});
  sol.bias = Tensor({c2});
  Rng rng = Rng(seed).fork("sol");
  sol.weight.init_normal(rng, 0.0f, 0.01f);  // small-variance init, zero bias
  sol.dweight = Tensor(sol.weight.shape());
  sol.dbias = Tensor(sol.bias.shape());
  return sol;
}

SyncOptLayer SyncOptLayer::fold(int c1, int c2) {
  SyncOptLayer sol;
  sol.in_dim = c1;
  sol.out_dim = c2;
  sol.weight = Tensor({c1, c2});
  sol.bias = Tensor({c2});
  for (int j = 0; j < c2; ++j) sol.weight.at2(j % c1, j) = 1.0f;
  sol.dweight = Tensor(sol.weight.shape());
  sol.dbias = Tensor(sol.bias.shape());
  return sol;
}

std::vector<nn::ParamRef> SyncOptLayer::params() {
  return {{"sol.weight", &weight, &dweight}, {"sol.bias", &bias, &dbias}};
}

void SyncOptLayer::zero_grads() {
  dweight.fill(0.0f);
  dbias.fill(0.0f);
}

Tensor sol_forward(const SyncOptLayer& sol, const Tensor& logits) {
  CAMH_CHECK_ARG(logits.ndim() == 2 && logits.dim(1) == sol.in_dim,
                 "sol_forward: logits dimension mismatch");
  const int64_t b = logits.dim(0);
  Tensor z({b, int64_t(sol.out_dim)});
  for (int64_t n = 0; n < b; ++n) {
    for (int j = 0; j < sol.out_dim; ++j) {
      double acc = sol.bias[j];
      for (int i = 0; i < sol.in_dim; ++i) {
        acc += double(logits.at2(n, i)) * sol.weight.at2(i, j);
      }
      z.at2(n, j) = float(acc);
    }
  }
  return z;
}

Tensor sol_backward(SyncOptLayer& sol, const Tensor& logits, const Tensor& dz) {
  CAMH_CHECK_ARG(dz.ndim() == 2 && dz.dim(1) == sol.out_dim, "sol_backward: dz mismatch");
  const int64_t b = logits.dim(0);
  Tensor dlogits({b, int64_t(sol.in_dim)});
  for (int64_t n = 0; n < b; ++n) {
    for (int j = 0; j < sol.out_dim; ++j) {
      const float g = dz.at2(n, j);
      sol.dbias[j] += g;
      for (int i = 0; i < sol.in_dim; ++i) {
        sol.dweight.at2(i, j) += logits.at2(n, i) * g;
        dlogits.at2(n, i) += sol.weight.at2(i, j) * g;
      }
    }
  }
  return dlogits;
}

// ---------------------------------------------------------------- architectures

namespace {

std::unique_ptr<nn::Sequential> build_smallcnn(const TaskSpec& spec, float dropout, Rng& rng) {
  auto net = std::make_unique<nn::Sequential>();
  const int c = spec.input_shape.c;
  auto pool_out = [](int v) { return (v - 2) / 2 + 1; };
  const int h2 = pool_out(pool_out(spec.input_shape.h));
  const int w2 = pool_out(pool_out(spec.input_shape.w));
  net->add("conv1", std::make_unique<nn::Conv2d>(c, 16, 3, 1, 1, rng));
  net->add("relu1", std::make_unique<nn::Relu>());
  net->add("pool1", std::make_unique<nn::MaxPool2d>(2, 2));
  net->add("conv2", std::make_unique<nn::Conv2d>(16, 32, 3, 1, 1, rng));
  net->add("relu2", std::make_unique<nn::Relu>());
  net->add("pool2", std::make_unique<nn::MaxPool2d>(2, 2));
  net->add("flatten", std::make_unique<nn::Flatten>());
  net->add("fc1", std::make_unique<nn::Dense>(32 * h2 * w2, 128, rng));
  net->add("relu3", std::make_unique<nn::Relu>());
  net->add("drop", std::make_unique<nn::Dropout>(dropout, rng.fork("dropout").next_u64()));
  net->add("fc2", std::make_unique<nn::Dense>(128, spec.num_classes, rng));
  return net;
}

std::unique_ptr<nn::Sequential> basic_block(int in_ch, int out_ch, int stride, Rng& rng) {
  auto main = std::make_unique<nn::Sequential>();
  main->add("conv1", std::make_unique<nn::Conv2d>(in_ch, out_ch, 3, stride, 1, rng));
  main->add("bn1", std::make_unique<nn::BatchNorm2d>(out_ch));
  main->add("relu", std::make_unique<nn::Relu>());
  main->add("conv2", std::make_unique<nn::Conv2d>(out_ch, out_ch, 3, 1, 1, rng));
  main->add("bn2", std::make_unique<nn::BatchNorm2d>(out_ch));
  return main;
}

std::unique_ptr<nn::Sequential> build_resnet(const TaskSpec& spec, float dropout, Rng& rng,
                                             const std::vector<int>& blocks) {
  // CIFAR-style stem (3x3 stride 1, no initial pool) for 32^2-class inputs.
  auto net = std::make_unique<nn::Sequential>();
  net->add("stem_conv", std::make_unique<nn::Conv2d>(spec.input_shape.c, 64, 3, 1, 1, rng));
  net->add("stem_bn", std::make_unique<nn::BatchNorm2d>(64));
  net->add("stem_relu", std::make_unique<nn::Relu>());
  int in_ch = 64;
  const int widths[4] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage) {
    const int out_ch = widths[stage];
    for (int blk = 0; blk < blocks[size_t(stage)]; ++blk) {
      const int stride = (blk == 0 && stage > 0) ? 2 : 1;
      auto main = basic_block(in_ch, out_ch, stride, rng);
      std::unique_ptr<nn::Sequential> shortcut;
      if (stride != 1 || in_ch != out_ch) {
        shortcut = std::make_unique<nn::Sequential>();
        shortcut->add("conv", std::make_unique<nn::Conv2d>(in_ch, out_ch, 1, stride, 0, rng));
        shortcut->add("bn", std::make_unique<nn::BatchNorm2d>(out_ch));
      }
      net->add("stage" + std::to_string(stage) + "_block" + std::to_string(blk),
               std::make_unique<nn::Residual>(std::move(main), std::move(shortcut)));
      in_ch = out_ch;
    }
  }
  net->add("gap", std::make_unique<nn::GlobalAvgPool>());
  net->add("drop", std::make_unique<nn::Dropout>(dropout, rng.fork("dropout").next_u64()));
  net->add("fc", std::make_unique<nn::Dense>(512, spec.num_classes, rng));
  return net;
}

}  // namespace

ClassifierModel ClassifierModel::build(const std::string& architecture_id, const TaskSpec& spec,
                                       float dropout_rate, uint64_t init_seed) {
  spec.validate();
  CAMH_CHECK_ARG(dropout_rate >= 0.0f && dropout_rate < 1.0f,
                 "build_model: dropout_rate must be in [0, 1)");
  ClassifierModel m;
  m.architecture_id_ = architecture_id;
  m.spec_ = spec;
  m.dropout_rate_ = dropout_rate;
  m.init_seed_ = init_seed;
  Rng rng = Rng(init_seed).fork("model");
  if (architecture_id == "smallcnn") {
    m.net_ = build_smallcnn(spec, dropout_rate, rng);
  } else if (architecture_id == "resnet18") {
    m.net_ = build_resnet(spec, dropout_rate, rng, {2, 2, 2, 2});
  } else if (architecture_id == "resnet34") {
    m.net_ = build_resnet(spec, dropout_rate, rng, {3, 4, 6, 3});
  } else {
    throw ArgumentError("unknown architecture: " + architecture_id);
  }
  return m;
}

Tensor ClassifierModel::forward_logits(const Tensor& images, nn::Mode mode) {
  CAMH_CHECK_ARG(net_ != nullptr, "model not built");
  CAMH_CHECK_ARG(images.ndim() == 4 && int(images.dim(1)) == spec_.input_shape.c &&
                     int(images.dim(2)) == spec_.input_shape.h &&
                     int(images.dim(3)) == spec_.input_shape.w,
                 "forward_logits: image shape does not match model input " +
                     spec_.input_shape.str());
  if (images.dim(0) == 0) return Tensor({0, int64_t(spec_.num_classes)});
  return net_->forward(images, mode);
}

Tensor ClassifierModel::forward_logits(const Tensor& images) const {
  // kEval writes no member state; see the Layer contract.
  return const_cast<ClassifierModel*>(this)->forward_logits(images, nn::Mode::kEval);
}

Tensor ClassifierModel::backward(const Tensor& dlogits) {
  CAMH_CHECK_ARG(net_ != nullptr, "model not built");
  return net_->backward(dlogits);
}

std::vector<nn::ParamRef> ClassifierModel::params() {
  std::vector<nn::ParamRef> out;
  if (net_) net_->collect_params("", out);
  return out;
}

std::vector<nn::ParamRef> ClassifierModel::buffers() {
  std::vector<nn::ParamRef> out;
  if (net_) net_->collect_buffers("", out);
  return out;
}

void ClassifierModel::zero_grads() {
  if (net_) net_->zero_grads();
}

Tensor composed_forward(const ClassifierModel& model, const SyncOptLayer& sol,
                        const Tensor& images) {
  return sol_forward(sol, model.forward_logits(images));
}

std::vector<int> predict_classes(const Tensor& logits) {
  const int64_t b = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(b), 0);
  for (int64_t n = 0; n < b; ++n) {
    out[size_t(n)] = int(argmax_lowest(logits.data() + n * c, c));
  }
  return out;
}

// ---------------------------------------------------------------- archives

namespace {

json spec_to_json(const TaskSpec& s) {
  return json{{"name", s.name},
              {"num_classes", s.num_classes},
              {"input_shape", {s.input_shape.c, s.input_shape.h, s.input_shape.w}},
              {"train_count", s.train_count},
              {"test_count", s.test_count}};
}

TaskSpec spec_from_json(const json& j) {
  TaskSpec s;
  s.name = j.at("name").get<std::string>();
  s.num_classes = j.at("num_classes").get<int>();
  const auto sh = j.at("input_shape");
  s.input_shape = {sh.at(0).get<int>(), sh.at(1).get<int>(), sh.at(2).get<int>()};
  s.train_count = j.at("train_count").get<int64_t>();
  s.test_count = j.at("test_count").get<int64_t>();
  return s;
}

struct TensorEntry {
  std::string name;
  const Tensor* t;
};

// Archive layout: magic(8) | u32 header_len | header json | f32le payloads.
std::string pack_archive(const char magic[8], json header,
                         const std::vector<TensorEntry>& tensors) {
  json tensor_meta = json::array();
  std::string payload;
  for (const auto& e : tensors) {
    const size_t bytes = size_t(e.t->numel()) * 4;
    json meta{{"name", e.name},
              {"shape", e.t->shape()},
              {"offset", payload.size()},
              {"bytes", bytes},
              {"sha256", sha256_hex(e.t->data(), bytes)}};
    tensor_meta.push_back(std::move(meta));
    payload.append(reinterpret_cast<const char*>(e.t->data()), bytes);
  }
  header["tensors"] = std::move(tensor_meta);
  const std::string head = header.dump();
  std::string out(magic, 8);
  const uint32_t hl = uint32_t(head.size());
  out.append(reinterpret_cast<const char*>(&hl), 4);
  out += head;
  out += payload;
  return out;
}

struct UnpackedArchive {
  json header;
  std::string payload;

  Tensor tensor(const std::string& name) const {
    for (const auto& meta : header.at("tensors")) {
      if (meta.at("name").get<std::string>() != name) continue;
      const size_t off = meta.at("offset").get<size_t>();
      const size_t bytes = meta.at("bytes").get<size_t>();
      if (off + bytes > payload.size()) throw SerializationError("archive: truncated payload");
      if (sha256_hex(payload.data() + off, bytes) != meta.at("sha256").get<std::string>()) {
        throw SerializationError("archive: checksum mismatch for tensor " + name);
      }
      std::vector<int64_t> shape = meta.at("shape").get<std::vector<int64_t>>();
      Tensor t(shape);
      if (size_t(t.numel()) * 4 != bytes) throw SerializationError("archive: shape/bytes mismatch");
      std::memcpy(t.data(), payload.data() + off, bytes);
      return t;
    }
    throw SerializationError("archive: tensor not found: " + name);
  }
};

UnpackedArchive unpack_archive(const char magic[8], const std::string& path) {
  const std::string s = read_file(path);
  if (s.size() < 12 || s.compare(0, 8, std::string(magic, 8)) != 0) {
    throw SerializationError("not a " + std::string(magic, 8) + " archive: " + path);
  }
  uint32_t hl;
  std::memcpy(&hl, s.data() + 8, 4);
  if (s.size() < 12 + size_t(hl)) throw SerializationError("truncated archive header: " + path);
  UnpackedArchive a;
  try {
    a.header = json::parse(s.substr(12, hl));
  } catch (const json::exception& e) {
    throw SerializationError("corrupt archive header: " + path + ": " + e.what());
  }
  a.payload = s.substr(12 + hl);
  // Whole-file sanity: every tensor payload must be fully present.
  for (const auto& meta : a.header.at("tensors")) {
    const size_t off = meta.at("offset").get<size_t>();
    const size_t bytes = meta.at("bytes").get<size_t>();
    if (off + bytes > a.payload.size()) {
      throw SerializationError("truncated archive payload: " + path);
    }
  }
  return a;
}

constexpr char kArtifactMagic[8] = {'C', 'A', 'M', 'H', 'A', 'R', 'T', '1'};
constexpr char kCkptMagic[8] = {'C', 'A', 'M', 'H', 'C', 'K', 'P', '1'};
constexpr int kFormatVersion = 1;

}  // namespace

void HijackArtifact::validate() const {
  CAMH_CHECK_ARG(sol.in_dim == original_spec.num_classes,
                 "HijackArtifact: sol.in_dim must equal original_spec.num_classes");
  CAMH_CHECK_ARG(sol.out_dim == hijack_spec.num_classes,
                 "HijackArtifact: sol.out_dim must equal hijack_spec.num_classes");
  CAMH_CHECK_ARG(sol.weight.ndim() == 2 && sol.weight.dim(0) == sol.in_dim &&
                     sol.weight.dim(1) == sol.out_dim,
                 "HijackArtifact: sol weight shape mismatch");
  noise.validate();
  CAMH_CHECK_ARG(int(noise.delta.dim(0)) == original_spec.input_shape.c &&
                     int(noise.delta.dim(1)) == original_spec.input_shape.h &&
                     int(noise.delta.dim(2)) == original_spec.input_shape.w,
                 "HijackArtifact: noise shape must equal original input shape");
}

void save_artifact(const HijackArtifact& artifact, const std::string& path) {
  artifact.validate();
  json header{{"format_version", kFormatVersion},
              {"kind", "camh-hijack-artifact"},
              {"sol", {{"in_dim", artifact.sol.in_dim},
                       {"out_dim", artifact.sol.out_dim},
                       {"trained", artifact.sol_trained}}},
              {"noise", {{"linf_bound", artifact.noise.linf_bound},
                         {"trained", artifact.noise_trained}}},
              {"original_spec", spec_to_json(artifact.original_spec)},
              {"hijack_spec", spec_to_json(artifact.hijack_spec)},
              {"provenance", {{"run_id", artifact.run_id},
                              {"seed", artifact.seed},
                              {"config_hash", artifact.config_hash}}}};
  const std::string bytes = pack_archive(
      kArtifactMagic, std::move(header),
      {{"sol_w", &artifact.sol.weight}, {"sol_b", &artifact.sol.bias}, {"delta", &artifact.noise.delta}});
  write_file_durable(path, bytes);
}

HijackArtifact load_artifact(const std::string& path) {
  const auto a = unpack_archive(kArtifactMagic, path);
  try {
    if (a.header.at("format_version").get<int>() != kFormatVersion) {
      throw SerializationError("artifact version mismatch: " + path);
    }
    HijackArtifact art;
    art.original_spec = spec_from_json(a.header.at("original_spec"));
    art.hijack_spec = spec_from_json(a.header.at("hijack_spec"));
    art.sol.in_dim = a.header.at("sol").at("in_dim").get<int>();
    art.sol.out_dim = a.header.at("sol").at("out_dim").get<int>();
    art.sol_trained = a.header.at("sol").at("trained").get<bool>();
    art.sol.weight = a.tensor("sol_w");
    art.sol.bias = a.tensor("sol_b");
    art.sol.dweight = Tensor(art.sol.weight.shape());
    art.sol.dbias = Tensor(art.sol.bias.shape());
    art.noise.delta = a.tensor("delta");
    art.noise.linf_bound = a.header.at("noise").at("linf_bound").get<float>();
    art.noise_trained = a.header.at("noise").at("trained").get<bool>();
    art.run_id = a.header.at("provenance").at("run_id").get<std::string>();
    art.seed = a.header.at("provenance").at("seed").get<uint64_t>();
    art.config_hash = a.header.at("provenance").at("config_hash").get<std::string>();
    art.validate();
    return art;
  } catch (const json::exception& e) {
    throw SerializationError("corrupt artifact header: " + path + ": " + e.what());
  }
}

void ClassifierModel::save(const std::string& path) const {
  CAMH_CHECK_ARG(net_ != nullptr, "save: model not built");
  auto* self = const_cast<ClassifierModel*>(this);
  std::vector<TensorEntry> entries;
  for (const auto& p : self->params()) entries.push_back({p.name, p.value});
  for (const auto& p : self->buffers()) entries.push_back({p.name, p.value});
  json header{{"format_version", kFormatVersion},
              {"kind", "camh-checkpoint"},
              {"arch", architecture_id_},
              {"spec", spec_to_json(spec_)},
              {"dropout_rate", dropout_rate_},
              {"init_seed", init_seed_}};
  write_file_durable(path, pack_archive(kCkptMagic, std::move(header), entries));
}

ClassifierModel ClassifierModel::load(const std::string& path) {
  const auto a = unpack_archive(kCkptMagic, path);
  try {
    if (a.header.at("format_version").get<int>() != kFormatVersion) {
      throw SerializationError("checkpoint version mismatch: " + path);
    }
    ClassifierModel m = build(a.header.at("arch").get<std::string>(),
                              spec_from_json(a.header.at("spec")),
                              a.header.at("dropout_rate").get<float>(),
                              a.header.at("init_seed").get<uint64_t>());
    auto fill = [&](std::vector<nn::ParamRef> refs) {
      for (auto& r : refs) {
        Tensor t = a.tensor(r.name);
        if (!(t.shape() == r.value->shape())) {
          throw SerializationError("checkpoint tensor shape mismatch: " + r.name);
        }
        *r.value = std::move(t);
      }
    };
    fill(m.params());
    fill(m.buffers());
    return m;
  } catch (const json::exception& e) {
    throw SerializationError("corrupt checkpoint header: " + path + ": " + e.what());
  }
}

}  // namespace camh
