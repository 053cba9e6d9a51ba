#include "camh/serve.hpp"

#include <chrono>
#include <cstring>
#include <thread>

#include "camh/io_util.hpp"
#include "httplib.h"
#include "json.hpp"

using nlohmann::json;

namespace camh {

std::string encode_logits_request(const Tensor& image_chw) {
  CAMH_CHECK_ARG(image_chw.ndim() == 3, "encode_logits_request: expected (C,H,W)");
  const json j{{"shape", {image_chw.dim(0), image_chw.dim(1), image_chw.dim(2)}},
               {"dtype", "f32le"},
               {"data", base64_encode(image_chw.data(), size_t(image_chw.numel()) * 4)}};
  return j.dump();
}

std::vector<float> parse_logits_response(const std::string& body, std::string* model_version) {
  const json j = json::parse(body);
  std::vector<float> logits;
  for (const auto& v : j.at("logits")) logits.push_back(float(v.get<double>()));
  if (model_version) *model_version = j.at("model_version").get<std::string>();
  return logits;
}

struct VictimService::Impl {
  ClassifierModel model;
  std::string version;
  httplib::Server server;
  std::thread thread;
  int port = 0;

  Impl(ClassifierModel m, const ServeOptions& opts) : model(std::move(m)) {
    if (!opts.model_version.empty()) {
      version = opts.model_version;
    } else {
      std::string acc;
      for (const auto& p : model.params()) {
        acc += sha256_hex(p.value->data(), size_t(p.value->numel()) * 4);
      }
      version = model.architecture_id() + "-" + sha256_hex(acc).substr(0, 12);
    }

    server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      const auto& s = model.spec();
      res.set_content(json{{"status", "ok"},
                           {"input_shape", {s.input_shape.c, s.input_shape.h, s.input_shape.w}},
                           {"num_classes", s.num_classes}}
                          .dump(),
                      "application/json");
    });

    server.Post("/v1/logits", [this](const httplib::Request& req, httplib::Response& res) {
      json j;
      try {
        j = json::parse(req.body);
      } catch (const json::exception&) {
        res.status = 400;
        res.set_content(json{{"error", "invalid JSON payload"}}.dump(), "application/json");
        return;
      }
      Shape3 shape;
      std::vector<uint8_t> bytes;
      try {
        const auto& sh = j.at("shape");
        CAMH_CHECK_ARG(sh.is_array() && sh.size() == 3, "shape must be [C,H,W]");
        shape = {sh.at(0).get<int>(), sh.at(1).get<int>(), sh.at(2).get<int>()};
        CAMH_CHECK_ARG(j.at("dtype").get<std::string>() == "f32le", "dtype must be f32le");
        bytes = base64_decode(j.at("data").get<std::string>());
        CAMH_CHECK_ARG(int64_t(bytes.size()) == shape.numel() * 4,
                       "payload size does not match shape");
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", std::string("malformed request: ") + e.what()}}.dump(),
                        "application/json");
        return;
      }
      const auto& expect = model.spec().input_shape;
      if (!(shape == expect)) {
        res.status = 422;
        res.set_content(json{{"error", "input shape mismatch"},
                             {"expected_shape", {expect.c, expect.h, expect.w}}}
                            .dump(),
                        "application/json");
        return;
      }
      Tensor x({1, shape.c, shape.h, shape.w});
      std::memcpy(x.data(), bytes.data(), bytes.size());
      // evaluation-mode forward: pure, safe under the server's thread pool
      const Tensor logits = static_cast<const ClassifierModel&>(model).forward_logits(x);
      json out;
      out["logits"] = json::array();
      for (int64_t i = 0; i < logits.numel(); ++i) out["logits"].push_back(double(logits[i]));
      out["model_version"] = version;
      res.set_content(out.dump(), "application/json");
    });
  }
};

VictimService::VictimService(ClassifierModel model, const ServeOptions& opts)
    : impl_(std::make_unique<Impl>(std::move(model), opts)) {
  if (opts.port == 0) {
    impl_->port = impl_->server.bind_to_any_port(opts.host);
  } else {
    if (!impl_->server.bind_to_port(opts.host, opts.port)) {
      throw IoError("serve: cannot bind " + opts.host + ":" + std::to_string(opts.port));
    }
    impl_->port = opts.port;
  }
  if (impl_->port <= 0) throw IoError("serve: cannot bind " + opts.host);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

VictimService::~VictimService() { stop(); }

int VictimService::port() const { return impl_->port; }
const std::string& VictimService::model_version() const { return impl_->version; }

void VictimService::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
  if (impl_ && impl_->thread.joinable()) impl_->thread.join();
}

void VictimService::wait() {
  if (impl_ && impl_->thread.joinable()) impl_->thread.join();
}

int hijack_predict(const HijackClientConfig& cfg, const Tensor& image_chw) {
  cfg.artifact.validate();
  CAMH_CHECK_ARG(image_chw.ndim() == 3, "hijack_predict: expected a (C,H,W) image");

  // noise applied locally, before anything touches the wire
  Tensor batch({1, image_chw.dim(0), image_chw.dim(1), image_chw.dim(2)});
  std::memcpy(batch.data(), image_chw.data(), size_t(image_chw.numel()) * 4);
  const Tensor noised = apply_noise(batch, cfg.artifact.noise);
  Tensor img = noised.reshaped({image_chw.dim(0), image_chw.dim(1), image_chw.dim(2)});
  const std::string body = encode_logits_request(img);

  httplib::Client client(cfg.endpoint);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(30, 0);

  std::string last_error;
  for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(
          std::chrono::milliseconds(cfg.backoff_ms << (attempt - 1)));
    }
    auto res = client.Post("/v1/logits", body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;  // transport-level failure: retry
    }
    if (res->status >= 500) {
      last_error = "server error " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw IncompatibilityError("hijack_predict: service rejected the request (" +
                                 std::to_string(res->status) + "): " + res->body);
    }
    std::vector<float> logits;
    try {
      logits = parse_logits_response(res->body, nullptr);
    } catch (const json::exception& e) {
      throw IncompatibilityError(std::string("hijack_predict: malformed response: ") + e.what());
    }
    if (int(logits.size()) != cfg.artifact.sol.in_dim) {
      throw IncompatibilityError(
          "hijack_predict: response has " + std::to_string(logits.size()) +
          " logits but the artifact expects " + std::to_string(cfg.artifact.sol.in_dim));
    }
    Tensor y({1, int64_t(logits.size())});
    std::memcpy(y.data(), logits.data(), logits.size() * 4);
    const Tensor z = sol_forward(cfg.artifact.sol, y);
    return int(argmax_lowest(z.data(), z.dim(1)));
  }
  throw TransportError("hijack_predict: request failed after " +
                       std::to_string(cfg.retries + 1) + " attempts: " + last_error);
}

}  // namespace camh
