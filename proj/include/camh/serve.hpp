#ifndef CAMH_SERVE_HPP_
#define CAMH_SERVE_HPP_

#include <memory>
#include <string>

#include "camh/models.hpp"

namespace camh {

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 = pick a free port
  std::string model_version;  // default: parameter digest
};

// Victim service: exposes only the C1 logits of the released model over
// POST /v1/logits and GET /v1/health. The SOL and the noise never exist in
// this process; it is constructed from a ClassifierModel alone.
class VictimService {
 public:
  VictimService(ClassifierModel model, const ServeOptions& opts);
  ~VictimService();
  VictimService(const VictimService&) = delete;
  VictimService& operator=(const VictimService&) = delete;

  int port() const;
  const std::string& model_version() const;
  void stop();
  void wait();  // blocks until stop()

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct HijackClientConfig {
  std::string endpoint;  // http://host:port
  HijackArtifact artifact;
  int retries = 3;
  int backoff_ms = 100;  // doubles per retry
};

// Adds the private noise locally, fetches C1 logits from the service, applies
// the private SOL locally and returns the hijack class (lowest-index ties).
// Equals local composed_forward(model, sol, apply_noise(image)) exactly.
int hijack_predict(const HijackClientConfig& cfg, const Tensor& image_chw);

// Wire schema helpers (shared by service, client and tests).
std::string encode_logits_request(const Tensor& image_chw);
std::vector<float> parse_logits_response(const std::string& body, std::string* model_version);

}  // namespace camh

#endif
