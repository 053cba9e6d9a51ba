#include "doctest.h"

#include <atomic>
#include <thread>

#include "camh/evaluation.hpp"
#include "camh/io_util.hpp"
#include "camh/serve.hpp"
#include "camh/training.hpp"
#include "httplib.h"
#include "json.hpp"
#include "test_helpers.hpp"

using namespace camh;
using nlohmann::json;

namespace {

struct Fixture {
  TaskSpec orig_spec{"orig", 3, {1, 10, 10}, 64, 16};
  TaskSpec hijack_spec{"hij", 5, {1, 10, 10}, 64, 16};
  ClassifierModel model;
  HijackArtifact artifact;

  Fixture() {
    model = ClassifierModel::build("smallcnn", orig_spec, 0.0f, 33);
    artifact.original_spec = orig_spec;
    artifact.hijack_spec = hijack_spec;
    artifact.sol = SyncOptLayer::init(3, 5, 33);
    Rng rng(44);
    artifact.sol.weight.init_normal(rng, 0.0f, 0.5f);
    artifact.noise.delta = test::random_tensor({1, 10, 10}, 45, -0.2f, 0.2f);
    artifact.run_id = "fixture";
  }
};

}  // namespace

TEST_CASE("victim service: health, logits equality, error responses, surface audit") {
  Fixture fx;
  ClassifierModel local = ClassifierModel::build("smallcnn", fx.orig_spec, 0.0f, 33);
  VictimService service(std::move(fx.model), {});
  httplib::Client client("127.0.0.1", service.port());

  SUBCASE("health reports status, input shape and class count") {
    auto res = client.Get("/v1/health");
    REQUIRE(res);
    CHECK(res->status == 200);
    const json j = json::parse(res->body);
    CHECK(j.at("status") == "ok");
    CHECK(j.at("input_shape") == json::array({1, 10, 10}));
    CHECK(j.at("num_classes") == 3);
  }

  SUBCASE("valid request returns logits bit-exactly equal to the local forward") {
    const Tensor img = test::random_tensor({1, 10, 10}, 71, 0.0f, 1.0f);
    auto res = client.Post("/v1/logits", encode_logits_request(img), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    std::string version;
    const auto logits = parse_logits_response(res->body, &version);
    REQUIRE(logits.size() == 3);
    CHECK(version == service.model_version());
    Tensor batch({1, 1, 10, 10});
    std::memcpy(batch.data(), img.data(), size_t(img.numel()) * 4);
    const Tensor expect = local.forward_logits(batch);
    for (int i = 0; i < 3; ++i) CHECK(logits[size_t(i)] == expect[i]);

    // response carries only the C1 logits and a version string: no hijack
    // dimension data exists in any field
    const json j = json::parse(res->body);
    CHECK(j.size() == 2);
    CHECK(j.contains("logits"));
    CHECK(j.contains("model_version"));
    CHECK(j.at("logits").size() == 3);
  }

  SUBCASE("wrong shape: 422 naming the expected geometry") {
    const Tensor img = test::random_tensor({3, 8, 8}, 72, 0.0f, 1.0f);
    auto res = client.Post("/v1/logits", encode_logits_request(img), "application/json");
    REQUIRE(res);
    CHECK(res->status == 422);
    const json j = json::parse(res->body);
    CHECK(j.at("expected_shape") == json::array({1, 10, 10}));
  }

  SUBCASE("malformed payloads: 400") {
    auto res = client.Post("/v1/logits", "{nope", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    res = client.Post("/v1/logits", R"({"shape": [1,10,10], "dtype": "f64", "data": ""})",
                      "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    res = client.Post("/v1/logits", R"({"shape": [1,10,10], "dtype": "f32le", "data": "abc!"})",
                      "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    // payload length inconsistent with the declared shape
    const std::string short_b64 = base64_encode("xx", 2);
    res = client.Post("/v1/logits",
                      json{{"shape", {1, 10, 10}}, {"dtype", "f32le"}, {"data", short_b64}}.dump(),
                      "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
  }

  SUBCASE("100 concurrent identical requests give 100 identical responses") {
    const Tensor img = test::random_tensor({1, 10, 10}, 73, 0.0f, 1.0f);
    const std::string body = encode_logits_request(img);
    const int n = 100;
    std::vector<std::string> responses(static_cast<size_t>(n));
    std::vector<std::thread> threads;
    std::atomic<int> failures{0};
    for (int t = 0; t < n; ++t) {
      threads.emplace_back([&, t] {
        httplib::Client c("127.0.0.1", service.port());
        c.set_connection_timeout(10, 0);
        auto res = c.Post("/v1/logits", body, "application/json");
        if (res && res->status == 200) {
          responses[size_t(t)] = res->body;
        } else {
          ++failures;
        }
      });
    }
    for (auto& th : threads) th.join();
    CHECK(failures.load() == 0);
    for (int t = 1; t < n; ++t) CHECK(responses[size_t(t)] == responses[0]);
  }
}

TEST_CASE("hijack accuracy measured through the service equals acc_h2h exactly") {
  // short real attack; then every hijack test image goes through the wire
  const auto orig = synthetic_handle("orig", 2, {1, 10, 10}, 256, 96, 601);
  const auto hijack = synthetic_handle("hij", 3, {1, 10, 10}, 192, 96, 602);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  cfg.seed = 11;
  cfg.noise.steps = 10;
  cfg.noise_init_steps = 5;
  cfg.history_eval_cap = 96;
  TrainedBundle bundle = dual_loop_train(orig, hijack, cfg);
  const TrainedBundle benign_o = train_benign(orig, cfg);
  TrainConfig hcfg = cfg;
  const TrainedBundle benign_h = train_benign(adapt_handle(hijack, orig.spec.input_shape), hcfg);
  const EvalReport report = evaluate_hijacked(bundle, benign_o, benign_h, orig, hijack);

  const InMemoryDataset test =
      load_split(adapt_handle(hijack, orig.spec.input_shape), Split::test, "");
  VictimService service(std::move(bundle.model), {});
  HijackClientConfig client;
  client.endpoint = "http://127.0.0.1:" + std::to_string(service.port());
  client.artifact = *bundle.artifact;
  const int64_t item = test.images.numel() / test.size();
  int64_t correct = 0;
  for (int64_t i = 0; i < test.size(); ++i) {
    Tensor img({1, 10, 10});
    std::memcpy(img.data(), test.images.data() + i * item, size_t(item) * 4);
    if (hijack_predict(client, img) == test.labels[size_t(i)]) ++correct;
  }
  CHECK(double(correct) / double(test.size()) == report.acc_h2h);
}

TEST_CASE("hijack_predict equals the local composed pipeline on 50 images") {
  Fixture fx;
  ClassifierModel local = ClassifierModel::build("smallcnn", fx.orig_spec, 0.0f, 33);
  VictimService service(std::move(fx.model), {});

  HijackClientConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(service.port());
  cfg.artifact = fx.artifact;

  int agree = 0;
  for (int i = 0; i < 50; ++i) {
    const Tensor img = test::random_tensor({1, 10, 10}, 900 + uint64_t(i), 0.0f, 1.0f);
    const int remote = hijack_predict(cfg, img);
    Tensor batch({1, 1, 10, 10});
    std::memcpy(batch.data(), img.data(), size_t(img.numel()) * 4);
    const Tensor z = composed_forward(local, fx.artifact.sol, apply_noise(batch, fx.artifact.noise));
    const int expect = predict_classes(z)[0];
    if (remote == expect) ++agree;
    CHECK(remote >= 0);
    CHECK(remote < 5);
  }
  CHECK(agree == 50);
}

TEST_CASE("artifact/service dimension mismatch raises an incompatibility error") {
  Fixture fx;
  VictimService service(std::move(fx.model), {});
  HijackClientConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(service.port());
  // artifact built against a 5-logit victim; the service answers with 3
  cfg.artifact.original_spec = {"other", 5, {1, 10, 10}, 64, 16};
  cfg.artifact.hijack_spec = fx.hijack_spec;
  cfg.artifact.sol = SyncOptLayer::init(5, 5, 1);
  cfg.artifact.noise.delta = Tensor({1, 10, 10});
  const Tensor img = test::random_tensor({1, 10, 10}, 74, 0.0f, 1.0f);
  CHECK_THROWS_AS(hijack_predict(cfg, img), IncompatibilityError);
}

TEST_CASE("client retries then raises a transport error on a dead endpoint") {
  Fixture fx;
  HijackClientConfig cfg;
  cfg.endpoint = "http://127.0.0.1:9";  // discard port: nothing listens
  cfg.artifact = fx.artifact;
  cfg.retries = 2;
  cfg.backoff_ms = 1;
  const Tensor img = test::random_tensor({1, 10, 10}, 75, 0.0f, 1.0f);
  CHECK_THROWS_AS(hijack_predict(cfg, img), TransportError);
}
