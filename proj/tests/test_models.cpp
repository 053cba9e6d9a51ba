#include "doctest.h"

#include "camh/io_util.hpp"
#include "camh/models.hpp"
#include "camh/nn.hpp"
#include "test_helpers.hpp"

using namespace camh;
using test::rel_err;

TEST_CASE("sol_forward is exactly affine: linearity identity over 1000 draws") {
  // sol(a*u + b*v) == a*sol(u) + b*sol(v) - (a+b-1)*bias
  SyncOptLayer sol = SyncOptLayer::init(6, 9, 17);
  Rng rng(31);
  sol.weight.init_normal(rng, 0.0f, 0.4f);
  sol.bias.init_normal(rng, 0.0f, 0.5f);  // nonzero bias so the identity is non-trivial
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor u = test::random_tensor({2, 6}, 1000 + uint64_t(trial));
    const Tensor v = test::random_tensor({2, 6}, 5000 + uint64_t(trial));
    const float a = float(rng.uniform(-2.0, 2.0));
    const float b = float(rng.uniform(-2.0, 2.0));
    Tensor mix({2, 6});
    for (int64_t i = 0; i < mix.numel(); ++i) mix[i] = a * u[i] + b * v[i];
    const Tensor lhs = sol_forward(sol, mix);
    const Tensor su = sol_forward(sol, u);
    const Tensor sv = sol_forward(sol, v);
    for (int64_t n = 0; n < 2; ++n) {
      for (int64_t j = 0; j < 9; ++j) {
        const double rhs =
            double(a) * su.at2(n, j) + double(b) * sv.at2(n, j) - double(a + b - 1.0f) * sol.bias[j];
        // relative to the magnitudes entering the identity (forward error);
        // the raw outputs can cancel to ~0 where any ratio is meaningless
        const double scale =
            std::max({std::fabs(double(a)) * std::fabs(su.at2(n, j)),
                      std::fabs(double(b)) * std::fabs(sv.at2(n, j)),
                      std::fabs(double(sol.bias[j])), std::fabs(double(lhs.at2(n, j))), 1e-3});
        CHECK(std::fabs(double(lhs.at2(n, j)) - rhs) / scale < 1e-5);
      }
    }
  }
}

TEST_CASE("sol_forward special cases") {
  // identity-padded weights, zero bias, C1 == C2 -> z = logits
  SyncOptLayer sol = SyncOptLayer::init(4, 4, 3);
  sol.weight.fill(0.0f);
  sol.bias.fill(0.0f);
  for (int i = 0; i < 4; ++i) sol.weight.at2(i, i) = 1.0f;
  const Tensor x = test::random_tensor({3, 4}, 7);
  CHECK(sol_forward(sol, x) == x);

  // zero logits -> bias broadcast to each row
  SyncOptLayer sol2 = SyncOptLayer::init(4, 5, 3);
  Rng rng(11);
  sol2.bias.init_normal(rng, 0.0f, 1.0f);
  const Tensor zeros({2, 4});
  const Tensor z = sol_forward(sol2, zeros);
  for (int64_t n = 0; n < 2; ++n) {
    for (int64_t j = 0; j < 5; ++j) CHECK(z.at2(n, j) == sol2.bias[j]);
  }

  // dimension mismatch
  CHECK_THROWS_AS(sol_forward(sol2, Tensor({2, 7})), ArgumentError);
}

TEST_CASE("sol_backward matches finite differences") {
  SyncOptLayer sol = SyncOptLayer::init(3, 5, 23);
  const Tensor x = test::random_tensor({4, 3}, 29);
  const Tensor w = test::random_tensor({4, 5}, 37);
  auto objective = [&]() {
    const Tensor z = sol_forward(sol, x);
    double s = 0.0;
    for (int64_t i = 0; i < z.numel(); ++i) s += double(z[i]) * w[i];
    return s;
  };
  sol.zero_grads();
  Tensor dz = w;
  const Tensor dx = sol_backward(sol, x, dz);
  const double h = 1e-2;
  for (int64_t i = 0; i < sol.weight.numel(); ++i) {
    const float orig = sol.weight[i];
    sol.weight[i] = orig + float(h);
    const double fp = objective();
    sol.weight[i] = orig - float(h);
    const double fm = objective();
    sol.weight[i] = orig;
    CHECK(rel_err((fp - fm) / (2 * h), sol.dweight[i]) < 1e-3);
  }
}

TEST_CASE("composed_forward equals the two-step computation exactly") {
  TaskSpec spec{"orig", 10, {1, 12, 12}, 64, 16};
  ClassifierModel m = ClassifierModel::build("smallcnn", spec, 0.0f, 5);
  SyncOptLayer sol = SyncOptLayer::init(10, 43, 5);
  const Tensor x = test::random_tensor({3, 1, 12, 12}, 41, 0.0f, 1.0f);
  const Tensor z = composed_forward(m, sol, x);
  CHECK(z.shape() == std::vector<int64_t>{3, 43});  // C1=10 -> C2=43
  const Tensor two_step = sol_forward(sol, m.forward_logits(x));
  CHECK(z == two_step);  // exact float equality
}

TEST_CASE("argmax ties break toward the lowest class index") {
  Tensor logits({1, 4});
  logits.at2(0, 1) = 2.0f;
  logits.at2(0, 3) = 2.0f;
  CHECK(predict_classes(logits) == std::vector<int>{1});
  Tensor flat({2, 3});
  flat.fill(0.5f);
  CHECK(predict_classes(flat) == std::vector<int>{0, 0});
}

TEST_CASE("original-task path never touches SOL parameters") {
  TaskSpec spec{"orig", 4, {1, 8, 8}, 64, 16};
  ClassifierModel m = ClassifierModel::build("smallcnn", spec, 0.0f, 9);
  SyncOptLayer sol = SyncOptLayer::init(4, 7, 9);
  sol.zero_grads();
  const double sol_sum_before = nn::params_checksum(sol.params());

  const Tensor x = test::random_tensor({4, 1, 8, 8}, 43, 0.0f, 1.0f);
  const std::vector<int> y{0, 1, 2, 3};
  Tensor logits = m.forward_logits(x, nn::Mode::kTrain);
  auto loss = nn::softmax_cross_entropy(logits, y);
  m.backward(loss.dlogits);

  // the original-task loss has no dependency on theta_hat: gradients stay 0
  for (int64_t i = 0; i < sol.dweight.numel(); ++i) CHECK(sol.dweight[i] == 0.0f);
  for (int64_t i = 0; i < sol.dbias.numel(); ++i) CHECK(sol.dbias[i] == 0.0f);
  CHECK(nn::params_checksum(sol.params()) == sol_sum_before);
  m.zero_grads();
}

TEST_CASE("artifact save/load round trip is field-wise exact") {
  test::TempDir dir("artifact");
  HijackArtifact art;
  art.original_spec = {"orig", 4, {1, 8, 8}, 100, 20};
  art.hijack_spec = {"hij", 7, {3, 16, 16}, 50, 10};
  art.sol = SyncOptLayer::init(4, 7, 77);
  Rng rng(99);
  art.sol.bias.init_normal(rng, 0.0f, 1.0f);
  art.noise.delta = test::random_tensor({1, 8, 8}, 101, -0.3f, 0.3f);
  art.noise.linf_bound = 0.0f;
  art.run_id = "run-abc";
  art.seed = 1234;
  art.config_hash = "deadbeef";

  const std::string path = dir.path() + "/a.camh";
  save_artifact(art, path);
  const HijackArtifact back = load_artifact(path);
  CHECK(back.sol.weight == art.sol.weight);
  CHECK(back.sol.bias == art.sol.bias);
  CHECK(back.noise.delta == art.noise.delta);
  CHECK(back.sol.in_dim == 4);
  CHECK(back.sol.out_dim == 7);
  CHECK(back.original_spec.name == "orig");
  CHECK(back.hijack_spec.num_classes == 7);
  CHECK(back.run_id == "run-abc");
  CHECK(back.seed == 1234);
  CHECK(back.config_hash == "deadbeef");
  CHECK(back.sol_trained);
  CHECK(back.noise_trained);

  SUBCASE("truncated file fails atomically") {
    const std::string full = read_file(path);
    for (const size_t keep : {size_t(4), size_t(30), full.size() / 2, full.size() - 3}) {
      write_file(path, full.substr(0, keep));
      CHECK_THROWS_AS(load_artifact(path), SerializationError);
    }
  }

  SUBCASE("corrupted payload fails the checksum") {
    std::string full = read_file(path);
    full[full.size() - 5] = char(full[full.size() - 5] ^ 0x40);
    write_file(path, full);
    CHECK_THROWS_AS(load_artifact(path), SerializationError);
  }

  SUBCASE("dimension-inconsistent artifact is rejected at save") {
    HijackArtifact bad = art;
    bad.sol.in_dim = 5;  // != original_spec.num_classes
    CHECK_THROWS_AS(save_artifact(bad, dir.path() + "/bad.camh"), ArgumentError);
  }
}

TEST_CASE("checkpoint save/load: bit-exact parameters and equal forwards") {
  test::TempDir dir("ckpt");
  TaskSpec spec{"orig", 3, {1, 10, 10}, 64, 16};
  ClassifierModel m = ClassifierModel::build("smallcnn", spec, 0.2f, 21);
  // train-mode step so parameters differ from init
  const Tensor x = test::random_tensor({4, 1, 10, 10}, 51, 0.0f, 1.0f);
  auto loss = nn::softmax_cross_entropy(m.forward_logits(x, nn::Mode::kTrain), {0, 1, 2, 0});
  m.backward(loss.dlogits);
  nn::Sgd sgd(0.9f);
  sgd.step(m.params(), 0.1f);
  m.zero_grads();

  const std::string path = dir.path() + "/m.ckpt";
  m.save(path);
  ClassifierModel back = ClassifierModel::load(path);
  CHECK(back.architecture_id() == "smallcnn");
  CHECK(back.spec().name == "orig");
  CHECK(back.dropout_rate() == 0.2f);
  auto pa = m.params(), pb = back.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].value == *pb[i].value);
  CHECK(m.forward_logits(x) == back.forward_logits(x));

  write_file(path, read_file(path).substr(0, 64));
  CHECK_THROWS_AS(ClassifierModel::load(path), SerializationError);
}

TEST_CASE("resnet checkpoint keeps batchnorm running stats") {
  test::TempDir dir("ckpt_bn");
  TaskSpec spec{"c", 2, {3, 16, 16}, 32, 8};
  ClassifierModel m = ClassifierModel::build("resnet18", spec, 0.0f, 2);
  const Tensor x = test::random_tensor({4, 3, 16, 16}, 53, 0.0f, 1.0f);
  m.forward_logits(x, nn::Mode::kTrain);  // moves running stats off init
  const std::string path = dir.path() + "/r.ckpt";
  m.save(path);
  ClassifierModel back = ClassifierModel::load(path);
  CHECK(m.forward_logits(x) == back.forward_logits(x));
}

TEST_CASE("fold projection maps logits to duplicated buckets") {
  SyncOptLayer fold = SyncOptLayer::fold(3, 7);
  Tensor logits({1, 3});
  logits.at2(0, 0) = 0.3f;
  logits.at2(0, 1) = 0.9f;
  logits.at2(0, 2) = 0.1f;
  const Tensor z = sol_forward(fold, logits);
  for (int j = 0; j < 7; ++j) CHECK(z.at2(0, j) == logits.at2(0, j % 3));
}
