#include "doctest.h"

#include "camh/io_util.hpp"
#include "test_helpers.hpp"

using namespace camh;

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex(std::string("")) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex(std::string("abc")) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex(std::string("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
        "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
  // multi-block input
  CHECK(sha256_hex(std::string(1000, 'a')) ==
        "41edece42d63e8d9bf515a9ba6932e1c20cbc9f5a5d134645adb5db1b9737ea3");
}

TEST_CASE("base64 round trip and known values") {
  CHECK(base64_encode("", 0) == "");
  CHECK(base64_encode("f", 1) == "Zg==");
  CHECK(base64_encode("fo", 2) == "Zm8=");
  CHECK(base64_encode("foo", 3) == "Zm9v");
  CHECK(base64_encode("foobar", 6) == "Zm9vYmFy");

  Rng rng(5);
  for (int len : {1, 2, 3, 63, 64, 65, 1000}) {
    std::vector<uint8_t> data(size_t(len), 0);
    for (auto& b : data) b = uint8_t(rng.uniform_int(256));
    const auto back = base64_decode(base64_encode(data.data(), data.size()));
    CHECK(back == data);
  }
  CHECK_THROWS_AS(base64_decode("a"), ArgumentError);
  CHECK_THROWS_AS(base64_decode("a==="), ArgumentError);
  CHECK_THROWS_AS(base64_decode("ab!d"), ArgumentError);
}

TEST_CASE("png writer emits a decodable deterministic file") {
  test::TempDir dir("png");
  Tensor t({1, 4, 5});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(i) / float(t.numel());
  const std::string p1 = dir.path() + "/a.png";
  const std::string p2 = dir.path() + "/b.png";
  write_tensor_png(p1, t);
  write_tensor_png(p2, t);
  const std::string a = read_file(p1);
  CHECK(a == read_file(p2));
  CHECK(a.substr(1, 3) == "PNG");
  CHECK(a.find("IHDR") != std::string::npos);
  CHECK(a.find("IEND") != std::string::npos);
}

TEST_CASE("csv parsing and fixed formatting") {
  CHECK(fmt_real(0.5) == "0.500000");
  CHECK(fmt_real(-1.25) == "-1.250000");
  const auto rows = parse_csv("a,b\n1,2\n,3\n");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"a", "b"});
  CHECK(rows[2] == std::vector<std::string>{"", "3"});
}

TEST_CASE("raw tensor container round trip") {
  test::TempDir dir("camht");
  const Tensor t = test::random_tensor({2, 3, 4}, 9);
  const std::string p = dir.path() + "/t.camht";
  save_raw_tensor(p, t);
  CHECK(load_raw_tensor(p) == t);

  const std::string truncated = read_file(p).substr(0, 20);
  write_file(p, truncated);
  CHECK_THROWS_AS(load_raw_tensor(p), SerializationError);
}

TEST_CASE("durable append accumulates lines") {
  test::TempDir dir("append");
  const std::string p = dir.path() + "/log.jsonl";
  append_line_durable(p, "one");
  append_line_durable(p, "two");
  CHECK(read_file(p) == "one\ntwo\n");
}
