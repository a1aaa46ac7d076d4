#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "langseg/png_io.hpp"
#include "langseg/service.hpp"
#include "test_util.hpp"

// After the Eigen-based headers: <resolv.h> defines a `_res` macro.
#include <httplib.h>
#include <json.hpp>

namespace langseg {
namespace {

using json = nlohmann::json;
using testing::random_map;

ModelParameters<float> service_model(std::uint64_t seed = 3) {
  ModelConfig c = testing::tiny_config(BlockKind::Bottleneck, 2, 16, 64);
  return ModelParameters<float>(c, seed);
}

std::string png_b64(const DenseMapf& image) { return base64_encode(encode_png_rgb(image)); }

std::string request(const std::string& image, const std::vector<std::string>& labels, bool scores = false) {
  json j{{"image", image}, {"labels", labels}};
  if (scores) j["options"] = {{"return_scores", true}};
  return j.dump();
}

std::vector<unsigned char> label_bytes(const std::string& body) {
  return base64_decode(json::parse(body)["label_map"].get<std::string>());
}

// Runs a real HTTP server on a free local port for the lifetime of the test.
class ServiceOverHttp : public ::testing::Test {
 protected:
  void SetUp() override {
    service_ = std::make_unique<SegmentationService>(service_model(), synth_vocab(default_vocabulary(0)));
    server_ = std::make_unique<HttpServer>(*service_);
    port_ = server_->bind("127.0.0.1", 0);
    thread_ = std::thread([this] { server_->listen(); });
    server_->wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }
  void TearDown() override {
    server_->stop();
    thread_.join();
  }

  httplib::Result post(const std::string& body) { return client_->Post("/segment", body, "application/json"); }

  std::string image() {
    std::mt19937_64 rng(21);
    return png_b64(random_map<float>(16, 16, 3, rng, 0, 1));
  }

  std::unique_ptr<SegmentationService> service_;
  std::unique_ptr<HttpServer> server_;
  std::unique_ptr<httplib::Client> client_;
  std::thread thread_;
  int port_ = 0;
};

TEST_F(ServiceOverHttp, SingleLabelGivesZeroMap) {
  const auto res = post(request(image(), {"other"}));
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  const auto map = label_bytes(res->body);
  ASSERT_EQ(map.size(), 256u);
  for (auto b : map) EXPECT_EQ(b, 0);
  EXPECT_TRUE(res->has_header("X-Inference-Ms"));
}

TEST_F(ServiceOverHttp, IdenticalRequestsGiveIdenticalBodies) {
  const auto body = request(image(), {"other", "cat", "car", "tree"}, true);
  const auto a = post(body);
  const auto b = post(body);
  ASSERT_TRUE(a && b);
  ASSERT_EQ(a->status, 200);
  EXPECT_EQ(a->body, b->body);
}

TEST_F(ServiceOverHttp, SwappedLabelsSwapIndices) {
  const auto img = image();
  const auto ab = post(request(img, {"cat", "grass"}));
  const auto ba = post(request(img, {"grass", "cat"}));
  ASSERT_TRUE(ab && ba);
  const auto m1 = label_bytes(ab->body);
  const auto m2 = label_bytes(ba->body);
  ASSERT_EQ(m1.size(), m2.size());
  for (std::size_t i = 0; i < m1.size(); ++i) EXPECT_EQ(m2[i], 1 - m1[i]) << i;

  const auto legend = json::parse(ab->body)["legend"];
  EXPECT_EQ(legend[0]["label"], "cat");
  const auto c = label_color("cat");
  EXPECT_EQ(legend[0]["color"], json({c[0], c[1], c[2]}));
}

TEST_F(ServiceOverHttp, ScoresAreProbabilities) {
  const auto res = post(request(image(), {"other", "cat"}, true));
  ASSERT_TRUE(res);
  const auto scores = json::parse(res->body)["scores"];
  ASSERT_EQ(scores.size(), 2u);
  for (const auto& s : scores) {
    EXPECT_GE(s["min"].get<double>(), 0.0);
    EXPECT_LE(s["max"].get<double>(), 1.0);
  }
  EXPECT_NEAR(scores[0]["mean"].get<double>() + scores[1]["mean"].get<double>(), 1.0, 1e-6);
}

TEST_F(ServiceOverHttp, OddSizedImagesAreAccepted) {
  std::mt19937_64 rng(5);
  const auto res = post(request(png_b64(random_map<float>(13, 21, 3, rng, 0, 1)), {"other", "cat"}));
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  const auto j = json::parse(res->body);
  EXPECT_EQ(j["width"], 21);
  EXPECT_EQ(j["height"], 13);
  EXPECT_EQ(label_bytes(res->body).size(), 13u * 21u);
}

TEST_F(ServiceOverHttp, BadRequests) {
  auto res = post(request(image(), {"other", "zebra"}));
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body)["label"], "zebra");

  EXPECT_EQ(post("{not json")->status, 400);
  EXPECT_EQ(post(request(image(), {}))->status, 400);
  EXPECT_EQ(post(request("@@@", {"cat"}))->status, 400);
  EXPECT_EQ(post(json{{"image", image()}, {"labels", {"cat"}}, {"options", {{"temperature", 0}}}}.dump())->status, 400);
  EXPECT_EQ(post(request(png_b64(DenseMapf(8, 1032, 3)), {"cat"}))->status, 413);
}

TEST_F(ServiceOverHttp, UnknownPathIs404) {
  const auto res = client_->Get("/");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(client_->Get("/segment")->status, 404);
}

TEST_F(ServiceOverHttp, VocabularyIsSorted) {
  const auto res = client_->Get("/vocabulary");
  ASSERT_TRUE(res);
  const auto labels = json::parse(res->body)["labels"].get<std::vector<std::string>>();
  auto expected = synth_vocab(default_vocabulary(0)).labels();
  std::sort(expected.begin(), expected.end());
  EXPECT_EQ(labels, expected);
}

TEST_F(ServiceOverHttp, HealthReportsDigest) {
  const auto res = client_->Get("/health");
  ASSERT_TRUE(res);
  const auto j = json::parse(res->body);
  EXPECT_EQ(j["status"], "ok");
  EXPECT_EQ(j["digest"], service_->digest());
}

TEST(ServiceDigest, StableAcrossRestartsAndSensitiveToWeights) {
  const auto table = synth_vocab(default_vocabulary(0));
  const SegmentationService a(service_model(3), table);
  const SegmentationService b(service_model(3), table);
  const SegmentationService c(service_model(4), table);
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_NE(a.digest(), c.digest());
}

TEST(Base64, RoundTripAndRejectsJunk) {
  for (std::size_t n = 0; n < 10; ++n) {
    std::vector<unsigned char> bytes(n);
    for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<unsigned char>(37 * i + 250);
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  }
  EXPECT_EQ(base64_encode(std::vector<unsigned char>{'M', 'a', 'n'}), "TWFu");
  EXPECT_THROW(base64_decode("TW=u"), FormatError);
}

TEST(LabelColor, DependsOnlyOnName) {
  EXPECT_EQ(label_color("cat"), label_color(std::string("cat")));
  EXPECT_NE(label_color("cat"), label_color("car"));
  LabelMap m(1, 2);
  m << 0, 1;
  const auto img = colorize(m, LabelSet({"car", "cat"}));
  EXPECT_FLOAT_EQ(img(0, 1, 0), static_cast<float>(label_color("cat")[0]) / 255.f);
}

}  // namespace
}  // namespace langseg
