#include <gtest/gtest.h>
#include <httplib.h>

#include <barrier>
#include <cstdlib>
#include <thread>

#include "memeguard/backend.hpp"
#include "support.hpp"

using namespace memeguard;
using namespace std::chrono_literals;
using testing_support::TempDir;

namespace {

BackendBinding binding(const std::string& url, BackendKind kind, const std::string& model = "m") {
  BackendBinding b;
  b.endpoint_url = url;
  b.model_id = model;
  b.kind = kind;
  return b;
}

GatewayOptions quiet(std::vector<std::chrono::milliseconds>* sleeps = nullptr) {
  GatewayOptions o;
  o.cache_enabled = false;
  o.sleep = [sleeps](std::chrono::milliseconds d) {
    if (sleeps) sleeps->push_back(d);
  };
  return o;
}

std::filesystem::path image_a() { return testing_support::data_dir() / "mini" / "images" / "a.png"; }

// Scripted transport: replies from a queue, then repeats the last entry.
class Scripted final : public MockTransport {
 public:
  explicit Scripted(std::vector<WireResponse> replies) : replies_(std::move(replies)) {}
  json last_request;

 protected:
  WireResponse respond(const BackendBinding&, const json& request) override {
    last_request = request;
    const std::size_t i = std::min(next_++, replies_.size() - 1);
    return replies_[i];
  }

 private:
  std::vector<WireResponse> replies_;
  std::size_t next_ = 0;
};

}  // namespace

TEST(GenerationConfig, Defaults) {
  const GenerationConfig c;
  EXPECT_DOUBLE_EQ(c.temperature, 0.5);
  EXPECT_DOUBLE_EQ(c.top_p, 0.2);
  EXPECT_EQ(c.top_k, 50);
  EXPECT_EQ(c.max_tokens, 512);
  EXPECT_NO_THROW(c.validate());
}

TEST(GenerationConfig, Validation) {
  GenerationConfig c;
  c.top_p = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.temperature = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.top_k = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Url, Parses) {
  const Url u = parse_url("http://127.0.0.1:8000/v1/chat?x=1&y");
  EXPECT_EQ(u.scheme, "http");
  EXPECT_EQ(u.host, "127.0.0.1");
  EXPECT_EQ(u.port, 8000);
  EXPECT_EQ(u.path, "/v1/chat");
  EXPECT_EQ(u.query.at("x"), "1");
  EXPECT_EQ(u.query.at("y"), "");
  EXPECT_THROW(parse_url("no-scheme"), std::invalid_argument);
  EXPECT_THROW(parse_url("http://host:abc/"), std::invalid_argument);
  EXPECT_THROW(parse_url("http:///path"), std::invalid_argument);
}

TEST(Binding, Validation) {
  auto b = binding("mock://echo", BackendKind::llm);
  EXPECT_NO_THROW(b.validate());
  b.max_retries = -1;
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b = binding("not a url", BackendKind::llm);
  EXPECT_THROW(b.validate(), std::invalid_argument);
}

TEST(Wire, ChatRequestShape) {
  const auto b = binding("mock://echo", BackendKind::vlm, "vlmeme");
  const std::string img = "QUJD";
  const json req = wire::chat_request(b, "Describe", GenerationConfig{}, &img);
  EXPECT_EQ(req["model"], "vlmeme");
  EXPECT_EQ(req["messages"][0]["role"], "user");
  EXPECT_EQ(req["messages"][0]["content"][0], (json{{"type", "text"}, {"text", "Describe"}}));
  EXPECT_EQ(req["messages"][0]["content"][1], (json{{"type", "image"}, {"data_b64", "QUJD"}}));
  EXPECT_EQ(req["temperature"], 0.5);
  EXPECT_EQ(req["top_p"], 0.2);
  EXPECT_EQ(req["top_k"], 50);
  EXPECT_EQ(req["max_tokens"], 512);
}

TEST(Wire, ResponseShapes) {
  EXPECT_EQ(wire::parse_chat_response(json{{"text", "a"}}), "a");
  EXPECT_EQ(wire::parse_chat_response(json::parse(R"({"choices":[{"message":{"content":"b"}}]})")), "b");
  EXPECT_EQ(wire::parse_chat_response(json::parse(R"({"choices":[{"text":"c"}]})")), "c");
  EXPECT_THROW(wire::parse_chat_response(json::object()), BackendError);
  EXPECT_EQ(wire::parse_embedding_response(json::parse(R"({"data":[{"embedding":[1,2]}]})")).dimension(), 2u);
  EXPECT_THROW(wire::parse_embedding_response(json::parse(R"({"embedding":[]})")), BackendError);
  EXPECT_THROW(wire::parse_embedding_response(json::parse(R"({"embedding":["x"]})")), BackendError);
}

TEST(Gateway, VlmEchoReturnsPrompt) {
  Gateway gw(quiet());
  const auto b = binding("mock://echo", BackendKind::vlm);
  EXPECT_EQ(gw.vlm_query(b, image_a(), "Describe this meme in detail.", {}), "Describe this meme in detail.");
}

TEST(Gateway, LlmEchoReturnsPrompt) {
  Gateway gw(quiet());
  EXPECT_EQ(gw.llm_query(binding("mock://echo", BackendKind::llm), "hello there", {}), "hello there");
}

TEST(Gateway, EmptyPromptRejected) {
  Gateway gw(quiet());
  try {
    gw.llm_query(binding("mock://echo", BackendKind::llm), "", {});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_STREQ(e.what(), "empty prompt");
    EXPECT_EQ(gw.attempts(), 0u);
  }
}

TEST(Gateway, KindMismatchRejected) {
  Gateway gw(quiet());
  EXPECT_THROW(gw.llm_query(binding("mock://echo", BackendKind::vlm), "x", {}), BackendError);
  EXPECT_THROW(gw.embed_text(binding("mock://embed", BackendKind::llm), "x"), BackendError);
}

TEST(Gateway, UnreachableEndpointFailsAfterThreeAttempts) {
  std::vector<std::chrono::milliseconds> sleeps;
  Gateway gw(quiet(&sleeps));
  auto b = binding("http://127.0.0.1:1/v1/chat", BackendKind::vlm);
  b.max_retries = 2;
  b.timeout = 2000ms;
  const auto wire_before = HttpTransport::wire_requests();
  try {
    gw.vlm_query(b, image_a(), "Describe this meme in detail.", {});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("after 3 attempts"), std::string::npos) << e.what();
  }
  EXPECT_EQ(gw.attempts(), 3u);
  EXPECT_EQ(HttpTransport::wire_requests() - wire_before, 3u);
  ASSERT_EQ(sleeps.size(), 2u);
  EXPECT_GE(sleeps[0], 250ms);
  EXPECT_LE(sleeps[0], 500ms);
  EXPECT_GE(sleeps[1], 500ms);
  EXPECT_LE(sleeps[1], 1000ms);
}

TEST(Gateway, BackoffIsBoundedByCap) {
  std::vector<std::chrono::milliseconds> sleeps;
  Gateway gw(quiet(&sleeps));
  auto t = std::make_shared<Scripted>(std::vector<WireResponse>{{503, "busy"}});
  gw.register_transport("mock://scripted", t);
  auto b = binding("mock://scripted", BackendKind::llm);
  b.max_retries = 9;
  EXPECT_THROW(gw.llm_query(b, "x", {}), BackendError);
  EXPECT_EQ(t->requests(), 10u);
  ASSERT_EQ(sleeps.size(), 9u);
  for (auto s : sleeps) {
    EXPECT_LE(s, 8000ms);
    EXPECT_GE(s, 250ms);
  }
  EXPECT_GE(sleeps.back(), 4000ms);
}

TEST(Gateway, RetriesThenSucceeds) {
  Gateway gw(quiet());
  auto t = std::make_shared<Scripted>(std::vector<WireResponse>{{503, "busy"}, {429, "slow down"}, {200, R"({"text":"ok"})"}});
  gw.register_transport("mock://scripted", t);
  EXPECT_EQ(gw.llm_query(binding("mock://scripted", BackendKind::llm), "x", {}), "ok");
  EXPECT_EQ(t->requests(), 3u);
}

TEST(Gateway, ClientErrorIsNotRetriedAndBodyEchoed) {
  Gateway gw(quiet());
  auto t = std::make_shared<Scripted>(std::vector<WireResponse>{{400, "bad model name"}});
  gw.register_transport("mock://scripted", t);
  try {
    gw.llm_query(binding("mock://scripted", BackendKind::llm), "x", {});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.status(), 400);
    EXPECT_NE(std::string(e.what()).find("bad model name"), std::string::npos);
  }
  EXPECT_EQ(t->requests(), 1u);
}

TEST(Gateway, CacheServesRepeatWithoutWire) {
  GatewayOptions o = quiet();
  o.cache_enabled = true;
  Gateway gw(o);
  auto t = std::make_shared<HashTextTransport>(3);
  gw.register_transport("mock://hash", t);
  const auto b = binding("mock://hash", BackendKind::vlm);
  const auto first = gw.vlm_query(b, image_a(), "Describe this meme in detail.", {});
  const auto second = gw.vlm_query(b, image_a(), "Describe this meme in detail.", {});
  EXPECT_EQ(first, second);
  EXPECT_EQ(t->requests(), 1u);
  EXPECT_EQ(gw.cache_hits(), 1u);

  GenerationConfig hot;
  hot.temperature = 0.9;
  gw.vlm_query(b, image_a(), "Describe this meme in detail.", hot);
  EXPECT_EQ(t->requests(), 2u);
  gw.vlm_query(b, testing_support::data_dir() / "mini" / "images" / "b.png", "Describe this meme in detail.", {});
  EXPECT_EQ(t->requests(), 3u);
}

TEST(Gateway, DiskCacheSurvivesRestart) {
  TempDir dir;
  GatewayOptions o = quiet();
  o.cache_enabled = true;
  o.cache_dir = dir.path();
  std::string first;
  {
    Gateway gw(o);
    first = gw.llm_query(binding("mock://hash", BackendKind::llm), "prompt", {});
    EXPECT_EQ(gw.attempts(), 1u);
  }
  Gateway gw(o);
  EXPECT_EQ(gw.llm_query(binding("mock://hash", BackendKind::llm), "prompt", {}), first);
  EXPECT_EQ(gw.attempts(), 0u);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
    ++files;
    EXPECT_EQ(e.path().extension(), ".json");
  }
  EXPECT_EQ(files, 1u);
}

TEST(Gateway, ConcurrentIdenticalRequestsIssueOneWireCall) {
  GatewayOptions o = quiet();
  o.cache_enabled = true;
  Gateway gw(o);
  auto t = std::make_shared<HashTextTransport>(1);
  gw.register_transport("mock://hash", t);
  const auto b = binding("mock://hash", BackendKind::llm);
  std::vector<std::string> out(8);
  {
    std::vector<std::jthread> threads;
    for (int i = 0; i < 8; ++i) threads.emplace_back([&, i] { out[i] = gw.llm_query(b, "same", {}); });
  }
  EXPECT_EQ(t->requests(), 1u);
  for (const auto& s : out) EXPECT_EQ(s, out[0]);
}

namespace {

// Blocks every request until released, tracking peak concurrency.
class Gate final : public MockTransport {
 public:
  std::atomic<int> active{0}, peak{0};
  std::atomic<bool> open{false};

 protected:
  WireResponse respond(const BackendBinding&, const json&) override {
    const int now = ++active;
    int p = peak.load();
    while (now > p && !peak.compare_exchange_weak(p, now)) {
    }
    while (!open.load()) std::this_thread::sleep_for(1ms);
    --active;
    return {200, R"({"text":"x"})"};
  }
};

}  // namespace

TEST(Gateway, InFlightLimitPerBinding) {
  GatewayOptions o = quiet();
  o.max_in_flight = 2;
  Gateway gw(o);
  auto t = std::make_shared<Gate>();
  gw.register_transport("mock://gate", t);
  const auto b = binding("mock://gate", BackendKind::llm);
  {
    std::vector<std::jthread> threads;
    for (int i = 0; i < 6; ++i) threads.emplace_back([&, i] { gw.llm_query(b, "p" + std::to_string(i), {}); });
    while (t->peak.load() < 2) std::this_thread::sleep_for(1ms);
    std::this_thread::sleep_for(30ms);
    EXPECT_EQ(t->peak.load(), 2);
    t->open = true;
  }
  EXPECT_EQ(t->requests(), 6u);
  EXPECT_LE(t->peak.load(), 2);
}

TEST(Gateway, HashMockIsStableAcrossGateways) {
  Gateway a(quiet()), b(quiet());
  const auto bind = binding("mock://hash?seed=5", BackendKind::llm);
  const auto x = a.llm_query(bind, "Write something.", {});
  EXPECT_EQ(x, b.llm_query(bind, "Write something.", {}));
  EXPECT_NE(x, a.llm_query(bind, "Write something else.", {}));
  EXPECT_NE(x, a.llm_query(binding("mock://hash?seed=6", BackendKind::llm), "Write something.", {}));
  EXPECT_FALSE(x.empty());
}

TEST(Gateway, EmbeddingDeterminismAndDimension) {
  Gateway gw(quiet());
  const auto b = binding("mock://embed?dim=8&seed=2", BackendKind::embed);
  const auto x1 = gw.embed_text(b, "x");
  const auto x2 = gw.embed_text(b, "x");
  EXPECT_EQ(x1, x2);
  EXPECT_EQ(x1.dimension(), 8u);
  const auto img = gw.embed_image(b, image_a());
  EXPECT_EQ(img.dimension(), x1.dimension());
  EXPECT_TRUE(img.finite());
  EXPECT_THROW(gw.embed_text(b, ""), BackendError);
}

TEST(Gateway, InconsistentEmbeddingDimensionRejected) {
  Gateway gw(quiet());
  auto t = std::make_shared<Scripted>(
      std::vector<WireResponse>{{200, R"({"embedding":[1,0,0]})"}, {200, R"({"embedding":[1,0]})"}});
  gw.register_transport("mock://scripted", t);
  const auto b = binding("mock://scripted", BackendKind::embed);
  EXPECT_EQ(gw.embed_text(b, "a").dimension(), 3u);
  try {
    gw.embed_text(b, "b");
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("dimension mismatch"), std::string::npos);
  }
}

TEST(Gateway, MockBackendsNeverTouchTheNetwork) {
  const auto before = HttpTransport::wire_requests();
  Gateway gw(quiet());
  gw.vlm_query(binding("mock://hash", BackendKind::vlm), image_a(), "q", {});
  gw.llm_query(binding("mock://echo", BackendKind::llm), "q", {});
  gw.embed_image(binding("mock://embed", BackendKind::embed), image_a());
  EXPECT_EQ(HttpTransport::wire_requests(), before);
}

TEST(HttpTransport, TalksToChatServerWithBearerKey) {
  httplib::Server server;
  std::string seen_auth;
  json seen_body;
  int calls = 0;
  server.Post("/v1/chat", [&](const httplib::Request& req, httplib::Response& res) {
    ++calls;
    seen_auth = req.get_header_value("Authorization");
    seen_body = json::parse(req.body);
    if (calls == 1) {
      res.status = 502;
      res.set_content("upstream", "text/plain");
      return;
    }
    res.set_content(R"({"choices":[{"message":{"content":"served"}}]})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::jthread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("MEMEGUARD_TEST_KEY", "sekrit", 1);
  Gateway gw(quiet());
  auto b = binding("http://127.0.0.1:" + std::to_string(port) + "/v1/chat", BackendKind::llm, "gpt-x");
  b.api_key_env = "MEMEGUARD_TEST_KEY";
  EXPECT_EQ(gw.llm_query(b, "hi", {}), "served");
  EXPECT_EQ(calls, 2);
  EXPECT_EQ(seen_auth, "Bearer sekrit");
  EXPECT_EQ(seen_body["model"], "gpt-x");
  EXPECT_EQ(wire::request_text(seen_body), "hi");

  b.api_key_env = "MEMEGUARD_TEST_KEY_UNSET";
  ::unsetenv("MEMEGUARD_TEST_KEY_UNSET");
  EXPECT_THROW(gw.llm_query(b, "other", {}), BackendError);
  server.stop();
}
