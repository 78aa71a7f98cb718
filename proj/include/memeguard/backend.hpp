#pragma once

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "memeguard/core.hpp"
#include "memeguard/digest.hpp"

namespace memeguard {

// ---------------------------------------------------------------------------
// Configuration types

enum class BackendKind { vlm, llm, embed };

inline std::string_view kind_name(BackendKind k) {
  switch (k) {
    case BackendKind::vlm: return "vlm";
    case BackendKind::llm: return "llm";
    case BackendKind::embed: return "embed";
  }
  return "?";
}

struct GenerationConfig {
  double temperature = 0.5;
  double top_p = 0.2;
  int top_k = 50;
  int max_tokens = 512;

  void validate() const {
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw std::invalid_argument("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must be in (0, 1]");
    if (top_k <= 0) throw std::invalid_argument("top_k must be positive");
    if (max_tokens <= 0) throw std::invalid_argument("max_tokens must be positive");
  }
  json to_json() const {
    return {{"temperature", temperature}, {"top_p", top_p}, {"top_k", top_k}, {"max_tokens", max_tokens}};
  }
};

struct Url {
  std::string scheme;
  std::string host;
  int port = 0;
  std::string path = "/";
  std::map<std::string, std::string> query;

  std::string origin() const { return scheme + "://" + host + (port ? ":" + std::to_string(port) : ""); }
};

/// Parses scheme://host[:port][/path][?k=v&...]. Throws std::invalid_argument.
inline Url parse_url(std::string_view text) {
  Url u;
  const auto sep = text.find("://");
  if (sep == std::string_view::npos || sep == 0) throw std::invalid_argument("not a URL: " + std::string(text));
  u.scheme = std::string(text.substr(0, sep));
  std::string_view rest = text.substr(sep + 3);
  std::string_view query;
  if (const auto q = rest.find('?'); q != std::string_view::npos) {
    query = rest.substr(q + 1);
    rest = rest.substr(0, q);
  }
  std::string_view authority = rest;
  if (const auto slash = rest.find('/'); slash != std::string_view::npos) {
    authority = rest.substr(0, slash);
    u.path = std::string(rest.substr(slash));
  }
  if (authority.empty()) throw std::invalid_argument("URL without host: " + std::string(text));
  if (const auto colon = authority.rfind(':'); colon != std::string_view::npos) {
    u.host = std::string(authority.substr(0, colon));
    const std::string port(authority.substr(colon + 1));
    if (port.empty() || !std::all_of(port.begin(), port.end(), [](char c) { return c >= '0' && c <= '9'; }))
      throw std::invalid_argument("bad port in URL: " + std::string(text));
    u.port = std::stoi(port);
  } else {
    u.host = std::string(authority);
  }
  while (!query.empty()) {
    const auto amp = query.find('&');
    const std::string_view kv = query.substr(0, amp);
    if (const auto eq = kv.find('='); eq != std::string_view::npos)
      u.query[std::string(kv.substr(0, eq))] = std::string(kv.substr(eq + 1));
    else if (!kv.empty())
      u.query[std::string(kv)] = "";
    if (amp == std::string_view::npos) break;
    query = query.substr(amp + 1);
  }
  return u;
}

struct BackendBinding {
  std::string endpoint_url;
  std::string api_key_env;
  std::string model_id;
  BackendKind kind = BackendKind::llm;
  std::chrono::milliseconds timeout{60000};
  int max_retries = 2;

  void validate() const {
    parse_url(endpoint_url);
    if (max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
    if (timeout.count() <= 0) throw std::invalid_argument("timeout must be positive");
  }
  std::string id() const { return std::string(kind_name(kind)) + ":" + model_id + "@" + endpoint_url; }
  json to_json() const {
    return {{"kind", kind_name(kind)},           {"model", model_id},
            {"endpoint", endpoint_url},          {"api_key_env", api_key_env},
            {"timeout_ms", timeout.count()},     {"max_retries", max_retries}};
  }
};

struct EmbeddingVector {
  std::vector<double> values;

  std::size_t dimension() const { return values.size(); }
  bool finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;
};

class BackendError : public std::runtime_error {
 public:
  enum class Kind { transport, timeout, status, protocol, invalid };

  BackendError(Kind kind, const std::string& what, int status = 0)
      : std::runtime_error(what), kind_(kind), status_(status) {}
  Kind kind() const noexcept { return kind_; }
  int status() const noexcept { return status_; }
  bool retryable() const noexcept {
    return kind_ == Kind::transport || kind_ == Kind::timeout ||
           (kind_ == Kind::status && (status_ == 429 || status_ >= 500));
  }

 private:
  Kind kind_;
  int status_;
};

// ---------------------------------------------------------------------------
// Wire format

namespace wire {

inline json chat_request(const BackendBinding& b, std::string_view prompt, const GenerationConfig& cfg,
                         const std::string* image_b64 = nullptr) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", prompt}});
  if (image_b64) content.push_back({{"type", "image"}, {"data_b64", *image_b64}});
  return {{"model", b.model_id},
          {"messages", json::array({{{"role", "user"}, {"content", std::move(content)}}})},
          {"temperature", cfg.temperature},
          {"top_p", cfg.top_p},
          {"top_k", cfg.top_k},
          {"max_tokens", cfg.max_tokens}};
}

inline json embed_text_request(const BackendBinding& b, std::string_view text) {
  return {{"model", b.model_id}, {"input", {{"text", text}}}};
}

inline json embed_image_request(const BackendBinding& b, const std::string& image_b64) {
  return {{"model", b.model_id}, {"input", {{"image_b64", image_b64}}}};
}

inline std::string parse_chat_response(const json& j) {
  if (const auto it = j.find("text"); it != j.end() && it->is_string()) return it->get<std::string>();
  if (const auto it = j.find("choices"); it != j.end() && it->is_array() && !it->empty()) {
    const json& c = (*it)[0];
    if (c.contains("message") && c["message"].contains("content") && c["message"]["content"].is_string())
      return c["message"]["content"].get<std::string>();
    if (c.contains("text") && c["text"].is_string()) return c["text"].get<std::string>();
  }
  throw BackendError(BackendError::Kind::protocol, "chat response has no text: " + j.dump().substr(0, 200));
}

inline EmbeddingVector parse_embedding_response(const json& j) {
  const json* arr = nullptr;
  if (const auto it = j.find("embedding"); it != j.end()) arr = &*it;
  else if (const auto d = j.find("data"); d != j.end() && d->is_array() && !d->empty() && (*d)[0].contains("embedding"))
    arr = &(*d)[0]["embedding"];
  if (!arr || !arr->is_array() || arr->empty())
    throw BackendError(BackendError::Kind::protocol, "embedding response has no vector");
  EmbeddingVector v;
  v.values.reserve(arr->size());
  for (const auto& x : *arr) {
    if (!x.is_number()) throw BackendError(BackendError::Kind::protocol, "embedding contains a non-number");
    v.values.push_back(x.get<double>());
  }
  if (!v.finite()) throw BackendError(BackendError::Kind::protocol, "embedding contains non-finite values");
  return v;
}

// All text parts of the request's messages, joined by newlines.
inline std::string request_text(const json& req) {
  std::string out;
  for (const auto& m : req.value("messages", json::array()))
    for (const auto& part : m.value("content", json::array()))
      if (part.value("type", "") == "text") {
        if (!out.empty()) out += '\n';
        out += part.value("text", "");
      }
  return out;
}

inline std::string request_image(const json& req) {
  for (const auto& m : req.value("messages", json::array()))
    for (const auto& part : m.value("content", json::array()))
      if (part.value("type", "") == "image") return part.value("data_b64", "");
  return {};
}

}  // namespace wire

// ---------------------------------------------------------------------------
// Transports

struct WireResponse {
  int status = 200;
  std::string body;
};

class Transport {
 public:
  virtual ~Transport() = default;
  /// One wire round trip. Throws BackendError(transport|timeout) on connection failure.
  virtual WireResponse post(const BackendBinding& binding, const json& request) = 0;
};

class HttpTransport final : public Transport {
 public:
  WireResponse post(const BackendBinding& binding, const json& request) override {
    const Url url = parse_url(binding.endpoint_url);
    if (url.scheme != "http" && url.scheme != "https")
      throw BackendError(BackendError::Kind::invalid, "unsupported scheme: " + url.scheme);
    httplib::Headers headers;
    if (!binding.api_key_env.empty()) {
      const char* key = std::getenv(binding.api_key_env.c_str());
      if (!key) throw BackendError(BackendError::Kind::invalid, "environment variable " + binding.api_key_env + " is not set");
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    httplib::Client client(url.origin());
    const auto secs = binding.timeout.count() / 1000;
    const auto usecs = (binding.timeout.count() % 1000) * 1000;
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    std::string path = url.path;
    if (!url.query.empty()) {
      path += '?';
      for (const auto& [k, v] : url.query) path += k + "=" + v + "&";
      path.pop_back();
    }
    wire_requests_.fetch_add(1);
    auto res = client.Post(path, headers, request.dump(), "application/json");
    if (!res) {
      const auto err = res.error();
      const bool timeout = err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read;
      throw BackendError(timeout ? BackendError::Kind::timeout : BackendError::Kind::transport,
                         binding.endpoint_url + ": " + httplib::to_string(err));
    }
    return {res->status, res->body};
  }

  /// Process-wide count of real network requests attempted.
  static std::size_t wire_requests() { return wire_requests_.load(); }

 private:
  static inline std::atomic<std::size_t> wire_requests_{0};
};

/// Base for in-process backends; counts the requests it serves.
class MockTransport : public Transport {
 public:
  WireResponse post(const BackendBinding& binding, const json& request) final {
    requests_.fetch_add(1);
    return respond(binding, request);
  }
  std::size_t requests() const { return requests_.load(); }

 protected:
  virtual WireResponse respond(const BackendBinding& binding, const json& request) = 0;

 private:
  std::atomic<std::size_t> requests_{0};
};

/// Replies with the request's prompt text.
class EchoTransport final : public MockTransport {
 protected:
  WireResponse respond(const BackendBinding&, const json& request) override {
    if (!request.contains("messages")) return {400, R"({"error":"echo backend serves chat only"})"};
    return {200, json{{"text", wire::request_text(request)}}.dump()};
  }
};

/// Deterministic text generator: the reply is a pure function of (seed, model, prompt, image, cfg).
class HashTextTransport final : public MockTransport {
 public:
  explicit HashTextTransport(std::uint64_t seed) : seed_(seed) {}

 protected:
  WireResponse respond(const BackendBinding&, const json& request) override {
    if (!request.contains("messages")) return {400, R"({"error":"text backend serves chat only"})"};
    json keyed = request;
    keyed["seed"] = seed_;
    std::mt19937_64 rng(sha256_u64(keyed.dump()));
    static constexpr std::array<std::string_view, 40> kWords = {
        "meme",    "image",   "text",      "people",   "group",     "message",  "humor",    "harmful",
        "context", "viewers", "community", "respect",  "dignity",   "claims",   "shows",    "suggests",
        "targets", "language", "identity", "culture",  "unfair",    "belief",   "online",   "share",
        "joke",    "picture", "caption",   "implies",  "mocking",   "portrays", "women",    "men",
        "others",  "empathy", "kindness",  "reality",  "everyone",  "deserves", "consider", "words"};
    const int sentences = 2 + static_cast<int>(rng() % 3);
    std::string out;
    for (int s = 0; s < sentences; ++s) {
      const int words = 4 + static_cast<int>(rng() % 6);
      for (int w = 0; w < words; ++w) {
        std::string word(kWords[rng() % kWords.size()]);
        if (w == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
        if (!out.empty()) out += ' ';
        out += word;
      }
      out += '.';
    }
    return {200, json{{"text", out}}.dump()};
  }

 private:
  std::uint64_t seed_;
};

/// Hash-to-unit-vector embedder. Every vector is normalize(sqrt(a)*anchor + sqrt(1-a)*noise), where
/// the anchor is shared (seeded) and the noise direction is hashed from the input, so text/image
/// cosines concentrate around `a`.
class HashEmbedTransport final : public MockTransport {
 public:
  HashEmbedTransport(std::size_t dimension, std::uint64_t seed, double alignment = 0.5)
      : dimension_(dimension), seed_(seed), alignment_(alignment) {
    if (dimension_ == 0) throw std::invalid_argument("embedding dimension must be positive");
    if (!(alignment_ >= 0.0 && alignment_ <= 1.0)) throw std::invalid_argument("alignment must be in [0,1]");
    anchor_ = unit_gaussian(seed_ ^ 0x9e3779b97f4a7c15ULL);
  }

  std::size_t dimension() const { return dimension_; }

  EmbeddingVector embed(std::string_view modality, std::string_view content) const {
    const std::string key = std::to_string(seed_) + "|" + std::string(modality) + "|" + std::string(content);
    const auto noise = unit_gaussian(sha256_u64(key));
    EmbeddingVector v;
    v.values.resize(dimension_);
    const double a = std::sqrt(alignment_), b = std::sqrt(1.0 - alignment_);
    double norm = 0.0;
    for (std::size_t i = 0; i < dimension_; ++i) {
      v.values[i] = a * anchor_[i] + b * noise[i];
      norm += v.values[i] * v.values[i];
    }
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& x : v.values) x /= norm;
    return v;
  }

 protected:
  WireResponse respond(const BackendBinding&, const json& request) override {
    const auto in = request.find("input");
    if (in == request.end() || !in->is_object()) return {400, R"({"error":"missing input"})"};
    EmbeddingVector v;
    if (in->contains("text"))
      v = embed("text", (*in)["text"].get<std::string>());
    else if (in->contains("image_b64"))
      v = embed("image", sha256_hex((*in)["image_b64"].get<std::string>()));
    else
      return {400, R"({"error":"input needs text or image_b64"})"};
    return {200, json{{"embedding", v.values}}.dump()};
  }

 private:
  // Box-Muller over raw engine output; avoids implementation-defined std distributions.
  std::vector<double> unit_gaussian(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    auto uniform = [&rng] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
    std::vector<double> g(dimension_);
    double norm = 0.0;
    for (std::size_t i = 0; i < dimension_; ++i) {
      g[i] = std::sqrt(-2.0 * std::log(uniform())) * std::cos(2.0 * 3.14159265358979323846 * uniform());
      norm += g[i] * g[i];
    }
    norm = std::sqrt(norm);
    for (double& x : g) x /= norm;
    return g;
  }

  std::size_t dimension_;
  std::uint64_t seed_;
  double alignment_;
  std::vector<double> anchor_;
};

/// Builds the transport for a binding's URL. mock:// URLs are served in-process:
///   mock://echo, mock://hash?seed=N, mock://embed?dim=D&seed=N&align=A
inline std::shared_ptr<Transport> make_transport(const BackendBinding& binding, std::uint64_t default_seed = 0) {
  const Url url = parse_url(binding.endpoint_url);
  if (url.scheme == "http" || url.scheme == "https") return std::make_shared<HttpTransport>();
  if (url.scheme != "mock") throw std::invalid_argument("unsupported backend scheme: " + url.scheme);
  auto q = [&](const char* key) -> std::optional<std::string> {
    const auto it = url.query.find(key);
    return it == url.query.end() ? std::nullopt : std::optional<std::string>(it->second);
  };
  const std::uint64_t seed = q("seed") ? std::stoull(*q("seed")) : default_seed;
  if (url.host == "echo") return std::make_shared<EchoTransport>();
  if (url.host == "hash") return std::make_shared<HashTextTransport>(seed);
  if (url.host == "embed")
    return std::make_shared<HashEmbedTransport>(q("dim") ? std::stoul(*q("dim")) : 16, seed,
                                                q("align") ? std::stod(*q("align")) : 0.5);
  throw std::invalid_argument("unknown mock backend: " + url.host);
}

// ---------------------------------------------------------------------------
// Response cache

/// Content-addressed response store: in memory, and optionally as <dir>/<key>.json files.
class ResponseCache {
 public:
  explicit ResponseCache(std::optional<std::filesystem::path> dir = std::nullopt) : dir_(std::move(dir)) {}

  std::optional<json> get(const std::string& key) {
    std::lock_guard lock(mu_);
    if (const auto it = memory_.find(key); it != memory_.end()) return it->second;
    if (dir_) {
      const auto path = *dir_ / (key + ".json");
      std::error_code ec;
      if (std::filesystem::exists(path, ec)) {
        json stored = json::parse(read_file_bytes(path));
        memory_[key] = stored["response"];
        return stored["response"];
      }
    }
    return std::nullopt;
  }

  void put(const std::string& key, const json& key_material, const json& response) {
    std::lock_guard lock(mu_);
    memory_[key] = response;
    if (dir_) write_file_atomic(*dir_ / (key + ".json"), json{{"request", key_material}, {"response", response}}.dump(2) + "\n");
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return memory_.size();
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, json> memory_;
  std::optional<std::filesystem::path> dir_;
};

// ---------------------------------------------------------------------------
// Gateway

struct GatewayOptions {
  bool cache_enabled = true;
  std::optional<std::filesystem::path> cache_dir;
  std::size_t max_in_flight = 4;  // per binding
  std::chrono::milliseconds backoff_base{500};
  std::chrono::milliseconds backoff_cap{8000};
  std::uint64_t jitter_seed = 0;
  std::uint64_t mock_seed = 0;  // seed for mock:// bindings that do not name one
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
};

/// Uniform access to VLM, LLM and embedding backends with caching, retries and a per-binding
/// in-flight limit. Safe for concurrent use.
class Gateway {
 public:
  explicit Gateway(GatewayOptions opts = {}) : opts_(std::move(opts)), cache_(opts_.cache_dir), jitter_(opts_.jitter_seed) {
    if (opts_.max_in_flight == 0) throw std::invalid_argument("max_in_flight must be positive");
  }

  /// Routes every request for `endpoint_url` to `transport` (tests, embedding the gateway).
  void register_transport(const std::string& endpoint_url, std::shared_ptr<Transport> transport) {
    std::lock_guard lock(mu_);
    transports_[endpoint_url] = std::move(transport);
  }

  std::string vlm_query(const BackendBinding& b, const std::filesystem::path& image, std::string_view prompt,
                        const GenerationConfig& cfg) {
    require_kind(b, BackendKind::vlm);
    if (prompt.empty()) throw BackendError(BackendError::Kind::invalid, "empty prompt");
    cfg.validate();
    const std::string bytes = read_file_bytes(image);
    const json key = {{"kind", "vlm"}, {"model", b.model_id}, {"image", sha256_hex(bytes)},
                      {"prompt", prompt}, {"cfg", cfg.to_json()}};
    const json res = cached(key, [&] {
      const std::string b64 = base64_encode(bytes);
      return json{{"text", wire::parse_chat_response(call(b, wire::chat_request(b, prompt, cfg, &b64)))}};
    });
    return res.at("text").get<std::string>();
  }

  std::string llm_query(const BackendBinding& b, std::string_view prompt, const GenerationConfig& cfg) {
    require_kind(b, BackendKind::llm);
    if (prompt.empty()) throw BackendError(BackendError::Kind::invalid, "empty prompt");
    cfg.validate();
    const json key = {{"kind", "llm"}, {"model", b.model_id}, {"prompt", prompt}, {"cfg", cfg.to_json()}};
    const json res = cached(key, [&] {
      return json{{"text", wire::parse_chat_response(call(b, wire::chat_request(b, prompt, cfg)))}};
    });
    return res.at("text").get<std::string>();
  }

  EmbeddingVector embed_text(const BackendBinding& b, std::string_view text) {
    require_kind(b, BackendKind::embed);
    if (text.empty()) throw BackendError(BackendError::Kind::invalid, "empty text");
    const json key = {{"kind", "embed"}, {"model", b.model_id}, {"text", text}};
    return embedding(b, key, [&] { return wire::embed_text_request(b, text); });
  }

  EmbeddingVector embed_image(const BackendBinding& b, const std::filesystem::path& image) {
    require_kind(b, BackendKind::embed);
    const std::string bytes = read_file_bytes(image);
    if (bytes.empty()) throw BackendError(BackendError::Kind::invalid, "empty image");
    const json key = {{"kind", "embed"}, {"model", b.model_id}, {"image", sha256_hex(bytes)}};
    return embedding(b, key, [&] { return wire::embed_image_request(b, base64_encode(bytes)); });
  }

  /// Wire attempts made through this gateway (cache hits excluded).
  std::size_t attempts() const { return attempts_.load(); }
  std::size_t cache_hits() const { return cache_hits_.load(); }
  const GatewayOptions& options() const { return opts_; }

 private:
  struct Limiter {
    std::mutex mu;
    std::condition_variable cv;
    std::size_t active = 0;
  };

  static void require_kind(const BackendBinding& b, BackendKind k) {
    if (b.kind != k)
      throw BackendError(BackendError::Kind::invalid, "binding " + b.model_id + " is " + std::string(kind_name(b.kind)) +
                                                          ", expected " + std::string(kind_name(k)));
  }

  std::shared_ptr<Transport> transport_for(const BackendBinding& b) {
    std::lock_guard lock(mu_);
    auto& t = transports_[b.endpoint_url];
    if (!t) t = make_transport(b, opts_.mock_seed);
    return t;
  }

  Limiter& limiter_for(const BackendBinding& b) {
    std::lock_guard lock(mu_);
    auto& l = limiters_[b.endpoint_url + "#" + b.model_id];
    if (!l) l = std::make_unique<Limiter>();
    return *l;
  }

  std::chrono::milliseconds backoff(int attempt) {
    const auto exp = opts_.backoff_base.count() * (std::int64_t{1} << std::min(attempt, 20));
    const auto ceiling = std::min<std::int64_t>(exp, opts_.backoff_cap.count());
    std::lock_guard lock(mu_);
    // equal jitter: [ceiling/2, ceiling]
    const auto half = ceiling / 2;
    return std::chrono::milliseconds(half + static_cast<std::int64_t>(jitter_() % static_cast<std::uint64_t>(ceiling - half + 1)));
  }

  // Sends with retries; returns the parsed JSON body of a 2xx response.
  json call(const BackendBinding& b, const json& request) {
    b.validate();
    auto transport = transport_for(b);
    Limiter& limiter = limiter_for(b);
    std::optional<BackendError> last;
    for (int attempt = 0; attempt <= b.max_retries; ++attempt) {
      if (attempt > 0) opts_.sleep(backoff(attempt - 1));
      {
        std::unique_lock lock(limiter.mu);
        limiter.cv.wait(lock, [&] { return limiter.active < opts_.max_in_flight; });
        ++limiter.active;
      }
      struct Release {
        Limiter& l;
        ~Release() {
          {
            std::lock_guard lock(l.mu);
            --l.active;
          }
          l.cv.notify_one();
        }
      } release{limiter};
      attempts_.fetch_add(1);
      try {
        const WireResponse res = transport->post(b, request);
        if (res.status >= 200 && res.status < 300) {
          try {
            return json::parse(res.body);
          } catch (const json::parse_error&) {
            throw BackendError(BackendError::Kind::protocol, b.model_id + ": response is not JSON");
          }
        }
        BackendError err(BackendError::Kind::status,
                         b.model_id + ": HTTP " + std::to_string(res.status) + ": " + res.body, res.status);
        if (!err.retryable()) throw err;
        last = err;
      } catch (const BackendError& e) {
        if (!e.retryable()) throw;
        last = e;
      }
    }
    throw BackendError(last->kind(),
                       std::string(last->what()) + " (after " + std::to_string(b.max_retries + 1) + " attempts)",
                       last->status());
  }

  // Single-flight cache lookup: one producer per key; concurrent duplicates wait for it.
  template <typename Produce>
  json cached(const json& key_material, Produce&& produce) {
    if (!opts_.cache_enabled) return produce();
    const std::string key = sha256_hex(key_material.dump());
    std::promise<json> promise;
    std::shared_future<json> pending;
    {
      std::lock_guard lock(mu_);
      if (auto hit = cache_.get(key)) {
        cache_hits_.fetch_add(1);
        return *hit;
      }
      if (const auto it = in_flight_.find(key); it != in_flight_.end()) {
        pending = it->second;
      } else {
        in_flight_[key] = promise.get_future().share();
      }
    }
    if (pending.valid()) {
      cache_hits_.fetch_add(1);
      return pending.get();
    }
    try {
      json value = produce();
      cache_.put(key, key_material, value);
      promise.set_value(value);
      std::lock_guard lock(mu_);
      in_flight_.erase(key);
      return value;
    } catch (...) {
      promise.set_exception(std::current_exception());
      std::lock_guard lock(mu_);
      in_flight_.erase(key);
      throw;
    }
  }

  EmbeddingVector embedding(const BackendBinding& b, const json& key, const std::function<json()>& request) {
    const json res = cached(key, [&] {
      const EmbeddingVector v = wire::parse_embedding_response(call(b, request()));
      return json{{"embedding", v.values}};
    });
    EmbeddingVector v{res.at("embedding").get<std::vector<double>>()};
    std::lock_guard lock(mu_);
    auto& dim = dimensions_[b.id()];
    if (dim == 0) dim = v.dimension();
    if (v.dimension() != dim)
      throw BackendError(BackendError::Kind::protocol, b.model_id + ": dimension mismatch (" +
                                                           std::to_string(v.dimension()) + " vs " + std::to_string(dim) + ")");
    return v;
  }

  GatewayOptions opts_;
  ResponseCache cache_;
  std::mutex mu_;
  std::mt19937_64 jitter_;
  std::map<std::string, std::shared_ptr<Transport>> transports_;
  std::map<std::string, std::unique_ptr<Limiter>> limiters_;
  std::map<std::string, std::shared_future<json>> in_flight_;
  std::map<std::string, std::size_t> dimensions_;
  std::atomic<std::size_t> attempts_{0};
  std::atomic<std::size_t> cache_hits_{0};
};

}  // namespace memeguard
