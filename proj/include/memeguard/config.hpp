#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "memeguard/backend.hpp"
#include "memeguard/intervention.hpp"
#include "memeguard/pipeline.hpp"
#include "memeguard/selection.hpp"

namespace memeguard {

// Config file format: one `key = value` per line, `#` starts a comment, blank lines ignored.
//
// Bindings use a prefix and the keys url, model, api_key_env, timeout_ms, max_retries:
//   vlm.*      meme-aligned VLM (knowledge for ocr_vlmeme and memeguard)
//   vlm_raw.*  base VLM (knowledge for ocr_raw_vlm)
//   embed.*    joint text/image embedder (MKS and BERTScore tokens)
//   llm.*      intervention LLM; further LLMs as llm_<name>.* (sorted by prefix)
// Other keys:
//   mks.threshold  mks.fallback (empty|keep_top1)
//   gen.temperature gen.top_p gen.top_k gen.max_tokens
//   run.seed run.parallel run.settings (comma list) run.id
//   cache.enabled (true|false) cache.dir
//   server.host server.port server.data_dir server.token_env server.max_upload_bytes server.ui_dir

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path data_dir = "data";
  std::string token_env = "MEMEGUARD_TOKEN";
  std::size_t max_upload_bytes = 10 * 1024 * 1024;
  std::filesystem::path ui_dir;
};

struct Config {
  PipelineBindings bindings;
  std::map<std::string, BackendBinding> extra_llms;  // llm_<name> prefixes
  double threshold = 0.5;
  FallbackPolicy fallback = FallbackPolicy::empty;
  GenerationConfig generation;
  std::uint64_t seed = 0;
  std::size_t parallel = 4;
  std::vector<Setting> settings{kSettings.begin(), kSettings.end()};
  std::string run_id;
  bool cache_enabled = true;
  std::optional<std::filesystem::path> cache_dir;
  ServerConfig server;

  MksConfig mks() const { return {threshold, bindings.embed, fallback}; }

  std::vector<BackendBinding> llms() const {
    std::vector<BackendBinding> out{bindings.llms.front()};
    for (const auto& [_, b] : extra_llms) out.push_back(b);
    return out;
  }

  PipelineBindings effective_bindings() const {
    PipelineBindings b = bindings;
    b.llms = llms();
    return b;
  }

  void set(const std::string& key, const std::string& value) {
    try {
      set_impl(key, trim(value));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("bad value for " + key + ": " + e.what());
    }
  }

  /// Applies a "key=value" override.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + assignment);
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  }

  static Config load(const std::filesystem::path& path) {
    Config c;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key = value");
      try {
        c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
      } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ":" + std::to_string(n) + ": " + e.what());
      }
    }
    return c;
  }

  void validate() const {
    for (const auto* b : {&bindings.vlmeme, &bindings.raw_vlm, &bindings.embed}) b->validate();
    for (const auto& b : llms()) b.validate();
    mks().validate();
    generation.validate();
    if (parallel == 0) throw ConfigError("run.parallel must be positive");
    if (settings.empty()) throw ConfigError("run.settings is empty");
  }

  json to_json() const {
    json settings_json = json::array();
    for (Setting s : settings) settings_json.push_back(setting_name(s));
    json llms_json = json::array();
    for (const auto& b : llms()) llms_json.push_back(b.to_json());
    return {{"bindings",
             {{"vlm", bindings.vlmeme.to_json()},
              {"vlm_raw", bindings.raw_vlm.to_json()},
              {"embed", bindings.embed.to_json()},
              {"llms", llms_json}}},
            {"mks", {{"threshold", threshold}, {"fallback", fallback_name(fallback)}}},
            {"generation", generation.to_json()},
            {"seed", seed},
            {"parallel", parallel},
            {"settings", settings_json}};
  }

 private:
  static bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("expected a boolean, got " + v);
  }

  static void set_binding(BackendBinding& b, const std::string& field, const std::string& v) {
    if (field == "url") b.endpoint_url = v;
    else if (field == "model") b.model_id = v;
    else if (field == "api_key_env") b.api_key_env = v;
    else if (field == "timeout_ms") b.timeout = std::chrono::milliseconds(std::stol(v));
    else if (field == "max_retries") b.max_retries = std::stoi(v);
    else throw ConfigError("unknown binding field: " + field);
  }

  void set_impl(const std::string& key, const std::string& v) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) throw ConfigError("unknown key: " + key);
    const std::string prefix = key.substr(0, dot), field = key.substr(dot + 1);
    if (prefix == "vlm") return set_binding(bindings.vlmeme, field, v);
    if (prefix == "vlm_raw") return set_binding(bindings.raw_vlm, field, v);
    if (prefix == "embed") return set_binding(bindings.embed, field, v);
    if (prefix == "llm") return set_binding(bindings.llms.front(), field, v);
    if (prefix.rfind("llm_", 0) == 0) {
      auto [it, inserted] = extra_llms.try_emplace(prefix, BackendBinding{"", "", prefix, BackendKind::llm});
      return set_binding(it->second, field, v);
    }
    if (key == "mks.threshold") threshold = std::stod(v);
    else if (key == "mks.fallback") fallback = parse_fallback(v);
    else if (key == "gen.temperature") generation.temperature = std::stod(v);
    else if (key == "gen.top_p") generation.top_p = std::stod(v);
    else if (key == "gen.top_k") generation.top_k = std::stoi(v);
    else if (key == "gen.max_tokens") generation.max_tokens = std::stoi(v);
    else if (key == "run.seed") seed = std::stoull(v);
    else if (key == "run.parallel") parallel = std::stoul(v);
    else if (key == "run.id") run_id = v;
    else if (key == "run.settings") {
      settings.clear();
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ','))
        if (!trim(item).empty()) settings.push_back(parse_setting(trim(item)));
    } else if (key == "cache.enabled") cache_enabled = parse_bool(v);
    else if (key == "cache.dir") cache_dir = v.empty() ? std::nullopt : std::optional<std::filesystem::path>(v);
    else if (key == "server.host") server.host = v;
    else if (key == "server.port") server.port = std::stoi(v);
    else if (key == "server.data_dir") server.data_dir = v;
    else if (key == "server.token_env") server.token_env = v;
    else if (key == "server.max_upload_bytes") server.max_upload_bytes = std::stoul(v);
    else if (key == "server.ui_dir") server.ui_dir = v;
    else throw ConfigError("unknown key: " + key);
  }
};

}  // namespace memeguard
