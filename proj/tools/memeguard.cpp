// memeguard: batch workflows and the moderation service.

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "memeguard/adapter.hpp"
#include "memeguard/config.hpp"
#include "memeguard/evaluation.hpp"
#include "memeguard/service.hpp"
#include "memeguard/workflows.hpp"

namespace fs = std::filesystem;
using namespace memeguard;

namespace {

struct Globals {
  std::string config_path;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> parallel;
  std::optional<double> threshold;
  std::optional<double> temperature;
  std::optional<std::string> vlm, vlm_raw, llm, embed, run_id;
  std::vector<std::string> overrides;
};

Config effective_config(const Globals& g) {
  Config c = g.config_path.empty() ? Config{} : Config::load(g.config_path);
  for (const auto& o : g.overrides) c.apply_override(o);
  if (g.seed) c.seed = *g.seed;
  if (g.parallel) c.parallel = *g.parallel;
  if (g.threshold) c.threshold = *g.threshold;
  if (g.temperature) c.generation.temperature = *g.temperature;
  if (g.vlm) c.bindings.vlmeme.endpoint_url = *g.vlm;
  if (g.vlm_raw) c.bindings.raw_vlm.endpoint_url = *g.vlm_raw;
  if (g.llm) c.bindings.llms.front().endpoint_url = *g.llm;
  if (g.embed) c.bindings.embed.endpoint_url = *g.embed;
  if (g.run_id) c.run_id = *g.run_id;
  c.validate();
  return c;
}

void report(const workflows::Outcome& o) {
  for (const auto& w : o.warnings) std::cerr << "warning: " << w << '\n';
  for (const auto& p : o.written) std::cout << p.string() << '\n';
}

service::HttpServer* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MemeGuard meme-intervention pipeline"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Key-value config file")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--seed", g.seed, "Run seed (mock backends, jitter)");
  app.add_option("--parallel", g.parallel, "Concurrent memes")->check(CLI::PositiveNumber);
  app.add_option("--threshold", g.threshold, "MKS similarity threshold Th")->check(CLI::Range(0.0, 1.0));
  app.add_option("--temperature", g.temperature, "Generation temperature")->check(CLI::NonNegativeNumber);
  app.add_option("--vlm", g.vlm, "Meme-aligned VLM endpoint URL");
  app.add_option("--vlm-raw", g.vlm_raw, "Base VLM endpoint URL");
  app.add_option("--llm", g.llm, "Intervention LLM endpoint URL");
  app.add_option("--embed", g.embed, "Embedding endpoint URL");
  app.add_option("--run-id", g.run_id, "Report directory name (default: config digest)");
  app.add_option("--set", g.overrides, "Config override key=value (repeatable)");

  std::string dataset, knowledge, interventions, setting = "memeguard", thresholds = "0.0..1.0:0.1";
  std::string ratings_a, ratings_b;
  bool raw = false;

  auto* knowledge_cmd = app.add_subcommand("knowledge", "Generate the five knowledge facets per meme");
  knowledge_cmd->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);
  knowledge_cmd->add_flag("--raw", raw, "Use the base VLM binding (vlm_raw)");

  auto* filter_cmd = app.add_subcommand("filter", "Apply multimodal knowledge selection");
  filter_cmd->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);
  filter_cmd->add_option("--knowledge", knowledge)->required()->check(CLI::ExistingFile);

  auto* intervene_cmd = app.add_subcommand("intervene", "Generate interventions for one setting");
  intervene_cmd->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);
  intervene_cmd->add_option("--knowledge", knowledge)->check(CLI::ExistingFile);
  intervene_cmd->add_option("--setting", setting)
      ->check(CLI::IsMember({"ocr_only", "ocr_raw_vlm", "ocr_vlmeme", "memeguard"}))
      ->capture_default_str();

  auto* pipeline_cmd = app.add_subcommand("pipeline", "knowledge -> filter -> intervene -> evaluate");
  pipeline_cmd->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score interventions against gold references");
  evaluate_cmd->add_option("--interventions", interventions)->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);

  auto* sweep_cmd = app.add_subcommand("sweep", "Threshold sweep of the MemeGuard setting");
  sweep_cmd->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--thresholds", thresholds, "lo..hi:step or comma list")->capture_default_str();

  auto* agreement_cmd = app.add_subcommand("agreement", "Inter-evaluator agreement of two rating files");
  agreement_cmd->add_option("ratings_a", ratings_a)->required()->check(CLI::ExistingFile);
  agreement_cmd->add_option("ratings_b", ratings_b)->required()->check(CLI::ExistingFile);

  auto* lengths_cmd = app.add_subcommand("length-stats", "Word-length statistics of OCR text and gold parts");
  lengths_cmd->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);

  std::size_t d = 8, r = 3;
  std::uint64_t adapter_seed = 1;
  double eps = 1e-5;
  auto* adapter_cmd = app.add_subcommand("adapter-check", "Finite-difference check of the image adapter");
  adapter_cmd->add_option("--d", d)->check(CLI::PositiveNumber)->capture_default_str();
  adapter_cmd->add_option("--r", r)->check(CLI::PositiveNumber)->capture_default_str();
  adapter_cmd->add_option("--seed", adapter_seed)->capture_default_str();
  adapter_cmd->add_option("--eps", eps)->check(CLI::Range(1e-7, 1e-3))->capture_default_str();

  std::optional<int> port;
  auto* serve_cmd = app.add_subcommand("serve", "Run the moderation HTTP service");
  serve_cmd->add_option("--port", port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (adapter_cmd->parsed()) {
      const auto params = adapter::AdapterParams::random(d, r, adapter_seed);
      std::mt19937_64 rng(adapter_seed + 1);
      std::vector<double> z(d);
      for (double& x : z) x = 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
      std::printf("%.3e\n", adapter::grad_check(params, z, eps));
      return 0;
    }
    if (lengths_cmd->parsed()) {
      const auto memes = load_dataset(dataset);
      std::vector<std::string> ocr, content, filler;
      for (const auto& m : memes) {
        ocr.push_back(m.ocr_text);
        if (m.gold && m.gold->has_parts()) {
          content.push_back(m.gold->interventive_content);
          filler.push_back(m.gold->interventive_filler);
        }
      }
      std::cout << json{{"ocr_text", to_json(length_stats(ocr))},
                        {"interventive_content", to_json(length_stats(content))},
                        {"interventive_filler", to_json(length_stats(filler))}}
                       .dump(2)
                << '\n';
      return 0;
    }

    const Config config = effective_config(g);
    const fs::path out = g.out;
    if (agreement_cmd->parsed()) {
      report(workflows::run_agreement(config, ratings_a, ratings_b, out));
      return 0;
    }
    if (serve_cmd->parsed()) {
      Gateway gateway(workflows::gateway_options(config, config.server.data_dir));
      service::ModerationService svc(service::ServiceOptions::from_config(config), gateway);
      const char* token = std::getenv(config.server.token_env.c_str());
      service::HttpServer server(svc, token ? token : "", config.server.ui_dir);
      g_server = &server;
      std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
      });
      const int p = port.value_or(config.server.port);
      std::cerr << "listening on " << config.server.host << ":" << p << '\n';
      if (!server.listen(config.server.host, p)) throw std::runtime_error("cannot listen on port " + std::to_string(p));
      return 0;
    }

    Gateway gateway(workflows::gateway_options(config, out));
    if (knowledge_cmd->parsed()) report(workflows::run_knowledge(config, gateway, dataset, out, raw));
    else if (filter_cmd->parsed()) report(workflows::run_filter(config, gateway, dataset, knowledge, out));
    else if (intervene_cmd->parsed())
      report(workflows::run_intervene(config, gateway, dataset,
                                      knowledge.empty() ? std::nullopt : std::optional<fs::path>(knowledge),
                                      parse_setting(setting), out));
    else if (pipeline_cmd->parsed()) report(workflows::run_pipeline(config, gateway, dataset, out));
    else if (evaluate_cmd->parsed()) report(workflows::run_evaluate(config, gateway, interventions, dataset, out));
    else if (sweep_cmd->parsed()) report(workflows::run_sweep(config, gateway, dataset, parse_thresholds(thresholds), out));
    return 0;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: [" << stage << "] " << e.what() << '\n';
  }
  return 1;
}
