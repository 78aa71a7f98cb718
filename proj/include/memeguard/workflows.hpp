#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "memeguard/backend.hpp"
#include "memeguard/config.hpp"
#include "memeguard/core.hpp"
#include "memeguard/evaluation.hpp"
#include "memeguard/intervention.hpp"
#include "memeguard/pipeline.hpp"

// Batch workflows behind the command-line subcommands. Each writes only below its output
// directory and records run_meta.json there.
namespace memeguard::workflows {

namespace fs = std::filesystem;

inline std::string run_id(const Config& c) {
  return c.run_id.empty() ? sha256_hex(c.to_json().dump()).substr(0, 12) : c.run_id;
}

inline fs::path report_dir(const Config& c, const fs::path& out) { return out / "reports" / run_id(c); }

inline GatewayOptions gateway_options(const Config& c, const fs::path& out) {
  GatewayOptions o;
  o.cache_enabled = c.cache_enabled;
  o.cache_dir = c.cache_dir ? *c.cache_dir : out / "cache";
  o.mock_seed = c.seed;
  o.jitter_seed = c.seed;
  return o;
}

inline void write_run_meta(const Config& c, const fs::path& out, const std::string& command, json extra = json::object()) {
  json meta = {{"command", command},
               {"version", kVersion},
               {"run_id", run_id(c)},
               {"seed", c.seed},
               {"config", c.to_json()}};
  for (auto& [k, v] : extra.items()) meta[k] = v;
  write_file_atomic(out / "run_meta.json", meta.dump(2) + "\n");
}

struct Outcome {
  std::vector<std::string> warnings;
  std::vector<fs::path> written;
};

inline PipelineContext context(const Config& c, Gateway& gw, const fs::path& dataset) {
  return PipelineContext{gw, c.effective_bindings(), c.generation, c.mks(), dataset.parent_path(), c.parallel};
}

inline Outcome run_knowledge(const Config& c, Gateway& gw, const fs::path& dataset, const fs::path& out, bool raw_vlm = false) {
  c.validate();
  const auto memes = load_dataset(dataset);
  const auto ctx = context(c, gw, dataset);
  const KnowledgeBatch batch = extract_knowledge(ctx, memes, raw_vlm ? ctx.bindings.raw_vlm : ctx.bindings.vlmeme);
  const fs::path path = out / (raw_vlm ? "knowledge_raw_vlm.jsonl" : "knowledge.jsonl");
  save_knowledge(path, batch.records);
  write_run_meta(c, out, raw_vlm ? "knowledge --raw" : "knowledge");
  return {batch.warnings, {path}};
}

inline Outcome run_filter(const Config& c, Gateway& gw, const fs::path& dataset, const fs::path& knowledge_path,
                          const fs::path& out) {
  c.validate();
  const auto memes = load_dataset(dataset);
  const auto knowledge = load_knowledge(knowledge_path);
  const auto ctx = context(c, gw, dataset);
  const FilterBatch batch = filter_batch(ctx, knowledge, embed_images(ctx, memes));
  save_knowledge(out / "filtered.jsonl", batch.records);
  write_file_atomic(out / "trace.jsonl", detail::to_jsonl(batch.trace_rows));
  write_run_meta(c, out, "filter", {{"retained_sentences", batch.retained}, {"total_sentences", batch.sentences}});
  return {batch.warnings, {out / "filtered.jsonl", out / "trace.jsonl"}};
}

inline Outcome run_intervene(const Config& c, Gateway& gw, const fs::path& dataset,
                             const std::optional<fs::path>& knowledge_path, Setting setting, const fs::path& out) {
  c.validate();
  const auto memes = load_dataset(dataset);
  std::map<std::string, KnowledgeSet> knowledge;
  if (needs_knowledge(setting)) {
    if (!knowledge_path) throw StageError("intervene", "setting " + std::string(setting_name(setting)) + " needs --knowledge");
    knowledge = by_meme(load_knowledge(*knowledge_path));
  }
  const auto ctx = context(c, gw, dataset);
  std::vector<Intervention> all;
  for (const auto& llm : ctx.bindings.llms) {
    auto ivs = intervene_batch(ctx, memes, setting, knowledge, llm);
    all.insert(all.end(), ivs.begin(), ivs.end());
  }
  save_interventions(out / "interventions.jsonl", all);
  write_run_meta(c, out, "intervene", {{"setting", setting_name(setting)}});
  return {{}, {out / "interventions.jsonl"}};
}

inline Outcome evaluate_to(const Config& c, Gateway& gw, const std::vector<Intervention>& ivs,
                           const std::vector<MemeRecord>& memes, const fs::path& out) {
  Outcome o;
  const auto golds = golds_of(memes);
  std::vector<Intervention> scored;
  for (const auto& iv : ivs)
    if (golds.count(iv.meme_id)) scored.push_back(iv);
  if (scored.size() < ivs.size())
    o.warnings.push_back(std::to_string(ivs.size() - scored.size()) + " interventions have no gold and were not scored");
  if (scored.empty()) return o;
  const auto report = evaluate_run(scored, golds, token_embedder(gw, c.bindings.embed),
                                   {{"embed", c.bindings.embed.id()}, {"run_id", run_id(c)}});
  const fs::path dir = report_dir(c, out);
  write_metric_report(dir, report);
  o.written = {dir / "table.json", dir / "table.txt"};
  return o;
}

inline Outcome run_evaluate(const Config& c, Gateway& gw, const fs::path& interventions, const fs::path& dataset,
                            const fs::path& out) {
  const auto memes = load_dataset(dataset);
  const auto ivs = load_interventions(interventions);
  Outcome o;
  try {
    o = evaluate_to(c, gw, ivs, memes, out);
  } catch (const std::exception& e) {
    throw StageError("evaluate", e.what());
  }
  if (o.written.empty()) throw StageError("evaluate", "no intervention has a gold reference");
  write_run_meta(c, out, "evaluate");
  return o;
}

/// knowledge -> filter -> intervene (every LLM x setting) -> evaluate.
inline Outcome run_pipeline(const Config& c, Gateway& gw, const fs::path& dataset, const fs::path& out) {
  c.validate();
  const auto memes = load_dataset(dataset);
  const auto ctx = context(c, gw, dataset);
  Outcome o;
  auto wants = [&](Setting s) { return std::find(c.settings.begin(), c.settings.end(), s) != c.settings.end(); };

  std::map<std::string, KnowledgeSet> vlmeme, raw, filtered;
  if (wants(Setting::ocr_vlmeme) || wants(Setting::memeguard)) {
    const auto batch = extract_knowledge(ctx, memes, ctx.bindings.vlmeme);
    save_knowledge(out / "knowledge.jsonl", batch.records);
    o.written.push_back(out / "knowledge.jsonl");
    o.warnings.insert(o.warnings.end(), batch.warnings.begin(), batch.warnings.end());
    vlmeme = by_meme(batch.records);
    if (wants(Setting::memeguard)) {
      const auto fb = filter_batch(ctx, batch.records, embed_images(ctx, memes));
      save_knowledge(out / "filtered.jsonl", fb.records);
      write_file_atomic(out / "trace.jsonl", detail::to_jsonl(fb.trace_rows));
      o.written.push_back(out / "filtered.jsonl");
      o.written.push_back(out / "trace.jsonl");
      o.warnings.insert(o.warnings.end(), fb.warnings.begin(), fb.warnings.end());
      filtered = by_meme(fb.records);
    }
  }
  if (wants(Setting::ocr_raw_vlm)) {
    const auto batch = extract_knowledge(ctx, memes, ctx.bindings.raw_vlm);
    save_knowledge(out / "knowledge_raw_vlm.jsonl", batch.records);
    o.written.push_back(out / "knowledge_raw_vlm.jsonl");
    o.warnings.insert(o.warnings.end(), batch.warnings.begin(), batch.warnings.end());
    raw = by_meme(batch.records);
  }

  std::vector<Intervention> all;
  const std::map<std::string, KnowledgeSet> none;
  for (const auto& llm : ctx.bindings.llms)
    for (Setting s : c.settings) {
      const auto& ks = s == Setting::memeguard ? filtered : s == Setting::ocr_vlmeme ? vlmeme : s == Setting::ocr_raw_vlm ? raw : none;
      auto ivs = intervene_batch(ctx, memes, s, ks, llm);
      all.insert(all.end(), ivs.begin(), ivs.end());
    }
  save_interventions(out / "interventions.jsonl", all);
  o.written.push_back(out / "interventions.jsonl");

  try {
    Outcome ev = evaluate_to(c, gw, all, memes, out);
    o.warnings.insert(o.warnings.end(), ev.warnings.begin(), ev.warnings.end());
    o.written.insert(o.written.end(), ev.written.begin(), ev.written.end());
  } catch (const std::exception& e) {
    throw StageError("evaluate", e.what());
  }
  write_run_meta(c, out, "pipeline");
  o.written.push_back(out / "run_meta.json");
  return o;
}

inline Outcome run_sweep(const Config& c, Gateway& gw, const fs::path& dataset, const std::vector<double>& thresholds,
                         const fs::path& out) {
  RunSpec spec;
  spec.dataset = dataset;
  spec.settings = {Setting::memeguard};
  spec.bindings = c.effective_bindings();
  spec.mks = c.mks();
  spec.generation = c.generation;
  spec.output_dir = out;
  spec.seed = c.seed;
  spec.parallel = c.parallel;
  const auto rows = threshold_sweep(spec, thresholds, gw);
  const fs::path dir = report_dir(c, out);
  write_file_atomic(dir / "sweep.csv", format_sweep_csv(rows));
  json detail_rows = json::array();
  for (const auto& r : rows)
    detail_rows.push_back({{"threshold", r.threshold},
                           {"llm_model", r.llm_model},
                           {"retained_sentences", r.retained_sentences},
                           {"total_sentences", r.total_sentences},
                           {"scores", r.corpus.to_json()}});
  write_file_atomic(dir / "sweep.json", detail_rows.dump(2) + "\n");
  write_run_meta(c, out, "sweep", {{"thresholds", thresholds}});
  return {{}, {dir / "sweep.csv", dir / "sweep.json"}};
}

inline Outcome run_agreement(const Config& c, const fs::path& ratings_a, const fs::path& ratings_b, const fs::path& out) {
  const auto a = load_ratings(ratings_a);
  const auto b = load_ratings(ratings_b);
  AgreementReport rep;
  try {
    rep = agreement(a, b);
  } catch (const std::exception& e) {
    throw StageError("agreement", e.what());
  }
  const fs::path dir = report_dir(c, out);
  write_file_atomic(dir / "agreement.json", to_json(rep).dump(2) + "\n");
  write_run_meta(c, out, "agreement");
  return {{}, {dir / "agreement.json"}};
}

}  // namespace memeguard::workflows
