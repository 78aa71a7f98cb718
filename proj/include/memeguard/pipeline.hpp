#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "memeguard/backend.hpp"
#include "memeguard/core.hpp"
#include "memeguard/intervention.hpp"
#include "memeguard/knowledge.hpp"
#include "memeguard/selection.hpp"

namespace memeguard {

/// Runs fn(i) for i in [0, n) on at most `parallel` threads. Rethrows the first failure
/// (lowest index) after all workers stop.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t parallel, Fn&& fn) {
  parallel = std::max<std::size_t>(1, std::min(parallel, n));
  if (parallel <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < parallel; ++w)
      workers.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// A failure tagged with the pipeline stage it came from.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct PipelineBindings {
  BackendBinding vlmeme{"mock://hash", "", "vlmeme-mock", BackendKind::vlm};
  BackendBinding raw_vlm{"mock://hash", "", "raw-vlm-mock", BackendKind::vlm};
  std::vector<BackendBinding> llms{{"mock://hash", "", "llm-mock", BackendKind::llm}};
  BackendBinding embed{"mock://embed?dim=16", "", "embed-mock", BackendKind::embed};
};

/// Everything a batch stage needs besides its inputs.
struct PipelineContext {
  Gateway& gateway;
  PipelineBindings bindings;
  GenerationConfig generation;
  MksConfig mks;
  std::filesystem::path image_root;  // relative image paths resolve against this
  std::size_t parallel = 4;

  std::filesystem::path image_for(const MemeRecord& m) const {
    const std::filesystem::path p(m.image_path);
    return p.is_absolute() ? p : image_root / p;
  }
};

struct KnowledgeBatch {
  std::vector<KnowledgeRecord> records;  // dataset order
  std::vector<std::string> warnings;
};

inline KnowledgeBatch extract_knowledge(const PipelineContext& ctx, const std::vector<MemeRecord>& memes,
                                        const BackendBinding& vlm) {
  KnowledgeBatch out;
  out.records.resize(memes.size());
  std::vector<std::vector<std::string>> warnings(memes.size());
  try {
    parallel_for(memes.size(), ctx.parallel, [&](std::size_t i) {
      KnowledgeResult r = generate_knowledge(memes[i], ctx.image_for(memes[i]), ctx.gateway, vlm, ctx.generation);
      out.records[i] = {memes[i].id, std::move(r.knowledge)};
      warnings[i] = std::move(r.warnings);
    });
  } catch (const std::exception& e) {
    throw StageError("knowledge", e.what());
  }
  for (auto& w : warnings) out.warnings.insert(out.warnings.end(), w.begin(), w.end());
  return out;
}

struct FilterBatch {
  std::vector<KnowledgeRecord> records;
  std::vector<json> trace_rows;
  std::vector<std::string> warnings;
  std::size_t retained = 0;
  std::size_t sentences = 0;
};

/// Image vectors per meme id (computed once, reused across facets and thresholds).
inline std::map<std::string, EmbeddingVector> embed_images(const PipelineContext& ctx,
                                                           const std::vector<MemeRecord>& memes) {
  std::vector<EmbeddingVector> vecs(memes.size());
  try {
    parallel_for(memes.size(), ctx.parallel, [&](std::size_t i) {
      vecs[i] = ctx.gateway.embed_image(ctx.mks.embed_binding, ctx.image_for(memes[i]));
    });
  } catch (const std::exception& e) {
    throw StageError("filter", e.what());
  }
  std::map<std::string, EmbeddingVector> out;
  for (std::size_t i = 0; i < memes.size(); ++i) out[memes[i].id] = std::move(vecs[i]);
  return out;
}

inline FilterBatch filter_batch(const PipelineContext& ctx, const std::vector<KnowledgeRecord>& knowledge,
                                const std::map<std::string, EmbeddingVector>& image_vectors) {
  FilterBatch out;
  out.records.resize(knowledge.size());
  std::vector<FilterResult> results(knowledge.size());
  const TextEmbedder embed = [&](const std::string& s) { return ctx.gateway.embed_text(ctx.mks.embed_binding, s); };
  try {
    parallel_for(knowledge.size(), ctx.parallel, [&](std::size_t i) {
      const auto it = image_vectors.find(knowledge[i].meme_id);
      if (it == image_vectors.end()) throw std::invalid_argument("no image vector for " + knowledge[i].meme_id);
      results[i] = filter_knowledge(knowledge[i].facets, it->second, ctx.mks, embed);
    });
  } catch (const std::exception& e) {
    throw StageError("filter", e.what());
  }
  for (std::size_t i = 0; i < knowledge.size(); ++i) {
    out.records[i] = {knowledge[i].meme_id, results[i].knowledge};
    for (const auto& row : results[i].trace) out.trace_rows.push_back(trace_row(knowledge[i].meme_id, row, ctx.mks.threshold));
    out.retained += results[i].retained_count();
    out.sentences += results[i].trace.size();
    for (auto& w : results[i].warnings) out.warnings.push_back(knowledge[i].meme_id + ": " + w);
  }
  return out;
}

/// Generates one intervention per meme. `knowledge` is keyed by meme id and must cover every meme
/// when the setting needs knowledge.
inline std::vector<Intervention> intervene_batch(const PipelineContext& ctx, const std::vector<MemeRecord>& memes,
                                                 Setting setting, const std::map<std::string, KnowledgeSet>& knowledge,
                                                 const BackendBinding& llm) {
  std::vector<Intervention> out(memes.size());
  try {
    parallel_for(memes.size(), ctx.parallel, [&](std::size_t i) {
      const KnowledgeSet* ks = nullptr;
      if (const auto it = knowledge.find(memes[i].id); it != knowledge.end()) ks = &it->second;
      out[i] = generate_intervention(memes[i], setting, ks, ctx.gateway, llm, ctx.generation);
    });
  } catch (const std::exception& e) {
    throw StageError("intervene", e.what());
  }
  return out;
}

inline std::map<std::string, KnowledgeSet> by_meme(const std::vector<KnowledgeRecord>& rows) {
  std::map<std::string, KnowledgeSet> out;
  for (const auto& r : rows) out[r.meme_id] = r.facets;
  return out;
}

}  // namespace memeguard
