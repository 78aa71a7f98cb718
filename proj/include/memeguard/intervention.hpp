#pragma once

#include <chrono>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "memeguard/backend.hpp"
#include "memeguard/core.hpp"

namespace memeguard {

/// Knowledge configuration of a run:
///   ocr_only     no knowledge
///   ocr_raw_vlm  base-VLM knowledge, unfiltered
///   ocr_vlmeme   meme-aligned VLM knowledge, unfiltered
///   memeguard    meme-aligned VLM knowledge after MKS
enum class Setting { ocr_only, ocr_raw_vlm, ocr_vlmeme, memeguard };

inline constexpr std::array<Setting, 4> kSettings = {Setting::ocr_only, Setting::ocr_raw_vlm, Setting::ocr_vlmeme,
                                                     Setting::memeguard};

inline std::string_view setting_name(Setting s) {
  switch (s) {
    case Setting::ocr_only: return "ocr_only";
    case Setting::ocr_raw_vlm: return "ocr_raw_vlm";
    case Setting::ocr_vlmeme: return "ocr_vlmeme";
    case Setting::memeguard: return "memeguard";
  }
  return "?";
}

inline Setting parse_setting(std::string_view name) {
  for (Setting s : kSettings)
    if (setting_name(s) == name) return s;
  throw std::invalid_argument("unknown setting: " + std::string(name));
}

inline bool needs_knowledge(Setting s) { return s != Setting::ocr_only; }

inline std::string build_prompt(std::string_view ocr, const KnowledgeSet& ks) {
  std::string p;
  p += "This is a toxic meme with the description: ";
  p += ks[Facet::description];
  p += ". The following text is written inside the meme: ";
  p += ocr;
  p += ".  Rationale: Bias: ";
  p += ks[Facet::bias];
  p += ", Toxicity: ";
  p += ks[Facet::toxicity];
  p += ", Claims: ";
  p += ks[Facet::claims];
  p += ", and Stereotypes: ";
  p += ks[Facet::stereotype];
  p += ".  Write an intervention for this meme based on all this knowledge.";
  return p;
}

/// Prompt for the OCR-only setting: the full template with every knowledge clause removed.
inline std::string build_ocr_only_prompt(std::string_view ocr) {
  std::string p = "This is a toxic meme. The following text is written inside the meme: ";
  p += ocr;
  p += ". Write an intervention for this meme.";
  return p;
}

inline std::string prompt_for(Setting setting, std::string_view ocr, const KnowledgeSet* ks) {
  if (!needs_knowledge(setting)) return build_ocr_only_prompt(ocr);
  if (!ks) throw std::invalid_argument("setting " + std::string(setting_name(setting)) + " requires knowledge");
  return build_prompt(ocr, *ks);
}

struct Intervention {
  std::string meme_id;
  Setting setting = Setting::ocr_only;
  std::string llm_model;
  std::string prompt_sent;
  std::string text;
  std::chrono::system_clock::time_point started{};
  std::chrono::system_clock::time_point finished{};
  std::optional<KnowledgeSet> knowledge_snapshot;
};

class InterventionError : public std::runtime_error {
 public:
  InterventionError(const std::string& meme_id, const std::string& what)
      : std::runtime_error(meme_id + ": " + what), meme_id_(meme_id) {}
  const std::string& meme_id() const noexcept { return meme_id_; }

 private:
  std::string meme_id_;
};

/// Builds the setting's prompt, queries the LLM and records the reply verbatim.
/// `knowledge` is the snapshot the setting calls for (filtered for memeguard); ignored for ocr_only.
inline Intervention generate_intervention(const MemeRecord& meme, Setting setting, const KnowledgeSet* knowledge,
                                          Gateway& gateway, const BackendBinding& llm, const GenerationConfig& cfg) {
  if (needs_knowledge(setting) && !knowledge)
    throw InterventionError(meme.id, "missing knowledge for setting " + std::string(setting_name(setting)));
  Intervention out;
  out.meme_id = meme.id;
  out.setting = setting;
  out.llm_model = llm.model_id;
  out.prompt_sent = prompt_for(setting, meme.ocr_text, knowledge);
  if (needs_knowledge(setting)) out.knowledge_snapshot = *knowledge;
  out.started = std::chrono::system_clock::now();
  try {
    out.text = gateway.llm_query(llm, out.prompt_sent, cfg);
  } catch (const std::exception& e) {
    throw InterventionError(meme.id, e.what());
  }
  out.finished = std::chrono::system_clock::now();
  return out;
}

inline json to_json(const Intervention& i) {
  return {{"meme_id", i.meme_id},
          {"setting", setting_name(i.setting)},
          {"llm_model", i.llm_model},
          {"prompt", i.prompt_sent},
          {"intervention", i.text}};
}

inline Intervention intervention_from_json(const json& j, std::size_t line = 0) {
  Intervention i;
  i.meme_id = detail::require_string(j, "meme_id", line);
  try {
    i.setting = parse_setting(detail::require_string(j, "setting", line));
  } catch (const std::invalid_argument& e) {
    throw DatasetError(e.what(), line);
  }
  i.llm_model = detail::require_string(j, "llm_model", line);
  i.prompt_sent = detail::require_string(j, "prompt", line);
  i.text = detail::require_string(j, "intervention", line);
  return i;
}

inline std::vector<Intervention> load_interventions(const std::filesystem::path& path) {
  std::vector<Intervention> out;
  detail::for_each_jsonl(path, [&](const json& j, std::size_t line) { out.push_back(intervention_from_json(j, line)); });
  return out;
}

inline void save_interventions(const std::filesystem::path& path, const std::vector<Intervention>& rows) {
  std::vector<json> js;
  for (const auto& r : rows) js.push_back(to_json(r));
  write_file_atomic(path, detail::to_jsonl(js));
}

}  // namespace memeguard
