#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_set>
#include <vector>

#include "memeguard/digest.hpp"

namespace memeguard {

using json = nlohmann::json;

inline constexpr std::string_view kVersion = "0.1.0";

/// Raised for malformed dataset, knowledge, or rating files. `line` is 1-based, 0 when not
/// tied to a line.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

inline std::string trim(std::string_view s) {
  constexpr std::string_view ws = " \t\n\r\f\v";
  const auto first = s.find_first_not_of(ws);
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(ws);
  return std::string(s.substr(first, last - first + 1));
}

/// Gold reference assembly: trimmed parts joined by one space. An empty part is skipped.
inline std::string concat_gold(std::string_view content, std::string_view filler) {
  std::string a = trim(content);
  std::string b = trim(filler);
  if (a.empty()) return b;
  if (b.empty()) return a;
  return a + " " + b;
}

struct GoldIntervention {
  std::string interventive_content;
  std::string interventive_filler;
  std::string full_text;

  static GoldIntervention from_parts(std::string content, std::string filler) {
    GoldIntervention g{std::move(content), std::move(filler), {}};
    g.full_text = concat_gold(g.interventive_content, g.interventive_filler);
    return g;
  }
  static GoldIntervention from_full_text(std::string text) { return {{}, {}, std::move(text)}; }

  bool has_parts() const { return !interventive_content.empty() || !interventive_filler.empty(); }

  friend bool operator==(const GoldIntervention&, const GoldIntervention&) = default;
};

struct MemeRecord {
  std::string id;
  std::string image_path;
  std::string ocr_text;
  std::optional<GoldIntervention> gold;
  std::optional<std::string> language_tag;
  bool image_only = false;  // explicit permission for empty ocr_text

  friend bool operator==(const MemeRecord&, const MemeRecord&) = default;
};

inline void validate(const MemeRecord& m) {
  if (m.id.empty()) throw DatasetError("empty id");
  if (m.image_path.empty()) throw DatasetError("empty image_path for " + m.id);
  if (m.ocr_text.empty() && !m.image_only)
    throw DatasetError("empty ocr_text for " + m.id + " without image_only flag");
  if (m.gold && m.gold->has_parts() &&
      m.gold->full_text != concat_gold(m.gold->interventive_content, m.gold->interventive_filler))
    throw DatasetError("gold full_text does not match its parts for " + m.id);
}

// ---------------------------------------------------------------------------
// Knowledge facets

enum class Facet : std::size_t { description = 0, bias, stereotype, toxicity, claims };

inline constexpr std::array<Facet, 5> kFacets = {Facet::description, Facet::bias, Facet::stereotype,
                                                 Facet::toxicity, Facet::claims};

inline std::string_view facet_name(Facet f) {
  static constexpr std::array<std::string_view, 5> names = {"description", "bias", "stereotype",
                                                            "toxicity", "claims"};
  return names[static_cast<std::size_t>(f)];
}

inline std::optional<Facet> parse_facet(std::string_view name) {
  for (Facet f : kFacets)
    if (facet_name(f) == name) return f;
  return std::nullopt;
}

/// Five facet texts addressed by name. Every slot always exists; text may be empty.
class KnowledgeSet {
 public:
  KnowledgeSet() = default;

  const std::string& operator[](Facet f) const { return texts_[static_cast<std::size_t>(f)]; }
  std::string& operator[](Facet f) { return texts_[static_cast<std::size_t>(f)]; }
  static constexpr std::size_t size() { return 5; }

  friend bool operator==(const KnowledgeSet&, const KnowledgeSet&) = default;

 private:
  std::array<std::string, 5> texts_{};
};

inline json facets_to_json(const KnowledgeSet& ks) {
  json j = json::object();
  for (Facet f : kFacets) j[std::string(facet_name(f))] = ks[f];
  return j;
}

// Missing facets become empty; unknown facet names are rejected.
inline KnowledgeSet facets_from_json(const json& j) {
  if (!j.is_object()) throw DatasetError("facets must be an object");
  KnowledgeSet ks;
  for (const auto& [key, value] : j.items()) {
    const auto f = parse_facet(key);
    if (!f) throw DatasetError("unknown facet \"" + key + "\"");
    if (!value.is_string()) throw DatasetError("facet \"" + key + "\" must be a string");
    ks[*f] = value.get<std::string>();
  }
  return ks;
}

struct KnowledgeRecord {
  std::string meme_id;
  KnowledgeSet facets;
  friend bool operator==(const KnowledgeRecord&, const KnowledgeRecord&) = default;
};

// ---------------------------------------------------------------------------
// Human ratings

struct HumanRating {
  std::string meme_id;
  std::string evaluator_id;
  std::string system;
  int fluency = 0;
  int adequacy = 0;
  int persuasiveness = 0;
  int informativeness = 0;

  std::array<int, 4> scores() const { return {fluency, adequacy, persuasiveness, informativeness}; }
  friend bool operator==(const HumanRating&, const HumanRating&) = default;
};

inline constexpr std::array<std::string_view, 4> kRatingDimensions = {
    "fluency", "adequacy", "persuasiveness", "informativeness"};

inline void validate(const HumanRating& r) {
  if (r.meme_id.empty()) throw DatasetError("rating without meme_id");
  if (r.evaluator_id.empty()) throw DatasetError("rating without evaluator_id");
  const auto s = r.scores();
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] < 1 || s[i] > 5)
      throw DatasetError(std::string(kRatingDimensions[i]) + " score " + std::to_string(s[i]) +
                         " outside 1..5");
}

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

inline const json& require(const json& obj, const char* field, std::size_t line) {
  const auto it = obj.find(field);
  if (it == obj.end()) throw DatasetError(std::string("missing required field \"") + field + "\"", line);
  return *it;
}

inline std::string require_string(const json& obj, const char* field, std::size_t line) {
  const json& v = require(obj, field, line);
  if (!v.is_string()) throw DatasetError(std::string("field \"") + field + "\" must be a string", line);
  return v.get<std::string>();
}

inline int require_int(const json& obj, const char* field, std::size_t line) {
  const json& v = require(obj, field, line);
  if (!v.is_number_integer()) throw DatasetError(std::string("field \"") + field + "\" must be an integer", line);
  return v.get<int>();
}

// Calls fn(json, line_no) for every non-blank line of a JSONL file.
template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DatasetError(std::string("parse error: ") + e.what(), line_no);
    }
    if (!j.is_object()) throw DatasetError("record is not a JSON object", line_no);
    fn(j, line_no);
  }
}

inline std::string to_jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

}  // namespace detail

inline json to_json(const MemeRecord& m, bool gold_as_string = false) {
  json j = {{"id", m.id}, {"image_path", m.image_path}, {"ocr_text", m.ocr_text}};
  if (m.gold) {
    if (m.gold->has_parts())
      j["gold"] = {{"interventive_content", m.gold->interventive_content},
                   {"interventive_filler", m.gold->interventive_filler}};
    else if (gold_as_string)
      j["gold"] = m.gold->full_text;
    else
      j["gold"] = {{"full_text", m.gold->full_text}};
  }
  if (m.language_tag) j["language_tag"] = *m.language_tag;
  if (m.image_only) j["image_only"] = true;
  return j;
}

inline MemeRecord meme_from_json(const json& j, std::size_t line = 0) {
  MemeRecord m;
  m.id = detail::require_string(j, "id", line);
  m.image_path = detail::require_string(j, "image_path", line);
  m.ocr_text = detail::require_string(j, "ocr_text", line);
  if (const auto it = j.find("gold"); it != j.end() && !it->is_null()) {
    if (it->is_string()) {
      m.gold = GoldIntervention::from_full_text(it->get<std::string>());
    } else if (it->is_object()) {
      const bool has_content = it->contains("interventive_content");
      const bool has_filler = it->contains("interventive_filler");
      if (has_content || has_filler) {
        m.gold = GoldIntervention::from_parts(it->value("interventive_content", ""),
                                              it->value("interventive_filler", ""));
        if (const auto ft = it->find("full_text"); ft != it->end() && *ft != m.gold->full_text)
          throw DatasetError("gold full_text does not match its parts", line);
      } else {
        m.gold = GoldIntervention::from_full_text(detail::require_string(*it, "full_text", line));
      }
    } else {
      throw DatasetError("field \"gold\" must be a string or object", line);
    }
  }
  if (const auto it = j.find("language_tag"); it != j.end() && it->is_string())
    m.language_tag = it->get<std::string>();
  if (const auto it = j.find("image_only"); it != j.end()) {
    if (!it->is_boolean()) throw DatasetError("field \"image_only\" must be a boolean", line);
    m.image_only = it->get<bool>();
  }
  try {
    validate(m);
  } catch (const DatasetError& e) {
    throw DatasetError(e.what(), line);
  }
  return m;
}

/// Reads a JSONL dataset. Records come back in file order; ids must be unique.
inline std::vector<MemeRecord> load_dataset(const std::filesystem::path& path) {
  std::vector<MemeRecord> out;
  std::unordered_set<std::string> seen;
  detail::for_each_jsonl(path, [&](const json& j, std::size_t line) {
    MemeRecord m = meme_from_json(j, line);
    if (!seen.insert(m.id).second) throw DatasetError("duplicate id \"" + m.id + "\"", line);
    out.push_back(std::move(m));
  });
  return out;
}

inline void save_dataset(const std::filesystem::path& path, const std::vector<MemeRecord>& memes) {
  std::vector<json> rows;
  rows.reserve(memes.size());
  for (const auto& m : memes) rows.push_back(to_json(m));
  write_file_atomic(path, detail::to_jsonl(rows));
}

inline json to_json(const KnowledgeRecord& r) {
  return {{"meme_id", r.meme_id}, {"facets", facets_to_json(r.facets)}};
}

inline std::vector<KnowledgeRecord> load_knowledge(const std::filesystem::path& path) {
  std::vector<KnowledgeRecord> out;
  detail::for_each_jsonl(path, [&](const json& j, std::size_t line) {
    KnowledgeRecord r;
    r.meme_id = detail::require_string(j, "meme_id", line);
    try {
      r.facets = facets_from_json(detail::require(j, "facets", line));
    } catch (const DatasetError& e) {
      throw DatasetError(e.what(), line);
    }
    out.push_back(std::move(r));
  });
  return out;
}

inline void save_knowledge(const std::filesystem::path& path, const std::vector<KnowledgeRecord>& rows) {
  std::vector<json> js;
  for (const auto& r : rows) js.push_back(to_json(r));
  write_file_atomic(path, detail::to_jsonl(js));
}

inline json to_json(const HumanRating& r) {
  json j = {{"meme_id", r.meme_id},   {"evaluator_id", r.evaluator_id},
            {"fluency", r.fluency},   {"adequacy", r.adequacy},
            {"persuasiveness", r.persuasiveness}, {"informativeness", r.informativeness}};
  if (!r.system.empty()) j["system"] = r.system;
  return j;
}

inline HumanRating rating_from_json(const json& j, std::size_t line = 0) {
  HumanRating r;
  r.meme_id = detail::require_string(j, "meme_id", line);
  r.evaluator_id = detail::require_string(j, "evaluator_id", line);
  if (const auto it = j.find("system"); it != j.end() && it->is_string()) r.system = it->get<std::string>();
  r.fluency = detail::require_int(j, "fluency", line);
  r.adequacy = detail::require_int(j, "adequacy", line);
  r.persuasiveness = detail::require_int(j, "persuasiveness", line);
  r.informativeness = detail::require_int(j, "informativeness", line);
  try {
    validate(r);
  } catch (const DatasetError& e) {
    throw DatasetError(e.what(), line);
  }
  return r;
}

inline std::vector<HumanRating> load_ratings(const std::filesystem::path& path) {
  std::vector<HumanRating> out;
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  detail::for_each_jsonl(path, [&](const json& j, std::size_t line) {
    HumanRating r = rating_from_json(j, line);
    if (!seen.emplace(r.meme_id, r.evaluator_id, r.system).second)
      throw DatasetError("duplicate rating for meme \"" + r.meme_id + "\" by \"" + r.evaluator_id + "\"", line);
    out.push_back(std::move(r));
  });
  return out;
}

}  // namespace memeguard
