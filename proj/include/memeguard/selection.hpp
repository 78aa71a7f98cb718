#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "memeguard/backend.hpp"
#include "memeguard/core.hpp"

namespace memeguard {

// ---------------------------------------------------------------------------
// Sentence splitting
//
// A boundary is a run of [.?!] (plus trailing closing quotes/brackets) followed by whitespace
// that either contains a newline or is followed by an ASCII uppercase letter, or by end of text.
// A single '.' ending one of the listed abbreviations is never a boundary.

namespace detail {

inline bool is_terminator(char c) { return c == '.' || c == '?' || c == '!'; }
inline bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }
inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

inline constexpr std::array<std::string_view, 6> kAbbreviations = {"Dr.", "Mr.", "Mrs.", "e.g.", "i.e.", "etc."};

// Word ending at text[dot] inclusive, without leading brackets/quotes.
inline bool ends_with_abbreviation(std::string_view text, std::size_t dot) {
  std::size_t begin = dot;
  while (begin > 0 && !is_space(text[begin - 1])) --begin;
  while (begin < dot && (text[begin] == '(' || text[begin] == '"' || text[begin] == '\'')) ++begin;
  const std::string_view word = text.substr(begin, dot - begin + 1);
  return std::any_of(kAbbreviations.begin(), kAbbreviations.end(), [&](std::string_view a) { return iequals(a, word); });
}

}  // namespace detail

inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto emit = [&out](std::string_view s) {
    std::string t = trim(s);
    if (!t.empty()) out.push_back(std::move(t));
  };
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!detail::is_terminator(text[i])) {
      ++i;
      continue;
    }
    std::size_t end = i;
    while (end < text.size() && detail::is_terminator(text[end])) ++end;
    while (end < text.size() && detail::is_closer(text[end])) ++end;
    const bool single_dot = end - i == 1 && text[i] == '.';
    std::size_t next = end;
    bool newline = false;
    while (next < text.size() && detail::is_space(text[next])) newline |= text[next++] == '\n';
    const bool at_end = next == text.size();
    const bool boundary = (end < text.size() ? detail::is_space(text[end]) : true) &&
                          (at_end || newline || std::isupper(static_cast<unsigned char>(text[next]))) &&
                          !(single_dot && detail::ends_with_abbreviation(text, i));
    if (boundary) {
      emit(text.substr(start, end - start));
      start = next;
    }
    i = end;
  }
  if (start < text.size()) emit(text.substr(start));
  return out;
}

inline std::string join_sentences(const std::vector<std::string>& sentences) {
  std::string out;
  for (const auto& s : sentences) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Similarity

/// Cosine similarity clamped to [-1, 1]. A zero vector on either side gives 0.
inline double cosine(const EmbeddingVector& u, const EmbeddingVector& v) {
  if (u.dimension() != v.dimension())
    throw std::invalid_argument("cosine: dimension mismatch (" + std::to_string(u.dimension()) + " vs " +
                                std::to_string(v.dimension()) + ")");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.dimension(); ++i) {
    dot += u.values[i] * v.values[i];
    nu += u.values[i] * u.values[i];
    nv += v.values[i] * v.values[i];
  }
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Filtering

enum class FallbackPolicy { empty, keep_top1 };

inline std::string_view fallback_name(FallbackPolicy p) { return p == FallbackPolicy::empty ? "empty" : "keep_top1"; }

inline FallbackPolicy parse_fallback(std::string_view s) {
  if (s == "empty") return FallbackPolicy::empty;
  if (s == "keep_top1") return FallbackPolicy::keep_top1;
  throw std::invalid_argument("unknown fallback policy: " + std::string(s));
}

struct MksConfig {
  double threshold = 0.5;
  BackendBinding embed_binding{"mock://embed", "", "mock-embed", BackendKind::embed};
  FallbackPolicy fallback = FallbackPolicy::empty;

  void validate() const {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("threshold must be in [0, 1]");
  }
};

struct ScoredSentence {
  Facet facet = Facet::description;
  std::string text;
  double similarity = 0.0;  // NaN when the sentence could not be embedded
  bool retained = false;    // similarity > threshold
  bool fallback = false;    // kept only by the keep_top1 policy
  std::string error;
};

struct FilterResult {
  KnowledgeSet knowledge;
  std::vector<ScoredSentence> trace;
  std::vector<std::string> warnings;

  std::size_t retained_count() const {
    return static_cast<std::size_t>(std::count_if(trace.begin(), trace.end(), [](const auto& s) { return s.retained; }));
  }
};

using TextEmbedder = std::function<EmbeddingVector(const std::string&)>;

/// Keeps, per facet, the sentences whose cosine to the image is strictly above the threshold,
/// rejoined in original order with single spaces.
inline FilterResult filter_knowledge(const KnowledgeSet& ks, const EmbeddingVector& image_vec, const MksConfig& cfg,
                                     const TextEmbedder& embed) {
  cfg.validate();
  FilterResult out;
  for (Facet facet : kFacets) {
    std::vector<std::string> kept;
    const std::size_t first_row = out.trace.size();
    for (auto& sentence : split_sentences(ks[facet])) {
      ScoredSentence row;
      row.facet = facet;
      row.text = std::move(sentence);
      try {
        const EmbeddingVector v = embed(row.text);
        if (v.dimension() != image_vec.dimension())
          throw std::invalid_argument("sentence embedding dimension " + std::to_string(v.dimension()) +
                                      " does not match image dimension " + std::to_string(image_vec.dimension()));
        row.similarity = cosine(v, image_vec);
        row.retained = row.similarity > cfg.threshold;
        if (row.retained) kept.push_back(row.text);
      } catch (const std::invalid_argument&) {
        throw;
      } catch (const std::exception& e) {
        row.similarity = std::numeric_limits<double>::quiet_NaN();
        row.error = e.what();
        out.warnings.push_back(std::string(facet_name(facet)) + ": sentence dropped, embedding failed: " + e.what());
      }
      out.trace.push_back(std::move(row));
    }
    if (kept.empty() && cfg.fallback == FallbackPolicy::keep_top1) {
      ScoredSentence* best = nullptr;
      for (std::size_t r = first_row; r < out.trace.size(); ++r) {
        auto& row = out.trace[r];
        if (std::isnan(row.similarity)) continue;
        if (!best || row.similarity > best->similarity) best = &row;
      }
      if (best) {
        best->fallback = true;
        kept.push_back(best->text);
      }
    }
    out.knowledge[facet] = join_sentences(kept);
  }
  return out;
}

inline json trace_row(const std::string& meme_id, const ScoredSentence& s, double threshold) {
  json j = {{"meme_id", meme_id},
            {"facet", facet_name(s.facet)},
            {"sentence", s.text},
            {"similarity", std::isnan(s.similarity) ? json(nullptr) : json(s.similarity)},
            {"retained", s.retained},
            {"threshold", threshold}};
  if (s.fallback) j["fallback"] = true;
  if (!s.error.empty()) j["error"] = s.error;
  return j;
}

}  // namespace memeguard
