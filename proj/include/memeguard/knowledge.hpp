#pragma once

#include <array>
#include <exception>
#include <filesystem>
#include <future>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "memeguard/backend.hpp"
#include "memeguard/core.hpp"

namespace memeguard {

struct PromptSet {
  std::array<std::pair<Facet, std::string_view>, 5> prompts;

  std::string_view operator[](Facet f) const {
    for (const auto& [facet, text] : prompts)
      if (facet == f) return text;
    return {};
  }
  static constexpr std::size_t size() { return 5; }
};

/// The five fixed knowledge prompts, in facet order.
inline const PromptSet& canonical_prompts() {
  static const PromptSet kPrompts{{{
      {Facet::description, "Describe this meme in detail."},
      {Facet::bias, "What is the societal bias that this meme is conveying?"},
      {Facet::stereotype, "What is the societal stereotype that this meme is conveying?"},
      {Facet::toxicity, "What is the toxicity and hate that this meme is spreading?"},
      {Facet::claims, "What are the claims that this meme is making?"},
  }}};
  return kPrompts;
}

struct KnowledgeResult {
  KnowledgeSet knowledge;
  std::vector<std::string> warnings;  // one per failed facet
};

class KnowledgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Queries the VLM once per canonical prompt (concurrently) and stores the trimmed replies by facet.
/// A failed facet is left empty with a warning; throws only when all five fail.
inline KnowledgeResult generate_knowledge(const MemeRecord& meme, const std::filesystem::path& image,
                                          Gateway& gateway, const BackendBinding& vlm, const GenerationConfig& cfg) {
  const auto& prompts = canonical_prompts().prompts;
  std::array<std::future<std::string>, 5> replies;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    replies[i] = std::async(std::launch::async, [&, i] { return gateway.vlm_query(vlm, image, prompts[i].second, cfg); });
  }
  KnowledgeResult out;
  std::size_t failures = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Facet facet = prompts[i].first;
    try {
      out.knowledge[facet] = trim(replies[i].get());
    } catch (const std::exception& e) {
      ++failures;
      out.warnings.push_back(meme.id + ": facet " + std::string(facet_name(facet)) + " failed: " + e.what());
    }
  }
  if (failures == prompts.size()) {
    std::string msg = meme.id + ": all knowledge prompts failed";
    if (!out.warnings.empty()) msg += " (" + out.warnings.front() + ")";
    throw KnowledgeError(msg);
  }
  return out;
}

}  // namespace memeguard
