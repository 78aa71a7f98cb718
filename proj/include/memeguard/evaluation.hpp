#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "memeguard/core.hpp"
#include "memeguard/intervention.hpp"
#include "memeguard/metrics.hpp"
#include "memeguard/pipeline.hpp"

namespace memeguard {

// ---------------------------------------------------------------------------
// Automatic metrics over a run

struct PairScore {
  std::string meme_id;
  Setting setting = Setting::ocr_only;
  std::string llm_model;
  metrics::MetricScores scores;
};

struct GroupScore {
  std::string llm_model;
  Setting setting = Setting::ocr_only;
  std::size_t pairs = 0;
  metrics::MetricScores corpus;
};

struct MetricReport {
  std::vector<PairScore> rows;     // sorted by (llm_model, setting, meme_id)
  std::vector<GroupScore> groups;  // one per (llm_model, setting), same order
  metrics::MetricScores corpus;    // over all rows
  json metadata = json::object();
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scores each intervention against the gold full text of its meme. Row order does not affect
/// the result.
inline MetricReport evaluate_run(const std::vector<Intervention>& interventions,
                                 const std::map<std::string, std::string>& golds,
                                 const metrics::TokenEmbedder& token_embedder, json metadata = json::object()) {
  if (interventions.empty()) throw EvaluationError("empty run");
  MetricReport report;
  for (const auto& iv : interventions) {
    const auto gold = golds.find(iv.meme_id);
    if (gold == golds.end()) throw EvaluationError("missing gold for meme " + iv.meme_id);
    report.rows.push_back({iv.meme_id, iv.setting, iv.llm_model, metrics::score_pair(iv.text, gold->second, token_embedder)});
  }
  std::sort(report.rows.begin(), report.rows.end(), [](const PairScore& a, const PairScore& b) {
    return std::tie(a.llm_model, a.setting, a.meme_id) < std::tie(b.llm_model, b.setting, b.meme_id);
  });
  std::vector<metrics::MetricScores> all;
  for (std::size_t i = 0; i < report.rows.size();) {
    std::size_t j = i;
    std::vector<metrics::MetricScores> group;
    while (j < report.rows.size() && report.rows[j].llm_model == report.rows[i].llm_model &&
           report.rows[j].setting == report.rows[i].setting)
      group.push_back(report.rows[j++].scores);
    report.groups.push_back({report.rows[i].llm_model, report.rows[i].setting, group.size(), metrics::corpus_mean(group)});
    all.insert(all.end(), group.begin(), group.end());
    i = j;
  }
  report.corpus = metrics::corpus_mean(all);
  metadata["tokenizer"] = metrics::kTokenizerVersion;
  metadata["bleu"] = {{"level", "sentence, corpus mean"}, {"smoothing", metrics::kBleuSmoothing}};
  metadata["bertscore"] = {{"matching", "greedy"}, {"rescaled", false}};
  report.metadata = std::move(metadata);
  return report;
}

inline std::map<std::string, std::string> golds_of(const std::vector<MemeRecord>& memes) {
  std::map<std::string, std::string> out;
  for (const auto& m : memes)
    if (m.gold) out[m.id] = m.gold->full_text;
  return out;
}

inline json to_json(const MetricReport& r) {
  json rows = json::array();
  for (const auto& p : r.rows)
    rows.push_back({{"meme_id", p.meme_id}, {"setting", setting_name(p.setting)}, {"llm_model", p.llm_model},
                    {"scores", p.scores.to_json()}});
  json groups = json::array();
  for (const auto& g : r.groups)
    groups.push_back({{"llm_model", g.llm_model}, {"setting", setting_name(g.setting)}, {"pairs", g.pairs},
                      {"scores", g.corpus.to_json()}});
  return {{"rows", rows}, {"groups", groups}, {"corpus", r.corpus.to_json()}, {"metadata", r.metadata}};
}

/// Aligned text table: one line per (model, setting) with the summary metric columns.
inline std::string format_table(const MetricReport& r) {
  struct Column {
    const char* header;
    double metrics::MetricScores::*member;
  };
  static constexpr std::array<Column, 10> kColumns = {{
      {"R1", &metrics::MetricScores::rouge1},
      {"R2", &metrics::MetricScores::rouge2},
      {"RL", &metrics::MetricScores::rougeL},
      {"B1", &metrics::MetricScores::bleu1},
      {"B2", &metrics::MetricScores::bleu2},
      {"B3", &metrics::MetricScores::bleu3},
      {"B4", &metrics::MetricScores::bleu4},
      {"BLEUavg", &metrics::MetricScores::bleu_avg},
      {"Hmean", &metrics::MetricScores::hmean},
      {"BERTScore", &metrics::MetricScores::bertscore_f1},
  }};
  std::size_t model_w = 5, setting_w = 7;
  for (const auto& g : r.groups) {
    model_w = std::max(model_w, g.llm_model.size());
    setting_w = std::max(setting_w, setting_name(g.setting).size());
  }
  std::ostringstream os;
  char buf[64];
  auto pad = [&os](std::string_view s, std::size_t w) {
    os << s;
    for (std::size_t i = s.size(); i < w; ++i) os << ' ';
  };
  pad("Model", model_w);
  os << "  ";
  pad("Setting", setting_w);
  for (const auto& c : kColumns) {
    std::snprintf(buf, sizeof buf, " %9s", c.header);
    os << buf;
  }
  os << '\n';
  for (const auto& g : r.groups) {
    pad(g.llm_model, model_w);
    os << "  ";
    pad(setting_name(g.setting), setting_w);
    for (const auto& c : kColumns) {
      std::snprintf(buf, sizeof buf, " %9.2f", g.corpus.*c.member);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

inline void write_metric_report(const std::filesystem::path& dir, const MetricReport& r) {
  write_file_atomic(dir / "table.json", to_json(r).dump(2) + "\n");
  write_file_atomic(dir / "table.txt", format_table(r));
}

// ---------------------------------------------------------------------------
// Length statistics

struct LengthStats {
  std::size_t count = 0;
  double mean = 0.0;
  std::size_t min = 0;
  std::size_t max = 0;
  std::map<std::size_t, std::size_t> histogram;  // word count -> texts

  bool empty() const { return count == 0; }
};

/// Word counts per text: metric tokens minus punctuation tokens.
inline LengthStats length_stats(const std::vector<std::string>& texts) {
  LengthStats s;
  if (texts.empty()) return s;
  std::size_t total = 0;
  s.min = std::numeric_limits<std::size_t>::max();
  for (const auto& t : texts) {
    const auto toks = metrics::tokenize(t);
    const auto words = static_cast<std::size_t>(
        std::count_if(toks.begin(), toks.end(), [](const auto& w) { return !metrics::is_punctuation_token(w); }));
    total += words;
    s.min = std::min(s.min, words);
    s.max = std::max(s.max, words);
    ++s.histogram[words];
  }
  s.count = texts.size();
  s.mean = static_cast<double>(total) / static_cast<double>(s.count);
  return s;
}

inline json to_json(const LengthStats& s) {
  if (s.empty()) return {{"empty", true}, {"count", 0}};
  json hist = json::object();
  for (const auto& [words, n] : s.histogram) hist[std::to_string(words)] = n;
  return {{"count", s.count}, {"mean", s.mean}, {"min", s.min}, {"max", s.max}, {"histogram", hist}};
}

// ---------------------------------------------------------------------------
// Human ratings

class NoOverlapError : public std::runtime_error {
 public:
  NoOverlapError() : std::runtime_error("no overlap") {}
};

struct AgreementReport {
  std::size_t common = 0;                   // items rated by both sides
  std::array<double, 4> exact_match_pct{};  // fluency, adequacy, persuasiveness, informativeness
  std::array<double, 4> mean_score{};       // over both evaluators' ratings of the common items
  std::size_t evaluator_pairs = 1;          // > 1 only for the pairwise-mean extension
};

namespace detail {

using RatingKey = std::pair<std::string, std::string>;  // (meme_id, system)

inline std::map<RatingKey, const HumanRating*> index_ratings(const std::vector<HumanRating>& rs) {
  std::map<RatingKey, const HumanRating*> idx;
  for (const auto& r : rs)
    if (!idx.emplace(RatingKey{r.meme_id, r.system}, &r).second)
      throw std::invalid_argument("evaluator " + r.evaluator_id + " rated " + r.meme_id + " twice");
  return idx;
}

}  // namespace detail

/// Exact-match agreement between two evaluators, joined on (meme_id, system).
inline AgreementReport agreement(const std::vector<HumanRating>& a, const std::vector<HumanRating>& b) {
  const auto ia = detail::index_ratings(a);
  const auto ib = detail::index_ratings(b);
  AgreementReport rep;
  std::array<std::size_t, 4> matches{};
  std::array<double, 4> sums{};
  for (const auto& [key, ra] : ia) {
    const auto it = ib.find(key);
    if (it == ib.end()) continue;
    ++rep.common;
    const auto sa = ra->scores(), sb = it->second->scores();
    for (std::size_t d = 0; d < 4; ++d) {
      matches[d] += sa[d] == sb[d];
      sums[d] += sa[d] + sb[d];
    }
  }
  if (rep.common == 0) throw NoOverlapError();
  for (std::size_t d = 0; d < 4; ++d) {
    rep.exact_match_pct[d] = 100.0 * static_cast<double>(matches[d]) / static_cast<double>(rep.common);
    rep.mean_score[d] = sums[d] / (2.0 * static_cast<double>(rep.common));
  }
  return rep;
}

/// Splits ratings by evaluator. Two evaluators give plain agreement(); more give the mean over
/// every overlapping evaluator pair (common = sum over pairs).
inline AgreementReport agreement_by_evaluator(const std::vector<HumanRating>& ratings) {
  std::map<std::string, std::vector<HumanRating>> by_eval;
  for (const auto& r : ratings) by_eval[r.evaluator_id].push_back(r);
  std::vector<AgreementReport> pairs;
  for (auto i = by_eval.begin(); i != by_eval.end(); ++i)
    for (auto j = std::next(i); j != by_eval.end(); ++j) {
      try {
        pairs.push_back(agreement(i->second, j->second));
      } catch (const NoOverlapError&) {
      }
    }
  if (pairs.empty()) throw NoOverlapError();
  if (pairs.size() == 1) return pairs.front();
  AgreementReport rep;
  rep.evaluator_pairs = pairs.size();
  for (const auto& p : pairs) {
    rep.common += p.common;
    for (std::size_t d = 0; d < 4; ++d) {
      rep.exact_match_pct[d] += p.exact_match_pct[d] / static_cast<double>(pairs.size());
      rep.mean_score[d] += p.mean_score[d] / static_cast<double>(pairs.size());
    }
  }
  return rep;
}

inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

inline json to_json(const AgreementReport& r) {
  json agree = json::object(), means = json::object();
  for (std::size_t d = 0; d < 4; ++d) {
    agree[std::string(kRatingDimensions[d])] = r.exact_match_pct[d];
    means[std::string(kRatingDimensions[d])] = round2(r.mean_score[d]);
  }
  json j = {{"common_items", r.common}, {"agreement_pct", agree}, {"mean_scores", means}};
  if (r.evaluator_pairs > 1) {
    j["evaluator_pairs"] = r.evaluator_pairs;
    j["pairwise_mean_extension"] = true;
  }
  return j;
}

/// Per-dimension arithmetic means.
inline std::array<double, 4> mean_ratings(const std::vector<HumanRating>& rs) {
  if (rs.empty()) throw std::invalid_argument("mean_ratings: no ratings");
  std::array<double, 4> sums{};
  for (const auto& r : rs) {
    const auto s = r.scores();
    for (std::size_t d = 0; d < 4; ++d) sums[d] += s[d];
  }
  for (double& s : sums) s /= static_cast<double>(rs.size());
  return sums;
}

inline json means_to_json(const std::array<double, 4>& means) {
  json j = json::object();
  for (std::size_t d = 0; d < 4; ++d) j[std::string(kRatingDimensions[d])] = round2(means[d]);
  return j;
}

// ---------------------------------------------------------------------------
// Runs and threshold sweeps

struct RunSpec {
  std::filesystem::path dataset;
  std::vector<Setting> settings{kSettings.begin(), kSettings.end()};
  PipelineBindings bindings;
  MksConfig mks;
  GenerationConfig generation;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  std::size_t parallel = 4;

  void validate() const {
    if (settings.empty()) throw std::invalid_argument("run needs at least one setting");
    if (bindings.llms.empty()) throw std::invalid_argument("run needs at least one llm binding");
    mks.validate();
    generation.validate();
  }
};

inline metrics::TokenEmbedder token_embedder(Gateway& gateway, const BackendBinding& embed) {
  return [&gateway, embed](const std::string& token) { return gateway.embed_text(embed, token); };
}

struct SweepRow {
  double threshold = 0.0;
  std::string llm_model;
  metrics::MetricScores corpus;
  std::size_t retained_sentences = 0;
  std::size_t total_sentences = 0;
};

/// MemeGuard setting at each threshold: raw knowledge and image vectors are computed once,
/// filtering, generation and scoring are redone per threshold and LLM.
inline std::vector<SweepRow> threshold_sweep(const RunSpec& spec, const std::vector<double>& thresholds, Gateway& gateway) {
  if (thresholds.empty()) throw std::invalid_argument("threshold list is empty");
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) throw std::invalid_argument("thresholds must be sorted");
  for (double t : thresholds)
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("threshold " + std::to_string(t) + " outside [0, 1]");
  spec.validate();
  const auto memes = load_dataset(spec.dataset);
  const auto golds = golds_of(memes);
  PipelineContext ctx{gateway, spec.bindings, spec.generation, spec.mks, spec.dataset.parent_path(), spec.parallel};
  const auto raw = extract_knowledge(ctx, memes, spec.bindings.vlmeme);
  const auto images = embed_images(ctx, memes);
  const auto embedder = token_embedder(gateway, spec.mks.embed_binding);
  std::vector<SweepRow> rows;
  for (double th : thresholds) {
    try {
      PipelineContext at = ctx;
      at.mks.threshold = th;
      const FilterBatch filtered = filter_batch(at, raw.records, images);
      const auto knowledge = by_meme(filtered.records);
      for (const auto& llm : spec.bindings.llms) {
        const auto ivs = intervene_batch(at, memes, Setting::memeguard, knowledge, llm);
        const MetricReport rep = evaluate_run(ivs, golds, embedder);
        rows.push_back({th, llm.model_id, rep.corpus, filtered.retained, filtered.sentences});
      }
    } catch (const std::exception& e) {
      throw StageError("sweep", "Th=" + std::to_string(th) + ": " + e.what());
    }
  }
  return rows;
}

/// threshold,rouge_l,bleu_avg,hmean,bertscore_f1 (plus llm_model when several LLMs were swept).
inline std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
  bool multi = false;
  for (const auto& r : rows) multi |= r.llm_model != rows.front().llm_model;
  std::string out = multi ? "threshold,rouge_l,bleu_avg,hmean,bertscore_f1,llm_model\n"
                          : "threshold,rouge_l,bleu_avg,hmean,bertscore_f1\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.4g,%.6f,%.6f,%.6f,%.6f", r.threshold, r.corpus.rougeL, r.corpus.bleu_avg,
                  r.corpus.hmean, r.corpus.bertscore_f1);
    out += buf;
    if (multi) out += "," + r.llm_model;
    out += '\n';
  }
  return out;
}

/// Parses "lo..hi:step" or a comma list ("0.1,0.5").
inline std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  const auto dots = text.find("..");
  if (dots != std::string::npos) {
    const auto colon = text.find(':', dots);
    if (colon == std::string::npos) throw std::invalid_argument("range needs a step: lo..hi:step");
    const double lo = std::stod(text.substr(0, dots));
    const double hi = std::stod(text.substr(dots + 2, colon - dots - 2));
    const double step = std::stod(text.substr(colon + 1));
    if (!(step > 0.0) || hi < lo) throw std::invalid_argument("bad threshold range: " + text);
    const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
    for (long i = 0; i <= n; ++i) out.push_back(std::round((lo + i * step) * 1e9) / 1e9);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(std::stod(item));
  return out;
}

}  // namespace memeguard
