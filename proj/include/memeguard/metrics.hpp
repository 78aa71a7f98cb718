#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "memeguard/backend.hpp"
#include "memeguard/selection.hpp"

namespace memeguard::metrics {

using Tokens = std::vector<std::string>;

inline constexpr std::string_view kTokenizerVersion = "lower-ws-punct/1";
inline constexpr std::string_view kBleuSmoothing = "add1-on-zero-higher-order";

/// Lowercases ASCII, splits on whitespace and makes every ASCII punctuation character its own token.
inline Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

inline bool is_punctuation_token(std::string_view tok) {
  return tok.size() == 1 && static_cast<unsigned char>(tok[0]) < 0x80 && std::ispunct(static_cast<unsigned char>(tok[0]));
}

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, int>;

inline NgramCounts ngrams(const Tokens& t, std::size_t n) {
  NgramCounts counts;
  if (t.size() < n) return counts;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++counts[std::vector<std::string>(t.begin() + i, t.begin() + i + n)];
  return counts;
}

inline int clipped_overlap(const NgramCounts& hyp, const NgramCounts& ref) {
  int total = 0;
  for (const auto& [gram, count] : hyp)
    if (const auto it = ref.find(gram); it != ref.end()) total += std::min(count, it->second);
  return total;
}

inline double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

/// Sentence BLEU up to order n (percent). Clipped precisions, brevity penalty, uniform weights.
/// Orders >= 2 with no match use 1 / (candidate n-grams + 1); a unigram miss gives 0.
inline double bleu_n(const Tokens& hyp, const Tokens& ref, int n) {
  if (n < 1) throw std::invalid_argument("bleu order must be >= 1");
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    const auto h = detail::ngrams(hyp, static_cast<std::size_t>(k));
    const int matches = detail::clipped_overlap(h, detail::ngrams(ref, static_cast<std::size_t>(k)));
    const double total = hyp.size() >= static_cast<std::size_t>(k) ? double(hyp.size() - k + 1) : 0.0;
    double p;
    if (matches > 0) {
      p = matches / total;
    } else if (k == 1) {
      return 0.0;
    } else {
      p = 1.0 / (total + 1.0);
    }
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(hyp.size()), r = static_cast<double>(ref.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_sum / n);
}

/// ROUGE-N F1 (percent) with clipped n-gram overlap.
inline double rouge_n(const Tokens& hyp, const Tokens& ref, int n) {
  if (n < 1) throw std::invalid_argument("rouge order must be >= 1");
  const auto h = detail::ngrams(hyp, static_cast<std::size_t>(n));
  const auto r = detail::ngrams(ref, static_cast<std::size_t>(n));
  const double overlap = detail::clipped_overlap(h, r);
  if (overlap == 0.0) return 0.0;
  const double hyp_total = double(hyp.size() - n + 1), ref_total = double(ref.size() - n + 1);
  return 100.0 * detail::f1(overlap / hyp_total, overlap / ref_total);
}

/// ROUGE-L F1 (percent, beta = 1) from the longest common subsequence.
inline double rouge_l(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const double lcs = static_cast<double>(detail::lcs_length(hyp, ref));
  return 100.0 * detail::f1(lcs / hyp.size(), lcs / ref.size());
}

inline double bleu_avg(double b1, double b2, double b3, double b4) { return (b1 + b2 + b3 + b4) / 4.0; }

inline double hmean(double rouge_l, double bleu_avg) {
  if (rouge_l < 0.0 || bleu_avg < 0.0) throw std::invalid_argument("hmean inputs must be >= 0");
  return rouge_l + bleu_avg > 0.0 ? 2.0 * rouge_l * bleu_avg / (rouge_l + bleu_avg) : 0.0;
}

struct BertScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Greedy-match BERTScore (percent) without baseline rescaling. Precision and recall are floored
/// at 0 so anti-aligned embeddings cannot leave [0, 100].
inline BertScore bertscore_greedy(const std::vector<EmbeddingVector>& hyp, const std::vector<EmbeddingVector>& ref) {
  if (hyp.empty() || ref.empty()) throw std::invalid_argument("bertscore: empty token sequence");
  std::vector<double> best_for_hyp(hyp.size(), -1.0), best_for_ref(ref.size(), -1.0);
  for (std::size_t i = 0; i < hyp.size(); ++i)
    for (std::size_t j = 0; j < ref.size(); ++j) {
      const double s = cosine(hyp[i], ref[j]);
      best_for_hyp[i] = std::max(best_for_hyp[i], s);
      best_for_ref[j] = std::max(best_for_ref[j], s);
    }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  BertScore out;
  out.precision = std::max(0.0, mean(best_for_hyp));
  out.recall = std::max(0.0, mean(best_for_ref));
  out.f1 = detail::f1(out.precision, out.recall);
  out.precision *= 100.0;
  out.recall *= 100.0;
  out.f1 *= 100.0;
  return out;
}

struct MetricScores {
  double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double rouge1 = 0, rouge2 = 0, rougeL = 0;
  double bleu_avg = 0, hmean = 0;
  double bertscore_p = 0, bertscore_r = 0, bertscore_f1 = 0;

  json to_json() const;
};

struct MetricField {
  std::string_view name;
  double MetricScores::*member;
};

/// Report column order.
inline constexpr std::array<MetricField, 12> kMetricFields = {{
    {"rouge1", &MetricScores::rouge1},
    {"rouge2", &MetricScores::rouge2},
    {"rougeL", &MetricScores::rougeL},
    {"bleu1", &MetricScores::bleu1},
    {"bleu2", &MetricScores::bleu2},
    {"bleu3", &MetricScores::bleu3},
    {"bleu4", &MetricScores::bleu4},
    {"bleu_avg", &MetricScores::bleu_avg},
    {"hmean", &MetricScores::hmean},
    {"bertscore_p", &MetricScores::bertscore_p},
    {"bertscore_r", &MetricScores::bertscore_r},
    {"bertscore_f1", &MetricScores::bertscore_f1},
}};

inline json MetricScores::to_json() const {
  json j = json::object();
  for (const auto& f : kMetricFields) j[std::string(f.name)] = this->*f.member;
  return j;
}

using TokenEmbedder = std::function<EmbeddingVector(const std::string&)>;

inline MetricScores score_pair(std::string_view hypothesis, std::string_view reference, const TokenEmbedder& embed) {
  const Tokens hyp = tokenize(hypothesis), ref = tokenize(reference);
  MetricScores s;
  s.bleu1 = bleu_n(hyp, ref, 1);
  s.bleu2 = bleu_n(hyp, ref, 2);
  s.bleu3 = bleu_n(hyp, ref, 3);
  s.bleu4 = bleu_n(hyp, ref, 4);
  s.rouge1 = rouge_n(hyp, ref, 1);
  s.rouge2 = rouge_n(hyp, ref, 2);
  s.rougeL = rouge_l(hyp, ref);
  s.bleu_avg = bleu_avg(s.bleu1, s.bleu2, s.bleu3, s.bleu4);
  s.hmean = hmean(s.rougeL, s.bleu_avg);
  if (embed && !hyp.empty() && !ref.empty()) {
    std::vector<EmbeddingVector> hv, rv;
    hv.reserve(hyp.size());
    rv.reserve(ref.size());
    for (const auto& t : hyp) hv.push_back(embed(t));
    for (const auto& t : ref) rv.push_back(embed(t));
    const BertScore b = bertscore_greedy(hv, rv);
    s.bertscore_p = b.precision;
    s.bertscore_r = b.recall;
    s.bertscore_f1 = b.f1;
  }
  return s;
}

/// Corpus row: the mean of every field, except hmean which is taken from the mean rougeL and
/// mean bleu_avg.
inline MetricScores corpus_mean(const std::vector<MetricScores>& rows) {
  MetricScores out;
  if (rows.empty()) return out;
  for (const auto& f : kMetricFields) {
    double acc = 0.0;
    for (const auto& r : rows) acc += r.*f.member;
    out.*f.member = acc / static_cast<double>(rows.size());
  }
  out.hmean = hmean(out.rougeL, out.bleu_avg);
  return out;
}

}  // namespace memeguard::metrics
