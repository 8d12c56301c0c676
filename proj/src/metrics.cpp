#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "alignforge/common.hpp"
#include "alignforge/eval.hpp"

namespace alignforge::eval {

Words tokenize(std::string_view text) {
  Words out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    std::size_t b = i, e = j;
    while (b < e && std::ispunct(static_cast<unsigned char>(text[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(text[e - 1]))) --e;
    if (b < e) {
      std::string word(text.substr(b, e - b));
      for (char& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      out.push_back(std::move(word));
    }
    i = j;
  }
  return out;
}

namespace {

using NgramCounts = std::map<std::vector<std::string_view>, long>;

NgramCounts ngrams(const Words& words, int n) {
  NgramCounts counts;
  const auto size = static_cast<long>(words.size());
  for (long i = 0; i + n <= size; ++i) {
    std::vector<std::string_view> key(words.begin() + i, words.begin() + i + n);
    ++counts[key];
  }
  return counts;
}

long total(const NgramCounts& counts) {
  long t = 0;
  for (const auto& [_, c] : counts) t += c;
  return t;
}

long clipped_overlap(const NgramCounts& cand, const NgramCounts& ref) {
  long overlap = 0;
  for (const auto& [gram, c] : cand) {
    const auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return overlap;
}

double f1(double overlap, double cand_total, double ref_total) {
  if (overlap <= 0.0 || cand_total <= 0.0 || ref_total <= 0.0) return 0.0;
  const double p = overlap / cand_total;
  const double r = overlap / ref_total;
  return 2.0 * p * r / (p + r);
}

void check_corpora(std::size_t candidates, std::size_t references) {
  if (candidates != references) {
    throw UsageError("candidate and reference lists differ in length (" + std::to_string(candidates) +
                     " vs " + std::to_string(references) + ")");
  }
  if (candidates == 0) throw UsageError("BLEU needs at least one candidate");
}

std::vector<Words> tokenize_all(std::span<const std::string> texts) {
  std::vector<Words> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(tokenize(t));
  return out;
}

double brevity_penalty(double cand_len, double ref_len) {
  return std::exp(std::min(0.0, 1.0 - ref_len / cand_len));
}

}  // namespace

double rouge_n(const Words& candidate, const Words& reference, int n) {
  if (n < 1) throw UsageError("rouge_n needs n >= 1");
  const auto c = ngrams(candidate, n);
  const auto r = ngrams(reference, n);
  return f1(static_cast<double>(clipped_overlap(c, r)), static_cast<double>(total(c)),
            static_cast<double>(total(r)));
}

double rouge_n(std::string_view candidate, std::string_view reference, int n) {
  return rouge_n(tokenize(candidate), tokenize(reference), n);
}

double rouge_l(const Words& candidate, const Words& reference) {
  const std::size_t m = candidate.size(), k = reference.size();
  if (m == 0 || k == 0) return 0.0;
  std::vector<long> prev(k + 1, 0), cur(k + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= k; ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return f1(static_cast<double>(prev[k]), static_cast<double>(m), static_cast<double>(k));
}

double rouge_l(std::string_view candidate, std::string_view reference) {
  return rouge_l(tokenize(candidate), tokenize(reference));
}

double bleu(std::span<const Words> candidates, std::span<const Words> references, int max_n) {
  check_corpora(candidates.size(), references.size());
  if (max_n < 1) throw UsageError("bleu needs max_n >= 1");
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
  }
  if (cand_len == 0.0) return 0.0;

  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    long matched = 0, possible = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto c = ngrams(candidates[i], n);
      matched += clipped_overlap(c, ngrams(references[i], n));
      possible += total(c);
    }
    double precision;
    if (n == 1) {
      precision = static_cast<double>(matched) / static_cast<double>(possible);
    } else if (matched == 0) {
      precision = 1.0 / static_cast<double>(possible + 1);
    } else {
      precision = static_cast<double>(matched) / static_cast<double>(possible);
    }
    if (precision == 0.0) return 0.0;
    log_sum += std::log(precision);
  }
  return 100.0 * brevity_penalty(cand_len, ref_len) * std::exp(log_sum / max_n);
}

double bleu(std::span<const std::string> candidates, std::span<const std::string> references,
            int max_n) {
  check_corpora(candidates.size(), references.size());
  const auto c = tokenize_all(candidates);
  const auto r = tokenize_all(references);
  return bleu(c, r, max_n);
}

double bleu1(std::span<const Words> candidates, std::span<const Words> references) {
  check_corpora(candidates.size(), references.size());
  long matched = 0, possible = 0;
  double ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = ngrams(candidates[i], 1);
    matched += clipped_overlap(c, ngrams(references[i], 1));
    possible += total(c);
    ref_len += static_cast<double>(references[i].size());
  }
  if (possible == 0) return 0.0;
  const double cand_len = static_cast<double>(possible);
  return 100.0 * brevity_penalty(cand_len, ref_len) * static_cast<double>(matched) / cand_len;
}

double bleu1(std::span<const std::string> candidates, std::span<const std::string> references) {
  check_corpora(candidates.size(), references.size());
  const auto c = tokenize_all(candidates);
  const auto r = tokenize_all(references);
  return bleu1(c, r);
}

MetricRow score_responses(std::span<const std::string> candidates,
                          std::span<const std::string> references) {
  check_corpora(candidates.size(), references.size());
  const auto c = tokenize_all(candidates);
  const auto r = tokenize_all(references);
  MetricRow row;
  row.bleu = bleu(c, r);
  row.bleu1 = bleu1(c, r);
  for (std::size_t i = 0; i < c.size(); ++i) {
    row.rouge1 += rouge_n(c[i], r[i], 1);
    row.rouge2 += rouge_n(c[i], r[i], 2);
    row.rougeL += rouge_l(c[i], r[i]);
  }
  const auto n = static_cast<double>(c.size());
  row.rouge1 /= n;
  row.rouge2 /= n;
  row.rougeL /= n;
  return row;
}

}  // namespace alignforge::eval
