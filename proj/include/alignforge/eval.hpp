#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "alignforge/chat_client.hpp"

namespace alignforge::eval {

// ---------------------------------------------------------------------------
// N-gram metrics. Text is lowercased, split on whitespace, and each token is
// stripped of leading and trailing ASCII punctuation; empty tokens vanish.

using Words = std::vector<std::string>;

Words tokenize(std::string_view text);

/// F1 of clipped n-gram overlap; 0 when either side has no n-grams.
double rouge_n(const Words& candidate, const Words& reference, int n);
double rouge_n(std::string_view candidate, std::string_view reference, int n);

/// F1 from the longest common subsequence.
double rouge_l(const Words& candidate, const Words& reference);
double rouge_l(std::string_view candidate, std::string_view reference);

/// Corpus BLEU on a 0-100 scale: geometric mean of clipped n-gram precisions
/// (n >= 2 use (0+1)/(total+1) when nothing matches) times the brevity
/// penalty exp(min(0, 1 - ref_len/cand_len)).
double bleu(std::span<const Words> candidates, std::span<const Words> references, int max_n = 4);
double bleu(std::span<const std::string> candidates, std::span<const std::string> references,
            int max_n = 4);

/// Clipped unigram precision times the same brevity penalty, 0-100.
double bleu1(std::span<const Words> candidates, std::span<const Words> references);
double bleu1(std::span<const std::string> candidates, std::span<const std::string> references);

// ---------------------------------------------------------------------------
// Judge-based emotion intensity

enum class Dimension { empathetic, comforting, reassuring };
inline constexpr Dimension kAllDimensions[] = {Dimension::empathetic, Dimension::comforting,
                                               Dimension::reassuring};
std::string_view to_string(Dimension d);

struct EmotionScores {
  double empathetic = 0.0;
  double comforting = 0.0;
  double reassuring = 0.0;
  double mean = 0.0;
  double max = 0.0;
  bool parse_failure = false;

  /// Fills mean and max from the three dimensions.
  static EmotionScores from(double empathetic, double comforting, double reassuring);
  double get(Dimension d) const;
  bool operator==(const EmotionScores&) const = default;
};

inline constexpr std::string_view kJudgeSystemPrompt =
    "You evaluate the emotional support in doctors' replies to patients.";

/// The fixed request text for one dimension.
std::string intensity_prompt(Dimension dimension, std::string_view response);

/// First decimal number in a reply, if any.
std::optional<double> parse_first_number(std::string_view reply);

inline constexpr int kJudgeRetries = 3;

/// One request per dimension; malformed replies are retried kJudgeRetries
/// times, then scored 0 with parse_failure set. AuthError propagates.
EmotionScores judge_intensity(chat::ChatClient& client, std::string_view response);

/// Field-wise arithmetic mean; `max` is the mean of per-response maxima.
EmotionScores aggregate_intensity(std::span<const EmotionScores> per_response);

// ---------------------------------------------------------------------------
// Pairwise preference

enum class PreferenceDimension { knowledgeable, emotional };
std::string_view to_string(PreferenceDimension d);
PreferenceDimension parse_preference_dimension(std::string_view name);

struct PreferenceBallot {
  std::string question_id;
  std::vector<std::string> candidates;  // method ids in presentation order
  PreferenceDimension dimension = PreferenceDimension::emotional;
  std::optional<std::string> winner;  // absent when the judge abstained
  std::uint64_t seed = 0;
  bool tie = false;

  bool operator==(const PreferenceBallot&) const = default;
};

std::string preference_prompt(std::string_view question, std::span<const std::string> texts,
                              PreferenceDimension dimension);

/// Letter chosen in a reply ('A' + index) and whether it declares a tie.
struct Choice {
  std::size_t index = 0;
  bool tie = false;
};
std::optional<Choice> parse_choice(std::string_view reply, std::size_t candidates);

/// Presents all candidates at once in a seeded order labeled A, B, C...
PreferenceBallot judge_preference(chat::ChatClient& client, std::string_view question_id,
                                  std::string_view question,
                                  const std::vector<std::pair<std::string, std::string>>& responses,
                                  PreferenceDimension dimension, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Offline judge

/// Distinct lexicon phrases found in the lowercased text.
int lexicon_hits(std::string_view text, Dimension dimension);
int comfort_hits(std::string_view text);    // union of the three dimension lexicons
int knowledge_hits(std::string_view text);  // medical vocabulary

/// Answers intensity_prompt with min(1, hits/5) and preference_prompt with
/// the candidate having the most hits ("TIE <letter>" when the best is shared).
class MockJudgeClient : public chat::ChatClient {
 public:
  std::string complete(const std::string& system, const std::string& user,
                       const chat::GenerationParams& params) override;
};

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
  double bleu = 0.0;
  double bleu1 = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  bool operator==(const MetricRow&) const = default;
};

/// BLEU/BLEU-1 at corpus level, ROUGE as the mean of per-pair F1.
MetricRow score_responses(std::span<const std::string> candidates,
                          std::span<const std::string> references);

struct MethodRow {
  std::string method;
  bool present = false;
  MetricRow doctor;    // against the original doctor responses
  MetricRow modified;  // against the rewritten responses
  std::optional<EmotionScores> intensity;
  std::map<std::string, double> preference_share;  // dimension -> percent of ballots won
  bool operator==(const MethodRow&) const = default;
};

struct MetricReport {
  std::vector<MethodRow> rows;
  std::map<std::string, int> ballots_counted;  // dimension -> ballots with a winner
  bool operator==(const MetricReport&) const = default;
};

struct ReportInputs {
  std::vector<std::string> methods;  // row order
  std::map<std::string, std::vector<std::string>> responses;
  std::vector<std::string> doctor_references;
  std::vector<std::string> modified_references;
  std::map<std::string, EmotionScores> intensity;  // aggregated per method
  std::vector<PreferenceBallot> ballots;
};

/// Methods without responses yield rows with present = false.
MetricReport build_report(const ReportInputs& inputs);

std::string report_to_csv(const MetricReport& report);
MetricReport report_from_csv(std::string_view csv);
std::string report_to_text(const MetricReport& report);
std::string report_to_json(const MetricReport& report);
MetricReport report_from_json(std::string_view text);

}  // namespace alignforge::eval
