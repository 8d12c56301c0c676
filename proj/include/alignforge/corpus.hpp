#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace alignforge::corpus {

enum class Split { train, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

/// Single-turn patient query and doctor response.
struct Dialogue {
  std::string id;
  std::string patient_query;
  std::string doctor_response;
  Split split = Split::train;
  std::string source;

  bool operator==(const Dialogue&) const = default;
};

enum class EmotionTag { fear, anxiety, embarrassment, frustration, distrust };

inline constexpr std::array<EmotionTag, 5> kAllEmotions = {
    EmotionTag::fear, EmotionTag::anxiety, EmotionTag::embarrassment,
    EmotionTag::frustration, EmotionTag::distrust};

std::string_view to_string(EmotionTag tag);
EmotionTag parse_emotion(std::string_view name);

/// Doctor response rewritten to be empathetic; query untouched.
struct ERExample {
  std::string dialogue_id;
  std::string patient_query;
  std::string empathetic_response;
  std::string original_response;
  Split split = Split::train;
  std::string source;

  bool operator==(const ERExample&) const = default;
};

/// Query rewritten to carry a negative emotion, response rewritten to soothe it.
struct EQSRExample {
  std::string dialogue_id;
  EmotionTag emotion = EmotionTag::fear;
  std::string emotional_query;
  std::string soothing_response;
  std::string original_query;
  std::string original_response;
  Split split = Split::train;
  std::string source;

  bool operator==(const EQSRExample&) const = default;
};

struct PreferencePair {
  std::string prompt;
  std::string chosen;
  std::string rejected;

  bool operator==(const PreferencePair&) const = default;
};

struct KTOExample {
  std::string prompt;
  std::string completion;
  bool desirable = false;

  bool operator==(const KTOExample&) const = default;
};

// Invariant checks; throw DataError with a description of the violation.
void validate(const Dialogue& d);
void validate(const ERExample& e);
void validate(const EQSRExample& e);

// Line-delimited JSON persistence. A missing id becomes
// "<source>-<split>-<6-digit line index>"; `split` is the default for records
// without one and `source` defaults to the file stem.
std::vector<Dialogue> load_dataset(const std::filesystem::path& path, Split split);
void save_dataset(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues);

std::vector<ERExample> load_er(const std::filesystem::path& path);
void save_er(const std::filesystem::path& path, const std::vector<ERExample>& examples);
std::vector<EQSRExample> load_eqsr(const std::filesystem::path& path);
void save_eqsr(const std::filesystem::path& path, const std::vector<EQSRExample>& examples);

std::string synthesize_id(std::string_view source, Split split, std::size_t index);

struct RewriteSplit {
  std::vector<Dialogue> er_part;
  std::vector<Dialogue> eqsr_part;
};

/// Soothing openings with a "{f}" slot for a feeling word. Synthetic doctors
/// use them now and then; the offline rewriter uses them on every EQ+SR reply.
inline constexpr std::array<std::string_view, 4> kSoothingTemplates = {
    "I understand you feel {f}. Don't worry, this is common and treatable.",
    "It's completely normal to feel {f}. I'm here to help, and this is manageable.",
    "I hear you, feeling {f} is natural. You're not alone, and this can be treated.",
    "I'm sorry you feel {f}. Rest assured, I'm here to help and you will recover.",
};
std::string fill_feeling(std::string_view soothing_template, std::string_view feeling);

/// ER share of the training set: roughly 60k of 110k dialogues.
inline constexpr double kDefaultErFraction = 6.0 / 11.0;

/// Seeded shuffle then prefix (ER) / suffix (EQ+SR) split.
RewriteSplit split_for_rewriting(const std::vector<Dialogue>& dialogues,
                                 double er_fraction = kDefaultErFraction,
                                 std::uint64_t seed = 0);

struct PairConversion {
  std::vector<PreferencePair> pairs;
  std::size_t dropped = 0;
};

/// prompt = emotional query, chosen = soothing response, rejected = original.
PairConversion to_preference_pairs(const std::vector<EQSRExample>& examples);

/// Two records per example: the soothing response (desirable) and the
/// original response (undesirable), both prompted by the emotional query.
std::vector<KTOExample> to_kto_examples(const std::vector<EQSRExample>& examples);

/// Templated medical dialogues with seeded symptom/context slots. Used as the
/// offline corpus for tests and the bundled pipeline configuration.
std::vector<Dialogue> synthesize_corpus(std::size_t n, std::uint64_t seed, Split split,
                                        std::string_view source = "synthetic");

}  // namespace alignforge::corpus
