#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "alignforge/chat_client.hpp"
#include "alignforge/corpus.hpp"

namespace alignforge::rewriter {

using corpus::Dialogue;
using corpus::EmotionTag;

enum class Kind { er, eqsr };

std::string_view to_string(Kind kind);
Kind parse_kind(std::string_view name);

/// Instruction text with {emotion}, {patient_query} and {doctor_response}
/// placeholders. Only eqsr templates may (and must) use {emotion}.
struct PromptTemplate {
  std::string template_text;
  Kind kind = Kind::eqsr;

  void validate() const;
};

const PromptTemplate& default_eqsr_template();
const PromptTemplate& default_er_template();

inline constexpr std::string_view kEqsrDirective =
    "Respond with exactly two sections labeled PATIENT: and DOCTOR:";
inline constexpr std::string_view kErDirective = "Respond with exactly one section labeled DOCTOR:";

std::string build_eqsr_prompt(const Dialogue& dialogue, EmotionTag emotion,
                              const PromptTemplate& tmpl = default_eqsr_template());
std::string build_er_prompt(const Dialogue& dialogue,
                            const PromptTemplate& tmpl = default_er_template());

/// Balanced assignment (tag i % 5 for record i) followed by a seeded shuffle.
std::vector<EmotionTag> assign_emotions(std::size_t n, std::uint64_t seed);

struct RewriteResult {
  std::string raw;
  std::optional<std::string> parsed_query;
  std::string parsed_response;
  bool ok = false;
};

/// Takes the last PATIENT: block (eqsr) and the last DOCTOR: block. Labels
/// count only at the start of a line.
RewriteResult parse_rewrite(std::string_view raw, Kind kind);

/// Offline rewrite: emotion and comfort phrases prefixed to the original
/// texts, emitted as labeled blocks.
std::string mock_rewrite(const Dialogue& dialogue, std::optional<EmotionTag> emotion, Kind kind,
                         std::uint64_t seed);

/// Chat client answering this module's rewrite prompts with mock_rewrite.
/// The dialogue and emotion are read back out of the prompt; replies depend
/// only on (system, user, seed, params.seed).
class MockRewriteClient : public chat::ChatClient {
 public:
  explicit MockRewriteClient(std::uint64_t seed = 0) : seed_(seed) {}
  std::string complete(const std::string& system, const std::string& user,
                       const chat::GenerationParams& params) override;

 private:
  std::uint64_t seed_;
};

inline constexpr std::string_view kRewriteSystemPrompt =
    "You rewrite medical dialogues. Keep every medical fact from the original.";

struct RewriteOptions {
  std::size_t concurrency = 4;
  int max_retries = 2;
  double backoff_base_seconds = 1.0;
  double backoff_cap_seconds = 30.0;
  std::uint64_t seed = 0;
  chat::GenerationParams generation;
  std::string system_prompt = std::string(kRewriteSystemPrompt);
  PromptTemplate er_template = default_er_template();
  PromptTemplate eqsr_template = default_eqsr_template();
};

struct RewriteFailure {
  std::string dialogue_id;
  std::string reason;
  int attempts = 0;
};

struct RewriteBatch {
  std::vector<corpus::ERExample> er;      // filled for Kind::er, input order
  std::vector<corpus::EQSRExample> eqsr;  // filled for Kind::eqsr, input order
  std::vector<RewriteFailure> failures;   // input order
};

/// Rewrites every dialogue with at most `concurrency` calls in flight. Each
/// item gets 1 + max_retries attempts; transport and parse failures are
/// retried with jittered exponential backoff. An AuthError aborts the batch.
RewriteBatch rewrite_batch(const std::vector<Dialogue>& dialogues,
                           const std::optional<std::vector<EmotionTag>>& emotions, Kind kind,
                           chat::ChatClient& client, const RewriteOptions& options = {});

/// Backoff before retry number `attempt` (1-based): min(cap, base * 2^(attempt-1))
/// scaled by a jitter factor in [0.5, 1].
double backoff_seconds(int attempt, double base, double cap, double jitter01);

}  // namespace alignforge::rewriter
