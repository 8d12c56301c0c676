#include "alignforge/rewriter.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include "alignforge/common.hpp"
#include "alignforge/random.hpp"

namespace alignforge::rewriter {

using corpus::kAllEmotions;

std::string_view to_string(Kind kind) { return kind == Kind::er ? "er" : "eqsr"; }

Kind parse_kind(std::string_view name) {
  if (name == "er") return Kind::er;
  if (name == "eqsr") return Kind::eqsr;
  throw UsageError("unknown rewrite subset '" + std::string(name) + "' (expected er or eqsr)");
}

namespace {

constexpr std::string_view kQueryMarker = "Patient's question:\n";
constexpr std::string_view kResponseMarker = "\n\nDoctor's response:\n";

bool contains(std::string_view text, std::string_view needle) {
  return text.find(needle) != std::string_view::npos;
}

// Replaces {name} placeholders in one left-to-right pass; substituted values
// are not rescanned.
std::string substitute(std::string_view tmpl, const std::map<std::string, std::string, std::less<>>& values) {
  std::string out;
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const auto open = tmpl.find('{', pos);
    if (open == std::string_view::npos) break;
    const auto close = tmpl.find('}', open);
    if (close == std::string_view::npos) break;
    const auto it = values.find(tmpl.substr(open + 1, close - open - 1));
    out.append(tmpl.substr(pos, open - pos));
    if (it == values.end()) {
      out.append(tmpl.substr(open, close - open + 1));
    } else {
      out.append(it->second);
    }
    pos = close + 1;
  }
  out.append(tmpl.substr(pos));
  return out;
}

}  // namespace

void PromptTemplate::validate() const {
  const bool has_emotion = contains(template_text, "{emotion}");
  if (kind == Kind::eqsr && !has_emotion) throw UsageError("eqsr template lacks {emotion}");
  if (kind == Kind::er && has_emotion) throw UsageError("er template must not use {emotion}");
  for (const char* field : {"{patient_query}", "{doctor_response}"}) {
    if (!contains(template_text, field)) {
      throw UsageError(std::string("template lacks ") + field);
    }
  }
}

const PromptTemplate& default_eqsr_template() {
  static const PromptTemplate tmpl{
      "You will be given a dialogue between a patient and a doctor. "
      "Please rewrite the patient's question ensuring that it retains the original information "
      "while expressing a sense of {emotion}. At the same time, rewrite the doctor's response "
      "to retain the original information while soothing the patient's {emotion}.\n\n"
      "Patient's question:\n{patient_query}\n\nDoctor's response:\n{doctor_response}",
      Kind::eqsr};
  return tmpl;
}

const PromptTemplate& default_er_template() {
  static const PromptTemplate tmpl{
      "You will be given a dialogue between a patient and a doctor. "
      "Please rewrite only the doctor's response so that it shows empathy and compassion "
      "while retaining all of its medical knowledge. Leave the patient's question unchanged.\n\n"
      "Patient's question:\n{patient_query}\n\nDoctor's response:\n{doctor_response}",
      Kind::er};
  return tmpl;
}

std::string build_eqsr_prompt(const Dialogue& dialogue, EmotionTag emotion, const PromptTemplate& tmpl) {
  if (tmpl.kind != Kind::eqsr) throw UsageError("build_eqsr_prompt needs an eqsr template");
  tmpl.validate();
  return substitute(tmpl.template_text, {{"emotion", std::string(corpus::to_string(emotion))},
                                         {"patient_query", dialogue.patient_query},
                                         {"doctor_response", dialogue.doctor_response}}) +
         "\n\n" + std::string(kEqsrDirective);
}

std::string build_er_prompt(const Dialogue& dialogue, const PromptTemplate& tmpl) {
  if (tmpl.kind != Kind::er) throw UsageError("build_er_prompt needs an er template");
  tmpl.validate();
  return substitute(tmpl.template_text, {{"patient_query", dialogue.patient_query},
                                         {"doctor_response", dialogue.doctor_response}}) +
         "\n\n" + std::string(kErDirective);
}

std::vector<EmotionTag> assign_emotions(std::size_t n, std::uint64_t seed) {
  std::vector<EmotionTag> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = kAllEmotions[i % kAllEmotions.size()];
  Rng rng(mix_seed(seed, 0xe3));
  rng.shuffle(std::span<EmotionTag>(out));
  return out;
}

// ---------------------------------------------------------------------------
// Parsing

RewriteResult parse_rewrite(std::string_view raw, Kind kind) {
  struct Label {
    std::size_t at;
    std::size_t content;
    bool patient;
  };
  std::vector<Label> labels;
  for (std::size_t line = 0; line <= raw.size();) {
    std::size_t p = line;
    while (p < raw.size() && (raw[p] == ' ' || raw[p] == '\t')) ++p;
    const auto rest = raw.substr(p);
    if (rest.starts_with("PATIENT:")) labels.push_back({p, p + 8, true});
    if (rest.starts_with("DOCTOR:")) labels.push_back({p, p + 7, false});
    const auto nl = raw.find('\n', line);
    if (nl == std::string_view::npos) break;
    line = nl + 1;
  }

  std::optional<std::string> patient, doctor;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t end = i + 1 < labels.size() ? labels[i + 1].at : raw.size();
    std::string block = trim(raw.substr(labels[i].content, end - labels[i].content));
    (labels[i].patient ? patient : doctor) = std::move(block);
  }

  RewriteResult out;
  out.raw = std::string(raw);
  if (kind == Kind::eqsr && patient && !patient->empty()) out.parsed_query = patient;
  if (doctor) out.parsed_response = *doctor;
  out.ok = !out.parsed_response.empty() && (kind == Kind::er || out.parsed_query.has_value());
  return out;
}

// ---------------------------------------------------------------------------
// Mock backend

namespace {

using Phrases = std::array<std::string_view, 4>;

const Phrases& patient_phrases(EmotionTag tag) {
  static const std::array<Phrases, 5> table = {{
      {"I'm really scared.", "I'm terrified something is wrong.", "This frightens me.",
       "I'm so afraid."},
      {"I'm so anxious about this.", "I can't stop worrying.", "I'm very nervous.",
       "This is making me anxious."},
      {"This is embarrassing to ask.", "I feel ashamed to mention this.",
       "I'm a bit embarrassed.", "It's awkward to talk about."},
      {"I'm so frustrated.", "I'm fed up with this.", "Nothing has helped and I'm annoyed.",
       "I'm sick of this."},
      {"I'm not sure doctors can help.", "I doubt anyone takes this seriously.",
       "I don't trust the advice I got.", "I'm skeptical of treatments."},
  }};
  return table[static_cast<std::size_t>(tag)];
}

std::string_view feeling_word(EmotionTag tag) {
  static constexpr std::array<std::string_view, 5> words = {"scared", "anxious", "embarrassed",
                                                            "frustrated", "doubtful"};
  return words[static_cast<std::size_t>(tag)];
}

constexpr Phrases kEmpathy = {
    "I understand how uncomfortable this must be.",
    "I'm sorry you're dealing with this, and I'm here to help.",
    "That sounds difficult, and your concern is completely understandable.",
    "Thank you for sharing this; I understand your worry.",
};

std::uint64_t text_hash(std::string_view a, std::string_view b) {
  std::string joined(a);
  joined += '\x1f';
  joined += b;
  return std::stoull(sha256_hex(joined).substr(0, 16), nullptr, 16);
}

}  // namespace

std::string mock_rewrite(const Dialogue& dialogue, std::optional<EmotionTag> emotion, Kind kind,
                         std::uint64_t seed) {
  if ((kind == Kind::eqsr) != emotion.has_value()) {
    throw UsageError("mock_rewrite needs an emotion exactly for eqsr rewrites");
  }
  Rng rng(mix_seed(seed, text_hash(dialogue.patient_query, dialogue.doctor_response)));
  if (kind == Kind::er) {
    return "DOCTOR: " + std::string(kEmpathy[rng.below(4)]) + " " + dialogue.doctor_response;
  }
  const auto prefix = patient_phrases(*emotion)[rng.below(4)];
  const auto soothing =
      corpus::fill_feeling(corpus::kSoothingTemplates[rng.below(4)], feeling_word(*emotion));
  return "PATIENT: " + std::string(prefix) + " " + dialogue.patient_query + "\nDOCTOR: " + soothing +
         " " + dialogue.doctor_response;
}

std::string MockRewriteClient::complete(const std::string& system, const std::string& user,
                                        const chat::GenerationParams& params) {
  static constexpr std::string_view kRefusal = "I could not read the dialogue in this request.";
  const std::string_view text(user);
  Kind kind;
  std::size_t directive;
  if ((directive = text.rfind(kEqsrDirective)) != std::string_view::npos) {
    kind = Kind::eqsr;
  } else if ((directive = text.rfind(kErDirective)) != std::string_view::npos) {
    kind = Kind::er;
  } else {
    return std::string(kRefusal);
  }
  const auto q = text.find(kQueryMarker);
  const auto r = q == std::string_view::npos ? q : text.find(kResponseMarker, q);
  if (r == std::string_view::npos || r > directive) return std::string(kRefusal);

  Dialogue d;
  d.patient_query = std::string(text.substr(q + kQueryMarker.size(), r - q - kQueryMarker.size()));
  const auto body = r + kResponseMarker.size();
  d.doctor_response = trim(text.substr(body, directive - body));

  std::optional<EmotionTag> emotion;
  if (kind == Kind::eqsr) {
    const auto instructions = text.substr(0, q);
    std::size_t best = std::string_view::npos;
    for (EmotionTag tag : kAllEmotions) {
      const auto at = instructions.find(corpus::to_string(tag));
      if (at < best) {
        best = at;
        emotion = tag;
      }
    }
    if (!emotion) return std::string(kRefusal);
  }
  const std::uint64_t seed = mix_seed(mix_seed(seed_, params.seed), text_hash(system, ""));
  return mock_rewrite(d, emotion, kind, seed);
}

// ---------------------------------------------------------------------------
// Batch driver

double backoff_seconds(int attempt, double base, double cap, double jitter01) {
  const double raw = base * std::pow(2.0, std::max(0, attempt - 1));
  return std::min(cap, raw) * (0.5 + 0.5 * jitter01);
}

RewriteBatch rewrite_batch(const std::vector<Dialogue>& dialogues,
                           const std::optional<std::vector<EmotionTag>>& emotions, Kind kind,
                           chat::ChatClient& client, const RewriteOptions& options) {
  if (kind == Kind::eqsr && (!emotions || emotions->size() != dialogues.size())) {
    throw UsageError("eqsr rewriting needs one emotion per dialogue");
  }
  if (options.max_retries < 0) throw UsageError("max_retries must be non-negative");
  const std::size_t n = dialogues.size();
  const std::size_t workers = std::clamp<std::size_t>(options.concurrency, 1, std::max<std::size_t>(n, 1));

  std::vector<std::optional<corpus::ERExample>> er(n);
  std::vector<std::optional<corpus::EQSRExample>> eqsr(n);
  std::vector<std::optional<RewriteFailure>> failed(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr fatal;
  std::mutex fatal_mutex;

  auto process = [&](std::size_t i) {
    const Dialogue& d = dialogues[i];
    const std::string prompt = kind == Kind::eqsr
                                   ? build_eqsr_prompt(d, (*emotions)[i], options.eqsr_template)
                                   : build_er_prompt(d, options.er_template);
    Rng jitter(mix_seed(options.seed ^ 0x7177, i));
    std::string reason;
    const int attempts = 1 + options.max_retries;
    for (int attempt = 1; attempt <= attempts && !abort; ++attempt) {
      if (attempt > 1) {
        const double wait = backoff_seconds(attempt - 1, options.backoff_base_seconds,
                                            options.backoff_cap_seconds, jitter.uniform());
        std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      }
      chat::GenerationParams params = options.generation;
      params.seed = mix_seed(mix_seed(options.seed, i), static_cast<std::uint64_t>(attempt - 1));
      std::string raw;
      try {
        raw = client.complete(options.system_prompt, prompt, params);
      } catch (const chat::AuthError&) {
        throw;
      } catch (const std::exception& e) {
        reason = std::string("transport: ") + e.what();
        continue;
      }
      const RewriteResult parsed = parse_rewrite(raw, kind);
      if (!parsed.ok) {
        reason = "parse: missing labeled section";
        continue;
      }
      if (kind == Kind::er) {
        corpus::ERExample ex{d.id, d.patient_query, parsed.parsed_response, d.doctor_response,
                             d.split, d.source};
        if (ex.empathetic_response == ex.original_response) {
          reason = "parse: rewrite identical to original";
          continue;
        }
        er[i] = std::move(ex);
      } else {
        corpus::EQSRExample ex{d.id, (*emotions)[i], *parsed.parsed_query, parsed.parsed_response,
                               d.patient_query, d.doctor_response, d.split, d.source};
        if (ex.emotional_query == ex.original_query || ex.soothing_response == ex.original_response) {
          reason = "parse: rewrite identical to original";
          continue;
        }
        eqsr[i] = std::move(ex);
      }
      return;
    }
    failed[i] = RewriteFailure{d.id, reason.empty() ? "aborted" : reason, attempts};
  };

  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers && n > 0; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !abort; i = next++) {
        try {
          process(i);
        } catch (...) {
          std::lock_guard lock(fatal_mutex);
          if (!fatal) fatal = std::current_exception();
          abort = true;
        }
      }
    });
  }
  pool.clear();
  if (fatal) std::rethrow_exception(fatal);

  RewriteBatch out;
  for (std::size_t i = 0; i < n; ++i) {
    if (er[i]) out.er.push_back(std::move(*er[i]));
    if (eqsr[i]) out.eqsr.push_back(std::move(*eqsr[i]));
    if (failed[i]) out.failures.push_back(std::move(*failed[i]));
  }
  return out;
}

}  // namespace alignforge::rewriter
