#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <regex>

#include "alignforge/common.hpp"
#include "alignforge/eval.hpp"
#include "alignforge/random.hpp"

namespace alignforge::eval {

std::string_view to_string(Dimension d) {
  switch (d) {
    case Dimension::empathetic: return "empathetic";
    case Dimension::comforting: return "comforting";
    case Dimension::reassuring: return "reassuring";
  }
  return "?";
}

std::string_view to_string(PreferenceDimension d) {
  return d == PreferenceDimension::knowledgeable ? "knowledgeable" : "emotional";
}

PreferenceDimension parse_preference_dimension(std::string_view name) {
  if (name == "knowledgeable") return PreferenceDimension::knowledgeable;
  if (name == "emotional") return PreferenceDimension::emotional;
  throw UsageError("unknown preference dimension '" + std::string(name) + "'");
}

EmotionScores EmotionScores::from(double empathetic, double comforting, double reassuring) {
  EmotionScores s;
  s.empathetic = empathetic;
  s.comforting = comforting;
  s.reassuring = reassuring;
  s.mean = (empathetic + comforting + reassuring) / 3.0;
  s.max = std::max({empathetic, comforting, reassuring});
  return s;
}

double EmotionScores::get(Dimension d) const {
  switch (d) {
    case Dimension::empathetic: return empathetic;
    case Dimension::comforting: return comforting;
    case Dimension::reassuring: return reassuring;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Intensity

namespace {

constexpr std::string_view kDimensionMarker = "\nDimension: ";
constexpr std::string_view kResponseMarker = "\nResponse:\n";
constexpr std::string_view kCandidatesMarker = "\nCandidate responses:\n";
constexpr std::string_view kCriterionMarker = "\n\nCriterion: ";

// Newlines inside quoted texts would break the line-oriented prompt layout.
std::string one_line(std::string_view text) {
  std::string out(text);
  std::replace(out.begin(), out.end(), '\n', ' ');
  std::replace(out.begin(), out.end(), '\r', ' ');
  return out;
}

}  // namespace

std::string intensity_prompt(Dimension dimension, std::string_view response) {
  const std::string dim(to_string(dimension));
  return "Rate how " + dim +
         " the following doctor's response is toward the patient, on a scale from 0 (not at all) "
         "to 1 (extremely). Reply with a single number between 0 and 1.\n" +
         std::string(kDimensionMarker.substr(1)) + dim + std::string(kResponseMarker) +
         one_line(response);
}

std::optional<double> parse_first_number(std::string_view reply) {
  static const std::regex number(R"([-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?)");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(reply.begin(), reply.end(), m, number)) return std::nullopt;
  double value = 0.0;
  const std::string token = m.str();
  const char* begin = token.data() + (token[0] == '+' ? 1 : 0);
  const auto res = std::from_chars(begin, token.data() + token.size(), value);
  if (res.ec != std::errc()) return std::nullopt;
  return value;
}

EmotionScores judge_intensity(chat::ChatClient& client, std::string_view response) {
  if (trim(response).empty()) throw UsageError("judge_intensity needs a non-empty response");
  std::array<double, 3> values{};
  bool failed = false;
  for (std::size_t d = 0; d < 3; ++d) {
    const std::string prompt = intensity_prompt(kAllDimensions[d], response);
    std::optional<double> value;
    for (int attempt = 0; attempt <= kJudgeRetries && !value; ++attempt) {
      chat::GenerationParams params;
      params.temperature = 0.0;
      params.seed = static_cast<std::uint64_t>(attempt);
      try {
        value = parse_first_number(client.complete(std::string(kJudgeSystemPrompt), prompt, params));
      } catch (const chat::AuthError&) {
        throw;
      } catch (const std::exception&) {
        value.reset();
      }
    }
    if (value) {
      values[d] = std::clamp(*value, 0.0, 1.0);
    } else {
      failed = true;
    }
  }
  auto scores = EmotionScores::from(values[0], values[1], values[2]);
  scores.parse_failure = failed;
  return scores;
}

EmotionScores aggregate_intensity(std::span<const EmotionScores> per_response) {
  if (per_response.empty()) throw UsageError("aggregate_intensity needs at least one score");
  EmotionScores out;
  for (const auto& s : per_response) {
    out.empathetic += s.empathetic;
    out.comforting += s.comforting;
    out.reassuring += s.reassuring;
    out.mean += s.mean;
    out.max += s.max;
    out.parse_failure = out.parse_failure || s.parse_failure;
  }
  const auto n = static_cast<double>(per_response.size());
  out.empathetic /= n;
  out.comforting /= n;
  out.reassuring /= n;
  out.mean /= n;
  out.max /= n;
  return out;
}

// ---------------------------------------------------------------------------
// Preference

std::string preference_prompt(std::string_view question, std::span<const std::string> texts,
                              PreferenceDimension dimension) {
  std::string out = "Patient question:\n" + one_line(question) + "\n" + std::string(kCandidatesMarker.substr(1));
  for (std::size_t i = 0; i < texts.size(); ++i) {
    out += static_cast<char>('A' + i);
    out += ". " + one_line(texts[i]) + "\n";
  }
  out += std::string(kCriterionMarker.substr(1)) + std::string(to_string(dimension)) + "\n";
  out += dimension == PreferenceDimension::knowledgeable
             ? "Which response conveys the most accurate and useful medical knowledge?"
             : "Which response best acknowledges and soothes the patient's emotions?";
  out += " Reply with exactly one letter. If responses are equally good, reply TIE followed by the "
         "letter of the first of them.";
  return out;
}

std::optional<Choice> parse_choice(std::string_view reply, std::size_t candidates) {
  auto is_word_char = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  Choice choice;
  bool found = false;
  for (std::size_t i = 0; i < reply.size(); ++i) {
    if (i > 0 && is_word_char(reply[i - 1])) continue;
    std::size_t j = i;
    while (j < reply.size() && is_word_char(reply[j])) ++j;
    const auto word = reply.substr(i, j - i);
    if (word == "TIE") choice.tie = true;
    if (!found && word.size() == 1 && word[0] >= 'A' && word[0] < 'A' + static_cast<int>(candidates)) {
      choice.index = static_cast<std::size_t>(word[0] - 'A');
      found = true;
    }
    if (j > i) i = j - 1;
  }
  if (!found) return std::nullopt;
  return choice;
}

PreferenceBallot judge_preference(chat::ChatClient& client, std::string_view question_id,
                                  std::string_view question,
                                  const std::vector<std::pair<std::string, std::string>>& responses,
                                  PreferenceDimension dimension, std::uint64_t seed) {
  if (responses.size() < 2) throw UsageError("judge_preference needs at least two responses");
  if (responses.size() > 26) throw UsageError("judge_preference supports at most 26 responses");
  std::vector<std::size_t> order(responses.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0xba11));
  rng.shuffle(std::span<std::size_t>(order));

  PreferenceBallot ballot;
  ballot.question_id = std::string(question_id);
  ballot.dimension = dimension;
  ballot.seed = seed;
  std::vector<std::string> texts;
  for (std::size_t i : order) {
    ballot.candidates.push_back(responses[i].first);
    texts.push_back(responses[i].second);
  }
  const std::string prompt = preference_prompt(question, texts, dimension);
  for (int attempt = 0; attempt <= kJudgeRetries; ++attempt) {
    chat::GenerationParams params;
    params.temperature = 0.0;
    params.seed = static_cast<std::uint64_t>(attempt);
    std::optional<Choice> choice;
    try {
      choice = parse_choice(client.complete(std::string(kJudgeSystemPrompt), prompt, params),
                            texts.size());
    } catch (const chat::AuthError&) {
      throw;
    } catch (const std::exception&) {
      continue;
    }
    if (choice) {
      ballot.winner = ballot.candidates[choice->index];
      ballot.tie = choice->tie;
      break;
    }
  }
  return ballot;
}

// ---------------------------------------------------------------------------
// Offline judge

namespace {

using Lexicon = std::vector<std::string_view>;

const Lexicon& lexicon(Dimension d) {
  static const std::array<Lexicon, 3> table = {{
      {"i understand", "i hear you", "i'm sorry", "you feel", "feeling", "understandable",
       "must be", "your concern", "thank you for sharing", "that sounds"},
      {"don't worry", "here to help", "completely normal", "not alone", "reassure",
       "rest assured", "it's okay", "natural", "take a deep breath"},
      {"common", "treatable", "manageable", "can be treated", "will recover", "good news",
       "nothing serious", "very likely", "improve", "rest assured"},
  }};
  return table[static_cast<std::size_t>(d)];
}

const Lexicon& knowledge_lexicon() {
  static const Lexicon words = {
      "test", "x-ray", "ecg", "blood", "ibuprofen", "paracetamol", "antacid", "antihistamine",
      "cream", "infection", "specialist", "exam", "clinic", "fluids", "stretches", "reflux",
      "eczema", "arthritis", "tinnitus", "insomnia", "bronchitis", "pharyngitis", "gastritis",
      "pressure", "caffeine", "salt", "steroid", "viral", "strain", "heart", "allergic",
      "inflammation", "retention", "hearing", "headache"};
  return words;
}

std::string lower(std::string_view text) {
  std::string out(text);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

int count_hits(std::string_view text, const Lexicon& words) {
  const std::string t = lower(text);
  return static_cast<int>(std::count_if(words.begin(), words.end(), [&](std::string_view w) {
    return t.find(w) != std::string::npos;
  }));
}

std::string format_score(double value) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

}  // namespace

int lexicon_hits(std::string_view text, Dimension dimension) {
  return count_hits(text, lexicon(dimension));
}

int comfort_hits(std::string_view text) {
  Lexicon all;
  for (Dimension d : kAllDimensions) {
    for (auto w : lexicon(d)) {
      if (std::find(all.begin(), all.end(), w) == all.end()) all.push_back(w);
    }
  }
  return count_hits(text, all);
}

int knowledge_hits(std::string_view text) { return count_hits(text, knowledge_lexicon()); }

std::string MockJudgeClient::complete(const std::string&, const std::string& user,
                                      const chat::GenerationParams&) {
  const std::string_view text(user);
  if (const auto dim_at = text.find(kDimensionMarker); dim_at != std::string_view::npos) {
    const auto name_at = dim_at + kDimensionMarker.size();
    const auto resp_at = text.find(kResponseMarker, name_at);
    if (resp_at == std::string_view::npos) return "unreadable request";
    const auto name = text.substr(name_at, resp_at - name_at);
    for (Dimension d : kAllDimensions) {
      if (name == to_string(d)) {
        const int hits = lexicon_hits(text.substr(resp_at + kResponseMarker.size()), d);
        return format_score(std::min(1.0, hits / 5.0));
      }
    }
    return "unknown dimension";
  }

  const auto cand_at = text.find(kCandidatesMarker);
  const auto crit_at = text.find(kCriterionMarker);
  if (cand_at == std::string_view::npos || crit_at == std::string_view::npos) return "unreadable request";
  const auto crit_end = text.find('\n', crit_at + kCriterionMarker.size());
  const bool knowledge =
      text.substr(crit_at + kCriterionMarker.size(), crit_end - crit_at - kCriterionMarker.size()) ==
      "knowledgeable";

  std::vector<int> scores;
  auto block = text.substr(cand_at + kCandidatesMarker.size(), crit_at - cand_at - kCandidatesMarker.size());
  while (!block.empty()) {
    const auto nl = block.find('\n');
    const auto line = block.substr(0, nl);
    const auto body = line.size() > 3 ? line.substr(3) : std::string_view{};
    scores.push_back(knowledge ? knowledge_hits(body) : comfort_hits(body));
    if (nl == std::string_view::npos) break;
    block.remove_prefix(nl + 1);
  }
  if (scores.empty()) return "unreadable request";
  const auto best = std::max_element(scores.begin(), scores.end());
  const auto letter = std::string(1, static_cast<char>('A' + (best - scores.begin())));
  return std::count(scores.begin(), scores.end(), *best) > 1 ? "TIE " + letter : letter;
}

}  // namespace alignforge::eval
