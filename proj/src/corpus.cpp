#include "alignforge/corpus.hpp"

#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "alignforge/common.hpp"
#include "alignforge/random.hpp"

namespace alignforge::corpus {

using nlohmann::json;

std::string_view to_string(Split split) {
  return split == Split::train ? "train" : "test";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw DataError("unknown split '" + std::string(name) + "'");
}

std::string_view to_string(EmotionTag tag) {
  switch (tag) {
    case EmotionTag::fear: return "fear";
    case EmotionTag::anxiety: return "anxiety";
    case EmotionTag::embarrassment: return "embarrassment";
    case EmotionTag::frustration: return "frustration";
    case EmotionTag::distrust: return "distrust";
  }
  return "fear";
}

EmotionTag parse_emotion(std::string_view name) {
  for (auto tag : kAllEmotions) {
    if (to_string(tag) == name) return tag;
  }
  throw DataError("unknown emotion '" + std::string(name) + "'");
}

namespace {

void require_text(const std::string& value, const char* field, const std::string& id) {
  if (trim(value).empty()) {
    throw DataError("record '" + id + "': field '" + field + "' is empty");
  }
}

// Dump with invalid UTF-8 replaced; model output is raw bytes.
std::string dump_line(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

template <typename Parse>
void for_each_record(const std::filesystem::path& path, Parse&& parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    const std::size_t line_no = ++index;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(line_no) + ": malformed record (" +
                      e.what() + ")");
    }
    if (!j.is_object()) {
      throw DataError("line " + std::to_string(line_no) + ": record is not an object");
    }
    try {
      parse(j, line_no);
    } catch (const DataError& e) {
      const std::string what = e.what();
      if (what.rfind("line ", 0) == 0) throw;
      throw DataError("line " + std::to_string(line_no) + ": " + what);
    }
  }
}

std::string required_string(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) {
    throw DataError(std::string("missing field '") + field + "'");
  }
  if (!it->is_string()) throw DataError(std::string("field '") + field + "' is not a string");
  return it->get<std::string>();
}

std::string optional_string(const json& j, const char* field, std::string fallback) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) return fallback;
  if (!it->is_string()) throw DataError(std::string("field '") + field + "' is not a string");
  return it->get<std::string>();
}

template <typename T, typename ToJson>
void save_lines(const std::filesystem::path& path, const std::vector<T>& items, ToJson&& to_json) {
  std::string out;
  for (const auto& item : items) {
    out += dump_line(to_json(item));
    out += '\n';
  }
  write_file(path, out);
}

void check_unique(std::set<std::string>& seen, const std::string& id) {
  if (!seen.insert(id).second) throw DataError("duplicate id '" + id + "'");
}

}  // namespace

void validate(const Dialogue& d) {
  require_text(d.patient_query, "patient_query", d.id);
  require_text(d.doctor_response, "doctor_response", d.id);
}

void validate(const ERExample& e) {
  require_text(e.patient_query, "patient_query", e.dialogue_id);
  require_text(e.empathetic_response, "empathetic_response", e.dialogue_id);
  require_text(e.original_response, "original_response", e.dialogue_id);
  if (e.empathetic_response == e.original_response) {
    throw DataError("record '" + e.dialogue_id + "': empathetic_response equals original");
  }
}

void validate(const EQSRExample& e) {
  require_text(e.emotional_query, "emotional_query", e.dialogue_id);
  require_text(e.soothing_response, "soothing_response", e.dialogue_id);
  require_text(e.original_query, "original_query", e.dialogue_id);
  require_text(e.original_response, "original_response", e.dialogue_id);
  if (e.emotional_query == e.original_query) {
    throw DataError("record '" + e.dialogue_id + "': emotional_query equals original");
  }
  if (e.soothing_response == e.original_response) {
    throw DataError("record '" + e.dialogue_id + "': soothing_response equals original");
  }
}

std::string synthesize_id(std::string_view source, Split split, std::size_t index) {
  std::ostringstream ss;
  ss << source << '-' << to_string(split) << '-' << std::setw(6) << std::setfill('0') << index;
  return ss.str();
}

std::vector<Dialogue> load_dataset(const std::filesystem::path& path, Split split) {
  std::vector<Dialogue> out;
  std::set<std::string> seen;
  const std::string default_source = path.stem().string();
  for_each_record(path, [&](const json& j, std::size_t line_no) {
    Dialogue d;
    d.patient_query = required_string(j, "patient_query");
    d.doctor_response = required_string(j, "doctor_response");
    d.split = parse_split(optional_string(j, "split", std::string(to_string(split))));
    d.source = optional_string(j, "source", default_source);
    d.id = optional_string(j, "id", "");
    if (d.id.empty()) d.id = synthesize_id(d.source, d.split, line_no - 1);
    validate(d);
    check_unique(seen, d.id);
    out.push_back(std::move(d));
  });
  return out;
}

void save_dataset(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues) {
  save_lines(path, dialogues, [](const Dialogue& d) {
    return json{{"id", d.id},
                {"patient_query", d.patient_query},
                {"doctor_response", d.doctor_response},
                {"split", to_string(d.split)},
                {"source", d.source}};
  });
}

// Rewritten files stay loadable as plain datasets: patient_query and
// doctor_response carry the rewritten texts.
void save_er(const std::filesystem::path& path, const std::vector<ERExample>& examples) {
  save_lines(path, examples, [](const ERExample& e) {
    return json{{"id", e.dialogue_id},
                {"patient_query", e.patient_query},
                {"doctor_response", e.empathetic_response},
                {"split", to_string(e.split)},
                {"source", e.source},
                {"original_response", e.original_response}};
  });
}

std::vector<ERExample> load_er(const std::filesystem::path& path) {
  std::vector<ERExample> out;
  std::set<std::string> seen;
  for_each_record(path, [&](const json& j, std::size_t) {
    ERExample e;
    e.dialogue_id = required_string(j, "id");
    e.patient_query = required_string(j, "patient_query");
    e.empathetic_response = required_string(j, "doctor_response");
    e.original_response = required_string(j, "original_response");
    e.split = parse_split(optional_string(j, "split", "train"));
    e.source = optional_string(j, "source", "");
    validate(e);
    check_unique(seen, e.dialogue_id);
    out.push_back(std::move(e));
  });
  return out;
}

void save_eqsr(const std::filesystem::path& path, const std::vector<EQSRExample>& examples) {
  save_lines(path, examples, [](const EQSRExample& e) {
    return json{{"id", e.dialogue_id},
                {"patient_query", e.emotional_query},
                {"doctor_response", e.soothing_response},
                {"split", to_string(e.split)},
                {"source", e.source},
                {"emotion", to_string(e.emotion)},
                {"emotional_query", e.emotional_query},
                {"soothing_response", e.soothing_response},
                {"original_query", e.original_query},
                {"original_response", e.original_response}};
  });
}

std::vector<EQSRExample> load_eqsr(const std::filesystem::path& path) {
  std::vector<EQSRExample> out;
  std::set<std::string> seen;
  for_each_record(path, [&](const json& j, std::size_t) {
    EQSRExample e;
    e.dialogue_id = required_string(j, "id");
    e.emotion = parse_emotion(required_string(j, "emotion"));
    e.emotional_query = required_string(j, "emotional_query");
    e.soothing_response = required_string(j, "soothing_response");
    e.original_query = required_string(j, "original_query");
    e.original_response = required_string(j, "original_response");
    e.split = parse_split(optional_string(j, "split", "train"));
    e.source = optional_string(j, "source", "");
    validate(e);
    check_unique(seen, e.dialogue_id);
    out.push_back(std::move(e));
  });
  return out;
}

RewriteSplit split_for_rewriting(const std::vector<Dialogue>& dialogues, double er_fraction,
                                 std::uint64_t seed) {
  if (!(er_fraction > 0.0 && er_fraction < 1.0)) {
    throw UsageError("er_fraction must lie strictly between 0 and 1");
  }
  std::vector<std::size_t> order(dialogues.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5e11));
  rng.shuffle(std::span<std::size_t>(order));

  const auto n_er = static_cast<std::size_t>(
      std::llround(er_fraction * static_cast<double>(dialogues.size())));
  RewriteSplit out;
  out.er_part.reserve(n_er);
  out.eqsr_part.reserve(dialogues.size() - n_er);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_er ? out.er_part : out.eqsr_part).push_back(dialogues[order[i]]);
  }
  return out;
}

PairConversion to_preference_pairs(const std::vector<EQSRExample>& examples) {
  PairConversion out;
  for (const auto& e : examples) {
    if (e.soothing_response == e.original_response) {
      ++out.dropped;
      continue;
    }
    out.pairs.push_back({e.emotional_query, e.soothing_response, e.original_response});
  }
  return out;
}

std::vector<KTOExample> to_kto_examples(const std::vector<EQSRExample>& examples) {
  std::vector<KTOExample> out;
  out.reserve(examples.size() * 2);
  for (const auto& e : examples) {
    out.push_back({e.emotional_query, e.soothing_response, true});
    out.push_back({e.emotional_query, e.original_response, false});
  }
  return out;
}

namespace {

struct Complaint {
  const char* symptom;
  const char* assessment;
  const char* advice;
};

// Doctor texts are terse and clinical, with no comforting vocabulary.
constexpr Complaint kComplaints[] = {
    {"a dry cough", "This looks like viral bronchitis.", "Drink fluids and get a chest X-ray if it lasts."},
    {"a bad headache", "This may be a tension headache.", "Take ibuprofen and limit screen time."},
    {"lower back pain", "This is likely a muscle strain.", "Apply heat and do gentle stretches daily."},
    {"a sore throat", "This suggests pharyngitis.", "Gargle salt water and get a strep test."},
    {"chest tightness", "This needs an ECG to rule out the heart.", "Visit a clinic today for testing."},
    {"stomach cramps", "This may be gastritis.", "Avoid spicy food and take an antacid."},
    {"dizzy spells", "This could be low blood pressure.", "Drink more water and stand up slowly."},
    {"itchy red patches", "This looks like eczema.", "Use a steroid cream twice a day."},
    {"swollen ankles", "This may be fluid retention.", "Reduce salt and raise your legs at night."},
    {"blurred vision", "This needs an eye exam.", "See an eye specialist this week."},
    {"a high fever", "This suggests an infection.", "Take paracetamol and get a blood test."},
    {"joint pain", "This may be early arthritis.", "Get a blood test for inflammation markers."},
    {"heartburn", "This is likely acid reflux.", "Eat smaller meals and avoid late dinners."},
    {"a rash on my face", "This may be an allergic reaction.", "Take an antihistamine and stop new creams."},
    {"ringing ears", "This sounds like tinnitus.", "Get a hearing test and avoid loud noise."},
    {"trouble sleeping", "This may be insomnia.", "Keep a fixed bedtime and avoid caffeine."},
};

constexpr const char* kOpenings[] = {"Hi doctor,", "Hello,", "Doctor,", "Hi,"};
// Some doctors open with a soothing line regardless of how the patient sounds.
constexpr const char* kGenericFeelings[] = {"worried", "scared", "anxious",
                                            "embarrassed", "frustrated", "doubtful"};
constexpr std::uint64_t kSoothingOneIn = 4;
constexpr const char* kDurations[] = {"for three days", "for two weeks", "since last month",
                                      "for a week", "since yesterday", "for months"};
// Optional background sentences; they also vary where the answer starts.
constexpr const char* kDetails[] = {"I am 34 years old.",
                                    "It started after a long trip.",
                                    "It gets worse at night.",
                                    "I have no other health problems.",
                                    "My mother had something similar years ago.",
                                    "I have tried resting but it did not help much."};
constexpr const char* kQuestions[] = {"What could it be?", "What should I do?",
                                      "Is it serious?", "What is the cause?"};

template <typename T, std::size_t N>
const T& pick(Rng& rng, const T (&items)[N]) {
  return items[rng.below(N)];
}

}  // namespace

std::string fill_feeling(std::string_view soothing_template, std::string_view feeling) {
  std::string out(soothing_template);
  const auto slot = out.find("{f}");
  if (slot != std::string::npos) out.replace(slot, 3, feeling);
  return out;
}

std::vector<Dialogue> synthesize_corpus(std::size_t n, std::uint64_t seed, Split split,
                                        std::string_view source) {
  Rng rng(mix_seed(seed, split == Split::train ? 11 : 17));
  std::vector<Dialogue> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Complaint& c = pick(rng, kComplaints);
    Dialogue d;
    d.id = synthesize_id(source, split, i);
    d.patient_query = std::string(pick(rng, kOpenings)) + " I have had " + c.symptom + " " +
                      pick(rng, kDurations) + ".";
    for (auto k = rng.below(3); k > 0; --k) d.patient_query += std::string(" ") + pick(rng, kDetails);
    d.patient_query += std::string(" ") + pick(rng, kQuestions);
    d.doctor_response = std::string(c.assessment) + " " + c.advice;
    if (rng.below(kSoothingOneIn) == 0) {
      const auto tmpl = kSoothingTemplates[rng.below(kSoothingTemplates.size())];
      d.doctor_response = fill_feeling(tmpl, pick(rng, kGenericFeelings)) + " " + d.doctor_response;
    }
    d.split = split;
    d.source = std::string(source);
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace alignforge::corpus
