#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "alignforge/common.hpp"
#include "alignforge/corpus.hpp"
#include "test_util.hpp"

using namespace alignforge;
using namespace alignforge::corpus;
using alignforge::testing::TempDir;

namespace {

Dialogue dialogue(const std::string& id, const std::string& q = "I have a cough.",
                  const std::string& r = "Drink fluids and rest.") {
  return {id, q, r, Split::train, "unit"};
}

EQSRExample eqsr(const std::string& id, const std::string& soothing = "Don't worry. Rest.") {
  EQSRExample e;
  e.dialogue_id = id;
  e.emotion = EmotionTag::anxiety;
  e.emotional_query = "I'm so anxious. I have a cough.";
  e.soothing_response = soothing;
  e.original_query = "I have a cough.";
  e.original_response = "Rest.";
  e.source = "unit";
  return e;
}

std::vector<std::string> ids(const std::vector<Dialogue>& ds) {
  std::vector<std::string> out;
  for (const auto& d : ds) out.push_back(d.id);
  return out;
}

}  // namespace

TEST(LoadDataset, ReadsValidLinesInFileOrder) {
  TempDir dir;
  write_file(dir / "raw.jsonl",
             R"({"id":"a","patient_query":"q1","doctor_response":"r1"})"
             "\n"
             R"({"id":"b","patient_query":"q2","doctor_response":"r2"})"
             "\n"
             R"({"id":"c","patient_query":"q3","doctor_response":"r3"})"
             "\n");
  const auto ds = load_dataset(dir / "raw.jsonl", Split::train);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ids(ds), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(ds[1].patient_query, "q2");
  EXPECT_EQ(ds[2].doctor_response, "r3");
}

TEST(LoadDataset, SkipsBlankLines) {
  TempDir dir;
  write_file(dir / "raw.jsonl",
             R"({"id":"a","patient_query":"q1","doctor_response":"r1"})"
             "\n   \n"
             R"({"id":"b","patient_query":"q2","doctor_response":"r2"})"
             "\n");
  EXPECT_EQ(load_dataset(dir / "raw.jsonl", Split::train).size(), 2u);
}

TEST(LoadDataset, MissingFieldNamesLine) {
  TempDir dir;
  write_file(dir / "raw.jsonl",
             R"({"id":"a","patient_query":"q1","doctor_response":"r1"})"
             "\n"
             R"({"id":"b","patient_query":"q2"})"
             "\n");
  try {
    load_dataset(dir / "raw.jsonl", Split::train);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string what = e.what();
    EXPECT_EQ(what.rfind("line 2:", 0), 0u) << what;
    EXPECT_NE(what.find("missing field"), std::string::npos) << what;
  }
}

TEST(LoadDataset, MalformedJsonNamesLine) {
  TempDir dir;
  write_file(dir / "raw.jsonl", "{not json\n");
  EXPECT_THROW(
      {
        try {
          load_dataset(dir / "raw.jsonl", Split::train);
        } catch (const DataError& e) {
          EXPECT_EQ(std::string(e.what()).rfind("line 1:", 0), 0u);
          throw;
        }
      },
      DataError);
}

TEST(LoadDataset, EmptyFileIsEmptyList) {
  TempDir dir;
  write_file(dir / "raw.jsonl", "");
  EXPECT_TRUE(load_dataset(dir / "raw.jsonl", Split::test).empty());
}

TEST(LoadDataset, SynthesizesMissingIdsFromLineIndex) {
  TempDir dir;
  write_file(dir / "clinic.jsonl",
             R"({"patient_query":"q1","doctor_response":"r1"})"
             "\n\n"
             R"({"patient_query":"q2","doctor_response":"r2"})"
             "\n");
  const auto ds = load_dataset(dir / "clinic.jsonl", Split::test);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds[0].id, synthesize_id("clinic", Split::test, 0));
  EXPECT_EQ(ds[1].id, synthesize_id("clinic", Split::test, 2));
  EXPECT_EQ(ds[0].id, "clinic-test-000000");
  EXPECT_EQ(ds[0].split, Split::test);
}

TEST(LoadDataset, RejectsDuplicateIdsAndBlankText) {
  TempDir dir;
  write_file(dir / "dup.jsonl",
             R"({"id":"a","patient_query":"q1","doctor_response":"r1"})"
             "\n"
             R"({"id":"a","patient_query":"q2","doctor_response":"r2"})"
             "\n");
  EXPECT_THROW(load_dataset(dir / "dup.jsonl", Split::train), DataError);
  write_file(dir / "blank.jsonl", R"({"id":"a","patient_query":"   ","doctor_response":"r1"})"
                                  "\n");
  EXPECT_THROW(load_dataset(dir / "blank.jsonl", Split::train), DataError);
}

TEST(Persistence, DialogueRoundTripIsFieldExact) {
  TempDir dir;
  auto ds = synthesize_corpus(25, 7, Split::train, "synthetic");
  ds[3].patient_query = "Unicode \xc3\xa9 and \"quotes\"\nnewline";
  ds[4].split = Split::test;
  save_dataset(dir / "d.jsonl", ds);
  EXPECT_EQ(load_dataset(dir / "d.jsonl", Split::train), ds);
}

TEST(Persistence, ErAndEqsrRoundTrip) {
  TempDir dir;
  std::vector<ERExample> er = {{"x1", "q", "I hear you. Rest.", "Rest.", Split::train, "s"},
                               {"x2", "q2", "I'm sorry. Fluids.", "Fluids.", Split::test, "s"}};
  save_er(dir / "er.jsonl", er);
  EXPECT_EQ(load_er(dir / "er.jsonl"), er);

  std::vector<EQSRExample> eq = {eqsr("e1"), eqsr("e2")};
  eq[1].emotion = EmotionTag::distrust;
  save_eqsr(dir / "eq.jsonl", eq);
  EXPECT_EQ(load_eqsr(dir / "eq.jsonl"), eq);
}

TEST(Enums, LowercaseNamesRoundTrip) {
  for (auto tag : kAllEmotions) EXPECT_EQ(parse_emotion(to_string(tag)), tag);
  EXPECT_EQ(to_string(EmotionTag::embarrassment), "embarrassment");
  EXPECT_EQ(parse_split("test"), Split::test);
  EXPECT_THROW(parse_emotion("Fear"), DataError);
  EXPECT_THROW(parse_split("dev"), DataError);
}

TEST(Validate, RejectsUnchangedRewrites) {
  auto e = eqsr("e");
  e.emotional_query = e.original_query;
  EXPECT_THROW(validate(e), DataError);
  ERExample er{"x", "q", "same", "same", Split::train, "s"};
  EXPECT_THROW(validate(er), DataError);
}

TEST(SplitForRewriting, ElevenDialoguesSplitSixFive) {
  std::vector<Dialogue> ds;
  for (int i = 0; i < 11; ++i) ds.push_back(dialogue("d" + std::to_string(i)));
  const auto parts = split_for_rewriting(ds, kDefaultErFraction, 3);
  EXPECT_EQ(parts.er_part.size(), 6u);
  EXPECT_EQ(parts.eqsr_part.size(), 5u);
}

TEST(SplitForRewriting, HalfOfFourIsTwoAndTwo) {
  std::vector<Dialogue> ds;
  for (int i = 0; i < 4; ++i) ds.push_back(dialogue("d" + std::to_string(i)));
  const auto parts = split_for_rewriting(ds, 0.5, 9);
  EXPECT_EQ(parts.er_part.size(), 2u);
  EXPECT_EQ(parts.eqsr_part.size(), 2u);
}

TEST(SplitForRewriting, DeterministicUnderSeed) {
  const auto ds = synthesize_corpus(30, 1, Split::train);
  const auto a = split_for_rewriting(ds, 0.4, 11);
  const auto b = split_for_rewriting(ds, 0.4, 11);
  EXPECT_EQ(ids(a.er_part), ids(b.er_part));
  EXPECT_EQ(ids(a.eqsr_part), ids(b.eqsr_part));
}

TEST(SplitForRewriting, IsAPartitionForAnySeed) {
  const auto ds = synthesize_corpus(37, 2, Split::train);
  const auto all = ids(ds);
  const std::set<std::string> expected(all.begin(), all.end());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto parts = split_for_rewriting(ds, 0.3 + 0.02 * static_cast<double>(seed), seed);
    std::set<std::string> er, eq;
    for (const auto& d : parts.er_part) er.insert(d.id);
    for (const auto& d : parts.eqsr_part) eq.insert(d.id);
    EXPECT_EQ(er.size() + eq.size(), ds.size());
    for (const auto& id : er) EXPECT_EQ(eq.count(id), 0u);
    std::set<std::string> uni = er;
    uni.insert(eq.begin(), eq.end());
    EXPECT_EQ(uni, expected);
  }
}

TEST(SplitForRewriting, RejectsFractionOutsideOpenInterval) {
  const auto ds = synthesize_corpus(4, 0, Split::train);
  EXPECT_THROW(split_for_rewriting(ds, 0.0, 0), UsageError);
  EXPECT_THROW(split_for_rewriting(ds, 1.0, 0), UsageError);
}

TEST(PreferencePairs, MapsSoothingToChosenAndOriginalToRejected) {
  const auto e = eqsr("p");
  const auto conv = to_preference_pairs({e});
  ASSERT_EQ(conv.pairs.size(), 1u);
  EXPECT_EQ(conv.pairs[0].prompt, e.emotional_query);
  EXPECT_EQ(conv.pairs[0].chosen, e.soothing_response);
  EXPECT_EQ(conv.pairs[0].rejected, e.original_response);
  EXPECT_EQ(conv.dropped, 0u);
}

TEST(PreferencePairs, EmptyInputEmptyOutput) {
  const auto conv = to_preference_pairs({});
  EXPECT_TRUE(conv.pairs.empty());
  EXPECT_EQ(conv.dropped, 0u);
}

TEST(PreferencePairs, DropsPairsWithIdenticalResponses) {
  auto e = eqsr("p");
  e.soothing_response = e.original_response;
  const auto conv = to_preference_pairs({e});
  EXPECT_TRUE(conv.pairs.empty());
  EXPECT_EQ(conv.dropped, 1u);
}

TEST(KtoExamples, OneExampleGivesOppositeLabels) {
  const auto e = eqsr("k");
  const auto out = to_kto_examples({e});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0], (KTOExample{e.emotional_query, e.soothing_response, true}));
  EXPECT_EQ(out[1], (KTOExample{e.emotional_query, e.original_response, false}));
}

TEST(KtoExamples, EmptyInputEmptyOutput) { EXPECT_TRUE(to_kto_examples({}).empty()); }

TEST(KtoExamples, CountsAreBalanced) {
  for (std::size_t n : {1u, 5u, 17u}) {
    std::vector<EQSRExample> in;
    for (std::size_t i = 0; i < n; ++i) in.push_back(eqsr("k" + std::to_string(i)));
    const auto out = to_kto_examples(in);
    EXPECT_EQ(out.size(), 2 * n);
    EXPECT_EQ(static_cast<std::size_t>(std::count_if(out.begin(), out.end(),
                                                     [](const KTOExample& k) { return k.desirable; })),
              n);
  }
}

TEST(Synthesize, DeterministicValidAndUniqueIds) {
  const auto a = synthesize_corpus(60, 42, Split::train);
  EXPECT_EQ(a, synthesize_corpus(60, 42, Split::train));
  EXPECT_NE(a, synthesize_corpus(60, 43, Split::train));
  std::set<std::string> seen;
  for (const auto& d : a) {
    EXPECT_NO_THROW(validate(d));
    EXPECT_TRUE(seen.insert(d.id).second);
  }
}

TEST(Synthesize, FillFeelingReplacesSlot) {
  EXPECT_EQ(fill_feeling("It's normal to feel {f}.", "worried"), "It's normal to feel worried.");
  for (auto t : kSoothingTemplates) {
    EXPECT_EQ(fill_feeling(t, "scared").find("{f}"), std::string::npos);
  }
}
