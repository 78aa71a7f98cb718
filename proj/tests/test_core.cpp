#include <gtest/gtest.h>

#include <random>

#include "memeguard/core.hpp"
#include "support.hpp"

using namespace memeguard;
using testing_support::TempDir;
using testing_support::write_text;

TEST(ConcatGold, JoinsWithSingleSpace) { EXPECT_EQ(concat_gold("A", "B"), "A B"); }

TEST(ConcatGold, EmptyPartIsSkipped) {
  EXPECT_EQ(concat_gold("", "B"), "B");
  EXPECT_EQ(concat_gold("A", "  "), "A");
  EXPECT_EQ(concat_gold("", ""), "");
}

TEST(ConcatGold, TrimsOuterWhitespaceOnly) {
  EXPECT_EQ(concat_gold("  X ", "Y  "), "X Y");
  EXPECT_EQ(concat_gold(" a  b ", "c\td"), "a  b c\td");
}

TEST(LoadDataset, EmptyFileGivesEmptySequence) {
  TempDir t;
  write_text(t / "empty.jsonl", "");
  EXPECT_TRUE(load_dataset(t / "empty.jsonl").empty());
}

TEST(LoadDataset, FixtureKeepsFileOrder) {
  const auto memes = load_dataset(testing_support::mini_dataset());
  ASSERT_EQ(memes.size(), 3u);
  EXPECT_EQ(memes[0].id, "a");
  EXPECT_EQ(memes[1].id, "b");
  EXPECT_EQ(memes[2].id, "c");
  ASSERT_TRUE(memes[1].gold);
  EXPECT_EQ(memes[1].gold->full_text,
            "Driving skill has nothing to do with gender and accident statistics do not support this joke. "
            "Let us laugh without putting a whole group down.");
}

TEST(LoadDataset, MissingFieldNamesFieldAndLine) {
  TempDir t;
  write_text(t / "d.jsonl",
             R"({"id":"a","image_path":"a.png","ocr_text":"x"})"
             "\n"
             R"({"id":"b","image_path":"b.png"})"
             "\n");
  try {
    load_dataset(t / "d.jsonl");
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("ocr_text"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(LoadDataset, DuplicateIdRejected) {
  TempDir t;
  write_text(t / "d.jsonl",
             R"({"id":"a","image_path":"a.png","ocr_text":"x"})"
             "\n\n"
             R"({"id":"a","image_path":"b.png","ocr_text":"y"})"
             "\n");
  try {
    load_dataset(t / "d.jsonl");
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
  }
}

TEST(LoadDataset, MalformedJsonReportsLine) {
  TempDir t;
  write_text(t / "d.jsonl", "{\"id\":\"a\",\n");
  try {
    load_dataset(t / "d.jsonl");
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
}

TEST(LoadDataset, EmptyOcrNeedsFlag) {
  TempDir t;
  write_text(t / "bad.jsonl", R"({"id":"a","image_path":"a.png","ocr_text":""})");
  EXPECT_THROW(load_dataset(t / "bad.jsonl"), DatasetError);
  write_text(t / "ok.jsonl", R"({"id":"a","image_path":"a.png","ocr_text":"","image_only":true})");
  const auto m = load_dataset(t / "ok.jsonl");
  ASSERT_EQ(m.size(), 1u);
  EXPECT_TRUE(m[0].image_only);
}

TEST(LoadDataset, EmptyIdAndImagePathRejected) {
  TempDir t;
  write_text(t / "a.jsonl", R"({"id":"","image_path":"a.png","ocr_text":"x"})");
  EXPECT_THROW(load_dataset(t / "a.jsonl"), DatasetError);
  write_text(t / "b.jsonl", R"({"id":"a","image_path":"","ocr_text":"x"})");
  EXPECT_THROW(load_dataset(t / "b.jsonl"), DatasetError);
}

TEST(LoadDataset, GoldShapes) {
  TempDir t;
  write_text(t / "d.jsonl",
             R"({"id":"s","image_path":"a.png","ocr_text":"x","gold":"plain text"})"
             "\n"
             R"({"id":"f","image_path":"a.png","ocr_text":"x","gold":{"full_text":"ft"}})"
             "\n"
             R"({"id":"p","image_path":"a.png","ocr_text":"x","gold":{"interventive_content":" c ","interventive_filler":"f"}})"
             "\n");
  const auto m = load_dataset(t / "d.jsonl");
  EXPECT_EQ(m[0].gold->full_text, "plain text");
  EXPECT_FALSE(m[0].gold->has_parts());
  EXPECT_EQ(m[1].gold->full_text, "ft");
  EXPECT_EQ(m[2].gold->full_text, "c f");
  EXPECT_TRUE(m[2].gold->has_parts());

  write_text(t / "bad.jsonl",
             R"({"id":"p","image_path":"a.png","ocr_text":"x","gold":{"interventive_content":"c","interventive_filler":"f","full_text":"other"}})");
  EXPECT_THROW(load_dataset(t / "bad.jsonl"), DatasetError);
}

namespace {

std::string random_text(std::mt19937_64& rng, bool allow_empty) {
  static const std::vector<std::string> alphabet = {"a", "b", " ", "c", "d", "é", "\t", "\"", "\\", "ñ",
                                                    "!", "?", ".", ",", "\n", "日"};
  std::string s;
  const std::size_t n = rng() % 12 + (allow_empty ? 0 : 1);
  for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
  if (!allow_empty && s.find_first_not_of(" \t\n") == std::string::npos) s += "z";
  return s;
}

}  // namespace

TEST(DatasetProperty, SaveThenLoadIsIdentity) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<MemeRecord> memes;
    const std::size_t n = rng() % 6;
    for (std::size_t i = 0; i < n; ++i) {
      MemeRecord m;
      m.id = "m" + std::to_string(i) + random_text(rng, true);
      m.image_path = "img/" + std::to_string(i) + ".png";
      m.image_only = rng() % 4 == 0;
      m.ocr_text = m.image_only ? "" : random_text(rng, false);
      switch (rng() % 3) {
        case 0: break;
        case 1: m.gold = GoldIntervention::from_parts(random_text(rng, true), random_text(rng, false)); break;
        default: m.gold = GoldIntervention::from_full_text(random_text(rng, true)); break;
      }
      if (rng() % 2) m.language_tag = "hi-en";
      memes.push_back(m);
    }
    TempDir t;
    save_dataset(t / "d.jsonl", memes);
    EXPECT_EQ(load_dataset(t / "d.jsonl"), memes) << "trial " << trial;
  }
}

TEST(Knowledge, AlwaysFiveFacetsWhateverTheInputOrder) {
  TempDir t;
  write_text(t / "k.jsonl",
             R"({"meme_id":"a","facets":{"claims":"C","description":"D"}})"
             "\n"
             R"({"meme_id":"b","facets":{"toxicity":"T","bias":"B","stereotype":"S","claims":"C","description":"D"}})"
             "\n");
  const auto k = load_knowledge(t / "k.jsonl");
  ASSERT_EQ(k.size(), 2u);
  EXPECT_EQ(k[0].facets[Facet::claims], "C");
  EXPECT_EQ(k[0].facets[Facet::bias], "");
  EXPECT_EQ(facets_to_json(k[0].facets).size(), 5u);
  EXPECT_EQ(facets_to_json(k[1].facets).size(), 5u);
  EXPECT_EQ(k[1].facets[Facet::stereotype], "S");

  save_knowledge(t / "k2.jsonl", k);
  EXPECT_EQ(load_knowledge(t / "k2.jsonl"), k);
}

TEST(Knowledge, UnknownFacetRejected) {
  TempDir t;
  write_text(t / "k.jsonl", R"({"meme_id":"a","facets":{"humour":"x"}})");
  EXPECT_THROW(load_knowledge(t / "k.jsonl"), DatasetError);
}

TEST(Ratings, ScoresMustBeLikert) {
  TempDir t;
  write_text(t / "r.jsonl",
             R"({"meme_id":"a","evaluator_id":"e1","fluency":5,"adequacy":1,"persuasiveness":3,"informativeness":0})");
  try {
    load_ratings(t / "r.jsonl");
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("informativeness"), std::string::npos);
  }
}

TEST(Ratings, OnePerMemeEvaluatorSystem) {
  TempDir t;
  const std::string a = R"({"meme_id":"a","evaluator_id":"e1","system":"x","fluency":5,"adequacy":1,"persuasiveness":3,"informativeness":2})";
  const std::string b = R"({"meme_id":"a","evaluator_id":"e1","system":"y","fluency":5,"adequacy":1,"persuasiveness":3,"informativeness":2})";
  write_text(t / "ok.jsonl", a + "\n" + b + "\n");
  EXPECT_EQ(load_ratings(t / "ok.jsonl").size(), 2u);
  write_text(t / "dup.jsonl", a + "\n" + a + "\n");
  EXPECT_THROW(load_ratings(t / "dup.jsonl"), DatasetError);
}

TEST(Digest, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(base64_encode("Man"), "TWFu");
  EXPECT_EQ(base64_encode("Ma"), "TWE=");
}
