#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "memlab/corpus.hpp"
#include "memlab/utf8.hpp"

using namespace memlab;

namespace {

std::vector<MemoryRecord> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_records(in, "<test>");
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const CorpusError& e) {
    return e.what();
  }
  return "";
}

MemoryRecord cue_record(std::string cue, std::string content) {
  MemoryRecord r;
  r.cue = std::move(cue);
  r.content = std::move(content);
  return r;
}

}  // namespace

TEST_CASE("format_prompt") {
  MemoryRecord r;
  r.dynasty = "唐";
  r.author = "李白";
  r.title = "静夜思";
  r.content = "床前明月光";
  CHECK(format_prompt(r).cue == "唐·李白·静夜思");
  CHECK(format_prompt(r).content == "床前明月光");
  CHECK(r.cue_length() == 8);
  CHECK(r.combined_length() == 13);

  r.dynasty.reset();
  CHECK(format_prompt(r).cue == "李白·静夜思");
  CHECK(format_prompt(cue_record("Recite: Newton's first law", "x")).cue == "Recite: Newton's first law");
}

TEST_CASE("framing") {
  const MemoryRecord r = cue_record("ab", "ba\nb");
  const Vocab v = build_corpus_vocab({r});
  const FramedSequence seq = frame_record(v, r);
  REQUIRE(seq.tokens.size() == 1 + 2 + 1 + 4 + 1);
  CHECK(seq.tokens.front() == kBos);
  CHECK(seq.tokens[3] == kSep);
  CHECK(seq.tokens.back() == kEos);
  CHECK(seq.content_start == 4);
  CHECK(v.decode(std::span(seq.tokens).subspan(1, 2)) == "ab");
  CHECK(v.decode(std::span(seq.tokens).subspan(seq.content_start)) == "ba\nb");
  CHECK(frame_cue(v, "ab") == std::vector<TokenId>(seq.tokens.begin(), seq.tokens.begin() + 4));
}

TEST_CASE("parse_records") {
  SUBCASE("empty file") {
    CHECK(error_of("").find("no records") != std::string::npos);
    CHECK(error_of("\n  \n").find("no records") != std::string::npos);
  }
  SUBCASE("three valid lines in order") {
    const auto rs = parse(
        R"({"author":"a","title":"t1","content":"one"})"
        "\n"
        R"({"cue":"c2","content":"two"})"
        "\n\n"
        R"({"dynasty":"d","author":"a","title":"t3","content":"three"})"
        "\n");
    REQUIRE(rs.size() == 3);
    CHECK(rs[0].content == "one");
    CHECK(rs[1].cue_text() == "c2");
    CHECK(rs[2].cue_text() == "d·a·t3");
  }
  SUBCASE("bad lines are all reported and nothing is returned") {
    const std::string msg = error_of(
        R"({"cue":"ok","content":"fine"})"
        "\n{not json\n"
        R"({"cue":"x"})"
        "\n"
        R"({"author":"a","content":"no title"})"
        "\n"
        R"({"cue":"ok","content":"again"})"
        "\n");
    CHECK(msg.find("4 bad line(s)") != std::string::npos);
    CHECK(msg.find("line 2: malformed JSON") != std::string::npos);
    CHECK(msg.find("line 3: missing required field 'content'") != std::string::npos);
    CHECK(msg.find("line 4:") != std::string::npos);
    CHECK(msg.find("line 5: cue 'ok' duplicates line 1") != std::string::npos);
  }
  SUBCASE("field rules") {
    CHECK_FALSE(error_of(R"({"cue":"c","content":""})").empty());
    CHECK_FALSE(error_of(R"({"cue":"c","author":"a","title":"t","content":"x"})").empty());
    CHECK_FALSE(error_of(R"({"cue":3,"content":"x"})").empty());
    CHECK_FALSE(error_of(R"(["cue","content"])").empty());
    CHECK(error_of(R"({"cue":"c","content":"x","source":"extra fields are ignored"})").empty());
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_records("/nonexistent/corpus.jsonl"), IoError); }
}

TEST_CASE("length buckets") {
  const LengthBucket s = short_bucket();
  const LengthBucket l = long_bucket();
  CHECK(s.contains(256));
  CHECK_FALSE(l.contains(256));
  CHECK(l.contains(257));
  CHECK(l.contains(512));
  CHECK_FALSE(s.contains(0));
  CHECK_FALSE(l.contains(513));
  CHECK(bucket_by_name("long").upper == 512);
  CHECK_THROWS_AS(bucket_by_name("medium"), ValueError);
  CHECK_THROWS_AS(filter_by_length({}, LengthBucket{"bad", 10, 10}), ValueError);

  SUBCASE("a loaded record of combined length 257 is not short") {
    const auto dir = std::filesystem::temp_directory_path() / "memlab_test_corpus";
    std::filesystem::create_directories(dir);
    MemoryRecord r = cue_record("cue", std::string(254, 'x'));
    save_records((dir / "one.jsonl").string(), {r});
    const auto loaded = load_records((dir / "one.jsonl").string());
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0] == r);
    CHECK(loaded[0].combined_length() == 257);
    CHECK(filter_by_length(loaded, s).empty());
    CHECK(filter_by_length(loaded, l).size() == 1);
    std::filesystem::remove_all(dir);
  }

  SUBCASE("filter matches a brute-force scan and buckets partition <= 512") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> len(1, 600);
    std::vector<MemoryRecord> rs;
    for (int i = 0; i < 300; ++i) rs.push_back(cue_record("c" + std::to_string(i), std::string(len(rng), 'y')));
    for (const auto& bucket : {s, l}) {
      std::vector<MemoryRecord> brute;
      for (const auto& r : rs) {
        const std::size_t n = utf8::length(r.cue_text()) + utf8::length(r.content);
        if (n > bucket.lower && n <= bucket.upper) brute.push_back(r);
      }
      CHECK(filter_by_length(rs, bucket) == brute);
    }
    const auto in_s = filter_by_length(rs, s);
    const auto in_l = filter_by_length(rs, l);
    std::size_t within = 0;
    for (const auto& r : rs) within += r.combined_length() <= 512;
    CHECK(in_s.size() + in_l.size() == within);
    std::set<std::string> cues;
    for (const auto& r : in_s) cues.insert(r.cue_text());
    for (const auto& r : in_l) CHECK_FALSE(cues.contains(r.cue_text()));
  }
}

TEST_CASE("synth_corpus") {
  SUBCASE("deterministic per seed") {
    const auto a = synth_corpus(3, 10, 32, 64);
    CHECK(a == synth_corpus(3, 10, 32, 64));
    CHECK(a != synth_corpus(4, 10, 32, 64));
    CHECK(a[0].cue_text() == "poet-0·title-0");
    CHECK(a[9].cue_text() == "poet-9·title-9");
  }
  SUBCASE("lengths, alphabet and unique cues") {
    const auto rs = synth_corpus(0, 200, 32, 64);
    REQUIRE(rs.size() == 200);
    std::set<std::size_t> lengths;
    std::set<std::string> cues;
    for (const auto& r : rs) {
      CHECK(r.content.size() >= 32);
      CHECK(r.content.size() <= 64);
      lengths.insert(r.content.size());
      cues.insert(r.cue_text());
      CHECK(r.content.front() != '\n');
      CHECK(r.content.back() != '\n');
      for (char c : r.content) CHECK((c == '\n' || synthetic_alphabet().find(c) != std::string_view::npos));
    }
    CHECK(cues.size() == 200);
    CHECK(lengths.size() > 20);
    CHECK_NOTHROW(check_unique_cues(rs));
    CHECK(rs[0].content.find('\n') != std::string::npos);
  }
  SUBCASE("exact length range of one") {
    for (const auto& r : synth_corpus(1, 20, 128, 128)) CHECK(r.content_length() == 128);
  }
  SUBCASE("preconditions") {
    CHECK_THROWS_AS(synth_corpus(0, 0, 1, 2), ValueError);
    CHECK_THROWS_AS(synth_corpus(0, 5, 9, 2), ValueError);
  }
  SUBCASE("roundtrip through the tokenizer") {
    const auto rs = synth_corpus(11, 50, 20, 300);
    const Vocab v = build_corpus_vocab(rs);
    CHECK(v.size() <= 64 + 1 + 4 + 20);
    for (const auto& r : rs) {
      const Prompt p = format_prompt(r);
      CHECK(v.decode(v.encode(p.cue)) == p.cue);
      CHECK(v.decode(v.encode(p.content)) == p.content);
    }
  }
}

TEST_CASE("check_unique_cues") {
  std::vector<MemoryRecord> rs{cue_record("a", "1"), cue_record("b", "2"), cue_record("a", "3")};
  try {
    check_unique_cues(rs);
    FAIL("expected CorpusError");
  } catch (const CorpusError& e) {
    CHECK(std::string(e.what()).find("records 0 and 2") != std::string::npos);
  }
}

TEST_CASE("corpus stats") {
  std::vector<MemoryRecord> rs{cue_record("a", std::string(100, 'x')), cue_record("b", std::string(300, 'x')),
                               cue_record("c", std::string(600, 'x'))};
  const auto doc = corpus_stats(rs, 6);
  CHECK(doc.at("count") == 3);
  CHECK(doc.at("vocab_size") == 6);
  CHECK(doc.at("bucket_histogram").at("short") == 1);
  CHECK(doc.at("bucket_histogram").at("long") == 1);
  CHECK(doc.at("bucket_histogram").at("other") == 1);
}
