#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "memlab/tokenizer.hpp"
#include "memlab/utf8.hpp"

using namespace memlab;

namespace {

Vocab vocab_of(std::initializer_list<std::string> texts) {
  const std::vector<std::string> v(texts);
  return Vocab::build(v);
}

}  // namespace

TEST_CASE("utf8") {
  CHECK(utf8::decode("a\xC3\xA9\xE4\xB8\xAD\xF0\x9F\x98\x80") == U"aé中\U0001F600");
  CHECK(utf8::encode(U"aé中\U0001F600") == "a\xC3\xA9\xE4\xB8\xAD\xF0\x9F\x98\x80");
  CHECK(utf8::length("静夜思") == 3);
  CHECK(utf8::decode("").empty());

  SUBCASE("malformed input names the byte offset") {
    for (const std::string bad : {"ab\x80", "a\xC3", "\xC0\xAF", "\xED\xA0\x80", "\xF4\x90\x80\x80", "x\xE4\xB8"}) {
      CHECK_THROWS_AS(utf8::decode(bad), TokenizerError);
    }
    try {
      utf8::decode("ab\xFF");
      FAIL("expected TokenizerError");
    } catch (const TokenizerError& e) {
      CHECK(std::string(e.what()).find("offset 2") != std::string::npos);
    }
  }
}

TEST_CASE("build_vocab") {
  SUBCASE("two letters plus reserved") {
    const Vocab v = vocab_of({"ab", "ba"});
    CHECK(v.size() == 6);
    CHECK(v.chars() == U"ab");
    CHECK(v.encode("ab") == std::vector<TokenId>{4, 5});
  }
  SUBCASE("duplicating the corpus changes nothing") {
    CHECK(vocab_of({"hello", "world"}) == vocab_of({"hello", "world", "hello", "world"}));
    CHECK(vocab_of({"hello", "world"}).to_json().dump() ==
          vocab_of({"world", "hello", "hello"}).to_json().dump());
  }
  SUBCASE("mixed CJK and ASCII counts distinct scalars") {
    const std::vector<std::string> texts{"床前明月光，疑是地上霜。", "moon light 月光", "Li Bai 李白"};
    std::u32string all;
    for (const auto& t : texts) all += utf8::decode(t);
    std::sort(all.begin(), all.end());
    const auto distinct = static_cast<std::size_t>(std::unique(all.begin(), all.end()) - all.begin());
    CHECK(Vocab::build(texts).size() == distinct + 4);
  }
  SUBCASE("empty corpus") {
    CHECK_THROWS_AS(Vocab::build(std::vector<std::string>{}), TokenizerError);
  }
  SUBCASE("reserved ids never name characters") {
    const Vocab v = vocab_of({"\x01\x02\x03 xyz"});
    for (TokenId id : v.encode("\x01\x02\x03 xyz")) CHECK(id >= kReservedCount);
  }
}

TEST_CASE("encode and decode") {
  const std::vector<std::string> texts{"床前明月光，疑是地上霜。\n举头望明月", "Every object perseveres."};
  const Vocab v = Vocab::build(texts);

  CHECK(v.encode("").empty());
  CHECK(v.decode(std::vector<TokenId>{}).empty());
  for (const auto& t : texts) {
    const auto ids = v.encode(t);
    CHECK(ids.size() == utf8::length(t));
    CHECK(v.decode(ids) == t);
  }
  CHECK(v.encode("床前明月光").size() == 5);

  SUBCASE("reserved ids are stripped") {
    std::vector<TokenId> ids{kBos};
    for (TokenId id : v.encode("明月")) ids.push_back(id);
    ids.push_back(kSep);
    ids.push_back(kEos);
    ids.push_back(kPad);
    CHECK(v.decode(ids) == "明月");
  }
  SUBCASE("unknown character reports its offset") {
    try {
      v.encode("明月Z");
      FAIL("expected TokenizerError");
    } catch (const TokenizerError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("unknown character") != std::string::npos);
      CHECK(msg.find("offset 2") != std::string::npos);
      CHECK(msg.find("U+5A") != std::string::npos);
    }
  }
  SUBCASE("invalid ids") {
    CHECK_THROWS_AS(v.decode(std::vector<TokenId>{static_cast<TokenId>(v.size())}), TokenizerError);
    CHECK_THROWS_AS(v.decode(std::vector<TokenId>{-1}), TokenizerError);
  }
}

TEST_CASE("vocab file") {
  const Vocab v = vocab_of({"静夜思 abc", "xyz\n"});
  const nlohmann::json doc = v.to_json();
  CHECK(doc.at("version") == 1);
  CHECK(doc.at("reserved") == nlohmann::json({"PAD", "BOS", "SEP", "EOS"}));
  CHECK(doc.at("chars").size() == v.size() - 4);
  CHECK(Vocab::from_json(doc) == v);

  const auto dir = std::filesystem::temp_directory_path() / "memlab_test_tokenizer";
  std::filesystem::create_directories(dir);
  const auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  v.save((dir / "a.json").string());
  vocab_of({"xyz\n", "静夜思 abc", "abc"}).save((dir / "b.json").string());
  CHECK(read(dir / "a.json") == read(dir / "b.json"));
  CHECK(Vocab::load((dir / "a.json").string()) == v);
  std::filesystem::remove_all(dir);

  SUBCASE("rejects bad documents") {
    nlohmann::json unsorted = doc;
    std::swap(unsorted["chars"][0], unsorted["chars"][1]);
    CHECK_THROWS_AS(Vocab::from_json(unsorted), TokenizerError);
    nlohmann::json wrong = doc;
    wrong["version"] = 7;
    CHECK_THROWS_AS(Vocab::from_json(wrong), TokenizerError);
    CHECK_THROWS_AS(Vocab::load("/nonexistent/vocab.json"), IoError);
  }
}
