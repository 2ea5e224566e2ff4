#include "memlab/corpus.hpp"

#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "memlab/errors.hpp"
#include "memlab/utf8.hpp"

namespace memlab {

namespace {

constexpr std::string_view kAlphabet =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,";
static_assert(kAlphabet.size() == 64);

constexpr std::size_t kMaxReportedErrors = 20;

std::optional<std::string> optional_string(const nlohmann::json& doc, const char* key) {
  const auto it = doc.find(key);
  if (it == doc.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw CorpusError(std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

}  // namespace

std::string MemoryRecord::cue_text() const {
  if (cue) return *cue;
  std::string out;
  for (const auto* field : {&dynasty, &author, &title}) {
    if (!*field) continue;
    if (!out.empty()) out += kCueSeparator;
    out += **field;
  }
  return out;
}

std::size_t MemoryRecord::cue_length() const { return utf8::length(cue_text()); }
std::size_t MemoryRecord::content_length() const { return utf8::length(content); }
std::size_t MemoryRecord::combined_length() const { return cue_length() + content_length(); }

void MemoryRecord::validate() const {
  if (cue) {
    if (dynasty || author || title) throw CorpusError("record has both a cue and dynasty/author/title fields");
    if (cue->empty()) throw CorpusError("record cue is empty");
  } else {
    if (!author || !title) throw CorpusError("record needs either 'cue' or both 'author' and 'title'");
  }
  if (content.empty()) throw CorpusError("record content is empty");
  try {
    utf8::decode(cue_text());
    utf8::decode(content);
  } catch (const TokenizerError& e) {
    throw CorpusError(std::string("record is not valid UTF-8: ") + e.what());
  }
}

nlohmann::json MemoryRecord::to_json() const {
  nlohmann::json doc = nlohmann::json::object();
  if (dynasty) doc["dynasty"] = *dynasty;
  if (author) doc["author"] = *author;
  if (title) doc["title"] = *title;
  if (cue) doc["cue"] = *cue;
  doc["content"] = content;
  return doc;
}

MemoryRecord MemoryRecord::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw CorpusError("record must be a JSON object");
  MemoryRecord r;
  r.dynasty = optional_string(doc, "dynasty");
  r.author = optional_string(doc, "author");
  r.title = optional_string(doc, "title");
  r.cue = optional_string(doc, "cue");
  const auto content = optional_string(doc, "content");
  if (!content) throw CorpusError("missing required field 'content'");
  r.content = *content;
  r.validate();
  return r;
}

Prompt format_prompt(const MemoryRecord& record) { return {record.cue_text(), record.content}; }

FramedSequence frame_record(const Vocab& vocab, const MemoryRecord& record) {
  const Prompt p = format_prompt(record);
  FramedSequence seq;
  seq.tokens = frame_cue(vocab, p.cue);
  seq.content_start = seq.tokens.size();
  const auto body = vocab.encode(p.content);
  seq.tokens.insert(seq.tokens.end(), body.begin(), body.end());
  seq.tokens.push_back(kEos);
  return seq;
}

std::vector<TokenId> frame_cue(const Vocab& vocab, std::string_view cue) {
  std::vector<TokenId> tokens{kBos};
  const auto ids = vocab.encode(cue);
  tokens.insert(tokens.end(), ids.begin(), ids.end());
  tokens.push_back(kSep);
  return tokens;
}

void LengthBucket::validate() const {
  if (upper == 0 || lower >= upper) {
    throw ValueError("length bucket '" + name + "' needs 0 <= lower < upper, got (" + std::to_string(lower) +
                     ", " + std::to_string(upper) + "]");
  }
}

LengthBucket short_bucket() { return {"short", 0, 256}; }
LengthBucket long_bucket() { return {"long", 256, 512}; }

LengthBucket bucket_by_name(std::string_view name) {
  if (name == "short") return short_bucket();
  if (name == "long") return long_bucket();
  throw ValueError("unknown length bucket '" + std::string(name) + "' (expected short or long)");
}

std::vector<MemoryRecord> filter_by_length(const std::vector<MemoryRecord>& records,
                                           const LengthBucket& bucket) {
  bucket.validate();
  std::vector<MemoryRecord> kept;
  for (const auto& r : records) {
    if (bucket.contains(r.combined_length())) kept.push_back(r);
  }
  return kept;
}

std::vector<MemoryRecord> parse_records(std::istream& in, const std::string& source) {
  std::vector<MemoryRecord> records;
  std::vector<std::string> errors;
  std::size_t error_count = 0;
  std::map<std::string, std::size_t> cue_lines;
  std::string line;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& msg) {
    if (errors.size() < kMaxReportedErrors) errors.push_back("line " + std::to_string(line_no) + ": " + msg);
    ++error_count;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      MemoryRecord r = MemoryRecord::from_json(nlohmann::json::parse(line));
      const auto [it, inserted] = cue_lines.emplace(r.cue_text(), line_no);
      if (!inserted) {
        fail("cue '" + r.cue_text() + "' duplicates line " + std::to_string(it->second));
        continue;
      }
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed JSON: ") + e.what());
    } catch (const CorpusError& e) {
      fail(e.what());
    }
  }
  if (error_count > 0) {
    std::string msg = source + ": " + std::to_string(error_count) + " bad line(s)";
    for (const auto& e : errors) msg += "\n  " + e;
    if (error_count > errors.size()) msg += "\n  ...";
    throw CorpusError(msg);
  }
  if (records.empty()) throw CorpusError(source + ": no records");
  return records;
}

std::vector<MemoryRecord> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file " + path);
  return parse_records(in, path);
}

void save_records(const std::string& path, const std::vector<MemoryRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file " + path);
  for (const auto& r : records) out << r.to_json().dump() << '\n';
  if (!out) throw IoError("failed writing corpus file " + path);
}

void check_unique_cues(const std::vector<MemoryRecord>& records) {
  std::map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto [it, inserted] = seen.emplace(records[i].cue_text(), i);
    if (!inserted) {
      throw CorpusError("records " + std::to_string(it->second) + " and " + std::to_string(i) +
                        " share the cue '" + it->first + "'");
    }
  }
}

std::string_view synthetic_alphabet() { return kAlphabet; }

std::vector<MemoryRecord> synth_corpus(std::uint64_t seed, std::size_t count, std::size_t min_length,
                                       std::size_t max_length) {
  if (count == 0) throw ValueError("synthetic corpus needs at least one record");
  if (min_length == 0 || min_length > max_length) {
    throw ValueError("synthetic content length range must satisfy 1 <= min <= max, got [" +
                     std::to_string(min_length) + ", " + std::to_string(max_length) + "]");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> length_dist(min_length, max_length);
  std::uniform_int_distribution<std::size_t> line_dist(5, 12);
  std::uniform_int_distribution<std::size_t> char_dist(0, kAlphabet.size() - 1);

  std::vector<MemoryRecord> records;
  records.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t length = length_dist(rng);
    std::string content;
    content.reserve(length);
    std::size_t line_length = line_dist(rng);
    std::size_t column = 0;
    while (content.size() < length) {
      // never open or close the content with a line break
      if (column >= line_length && content.size() + 1 < length) {
        content.push_back('\n');
        column = 0;
        line_length = line_dist(rng);
        continue;
      }
      content.push_back(kAlphabet[char_dist(rng)]);
      ++column;
    }
    MemoryRecord r;
    r.author = "poet-" + std::to_string(i);
    r.title = "title-" + std::to_string(i);
    r.content = std::move(content);
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<std::string> corpus_texts(const std::vector<MemoryRecord>& records) {
  std::vector<std::string> texts;
  texts.reserve(records.size() * 2);
  for (const auto& r : records) {
    texts.push_back(r.cue_text());
    texts.push_back(r.content);
  }
  return texts;
}

Vocab build_corpus_vocab(const std::vector<MemoryRecord>& records) {
  const auto texts = corpus_texts(records);
  return Vocab::build(texts);
}

nlohmann::json corpus_stats(const std::vector<MemoryRecord>& records, std::size_t vocab_size) {
  const LengthBucket s = short_bucket();
  const LengthBucket l = long_bucket();
  std::size_t n_short = 0, n_long = 0, n_other = 0;
  for (const auto& r : records) {
    const std::size_t len = r.combined_length();
    if (s.contains(len)) {
      ++n_short;
    } else if (l.contains(len)) {
      ++n_long;
    } else {
      ++n_other;
    }
  }
  return {{"count", records.size()},
          {"bucket_histogram", {{"short", n_short}, {"long", n_long}, {"other", n_other}}},
          {"vocab_size", vocab_size}};
}

}  // namespace memlab
