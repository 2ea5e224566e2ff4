#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "memlab/tokenizer.hpp"

namespace memlab {

// Separator placed between cue fields (U+00B7 MIDDLE DOT).
inline constexpr std::string_view kCueSeparator = "\xC2\xB7";

// One cue -> content pair. The cue is either the (dynasty, author, title)
// triple, dynasty optional, or a free-form `cue` string.
struct MemoryRecord {
  std::optional<std::string> dynasty;
  std::optional<std::string> author;
  std::optional<std::string> title;
  std::optional<std::string> cue;
  std::string content;

  std::string cue_text() const;
  std::size_t cue_length() const;
  std::size_t content_length() const;
  // Character count of cue_text + content; framing tokens excluded.
  std::size_t combined_length() const;

  void validate() const;
  nlohmann::json to_json() const;
  static MemoryRecord from_json(const nlohmann::json& doc);

  bool operator==(const MemoryRecord&) const = default;
};

struct Prompt {
  std::string cue;
  std::string content;
};

Prompt format_prompt(const MemoryRecord& record);

// BOS + cue + SEP + content + EOS; content_start indexes the first content
// token (or EOS for empty content).
struct FramedSequence {
  std::vector<TokenId> tokens;
  std::size_t content_start = 0;
};

FramedSequence frame_record(const Vocab& vocab, const MemoryRecord& record);
// BOS + cue + SEP, the decoding prompt.
std::vector<TokenId> frame_cue(const Vocab& vocab, std::string_view cue);

// Combined-length interval (lower, upper].
struct LengthBucket {
  std::string name;
  std::size_t lower = 0;  // exclusive
  std::size_t upper = 0;  // inclusive

  bool contains(std::size_t length) const { return length > lower && length <= upper; }
  void validate() const;
};

LengthBucket short_bucket();  // (0, 256]
LengthBucket long_bucket();   // (256, 512]
LengthBucket bucket_by_name(std::string_view name);

std::vector<MemoryRecord> filter_by_length(const std::vector<MemoryRecord>& records,
                                           const LengthBucket& bucket);

// JSONL, one record per line; blank lines skipped. Any bad line rejects the
// whole file, with every offending line number in the message. Duplicate
// cues are rejected too.
std::vector<MemoryRecord> parse_records(std::istream& in, const std::string& source);
std::vector<MemoryRecord> load_records(const std::string& path);
void save_records(const std::string& path, const std::vector<MemoryRecord>& records);

// Throws CorpusError naming the first pair of records sharing a cue.
void check_unique_cues(const std::vector<MemoryRecord>& records);

// 64-symbol alphabet used by the synthetic generator (line breaks extra).
std::string_view synthetic_alphabet();

// Deterministic pseudo-poems: cue "poet-{i}" / "title-{i}", content of a
// uniformly drawn exact length in [min_length, max_length], broken into lines.
std::vector<MemoryRecord> synth_corpus(std::uint64_t seed, std::size_t count, std::size_t min_length,
                                       std::size_t max_length);

std::vector<std::string> corpus_texts(const std::vector<MemoryRecord>& records);
Vocab build_corpus_vocab(const std::vector<MemoryRecord>& records);

nlohmann::json corpus_stats(const std::vector<MemoryRecord>& records, std::size_t vocab_size);

}  // namespace memlab
