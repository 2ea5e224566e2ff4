#include "memlab/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "memlab/utf8.hpp"

namespace memlab {

namespace {

constexpr int kVocabVersion = 1;

Vocab from_scalars(std::u32string chars);

}  // namespace

Vocab Vocab::build(std::span<const std::string> texts) {
  if (texts.empty()) throw TokenizerError("cannot build a vocabulary from an empty corpus");
  std::u32string all;
  for (const auto& t : texts) all += utf8::decode(t);
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  Vocab v;
  v.chars_ = std::move(all);
  for (std::size_t i = 0; i < v.chars_.size(); ++i) {
    v.ids_.emplace(v.chars_[i], static_cast<TokenId>(i) + kReservedCount);
  }
  return v;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  const std::u32string scalars = utf8::decode(text);
  std::vector<TokenId> ids;
  ids.reserve(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    const auto it = ids_.find(scalars[i]);
    if (it == ids_.end()) {
      throw TokenizerError("unknown character '" + utf8::encode(scalars[i]) + "' (U+" +
                           [&] {
                             std::ostringstream os;
                             os << std::hex << std::uppercase << static_cast<std::uint32_t>(scalars[i]);
                             return os.str();
                           }() +
                           ") at offset " + std::to_string(i));
    }
    ids.push_back(it->second);
  }
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::u32string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) {
      throw TokenizerError("invalid token id " + std::to_string(id) + " for vocabulary of " +
                           std::to_string(size()));
    }
    if (id < kReservedCount) continue;
    out.push_back(chars_[static_cast<std::size_t>(id - kReservedCount)]);
  }
  return utf8::encode(out);
}

nlohmann::json Vocab::to_json() const {
  std::vector<std::string> chars;
  chars.reserve(chars_.size());
  for (char32_t c : chars_) chars.push_back(utf8::encode(c));
  return {{"version", kVocabVersion},
          {"reserved", {"PAD", "BOS", "SEP", "EOS"}},
          {"chars", chars}};
}

Vocab Vocab::from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("version").get<int>() != kVocabVersion) {
      throw TokenizerError("unsupported vocabulary version " + doc.at("version").dump());
    }
    if (doc.at("reserved") != nlohmann::json({"PAD", "BOS", "SEP", "EOS"})) {
      throw TokenizerError("vocabulary reserved tokens must be PAD, BOS, SEP, EOS");
    }
    std::u32string chars;
    for (const auto& entry : doc.at("chars")) {
      const std::u32string c = utf8::decode(entry.get<std::string>());
      if (c.size() != 1) throw TokenizerError("vocabulary entry '" + entry.get<std::string>() + "' is not one character");
      chars.push_back(c[0]);
    }
    return from_scalars(std::move(chars));
  } catch (const nlohmann::json::exception& e) {
    throw TokenizerError(std::string("malformed vocabulary document: ") + e.what());
  }
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary file " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw TokenizerError("vocabulary file " + path + " is not JSON: " + e.what());
  }
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path);
  out << to_json().dump(2) << '\n';
}

namespace {

Vocab from_scalars(std::u32string chars) {
  if (!std::is_sorted(chars.begin(), chars.end()) ||
      std::adjacent_find(chars.begin(), chars.end()) != chars.end()) {
    throw TokenizerError("vocabulary characters must be unique and in code point order");
  }
  std::vector<std::string> texts{utf8::encode(chars)};
  if (chars.empty()) throw TokenizerError("vocabulary has no characters");
  return Vocab::build(texts);
}

}  // namespace

}  // namespace memlab
