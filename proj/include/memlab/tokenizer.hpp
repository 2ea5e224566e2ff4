#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "memlab/ops.hpp"

namespace memlab {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kReservedCount = 4;

// Character-level vocabulary: reserved ids 0..3, then one id per distinct
// Unicode scalar in code point order.
class Vocab {
 public:
  static Vocab build(std::span<const std::string> texts);
  static Vocab from_json(const nlohmann::json& doc);
  static Vocab load(const std::string& path);

  std::size_t size() const { return chars_.size() + kReservedCount; }
  const std::u32string& chars() const { return chars_; }
  bool contains(char32_t c) const { return ids_.contains(c); }

  // Unknown characters are errors, reported with their scalar offset.
  std::vector<TokenId> encode(std::string_view text) const;
  // Reserved ids are dropped; ids >= size() are errors.
  std::string decode(std::span<const TokenId> ids) const;

  nlohmann::json to_json() const;
  void save(const std::string& path) const;

  bool operator==(const Vocab& other) const { return chars_ == other.chars_; }

 private:
  std::u32string chars_;
  std::unordered_map<char32_t, TokenId> ids_;
};

}  // namespace memlab
