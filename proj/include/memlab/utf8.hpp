#pragma once

#include <string>
#include <string_view>

namespace memlab::utf8 {

// Decodes UTF-8 into Unicode scalar values. Throws TokenizerError on
// malformed input, naming the byte offset.
std::u32string decode(std::string_view text);
std::string encode(std::u32string_view scalars);
std::string encode(char32_t scalar);

// Number of Unicode scalars in a UTF-8 string.
std::size_t length(std::string_view text);

}  // namespace memlab::utf8
