#pragma once

#include <string>
#include <string_view>

namespace ufa::utf8 {

// Invalid sequences decode to U+FFFD.
std::u32string decode(std::string_view s);
std::string encode(std::u32string_view s);
std::string encode(char32_t c);

bool is_cjk(char32_t c);
bool is_ascii_alnum(char32_t c);
bool is_space(char32_t c);
// Unicode general category P* for the ranges the pipeline can meet.
bool is_punctuation(char32_t c);

}  // namespace ufa::utf8
