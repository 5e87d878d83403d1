#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace knnmem::utf8 {

/// Decodes UTF-8; invalid bytes become U+FFFD.
std::u32string decode(std::string_view text);
std::string encode(std::u32string_view text);
void append(std::string& out, char32_t cp);

bool is_whitespace(char32_t cp);
/// Letters and digits, approximated without locale tables: ASCII alnum,
/// and every non-ASCII code point outside the known punctuation/symbol blocks.
bool is_alnum(char32_t cp);
/// Simple case folding for ASCII, Latin-1, Latin Extended-A, Greek and Cyrillic.
char32_t to_lower(char32_t cp);

}  // namespace knnmem::utf8
