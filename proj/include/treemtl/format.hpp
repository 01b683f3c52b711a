#pragma once

#include <string>
#include <string_view>

namespace treemtl {

// Shortest text that parses back to exactly the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

// Prefixes every line of `text` with `prefix`; ensures a trailing newline.
std::string comment_block(std::string_view text, std::string_view prefix);

}  // namespace treemtl
