#pragma once

#include <json.hpp>
#include <string_view>

namespace mfldiv::cli {

// Reads the TOML subset used by experiment configs into JSON: tables and
// dotted tables, bare/quoted/dotted keys, basic and literal strings, integers,
// floats (including inf/nan), booleans, arrays and inline tables, comments.
// Dates and multi-line strings are rejected. Throws ParseError with a line number.
nlohmann::json parse_toml(std::string_view text);

}  // namespace mfldiv::cli
