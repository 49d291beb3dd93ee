#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace mfldiv {

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

// RFC-4180 field quoting: fields containing ',', '"', CR or LF are quoted.
std::string csv_escape(std::string_view field);
void write_csv_row(std::ostream& out, const std::vector<std::string>& fields);

// Parses RFC-4180 records (quoted fields may span lines). Throws ParseError on
// an unterminated quote.
std::vector<std::vector<std::string>> parse_csv(std::istream& in);
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

}  // namespace mfldiv
