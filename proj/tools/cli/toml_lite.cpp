#include "toml_lite.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mfldiv/errors.hpp"

namespace mfldiv::cli {

namespace {

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  nlohmann::json run() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    while (true) {
      skip_blank_lines();
      if (done()) break;
      if (peek() == '[') {
        ++pos_;
        if (!done() && peek() == '[') fail("arrays of tables are not supported");
        skip_ws();
        const auto path = key_path();
        skip_ws();
        expect(']');
        table = &open_table(root, path);
      } else {
        const auto path = key_path();
        skip_ws();
        expect('=');
        skip_ws();
        nlohmann::json* target = table;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) target = &child_table(*target, path[i]);
        if (target->contains(path.back())) fail("duplicate key '" + path.back() + "'");
        (*target)[path.back()] = value();
      }
      end_of_line();
    }
    return root;
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  int line_ = 1;
  std::vector<std::string> defined_tables_;

  bool done() const { return pos_ >= text_.size(); }
  char peek() const { return text_[pos_]; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError("config line " + std::to_string(line_) + ": " + msg);
  }

  void expect(char c) {
    if (done() || peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_ws() {
    while (!done() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }

  void skip_comment() {
    if (!done() && peek() == '#') {
      while (!done() && peek() != '\n') ++pos_;
    }
  }

  // Whitespace, comments and newlines, tracking line numbers.
  void skip_blank_lines() {
    while (!done()) {
      skip_ws();
      skip_comment();
      if (done()) return;
      if (peek() == '\r' && pos_ + 1 < text_.size() && text_[pos_ + 1] == '\n') ++pos_;
      if (peek() == '\n') {
        ++pos_;
        ++line_;
        continue;
      }
      return;
    }
  }

  void end_of_line() {
    skip_ws();
    skip_comment();
    if (done()) return;
    if (peek() == '\r') ++pos_;
    if (done() || peek() != '\n') fail("unexpected text after value");
  }

  static bool bare_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  }

  std::string simple_key() {
    if (done()) fail("expected a key");
    if (peek() == '"') return basic_string();
    if (peek() == '\'') return literal_string();
    const std::size_t start = pos_;
    while (!done() && bare_char(peek())) ++pos_;
    if (pos_ == start) fail("expected a key");
    return std::string(text_.substr(start, pos_ - start));
  }

  std::vector<std::string> key_path() {
    std::vector<std::string> path{simple_key()};
    while (true) {
      skip_ws();
      if (done() || peek() != '.') break;
      ++pos_;
      skip_ws();
      path.push_back(simple_key());
    }
    return path;
  }

  nlohmann::json& child_table(nlohmann::json& parent, const std::string& key) {
    if (!parent.contains(key)) parent[key] = nlohmann::json::object();
    nlohmann::json& child = parent[key];
    if (!child.is_object()) fail("key '" + key + "' is not a table");
    return child;
  }

  nlohmann::json& open_table(nlohmann::json& root, const std::vector<std::string>& path) {
    std::string joined;
    for (const auto& p : path) joined += (joined.empty() ? "" : ".") + p;
    for (const auto& t : defined_tables_) {
      if (t == joined) fail("table [" + joined + "] defined twice");
    }
    defined_tables_.push_back(joined);
    nlohmann::json* t = &root;
    for (const auto& p : path) t = &child_table(*t, p);
    return *t;
  }

  static void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
      out += static_cast<char>(cp);
    } else if (cp < 0x800) {
      out += static_cast<char>(0xC0 | (cp >> 6));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
      out += static_cast<char>(0xE0 | (cp >> 12));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
      out += static_cast<char>(0xF0 | (cp >> 18));
      out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    }
  }

  std::string basic_string() {
    expect('"');
    if (text_.substr(pos_, 2) == "\"\"") fail("multi-line strings are not supported");
    std::string out;
    while (true) {
      if (done() || peek() == '\n') fail("unterminated string");
      const char c = text_[pos_++];
      if (c == '"') break;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (done()) fail("unterminated escape");
      const char e = text_[pos_++];
      switch (e) {
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        case 'b': out += '\b'; break;
        case 'f': out += '\f'; break;
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'u':
        case 'U': {
          const std::size_t len = e == 'u' ? 4 : 8;
          if (pos_ + len > text_.size()) fail("short unicode escape");
          std::uint32_t cp = 0;
          const auto hex = text_.substr(pos_, len);
          const auto res = std::from_chars(hex.data(), hex.data() + len, cp, 16);
          if (res.ec != std::errc() || res.ptr != hex.data() + len) fail("bad unicode escape");
          pos_ += len;
          append_utf8(out, cp);
          break;
        }
        default:
          fail(std::string("unknown escape '\\") + e + "'");
      }
    }
    return out;
  }

  std::string literal_string() {
    expect('\'');
    const std::size_t start = pos_;
    while (!done() && peek() != '\'' && peek() != '\n') ++pos_;
    if (done() || peek() != '\'') fail("unterminated literal string");
    std::string out(text_.substr(start, pos_ - start));
    ++pos_;
    return out;
  }

  // Skips whitespace, comments and newlines inside arrays.
  void skip_array_space() { skip_blank_lines(); }

  nlohmann::json array() {
    expect('[');
    nlohmann::json out = nlohmann::json::array();
    while (true) {
      skip_array_space();
      if (done()) fail("unterminated array");
      if (peek() == ']') {
        ++pos_;
        return out;
      }
      out.push_back(value());
      skip_array_space();
      if (done()) fail("unterminated array");
      if (peek() == ',') {
        ++pos_;
      } else if (peek() != ']') {
        fail("expected ',' or ']' in array");
      }
    }
  }

  nlohmann::json inline_table() {
    expect('{');
    nlohmann::json out = nlohmann::json::object();
    skip_ws();
    if (!done() && peek() == '}') {
      ++pos_;
      return out;
    }
    while (true) {
      skip_ws();
      const auto path = key_path();
      skip_ws();
      expect('=');
      skip_ws();
      nlohmann::json* target = &out;
      for (std::size_t i = 0; i + 1 < path.size(); ++i) target = &child_table(*target, path[i]);
      if (target->contains(path.back())) fail("duplicate key '" + path.back() + "'");
      (*target)[path.back()] = value();
      skip_ws();
      if (done()) fail("unterminated inline table");
      if (peek() == '}') {
        ++pos_;
        return out;
      }
      expect(',');
    }
  }

  nlohmann::json number_or_bool() {
    const std::size_t start = pos_;
    while (!done() && (bare_char(peek()) || peek() == '+' || peek() == '.')) ++pos_;
    std::string token(text_.substr(start, pos_ - start));
    if (token == "true") return true;
    if (token == "false") return false;
    if (token.empty()) fail("expected a value");
    std::string body = token;
    double sign = 1.0;
    if (body[0] == '+' || body[0] == '-') {
      sign = body[0] == '-' ? -1.0 : 1.0;
      body.erase(0, 1);
    }
    if (body == "inf") return sign * std::numeric_limits<double>::infinity();
    if (body == "nan") return std::numeric_limits<double>::quiet_NaN();
    // Underscores must sit between digits.
    std::string clean;
    for (std::size_t i = 0; i < token.size(); ++i) {
      if (token[i] == '_') {
        if (i == 0 || i + 1 == token.size() || !std::isdigit(static_cast<unsigned char>(token[i - 1])) ||
            !std::isdigit(static_cast<unsigned char>(token[i + 1]))) {
          fail("misplaced '_' in number '" + token + "'");
        }
        continue;
      }
      clean += token[i];
    }
    if (clean.find_first_of(".eE") == std::string::npos) {
      std::int64_t v = 0;
      const char* first = clean.data() + (clean[0] == '+' ? 1 : 0);
      const auto res = std::from_chars(first, clean.data() + clean.size(), v);
      if (res.ec != std::errc() || res.ptr != clean.data() + clean.size()) {
        fail("invalid value '" + token + "'");
      }
      return v;
    }
    double v = 0.0;
    const char* first = clean.data() + (clean[0] == '+' ? 1 : 0);
    const auto res = std::from_chars(first, clean.data() + clean.size(), v);
    if (res.ec != std::errc() || res.ptr != clean.data() + clean.size()) {
      fail("invalid value '" + token + "'");
    }
    return v;
  }

  nlohmann::json value() {
    if (done()) fail("expected a value");
    switch (peek()) {
      case '"':
        return basic_string();
      case '\'':
        return literal_string();
      case '[':
        return array();
      case '{':
        return inline_table();
      default:
        return number_or_bool();
    }
  }
};

}  // namespace

nlohmann::json parse_toml(std::string_view text) { return Parser(text).run(); }

}  // namespace mfldiv::cli
