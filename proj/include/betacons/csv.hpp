#pragma once

// Minimal CSV reading/writing for the project's flat numeric tables.
// Fields may be double-quoted; embedded quotes are doubled.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "betacons/errors.hpp"

namespace betacons::csv {

inline std::vector<std::string> split_line(std::string_view line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  out.push_back(std::move(field));
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

struct Row {
  std::size_t line = 0;  // 1-based line number in the source
  std::vector<std::string> fields;
};

class Table {
 public:
  Table(std::string source, std::vector<std::string> header, std::vector<Row> rows)
      : source_(std::move(source)), header_(std::move(header)), rows_(std::move(rows)) {
    for (std::size_t i = 0; i < header_.size(); ++i) index_.emplace(header_[i], i);
  }

  const std::string& source() const noexcept { return source_; }
  const std::vector<std::string>& header() const noexcept { return header_; }
  const std::vector<Row>& rows() const noexcept { return rows_; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t column(const std::string& name) const {
    auto idx = find(name);
    if (!idx) throw SchemaError(source_ + ": missing required column '" + name + "'");
    return *idx;
  }

  // Columns must appear in exactly this order at the start of the header.
  void require_prefix(const std::vector<std::string>& names) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (i >= header_.size() || header_[i] != names[i]) {
        throw SchemaError(source_ + ":1: expected column " + std::to_string(i + 1) + " to be '" + names[i] +
                          "', missing required column '" + names[i] + "'");
      }
    }
  }

  const std::string& field(const Row& row, std::size_t col) const {
    if (col >= row.fields.size()) {
      throw SchemaError(source_ + ":" + std::to_string(row.line) + ": expected at least " + std::to_string(col + 1) +
                        " fields, got " + std::to_string(row.fields.size()));
    }
    return row.fields[col];
  }

  double number(const Row& row, std::size_t col) const {
    const std::string& s = field(row, col);
    double v = 0.0;
    if (s == "nan" || s == "NaN" || s == "NAN") return std::numeric_limits<double>::quiet_NaN();
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc() || ptr != end || s.empty()) {
      throw SchemaError(source_ + ":" + std::to_string(row.line) + ": column '" +
                        (col < header_.size() ? header_[col] : std::to_string(col)) + "' is not a number: '" + s +
                        "'");
    }
    return v;
  }

 private:
  std::string source_;
  std::vector<std::string> header_;
  std::vector<Row> rows_;
  std::map<std::string, std::size_t> index_;
};

inline Table read(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  bool have_header = false;
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
    if (trim(line).empty()) continue;
    auto fields = split_line(line);
    for (auto& f : fields) f = trim(f);
    if (!have_header) {
      header = std::move(fields);
      have_header = true;
      continue;
    }
    rows.push_back({lineno, std::move(fields)});
  }
  if (!have_header) throw SchemaError(source + ": empty file (no header)");
  return Table(source, std::move(header), std::move(rows));
}

inline Table read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return read(in, path);
}

// Shortest round-trippable decimal representation.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out.push_back('"');
  return out;
}

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  Writer& field(const std::string& s) {
    sep();
    out_ << quote_if_needed(s);
    return *this;
  }
  Writer& field(double v) {
    sep();
    out_ << format_number(v);
    return *this;
  }
  Writer& field(long long v) {
    sep();
    out_ << v;
    return *this;
  }
  Writer& field(int v) { return field(static_cast<long long>(v)); }
  Writer& field(std::size_t v) { return field(static_cast<long long>(v)); }
  void end_row() {
    out_ << '\n';
    first_ = true;
  }

 private:
  void sep() {
    if (!first_) out_ << ',';
    first_ = false;
  }

  std::ostream& out_;
  bool first_ = true;
};

}  // namespace betacons::csv
