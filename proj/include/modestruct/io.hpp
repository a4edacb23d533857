#pragma once

// File formats: counts CSV, model JSON, tidy CSV tables.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "modestruct/forward_model.hpp"
#include "modestruct/matrix.hpp"

namespace modestruct {

using Json = nlohmann::ordered_json;

/// Malformed input. line is 1-based (0 when unknown); field names the
/// offending entry, e.g. "modes[2].mu" or "column 5".
class ParseError : public std::runtime_error {
public:
  ParseError(std::string source, int line, std::string field, const std::string& what)
      : std::runtime_error(format(source, line, field, what)), source_(std::move(source)), line_(line),
        field_(std::move(field)) {}

  const std::string& source() const { return source_; }
  int line() const { return line_; }
  const std::string& field() const { return field_; }

private:
  static std::string format(const std::string& source, int line, const std::string& field, const std::string& what) {
    std::string s = source.empty() ? "input" : source;
    if (line > 0) s += ":" + std::to_string(line);
    if (!field.empty()) s += ": " + field;
    return s + ": " + what;
  }

  std::string source_;
  int line_ = 0;
  std::string field_;
};

/// Shortest decimal form that reads back to the same double.
inline std::string format_double(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw std::invalid_argument("not a number: '" + std::string(s) + "'");
  return v;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parse_uint(std::string_view s, std::uint64_t& v) {
  s = trim(s);
  if (s.empty()) return false;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  return r.ec == std::errc{} && r.ptr == s.data() + s.size();
}

inline std::string read_all(std::istream& in) {
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace detail

// ---------------------------------------------------------------- counts CSV

/// Square matrix of non-negative integers, row = n_s, column = n_i, with an
/// optional "# n_tot=<int>" line (n_tot defaults to the sum of counts).
inline CountMatrix read_counts_csv(std::istream& in, const std::string& source = "counts") {
  std::vector<std::vector<std::uint64_t>> rows;
  std::vector<int> row_lines;
  bool have_n_tot = false;
  std::uint64_t n_tot = 0;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view t = detail::trim(line);
    if (t.empty()) continue;
    if (t.front() == '#') {
      const std::string_view body = detail::trim(t.substr(1));
      if (body.rfind("n_tot", 0) == 0) {
        const std::size_t eq = body.find('=');
        if (eq == std::string_view::npos || !detail::parse_uint(body.substr(eq + 1), n_tot))
          throw ParseError(source, line_no, "n_tot", "expected '# n_tot=<non-negative integer>'");
        have_n_tot = true;
      }
      continue;
    }
    const auto fields = detail::split(t, ',');
    std::vector<std::uint64_t> row;
    for (std::size_t c = 0; c < fields.size(); ++c) {
      std::uint64_t v = 0;
      if (!detail::parse_uint(fields[c], v))
        throw ParseError(source, line_no, "column " + std::to_string(c + 1),
                         "expected a non-negative integer, got '" + std::string(detail::trim(fields[c])) + "'");
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw ParseError(source, line_no, "row " + std::to_string(rows.size() + 1),
                       "ragged row: " + std::to_string(row.size()) + " columns, expected " +
                           std::to_string(rows.front().size()));
    rows.push_back(std::move(row));
    row_lines.push_back(line_no);
  }
  if (rows.empty()) throw ParseError(source, line_no, "", "no count rows");
  if (rows.size() != rows.front().size())
    throw ParseError(source, row_lines.back(), "",
                     "matrix is not square: " + std::to_string(rows.size()) + " rows, " +
                         std::to_string(rows.front().size()) + " columns");
  CountMatrix m(static_cast<int>(rows.size()) - 1);
  std::uint64_t sum = 0;
  for (std::size_t s = 0; s < rows.size(); ++s)
    for (std::size_t i = 0; i < rows.size(); ++i) {
      m(static_cast<int>(s), static_cast<int>(i)) = rows[s][i];
      sum += rows[s][i];
    }
  if (have_n_tot && n_tot < sum)
    throw ParseError(source, 0, "n_tot",
                     "n_tot=" + std::to_string(n_tot) + " is smaller than the sum of counts " + std::to_string(sum));
  m.n_tot = have_n_tot ? n_tot : sum;
  return m;
}

inline CountMatrix read_counts_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_counts_csv(in, path);
}

inline void write_counts_csv(std::ostream& out, const CountMatrix& m) {
  out << "# n_tot=" << m.n_tot << '\n';
  for (int s = 0; s <= m.n_max(); ++s) {
    for (int i = 0; i <= m.n_max(); ++i) {
      if (i) out << ',';
      out << m(s, i);
    }
    out << '\n';
  }
}

inline void write_counts_csv(const std::string& path, const CountMatrix& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_counts_csv(out, m);
}

// ---------------------------------------------------------------- JSON helpers

namespace detail {

inline int line_of(const std::string& text, std::size_t byte) {
  const std::size_t end = std::min(byte, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(end), '\n'));
}

inline Json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source, line_of(text, e.byte), "", "malformed JSON");
  }
}

/// Typed access with field-named errors.
class JsonReader {
public:
  JsonReader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw ParseError(source_, 0, field, what);
  }

  const Json& require(const Json& obj, const std::string& key, const std::string& path) const {
    if (!obj.is_object()) fail(path, "expected an object");
    const auto it = obj.find(key);
    if (it == obj.end()) fail(join(path, key), "missing required field");
    return *it;
  }

  double number(const Json& v, const std::string& field) const {
    if (!v.is_number()) fail(field, "expected a number");
    return v.get<double>();
  }

  long long integer(const Json& v, const std::string& field) const {
    if (!v.is_number_integer()) fail(field, "expected an integer");
    return v.get<long long>();
  }

  bool boolean(const Json& v, const std::string& field) const {
    if (!v.is_boolean()) fail(field, "expected true or false");
    return v.get<bool>();
  }

  std::string string(const Json& v, const std::string& field) const {
    if (!v.is_string()) fail(field, "expected a string");
    return v.get<std::string>();
  }

  void only_keys(const Json& obj, std::initializer_list<std::string_view> keys, const std::string& path) const {
    if (!obj.is_object()) fail(path, "expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it)
      if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) fail(join(path, it.key()), "unknown field");
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

private:
  std::string source_;
};

} // namespace detail

// ---------------------------------------------------------------- model JSON

inline Json model_to_json(const SourceModel& m) {
  Json j;
  j["n_max"] = m.n_max;
  j["modes"] = Json::array();
  for (const auto& mode : m.modes) {
    Json e;
    e["type"] = std::string(to_string(mode.type));
    e["mu"] = mode.mu;
    e["occupancy"] = std::string(to_string(mode.occupancy));
    e["eta_s"] = mode.eta_s;
    e["eta_i"] = mode.eta_i;
    j["modes"].push_back(e);
  }
  return j;
}

inline SourceModel model_from_json(const Json& j, const std::string& source = "model") {
  const detail::JsonReader r(source);
  r.only_keys(j, {"n_max", "modes"}, "");
  SourceModel m;
  if (j.contains("n_max")) {
    const long long n = r.integer(j["n_max"], "n_max");
    if (n < 0 || n > 100000) r.fail("n_max", "must lie in [0, 100000]");
    m.n_max = static_cast<int>(n);
  }
  const Json& modes = r.require(j, "modes", "");
  if (!modes.is_array()) r.fail("modes", "expected an array");
  for (std::size_t k = 0; k < modes.size(); ++k) {
    const std::string path = "modes[" + std::to_string(k) + "]";
    const Json& e = modes[k];
    r.only_keys(e, {"type", "mu", "occupancy", "eta_s", "eta_i"}, path);
    ModeSpec spec;
    try {
      spec.type = mode_type_from_string(r.string(r.require(e, "type", path), path + ".type"));
    } catch (const DomainError& err) {
      r.fail(path + ".type", err.what());
    }
    spec.mu = r.number(r.require(e, "mu", path), path + ".mu");
    try {
      spec.occupancy = occupancy_from_string(r.string(r.require(e, "occupancy", path), path + ".occupancy"));
    } catch (const DomainError& err) {
      r.fail(path + ".occupancy", err.what());
    }
    if (e.contains("eta_s")) spec.eta_s = r.number(e["eta_s"], path + ".eta_s");
    if (e.contains("eta_i")) spec.eta_i = r.number(e["eta_i"], path + ".eta_i");
    try {
      detail::check_mu(spec.type, spec.mu);
    } catch (const DomainError& err) {
      r.fail(path + ".mu", err.what());
    }
    for (auto [name, v] : {std::pair{".eta_s", spec.eta_s}, std::pair{".eta_i", spec.eta_i}}) {
      try {
        detail::check_eta(v);
      } catch (const DomainError& err) {
        r.fail(path + name, err.what());
      }
    }
    m.modes.push_back(spec);
  }
  return m;
}

inline SourceModel read_model_json(std::istream& in, const std::string& source = "model") {
  const std::string text = detail::read_all(in);
  return model_from_json(detail::parse_json_text(text, source), source);
}

inline SourceModel read_model_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_model_json(in, path);
}

inline void write_json(std::ostream& out, const Json& j) { out << j.dump(2) << '\n'; }

inline void write_json(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_json(out, j);
}

inline Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return detail::parse_json_text(detail::read_all(in), path);
}

// ---------------------------------------------------------------- tidy CSV

/// One row per observation. Doubles are written in shortest round-trip form.
struct Table {
  using Cell = std::variant<std::string, double, std::int64_t>;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add(std::vector<Cell> row) {
    if (row.size() != columns.size()) throw std::invalid_argument("table row width mismatch");
    rows.push_back(std::move(row));
  }
};

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

inline std::string cell_text(const Table::Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return csv_field(*s);
  if (const auto* d = std::get_if<double>(&c)) return format_double(*d);
  return std::to_string(std::get<std::int64_t>(c));
}

inline std::vector<std::string> csv_split_quoted(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cur += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

} // namespace detail

inline void write_table_csv(std::ostream& out, const Table& t) {
  for (std::size_t c = 0; c < t.columns.size(); ++c) out << (c ? "," : "") << detail::csv_field(t.columns[c]);
  out << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << detail::cell_text(row[c]);
    out << '\n';
  }
}

inline void write_table_csv(const std::string& path, const Table& t) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_table_csv(out, t);
}

/// Header plus rows of raw field text.
struct TextTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw std::out_of_range("no column " + name);
    return static_cast<std::size_t>(it - columns.begin());
  }
};

inline TextTable read_table_csv(std::istream& in, const std::string& source = "table") {
  TextTable t;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::csv_split_quoted(line);
    if (t.columns.empty()) {
      t.columns = std::move(fields);
      continue;
    }
    if (fields.size() != t.columns.size())
      throw ParseError(source, line_no, "", "expected " + std::to_string(t.columns.size()) + " fields, got " +
                                                std::to_string(fields.size()));
    t.rows.push_back(std::move(fields));
  }
  if (t.columns.empty()) throw ParseError(source, line_no, "", "missing header");
  return t;
}

} // namespace modestruct
