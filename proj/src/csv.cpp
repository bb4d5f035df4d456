#include "poisonlab/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace poisonlab {

std::string csv_escape(const std::string& field) {
  bool needs_quotes = field.find_first_of(",\"\n\r") != std::string::npos;
  if (!needs_quotes) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

std::string csv_join(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(fields[i]);
  }
  return out;
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c == '\r') {
      // tolerate CRLF line endings
    } else {
      cur += c;
    }
  }
  if (in_quotes) throw std::runtime_error("csv: unterminated quoted field");
  fields.push_back(cur);
  return fields;
}

std::string num_to_string(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("num_to_string: to_chars failed");
  return std::string(buf, p);
}

std::vector<std::vector<std::string>> csv_read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("csv: cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line, record;
  // A quoted field may span physical lines; quote parity tells us whether a
  // newline ended the record or sits inside a field.
  bool open = false;
  while (std::getline(in, line)) {
    if (!open && line.empty() && in.peek() == std::char_traits<char>::eof()) break;
    if (open) {
      record += '\n';
      record += line;
    } else {
      record = line;
    }
    for (char c : line)
      if (c == '"') open = !open;
    if (!open) {
      rows.push_back(csv_split(record));
      record.clear();
    }
  }
  if (open) throw std::runtime_error("csv: unterminated quoted field");
  return rows;
}

}  // namespace poisonlab
