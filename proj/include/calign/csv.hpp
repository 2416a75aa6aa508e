#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "calign/error.hpp"

namespace calign::csv {

/// Splits one CSV record. Supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw SchemaError("unterminated quote in CSV line: " + line);
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::string join(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += quote(fields[i]);
  }
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline Table read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open CSV file: " + path);
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty CSV file: " + path);
  t.header = split_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto fields = split_line(line);
    if (fields.size() != t.header.size()) {
      throw SchemaError(path + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.header.size()) + " fields, got " +
                        std::to_string(fields.size()));
    }
    t.rows.push_back(std::move(fields));
  }
  return t;
}

inline void write(const std::string& path, const Table& t) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write CSV file: " + path);
  out << join(t.header) << '\n';
  for (const auto& r : t.rows) out << join(r) << '\n';
}

}  // namespace calign::csv
