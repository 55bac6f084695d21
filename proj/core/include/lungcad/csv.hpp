#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace lungcad::csv {

// Minimal comma-separated reader: no quoting, `.` decimal point. Blank
// lines are skipped; fields are trimmed of surrounding whitespace.
struct Table {
  std::vector<std::string> header;
  // Each row carries its 1-based line number in the source file.
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
};

Table read_file(const std::filesystem::path& path);
Table parse(std::string_view text, const std::string& source_name);
std::vector<std::string> split_line(std::string_view line);

double parse_double(const std::string& field, const std::string& what, std::size_t line);
long long parse_int(const std::string& field, const std::string& what, std::size_t line);

// Shortest round-trippable decimal representation.
std::string format_double(double value);

// Writes `contents` to `path` via a temporary file and rename.
void write_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace lungcad::csv
