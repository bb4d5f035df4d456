#pragma once

#include <string>
#include <vector>

namespace poisonlab {

// Minimal RFC-4180 style CSV helpers shared by manifest and report I/O.
// Fields containing comma, quote, or newline are quoted; embedded quotes
// are doubled.

std::string csv_escape(const std::string& field);
std::string csv_join(const std::vector<std::string>& fields);

// Parses one logical CSV record. Throws on unterminated quotes.
std::vector<std::string> csv_split(const std::string& line);

// Reads a whole CSV file as records; skips a trailing empty line.
std::vector<std::vector<std::string>> csv_read_file(const std::string& path);

// Shortest decimal form that round-trips the double exactly (via
// std::to_chars); "inf"/"nan" for non-finite values.
std::string num_to_string(double v);

}  // namespace poisonlab
