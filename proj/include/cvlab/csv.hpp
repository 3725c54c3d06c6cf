#pragma once

// Minimal RFC-4180 style writer: comma separated, LF line ends, header row.
// Doubles are printed with 17 significant digits so that they round-trip.

#include <cstdint>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

namespace cvlab {

using CsvCell = std::variant<double, std::int64_t, std::string>;

std::string format_double(double x, int precision = 17);
std::string format_cell(const CsvCell& cell, int precision = 17);

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header, int precision = 17);

  void row(const std::vector<CsvCell>& cells);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::size_t columns_;
  int precision_;
};

}  // namespace cvlab
