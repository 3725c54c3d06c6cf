#include "cvlab/csv.hpp"

#include <charconv>
#include <cmath>

#include "cvlab/error.hpp"

namespace cvlab {

std::string format_double(double x, int precision) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::general, precision);
  if (ec != std::errc{}) fail(ErrorKind::InvalidArgument, "cannot format number");
  return std::string(buf, end);
}

std::string format_cell(const CsvCell& cell, int precision) {
  if (const double* d = std::get_if<double>(&cell)) return format_double(*d, precision);
  if (const std::int64_t* i = std::get_if<std::int64_t>(&cell)) return std::to_string(*i);
  const std::string& s = std::get<std::string>(cell);
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char ch : s) {
    if (ch == '"') quoted += '"';
    quoted += ch;
  }
  return quoted + '"';
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header, int precision)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc), columns_(header.size()), precision_(precision) {
  if (!out_) fail(ErrorKind::ConfigError, "cannot open " + path + " for writing");
  for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
  out_ << '\n';
}

void CsvWriter::row(const std::vector<CsvCell>& cells) {
  if (cells.size() != columns_) fail(ErrorKind::InvalidArgument, "row width does not match the header of " + path_);
  for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << format_cell(cells[i], precision_);
  out_ << '\n';
  if (!out_) fail(ErrorKind::ConfigError, "write to " + path_ + " failed");
}

}  // namespace cvlab
