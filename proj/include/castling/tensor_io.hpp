#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "castling/tensor.hpp"

namespace castling {

// On-disk tensor format: raw little-endian float64 in row-major order in
// <stem>.bin, plus a JSON sidecar <stem>.json holding {"shape":[...]}. The
// sidecar is the authority on shape; a length mismatch with the binary file
// is an error, not a truncation.
void save_tensor(const std::filesystem::path& stem, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& stem);

// Minimal CSV writer. First row is the header; all cells are numbers except
// the optional leading string column used for variant names.
class CsvWriter {
public:
  explicit CsvWriter(std::vector<std::string> header);
  void add_row(const std::vector<double>& cells);
  void add_row(const std::string& label, const std::vector<double>& cells);
  const std::string& text() const { return text_; }
  void write(const std::filesystem::path& file) const;

private:
  std::size_t width_;
  std::string text_;
};

std::string format_double(double v); // shortest round-trip decimal

} // namespace castling
