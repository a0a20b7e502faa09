#include "castling/tensor_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace castling {

namespace {

// All supported targets are little-endian; the format is pinned to LE so a
// big-endian port would need byte swaps here and nowhere else.
static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; add swaps for this platform");

void write_file(const std::filesystem::path& p, const char* data, std::size_t n) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open for write: " + p.string());
  f.write(data, static_cast<std::streamsize>(n));
  if (!f) throw ConfigError("short write: " + p.string());
}

} // namespace

void save_tensor(const std::filesystem::path& stem, const Tensor& t) {
  nlohmann::json meta;
  meta["shape"] = t.shape();
  const std::string sidecar = meta.dump();
  write_file(stem.string() + ".json", sidecar.data(), sidecar.size());
  write_file(stem.string() + ".bin", reinterpret_cast<const char*>(t.data()),
             t.size() * sizeof(double));
}

Tensor load_tensor(const std::filesystem::path& stem) {
  std::ifstream meta_f(stem.string() + ".json");
  if (!meta_f) throw ConfigError("missing tensor sidecar: " + stem.string() + ".json");
  nlohmann::json meta;
  try {
    meta_f >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad tensor sidecar " + stem.string() + ".json: " + e.what());
  }
  if (!meta.contains("shape") || !meta["shape"].is_array())
    throw ConfigError("tensor sidecar lacks a shape array: " + stem.string() + ".json");
  Shape shape;
  for (const auto& e : meta["shape"]) {
    if (!e.is_number_unsigned()) throw ConfigError("non-integer extent in " + stem.string() + ".json");
    shape.push_back(e.get<std::size_t>());
  }

  std::ifstream bin(stem.string() + ".bin", std::ios::binary | std::ios::ate);
  if (!bin) throw ConfigError("missing tensor data: " + stem.string() + ".bin");
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  Tensor t(shape);
  if (bytes != t.size() * sizeof(double))
    throw ConfigError("tensor data length " + std::to_string(bytes) + " bytes does not match shape " +
                      shape_str(shape) + " in " + stem.string());
  bin.seekg(0);
  bin.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(bytes));
  if (!bin) throw ConfigError("short read: " + stem.string() + ".bin");
  return t;
}

CsvWriter::CsvWriter(std::vector<std::string> header) : width_(header.size()) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) text_ += ',';
    text_ += header[i];
  }
  text_ += '\n';
}

void CsvWriter::add_row(const std::vector<double>& cells) {
  if (cells.size() != width_)
    throw ContractError("csv row width " + std::to_string(cells.size()) + " != header width " +
                        std::to_string(width_));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) text_ += ',';
    text_ += format_double(cells[i]);
  }
  text_ += '\n';
}

void CsvWriter::add_row(const std::string& label, const std::vector<double>& cells) {
  if (cells.size() + 1 != width_)
    throw ContractError("csv labeled row width mismatch");
  text_ += label;
  for (double c : cells) {
    text_ += ',';
    text_ += format_double(c);
  }
  text_ += '\n';
}

void CsvWriter::write(const std::filesystem::path& file) const {
  write_file(file, text_.data(), text_.size());
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

} // namespace castling
