#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "castling/tensor.hpp"

namespace castling {

struct DatasetConfig {
  std::size_t image = 16;   // G: images are G x G grayscale
  std::size_t classes = 4;  // C in [2, 8]
  std::size_t samples = 1024;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

// Procedural stand-in for a real image corpus: each sample is one shape
// (bar, cross, disk, hollow square, then vertical bar, x-cross, ring,
// triangle for higher class counts) at a random position and scale over a
// noisy background. Same seed, same bytes, on every platform.
struct SyntheticShapesDataset {
  DatasetConfig cfg;
  std::vector<Tensor> images;       // G x G each
  std::vector<std::size_t> labels;  // class ids, balanced within +-1
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices; // last 10% of the seeded shuffle

  std::vector<unsigned char> export_bytes() const;
  std::uint64_t hash() const; // FNV-1a over export_bytes
};

SyntheticShapesDataset generate_dataset(const DatasetConfig& cfg);

const char* shape_class_name(std::size_t label);

} // namespace castling
