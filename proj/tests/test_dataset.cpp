// Procedural shape corpus: seeded determinism down to the exported bytes,
// class balance within one sample, the 90/10 split contract, and the config
// validation gates.

#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <set>
#include <vector>

#include "castling/dataset.hpp"
#include "castling/errors.hpp"

using castling::ConfigError;
using castling::DatasetConfig;
using castling::DomainError;
using castling::SyntheticShapesDataset;
using castling::generate_dataset;
using castling::shape_class_name;

namespace {

DatasetConfig small_config(std::size_t classes, std::size_t samples, std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.image = 12;
  cfg.classes = classes;
  cfg.samples = samples;
  cfg.seed = seed;
  return cfg;
}

std::uint64_t read_u64_le(const std::vector<unsigned char>& bytes, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[off + i]) << (8 * i);
  return v;
}

} // namespace

TEST_CASE("same seed reproduces the exported byte stream exactly") {
  const auto cfg = small_config(4, 64, 17);
  const auto a = generate_dataset(cfg);
  const auto b = generate_dataset(cfg);
  CHECK(a.export_bytes() == b.export_bytes());
  CHECK(a.hash() == b.hash());
  CHECK(a.train_indices == b.train_indices);
  CHECK(a.val_indices == b.val_indices);

  auto other = cfg;
  other.seed = 18;
  const auto c = generate_dataset(other);
  CHECK(c.hash() != a.hash());
}

TEST_CASE("two classes over 100 samples come out exactly 50/50") {
  const auto ds = generate_dataset(small_config(2, 100, 1));
  std::size_t counts[2] = {0, 0};
  for (std::size_t label : ds.labels) {
    REQUIRE(label < 2);
    ++counts[label];
  }
  CHECK(counts[0] == 50);
  CHECK(counts[1] == 50);
}

TEST_CASE("class balance holds within one sample for every class count") {
  for (std::size_t classes = 2; classes <= 8; ++classes) {
    const auto ds = generate_dataset(small_config(classes, 100, 3));
    std::vector<std::size_t> counts(classes, 0);
    for (std::size_t label : ds.labels) {
      REQUIRE(label < classes);
      ++counts[label];
    }
    const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
    CAPTURE(classes);
    CHECK(*mx - *mn <= 1);
  }
}

TEST_CASE("train/val split is 90/10, disjoint, and covers every sample") {
  const auto ds = generate_dataset(small_config(4, 120, 5));
  CHECK(ds.val_indices.size() == 12);
  CHECK(ds.train_indices.size() == 108);

  std::set<std::size_t> seen(ds.train_indices.begin(), ds.train_indices.end());
  for (std::size_t idx : ds.val_indices) {
    CHECK(seen.count(idx) == 0);
    seen.insert(idx);
  }
  CHECK(seen.size() == 120);
  CHECK(*seen.rbegin() == 119);

  // Tiny corpus still reserves at least one validation sample.
  const auto tiny = generate_dataset(small_config(2, 5, 5));
  CHECK(tiny.val_indices.size() == 1);
  CHECK(tiny.train_indices.size() == 4);
}

TEST_CASE("split order is a shuffle, not the identity") {
  const auto ds = generate_dataset(small_config(4, 200, 9));
  std::vector<std::size_t> concat = ds.train_indices;
  concat.insert(concat.end(), ds.val_indices.begin(), ds.val_indices.end());
  std::vector<std::size_t> identity(concat.size());
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = i;
  CHECK(concat != identity);
}

TEST_CASE("images are G x G with a bright shape over a dim background") {
  const auto cfg = small_config(8, 64, 2);
  const auto ds = generate_dataset(cfg);
  REQUIRE(ds.images.size() == 64);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto& img = ds.images[i];
    REQUIRE(img.shape() == std::vector<std::size_t>{cfg.image, cfg.image});
    double lo = 1e9, hi = -1e9;
    for (std::size_t p = 0; p < img.size(); ++p) {
      lo = std::min(lo, img.at(p));
      hi = std::max(hi, img.at(p));
    }
    CAPTURE(i);
    CAPTURE(shape_class_name(ds.labels[i]));
    CHECK(lo >= 0.0);
    CHECK(hi <= 1.0);
    CHECK(hi >= 0.5); // the stamped shape rises well above the 0.1 noise floor
  }
}

TEST_CASE("export layout starts with image size, class count, sample count") {
  const auto cfg = small_config(3, 9, 21);
  const auto ds = generate_dataset(cfg);
  const auto bytes = ds.export_bytes();
  REQUIRE(bytes.size() == 24 + 9 * (1 + 12 * 12 * 8));
  CHECK(read_u64_le(bytes, 0) == 12);
  CHECK(read_u64_le(bytes, 8) == 3);
  CHECK(read_u64_le(bytes, 16) == 9);
  // Per-sample record: one label byte, then the row-major pixels.
  CHECK(bytes[24] == ds.labels[0]);
  double first_pixel = 0.0;
  std::memcpy(&first_pixel, bytes.data() + 25, sizeof(double));
  CHECK(first_pixel == ds.images[0].at(0));
}

TEST_CASE("hash is FNV-1a over the exported bytes") {
  const auto ds = generate_dataset(small_config(2, 4, 33));
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char b : ds.export_bytes()) {
    h ^= b;
    h *= 0x100000001B3ull;
  }
  CHECK(ds.hash() == h);
}

TEST_CASE("shape class names follow the label order") {
  CHECK(std::string(shape_class_name(0)) == "bar");
  CHECK(std::string(shape_class_name(1)) == "cross");
  CHECK(std::string(shape_class_name(2)) == "disk");
  CHECK(std::string(shape_class_name(3)) == "hollow_square");
  CHECK(std::string(shape_class_name(7)) == "triangle");
  CHECK_THROWS_AS((void)shape_class_name(8), DomainError);
}

TEST_CASE("config validation rejects bad geometry") {
  CHECK_THROWS_AS((void)generate_dataset(small_config(1, 10, 1)), ConfigError);
  CHECK_THROWS_AS((void)generate_dataset(small_config(9, 90, 1)), ConfigError);
  auto cfg = small_config(4, 64, 1);
  cfg.image = 7;
  CHECK_THROWS_AS((void)generate_dataset(cfg), ConfigError);
  cfg = small_config(4, 3, 1); // fewer samples than classes
  CHECK_THROWS_AS((void)generate_dataset(cfg), ConfigError);
}

TEST_CASE("dataset config round-trips through JSON") {
  const auto cfg = small_config(5, 77, 123456789ull);
  const auto j = cfg.to_json();
  const auto back = DatasetConfig::from_json(j);
  CHECK(back.image == cfg.image);
  CHECK(back.classes == cfg.classes);
  CHECK(back.samples == cfg.samples);
  CHECK(back.seed == cfg.seed);

  auto bad = j;
  bad["classes"] = 42;
  CHECK_THROWS_AS((void)DatasetConfig::from_json(bad), ConfigError);
}
