#include "castling/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "castling/rng.hpp"

namespace castling {

void DatasetConfig::validate() const {
  if (image < 8) throw ConfigError("dataset image size must be >= 8, got " + std::to_string(image));
  if (classes < 2 || classes > 8)
    throw ConfigError("dataset class count must lie in [2, 8], got " + std::to_string(classes));
  if (samples < classes) throw ConfigError("dataset needs at least one sample per class");
}

nlohmann::json DatasetConfig::to_json() const {
  return nlohmann::json{{"image", image}, {"classes", classes}, {"samples", samples}, {"seed", seed}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  DatasetConfig c;
  try {
    c.image = j.value("image", c.image);
    c.classes = j.value("classes", c.classes);
    c.samples = j.value("samples", c.samples);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed dataset config: ") + e.what());
  }
  c.validate();
  return c;
}

const char* shape_class_name(std::size_t label) {
  static const char* names[] = {"bar",          "cross", "disk",   "hollow_square",
                                "vertical_bar", "x_cross", "ring", "triangle"};
  if (label >= 8) throw DomainError("shape class label out of range: " + std::to_string(label));
  return names[label];
}

namespace {

// One shape stamped onto the image; pixel test is pure arithmetic so the
// rendering is bit-identical everywhere.
void stamp_shape(Tensor& img, std::size_t label, double cx, double cy, double s,
                 double intensity) {
  const std::size_t g = img.shape()[0];
  const double thick = std::max(1.0, s / 3.0);
  for (std::size_t yy = 0; yy < g; ++yy) {
    for (std::size_t xx = 0; xx < g; ++xx) {
      const double dx = static_cast<double>(xx) - cx;
      const double dy = static_cast<double>(yy) - cy;
      bool in = false;
      switch (label) {
        case 0: in = std::abs(dy) <= thick / 2.0 && std::abs(dx) <= s; break; // bar
        case 1:
          in = (std::abs(dy) <= thick / 2.0 && std::abs(dx) <= s) ||
               (std::abs(dx) <= thick / 2.0 && std::abs(dy) <= s);
          break; // cross
        case 2: in = dx * dx + dy * dy <= s * s; break; // disk
        case 3: {
          const double m = std::max(std::abs(dx), std::abs(dy));
          in = m <= s && m >= s - thick;
          break; // hollow square
        }
        case 4: in = std::abs(dx) <= thick / 2.0 && std::abs(dy) <= s; break; // vertical bar
        case 5:
          in = std::abs(dx + dy) <= thick * 0.75 || std::abs(dx - dy) <= thick * 0.75;
          in = in && std::abs(dx) <= s && std::abs(dy) <= s;
          break; // x cross
        case 6: {
          const double r = std::sqrt(dx * dx + dy * dy);
          in = r <= s && r >= s - thick;
          break; // ring
        }
        case 7: in = dy >= -s && dy <= s && std::abs(dx) <= (dy + s) / 2.0; break; // triangle
        default: throw DomainError("unknown shape label");
      }
      if (in) img(yy, xx) = intensity;
    }
  }
}

void append_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

} // namespace

SyntheticShapesDataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(cfg.seed);
  SyntheticShapesDataset ds;
  ds.cfg = cfg;
  ds.images.reserve(cfg.samples);
  ds.labels.reserve(cfg.samples);

  const double g = static_cast<double>(cfg.image);
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    const std::size_t label = i % cfg.classes; // exact balance within +-1
    Tensor img({cfg.image, cfg.image});
    for (std::size_t p = 0; p < img.size(); ++p) img.at(p) = rng.uniform(0.0, 0.1);
    const double s = rng.uniform(g / 6.0, g / 3.0);
    const double cx = rng.uniform(s + 1.0, g - s - 2.0);
    const double cy = rng.uniform(s + 1.0, g - s - 2.0);
    const double intensity = rng.uniform(0.7, 1.0);
    stamp_shape(img, label, cx, cy, s, intensity);
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }

  // Seeded shuffle, then a 90/10 split along the shuffled order.
  std::vector<std::size_t> order(cfg.samples);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.next_below(i)]);
  const std::size_t val_count = std::max<std::size_t>(1, cfg.samples / 10);
  ds.train_indices.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(val_count));
  ds.val_indices.assign(order.end() - static_cast<std::ptrdiff_t>(val_count), order.end());
  return ds;
}

std::vector<unsigned char> SyntheticShapesDataset::export_bytes() const {
  std::vector<unsigned char> out;
  out.reserve(16 + images.size() * (cfg.image * cfg.image * 8 + 1));
  append_u64(out, cfg.image);
  append_u64(out, cfg.classes);
  append_u64(out, images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back(static_cast<unsigned char>(labels[i]));
    const Tensor& img = images[i];
    const auto* bytes = reinterpret_cast<const unsigned char*>(img.data());
    out.insert(out.end(), bytes, bytes + img.size() * sizeof(double));
  }
  return out;
}

std::uint64_t SyntheticShapesDataset::hash() const {
  // FNV-1a, 64-bit
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char b : export_bytes()) {
    h ^= b;
    h *= 0x100000001B3ull;
  }
  return h;
}

} // namespace castling
