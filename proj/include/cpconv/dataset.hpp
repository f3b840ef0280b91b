#pragma once

// Labeled image sets and the synthetic blob-location task used to train the
// toy networks. On disk a dataset is a directory holding images.cpt
// (N x C x H x W) and labels.csv ("index,label" rows).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpconv/cpt_io.hpp"
#include "cpconv/tensor.hpp"

namespace cpconv {

template <typename T>
struct LabeledDataset {
  DenseTensor<T> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  void validate() const {
    if (images.ndim() != 4) throw std::invalid_argument("dataset: images must be N x C x H x W");
    if (labels.empty() || labels.size() != images.dim(0)) {
      throw std::invalid_argument("dataset: need one label per image and at least one image");
    }
    for (std::size_t l : labels)
      if (l >= num_classes) throw std::invalid_argument("dataset: label " + std::to_string(l) + " >= num_classes");
  }

  // Images at the given indices, in that order.
  DenseTensor<T> gather(const std::vector<std::size_t>& idx) const {
    const std::size_t per = images.size() / images.dim(0);
    DenseTensor<T> out({idx.size(), images.dim(1), images.dim(2), images.dim(3)});
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    return out;
  }

  template <typename U>
  LabeledDataset<U> cast() const {
    return {images.template cast<U>(), labels, num_classes};
  }
};

struct SyntheticConfig {
  std::size_t num_classes = 5;
  std::size_t per_class = 200;
  std::size_t size = 24;
  std::uint64_t seed = 0;
  // Standard deviation of additive pixel noise.
  double noise = 0.5;
  // Standard deviation (pixels) of the blob-centre jitter.
  double jitter = 1.0;
  double blob_sigma = 2.0;
};

// Class k is a bright Gaussian blob centred on a ring at angle 2*pi*k/K.
// Samples are interleaved by class (sample i has label i % K).
template <typename T>
LabeledDataset<T> gen_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_classes < 2) throw std::invalid_argument("gen_synthetic: need at least two classes");
  if (cfg.per_class == 0 || cfg.size < 4) throw std::invalid_argument("gen_synthetic: empty dataset requested");
  const std::size_t n = cfg.num_classes * cfg.per_class;
  LabeledDataset<T> ds{DenseTensor<T>({n, 1, cfg.size, cfg.size}), std::vector<std::size_t>(n), cfg.num_classes};

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double centre = (static_cast<double>(cfg.size) - 1.0) / 2.0;
  const double radius = static_cast<double>(cfg.size) / 4.0;
  const double inv_two_var = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % cfg.num_classes;
    ds.labels[i] = k;
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(cfg.num_classes);
    const double cx = centre + radius * std::cos(angle) + cfg.jitter * normal(rng);
    const double cy = centre + radius * std::sin(angle) + cfg.jitter * normal(rng);
    for (std::size_t x = 0; x < cfg.size; ++x)
      for (std::size_t y = 0; y < cfg.size; ++y) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        double v = std::exp(-(dx * dx + dy * dy) * inv_two_var);
        if (cfg.noise > 0) v += cfg.noise * normal(rng);
        ds.images(i, 0, x, y) = static_cast<T>(v);
      }
  }
  return ds;
}

template <typename T>
void save_dataset(const std::filesystem::path& dir, const LabeledDataset<T>& ds) {
  ds.validate();
  std::filesystem::create_directories(dir);
  save_cpt(dir / "images.cpt", ds.images);
  std::ofstream os(dir / "labels.csv", std::ios::trunc);
  if (!os) throw FormatError("cannot write " + (dir / "labels.csv").string());
  os << "index,label\n";
  for (std::size_t i = 0; i < ds.labels.size(); ++i) os << i << ',' << ds.labels[i] << '\n';
}

// num_classes defaults to max(label) + 1 when not given.
template <typename T>
LabeledDataset<T> load_dataset(const std::filesystem::path& dir, std::size_t num_classes = 0) {
  LabeledDataset<T> ds;
  ds.images = load_cpt<T>(dir / "images.cpt");
  std::ifstream is(dir / "labels.csv");
  if (!is) throw FormatError("cannot open " + (dir / "labels.csv").string());
  std::string line;
  std::getline(is, line);
  if (line != "index,label") throw FormatError("labels.csv: unexpected header '" + line + "'");
  std::size_t max_label = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("labels.csv: malformed row '" + line + "'");
    const std::size_t idx = std::stoul(line.substr(0, comma));
    if (idx != ds.labels.size()) throw FormatError("labels.csv: rows out of order at index " + std::to_string(idx));
    const std::size_t label = std::stoul(line.substr(comma + 1));
    max_label = std::max(max_label, label);
    ds.labels.push_back(label);
  }
  ds.num_classes = num_classes ? num_classes : max_label + 1;
  ds.validate();
  return ds;
}

}  // namespace cpconv
