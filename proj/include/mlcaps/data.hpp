#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mlcaps/errors.hpp"
#include "mlcaps/hierarchy.hpp"
#include "mlcaps/tensor.hpp"

namespace mlcaps {

// Images in [0,1], channel-major, plus fine labels.
struct ImageSet {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> pixels;
  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> native_coarse;  // CIFAR-100 only

  std::size_t count() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(), image_size());
  }

  // First n images (all when n is 0 or larger than the set).
  ImageSet head(std::size_t n) const {
    if (n == 0 || n >= count()) return *this;
    ImageSet out{channels, height, width, {}, {}, {}};
    out.pixels.assign(pixels.begin(), pixels.begin() + static_cast<std::ptrdiff_t>(n * image_size()));
    out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    if (!native_coarse.empty())
      out.native_coarse.assign(native_coarse.begin(), native_coarse.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
  }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw missing_data_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                               const std::string& what) {
  if (offset + 4 > bytes.size()) throw format_error(what + ": truncated header");
  return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
         (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

inline void put_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// IDX (big-endian) image + label file pair, pixels scaled by 1/255.
inline ImageSet load_idx(const std::filesystem::path& images_path,
                         const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  const std::string iname = images_path.filename().string(), lname = labels_path.filename().string();
  if (detail::read_be32(img, 0, iname) != kIdxImageMagic)
    throw format_error(iname + ": bad magic, expected 0x00000803");
  if (detail::read_be32(lab, 0, lname) != kIdxLabelMagic)
    throw format_error(lname + ": bad magic, expected 0x00000801");
  const std::size_t n = detail::read_be32(img, 4, iname);
  const std::size_t rows = detail::read_be32(img, 8, iname);
  const std::size_t cols = detail::read_be32(img, 12, iname);
  const std::size_t nl = detail::read_be32(lab, 4, lname);
  if (n != nl)
    throw format_error("idx: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  if (img.size() != 16 + n * rows * cols)
    throw format_error(iname + ": expected " + std::to_string(16 + n * rows * cols) +
                       " bytes, found " + std::to_string(img.size()) +
                       (img.size() < 16 + n * rows * cols ? " (truncated)" : ""));
  if (lab.size() != 8 + n)
    throw format_error(lname + ": expected " + std::to_string(8 + n) + " bytes, found " +
                       std::to_string(lab.size()) + (lab.size() < 8 + n ? " (truncated)" : ""));
  ImageSet set{1, rows, cols, {}, {}, {}};
  set.pixels.resize(n * rows * cols);
  for (std::size_t i = 0; i < set.pixels.size(); ++i) set.pixels[i] = float(img[16 + i]) / 255.0f;
  set.labels.assign(lab.begin() + 8, lab.end());
  return set;
}

inline void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                      const ImageSet& set) {
  if (set.channels != 1) throw format_error("idx: only single-channel images");
  std::ofstream img(images_path, std::ios::binary), lab(labels_path, std::ios::binary);
  if (!img || !lab) throw format_error("idx: cannot write output files");
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(set.count()));
  detail::put_be32(img, static_cast<std::uint32_t>(set.height));
  detail::put_be32(img, static_cast<std::uint32_t>(set.width));
  for (float v : set.pixels) img.put(static_cast<char>(detail::quantize(v)));
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(set.count()));
  for (auto l : set.labels) lab.put(static_cast<char>(l));
}

enum class CifarVariant { cifar10 = 10, cifar100 = 100 };

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;

inline std::size_t cifar_row_size(CifarVariant v) {
  return (v == CifarVariant::cifar10 ? 1 : 2) + kCifarPixels;
}

// One CIFAR binary batch file. CIFAR-100 rows carry the native coarse byte first.
inline ImageSet load_cifar_file(const std::filesystem::path& path, CifarVariant variant) {
  const auto bytes = detail::read_file(path);
  const std::size_t row = cifar_row_size(variant);
  if (bytes.empty() || bytes.size() % row != 0)
    throw format_error(path.filename().string() + ": size " + std::to_string(bytes.size()) +
                       " is not a multiple of the " + std::to_string(row) + "-byte row");
  const std::size_t n = bytes.size() / row;
  ImageSet set{3, 32, 32, {}, {}, {}};
  set.pixels.resize(n * kCifarPixels);
  set.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * row;
    if (variant == CifarVariant::cifar100) {
      set.native_coarse.push_back(r[0]);
      set.labels[i] = r[1];
      r += 2;
    } else {
      set.labels[i] = r[0];
      r += 1;
    }
    for (std::size_t p = 0; p < kCifarPixels; ++p) set.pixels[i * kCifarPixels + p] = float(r[p]) / 255.0f;
  }
  return set;
}

inline void write_cifar_file(const std::filesystem::path& path, CifarVariant variant, const ImageSet& set) {
  if (set.image_size() != kCifarPixels) throw format_error("cifar: images must be 3x32x32");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw format_error("cifar: cannot write " + path.string());
  for (std::size_t i = 0; i < set.count(); ++i) {
    if (variant == CifarVariant::cifar100)
      out.put(static_cast<char>(set.native_coarse.empty() ? 0 : set.native_coarse[i]));
    out.put(static_cast<char>(set.labels[i]));
    for (float v : set.image(i)) out.put(static_cast<char>(detail::quantize(v)));
  }
}

inline void append(ImageSet& into, const ImageSet& more) {
  if (into.count() == 0) {
    into = more;
    return;
  }
  into.pixels.insert(into.pixels.end(), more.pixels.begin(), more.pixels.end());
  into.labels.insert(into.labels.end(), more.labels.begin(), more.labels.end());
  into.native_coarse.insert(into.native_coarse.end(), more.native_coarse.begin(), more.native_coarse.end());
}

// Standard batch files under `dir` for the requested split.
inline ImageSet load_cifar(const std::filesystem::path& dir, CifarVariant variant, bool train) {
  if (!std::filesystem::is_directory(dir)) throw missing_data_error("missing directory " + dir.string());
  std::vector<std::string> files;
  if (variant == CifarVariant::cifar10) {
    if (train)
      for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    else
      files.push_back("test_batch.bin");
  } else {
    files.push_back(train ? "train.bin" : "test.bin");
  }
  ImageSet set;
  for (const auto& f : files) append(set, load_cifar_file(dir / f, variant));
  return set;
}

struct ChannelStats {
  std::vector<double> mean, stddev;
};

inline ChannelStats compute_stats(const ImageSet& set) {
  ChannelStats s;
  const std::size_t plane = set.height * set.width;
  for (std::size_t c = 0; c < set.channels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < set.count(); ++i) {
      const float* p = set.pixels.data() + i * set.image_size() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        sum += p[k];
        sq += double(p[k]) * p[k];
      }
    }
    const double n = double(set.count() * plane);
    const double mean = sum / n;
    s.mean.push_back(mean);
    s.stddev.push_back(std::sqrt(std::max(0.0, sq / n - mean * mean)));
  }
  return s;
}

inline void check_stats(const ChannelStats& stats) {
  for (std::size_t c = 0; c < stats.stddev.size(); ++c)
    if (!(stats.stddev[c] > 1e-12))
      throw std::domain_error("normalize: channel " + std::to_string(c) + " has zero standard deviation");
}

// Per-channel (x - mean) / std over a block of channel-major images.
inline std::vector<float> normalize(std::span<const float> images, std::size_t channels,
                                    std::size_t plane, const ChannelStats& stats) {
  check_stats(stats);
  if (stats.mean.size() != channels) throw dimension_error("normalize: stats/channel count mismatch");
  std::vector<float> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t c = (i / plane) % channels;
    out[i] = float((images[i] - stats.mean[c]) / stats.stddev[c]);
  }
  return out;
}

template <typename T>
struct Batch {
  Tensor<T> images;               // normalized [B,C,H,W]
  Tensor<T> raw;                  // [0,1], reconstruction target
  std::vector<Tensor<T>> targets;  // per level [B, K_n], rows sum to 1
  std::vector<MultiLabel> labels;
};

template <typename T>
Batch<T> make_batch(const ImageSet& set, std::span<const std::size_t> indices, const LabelTree& tree,
                    const ChannelStats& stats) {
  const std::size_t b = indices.size(), isz = set.image_size();
  std::vector<float> raw(b * isz);
  for (std::size_t j = 0; j < b; ++j) std::ranges::copy(set.image(indices[j]), raw.begin() + std::ptrdiff_t(j * isz));
  auto norm = normalize(raw, set.channels, set.height * set.width, stats);
  Batch<T> out;
  const Shape shape{b, set.channels, set.height, set.width};
  out.images = Tensor<T>(shape, std::vector<T>(norm.begin(), norm.end()));
  out.raw = Tensor<T>(shape, std::vector<T>(raw.begin(), raw.end()));
  for (std::size_t n = 0; n < tree.depth(); ++n) out.targets.emplace_back(Shape{b, tree.classes(n)});
  for (std::size_t j = 0; j < b; ++j) {
    auto label = expand(tree, set.labels[indices[j]]);
    for (std::size_t n = 0; n < tree.depth(); ++n)
      out.targets[n].mutable_data()[j * tree.classes(n) + label.ids[n]] = T(1);
    out.labels.push_back(std::move(label));
  }
  return out;
}

// Beta(alpha, alpha) through two gamma draws.
inline double sample_beta(double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(alpha, 1.0);
  const double x = g(rng), y = g(rng);
  return (x + y) > 0.0 ? x / (x + y) : 0.5;
}

// Convex combination of every item with a random partner. Images, raw
// targets and all per-level label rows share one coefficient.
template <typename T>
Batch<T> mixup(const Batch<T>& batch, double alpha, std::mt19937_64& rng,
               std::optional<double> forced_mu = std::nullopt) {
  const std::size_t b = batch.images.dim(0);
  if (b < 2) throw std::invalid_argument("mixup: batch needs at least 2 items");
  const double mu = forced_mu ? *forced_mu : sample_beta(alpha, rng);
  std::vector<std::size_t> partner(b);
  std::iota(partner.begin(), partner.end(), std::size_t{0});
  std::shuffle(partner.begin(), partner.end(), rng);
  auto mix = [&](const Tensor<T>& t) {
    const std::size_t row = t.size() / b;
    std::vector<T> out(t.size());
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < row; ++k)
        out[j * row + k] = T(mu) * t[j * row + k] + T(1.0 - mu) * t[partner[j] * row + k];
    return Tensor<T>(t.shape(), std::move(out));
  };
  Batch<T> out;
  out.images = mix(batch.images);
  out.raw = mix(batch.raw);
  for (const auto& t : batch.targets) out.targets.push_back(mix(t));
  out.labels = batch.labels;
  return out;
}

enum class DatasetKind { mnist, fashion_mnist, cifar10, cifar100 };

inline DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "mnist") return DatasetKind::mnist;
  if (name == "fashion-mnist" || name == "fashion_mnist") return DatasetKind::fashion_mnist;
  if (name == "cifar10" || name == "cifar-10") return DatasetKind::cifar10;
  if (name == "cifar100" || name == "cifar-100") return DatasetKind::cifar100;
  throw config_error("unknown dataset '" + name + "' (mnist, fashion-mnist, cifar10, cifar100)");
}

inline std::string dataset_name(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::mnist: return "mnist";
    case DatasetKind::fashion_mnist: return "fashion-mnist";
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::cifar100: return "cifar100";
  }
  return "?";
}

// Subdirectory of the data root holding each dataset.
inline std::string dataset_subdir(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::mnist: return "mnist";
    case DatasetKind::fashion_mnist: return "fashion-mnist";
    case DatasetKind::cifar10: return "cifar-10-batches-bin";
    case DatasetKind::cifar100: return "cifar-100-binary";
  }
  return {};
}

struct Dataset {
  DatasetKind kind = DatasetKind::mnist;
  ImageSet train, test;
  LabelTree tree;
  ChannelStats stats;  // from the train split
};

inline ImageSet load_split(DatasetKind kind, const std::filesystem::path& root, bool train) {
  const auto dir = root / dataset_subdir(kind);
  if (!std::filesystem::is_directory(dir))
    throw missing_data_error("dataset directory not found: " + dir.string());
  switch (kind) {
    case DatasetKind::mnist:
    case DatasetKind::fashion_mnist: {
      const std::string p = train ? "train" : "t10k";
      return load_idx(dir / (p + "-images-idx3-ubyte"), dir / (p + "-labels-idx1-ubyte"));
    }
    case DatasetKind::cifar10: return load_cifar(dir, CifarVariant::cifar10, train);
    case DatasetKind::cifar100: return load_cifar(dir, CifarVariant::cifar100, train);
  }
  return {};
}

inline Dataset load_dataset(DatasetKind kind, const std::filesystem::path& root, LabelTree tree,
                            std::size_t train_limit = 0, std::size_t test_limit = 0) {
  Dataset ds;
  ds.kind = kind;
  ds.train = load_split(kind, root, true).head(train_limit);
  ds.test = load_split(kind, root, false).head(test_limit);
  for (const auto* split : {&ds.train, &ds.test})
    for (auto l : split->labels)
      if (l >= tree.fine_classes())
        throw format_error("dataset: label " + std::to_string(l) + " outside the " +
                           std::to_string(tree.fine_classes()) + " fine classes");
  ds.tree = std::move(tree);
  ds.stats = compute_stats(ds.train);
  check_stats(ds.stats);
  return ds;
}

}  // namespace mlcaps
