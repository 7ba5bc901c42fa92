#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mlcaps/errors.hpp"
#include "mlcaps/hierarchy.hpp"
#include "mlcaps/model.hpp"

namespace mlcaps {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'L', 'C', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Everything that determines parameter shapes and forward semantics.
inline std::string canonical_string(const ModelConfig& c) {
  std::ostringstream os;
  auto list = [&](const std::vector<std::size_t>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  };
  os << "input=" << c.channels << 'x' << c.height << 'x' << c.width << ";conv=";
  list(c.conv_filters);
  os << ";primary=" << c.primary_capsule_channels << 'x' << c.primary_dim
     << ";secondary=" << c.secondary_dim << ";iters=" << c.routing_iters
     << ";coupling_grad=" << c.differentiate_coupling << ";decoder=";
  list(c.decoder_hidden);
  os << ";levels=";
  list(c.level_classes);
  return os.str();
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t config_fingerprint(const ModelConfig& config, const LabelTree& tree) {
  return fnv1a64(canonical_string(config) + "\n" + to_string(tree));
}

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointFile {
  std::uint64_t fingerprint = 0;
  std::vector<CheckpointEntry> entries;
};

namespace detail {

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in, const std::string& what) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) throw format_error("checkpoint: truncated " + what);
  return v;
}

}  // namespace detail

// Layout (little-endian): "MLCP", u32 version, u64 fingerprint, u32 count,
// then per parameter: u32 name length, name, u32 rank, u32 extents, f32 payload.
inline void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw format_error("checkpoint: cannot write " + path.string());
  out.write(kCheckpointMagic.data(), 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, file.fingerprint);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(file.entries.size()));
  for (const auto& e : file.entries) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(float)));
  }
  if (!out) throw format_error("checkpoint: write failed for " + path.string());
}

inline CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw missing_data_error("checkpoint: cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kCheckpointMagic)
    throw format_error("checkpoint: " + path.string() + " is not an MLCP file");
  if (auto v = detail::get<std::uint32_t>(in, "version"); v != kCheckpointVersion)
    throw format_error("checkpoint: unsupported version " + std::to_string(v));
  CheckpointFile file;
  file.fingerprint = detail::get<std::uint64_t>(in, "fingerprint");
  const auto count = detail::get<std::uint32_t>(in, "parameter count");
  for (std::uint32_t p = 0; p < count; ++p) {
    CheckpointEntry e;
    e.name.resize(detail::get<std::uint32_t>(in, "name length"));
    if (!in.read(e.name.data(), static_cast<std::streamsize>(e.name.size())))
      throw format_error("checkpoint: truncated name");
    const auto rank = detail::get<std::uint32_t>(in, "rank");
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(detail::get<std::uint32_t>(in, "extent"));
    e.values.resize(shape_size(e.shape));
    if (!in.read(reinterpret_cast<char*>(e.values.data()),
                 static_cast<std::streamsize>(e.values.size() * sizeof(float))))
      throw format_error("checkpoint: truncated payload for " + e.name);
    file.entries.push_back(std::move(e));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw format_error("checkpoint: trailing bytes");
  return file;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const LabelTree& tree) {
  CheckpointFile file;
  file.fingerprint = config_fingerprint(model.config(), tree);
  for (const auto& p : model.parameters())
    file.entries.push_back({p.name, p.tensor.shape(),
                            std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
  write_checkpoint(path, file);
}

// Refuses files written for a different configuration or hierarchy.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, Model<T>& model, const LabelTree& tree) {
  const CheckpointFile file = read_checkpoint(path);
  if (file.fingerprint != config_fingerprint(model.config(), tree))
    throw config_error("checkpoint: fingerprint mismatch, " + path.string() +
                       " was written for a different model configuration or hierarchy");
  auto& params = model.parameters();
  if (file.entries.size() != params.size())
    throw format_error("checkpoint: " + std::to_string(file.entries.size()) + " parameters, model has " +
                       std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = file.entries[i];
    auto& p = params[i];
    if (e.name != p.name || e.shape != p.tensor.shape())
      throw format_error("checkpoint: entry " + e.name + " " + shape_str(e.shape) + " does not match " +
                         p.name + " " + shape_str(p.tensor.shape()));
    std::ranges::copy(e.values, p.tensor.mutable_data().begin());
  }
}

}  // namespace mlcaps
