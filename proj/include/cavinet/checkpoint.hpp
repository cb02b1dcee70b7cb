#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cavinet/model.hpp"

namespace cavinet {

// Versioned binary checkpoint: a JSON copy of the model config followed by
// every named parameter tensor (name, dtype, shape, raw little-endian data).
// Round-tripping is bit-exact.
//
//   magic "CVCK" | u32 version | u64 json_len | json | u64 n_tensors
//   per tensor: u32 name_len | name | u8 dtype | u32 rank | u64 dims... | data

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) raise<IoError>("checkpoint: truncated while reading ", what);
  return v;
}

template <class Scalar>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<Scalar, double>) return 0;
  else if constexpr (std::is_same_v<Scalar, float>) return 1;
  else static_assert(sizeof(Scalar) == 0, "unsupported checkpoint scalar");
}

}  // namespace detail

template <class Scalar>
void save_checkpoint(CaViNet<Scalar>& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) raise<IoError>("checkpoint: cannot open '", path.string(), "' for write");

  os.write("CVCK", 4);
  detail::write_pod(os, kCheckpointVersion);
  nlohmann::json j = model.config;
  std::string config_text = j.dump();
  detail::write_pod(os, static_cast<std::uint64_t>(config_text.size()));
  os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));

  auto refs = param_refs(model);
  detail::write_pod(os, static_cast<std::uint64_t>(refs.size()));
  for (const auto& r : refs) {
    detail::write_pod(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::write_pod(os, detail::dtype_tag<Scalar>());
    detail::write_pod(os, static_cast<std::uint32_t>(r.shape.size()));
    for (Index d : r.shape) detail::write_pod(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(r.data),
             static_cast<std::streamsize>(sizeof(Scalar) * r.size));
  }
  if (!os) raise<IoError>("checkpoint: write failed for '", path.string(), "'");
}

template <class Scalar>
CaViNet<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise<IoError>("checkpoint: cannot open '", path.string(), "'");

  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CVCK", 4) != 0)
    raise<IoError>("checkpoint: '", path.string(), "' is not a checkpoint file");
  auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    raise<IoError>("checkpoint: unsupported version ", version);

  auto json_len = detail::read_pod<std::uint64_t>(is, "config length");
  std::string config_text(json_len, '\0');
  is.read(config_text.data(), static_cast<std::streamsize>(json_len));
  if (!is) raise<IoError>("checkpoint: truncated config");
  ModelConfig cfg = nlohmann::json::parse(config_text).get<ModelConfig>();

  // Rebuild the skeleton from the embedded config, then overwrite every
  // parameter from the stored tensors.
  CaViNet<Scalar> model = build_model<Scalar>(cfg, /*seed=*/0);
  auto refs = param_refs(model);

  auto n_tensors = detail::read_pod<std::uint64_t>(is, "tensor count");
  if (n_tensors != refs.size())
    raise<IoError>("checkpoint: holds ", n_tensors, " tensors, model expects ",
                   refs.size());
  for (auto& r : refs) {
    auto name_len = detail::read_pod<std::uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is || name != r.name)
      raise<IoError>("checkpoint: expected tensor '", r.name, "', found '", name, "'");
    auto dtype = detail::read_pod<std::uint8_t>(is, "dtype");
    if (dtype != detail::dtype_tag<Scalar>())
      raise<IoError>("checkpoint: dtype mismatch for '", name, "'");
    auto rank = detail::read_pod<std::uint32_t>(is, "rank");
    Shape shape(rank);
    for (auto& d : shape)
      d = static_cast<Index>(detail::read_pod<std::uint64_t>(is, "dim"));
    if (shape != r.shape)
      raise<IoError>("checkpoint: shape mismatch for '", name, "': file ",
                     shape_str(shape), ", model ", shape_str(r.shape));
    is.read(reinterpret_cast<char*>(r.data),
            static_cast<std::streamsize>(sizeof(Scalar) * r.size));
    if (!is) raise<IoError>("checkpoint: truncated data for '", name, "'");
  }
  return model;
}

}  // namespace cavinet
