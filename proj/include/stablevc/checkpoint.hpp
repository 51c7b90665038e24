#pragma once

// Single-file checkpoint container.
//
//   offset  size  field
//   0       4     magic "SVCK"
//   4       4     u32 format version
//   8       4     u32 manifest byte length M
//   12      8     u64 payload byte length P
//   20      M     JSON manifest: version, config, tensors[{name, shape, offset, nbytes}]
//   20+M    P     float32 little-endian tensor payloads, row-major
//   20+M+P  4     u32 CRC-32 of bytes [0, 20+M+P)
//
// All integers little-endian. Values round-trip bit-exactly for float models.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "stablevc/io.hpp"
#include "stablevc/model.hpp"

namespace stablevc::checkpoint {

inline constexpr char kMagic[4] = {'S', 'V', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 20;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class ChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = uInt(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return std::uint32_t(crc);
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"width", c.width},
                        {"heads", c.heads},
                        {"ff_mult", c.ff_mult},
                        {"n_mels", c.n_mels},
                        {"ssl_dim", c.ssl_dim},
                        {"style_dim", c.style_dim},
                        {"prior_dim", c.prior_dim},
                        {"content_blocks", c.content_blocks},
                        {"flow_blocks", c.flow_blocks},
                        {"n_speakers", c.n_speakers},
                        {"position_freqs", c.position_freqs},
                        {"style_pool", c.style_pool},
                        {"style_conv_blocks", c.style_conv_blocks},
                        {"attention_temperature", c.attention_temperature},
                        {"reversal_scale", c.reversal_scale},
                        {"null_condition_prob", c.null_condition_prob}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ff_mult = j.at("ff_mult").get<int>();
  c.n_mels = j.at("n_mels").get<int>();
  c.ssl_dim = j.at("ssl_dim").get<int>();
  c.style_dim = j.at("style_dim").get<int>();
  c.prior_dim = j.at("prior_dim").get<int>();
  c.content_blocks = j.at("content_blocks").get<int>();
  c.flow_blocks = j.at("flow_blocks").get<int>();
  c.n_speakers = j.at("n_speakers").get<int>();
  c.position_freqs = j.at("position_freqs").get<int>();
  c.style_pool = j.at("style_pool").get<int>();
  c.style_conv_blocks = j.at("style_conv_blocks").get<int>();
  c.attention_temperature = j.at("attention_temperature").get<double>();
  c.reversal_scale = j.at("reversal_scale").get<double>();
  c.null_condition_prob = j.at("null_condition_prob").get<double>();
  return c;
}

template <class Derived>
void append_tensor(nlohmann::json& dir, std::string& payload, const std::string& name,
                   const Eigen::MatrixBase<Derived>& m) {
  const Matrix<float> f = m.template cast<float>();
  const std::size_t nbytes = std::size_t(f.size()) * sizeof(float);
  dir.push_back({{"name", name}, {"shape", {f.rows(), f.cols()}}, {"offset", payload.size()}, {"nbytes", nbytes}});
  payload.append(reinterpret_cast<const char*>(f.data()), nbytes);
}

template <class T>
std::string serialize(StableVcModel<T>& model) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string payload;
  append_tensor(tensors, payload, "codebook.centroids", model.codebook.centroids);
  model.visit([&](const std::string& name, Parameter<T>& p) { append_tensor(tensors, payload, name, p.value); });
  const nlohmann::json manifest{{"version", kVersion}, {"config", config_to_json(model.config)}, {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::string out;
  out.reserve(kHeaderBytes + text.size() + payload.size() + 4);
  out.append(kMagic, 4);
  io::append_u32(out, kVersion);
  io::append_u32(out, std::uint32_t(text.size()));
  const std::uint64_t p = payload.size();
  out.append(reinterpret_cast<const char*>(&p), 8);
  out += text;
  out += payload;
  io::append_u32(out, crc32_of(out.data(), out.size()));
  return out;
}

template <class T>
StableVcModel<T> deserialize(const std::string& bytes) {
  if (bytes.size() < kHeaderBytes) throw TruncatedError("checkpoint: truncated header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError("checkpoint: bad magic");
  const std::uint32_t version = io::read_u32(bytes.data() + 4);
  if (version != kVersion) {
    throw VersionError("checkpoint: format version " + std::to_string(version) + ", expected " +
                       std::to_string(kVersion));
  }
  const std::uint64_t m = io::read_u32(bytes.data() + 8);
  std::uint64_t p;
  std::memcpy(&p, bytes.data() + 12, 8);
  const std::uint64_t expected = kHeaderBytes + m + p + 4;
  if (bytes.size() < expected) throw TruncatedError("checkpoint: file is shorter than its header declares");
  if (bytes.size() > expected) throw CheckpointError("checkpoint: trailing bytes after checksum");
  const std::uint32_t stored = io::read_u32(bytes.data() + expected - 4);
  if (crc32_of(bytes.data(), expected - 4) != stored) throw ChecksumError("checkpoint: CRC-32 mismatch");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + kHeaderBytes, bytes.begin() + std::ptrdiff_t(kHeaderBytes + m));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  if (manifest.at("version").get<std::uint32_t>() != kVersion) throw VersionError("checkpoint: manifest version");
  const char* payload = bytes.data() + kHeaderBytes + m;

  std::map<std::string, nlohmann::json> dir;
  for (const auto& t : manifest.at("tensors")) dir[t.at("name").get<std::string>()] = t;
  auto load = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const auto it = dir.find(name);
    if (it == dir.end()) throw CheckpointError("checkpoint: missing tensor " + name);
    const auto& t = it->second;
    const Eigen::Index r = t.at("shape")[0].get<Eigen::Index>(), c = t.at("shape")[1].get<Eigen::Index>();
    if ((rows >= 0 && r != rows) || (cols >= 0 && c != cols)) throw CheckpointError("checkpoint: shape mismatch for " + name);
    const std::uint64_t off = t.at("offset").get<std::uint64_t>(), nb = t.at("nbytes").get<std::uint64_t>();
    if (nb != std::uint64_t(r * c) * sizeof(float) || off + nb > p) throw CheckpointError("checkpoint: bad extent for " + name);
    Matrix<float> out(r, c);
    std::memcpy(out.data(), payload + off, nb);
    dir.erase(it);
    return out;
  };

  content::Codebook cb;
  cb.centroids = load("codebook.centroids", -1, -1);
  StableVcModel<T> model(config_from_json(manifest.at("config")), std::move(cb), 0);
  model.visit([&](const std::string& name, Parameter<T>& param) {
    param.value = load(name, param.value.rows(), param.value.cols()).template cast<T>();
    param.zero_grad();
  });
  if (!dir.empty()) throw CheckpointError("checkpoint: unexpected tensor " + dir.begin()->first);
  return model;
}

template <class T>
void save(StableVcModel<T>& model, const std::filesystem::path& path) {
  io::write_file(path, serialize(model));
}

template <class T = float>
StableVcModel<T> load(const std::filesystem::path& path) {
  return deserialize<T>(io::read_file(path));
}

}  // namespace stablevc::checkpoint
