#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sit/config.hpp"
#include "sit/io.hpp"
#include "sit/layers.hpp"

namespace sit {

enum class DType { kF32, kF64 };

template <typename Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  return std::is_same_v<Scalar, float> ? DType::kF32 : DType::kF64;
}

inline std::size_t dtype_bytes(DType d) { return d == DType::kF32 ? 4 : 8; }

struct TensorEntry {
  std::string name;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  DType dtype = DType::kF32;
  bool training_only = false;
  /// Raw little-endian values.
  std::vector<std::uint8_t> bytes;
};

/// Serialized parameter set.
///
/// File layout: "SITC" | version u32 | manifest length u64 | manifest (JSON) |
/// blob. The manifest lists every tensor with shape, dtype, byte offset into
/// the blob, training_only flag and CRC32.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<TensorEntry> tensors;

  const TensorEntry* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Verifies every tensor's CRC32.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
TensorEntry make_entry(const NamedParam<Scalar>& p) {
  static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");
  TensorEntry e;
  e.name = p.name;
  e.rows = p.tensor.rows();
  e.cols = p.tensor.cols();
  e.dtype = dtype_of<Scalar>();
  e.training_only = p.training_only;
  e.bytes.resize(static_cast<std::size_t>(p.tensor.size()) * sizeof(Scalar));
  std::memcpy(e.bytes.data(), p.tensor.value().data(), e.bytes.size());
  return e;
}

template <typename Scalar>
Checkpoint make_checkpoint(const ModelConfig& config, const ParamList<Scalar>& params,
                           nlohmann::json metadata = nlohmann::json::object()) {
  Checkpoint c;
  c.config = config;
  c.metadata = std::move(metadata);
  for (const auto& p : params) c.tensors.push_back(make_entry(p));
  return c;
}

template <typename Scalar>
Mat<Scalar> entry_values(const TensorEntry& e) {
  Mat<Scalar> out(e.rows, e.cols);
  const std::size_t n = static_cast<std::size_t>(e.rows * e.cols);
  if (e.dtype == DType::kF32) {
    std::vector<float> tmp(n);
    std::memcpy(tmp.data(), e.bytes.data(), n * 4);
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = static_cast<Scalar>(tmp[i]);
  } else {
    std::vector<double> tmp(n);
    std::memcpy(tmp.data(), e.bytes.data(), n * 8);
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = static_cast<Scalar>(tmp[i]);
  }
  return out;
}

struct LoadOptions {
  /// Leave training-only parameters of the target untouched.
  bool skip_training_only = false;
  /// Throw if a target parameter has no entry in the checkpoint.
  bool require_all = true;
};

/// Copies checkpoint values into `params` by name. Shape disagreements are
/// collected and reported together.
template <typename Scalar>
void load_parameters(const Checkpoint& ckpt, ParamList<Scalar>& params, LoadOptions options = {}) {
  std::vector<std::string> bad, missing;
  for (auto& p : params) {
    if (options.skip_training_only && p.training_only) continue;
    const TensorEntry* e = ckpt.find(p.name);
    if (e == nullptr) {
      missing.push_back(p.name);
      continue;
    }
    if (e->rows != p.tensor.rows() || e->cols != p.tensor.cols()) {
      bad.push_back(p.name + " " + shape_string(e->rows, e->cols) + " vs " +
                    shape_string(p.tensor.rows(), p.tensor.cols()));
      continue;
    }
  }
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
  };
  if (!bad.empty()) throw ShapeError("checkpoint shape mismatch: " + join(bad));
  if (options.require_all && !missing.empty()) throw FormatError("checkpoint is missing parameters: " + join(missing));
  for (auto& p : params) {
    if (options.skip_training_only && p.training_only) continue;
    if (const TensorEntry* e = ckpt.find(p.name)) p.tensor.mutable_value() = entry_values<Scalar>(*e);
  }
}

}  // namespace sit
