#include "sit/checkpoint.hpp"

#include <algorithm>

namespace sit {

const TensorEntry* Checkpoint::find(const std::string& name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(), [&](const TensorEntry& e) { return e.name == name; });
  return it == tensors.end() ? nullptr : &*it;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format"] = "sit-checkpoint";
  manifest["version"] = Checkpoint::kVersion;
  manifest["model"] = ckpt.config;
  manifest["metadata"] = ckpt.metadata;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : ckpt.tensors) {
    if (e.bytes.size() != static_cast<std::size_t>(e.rows * e.cols) * dtype_bytes(e.dtype))
      throw FormatError("checkpoint: tensor '" + e.name + "' has inconsistent byte size");
    manifest["tensors"].push_back({{"name", e.name},
                                   {"shape", {e.rows, e.cols}},
                                   {"dtype", e.dtype == DType::kF32 ? "f32" : "f64"},
                                   {"offset", offset},
                                   {"bytes", e.bytes.size()},
                                   {"training_only", e.training_only},
                                   {"crc32", crc32_of(e.bytes)}});
    offset += e.bytes.size();
  }
  const std::string text = manifest.dump(1);
  ByteWriter w;
  for (char c : {'S', 'I', 'T', 'C'}) w.put<std::uint8_t>(static_cast<std::uint8_t>(c));
  w.put<std::uint32_t>(Checkpoint::kVersion);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  for (const auto& e : ckpt.tensors) w.put_bytes(e.bytes);
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), "SITC")) throw FormatError("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto manifest_len = r.get<std::uint64_t>();
  if (manifest_len > r.remaining()) throw FormatError("checkpoint: truncated manifest");
  const auto text = r.take(static_cast<std::size_t>(manifest_len));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("checkpoint: bad manifest: ") + ex.what());
  }
  const auto blob = r.take(r.remaining());
  Checkpoint c;
  c.config = manifest.at("model").get<ModelConfig>();
  c.metadata = manifest.value("metadata", nlohmann::json::object());
  for (const auto& t : manifest.at("tensors")) {
    TensorEntry e;
    e.name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
    if (shape.size() != 2) throw FormatError("checkpoint: tensor '" + e.name + "' must be rank 2");
    e.rows = shape[0];
    e.cols = shape[1];
    const auto dtype = t.at("dtype").get<std::string>();
    if (dtype == "f32") {
      e.dtype = DType::kF32;
    } else if (dtype == "f64") {
      e.dtype = DType::kF64;
    } else {
      throw FormatError("checkpoint: tensor '" + e.name + "' has unknown dtype " + dtype);
    }
    e.training_only = t.value("training_only", false);
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto size = t.at("bytes").get<std::uint64_t>();
    if (size != static_cast<std::uint64_t>(e.rows * e.cols) * dtype_bytes(e.dtype) || offset + size > blob.size())
      throw FormatError("checkpoint: tensor '" + e.name + "' lies outside the blob");
    const auto data = blob.subspan(static_cast<std::size_t>(offset), static_cast<std::size_t>(size));
    if (crc32_of(data) != t.at("crc32").get<std::uint32_t>())
      throw FormatError("checkpoint: checksum mismatch for tensor '" + e.name + "'");
    e.bytes.assign(data.begin(), data.end());
    c.tensors.push_back(std::move(e));
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace sit
