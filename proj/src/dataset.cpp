#include "sit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "sit/io.hpp"
#include "sit/rng.hpp"

namespace sit {

void Dataset::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw FormatError("dataset: zero image dimension");
  if (classes == 0) throw FormatError("dataset: zero classes");
  if (pixels.size() != size() * image_bytes())
    throw FormatError("dataset: pixel buffer holds " + std::to_string(pixels.size()) + " bytes, expected " +
                      std::to_string(size() * image_bytes()));
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= classes)
      throw FormatError("dataset: label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                        " is not below classes=" + std::to_string(classes));
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  ds.validate();
  ByteWriter w;
  w.bytes().reserve(ds.file_bytes());
  for (char c : {'S', 'I', 'T', 'D'}) w.put<std::uint8_t>(static_cast<std::uint8_t>(c));
  w.put<std::uint32_t>(Dataset::kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.size()));
  w.put<std::uint16_t>(ds.height);
  w.put<std::uint16_t>(ds.width);
  w.put<std::uint8_t>(ds.channels);
  w.put<std::uint16_t>(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.put_bytes(ds.image(i));
    w.put<std::uint16_t>(ds.labels[i]);
  }
  return std::move(w.bytes());
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), "SITD")) throw FormatError("dataset: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != Dataset::kVersion) throw FormatError("dataset: unsupported version " + std::to_string(version));
  Dataset ds;
  const auto count = r.get<std::uint32_t>();
  ds.height = r.get<std::uint16_t>();
  ds.width = r.get<std::uint16_t>();
  ds.channels = r.get<std::uint8_t>();
  ds.classes = r.get<std::uint16_t>();
  if (bytes.size() != Dataset::kHeaderBytes + static_cast<std::size_t>(count) * (ds.image_bytes() + 2))
    throw FormatError("dataset: file length " + std::to_string(bytes.size()) + " does not match header (" +
                      std::to_string(count) + " samples)");
  ds.pixels.reserve(count * ds.image_bytes());
  ds.labels.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto img = r.take(ds.image_bytes());
    ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
    ds.labels.push_back(r.get<std::uint16_t>());
  }
  ds.validate();
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) { write_file_atomic(path, encode_dataset(ds)); }

Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

Dataset gen_synth(const SynthSpec& spec) {
  if (spec.classes < 1 || spec.classes > 65535) throw FormatError("gen_synth: classes out of range");
  if (spec.samples_per_class < 0 || spec.size < 8 || spec.size > 65535 || spec.channels < 1 || spec.channels > 255)
    throw FormatError("gen_synth: invalid size parameters");
  Dataset ds;
  ds.height = static_cast<std::uint16_t>(spec.size);
  ds.width = static_cast<std::uint16_t>(spec.size);
  ds.channels = static_cast<std::uint8_t>(spec.channels);
  ds.classes = static_cast<std::uint16_t>(spec.classes);
  const std::size_t count = static_cast<std::size_t>(spec.classes) * spec.samples_per_class;
  ds.pixels.resize(count * ds.image_bytes());
  ds.labels.resize(count);

  // Orientations are spread over half a turn; classes sharing an
  // orientation differ in spatial frequency.
  const int orientations = std::max(1, (spec.classes + 1) / 2);
  Rng rng(spec.seed);
  const int size = spec.size;
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
    ds.labels[i] = static_cast<std::uint16_t>(label);
    const double theta = std::numbers::pi * (label % orientations) / orientations + rng.uniform(-0.08, 0.08);
    const double freq = (label / orientations == 0 ? 0.14 : 0.28) * rng.uniform(0.92, 1.08);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const int side = static_cast<int>(std::lround(rng.uniform(0.45, 0.7) * size));
    const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(size - side + 1)));
    const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(size - side + 1)));
    const double contrast = rng.uniform(60.0, 100.0);
    const double background = rng.uniform(96.0, 160.0);
    const double c = std::cos(theta), s = std::sin(theta);
    auto* img = ds.pixels.data() + i * ds.image_bytes();
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const bool inside = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
        const double wave = std::sin(2.0 * std::numbers::pi * freq * (x * c + y * s) + phase);
        for (int ch = 0; ch < spec.channels; ++ch) {
          double v = background + (inside ? contrast * wave : 0.0) + spec.noise * rng.normal();
          img[(static_cast<std::size_t>(y) * size + x) * spec.channels + ch] =
              static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
  }
  return ds;
}

}  // namespace sit
