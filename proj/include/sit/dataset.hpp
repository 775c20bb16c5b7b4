#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace sit {

/// In-memory image classification set. Pixels are u8, H x W x channels per
/// sample with interleaved channels.
///
/// On disk (all little-endian):
///   "SITD" | version u32 | count u32 | height u16 | width u16 | channels u8 |
///   classes u16 | count x (pixels[H*W*channels] u8, label u16)
struct Dataset {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kHeaderBytes = 19;

  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint8_t channels = 1;
  std::uint16_t classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint16_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return static_cast<std::size_t>(height) * width * channels; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span(pixels).subspan(i * image_bytes(), image_bytes());
  }
  std::uint16_t label(std::size_t i) const { return labels[i]; }
  std::size_t file_bytes() const { return kHeaderBytes + size() * (image_bytes() + 2); }

  /// Throws FormatError on inconsistent sizes or out-of-range labels.
  void validate() const;
};

std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

struct SynthSpec {
  int classes = 10;
  int samples_per_class = 500;
  int size = 32;
  int channels = 1;
  std::uint64_t seed = 0;
  /// Std-dev of additive pixel noise in u8 units.
  double noise = 48.0;
};

/// Class-conditional textures: each class is a grating with its own
/// orientation and frequency, drawn inside a randomly placed square "object"
/// over a noisy background. Samples cycle through the classes in order.
Dataset gen_synth(const SynthSpec& spec);

}  // namespace sit
