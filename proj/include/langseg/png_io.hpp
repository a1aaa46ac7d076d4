#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "langseg/dense_map.hpp"

namespace langseg {

using PngText = std::map<std::string, std::string>;

/// 8-bit RGB. Values are clamped to [0, 1] and rounded to k/255.
std::vector<unsigned char> encode_png_rgb(const DenseMapf& image);
/// Any 8/16-bit PNG colour type is converted to RGB in [0, 1] (k/255);
/// alpha is dropped. Throws FormatError on undecodable input.
DenseMapf decode_png_rgb(std::span<const unsigned char> bytes);

/// 8-bit grayscale of label indices (0..255) with optional tEXt chunks.
std::vector<unsigned char> encode_png_labels(const LabelMap& labels, const PngText& text = {});
LabelMap decode_png_labels(std::span<const unsigned char> bytes, PngText* text = nullptr);

/// Quantises to the 8-bit grid used by PNG so that save/load is lossless.
inline float quantize_unit(float v) {
  v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return static_cast<float>(static_cast<int>(v * 255.f + 0.5f)) / 255.f;
}

}  // namespace langseg
