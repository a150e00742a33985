#pragma once

// Image decoding and encoding. Input is normalized to 8-bit grayscale.

#include <cstdint>
#include <string>
#include <vector>

#include "kayra/imaging.hpp"

namespace kayra::io {

enum class ImageFormat { Tiff, Png, Bmp };

/// Sniffs the magic bytes; throws UnsupportedFormat for anything else.
ImageFormat sniff_format(const std::vector<std::uint8_t>& bytes);

/// TIFF, PNG or BMP to 8-bit grayscale (luminance for colour input, top byte
/// for 16-bit input). Throws UnsupportedFormat or CorruptImage.
Raster decode_image(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> encode_png(const Raster& r);
std::vector<std::uint8_t> encode_tiff(const Raster& r);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

Raster read_image(const std::string& path);
void write_png(const std::string& path, const Raster& r);

}  // namespace kayra::io
