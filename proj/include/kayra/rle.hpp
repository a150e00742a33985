#pragma once

// Run-length codecs for masks on the wire and in sidecars. Binary masks use
// alternating run lengths in row-major order starting with a (possibly empty)
// run of zeros; semantic masks use explicit (value, length) pairs.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "kayra/imaging.hpp"

namespace kayra::rle {

std::vector<std::uint32_t> encode(const BinaryMask& mask);
BinaryMask decode(int width, int height, const std::vector<std::uint32_t>& counts);

nlohmann::json mask_to_json(const BinaryMask& mask);
BinaryMask mask_from_json(const nlohmann::json& j);

/// {"bbox": [x, y, w, h], "rle": {...}} with the mask covering the bbox only.
nlohmann::json region_to_json(const Region& r);
Region region_from_json(const nlohmann::json& j);

std::vector<std::pair<std::uint8_t, std::uint32_t>> encode_values(const std::vector<std::uint8_t>& values);
std::vector<std::uint8_t> decode_values(const std::vector<std::pair<std::uint8_t, std::uint32_t>>& runs,
                                        std::size_t expected_size);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

nlohmann::json raster_to_json(const Raster& image);
Raster raster_from_json(const nlohmann::json& j);

}  // namespace kayra::rle
