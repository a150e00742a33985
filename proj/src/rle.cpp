#include "kayra/rle.hpp"

#include <algorithm>

#include <openssl/evp.h>

namespace kayra::rle {

std::vector<std::uint32_t> encode(const BinaryMask& mask) {
    std::vector<std::uint32_t> counts;
    std::uint8_t current = 0;
    std::uint32_t run = 0;
    for (auto b : mask.bits()) {
        if (b != current) {
            counts.push_back(run);
            run = 0;
            current = b;
        }
        ++run;
    }
    counts.push_back(run);
    return counts;
}

BinaryMask decode(int width, int height, const std::vector<std::uint32_t>& counts) {
    BinaryMask mask(width, height);
    auto bits = mask.bits();
    std::size_t pos = 0;
    std::uint8_t value = 0;
    for (auto c : counts) {
        if (pos + c > bits.size()) throw Error(ErrorCode::ProtocolError, "RLE runs exceed mask size");
        std::fill_n(bits.begin() + static_cast<std::ptrdiff_t>(pos), c, value);
        pos += c;
        value ^= 1;
    }
    if (pos != bits.size()) throw Error(ErrorCode::ProtocolError, "RLE runs do not cover the mask");
    return mask;
}

nlohmann::json mask_to_json(const BinaryMask& mask) {
    return {{"width", mask.width()}, {"height", mask.height()}, {"counts", encode(mask)}};
}

BinaryMask mask_from_json(const nlohmann::json& j) {
    return decode(j.at("width").get<int>(), j.at("height").get<int>(),
                  j.at("counts").get<std::vector<std::uint32_t>>());
}

nlohmann::json region_to_json(const Region& r) {
    return {{"bbox", {r.bbox.x0, r.bbox.y0, r.bbox.w, r.bbox.h}}, {"rle", mask_to_json(r.mask)}};
}

Region region_from_json(const nlohmann::json& j) {
    const auto& b = j.at("bbox");
    Region r{{b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()},
             mask_from_json(j.at("rle"))};
    if (r.mask.width() != r.bbox.w || r.mask.height() != r.bbox.h) {
        throw Error(ErrorCode::ProtocolError, "region mask does not match its bbox");
    }
    return r;
}

std::vector<std::pair<std::uint8_t, std::uint32_t>> encode_values(const std::vector<std::uint8_t>& values) {
    std::vector<std::pair<std::uint8_t, std::uint32_t>> runs;
    for (auto v : values) {
        if (runs.empty() || runs.back().first != v) {
            runs.emplace_back(v, 0);
        }
        ++runs.back().second;
    }
    return runs;
}

std::vector<std::uint8_t> decode_values(const std::vector<std::pair<std::uint8_t, std::uint32_t>>& runs,
                                        std::size_t expected_size) {
    std::vector<std::uint8_t> out;
    out.reserve(expected_size);
    for (const auto& [v, n] : runs) {
        if (out.size() + n > expected_size) throw Error(ErrorCode::ProtocolError, "value runs exceed mask size");
        out.insert(out.end(), n, v);
    }
    if (out.size() != expected_size) throw Error(ErrorCode::ProtocolError, "value runs do not cover the mask");
    return out;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) throw Error(ErrorCode::ProtocolError, "base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out(text.size() / 4 * 3);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) throw Error(ErrorCode::ProtocolError, "invalid base64 payload");
    // EVP_DecodeBlock keeps the zero bytes produced by '=' padding.
    std::size_t len = static_cast<std::size_t>(n);
    if (!text.empty() && text.back() == '=') --len;
    if (text.size() > 1 && text[text.size() - 2] == '=') --len;
    out.resize(len);
    return out;
}

nlohmann::json raster_to_json(const Raster& image) {
    return {{"width", image.width()}, {"height", image.height()}, {"data", base64_encode(image.pixels())}};
}

Raster raster_from_json(const nlohmann::json& j) {
    const int w = j.at("width").get<int>();
    const int h = j.at("height").get<int>();
    auto bytes = base64_decode(j.at("data").get<std::string>());
    if (bytes.size() != static_cast<std::size_t>(w) * static_cast<std::size_t>(h)) {
        throw Error(ErrorCode::ProtocolError, "raster payload size mismatch");
    }
    return Raster(w, h, std::move(bytes));
}

}  // namespace kayra::rle
