#include "kayra/image_io.hpp"

#include <fstream>
#include <iterator>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "kayra/error.hpp"

namespace kayra::io {

ImageFormat sniff_format(const std::vector<std::uint8_t>& b) {
    auto starts = [&](std::initializer_list<std::uint8_t> magic) {
        return b.size() >= magic.size() && std::equal(magic.begin(), magic.end(), b.begin());
    };
    if (starts({'I', 'I', 42, 0}) || starts({'M', 'M', 0, 42})) return ImageFormat::Tiff;
    if (starts({0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A})) return ImageFormat::Png;
    if (starts({'B', 'M'})) return ImageFormat::Bmp;
    throw Error(ErrorCode::UnsupportedFormat, "expected TIFF, PNG or BMP");
}

Raster decode_image(const std::vector<std::uint8_t>& bytes) {
    sniff_format(bytes);
    cv::Mat img;
    try {
        img = cv::imdecode(bytes, cv::IMREAD_UNCHANGED);
    } catch (const cv::Exception& e) {
        throw Error(ErrorCode::CorruptImage, e.what());
    }
    if (img.empty()) throw Error(ErrorCode::CorruptImage, "decoder rejected the data");
    if (img.channels() == 3) cv::cvtColor(img, img, cv::COLOR_BGR2GRAY);
    else if (img.channels() == 4) cv::cvtColor(img, img, cv::COLOR_BGRA2GRAY);
    else if (img.channels() != 1) throw Error(ErrorCode::UnsupportedFormat, "unsupported channel count");
    if (img.depth() == CV_16U) img.convertTo(img, CV_8U, 1.0 / 257.0);
    else if (img.depth() != CV_8U) throw Error(ErrorCode::UnsupportedFormat, "unsupported bit depth");
    Raster r(img.cols, img.rows);
    for (int y = 0; y < img.rows; ++y) {
        const auto* row = img.ptr<std::uint8_t>(y);
        std::copy(row, row + img.cols, r.pixels().begin() + static_cast<std::ptrdiff_t>(y) * img.cols);
    }
    return r;
}

namespace {

std::vector<std::uint8_t> encode(const Raster& r, const std::string& ext) {
    const cv::Mat m(r.height(), r.width(), CV_8UC1, const_cast<std::uint8_t*>(r.pixels().data()));
    std::vector<std::uint8_t> out;
    if (!cv::imencode(ext, m, out)) throw Error(ErrorCode::IoError, "cannot encode " + ext);
    return out;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Raster& r) { return encode(r, ".png"); }

std::vector<std::uint8_t> encode_tiff(const Raster& r) { return encode(r, ".tif"); }

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path);
}

Raster read_image(const std::string& path) { return decode_image(read_file(path)); }

void write_png(const std::string& path, const Raster& r) { write_file(path, encode_png(r)); }

}  // namespace kayra::io
