#include "subjectopt/png_io.hpp"

#include "subjectopt/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace subjectopt {

namespace {

struct ReadCursor {
    const std::vector<unsigned char>* bytes;
    std::size_t offset;
};

void read_from_buffer(png_structp png, png_bytep out, png_size_t length) {
    auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (cursor->offset + length > cursor->bytes->size()) png_error(png, "truncated PNG");
    std::memcpy(out, cursor->bytes->data() + cursor->offset, length);
    cursor->offset += length;
}

void write_to_buffer(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + length);
}

void flush_noop(png_structp) {}

struct DecodedRaster {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<unsigned char> data;
};

DecodedRaster decode_raster(const std::vector<unsigned char>& bytes, bool want_gray) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError("not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    DecodedRaster raster;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode PNG");
    }
    ReadCursor cursor{&bytes, 0};
    png_set_read_fn(png, &cursor, read_from_buffer);
    png_read_info(png, info);

    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (want_gray) {
        if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE)
            png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    } else if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_gray_to_rgb(png);
    }
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    raster.width = static_cast<int>(png_get_image_width(png, info));
    raster.height = static_cast<int>(png_get_image_height(png, info));
    raster.channels = png_get_channels(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    raster.data.resize(stride * raster.height);
    std::vector<png_bytep> rows(raster.height);
    for (int y = 0; y < raster.height; ++y) rows[y] = raster.data.data() + y * stride;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return raster;
}

std::vector<unsigned char> encode_raster(const unsigned char* data, int width, int height, int channels) {
    std::vector<unsigned char> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode PNG");
    }
    png_set_write_fn(png, &out, write_to_buffer, flush_noop);
    png_set_IHDR(png, info, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * width * channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

unsigned char quantize(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

} // namespace

Image decode_png(const std::vector<unsigned char>& bytes) {
    const DecodedRaster raster = decode_raster(bytes, false);
    Image img(raster.height, raster.width);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = raster.data[i] / 255.0;
    return img;
}

std::vector<unsigned char> encode_png(const Image& img) {
    std::vector<unsigned char> raw(img.pixels.size());
    std::transform(img.pixels.begin(), img.pixels.end(), raw.begin(), quantize);
    return encode_raster(raw.data(), img.width, img.height, 3);
}

Image read_png(const std::filesystem::path& path) {
    try {
        return decode_png(read_file(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

void write_png(const std::filesystem::path& path, const Image& img) { write_file(path, encode_png(img)); }

Mask read_mask_png(const std::filesystem::path& path) {
    const DecodedRaster raster = decode_raster(read_file(path), true);
    Mask mask(raster.height, raster.width);
    for (std::size_t i = 0; i < mask.bits.size(); ++i) mask.bits[i] = raster.data[i] != 0 ? 1 : 0;
    return mask;
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
    std::vector<unsigned char> raw(mask.bits.size());
    std::transform(mask.bits.begin(), mask.bits.end(), raw.begin(), [](auto b) { return b ? 255 : 0; });
    write_file(path, encode_raster(raw.data(), mask.width, mask.height, 1));
}

} // namespace subjectopt
