#pragma once

#include "subjectopt/image.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace subjectopt {

// 8-bit RGB PNG. Grayscale and alpha inputs are converted to RGB on read.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);
std::vector<unsigned char> encode_png(const Image& img);
Image decode_png(const std::vector<unsigned char>& bytes);

// Single-channel mask PNG: nonzero = subject.
Mask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const Mask& mask);

} // namespace subjectopt
