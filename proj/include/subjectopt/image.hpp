#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace subjectopt {

using RowMatrixX3d = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// RGB image, row-major HWC layout, values nominally in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(int h, int w, double fill = 0.0);

    static constexpr int channels = 3;

    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
    std::size_t size() const { return pixels.size(); }
    bool empty() const { return pixels.empty(); }

    double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    // One row per pixel, one column per channel.
    Eigen::Map<RowMatrixX3d> tokens() { return {pixels.data(), static_cast<Eigen::Index>(pixel_count()), 3}; }
    Eigen::Map<const RowMatrixX3d> tokens() const {
        return {pixels.data(), static_cast<Eigen::Index>(pixel_count()), 3};
    }

    bool same_shape(const Image& other) const { return height == other.height && width == other.width; }

    friend bool operator==(const Image&, const Image&) = default;
};

struct Box {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0; // exclusive
    int y1 = 0; // exclusive

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    Box dilated(int radius, int max_w, int max_h) const;

    friend bool operator==(const Box&, const Box&) = default;
};

/// Boolean pixel mask; nonzero = set.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    Mask() = default;
    Mask(int h, int w, bool fill = false);

    static Mask from_box(int h, int w, const Box& box);

    bool at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int y, int x, bool v) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
    std::size_t count() const;
    std::size_t size() const { return bits.size(); }

    friend bool operator==(const Mask&, const Mask&) = default;
};

Mask invert_mask(const Mask& m);
Mask mask_union(const Mask& a, const Mask& b);
Mask mask_intersection(const Mask& a, const Mask& b);
// Square (Chebyshev) dilation.
Mask dilate_mask(const Mask& m, int radius);
// Tight bounding box of set pixels; empty box if none.
Box bounding_box(const Mask& m);

Image clamp01(const Image& img);

// Bilinear resize with half-pixel centers and edge clamping; identity when
// the size is unchanged.
Image resize_bilinear(const Image& img, int out_h, int out_w);
// Vector-Jacobian product of resize_bilinear: maps a gradient on the resized
// image back onto an in_h x in_w input.
Image resize_bilinear_vjp(const Image& grad_out, int in_h, int in_w);

Image crop(const Image& img, const Box& box);

double mean_squared_error(const Image& a, const Image& b);

// Subject pixels set to zero; used to exclude the subject from comparisons.
Image zero_masked(const Image& img, const Mask& subject);

} // namespace subjectopt
