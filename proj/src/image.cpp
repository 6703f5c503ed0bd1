#include "subjectopt/image.hpp"

#include "subjectopt/errors.hpp"

#include <algorithm>
#include <cmath>

namespace subjectopt {

Image::Image(int h, int w, double fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {
    if (h < 0 || w < 0) throw ConfigError("image dimensions must be non-negative");
}

Box Box::dilated(int radius, int max_w, int max_h) const {
    return {std::max(0, x0 - radius), std::max(0, y0 - radius), std::min(max_w, x1 + radius),
            std::min(max_h, y1 + radius)};
}

Mask::Mask(int h, int w, bool fill) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

Mask Mask::from_box(int h, int w, const Box& box) {
    Mask m(h, w);
    for (int y = std::max(0, box.y0); y < std::min(h, box.y1); ++y)
        for (int x = std::max(0, box.x0); x < std::min(w, box.x1); ++x) m.set(y, x, true);
    return m;
}

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
}

Mask invert_mask(const Mask& m) {
    Mask out = m;
    for (auto& b : out.bits) b = b ? 0 : 1;
    return out;
}

namespace {
void require_same(const Mask& a, const Mask& b) {
    if (a.height != b.height || a.width != b.width) throw ConfigError("mask shapes differ");
}
} // namespace

Mask mask_union(const Mask& a, const Mask& b) {
    require_same(a, b);
    Mask out = a;
    for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = (a.bits[i] || b.bits[i]) ? 1 : 0;
    return out;
}

Mask mask_intersection(const Mask& a, const Mask& b) {
    require_same(a, b);
    Mask out = a;
    for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = (a.bits[i] && b.bits[i]) ? 1 : 0;
    return out;
}

Mask dilate_mask(const Mask& m, int radius) {
    if (radius <= 0) return m;
    // Separable: horizontal pass then vertical pass.
    Mask horizontal(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            bool any = false;
            for (int dx = -radius; dx <= radius && !any; ++dx) {
                const int xx = x + dx;
                any = xx >= 0 && xx < m.width && m.at(y, xx);
            }
            horizontal.set(y, x, any);
        }
    Mask out(m.height, m.width);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            bool any = false;
            for (int dy = -radius; dy <= radius && !any; ++dy) {
                const int yy = y + dy;
                any = yy >= 0 && yy < m.height && horizontal.at(yy, x);
            }
            out.set(y, x, any);
        }
    return out;
}

Box bounding_box(const Mask& m) {
    Box box{m.width, m.height, 0, 0};
    bool found = false;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(y, x)) {
                found = true;
                box.x0 = std::min(box.x0, x);
                box.y0 = std::min(box.y0, y);
                box.x1 = std::max(box.x1, x + 1);
                box.y1 = std::max(box.y1, y + 1);
            }
    return found ? box : Box{};
}

Image clamp01(const Image& img) {
    Image out = img;
    for (auto& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
    return out;
}

namespace {

struct Tap {
    int lo;
    int hi;
    double w_hi; // weight of hi; lo gets 1 - w_hi
};

Tap source_tap(int dst, int in_size, int out_size) {
    const double scale = static_cast<double>(in_size) / out_size;
    double src = (dst + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in_size - 1);
    return {lo, hi, src - lo};
}

} // namespace

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw ConfigError("resize target must be positive");
    if (img.height == out_h && img.width == out_w) return img;
    Image out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        const Tap ty = source_tap(y, img.height, out_h);
        for (int x = 0; x < out_w; ++x) {
            const Tap tx = source_tap(x, img.width, out_w);
            for (int c = 0; c < 3; ++c) {
                const double top = img.at(ty.lo, tx.lo, c) * (1 - tx.w_hi) + img.at(ty.lo, tx.hi, c) * tx.w_hi;
                const double bottom = img.at(ty.hi, tx.lo, c) * (1 - tx.w_hi) + img.at(ty.hi, tx.hi, c) * tx.w_hi;
                out.at(y, x, c) = top * (1 - ty.w_hi) + bottom * ty.w_hi;
            }
        }
    }
    return out;
}

Image resize_bilinear_vjp(const Image& grad_out, int in_h, int in_w) {
    if (grad_out.height == in_h && grad_out.width == in_w) return grad_out;
    Image grad_in(in_h, in_w);
    for (int y = 0; y < grad_out.height; ++y) {
        const Tap ty = source_tap(y, in_h, grad_out.height);
        for (int x = 0; x < grad_out.width; ++x) {
            const Tap tx = source_tap(x, in_w, grad_out.width);
            for (int c = 0; c < 3; ++c) {
                const double g = grad_out.at(y, x, c);
                grad_in.at(ty.lo, tx.lo, c) += g * (1 - ty.w_hi) * (1 - tx.w_hi);
                grad_in.at(ty.lo, tx.hi, c) += g * (1 - ty.w_hi) * tx.w_hi;
                grad_in.at(ty.hi, tx.lo, c) += g * ty.w_hi * (1 - tx.w_hi);
                grad_in.at(ty.hi, tx.hi, c) += g * ty.w_hi * tx.w_hi;
            }
        }
    }
    return grad_in;
}

Image crop(const Image& img, const Box& box) {
    const Box b{std::max(0, box.x0), std::max(0, box.y0), std::min(img.width, box.x1), std::min(img.height, box.y1)};
    if (b.width() <= 0 || b.height() <= 0) throw ConfigError("crop box is empty or outside the image");
    Image out(b.height(), b.width());
    for (int y = 0; y < b.height(); ++y)
        for (int x = 0; x < b.width(); ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(b.y0 + y, b.x0 + x, c);
    return out;
}

double mean_squared_error(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ConfigError("mean_squared_error: image shapes differ");
    if (a.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = a.pixels[i] - b.pixels[i];
        sum += d * d;
    }
    return sum / static_cast<double>(a.pixels.size());
}

Image zero_masked(const Image& img, const Mask& subject) {
    if (img.height != subject.height || img.width != subject.width)
        throw ConfigError("zero_masked: mask and image shapes differ");
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (subject.at(y, x))
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = 0.0;
    return out;
}

} // namespace subjectopt
