#include "test_support.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/png_io.hpp"

#include <doctest.h>

using namespace subjectopt;
using namespace testing;

TEST_SUITE("image") {

TEST_CASE("resize to the same size is the identity") {
    const Image img = random_image(7, 5, 1);
    CHECK(resize_bilinear(img, 7, 5) == img);
}

TEST_CASE("resize of a constant image stays constant") {
    const Image img(6, 6, 0.3);
    const Image r = resize_bilinear(img, 11, 3);
    for (double p : r.pixels) CHECK(p == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("resize vjp is the adjoint of resize") {
    // <R x, g> == <x, R^T g> for random x, g.
    const Image x = random_image(9, 7, 2);
    const Image g = random_image(4, 13, 3);
    const Image rx = resize_bilinear(x, 4, 13);
    const Image rtg = resize_bilinear_vjp(g, 9, 7);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < rx.pixels.size(); ++i) lhs += rx.pixels[i] * g.pixels[i];
    for (std::size_t i = 0; i < x.pixels.size(); ++i) rhs += x.pixels[i] * rtg.pixels[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("mask inversion") {
    SUBCASE("all true becomes all false") {
        const Mask m(4, 4, true);
        CHECK(invert_mask(m).count() == 0);
    }
    SUBCASE("checkerboard becomes the complementary checkerboard") {
        Mask m(5, 6);
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 6; ++x) m.set(y, x, (x + y) % 2 == 0);
        const Mask inv = invert_mask(m);
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 6; ++x) CHECK(inv.at(y, x) == ((x + y) % 2 == 1));
    }
    SUBCASE("double inversion is the identity") {
        for (std::uint64_t s = 0; s < 20; ++s) {
            const Mask m = random_mask(9, 11, s);
            CHECK(invert_mask(invert_mask(m)) == m);
        }
    }
}

TEST_CASE("mask complementarity on random masks") {
    for (std::uint64_t s = 0; s < 200; ++s) {
        const Mask m = random_mask(8 + static_cast<int>(s % 5), 10, s, 0.1 + 0.004 * static_cast<double>(s));
        const Mask inv = invert_mask(m);
        CHECK(mask_intersection(m, inv).count() == 0);
        CHECK(mask_union(m, inv).count() == m.size());
    }
}

TEST_CASE("box mask and bounding box") {
    const Box b{2, 3, 7, 5};
    const Mask m = Mask::from_box(8, 10, b);
    CHECK(m.count() == 10u);
    CHECK(bounding_box(m) == b);
    CHECK(bounding_box(Mask(4, 4)).width() <= 0);
}

TEST_CASE("dilation grows a pixel into a square clipped at the border") {
    Mask m(9, 9);
    m.set(4, 4, true);
    CHECK(dilate_mask(m, 3).count() == 49u);
    Mask corner(9, 9);
    corner.set(0, 0, true);
    CHECK(dilate_mask(corner, 3).count() == 16u);
    CHECK(dilate_mask(m, 0) == m);
}

TEST_CASE("box dilation clips to the image") {
    const Box b{1, 1, 3, 3};
    const Box d = b.dilated(3, 10, 8);
    CHECK(d == Box{0, 0, 6, 6});
}

TEST_CASE("zero_masked clears subject pixels only") {
    const Image img = random_image(4, 4, 9);
    Mask m(4, 4);
    m.set(1, 2, true);
    const Image z = zero_masked(img, m);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c) CHECK(z.at(y, x, c) == (m.at(y, x) ? 0.0 : img.at(y, x, c)));
}

TEST_CASE("crop extracts the box") {
    const Image img = random_image(6, 6, 4);
    const Image c = crop(img, {1, 2, 4, 5});
    REQUIRE(c.height == 3);
    REQUIRE(c.width == 3);
    CHECK(c.at(0, 0, 1) == img.at(2, 1, 1));
    CHECK(c.at(2, 2, 2) == img.at(4, 3, 2));
}

TEST_CASE("PNG round trip is exact for 8-bit values") {
    Image img(5, 7);
    Rng rng(3);
    for (auto& p : img.pixels) p = static_cast<double>(rng.index(256)) / 255.0;
    const auto dir = temp_dir("png");
    write_png(dir / "a.png", img);
    const Image back = read_png(dir / "a.png");
    REQUIRE(back.same_shape(img));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(back.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(1e-12));
    CHECK(decode_png(encode_png(img)) == back);
}

TEST_CASE("mask PNG round trip") {
    const Mask m = random_mask(6, 9, 5);
    const auto dir = temp_dir("mask");
    write_mask_png(dir / "m.png", m);
    CHECK(read_mask_png(dir / "m.png") == m);
}

TEST_CASE("reading a missing PNG raises IoError") {
    CHECK_THROWS_AS(read_png("/nonexistent/file.png"), IoError);
}

TEST_CASE("masked MSE of mismatched images is an error") {
    CHECK_THROWS(mean_squared_error(Image(2, 2), Image(3, 2)));
}

}
