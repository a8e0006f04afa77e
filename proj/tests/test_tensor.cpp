#include <doctest.h>

#include "roteq/rng.hpp"
#include "roteq/tensor.hpp"

using namespace roteq;

namespace {

Tensor4<double> random_tensor(Rng& rng, int n, int c, int h, int w) {
    Tensor4<double> t(n, c, h, w);
    for (double& v : t.data) v = rng.normal();
    return t;
}

double dot(const Tensor4<double>& a, const Tensor4<double>& b) {
    double s = 0.0;
    for (size_t k = 0; k < a.data.size(); ++k) s += a.data[k] * b.data[k];
    return s;
}

} // namespace

TEST_CASE("conv2d with a centered delta kernel is the identity") {
    Rng rng(7);
    const Tensor4<double> x = random_tensor(rng, 1, 2, 5, 5);
    Tensor4<double> w(2, 2, 3, 3);
    w.at(0, 0, 1, 1) = 1.0;
    w.at(1, 1, 1, 1) = 1.0;
    const Tensor4<double> y = conv2d_ref(x, w, std::vector<double>{0.0, 0.0}, 1);
    for (int j = 0; j < 2; ++j)
        for (int yy = 0; yy < 5; ++yy)
            for (int xx = 0; xx < 5; ++xx)
                CHECK(y.at(0, j, yy, xx) == doctest::Approx(x.at(0, j, yy, xx)).epsilon(1e-12));
}

TEST_CASE("conv2d matches a hand-computed 2x2 fixture") {
    Tensor4<double> x(1, 1, 2, 2);
    x.at(0, 0, 0, 0) = 1;
    x.at(0, 0, 0, 1) = 2;
    x.at(0, 0, 1, 0) = 3;
    x.at(0, 0, 1, 1) = 4;
    Tensor4<double> w(1, 1, 3, 3);
    for (int k = 0; k < 9; ++k) w.data[size_t(k)] = k + 1;
    const Tensor4<double> y = conv2d_ref(x, w, std::vector<double>{0.5}, 1);
    // cross-correlation: y(0,0) = 5*1 + 6*2 + 8*3 + 9*4 + bias
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(5 + 12 + 24 + 36 + 0.5));
    CHECK(y.at(0, 0, 1, 1) == doctest::Approx(1 * 1 + 2 * 2 + 4 * 3 + 5 * 4 + 0.5));
}

TEST_CASE("conv2d backward is the adjoint in its input argument") {
    Rng rng(11);
    const Tensor4<double> x = random_tensor(rng, 2, 3, 6, 6);
    const Tensor4<double> w = random_tensor(rng, 4, 3, 3, 3);
    const std::vector<double> b(4, 0.0);
    const Tensor4<double> y = conv2d_ref(x, w, b, 1);
    const Tensor4<double> gy = [&] {
        Rng r2(12);
        return random_tensor(r2, y.n, y.c, y.h, y.w);
    }();
    const Conv2dGrads<double> g = conv2d_backward(x, w, 1, gy);
    CHECK(dot(y, gy) - dot(x, g.gx) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("maxpool2x2 picks maxima and breaks ties toward the smallest window index") {
    Tensor4<double> x(1, 1, 2, 4);
    x.at(0, 0, 0, 0) = 5;
    x.at(0, 0, 0, 1) = 2;
    x.at(0, 0, 1, 0) = 5;
    x.at(0, 0, 1, 1) = 1;
    x.at(0, 0, 0, 2) = 3;
    x.at(0, 0, 0, 3) = 7;
    x.at(0, 0, 1, 2) = 7;
    x.at(0, 0, 1, 3) = 7;
    auto [y, idx] = maxpool2x2(x);
    CHECK(y.at(0, 0, 0, 0) == 5);
    CHECK(idx.at(0, 0, 0, 0) == 0);
    CHECK(y.at(0, 0, 0, 1) == 7);
    CHECK(idx.at(0, 0, 0, 1) == 1);
}

TEST_CASE("maxpool backward routes gradient only to the winner") {
    Rng rng(3);
    const Tensor4<double> x = random_tensor(rng, 1, 2, 4, 4);
    auto [y, idx] = maxpool2x2(x);
    Tensor4<double> gy = Tensor4<double>::zeros_like(y);
    for (double& v : gy.data) v = 1.0;
    const Tensor4<double> gx = maxpool2x2_backward(idx, gy);
    double total = 0.0;
    for (double v : gx.data) {
        CHECK((v == 0.0 || v == 1.0));
        total += v;
    }
    CHECK(total == doctest::Approx(double(y.data.size())));
}

TEST_CASE("bilinear upsample preserves constants and its backward is the adjoint") {
    Tensor4<double> c(1, 1, 3, 3);
    for (double& v : c.data) v = 2.5;
    const Tensor4<double> up = upsample_bilinear(c, 4);
    CHECK(up.h == 12);
    for (double v : up.data) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));

    Rng rng(5);
    const Tensor4<double> x = random_tensor(rng, 1, 2, 3, 3);
    const Tensor4<double> y = upsample_bilinear(x, 2);
    const Tensor4<double> gy = random_tensor(rng, 1, 2, 6, 6);
    const Tensor4<double> gx = upsample_bilinear_backward(gy, 2);
    CHECK(dot(y, gy) - dot(x, gx) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("rotate_image by 90 degrees moves east to north") {
    Tensor4<double> x(1, 1, 3, 3);
    x.at(0, 0, 1, 2) = 1.0;
    const Tensor4<double> r = rotate_image(x, 90.0);
    CHECK(r.at(0, 0, 0, 1) == 1.0);
    double sum = 0.0;
    for (double v : r.data) sum += v;
    CHECK(sum == 1.0);
}

TEST_CASE("quarter-turn rotations are exact permutations and compose to identity") {
    Rng rng(9);
    const Tensor4<double> x = random_tensor(rng, 1, 2, 8, 8);
    const Tensor4<double> once = rotate_image(x, 90.0);
    const Tensor4<double> full = rotate_image(rotate_image(rotate_image(once, 90.0), 90.0), 90.0);
    for (size_t k = 0; k < x.data.size(); ++k) CHECK(full.data[k] == x.data[k]);

    const Tensor4<double> r180 = rotate_image(x, 180.0);
    const Tensor4<double> twice = rotate_image(once, 90.0);
    for (size_t k = 0; k < x.data.size(); ++k) CHECK(r180.data[k] == twice.data[k]);
}

TEST_CASE("bilinear rotation agrees with the permutation path at 90 degrees") {
    // Forcing the general path through a non-square detour is not possible on
    // square inputs, so compare 89.999999 degrees against the exact quarter turn.
    Rng rng(13);
    const Tensor4<double> x = random_tensor(rng, 1, 1, 7, 7);
    const Tensor4<double> exact = rotate_image(x, 90.0);
    const Tensor4<double> near = rotate_image(x, 89.999999);
    for (int y = 1; y < 6; ++y)
        for (int xx = 1; xx < 6; ++xx)
            CHECK(near.at(0, 0, y, xx) ==
                  doctest::Approx(exact.at(0, 0, y, xx)).epsilon(1e-4));
}

TEST_CASE("rotate_nearest keeps the label alphabet and fills with the sentinel") {
    Tensor4<int32_t> labels(1, 1, 6, 6);
    for (size_t k = 0; k < labels.data.size(); ++k) labels.data[k] = int32_t(k % 3);
    const Tensor4<int32_t> r = rotate_nearest(labels, 45.0, int32_t(-1));
    bool saw_fill = false;
    for (int32_t v : r.data) {
        CHECK(v >= -1);
        CHECK(v <= 2);
        saw_fill = saw_fill || v == -1;
    }
    CHECK(saw_fill);
    const Tensor4<int32_t> q = rotate_nearest(labels, 90.0, int32_t(-1));
    for (int32_t v : q.data) CHECK(v != -1);
}

TEST_CASE("softmax_channels produces a distribution and relu_backward gates on the preactivation") {
    Rng rng(17);
    const Tensor4<double> x = random_tensor(rng, 2, 4, 3, 3);
    const Tensor4<double> p = softmax_channels(x);
    for (int i = 0; i < 2; ++i)
        for (int y = 0; y < 3; ++y)
            for (int xx = 0; xx < 3; ++xx) {
                double s = 0.0;
                for (int j = 0; j < 4; ++j) {
                    CHECK(p.at(i, j, y, xx) > 0.0);
                    s += p.at(i, j, y, xx);
                }
                CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
            }

    const Tensor4<double> a = relu(x);
    Tensor4<double> gy = Tensor4<double>::zeros_like(x);
    for (double& v : gy.data) v = 1.0;
    const Tensor4<double> gx = relu_backward(x, gy);
    for (size_t k = 0; k < x.data.size(); ++k) {
        CHECK(a.data[k] == (x.data[k] > 0 ? x.data[k] : 0.0));
        CHECK(gx.data[k] == (x.data[k] > 0 ? 1.0 : 0.0));
    }
}
