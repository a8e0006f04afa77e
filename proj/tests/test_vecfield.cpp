#include <doctest.h>

#include <cmath>

#include "roteq/rng.hpp"
#include "roteq/vecfield.hpp"

using namespace roteq;

namespace {

Tensor4<double> random_tensor(Rng& rng, int n, int c, int h, int w) {
    Tensor4<double> t(n, c, h, w);
    for (double& v : t.data) v = rng.normal();
    return t;
}

Tensor4<double> masked_planes(Rng& rng, int d, int m) {
    Tensor4<double> t(1, d, m, m);
    const std::vector<uint8_t> mask = circular_mask(m);
    for (int j = 0; j < d; ++j)
        for (int k = 0; k < m * m; ++k)
            t.data[size_t(j) * m * m + k] = mask[size_t(k)] ? rng.normal() : 0.0;
    return t;
}

VectorFilter<double> random_vfilter(Rng& rng, int d, int m) {
    VectorFilter<double> f;
    f.wu = masked_planes(rng, d, m);
    f.wv = masked_planes(rng, d, m);
    f.bias = rng.normal();
    return f;
}

VectorField<double> random_field(Rng& rng, int n, int d, int h, int w) {
    return {random_tensor(rng, n, d, h, w), random_tensor(rng, n, d, h, w)};
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

} // namespace

TEST_CASE("vector convolution equals plain convolution on the stacked representation") {
    Rng rng(61);
    const VectorField<double> z = random_field(rng, 2, 3, 9, 9);
    std::vector<VectorFilter<double>> filters;
    for (int i = 0; i < 2; ++i) filters.push_back(random_vfilter(rng, 3, 7));

    const Tensor4<double> got = vecconv(z, filters, 3);

    // oracle: concat u and v channels, concat wu and wv planes, run one conv
    const Tensor4<double> xs = stack_uv(z);
    REQUIRE(xs.c == 6);
    Tensor4<double> bank(2, 6, 7, 7);
    std::vector<double> bias;
    for (int i = 0; i < 2; ++i) {
        std::copy(filters[size_t(i)].wu.data.begin(), filters[size_t(i)].wu.data.end(),
                  bank.data.begin() + size_t(i) * 6 * 49);
        std::copy(filters[size_t(i)].wv.data.begin(), filters[size_t(i)].wv.data.end(),
                  bank.data.begin() + size_t(i) * 6 * 49 + 3 * 49);
        bias.push_back(filters[size_t(i)].bias);
    }
    const Tensor4<double> want = conv2d_ref(xs, bank, bias, 3);
    REQUIRE(got.same_shape(want));
    for (size_t k = 0; k < got.data.size(); ++k)
        CHECK(got.data[k] == doctest::Approx(want.data[k]).epsilon(1e-10));
}

TEST_CASE("vecconv is linear in the field") {
    Rng rng(63);
    const VectorField<double> a = random_field(rng, 1, 2, 6, 6);
    const VectorField<double> b = random_field(rng, 1, 2, 6, 6);
    std::vector<VectorFilter<double>> filters{random_vfilter(rng, 2, 3)};
    const double bias = filters[0].bias;

    VectorField<double> sum{Tensor4<double>::zeros_like(a.u), Tensor4<double>::zeros_like(a.v)};
    for (size_t k = 0; k < a.u.data.size(); ++k) {
        sum.u.data[k] = a.u.data[k] + b.u.data[k];
        sum.v.data[k] = a.v.data[k] + b.v.data[k];
    }
    const Tensor4<double> ya = vecconv(a, filters, 1);
    const Tensor4<double> yb = vecconv(b, filters, 1);
    const Tensor4<double> ys = vecconv(sum, filters, 1);
    for (size_t k = 0; k < ys.data.size(); ++k)
        CHECK(ys.data[k] == doctest::Approx(ya.data[k] + yb.data[k] - bias).epsilon(1e-10));
}

TEST_CASE("rotating a vector filter by 180 degrees negates both components in place") {
    Rng rng(65);
    const VectorFilter<double> f = random_vfilter(rng, 2, 7);
    const VectorFilter<double> r = rotate_vector_filter(f, 180.0);
    // spatial flip plus component mixing with cos=-1, sin=0
    const Tensor4<double> pu = rotate_image(f.wu, 180.0);
    const Tensor4<double> pv = rotate_image(f.wv, 180.0);
    for (size_t k = 0; k < pu.data.size(); ++k) {
        CHECK(r.wu.data[k] == doctest::Approx(-pu.data[k]).epsilon(1e-12));
        CHECK(r.wv.data[k] == doctest::Approx(-pv.data[k]).epsilon(1e-12));
    }
    CHECK(r.bias == f.bias);
}

TEST_CASE("rotating a vector filter four quarter turns returns the original") {
    Rng rng(67);
    const VectorFilter<double> f = random_vfilter(rng, 1, 7);
    VectorFilter<double> r = f;
    for (int k = 0; k < 4; ++k) r = rotate_vector_filter(r, 90.0);
    for (size_t k = 0; k < f.wu.data.size(); ++k) {
        CHECK(r.wu.data[k] == doctest::Approx(f.wu.data[k]).epsilon(1e-12));
        CHECK(r.wv.data[k] == doctest::Approx(f.wv.data[k]).epsilon(1e-12));
    }
}

TEST_CASE("vec_rotconv with R=1 reduces to vecconv") {
    Rng rng(69);
    const VectorField<double> z = random_field(rng, 1, 2, 8, 8);
    std::vector<VectorFilter<double>> filters{random_vfilter(rng, 2, 7)};
    const RotStack<double> y = vec_rotconv(z, filters, OrientationSet::make(1), 3);
    const Tensor4<double> want = vecconv(z, filters, 3);
    REQUIRE(y.R == 1);
    for (int yy = 0; yy < 8; ++yy)
        for (int xx = 0; xx < 8; ++xx)
            CHECK(y.at(0, 0, 0, yy, xx) == doctest::Approx(want.at(0, 0, yy, xx)).epsilon(1e-12));
}

TEST_CASE("vec_rotconv slice r uses the r-rotated vector filter") {
    Rng rng(71);
    const VectorField<double> z = random_field(rng, 1, 1, 6, 6);
    std::vector<VectorFilter<double>> filters{random_vfilter(rng, 1, 7)};
    const OrientationSet orient = OrientationSet::make(8);
    const RotStack<double> y = vec_rotconv(z, filters, orient, 3);
    for (int r = 0; r < 8; ++r) {
        std::vector<VectorFilter<double>> one{rotate_vector_filter(filters[0], orient.angles[size_t(r)])};
        const Tensor4<double> want = vecconv(z, one, 3);
        for (int yy = 0; yy < 6; ++yy)
            for (int xx = 0; xx < 6; ++xx)
                CHECK(y.at(0, 0, r, yy, xx) ==
                      doctest::Approx(want.at(0, 0, yy, xx)).epsilon(1e-10));
    }
}

TEST_CASE("vec_maxpool picks the larger magnitude and keeps both components together") {
    VectorField<double> z{Tensor4<double>(1, 1, 2, 2), Tensor4<double>(1, 1, 2, 2)};
    // magnitudes: 5, 1, 1, 1 -> winner is (3,4)
    z.u.data = {3.0, 1.0, 0.0, -1.0};
    z.v.data = {4.0, 0.0, 1.0, 0.0};
    auto [pooled, idx] = vec_maxpool2x2(z);
    CHECK(pooled.u.at(0, 0, 0, 0) == 3.0);
    CHECK(pooled.v.at(0, 0, 0, 0) == 4.0);
    CHECK(idx.at(0, 0, 0, 0) == 0);
}

TEST_CASE("vec_maxpool ties resolve to the smallest window index") {
    VectorField<double> z{Tensor4<double>(1, 1, 2, 2), Tensor4<double>(1, 1, 2, 2)};
    // equal magnitudes, opposite directions
    z.u.data = {0.0, 2.0, -2.0, 0.0};
    z.v.data = {2.0, 0.0, 0.0, -2.0};
    auto [pooled, idx] = vec_maxpool2x2(z);
    CHECK(idx.at(0, 0, 0, 0) == 0);
    CHECK(pooled.u.at(0, 0, 0, 0) == 0.0);
    CHECK(pooled.v.at(0, 0, 0, 0) == 2.0);
}

TEST_CASE("vec batchnorm leaves the angle field untouched and scales magnitudes to gamma") {
    Rng rng(73);
    VectorField<double> z = random_field(rng, 4, 2, 6, 6);
    std::vector<double> gamma = {1.7, 0.6};
    std::vector<double> running(2, 1.0);
    VecBnCache<double> cache;
    const VectorField<double> out =
        vec_batchnorm(z, gamma, running, 1e-9, 0.1, true, &cache);

    for (int j = 0; j < 2; ++j) {
        // population std of output magnitudes equals gamma
        size_t cnt = 0;
        double mean = 0.0;
        std::vector<double> mags;
        for (int i = 0; i < 4; ++i)
            for (int y = 0; y < 6; ++y)
                for (int x = 0; x < 6; ++x) {
                    const double m = std::hypot(out.u.at(i, j, y, x), out.v.at(i, j, y, x));
                    mags.push_back(m);
                    mean += m;
                    ++cnt;
                }
        mean /= double(cnt);
        double ss = 0.0;
        for (double m : mags) ss += (m - mean) * (m - mean);
        const double pop_std = std::sqrt(ss / double(cnt));
        CHECK(pop_std == doctest::Approx(gamma[size_t(j)]).epsilon(1e-4));

        for (int i = 0; i < 4; ++i)
            for (int y = 0; y < 6; ++y)
                for (int x = 0; x < 6; ++x) {
                    const double a0 = std::atan2(z.v.at(i, j, y, x), z.u.at(i, j, y, x));
                    const double a1 = std::atan2(out.v.at(i, j, y, x), out.u.at(i, j, y, x));
                    CHECK(a1 == doctest::Approx(a0).epsilon(1e-9));
                }
    }
}

TEST_CASE("vec batchnorm eval mode uses the running statistic") {
    Rng rng(75);
    VectorField<double> z = random_field(rng, 2, 1, 4, 4);
    std::vector<double> gamma = {1.0};
    std::vector<double> running = {2.0};
    const VectorField<double> out = vec_batchnorm<double>(z, gamma, running, 0.0, 0.1, false, nullptr);
    for (size_t k = 0; k < z.u.data.size(); ++k) {
        CHECK(out.u.data[k] == doctest::Approx(z.u.data[k] / 2.0).epsilon(1e-12));
        CHECK(out.v.data[k] == doctest::Approx(z.v.data[k] / 2.0).epsilon(1e-12));
    }
    CHECK(running[0] == 2.0); // eval never updates the running statistic
}

TEST_CASE("vec batchnorm training updates the running statistic with momentum 0.1") {
    Rng rng(77);
    VectorField<double> z = random_field(rng, 2, 1, 4, 4);
    std::vector<double> gamma = {1.0};
    std::vector<double> running = {1.0};
    VecBnCache<double> cache;
    (void)vec_batchnorm(z, gamma, running, 0.0, 0.1, true, &cache);
    CHECK(running[0] == doctest::Approx(0.9 * 1.0 + 0.1 * cache.sigma[0]).epsilon(1e-12));
}

TEST_CASE("vector upsample backward is the adjoint of vector upsample") {
    Rng rng(79);
    const VectorField<double> z = random_field(rng, 1, 2, 4, 4);
    const VectorField<double> up = vec_upsample_bilinear(z, 2);
    VectorField<double> g{Tensor4<double>::zeros_like(up.u), Tensor4<double>::zeros_like(up.v)};
    for (double& v : g.u.data) v = rng.normal();
    for (double& v : g.v.data) v = rng.normal();
    const VectorField<double> gz = vec_upsample_bilinear_backward(g, 2);
    const double lhs = dot(up.u.data, g.u.data) + dot(up.v.data, g.v.data);
    const double rhs = dot(z.u.data, gz.u.data) + dot(z.v.data, gz.v.data);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("vecconv backward satisfies the adjoint identity in the field argument") {
    Rng rng(81);
    const VectorField<double> z = random_field(rng, 1, 2, 7, 7);
    std::vector<VectorFilter<double>> filters{random_vfilter(rng, 2, 3)};
    const Tensor4<double> y = vecconv(z, filters, 1);
    Tensor4<double> gy = Tensor4<double>::zeros_like(y);
    for (double& v : gy.data) v = rng.normal();
    const VecConvGrads<double> g = vecconv_backward(z, filters, 1, gy);

    double lhs = 0.0;
    for (size_t k = 0; k < y.data.size(); ++k) lhs += (y.data[k] - filters[0].bias) * gy.data[k];
    const double rhs = dot(z.u.data, g.gz.u.data) + dot(z.v.data, g.gz.v.data);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}
