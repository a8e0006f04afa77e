#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "roteq/common.hpp"

namespace roteq {

// Dense rank-4 array, dims (n, c, h, w), row-major with w fastest.
template <typename T>
struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_, T fill = T(0))
        : n(n_), c(c_), h(h_), w(w_), data(size_t(n_) * c_ * h_ * w_, fill) {
        check(n_ >= 0 && c_ >= 0 && h_ >= 0 && w_ >= 0, "Tensor4: negative dimension");
    }

    size_t size() const { return data.size(); }
    bool same_shape(const Tensor4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }

    size_t index(int i, int j, int y, int x) const {
        return ((size_t(i) * c + j) * h + y) * w + x;
    }
    T& at(int i, int j, int y, int x) { return data[index(i, j, y, x)]; }
    T at(int i, int j, int y, int x) const { return data[index(i, j, y, x)]; }

    T* row(int i, int j, int y) { return data.data() + index(i, j, y, 0); }
    const T* row(int i, int j, int y) const { return data.data() + index(i, j, y, 0); }
    T* plane(int i, int j) { return data.data() + index(i, j, 0, 0); }
    const T* plane(int i, int j) const { return data.data() + index(i, j, 0, 0); }

    static Tensor4 zeros_like(const Tensor4& o) { return Tensor4(o.n, o.c, o.h, o.w); }

    template <typename U>
    Tensor4<U> cast() const {
        Tensor4<U> out(n, c, h, w);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }
};

using PoolIndices = Tensor4<int32_t>; // window-local positions 0..3, row-major

template <typename T>
struct Conv2dGrads {
    Tensor4<T> gx;
    Tensor4<T> gw;
    std::vector<T> gb;
};

// Sliding dot product of x (n,d,h,w) with a filter bank w (f,d,m,m) plus
// per-filter bias, zero-padded by `pad` pixels. pad = (m-1)/2 keeps the
// spatial size. m must be odd.
template <typename T>
Tensor4<T> conv2d_ref(const Tensor4<T>& x, const Tensor4<T>& w,
                      const std::vector<T>& bias, int pad);

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& w, int pad,
                               const Tensor4<T>& gy);

// Halves the spatial dims; ties go to the smallest row-major window index.
template <typename T>
std::pair<Tensor4<T>, PoolIndices> maxpool2x2(const Tensor4<T>& x);

template <typename T>
Tensor4<T> maxpool2x2_backward(const PoolIndices& idx, const Tensor4<T>& gy);

// Bilinear upsampling with half-pixel centers (non-align-corners) and
// clamped borders. This convention commutes with quarter-turn rotations
// on even-sized grids.
template <typename T>
Tensor4<T> upsample_bilinear(const Tensor4<T>& x, int factor);

template <typename T>
Tensor4<T> upsample_bilinear_backward(const Tensor4<T>& gy, int factor);

// Bilinear resampling about the image center; positive angle rotates the
// content counter-clockwise (row axis pointing down). Samples outside the
// source read as 0. Square inputs at multiples of 90 degrees take an exact
// index-permutation path.
template <typename T>
Tensor4<T> rotate_image(const Tensor4<T>& x, double angle_deg);

// Nearest-neighbour variant for label maps; out-of-support cells receive
// `fill`.
template <typename T>
Tensor4<T> rotate_nearest(const Tensor4<T>& x, double angle_deg, T fill);

template <typename T>
Tensor4<T> relu(const Tensor4<T>& x);

// Gate is the pre-activation value.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& pre, const Tensor4<T>& gy);

// Per-pixel distribution over channels, computed with max subtraction.
template <typename T>
Tensor4<T> softmax_channels(const Tensor4<T>& x);

template <typename T>
bool all_finite(const Tensor4<T>& x);

} // namespace roteq
