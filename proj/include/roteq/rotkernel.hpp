#pragma once

#include <cstdint>
#include <vector>

#include "roteq/tensor.hpp"

namespace roteq {

// 1 inside the inscribed disk of diameter m (cell centers within m/2 of the filter
// center), 0 outside. m must be odd.
std::vector<uint8_t> circular_mask(int m);
int circular_mask_count(int m);

// Sparse bilinear resampling plan for rotating an m x m plane about its center.
// Destination cells outside the disk get no taps; taps never reference source cells
// outside the disk. At multiples of 90 degrees the plan degenerates to an exact
// permutation of the disk. The adjoint is the transpose of the same sparse map, so
// forward and backward stay consistent to machine precision at every angle.
struct RotPlan {
    int m = 0;
    std::vector<int> offsets;  // size m*m+1, prefix offsets into srcs/wgts
    std::vector<int> srcs;     // flattened source cell per tap
    std::vector<double> wgts;  // bilinear weight per tap
};
RotPlan make_rot_plan(int m, double angle_deg);

template <typename T>
void apply_rot_plan(const RotPlan& plan, const T* src, T* dst);
// accumulates into grad_src
template <typename T>
void apply_rot_plan_adjoint(const RotPlan& plan, const T* grad_dst, T* grad_src);

struct OrientationSet {
    int R = 1;
    std::vector<double> angles;  // 360*r/R degrees, r = 0..R-1
    static OrientationSet make(int R);
};

template <typename T>
struct CanonicalFilter {
    Tensor4<T> weights;  // (1, d, m, m), zero outside the disk
    T bias = T(0);

    int depth() const { return weights.c; }
    int size() const { return weights.h; }
};

template <typename T>
Tensor4<T> rotate_filter(const CanonicalFilter<T>& f, double angle_deg);  // (1, d, m, m)
template <typename T>
Tensor4<T> rotate_filter_adjoint(const Tensor4<T>& grad_rotated, double angle_deg);

// Activations for all R orientations, dims (n, f, R, h, w). Slice r equals the
// convolution of the input with the r-rotated filters plus the shared bias.
template <typename T>
struct RotStack {
    int n = 0, f = 0, R = 0, h = 0, w = 0;
    std::vector<T> data;

    RotStack() = default;
    RotStack(int n_, int f_, int R_, int h_, int w_)
        : n(n_), f(f_), R(R_), h(h_), w(w_), data(size_t(n_) * f_ * R_ * h_ * w_, T(0)) {}

    size_t index(int i, int j, int r, int y, int x) const {
        return (((size_t(i) * f + j) * R + r) * h + y) * w + x;
    }
    T& at(int i, int j, int r, int y, int x) { return data[index(i, j, r, y, x)]; }
    T at(int i, int j, int r, int y, int x) const { return data[index(i, j, r, y, x)]; }
    T* plane(int i, int j, int r) { return data.data() + index(i, j, r, 0, 0); }
    const T* plane(int i, int j, int r) const { return data.data() + index(i, j, r, 0, 0); }

    bool same_shape(const RotStack& o) const {
        return n == o.n && f == o.f && R == o.R && h == o.h && w == o.w;
    }
    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(f) + "," + std::to_string(R) +
               "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

// Rotated copies of every filter, assembled as one (F, d, m, m) bank per orientation.
template <typename T>
std::vector<Tensor4<T>> rotated_banks(const std::vector<CanonicalFilter<T>>& filters,
                                      const OrientationSet& orient);

template <typename T>
RotStack<T> rotconv_forward(const Tensor4<T>& x, const std::vector<CanonicalFilter<T>>& filters,
                            const OrientationSet& orient, int pad);

template <typename T>
struct RotConvGrads {
    Tensor4<T> gx;
    std::vector<Tensor4<T>> gw;  // per filter (1, d, m, m), support inside the disk
    std::vector<T> gb;
};

template <typename T>
RotConvGrads<T> rotconv_backward(const Tensor4<T>& x, const std::vector<CanonicalFilter<T>>& filters,
                                 const OrientationSet& orient, int pad, const RotStack<T>& gy);

}  // namespace roteq
