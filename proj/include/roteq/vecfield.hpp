#pragma once

#include <utility>
#include <vector>

#include "roteq/orientpool.hpp"
#include "roteq/rng.hpp"

namespace roteq {

template <typename T>
struct VectorFilter {
    Tensor4<T> wu, wv;  // (1, d, m, m) each, zero outside the disk
    T bias = T(0);

    int depth() const { return wu.c; }
    int size() const { return wu.h; }
};

// (u..., v...) channel stacking; lets every vector convolution reuse the scalar kernel
template <typename T>
Tensor4<T> stack_uv(const VectorField<T>& z);
template <typename T>
VectorField<T> split_uv(const Tensor4<T>& s);

template <typename T>
Tensor4<T> vecconv(const VectorField<T>& z, const std::vector<VectorFilter<T>>& filters, int pad);

template <typename T>
struct VecConvGrads {
    VectorField<T> gz;
    std::vector<VectorFilter<T>> gw;  // bias field carries the bias gradient
};

template <typename T>
VecConvGrads<T> vecconv_backward(const VectorField<T>& z, const std::vector<VectorFilter<T>>& filters,
                                 int pad, const Tensor4<T>& gy);

// Spatial resample of both components plus in-place rotation of each (u,v) weight pair;
// the second step is what keeps stacked layers equivariant.
template <typename T>
VectorFilter<T> rotate_vector_filter(const VectorFilter<T>& f, double angle_deg);

template <typename T>
RotStack<T> vec_rotconv(const VectorField<T>& z, const std::vector<VectorFilter<T>>& filters,
                        const OrientationSet& orient, int pad);

template <typename T>
VecConvGrads<T> vec_rotconv_backward(const VectorField<T>& z,
                                     const std::vector<VectorFilter<T>>& filters,
                                     const OrientationSet& orient, int pad, const RotStack<T>& gy);

// keeps the strongest vector of each 2x2 window whole (u and v together)
template <typename T>
std::pair<VectorField<T>, PoolIndices> vec_maxpool2x2(const VectorField<T>& z);

template <typename T>
VectorField<T> vec_maxpool2x2_backward(const PoolIndices& idx, const VectorField<T>& gy);

// Magnitude-std scaling without centering: centering would break the rho >= 0 polar
// structure. Scale per filter = gamma / (sigma + eps); sigma = batch std of magnitudes.
template <typename T>
struct VecBnCache {
    Tensor4<T> rho;
    std::vector<T> sigma;
    std::vector<T> rho_mean;
};

template <typename T>
VectorField<T> vec_batchnorm(const VectorField<T>& z, const std::vector<T>& gamma,
                             std::vector<T>& running_sigma, T eps, T momentum, bool train,
                             VecBnCache<T>* cache);

template <typename T>
struct VecBnGrads {
    VectorField<T> gz;
    std::vector<T> ggamma;
};

template <typename T>
VecBnGrads<T> vec_batchnorm_backward(const VectorField<T>& z, const std::vector<T>& gamma,
                                     const VecBnCache<T>& cache, T eps, const VectorField<T>& gy);

template <typename T>
VectorField<T> vec_upsample_bilinear(const VectorField<T>& z, int factor);
template <typename T>
VectorField<T> vec_upsample_bilinear_backward(const VectorField<T>& gy, int factor);

// whole-vector dropout (both components zeroed together); off by default in configs
template <typename T>
std::pair<VectorField<T>, Tensor4<uint8_t>> vec_dropout(const VectorField<T>& z, double p, Rng& rng);
template <typename T>
VectorField<T> vec_dropout_backward(const Tensor4<uint8_t>& keep, double p, const VectorField<T>& gy);

}  // namespace roteq
