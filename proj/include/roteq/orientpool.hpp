#pragma once

#include <utility>

#include "roteq/rotkernel.hpp"
#include "roteq/tensor.hpp"

namespace roteq {

// Cartesian activation vectors per filter. Magnitude sqrt(u^2+v^2) equals the
// rectified winning activation; (u,v) = (0,0) wherever that activation was <= 0.
template <typename T>
struct VectorField {
    Tensor4<T> u, v;
};

// Winning orientation per location. rho stores the rectified maximum, theta_deg
// equals (360/R)*argmax exactly.
template <typename T>
struct PolarField {
    int R = 1;
    Tensor4<T> rho;
    Tensor4<T> theta_deg;
    Tensor4<int32_t> argmax;
};

template <typename T>
std::pair<PolarField<T>, VectorField<T>> orientation_pool(const RotStack<T>& y);

// Routes the chain-rule projection grad_u*cos + grad_v*sin into the winning slice,
// zero where the rectifier clipped. paper_literal routes the unsigned gradient
// magnitude instead (study mode, not used in training).
template <typename T>
RotStack<T> orientation_pool_backward(const Tensor4<T>& grad_u, const Tensor4<T>& grad_v,
                                      const PolarField<T>& saved, bool paper_literal = false);

}  // namespace roteq
