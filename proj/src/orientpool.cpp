#include "roteq/orientpool.hpp"

#include <cmath>

#include "roteq/common.hpp"
#include "roteq/parallel.hpp"

namespace roteq {

namespace {

// exact {0,+-1} entries at quarter turns keep equivariance tests permutation-exact
template <typename T>
void angle_tables(int R, std::vector<T>& cs, std::vector<T>& sn) {
    cs.resize(size_t(R));
    sn.resize(size_t(R));
    for (int r = 0; r < R; ++r) {
        double s, c;
        sincos_deg(360.0 * r / R, s, c);
        cs[size_t(r)] = T(c);
        sn[size_t(r)] = T(s);
    }
}

} // namespace

template <typename T>
std::pair<PolarField<T>, VectorField<T>> orientation_pool(const RotStack<T>& y) {
    check(y.R >= 1, "orientation_pool: empty stack");
    PolarField<T> p;
    p.R = y.R;
    p.rho = Tensor4<T>(y.n, y.f, y.h, y.w);
    p.theta_deg = Tensor4<T>(y.n, y.f, y.h, y.w);
    p.argmax = Tensor4<int32_t>(y.n, y.f, y.h, y.w);
    VectorField<T> z{Tensor4<T>(y.n, y.f, y.h, y.w), Tensor4<T>(y.n, y.f, y.h, y.w)};

    std::vector<T> cs, sn;
    angle_tables<T>(y.R, cs, sn);
    const size_t plane = size_t(y.h) * y.w;

    parallel_for(y.n * y.f, [&](int job) {
        const int i = job / y.f, j = job % y.f;
        T* best = p.rho.plane(i, j);
        int32_t* arg = p.argmax.plane(i, j);
        const T* slice0 = y.plane(i, j, 0);
        for (size_t k = 0; k < plane; ++k) best[k] = slice0[k];
        for (int r = 1; r < y.R; ++r) {
            const T* slice = y.plane(i, j, r);
            for (size_t k = 0; k < plane; ++k)
                if (slice[k] > best[k]) { // strict: ties keep the smallest r
                    best[k] = slice[k];
                    arg[k] = r;
                }
        }
        T* theta = p.theta_deg.plane(i, j);
        T* u = z.u.plane(i, j);
        T* v = z.v.plane(i, j);
        for (size_t k = 0; k < plane; ++k) {
            const int r = arg[k];
            theta[k] = T(360.0 * r / y.R);
            const T mag = best[k] > T(0) ? best[k] : T(0);
            best[k] = mag;
            u[k] = mag * cs[size_t(r)];
            v[k] = mag * sn[size_t(r)];
        }
    });
    return {std::move(p), std::move(z)};
}

template <typename T>
RotStack<T> orientation_pool_backward(const Tensor4<T>& grad_u, const Tensor4<T>& grad_v,
                                      const PolarField<T>& saved, bool paper_literal) {
    check(grad_u.same_shape(saved.rho) && grad_v.same_shape(saved.rho),
          "orientation_pool_backward: gradient " + grad_u.shape_str() + " vs field " +
              saved.rho.shape_str());
    RotStack<T> gy(saved.rho.n, saved.rho.c, saved.R, saved.rho.h, saved.rho.w);

    std::vector<T> cs, sn;
    angle_tables<T>(saved.R, cs, sn);
    const size_t plane = size_t(saved.rho.h) * saved.rho.w;

    parallel_for(saved.rho.n * saved.rho.c, [&](int job) {
        const int i = job / saved.rho.c, j = job % saved.rho.c;
        const T* rho = saved.rho.plane(i, j);
        const int32_t* arg = saved.argmax.plane(i, j);
        const T* gu = grad_u.plane(i, j);
        const T* gv = grad_v.plane(i, j);
        for (size_t k = 0; k < plane; ++k) {
            if (rho[k] <= T(0)) continue;
            const int r = arg[k];
            const T g = paper_literal
                            ? T(std::sqrt(double(gu[k]) * gu[k] + double(gv[k]) * gv[k]))
                            : gu[k] * cs[size_t(r)] + gv[k] * sn[size_t(r)];
            gy.plane(i, j, r)[k] = g;
        }
    });
    return gy;
}

#define ROTEQ_INSTANTIATE_ORIENTPOOL(T)                                                           \
    template std::pair<PolarField<T>, VectorField<T>> orientation_pool<T>(const RotStack<T>&);    \
    template RotStack<T> orientation_pool_backward<T>(const Tensor4<T>&, const Tensor4<T>&,       \
                                                      const PolarField<T>&, bool);

ROTEQ_INSTANTIATE_ORIENTPOOL(float)
ROTEQ_INSTANTIATE_ORIENTPOOL(double)

}  // namespace roteq
