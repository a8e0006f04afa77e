#include "roteq/vecfield.hpp"

#include <cmath>
#include <cstring>

#include "roteq/common.hpp"
#include "roteq/parallel.hpp"

namespace roteq {

namespace {

template <typename T>
void check_vec_filters(const std::vector<VectorFilter<T>>& filters) {
    check(!filters.empty(), "vecconv: empty filter list");
    const int d = filters[0].depth(), m = filters[0].size();
    for (const auto& f : filters) {
        check(f.wu.same_shape(f.wv), "vecconv: wu/wv shape mismatch " + f.wu.shape_str() +
                                         " vs " + f.wv.shape_str());
        check(f.depth() == d && f.size() == m && f.wu.n == 1 && f.wu.h == f.wu.w,
              "vecconv: filters must share depth and size, got " + f.wu.shape_str());
    }
}

// (F, 2d, m, m) bank of the canonical filters, u planes first
template <typename T>
Tensor4<T> stacked_bank(const std::vector<VectorFilter<T>>& filters) {
    const int F = int(filters.size());
    const int d = filters[0].depth(), m = filters[0].size();
    Tensor4<T> bank(F, 2 * d, m, m);
    const size_t plane = size_t(m) * m;
    for (int f = 0; f < F; ++f)
        for (int j = 0; j < d; ++j) {
            std::memcpy(bank.plane(f, j), filters[size_t(f)].wu.plane(0, j), sizeof(T) * plane);
            std::memcpy(bank.plane(f, d + j), filters[size_t(f)].wv.plane(0, j), sizeof(T) * plane);
        }
    return bank;
}

// rotated stacked bank for one orientation: spatial resample, then the per-cell
// (u,v) pair is rotated by the same angle
template <typename T>
Tensor4<T> rotated_stacked_bank(const std::vector<VectorFilter<T>>& filters, const RotPlan& plan,
                                double angle_deg) {
    const int F = int(filters.size());
    const int d = filters[0].depth(), m = filters[0].size();
    double s, c;
    sincos_deg(angle_deg, s, c);
    Tensor4<T> bank(F, 2 * d, m, m);
    std::vector<T> ru(size_t(m) * m), rv(size_t(m) * m);
    for (int f = 0; f < F; ++f)
        for (int j = 0; j < d; ++j) {
            apply_rot_plan(plan, filters[size_t(f)].wu.plane(0, j), ru.data());
            apply_rot_plan(plan, filters[size_t(f)].wv.plane(0, j), rv.data());
            T* bu = bank.plane(f, j);
            T* bv = bank.plane(f, d + j);
            for (size_t k = 0; k < ru.size(); ++k) {
                bu[k] = T(c * double(ru[k]) - s * double(rv[k]));
                bv[k] = T(s * double(ru[k]) + c * double(rv[k]));
            }
        }
    return bank;
}

template <typename T>
std::vector<T> bias_of(const std::vector<VectorFilter<T>>& filters) {
    std::vector<T> b(filters.size());
    for (size_t f = 0; f < filters.size(); ++f) b[f] = filters[f].bias;
    return b;
}

} // namespace

template <typename T>
Tensor4<T> stack_uv(const VectorField<T>& z) {
    check(z.u.same_shape(z.v), "stack_uv: u " + z.u.shape_str() + " vs v " + z.v.shape_str());
    Tensor4<T> s(z.u.n, 2 * z.u.c, z.u.h, z.u.w);
    const size_t plane = size_t(z.u.h) * z.u.w;
    for (int i = 0; i < z.u.n; ++i)
        for (int j = 0; j < z.u.c; ++j) {
            std::memcpy(s.plane(i, j), z.u.plane(i, j), sizeof(T) * plane);
            std::memcpy(s.plane(i, z.u.c + j), z.v.plane(i, j), sizeof(T) * plane);
        }
    return s;
}

template <typename T>
VectorField<T> split_uv(const Tensor4<T>& s) {
    check((s.c % 2) == 0, "split_uv: odd channel count " + s.shape_str());
    const int d = s.c / 2;
    VectorField<T> z{Tensor4<T>(s.n, d, s.h, s.w), Tensor4<T>(s.n, d, s.h, s.w)};
    const size_t plane = size_t(s.h) * s.w;
    for (int i = 0; i < s.n; ++i)
        for (int j = 0; j < d; ++j) {
            std::memcpy(z.u.plane(i, j), s.plane(i, j), sizeof(T) * plane);
            std::memcpy(z.v.plane(i, j), s.plane(i, d + j), sizeof(T) * plane);
        }
    return z;
}

template <typename T>
Tensor4<T> vecconv(const VectorField<T>& z, const std::vector<VectorFilter<T>>& filters, int pad) {
    check_vec_filters(filters);
    check(filters[0].depth() == z.u.c, "vecconv: filter depth " + std::to_string(filters[0].depth()) +
                                           " != field channels " + std::to_string(z.u.c));
    return conv2d_ref(stack_uv(z), stacked_bank(filters), bias_of(filters), pad);
}

template <typename T>
VecConvGrads<T> vecconv_backward(const VectorField<T>& z, const std::vector<VectorFilter<T>>& filters,
                                 int pad, const Tensor4<T>& gy) {
    check_vec_filters(filters);
    const int d = filters[0].depth(), m = filters[0].size();
    Conv2dGrads<T> g = conv2d_backward(stack_uv(z), stacked_bank(filters), pad, gy);
    VecConvGrads<T> out;
    out.gz = split_uv(g.gx);
    out.gw.resize(filters.size());
    const size_t plane = size_t(m) * m;
    for (size_t f = 0; f < filters.size(); ++f) {
        out.gw[f].wu = Tensor4<T>(1, d, m, m);
        out.gw[f].wv = Tensor4<T>(1, d, m, m);
        for (int j = 0; j < d; ++j) {
            std::memcpy(out.gw[f].wu.plane(0, j), g.gw.plane(int(f), j), sizeof(T) * plane);
            std::memcpy(out.gw[f].wv.plane(0, j), g.gw.plane(int(f), d + j), sizeof(T) * plane);
        }
        out.gw[f].bias = g.gb[f];
    }
    return out;
}

template <typename T>
VectorFilter<T> rotate_vector_filter(const VectorFilter<T>& f, double angle_deg) {
    check(f.wu.same_shape(f.wv) && f.wu.n == 1 && f.wu.h == f.wu.w,
          "rotate_vector_filter: expected (1,d,m,m) pair, got " + f.wu.shape_str());
    const int d = f.depth(), m = f.size();
    const RotPlan plan = make_rot_plan(m, angle_deg);
    double s, c;
    sincos_deg(angle_deg, s, c);
    VectorFilter<T> out;
    out.wu = Tensor4<T>(1, d, m, m);
    out.wv = Tensor4<T>(1, d, m, m);
    out.bias = f.bias;
    std::vector<T> ru(size_t(m) * m), rv(size_t(m) * m);
    for (int j = 0; j < d; ++j) {
        apply_rot_plan(plan, f.wu.plane(0, j), ru.data());
        apply_rot_plan(plan, f.wv.plane(0, j), rv.data());
        T* ou = out.wu.plane(0, j);
        T* ov = out.wv.plane(0, j);
        for (size_t k = 0; k < ru.size(); ++k) {
            ou[k] = T(c * double(ru[k]) - s * double(rv[k]));
            ov[k] = T(s * double(ru[k]) + c * double(rv[k]));
        }
    }
    return out;
}

template <typename T>
RotStack<T> vec_rotconv(const VectorField<T>& z, const std::vector<VectorFilter<T>>& filters,
                        const OrientationSet& orient, int pad) {
    check_vec_filters(filters);
    check(filters[0].depth() == z.u.c, "vec_rotconv: filter depth " +
                                           std::to_string(filters[0].depth()) +
                                           " != field channels " + std::to_string(z.u.c));
    const int F = int(filters.size());
    const int m = filters[0].size();
    const Tensor4<T> x = stack_uv(z);
    const std::vector<T> bias = bias_of(filters);
    const int oh = x.h + 2 * pad - m + 1, ow = x.w + 2 * pad - m + 1;
    RotStack<T> y(x.n, F, orient.R, oh, ow);
    for (int r = 0; r < orient.R; ++r) {
        const RotPlan plan = make_rot_plan(m, orient.angles[size_t(r)]);
        const Tensor4<T> bank = rotated_stacked_bank(filters, plan, orient.angles[size_t(r)]);
        const Tensor4<T> yr = conv2d_ref(x, bank, bias, pad);
        for (int i = 0; i < x.n; ++i)
            for (int f = 0; f < F; ++f)
                std::memcpy(y.plane(i, f, r), yr.plane(i, f), sizeof(T) * size_t(oh) * ow);
    }
    return y;
}

template <typename T>
VecConvGrads<T> vec_rotconv_backward(const VectorField<T>& z,
                                     const std::vector<VectorFilter<T>>& filters,
                                     const OrientationSet& orient, int pad, const RotStack<T>& gy) {
    check_vec_filters(filters);
    const int F = int(filters.size());
    const int m = filters[0].size(), d = filters[0].depth();
    const Tensor4<T> x = stack_uv(z);
    const int oh = x.h + 2 * pad - m + 1, ow = x.w + 2 * pad - m + 1;
    check(gy.n == x.n && gy.f == F && gy.R == orient.R && gy.h == oh && gy.w == ow,
          "vec_rotconv_backward: gradient stack " + gy.shape_str() + " does not match forward output");

    VecConvGrads<T> out;
    out.gw.resize(filters.size());
    for (size_t f = 0; f < filters.size(); ++f) {
        out.gw[f].wu = Tensor4<T>(1, d, m, m);
        out.gw[f].wv = Tensor4<T>(1, d, m, m);
        out.gw[f].bias = T(0);
    }
    Tensor4<T> gxs(x.n, x.c, x.h, x.w);

    Tensor4<T> gyr(x.n, F, oh, ow);
    std::vector<T> ga(size_t(m) * m), gb(size_t(m) * m);
    for (int r = 0; r < orient.R; ++r) {
        const double angle = orient.angles[size_t(r)];
        const RotPlan plan = make_rot_plan(m, angle);
        const Tensor4<T> bank = rotated_stacked_bank(filters, plan, angle);
        for (int i = 0; i < x.n; ++i)
            for (int f = 0; f < F; ++f)
                std::memcpy(gyr.plane(i, f), gy.plane(i, f, r), sizeof(T) * size_t(oh) * ow);
        Conv2dGrads<T> g = conv2d_backward(x, bank, pad, gyr);
        for (size_t k = 0; k < g.gx.data.size(); ++k) gxs.data[k] += g.gx.data[k];

        double s, c;
        sincos_deg(angle, s, c);
        for (int f = 0; f < F; ++f) {
            for (int j = 0; j < d; ++j) {
                const T* gbu = g.gw.plane(f, j);
                const T* gbv = g.gw.plane(f, d + j);
                // adjoint of the in-place (u,v) rotation, then of the spatial resample
                for (size_t k = 0; k < ga.size(); ++k) {
                    ga[k] = T(c * double(gbu[k]) + s * double(gbv[k]));
                    gb[k] = T(-s * double(gbu[k]) + c * double(gbv[k]));
                }
                apply_rot_plan_adjoint(plan, ga.data(), out.gw[size_t(f)].wu.plane(0, j));
                apply_rot_plan_adjoint(plan, gb.data(), out.gw[size_t(f)].wv.plane(0, j));
            }
            out.gw[size_t(f)].bias += g.gb[size_t(f)];
        }
    }
    out.gz = split_uv(gxs);
    return out;
}

template <typename T>
std::pair<VectorField<T>, PoolIndices> vec_maxpool2x2(const VectorField<T>& z) {
    check(z.u.same_shape(z.v), "vec_maxpool2x2: u/v shape mismatch");
    check((z.u.h % 2) == 0 && (z.u.w % 2) == 0,
          "vec_maxpool2x2: spatial dims must be even, got " + z.u.shape_str());
    const int oh = z.u.h / 2, ow = z.u.w / 2;
    VectorField<T> out{Tensor4<T>(z.u.n, z.u.c, oh, ow), Tensor4<T>(z.u.n, z.u.c, oh, ow)};
    PoolIndices idx(z.u.n, z.u.c, oh, ow);
    for (int i = 0; i < z.u.n; ++i)
        for (int j = 0; j < z.u.c; ++j)
            for (int y = 0; y < oh; ++y) {
                const T* u0 = z.u.row(i, j, 2 * y);
                const T* u1 = z.u.row(i, j, 2 * y + 1);
                const T* v0 = z.v.row(i, j, 2 * y);
                const T* v1 = z.v.row(i, j, 2 * y + 1);
                for (int xx = 0; xx < ow; ++xx) {
                    const T uu[4] = {u0[2 * xx], u0[2 * xx + 1], u1[2 * xx], u1[2 * xx + 1]};
                    const T vv[4] = {v0[2 * xx], v0[2 * xx + 1], v1[2 * xx], v1[2 * xx + 1]};
                    int best = 0;
                    T bm = uu[0] * uu[0] + vv[0] * vv[0];
                    for (int k = 1; k < 4; ++k) {
                        const T mag = uu[k] * uu[k] + vv[k] * vv[k];
                        if (mag > bm) { // strict: ties keep the smaller index
                            bm = mag;
                            best = k;
                        }
                    }
                    out.u.at(i, j, y, xx) = uu[best];
                    out.v.at(i, j, y, xx) = vv[best];
                    idx.at(i, j, y, xx) = best;
                }
            }
    return {std::move(out), std::move(idx)};
}

template <typename T>
VectorField<T> vec_maxpool2x2_backward(const PoolIndices& idx, const VectorField<T>& gy) {
    check(gy.u.n == idx.n && gy.u.c == idx.c && gy.u.h == idx.h && gy.u.w == idx.w,
          "vec_maxpool2x2_backward: gradient " + gy.u.shape_str() + " != pooled shape " +
              idx.shape_str());
    VectorField<T> gz{Tensor4<T>(idx.n, idx.c, idx.h * 2, idx.w * 2),
                      Tensor4<T>(idx.n, idx.c, idx.h * 2, idx.w * 2)};
    for (int i = 0; i < idx.n; ++i)
        for (int j = 0; j < idx.c; ++j)
            for (int y = 0; y < idx.h; ++y)
                for (int xx = 0; xx < idx.w; ++xx) {
                    const int k = idx.at(i, j, y, xx);
                    gz.u.at(i, j, 2 * y + k / 2, 2 * xx + k % 2) = gy.u.at(i, j, y, xx);
                    gz.v.at(i, j, 2 * y + k / 2, 2 * xx + k % 2) = gy.v.at(i, j, y, xx);
                }
    return gz;
}

template <typename T>
VectorField<T> vec_batchnorm(const VectorField<T>& z, const std::vector<T>& gamma,
                             std::vector<T>& running_sigma, T eps, T momentum, bool train,
                             VecBnCache<T>* cache) {
    check(z.u.same_shape(z.v), "vec_batchnorm: u/v shape mismatch");
    check(int(gamma.size()) == z.u.c && int(running_sigma.size()) == z.u.c,
          "vec_batchnorm: expected " + std::to_string(z.u.c) + " per-filter parameters");
    check(z.u.n >= 1, "vec_batchnorm: empty batch");
    const size_t per_filter = size_t(z.u.n) * z.u.h * z.u.w;
    if (train) check(per_filter >= 2, "vec_batchnorm: training needs more than one location");

    std::vector<T> scale(size_t(z.u.c));
    Tensor4<T> rho;
    std::vector<T> sigma(size_t(z.u.c)), rho_mean(size_t(z.u.c));
    if (train) {
        rho = Tensor4<T>(z.u.n, z.u.c, z.u.h, z.u.w);
        for (int j = 0; j < z.u.c; ++j) {
            double sum = 0.0;
            for (int i = 0; i < z.u.n; ++i) {
                const T* u = z.u.plane(i, j);
                const T* v = z.v.plane(i, j);
                T* rp = rho.plane(i, j);
                const size_t plane = size_t(z.u.h) * z.u.w;
                for (size_t k = 0; k < plane; ++k) {
                    rp[k] = T(std::sqrt(double(u[k]) * u[k] + double(v[k]) * v[k]));
                    sum += double(rp[k]);
                }
            }
            const double mean = sum / double(per_filter);
            double ss = 0.0;
            for (int i = 0; i < z.u.n; ++i) {
                const T* rp = rho.plane(i, j);
                const size_t plane = size_t(z.u.h) * z.u.w;
                for (size_t k = 0; k < plane; ++k) {
                    const double dv = double(rp[k]) - mean;
                    ss += dv * dv;
                }
            }
            sigma[size_t(j)] = T(std::sqrt(ss / double(per_filter)));
            rho_mean[size_t(j)] = T(mean);
            running_sigma[size_t(j)] =
                T((1.0 - double(momentum)) * double(running_sigma[size_t(j)]) +
                  double(momentum) * double(sigma[size_t(j)]));
            scale[size_t(j)] = gamma[size_t(j)] / (sigma[size_t(j)] + eps);
        }
    } else {
        for (int j = 0; j < z.u.c; ++j)
            scale[size_t(j)] = gamma[size_t(j)] / (running_sigma[size_t(j)] + eps);
    }

    VectorField<T> out{Tensor4<T>::zeros_like(z.u), Tensor4<T>::zeros_like(z.v)};
    for (int i = 0; i < z.u.n; ++i)
        for (int j = 0; j < z.u.c; ++j) {
            const T s = scale[size_t(j)];
            const T* u = z.u.plane(i, j);
            const T* v = z.v.plane(i, j);
            T* ou = out.u.plane(i, j);
            T* ov = out.v.plane(i, j);
            const size_t plane = size_t(z.u.h) * z.u.w;
            for (size_t k = 0; k < plane; ++k) {
                ou[k] = s * u[k];
                ov[k] = s * v[k];
            }
        }
    if (cache) {
        cache->rho = std::move(rho);
        cache->sigma = std::move(sigma);
        cache->rho_mean = std::move(rho_mean);
    }
    return out;
}

template <typename T>
VecBnGrads<T> vec_batchnorm_backward(const VectorField<T>& z, const std::vector<T>& gamma,
                                     const VecBnCache<T>& cache, T eps, const VectorField<T>& gy) {
    check(z.u.same_shape(gy.u) && z.v.same_shape(gy.v), "vec_batchnorm_backward: shape mismatch");
    const size_t per_filter = size_t(z.u.n) * z.u.h * z.u.w;
    const size_t plane = size_t(z.u.h) * z.u.w;

    VecBnGrads<T> out;
    out.gz = VectorField<T>{Tensor4<T>::zeros_like(z.u), Tensor4<T>::zeros_like(z.v)};
    out.ggamma.assign(size_t(z.u.c), T(0));

    parallel_for(z.u.c, [&](int j) {
        const double sig = double(cache.sigma[size_t(j)]);
        const double mean = double(cache.rho_mean[size_t(j)]);
        const double se = sig + double(eps);
        double S = 0.0;
        for (int i = 0; i < z.u.n; ++i) {
            const T* u = z.u.plane(i, j);
            const T* v = z.v.plane(i, j);
            const T* gu = gy.u.plane(i, j);
            const T* gv = gy.v.plane(i, j);
            for (size_t k = 0; k < plane; ++k) S += double(gu[k]) * u[k] + double(gv[k]) * v[k];
        }
        out.ggamma[size_t(j)] = T(S / se);

        const double s = double(gamma[size_t(j)]) / se;
        // d(sigma)/d(u_k) = (rho_k - mean)/(N*sigma) * u_k/rho_k; the whole correction
        // vanishes when sigma == 0 because every rho then equals the mean
        const double corr = sig > 0.0
                                ? double(gamma[size_t(j)]) * S / (se * se * double(per_filter) * sig)
                                : 0.0;
        for (int i = 0; i < z.u.n; ++i) {
            const T* u = z.u.plane(i, j);
            const T* v = z.v.plane(i, j);
            const T* rp = cache.rho.plane(i, j);
            const T* gu = gy.u.plane(i, j);
            const T* gv = gy.v.plane(i, j);
            T* ou = out.gz.u.plane(i, j);
            T* ov = out.gz.v.plane(i, j);
            for (size_t k = 0; k < plane; ++k) {
                double cu = 0.0, cv = 0.0;
                if (rp[k] > T(0)) {
                    const double t = corr * (double(rp[k]) - mean) / double(rp[k]);
                    cu = t * double(u[k]);
                    cv = t * double(v[k]);
                }
                ou[k] = T(s * double(gu[k]) - cu);
                ov[k] = T(s * double(gv[k]) - cv);
            }
        }
    });
    return out;
}

template <typename T>
VectorField<T> vec_upsample_bilinear(const VectorField<T>& z, int factor) {
    return {upsample_bilinear(z.u, factor), upsample_bilinear(z.v, factor)};
}

template <typename T>
VectorField<T> vec_upsample_bilinear_backward(const VectorField<T>& gy, int factor) {
    return {upsample_bilinear_backward(gy.u, factor), upsample_bilinear_backward(gy.v, factor)};
}

template <typename T>
std::pair<VectorField<T>, Tensor4<uint8_t>> vec_dropout(const VectorField<T>& z, double p, Rng& rng) {
    check(p >= 0.0 && p < 1.0, "vec_dropout: p must lie in [0,1)");
    Tensor4<uint8_t> keep(z.u.n, z.u.c, z.u.h, z.u.w);
    VectorField<T> out{Tensor4<T>::zeros_like(z.u), Tensor4<T>::zeros_like(z.v)};
    const T inv = T(1.0 / (1.0 - p)); // inverted scaling keeps inference a no-op
    for (size_t k = 0; k < keep.data.size(); ++k) {
        const bool kept = !rng.bernoulli(p);
        keep.data[k] = kept ? 1 : 0;
        if (kept) {
            out.u.data[k] = z.u.data[k] * inv;
            out.v.data[k] = z.v.data[k] * inv;
        }
    }
    return {std::move(out), std::move(keep)};
}

template <typename T>
VectorField<T> vec_dropout_backward(const Tensor4<uint8_t>& keep, double p, const VectorField<T>& gy) {
    VectorField<T> gz{Tensor4<T>::zeros_like(gy.u), Tensor4<T>::zeros_like(gy.v)};
    const T inv = T(1.0 / (1.0 - p));
    for (size_t k = 0; k < keep.data.size(); ++k)
        if (keep.data[k]) {
            gz.u.data[k] = gy.u.data[k] * inv;
            gz.v.data[k] = gy.v.data[k] * inv;
        }
    return gz;
}

#define ROTEQ_INSTANTIATE_VECFIELD(T)                                                             \
    template Tensor4<T> stack_uv<T>(const VectorField<T>&);                                       \
    template VectorField<T> split_uv<T>(const Tensor4<T>&);                                       \
    template Tensor4<T> vecconv<T>(const VectorField<T>&, const std::vector<VectorFilter<T>>&, int); \
    template VecConvGrads<T> vecconv_backward<T>(const VectorField<T>&,                           \
                                                 const std::vector<VectorFilter<T>>&, int,        \
                                                 const Tensor4<T>&);                              \
    template VectorFilter<T> rotate_vector_filter<T>(const VectorFilter<T>&, double);             \
    template RotStack<T> vec_rotconv<T>(const VectorField<T>&, const std::vector<VectorFilter<T>>&, \
                                        const OrientationSet&, int);                              \
    template VecConvGrads<T> vec_rotconv_backward<T>(const VectorField<T>&,                       \
                                                     const std::vector<VectorFilter<T>>&,         \
                                                     const OrientationSet&, int, const RotStack<T>&); \
    template std::pair<VectorField<T>, PoolIndices> vec_maxpool2x2<T>(const VectorField<T>&);     \
    template VectorField<T> vec_maxpool2x2_backward<T>(const PoolIndices&, const VectorField<T>&); \
    template VectorField<T> vec_batchnorm<T>(const VectorField<T>&, const std::vector<T>&,        \
                                             std::vector<T>&, T, T, bool, VecBnCache<T>*);        \
    template VecBnGrads<T> vec_batchnorm_backward<T>(const VectorField<T>&, const std::vector<T>&, \
                                                     const VecBnCache<T>&, T, const VectorField<T>&); \
    template VectorField<T> vec_upsample_bilinear<T>(const VectorField<T>&, int);                 \
    template VectorField<T> vec_upsample_bilinear_backward<T>(const VectorField<T>&, int);        \
    template std::pair<VectorField<T>, Tensor4<uint8_t>> vec_dropout<T>(const VectorField<T>&,    \
                                                                        double, Rng&);            \
    template VectorField<T> vec_dropout_backward<T>(const Tensor4<uint8_t>&, double,              \
                                                    const VectorField<T>&);

ROTEQ_INSTANTIATE_VECFIELD(float)
ROTEQ_INSTANTIATE_VECFIELD(double)

}  // namespace roteq
