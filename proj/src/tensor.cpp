#include "roteq/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "roteq/parallel.hpp"

namespace roteq {

template <typename T>
Tensor4<T> conv2d_ref(const Tensor4<T>& x, const Tensor4<T>& w,
                      const std::vector<T>& bias, int pad) {
    check(w.h == w.w && (w.h % 2) == 1, "conv2d_ref: filter size must be odd square, got " + w.shape_str());
    check(w.c == x.c, "conv2d_ref: filter depth != input channels: filters " + w.shape_str() +
                          " vs input " + x.shape_str());
    check(int(bias.size()) == w.n, "conv2d_ref: bias count " + std::to_string(bias.size()) +
                                       " != filter count " + std::to_string(w.n));
    check(pad >= 0, "conv2d_ref: negative padding");

    const int m = w.h;
    const int oh = x.h + 2 * pad - m + 1;
    const int ow = x.w + 2 * pad - m + 1;
    check(oh > 0 && ow > 0, "conv2d_ref: filter larger than padded input: filters " + w.shape_str() +
                                " vs input " + x.shape_str());

    Tensor4<T> out(x.n, w.n, oh, ow);
    parallel_for(x.n * w.n, [&](int job) {
        const int i = job / w.n;
        const int f = job % w.n;
        T* plane = out.plane(i, f);
        std::fill(plane, plane + size_t(oh) * ow, bias[size_t(f)]);
        for (int ch = 0; ch < x.c; ++ch) {
            for (int ky = 0; ky < m; ++ky) {
                for (int kx = 0; kx < m; ++kx) {
                    const T wv = w.at(f, ch, ky, kx);
                    if (wv == T(0)) continue; // masked cells and structural zeros
                    const int dy = ky - pad, dx = kx - pad;
                    const int y0 = std::max(0, -dy), y1 = std::min(oh, x.h - dy);
                    const int x0 = std::max(0, -dx), x1 = std::min(ow, x.w - dx);
                    for (int y = y0; y < y1; ++y) {
                        const T* in_row = x.row(i, ch, y + dy) + dx;
                        T* out_row = plane + size_t(y) * ow;
                        for (int xx = x0; xx < x1; ++xx) out_row[xx] += wv * in_row[xx];
                    }
                }
            }
        }
    });
    return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& w, int pad,
                               const Tensor4<T>& gy) {
    const int m = w.h;
    const int oh = x.h + 2 * pad - m + 1;
    const int ow = x.w + 2 * pad - m + 1;
    check(gy.n == x.n && gy.c == w.n && gy.h == oh && gy.w == ow,
          "conv2d_backward: upstream gradient " + gy.shape_str() + " does not match output (" +
              std::to_string(x.n) + "," + std::to_string(w.n) + "," + std::to_string(oh) + "," +
              std::to_string(ow) + ")");

    Conv2dGrads<T> g;
    g.gx = Tensor4<T>(x.n, x.c, x.h, x.w);
    g.gw = Tensor4<T>(w.n, w.c, w.h, w.w);
    g.gb.assign(size_t(w.n), T(0));

    // input gradient: scatter each output row back through the filter taps
    parallel_for(x.n, [&](int i) {
        for (int f = 0; f < w.n; ++f) {
            for (int ch = 0; ch < x.c; ++ch) {
                for (int ky = 0; ky < m; ++ky) {
                    for (int kx = 0; kx < m; ++kx) {
                        const T wv = w.at(f, ch, ky, kx);
                        if (wv == T(0)) continue;
                        const int dy = ky - pad, dx = kx - pad;
                        const int y0 = std::max(0, -dy), y1 = std::min(oh, x.h - dy);
                        const int x0 = std::max(0, -dx), x1 = std::min(ow, x.w - dx);
                        for (int y = y0; y < y1; ++y) {
                            const T* g_row = gy.row(i, f, y);
                            T* gx_row = g.gx.row(i, ch, y + dy) + dx;
                            for (int xx = x0; xx < x1; ++xx) gx_row[xx] += wv * g_row[xx];
                        }
                    }
                }
            }
        }
    });

    // weight and bias gradients: one job per filter keeps accumulation order fixed
    parallel_for(w.n, [&](int f) {
        T bsum = T(0);
        for (int i = 0; i < x.n; ++i) {
            const T* plane = gy.plane(i, f);
            for (size_t k = 0; k < size_t(oh) * ow; ++k) bsum += plane[k];
            for (int ch = 0; ch < x.c; ++ch) {
                for (int ky = 0; ky < m; ++ky) {
                    for (int kx = 0; kx < m; ++kx) {
                        const int dy = ky - pad, dx = kx - pad;
                        const int y0 = std::max(0, -dy), y1 = std::min(oh, x.h - dy);
                        const int x0 = std::max(0, -dx), x1 = std::min(ow, x.w - dx);
                        T s = T(0);
                        for (int y = y0; y < y1; ++y) {
                            const T* g_row = gy.row(i, f, y);
                            const T* in_row = x.row(i, ch, y + dy) + dx;
                            for (int xx = x0; xx < x1; ++xx) s += g_row[xx] * in_row[xx];
                        }
                        g.gw.at(f, ch, ky, kx) += s;
                    }
                }
            }
        }
        g.gb[size_t(f)] = bsum;
    });
    return g;
}

template <typename T>
std::pair<Tensor4<T>, PoolIndices> maxpool2x2(const Tensor4<T>& x) {
    check((x.h % 2) == 0 && (x.w % 2) == 0,
          "maxpool2x2: spatial dims must be even, got " + x.shape_str());
    Tensor4<T> out(x.n, x.c, x.h / 2, x.w / 2);
    PoolIndices idx(x.n, x.c, x.h / 2, x.w / 2);
    for (int i = 0; i < x.n; ++i) {
        for (int j = 0; j < x.c; ++j) {
            for (int y = 0; y < out.h; ++y) {
                const T* r0 = x.row(i, j, 2 * y);
                const T* r1 = x.row(i, j, 2 * y + 1);
                for (int xx = 0; xx < out.w; ++xx) {
                    const T v[4] = {r0[2 * xx], r0[2 * xx + 1], r1[2 * xx], r1[2 * xx + 1]};
                    int best = 0;
                    for (int k = 1; k < 4; ++k)
                        if (v[k] > v[best]) best = k; // strict: ties keep the smaller index
                    out.at(i, j, y, xx) = v[best];
                    idx.at(i, j, y, xx) = best;
                }
            }
        }
    }
    return {std::move(out), std::move(idx)};
}

template <typename T>
Tensor4<T> maxpool2x2_backward(const PoolIndices& idx, const Tensor4<T>& gy) {
    check(gy.n == idx.n && gy.c == idx.c && gy.h == idx.h && gy.w == idx.w,
          "maxpool2x2_backward: gradient " + gy.shape_str() + " != pooled shape " + idx.shape_str());
    Tensor4<T> gx(idx.n, idx.c, idx.h * 2, idx.w * 2);
    for (int i = 0; i < idx.n; ++i)
        for (int j = 0; j < idx.c; ++j)
            for (int y = 0; y < idx.h; ++y)
                for (int xx = 0; xx < idx.w; ++xx) {
                    const int k = idx.at(i, j, y, xx);
                    gx.at(i, j, 2 * y + k / 2, 2 * xx + k % 2) = gy.at(i, j, y, xx);
                }
    return gx;
}

namespace {

// Half-pixel source coordinate with clamped neighbours.
struct LerpTap {
    int lo, hi;
    double t; // weight of hi
};

LerpTap lerp_tap(int dst, int factor, int src_size) {
    const double s = (dst + 0.5) / factor - 0.5;
    double f = std::floor(s);
    LerpTap tap;
    tap.t = s - f;
    tap.lo = std::clamp(int(f), 0, src_size - 1);
    tap.hi = std::clamp(int(f) + 1, 0, src_size - 1);
    return tap;
}

} // namespace

template <typename T>
Tensor4<T> upsample_bilinear(const Tensor4<T>& x, int factor) {
    check(factor >= 1, "upsample_bilinear: factor must be >= 1, got " + std::to_string(factor));
    if (factor == 1) return x;
    Tensor4<T> out(x.n, x.c, x.h * factor, x.w * factor);
    std::vector<LerpTap> xt(size_t(out.w));
    for (int xx = 0; xx < out.w; ++xx) xt[size_t(xx)] = lerp_tap(xx, factor, x.w);
    parallel_for(x.n * x.c, [&](int job) {
        const int i = job / x.c, j = job % x.c;
        for (int y = 0; y < out.h; ++y) {
            const LerpTap ty = lerp_tap(y, factor, x.h);
            const T* r0 = x.row(i, j, ty.lo);
            const T* r1 = x.row(i, j, ty.hi);
            T* o = out.row(i, j, y);
            for (int xx = 0; xx < out.w; ++xx) {
                const LerpTap& tx = xt[size_t(xx)];
                const double a = (1 - tx.t) * r0[tx.lo] + tx.t * r0[tx.hi];
                const double b = (1 - tx.t) * r1[tx.lo] + tx.t * r1[tx.hi];
                o[xx] = T((1 - ty.t) * a + ty.t * b);
            }
        }
    });
    return out;
}

template <typename T>
Tensor4<T> upsample_bilinear_backward(const Tensor4<T>& gy, int factor) {
    check(factor >= 1, "upsample_bilinear_backward: factor must be >= 1");
    if (factor == 1) return gy;
    check(gy.h % factor == 0 && gy.w % factor == 0,
          "upsample_bilinear_backward: gradient dims not divisible by factor");
    Tensor4<T> gx(gy.n, gy.c, gy.h / factor, gy.w / factor);
    std::vector<LerpTap> xt(size_t(gy.w));
    for (int xx = 0; xx < gy.w; ++xx) xt[size_t(xx)] = lerp_tap(xx, factor, gx.w);
    parallel_for(gy.n * gy.c, [&](int job) {
        const int i = job / gy.c, j = job % gy.c;
        for (int y = 0; y < gy.h; ++y) {
            const LerpTap ty = lerp_tap(y, factor, gx.h);
            T* r0 = gx.row(i, j, ty.lo);
            T* r1 = gx.row(i, j, ty.hi);
            const T* g = gy.row(i, j, y);
            for (int xx = 0; xx < gy.w; ++xx) {
                const LerpTap& tx = xt[size_t(xx)];
                const double gv = double(g[xx]);
                r0[tx.lo] += T((1 - ty.t) * (1 - tx.t) * gv);
                r0[tx.hi] += T((1 - ty.t) * tx.t * gv);
                r1[tx.lo] += T(ty.t * (1 - tx.t) * gv);
                r1[tx.hi] += T(ty.t * tx.t * gv);
            }
        }
    });
    return gx;
}

namespace {

// 0 -> identity, 1..3 -> quarter turns CCW, -1 -> general angle
int quarter_turns(double angle_deg) {
    const double a = wrap_deg(angle_deg);
    for (int k = 0; k < 4; ++k)
        if (std::abs(a - 90.0 * k) < 1e-12) return k;
    return -1;
}

} // namespace

template <typename T>
Tensor4<T> rotate_image(const Tensor4<T>& x, double angle_deg) {
    const int q = quarter_turns(angle_deg);
    if (q == 0) return x;
    if (q > 0 && x.h == x.w) {
        const int n = x.h;
        Tensor4<T> out(x.n, x.c, n, n);
        for (int i = 0; i < x.n; ++i)
            for (int j = 0; j < x.c; ++j)
                for (int y = 0; y < n; ++y)
                    for (int xx = 0; xx < n; ++xx) {
                        int sy = y, sx = xx;
                        if (q == 1) { sy = xx; sx = n - 1 - y; }
                        if (q == 2) { sy = n - 1 - y; sx = n - 1 - xx; }
                        if (q == 3) { sy = n - 1 - xx; sx = y; }
                        out.at(i, j, y, xx) = x.at(i, j, sy, sx);
                    }
        return out;
    }

    double s, c;
    sincos_deg(angle_deg, s, c);
    const double cy = (x.h - 1) / 2.0, cx = (x.w - 1) / 2.0;
    Tensor4<T> out(x.n, x.c, x.h, x.w);
    parallel_for(x.n * x.c, [&](int job) {
        const int i = job / x.c, j = job % x.c;
        for (int y = 0; y < x.h; ++y) {
            for (int xx = 0; xx < x.w; ++xx) {
                // inverse map: sample the source at the back-rotated position
                const double xo = xx - cx, yo = y - cy;
                const double xi = xo * c - yo * s + cx;
                const double yi = xo * s + yo * c + cy;
                const int x0 = int(std::floor(xi)), y0 = int(std::floor(yi));
                const double tx = xi - x0, ty = yi - y0;
                double acc = 0.0;
                for (int dy = 0; dy <= 1; ++dy)
                    for (int dx = 0; dx <= 1; ++dx) {
                        const int yy = y0 + dy, xc = x0 + dx;
                        if (yy < 0 || yy >= x.h || xc < 0 || xc >= x.w) continue;
                        const double wgt = (dy ? ty : 1 - ty) * (dx ? tx : 1 - tx);
                        acc += wgt * double(x.at(i, j, yy, xc));
                    }
                out.at(i, j, y, xx) = T(acc);
            }
        }
    });
    return out;
}

template <typename T>
Tensor4<T> rotate_nearest(const Tensor4<T>& x, double angle_deg, T fill) {
    const int q = quarter_turns(angle_deg);
    if (q == 0) return x;
    if (q > 0 && x.h == x.w) return rotate_image(x, angle_deg); // exact permutation path

    double s, c;
    sincos_deg(angle_deg, s, c);
    const double cy = (x.h - 1) / 2.0, cx = (x.w - 1) / 2.0;
    Tensor4<T> out(x.n, x.c, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j)
            for (int y = 0; y < x.h; ++y)
                for (int xx = 0; xx < x.w; ++xx) {
                    const double xo = xx - cx, yo = y - cy;
                    const int xi = int(std::lround(xo * c - yo * s + cx));
                    const int yi = int(std::lround(xo * s + yo * c + cy));
                    out.at(i, j, y, xx) = (yi < 0 || yi >= x.h || xi < 0 || xi >= x.w)
                                              ? fill
                                              : x.at(i, j, yi, xi);
                }
    return out;
}

template <typename T>
Tensor4<T> relu(const Tensor4<T>& x) {
    Tensor4<T> out = x;
    for (T& v : out.data) v = std::max(v, T(0));
    return out;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& pre, const Tensor4<T>& gy) {
    check(pre.same_shape(gy), "relu_backward: shape mismatch " + pre.shape_str() + " vs " + gy.shape_str());
    Tensor4<T> gx = gy;
    for (size_t i = 0; i < gx.data.size(); ++i)
        if (pre.data[i] <= T(0)) gx.data[i] = T(0);
    return gx;
}

template <typename T>
Tensor4<T> softmax_channels(const Tensor4<T>& x) {
    Tensor4<T> out(x.n, x.c, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
        for (int y = 0; y < x.h; ++y)
            for (int xx = 0; xx < x.w; ++xx) {
                T mx = x.at(i, 0, y, xx);
                for (int j = 1; j < x.c; ++j) mx = std::max(mx, x.at(i, j, y, xx));
                double sum = 0.0;
                for (int j = 0; j < x.c; ++j) {
                    const double e = std::exp(double(x.at(i, j, y, xx) - mx));
                    out.at(i, j, y, xx) = T(e);
                    sum += e;
                }
                for (int j = 0; j < x.c; ++j) out.at(i, j, y, xx) = T(double(out.at(i, j, y, xx)) / sum);
            }
    return out;
}

template <typename T>
bool all_finite(const Tensor4<T>& x) {
    for (T v : x.data)
        if (!std::isfinite(double(v))) return false;
    return true;
}

#define ROTEQ_INSTANTIATE(T)                                                                      \
    template Tensor4<T> conv2d_ref<T>(const Tensor4<T>&, const Tensor4<T>&, const std::vector<T>&, int); \
    template Conv2dGrads<T> conv2d_backward<T>(const Tensor4<T>&, const Tensor4<T>&, int, const Tensor4<T>&); \
    template std::pair<Tensor4<T>, PoolIndices> maxpool2x2<T>(const Tensor4<T>&);                 \
    template Tensor4<T> maxpool2x2_backward<T>(const PoolIndices&, const Tensor4<T>&);            \
    template Tensor4<T> upsample_bilinear<T>(const Tensor4<T>&, int);                             \
    template Tensor4<T> upsample_bilinear_backward<T>(const Tensor4<T>&, int);                    \
    template Tensor4<T> rotate_image<T>(const Tensor4<T>&, double);                               \
    template Tensor4<T> rotate_nearest<T>(const Tensor4<T>&, double, T);                          \
    template Tensor4<T> relu<T>(const Tensor4<T>&);                                               \
    template Tensor4<T> relu_backward<T>(const Tensor4<T>&, const Tensor4<T>&);                   \
    template Tensor4<T> softmax_channels<T>(const Tensor4<T>&);                                   \
    template bool all_finite<T>(const Tensor4<T>&);

ROTEQ_INSTANTIATE(float)
ROTEQ_INSTANTIATE(double)
#undef ROTEQ_INSTANTIATE

template Tensor4<int32_t> rotate_nearest<int32_t>(const Tensor4<int32_t>&, double, int32_t);

} // namespace roteq
