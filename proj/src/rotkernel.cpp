#include "roteq/rotkernel.hpp"

#include <cmath>
#include <cstring>

#include "roteq/common.hpp"
#include "roteq/parallel.hpp"

namespace roteq {

std::vector<uint8_t> circular_mask(int m) {
    check(m >= 1 && (m % 2) == 1, "circular_mask: size must be odd and positive, got " + std::to_string(m));
    std::vector<uint8_t> mask(size_t(m) * m, 0);
    const int c = (m - 1) / 2;
    for (int y = 0; y < m; ++y)
        for (int x = 0; x < m; ++x) {
            const int dy = y - c, dx = x - c;
            // 4*(dy^2+dx^2) <= m^2 keeps the comparison in exact integers
            if (4 * (dy * dy + dx * dx) <= m * m) mask[size_t(y) * m + x] = 1;
        }
    return mask;
}

int circular_mask_count(int m) {
    const auto mask = circular_mask(m);
    int count = 0;
    for (uint8_t v : mask) count += v;
    return count;
}

RotPlan make_rot_plan(int m, double angle_deg) {
    const auto mask = circular_mask(m);
    double s, c;
    sincos_deg(angle_deg, s, c);
    const double ctr = (m - 1) / 2.0;

    RotPlan plan;
    plan.m = m;
    plan.offsets.assign(size_t(m) * m + 1, 0);
    for (int y = 0; y < m; ++y) {
        for (int x = 0; x < m; ++x) {
            const size_t cell = size_t(y) * m + x;
            plan.offsets[cell] = int(plan.srcs.size());
            if (!mask[cell]) continue;
            const double xo = x - ctr, yo = y - ctr;
            const double xi = xo * c - yo * s + ctr;
            const double yi = xo * s + yo * c + ctr;
            const int x0 = int(std::floor(xi)), y0 = int(std::floor(yi));
            const double tx = xi - x0, ty = yi - y0;
            for (int dy = 0; dy <= 1; ++dy)
                for (int dx = 0; dx <= 1; ++dx) {
                    const int sy = y0 + dy, sx = x0 + dx;
                    if (sy < 0 || sy >= m || sx < 0 || sx >= m) continue;
                    if (!mask[size_t(sy) * m + sx]) continue;
                    const double w = (dy ? ty : 1.0 - ty) * (dx ? tx : 1.0 - tx);
                    if (w == 0.0) continue;
                    plan.srcs.push_back(sy * m + sx);
                    plan.wgts.push_back(w);
                }
        }
    }
    plan.offsets[size_t(m) * m] = int(plan.srcs.size());
    return plan;
}

template <typename T>
void apply_rot_plan(const RotPlan& plan, const T* src, T* dst) {
    const int cells = plan.m * plan.m;
    for (int k = 0; k < cells; ++k) {
        double acc = 0.0;
        for (int t = plan.offsets[k]; t < plan.offsets[k + 1]; ++t)
            acc += plan.wgts[size_t(t)] * double(src[plan.srcs[size_t(t)]]);
        dst[k] = T(acc);
    }
}

template <typename T>
void apply_rot_plan_adjoint(const RotPlan& plan, const T* grad_dst, T* grad_src) {
    const int cells = plan.m * plan.m;
    for (int k = 0; k < cells; ++k) {
        const double g = double(grad_dst[k]);
        if (g == 0.0) continue;
        for (int t = plan.offsets[k]; t < plan.offsets[k + 1]; ++t)
            grad_src[plan.srcs[size_t(t)]] += T(plan.wgts[size_t(t)] * g);
    }
}

template void apply_rot_plan<float>(const RotPlan&, const float*, float*);
template void apply_rot_plan<double>(const RotPlan&, const double*, double*);
template void apply_rot_plan_adjoint<float>(const RotPlan&, const float*, float*);
template void apply_rot_plan_adjoint<double>(const RotPlan&, const double*, double*);

OrientationSet OrientationSet::make(int R) {
    check(R >= 1, "OrientationSet: R must be >= 1, got " + std::to_string(R));
    OrientationSet o;
    o.R = R;
    o.angles.resize(size_t(R));
    for (int r = 0; r < R; ++r) o.angles[size_t(r)] = 360.0 * r / R;
    return o;
}

template <typename T>
Tensor4<T> rotate_filter(const CanonicalFilter<T>& f, double angle_deg) {
    const int m = f.size();
    check(f.weights.h == f.weights.w && f.weights.n == 1,
          "rotate_filter: weights must be (1,d,m,m), got " + f.weights.shape_str());
    const RotPlan plan = make_rot_plan(m, angle_deg);
    Tensor4<T> out(1, f.depth(), m, m);
    for (int d = 0; d < f.depth(); ++d) apply_rot_plan(plan, f.weights.plane(0, d), out.plane(0, d));
    return out;
}

template <typename T>
Tensor4<T> rotate_filter_adjoint(const Tensor4<T>& grad_rotated, double angle_deg) {
    check(grad_rotated.h == grad_rotated.w && grad_rotated.n == 1,
          "rotate_filter_adjoint: expected (1,d,m,m), got " + grad_rotated.shape_str());
    const RotPlan plan = make_rot_plan(grad_rotated.h, angle_deg);
    Tensor4<T> out(1, grad_rotated.c, grad_rotated.h, grad_rotated.w);
    for (int d = 0; d < grad_rotated.c; ++d)
        apply_rot_plan_adjoint(plan, grad_rotated.plane(0, d), out.plane(0, d));
    return out;
}

namespace {

template <typename T>
void check_filter_bank(const std::vector<CanonicalFilter<T>>& filters) {
    check(!filters.empty(), "rotconv: empty filter list");
    const int d = filters[0].depth(), m = filters[0].size();
    for (const auto& f : filters)
        check(f.depth() == d && f.size() == m,
              "rotconv: filters must share depth and size, got " + f.weights.shape_str());
}

} // namespace

template <typename T>
std::vector<Tensor4<T>> rotated_banks(const std::vector<CanonicalFilter<T>>& filters,
                                      const OrientationSet& orient) {
    check_filter_bank(filters);
    const int F = int(filters.size());
    const int d = filters[0].depth(), m = filters[0].size();
    std::vector<Tensor4<T>> banks;
    banks.reserve(size_t(orient.R));
    for (int r = 0; r < orient.R; ++r) {
        const RotPlan plan = make_rot_plan(m, orient.angles[size_t(r)]);
        Tensor4<T> bank(F, d, m, m);
        for (int f = 0; f < F; ++f)
            for (int j = 0; j < d; ++j)
                apply_rot_plan(plan, filters[size_t(f)].weights.plane(0, j), bank.plane(f, j));
        banks.push_back(std::move(bank));
    }
    return banks;
}

template <typename T>
RotStack<T> rotconv_forward(const Tensor4<T>& x, const std::vector<CanonicalFilter<T>>& filters,
                            const OrientationSet& orient, int pad) {
    check_filter_bank(filters);
    check(filters[0].depth() == x.c, "rotconv_forward: filter depth " +
                                         std::to_string(filters[0].depth()) +
                                         " != input channels " + std::to_string(x.c));
    const int F = int(filters.size());
    std::vector<T> bias(filters.size());
    for (int f = 0; f < F; ++f) bias[size_t(f)] = filters[size_t(f)].bias;

    const auto banks = rotated_banks(filters, orient);
    const int m = filters[0].size();
    const int oh = x.h + 2 * pad - m + 1, ow = x.w + 2 * pad - m + 1;
    RotStack<T> y(x.n, F, orient.R, oh, ow);
    for (int r = 0; r < orient.R; ++r) {
        const Tensor4<T> yr = conv2d_ref(x, banks[size_t(r)], bias, pad);
        for (int i = 0; i < x.n; ++i)
            for (int f = 0; f < F; ++f)
                std::memcpy(y.plane(i, f, r), yr.plane(i, f), sizeof(T) * size_t(oh) * ow);
    }
    return y;
}

template <typename T>
RotConvGrads<T> rotconv_backward(const Tensor4<T>& x, const std::vector<CanonicalFilter<T>>& filters,
                                 const OrientationSet& orient, int pad, const RotStack<T>& gy) {
    check_filter_bank(filters);
    const int F = int(filters.size());
    const int m = filters[0].size(), d = filters[0].depth();
    const int oh = x.h + 2 * pad - m + 1, ow = x.w + 2 * pad - m + 1;
    check(gy.n == x.n && gy.f == F && gy.R == orient.R && gy.h == oh && gy.w == ow,
          "rotconv_backward: gradient stack " + gy.shape_str() + " does not match forward output");

    const auto banks = rotated_banks(filters, orient);
    std::vector<RotPlan> plans;
    plans.reserve(size_t(orient.R));
    for (int r = 0; r < orient.R; ++r) plans.push_back(make_rot_plan(m, orient.angles[size_t(r)]));

    RotConvGrads<T> out;
    out.gx = Tensor4<T>(x.n, x.c, x.h, x.w);
    out.gw.assign(size_t(F), Tensor4<T>(1, d, m, m));
    out.gb.assign(size_t(F), T(0));

    Tensor4<T> gyr(x.n, F, oh, ow);
    for (int r = 0; r < orient.R; ++r) {
        for (int i = 0; i < x.n; ++i)
            for (int f = 0; f < F; ++f)
                std::memcpy(gyr.plane(i, f), gy.plane(i, f, r), sizeof(T) * size_t(oh) * ow);
        Conv2dGrads<T> g = conv2d_backward(x, banks[size_t(r)], pad, gyr);
        for (size_t k = 0; k < g.gx.data.size(); ++k) out.gx.data[k] += g.gx.data[k];
        for (int f = 0; f < F; ++f) {
            for (int j = 0; j < d; ++j)
                apply_rot_plan_adjoint(plans[size_t(r)], g.gw.plane(f, j), out.gw[size_t(f)].plane(0, j));
            out.gb[size_t(f)] += g.gb[size_t(f)];
        }
    }
    return out;
}

#define ROTEQ_INSTANTIATE_ROTKERNEL(T)                                                            \
    template Tensor4<T> rotate_filter<T>(const CanonicalFilter<T>&, double);                      \
    template Tensor4<T> rotate_filter_adjoint<T>(const Tensor4<T>&, double);                      \
    template std::vector<Tensor4<T>> rotated_banks<T>(const std::vector<CanonicalFilter<T>>&,     \
                                                      const OrientationSet&);                     \
    template RotStack<T> rotconv_forward<T>(const Tensor4<T>&, const std::vector<CanonicalFilter<T>>&, \
                                            const OrientationSet&, int);                          \
    template RotConvGrads<T> rotconv_backward<T>(const Tensor4<T>&, const std::vector<CanonicalFilter<T>>&, \
                                                 const OrientationSet&, int, const RotStack<T>&);

ROTEQ_INSTANTIATE_ROTKERNEL(float)
ROTEQ_INSTANTIATE_ROTKERNEL(double)

}  // namespace roteq
