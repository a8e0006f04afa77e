#include "roteq/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "roteq/common.hpp"
#include "roteq/metrics.hpp"
#include "roteq/parallel.hpp"
#include "roteq/rng.hpp"

namespace roteq {

namespace {

// deepest block whose output keeps enough pixels to measure rotation on
int probe_block(const ModelConfig& cfg, int patch_size) {
    int pick = 0;
    for (int b = 0; b < cfg.blocks(); ++b)
        if (patch_size >> (b + 1) >= 8) pick = b;
    return pick;
}

template <typename T>
Tensor4<T> magnitude_map(const VectorField<T>& f) {
    Tensor4<T> out = Tensor4<T>::zeros_like(f.u);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::sqrt(f.u.data[i] * f.u.data[i] + f.v.data[i] * f.v.data[i]);
    return out;
}

Tensor4<int32_t> support_mask(int h, int w, double angle_deg) {
    Tensor4<int32_t> ones(1, 1, h, w, 1);
    return rotate_nearest(ones, angle_deg, 0);
}

} // namespace

template <typename T>
std::vector<EquiRow> equicheck(Model<T>& model, const Dataset& ds,
                               const std::vector<double>& angles, int max_patches) {
    check(model.cfg.variant == "roteqnet", "equicheck: needs a roteqnet checkpoint");
    check(!ds.images.empty(), "equicheck: empty dataset");
    const int n = std::min<int>(max_patches, int(ds.images.size()));
    const int pb = probe_block(model.cfg, ds.info.size);

    std::vector<EquiRow> rows;
    for (double angle : angles) {
        double agree_sum = 0.0;
        int64_t agree_n = 0;
        double mag_sum = 0.0;
        int64_t mag_n = 0;
        for (int i = 0; i < n; ++i) {
            const Tensor4<T> x = ds.images[size_t(i)].template cast<T>();
            check(x.h == x.w, "equicheck: needs square patches");

            ForwardCache<T> c0;
            const Tensor4<T> p0 = model.forward(x, false, &c0);
            ForwardCache<T> cr;
            const Tensor4<T> pr = model.forward(rotate_image(x, angle), false, &cr);

            const Tensor4<int32_t> pred0 = argmax_channels(p0);
            const Tensor4<int32_t> predr = argmax_channels(pr);
            const Tensor4<int32_t> ref = rotate_nearest(pred0, angle, int32_t(-1));
            const int mh = x.h / 10, mw = x.w / 10;
            for (int y = mh; y < x.h - mh; ++y)
                for (int xx = mw; xx < x.w - mw; ++xx) {
                    const int32_t want = ref.at(0, 0, y, xx);
                    if (want < 0) continue; // outside the rotated support
                    ++agree_n;
                    if (want == predr.at(0, 0, y, xx)) ++agree_sum;
                }

            const Tensor4<T> mag0 = magnitude_map(c0.blocks[size_t(pb)].out);
            const Tensor4<T> magr = magnitude_map(cr.blocks[size_t(pb)].out);
            const Tensor4<T> ref_mag = rotate_image(mag0, angle);
            const Tensor4<int32_t> sup = support_mask(mag0.h, mag0.w, angle);
            const int fh = mag0.h / 10 + 1, fw = mag0.w / 10 + 1;
            for (int j = 0; j < mag0.c; ++j)
                for (int y = fh; y < mag0.h - fh; ++y)
                    for (int xx = fw; xx < mag0.w - fw; ++xx) {
                        if (!sup.at(0, 0, y, xx)) continue;
                        ++mag_n;
                        mag_sum += std::abs(double(magr.at(0, j, y, xx)) -
                                            double(ref_mag.at(0, j, y, xx)));
                    }
        }
        EquiRow row;
        row.angle_deg = angle;
        row.agreement = agree_n > 0 ? agree_sum / double(agree_n) : 1.0;
        row.field_mag_err = mag_n > 0 ? mag_sum / double(mag_n) : 0.0;
        rows.push_back(row);
    }
    return rows;
}

std::string equicheck_csv(const std::vector<EquiRow>& rows) {
    std::ostringstream os;
    os << "angle,agreement,field_mag_err\n";
    for (const EquiRow& r : rows) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%.2f,%.6f,%.6f\n", r.angle_deg, r.agreement,
                      r.field_mag_err);
        os << buf;
    }
    return os.str();
}

std::vector<BenchRow> bench_forward(const ModelConfig& base, const std::vector<int>& r_list,
                                    int repeats, int size) {
    check(repeats >= 1, "bench_forward: repeats must be >= 1");
    check(size % 64 == 0, "bench_forward: size must be divisible by 64");
    const int saved_threads = thread_count();
    set_thread_count(1);

    auto time_model = [&](const ModelConfig& cfg) {
        Model<float> model = Model<float>::build(cfg);
        model.init_params(7);
        Rng rng(11);
        Tensor4<float> x(1, cfg.in_channels, size, size);
        for (float& v : x.data) v = float(rng.normal());
        model.forward(x, false, nullptr); // warm-up
        std::vector<double> ms;
        for (int k = 0; k < repeats; ++k) {
            const auto t0 = std::chrono::steady_clock::now();
            model.forward(x, false, nullptr);
            const auto t1 = std::chrono::steady_clock::now();
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        std::sort(ms.begin(), ms.end());
        BenchRow row;
        row.median_ms = ms[ms.size() / 2];
        row.min_ms = ms.front();
        row.max_ms = ms.back();
        return row;
    };

    std::vector<BenchRow> rows;
    for (int R : r_list) {
        ModelConfig cfg = base;
        cfg.variant = "roteqnet";
        cfg.R = R;
        cfg.validate();
        BenchRow row = time_model(cfg);
        row.variant = "roteqnet";
        row.R = R;
        rows.push_back(row);
    }
    ModelConfig cfg = base;
    cfg.variant = "baseline";
    cfg.R = 1;
    cfg.validate();
    BenchRow row = time_model(cfg);
    row.variant = "baseline";
    row.R = 1;
    rows.push_back(row);

    set_thread_count(saved_threads);
    return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os << "variant,R,median_ms,min_ms,max_ms\n";
    for (const BenchRow& r : rows) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%d,%.3f,%.3f,%.3f\n", r.variant.c_str(), r.R,
                      r.median_ms, r.min_ms, r.max_ms);
        os << buf;
    }
    return os.str();
}

template std::vector<EquiRow> equicheck<float>(Model<float>&, const Dataset&,
                                               const std::vector<double>&, int);
template std::vector<EquiRow> equicheck<double>(Model<double>&, const Dataset&,
                                                const std::vector<double>&, int);

} // namespace roteq
