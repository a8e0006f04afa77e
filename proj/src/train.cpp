#include "roteq/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>

#include "roteq/common.hpp"

namespace roteq {

int SgdConfig::total_epochs() const {
    int n = 0;
    for (const SgdSegment& s : schedule) n += s.epochs;
    return n;
}

SgdSegment SgdConfig::at_epoch(int epoch) const {
    int acc = 0;
    for (const SgdSegment& s : schedule) {
        acc += s.epochs;
        if (epoch < acc) return s;
    }
    check(false, "SgdConfig: epoch " + std::to_string(epoch) + " beyond schedule");
    return {};
}

void SgdConfig::validate() const {
    check(momentum >= 0.0 && momentum < 1.0, "SgdConfig: momentum must be in [0, 1)");
    check(batch_size >= 1, "SgdConfig: batch_size must be >= 1");
    check(!schedule.empty(), "SgdConfig: schedule must be non-empty");
    for (const SgdSegment& s : schedule) {
        check(s.epochs >= 1, "SgdConfig: segment epochs must be >= 1");
        check(s.lr > 0.0, "SgdConfig: learning rate must be positive");
        check(s.wd >= 0.0, "SgdConfig: weight decay must be >= 0");
    }
}

void AugmentConfig::validate() const {
    check(flip_prob >= 0.0 && flip_prob <= 1.0, "AugmentConfig: flip_prob must be in [0, 1]");
}

template <typename T>
LossResult<T> cross_entropy_loss(const Tensor4<T>& probs, const Tensor4<int32_t>& labels,
                                 int32_t ignore_id) {
    check(labels.n == probs.n && labels.c == 1 && labels.h == probs.h && labels.w == probs.w,
          "cross_entropy_loss: label dims " + labels.shape_str() + " do not match probs " +
              probs.shape_str());
    const int C = probs.c;
    LossResult<T> res;
    res.grad_logits = Tensor4<T>::zeros_like(probs);

    double nll = 0.0;
    int64_t count = 0;
    for (int i = 0; i < probs.n; ++i)
        for (int y = 0; y < probs.h; ++y)
            for (int x = 0; x < probs.w; ++x) {
                const int32_t id = labels.at(i, 0, y, x);
                if (id == ignore_id) continue;
                check(id >= 0 && id < C,
                      "cross_entropy_loss: label " + std::to_string(id) + " outside [0, " +
                          std::to_string(C) + ")");
                ++count;
                nll -= std::log(std::max(double(probs.at(i, id, y, x)), 1e-300));
            }
    check(count > 0, "cross_entropy_loss: every pixel is ignored");

    const T inv = T(1.0 / double(count));
    for (int i = 0; i < probs.n; ++i)
        for (int y = 0; y < probs.h; ++y)
            for (int x = 0; x < probs.w; ++x) {
                const int32_t id = labels.at(i, 0, y, x);
                if (id == ignore_id) continue;
                for (int j = 0; j < C; ++j) {
                    const T p = probs.at(i, j, y, x);
                    res.grad_logits.at(i, j, y, x) = (j == id ? p - T(1) : p) * inv;
                }
            }
    res.loss = nll / double(count);
    res.counted = count;
    return res;
}

template <typename T>
void sgd_step(const std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads,
              std::vector<std::vector<T>>& velocity, double lr, double wd, double momentum) {
    check(params.size() == grads.size(), "sgd_step: parameter/gradient count mismatch");
    if (velocity.empty()) velocity.resize(params.size());
    check(velocity.size() == params.size(), "sgd_step: velocity count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        const ParamRef<T>& p = params[i];
        const ParamRef<T>& g = grads[i];
        check(p.size == g.size, "sgd_step: shape mismatch for " + p.name);
        std::vector<T>& v = velocity[i];
        if (v.empty()) v.assign(p.size, T(0));
        check(v.size() == p.size, "sgd_step: velocity shape mismatch for " + p.name);
        const T decay = p.decay ? T(wd) : T(0);
        for (size_t k = 0; k < p.size; ++k) {
            if (p.mask && !p.mask[k % p.mask_period]) continue;
            v[k] = T(momentum) * v[k] - T(lr) * (g.data[k] + decay * p.data[k]);
            p.data[k] += v[k];
        }
    }
}

template <typename T>
void init_xavier_improved(T* w, size_t n, int fan_in, Rng& rng, const uint8_t* mask,
                          size_t mask_period) {
    check(fan_in > 0, "init_xavier_improved: fan_in must be positive");
    const double std = std::sqrt(2.0 / double(fan_in));
    for (size_t k = 0; k < n; ++k)
        w[k] = (!mask || mask[k % mask_period]) ? T(rng.normal(0.0, std)) : T(0);
}

template <typename T>
Tensor4<T> flip_horizontal(const Tensor4<T>& x) {
    Tensor4<T> out = Tensor4<T>::zeros_like(x);
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j)
            for (int y = 0; y < x.h; ++y)
                for (int xx = 0; xx < x.w; ++xx)
                    out.at(i, j, y, xx) = x.at(i, j, y, x.w - 1 - xx);
    return out;
}

template <typename T>
Tensor4<T> flip_vertical(const Tensor4<T>& x) {
    Tensor4<T> out = Tensor4<T>::zeros_like(x);
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j)
            for (int y = 0; y < x.h; ++y)
                for (int xx = 0; xx < x.w; ++xx)
                    out.at(i, j, y, xx) = x.at(i, j, x.h - 1 - y, xx);
    return out;
}

template <typename T>
AugmentedPatch<T> apply_augment(const Tensor4<T>& image, const Tensor4<int32_t>& labels,
                                double angle_deg, bool flip_h, bool flip_v, int32_t ignore_id) {
    check(image.n == labels.n && labels.c == 1 && image.h == labels.h && image.w == labels.w,
          "apply_augment: image/label dims mismatch");
    AugmentedPatch<T> out;
    if (angle_deg != 0.0) {
        check(image.h == image.w, "apply_augment: rotation needs square patches");
        out.image = rotate_image(image, angle_deg);
        out.labels = rotate_nearest(labels, angle_deg, ignore_id);
    } else {
        out.image = image;
        out.labels = labels;
    }
    if (flip_h) {
        out.image = flip_horizontal(out.image);
        out.labels = flip_horizontal(out.labels);
    }
    if (flip_v) {
        out.image = flip_vertical(out.image);
        out.labels = flip_vertical(out.labels);
    }
    return out;
}

template <typename T>
AugmentedPatch<T> augment(const Tensor4<T>& image, const Tensor4<int32_t>& labels,
                          const AugmentConfig& cfg, Rng& rng, int32_t ignore_id) {
    cfg.validate();
    const double angle = cfg.rotation ? rng.uniform(0.0, 360.0) : 0.0;
    const bool fh = rng.bernoulli(cfg.flip_prob);
    const bool fv = rng.bernoulli(cfg.flip_prob);
    return apply_augment(image, labels, angle, fh, fv, ignore_id);
}

std::string metrics_csv_header() { return "epoch,split,loss,oa,aa,kappa\n"; }

std::string metrics_csv_row(const EpochRow& row) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d,%s,%.6f,%.6f,%.6f,%.6f\n", row.epoch, row.split.c_str(),
                  row.loss, row.oa, row.aa, row.kappa);
    return buf;
}

namespace {

template <typename T>
void assemble_batch(const Dataset& ds, const std::vector<int>& order, size_t start, int bs,
                    Tensor4<T>& bx, Tensor4<int32_t>& by, const AugmentConfig* aug,
                    uint64_t seed, int epoch) {
    const Tensor4<float>& first = ds.images[size_t(order[start])];
    bx = Tensor4<T>(bs, first.c, first.h, first.w);
    by = Tensor4<int32_t>(bs, 1, first.h, first.w);
    for (int i = 0; i < bs; ++i) {
        const int s = order[start + size_t(i)];
        check(ds.images[size_t(s)].same_shape(first), "train_loop: mixed patch sizes");
        Tensor4<T> img = ds.images[size_t(s)].template cast<T>();
        Tensor4<int32_t> lab = ds.labels[size_t(s)];
        if (aug) {
            Rng arng(Rng::derive(seed, 0x617567ULL, uint64_t(epoch), start + size_t(i)));
            AugmentedPatch<T> ap = augment(img, lab, *aug, arng);
            img = std::move(ap.image);
            lab = std::move(ap.labels);
        }
        std::copy(img.data.begin(), img.data.end(), bx.data.begin() + size_t(i) * img.size());
        std::copy(lab.data.begin(), lab.data.end(), by.data.begin() + size_t(i) * lab.size());
    }
}

} // namespace

template <typename T>
EvalOutcome<T> evaluate(Model<T>& model, const Dataset& ds, int batch_size) {
    check(!ds.images.empty(), "evaluate: empty dataset");
    check(batch_size >= 1, "evaluate: batch_size must be >= 1");
    EvalOutcome<T> out;
    out.cm = ConfusionMatrix(model.cfg.C);
    std::vector<int> order(ds.images.size());
    std::iota(order.begin(), order.end(), 0);
    double loss_sum = 0.0;
    int64_t count_sum = 0;
    for (size_t start = 0; start < order.size(); start += size_t(batch_size)) {
        const int bs = int(std::min(size_t(batch_size), order.size() - start));
        Tensor4<T> bx;
        Tensor4<int32_t> by;
        assemble_batch(ds, order, start, bs, bx, by, nullptr, 0, 0);
        const Tensor4<T> probs = model.forward(bx, false, nullptr);
        const LossResult<T> lr = cross_entropy_loss(probs, by);
        loss_sum += lr.loss * double(lr.counted);
        count_sum += lr.counted;
        accumulate(out.cm, by, argmax_channels(probs), kIgnoreLabel);
    }
    out.loss = count_sum > 0 ? loss_sum / double(count_sum) : 0.0;
    out.result = scores(out.cm);
    return out;
}

template <typename T>
TrainResult train_loop(Model<T>& model, const Dataset& train_ds, const Dataset& val_ds,
                       const SgdConfig& sgd, const AugmentConfig& aug, const TrainOptions& opt) {
    sgd.validate();
    aug.validate();
    check(!train_ds.images.empty(), "train_loop: empty training set");
    check(!val_ds.images.empty(), "train_loop: empty validation set");

    TrainResult res;
    Model<T> grads = Model<T>::build(model.cfg);
    std::vector<ParamRef<T>> params = model.param_refs();
    std::vector<ParamRef<T>> gparams = grads.param_refs();
    std::vector<ParamRef<T>> buffers = model.buffer_refs();
    std::vector<std::vector<T>> velocity;

    auto snapshot = [&]() {
        std::vector<std::vector<T>> s;
        for (const auto& p : params) s.emplace_back(p.data, p.data + p.size);
        for (const auto& b : buffers) s.emplace_back(b.data, b.data + b.size);
        return s;
    };
    auto restore = [&](const std::vector<std::vector<T>>& s) {
        size_t k = 0;
        for (const auto& p : params) std::copy(s[k].begin(), s[k].end(), p.data), ++k;
        for (const auto& b : buffers) std::copy(s[k].begin(), s[k].end(), b.data), ++k;
    };
    std::vector<std::vector<T>> last_good = snapshot();

    std::ofstream csv;
    if (!opt.out_dir.empty()) {
        std::filesystem::create_directories(opt.out_dir);
        const std::string path = opt.out_dir + "/metrics.csv";
        const bool fresh = !std::filesystem::exists(path);
        csv.open(path, std::ios::app);
        check(bool(csv), "train_loop: cannot open " + path);
        if (fresh) csv << metrics_csv_header();
    }
    auto emit = [&](const EpochRow& row) {
        res.log.push_back(row);
        if (csv.is_open()) csv << metrics_csv_row(row) << std::flush;
        if (opt.verbose)
            std::printf("epoch %3d %-5s loss %.4f oa %.4f aa %.4f kappa %.4f\n", row.epoch,
                        row.split.c_str(), row.loss, row.oa, row.aa, row.kappa);
    };

    const int total = sgd.total_epochs();
    for (int e = 0; e < total; ++e) {
        const SgdSegment seg = sgd.at_epoch(e);
        std::vector<int> order(train_ds.images.size());
        std::iota(order.begin(), order.end(), 0);
        Rng srng(Rng::derive(opt.seed, 0x73687566ULL, uint64_t(e)));
        for (int i = int(order.size()) - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(srng.uniform_int(0, i))]);

        double loss_sum = 0.0;
        int64_t count_sum = 0;
        ConfusionMatrix cm(model.cfg.C);
        bool diverged = false;
        for (size_t start = 0; start < order.size() && !diverged;
             start += size_t(sgd.batch_size)) {
            const int bs = int(std::min(size_t(sgd.batch_size), order.size() - start));
            Tensor4<T> bx;
            Tensor4<int32_t> by;
            assemble_batch(train_ds, order, start, bs, bx, by, &aug, opt.seed, e);
            ForwardCache<T> cache;
            Rng drng(Rng::derive(opt.seed, 0x64726f70ULL, uint64_t(e), start));
            const Tensor4<T> probs = model.forward(bx, true, &cache, &drng);
            const LossResult<T> lr = cross_entropy_loss(probs, by);
            if (!std::isfinite(lr.loss)) {
                diverged = true;
                break;
            }
            loss_sum += lr.loss * double(lr.counted);
            count_sum += lr.counted;
            accumulate(cm, by, argmax_channels(probs), kIgnoreLabel);
            for (const auto& g : gparams) std::fill(g.data, g.data + g.size, T(0));
            model.backward(cache, lr.grad_logits, grads);
            sgd_step(params, gparams, velocity, seg.lr, seg.wd, sgd.momentum);
        }
        if (diverged) {
            restore(last_good);
            res.aborted = true;
            break;
        }

        const Scores st = scores(cm);
        emit({e, "train", count_sum > 0 ? loss_sum / double(count_sum) : 0.0, st.oa, st.aa,
              st.kappa});
        EvalOutcome<T> vo = evaluate(model, val_ds, sgd.batch_size);
        emit({e, "val", vo.loss, vo.result.oa, vo.result.aa, vo.result.kappa});
        if (vo.result.oa > res.best_val_oa || res.best_epoch < 0) {
            res.best_val_oa = vo.result.oa;
            res.best_epoch = e;
            if (!opt.out_dir.empty()) save_checkpoint(opt.out_dir + "/best.rtqc", model);
        }
        last_good = snapshot();
        res.epochs_run = e + 1;
    }
    if (!opt.out_dir.empty()) save_checkpoint(opt.out_dir + "/final.rtqc", model);
    return res;
}

// ---------------------------------------------------------------------------
// finite-difference gradient checks (64-bit)

namespace {

constexpr double kFdEps = 1e-4;

struct EvalOut {
    double loss = 0.0;
    uint64_t sig = 0; // discrete decision signature; mismatch across +/- probes skips the coord
};

struct GcCase {
    std::string name;
    double threshold = 1e-5;
    std::vector<double*> coords;
    std::function<EvalOut()> eval;
    std::function<std::vector<double>()> analytic;
    std::function<bool()> healthy = [] { return true; };
};

uint64_t sig_mix(uint64_t h, uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ULL;
    h *= 1099511628211ULL;
    return h;
}

uint64_t sig_ints(uint64_t h, const int32_t* p, size_t n) {
    for (size_t i = 0; i < n; ++i) h = sig_mix(h, uint64_t(uint32_t(p[i])));
    return h;
}

template <typename V>
uint64_t sig_guard_bits(uint64_t h, const V& vals, double guard) {
    for (double v : vals) h = sig_mix(h, v > guard ? 1 : 0);
    return h;
}

Tensor4<double> rand_tensor(int n, int c, int h, int w, Rng& rng, double scale = 1.0) {
    Tensor4<double> t(n, c, h, w);
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

CanonicalFilter<double> rand_canonical(int d, int m, Rng& rng, double scale) {
    CanonicalFilter<double> f;
    f.weights = Tensor4<double>(1, d, m, m);
    const std::vector<uint8_t> mask = circular_mask(m);
    for (int j = 0; j < d; ++j)
        for (int k = 0; k < m * m; ++k)
            f.weights.data[size_t(j) * m * m + k] = mask[size_t(k)] ? scale * rng.normal() : 0.0;
    f.bias = scale * rng.normal();
    return f;
}

VectorFilter<double> rand_vector_filter(int d, int m, Rng& rng, double scale) {
    VectorFilter<double> f;
    f.wu = rand_canonical(d, m, rng, scale).weights;
    f.wv = rand_canonical(d, m, rng, scale).weights;
    f.bias = scale * rng.normal();
    return f;
}

void push_coords(GcCase& c, Tensor4<double>& t) {
    for (double& v : t.data) c.coords.push_back(&v);
}

void append(std::vector<double>& out, const Tensor4<double>& t) {
    out.insert(out.end(), t.data.begin(), t.data.end());
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// minimum over locations of (winner - runner-up) in a stack, and min |winner|
void stack_margins(const RotStack<double>& y, double& min_gap, double& min_abs) {
    min_gap = y.R > 1 ? 1e30 : 1.0;
    min_abs = 1e30;
    for (int i = 0; i < y.n; ++i)
        for (int j = 0; j < y.f; ++j)
            for (int yy = 0; yy < y.h; ++yy)
                for (int xx = 0; xx < y.w; ++xx) {
                    double best = -1e30, second = -1e30;
                    for (int r = 0; r < y.R; ++r) {
                        const double v = y.at(i, j, r, yy, xx);
                        if (v > best) {
                            second = best;
                            best = v;
                        } else if (v > second) {
                            second = v;
                        }
                    }
                    if (y.R > 1) min_gap = std::min(min_gap, best - second);
                    min_abs = std::min(min_abs, std::abs(best));
                }
}

GcCase make_conv2d(uint64_t seed) {
    struct S {
        Tensor4<double> x, w, gy;
        std::vector<double> b;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    s->x = rand_tensor(1, 2, 6, 6, rng);
    s->w = rand_tensor(2, 2, 3, 3, rng, 0.5);
    s->b = {rng.normal(), rng.normal()};
    s->gy = rand_tensor(1, 2, 6, 6, rng);

    GcCase c;
    c.name = "conv2d";
    c.threshold = 1e-7;
    push_coords(c, s->x);
    push_coords(c, s->w);
    for (double& v : s->b) c.coords.push_back(&v);
    c.eval = [s] {
        const Tensor4<double> y = conv2d_ref(s->x, s->w, s->b, 1);
        return EvalOut{dot(y.data, s->gy.data), 0};
    };
    c.analytic = [s] {
        const Conv2dGrads<double> g = conv2d_backward(s->x, s->w, 1, s->gy);
        std::vector<double> out;
        append(out, g.gx);
        append(out, g.gw);
        out.insert(out.end(), g.gb.begin(), g.gb.end());
        return out;
    };
    return c;
}

GcCase make_rotconv(uint64_t seed, int m, int R, int d) {
    struct S {
        Tensor4<double> x;
        std::vector<CanonicalFilter<double>> filters;
        OrientationSet orient;
        int pad;
        RotStack<double> gy;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    const int hw = m >= 7 ? 6 : 8;
    s->x = rand_tensor(1, d, hw, hw, rng);
    s->filters = {rand_canonical(d, m, rng, 0.5), rand_canonical(d, m, rng, 0.5)};
    s->orient = OrientationSet::make(R);
    s->pad = (m - 1) / 2;
    s->gy = RotStack<double>(1, 2, R, hw, hw);
    for (double& v : s->gy.data) v = rng.normal();

    GcCase c;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "rotconv[m=%d,R=%d,d=%d]", m, R, d);
    c.name = buf;
    c.threshold = 1e-5;
    push_coords(c, s->x);
    for (auto& f : s->filters) {
        push_coords(c, f.weights);
        c.coords.push_back(&f.bias);
    }
    c.eval = [s] {
        const RotStack<double> y = rotconv_forward(s->x, s->filters, s->orient, s->pad);
        return EvalOut{dot(y.data, s->gy.data), 0};
    };
    c.analytic = [s] {
        const RotConvGrads<double> g = rotconv_backward(s->x, s->filters, s->orient, s->pad, s->gy);
        std::vector<double> out;
        append(out, g.gx);
        for (size_t f = 0; f < s->filters.size(); ++f) {
            append(out, g.gw[f]);
            out.push_back(g.gb[f]);
        }
        return out;
    };
    return c;
}

GcCase make_orientpool(uint64_t seed, int m, int R) {
    struct S {
        Tensor4<double> x, gu, gv;
        std::vector<CanonicalFilter<double>> filters;
        OrientationSet orient;
        int pad;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    const int d = 2, hw = 6;
    s->x = rand_tensor(1, d, hw, hw, rng);
    s->filters = {rand_canonical(d, m, rng, 0.5), rand_canonical(d, m, rng, 0.5)};
    s->orient = OrientationSet::make(R);
    s->pad = (m - 1) / 2;
    s->gu = rand_tensor(1, 2, hw, hw, rng);
    s->gv = rand_tensor(1, 2, hw, hw, rng);

    GcCase c;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "orientpool[m=%d,R=%d]", m, R);
    c.name = buf;
    c.threshold = 1e-5;
    push_coords(c, s->x);
    for (auto& f : s->filters) {
        push_coords(c, f.weights);
        c.coords.push_back(&f.bias);
    }
    auto forward = [s] { return rotconv_forward(s->x, s->filters, s->orient, s->pad); };
    c.eval = [s, forward] {
        const RotStack<double> y = forward();
        const auto [polar, field] = orientation_pool(y);
        uint64_t h = sig_ints(0, polar.argmax.data.data(), polar.argmax.size());
        h = sig_guard_bits(h, polar.rho.data, 0.0);
        return EvalOut{dot(field.u.data, s->gu.data) + dot(field.v.data, s->gv.data), h};
    };
    c.analytic = [s, forward] {
        const RotStack<double> y = forward();
        const auto [polar, field] = orientation_pool(y);
        const RotStack<double> gy = orientation_pool_backward(s->gu, s->gv, polar);
        const RotConvGrads<double> g = rotconv_backward(s->x, s->filters, s->orient, s->pad, gy);
        std::vector<double> out;
        append(out, g.gx);
        for (size_t f = 0; f < s->filters.size(); ++f) {
            append(out, g.gw[f]);
            out.push_back(g.gb[f]);
        }
        return out;
    };
    c.healthy = [s, forward] {
        double gap = 0.0, mag = 0.0;
        stack_margins(forward(), gap, mag);
        return gap > 1e-3 && mag > 1e-3;
    };
    return c;
}

GcCase make_vecconv(uint64_t seed, int m, int d) {
    struct S {
        VectorField<double> z;
        std::vector<VectorFilter<double>> filters;
        int pad;
        Tensor4<double> gy;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    const int hw = m >= 7 ? 8 : 6;
    s->z.u = rand_tensor(1, d, hw, hw, rng);
    s->z.v = rand_tensor(1, d, hw, hw, rng);
    s->filters = {rand_vector_filter(d, m, rng, 0.5), rand_vector_filter(d, m, rng, 0.5)};
    s->pad = (m - 1) / 2;
    s->gy = rand_tensor(1, 2, hw, hw, rng);

    GcCase c;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "vecconv[m=%d,d=%d]", m, d);
    c.name = buf;
    c.threshold = 1e-7;
    push_coords(c, s->z.u);
    push_coords(c, s->z.v);
    for (auto& f : s->filters) {
        push_coords(c, f.wu);
        push_coords(c, f.wv);
        c.coords.push_back(&f.bias);
    }
    c.eval = [s] {
        const Tensor4<double> y = vecconv(s->z, s->filters, s->pad);
        return EvalOut{dot(y.data, s->gy.data), 0};
    };
    c.analytic = [s] {
        const VecConvGrads<double> g = vecconv_backward(s->z, s->filters, s->pad, s->gy);
        std::vector<double> out;
        append(out, g.gz.u);
        append(out, g.gz.v);
        for (size_t f = 0; f < s->filters.size(); ++f) {
            append(out, g.gw[f].wu);
            append(out, g.gw[f].wv);
            out.push_back(g.gw[f].bias);
        }
        return out;
    };
    return c;
}

GcCase make_vec_rotconv(uint64_t seed, int m, int R, int d) {
    struct S {
        VectorField<double> z;
        std::vector<VectorFilter<double>> filters;
        OrientationSet orient;
        int pad;
        Tensor4<double> gu, gv;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    const int hw = m >= 7 ? 8 : 6;
    s->z.u = rand_tensor(1, d, hw, hw, rng);
    s->z.v = rand_tensor(1, d, hw, hw, rng);
    s->filters = {rand_vector_filter(d, m, rng, 0.5), rand_vector_filter(d, m, rng, 0.5)};
    s->orient = OrientationSet::make(R);
    s->pad = (m - 1) / 2;
    s->gu = rand_tensor(1, 2, hw, hw, rng);
    s->gv = rand_tensor(1, 2, hw, hw, rng);

    GcCase c;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "vec_rotconv[m=%d,R=%d,d=%d]", m, R, d);
    c.name = buf;
    c.threshold = 1e-5;
    push_coords(c, s->z.u);
    push_coords(c, s->z.v);
    for (auto& f : s->filters) {
        push_coords(c, f.wu);
        push_coords(c, f.wv);
        c.coords.push_back(&f.bias);
    }
    auto forward = [s] { return vec_rotconv(s->z, s->filters, s->orient, s->pad); };
    c.eval = [s, forward] {
        const RotStack<double> y = forward();
        const auto [polar, field] = orientation_pool(y);
        uint64_t h = sig_ints(0, polar.argmax.data.data(), polar.argmax.size());
        h = sig_guard_bits(h, polar.rho.data, 0.0);
        return EvalOut{dot(field.u.data, s->gu.data) + dot(field.v.data, s->gv.data), h};
    };
    c.analytic = [s, forward] {
        const RotStack<double> y = forward();
        const auto [polar, field] = orientation_pool(y);
        const RotStack<double> gy = orientation_pool_backward(s->gu, s->gv, polar);
        const VecConvGrads<double> g =
            vec_rotconv_backward(s->z, s->filters, s->orient, s->pad, gy);
        std::vector<double> out;
        append(out, g.gz.u);
        append(out, g.gz.v);
        for (size_t f = 0; f < s->filters.size(); ++f) {
            append(out, g.gw[f].wu);
            append(out, g.gw[f].wv);
            out.push_back(g.gw[f].bias);
        }
        return out;
    };
    c.healthy = [s, forward] {
        double gap = 0.0, mag = 0.0;
        stack_margins(forward(), gap, mag);
        return gap > 1e-3 && mag > 1e-3;
    };
    return c;
}

GcCase make_vec_maxpool(uint64_t seed) {
    struct S {
        VectorField<double> z, gy;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    s->z.u = rand_tensor(1, 2, 6, 6, rng);
    s->z.v = rand_tensor(1, 2, 6, 6, rng);
    s->gy.u = rand_tensor(1, 2, 3, 3, rng);
    s->gy.v = rand_tensor(1, 2, 3, 3, rng);

    GcCase c;
    c.name = "vec_maxpool";
    c.threshold = 1e-6;
    push_coords(c, s->z.u);
    push_coords(c, s->z.v);
    c.eval = [s] {
        const auto [pooled, idx] = vec_maxpool2x2(s->z);
        const uint64_t h = sig_ints(0, idx.data.data(), idx.size());
        return EvalOut{dot(pooled.u.data, s->gy.u.data) + dot(pooled.v.data, s->gy.v.data), h};
    };
    c.analytic = [s] {
        const auto [pooled, idx] = vec_maxpool2x2(s->z);
        const VectorField<double> gz = vec_maxpool2x2_backward(idx, s->gy);
        std::vector<double> out;
        append(out, gz.u);
        append(out, gz.v);
        return out;
    };
    c.healthy = [s] {
        // margin between the strongest and second-strongest vector per window
        for (int i = 0; i < s->z.u.n; ++i)
            for (int j = 0; j < s->z.u.c; ++j)
                for (int y = 0; y < s->z.u.h; y += 2)
                    for (int x = 0; x < s->z.u.w; x += 2) {
                        double best = -1e30, second = -1e30;
                        for (int k = 0; k < 4; ++k) {
                            const int yy = y + k / 2, xx = x + k % 2;
                            const double uu = s->z.u.at(i, j, yy, xx);
                            const double vv = s->z.v.at(i, j, yy, xx);
                            const double mag = std::sqrt(uu * uu + vv * vv);
                            if (mag > best) {
                                second = best;
                                best = mag;
                            } else if (mag > second) {
                                second = mag;
                            }
                        }
                        if (best - second < 1e-3) return false;
                    }
        return true;
    };
    return c;
}

GcCase make_vec_batchnorm(uint64_t seed) {
    struct S {
        VectorField<double> z, gy;
        std::vector<double> gamma, running;
        double eps = 1e-5;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    s->z.u = rand_tensor(2, 2, 4, 4, rng);
    s->z.v = rand_tensor(2, 2, 4, 4, rng);
    s->gamma = {0.5 + rng.uniform(), 0.5 + rng.uniform()};
    s->running = {1.0, 1.0};
    s->gy.u = rand_tensor(2, 2, 4, 4, rng);
    s->gy.v = rand_tensor(2, 2, 4, 4, rng);

    GcCase c;
    c.name = "vec_batchnorm";
    c.threshold = 1e-5;
    push_coords(c, s->z.u);
    push_coords(c, s->z.v);
    for (double& g : s->gamma) c.coords.push_back(&g);
    c.eval = [s] {
        std::vector<double> run = s->running; // eval must not mutate fixture state
        VecBnCache<double> cache;
        const VectorField<double> out =
            vec_batchnorm(s->z, s->gamma, run, s->eps, 0.1, true, &cache);
        const uint64_t h = sig_guard_bits(0, cache.rho.data, 1e-3);
        return EvalOut{dot(out.u.data, s->gy.u.data) + dot(out.v.data, s->gy.v.data), h};
    };
    c.analytic = [s] {
        std::vector<double> run = s->running;
        VecBnCache<double> cache;
        vec_batchnorm(s->z, s->gamma, run, s->eps, 0.1, true, &cache);
        const VecBnGrads<double> g = vec_batchnorm_backward(s->z, s->gamma, cache, s->eps, s->gy);
        std::vector<double> out;
        append(out, g.gz.u);
        append(out, g.gz.v);
        out.insert(out.end(), g.ggamma.begin(), g.ggamma.end());
        return out;
    };
    c.healthy = [s] {
        std::vector<double> run = s->running;
        VecBnCache<double> cache;
        vec_batchnorm(s->z, s->gamma, run, s->eps, 0.1, true, &cache);
        double min_rho = 1e30;
        for (double r : cache.rho.data) min_rho = std::min(min_rho, r);
        double min_sigma = 1e30;
        for (double sg : cache.sigma) min_sigma = std::min(min_sigma, sg);
        return min_rho > 1e-2 && min_sigma > 5e-2;
    };
    return c;
}

GcCase make_scalar_batchnorm(uint64_t seed) {
    struct S {
        Tensor4<double> x, gy;
        std::vector<double> gamma, beta, rmean, rvar;
        double eps = 1e-5;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    s->x = rand_tensor(2, 3, 4, 4, rng);
    s->gamma = {0.5 + rng.uniform(), 0.5 + rng.uniform(), 0.5 + rng.uniform()};
    s->beta = {rng.normal(), rng.normal(), rng.normal()};
    s->rmean.assign(3, 0.0);
    s->rvar.assign(3, 1.0);
    s->gy = rand_tensor(2, 3, 4, 4, rng);

    GcCase c;
    c.name = "scalar_batchnorm";
    c.threshold = 1e-5;
    push_coords(c, s->x);
    for (double& g : s->gamma) c.coords.push_back(&g);
    for (double& b : s->beta) c.coords.push_back(&b);
    c.eval = [s] {
        std::vector<double> rm = s->rmean, rv = s->rvar;
        ScalarBnCache<double> cache;
        const Tensor4<double> y =
            scalar_batchnorm(s->x, s->gamma, s->beta, rm, rv, s->eps, 0.1, true, &cache);
        return EvalOut{dot(y.data, s->gy.data), 0};
    };
    c.analytic = [s] {
        std::vector<double> rm = s->rmean, rv = s->rvar;
        ScalarBnCache<double> cache;
        scalar_batchnorm(s->x, s->gamma, s->beta, rm, rv, s->eps, 0.1, true, &cache);
        const ScalarBnGrads<double> g = scalar_batchnorm_backward(s->gamma, cache, s->gy);
        std::vector<double> out;
        append(out, g.gx);
        out.insert(out.end(), g.ggamma.begin(), g.ggamma.end());
        out.insert(out.end(), g.gbeta.begin(), g.gbeta.end());
        return out;
    };
    return c;
}

GcCase make_loss(uint64_t seed) {
    struct S {
        Tensor4<double> logits;
        Tensor4<int32_t> labels;
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    s->logits = rand_tensor(1, 3, 2, 2, rng);
    s->labels = Tensor4<int32_t>(1, 1, 2, 2);
    for (int32_t& v : s->labels.data) v = int32_t(rng.uniform_int(0, 2));
    s->labels.data[3] = kIgnoreLabel;

    GcCase c;
    c.name = "loss";
    c.threshold = 1e-6;
    push_coords(c, s->logits);
    c.eval = [s] {
        const Tensor4<double> p = softmax_channels(s->logits);
        return EvalOut{cross_entropy_loss(p, s->labels).loss, 0};
    };
    c.analytic = [s] {
        const Tensor4<double> p = softmax_channels(s->logits);
        std::vector<double> out;
        append(out, cross_entropy_loss(p, s->labels).grad_logits);
        return out;
    };
    return c;
}

// two-layer micro-net: rotconv -> pool -> vec_maxpool -> vec_batchnorm ->
// vec_rotconv -> pool -> weighted sum
GcCase make_micronet(uint64_t seed) {
    struct S {
        Tensor4<double> x;
        std::vector<CanonicalFilter<double>> f1;
        std::vector<VectorFilter<double>> f2;
        std::vector<double> gamma, running;
        OrientationSet orient;
        Tensor4<double> gu, gv;
        double eps = 1e-5;

        struct Out {
            double loss;
            uint64_t sig;
            PolarField<double> polar1, polar2;
            PoolIndices idx;
            VecBnCache<double> bn;
            VectorField<double> field1, pooled, normed, field2;
        };
        Out run() const {
            Out o;
            const RotStack<double> y1 = rotconv_forward(x, f1, orient, 1);
            auto p1 = orientation_pool(y1);
            o.polar1 = std::move(p1.first);
            o.field1 = std::move(p1.second);
            auto mp = vec_maxpool2x2(o.field1);
            o.pooled = std::move(mp.first);
            o.idx = std::move(mp.second);
            std::vector<double> run_copy = running;
            o.normed = vec_batchnorm(o.pooled, gamma, run_copy, eps, 0.1, true, &o.bn);
            const RotStack<double> y2 = vec_rotconv(o.normed, f2, orient, 1);
            auto p2 = orientation_pool(y2);
            o.polar2 = std::move(p2.first);
            o.field2 = std::move(p2.second);
            o.loss = dot(o.field2.u.data, gu.data) + dot(o.field2.v.data, gv.data);
            uint64_t h = sig_ints(0, o.polar1.argmax.data.data(), o.polar1.argmax.size());
            h = sig_ints(h, o.idx.data.data(), o.idx.size());
            h = sig_ints(h, o.polar2.argmax.data.data(), o.polar2.argmax.size());
            h = sig_guard_bits(h, o.polar1.rho.data, 0.0);
            h = sig_guard_bits(h, o.polar2.rho.data, 0.0);
            h = sig_guard_bits(h, o.bn.rho.data, 1e-3);
            o.sig = h;
            return o;
        }
        double dot(const std::vector<double>& a, const std::vector<double>& b) const {
            double sum = 0.0;
            for (size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
            return sum;
        }
    };
    auto s = std::make_shared<S>();
    Rng rng(seed);
    s->x = rand_tensor(1, 1, 8, 8, rng);
    s->f1 = {rand_canonical(1, 3, rng, 0.6), rand_canonical(1, 3, rng, 0.6)};
    s->f2 = {rand_vector_filter(2, 3, rng, 0.6), rand_vector_filter(2, 3, rng, 0.6)};
    s->gamma = {0.5 + rng.uniform(), 0.5 + rng.uniform()};
    s->running = {1.0, 1.0};
    s->orient = OrientationSet::make(4);
    s->gu = rand_tensor(1, 2, 4, 4, rng);
    s->gv = rand_tensor(1, 2, 4, 4, rng);

    GcCase c;
    c.name = "micronet";
    c.threshold = 1e-5;
    push_coords(c, s->x);
    for (auto& f : s->f1) {
        push_coords(c, f.weights);
        c.coords.push_back(&f.bias);
    }
    for (double& g : s->gamma) c.coords.push_back(&g);
    for (auto& f : s->f2) {
        push_coords(c, f.wu);
        push_coords(c, f.wv);
        c.coords.push_back(&f.bias);
    }
    c.eval = [s] {
        const auto o = s->run();
        return EvalOut{o.loss, o.sig};
    };
    c.analytic = [s] {
        const auto o = s->run();
        const RotStack<double> gy2 = orientation_pool_backward(s->gu, s->gv, o.polar2);
        const VecConvGrads<double> g2 =
            vec_rotconv_backward(o.normed, s->f2, s->orient, 1, gy2);
        const VecBnGrads<double> gbn =
            vec_batchnorm_backward(o.pooled, s->gamma, o.bn, s->eps, g2.gz);
        const VectorField<double> gpool = vec_maxpool2x2_backward(o.idx, gbn.gz);
        const RotStack<double> gy1 = orientation_pool_backward(gpool.u, gpool.v, o.polar1);
        const RotConvGrads<double> g1 = rotconv_backward(s->x, s->f1, s->orient, 1, gy1);
        std::vector<double> out;
        append(out, g1.gx);
        for (size_t f = 0; f < s->f1.size(); ++f) {
            append(out, g1.gw[f]);
            out.push_back(g1.gb[f]);
        }
        out.insert(out.end(), gbn.ggamma.begin(), gbn.ggamma.end());
        for (size_t f = 0; f < s->f2.size(); ++f) {
            append(out, g2.gw[f].wu);
            append(out, g2.gw[f].wv);
            out.push_back(g2.gw[f].bias);
        }
        return out;
    };
    c.healthy = [s] {
        const RotStack<double> y1 = rotconv_forward(s->x, s->f1, s->orient, 1);
        double gap1 = 0.0, mag1 = 0.0;
        stack_margins(y1, gap1, mag1);
        if (gap1 < 1e-3 || mag1 < 1e-3) return false;
        const auto o = s->run();
        double min_rho = 1e30;
        for (double r : o.bn.rho.data) min_rho = std::min(min_rho, r);
        if (min_rho < 1e-2) return false;
        for (double sg : o.bn.sigma)
            if (sg < 5e-2) return false;
        double gap2 = 0.0, mag2 = 0.0;
        const RotStack<double> y2 = vec_rotconv(o.normed, s->f2, s->orient, 1);
        stack_margins(y2, gap2, mag2);
        if (gap2 < 1e-3 || mag2 < 1e-3) return false;
        // pooling margins
        for (int i = 0; i < o.field1.u.n; ++i)
            for (int j = 0; j < o.field1.u.c; ++j)
                for (int y = 0; y < o.field1.u.h; y += 2)
                    for (int x = 0; x < o.field1.u.w; x += 2) {
                        double best = -1e30, second = -1e30;
                        for (int k = 0; k < 4; ++k) {
                            const int yy = y + k / 2, xx = x + k % 2;
                            const double uu = o.field1.u.at(i, j, yy, xx);
                            const double vv = o.field1.v.at(i, j, yy, xx);
                            const double mag = std::sqrt(uu * uu + vv * vv);
                            if (mag > best) {
                                second = best;
                                best = mag;
                            } else if (mag > second) {
                                second = mag;
                            }
                        }
                        if (best - second < 1e-3) return false;
                    }
        return true;
    };
    return c;
}

GradCheckResult run_case(GcCase& c, uint64_t seed) {
    GradCheckResult res;
    res.name = c.name;
    res.seed = seed;
    res.threshold = c.threshold;
    const std::vector<double> an = c.analytic();
    check(an.size() == c.coords.size(), "grad_check: analytic gradient count mismatch in " +
                                            c.name);
    for (size_t i = 0; i < c.coords.size(); ++i) {
        double* p = c.coords[i];
        const double save = *p;
        *p = save + kFdEps;
        const EvalOut plus = c.eval();
        *p = save - kFdEps;
        const EvalOut minus = c.eval();
        *p = save;
        if (plus.sig != minus.sig) {
            ++res.skipped;
            continue;
        }
        const double fd = (plus.loss - minus.loss) / (2.0 * kFdEps);
        const double rel =
            std::abs(an[i] - fd) / std::max({std::abs(an[i]), std::abs(fd), 1.0});
        res.max_rel_err = std::max(res.max_rel_err, rel);
        ++res.checked;
    }
    res.pass = res.max_rel_err < res.threshold && res.checked > 0 &&
               res.skipped * 5 <= c.coords.size();
    return res;
}

using CaseMaker = std::function<GcCase(uint64_t)>;

std::vector<std::pair<std::string, CaseMaker>> case_makers() {
    std::vector<std::pair<std::string, CaseMaker>> makers;
    makers.emplace_back("conv2d", [](uint64_t s) { return make_conv2d(s); });
    for (int m : {3, 7})
        for (int R : {1, 4, 8})
            for (int d : {1, 3})
                makers.emplace_back("rotconv", [m, R, d](uint64_t s) {
                    return make_rotconv(s, m, R, d);
                });
    for (int R : {1, 4, 8})
        makers.emplace_back("orientpool",
                            [R](uint64_t s) { return make_orientpool(s, 3, R); });
    makers.emplace_back("orientpool", [](uint64_t s) { return make_orientpool(s, 7, 8); });
    makers.emplace_back("vecconv", [](uint64_t s) { return make_vecconv(s, 3, 2); });
    makers.emplace_back("vecconv", [](uint64_t s) { return make_vecconv(s, 7, 1); });
    for (int R : {4, 8})
        makers.emplace_back("vec_rotconv",
                            [R](uint64_t s) { return make_vec_rotconv(s, 3, R, 2); });
    makers.emplace_back("vec_rotconv",
                        [](uint64_t s) { return make_vec_rotconv(s, 7, 8, 1); });
    makers.emplace_back("vec_maxpool", [](uint64_t s) { return make_vec_maxpool(s); });
    makers.emplace_back("vec_batchnorm", [](uint64_t s) { return make_vec_batchnorm(s); });
    makers.emplace_back("scalar_batchnorm",
                        [](uint64_t s) { return make_scalar_batchnorm(s); });
    makers.emplace_back("loss", [](uint64_t s) { return make_loss(s); });
    makers.emplace_back("micronet", [](uint64_t s) { return make_micronet(s); });
    return makers;
}

} // namespace

std::vector<GradCheckResult> run_grad_checks(const std::string& suite, int seeds_per_case,
                                             uint64_t base_seed) {
    check(seeds_per_case >= 1, "run_grad_checks: seeds_per_case must be >= 1");
    const auto makers = case_makers();
    bool matched = false;
    std::vector<GradCheckResult> results;
    for (size_t ci = 0; ci < makers.size(); ++ci) {
        const auto& [group, maker] = makers[ci];
        if (suite != "all" && suite != group) continue;
        matched = true;
        for (int sd = 0; sd < seeds_per_case; ++sd) {
            // fixtures with degenerate margins (ties, near-zero magnitudes)
            // are re-drawn rather than checked
            GcCase c;
            uint64_t used = 0;
            bool found = false;
            for (int attempt = 0; attempt < 64 && !found; ++attempt) {
                used = Rng::derive(base_seed, ci + 1, uint64_t(sd), uint64_t(attempt));
                c = maker(used);
                found = c.healthy();
            }
            if (!found) {
                GradCheckResult res;
                res.name = c.name;
                res.seed = used;
                res.threshold = c.threshold;
                res.pass = false;
                results.push_back(res);
                continue;
            }
            results.push_back(run_case(c, used));
        }
    }
    check(matched, "run_grad_checks: unknown suite '" + suite + "'");
    return results;
}

bool grad_checks_pass(const std::vector<GradCheckResult>& results) {
    for (const GradCheckResult& r : results)
        if (!r.pass) return false;
    return !results.empty();
}

std::string grad_check_report(const std::vector<GradCheckResult>& results) {
    std::ostringstream os;
    for (const GradCheckResult& r : results) {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "%-26s seed %-20llu max_rel_err %.3e thr %.0e checked %4zu skipped %2zu %s\n",
                      r.name.c_str(), static_cast<unsigned long long>(r.seed), r.max_rel_err,
                      r.threshold, r.checked, r.skipped, r.pass ? "pass" : "FAIL");
        os << buf;
    }
    return os.str();
}

template LossResult<float> cross_entropy_loss<float>(const Tensor4<float>&,
                                                     const Tensor4<int32_t>&, int32_t);
template LossResult<double> cross_entropy_loss<double>(const Tensor4<double>&,
                                                       const Tensor4<int32_t>&, int32_t);
template void sgd_step<float>(const std::vector<ParamRef<float>>&,
                              const std::vector<ParamRef<float>>&,
                              std::vector<std::vector<float>>&, double, double, double);
template void sgd_step<double>(const std::vector<ParamRef<double>>&,
                               const std::vector<ParamRef<double>>&,
                               std::vector<std::vector<double>>&, double, double, double);
template void init_xavier_improved<float>(float*, size_t, int, Rng&, const uint8_t*, size_t);
template void init_xavier_improved<double>(double*, size_t, int, Rng&, const uint8_t*, size_t);
template Tensor4<float> flip_horizontal<float>(const Tensor4<float>&);
template Tensor4<double> flip_horizontal<double>(const Tensor4<double>&);
template Tensor4<int32_t> flip_horizontal<int32_t>(const Tensor4<int32_t>&);
template Tensor4<float> flip_vertical<float>(const Tensor4<float>&);
template Tensor4<double> flip_vertical<double>(const Tensor4<double>&);
template Tensor4<int32_t> flip_vertical<int32_t>(const Tensor4<int32_t>&);
template AugmentedPatch<float> apply_augment<float>(const Tensor4<float>&,
                                                    const Tensor4<int32_t>&, double, bool, bool,
                                                    int32_t);
template AugmentedPatch<double> apply_augment<double>(const Tensor4<double>&,
                                                      const Tensor4<int32_t>&, double, bool, bool,
                                                      int32_t);
template AugmentedPatch<float> augment<float>(const Tensor4<float>&, const Tensor4<int32_t>&,
                                              const AugmentConfig&, Rng&, int32_t);
template AugmentedPatch<double> augment<double>(const Tensor4<double>&, const Tensor4<int32_t>&,
                                                const AugmentConfig&, Rng&, int32_t);
template EvalOutcome<float> evaluate<float>(Model<float>&, const Dataset&, int);
template EvalOutcome<double> evaluate<double>(Model<double>&, const Dataset&, int);
template TrainResult train_loop<float>(Model<float>&, const Dataset&, const Dataset&,
                                       const SgdConfig&, const AugmentConfig&,
                                       const TrainOptions&);
template TrainResult train_loop<double>(Model<double>&, const Dataset&, const Dataset&,
                                        const SgdConfig&, const AugmentConfig&,
                                        const TrainOptions&);

} // namespace roteq
