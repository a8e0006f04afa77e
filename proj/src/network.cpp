#include "roteq/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "roteq/common.hpp"
#include "roteq/parallel.hpp"

namespace roteq {

std::vector<int> ModelConfig::filters_per_block() const {
    std::vector<int> f(layer_multipliers.size());
    for (size_t i = 0; i < f.size(); ++i) f[i] = layer_multipliers[i] * Nf;
    return f;
}

std::vector<int> ModelConfig::resolved_mlp_widths() const {
    if (!mlp_widths.empty()) return mlp_widths;
    return {50 * Nf, 50 * Nf, C};
}

void ModelConfig::validate() const {
    check(Nf >= 1, "model.Nf must be >= 1");
    check(R >= 1, "model.R must be >= 1");
    check(C >= 2, "model.C must be >= 2");
    check(in_channels >= 1, "model.in_channels must be >= 1");
    check(filter_size >= 1 && (filter_size % 2) == 1, "model.filter_size must be odd");
    check(layer_multipliers.size() == 6, "model.layer_multipliers must have 6 entries");
    for (int v : layer_multipliers) check(v >= 1, "model.layer_multipliers entries must be >= 1");
    const auto widths = resolved_mlp_widths();
    check(!widths.empty() && widths.back() == C, "model.mlp_widths must end with C");
    for (int v : widths) check(v >= 1, "model.mlp_widths entries must be >= 1");
    check(variant == "roteqnet" || variant == "baseline",
          "model.variant must be 'roteqnet' or 'baseline', got '" + variant + "'");
    check(bn_eps > 0.0, "model.bn_eps must be positive");
    check(bn_momentum > 0.0 && bn_momentum <= 1.0, "model.bn_momentum must lie in (0,1]");
    check(dropout >= 0.0 && dropout < 1.0, "model.dropout must lie in [0,1)");
}

std::string to_canonical_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["Nf"] = cfg.Nf;
    j["R"] = cfg.R;
    j["C"] = cfg.C;
    j["in_channels"] = cfg.in_channels;
    j["filter_size"] = cfg.filter_size;
    j["layer_multipliers"] = cfg.layer_multipliers;
    j["mlp_widths"] = cfg.resolved_mlp_widths();
    j["variant"] = cfg.variant;
    j["bn_eps"] = cfg.bn_eps;
    j["bn_momentum"] = cfg.bn_momentum;
    j["dropout"] = cfg.dropout;
    j["paper_literal_backward"] = cfg.paper_literal_backward;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text, const std::string& path_prefix) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw std::invalid_argument(path_prefix + ": invalid JSON (" + e.what() + ")");
    }
    check(j.is_object(), path_prefix + ": expected an object");

    ModelConfig cfg;
    auto path = [&](const std::string& key) { return path_prefix + "/" + key; };
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const auto& v = it.value();
        auto want_int = [&]() {
            check(v.is_number_integer(), path(k) + ": expected an integer");
            return v.get<int>();
        };
        auto want_num = [&]() {
            check(v.is_number(), path(k) + ": expected a number");
            return v.get<double>();
        };
        if (k == "Nf") cfg.Nf = want_int();
        else if (k == "R") cfg.R = want_int();
        else if (k == "C") cfg.C = want_int();
        else if (k == "in_channels") cfg.in_channels = want_int();
        else if (k == "filter_size") cfg.filter_size = want_int();
        else if (k == "layer_multipliers" || k == "mlp_widths") {
            check(v.is_array(), path(k) + ": expected an array of integers");
            std::vector<int> vals;
            for (const auto& e : v) {
                check(e.is_number_integer(), path(k) + ": expected an array of integers");
                vals.push_back(e.get<int>());
            }
            (k == "layer_multipliers" ? cfg.layer_multipliers : cfg.mlp_widths) = vals;
        } else if (k == "variant") {
            check(v.is_string(), path(k) + ": expected a string");
            cfg.variant = v.get<std::string>();
        } else if (k == "bn_eps") cfg.bn_eps = want_num();
        else if (k == "bn_momentum") cfg.bn_momentum = want_num();
        else if (k == "dropout") cfg.dropout = want_num();
        else if (k == "paper_literal_backward") {
            check(v.is_boolean(), path(k) + ": expected a boolean");
            cfg.paper_literal_backward = v.get<bool>();
        } else {
            throw std::invalid_argument(path(k) + ": unknown key");
        }
    }
    try {
        cfg.validate();
    } catch (const std::exception& e) {
        throw std::invalid_argument(path_prefix + ": " + e.what());
    }
    return cfg;
}

template <typename T>
Tensor4<T> scalar_batchnorm(const Tensor4<T>& x, const std::vector<T>& gamma,
                            const std::vector<T>& beta, std::vector<T>& running_mean,
                            std::vector<T>& running_var, T eps, T momentum, bool train,
                            ScalarBnCache<T>* cache) {
    check(int(gamma.size()) == x.c && int(beta.size()) == x.c,
          "scalar_batchnorm: expected " + std::to_string(x.c) + " per-channel parameters");
    check(x.n >= 1, "scalar_batchnorm: empty batch");
    const size_t per = size_t(x.n) * x.h * x.w;
    if (train) check(per >= 2, "scalar_batchnorm: training needs more than one location");

    Tensor4<T> out(x.n, x.c, x.h, x.w);
    Tensor4<T> xhat;
    std::vector<T> inv_std(size_t(x.c));
    if (train) xhat = Tensor4<T>(x.n, x.c, x.h, x.w);

    const size_t plane = size_t(x.h) * x.w;
    for (int j = 0; j < x.c; ++j) {
        double mean, inv;
        if (train) {
            double sum = 0.0;
            for (int i = 0; i < x.n; ++i) {
                const T* p = x.plane(i, j);
                for (size_t k = 0; k < plane; ++k) sum += double(p[k]);
            }
            mean = sum / double(per);
            double ss = 0.0;
            for (int i = 0; i < x.n; ++i) {
                const T* p = x.plane(i, j);
                for (size_t k = 0; k < plane; ++k) {
                    const double d = double(p[k]) - mean;
                    ss += d * d;
                }
            }
            const double var = ss / double(per);
            inv = 1.0 / std::sqrt(var + double(eps));
            running_mean[size_t(j)] = T((1.0 - double(momentum)) * double(running_mean[size_t(j)]) +
                                        double(momentum) * mean);
            running_var[size_t(j)] = T((1.0 - double(momentum)) * double(running_var[size_t(j)]) +
                                       double(momentum) * var);
        } else {
            mean = double(running_mean[size_t(j)]);
            inv = 1.0 / std::sqrt(double(running_var[size_t(j)]) + double(eps));
        }
        inv_std[size_t(j)] = T(inv);
        const double g = double(gamma[size_t(j)]), b = double(beta[size_t(j)]);
        for (int i = 0; i < x.n; ++i) {
            const T* p = x.plane(i, j);
            T* o = out.plane(i, j);
            T* xh = train ? xhat.plane(i, j) : nullptr;
            for (size_t k = 0; k < plane; ++k) {
                const double h = (double(p[k]) - mean) * inv;
                if (xh) xh[k] = T(h);
                o[k] = T(g * h + b);
            }
        }
    }
    if (cache && train) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

template <typename T>
ScalarBnGrads<T> scalar_batchnorm_backward(const std::vector<T>& gamma,
                                           const ScalarBnCache<T>& cache, const Tensor4<T>& gy) {
    const Tensor4<T>& xhat = cache.xhat;
    check(gy.same_shape(xhat), "scalar_batchnorm_backward: shape mismatch");
    ScalarBnGrads<T> out;
    out.gx = Tensor4<T>(gy.n, gy.c, gy.h, gy.w);
    out.ggamma.assign(size_t(gy.c), T(0));
    out.gbeta.assign(size_t(gy.c), T(0));
    const size_t plane = size_t(gy.h) * gy.w;
    const double N = double(size_t(gy.n) * gy.h * gy.w);

    parallel_for(gy.c, [&](int j) {
        double sg = 0.0, sgx = 0.0;
        for (int i = 0; i < gy.n; ++i) {
            const T* g = gy.plane(i, j);
            const T* xh = xhat.plane(i, j);
            for (size_t k = 0; k < plane; ++k) {
                sg += double(g[k]);
                sgx += double(g[k]) * xh[k];
            }
        }
        out.ggamma[size_t(j)] = T(sgx);
        out.gbeta[size_t(j)] = T(sg);
        const double a = double(gamma[size_t(j)]) * double(cache.inv_std[size_t(j)]);
        const double mg = sg / N, mgx = sgx / N;
        for (int i = 0; i < gy.n; ++i) {
            const T* g = gy.plane(i, j);
            const T* xh = xhat.plane(i, j);
            T* o = out.gx.plane(i, j);
            for (size_t k = 0; k < plane; ++k)
                o[k] = T(a * (double(g[k]) - mg - double(xh[k]) * mgx));
        }
    });
    return out;
}

// Per-cell modulus of a vector field; the rotation-invariant hypercolumn tap.
template <typename T>
Tensor4<T> field_magnitude(const VectorField<T>& z) {
    Tensor4<T> out = Tensor4<T>::zeros_like(z.u);
    for (size_t k = 0; k < out.data.size(); ++k)
        out.data[k] = T(std::hypot(double(z.u.data[k]), double(z.v.data[k])));
    return out;
}

template <typename T>
VectorField<T> field_magnitude_backward(const VectorField<T>& z, const Tensor4<T>& gmag) {
    VectorField<T> gz{Tensor4<T>::zeros_like(z.u), Tensor4<T>::zeros_like(z.v)};
    for (size_t k = 0; k < gmag.data.size(); ++k) {
        const double m = std::hypot(double(z.u.data[k]), double(z.v.data[k]));
        if (m == 0.0) continue;
        const double g = double(gmag.data[k]) / m;
        gz.u.data[k] = T(g * double(z.u.data[k]));
        gz.v.data[k] = T(g * double(z.v.data[k]));
    }
    return gz;
}

template <typename T>
Tensor4<T> hypercolumn_concat(const std::vector<const Tensor4<T>*>& features,
                              const Tensor4<T>& raw) {
    int channels = raw.c;
    for (const Tensor4<T>* f : features) {
        check(f->n == raw.n && f->h == raw.h && f->w == raw.w,
              "hypercolumn_concat: feature " + f->shape_str() + " does not match raw " +
                  raw.shape_str());
        channels += f->c;
    }
    Tensor4<T> out(raw.n, channels, raw.h, raw.w);
    const size_t plane = size_t(raw.h) * raw.w;
    for (int i = 0; i < raw.n; ++i) {
        int off = 0;
        for (const Tensor4<T>* f : features)
            for (int j = 0; j < f->c; ++j)
                std::memcpy(out.plane(i, off++), f->plane(i, j), sizeof(T) * plane);
        for (int j = 0; j < raw.c; ++j)
            std::memcpy(out.plane(i, off++), raw.plane(i, j), sizeof(T) * plane);
    }
    return out;
}

namespace {

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

} // namespace

template <typename T>
Tensor4<T> pad_to_multiple_reflect(const Tensor4<T>& x, int multiple) {
    check(multiple >= 1, "pad_to_multiple_reflect: multiple must be >= 1");
    const int sh = (x.h + multiple - 1) / multiple * multiple;
    const int sw = (x.w + multiple - 1) / multiple * multiple;
    if (sh == x.h && sw == x.w) return x;
    Tensor4<T> out(x.n, x.c, sh, sw);
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j)
            for (int y = 0; y < sh; ++y) {
                const int sy = reflect_index(y, x.h);
                for (int xx = 0; xx < sw; ++xx)
                    out.at(i, j, y, xx) = x.at(i, j, sy, reflect_index(xx, x.w));
            }
    return out;
}

template <typename T>
Tensor4<T> crop_spatial(const Tensor4<T>& x, int h, int w) {
    check(h <= x.h && w <= x.w, "crop_spatial: target larger than input");
    Tensor4<T> out(x.n, x.c, h, w);
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j)
            for (int y = 0; y < h; ++y)
                std::memcpy(out.row(i, j, y), x.row(i, j, y), sizeof(T) * size_t(w));
    return out;
}

namespace {

template <typename T>
Tensor4<T> take_channels(const Tensor4<T>& x, int c0, int cnt) {
    Tensor4<T> out(x.n, cnt, x.h, x.w);
    const size_t plane = size_t(x.h) * x.w;
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < cnt; ++j)
            std::memcpy(out.plane(i, j), x.plane(i, c0 + j), sizeof(T) * plane);
    return out;
}

template <typename T>
std::pair<Tensor4<T>, Tensor4<uint8_t>> scalar_dropout(const Tensor4<T>& x, double p, Rng& rng) {
    Tensor4<uint8_t> keep(x.n, x.c, x.h, x.w);
    Tensor4<T> out = Tensor4<T>::zeros_like(x);
    const T inv = T(1.0 / (1.0 - p));
    for (size_t k = 0; k < x.data.size(); ++k) {
        const bool kept = !rng.bernoulli(p);
        keep.data[k] = kept ? 1 : 0;
        if (kept) out.data[k] = x.data[k] * inv;
    }
    return {std::move(out), std::move(keep)};
}

template <typename T>
Tensor4<T> scalar_dropout_backward(const Tensor4<uint8_t>& keep, double p, const Tensor4<T>& gy) {
    Tensor4<T> gx = Tensor4<T>::zeros_like(gy);
    const T inv = T(1.0 / (1.0 - p));
    for (size_t k = 0; k < keep.data.size(); ++k)
        if (keep.data[k]) gx.data[k] = gy.data[k] * inv;
    return gx;
}

template <typename T>
void add_field(VectorField<T>& dst, const VectorField<T>& src) {
    for (size_t k = 0; k < dst.u.data.size(); ++k) dst.u.data[k] += src.u.data[k];
    for (size_t k = 0; k < dst.v.data.size(); ++k) dst.v.data[k] += src.v.data[k];
}

template <typename T>
void add_tensor(Tensor4<T>& dst, const Tensor4<T>& src) {
    for (size_t k = 0; k < dst.data.size(); ++k) dst.data[k] += src.data[k];
}

} // namespace

template <typename T>
Model<T> Model<T>::build(const ModelConfig& cfg) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    m.orient = OrientationSet::make(cfg.R);
    m.mask = circular_mask(cfg.filter_size);

    const auto F = cfg.filters_per_block();
    const int ms = cfg.filter_size;
    const bool vec = cfg.variant == "roteqnet";
    m.blocks.resize(F.size());
    int depth = cfg.in_channels;
    for (size_t b = 0; b < F.size(); ++b) {
        BlockState<T>& bl = m.blocks[b];
        const int f = F[b];
        if (vec) {
            if (b == 0) {
                bl.scalar_filters.resize(size_t(f));
                for (auto& cf : bl.scalar_filters) cf.weights = Tensor4<T>(1, depth, ms, ms);
            } else {
                bl.vec_filters.resize(size_t(f));
                for (auto& vf : bl.vec_filters) {
                    vf.wu = Tensor4<T>(1, depth, ms, ms);
                    vf.wv = Tensor4<T>(1, depth, ms, ms);
                }
            }
            bl.gamma.assign(size_t(f), T(0));
            bl.run_sigma.assign(size_t(f), T(1));
        } else {
            bl.conv_w = Tensor4<T>(f, depth, ms, ms);
            bl.conv_b.assign(size_t(f), T(0));
            bl.gamma.assign(size_t(f), T(0));
            bl.beta.assign(size_t(f), T(0));
            bl.run_mean.assign(size_t(f), T(0));
            bl.run_var.assign(size_t(f), T(1));
        }
        depth = f;
    }

    const auto widths = cfg.resolved_mlp_widths();
    int prev = m.hyper_channels();
    for (int wdt : widths) {
        m.mlp_w.emplace_back(wdt, prev, 1, 1);
        m.mlp_b.emplace_back(size_t(wdt), T(0));
        prev = wdt;
    }
    return m;
}

template <typename T>
int Model<T>::hyper_channels() const {
    const auto F = cfg.filters_per_block();
    int c = cfg.in_channels;
    for (int f : F) c += f;
    return c;
}

template <typename T>
void Model<T>::init_params(uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x696e6974ULL));
    const int cells = circular_mask_count(cfg.filter_size);
    const int full = cfg.filter_size * cfg.filter_size;
    const bool vec = cfg.variant == "roteqnet";

    auto fill_masked = [&](Tensor4<T>& w, double std) {
        for (size_t k = 0; k < w.data.size(); ++k)
            w.data[k] = mask[k % size_t(full)] ? T(rng.normal(0.0, std)) : T(0);
    };

    for (size_t b = 0; b < blocks.size(); ++b) {
        BlockState<T>& bl = blocks[b];
        if (vec) {
            if (b == 0) {
                const double std = std::sqrt(2.0 / (double(cells) * blocks[b].scalar_filters[0].weights.c));
                for (auto& cf : bl.scalar_filters) {
                    fill_masked(cf.weights, std);
                    cf.bias = T(0);
                }
            } else {
                // the filter acts on 2 stacked scalar channels per vector channel
                const double std = std::sqrt(2.0 / (double(cells) * 2.0 * bl.vec_filters[0].wu.c));
                for (auto& vf : bl.vec_filters) {
                    fill_masked(vf.wu, std);
                    fill_masked(vf.wv, std);
                    vf.bias = T(0);
                }
            }
            std::fill(bl.gamma.begin(), bl.gamma.end(), T(1));
            std::fill(bl.run_sigma.begin(), bl.run_sigma.end(), T(1));
        } else {
            const double std = std::sqrt(2.0 / (double(full) * bl.conv_w.c));
            for (T& v : bl.conv_w.data) v = T(rng.normal(0.0, std));
            std::fill(bl.conv_b.begin(), bl.conv_b.end(), T(0));
            std::fill(bl.gamma.begin(), bl.gamma.end(), T(1));
            std::fill(bl.beta.begin(), bl.beta.end(), T(0));
            std::fill(bl.run_mean.begin(), bl.run_mean.end(), T(0));
            std::fill(bl.run_var.begin(), bl.run_var.end(), T(1));
        }
    }
    for (size_t l = 0; l < mlp_w.size(); ++l) {
        const double std = std::sqrt(2.0 / double(mlp_w[l].c));
        for (T& v : mlp_w[l].data) v = T(rng.normal(0.0, std));
        std::fill(mlp_b[l].begin(), mlp_b[l].end(), T(0));
    }
}

template <typename T>
std::vector<ParamRef<T>> Model<T>::param_refs() {
    std::vector<ParamRef<T>> refs;
    const size_t full = size_t(cfg.filter_size) * cfg.filter_size;
    const bool vec = cfg.variant == "roteqnet";
    for (size_t b = 0; b < blocks.size(); ++b) {
        BlockState<T>& bl = blocks[b];
        const std::string pre = "block" + std::to_string(b + 1) + ".";
        if (vec) {
            if (b == 0) {
                for (size_t f = 0; f < bl.scalar_filters.size(); ++f) {
                    auto& cf = bl.scalar_filters[f];
                    const std::string fp = pre + "filter" + std::to_string(f) + ".";
                    refs.push_back({fp + "w", cf.weights.data.data(), cf.weights.data.size(),
                                    mask.data(), full, true});
                    refs.push_back({fp + "b", &cf.bias, 1, nullptr, 0, false});
                }
            } else {
                for (size_t f = 0; f < bl.vec_filters.size(); ++f) {
                    auto& vf = bl.vec_filters[f];
                    const std::string fp = pre + "filter" + std::to_string(f) + ".";
                    refs.push_back({fp + "wu", vf.wu.data.data(), vf.wu.data.size(), mask.data(),
                                    full, true});
                    refs.push_back({fp + "wv", vf.wv.data.data(), vf.wv.data.size(), mask.data(),
                                    full, true});
                    refs.push_back({fp + "b", &vf.bias, 1, nullptr, 0, false});
                }
            }
            refs.push_back({pre + "gamma", bl.gamma.data(), bl.gamma.size(), nullptr, 0, false});
        } else {
            refs.push_back({pre + "w", bl.conv_w.data.data(), bl.conv_w.data.size(), nullptr, 0, true});
            refs.push_back({pre + "b", bl.conv_b.data(), bl.conv_b.size(), nullptr, 0, false});
            refs.push_back({pre + "gamma", bl.gamma.data(), bl.gamma.size(), nullptr, 0, false});
            refs.push_back({pre + "beta", bl.beta.data(), bl.beta.size(), nullptr, 0, false});
        }
    }
    for (size_t l = 0; l < mlp_w.size(); ++l) {
        const std::string pre = "mlp" + std::to_string(l + 1) + ".";
        refs.push_back({pre + "w", mlp_w[l].data.data(), mlp_w[l].data.size(), nullptr, 0, true});
        refs.push_back({pre + "b", mlp_b[l].data(), mlp_b[l].size(), nullptr, 0, false});
    }
    return refs;
}

template <typename T>
std::vector<ParamRef<T>> Model<T>::buffer_refs() {
    std::vector<ParamRef<T>> refs;
    const bool vec = cfg.variant == "roteqnet";
    for (size_t b = 0; b < blocks.size(); ++b) {
        BlockState<T>& bl = blocks[b];
        const std::string pre = "block" + std::to_string(b + 1) + ".";
        if (vec) {
            refs.push_back({pre + "run_sigma", bl.run_sigma.data(), bl.run_sigma.size(), nullptr, 0, false});
        } else {
            refs.push_back({pre + "run_mean", bl.run_mean.data(), bl.run_mean.size(), nullptr, 0, false});
            refs.push_back({pre + "run_var", bl.run_var.data(), bl.run_var.size(), nullptr, 0, false});
        }
    }
    return refs;
}

template <typename T>
size_t Model<T>::parameter_count() const {
    auto refs = const_cast<Model<T>*>(this)->param_refs();
    int unmasked = 0;
    for (uint8_t v : mask) unmasked += v;
    size_t count = 0;
    for (const auto& r : refs)
        count += r.mask ? (r.size / r.mask_period) * size_t(unmasked) : r.size;
    return count;
}

template <typename T>
Tensor4<T> Model<T>::forward(const Tensor4<T>& x, bool train, ForwardCache<T>* cache,
                             Rng* dropout_rng) {
    const int down = 1 << int(blocks.size());
    check(x.c == cfg.in_channels, "forward: expected " + std::to_string(cfg.in_channels) +
                                      " input channels, got " + std::to_string(x.c));
    check(x.h % down == 0 && x.w % down == 0,
          "forward: spatial dims must be multiples of " + std::to_string(down) + ", got " +
              x.shape_str() + "; reflect-pad first (pad_to_multiple_reflect)");
    check(!(train && cache == nullptr), "forward: training mode needs a cache for backward");
    const bool drop = train && cfg.dropout > 0.0;
    check(!drop || dropout_rng, "forward: dropout needs an RNG");

    const int pad = (cfg.filter_size - 1) / 2;
    const bool vec = cfg.variant == "roteqnet";
    const T eps = T(cfg.bn_eps), mom = T(cfg.bn_momentum);
    if (cache) {
        cache->input = x;
        cache->blocks.assign(blocks.size(), {});
    }

    std::vector<Tensor4<T>> feats(blocks.size());
    VectorField<T> fcur;
    Tensor4<T> scur;
    for (size_t b = 0; b < blocks.size(); ++b) {
        BlockState<T>& bl = blocks[b];
        if (vec) {
            RotStack<T> stack = b == 0 ? rotconv_forward(x, bl.scalar_filters, orient, pad)
                                       : vec_rotconv(fcur, bl.vec_filters, orient, pad);
            auto pooled = orientation_pool(stack);
            VectorField<T> bn = vec_batchnorm(pooled.second, bl.gamma, bl.run_sigma, eps, mom,
                                              train, cache && train ? &cache->blocks[b].bn : nullptr);
            if (cache) {
                cache->blocks[b].polar = std::move(pooled.first);
                cache->blocks[b].bn_in = std::move(pooled.second);
            }
            if (drop) {
                auto dropped = vec_dropout(bn, cfg.dropout, *dropout_rng);
                bn = std::move(dropped.first);
                cache->blocks[b].keep = std::move(dropped.second);
            }
            auto pl = vec_maxpool2x2(bn);
            fcur = std::move(pl.first);
            if (cache) {
                cache->blocks[b].idx = std::move(pl.second);
                cache->blocks[b].out = fcur;
            }
            feats[b] = upsample_bilinear(field_magnitude(fcur),
                                         int(down >> (blocks.size() - 1 - b)));
        } else {
            const Tensor4<T>& in = b == 0 ? x : scur;
            Tensor4<T> pre = conv2d_ref(in, bl.conv_w, bl.conv_b, pad);
            Tensor4<T> act = relu(pre);
            Tensor4<T> bn = scalar_batchnorm(act, bl.gamma, bl.beta, bl.run_mean, bl.run_var, eps,
                                             mom, train, cache && train ? &cache->blocks[b].sbn : nullptr);
            if (cache) {
                cache->blocks[b].pre = std::move(pre);
                cache->blocks[b].bn_in_s = std::move(act);
            }
            if (drop) {
                auto dropped = scalar_dropout(bn, cfg.dropout, *dropout_rng);
                bn = std::move(dropped.first);
                cache->blocks[b].keep = std::move(dropped.second);
            }
            auto pl = maxpool2x2(bn);
            scur = std::move(pl.first);
            if (cache) {
                cache->blocks[b].idx = std::move(pl.second);
                cache->blocks[b].out_s = scur;
            }
            feats[b] = upsample_bilinear(scur, down >> (blocks.size() - 1 - b));
        }
    }

    std::vector<const Tensor4<T>*> fp;
    for (const auto& f : feats) fp.push_back(&f);
    Tensor4<T> H = hypercolumn_concat(fp, x);

    Tensor4<T> a1 = conv2d_ref(H, mlp_w[0], mlp_b[0], 0);
    Tensor4<T> r1 = relu(a1);
    Tensor4<T> a2 = conv2d_ref(r1, mlp_w[1], mlp_b[1], 0);
    Tensor4<T> r2 = relu(a2);
    Tensor4<T> logits = conv2d_ref(r2, mlp_w[2], mlp_b[2], 0);
    Tensor4<T> probs = softmax_channels(logits);

    if (cache) {
        cache->hyper = std::move(H);
        cache->a1 = std::move(a1);
        cache->r1 = std::move(r1);
        cache->a2 = std::move(a2);
        cache->r2 = std::move(r2);
        cache->logits = std::move(logits);
    }
    return probs;
}

template <typename T>
void Model<T>::backward(const ForwardCache<T>& cache, const Tensor4<T>& grad_logits,
                        Model<T>& grads, Tensor4<T>* grad_input) const {
    const int pad = (cfg.filter_size - 1) / 2;
    const bool vec = cfg.variant == "roteqnet";
    const bool drop = cfg.dropout > 0.0 && cache.blocks[0].keep.data.size() > 0;
    const auto F = cfg.filters_per_block();
    const int nb = int(blocks.size());
    const int down = 1 << nb;
    const T eps = T(cfg.bn_eps);

    // head
    Conv2dGrads<T> g3 = conv2d_backward(cache.r2, mlp_w[2], 0, grad_logits);
    add_tensor(grads.mlp_w[2], g3.gw);
    for (size_t k = 0; k < g3.gb.size(); ++k) grads.mlp_b[2][k] += g3.gb[k];
    Tensor4<T> ga2 = relu_backward(cache.a2, g3.gx);
    Conv2dGrads<T> g2 = conv2d_backward(cache.r1, mlp_w[1], 0, ga2);
    add_tensor(grads.mlp_w[1], g2.gw);
    for (size_t k = 0; k < g2.gb.size(); ++k) grads.mlp_b[1][k] += g2.gb[k];
    Tensor4<T> ga1 = relu_backward(cache.a1, g2.gx);
    Conv2dGrads<T> g1 = conv2d_backward(cache.hyper, mlp_w[0], 0, ga1);
    add_tensor(grads.mlp_w[0], g1.gw);
    for (size_t k = 0; k < g1.gb.size(); ++k) grads.mlp_b[0][k] += g1.gb[k];
    Tensor4<T>& gH = g1.gx;

    // hypercolumn channel offsets per block, raw input last
    std::vector<int> off(size_t(nb) + 1, 0);
    for (int b = 0; b < nb; ++b) off[size_t(b) + 1] = off[size_t(b)] + F[size_t(b)];

    VectorField<T> gnext_f;
    Tensor4<T> gnext_s;
    for (int b = nb - 1; b >= 0; --b) {
        const auto& cb = cache.blocks[size_t(b)];
        const BlockState<T>& bl = blocks[size_t(b)];
        BlockState<T>& gb = grads.blocks[size_t(b)];
        const int factor = down >> (nb - 1 - b);
        if (vec) {
            Tensor4<T> gmag = upsample_bilinear_backward(
                take_channels(gH, off[size_t(b)], F[size_t(b)]), factor);
            VectorField<T> gout = field_magnitude_backward(cb.out, gmag);
            if (b < nb - 1) add_field(gout, gnext_f);
            VectorField<T> gbn = vec_maxpool2x2_backward(cb.idx, gout);
            if (drop) gbn = vec_dropout_backward(cb.keep, cfg.dropout, gbn);
            VecBnGrads<T> bg = vec_batchnorm_backward(cb.bn_in, bl.gamma, cb.bn, eps, gbn);
            for (size_t k = 0; k < bg.ggamma.size(); ++k) gb.gamma[k] += bg.ggamma[k];
            RotStack<T> gstack = orientation_pool_backward(bg.gz.u, bg.gz.v, cb.polar,
                                                           cfg.paper_literal_backward);
            if (b == 0) {
                RotConvGrads<T> rg = rotconv_backward(cache.input, bl.scalar_filters, orient, pad, gstack);
                for (size_t f = 0; f < rg.gw.size(); ++f) {
                    add_tensor(gb.scalar_filters[f].weights, rg.gw[f]);
                    gb.scalar_filters[f].bias += rg.gb[f];
                }
                if (grad_input) *grad_input = std::move(rg.gx);
            } else {
                VecConvGrads<T> vg = vec_rotconv_backward(cache.blocks[size_t(b) - 1].out,
                                                          bl.vec_filters, orient, pad, gstack);
                for (size_t f = 0; f < vg.gw.size(); ++f) {
                    add_tensor(gb.vec_filters[f].wu, vg.gw[f].wu);
                    add_tensor(gb.vec_filters[f].wv, vg.gw[f].wv);
                    gb.vec_filters[f].bias += vg.gw[f].bias;
                }
                gnext_f = std::move(vg.gz);
            }
        } else {
            Tensor4<T> gout = upsample_bilinear_backward(
                take_channels(gH, off[size_t(b)], F[size_t(b)]), factor);
            if (b < nb - 1) add_tensor(gout, gnext_s);
            Tensor4<T> gbn = maxpool2x2_backward(cb.idx, gout);
            if (drop) gbn = scalar_dropout_backward(cb.keep, cfg.dropout, gbn);
            ScalarBnGrads<T> bg = scalar_batchnorm_backward(bl.gamma, cb.sbn, gbn);
            for (size_t k = 0; k < bg.ggamma.size(); ++k) {
                gb.gamma[k] += bg.ggamma[k];
                gb.beta[k] += bg.gbeta[k];
            }
            Tensor4<T> gpre = relu_backward(cb.pre, bg.gx);
            const Tensor4<T>& in = b == 0 ? cache.input : cache.blocks[size_t(b) - 1].out_s;
            Conv2dGrads<T> cg = conv2d_backward(in, bl.conv_w, pad, gpre);
            add_tensor(gb.conv_w, cg.gw);
            for (size_t k = 0; k < cg.gb.size(); ++k) gb.conv_b[k] += cg.gb[k];
            if (b == 0) {
                if (grad_input) *grad_input = std::move(cg.gx);
            } else {
                gnext_s = std::move(cg.gx);
            }
        }
    }
    if (grad_input) add_tensor(*grad_input, take_channels(gH, off[size_t(nb)], cfg.in_channels));
}

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model) {
    std::ostringstream os(std::ios::binary);
    os.write("RTQC", 4);
    auto put_u32 = [&](uint32_t v) {
        unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                              (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
        os.write(reinterpret_cast<const char*>(b), 4);
    };
    put_u32(1u);
    const std::string cfg = to_canonical_json(model.cfg);
    put_u32(uint32_t(cfg.size()));
    os.write(cfg.data(), std::streamsize(cfg.size()));

    auto params = model.param_refs();
    auto buffers = model.buffer_refs();
    put_u32(uint32_t(params.size() + buffers.size()));
    auto dump = [&](const ParamRef<T>& r) {
        put_u32(uint32_t(r.name.size()));
        os.write(r.name.data(), std::streamsize(r.name.size()));
        RtqtBlob blob;
        if constexpr (sizeof(T) == 4)
            blob = RtqtBlob::from_f32({uint32_t(r.size), 1, 1, 1},
                                      std::vector<float>(r.data, r.data + r.size));
        else
            blob = RtqtBlob::from_f64({uint32_t(r.size), 1, 1, 1},
                                      std::vector<double>(r.data, r.data + r.size));
        write_rtqt(os, blob);
    };
    for (const auto& r : params) dump(r);
    for (const auto& r : buffers) dump(r);
    atomic_write_file(path, os.str());
}

namespace {

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("RTQC: truncated stream");
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

std::string read_rtqc_header(std::istream& is, const std::string& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RTQC", 4) != 0)
        throw std::runtime_error(path + ": not an RTQC checkpoint");
    const uint32_t version = read_u32(is);
    if (version != 1)
        throw std::runtime_error(path + ": unsupported RTQC version " + std::to_string(version));
    const uint32_t len = read_u32(is);
    std::string cfg(len, '\0');
    is.read(cfg.data(), std::streamsize(len));
    if (!is) throw std::runtime_error(path + ": truncated config");
    return cfg;
}

} // namespace

ModelConfig checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return model_config_from_json(read_rtqc_header(is, path), "/checkpoint");
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    const ModelConfig cfg = model_config_from_json(read_rtqc_header(is, path), "/checkpoint");
    Model<T> model = Model<T>::build(cfg);

    std::map<std::string, ParamRef<T>> by_name;
    for (auto& r : model.param_refs()) by_name[r.name] = r;
    for (auto& r : model.buffer_refs()) by_name[r.name] = r;

    const uint32_t count = read_u32(is);
    check(count == uint32_t(by_name.size()),
          path + ": checkpoint holds " + std::to_string(count) + " blobs, model expects " +
              std::to_string(by_name.size()));
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t nlen = read_u32(is);
        std::string name(nlen, '\0');
        is.read(name.data(), std::streamsize(nlen));
        if (!is) throw std::runtime_error(path + ": truncated blob name");
        const RtqtBlob blob = read_rtqt(is);
        auto it = by_name.find(name);
        check(it != by_name.end(), path + ": unknown parameter '" + name + "'");
        check(blob.element_count() == it->second.size,
              path + ": parameter '" + name + "' holds " + std::to_string(blob.element_count()) +
                  " values, model expects " + std::to_string(it->second.size));
        T* dst = it->second.data;
        if (blob.dtype == 0)
            for (size_t k = 0; k < it->second.size; ++k) dst[k] = T(blob.f32[k]);
        else
            for (size_t k = 0; k < it->second.size; ++k) dst[k] = T(blob.f64[k]);
    }
    return model;
}

#define ROTEQ_INSTANTIATE_NETWORK(T)                                                              \
    template Tensor4<T> scalar_batchnorm<T>(const Tensor4<T>&, const std::vector<T>&,             \
                                            const std::vector<T>&, std::vector<T>&,               \
                                            std::vector<T>&, T, T, bool, ScalarBnCache<T>*);      \
    template ScalarBnGrads<T> scalar_batchnorm_backward<T>(const std::vector<T>&,                 \
                                                           const ScalarBnCache<T>&,               \
                                                           const Tensor4<T>&);                    \
    template Tensor4<T> hypercolumn_concat<T>(const std::vector<const Tensor4<T>*>&,              \
                                              const Tensor4<T>&);                                 \
    template Tensor4<T> pad_to_multiple_reflect<T>(const Tensor4<T>&, int);                       \
    template Tensor4<T> crop_spatial<T>(const Tensor4<T>&, int, int);                             \
    template struct Model<T>;                                                                     \
    template void save_checkpoint<T>(const std::string&, Model<T>&);                              \
    template Model<T> load_checkpoint<T>(const std::string&);

ROTEQ_INSTANTIATE_NETWORK(float)
ROTEQ_INSTANTIATE_NETWORK(double)

}  // namespace roteq
