#include "roteq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "roteq/common.hpp"
#include "roteq/io.hpp"
#include "roteq/parallel.hpp"
#include "roteq/rng.hpp"

#ifdef ROTEQ_HAS_PNG
#include <png.h>
#endif

namespace roteq {

namespace fs = std::filesystem;

const std::vector<std::string>& shape_class_names() {
    static const std::vector<std::string> names = {"background", "disc", "bar", "lshape", "ring"};
    return names;
}

const std::vector<std::array<uint8_t, 3>>& shape_class_palette() {
    static const std::vector<std::array<uint8_t, 3>> pal = {
        {{40, 40, 40}}, {{220, 70, 70}}, {{250, 210, 60}}, {{80, 140, 220}}, {{110, 210, 120}}};
    return pal;
}

void SyntheticShapesConfig::validate() const {
    check(classes >= 2 && classes <= int(shape_class_names().size()),
          "SyntheticShapesConfig: classes must be in [2, " +
              std::to_string(shape_class_names().size()) + "]");
    check(min_objects >= 0 && max_objects >= min_objects,
          "SyntheticShapesConfig: objects range must satisfy 0 <= min <= max");
    check(scale_jitter >= 0.0 && scale_jitter < 1.0,
          "SyntheticShapesConfig: scale_jitter must be in [0, 1)");
    check(noise >= 0.0, "SyntheticShapesConfig: noise must be >= 0");
}

namespace {

struct ShapeGeom {
    int class_id = 0;
    double cx = 0.0, cy = 0.0, scale = 1.0;
    double c = 1.0, s = 0.0;

    // Bounding radius around the centre, in pixels.
    double extent() const {
        switch (class_id) {
            case 1: return 6.0 * scale + 1.0;
            case 2: return 13.2 * scale + 1.0;
            case 3: return 8.6 * scale + 1.0;
            case 4: return 7.5 * scale + 1.0;
            default: return 0.0;
        }
    }

    bool inside(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double lx = c * dx + s * dy;
        const double ly = -s * dx + c * dy;
        switch (class_id) {
            case 1: {
                const double r = 6.0 * scale;
                return lx * lx + ly * ly <= r * r;
            }
            case 2:
                return std::abs(lx) <= 13.0 * scale && std::abs(ly) <= 2.0 * scale;
            case 3: {
                const double a = 10.0 * scale, t = 2.0 * scale;
                const double px = lx + 0.35 * a, py = ly + 0.35 * a;
                const bool arm_x = px >= 0.0 && px <= a && std::abs(py) <= t;
                const bool arm_y = py >= 0.0 && py <= a && std::abs(px) <= t;
                return arm_x || arm_y;
            }
            case 4: {
                const double ro = 7.5 * scale, ri = 4.5 * scale;
                const double rr = lx * lx + ly * ly;
                return rr >= ri * ri && rr <= ro * ro;
            }
            default:
                return false;
        }
    }
};

// Low-resolution value grid interpolated bilinearly over the patch.
std::vector<double> smooth_field(Rng& rng, int size, int cells) {
    const int g = cells + 1;
    std::vector<double> grid(size_t(g) * g);
    for (double& v : grid) v = rng.uniform(-0.5, 0.5);
    std::vector<double> out(size_t(size) * size);
    const double step = double(cells) / size;
    for (int y = 0; y < size; ++y) {
        const double fy = (y + 0.5) * step - 0.5;
        const double cy = std::clamp(fy, 0.0, double(cells));
        const int y0 = std::min(int(cy), cells - 1);
        const double ty = cy - y0;
        for (int x = 0; x < size; ++x) {
            const double fx = (x + 0.5) * step - 0.5;
            const double cx = std::clamp(fx, 0.0, double(cells));
            const int x0 = std::min(int(cx), cells - 1);
            const double tx = cx - x0;
            const double v00 = grid[size_t(y0) * g + x0];
            const double v01 = grid[size_t(y0) * g + x0 + 1];
            const double v10 = grid[size_t(y0 + 1) * g + x0];
            const double v11 = grid[size_t(y0 + 1) * g + x0 + 1];
            out[size_t(y) * size + x] = (1 - ty) * ((1 - tx) * v00 + tx * v01) +
                                        ty * ((1 - tx) * v10 + tx * v11);
        }
    }
    return out;
}

} // namespace

GeneratedPatch generate_patch(const SyntheticShapesConfig& cfg, uint64_t patch_seed, int size,
                              int force_first_class) {
    cfg.validate();
    check(size >= 32, "generate_patch: size must be >= 32");
    Rng rng(patch_seed);

    GeneratedPatch p;
    p.image = Tensor4<float>(1, cfg.bands(), size, size);
    p.labels = Tensor4<int32_t>(1, 1, size, size);

    const std::vector<double> bg = smooth_field(rng, size, 8);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            p.image.at(0, 0, y, x) = float(0.12 + 2.0 * cfg.noise * bg[size_t(y) * size + x]);

    const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
    constexpr int kTries = 80;
    for (int k = 0; k < count; ++k) {
        ShapeGeom geom;
        geom.class_id = (k == 0 && force_first_class > 0) ? force_first_class
                                                          : rng.uniform_int(1, cfg.classes - 1);
        check(geom.class_id < cfg.classes, "generate_patch: forced class out of range");
        const double angle = rng.uniform(0.0, 360.0);
        geom.scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter);
        sincos_deg(angle, geom.s, geom.c);
        const double intensity = rng.uniform(0.45, 0.95);
        const double margin = geom.extent();
        check(2.0 * margin < size, "generate_patch: shape larger than patch");

        bool placed = false;
        for (int t = 0; t < kTries && !placed; ++t) {
            geom.cx = rng.uniform(margin, size - 1 - margin);
            geom.cy = rng.uniform(margin, size - 1 - margin);
            const int x0 = std::max(0, int(geom.cx - margin));
            const int x1 = std::min(size - 1, int(geom.cx + margin) + 1);
            const int y0 = std::max(0, int(geom.cy - margin));
            const int y1 = std::min(size - 1, int(geom.cy + margin) + 1);
            std::vector<std::pair<int, int>> px;
            int overlap = 0;
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x)
                    if (geom.inside(x, y)) {
                        px.emplace_back(y, x);
                        if (p.labels.at(0, 0, y, x) != 0) ++overlap;
                    }
            if (px.size() < 4 || 2 * overlap > int(px.size())) continue;
            for (auto [y, x] : px) {
                p.labels.at(0, 0, y, x) = geom.class_id;
                p.image.at(0, 0, y, x) = float(intensity);
            }
            placed = true;
        }
        check(placed, "generate_patch: cannot place object without >50% overlap "
                      "(overcrowded config)");
        p.objects.push_back({geom.class_id, angle, geom.cx, geom.cy, geom.scale});
    }

    if (cfg.height_band) {
        // Height follows the object's scale, not its class.
        for (const ShapeInstance& o : p.objects) {
            ShapeGeom geom;
            geom.class_id = o.class_id;
            geom.cx = o.cx;
            geom.cy = o.cy;
            geom.scale = o.scale;
            sincos_deg(o.angle_deg, geom.s, geom.c);
            const double m = geom.extent();
            const int x0 = std::max(0, int(o.cx - m)), x1 = std::min(size - 1, int(o.cx + m) + 1);
            const int y0 = std::max(0, int(o.cy - m)), y1 = std::min(size - 1, int(o.cy + m) + 1);
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x)
                    if (geom.inside(x, y) && p.labels.at(0, 0, y, x) == o.class_id)
                        p.image.at(0, 1, y, x) = float(0.3 + 0.4 * o.scale);
        }
    }

    if (cfg.noise > 0.0) {
        const double sd = 0.5 * cfg.noise;
        for (int b = 0; b < cfg.bands(); ++b)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    p.image.at(0, b, y, x) += float(rng.normal(0.0, sd));
    }
    return p;
}

std::string dataset_manifest_json(const DatasetInfo& info) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["kind"] = "roteq-dataset";
    j["size"] = info.size;
    j["n_train"] = info.n_train;
    j["n_val"] = info.n_val;
    j["class_names"] = info.class_names;
    nlohmann::json cfg;
    cfg["classes"] = info.config.classes;
    cfg["min_objects"] = info.config.min_objects;
    cfg["max_objects"] = info.config.max_objects;
    cfg["scale_jitter"] = info.config.scale_jitter;
    cfg["noise"] = info.config.noise;
    cfg["height_band"] = info.config.height_band;
    cfg["seed"] = info.config.seed;
    j["config"] = cfg;
    nlohmann::json stats = nlohmann::json::array();
    for (const BandStats& b : info.band_stats)
        stats.push_back({{"mean", b.mean}, {"stddev", b.stddev}});
    j["band_stats"] = stats;
    j["pixel_counts"] = {{"train", info.train_pixel_counts}, {"val", info.val_pixel_counts}};
    nlohmann::json pal = nlohmann::json::array();
    for (const auto& c : shape_class_palette())
        pal.push_back({int(c[0]), int(c[1]), int(c[2])});
    j["palette"] = pal;
    return j.dump(2) + "\n";
}

DatasetInfo dataset_info_from_json(const std::string& text, const std::string& path_prefix) {
    DatasetInfo info;
    try {
        nlohmann::json j = nlohmann::json::parse(text);
        check(j.at("kind").get<std::string>() == "roteq-dataset",
              path_prefix + "/kind: not a dataset manifest");
        check(j.at("schema_version").get<int>() == 1,
              path_prefix + "/schema_version: unsupported");
        info.size = j.at("size").get<int>();
        info.n_train = j.at("n_train").get<int>();
        info.n_val = j.at("n_val").get<int>();
        info.class_names = j.at("class_names").get<std::vector<std::string>>();
        const nlohmann::json& cfg = j.at("config");
        info.config.classes = cfg.at("classes").get<int>();
        info.config.min_objects = cfg.at("min_objects").get<int>();
        info.config.max_objects = cfg.at("max_objects").get<int>();
        info.config.scale_jitter = cfg.at("scale_jitter").get<double>();
        info.config.noise = cfg.at("noise").get<double>();
        info.config.height_band = cfg.at("height_band").get<bool>();
        info.config.seed = cfg.at("seed").get<uint64_t>();
        for (const nlohmann::json& b : j.at("band_stats"))
            info.band_stats.push_back({b.at("mean").get<double>(), b.at("stddev").get<double>()});
        info.train_pixel_counts =
            j.at("pixel_counts").at("train").get<std::vector<int64_t>>();
        info.val_pixel_counts = j.at("pixel_counts").at("val").get<std::vector<int64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(path_prefix + ": " + e.what());
    }
    return info;
}

DatasetInfo read_manifest(const std::string& dir) {
    const std::string path = dir + "/manifest.json";
    std::ifstream is(path, std::ios::binary);
    check(bool(is), "read_manifest: cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return dataset_info_from_json(ss.str(), path);
}

namespace {

std::string patch_path(const std::string& dir, const std::string& split, int i,
                       bool labels) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "patch_%05d", i);
    return dir + "/" + split + "/" + buf + (labels ? ".labels.rtqt" : ".rtqt");
}

std::vector<GeneratedPatch> generate_split(const SyntheticShapesConfig& cfg, int n, int size,
                                           uint64_t split_tag) {
    std::vector<GeneratedPatch> out{size_t(n)};
    parallel_for(size_t(n), [&](size_t i) {
        const int force = cfg.classes > 1 ? int(i % size_t(cfg.classes - 1)) + 1 : -1;
        out[i] = generate_patch(cfg, Rng::derive(cfg.seed, split_tag, i), size, force);
    });
    return out;
}

std::vector<int64_t> count_pixels(const std::vector<GeneratedPatch>& patches, int classes) {
    std::vector<int64_t> counts(size_t(classes), 0);
    for (const GeneratedPatch& p : patches)
        for (int32_t id : p.labels.data) counts[size_t(id)]++;
    return counts;
}

} // namespace

DatasetInfo generate_synthetic(const SyntheticShapesConfig& cfg, int n_train, int n_val, int size,
                               const std::string& out_dir) {
    cfg.validate();
    check(size % 64 == 0, "generate_synthetic: size must be divisible by 64");
    check(n_train >= 1 && n_val >= 1, "generate_synthetic: need at least one patch per split");

    fs::create_directories(fs::path(out_dir) / "train");
    fs::create_directories(fs::path(out_dir) / "val");

    std::vector<GeneratedPatch> train = generate_split(cfg, n_train, size, 't');
    std::vector<GeneratedPatch> val = generate_split(cfg, n_val, size, 'v');

    DatasetInfo info;
    info.config = cfg;
    info.size = size;
    info.n_train = n_train;
    info.n_val = n_val;
    info.class_names.assign(shape_class_names().begin(),
                            shape_class_names().begin() + cfg.classes);
    info.train_pixel_counts = count_pixels(train, cfg.classes);
    info.val_pixel_counts = count_pixels(val, cfg.classes);

    const size_t per_band = size_t(size) * size;
    for (int b = 0; b < cfg.bands(); ++b) {
        double sum = 0.0, sq = 0.0;
        for (const GeneratedPatch& p : train)
            for (size_t i = 0; i < per_band; ++i) {
                const double v = p.image.plane(0, b)[i];
                sum += v;
                sq += v * v;
            }
        const double n = double(train.size()) * double(per_band);
        const double mean = sum / n;
        const double var = std::max(0.0, sq / n - mean * mean);
        info.band_stats.push_back({mean, std::sqrt(var)});
    }

    auto write_split = [&](std::vector<GeneratedPatch>& patches, const std::string& split) {
        for (size_t i = 0; i < patches.size(); ++i) {
            z_score_bands(patches[i].image, info.band_stats);
            write_rtqt_file(patch_path(out_dir, split, int(i), false),
                            RtqtBlob::from_tensor4(patches[i].image));
            write_rtqt_file(patch_path(out_dir, split, int(i), true),
                            RtqtBlob::from_tensor4(patches[i].labels.cast<float>()));
        }
    };
    write_split(train, "train");
    write_split(val, "val");

    atomic_write_file(out_dir + "/manifest.json", dataset_manifest_json(info));
    return info;
}

Dataset load_dataset(const std::string& dir, const std::string& split) {
    check(split == "train" || split == "val", "load_dataset: split must be train or val");
    Dataset ds;
    ds.info = read_manifest(dir);
    const int n = split == "train" ? ds.info.n_train : ds.info.n_val;
    ds.images.reserve(size_t(n));
    ds.labels.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        ds.images.push_back(
            read_rtqt_file(patch_path(dir, split, i, false)).as_tensor4<float>());
        ds.labels.push_back(
            read_rtqt_file(patch_path(dir, split, i, true)).as_tensor4<float>().cast<int32_t>());
        check(ds.images.back().h == ds.labels.back().h &&
                  ds.images.back().w == ds.labels.back().w,
              "load_dataset: image/label size mismatch in patch " + std::to_string(i));
    }
    return ds;
}

template <typename T>
void z_score_bands(Tensor4<T>& x, const std::vector<BandStats>& stats, double eps) {
    check(size_t(x.c) == stats.size(), "z_score_bands: band count mismatch");
    for (int i = 0; i < x.n; ++i)
        for (int b = 0; b < x.c; ++b) {
            T* p = x.plane(i, b);
            const size_t m = size_t(x.h) * x.w;
            if (stats[size_t(b)].stddev < eps) {
                for (size_t k = 0; k < m; ++k) p[k] = T(0);
            } else {
                const T mu = T(stats[size_t(b)].mean);
                const T inv = T(1.0 / stats[size_t(b)].stddev);
                for (size_t k = 0; k < m; ++k) p[k] = (p[k] - mu) * inv;
            }
        }
}

template <typename T>
Tensor4<T> stack_height_band(const Tensor4<T>& optical, const Tensor4<T>& height) {
    check(optical.n == height.n && optical.h == height.h && optical.w == height.w,
          "stack_height_band: spatial dims mismatch " + optical.shape_str() + " vs " +
              height.shape_str());
    Tensor4<T> out(optical.n, optical.c + height.c, optical.h, optical.w);
    const size_t plane = size_t(optical.h) * optical.w;
    for (int i = 0; i < optical.n; ++i) {
        for (int b = 0; b < optical.c; ++b)
            std::copy_n(optical.plane(i, b), plane, out.plane(i, b));
        for (int b = 0; b < height.c; ++b)
            std::copy_n(height.plane(i, b), plane, out.plane(i, optical.c + b));
    }
    return out;
}

namespace {

int reflect_idx(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

} // namespace

template <typename T>
std::vector<TilePatch<T>> tile_image(const Tensor4<T>& image, const Tensor4<int32_t>& labels,
                                     int tile, int stride) {
    check(image.n == 1 && labels.n == 1 && labels.c == 1, "tile_image: expects single image");
    check(image.h == labels.h && image.w == labels.w, "tile_image: image/label size mismatch");
    check(tile >= 1 && stride >= 1, "tile_image: tile and stride must be positive");
    check(tile <= image.h && tile <= image.w, "tile_image: tile larger than image");

    auto starts = [&](int extent) {
        std::vector<int> v;
        for (int p = 0;; p += stride) {
            v.push_back(p);
            if (p + tile >= extent) break;
        }
        return v;
    };

    std::vector<TilePatch<T>> out;
    for (int y0 : starts(image.h))
        for (int x0 : starts(image.w)) {
            TilePatch<T> tp;
            tp.y0 = y0;
            tp.x0 = x0;
            tp.image = Tensor4<T>(1, image.c, tile, tile);
            tp.labels = Tensor4<int32_t>(1, 1, tile, tile);
            for (int ty = 0; ty < tile; ++ty) {
                const int sy = y0 + ty;
                const int ry = reflect_idx(sy, image.h);
                for (int tx = 0; tx < tile; ++tx) {
                    const int sx = x0 + tx;
                    const int rx = reflect_idx(sx, image.w);
                    for (int b = 0; b < image.c; ++b)
                        tp.image.at(0, b, ty, tx) = image.at(0, b, ry, rx);
                    tp.labels.at(0, 0, ty, tx) = (sy < image.h && sx < image.w)
                                                     ? labels.at(0, 0, sy, sx)
                                                     : kIgnoreLabel;
                }
            }
            out.push_back(std::move(tp));
        }
    return out;
}

#ifdef ROTEQ_HAS_PNG

void write_label_png(const std::string& path, const Tensor4<int32_t>& labels,
                     const std::vector<std::array<uint8_t, 3>>& palette) {
    check(labels.n == 1 && labels.c == 1, "write_label_png: expects (1,1,h,w)");
    check(!palette.empty() && palette.size() <= 255, "write_label_png: bad palette size");

    std::vector<png_color> pal(palette.size() + 1);
    for (size_t i = 0; i < palette.size(); ++i)
        pal[i] = {palette[i][0], palette[i][1], palette[i][2]};
    pal[palette.size()] = {255, 255, 255}; // ignore slot

    std::vector<uint8_t> rows(size_t(labels.h) * labels.w);
    for (int y = 0; y < labels.h; ++y)
        for (int x = 0; x < labels.w; ++x) {
            const int32_t id = labels.at(0, 0, y, x);
            if (id == kIgnoreLabel) {
                rows[size_t(y) * labels.w + x] = uint8_t(palette.size());
            } else {
                check(id >= 0 && size_t(id) < palette.size(),
                      "write_label_png: label id outside palette");
                rows[size_t(y) * labels.w + x] = uint8_t(id);
            }
        }

    FILE* volatile fp = std::fopen((path + ".tmp").c_str(), "wb");
    check(fp != nullptr, "write_label_png: cannot open " + path + ".tmp");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop pinfo = png ? png_create_info_struct(png) : nullptr;
    if (!png || !pinfo || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, pinfo ? &pinfo : nullptr);
        std::fclose(fp);
        std::remove((path + ".tmp").c_str());
        throw std::runtime_error("write_label_png: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, pinfo, png_uint_32(labels.w), png_uint_32(labels.h), 8,
                 PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_set_PLTE(png, pinfo, pal.data(), int(pal.size()));
    png_write_info(png, pinfo);
    for (int y = 0; y < labels.h; ++y)
        png_write_row(png, rows.data() + size_t(y) * labels.w);
    png_write_end(png, pinfo);
    png_destroy_write_struct(&png, &pinfo);
    std::fclose(fp);
    check(std::rename((path + ".tmp").c_str(), path.c_str()) == 0,
          "write_label_png: rename failed for " + path);
}

Tensor4<float> read_png_bands(const std::string& path) {
    FILE* volatile fp = std::fopen(path.c_str(), "rb");
    check(fp != nullptr, "read_png_bands: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop pinfo = png ? png_create_info_struct(png) : nullptr;
    if (!png || !pinfo || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, pinfo ? &pinfo : nullptr, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png_bands: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_read_png(png, pinfo,
                 PNG_TRANSFORM_STRIP_16 | PNG_TRANSFORM_STRIP_ALPHA | PNG_TRANSFORM_EXPAND |
                     PNG_TRANSFORM_GRAY_TO_RGB,
                 nullptr);
    const png_uint_32 w = png_get_image_width(png, pinfo);
    const png_uint_32 h = png_get_image_height(png, pinfo);
    const int ch = png_get_channels(png, pinfo);
    png_bytepp rows = png_get_rows(png, pinfo);
    check(ch == 3, "read_png_bands: unexpected channel count after expansion");
    Tensor4<float> out(1, 3, int(h), int(w));
    for (png_uint_32 y = 0; y < h; ++y)
        for (png_uint_32 x = 0; x < w; ++x)
            for (int b = 0; b < 3; ++b)
                out.at(0, b, int(y), int(x)) = float(rows[y][x * 3 + b]) / 255.0f;
    png_destroy_read_struct(&png, &pinfo, nullptr);
    std::fclose(fp);
    return out;
}

#else

void write_label_png(const std::string&, const Tensor4<int32_t>&,
                     const std::vector<std::array<uint8_t, 3>>&) {
    throw std::runtime_error("write_label_png: built without PNG support");
}

Tensor4<float> read_png_bands(const std::string&) {
    throw std::runtime_error("read_png_bands: built without PNG support");
}

#endif

template void z_score_bands<float>(Tensor4<float>&, const std::vector<BandStats>&, double);
template void z_score_bands<double>(Tensor4<double>&, const std::vector<BandStats>&, double);
template Tensor4<float> stack_height_band<float>(const Tensor4<float>&, const Tensor4<float>&);
template Tensor4<double> stack_height_band<double>(const Tensor4<double>&, const Tensor4<double>&);
template std::vector<TilePatch<float>> tile_image<float>(const Tensor4<float>&,
                                                         const Tensor4<int32_t>&, int, int);
template std::vector<TilePatch<double>> tile_image<double>(const Tensor4<double>&,
                                                           const Tensor4<int32_t>&, int, int);

} // namespace roteq
