#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "roteq/tensor.hpp"

namespace roteq {

inline constexpr int32_t kIgnoreLabel = 255;

// Fixed class vocabulary; cfg.classes takes a prefix of it.
const std::vector<std::string>& shape_class_names();
const std::vector<std::array<uint8_t, 3>>& shape_class_palette();

struct SyntheticShapesConfig {
    int classes = 5;
    int min_objects = 2;
    int max_objects = 5;
    double scale_jitter = 0.25;
    double noise = 0.05;
    bool height_band = false;
    uint64_t seed = 1;

    int bands() const { return height_band ? 2 : 1; }
    void validate() const;
};

struct ShapeInstance {
    int class_id = 0;
    double angle_deg = 0.0;
    double cx = 0.0;
    double cy = 0.0;
    double scale = 1.0;
};

struct GeneratedPatch {
    Tensor4<float> image;    // raw bands, not yet z-scored
    Tensor4<int32_t> labels; // (1,1,h,w), values in [0, classes)
    std::vector<ShapeInstance> objects;
};

// Deterministic in (cfg, patch_seed, size); objects carry placement metadata.
GeneratedPatch generate_patch(const SyntheticShapesConfig& cfg, uint64_t patch_seed, int size,
                              int force_first_class = -1);

struct BandStats {
    double mean = 0.0;
    double stddev = 1.0;
};

struct DatasetInfo {
    SyntheticShapesConfig config;
    int size = 64;
    int n_train = 0;
    int n_val = 0;
    std::vector<std::string> class_names;
    std::vector<BandStats> band_stats; // from the train split
    std::vector<int64_t> train_pixel_counts;
    std::vector<int64_t> val_pixel_counts;
};

std::string dataset_manifest_json(const DatasetInfo& info);
DatasetInfo dataset_info_from_json(const std::string& text, const std::string& path_prefix);
DatasetInfo read_manifest(const std::string& dir);

// Writes dataset/{train,val}/patch_%05d.rtqt (+ .labels.rtqt) and manifest.json.
// Images are stored z-scored per band with statistics taken from the train split.
DatasetInfo generate_synthetic(const SyntheticShapesConfig& cfg, int n_train, int n_val, int size,
                               const std::string& out_dir);

struct Dataset {
    std::vector<Tensor4<float>> images;
    std::vector<Tensor4<int32_t>> labels;
    DatasetInfo info;
};

Dataset load_dataset(const std::string& dir, const std::string& split);

// Per-band (x - mean)/std; bands with std below eps are zeroed.
template <typename T>
void z_score_bands(Tensor4<T>& x, const std::vector<BandStats>& stats, double eps = 1e-6);

template <typename T>
Tensor4<T> stack_height_band(const Tensor4<T>& optical, const Tensor4<T>& height);

template <typename T>
struct TilePatch {
    Tensor4<T> image;
    Tensor4<int32_t> labels;
    int y0 = 0;
    int x0 = 0;
};

// Edge tiles are reflect-padded (images) and ignore-padded (labels) to full size.
template <typename T>
std::vector<TilePatch<T>> tile_image(const Tensor4<T>& image, const Tensor4<int32_t>& labels,
                                     int tile, int stride);

void write_label_png(const std::string& path, const Tensor4<int32_t>& labels,
                     const std::vector<std::array<uint8_t, 3>>& palette);
// 8/16-bit gray, gray+alpha, RGB or RGBA; alpha dropped; values scaled to [0,1].
Tensor4<float> read_png_bands(const std::string& path);

} // namespace roteq
