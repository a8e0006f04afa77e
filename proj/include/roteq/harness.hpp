#pragma once

#include <string>
#include <vector>

#include "roteq/data.hpp"
#include "roteq/network.hpp"

namespace roteq {

struct EquiRow {
    double angle_deg = 0.0;
    double agreement = 0.0;      // mean argmax agreement on the interior 80% crop
    double field_mag_err = 0.0;  // mean magnitude error of the deepest wide vector field
};

// Compares predict(rotate(x, a)) against rotate(predict(x), a) per angle,
// averaged over the first max_patches patches of the dataset.
template <typename T>
std::vector<EquiRow> equicheck(Model<T>& model, const Dataset& ds,
                               const std::vector<double>& angles, int max_patches);

std::string equicheck_csv(const std::vector<EquiRow>& rows);

struct BenchRow {
    std::string variant;
    int R = 1;
    double median_ms = 0.0;
    double min_ms = 0.0;
    double max_ms = 0.0;
};

// Forward-pass wall time on one (1, in_channels, size, size) tile, single
// thread, median over `repeats` runs; includes the feature-count-matched
// baseline as the last row.
std::vector<BenchRow> bench_forward(const ModelConfig& base, const std::vector<int>& r_list,
                                    int repeats, int size);

std::string bench_csv(const std::vector<BenchRow>& rows);

} // namespace roteq
