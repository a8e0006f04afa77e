#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "roteq/tensor.hpp"

namespace roteq {

struct ConfusionMatrix {
    int C = 0;
    std::vector<int64_t> counts;  // C*C, rows = reference, cols = prediction

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int classes) : C(classes), counts(size_t(classes) * classes, 0) {}

    int64_t& at(int ref, int pred) { return counts[size_t(ref) * C + pred]; }
    int64_t at(int ref, int pred) const { return counts[size_t(ref) * C + pred]; }
    int64_t total() const;
    void add(const ConfusionMatrix& other);
};

void accumulate(ConfusionMatrix& cm, const Tensor4<int32_t>& labels,
                const Tensor4<int32_t>& predictions, int ignore_id);

struct Scores {
    std::vector<double> f1;  // per class
    double oa = 0.0, aa = 0.0, kappa = 0.0;
};

Scores scores(const ConfusionMatrix& cm);

std::string scores_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);
std::string scores_table(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);

// per-pixel winning channel; ties -> smallest index
template <typename T>
Tensor4<int32_t> argmax_channels(const Tensor4<T>& probs);

}  // namespace roteq
