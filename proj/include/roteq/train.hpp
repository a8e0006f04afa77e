#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "roteq/data.hpp"
#include "roteq/metrics.hpp"
#include "roteq/network.hpp"
#include "roteq/rng.hpp"

namespace roteq {

struct SgdSegment {
    int epochs = 1;
    double lr = 1e-2;
    double wd = 0.0;
};

struct SgdConfig {
    double momentum = 0.9;
    int batch_size = 4;
    std::vector<SgdSegment> schedule = {{9, 2e-2, 4e-2}, {4, 4e-3, 4e-3}, {2, 8e-4, 8e-4}};

    int total_epochs() const;
    SgdSegment at_epoch(int epoch) const;
    void validate() const;
};

struct AugmentConfig {
    bool rotation = true;     // uniform [0, 360)
    double flip_prob = 0.5;   // horizontal and vertical, drawn independently

    void validate() const;
};

template <typename T>
struct LossResult {
    double loss = 0.0;
    Tensor4<T> grad_logits;   // (softmax - onehot)/count at counted pixels, 0 elsewhere
    int64_t counted = 0;
};

// probs are per-pixel class distributions (softmax output); the returned
// gradient is with respect to the pre-softmax logits.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor4<T>& probs, const Tensor4<int32_t>& labels,
                                 int32_t ignore_id = kIgnoreLabel);

// v <- momentum*v - lr*(g + wd*p); p <- p + v. Weight decay skips refs with
// decay=false; masked cells are never touched.
template <typename T>
void sgd_step(const std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads,
              std::vector<std::vector<T>>& velocity, double lr, double wd, double momentum);

// zero-mean normal with std sqrt(2/fan_in); masked cells left at 0
template <typename T>
void init_xavier_improved(T* w, size_t n, int fan_in, Rng& rng, const uint8_t* mask = nullptr,
                          size_t mask_period = 0);

template <typename T>
Tensor4<T> flip_horizontal(const Tensor4<T>& x);
template <typename T>
Tensor4<T> flip_vertical(const Tensor4<T>& x);

template <typename T>
struct AugmentedPatch {
    Tensor4<T> image;
    Tensor4<int32_t> labels;
};

// Deterministic given (angle, flips); labels rotate nearest-neighbour with
// out-of-support cells set to ignore_id.
template <typename T>
AugmentedPatch<T> apply_augment(const Tensor4<T>& image, const Tensor4<int32_t>& labels,
                                double angle_deg, bool flip_h, bool flip_v,
                                int32_t ignore_id = kIgnoreLabel);

template <typename T>
AugmentedPatch<T> augment(const Tensor4<T>& image, const Tensor4<int32_t>& labels,
                          const AugmentConfig& cfg, Rng& rng,
                          int32_t ignore_id = kIgnoreLabel);

struct EpochRow {
    int epoch = 0;
    std::string split;
    double loss = 0.0;
    double oa = 0.0;
    double aa = 0.0;
    double kappa = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochRow& row);

struct TrainOptions {
    uint64_t seed = 1;
    std::string out_dir;  // empty: keep everything in memory, write no files
    bool verbose = false;
};

struct TrainResult {
    std::vector<EpochRow> log;
    double best_val_oa = 0.0;
    int best_epoch = -1;
    int epochs_run = 0;
    bool aborted = false;  // non-finite loss; parameters restored to last good state
};

template <typename T>
struct EvalOutcome {
    double loss = 0.0;
    ConfusionMatrix cm;
    Scores result;
};

template <typename T>
EvalOutcome<T> evaluate(Model<T>& model, const Dataset& ds, int batch_size);

template <typename T>
TrainResult train_loop(Model<T>& model, const Dataset& train_ds, const Dataset& val_ds,
                       const SgdConfig& sgd, const AugmentConfig& aug, const TrainOptions& opt);

struct GradCheckResult {
    std::string name;
    uint64_t seed = 0;
    double max_rel_err = 0.0;
    double threshold = 0.0;
    size_t checked = 0;
    size_t skipped = 0;   // coordinates straddling an argmax tie or ReLU kink
    bool pass = false;
};

// suite: "all" or one of conv2d, rotconv, orientpool, vecconv, vec_rotconv,
// vec_maxpool, vec_batchnorm, scalar_batchnorm, loss, micronet.
// All checks run in 64-bit with central differences (eps = 1e-4).
std::vector<GradCheckResult> run_grad_checks(const std::string& suite, int seeds_per_case = 5,
                                             uint64_t base_seed = 17);
bool grad_checks_pass(const std::vector<GradCheckResult>& results);
std::string grad_check_report(const std::vector<GradCheckResult>& results);

} // namespace roteq
