#pragma once

#include <string>
#include <vector>

#include "roteq/io.hpp"
#include "roteq/vecfield.hpp"

namespace roteq {

struct ModelConfig {
    int Nf = 2;
    int R = 8;
    int C = 5;
    int in_channels = 1;
    int filter_size = 7;
    std::vector<int> layer_multipliers = {2, 2, 3, 4, 4, 4};
    std::vector<int> mlp_widths;  // empty -> {50*Nf, 50*Nf, C}
    std::string variant = "roteqnet";  // or "baseline"
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    double dropout = 0.0;
    bool paper_literal_backward = false;

    int blocks() const { return int(layer_multipliers.size()); }
    std::vector<int> filters_per_block() const;
    std::vector<int> resolved_mlp_widths() const;
    void validate() const;  // throws std::invalid_argument naming the offending field
};

std::string to_canonical_json(const ModelConfig& cfg);
// strict: unknown keys and type mismatches rejected; error_path gets "/prefix/key"
ModelConfig model_config_from_json(const std::string& text, const std::string& path_prefix);

// standard per-channel batch norm for the baseline variant
template <typename T>
struct ScalarBnCache {
    Tensor4<T> xhat;
    std::vector<T> inv_std;
};

template <typename T>
Tensor4<T> scalar_batchnorm(const Tensor4<T>& x, const std::vector<T>& gamma,
                            const std::vector<T>& beta, std::vector<T>& running_mean,
                            std::vector<T>& running_var, T eps, T momentum, bool train,
                            ScalarBnCache<T>* cache);

template <typename T>
struct ScalarBnGrads {
    Tensor4<T> gx;
    std::vector<T> ggamma, gbeta;
};

template <typename T>
ScalarBnGrads<T> scalar_batchnorm_backward(const std::vector<T>& gamma,
                                           const ScalarBnCache<T>& cache, const Tensor4<T>& gy);

template <typename T>
Tensor4<T> hypercolumn_concat(const std::vector<const Tensor4<T>*>& features,
                              const Tensor4<T>& raw);

// reflect-pad spatial dims up to the next multiple; forward_dense needs multiples of 64
template <typename T>
Tensor4<T> pad_to_multiple_reflect(const Tensor4<T>& x, int multiple);
template <typename T>
Tensor4<T> crop_spatial(const Tensor4<T>& x, int h, int w);

template <typename T>
struct ParamRef {
    std::string name;
    T* data = nullptr;
    size_t size = 0;
    const uint8_t* mask = nullptr;  // when set, cells with mask[i % mask_period]==0 stay 0
    size_t mask_period = 0;
    bool decay = true;
};

template <typename T>
struct BlockState {
    std::vector<CanonicalFilter<T>> scalar_filters;  // roteqnet block 1
    std::vector<VectorFilter<T>> vec_filters;        // roteqnet blocks 2..6
    Tensor4<T> conv_w;                               // baseline bank (F, D, m, m)
    std::vector<T> conv_b;
    std::vector<T> gamma, beta;                      // beta used by the baseline only
    std::vector<T> run_sigma;                        // vector batch norm
    std::vector<T> run_mean, run_var;                // scalar batch norm
};

template <typename T>
struct ForwardCache {
    Tensor4<T> input;
    struct Block {
        PolarField<T> polar;
        VectorField<T> bn_in;
        VecBnCache<T> bn;
        Tensor4<uint8_t> keep;
        PoolIndices idx;
        VectorField<T> out;   // pooled block output (hypercolumn source)
        Tensor4<T> pre;       // baseline pre-activation
        Tensor4<T> bn_in_s;   // baseline BN input
        ScalarBnCache<T> sbn;
        Tensor4<T> out_s;     // baseline pooled output
    };
    std::vector<Block> blocks;
    Tensor4<T> hyper;
    Tensor4<T> a1, r1, a2, r2;  // MLP pre-activations and rectified maps
    Tensor4<T> logits;
};

template <typename T>
struct Model {
    ModelConfig cfg;
    OrientationSet orient;
    std::vector<uint8_t> mask;  // disk mask, filter_size^2
    std::vector<BlockState<T>> blocks;
    std::vector<Tensor4<T>> mlp_w;  // (out, in, 1, 1)
    std::vector<std::vector<T>> mlp_b;

    static Model<T> build(const ModelConfig& cfg);  // zeroed parameters
    void init_params(uint64_t seed);                // improved Xavier, fan-in over disk support

    std::vector<ParamRef<T>> param_refs();   // learnable, stable build order
    std::vector<ParamRef<T>> buffer_refs();  // running statistics
    size_t parameter_count() const;          // learnable cells only (masked cells excluded)

    int hyper_channels() const;

    // returns per-pixel class distributions; train mode updates running stats and
    // fills the cache needed by backward
    Tensor4<T> forward(const Tensor4<T>& x, bool train, ForwardCache<T>* cache,
                       Rng* dropout_rng = nullptr);

    // accumulates parameter gradients into a same-structure model
    void backward(const ForwardCache<T>& cache, const Tensor4<T>& grad_logits, Model<T>& grads,
                  Tensor4<T>* grad_input = nullptr) const;
};

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model);
template <typename T>
Model<T> load_checkpoint(const std::string& path);  // casts stored payloads to T
ModelConfig checkpoint_config(const std::string& path);

}  // namespace roteq
