#pragma once

#include <stdexcept>
#include <string>

#include "roteq/data.hpp"
#include "roteq/network.hpp"
#include "roteq/train.hpp"

namespace roteq {

// configuration problems exit the CLI with code 2; everything else with 1
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DataConfig {
    std::string dir = "dataset";
    int tile = 64;
    int stride = 64;
    int n_train = 96;
    int n_val = 32;
    int patch_size = 64;
    SyntheticShapesConfig shapes;

    void validate() const;
};

struct RunSection {
    uint64_t seed = 1;
    int threads = 0; // 0 resolves to hardware concurrency
    std::string precision = "f32";

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    SgdConfig sgd;
    AugmentConfig augment;
    DataConfig data;
    RunSection run;

    void validate() const;
};

// strict: unknown keys, type mismatches and invalid values raise ConfigError
// naming the failing JSON path; absent keys keep their defaults
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string to_canonical_json(const RunConfig& cfg); // all defaults materialized

} // namespace roteq
