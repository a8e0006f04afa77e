#include "roteq/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "roteq/common.hpp"

namespace roteq {

void DataConfig::validate() const {
    check(!dir.empty(), "DataConfig: dir must be non-empty");
    check(tile >= 64 && tile % 64 == 0, "DataConfig: tile must be a positive multiple of 64");
    check(stride >= 1, "DataConfig: stride must be >= 1");
    check(n_train >= 1 && n_val >= 1, "DataConfig: need at least one patch per split");
    check(patch_size >= 64 && patch_size % 64 == 0,
          "DataConfig: patch_size must be a positive multiple of 64");
    shapes.validate();
}

void RunSection::validate() const {
    check(threads >= 0, "RunSection: threads must be >= 0");
    check(precision == "f32" || precision == "f64",
          "RunSection: precision must be f32 or f64");
}

void RunConfig::validate() const {
    model.validate();
    sgd.validate();
    augment.validate();
    data.validate();
    run.validate();
}

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw ConfigError(path + ": " + what);
}

int want_int(const nlohmann::json& v, const std::string& path) {
    if (!v.is_number_integer()) fail(path, "expected an integer");
    return v.get<int>();
}

double want_num(const nlohmann::json& v, const std::string& path) {
    if (!v.is_number()) fail(path, "expected a number");
    return v.get<double>();
}

bool want_bool(const nlohmann::json& v, const std::string& path) {
    if (!v.is_boolean()) fail(path, "expected a boolean");
    return v.get<bool>();
}

std::string want_str(const nlohmann::json& v, const std::string& path) {
    if (!v.is_string()) fail(path, "expected a string");
    return v.get<std::string>();
}

SgdConfig parse_sgd(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) fail(prefix, "expected an object");
    SgdConfig cfg;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string p = prefix + "/" + it.key();
        const nlohmann::json& v = it.value();
        if (it.key() == "momentum") cfg.momentum = want_num(v, p);
        else if (it.key() == "batch_size") cfg.batch_size = want_int(v, p);
        else if (it.key() == "schedule") {
            if (!v.is_array()) fail(p, "expected an array of segments");
            cfg.schedule.clear();
            for (size_t i = 0; i < v.size(); ++i) {
                const std::string sp = p + "/" + std::to_string(i);
                const nlohmann::json& seg = v[i];
                if (!seg.is_object()) fail(sp, "expected an object");
                SgdSegment s;
                for (auto sit = seg.begin(); sit != seg.end(); ++sit) {
                    const std::string spk = sp + "/" + sit.key();
                    if (sit.key() == "epochs") s.epochs = want_int(sit.value(), spk);
                    else if (sit.key() == "lr") s.lr = want_num(sit.value(), spk);
                    else if (sit.key() == "wd") s.wd = want_num(sit.value(), spk);
                    else fail(spk, "unknown key");
                }
                cfg.schedule.push_back(s);
            }
        } else {
            fail(p, "unknown key");
        }
    }
    return cfg;
}

AugmentConfig parse_augment(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) fail(prefix, "expected an object");
    AugmentConfig cfg;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string p = prefix + "/" + it.key();
        if (it.key() == "rotation") cfg.rotation = want_bool(it.value(), p);
        else if (it.key() == "flip_prob") cfg.flip_prob = want_num(it.value(), p);
        else fail(p, "unknown key");
    }
    return cfg;
}

SyntheticShapesConfig parse_shapes(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) fail(prefix, "expected an object");
    SyntheticShapesConfig cfg;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string p = prefix + "/" + it.key();
        const nlohmann::json& v = it.value();
        if (it.key() == "classes") cfg.classes = want_int(v, p);
        else if (it.key() == "min_objects") cfg.min_objects = want_int(v, p);
        else if (it.key() == "max_objects") cfg.max_objects = want_int(v, p);
        else if (it.key() == "scale_jitter") cfg.scale_jitter = want_num(v, p);
        else if (it.key() == "noise") cfg.noise = want_num(v, p);
        else if (it.key() == "height_band") cfg.height_band = want_bool(v, p);
        else if (it.key() == "seed") {
            if (!v.is_number_unsigned() && !v.is_number_integer()) fail(p, "expected an integer");
            cfg.seed = v.get<uint64_t>();
        } else {
            fail(p, "unknown key");
        }
    }
    return cfg;
}

DataConfig parse_data(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) fail(prefix, "expected an object");
    DataConfig cfg;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string p = prefix + "/" + it.key();
        const nlohmann::json& v = it.value();
        if (it.key() == "dir") cfg.dir = want_str(v, p);
        else if (it.key() == "tile") cfg.tile = want_int(v, p);
        else if (it.key() == "stride") cfg.stride = want_int(v, p);
        else if (it.key() == "n_train") cfg.n_train = want_int(v, p);
        else if (it.key() == "n_val") cfg.n_val = want_int(v, p);
        else if (it.key() == "patch_size") cfg.patch_size = want_int(v, p);
        else if (it.key() == "shapes") cfg.shapes = parse_shapes(v, p);
        else fail(p, "unknown key");
    }
    return cfg;
}

RunSection parse_run(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) fail(prefix, "expected an object");
    RunSection cfg;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string p = prefix + "/" + it.key();
        const nlohmann::json& v = it.value();
        if (it.key() == "seed") {
            if (!v.is_number_unsigned() && !v.is_number_integer()) fail(p, "expected an integer");
            cfg.seed = v.get<uint64_t>();
        } else if (it.key() == "threads") {
            cfg.threads = want_int(v, p);
        } else if (it.key() == "precision") {
            cfg.precision = want_str(v, p);
        } else {
            fail(p, "unknown key");
        }
    }
    return cfg;
}

} // namespace

RunConfig run_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("/: invalid JSON (") + e.what() + ")");
    }
    if (!j.is_object()) throw ConfigError("/: expected an object");

    RunConfig cfg;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "model") {
            try {
                cfg.model = model_config_from_json(it.value().dump(), "/model");
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        } else if (k == "sgd") {
            cfg.sgd = parse_sgd(it.value(), "/sgd");
        } else if (k == "augment") {
            cfg.augment = parse_augment(it.value(), "/augment");
        } else if (k == "data") {
            cfg.data = parse_data(it.value(), "/data");
        } else if (k == "run") {
            cfg.run = parse_run(it.value(), "/run");
        } else {
            throw ConfigError("/" + k + ": unknown key");
        }
    }
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("/: ") + e.what());
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError(path + ": cannot open config file");
    std::ostringstream ss;
    ss << is.rdbuf();
    return run_config_from_json(ss.str());
}

std::string to_canonical_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["model"] = nlohmann::json::parse(to_canonical_json(cfg.model));
    nlohmann::json sched = nlohmann::json::array();
    for (const SgdSegment& s : cfg.sgd.schedule)
        sched.push_back({{"epochs", s.epochs}, {"lr", s.lr}, {"wd", s.wd}});
    j["sgd"] = {{"momentum", cfg.sgd.momentum},
                {"batch_size", cfg.sgd.batch_size},
                {"schedule", sched}};
    j["augment"] = {{"rotation", cfg.augment.rotation}, {"flip_prob", cfg.augment.flip_prob}};
    j["data"] = {{"dir", cfg.data.dir},
                 {"tile", cfg.data.tile},
                 {"stride", cfg.data.stride},
                 {"n_train", cfg.data.n_train},
                 {"n_val", cfg.data.n_val},
                 {"patch_size", cfg.data.patch_size},
                 {"shapes",
                  {{"classes", cfg.data.shapes.classes},
                   {"min_objects", cfg.data.shapes.min_objects},
                   {"max_objects", cfg.data.shapes.max_objects},
                   {"scale_jitter", cfg.data.shapes.scale_jitter},
                   {"noise", cfg.data.shapes.noise},
                   {"height_band", cfg.data.shapes.height_band},
                   {"seed", cfg.data.shapes.seed}}}};
    j["run"] = {{"seed", cfg.run.seed},
                {"threads", cfg.run.threads},
                {"precision", cfg.run.precision}};
    return j.dump(2) + "\n";
}

} // namespace roteq
