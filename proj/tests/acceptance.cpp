// Acceptance gate: one pass/fail line per shipped claim, nonzero exit on any failure.
// argv[1] is the CLI binary; training-based checks run through it exactly as a user would.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "roteq/config.hpp"
#include "roteq/data.hpp"
#include "roteq/harness.hpp"
#include "roteq/io.hpp"
#include "roteq/metrics.hpp"
#include "roteq/network.hpp"
#include "roteq/orientpool.hpp"
#include "roteq/rng.hpp"
#include "roteq/rotkernel.hpp"
#include "roteq/tensor.hpp"
#include "roteq/train.hpp"
#include "roteq/vecfield.hpp"

namespace fs = std::filesystem;
using namespace roteq;

namespace {

std::string g_cli;
fs::path g_scratch;
int g_failures = 0;

void report(int id, bool ok, const std::string& note) {
    std::printf("criterion %2d: %s  %s\n", id, ok ? "PASS" : "FAIL", note.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

int run_cli(const std::string& args, const std::string& log_name) {
    const fs::path log = g_scratch / log_name;
    const std::string cmd = "\"" + g_cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    return std::system(cmd.c_str());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return {};
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

char buf[512];
std::string format(const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    return buf;
}

// in-memory dataset of normalized synthetic patches, enough for equicheck
Dataset probe_dataset(int n, uint64_t seed0, int size) {
    SyntheticShapesConfig cfg;
    Dataset ds;
    ds.info.size = size;
    for (int i = 0; i < n; ++i) {
        GeneratedPatch p = generate_patch(cfg, seed0 + uint64_t(i), size);
        double sum = 0.0, sq = 0.0;
        for (float v : p.image.data) {
            sum += v;
            sq += double(v) * v;
        }
        const double mean = sum / double(p.image.data.size());
        const double sd = std::sqrt(std::max(1e-12, sq / double(p.image.data.size()) - mean * mean));
        z_score_bands(p.image, {{mean, sd}});
        ds.images.push_back(std::move(p.image));
        ds.labels.push_back(std::move(p.labels));
    }
    return ds;
}

template <typename T>
std::vector<CanonicalFilter<T>> random_scalar_bank(int f, int d, int m, Rng& rng) {
    const std::vector<uint8_t> mask = circular_mask(m);
    auto bank = std::vector<CanonicalFilter<T>>(static_cast<size_t>(f));
    for (auto& cf : bank) {
        cf.weights = Tensor4<T>(1, d, m, m);
        for (size_t k = 0; k < cf.weights.data.size(); ++k)
            cf.weights.data[k] = mask[k % mask.size()] ? T(rng.normal()) : T(0);
        cf.bias = T(rng.normal(0.0, 0.1));
    }
    return bank;
}

template <typename T>
std::vector<VectorFilter<T>> random_vector_bank(int f, int d, int m, Rng& rng) {
    const std::vector<uint8_t> mask = circular_mask(m);
    auto bank = std::vector<VectorFilter<T>>(static_cast<size_t>(f));
    for (auto& vf : bank) {
        vf.wu = Tensor4<T>(1, d, m, m);
        vf.wv = Tensor4<T>(1, d, m, m);
        for (size_t k = 0; k < vf.wu.data.size(); ++k) {
            vf.wu.data[k] = mask[k % mask.size()] ? T(rng.normal()) : T(0);
            vf.wv.data[k] = mask[k % mask.size()] ? T(rng.normal()) : T(0);
        }
        vf.bias = T(rng.normal(0.0, 0.1));
    }
    return bank;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double m = 0.0;
    for (size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(double(a[k]) - double(b[k])));
    return m;
}

double best_val_oa(const fs::path& metrics_csv) {
    std::ifstream in(metrics_csv);
    std::string line;
    double best = -1.0;
    std::getline(in, line); // header
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string epoch, split, loss, oa;
        std::getline(ss, epoch, ',');
        std::getline(ss, split, ',');
        std::getline(ss, loss, ',');
        std::getline(ss, oa, ',');
        if (split == "val") best = std::max(best, std::atof(oa.c_str()));
    }
    return best;
}

double csv_f1(const fs::path& scores_csv, const std::string& cls) {
    std::ifstream in(scores_csv);
    std::string line;
    const std::string key = "f1," + cls + ",";
    while (std::getline(in, line))
        if (line.rfind(key, 0) == 0) return std::atof(line.substr(key.size()).c_str());
    return -1.0;
}

void criterion_1() {
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = run_cli("gradcheck --suite all --seeds 5", "gradcheck.log");
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report(1, rc == 0 && secs < 300.0,
           format("gradcheck --suite all, 5 seeds per case, rel err < 1e-5, %.1fs", secs));
}

void criterion_2() {
    const Dataset ds = probe_dataset(4, 900, 64);
    const std::vector<double> quarter = {90.0, 180.0, 270.0};
    double worst_agree = 1.0;

    for (int R : {4, 8, 16}) {
        ModelConfig cfg;
        cfg.Nf = 2;
        cfg.R = R;
        cfg.C = 5;
        cfg.in_channels = 1;
        Model<double> model = Model<double>::build(cfg);
        model.init_params(21);
        for (const EquiRow& row : equicheck(model, ds, quarter, 4))
            worst_agree = std::min(worst_agree, row.agreement);
    }

    double worst_mag = 0.0;
    for (int R : {4, 8, 16}) {
        Rng rng(uint64_t(50 + R));
        const auto bank = random_scalar_bank<float>(3, 1, 7, rng);
        const OrientationSet orient = OrientationSet::make(R);
        Tensor4<float> x(1, 1, 64, 64);
        for (float& v : x.data) v = float(rng.normal());
        const auto [p0, z0] = orientation_pool(rotconv_forward(x, bank, orient, 3));
        for (double angle : quarter) {
            const auto [pr, zr] =
                orientation_pool(rotconv_forward(rotate_image(x, angle), bank, orient, 3));
            const Tensor4<float> ref = rotate_image(p0.rho, angle);
            worst_mag = std::max(worst_mag, max_abs_diff(pr.rho.data, ref.data));
        }
    }

    report(2, worst_agree >= 0.995 && worst_mag < 1e-4,
           format("quarter turns, R in {4,8,16}: argmax agreement >= %.4f, "
                  "pooled magnitude max err %.1e",
                  worst_agree, worst_mag));
}

void criterion_3() {
    const Dataset suite = probe_dataset(20, 300, 64);
    auto measure = [&](int R) {
        ModelConfig cfg;
        cfg.Nf = 2;
        cfg.R = R;
        cfg.C = 5;
        cfg.in_channels = 1;
        Model<double> model = Model<double>::build(cfg);
        model.init_params(7);
        return equicheck(model, suite, {45.0}, 20).front();
    };
    const EquiRow r4 = measure(4);
    const EquiRow r16 = measure(16);
    report(3, r16.agreement >= r4.agreement && r16.field_mag_err < r4.field_mag_err,
           format("45 deg on 20 patches: agreement %.4f (R=16) vs %.4f (R=4), "
                  "field err %.5f vs %.5f",
                  r16.agreement, r4.agreement, r16.field_mag_err, r4.field_mag_err));
}

void criterion_4() {
    const OrientationSet single = OrientationSet::make(1);
    double worst = 0.0;
    for (int inst = 0; inst < 50; ++inst) {
        Rng rng(uint64_t(400 + inst));
        const int n = rng.uniform_int(1, 2), d = rng.uniform_int(1, 3);
        const int f = rng.uniform_int(1, 3), m = 2 * rng.uniform_int(1, 3) + 1;
        const int h = rng.uniform_int(7, 12), w = rng.uniform_int(7, 12);
        const int pad = (m - 1) / 2;

        Tensor4<double> x(n, d, h, w);
        for (double& v : x.data) v = rng.normal();
        const auto bank = random_scalar_bank<double>(f, d, m, rng);

        Tensor4<double> wts(f, d, m, m);
        auto bias = std::vector<double>(static_cast<size_t>(f));
        for (int j = 0; j < f; ++j) {
            std::copy(bank[size_t(j)].weights.data.begin(), bank[size_t(j)].weights.data.end(),
                      wts.data.begin() + size_t(j) * d * m * m);
            bias[size_t(j)] = bank[size_t(j)].bias;
        }
        const RotStack<double> ys = rotconv_forward(x, bank, single, pad);
        const Tensor4<double> yref = conv2d_ref(x, wts, bias, pad);
        worst = std::max(worst, max_abs_diff(ys.data, yref.data));

        VectorField<double> z{Tensor4<double>(n, d, h, w), Tensor4<double>(n, d, h, w)};
        for (double& v : z.u.data) v = rng.normal();
        for (double& v : z.v.data) v = rng.normal();
        const auto vbank = random_vector_bank<double>(f, d, m, rng);
        const RotStack<double> yv = vec_rotconv(z, vbank, single, pad);
        const Tensor4<double> yvref = vecconv(z, vbank, pad);
        worst = std::max(worst, max_abs_diff(yv.data, yvref.data));
    }
    report(4, worst < 1e-6,
           format("R=1 reduces to plain convolution, 50 instances, max err %.1e", worst));
}

void criterion_5() {
    int64_t mismatches = 0;
    int64_t locations = 0;
    for (int R : {1, 2, 3, 8}) {
        const int h = R <= 1 ? 1 : (R == 2 ? 2 : (R == 3 ? 2 : 16));
        const int w = (1 << R) / h;
        RotStack<double> stack(1, 2, R, h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int pattern = y * w + x;
                for (int r = 0; r < R; ++r) {
                    const bool bit = (pattern >> r) & 1;
                    stack.at(0, 0, r, y, x) = bit ? 0.5 : -1.0;
                    stack.at(0, 1, r, y, x) = bit ? -1.0 : 0.5;
                }
            }
        const auto [p, z] = orientation_pool(stack);
        for (int j = 0; j < 2; ++j)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    ++locations;
                    double best = stack.at(0, j, 0, y, x);
                    int arg = 0;
                    for (int r = 1; r < R; ++r)
                        if (stack.at(0, j, r, y, x) > best) { // strict: first max wins
                            best = stack.at(0, j, r, y, x);
                            arg = r;
                        }
                    const double theta = 360.0 * arg / R;
                    const double rho = best > 0.0 ? best : 0.0;
                    double sn, cs;
                    sincos_deg(theta, sn, cs);
                    if (p.argmax.at(0, j, y, x) != arg || p.rho.at(0, j, y, x) != rho ||
                        p.theta_deg.at(0, j, y, x) != theta || z.u.at(0, j, y, x) != rho * cs ||
                        z.v.at(0, j, y, x) != rho * sn)
                        ++mismatches;
                }
    }

    double worst = 0.0;
    for (int inst = 0; inst < 10; ++inst) {
        Rng rng(uint64_t(500 + inst));
        const int n = rng.uniform_int(1, 2), d = rng.uniform_int(1, 3);
        const int f = rng.uniform_int(1, 3), m = 2 * rng.uniform_int(1, 3) + 1;
        const int h = rng.uniform_int(7, 10), w = rng.uniform_int(7, 10);
        const int pad = (m - 1) / 2;
        VectorField<double> z{Tensor4<double>(n, d, h, w), Tensor4<double>(n, d, h, w)};
        for (double& v : z.u.data) v = rng.normal();
        for (double& v : z.v.data) v = rng.normal();
        const auto vbank = random_vector_bank<double>(f, d, m, rng);

        Tensor4<double> wts(f, 2 * d, m, m);
        auto bias = std::vector<double>(static_cast<size_t>(f));
        for (int j = 0; j < f; ++j) {
            const size_t base = size_t(j) * 2 * d * m * m;
            std::copy(vbank[size_t(j)].wu.data.begin(), vbank[size_t(j)].wu.data.end(),
                      wts.data.begin() + base);
            std::copy(vbank[size_t(j)].wv.data.begin(), vbank[size_t(j)].wv.data.end(),
                      wts.data.begin() + base + size_t(d) * m * m);
            bias[size_t(j)] = vbank[size_t(j)].bias;
        }
        const Tensor4<double> got = vecconv(z, vbank, pad);
        const Tensor4<double> ref = conv2d_ref(stack_uv(z), wts, bias, pad);
        worst = std::max(worst, max_abs_diff(got.data, ref.data));
    }

    report(5, mismatches == 0 && worst < 1e-6,
           format("orientation pool exact on %lld exhaustive tie fixtures (R in {1,2,3,8}); "
                  "vecconv vs stacking oracle max err %.1e",
                  (long long)locations, worst));
}

const char* kLearnConfig = R"({
  "model": {"Nf": 2, "R": 8, "C": 5, "in_channels": 1},
  "sgd": {"momentum": 0.9, "batch_size": 2,
          "schedule": [{"epochs": 10, "lr": 0.1, "wd": 0.0001},
                       {"epochs": 3, "lr": 0.02, "wd": 0.0001},
                       {"epochs": 2, "lr": 0.004, "wd": 0.0001}]},
  "augment": {"rotation": true, "flip_prob": 0.5},
  "data": {"n_train": 200, "n_val": 50, "patch_size": 64, "shapes": {"seed": 0}},
  "run": {"seed": 0, "precision": "f32"}
})";

void criterion_6() {
    const fs::path cfg_a = g_scratch / "learn_roteq.json";
    const fs::path cfg_b = g_scratch / "learn_baseline.json";
    spit(cfg_a, kLearnConfig);
    {
        RunConfig cfg = run_config_from_json(kLearnConfig);
        cfg.model.variant = "baseline";
        cfg.augment.rotation = false;
        spit(cfg_b, to_canonical_json(cfg));
    }
    const fs::path ds = g_scratch / "learn_ds";
    const fs::path run_a = g_scratch / "learn_roteq";
    const fs::path run_b = g_scratch / "learn_baseline";

    if (run_cli("gen-data --config " + cfg_a.string() + " --out " + ds.string(), "c6_gen.log") ||
        run_cli("train --config " + cfg_a.string() + " --data " + ds.string() + " --out " +
                    run_a.string(),
                "c6_train_roteq.log") ||
        run_cli("train --config " + cfg_b.string() + " --data " + ds.string() + " --out " +
                    run_b.string(),
                "c6_train_baseline.log") ||
        run_cli("eval --checkpoint " + (run_a / "best.rtqc").string() + " --data " + ds.string() +
                    " --csv " + (g_scratch / "c6_roteq.csv").string(),
                "c6_eval_roteq.log") ||
        run_cli("eval --checkpoint " + (run_b / "best.rtqc").string() + " --data " + ds.string() +
                    " --csv " + (g_scratch / "c6_baseline.csv").string(),
                "c6_eval_baseline.log")) {
        report(6, false, "training pipeline command failed (see acceptance scratch logs)");
        return;
    }

    const double oa = best_val_oa(run_a / "metrics.csv");
    const double bar_roteq = csv_f1(g_scratch / "c6_roteq.csv", "bar");
    const double bar_base = csv_f1(g_scratch / "c6_baseline.csv", "bar");
    report(6,
           oa >= 0.95 && bar_roteq >= 0.85 && bar_roteq - bar_base >= 0.05,
           format("15 epochs, 200/50 patches seed 0: roteqnet val oa %.4f, bar f1 %.4f; "
                  "baseline without rotation augmentation bar f1 %.4f",
                  oa, bar_roteq, bar_base));
}

void criterion_7() {
    ModelConfig a;
    a.variant = "roteqnet";
    a.Nf = 3;
    a.in_channels = 4;
    a.C = 6;
    ModelConfig b = a;
    b.variant = "baseline";
    b.Nf = 12;
    const size_t pa = Model<float>::build(a).parameter_count();
    const size_t pb = Model<float>::build(b).parameter_count();
    const double ratio = double(pb) / double(pa);
    report(7, ratio >= 5.0 && ratio <= 20.0,
           format("parameters: roteqnet Nf=3 %zu vs baseline Nf=12 %zu, ratio %.2f", pa, pb,
                  ratio));
}

void criterion_8() {
    const fs::path cfg = g_scratch / "bench.json";
    spit(cfg, R"({"model": {"Nf": 2, "R": 8, "C": 5, "in_channels": 1}})");
    const fs::path csv = g_scratch / "bench.csv";
    if (run_cli("bench --config " + cfg.string() + " --R-list 8,16,32,64,128 --repeats 5"
                " --report " + csv.string(),
                "bench.log")) {
        report(8, false, "bench command failed");
        return;
    }
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line); // header
    std::vector<double> ms;
    while (std::getline(in, line)) {
        if (line.rfind("roteqnet,", 0) != 0) continue;
        const size_t a = line.find(',', 9);
        ms.push_back(std::atof(line.substr(a + 1).c_str()));
    }
    bool monotone = ms.size() == 5;
    for (size_t i = 0; monotone && i + 1 < ms.size(); ++i) monotone = ms[i + 1] >= ms[i];
    const double ratio = ms.size() == 5 && ms[0] > 0.0 ? ms[4] / ms[0] : 1e9;
    report(8, monotone && ratio < 16.0,
           ms.size() == 5
               ? format("single-thread forward: %.1f/%.1f/%.1f/%.1f/%.1f ms over R=8..128, "
                        "ratio %.2f",
                        ms[0], ms[1], ms[2], ms[3], ms[4], ratio)
               : std::string("bench csv missing roteqnet rows"));
}

void criterion_9() {
    const fs::path cfg = g_scratch / "det.json";
    spit(cfg, R"({
  "model": {"Nf": 1, "R": 4, "C": 5, "in_channels": 1},
  "sgd": {"batch_size": 2, "schedule": [{"epochs": 3, "lr": 0.05, "wd": 0.001}]},
  "data": {"n_train": 8, "n_val": 4, "patch_size": 64, "shapes": {"seed": 5}},
  "run": {"seed": 31, "precision": "f32"}
})");
    const fs::path ds = g_scratch / "det_ds";
    const fs::path d1 = g_scratch / "det_run1";
    const fs::path d2 = g_scratch / "det_run2";
    if (run_cli("gen-data --config " + cfg.string() + " --out " + ds.string(), "det_gen.log") ||
        run_cli("train --config " + cfg.string() + " --data " + ds.string() + " --out " +
                    d1.string(),
                "det_train1.log") ||
        run_cli("train --config " + cfg.string() + " --data " + ds.string() + " --out " +
                    d2.string(),
                "det_train2.log")) {
        report(9, false, "train command failed");
        return;
    }
    const bool best = slurp(d1 / "best.rtqc") == slurp(d2 / "best.rtqc");
    const bool final_ok = slurp(d1 / "final.rtqc") == slurp(d2 / "final.rtqc");
    const bool log_ok =
        !slurp(d1 / "metrics.csv").empty() && slurp(d1 / "metrics.csv") == slurp(d2 / "metrics.csv");
    report(9, best && final_ok && log_ok,
           format("repeated run: best %s, final %s, metric log %s",
                  best ? "bit-identical" : "differs", final_ok ? "bit-identical" : "differs",
                  log_ok ? "identical" : "differs"));
}

void criterion_10() {
    Rng rng(77);
    Tensor4<double> t64(2, 3, 5, 4);
    for (double& v : t64.data) v = rng.normal();
    Tensor4<float> t32(1, 2, 6, 3);
    for (float& v : t32.data) v = float(rng.normal());

    const fs::path p64 = g_scratch / "a.rtqt";
    const fs::path p64b = g_scratch / "b.rtqt";
    const fs::path p32 = g_scratch / "c.rtqt";
    write_rtqt_file(p64.string(), RtqtBlob::from_tensor4(t64));
    write_rtqt_file(p64b.string(), RtqtBlob::from_tensor4(t64));
    write_rtqt_file(p32.string(), RtqtBlob::from_tensor4(t32));
    const Tensor4<double> r64 = read_rtqt_file(p64.string()).as_tensor4<double>();
    const Tensor4<float> r32 = read_rtqt_file(p32.string()).as_tensor4<float>();
    const Tensor4<float> cast32 = read_rtqt_file(p64.string()).as_tensor4<float>();
    bool tensors_ok = slurp(p64) == slurp(p64b) && r64.data == t64.data && r32.data == t32.data;
    for (size_t k = 0; k < t64.data.size(); ++k)
        tensors_ok = tensors_ok && cast32.data[k] == float(t64.data[k]);

    ModelConfig cfg;
    cfg.Nf = 1;
    cfg.R = 4;
    cfg.C = 5;
    cfg.in_channels = 1;
    Model<double> model = Model<double>::build(cfg);
    model.init_params(5);
    const fs::path ck = g_scratch / "model.rtqc";
    save_checkpoint(ck.string(), model);

    Model<double> back = load_checkpoint<double>(ck.string());
    Model<float> cast = load_checkpoint<float>(ck.string());
    auto orig_p = model.param_refs();
    auto back_p = back.param_refs();
    auto cast_p = cast.param_refs();
    bool ckpt_ok = orig_p.size() == back_p.size() && orig_p.size() == cast_p.size();
    for (size_t i = 0; ckpt_ok && i < orig_p.size(); ++i)
        for (size_t k = 0; ckpt_ok && k < orig_p[i].size; ++k) {
            ckpt_ok = back_p[i].data[k] == orig_p[i].data[k] &&
                      cast_p[i].data[k] == float(orig_p[i].data[k]);
        }

    report(10, tensors_ok && ckpt_ok,
           format("tensor round-trip %s; checkpoint round-trip %s, f64->f32 load casts per cell",
                  tensors_ok ? "bit-exact" : "BROKEN", ckpt_ok ? "bit-exact" : "BROKEN"));
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance_tests <path-to-roteq-cli>\n");
        return 2;
    }
    g_cli = argv[1];
    g_scratch = fs::current_path() / "acceptance_scratch";
    fs::remove_all(g_scratch);
    fs::create_directories(g_scratch);

    struct Entry {
        int id;
        void (*fn)();
    };
    const Entry entries[] = {{1, criterion_1}, {2, criterion_2}, {3, criterion_3},
                             {4, criterion_4}, {5, criterion_5}, {6, criterion_6},
                             {7, criterion_7}, {8, criterion_8}, {9, criterion_9},
                             {10, criterion_10}};
    for (const Entry& e : entries) {
        try {
            e.fn();
        } catch (const std::exception& ex) {
            report(e.id, false, std::string("exception: ") + ex.what());
        }
    }
    std::printf("%d of 10 criteria passed\n", 10 - g_failures);
    return g_failures == 0 ? 0 : 1;
}
