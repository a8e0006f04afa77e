#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "roteq/common.hpp"
#include "roteq/config.hpp"
#include "roteq/data.hpp"
#include "roteq/harness.hpp"
#include "roteq/io.hpp"
#include "roteq/metrics.hpp"
#include "roteq/network.hpp"
#include "roteq/parallel.hpp"
#include "roteq/train.hpp"

namespace {

using namespace roteq;

int resolve_threads(int flag_threads) {
    if (flag_threads >= 0) return flag_threads;
    if (const char* env = std::getenv("ROTEQ_THREADS")) return std::max(0, std::atoi(env));
    return 0;
}

std::string join_args(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) {
        if (i) s += ' ';
        s += argv[i];
    }
    return s + "\n";
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
int do_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
             const std::string& cmdline) {
    const Dataset train_ds = load_dataset(data_dir, "train");
    const Dataset val_ds = load_dataset(data_dir, "val");
    if (!train_ds.images.empty() && train_ds.images[0].c != cfg.model.in_channels)
        throw ConfigError("/model/in_channels: dataset has " +
                          std::to_string(train_ds.images[0].c) + " bands, config says " +
                          std::to_string(cfg.model.in_channels));

    std::filesystem::create_directories(out_dir);
    atomic_write_file(out_dir + "/config.json", to_canonical_json(cfg));
    atomic_write_file(out_dir + "/cmdline.txt", cmdline);

    Model<T> model = Model<T>::build(cfg.model);
    model.init_params(cfg.run.seed);
    std::printf("%s variant, %zu parameters, %d train / %d val patches\n",
                cfg.model.variant.c_str(), model.parameter_count(), int(train_ds.images.size()),
                int(val_ds.images.size()));

    TrainOptions opt;
    opt.seed = cfg.run.seed;
    opt.out_dir = out_dir;
    opt.verbose = true;
    const TrainResult res = train_loop(model, train_ds, val_ds, cfg.sgd, cfg.augment, opt);
    if (res.aborted) {
        std::fprintf(stderr, "training diverged (non-finite loss); restored last good state\n");
        return 1;
    }
    std::printf("best val oa %.4f at epoch %d\n", res.best_val_oa, res.best_epoch);
    return 0;
}

template <typename T>
int do_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& split,
            int batch, const std::string& csv_path) {
    Model<T> model = load_checkpoint<T>(checkpoint);
    const Dataset ds = load_dataset(data_dir, split);
    const EvalOutcome<T> out = evaluate(model, ds, batch);
    std::printf("split %s, %d patches, loss %.4f\n", split.c_str(), int(ds.images.size()),
                out.loss);
    std::fputs(scores_table(out.cm, ds.info.class_names).c_str(), stdout);
    if (!csv_path.empty())
        atomic_write_file(csv_path, scores_csv(out.cm, ds.info.class_names));
    return 0;
}

template <typename T>
Tensor4<T> load_predict_input(const std::string& path, const ModelConfig& mc,
                              const std::string& data_dir) {
    Tensor4<float> x;
    if (ends_with(path, ".rtqt")) {
        x = read_rtqt_file(path).as_tensor4<float>();
    } else if (ends_with(path, ".png")) {
        Tensor4<float> rgb = read_png_bands(path);
        if (mc.in_channels == 1) {
            x = Tensor4<float>(1, 1, rgb.h, rgb.w);
            for (int y = 0; y < rgb.h; ++y)
                for (int xx = 0; xx < rgb.w; ++xx)
                    x.at(0, 0, y, xx) = (rgb.at(0, 0, y, xx) + rgb.at(0, 1, y, xx) +
                                         rgb.at(0, 2, y, xx)) / 3.0f;
        } else {
            x = std::move(rgb);
        }
        std::vector<BandStats> stats;
        if (!data_dir.empty()) {
            stats = read_manifest(data_dir).band_stats;
        } else {
            for (int b = 0; b < x.c; ++b) {
                double sum = 0.0, sq = 0.0;
                const float* p = x.plane(0, b);
                const size_t m = size_t(x.h) * x.w;
                for (size_t k = 0; k < m; ++k) {
                    sum += p[k];
                    sq += double(p[k]) * p[k];
                }
                const double mean = sum / double(m);
                stats.push_back({mean, std::sqrt(std::max(0.0, sq / double(m) - mean * mean))});
            }
        }
        z_score_bands(x, stats);
    } else {
        check(false, "predict: input must be .rtqt or .png");
    }
    check(x.c == mc.in_channels, "predict: input has " + std::to_string(x.c) +
                                     " bands, checkpoint expects " +
                                     std::to_string(mc.in_channels));
    return x.template cast<T>();
}

template <typename T>
int do_predict(const std::string& checkpoint, const std::string& input,
               const std::string& out_png, const std::string& data_dir) {
    Model<T> model = load_checkpoint<T>(checkpoint);
    Tensor4<T> x = load_predict_input<T>(input, model.cfg, data_dir);
    const int h = x.h, w = x.w;
    const Tensor4<T> padded = pad_to_multiple_reflect(x, 64);
    const Tensor4<T> probs = model.forward(padded, false, nullptr);
    const Tensor4<T> cropped = crop_spatial(probs, h, w);
    const Tensor4<int32_t> pred = argmax_channels(cropped);
    std::vector<std::array<uint8_t, 3>> palette = shape_class_palette();
    palette.resize(size_t(model.cfg.C) <= palette.size() ? size_t(model.cfg.C)
                                                         : palette.size());
    write_label_png(out_png, pred, palette);
    std::printf("wrote %s (%dx%d)\n", out_png.c_str(), w, h);
    return 0;
}

template <typename T>
int do_equicheck(const std::string& checkpoint, const std::string& data_dir,
                 const std::vector<double>& angles, int patches, const std::string& report) {
    Model<T> model = load_checkpoint<T>(checkpoint);
    const Dataset ds = load_dataset(data_dir, "val");
    const std::vector<EquiRow> rows = equicheck(model, ds, angles, patches);
    const std::string csv = equicheck_csv(rows);
    std::fputs(csv.c_str(), stdout);
    if (!report.empty()) atomic_write_file(report, csv);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"rotation equivariant vector field networks"};
    app.require_subcommand(1);
    int threads_flag = -1;
    app.add_option("--threads", threads_flag,
                   "worker threads, 0 = hardware (overrides ROTEQ_THREADS)");

    std::string gen_config, gen_out;
    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
    gen->add_option("--config", gen_config, "run config JSON")->required();
    gen->add_option("--out", gen_out, "output dataset directory")->required();

    std::string tr_config, tr_data, tr_out;
    CLI::App* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", tr_config, "run config JSON")->required();
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "run directory")->required();

    std::string ev_ckpt, ev_data, ev_split = "val", ev_csv;
    int ev_batch = 4;
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--split", ev_split, "train or val");
    ev->add_option("--csv", ev_csv, "write the score report as CSV");
    ev->add_option("--batch", ev_batch);

    std::string pr_ckpt, pr_input, pr_out, pr_data;
    CLI::App* pr = app.add_subcommand("predict", "predict a label map");
    pr->add_option("--checkpoint", pr_ckpt)->required();
    pr->add_option("--input", pr_input, "RTQT tensor or PNG image")->required();
    pr->add_option("--out", pr_out, "output label PNG")->required();
    pr->add_option("--data", pr_data, "dataset directory for band statistics");

    std::string eq_ckpt, eq_data, eq_report;
    std::vector<double> eq_angles = {0, 45, 90, 180, 270};
    int eq_patches = 4;
    CLI::App* eq = app.add_subcommand("equicheck", "measure rotation equivariance");
    eq->add_option("--checkpoint", eq_ckpt)->required();
    eq->add_option("--data", eq_data)->required();
    eq->add_option("--angles", eq_angles, "angles in degrees")->delimiter(',');
    eq->add_option("--patches", eq_patches, "validation patches to average over");
    eq->add_option("--report", eq_report, "CSV output path");

    std::string be_config, be_report;
    std::vector<int> be_r = {8, 16, 32, 64, 128};
    int be_repeats = 5;
    CLI::App* be = app.add_subcommand("bench", "forward-pass timing per R (single thread)");
    be->add_option("--config", be_config, "run config JSON")->required();
    be->add_option("--R-list", be_r)->delimiter(',');
    be->add_option("--repeats", be_repeats);
    be->add_option("--report", be_report, "CSV output path");

    std::string gc_suite = "all";
    int gc_seeds = 5;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gc->add_option("--suite", gc_suite, "all or a layer name");
    gc->add_option("--seeds", gc_seeds, "seeds per case");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        set_thread_count(resolve_threads(threads_flag));

        if (gen->parsed()) {
            const RunConfig cfg = load_run_config(gen_config);
            const DatasetInfo info = generate_synthetic(cfg.data.shapes, cfg.data.n_train,
                                                        cfg.data.n_val, cfg.data.patch_size,
                                                        gen_out);
            std::printf("wrote %d train / %d val patches of %dx%d to %s\n", info.n_train,
                        info.n_val, info.size, info.size, gen_out.c_str());
            return 0;
        }
        if (tr->parsed()) {
            const RunConfig cfg = load_run_config(tr_config);
            if (cfg.run.threads > 0 && threads_flag < 0) set_thread_count(cfg.run.threads);
            const std::string cmdline = join_args(argc, argv);
            return cfg.run.precision == "f64"
                       ? do_train<double>(cfg, tr_data, tr_out, cmdline)
                       : do_train<float>(cfg, tr_data, tr_out, cmdline);
        }
        if (ev->parsed()) {
            const ModelConfig mc = checkpoint_config(ev_ckpt);
            (void)mc;
            return do_eval<float>(ev_ckpt, ev_data, ev_split, ev_batch, ev_csv);
        }
        if (pr->parsed()) return do_predict<float>(pr_ckpt, pr_input, pr_out, pr_data);
        if (eq->parsed())
            return do_equicheck<float>(eq_ckpt, eq_data, eq_angles, eq_patches, eq_report);
        if (be->parsed()) {
            const RunConfig cfg = load_run_config(be_config);
            const std::vector<BenchRow> rows =
                bench_forward(cfg.model, be_r, be_repeats, cfg.data.tile);
            const std::string csv = bench_csv(rows);
            std::fputs(csv.c_str(), stdout);
            if (!be_report.empty()) atomic_write_file(be_report, csv);
            return 0;
        }
        if (gc->parsed()) {
            const std::vector<GradCheckResult> results = run_grad_checks(gc_suite, gc_seeds);
            std::fputs(grad_check_report(results).c_str(), stdout);
            return grad_checks_pass(results) ? 0 : 1;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
