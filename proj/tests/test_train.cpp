#include <doctest.h>

#include <cmath>

#include "roteq/train.hpp"

using namespace roteq;

namespace {

Dataset tiny_dataset(int n_patches, int size, uint64_t seed) {
    SyntheticShapesConfig cfg;
    cfg.seed = seed;
    Dataset ds;
    ds.info.config = cfg;
    ds.info.size = size;
    ds.info.class_names = shape_class_names();
    for (int i = 0; i < n_patches; ++i) {
        GeneratedPatch p = generate_patch(cfg, Rng::derive(seed, 99, uint64_t(i)), size,
                                          i % 4 + 1);
        ds.images.push_back(std::move(p.image));
        ds.labels.push_back(std::move(p.labels));
    }
    return ds;
}

} // namespace

TEST_CASE("cross entropy of the uniform prediction is ln C") {
    const int C = 6;
    Tensor4<double> probs(1, C, 4, 4);
    for (double& v : probs.data) v = 1.0 / C;
    Tensor4<int32_t> labels(1, 1, 4, 4);
    for (size_t k = 0; k < labels.data.size(); ++k) labels.data[k] = int32_t(k % C);
    const LossResult<double> r = cross_entropy_loss(probs, labels);
    CHECK(r.loss == doctest::Approx(std::log(6.0)).epsilon(1e-12));
    CHECK(r.counted == 16);
}

TEST_CASE("loss gradient is (softmax - onehot) / counted, zero at ignored pixels") {
    Tensor4<double> logits(1, 3, 1, 2);
    logits.data = {0.3, -0.1, 1.2, 0.4, 0.0, -0.7};
    const Tensor4<double> probs = softmax_channels(logits);
    Tensor4<int32_t> labels(1, 1, 1, 2);
    labels.at(0, 0, 0, 0) = 2;
    labels.at(0, 0, 0, 1) = kIgnoreLabel;
    const LossResult<double> r = cross_entropy_loss(probs, labels);
    CHECK(r.counted == 1);
    CHECK(r.loss == doctest::Approx(-std::log(probs.at(0, 2, 0, 0))).epsilon(1e-12));
    for (int j = 0; j < 3; ++j) {
        const double want = probs.at(0, j, 0, 0) - (j == 2 ? 1.0 : 0.0);
        CHECK(r.grad_logits.at(0, j, 0, 0) == doctest::Approx(want).epsilon(1e-12));
        CHECK(r.grad_logits.at(0, j, 0, 1) == 0.0);
    }
}

TEST_CASE("loss rejects out-of-range labels and fully ignored maps") {
    Tensor4<double> probs(1, 2, 1, 1);
    probs.data = {0.5, 0.5};
    Tensor4<int32_t> bad(1, 1, 1, 1);
    bad.at(0, 0, 0, 0) = 7;
    CHECK_THROWS(cross_entropy_loss(probs, bad));
    Tensor4<int32_t> ignored(1, 1, 1, 1);
    ignored.at(0, 0, 0, 0) = kIgnoreLabel;
    CHECK_THROWS(cross_entropy_loss(probs, ignored));
}

TEST_CASE("sgd follows the momentum recurrence exactly") {
    double p = 1.0, g = 0.5;
    std::vector<ParamRef<double>> params{{"p", &p, 1, nullptr, 0, true}};
    std::vector<ParamRef<double>> grads{{"p", &g, 1, nullptr, 0, true}};
    std::vector<std::vector<double>> velocity;

    const double lr = 0.1, wd = 0.2, mom = 0.9;
    sgd_step(params, grads, velocity, lr, wd, mom);
    // v1 = -lr*(g + wd*p0) = -0.1*(0.5 + 0.2) = -0.07
    CHECK(p == doctest::Approx(0.93).epsilon(1e-12));
    sgd_step(params, grads, velocity, lr, wd, mom);
    // v2 = 0.9*(-0.07) - 0.1*(0.5 + 0.2*0.93) = -0.1316
    CHECK(p == doctest::Approx(0.93 - 0.1316).epsilon(1e-12));
}

TEST_CASE("weight decay skips refs marked no-decay and masked cells never move") {
    double p[2] = {1.0, 1.0};
    double g[2] = {0.0, 0.0};
    double b[2] = {1.0, 1.0};
    double gb[2] = {0.0, 0.0};
    const uint8_t mask[2] = {1, 0};
    std::vector<ParamRef<double>> params{{"w", p, 2, mask, 2, true},
                                         {"b", b, 2, nullptr, 0, false}};
    std::vector<ParamRef<double>> grads{{"w", g, 2, mask, 2, true},
                                        {"b", gb, 2, nullptr, 0, false}};
    std::vector<std::vector<double>> velocity;
    sgd_step(params, grads, velocity, 0.1, 0.5, 0.0);
    CHECK(p[0] == doctest::Approx(0.95).epsilon(1e-12)); // decayed
    CHECK(p[1] == 1.0);                                  // masked cell untouched
    CHECK(b[0] == 1.0);                                  // no-decay ref untouched
    CHECK(b[1] == 1.0);
}

TEST_CASE("improved Xavier init hits the target std and respects the mask") {
    Rng rng(404);
    const int fan_in = 148; // disk cells 37 times depth 4
    std::vector<double> w(100000);
    init_xavier_improved(w.data(), w.size(), fan_in, rng);
    double mean = 0.0;
    for (double v : w) mean += v;
    mean /= double(w.size());
    double ss = 0.0;
    for (double v : w) ss += (v - mean) * (v - mean);
    const double stddev = std::sqrt(ss / double(w.size()));
    const double want = std::sqrt(2.0 / fan_in);
    CHECK(std::abs(stddev - want) / want < 0.05);
    CHECK(std::abs(mean) < 0.002);

    const uint8_t mask[3] = {1, 0, 1};
    std::vector<double> m(9, -1.0);
    init_xavier_improved(m.data(), m.size(), 10, rng, mask, 3);
    for (size_t k = 0; k < m.size(); ++k) {
        if (k % 3 == 1)
            CHECK(m[k] == 0.0);
        else
            CHECK(m[k] != 0.0);
    }
}

TEST_CASE("augment with zero angle and no flips is the identity") {
    Rng rng(77);
    Tensor4<double> img(1, 2, 8, 8);
    for (double& v : img.data) v = rng.normal();
    Tensor4<int32_t> lab(1, 1, 8, 8);
    for (size_t k = 0; k < lab.data.size(); ++k) lab.data[k] = int32_t(k % 5);
    const AugmentedPatch<double> out = apply_augment(img, lab, 0.0, false, false);
    for (size_t k = 0; k < img.data.size(); ++k) CHECK(out.image.data[k] == img.data[k]);
    for (size_t k = 0; k < lab.data.size(); ++k) CHECK(out.labels.data[k] == lab.data[k]);
}

TEST_CASE("quarter-turn augment permutes image and labels with the same index map") {
    Rng rng(78);
    Tensor4<double> img(1, 1, 6, 6);
    Tensor4<int32_t> lab(1, 1, 6, 6);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) {
            img.at(0, 0, y, x) = y * 6 + x;
            lab.at(0, 0, y, x) = int32_t(y * 6 + x) % 5;
        }
    const AugmentedPatch<double> out = apply_augment(img, lab, 90.0, false, false);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x)
            CHECK(int32_t(out.image.at(0, 0, y, x)) % 5 == out.labels.at(0, 0, y, x));
}

TEST_CASE("flips preserve the label histogram") {
    Rng rng(79);
    Tensor4<double> img(1, 1, 8, 8);
    Tensor4<int32_t> lab(1, 1, 8, 8);
    for (size_t k = 0; k < lab.data.size(); ++k) lab.data[k] = int32_t(rng.uniform_int(0, 4));
    std::vector<int> before(5, 0), after(5, 0);
    for (int32_t v : lab.data) before[size_t(v)]++;
    const AugmentedPatch<double> out = apply_augment(img, lab, 0.0, true, true);
    for (int32_t v : out.labels.data) after[size_t(v)]++;
    CHECK(before == after);
}

TEST_CASE("off-grid rotation marks out-of-support labels as ignore") {
    Tensor4<double> img(1, 1, 16, 16);
    Tensor4<int32_t> lab(1, 1, 16, 16);
    const AugmentedPatch<double> out = apply_augment(img, lab, 45.0, false, false);
    int ignored = 0;
    for (int32_t v : out.labels.data) ignored += v == kIgnoreLabel;
    CHECK(ignored > 0);
    CHECK(ignored < int(out.labels.data.size()));
}

TEST_CASE("rotation augmentation rejects non-square patches") {
    Tensor4<double> img(1, 1, 8, 10);
    Tensor4<int32_t> lab(1, 1, 8, 10);
    CHECK_THROWS(apply_augment(img, lab, 30.0, false, false));
    CHECK_NOTHROW(apply_augment(img, lab, 0.0, true, false));
}

TEST_CASE("augment with rotation disabled never rotates") {
    Rng rng(80);
    Tensor4<double> img(1, 1, 8, 8);
    for (double& v : img.data) v = rng.normal();
    Tensor4<int32_t> lab(1, 1, 8, 8);
    AugmentConfig cfg;
    cfg.rotation = false;
    cfg.flip_prob = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        Rng r = Rng(Rng::derive(5, uint64_t(trial)));
        const AugmentedPatch<double> out = augment(img, lab, cfg, r);
        for (size_t k = 0; k < img.data.size(); ++k) CHECK(out.image.data[k] == img.data[k]);
    }
}

TEST_CASE("metrics csv formatting is stable") {
    CHECK(metrics_csv_header() == "epoch,split,loss,oa,aa,kappa\n");
    EpochRow row{3, "val", 0.5, 0.25, 0.125, 0.0625};
    CHECK(metrics_csv_row(row) == "3,val,0.500000,0.250000,0.125000,0.062500\n");
}

TEST_CASE("training memorizes a single patch") {
    ModelConfig mc;
    mc.Nf = 1;
    mc.R = 4;
    Model<float> model = Model<float>::build(mc);
    model.init_params(7);

    const Dataset ds = tiny_dataset(1, 64, 123);
    SgdConfig sgd;
    sgd.batch_size = 1;
    sgd.schedule = {{240, 0.1, 0.0}, {80, 0.02, 0.0}};
    AugmentConfig aug;
    aug.rotation = false;
    aug.flip_prob = 0.0;
    TrainOptions opt;
    opt.seed = 5;

    const TrainResult res = train_loop(model, ds, ds, sgd, aug, opt);
    CHECK_FALSE(res.aborted);
    REQUIRE(!res.log.empty());
    double final_train_loss = 1e9;
    for (const EpochRow& row : res.log)
        if (row.split == "train") final_train_loss = row.loss;
    CHECK(final_train_loss < 0.05);
}

TEST_CASE("identical seeds give bit-identical training runs") {
    const Dataset ds = tiny_dataset(4, 64, 321);
    auto run = [&] {
        ModelConfig mc;
        mc.Nf = 1;
        mc.R = 2;
        Model<float> model = Model<float>::build(mc);
        model.init_params(9);
        SgdConfig sgd;
        sgd.batch_size = 2;
        sgd.schedule = {{3, 0.05, 1e-4}};
        AugmentConfig aug;
        TrainOptions opt;
        opt.seed = 31;
        const TrainResult res = train_loop(model, ds, ds, sgd, aug, opt);
        std::string log;
        for (const EpochRow& row : res.log) log += metrics_csv_row(row);
        std::vector<float> flat;
        for (const auto& ref : model.param_refs())
            flat.insert(flat.end(), ref.data, ref.data + ref.size);
        return std::make_pair(log, flat);
    };
    const auto a = run();
    const auto b = run();
    CHECK(a.first == b.first);
    REQUIRE(a.second.size() == b.second.size());
    for (size_t k = 0; k < a.second.size(); ++k) CHECK(a.second[k] == b.second[k]);
}

TEST_CASE("evaluate runs without augmentation and fills the confusion matrix") {
    ModelConfig mc;
    mc.Nf = 1;
    mc.R = 2;
    Model<float> model = Model<float>::build(mc); // uniform predictor
    const Dataset ds = tiny_dataset(2, 64, 55);
    const EvalOutcome<float> out = evaluate(model, ds, 2);
    CHECK(out.loss == doctest::Approx(std::log(5.0)).epsilon(1e-5));
    CHECK(out.cm.total() == 2 * 64 * 64);
}
