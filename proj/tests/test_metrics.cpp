#include <doctest.h>

#include <cmath>

#include "roteq/data.hpp"
#include "roteq/metrics.hpp"
#include "roteq/rng.hpp"

using namespace roteq;

namespace {

ConfusionMatrix random_cm(int C, uint64_t seed) {
    Rng rng(seed);
    ConfusionMatrix cm(C);
    for (int r = 0; r < C; ++r)
        for (int p = 0; p < C; ++p) cm.at(r, p) = rng.uniform_int(0, 20);
    cm.at(0, 0) += 1; // keep the matrix non-empty
    return cm;
}

} // namespace

TEST_CASE("f1 follows 2TP / (2TP + FP + FN)") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 5;
    cm.at(0, 1) = 2; // false positives for class 1
    cm.at(1, 0) = 2; // false negatives for class 1
    cm.at(1, 1) = 8;
    const Scores s = scores(cm);
    CHECK(s.f1[1] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(s.f1[0] == doctest::Approx(10.0 / 14.0).epsilon(1e-12));
}

TEST_CASE("hand-checked overall accuracy, mean recall and kappa") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 8;
    cm.at(0, 1) = 2;
    cm.at(1, 0) = 5;
    cm.at(1, 1) = 5;
    const Scores s = scores(cm);
    CHECK(s.oa == doctest::Approx(0.65).epsilon(1e-12));
    CHECK(s.aa == doctest::Approx(0.5 * (0.8 + 0.5)).epsilon(1e-12));
    // pe = (10*13 + 10*7) / 400 = 0.5, kappa = (0.65 - 0.5) / 0.5
    CHECK(s.kappa == doctest::Approx(0.3).epsilon(1e-12));

    ConfusionMatrix sym(2);
    sym.at(0, 0) = 2;
    sym.at(0, 1) = 1;
    sym.at(1, 0) = 1;
    sym.at(1, 1) = 2;
    CHECK(scores(sym).kappa == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("scores are invariant under class permutation") {
    const ConfusionMatrix cm = random_cm(4, 11);
    const int perm[4] = {2, 0, 3, 1};
    ConfusionMatrix pm(4);
    for (int r = 0; r < 4; ++r)
        for (int p = 0; p < 4; ++p) pm.at(perm[r], perm[p]) = cm.at(r, p);
    const Scores a = scores(cm);
    const Scores b = scores(pm);
    CHECK(a.oa == doctest::Approx(b.oa).epsilon(1e-12));
    CHECK(a.aa == doctest::Approx(b.aa).epsilon(1e-12));
    CHECK(a.kappa == doctest::Approx(b.kappa).epsilon(1e-12));
    for (int c = 0; c < 4; ++c)
        CHECK(a.f1[size_t(c)] == doctest::Approx(b.f1[size_t(perm[c])]).epsilon(1e-12));
}

TEST_CASE("kappa never exceeds overall accuracy") {
    for (uint64_t seed = 0; seed < 30; ++seed) {
        const Scores s = scores(random_cm(3, seed));
        CHECK(s.kappa <= s.oa + 1e-12);
        CHECK(s.oa <= 1.0);
        CHECK(s.aa <= 1.0);
    }
}

TEST_CASE("confusion matrices add and accumulation matches the union") {
    Tensor4<int32_t> ref_a(1, 1, 2, 2), pred_a(1, 1, 2, 2);
    Tensor4<int32_t> ref_b(1, 1, 2, 2), pred_b(1, 1, 2, 2);
    ref_a.data = {0, 1, 2, 1};
    pred_a.data = {0, 2, 2, 1};
    ref_b.data = {1, 1, 0, 2};
    pred_b.data = {1, 0, 0, 2};

    ConfusionMatrix ca(3), cb(3), joint(3);
    accumulate(ca, ref_a, pred_a, kIgnoreLabel);
    accumulate(cb, ref_b, pred_b, kIgnoreLabel);
    accumulate(joint, ref_a, pred_a, kIgnoreLabel);
    accumulate(joint, ref_b, pred_b, kIgnoreLabel);

    ca.add(cb);
    CHECK(ca.total() == 8);
    for (size_t i = 0; i < ca.counts.size(); ++i) CHECK(ca.counts[i] == joint.counts[i]);

    ConfusionMatrix wrong(4);
    CHECK_THROWS_WITH_AS(wrong.add(cb), doctest::Contains("mismatch"), std::exception);
}

TEST_CASE("accumulation skips ignored pixels and rejects out-of-range ids") {
    Tensor4<int32_t> ref(1, 1, 2, 2), pred(1, 1, 2, 2);
    ref.data = {0, kIgnoreLabel, 1, kIgnoreLabel};
    pred.data = {1, 0, 1, 2};
    ConfusionMatrix cm(2);
    accumulate(cm, ref, pred, kIgnoreLabel);
    CHECK(cm.total() == 2);
    CHECK(cm.at(0, 1) == 1);
    CHECK(cm.at(1, 1) == 1);

    pred.data = {1, 0, 9, 2};
    ConfusionMatrix cm2(2);
    CHECK_THROWS_WITH_AS(accumulate(cm2, ref, pred, kIgnoreLabel),
                         doctest::Contains("out of range"), std::exception);
}

TEST_CASE("empty confusion matrix has no scores") {
    ConfusionMatrix cm(3);
    CHECK_THROWS_WITH_AS(scores(cm), doctest::Contains("empty"), std::exception);
}

TEST_CASE("argmax over channels breaks ties toward the smaller id") {
    Tensor4<double> probs(1, 3, 1, 3);
    // pixel 0: clear winner 2; pixel 1: tie 0 vs 2; pixel 2: tie 1 vs 2
    probs.at(0, 0, 0, 0) = 0.1;
    probs.at(0, 1, 0, 0) = 0.2;
    probs.at(0, 2, 0, 0) = 0.7;
    probs.at(0, 0, 0, 1) = 0.4;
    probs.at(0, 1, 0, 1) = 0.2;
    probs.at(0, 2, 0, 1) = 0.4;
    probs.at(0, 0, 0, 2) = 0.1;
    probs.at(0, 1, 0, 2) = 0.45;
    probs.at(0, 2, 0, 2) = 0.45;
    const Tensor4<int32_t> am = argmax_channels(probs);
    CHECK(am.at(0, 0, 0, 0) == 2);
    CHECK(am.at(0, 0, 0, 1) == 0);
    CHECK(am.at(0, 0, 0, 2) == 1);
}

TEST_CASE("csv report lists per-class f1 then the aggregate rows") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 3;
    cm.at(1, 1) = 1;
    const std::string csv = scores_csv(cm, {"background", "disc"});
    CHECK(csv == "metric,class,value\n"
                 "f1,background,1.000000\n"
                 "f1,disc,1.000000\n"
                 "oa,,1.000000\n"
                 "aa,,1.000000\n"
                 "kappa,,1.000000\n");
    const std::string table = scores_table(cm, {"background", "disc"});
    CHECK(table.find("oa 1.0000") != std::string::npos);
    CHECK(table.find("(n=4)") != std::string::npos);
}
