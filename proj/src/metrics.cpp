#include "roteq/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "roteq/common.hpp"

namespace roteq {

int64_t ConfusionMatrix::total() const {
    int64_t t = 0;
    for (int64_t v : counts) t += v;
    return t;
}

void ConfusionMatrix::add(const ConfusionMatrix& other) {
    check(C == other.C, "ConfusionMatrix::add: class count mismatch");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

void accumulate(ConfusionMatrix& cm, const Tensor4<int32_t>& labels,
                const Tensor4<int32_t>& predictions, int ignore_id) {
    check(labels.same_shape(predictions), "accumulate: labels " + labels.shape_str() +
                                              " vs predictions " + predictions.shape_str());
    for (size_t k = 0; k < labels.data.size(); ++k) {
        const int32_t ref = labels.data[k];
        if (ref == ignore_id) continue;
        const int32_t pred = predictions.data[k];
        check(ref >= 0 && ref < cm.C, "accumulate: label id " + std::to_string(ref) + " out of range");
        check(pred >= 0 && pred < cm.C, "accumulate: prediction id " + std::to_string(pred) + " out of range");
        ++cm.at(ref, pred);
    }
}

Scores scores(const ConfusionMatrix& cm) {
    const int64_t total = cm.total();
    check(total > 0, "scores: empty confusion matrix");
    Scores s;
    s.f1.assign(size_t(cm.C), 0.0);
    int64_t diag = 0;
    double recall_sum = 0.0;
    double pe = 0.0;
    for (int c = 0; c < cm.C; ++c) {
        int64_t tp = cm.at(c, c), row = 0, col = 0;
        for (int k = 0; k < cm.C; ++k) {
            row += cm.at(c, k);
            col += cm.at(k, c);
        }
        diag += tp;
        const int64_t denom = row + col;  // 2TP + FP + FN
        s.f1[size_t(c)] = denom > 0 ? 2.0 * double(tp) / double(denom) : 0.0;
        recall_sum += row > 0 ? double(tp) / double(row) : 0.0;
        pe += double(row) * double(col);
    }
    s.oa = double(diag) / double(total);
    s.aa = recall_sum / double(cm.C);  // mean per-class recall
    pe /= double(total) * double(total);
    s.kappa = pe < 1.0 ? (s.oa - pe) / (1.0 - pe) : 1.0;
    return s;
}

namespace {

std::string class_name(const std::vector<std::string>& names, int c) {
    return c < int(names.size()) ? names[size_t(c)] : "class" + std::to_string(c);
}

} // namespace

std::string scores_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
    const Scores s = scores(cm);
    std::ostringstream os;
    os << "metric,class,value\n";
    char buf[64];
    for (int c = 0; c < cm.C; ++c) {
        std::snprintf(buf, sizeof buf, "%.6f", s.f1[size_t(c)]);
        os << "f1," << class_name(class_names, c) << "," << buf << "\n";
    }
    std::snprintf(buf, sizeof buf, "%.6f", s.oa);
    os << "oa,," << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.6f", s.aa);
    os << "aa,," << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.6f", s.kappa);
    os << "kappa,," << buf << "\n";
    return os.str();
}

std::string scores_table(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
    const Scores s = scores(cm);
    size_t width = 8;
    for (int c = 0; c < cm.C; ++c) width = std::max(width, class_name(class_names, c).size());
    std::ostringstream os;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-*s  %8s  %12s  %12s\n", int(width), "class", "f1", "ref px",
                  "pred px");
    os << buf;
    for (int c = 0; c < cm.C; ++c) {
        int64_t row = 0, col = 0;
        for (int k = 0; k < cm.C; ++k) {
            row += cm.at(c, k);
            col += cm.at(k, c);
        }
        std::snprintf(buf, sizeof buf, "%-*s  %8.4f  %12lld  %12lld\n", int(width),
                      class_name(class_names, c).c_str(), s.f1[size_t(c)], (long long)row,
                      (long long)col);
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "oa %.4f  aa %.4f  kappa %.4f  (n=%lld)\n", s.oa, s.aa, s.kappa,
                  (long long)cm.total());
    os << buf;
    return os.str();
}

template <typename T>
Tensor4<int32_t> argmax_channels(const Tensor4<T>& probs) {
    Tensor4<int32_t> out(probs.n, 1, probs.h, probs.w);
    for (int i = 0; i < probs.n; ++i)
        for (int y = 0; y < probs.h; ++y)
            for (int x = 0; x < probs.w; ++x) {
                int best = 0;
                T bv = probs.at(i, 0, y, x);
                for (int j = 1; j < probs.c; ++j) {
                    const T v = probs.at(i, j, y, x);
                    if (v > bv) { // strict: ties keep the smallest id
                        bv = v;
                        best = j;
                    }
                }
                out.at(i, 0, y, x) = best;
            }
    return out;
}

template Tensor4<int32_t> argmax_channels<float>(const Tensor4<float>&);
template Tensor4<int32_t> argmax_channels<double>(const Tensor4<double>&);

}  // namespace roteq
