#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "roteq/network.hpp"
#include "roteq/orientpool.hpp"
#include "roteq/rotkernel.hpp"
#include "roteq/vecfield.hpp"

namespace py = pybind11;
using namespace roteq;

namespace {

using Arr = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor4<float> tensor_from(const Arr& a, const char* name) {
    check(a.ndim() == 4, std::string(name) + ": expected a 4-d array");
    Tensor4<float> t(int(a.shape(0)), int(a.shape(1)), int(a.shape(2)), int(a.shape(3)));
    std::copy(a.data(), a.data() + t.data.size(), t.data.begin());
    return t;
}

Arr array_from(const Tensor4<float>& t) {
    Arr a({size_t(t.n), size_t(t.c), size_t(t.h), size_t(t.w)});
    std::copy(t.data.begin(), t.data.end(), a.mutable_data());
    return a;
}

Arr array_from(const RotStack<float>& s) {
    Arr a({size_t(s.n), size_t(s.f), size_t(s.R), size_t(s.h), size_t(s.w)});
    std::copy(s.data.begin(), s.data.end(), a.mutable_data());
    return a;
}

RotStack<float> stack_from(const Arr& a, const char* name) {
    check(a.ndim() == 5, std::string(name) + ": expected a 5-d array (n, f, R, h, w)");
    RotStack<float> s(int(a.shape(0)), int(a.shape(1)), int(a.shape(2)), int(a.shape(3)),
                      int(a.shape(4)));
    std::copy(a.data(), a.data() + s.data.size(), s.data.begin());
    return s;
}

std::vector<CanonicalFilter<float>> canonical_bank(const Arr& w, const Arr& bias) {
    check(w.ndim() == 4, "w: expected a 4-d array (f, d, m, m)");
    check(bias.ndim() == 1 && bias.shape(0) == w.shape(0), "bias: expected shape (f,)");
    const int f = int(w.shape(0)), d = int(w.shape(1)), m = int(w.shape(2));
    check(int(w.shape(3)) == m, "w: filters must be square");
    const std::vector<uint8_t> mask = circular_mask(m);
    std::vector<CanonicalFilter<float>> bank;
    for (int i = 0; i < f; ++i) {
        CanonicalFilter<float> cf;
        cf.weights = Tensor4<float>(1, d, m, m);
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < m * m; ++k)
                cf.weights.data[size_t(j) * m * m + k] =
                    mask[size_t(k)] ? w.data()[((size_t(i) * d + j) * m * m) + k] : 0.0f;
        cf.bias = bias.data()[i];
        bank.push_back(std::move(cf));
    }
    return bank;
}

std::vector<VectorFilter<float>> vector_bank(const Arr& wu, const Arr& wv, const Arr& bias) {
    check(wu.ndim() == 4 && wv.ndim() == 4, "wu/wv: expected 4-d arrays (f, d, m, m)");
    for (int k = 0; k < 4; ++k)
        check(wu.shape(k) == wv.shape(k), "wu/wv: shapes must match");
    check(bias.ndim() == 1 && bias.shape(0) == wu.shape(0), "bias: expected shape (f,)");
    const int f = int(wu.shape(0)), d = int(wu.shape(1)), m = int(wu.shape(2));
    check(int(wu.shape(3)) == m, "wu: filters must be square");
    const std::vector<uint8_t> mask = circular_mask(m);
    std::vector<VectorFilter<float>> bank;
    for (int i = 0; i < f; ++i) {
        VectorFilter<float> vf;
        vf.wu = Tensor4<float>(1, d, m, m);
        vf.wv = Tensor4<float>(1, d, m, m);
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < m * m; ++k) {
                const size_t src = (size_t(i) * d + j) * m * m + k;
                const size_t dst = size_t(j) * m * m + k;
                vf.wu.data[dst] = mask[size_t(k)] ? wu.data()[src] : 0.0f;
                vf.wv.data[dst] = mask[size_t(k)] ? wv.data()[src] : 0.0f;
            }
        vf.bias = bias.data()[i];
        bank.push_back(std::move(vf));
    }
    return bank;
}

} // namespace

PYBIND11_MODULE(_core, mod) {
    mod.doc() = "rotation equivariant vector field network kernels";
    mod.attr("__version__") = "1.0.0";

    mod.def(
        "rot_conv",
        [](const Arr& x, const Arr& w, const Arr& bias, int R, int pad) {
            const Tensor4<float> xt = tensor_from(x, "x");
            const auto bank = canonical_bank(w, bias);
            const OrientationSet orient = OrientationSet::make(R);
            return array_from(rotconv_forward(xt, bank, orient, pad));
        },
        py::arg("x"), py::arg("w"), py::arg("bias"), py::arg("R"), py::arg("pad"),
        "Convolve with a canonical filter bank resampled at R orientations; "
        "returns (n, f, R, h, w).");

    mod.def(
        "orientation_pool",
        [](const Arr& stack) {
            const RotStack<float> s = stack_from(stack, "stack");
            auto [polar, field] = roteq::orientation_pool(s);
            return py::make_tuple(array_from(field.u), array_from(field.v),
                                  array_from(polar.rho), array_from(polar.theta_deg));
        },
        py::arg("stack"),
        "Max-pool over the orientation axis; returns (u, v, rho, theta_deg).");

    mod.def(
        "vec_conv",
        [](const Arr& u, const Arr& v, const Arr& wu, const Arr& wv, const Arr& bias, int pad) {
            VectorField<float> z{tensor_from(u, "u"), tensor_from(v, "v")};
            check(z.u.same_shape(z.v), "u/v: shapes must match");
            return array_from(vecconv(z, vector_bank(wu, wv, bias), pad));
        },
        py::arg("u"), py::arg("v"), py::arg("wu"), py::arg("wv"), py::arg("bias"),
        py::arg("pad"), "Convolve a vector field with a bank of vector filters.");

    mod.def(
        "vec_rot_conv",
        [](const Arr& u, const Arr& v, const Arr& wu, const Arr& wv, const Arr& bias, int R,
           int pad) {
            VectorField<float> z{tensor_from(u, "u"), tensor_from(v, "v")};
            check(z.u.same_shape(z.v), "u/v: shapes must match");
            const OrientationSet orient = OrientationSet::make(R);
            return array_from(vec_rotconv(z, vector_bank(wu, wv, bias), orient, pad));
        },
        py::arg("u"), py::arg("v"), py::arg("wu"), py::arg("wv"), py::arg("bias"),
        py::arg("R"), py::arg("pad"),
        "Convolve a vector field with vector filters resampled at R orientations.");

    mod.def(
        "rotate_canonical",
        [](const Arr& w, double angle_deg) {
            check(w.ndim() == 4, "w: expected a 4-d array (1, d, m, m)");
            CanonicalFilter<float> cf;
            cf.weights = Tensor4<float>(int(w.shape(0)), int(w.shape(1)), int(w.shape(2)),
                                        int(w.shape(3)));
            std::copy(w.data(), w.data() + cf.weights.data.size(), cf.weights.data.begin());
            return array_from(rotate_filter(cf, angle_deg));
        },
        py::arg("w"), py::arg("angle_deg"),
        "Resample a disk-masked filter at the given angle (bilinear).");

    mod.def(
        "predict",
        [](const std::string& checkpoint, const Arr& x) {
            Model<float> model = load_checkpoint<float>(checkpoint);
            return array_from(model.forward(tensor_from(x, "x"), false, nullptr));
        },
        py::arg("checkpoint"), py::arg("x"),
        "Run a checkpoint on a batch (n, c, h, w); returns class probabilities.");

    mod.def(
        "parameter_count",
        [](const std::string& config_json) {
            const ModelConfig cfg = model_config_from_json(config_json, "/model");
            return Model<float>::build(cfg).parameter_count();
        },
        py::arg("config_json"), "Trainable parameter count for a model config (JSON text).");
}
