#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "roteq/tensor.hpp"

namespace roteq {

// RTQT tensor container: magic "RTQT", u32 version=1, u8 dtype
// (0 = float32, 1 = float64), u32 ndim, ndim x u32 dims, then the
// row-major little-endian payload.
struct RtqtBlob {
    int dtype = 0;
    std::vector<uint32_t> dims;
    std::vector<float> f32;
    std::vector<double> f64;

    size_t element_count() const {
        size_t n = 1;
        for (uint32_t d : dims) n *= d;
        return dims.empty() ? 0 : n;
    }

    template <typename T>
    Tensor4<T> as_tensor4() const; // casts across precision when needed

    template <typename T>
    static RtqtBlob from_tensor4(const Tensor4<T>& t);
    static RtqtBlob from_f32(std::vector<uint32_t> dims, std::vector<float> payload);
    static RtqtBlob from_f64(std::vector<uint32_t> dims, std::vector<double> payload);
};

void write_rtqt(std::ostream& os, const RtqtBlob& blob);
RtqtBlob read_rtqt(std::istream& is);

void write_rtqt_file(const std::string& path, const RtqtBlob& blob);
RtqtBlob read_rtqt_file(const std::string& path);

// Atomic file write: stream into <path>.tmp then rename.
void atomic_write_file(const std::string& path, const std::string& payload);

} // namespace roteq
