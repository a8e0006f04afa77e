#include "roteq/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace roteq {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("RTQT: truncated stream");
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

template <typename T>
void put_scalar_le(std::ostream& os, T v) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    U bits;
    std::memcpy(&bits, &v, sizeof(T));
    unsigned char b[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) b[i] = (unsigned char)((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_scalar_le(std::istream& is) {
    using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    unsigned char b[sizeof(T)];
    is.read(reinterpret_cast<char*>(b), sizeof(T));
    if (!is) throw std::runtime_error("RTQT: truncated payload");
    U bits = 0;
    for (size_t i = 0; i < sizeof(T); ++i) bits |= U(b[i]) << (8 * i);
    T v;
    std::memcpy(&v, &bits, sizeof(T));
    return v;
}

} // namespace

template <typename T>
Tensor4<T> RtqtBlob::as_tensor4() const {
    check(dims.size() == 4, "RTQT: expected 4 dims, got " + std::to_string(dims.size()));
    Tensor4<T> t{int(dims[0]), int(dims[1]), int(dims[2]), int(dims[3])};
    if (dtype == 0) {
        for (size_t i = 0; i < f32.size(); ++i) t.data[i] = T(f32[i]);
    } else {
        for (size_t i = 0; i < f64.size(); ++i) t.data[i] = T(f64[i]);
    }
    return t;
}

template Tensor4<float> RtqtBlob::as_tensor4<float>() const;
template Tensor4<double> RtqtBlob::as_tensor4<double>() const;

template <typename T>
RtqtBlob RtqtBlob::from_tensor4(const Tensor4<T>& t) {
    RtqtBlob b;
    b.dims = {uint32_t(t.n), uint32_t(t.c), uint32_t(t.h), uint32_t(t.w)};
    if constexpr (sizeof(T) == 4) {
        b.dtype = 0;
        b.f32.assign(t.data.begin(), t.data.end());
    } else {
        b.dtype = 1;
        b.f64.assign(t.data.begin(), t.data.end());
    }
    return b;
}

template RtqtBlob RtqtBlob::from_tensor4<float>(const Tensor4<float>&);
template RtqtBlob RtqtBlob::from_tensor4<double>(const Tensor4<double>&);

RtqtBlob RtqtBlob::from_f32(std::vector<uint32_t> dims, std::vector<float> payload) {
    RtqtBlob b;
    b.dtype = 0;
    b.dims = std::move(dims);
    b.f32 = std::move(payload);
    check(b.f32.size() == b.element_count(), "RTQT: payload size does not match dims");
    return b;
}

RtqtBlob RtqtBlob::from_f64(std::vector<uint32_t> dims, std::vector<double> payload) {
    RtqtBlob b;
    b.dtype = 1;
    b.dims = std::move(dims);
    b.f64 = std::move(payload);
    check(b.f64.size() == b.element_count(), "RTQT: payload size does not match dims");
    return b;
}

void write_rtqt(std::ostream& os, const RtqtBlob& blob) {
    os.write("RTQT", 4);
    put_u32(os, 1u);
    const unsigned char dt = (unsigned char)(blob.dtype);
    os.write(reinterpret_cast<const char*>(&dt), 1);
    put_u32(os, uint32_t(blob.dims.size()));
    for (uint32_t d : blob.dims) put_u32(os, d);
    if (blob.dtype == 0)
        for (float v : blob.f32) put_scalar_le(os, v);
    else
        for (double v : blob.f64) put_scalar_le(os, v);
    if (!os) throw std::runtime_error("RTQT: write failed");
}

RtqtBlob read_rtqt(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RTQT", 4) != 0) throw std::runtime_error("RTQT: bad magic");
    const uint32_t version = get_u32(is);
    if (version != 1) throw std::runtime_error("RTQT: unsupported version " + std::to_string(version));
    unsigned char dt;
    is.read(reinterpret_cast<char*>(&dt), 1);
    if (!is || dt > 1) throw std::runtime_error("RTQT: bad dtype");
    RtqtBlob b;
    b.dtype = dt;
    const uint32_t ndim = get_u32(is);
    if (ndim > 8) throw std::runtime_error("RTQT: implausible ndim " + std::to_string(ndim));
    b.dims.resize(ndim);
    for (uint32_t& d : b.dims) d = get_u32(is);
    const size_t count = b.element_count();
    if (dt == 0) {
        b.f32.resize(count);
        for (float& v : b.f32) v = get_scalar_le<float>(is);
    } else {
        b.f64.resize(count);
        for (double& v : b.f64) v = get_scalar_le<double>(is);
    }
    return b;
}

void write_rtqt_file(const std::string& path, const RtqtBlob& blob) {
    std::ostringstream oss(std::ios::binary);
    write_rtqt(oss, blob);
    atomic_write_file(path, oss.str());
}

RtqtBlob read_rtqt_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_rtqt(is);
}

void atomic_write_file(const std::string& path, const std::string& payload) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
        os.write(payload.data(), std::streamsize(payload.size()));
        if (!os) throw std::runtime_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("rename failed: " + tmp + " -> " + path);
}

} // namespace roteq
