#pragma once

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "phr/common.hpp"
#include "phr/tensor.hpp"

namespace phr {

namespace detail {

inline std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    std::streamoff n = in.tellg();
    in.seekg(0);
    std::vector<char> buf(static_cast<std::size_t>(n));
    in.read(buf.data(), n);
    return buf;
}

inline bool is_gzip(const std::vector<char>& b) {
    return b.size() >= 2 && static_cast<unsigned char>(b[0]) == 0x1f &&
           static_cast<unsigned char>(b[1]) == 0x8b;
}

inline std::vector<char> gunzip(const std::vector<char>& in) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) throw io_error("inflateInit2 failed");
    std::vector<char> out;
    out.resize(std::max<std::size_t>(in.size() * 4, 1 << 16));
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
    zs.avail_in = static_cast<uInt>(in.size());
    std::size_t written = 0;
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        if (written == out.size()) out.resize(out.size() * 2);
        zs.next_out = reinterpret_cast<Bytef*>(out.data() + written);
        zs.avail_out = static_cast<uInt>(out.size() - written);
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw io_error("gzip decompression failed");
        }
        written = out.size() - zs.avail_out;
    }
    inflateEnd(&zs);
    out.resize(written);
    return out;
}

inline std::vector<char> gzip_compress(const std::vector<char>& in) {
    z_stream zs{};
    if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) !=
        Z_OK)
        throw io_error("deflateInit2 failed");
    std::vector<char> out(deflateBound(&zs, static_cast<uLong>(in.size())));
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = reinterpret_cast<Bytef*>(out.data());
    zs.avail_out = static_cast<uInt>(out.size());
    int rc = deflate(&zs, Z_FINISH);
    if (rc != Z_STREAM_END) {
        deflateEnd(&zs);
        throw io_error("gzip compression failed");
    }
    out.resize(out.size() - zs.avail_out);
    deflateEnd(&zs);
    return out;
}

template <class T>
T read_le(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

}  // namespace detail

/// A parsed NIfTI-1 scalar volume, stored as {nz, ny, nx} so that one axial
/// slice (fixed z) is a contiguous {ny, nx} plane.
struct NiftiVolume {
    Tensor<float> voxels;
    double scl_slope = 0.0;
    double scl_inter = 0.0;
    short datatype = 0;
};

inline NiftiVolume read_nifti(const std::string& path) {
    auto bytes = detail::read_file_bytes(path);
    if (detail::is_gzip(bytes)) bytes = detail::gunzip(bytes);
    if (bytes.size() < 352) throw io_error("not a NIfTI-1 file (too small): " + path);
    i64 sizeof_hdr = detail::read_le<int>(bytes.data());
    if (sizeof_hdr != 348) throw io_error("not a NIfTI-1 file (bad header size): " + path);
    const char* magic = bytes.data() + 344;
    if (std::strncmp(magic, "n+1", 3) != 0 && std::strncmp(magic, "ni1", 3) != 0)
        throw io_error("not a NIfTI-1 file (bad magic): " + path);

    short ndim = detail::read_le<short>(bytes.data() + 40);
    if (ndim < 3) throw io_error("expected a 3-D volume: " + path);
    i64 nx = detail::read_le<short>(bytes.data() + 42);
    i64 ny = detail::read_le<short>(bytes.data() + 44);
    i64 nz = detail::read_le<short>(bytes.data() + 46);
    for (int d = 4; d <= ndim; ++d) {
        short extra = detail::read_le<short>(bytes.data() + 40 + 2 * d);
        if (extra > 1) throw io_error("expected a scalar 3-D volume: " + path);
    }
    short datatype = detail::read_le<short>(bytes.data() + 70);
    float vox_offset = detail::read_le<float>(bytes.data() + 108);
    float scl_slope = detail::read_le<float>(bytes.data() + 112);
    float scl_inter = detail::read_le<float>(bytes.data() + 116);

    i64 n = nx * ny * nz;
    std::size_t off = static_cast<std::size_t>(vox_offset);
    NiftiVolume vol;
    vol.datatype = datatype;
    vol.scl_slope = scl_slope;
    vol.scl_inter = scl_inter;
    vol.voxels = Tensor<float>({nz, ny, nx});

    auto load = [&](auto sample_type, std::size_t bytes_per) {
        using S = decltype(sample_type);
        if (off + static_cast<std::size_t>(n) * bytes_per > bytes.size())
            throw io_error("NIfTI data truncated: " + path);
        const char* p = bytes.data() + off;
        for (i64 i = 0; i < n; ++i) {
            S v = detail::read_le<S>(p + static_cast<std::size_t>(i) * bytes_per);
            double x = static_cast<double>(v);
            if (scl_slope != 0.0f) x = x * scl_slope + scl_inter;
            vol.voxels.data[static_cast<std::size_t>(i)] = static_cast<float>(x);
        }
    };
    switch (datatype) {
        case 2: load(u8{}, 1); break;            // DT_UINT8
        case 4: load(short{}, 2); break;         // DT_INT16
        case 8: load(int{}, 4); break;           // DT_INT32
        case 16: load(float{}, 4); break;        // DT_FLOAT32
        case 64: load(double{}, 8); break;       // DT_FLOAT64
        case 512: load(std::uint16_t{}, 2); break;  // DT_UINT16
        default: throw io_error("unsupported NIfTI datatype " + std::to_string(datatype));
    }
    return vol;
}

/// Minimal NIfTI-1 writer (float32 or int16), used for phantom generation
/// and test fixtures. Writes .nii or .nii.gz depending on the extension.
inline void write_nifti(const std::string& path, const Tensor<float>& voxels,
                        bool as_int16 = false) {
    require(voxels.rank() == 3, "write_nifti: expected {nz, ny, nx}");
    i64 nz = voxels.dim(0), ny = voxels.dim(1), nx = voxels.dim(2);
    std::vector<char> out(352, 0);
    auto put = [&out](std::size_t off, auto v) { std::memcpy(out.data() + off, &v, sizeof v); };
    put(0, static_cast<int>(348));
    put(40, static_cast<short>(3));
    put(42, static_cast<short>(nx));
    put(44, static_cast<short>(ny));
    put(46, static_cast<short>(nz));
    for (std::size_t d = 4; d <= 7; ++d) put(40 + 2 * d, static_cast<short>(1));
    put(70, static_cast<short>(as_int16 ? 4 : 16));
    put(72, static_cast<short>(as_int16 ? 16 : 32));
    put(108, static_cast<float>(352));
    put(112, static_cast<float>(0));  // scl_slope 0: no rescale
    put(116, static_cast<float>(0));
    // pixdim: unit spacing
    put(76, static_cast<float>(1));
    put(80, static_cast<float>(1));
    put(84, static_cast<float>(1));
    put(88, static_cast<float>(1));
    std::memcpy(out.data() + 344, "n+1\0", 4);

    i64 n = nx * ny * nz;
    if (as_int16) {
        out.reserve(out.size() + static_cast<std::size_t>(n) * 2);
        for (i64 i = 0; i < n; ++i) {
            short v = static_cast<short>(voxels.data[static_cast<std::size_t>(i)]);
            const char* p = reinterpret_cast<const char*>(&v);
            out.insert(out.end(), p, p + 2);
        }
    } else {
        const char* p = reinterpret_cast<const char*>(voxels.data.data());
        out.insert(out.end(), p, p + static_cast<std::size_t>(n) * 4);
    }

    if (path.size() > 3 && path.substr(path.size() - 3) == ".gz")
        out = detail::gzip_compress(out);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace phr
