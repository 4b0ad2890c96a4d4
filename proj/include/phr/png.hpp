#pragma once

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "phr/common.hpp"
#include "phr/tensor.hpp"

namespace phr {

/// Writes a [-1,1] image as 16-bit grayscale PNG.
inline void write_png16(const std::string& path, const ImageF& image) {
    require(image.rank() == 2, "write_png16: expected 2-D image");
    i64 h = image.dim(0), w = image.dim(1);

    // filter byte 0 per scanline, big-endian 16-bit samples
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<std::size_t>(h * (1 + 2 * w)));
    for (i64 r = 0; r < h; ++r) {
        raw.push_back(0);
        for (i64 c = 0; c < w; ++c) {
            double v = (static_cast<double>(image.at(r, c)) + 1.0) * 0.5;
            v = std::min(1.0, std::max(0.0, v));
            auto s = static_cast<unsigned>(v * 65535.0 + 0.5);
            raw.push_back(static_cast<unsigned char>(s >> 8));
            raw.push_back(static_cast<unsigned char>(s & 0xff));
        }
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> idat(bound);
    if (compress2(idat.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  Z_DEFAULT_COMPRESSION) != Z_OK)
        throw io_error("png: deflate failed");
    idat.resize(bound);

    std::vector<unsigned char> out;
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.insert(out.end(), sig, sig + 8);

    auto put_u32 = [](std::vector<unsigned char>& v, u32 x) {
        v.push_back(static_cast<unsigned char>(x >> 24));
        v.push_back(static_cast<unsigned char>(x >> 16));
        v.push_back(static_cast<unsigned char>(x >> 8));
        v.push_back(static_cast<unsigned char>(x));
    };
    auto chunk = [&](const char* type, const std::vector<unsigned char>& payload) {
        put_u32(out, static_cast<u32>(payload.size()));
        std::size_t start = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), payload.begin(), payload.end());
        uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
        put_u32(out, static_cast<u32>(crc));
    };

    std::vector<unsigned char> ihdr;
    put_u32(ihdr, static_cast<u32>(w));
    put_u32(ihdr, static_cast<u32>(h));
    ihdr.push_back(16);  // bit depth
    ihdr.push_back(0);   // grayscale
    ihdr.push_back(0);   // deflate
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    chunk("IHDR", ihdr);
    chunk("IDAT", idat);
    chunk("IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot write " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

}  // namespace phr
