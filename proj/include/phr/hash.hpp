#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "phr/common.hpp"

namespace phr {

/// Incremental FNV-1a 64-bit hash. Used for config hashes and the content
/// hashes written into run records.
class Hasher {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 1099511628211ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }

    u64 value() const { return state_; }

    std::string hex() const {
        static const char* digits = "0123456789abcdef";
        std::string out(16, '0');
        u64 v = state_;
        for (int i = 15; i >= 0; --i) {
            out[static_cast<std::size_t>(i)] = digits[v & 0xf];
            v >>= 4;
        }
        return out;
    }

private:
    u64 state_ = 1469598103934665603ull;
};

inline std::string hash_bytes(const void* data, std::size_t n) {
    Hasher h;
    h.update(data, n);
    return h.hex();
}

inline std::string hash_string(const std::string& s) {
    return hash_bytes(s.data(), s.size());
}

inline std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("hash_file: cannot open " + path);
    Hasher h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

}  // namespace phr
