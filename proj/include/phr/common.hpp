#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace phr {

using i64 = std::int64_t;
using u64 = std::uint64_t;
using u32 = std::uint32_t;
using u8 = std::uint8_t;

/// Thrown when a caller violates an operation's precondition.
struct contract_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown for I/O and other runtime failures.
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown when training encounters a non-finite loss. Carries the batch
/// indices that produced it so the failing samples can be inspected.
struct training_abort : std::runtime_error {
    std::vector<i64> batch_indices;
    explicit training_abort(const std::string& msg, std::vector<i64> indices = {})
        : std::runtime_error(msg), batch_indices(std::move(indices)) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw contract_error(msg);
}

}  // namespace phr
