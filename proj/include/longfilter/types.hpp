#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "longfilter/error.hpp"

namespace longfilter {

using token_id = std::uint32_t;

inline constexpr const char* version = "0.1.0";

/// Natural-log probabilities of the realized tokens `tokens[eval_start + i]`
/// under whatever prefix the producer was given.
struct LogProbSlice {
    std::string seq_id;
    std::size_t eval_start = 0;
    std::vector<double> values;

    std::size_t eval_end() const noexcept { return eval_start + values.size(); }
};

/// Full next-token distribution over a vocabulary.
struct DistTable {
    std::vector<double> probs;

    std::size_t size() const noexcept { return probs.size(); }
    double operator[](std::size_t t) const { return probs[t]; }
};

/// Throws protocol_error unless every value is finite and <= 0.
inline void validate_logprobs(const std::vector<double>& values, const std::string& origin) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i]) || values[i] > 0.0) {
            throw protocol_error(origin + ": invalid log-probability " + std::to_string(values[i]) +
                                 " at offset " + std::to_string(i));
        }
    }
}

}  // namespace longfilter
