#pragma once

#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "longfilter/types.hpp"

namespace longfilter {

/// Anything that returns ln p(tokens[i] | tokens[0, i)) for i in [eval_start, eval_end),
/// with 1 <= eval_start < eval_end <= tokens.size().
template <class P>
concept logprob_provider = requires(const P& p, std::span<const token_id> tokens, std::size_t a, std::size_t b) {
    { p.logprobs(tokens, a, b) } -> std::convertible_to<std::vector<double>>;
    { p.vocab_size() } -> std::convertible_to<std::size_t>;
};

/// Providers that can truncate each position's context to a fixed window in one call.
template <class P>
concept windowed_logprob_provider =
    logprob_provider<P> &&
    requires(const P& p, std::span<const token_id> tokens, std::size_t a, std::size_t b, std::size_t w) {
        { p.logprobs_windowed(tokens, a, b, w) } -> std::convertible_to<std::vector<double>>;
    };

/// Providers that can score a token with no context at all.
template <class P>
concept unconditional_logprob_provider = logprob_provider<P> && requires(const P& p, token_id t) {
    { p.unconditional_logprob(t) } -> std::convertible_to<double>;
};

template <logprob_provider P>
LogProbSlice logprob_slice(const P& provider, std::span<const token_id> tokens, std::size_t eval_start,
                           std::size_t eval_end, std::string seq_id = {}) {
    LogProbSlice slice{std::move(seq_id), eval_start, provider.logprobs(tokens, eval_start, eval_end)};
    return slice;
}

}  // namespace longfilter
