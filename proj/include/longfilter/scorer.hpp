#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "longfilter/corpus.hpp"
#include "longfilter/error.hpp"
#include "longfilter/provider.hpp"
#include "longfilter/types.hpp"

namespace longfilter {

struct ScoringConfig {
    std::size_t short_len = 4096;
    std::size_t long_len = 65536;
    std::optional<std::size_t> chunk_len;  // defaults to short_len
    std::optional<std::size_t> overlap;    // defaults to chunk_len / 2
    bool mask_doc_boundaries = false;
    bool clip_negative = false;

    std::size_t chunk() const { return chunk_len.value_or(short_len); }
    std::size_t overlap_len() const { return overlap.value_or(chunk() / 2); }

    void validate(std::size_t pack_len) const {
        if (short_len == 0 || long_len == 0) throw config_error("context lengths must be positive");
        if (short_len >= long_len) throw config_error("short_len must be smaller than long_len");
        if (chunk() == 0) throw config_error("chunk_len must be positive");
        if (overlap_len() >= chunk()) throw config_error("overlap must be smaller than chunk_len");
        if (long_len > pack_len) throw config_error("long_len must not exceed pack_len");
        if (chunk() > pack_len) throw config_error("chunk_len must not exceed pack_len");
    }
};

struct Chunk {
    std::size_t start = 0;
    std::size_t end = 0;
    std::size_t score_from = 0;

    bool operator==(const Chunk&) const = default;
};

struct ChunkPlan {
    std::vector<Chunk> chunks;
};

struct TokenScore {
    std::size_t position = 0;
    double lp_long = 0.0;
    double lp_short = 0.0;
    double gain = 0.0;
};

struct SequenceScore {
    std::string seq_id;
    double score = 0.0;
    std::size_t n_scored = 0;
};

struct ScoredSequence {
    SequenceScore summary;
    std::vector<TokenScore> tokens;
};

/// Overlapping chunks starting every (chunk_len - overlap) tokens. Each chunk
/// scores only the positions past its overlap, so the scoring ranges tile
/// [1, pack_len) exactly once.
inline ChunkPlan plan_chunks(std::size_t pack_len, std::size_t chunk_len, std::size_t overlap) {
    if (!(overlap < chunk_len && chunk_len <= pack_len)) {
        throw argument_error("chunk plan requires 0 <= overlap < chunk_len <= pack_len (got overlap " +
                             std::to_string(overlap) + ", chunk_len " + std::to_string(chunk_len) + ", pack_len " +
                             std::to_string(pack_len) + ")");
    }
    ChunkPlan plan;
    const std::size_t stride = chunk_len - overlap;
    for (std::size_t start = 0;; start += stride) {
        const std::size_t end = std::min(start + chunk_len, pack_len);
        plan.chunks.push_back(Chunk{start, end, start == 0 ? 1 : start + overlap});
        if (end == pack_len) break;
    }
    return plan;
}

/// Per-token surrogate KL gain: p_long * ln(p_long / p_short).
inline double surrogate_gain(double lp_long, double lp_short) { return std::exp(lp_long) * (lp_long - lp_short); }

/// The same quantity written with per-token losses L = -ln p.
inline double surrogate_gain_from_losses(double loss_long, double loss_short) {
    return std::exp(-loss_long) * (loss_short - loss_long);
}

namespace detail {

template <class Fn>
decltype(auto) with_seq_context(const std::string& seq_id, Fn&& fn) {
    try {
        return fn();
    } catch (const transport_error& e) {
        throw transport_error("sequence " + seq_id + ": " + e.what(), e.attempts());
    } catch (const protocol_error& e) {
        throw protocol_error("sequence " + seq_id + ": " + e.what());
    }
}

template <logprob_provider P>
std::vector<double> checked_logprobs(const P& provider, std::span<const token_id> tokens, std::size_t a,
                                     std::size_t b, std::size_t window, const std::string& seq_id) {
    std::vector<double> values;
    if constexpr (windowed_logprob_provider<P>) {
        values = provider.logprobs_windowed(tokens, a, b, window);
    } else {
        if (b - 1 > window) throw argument_error("window truncation requires a windowed provider");
        values = provider.logprobs(tokens, a, b);
    }
    if (values.size() != b - a) {
        throw protocol_error("provider returned " + std::to_string(values.size()) + " values, expected " +
                             std::to_string(b - a));
    }
    validate_logprobs(values, "sequence " + seq_id);
    return values;
}

template <logprob_provider P>
double context_free_logprob(const P& provider, token_id t, const std::string& seq_id) {
    if constexpr (unconditional_logprob_provider<P>) {
        const double v = provider.unconditional_logprob(t);
        validate_logprobs({v}, "sequence " + seq_id);
        return v;
    } else {
        throw config_error("sequence " + seq_id +
                           ": a position with empty context needs a provider that supports unconditional "
                           "probabilities (use overlap >= 1 and mask_doc_boundaries off with remote backends)");
    }
}

/// Writes ln p(x_i | x[ctx_begin(i), i)) into out[i - 1] for i in [from, end),
/// where the context never reaches before `block_begin` and holds at most
/// `window` tokens.
template <logprob_provider P>
void eval_block(const P& provider, std::span<const token_id> tokens, std::size_t block_begin, std::size_t from,
                std::size_t end, std::size_t window, const std::string& seq_id, std::vector<double>& out) {
    if (from >= end) return;
    if (from == block_begin) {
        out[from - 1] = context_free_logprob(provider, tokens[from], seq_id);
        ++from;
        if (from >= end) return;
    }
    const auto block = tokens.subspan(block_begin, end - block_begin);
    const std::size_t rel_from = from - block_begin;
    const std::size_t rel_end = end - block_begin;

    if constexpr (windowed_logprob_provider<P>) {
        auto v = checked_logprobs(provider, block, rel_from, rel_end, window, seq_id);
        std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(from - 1));
    } else {
        // Positions whose whole prefix fits the window go in one request; the
        // rest need one request each.
        const std::size_t untruncated_end = std::min(rel_end, window + 1);
        if (rel_from < untruncated_end) {
            auto v = checked_logprobs(provider, block.first(untruncated_end), rel_from, untruncated_end, window,
                                      seq_id);
            std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(from - 1));
        }
        for (std::size_t r = std::max(rel_from, untruncated_end); r < rel_end; ++r) {
            auto v = checked_logprobs(provider, block.subspan(r - window, window + 1), window, window + 1, window,
                                      seq_id);
            out[block_begin + r - 1] = v[0];
        }
    }
}

inline LogProbSlice make_slice(const PackedSequence& seq, std::vector<double> values) {
    return LogProbSlice{seq.seq_id, 1, std::move(values)};
}

}  // namespace detail

/// Long-context log-probabilities for positions [1, pack_len): each position
/// conditions on its prefix, truncated to the last long_len tokens (and to
/// the containing document when masking is on).
template <logprob_provider P>
LogProbSlice long_logprobs(const P& provider, const PackedSequence& seq, const ScoringConfig& cfg) {
    const std::size_t n = seq.tokens.size();
    if (n < 2) throw argument_error("sequence " + seq.seq_id + " is too short to score");
    std::vector<double> out(n - 1);
    const std::span<const token_id> tokens(seq.tokens);
    detail::with_seq_context(seq.seq_id, [&] {
        if (cfg.mask_doc_boundaries && !seq.spans.empty()) {
            for (const auto& s : seq.spans) {
                detail::eval_block(provider, tokens, s.start, std::max<std::size_t>(s.start, 1), s.end,
                                   cfg.long_len, seq.seq_id, out);
            }
        } else {
            detail::eval_block(provider, tokens, 0, 1, n, cfg.long_len, seq.seq_id, out);
        }
    });
    return detail::make_slice(seq, std::move(out));
}

/// Short-context log-probabilities: every chunk is evaluated on its own
/// tokens only and contributes the positions in its scoring range.
template <logprob_provider P>
LogProbSlice short_logprobs(const P& provider, const PackedSequence& seq, const ChunkPlan& plan,
                            const ScoringConfig& cfg) {
    const std::size_t n = seq.tokens.size();
    if (n < 2) throw argument_error("sequence " + seq.seq_id + " is too short to score");
    if (plan.chunks.empty() || plan.chunks.back().end != n) {
        throw argument_error("chunk plan does not cover sequence " + seq.seq_id);
    }
    std::vector<double> out(n - 1);
    const std::span<const token_id> tokens(seq.tokens);
    detail::with_seq_context(seq.seq_id, [&] {
        for (const auto& c : plan.chunks) {
            const std::size_t chunk_window = c.end - c.start;
            if (!cfg.mask_doc_boundaries || seq.spans.empty()) {
                detail::eval_block(provider, tokens, c.start, c.score_from, c.end, chunk_window, seq.seq_id, out);
                continue;
            }
            for (const auto& s : seq.spans) {
                const std::size_t a = std::max(c.start, s.start);
                const std::size_t b = std::min(c.end, s.end);
                if (a >= b) continue;
                const std::size_t from = std::max(c.score_from, a);
                detail::eval_block(provider, tokens, a, from, b, chunk_window, seq.seq_id, out);
            }
        }
    });
    return detail::make_slice(seq, std::move(out));
}

inline std::vector<TokenScore> token_scores(const LogProbSlice& lp_long, const LogProbSlice& lp_short,
                                            bool clip_negative = false) {
    if (lp_long.eval_start != lp_short.eval_start || lp_long.values.size() != lp_short.values.size()) {
        throw argument_error("log-probability slices are not aligned");
    }
    std::vector<TokenScore> out;
    out.reserve(lp_long.values.size());
    for (std::size_t i = 0; i < lp_long.values.size(); ++i) {
        const double l = lp_long.values[i];
        const double s = lp_short.values[i];
        double g = surrogate_gain(l, s);
        if (clip_negative && g < 0.0) g = 0.0;
        out.push_back(TokenScore{lp_long.eval_start + i, l, s, g});
    }
    return out;
}

/// Neumaier-compensated sum.
inline double compensated_sum(std::span<const double> xs) {
    double sum = 0.0;
    double comp = 0.0;
    for (double x : xs) {
        const double t = sum + x;
        comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
        sum = t;
    }
    return sum + comp;
}

inline SequenceScore aggregate(const std::vector<TokenScore>& scores, std::string seq_id) {
    if (scores.empty()) throw argument_error("cannot aggregate an empty score list");
    std::vector<double> gains;
    gains.reserve(scores.size());
    for (const auto& s : scores) gains.push_back(s.gain);
    return SequenceScore{std::move(seq_id), compensated_sum(gains) / static_cast<double>(gains.size()),
                         gains.size()};
}

template <logprob_provider P>
ScoredSequence score_sequence(const P& provider, const PackedSequence& seq, const ScoringConfig& cfg) {
    cfg.validate(seq.tokens.size());
    const auto plan = plan_chunks(seq.tokens.size(), cfg.chunk(), cfg.overlap_len());
    const auto lp_long = long_logprobs(provider, seq, cfg);
    const auto lp_short = short_logprobs(provider, seq, plan, cfg);
    auto tokens = token_scores(lp_long, lp_short, cfg.clip_negative);
    auto summary = aggregate(tokens, seq.seq_id);
    return ScoredSequence{std::move(summary), std::move(tokens)};
}

}  // namespace longfilter
