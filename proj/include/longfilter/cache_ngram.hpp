#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "longfilter/corpus.hpp"
#include "longfilter/error.hpp"
#include "longfilter/types.hpp"

namespace longfilter {

struct CacheNGramParams {
    std::size_t order = 3;
    double add_k = 0.1;
    double cache_lambda = 0.3;
    double cache_decay = 0.999;

    void validate() const {
        if (order < 1) throw config_error("n-gram order must be >= 1");
        if (!(add_k > 0.0) || !std::isfinite(add_k)) throw config_error("add_k must be > 0");
        if (!(cache_lambda >= 0.0 && cache_lambda < 1.0)) throw config_error("cache_lambda must lie in [0, 1)");
        if (!(cache_decay > 0.0 && cache_decay <= 1.0)) throw config_error("cache_decay must lie in (0, 1]");
    }
};

namespace detail {

/// Decayed-recency counts of what followed each context inside the visible
/// prefix window. Occurrence weights are kept in a shared moving unit so that a
/// ratio within one context never needs the absolute decay factor.
class RecencyCache {
  public:
    RecencyCache(std::size_t order, std::size_t vocab, double decay)
        : max_ctx_(order - 1), vocab_(vocab), decay_(decay), unigram_(vocab), levels_(order - 1) {
        // Keep the largest live weight below ~1e200 before folding the unit forward.
        rebase_span_ = decay_ < 1.0 ? static_cast<std::size_t>(200.0 / -std::log10(decay_)) : 0;
        if (decay_ < 1.0 && rebase_span_ == 0) rebase_span_ = 1;
    }

    std::size_t window_start() const noexcept { return ws_; }
    std::size_t added_upto() const noexcept { return next_; }

    void reset(std::size_t start) {
        ws_ = next_ = base_ = start;
        std::fill(unigram_.begin(), unigram_.end(), Cell{});
        unigram_total_ = 0.0;
        unigram_count_ = 0;
        for (auto& level : levels_) level.clear();
    }

    /// Moves the window to [start, upto) with start and upto non-decreasing.
    void advance(std::span<const token_id> tokens, std::size_t start, std::size_t upto) {
        while (ws_ < start) {
            for (std::size_t j = 0; j <= max_ctx_; ++j) {
                const std::size_t p = ws_ + j;
                if (p >= next_) break;
                update(tokens, p, j, -1);
            }
            ++ws_;
        }
        while (next_ < upto) {
            if (rebase_span_ != 0 && next_ - base_ >= rebase_span_) rebase(next_);
            const std::size_t depth = std::min(max_ctx_, next_ - ws_);
            for (std::size_t j = 0; j <= depth; ++j) update(tokens, next_, j, +1);
            ++next_;
        }
    }

    /// Probability of `t` under the longest context (ending at the window end)
    /// that has been observed in the window. Requires a non-empty window.
    double prob(std::span<const token_id> tokens, token_id t) const {
        const std::size_t depth = std::min(max_ctx_, next_ - ws_);
        for (std::size_t j = depth; j >= 1; --j) {
            const auto& level = levels_[j - 1];
            auto it = level.find(context_key(tokens, next_ - j, j));
            if (it == level.end() || it->second.count == 0 || !(it->second.total > 0.0)) continue;
            for (const auto& c : it->second.cells) {
                if (c.token == t) return c.weight / it->second.total;
            }
            return 0.0;
        }
        if (unigram_count_ == 0 || !(unigram_total_ > 0.0)) return 0.0;
        return unigram_[t].weight / unigram_total_;
    }

    std::uint64_t context_key(std::span<const token_id> tokens, std::size_t begin, std::size_t len) const {
        std::uint64_t key = 0;
        for (std::size_t k = 0; k < len; ++k) key = key * vocab_ + tokens[begin + k];
        return key;
    }

  private:
    struct Cell {
        token_id token = 0;
        double weight = 0.0;
        std::uint32_t count = 0;
    };
    struct Entry {
        double total = 0.0;
        std::uint32_t count = 0;
        std::vector<Cell> cells;
    };

    double unit_weight(std::size_t p) const {
        // p may precede base_ when the window start trails a rebase.
        return decay_ < 1.0 ? std::pow(decay_, static_cast<double>(base_) - static_cast<double>(p)) : 1.0;
    }

    void update(std::span<const token_id> tokens, std::size_t p, std::size_t j, int sign) {
        const token_id t = tokens[p];
        const double w = unit_weight(p);
        if (j == 0) {
            Cell& c = unigram_[t];
            if (sign > 0) {
                c.weight += w;
                ++c.count;
                unigram_total_ += w;
                ++unigram_count_;
            } else {
                c.weight = --c.count == 0 ? 0.0 : c.weight - w;
                unigram_total_ = --unigram_count_ == 0 ? 0.0 : unigram_total_ - w;
            }
            return;
        }
        auto& level = levels_[j - 1];
        const std::uint64_t key = context_key(tokens, p - j, j);
        if (sign > 0) {
            Entry& e = level[key];
            e.total += w;
            ++e.count;
            for (auto& c : e.cells) {
                if (c.token == t) {
                    c.weight += w;
                    ++c.count;
                    return;
                }
            }
            e.cells.push_back(Cell{t, w, 1});
            return;
        }
        auto it = level.find(key);
        if (it == level.end()) return;
        Entry& e = it->second;
        if (--e.count == 0) {
            level.erase(it);
            return;
        }
        e.total -= w;
        for (std::size_t k = 0; k < e.cells.size(); ++k) {
            if (e.cells[k].token != t) continue;
            if (--e.cells[k].count == 0) {
                e.cells.erase(e.cells.begin() + static_cast<std::ptrdiff_t>(k));
            } else {
                e.cells[k].weight -= w;
            }
            break;
        }
    }

    void rebase(std::size_t new_base) {
        const double f = std::pow(decay_, static_cast<double>(new_base - base_));
        for (auto& c : unigram_) c.weight *= f;
        unigram_total_ *= f;
        for (auto& level : levels_) {
            for (auto& [key, e] : level) {
                e.total *= f;
                for (auto& c : e.cells) c.weight *= f;
            }
        }
        base_ = new_base;
    }

    std::size_t max_ctx_;
    std::size_t vocab_;
    double decay_;
    std::size_t rebase_span_ = 0;
    std::size_t ws_ = 0;
    std::size_t next_ = 0;
    std::size_t base_ = 0;
    std::vector<Cell> unigram_;
    double unigram_total_ = 0.0;
    std::uint64_t unigram_count_ = 0;
    std::vector<std::unordered_map<std::uint64_t, Entry>> levels_;
};

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}
inline void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t read_uint(std::istream& in, int bytes) {
    unsigned char b[8] = {};
    if (!in.read(reinterpret_cast<char*>(b), bytes)) throw io_error("truncated model file");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

/// Add-k smoothed n-gram interpolated with a decayed-recency cache over the
/// visible prefix:
///
///   p(t | prefix) = (1 - lambda) * p_ngram(t | last order-1 tokens)
///                 + lambda * p_cache(t | prefix)
///
/// p_ngram(t | h) = (c(h, t) + k) / (c(h) + k V) uses the longest available
/// context h (up to order-1 tokens). p_cache is the decayed frequency of t
/// after the longest context seen in the prefix; for order 1 this is the
/// plain recency-weighted unigram frequency. lambda is 0 for an empty prefix.
///
/// Immutable after fit(); all queries are const and thread-safe.
class CacheNGramModel {
  public:
    static constexpr std::uint32_t format_version = 1;
    static constexpr std::size_t max_table_vocab = 65536;

    static CacheNGramModel fit(const std::vector<TokenizedDoc>& corpus, std::size_t vocab_size,
                               const CacheNGramParams& params, std::string tokenizer_id = "byte256") {
        params.validate();
        if (vocab_size == 0) throw config_error("vocab_size must be positive");
        if (corpus.empty()) throw config_error("cannot fit a model on an empty corpus");
        check_key_width(vocab_size, params.order);

        CacheNGramModel m;
        m.params_ = params;
        m.vocab_ = vocab_size;
        m.tokenizer_id_ = std::move(tokenizer_id);
        m.unigram_.assign(vocab_size, 0);
        std::vector<std::unordered_map<std::uint64_t, std::unordered_map<token_id, std::uint64_t>>> raw(
            params.order - 1);
        std::size_t total_tokens = 0;
        for (const auto& doc : corpus) {
            const auto& toks = doc.tokens;
            for (std::size_t p = 0; p < toks.size(); ++p) {
                if (toks[p] >= vocab_size) {
                    throw argument_error("document " + doc.doc_id + " holds token " + std::to_string(toks[p]) +
                                         " >= vocab_size");
                }
                ++m.unigram_[toks[p]];
                ++m.unigram_total_;
                for (std::size_t j = 1; j < params.order && j <= p; ++j) {
                    ++raw[j - 1][m.key(toks, p - j, j)][toks[p]];
                }
            }
            total_tokens += toks.size();
        }
        if (total_tokens == 0) throw config_error("cannot fit a model on an empty corpus");

        m.levels_.resize(params.order - 1);
        for (std::size_t j = 0; j + 1 < params.order; ++j) {
            for (auto& [key, nexts] : raw[j]) {
                ContextCounts cc;
                cc.next.assign(nexts.begin(), nexts.end());
                std::sort(cc.next.begin(), cc.next.end());
                for (const auto& [t, c] : cc.next) cc.total += c;
                m.levels_[j].emplace(key, std::move(cc));
            }
        }
        return m;
    }

    const CacheNGramParams& params() const noexcept { return params_; }
    std::size_t order() const noexcept { return params_.order; }
    std::size_t vocab_size() const noexcept { return vocab_; }
    const std::string& tokenizer_id() const noexcept { return tokenizer_id_; }
    std::size_t max_context() const noexcept { return std::numeric_limits<std::int32_t>::max(); }

    /// Training count of `next` following `context` (context length < order).
    std::uint64_t count(std::span<const token_id> context, token_id next) const {
        if (context.size() >= params_.order) throw argument_error("context longer than order - 1");
        if (next >= vocab_) return 0;
        if (context.empty()) return unigram_[next];
        const auto* cc = find_context(context, 0, context.size());
        return cc ? cc->count_of(next) : 0;
    }

    /// ln p(tokens[i] | tokens[0, i)) for i in [eval_start, eval_end).
    std::vector<double> logprobs(std::span<const token_id> tokens, std::size_t eval_start,
                                 std::size_t eval_end) const {
        return logprobs_windowed(tokens, eval_start, eval_end, std::numeric_limits<std::size_t>::max());
    }

    /// As logprobs(), but position i sees only the last `max_context` tokens
    /// tokens[max(0, i - max_context), i).
    std::vector<double> logprobs_windowed(std::span<const token_id> tokens, std::size_t eval_start,
                                          std::size_t eval_end, std::size_t max_context) const {
        if (!(eval_start >= 1 && eval_start < eval_end && eval_end <= tokens.size())) {
            throw argument_error("invalid evaluation range [" + std::to_string(eval_start) + ", " +
                                 std::to_string(eval_end) + ") for " + std::to_string(tokens.size()) + " tokens");
        }
        if (max_context == 0) throw argument_error("max_context must be >= 1");
        check_tokens(tokens.first(eval_end));

        auto window_start = [&](std::size_t i) { return i > max_context ? i - max_context : 0; };
        detail::RecencyCache cache(params_.order, vocab_, params_.cache_decay);
        cache.reset(window_start(eval_start));
        std::vector<double> out;
        out.reserve(eval_end - eval_start);
        for (std::size_t i = eval_start; i < eval_end; ++i) {
            cache.advance(tokens, window_start(i), i);
            out.push_back(std::log(mixture(tokens, cache, tokens[i])));
        }
        return out;
    }

    /// ln p(t | empty prefix): the smoothed unigram.
    double unconditional_logprob(token_id t) const {
        if (t >= vocab_) throw argument_error("token id " + std::to_string(t) + " >= vocab_size");
        return std::log(unigram_prob(t));
    }

    /// Exact next-token distribution after `prefix`.
    DistTable full_next_distribution(std::span<const token_id> prefix) const {
        if (vocab_ > max_table_vocab) {
            throw capability_error("vocabulary of " + std::to_string(vocab_) + " is too large for a full table");
        }
        check_tokens(prefix);
        DistTable table;
        table.probs.resize(vocab_);
        if (prefix.empty()) {
            for (token_id t = 0; t < vocab_; ++t) table.probs[t] = unigram_prob(t);
            return table;
        }
        detail::RecencyCache cache(params_.order, vocab_, params_.cache_decay);
        cache.reset(0);
        cache.advance(prefix, 0, prefix.size());
        for (token_id t = 0; t < vocab_; ++t) table.probs[t] = mixture(prefix, cache, t);
        return table;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot write model file " + path.string());
        write(out);
        if (!out) throw io_error("failed writing model file " + path.string());
    }

    void write(std::ostream& out) const {
        out.write(magic, sizeof magic);
        detail::write_u32(out, format_version);
        detail::write_u32(out, static_cast<std::uint32_t>(params_.order));
        detail::write_u32(out, static_cast<std::uint32_t>(vocab_));
        detail::write_f64(out, params_.add_k);
        detail::write_f64(out, params_.cache_lambda);
        detail::write_f64(out, params_.cache_decay);
        detail::write_u32(out, static_cast<std::uint32_t>(tokenizer_id_.size()));
        out.write(tokenizer_id_.data(), static_cast<std::streamsize>(tokenizer_id_.size()));
        detail::write_u64(out, unigram_total_);
        for (auto c : unigram_) detail::write_u64(out, c);
        for (const auto& level : levels_) {
            std::vector<std::uint64_t> keys;
            keys.reserve(level.size());
            for (const auto& kv : level) keys.push_back(kv.first);
            std::sort(keys.begin(), keys.end());
            detail::write_u64(out, keys.size());
            for (auto key : keys) {
                const auto& cc = level.at(key);
                detail::write_u64(out, key);
                detail::write_u32(out, static_cast<std::uint32_t>(cc.next.size()));
                for (const auto& [t, c] : cc.next) {
                    detail::write_u32(out, t);
                    detail::write_u64(out, c);
                }
            }
        }
    }

    static CacheNGramModel load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw io_error("cannot open model file " + path.string());
        try {
            return read(in);
        } catch (const io_error& e) {
            throw io_error(path.string() + ": " + e.what());
        }
    }

    static CacheNGramModel read(std::istream& in) {
        char m[sizeof magic];
        if (!in.read(m, sizeof m) || std::memcmp(m, magic, sizeof magic) != 0) {
            throw io_error("not a cache n-gram model file");
        }
        const auto version = static_cast<std::uint32_t>(detail::read_uint(in, 4));
        if (version != format_version) {
            throw io_error("unsupported model format_version " + std::to_string(version));
        }
        CacheNGramModel model;
        model.params_.order = detail::read_uint(in, 4);
        model.vocab_ = detail::read_uint(in, 4);
        model.params_.add_k = std::bit_cast<double>(detail::read_uint(in, 8));
        model.params_.cache_lambda = std::bit_cast<double>(detail::read_uint(in, 8));
        model.params_.cache_decay = std::bit_cast<double>(detail::read_uint(in, 8));
        try {
            model.params_.validate();
            if (model.vocab_ == 0) throw config_error("zero vocabulary");
            check_key_width(model.vocab_, model.params_.order);
        } catch (const error& e) {
            throw io_error(std::string("corrupt model header: ") + e.what());
        }
        const auto id_len = detail::read_uint(in, 4);
        if (id_len > 4096) throw io_error("corrupt model header: tokenizer id too long");
        model.tokenizer_id_.resize(id_len);
        if (!in.read(model.tokenizer_id_.data(), static_cast<std::streamsize>(id_len))) {
            throw io_error("truncated model file");
        }
        model.unigram_total_ = detail::read_uint(in, 8);
        model.unigram_.resize(model.vocab_);
        for (auto& c : model.unigram_) c = detail::read_uint(in, 8);
        model.levels_.resize(model.params_.order - 1);
        for (auto& level : model.levels_) {
            const auto n = detail::read_uint(in, 8);
            for (std::uint64_t k = 0; k < n; ++k) {
                const auto key = detail::read_uint(in, 8);
                const auto n_next = detail::read_uint(in, 4);
                ContextCounts cc;
                cc.next.reserve(n_next);
                for (std::uint64_t e = 0; e < n_next; ++e) {
                    const auto t = static_cast<token_id>(detail::read_uint(in, 4));
                    const auto c = detail::read_uint(in, 8);
                    if (t >= model.vocab_) throw io_error("corrupt model body: token out of range");
                    cc.next.emplace_back(t, c);
                    cc.total += c;
                }
                level.emplace(key, std::move(cc));
            }
        }
        return model;
    }

  private:
    static constexpr char magic[8] = {'L', 'F', 'C', 'N', 'G', 'R', 'M', '\0'};

    struct ContextCounts {
        std::uint64_t total = 0;
        std::vector<std::pair<token_id, std::uint64_t>> next;  // sorted by token

        std::uint64_t count_of(token_id t) const {
            auto it = std::lower_bound(next.begin(), next.end(), t,
                                       [](const auto& e, token_id v) { return e.first < v; });
            return it != next.end() && it->first == t ? it->second : 0;
        }
    };

    CacheNGramModel() = default;

    static void check_key_width(std::size_t vocab, std::size_t order) {
        if (order > 1 && static_cast<double>(order - 1) * std::log2(static_cast<double>(vocab)) >= 63.0) {
            throw capability_error("vocab_size^(order-1) exceeds the 64-bit context key space");
        }
    }

    void check_tokens(std::span<const token_id> tokens) const {
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] >= vocab_) {
                throw argument_error("token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                                     " >= vocab_size " + std::to_string(vocab_));
            }
        }
    }

    std::uint64_t key(std::span<const token_id> tokens, std::size_t begin, std::size_t len) const {
        std::uint64_t k = 0;
        for (std::size_t i = 0; i < len; ++i) k = k * vocab_ + tokens[begin + i];
        return k;
    }

    const ContextCounts* find_context(std::span<const token_id> tokens, std::size_t begin, std::size_t len) const {
        const auto& level = levels_[len - 1];
        auto it = level.find(key(tokens, begin, len));
        return it == level.end() ? nullptr : &it->second;
    }

    double unigram_prob(token_id t) const {
        const double k = params_.add_k;
        return (static_cast<double>(unigram_[t]) + k) /
               (static_cast<double>(unigram_total_) + k * static_cast<double>(vocab_));
    }

    /// Mixture probability of t after the cache window [ws, next).
    double mixture(std::span<const token_id> tokens, const detail::RecencyCache& cache, token_id t) const {
        const std::size_t end = cache.added_upto();
        const std::size_t avail = end - cache.window_start();
        const std::size_t depth = std::min(params_.order - 1, avail);
        double p_ngram;
        if (depth == 0) {
            p_ngram = unigram_prob(t);
        } else {
            const double k = params_.add_k;
            const auto* cc = find_context(tokens, end - depth, depth);
            const double c_ht = cc ? static_cast<double>(cc->count_of(t)) : 0.0;
            const double c_h = cc ? static_cast<double>(cc->total) : 0.0;
            p_ngram = (c_ht + k) / (c_h + k * static_cast<double>(vocab_));
        }
        if (avail == 0 || params_.cache_lambda == 0.0) return p_ngram;
        const double lambda = params_.cache_lambda;
        return (1.0 - lambda) * p_ngram + lambda * cache.prob(tokens, t);
    }

    CacheNGramParams params_;
    std::size_t vocab_ = 0;
    std::string tokenizer_id_;
    std::vector<std::uint64_t> unigram_;
    std::uint64_t unigram_total_ = 0;
    std::vector<std::unordered_map<std::uint64_t, ContextCounts>> levels_;  // levels_[j-1]: contexts of length j
};

}  // namespace longfilter
