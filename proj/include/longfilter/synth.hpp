#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "longfilter/corpus.hpp"
#include "longfilter/error.hpp"
#include "longfilter/rng.hpp"
#include "longfilter/types.hpp"

namespace longfilter::synth {

/// Symbols used by every generator; symbol k is the byte alphabet_chars[k].
inline constexpr std::string_view alphabet_chars =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

enum class Kind { markov, recall, repeat };

inline const char* to_string(Kind k) {
    switch (k) {
        case Kind::markov: return "markov";
        case Kind::recall: return "recall";
        case Kind::repeat: return "repeat";
    }
    return "?";
}

inline Kind parse_kind(const std::string& s) {
    if (s == "markov") return Kind::markov;
    if (s == "recall") return Kind::recall;
    if (s == "repeat") return Kind::repeat;
    throw argument_error("unknown synthetic kind \"" + s + "\" (expected markov, recall or repeat)");
}

struct MarkovParams {
    std::size_t order = 2;
    std::size_t alphabet = 16;
    std::size_t branching = 4;  // successors with non-zero probability per context
    std::uint64_t transition_seed = 1;
};

/// Key-value recall: every key is defined once early on and queried
/// verbatim (key followed by its value) at least min_query_distance tokens
/// after its definition ends. Filler, keys and values share one uniform
/// distribution over `alphabet` symbols, i.e. log2(alphabet) bits of entropy.
struct RecallParams {
    std::size_t n_keys = 24;
    std::size_t key_len = 6;
    std::size_t value_len = 16;
    std::size_t alphabet = 64;
    std::size_t queries_per_key = 3;
    std::size_t min_query_distance = 1024;
    std::size_t short_len = 512;  // the short context the queries must escape

    double filler_entropy_bits() const { return std::log2(static_cast<double>(alphabet)); }
};

struct RepeatParams {
    std::size_t period = 64;
    std::size_t alphabet = 64;
    std::size_t chunk_len = 512;  // period must stay below the chunk length
};

struct SynthSpec {
    Kind kind = Kind::markov;
    std::size_t length = 8192;
    MarkovParams markov;
    RecallParams recall;
    RepeatParams repeat;

    void validate() const {
        if (length < 2) throw argument_error("synthetic documents need length >= 2");
        switch (kind) {
            case Kind::markov: {
                const auto& m = markov;
                if (m.order < 1) throw argument_error("markov order must be >= 1");
                if (m.alphabet < 2 || m.alphabet > alphabet_chars.size()) {
                    throw argument_error("markov alphabet must lie in [2, 64]");
                }
                if (m.branching < 1 || m.branching > m.alphabet) {
                    throw argument_error("markov branching must lie in [1, alphabet]");
                }
                if (std::pow(static_cast<double>(m.alphabet), static_cast<double>(m.order + 1)) > (1u << 22)) {
                    throw argument_error("markov transition table too large");
                }
                break;
            }
            case Kind::recall: {
                const auto& r = recall;
                if (r.n_keys < 1 || r.key_len < 1 || r.value_len < 1 || r.queries_per_key < 1) {
                    throw argument_error("recall spec needs at least one key, query and token per field");
                }
                if (r.alphabet < 2 || r.alphabet > alphabet_chars.size()) {
                    throw argument_error("recall alphabet must lie in [2, 64]");
                }
                if (r.min_query_distance <= r.short_len) {
                    throw argument_error("recall query distance must exceed the short context length");
                }
                break;
            }
            case Kind::repeat:
                if (repeat.period < 1) throw argument_error("repeat period must be >= 1");
                if (repeat.period >= repeat.chunk_len) throw argument_error("repeat period must be below chunk_len");
                if (repeat.alphabet < 1 || repeat.alphabet > alphabet_chars.size()) {
                    throw argument_error("repeat alphabet must lie in [1, 64]");
                }
                break;
        }
    }

    nlohmann::ordered_json params_json() const {
        nlohmann::ordered_json j;
        j["kind"] = to_string(kind);
        j["length"] = length;
        switch (kind) {
            case Kind::markov:
                j["order"] = markov.order;
                j["alphabet"] = markov.alphabet;
                j["branching"] = markov.branching;
                j["transition_seed"] = markov.transition_seed;
                break;
            case Kind::recall:
                j["n_keys"] = recall.n_keys;
                j["key_len"] = recall.key_len;
                j["value_len"] = recall.value_len;
                j["alphabet"] = recall.alphabet;
                j["queries_per_key"] = recall.queries_per_key;
                j["min_query_distance"] = recall.min_query_distance;
                j["short_len"] = recall.short_len;
                break;
            case Kind::repeat:
                j["period"] = repeat.period;
                j["alphabet"] = repeat.alphabet;
                j["chunk_len"] = repeat.chunk_len;
                break;
        }
        return j;
    }
};

/// Where a key was defined and queried inside a recall document.
struct RecallSite {
    std::size_t key = 0;
    std::size_t position = 0;
    bool is_query = false;
};

struct SynthDoc {
    Document doc;
    std::vector<RecallSite> sites;  // recall documents only, sorted by position
};

/// Order-k transition table with `branching` random successors per context.
class MarkovTable {
  public:
    explicit MarkovTable(const MarkovParams& p) : params_(p) {
        std::size_t n_ctx = 1;
        for (std::size_t i = 0; i < p.order; ++i) n_ctx *= p.alphabet;
        probs_.assign(n_ctx * p.alphabet, 0.0);
        portable_rng rng(p.transition_seed);
        std::vector<std::size_t> symbols(p.alphabet);
        for (std::size_t c = 0; c < n_ctx; ++c) {
            for (std::size_t s = 0; s < p.alphabet; ++s) symbols[s] = s;
            double sum = 0.0;
            for (std::size_t b = 0; b < p.branching; ++b) {
                const auto j = b + static_cast<std::size_t>(rng.below(p.alphabet - b));
                std::swap(symbols[b], symbols[j]);
                const double w = 0.05 + rng.uniform();
                probs_[c * p.alphabet + symbols[b]] = w;
                sum += w;
            }
            for (std::size_t s = 0; s < p.alphabet; ++s) probs_[c * p.alphabet + s] /= sum;
        }
    }

    const MarkovParams& params() const noexcept { return params_; }

    /// p(next | ctx) where ctx holds exactly `order` symbols, oldest first.
    double prob(std::span<const std::size_t> ctx, std::size_t next) const {
        return probs_[index(ctx) * params_.alphabet + next];
    }

    std::size_t sample(std::span<const std::size_t> ctx, portable_rng& rng) const {
        const double u = rng.uniform();
        const std::size_t row = index(ctx) * params_.alphabet;
        double acc = 0.0;
        std::size_t last = 0;
        for (std::size_t s = 0; s < params_.alphabet; ++s) {
            const double p = probs_[row + s];
            if (p == 0.0) continue;
            acc += p;
            last = s;
            if (u < acc) return s;
        }
        return last;
    }

  private:
    std::size_t index(std::span<const std::size_t> ctx) const {
        std::size_t k = 0;
        for (auto s : ctx) k = k * params_.alphabet + s;
        return k;
    }

    MarkovParams params_;
    std::vector<double> probs_;
};

namespace detail {

inline std::string symbols_to_text(const std::vector<std::size_t>& symbols) {
    std::string out(symbols.size(), '\0');
    for (std::size_t i = 0; i < symbols.size(); ++i) out[i] = alphabet_chars[symbols[i]];
    return out;
}

inline std::vector<std::size_t> generate_markov(const SynthSpec& spec, const MarkovTable& table, portable_rng& rng) {
    const auto& m = spec.markov;
    std::vector<std::size_t> out;
    out.reserve(spec.length);
    for (std::size_t i = 0; i < spec.length; ++i) {
        if (i < m.order) {
            out.push_back(static_cast<std::size_t>(rng.below(m.alphabet)));
        } else {
            out.push_back(table.sample(std::span<const std::size_t>(out).subspan(i - m.order, m.order), rng));
        }
    }
    return out;
}

inline std::vector<std::size_t> generate_recall(const SynthSpec& spec, portable_rng& rng,
                                                std::vector<RecallSite>& sites) {
    const auto& r = spec.recall;
    const std::size_t site_len = r.key_len + r.value_len;
    const std::size_t gap = 8;

    std::vector<std::vector<std::size_t>> keys;
    while (keys.size() < r.n_keys) {
        std::vector<std::size_t> k(r.key_len);
        for (auto& s : k) s = static_cast<std::size_t>(rng.below(r.alphabet));
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(std::move(k));
        if (keys.size() < r.n_keys && std::pow(static_cast<double>(r.alphabet), static_cast<double>(r.key_len)) <=
                                          static_cast<double>(keys.size())) {
            throw argument_error("recall alphabet and key_len cannot produce enough distinct keys");
        }
    }
    std::vector<std::vector<std::size_t>> values(r.n_keys, std::vector<std::size_t>(r.value_len));
    for (auto& v : values) {
        for (auto& s : v) s = static_cast<std::size_t>(rng.below(r.alphabet));
    }

    // Definitions back to back near the start, separated by short filler gaps.
    std::size_t cursor = 0;
    for (std::size_t k = 0; k < r.n_keys; ++k) {
        cursor += 1 + static_cast<std::size_t>(rng.below(gap));
        sites.push_back(RecallSite{k, cursor, false});
        cursor += site_len;
    }
    const std::size_t query_region = cursor + r.min_query_distance;
    const std::size_t slot_len = site_len + gap;
    const std::size_t n_queries = r.n_keys * r.queries_per_key;
    if (query_region >= spec.length || (spec.length - query_region) / slot_len < n_queries) {
        throw argument_error("recall document of length " + std::to_string(spec.length) +
                             " cannot hold the requested definitions and queries");
    }
    const std::size_t n_slots = (spec.length - query_region) / slot_len;
    std::vector<std::size_t> slots(n_slots);
    for (std::size_t i = 0; i < n_slots; ++i) slots[i] = i;
    for (std::size_t i = 0; i < n_queries; ++i) {
        std::swap(slots[i], slots[i + static_cast<std::size_t>(rng.below(n_slots - i))]);
    }
    slots.resize(n_queries);
    std::sort(slots.begin(), slots.end());
    std::vector<std::size_t> query_keys;
    for (std::size_t k = 0; k < r.n_keys; ++k) {
        for (std::size_t q = 0; q < r.queries_per_key; ++q) query_keys.push_back(k);
    }
    rng.shuffle(query_keys);
    for (std::size_t i = 0; i < n_queries; ++i) {
        const std::size_t pos = query_region + slots[i] * slot_len + static_cast<std::size_t>(rng.below(gap + 1));
        sites.push_back(RecallSite{query_keys[i], pos, true});
    }

    std::vector<std::size_t> out(spec.length);
    std::vector<bool> filler(spec.length, true);
    for (auto& s : out) s = static_cast<std::size_t>(rng.below(r.alphabet));
    for (const auto& site : sites) {
        std::copy(keys[site.key].begin(), keys[site.key].end(), out.begin() + static_cast<std::ptrdiff_t>(site.position));
        std::copy(values[site.key].begin(), values[site.key].end(),
                  out.begin() + static_cast<std::ptrdiff_t>(site.position + r.key_len));
        std::fill_n(filler.begin() + static_cast<std::ptrdiff_t>(site.position), site_len, false);
    }

    // Resample filler until no key occurs anywhere but at its sites.
    std::vector<bool> site_start(spec.length, false);
    for (const auto& site : sites) site_start[site.position] = true;
    for (bool clean = false; !clean;) {
        clean = true;
        for (std::size_t p = 0; p + r.key_len <= spec.length; ++p) {
            if (site_start[p]) continue;
            for (const auto& key : keys) {
                if (!std::equal(key.begin(), key.end(), out.begin() + static_cast<std::ptrdiff_t>(p))) continue;
                bool touched = false;
                for (std::size_t q = p; q < p + r.key_len; ++q) {
                    if (!filler[q]) continue;
                    out[q] = static_cast<std::size_t>(rng.below(r.alphabet));
                    touched = true;
                }
                // An occurrence made only of site tokens cannot be repaired; leave it.
                if (touched) clean = false;
            }
        }
    }
    std::sort(sites.begin(), sites.end(),
              [](const RecallSite& a, const RecallSite& b) { return a.position < b.position; });
    return out;
}

inline std::vector<std::size_t> generate_repeat(const SynthSpec& spec, portable_rng& rng) {
    const auto& r = spec.repeat;
    std::vector<std::size_t> motif(r.period);
    for (auto& s : motif) s = static_cast<std::size_t>(rng.below(r.alphabet));
    std::vector<std::size_t> out(spec.length);
    for (std::size_t i = 0; i < spec.length; ++i) out[i] = motif[i % r.period];
    return out;
}

inline std::string positions_json(const std::vector<RecallSite>& sites, bool queries) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : sites) {
        if (s.is_query == queries) arr.push_back({s.key, s.position});
    }
    return arr.dump();
}

}  // namespace detail

/// Deterministic in (spec, seed): document i draws from the stream
/// derive_seed(seed, i).
inline std::vector<SynthDoc> generate_detailed(const SynthSpec& spec, std::uint64_t seed, std::size_t count) {
    spec.validate();
    std::vector<SynthDoc> out;
    out.reserve(count);
    std::optional<MarkovTable> table;
    if (spec.kind == Kind::markov) table.emplace(spec.markov);
    const std::string params = spec.params_json().dump();
    for (std::size_t i = 0; i < count; ++i) {
        portable_rng rng(derive_seed(seed, i));
        SynthDoc sd;
        std::vector<std::size_t> symbols;
        switch (spec.kind) {
            case Kind::markov: symbols = detail::generate_markov(spec, *table, rng); break;
            case Kind::recall: symbols = detail::generate_recall(spec, rng, sd.sites); break;
            case Kind::repeat: symbols = detail::generate_repeat(spec, rng); break;
        }
        sd.doc.doc_id = std::string(to_string(spec.kind)) + "-" + std::to_string(seed) + "-" + std::to_string(i);
        sd.doc.text = detail::symbols_to_text(symbols);
        sd.doc.source = std::string("synth-") + to_string(spec.kind);
        sd.doc.meta["kind"] = to_string(spec.kind);
        sd.doc.meta["seed"] = std::to_string(seed);
        sd.doc.meta["index"] = std::to_string(i);
        sd.doc.meta["params"] = params;
        if (spec.kind == Kind::recall) {
            sd.doc.meta["definitions"] = detail::positions_json(sd.sites, false);
            sd.doc.meta["queries"] = detail::positions_json(sd.sites, true);
        }
        out.push_back(std::move(sd));
    }
    return out;
}

inline std::vector<Document> generate(const SynthSpec& spec, std::uint64_t seed, std::size_t count) {
    std::vector<Document> docs;
    for (auto& sd : generate_detailed(spec, seed, count)) docs.push_back(std::move(sd.doc));
    return docs;
}

/// One structured corpus record per document.
inline std::string to_jsonl_record(const Document& doc) {
    nlohmann::ordered_json j;
    j["doc_id"] = doc.doc_id;
    j["source"] = doc.source;
    j["text"] = doc.text;
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : doc.meta) meta[k] = v;
    j["meta"] = std::move(meta);
    return j.dump();
}

/// Exact sampling distribution of a Markov generator, as a byte-level
/// log-probability provider. Each position conditions on at most the last
/// `order` tokens it is given; positions with a shorter context see the
/// uniform start distribution.
class MarkovSourceProvider {
  public:
    explicit MarkovSourceProvider(const SynthSpec& spec) : table_(checked(spec).markov) {
        symbol_of_.fill(-1);
        for (std::size_t s = 0; s < spec.markov.alphabet; ++s) {
            symbol_of_[static_cast<unsigned char>(alphabet_chars[s])] = static_cast<int>(s);
        }
    }

    std::size_t vocab_size() const noexcept { return 256; }

    std::vector<double> logprobs(std::span<const token_id> tokens, std::size_t eval_start,
                                 std::size_t eval_end) const {
        if (!(eval_start >= 1 && eval_start < eval_end && eval_end <= tokens.size())) {
            throw argument_error("invalid evaluation range");
        }
        std::vector<double> out;
        out.reserve(eval_end - eval_start);
        for (std::size_t i = eval_start; i < eval_end; ++i) {
            const double p = prob_at(tokens, i, tokens[i]);
            if (p == 0.0) throw argument_error("transition at position " + std::to_string(i) + " is impossible");
            out.push_back(std::log(p));
        }
        return out;
    }

    double unconditional_logprob(token_id t) const {
        return std::log(symbol(t) >= 0 ? 1.0 / static_cast<double>(table_.params().alphabet) : 0.0);
    }

    DistTable full_next_distribution(std::span<const token_id> prefix) const {
        DistTable d;
        d.probs.assign(256, 0.0);
        std::vector<token_id> buf(prefix.begin(), prefix.end());
        buf.push_back(0);
        for (std::size_t s = 0; s < table_.params().alphabet; ++s) {
            const auto t = static_cast<token_id>(static_cast<unsigned char>(alphabet_chars[s]));
            d.probs[t] = prob_at(buf, prefix.size(), t);
        }
        return d;
    }

  private:
    static const SynthSpec& checked(const SynthSpec& spec) {
        if (spec.kind != Kind::markov) throw argument_error("true source provider needs a markov spec");
        spec.validate();
        return spec;
    }

    int symbol(token_id t) const { return t < 256 ? symbol_of_[t] : -1; }

    double prob_at(std::span<const token_id> tokens, std::size_t i, token_id next) const {
        const int sym = symbol(next);
        if (sym < 0) throw argument_error("token " + std::to_string(next) + " cannot occur under this source");
        const auto& p = table_.params();
        if (i < p.order) return 1.0 / static_cast<double>(p.alphabet);
        std::size_t ctx[64];
        for (std::size_t k = 0; k < p.order; ++k) {
            const int s = symbol(tokens[i - p.order + k]);
            if (s < 0) throw argument_error("context token cannot occur under this source");
            ctx[k] = static_cast<std::size_t>(s);
        }
        return table_.prob(std::span<const std::size_t>(ctx, p.order), static_cast<std::size_t>(sym));
    }

    MarkovTable table_;
    std::array<int, 256> symbol_of_{};
};

inline MarkovSourceProvider true_markov_provider(const SynthSpec& spec) { return MarkovSourceProvider(spec); }

}  // namespace longfilter::synth
