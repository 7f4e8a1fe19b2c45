#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "longfilter/error.hpp"
#include "longfilter/rng.hpp"
#include "longfilter/scorer.hpp"
#include "longfilter/types.hpp"

namespace longfilter {

struct RankedEntry {
    std::string seq_id;
    double score = 0.0;
    std::size_t rank = 0;  // 1-based
};

struct SelectionManifest {
    std::vector<RankedEntry> entries;
    double keep_fraction = 1.0;
    double threshold_score = 0.0;
    std::vector<std::string> selected;
    std::string config_digest;
};

struct ScheduleEntry {
    std::string source;  // "long" or "short"
    std::string id;

    bool operator==(const ScheduleEntry&) const = default;
};

struct MixtureRecipe {
    double long_fraction = 0.8;
    std::vector<std::string> long_pool;
    std::vector<std::string> short_pool;
    std::vector<ScheduleEntry> schedule;
};

/// ceil(fraction * n), forgiving the last-bit error of the product so that
/// e.g. 0.7 * 10 keeps 7 rather than 8.
inline std::size_t keep_count(double fraction, std::size_t n) {
    const double raw = fraction * static_cast<double>(n);
    return std::min(n, static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw))));
}

/// Sorts by score descending (ties: seq_id ascending) and keeps the first
/// ceil(keep_fraction * n) entries.
inline SelectionManifest rank_and_select(std::vector<SequenceScore> scores, double keep_fraction,
                                         std::string config_digest = {}) {
    if (scores.empty()) throw argument_error("cannot select from an empty score list");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw argument_error("keep_fraction must lie in (0, 1]");
    for (const auto& s : scores) {
        if (std::isnan(s.score)) throw argument_error("score of " + s.seq_id + " is NaN");
    }
    std::sort(scores.begin(), scores.end(), [](const SequenceScore& a, const SequenceScore& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.seq_id < b.seq_id;
    });
    SelectionManifest m;
    m.keep_fraction = keep_fraction;
    m.config_digest = std::move(config_digest);
    m.entries.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        m.entries.push_back(RankedEntry{scores[i].seq_id, scores[i].score, i + 1});
    }
    const std::size_t k = std::max<std::size_t>(1, keep_count(keep_fraction, scores.size()));
    for (std::size_t i = 0; i < k; ++i) m.selected.push_back(m.entries[i].seq_id);
    m.threshold_score = m.entries[k - 1].score;
    return m;
}

/// Interleaves the selected long sequences with short documents so that the
/// long share of the schedule is within 1/|schedule| of long_fraction. The
/// schedule is the largest one the two pools can fill; its order and the
/// short documents drawn are fixed by `seed`.
inline MixtureRecipe compose_mixture(const SelectionManifest& selection, const std::vector<std::string>& short_pool,
                                     double long_fraction, std::uint64_t seed) {
    if (!(long_fraction >= 0.0 && long_fraction <= 1.0)) throw argument_error("long_fraction must lie in [0, 1]");
    const std::size_t n_long_avail = selection.selected.size();
    const std::size_t n_short_avail = short_pool.size();
    if (long_fraction > 0.0 && n_long_avail == 0) throw argument_error("long pool is empty");
    if (long_fraction < 1.0 && n_short_avail == 0) {
        throw argument_error("short pool is empty but long_fraction < 1 requires short documents");
    }

    std::size_t n_long = 0;
    std::size_t n_short = 0;
    for (std::size_t total = n_long_avail + n_short_avail; total > 0; --total) {
        const auto nl = static_cast<std::size_t>(std::floor(long_fraction * static_cast<double>(total) + 0.5));
        if (nl <= n_long_avail && total - nl <= n_short_avail) {
            n_long = nl;
            n_short = total - nl;
            break;
        }
    }

    MixtureRecipe recipe;
    recipe.long_fraction = long_fraction;
    recipe.long_pool = selection.selected;
    recipe.short_pool = short_pool;

    portable_rng short_rng(derive_seed(seed, 0));
    std::vector<std::string> shorts = short_pool;
    short_rng.shuffle(shorts);

    for (std::size_t i = 0; i < n_long; ++i) recipe.schedule.push_back({"long", selection.selected[i]});
    for (std::size_t i = 0; i < n_short; ++i) recipe.schedule.push_back({"short", shorts[i]});
    portable_rng order_rng(derive_seed(seed, 1));
    order_rng.shuffle(recipe.schedule);
    return recipe;
}

inline std::vector<std::string> selected_ids(const std::vector<SequenceScore>& scores, double fraction) {
    return rank_and_select(scores, fraction).selected;
}

/// True when the selection at f1 is contained in the selection at f2.
inline bool selection_monotonicity_check(const std::vector<SequenceScore>& scores, double f1, double f2) {
    const auto a = selected_ids(scores, f1);
    const auto b = selected_ids(scores, f2);
    const std::set<std::string> larger(b.begin(), b.end());
    return std::all_of(a.begin(), a.end(), [&](const std::string& id) { return larger.count(id) != 0; });
}

/// Line-delimited manifest: one header record, then one record per ranked entry.
inline std::string manifest_to_jsonl(const SelectionManifest& m) {
    nlohmann::ordered_json header;
    header["record"] = "header";
    header["tool_version"] = version;
    header["config_digest"] = m.config_digest;
    header["keep_fraction"] = m.keep_fraction;
    header["threshold_score"] = m.threshold_score;
    header["n_entries"] = m.entries.size();
    header["n_selected"] = m.selected.size();
    std::string out = header.dump() + "\n";
    for (const auto& e : m.entries) {
        nlohmann::ordered_json rec;
        rec["record"] = "entry";
        rec["rank"] = e.rank;
        rec["seq_id"] = e.seq_id;
        rec["score"] = e.score;
        rec["selected"] = e.rank <= m.selected.size();
        out += rec.dump() + "\n";
    }
    return out;
}

inline std::string mixture_to_jsonl(const MixtureRecipe& r, const std::string& config_digest) {
    nlohmann::ordered_json header;
    header["record"] = "header";
    header["tool_version"] = version;
    header["config_digest"] = config_digest;
    header["long_fraction"] = r.long_fraction;
    header["n_long_pool"] = r.long_pool.size();
    header["n_short_pool"] = r.short_pool.size();
    header["n_schedule"] = r.schedule.size();
    std::string out = header.dump() + "\n";
    for (std::size_t i = 0; i < r.schedule.size(); ++i) {
        nlohmann::ordered_json rec;
        rec["record"] = "schedule";
        rec["index"] = i;
        rec["source"] = r.schedule[i].source;
        rec["id"] = r.schedule[i].id;
        out += rec.dump() + "\n";
    }
    return out;
}

}  // namespace longfilter
