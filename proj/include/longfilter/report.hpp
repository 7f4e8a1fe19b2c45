#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "longfilter/error.hpp"
#include "longfilter/scorer.hpp"
#include "longfilter/tokenizer.hpp"
#include "longfilter/types.hpp"

namespace longfilter {

struct TokenRecord {
    std::size_t position = 0;
    std::string text;
    double lp_long = 0.0;
    double lp_short = 0.0;
    double gain = 0.0;
};

struct TokenReport {
    std::string seq_id;
    double score = 0.0;
    std::vector<TokenRecord> records;
    double q05 = 0.0;
    double q95 = 0.0;
};

/// Per-token scores of one sequence as stored next to the score file.
struct TokenSidecar {
    std::string seq_id;
    std::string config_digest;
    std::vector<std::size_t> positions;
    std::vector<token_id> tokens;
    std::vector<double> lp_long;
    std::vector<double> lp_short;
    std::vector<double> gain;
};

inline TokenSidecar make_sidecar(const PackedSequence& seq, const ScoredSequence& scored, std::string digest) {
    TokenSidecar s;
    s.seq_id = seq.seq_id;
    s.config_digest = std::move(digest);
    for (const auto& t : scored.tokens) {
        s.positions.push_back(t.position);
        s.tokens.push_back(seq.tokens[t.position]);
        s.lp_long.push_back(t.lp_long);
        s.lp_short.push_back(t.lp_short);
        s.gain.push_back(t.gain);
    }
    return s;
}

inline nlohmann::ordered_json to_json(const TokenSidecar& s) {
    nlohmann::ordered_json j;
    j["seq_id"] = s.seq_id;
    j["tool_version"] = version;
    j["config_digest"] = s.config_digest;
    j["positions"] = s.positions;
    j["tokens"] = s.tokens;
    j["lp_long"] = s.lp_long;
    j["lp_short"] = s.lp_short;
    j["gain"] = s.gain;
    return j;
}

inline TokenSidecar sidecar_from_json(const nlohmann::json& j) {
    TokenSidecar s;
    try {
        s.seq_id = j.at("seq_id").get<std::string>();
        s.config_digest = j.at("config_digest").get<std::string>();
        s.positions = j.at("positions").get<std::vector<std::size_t>>();
        s.tokens = j.at("tokens").get<std::vector<token_id>>();
        s.lp_long = j.at("lp_long").get<std::vector<double>>();
        s.lp_short = j.at("lp_short").get<std::vector<double>>();
        s.gain = j.at("gain").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("malformed token sidecar: ") + e.what());
    }
    const auto n = s.positions.size();
    if (s.tokens.size() != n || s.lp_long.size() != n || s.lp_short.size() != n || s.gain.size() != n) {
        throw io_error("malformed token sidecar for " + s.seq_id + ": array lengths differ");
    }
    return s;
}

/// Linear-interpolation quantile of an unsorted sample (q in [0, 1]).
inline double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw argument_error("quantile of an empty sample");
    std::sort(xs.begin(), xs.end());
    const double h = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (h - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

inline TokenReport make_report(const TokenSidecar& s, const Tokenizer& tokenizer) {
    if (s.gain.empty()) throw argument_error("sequence " + s.seq_id + " has no scored tokens");
    TokenReport r;
    r.seq_id = s.seq_id;
    r.records.reserve(s.gain.size());
    for (std::size_t i = 0; i < s.gain.size(); ++i) {
        r.records.push_back({s.positions[i], tokenizer.piece(s.tokens[i]), s.lp_long[i], s.lp_short[i], s.gain[i]});
    }
    r.score = compensated_sum(s.gain) / static_cast<double>(s.gain.size());
    r.q05 = quantile(s.gain, 0.05);
    r.q95 = quantile(s.gain, 0.95);
    return r;
}

/// Gain clipped to [q05, q95] and mapped linearly onto [0, 1]. A degenerate
/// scale maps everything to 0.
inline double intensity(const TokenReport& r, double gain) {
    if (!(r.q95 > r.q05)) return 0.0;
    return (std::clamp(gain, r.q05, r.q95) - r.q05) / (r.q95 - r.q05);
}

namespace detail {

inline std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

inline std::string html_escape(const std::string& s) {
    std::string out;
    for (unsigned char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            case '\n': out += "&#8629;<br>"; break;
            case '\t': out += "&#8677;"; break;
            default:
                if (c < 0x20 || c == 0x7f) {
                    char buf[16];
                    std::snprintf(buf, sizeof buf, "&#x2400;%02X", c);
                    out += buf;
                } else {
                    out += static_cast<char>(c);
                }
        }
    }
    return out;
}

}  // namespace detail

inline std::string report_to_jsonl(const TokenReport& r, const std::string& config_digest) {
    nlohmann::ordered_json header;
    header["record"] = "header";
    header["tool_version"] = version;
    header["config_digest"] = config_digest;
    header["seq_id"] = r.seq_id;
    header["score"] = r.score;
    header["n_scored"] = r.records.size();
    header["q05"] = r.q05;
    header["q95"] = r.q95;
    std::string out = header.dump() + "\n";
    for (const auto& t : r.records) {
        nlohmann::ordered_json j;
        j["record"] = "token";
        j["position"] = t.position;
        j["text"] = t.text;
        j["lp_long"] = t.lp_long;
        j["lp_short"] = t.lp_short;
        j["gain"] = t.gain;
        j["intensity"] = intensity(r, t.gain);
        out += j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
    }
    return out;
}

/// Standalone page rendering every token on a background whose darkness
/// follows its gain.
inline std::string report_to_html(const TokenReport& r, const std::string& config_digest) {
    std::string out;
    out += "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>";
    out += detail::html_escape(r.seq_id);
    out += "</title>\n<style>body{font-family:monospace;line-height:1.6;max-width:120ch;margin:2em auto}"
           "span.t{white-space:pre-wrap}</style></head><body>\n";
    out += "<h1>" + detail::html_escape(r.seq_id) + "</h1>\n";
    out += "<p>score " + detail::fmt("%.6g", r.score) + ", " + std::to_string(r.records.size()) +
           " tokens, color scale [" + detail::fmt("%.6g", r.q05) + ", " + detail::fmt("%.6g", r.q95) +
           "], digest " + detail::html_escape(config_digest) + ", longfilter " + version + "</p>\n<div>";
    for (const auto& t : r.records) {
        const double a = intensity(r, t.gain);
        // White at 0 to deep red at 1.
        const int g = static_cast<int>(std::lround(255.0 * (1.0 - 0.85 * a)));
        const int rch = static_cast<int>(std::lround(255.0 * (1.0 - 0.35 * a)));
        char style[96];
        std::snprintf(style, sizeof style, "background:rgb(%d,%d,%d)", rch, g, g);
        out += "<span class=\"t\" style=\"";
        out += style;
        out += "\" title=\"pos " + std::to_string(t.position) + " gain " + detail::fmt("%.4g", t.gain) + "\">";
        out += detail::html_escape(t.text);
        out += "</span>";
    }
    out += "</div>\n</body></html>\n";
    return out;
}

/// Gain against position as an SVG line chart; long sequences are averaged
/// into at most `max_points` buckets.
inline std::string report_to_svg(const TokenReport& r, std::size_t max_points = 2000) {
    const double width = 1000.0, height = 300.0, pad = 40.0;
    const std::size_t n = r.records.size();
    const std::size_t bucket = std::max<std::size_t>(1, (n + max_points - 1) / std::max<std::size_t>(1, max_points));
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < n; i += bucket) {
        const std::size_t e = std::min(n, i + bucket);
        double sum = 0.0, pos = 0.0;
        for (std::size_t k = i; k < e; ++k) {
            sum += r.records[k].gain;
            pos += static_cast<double>(r.records[k].position);
        }
        pts.emplace_back(pos / static_cast<double>(e - i), sum / static_cast<double>(e - i));
    }
    double lo = 0.0, hi = 0.0;
    for (const auto& [x, y] : pts) {
        lo = std::min(lo, y);
        hi = std::max(hi, y);
    }
    if (hi == lo) hi = lo + 1.0;
    const double x0 = pts.empty() ? 0.0 : pts.front().first;
    const double x1 = pts.empty() ? 1.0 : std::max(pts.back().first, x0 + 1.0);
    auto sx = [&](double x) { return pad + (x - x0) / (x1 - x0) * (width - 2 * pad); };
    auto sy = [&](double y) { return height - pad - (y - lo) / (hi - lo) * (height - 2 * pad); };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"1000\" height=\"300\" viewBox=\"0 0 1000 300\">\n";
    out += "<rect width=\"1000\" height=\"300\" fill=\"white\"/>\n";
    out += "<line x1=\"" + detail::fmt("%.2f", pad) + "\" y1=\"" + detail::fmt("%.2f", sy(0.0)) + "\" x2=\"" +
           detail::fmt("%.2f", width - pad) + "\" y2=\"" + detail::fmt("%.2f", sy(0.0)) +
           "\" stroke=\"#999\" stroke-width=\"1\"/>\n";
    out += "<polyline fill=\"none\" stroke=\"#b22\" stroke-width=\"1\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (i) out += ' ';
        out += detail::fmt("%.2f", sx(pts[i].first)) + "," + detail::fmt("%.2f", sy(pts[i].second));
    }
    out += "\"/>\n";
    out += "<text x=\"" + detail::fmt("%.0f", pad) + "\" y=\"20\" font-family=\"monospace\" font-size=\"12\">" +
           detail::html_escape(r.seq_id) + " gain by position (max " + detail::fmt("%.4g", hi) + ", min " +
           detail::fmt("%.4g", lo) + ")</text>\n";
    out += "</svg>\n";
    return out;
}

}  // namespace longfilter
