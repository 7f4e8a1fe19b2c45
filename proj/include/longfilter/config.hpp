#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "longfilter/cache_ngram.hpp"
#include "longfilter/corpus.hpp"
#include "longfilter/error.hpp"
#include "longfilter/scorer.hpp"
#include "longfilter/tokenizer.hpp"

namespace longfilter {

enum class BackendKind { builtin, remote };

struct BackendConfig {
    BackendKind kind = BackendKind::builtin;
    std::string endpoint;  // remote only
    std::size_t timeout_ms = 30000;
    std::size_t retries = 2;
};

struct CorpusConfig {
    std::vector<std::filesystem::path> paths;
    InputFormat format = InputFormat::jsonl;
    std::optional<std::filesystem::path> vocab_file;  // byte-level when absent
    std::string default_source = "default";
};

/// Everything a pipeline run depends on. Relative paths in a config file are
/// resolved against the file's directory.
struct PipelineConfig {
    static constexpr int schema_version = 1;

    CorpusConfig corpus;
    std::size_t pack_len = 65536;
    std::map<std::string, std::size_t> length_thresholds{{"arxiv", 16384}, {"book", 65536}, {"commoncrawl", 32768}};
    ScoringConfig scoring;
    CacheNGramParams model;
    std::filesystem::path model_file = "model.lfm";
    BackendConfig backend;
    double keep_fraction = 0.2;
    double long_fraction = 0.8;
    bool sidecars = false;
    std::filesystem::path out = "out";
    std::uint64_t seed = 0;
    std::size_t workers = 1;

    /// Threshold for a source tag; sources without an entry use pack_len.
    std::size_t threshold_for(const std::string& source) const {
        auto it = length_thresholds.find(source);
        return it == length_thresholds.end() ? pack_len : it->second;
    }

    Tokenizer tokenizer() const {
        return corpus.vocab_file ? Tokenizer::from_vocab_file(*corpus.vocab_file) : Tokenizer::byte_level();
    }

    void validate() const {
        if (pack_len < 2) throw config_error("pack_len must be >= 2");
        scoring.validate(pack_len);
        model.validate();
        if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw config_error("keep_fraction must lie in (0, 1]");
        if (!(long_fraction >= 0.0 && long_fraction <= 1.0)) throw config_error("long_fraction must lie in [0, 1]");
        if (workers < 1) throw config_error("workers must be >= 1");
        for (const auto& [source, t] : length_thresholds) {
            if (t < 1) throw config_error("length threshold for " + source + " must be >= 1");
        }
        if (backend.kind == BackendKind::remote && backend.endpoint.empty()) {
            throw config_error("remote backend needs an endpoint");
        }
        if (corpus.vocab_file && !std::filesystem::exists(*corpus.vocab_file)) {
            throw config_error("vocabulary file " + corpus.vocab_file->string() + " does not exist");
        }
    }

    /// Corpus inputs must exist for commands that read them.
    void validate_inputs() const {
        if (corpus.paths.empty()) throw config_error("corpus.paths is empty");
        for (const auto& p : corpus.paths) {
            if (!std::filesystem::exists(p)) throw config_error("corpus path " + p.string() + " does not exist");
        }
    }
};

namespace detail {

inline std::filesystem::path resolve_path(const std::string& p, const std::filesystem::path& base) {
    std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : (base / path).lexically_normal();
}

template <class T>
void read_field(const nlohmann::json& obj, const char* key, T& into, const std::string& where) {
    if (!obj.contains(key) || obj[key].is_null()) return;
    try {
        into = obj[key].get<T>();
    } catch (const nlohmann::json::exception&) {
        throw config_error(where + "." + key + " has the wrong type");
    }
}

inline void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> known,
                           const std::string& where) {
    for (const auto& [k, v] : obj.items()) {
        bool ok = false;
        for (const char* name : known) ok = ok || k == name;
        if (!ok) throw config_error("unknown config key " + where + "." + k);
    }
}

inline std::string hex64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace detail

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t file_fnv1a(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        h = fnv1a(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
    }
    return h;
}

inline PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    if (!j.is_object()) throw config_error("config must be a JSON object");
    const int schema = j.value("schema_version", 0);
    if (schema != PipelineConfig::schema_version) {
        throw config_error("unsupported config schema_version " + std::to_string(schema) + " (expected 1)");
    }
    detail::reject_unknown(j,
                           {"schema_version", "corpus", "pack_len", "length_thresholds", "scoring", "model",
                            "backend", "keep_fraction", "long_fraction", "sidecars", "out", "seed", "workers"},
                           "config");
    PipelineConfig c;
    if (j.contains("corpus")) {
        const auto& cj = j["corpus"];
        detail::reject_unknown(cj, {"paths", "format", "vocab_file", "default_source"}, "corpus");
        std::vector<std::string> paths;
        detail::read_field(cj, "paths", paths, "corpus");
        for (const auto& p : paths) c.corpus.paths.push_back(detail::resolve_path(p, base_dir));
        std::string fmt = to_string(c.corpus.format);
        detail::read_field(cj, "format", fmt, "corpus");
        c.corpus.format = parse_input_format(fmt);
        if (cj.contains("vocab_file") && !cj["vocab_file"].is_null()) {
            std::string v;
            detail::read_field(cj, "vocab_file", v, "corpus");
            c.corpus.vocab_file = detail::resolve_path(v, base_dir);
        }
        detail::read_field(cj, "default_source", c.corpus.default_source, "corpus");
    }
    detail::read_field(j, "pack_len", c.pack_len, "config");
    if (j.contains("length_thresholds")) {
        c.length_thresholds.clear();
        detail::read_field(j, "length_thresholds", c.length_thresholds, "config");
    }
    if (j.contains("scoring")) {
        const auto& sj = j["scoring"];
        detail::reject_unknown(sj, {"short_len", "long_len", "chunk_len", "overlap", "mask_doc_boundaries",
                                    "clip_negative"},
                               "scoring");
        detail::read_field(sj, "short_len", c.scoring.short_len, "scoring");
        detail::read_field(sj, "long_len", c.scoring.long_len, "scoring");
        if (sj.contains("chunk_len") && !sj["chunk_len"].is_null()) {
            std::size_t v = 0;
            detail::read_field(sj, "chunk_len", v, "scoring");
            c.scoring.chunk_len = v;
        }
        if (sj.contains("overlap") && !sj["overlap"].is_null()) {
            std::size_t v = 0;
            detail::read_field(sj, "overlap", v, "scoring");
            c.scoring.overlap = v;
        }
        detail::read_field(sj, "mask_doc_boundaries", c.scoring.mask_doc_boundaries, "scoring");
        detail::read_field(sj, "clip_negative", c.scoring.clip_negative, "scoring");
    }
    if (j.contains("model")) {
        const auto& mj = j["model"];
        detail::reject_unknown(mj, {"file", "order", "add_k", "cache_lambda", "cache_decay"}, "model");
        std::string file = c.model_file.string();
        detail::read_field(mj, "file", file, "model");
        c.model_file = detail::resolve_path(file, base_dir);
        detail::read_field(mj, "order", c.model.order, "model");
        detail::read_field(mj, "add_k", c.model.add_k, "model");
        detail::read_field(mj, "cache_lambda", c.model.cache_lambda, "model");
        detail::read_field(mj, "cache_decay", c.model.cache_decay, "model");
    } else {
        c.model_file = detail::resolve_path(c.model_file.string(), base_dir);
    }
    if (j.contains("backend")) {
        const auto& bj = j["backend"];
        detail::reject_unknown(bj, {"kind", "endpoint", "timeout_ms", "retries"}, "backend");
        std::string kind = "builtin";
        detail::read_field(bj, "kind", kind, "backend");
        if (kind == "builtin") {
            c.backend.kind = BackendKind::builtin;
        } else if (kind == "remote") {
            c.backend.kind = BackendKind::remote;
        } else {
            throw config_error("backend.kind must be \"builtin\" or \"remote\"");
        }
        detail::read_field(bj, "endpoint", c.backend.endpoint, "backend");
        detail::read_field(bj, "timeout_ms", c.backend.timeout_ms, "backend");
        detail::read_field(bj, "retries", c.backend.retries, "backend");
    }
    detail::read_field(j, "keep_fraction", c.keep_fraction, "config");
    detail::read_field(j, "long_fraction", c.long_fraction, "config");
    detail::read_field(j, "sidecars", c.sidecars, "config");
    std::string out = c.out.string();
    detail::read_field(j, "out", out, "config");
    c.out = detail::resolve_path(out, base_dir);
    detail::read_field(j, "seed", c.seed, "config");
    detail::read_field(j, "workers", c.workers, "config");
    return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw config_error("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j, std::filesystem::absolute(path).parent_path());
}

/// Fully resolved configuration, every field present.
inline nlohmann::ordered_json to_json(const PipelineConfig& c) {
    nlohmann::ordered_json j;
    j["schema_version"] = PipelineConfig::schema_version;
    nlohmann::ordered_json corpus;
    std::vector<std::string> paths;
    for (const auto& p : c.corpus.paths) paths.push_back(p.generic_string());
    corpus["paths"] = paths;
    corpus["format"] = to_string(c.corpus.format);
    corpus["vocab_file"] = c.corpus.vocab_file ? nlohmann::ordered_json(c.corpus.vocab_file->generic_string())
                                               : nlohmann::ordered_json(nullptr);
    corpus["default_source"] = c.corpus.default_source;
    j["corpus"] = corpus;
    j["pack_len"] = c.pack_len;
    nlohmann::ordered_json thresholds = nlohmann::ordered_json::object();
    for (const auto& [k, v] : c.length_thresholds) thresholds[k] = v;
    j["length_thresholds"] = thresholds;
    nlohmann::ordered_json scoring;
    scoring["short_len"] = c.scoring.short_len;
    scoring["long_len"] = c.scoring.long_len;
    scoring["chunk_len"] = c.scoring.chunk();
    scoring["overlap"] = c.scoring.overlap_len();
    scoring["mask_doc_boundaries"] = c.scoring.mask_doc_boundaries;
    scoring["clip_negative"] = c.scoring.clip_negative;
    j["scoring"] = scoring;
    nlohmann::ordered_json model;
    model["file"] = c.model_file.generic_string();
    model["order"] = c.model.order;
    model["add_k"] = c.model.add_k;
    model["cache_lambda"] = c.model.cache_lambda;
    model["cache_decay"] = c.model.cache_decay;
    j["model"] = model;
    nlohmann::ordered_json backend;
    backend["kind"] = c.backend.kind == BackendKind::builtin ? "builtin" : "remote";
    backend["endpoint"] = c.backend.endpoint;
    backend["timeout_ms"] = c.backend.timeout_ms;
    backend["retries"] = c.backend.retries;
    j["backend"] = backend;
    j["keep_fraction"] = c.keep_fraction;
    j["long_fraction"] = c.long_fraction;
    j["sidecars"] = c.sidecars;
    j["out"] = c.out.generic_string();
    j["seed"] = c.seed;
    j["workers"] = c.workers;
    return j;
}

/// Digest of the settings that determine scores and selections. Worker
/// count, output directory, sidecar emission and transport tuning are left
/// out; the built-in model enters through the bytes of its file.
inline std::string config_digest(const PipelineConfig& c) {
    auto j = to_json(c);
    j.erase("workers");
    j.erase("out");
    j.erase("sidecars");
    j["backend"].erase("timeout_ms");
    j["backend"].erase("retries");
    if (c.backend.kind == BackendKind::builtin) {
        j["backend"].erase("endpoint");
        j["model"]["file"] = std::filesystem::exists(c.model_file) ? detail::hex64(file_fnv1a(c.model_file))
                                                                    : std::string("missing");
    } else {
        j.erase("model");
    }
    return detail::hex64(fnv1a(j.dump()));
}

}  // namespace longfilter
