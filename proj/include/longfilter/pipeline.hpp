#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "longfilter/cache_ngram.hpp"
#include "longfilter/config.hpp"
#include "longfilter/corpus.hpp"
#include "longfilter/parallel.hpp"
#include "longfilter/remote.hpp"
#include "longfilter/report.hpp"
#include "longfilter/scorer.hpp"
#include "longfilter/selector.hpp"
#include "longfilter/synth.hpp"

namespace longfilter {

/// Fixed file names inside the output directory.
namespace layout {
inline constexpr const char* resolved_config = "config.resolved.json";
inline constexpr const char* packed = "packed.jsonl";
inline constexpr const char* short_pool = "short_pool.jsonl";
inline constexpr const char* scores = "scores.jsonl";
inline constexpr const char* journal = "scores.partial.jsonl";
inline constexpr const char* selection = "selection.jsonl";
inline constexpr const char* mixture = "mixture.jsonl";
inline constexpr const char* sidecars = "sidecars";
inline constexpr const char* report = "report";
}  // namespace layout

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot write " + tmp.string());
        out << content;
        out.flush();
        if (!out) throw io_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot read " + path.string());
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) lines.push_back(std::move(line));
    }
    return lines;
}

struct PreparedCorpus {
    std::vector<TokenizedDoc> docs;
    std::vector<PackedSequence> sequences;
    std::vector<std::string> short_pool;
    std::size_t skipped_records = 0;
};

/// Reads every configured input in order. Duplicate doc_ids across inputs are
/// skipped like malformed records.
inline std::vector<TokenizedDoc> load_corpus(const PipelineConfig& cfg, std::ostream& log, std::size_t& skipped) {
    cfg.validate_inputs();
    const auto tokenizer = cfg.tokenizer();
    std::vector<Document> docs;
    std::set<std::string> seen;
    for (const auto& path : cfg.corpus.paths) {
        auto result = ingest(path, IngestOptions{cfg.corpus.format, cfg.corpus.default_source});
        skipped += result.skipped;
        for (const auto& e : result.errors) log << "warning: " << e << "\n";
        for (auto& d : result.docs) {
            if (!seen.insert(d.doc_id).second) {
                ++skipped;
                log << "warning: duplicate doc_id " << d.doc_id << " in " << path.string() << " skipped\n";
                continue;
            }
            docs.push_back(std::move(d));
        }
    }
    if (docs.empty()) throw config_error("the configured corpus contains no documents");
    return tokenize_all(docs, tokenizer, cfg.workers);
}

/// Splits documents by their source's length threshold and packs the long ones.
inline PreparedCorpus prepare_corpus(const PipelineConfig& cfg, std::ostream& log) {
    PreparedCorpus pc;
    pc.docs = load_corpus(cfg, log, pc.skipped_records);
    std::vector<TokenizedDoc> long_docs;
    for (const auto& d : pc.docs) {
        if (d.tokens.size() >= cfg.threshold_for(d.source)) {
            long_docs.push_back(d);
        } else {
            pc.short_pool.push_back(d.doc_id);
        }
    }
    pc.sequences = pack(long_docs, cfg.pack_len);
    return pc;
}

/// Provider selected by the backend section of a config.
using Backend = std::variant<CacheNGramModel, RemoteClient>;

inline Backend open_backend(const PipelineConfig& cfg, const Tokenizer& tokenizer) {
    if (cfg.backend.kind == BackendKind::builtin) {
        if (!std::filesystem::exists(cfg.model_file)) {
            throw config_error("model file " + cfg.model_file.string() + " not found; run `longfilter fit` first");
        }
        auto model = CacheNGramModel::load(cfg.model_file);
        if (model.tokenizer_id() != tokenizer.id() || model.vocab_size() < tokenizer.vocab_size()) {
            throw config_error("model " + cfg.model_file.string() + " was fitted with tokenizer " +
                               model.tokenizer_id() + " but the corpus uses " + tokenizer.id());
        }
        return model;
    }
    RemoteOptions opts;
    opts.timeout = std::chrono::milliseconds(cfg.backend.timeout_ms);
    opts.retries = cfg.backend.retries;
    RemoteClient client(cfg.backend.endpoint, opts);
    const auto info = client.info();
    if (info.tokenizer_id != tokenizer.id() || info.vocab_size < tokenizer.vocab_size()) {
        throw config_error("remote backend " + cfg.backend.endpoint + " uses tokenizer " + info.tokenizer_id +
                           " but the corpus uses " + tokenizer.id());
    }
    if (info.max_context < cfg.scoring.long_len + 1) {
        throw config_error("remote backend max_context " + std::to_string(info.max_context) +
                           " is too small for long_len " + std::to_string(cfg.scoring.long_len));
    }
    return client;
}

inline nlohmann::ordered_json score_record(const SequenceScore& s, const std::string& digest) {
    nlohmann::ordered_json j;
    j["seq_id"] = s.seq_id;
    j["score"] = s.score;
    j["n_scored"] = s.n_scored;
    j["config_digest"] = digest;
    j["tool_version"] = version;
    return j;
}

inline SequenceScore score_from_record(const nlohmann::json& j) {
    return SequenceScore{j.at("seq_id").get<std::string>(), j.at("score").get<double>(),
                         j.at("n_scored").get<std::size_t>()};
}

namespace detail {

/// Reads score records, refusing any produced under a different digest. A
/// torn final journal line is ignored.
inline void read_score_records(const std::filesystem::path& path, const std::string& digest, bool tolerate_tail,
                               std::map<std::string, std::string>& into) {
    if (!std::filesystem::exists(path)) return;
    const auto lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(lines[i]);
            (void)score_from_record(j);
        } catch (const nlohmann::json::exception&) {
            if (tolerate_tail && i + 1 == lines.size()) break;
            throw io_error(path.string() + ":" + std::to_string(i + 1) + ": malformed score record");
        }
        const auto found = j.value("config_digest", std::string());
        if (found != digest) {
            throw config_error(path.string() + " was produced under config digest " + found +
                               ", but the current configuration has digest " + digest +
                               "; refusing to mix results. Use a fresh --out directory or restore the "
                               "original configuration.");
        }
        into[j.at("seq_id").get<std::string>()] = lines[i];
    }
}

inline std::string sidecar_name(const std::string& seq_id) { return seq_id + ".json"; }

}  // namespace detail

inline int cmd_fit(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    std::size_t skipped = 0;
    const auto docs = load_corpus(cfg, log, skipped);
    const auto tokenizer = cfg.tokenizer();

    struct Stats {
        std::size_t docs = 0, tokens = 0, long_docs = 0, long_tokens = 0;
    };
    std::map<std::string, Stats> by_source;
    for (const auto& d : docs) {
        auto& s = by_source[d.source];
        ++s.docs;
        s.tokens += d.tokens.size();
        if (d.tokens.size() >= cfg.threshold_for(d.source)) {
            ++s.long_docs;
            s.long_tokens += d.tokens.size();
        }
    }
    log << "source\tdocs\ttokens\tlong_docs\tlong_tokens\tthreshold\n";
    for (const auto& [source, s] : by_source) {
        log << source << "\t" << s.docs << "\t" << s.tokens << "\t" << s.long_docs << "\t" << s.long_tokens << "\t"
            << cfg.threshold_for(source) << "\n";
    }

    const auto model = CacheNGramModel::fit(docs, tokenizer.vocab_size(), cfg.model, tokenizer.id());
    std::ostringstream buf;
    model.write(buf);
    write_file_atomic(cfg.model_file, buf.str());
    log << "wrote model " << cfg.model_file.string() << " (order " << cfg.model.order << ", vocab "
        << model.vocab_size() << ", format_version " << CacheNGramModel::format_version << ")\n";
    if (skipped) log << "error: " << skipped << " input records were skipped\n";
    return skipped ? 1 : 0;
}

struct ScoreSummary {
    std::size_t total = 0;
    std::size_t resumed = 0;
    std::size_t scored = 0;
    std::size_t failed = 0;
    std::size_t skipped_records = 0;
};

inline ScoreSummary run_score(const PipelineConfig& cfg, std::ostream& log) {
    namespace fs = std::filesystem;
    cfg.validate();
    const std::string digest = config_digest(cfg);
    const auto tokenizer = cfg.tokenizer();
    const auto backend = open_backend(cfg, tokenizer);
    auto pc = prepare_corpus(cfg, log);

    fs::create_directories(cfg.out);
    {
        auto resolved = to_json(cfg);
        resolved["config_digest"] = digest;
        resolved["tool_version"] = version;
        write_file_atomic(cfg.out / layout::resolved_config, resolved.dump(2) + "\n");
    }
    {
        std::string packed;
        for (const auto& s : pc.sequences) packed += to_json(s).dump() + "\n";
        write_file_atomic(cfg.out / layout::packed, packed);
        const std::map<std::string, const TokenizedDoc*> by_id = [&] {
            std::map<std::string, const TokenizedDoc*> m;
            for (const auto& d : pc.docs) m[d.doc_id] = &d;
            return m;
        }();
        std::string pool;
        for (const auto& id : pc.short_pool) {
            nlohmann::ordered_json j;
            j["doc_id"] = id;
            j["source"] = by_id.at(id)->source;
            j["n_tokens"] = by_id.at(id)->tokens.size();
            j["config_digest"] = digest;
            pool += j.dump() + "\n";
        }
        write_file_atomic(cfg.out / layout::short_pool, pool);
    }

    std::map<std::string, std::string> done;
    detail::read_score_records(cfg.out / layout::scores, digest, false, done);
    detail::read_score_records(cfg.out / layout::journal, digest, true, done);

    const fs::path sidecar_dir = cfg.out / layout::sidecars;
    if (cfg.sidecars) fs::create_directories(sidecar_dir);
    std::vector<std::size_t> todo;
    ScoreSummary summary;
    summary.total = pc.sequences.size();
    summary.skipped_records = pc.skipped_records;
    for (std::size_t i = 0; i < pc.sequences.size(); ++i) {
        const auto& id = pc.sequences[i].seq_id;
        const bool have_score = done.count(id) != 0;
        const bool have_sidecar = !cfg.sidecars || fs::exists(sidecar_dir / detail::sidecar_name(id));
        if (have_score && have_sidecar) {
            ++summary.resumed;
        } else {
            todo.push_back(i);
        }
    }
    log << "scoring " << todo.size() << " of " << pc.sequences.size() << " sequences (" << summary.resumed
        << " already done) with " << cfg.workers << " worker(s), digest " << digest << "\n";

    // Rewrite the journal with exactly the records carried over, so a torn
    // tail from an earlier interrupt does not linger.
    {
        std::string carried;
        for (const auto& [id, line] : done) carried += line + "\n";
        write_file_atomic(cfg.out / layout::journal, carried);
    }
    std::ofstream journal(cfg.out / layout::journal, std::ios::binary | std::ios::app);
    if (!journal) throw io_error("cannot append to " + (cfg.out / layout::journal).string());
    std::mutex mutex;

    parallel_for(todo.size(), cfg.workers, [&](std::size_t k) {
        const auto& seq = pc.sequences[todo[k]];
        try {
            const auto scored = std::visit(
                [&](const auto& provider) { return score_sequence(provider, seq, cfg.scoring); }, backend);
            if (cfg.sidecars) {
                write_file_atomic(sidecar_dir / detail::sidecar_name(seq.seq_id),
                                  to_json(make_sidecar(seq, scored, digest)).dump() + "\n");
            }
            const std::string line = score_record(scored.summary, digest).dump();
            std::lock_guard lock(mutex);
            journal << line << "\n";
            journal.flush();
            done[seq.seq_id] = line;
            ++summary.scored;
        } catch (const error& e) {
            std::lock_guard lock(mutex);
            ++summary.failed;
            log << "error: sequence " << seq.seq_id << ": " << e.what() << "\n";
        }
    });
    journal.close();

    if (summary.failed == 0) {
        std::string all;
        for (const auto& [id, line] : done) all += line + "\n";  // std::map keeps seq_id order
        write_file_atomic(cfg.out / layout::scores, all);
        fs::remove(cfg.out / layout::journal);
        log << "wrote " << (cfg.out / layout::scores).string() << " (" << done.size() << " sequences)\n";
    } else {
        log << summary.failed << " of " << summary.total
            << " sequences failed; completed work is kept in " << (cfg.out / layout::journal).string()
            << " and a rerun resumes from it\n";
    }
    if (summary.skipped_records) log << "error: " << summary.skipped_records << " input records were skipped\n";
    return summary;
}

inline int cmd_score(const PipelineConfig& cfg, std::ostream& log) {
    const auto s = run_score(cfg, log);
    return s.failed == 0 && s.skipped_records == 0 ? 0 : 1;
}

inline std::vector<SequenceScore> load_scores(const PipelineConfig& cfg, const std::string& digest) {
    const auto path = cfg.out / layout::scores;
    if (!std::filesystem::exists(path)) {
        throw io_error("no score file at " + path.string() + "; run `longfilter score` first");
    }
    std::map<std::string, std::string> records;
    detail::read_score_records(path, digest, false, records);
    std::vector<SequenceScore> scores;
    for (const auto& [id, line] : records) scores.push_back(score_from_record(nlohmann::json::parse(line)));
    if (scores.empty()) throw io_error(path.string() + " holds no scores");
    return scores;
}

inline int cmd_select(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    const std::string digest = config_digest(cfg);
    const auto manifest = rank_and_select(load_scores(cfg, digest), cfg.keep_fraction, digest);
    write_file_atomic(cfg.out / layout::selection, manifest_to_jsonl(manifest));
    log << "selected " << manifest.selected.size() << " of " << manifest.entries.size()
        << " sequences (keep_fraction " << cfg.keep_fraction << ", threshold " << manifest.threshold_score
        << ")\n";

    std::vector<std::string> pool;
    const auto pool_path = cfg.out / layout::short_pool;
    if (std::filesystem::exists(pool_path)) {
        for (const auto& line : read_lines(pool_path)) {
            pool.push_back(nlohmann::json::parse(line).at("doc_id").get<std::string>());
        }
    }
    const auto recipe = compose_mixture(manifest, pool, cfg.long_fraction, cfg.seed);
    write_file_atomic(cfg.out / layout::mixture, mixture_to_jsonl(recipe, digest));
    log << "mixture schedule of " << recipe.schedule.size() << " entries (long_fraction " << cfg.long_fraction
        << ", " << pool.size() << " short documents available)\n";
    return 0;
}

/// Renders reports for `seq_ids`, or for every sequence that has a sidecar
/// when the list is empty.
inline int cmd_report(const PipelineConfig& cfg, std::vector<std::string> seq_ids, std::ostream& log) {
    namespace fs = std::filesystem;
    cfg.validate();
    const fs::path sidecar_dir = cfg.out / layout::sidecars;
    if (seq_ids.empty() && fs::is_directory(sidecar_dir)) {
        for (const auto& e : fs::directory_iterator(sidecar_dir)) {
            if (e.path().extension() == ".json") seq_ids.push_back(e.path().stem().string());
        }
        std::sort(seq_ids.begin(), seq_ids.end());
    }
    if (seq_ids.empty()) {
        throw io_error("no token sidecars under " + sidecar_dir.string() +
                       "; rerun `longfilter score` with \"sidecars\": true");
    }
    const auto tokenizer = cfg.tokenizer();
    const fs::path report_dir = cfg.out / layout::report;
    for (const auto& id : seq_ids) {
        const auto path = sidecar_dir / detail::sidecar_name(id);
        if (!fs::exists(path)) {
            throw io_error("no token sidecar for " + id + " at " + path.string() +
                           "; rerun `longfilter score` with \"sidecars\": true");
        }
        std::ifstream in(path, std::ios::binary);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception&) {
            throw io_error(path.string() + " is not valid JSON");
        }
        const auto sidecar = sidecar_from_json(j);
        const auto report = make_report(sidecar, tokenizer);
        write_file_atomic(report_dir / (id + ".tokens.jsonl"), report_to_jsonl(report, sidecar.config_digest));
        write_file_atomic(report_dir / (id + ".html"), report_to_html(report, sidecar.config_digest));
        write_file_atomic(report_dir / (id + ".svg"), report_to_svg(report));
        log << "report for " << id << " in " << report_dir.string() << " (score " << report.score << ")\n";
    }
    return 0;
}

/// Writes `count` synthetic documents to `<out_dir>/<kind>-<seed>.jsonl` and
/// returns the file path.
inline std::filesystem::path cmd_synth(const synth::SynthSpec& spec, std::uint64_t seed, std::size_t count,
                                       const std::filesystem::path& out_dir, std::ostream& log) {
    if (count == 0) throw argument_error("count must be >= 1");
    const auto docs = synth::generate(spec, seed, count);
    std::string body;
    for (const auto& d : docs) body += synth::to_jsonl_record(d) + "\n";
    const auto path = out_dir / (std::string(synth::to_string(spec.kind)) + "-" + std::to_string(seed) + ".jsonl");
    write_file_atomic(path, body);
    log << "wrote " << docs.size() << " " << synth::to_string(spec.kind) << " documents to " << path.string()
        << "\n";
    return path;
}

}  // namespace longfilter
