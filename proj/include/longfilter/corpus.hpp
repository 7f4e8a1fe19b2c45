#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "longfilter/error.hpp"
#include "longfilter/parallel.hpp"
#include "longfilter/tokenizer.hpp"
#include "longfilter/types.hpp"

namespace longfilter {

struct Document {
    std::string doc_id;
    std::string text;
    std::string source;
    std::map<std::string, std::string> meta;
};

struct TokenizedDoc {
    std::string doc_id;
    std::string source;
    std::vector<token_id> tokens;
    std::string tokenizer_id;
};

struct Span {
    std::string doc_id;
    std::size_t start = 0;
    std::size_t end = 0;

    bool operator==(const Span&) const = default;
};

/// Fixed-length slice of the concatenated token stream. `spans` partitions
/// [0, tokens.size()) by contributing document.
struct PackedSequence {
    std::string seq_id;
    std::vector<token_id> tokens;
    std::vector<Span> spans;
};

struct LengthPartition {
    std::vector<std::string> long_docs;
    std::vector<std::string> short_docs;
    std::size_t threshold_tokens = 1;
};

enum class InputFormat { lines, jsonl, raw };

inline InputFormat parse_input_format(const std::string& name) {
    if (name == "lines") return InputFormat::lines;
    if (name == "jsonl") return InputFormat::jsonl;
    if (name == "raw") return InputFormat::raw;
    throw config_error("unknown input format \"" + name + "\" (expected lines, jsonl or raw)");
}

inline const char* to_string(InputFormat f) {
    switch (f) {
        case InputFormat::lines: return "lines";
        case InputFormat::jsonl: return "jsonl";
        case InputFormat::raw: return "raw";
    }
    return "?";
}

struct IngestOptions {
    InputFormat format = InputFormat::jsonl;
    std::string default_source = "default";
};

struct IngestResult {
    std::vector<Document> docs;
    std::size_t skipped = 0;
    std::vector<std::string> errors;
};

namespace detail {

inline std::vector<std::filesystem::path> list_input_files(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::error_code ec;
    auto status = fs::status(root, ec);
    if (ec || !fs::exists(status)) throw io_error("cannot read input path " + root.string());
    if (fs::is_regular_file(status)) return {root};
    if (!fs::is_directory(status)) throw io_error("input path is neither file nor directory: " + root.string());

    std::vector<fs::path> files;
    for (auto it = fs::recursive_directory_iterator(root, ec); !ec && it != fs::recursive_directory_iterator();
         it.increment(ec)) {
        if (it->is_regular_file()) files.push_back(it->path());
    }
    if (ec) throw io_error("cannot list directory " + root.string() + ": " + ec.message());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.generic_string() < b.generic_string(); });
    return files;
}

inline std::string relative_name(const std::filesystem::path& file, const std::filesystem::path& root) {
    if (file == root) return file.filename().generic_string();
    return std::filesystem::relative(file, root).generic_string();
}

inline std::string meta_value_string(const nlohmann::json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
}

}  // namespace detail

/// Visits every document under `path` in deterministic order: files sorted by
/// path, records in file order. Malformed structured records are reported and
/// skipped; the returned pair is (documents visited, records skipped).
inline std::pair<std::size_t, std::size_t> for_each_document(
    const std::filesystem::path& path, const IngestOptions& opts, const std::function<void(Document&&)>& visit,
    std::vector<std::string>* errors = nullptr) {
    std::size_t emitted = 0;
    std::size_t skipped = 0;
    for (const auto& file : detail::list_input_files(path)) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw io_error("cannot open " + file.string());
        const std::string name = detail::relative_name(file, path);

        if (opts.format == InputFormat::raw) {
            std::ostringstream buf;
            buf << in.rdbuf();
            std::string text = std::move(buf).str();
            if (text.empty()) continue;
            visit(Document{name, std::move(text), opts.default_source, {}});
            ++emitted;
            continue;
        }

        std::string line;
        std::size_t line_no = 0;
        std::size_t record = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (opts.format == InputFormat::lines) {
                if (line.empty()) continue;
                visit(Document{name + "#" + std::to_string(record++), std::move(line), opts.default_source, {}});
                ++emitted;
                continue;
            }
            if (line.find_first_not_of(" \t") == std::string::npos) continue;

            auto fail = [&](const std::string& why) {
                ++skipped;
                if (errors) errors->push_back(file.string() + ":" + std::to_string(line_no) + ": " + why);
            };
            nlohmann::json rec;
            try {
                rec = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception&) {
                fail("malformed JSON record");
                continue;
            }
            if (!rec.is_object() || !rec.contains("text") || !rec["text"].is_string()) {
                fail("record lacks a string \"text\" field");
                continue;
            }
            Document doc;
            doc.text = rec["text"].get<std::string>();
            if (doc.text.empty()) {
                fail("record has empty text");
                continue;
            }
            if (rec.contains("meta")) {
                if (!rec["meta"].is_object()) {
                    fail("\"meta\" must be an object");
                    continue;
                }
                for (const auto& [k, v] : rec["meta"].items()) doc.meta[k] = detail::meta_value_string(v);
            }
            doc.doc_id = rec.contains("doc_id") && rec["doc_id"].is_string()
                             ? rec["doc_id"].get<std::string>()
                             : name + "#" + std::to_string(record);
            if (rec.contains("source") && rec["source"].is_string()) {
                doc.source = rec["source"].get<std::string>();
            } else if (auto it = doc.meta.find("source"); it != doc.meta.end()) {
                doc.source = it->second;
            } else {
                doc.source = opts.default_source;
            }
            ++record;
            visit(std::move(doc));
            ++emitted;
        }
    }
    return {emitted, skipped};
}

inline IngestResult ingest(const std::filesystem::path& path, const IngestOptions& opts = {}) {
    IngestResult result;
    std::set<std::string> seen;
    auto [n, skipped] = for_each_document(
        path, opts,
        [&](Document&& d) {
            if (!seen.insert(d.doc_id).second) {
                ++result.skipped;
                result.errors.push_back("duplicate doc_id " + d.doc_id + " skipped");
                return;
            }
            result.docs.push_back(std::move(d));
        },
        &result.errors);
    result.skipped += skipped;
    return result;
}

inline TokenizedDoc tokenize(const Document& doc, const Tokenizer& tokenizer) {
    if (doc.text.empty()) throw argument_error("document " + doc.doc_id + " has empty text");
    return TokenizedDoc{doc.doc_id, doc.source, tokenizer.encode(doc.text), tokenizer.id()};
}

/// Tokenizes in parallel; output order matches input order for any worker count.
inline std::vector<TokenizedDoc> tokenize_all(const std::vector<Document>& docs, const Tokenizer& tokenizer,
                                              std::size_t workers = 1) {
    std::vector<TokenizedDoc> out(docs.size());
    parallel_for(docs.size(), workers, [&](std::size_t i) { out[i] = tokenize(docs[i], tokenizer); });
    return out;
}

inline LengthPartition partition_by_length(const std::vector<TokenizedDoc>& docs, std::size_t threshold_tokens) {
    if (threshold_tokens < 1) throw argument_error("length threshold must be >= 1");
    LengthPartition part;
    part.threshold_tokens = threshold_tokens;
    for (const auto& d : docs) {
        (d.tokens.size() >= threshold_tokens ? part.long_docs : part.short_docs).push_back(d.doc_id);
    }
    return part;
}

inline std::string make_seq_id(const std::string& prefix, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%08zu", index);
    return prefix + "-" + buf;
}

/// Concatenates the token streams in order and cuts them into consecutive
/// sequences of exactly pack_len tokens. The trailing remainder is dropped.
inline std::vector<PackedSequence> pack(const std::vector<TokenizedDoc>& docs, std::size_t pack_len,
                                        const std::string& seq_prefix = "seq") {
    if (pack_len < 2) throw argument_error("pack_len must be >= 2");
    std::vector<PackedSequence> out;
    PackedSequence cur;
    cur.tokens.reserve(pack_len);
    for (const auto& doc : docs) {
        std::size_t offset = 0;
        while (offset < doc.tokens.size()) {
            const std::size_t room = pack_len - cur.tokens.size();
            const std::size_t take = std::min(room, doc.tokens.size() - offset);
            const std::size_t start = cur.tokens.size();
            cur.tokens.insert(cur.tokens.end(), doc.tokens.begin() + static_cast<std::ptrdiff_t>(offset),
                              doc.tokens.begin() + static_cast<std::ptrdiff_t>(offset + take));
            cur.spans.push_back(Span{doc.doc_id, start, start + take});
            offset += take;
            if (cur.tokens.size() == pack_len) {
                cur.seq_id = make_seq_id(seq_prefix, out.size());
                out.push_back(std::move(cur));
                cur = PackedSequence{};
                cur.tokens.reserve(pack_len);
            }
        }
    }
    return out;
}

inline nlohmann::json to_json(const PackedSequence& seq) {
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& s : seq.spans) spans.push_back({{"doc_id", s.doc_id}, {"start", s.start}, {"end", s.end}});
    return nlohmann::json{{"seq_id", seq.seq_id}, {"tokens", seq.tokens}, {"spans", std::move(spans)}};
}

inline PackedSequence packed_from_json(const nlohmann::json& j) {
    PackedSequence seq;
    seq.seq_id = j.at("seq_id").get<std::string>();
    seq.tokens = j.at("tokens").get<std::vector<token_id>>();
    for (const auto& s : j.at("spans")) {
        seq.spans.push_back(
            Span{s.at("doc_id").get<std::string>(), s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>()});
    }
    return seq;
}

}  // namespace longfilter
