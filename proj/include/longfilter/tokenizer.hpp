#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "longfilter/error.hpp"
#include "longfilter/types.hpp"

namespace longfilter {

/// Either the built-in byte-level tokenizer (token = byte value, vocab 256) or a
/// greedy longest-match tokenizer over an external vocabulary file.
///
/// Vocabulary file layout (JSON):
///   {"format_version": 1, "tokenizer_id": "name", "tokens": ["a", "ab", ...]}
/// The token id is the index in "tokens".
class Tokenizer {
  public:
    static constexpr const char* byte_level_id = "byte256";

    static Tokenizer byte_level() { return Tokenizer{}; }

    static Tokenizer from_vocab_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw config_error("cannot open vocabulary file " + path.string());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw config_error("vocabulary file " + path.string() + " is not valid JSON: " + e.what());
        }
        if (!j.is_object() || j.value("format_version", 0) != 1) {
            throw config_error("vocabulary file " + path.string() + ": unsupported format_version");
        }
        if (!j.contains("tokens") || !j["tokens"].is_array() || j["tokens"].empty()) {
            throw config_error("vocabulary file " + path.string() + ": missing non-empty \"tokens\" array");
        }
        Tokenizer tok;
        tok.byte_level_ = false;
        tok.id_ = j.value("tokenizer_id", path.stem().string());
        for (const auto& entry : j["tokens"]) {
            if (!entry.is_string() || entry.get<std::string>().empty()) {
                throw config_error("vocabulary file " + path.string() + ": tokens must be non-empty strings");
            }
            auto piece = entry.get<std::string>();
            if (!tok.lookup_.emplace(piece, static_cast<token_id>(tok.pieces_.size())).second) {
                throw config_error("vocabulary file " + path.string() + ": duplicate token \"" + piece + "\"");
            }
            tok.max_piece_ = std::max(tok.max_piece_, piece.size());
            tok.pieces_.push_back(std::move(piece));
        }
        return tok;
    }

    const std::string& id() const noexcept { return id_; }
    bool is_byte_level() const noexcept { return byte_level_; }
    std::size_t vocab_size() const noexcept { return byte_level_ ? 256 : pieces_.size(); }

    std::vector<token_id> encode(std::string_view text) const {
        std::vector<token_id> out;
        if (byte_level_) {
            out.reserve(text.size());
            for (unsigned char c : text) out.push_back(c);
            return out;
        }
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t len = std::min(max_piece_, text.size() - pos);
            for (; len > 0; --len) {
                auto it = lookup_.find(std::string(text.substr(pos, len)));
                if (it != lookup_.end()) {
                    out.push_back(it->second);
                    break;
                }
            }
            if (len == 0) {
                throw argument_error("tokenizer " + id_ + " cannot encode byte at offset " + std::to_string(pos));
            }
            pos += len;
        }
        return out;
    }

    std::string decode(std::span<const token_id> tokens) const {
        std::string out;
        for (token_id t : tokens) out += piece(t);
        return out;
    }

    std::string piece(token_id t) const {
        if (t >= vocab_size()) throw argument_error("token id " + std::to_string(t) + " out of vocabulary");
        if (byte_level_) return std::string(1, static_cast<char>(t));
        return pieces_[t];
    }

  private:
    Tokenizer() = default;

    bool byte_level_ = true;
    std::string id_ = byte_level_id;
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, token_id> lookup_;
    std::size_t max_piece_ = 0;
};

}  // namespace longfilter
