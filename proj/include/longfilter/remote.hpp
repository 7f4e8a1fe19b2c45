#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "longfilter/cache_ngram.hpp"
#include "longfilter/error.hpp"
#include "longfilter/types.hpp"

// Wire protocol (JSON over HTTP):
//   GET  /v1/info      -> {"vocab_size": int, "max_context": int, "tokenizer_id": string}
//   POST /v1/logprobs  {"tokens": [int], "eval_start": int, "eval_end": int}
//                      -> {"logprobs": [float]}, logprobs[i] = ln p(tokens[eval_start+i] | tokens[0, eval_start+i))
// Requests the server rejects get HTTP 400 with {"error": string}.

namespace longfilter {

struct RemoteInfo {
    std::size_t vocab_size = 0;
    std::size_t max_context = 0;
    std::string tokenizer_id;
};

struct RemoteOptions {
    std::chrono::milliseconds timeout{30000};
    std::size_t retries = 2;
    std::chrono::milliseconds backoff{20};
};

/// Client side of the logprob protocol. Safe for concurrent use: every
/// request opens its own connection.
class RemoteClient {
  public:
    /// Values above 0 up to this tolerance are treated as serialization
    /// jitter and clamped; anything larger is a protocol error.
    static constexpr double positive_tolerance = 1e-6;

    explicit RemoteClient(std::string endpoint, RemoteOptions opts = {})
        : endpoint_(std::move(endpoint)), opts_(opts), state_(std::make_shared<State>()) {
        while (!endpoint_.empty() && endpoint_.back() == '/') endpoint_.pop_back();
    }

    const std::string& endpoint() const noexcept { return endpoint_; }

    RemoteInfo info() const {
        {
            std::lock_guard lock(state_->mutex);
            if (state_->info) return *state_->info;
        }
        auto body = request([](httplib::Client& c) { return c.Get("/v1/info"); }, "GET /v1/info");
        RemoteInfo info;
        try {
            info.vocab_size = body.at("vocab_size").get<std::size_t>();
            info.max_context = body.at("max_context").get<std::size_t>();
            info.tokenizer_id = body.at("tokenizer_id").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw protocol_error(endpoint_ + ": malformed /v1/info response: " + e.what());
        }
        std::lock_guard lock(state_->mutex);
        state_->info = info;
        return info;
    }

    std::size_t vocab_size() const { return info().vocab_size; }

    std::vector<double> logprobs(std::span<const token_id> tokens, std::size_t eval_start,
                                 std::size_t eval_end) const {
        if (!(eval_start >= 1 && eval_start < eval_end && eval_end <= tokens.size())) {
            throw argument_error("invalid evaluation range for remote request");
        }
        nlohmann::json req;
        req["tokens"] = std::vector<token_id>(tokens.begin(), tokens.end());
        req["eval_start"] = eval_start;
        req["eval_end"] = eval_end;
        const std::string payload = req.dump();
        auto body = request(
            [&](httplib::Client& c) { return c.Post("/v1/logprobs", payload, "application/json"); },
            "POST /v1/logprobs");

        const std::size_t expected = eval_end - eval_start;
        if (!body.is_object() || !body.contains("logprobs") || !body["logprobs"].is_array()) {
            throw protocol_error(endpoint_ + ": response lacks a \"logprobs\" array");
        }
        const auto& arr = body["logprobs"];
        if (arr.size() != expected) {
            throw protocol_error(endpoint_ + ": expected " + std::to_string(expected) + " logprobs, got " +
                                 std::to_string(arr.size()));
        }
        std::vector<double> out;
        out.reserve(expected);
        for (std::size_t i = 0; i < arr.size(); ++i) {
            if (!arr[i].is_number()) {
                throw protocol_error(endpoint_ + ": non-numeric logprob at offset " + std::to_string(i));
            }
            const double v = arr[i].get<double>();
            if (!std::isfinite(v) || v > positive_tolerance) {
                throw protocol_error(endpoint_ + ": invalid logprob " + std::to_string(v) + " at offset " +
                                     std::to_string(i));
            }
            out.push_back(std::min(v, 0.0));
        }
        return out;
    }

  private:
    struct State {
        std::mutex mutex;
        std::optional<RemoteInfo> info;
    };

    template <class Send>
    nlohmann::json request(Send&& send, const char* what) const {
        const std::size_t attempts = opts_.retries + 1;
        std::string last_failure;
        for (std::size_t attempt = 1; attempt <= attempts; ++attempt) {
            httplib::Client client(endpoint_);
            const auto secs = std::chrono::duration_cast<std::chrono::seconds>(opts_.timeout);
            const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(opts_.timeout - secs);
            client.set_connection_timeout(secs.count(), usecs.count());
            client.set_read_timeout(secs.count(), usecs.count());
            client.set_write_timeout(secs.count(), usecs.count());
            auto res = send(client);
            if (!res) {
                last_failure = httplib::to_string(res.error());
            } else if (res->status >= 500) {
                last_failure = "HTTP " + std::to_string(res->status);
            } else if (res->status != 200) {
                std::string detail = res->body;
                try {
                    detail = nlohmann::json::parse(res->body).at("error").template get<std::string>();
                } catch (const nlohmann::json::exception&) {
                }
                throw protocol_error(endpoint_ + ": " + what + " rejected with HTTP " + std::to_string(res->status) +
                                     ": " + detail);
            } else {
                try {
                    return nlohmann::json::parse(res->body);
                } catch (const nlohmann::json::exception&) {
                    throw protocol_error(endpoint_ + ": " + what + " returned malformed JSON");
                }
            }
            if (attempt < attempts) std::this_thread::sleep_for(opts_.backoff * attempt);
        }
        throw transport_error(endpoint_ + ": " + what + " failed after " + std::to_string(attempts) +
                                  " attempts: " + last_failure,
                              attempts);
    }

    std::string endpoint_;
    RemoteOptions opts_;
    std::shared_ptr<State> state_;
};

/// HTTP server exposing a logprob function over the wire protocol. Stateless
/// between requests.
class MockServer {
  public:
    using LogprobFn = std::function<std::vector<double>(std::span<const token_id>, std::size_t, std::size_t)>;

    MockServer(LogprobFn fn, RemoteInfo info) : fn_(std::move(fn)), info_(std::move(info)) { install_routes(); }

    MockServer(const MockServer&) = delete;
    MockServer& operator=(const MockServer&) = delete;

    ~MockServer() { stop(); }

    /// Binds to host:port (port 0 picks a free port) and returns the port.
    int bind(const std::string& host, int port) {
        const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (bound < 0) throw io_error("cannot bind " + host + ":" + std::to_string(port));
        host_ = host;
        port_ = bound;
        return bound;
    }

    /// Serves on a background thread until stop().
    void start() {
        if (port_ < 0) throw io_error("server is not bound");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    /// Serves on the calling thread until stop() is called from elsewhere.
    void run() {
        if (port_ < 0) throw io_error("server is not bound");
        server_.listen_after_bind();
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const noexcept { return port_; }
    std::string url() const { return "http://" + host_ + ":" + std::to_string(port_); }
    const RemoteInfo& info() const noexcept { return info_; }

  private:
    static void fail(httplib::Response& res, const std::string& msg) {
        res.status = 400;
        res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    }

    void install_routes() {
        server_.Get("/v1/info", [this](const httplib::Request&, httplib::Response& res) {
            nlohmann::ordered_json j;
            j["vocab_size"] = info_.vocab_size;
            j["max_context"] = info_.max_context;
            j["tokenizer_id"] = info_.tokenizer_id;
            res.set_content(j.dump(), "application/json");
        });
        server_.Post("/v1/logprobs", [this](const httplib::Request& req, httplib::Response& res) {
            std::vector<token_id> tokens;
            std::int64_t eval_start = 0;
            std::int64_t eval_end = 0;
            try {
                auto body = nlohmann::json::parse(req.body);
                const auto& arr = body.at("tokens");
                if (!arr.is_array()) return fail(res, "\"tokens\" must be an array");
                tokens.reserve(arr.size());
                for (const auto& t : arr) {
                    if (!t.is_number_integer() || t.get<std::int64_t>() < 0 ||
                        static_cast<std::uint64_t>(t.get<std::int64_t>()) >= info_.vocab_size) {
                        return fail(res, "token ids must be integers in [0, vocab_size)");
                    }
                    tokens.push_back(t.get<token_id>());
                }
                eval_start = body.at("eval_start").get<std::int64_t>();
                eval_end = body.at("eval_end").get<std::int64_t>();
            } catch (const nlohmann::json::exception& e) {
                return fail(res, std::string("malformed request: ") + e.what());
            }
            if (eval_start < 1) return fail(res, "eval_start must be >= 1: position 0 has no prediction target");
            if (eval_end <= eval_start || static_cast<std::size_t>(eval_end) > tokens.size()) {
                return fail(res, "need eval_start < eval_end <= len(tokens)");
            }
            if (tokens.size() > info_.max_context) return fail(res, "request exceeds max_context");
            std::vector<double> values;
            try {
                values = fn_(tokens, static_cast<std::size_t>(eval_start), static_cast<std::size_t>(eval_end));
            } catch (const error& e) {
                return fail(res, e.what());
            }
            nlohmann::json out;
            out["logprobs"] = std::move(values);
            res.set_content(out.dump(), "application/json");
        });
    }

    LogprobFn fn_;
    RemoteInfo info_;
    httplib::Server server_;
    std::thread thread_;
    std::string host_;
    int port_ = -1;
};

struct MockServeOptions {
    std::size_t max_context = std::size_t{1} << 20;
};

/// Binds and starts a server backed by `model`; the handle stops it on destruction.
inline std::unique_ptr<MockServer> serve_mock(std::shared_ptr<const CacheNGramModel> model, const std::string& host,
                                              int port, MockServeOptions opts = {}) {
    RemoteInfo info{model->vocab_size(), opts.max_context, model->tokenizer_id()};
    auto server = std::make_unique<MockServer>(
        [model](std::span<const token_id> t, std::size_t a, std::size_t b) { return model->logprobs(t, a, b); },
        std::move(info));
    server->bind(host, port);
    server->start();
    return server;
}

}  // namespace longfilter
