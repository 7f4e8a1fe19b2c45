#include <gtest/gtest.h>

#include <atomic>

#include "longfilter/remote.hpp"
#include "longfilter/scorer.hpp"

using namespace longfilter;

namespace {

std::shared_ptr<const CacheNGramModel> small_model() {
    std::string text;
    for (int i = 0; i < 50; ++i) text += "the cat sat on the mat; ";
    auto doc = tokenize(Document{"d", text, "s", {}}, Tokenizer::byte_level());
    return std::make_shared<const CacheNGramModel>(CacheNGramModel::fit({doc}, 256, {}));
}

std::vector<token_id> bytes(const std::string& s) { return std::vector<token_id>(s.begin(), s.end()); }

RemoteOptions fast(std::size_t retries = 2) {
    RemoteOptions o;
    o.timeout = std::chrono::milliseconds(2000);
    o.retries = retries;
    o.backoff = std::chrono::milliseconds(1);
    return o;
}

// Serves a fixed reply for /v1/logprobs and counts the requests it sees.
struct ScriptedServer {
    httplib::Server server;
    std::thread thread;
    std::atomic<int> hits{0};
    int port = -1;

    ScriptedServer(int status, std::string body) {
        server.Get("/v1/info", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"vocab_size": 256, "max_context": 1024, "tokenizer_id": "byte256"})",
                            "application/json");
        });
        server.Post("/v1/logprobs", [this, status, body](const httplib::Request&, httplib::Response& res) {
            ++hits;
            res.status = status;
            res.set_content(body, "application/json");
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~ScriptedServer() {
        server.stop();
        thread.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

}  // namespace

static_assert(logprob_provider<RemoteClient>);

TEST(Remote, RoundTripMatchesLocalModel) {
    const auto model = small_model();
    auto server = serve_mock(model, "127.0.0.1", 0);
    RemoteClient client(server->url(), fast());
    const auto info = client.info();
    EXPECT_EQ(info.vocab_size, 256u);
    EXPECT_EQ(info.tokenizer_id, "byte256");
    EXPECT_EQ(info.max_context, std::size_t{1} << 20);
    const auto seq = bytes("the mat sat on the cat");
    const auto remote = client.logprobs(seq, 1, seq.size());
    const auto local = model->logprobs(seq, 1, seq.size());
    ASSERT_EQ(remote.size(), local.size());
    for (std::size_t i = 0; i < local.size(); ++i) EXPECT_NEAR(remote[i], local[i], 1e-12);
}

TEST(Remote, ScoringThroughTheWireMatchesLocalScoring) {
    const auto model = small_model();
    auto server = serve_mock(model, "127.0.0.1", 0);
    RemoteClient client(server->url(), fast());
    PackedSequence seq{"seq-r", {}, {}};
    std::string text;
    for (int i = 0; i < 6; ++i) text += "a quick fox jumps";
    seq.tokens = bytes(text);
    seq.spans = {{"d", 0, seq.tokens.size()}};
    ScoringConfig cfg;
    cfg.short_len = 16;
    cfg.long_len = 64;
    const auto remote = score_sequence(client, seq, cfg);
    const auto local = score_sequence(*model, seq, cfg);
    EXPECT_NEAR(remote.summary.score, local.summary.score, 1e-12);
}

TEST(Remote, ServerRejectsPositionZero) {
    auto server = serve_mock(small_model(), "127.0.0.1", 0);
    httplib::Client raw(server->url());
    auto res = raw.Post("/v1/logprobs", R"({"tokens": [1, 2, 3], "eval_start": 0, "eval_end": 2})",
                        "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
    EXPECT_TRUE(nlohmann::json::parse(res->body).contains("error"));

    res = raw.Post("/v1/logprobs", R"({"tokens": [1, 2, 3], "eval_start": 2, "eval_end": 9})", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
    res = raw.Post("/v1/logprobs", "not json", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
    res = raw.Post("/v1/logprobs", R"({"tokens": [1, 999], "eval_start": 1, "eval_end": 2})", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
}

TEST(Remote, ClientRefusesInvalidRangesLocally) {
    RemoteClient client("http://127.0.0.1:1", fast(0));
    const auto seq = bytes("abc");
    EXPECT_THROW(client.logprobs(seq, 0, 2), argument_error);
}

TEST(Remote, WrongLengthIsAProtocolError) {
    ScriptedServer s(200, R"({"logprobs": [-1.0, -2.0]})");
    RemoteClient client(s.url(), fast());
    try {
        client.logprobs(bytes("abcdef"), 1, 4);
        FAIL();
    } catch (const protocol_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expected 3"), std::string::npos) << msg;
        EXPECT_NE(msg.find("got 2"), std::string::npos) << msg;
    }
    EXPECT_EQ(s.hits.load(), 1);
}

TEST(Remote, InvalidValuesAreProtocolErrors) {
    {
        ScriptedServer s(200, R"({"logprobs": [-1.0, 0.5]})");
        EXPECT_THROW(RemoteClient(s.url(), fast()).logprobs(bytes("abc"), 1, 3), protocol_error);
    }
    {
        ScriptedServer s(200, R"({"logprobs": [-1.0, "x"]})");
        EXPECT_THROW(RemoteClient(s.url(), fast()).logprobs(bytes("abc"), 1, 3), protocol_error);
    }
    {
        ScriptedServer s(200, R"({"values": []})");
        EXPECT_THROW(RemoteClient(s.url(), fast()).logprobs(bytes("abc"), 1, 3), protocol_error);
    }
    {
        ScriptedServer s(200, "garbage");
        EXPECT_THROW(RemoteClient(s.url(), fast()).logprobs(bytes("abc"), 1, 3), protocol_error);
    }
}

TEST(Remote, TinyPositiveValuesAreClamped) {
    ScriptedServer s(200, R"({"logprobs": [-1.0, 1e-9]})");
    const auto v = RemoteClient(s.url(), fast()).logprobs(bytes("abc"), 1, 3);
    EXPECT_EQ(v[1], 0.0);
}

TEST(Remote, ServerErrorsAreRetriedThenReported) {
    ScriptedServer s(503, R"({"error": "overloaded"})");
    RemoteClient client(s.url(), fast(2));
    try {
        client.logprobs(bytes("abc"), 1, 3);
        FAIL();
    } catch (const transport_error& e) {
        EXPECT_EQ(e.attempts(), 3u);
    }
    EXPECT_EQ(s.hits.load(), 3);
}

TEST(Remote, ClientErrorsAreNotRetried) {
    ScriptedServer s(400, R"({"error": "bad request"})");
    try {
        RemoteClient(s.url(), fast(2)).logprobs(bytes("abc"), 1, 3);
        FAIL();
    } catch (const protocol_error& e) {
        EXPECT_NE(std::string(e.what()).find("bad request"), std::string::npos);
    }
    EXPECT_EQ(s.hits.load(), 1);
}

TEST(Remote, UnreachableEndpointIsATransportError) {
    int port;
    {
        httplib::Server probe;
        port = probe.bind_to_any_port("127.0.0.1");
    }
    RemoteClient client("http://127.0.0.1:" + std::to_string(port), fast(1));
    try {
        client.info();
        FAIL();
    } catch (const transport_error& e) {
        EXPECT_EQ(e.attempts(), 2u);
    }
}

TEST(Remote, ScoringSurfacesTransportFailureWithSequenceId) {
    ScriptedServer s(500, "{}");
    RemoteClient client(s.url(), fast(1));
    PackedSequence seq{"seq-down", bytes("abcdefghijklmnop"), {{"d", 0, 16}}};
    ScoringConfig cfg;
    cfg.short_len = 4;
    cfg.long_len = 16;
    try {
        score_sequence(client, seq, cfg);
        FAIL();
    } catch (const transport_error& e) {
        EXPECT_NE(std::string(e.what()).find("seq-down"), std::string::npos);
    }
}

TEST(Remote, ServerStopsCleanly) {
    auto server = serve_mock(small_model(), "127.0.0.1", 0);
    const auto url = server->url();
    server->stop();
    server.reset();
    EXPECT_THROW(RemoteClient(url, fast(0)).info(), transport_error);
}
