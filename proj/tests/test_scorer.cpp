#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "longfilter/cache_ngram.hpp"
#include "longfilter/rng.hpp"
#include "longfilter/scorer.hpp"

using namespace longfilter;

namespace {

// Encodes how many context tokens each prediction saw: ln p = -1e-3 * (1 + ctx).
double encode_ctx(std::size_t ctx) { return -1e-3 * static_cast<double>(1 + ctx); }
std::size_t decode_ctx(double lp) { return static_cast<std::size_t>(std::llround(-lp * 1e3)) - 1; }

struct PlainCtxProvider {
    std::size_t vocab_size() const { return 256; }
    std::vector<double> logprobs(std::span<const token_id>, std::size_t a, std::size_t b) const {
        std::vector<double> out;
        for (std::size_t i = a; i < b; ++i) out.push_back(encode_ctx(i));
        return out;
    }
};

struct CtxProvider : PlainCtxProvider {
    std::vector<double> logprobs_windowed(std::span<const token_id>, std::size_t a, std::size_t b,
                                          std::size_t w) const {
        std::vector<double> out;
        for (std::size_t i = a; i < b; ++i) out.push_back(encode_ctx(std::min(i, w)));
        return out;
    }
    double unconditional_logprob(token_id) const { return encode_ctx(0); }
};

struct PlainCtxUncond : PlainCtxProvider {
    double unconditional_logprob(token_id) const { return encode_ctx(0); }
};

// Sees only the previous token, so any context length >= 1 gives the same answer.
struct BigramProvider {
    std::size_t vocab_size() const { return 256; }
    std::vector<double> logprobs(std::span<const token_id> t, std::size_t a, std::size_t b) const {
        std::vector<double> out;
        for (std::size_t i = a; i < b; ++i) out.push_back(-0.5 - 0.01 * static_cast<double>((t[i - 1] * 7 + t[i]) % 50));
        return out;
    }
};

struct ShortReplyProvider {
    std::size_t vocab_size() const { return 256; }
    std::vector<double> logprobs(std::span<const token_id>, std::size_t a, std::size_t b) const {
        return std::vector<double>(b - a - 1, -1.0);
    }
};

struct PositiveProvider {
    std::size_t vocab_size() const { return 256; }
    std::vector<double> logprobs(std::span<const token_id>, std::size_t a, std::size_t b) const {
        return std::vector<double>(b - a, 0.5);
    }
};

struct FailingProvider {
    std::size_t vocab_size() const { return 256; }
    std::vector<double> logprobs(std::span<const token_id>, std::size_t, std::size_t) const {
        throw transport_error("connection refused", 3);
    }
};

PackedSequence make_seq(std::size_t n, std::vector<Span> spans = {}) {
    PackedSequence s;
    s.seq_id = "seq-x";
    s.tokens.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.tokens[i] = static_cast<token_id>((i * 31 + 7) % 251);
    if (spans.empty()) spans.push_back({"d", 0, n});
    s.spans = std::move(spans);
    return s;
}

ScoringConfig cfg(std::size_t short_len, std::size_t long_len, std::optional<std::size_t> overlap = {}) {
    ScoringConfig c;
    c.short_len = short_len;
    c.long_len = long_len;
    c.overlap = overlap;
    return c;
}

}  // namespace

TEST(ChunkPlan, SmallExample) {
    const auto plan = plan_chunks(16, 8, 4);
    EXPECT_EQ(plan.chunks, (std::vector<Chunk>{{0, 8, 1}, {4, 12, 8}, {8, 16, 12}}));
}

TEST(ChunkPlan, RaggedTailAndZeroOverlap) {
    EXPECT_EQ(plan_chunks(10, 4, 0).chunks, (std::vector<Chunk>{{0, 4, 1}, {4, 8, 4}, {8, 10, 8}}));
    EXPECT_EQ(plan_chunks(8, 8, 3).chunks, (std::vector<Chunk>{{0, 8, 1}}));
    EXPECT_EQ(plan_chunks(11, 8, 4).chunks, (std::vector<Chunk>{{0, 8, 1}, {4, 11, 8}}));
}

TEST(ChunkPlan, InvalidShapes) {
    EXPECT_THROW(plan_chunks(16, 8, 8), argument_error);
    EXPECT_THROW(plan_chunks(16, 32, 4), argument_error);
    EXPECT_THROW(plan_chunks(16, 0, 0), argument_error);
}

TEST(ChunkPlan, ScoringRangesTileEveryPositionOnce) {
    portable_rng rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t chunk = 1 + rng.below(40);
        const std::size_t overlap = rng.below(chunk);
        const std::size_t n = chunk + rng.below(200);
        const auto plan = plan_chunks(n, chunk, overlap);
        std::vector<int> hits(n, 0);
        for (const auto& c : plan.chunks) {
            ASSERT_LE(c.end - c.start, chunk);
            ASSERT_GE(c.score_from, c.start);
            for (std::size_t i = c.score_from; i < c.end; ++i) ++hits[i];
            // Every scored position keeps at least `overlap` tokens of chunk context,
            // except inside the first chunk.
            if (c.start > 0) {
                ASSERT_EQ(c.score_from - c.start, overlap);
            }
        }
        EXPECT_EQ(hits[0], 0);
        for (std::size_t i = 1; i < n; ++i) ASSERT_EQ(hits[i], 1) << "n=" << n << " C=" << chunk << " O=" << overlap;
    }
}

TEST(Gain, WorkedValues) {
    EXPECT_NEAR(surrogate_gain(std::log(0.8), std::log(0.2)), 1.1090354888959124, 1e-15);
    EXPECT_NEAR(surrogate_gain(std::log(0.1), std::log(0.9)), -0.21972245773362198, 1e-15);
    EXPECT_EQ(surrogate_gain(-1.25, -1.25), 0.0);
}

TEST(Gain, LossFormAgrees) {
    portable_rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double ll = -10.0 * rng.uniform();
        const double ls = -10.0 * rng.uniform();
        EXPECT_NEAR(surrogate_gain(ll, ls), surrogate_gain_from_losses(-ll, -ls), 1e-14);
    }
}

TEST(Aggregate, MeanOfGains) {
    std::vector<TokenScore> t{{1, 0, 0, 0.5}, {2, 0, 0, 1.5}, {3, 0, 0, -0.2}};
    const auto s = aggregate(t, "s");
    EXPECT_NEAR(s.score, 0.6, 1e-15);
    EXPECT_EQ(s.n_scored, 3u);
    EXPECT_THROW(aggregate({}, "s"), argument_error);
}

TEST(Aggregate, CompensatedSumRecoversSmallTerms) {
    const std::vector<double> xs{1e16, 1.0, -1e16, 1.0};
    EXPECT_EQ(compensated_sum(xs), 2.0);
}

TEST(TokenScores, ClippingAndAlignment) {
    LogProbSlice l{"s", 1, {std::log(0.1), std::log(0.8)}};
    LogProbSlice s{"s", 1, {std::log(0.9), std::log(0.2)}};
    const auto raw = token_scores(l, s, false);
    const auto clipped = token_scores(l, s, true);
    EXPECT_LT(raw[0].gain, 0.0);
    EXPECT_EQ(clipped[0].gain, 0.0);
    EXPECT_EQ(raw[1].gain, clipped[1].gain);
    EXPECT_EQ(raw[1].position, 2u);
    LogProbSlice bad{"s", 2, {-1.0, -1.0}};
    EXPECT_THROW(token_scores(l, bad), argument_error);
}

TEST(LongContext, TruncatesToWindow) {
    const auto seq = make_seq(40);
    const auto lp = long_logprobs(CtxProvider{}, seq, cfg(4, 10));
    ASSERT_EQ(lp.values.size(), 39u);
    EXPECT_EQ(lp.eval_start, 1u);
    for (std::size_t i = 1; i < 40; ++i) EXPECT_EQ(decode_ctx(lp.values[i - 1]), std::min<std::size_t>(i, 10));
}

TEST(LongContext, MaskingStopsAtDocumentStart) {
    const auto seq = make_seq(30, {{"a", 0, 12}, {"b", 12, 30}});
    auto c = cfg(4, 20);
    c.mask_doc_boundaries = true;
    const auto lp = long_logprobs(CtxProvider{}, seq, c);
    for (std::size_t i = 1; i < 30; ++i) {
        const std::size_t expect = i < 12 ? i : std::min<std::size_t>(i - 12, 20);
        EXPECT_EQ(decode_ctx(lp.values[i - 1]), expect) << i;
    }
}

TEST(ShortContext, EachPositionSeesItsChunkOnly) {
    const auto seq = make_seq(16);
    const auto plan = plan_chunks(16, 8, 4);
    const auto lp = short_logprobs(CtxProvider{}, seq, plan, cfg(8, 16));
    const std::vector<std::size_t> expect{1, 2, 3, 4, 5, 6, 7, 4, 5, 6, 7, 4, 5, 6, 7};
    for (std::size_t i = 1; i < 16; ++i) EXPECT_EQ(decode_ctx(lp.values[i - 1]), expect[i - 1]) << i;
}

TEST(ShortContext, ZeroOverlapNeedsContextFreeProbabilities) {
    const auto seq = make_seq(16);
    auto c = cfg(8, 16, 0);
    const auto lp = short_logprobs(CtxProvider{}, seq, plan_chunks(16, 8, 0), c);
    EXPECT_EQ(decode_ctx(lp.values[7]), 0u);
    EXPECT_THROW(score_sequence(PlainCtxProvider{}, seq, c), config_error);
}

TEST(ShortContext, MaskingSplitsChunksAtDocuments) {
    const auto seq = make_seq(16, {{"a", 0, 6}, {"b", 6, 16}});
    auto c = cfg(8, 16);
    c.mask_doc_boundaries = true;
    const auto lp = short_logprobs(CtxProvider{}, seq, plan_chunks(16, 8, 4), c);
    // chunk [0,8): 1..5 then doc b restarts at 6; chunk [4,12) scores 8..11 from 6; chunk [8,16) from 8.
    const std::vector<std::size_t> expect{1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5, 4, 5, 6, 7};
    for (std::size_t i = 1; i < 16; ++i) EXPECT_EQ(decode_ctx(lp.values[i - 1]), expect[i - 1]) << i;
}

TEST(Scoring, NonWindowedProviderMatchesWindowedOne) {
    portable_rng rng(8);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 20 + rng.below(60);
        const std::size_t short_len = 2 + rng.below(8);
        const std::size_t long_len = short_len + 1 + rng.below(n - short_len);
        auto c = cfg(short_len, std::min(long_len, n));
        if (c.long_len <= c.short_len) continue;
        c.overlap = 1 + rng.below(short_len - 1);
        const auto seq = make_seq(n);
        const auto a = score_sequence(CtxProvider{}, seq, c);
        const auto b = score_sequence(PlainCtxUncond{}, seq, c);
        ASSERT_EQ(a.tokens.size(), b.tokens.size());
        for (std::size_t i = 0; i < a.tokens.size(); ++i) {
            ASSERT_EQ(a.tokens[i].lp_long, b.tokens[i].lp_long) << "trial " << trial << " pos " << i;
            ASSERT_EQ(a.tokens[i].lp_short, b.tokens[i].lp_short);
        }
        EXPECT_EQ(a.summary.score, b.summary.score);
    }
}

TEST(Scoring, ContextIndependentProviderScoresZero) {
    const auto seq = make_seq(64);
    const auto r = score_sequence(BigramProvider{}, seq, cfg(8, 64));
    EXPECT_EQ(r.summary.n_scored, 63u);
    EXPECT_EQ(r.summary.score, 0.0);
    for (const auto& t : r.tokens) EXPECT_EQ(t.gain, 0.0);
}

TEST(Scoring, CacheModelRewardsLongRangeRepetition) {
    PackedSequence seq;
    seq.seq_id = "rep";
    portable_rng rng(4);
    std::vector<token_id> motif(40);
    for (auto& t : motif) t = static_cast<token_id>(rng.below(200));
    for (int r = 0; r < 8; ++r) seq.tokens.insert(seq.tokens.end(), motif.begin(), motif.end());
    seq.spans = {{"d", 0, seq.tokens.size()}};
    TokenizedDoc train{"t", "s", std::vector<token_id>(2000), "byte256"};
    for (auto& t : train.tokens) t = static_cast<token_id>(rng.below(200));
    const auto model = CacheNGramModel::fit({train}, 256, {});
    // Chunks shorter than the motif never see the repeat; the long context does.
    const auto r = score_sequence(model, seq, cfg(32, 320, 16));
    EXPECT_GT(r.summary.score, 0.05);
}

TEST(Scoring, ProviderFaultsCarryTheSequenceId) {
    const auto seq = make_seq(16);
    const auto c = cfg(8, 16);
    try {
        score_sequence(ShortReplyProvider{}, seq, c);
        FAIL();
    } catch (const protocol_error& e) {
        EXPECT_NE(std::string(e.what()).find("seq-x"), std::string::npos);
    }
    EXPECT_THROW(score_sequence(PositiveProvider{}, seq, c), protocol_error);
    try {
        score_sequence(FailingProvider{}, seq, c);
        FAIL();
    } catch (const transport_error& e) {
        EXPECT_NE(std::string(e.what()).find("seq-x"), std::string::npos);
        EXPECT_EQ(e.attempts(), 3u);
    }
}

TEST(Scoring, ConfigValidation) {
    EXPECT_THROW(cfg(16, 16).validate(64), config_error);
    EXPECT_THROW(cfg(8, 128).validate(64), config_error);
    EXPECT_THROW(cfg(8, 32, 8).validate(64), config_error);
    auto c = cfg(8, 32);
    c.chunk_len = 100;
    EXPECT_THROW(c.validate(64), config_error);
    EXPECT_NO_THROW(cfg(8, 64).validate(64));
    EXPECT_EQ(cfg(8, 64).overlap_len(), 4u);
}
