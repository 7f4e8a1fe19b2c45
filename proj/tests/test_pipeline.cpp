#include <gtest/gtest.h>

#include <atomic>
#include <sstream>

#include <json.hpp>

#include "longfilter/pipeline.hpp"
#include "test_util.hpp"

using namespace longfilter;
using longfilter::testing::read_file;
using longfilter::testing::TempDir;
using longfilter::testing::write_file;

namespace {

// A small corpus with long synthetic documents and a handful of short notes,
// plus a config pointing at it.
struct Fixture {
    TempDir dir;
    std::filesystem::path config_path;

    Fixture() {
        synth::SynthSpec spec;
        spec.kind = synth::Kind::markov;
        spec.length = 2048;
        std::ostringstream log;
        cmd_synth(spec, 1, 6, dir / "corpus", log);
        std::string notes;
        for (int i = 0; i < 5; ++i) {
            notes += "{\"doc_id\": \"note-" + std::to_string(i) + "\", \"source\": \"notes\", \"text\": \"short note " +
                     std::to_string(i) + "\"}\n";
        }
        write_file(dir / "corpus/notes.jsonl", notes);
        config_path = dir / "config.json";
        write_config({});
    }

    void write_config(const nlohmann::json& patch) {
        nlohmann::json j = {
            {"schema_version", 1},
            {"corpus", {{"paths", {"corpus"}}, {"format", "jsonl"}}},
            {"pack_len", 1024},
            {"length_thresholds", nlohmann::json::object()},
            {"scoring", {{"short_len", 64}, {"long_len", 1024}}},
            {"model", {{"file", "model.lfm"}}},
            {"keep_fraction", 0.25},
            {"long_fraction", 0.6},
            {"out", "out"},
            {"seed", 3},
        };
        if (!patch.is_null()) j.merge_patch(patch);
        write_file(config_path, j.dump(2));
    }

    PipelineConfig config() const { return load_config(config_path); }
};

std::string quiet_fit(const PipelineConfig& cfg) {
    std::ostringstream log;
    EXPECT_EQ(cmd_fit(cfg, log), 0) << log.str();
    return log.str();
}

}  // namespace

TEST(Config, DefaultsMatchTheReferenceSetup) {
    const auto c = config_from_json({{"schema_version", 1}});
    EXPECT_EQ(c.pack_len, 65536u);
    EXPECT_EQ(c.scoring.short_len, 4096u);
    EXPECT_EQ(c.scoring.long_len, 65536u);
    EXPECT_EQ(c.scoring.chunk(), 4096u);
    EXPECT_EQ(c.scoring.overlap_len(), 2048u);
    EXPECT_EQ(c.keep_fraction, 0.2);
    EXPECT_EQ(c.long_fraction, 0.8);
    EXPECT_EQ(c.threshold_for("arxiv"), 16384u);
    EXPECT_EQ(c.threshold_for("book"), 65536u);
    EXPECT_EQ(c.threshold_for("commoncrawl"), 32768u);
    EXPECT_EQ(c.threshold_for("other"), 65536u);
    EXPECT_FALSE(c.scoring.mask_doc_boundaries);
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, RelativePathsResolveAgainstTheConfigFile) {
    Fixture f;
    const auto c = f.config();
    EXPECT_EQ(c.corpus.paths.at(0), (f.dir / "corpus").lexically_normal());
    EXPECT_EQ(c.model_file, (f.dir / "model.lfm").lexically_normal());
    EXPECT_EQ(c.out, (f.dir / "out").lexically_normal());
}

TEST(Config, RejectsBadFiles) {
    EXPECT_THROW(config_from_json({{"schema_version", 2}}), config_error);
    EXPECT_THROW(config_from_json({{"schema_version", 1}, {"pakc_len", 5}}), config_error);
    EXPECT_THROW(config_from_json({{"schema_version", 1}, {"pack_len", "big"}}), config_error);
    EXPECT_THROW(config_from_json({{"schema_version", 1}, {"backend", {{"kind", "gpu"}}}}), config_error);
    auto c = config_from_json({{"schema_version", 1}, {"keep_fraction", 0.0}});
    EXPECT_THROW(c.validate(), config_error);
    c = config_from_json({{"schema_version", 1}, {"model", {{"order", 0}}}});
    EXPECT_THROW(c.validate(), config_error);
    EXPECT_THROW(load_config("/nonexistent/config.json"), config_error);
}

TEST(Config, DigestIgnoresExecutionSettings) {
    auto a = config_from_json({{"schema_version", 1}});
    auto b = a;
    b.workers = 8;
    b.out = "/elsewhere";
    b.sidecars = true;
    EXPECT_EQ(config_digest(a), config_digest(b));
    b.keep_fraction = 0.3;
    EXPECT_NE(config_digest(a), config_digest(b));
    b = a;
    b.scoring.overlap = 100;
    EXPECT_NE(config_digest(a), config_digest(b));
    EXPECT_EQ(config_digest(a).size(), 16u);
}

TEST(Config, DigestFollowsModelFileContents) {
    Fixture f;
    auto c = f.config();
    quiet_fit(c);
    const auto d1 = config_digest(c);
    auto other = c;
    other.model.add_k = 0.5;
    quiet_fit(other);
    // The params changed too, but so did the file; refitting the original restores the digest.
    EXPECT_NE(config_digest(c), d1);
    quiet_fit(c);
    EXPECT_EQ(config_digest(c), d1);
}

TEST(Fit, RefitIsByteIdenticalAndReloads) {
    Fixture f;
    const auto c = f.config();
    const auto log = quiet_fit(c);
    EXPECT_NE(log.find("synth-markov"), std::string::npos);
    const auto first = read_file(c.model_file);
    quiet_fit(c);
    EXPECT_EQ(read_file(c.model_file), first);
    const auto m = CacheNGramModel::load(c.model_file);
    EXPECT_EQ(m.order(), 3u);
    EXPECT_EQ(m.vocab_size(), 256u);
}

TEST(Fit, InvalidOrderIsAConfigError) {
    Fixture f;
    f.write_config({{"model", {{"order", 0}}}});
    std::ostringstream log;
    EXPECT_THROW(cmd_fit(f.config(), log), config_error);
}

TEST(Score, RequiresAFittedModel) {
    Fixture f;
    std::ostringstream log;
    EXPECT_THROW(cmd_score(f.config(), log), config_error);
}

TEST(Pipeline, WorkerCountDoesNotChangeOutputs) {
    Fixture f;
    auto c = f.config();
    quiet_fit(c);
    std::ostringstream log;
    auto serial = c;
    serial.out = f.dir / "out1";
    serial.workers = 1;
    auto parallel = c;
    parallel.out = f.dir / "out8";
    parallel.workers = 8;
    ASSERT_EQ(cmd_score(serial, log), 0) << log.str();
    ASSERT_EQ(cmd_score(parallel, log), 0) << log.str();
    ASSERT_EQ(cmd_select(serial, log), 0);
    ASSERT_EQ(cmd_select(parallel, log), 0);
    for (const char* name : {layout::scores, layout::selection, layout::mixture, layout::packed}) {
        EXPECT_EQ(read_file(serial.out / name), read_file(parallel.out / name)) << name;
    }
    const auto scores = read_file(serial.out / layout::scores);
    EXPECT_EQ(std::count(scores.begin(), scores.end(), '\n'), 12);
    // keep 0.25 of 12 sequences.
    EXPECT_EQ(nlohmann::json::parse(read_lines(serial.out / layout::selection)[0])["n_selected"], 3);
    // Three long sequences and two short notes at long_fraction 0.6.
    EXPECT_EQ(nlohmann::json::parse(read_lines(serial.out / layout::mixture)[0])["n_schedule"], 5);
    EXPECT_FALSE(std::filesystem::exists(serial.out / layout::journal));
}

TEST(Pipeline, ShortDocumentsGoToTheShortPool) {
    Fixture f;
    auto c = f.config();
    quiet_fit(c);
    std::ostringstream log;
    ASSERT_EQ(cmd_score(c, log), 0);
    const auto pool = read_lines(c.out / layout::short_pool);
    ASSERT_EQ(pool.size(), 5u);
    EXPECT_EQ(nlohmann::json::parse(pool[0])["doc_id"], "note-0");
    const auto packed = read_lines(c.out / layout::packed);
    for (const auto& line : packed) {
        for (const auto& span : nlohmann::json::parse(line)["spans"]) {
            EXPECT_EQ(span["doc_id"].get<std::string>().rfind("markov-", 0), 0u);
        }
    }
}

TEST(Pipeline, ScoreResumesAfterInterruption) {
    Fixture f;
    auto c = f.config();
    quiet_fit(c);
    std::ostringstream log;
    ASSERT_EQ(cmd_score(c, log), 0);
    const auto complete = read_file(c.out / layout::scores);

    // Pretend the run died after five sequences, mid-write of a sixth.
    const auto lines = read_lines(c.out / layout::scores);
    std::string partial;
    for (std::size_t i = 0; i < 5; ++i) partial += lines[i] + "\n";
    partial += lines[5].substr(0, 20);
    std::filesystem::remove(c.out / layout::scores);
    write_file(c.out / layout::journal, partial);

    const auto s = run_score(c, log);
    EXPECT_EQ(s.resumed, 5u);
    EXPECT_EQ(s.scored, 7u);
    EXPECT_EQ(read_file(c.out / layout::scores), complete);

    // A completed run is a no-op.
    const auto again = run_score(c, log);
    EXPECT_EQ(again.scored, 0u);
    EXPECT_EQ(read_file(c.out / layout::scores), complete);
}

TEST(Pipeline, ResumeRefusesADifferentConfiguration) {
    Fixture f;
    auto c = f.config();
    quiet_fit(c);
    std::ostringstream log;
    ASSERT_EQ(cmd_score(c, log), 0);
    c.scoring.overlap = 16;
    try {
        cmd_score(c, log);
        FAIL();
    } catch (const config_error& e) {
        EXPECT_NE(std::string(e.what()).find("digest"), std::string::npos);
    }
    EXPECT_THROW(cmd_select(c, log), config_error);
}

TEST(Pipeline, SelectNeedsScores) {
    Fixture f;
    auto c = f.config();
    quiet_fit(c);
    std::ostringstream log;
    try {
        cmd_select(c, log);
        FAIL();
    } catch (const io_error& e) {
        EXPECT_NE(std::string(e.what()).find("score"), std::string::npos);
    }
}

TEST(Pipeline, ReportsFromSidecars) {
    Fixture f;
    auto c = f.config();
    quiet_fit(c);
    std::ostringstream log;
    ASSERT_EQ(cmd_score(c, log), 0);
    try {
        cmd_report(c, {"seq-00000000"}, log);
        FAIL();
    } catch (const io_error& e) {
        EXPECT_NE(std::string(e.what()).find("sidecars"), std::string::npos);
    }
    // Enabling sidecars later rescans only what is missing.
    c.sidecars = true;
    const auto s = run_score(c, log);
    EXPECT_EQ(s.scored, 12u);
    ASSERT_EQ(cmd_report(c, {"seq-00000003"}, log), 0);
    const auto html = c.out / layout::report / "seq-00000003.html";
    const auto first = read_file(html);
    EXPECT_NE(first.find("<span"), std::string::npos);
    ASSERT_EQ(cmd_report(c, {"seq-00000003"}, log), 0);
    EXPECT_EQ(read_file(html), first);
    const auto tokens = read_lines(c.out / layout::report / "seq-00000003.tokens.jsonl");
    EXPECT_EQ(tokens.size(), 1024u);  // header + 1023 scored tokens
    EXPECT_TRUE(std::filesystem::exists(c.out / layout::report / "seq-00000003.svg"));
}

TEST(Pipeline, RemoteBackendMatchesBuiltin) {
    Fixture f;
    auto c = f.config();
    c.sidecars = true;
    quiet_fit(c);
    std::ostringstream log;
    ASSERT_EQ(cmd_score(c, log), 0);

    auto model = std::make_shared<const CacheNGramModel>(CacheNGramModel::load(c.model_file));
    auto server = serve_mock(model, "127.0.0.1", 0);
    auto remote = c;
    remote.backend.kind = BackendKind::remote;
    remote.backend.endpoint = server->url();
    remote.out = f.dir / "out-remote";
    remote.workers = 4;
    ASSERT_EQ(cmd_score(remote, log), 0) << log.str();

    const auto a = read_lines(c.out / layout::scores);
    const auto b = read_lines(remote.out / layout::scores);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto ja = nlohmann::json::parse(a[i]);
        const auto jb = nlohmann::json::parse(b[i]);
        EXPECT_EQ(ja["seq_id"], jb["seq_id"]);
        EXPECT_NEAR(ja["score"].get<double>(), jb["score"].get<double>(), 1e-9);
    }
}

TEST(Pipeline, RemoteFailuresAreSummarizedAndResumable) {
    Fixture f;
    auto c = f.config();
    quiet_fit(c);
    auto model = std::make_shared<const CacheNGramModel>(CacheNGramModel::load(c.model_file));
    std::atomic<bool> healthy{false};
    // While unhealthy, full-sequence requests starting with an even token fail.
    MockServer server(
        [&](std::span<const token_id> t, std::size_t a, std::size_t b) {
            if (!healthy && t.size() == 1024 && t[0] % 2 == 0) throw error("backend overloaded");
            return model->logprobs(t, a, b);
        },
        RemoteInfo{256, 1u << 20, "byte256"});
    server.bind("127.0.0.1", 0);
    server.start();
    auto remote = c;
    remote.backend.kind = BackendKind::remote;
    remote.backend.endpoint = server.url();

    std::ostringstream log;
    const auto first = run_score(remote, log);
    EXPECT_GT(first.failed, 0u);
    EXPECT_EQ(first.failed + first.scored, 12u);
    EXPECT_EQ(cmd_score(remote, log), 1);
    EXPECT_NE(log.str().find("backend overloaded"), std::string::npos);
    EXPECT_FALSE(std::filesystem::exists(remote.out / layout::scores));

    healthy = true;
    const auto second = run_score(remote, log);
    EXPECT_EQ(second.failed, 0u);
    EXPECT_EQ(second.resumed, first.scored);
    EXPECT_TRUE(std::filesystem::exists(remote.out / layout::scores));
}

TEST(Masking, DocumentTokensScoreAsIfStandalone) {
    Fixture f;
    auto c = f.config();
    quiet_fit(c);
    const auto model = CacheNGramModel::load(c.model_file);
    portable_rng rng(2);
    std::vector<token_id> a(300), b(400);
    for (auto& t : a) t = static_cast<token_id>('A' + rng.below(16));
    for (auto& t : b) t = static_cast<token_id>('A' + rng.below(16));
    PackedSequence seq{"m", a, {{"a", 0, 300}, {"b", 300, 700}}};
    seq.tokens.insert(seq.tokens.end(), b.begin(), b.end());
    ScoringConfig cfg;
    cfg.short_len = 64;
    cfg.long_len = 700;
    cfg.mask_doc_boundaries = true;
    const auto masked = long_logprobs(model, seq, cfg);
    const auto alone = model.logprobs(b, 1, b.size());
    EXPECT_NEAR(masked.values[300 - 1], model.unconditional_logprob(b[0]), 1e-15);
    for (std::size_t k = 1; k < b.size(); ++k) {
        ASSERT_NEAR(masked.values[300 + k - 1], alone[k - 1], 1e-12) << k;
    }
    cfg.mask_doc_boundaries = false;
    const auto open = long_logprobs(model, seq, cfg);
    EXPECT_NE(open.values[300], masked.values[300]);
}
