#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "longfilter/pipeline.hpp"

namespace lf = longfilter;

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::size_t> workers;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_config) {
    auto* opt = cmd->add_option("--config", f.config, "pipeline config file (JSON)")->envname("LONGFILTER_CONFIG");
    if (needs_config) opt->required();
    cmd->add_option("--workers", f.workers, "worker threads")->envname("LONGFILTER_WORKERS");
    cmd->add_option("--seed", f.seed, "random seed")->envname("LONGFILTER_SEED");
    cmd->add_option("--out", f.out, "output directory")->envname("LONGFILTER_OUT");
}

lf::PipelineConfig resolve(const CommonFlags& f) {
    auto cfg = lf::load_config(f.config);
    if (f.workers) cfg.workers = *f.workers;
    if (f.seed) cfg.seed = *f.seed;
    if (f.out) cfg.out = std::filesystem::absolute(*f.out).lexically_normal();
    return cfg;
}

int serve(const std::string& model_path, const std::string& host, int port, std::size_t max_context) {
    // Block the shutdown signals before the server threads start so that only
    // sigwait below sees them.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    auto model = std::make_shared<const lf::CacheNGramModel>(lf::CacheNGramModel::load(model_path));
    auto server = lf::serve_mock(model, host, port, lf::MockServeOptions{max_context});
    std::cout << "listening on " << server->url() << std::endl;

    int sig = 0;
    sigwait(&signals, &sig);
    std::cerr << "received signal " << sig << ", shutting down\n";
    server->stop();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LongFilter: score and select long-context training data"};
    app.set_version_flag("--version", std::string(lf::version));
    app.require_subcommand(1);

    CommonFlags fit_flags, score_flags, select_flags, report_flags;
    auto* fit = app.add_subcommand("fit", "fit the built-in cache n-gram model on the corpus");
    add_common(fit, fit_flags, true);

    auto* score = app.add_subcommand("score", "pack the corpus and score every sequence (resumable)");
    add_common(score, score_flags, true);
    bool sidecars = false;
    score->add_flag("--sidecars", sidecars, "also write per-token sidecar files");

    auto* select = app.add_subcommand("select", "rank scored sequences and write the selection and mixture");
    add_common(select, select_flags, true);

    auto* report = app.add_subcommand("report", "render token heatmaps from per-token sidecars");
    add_common(report, report_flags, true);
    std::vector<std::string> report_ids;
    report->add_option("seq_ids", report_ids, "sequences to render (default: every sidecar)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    CommonFlags synth_flags;
    add_common(synth, synth_flags, false);
    std::string kind = "markov";
    std::size_t count = 10;
    lf::synth::SynthSpec spec;
    synth->add_option("--kind", kind, "markov, recall or repeat")->required();
    synth->add_option("--count", count, "number of documents");
    synth->add_option("--length", spec.length, "tokens per document");
    synth->add_option("--markov-order", spec.markov.order);
    synth->add_option("--markov-alphabet", spec.markov.alphabet);
    synth->add_option("--markov-branching", spec.markov.branching);
    synth->add_option("--transition-seed", spec.markov.transition_seed);
    synth->add_option("--n-keys", spec.recall.n_keys);
    synth->add_option("--key-len", spec.recall.key_len);
    synth->add_option("--value-len", spec.recall.value_len);
    synth->add_option("--queries-per-key", spec.recall.queries_per_key);
    synth->add_option("--min-query-distance", spec.recall.min_query_distance);
    synth->add_option("--short-len", spec.recall.short_len, "short context the recall queries must escape");
    synth->add_option("--period", spec.repeat.period);
    synth->add_option("--chunk-len", spec.repeat.chunk_len, "chunk length the repeat period must stay below");

    auto* mock = app.add_subcommand("mock-serve", "serve a fitted model over the logprob protocol");
    CommonFlags mock_flags;
    add_common(mock, mock_flags, false);
    std::string model_path, host = "127.0.0.1";
    int port = 8910;
    std::size_t max_context = std::size_t{1} << 20;
    mock->add_option("--model", model_path, "model file (default: the config's model.file)");
    mock->add_option("--host", host);
    mock->add_option("--port", port, "0 picks a free port");
    mock->add_option("--max-context", max_context);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*fit) return lf::cmd_fit(resolve(fit_flags), std::cerr);
        if (*score) {
            auto cfg = resolve(score_flags);
            if (sidecars) cfg.sidecars = true;
            return lf::cmd_score(cfg, std::cerr);
        }
        if (*select) return lf::cmd_select(resolve(select_flags), std::cerr);
        if (*report) return lf::cmd_report(resolve(report_flags), report_ids, std::cerr);
        if (*synth) {
            spec.kind = lf::synth::parse_kind(kind);
            const std::uint64_t seed = synth_flags.seed.value_or(0);
            const std::filesystem::path out = synth_flags.out.value_or(".");
            lf::cmd_synth(spec, seed, count, out, std::cerr);
            return 0;
        }
        if (*mock) {
            if (model_path.empty()) {
                if (mock_flags.config.empty()) throw lf::config_error("mock-serve needs --model or --config");
                model_path = lf::load_config(mock_flags.config).model_file.string();
            }
            return serve(model_path, host, port, max_context);
        }
    } catch (const lf::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
