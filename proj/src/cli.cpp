#include "unifar/cli.hpp"

#include "unifar/attention_export.hpp"
#include "unifar/data.hpp"
#include "unifar/error.hpp"
#include "unifar/evaluation.hpp"
#include "unifar/io.hpp"
#include "unifar/model.hpp"
#include "unifar/retrieval.hpp"
#include "unifar/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <functional>
#include <iostream>
#include <memory>
#include <optional>

namespace unifar::cli {

using nlohmann::json;

namespace {

const std::vector<std::string>& data_keys() {
    static const std::vector<std::string> keys{"max_positives",   "min_words",        "max_words",
                                               "retry_attempts",  "retry_base_delay_ms", "rate_limit_ms",
                                               "fuzzy_threshold", "llm_model",        "llm_base_url",
                                               "prompts_dir",     "max_partial_rate"};
    return keys;
}

const std::vector<std::string>& eval_keys() {
    static const std::vector<std::string> keys{"metrics", "mode", "strategy", "min_relevant_grade", "k"};
    return keys;
}

// Any library error raised while interpreting flags or config is a usage error.
template <typename F>
auto as_usage(F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::kConfigError) throw;
        throw Error(ErrorKind::kConfigError, e.detail());
    }
}

struct Common {
    std::string config;
    std::uint64_t seed = 42;
    bool seed_given = false;
};

io::KeyValueConfig load_config(const Common& c) {
    if (c.config.empty()) return {};
    io::KeyValueConfig cfg = io::KeyValueConfig::load(c.config);
    cfg.reject_unknown(config_keys());
    return cfg;
}

void write_json(const std::string& path, const json& j, std::ostream& out) {
    const std::string text = j.dump(2) + "\n";
    if (path.empty() || path == "-") {
        out << text;
    } else {
        io::write_file_atomic(path, text);
    }
}

std::vector<std::string> vocab_texts(const std::vector<FacetTrainingUnit>& ftus) {
    std::vector<std::string> out;
    auto add = [&](const LabeledDocument& d) {
        if (d.title) out.push_back(*d.title);
        out.insert(out.end(), d.sentences.begin(), d.sentences.end());
    };
    for (const auto& f : ftus) {
        add(f.query_doc);
        for (const auto* side : {&f.pos, &f.neg}) {
            for (const auto& [k, docs] : *side) {
                for (const auto& d : docs) add(d);
            }
        }
        for (const auto& [k, q] : f.questions) out.push_back(q);
    }
    return out;
}

json checkpoint_metadata(const UnifarModel& model, const std::string& path) {
    return json{{"checkpoint", path}, {"model", model.config().to_json()}};
}

// ---- build-data -----------------------------------------------------------------------

struct BuildDataArgs {
    Common common;
    std::string triplets, corpus, out, quarantine, stats, mock, record, prompts;
    std::optional<double> max_partial_rate;
};

int cmd_build_data(const BuildDataArgs& a, std::ostream& out, std::ostream& err) {
    const io::KeyValueConfig cfg = load_config(a.common);
    BuildOptions opts;
    double max_partial = 0.05;
    std::optional<HttpLlmOptions> http;
    as_usage([&] {
        opts.question.max_positives = static_cast<std::size_t>(cfg.get_int("max_positives", 3));
        opts.question.min_words = static_cast<std::size_t>(cfg.get_int("min_words", 25));
        opts.question.max_words = static_cast<std::size_t>(cfg.get_int("max_words", 50));
        opts.retry.max_attempts = static_cast<int>(cfg.get_int("retry_attempts", 3));
        opts.retry.base_delay = std::chrono::milliseconds(cfg.get_int("retry_base_delay_ms", 500));
        opts.retry.min_interval = std::chrono::milliseconds(cfg.get_int("rate_limit_ms", 0));
        opts.fuzzy_threshold = cfg.get_double("fuzzy_threshold", 0.9);
        if (opts.retry.max_attempts < 1) throw Error(ErrorKind::kConfigError, "retry_attempts must be >= 1");
        max_partial = a.max_partial_rate.value_or(cfg.get_double("max_partial_rate", 0.05));
        const std::string prompts = a.prompts.empty() ? cfg.get_string("prompts_dir", "") : a.prompts;
        if (!prompts.empty()) opts.prompts = PromptTemplates::load(prompts);
    });

    std::unique_ptr<LlmClient> llm;
    if (!a.mock.empty()) {
        llm = std::make_unique<ReplayLlmClient>(ReplayLlmClient::from_file(a.mock));
        // Replayed answers gain nothing from waiting.
        opts.retry.base_delay = std::chrono::milliseconds(0);
    } else {
        http = HttpLlmOptions::from_env();
        if (!http) {
            throw Error(ErrorKind::kConfigError,
                        "no LLM available: pass --mock-transcript or set UNIFAR_LLM_API_KEY");
        }
        http->model = cfg.get_string("llm_model", http->model);
        http->base_url = cfg.get_string("llm_base_url", http->base_url);
        http->retry = opts.retry;
        llm = std::make_unique<HttpLlmClient>(*http);
    }
    std::unique_ptr<RecordingLlmClient> recorder;
    LlmClient* client = llm.get();
    if (!a.record.empty()) {
        recorder = std::make_unique<RecordingLlmClient>(*llm);
        client = recorder.get();
    }

    const auto triplets = read_triplet_file(a.triplets, opts.facet_keys);
    const auto corpus = read_corpus_file(a.corpus);
    const BuildResult result = build_ftus(triplets, corpus, *client, opts);
    if (recorder) recorder->save(a.record);

    write_ftu_file(a.out, result.ftus);
    write_ftu_file(a.quarantine.empty() ? a.out + ".quarantine.jsonl" : a.quarantine, result.quarantined);
    json metadata{{"triplets", a.triplets},
                  {"corpus", a.corpus},
                  {"llm", a.mock.empty() ? "http:" + http->model : "replay:" + a.mock},
                  {"max_positives", opts.question.max_positives},
                  {"min_words", opts.question.min_words},
                  {"max_words", opts.question.max_words},
                  {"retry_attempts", opts.retry.max_attempts},
                  {"fuzzy_threshold", opts.fuzzy_threshold},
                  {"max_partial_rate", max_partial}};
    const json stats{{"metadata", metadata}, {"stats", corpus_stats(result.ftus, opts.facet_keys).to_json()},
                     {"build", result.report_json()}};
    write_json(a.stats.empty() ? a.out + ".stats.json" : a.stats, stats, out);
    out << "wrote " << result.ftus.size() << " FTUs (" << result.quarantined.size() << " quarantined) to " << a.out
        << "\n";
    for (const auto& w : result.length_warnings) err << "warning: question length outside range for " << w << "\n";
    if (result.partial_rate() > max_partial) {
        err << "error: partial rate " << result.partial_rate() << " exceeds --max-partial-rate " << max_partial << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

// ---- train ----------------------------------------------------------------------------

struct TrainArgs {
    Common common;
    std::string ftus, out, loss_log;
    std::optional<double> lambda_start, lambda_end;
    std::optional<std::size_t> max_steps;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream&) {
    const io::KeyValueConfig cfg = load_config(a.common);
    ModelConfig mc;
    TrainConfig tc;
    as_usage([&] {
        mc = ModelConfig::from_config(cfg);
        tc = TrainConfig::from_config(cfg);
        if (a.common.seed_given) mc.seed = tc.seed = a.common.seed;
        if (a.lambda_start) tc.lambda_start = *a.lambda_start;
        if (a.lambda_end) tc.lambda_end = *a.lambda_end;
        if (a.max_steps) tc.max_steps = *a.max_steps;
        tc.validate();
    });
    const auto ftus = read_ftu_file(a.ftus, true, tc.facet_keys, mc.facet_names);
    auto texts = vocab_texts(ftus);
    texts.insert(texts.end(), mc.facet_names.begin(), mc.facet_names.end());
    UnifarModel model(mc, WordTokenizer::build(texts));

    std::string log;
    const TrainResult result = train(model, ftus, tc, [&](const StepLog& s) { log += s.to_json().dump() + "\n"; });
    json metadata{{"train", tc.to_json()},
                  {"ftu_file", a.ftus},
                  {"ftu_count", ftus.size()},
                  {"total_steps", result.total_steps}};
    if (!result.history.empty()) metadata["final_total_loss"] = result.history.back().total;
    model.save(a.out, metadata);
    const std::filesystem::path log_path =
        a.loss_log.empty() ? std::filesystem::path(a.out) / "loss_log.jsonl" : std::filesystem::path(a.loss_log);
    io::write_file_atomic(log_path, log);
    out << "trained " << result.total_steps << " steps on " << ftus.size() << " FTUs; checkpoint " << a.out << "\n";
    return kExitOk;
}

// ---- embed / index / search -------------------------------------------------------------

std::vector<std::pair<std::string, InputSequence>> read_inputs(const std::string& corpus, const std::string& queries) {
    std::vector<std::pair<std::string, InputSequence>> out;
    if (!corpus.empty()) {
        for (const auto& [id, doc] : read_corpus_file(corpus)) out.emplace_back(id, doc.sequence());
    }
    if (!queries.empty()) {
        for (const auto& q : read_query_file(queries)) out.emplace_back(q.id, q.sequence());
    }
    return out;
}

json embedding_line(const FacetRepresentation& rep, const std::vector<std::string>& names) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < rep.embeddings.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < rep.embeddings.cols(); ++c) row.push_back(rep.embeddings(r, c));
        rows.push_back(row);
    }
    return json{{"id", rep.input_id},
                {"branch", branch_name(rep.branch)},
                {"facet_names", names},
                {"embeddings", rows}};
}

struct EmbedArgs {
    Common common;
    std::string checkpoint, corpus, queries, out;
};

int cmd_embed(const EmbedArgs& a, std::ostream& out, std::ostream&) {
    if (a.corpus.empty() == a.queries.empty()) throw Error(ErrorKind::kConfigError, "pass exactly one of --corpus and --queries");
    const UnifarModel model = UnifarModel::load(a.checkpoint);
    std::string text;
    for (const auto& [id, seq] : read_inputs(a.corpus, a.queries)) {
        text += embedding_line(model.embed(seq, id), model.config().facet_names).dump() + "\n";
    }
    if (a.out.empty() || a.out == "-") {
        out << text;
    } else {
        io::write_file_atomic(a.out, text);
    }
    return kExitOk;
}

struct IndexArgs {
    Common common;
    std::string checkpoint, corpus, embeddings, out, similarity;
};

int cmd_index(const IndexArgs& a, std::ostream& out, std::ostream&) {
    const io::KeyValueConfig cfg = load_config(a.common);
    const SimilarityKind kind =
        as_usage([&] { return parse_similarity_kind(a.similarity.empty() ? cfg.get_string("similarity", "cosine") : a.similarity); });
    std::vector<FacetRepresentation> reps;
    std::vector<std::string> names = kDefaultFacetNames;
    if (!a.embeddings.empty()) {
        if (!a.checkpoint.empty() || !a.corpus.empty()) {
            throw Error(ErrorKind::kConfigError, "--embeddings excludes --checkpoint/--corpus");
        }
        for (const std::string& line : io::read_lines(a.embeddings)) {
            if (line.find_first_not_of(" \t") == std::string::npos) continue;
            const json j = json::parse(line);
            FacetRepresentation rep;
            rep.input_id = j.at("id").get<std::string>();
            rep.branch = parse_branch(j.at("branch").get<std::string>());
            names = j.at("facet_names").get<std::vector<std::string>>();
            const auto rows = j.at("embeddings").get<std::vector<std::vector<double>>>();
            rep.embeddings.resize(static_cast<Eigen::Index>(rows.size()),
                                  rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
            for (std::size_t r = 0; r < rows.size(); ++r) {
                if (rows[r].size() != static_cast<std::size_t>(rep.embeddings.cols())) {
                    throw Error(ErrorKind::kShapeMismatch, "ragged embedding rows for \"" + rep.input_id + "\"");
                }
                for (std::size_t c = 0; c < rows[r].size(); ++c) {
                    rep.embeddings(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
                }
            }
            reps.push_back(std::move(rep));
        }
    } else {
        if (a.checkpoint.empty() || a.corpus.empty()) {
            throw Error(ErrorKind::kConfigError, "pass --embeddings, or --checkpoint with --corpus");
        }
        const UnifarModel model = UnifarModel::load(a.checkpoint);
        names = model.config().facet_names;
        for (const auto& [id, seq] : read_inputs(a.corpus, "")) reps.push_back(model.embed(seq, id));
    }
    const FacetIndex index = FacetIndex::build(reps, kind, names);
    index.save(a.out);
    out << "indexed " << index.size() << " candidates (" << similarity_kind_name(kind) << ") to " << a.out << "\n";
    return kExitOk;
}

struct SearchArgs {
    Common common;
    std::string checkpoint, index, query, queries, strategy, out;
    std::optional<std::size_t> k;
};

int cmd_search(const SearchArgs& a, std::ostream& out, std::ostream&) {
    if (a.query.empty() == a.queries.empty()) throw Error(ErrorKind::kConfigError, "pass exactly one of --query and --queries");
    const io::KeyValueConfig cfg = load_config(a.common);
    const UnifarModel model = UnifarModel::load(a.checkpoint);
    const FacetIndex index = FacetIndex::load(a.index);
    const std::size_t k = a.k.value_or(static_cast<std::size_t>(cfg.get_int("k", 10)));
    const ScoringStrategy strategy = as_usage([&] {
        return ScoringStrategy::parse(a.strategy.empty() ? cfg.get_string("strategy", "diag-mean") : a.strategy,
                                      index.facet_names());
    });
    if (k == 0) throw Error(ErrorKind::kConfigError, "--k must be >= 1");
    if (index.facet_count() != model.facet_count() || index.hidden_size() != model.hidden_size()) {
        throw Error(ErrorKind::kShapeMismatch, "index and checkpoint disagree on facet count or hidden size");
    }
    std::vector<std::pair<std::string, InputSequence>> inputs;
    if (!a.query.empty()) {
        inputs.emplace_back("query", segment_input(a.query, InputKind::kQuestion));
    } else {
        inputs = read_inputs("", a.queries);
    }
    json results = json::array();
    for (const auto& [id, seq] : inputs) {
        json hits = json::array();
        for (const SearchHit& h : index.search(model.embed(seq, id), strategy, k)) {
            hits.push_back({{"id", h.id}, {"score", h.score}});
        }
        results.push_back({{"query_id", id}, {"hits", hits}});
    }
    json metadata = checkpoint_metadata(model, a.checkpoint);
    metadata["index"] = a.index;
    metadata["strategy"] = strategy.name(index.facet_names());
    metadata["k"] = k;
    metadata["similarity"] = similarity_kind_name(index.similarity());
    write_json(a.out, json{{"metadata", metadata}, {"results", results}}, out);
    return kExitOk;
}

// ---- eval -----------------------------------------------------------------------------

struct EvalArgs {
    Common common;
    std::string checkpoint, index, queries, qrels, mode, strategy, metrics, out;
    std::optional<int> min_grade;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    const io::KeyValueConfig cfg = load_config(a.common);
    const FacetIndex index = FacetIndex::load(a.index);
    BenchmarkOptions opts;
    as_usage([&] {
        opts.mode = parse_benchmark_mode(a.mode.empty() ? cfg.get_string("mode", "corpus") : a.mode);
        opts.strategy = ScoringStrategy::parse(a.strategy.empty() ? cfg.get_string("strategy", "diag-mean") : a.strategy,
                                               index.facet_names());
        const std::string default_metrics =
            opts.mode == BenchmarkMode::kPooled ? "ndcg%20,map" : "recall@5,r-precision,map";
        opts.metrics = parse_metrics(a.metrics.empty() ? cfg.get_string("metrics", default_metrics) : a.metrics);
        opts.min_relevant_grade = a.min_grade.value_or(static_cast<int>(cfg.get_int("min_relevant_grade", 1)));
    });
    const UnifarModel model = UnifarModel::load(a.checkpoint);
    if (index.facet_count() != model.facet_count() || index.hidden_size() != model.hidden_size()) {
        throw Error(ErrorKind::kShapeMismatch, "index and checkpoint disagree on facet count or hidden size");
    }
    opts.extra_metadata = checkpoint_metadata(model, a.checkpoint);
    opts.extra_metadata["index"] = a.index;
    opts.extra_metadata["queries"] = a.queries;
    opts.extra_metadata["qrels"] = a.qrels;
    const auto queries = read_query_file(a.queries);
    const Qrels qrels = Qrels::load(a.qrels);
    const MetricReport report = run_benchmark(index, queries, qrels,
                                              [&](const BenchmarkQuery& q) { return model.embed(q.sequence(), q.id); }, opts);
    for (const auto& [id, missing] : report.skipped_missing) {
        err << "warning: skipped query " << id << " (" << missing.size() << " unknown candidates)\n";
    }
    write_json(a.out, report.to_json(), out);
    return kExitOk;
}

// ---- attn-export ----------------------------------------------------------------------

struct AttnArgs {
    Common common;
    std::string checkpoint, text, corpus, id, out, svg;
};

int cmd_attn_export(const AttnArgs& a, std::ostream& out, std::ostream&) {
    if (a.text.empty() == a.corpus.empty()) throw Error(ErrorKind::kConfigError, "pass exactly one of --text and --corpus");
    if (!a.corpus.empty() && a.id.empty()) throw Error(ErrorKind::kConfigError, "--corpus needs --id");
    const UnifarModel model = UnifarModel::load(a.checkpoint);
    InputSequence seq;
    if (!a.text.empty()) {
        seq = segment_input(a.text, InputKind::kQuestion, std::nullopt, model.config().sentence_splitter);
    } else {
        const auto corpus = read_corpus_file(a.corpus);
        auto it = corpus.find(a.id);
        if (it == corpus.end()) throw Error(ErrorKind::kMissingCandidate, "no document \"" + a.id + "\" in " + a.corpus);
        seq = it->second.sequence();
    }
    const AttentionTable table = attention_table(model, seq);
    io::write_file_atomic(a.out, table.to_csv());
    if (!a.svg.empty()) io::write_file_atomic(a.svg, table.to_svg());
    out << branch_name(table.branch) << " branch, " << table.facets.size() << "x" << table.columns.size()
        << " attention written to " << a.out << "\n";
    return kExitOk;
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "random seed")->default_val(42);
}

}  // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto* list : {&ModelConfig::config_keys(), &TrainConfig::config_keys(), &data_keys(), &eval_keys()}) {
            for (const auto& key : *list) {
                if (std::find(k.begin(), k.end(), key) == k.end()) k.push_back(key);
            }
        }
        return k;
    }();
    return keys;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Facet-aware retrieval: data construction, training, indexing, search and evaluation."};
    app.name("unifar");
    app.require_subcommand(1);

    BuildDataArgs bd;
    auto* build = app.add_subcommand("build-data", "Build FTU files from facet triplets with LLM labeling");
    add_common(build, bd.common);
    build->add_option("--triplets", bd.triplets, "facet triplets (JSON Lines)")->required()->check(CLI::ExistingFile);
    build->add_option("--corpus", bd.corpus, "documents (JSON Lines)")->required()->check(CLI::ExistingFile);
    build->add_option("--out", bd.out, "output FTU file")->required();
    build->add_option("--quarantine", bd.quarantine, "partial FTUs (default <out>.quarantine.jsonl)");
    build->add_option("--stats", bd.stats, "statistics report (default <out>.stats.json)");
    build->add_option("--mock-transcript", bd.mock, "replay LLM answers from a transcript")->check(CLI::ExistingFile);
    build->add_option("--record-transcript", bd.record, "save every LLM exchange to this file");
    build->add_option("--prompts", bd.prompts, "directory of prompt templates")->check(CLI::ExistingDirectory);
    build->add_option("--max-partial-rate", bd.max_partial_rate, "fail when the quarantined fraction exceeds this")
        ->check(CLI::Range(0.0, 1.0));

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train a model on an FTU file");
    add_common(train_cmd, tr.common);
    train_cmd->add_option("--ftus", tr.ftus, "FTU file")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", tr.out, "checkpoint directory")->required();
    train_cmd->add_option("--loss-log", tr.loss_log, "loss log (default <out>/loss_log.jsonl)");
    train_cmd->add_option("--lambda-start", tr.lambda_start, "initial KL weight");
    train_cmd->add_option("--lambda-end", tr.lambda_end, "final KL weight");
    train_cmd->add_option("--max-steps", tr.max_steps, "cap on optimizer steps");

    EmbedArgs em;
    auto* embed_cmd = app.add_subcommand("embed", "Write facet embeddings as JSON Lines");
    add_common(embed_cmd, em.common);
    embed_cmd->add_option("--checkpoint", em.checkpoint)->required()->check(CLI::ExistingDirectory);
    embed_cmd->add_option("--corpus", em.corpus, "documents (JSON Lines)")->check(CLI::ExistingFile);
    embed_cmd->add_option("--queries", em.queries, "queries (JSON Lines)")->check(CLI::ExistingFile);
    embed_cmd->add_option("--out", em.out, "output file (default stdout)");

    IndexArgs ix;
    auto* index_cmd = app.add_subcommand("index", "Build a facet index");
    add_common(index_cmd, ix.common);
    index_cmd->add_option("--checkpoint", ix.checkpoint)->check(CLI::ExistingDirectory);
    index_cmd->add_option("--corpus", ix.corpus)->check(CLI::ExistingFile);
    index_cmd->add_option("--embeddings", ix.embeddings, "output of `embed`")->check(CLI::ExistingFile);
    index_cmd->add_option("--similarity", ix.similarity, "cosine or dot");
    index_cmd->add_option("--out", ix.out, "index file")->required();

    SearchArgs se;
    auto* search_cmd = app.add_subcommand("search", "Rank indexed candidates for queries");
    add_common(search_cmd, se.common);
    search_cmd->add_option("--checkpoint", se.checkpoint)->required()->check(CLI::ExistingDirectory);
    search_cmd->add_option("--index", se.index)->required()->check(CLI::ExistingFile);
    search_cmd->add_option("--query", se.query, "question text");
    search_cmd->add_option("--queries", se.queries, "queries (JSON Lines)")->check(CLI::ExistingFile);
    search_cmd->add_option("--strategy", se.strategy, "diag-mean or facet:<name>");
    search_cmd->add_option("--k", se.k, "hits per query");
    search_cmd->add_option("--out", se.out, "output file (default stdout)");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate retrieval against relevance judgments");
    add_common(eval_cmd, ev.common);
    eval_cmd->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--index", ev.index)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--queries", ev.queries)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--qrels", ev.qrels)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--mode", ev.mode, "corpus or pooled");
    eval_cmd->add_option("--strategy", ev.strategy, "diag-mean or facet:<name>");
    eval_cmd->add_option("--metrics", ev.metrics, "e.g. recall@5,r-precision,map,ndcg%20,mrr@10");
    eval_cmd->add_option("--min-grade", ev.min_grade, "lowest grade counted as relevant");
    eval_cmd->add_option("--out", ev.out, "report file (default stdout)");

    AttnArgs at;
    auto* attn_cmd = app.add_subcommand("attn-export", "Export facet attention weights for one input");
    add_common(attn_cmd, at.common);
    attn_cmd->add_option("--checkpoint", at.checkpoint)->required()->check(CLI::ExistingDirectory);
    attn_cmd->add_option("--text", at.text, "question text");
    attn_cmd->add_option("--corpus", at.corpus, "documents (JSON Lines)")->check(CLI::ExistingFile);
    attn_cmd->add_option("--id", at.id, "document id within --corpus");
    attn_cmd->add_option("--out", at.out, "CSV output")->required();
    attn_cmd->add_option("--svg", at.svg, "optional heatmap");

    std::vector<const char*> argv{"unifar"};
    for (const auto& s : args) argv.push_back(s.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    for (auto* sub : {build, train_cmd, embed_cmd, index_cmd, search_cmd, eval_cmd, attn_cmd}) {
        if (!sub->parsed()) continue;
        for (Common* c : {&bd.common, &tr.common, &em.common, &ix.common, &se.common, &ev.common, &at.common}) {
            c->seed_given = sub->count("--seed") > 0;
        }
    }

    try {
        if (*build) return cmd_build_data(bd, out, err);
        if (*train_cmd) return cmd_train(tr, out, err);
        if (*embed_cmd) return cmd_embed(em, out, err);
        if (*index_cmd) return cmd_index(ix, out, err);
        if (*search_cmd) return cmd_search(se, out, err);
        if (*eval_cmd) return cmd_eval(ev, out, err);
        if (*attn_cmd) return cmd_attn_export(at, out, err);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.kind() == ErrorKind::kConfigError ? kExitUsage : kExitFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace unifar::cli
