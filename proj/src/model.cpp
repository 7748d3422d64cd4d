#include "unifar/model.hpp"

#include "unifar/error.hpp"

#include <algorithm>
#include <random>
#include <sstream>

namespace unifar {

using nlohmann::json;

std::string_view anchor_init_name(AnchorInit init) {
    switch (init) {
        case AnchorInit::kRandom: return "random";
        case AnchorInit::kFacetWords: return "facet-words";
        case AnchorInit::kShared: return "shared";
    }
    return "random";
}

AnchorInit parse_anchor_init(std::string_view name) {
    if (name == "random") return AnchorInit::kRandom;
    if (name == "facet-words") return AnchorInit::kFacetWords;
    if (name == "shared") return AnchorInit::kShared;
    throw Error(ErrorKind::kConfigError, "unknown anchor_init \"" + std::string(name) + "\"");
}

namespace {

std::string_view splitter_name(SplitterKind kind) { return kind == SplitterKind::kRule ? "rule" : "none"; }

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto b = item.find_first_not_of(" \t");
        auto e = item.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

std::size_t positive_size(long long v, const char* key) {
    if (v <= 0) throw Error(ErrorKind::kConfigError, std::string(key) + " must be positive");
    return static_cast<std::size_t>(v);
}

}  // namespace

const std::vector<std::string>& ModelConfig::config_keys() {
    static const std::vector<std::string> keys{
        "base_model_name", "hidden_size",       "head_count",      "max_sequence_length",
        "facet_names",     "anchor_init",       "sentence_splitter", "use_input_context",
        "sentence_branch", "token_branch",      "seed"};
    return keys;
}

ModelConfig ModelConfig::from_config(const io::KeyValueConfig& cfg) {
    ModelConfig c;
    c.base_model_name = cfg.get_string("base_model_name", c.base_model_name);
    c.hidden_size = positive_size(cfg.get_int("hidden_size", static_cast<long long>(c.hidden_size)), "hidden_size");
    c.head_count = positive_size(cfg.get_int("head_count", static_cast<long long>(c.head_count)), "head_count");
    c.max_sequence_length = positive_size(
        cfg.get_int("max_sequence_length", static_cast<long long>(c.max_sequence_length)), "max_sequence_length");
    if (auto names = cfg.get("facet_names")) c.facet_names = split_list(*names);
    if (auto v = cfg.get("anchor_init")) c.anchor_init = parse_anchor_init(*v);
    if (auto v = cfg.get("sentence_splitter")) {
        try {
            c.sentence_splitter = parse_splitter_kind(*v);
        } catch (const Error& e) {
            throw Error(ErrorKind::kConfigError, e.detail());
        }
    }
    c.options.use_input_context = cfg.get_bool("use_input_context", c.options.use_input_context);
    c.options.sentence_branch = cfg.get_bool("sentence_branch", c.options.sentence_branch);
    c.options.token_branch = cfg.get_bool("token_branch", c.options.token_branch);
    c.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long long>(c.seed)));
    return c;
}

json ModelConfig::to_json() const {
    return json{{"base_model_name", base_model_name},
                {"hidden_size", hidden_size},
                {"head_count", head_count},
                {"max_sequence_length", max_sequence_length},
                {"facet_names", facet_names},
                {"anchor_init", anchor_init_name(anchor_init)},
                {"sentence_splitter", splitter_name(sentence_splitter)},
                {"use_input_context", options.use_input_context},
                {"sentence_branch", options.sentence_branch},
                {"token_branch", options.token_branch},
                {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    try {
        ModelConfig c;
        c.base_model_name = j.at("base_model_name").get<std::string>();
        c.hidden_size = j.at("hidden_size").get<std::size_t>();
        c.head_count = j.at("head_count").get<std::size_t>();
        c.max_sequence_length = j.at("max_sequence_length").get<std::size_t>();
        c.facet_names = j.at("facet_names").get<std::vector<std::string>>();
        c.anchor_init = parse_anchor_init(j.at("anchor_init").get<std::string>());
        c.sentence_splitter = parse_splitter_kind(j.at("sentence_splitter").get<std::string>());
        c.options.use_input_context = j.at("use_input_context").get<bool>();
        c.options.sentence_branch = j.at("sentence_branch").get<bool>();
        c.options.token_branch = j.at("token_branch").get<bool>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::kParseError, std::string("model configuration: ") + e.what());
    }
}

// ---- UnifarModel ------------------------------------------------------------------

UnifarModel::UnifarModel(ModelConfig config, WordTokenizer tokenizer)
    : config_(std::move(config)), tokenizer_(std::move(tokenizer)) {
    std::mt19937_64 rng(config_.seed);
    encoder_ = make_encoder(config_.base_model_name, tokenizer_.size(), config_.hidden_size,
                            config_.max_sequence_length, rng);
    aggregator_ = AggregatorParams::init(config_.facet_names, config_.hidden_size, config_.head_count, rng);
    init_anchors();
}

void UnifarModel::init_anchors() {
    ad::Matrix& anchors = aggregator_.anchors.value;
    switch (config_.anchor_init) {
        case AnchorInit::kRandom: break;
        case AnchorInit::kShared:
            for (Eigen::Index i = 1; i < anchors.rows(); ++i) anchors.row(i) = anchors.row(0);
            break;
        case AnchorInit::kFacetWords:
            for (std::size_t f = 0; f < config_.facet_names.size(); ++f) {
                std::vector<int> ids = tokenizer_.encode(config_.facet_names[f]);
                if (ids.empty()) ids.push_back(WordTokenizer::kUnk);
                ad::RowVector sum = ad::RowVector::Zero(anchors.cols());
                for (int id : ids) sum += encoder_->static_embedding(id);
                anchors.row(static_cast<Eigen::Index>(f)) = sum / static_cast<double>(ids.size());
            }
            break;
    }
}

std::vector<ad::Parameter*> UnifarModel::parameters() {
    std::vector<ad::Parameter*> out = encoder_->parameters();
    for (ad::Parameter* p : aggregator_.parameters()) out.push_back(p);
    return out;
}

std::vector<const ad::Parameter*> UnifarModel::parameters() const {
    std::vector<const ad::Parameter*> out = std::as_const(*encoder_).parameters();
    for (const ad::Parameter* p : aggregator_.parameters()) out.push_back(p);
    return out;
}

ad::Parameter& UnifarModel::parameter(std::string_view name) {
    for (ad::Parameter* p : parameters()) {
        if (p->name == name) return *p;
    }
    throw Error(ErrorKind::kValidationError, "no parameter named \"" + std::string(name) + "\"");
}

TokenizedInput UnifarModel::tokenize(const InputSequence& seq) const {
    return unifar::tokenize(seq, tokenizer_, config_.tokenizer_config());
}

UnifarModel::ForwardPass UnifarModel::forward(ad::Binder& base, ad::Binder& agg, const InputSequence& seq) const {
    if (&base.tape() != &agg.tape()) throw Error(ErrorKind::kValidationError, "binders must share one tape");
    ForwardPass pass;
    pass.tok = tokenize(seq);
    pass.tokens = encoder_->forward(base, pass.tok.token_ids);
    pass.sentences = pool_sentences(pass.tokens, pass.tok);
    pass.context = context_vector(pass.tokens, pass.sentences, pass.tok);
    pass.result = aggregate(agg, aggregator_, pass.tokens, pass.sentences, pass.context, config_.options);
    return pass;
}

ad::Var UnifarModel::supervision_attention(ad::Binder& agg, const ForwardPass& pass) const {
    if (pass.result.branch != Branch::kSentence) {
        throw Error(ErrorKind::kBranchMismatch, "attention supervision needs the sentence branch");
    }
    ad::Tape& tape = agg.tape();
    ad::Var sentences = tape.detach(pass.sentences);
    ad::Var context = tape.detach(pass.context);
    ad::Var queries = make_facet_queries(agg, aggregator_, context, config_.options);
    return attend(agg, aggregator_.sentence_attention, aggregator_.head_count, queries, sentences).attention;
}

FacetRepresentation UnifarModel::embed(const InputSequence& seq, const std::string& id) const {
    ad::Tape tape;
    ad::Binder base(tape, false);
    ad::Binder agg(tape, false);
    ForwardPass pass = forward(base, agg, seq);
    FacetRepresentation rep;
    rep.input_id = id;
    rep.embeddings = pass.result.embeddings.value();
    rep.attention = pass.result.attention.value();
    rep.branch = pass.result.branch;
    if (!rep.embeddings.allFinite()) {
        throw Error(ErrorKind::kEncoderFailure, "non-finite facet embeddings for \"" + id + "\"");
    }
    return rep;
}

// ---- checkpoint IO ------------------------------------------------------------------

void UnifarModel::save(const std::filesystem::path& dir, const json& metadata) const {
    std::filesystem::create_directories(dir / "params");
    json params = json::array();
    for (const ad::Parameter* p : parameters()) {
        const std::string file = "params/" + p->name + ".bin";
        std::vector<float> values;
        values.reserve(static_cast<std::size_t>(p->value.size()));
        for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
            for (Eigen::Index c = 0; c < p->value.cols(); ++c) values.push_back(static_cast<float>(p->value(r, c)));
        }
        std::string blob;
        io::append_floats_le(blob, values);
        io::write_file_atomic(dir / file, blob);
        params.push_back(json{{"name", p->name},
                              {"group", ad::param_group_name(p->group)},
                              {"shape", {p->value.rows(), p->value.cols()}},
                              {"file", file}});
    }
    json manifest{{"format", kCheckpointFormat},
                  {"base_model_name", config_.base_model_name},
                  {"hidden_size", config_.hidden_size},
                  {"head_count", aggregator_.head_count},
                  {"n_facet", aggregator_.facet_count()},
                  {"facet_names", aggregator_.facet_names},
                  {"vocab_size", tokenizer_.size()},
                  {"configuration", config_.to_json()},
                  {"metadata", metadata},
                  {"parameters", params}};
    io::write_file_atomic(dir / "vocab.json", json(tokenizer_.vocab()).dump() + "\n");
    io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

UnifarModel UnifarModel::load(const std::filesystem::path& dir) {
    json manifest, vocab;
    try {
        manifest = json::parse(io::read_file(dir / "manifest.json"));
        vocab = json::parse(io::read_file(dir / "vocab.json"));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::kParseError, "checkpoint " + dir.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != kCheckpointFormat) {
        throw Error(ErrorKind::kParseError, "checkpoint " + dir.string() + ": unsupported format");
    }
    UnifarModel model(ModelConfig::from_json(manifest.at("configuration")),
                      WordTokenizer(vocab.get<std::vector<std::string>>()));
    std::vector<ad::Parameter*> params = model.parameters();
    std::vector<bool> seen(params.size(), false);
    for (const json& entry : manifest.at("parameters")) {
        const auto name = entry.at("name").get<std::string>();
        auto it = std::find_if(params.begin(), params.end(), [&](const ad::Parameter* p) { return p->name == name; });
        if (it == params.end()) throw Error(ErrorKind::kShapeMismatch, "checkpoint has unknown parameter " + name);
        ad::Parameter& p = **it;
        const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
        if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols()) {
            throw Error(ErrorKind::kShapeMismatch, "checkpoint shape mismatch for " + name);
        }
        std::vector<float> values = io::parse_floats_le(io::read_file(dir / entry.at("file").get<std::string>()));
        if (values.size() != static_cast<std::size_t>(p.value.size())) {
            throw Error(ErrorKind::kShapeMismatch, "checkpoint blob size mismatch for " + name);
        }
        std::size_t k = 0;
        for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
            for (Eigen::Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = static_cast<double>(values[k++]);
        }
        seen[static_cast<std::size_t>(it - params.begin())] = true;
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!seen[i]) throw Error(ErrorKind::kShapeMismatch, "checkpoint lacks parameter " + params[i]->name);
    }
    return model;
}

}  // namespace unifar
