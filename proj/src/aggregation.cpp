#include "unifar/aggregation.hpp"

#include "unifar/error.hpp"

#include <cmath>
#include <set>

namespace unifar {

std::string_view branch_name(Branch branch) { return branch == Branch::kSentence ? "sentence" : "token"; }

Branch parse_branch(std::string_view name) {
    if (name == "sentence") return Branch::kSentence;
    if (name == "token") return Branch::kToken;
    throw Error(ErrorKind::kValidationError, "unknown branch \"" + std::string(name) + "\"");
}

namespace {

ad::Matrix xavier(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    ad::Matrix m(fan_in, fan_out);
    for (Eigen::Index i = 0; i < fan_in; ++i) {
        for (Eigen::Index j = 0; j < fan_out; ++j) m(i, j) = dist(rng);
    }
    return m;
}

ad::Parameter agg(const std::string& name, ad::Matrix value) {
    return ad::Parameter(name, ad::ParamGroup::kAggregation, std::move(value));
}

}  // namespace

MultiHeadAttentionParams MultiHeadAttentionParams::init(const std::string& prefix, std::size_t hidden,
                                                        std::mt19937_64& rng) {
    const auto h = static_cast<Eigen::Index>(hidden);
    MultiHeadAttentionParams p;
    p.wq = agg(prefix + ".wq", xavier(h, h, rng));
    p.bq = agg(prefix + ".bq", ad::Matrix::Zero(1, h));
    p.wk = agg(prefix + ".wk", xavier(h, h, rng));
    p.bk = agg(prefix + ".bk", ad::Matrix::Zero(1, h));
    p.wv = agg(prefix + ".wv", xavier(h, h, rng));
    p.bv = agg(prefix + ".bv", ad::Matrix::Zero(1, h));
    p.wo = agg(prefix + ".wo", xavier(h, h, rng));
    p.bo = agg(prefix + ".bo", ad::Matrix::Zero(1, h));
    return p;
}

std::vector<ad::Parameter*> MultiHeadAttentionParams::parameters() {
    return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo};
}

std::vector<const ad::Parameter*> MultiHeadAttentionParams::parameters() const {
    return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo};
}

AggregatorParams AggregatorParams::init(std::vector<std::string> facet_names, std::size_t hidden,
                                        std::size_t head_count, std::mt19937_64& rng) {
    const auto h = static_cast<Eigen::Index>(hidden);
    const auto n = static_cast<Eigen::Index>(facet_names.size());
    AggregatorParams p;
    p.facet_names = std::move(facet_names);
    p.head_count = head_count;
    std::normal_distribution<double> anchor_dist(0.0, 0.02);
    ad::Matrix anchors(n, h);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < h; ++j) anchors(i, j) = anchor_dist(rng);
    }
    p.anchors = ad::Parameter("aggregation.anchors", ad::ParamGroup::kAnchors, std::move(anchors));
    p.input_proj_w = agg("aggregation.input_proj.w", xavier(h, h, rng));
    p.input_proj_b = agg("aggregation.input_proj.b", ad::Matrix::Zero(1, h));
    p.mlp_w1 = agg("aggregation.mlp.w1", xavier(2 * h, h, rng));
    p.mlp_b1 = agg("aggregation.mlp.b1", ad::Matrix::Zero(1, h));
    p.mlp_w2 = agg("aggregation.mlp.w2", xavier(h, h, rng));
    p.mlp_b2 = agg("aggregation.mlp.b2", ad::Matrix::Zero(1, h));
    p.norm_gamma = agg("aggregation.norm.gamma", ad::Matrix::Ones(1, h));
    p.norm_beta = agg("aggregation.norm.beta", ad::Matrix::Zero(1, h));
    p.sentence_attention = MultiHeadAttentionParams::init("aggregation.mha_sent", hidden, rng);
    p.token_attention = MultiHeadAttentionParams::init("aggregation.mha_tok", hidden, rng);
    p.validate();
    return p;
}

std::vector<ad::Parameter*> AggregatorParams::parameters() {
    std::vector<ad::Parameter*> out{&anchors, &input_proj_w, &input_proj_b, &mlp_w1, &mlp_b1,
                                    &mlp_w2,  &mlp_b2,       &norm_gamma,   &norm_beta};
    for (ad::Parameter* p : sentence_attention.parameters()) out.push_back(p);
    for (ad::Parameter* p : token_attention.parameters()) out.push_back(p);
    return out;
}

std::vector<const ad::Parameter*> AggregatorParams::parameters() const {
    std::vector<const ad::Parameter*> out{&anchors, &input_proj_w, &input_proj_b, &mlp_w1, &mlp_b1,
                                          &mlp_w2,  &mlp_b2,       &norm_gamma,   &norm_beta};
    for (const ad::Parameter* p : sentence_attention.parameters()) out.push_back(p);
    for (const ad::Parameter* p : token_attention.parameters()) out.push_back(p);
    return out;
}

void AggregatorParams::validate() const {
    const Eigen::Index h = anchors.value.cols();
    if (facet_names.empty()) throw Error(ErrorKind::kConfigError, "N_facet must be >= 1");
    if (anchors.value.rows() != static_cast<Eigen::Index>(facet_names.size())) {
        throw Error(ErrorKind::kShapeMismatch, "anchor rows must equal the number of facet names");
    }
    if (std::set<std::string>(facet_names.begin(), facet_names.end()).size() != facet_names.size()) {
        throw Error(ErrorKind::kConfigError, "facet names must be distinct");
    }
    if (head_count == 0 || h % static_cast<Eigen::Index>(head_count) != 0) {
        throw Error(ErrorKind::kConfigError, "head_count " + std::to_string(head_count) + " must divide hidden size " +
                                                 std::to_string(h));
    }
    auto expect = [](const ad::Parameter& p, Eigen::Index r, Eigen::Index c) {
        if (p.value.rows() != r || p.value.cols() != c) {
            throw Error(ErrorKind::kShapeMismatch, p.name + " has shape " + std::to_string(p.value.rows()) + "x" +
                                                       std::to_string(p.value.cols()) + ", expected " +
                                                       std::to_string(r) + "x" + std::to_string(c));
        }
    };
    expect(input_proj_w, h, h);
    expect(input_proj_b, 1, h);
    expect(mlp_w1, 2 * h, h);
    expect(mlp_b1, 1, h);
    expect(mlp_w2, h, h);
    expect(mlp_b2, 1, h);
    expect(norm_gamma, 1, h);
    expect(norm_beta, 1, h);
    for (const MultiHeadAttentionParams* m : {&sentence_attention, &token_attention}) {
        for (const ad::Parameter* p : {&m->wq, &m->wk, &m->wv, &m->wo}) expect(*p, h, h);
        for (const ad::Parameter* p : {&m->bq, &m->bk, &m->bv, &m->bo}) expect(*p, 1, h);
    }
}

Branch select_branch(std::size_t sentence_count, std::size_t n_facet) {
    return sentence_count >= n_facet ? Branch::kSentence : Branch::kToken;
}

Branch select_branch(std::size_t sentence_count, std::size_t n_facet, const AggregatorOptions& options) {
    if (!options.sentence_branch && !options.token_branch) {
        throw Error(ErrorKind::kConfigError, "at least one attention branch must be enabled");
    }
    if (!options.sentence_branch) return Branch::kToken;
    if (!options.token_branch) return Branch::kSentence;
    return select_branch(sentence_count, n_facet);
}

ad::Var make_facet_queries(ad::Binder& bind, const AggregatorParams& params, const ad::Var& e_input,
                           const AggregatorOptions& options) {
    const auto n = static_cast<Eigen::Index>(params.facet_count());
    const Eigen::Index h = params.anchors.value.cols();
    if (e_input.rows() != 1 || e_input.cols() != h) {
        throw Error(ErrorKind::kShapeMismatch, "input context must be 1 x h");
    }
    ad::Var anchors = bind(params.anchors);
    ad::Var context = options.use_input_context
                          ? ad::add_row(ad::matmul(e_input, bind(params.input_proj_w)), bind(params.input_proj_b))
                          : bind.tape().constant(ad::Matrix::Zero(1, h));
    ad::Var fused = ad::hconcat({anchors, ad::repeat_rows(context, n)});
    ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(fused, bind(params.mlp_w1)), bind(params.mlp_b1)));
    ad::Var mlp = ad::add_row(ad::matmul(hidden, bind(params.mlp_w2)), bind(params.mlp_b2));
    return ad::layer_norm(ad::add(anchors, mlp), bind(params.norm_gamma), bind(params.norm_beta));
}

ad::Matrix make_facet_queries(const AggregatorParams& params, const ad::RowVector& e_input,
                              const AggregatorOptions& options) {
    if (!e_input.allFinite()) throw Error(ErrorKind::kShapeMismatch, "input context has non-finite values");
    ad::Tape tape;
    ad::Binder bind(tape, false);
    return make_facet_queries(bind, params, tape.constant(e_input), options).value();
}

AttentionResult attend(ad::Binder& bind, const MultiHeadAttentionParams& mha, std::size_t head_count,
                       const ad::Var& queries, const ad::Var& keys_values) {
    if (keys_values.rows() < 1) throw Error(ErrorKind::kShapeMismatch, "attention needs at least one key");
    const Eigen::Index h = queries.cols();
    const auto heads = static_cast<Eigen::Index>(head_count);
    if (keys_values.cols() != h || heads < 1 || h % heads != 0) {
        throw Error(ErrorKind::kShapeMismatch, "attention: width or head count mismatch");
    }
    const Eigen::Index dh = h / heads;
    ad::Var q = ad::add_row(ad::matmul(queries, bind(mha.wq)), bind(mha.bq));
    ad::Var k = ad::add_row(ad::matmul(keys_values, bind(mha.wk)), bind(mha.bk));
    ad::Var v = ad::add_row(ad::matmul(keys_values, bind(mha.wv)), bind(mha.bv));
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<ad::Var> outputs, weights;
    for (Eigen::Index head = 0; head < heads; ++head) {
        ad::Var qh = heads == 1 ? q : ad::slice_cols(q, head * dh, dh);
        ad::Var kh = heads == 1 ? k : ad::slice_cols(k, head * dh, dh);
        ad::Var vh = heads == 1 ? v : ad::slice_cols(v, head * dh, dh);
        ad::Var w = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt_dh));
        outputs.push_back(ad::matmul(w, vh));
        weights.push_back(w);
    }
    ad::Var concat = heads == 1 ? outputs.front() : ad::hconcat(outputs);
    ad::Var embeddings = ad::add_row(ad::matmul(concat, bind(mha.wo)), bind(mha.bo));
    ad::Var attention = weights.front();
    for (std::size_t i = 1; i < weights.size(); ++i) attention = ad::add(attention, weights[i]);
    if (heads > 1) attention = ad::scale(attention, 1.0 / static_cast<double>(heads));
    return {embeddings, attention};
}

AggregateResult aggregate(ad::Binder& bind, const AggregatorParams& params, const ad::Var& tokens,
                          const ad::Var& sentences, const ad::Var& e_input, const AggregatorOptions& options) {
    const Eigen::Index h = params.anchors.value.cols();
    if (tokens.cols() != h || sentences.cols() != h) {
        throw Error(ErrorKind::kShapeMismatch, "token/sentence width differs from aggregator hidden size");
    }
    ad::Var queries = make_facet_queries(bind, params, e_input, options);
    const Branch branch = select_branch(static_cast<std::size_t>(sentences.rows()), params.facet_count(), options);
    AttentionResult r = branch == Branch::kSentence
                            ? attend(bind, params.sentence_attention, params.head_count, queries, sentences)
                            : attend(bind, params.token_attention, params.head_count, queries, tokens);
    return {r.embeddings, r.attention, branch};
}

FacetRepresentation aggregate(const ad::Matrix& tokens, const ad::Matrix& sentences, const ad::RowVector& e_input,
                              const AggregatorParams& params, const AggregatorOptions& options) {
    ad::Tape tape;
    ad::Binder bind(tape, false);
    AggregateResult r = aggregate(bind, params, tape.constant(tokens), tape.constant(sentences),
                                  tape.constant(e_input), options);
    FacetRepresentation rep;
    rep.embeddings = r.embeddings.value();
    rep.attention = r.attention.value();
    rep.branch = r.branch;
    return rep;
}

}  // namespace unifar
