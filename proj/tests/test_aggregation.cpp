#include "doctest.h"

#include "oracles.hpp"
#include "synthetic.hpp"
#include "unifar/aggregation.hpp"
#include "unifar/error.hpp"

#include <random>

using namespace unifar;

namespace {

ad::Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
    std::normal_distribution<double> n(0.0, 1.0);
    ad::Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
    return m;
}

std::vector<std::string> facet_names(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back("f" + std::to_string(i));
    return out;
}

// Randomizes every parameter so zero biases and unit gains do not hide mistakes.
void perturb(AggregatorParams& p, std::mt19937_64& rng) {
    for (ad::Parameter* param : p.parameters()) {
        param->value += 0.3 * random_matrix(rng, param->value.rows(), param->value.cols());
    }
}

oracle::Mat facet_queries_oracle(const AggregatorParams& p, const oracle::Row& e, bool use_context) {
    const auto n = p.anchors.value.rows();
    const auto h = p.anchors.value.cols();
    oracle::Row ctx = oracle::Row::Zero(h);
    if (use_context) ctx = e * p.input_proj_w.value + p.input_proj_b.value;
    oracle::Mat out(n, h);
    for (Eigen::Index i = 0; i < n; ++i) {
        oracle::Row fused(2 * h);
        fused << p.anchors.value.row(i), ctx;
        oracle::Row hidden = fused * p.mlp_w1.value + p.mlp_b1.value;
        for (Eigen::Index j = 0; j < h; ++j) hidden[j] = oracle::gelu(hidden[j]);
        out.row(i) = p.anchors.value.row(i) + hidden * p.mlp_w2.value + p.mlp_b2.value;
    }
    return oracle::layer_norm_rows(out, p.norm_gamma.value, p.norm_beta.value);
}

}  // namespace

TEST_CASE("facet queries match a direct computation") {
    std::mt19937_64 rng(21);
    AggregatorParams p = AggregatorParams::init(facet_names(3), 8, 2, rng);
    perturb(p, rng);
    const ad::RowVector e = random_matrix(rng, 1, 8);
    CHECK((make_facet_queries(p, e) - facet_queries_oracle(p, e, true)).cwiseAbs().maxCoeff() < 1e-10);
    AggregatorOptions no_ctx;
    no_ctx.use_input_context = false;
    const ad::Matrix q0 = make_facet_queries(p, e, no_ctx);
    CHECK((q0 - facet_queries_oracle(p, e, false)).cwiseAbs().maxCoeff() < 1e-10);
    // Without the context term the queries ignore the input.
    CHECK(q0 == make_facet_queries(p, random_matrix(rng, 1, 8), no_ctx));
    CHECK_THROWS_AS(make_facet_queries(p, random_matrix(rng, 1, 7)), Error);
}

TEST_CASE("multi-head attention matches a direct computation") {
    std::mt19937_64 rng(22);
    for (int heads : {1, 2, 4}) {
        AggregatorParams p = AggregatorParams::init(facet_names(3), 8, static_cast<std::size_t>(heads), rng);
        perturb(p, rng);
        const ad::Matrix q = random_matrix(rng, 3, 8), kv = random_matrix(rng, 5, 8);
        ad::Tape tape;
        ad::Binder bind(tape, false);
        const AttentionResult r = attend(bind, p.sentence_attention, p.head_count, tape.constant(q), tape.constant(kv));
        const auto& m = p.sentence_attention;
        const oracle::Attention o = oracle::multi_head_attention(q, kv, m.wq.value, m.bq.value, m.wk.value, m.bk.value,
                                                                 m.wv.value, m.bv.value, m.wo.value, m.bo.value, heads);
        CHECK((r.embeddings.value() - o.out).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((r.attention.value() - o.weights).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("branch selection and shapes over the size grid") {
    std::mt19937_64 rng(23);
    const Eigen::Index h = 8;
    for (std::size_t n_facet = 1; n_facet <= 4; ++n_facet) {
        AggregatorParams p = AggregatorParams::init(facet_names(n_facet), h, 2, rng);
        for (std::size_t s = 1; s <= 8; ++s) {
            CAPTURE(n_facet);
            CAPTURE(s);
            const Eigen::Index tokens = static_cast<Eigen::Index>(2 * s + 1);
            const FacetRepresentation rep = aggregate(random_matrix(rng, tokens, h),
                                                      random_matrix(rng, static_cast<Eigen::Index>(s), h),
                                                      random_matrix(rng, 1, h), p);
            const Branch expected = s >= n_facet ? Branch::kSentence : Branch::kToken;
            CHECK(select_branch(s, n_facet) == expected);
            CHECK(rep.branch == expected);
            CHECK(rep.embeddings.rows() == static_cast<Eigen::Index>(n_facet));
            CHECK(rep.embeddings.cols() == h);
            CHECK(rep.attention.rows() == static_cast<Eigen::Index>(n_facet));
            CHECK(rep.attention.cols() == (expected == Branch::kSentence ? static_cast<Eigen::Index>(s) : tokens));
            CHECK((rep.attention.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-5);
            CHECK(rep.attention.minCoeff() >= 0.0);
        }
    }
}

TEST_CASE("ablation switches") {
    AggregatorOptions only_sentence;
    only_sentence.token_branch = false;
    AggregatorOptions only_token;
    only_token.sentence_branch = false;
    AggregatorOptions none;
    none.sentence_branch = none.token_branch = false;
    CHECK(select_branch(1, 3, only_sentence) == Branch::kSentence);
    CHECK(select_branch(9, 3, only_token) == Branch::kToken);
    CHECK_THROWS_AS(select_branch(4, 3, none), Error);
    CHECK(parse_branch(branch_name(Branch::kToken)) == Branch::kToken);
    CHECK_THROWS_AS(parse_branch("word"), Error);
}

TEST_CASE("parameter validation") {
    std::mt19937_64 rng(24);
    CHECK_THROWS_AS(AggregatorParams::init(facet_names(3), 8, 3, rng), Error);
    CHECK_THROWS_AS(AggregatorParams::init({}, 8, 2, rng), Error);
    CHECK_THROWS_AS(AggregatorParams::init({"a", "a"}, 8, 2, rng), Error);
    AggregatorParams p = AggregatorParams::init(facet_names(2), 8, 2, rng);
    p.mlp_w1.value.resize(8, 8);
    CHECK_THROWS_AS(p.validate(), Error);
}

TEST_CASE("shared anchors collapse facet embeddings") {
    std::mt19937_64 rng(25);
    const std::vector<std::string> words{"alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota"};
    std::vector<std::string> texts;
    std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
    for (int i = 0; i < 20; ++i) {
        std::string s;
        for (int w = 0; w < 6; ++w) s += words[pick(rng)] + (w % 3 == 2 ? ". " : " ");
        texts.push_back(s);
    }
    auto max_pair_distance = [](const ad::Matrix& e, bool min_instead) {
        double best = min_instead ? 1e300 : 0.0;
        for (Eigen::Index i = 0; i < e.rows(); ++i)
            for (Eigen::Index j = i + 1; j < e.rows(); ++j) {
                const double d = (e.row(i) - e.row(j)).norm();
                best = min_instead ? std::min(best, d) : std::max(best, d);
            }
        return best;
    };
    for (const std::string& encoder : {"lookup", "tiny-transformer"}) {
        const UnifarModel shared = synth::tiny_model(texts, 8, 2, encoder, 7, AnchorInit::kShared);
        const UnifarModel distinct = synth::tiny_model(texts, 8, 2, encoder, 7, AnchorInit::kRandom);
        for (const std::string& t : texts) {
            for (InputKind kind : {InputKind::kQuestion, InputKind::kDocument}) {
                const InputSequence seq = segment_input(t, kind);
                CHECK(max_pair_distance(shared.embed(seq).embeddings, false) < 1e-6);
                CHECK(max_pair_distance(distinct.embed(seq).embeddings, true) > 1e-3);
            }
        }
    }
}
