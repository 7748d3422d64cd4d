#include "doctest.h"

#include "oracles.hpp"
#include "unifar/encoding.hpp"
#include "unifar/error.hpp"

#include <random>

using namespace unifar;

namespace {

WordTokenizer vocab_for(const std::vector<std::string>& texts) { return WordTokenizer::build(texts); }

ad::Matrix random_matrix(std::mt19937_64& rng, int r, int c) {
    std::normal_distribution<double> n(0.0, 1.0);
    ad::Matrix m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = n(rng);
    return m;
}

}  // namespace

TEST_CASE("split_sentences") {
    using V = std::vector<std::string>;
    CHECK(split_sentences("We study graphs. It works! Does it? Yes.") == V{"We study graphs.", "It works!", "Does it?", "Yes."});
    CHECK(split_sentences("See Fig. 3 for details. Results follow.") == V{"See Fig. 3 for details.", "Results follow."});
    CHECK(split_sentences("Prior work (e.g. Smith et al. 2020) differs. We agree.") ==
          V{"Prior work (e.g. Smith et al. 2020) differs.", "We agree."});
    CHECK(split_sentences("Version 2.5 is faster. 3 runs were made.") == V{"Version 2.5 is faster.", "3 runs were made."});
    CHECK(split_sentences("J. Doe wrote it. Later work followed.") == V{"J. Doe wrote it.", "Later work followed."});
    CHECK(split_sentences("lower case after stop. stays together") == V{"lower case after stop. stays together"});
    CHECK(split_sentences("First paragraph\n\nSecond paragraph") == V{"First paragraph", "Second paragraph"});
    CHECK(split_sentences("He said \"stop.\" Then left.") == V{"He said \"stop.\"", "Then left."});
    CHECK(split_sentences("   ").empty());
}

TEST_CASE("segment_input") {
    InputSequence s = segment_input("One. Two.", InputKind::kDocument, std::string("  Title "));
    CHECK(s.sentences == std::vector<std::string>{"One.", "Two."});
    CHECK(s.title == "Title");
    CHECK(s.has_title());
    CHECK_FALSE(segment_input("One. Two.", InputKind::kQuestion, std::string("T")).has_title());
    CHECK(segment_input("One. Two.", InputKind::kQuestion, std::nullopt, SplitterKind::kNone).sentences.size() == 1);
    CHECK_THROWS_AS(segment_input("  ", InputKind::kQuestion), Error);
    CHECK(segment_input(std::vector<std::string>{" a ", "", "b"}, InputKind::kDocument).sentences ==
          std::vector<std::string>{"a", "b"});
    CHECK(segment_input("x", InputKind::kDocument, std::string("   ")).title == std::nullopt);
}

TEST_CASE("WordTokenizer") {
    CHECK(WordTokenizer::split_words("Graph-based GNNs, 2x faster!") ==
          std::vector<std::string>{"graph", "-", "based", "gnns", ",", "2x", "faster", "!"});
    const WordTokenizer tok = vocab_for({"beta alpha", "Alpha gamma."});
    CHECK(tok.vocab() == std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]", ".", "alpha", "beta", "gamma"});
    CHECK(tok.encode("ALPHA delta .") == std::vector<int>{5, WordTokenizer::kUnk, 4});
    CHECK(tok.id("gamma") == 7);
    CHECK(tok.token(6) == "beta");
    const WordTokenizer copy(tok.vocab());
    CHECK(copy.encode("gamma beta") == tok.encode("gamma beta"));
}

TEST_CASE("token layout") {
    const WordTokenizer tok = vocab_for({"a b c d e f title words"});
    TokenizerConfig cfg;

    SUBCASE("question: [CLS] S1 [SEP] S2") {
        const auto t = tokenize(segment_input(std::vector<std::string>{"a b", "c"}, InputKind::kQuestion), tok, cfg);
        CHECK(t.token_ids == std::vector<int>{WordTokenizer::kCls, tok.id("a"), tok.id("b"), WordTokenizer::kSep, tok.id("c")});
        CHECK(t.sentence_boundaries == std::vector<std::pair<int, int>>{{1, 3}, {4, 5}});
        CHECK(t.context == ContextSource::kClsToken);
        CHECK(t.context_position == 0);
        CHECK_FALSE(t.has_title);
        CHECK(t.sentence_index == std::vector<int>{0, 1});
    }
    SUBCASE("titled document: Title [SEP] S1 [SEP] S2") {
        const auto t = tokenize(
            segment_input(std::vector<std::string>{"a", "b c"}, InputKind::kDocument, std::string("title words")), tok, cfg);
        CHECK(t.token_ids.size() == 7);
        CHECK(t.token_ids[2] == WordTokenizer::kSep);
        CHECK(t.sentence_boundaries == std::vector<std::pair<int, int>>{{0, 2}, {3, 4}, {5, 7}});
        CHECK(t.context == ContextSource::kTitleSpan);
        CHECK(t.has_title);
        CHECK(t.sentence_index == std::vector<int>{0, 1});
    }
    SUBCASE("untitled document uses [CLS]") {
        const auto t = tokenize(segment_input(std::vector<std::string>{"a"}, InputKind::kDocument), tok, cfg);
        CHECK(t.token_ids.front() == WordTokenizer::kCls);
        CHECK(t.context == ContextSource::kClsToken);
    }
    SUBCASE("tail truncation drops a sentence cut mid-way") {
        cfg.max_sequence_length = 6;
        const auto t =
            tokenize(segment_input(std::vector<std::string>{"a b", "c d", "e f"}, InputKind::kQuestion), tok, cfg);
        CHECK(t.token_ids.size() == 6);
        CHECK(t.sentence_boundaries == std::vector<std::pair<int, int>>{{1, 3}, {4, 6}});
        cfg.max_sequence_length = 5;
        const auto u =
            tokenize(segment_input(std::vector<std::string>{"a b", "c d", "e f"}, InputKind::kQuestion), tok, cfg);
        CHECK(u.sentence_boundaries == std::vector<std::pair<int, int>>{{1, 3}});
        CHECK(u.sentence_index == std::vector<int>{0});
    }
    SUBCASE("an overlong first sentence is kept truncated") {
        cfg.max_sequence_length = 3;
        const auto t = tokenize(segment_input(std::vector<std::string>{"a b c d"}, InputKind::kQuestion), tok, cfg);
        CHECK(t.first_sentence_truncated);
        CHECK(t.sentence_boundaries == std::vector<std::pair<int, int>>{{1, 3}});
    }
    SUBCASE("title overflow") {
        cfg.max_sequence_length = 2;
        CHECK_THROWS_AS(tokenize(segment_input(std::vector<std::string>{"a"}, InputKind::kDocument,
                                               std::string("title words a")),
                                 tok, cfg),
                        Error);
    }
}

TEST_CASE("sentence pooling and context vector") {
    std::mt19937_64 rng(3);
    const WordTokenizer tok = vocab_for({"a b c d e title"});
    const auto t = tokenize(segment_input(std::vector<std::string>{"a b c", "d"}, InputKind::kDocument,
                                          std::string("title e")),
                            tok, {});
    const ad::Matrix tokens = random_matrix(rng, static_cast<int>(t.length()), 4);
    const ad::Matrix s = pool_sentences(tokens, t);
    REQUIRE(s.rows() == 3);
    for (std::size_t i = 0; i < t.sentence_boundaries.size(); ++i) {
        const auto [b, e] = t.sentence_boundaries[i];
        ad::RowVector mean = ad::RowVector::Zero(4);
        for (int r = b; r < e; ++r) mean += tokens.row(r);
        mean /= (e - b);
        CHECK((s.row(static_cast<Eigen::Index>(i)) - mean).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK(context_vector(tokens, s, t) == s.row(0));

    const auto q = tokenize(segment_input(std::vector<std::string>{"a b"}, InputKind::kQuestion), tok, {});
    const ad::Matrix qt = random_matrix(rng, static_cast<int>(q.length()), 4);
    CHECK(context_vector(qt, pool_sentences(qt, q), q) == qt.row(0));

    TokenizedInput bad = q;
    bad.sentence_boundaries = {{1, 1}};
    CHECK_THROWS_AS(pool_sentences(qt, bad), Error);
}

TEST_CASE("tiny transformer matches a direct computation") {
    std::mt19937_64 rng(11);
    TinyTransformerEncoder enc(20, 6, 16, rng);
    const std::vector<int> ids{2, 5, 7, 3, 9};
    const ad::Matrix out = [&] {
        ad::Tape tape;
        ad::Binder bind(tape, false);
        return enc.forward(bind, ids).value();
    }();
    auto param = [&](const std::string& name) -> const ad::Matrix& {
        for (const auto* p : enc.parameters()) {
            if (p->name == name) return p->value;
        }
        FAIL("missing parameter " << name);
        throw 0;
    };
    const ad::Matrix& table = param("encoder.token_embedding");
    const ad::Matrix& pos = param("encoder.position_embedding");
    oracle::Mat x(5, 6);
    for (int i = 0; i < 5; ++i) x.row(i) = table.row(ids[i]) + pos.row(i);
    const oracle::Mat q = x * param("encoder.attention.wq"), k = x * param("encoder.attention.wk");
    oracle::Mat scores = q * k.transpose() / std::sqrt(6.0);
    for (int i = 0; i < 5; ++i) {
        const double m = scores.row(i).maxCoeff();
        double z = 0.0;
        for (int j = 0; j < 5; ++j) z += std::exp(scores(i, j) - m);
        for (int j = 0; j < 5; ++j) scores(i, j) = std::exp(scores(i, j) - m) / z;
    }
    const oracle::Mat mixed = scores * (x * param("encoder.attention.wv")) * param("encoder.attention.wo");
    const oracle::Mat expected = oracle::layer_norm_rows(x + mixed, param("encoder.norm.gamma"), param("encoder.norm.beta"));
    CHECK((out - expected).cwiseAbs().maxCoeff() < 1e-10);

    ad::Tape tape;
    ad::Binder bind(tape, false);
    CHECK_THROWS_AS(enc.forward(bind, std::vector<int>(17, 2)), Error);
    CHECK_THROWS_AS(enc.forward(bind, {25}), Error);
}

TEST_CASE("lookup encoder and factory") {
    std::mt19937_64 rng(5);
    auto enc = make_encoder("lookup", 10, 4, 32, rng);
    CHECK(enc->name() == "lookup");
    const auto t = tokenize(segment_input("x", InputKind::kQuestion), WordTokenizer::build({"x"}), {});
    const ad::Matrix out = encode(t, *enc);
    CHECK(out.row(0) == enc->static_embedding(WordTokenizer::kCls));
    CHECK_THROWS_AS(make_encoder("bert", 10, 4, 32, rng), Error);
}
