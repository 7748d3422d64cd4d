#include "doctest.h"

#include "synthetic.hpp"
#include "unifar/error.hpp"
#include "unifar/io.hpp"
#include "unifar/model.hpp"

#include <filesystem>

using namespace unifar;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("unifar_test_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

std::map<std::string, std::string> files_under(const std::filesystem::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = io::read_file(e.path());
    }
    return out;
}

const std::vector<std::string> kTexts{"Graph networks model molecules. We train with contrastive loss.",
                                      "Accuracy improves by ten points.", "background method result"};

}  // namespace

TEST_CASE("model configuration") {
    io::KeyValueConfig cfg = io::KeyValueConfig::parse(
        "hidden_size = 16\nhead_count = 4\nfacet_names = bg, mt\nanchor_init = facet-words\n"
        "sentence_splitter = none\nuse_input_context = false\nseed = 9\nbase_model_name = lookup\n");
    const ModelConfig c = ModelConfig::from_config(cfg);
    CHECK(c.hidden_size == 16);
    CHECK(c.head_count == 4);
    CHECK(c.facet_names == std::vector<std::string>{"bg", "mt"});
    CHECK(c.anchor_init == AnchorInit::kFacetWords);
    CHECK(c.sentence_splitter == SplitterKind::kNone);
    CHECK_FALSE(c.options.use_input_context);
    CHECK(c.seed == 9);
    CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
    CHECK(ModelConfig().base_model_name == "tiny-transformer");
    CHECK(ModelConfig().facet_names.size() == 3);
    CHECK_THROWS_AS(ModelConfig::from_config(io::KeyValueConfig::parse("anchor_init = zero\n")), Error);
}

TEST_CASE("model construction is seeded") {
    const UnifarModel a = synth::tiny_model(kTexts, 8, 2, "tiny-transformer", 3);
    const UnifarModel b = synth::tiny_model(kTexts, 8, 2, "tiny-transformer", 3);
    const UnifarModel c = synth::tiny_model(kTexts, 8, 2, "tiny-transformer", 4);
    const InputSequence seq = segment_input(kTexts[0], InputKind::kDocument, std::string("A title"));
    CHECK(a.embed(seq).embeddings == b.embed(seq).embeddings);
    CHECK(a.embed(seq).embeddings != c.embed(seq).embeddings);
    for (const ad::Parameter* p : a.parameters()) {
        const bool base = p->name.rfind("encoder.", 0) == 0;
        CHECK((p->group == ad::ParamGroup::kBase) == base);
    }
}

TEST_CASE("facet-word anchors use the static embeddings of the facet names") {
    const UnifarModel m = synth::tiny_model(kTexts, 8, 2, "lookup", 3, AnchorInit::kFacetWords);
    const auto& anchors = m.aggregator().anchors.value;
    for (std::size_t f = 0; f < 3; ++f) {
        const int id = m.tokenizer().id(m.config().facet_names[f]);
        REQUIRE(id != WordTokenizer::kUnk);
        CHECK(anchors.row(static_cast<Eigen::Index>(f)) == m.encoder().static_embedding(id));
    }
}

TEST_CASE("embed routes questions and documents") {
    const UnifarModel m = synth::tiny_model(kTexts, 8, 2, "tiny-transformer", 3);
    const FacetRepresentation q = m.embed(segment_input("graph networks", InputKind::kQuestion), "q1");
    CHECK(q.input_id == "q1");
    CHECK(q.branch == Branch::kToken);
    CHECK(q.attention.cols() == static_cast<Eigen::Index>(m.tokenize(segment_input("graph networks", InputKind::kQuestion)).length()));
    const InputSequence doc = segment_input("One. Two. Three. Four.", InputKind::kDocument, std::string("Title"));
    const FacetRepresentation d = m.embed(doc);
    CHECK(d.branch == Branch::kSentence);
    CHECK(d.attention.cols() == 5);  // title plus four sentences
    CHECK(d.embeddings.rows() == 3);
    CHECK(d.embeddings.cols() == 8);
}

TEST_CASE("checkpoint round trip is byte-identical") {
    for (const std::string& encoder : {"lookup", "tiny-transformer"}) {
        const UnifarModel m = synth::tiny_model(kTexts, 8, 2, encoder, 5);
        const nlohmann::json meta{{"note", "round trip"}, {"steps", 3}};
        const auto a = temp_dir("ckpt_a"), b = temp_dir("ckpt_b");
        m.save(a, meta);
        const UnifarModel loaded = UnifarModel::load(a);
        loaded.save(b, meta);
        CHECK(files_under(a) == files_under(b));
        CHECK(loaded.config().to_json() == m.config().to_json());
        CHECK(loaded.tokenizer().vocab() == m.tokenizer().vocab());
        const InputSequence seq = segment_input(kTexts[0], InputKind::kDocument);
        const ad::Matrix e0 = m.embed(seq).embeddings, e1 = loaded.embed(seq).embeddings;
        // Parameters are stored as float32.
        CHECK((e0 - e1).cwiseAbs().maxCoeff() < 1e-4);
        CHECK(UnifarModel::load(b).embed(seq).embeddings == e1);
    }
}

TEST_CASE("corrupt checkpoints are rejected") {
    const UnifarModel m = synth::tiny_model(kTexts, 8, 2, "lookup", 5);
    const auto dir = temp_dir("ckpt_bad");
    CHECK_THROWS_AS(UnifarModel::load(dir), Error);
    m.save(dir);
    const std::string manifest = io::read_file(dir / "manifest.json");
    std::filesystem::path blob;
    for (const auto& e : std::filesystem::directory_iterator(dir / "params")) blob = e.path();
    const std::string bytes = io::read_file(blob);
    io::write_file_atomic(blob, bytes.substr(0, bytes.size() - 4));
    CHECK_THROWS_AS(UnifarModel::load(dir), Error);
    io::write_file_atomic(blob, bytes);
    CHECK_NOTHROW(UnifarModel::load(dir));
    io::write_file_atomic(dir / "manifest.json", "{\"format\": \"other\"}");
    CHECK_THROWS_AS(UnifarModel::load(dir), Error);
    io::write_file_atomic(dir / "manifest.json", manifest);
    CHECK_NOTHROW(UnifarModel::load(dir));
}
