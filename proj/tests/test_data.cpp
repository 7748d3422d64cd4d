#include "doctest.h"

#include "support/synthetic.hpp"
#include "unifar/data.hpp"
#include "unifar/error.hpp"
#include "unifar/io.hpp"

#include "httplib.h"
#include "json.hpp"

#include <algorithm>
#include <cstdlib>
#include <random>
#include <thread>

using namespace unifar;
using nlohmann::json;

namespace {

const std::filesystem::path kFixtures = "tests/fixtures/data";

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an Error");
    return ErrorKind::kIoError;
}

std::string words(std::size_t n, const std::string& w = "token") {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + w + std::to_string(i);
    return s;
}

LabeledDocument labeled(const std::string& id, std::vector<std::string> sentences, std::vector<std::string> labels) {
    LabeledDocument d;
    d.id = id;
    d.title = "title of " + id;
    d.sentences = std::move(sentences);
    d.labels = std::move(labels);
    return d;
}

RetryPolicy no_wait() { return RetryPolicy::immediate(); }

}  // namespace

TEST_CASE("merge_triplets groups by query document") {
    SUBCASE("two bg triplets with distinct pairs") {
        auto g = merge_triplets({{"q", "bg", "p1", "n1"}, {"q", "bg", "p2", "n2"}});
        REQUIRE(g.size() == 1);
        CHECK(g.at("q").pos.at("bg") == std::set<std::string>{"p1", "p2"});
        CHECK(g.at("q").neg.at("bg") == std::set<std::string>{"n1", "n2"});
    }
    SUBCASE("single triplet gives singletons") {
        auto g = merge_triplets({{"q", "mt", "p", "n"}});
        CHECK(g.at("q").pos.at("mt").size() == 1);
        CHECK(g.at("q").neg.at("mt").size() == 1);
        CHECK(g.at("q").pos.count("bg") == 0);
    }
    SUBCASE("duplicate triplet deduplicates") {
        auto g = merge_triplets({{"q", "rs", "p", "n"}, {"q", "rs", "p", "n"}});
        CHECK(g.at("q").pos.at("rs").size() == 1);
        CHECK(g.at("q").neg.at("rs").size() == 1);
    }
    SUBCASE("pos/neg conflict lists the offending ids") {
        try {
            merge_triplets({{"q", "bg", "x", "n"}, {"q", "bg", "p", "x"}, {"q", "mt", "x", "y"}});
            FAIL("expected conflict");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::kPosNegConflict);
            CHECK(std::string(e.what()).find("q/bg/x") != std::string::npos);
            CHECK(std::string(e.what()).find("q/mt") == std::string::npos);
        }
    }
    SUBCASE("same id positive in one facet and negative in another is allowed") {
        CHECK_NOTHROW(merge_triplets({{"q", "bg", "x", "n"}, {"q", "mt", "p", "x"}}));
    }
}

TEST_CASE("merge_triplets is idempotent and order-invariant") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<FacetTriplet> ts;
        for (int i = 0; i < 30; ++i) {
            const int q = static_cast<int>(rng() % 4);
            const int p = 10 + static_cast<int>(rng() % 5);
            const int n = 20 + static_cast<int>(rng() % 5);
            ts.push_back({"q" + std::to_string(q), kDefaultFacetKeys[rng() % 3], "d" + std::to_string(p),
                          "d" + std::to_string(n)});
        }
        const auto base = merge_triplets(ts);
        auto shuffled = ts;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        CHECK(merge_triplets(shuffled) == base);
        auto doubled = ts;
        doubled.insert(doubled.end(), ts.begin(), ts.end());
        CHECK(merge_triplets(doubled) == base);
    }
}

TEST_CASE("triplet validation and parsing") {
    CHECK(kind_of([] { validate_triplet({"a", "bg", "a", "b"}); }) == ErrorKind::kValidationError);
    CHECK(kind_of([] { validate_triplet({"a", "bg", "b", "b"}); }) == ErrorKind::kValidationError);
    CHECK(kind_of([] { validate_triplet({"a", "method", "b", "c"}); }) == ErrorKind::kValidationError);
    CHECK_NOTHROW(validate_triplet({"a", "rs", "b", "c"}));

    const std::string text =
        R"({"query_doc_id":"a","facet":"bg","positive_doc_id":"b","negative_doc_id":"c"})"
        "\n\n"
        R"({"query_doc_id":"a","facet":"bg","positive_doc_id":"b","negative_doc_id":"b"})"
        "\n";
    try {
        parse_triplets(text, "t.jsonl");
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::kValidationError);
        CHECK(std::string(e.what()).find("t.jsonl:3") != std::string::npos);
    }
    CHECK(parse_triplets(text.substr(0, text.find('\n'))).size() == 1);
}

TEST_CASE("corpus parsing") {
    auto corpus = read_corpus_file(kFixtures / "corpus.jsonl");
    REQUIRE(corpus.size() == 9);
    // Odd-numbered entries carry raw text and go through the splitter.
    CHECK(corpus.at("p1").sentences.size() == 5);
    CHECK(corpus.at("p0").sentences.size() == 5);
    CHECK(corpus.at("p2").field == std::optional<std::string>("Economics"));
    CHECK(kind_of([] { parse_corpus("{\"id\":\"a\",\"sentences\":[\"x .\"]}\n{\"id\":\"a\",\"sentences\":[\"y .\"]}"); }) ==
          ErrorKind::kDuplicateId);
    CHECK(kind_of([] { parse_corpus("{\"id\":\"a\",\"sentences\":[]}"); }) == ErrorKind::kEmptyInput);
}

TEST_CASE("prompt templates") {
    const auto p = PromptTemplates::defaults();
    SUBCASE("shipped files match the built-in defaults") { CHECK(PromptTemplates::load("prompts") == p); }
    SUBCASE("labeling prompt wording") {
        CHECK(p.label_system ==
              "You are an expert in classifying sentences from scientific paper abstracts into rhetorical roles.");
        CHECK(p.label_user.find("classify each sentence into one of the following categories: "
                                "{background, method, result}") != std::string::npos);
        CHECK(p.label_user.find("Please output only the structured JSON result without any explanation.") !=
              std::string::npos);
    }
    SUBCASE("question prompt wording and requirements") {
        CHECK(p.question_user.find("The query should be between 25-50 words.") != std::string::npos);
        CHECK(p.question_user.rfind("Generated {facet_type} query:") != std::string::npos);
        CHECK(p.requirements.at("background") ==
              "research questions, research motivation, and limitations of existing studies");
        CHECK(p.requirements.at("method") == "technical methods, experimental design, and innovations");
        CHECK(p.requirements.at("result") == "key findings, data support, and conclusions");
    }
    SUBCASE("save/load round trip") {
        const auto dir = std::filesystem::temp_directory_path() / "unifar_prompts_rt";
        std::filesystem::remove_all(dir);
        p.save(dir);
        CHECK(PromptTemplates::load(dir) == p);
        std::filesystem::remove_all(dir);
    }
}

TEST_CASE("render_template substitutes known names once") {
    CHECK(render_template("a {x} b {y} {z}", {{"x", "1"}, {"y", "{x}"}}) == "a 1 b {x} {z}");
    CHECK(render_template("{background, method, result}", {{"background", "no"}}) == "{background, method, result}");
    CHECK(render_template("tail {", {{"x", "1"}}) == "tail {");
    const std::string user = render_template(PromptTemplates::defaults().label_user,
                                             {{"sentences_list", json(std::vector<std::string>{"A.", "B"}).dump()}});
    CHECK(user.find("abstract:[\"A.\",\"B\"]\n") != std::string::npos);
}

TEST_CASE("normalized_edit_similarity") {
    CHECK(normalized_edit_similarity("kitten", "sitting") == doctest::Approx(1.0 - 3.0 / 7.0));
    CHECK(normalized_edit_similarity("", "") == 1.0);
    CHECK(normalized_edit_similarity("abc", "") == 0.0);
    CHECK(normalized_edit_similarity("We  Propose X.", "we propose x.") == 1.0);
    CHECK(normalized_edit_similarity("abcd", "abce") == doctest::Approx(0.75));
}

TEST_CASE("label_sentences") {
    const auto prompts = PromptTemplates::defaults();
    LabelOptions opts;
    opts.retry = no_wait();
    const std::vector<std::string> s{"Sentence1", "Sentence2", "Sentence3"};
    const std::string table_format =
        R"([{ "sentence": "Sentence1", "category": "background" },)"
        "\n\n"
        R"({ "sentence": "Sentence2", "category": "method" },)"
        "\n\n"
        R"({ "sentence": "Sentence3", "category": "result" }])";

    SUBCASE("expected output format") {
        synth::ScriptedLlm llm({table_format});
        CHECK(label_sentences(s, llm, prompts, opts) == std::vector<std::string>{"background", "method", "result"});
        REQUIRE(llm.prompts.size() == 1);
        CHECK(llm.prompts[0].find(R"(abstract:["Sentence1","Sentence2","Sentence3"])") != std::string::npos);
    }
    SUBCASE("malformed twice then valid succeeds on the third attempt") {
        synth::ScriptedLlm llm({"Sure! Here you go", "[{\"sentence\": \"Sentence1\",", "```json\n" + table_format + "\n```"});
        CHECK(label_sentences(s, llm, prompts, opts) == std::vector<std::string>{"background", "method", "result"});
        CHECK(llm.remaining() == 0);
    }
    SUBCASE("malformed on every attempt is a ParseError") {
        synth::ScriptedLlm llm({"no", "no", "no", "spare"});
        CHECK(kind_of([&] { label_sentences(s, llm, prompts, opts); }) == ErrorKind::kParseError);
        CHECK(llm.remaining() == 1);
    }
    SUBCASE("omitting a sentence is a ParseError") {
        const std::string missing =
            R"([{"sentence":"Sentence1","category":"background"},{"sentence":"Sentence3","category":"result"}])";
        CHECK(kind_of([&] { parse_label_response(missing, s); }) == ErrorKind::kParseError);
        synth::ScriptedLlm llm({missing, missing, missing});
        CHECK(kind_of([&] { label_sentences(s, llm, prompts, opts); }) == ErrorKind::kParseError);
    }
    SUBCASE("category outside the schema is a CategoryError and not retried") {
        synth::ScriptedLlm llm(
            {R"([{"sentence":"Sentence1","category":"intro"},{"sentence":"Sentence2","category":"method"},{"sentence":"Sentence3","category":"result"}])",
             table_format});
        CHECK(kind_of([&] { label_sentences(s, llm, prompts, opts); }) == ErrorKind::kCategoryError);
        CHECK(llm.remaining() == 1);
    }
    SUBCASE("entries align by text, not position") {
        const std::string shuffled =
            R"([{"sentence":"Sentence3","category":"result"},{"sentence":"Sentence1","category":"background"},{"sentence":"Sentence2","category":"method"}])";
        CHECK(parse_label_response(shuffled, s) == std::vector<std::string>{"background", "method", "result"});
    }
    SUBCASE("category case and padding are normalized") {
        const std::string r =
            R"([{"sentence":"Sentence1","category":" Background "},{"sentence":"Sentence2","category":"METHOD"},{"sentence":"Sentence3","category":"result"}])";
        CHECK(parse_label_response(r, s) == std::vector<std::string>{"background", "method", "result"});
    }
    SUBCASE("fuzzy alignment accepts light paraphrase and rejects heavy edits") {
        const std::vector<std::string> doc{"We propose a graph network for protein folding.",
                                           "It improves accuracy on three benchmarks."};
        const std::string close =
            R"([{"sentence":"We propose a graph network for protein folding","category":"method"},{"sentence":"it improves accuracy on three benchmark","category":"result"}])";
        CHECK(parse_label_response(close, doc) == std::vector<std::string>{"method", "result"});
        const std::string far =
            R"([{"sentence":"We propose a graph network for protein folding.","category":"method"},{"sentence":"Accuracy rises.","category":"result"}])";
        CHECK(kind_of([&] { parse_label_response(far, doc); }) == ErrorKind::kParseError);
    }
    SUBCASE("duplicate sentences consume entries in order") {
        const std::vector<std::string> doc{"Same.", "Same.", "Other."};
        const std::string r =
            R"([{"sentence":"Same.","category":"background"},{"sentence":"Same.","category":"method"},{"sentence":"Other.","category":"result"}])";
        CHECK(parse_label_response(r, doc) == std::vector<std::string>{"background", "method", "result"});
    }
    SUBCASE("empty document") {
        synth::ScriptedLlm llm({});
        CHECK(kind_of([&] { label_sentences({}, llm, prompts, opts); }) == ErrorKind::kEmptyInput);
    }
}

TEST_CASE("replayed labeling is deterministic") {
    const auto prompts = PromptTemplates::defaults();
    const std::vector<std::string> s{"bgx a .", "mtx b .", "rsx c .", "plain d ."};
    synth::KeywordLlm live;
    RecordingLlmClient rec(live);
    const auto first = label_sentences(s, rec, prompts);
    for (int i = 0; i < 3; ++i) {
        ReplayLlmClient replay(rec.entries());
        CHECK(label_sentences(s, replay, prompts) == first);
    }
    CHECK(first == std::vector<std::string>{"background", "method", "result", "background"});
}

TEST_CASE("generate_question") {
    const auto prompts = PromptTemplates::defaults();
    const LabeledDocument dq = labeled("q", {"Motivation sentence one.", "We use a method.", "Results hold."},
                                       {"background", "method", "result"});
    std::vector<LabeledDocument> pos;
    for (int i = 0; i < 5; ++i) {
        pos.push_back(labeled("p" + std::to_string(i), {"Pos bg " + std::to_string(i) + ".", "Pos mt " + std::to_string(i) + "."},
                              {"background", "method"}));
    }

    SUBCASE("30-word reply accepted") {
        synth::ScriptedLlm llm({words(30)});
        const auto q = generate_question(dq, pos, "background", llm, prompts);
        CHECK(q.text == words(30));
        CHECK_FALSE(q.length_warning);
        CHECK(q.attempts == 1);
        const std::string& prompt = llm.prompts.at(0);
        CHECK(prompt.find("background sentences from seed paper:\nMotivation sentence one.\n") != std::string::npos);
        CHECK(prompt.find("Pos bg 0.\nPos bg 1.\nPos bg 2.\n") != std::string::npos);
        CHECK(prompt.find("Pos bg 3.") == std::string::npos);
        CHECK(prompt.find("We use a method.") == std::string::npos);
        CHECK(prompt.find("highlights research questions, research motivation, and limitations of existing studies.") !=
              std::string::npos);
    }
    SUBCASE("10 words then 30 words accepted on the reprompt") {
        synth::ScriptedLlm llm({words(10), words(30, "w")});
        const auto q = generate_question(dq, pos, "method", llm, prompts);
        CHECK(q.text == words(30, "w"));
        CHECK(q.attempts == 2);
        CHECK_FALSE(q.length_warning);
        CHECK(llm.prompts[0] == llm.prompts[1]);
    }
    SUBCASE("still out of range after the reprompt is accepted with a warning") {
        synth::ScriptedLlm llm({words(10), words(60)});
        const auto q = generate_question(dq, pos, "method", llm, prompts);
        CHECK(q.text == words(60));
        CHECK(q.length_warning);
    }
    SUBCASE("word bounds are inclusive") {
        synth::ScriptedLlm a({words(25)}), b({words(50)});
        CHECK(generate_question(dq, pos, "result", a, prompts).attempts == 1);
        CHECK(generate_question(dq, pos, "result", b, prompts).attempts == 1);
    }
    SUBCASE("reply is flattened to one line and unquoted") {
        synth::ScriptedLlm llm({"\"" + words(15) + "\n" + words(15, "x") + "\"\n"});
        const auto q = generate_question(dq, pos, "result", llm, prompts);
        CHECK(q.text == words(15) + " " + words(15, "x"));
        CHECK(q.text.find('\n') == std::string::npos);
    }
    SUBCASE("positives without facet text are skipped") {
        synth::ScriptedLlm llm({words(30)});
        generate_question(dq, pos, "result", llm, prompts);
        CHECK(llm.prompts[0].find("result sentences from positive papers:\n\n") != std::string::npos);
    }
    SUBCASE("no method sentences in d_q") {
        const LabeledDocument bare = labeled("b", {"Only background."}, {"background"});
        synth::ScriptedLlm llm({words(30)});
        CHECK(kind_of([&] { generate_question(bare, pos, "method", llm, prompts); }) == ErrorKind::kEmptyFacetText);
        CHECK(llm.remaining() == 1);
    }
    SUBCASE("count_words splits on whitespace") {
        CHECK(count_words("") == 0);
        CHECK(count_words("  a\tb\n c  ") == 3);
        CHECK(count_words(words(37)) == 37);
    }
}

TEST_CASE("assemble_ftu") {
    std::map<std::string, LabeledDocument> docs;
    for (const char* id : {"q", "p1", "p2", "n1", "n2"}) {
        docs[id] = labeled(id, {"a bg .", "b mt .", "c rs ."}, {"background", "method", "result"});
    }
    QueryGroup g{"q", {{"bg", {"p1"}}, {"mt", {"p2", "p1"}}, {"rs", {"p2"}}}, {{"bg", {"n1"}}, {"mt", {"n2"}}, {"rs", {"n1", "n2"}}}};
    const std::map<std::string, std::string> questions{{"bg", "bg question"}, {"mt", "mt question"}, {"rs", "rs question"}};

    SUBCASE("complete inputs give one validated FTU") {
        const auto a = assemble_ftu(g, docs, questions);
        CHECK_FALSE(a.partial());
        CHECK(a.ftu.questions.size() == 3);
        CHECK(a.ftu.pos.at("mt").size() == 2);
        CHECK(a.ftu.pos.at("mt")[0].id == "p1");
        CHECK_NOTHROW(validate_ftu(a.ftu));
    }
    SUBCASE("missing rs question is quarantined") {
        auto q = questions;
        q.erase("rs");
        const auto a = assemble_ftu(g, docs, q);
        CHECK(a.partial());
        CHECK(a.missing_questions == std::vector<std::string>{"rs"});
    }
    SUBCASE("round trip through the FTU file format") {
        const auto a = assemble_ftu(g, docs, questions);
        const std::string text = serialize_ftus({a.ftu});
        const auto back = parse_ftus(text);
        REQUIRE(back.size() == 1);
        CHECK(back[0] == a.ftu);
        CHECK(serialize_ftus(back) == text);
    }
    SUBCASE("unlabeled documents are dropped, an unlabeled query is an error") {
        auto partial_docs = docs;
        partial_docs.erase("p2");
        const auto a = assemble_ftu(g, partial_docs, questions);
        CHECK(a.ftu.pos.at("mt").size() == 1);
        CHECK(a.ftu.pos.count("rs") == 0);
        partial_docs.erase("q");
        CHECK(kind_of([&] { assemble_ftu(g, partial_docs, questions); }) == ErrorKind::kValidationError);
    }
    SUBCASE("invalid labels surface as ValidationError with a field path") {
        auto bad = docs;
        bad["n2"].labels.pop_back();
        try {
            assemble_ftu(g, bad, questions);
            FAIL("expected error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::kValidationError);
            CHECK(std::string(e.what()).find("neg.mt[0].labels") != std::string::npos);
        }
    }
}

TEST_CASE("corpus_stats") {
    SUBCASE("empty") {
        const auto s = corpus_stats({});
        CHECK(s.ftu_count == 0);
        CHECK(s.unique_documents == 0);
        CHECK(s.questions_per_facet == std::map<std::string, std::size_t>{{"bg", 0}, {"mt", 0}, {"rs", 0}});
        CHECK(s.fields.empty());
    }
    SUBCASE("shared positive counted once") {
        std::mt19937_64 rng(3);
        auto a = synth::random_ftu(rng, "a", 1, 1);
        auto b = synth::random_ftu(rng, "b", 1, 1);
        b.pos["bg"][0] = a.pos["bg"][0];
        CHECK(corpus_stats({a}).unique_documents == 7);
        CHECK(corpus_stats({a, b}).unique_documents == 13);
    }
    SUBCASE("10-FTU fixture matches the hand tally") {
        const auto ftus = read_ftu_file(kFixtures / "stats_10.jsonl", false);
        const auto s = corpus_stats(ftus);
        CHECK(s.ftu_count == 10);
        CHECK(s.unique_documents == 27);
        CHECK(s.questions_per_facet == std::map<std::string, std::size_t>{{"bg", 10}, {"mt", 9}, {"rs", 9}});
        CHECK(s.fields.at("Medicine") == CorpusStats::FieldCount{12, 12});
        CHECK(s.fields.at("Computer Science") == CorpusStats::FieldCount{6, 5});
        CHECK(s.fields.at("Biology") == CorpusStats::FieldCount{5, 5});
        CHECK(s.fields.size() == 3);
        CHECK(s.documents_without_field == 4);
        const json j = s.to_json();
        CHECK(j["fields"]["Medicine"]["documents"] == 12);
        CHECK(j["questions_per_facet"]["mt"] == 9);
    }
}

TEST_CASE("transcript replay client") {
    std::vector<TranscriptEntry> t{{"s", "u", "first"}, {"s", "v", "other"}, {"s", "u", "second"}};
    ReplayLlmClient replay(t);
    CHECK(replay.remaining() == 3);
    CHECK(replay.complete("s", "u") == "first");
    CHECK(replay.complete("s", "u") == "second");
    CHECK(kind_of([&] { replay.complete("s", "u"); }) == ErrorKind::kLlmFailure);
    CHECK(kind_of([&] { replay.complete("x", "v"); }) == ErrorKind::kLlmFailure);
    CHECK(replay.complete("s", "v") == "other");
    CHECK(parse_transcript(serialize_transcript(t)) == t);
    CHECK(kind_of([] { parse_transcript("{\"system\":1}"); }) == ErrorKind::kParseError);
}

TEST_CASE("retry backoff is exponential") {
    RetryPolicy p;
    p.base_delay = std::chrono::milliseconds(100);
    CHECK(p.delay_before(1).count() == 0);
    CHECK(p.delay_before(2).count() == 100);
    CHECK(p.delay_before(3).count() == 200);
    CHECK(p.delay_before(4).count() == 400);
}

TEST_CASE("build_ftus pipeline") {
    const auto corpus = read_corpus_file(kFixtures / "corpus.jsonl");
    const auto triplets = read_triplet_file(kFixtures / "triplets.jsonl");
    BuildOptions opts;
    opts.retry = no_wait();

    SUBCASE("recorded transcript gives byte-identical output") {
        synth::KeywordLlm live;
        RecordingLlmClient rec(live);
        const auto first = build_ftus(triplets, corpus, rec, opts);
        REQUIRE(first.ftus.size() == 3);
        CHECK(first.quarantined.empty());
        CHECK(first.length_warnings.empty());
        for (const auto& f : first.ftus) CHECK_NOTHROW(validate_ftu(f));
        // Each document is labeled once, plus 3 questions per group.
        CHECK(live.calls == 9 + 9);

        ReplayLlmClient r1(rec.entries()), r2(rec.entries());
        const auto a = build_ftus(triplets, corpus, r1, opts);
        const auto b = build_ftus(triplets, corpus, r2, opts);
        CHECK(serialize_ftus(a.ftus) == serialize_ftus(first.ftus));
        CHECK(serialize_ftus(a.ftus) == serialize_ftus(b.ftus));
        CHECK(r1.remaining() == 0);
    }
    SUBCASE("shipped transcript replays") {
        auto replay = ReplayLlmClient::from_file(kFixtures / "transcript.jsonl");
        const auto res = build_ftus(triplets, corpus, replay, opts);
        CHECK(res.ftus.size() == 3);
        CHECK(serialize_ftus(res.ftus) == io::read_file(kFixtures / "ftus.jsonl"));
    }
    SUBCASE("merged groups appear in the FTUs") {
        synth::KeywordLlm live;
        const auto res = build_ftus(triplets, corpus, live, opts);
        const auto& f0 = res.ftus.at(0);
        CHECK(f0.id() == "p0");
        CHECK(f0.pos.at("bg").size() == 1);
        CHECK(f0.neg.at("bg").size() == 2);
        CHECK(f0.query_doc.labels ==
              std::vector<std::string>{"background", "background", "method", "method", "result"});
    }
    SUBCASE("corpus labels are reused") {
        auto pre = corpus;
        for (auto& [id, d] : pre) d.labels = {"background", "background", "method", "method", "result"};
        synth::KeywordLlm live;
        const auto res = build_ftus(triplets, pre, live, opts);
        CHECK(live.calls == 9);
        CHECK(res.ftus.size() == 3);
    }
    SUBCASE("unlabelable, missing and facet-less documents") {
        auto broken = corpus;
        // p0 loses its method sentences: its method question cannot be asked.
        broken["p0"].sentences = {"bgz one .", "rsz two ."};
        broken.erase("p8");
        class Flaky : public LlmClient {
        public:
            synth::KeywordLlm inner;
            std::string complete(const std::string& s, const std::string& u) override {
                if (u.find("On enzyme") != std::string::npos || u.find("enzyme") != std::string::npos) return "garbage";
                return inner.complete(s, u);
            }
        } flaky;
        const auto res = build_ftus(triplets, broken, flaky, opts);
        CHECK(res.missing_documents == std::vector<std::string>{"p8"});
        CHECK(res.unlabeled_documents == std::vector<std::string>{"p6"});
        CHECK(res.empty_facets == std::vector<std::string>{"p0/mt"});
        CHECK(res.quarantined.size() == 1);
        CHECK(res.quarantined[0].id() == "p0");
        CHECK(res.ftus.size() == 2);
        CHECK(res.partial_rate() == doctest::Approx(1.0 / 3.0));
        for (const auto& f : res.ftus) {
            CHECK_NOTHROW(validate_ftu(f));
            for (const auto* side : {&f.pos, &f.neg}) {
                for (const auto& [k, docs] : *side) {
                    for (const auto& d : docs) {
                        CHECK(d.id != "p6");
                        CHECK(d.id != "p8");
                    }
                }
            }
        }
        const json report = res.report_json();
        CHECK(report["quarantined"] == 1);
    }
    SUBCASE("empty triplet list") {
        synth::KeywordLlm live;
        const auto res = build_ftus({}, corpus, live, opts);
        CHECK(res.ftus.empty());
        CHECK(res.partial_rate() == 0.0);
        CHECK(live.calls == 0);
    }
}

TEST_CASE("HTTP client speaks the chat-completions protocol") {
    httplib::Server server;
    int hits = 0;
    std::string seen_auth, seen_body;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        seen_auth = req.get_header_value("Authorization");
        seen_body = req.body;
        const json body = json::parse(req.body);
        const std::string user = body["messages"][1]["content"];
        if (user == "flaky" && hits == 1) {
            res.status = 503;
            return;
        }
        if (user == "reject") {
            res.status = 400;
            res.set_content("bad request", "text/plain");
            return;
        }
        json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", "echo: " + user}}}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpLlmOptions o;
    o.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1/";
    o.api_key = "secret";
    o.model = "test-model";
    o.retry = RetryPolicy::immediate();
    HttpLlmClient client(o);

    CHECK(client.complete("sys", "hello") == "echo: hello");
    CHECK(seen_auth == "Bearer secret");
    const json sent = json::parse(seen_body);
    CHECK(sent["model"] == "test-model");
    CHECK(sent["messages"][0]["role"] == "system");
    CHECK(sent["messages"][0]["content"] == "sys");

    hits = 0;
    CHECK(client.complete("sys", "flaky") == "echo: flaky");
    CHECK(hits == 2);
    CHECK(kind_of([&] { client.complete("sys", "reject"); }) == ErrorKind::kLlmFailure);

    server.stop();
    thread.join();
}

TEST_CASE("HTTP options come from the environment") {
    ::unsetenv("UNIFAR_LLM_API_KEY");
    CHECK_FALSE(HttpLlmOptions::from_env().has_value());
    ::setenv("UNIFAR_LLM_API_KEY", "k", 1);
    ::setenv("UNIFAR_LLM_MODEL", "m", 1);
    ::setenv("UNIFAR_LLM_BASE_URL", "http://localhost:1/v1", 1);
    const auto o = HttpLlmOptions::from_env();
    REQUIRE(o.has_value());
    CHECK(o->api_key == "k");
    CHECK(o->model == "m");
    CHECK(o->base_url == "http://localhost:1/v1");
    ::unsetenv("UNIFAR_LLM_API_KEY");
    ::unsetenv("UNIFAR_LLM_MODEL");
    ::unsetenv("UNIFAR_LLM_BASE_URL");
}
