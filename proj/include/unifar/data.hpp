#pragma once

#include "unifar/ftu.hpp"
#include "unifar/llm.hpp"

#include "json.hpp"

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace unifar {

// ---- triplets -------------------------------------------------------------------------

struct FacetTriplet {
    std::string query_doc_id;
    std::string facet;  // facet key
    std::string positive_doc_id;
    std::string negative_doc_id;
    bool operator==(const FacetTriplet&) const = default;
};

// Throws ValidationError for repeated ids or an unknown facet key.
void validate_triplet(const FacetTriplet& t, const std::vector<std::string>& facet_keys = kDefaultFacetKeys);

// JSON Lines of {"query_doc_id", "facet", "positive_doc_id", "negative_doc_id"}.
std::vector<FacetTriplet> parse_triplets(std::string_view text, const std::string& source = "<triplets>",
                                         const std::vector<std::string>& facet_keys = kDefaultFacetKeys);
std::vector<FacetTriplet> read_triplet_file(const std::filesystem::path& path,
                                            const std::vector<std::string>& facet_keys = kDefaultFacetKeys);

struct QueryGroup {
    std::string query_doc_id;
    std::map<std::string, std::set<std::string>> pos;  // facet key -> ids
    std::map<std::string, std::set<std::string>> neg;
    bool operator==(const QueryGroup&) const = default;
};

// Throws PosNegConflict listing every (query, facet, id) found on both sides.
std::map<std::string, QueryGroup> merge_triplets(const std::vector<FacetTriplet>& triplets);

// ---- corpus ---------------------------------------------------------------------------

// JSON Lines of {"id", "title", "sentences" | "text", "labels"?, "field"?}. A
// "text" field is split with the rule splitter.
std::map<std::string, LabeledDocument> parse_corpus(std::string_view text, const std::string& source = "<corpus>");
std::map<std::string, LabeledDocument> read_corpus_file(const std::filesystem::path& path);

// ---- prompts --------------------------------------------------------------------------

struct PromptTemplates {
    std::string label_system;
    std::string label_user;  // placeholder {sentences_list}
    std::string question_system;
    // placeholders {facet_type}, {query_text}, {pos_text}, {requirement}
    std::string question_user;
    std::map<std::string, std::string> requirements;  // facet name -> requirement text

    static PromptTemplates defaults();
    // Reads label_system.txt, label_user.txt, question_system.txt,
    // question_user.txt and requirements.txt (`facet = text` lines) from `dir`.
    static PromptTemplates load(const std::filesystem::path& dir);
    void save(const std::filesystem::path& dir) const;
    bool operator==(const PromptTemplates&) const = default;
};

// Replaces `{name}` for names in `values` in one left-to-right pass; other
// braces are kept verbatim.
std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& values);

// ---- labeling -------------------------------------------------------------------------

// 1 - levenshtein / max length over whitespace-collapsed, lower-cased text.
double normalized_edit_similarity(std::string_view a, std::string_view b);

struct LabelOptions {
    std::vector<std::string> facet_names = kDefaultFacetNames;
    RetryPolicy retry;
    double fuzzy_threshold = 0.9;
};

// Parses a `[{"sentence", "category"}, ...]` reply (text outside the outermost
// brackets is ignored) and aligns it to `sentences`, exact matches first.
// Throws ParseError (unparseable or incomplete) or CategoryError.
std::vector<std::string> parse_label_response(const std::string& response, const std::vector<std::string>& sentences,
                                              const LabelOptions& options = {});

// Retries ParseError up to options.retry.max_attempts; CategoryError is final.
std::vector<std::string> label_sentences(const std::vector<std::string>& sentences, LlmClient& llm,
                                         const PromptTemplates& prompts, const LabelOptions& options = {});

// ---- questions ------------------------------------------------------------------------

struct QuestionOptions {
    std::size_t max_positives = 3;
    std::size_t min_words = 25;
    std::size_t max_words = 50;
};

struct GeneratedQuestion {
    std::string text;
    bool length_warning = false;  // still outside the word range after the reprompt
    int attempts = 1;
};

std::size_t count_words(std::string_view text);

// `facet_name` selects sentences labeled with it. Throws EmptyFacetText when
// d_q has none, LlmFailure on an empty reply.
GeneratedQuestion generate_question(const LabeledDocument& query_doc, const std::vector<LabeledDocument>& positives,
                                    const std::string& facet_name, LlmClient& llm, const PromptTemplates& prompts,
                                    const QuestionOptions& options = {});

// ---- assembly -------------------------------------------------------------------------

struct AssembledFtu {
    FacetTrainingUnit ftu;
    std::vector<std::string> missing_questions;  // facet keys
    bool partial() const { return !missing_questions.empty(); }
};

// Complete units are run through validate_ftu(); partial ones are returned
// unvalidated for quarantine. Positives and negatives missing from `docs` are dropped.
AssembledFtu assemble_ftu(const QueryGroup& group, const std::map<std::string, LabeledDocument>& docs,
                          const std::map<std::string, std::string>& questions,
                          const std::vector<std::string>& facet_keys = kDefaultFacetKeys,
                          const std::vector<std::string>& facet_names = kDefaultFacetNames);

// ---- statistics -----------------------------------------------------------------------

struct CorpusStats {
    struct FieldCount {
        std::size_t documents = 0;
        std::size_t questions = 0;
        bool operator==(const FieldCount&) const = default;
    };
    std::size_t ftu_count = 0;
    std::size_t unique_documents = 0;
    std::map<std::string, std::size_t> questions_per_facet;
    // Unique documents per field; questions counted under the query document's field.
    std::map<std::string, FieldCount> fields;
    std::size_t documents_without_field = 0;

    nlohmann::json to_json() const;
    bool operator==(const CorpusStats&) const = default;
};

CorpusStats corpus_stats(const std::vector<FacetTrainingUnit>& ftus,
                         const std::vector<std::string>& facet_keys = kDefaultFacetKeys);

// ---- pipeline -------------------------------------------------------------------------

struct BuildOptions {
    std::vector<std::string> facet_keys = kDefaultFacetKeys;
    std::vector<std::string> facet_names = kDefaultFacetNames;
    PromptTemplates prompts = PromptTemplates::defaults();
    RetryPolicy retry;
    QuestionOptions question;
    double fuzzy_threshold = 0.9;
    // Documents whose corpus entry already carries a complete label list skip the LLM.
    bool reuse_corpus_labels = true;
};

struct BuildResult {
    std::vector<FacetTrainingUnit> ftus;
    std::vector<FacetTrainingUnit> quarantined;
    std::vector<std::string> unlabeled_documents;
    std::vector<std::string> missing_documents;
    std::vector<std::string> dropped_groups;  // query document missing or unlabeled
    std::vector<std::string> length_warnings;  // "<query id>/<facet key>"
    std::vector<std::string> empty_facets;     // "<query id>/<facet key>"

    // Quarantined / (emitted + quarantined); 0 when nothing was assembled.
    double partial_rate() const;
    nlohmann::json report_json() const;
};

// Groups are processed in ascending query id; each document is labeled once.
BuildResult build_ftus(const std::vector<FacetTriplet>& triplets, const std::map<std::string, LabeledDocument>& corpus,
                       LlmClient& llm, const BuildOptions& options = {});

}  // namespace unifar
