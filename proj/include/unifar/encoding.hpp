#pragma once

#include "unifar/autodiff.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace unifar {

enum class InputKind { kDocument, kQuestion };

std::string_view input_kind_name(InputKind kind);
InputKind parse_input_kind(std::string_view name);

// One document or question as an ordered list of sentences.
struct InputSequence {
    InputKind kind = InputKind::kQuestion;
    std::optional<std::string> title;
    std::vector<std::string> sentences;

    // A title only changes the layout for documents.
    bool has_title() const { return kind == InputKind::kDocument && title.has_value(); }
};

enum class SplitterKind { kRule, kNone };

SplitterKind parse_splitter_kind(std::string_view name);

// Deterministic rule-based splitter: breaks after . ! ? (plus closing quotes
// or brackets) when followed by whitespace and an uppercase letter, digit or
// opening quote/bracket, and on blank lines. Common abbreviations do not end
// a sentence.
std::vector<std::string> split_sentences(std::string_view text);

InputSequence segment_input(std::string_view raw, InputKind kind, std::optional<std::string> title = std::nullopt,
                            SplitterKind splitter = SplitterKind::kRule);
InputSequence segment_input(const std::vector<std::string>& sentences, InputKind kind,
                            std::optional<std::string> title = std::nullopt);

// ---- tokenizer ----------------------------------------------------------------

// Word-level vocabulary tokenizer. Words are maximal runs of ASCII
// alphanumerics (lower-cased) or non-ASCII bytes; every other non-space
// character is its own token.
class WordTokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;

    WordTokenizer();
    explicit WordTokenizer(std::vector<std::string> vocab);

    // Vocabulary = specials followed by every distinct word, sorted.
    static WordTokenizer build(const std::vector<std::string>& texts);
    static std::vector<std::string> split_words(std::string_view text);

    std::vector<int> encode(std::string_view text) const;
    const std::string& token(int id) const { return vocab_.at(static_cast<std::size_t>(id)); }
    int id(std::string_view word) const;
    std::size_t size() const { return vocab_.size(); }
    const std::vector<std::string>& vocab() const { return vocab_; }

private:
    std::vector<std::string> vocab_;
    std::vector<std::pair<std::string, int>> sorted_;  // word -> id, sorted for lookup
};

// ---- serialized layout --------------------------------------------------------

struct TokenizerConfig {
    std::size_t max_sequence_length = 512;
    int cls_id = WordTokenizer::kCls;
    int sep_id = WordTokenizer::kSep;
};

enum class ContextSource { kTitleSpan, kClsToken };

struct TokenizedInput {
    InputKind kind = InputKind::kQuestion;
    std::vector<int> token_ids;
    // Half-open token spans, title first when present; separators excluded.
    std::vector<std::pair<int, int>> sentence_boundaries;
    ContextSource context = ContextSource::kClsToken;
    // Span index for kTitleSpan, token index for kClsToken.
    int context_position = 0;
    bool has_title = false;
    // Index into InputSequence::sentences of each content span (title excluded).
    std::vector<int> sentence_index;
    // Set when the first sentence alone overflowed an untitled input and was kept truncated.
    bool first_sentence_truncated = false;

    std::size_t length() const { return token_ids.size(); }
    std::size_t sentence_count() const { return sentence_boundaries.size(); }
};

// Documents with a title: `Title [SEP] S1 [SEP] ... [SEP] Sd`.
// Questions and untitled documents: `[CLS] S1 [SEP] ... [SEP] Sq`.
// Tail truncation at max_sequence_length; a sentence cut mid-way gets no span.
TokenizedInput tokenize(const InputSequence& seq, const WordTokenizer& tokenizer, const TokenizerConfig& cfg);

// ---- base encoders -------------------------------------------------------------

class BaseEncoder {
public:
    virtual ~BaseEncoder() = default;

    virtual std::string name() const = 0;
    virtual std::size_t hidden_size() const = 0;
    virtual std::size_t vocab_size() const = 0;
    // L × h contextual token embeddings.
    virtual ad::Var forward(ad::Binder& bind, const std::vector<int>& token_ids) const = 0;
    virtual std::vector<ad::Parameter*> parameters() = 0;
    virtual std::vector<const ad::Parameter*> parameters() const = 0;
    // Static (context-free) input embeddings, used to seed anchors from words.
    virtual ad::RowVector static_embedding(int token_id) const = 0;
};

// Embedding lookup only: row i of T is the table row of token i.
class LookupEncoder final : public BaseEncoder {
public:
    LookupEncoder(std::size_t vocab_size, std::size_t hidden, std::mt19937_64& rng);

    std::string name() const override { return "lookup"; }
    std::size_t hidden_size() const override { return static_cast<std::size_t>(table_.value.cols()); }
    std::size_t vocab_size() const override { return static_cast<std::size_t>(table_.value.rows()); }
    ad::Var forward(ad::Binder& bind, const std::vector<int>& token_ids) const override;
    std::vector<ad::Parameter*> parameters() override { return {&table_}; }
    std::vector<const ad::Parameter*> parameters() const override { return {&table_}; }
    ad::RowVector static_embedding(int token_id) const override { return table_.value.row(token_id); }

private:
    ad::Parameter table_;
};

// Lookup plus learned positions and one single-head self-attention block:
// T = LayerNorm(X + softmax(X Wq (X Wk)^T / sqrt(h)) X Wv Wo), X = E[ids] + P[0..L).
class TinyTransformerEncoder final : public BaseEncoder {
public:
    TinyTransformerEncoder(std::size_t vocab_size, std::size_t hidden, std::size_t max_positions,
                           std::mt19937_64& rng);

    std::string name() const override { return "tiny-transformer"; }
    std::size_t hidden_size() const override { return static_cast<std::size_t>(token_table_.value.cols()); }
    std::size_t vocab_size() const override { return static_cast<std::size_t>(token_table_.value.rows()); }
    ad::Var forward(ad::Binder& bind, const std::vector<int>& token_ids) const override;
    std::vector<ad::Parameter*> parameters() override;
    std::vector<const ad::Parameter*> parameters() const override;
    ad::RowVector static_embedding(int token_id) const override { return token_table_.value.row(token_id); }

private:
    ad::Parameter token_table_;
    ad::Parameter position_table_;
    ad::Parameter wq_, wk_, wv_, wo_;
    ad::Parameter norm_gamma_, norm_beta_;
};

std::unique_ptr<BaseEncoder> make_encoder(std::string_view name, std::size_t vocab_size, std::size_t hidden,
                                          std::size_t max_positions, std::mt19937_64& rng);

// ---- multi-granularity features --------------------------------------------

ad::Matrix encode(const TokenizedInput& tok, const BaseEncoder& base);

ad::Var pool_sentences(const ad::Var& tokens, const TokenizedInput& tok);
ad::Matrix pool_sentences(const ad::Matrix& tokens, const TokenizedInput& tok);

// Title row of S for titled documents, else the [CLS] row of T.
ad::Var context_vector(const ad::Var& tokens, const ad::Var& sentences, const TokenizedInput& tok);
ad::RowVector context_vector(const ad::Matrix& tokens, const ad::Matrix& sentences, const TokenizedInput& tok);

}  // namespace unifar
