#include "unifar/encoding.hpp"

#include "unifar/error.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <set>

namespace unifar {

std::string_view input_kind_name(InputKind kind) {
    return kind == InputKind::kDocument ? "document" : "question";
}

InputKind parse_input_kind(std::string_view name) {
    if (name == "document") return InputKind::kDocument;
    if (name == "question") return InputKind::kQuestion;
    throw Error(ErrorKind::kValidationError, "kind must be \"document\" or \"question\", got \"" + std::string(name) + "\"");
}

SplitterKind parse_splitter_kind(std::string_view name) {
    if (name == "rule") return SplitterKind::kRule;
    if (name == "none") return SplitterKind::kNone;
    throw Error(ErrorKind::kConfigError, "unknown sentence_splitter \"" + std::string(name) + "\"");
}

// ---- segmentation -------------------------------------------------------------

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

bool is_abbreviation(std::string_view text, std::size_t dot) {
    static const std::set<std::string, std::less<>> kAbbrev = {
        "e.g", "i.e", "al", "etc", "fig", "figs", "eq", "eqs", "vs", "dr", "mr", "mrs", "ms", "prof",
        "cf", "no", "approx", "resp", "sec", "ref", "refs", "st", "jr", "sr", "ca", "viz", "incl"};
    std::size_t b = dot;
    while (b > 0 && !is_space(text[b - 1]) && text[b - 1] != '(') --b;
    std::string word(text.substr(b, dot - b));
    if (word.size() == 1 && std::isupper(static_cast<unsigned char>(word[0]))) return true;  // initials
    std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
    return kAbbrev.contains(word);
}

}  // namespace

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    const std::size_t n = text.size();
    auto emit = [&](std::size_t end) {
        std::string s = trim(text.substr(start, end - start));
        if (!s.empty()) out.push_back(std::move(s));
        start = end;
    };
    for (std::size_t i = 0; i < n; ++i) {
        const char c = text[i];
        if (c == '\n') {
            std::size_t k = i + 1;
            while (k < n && is_space(text[k]) && text[k] != '\n') ++k;
            if (k < n && text[k] == '\n') {
                emit(i);
                i = k;
            }
            continue;
        }
        if (c != '.' && c != '!' && c != '?') continue;
        std::size_t j = i + 1;
        while (j < n && (text[j] == '.' || text[j] == '!' || text[j] == '?')) ++j;
        while (j < n && (text[j] == ')' || text[j] == ']' || text[j] == '"' || text[j] == '\'')) ++j;
        if (j == n) {
            emit(j);
            break;
        }
        if (!is_space(text[j])) continue;
        std::size_t k = j;
        while (k < n && is_space(text[k])) ++k;
        if (k == n) {
            emit(j);
            break;
        }
        const unsigned char next = static_cast<unsigned char>(text[k]);
        const bool opens = std::isupper(next) || std::isdigit(next) || next == '"' || next == '\'' || next == '(' ||
                           next == '[';
        if (!opens) continue;
        if (c == '.' && j == i + 1 && is_abbreviation(text, i)) continue;
        emit(j);
        i = j - 1;
    }
    if (start < n) emit(n);
    return out;
}

InputSequence segment_input(const std::vector<std::string>& sentences, InputKind kind, std::optional<std::string> title) {
    InputSequence seq;
    seq.kind = kind;
    for (const std::string& s : sentences) {
        std::string t = trim(s);
        if (!t.empty()) seq.sentences.push_back(std::move(t));
    }
    if (seq.sentences.empty()) throw Error(ErrorKind::kEmptyInput, "no non-empty sentence in input");
    if (title) {
        std::string t = trim(*title);
        if (!t.empty()) seq.title = std::move(t);
    }
    return seq;
}

InputSequence segment_input(std::string_view raw, InputKind kind, std::optional<std::string> title,
                            SplitterKind splitter) {
    std::vector<std::string> parts;
    if (splitter == SplitterKind::kRule) {
        parts = split_sentences(raw);
    } else {
        parts.push_back(std::string(raw));
    }
    return segment_input(parts, kind, std::move(title));
}

// ---- tokenizer ------------------------------------------------------------------

WordTokenizer::WordTokenizer() : WordTokenizer(std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) {}

WordTokenizer::WordTokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
    if (vocab_.size() < 4 || vocab_[kPad] != "[PAD]" || vocab_[kUnk] != "[UNK]" || vocab_[kCls] != "[CLS]" ||
        vocab_[kSep] != "[SEP]") {
        throw Error(ErrorKind::kValidationError, "vocabulary must start with [PAD] [UNK] [CLS] [SEP]");
    }
    sorted_.reserve(vocab_.size());
    for (std::size_t i = 0; i < vocab_.size(); ++i) sorted_.emplace_back(vocab_[i], static_cast<int>(i));
    std::sort(sorted_.begin(), sorted_.end());
    for (std::size_t i = 1; i < sorted_.size(); ++i) {
        if (sorted_[i].first == sorted_[i - 1].first) {
            throw Error(ErrorKind::kDuplicateId, "duplicate vocabulary entry \"" + sorted_[i].first + "\"");
        }
    }
}

std::vector<std::string> WordTokenizer::split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
            continue;
        }
        if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
        if (!std::isspace(c)) words.emplace_back(1, ch);
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

WordTokenizer WordTokenizer::build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const std::string& t : texts) {
        for (std::string& w : split_words(t)) words.insert(std::move(w));
    }
    std::vector<std::string> vocab{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    for (const std::string& w : words) {
        if (w != "[PAD]" && w != "[UNK]" && w != "[CLS]" && w != "[SEP]") vocab.push_back(w);
    }
    return WordTokenizer(std::move(vocab));
}

int WordTokenizer::id(std::string_view word) const {
    auto it = std::lower_bound(sorted_.begin(), sorted_.end(), word,
                               [](const auto& e, std::string_view w) { return std::string_view(e.first) < w; });
    return (it != sorted_.end() && it->first == word) ? it->second : kUnk;
}

std::vector<int> WordTokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const std::string& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

// ---- layout -------------------------------------------------------------------------

TokenizedInput tokenize(const InputSequence& seq, const WordTokenizer& tokenizer, const TokenizerConfig& cfg) {
    if (cfg.max_sequence_length < 2) throw Error(ErrorKind::kConfigError, "max_sequence_length must be >= 2");
    if (seq.sentences.empty()) throw Error(ErrorKind::kEmptyInput, "input has no sentences");
    const auto max_len = static_cast<int>(cfg.max_sequence_length);

    TokenizedInput out;
    out.kind = seq.kind;
    out.has_title = seq.has_title();
    if (out.has_title) {
        std::vector<int> title = tokenizer.encode(*seq.title);
        if (title.empty()) throw Error(ErrorKind::kEmptyInput, "title has no tokens");
        if (static_cast<int>(title.size()) > max_len) {
            throw Error(ErrorKind::kTitleOverflow, "title has " + std::to_string(title.size()) +
                                                       " tokens, window is " + std::to_string(max_len));
        }
        out.token_ids = title;
        out.sentence_boundaries.emplace_back(0, static_cast<int>(title.size()));
        out.context = ContextSource::kTitleSpan;
        out.context_position = 0;
    } else {
        out.token_ids.push_back(cfg.cls_id);
        out.context = ContextSource::kClsToken;
        out.context_position = 0;
    }

    std::pair<int, int> first_partial{-1, -1};
    for (std::size_t i = 0; i < seq.sentences.size(); ++i) {
        if (static_cast<int>(out.token_ids.size()) >= max_len) break;
        if (i > 0 || out.has_title) out.token_ids.push_back(cfg.sep_id);
        const std::vector<int> ids = tokenizer.encode(seq.sentences[i]);
        const int begin = static_cast<int>(out.token_ids.size());
        out.token_ids.insert(out.token_ids.end(), ids.begin(), ids.end());
        const int end = static_cast<int>(out.token_ids.size());
        if (end <= max_len && end > begin) {
            out.sentence_boundaries.emplace_back(begin, end);
            out.sentence_index.push_back(static_cast<int>(i));
        } else if (i == 0 && end > max_len) {
            first_partial = {begin, max_len};
        }
    }
    if (static_cast<int>(out.token_ids.size()) > max_len) out.token_ids.resize(static_cast<std::size_t>(max_len));

    // An untitled input always keeps at least one span so |S| >= 1.
    if (out.sentence_boundaries.empty()) {
        if (first_partial.first < 0 || first_partial.second <= first_partial.first) {
            throw Error(ErrorKind::kEmptyInput, "no sentence tokens fit the window");
        }
        out.sentence_boundaries.push_back(first_partial);
        out.sentence_index.push_back(0);
        out.first_sentence_truncated = true;
    }
    return out;
}

// ---- encoders ---------------------------------------------------------------------

namespace {

ad::Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    ad::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
    }
    return m;
}

ad::Matrix xavier(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    ad::Matrix m(fan_in, fan_out);
    for (Eigen::Index i = 0; i < fan_in; ++i) {
        for (Eigen::Index j = 0; j < fan_out; ++j) m(i, j) = dist(rng);
    }
    return m;
}

void check_ids(const std::vector<int>& ids, std::size_t vocab) {
    if (ids.empty()) throw Error(ErrorKind::kEncoderFailure, "empty token sequence");
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw Error(ErrorKind::kEncoderFailure, "token id " + std::to_string(id) + " outside vocabulary of " +
                                                        std::to_string(vocab));
        }
    }
}

}  // namespace

LookupEncoder::LookupEncoder(std::size_t vocab_size, std::size_t hidden, std::mt19937_64& rng)
    : table_("encoder.token_embedding", ad::ParamGroup::kBase,
             normal_matrix(static_cast<Eigen::Index>(vocab_size), static_cast<Eigen::Index>(hidden), 1.0, rng)) {}

ad::Var LookupEncoder::forward(ad::Binder& bind, const std::vector<int>& token_ids) const {
    check_ids(token_ids, vocab_size());
    return ad::gather_rows(bind(table_), token_ids);
}

TinyTransformerEncoder::TinyTransformerEncoder(std::size_t vocab_size, std::size_t hidden, std::size_t max_positions,
                                               std::mt19937_64& rng) {
    const auto h = static_cast<Eigen::Index>(hidden);
    token_table_ = ad::Parameter("encoder.token_embedding", ad::ParamGroup::kBase,
                                 normal_matrix(static_cast<Eigen::Index>(vocab_size), h, 1.0, rng));
    position_table_ = ad::Parameter("encoder.position_embedding", ad::ParamGroup::kBase,
                                    normal_matrix(static_cast<Eigen::Index>(max_positions), h, 0.1, rng));
    wq_ = ad::Parameter("encoder.attention.wq", ad::ParamGroup::kBase, xavier(h, h, rng));
    wk_ = ad::Parameter("encoder.attention.wk", ad::ParamGroup::kBase, xavier(h, h, rng));
    wv_ = ad::Parameter("encoder.attention.wv", ad::ParamGroup::kBase, xavier(h, h, rng));
    wo_ = ad::Parameter("encoder.attention.wo", ad::ParamGroup::kBase, xavier(h, h, rng));
    norm_gamma_ = ad::Parameter("encoder.norm.gamma", ad::ParamGroup::kBase, ad::Matrix::Ones(1, h));
    norm_beta_ = ad::Parameter("encoder.norm.beta", ad::ParamGroup::kBase, ad::Matrix::Zero(1, h));
}

std::vector<ad::Parameter*> TinyTransformerEncoder::parameters() {
    return {&token_table_, &position_table_, &wq_, &wk_, &wv_, &wo_, &norm_gamma_, &norm_beta_};
}

std::vector<const ad::Parameter*> TinyTransformerEncoder::parameters() const {
    return {&token_table_, &position_table_, &wq_, &wk_, &wv_, &wo_, &norm_gamma_, &norm_beta_};
}

ad::Var TinyTransformerEncoder::forward(ad::Binder& bind, const std::vector<int>& token_ids) const {
    check_ids(token_ids, vocab_size());
    if (token_ids.size() > static_cast<std::size_t>(position_table_.value.rows())) {
        throw Error(ErrorKind::kEncoderFailure, "sequence longer than the position table");
    }
    std::vector<int> positions(token_ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    ad::Var x = ad::add(ad::gather_rows(bind(token_table_), token_ids), ad::gather_rows(bind(position_table_), positions));
    ad::Var q = ad::matmul(x, bind(wq_));
    ad::Var k = ad::matmul(x, bind(wk_));
    ad::Var v = ad::matmul(x, bind(wv_));
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(hidden_size()));
    ad::Var weights = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt_h));
    ad::Var mixed = ad::matmul(ad::matmul(weights, v), bind(wo_));
    return ad::layer_norm(ad::add(x, mixed), bind(norm_gamma_), bind(norm_beta_));
}

std::unique_ptr<BaseEncoder> make_encoder(std::string_view name, std::size_t vocab_size, std::size_t hidden,
                                          std::size_t max_positions, std::mt19937_64& rng) {
    if (name == "lookup") return std::make_unique<LookupEncoder>(vocab_size, hidden, rng);
    if (name == "tiny-transformer") {
        return std::make_unique<TinyTransformerEncoder>(vocab_size, hidden, max_positions, rng);
    }
    throw Error(ErrorKind::kConfigError, "unknown base_model_name \"" + std::string(name) +
                                             "\" (expected lookup or tiny-transformer)");
}

// ---- features ---------------------------------------------------------------------

ad::Matrix encode(const TokenizedInput& tok, const BaseEncoder& base) {
    ad::Tape tape;
    ad::Binder bind(tape, false);
    ad::Matrix out = base.forward(bind, tok.token_ids).value();
    if (!out.allFinite()) throw Error(ErrorKind::kEncoderFailure, "encoder produced non-finite values");
    return out;
}

ad::Var pool_sentences(const ad::Var& tokens, const TokenizedInput& tok) {
    for (const auto& [b, e] : tok.sentence_boundaries) {
        if (e <= b) throw Error(ErrorKind::kEmptyBoundary, "sentence span [" + std::to_string(b) + ", " +
                                                               std::to_string(e) + ") is empty");
        if (b < 0 || e > tokens.rows()) throw Error(ErrorKind::kShapeMismatch, "sentence span outside token matrix");
    }
    if (tok.sentence_boundaries.empty()) throw Error(ErrorKind::kEmptyBoundary, "no sentence spans");
    return ad::mean_spans(tokens, tok.sentence_boundaries);
}

ad::Matrix pool_sentences(const ad::Matrix& tokens, const TokenizedInput& tok) {
    ad::Tape tape;
    return pool_sentences(tape.constant(tokens), tok).value();
}

ad::Var context_vector(const ad::Var& tokens, const ad::Var& sentences, const TokenizedInput& tok) {
    if (tok.context == ContextSource::kTitleSpan) return ad::gather_rows(sentences, {tok.context_position});
    return ad::gather_rows(tokens, {tok.context_position});
}

ad::RowVector context_vector(const ad::Matrix& tokens, const ad::Matrix& sentences, const TokenizedInput& tok) {
    if (tok.context == ContextSource::kTitleSpan) return sentences.row(tok.context_position);
    return tokens.row(tok.context_position);
}

}  // namespace unifar
