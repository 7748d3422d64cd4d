#include "unifar/data.hpp"

#include "unifar/error.hpp"
#include "unifar/io.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <thread>

namespace unifar {

using nlohmann::json;

namespace {

// Calls fn(line_no, line) for each non-blank line; rethrows json errors as ParseError.
void for_each_jsonl(std::string_view text, const std::string& source,
                    const std::function<void(const std::string& where, const json&)>& fn) {
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw Error(ErrorKind::kParseError, where + ": " + e.what());
        }
        try {
            fn(where, j);
        } catch (const json::exception& e) {
            throw Error(ErrorKind::kParseError, where + ": " + e.what());
        } catch (const Error& e) {
            throw Error(e.kind(), where + ": " + e.detail());
        }
    }
}

std::string trim(std::string_view s) {
    const std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const std::size_t e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::string collapse_whitespace(std::string_view s) {
    std::string out;
    bool space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c)) != 0) {
            space = !out.empty();
            continue;
        }
        if (space) out += ' ';
        space = false;
        out += c;
    }
    return out;
}

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

bool is_blank(const std::string& s) { return s.find_first_not_of(" \t\r\n") == std::string::npos; }

}  // namespace

// ---- triplets -------------------------------------------------------------------------

void validate_triplet(const FacetTriplet& t, const std::vector<std::string>& facet_keys) {
    if (t.query_doc_id.empty() || t.positive_doc_id.empty() || t.negative_doc_id.empty()) {
        throw Error(ErrorKind::kValidationError, "triplet has an empty id");
    }
    if (t.query_doc_id == t.positive_doc_id || t.query_doc_id == t.negative_doc_id ||
        t.positive_doc_id == t.negative_doc_id) {
        throw Error(ErrorKind::kValidationError, "triplet ids are not distinct (" + t.query_doc_id + ", " +
                                                     t.positive_doc_id + ", " + t.negative_doc_id + ")");
    }
    if (std::find(facet_keys.begin(), facet_keys.end(), t.facet) == facet_keys.end()) {
        throw Error(ErrorKind::kValidationError, "triplet facet \"" + t.facet + "\" is not a facet key");
    }
}

std::vector<FacetTriplet> parse_triplets(std::string_view text, const std::string& source,
                                         const std::vector<std::string>& facet_keys) {
    std::vector<FacetTriplet> out;
    for_each_jsonl(text, source, [&](const std::string&, const json& j) {
        FacetTriplet t{j.at("query_doc_id").get<std::string>(), j.at("facet").get<std::string>(),
                       j.at("positive_doc_id").get<std::string>(), j.at("negative_doc_id").get<std::string>()};
        validate_triplet(t, facet_keys);
        out.push_back(std::move(t));
    });
    return out;
}

std::vector<FacetTriplet> read_triplet_file(const std::filesystem::path& path,
                                            const std::vector<std::string>& facet_keys) {
    return parse_triplets(io::read_file(path), path.string(), facet_keys);
}

std::map<std::string, QueryGroup> merge_triplets(const std::vector<FacetTriplet>& triplets) {
    std::map<std::string, QueryGroup> groups;
    for (const auto& t : triplets) {
        QueryGroup& g = groups[t.query_doc_id];
        g.query_doc_id = t.query_doc_id;
        g.pos[t.facet].insert(t.positive_doc_id);
        g.neg[t.facet].insert(t.negative_doc_id);
    }
    std::vector<std::string> conflicts;
    for (const auto& [qid, g] : groups) {
        for (const auto& [facet, pos] : g.pos) {
            auto it = g.neg.find(facet);
            if (it == g.neg.end()) continue;
            for (const std::string& id : pos) {
                if (it->second.count(id) != 0) conflicts.push_back(qid + "/" + facet + "/" + id);
            }
        }
    }
    if (!conflicts.empty()) {
        std::string msg = "documents both positive and negative (query/facet/id):";
        for (const auto& c : conflicts) msg += " " + c;
        throw Error(ErrorKind::kPosNegConflict, msg);
    }
    return groups;
}

// ---- corpus ---------------------------------------------------------------------------

std::map<std::string, LabeledDocument> parse_corpus(std::string_view text, const std::string& source) {
    std::map<std::string, LabeledDocument> out;
    for_each_jsonl(text, source, [&](const std::string&, const json& j) {
        LabeledDocument doc;
        doc.id = j.at("id").get<std::string>();
        if (doc.id.empty()) throw Error(ErrorKind::kValidationError, "empty document id");
        if (j.contains("title") && !j.at("title").is_null()) doc.title = j.at("title").get<std::string>();
        if (j.contains("sentences")) {
            doc.sentences = j.at("sentences").get<std::vector<std::string>>();
        } else {
            doc.sentences = split_sentences(j.at("text").get<std::string>());
        }
        if (doc.sentences.empty()) throw Error(ErrorKind::kEmptyInput, "document \"" + doc.id + "\" has no sentences");
        for (std::size_t i = 0; i < doc.sentences.size(); ++i) {
            if (is_blank(doc.sentences[i])) {
                throw Error(ErrorKind::kValidationError,
                            "document \"" + doc.id + "\" sentence " + std::to_string(i) + " is empty");
            }
        }
        if (j.contains("labels") && !j.at("labels").is_null()) doc.labels = j.at("labels").get<std::vector<std::string>>();
        if (j.contains("field") && !j.at("field").is_null()) doc.field = j.at("field").get<std::string>();
        const std::string id = doc.id;
        if (!out.emplace(id, std::move(doc)).second) {
            throw Error(ErrorKind::kDuplicateId, "document \"" + id + "\" appears twice");
        }
    });
    return out;
}

std::map<std::string, LabeledDocument> read_corpus_file(const std::filesystem::path& path) {
    return parse_corpus(io::read_file(path), path.string());
}

// ---- prompts --------------------------------------------------------------------------

PromptTemplates PromptTemplates::defaults() {
    PromptTemplates p;
    p.label_system = "You are an expert in classifying sentences from scientific paper abstracts into rhetorical roles.";
    p.label_user =
        "The following sentences come from the same scientific abstract:{sentences_list}\n"
        "\n"
        "Task Description:\n"
        "\n"
        "1. Based on the content and contextual meaning, classify each sentence into one of the following "
        "categories: {background, method, result}.\n"
        "\n"
        "2. Return the output in a structured JSON format, ensuring each sentence is paired with the correct "
        "category.\n"
        "\n"
        "3. The expected output format is:\n"
        "\n"
        "[{ \"sentence\": \"Sentence1\", \"category\": \"background\" },\n"
        "\n"
        "{ \"sentence\": \"Sentence2\", \"category\": \"method\" },\n"
        "\n"
        "{ \"sentence\": \"Sentence3\", \"category\": \"result\" }]\n"
        "\n"
        "Please output only the structured JSON result without any explanation.";
    p.question_system =
        "You are an expert in scientific literature retrieval, specializing in generating professional academic "
        "search queries.";
    p.question_user =
        "Generate an English query for the {facet_type} facet based on the following sentences from the seed paper "
        "and positive papers.\n"
        "\n"
        "{facet_type} sentences from seed paper:\n"
        "{query_text}\n"
        "\n"
        "{facet_type} sentences from positive papers:\n"
        "{pos_text}\n"
        "\n"
        "Requirements:\n"
        "\n"
        "1. Generate a natural, fluent, concise, and professional query that highlights {requirement}.\n"
        "\n"
        "2. The query should be between 25-50 words.\n"
        "\n"
        "3. Output only the query itself, without any explanation or additional content.\n"
        "\n"
        "Generated {facet_type} query:";
    p.requirements = {
        {"background", "research questions, research motivation, and limitations of existing studies"},
        {"method", "technical methods, experimental design, and innovations"},
        {"result", "key findings, data support, and conclusions"},
    };
    return p;
}

namespace {

std::string read_template(const std::filesystem::path& path) {
    std::string text = io::read_file(path);
    if (!text.empty() && text.back() == '\n') text.pop_back();
    return text;
}

}  // namespace

PromptTemplates PromptTemplates::load(const std::filesystem::path& dir) {
    PromptTemplates p;
    p.label_system = read_template(dir / "label_system.txt");
    p.label_user = read_template(dir / "label_user.txt");
    p.question_system = read_template(dir / "question_system.txt");
    p.question_user = read_template(dir / "question_user.txt");
    const auto req = io::KeyValueConfig::load(dir / "requirements.txt");
    for (const auto& [k, v] : req.values()) p.requirements[k] = v;
    return p;
}

void PromptTemplates::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    io::write_file_atomic(dir / "label_system.txt", label_system + "\n");
    io::write_file_atomic(dir / "label_user.txt", label_user + "\n");
    io::write_file_atomic(dir / "question_system.txt", question_system + "\n");
    io::write_file_atomic(dir / "question_user.txt", question_user + "\n");
    std::string req;
    for (const auto& [k, v] : requirements) req += k + " = " + v + "\n";
    io::write_file_atomic(dir / "requirements.txt", req);
}

std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& values) {
    std::string out;
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const std::size_t close = tmpl.find('}', i + 1);
            if (close != std::string::npos) {
                auto it = values.find(tmpl.substr(i + 1, close - i - 1));
                if (it != values.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out += tmpl[i++];
    }
    return out;
}

// ---- labeling -------------------------------------------------------------------------

double normalized_edit_similarity(std::string_view a_raw, std::string_view b_raw) {
    const std::string a = lower(collapse_whitespace(a_raw)), b = lower(collapse_whitespace(b_raw));
    if (a.empty() && b.empty()) return 1.0;
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return 1.0 - static_cast<double>(prev[b.size()]) / static_cast<double>(std::max(a.size(), b.size()));
}

std::vector<std::string> parse_label_response(const std::string& response, const std::vector<std::string>& sentences,
                                              const LabelOptions& options) {
    const std::size_t open = response.find('['), close = response.rfind(']');
    if (open == std::string::npos || close == std::string::npos || close < open) {
        throw Error(ErrorKind::kParseError, "no JSON array in response");
    }
    json arr;
    try {
        arr = json::parse(response.substr(open, close - open + 1));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::kParseError, std::string("invalid JSON: ") + e.what());
    }
    struct Entry {
        std::string sentence;
        std::string category;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const json& e = arr[i];
        if (!e.is_object() || !e.contains("sentence") || !e.contains("category") || !e["sentence"].is_string() ||
            !e["category"].is_string()) {
            throw Error(ErrorKind::kParseError, "entry " + std::to_string(i) + " lacks string sentence/category");
        }
        std::string cat = lower(trim(e["category"].get<std::string>()));
        if (std::find(options.facet_names.begin(), options.facet_names.end(), cat) == options.facet_names.end()) {
            throw Error(ErrorKind::kCategoryError,
                        "entry " + std::to_string(i) + ": category \"" + e["category"].get<std::string>() + "\"");
        }
        entries.push_back({e["sentence"].get<std::string>(), std::move(cat)});
    }

    std::vector<int> owner(sentences.size(), -1);
    std::vector<bool> used(entries.size(), false);
    for (std::size_t e = 0; e < entries.size(); ++e) {
        const std::string target = trim(entries[e].sentence);
        for (std::size_t s = 0; s < sentences.size(); ++s) {
            if (owner[s] < 0 && trim(sentences[s]) == target) {
                owner[s] = static_cast<int>(e);
                used[e] = true;
                break;
            }
        }
    }
    for (std::size_t e = 0; e < entries.size(); ++e) {
        if (used[e]) continue;
        double best = -1.0;
        std::size_t best_s = 0;
        for (std::size_t s = 0; s < sentences.size(); ++s) {
            if (owner[s] >= 0) continue;
            const double sim = normalized_edit_similarity(entries[e].sentence, sentences[s]);
            if (sim > best) {
                best = sim;
                best_s = s;
            }
        }
        if (best >= options.fuzzy_threshold) {
            owner[best_s] = static_cast<int>(e);
            used[e] = true;
        }
    }
    std::vector<std::string> labels(sentences.size());
    for (std::size_t s = 0; s < sentences.size(); ++s) {
        if (owner[s] < 0) {
            throw Error(ErrorKind::kParseError, "alignment incomplete: sentence " + std::to_string(s) + " unmatched");
        }
        labels[s] = entries[static_cast<std::size_t>(owner[s])].category;
    }
    return labels;
}

std::vector<std::string> label_sentences(const std::vector<std::string>& sentences, LlmClient& llm,
                                         const PromptTemplates& prompts, const LabelOptions& options) {
    if (sentences.empty()) throw Error(ErrorKind::kEmptyInput, "document has no sentences to label");
    const std::string user = render_template(prompts.label_user, {{"sentences_list", json(sentences).dump()}});
    std::string last;
    const int attempts = std::max(1, options.retry.max_attempts);
    for (int attempt = 1; attempt <= attempts; ++attempt) {
        std::this_thread::sleep_for(options.retry.delay_before(attempt));
        const std::string response = llm.complete(prompts.label_system, user);
        try {
            return parse_label_response(response, sentences, options);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::kParseError) throw;
            last = e.detail();
        }
    }
    throw Error(ErrorKind::kParseError, "after " + std::to_string(attempts) + " attempts: " + last);
}

// ---- questions ------------------------------------------------------------------------

std::size_t count_words(std::string_view text) {
    std::size_t n = 0;
    bool in_word = false;
    for (char c : text) {
        const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!space && !in_word) ++n;
        in_word = !space;
    }
    return n;
}

namespace {

std::string facet_text(const LabeledDocument& doc, const std::string& facet_name) {
    std::string out;
    for (std::size_t i = 0; i < doc.sentences.size() && i < doc.labels.size(); ++i) {
        if (doc.labels[i] != facet_name) continue;
        if (!out.empty()) out += ' ';
        out += trim(doc.sentences[i]);
    }
    return out;
}

std::string clean_question(const std::string& response) {
    std::string q = collapse_whitespace(response);
    if (q.size() >= 2 && q.front() == '"' && q.back() == '"') q = trim(q.substr(1, q.size() - 2));
    return q;
}

}  // namespace

GeneratedQuestion generate_question(const LabeledDocument& query_doc, const std::vector<LabeledDocument>& positives,
                                    const std::string& facet_name, LlmClient& llm, const PromptTemplates& prompts,
                                    const QuestionOptions& options) {
    const std::string query_text = facet_text(query_doc, facet_name);
    if (query_text.empty()) {
        throw Error(ErrorKind::kEmptyFacetText, "document \"" + query_doc.id + "\" has no " + facet_name + " sentences");
    }
    std::string pos_text;
    std::size_t used = 0;
    for (const auto& p : positives) {
        if (used == options.max_positives) break;
        const std::string t = facet_text(p, facet_name);
        if (t.empty()) continue;
        if (!pos_text.empty()) pos_text += '\n';
        pos_text += t;
        ++used;
    }
    auto req = prompts.requirements.find(facet_name);
    if (req == prompts.requirements.end()) {
        throw Error(ErrorKind::kConfigError, "no question requirement for facet \"" + facet_name + "\"");
    }
    const std::string user = render_template(prompts.question_user, {{"facet_type", facet_name},
                                                                     {"query_text", query_text},
                                                                     {"pos_text", pos_text},
                                                                     {"requirement", req->second}});
    auto in_range = [&](const std::string& q) {
        const std::size_t n = count_words(q);
        return n >= options.min_words && n <= options.max_words;
    };
    GeneratedQuestion out;
    out.text = clean_question(llm.complete(prompts.question_system, user));
    if (in_range(out.text)) return out;
    out.attempts = 2;
    std::string second = clean_question(llm.complete(prompts.question_system, user));
    if (!second.empty()) out.text = std::move(second);
    if (out.text.empty()) throw Error(ErrorKind::kLlmFailure, "empty question for \"" + query_doc.id + "\"");
    out.length_warning = !in_range(out.text);
    return out;
}

// ---- assembly -------------------------------------------------------------------------

AssembledFtu assemble_ftu(const QueryGroup& group, const std::map<std::string, LabeledDocument>& docs,
                          const std::map<std::string, std::string>& questions,
                          const std::vector<std::string>& facet_keys, const std::vector<std::string>& facet_names) {
    AssembledFtu out;
    auto q = docs.find(group.query_doc_id);
    if (q == docs.end()) {
        throw Error(ErrorKind::kValidationError, "query_doc: document \"" + group.query_doc_id + "\" unavailable");
    }
    out.ftu.query_doc = q->second;
    auto gather = [&](const std::map<std::string, std::set<std::string>>& side,
                      std::map<std::string, std::vector<LabeledDocument>>& dest) {
        for (const auto& [key, ids] : side) {
            std::vector<LabeledDocument> list;
            for (const std::string& id : ids) {
                if (auto it = docs.find(id); it != docs.end()) list.push_back(it->second);
            }
            if (!list.empty()) dest[key] = std::move(list);
        }
    };
    gather(group.pos, out.ftu.pos);
    gather(group.neg, out.ftu.neg);
    for (const std::string& key : facet_keys) {
        auto it = questions.find(key);
        if (it == questions.end() || is_blank(it->second)) {
            out.missing_questions.push_back(key);
        } else {
            out.ftu.questions[key] = it->second;
        }
    }
    if (!out.partial()) validate_ftu(out.ftu, facet_keys, facet_names);
    return out;
}

// ---- statistics -----------------------------------------------------------------------

CorpusStats corpus_stats(const std::vector<FacetTrainingUnit>& ftus, const std::vector<std::string>& facet_keys) {
    CorpusStats s;
    s.ftu_count = ftus.size();
    for (const auto& key : facet_keys) s.questions_per_facet[key] = 0;
    std::map<std::string, std::optional<std::string>> docs;
    auto see = [&](const LabeledDocument& d) { docs.emplace(d.id, d.field); };
    for (const auto& f : ftus) {
        see(f.query_doc);
        for (const auto* side : {&f.pos, &f.neg}) {
            for (const auto& [k, list] : *side) {
                for (const auto& d : list) see(d);
            }
        }
        std::size_t asked = 0;
        for (const auto& [k, text] : f.questions) {
            if (is_blank(text)) continue;
            ++s.questions_per_facet[k];
            ++asked;
        }
        if (f.query_doc.field) s.fields[*f.query_doc.field].questions += asked;
    }
    s.unique_documents = docs.size();
    for (const auto& [id, field] : docs) {
        if (field) {
            ++s.fields[*field].documents;
        } else {
            ++s.documents_without_field;
        }
    }
    return s;
}

json CorpusStats::to_json() const {
    json f = json::object();
    for (const auto& [name, c] : fields) f[name] = {{"documents", c.documents}, {"questions", c.questions}};
    return json{{"ftu_count", ftu_count},
                {"unique_documents", unique_documents},
                {"questions_per_facet", questions_per_facet},
                {"fields", f},
                {"documents_without_field", documents_without_field}};
}

// ---- pipeline -------------------------------------------------------------------------

double BuildResult::partial_rate() const {
    const std::size_t total = ftus.size() + quarantined.size();
    return total == 0 ? 0.0 : static_cast<double>(quarantined.size()) / static_cast<double>(total);
}

json BuildResult::report_json() const {
    return json{{"ftus", ftus.size()},
                {"quarantined", quarantined.size()},
                {"partial_rate", partial_rate()},
                {"unlabeled_documents", unlabeled_documents},
                {"missing_documents", missing_documents},
                {"dropped_groups", dropped_groups},
                {"length_warnings", length_warnings},
                {"empty_facets", empty_facets}};
}

BuildResult build_ftus(const std::vector<FacetTriplet>& triplets, const std::map<std::string, LabeledDocument>& corpus,
                       LlmClient& llm, const BuildOptions& options) {
    for (const auto& t : triplets) validate_triplet(t, options.facet_keys);
    const auto groups = merge_triplets(triplets);
    BuildResult result;
    LabelOptions label_opts{options.facet_names, options.retry, options.fuzzy_threshold};

    std::map<std::string, LabeledDocument> labeled;
    std::set<std::string> failed;
    auto has_valid_labels = [&](const LabeledDocument& d) {
        if (d.labels.size() != d.sentences.size()) return false;
        return std::all_of(d.labels.begin(), d.labels.end(), [&](const std::string& l) {
            return std::find(options.facet_names.begin(), options.facet_names.end(), l) != options.facet_names.end();
        });
    };
    auto ensure = [&](const std::string& id) {
        if (labeled.count(id) != 0) return true;
        if (failed.count(id) != 0) return false;
        auto it = corpus.find(id);
        if (it == corpus.end()) {
            result.missing_documents.push_back(id);
            failed.insert(id);
            return false;
        }
        LabeledDocument doc = it->second;
        if (!options.reuse_corpus_labels || !has_valid_labels(doc)) {
            try {
                doc.labels = label_sentences(doc.sentences, llm, options.prompts, label_opts);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::kParseError && e.kind() != ErrorKind::kCategoryError) throw;
                result.unlabeled_documents.push_back(id);
                failed.insert(id);
                return false;
            }
        }
        labeled.emplace(id, std::move(doc));
        return true;
    };

    for (const auto& [qid, group] : groups) {
        if (!ensure(qid)) {
            result.dropped_groups.push_back(qid);
            continue;
        }
        for (const auto* side : {&group.pos, &group.neg}) {
            for (const auto& [key, ids] : *side) {
                for (const std::string& id : ids) ensure(id);
            }
        }
        std::map<std::string, std::string> questions;
        for (std::size_t f = 0; f < options.facet_keys.size(); ++f) {
            const std::string& key = options.facet_keys[f];
            std::vector<LabeledDocument> positives;
            if (auto it = group.pos.find(key); it != group.pos.end()) {
                for (const std::string& id : it->second) {
                    if (auto d = labeled.find(id); d != labeled.end()) positives.push_back(d->second);
                }
            }
            try {
                GeneratedQuestion q = generate_question(labeled.at(qid), positives, options.facet_names[f], llm,
                                                        options.prompts, options.question);
                if (q.length_warning) result.length_warnings.push_back(qid + "/" + key);
                questions[key] = std::move(q.text);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::kEmptyFacetText) throw;
                result.empty_facets.push_back(qid + "/" + key);
            }
        }
        AssembledFtu a = assemble_ftu(group, labeled, questions, options.facet_keys, options.facet_names);
        (a.partial() ? result.quarantined : result.ftus).push_back(std::move(a.ftu));
    }
    return result;
}

}  // namespace unifar
