#include "unifar/ftu.hpp"

#include "unifar/error.hpp"
#include "unifar/io.hpp"

#include <algorithm>
#include <set>

namespace unifar {

using nlohmann::json;

InputSequence LabeledDocument::sequence() const { return segment_input(sentences, InputKind::kDocument, title); }

json document_to_json(const LabeledDocument& doc) {
    json j{{"id", doc.id},
           {"title", doc.title ? json(*doc.title) : json(nullptr)},
           {"sentences", doc.sentences},
           {"labels", doc.labels}};
    if (doc.field) j["field"] = *doc.field;
    return j;
}

LabeledDocument document_from_json(const json& j) {
    LabeledDocument doc;
    doc.id = j.at("id").get<std::string>();
    if (j.contains("title") && !j.at("title").is_null()) doc.title = j.at("title").get<std::string>();
    doc.sentences = j.at("sentences").get<std::vector<std::string>>();
    if (j.contains("labels")) doc.labels = j.at("labels").get<std::vector<std::string>>();
    if (j.contains("field") && !j.at("field").is_null()) doc.field = j.at("field").get<std::string>();
    return doc;
}

namespace {

json doc_map_to_json(const std::map<std::string, std::vector<LabeledDocument>>& m) {
    json out = json::object();
    for (const auto& [key, docs] : m) {
        json arr = json::array();
        for (const auto& d : docs) arr.push_back(document_to_json(d));
        out[key] = arr;
    }
    return out;
}

std::map<std::string, std::vector<LabeledDocument>> doc_map_from_json(const json& j) {
    std::map<std::string, std::vector<LabeledDocument>> out;
    for (const auto& [key, arr] : j.items()) {
        auto& docs = out[key];
        for (const json& d : arr) docs.push_back(document_from_json(d));
    }
    return out;
}

void fail(const std::string& path, const std::string& what) {
    throw Error(ErrorKind::kValidationError, path + ": " + what);
}

void validate_doc(const LabeledDocument& doc, const std::string& path, const std::vector<std::string>& facet_names) {
    if (doc.id.empty()) fail(path + ".id", "empty id");
    if (doc.sentences.empty()) fail(path + ".sentences", "no sentences");
    for (std::size_t i = 0; i < doc.sentences.size(); ++i) {
        if (doc.sentences[i].find_first_not_of(" \t\r\n") == std::string::npos) {
            fail(path + ".sentences[" + std::to_string(i) + "]", "empty sentence");
        }
    }
    if (doc.labels.size() != doc.sentences.size()) {
        fail(path + ".labels", std::to_string(doc.labels.size()) + " labels for " + std::to_string(doc.sentences.size()) +
                                   " sentences");
    }
    for (std::size_t i = 0; i < doc.labels.size(); ++i) {
        if (std::find(facet_names.begin(), facet_names.end(), doc.labels[i]) == facet_names.end()) {
            fail(path + ".labels[" + std::to_string(i) + "]", "unknown facet \"" + doc.labels[i] + "\"");
        }
    }
}

}  // namespace

json ftu_to_json(const FacetTrainingUnit& ftu) {
    return json{{"query_doc", document_to_json(ftu.query_doc)},
                {"pos", doc_map_to_json(ftu.pos)},
                {"neg", doc_map_to_json(ftu.neg)},
                {"questions", ftu.questions}};
}

FacetTrainingUnit ftu_from_json(const json& j) {
    FacetTrainingUnit ftu;
    ftu.query_doc = document_from_json(j.at("query_doc"));
    if (j.contains("pos")) ftu.pos = doc_map_from_json(j.at("pos"));
    if (j.contains("neg")) ftu.neg = doc_map_from_json(j.at("neg"));
    if (j.contains("questions")) ftu.questions = j.at("questions").get<std::map<std::string, std::string>>();
    return ftu;
}

void validate_ftu(const FacetTrainingUnit& ftu, const std::vector<std::string>& facet_keys,
                  const std::vector<std::string>& facet_names) {
    validate_doc(ftu.query_doc, "query_doc", facet_names);
    for (const auto* side : {&ftu.pos, &ftu.neg}) {
        const std::string name = side == &ftu.pos ? "pos" : "neg";
        for (const auto& [key, docs] : *side) {
            if (std::find(facet_keys.begin(), facet_keys.end(), key) == facet_keys.end()) {
                fail(name + "." + key, "unknown facet key");
            }
            std::set<std::string> ids;
            for (std::size_t i = 0; i < docs.size(); ++i) {
                const std::string path = name + "." + key + "[" + std::to_string(i) + "]";
                validate_doc(docs[i], path, facet_names);
                if (!ids.insert(docs[i].id).second) fail(path + ".id", "duplicate id \"" + docs[i].id + "\"");
            }
        }
    }
    for (const auto& [key, docs] : ftu.pos) {
        auto it = ftu.neg.find(key);
        if (it == ftu.neg.end()) continue;
        for (const auto& p : docs) {
            for (const auto& n : it->second) {
                if (p.id == n.id) fail("neg." + key, "\"" + p.id + "\" is also a positive");
            }
        }
    }
    for (const std::string& key : facet_keys) {
        auto it = ftu.questions.find(key);
        if (it == ftu.questions.end()) fail("questions." + key, "missing question");
        if (it->second.find_first_not_of(" \t\r\n") == std::string::npos) fail("questions." + key, "empty question");
    }
    for (const auto& [key, q] : ftu.questions) {
        if (std::find(facet_keys.begin(), facet_keys.end(), key) == facet_keys.end()) {
            fail("questions." + key, "unknown facet key");
        }
    }
}

std::string serialize_ftus(const std::vector<FacetTrainingUnit>& ftus) {
    std::string out;
    for (const auto& ftu : ftus) {
        out += ftu_to_json(ftu).dump();
        out += '\n';
    }
    return out;
}

std::vector<FacetTrainingUnit> parse_ftus(std::string_view text, const std::string& source, bool validate,
                                          const std::vector<std::string>& facet_keys,
                                          const std::vector<std::string>& facet_names) {
    std::vector<FacetTrainingUnit> out;
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        FacetTrainingUnit ftu;
        try {
            ftu = ftu_from_json(json::parse(line));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::kParseError, where + ": " + e.what());
        }
        if (validate) {
            try {
                validate_ftu(ftu, facet_keys, facet_names);
            } catch (const Error& e) {
                throw Error(e.kind(), where + ": " + e.detail());
            }
        }
        out.push_back(std::move(ftu));
    }
    return out;
}

std::vector<FacetTrainingUnit> read_ftu_file(const std::filesystem::path& path, bool validate,
                                             const std::vector<std::string>& facet_keys,
                                             const std::vector<std::string>& facet_names) {
    return parse_ftus(io::read_file(path), path.string(), validate, facet_keys, facet_names);
}

void write_ftu_file(const std::filesystem::path& path, const std::vector<FacetTrainingUnit>& ftus) {
    io::write_file_atomic(path, serialize_ftus(ftus));
}

}  // namespace unifar
