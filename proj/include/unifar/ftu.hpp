#pragma once

#include "unifar/encoding.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace unifar {

// Short facet keys used in FTU files, index-aligned with the facet names.
inline const std::vector<std::string> kDefaultFacetKeys{"bg", "mt", "rs"};
inline const std::vector<std::string> kDefaultFacetNames{"background", "method", "result"};

struct LabeledDocument {
    std::string id;
    std::optional<std::string> title;
    std::vector<std::string> sentences;
    std::vector<std::string> labels;  // one facet name per sentence
    std::optional<std::string> field;

    InputSequence sequence() const;
    bool operator==(const LabeledDocument&) const = default;
};

struct FacetTrainingUnit {
    LabeledDocument query_doc;
    std::map<std::string, std::vector<LabeledDocument>> pos;
    std::map<std::string, std::vector<LabeledDocument>> neg;
    std::map<std::string, std::string> questions;

    const std::string& id() const { return query_doc.id; }
    bool operator==(const FacetTrainingUnit&) const = default;
};

nlohmann::json document_to_json(const LabeledDocument& doc);
LabeledDocument document_from_json(const nlohmann::json& j);
nlohmann::json ftu_to_json(const FacetTrainingUnit& ftu);
// Structural parse only; run validate_ftu() for the content invariants.
FacetTrainingUnit ftu_from_json(const nlohmann::json& j);

// Throws ValidationError naming the offending field path, e.g. `pos.mt[1].labels[3]`.
void validate_ftu(const FacetTrainingUnit& ftu, const std::vector<std::string>& facet_keys = kDefaultFacetKeys,
                  const std::vector<std::string>& facet_names = kDefaultFacetNames);

std::string serialize_ftus(const std::vector<FacetTrainingUnit>& ftus);
// Throws ParseError / ValidationError prefixed with `<source>:<line>`.
std::vector<FacetTrainingUnit> parse_ftus(std::string_view text, const std::string& source = "<ftu>",
                                          bool validate = true,
                                          const std::vector<std::string>& facet_keys = kDefaultFacetKeys,
                                          const std::vector<std::string>& facet_names = kDefaultFacetNames);
std::vector<FacetTrainingUnit> read_ftu_file(const std::filesystem::path& path, bool validate = true,
                                             const std::vector<std::string>& facet_keys = kDefaultFacetKeys,
                                             const std::vector<std::string>& facet_names = kDefaultFacetNames);
void write_ftu_file(const std::filesystem::path& path, const std::vector<FacetTrainingUnit>& ftus);

}  // namespace unifar
