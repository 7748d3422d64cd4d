#pragma once

#include "unifar/model.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace unifar {

// Facet-by-position attention weights with printable labels.
struct AttentionTable {
    std::vector<std::string> facets;   // row labels
    std::vector<std::string> columns;  // "title", sentence indices, or token strings
    ad::Matrix values;                 // facets × columns
    Branch branch = Branch::kSentence;

    // Header `facet,<columns...>`, then one row per facet; RFC 4180 quoting.
    std::string to_csv() const;
    static AttentionTable parse_csv(std::string_view text);
    // Grey-scale heatmap, darker = more weight.
    std::string to_svg() const;
};

AttentionTable attention_table(const UnifarModel& model, const InputSequence& seq);

}  // namespace unifar
