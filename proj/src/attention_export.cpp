#include "unifar/attention_export.hpp"

#include "unifar/error.hpp"
#include "unifar/io.hpp"

#include <algorithm>
#include <cstdio>

namespace unifar {

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv_rows(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            row.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw Error(ErrorKind::kParseError, "unterminated quoted CSV field");
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string AttentionTable::to_csv() const {
    std::string out = "facet";
    for (const auto& c : columns) out += "," + csv_field(c);
    out += '\n';
    for (std::size_t r = 0; r < facets.size(); ++r) {
        out += csv_field(facets[r]);
        for (std::size_t c = 0; c < columns.size(); ++c) {
            out += "," + io::format_double(values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
        }
        out += '\n';
    }
    return out;
}

AttentionTable AttentionTable::parse_csv(std::string_view text) {
    const auto rows = parse_csv_rows(text);
    if (rows.empty() || rows[0].empty() || rows[0][0] != "facet") {
        throw Error(ErrorKind::kParseError, "attention CSV must start with a `facet` header");
    }
    AttentionTable t;
    t.columns.assign(rows[0].begin() + 1, rows[0].end());
    t.values.resize(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(t.columns.size()));
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != t.columns.size() + 1) {
            throw Error(ErrorKind::kParseError, "attention CSV row " + std::to_string(r + 1) + " has " +
                                                    std::to_string(rows[r].size()) + " fields");
        }
        t.facets.push_back(rows[r][0]);
        for (std::size_t c = 0; c < t.columns.size(); ++c) {
            t.values(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(c)) = io::parse_double(rows[r][c + 1]);
        }
    }
    return t;
}

std::string AttentionTable::to_svg() const {
    constexpr int kCell = 28, kLeft = 90, kTop = 90;
    const int width = kLeft + kCell * static_cast<int>(columns.size()) + 10;
    const int height = kTop + kCell * static_cast<int>(facets.size()) + 10;
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
                      std::to_string(height) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    for (std::size_t c = 0; c < columns.size(); ++c) {
        const int x = kLeft + kCell * static_cast<int>(c) + kCell / 2;
        out += "<text transform=\"translate(" + std::to_string(x) + "," + std::to_string(kTop - 6) +
               ") rotate(-60)\">" + xml_escape(columns[c]) + "</text>\n";
    }
    for (std::size_t r = 0; r < facets.size(); ++r) {
        const int y = kTop + kCell * static_cast<int>(r);
        out += "<text x=\"4\" y=\"" + std::to_string(y + kCell / 2 + 4) + "\">" + xml_escape(facets[r]) + "</text>\n";
        for (std::size_t c = 0; c < columns.size(); ++c) {
            const double v = std::clamp(values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)), 0.0, 1.0);
            const int grey = static_cast<int>(255.0 * (1.0 - v) + 0.5);
            char colour[8];
            std::snprintf(colour, sizeof colour, "#%02x%02x%02x", grey, grey, grey);
            out += "<rect x=\"" + std::to_string(kLeft + kCell * static_cast<int>(c)) + "\" y=\"" + std::to_string(y) +
                   "\" width=\"" + std::to_string(kCell) + "\" height=\"" + std::to_string(kCell) + "\" fill=\"" +
                   colour + "\"><title>" + io::format_double(v) + "</title></rect>\n";
        }
    }
    return out + "</svg>\n";
}

AttentionTable attention_table(const UnifarModel& model, const InputSequence& seq) {
    const TokenizedInput tok = model.tokenize(seq);
    const FacetRepresentation rep = model.embed(seq);
    AttentionTable t;
    t.facets = model.config().facet_names;
    t.values = rep.attention;
    t.branch = rep.branch;
    if (rep.branch == Branch::kSentence) {
        if (tok.has_title) t.columns.push_back("title");
        for (int idx : tok.sentence_index) t.columns.push_back(std::to_string(idx));
    } else {
        for (int id : tok.token_ids) t.columns.push_back(model.tokenizer().token(id));
    }
    if (t.columns.size() != static_cast<std::size_t>(t.values.cols())) {
        throw Error(ErrorKind::kShapeMismatch, "attention has " + std::to_string(t.values.cols()) + " columns for " +
                                                   std::to_string(t.columns.size()) + " labels");
    }
    return t;
}

}  // namespace unifar
