#include "unifar/retrieval.hpp"

#include "unifar/error.hpp"
#include "unifar/io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace unifar {

using nlohmann::json;

std::string_view similarity_kind_name(SimilarityKind kind) { return kind == SimilarityKind::kCosine ? "cosine" : "dot"; }

SimilarityKind parse_similarity_kind(std::string_view name) {
    if (name == "cosine") return SimilarityKind::kCosine;
    if (name == "dot") return SimilarityKind::kDot;
    throw Error(ErrorKind::kConfigError, "unknown similarity \"" + std::string(name) + "\"");
}

namespace {

ad::Matrix normalized_rows(const ad::Matrix& m, const std::string& id) {
    ad::Matrix out = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double n = m.row(i).norm();
        if (n == 0.0) {
            throw Error(ErrorKind::kZeroVector, "facet row " + std::to_string(i) + " of \"" + id + "\" is all zero");
        }
        out.row(i) /= n;
    }
    return out;
}

void check_same_shape(const FacetRepresentation& q, const FacetRepresentation& c) {
    if (q.embeddings.rows() != c.embeddings.rows() || q.embeddings.cols() != c.embeddings.cols()) {
        throw Error(ErrorKind::kShapeMismatch, "representations \"" + q.input_id + "\" and \"" + c.input_id +
                                                   "\" differ in N_facet or h");
    }
}

}  // namespace

FacetSimilarityMatrix similarity_matrix(const FacetRepresentation& q, const FacetRepresentation& c,
                                        SimilarityKind kind) {
    check_same_shape(q, c);
    FacetSimilarityMatrix out;
    out.query_id = q.input_id;
    out.candidate_id = c.input_id;
    if (kind == SimilarityKind::kCosine) {
        out.m = normalized_rows(q.embeddings, q.input_id) * normalized_rows(c.embeddings, c.input_id).transpose();
    } else {
        out.m = q.embeddings * c.embeddings.transpose();
    }
    return out;
}

ScoringStrategy ScoringStrategy::parse(std::string_view text, const std::vector<std::string>& facet_names) {
    if (text == "diag-mean" || text == "diagonal_mean") return diagonal_mean();
    constexpr std::string_view prefix = "facet:";
    if (text.substr(0, prefix.size()) == prefix) {
        std::string_view name = text.substr(prefix.size());
        for (std::size_t f = 0; f < facet_names.size(); ++f) {
            if (facet_names[f] == name) return facet_only(f);
        }
        if (!name.empty() && std::all_of(name.begin(), name.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
            const std::size_t f = std::stoul(std::string(name));
            if (f >= facet_names.size()) {
                throw Error(ErrorKind::kFacetOutOfRange, "facet index " + std::string(name) + " out of range");
            }
            return facet_only(f);
        }
        throw Error(ErrorKind::kFacetOutOfRange, "unknown facet \"" + std::string(name) + "\"");
    }
    throw Error(ErrorKind::kConfigError, "strategy must be diag-mean or facet:<name>, got \"" + std::string(text) + "\"");
}

std::string ScoringStrategy::name(const std::vector<std::string>& facet_names) const {
    if (kind == Kind::kDiagonalMean) return "diag-mean";
    return "facet:" + (facet < facet_names.size() ? facet_names[facet] : std::to_string(facet));
}

double score(const FacetSimilarityMatrix& m, const ScoringStrategy& strategy) {
    const Eigen::Index n = m.m.rows();
    if (strategy.kind == ScoringStrategy::Kind::kFacet) {
        if (strategy.facet >= static_cast<std::size_t>(n)) {
            throw Error(ErrorKind::kFacetOutOfRange,
                        "facet " + std::to_string(strategy.facet) + " >= N_facet " + std::to_string(n));
        }
        const auto f = static_cast<Eigen::Index>(strategy.facet);
        return m.m(f, f);
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) total += m.m(i, i);
    return total / static_cast<double>(n);
}

void sort_hits(std::vector<SearchHit>& hits) {
    std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
}

// ---- FacetIndex ---------------------------------------------------------------------

FacetIndex FacetIndex::build(const std::vector<FacetRepresentation>& reps, SimilarityKind kind,
                             std::vector<std::string> facet_names) {
    FacetIndex index;
    index.kind_ = kind;
    index.facet_names_ = std::move(facet_names);
    const auto n = static_cast<Eigen::Index>(index.facet_names_.size());
    if (!reps.empty()) index.hidden_ = static_cast<std::size_t>(reps.front().embeddings.cols());
    index.data_.reserve(reps.size() * index.facet_names_.size() * index.hidden_);
    for (const FacetRepresentation& rep : reps) {
        if (rep.embeddings.rows() != n || rep.embeddings.cols() != static_cast<Eigen::Index>(index.hidden_)) {
            throw Error(ErrorKind::kShapeMismatch, "candidate \"" + rep.input_id + "\" has shape " +
                                                       std::to_string(rep.embeddings.rows()) + "x" +
                                                       std::to_string(rep.embeddings.cols()));
        }
        if (!index.positions_.emplace(rep.input_id, index.ids_.size()).second) {
            throw Error(ErrorKind::kDuplicateId, "candidate id \"" + rep.input_id + "\" appears twice");
        }
        index.ids_.push_back(rep.input_id);
        const ad::Matrix stored =
            kind == SimilarityKind::kCosine ? normalized_rows(rep.embeddings, rep.input_id) : rep.embeddings;
        for (Eigen::Index f = 0; f < n; ++f) {
            for (Eigen::Index j = 0; j < stored.cols(); ++j) index.data_.push_back(static_cast<float>(stored(f, j)));
        }
    }
    return index;
}

std::filesystem::path FacetIndex::ids_path(const std::filesystem::path& path) {
    std::filesystem::path p = path;
    p += ".ids.json";
    return p;
}

void FacetIndex::save(const std::filesystem::path& path) const {
    json manifest{{"count", ids_.size()},
                  {"n_facet", facet_names_.size()},
                  {"h", hidden_},
                  {"sim_kind", similarity_kind_name(kind_)},
                  {"facet_names", facet_names_}};
    std::string contents = std::string(kIndexFormat) + "\n" + manifest.dump() + "\n";
    io::append_floats_le(contents, data_);
    io::write_file_atomic(ids_path(path), json(ids_).dump() + "\n");
    io::write_file_atomic(path, contents);
}

FacetIndex FacetIndex::load(const std::filesystem::path& path) {
    const std::string contents = io::read_file(path);
    const std::size_t first = contents.find('\n');
    if (first == std::string::npos || contents.substr(0, first) != kIndexFormat) {
        throw Error(ErrorKind::kParseError, path.string() + ": not a " + std::string(kIndexFormat) + " file");
    }
    const std::size_t second = contents.find('\n', first + 1);
    if (second == std::string::npos) throw Error(ErrorKind::kParseError, path.string() + ": missing manifest line");
    FacetIndex index;
    try {
        const json manifest = json::parse(contents.substr(first + 1, second - first - 1));
        const json ids = json::parse(io::read_file(ids_path(path)));
        index.facet_names_ = manifest.at("facet_names").get<std::vector<std::string>>();
        index.hidden_ = manifest.at("h").get<std::size_t>();
        index.kind_ = parse_similarity_kind(manifest.at("sim_kind").get<std::string>());
        index.ids_ = ids.get<std::vector<std::string>>();
        const auto count = manifest.at("count").get<std::size_t>();
        if (count != index.ids_.size() || manifest.at("n_facet").get<std::size_t>() != index.facet_names_.size()) {
            throw Error(ErrorKind::kShapeMismatch, path.string() + ": manifest disagrees with id sidecar");
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::kParseError, path.string() + ": " + e.what());
    }
    index.data_ = io::parse_floats_le(std::string_view(contents).substr(second + 1));
    if (index.data_.size() != index.ids_.size() * index.facet_names_.size() * index.hidden_) {
        throw Error(ErrorKind::kShapeMismatch, path.string() + ": embedding store size mismatch");
    }
    for (std::size_t i = 0; i < index.ids_.size(); ++i) {
        if (!index.positions_.emplace(index.ids_[i], i).second) {
            throw Error(ErrorKind::kDuplicateId, path.string() + ": id \"" + index.ids_[i] + "\" appears twice");
        }
    }
    return index;
}

std::optional<std::size_t> FacetIndex::find(std::string_view id) const {
    auto it = positions_.find(std::string(id));
    if (it == positions_.end()) return std::nullopt;
    return it->second;
}

ad::Matrix FacetIndex::embedding(std::size_t i) const {
    const auto n = static_cast<Eigen::Index>(facet_names_.size());
    const auto h = static_cast<Eigen::Index>(hidden_);
    ad::Matrix m(n, h);
    const std::size_t base = i * facet_names_.size() * hidden_;
    for (Eigen::Index f = 0; f < n; ++f) {
        for (Eigen::Index j = 0; j < h; ++j) {
            m(f, j) = static_cast<double>(data_[base + static_cast<std::size_t>(f * h + j)]);
        }
    }
    return m;
}

FacetRepresentation FacetIndex::representation(std::size_t i) const {
    FacetRepresentation rep;
    rep.input_id = ids_.at(i);
    rep.embeddings = embedding(i);
    return rep;
}

namespace {

// Query rows ready for dot products against stored rows.
ad::Matrix prepare_query(const FacetIndex& index, const FacetRepresentation& q) {
    if (q.embeddings.rows() != static_cast<Eigen::Index>(index.facet_count()) ||
        q.embeddings.cols() != static_cast<Eigen::Index>(index.hidden_size())) {
        throw Error(ErrorKind::kShapeMismatch, "query \"" + q.input_id + "\" does not match the index shape");
    }
    return index.similarity() == SimilarityKind::kCosine ? normalized_rows(q.embeddings, q.input_id) : q.embeddings;
}

double score_prepared(const FacetIndex& index, const ad::Matrix& q, std::size_t candidate,
                      const ScoringStrategy& strategy) {
    const std::size_t n = index.facet_count();
    const std::size_t h = index.hidden_size();
    const float* c = index.data().data() + candidate * n * h;
    auto diag = [&](std::size_t f) {
        double s = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            s += q(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(j)) * static_cast<double>(c[f * h + j]);
        }
        return s;
    };
    if (strategy.kind == ScoringStrategy::Kind::kFacet) return diag(strategy.facet);
    double total = 0.0;
    for (std::size_t f = 0; f < n; ++f) total += diag(f);
    return total / static_cast<double>(n);
}

void check_strategy(const FacetIndex& index, const ScoringStrategy& strategy) {
    if (strategy.kind == ScoringStrategy::Kind::kFacet && strategy.facet >= index.facet_count()) {
        throw Error(ErrorKind::kFacetOutOfRange, "facet " + std::to_string(strategy.facet) + " >= N_facet " +
                                                     std::to_string(index.facet_count()));
    }
}

}  // namespace

double FacetIndex::score(const FacetRepresentation& q, std::size_t candidate, const ScoringStrategy& strategy) const {
    check_strategy(*this, strategy);
    return score_prepared(*this, prepare_query(*this, q), candidate, strategy);
}

std::vector<SearchHit> FacetIndex::search(const FacetRepresentation& q, const ScoringStrategy& strategy,
                                          std::size_t k) const {
    if (k == 0) throw Error(ErrorKind::kValidationError, "k must be >= 1");
    if (ids_.empty()) return {};
    check_strategy(*this, strategy);
    const ad::Matrix prepared = prepare_query(*this, q);
    std::vector<SearchHit> hits;
    hits.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) hits.push_back({ids_[i], score_prepared(*this, prepared, i, strategy)});
    sort_hits(hits);
    if (hits.size() > k) hits.resize(k);
    return hits;
}

std::vector<SearchHit> FacetIndex::rank_subset(const FacetRepresentation& q, const ScoringStrategy& strategy,
                                               const std::vector<std::string>& candidates) const {
    check_strategy(*this, strategy);
    const ad::Matrix prepared = prepare_query(*this, q);
    std::vector<SearchHit> hits;
    std::set<std::string> seen;
    for (const std::string& id : candidates) {
        if (!seen.insert(id).second) continue;
        auto pos = find(id);
        if (!pos) throw Error(ErrorKind::kMissingCandidate, "candidate \"" + id + "\" is not in the index");
        hits.push_back({id, score_prepared(*this, prepared, *pos, strategy)});
    }
    sort_hits(hits);
    return hits;
}

}  // namespace unifar
