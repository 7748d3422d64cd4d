#pragma once

#include "unifar/aggregation.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace unifar {

enum class SimilarityKind { kCosine, kDot };

std::string_view similarity_kind_name(SimilarityKind kind);
SimilarityKind parse_similarity_kind(std::string_view name);

struct FacetSimilarityMatrix {
    ad::Matrix m;  // m(i, j) = sim(q_i, c_j)
    std::string query_id;
    std::string candidate_id;
};

// Throws ShapeMismatch on differing N_facet / h, ZeroVector for cosine on an all-zero row.
FacetSimilarityMatrix similarity_matrix(const FacetRepresentation& q, const FacetRepresentation& c,
                                        SimilarityKind kind = SimilarityKind::kCosine);

struct ScoringStrategy {
    enum class Kind { kDiagonalMean, kFacet };
    Kind kind = Kind::kDiagonalMean;
    std::size_t facet = 0;

    static ScoringStrategy diagonal_mean() { return {}; }
    static ScoringStrategy facet_only(std::size_t f) { return {Kind::kFacet, f}; }
    // "diag-mean" or "facet:<name>"; also accepts a facet index after the colon.
    static ScoringStrategy parse(std::string_view text, const std::vector<std::string>& facet_names);
    std::string name(const std::vector<std::string>& facet_names) const;
};

// Throws FacetOutOfRange when strategy.facet >= N_facet.
double score(const FacetSimilarityMatrix& m, const ScoringStrategy& strategy);

struct SearchHit {
    std::string id;
    double score = 0.0;
};

// Ranks by descending score, ascending id on ties.
void sort_hits(std::vector<SearchHit>& hits);

// Immutable set of candidate facet embeddings, stored as float32 and
// normalized per facet row at build time under cosine similarity.
class FacetIndex {
public:
    FacetIndex() = default;

    static FacetIndex build(const std::vector<FacetRepresentation>& reps, SimilarityKind kind,
                            std::vector<std::string> facet_names);
    // Writes `path` plus the sidecar `<path>.ids.json`, each through a temp-file rename.
    void save(const std::filesystem::path& path) const;
    static FacetIndex load(const std::filesystem::path& path);
    static std::filesystem::path ids_path(const std::filesystem::path& path);

    std::size_t size() const { return ids_.size(); }
    bool empty() const { return ids_.empty(); }
    std::size_t facet_count() const { return facet_names_.size(); }
    std::size_t hidden_size() const { return hidden_; }
    SimilarityKind similarity() const { return kind_; }
    const std::vector<std::string>& ids() const { return ids_; }
    const std::vector<std::string>& facet_names() const { return facet_names_; }
    const std::vector<float>& data() const { return data_; }
    std::optional<std::size_t> find(std::string_view id) const;

    // Stored N_facet × h embedding of candidate i.
    ad::Matrix embedding(std::size_t i) const;
    FacetRepresentation representation(std::size_t i) const;

    double score(const FacetRepresentation& q, std::size_t candidate, const ScoringStrategy& strategy) const;
    std::vector<SearchHit> search(const FacetRepresentation& q, const ScoringStrategy& strategy, std::size_t k) const;
    // Ranks only the listed candidates; unknown ids throw MissingCandidate.
    std::vector<SearchHit> rank_subset(const FacetRepresentation& q, const ScoringStrategy& strategy,
                                       const std::vector<std::string>& candidates) const;

private:
    std::vector<std::string> ids_;
    std::unordered_map<std::string, std::size_t> positions_;
    std::vector<std::string> facet_names_;
    std::size_t hidden_ = 0;
    SimilarityKind kind_ = SimilarityKind::kCosine;
    std::vector<float> data_;  // candidate-major, then facet-major
};

inline constexpr const char* kIndexFormat = "UNIFAR-IDX v1";

}  // namespace unifar
