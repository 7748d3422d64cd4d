#pragma once

#include "unifar/ftu.hpp"
#include "unifar/retrieval.hpp"

#include "json.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace unifar {

// ---- metrics --------------------------------------------------------------------------
// Rankings list candidate ids best first and are assumed duplicate-free.

using Ranking = std::vector<std::string>;
using RelevantSet = std::set<std::string>;
using Grades = std::map<std::string, int>;  // candidate id -> grade; absent means 0

// Throw NoRelevant on an empty relevant set and ValidationError on k = 0.
double recall_at_k(const Ranking& ranking, const RelevantSet& relevant, std::size_t k);
double r_precision(const Ranking& ranking, const RelevantSet& relevant);
double average_precision(const Ranking& ranking, const RelevantSet& relevant);

struct NdcgValue {
    double value = 0.0;
    bool ideal_zero = false;  // no positive grade within the cutoff of the ideal ordering
};

// Gain 2^g - 1, discount log2(rank + 1); ideal DCG of zero scores 0.
NdcgValue ndcg_detail(const Ranking& ranking, const Grades& grades, std::size_t cutoff);
double ndcg(const Ranking& ranking, const Grades& grades, std::size_t cutoff);
// ceil(0.2 * pool_size); pool_size must be >= 1.
std::size_t pct20_cutoff(std::size_t pool_size);
double ndcg_pct20(const Ranking& ranking, const Grades& grades, std::size_t pool_size);
// 0 when no relevant item appears within the cutoff (including an empty set).
double mrr(const Ranking& ranking, const RelevantSet& relevant, std::size_t cutoff);

RelevantSet relevant_from_grades(const Grades& grades, int min_grade = 1);

struct Metric {
    enum class Kind { kRecall, kRPrecision, kAveragePrecision, kNdcg, kNdcgPct20, kMrr };
    Kind kind = Kind::kAveragePrecision;
    std::size_t k = 0;  // cutoff for recall / ndcg / mrr

    // "recall@5", "r-precision", "map", "ndcg@10", "ndcg%20", "mrr@10".
    static Metric parse(std::string_view name);
    std::string name() const;
    bool operator==(const Metric&) const = default;
};

// Comma-separated metric names.
std::vector<Metric> parse_metrics(std::string_view list);

// ---- benchmark inputs -----------------------------------------------------------------

struct Qrels {
    std::map<std::string, Grades> grades;  // query id -> candidate grades

    // `query_id candidate_id grade` per line (`query_id 0 candidate_id grade`
    // is accepted too); blank lines and '#' comments are skipped.
    static Qrels parse(std::string_view text, const std::string& source = "<qrels>");
    static Qrels load(const std::filesystem::path& path);
    const Grades& of(const std::string& query_id) const;
};

struct BenchmarkQuery {
    std::string id;
    std::optional<std::string> text;
    std::optional<LabeledDocument> doc;
    std::optional<std::string> facet;  // facet name or key
    std::optional<std::vector<std::string>> pool;

    InputSequence sequence() const;
};

// JSON Lines of {"id", "text" | "doc", "facet"?, "pool"?}.
std::vector<BenchmarkQuery> parse_queries(std::string_view text, const std::string& source = "<queries>");
std::vector<BenchmarkQuery> read_query_file(const std::filesystem::path& path);

// ---- benchmark ------------------------------------------------------------------------

enum class BenchmarkMode {
    kCorpus,  // rank the whole index with one strategy
    kPooled,  // rank each query's pool; an annotated facet selects facet scoring
};

std::string_view benchmark_mode_name(BenchmarkMode mode);
BenchmarkMode parse_benchmark_mode(std::string_view name);

struct BenchmarkOptions {
    BenchmarkMode mode = BenchmarkMode::kCorpus;
    ScoringStrategy strategy = ScoringStrategy::diagonal_mean();
    std::vector<Metric> metrics = parse_metrics("recall@5,r-precision,map");
    int min_relevant_grade = 1;
    // Drops a candidate whose id equals the query id from its own ranking.
    bool exclude_self = true;
    nlohmann::json extra_metadata = nlohmann::json::object();
};

struct QueryResult {
    std::string id;
    std::optional<std::string> facet;
    std::map<std::string, double> metrics;
    bool ideal_dcg_zero = false;
};

struct MetricReport {
    std::vector<QueryResult> queries;
    std::map<std::string, double> macro;  // arithmetic mean over `queries`
    std::vector<std::string> excluded_no_relevant;
    std::map<std::string, std::vector<std::string>> skipped_missing;  // query id -> unknown candidate ids
    nlohmann::json metadata = nlohmann::json::object();

    nlohmann::json to_json() const;
};

using QueryEncoder = std::function<FacetRepresentation(const BenchmarkQuery&)>;

// Per-query metrics for one ranking; `pool_size` feeds nDCG%20.
QueryResult evaluate_ranking(const std::string& query_id, const Ranking& ranking, const Grades& grades,
                             std::size_t pool_size, const std::vector<Metric>& metrics, int min_relevant_grade);

MetricReport run_benchmark(const FacetIndex& index, const std::vector<BenchmarkQuery>& queries, const Qrels& qrels,
                           const QueryEncoder& encode, const BenchmarkOptions& options = {});

}  // namespace unifar
