#include "unifar/evaluation.hpp"

#include "unifar/error.hpp"
#include "unifar/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace unifar {

using nlohmann::json;

namespace {

void require_relevant(const RelevantSet& relevant) {
    if (relevant.empty()) throw Error(ErrorKind::kNoRelevant, "query has no relevant candidates");
}

void require_k(std::size_t k) {
    if (k == 0) throw Error(ErrorKind::kValidationError, "cutoff must be >= 1");
}

std::size_t hits_within(const Ranking& ranking, const RelevantSet& relevant, std::size_t k) {
    std::size_t hits = 0;
    const std::size_t n = std::min(k, ranking.size());
    for (std::size_t i = 0; i < n; ++i) hits += relevant.count(ranking[i]);
    return hits;
}

double gain(int grade) { return std::exp2(static_cast<double>(grade)) - 1.0; }
double discount(std::size_t rank0) { return std::log2(static_cast<double>(rank0) + 2.0); }

}  // namespace

double recall_at_k(const Ranking& ranking, const RelevantSet& relevant, std::size_t k) {
    require_k(k);
    require_relevant(relevant);
    return static_cast<double>(hits_within(ranking, relevant, k)) / static_cast<double>(relevant.size());
}

double r_precision(const Ranking& ranking, const RelevantSet& relevant) {
    require_relevant(relevant);
    return static_cast<double>(hits_within(ranking, relevant, relevant.size())) / static_cast<double>(relevant.size());
}

double average_precision(const Ranking& ranking, const RelevantSet& relevant) {
    require_relevant(relevant);
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        if (relevant.count(ranking[i]) == 0) continue;
        ++hits;
        sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    return sum / static_cast<double>(relevant.size());
}

NdcgValue ndcg_detail(const Ranking& ranking, const Grades& grades, std::size_t cutoff) {
    require_k(cutoff);
    double dcg = 0.0;
    const std::size_t n = std::min(cutoff, ranking.size());
    for (std::size_t i = 0; i < n; ++i) {
        auto it = grades.find(ranking[i]);
        if (it != grades.end() && it->second > 0) dcg += gain(it->second) / discount(i);
    }
    std::vector<int> ideal;
    for (const auto& [id, g] : grades) {
        if (g > 0) ideal.push_back(g);
    }
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t i = 0; i < ideal.size() && i < cutoff; ++i) idcg += gain(ideal[i]) / discount(i);
    if (idcg == 0.0) return {0.0, true};
    return {dcg / idcg, false};
}

double ndcg(const Ranking& ranking, const Grades& grades, std::size_t cutoff) {
    return ndcg_detail(ranking, grades, cutoff).value;
}

std::size_t pct20_cutoff(std::size_t pool_size) {
    if (pool_size == 0) throw Error(ErrorKind::kValidationError, "nDCG%20 needs a non-empty pool");
    return (pool_size + 4) / 5;
}

double ndcg_pct20(const Ranking& ranking, const Grades& grades, std::size_t pool_size) {
    return ndcg(ranking, grades, pct20_cutoff(pool_size));
}

double mrr(const Ranking& ranking, const RelevantSet& relevant, std::size_t cutoff) {
    require_k(cutoff);
    const std::size_t n = std::min(cutoff, ranking.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (relevant.count(ranking[i]) != 0) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
}

RelevantSet relevant_from_grades(const Grades& grades, int min_grade) {
    RelevantSet out;
    for (const auto& [id, g] : grades) {
        if (g >= min_grade) out.insert(id);
    }
    return out;
}

// ---- metric names ---------------------------------------------------------------------

Metric Metric::parse(std::string_view name) {
    auto with_k = [&](std::string_view prefix, Kind kind) -> std::optional<Metric> {
        if (name.substr(0, prefix.size()) != prefix) return std::nullopt;
        const std::string_view digits = name.substr(prefix.size());
        std::size_t k = 0;
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
        if (ec != std::errc() || ptr != digits.data() + digits.size() || k == 0) {
            throw Error(ErrorKind::kConfigError, "bad metric cutoff in \"" + std::string(name) + "\"");
        }
        return Metric{kind, k};
    };
    if (name == "map" || name == "ap") return {Kind::kAveragePrecision, 0};
    if (name == "r-precision" || name == "rprec") return {Kind::kRPrecision, 0};
    if (name == "ndcg%20") return {Kind::kNdcgPct20, 0};
    if (auto m = with_k("recall@", Kind::kRecall)) return *m;
    if (auto m = with_k("ndcg@", Kind::kNdcg)) return *m;
    if (auto m = with_k("mrr@", Kind::kMrr)) return *m;
    throw Error(ErrorKind::kConfigError, "unknown metric \"" + std::string(name) + "\"");
}

std::string Metric::name() const {
    switch (kind) {
        case Kind::kRecall: return "recall@" + std::to_string(k);
        case Kind::kRPrecision: return "r-precision";
        case Kind::kAveragePrecision: return "map";
        case Kind::kNdcg: return "ndcg@" + std::to_string(k);
        case Kind::kNdcgPct20: return "ndcg%20";
        case Kind::kMrr: return "mrr@" + std::to_string(k);
    }
    return {};
}

std::vector<Metric> parse_metrics(std::string_view list) {
    std::vector<Metric> out;
    std::size_t pos = 0;
    while (pos <= list.size()) {
        std::size_t comma = list.find(',', pos);
        if (comma == std::string_view::npos) comma = list.size();
        std::string_view item = list.substr(pos, comma - pos);
        while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
        while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
        if (!item.empty()) {
            const Metric m = Metric::parse(item);
            if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
        }
        pos = comma + 1;
    }
    if (out.empty()) throw Error(ErrorKind::kConfigError, "no metrics requested");
    return out;
}

// ---- inputs ---------------------------------------------------------------------------

Qrels Qrels::parse(std::string_view text, const std::string& source) {
    Qrels q;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::istringstream fields(line);
        std::vector<std::string> cols;
        for (std::string c; fields >> c;) cols.push_back(c);
        if (cols.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        if (cols.size() != 3 && cols.size() != 4) {
            throw Error(ErrorKind::kParseError, where + ": expected `query candidate grade`");
        }
        const std::string& grade_text = cols.back();
        int grade = 0;
        auto [ptr, ec] = std::from_chars(grade_text.data(), grade_text.data() + grade_text.size(), grade);
        if (ec != std::errc() || ptr != grade_text.data() + grade_text.size() || grade < 0) {
            throw Error(ErrorKind::kParseError, where + ": grade \"" + grade_text + "\" is not an integer >= 0");
        }
        q.grades[cols[0]][cols[cols.size() - 2]] = grade;
    }
    return q;
}

Qrels Qrels::load(const std::filesystem::path& path) { return parse(io::read_file(path), path.string()); }

const Grades& Qrels::of(const std::string& query_id) const {
    static const Grades kEmpty;
    auto it = grades.find(query_id);
    return it == grades.end() ? kEmpty : it->second;
}

InputSequence BenchmarkQuery::sequence() const {
    if (doc) return doc->sequence();
    return segment_input(*text, InputKind::kQuestion);
}

std::vector<BenchmarkQuery> parse_queries(std::string_view text, const std::string& source) {
    std::vector<BenchmarkQuery> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        try {
            const json j = json::parse(line);
            BenchmarkQuery q;
            q.id = j.at("id").get<std::string>();
            if (j.contains("text") && !j["text"].is_null()) q.text = j["text"].get<std::string>();
            if (j.contains("doc") && !j["doc"].is_null()) q.doc = document_from_json(j["doc"]);
            if (q.text.has_value() == q.doc.has_value()) {
                throw Error(ErrorKind::kParseError, where + ": exactly one of \"text\" and \"doc\" is required");
            }
            if (j.contains("facet") && !j["facet"].is_null()) q.facet = j["facet"].get<std::string>();
            if (j.contains("pool") && !j["pool"].is_null()) q.pool = j["pool"].get<std::vector<std::string>>();
            out.push_back(std::move(q));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::kParseError, where + ": " + e.what());
        }
    }
    return out;
}

std::vector<BenchmarkQuery> read_query_file(const std::filesystem::path& path) {
    return parse_queries(io::read_file(path), path.string());
}

// ---- benchmark ------------------------------------------------------------------------

std::string_view benchmark_mode_name(BenchmarkMode mode) {
    return mode == BenchmarkMode::kCorpus ? "corpus" : "pooled";
}

BenchmarkMode parse_benchmark_mode(std::string_view name) {
    if (name == "corpus") return BenchmarkMode::kCorpus;
    if (name == "pooled") return BenchmarkMode::kPooled;
    throw Error(ErrorKind::kConfigError, "unknown benchmark mode \"" + std::string(name) + "\"");
}

json MetricReport::to_json() const {
    json qs = json::array();
    for (const auto& q : queries) {
        json e{{"id", q.id}, {"metrics", q.metrics}};
        if (q.facet) e["facet"] = *q.facet;
        if (q.ideal_dcg_zero) e["ideal_dcg_zero"] = true;
        qs.push_back(e);
    }
    json skipped = json::array();
    for (const auto& [id, missing] : skipped_missing) skipped.push_back({{"id", id}, {"missing", missing}});
    return json{{"metadata", metadata},
                {"evaluated", queries.size()},
                {"macro", macro},
                {"excluded_no_relevant", excluded_no_relevant},
                {"skipped_missing_candidates", skipped},
                {"queries", qs}};
}

QueryResult evaluate_ranking(const std::string& query_id, const Ranking& ranking, const Grades& grades,
                             std::size_t pool_size, const std::vector<Metric>& metrics, int min_relevant_grade) {
    const RelevantSet relevant = relevant_from_grades(grades, min_relevant_grade);
    require_relevant(relevant);
    QueryResult r;
    r.id = query_id;
    for (const Metric& m : metrics) {
        double v = 0.0;
        switch (m.kind) {
            case Metric::Kind::kRecall: v = recall_at_k(ranking, relevant, m.k); break;
            case Metric::Kind::kRPrecision: v = r_precision(ranking, relevant); break;
            case Metric::Kind::kAveragePrecision: v = average_precision(ranking, relevant); break;
            case Metric::Kind::kNdcg: {
                const NdcgValue n = ndcg_detail(ranking, grades, m.k);
                r.ideal_dcg_zero = r.ideal_dcg_zero || n.ideal_zero;
                v = n.value;
                break;
            }
            case Metric::Kind::kNdcgPct20: {
                const NdcgValue n = ndcg_detail(ranking, grades, pct20_cutoff(pool_size));
                r.ideal_dcg_zero = r.ideal_dcg_zero || n.ideal_zero;
                v = n.value;
                break;
            }
            case Metric::Kind::kMrr: v = mrr(ranking, relevant, m.k); break;
        }
        r.metrics[m.name()] = v;
    }
    return r;
}

namespace {

ScoringStrategy facet_strategy(const std::string& facet, const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == facet) return ScoringStrategy::facet_only(i);
    }
    if (names.size() == kDefaultFacetKeys.size()) {
        for (std::size_t i = 0; i < kDefaultFacetKeys.size(); ++i) {
            if (kDefaultFacetKeys[i] == facet) return ScoringStrategy::facet_only(i);
        }
    }
    throw Error(ErrorKind::kFacetOutOfRange, "query facet \"" + facet + "\" is not an index facet");
}

}  // namespace

MetricReport run_benchmark(const FacetIndex& index, const std::vector<BenchmarkQuery>& queries, const Qrels& qrels,
                           const QueryEncoder& encode, const BenchmarkOptions& options) {
    MetricReport report;
    json metric_names = json::array();
    for (const Metric& m : options.metrics) metric_names.push_back(m.name());
    report.metadata = options.extra_metadata;
    report.metadata["mode"] = benchmark_mode_name(options.mode);
    report.metadata["strategy"] = options.mode == BenchmarkMode::kPooled
                                      ? "facet per query (" + options.strategy.name(index.facet_names()) + " otherwise)"
                                      : options.strategy.name(index.facet_names());
    report.metadata["metrics"] = metric_names;
    report.metadata["ndcg_pct20_rounding"] = "ceil";
    report.metadata["min_relevant_grade"] = options.min_relevant_grade;
    report.metadata["similarity"] = similarity_kind_name(index.similarity());
    report.metadata["index_size"] = index.size();
    report.metadata["query_count"] = queries.size();

    for (const BenchmarkQuery& q : queries) {
        const Grades& grades = qrels.of(q.id);
        if (relevant_from_grades(grades, options.min_relevant_grade).empty()) {
            report.excluded_no_relevant.push_back(q.id);
            continue;
        }
        std::vector<std::string> missing;
        if (options.mode == BenchmarkMode::kPooled && q.pool) {
            for (const auto& id : *q.pool) {
                if (!index.find(id)) missing.push_back(id);
            }
        } else {
            for (const auto& [id, g] : grades) {
                if (g >= options.min_relevant_grade && !index.find(id)) missing.push_back(id);
            }
        }
        if (!missing.empty()) {
            report.skipped_missing[q.id] = std::move(missing);
            continue;
        }

        ScoringStrategy strategy = options.strategy;
        if (options.mode == BenchmarkMode::kPooled && q.facet) strategy = facet_strategy(*q.facet, index.facet_names());
        const FacetRepresentation rep = encode(q);
        std::vector<SearchHit> hits;
        if (options.mode == BenchmarkMode::kPooled && q.pool) {
            hits = index.rank_subset(rep, strategy, *q.pool);
        } else if (!index.empty()) {
            hits = index.search(rep, strategy, index.size());
        }
        Ranking ranking;
        for (const auto& h : hits) {
            if (options.exclude_self && h.id == q.id) continue;
            ranking.push_back(h.id);
        }
        QueryResult r = evaluate_ranking(q.id, ranking, grades, std::max<std::size_t>(ranking.size(), 1),
                                         options.metrics, options.min_relevant_grade);
        if (q.facet) r.facet = *q.facet;
        report.queries.push_back(std::move(r));
    }
    for (const Metric& m : options.metrics) {
        if (report.queries.empty()) break;
        double sum = 0.0;
        for (const auto& r : report.queries) sum += r.metrics.at(m.name());
        report.macro[m.name()] = sum / static_cast<double>(report.queries.size());
    }
    return report;
}

}  // namespace unifar
