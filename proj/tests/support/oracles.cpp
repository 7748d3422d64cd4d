#include "oracles.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

double cosine(const Row& a, const Row& b) {
    double dot = 0, na = 0, nb = 0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

static double sim(const Row& a, const Row& b, bool cosine_sim) {
    if (cosine_sim) return cosine(a, b);
    double dot = 0;
    for (Eigen::Index i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return dot;
}

double info_nce(const Row& anchor, const std::vector<Row>& pos, const std::vector<Row>& neg, double tau,
                bool cosine_sim) {
    double denom = 0;
    for (const Row& p : pos) denom += std::exp(sim(anchor, p, cosine_sim) / tau);
    for (const Row& n : neg) denom += std::exp(sim(anchor, n, cosine_sim) / tau);
    double total = 0;
    for (const Row& p : pos) total += std::log(std::exp(sim(anchor, p, cosine_sim) / tau) / denom);
    return -total / static_cast<double>(pos.size());
}

double kl_from_labels(const Mat& attention, const std::vector<std::string>& labels,
                      const std::vector<std::string>& facet_names, bool drop_title, double eps) {
    const int offset = drop_title ? 1 : 0;
    const int s_count = static_cast<int>(labels.size());
    double total = 0;
    int facets_present = 0;
    for (int f = 0; f < static_cast<int>(facet_names.size()); ++f) {
        int count = 0;
        for (const auto& l : labels) count += l == facet_names[f] ? 1 : 0;
        if (count == 0) continue;
        ++facets_present;
        double row_sum = 0;
        for (int s = 0; s < s_count; ++s) row_sum += attention(f, s + offset);
        double kl = 0;
        for (int s = 0; s < s_count; ++s) {
            if (labels[s] != facet_names[f]) continue;
            const double g = 1.0 / count;
            const double a = std::max(attention(f, s + offset) / row_sum, eps);
            kl += g * std::log(g / a);
        }
        total += kl / s_count;
    }
    return total / facets_present;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Mat layer_norm_rows(const Mat& x, const Row& gamma, const Row& beta, double eps) {
    Mat out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double mean = 0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) mean += x(i, j);
        mean /= static_cast<double>(x.cols());
        double var = 0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
        var /= static_cast<double>(x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            out(i, j) = (x(i, j) - mean) / std::sqrt(var + eps) * gamma[j] + beta[j];
        }
    }
    return out;
}

static Mat affine(const Mat& x, const Mat& w, const Row& b) {
    Mat out(x.rows(), w.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            double s = b[j];
            for (Eigen::Index k = 0; k < x.cols(); ++k) s += x(i, k) * w(k, j);
            out(i, j) = s;
        }
    }
    return out;
}

Attention multi_head_attention(const Mat& queries, const Mat& kv, const Mat& wq, const Row& bq, const Mat& wk,
                               const Row& bk, const Mat& wv, const Row& bv, const Mat& wo, const Row& bo, int heads) {
    const Mat q = affine(queries, wq, bq), k = affine(kv, wk, bk), v = affine(kv, wv, bv);
    const Eigen::Index h = q.cols(), dh = h / heads;
    Mat concat = Mat::Zero(q.rows(), h);
    Mat weights = Mat::Zero(q.rows(), kv.rows());
    for (int head = 0; head < heads; ++head) {
        for (Eigen::Index i = 0; i < q.rows(); ++i) {
            std::vector<double> e(static_cast<std::size_t>(kv.rows()));
            double z = 0;
            for (Eigen::Index j = 0; j < kv.rows(); ++j) {
                double s = 0;
                for (Eigen::Index c = 0; c < dh; ++c) s += q(i, head * dh + c) * k(j, head * dh + c);
                e[static_cast<std::size_t>(j)] = std::exp(s / std::sqrt(static_cast<double>(dh)));
                z += e[static_cast<std::size_t>(j)];
            }
            for (Eigen::Index j = 0; j < kv.rows(); ++j) {
                const double w = e[static_cast<std::size_t>(j)] / z;
                weights(i, j) += w / heads;
                for (Eigen::Index c = 0; c < dh; ++c) concat(i, head * dh + c) += w * v(j, head * dh + c);
            }
        }
    }
    return {affine(concat, wo, bo), weights};
}

Mat similarity_matrix(const Mat& q, const Mat& c, bool cosine_sim) {
    Mat m(q.rows(), c.rows());
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
        for (Eigen::Index j = 0; j < c.rows(); ++j) m(i, j) = sim(q.row(i), c.row(j), cosine_sim);
    }
    return m;
}

// ---- metrics ------------------------------------------------------------------------

double recall_at_k(const std::vector<std::string>& ranking, const std::set<std::string>& relevant, std::size_t k) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranking.size() && i < k; ++i) hits += relevant.count(ranking[i]);
    return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

double r_precision(const std::vector<std::string>& ranking, const std::set<std::string>& relevant) {
    const std::size_t r = relevant.size();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranking.size() && i < r; ++i) hits += relevant.count(ranking[i]);
    return static_cast<double>(hits) / static_cast<double>(r);
}

double average_precision(const std::vector<std::string>& ranking, const std::set<std::string>& relevant) {
    double sum = 0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        if (relevant.count(ranking[i]) != 0) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    return sum / static_cast<double>(relevant.size());
}

double ndcg(const std::vector<std::string>& ranking, const std::map<std::string, int>& grades, std::size_t cutoff) {
    auto grade = [&](const std::string& id) {
        auto it = grades.find(id);
        return it == grades.end() ? 0 : it->second;
    };
    double dcg = 0;
    for (std::size_t i = 0; i < ranking.size() && i < cutoff; ++i) {
        dcg += (std::pow(2.0, grade(ranking[i])) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
    }
    std::vector<int> ideal;
    for (const auto& [id, g] : grades) ideal.push_back(g);
    std::sort(ideal.rbegin(), ideal.rend());
    double idcg = 0;
    for (std::size_t i = 0; i < ideal.size() && i < cutoff; ++i) {
        idcg += (std::pow(2.0, ideal[i]) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
    }
    return idcg == 0 ? 0.0 : dcg / idcg;
}

double mrr(const std::vector<std::string>& ranking, const std::set<std::string>& relevant, std::size_t cutoff) {
    for (std::size_t i = 0; i < ranking.size() && i < cutoff; ++i) {
        if (relevant.count(ranking[i]) != 0) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
}

}  // namespace oracle
