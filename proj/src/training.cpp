#include "unifar/training.hpp"

#include "unifar/error.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <random>
#include <set>

namespace unifar {

using nlohmann::json;

// ---- contrastive ------------------------------------------------------------------

namespace {

double similarity(const ad::RowVector& a, const ad::RowVector& b, SimilarityKind sim) {
    if (a.size() != b.size()) throw Error(ErrorKind::kShapeMismatch, "contrastive vectors differ in dimension");
    const double dot = a.dot(b);
    if (sim == SimilarityKind::kDot) return dot;
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw Error(ErrorKind::kZeroVector, "cosine similarity of a zero vector");
    return dot / (na * nb);
}

}  // namespace

double info_nce(const ContrastiveBatch& batch, SimilarityKind sim) {
    if (batch.positives.empty()) throw Error(ErrorKind::kNoPositives, "InfoNCE needs at least one positive");
    if (!(batch.tau > 0.0)) throw Error(ErrorKind::kValidationError, "temperature must be positive");
    std::vector<double> logits;
    logits.reserve(batch.positives.size() + batch.negatives.size());
    for (const auto& p : batch.positives) logits.push_back(similarity(batch.anchor, p, sim) / batch.tau);
    for (const auto& n : batch.negatives) logits.push_back(similarity(batch.anchor, n, sim) / batch.tau);
    const double top = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - top);
    const double lse = top + std::log(z);
    double pos = 0.0;
    for (std::size_t i = 0; i < batch.positives.size(); ++i) pos += logits[i];
    return lse - pos / static_cast<double>(batch.positives.size());
}

ad::Var info_nce(const ad::Var& anchor, const std::vector<ad::Var>& positives, const std::vector<ad::Var>& negatives,
                 double tau, SimilarityKind sim) {
    if (positives.empty()) throw Error(ErrorKind::kNoPositives, "InfoNCE needs at least one positive");
    if (!(tau > 0.0)) throw Error(ErrorKind::kValidationError, "temperature must be positive");
    std::vector<ad::Var> rows(positives);
    rows.insert(rows.end(), negatives.begin(), negatives.end());
    ad::Var keys = ad::vconcat(rows);
    ad::Var a = anchor;
    if (sim == SimilarityKind::kCosine) {
        a = ad::l2_normalize_rows(a);
        keys = ad::l2_normalize_rows(keys);
    }
    ad::Var logits = ad::scale(ad::matmul_nt(a, keys), 1.0 / tau);
    return ad::multi_positive_nce(logits, static_cast<Eigen::Index>(positives.size()));
}

namespace {

const std::string& facet_key(const LossOptions& options, std::size_t facet) {
    if (facet >= options.facet_keys.size()) {
        throw Error(ErrorKind::kFacetOutOfRange, "facet " + std::to_string(facet) + " has no key");
    }
    return options.facet_keys[facet];
}

ad::RowVector facet_row(const ad::Matrix& m, std::size_t facet) {
    if (facet >= static_cast<std::size_t>(m.rows())) {
        throw Error(ErrorKind::kFacetOutOfRange, "facet " + std::to_string(facet) + " >= N_facet");
    }
    return m.row(static_cast<Eigen::Index>(facet));
}

const std::vector<FtuEmbeddings::Item>* find_items(const std::map<std::string, std::vector<FtuEmbeddings::Item>>& m,
                                                   const std::string& key) {
    auto it = m.find(key);
    return it == m.end() ? nullptr : &it->second;
}

}  // namespace

std::optional<double> loss_dd(const FtuEmbeddings& e, std::size_t facet, const LossOptions& options) {
    const std::string& key = facet_key(options, facet);
    const auto* pos = find_items(e.pos, key);
    if (pos == nullptr || pos->empty()) return std::nullopt;
    ContrastiveBatch batch;
    batch.tau = options.tau;
    batch.anchor = facet_row(e.query_doc.embeddings, facet);
    for (const auto& p : *pos) batch.positives.push_back(facet_row(p.embeddings, facet));
    if (const auto* neg = find_items(e.neg, key)) {
        for (const auto& n : *neg) batch.negatives.push_back(facet_row(n.embeddings, facet));
    }
    return info_nce(batch, options.similarity);
}

double loss_qd(const FtuEmbeddings& e, std::size_t facet, const LossOptions& options) {
    const std::string& key = facet_key(options, facet);
    auto q = e.questions.find(key);
    if (q == e.questions.end()) throw Error(ErrorKind::kMissingQuestion, "no question for facet " + key);
    ContrastiveBatch batch;
    batch.tau = options.tau;
    batch.anchor = facet_row(q->second, facet);
    std::set<std::string> seen{e.query_doc.id};
    batch.positives.push_back(facet_row(e.query_doc.embeddings, facet));
    if (const auto* pos = find_items(e.pos, key)) {
        for (const auto& p : *pos) {
            if (seen.insert(p.id).second) batch.positives.push_back(facet_row(p.embeddings, facet));
        }
    }
    if (const auto* neg = find_items(e.neg, key)) {
        for (const auto& n : *neg) batch.negatives.push_back(facet_row(n.embeddings, facet));
    }
    return info_nce(batch, options.similarity);
}

// ---- attention supervision ---------------------------------------------------------

GoldAlignment gold_matrix(const std::vector<std::string>& labels, const std::vector<std::string>& facet_names) {
    std::vector<std::size_t> facet_of(labels.size());
    std::vector<std::size_t> counts(facet_names.size(), 0);
    for (std::size_t s = 0; s < labels.size(); ++s) {
        auto it = std::find(facet_names.begin(), facet_names.end(), labels[s]);
        if (it == facet_names.end()) {
            throw Error(ErrorKind::kUnknownLabel, "sentence " + std::to_string(s) + " has label \"" + labels[s] + "\"");
        }
        facet_of[s] = static_cast<std::size_t>(it - facet_names.begin());
        ++counts[facet_of[s]];
    }
    GoldAlignment gold;
    gold.sentence_count = labels.size();
    for (std::size_t f = 0; f < facet_names.size(); ++f) {
        if (counts[f] > 0) gold.facets.push_back(f);
    }
    gold.g = ad::Matrix::Zero(static_cast<Eigen::Index>(gold.facets.size()), static_cast<Eigen::Index>(labels.size()));
    for (std::size_t r = 0; r < gold.facets.size(); ++r) {
        const std::size_t f = gold.facets[r];
        for (std::size_t s = 0; s < labels.size(); ++s) {
            if (facet_of[s] == f) {
                gold.g(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s)) = 1.0 / static_cast<double>(counts[f]);
            }
        }
    }
    return gold;
}

namespace {

// Row and column selections that line A up with G.
std::pair<std::vector<int>, std::vector<int>> kl_selection(Eigen::Index a_rows, Eigen::Index a_cols,
                                                           const GoldAlignment& gold, TitleHandling title) {
    const Eigen::Index offset = title == TitleHandling::kDropTitle ? 1 : 0;
    if (a_cols - offset != static_cast<Eigen::Index>(gold.sentence_count)) {
        throw Error(ErrorKind::kShapeMismatch, "attention has " + std::to_string(a_cols) + " columns for " +
                                                   std::to_string(gold.sentence_count) + " labeled sentences");
    }
    if (gold.facets.empty()) throw Error(ErrorKind::kShapeMismatch, "gold alignment has no facets");
    std::vector<int> rows, cols;
    for (std::size_t f : gold.facets) {
        if (static_cast<Eigen::Index>(f) >= a_rows) throw Error(ErrorKind::kFacetOutOfRange, "gold facet beyond A");
        rows.push_back(static_cast<int>(f));
    }
    for (Eigen::Index c = offset; c < a_cols; ++c) cols.push_back(static_cast<int>(c));
    return {rows, cols};
}

double kl_divisor(const GoldAlignment& gold) {
    return static_cast<double>(gold.facets.size()) * static_cast<double>(gold.sentence_count);
}

}  // namespace

double loss_kl(const ad::Matrix& attention, const GoldAlignment& gold, TitleHandling title) {
    auto [rows, cols] = kl_selection(attention.rows(), attention.cols(), gold, title);
    double total = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        double row_sum = 0.0;
        for (int c : cols) row_sum += attention(rows[r], c);
        for (std::size_t s = 0; s < cols.size(); ++s) {
            const double t = gold.g(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s));
            if (t <= 0.0) continue;
            const double p = row_sum > 0.0 ? attention(rows[r], cols[s]) / row_sum : 0.0;
            total += t * std::log(t / std::max(p, kKlEpsilon));
        }
    }
    return total / kl_divisor(gold);
}

ad::Var loss_kl(const ad::Var& attention, const GoldAlignment& gold, TitleHandling title) {
    auto [rows, cols] = kl_selection(attention.rows(), attention.cols(), gold, title);
    ad::Var pred = ad::normalize_row_sums(ad::select(attention, rows, cols));
    return ad::kl_rows(gold.g, pred, kKlEpsilon, kl_divisor(gold));
}

double loss_kl(const FacetRepresentation& rep, const GoldAlignment& gold, TitleHandling title) {
    if (rep.branch != Branch::kSentence) {
        throw Error(ErrorKind::kBranchMismatch, "\"" + rep.input_id + "\" was aggregated over tokens");
    }
    return loss_kl(rep.attention, gold, title);
}

LossBreakdown total_loss(const std::vector<FtuEmbeddings>& batch, const std::vector<KlTerm>& kl, double lambda,
                         const LossOptions& options) {
    LossBreakdown out;
    const std::size_t n_facet = options.facet_keys.size();
    for (const FtuEmbeddings& e : batch) {
        double dd = 0.0, qd = 0.0;
        std::size_t n_dd = 0, n_qd = 0;
        for (std::size_t f = 0; f < n_facet; ++f) {
            if (auto v = loss_dd(e, f, options)) {
                dd += *v;
                ++n_dd;
            }
            if (e.questions.count(options.facet_keys[f]) != 0) {
                qd += loss_qd(e, f, options);
                ++n_qd;
            }
        }
        if (n_dd > 0) out.l_dd += dd / static_cast<double>(n_dd);
        if (n_qd > 0) out.l_qd += qd / static_cast<double>(n_qd);
    }
    if (!batch.empty()) {
        out.l_dd /= static_cast<double>(batch.size());
        out.l_qd /= static_cast<double>(batch.size());
    }
    for (const KlTerm& term : kl) out.l_kl += loss_kl(term.attention, term.gold, term.title);
    if (!kl.empty()) out.l_kl /= static_cast<double>(kl.size());
    out.total = out.l_dd + out.l_qd + lambda * out.l_kl;
    return out;
}

double anneal_lambda(std::size_t step, std::size_t total_steps, double start, double end) {
    if (step > total_steps) throw Error(ErrorKind::kValidationError, "lambda step beyond schedule");
    if (total_steps == 0) return start;
    return start + (end - start) * static_cast<double>(step) / static_cast<double>(total_steps);
}

// ---- config -------------------------------------------------------------------------

std::string_view qd_gradient_name(QdGradient mode) {
    return mode == QdGradient::kQuestionPath ? "question-path" : "frozen-aggregation";
}

QdGradient parse_qd_gradient(std::string_view name) {
    if (name == "question-path") return QdGradient::kQuestionPath;
    if (name == "frozen-aggregation") return QdGradient::kFrozenAggregation;
    throw Error(ErrorKind::kConfigError, "unknown qd_gradient \"" + std::string(name) + "\"");
}

TrainConfig TrainConfig::mpnet_preset() {
    TrainConfig c;
    c.lr_base = 3e-6;
    return c;
}

const std::vector<std::string>& TrainConfig::config_keys() {
    static const std::vector<std::string> keys{
        "preset",       "epochs",       "batch_size",   "grad_accum",   "warmup_fraction",    "lr_base",
        "lr_aggregation", "weight_decay", "beta1",      "beta2",        "adam_epsilon",       "tau",
        "lambda_start", "lambda_end",   "seed",         "max_steps",    "similarity",         "qd_gradient",
        "in_batch_negatives", "freeze_anchors", "shuffle", "facet_keys"};
    return keys;
}

namespace {

std::size_t non_negative(long long v, const char* key) {
    if (v < 0) throw Error(ErrorKind::kConfigError, std::string(key) + " must be >= 0");
    return static_cast<std::size_t>(v);
}

}  // namespace

TrainConfig TrainConfig::from_config(const io::KeyValueConfig& cfg) {
    TrainConfig c;
    if (auto preset = cfg.get("preset")) {
        if (*preset == "mpnet") {
            c = mpnet_preset();
        } else if (*preset != "default") {
            throw Error(ErrorKind::kConfigError, "unknown preset \"" + *preset + "\"");
        }
    }
    auto size = [&](const char* key, std::size_t fallback) {
        return non_negative(cfg.get_int(key, static_cast<long long>(fallback)), key);
    };
    c.epochs = size("epochs", c.epochs);
    c.batch_size = size("batch_size", c.batch_size);
    c.grad_accum = size("grad_accum", c.grad_accum);
    c.max_steps = size("max_steps", c.max_steps);
    c.warmup_fraction = cfg.get_double("warmup_fraction", c.warmup_fraction);
    c.lr_base = cfg.get_double("lr_base", c.lr_base);
    c.lr_aggregation = cfg.get_double("lr_aggregation", c.lr_aggregation);
    c.weight_decay = cfg.get_double("weight_decay", c.weight_decay);
    c.beta1 = cfg.get_double("beta1", c.beta1);
    c.beta2 = cfg.get_double("beta2", c.beta2);
    c.adam_epsilon = cfg.get_double("adam_epsilon", c.adam_epsilon);
    c.tau = cfg.get_double("tau", c.tau);
    c.lambda_start = cfg.get_double("lambda_start", c.lambda_start);
    c.lambda_end = cfg.get_double("lambda_end", c.lambda_end);
    c.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long long>(c.seed)));
    if (auto v = cfg.get("similarity")) c.similarity = parse_similarity_kind(*v);
    if (auto v = cfg.get("qd_gradient")) c.qd_gradient = parse_qd_gradient(*v);
    c.in_batch_negatives = cfg.get_bool("in_batch_negatives", c.in_batch_negatives);
    c.freeze_anchors = cfg.get_bool("freeze_anchors", c.freeze_anchors);
    c.shuffle = cfg.get_bool("shuffle", c.shuffle);
    if (auto v = cfg.get("facet_keys")) {
        c.facet_keys.clear();
        std::string item;
        for (char ch : *v + ",") {
            if (ch == ',') {
                if (!item.empty()) c.facet_keys.push_back(item);
                item.clear();
            } else if (ch != ' ' && ch != '\t') {
                item += ch;
            }
        }
    }
    c.validate();
    return c;
}

json TrainConfig::to_json() const {
    return json{{"epochs", epochs},
                {"batch_size", batch_size},
                {"grad_accum", grad_accum},
                {"warmup_fraction", warmup_fraction},
                {"lr_base", lr_base},
                {"lr_aggregation", lr_aggregation},
                {"weight_decay", weight_decay},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_epsilon", adam_epsilon},
                {"tau", tau},
                {"lambda_start", lambda_start},
                {"lambda_end", lambda_end},
                {"seed", seed},
                {"max_steps", max_steps},
                {"similarity", similarity_kind_name(similarity)},
                {"qd_gradient", qd_gradient_name(qd_gradient)},
                {"in_batch_negatives", in_batch_negatives},
                {"freeze_anchors", freeze_anchors},
                {"shuffle", shuffle},
                {"facet_keys", facet_keys}};
}

void TrainConfig::validate() const {
    auto bad = [](const std::string& what) { throw Error(ErrorKind::kConfigError, what); };
    if (epochs == 0 && max_steps == 0) bad("epochs or max_steps must be positive");
    if (batch_size == 0) bad("batch_size must be positive");
    if (grad_accum == 0) bad("grad_accum must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) bad("warmup_fraction must lie in [0, 1]");
    if (!(lr_base >= 0.0) || !(lr_aggregation >= 0.0)) bad("learning rates must be >= 0");
    if (!(tau > 0.0)) bad("tau must be positive");
    if (!(lambda_start >= 0.0) || !(lambda_end >= 0.0)) bad("lambda must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) bad("betas must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) bad("adam_epsilon must be positive");
    if (facet_keys.empty()) bad("facet_keys must not be empty");
}

// ---- schedule / optimizer --------------------------------------------------------

std::size_t total_steps(std::size_t ftu_count, const TrainConfig& cfg) {
    if (cfg.max_steps > 0) return cfg.max_steps;
    const std::size_t micro = (ftu_count + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t per_epoch = (micro + cfg.grad_accum - 1) / cfg.grad_accum;
    return cfg.epochs * per_epoch;
}

double lr_multiplier(std::size_t step, std::size_t total, double warmup_fraction) {
    if (total == 0) return 0.0;
    const auto warmup = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total)));
    if (step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total <= warmup) return 1.0;
    return static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

AdamW::AdamW(std::vector<ad::Parameter*> params, const TrainConfig& cfg) : cfg_(cfg) {
    for (ad::Parameter* p : params) {
        double lr = p->group == ad::ParamGroup::kAggregation ? cfg.lr_aggregation : cfg.lr_base;
        if (cfg.freeze_anchors && p->group == ad::ParamGroup::kAnchors) lr = 0.0;
        states_.push_back({p, ad::Matrix::Zero(p->value.rows(), p->value.cols()),
                           ad::Matrix::Zero(p->value.rows(), p->value.cols()), lr});
    }
}

void AdamW::step(double multiplier) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (State& s : states_) {
        const double lr = s.lr * multiplier;
        if (lr == 0.0) continue;
        const ad::Matrix& g = s.param->grad;
        s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * g;
        s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        const ad::Matrix update =
            (s.m / bc1).array() / ((s.v / bc2).array().sqrt() + cfg_.adam_epsilon) + cfg_.weight_decay * s.param->value.array();
        s.param->value -= lr * update;
    }
}

// ---- batch objective -------------------------------------------------------------

namespace {

struct DocEntry {
    const LabeledDocument* doc = nullptr;
    UnifarModel::ForwardPass pass;
    ad::Var detached;  // stop-gradient copy of the facet embeddings, created on first use
};

class BatchBuilder {
public:
    BatchBuilder(UnifarModel& model, const TrainConfig& cfg, ad::Tape& tape, bool trainable)
        : model_(model),
          cfg_(cfg),
          tape_(tape),
          base_(tape, trainable),
          agg_(tape, trainable),
          agg_frozen_(tape, false) {}

    DocEntry& doc(const LabeledDocument& d) {
        for (auto& [id, entry] : docs_) {
            if (id == d.id) return entry;
        }
        DocEntry entry;
        entry.doc = &d;
        entry.pass = model_.forward(base_, agg_, d.sequence());
        docs_.emplace_back(d.id, std::move(entry));
        return docs_.back().second;
    }

    ad::Var detached(DocEntry& e) {
        if (!e.detached.valid()) e.detached = tape_.detach(e.pass.result.embeddings);
        return e.detached;
    }

    ad::Var question(const std::string& text) {
        InputSequence seq = segment_input(text, InputKind::kQuestion, std::nullopt, model_.config().sentence_splitter);
        ad::Binder& agg = cfg_.qd_gradient == QdGradient::kFrozenAggregation ? agg_frozen_ : agg_;
        return model_.forward(base_, agg, seq).result.embeddings;
    }

    ad::Binder& agg() { return agg_; }
    std::deque<std::pair<std::string, DocEntry>>& docs() { return docs_; }

private:
    UnifarModel& model_;
    const TrainConfig& cfg_;
    ad::Tape& tape_;
    ad::Binder base_;
    ad::Binder agg_;
    ad::Binder agg_frozen_;
    std::deque<std::pair<std::string, DocEntry>> docs_;
};

ad::Var row(const ad::Var& m, std::size_t f) { return ad::gather_rows(m, {static_cast<int>(f)}); }

void require_finite(double v, const std::string& what, const std::string& ftu_id) {
    if (!std::isfinite(v)) {
        throw Error(ErrorKind::kNonFiniteLoss, what + " is not finite for FTU \"" + ftu_id + "\"");
    }
}

}  // namespace

MicroBatchLoss build_batch_loss(UnifarModel& model, const std::vector<const FacetTrainingUnit*>& batch, double lambda,
                                const TrainConfig& cfg, ad::Tape& tape, bool trainable) {
    if (batch.empty()) throw Error(ErrorKind::kValidationError, "empty training batch");
    if (cfg.facet_keys.size() != model.facet_count()) {
        throw Error(ErrorKind::kConfigError, std::to_string(cfg.facet_keys.size()) + " facet keys for a model with " +
                                                 std::to_string(model.facet_count()) + " facets");
    }
    BatchBuilder b(model, cfg, tape, trainable);
    const std::size_t n_facet = model.facet_count();
    MicroBatchLoss out;
    std::vector<ad::Var> contrastive;
    std::map<std::string, std::string> doc_owner;  // doc id -> first FTU id, for error messages

    for (const FacetTrainingUnit* ftu : batch) {
        std::vector<ad::Var> dd_terms, qd_terms;
        DocEntry& q = b.doc(ftu->query_doc);
        doc_owner.emplace(ftu->query_doc.id, ftu->id());
        for (std::size_t f = 0; f < n_facet; ++f) {
            const std::string& key = cfg.facet_keys[f];
            static const std::vector<LabeledDocument> kNone;
            auto pos_it = ftu->pos.find(key);
            auto neg_it = ftu->neg.find(key);
            const auto& pos = pos_it == ftu->pos.end() ? kNone : pos_it->second;
            const auto& neg = neg_it == ftu->neg.end() ? kNone : neg_it->second;
            for (const auto* side : {&pos, &neg}) {
                for (const auto& d : *side) doc_owner.emplace(d.id, ftu->id());
            }

            if (!pos.empty()) {
                std::vector<ad::Var> p, n;
                std::set<std::string> pos_ids;
                for (const auto& d : pos) {
                    p.push_back(row(b.doc(d).pass.result.embeddings, f));
                    pos_ids.insert(d.id);
                }
                for (const auto& d : neg) n.push_back(row(b.doc(d).pass.result.embeddings, f));
                if (cfg.in_batch_negatives) {
                    for (const FacetTrainingUnit* other : batch) {
                        const std::string& oid = other->query_doc.id;
                        if (other == ftu || oid == ftu->query_doc.id || pos_ids.count(oid) != 0) continue;
                        n.push_back(row(b.doc(other->query_doc).pass.result.embeddings, f));
                    }
                }
                dd_terms.push_back(info_nce(row(q.pass.result.embeddings, f), p, n, cfg.tau, cfg.similarity));
            }

            auto question = ftu->questions.find(key);
            if (question != ftu->questions.end()) {
                ad::Var qe = b.question(question->second);
                std::vector<ad::Var> p{row(b.detached(q), f)}, n;
                std::set<std::string> seen{ftu->query_doc.id};
                for (const auto& d : pos) {
                    if (seen.insert(d.id).second) p.push_back(row(b.detached(b.doc(d)), f));
                }
                for (const auto& d : neg) n.push_back(row(b.detached(b.doc(d)), f));
                qd_terms.push_back(info_nce(row(qe, f), p, n, cfg.tau, cfg.similarity));
            }
        }
        std::vector<ad::Var> parts;
        if (!dd_terms.empty()) {
            ad::Var dd = ad::mean(dd_terms);
            require_finite(dd.scalar(), "L_DD", ftu->id());
            out.values.l_dd += dd.scalar();
            parts.push_back(dd);
        }
        if (!qd_terms.empty()) {
            ad::Var qd = ad::mean(qd_terms);
            require_finite(qd.scalar(), "L_QD", ftu->id());
            out.values.l_qd += qd.scalar();
            parts.push_back(qd);
        }
        if (parts.empty()) {
            throw Error(ErrorKind::kNoPositives, "FTU \"" + ftu->id() + "\" has neither positives nor questions");
        }
        contrastive.push_back(parts.size() == 1 ? parts.front() : ad::add_all(parts));
    }
    out.values.l_dd /= static_cast<double>(batch.size());
    out.values.l_qd /= static_cast<double>(batch.size());

    std::vector<ad::Var> kl_terms;
    for (auto& [id, entry] : b.docs()) {
        const UnifarModel::ForwardPass& pass = entry.pass;
        if (pass.result.branch != Branch::kSentence) continue;
        std::vector<std::string> labels;
        for (int s : pass.tok.sentence_index) labels.push_back(entry.doc->labels.at(static_cast<std::size_t>(s)));
        if (labels.empty()) continue;
        GoldAlignment gold = gold_matrix(labels, model.config().facet_names);
        ad::Var attention = model.supervision_attention(b.agg(), pass);
        ad::Var kl = loss_kl(attention, gold, pass.tok.has_title ? TitleHandling::kDropTitle : TitleHandling::kKeepAll);
        require_finite(kl.scalar(), "L_KL of document \"" + id + "\"", doc_owner[id]);
        kl_terms.push_back(kl);
    }
    out.kl_documents = kl_terms.size();

    ad::Var total = ad::mean(contrastive);
    if (!kl_terms.empty()) {
        ad::Var kl = ad::mean(kl_terms);
        out.values.l_kl = kl.scalar();
        total = ad::add(total, ad::scale(kl, lambda));
    }
    out.values.total = total.scalar();
    if (!std::isfinite(out.values.total)) {
        throw Error(ErrorKind::kNonFiniteLoss, "total loss is not finite for FTU \"" + batch.front()->id() + "\"");
    }
    out.total = total;
    return out;
}

LossBreakdown evaluate_loss(UnifarModel& model, const std::vector<FacetTrainingUnit>& ftus, double lambda,
                            const TrainConfig& cfg) {
    LossBreakdown sum;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < ftus.size(); i += cfg.batch_size) {
        std::vector<const FacetTrainingUnit*> batch;
        for (std::size_t j = i; j < std::min(ftus.size(), i + cfg.batch_size); ++j) batch.push_back(&ftus[j]);
        ad::Tape tape;
        LossBreakdown v = build_batch_loss(model, batch, lambda, cfg, tape, false).values;
        sum.l_dd += v.l_dd;
        sum.l_qd += v.l_qd;
        sum.l_kl += v.l_kl;
        sum.total += v.total;
        ++batches;
    }
    if (batches > 0) {
        const auto n = static_cast<double>(batches);
        sum.l_dd /= n;
        sum.l_qd /= n;
        sum.l_kl /= n;
        sum.total /= n;
    }
    return sum;
}

json StepLog::to_json() const {
    return json{{"step", step}, {"l_dd", l_dd}, {"l_qd", l_qd}, {"l_kl", l_kl}, {"lambda", lambda}, {"total", total}};
}

namespace {

// Micro-batches grouped per optimizer step. Each epoch is a fresh permutation;
// the final step of an epoch may hold fewer micro-batches.
class StepPlanner {
public:
    StepPlanner(std::size_t n, const TrainConfig& cfg) : n_(n), cfg_(cfg), rng_(cfg.seed) {}

    std::vector<std::vector<std::size_t>> next() {
        if (cursor_ >= order_.size()) new_epoch();
        std::vector<std::vector<std::size_t>> step;
        while (step.size() < cfg_.grad_accum && cursor_ < order_.size()) {
            const std::size_t end = std::min(order_.size(), cursor_ + cfg_.batch_size);
            step.emplace_back(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                              order_.begin() + static_cast<std::ptrdiff_t>(end));
            cursor_ = end;
        }
        return step;
    }

private:
    void new_epoch() {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        if (cfg_.shuffle) {
            // Fisher-Yates with an explicit draw keeps the order identical across standard libraries.
            for (std::size_t i = n_; i > 1; --i) {
                const std::size_t j = static_cast<std::size_t>(rng_() % i);
                std::swap(order_[i - 1], order_[j]);
            }
        }
        cursor_ = 0;
    }

    std::size_t n_;
    const TrainConfig& cfg_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace

TrainResult train(UnifarModel& model, const std::vector<FacetTrainingUnit>& ftus, const TrainConfig& cfg,
                  const std::function<void(const StepLog&)>& on_step) {
    cfg.validate();
    if (ftus.empty()) throw Error(ErrorKind::kValidationError, "training set is empty");
    TrainResult result;
    result.total_steps = total_steps(ftus.size(), cfg);
    AdamW optimizer(model.parameters(), cfg);
    StepPlanner planner(ftus.size(), cfg);

    for (std::size_t step = 0; step < result.total_steps; ++step) {
        const double lambda = anneal_lambda(step, result.total_steps, cfg.lambda_start, cfg.lambda_end);
        for (ad::Parameter* p : model.parameters()) p->zero_grad();
        const auto plan = planner.next();
        const double weight = 1.0 / static_cast<double>(plan.size());
        StepLog log;
        log.step = step;
        log.lambda = lambda;
        for (const auto& micro : plan) {
            std::vector<const FacetTrainingUnit*> batch;
            for (std::size_t i : micro) batch.push_back(&ftus[i]);
            ad::Tape tape;
            MicroBatchLoss loss = build_batch_loss(model, batch, lambda, cfg, tape, true);
            tape.backward(ad::scale(loss.total, weight));
            log.l_dd += weight * loss.values.l_dd;
            log.l_qd += weight * loss.values.l_qd;
            log.l_kl += weight * loss.values.l_kl;
            log.total += weight * loss.values.total;
        }
        for (const ad::Parameter* p : model.parameters()) {
            if (!p->grad.allFinite()) {
                throw Error(ErrorKind::kNonFiniteLoss, "non-finite gradient for " + p->name + " at step " +
                                                           std::to_string(step) + " (FTU \"" +
                                                           ftus[plan.front().front()].id() + "\")");
            }
        }
        optimizer.step(lr_multiplier(step, result.total_steps, cfg.warmup_fraction));
        result.history.push_back(log);
        if (on_step) on_step(log);
    }
    return result;
}

}  // namespace unifar
