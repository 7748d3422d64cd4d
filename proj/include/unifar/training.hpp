#pragma once

#include "unifar/ftu.hpp"
#include "unifar/io.hpp"
#include "unifar/model.hpp"
#include "unifar/retrieval.hpp"

#include "json.hpp"

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace unifar {

// ---- contrastive ------------------------------------------------------------------

struct ContrastiveBatch {
    ad::RowVector anchor;
    std::vector<ad::RowVector> positives;
    std::vector<ad::RowVector> negatives;
    double tau = 0.08;
};

// Multi-positive InfoNCE, log-sum-exp stabilized. Throws NoPositives.
double info_nce(const ContrastiveBatch& batch, SimilarityKind sim = SimilarityKind::kCosine);
ad::Var info_nce(const ad::Var& anchor, const std::vector<ad::Var>& positives, const std::vector<ad::Var>& negatives,
                 double tau, SimilarityKind sim = SimilarityKind::kCosine);

// Per-facet embeddings of one FTU's inputs.
struct FtuEmbeddings {
    struct Item {
        std::string id;
        ad::Matrix embeddings;  // N_facet × h
    };
    Item query_doc;
    std::map<std::string, std::vector<Item>> pos;
    std::map<std::string, std::vector<Item>> neg;
    std::map<std::string, ad::Matrix> questions;
};

struct LossOptions {
    double tau = 0.08;
    SimilarityKind similarity = SimilarityKind::kCosine;
    std::vector<std::string> facet_keys = kDefaultFacetKeys;
};

// nullopt when the facet has no positives (excluded from the facet average).
std::optional<double> loss_dd(const FtuEmbeddings& e, std::size_t facet, const LossOptions& options = {});
// Positives are {d_q} ∪ D_pos, deduplicated by id. Throws MissingQuestion.
double loss_qd(const FtuEmbeddings& e, std::size_t facet, const LossOptions& options = {});

// ---- attention supervision ---------------------------------------------------------

struct GoldAlignment {
    ad::Matrix g;                     // |F^(d)| × |S^(d)|, rows sum to 1
    std::vector<std::size_t> facets;  // facet index of each row, ascending
    std::size_t sentence_count = 0;
};

// Throws UnknownLabel.
GoldAlignment gold_matrix(const std::vector<std::string>& labels, const std::vector<std::string>& facet_names);

enum class TitleHandling { kDropTitle, kKeepAll };

inline constexpr double kKlEpsilon = 1e-8;

// (1/|F|) Σ_f (1/|S|) Σ_s G̃ log(G̃ / max(Ã, ε)) with A restricted to the gold facets.
double loss_kl(const ad::Matrix& attention, const GoldAlignment& gold, TitleHandling title);
ad::Var loss_kl(const ad::Var& attention, const GoldAlignment& gold, TitleHandling title);
// Throws BranchMismatch for token-branch representations.
double loss_kl(const FacetRepresentation& rep, const GoldAlignment& gold, TitleHandling title);

struct KlTerm {
    ad::Matrix attention;
    GoldAlignment gold;
    TitleHandling title = TitleHandling::kDropTitle;
};

struct LossBreakdown {
    double l_dd = 0.0;  // facet-averaged, FTU-averaged
    double l_qd = 0.0;
    double l_kl = 0.0;  // document-averaged
    double total = 0.0;
};

// Mean over FTUs of (mean_f L_DD + mean_f L_QD) plus λ · mean over `kl` of L_KL.
LossBreakdown total_loss(const std::vector<FtuEmbeddings>& batch, const std::vector<KlTerm>& kl, double lambda,
                         const LossOptions& options = {});

double anneal_lambda(std::size_t step, std::size_t total_steps, double start, double end);

// ---- training ------------------------------------------------------------------

enum class QdGradient { kQuestionPath, kFrozenAggregation };

std::string_view qd_gradient_name(QdGradient mode);
QdGradient parse_qd_gradient(std::string_view name);

struct TrainConfig {
    std::size_t epochs = 2;
    std::size_t batch_size = 4;  // FTUs per micro-batch
    std::size_t grad_accum = 4;
    double warmup_fraction = 0.05;
    double lr_base = 2e-5;         // base encoder and facet anchors
    double lr_aggregation = 5e-5;  // all other aggregation parameters
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double tau = 0.08;
    double lambda_start = 0.3;
    double lambda_end = 0.5;
    std::uint64_t seed = 42;
    std::size_t max_steps = 0;  // > 0 overrides the epoch-derived step count
    SimilarityKind similarity = SimilarityKind::kCosine;
    QdGradient qd_gradient = QdGradient::kQuestionPath;
    bool in_batch_negatives = false;
    bool freeze_anchors = false;
    bool shuffle = true;
    std::vector<std::string> facet_keys = kDefaultFacetKeys;

    // Lower learning rate for the base encoder and anchors.
    static TrainConfig mpnet_preset();
    static const std::vector<std::string>& config_keys();
    // `preset = mpnet` applies mpnet_preset() before the other keys.
    static TrainConfig from_config(const io::KeyValueConfig& cfg);
    nlohmann::json to_json() const;
    void validate() const;
    LossOptions loss_options() const { return {tau, similarity, facet_keys}; }
};

// Optimizer steps for `ftu_count` FTUs under cfg.
std::size_t total_steps(std::size_t ftu_count, const TrainConfig& cfg);
// Multiplier on the base learning rate: linear warmup then linear decay to 0.
double lr_multiplier(std::size_t step, std::size_t total, double warmup_fraction);

class AdamW {
public:
    AdamW(std::vector<ad::Parameter*> params, const TrainConfig& cfg);
    // Applies one update with learning rate lr_group × multiplier to every parameter.
    void step(double multiplier);
    std::size_t step_count() const { return t_; }

private:
    struct State {
        ad::Parameter* param;
        ad::Matrix m, v;
        double lr;
    };
    std::vector<State> states_;
    TrainConfig cfg_;
    std::size_t t_ = 0;
};

struct MicroBatchLoss {
    ad::Var total;
    LossBreakdown values;
    std::size_t kl_documents = 0;
};

// Builds the joint objective for `batch` on `tape`. With trainable=false the
// parameters enter as constants.
MicroBatchLoss build_batch_loss(UnifarModel& model, const std::vector<const FacetTrainingUnit*>& batch,
                                double lambda, const TrainConfig& cfg, ad::Tape& tape, bool trainable);

// Mean total over consecutive batches of cfg.batch_size FTUs, in file order.
LossBreakdown evaluate_loss(UnifarModel& model, const std::vector<FacetTrainingUnit>& ftus, double lambda,
                            const TrainConfig& cfg);

struct StepLog {
    std::size_t step = 0;
    double l_dd = 0.0;
    double l_qd = 0.0;
    double l_kl = 0.0;
    double lambda = 0.0;
    double total = 0.0;

    nlohmann::json to_json() const;
};

struct TrainResult {
    std::vector<StepLog> history;
    std::size_t total_steps = 0;
};

// Throws NonFiniteLoss naming the FTU. `on_step` sees every logged step.
TrainResult train(UnifarModel& model, const std::vector<FacetTrainingUnit>& ftus, const TrainConfig& cfg,
                  const std::function<void(const StepLog&)>& on_step = {});

}  // namespace unifar
