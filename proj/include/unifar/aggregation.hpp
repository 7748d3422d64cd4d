#pragma once

#include "unifar/autodiff.hpp"

#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace unifar {

enum class Branch { kSentence, kToken };

std::string_view branch_name(Branch branch);
Branch parse_branch(std::string_view name);

// Per-facet embeddings of one input plus the attention map that produced them.
struct FacetRepresentation {
    std::string input_id;
    ad::Matrix embeddings;  // N_facet × h
    ad::Matrix attention;   // N_facet × K, K = |S| (sentence) or L (token)
    Branch branch = Branch::kSentence;

    std::size_t facet_count() const { return static_cast<std::size_t>(embeddings.rows()); }
    std::size_t hidden_size() const { return static_cast<std::size_t>(embeddings.cols()); }
};

struct MultiHeadAttentionParams {
    ad::Parameter wq, bq, wk, bk, wv, bv, wo, bo;

    static MultiHeadAttentionParams init(const std::string& prefix, std::size_t hidden, std::mt19937_64& rng);
    std::vector<ad::Parameter*> parameters();
    std::vector<const ad::Parameter*> parameters() const;
};

struct AggregatorParams {
    std::vector<std::string> facet_names;
    std::size_t head_count = 8;

    ad::Parameter anchors;                  // N_facet × h
    ad::Parameter input_proj_w, input_proj_b;  // h × h, 1 × h
    ad::Parameter mlp_w1, mlp_b1;           // 2h × h, 1 × h
    ad::Parameter mlp_w2, mlp_b2;           // h × h, 1 × h
    ad::Parameter norm_gamma, norm_beta;    // 1 × h
    MultiHeadAttentionParams sentence_attention;
    MultiHeadAttentionParams token_attention;

    // Anchors ~ N(0, 0.02²); linear layers Xavier-uniform; zero biases.
    static AggregatorParams init(std::vector<std::string> facet_names, std::size_t hidden, std::size_t head_count,
                                 std::mt19937_64& rng);

    std::size_t facet_count() const { return facet_names.size(); }
    std::size_t hidden_size() const { return static_cast<std::size_t>(anchors.value.cols()); }
    std::vector<ad::Parameter*> parameters();
    std::vector<const ad::Parameter*> parameters() const;
    // Throws ShapeMismatch / ConfigError when shapes disagree or heads do not divide h.
    void validate() const;
};

// Switches for the ablation conditions. Defaults are the full model.
struct AggregatorOptions {
    bool use_input_context = true;
    bool sentence_branch = true;
    bool token_branch = true;
};

// sentence iff |S| >= N_facet.
Branch select_branch(std::size_t sentence_count, std::size_t n_facet);
Branch select_branch(std::size_t sentence_count, std::size_t n_facet, const AggregatorOptions& options);

// q_i = LayerNorm(a_i + MLP([a_i ; W_in e + b_in])), MLP = Linear(2h→h) · GELU · Linear(h→h).
ad::Var make_facet_queries(ad::Binder& bind, const AggregatorParams& params, const ad::Var& e_input,
                           const AggregatorOptions& options = {});
ad::Matrix make_facet_queries(const AggregatorParams& params, const ad::RowVector& e_input,
                              const AggregatorOptions& options = {});

struct AttentionResult {
    ad::Var embeddings;  // N_facet × h
    ad::Var attention;   // N_facet × K, mean over heads of the softmax weights
};

AttentionResult attend(ad::Binder& bind, const MultiHeadAttentionParams& mha, std::size_t head_count,
                       const ad::Var& queries, const ad::Var& keys_values);

struct AggregateResult {
    ad::Var embeddings;
    ad::Var attention;
    Branch branch = Branch::kSentence;
};

AggregateResult aggregate(ad::Binder& bind, const AggregatorParams& params, const ad::Var& tokens,
                          const ad::Var& sentences, const ad::Var& e_input, const AggregatorOptions& options = {});
FacetRepresentation aggregate(const ad::Matrix& tokens, const ad::Matrix& sentences, const ad::RowVector& e_input,
                              const AggregatorParams& params, const AggregatorOptions& options = {});

}  // namespace unifar
