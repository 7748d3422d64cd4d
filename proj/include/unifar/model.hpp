#pragma once

#include "unifar/aggregation.hpp"
#include "unifar/encoding.hpp"
#include "unifar/io.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace unifar {

enum class AnchorInit { kRandom, kFacetWords, kShared };

std::string_view anchor_init_name(AnchorInit init);
AnchorInit parse_anchor_init(std::string_view name);

struct ModelConfig {
    std::string base_model_name = "tiny-transformer";
    std::size_t hidden_size = 64;
    std::size_t head_count = 8;
    std::size_t max_sequence_length = 512;
    std::vector<std::string> facet_names{"background", "method", "result"};
    AnchorInit anchor_init = AnchorInit::kRandom;
    SplitterKind sentence_splitter = SplitterKind::kRule;
    AggregatorOptions options;
    std::uint64_t seed = 42;

    static const std::vector<std::string>& config_keys();
    // Reads the keys of config_keys() that are present; others keep defaults.
    static ModelConfig from_config(const io::KeyValueConfig& cfg);
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    TokenizerConfig tokenizer_config() const { return {max_sequence_length, WordTokenizer::kCls, WordTokenizer::kSep}; }
};

// Tokenizer + base encoder + facet aggregator.
class UnifarModel {
public:
    UnifarModel(ModelConfig config, WordTokenizer tokenizer);

    const ModelConfig& config() const { return config_; }
    const WordTokenizer& tokenizer() const { return tokenizer_; }
    const BaseEncoder& encoder() const { return *encoder_; }
    BaseEncoder& encoder() { return *encoder_; }
    const AggregatorParams& aggregator() const { return aggregator_; }
    AggregatorParams& aggregator() { return aggregator_; }
    std::size_t facet_count() const { return aggregator_.facet_count(); }
    std::size_t hidden_size() const { return encoder_->hidden_size(); }

    std::vector<ad::Parameter*> parameters();
    std::vector<const ad::Parameter*> parameters() const;
    ad::Parameter& parameter(std::string_view name);

    TokenizedInput tokenize(const InputSequence& seq) const;

    struct ForwardPass {
        TokenizedInput tok;
        ad::Var tokens;
        ad::Var sentences;
        ad::Var context;
        AggregateResult result;
    };
    // `base` binds encoder parameters, `agg` binds aggregation parameters;
    // both must share one tape.
    ForwardPass forward(ad::Binder& base, ad::Binder& agg, const InputSequence& seq) const;

    // Sentence-branch attention recomputed from stop-gradient copies of the
    // encoder outputs, so a loss on it only reaches aggregation parameters.
    ad::Var supervision_attention(ad::Binder& agg, const ForwardPass& pass) const;

    FacetRepresentation embed(const InputSequence& seq, const std::string& id = {}) const;

    // Directory with manifest.json, vocab.json and one float32 blob per parameter.
    void save(const std::filesystem::path& dir, const nlohmann::json& metadata = nlohmann::json::object()) const;
    static UnifarModel load(const std::filesystem::path& dir);

private:
    void init_anchors();

    ModelConfig config_;
    WordTokenizer tokenizer_;
    std::unique_ptr<BaseEncoder> encoder_;
    AggregatorParams aggregator_;
};

inline constexpr const char* kCheckpointFormat = "UNIFAR-CKPT v1";

}  // namespace unifar
