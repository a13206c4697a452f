#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdlab/tensor.hpp"

namespace kdlab {

enum class Arch { encoder_decoder, decoder_only };

std::string arch_name(Arch a);
Arch arch_from_name(const std::string& s);

struct ModelConfig {
    Arch arch = Arch::encoder_decoder;
    int encoder_layers = 2; // 0 for decoder_only
    int decoder_layers = 2;
    int d_model = 64;
    int heads = 2;
    int d_ff = 128;
    int vocab_size = 0;
    int max_len = 64;
    real_t dropout = 0.0;
    bool tie_embeddings = true;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// Reserved token ids shared by every model/vocab in the lab.
struct Special {
    static constexpr TokenId pad = 0;
    static constexpr TokenId bos = 1;
    static constexpr TokenId eos = 2;
    static constexpr TokenId sep = 3; // task separator for decoder-only inputs
    static constexpr TokenId unk = 4;
    static constexpr int count = 5;
};

// Captured activations of one layer from a batched teacher-forced forward.
struct LayerStates {
    Tensor q, k, v; // self-attention projections, [rows, d_model]
    Tensor hidden;  // block output, [rows, d_model]
};

struct ForwardTrace {
    Tensor logits;                           // [sum of target lens, vocab]
    std::vector<AttentionSpan> target_spans; // rows of each example's target positions in logits
    std::vector<AttentionSpan> state_spans;  // rows of each example in decoder state matrices
    std::vector<AttentionSpan> source_spans; // rows of each example in encoder state matrices
    std::vector<LayerStates> encoder_states; // per encoder layer (capture mode only)
    std::vector<LayerStates> decoder_states; // per decoder layer (capture mode only)
    size_t batch = 0;
};

struct ForwardOptions {
    bool train_mode = false;     // record graph + apply dropout
    bool capture_states = false; // keep per-layer Q/K/V and hidden states
    Rng* rng = nullptr;          // needed when train_mode and dropout > 0
};

// One transformer block's parameters. Pre-layer-norm, sinusoidal positions.
struct Block {
    Tensor wq, wk, wv, wo; // self attention
    Tensor cq, ck, cv, co; // cross attention (ED decoder only)
    Tensor ff1, ff1_b, ff2, ff2_b;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    bool has_cross = false;
};

class Seq2SeqModel {
public:
    Seq2SeqModel(ModelConfig cfg, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }

    // Teacher-forced batched forward. encoder_decoder: sources feed the encoder,
    // targets are decoded behind BOS. decoder_only: source, SEP and target run as
    // one causal stream; logits are returned only for target positions.
    ForwardTrace forward(const std::vector<TokenSeq>& sources,
                         const std::vector<TokenSeq>& targets, const ForwardOptions& opts) const;

    std::vector<Tensor> parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    size_t parameter_count() const;
    void zero_grads();
    bool any_param_grad() const;

    void save(const std::string& path, const nlohmann::json& extra = {}) const;
    static Seq2SeqModel load(const std::string& path);
    void copy_weights_from(const Seq2SeqModel& other); // configs must match

    // internals exposed for the decode/profiling paths
    const std::vector<Block>& encoder_blocks() const { return enc_; }
    const std::vector<Block>& decoder_blocks() const { return dec_; }
    const Tensor& embedding() const { return embedding_; }
    const Tensor& positions() const { return pos_; }
    const Tensor& enc_final_gain() const { return enc_final_g_; }
    const Tensor& enc_final_bias() const { return enc_final_b_; }
    const Tensor& dec_final_gain() const { return dec_final_g_; }
    const Tensor& dec_final_bias() const { return dec_final_b_; }
    const Tensor& lm_head() const { return lm_head_; }

private:
    friend Seq2SeqModel prune_layers(const Seq2SeqModel&, const std::string&);

    Seq2SeqModel() = default;
    void build_params(uint64_t init_seed);

    ModelConfig cfg_;
    Tensor embedding_; // [vocab, d_model]
    Tensor pos_;       // sinusoidal, fixed
    Tensor enc_final_g_, enc_final_b_;
    Tensor dec_final_g_, dec_final_b_;
    Tensor lm_head_; // only when !tie_embeddings
    std::vector<Block> enc_;
    std::vector<Block> dec_;
};

// Structural pruning: keep only the first and last layers of the selected part
// ("encoder" or "decoder"), weights copied; the other part is untouched.
Seq2SeqModel prune_layers(const Seq2SeqModel& model, const std::string& part);

enum class RelationKind { QQ, KK, VV };
RelationKind relation_kind_from_name(const std::string& s);

// Per relation head: softmax(S S^T / sqrt(d_r)) row distributions over positions,
// S in {Q,K,V} of the chosen layer, for one example of the trace.
std::vector<std::vector<TokenDistribution>> attention_relations(
    const ForwardTrace& trace, const std::string& part, size_t layer, RelationKind kind,
    size_t rel_heads, size_t example_index);

// Incremental decoding over a frozen model: encode once, then step token by token
// with per-layer K/V caches.
class DecodeSession {
public:
    DecodeSession(const Seq2SeqModel& model, const TokenSeq& source);
    DecodeSession(const DecodeSession&) = default;

    std::vector<real_t> next_logprobs() const; // over the vocabulary
    const std::vector<real_t>& next_logits() const { return cur_logits_; }
    void push(TokenId token);
    size_t steps_taken() const { return steps_; }

private:
    void consume(TokenId token, size_t position);

    const Seq2SeqModel* model_;
    std::vector<real_t> enc_out_;                 // [m*d], encoder output after final LN
    size_t enc_len_ = 0;
    std::vector<std::vector<real_t>> cross_k_, cross_v_; // per decoder layer, [m*d]
    std::vector<std::vector<real_t>> self_k_, self_v_;   // per decoder layer, grows by d
    std::vector<real_t> cur_logits_;
    size_t pos_index_ = 0; // next stream position to consume
    size_t steps_ = 0;     // generated-token steps so far
};

} // namespace kdlab
