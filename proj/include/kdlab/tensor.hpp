#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "kdlab/common.hpp"

namespace kdlab {

// Log-probabilities over a vocabulary at one decoding position.
struct TokenDistribution {
    std::vector<real_t> logprobs;

    size_t vocab() const { return logprobs.size(); }
    static TokenDistribution from_probs(const std::vector<real_t>& probs);
    std::vector<real_t> probs() const;
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    std::vector<size_t> shape;
    std::vector<real_t> data;
    std::vector<real_t> grad; // allocated lazily, same shape as data
    bool requires_grad = false;
    bool backward_done = false; // set on the root once the graph is consumed
    bool spent = false;         // interior node released by a previous backward
    std::vector<NodePtr> parents;
    // propagates grad of this node into parents; cleared after backward
    std::function<void(TensorNode&)> backward_fn;

    size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), real_t(0));
    }
};

// Value-semantic handle to a graph node. Copies share the node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<size_t> shape, real_t value, bool requires_grad = false);
    static Tensor from(std::vector<real_t> data, std::vector<size_t> shape,
                       bool requires_grad = false);
    static Tensor scalar(real_t v, bool requires_grad = false);
    static Tensor randn(std::vector<size_t> shape, Rng& rng, real_t stddev,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t size() const { return node_->data.size(); }
    size_t rows() const { return node_->shape.at(0); }
    size_t cols() const { return node_->shape.at(1); }

    std::vector<real_t>& data() { return node_->data; }
    const std::vector<real_t>& data() const { return node_->data; }
    real_t item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::vector<real_t>& grad() { return node_->grad; }
    const std::vector<real_t>& grad() const { return node_->grad; }
    void zero_grad() {
        if (node_) node_->grad.assign(node_->data.size(), real_t(0));
    }
    void drop_grad() {
        if (node_) node_->grad.clear();
    }

    TensorNode* node() const { return node_.get(); }
    NodePtr node_ptr() const { return node_; }

private:
    NodePtr node_;
};

// Disables graph recording in scope (eval / frozen-teacher forwards).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// One (query-block, key-block) pair inside stacked batch matrices.
// Rows [q_offset, q_offset+q_len) of Q attend to rows [k_offset, k_offset+k_len) of K/V.
struct AttentionSpan {
    size_t q_offset = 0;
    size_t q_len = 0;
    size_t k_offset = 0;
    size_t k_len = 0;
};

// ---- elementwise / shape ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real_t c);
Tensor add_row_broadcast(const Tensor& a, const Tensor& bias); // bias over last dim
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor slice_rows(const Tensor& a, size_t row0, size_t nrows);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor dot_rows(const Tensor& a, const Tensor& b); // sum(a*b), scalar

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// ---- neural-net ops ----
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       real_t eps = 1e-5);
Tensor embedding_lookup(const Tensor& table, const std::vector<TokenId>& ids);
Tensor dropout(const Tensor& x, real_t drop_p, Rng& rng);
// scaled-dot-product attention over per-example spans; causal masks j>i within a span
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           const std::vector<AttentionSpan>& spans, size_t heads,
                           bool causal);

// ---- losses ----
// -sum over unmasked positions of log softmax(logits[i])[targets[i]]
Tensor nll_rows(const Tensor& logits, const std::vector<TokenId>& targets,
                const std::vector<uint8_t>& mask);
// sum over unmasked rows of KL(ref || softmax(logits_row)); ref given as log-probs, constant
Tensor kl_vs_reference_rows(const std::vector<std::vector<real_t>>& ref_logprobs,
                            const Tensor& logits, const std::vector<uint8_t>& mask);
// sum over rows of KL(ref_relation_row || softmax-relation of states); relation is
// softmax(S S^T / sqrt(d_head)) per relation head over each span
Tensor relation_kl_rows(const std::vector<std::vector<real_t>>& ref_relations,
                        const Tensor& states, const std::vector<AttentionSpan>& spans,
                        size_t rel_heads);
// per row: KL(target_dist || softmax(logits) restricted to `support` and renormalized)
struct RestrictedTarget {
    std::vector<TokenId> support;  // token ids, unique
    std::vector<real_t> probs;     // same length, sums to 1
};
Tensor restricted_kl_rows(const std::vector<RestrictedTarget>& targets, const Tensor& logits,
                          const std::vector<uint8_t>& mask);

// ---- autograd ----
// Populates grads of all requires_grad ancestors of a scalar root. Each graph may be
// consumed only once.
void backward(const Tensor& root);

// ---- plain (non-graph) helpers ----
std::vector<real_t> softmax_vec(const std::vector<real_t>& logits);
std::vector<real_t> log_softmax_vec(const std::vector<real_t>& logits);
// KL(p || q) between two distributions given as log-probs, 0*ln0 := 0
real_t kl_divergence(const TokenDistribution& p, const TokenDistribution& q);

// multiply-accumulate counter incremented by matmul/attention (instrumented profiling)
void reset_mac_counter();
uint64_t mac_counter();

} // namespace kdlab
