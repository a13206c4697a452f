#include "kdlab/tensor.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <unordered_set>

extern "C" void openblas_set_num_threads(int);

namespace kdlab {

namespace {

// Single-threaded BLAS keeps reductions bit-deterministic for a given platform.
struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit g_blas_init;

thread_local bool g_grad_enabled = true;
thread_local uint64_t g_mac_count = 0;

constexpr real_t kNegInf = -std::numeric_limits<real_t>::infinity();

size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

NodePtr make_node(std::vector<size_t> shape) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data.assign(shape_numel(node->shape), real_t(0));
    return node;
}

void check_finite(const TensorNode& node, const char* op) {
    for (real_t v : node.data) {
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
    }
}

// Records parents/backward only when grads are enabled and some parent needs them.
void attach(const NodePtr& out, std::initializer_list<NodePtr> parents,
            std::function<void(TensorNode&)> backward_fn) {
    if (!g_grad_enabled) return;
    bool needs = false;
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
    if (!needs) return;
    out->requires_grad = true;
    out->parents.assign(parents.begin(), parents.end());
    out->backward_fn = std::move(backward_fn);
}

// C (+)= op(A) op(B); all row-major
void gemm(const real_t* a, const real_t* b, real_t* c, size_t m, size_t n, size_t k,
          bool trans_a, bool trans_b, bool accumulate, size_t lda = 0, size_t ldb = 0,
          size_t ldc = 0) {
    if (lda == 0) lda = trans_a ? m : k;
    if (ldb == 0) ldb = trans_b ? k : n;
    if (ldc == 0) ldc = n;
    g_mac_count += static_cast<uint64_t>(m) * n * k;
#ifdef KDLAB_USE_FLOAT32
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, 1.0f, a, (int)lda,
                b, (int)ldb, accumulate ? 1.0f : 0.0f, c, (int)ldc);
#else
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, 1.0, a, (int)lda,
                b, (int)ldb, accumulate ? 1.0 : 0.0, c, (int)ldc);
#endif
}

void softmax_inplace(real_t* row, size_t n) {
    real_t mx = row[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    real_t sum = 0;
    for (size_t i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - mx);
        sum += row[i];
    }
    for (size_t i = 0; i < n; ++i) row[i] /= sum;
}

real_t logsumexp(const real_t* row, size_t n) {
    real_t mx = row[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    real_t sum = 0;
    for (size_t i = 0; i < n; ++i) sum += std::exp(row[i] - mx);
    return mx + std::log(sum);
}

} // namespace

// ---- TokenDistribution ----

TokenDistribution TokenDistribution::from_probs(const std::vector<real_t>& probs) {
    TokenDistribution d;
    d.logprobs.resize(probs.size());
    for (size_t i = 0; i < probs.size(); ++i)
        d.logprobs[i] = probs[i] > 0 ? std::log(probs[i]) : kNegInf;
    return d;
}

std::vector<real_t> TokenDistribution::probs() const {
    std::vector<real_t> p(logprobs.size());
    for (size_t i = 0; i < logprobs.size(); ++i) p[i] = std::exp(logprobs[i]);
    return p;
}

// ---- Tensor factories ----

Tensor Tensor::zeros(std::vector<size_t> shape, bool requires_grad) {
    auto node = make_node(std::move(shape));
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::full(std::vector<size_t> shape, real_t value, bool requires_grad) {
    auto node = make_node(std::move(shape));
    std::fill(node->data.begin(), node->data.end(), value);
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::from(std::vector<real_t> data, std::vector<size_t> shape, bool requires_grad) {
    kd_arg_check(data.size() == shape_numel(shape), "Tensor::from: data/shape size mismatch");
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::scalar(real_t v, bool requires_grad) {
    return Tensor::from({v}, {1}, requires_grad);
}

Tensor Tensor::randn(std::vector<size_t> shape, Rng& rng, real_t stddev, bool requires_grad) {
    auto node = make_node(std::move(shape));
    for (auto& v : node->data) v = static_cast<real_t>(rng.normal(0.0, stddev));
    node->requires_grad = requires_grad;
    return Tensor(node);
}

real_t Tensor::item() const {
    kd_check(node_ && node_->data.size() == 1, "Tensor::item: not a scalar");
    return node_->data[0];
}

// ---- grad mode ----

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise ----

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
    auto out = make_node(a.shape());
    const auto& ad = a.data();
    for (size_t i = 0; i < ad.size(); ++i) out->data[i] = fwd(ad[i]);
    check_finite(*out, name);
    TensorNode* ap = a.node();
    attach(out, {a.node_ptr()}, [ap, bwd](TensorNode& self) {
        if (!ap->requires_grad) return;
        ap->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i)
            ap->grad[i] += self.grad[i] * bwd(ap->data[i], self.data[i]);
    });
    return Tensor(out);
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    kd_arg_check(a.shape() == b.shape(), "add: shape mismatch");
    auto out = make_node(a.shape());
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] + b.data()[i];
    check_finite(*out, "add");
    TensorNode* ap = a.node();
    TensorNode* bp = b.node();
    attach(out, {a.node_ptr(), b.node_ptr()}, [ap, bp](TensorNode& self) {
        for (TensorNode* p : {ap, bp}) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
    return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    kd_arg_check(a.shape() == b.shape(), "sub: shape mismatch");
    auto out = make_node(a.shape());
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] - b.data()[i];
    check_finite(*out, "sub");
    TensorNode* ap = a.node();
    TensorNode* bp = b.node();
    attach(out, {a.node_ptr(), b.node_ptr()}, [ap, bp](TensorNode& self) {
        if (ap->requires_grad) {
            ap->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i];
        }
        if (bp->requires_grad) {
            bp->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bp->grad[i] -= self.grad[i];
        }
    });
    return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    kd_arg_check(a.shape() == b.shape(), "mul: shape mismatch");
    auto out = make_node(a.shape());
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] * b.data()[i];
    check_finite(*out, "mul");
    TensorNode* ap = a.node();
    TensorNode* bp = b.node();
    attach(out, {a.node_ptr(), b.node_ptr()}, [ap, bp](TensorNode& self) {
        if (ap->requires_grad) {
            ap->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                ap->grad[i] += self.grad[i] * bp->data[i];
        }
        if (bp->requires_grad) {
            bp->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                bp->grad[i] += self.grad[i] * ap->data[i];
        }
    });
    return Tensor(out);
}

Tensor scale(const Tensor& a, real_t c) {
    return unary_op(
        a, "scale", [c](real_t x) { return x * c; },
        [c](real_t, real_t) { return c; });
}

Tensor add_row_broadcast(const Tensor& a, const Tensor& bias) {
    kd_arg_check(a.shape().size() == 2 && bias.size() == a.cols(),
                 "add_row_broadcast: bias must match last dim");
    auto out = make_node(a.shape());
    const size_t n = a.rows(), d = a.cols();
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) out->data[i * d + j] = a.data()[i * d + j] + bias.data()[j];
    check_finite(*out, "add_row_broadcast");
    TensorNode* ap = a.node();
    TensorNode* bp = bias.node();
    attach(out, {a.node_ptr(), bias.node_ptr()}, [ap, bp, n, d](TensorNode& self) {
        if (ap->requires_grad) {
            ap->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i];
        }
        if (bp->requires_grad) {
            bp->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < d; ++j) bp->grad[j] += self.grad[i * d + j];
        }
    });
    return Tensor(out);
}

Tensor gelu(const Tensor& a) {
    constexpr real_t inv_sqrt2 = real_t(0.7071067811865475);
    constexpr real_t inv_sqrt2pi = real_t(0.3989422804014327);
    return unary_op(
        a, "gelu",
        [=](real_t x) { return real_t(0.5) * x * (1 + std::erf(x * inv_sqrt2)); },
        [=](real_t x, real_t) {
            return real_t(0.5) * (1 + std::erf(x * inv_sqrt2)) +
                   x * inv_sqrt2pi * std::exp(real_t(-0.5) * x * x);
        });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, "relu", [](real_t x) { return x > 0 ? x : real_t(0); },
        [](real_t x, real_t) { return x > 0 ? real_t(1) : real_t(0); });
}

Tensor exp_op(const Tensor& a) {
    return unary_op(
        a, "exp", [](real_t x) { return std::exp(x); },
        [](real_t, real_t y) { return y; });
}

Tensor log_op(const Tensor& a) {
    return unary_op(
        a, "log", [](real_t x) { return std::log(x); },
        [](real_t x, real_t) { return 1 / x; });
}

Tensor sum_all(const Tensor& a) {
    real_t s = std::accumulate(a.data().begin(), a.data().end(), real_t(0));
    auto out = make_node({1});
    out->data[0] = s;
    check_finite(*out, "sum_all");
    TensorNode* ap = a.node();
    attach(out, {a.node_ptr()}, [ap](TensorNode& self) {
        ap->ensure_grad();
        for (auto& g : ap->grad) g += self.grad[0];
    });
    return Tensor(out);
}

Tensor mean_all(const Tensor& a) {
    const real_t inv = real_t(1) / static_cast<real_t>(a.size());
    return scale(sum_all(a), inv);
}

Tensor slice_rows(const Tensor& a, size_t row0, size_t nrows) {
    kd_arg_check(a.shape().size() == 2 && row0 + nrows <= a.rows(), "slice_rows: out of range");
    const size_t d = a.cols();
    auto out = make_node({nrows, d});
    std::copy_n(a.data().begin() + row0 * d, nrows * d, out->data.begin());
    TensorNode* ap = a.node();
    attach(out, {a.node_ptr()}, [ap, row0, d](TensorNode& self) {
        ap->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[row0 * d + i] += self.grad[i];
    });
    return Tensor(out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    kd_arg_check(!parts.empty(), "concat_rows: empty input");
    const size_t d = parts[0].cols();
    size_t total = 0;
    for (const auto& p : parts) {
        kd_arg_check(p.cols() == d, "concat_rows: column mismatch");
        total += p.rows();
    }
    auto out = make_node({total, d});
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out->data.begin() + off);
        off += p.size();
    }
    std::vector<NodePtr> parents;
    for (const auto& p : parts) parents.push_back(p.node_ptr());
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    if (g_grad_enabled && needs) {
        out->requires_grad = true;
        out->parents = parents;
        out->backward_fn = [parents](TensorNode& self) {
            size_t off2 = 0;
            for (const auto& p : parents) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off2 + i];
                }
                off2 += p->data.size();
            }
        };
    }
    return Tensor(out);
}

Tensor dot_rows(const Tensor& a, const Tensor& b) {
    kd_arg_check(a.shape() == b.shape(), "dot_rows: shape mismatch");
    return sum_all(mul(a, b));
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    kd_arg_check(a.shape().size() == 2 && b.shape().size() == 2, "matmul: expects 2-D tensors");
    const size_t m = trans_a ? a.cols() : a.rows();
    const size_t ka = trans_a ? a.rows() : a.cols();
    const size_t kb = trans_b ? b.cols() : b.rows();
    const size_t n = trans_b ? b.rows() : b.cols();
    kd_arg_check(ka == kb, "matmul: inner dimension mismatch");
    auto out = make_node({m, n});
    gemm(a.data().data(), b.data().data(), out->data.data(), m, n, ka, trans_a, trans_b, false);
    check_finite(*out, "matmul");
    TensorNode* ap = a.node();
    TensorNode* bp = b.node();
    attach(out, {a.node_ptr(), b.node_ptr()},
           [ap, bp, m, n, ka, trans_a, trans_b](TensorNode& self) {
               const real_t* dc = self.grad.data();
               if (ap->requires_grad) {
                   ap->ensure_grad();
                   if (!trans_a && !trans_b)
                       gemm(dc, bp->data.data(), ap->grad.data(), m, ka, n, false, true, true);
                   else if (trans_a && !trans_b)
                       gemm(bp->data.data(), dc, ap->grad.data(), ka, m, n, false, true, true);
                   else if (!trans_a && trans_b)
                       gemm(dc, bp->data.data(), ap->grad.data(), m, ka, n, false, false, true);
                   else
                       gemm(bp->data.data(), dc, ap->grad.data(), ka, m, n, true, true, true);
               }
               if (bp->requires_grad) {
                   bp->ensure_grad();
                   if (!trans_a && !trans_b)
                       gemm(ap->data.data(), dc, bp->grad.data(), ka, n, m, true, false, true);
                   else if (trans_a && !trans_b)
                       gemm(ap->data.data(), dc, bp->grad.data(), ka, n, m, false, false, true);
                   else if (!trans_a && trans_b)
                       gemm(dc, ap->data.data(), bp->grad.data(), n, ka, m, true, false, true);
                   else
                       gemm(dc, ap->data.data(), bp->grad.data(), n, ka, m, true, true, true);
               }
           });
    return Tensor(out);
}

// ---- nn ops ----

Tensor softmax_rows(const Tensor& a) {
    kd_arg_check(a.shape().size() == 2, "softmax_rows: expects 2-D");
    auto out = make_node(a.shape());
    const size_t n = a.rows(), d = a.cols();
    out->data = a.data();
    for (size_t i = 0; i < n; ++i) softmax_inplace(out->data.data() + i * d, d);
    check_finite(*out, "softmax_rows");
    TensorNode* ap = a.node();
    attach(out, {a.node_ptr()}, [ap, n, d](TensorNode& self) {
        ap->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
            const real_t* y = self.data.data() + i * d;
            const real_t* dy = self.grad.data() + i * d;
            real_t dot = 0;
            for (size_t j = 0; j < d; ++j) dot += y[j] * dy[j];
            real_t* dx = ap->grad.data() + i * d;
            for (size_t j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
    return Tensor(out);
}

Tensor log_softmax_rows(const Tensor& a) {
    kd_arg_check(a.shape().size() == 2, "log_softmax_rows: expects 2-D");
    auto out = make_node(a.shape());
    const size_t n = a.rows(), d = a.cols();
    for (size_t i = 0; i < n; ++i) {
        const real_t* x = a.data().data() + i * d;
        const real_t lse = logsumexp(x, d);
        for (size_t j = 0; j < d; ++j) out->data[i * d + j] = x[j] - lse;
    }
    check_finite(*out, "log_softmax_rows");
    TensorNode* ap = a.node();
    attach(out, {a.node_ptr()}, [ap, n, d](TensorNode& self) {
        ap->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
            const real_t* y = self.data.data() + i * d;
            const real_t* dy = self.grad.data() + i * d;
            real_t sum_dy = 0;
            for (size_t j = 0; j < d; ++j) sum_dy += dy[j];
            real_t* dx = ap->grad.data() + i * d;
            for (size_t j = 0; j < d; ++j) dx[j] += dy[j] - std::exp(y[j]) * sum_dy;
        }
    });
    return Tensor(out);
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, real_t eps) {
    kd_arg_check(x.shape().size() == 2 && gain.size() == x.cols() && bias.size() == x.cols(),
                 "layer_norm_rows: gain/bias must match last dim");
    const size_t n = x.rows(), d = x.cols();
    auto out = make_node(x.shape());
    // save normalized activations and 1/sigma for backward
    auto xhat = std::make_shared<std::vector<real_t>>(n * d);
    auto inv_sigma = std::make_shared<std::vector<real_t>>(n);
    for (size_t i = 0; i < n; ++i) {
        const real_t* xi = x.data().data() + i * d;
        real_t mean = 0;
        for (size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<real_t>(d);
        real_t var = 0;
        for (size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= static_cast<real_t>(d);
        const real_t is = 1 / std::sqrt(var + eps);
        (*inv_sigma)[i] = is;
        for (size_t j = 0; j < d; ++j) {
            const real_t xh = (xi[j] - mean) * is;
            (*xhat)[i * d + j] = xh;
            out->data[i * d + j] = xh * gain.data()[j] + bias.data()[j];
        }
    }
    check_finite(*out, "layer_norm_rows");
    TensorNode* xp = x.node();
    TensorNode* gp = gain.node();
    TensorNode* bp = bias.node();
    attach(out, {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
           [xp, gp, bp, xhat, inv_sigma, n, d](TensorNode& self) {
               for (size_t i = 0; i < n; ++i) {
                   const real_t* dy = self.grad.data() + i * d;
                   const real_t* xh = xhat->data() + i * d;
                   if (gp->requires_grad) {
                       gp->ensure_grad();
                       for (size_t j = 0; j < d; ++j) gp->grad[j] += dy[j] * xh[j];
                   }
                   if (bp->requires_grad) {
                       bp->ensure_grad();
                       for (size_t j = 0; j < d; ++j) bp->grad[j] += dy[j];
                   }
                   if (xp->requires_grad) {
                       xp->ensure_grad();
                       real_t mean_dxh = 0, mean_dxh_xh = 0;
                       // d/dxhat = dy * gain
                       for (size_t j = 0; j < d; ++j) {
                           const real_t dxh = dy[j] * gp->data[j];
                           mean_dxh += dxh;
                           mean_dxh_xh += dxh * xh[j];
                       }
                       mean_dxh /= static_cast<real_t>(d);
                       mean_dxh_xh /= static_cast<real_t>(d);
                       real_t* dx = xp->grad.data() + i * d;
                       const real_t is = (*inv_sigma)[i];
                       for (size_t j = 0; j < d; ++j) {
                           const real_t dxh = dy[j] * gp->data[j];
                           dx[j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                       }
                   }
               }
           });
    return Tensor(out);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<TokenId>& ids) {
    kd_arg_check(table.shape().size() == 2, "embedding_lookup: table must be 2-D");
    const size_t vocab = table.rows(), d = table.cols();
    for (TokenId id : ids)
        kd_check(id >= 0 && static_cast<size_t>(id) < vocab, "embedding_lookup: token id out of range");
    auto out = make_node({ids.size(), d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data().begin() + static_cast<size_t>(ids[i]) * d, d,
                    out->data.begin() + i * d);
    TensorNode* tp = table.node();
    auto ids_copy = std::make_shared<std::vector<TokenId>>(ids);
    attach(out, {table.node_ptr()}, [tp, ids_copy, d](TensorNode& self) {
        tp->ensure_grad();
        for (size_t i = 0; i < ids_copy->size(); ++i) {
            real_t* dst = tp->grad.data() + static_cast<size_t>((*ids_copy)[i]) * d;
            const real_t* src = self.grad.data() + i * d;
            for (size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return Tensor(out);
}

Tensor dropout(const Tensor& x, real_t drop_p, Rng& rng) {
    kd_arg_check(drop_p >= 0 && drop_p < 1, "dropout: p must be in [0,1)");
    if (drop_p == 0) return x;
    const real_t keep = 1 - drop_p;
    auto mask = std::make_shared<std::vector<real_t>>(x.size());
    for (auto& m : *mask) m = rng.uniform() < drop_p ? real_t(0) : 1 / keep;
    auto out = make_node(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out->data[i] = x.data()[i] * (*mask)[i];
    TensorNode* xp = x.node();
    attach(out, {x.node_ptr()}, [xp, mask](TensorNode& self) {
        xp->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xp->grad[i] += self.grad[i] * (*mask)[i];
    });
    return Tensor(out);
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           const std::vector<AttentionSpan>& spans, size_t heads, bool causal) {
    kd_arg_check(q.shape().size() == 2 && k.shape().size() == 2 && v.shape().size() == 2,
                 "attention: expects 2-D tensors");
    const size_t d = q.cols();
    kd_arg_check(k.cols() == d && v.cols() == d, "attention: dim mismatch");
    kd_arg_check(d % heads == 0, "attention: dim not divisible by heads");
    const size_t dh = d / heads;
    const real_t scale_f = 1 / std::sqrt(static_cast<real_t>(dh));

    auto out = make_node(q.shape());
    // saved softmax matrices, one per (span, head), each q_len*k_len
    auto probs = std::make_shared<std::vector<std::vector<real_t>>>();
    probs->reserve(spans.size() * heads);

    for (const auto& s : spans) {
        kd_arg_check(s.q_offset + s.q_len <= q.rows() && s.k_offset + s.k_len <= k.rows(),
                     "attention: span out of range");
        for (size_t h = 0; h < heads; ++h) {
            const real_t* qb = q.data().data() + s.q_offset * d + h * dh;
            const real_t* kb = k.data().data() + s.k_offset * d + h * dh;
            const real_t* vb = v.data().data() + s.k_offset * d + h * dh;
            std::vector<real_t> scores(s.q_len * s.k_len);
            gemm(qb, kb, scores.data(), s.q_len, s.k_len, dh, false, true, false, d, d, s.k_len);
            for (auto& x : scores) x *= scale_f;
            if (causal) {
                for (size_t i = 0; i < s.q_len; ++i)
                    for (size_t j = i + 1; j < s.k_len; ++j) scores[i * s.k_len + j] = real_t(-1e30);
            }
            for (size_t i = 0; i < s.q_len; ++i) softmax_inplace(scores.data() + i * s.k_len, s.k_len);
            // out block += P V
            real_t* ob = out->data.data() + s.q_offset * d + h * dh;
            gemm(scores.data(), vb, ob, s.q_len, dh, s.k_len, false, false, false, s.k_len, d, d);
            probs->push_back(std::move(scores));
        }
    }
    check_finite(*out, "multihead_attention");

    TensorNode* qp = q.node();
    TensorNode* kp = k.node();
    TensorNode* vp = v.node();
    auto spans_copy = std::make_shared<std::vector<AttentionSpan>>(spans);
    attach(out, {q.node_ptr(), k.node_ptr(), v.node_ptr()},
           [qp, kp, vp, spans_copy, probs, heads, dh, d, scale_f](TensorNode& self) {
               if (qp->requires_grad) qp->ensure_grad();
               if (kp->requires_grad) kp->ensure_grad();
               if (vp->requires_grad) vp->ensure_grad();
               size_t idx = 0;
               for (const auto& s : *spans_copy) {
                   for (size_t h = 0; h < heads; ++h, ++idx) {
                       const std::vector<real_t>& P = (*probs)[idx];
                       const real_t* dout = self.grad.data() + s.q_offset * d + h * dh;
                       const real_t* qb = qp->data.data() + s.q_offset * d + h * dh;
                       const real_t* kb = kp->data.data() + s.k_offset * d + h * dh;
                       const real_t* vb = vp->data.data() + s.k_offset * d + h * dh;
                       if (vp->requires_grad) {
                           real_t* dv = vp->grad.data() + s.k_offset * d + h * dh;
                           gemm(P.data(), dout, dv, s.k_len, dh, s.q_len, true, false, true,
                                s.k_len, d, d);
                       }
                       if (!qp->requires_grad && !kp->requires_grad) continue;
                       // dP = dout V^T ; dS = P*(dP - rowsum(dP*P)) * scale
                       std::vector<real_t> dS(s.q_len * s.k_len);
                       gemm(dout, vb, dS.data(), s.q_len, s.k_len, dh, false, true, false, d, d,
                            s.k_len);
                       for (size_t i = 0; i < s.q_len; ++i) {
                           real_t dot = 0;
                           for (size_t j = 0; j < s.k_len; ++j)
                               dot += dS[i * s.k_len + j] * P[i * s.k_len + j];
                           for (size_t j = 0; j < s.k_len; ++j) {
                               dS[i * s.k_len + j] =
                                   P[i * s.k_len + j] * (dS[i * s.k_len + j] - dot) * scale_f;
                           }
                       }
                       if (qp->requires_grad) {
                           real_t* dq = qp->grad.data() + s.q_offset * d + h * dh;
                           gemm(dS.data(), kb, dq, s.q_len, dh, s.k_len, false, false, true,
                                s.k_len, d, d);
                       }
                       if (kp->requires_grad) {
                           real_t* dk = kp->grad.data() + s.k_offset * d + h * dh;
                           gemm(dS.data(), qb, dk, s.k_len, dh, s.q_len, true, false, true,
                                s.k_len, d, d);
                       }
                   }
               }
           });
    return Tensor(out);
}

// ---- losses ----

Tensor nll_rows(const Tensor& logits, const std::vector<TokenId>& targets,
                const std::vector<uint8_t>& mask) {
    kd_arg_check(logits.shape().size() == 2, "nll_rows: logits must be 2-D");
    kd_arg_check(targets.size() <= logits.rows() && mask.size() == targets.size(),
                 "nll_rows: target/mask length mismatch");
    const size_t d = logits.cols();
    real_t loss = 0;
    for (size_t i = 0; i < targets.size(); ++i) {
        if (!mask[i]) continue;
        kd_check(targets[i] >= 0 && static_cast<size_t>(targets[i]) < d,
                 "nll_rows: token id out of vocabulary");
        const real_t* row = logits.data().data() + i * d;
        loss += logsumexp(row, d) - row[targets[i]];
    }
    auto out = make_node({1});
    out->data[0] = loss;
    check_finite(*out, "nll_rows");
    TensorNode* lp = logits.node();
    auto t = std::make_shared<std::vector<TokenId>>(targets);
    auto m = std::make_shared<std::vector<uint8_t>>(mask);
    attach(out, {logits.node_ptr()}, [lp, t, m, d](TensorNode& self) {
        lp->ensure_grad();
        const real_t g = self.grad[0];
        std::vector<real_t> sm(d);
        for (size_t i = 0; i < t->size(); ++i) {
            if (!(*m)[i]) continue;
            std::copy_n(lp->data.begin() + i * d, d, sm.begin());
            softmax_inplace(sm.data(), d);
            real_t* dst = lp->grad.data() + i * d;
            for (size_t j = 0; j < d; ++j) dst[j] += g * sm[j];
            dst[(*t)[i]] -= g;
        }
    });
    return Tensor(out);
}

Tensor kl_vs_reference_rows(const std::vector<std::vector<real_t>>& ref_logprobs,
                            const Tensor& logits, const std::vector<uint8_t>& mask) {
    kd_arg_check(logits.shape().size() == 2, "kl_vs_reference_rows: logits must be 2-D");
    kd_arg_check(ref_logprobs.size() <= logits.rows() && mask.size() == ref_logprobs.size(),
                 "kl_vs_reference_rows: row count mismatch");
    const size_t d = logits.cols();
    real_t loss = 0;
    for (size_t i = 0; i < ref_logprobs.size(); ++i) {
        if (!mask[i]) continue;
        kd_arg_check(ref_logprobs[i].size() == d, "kl_vs_reference_rows: vocabulary size mismatch");
        const real_t* row = logits.data().data() + i * d;
        const real_t lse = logsumexp(row, d);
        for (size_t j = 0; j < d; ++j) {
            const real_t lp = ref_logprobs[i][j];
            if (!(lp > kNegInf)) continue; // p == 0 contributes nothing
            loss += std::exp(lp) * (lp - (row[j] - lse));
        }
    }
    auto out = make_node({1});
    out->data[0] = loss;
    check_finite(*out, "kl_vs_reference_rows");
    TensorNode* lp_node = logits.node();
    auto refs = std::make_shared<std::vector<std::vector<real_t>>>(ref_logprobs);
    auto m = std::make_shared<std::vector<uint8_t>>(mask);
    attach(out, {logits.node_ptr()}, [lp_node, refs, m, d](TensorNode& self) {
        lp_node->ensure_grad();
        const real_t g = self.grad[0];
        std::vector<real_t> sm(d);
        for (size_t i = 0; i < refs->size(); ++i) {
            if (!(*m)[i]) continue;
            std::copy_n(lp_node->data.begin() + i * d, d, sm.begin());
            softmax_inplace(sm.data(), d);
            real_t* dst = lp_node->grad.data() + i * d;
            for (size_t j = 0; j < d; ++j) {
                const real_t ref_lp = (*refs)[i][j];
                const real_t p = ref_lp > kNegInf ? std::exp(ref_lp) : real_t(0);
                dst[j] += g * (sm[j] - p);
            }
        }
    });
    return Tensor(out);
}

Tensor relation_kl_rows(const std::vector<std::vector<real_t>>& ref_relations,
                        const Tensor& states, const std::vector<AttentionSpan>& spans,
                        size_t rel_heads) {
    kd_arg_check(states.shape().size() == 2, "relation_kl_rows: states must be 2-D");
    const size_t d = states.cols();
    kd_arg_check(d % rel_heads == 0, "relation_kl_rows: dim not divisible by relation heads");
    kd_arg_check(ref_relations.size() == spans.size() * rel_heads,
                 "relation_kl_rows: reference count mismatch");
    const size_t dr = d / rel_heads;
    const real_t scale_f = 1 / std::sqrt(static_cast<real_t>(dr));

    auto probs = std::make_shared<std::vector<std::vector<real_t>>>();
    probs->reserve(ref_relations.size());
    real_t loss = 0;
    size_t idx = 0;
    for (const auto& s : spans) {
        kd_arg_check(s.q_offset + s.q_len <= states.rows(), "relation_kl_rows: span out of range");
        const size_t L = s.q_len;
        for (size_t h = 0; h < rel_heads; ++h, ++idx) {
            kd_arg_check(ref_relations[idx].size() == L * L,
                         "relation_kl_rows: relation shape mismatch");
            const real_t* xb = states.data().data() + s.q_offset * d + h * dr;
            std::vector<real_t> P(L * L);
            gemm(xb, xb, P.data(), L, L, dr, false, true, false, d, d, L);
            for (auto& x : P) x *= scale_f;
            for (size_t i = 0; i < L; ++i) softmax_inplace(P.data() + i * L, L);
            const auto& T = ref_relations[idx];
            for (size_t i = 0; i < L * L; ++i) {
                if (T[i] <= 0) continue;
                loss += T[i] * (std::log(T[i]) - std::log(P[i]));
            }
            probs->push_back(std::move(P));
        }
    }
    auto out = make_node({1});
    out->data[0] = loss;
    check_finite(*out, "relation_kl_rows");
    TensorNode* xp = states.node();
    auto spans_copy = std::make_shared<std::vector<AttentionSpan>>(spans);
    auto refs = std::make_shared<std::vector<std::vector<real_t>>>(ref_relations);
    attach(out, {states.node_ptr()}, [xp, spans_copy, refs, probs, rel_heads, dr, d,
                                      scale_f](TensorNode& self) {
        xp->ensure_grad();
        const real_t g = self.grad[0];
        size_t idx2 = 0;
        for (const auto& s : *spans_copy) {
            const size_t L = s.q_len;
            for (size_t h = 0; h < rel_heads; ++h, ++idx2) {
                const auto& P = (*probs)[idx2];
                const auto& T = (*refs)[idx2];
                // dL/dS = P - T (per row of KL(T||P)); dX = (G + G^T) X * scale
                std::vector<real_t> G(L * L);
                for (size_t i = 0; i < L * L; ++i) G[i] = g * (P[i] - T[i]) * scale_f;
                std::vector<real_t> Gsym(L * L);
                for (size_t i = 0; i < L; ++i)
                    for (size_t j = 0; j < L; ++j) Gsym[i * L + j] = G[i * L + j] + G[j * L + i];
                const real_t* xb = xp->data.data() + s.q_offset * d + h * dr;
                real_t* dx = xp->grad.data() + s.q_offset * d + h * dr;
                gemm(Gsym.data(), xb, dx, L, dr, L, false, false, true, L, d, d);
            }
        }
    });
    return Tensor(out);
}

Tensor restricted_kl_rows(const std::vector<RestrictedTarget>& targets, const Tensor& logits,
                          const std::vector<uint8_t>& mask) {
    kd_arg_check(logits.shape().size() == 2, "restricted_kl_rows: logits must be 2-D");
    kd_arg_check(targets.size() <= logits.rows() && mask.size() == targets.size(),
                 "restricted_kl_rows: row count mismatch");
    const size_t d = logits.cols();
    real_t loss = 0;
    for (size_t i = 0; i < targets.size(); ++i) {
        if (!mask[i]) continue;
        const auto& t = targets[i];
        kd_check(!t.support.empty(), "restricted_kl_rows: empty support");
        kd_arg_check(t.support.size() == t.probs.size(), "restricted_kl_rows: support/probs mismatch");
        const real_t* row = logits.data().data() + i * d;
        real_t mx = kNegInf;
        for (TokenId a : t.support) {
            kd_check(a >= 0 && static_cast<size_t>(a) < d, "restricted_kl_rows: token out of range");
            mx = std::max(mx, row[a]);
        }
        real_t z = 0;
        for (TokenId a : t.support) z += std::exp(row[a] - mx);
        const real_t lse = mx + std::log(z);
        for (size_t j = 0; j < t.support.size(); ++j) {
            const real_t p = t.probs[j];
            if (p <= 0) continue;
            loss += p * (std::log(p) - (row[t.support[j]] - lse));
        }
    }
    auto out = make_node({1});
    out->data[0] = loss;
    check_finite(*out, "restricted_kl_rows");
    TensorNode* lp = logits.node();
    auto tcopy = std::make_shared<std::vector<RestrictedTarget>>(targets);
    auto m = std::make_shared<std::vector<uint8_t>>(mask);
    attach(out, {logits.node_ptr()}, [lp, tcopy, m, d](TensorNode& self) {
        lp->ensure_grad();
        const real_t g = self.grad[0];
        for (size_t i = 0; i < tcopy->size(); ++i) {
            if (!(*m)[i]) continue;
            const auto& t = (*tcopy)[i];
            const real_t* row = lp->data.data() + i * d;
            real_t mx = kNegInf;
            for (TokenId a : t.support) mx = std::max(mx, row[a]);
            real_t z = 0;
            for (TokenId a : t.support) z += std::exp(row[a] - mx);
            real_t* dst = lp->grad.data() + i * d;
            for (size_t j = 0; j < t.support.size(); ++j) {
                const real_t q = std::exp(row[t.support[j]] - mx) / z;
                dst[t.support[j]] += g * (q - t.probs[j]);
            }
        }
    });
    return Tensor(out);
}

// ---- backward ----

void backward(const Tensor& root) {
    kd_check(root.defined() && root.size() == 1, "backward: root must be a scalar");
    TensorNode* root_node = root.node();
    kd_check(!root_node->backward_done && !root_node->spent,
             "backward: graph already consumed");
    // constant graph: nothing requires grad, nothing to do
    if (!root_node->requires_grad) return;

    // iterative post-order DFS over requires_grad ancestors; strong refs keep the
    // graph alive while it is being dismantled below
    std::vector<TensorNode*> topo;
    std::vector<NodePtr> strong{root.node_ptr()};
    std::vector<std::pair<TensorNode*, size_t>> stack;
    std::unordered_set<TensorNode*> visited;
    stack.push_back({root_node, 0});
    visited.insert(root_node);
    while (!stack.empty()) {
        auto [node, child_idx] = stack.back();
        if (child_idx < node->parents.size()) {
            ++stack.back().second;
            const NodePtr& next = node->parents[child_idx];
            if (!next || !next->requires_grad || visited.count(next.get())) continue;
            kd_check(!next->spent, "backward: graph already consumed");
            visited.insert(next.get());
            strong.push_back(next);
            stack.push_back({next.get(), 0});
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root_node->ensure_grad();
    root_node->grad[0] = 1;
    // topo is post-order: parents before children; walk in reverse so every node
    // receives grads from all consumers before propagating
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
    // release the graph; leaves keep their grads, interior nodes are spent
    for (const NodePtr& node : strong) {
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->parents.clear();
            node->grad.clear();
            node->spent = true;
        }
    }
    root_node->backward_done = true;
}

// ---- plain helpers ----

std::vector<real_t> softmax_vec(const std::vector<real_t>& logits) {
    std::vector<real_t> out = logits;
    softmax_inplace(out.data(), out.size());
    return out;
}

std::vector<real_t> log_softmax_vec(const std::vector<real_t>& logits) {
    std::vector<real_t> out(logits.size());
    const real_t lse = logsumexp(logits.data(), logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

real_t kl_divergence(const TokenDistribution& p, const TokenDistribution& q) {
    kd_arg_check(p.vocab() == q.vocab(), "kl_divergence: vocabulary size mismatch");
    real_t sum = 0;
    for (size_t i = 0; i < p.vocab(); ++i) {
        const real_t lp = p.logprobs[i];
        if (!(lp > kNegInf)) continue; // 0 * ln 0 := 0
        sum += std::exp(lp) * (lp - q.logprobs[i]);
    }
    return sum;
}

void reset_mac_counter() { g_mac_count = 0; }
uint64_t mac_counter() { return g_mac_count; }

} // namespace kdlab
