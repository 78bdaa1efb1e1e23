#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "softforge/config.hpp"
#include "softforge/errors.hpp"
#include "softforge/rng.hpp"

namespace softforge {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct BlockWeights {
    Mat<T> wq, wk, wv, wo;    // [d x d]
    Mat<T> w_gate, w_up;      // [d x ffn]
    Mat<T> w_down;            // [ffn x d]
    Vec<T> attn_norm_gain;    // [d]
    Vec<T> ffn_norm_gain;     // [d]
};

// Full learnable state. The exit heads are not per-exit copies: one
// final_norm_gain and one head serve every exit, and the depth-n sub-model
// is simply the prefix blocks 1..n plus those shared tensors.
template <typename T>
struct Parameters {
    Mat<T> token_embedding;   // [vocab x d]
    std::vector<BlockWeights<T>> blocks;
    Vec<T> final_norm_gain;   // [d]
    Mat<T> head;              // [d x vocab]

    static Parameters zeros(const ModelConfig& cfg);
    void set_zero();
    long count() const;

    template <typename U>
    Parameters<U> cast() const;
};

// Named view of one tensor, used by the checkpoint writer, the optimizer,
// and the gradient checker. Data is contiguous row-major.
template <typename T>
struct TensorRef {
    std::string name;
    T* data;
    std::vector<int> dims;
    long numel() const {
        long n = 1;
        for (int d : dims) n *= d;
        return n;
    }
};

template <typename T>
std::vector<TensorRef<T>> tensor_table(Parameters<T>& p);

// Gaussian init (std 0.02) for all projection matrices and the embedding;
// norm gains start at 1.
template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg, uint64_t seed, double init_std = 0.02);

// Precomputed rotary tables: cos/sin of p * base^(-2j/head_dim) for every
// position p and rotation pair j.
template <typename T>
struct RopeCache {
    Mat<T> cos_t, sin_t;  // [max_seq_len x head_dim/2]
    static RopeCache build(const ModelConfig& cfg);
};

// out_i = gain_i * x_i / sqrt(mean(x^2) + eps)
template <typename T>
Vec<T> rms_norm(const Vec<T>& x, const Vec<T>& gain, T eps);

// Row-wise variant over [S x d].
template <typename T>
void rms_norm_rows(const Mat<T>& x, const Vec<T>& gain, T eps, Mat<T>& out);

// Per-block activations retained for the backward pass.
template <typename T>
struct BlockCache {
    Mat<T> h_in;                  // residual stream entering the block
    Mat<T> attn_norm_out;
    Mat<T> q, k, v;               // q,k post-rotary, concatenated heads [S x d]
    std::vector<Mat<T>> probs;    // per head [S x S], causal rows
    Mat<T> ctx;                   // attention output before the o-projection
    Mat<T> h_mid;                 // after attention residual
    Mat<T> ffn_norm_out;
    Mat<T> gate_pre, up, act;     // [S x ffn]
};

template <typename T>
struct ForwardCache {
    std::vector<BlockCache<T>> blocks;
    Mat<T> h_out;  // stream leaving the deepest computed block
};

// One exit's view of a forward pass.
template <typename T>
struct ExitTensors {
    Mat<T> logits;            // [S x vocab]
    Mat<T> hidden_pre_norm;   // block output at this depth, before the final norm
    Mat<T> hidden_post_norm;  // after the shared final norm
};

template <typename T>
struct ExitOutputs {
    std::vector<int> exits;
    std::vector<ExitTensors<T>> tensors;  // aligned with exits

    const ExitTensors<T>& at_depth(int n) const {
        for (size_t i = 0; i < exits.size(); ++i)
            if (exits[i] == n) return tensors[i];
        throw InvalidDepthError("no exit at depth " + std::to_string(n));
    }
};

// Pre-norm causal block: RMSNorm -> rotary multi-head attention -> residual;
// RMSNorm -> SwiGLU -> residual. Mutates h in place. Output rows depend only
// on input rows at the same or earlier positions.
template <typename T>
void block_forward(const BlockWeights<T>& w, const ModelConfig& cfg,
                   const RopeCache<T>& rope, Mat<T>& h, BlockCache<T>* cache = nullptr);

// Single pass over blocks 1..max(depths); at each listed depth the hidden
// state is snapshotted and run through the shared final norm + head on a
// branch. Deeper blocks continue from the un-normalized stream. `depths`
// must be strictly ascending and within [1, n_blocks].
template <typename T>
ExitOutputs<T> forward_depths(const Parameters<T>& params, const ModelConfig& cfg,
                              const RopeCache<T>& rope, std::span<const int> depths,
                              std::span<const int> tokens, ForwardCache<T>* cache = nullptr);

template <typename T>
ExitOutputs<T> forward_exits(const Parameters<T>& params, const ModelConfig& cfg,
                             const ExitSet& exits, std::span<const int> tokens);

// (logits, hidden_post_norm) of the depth-n sub-model. Touches only the
// first n blocks.
template <typename T>
std::pair<Mat<T>, Mat<T>> forward_single(const Parameters<T>& params, const ModelConfig& cfg,
                                         int n, std::span<const int> tokens);

// ---------------------------------------------------------------------------
// implementation

template <typename T>
Parameters<T> Parameters<T>::zeros(const ModelConfig& cfg) {
    Parameters<T> p;
    p.token_embedding = Mat<T>::Zero(cfg.vocab_size, cfg.d_model);
    p.blocks.resize(static_cast<size_t>(cfg.n_blocks));
    for (auto& b : p.blocks) {
        b.wq = Mat<T>::Zero(cfg.d_model, cfg.d_model);
        b.wk = Mat<T>::Zero(cfg.d_model, cfg.d_model);
        b.wv = Mat<T>::Zero(cfg.d_model, cfg.d_model);
        b.wo = Mat<T>::Zero(cfg.d_model, cfg.d_model);
        b.w_gate = Mat<T>::Zero(cfg.d_model, cfg.ffn_hidden);
        b.w_up = Mat<T>::Zero(cfg.d_model, cfg.ffn_hidden);
        b.w_down = Mat<T>::Zero(cfg.ffn_hidden, cfg.d_model);
        b.attn_norm_gain = Vec<T>::Zero(cfg.d_model);
        b.ffn_norm_gain = Vec<T>::Zero(cfg.d_model);
    }
    p.final_norm_gain = Vec<T>::Zero(cfg.d_model);
    p.head = Mat<T>::Zero(cfg.d_model, cfg.vocab_size);
    return p;
}

template <typename T>
void Parameters<T>::set_zero() {
    token_embedding.setZero();
    for (auto& b : blocks) {
        b.wq.setZero(); b.wk.setZero(); b.wv.setZero(); b.wo.setZero();
        b.w_gate.setZero(); b.w_up.setZero(); b.w_down.setZero();
        b.attn_norm_gain.setZero(); b.ffn_norm_gain.setZero();
    }
    final_norm_gain.setZero();
    head.setZero();
}

template <typename T>
long Parameters<T>::count() const {
    long n = token_embedding.size() + final_norm_gain.size() + head.size();
    for (const auto& b : blocks)
        n += b.wq.size() + b.wk.size() + b.wv.size() + b.wo.size() +
             b.w_gate.size() + b.w_up.size() + b.w_down.size() +
             b.attn_norm_gain.size() + b.ffn_norm_gain.size();
    return n;
}

template <typename T>
template <typename U>
Parameters<U> Parameters<T>::cast() const {
    Parameters<U> out;
    out.token_embedding = token_embedding.template cast<U>();
    out.blocks.resize(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        auto& o = out.blocks[i];
        o.wq = b.wq.template cast<U>();
        o.wk = b.wk.template cast<U>();
        o.wv = b.wv.template cast<U>();
        o.wo = b.wo.template cast<U>();
        o.w_gate = b.w_gate.template cast<U>();
        o.w_up = b.w_up.template cast<U>();
        o.w_down = b.w_down.template cast<U>();
        o.attn_norm_gain = b.attn_norm_gain.template cast<U>();
        o.ffn_norm_gain = b.ffn_norm_gain.template cast<U>();
    }
    out.final_norm_gain = final_norm_gain.template cast<U>();
    out.head = head.template cast<U>();
    return out;
}

template <typename T>
std::vector<TensorRef<T>> tensor_table(Parameters<T>& p) {
    std::vector<TensorRef<T>> table;
    auto add_mat = [&](const std::string& name, Mat<T>& m) {
        table.push_back({name, m.data(), {static_cast<int>(m.rows()), static_cast<int>(m.cols())}});
    };
    auto add_vec = [&](const std::string& name, Vec<T>& v) {
        table.push_back({name, v.data(), {static_cast<int>(v.size())}});
    };
    add_mat("token_embedding", p.token_embedding);
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string prefix = "blocks." + std::to_string(i) + ".";
        auto& b = p.blocks[i];
        add_vec(prefix + "attn_norm", b.attn_norm_gain);
        add_mat(prefix + "wq", b.wq);
        add_mat(prefix + "wk", b.wk);
        add_mat(prefix + "wv", b.wv);
        add_mat(prefix + "wo", b.wo);
        add_vec(prefix + "ffn_norm", b.ffn_norm_gain);
        add_mat(prefix + "w_gate", b.w_gate);
        add_mat(prefix + "w_up", b.w_up);
        add_mat(prefix + "w_down", b.w_down);
    }
    add_vec("final_norm", p.final_norm_gain);
    add_mat("head", p.head);
    return table;
}

template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg, uint64_t seed, double init_std) {
    cfg.validate();
    Parameters<T> p = Parameters<T>::zeros(cfg);
    Rng rng(seed);
    auto fill = [&](Mat<T>& m) {
        T* d = m.data();
        for (long i = 0; i < m.size(); ++i) d[i] = static_cast<T>(rng.normal() * init_std);
    };
    fill(p.token_embedding);
    for (auto& b : p.blocks) {
        fill(b.wq); fill(b.wk); fill(b.wv); fill(b.wo);
        fill(b.w_gate); fill(b.w_up); fill(b.w_down);
        b.attn_norm_gain.setOnes();
        b.ffn_norm_gain.setOnes();
    }
    p.final_norm_gain.setOnes();
    fill(p.head);
    return p;
}

template <typename T>
RopeCache<T> RopeCache<T>::build(const ModelConfig& cfg) {
    const int half = cfg.head_dim() / 2;
    RopeCache<T> rc;
    rc.cos_t.resize(cfg.max_seq_len, half);
    rc.sin_t.resize(cfg.max_seq_len, half);
    for (int p = 0; p < cfg.max_seq_len; ++p) {
        for (int j = 0; j < half; ++j) {
            const double freq = std::pow(static_cast<double>(cfg.rope_base),
                                         -2.0 * j / cfg.head_dim());
            const double angle = p * freq;
            rc.cos_t(p, j) = static_cast<T>(std::cos(angle));
            rc.sin_t(p, j) = static_cast<T>(std::sin(angle));
        }
    }
    return rc;
}

template <typename T>
Vec<T> rms_norm(const Vec<T>& x, const Vec<T>& gain, T eps) {
    if (x.size() != gain.size())
        throw std::invalid_argument("rms_norm: size mismatch between input and gain");
    if (eps < T(0)) throw std::invalid_argument("rms_norm: eps must be >= 0");
    const T mean_sq = x.squaredNorm() / static_cast<T>(x.size());
    const T inv = T(1) / std::sqrt(mean_sq + eps);
    return gain.array() * x.array() * inv;
}

template <typename T>
void rms_norm_rows(const Mat<T>& x, const Vec<T>& gain, T eps, Mat<T>& out) {
    out.resize(x.rows(), x.cols());
    const T inv_d = T(1) / static_cast<T>(x.cols());
    for (long r = 0; r < x.rows(); ++r) {
        const T inv = T(1) / std::sqrt(x.row(r).squaredNorm() * inv_d + eps);
        out.row(r) = x.row(r).cwiseProduct(gain.transpose()) * inv;
    }
}

namespace detail {

// In-place rotary rotation of one [S x d] projection, heads side by side.
// sign=+1 applies the rotation, sign=-1 the inverse (used in backward).
template <typename T>
void apply_rope(Mat<T>& x, const RopeCache<T>& rope, int n_heads, int sign) {
    const int hd = static_cast<int>(x.cols()) / n_heads;
    const int half = hd / 2;
    for (long p = 0; p < x.rows(); ++p) {
        T* row = x.data() + p * x.cols();
        for (int h = 0; h < n_heads; ++h) {
            T* hp = row + h * hd;
            for (int j = 0; j < half; ++j) {
                const T c = rope.cos_t(p, j);
                const T s = rope.sin_t(p, j) * static_cast<T>(sign);
                const T a = hp[2 * j], b = hp[2 * j + 1];
                hp[2 * j] = a * c - b * s;
                hp[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

// Causal softmax over scores: row i is normalized over columns 0..i and
// exactly zero beyond.
template <typename T>
void causal_softmax_rows(Mat<T>& m) {
    const long s = m.rows();
    for (long i = 0; i < s; ++i) {
        auto row = m.row(i).head(i + 1);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
        if (i + 1 < m.cols()) m.row(i).tail(m.cols() - i - 1).setZero();
    }
}

}  // namespace detail

template <typename T>
void block_forward(const BlockWeights<T>& w, const ModelConfig& cfg,
                   const RopeCache<T>& rope, Mat<T>& h, BlockCache<T>* cache) {
    const long s = h.rows();
    if (s > cfg.max_seq_len)
        throw SequenceTooLongError("sequence length " + std::to_string(s) +
                                   " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    if (!h.allFinite())
        throw std::invalid_argument("block_forward: non-finite input");
    const int nh = cfg.n_heads;
    const int hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    Mat<T> x_norm;
    rms_norm_rows(h, w.attn_norm_gain, static_cast<T>(cfg.rms_eps), x_norm);
    Mat<T> q = x_norm * w.wq;
    Mat<T> k = x_norm * w.wk;
    Mat<T> v = x_norm * w.wv;
    detail::apply_rope(q, rope, nh, +1);
    detail::apply_rope(k, rope, nh, +1);

    Mat<T> ctx(s, cfg.d_model);
    std::vector<Mat<T>> probs;
    if (cache != nullptr) probs.resize(static_cast<size_t>(nh));
    for (int head = 0; head < nh; ++head) {
        auto qh = q.middleCols(head * hd, hd);
        auto kh = k.middleCols(head * hd, hd);
        auto vh = v.middleCols(head * hd, hd);
        Mat<T> scores = (qh * kh.transpose()) * scale;
        detail::causal_softmax_rows(scores);
        ctx.middleCols(head * hd, hd).noalias() = scores * vh;
        if (cache != nullptr) probs[static_cast<size_t>(head)] = std::move(scores);
    }

    if (cache != nullptr) {
        cache->h_in = h;
        cache->attn_norm_out = x_norm;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->ctx = ctx;
    }

    h.noalias() += ctx * w.wo;
    if (cache != nullptr) cache->h_mid = h;

    Mat<T> f_norm;
    rms_norm_rows(h, w.ffn_norm_gain, static_cast<T>(cfg.rms_eps), f_norm);
    Mat<T> gate_pre = f_norm * w.w_gate;
    Mat<T> up = f_norm * w.w_up;
    // SwiGLU: silu(gate) * up
    Mat<T> act = gate_pre.array() / (T(1) + (-gate_pre.array()).exp()) * up.array();
    h.noalias() += act * w.w_down;

    if (cache != nullptr) {
        cache->ffn_norm_out = std::move(f_norm);
        cache->gate_pre = std::move(gate_pre);
        cache->up = std::move(up);
        cache->act = std::move(act);
    }
}

namespace detail {

template <typename T>
void exit_branch(const Parameters<T>& params, const ModelConfig& cfg, const Mat<T>& h,
                 ExitTensors<T>& out) {
    out.hidden_pre_norm = h;
    rms_norm_rows(h, params.final_norm_gain, static_cast<T>(cfg.rms_eps), out.hidden_post_norm);
    out.logits.noalias() = out.hidden_post_norm * params.head;
}

}  // namespace detail

template <typename T>
ExitOutputs<T> forward_depths(const Parameters<T>& params, const ModelConfig& cfg,
                              const RopeCache<T>& rope, std::span<const int> depths,
                              std::span<const int> tokens, ForwardCache<T>* cache) {
    if (depths.empty()) throw std::invalid_argument("forward_depths: empty depth list");
    for (size_t i = 0; i < depths.size(); ++i) {
        if (depths[i] < 1 || depths[i] > cfg.n_blocks)
            throw InvalidDepthError("depth " + std::to_string(depths[i]) + " outside [1, " +
                                    std::to_string(cfg.n_blocks) + "]");
        if (i > 0 && depths[i] <= depths[i - 1])
            throw std::invalid_argument("forward_depths: depths must be strictly ascending");
    }
    const long s = static_cast<long>(tokens.size());
    if (s < 1) throw std::invalid_argument("forward_depths: empty token sequence");
    if (s > cfg.max_seq_len)
        throw SequenceTooLongError("sequence length " + std::to_string(s) +
                                   " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw InvalidTokenError("token id " + std::to_string(t) + " outside vocab of " +
                                    std::to_string(cfg.vocab_size));

    const int max_depth = depths.back();
    Mat<T> h(s, cfg.d_model);
    for (long i = 0; i < s; ++i) h.row(i) = params.token_embedding.row(tokens[static_cast<size_t>(i)]);

    if (cache != nullptr) cache->blocks.resize(static_cast<size_t>(max_depth));

    ExitOutputs<T> out;
    out.exits.assign(depths.begin(), depths.end());
    out.tensors.resize(depths.size());
    size_t next_exit = 0;
    for (int b = 1; b <= max_depth; ++b) {
        BlockCache<T>* bc = cache != nullptr ? &cache->blocks[static_cast<size_t>(b - 1)] : nullptr;
        block_forward(params.blocks[static_cast<size_t>(b - 1)], cfg, rope, h, bc);
        if (next_exit < depths.size() && depths[next_exit] == b) {
            detail::exit_branch(params, cfg, h, out.tensors[next_exit]);
            ++next_exit;
        }
    }
    if (cache != nullptr) cache->h_out = std::move(h);
    return out;
}

template <typename T>
ExitOutputs<T> forward_exits(const Parameters<T>& params, const ModelConfig& cfg,
                             const ExitSet& exits, std::span<const int> tokens) {
    const RopeCache<T> rope = RopeCache<T>::build(cfg);
    return forward_depths<T>(params, cfg, rope, exits.depths(), tokens, nullptr);
}

template <typename T>
std::pair<Mat<T>, Mat<T>> forward_single(const Parameters<T>& params, const ModelConfig& cfg,
                                         int n, std::span<const int> tokens) {
    if (n < 1 || n > cfg.n_blocks)
        throw InvalidDepthError("depth " + std::to_string(n) + " outside [1, " +
                                std::to_string(cfg.n_blocks) + "]");
    const RopeCache<T> rope = RopeCache<T>::build(cfg);
    const int depths[1] = {n};
    ExitOutputs<T> out = forward_depths<T>(params, cfg, rope, depths, tokens, nullptr);
    return {std::move(out.tensors[0].logits), std::move(out.tensors[0].hidden_post_norm)};
}

}  // namespace softforge
