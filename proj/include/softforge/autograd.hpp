#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "softforge/model.hpp"

namespace softforge {

// Hand-written reverse-mode gradients for the fixed architecture. The
// central-difference checker in training.hpp is the independent oracle for
// everything in this file.

namespace detail {

// Backward of y = x .* gain * inv_row with inv_row = 1/sqrt(mean(x^2)+eps).
// Returns dX; accumulates the gain gradient.
template <typename T>
Mat<T> rms_norm_rows_backward(const Mat<T>& x, const Vec<T>& gain, T eps,
                              const Mat<T>& d_y, Vec<T>& d_gain) {
    const long dims = x.cols();
    const T inv_d = T(1) / static_cast<T>(dims);
    Mat<T> d_x(x.rows(), x.cols());
    for (long r = 0; r < x.rows(); ++r) {
        const T inv = T(1) / std::sqrt(x.row(r).squaredNorm() * inv_d + eps);
        d_gain.array() += d_y.row(r).transpose().array() * x.row(r).transpose().array() * inv;
        auto t = d_y.row(r).cwiseProduct(gain.transpose());
        const T dot = t.cwiseProduct(x.row(r)).sum();
        d_x.row(r) = t * inv - x.row(r) * (inv * inv * inv * inv_d * dot);
    }
    return d_x;
}

// Backward through one block given the gradient of its output stream.
// Returns the gradient of the input stream.
template <typename T>
Mat<T> block_backward(const BlockWeights<T>& w, const ModelConfig& cfg,
                      const RopeCache<T>& rope, const BlockCache<T>& c,
                      const Mat<T>& d_out, BlockWeights<T>& g) {
    const int nh = cfg.n_heads;
    const int hd = cfg.head_dim();
    const T eps = static_cast<T>(cfg.rms_eps);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    // FFN: h_out = h_mid + silu(gate_pre).*up * w_down
    Mat<T> d_act = d_out * w.w_down.transpose();
    g.w_down.noalias() += c.act.transpose() * d_out;
    Mat<T> sig = (T(1) + (-c.gate_pre.array()).exp()).inverse();
    Mat<T> silu = c.gate_pre.array() * sig.array();
    Mat<T> d_gate_pre =
        d_act.array() * c.up.array() * sig.array() * (T(1) + c.gate_pre.array() * (T(1) - sig.array()));
    Mat<T> d_up = d_act.array() * silu.array();
    g.w_gate.noalias() += c.ffn_norm_out.transpose() * d_gate_pre;
    g.w_up.noalias() += c.ffn_norm_out.transpose() * d_up;
    Mat<T> d_fnorm = d_gate_pre * w.w_gate.transpose();
    d_fnorm.noalias() += d_up * w.w_up.transpose();
    Mat<T> d_h_mid = rms_norm_rows_backward(c.h_mid, w.ffn_norm_gain, eps, d_fnorm, g.ffn_norm_gain);
    d_h_mid += d_out;  // residual path

    // Attention: h_mid = h_in + ctx * wo
    Mat<T> d_ctx = d_h_mid * w.wo.transpose();
    g.wo.noalias() += c.ctx.transpose() * d_h_mid;
    Mat<T> d_q(c.q.rows(), c.q.cols());
    Mat<T> d_k(c.k.rows(), c.k.cols());
    Mat<T> d_v(c.v.rows(), c.v.cols());
    for (int head = 0; head < nh; ++head) {
        const auto& probs = c.probs[static_cast<size_t>(head)];
        auto qh = c.q.middleCols(head * hd, hd);
        auto kh = c.k.middleCols(head * hd, hd);
        auto vh = c.v.middleCols(head * hd, hd);
        auto d_ctx_h = d_ctx.middleCols(head * hd, hd);
        Mat<T> d_probs = d_ctx_h * vh.transpose();
        d_v.middleCols(head * hd, hd).noalias() = probs.transpose() * d_ctx_h;
        // softmax backward; rows masked by the causal pattern already carry
        // exact zeros in probs, which zeroes the corresponding d_scores
        Mat<T> d_scores(probs.rows(), probs.cols());
        for (long r = 0; r < probs.rows(); ++r) {
            const T dot = d_probs.row(r).cwiseProduct(probs.row(r)).sum();
            d_scores.row(r) = probs.row(r).array() * (d_probs.row(r).array() - dot);
        }
        d_q.middleCols(head * hd, hd).noalias() = d_scores * kh * scale;
        d_k.middleCols(head * hd, hd).noalias() = d_scores.transpose() * qh * scale;
    }
    apply_rope(d_q, rope, nh, -1);
    apply_rope(d_k, rope, nh, -1);
    g.wq.noalias() += c.attn_norm_out.transpose() * d_q;
    g.wk.noalias() += c.attn_norm_out.transpose() * d_k;
    g.wv.noalias() += c.attn_norm_out.transpose() * d_v;
    Mat<T> d_anorm = d_q * w.wq.transpose();
    d_anorm.noalias() += d_k * w.wk.transpose();
    d_anorm.noalias() += d_v * w.wv.transpose();
    Mat<T> d_h_in = rms_norm_rows_backward(c.h_in, w.attn_norm_gain, eps, d_anorm, g.attn_norm_gain);
    d_h_in += d_h_mid;  // residual path
    return d_h_in;
}

}  // namespace detail

struct ExampleLoss {
    // Sum of masked negative log-likelihoods per requested exit, aligned
    // with the depth list.
    std::vector<double> nll_sum;
    long masked_count = 0;
};

// Multi-exit loss (and optionally gradients) for a single sequence.
//
// depths:   ascending exit depths to evaluate; the deepest bounds the pass.
// weights:  gradient weight per exit; an exit with weight 0 still reports
//           its loss but contributes nothing to the backward pass.
// grad_scale: multiplies every gradient contribution (use 1/total_tokens of
//           the batch); pass grads=nullptr for loss-only evaluation.
template <typename T>
ExampleLoss example_loss_and_grads(const Parameters<T>& params, const ModelConfig& cfg,
                                   const RopeCache<T>& rope, std::span<const int> depths,
                                   std::span<const double> weights,
                                   std::span<const int> inputs, std::span<const int> targets,
                                   std::span<const uint8_t> mask, double grad_scale,
                                   Parameters<T>* grads) {
    const long s = static_cast<long>(inputs.size());
    if (targets.size() != inputs.size() || mask.size() != inputs.size())
        throw std::invalid_argument("example_loss_and_grads: input/target/mask length mismatch");
    if (weights.size() != depths.size())
        throw std::invalid_argument("example_loss_and_grads: weights must align with depths");

    const bool want_backward = grads != nullptr && grad_scale != 0.0;
    ForwardCache<T> cache;
    ExitOutputs<T> outs = forward_depths<T>(params, cfg, rope, depths, inputs,
                                            want_backward ? &cache : nullptr);

    ExampleLoss result;
    result.nll_sum.assign(depths.size(), 0.0);
    for (long t = 0; t < s; ++t) result.masked_count += mask[static_cast<size_t>(t)] ? 1 : 0;

    // Pending gradient w.r.t. the pre-norm hidden state at each exit depth.
    std::map<int, Mat<T>> d_pre;

    for (size_t e = 0; e < depths.size(); ++e) {
        ExitTensors<T>& ex = outs.tensors[e];
        Mat<T>& logits = ex.logits;
        const bool exit_backward = want_backward && weights[e] != 0.0;
        Mat<T> d_logits;
        if (exit_backward) d_logits.setZero(logits.rows(), logits.cols());

        for (long t = 0; t < s; ++t) {
            if (!mask[static_cast<size_t>(t)]) continue;
            const int target = targets[static_cast<size_t>(t)];
            if (target < 0 || target >= cfg.vocab_size)
                throw InvalidTokenError("target id " + std::to_string(target) + " out of range");
            auto row = logits.row(t);
            const T mx = row.maxCoeff();
            const T lse = mx + std::log((row.array() - mx).exp().sum());
            result.nll_sum[e] += static_cast<double>(lse - row(target));
            if (exit_backward) {
                const T coeff = static_cast<T>(weights[e] * grad_scale);
                d_logits.row(t) = (row.array() - lse).exp() * coeff;
                d_logits(t, target) -= coeff;
            }
        }

        if (exit_backward) {
            grads->head.noalias() += ex.hidden_post_norm.transpose() * d_logits;
            Mat<T> d_post = d_logits * params.head.transpose();
            Mat<T> dx = detail::rms_norm_rows_backward(ex.hidden_pre_norm, params.final_norm_gain,
                                                       static_cast<T>(cfg.rms_eps), d_post,
                                                       grads->final_norm_gain);
            auto it = d_pre.find(depths[e]);
            if (it == d_pre.end()) d_pre.emplace(depths[e], std::move(dx));
            else it->second += dx;
        }
    }

    if (want_backward && !d_pre.empty()) {
        const int max_depth = depths.back();
        Mat<T> d_h = Mat<T>::Zero(s, cfg.d_model);
        for (int b = max_depth; b >= 1; --b) {
            auto it = d_pre.find(b);
            if (it != d_pre.end()) d_h += it->second;
            d_h = detail::block_backward(params.blocks[static_cast<size_t>(b - 1)], cfg, rope,
                                         cache.blocks[static_cast<size_t>(b - 1)], d_h,
                                         grads->blocks[static_cast<size_t>(b - 1)]);
        }
        for (long t = 0; t < s; ++t)
            grads->token_embedding.row(inputs[static_cast<size_t>(t)]) += d_h.row(t);
    }
    return result;
}

}  // namespace softforge
