#pragma once

#include <string>
#include <vector>

#include "ulact/tensor.hpp"

namespace ulact {

template <typename T>
struct Linear {
    Tensor<T> w;  // [in, out]
    Tensor<T> b;  // [out]

    static Linear create(ParamStore<T>& ps, const std::string& name, int in, int out,
                         double init_std) {
        Linear l;
        l.w = ps.normal(name + ".w", {in, out}, init_std);
        l.b = ps.constant(name + ".b", {out}, T(0));
        return l;
    }

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
        return add_bias(tape, matmul(tape, x, w), b);
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma;
    Tensor<T> beta;

    static LayerNormParams create(ParamStore<T>& ps, const std::string& name, int dim) {
        LayerNormParams ln;
        ln.gamma = ps.constant(name + ".gamma", {dim}, T(1));
        ln.beta = ps.constant(name + ".beta", {dim}, T(0));
        return ln;
    }

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
        return layer_norm(tape, x, gamma, beta);
    }
};

// Pre-norm transformer block with multi-head self-attention and a GELU MLP.
// `attn_bias`, when given, is an [n, n] additive mask applied before softmax.
template <typename T>
struct TransformerBlock {
    int heads = 1;
    LayerNormParams<T> ln1, ln2;
    Linear<T> wq, wk, wv, wo;
    Linear<T> fc1, fc2;

    static TransformerBlock create(ParamStore<T>& ps, const std::string& name, int width, int heads,
                                   double init_std) {
        TransformerBlock blk;
        blk.heads = heads;
        blk.ln1 = LayerNormParams<T>::create(ps, name + ".ln1", width);
        blk.ln2 = LayerNormParams<T>::create(ps, name + ".ln2", width);
        blk.wq = Linear<T>::create(ps, name + ".wq", width, width, init_std);
        blk.wk = Linear<T>::create(ps, name + ".wk", width, width, init_std);
        blk.wv = Linear<T>::create(ps, name + ".wv", width, width, init_std);
        blk.wo = Linear<T>::create(ps, name + ".wo", width, width, init_std);
        blk.fc1 = Linear<T>::create(ps, name + ".fc1", width, 4 * width, init_std);
        blk.fc2 = Linear<T>::create(ps, name + ".fc2", 4 * width, width, init_std);
        return blk;
    }

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>* attn_bias) const {
        const int n = x.shape()[0];
        const int width = x.shape()[1];
        const int hd = width / heads;

        auto h = ln1(tape, x);
        auto q = wq(tape, h);
        auto k = wk(tape, h);
        auto v = wv(tape, h);

        std::vector<Tensor<T>> head_outs;
        head_outs.reserve(static_cast<std::size_t>(heads));
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
        for (int hi = 0; hi < heads; ++hi) {
            auto qh = slice(tape, q, {0, hi * hd}, {n, hd});
            auto kh = slice(tape, k, {0, hi * hd}, {n, hd});
            auto vh = slice(tape, v, {0, hi * hd}, {n, hd});
            auto scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
            if (attn_bias) scores = add(tape, scores, *attn_bias);
            auto attn = softmax(tape, scores);
            head_outs.push_back(matmul(tape, attn, vh));
        }
        auto attn_out = wo(tape, concat(tape, head_outs, 1));
        auto x1 = add(tape, x, attn_out);

        auto m = fc2(tape, gelu(tape, fc1(tape, ln2(tape, x1))));
        return add(tape, x1, m);
    }
};

template <typename T>
struct Transformer {
    std::vector<TransformerBlock<T>> blocks;
    LayerNormParams<T> final_ln;

    static Transformer create(ParamStore<T>& ps, const std::string& name, int layers, int width,
                              int heads, double init_std) {
        Transformer tr;
        for (int i = 0; i < layers; ++i)
            tr.blocks.push_back(
                TransformerBlock<T>::create(ps, name + ".blk" + std::to_string(i), width, heads, init_std));
        tr.final_ln = LayerNormParams<T>::create(ps, name + ".final_ln", width);
        return tr;
    }

    Tensor<T> operator()(Tape<T>& tape, Tensor<T> x, const Tensor<T>* attn_bias = nullptr) const {
        for (const auto& blk : blocks) x = blk(tape, x, attn_bias);
        return final_ln(tape, x);
    }
};

// Additive attention mask: every position sees the conditioning prefix
// [0, cond_len); positions past the prefix additionally see earlier generated
// positions and themselves, nothing ahead.
template <typename T>
Tensor<T> prefix_causal_bias(int n, int cond_len) {
    std::vector<T> bias(static_cast<std::size_t>(n) * n, T(0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (!(j < cond_len || j <= i)) bias[static_cast<std::size_t>(i) * n + j] = T(-1e9);
    return Tensor<T>::leaf({n, n}, std::move(bias), false);
}

// Broadcast one row vector over all rows of x.
template <typename T>
Tensor<T> add_row(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& row_table, int row) {
    auto r = reshape(tape, slice(tape, row_table, {row, 0}, {1, row_table.shape()[1]}),
                     {row_table.shape()[1]});
    return add_bias(tape, x, r);
}

}  // namespace ulact
