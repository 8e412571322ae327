#pragma once

#include <span>
#include <vector>

#include "knnsid/tensor.hpp"

namespace knnsid::nn {

/// Additive scoring parameters: score_j = v . tanh(W_s^T s_bar + W_h^T h_j),
/// with s_bar the mean of the sequence rows.
template <class T>
struct AttentionParams {
    BasicTensor<T> w_s; // [D, A]
    BasicTensor<T> w_h; // [D, A]
    BasicTensor<T> v;   // [A]

    std::size_t dim() const { return w_s.dim(0); }
    std::size_t attn_dim() const { return w_s.dim(1); }
};

/// Everything attention_backward needs from the forward pass.
template <class T>
struct AttentionCache {
    std::vector<T> context;    // s_bar, [D]
    BasicTensor<T> activation; // tanh(...), [N, A]
    std::vector<T> scores;     // [N]
    std::vector<T> alpha;      // [N]
    std::vector<T> pooled;     // c, [D]
    bool valid = false;
};

template <class T>
struct AttentionGrads {
    BasicTensor<T> d_sequence; // [N, D]
    BasicTensor<T> d_w_s;
    BasicTensor<T> d_w_h;
    BasicTensor<T> d_v;
};

/// Throws DimensionError unless `sequence` is [N, D] with N >= 1 and the
/// parameter shapes agree with D.
template <class T>
void check_attention_shapes(const BasicTensor<T>& sequence, const AttentionParams<T>& params);

template <class T>
std::vector<T> attention_scores(const BasicTensor<T>& sequence, const AttentionParams<T>& params);

/// Max-subtracted softmax over time steps. Throws NumericError on non-finite
/// scores.
template <class T>
std::vector<T> attention_weights(std::span<const T> scores);

/// c = sum_j alpha_j h_j. Requires alpha to sum to 1 within 1e-6.
template <class T>
std::vector<T> attention_pool(const BasicTensor<T>& sequence, std::span<const T> alpha);

template <class T>
AttentionCache<T> attention_forward(const BasicTensor<T>& sequence, const AttentionParams<T>& params);

template <class T>
AttentionGrads<T> attention_backward(const BasicTensor<T>& sequence, const AttentionParams<T>& params,
                                     const AttentionCache<T>& cache, std::span<const T> upstream);

} // namespace knnsid::nn
