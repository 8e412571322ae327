#include "knnsid/attention.hpp"

#include <algorithm>
#include <cmath>

namespace knnsid::nn {

namespace {

template <class T>
void scores_into(const BasicTensor<T>& h, const AttentionParams<T>& p, std::vector<T>& context,
                 BasicTensor<T>& activation, std::vector<T>& scores) {
    const std::size_t n = h.dim(0);
    const std::size_t d = h.dim(1);
    const std::size_t a = p.attn_dim();

    context.assign(d, T{0});
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < d; ++k) context[k] += h[j * d + k];
    for (T& x : context) x /= static_cast<T>(n);

    std::vector<T> query(a, T{0});
    for (std::size_t k = 0; k < d; ++k) {
        const T ck = context[k];
        const T* row = p.w_s.ptr() + k * a;
        for (std::size_t i = 0; i < a; ++i) query[i] += ck * row[i];
    }

    activation = BasicTensor<T>({n, a});
    scores.assign(n, T{0});
    for (std::size_t j = 0; j < n; ++j) {
        T* act = activation.ptr() + j * a;
        std::copy(query.begin(), query.end(), act);
        for (std::size_t k = 0; k < d; ++k) {
            const T hk = h[j * d + k];
            const T* row = p.w_h.ptr() + k * a;
            for (std::size_t i = 0; i < a; ++i) act[i] += hk * row[i];
        }
        T s{0};
        for (std::size_t i = 0; i < a; ++i) {
            act[i] = std::tanh(act[i]);
            s += p.v[i] * act[i];
        }
        scores[j] = s;
    }
}

} // namespace

template <class T>
void check_attention_shapes(const BasicTensor<T>& sequence, const AttentionParams<T>& params) {
    if (sequence.rank() != 2)
        throw DimensionError("attention: sequence must be [N, D], got " + shape_string(sequence.shape()));
    const std::size_t d = sequence.dim(1);
    if (params.w_s.rank() != 2 || params.w_h.rank() != 2 || params.v.rank() != 1 ||
        params.w_s.dim(0) != d || params.w_h.dim(0) != d || params.w_s.dim(1) != params.w_h.dim(1) ||
        params.v.dim(0) != params.w_s.dim(1))
        throw DimensionError("attention: parameter shapes W_s " + shape_string(params.w_s.shape()) + ", W_h " +
                             shape_string(params.w_h.shape()) + ", v " + shape_string(params.v.shape()) +
                             " do not fit sequence " + shape_string(sequence.shape()));
}

template <class T>
std::vector<T> attention_scores(const BasicTensor<T>& sequence, const AttentionParams<T>& params) {
    check_attention_shapes(sequence, params);
    std::vector<T> context;
    BasicTensor<T> activation;
    std::vector<T> scores;
    scores_into(sequence, params, context, activation, scores);
    return scores;
}

template <class T>
std::vector<T> attention_weights(std::span<const T> scores) {
    if (scores.empty()) throw DimensionError("attention_weights: empty score vector");
    for (T s : scores)
        if (!std::isfinite(s)) throw NumericError("attention_weights: non-finite score");
    const T peak = *std::max_element(scores.begin(), scores.end());
    std::vector<T> alpha(scores.size());
    T total{0};
    for (std::size_t j = 0; j < scores.size(); ++j) {
        alpha[j] = std::exp(scores[j] - peak);
        total += alpha[j];
    }
    for (T& a : alpha) a /= total;
    return alpha;
}

template <class T>
std::vector<T> attention_pool(const BasicTensor<T>& sequence, std::span<const T> alpha) {
    if (sequence.rank() != 2 || sequence.dim(0) != alpha.size())
        throw DimensionError("attention_pool: " + std::to_string(alpha.size()) + " weights for sequence " +
                             shape_string(sequence.shape()));
    T total{0};
    for (T a : alpha) total += a;
    if (std::abs(static_cast<double>(total) - 1.0) > 1e-6)
        throw ContractError("attention_pool: weights sum to " + std::to_string(static_cast<double>(total)));
    const std::size_t d = sequence.dim(1);
    std::vector<T> c(d, T{0});
    for (std::size_t j = 0; j < alpha.size(); ++j)
        for (std::size_t k = 0; k < d; ++k) c[k] += alpha[j] * sequence[j * d + k];
    return c;
}

template <class T>
AttentionCache<T> attention_forward(const BasicTensor<T>& sequence, const AttentionParams<T>& params) {
    check_attention_shapes(sequence, params);
    AttentionCache<T> cache;
    scores_into(sequence, params, cache.context, cache.activation, cache.scores);
    cache.alpha = attention_weights<T>(cache.scores);
    cache.pooled = attention_pool<T>(sequence, cache.alpha);
    cache.valid = true;
    return cache;
}

template <class T>
AttentionGrads<T> attention_backward(const BasicTensor<T>& sequence, const AttentionParams<T>& params,
                                     const AttentionCache<T>& cache, std::span<const T> upstream) {
    if (!cache.valid) throw ContractError("attention_backward: missing forward cache");
    check_attention_shapes(sequence, params);
    const std::size_t n = sequence.dim(0);
    const std::size_t d = sequence.dim(1);
    const std::size_t a = params.attn_dim();
    if (cache.alpha.size() != n || cache.context.size() != d)
        throw ContractError("attention_backward: cache does not belong to this sequence");
    if (upstream.size() != d)
        throw DimensionError("attention_backward: upstream gradient has " + std::to_string(upstream.size()) +
                             " entries, expected " + std::to_string(d));

    AttentionGrads<T> g{BasicTensor<T>({n, d}), BasicTensor<T>({d, a}), BasicTensor<T>({d, a}),
                        BasicTensor<T>({a})};

    // Pooling: dH_j = alpha_j dc; dalpha_j = dc . h_j.
    std::vector<T> d_alpha(n, T{0});
    for (std::size_t j = 0; j < n; ++j) {
        T dot{0};
        for (std::size_t k = 0; k < d; ++k) {
            g.d_sequence[j * d + k] = cache.alpha[j] * upstream[k];
            dot += upstream[k] * sequence[j * d + k];
        }
        d_alpha[j] = dot;
    }

    // Softmax Jacobian.
    T weighted{0};
    for (std::size_t j = 0; j < n; ++j) weighted += cache.alpha[j] * d_alpha[j];

    std::vector<T> d_query(a, T{0});
    std::vector<T> d_pre(a);
    for (std::size_t j = 0; j < n; ++j) {
        const T d_score = cache.alpha[j] * (d_alpha[j] - weighted);
        const T* act = cache.activation.ptr() + j * a;
        for (std::size_t i = 0; i < a; ++i) {
            g.d_v[i] += d_score * act[i];
            d_pre[i] = d_score * params.v[i] * (T{1} - act[i] * act[i]);
            d_query[i] += d_pre[i];
        }
        for (std::size_t k = 0; k < d; ++k) {
            const T hk = sequence[j * d + k];
            const T* w_row = params.w_h.ptr() + k * a;
            T* gw_row = g.d_w_h.ptr() + k * a;
            T acc{0};
            for (std::size_t i = 0; i < a; ++i) {
                gw_row[i] += hk * d_pre[i];
                acc += w_row[i] * d_pre[i];
            }
            g.d_sequence[j * d + k] += acc;
        }
    }

    // Context path: s_bar is the row mean, so each row receives 1/N of it.
    const T inv_n = T{1} / static_cast<T>(n);
    for (std::size_t k = 0; k < d; ++k) {
        const T* w_row = params.w_s.ptr() + k * a;
        T* gw_row = g.d_w_s.ptr() + k * a;
        T acc{0};
        for (std::size_t i = 0; i < a; ++i) {
            gw_row[i] = cache.context[k] * d_query[i];
            acc += w_row[i] * d_query[i];
        }
        const T share = acc * inv_n;
        for (std::size_t j = 0; j < n; ++j) g.d_sequence[j * d + k] += share;
    }
    return g;
}

#define KNNSID_INSTANTIATE_ATTENTION(T)                                                                       \
    template void check_attention_shapes<T>(const BasicTensor<T>&, const AttentionParams<T>&);               \
    template std::vector<T> attention_scores<T>(const BasicTensor<T>&, const AttentionParams<T>&);           \
    template std::vector<T> attention_weights<T>(std::span<const T>);                                        \
    template std::vector<T> attention_pool<T>(const BasicTensor<T>&, std::span<const T>);                    \
    template AttentionCache<T> attention_forward<T>(const BasicTensor<T>&, const AttentionParams<T>&);       \
    template AttentionGrads<T> attention_backward<T>(const BasicTensor<T>&, const AttentionParams<T>&,       \
                                                     const AttentionCache<T>&, std::span<const T>);

KNNSID_INSTANTIATE_ATTENTION(float)
KNNSID_INSTANTIATE_ATTENTION(double)

#undef KNNSID_INSTANTIATE_ATTENTION

} // namespace knnsid::nn
