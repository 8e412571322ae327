#include "knnsid/layers.hpp"

#include <algorithm>
#include <cmath>

#include "knnsid/attention.hpp"

namespace knnsid::nn {

namespace {

[[noreturn]] void shape_mismatch(const LayerSpec& spec, const Shape& expected, const Shape& got) {
    throw DimensionError(to_string(spec.kind) + " layer expects input " + shape_string(expected) + ", got " +
                         shape_string(got));
}

template <class T>
T sigmoid(T x) {
    return T{1} / (T{1} + std::exp(-x));
}

template <class T>
void fill_uniform(BasicTensor<T>& t, Rng& rng, double limit) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-limit, limit));
}

double glorot_limit(double fan_in, double fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); }

template <class T>
void apply_activation(Activation act, std::span<T> values) {
    if (act == Activation::elu)
        for (T& v : values) v = v > T{0} ? v : std::expm1(v);
}

/// Multiplies `grad` in place by the activation derivative, expressed through
/// the activation output.
template <class T>
void activation_backward(Activation act, std::span<const T> output, std::span<T> grad) {
    if (act != Activation::elu) return;
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (output[i] <= T{0}) grad[i] *= output[i] + T{1};
}

// ---------------------------------------------------------------- conv2d

template <class T>
ForwardResult<T> conv_forward(const Layer<T>& layer, const BasicTensor<T>& in) {
    const LayerSpec& s = layer.spec;
    const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const std::size_t O = static_cast<std::size_t>(s.out_channels);
    const int kh = s.kernel_h, kw = s.kernel_w, ph = kh / 2, pw = kw / 2;
    const BasicTensor<T>& w = layer.weights[0];
    const BasicTensor<T>& b = layer.weights[1];

    BasicTensor<T> out({O, H, W});
    for (std::size_t o = 0; o < O; ++o) {
        T* out_plane = out.ptr() + o * H * W;
        std::fill(out_plane, out_plane + H * W, b[o]);
        for (std::size_t c = 0; c < C; ++c) {
            const T* in_plane = in.ptr() + c * H * W;
            for (int ky = 0; ky < kh; ++ky) {
                const long dy = ky - ph;
                const std::size_t y0 = static_cast<std::size_t>(std::max(0L, -dy));
                const std::size_t y1 = static_cast<std::size_t>(std::min<long>(static_cast<long>(H), static_cast<long>(H) - dy));
                for (int kx = 0; kx < kw; ++kx) {
                    const long dx = kx - pw;
                    const std::size_t x0 = static_cast<std::size_t>(std::max(0L, -dx));
                    const std::size_t x1 = static_cast<std::size_t>(std::min<long>(static_cast<long>(W), static_cast<long>(W) - dx));
                    const T wv = w[((o * C + c) * kh + ky) * kw + kx];
                    for (std::size_t y = y0; y < y1; ++y) {
                        T* orow = out_plane + y * W;
                        const T* irow = in_plane + (y + dy) * W + dx;
                        for (std::size_t x = x0; x < x1; ++x) orow[x] += wv * irow[x];
                    }
                }
            }
        }
    }
    apply_activation<T>(s.activation, out.data());
    ForwardResult<T> r{out, {}};
    r.cache.saved = {in, out};
    return r;
}

template <class T>
BackwardResult<T> conv_backward(const Layer<T>& layer, const LayerCache<T>& cache, const BasicTensor<T>& upstream) {
    const LayerSpec& s = layer.spec;
    const BasicTensor<T>& in = cache.saved[0];
    const BasicTensor<T>& out = cache.saved[1];
    const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const std::size_t O = static_cast<std::size_t>(s.out_channels);
    const int kh = s.kernel_h, kw = s.kernel_w, ph = kh / 2, pw = kw / 2;
    const BasicTensor<T>& w = layer.weights[0];

    BasicTensor<T> g = upstream;
    activation_backward<T>(s.activation, out.data(), g.data());

    BackwardResult<T> r{BasicTensor<T>(in.shape()), {BasicTensor<T>(w.shape()), BasicTensor<T>(layer.weights[1].shape())}};
    BasicTensor<T>& dw = r.weight_grads[0];
    BasicTensor<T>& db = r.weight_grads[1];
    for (std::size_t o = 0; o < O; ++o) {
        const T* g_plane = g.ptr() + o * H * W;
        T acc{0};
        for (std::size_t i = 0; i < H * W; ++i) acc += g_plane[i];
        db[o] = acc;
        for (std::size_t c = 0; c < C; ++c) {
            const T* in_plane = in.ptr() + c * H * W;
            T* din_plane = r.input_grad.ptr() + c * H * W;
            for (int ky = 0; ky < kh; ++ky) {
                const long dy = ky - ph;
                const std::size_t y0 = static_cast<std::size_t>(std::max(0L, -dy));
                const std::size_t y1 = static_cast<std::size_t>(std::min<long>(static_cast<long>(H), static_cast<long>(H) - dy));
                for (int kx = 0; kx < kw; ++kx) {
                    const long dx = kx - pw;
                    const std::size_t x0 = static_cast<std::size_t>(std::max(0L, -dx));
                    const std::size_t x1 = static_cast<std::size_t>(std::min<long>(static_cast<long>(W), static_cast<long>(W) - dx));
                    const std::size_t widx = ((o * C + c) * kh + ky) * kw + kx;
                    const T wv = w[widx];
                    T wacc{0};
                    for (std::size_t y = y0; y < y1; ++y) {
                        const T* grow = g_plane + y * W;
                        const T* irow = in_plane + (y + dy) * W + dx;
                        T* drow = din_plane + (y + dy) * W + dx;
                        for (std::size_t x = x0; x < x1; ++x) {
                            wacc += grow[x] * irow[x];
                            drow[x] += wv * grow[x];
                        }
                    }
                    dw[widx] = wacc;
                }
            }
        }
    }
    return r;
}

// ---------------------------------------------------------------- max_pool

template <class T>
ForwardResult<T> pool_forward(const Layer<T>& layer, const BasicTensor<T>& in) {
    const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const auto ph = static_cast<std::size_t>(layer.spec.pool_h);
    const auto pw = static_cast<std::size_t>(layer.spec.pool_w);
    const std::size_t OH = H / ph, OW = W / pw;
    ForwardResult<T> r{BasicTensor<T>({C, OH, OW}), {}};
    r.cache.indices.resize(C * OH * OW);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
                std::size_t best = (c * H + oy * ph) * W + ox * pw;
                for (std::size_t dy = 0; dy < ph; ++dy)
                    for (std::size_t dx = 0; dx < pw; ++dx) {
                        const std::size_t idx = (c * H + oy * ph + dy) * W + ox * pw + dx;
                        if (in[idx] > in[best]) best = idx;
                    }
                const std::size_t o = (c * OH + oy) * OW + ox;
                r.output[o] = in[best];
                r.cache.indices[o] = static_cast<std::uint32_t>(best);
            }
    return r;
}

template <class T>
BackwardResult<T> pool_backward(const LayerCache<T>& cache, const BasicTensor<T>& upstream) {
    BackwardResult<T> r{BasicTensor<T>(cache.input_shape), {}};
    for (std::size_t o = 0; o < upstream.size(); ++o) r.input_grad[cache.indices[o]] += upstream[o];
    return r;
}

// ---------------------------------------------------------------- gru

/// Flattens [C, N, F] into time-major [N, C*F]; rank-2 input passes through.
template <class T>
BasicTensor<T> to_sequence(const BasicTensor<T>& in) {
    if (in.rank() == 2) return in;
    const std::size_t C = in.dim(0), N = in.dim(1), F = in.dim(2);
    BasicTensor<T> seq({N, C * F});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < N; ++t)
            for (std::size_t f = 0; f < F; ++f) seq[t * C * F + c * F + f] = in[(c * N + t) * F + f];
    return seq;
}

template <class T>
BasicTensor<T> from_sequence(const BasicTensor<T>& seq, const Shape& shape) {
    if (shape.size() == 2) return seq;
    const std::size_t C = shape[0], N = shape[1], F = shape[2];
    BasicTensor<T> out(shape);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < N; ++t)
            for (std::size_t f = 0; f < F; ++f) out[(c * N + t) * F + f] = seq[t * C * F + c * F + f];
    return out;
}

// y[rows] += M[rows, cols] x[cols]
template <class T>
void matvec_add(const T* m, std::size_t rows, std::size_t cols, const T* x, T* y) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* row = m + i * cols;
        T acc{0};
        for (std::size_t j = 0; j < cols; ++j) acc += row[j] * x[j];
        y[i] += acc;
    }
}

// y[cols] += M[rows, cols]^T x[rows]
template <class T>
void matvec_t_add(const T* m, std::size_t rows, std::size_t cols, const T* x, T* y) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* row = m + i * cols;
        const T xi = x[i];
        for (std::size_t j = 0; j < cols; ++j) y[j] += row[j] * xi;
    }
}

// M[rows, cols] += a[rows] b[cols]^T
template <class T>
void outer_add(T* m, std::size_t rows, std::size_t cols, const T* a, const T* b) {
    for (std::size_t i = 0; i < rows; ++i) {
        T* row = m + i * cols;
        const T ai = a[i];
        for (std::size_t j = 0; j < cols; ++j) row[j] += ai * b[j];
    }
}

template <class T>
ForwardResult<T> gru_forward(const Layer<T>& layer, const BasicTensor<T>& in) {
    const BasicTensor<T> xs = to_sequence(in);
    const std::size_t N = xs.dim(0), I = xs.dim(1);
    const auto Hd = static_cast<std::size_t>(layer.spec.units);
    const BasicTensor<T>& wx = layer.weights[0];
    const BasicTensor<T>& wh = layer.weights[1];
    const BasicTensor<T>& b = layer.weights[2];

    BasicTensor<T> hs({N + 1, Hd});
    BasicTensor<T> zs({N, Hd}), rs({N, Hd}), ns({N, Hd});
    std::vector<T> ax(3 * Hd), ah(2 * Hd), rh(Hd), an(Hd);
    for (std::size_t t = 0; t < N; ++t) {
        const T* x = xs.ptr() + t * I;
        const T* hp = hs.ptr() + t * Hd;
        std::copy(b.ptr(), b.ptr() + 3 * Hd, ax.begin());
        matvec_add(wx.ptr(), 3 * Hd, I, x, ax.data());
        std::fill(ah.begin(), ah.end(), T{0});
        matvec_add(wh.ptr(), 2 * Hd, Hd, hp, ah.data());
        T* z = zs.ptr() + t * Hd;
        T* r = rs.ptr() + t * Hd;
        T* n = ns.ptr() + t * Hd;
        for (std::size_t k = 0; k < Hd; ++k) {
            z[k] = sigmoid(ax[k] + ah[k]);
            r[k] = sigmoid(ax[Hd + k] + ah[Hd + k]);
            rh[k] = r[k] * hp[k];
        }
        std::copy(ax.begin() + 2 * static_cast<long>(Hd), ax.end(), an.begin());
        matvec_add(wh.ptr() + 2 * Hd * Hd, Hd, Hd, rh.data(), an.data());
        T* h = hs.ptr() + (t + 1) * Hd;
        for (std::size_t k = 0; k < Hd; ++k) {
            n[k] = std::tanh(an[k]);
            h[k] = (T{1} - z[k]) * n[k] + z[k] * hp[k];
        }
    }
    BasicTensor<T> out({N, Hd});
    std::copy(hs.ptr() + Hd, hs.ptr() + (N + 1) * Hd, out.ptr());
    ForwardResult<T> r{out, {}};
    r.cache.saved = {xs, hs, zs, rs, ns};
    return r;
}

template <class T>
BackwardResult<T> gru_backward(const Layer<T>& layer, const LayerCache<T>& cache, const BasicTensor<T>& upstream) {
    const BasicTensor<T>& xs = cache.saved[0];
    const BasicTensor<T>& hs = cache.saved[1];
    const BasicTensor<T>& zs = cache.saved[2];
    const BasicTensor<T>& rs = cache.saved[3];
    const BasicTensor<T>& ns = cache.saved[4];
    const std::size_t N = xs.dim(0), I = xs.dim(1);
    const auto Hd = static_cast<std::size_t>(layer.spec.units);
    const BasicTensor<T>& wx = layer.weights[0];
    const BasicTensor<T>& wh = layer.weights[1];

    BasicTensor<T> dxs({N, I});
    BasicTensor<T> dwx(wx.shape()), dwh(wh.shape()), db(layer.weights[2].shape());
    std::vector<T> dh_next(Hd, T{0}), dh(Hd), da(3 * Hd), drh(Hd), rh(Hd), dh_prev(Hd);
    const T* wh_n = wh.ptr() + 2 * Hd * Hd;
    for (std::size_t step = N; step-- > 0;) {
        const T* hp = hs.ptr() + step * Hd;
        const T* z = zs.ptr() + step * Hd;
        const T* r = rs.ptr() + step * Hd;
        const T* n = ns.ptr() + step * Hd;
        for (std::size_t k = 0; k < Hd; ++k) dh[k] = upstream[step * Hd + k] + dh_next[k];

        T* da_z = da.data();
        T* da_r = da.data() + Hd;
        T* da_n = da.data() + 2 * Hd;
        for (std::size_t k = 0; k < Hd; ++k) {
            const T dn = dh[k] * (T{1} - z[k]);
            const T dz = dh[k] * (hp[k] - n[k]);
            da_n[k] = dn * (T{1} - n[k] * n[k]);
            da_z[k] = dz * z[k] * (T{1} - z[k]);
            dh_prev[k] = dh[k] * z[k];
            rh[k] = r[k] * hp[k];
        }
        std::fill(drh.begin(), drh.end(), T{0});
        matvec_t_add(wh_n, Hd, Hd, da_n, drh.data());
        for (std::size_t k = 0; k < Hd; ++k) {
            da_r[k] = drh[k] * hp[k] * r[k] * (T{1} - r[k]);
            dh_prev[k] += drh[k] * r[k];
        }

        const T* x = xs.ptr() + step * I;
        outer_add(dwx.ptr(), 3 * Hd, I, da.data(), x);
        for (std::size_t k = 0; k < 3 * Hd; ++k) db[k] += da[k];
        outer_add(dwh.ptr(), 2 * Hd, Hd, da.data(), hp);
        outer_add(dwh.ptr() + 2 * Hd * Hd, Hd, Hd, da_n, rh.data());
        matvec_t_add(wx.ptr(), 3 * Hd, I, da.data(), dxs.ptr() + step * I);
        matvec_t_add(wh.ptr(), 2 * Hd, Hd, da.data(), dh_prev.data());
        dh_next = dh_prev;
    }
    return {from_sequence(dxs, cache.input_shape), {dwx, dwh, db}};
}

// ---------------------------------------------------------------- dense

template <class T>
ForwardResult<T> dense_forward(const Layer<T>& layer, const BasicTensor<T>& in) {
    const auto I = static_cast<std::size_t>(layer.spec.inputs);
    const auto U = static_cast<std::size_t>(layer.spec.units);
    BasicTensor<T> out({U});
    std::copy(layer.weights[1].ptr(), layer.weights[1].ptr() + U, out.ptr());
    matvec_add(layer.weights[0].ptr(), U, I, in.ptr(), out.ptr());
    apply_activation<T>(layer.spec.activation, out.data());
    ForwardResult<T> r{out, {}};
    r.cache.saved = {in, out};
    return r;
}

template <class T>
BackwardResult<T> dense_backward(const Layer<T>& layer, const LayerCache<T>& cache, const BasicTensor<T>& upstream) {
    const auto I = static_cast<std::size_t>(layer.spec.inputs);
    const auto U = static_cast<std::size_t>(layer.spec.units);
    const BasicTensor<T>& in = cache.saved[0];
    BasicTensor<T> g = upstream;
    activation_backward<T>(layer.spec.activation, cache.saved[1].data(), g.data());
    BackwardResult<T> r{BasicTensor<T>(cache.input_shape), {BasicTensor<T>({U, I}), BasicTensor<T>({U})}};
    outer_add(r.weight_grads[0].ptr(), U, I, g.ptr(), in.ptr());
    std::copy(g.ptr(), g.ptr() + U, r.weight_grads[1].ptr());
    matvec_t_add(layer.weights[0].ptr(), U, I, g.ptr(), r.input_grad.ptr());
    return r;
}

// ---------------------------------------------------------------- attention

template <class T>
AttentionParams<T> attention_params(const Layer<T>& layer) {
    return {layer.weights[0], layer.weights[1], layer.weights[2]};
}

template <class T>
ForwardResult<T> attention_layer_forward(const Layer<T>& layer, const BasicTensor<T>& in) {
    const AttentionCache<T> ac = attention_forward(in, attention_params(layer));
    const std::size_t N = in.dim(0), D = in.dim(1);
    ForwardResult<T> r{BasicTensor<T>({D}, ac.pooled), {}};
    r.cache.saved = {in, ac.activation, BasicTensor<T>({N}, ac.alpha), BasicTensor<T>({D}, ac.context)};
    return r;
}

template <class T>
BackwardResult<T> attention_layer_backward(const Layer<T>& layer, const LayerCache<T>& cache,
                                           const BasicTensor<T>& upstream) {
    AttentionCache<T> ac;
    ac.activation = cache.saved[1];
    ac.alpha.assign(cache.saved[2].data().begin(), cache.saved[2].data().end());
    ac.context.assign(cache.saved[3].data().begin(), cache.saved[3].data().end());
    ac.valid = true;
    auto g = attention_backward<T>(cache.saved[0], attention_params(layer), ac, upstream.data());
    return {std::move(g.d_sequence), {std::move(g.d_w_s), std::move(g.d_w_h), std::move(g.d_v)}};
}

} // namespace

std::string to_string(LayerKind kind) {
    switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::gru: return "gru";
    case LayerKind::dense: return "dense";
    case LayerKind::softmax_head: return "softmax_head";
    case LayerKind::attention: return "attn";
    }
    return "unknown";
}

LayerSpec LayerSpec::conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w, Activation act) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_channels = in_channels;
    s.out_channels = out_channels;
    s.kernel_h = kernel_h;
    s.kernel_w = kernel_w;
    s.activation = act;
    return s;
}

LayerSpec LayerSpec::max_pool(int pool_h, int pool_w) {
    LayerSpec s;
    s.kind = LayerKind::max_pool;
    s.pool_h = pool_h;
    s.pool_w = pool_w;
    return s;
}

LayerSpec LayerSpec::gru(int inputs, int hidden) {
    LayerSpec s;
    s.kind = LayerKind::gru;
    s.inputs = inputs;
    s.units = hidden;
    return s;
}

LayerSpec LayerSpec::dense(int inputs, int units, Activation act) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.inputs = inputs;
    s.units = units;
    s.activation = act;
    return s;
}

LayerSpec LayerSpec::softmax_head(int inputs, int classes) {
    LayerSpec s;
    s.kind = LayerKind::softmax_head;
    s.inputs = inputs;
    s.units = classes;
    return s;
}

LayerSpec LayerSpec::attention(int dim, int attn_dim) {
    LayerSpec s;
    s.kind = LayerKind::attention;
    s.inputs = dim;
    s.units = attn_dim;
    return s;
}

void LayerSpec::validate() const {
    auto fail = [this](const std::string& what) { throw ConfigError(to_string(kind) + " layer: " + what); };
    switch (kind) {
    case LayerKind::conv2d:
        if (in_channels <= 0 || out_channels <= 0 || kernel_h <= 0 || kernel_w <= 0)
            fail("dimensions must be positive");
        if (kernel_h % 2 == 0 || kernel_w % 2 == 0) fail("kernels must have odd extent");
        break;
    case LayerKind::max_pool:
        if (pool_h <= 0 || pool_w <= 0) fail("pool sizes must be positive");
        break;
    case LayerKind::gru:
    case LayerKind::dense:
    case LayerKind::softmax_head:
    case LayerKind::attention:
        if (inputs <= 0 || units <= 0) fail("dimensions must be positive");
        break;
    default: throw ConfigError("unknown layer kind");
    }
}

std::vector<std::uint32_t> LayerSpec::encode() const {
    auto u = [](int v) { return static_cast<std::uint32_t>(v); };
    switch (kind) {
    case LayerKind::conv2d:
        return {u(in_channels), u(out_channels), u(kernel_h), u(kernel_w), static_cast<std::uint32_t>(activation)};
    case LayerKind::max_pool: return {u(pool_h), u(pool_w)};
    case LayerKind::dense: return {u(inputs), u(units), static_cast<std::uint32_t>(activation)};
    case LayerKind::gru:
    case LayerKind::softmax_head:
    case LayerKind::attention: return {u(inputs), u(units)};
    }
    return {};
}

LayerSpec LayerSpec::decode(LayerKind kind, const std::vector<std::uint32_t>& ints) {
    auto need = [&](std::size_t n) {
        if (ints.size() != n)
            throw FormatError(to_string(kind) + " layer: expected " + std::to_string(n) + " spec integers, got " +
                              std::to_string(ints.size()));
    };
    auto i = [&](std::size_t k) { return static_cast<int>(ints[k]); };
    auto act = [&](std::size_t k) {
        if (ints[k] > 1) throw FormatError("unknown activation tag " + std::to_string(ints[k]));
        return static_cast<Activation>(ints[k]);
    };
    LayerSpec s;
    switch (kind) {
    case LayerKind::conv2d: need(5); s = conv2d(i(0), i(1), i(2), i(3), act(4)); break;
    case LayerKind::max_pool: need(2); s = max_pool(i(0), i(1)); break;
    case LayerKind::gru: need(2); s = gru(i(0), i(1)); break;
    case LayerKind::dense: need(3); s = dense(i(0), i(1), act(2)); break;
    case LayerKind::softmax_head: need(2); s = softmax_head(i(0), i(1)); break;
    case LayerKind::attention: need(2); s = attention(i(0), i(1)); break;
    default: throw FormatError("unknown layer kind tag " + std::to_string(static_cast<int>(kind)));
    }
    s.validate();
    return s;
}

std::vector<Shape> LayerSpec::weight_shapes() const {
    auto z = [](int v) { return static_cast<std::size_t>(v); };
    switch (kind) {
    case LayerKind::conv2d:
        return {{z(out_channels), z(in_channels), z(kernel_h), z(kernel_w)}, {z(out_channels)}};
    case LayerKind::max_pool: return {};
    case LayerKind::gru: return {{3 * z(units), z(inputs)}, {3 * z(units), z(units)}, {3 * z(units)}};
    case LayerKind::dense:
    case LayerKind::softmax_head: return {{z(units), z(inputs)}, {z(units)}};
    case LayerKind::attention: return {{z(inputs), z(units)}, {z(inputs), z(units)}, {z(units)}};
    }
    return {};
}

template <class T>
std::size_t Layer<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += w.size();
    return n;
}

Shape output_shape(const LayerSpec& spec, const Shape& in) {
    const auto z = [](int v) { return static_cast<std::size_t>(v); };
    switch (spec.kind) {
    case LayerKind::conv2d:
        if (in.size() != 3 || in[0] != z(spec.in_channels))
            shape_mismatch(spec, {z(spec.in_channels), 0, 0}, in);
        return {z(spec.out_channels), in[1], in[2]};
    case LayerKind::max_pool:
        if (in.size() != 3 || in[1] % z(spec.pool_h) != 0 || in[2] % z(spec.pool_w) != 0 || in[1] < z(spec.pool_h) ||
            in[2] < z(spec.pool_w))
            throw DimensionError("max_pool layer (" + std::to_string(spec.pool_h) + "x" + std::to_string(spec.pool_w) +
                                 ") cannot pool input " + shape_string(in));
        return {in[0], in[1] / z(spec.pool_h), in[2] / z(spec.pool_w)};
    case LayerKind::gru:
        if (in.size() == 2 && in[1] == z(spec.inputs)) return {in[0], z(spec.units)};
        if (in.size() == 3 && in[0] * in[2] == z(spec.inputs)) return {in[1], z(spec.units)};
        shape_mismatch(spec, {0, z(spec.inputs)}, in);
    case LayerKind::dense:
    case LayerKind::softmax_head:
        if (shape_size(in) != z(spec.inputs)) shape_mismatch(spec, {z(spec.inputs)}, in);
        return {z(spec.units)};
    case LayerKind::attention:
        if (in.size() != 2 || in[1] != z(spec.inputs)) shape_mismatch(spec, {0, z(spec.inputs)}, in);
        return {z(spec.inputs)};
    }
    throw ConfigError("unknown layer kind");
}

template <class T>
Layer<T> make_zero_layer(const LayerSpec& spec) {
    spec.validate();
    Layer<T> layer{spec, {}, false, 0};
    for (const auto& shape : spec.weight_shapes()) layer.weights.emplace_back(shape);
    return layer;
}

template <class T>
Layer<T> make_layer(const LayerSpec& spec, Rng& rng) {
    Layer<T> layer = make_zero_layer<T>(spec);
    switch (spec.kind) {
    case LayerKind::conv2d: {
        const double area = static_cast<double>(spec.kernel_h) * spec.kernel_w;
        fill_uniform(layer.weights[0], rng, glorot_limit(spec.in_channels * area, spec.out_channels * area));
        break;
    }
    case LayerKind::gru: {
        const double limit = 1.0 / std::sqrt(static_cast<double>(spec.units));
        fill_uniform(layer.weights[0], rng, limit);
        fill_uniform(layer.weights[1], rng, limit);
        break;
    }
    case LayerKind::dense:
    case LayerKind::softmax_head:
        fill_uniform(layer.weights[0], rng, glorot_limit(spec.inputs, spec.units));
        break;
    case LayerKind::attention:
        fill_uniform(layer.weights[0], rng, glorot_limit(spec.inputs, spec.units));
        fill_uniform(layer.weights[1], rng, glorot_limit(spec.inputs, spec.units));
        fill_uniform(layer.weights[2], rng, glorot_limit(spec.units, 1));
        break;
    case LayerKind::max_pool: break;
    }
    return layer;
}

template <class T>
ForwardResult<T> forward(const Layer<T>& layer, const BasicTensor<T>& input) {
    if (layer.weights.size() != layer.spec.weight_shapes().size())
        throw ContractError(to_string(layer.spec.kind) + " layer has the wrong number of weight tensors");
    output_shape(layer.spec, input.shape());
    ForwardResult<T> r;
    switch (layer.spec.kind) {
    case LayerKind::conv2d: r = conv_forward(layer, input); break;
    case LayerKind::max_pool: r = pool_forward(layer, input); break;
    case LayerKind::gru: r = gru_forward(layer, input); break;
    case LayerKind::dense:
    case LayerKind::softmax_head: r = dense_forward(layer, input); break;
    case LayerKind::attention: r = attention_layer_forward(layer, input); break;
    }
    r.cache.kind = layer.spec.kind;
    r.cache.version = layer.version;
    r.cache.input_shape = input.shape();
    r.cache.valid = true;
    return r;
}

template <class T>
BackwardResult<T> backward(const Layer<T>& layer, const LayerCache<T>& cache, const BasicTensor<T>& upstream) {
    const std::string name = to_string(layer.spec.kind);
    if (!cache.valid) throw ContractError(name + " backward: missing forward cache");
    if (cache.kind != layer.spec.kind) throw ContractError(name + " backward: cache belongs to another layer kind");
    if (cache.version != layer.version)
        throw ContractError(name + " backward: stale cache (weights changed since forward)");
    const Shape expected = output_shape(layer.spec, cache.input_shape);
    if (upstream.shape() != expected)
        throw DimensionError(name + " backward: upstream gradient " + shape_string(upstream.shape()) +
                             " does not match output " + shape_string(expected));
    switch (layer.spec.kind) {
    case LayerKind::conv2d: return conv_backward(layer, cache, upstream);
    case LayerKind::max_pool: return pool_backward(cache, upstream);
    case LayerKind::gru: return gru_backward(layer, cache, upstream);
    case LayerKind::dense:
    case LayerKind::softmax_head: return dense_backward(layer, cache, upstream);
    case LayerKind::attention: return attention_layer_backward(layer, cache, upstream);
    }
    throw ContractError("unknown layer kind");
}

template struct Layer<float>;
template struct Layer<double>;
template Layer<float> make_layer<float>(const LayerSpec&, Rng&);
template Layer<double> make_layer<double>(const LayerSpec&, Rng&);
template Layer<float> make_zero_layer<float>(const LayerSpec&);
template Layer<double> make_zero_layer<double>(const LayerSpec&);
template ForwardResult<float> forward<float>(const Layer<float>&, const BasicTensor<float>&);
template ForwardResult<double> forward<double>(const Layer<double>&, const BasicTensor<double>&);
template BackwardResult<float> backward<float>(const Layer<float>&, const LayerCache<float>&, const BasicTensor<float>&);
template BackwardResult<double> backward<double>(const Layer<double>&, const LayerCache<double>&,
                                                 const BasicTensor<double>&);

} // namespace knnsid::nn
