#include "knnsid/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "knnsid/binary_io.hpp"

namespace knnsid::nn {

template <class T>
std::size_t Network<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
}

template <class T>
std::size_t Network<T>::trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
        if (!l.frozen) n += l.parameter_count();
    return n;
}

template <class T>
Gradients<T> zero_gradients(const Network<T>& net) {
    Gradients<T> g(net.layers.size());
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        for (const auto& w : net.layers[i].weights) g[i].emplace_back(w.shape());
    return g;
}

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
    if (logits.empty()) throw DimensionError("softmax: empty input");
    if (!logits.all_finite()) throw NumericError("softmax: non-finite logits");
    const std::size_t width = logits.shape().back();
    BasicTensor<T> out(logits.shape());
    for (std::size_t base = 0; base < logits.size(); base += width) {
        const T* in = logits.ptr() + base;
        T* o = out.ptr() + base;
        const T peak = *std::max_element(in, in + width);
        T total{0};
        for (std::size_t k = 0; k < width; ++k) {
            o[k] = std::exp(in[k] - peak);
            total += o[k];
        }
        for (std::size_t k = 0; k < width; ++k) o[k] /= total;
    }
    return out;
}

template <class T>
LossResult<T> cross_entropy(const BasicTensor<T>& probs, std::size_t label) {
    if (label >= probs.size())
        throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                            std::to_string(probs.size()) + " classes");
    LossResult<T> r{-std::log(std::max(probs[label], std::numeric_limits<T>::min())), probs};
    r.logit_grad[label] -= T{1};
    return r;
}

template <class T>
Trace<T> forward_trace(const Network<T>& net, const BasicTensor<T>& input, std::size_t stop) {
    Trace<T> tr;
    stop = std::min(stop, net.layers.size());
    tr.outputs.reserve(stop);
    tr.caches.reserve(stop);
    const BasicTensor<T>* x = &input;
    for (std::size_t i = 0; i < stop; ++i) {
        auto r = forward(net.layers[i], *x);
        tr.outputs.push_back(std::move(r.output));
        tr.caches.push_back(std::move(r.cache));
        x = &tr.outputs.back();
    }
    return tr;
}

template <class T>
BasicTensor<T> forward_output(const Network<T>& net, const BasicTensor<T>& input, std::size_t stop) {
    stop = std::min(stop, net.layers.size());
    BasicTensor<T> x = input;
    for (std::size_t i = 0; i < stop; ++i) x = forward(net.layers[i], x).output;
    return x;
}

template <class T>
LossAndGradients<T> loss_and_gradients(const Network<T>& net, const BasicTensor<T>& input, std::size_t label) {
    if (net.layers.empty()) throw ContractError("loss_and_gradients: empty network");
    Trace<T> tr = forward_trace(net, input, net.layers.size());
    LossAndGradients<T> out;
    out.probs = softmax(tr.outputs.back());
    LossResult<T> ce = cross_entropy(out.probs, label);
    out.loss = ce.loss;
    out.grads.resize(net.layers.size());
    BasicTensor<T> upstream = ce.logit_grad.reshaped(tr.outputs.back().shape());
    for (std::size_t i = net.layers.size(); i-- > 0;) {
        auto b = backward(net.layers[i], tr.caches[i], upstream);
        out.grads[i] = std::move(b.weight_grads);
        upstream = std::move(b.input_grad);
    }
    return out;
}

template <class T>
T loss_only(const Network<T>& net, const BasicTensor<T>& input, std::size_t label) {
    const BasicTensor<T> logits = forward_output(net, input, net.layers.size());
    return cross_entropy(softmax(logits), label).loss;
}

template <class T>
void adam_step(Network<T>& net, const Gradients<T>& grads, AdamState<T>& state, const AdamConfig& cfg) {
    if (grads.size() != net.layers.size() || state.m.size() != net.layers.size())
        throw DimensionError("adam_step: gradient/moment layout does not match the network");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        Layer<T>& layer = net.layers[i];
        if (layer.frozen) continue;
        if (grads[i].size() != layer.weights.size())
            throw DimensionError("adam_step: layer " + std::to_string(i) + " gradient count mismatch");
        for (std::size_t t = 0; t < layer.weights.size(); ++t) {
            BasicTensor<T>& w = layer.weights[t];
            const BasicTensor<T>& g = grads[i][t];
            BasicTensor<T>& m = state.m[i][t];
            BasicTensor<T>& v = state.v[i][t];
            if (g.shape() != w.shape() || m.shape() != w.shape())
                throw DimensionError("adam_step: layer " + std::to_string(i) + " tensor " + std::to_string(t) +
                                     " shape mismatch");
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[k] = static_cast<T>(cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k]);
                v[k] = static_cast<T>(cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k]);
                const double m_hat = m[k] / c1;
                const double v_hat = v[k] / c2;
                w[k] = static_cast<T>(w[k] - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
            }
        }
        ++layer.version;
    }
}

template <class T>
GradCheckReport grad_check(const Network<T>& model, const BasicTensor<T>& input, std::size_t label,
                           const GradCheckOptions& options) {
    Network<double> net = model.template cast<double>();
    const BasicTensor<double> x = input.template cast<double>();
    Gradients<double> analytic = loss_and_gradients(net, x, label).grads;
    if (options.tamper) options.tamper(analytic);

    GradCheckReport report;
    const double eps = options.epsilon;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        if (net.layers[li].frozen) continue;
        for (std::size_t ti = 0; ti < net.layers[li].weights.size(); ++ti) {
            for (std::size_t k = 0; k < net.layers[li].weights[ti].size(); ++k) {
                double& w = net.layers[li].weights[ti][k];
                const double saved = w;
                w = saved + eps;
                const double plus = loss_only(net, x, label);
                w = saved - eps;
                const double minus = loss_only(net, x, label);
                w = saved;
                const double numeric = (plus - minus) / (2.0 * eps);
                const double a = analytic[li][ti][k];
                const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
                ++report.checked;
                if (err > report.max_relative_error) {
                    report.max_relative_error = err;
                    report.worst_layer = li;
                    report.worst_tensor = ti;
                    report.worst_index = k;
                }
            }
        }
    }
    return report;
}

void save_model(std::ostream& os, const Network<float>& net) {
    io::write_magic(os, "TKNM");
    io::write_u32(os, kModelFormatVersion);
    io::write_u32(os, static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& layer : net.layers) {
        io::write_u8(os, static_cast<std::uint8_t>(layer.spec.kind));
        const auto ints = layer.spec.encode();
        io::write_u8(os, static_cast<std::uint8_t>(ints.size()));
        for (auto v : ints) io::write_u32(os, v);
        io::write_u8(os, layer.frozen ? 1 : 0);
        for (const auto& w : layer.weights) {
            io::write_u8(os, static_cast<std::uint8_t>(w.rank()));
            for (auto d : w.shape()) io::write_u32(os, static_cast<std::uint32_t>(d));
            io::write_f32s(os, w.data());
        }
    }
}

void save_model(const std::filesystem::path& path, const Network<float>& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write model file " + path.string());
    save_model(os, net);
    if (!os) throw IoError("failed writing " + path.string());
}

Network<float> load_model(std::istream& is) {
    io::Reader r(is);
    r.expect_magic("TKNM", "model file");
    r.expect_version(kModelFormatVersion, "model file");
    const std::uint32_t n_layers = r.u32("model header");
    Network<float> net;
    for (std::uint32_t li = 0; li < n_layers; ++li) {
        const std::string where = "layer " + std::to_string(li);
        const auto kind_tag = r.u8(where);
        if (kind_tag < 1 || kind_tag > 6) throw FormatError(where + ": unknown kind tag " + std::to_string(kind_tag));
        const auto kind = static_cast<LayerKind>(kind_tag);
        const std::string named = where + " (" + to_string(kind) + ")";
        std::vector<std::uint32_t> ints(r.u8(named));
        for (auto& v : ints) v = r.u32(named);
        Layer<float> layer{LayerSpec::decode(kind, ints), {}, r.u8(named) != 0, 0};
        for (const auto& expected : layer.spec.weight_shapes()) {
            const auto rank = r.u8(named);
            Shape shape(rank);
            for (auto& d : shape) d = r.u32(named);
            if (shape != expected)
                throw FormatError(named + ": weight shape " + shape_string(shape) + " does not match spec " +
                                  shape_string(expected));
            BasicTensor<float> w(shape);
            r.f32s(w.data(), named);
            layer.weights.push_back(std::move(w));
        }
        net.layers.push_back(std::move(layer));
    }
    return net;
}

Network<float> load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open model file " + path.string());
    return load_model(is);
}

Network<float> build_attention_crnn(const ArchitectureConfig& arch, int n_classes, std::uint64_t seed) {
    if (arch.conv_channels.empty() || arch.conv_channels.size() != arch.pools.size())
        throw ConfigError("architecture: need one pool per conv layer");
    if (n_classes < 2) throw ConfigError("architecture: at least two classes required");
    Rng rng(seed);
    Network<float> net;
    net.rng_seed = seed;
    int channels = 1;
    int time = arch.block_frames;
    int mels = arch.n_mels;
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
        net.layers.push_back(
            make_layer<float>(LayerSpec::conv2d(channels, arch.conv_channels[i], arch.kernel, arch.kernel), rng));
        const auto [pt, pf] = arch.pools[i];
        if (pt <= 0 || pf <= 0 || time % pt != 0 || mels % pf != 0)
            throw ConfigError("architecture: pool " + std::to_string(i) + " does not divide the feature map");
        net.layers.push_back(make_layer<float>(LayerSpec::max_pool(pt, pf), rng));
        channels = arch.conv_channels[i];
        time /= pt;
        mels /= pf;
    }
    net.layers.push_back(make_layer<float>(LayerSpec::gru(channels * mels, arch.gru_hidden), rng));
    net.layers.push_back(make_layer<float>(LayerSpec::attention(arch.gru_hidden, arch.attn_dim), rng));
    net.layers.push_back(make_layer<float>(LayerSpec::softmax_head(arch.gru_hidden, n_classes), rng));
    return net;
}

Network<double> build_toy_network(std::uint64_t seed) {
    Rng rng(seed);
    Network<double> net;
    net.rng_seed = seed;
    net.layers.push_back(make_layer<double>(LayerSpec::conv2d(1, 2, 3, 3), rng));
    net.layers.push_back(make_layer<double>(LayerSpec::conv2d(2, 2, 3, 3), rng));
    net.layers.push_back(make_layer<double>(LayerSpec::gru(8, 4), rng));
    net.layers.push_back(make_layer<double>(LayerSpec::attention(4, 3), rng));
    net.layers.push_back(make_layer<double>(LayerSpec::softmax_head(4, 3), rng));
    // Nonzero biases so every parameter sees a generic point.
    for (auto& layer : net.layers)
        for (auto& w : layer.weights)
            for (double& v : w.data())
                if (v == 0.0) v = 0.1 * rng.normal();
    return net;
}

BasicTensor<double> toy_input(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 1));
    BasicTensor<double> x({1, 6, 4});
    for (double& v : x.data()) v = rng.normal();
    return x;
}

template <class T>
std::size_t embedding_layer(const Network<T>& net) {
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        if (net.layers[i].spec.kind == LayerKind::attention) return i;
    throw ContractError("network has no attention layer");
}

#define KNNSID_INSTANTIATE_NETWORK(T)                                                                     \
    template struct Network<T>;                                                                           \
    template Gradients<T> zero_gradients<T>(const Network<T>&);                                           \
    template BasicTensor<T> softmax<T>(const BasicTensor<T>&);                                            \
    template LossResult<T> cross_entropy<T>(const BasicTensor<T>&, std::size_t);                          \
    template Trace<T> forward_trace<T>(const Network<T>&, const BasicTensor<T>&, std::size_t);            \
    template BasicTensor<T> forward_output<T>(const Network<T>&, const BasicTensor<T>&, std::size_t);     \
    template LossAndGradients<T> loss_and_gradients<T>(const Network<T>&, const BasicTensor<T>&, std::size_t); \
    template T loss_only<T>(const Network<T>&, const BasicTensor<T>&, std::size_t);                       \
    template void adam_step<T>(Network<T>&, const Gradients<T>&, AdamState<T>&, const AdamConfig&);       \
    template GradCheckReport grad_check<T>(const Network<T>&, const BasicTensor<T>&, std::size_t,         \
                                           const GradCheckOptions&);                                      \
    template std::size_t embedding_layer<T>(const Network<T>&);

KNNSID_INSTANTIATE_NETWORK(float)
KNNSID_INSTANTIATE_NETWORK(double)

#undef KNNSID_INSTANTIATE_NETWORK

} // namespace knnsid::nn
