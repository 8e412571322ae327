#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "knnsid/layers.hpp"

namespace knnsid::nn {

/// Ordered stack of layers. The final layer's output is read as class
/// logits.
template <class T>
struct Network {
    std::vector<Layer<T>> layers;
    std::uint64_t rng_seed = 0;

    std::size_t parameter_count() const;
    std::size_t trainable_parameter_count() const;

    template <class U>
    Network<U> cast() const {
        Network<U> out;
        out.rng_seed = rng_seed;
        for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
        return out;
    }
};

using ModelParams = Network<float>;

/// Per layer, per weight tensor.
template <class T>
using Gradients = std::vector<std::vector<BasicTensor<T>>>;

template <class T>
Gradients<T> zero_gradients(const Network<T>& net);

/// Stable softmax along the last axis. Throws NumericError on non-finite
/// logits.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

template <class T>
struct LossResult {
    T loss{};
    BasicTensor<T> logit_grad; // probs - one_hot(label)
};

/// Cross-entropy of a probability vector against a label, with the combined
/// softmax + cross-entropy gradient with respect to the logits.
template <class T>
LossResult<T> cross_entropy(const BasicTensor<T>& probs, std::size_t label);

template <class T>
struct Trace {
    std::vector<BasicTensor<T>> outputs;
    std::vector<LayerCache<T>> caches;
};

/// Runs layers [0, stop) and keeps every output and cache.
template <class T>
Trace<T> forward_trace(const Network<T>& net, const BasicTensor<T>& input, std::size_t stop);

template <class T>
BasicTensor<T> forward_output(const Network<T>& net, const BasicTensor<T>& input, std::size_t stop);

template <class T>
struct LossAndGradients {
    T loss{};
    BasicTensor<T> probs;
    Gradients<T> grads;
};

template <class T>
LossAndGradients<T> loss_and_gradients(const Network<T>& net, const BasicTensor<T>& input, std::size_t label);

template <class T>
T loss_only(const Network<T>& net, const BasicTensor<T>& input, std::size_t label);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct AdamState {
    Gradients<T> m;
    Gradients<T> v;
    std::uint64_t step = 0;

    static AdamState init(const Network<T>& net) { return {zero_gradients(net), zero_gradients(net), 0}; }
};

/// One bias-corrected Adam update. Frozen layers are skipped entirely.
template <class T>
void adam_step(Network<T>& net, const Gradients<T>& grads, AdamState<T>& state, const AdamConfig& cfg);

struct GradCheckOptions {
    double epsilon = 1e-4;
    /// Test hook applied to the analytic gradients before comparison.
    std::function<void(Gradients<double>&)> tamper;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_layer = 0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

/// Compares analytic gradients against central finite differences for every
/// trainable scalar, in double precision. The error for one scalar is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <class T>
GradCheckReport grad_check(const Network<T>& model, const BasicTensor<T>& input, std::size_t label,
                           const GradCheckOptions& options = {});

/// Two convs -> GRU -> attention -> softmax head, small enough for
/// exhaustive finite differences. Input shape [1, 6, 4], three classes.
Network<double> build_toy_network(std::uint64_t seed);
BasicTensor<double> toy_input(std::uint64_t seed);

// Model file "TKNM": magic, version u32, layer count u32, then per layer:
// kind u8, spec-integer count u8, spec integers u32..., frozen u8, and each
// weight tensor as rank u8, dims u32..., f32 data. All little-endian.
inline constexpr std::uint32_t kModelFormatVersion = 1;

void save_model(std::ostream& os, const Network<float>& net);
void save_model(const std::filesystem::path& path, const Network<float>& net);
Network<float> load_model(std::istream& is);
Network<float> load_model(const std::filesystem::path& path);

/// Layer sizes of the attention-CRNN extractor.
struct ArchitectureConfig {
    int n_mels = 64;
    int block_frames = 32;
    std::vector<int> conv_channels{16, 32, 32, 32};
    int kernel = 3;
    /// (time, mel) pool after each conv layer.
    std::vector<std::pair<int, int>> pools{{2, 2}, {2, 4}, {1, 4}, {1, 2}};
    int gru_hidden = 32;
    int attn_dim = 32;

    bool operator==(const ArchitectureConfig&) const = default;
};

/// conv/pool stack -> GRU -> attention -> softmax head.
Network<float> build_attention_crnn(const ArchitectureConfig& arch, int n_classes, std::uint64_t seed);

/// Index of the attention layer, whose output is the block embedding.
template <class T>
std::size_t embedding_layer(const Network<T>& net);

} // namespace knnsid::nn
