#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "knnsid/random.hpp"
#include "knnsid/tensor.hpp"

namespace knnsid::nn {

/// Numeric tags double as the on-disk kind byte in the model file.
enum class LayerKind : std::uint8_t {
    conv2d = 1,
    max_pool = 2,
    gru = 3,
    dense = 4,
    softmax_head = 5,
    attention = 6,
};

enum class Activation : std::uint8_t { linear = 0, elu = 1 };

std::string to_string(LayerKind kind);

/// Dimensional description of one layer.
///
/// conv2d        [C, H, W] -> [out_channels, H, W], odd kernels, same padding
/// max_pool      [C, H, W] -> [C, H / pool_h, W / pool_w]
/// gru           [N, input] or [C, N, F] (input = C*F) -> [N, hidden]
/// dense         flattened [inputs] -> [units]
/// softmax_head  [inputs] -> [units] logits (softmax applied by the loss)
/// attention     [N, inputs] -> [inputs], additive scoring width `units`
struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    int in_channels = 0;
    int out_channels = 0;
    int kernel_h = 0;
    int kernel_w = 0;
    int pool_h = 0;
    int pool_w = 0;
    int inputs = 0;
    int units = 0;
    Activation activation = Activation::linear;

    static LayerSpec conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w,
                            Activation act = Activation::elu);
    static LayerSpec max_pool(int pool_h, int pool_w);
    static LayerSpec gru(int inputs, int hidden);
    static LayerSpec dense(int inputs, int units, Activation act = Activation::linear);
    static LayerSpec softmax_head(int inputs, int classes);
    static LayerSpec attention(int dim, int attn_dim);

    /// Throws ConfigError for non-positive or otherwise invalid dimensions.
    void validate() const;

    /// Integers written to the model file, in kind-specific order.
    std::vector<std::uint32_t> encode() const;
    static LayerSpec decode(LayerKind kind, const std::vector<std::uint32_t>& ints);

    /// Shapes of the weight tensors this spec owns, in storage order.
    std::vector<Shape> weight_shapes() const;

    bool operator==(const LayerSpec&) const = default;
};

template <class T>
struct Layer {
    LayerSpec spec;
    std::vector<BasicTensor<T>> weights;
    bool frozen = false;
    /// Bumped on every weight update; forward caches record it so a cache
    /// taken before an update is detected as stale.
    std::uint64_t version = 0;

    std::size_t parameter_count() const;

    template <class U>
    Layer<U> cast() const {
        Layer<U> out{spec, {}, frozen, version};
        for (const auto& w : weights) out.weights.push_back(w.template cast<U>());
        return out;
    }
};

template <class T>
struct LayerCache {
    LayerKind kind = LayerKind::dense;
    std::uint64_t version = 0;
    bool valid = false;
    Shape input_shape;
    std::vector<BasicTensor<T>> saved;
    std::vector<std::uint32_t> indices;
};

template <class T>
struct ForwardResult {
    BasicTensor<T> output;
    LayerCache<T> cache;
};

template <class T>
struct BackwardResult {
    BasicTensor<T> input_grad;
    std::vector<BasicTensor<T>> weight_grads;
};

/// Glorot-uniform weights, zero biases; GRU matrices uniform in
/// +-1/sqrt(hidden).
template <class T>
Layer<T> make_layer(const LayerSpec& spec, Rng& rng);

/// Zero-initialised weights of the right shapes.
template <class T>
Layer<T> make_zero_layer(const LayerSpec& spec);

/// Output shape for a given input shape. Throws DimensionError naming the
/// layer and both shapes on mismatch.
Shape output_shape(const LayerSpec& spec, const Shape& input);

template <class T>
ForwardResult<T> forward(const Layer<T>& layer, const BasicTensor<T>& input);

template <class T>
BackwardResult<T> backward(const Layer<T>& layer, const LayerCache<T>& cache, const BasicTensor<T>& upstream);

} // namespace knnsid::nn
