#include <doctest.h>

#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "knnsid/errors.hpp"
#include "knnsid/network.hpp"

using namespace knnsid;
using namespace knnsid::nn;

namespace {

BasicTensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    BasicTensor<double> t(shape);
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

double dot(const BasicTensor<double>& a, const BasicTensor<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}); }

// Central differences of L(x, W) = <g, forward(x)> against backward().
double layer_fd_error(Layer<double> layer, BasicTensor<double> x, Rng& rng) {
    const auto fwd = forward(layer, x);
    const auto g = random_tensor(fwd.output.shape(), rng);
    const auto bwd = backward(layer, fwd.cache, g);
    const double eps = 1e-5;
    double worst = 0.0;
    auto loss = [&] { return dot(g, forward(layer, x).output); };
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = x[i];
        x[i] = s + eps;
        const double p = loss();
        x[i] = s - eps;
        const double m = loss();
        x[i] = s;
        worst = std::max(worst, rel_err(bwd.input_grad[i], (p - m) / (2 * eps)));
    }
    for (std::size_t t = 0; t < layer.weights.size(); ++t)
        for (std::size_t i = 0; i < layer.weights[t].size(); ++i) {
            double& w = layer.weights[t][i];
            const double s = w;
            w = s + eps;
            const double p = loss();
            w = s - eps;
            const double m = loss();
            w = s;
            worst = std::max(worst, rel_err(bwd.weight_grads[t][i], (p - m) / (2 * eps)));
        }
    return worst;
}

Layer<double> randomised(const LayerSpec& spec, Rng& rng) {
    auto l = make_layer<double>(spec, rng);
    for (auto& w : l.weights)
        for (double& v : w.data()) v += 0.1 * rng.normal();
    return l;
}

} // namespace

TEST_CASE("tensor shape contracts") {
    CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), DimensionError);
    Tensor t({2, 3}, 1.5f);
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.reshaped({3, 2}).dim(0) == 3);
    CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
    t[4] = std::nanf("");
    CHECK_FALSE(t.all_finite());
    CHECK(shape_string({1, 32, 64}) == "[1, 32, 64]");
}

TEST_CASE("identity dense layer passes input through") {
    auto l = make_zero_layer<double>(LayerSpec::dense(4, 4));
    for (int i = 0; i < 4; ++i) l.weights[0][i * 4 + i] = 1.0;
    BasicTensor<double> x({4}, std::vector<double>{1.5, -2, 0.25, 7});
    CHECK(forward(l, x).output.data()[2] == 0.25);
    CHECK(forward(l, x).output == x);
}

TEST_CASE("1x1 unit conv kernel is the identity") {
    auto l = make_zero_layer<double>(LayerSpec::conv2d(1, 1, 1, 1, Activation::linear));
    l.weights[0][0] = 1.0;
    Rng rng(1);
    const auto x = random_tensor({1, 5, 7}, rng);
    CHECK(forward(l, x).output == x);
}

TEST_CASE("zero-weight GRU keeps a zero hidden state") {
    auto l = make_zero_layer<double>(LayerSpec::gru(3, 5));
    Rng rng(2);
    const auto y = forward(l, random_tensor({6, 3}, rng, 10.0)).output;
    CHECK(y.shape() == Shape{6, 5});
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("linear dense weight gradient is the outer product") {
    Rng rng(4);
    auto l = make_layer<double>(LayerSpec::dense(3, 2), rng);
    const auto x = random_tensor({3}, rng);
    const auto g = random_tensor({2}, rng);
    const auto fwd = forward(l, x);
    const auto b = backward(l, fwd.cache, g);
    for (std::size_t u = 0; u < 2; ++u) {
        for (std::size_t i = 0; i < 3; ++i) CHECK(b.weight_grads[0][u * 3 + i] == doctest::Approx(g[u] * x[i]));
        CHECK(b.weight_grads[1][u] == doctest::Approx(g[u]));
    }
}

TEST_CASE("every layer kind matches finite differences") {
    Rng rng(7);
    for (int trial = 0; trial < 3; ++trial) {
        CAPTURE(trial);
        CHECK(layer_fd_error(randomised(LayerSpec::conv2d(2, 3, 3, 3), rng), random_tensor({2, 4, 5}, rng), rng) < 1e-4);
        CHECK(layer_fd_error(randomised(LayerSpec::conv2d(1, 2, 3, 1, Activation::linear), rng), random_tensor({1, 4, 3}, rng), rng) < 1e-4);
        CHECK(layer_fd_error(randomised(LayerSpec::gru(4, 3), rng), random_tensor({5, 4}, rng), rng) < 1e-4);
        CHECK(layer_fd_error(randomised(LayerSpec::gru(6, 3), rng), random_tensor({2, 4, 3}, rng), rng) < 1e-4);
        CHECK(layer_fd_error(randomised(LayerSpec::dense(5, 4, Activation::elu), rng), random_tensor({5}, rng), rng) < 1e-4);
        CHECK(layer_fd_error(randomised(LayerSpec::softmax_head(5, 3), rng), random_tensor({5}, rng), rng) < 1e-4);
        CHECK(layer_fd_error(randomised(LayerSpec::attention(4, 3), rng), random_tensor({6, 4}, rng), rng) < 1e-4);
        // Max-pool: well-separated values keep every argmax stable under eps.
        BasicTensor<double> x({2, 4, 6});
        std::vector<double> vals(x.size());
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.1 * double(i);
        rng.shuffle(vals.begin(), vals.end());
        std::copy(vals.begin(), vals.end(), x.data().begin());
        CHECK(layer_fd_error(make_layer<double>(LayerSpec::max_pool(2, 3), rng), x, rng) < 1e-6);
    }
}

TEST_CASE("max-pool picks window maxima") {
    BasicTensor<double> x({1, 2, 4}, std::vector<double>{1, 5, 2, 0, 3, 4, 9, -1});
    const auto l = make_zero_layer<double>(LayerSpec::max_pool(2, 2));
    const auto y = forward(l, x).output;
    CHECK(y.shape() == Shape{1, 1, 2});
    CHECK(y[0] == 5);
    CHECK(y[1] == 9);
}

TEST_CASE("zero upstream gradient gives zero gradients") {
    Rng rng(9);
    for (const auto& spec : {LayerSpec::conv2d(1, 2, 3, 3), LayerSpec::gru(3, 2), LayerSpec::dense(3, 2, Activation::elu),
                             LayerSpec::attention(3, 2)}) {
        auto l = randomised(spec, rng);
        const Shape in = spec.kind == LayerKind::conv2d ? Shape{1, 3, 3}
                         : spec.kind == LayerKind::dense ? Shape{3}
                                                         : Shape{4, 3};
        const auto fwd = forward(l, random_tensor(in, rng));
        const auto b = backward(l, fwd.cache, BasicTensor<double>(fwd.output.shape(), 0.0));
        for (double v : b.input_grad.data()) CHECK(v == 0.0);
        for (const auto& w : b.weight_grads)
            for (double v : w.data()) CHECK(v == 0.0);
    }
}

TEST_CASE("shape mismatch names the layer and both shapes") {
    const auto l = make_zero_layer<float>(LayerSpec::conv2d(2, 4, 3, 3));
    try {
        forward(l, Tensor({3, 8, 8}));
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("conv2d") != std::string::npos);
        CHECK(msg.find("[3, 8, 8]") != std::string::npos);
    }
    CHECK_THROWS_AS(forward(make_zero_layer<float>(LayerSpec::dense(5, 2)), Tensor({4})), DimensionError);
    CHECK_THROWS_AS(LayerSpec::conv2d(1, 2, 2, 2).validate(), ConfigError);
    CHECK_THROWS_AS(LayerSpec::gru(0, 2).validate(), ConfigError);
}

TEST_CASE("backward rejects missing, mismatched and stale caches") {
    Rng rng(3);
    auto l = make_layer<float>(LayerSpec::dense(3, 2), rng);
    const auto fwd = forward(l, Tensor({3}, 1.0f));
    CHECK_THROWS_AS(backward(l, LayerCache<float>{}, Tensor({2}, 1.0f)), ContractError);
    auto other = make_layer<float>(LayerSpec::gru(3, 2), rng);
    CHECK_THROWS_AS(backward(other, fwd.cache, Tensor({2}, 1.0f)), ContractError);
    CHECK_THROWS_AS(backward(l, fwd.cache, Tensor({3}, 1.0f)), DimensionError);
    ++l.version;
    CHECK_THROWS_AS(backward(l, fwd.cache, Tensor({2}, 1.0f)), ContractError);
}

TEST_CASE("softmax") {
    const auto u = softmax(BasicTensor<double>({4}, 0.0));
    for (double v : u.data()) CHECK(v == 0.25);
    const auto big = softmax(BasicTensor<double>({2}, std::vector<double>{1000, 0}));
    // exp(-1000) underflows; the exact result is 1 - 5e-435.
    CHECK(std::abs(big[0] - 1.0) <= 1e-12);
    CHECK(std::abs(big[1]) <= 1e-12);
    Rng rng(5);
    const auto z = random_tensor({3, 6}, rng, 5.0);
    auto shifted = z;
    for (double& v : shifted.data()) v += 17.0;
    const auto p = softmax(z), q = softmax(shifted);
    for (std::size_t r = 0; r < 3; ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < 6; ++c) {
            sum += p[r * 6 + c];
            CHECK(p[r * 6 + c] > 0.0);
            CHECK(p[r * 6 + c] < 1.0);
            CHECK(p[r * 6 + c] == doctest::Approx(q[r * 6 + c]).epsilon(1e-12));
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
    CHECK_THROWS_AS(softmax(BasicTensor<double>({2}, std::vector<double>{1, INFINITY})), NumericError);
    CHECK_THROWS_AS(softmax(BasicTensor<double>({2}, std::vector<double>{NAN, 0})), NumericError);
}

TEST_CASE("cross entropy") {
    const auto one = cross_entropy(BasicTensor<double>({3}, std::vector<double>{0, 1, 0}), 1);
    CHECK(one.loss == 0.0);
    const auto uni = cross_entropy(BasicTensor<double>({5}, 0.2), 2);
    CHECK(uni.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    CHECK(uni.logit_grad[2] == doctest::Approx(-0.8));
    CHECK(uni.logit_grad[0] == doctest::Approx(0.2));
    CHECK_THROWS_AS(cross_entropy(BasicTensor<double>({3}, 1.0 / 3), 3), ContractError);

    Rng rng(8);
    auto z = random_tensor({6}, rng, 2.0);
    const auto g = cross_entropy(softmax(z), 4).logit_grad;
    for (std::size_t i = 0; i < 6; ++i) {
        const double s = z[i], eps = 1e-5;
        z[i] = s + eps;
        const double p = cross_entropy(softmax(z), 4).loss;
        z[i] = s - eps;
        const double m = cross_entropy(softmax(z), 4).loss;
        z[i] = s;
        CHECK(rel_err(g[i], (p - m) / (2 * eps)) < 1e-4);
    }
}

TEST_CASE("adam: single step, zero gradient and freezing") {
    Network<double> net;
    net.layers.push_back(make_zero_layer<double>(LayerSpec::dense(1, 1)));
    net.layers.push_back(make_zero_layer<double>(LayerSpec::dense(1, 1)));
    net.layers[0].weights[0][0] = 0.5;
    net.layers[1].weights[0][0] = -0.25;
    net.layers[1].frozen = true;
    AdamConfig cfg;
    auto state = AdamState<double>::init(net);
    auto grads = zero_gradients(net);
    const double g = 0.3;
    grads[0][0][0] = g;
    grads[1][0][0] = 2.0;
    adam_step(net, grads, state, cfg);
    // m_hat = g, v_hat = g^2 after one bias-corrected step.
    const double expected = 0.5 - cfg.lr * g / (std::sqrt(g * g) + cfg.eps);
    CHECK(net.layers[0].weights[0][0] == doctest::Approx(expected).epsilon(1e-15));
    CHECK(0.5 - net.layers[0].weights[0][0] == doctest::Approx(cfg.lr).epsilon(1e-6));
    CHECK(net.layers[0].weights[1][0] == 0.0);
    CHECK(net.layers[1].weights[0][0] == -0.25);

    Rng rng(1);
    auto toy = build_toy_network(3);
    const auto before = toy;
    auto st = AdamState<double>::init(toy);
    for (int i = 0; i < 5; ++i) adam_step(toy, zero_gradients(toy), st, cfg);
    for (std::size_t l = 0; l < toy.layers.size(); ++l) CHECK(toy.layers[l].weights == before.layers[l].weights);
}

TEST_CASE("frozen layers stay bit-identical through training") {
    auto net = build_toy_network(11);
    net.layers[0].frozen = true;
    net.layers[3].frozen = true;
    const auto before = net;
    auto st = AdamState<double>::init(net);
    const auto x = toy_input(11);
    for (int step = 0; step < 10; ++step) {
        const auto lg = loss_and_gradients(net, x, static_cast<std::size_t>(step % 3));
        adam_step(net, lg.grads, st, AdamConfig{});
    }
    CHECK(net.layers[0].weights == before.layers[0].weights);
    CHECK(net.layers[3].weights == before.layers[3].weights);
    CHECK_FALSE(net.layers[1].weights == before.layers[1].weights);
}

TEST_CASE("training trajectories are deterministic per seed") {
    auto run = [] {
        auto net = build_attention_crnn(ArchitectureConfig{}, 3, 5);
        auto st = AdamState<float>::init(net);
        Rng rng(5);
        for (int step = 0; step < 3; ++step) {
            Tensor x({1, 32, 64});
            for (float& v : x.data()) v = static_cast<float>(rng.normal());
            const auto lg = loss_and_gradients(net, x, static_cast<std::size_t>(step % 3));
            adam_step(net, lg.grads, st, AdamConfig{});
        }
        return net;
    };
    const auto a = run(), b = run();
    for (std::size_t l = 0; l < a.layers.size(); ++l) CHECK(a.layers[l].weights == b.layers[l].weights);
}

TEST_CASE("gradient check on the toy network and its controls") {
    const auto net = build_toy_network(7);
    const auto x = toy_input(7);
    const auto rep = grad_check(net, x, 1);
    CHECK(rep.max_relative_error < 1e-4);
    CHECK(rep.checked > 100);

    Network<double> linear;
    Rng rng(7);
    linear.layers.push_back(make_layer<double>(LayerSpec::dense(4, 3), rng));
    linear.layers.push_back(make_layer<double>(LayerSpec::softmax_head(3, 2), rng));
    for (auto& l : linear.layers)
        for (double& v : l.weights[1].data()) v = 0.1 * rng.normal();
    const auto x2 = BasicTensor<double>({4}, std::vector<double>{0.3, -1.2, 0.8, 0.5});
    GradCheckOptions fine;
    fine.epsilon = 1e-6;
    CHECK(grad_check(linear, x2, 0, fine).max_relative_error < 1e-7);

    GradCheckOptions bad;
    bad.tamper = [](Gradients<double>& g) { g[2][0][1] *= 1.5; };
    CHECK(grad_check(net, x, 1, bad).max_relative_error > 1e-2);
}

TEST_CASE("attention CRNN shapes") {
    const auto net = build_attention_crnn(ArchitectureConfig{}, 5, 7);
    Tensor x({1, 32, 64}, 0.5f);
    const auto logits = forward_output(net, x, net.layers.size());
    CHECK(logits.shape() == Shape{5});
    const auto emb = forward_output(net, x, embedding_layer(net) + 1);
    CHECK(emb.shape() == Shape{32});
    CHECK_THROWS_AS(build_attention_crnn(ArchitectureConfig{}, 1, 7), ConfigError);
    ArchitectureConfig bad;
    bad.pools[1] = {3, 4};
    CHECK_THROWS_AS(build_attention_crnn(bad, 4, 7), ConfigError);
}

TEST_CASE("model file round trip and corruption") {
    auto net = build_attention_crnn(ArchitectureConfig{}, 4, 9);
    net.layers[2].frozen = true;
    std::stringstream ss;
    save_model(ss, net);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "TKNM");
    std::stringstream in(bytes);
    const auto back = load_model(in);
    REQUIRE(back.layers.size() == net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        CHECK(back.layers[l].spec == net.layers[l].spec);
        CHECK(back.layers[l].frozen == net.layers[l].frozen);
        CHECK(back.layers[l].weights == net.layers[l].weights);
    }
    std::stringstream again;
    save_model(again, back);
    CHECK(again.str() == bytes);

    std::string magic = bytes;
    magic[0] = 'X';
    std::stringstream m(magic);
    CHECK_THROWS_AS(load_model(m), MagicMismatchError);

    std::string version = bytes;
    version[4] = 2;
    std::stringstream v(version);
    CHECK_THROWS_AS(load_model(v), VersionMismatchError);

    std::stringstream cut(bytes.substr(0, bytes.size() / 2));
    try {
        load_model(cut);
        FAIL("expected TruncatedFileError");
    } catch (const TruncatedFileError& e) {
        CHECK(std::string(e.what()).find("layer") != std::string::npos);
    }

    std::string tag = bytes;
    tag[12] = 42;
    std::stringstream t(tag);
    CHECK_THROWS_AS(load_model(t), FormatError);
}
