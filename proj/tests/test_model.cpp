#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "usub/model.hpp"

using namespace usub;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.context_len = 16;
    return cfg;
}

std::vector<Example> tiny_batch() {
    return {{{1, 3, 5}, {2, 4}}, {{0, 7}, {9, 1, 8}}};
}

// Central finite differences against every analytic gradient entry.
void check_gradients(ModelWeights& w, const std::vector<Example>& batch, const FreezeMask& mask) {
    const double eps = 1e-4;
    const LossAndGrads lg = loss_and_grads(w, batch, mask);
    for (ParamGroupRef& group : w.param_groups()) {
        if (mask.is_frozen(group.name)) {
            CHECK(lg.grads.groups.find(group.name) == lg.grads.groups.end());
            continue;
        }
        auto it = lg.grads.groups.find(group.name);
        REQUIRE(it != lg.grads.groups.end());
        REQUIRE(it->second.size() == group.tensors.size());
        for (std::size_t ti = 0; ti < group.tensors.size(); ++ti) {
            Matrix& tensor = *group.tensors[ti];
            const Matrix& analytic = it->second[ti];
            REQUIRE(analytic.same_shape(tensor));
            for (std::size_t i = 0; i < tensor.size(); ++i) {
                const double saved = tensor.data()[i];
                tensor.data()[i] = saved + eps;
                const double lp = batch_loss(w, batch);
                tensor.data()[i] = saved - eps;
                const double lm = batch_loss(w, batch);
                tensor.data()[i] = saved;
                const double fd = (lp - lm) / (2.0 * eps);
                const double a = analytic.data()[i];
                const double denom = std::max({1e-3, std::abs(a), std::abs(fd)});
                CHECK_MESSAGE(std::abs(a - fd) / denom < 1e-4,
                              group.name << " tensor " << ti << " entry " << i << " analytic=" << a
                                         << " fd=" << fd);
            }
        }
    }
}

// Independent scalar re-implementation of the forward pass for a one-layer,
// one-head model; shares no code with the library.
std::vector<std::vector<double>> oracle_forward(const ModelWeights& w,
                                                const std::vector<int>& toks) {
    const int d = w.config.d_model, v = w.config.vocab_size, ff = w.config.d_ff;
    const int n = static_cast<int>(toks.size());
    const double eps = 1e-5;

    auto ln = [&](const std::vector<std::vector<double>>& x, const Matrix& gain,
                  const Matrix& bias) {
        std::vector<std::vector<double>> y(n, std::vector<double>(x[0].size()));
        for (int t = 0; t < n; ++t) {
            double mu = 0;
            for (double xi : x[t]) mu += xi;
            mu /= x[t].size();
            double var = 0;
            for (double xi : x[t]) var += (xi - mu) * (xi - mu);
            var /= x[t].size();
            for (std::size_t i = 0; i < x[t].size(); ++i) {
                y[t][i] = gain(0, i) * (x[t][i] - mu) / std::sqrt(var + eps) + bias(0, i);
            }
        }
        return y;
    };
    auto mul = [&](const std::vector<std::vector<double>>& x, const Matrix& m) {
        std::vector<std::vector<double>> y(n, std::vector<double>(m.cols(), 0.0));
        for (int t = 0; t < n; ++t)
            for (std::size_t j = 0; j < m.cols(); ++j)
                for (std::size_t p = 0; p < m.rows(); ++p) y[t][j] += x[t][p] * m(p, j);
        return y;
    };

    std::vector<std::vector<double>> x(n, std::vector<double>(d));
    for (int t = 0; t < n; ++t) {
        for (int i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
            x[t][i] = std::sin(t * freq);
            if (i + 1 < d) x[t][i + 1] = std::cos(t * freq);
        }
        for (int i = 0; i < d; ++i) x[t][i] += w.embed(toks[t], i);
    }

    const LayerWeights& lw = w.layers[0];
    auto a = ln(x, lw.ln1_gain, lw.ln1_bias);
    auto q = mul(a, lw.wq.effective());
    auto k = mul(a, lw.wk.effective());
    auto val = mul(a, lw.wv.effective());
    std::vector<std::vector<double>> att_out(n, std::vector<double>(d, 0.0));
    for (int t = 0; t < n; ++t) {
        std::vector<double> scores(t + 1);
        double mx = -1e300;
        for (int s = 0; s <= t; ++s) {
            double sc = 0;
            for (int i = 0; i < d; ++i) sc += q[t][i] * k[s][i];
            scores[s] = sc / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, scores[s]);
        }
        double z = 0;
        for (int s = 0; s <= t; ++s) z += std::exp(scores[s] - mx);
        for (int s = 0; s <= t; ++s) {
            const double p = std::exp(scores[s] - mx) / z;
            for (int i = 0; i < d; ++i) att_out[t][i] += p * val[s][i];
        }
    }
    auto proj = mul(att_out, lw.wo.effective());
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < d; ++i) x[t][i] += proj[t][i];

    auto m = ln(x, lw.ln2_gain, lw.ln2_bias);
    auto f1 = mul(m, lw.ff1_w);
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < ff; ++i) {
            const double z = f1[t][i] + lw.ff1_b(0, i);
            f1[t][i] = 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (z + 0.044715 * z * z * z)));
        }
    auto f2 = mul(f1, lw.ff2_w);
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < d; ++i) x[t][i] += f2[t][i] + lw.ff2_b(0, i);

    auto xf = ln(x, w.lnf_gain, w.lnf_bias);
    auto logits = mul(xf, w.head);
    (void)v;
    return logits;
}

}  // namespace

TEST_CASE("init_random is deterministic per seed") {
    ModelConfig cfg;
    const ModelWeights a = init_random(cfg, 42);
    const ModelWeights b = init_random(cfg, 42);
    CHECK(a.embed == b.embed);
    CHECK(a.head == b.head);
    for (int l = 0; l < cfg.n_layers; ++l) {
        CHECK(a.layers[l].wq.w == b.layers[l].wq.w);
        CHECK(a.layers[l].ff1_w == b.layers[l].ff1_w);
    }
    const ModelWeights c = init_random(cfg, 43);
    CHECK(frobenius_norm(a.embed - c.embed) > 0.0);
}

TEST_CASE("init_random scale: std of a 64x64 block near 1/sqrt(64)") {
    ModelConfig cfg;
    const ModelWeights w = init_random(cfg, 7);
    const Matrix& block = w.layers[0].wq.w;
    REQUIRE(block.rows() == 64);
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < block.size(); ++i) {
        sum += block.data()[i];
        sq += block.data()[i] * block.data()[i];
    }
    const double mean = sum / block.size();
    const double stddev = std::sqrt(sq / block.size() - mean * mean);
    const double want = 1.0 / 8.0;
    CHECK(stddev > 0.8 * want);
    CHECK(stddev < 1.2 * want);
}

TEST_CASE("config validation") {
    ModelConfig bad;
    bad.d_model = 10;
    bad.n_heads = 4;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
    bad = ModelConfig{};
    bad.n_layers = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
}

TEST_CASE("forward is causal") {
    const ModelWeights w = init_random(tiny_config(), 3);
    const std::vector<int> t1{4, 9, 2, 7, 1};
    const std::vector<int> t2{4, 9, 2, 1, 7};  // future permuted
    const Matrix l1 = forward(w, t1);
    const Matrix l2 = forward(w, t2);
    for (int pos = 0; pos < 3; ++pos) {
        for (int i = 0; i < 32; ++i) CHECK(l1(pos, i) == l2(pos, i));
    }
}

TEST_CASE("forward single-token shape") {
    const ModelWeights w = init_random(tiny_config(), 3);
    const std::vector<int> toks{5};
    const Matrix l = forward(w, toks);
    CHECK(l.rows() == 1);
    CHECK(l.cols() == 32);
}

TEST_CASE("forward rejects out-of-range tokens") {
    const ModelWeights w = init_random(tiny_config(), 3);
    const std::vector<int> toks{5, 32};
    CHECK_THROWS_AS(forward(w, toks), InvalidInput);
}

TEST_CASE("forward matches independent oracle on 1-layer 1-head d=4") {
    ModelConfig cfg;
    cfg.d_model = 4;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.d_ff = 8;
    cfg.context_len = 8;
    const ModelWeights w = init_random(cfg, 11);
    const std::vector<int> toks{3, 17, 8};
    const Matrix got = forward(w, toks);
    const auto want = oracle_forward(w, toks);
    for (int t = 0; t < 3; ++t) {
        for (int i = 0; i < cfg.vocab_size; ++i) {
            CHECK(got(t, i) == doctest::Approx(want[t][i]).epsilon(1e-10));
        }
    }
}

TEST_CASE("uniform-logit model has loss ln(vocab)") {
    ModelWeights w = init_random(tiny_config(), 5);
    w.head = Matrix(8, 32);  // zero head -> uniform logits
    const auto batch = tiny_batch();
    const double loss = batch_loss(w, batch);
    CHECK(loss == doctest::Approx(std::log(32.0)).epsilon(1e-12));
}

TEST_CASE("all-frozen mask yields empty gradients and finite loss") {
    const ModelWeights w = init_random(tiny_config(), 5);
    const auto batch = tiny_batch();
    const LossAndGrads lg = loss_and_grads(w, batch, FreezeMask::all_frozen(w));
    CHECK(lg.grads.groups.empty());
    CHECK(std::isfinite(lg.loss));
}

TEST_CASE("empty batch rejected") {
    const ModelWeights w = init_random(tiny_config(), 5);
    const std::vector<Example> batch;
    CHECK_THROWS_AS(loss_and_grads(w, batch, FreezeMask::all_unfrozen(w)), InvalidInput);
}

TEST_CASE("analytic gradients match finite differences (dense groups)") {
    ModelWeights w = init_random(tiny_config(), 9);
    check_gradients(w, tiny_batch(), FreezeMask::all_unfrozen(w));
}

TEST_CASE("analytic gradients match finite differences (bottleneck and adapter)") {
    ModelWeights w = init_random(tiny_config(), 10);
    std::mt19937_64 rng(99);
    w.layers[0].wq.mode = AttnParam::Mode::Bottleneck;
    w.layers[0].wq.bn = random_bottleneck(8, 3, rng);
    w.layers[1].wv.mode = AttnParam::Mode::Bottleneck;
    w.layers[1].wv.bn = random_bottleneck(8, 2, rng);
    w.layers[0].wo.mode = AttnParam::Mode::DenseWithAdapter;
    w.layers[0].wo.bn = random_bottleneck(8, 3, rng);
    check_gradients(w, tiny_batch(), FreezeMask::all_unfrozen(w));
}

TEST_CASE("partial freeze returns gradients only for unfrozen groups") {
    ModelWeights w = init_random(tiny_config(), 12);
    FreezeMask mask = FreezeMask::all_frozen(w);
    mask.set("l1.wq", false);
    mask.set("head", false);
    const LossAndGrads lg = loss_and_grads(w, tiny_batch(), mask);
    CHECK(lg.grads.groups.size() == 2);
    CHECK(lg.grads.groups.count("l1.wq") == 1);
    CHECK(lg.grads.groups.count("head") == 1);
    check_gradients(w, tiny_batch(), mask);
}

TEST_CASE("sgd_step leaves frozen groups bit-identical") {
    ModelWeights w = init_random(tiny_config(), 13);
    const ModelWeights before = w;
    FreezeMask mask = FreezeMask::all_frozen(w);
    mask.set("l0.wk", false);
    const LossAndGrads lg = loss_and_grads(w, tiny_batch(), mask);
    sgd_step(w, lg.grads, 0.1);
    CHECK(w.layers[0].wq.w == before.layers[0].wq.w);
    CHECK(w.embed == before.embed);
    CHECK(w.head == before.head);
    CHECK(w.layers[1].wk.w == before.layers[1].wk.w);
    CHECK(frobenius_norm(w.layers[0].wk.w - before.layers[0].wk.w) > 0.0);
}

TEST_CASE("bottleneck model matches dense model with W = F*G") {
    ModelConfig cfg = tiny_config();
    ModelWeights dense = init_random(cfg, 21);
    ModelWeights bottled = dense;
    std::mt19937_64 rng(7);
    const BottleneckPair bn = random_bottleneck(cfg.d_model, 3, rng);
    bottled.layers[0].wq.mode = AttnParam::Mode::Bottleneck;
    bottled.layers[0].wq.bn = bn;
    dense.layers[0].wq.w = bn.product();
    const std::vector<int> toks{2, 14, 30, 6};
    const Matrix a = forward(dense, toks);
    const Matrix b = forward(bottled, toks);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("apply_delta with zero delta is identity") {
    const ModelWeights w = init_random(tiny_config(), 30);
    const ModelWeights out = apply_delta(w, 0, AttnRole::Query, Matrix(8, 8), 1);
    CHECK(out.layers[0].wq.w == w.layers[0].wq.w);
}

TEST_CASE("apply_delta inverse pair restores weights") {
    const ModelWeights w = init_random(tiny_config(), 31);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> dist(0.0, 0.1);
    Matrix delta(8, 8);
    for (std::size_t i = 0; i < delta.size(); ++i) delta.data()[i] = dist(rng);
    const ModelWeights forward_applied = apply_delta(w, 1, AttnRole::Value, delta, 1);
    const ModelWeights back = apply_delta(forward_applied, 1, AttnRole::Value, delta, -1);
    CHECK(frobenius_norm(back.layers[1].wv.w - w.layers[1].wv.w) <
          1e-15 * (1.0 + frobenius_norm(w.layers[1].wv.w)));
}

TEST_CASE("apply_delta matches a manually edited copy") {
    const ModelWeights w = init_random(tiny_config(), 32);
    Matrix delta(8, 8);
    delta(2, 5) = 0.3;
    delta(7, 0) = -0.1;
    const ModelWeights via_op = apply_delta(w, 0, AttnRole::Output, delta, -1);
    ModelWeights manual = w;
    manual.layers[0].wo.w -= delta;
    const std::vector<int> toks{1, 2, 3, 4};
    const Matrix a = forward(via_op, toks);
    const Matrix b = forward(manual, toks);
    CHECK(a == b);
}

TEST_CASE("apply_delta rejects bottleneck targets") {
    ModelWeights w = init_random(tiny_config(), 33);
    std::mt19937_64 rng(5);
    w.layers[0].wq.mode = AttnParam::Mode::Bottleneck;
    w.layers[0].wq.bn = random_bottleneck(8, 2, rng);
    CHECK_THROWS_AS(apply_delta(w, 0, AttnRole::Query, Matrix(8, 8), 1), InvalidInput);
}

TEST_CASE("loss and gradients are bit-identical across thread counts") {
    const ModelWeights w = init_random(tiny_config(), 40);
    std::vector<Example> batch;
    std::mt19937_64 rng(8);
    for (int i = 0; i < 20; ++i) {
        Example ex;
        for (int j = 0; j < 4; ++j) ex.x.push_back(static_cast<int>(rng() % 32));
        for (int j = 0; j < 3; ++j) ex.y.push_back(static_cast<int>(rng() % 32));
        batch.push_back(ex);
    }
    set_threads(1);
    const LossAndGrads a = loss_and_grads(w, batch, FreezeMask::all_unfrozen(w));
    set_threads(4);
    const LossAndGrads b = loss_and_grads(w, batch, FreezeMask::all_unfrozen(w));
    set_threads(2);
    CHECK(a.loss == b.loss);
    for (const auto& [name, tensors] : a.grads.groups) {
        const auto& other = b.grads.groups.at(name);
        for (std::size_t i = 0; i < tensors.size(); ++i) CHECK(tensors[i] == other[i]);
    }
}

TEST_CASE("greedy_decode breaks ties toward the lowest token id") {
    ModelWeights w = init_random(tiny_config(), 50);
    w.head = Matrix(8, 32);  // all logits equal -> argmax must pick id 0
    const std::vector<int> prompt{3, 1};
    const std::vector<int> out = greedy_decode(w, prompt, 2);
    CHECK(out == std::vector<int>{0, 0});
}
