#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "usub/linalg.hpp"
#include "usub/matrix.hpp"

namespace usub {

struct ModelConfig {
    int vocab_size = 32;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 128;
    int context_len = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class AttnRole { Query, Key, Value, Output };

constexpr std::array<AttnRole, 4> kAllRoles{AttnRole::Query, AttnRole::Key, AttnRole::Value,
                                            AttnRole::Output};

const char* role_name(AttnRole r);
AttnRole role_from_name(const std::string& name);

// Rank-k factorization of an n x n projection, T = f * g.
struct BottleneckPair {
    Matrix f;  // n x k
    Matrix g;  // k x n
    int k = 0;

    Matrix product() const { return matmul(f, g); }
};

// One attention projection. Dense holds a plain weight matrix; Bottleneck
// replaces it entirely by f*g; DenseWithAdapter is dense plus a trainable
// f*g on top with the dense part held fixed (the fine-tune comparator).
struct AttnParam {
    enum class Mode { Dense, Bottleneck, DenseWithAdapter };

    Mode mode = Mode::Dense;
    Matrix w;
    std::optional<BottleneckPair> bn;

    Matrix effective() const;
};

struct LayerWeights {
    Matrix ln1_gain, ln1_bias;  // 1 x d
    AttnParam wq, wk, wv, wo;
    Matrix ln2_gain, ln2_bias;
    Matrix ff1_w, ff1_b;  // d x ff, 1 x ff
    Matrix ff2_w, ff2_b;  // ff x d, 1 x d

    AttnParam& role(AttnRole r);
    const AttnParam& role(AttnRole r) const;
};

// A named group of trainable tensors; the unit of freezing and gradient
// bookkeeping.
struct ParamGroupRef {
    std::string name;
    std::vector<Matrix*> tensors;
};

struct ModelWeights {
    ModelConfig config;
    Matrix embed;  // vocab x d
    std::vector<LayerWeights> layers;
    Matrix lnf_gain, lnf_bias;
    Matrix head;  // d x vocab

    // Canonical group enumeration: embed, per layer (ln1, wq, wk, wv, wo,
    // ln2, ff), lnf, head. Bottleneck-parameterized roles expose [f, g],
    // dense roles expose [w]; DenseWithAdapter exposes only the adapter.
    std::vector<ParamGroupRef> param_groups();
    std::vector<std::string> group_names() const;
};

// Per-group freeze flags. Defaults to everything frozen.
struct FreezeMask {
    std::map<std::string, bool> frozen;

    static FreezeMask all_frozen(const ModelWeights& w);
    static FreezeMask all_unfrozen(const ModelWeights& w);

    void set(const std::string& group, bool frozen_flag);
    bool is_frozen(const std::string& group) const;
};

// Gradients for unfrozen groups, tensor order matching param_groups().
struct Gradients {
    std::map<std::string, std::vector<Matrix>> groups;

    double global_norm() const;
    void scale(double c);
};

// A prompt/answer token pair; the training and evaluation record.
struct Example {
    std::vector<int> x;
    std::vector<int> y;
};

ModelWeights init_random(const ModelConfig& config, std::uint64_t seed);

BottleneckPair random_bottleneck(int n, int k, std::mt19937_64& rng);

// Logits per position, shape (len(tokens), vocab_size). Causal.
Matrix forward(const ModelWeights& weights, std::span<const int> tokens);

struct LossAndGrads {
    double loss = 0.0;
    Gradients grads;
};

// Mean negative log-likelihood over answer tokens only, with gradients for
// every unfrozen group. Throws InvalidInput on an empty batch.
LossAndGrads loss_and_grads(const ModelWeights& weights, std::span<const Example> batch,
                            const FreezeMask& mask);

// Loss only (no gradient work); same masking semantics over answer tokens.
double batch_loss(const ModelWeights& weights, std::span<const Example> batch);

// Returns weights with w + sign*delta at the addressed projection; rejects
// bottleneck-parameterized targets.
ModelWeights apply_delta(const ModelWeights& weights, int layer, AttnRole role,
                         const Matrix& delta, int sign);

// Greedy argmax continuation of the prompt, ties broken toward the lowest
// token id.
std::vector<int> greedy_decode(const ModelWeights& weights, std::span<const int> prompt,
                               std::size_t n_tokens);

// SGD step: w -= step_size * g for every group present in grads. Gradients
// are expected to be already clipped by the caller.
void sgd_step(ModelWeights& weights, const Gradients& grads, double step_size);

// Thread count for batched loss/grad and evaluation fan-out. Results are
// bit-identical for every setting because work is split into fixed chunks.
void set_threads(int n);
int threads();

}  // namespace usub
