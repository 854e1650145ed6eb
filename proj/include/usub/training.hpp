#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "usub/model.hpp"
#include "usub/tasks.hpp"

namespace usub {

struct TrainConfig {
    double step_size = 0.05;
    int batch_size = 32;
    int max_epochs_per_layer = 30;
    int pretrain_max_epochs = 120;
    int patience = 3;
    int k = 8;

    enum class IdentificationMode { Aligned, PaperLiteral };
    IdentificationMode identification_mode = IdentificationMode::Aligned;

    // Which attention projections get bottlenecks during identification.
    std::vector<AttnRole> adapted_roles{AttnRole::Query, AttnRole::Key, AttnRole::Value,
                                        AttnRole::Output};

    double clip_norm = 1.0;
    int ga_eval_every = 2;  // validation-accuracy cadence for gradient ascent
    std::uint64_t seed = 0;

    void validate() const;
};

struct LayerIdentStats {
    int layer = 0;
    int epochs = 0;
    double initial_val_loss = 0.0;
    double best_val_loss = 0.0;
    bool improved = false;  // false means a warning: no val improvement at all
};

// Per-layer, per-role rank-k task matrices plus the factors they came from.
struct TaskSubspace {
    std::string task;
    int k = 0;
    TrainConfig::IdentificationMode mode = TrainConfig::IdentificationMode::Aligned;
    std::uint64_t seed = 0;
    std::vector<AttnRole> roles;

    struct Entry {
        AttnRole role;
        Matrix t;  // dense f*g, n x n
        Matrix f;  // n x k
        Matrix g;  // k x n
    };
    std::vector<std::vector<Entry>> layers;  // [layer][role index]

    std::vector<LayerIdentStats> stats;
    std::vector<int> layer_order;
};

// Joint training on an interleaved task mixture until the pooled validation
// loss stops improving (same patience rule as identification). A zero epoch
// budget returns the initial weights untouched.
ModelWeights pretrain(const TrainConfig& config, const std::vector<TaskDataset>& mixture,
                      const ModelConfig& model_config, std::ostream* log = nullptr);

// The stage-0 model identification trains on: attention projections replaced
// by fresh rank-k bottlenecks; everything else copied from the base (aligned
// mode) or randomized (paper-literal mode).
ModelWeights identification_model(const ModelWeights& base, const TrainConfig& config);

// Sequential layer-by-layer subspace identification: unfreeze one layer's
// bottlenecks at a time, train to best validation loss, restore that
// snapshot, refreeze, move on. Layers run strictly first to last.
TaskSubspace identify_subspace(const ModelWeights& base, const TaskDataset& task,
                               const TrainConfig& config, std::ostream* log = nullptr);

// LoRA-style comparator: rank-k adapters on top of the frozen base, all
// layers trained together with the usual patience rule. The adapter product
// starts at zero so training starts from base behavior.
ModelWeights finetune_adapter(const ModelWeights& base, const TaskDataset& task,
                              const TrainConfig& config, std::ostream* log = nullptr);

struct GaResult {
    ModelWeights weights;
    bool converged = false;
    int steps = 0;
    double final_val_accuracy = 0.0;
};

// Gradient-ascent unlearning baseline: ascend the language-modeling loss on
// the target task over all parameters until validation accuracy falls to
// stop_accuracy or the step budget runs out.
GaResult gradient_ascent_unlearn(const ModelWeights& base, const TaskDataset& target,
                                 double stop_accuracy, int max_steps, const TrainConfig& config,
                                 std::ostream* log = nullptr);

}  // namespace usub
