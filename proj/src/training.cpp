#include "usub/training.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>

#include <json.hpp>

#include "usub/error.hpp"

namespace usub {

void TrainConfig::validate() const {
    if (step_size <= 0.0) throw InvalidInput("train config: step_size must be positive");
    if (patience < 1) throw InvalidInput("train config: patience must be >= 1");
    if (k < 1) throw InvalidInput("train config: k must be >= 1");
    if (batch_size < 1) throw InvalidInput("train config: batch_size must be >= 1");
    if (adapted_roles.empty()) throw InvalidInput("train config: adapted_roles empty");
}

namespace {

void log_line(std::ostream* log, const nlohmann::json& j) {
    if (log != nullptr) *log << j.dump() << "\n";
}

void clip_gradients(Gradients& g, double clip_norm) {
    const double n = g.global_norm();
    if (n > clip_norm && n > 0.0) g.scale(clip_norm / n);
}

// One pass over train_set in shuffled batches; returns the mean batch loss.
double run_epoch(ModelWeights& w, std::vector<Example>& train_set, const FreezeMask& mask,
                 const TrainConfig& cfg, std::mt19937_64& rng) {
    std::shuffle(train_set.begin(), train_set.end(), rng);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t b = 0; b < train_set.size(); b += cfg.batch_size) {
        const std::size_t e = std::min(train_set.size(), b + cfg.batch_size);
        const std::span<const Example> batch(train_set.data() + b, e - b);
        LossAndGrads lg = loss_and_grads(w, batch, mask);
        clip_gradients(lg.grads, cfg.clip_norm);
        sgd_step(w, lg.grads, cfg.step_size);
        loss_sum += lg.loss;
        ++n_batches;
    }
    return n_batches == 0 ? 0.0 : loss_sum / static_cast<double>(n_batches);
}

std::vector<Example> pool_examples(const std::vector<TaskDataset>& mixture,
                                   std::vector<Example> TaskDataset::*split) {
    std::vector<Example> out;
    for (const TaskDataset& ds : mixture) {
        const std::vector<Example>& s = ds.*split;
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

}  // namespace

ModelWeights pretrain(const TrainConfig& config, const std::vector<TaskDataset>& mixture,
                      const ModelConfig& model_config, std::ostream* log) {
    config.validate();
    if (mixture.size() < 2) throw InvalidInput("pretrain: need at least two tasks in the mixture");

    ModelWeights w = init_random(model_config, config.seed);
    if (config.pretrain_max_epochs <= 0) return w;

    const FreezeMask mask = FreezeMask::all_unfrozen(w);
    std::vector<Example> train_set = pool_examples(mixture, &TaskDataset::train);
    const std::vector<Example> val_set = pool_examples(mixture, &TaskDataset::validation);
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

    ModelWeights best = w;
    double best_val = batch_loss(w, val_set);
    int stale = 0;
    for (int epoch = 0; epoch < config.pretrain_max_epochs; ++epoch) {
        double train_loss = 0.0;
        try {
            train_loss = run_epoch(w, train_set, mask, config, rng);
        } catch (const TrainingError& e) {
            throw TrainingError("pretrain diverged at epoch " + std::to_string(epoch),
                                e.step_log);
        }
        const double val_loss = batch_loss(w, val_set);
        log_line(log, {{"stage", "pretrain"},
                       {"epoch", epoch},
                       {"train_loss", train_loss},
                       {"val_loss", val_loss}});
        if (val_loss < best_val) {
            best_val = val_loss;
            best = w;
            stale = 0;
        } else if (++stale >= config.patience) {
            break;
        }
    }
    return best;
}

ModelWeights identification_model(const ModelWeights& base, const TrainConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed ^ 0x1234abcd5678ef00ULL);
    ModelWeights w = (config.identification_mode == TrainConfig::IdentificationMode::Aligned)
                         ? base
                         : init_random(base.config, config.seed);
    for (LayerWeights& lw : w.layers) {
        for (AttnRole r : config.adapted_roles) {
            AttnParam& p = lw.role(r);
            p.mode = AttnParam::Mode::Bottleneck;
            p.bn = random_bottleneck(base.config.d_model, config.k, rng);
            p.w = Matrix();  // replaced, not adapted
        }
    }
    return w;
}

namespace {

std::vector<AttnParam> snapshot_layer(const ModelWeights& w, int layer,
                                      const std::vector<AttnRole>& roles) {
    std::vector<AttnParam> snap;
    for (AttnRole r : roles) snap.push_back(w.layers[layer].role(r));
    return snap;
}

void restore_layer(ModelWeights& w, int layer, const std::vector<AttnRole>& roles,
                   const std::vector<AttnParam>& snap) {
    for (std::size_t i = 0; i < roles.size(); ++i) w.layers[layer].role(roles[i]) = snap[i];
}

}  // namespace

TaskSubspace identify_subspace(const ModelWeights& base, const TaskDataset& task,
                               const TrainConfig& config, std::ostream* log) {
    config.validate();
    ModelWeights w = identification_model(base, config);
    std::mt19937_64 rng(config.seed ^ 0x51ed2701dd11aa33ULL);
    std::vector<Example> train_set = task.train;
    const std::vector<Example>& val_set = task.validation;
    const std::string task_name = task_name_str(task.spec.name);

    TaskSubspace sub;
    sub.task = task_name;
    sub.k = config.k;
    sub.mode = config.identification_mode;
    sub.seed = config.seed;
    sub.roles = config.adapted_roles;

    for (int layer = 0; layer < base.config.n_layers; ++layer) {
        FreezeMask mask = FreezeMask::all_frozen(w);
        for (AttnRole r : config.adapted_roles) {
            mask.set("l" + std::to_string(layer) + "." + role_name(r), false);
        }

        const double initial_val = batch_loss(w, val_set);
        double best_val = initial_val;
        std::vector<AttnParam> best_snap = snapshot_layer(w, layer, config.adapted_roles);
        int stale = 0;
        int epochs_run = 0;
        for (int epoch = 0; epoch < config.max_epochs_per_layer; ++epoch) {
            double train_loss = 0.0;
            try {
                train_loss = run_epoch(w, train_set, mask, config, rng);
            } catch (const TrainingError& e) {
                throw TrainingError("identify diverged at layer " + std::to_string(layer) +
                                        " epoch " + std::to_string(epoch),
                                    e.step_log);
            }
            ++epochs_run;
            const double val_loss = batch_loss(w, val_set);
            log_line(log, {{"stage", "identify"},
                           {"task", task_name},
                           {"layer", layer},
                           {"epoch", epoch},
                           {"train_loss", train_loss},
                           {"val_loss", val_loss}});
            if (val_loss < best_val) {
                best_val = val_loss;
                best_snap = snapshot_layer(w, layer, config.adapted_roles);
                stale = 0;
            } else if (++stale >= config.patience) {
                break;
            }
        }
        restore_layer(w, layer, config.adapted_roles, best_snap);

        LayerIdentStats st;
        st.layer = layer;
        st.epochs = epochs_run;
        st.initial_val_loss = initial_val;
        st.best_val_loss = best_val;
        st.improved = best_val < initial_val;
        sub.stats.push_back(st);
        sub.layer_order.push_back(layer);
        if (!st.improved) {
            log_line(log, {{"stage", "identify"},
                           {"task", task_name},
                           {"layer", layer},
                           {"warning", "validation loss did not improve"}});
        }
    }

    for (int layer = 0; layer < base.config.n_layers; ++layer) {
        std::vector<TaskSubspace::Entry> row;
        for (AttnRole r : config.adapted_roles) {
            const AttnParam& p = w.layers[layer].role(r);
            TaskSubspace::Entry e;
            e.role = r;
            e.f = p.bn->f;
            e.g = p.bn->g;
            e.t = p.bn->product();
            row.push_back(std::move(e));
        }
        sub.layers.push_back(std::move(row));
    }
    return sub;
}

ModelWeights finetune_adapter(const ModelWeights& base, const TaskDataset& task,
                              const TrainConfig& config, std::ostream* log) {
    config.validate();
    ModelWeights w = base;
    std::mt19937_64 rng(config.seed ^ 0x77aa11bb33cc55ddULL);
    FreezeMask mask = FreezeMask::all_frozen(w);
    for (int layer = 0; layer < base.config.n_layers; ++layer) {
        for (AttnRole r : config.adapted_roles) {
            AttnParam& p = w.layers[layer].role(r);
            p.mode = AttnParam::Mode::DenseWithAdapter;
            p.bn = random_bottleneck(base.config.d_model, config.k, rng);
            p.bn->g = Matrix(config.k, base.config.d_model);  // zero product start
            mask.set("l" + std::to_string(layer) + "." + role_name(r), false);
        }
    }

    std::vector<Example> train_set = task.train;
    const std::vector<Example>& val_set = task.validation;
    ModelWeights best = w;
    double best_val = batch_loss(w, val_set);
    int stale = 0;
    for (int epoch = 0; epoch < config.max_epochs_per_layer; ++epoch) {
        const double train_loss = run_epoch(w, train_set, mask, config, rng);
        const double val_loss = batch_loss(w, val_set);
        log_line(log, {{"stage", "finetune"},
                       {"task", task_name_str(task.spec.name)},
                       {"epoch", epoch},
                       {"train_loss", train_loss},
                       {"val_loss", val_loss}});
        if (val_loss < best_val) {
            best_val = val_loss;
            best = w;
            stale = 0;
        } else if (++stale >= config.patience) {
            break;
        }
    }
    return best;
}

GaResult gradient_ascent_unlearn(const ModelWeights& base, const TaskDataset& target,
                                 double stop_accuracy, int max_steps, const TrainConfig& config,
                                 std::ostream* log) {
    config.validate();
    const double base_acc = accuracy(base, target.validation);
    if (stop_accuracy < 0.0 || stop_accuracy >= base_acc) {
        throw InvalidInput("gradient ascent: stop_accuracy must be in [0, base accuracy)");
    }

    GaResult res;
    res.weights = base;
    res.final_val_accuracy = base_acc;
    const FreezeMask mask = FreezeMask::all_unfrozen(res.weights);
    std::mt19937_64 rng(config.seed ^ 0xa5a5a5a5a5a5a5a5ULL);
    std::vector<Example> train_set = target.train;
    std::shuffle(train_set.begin(), train_set.end(), rng);

    std::size_t cursor = 0;
    for (int step = 0; step < max_steps; ++step) {
        if (cursor + config.batch_size > train_set.size()) {
            std::shuffle(train_set.begin(), train_set.end(), rng);
            cursor = 0;
        }
        const std::span<const Example> batch(train_set.data() + cursor,
                                             std::min<std::size_t>(config.batch_size,
                                                                   train_set.size() - cursor));
        cursor += batch.size();
        LossAndGrads lg = loss_and_grads(res.weights, batch, mask);
        clip_gradients(lg.grads, config.clip_norm);
        sgd_step(res.weights, lg.grads, -config.step_size);  // ascend
        res.steps = step + 1;

        if ((step + 1) % config.ga_eval_every == 0 || step + 1 == max_steps) {
            res.final_val_accuracy = accuracy(res.weights, target.validation);
            log_line(log, {{"stage", "ga"},
                           {"step", step + 1},
                           {"loss", lg.loss},
                           {"val_accuracy", res.final_val_accuracy}});
            if (res.final_val_accuracy <= stop_accuracy) {
                res.converged = true;
                break;
            }
        }
    }
    return res;
}

}  // namespace usub
