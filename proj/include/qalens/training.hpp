#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "qalens/data.hpp"
#include "qalens/errors.hpp"
#include "qalens/model.hpp"

namespace qalens {

struct Hyperparameters {
    std::size_t epochs = 5;
    double warmup_ratio = 0.06;
    std::size_t batch_size = 32;
    double learning_rate = 3e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double max_grad_norm = 1.0;
    double dropout = 0.1;
    std::size_t max_seq_len = 128;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs == 0 || batch_size == 0 || learning_rate <= 0.0 || max_seq_len == 0) {
            throw UsageError("Hyperparameters: epochs/batch_size/learning_rate/max_seq_len "
                             "must be positive");
        }
        if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
            throw UsageError("Hyperparameters: warmup_ratio must be in [0,1)");
        }
    }
};

// Source-paper fine-tuning presets, kept verbatim for reference runs.
inline Hyperparameters paper_preset(const std::string& task) {
    Hyperparameters hp;
    hp.adam_epsilon = 1e-8;
    if (task == "boolq") {
        hp.epochs = 5; hp.warmup_ratio = 0.0; hp.batch_size = 32;
        hp.learning_rate = 1e-5; hp.max_seq_len = 256;
    } else if (task == "squad") {
        hp.epochs = 3; hp.warmup_ratio = 0.06; hp.batch_size = 16;
        hp.learning_rate = 1.5e-5; hp.max_seq_len = 384;
    } else if (task == "all") {
        hp.epochs = 5; hp.warmup_ratio = 0.06; hp.batch_size = 16;
        hp.learning_rate = 1.5e-5; hp.max_seq_len = 384;
    } else {
        throw UsageError("paper_preset: unknown task " + task);
    }
    hp.adam_beta1 = 0.9; hp.adam_beta2 = 0.999;
    hp.max_grad_norm = 1.0; hp.dropout = 0.1;
    return hp;
}

inline Hyperparameters hyperparameters_from_json(const nlohmann::json& j) {
    Hyperparameters hp;
    hp.epochs = j.value("epochs", hp.epochs);
    hp.warmup_ratio = j.value("warmup_ratio", hp.warmup_ratio);
    hp.batch_size = j.value("batch_size", hp.batch_size);
    hp.learning_rate = j.value("learning_rate", hp.learning_rate);
    hp.adam_beta1 = j.value("adam_beta1", hp.adam_beta1);
    hp.adam_beta2 = j.value("adam_beta2", hp.adam_beta2);
    hp.adam_epsilon = j.value("adam_epsilon", hp.adam_epsilon);
    hp.max_grad_norm = j.value("max_grad_norm", hp.max_grad_norm);
    hp.dropout = j.value("dropout", hp.dropout);
    hp.max_seq_len = j.value("sequence_length", hp.max_seq_len);
    hp.seed = j.value("seed", hp.seed);
    hp.validate();
    return hp;
}

inline nlohmann::json hyperparameters_to_json(const Hyperparameters& hp) {
    return nlohmann::json{{"epochs", hp.epochs},
                          {"warmup_ratio", hp.warmup_ratio},
                          {"batch_size", hp.batch_size},
                          {"learning_rate", hp.learning_rate},
                          {"adam_beta1", hp.adam_beta1},
                          {"adam_beta2", hp.adam_beta2},
                          {"adam_epsilon", hp.adam_epsilon},
                          {"max_grad_norm", hp.max_grad_norm},
                          {"dropout", hp.dropout},
                          {"sequence_length", hp.max_seq_len},
                          {"seed", hp.seed}};
}

// L = l(f_a, y_a) + 0.5 * 1{span} * l(f_s, y_s) + 0.5 * 1{span} * l(f_e, y_e).
// The span terms exist only for answerable extractive samples; for every
// other label the result is exactly the answer-classification term.
inline double sample_loss(const ModelConfig& config, const ModelOutputs& outputs,
                          const AnswerLabel& label, bool* floored = nullptr) {
    if (label.is_span() && !config.span_heads_enabled) {
        throw UsageError("sample_loss: span label but span heads are disabled");
    }
    const std::size_t cat = category_index(config, label);
    double loss = cross_entropy(outputs.f_a, cat, floored);
    if (label.is_span()) {
        loss += 0.5 * cross_entropy(outputs.f_s, label.span_start, floored);
        loss += 0.5 * cross_entropy(outputs.f_e, label.span_end, floored);
    }
    return loss;
}

// Same formula on the tape, for training.
inline Tape::Var build_sample_loss(Tape& tape, const ModelConfig& config, const ForwardVars& fwd,
                                   const AnswerLabel& label, bool* floored = nullptr) {
    if (label.is_span() && !fwd.has_span) {
        throw UsageError("build_sample_loss: span label but span heads are disabled");
    }
    Tape::Var loss = tape.neg_log_pick(fwd.f_a, category_index(config, label), floored);
    if (label.is_span()) {
        loss = tape.add(loss, tape.scale(tape.neg_log_pick(fwd.f_s, label.span_start, floored), 0.5));
        loss = tape.add(loss, tape.scale(tape.neg_log_pick(fwd.f_e, label.span_end, floored), 0.5));
    }
    return loss;
}

// Linear warmup from 0 to learning_rate over warmup_ratio * total_steps,
// then linear decay to 0 at total_steps.
inline double lr_at(std::size_t step, std::size_t total_steps, const Hyperparameters& hp) {
    if (step > total_steps) throw UsageError("lr_at: step beyond total_steps");
    const double warmup = hp.warmup_ratio * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (s < warmup) return hp.learning_rate * s / warmup;
    if (total_steps == 0) return 0.0;
    return hp.learning_rate * (static_cast<double>(total_steps) - s) /
           (static_cast<double>(total_steps) - warmup);
}

// Scales all gradients by max_norm/g when the global L2 norm g exceeds
// max_norm; returns the factor applied.
inline double clip_global_norm(const std::vector<Parameter*>& params, double max_norm) {
    double sq = 0.0;
    for (const Parameter* p : params) {
        for (double g : p->grad.data) sq += g * g;
    }
    if (!std::isfinite(sq)) throw NumericError("clip_global_norm: non-finite gradient norm");
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return 1.0;
    const double factor = max_norm / norm;
    for (Parameter* p : params) {
        for (double& g : p->grad.data) g *= factor;
    }
    return factor;
}

struct TrainReport {
    std::vector<double> epoch_mean_loss;
    std::vector<nlohmann::json> epoch_dev_metrics;
    double wall_clock_seconds = 0.0;
    std::string checkpoint_path;
    std::size_t truncated_downgrades = 0;
    bool prob_floor_hit = false;

    nlohmann::json to_json() const {
        return nlohmann::json{{"epoch_mean_loss", epoch_mean_loss},
                              {"epoch_dev_metrics", epoch_dev_metrics},
                              {"wall_clock_seconds", wall_clock_seconds},
                              {"checkpoint_path", checkpoint_path},
                              {"truncated_downgrades", truncated_downgrades},
                              {"prob_floor_hit", prob_floor_hit}};
    }
};

// Adam with bias correction; state per parameter tensor.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Parameter*> params, const Hyperparameters& hp)
        : params_(std::move(params)), hp_(hp) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Parameter* p : params_) {
            m_.emplace_back(p->value.rows, p->value.cols);
            v_.emplace_back(p->value.rows, p->value.cols);
        }
    }

    void step(double lr) {
        ++t_;
        const double b1 = hp_.adam_beta1;
        const double b2 = hp_.adam_beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter& p = *params_[i];
            for (std::size_t k = 0; k < p.value.data.size(); ++k) {
                const double g = p.grad.data[k];
                m_[i].data[k] = b1 * m_[i].data[k] + (1.0 - b1) * g;
                v_[i].data[k] = b2 * v_[i].data[k] + (1.0 - b2) * g * g;
                const double mhat = m_[i].data[k] / bc1;
                const double vhat = v_[i].data[k] / bc2;
                p.value.data[k] -= lr * mhat / (std::sqrt(vhat) + hp_.adam_epsilon);
            }
        }
    }

private:
    std::vector<Parameter*> params_;
    Hyperparameters hp_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    std::size_t t_ = 0;
};

// Optional hook evaluated on the dev set after each epoch.
using DevEvalFn = std::function<nlohmann::json(const ModelParams&)>;

// Mini-batch Adam over the dataset. `params` is either freshly initialized or
// carried over from a checkpoint (transfer). Incomplete final batches are
// kept; the loss is averaged per sample. Fully deterministic given
// (data, hp, seed).
inline TrainReport train_loop(ModelParams& params, const Dataset& data, const Hyperparameters& hp,
                              const std::string& checkpoint_dir, const DevEvalFn& dev_eval = {}) {
    hp.validate();
    if (data.samples.empty()) throw UsageError("train: empty dataset");
    const auto start = std::chrono::steady_clock::now();

    ModelConfig config = params.config;
    config.dropout_rate = hp.dropout;
    params.config = config;

    std::vector<Parameter*> all = params.all();
    AdamOptimizer opt(all, hp);
    const std::size_t n = data.samples.size();
    const std::size_t batches_per_epoch = (n + hp.batch_size - 1) / hp.batch_size;
    const std::size_t total_steps = batches_per_epoch * hp.epochs;

    TrainReport report;
    report.truncated_downgrades = data.truncated_downgrades;
    RngState order_rng(hp.seed, 0x0BDE);
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        RngState epoch_rng = order_rng.split(epoch);
        epoch_rng.shuffle(order);

        double loss_sum = 0.0;
        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            const std::size_t lo = b * hp.batch_size;
            const std::size_t hi = std::min(lo + hp.batch_size, n);
            params.zero_grads();
            double batch_loss = 0.0;
            for (std::size_t s = lo; s < hi; ++s) {
                const EncodedSample& sample = data.samples[order[s]];
                Tape tape;
                detail::Bound w = detail::bind_trainable(tape, params);
                RngState drop_rng = RngState(hp.seed, 0xD0).split(epoch).split(b).split(s - lo);
                ForwardVars fwd = detail::build_forward(tape, w, config, sample,
                                                        HeadMask::all_keep(config), Mode::Train,
                                                        &drop_rng, nullptr);
                Tape::Var loss = build_sample_loss(tape, config, fwd, sample.label,
                                                   &report.prob_floor_hit);
                const double lv = tape.val(loss).data[0];
                if (!std::isfinite(lv)) throw NumericError("train: non-finite loss");
                batch_loss += lv;
                tape.backward(loss, 1.0 / static_cast<double>(hi - lo));
            }
            clip_global_norm(all, hp.max_grad_norm);
            opt.step(lr_at(step, total_steps, hp));
            ++step;
            loss_sum += batch_loss;
        }
        report.epoch_mean_loss.push_back(loss_sum / static_cast<double>(n));
        if (!checkpoint_dir.empty()) save_checkpoint(params, checkpoint_dir, hp.seed);
        if (dev_eval) report.epoch_dev_metrics.push_back(dev_eval(params));
    }

    report.checkpoint_path = checkpoint_dir;
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

// Transfer initialization: keep backbone tensors from the source checkpoint,
// re-initialize task heads whenever their shapes differ from the target
// regime.
inline ModelParams init_from_checkpoint(const std::string& ckpt_dir, const ModelConfig& target,
                                        std::uint64_t seed) {
    Checkpoint src = load_checkpoint(ckpt_dir);
    const ModelConfig& sc = src.params.config;
    if (sc.n_layers != target.n_layers || sc.hidden_dim != target.hidden_dim ||
        sc.n_heads != target.n_heads || sc.ffn() != target.ffn() ||
        sc.vocab_size != target.vocab_size || sc.max_seq_len != target.max_seq_len) {
        throw UsageError("init_from_checkpoint: backbone geometry differs from target config");
    }
    ModelParams out = init_model(target, seed);
    for (Parameter& p : out.tensors) {
        if (p.name.rfind("head.", 0) == 0) {
            const auto it = src.params.byname.find(p.name);
            if (it == src.params.byname.end() ||
                !src.params.tensors[it->second].value.same_shape(p.value)) {
                continue;  // fresh head
            }
        }
        p.value = src.params.at(p.name).value;
    }
    return out;
}

}  // namespace qalens
