#pragma once

// Freeze-aware AdamW training over manifest-trainable parameters.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdup/data.hpp"
#include "mdup/surgery.hpp"

namespace mdup {

struct TrainConfig {
    double peak_lr = 1e-4;
    std::size_t warmup_steps = 200;
    double final_lr = 2e-5;
    std::size_t total_steps = 2000;
    std::size_t batch_size = 8;
    std::size_t max_context = 256;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    // Score speech tokens and SEP too, not just transcript + EOS.
    bool loss_on_all_positions = false;

    void validate() const {
        if (!(peak_lr > 0)) throw std::invalid_argument("train: peak_lr must be > 0");
        if (final_lr < 0 || final_lr > peak_lr) throw std::invalid_argument("train: need 0 <= final_lr <= peak_lr");
        if (warmup_steps > total_steps) throw std::invalid_argument("train: warmup_steps must be <= total_steps");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (max_context < 2) throw std::invalid_argument("train: max_context must be >= 2");
        if (weight_decay < 0) throw std::invalid_argument("train: weight_decay must be >= 0");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw std::invalid_argument("train: betas must be in [0, 1)");
        if (!(eps > 0)) throw std::invalid_argument("train: eps must be > 0");
        if (grad_clip < 0) throw std::invalid_argument("train: grad_clip must be >= 0 (0 disables)");
    }
};

/// Linear warmup 0 -> peak, linear decay peak -> final at total_steps, then flat.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
    if (step < cfg.warmup_steps) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (step >= cfg.total_steps) return cfg.final_lr;
    const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    const double frac = static_cast<double>(step - cfg.warmup_steps) / span;
    return cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * frac;
}

template <typename T>
struct OptimizerState {
    struct Moments {
        std::vector<T> m, v;
        bool operator==(const Moments&) const = default;
    };
    std::size_t step = 0;
    std::map<std::string, Moments> moments;

    static OptimizerState for_manifest(const FreezeManifest& manifest) {
        OptimizerState s;
        for (const auto& [name, e] : manifest)
            if (e.trainable) s.moments[name] = {std::vector<T>(e.numel, T(0)), std::vector<T>(e.numel, T(0))};
        return s;
    }
    bool operator==(const OptimizerState&) const = default;
};

class NonFiniteLossError : public std::runtime_error {
  public:
    NonFiniteLossError(std::size_t step, double loss)
        : std::runtime_error("train_step: non-finite loss " + std::to_string(loss) + " at step " + std::to_string(step) +
                             "; update skipped"),
          step_(step) {}
    std::size_t step() const { return step_; }

  private:
    std::size_t step_;
};

/// Sets requires_grad from the manifest. Every model parameter must be listed.
template <typename T>
void apply_freeze(Model<T>& model, const FreezeManifest& manifest) {
    for_each_parameter<T>(model, [&](const std::string& name, Tensor<T>& t) {
        auto it = manifest.find(name);
        if (it == manifest.end()) throw std::invalid_argument("apply_freeze: '" + name + "' missing from manifest");
        t.set_requires_grad(it->second.trainable);
    });
}

/// Next-token targets for one batch row; a target at position t is the token at t+1.
inline std::pair<std::vector<std::int32_t>, std::vector<std::uint8_t>> row_targets(const data::Batch& b, std::size_t r) {
    auto ids = b.row_ids(r);
    auto lm = b.row_loss_mask(r);
    std::vector<std::int32_t> tgt(ids.size(), 0);
    std::vector<std::uint8_t> mask(ids.size(), 0);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
        tgt[t] = ids[t + 1];
        mask[t] = lm[t + 1];
    }
    return {tgt, mask};
}

/// Forward + backward of the token-averaged batch loss. Gradients accumulate
/// into parameters that require grad; returns the loss.
template <typename T>
double batch_loss_backward(const Model<T>& model, const data::Batch& batch, bool do_backward = true) {
    const std::size_t total = batch.target_count();
    if (total == 0) throw std::invalid_argument("batch_loss: batch has no loss positions");
    double loss = 0;
    for (std::size_t r = 0; r < batch.rows; ++r) {
        auto [tgt, mask] = row_targets(batch, r);
        std::size_t count = 0;
        for (auto m : mask) count += m;
        if (!count) continue;
        auto ce = softmax_cross_entropy(model_forward(model, batch.row_ids(r), batch.row_types(r)), tgt, mask);
        auto weighted = scale(ce, static_cast<T>(static_cast<double>(count) / static_cast<double>(total)));
        loss += static_cast<double>(weighted.item());
        if (do_backward) backward(weighted);
    }
    return loss;
}

struct StepResult {
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
};

/// Clipped AdamW update from the gradients currently held by `params`, then
/// clears them. Parameters without a gradient are treated as zero-gradient.
/// Returns the pre-clip global gradient norm.
template <typename T>
double adamw_update(std::vector<std::pair<std::string, Tensor<T>>>& params, OptimizerState<T>& state,
                    const TrainConfig& cfg, double lr) {
    double sq = 0;
    for (auto& [name, t] : params)
        if (t.has_grad())
            for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
        for (auto& [name, t] : params) t.zero_grad();
        throw NonFiniteLossError(state.step + 1, norm);
    }
    const double clip = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
    for (auto& [name, t] : params) {
        auto it = state.moments.find(name);
        if (it == state.moments.end() || it->second.m.size() != t.numel())
            throw std::invalid_argument("adamw_update: optimizer state does not cover '" + name + "'");
    }

    const std::size_t step = state.step + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
    const T step_size = static_cast<T>(lr / bc1), inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(cfg.eps), c = static_cast<T>(clip);
    for (auto& [name, t] : params) {
        auto& mo = state.moments.at(name);
        auto w = t.data();
        const bool has = t.has_grad();
        auto g = t.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const T gi = has ? g[i] * c : T(0);
            mo.m[i] = b1 * mo.m[i] + (T(1) - b1) * gi;
            mo.v[i] = b2 * mo.v[i] + (T(1) - b2) * gi * gi;
            w[i] = w[i] * decay - step_size * mo.m[i] / (std::sqrt(mo.v[i]) * inv_sqrt_bc2 + eps);
        }
        t.zero_grad();
    }
    state.step = step;
    return norm;
}

/// One clipped AdamW update on manifest-trainable parameters. On a non-finite
/// loss, gradients are discarded and neither the model nor the state changes.
/// Parameters are updated in place: clone_model first if trainable tensors
/// share storage with a model that must stay intact (full fine-tuning).
template <typename T>
StepResult train_step(Model<T>& model, const FreezeManifest& manifest, const data::Batch& batch, OptimizerState<T>& state,
                      const TrainConfig& cfg) {
    apply_freeze(model, manifest);
    std::vector<std::pair<std::string, Tensor<T>>> params;
    for (auto& [name, t] : named_parameters(model))
        if (manifest.at(name).trainable) params.emplace_back(name, t);
    for (auto& [name, t] : params) t.zero_grad();

    StepResult res;
    res.loss = batch_loss_backward(model, batch, !params.empty());
    if (!std::isfinite(res.loss)) {
        for (auto& [name, t] : params) t.zero_grad();
        throw NonFiniteLossError(state.step + 1, res.loss);
    }
    if (params.empty()) return res;
    res.lr = lr_at(state.step + 1, cfg);
    res.grad_norm = adamw_update(params, state, cfg, res.lr);
    return res;
}

// ---------------------------------------------------------------------------
// Datasets and the training loop

/// Either plain text sequences (LM pre-training) or ASR pairs (speech CPT).
struct Dataset {
    std::size_t vocab_text = 0;
    std::size_t vocab_speech = 0;
    std::vector<data::Sequence> text;
    std::vector<data::AsrPair> asr;

    std::size_t size() const { return asr.empty() ? text.size() : asr.size(); }
    bool is_asr() const { return !asr.empty(); }

    data::Batch batch(const std::vector<std::size_t>& idx, const TrainConfig& cfg) const {
        if (is_asr()) {
            std::vector<data::AsrPair> sel;
            for (auto i : idx) sel.push_back(asr[i]);
            return data::make_batch(sel, vocab_text, vocab_speech, cfg.max_context, -1,
                                    cfg.loss_on_all_positions ? data::LossMask::all_positions : data::LossMask::transcript);
        }
        std::vector<data::Sequence> sel;
        for (auto i : idx) sel.push_back(text[i]);
        return data::make_text_batch(sel, vocab_text, cfg.max_context);
    }
};

/// Deterministic epoch-shuffled index stream.
class BatchSampler {
  public:
    BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {
        if (n == 0) throw std::invalid_argument("BatchSampler: empty dataset");
    }
    std::vector<std::size_t> next(std::size_t batch_size) {
        std::vector<std::size_t> out;
        while (out.size() < batch_size) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

  private:
    void reshuffle() {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
    }
    std::size_t n_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

struct LogRecord {
    std::size_t step = 0;
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
    std::size_t dropped = 0;
    nlohmann::ordered_json eval;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j{{"step", step}, {"loss", loss}, {"lr", lr}, {"grad_norm", grad_norm}};
        if (dropped) j["dropped"] = dropped;
        if (!eval.is_null()) j["eval"] = eval;
        return j;
    }
};

struct TrainingLog {
    std::vector<LogRecord> records;
    std::size_t dropped = 0;

    std::string to_jsonl() const {
        std::string s;
        for (const auto& r : records) s += r.to_json().dump() + "\n";
        return s;
    }
    std::vector<double> losses() const {
        std::vector<double> out;
        for (const auto& r : records) out.push_back(r.loss);
        return out;
    }
};

template <typename T>
struct TrainHooks {
    std::size_t eval_every = 0;
    std::function<nlohmann::ordered_json(std::size_t step, const Model<T>&)> on_eval;
    std::size_t checkpoint_every = 0;
    std::function<void(std::size_t step, const Model<T>&, const OptimizerState<T>&)> on_checkpoint;
    std::function<void(const LogRecord&)> on_log;
};

/// Runs cfg.total_steps updates, continuing from `state` (which may be fresh).
template <typename T>
TrainingLog run_training(Model<T>& model, const FreezeManifest& manifest, const Dataset& ds, const TrainConfig& cfg,
                         OptimizerState<T>& state, const TrainHooks<T>& hooks = {}) {
    cfg.validate();
    if (ds.size() == 0) throw std::invalid_argument("run_training: dataset is empty");
    validate_manifest(model, manifest);
    BatchSampler sampler(ds.size(), cfg.seed);
    TrainingLog log;
    for (std::size_t i = 0; i < cfg.total_steps; ++i) {
        auto batch = ds.batch(sampler.next(cfg.batch_size), cfg);
        log.dropped += batch.dropped;
        if (batch.rows == 0) throw std::invalid_argument("run_training: every example in a batch exceeds max_context");
        auto r = train_step(model, manifest, batch, state, cfg);
        LogRecord rec{state.step, r.loss, r.lr, r.grad_norm, batch.dropped, nullptr};
        if (hooks.on_eval && hooks.eval_every && state.step % hooks.eval_every == 0) rec.eval = hooks.on_eval(state.step, model);
        if (hooks.on_checkpoint && hooks.checkpoint_every && state.step % hooks.checkpoint_every == 0)
            hooks.on_checkpoint(state.step, model, state);
        if (hooks.on_log) hooks.on_log(rec);
        log.records.push_back(std::move(rec));
    }
    return log;
}

template <typename T>
TrainingLog run_training(Model<T>& model, const FreezeManifest& manifest, const Dataset& ds, const TrainConfig& cfg,
                         const TrainHooks<T>& hooks = {}) {
    auto state = OptimizerState<T>::for_manifest(manifest);
    return run_training(model, manifest, ds, cfg, state, hooks);
}

}  // namespace mdup
