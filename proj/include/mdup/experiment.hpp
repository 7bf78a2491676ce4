#pragma once

// End-to-end pipeline shared by the CLI and the acceptance runner:
// data generation, base pre-training, per-mode surgery, speech CPT, evaluation.

#include <algorithm>
#include <array>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>

#include "mdup/config_io.hpp"
#include "mdup/eval.hpp"

namespace mdup {

/// A preservation or recovery check failed.
class InvariantError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Independent stream seed derived from a user seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct ExperimentData {
    std::size_t vocab_text = 0;
    std::size_t vocab_speech = 0;
    std::vector<data::Sequence> pretrain_text;
    std::vector<data::Sequence> text_eval;
    std::vector<data::AsrPair> asr_train;
    std::vector<data::AsrPair> asr_test;

    Dataset pretrain_set() const {
        Dataset ds;
        ds.vocab_text = vocab_text;
        ds.text = pretrain_text;
        return ds;
    }
    Dataset asr_set() const {
        Dataset ds;
        ds.vocab_text = vocab_text;
        ds.vocab_speech = vocab_speech;
        ds.asr = asr_train;
        return ds;
    }
};

/// Everything is a pure function of the data section (and the model's vocab_text).
inline ExperimentData make_experiment_data(const ExperimentConfig& cfg) {
    const auto s = cfg.data.seed;
    const data::SpeechCodebook book(cfg.codebook_spec());
    ExperimentData d;
    d.vocab_text = cfg.model.vocab_text;
    d.vocab_speech = cfg.data.codebook.vocab_speech;
    d.pretrain_text = data::gen_text_corpus(cfg.text_spec(), cfg.data.pretrain_sequences, derive_seed(s, 1));
    d.text_eval = data::gen_text_corpus(cfg.text_spec(), cfg.data.text_eval_sequences, derive_seed(s, 2));
    d.asr_train = data::gen_asr_pairs(data::gen_text_corpus(cfg.asr_text_spec(), cfg.data.asr_train_pairs, derive_seed(s, 3)), book,
                                      derive_seed(s, 4));
    d.asr_test = data::gen_asr_pairs(data::gen_text_corpus(cfg.asr_text_spec(), cfg.data.asr_test_pairs, derive_seed(s, 5)), book,
                                     derive_seed(s, 6));
    return d;
}

inline Model<float> pretrain_base(const ExperimentConfig& cfg, const ExperimentData& d, TrainingLog* log = nullptr,
                                  const TrainHooks<float>& hooks = {}) {
    auto m = init_model<float>(cfg.model, derive_seed(cfg.seed, 1));
    const auto man = full_finetune_manifest(base_manifest(m));
    auto l = run_training(m, man, d.pretrain_set(), cfg.pretrain, hooks);
    if (log) *log = std::move(l);
    return m;
}

struct Adaptation {
    AdaptMode mode = AdaptMode::depth;
    Model<float> model;
    FreezeManifest manifest;
    std::optional<UpscalePlan> plan;
    std::size_t lora_rank = 0;
    double preservation_max_abs_diff = 0;
};

/// Trainable count of depth up-scaling under cfg.surgery, minus the speech rows both methods share.
inline std::size_t depth_adapter_budget(const Model<float>& expanded, const FreezeManifest& man, const ExperimentConfig& cfg) {
    auto plan = compute_placement(expanded.layers.size(), cfg.surgery.m, cfg.surgery.strategy, cfg.surgery.kind);
    auto up = upscale(expanded, man, plan, 0);
    return count_trainable(up.manifest) - expanded.embed_speech.numel();
}

/// Expands the vocabulary, then builds the mode's trainable structure. The
/// result must reproduce the base model's text logits or InvariantError is thrown.
inline Adaptation prepare_adaptation(const Model<float>& base, const ExperimentConfig& cfg) {
    if (base.config.vocab_speech != 0) throw std::invalid_argument("prepare_adaptation: base already has a speech vocabulary");
    auto ex = expand_vocabulary(base, cfg.data.codebook.vocab_speech, derive_seed(cfg.seed, 2));
    Adaptation a;
    a.mode = cfg.adapt.mode;
    switch (cfg.adapt.mode) {
        case AdaptMode::depth: {
            a.plan = compute_placement(base.layers.size(), cfg.surgery.m, cfg.surgery.strategy, cfg.surgery.kind);
            auto up = upscale(ex.model, ex.manifest, *a.plan, derive_seed(cfg.seed, 3));
            a.model = std::move(up.model);
            a.manifest = std::move(up.manifest);
            break;
        }
        case AdaptMode::full_ft:
            a.model = clone_model(ex.model);
            a.manifest = full_finetune_manifest(ex.manifest);
            break;
        case AdaptMode::lora: {
            const LoRAConfig defaults;
            a.lora_rank = cfg.adapt.lora_rank ? cfg.adapt.lora_rank
                                              : match_lora_rank(ex.model, defaults.targets, depth_adapter_budget(ex.model, ex.manifest, cfg));
            auto lr = apply_lora(ex.model, ex.manifest, LoRAConfig::with_rank(a.lora_rank), derive_seed(cfg.seed, 4));
            a.model = std::move(lr.model);
            a.manifest = std::move(lr.manifest);
            break;
        }
    }
    a.preservation_max_abs_diff = check_function_preservation(ex.model, a.model, cfg.eval.preservation_trials, cfg.eval.preservation_len,
                                                              derive_seed(cfg.seed, 5));
    if (!(a.preservation_max_abs_diff <= cfg.eval.preservation_tolerance))
        throw InvariantError("function preservation failed: max |logit diff| = " + std::to_string(a.preservation_max_abs_diff) +
                             " > " + std::to_string(cfg.eval.preservation_tolerance));
    return a;
}

inline std::size_t transcribe_limit(const ExperimentConfig& cfg) {
    return cfg.eval.transcribe_max_len ? cfg.eval.transcribe_max_len : cfg.data.asr_max_len + 4;
}

inline EvalReport evaluate_adaptation(const Model<float>& base, const Model<float>& adapted, const FreezeManifest& manifest,
                                      const ExperimentConfig& cfg, const ExperimentData& d, double preservation_max_abs_diff) {
    EvalReport r;
    r.method = to_string(cfg.adapt.mode);
    const bool depth = cfg.adapt.mode == AdaptMode::depth;
    r.strategy = depth ? to_string(cfg.surgery.strategy) : "-";
    r.kind = depth ? to_string(cfg.surgery.kind) : "-";
    r.trainable_count = count_trainable(manifest);
    r.speech_token_error_rate = transcription_errors(adapted, d.asr_test, transcribe_limit(cfg)).rate();
    r.text_ppl_base = perplexity(base, d.text_eval, true);
    r.text_ppl_adapted_kept = perplexity(adapted, d.text_eval, true);
    r.text_ppl_adapted_dropped = perplexity(drop_added_layers(adapted, manifest), d.text_eval, true);
    r.preservation_max_abs_diff = preservation_max_abs_diff;
    r.recovery_exact = check_recovery(base, adapted, manifest, cfg.eval.preservation_trials, cfg.eval.preservation_len,
                                      derive_seed(cfg.seed, 6))
                           .exact();
    return r;
}

/// Periodic probe used during adaptation: error rate on a slice of the test
/// pairs and kept-layer text perplexity.
inline std::function<Json(std::size_t, const Model<float>&)> progress_probe(const ExperimentConfig& cfg, const ExperimentData& d,
                                                                             std::size_t pairs = 20) {
    return [&cfg, &d, pairs](std::size_t, const Model<float>& m) {
        const std::vector<data::AsrPair> slice(d.asr_test.begin(), d.asr_test.begin() + std::min(pairs, d.asr_test.size()));
        return Json{{"speech_token_error_rate", transcription_errors(m, slice, transcribe_limit(cfg)).rate()},
                    {"text_ppl_kept", perplexity(m, d.text_eval, true)}};
    };
}

}  // namespace mdup
