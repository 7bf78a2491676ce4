#pragma once

// JSON binding for configuration structs. Every field is emitted; unknown
// keys are rejected with their full key path.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "mdup/data.hpp"
#include "mdup/surgery.hpp"
#include "mdup/training.hpp"

namespace mdup {

using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
  public:
    ConfigError(std::string path, const std::string& msg)
        : std::runtime_error(path.empty() ? msg : path + ": " + msg), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

  private:
    std::string path_;
};

enum class AdaptMode { depth, full_ft, lora };

inline const char* to_string(AdaptMode m) {
    switch (m) {
        case AdaptMode::depth: return "depth";
        case AdaptMode::full_ft: return "full_ft";
        case AdaptMode::lora: return "lora";
    }
    return "?";
}

inline AdaptMode parse_adapt_mode(const std::string& s) {
    if (s == "depth") return AdaptMode::depth;
    if (s == "full_ft") return AdaptMode::full_ft;
    if (s == "lora") return AdaptMode::lora;
    throw std::invalid_argument("unknown mode '" + s + "' (expected depth|full_ft|lora)");
}

// ---------------------------------------------------------------------------
// Field lists

template <typename V>
void visit_fields(ModelConfig& c, V&& v) {
    v("n_layers", c.n_layers);
    v("d_model", c.d_model);
    v("n_heads", c.n_heads);
    v("ffn_hidden", c.ffn_hidden);
    v("vocab_text", c.vocab_text);
    v("vocab_speech", c.vocab_speech);
    v("max_seq_len", c.max_seq_len);
    v("conv_kernel_width", c.conv_kernel_width);
    v("cgmlp_hidden", c.cgmlp_hidden);
    v("rope_base", c.rope_base);
    v("norm_eps", c.norm_eps);
}

template <typename V>
void visit_fields(TrainConfig& c, V&& v) {
    v("peak_lr", c.peak_lr);
    v("warmup_steps", c.warmup_steps);
    v("final_lr", c.final_lr);
    v("total_steps", c.total_steps);
    v("batch_size", c.batch_size);
    v("max_context", c.max_context);
    v("weight_decay", c.weight_decay);
    v("beta1", c.beta1);
    v("beta2", c.beta2);
    v("eps", c.eps);
    v("grad_clip", c.grad_clip);
    v("seed", c.seed);
    v("loss_on_all_positions", c.loss_on_all_positions);
}

// vocab_text comes from the model section.
template <typename V>
void visit_fields(data::SyntheticTextSpec& c, V&& v) {
    v("min_len", c.min_len);
    v("max_len", c.max_len);
    v("order2_candidates", c.order2_candidates);
    v("order1_candidates", c.order1_candidates);
    v("p_order2", c.p_order2);
    v("p_order1", c.p_order1);
    v("zipf_exponent", c.zipf_exponent);
    v("table_seed", c.table_seed);
}

template <typename V>
void visit_fields(data::SpeechCodebookSpec& c, V&& v) {
    v("vocab_speech", c.vocab_speech);
    v("k", c.k);
    v("noise", c.noise);
    v("seed", c.seed);
}

struct DataSection {
    data::SyntheticTextSpec text;
    std::size_t pretrain_sequences = 4000;
    std::size_t text_eval_sequences = 100;
    std::size_t asr_min_len = 4;
    std::size_t asr_max_len = 10;
    std::size_t asr_train_pairs = 8000;
    std::size_t asr_test_pairs = 100;
    data::SpeechCodebookSpec codebook;
    std::uint64_t seed = 1;
};

template <typename V>
void visit_fields(DataSection& c, V&& v) {
    v("text", c.text);
    v("pretrain_sequences", c.pretrain_sequences);
    v("text_eval_sequences", c.text_eval_sequences);
    v("asr_min_len", c.asr_min_len);
    v("asr_max_len", c.asr_max_len);
    v("asr_train_pairs", c.asr_train_pairs);
    v("asr_test_pairs", c.asr_test_pairs);
    v("codebook", c.codebook);
    v("seed", c.seed);
}

struct SurgerySection {
    PlacementStrategy strategy = PlacementStrategy::interleaved;
    std::size_t m = 2;
    LayerKind kind = LayerKind::standard;
};

template <typename V>
void visit_fields(SurgerySection& c, V&& v) {
    v("strategy", c.strategy);
    v("m", c.m);
    v("kind", c.kind);
}

struct AdaptSection {
    AdaptMode mode = AdaptMode::depth;
    // 0 picks the rank whose trainable count matches depth up-scaling.
    std::size_t lora_rank = 0;
    TrainConfig train;
    std::size_t eval_every = 0;
    std::size_t checkpoint_every = 0;
};

template <typename V>
void visit_fields(AdaptSection& c, V&& v) {
    v("mode", c.mode);
    v("lora_rank", c.lora_rank);
    v("train", c.train);
    v("eval_every", c.eval_every);
    v("checkpoint_every", c.checkpoint_every);
}

struct EvalSection {
    std::size_t preservation_trials = 10;
    std::size_t preservation_len = 16;
    double preservation_tolerance = 1e-5;
    // Greedy decoding stops after this many tokens; 0 means longest test transcript + 4.
    std::size_t transcribe_max_len = 0;
};

template <typename V>
void visit_fields(EvalSection& c, V&& v) {
    v("preservation_trials", c.preservation_trials);
    v("preservation_len", c.preservation_len);
    v("preservation_tolerance", c.preservation_tolerance);
    v("transcribe_max_len", c.transcribe_max_len);
}

/// Desk-scale defaults: the learning rates are raised well above the
/// TrainConfig defaults so toy runs learn within their step budget.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    DataSection data;
    TrainConfig pretrain;
    SurgerySection surgery;
    AdaptSection adapt;
    EvalSection eval;

    ExperimentConfig() {
        pretrain.peak_lr = 3e-3;
        pretrain.final_lr = 3e-4;
        pretrain.warmup_steps = 50;
        pretrain.total_steps = 600;
        pretrain.weight_decay = 0.0;
        adapt.train.peak_lr = 3e-3;
        adapt.train.final_lr = 6e-4;
        adapt.train.warmup_steps = 200;
        adapt.train.total_steps = 2000;
        adapt.train.weight_decay = 0.0;
        adapt.train.seed = 1;
    }

    void validate() const {
        auto wrap = [](const char* path, auto&& fn) {
            try {
                fn();
            } catch (const std::invalid_argument& e) {
                throw ConfigError(path, e.what());
            }
        };
        wrap("model", [&] { model.validate(); });
        if (model.vocab_speech != 0) throw ConfigError("model.vocab_speech", "must be 0 for the base model");
        wrap("data.text", [&] {
            auto t = data.text;
            t.vocab_text = model.vocab_text;
            t.validate();
        });
        wrap("data.codebook", [&] {
            auto c = data.codebook;
            c.vocab_text = model.vocab_text;
            c.validate();
        });
        if (data.asr_min_len < 1 || data.asr_min_len > data.asr_max_len)
            throw ConfigError("data.asr_min_len", "need 1 <= asr_min_len <= asr_max_len");
        if (data.pretrain_sequences == 0) throw ConfigError("data.pretrain_sequences", "must be >= 1");
        if (data.text_eval_sequences == 0) throw ConfigError("data.text_eval_sequences", "must be >= 1");
        if (data.asr_train_pairs == 0) throw ConfigError("data.asr_train_pairs", "must be >= 1");
        if (data.asr_test_pairs == 0) throw ConfigError("data.asr_test_pairs", "must be >= 1");
        wrap("pretrain", [&] { pretrain.validate(); });
        wrap("adapt.train", [&] { adapt.train.validate(); });
        if (surgery.m == 0) throw ConfigError("surgery.m", "must be >= 1");
        if (eval.preservation_trials == 0) throw ConfigError("eval.preservation_trials", "must be >= 1");
        if (eval.preservation_len == 0 || eval.preservation_len > model.max_seq_len)
            throw ConfigError("eval.preservation_len", "must be in [1, model.max_seq_len]");
    }

    data::SyntheticTextSpec text_spec() const {
        auto t = data.text;
        t.vocab_text = model.vocab_text;
        return t;
    }
    data::SyntheticTextSpec asr_text_spec() const {
        auto t = text_spec();
        t.min_len = data.asr_min_len;
        t.max_len = data.asr_max_len;
        return t;
    }
    data::SpeechCodebookSpec codebook_spec() const {
        auto c = data.codebook;
        c.vocab_text = model.vocab_text;
        return c;
    }
};

template <typename V>
void visit_fields(ExperimentConfig& c, V&& v) {
    v("seed", c.seed);
    v("model", c.model);
    v("data", c.data);
    v("pretrain", c.pretrain);
    v("surgery", c.surgery);
    v("adapt", c.adapt);
    v("eval", c.eval);
}

// ---------------------------------------------------------------------------
// Generic conversion

namespace detail {

template <typename S>
concept FieldStruct = requires(S& s) { visit_fields(s, [](const char*, auto&) {}); };

inline std::string join_path(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

template <typename F>
Json field_to_json(const F& f) {
    if constexpr (FieldStruct<F>) {
        Json j = Json::object();
        visit_fields(const_cast<F&>(f), [&](const char* k, auto& sub) { j[k] = field_to_json(sub); });
        return j;
    } else if constexpr (std::is_same_v<F, PlacementStrategy> || std::is_same_v<F, LayerKind> || std::is_same_v<F, AdaptMode>) {
        return to_string(f);
    } else {
        return f;
    }
}

template <typename J, typename F>
void field_from_json(const J& j, F& f, const std::string& path) {
    if constexpr (FieldStruct<F>) {
        if (!j.is_object()) throw ConfigError(path, "expected an object");
        std::set<std::string> known;
        visit_fields(f, [&](const char* k, auto&) { known.insert(k); });
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!known.count(it.key())) throw ConfigError(join_path(path, it.key()), "unknown key");
        visit_fields(f, [&](const char* k, auto& sub) {
            if (j.contains(k)) field_from_json(j.at(k), sub, join_path(path, k));
        });
    } else if constexpr (std::is_same_v<F, bool>) {
        if (!j.is_boolean()) throw ConfigError(path, "expected true or false");
        f = j.template get<bool>();
    } else if constexpr (std::is_integral_v<F>) {
        if (std::is_unsigned_v<F> ? !j.is_number_unsigned() : !j.is_number_integer())
            throw ConfigError(path, std::is_unsigned_v<F> ? "expected a non-negative integer" : "expected an integer");
        f = j.template get<F>();
    } else if constexpr (std::is_floating_point_v<F>) {
        if (!j.is_number()) throw ConfigError(path, "expected a number");
        f = j.template get<F>();
    } else {
        if (!j.is_string()) throw ConfigError(path, "expected a string");
        try {
            if constexpr (std::is_same_v<F, PlacementStrategy>) f = parse_placement(j.template get<std::string>());
            else if constexpr (std::is_same_v<F, LayerKind>) f = parse_layer_kind(j.template get<std::string>());
            else f = parse_adapt_mode(j.template get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path, e.what());
        }
    }
}

}  // namespace detail

template <typename S>
Json config_to_json(const S& s) {
    return detail::field_to_json(s);
}

/// Missing keys keep their defaults; unknown keys and type mismatches throw ConfigError.
template <typename S, typename J>
S config_from_json(const J& j, const std::string& path = "") {
    S s;
    detail::field_from_json(j, s, path);
    return s;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read config file " + path);
    Json j;
    try {
        j = Json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("", std::string("malformed JSON in ") + path + ": " + e.what());
    }
    auto cfg = config_from_json<ExperimentConfig>(j);
    cfg.validate();
    return cfg;
}

}  // namespace mdup
