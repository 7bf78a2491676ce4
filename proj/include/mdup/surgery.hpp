#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdup/model.hpp"

namespace mdup {

// ---------------------------------------------------------------------------
// Placement

enum class PlacementStrategy { interleaved, bottom, middle, top, sandwich };

inline constexpr PlacementStrategy kAllStrategies[] = {PlacementStrategy::interleaved, PlacementStrategy::bottom,
                                                       PlacementStrategy::middle, PlacementStrategy::top,
                                                       PlacementStrategy::sandwich};

inline const char* to_string(PlacementStrategy s) {
    switch (s) {
        case PlacementStrategy::interleaved: return "interleaved";
        case PlacementStrategy::bottom: return "bottom";
        case PlacementStrategy::middle: return "middle";
        case PlacementStrategy::top: return "top";
        case PlacementStrategy::sandwich: return "sandwich";
    }
    return "?";
}

inline PlacementStrategy parse_placement(const std::string& s) {
    for (auto p : kAllStrategies)
        if (s == to_string(p)) return p;
    throw std::invalid_argument("unknown placement strategy '" + s +
                                "' (expected interleaved|bottom|middle|top|sandwich)");
}

class PlacementError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct Insertion {
    std::size_t after;   // 1-based index of the original layer the copy follows
    std::size_t source;  // 1-based index of the original layer copied
    LayerKind kind;

    bool operator==(const Insertion&) const = default;
};

struct UpscalePlan {
    std::vector<Insertion> entries;

    std::vector<std::size_t> after_indices() const {
        std::vector<std::size_t> out;
        for (const auto& e : entries) out.push_back(e.after);
        return out;
    }

    void validate(std::size_t n) const {
        if (entries.empty()) throw PlacementError("plan: at least one insertion is required (m >= 1)");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& e = entries[i];
            if (e.after < 1 || e.after > n)
                throw PlacementError("plan: insertion after layer " + std::to_string(e.after) + " outside 1.." +
                                     std::to_string(n));
            if (e.source != e.after) throw PlacementError("plan: every insertion must copy the layer it follows");
            if (i > 0 && e.after < entries[i - 1].after) throw PlacementError("plan: after-indices must be non-decreasing");
        }
    }
};

/// Contiguous block of original layers [offset+1, offset+length] that a
/// strategy distributes insertions over.
struct PlacementRange {
    std::size_t offset;
    std::size_t length;
    std::size_t count;  // insertions in this range
};

inline std::vector<PlacementRange> placement_ranges(std::size_t n, std::size_t m, PlacementStrategy strategy) {
    if (m < 1) throw PlacementError("placement: m >= 1 required");
    if (m > n) throw PlacementError("placement: m <= n required (m=" + std::to_string(m) + ", n=" + std::to_string(n) + ")");
    auto require_div = [&](std::size_t k, const char* what) {
        if (n % k != 0) throw PlacementError(std::string("placement: ") + what + " requires n divisible by " +
                                             std::to_string(k) + " (n=" + std::to_string(n) + ")");
    };
    std::vector<PlacementRange> ranges;
    switch (strategy) {
        case PlacementStrategy::interleaved: ranges = {{0, n, m}}; break;
        case PlacementStrategy::bottom: require_div(2, "bottom"); ranges = {{0, n / 2, m}}; break;
        case PlacementStrategy::top: require_div(2, "top"); ranges = {{n / 2, n / 2, m}}; break;
        case PlacementStrategy::middle: require_div(4, "middle"); ranges = {{n / 4, n / 2, m}}; break;
        case PlacementStrategy::sandwich:
            require_div(4, "sandwich");
            if (m % 2 != 0) throw PlacementError("placement: sandwich requires an even m (m=" + std::to_string(m) + ")");
            ranges = {{0, n / 4, m / 2}, {3 * n / 4, n / 4, m / 2}};
            break;
    }
    for (const auto& r : ranges)
        if (r.count > r.length)
            throw PlacementError(std::string("placement: m exceeds the capacity of the ") + to_string(strategy) +
                                 " range (" + std::to_string(r.count) + " > " + std::to_string(r.length) + ")");
    return ranges;
}

/// after(k) = offset + ceil(length * k / count), k = 1..count, per range.
inline UpscalePlan compute_placement(std::size_t n, std::size_t m, PlacementStrategy strategy, LayerKind kind) {
    UpscalePlan plan;
    for (const auto& r : placement_ranges(n, m, strategy)) {
        for (std::size_t k = 1; k <= r.count; ++k) {
            const std::size_t after = r.offset + (r.length * k + r.count - 1) / r.count;
            plan.entries.push_back({after, after, kind});
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Freeze manifest

enum class Origin { base, added, new_vocab_row, lora };

inline const char* to_string(Origin o) {
    switch (o) {
        case Origin::base: return "base";
        case Origin::added: return "added";
        case Origin::new_vocab_row: return "new-vocab-row";
        case Origin::lora: return "lora";
    }
    return "?";
}

inline Origin parse_origin(const std::string& s) {
    for (auto o : {Origin::base, Origin::added, Origin::new_vocab_row, Origin::lora})
        if (s == to_string(o)) return o;
    throw std::invalid_argument("unknown parameter origin '" + s + "'");
}

struct ManifestEntry {
    Origin origin = Origin::base;
    bool trainable = false;
    std::size_t numel = 0;

    bool operator==(const ManifestEntry&) const = default;
};

/// Authoritative name -> (origin, trainable) table for one model.
using FreezeManifest = std::map<std::string, ManifestEntry>;

inline std::size_t count_trainable(const FreezeManifest& manifest) {
    std::size_t n = 0;
    for (const auto& [name, e] : manifest)
        if (e.trainable) n += e.numel;
    return n;
}

inline std::size_t count_total(const FreezeManifest& manifest) {
    std::size_t n = 0;
    for (const auto& [name, e] : manifest) n += e.numel;
    return n;
}

inline bool is_lora_name(const std::string& name) {
    auto ends = [&](const char* suf) {
        const std::string s(suf);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends(".lora_a") || ends(".lora_b");
}

// Manifest of a model with no added layers: speech rows and LoRA adapters are
// trainable, everything else is frozen base.
template <typename T>
FreezeManifest base_manifest(const Model<T>& model) {
    FreezeManifest m;
    for (const auto& [name, t] : named_parameters(model)) {
        Origin o = Origin::base;
        if (name == "embed.speech") o = Origin::new_vocab_row;
        else if (is_lora_name(name)) o = Origin::lora;
        m[name] = {o, o != Origin::base, t.numel()};
    }
    return m;
}

// Full fine-tuning: every parameter trainable, origins unchanged.
inline FreezeManifest full_finetune_manifest(FreezeManifest m) {
    for (auto& [name, e] : m) e.trainable = true;
    return m;
}

template <typename T>
void validate_manifest(const Model<T>& model, const FreezeManifest& manifest) {
    std::size_t seen = 0;
    for (const auto& [name, t] : named_parameters(model)) {
        auto it = manifest.find(name);
        if (it == manifest.end()) throw std::invalid_argument("manifest: parameter '" + name + "' is missing");
        if (it->second.numel != t.numel())
            throw std::invalid_argument("manifest: parameter '" + name + "' has " + std::to_string(t.numel()) +
                                        " elements, manifest says " + std::to_string(it->second.numel));
        ++seen;
    }
    if (seen != manifest.size()) throw std::invalid_argument("manifest: lists parameters the model does not have");
}

template <typename T>
struct SurgeryResult {
    Model<T> model;
    FreezeManifest manifest;
};

namespace detail {

// Parses "layers.<i>.<rest>" into (i, rest).
inline std::optional<std::pair<std::size_t, std::string>> split_layer_name(const std::string& name) {
    static const std::string prefix = "layers.";
    if (name.rfind(prefix, 0) != 0) return std::nullopt;
    const auto dot = name.find('.', prefix.size());
    if (dot == std::string::npos) return std::nullopt;
    return std::make_pair(static_cast<std::size_t>(std::stoul(name.substr(prefix.size(), dot - prefix.size()))),
                          name.substr(dot + 1));
}

template <typename T>
void add_block_entries(FreezeManifest& m, std::size_t index, const Block<T>& block, Origin origin, bool trainable) {
    auto copy = block;
    for_each_block_parameter<T>(layer_prefix(index), copy, [&](const std::string& name, Tensor<T>& t) {
        m[name] = {origin, trainable, t.numel()};
    });
}

// Rewrites layer-scoped entries through old index -> new index.
inline FreezeManifest remap_layers(const FreezeManifest& m, const std::map<std::size_t, std::size_t>& old_to_new) {
    FreezeManifest out;
    for (const auto& [name, e] : m) {
        if (auto parts = split_layer_name(name)) {
            auto it = old_to_new.find(parts->first);
            if (it == old_to_new.end()) continue;
            out[layer_prefix(it->second) + parts->second] = e;
        } else {
            out[name] = e;
        }
    }
    return out;
}

template <typename T>
void zero_fill(Tensor<T>& t) {
    std::fill(t.values().begin(), t.values().end(), T(0));
}

}  // namespace detail

/// Copy of `source` whose output projections are zeroed, so the block is the
/// identity map at initialization.
template <typename T>
TransformerBlock<T> function_preserving_transformer_copy(const TransformerBlock<T>& source) {
    Block<T> copy = clone_block<T>(Block<T>(source));
    auto b = std::get<TransformerBlock<T>>(copy);
    detail::zero_fill(b.attn.o.weight);
    detail::zero_fill(b.ffn.down.weight);
    return b;
}

/// E-Branchformer block seeded from a standard block: attention and FFN are
/// copied, the cgMLP is fresh, W^O = 0, FFN down = 0, the merge depthwise
/// kernel and its pointwise projection are 0, and W_merge = [I; 0].
template <typename T>
EBranchformerBlock<T> function_preserving_ebranchformer(const TransformerBlock<T>& source, const ModelConfig& cfg,
                                                        std::mt19937_64& rng) {
    cfg.validate_ebranchformer();
    auto copy = function_preserving_transformer_copy(source);
    EBranchformerBlock<T> e;
    e.attn_norm = copy.attn_norm;
    e.attn = copy.attn;
    e.ffn_norm = copy.ffn_norm;
    e.ffn = copy.ffn;
    e.cgmlp = init::cgmlp<T>(cfg, rng);
    const std::size_t d = cfg.d_model, d2 = 2 * d;
    e.merge.dw_conv = Tensor<T>::zeros({cfg.conv_kernel_width, d2});
    e.merge.pointwise = Linear<T>{Tensor<T>::zeros({d2, d2}), {}, {}, T(0)};
    auto proj = Tensor<T>::zeros({d2, d});
    for (std::size_t i = 0; i < d; ++i) proj[i * d + i] = T(1);
    e.merge.proj = Linear<T>{proj, {}, {}, T(0)};
    return e;
}

/// Inserts the plan's layers after their source layers. Base tensors are
/// shared with `base` (same storage); only the added layers are new.
template <typename T>
SurgeryResult<T> upscale(const Model<T>& base, const FreezeManifest& base_man, const UpscalePlan& plan,
                         std::uint64_t seed) {
    validate_manifest(base, base_man);
    const std::size_t n = base.layers.size();
    plan.validate(n);
    for (const auto& [name, e] : base_man)
        if (e.origin == Origin::added || e.origin == Origin::lora)
            throw std::invalid_argument("upscale: base model already carries added layers or adapters ('" + name + "')");
    for (const auto& e : plan.entries) {
        if (e.kind == LayerKind::ebranchformer) base.config.validate_ebranchformer();
        if (!std::holds_alternative<TransformerBlock<T>>(base.layers[e.source - 1]))
            throw std::invalid_argument("upscale: source layer " + std::to_string(e.source) + " is not a standard block");
    }

    std::mt19937_64 rng(seed);
    SurgeryResult<T> out;
    out.model = base;
    out.model.layers.clear();
    std::map<std::size_t, std::size_t> old_to_new;
    std::vector<std::pair<std::size_t, Block<T>>> added;
    for (std::size_t i = 0; i < n; ++i) {
        old_to_new[i] = out.model.layers.size();
        out.model.layers.push_back(base.layers[i]);
        for (const auto& e : plan.entries) {
            if (e.after != i + 1) continue;
            const auto& src = std::get<TransformerBlock<T>>(base.layers[e.source - 1]);
            Block<T> blk = e.kind == LayerKind::standard
                               ? Block<T>(function_preserving_transformer_copy(src))
                               : Block<T>(function_preserving_ebranchformer(src, base.config, rng));
            added.emplace_back(out.model.layers.size(), blk);
            out.model.layers.push_back(std::move(blk));
        }
    }
    out.model.config.n_layers = out.model.layers.size();
    out.manifest = detail::remap_layers(base_man, old_to_new);
    for (const auto& [idx, blk] : added) detail::add_block_entries(out.manifest, idx, blk, Origin::added, true);
    validate_manifest(out.model, out.manifest);
    return out;
}

template <typename T>
SurgeryResult<T> upscale(const Model<T>& base, const UpscalePlan& plan, std::uint64_t seed) {
    return upscale(base, base_manifest(base), plan, seed);
}

/// Appends v_new rows to the tied embedding. Existing rows keep their storage
/// values bit-for-bit; new rows ~ N(0, std of the original text rows).
template <typename T>
SurgeryResult<T> expand_vocabulary(const Model<T>& model, const FreezeManifest& manifest, std::size_t v_new,
                                   std::uint64_t seed) {
    if (v_new < 1) throw std::invalid_argument("expand_vocabulary: v_new >= 1 required");
    validate_manifest(model, manifest);
    const std::size_t d = model.config.d_model;
    const auto& text = model.embed_text.values();
    double mean = 0, var = 0;
    for (T v : text) mean += static_cast<double>(v);
    mean /= static_cast<double>(text.size());
    for (T v : text) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
    const double stddev = std::sqrt(var / static_cast<double>(text.size()));

    std::mt19937_64 rng(seed);
    auto fresh = init::normal<T>({v_new, d}, stddev, rng);
    std::vector<T> rows;
    if (model.embed_speech.defined()) rows = model.embed_speech.values();
    rows.insert(rows.end(), fresh.values().begin(), fresh.values().end());

    SurgeryResult<T> out{model, manifest};
    out.model.config.vocab_speech = model.config.vocab_speech + v_new;
    out.model.embed_speech = Tensor<T>({out.model.config.vocab_speech, d}, std::move(rows));
    out.manifest["embed.speech"] = {Origin::new_vocab_row, true, out.model.embed_speech.numel()};
    return out;
}

template <typename T>
SurgeryResult<T> expand_vocabulary(const Model<T>& model, std::size_t v_new, std::uint64_t seed) {
    return expand_vocabulary(model, base_manifest(model), v_new, seed);
}

/// Removes every added layer and LoRA adapter. Remaining layers keep their
/// original order and storage; speech embedding rows are retained.
template <typename T>
Model<T> drop_added_layers(const Model<T>& model, const FreezeManifest& manifest) {
    validate_manifest(model, manifest);
    for (const char* name : {"embed.text", "final_norm"})
        if (manifest.at(name).origin != Origin::base)
            throw std::invalid_argument(std::string("drop_added_layers: '") + name + "' must be a base parameter");

    Model<T> out = model;
    out.layers.clear();
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        std::set<Origin> origins;
        auto block = model.layers[i];
        for_each_block_parameter<T>(layer_prefix(i), block, [&](const std::string& name, Tensor<T>&) {
            if (!is_lora_name(name)) origins.insert(manifest.at(name).origin);
        });
        if (origins == std::set<Origin>{Origin::added}) continue;
        if (origins != std::set<Origin>{Origin::base})
            throw std::invalid_argument("drop_added_layers: layer " + std::to_string(i) +
                                        " mixes base and non-base parameters");
        std::visit(
            [](auto& b) {
                auto strip = [](Linear<T>& l) {
                    l.lora_a = {};
                    l.lora_b = {};
                    l.lora_scale = T(0);
                };
                for (auto* l : {&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.ffn.gate, &b.ffn.up, &b.ffn.down}) strip(*l);
            },
            block);
        out.layers.push_back(std::move(block));
    }
    out.config.n_layers = out.layers.size();
    return out;
}

// ---------------------------------------------------------------------------
// LoRA

enum class LoRATarget { q, k, v, o, gate, up, down };

inline constexpr LoRATarget kAllLoRATargets[] = {LoRATarget::q,    LoRATarget::k,  LoRATarget::v,   LoRATarget::o,
                                                 LoRATarget::gate, LoRATarget::up, LoRATarget::down};

inline const char* to_string(LoRATarget t) {
    switch (t) {
        case LoRATarget::q: return "q";
        case LoRATarget::k: return "k";
        case LoRATarget::v: return "v";
        case LoRATarget::o: return "o";
        case LoRATarget::gate: return "gate";
        case LoRATarget::up: return "up";
        case LoRATarget::down: return "down";
    }
    return "?";
}

inline LoRATarget parse_lora_target(const std::string& s) {
    for (auto t : kAllLoRATargets)
        if (s == to_string(t)) return t;
    throw std::invalid_argument("unknown LoRA target '" + s + "' (expected q|k|v|o|gate|up|down)");
}

struct LoRAConfig {
    std::size_t rank = 8;
    double alpha = 16.0;
    std::vector<LoRATarget> targets{std::begin(kAllLoRATargets), std::end(kAllLoRATargets)};

    static LoRAConfig with_rank(std::size_t r) {
        LoRAConfig c;
        c.rank = r;
        c.alpha = 2.0 * static_cast<double>(r);
        return c;
    }
};

namespace detail {

template <typename T, typename B>
Linear<T>& lora_target(B& b, LoRATarget t) {
    switch (t) {
        case LoRATarget::q: return b.attn.q;
        case LoRATarget::k: return b.attn.k;
        case LoRATarget::v: return b.attn.v;
        case LoRATarget::o: return b.attn.o;
        case LoRATarget::gate: return b.ffn.gate;
        case LoRATarget::up: return b.ffn.up;
        case LoRATarget::down: return b.ffn.down;
    }
    throw std::logic_error("lora_target");
}

}  // namespace detail

/// Adds (alpha/r) * x A B to each targeted projection; A ~ U(+-1/sqrt(fan_in)),
/// B = 0, so the adapted model equals the base model at initialization.
template <typename T>
SurgeryResult<T> apply_lora(const Model<T>& base, const FreezeManifest& base_man, const LoRAConfig& cfg,
                            std::uint64_t seed) {
    if (cfg.rank < 1) throw std::invalid_argument("apply_lora: rank >= 1 required");
    if (cfg.targets.empty()) throw std::invalid_argument("apply_lora: empty target set");
    validate_manifest(base, base_man);
    std::mt19937_64 rng(seed);
    SurgeryResult<T> out{base, base_man};
    const T s = static_cast<T>(cfg.alpha / static_cast<double>(cfg.rank));
    for (std::size_t i = 0; i < out.model.layers.size(); ++i) {
        std::visit(
            [&](auto& b) {
                for (auto t : cfg.targets) {
                    auto& lin = detail::lora_target<T>(b, t);
                    if (lin.has_lora()) throw std::invalid_argument("apply_lora: projection already carries an adapter");
                    const std::size_t fan_in = lin.weight.dim(0), fan_out = lin.weight.dim(1);
                    lin.lora_a = init::uniform<T>({fan_in, cfg.rank}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
                    lin.lora_b = Tensor<T>::zeros({cfg.rank, fan_out});
                    lin.lora_scale = s;
                }
            },
            out.model.layers[i]);
    }
    for (const auto& [name, t] : named_parameters(out.model))
        if (is_lora_name(name)) out.manifest[name] = {Origin::lora, true, t.numel()};
    validate_manifest(out.model, out.manifest);
    return out;
}

/// Sum over layers and targets of (fan_in + fan_out): LoRA trainables per unit rank.
template <typename T>
std::size_t lora_params_per_rank(const Model<T>& model, const std::vector<LoRATarget>& targets) {
    std::size_t total = 0;
    for (auto block : model.layers) {
        std::visit(
            [&](auto& b) {
                for (auto t : targets) {
                    const auto& w = detail::lora_target<T>(b, t).weight;
                    total += w.dim(0) + w.dim(1);
                }
            },
            block);
    }
    return total;
}

/// Rank whose adapter count is closest to `target_count` (ties to the lower rank).
template <typename T>
std::size_t match_lora_rank(const Model<T>& model, const std::vector<LoRATarget>& targets, std::size_t target_count) {
    const std::size_t per_rank = lora_params_per_rank(model, targets);
    if (per_rank == 0) throw std::invalid_argument("match_lora_rank: no target projections");
    const std::size_t lo = std::max<std::size_t>(1, target_count / per_rank);
    const std::size_t hi = lo + 1;
    const auto dist = [&](std::size_t r) {
        const auto c = r * per_rank;
        return c > target_count ? c - target_count : target_count - c;
    };
    return dist(hi) < dist(lo) ? hi : lo;
}

}  // namespace mdup
