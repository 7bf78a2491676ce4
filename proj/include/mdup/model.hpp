#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mdup/ops.hpp"
#include "mdup/tensor.hpp"

namespace mdup {

/// Architecture of the decoder-only LM and of the layers surgery may add.
struct ModelConfig {
    std::size_t n_layers = 8;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t ffn_hidden = 256;
    std::size_t vocab_text = 256;
    std::size_t vocab_speech = 0;
    std::size_t max_seq_len = 256;
    std::size_t conv_kernel_width = 3;
    std::size_t cgmlp_hidden = 128;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t vocab_total() const { return vocab_text + vocab_speech; }

    void validate() const {
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw std::invalid_argument("config: d_model must be a positive multiple of n_heads");
        if (head_dim() % 2 != 0) throw std::invalid_argument("config: head_dim must be even for rotary encoding");
        if (ffn_hidden == 0) throw std::invalid_argument("config: ffn_hidden must be positive");
        if (vocab_text == 0) throw std::invalid_argument("config: vocab_text must be positive");
        if (max_seq_len == 0) throw std::invalid_argument("config: max_seq_len must be positive");
        if (!(norm_eps > 0)) throw std::invalid_argument("config: norm_eps must be positive");
    }

    // Only needed once an E-Branchformer layer exists.
    void validate_ebranchformer() const {
        if (cgmlp_hidden == 0 || cgmlp_hidden % 2 != 0)
            throw std::invalid_argument("config: cgmlp_hidden must be a positive even number");
        if (conv_kernel_width == 0) throw std::invalid_argument("config: conv_kernel_width must be >= 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class TokenType : std::uint8_t { text = 0, speech = 1 };
using TokenTypeMask = std::vector<TokenType>;

// Ids at or above vocab_text are speech tokens.
inline TokenTypeMask token_types_for(std::span<const std::int32_t> ids, std::size_t vocab_text) {
    TokenTypeMask mask(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i)
        mask[i] = ids[i] >= static_cast<std::int32_t>(vocab_text) ? TokenType::speech : TokenType::text;
    return mask;
}

enum class LayerKind { standard, ebranchformer };

inline const char* to_string(LayerKind kind) {
    return kind == LayerKind::standard ? "standard" : "ebranchformer";
}

inline LayerKind parse_layer_kind(const std::string& s) {
    if (s == "standard") return LayerKind::standard;
    if (s == "ebranchformer") return LayerKind::ebranchformer;
    throw std::invalid_argument("unknown layer kind '" + s + "' (expected standard|ebranchformer)");
}

/// Bias-free projection y = x W, optionally with a low-rank term (x A) B * scale.
template <typename T>
struct Linear {
    Tensor<T> weight;  // (fan_in x fan_out)
    Tensor<T> lora_a;  // (fan_in x r)
    Tensor<T> lora_b;  // (r x fan_out)
    T lora_scale = T(0);

    bool has_lora() const { return lora_a.defined(); }

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto y = matmul(x, weight);
        if (has_lora()) y = add(y, scale(matmul(matmul(x, lora_a), lora_b), lora_scale));
        return y;
    }
};

template <typename T>
struct Attention {
    Linear<T> q, k, v, o;
};

template <typename T>
struct SwiGLU {
    Linear<T> gate, up, down;
};

template <typename T>
struct TransformerBlock {
    Tensor<T> attn_norm;
    Attention<T> attn;
    Tensor<T> ffn_norm;
    SwiGLU<T> ffn;
};

template <typename T>
struct CgMLP {
    Linear<T> up;          // d -> cgmlp_hidden
    Tensor<T> gate_norm;   // cgmlp_hidden/2
    Tensor<T> conv;        // (K x cgmlp_hidden/2)
    Linear<T> down;        // cgmlp_hidden/2 -> d
};

template <typename T>
struct MergeModule {
    Tensor<T> dw_conv;     // (K x 2d)
    Linear<T> pointwise;   // 2d -> 2d, output projection of the depthwise conv
    Linear<T> proj;        // 2d -> d
};

template <typename T>
struct EBranchformerBlock {
    Tensor<T> attn_norm;  // shared by both branches
    Attention<T> attn;
    CgMLP<T> cgmlp;
    MergeModule<T> merge;
    Tensor<T> ffn_norm;
    SwiGLU<T> ffn;
};

template <typename T>
using Block = std::variant<TransformerBlock<T>, EBranchformerBlock<T>>;

template <typename T>
LayerKind kind_of(const Block<T>& b) {
    return std::holds_alternative<TransformerBlock<T>>(b) ? LayerKind::standard : LayerKind::ebranchformer;
}

/// Decoder-only LM with tied embeddings. Original text rows and appended
/// speech rows are separate tensors so they can be frozen independently.
template <typename T>
struct Model {
    ModelConfig config;
    Tensor<T> embed_text;    // (V_t x d)
    Tensor<T> embed_speech;  // (V_s x d), undefined before vocabulary expansion
    std::vector<Block<T>> layers;
    Tensor<T> final_norm;
};

// ---------------------------------------------------------------------------
// Parameter enumeration. Names are positional ("layers.3.attn.q") and are the
// keys used by freeze manifests, optimizer state and checkpoints.

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

namespace detail {

template <typename T>
void visit_linear(const std::string& name, Linear<T>& lin, const ParamVisitor<T>& fn) {
    fn(name, lin.weight);
    if (lin.has_lora()) {
        fn(name + ".lora_a", lin.lora_a);
        fn(name + ".lora_b", lin.lora_b);
    }
}

template <typename T>
void visit_attention(const std::string& p, Attention<T>& a, const ParamVisitor<T>& fn) {
    visit_linear(p + "attn.q", a.q, fn);
    visit_linear(p + "attn.k", a.k, fn);
    visit_linear(p + "attn.v", a.v, fn);
    visit_linear(p + "attn.o", a.o, fn);
}

template <typename T>
void visit_ffn(const std::string& p, SwiGLU<T>& f, const ParamVisitor<T>& fn) {
    visit_linear(p + "ffn.gate", f.gate, fn);
    visit_linear(p + "ffn.up", f.up, fn);
    visit_linear(p + "ffn.down", f.down, fn);
}

}  // namespace detail

template <typename T>
void for_each_block_parameter(const std::string& prefix, Block<T>& block, const ParamVisitor<T>& fn) {
    if (auto* b = std::get_if<TransformerBlock<T>>(&block)) {
        fn(prefix + "attn_norm", b->attn_norm);
        detail::visit_attention(prefix, b->attn, fn);
        fn(prefix + "ffn_norm", b->ffn_norm);
        detail::visit_ffn(prefix, b->ffn, fn);
    } else {
        auto& e = std::get<EBranchformerBlock<T>>(block);
        fn(prefix + "attn_norm", e.attn_norm);
        detail::visit_attention(prefix, e.attn, fn);
        detail::visit_linear(prefix + "cgmlp.up", e.cgmlp.up, fn);
        fn(prefix + "cgmlp.gate_norm", e.cgmlp.gate_norm);
        fn(prefix + "cgmlp.conv", e.cgmlp.conv);
        detail::visit_linear(prefix + "cgmlp.down", e.cgmlp.down, fn);
        fn(prefix + "merge.dw_conv", e.merge.dw_conv);
        detail::visit_linear(prefix + "merge.pointwise", e.merge.pointwise, fn);
        detail::visit_linear(prefix + "merge.proj", e.merge.proj, fn);
        fn(prefix + "ffn_norm", e.ffn_norm);
        detail::visit_ffn(prefix, e.ffn, fn);
    }
}

inline std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + "."; }

template <typename T>
void for_each_parameter(Model<T>& model, const ParamVisitor<T>& fn) {
    fn("embed.text", model.embed_text);
    if (model.embed_speech.defined()) fn("embed.speech", model.embed_speech);
    for (std::size_t i = 0; i < model.layers.size(); ++i) for_each_block_parameter(layer_prefix(i), model.layers[i], fn);
    fn("final_norm", model.final_norm);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> named_parameters(const Model<T>& model) {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    // Handles alias storage, so visiting a shallow copy exposes the same tensors.
    auto view = model;
    for_each_parameter<T>(view, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
}

template <typename T>
std::size_t parameter_count(const Model<T>& model) {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters(model)) n += t.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Initialization

namespace init {

template <typename T>
Tensor<T> uniform(Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v));
}

// Uniform in +-1/sqrt(fan_in).
template <typename T>
Linear<T> linear(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    return Linear<T>{uniform<T>({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng), {}, {}, T(0)};
}

template <typename T>
Attention<T> attention(const ModelConfig& c, std::mt19937_64& rng) {
    return {linear<T>(c.d_model, c.d_model, rng), linear<T>(c.d_model, c.d_model, rng),
            linear<T>(c.d_model, c.d_model, rng), linear<T>(c.d_model, c.d_model, rng)};
}

template <typename T>
SwiGLU<T> swiglu(const ModelConfig& c, std::mt19937_64& rng) {
    return {linear<T>(c.d_model, c.ffn_hidden, rng), linear<T>(c.d_model, c.ffn_hidden, rng),
            linear<T>(c.ffn_hidden, c.d_model, rng)};
}

template <typename T>
TransformerBlock<T> transformer_block(const ModelConfig& c, std::mt19937_64& rng) {
    TransformerBlock<T> b;
    b.attn_norm = Tensor<T>::full({c.d_model}, T(1));
    b.attn = attention<T>(c, rng);
    b.ffn_norm = Tensor<T>::full({c.d_model}, T(1));
    b.ffn = swiglu<T>(c, rng);
    return b;
}

template <typename T>
CgMLP<T> cgmlp(const ModelConfig& c, std::mt19937_64& rng) {
    const std::size_t half = c.cgmlp_hidden / 2;
    CgMLP<T> m;
    m.up = linear<T>(c.d_model, c.cgmlp_hidden, rng);
    m.gate_norm = Tensor<T>::full({half}, T(1));
    m.conv = uniform<T>({c.conv_kernel_width, half}, 1.0 / std::sqrt(static_cast<double>(c.conv_kernel_width)), rng);
    m.down = linear<T>(half, c.d_model, rng);
    return m;
}

template <typename T>
EBranchformerBlock<T> ebranchformer_block(const ModelConfig& c, std::mt19937_64& rng) {
    c.validate_ebranchformer();
    const std::size_t d2 = 2 * c.d_model;
    EBranchformerBlock<T> b;
    b.attn_norm = Tensor<T>::full({c.d_model}, T(1));
    b.attn = attention<T>(c, rng);
    b.cgmlp = cgmlp<T>(c, rng);
    b.merge.dw_conv = uniform<T>({c.conv_kernel_width, d2}, 1.0 / std::sqrt(static_cast<double>(c.conv_kernel_width)), rng);
    b.merge.pointwise = linear<T>(d2, d2, rng);
    b.merge.proj = linear<T>(d2, c.d_model, rng);
    b.ffn_norm = Tensor<T>::full({c.d_model}, T(1));
    b.ffn = swiglu<T>(c, rng);
    return b;
}

}  // namespace init

// Fresh base model: n standard blocks, text vocabulary only.
template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Model<T> m;
    m.config = cfg;
    m.config.vocab_speech = 0;
    m.embed_text = init::normal<T>({cfg.vocab_text, cfg.d_model}, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) m.layers.emplace_back(init::transformer_block<T>(cfg, rng));
    m.final_norm = Tensor<T>::full({cfg.d_model}, T(1));
    return m;
}

// Independent copy of every tensor in a block.
template <typename T>
Block<T> clone_block(const Block<T>& block) {
    Block<T> out = block;
    for_each_block_parameter<T>("", out, [](const std::string&, Tensor<T>& t) { t = t.clone(); });
    return out;
}

template <typename T>
Model<T> clone_model(const Model<T>& model) {
    Model<T> out = model;
    for_each_parameter<T>(out, [](const std::string&, Tensor<T>& t) { t = t.clone(); });
    return out;
}

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
Tensor<T> mhsa_forward(const Attention<T>& attn, const ModelConfig& cfg, const Tensor<T>& xn,
                       std::span<const std::int32_t> positions) {
    auto q = rope(attn.q(xn), positions, cfg.n_heads, cfg.rope_base);
    auto k = rope(attn.k(xn), positions, cfg.n_heads, cfg.rope_base);
    auto v = attn.v(xn);
    return attn.o(causal_attention(q, k, v, cfg.n_heads));
}

template <typename T>
Tensor<T> ffn_forward(const SwiGLU<T>& ffn, const Tensor<T>& x) {
    return ffn.down(mul(silu(ffn.gate(x)), ffn.up(x)));
}

namespace detail {

inline void check_sequence(const ModelConfig& cfg, std::size_t len, std::size_t positions) {
    if (len > cfg.max_seq_len) {
        throw std::invalid_argument("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                                    std::to_string(cfg.max_seq_len));
    }
    if (positions != len) throw std::invalid_argument("positions length does not match sequence length");
}

}  // namespace detail

/// H = X + MHSA(LN(X)); Y = H + FFN(LN(H)).
template <typename T>
Tensor<T> transformer_block_forward(const TransformerBlock<T>& b, const ModelConfig& cfg, const Tensor<T>& x,
                                    std::span<const std::int32_t> positions) {
    detail::check_sequence(cfg, x.dim(0), positions.size());
    const T eps = static_cast<T>(cfg.norm_eps);
    auto h = add(x, mhsa_forward(b.attn, cfg, rms_norm(x, b.attn_norm, eps), positions));
    return add(h, ffn_forward(b.ffn, rms_norm(h, b.ffn_norm, eps)));
}

/// Convolutional gating MLP on an already-normalized input:
/// Z = GELU(x Wup) = [A | B], out = (A * conv(norm(B))) Wdown.
template <typename T>
Tensor<T> cgmlp_forward(const CgMLP<T>& m, const ModelConfig& cfg, const Tensor<T>& x_normed) {
    const std::size_t hidden = m.up.weight.dim(1);
    if (hidden % 2 != 0) throw std::invalid_argument("cgmlp: hidden width must be even");
    const std::size_t half = hidden / 2;
    auto z = gelu(m.up(x_normed));
    auto a = slice_cols(z, 0, half);
    auto gate = causal_depthwise_conv(rms_norm(slice_cols(z, half, half), m.gate_norm, static_cast<T>(cfg.norm_eps)),
                                      m.conv);
    return m.down(mul(a, gate));
}

/// Global (MHSA) and local (cgMLP) branches merged by
/// (Hc + DwConv(Hc)) Wmerge with Hc = [H_G | H_L]. Only speech positions take
/// the merged output; text positions use the MHSA output alone. A single FFN
/// follows for every position.
template <typename T>
Tensor<T> ebranchformer_block_forward(const EBranchformerBlock<T>& b, const ModelConfig& cfg, const Tensor<T>& x,
                                      std::span<const std::int32_t> positions, const TokenTypeMask& mask) {
    detail::check_sequence(cfg, x.dim(0), positions.size());
    if (mask.size() != x.dim(0)) {
        throw std::invalid_argument("ebranchformer: token-type mask length " + std::to_string(mask.size()) +
                                    " does not match sequence length " + std::to_string(x.dim(0)));
    }
    const T eps = static_cast<T>(cfg.norm_eps);
    auto xn = rms_norm(x, b.attn_norm, eps);
    auto global = mhsa_forward(b.attn, cfg, xn, positions);

    std::vector<bool> is_speech(mask.size());
    bool any_speech = false;
    for (std::size_t i = 0; i < mask.size(); ++i) any_speech = any_speech || (is_speech[i] = mask[i] == TokenType::speech);

    Tensor<T> h;
    if (!any_speech) {
        h = add(x, global);
    } else {
        auto local = cgmlp_forward(b.cgmlp, cfg, xn);
        auto hc = concat_cols(global, local);
        auto refined = add(hc, b.merge.pointwise(causal_depthwise_conv(hc, b.merge.dw_conv)));
        auto merged = b.merge.proj(refined);
        h = where_rows(is_speech, add(x, merged), add(x, global));
    }
    return add(h, ffn_forward(b.ffn, rms_norm(h, b.ffn_norm, eps)));
}

template <typename T>
Tensor<T> block_forward(const Block<T>& block, const ModelConfig& cfg, const Tensor<T>& x,
                        std::span<const std::int32_t> positions, const TokenTypeMask& mask) {
    if (const auto* b = std::get_if<TransformerBlock<T>>(&block)) return transformer_block_forward(*b, cfg, x, positions);
    return ebranchformer_block_forward(std::get<EBranchformerBlock<T>>(block), cfg, x, positions, mask);
}

template <typename T>
Tensor<T> embedding_table(const Model<T>& model) {
    return model.embed_speech.defined() ? concat_rows(model.embed_text, model.embed_speech) : model.embed_text;
}

inline std::vector<std::int32_t> default_positions(std::size_t len) {
    std::vector<std::int32_t> p(len);
    for (std::size_t i = 0; i < len; ++i) p[i] = static_cast<std::int32_t>(i);
    return p;
}

/// embed -> blocks -> final norm -> tied output head; (T x vocab_total).
template <typename T>
Tensor<T> model_forward(const Model<T>& model, std::span<const std::int32_t> ids, const TokenTypeMask& mask) {
    const auto& cfg = model.config;
    if (ids.empty()) throw std::invalid_argument("model_forward: empty input");
    if (mask.size() != ids.size()) throw std::invalid_argument("model_forward: mask length does not match input");
    if (ids.size() > cfg.max_seq_len) {
        throw std::invalid_argument("model_forward: sequence length " + std::to_string(ids.size()) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    const auto vocab = static_cast<std::int32_t>(cfg.vocab_total());
    for (auto id : ids)
        if (id < 0 || id >= vocab)
            throw std::out_of_range("model_forward: token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(vocab));
    const auto positions = default_positions(ids.size());
    auto table = embedding_table(model);
    auto x = embedding(table, ids);
    for (const auto& block : model.layers) x = block_forward(block, cfg, x, positions, mask);
    x = rms_norm(x, model.final_norm, static_cast<T>(cfg.norm_eps));
    return matmul(x, transpose(table));
}

template <typename T>
Tensor<T> model_forward(const Model<T>& model, std::span<const std::int32_t> ids) {
    return model_forward(model, ids, token_types_for(ids, model.config.vocab_text));
}

}  // namespace mdup
