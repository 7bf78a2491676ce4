#pragma once

// Checkpoint file layout (all integers and floats little-endian):
//
//   "MDUPCKPT"            8 bytes magic
//   u32 version           currently 1
//   u64 header_len
//   header                JSON: config, layer kinds, LoRA settings, ordered
//                         parameter table (name, shape, origin, trainable),
//                         optimizer step (or null), free-form meta
//   parameter data        f32 values of every table entry, in table order
//   optimizer moments     if present: m then v for each trainable entry, in table order
//   digest                32-byte SHA-256 of every preceding byte

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <stdexcept>
#include <string>

#include "mdup/config_io.hpp"

namespace mdup {

/// I/O failures, corrupt files and digest mismatches.
class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    Model<float> model;
    FreezeManifest manifest;
    std::optional<OptimizerState<float>> optimizer;
    Json meta = Json::object();
};

inline constexpr char kCheckpointMagic[8] = {'M', 'D', 'U', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::array<unsigned char, 32> sha256(const std::string& bytes) {
    std::array<unsigned char, 32> out{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32)
        throw CheckpointError("sha256: digest computation failed");
    return out;
}

inline std::string to_hex(std::span<const unsigned char> bytes) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (auto b : bytes) {
        s += digits[b >> 4];
        s += digits[b & 15];
    }
    return s;
}

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

inline void put_floats(std::string& out, std::span<const float> xs) {
    for (float x : xs) {
        std::uint32_t u;
        std::memcpy(&u, &x, 4);
        put_le(out, u, 4);
    }
}

class Reader {
  public:
    Reader(const std::string& s, std::size_t end) : s_(s), end_(end) {}
    std::uint64_t le(int bytes) {
        need(static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(bytes);
        return v;
    }
    std::string raw(std::size_t n) {
        need(n);
        auto out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    void floats(std::span<float> xs) {
        need(xs.size() * 4);
        for (auto& x : xs) {
            const auto u = static_cast<std::uint32_t>(le(4));
            std::memcpy(&x, &u, 4);
        }
    }
    std::size_t pos() const { return pos_; }

  private:
    void need(std::size_t n) const {
        if (pos_ + n > end_) throw CheckpointError("checkpoint: truncated data");
    }
    const std::string& s_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

inline std::optional<LoRAConfig> lora_settings(const Model<float>& model) {
    std::optional<LoRAConfig> cfg;
    for (auto block : model.layers) {
        std::visit(
            [&](auto& b) {
                for (auto t : kAllLoRATargets) {
                    const auto& lin = lora_target<float>(b, t);
                    if (!lin.has_lora()) continue;
                    if (!cfg) {
                        cfg = LoRAConfig{};
                        cfg->targets.clear();
                        cfg->rank = lin.lora_a.dim(1);
                        cfg->alpha = static_cast<double>(lin.lora_scale) * static_cast<double>(cfg->rank);
                    }
                    if (std::find(cfg->targets.begin(), cfg->targets.end(), t) == cfg->targets.end()) cfg->targets.push_back(t);
                }
            },
            block);
    }
    return cfg;
}

/// Model with the right structure; values are overwritten by the loader.
inline Model<float> skeleton(ModelConfig cfg, const std::vector<LayerKind>& kinds, const std::optional<LoRAConfig>& lora) {
    const std::size_t vs = cfg.vocab_speech;
    cfg.n_layers = kinds.size();
    auto m = init_model<float>(cfg, 0);
    std::mt19937_64 rng(0);
    for (std::size_t i = 0; i < kinds.size(); ++i)
        if (kinds[i] == LayerKind::ebranchformer) m.layers[i] = init::ebranchformer_block<float>(cfg, rng);
    if (vs) {
        m.embed_speech = Tensor<float>::zeros({vs, cfg.d_model});
        m.config.vocab_speech = vs;
    }
    if (lora) m = apply_lora(m, base_manifest(m), *lora, 0).model;
    return m;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    validate_manifest(ck.model, ck.manifest);
    const auto params = named_parameters(ck.model);

    Json header;
    header["config"] = config_to_json(ck.model.config);
    Json kinds = Json::array();
    for (const auto& b : ck.model.layers) kinds.push_back(to_string(kind_of(b)));
    header["layers"] = kinds;
    if (auto lora = detail::lora_settings(ck.model)) {
        Json targets = Json::array();
        for (auto t : lora->targets) targets.push_back(to_string(t));
        header["lora"] = {{"rank", lora->rank}, {"alpha", lora->alpha}, {"targets", targets}};
    } else {
        header["lora"] = nullptr;
    }
    Json table = Json::array();
    for (const auto& [name, t] : params) {
        const auto& e = ck.manifest.at(name);
        table.push_back({{"name", name}, {"shape", t.shape()}, {"origin", to_string(e.origin)}, {"trainable", e.trainable}});
    }
    header["parameters"] = table;
    header["optimizer"] = ck.optimizer ? Json{{"step", ck.optimizer->step}} : Json(nullptr);
    header["meta"] = ck.meta;
    const std::string hs = header.dump();

    std::string out(kCheckpointMagic, 8);
    detail::put_le(out, kCheckpointVersion, 4);
    detail::put_le(out, hs.size(), 8);
    out += hs;
    for (const auto& [name, t] : params) detail::put_floats(out, t.data());
    if (ck.optimizer) {
        for (const auto& [name, t] : params) {
            if (!ck.manifest.at(name).trainable) continue;
            auto it = ck.optimizer->moments.find(name);
            if (it == ck.optimizer->moments.end()) throw CheckpointError("checkpoint: optimizer state lacks '" + name + "'");
            detail::put_floats(out, it->second.m);
            detail::put_floats(out, it->second.v);
        }
    }
    const auto digest = sha256(out);
    out.append(reinterpret_cast<const char*>(digest.data()), digest.size());
    return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 8 + 4 + 8 + 32 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw CheckpointError("checkpoint: not a checkpoint file (bad magic)");
    const std::size_t body = bytes.size() - 32;
    const auto digest = sha256(bytes.substr(0, body));
    if (std::memcmp(digest.data(), bytes.data() + body, 32) != 0) throw CheckpointError("checkpoint: digest mismatch");

    detail::Reader rd(bytes, body);
    rd.raw(8);
    if (const auto v = rd.le(4); v != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(v));
    Json header;
    try {
        header = Json::parse(rd.raw(rd.le(8)));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
    }

    Checkpoint ck;
    try {
        auto cfg = config_from_json<ModelConfig>(header.at("config"), "config");
        std::vector<LayerKind> kinds;
        for (const auto& k : header.at("layers")) kinds.push_back(parse_layer_kind(k.get<std::string>()));
        std::optional<LoRAConfig> lora;
        if (!header.at("lora").is_null()) {
            LoRAConfig lc;
            lc.rank = header["lora"].at("rank");
            lc.alpha = header["lora"].at("alpha");
            lc.targets.clear();
            for (const auto& t : header["lora"].at("targets")) lc.targets.push_back(parse_lora_target(t.get<std::string>()));
            lora = lc;
        }
        ck.model = detail::skeleton(cfg, kinds, lora);
        if (!(ck.model.config == cfg)) throw CheckpointError("checkpoint: config does not match its layer table");
        auto params = named_parameters(ck.model);
        const auto& table = header.at("parameters");
        if (table.size() != params.size())
            throw CheckpointError("checkpoint: parameter table has " + std::to_string(table.size()) + " entries, model needs " +
                                  std::to_string(params.size()));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& e = table[i];
            auto& [name, t] = params[i];
            if (e.at("name") != name || e.at("shape").get<Shape>() != t.shape())
                throw CheckpointError("checkpoint: entry " + std::to_string(i) + " ('" + e.at("name").get<std::string>() +
                                      "') does not match expected '" + name + "' " + shape_str(t.shape()));
            ck.manifest[name] = {parse_origin(e.at("origin")), e.at("trainable").get<bool>(), t.numel()};
        }
        for (auto& [name, t] : params) rd.floats(t.values());
        if (!header.at("optimizer").is_null()) {
            OptimizerState<float> st;
            st.step = header["optimizer"].at("step");
            for (auto& [name, t] : params) {
                if (!ck.manifest.at(name).trainable) continue;
                auto& mo = st.moments[name];
                mo.m.resize(t.numel());
                mo.v.resize(t.numel());
                rd.floats(mo.m);
                rd.floats(mo.v);
            }
            ck.optimizer = std::move(st);
        }
        ck.meta = header.at("meta");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    if (rd.pos() != body) throw CheckpointError("checkpoint: trailing bytes before digest");
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const auto bytes = serialize_checkpoint(ck);
    std::ofstream os(path, std::ios::binary);
    if (!os || !os.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
        throw CheckpointError("checkpoint: cannot write " + path);
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot read " + path);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file_bytes(path)); }

/// Hex SHA-256 of the serialized checkpoint (its trailing digest field).
inline std::string checkpoint_digest(const std::string& bytes) {
    if (bytes.size() < 32) throw CheckpointError("checkpoint: too short");
    return to_hex({reinterpret_cast<const unsigned char*>(bytes.data()) + bytes.size() - 32, 32});
}

}  // namespace mdup
