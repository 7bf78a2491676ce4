#include <gtest/gtest.h>

#include <cstdio>

#include "mdup/checkpoint.hpp"
#include "mdup/eval.hpp"

namespace mdup {
namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 4;
    c.d_model = 16;
    c.n_heads = 2;
    c.ffn_hidden = 32;
    c.vocab_text = 32;
    c.max_seq_len = 64;
    c.cgmlp_hidden = 16;
    return c;
}

Checkpoint base_checkpoint() {
    auto m = init_model<float>(small_config(), 1);
    auto man = base_manifest(m);
    return {m, man, std::nullopt, Json::object()};
}

Checkpoint upscaled_checkpoint(LayerKind kind) {
    auto ex = expand_vocabulary(init_model<float>(small_config(), 2), 24, 3);
    auto up = upscale(ex.model, ex.manifest, compute_placement(4, 2, PlacementStrategy::sandwich, kind), 4);
    return {up.model, up.manifest, std::nullopt, Json{{"note", "upscaled"}}};
}

void expect_same_model(const Model<float>& a, const Model<float>& b) {
    const auto pa = named_parameters(a), pb = named_parameters(b);
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].first, pb[i].first);
        EXPECT_EQ(pa[i].second.shape(), pb[i].second.shape());
        EXPECT_TRUE(std::equal(pa[i].second.data().begin(), pa[i].second.data().end(), pb[i].second.data().begin()))
            << pa[i].first;
    }
    std::vector<std::int32_t> ids{1, 5, 40, 41, 30, 2, 7};
    if (a.config.vocab_speech == 0) ids = {1, 5, 9, 30, 2, 7};
    const auto la = model_forward(a, ids), lb = model_forward(b, ids);
    EXPECT_TRUE(std::equal(la.data().begin(), la.data().end(), lb.data().begin()));
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
    for (const auto& ck : {base_checkpoint(), upscaled_checkpoint(LayerKind::standard), upscaled_checkpoint(LayerKind::ebranchformer)}) {
        const auto bytes = serialize_checkpoint(ck);
        const auto back = parse_checkpoint(bytes);
        EXPECT_EQ(serialize_checkpoint(back), bytes);
        expect_same_model(ck.model, back.model);
        EXPECT_EQ(back.manifest, ck.manifest);
        EXPECT_EQ(back.meta, ck.meta);
        EXPECT_FALSE(back.optimizer.has_value());
    }
}

TEST(Checkpoint, LoRAAndOptimizerStateSurvive) {
    auto ex = expand_vocabulary(init_model<float>(small_config(), 5), 24, 6);
    LoRAConfig lc = LoRAConfig::with_rank(3);
    lc.targets = {LoRATarget::q, LoRATarget::v, LoRATarget::down};
    auto lora = apply_lora(ex.model, ex.manifest, lc, 7);
    // make the adapters non-trivial so a silent zero-load would show
    for (auto& [name, t] : named_parameters(lora.model))
        if (is_lora_name(name))
            for (auto& x : t.values()) x = 0.25f;
    auto st = OptimizerState<float>::for_manifest(lora.manifest);
    st.step = 17;
    float v = 0;
    for (auto& [name, mo] : st.moments) {
        for (auto& x : mo.m) x = (v += 0.5f);
        for (auto& x : mo.v) x = (v += 0.25f);
    }
    Checkpoint ck{lora.model, lora.manifest, st, Json{{"step", 17}}};
    const auto bytes = serialize_checkpoint(ck);
    const auto back = parse_checkpoint(bytes);
    EXPECT_EQ(serialize_checkpoint(back), bytes);
    expect_same_model(lora.model, back.model);
    ASSERT_TRUE(back.optimizer.has_value());
    EXPECT_EQ(back.optimizer->step, 17u);
    ASSERT_EQ(back.optimizer->moments.size(), st.moments.size());
    for (const auto& [name, mo] : st.moments) {
        EXPECT_EQ(back.optimizer->moments.at(name).m, mo.m) << name;
        EXPECT_EQ(back.optimizer->moments.at(name).v, mo.v) << name;
    }
    EXPECT_EQ(count_trainable(back.manifest), count_trainable(lora.manifest));
}

TEST(Checkpoint, AnySingleByteCorruptionIsDetected) {
    const auto bytes = serialize_checkpoint(upscaled_checkpoint(LayerKind::ebranchformer));
    // every header byte, then a stride through the payload and digest
    for (std::size_t i = 0; i < bytes.size(); i += (i < 2048 ? 1 : 97)) {
        auto bad = bytes;
        bad[i] = static_cast<char>(bad[i] ^ 0x40);
        EXPECT_THROW(parse_checkpoint(bad), CheckpointError) << "byte " << i;
    }
}

TEST(Checkpoint, TruncationAndBadMagicRejected) {
    const auto bytes = serialize_checkpoint(base_checkpoint());
    EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
    EXPECT_THROW(parse_checkpoint(bytes.substr(0, 10)), CheckpointError);
    EXPECT_THROW(parse_checkpoint(""), CheckpointError);
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(parse_checkpoint(bad), CheckpointError);
}

TEST(Checkpoint, DigestIsTheTrailingSha256) {
    const auto bytes = serialize_checkpoint(base_checkpoint());
    const auto d = sha256(bytes.substr(0, bytes.size() - 32));
    EXPECT_EQ(checkpoint_digest(bytes), to_hex(d));
    EXPECT_EQ(to_hex(sha256("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Checkpoint, ManifestMustCoverModel) {
    auto ck = base_checkpoint();
    ck.manifest.erase(ck.manifest.begin());
    EXPECT_THROW(serialize_checkpoint(ck), std::invalid_argument);
}

TEST(Checkpoint, SerializationIsDeterministic) {
    EXPECT_EQ(serialize_checkpoint(upscaled_checkpoint(LayerKind::standard)), serialize_checkpoint(upscaled_checkpoint(LayerKind::standard)));
}

TEST(Checkpoint, FileSaveLoad) {
    const std::string path = ::testing::TempDir() + "mdup_ck.bin";
    const auto ck = upscaled_checkpoint(LayerKind::standard);
    save_checkpoint(path, ck);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(read_file_bytes(path), serialize_checkpoint(back));
    std::remove(path.c_str());
    EXPECT_THROW(load_checkpoint(path), CheckpointError);
    EXPECT_THROW(save_checkpoint("/nonexistent-dir/x.bin", ck), CheckpointError);
}

}  // namespace
}  // namespace mdup
