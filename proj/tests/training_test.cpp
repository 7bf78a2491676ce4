#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mdup/training.hpp"

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
    c.conv_kernel_width = 3;
    c.cgmlp_hidden = 16;
    return c;
}

data::SpeechCodebookSpec small_codebook() {
    data::SpeechCodebookSpec s;
    s.vocab_text = 32;
    s.vocab_speech = 24;
    s.k = 2;
    s.noise = 0;
    return s;
}

Dataset small_asr_dataset(std::size_t n, std::uint64_t seed) {
    data::SyntheticTextSpec ts;
    ts.vocab_text = 32;
    ts.min_len = 2;
    ts.max_len = 6;
    Dataset ds;
    ds.vocab_text = 32;
    ds.vocab_speech = 24;
    ds.asr = data::gen_asr_pairs(data::gen_text_corpus(ts, n, seed), data::SpeechCodebook(small_codebook()), seed);
    return ds;
}

SurgeryResult<float> small_upscaled(LayerKind kind, std::uint64_t seed = 1) {
    auto base = expand_vocabulary(init_model<float>(small_config(), seed), 24, seed);
    return upscale(base.model, base.manifest, compute_placement(4, 2, PlacementStrategy::interleaved, kind), seed);
}

TrainConfig quick_config(std::size_t steps) {
    TrainConfig c;
    c.peak_lr = 3e-3;
    c.final_lr = 3e-4;
    c.warmup_steps = 2;
    c.total_steps = steps;
    c.batch_size = 4;
    c.max_context = 64;
    return c;
}

std::map<std::string, std::vector<float>> snapshot(const Model<float>& m) {
    std::map<std::string, std::vector<float>> out;
    for (const auto& [n, t] : named_parameters(m)) out[n] = t.values();
    return out;
}

TEST(Schedule, EndpointsAndMidpoint) {
    TrainConfig c;
    EXPECT_EQ(lr_at(0, c), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(c.warmup_steps, c), c.peak_lr);
    EXPECT_DOUBLE_EQ(lr_at(c.total_steps, c), c.final_lr);
    EXPECT_DOUBLE_EQ(lr_at(c.total_steps + 500, c), c.final_lr);
    EXPECT_DOUBLE_EQ(lr_at((c.warmup_steps + c.total_steps) / 2, c), (c.peak_lr + c.final_lr) / 2);
    EXPECT_DOUBLE_EQ(lr_at(c.warmup_steps / 2, c), c.peak_lr / 2);
}

TEST(Schedule, ConfigInvariantsEnforced) {
    TrainConfig c;
    c.final_lr = 2 * c.peak_lr;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.warmup_steps = c.total_steps + 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_NO_THROW(TrainConfig{}.validate());
}

// f(x) = sum_i (x_i - c_i)^2 has its optimum at c.
TEST(AdamW, QuadraticConvergesToKnownOptimum) {
    const std::vector<double> target{1.5, -0.75, 3.0, 0.0, -2.25};
    auto x = Tensor<double>::zeros({target.size()}).set_requires_grad(true);
    auto c = Tensor<double>({target.size()}, target);
    TrainConfig cfg;
    cfg.peak_lr = 0.1;
    cfg.final_lr = 1e-4;
    cfg.warmup_steps = 0;
    cfg.total_steps = 200;
    cfg.weight_decay = 0;
    cfg.grad_clip = 0;
    OptimizerState<double> state;
    state.moments["x"] = {std::vector<double>(target.size()), std::vector<double>(target.size())};
    std::vector<std::pair<std::string, Tensor<double>>> params{{"x", x}};
    for (int i = 0; i < 200; ++i) {
        auto d = add(x, scale(c, -1.0));
        backward(sum(mul(d, d)));
        adamw_update(params, state, cfg, lr_at(state.step + 1, cfg));
    }
    for (std::size_t i = 0; i < target.size(); ++i) EXPECT_NEAR(x[i], target[i], 1e-3) << i;
}

TEST(TrainStep, ZeroTrainablesComputesLossButChangesNothing) {
    auto m = init_model<float>(small_config(), 2);
    auto man = base_manifest(m);
    auto before = snapshot(m);
    auto state = OptimizerState<float>::for_manifest(man);
    auto batch = data::make_text_batch({{1, 2, 3, 4}, {5, 6, 7}}, 32, 64);
    auto r = train_step(m, man, batch, state, quick_config(10));
    EXPECT_GT(r.loss, 0.0);
    EXPECT_TRUE(state.moments.empty());
    EXPECT_EQ(snapshot(m), before);
}

TEST(TrainStep, OptimizerStateOnlyForTrainableParameters) {
    for (auto kind : {LayerKind::standard, LayerKind::ebranchformer}) {
        auto up = small_upscaled(kind);
        auto state = OptimizerState<float>::for_manifest(up.manifest);
        std::set<std::string> trainable;
        for (const auto& [n, e] : up.manifest)
            if (e.trainable) trainable.insert(n);
        std::set<std::string> keys;
        for (const auto& [n, mo] : state.moments) keys.insert(n);
        EXPECT_EQ(keys, trainable);
        EXPECT_FALSE(keys.count("layers.0.attn.q"));
        EXPECT_TRUE(keys.count("embed.speech"));
    }
}

TEST(TrainStep, BaseParametersBitIdenticalAcrossManySteps) {
    auto ds = small_asr_dataset(40, 3);
    for (auto kind : {LayerKind::standard, LayerKind::ebranchformer}) {
        auto up = small_upscaled(kind);
        auto before = snapshot(up.model);
        auto state = OptimizerState<float>::for_manifest(up.manifest);
        auto log = run_training(up.model, up.manifest, ds, quick_config(15), state);
        auto after = snapshot(up.model);
        std::size_t changed_added = 0;
        for (const auto& [n, e] : up.manifest) {
            if (e.origin == Origin::base) EXPECT_EQ(after[n], before[n]) << n;
            else changed_added += after[n] != before[n];
        }
        EXPECT_GT(changed_added, 0u);
        EXPECT_EQ(state.step, 15u);
    }
}

TEST(TrainStep, LoRAKeepsBaseBitIdentical) {
    auto base = expand_vocabulary(init_model<float>(small_config(), 4), 24, 4);
    auto lora = apply_lora(base.model, base.manifest, LoRAConfig::with_rank(2), 5);
    auto before = snapshot(lora.model);
    run_training(lora.model, lora.manifest, small_asr_dataset(30, 6), quick_config(10));
    auto after = snapshot(lora.model);
    for (const auto& [n, e] : lora.manifest)
        if (e.origin == Origin::base) EXPECT_EQ(after[n], before[n]) << n;
    EXPECT_NE(after["layers.0.attn.q.lora_b"], before["layers.0.attn.q.lora_b"]);
}

TEST(TrainStep, FullFineTuneChangesBaseDepthDoesNot) {
    auto ds = small_asr_dataset(30, 7);
    auto up = small_upscaled(LayerKind::standard, 8);
    auto ft_model = clone_model(up.model);
    auto ft_manifest = full_finetune_manifest(up.manifest);
    auto before = snapshot(up.model);
    run_training(ft_model, ft_manifest, ds, quick_config(3));
    run_training(up.model, up.manifest, ds, quick_config(3));
    auto ft_after = snapshot(ft_model);
    auto depth_after = snapshot(up.model);
    EXPECT_NE(ft_after["layers.0.attn.q"], before["layers.0.attn.q"]);
    EXPECT_EQ(depth_after["layers.0.attn.q"], before["layers.0.attn.q"]);
}

// A masked-out final target is never read by any loss term, so changing it
// leaves every gradient bit-identical.
TEST(TrainStep, MaskedTargetsContributeNoGradient) {
    auto up = small_upscaled(LayerKind::ebranchformer, 9);
    apply_freeze(up.model, up.manifest);
    data::AsrPair p{{40, 41, 50, 51}, {3, 4, 5}};
    auto batch = data::make_batch({p}, 32, 24, 64);
    auto grads = [&](const data::Batch& b) {
        for (auto& [n, t] : named_parameters(up.model)) t.zero_grad();
        batch_loss_backward(up.model, b);
        std::map<std::string, std::vector<float>> g;
        for (auto& [n, t] : named_parameters(up.model))
            if (t.has_grad()) g[n].assign(t.grad().begin(), t.grad().end());
        return g;
    };
    batch.loss_mask.back() = 0;  // EOS no longer scored
    auto g1 = grads(batch);
    batch.ids.back() = 7;  // perturb the masked-out target
    auto g2 = grads(batch);
    ASSERT_FALSE(g1.empty());
    EXPECT_EQ(g1, g2);
    batch.loss_mask.back() = 1;
    EXPECT_NE(grads(batch), g2);
}

TEST(TrainStep, NonFiniteLossAbortsWithoutChangingState) {
    auto up = small_upscaled(LayerKind::standard, 10);
    auto state = OptimizerState<float>::for_manifest(up.manifest);
    auto ds = small_asr_dataset(8, 11);
    auto cfg = quick_config(5);
    train_step(up.model, up.manifest, ds.batch({0, 1}, cfg), state, cfg);
    auto& w = std::get<TransformerBlock<float>>(up.model.layers[2]).ffn.up.weight;  // added layer
    w[0] = std::numeric_limits<float>::quiet_NaN();
    auto before = snapshot(up.model);
    auto state_before = state;
    EXPECT_THROW(train_step(up.model, up.manifest, ds.batch({2, 3}, cfg), state, cfg), NonFiniteLossError);
    EXPECT_TRUE(state == state_before);
    auto after = snapshot(up.model);
    for (const auto& [n, v] : before)
        for (std::size_t i = 0; i < v.size(); ++i)
            ASSERT_TRUE(v[i] == after[n][i] || (std::isnan(v[i]) && std::isnan(after[n][i]))) << n;
}

TEST(RunTraining, SameSeedGivesBitIdenticalLossCurveAndWeights) {
    auto ds = small_asr_dataset(30, 12);
    auto a = small_upscaled(LayerKind::ebranchformer, 13);
    auto b = small_upscaled(LayerKind::ebranchformer, 13);
    auto la = run_training(a.model, a.manifest, ds, quick_config(8));
    auto lb = run_training(b.model, b.manifest, ds, quick_config(8));
    EXPECT_EQ(la.losses(), lb.losses());
    EXPECT_EQ(snapshot(a.model), snapshot(b.model));
    EXPECT_EQ(la.to_jsonl(), lb.to_jsonl());
}

TEST(RunTraining, HooksFireOnSchedule) {
    auto up = small_upscaled(LayerKind::standard, 14);
    TrainHooks<float> hooks;
    std::vector<std::size_t> evals, ckpts;
    hooks.eval_every = 3;
    hooks.on_eval = [&](std::size_t step, const Model<float>&) {
        evals.push_back(step);
        return nlohmann::ordered_json{{"probe", 1}};
    };
    hooks.checkpoint_every = 4;
    hooks.on_checkpoint = [&](std::size_t step, const Model<float>&, const OptimizerState<float>&) { ckpts.push_back(step); };
    auto log = run_training(up.model, up.manifest, small_asr_dataset(10, 15), quick_config(8), hooks);
    EXPECT_EQ(evals, (std::vector<std::size_t>{3, 6}));
    EXPECT_EQ(ckpts, (std::vector<std::size_t>{4, 8}));
    EXPECT_EQ(log.records[2].eval["probe"], 1);
    EXPECT_TRUE(log.records[0].eval.is_null());
}

TEST(RunTraining, EmptyDatasetRejected) {
    auto up = small_upscaled(LayerKind::standard, 16);
    Dataset empty;
    EXPECT_THROW(run_training(up.model, up.manifest, empty, quick_config(2)), std::invalid_argument);
}

TEST(RunTraining, LossFallsOnTheSyntheticTask) {
    auto ds = small_asr_dataset(200, 17);
    auto up = small_upscaled(LayerKind::standard, 18);
    auto cfg = quick_config(150);
    cfg.peak_lr = 1e-2;
    cfg.final_lr = 1e-3;
    cfg.warmup_steps = 10;
    auto log = run_training(up.model, up.manifest, ds, cfg);
    auto avg = [&](std::size_t from, std::size_t to) {
        double s = 0;
        for (std::size_t i = from; i < to; ++i) s += log.records[i].loss;
        return s / static_cast<double>(to - from);
    };
    EXPECT_LT(avg(140, 150), 0.8 * avg(0, 10));
}

}  // namespace
}  // namespace mdup
