#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "mdup/config_io.hpp"

namespace mdup {
namespace {

ConfigError expect_config_error(const Json& j) {
    try {
        auto cfg = config_from_json<ExperimentConfig>(j);
        cfg.validate();
    } catch (const ConfigError& e) {
        return e;
    }
    ADD_FAILURE() << "no ConfigError for " << j.dump();
    return ConfigError("", "");
}

TEST(ConfigIo, DefaultsRoundTrip) {
    ExperimentConfig cfg;
    cfg.validate();
    const auto j = config_to_json(cfg);
    const auto back = config_from_json<ExperimentConfig>(Json::parse(j.dump()));
    EXPECT_EQ(config_to_json(back).dump(), j.dump());
}

TEST(ConfigIo, EveryFieldIsEmitted) {
    const auto j = config_to_json(ExperimentConfig{});
    for (const char* k : {"seed", "model", "data", "pretrain", "surgery", "adapt", "eval"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j["model"].size(), 11u);
    EXPECT_EQ(j["pretrain"].size(), 13u);
    EXPECT_EQ(j["adapt"]["train"].size(), 13u);
    EXPECT_EQ(j["surgery"]["strategy"], "interleaved");
    EXPECT_EQ(j["surgery"]["kind"], "standard");
    EXPECT_EQ(j["adapt"]["mode"], "depth");
    EXPECT_EQ(j["data"]["codebook"]["k"], 3);
}

TEST(ConfigIo, PartialObjectKeepsDefaults) {
    auto cfg = config_from_json<ExperimentConfig>(Json::parse(R"({"surgery": {"m": 4, "kind": "ebranchformer"}})"));
    EXPECT_EQ(cfg.surgery.m, 4u);
    EXPECT_EQ(cfg.surgery.kind, LayerKind::ebranchformer);
    EXPECT_EQ(cfg.surgery.strategy, PlacementStrategy::interleaved);
    EXPECT_EQ(cfg.model.n_layers, ModelConfig{}.n_layers);
}

TEST(ConfigIo, UnknownKeysReportTheirPath) {
    EXPECT_EQ(expect_config_error(Json::parse(R"({"bogus": 1})")).path(), "bogus");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"adapt": {"train": {"peak_lr": 1e-3, "lr": 2}}})")).path(), "adapt.train.lr");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"data": {"text": {"vocab_text": 10}}})")).path(), "data.text.vocab_text");
}

TEST(ConfigIo, TypeErrorsReportTheirPath) {
    EXPECT_EQ(expect_config_error(Json::parse(R"({"model": {"d_model": -4}})")).path(), "model.d_model");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"model": {"d_model": 3.5}})")).path(), "model.d_model");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"pretrain": {"peak_lr": "big"}})")).path(), "pretrain.peak_lr");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"surgery": {"strategy": "diagonal"}})")).path(), "surgery.strategy");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"adapt": {"train": {"loss_on_all_positions": 1}}})")).path(),
              "adapt.train.loss_on_all_positions");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"model": []})")).path(), "model");
}

TEST(ConfigIo, SemanticValidationReportsPath) {
    EXPECT_EQ(expect_config_error(Json::parse(R"({"model": {"d_model": 60, "n_heads": 7}})")).path(), "model");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"surgery": {"m": 0}})")).path(), "surgery.m");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"data": {"asr_min_len": 5, "asr_max_len": 4}})")).path(), "data.asr_min_len");
    EXPECT_EQ(expect_config_error(Json::parse(R"({"model": {"vocab_speech": 8}})")).path(), "model.vocab_speech");
}

TEST(ConfigIo, VocabTextIsInjectedIntoDataSpecs) {
    ExperimentConfig cfg;
    cfg.model.vocab_text = 100;
    EXPECT_EQ(cfg.text_spec().vocab_text, 100u);
    EXPECT_EQ(cfg.codebook_spec().vocab_text, 100u);
    EXPECT_EQ(cfg.asr_text_spec().max_len, cfg.data.asr_max_len);
}

TEST(ConfigIo, LoadFromFile) {
    const std::string path = ::testing::TempDir() + "mdup_cfg.json";
    {
        std::ofstream os(path);
        os << R"({"seed": 7, "adapt": {"mode": "lora", "lora_rank": 3}})";
    }
    auto cfg = load_experiment_config(path);
    EXPECT_EQ(cfg.seed, 7u);
    EXPECT_EQ(cfg.adapt.mode, AdaptMode::lora);
    EXPECT_EQ(cfg.adapt.lora_rank, 3u);
    {
        std::ofstream os(path);
        os << "{ not json";
    }
    EXPECT_THROW(load_experiment_config(path), ConfigError);
    std::remove(path.c_str());
    EXPECT_THROW(load_experiment_config(path), std::runtime_error);
}

TEST(AdaptMode, StringRoundTrip) {
    for (auto m : {AdaptMode::depth, AdaptMode::full_ft, AdaptMode::lora}) EXPECT_EQ(parse_adapt_mode(to_string(m)), m);
    EXPECT_THROW(parse_adapt_mode("prefix"), std::invalid_argument);
}

}  // namespace
}  // namespace mdup
