#pragma once

// Perplexity, greedy transcription, token error rate, and the preservation
// and recovery checks.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdup/data.hpp"
#include "mdup/surgery.hpp"

namespace mdup {

/// exp(mean next-token NLL) over every position of every sequence. With
/// `restrict_to_text_vocab` the softmax only sees the first V_t columns.
template <typename T>
double perplexity(const Model<T>& model, const std::vector<data::Sequence>& seqs, bool restrict_to_text_vocab) {
    NoGradGuard no_grad;
    const std::size_t vt = model.config.vocab_text;
    double nll = 0;
    std::size_t count = 0;
    for (const auto& s : seqs) {
        for (auto id : s)
            if (id < 0 || static_cast<std::size_t>(id) >= vt)
                throw std::invalid_argument("perplexity: token " + std::to_string(id) + " is not a text id");
        if (s.size() < 2) continue;
        auto logits = model_forward(model, s);
        const std::size_t cols = restrict_to_text_vocab ? vt : logits.dim(1);
        for (std::size_t t = 0; t + 1 < s.size(); ++t) {
            const T* row = logits.data().data() + t * logits.dim(1);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double z = 0;
            for (std::size_t j = 0; j < cols; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
            nll += mx + std::log(z) - static_cast<double>(row[s[t + 1]]);
            ++count;
        }
    }
    if (count == 0) throw std::invalid_argument("perplexity: no predictable positions (empty input)");
    return std::exp(nll / static_cast<double>(count));
}

/// Feeds [speech..., SEP] and emits argmax tokens until EOS, max_len or the
/// context limit. EOS is not part of the hypothesis.
template <typename T>
data::Sequence greedy_transcribe(const Model<T>& model, const data::Sequence& speech, std::size_t max_len) {
    NoGradGuard no_grad;
    const auto& cfg = model.config;
    const auto eos = data::eos_id(cfg.vocab_text);
    data::Sequence seq(speech);
    seq.push_back(data::sep_id(cfg.vocab_text));
    data::Sequence hyp;
    while (hyp.size() < max_len && seq.size() < cfg.max_seq_len) {
        auto logits = model_forward(model, seq);
        const std::size_t v = logits.dim(1);
        const T* last = logits.data().data() + (seq.size() - 1) * v;
        std::size_t best = 0;
        for (std::size_t j = 1; j < v; ++j)
            if (last[j] > last[best]) best = j;
        const auto tok = static_cast<std::int32_t>(best);
        if (tok == eos) break;
        hyp.push_back(tok);
        seq.push_back(tok);
    }
    return hyp;
}

struct EditCounts {
    std::size_t sub = 0;
    std::size_t ins = 0;
    std::size_t del = 0;
    std::size_t ref_len = 0;

    std::size_t errors() const { return sub + ins + del; }
    double rate() const { return 100.0 * static_cast<double>(errors()) / static_cast<double>(ref_len); }
    EditCounts& operator+=(const EditCounts& o) {
        sub += o.sub;
        ins += o.ins;
        del += o.del;
        ref_len += o.ref_len;
        return *this;
    }
};

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the
/// backtrace prefers match/substitution, then deletion, then insertion.
inline EditCounts align(std::span<const std::int32_t> hyp, std::span<const std::int32_t> ref) {
    if (ref.empty()) throw std::invalid_argument("token_error_rate: empty reference");
    const std::size_t n = ref.size(), m = hyp.size();
    std::vector<std::size_t> d((n + 1) * (m + 1));
    auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
    for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
    for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j)
            at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), at(i - 1, j) + 1, at(i, j - 1) + 1});
    EditCounts c;
    c.ref_len = n;
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1])) {
            c.sub += ref[i - 1] != hyp[j - 1];
            --i, --j;
        } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
            ++c.del;
            --i;
        } else {
            ++c.ins;
            --j;
        }
    }
    return c;
}

/// (S + I + D) / |ref| x 100.
inline double token_error_rate(std::span<const std::int32_t> hyp, std::span<const std::int32_t> ref) {
    return align(hyp, ref).rate();
}

/// Corpus-level error rate of greedy transcriptions.
template <typename T>
EditCounts transcription_errors(const Model<T>& model, const std::vector<data::AsrPair>& pairs, std::size_t max_len) {
    EditCounts total;
    for (const auto& p : pairs) total += align(greedy_transcribe(model, p.speech, max_len), p.text);
    return total;
}

/// Random input whose first `speech_len` tokens are speech ids (when the model
/// has any) and the rest text ids.
inline data::Sequence random_probe_input(std::size_t len, std::size_t vocab_text, std::size_t vocab_speech,
                                         std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> split(0, vocab_speech ? len : 0);
    const std::size_t s = split(rng);
    data::Sequence ids(len);
    for (std::size_t i = 0; i < len; ++i)
        ids[i] = i < s ? static_cast<std::int32_t>(vocab_text + rng() % vocab_speech) : static_cast<std::int32_t>(rng() % vocab_text);
    return ids;
}

/// Max |logit difference| over the base model's columns on random inputs drawn
/// from the base vocabulary.
template <typename T>
double check_function_preservation(const Model<T>& base, const Model<T>& adapted, std::size_t trials, std::size_t len,
                                   std::uint64_t seed = 0) {
    const auto& bc = base.config;
    if (bc.vocab_text != adapted.config.vocab_text || bc.vocab_speech > adapted.config.vocab_speech ||
        bc.d_model != adapted.config.d_model)
        throw std::invalid_argument("check_function_preservation: models do not share a vocabulary and width");
    NoGradGuard no_grad;
    std::mt19937_64 rng(seed);
    double worst = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        auto ids = random_probe_input(len, bc.vocab_text, bc.vocab_speech, rng);
        auto a = model_forward(base, ids);
        auto b = model_forward(adapted, ids);
        for (std::size_t r = 0; r < len; ++r)
            for (std::size_t c = 0; c < a.dim(1); ++c)
                worst = std::max(worst, std::abs(static_cast<double>(a.at(r, c)) - static_cast<double>(b.at(r, c))));
    }
    return worst;
}

struct RecoveryResult {
    bool parameters_identical = false;
    bool logits_identical = false;
    std::string detail;
    bool exact() const { return parameters_identical && logits_identical; }
};

/// Drops added layers and adapters from `adapted` and compares against `base`
/// bit for bit: every base parameter, and text-column logits on random text.
template <typename T>
RecoveryResult check_recovery(const Model<T>& base, const Model<T>& adapted, const FreezeManifest& manifest,
                              std::size_t trials = 10, std::size_t len = 16, std::uint64_t seed = 0) {
    validate_manifest(adapted, manifest);
    auto dropped = drop_added_layers(adapted, manifest);
    auto bc = base.config, dc = dropped.config;
    dc.vocab_speech = bc.vocab_speech;
    if (!(bc == dc)) throw std::invalid_argument("check_recovery: adapted model does not derive from this base config");

    RecoveryResult res;
    res.parameters_identical = true;
    auto dp = named_parameters(dropped);
    std::map<std::string, Tensor<T>> dmap(dp.begin(), dp.end());
    for (const auto& [name, t] : named_parameters(base)) {
        auto it = dmap.find(name);
        if (it == dmap.end()) throw std::invalid_argument("check_recovery: recovered model lacks '" + name + "'");
        if (name == "embed.speech") continue;  // speech rows are trainable and not part of the text model
        if (it->second.shape() != t.shape() || it->second.values() != t.values()) {
            res.parameters_identical = false;
            if (res.detail.empty()) res.detail = "parameter '" + name + "' differs";
        }
    }

    NoGradGuard no_grad;
    std::mt19937_64 rng(seed);
    res.logits_identical = true;
    const std::size_t vt = bc.vocab_text;
    for (std::size_t i = 0; i < trials && res.logits_identical; ++i) {
        auto ids = random_probe_input(len, vt, 0, rng);
        auto a = model_forward(base, ids);
        auto b = model_forward(dropped, ids);
        for (std::size_t r = 0; r < len && res.logits_identical; ++r)
            for (std::size_t c = 0; c < vt; ++c)
                if (a.at(r, c) != b.at(r, c)) {
                    res.logits_identical = false;
                    if (res.detail.empty()) res.detail = "text logits differ";
                    break;
                }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
    std::string method;
    std::string strategy;
    std::string kind;
    std::size_t trainable_count = 0;
    double speech_token_error_rate = std::numeric_limits<double>::quiet_NaN();
    double text_ppl_base = std::numeric_limits<double>::quiet_NaN();
    double text_ppl_adapted_kept = std::numeric_limits<double>::quiet_NaN();
    double text_ppl_adapted_dropped = std::numeric_limits<double>::quiet_NaN();
    double preservation_max_abs_diff = std::numeric_limits<double>::quiet_NaN();
    bool recovery_exact = false;

    // Relative text degradation: ppl_adapted / ppl_base - 1.
    double delta_kept() const { return text_ppl_adapted_kept / text_ppl_base - 1.0; }
    double delta_dropped() const { return text_ppl_adapted_dropped / text_ppl_base - 1.0; }

    nlohmann::ordered_json to_json() const {
        auto num = [](double v) -> nlohmann::ordered_json { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); };
        return {{"method", method},
                {"strategy", strategy},
                {"kind", kind},
                {"trainable_count", trainable_count},
                {"speech_token_error_rate", num(speech_token_error_rate)},
                {"text_ppl_base", num(text_ppl_base)},
                {"text_ppl_adapted_kept", num(text_ppl_adapted_kept)},
                {"text_ppl_adapted_dropped", num(text_ppl_adapted_dropped)},
                {"delta_ppl_kept", num(delta_kept())},
                {"delta_ppl_dropped", num(delta_dropped())},
                {"preservation_max_abs_diff", num(preservation_max_abs_diff)},
                {"recovery_exact", recovery_exact}};
    }

    static EvalReport from_json(const nlohmann::json& j) {
        auto num = [&](const char* k) {
            return j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>();
        };
        EvalReport r;
        r.method = j.at("method");
        r.strategy = j.at("strategy");
        r.kind = j.at("kind");
        r.trainable_count = j.at("trainable_count");
        r.speech_token_error_rate = num("speech_token_error_rate");
        r.text_ppl_base = num("text_ppl_base");
        r.text_ppl_adapted_kept = num("text_ppl_adapted_kept");
        r.text_ppl_adapted_dropped = num("text_ppl_adapted_dropped");
        r.preservation_max_abs_diff = num("preservation_max_abs_diff");
        r.recovery_exact = j.at("recovery_exact");
        return r;
    }

    static std::string csv_header() {
        return "method,strategy,kind,trainable,speech_ter,text_ppl_base,text_ppl_kept,text_ppl_dropped,delta_ppl_kept,"
               "delta_ppl_dropped,recovery_exact";
    }

    std::string csv_row() const {
        std::ostringstream os;
        os << std::setprecision(9);
        auto put = [&](double v) {
            if (!std::isnan(v)) os << v;
        };
        os << method << ',' << strategy << ',' << kind << ',' << trainable_count << ',';
        put(speech_token_error_rate);
        os << ',';
        put(text_ppl_base);
        os << ',';
        put(text_ppl_adapted_kept);
        os << ',';
        put(text_ppl_adapted_dropped);
        os << ',';
        put(delta_kept());
        os << ',';
        put(delta_dropped());
        os << ',' << (recovery_exact ? "true" : "false");
        return os.str();
    }

    bool complete() const {
        return !std::isnan(speech_token_error_rate) && !std::isnan(text_ppl_base) && !std::isnan(text_ppl_adapted_kept) &&
               !std::isnan(text_ppl_adapted_dropped);
    }
};

}  // namespace mdup
