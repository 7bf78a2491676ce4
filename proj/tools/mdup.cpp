// mdup: pretrain a toy text model, up-scale it, adapt it to speech tokens,
// evaluate and compare runs.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mdup/checkpoint.hpp"
#include "mdup/experiment.hpp"

namespace fs = std::filesystem;
using namespace mdup;

namespace {

enum Exit { kOk = 0, kConfig = 2, kInvariant = 3, kIo = 4 };

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

const char* kCsvDoc = R"(compare CSV columns, one row per run:
  run                        run directory as given
  method                     depth | full_ft | lora
  strategy                   placement strategy (depth only, else -)
  kind                       added layer kind (depth only, else -)
  trainable                  trainable parameter count
  speech_ter                 speech token error rate on the test pairs, percent
  text_ppl_base              text perplexity of the base model
  text_ppl_kept              text perplexity of the adapted model
  text_ppl_dropped           text perplexity after dropping added layers/adapters
  delta_ppl_kept             text_ppl_kept / text_ppl_base - 1
  delta_ppl_dropped          text_ppl_dropped / text_ppl_base - 1
  preservation_max_abs_diff  step-0 max |logit diff| against the base
  recovery_exact             base recovered bit-exactly (true/false)
  complete                   false when the run has no usable eval.json)";

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> strategy, kind, mode;
    std::optional<std::size_t> m, rank;
};

ExperimentConfig resolve_config(const Overrides& o) {
    ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
    auto wrap = [](const char* path, auto&& fn) {
        try {
            fn();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path, e.what());
        }
    };
    if (o.seed) cfg.seed = *o.seed;
    if (o.strategy) wrap("--strategy", [&] { cfg.surgery.strategy = parse_placement(*o.strategy); });
    if (o.kind) wrap("--kind", [&] { cfg.surgery.kind = parse_layer_kind(*o.kind); });
    if (o.mode) wrap("--mode", [&] { cfg.adapt.mode = parse_adapt_mode(*o.mode); });
    if (o.m) cfg.surgery.m = *o.m;
    if (o.rank) cfg.adapt.lora_rank = *o.rank;
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary);
    if (!os || !(os << s)) throw IoError("cannot write " + p.string());
}

Json read_json(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw IoError("cannot read " + p.string());
    try {
        return Json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

void make_out_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

TrainHooks<float> progress_hooks(const char* phase, std::size_t every) {
    TrainHooks<float> h;
    h.on_log = [phase, every](const LogRecord& r) {
        if (every && r.step % every == 0)
            std::fprintf(stderr, "[%s] step %zu loss %.4f lr %.3g grad_norm %.3g\n", phase, r.step, r.loss, r.lr, r.grad_norm);
    };
    return h;
}

Checkpoint load_base(const std::string& path) {
    auto ck = load_checkpoint(path);
    if (ck.model.config.vocab_speech != 0) throw ConfigError("--base", path + " is not a base model (it has speech rows)");
    for (const auto& [name, e] : ck.manifest)
        if (e.origin != Origin::base) throw ConfigError("--base", path + " carries non-base parameter '" + name + "'");
    return ck;
}

void check_base_matches(const ExperimentConfig& cfg, const Model<float>& base) {
    if (!(cfg.model == base.config))
        throw ConfigError("model", "does not match the base checkpoint's architecture; use the pretrain run's config");
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const Overrides& o, const std::string& out) {
    const auto cfg = resolve_config(o);
    make_out_dir(out);
    write_text(fs::path(out) / "config.json", config_to_json(cfg).dump(2) + "\n");
    const auto d = make_experiment_data(cfg);
    TrainingLog log;
    auto model = pretrain_base(cfg, d, &log, progress_hooks("pretrain", 50));
    const double ppl = perplexity(model, d.text_eval, true);
    Checkpoint ck{model, base_manifest(model), std::nullopt, Json{{"command", "pretrain"}, {"text_ppl", ppl}}};
    save_checkpoint((fs::path(out) / "model.ckpt").string(), ck);
    write_text(fs::path(out) / "train_log.jsonl", log.to_jsonl());
    const Json summary{{"text_ppl", ppl}, {"vocab_text", cfg.model.vocab_text}, {"steps", cfg.pretrain.total_steps}};
    write_text(fs::path(out) / "pretrain.json", summary.dump(2) + "\n");
    std::cout << "text perplexity " << ppl << " (vocab " << cfg.model.vocab_text << ")\n";
    return kOk;
}

int cmd_upscale(Overrides o, const std::string& base_path, const std::string& out) {
    o.mode = "depth";
    const auto cfg = resolve_config(o);
    const auto base = load_base(base_path);
    check_base_matches(cfg, base.model);
    auto a = prepare_adaptation(base.model, cfg);
    make_out_dir(out);
    write_text(fs::path(out) / "config.json", config_to_json(cfg).dump(2) + "\n");
    Json plan = Json::array();
    for (const auto& e : a.plan->entries) plan.push_back({{"after", e.after}, {"source", e.source}, {"kind", to_string(e.kind)}});
    const Json summary{{"plan", plan},
                       {"layers", a.model.layers.size()},
                       {"trainable", count_trainable(a.manifest)},
                       {"total", count_total(a.manifest)},
                       {"preservation_max_abs_diff", a.preservation_max_abs_diff}};
    save_checkpoint((fs::path(out) / "model.ckpt").string(), {a.model, a.manifest, std::nullopt, Json{{"command", "upscale"}}});
    write_text(fs::path(out) / "upscale.json", summary.dump(2) + "\n");
    std::cout << summary.dump(2) << "\n";
    return kOk;
}

int cmd_adapt(const Overrides& o, const std::string& base_path, const std::string& out) {
    const auto cfg = resolve_config(o);
    const auto base = load_base(base_path);
    check_base_matches(cfg, base.model);
    const auto d = make_experiment_data(cfg);
    auto a = prepare_adaptation(base.model, cfg);
    make_out_dir(out);
    const fs::path dir(out);
    write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
    save_checkpoint((dir / "base.ckpt").string(), base);

    auto hooks = progress_hooks("adapt", 50);
    if (cfg.adapt.eval_every) {
        hooks.eval_every = cfg.adapt.eval_every;
        auto probe = progress_probe(cfg, d);
        hooks.on_eval = [&, probe](std::size_t step, const Model<float>& m) {
            auto j = probe(step, m);
            std::fprintf(stderr, "[adapt] step %zu eval %s\n", step, j.dump().c_str());
            return j;
        };
    }
    if (cfg.adapt.checkpoint_every) {
        hooks.checkpoint_every = cfg.adapt.checkpoint_every;
        hooks.on_checkpoint = [&](std::size_t step, const Model<float>& m, const OptimizerState<float>& st) {
            save_checkpoint((dir / ("step-" + std::to_string(step) + ".ckpt")).string(),
                            {m, a.manifest, st, Json{{"command", "adapt"}, {"step", step}}});
        };
    }
    auto state = OptimizerState<float>::for_manifest(a.manifest);
    const auto log = run_training(a.model, a.manifest, d.asr_set(), cfg.adapt.train, state, hooks);
    save_checkpoint((dir / "model.ckpt").string(), {a.model, a.manifest, state, Json{{"command", "adapt"}, {"step", state.step}}});
    write_text(dir / "train_log.jsonl", log.to_jsonl());
    const Json summary{{"mode", to_string(cfg.adapt.mode)},
                       {"lora_rank", a.lora_rank},
                       {"trainable", count_trainable(a.manifest)},
                       {"steps", state.step},
                       {"dropped_examples", log.dropped},
                       {"preservation_max_abs_diff", a.preservation_max_abs_diff}};
    write_text(dir / "adapt.json", summary.dump(2) + "\n");
    std::cout << summary.dump(2) << "\n";
    return kOk;
}

int cmd_eval(const std::string& run) {
    const fs::path dir(run);
    ExperimentConfig cfg;
    try {
        cfg = config_from_json<ExperimentConfig>(read_json(dir / "config.json"));
        cfg.validate();
    } catch (const ConfigError& e) {
        throw ConfigError("config.json", e.what());
    }
    const auto adapt = read_json(dir / "adapt.json");
    const auto base = load_checkpoint((dir / "base.ckpt").string());
    const auto ck = load_checkpoint((dir / "model.ckpt").string());
    const auto d = make_experiment_data(cfg);
    const auto r = evaluate_adaptation(base.model, ck.model, ck.manifest, cfg, d, adapt.at("preservation_max_abs_diff").get<double>());
    write_text(dir / "eval.json", r.to_json().dump(2) + "\n");
    std::cout << r.to_json().dump(2) << "\n";
    // full fine-tuning overwrites the base by construction; the others must recover it
    if (cfg.adapt.mode != AdaptMode::full_ft && !r.recovery_exact)
        throw InvariantError("recovery check failed: dropping the added parameters does not restore the base model");
    return kOk;
}

std::string fmt(double v, int prec = 4) {
    if (std::isnan(v)) return "";
    std::ostringstream os;
    os << std::setprecision(prec) << std::fixed << v;
    return os.str();
}

int cmd_compare(const std::vector<std::string>& runs, const std::string& csv_path) {
    if (runs.empty()) throw ConfigError("compare", "no run directories given");
    std::vector<std::vector<std::string>> rows;
    bool all_complete = true;
    for (const auto& run : runs) {
        EvalReport r;
        bool ok = false;
        try {
            r = EvalReport::from_json(read_json(fs::path(run) / "eval.json"));
            ok = r.complete();
        } catch (const std::exception& e) {
            std::cerr << "warning: " << run << ": " << e.what() << "\n";
        }
        all_complete = all_complete && ok;
        rows.push_back({run, r.method, r.strategy, r.kind, ok ? std::to_string(r.trainable_count) : "", fmt(r.speech_token_error_rate, 2),
                        fmt(r.text_ppl_base), fmt(r.text_ppl_adapted_kept), fmt(r.text_ppl_adapted_dropped), fmt(r.delta_kept()),
                        fmt(r.delta_dropped()), fmt(r.preservation_max_abs_diff, 8), ok ? (r.recovery_exact ? "true" : "false") : "",
                        ok ? "true" : "false"});
    }
    const std::vector<std::string> header{"run",           "method",         "strategy",       "kind",
                                          "trainable",     "speech_ter",     "text_ppl_base",  "text_ppl_kept",
                                          "text_ppl_dropped", "delta_ppl_kept", "delta_ppl_dropped", "preservation_max_abs_diff",
                                          "recovery_exact", "complete"};
    std::ostringstream csv;
    auto csv_field = [](const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
        return q + "\"";
    };
    for (const auto* row : {&header}) {
        for (std::size_t i = 0; i < row->size(); ++i) csv << (i ? "," : "") << csv_field((*row)[i]);
        csv << "\n";
    }
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) csv << (i ? "," : "") << csv_field(row[i]);
        csv << "\n";
    }
    if (!csv_path.empty()) write_text(csv_path, csv.str());

    std::vector<std::size_t> width(header.size());
    for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
    for (const auto& row : rows)
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    auto print_row = [&](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            std::cout << (i ? "  " : "");
            if (i + 1 < row.size()) std::cout << std::left << std::setw(static_cast<int>(width[i]));
            std::cout << row[i];
        }
        std::cout << "\n";
    };
    print_row(header);
    for (const auto& row : rows) print_row(row);
    if (!all_complete) {
        std::cerr << "error: some runs are incomplete (missing or unusable eval.json)\n";
        return kIo;
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Depth up-scaling of a toy text model for speech tokens"};
    app.require_subcommand(1);
    app.footer(kCsvDoc);
    Overrides o;
    std::string out, base, run, csv;
    std::vector<std::string> runs;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Experiment config JSON (defaults apply for missing keys)")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "Override the experiment seed");
    };
    auto add_surgery = [&](CLI::App* sub) {
        sub->add_option("--strategy", o.strategy, "Placement: interleaved|bottom|middle|top|sandwich");
        sub->add_option("--m", o.m, "Number of layers to add");
        sub->add_option("--kind", o.kind, "Added layer kind: standard|ebranchformer");
    };

    auto* pre = app.add_subcommand("pretrain", "Train the base text model");
    add_config(pre);
    pre->add_option("--out", out, "Output run directory")->required();

    auto* up = app.add_subcommand("upscale", "Insert function-preserving layers into a base checkpoint");
    add_config(up);
    add_surgery(up);
    up->add_option("--base", base, "Base model checkpoint (pretrain's model.ckpt)")->required();
    up->add_option("--out", out, "Output directory")->required();

    auto* ad = app.add_subcommand("adapt", "Speech continual pre-training in depth, full_ft or lora mode");
    add_config(ad);
    add_surgery(ad);
    ad->add_option("--mode", o.mode, "Adaptation: depth|full_ft|lora");
    ad->add_option("--rank", o.rank, "LoRA rank (0 = match depth's trainable count)");
    ad->add_option("--base", base, "Base model checkpoint (pretrain's model.ckpt)")->required();
    ad->add_option("--out", out, "Output run directory")->required();

    auto* ev = app.add_subcommand("eval", "Evaluate an adapt run; writes eval.json");
    ev->add_option("--run", run, "Run directory written by adapt")->required();

    auto* cmp = app.add_subcommand("compare", "Tabulate evaluated runs");
    cmp->add_option("runs", runs, "Run directories");
    cmp->add_option("--out", csv, "Write the CSV here");
    cmp->footer(kCsvDoc);

    auto* cfgcmd = app.add_subcommand("config", "Configuration utilities");
    cfgcmd->require_subcommand(1);
    auto* dump = cfgcmd->add_subcommand("dump", "Print the resolved configuration as JSON");
    add_config(dump);
    add_surgery(dump);
    dump->add_option("--mode", o.mode, "Adaptation: depth|full_ft|lora");
    dump->add_option("--rank", o.rank, "LoRA rank");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*pre) return cmd_pretrain(o, out);
        if (*up) return cmd_upscale(o, base, out);
        if (*ad) return cmd_adapt(o, base, out);
        if (*ev) return cmd_eval(run);
        if (*cmp) return cmd_compare(runs, csv);
        if (*dump) {
            std::cout << config_to_json(resolve_config(o)).dump(2) << "\n";
            return kOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const InvariantError& e) {
        std::cerr << "invariant failure: " << e.what() << "\n";
        return kInvariant;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kIo;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kOk;
}
