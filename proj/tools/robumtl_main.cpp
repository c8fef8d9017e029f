#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "robumtl/pipeline.hpp"

using namespace robumtl;

namespace {

struct CliState {
    std::string config_path;
    std::vector<std::string> overrides;  // key=value
    std::string kind;
    std::string eval_set = "adverse";
    std::string report_file;
    int k = -1;
    std::string mode;

    PipelineConfig build_config() const {
        PipelineConfig cfg;
        if (!config_path.empty()) cfg = load_config_file(config_path);
        for (const auto& kv : overrides) {
            size_t eq = kv.find('=');
            if (eq == std::string::npos)
                throw ValidationError("--opt expects key=value, got '" + kv + "'");
            apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (k > 0) { PipelineConfig tmp = cfg; tmp.eval_k = k; return finish(tmp); }
        return finish(cfg);
    }

private:
    PipelineConfig finish(PipelineConfig cfg) const {
        if (k > 0) cfg.eval_k = k;
        if (!mode.empty()) cfg.eval_mode = mode;
        cfg.validate();
        return cfg;
    }
};

void add_common(CLI::App* cmd, CliState& state) {
    cmd->add_option("--config", state.config_path, "flat key=value config file");
    cmd->add_option("--opt", state.overrides, "config override key=value (repeatable)")
        ->take_all();
    cmd->add_option_function<std::string>(
        "--out", [&state](const std::string& v) { state.overrides.push_back("out=" + v); },
        "output directory");
    cmd->add_option_function<std::string>(
        "--seed", [&state](const std::string& v) { state.overrides.push_back("seed=" + v); },
        "root seed");
}

EvalTarget parse_eval_set(const std::string& set) {
    EvalTarget target;
    if (set == "adverse") {
        target.set = EvalTarget::Set::AdverseUnion;
    } else if (set == "mixed") {
        target.set = EvalTarget::Set::Mixed;
    } else if (set == "clean") {
        target.set = EvalTarget::Set::Clean;
    } else {
        target.set = EvalTarget::Set::SingleKind;
        target.kind = kind_from_name(set);
    }
    return target;
}

int cmd_gen_data(const CliState& state) {
    PipelineConfig cfg = state.build_config();
    CorpusIndex index = gen_data(cfg);
    std::printf("corpus: %zu samples x %zu kinds under %s\n", index.entries.size(),
                index.kinds.size(), ArtifactPaths{cfg.out}.corpus().string().c_str());
    return 0;
}

int cmd_train_base(const CliState& state) {
    PipelineConfig cfg = state.build_config();
    ArtifactPaths paths{cfg.out};
    CorpusIndex corpus = load_corpus_index(paths.corpus());
    TrainStats stats;
    auto model = train_base(cfg, corpus, &stats);
    model->save_checkpoint(paths.base_ckpt());
    append_ledger(paths, cfg, "train-base",
                  {{"epochs", std::to_string(cfg.base_epochs)},
                   {"val_loss_init", std::to_string(stats.initial_val_loss)},
                   {"val_loss_final", std::to_string(stats.final_val_loss)},
                   {"checkpoint_hash", std::to_string(file_fnv1a(paths.base_ckpt()))}});
    std::printf("base model: val loss %.4f -> %.4f, checkpoint %s\n", stats.initial_val_loss,
                stats.final_val_loss, paths.base_ckpt().string().c_str());
    return 0;
}

int cmd_train_expert(const CliState& state) {
    PipelineConfig cfg = state.build_config();
    if (state.kind.empty()) throw ValidationError("train-expert requires --kind");
    PerturbationKind kind = kind_from_name(state.kind);
    ArtifactPaths paths{cfg.out};
    CorpusIndex corpus = load_corpus_index(paths.corpus());
    auto model = make_model(cfg);
    model->load_checkpoint(paths.base_ckpt());
    uint64_t base_hash_before = file_fnv1a(paths.base_ckpt());

    ExpertTrainStats stats;
    ExpertSquad<float> squad = train_expert(cfg, *model, kind, corpus, &stats);
    if (squad.norm_params.empty())
        save_expert(paths.expert_file(kind), squad.expert);
    else
        save_squad(paths.expert_file(kind), squad);

    if (file_fnv1a(paths.base_ckpt()) != base_hash_before)
        throw InternalError("base checkpoint changed during expert training");
    append_ledger(paths, cfg, std::string("train-expert-") + kind_name(kind),
                  {{"val_loss_init", std::to_string(stats.val_loss_init)},
                   {"val_loss_final", std::to_string(stats.val_loss_final)},
                   {"params", std::to_string(squad.expert.param_count())}});
    std::printf("%s expert: val loss %.4f -> %.4f (%lld lora params)\n", kind_name(kind),
                stats.val_loss_init, stats.val_loss_final,
                static_cast<long long>(squad.expert.param_count()));
    return 0;
}

int cmd_train_dmls(const CliState& state) {
    PipelineConfig cfg = state.build_config();
    ArtifactPaths paths{cfg.out};
    CorpusIndex corpus = load_corpus_index(paths.corpus());
    DmlsTrainStats stats;
    auto router = train_dmls(cfg, corpus, &stats);
    router->save_checkpoint(paths.dmls_ckpt());
    write_dmls_eval_files(paths.reports(), stats, *router, corpus);
    append_ledger(paths, cfg, "train-dmls",
                  {{"epochs_ran", std::to_string(stats.epochs_ran)},
                   {"param_count", std::to_string(stats.param_count)},
                   {"test_accuracy", std::to_string(stats.test_metrics.accuracy)},
                   {"test_f1", std::to_string(stats.test_metrics.f1)}});
    std::printf("dmls: %lld parameters, %d epochs, held-out accuracy %.4f  precision %.4f  "
                "recall %.4f  f1 %.4f\n",
                static_cast<long long>(stats.param_count), stats.epochs_ran,
                stats.test_metrics.accuracy, stats.test_metrics.precision, stats.test_metrics.recall,
                stats.test_metrics.f1);
    return 0;
}

int cmd_finetune(const CliState& state) {
    PipelineConfig cfg = state.build_config();
    ArtifactPaths paths{cfg.out};
    CorpusIndex corpus = load_corpus_index(paths.corpus());
    LoadedArtifacts art = load_artifacts(cfg);
    // fine-tune starts from the base weights
    art.eval_model->load_checkpoint(paths.base_ckpt());
    TrainStats stats;
    finetune_shared(cfg, *art.eval_model, *art.router, art.pool, corpus, &stats);
    art.eval_model->save_checkpoint(paths.finetuned_ckpt());
    append_ledger(paths, cfg, "finetune",
                  {{"epochs", std::to_string(cfg.finetune_epochs)},
                   {"checkpoint_hash", std::to_string(file_fnv1a(paths.finetuned_ckpt()))}});
    std::printf("finetuned decoder/norm layers -> %s\n", paths.finetuned_ckpt().string().c_str());
    return 0;
}

int cmd_eval(const CliState& state) {
    PipelineConfig cfg = state.build_config();
    ArtifactPaths paths{cfg.out};
    CorpusIndex corpus = load_corpus_index(paths.corpus());
    LoadedArtifacts art = load_artifacts(cfg);
    EvalTarget target = parse_eval_set(state.eval_set);
    std::string tag = "eval_" + state.eval_set + "_k" + std::to_string(cfg.eval_k) + "_" +
                      cfg.eval_mode;
    EvalReport report = build_report(cfg, *art.eval_model, *art.base_model, art.router.get(),
                                     &art.pool, corpus, target, cfg.eval_k, cfg.fusion_mode(),
                                     paths.reports(), tag);
    append_ledger(paths, cfg, "eval-" + state.eval_set,
                  {{"k", std::to_string(cfg.eval_k)},
                   {"mode", cfg.eval_mode},
                   {"delta_m_adv", std::to_string(report.delta_m_adv)},
                   {"delta_m_clean", std::to_string(report.delta_m_clean)}});
    std::fputs(report_summary(report).c_str(), stdout);
    std::printf("report files: %s/%s_*\n", paths.reports().string().c_str(), tag.c_str());
    return 0;
}

int cmd_ablate_k(const CliState& state) {
    PipelineConfig cfg = state.build_config();
    ArtifactPaths paths{cfg.out};
    CorpusIndex corpus = load_corpus_index(paths.corpus());
    LoadedArtifacts art = load_artifacts(cfg);
    auto rows = ablate_k(cfg, *art.eval_model, *art.base_model, *art.router, art.pool, corpus,
                         paths.reports() / "k_sweep.csv");
    std::printf("k,delta_m_single,delta_m_mixed\n");
    for (const auto& row : rows)
        std::printf("%d,%.4f,%.4f\n", row.k, row.delta_m_single, row.delta_m_mixed);
    return 0;
}

int cmd_ablate_ranks(const CliState& state) {
    PipelineConfig cfg = state.build_config();
    ArtifactPaths paths{cfg.out};
    std::vector<std::string> schedules = {"8,16,32,64", "16,32,64,128", "32,32,32,32",
                                          "128,128,128,128", "64,32,16,8"};
    if (std::find(schedules.begin(), schedules.end(), cfg.rank_schedule) == schedules.end())
        schedules.push_back(cfg.rank_schedule);
    auto rows = ablate_ranks(cfg, schedules, paths.reports() / "rank_sweep.csv");
    std::printf("schedule,expert_params\n");
    for (const auto& row : rows)
        std::printf("%s,%lld\n", row.schedule.c_str(), static_cast<long long>(row.expert_params));
    return 0;
}

int cmd_report(const CliState& state) {
    PipelineConfig cfg = state.build_config();
    ArtifactPaths paths{cfg.out};
    std::filesystem::path file = state.report_file.empty()
                                     ? paths.reports() / "eval_adverse_k1_lora_report.csv"
                                     : std::filesystem::path(state.report_file);
    std::ifstream in(file);
    if (!in) throw IoError("cannot open report '" + file.string() + "'");
    std::string line;
    while (std::getline(in, line)) std::puts(line.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RobuMTL desk-scale pipeline: perturbation-routed LoRA experts for multi-task "
                 "learning"};
    app.require_subcommand(1);
    CliState state;

    auto* gen = app.add_subcommand("gen-data", "synthesize the clean + perturbed corpus");
    add_common(gen, state);
    gen->add_option_function<std::string>(
        "--count", [&state](const std::string& v) { state.overrides.push_back("corpus.count=" + v); },
        "samples per kind");
    gen->add_option_function<std::string>(
        "--severity",
        [&state](const std::string& v) { state.overrides.push_back("corpus.severity=" + v); },
        "perturbation severity 1..3");

    auto* base = app.add_subcommand("train-base", "train the shared multi-task backbone on clean data");
    add_common(base, state);

    auto* expert = app.add_subcommand("train-expert", "train one perturbation expert");
    add_common(expert, state);
    expert->add_option("--kind", state.kind, "clean|snow|rain|fog|noise|blur")->required();

    auto* dmls = app.add_subcommand("train-dmls", "train the perturbation router");
    add_common(dmls, state);

    auto* ft = app.add_subcommand("finetune", "adapt decoder/norm layers to the routed experts");
    add_common(ft, state);

    auto* ev = app.add_subcommand("eval", "routed evaluation with report emission");
    add_common(ev, state);
    ev->add_option("--k", state.k, "experts fused per batch (1..6)");
    ev->add_option("--mode", state.mode, "lora|squad");
    ev->add_option("--set", state.eval_set, "adverse|mixed|clean|<kind>");

    auto* ak = app.add_subcommand("ablate-k", "sweep k over single and mixed perturbations");
    add_common(ak, state);
    ak->add_option("--mode", state.mode, "lora|squad");

    auto* ar = app.add_subcommand("ablate-ranks", "parameter accounting across rank schedules");
    add_common(ar, state);

    auto* rep = app.add_subcommand("report", "print a stored report");
    add_common(rep, state);
    rep->add_option("--file", state.report_file, "report csv path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(state);
        if (base->parsed()) return cmd_train_base(state);
        if (expert->parsed()) return cmd_train_expert(state);
        if (dmls->parsed()) return cmd_train_dmls(state);
        if (ft->parsed()) return cmd_finetune(state);
        if (ev->parsed()) return cmd_eval(state);
        if (ak->parsed()) return cmd_ablate_k(state);
        if (ar->parsed()) return cmd_ablate_ranks(state);
        if (rep->parsed()) return cmd_report(state);
    } catch (const IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
