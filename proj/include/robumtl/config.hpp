#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "robumtl/lora.hpp"
#include "robumtl/mepf.hpp"

namespace robumtl {

// All pipeline knobs, loadable from a flat key=value file with CLI flag
// overrides. Every random draw anywhere in the pipeline derives from `seed`
// through named sub-streams.
struct PipelineConfig {
    uint64_t seed = 7;
    std::filesystem::path out = "out";

    int corpus_count = 600;
    int corpus_severity = 2;

    std::string rank_schedule = "16,32,64,128";
    double lora_alpha = 1.0;
    bool lora_final_stage_only = false;

    double lambda_semseg = 1.0;
    double lambda_saliency = 1.0;
    double lambda_normals = 1.0;

    int base_epochs = 14;
    double base_lr = 3e-3;
    int base_batch = 8;

    int expert_epochs = 4;
    int expert_warmup_epochs = 2;
    double expert_mix_ratio = 0.1;
    double expert_lr = 2e-3;
    int expert_batch = 8;

    int dmls_epochs = 30;
    double dmls_lr = 2e-3;
    int dmls_batch = 32;
    double dmls_early_stop_acc = 0.97;

    int finetune_epochs = 2;
    double finetune_lr = 1e-3;

    int mono_epochs = 3;
    double mono_lr = 1e-3;

    int eval_k = 1;
    std::string eval_mode = "lora";  // lora | squad
    int eval_batch = 16;

    std::string pipeline_mode = "robumtl";  // robumtl | robumtl_plus

    void validate() const;

    RankSchedule schedule() const { return RankSchedule::parse(rank_schedule); }
    FusionMode fusion_mode() const {
        if (eval_mode == "lora") return FusionMode::LoraOnly;
        if (eval_mode == "squad") return FusionMode::Squad;
        throw ValidationError("eval mode must be 'lora' or 'squad', got '" + eval_mode + "'");
    }
    bool plus_mode() const {
        if (pipeline_mode == "robumtl") return false;
        if (pipeline_mode == "robumtl_plus") return true;
        throw ValidationError("pipeline mode must be 'robumtl' or 'robumtl_plus'");
    }

    ModelConfig model_config() const {
        ModelConfig cfg;
        cfg.tasks[0].lambda = lambda_semseg;
        cfg.tasks[1].lambda = lambda_saliency;
        cfg.tasks[2].lambda = lambda_normals;
        return cfg;
    }

    // Canonical key=value rendering; also the basis of the config hash.
    std::string serialize() const;
    uint64_t hash() const;
};

// key=value lines, '#' comments, blank lines ignored.
PipelineConfig parse_config_text(const std::string& text);
PipelineConfig load_config_file(const std::filesystem::path& path);

// Applies one override; throws ValidationError for unknown keys.
void apply_override(PipelineConfig& cfg, const std::string& key, const std::string& value);

}  // namespace robumtl
