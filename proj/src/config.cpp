#include "robumtl/config.hpp"

#include <fstream>
#include <sstream>

#include "robumtl/rng.hpp"

namespace robumtl {

void PipelineConfig::validate() const {
    if (corpus_count <= 0) throw ValidationError("corpus.count must be positive");
    if (corpus_severity < 1 || corpus_severity > 3)
        throw ValidationError("corpus.severity must be in 1..3");
    if (expert_mix_ratio < 0.0 || expert_mix_ratio > 0.5)
        throw ValidationError("expert.mix_ratio must be in [0, 0.5]");
    if (expert_warmup_epochs < 0) throw ValidationError("expert.warmup_epochs must be >= 0");
    if (eval_k < 1 || eval_k > kNumKinds)
        throw ValidationError("eval.k must be in 1.." + std::to_string(kNumKinds));
    if (lambda_semseg <= 0 || lambda_saliency <= 0 || lambda_normals <= 0)
        throw ValidationError("task weights must be positive");
    schedule();        // throws on malformed rank schedule
    fusion_mode();     // throws on bad mode strings
    plus_mode();
}

std::string PipelineConfig::serialize() const {
    std::ostringstream os;
    os << "seed=" << seed << "\n";
    os << "out=" << out.string() << "\n";
    os << "corpus.count=" << corpus_count << "\n";
    os << "corpus.severity=" << corpus_severity << "\n";
    os << "rank.schedule=" << rank_schedule << "\n";
    os << "lora.alpha=" << lora_alpha << "\n";
    os << "lora.final_stage_only=" << (lora_final_stage_only ? 1 : 0) << "\n";
    os << "task.lambda.semseg=" << lambda_semseg << "\n";
    os << "task.lambda.saliency=" << lambda_saliency << "\n";
    os << "task.lambda.normals=" << lambda_normals << "\n";
    os << "base.epochs=" << base_epochs << "\n";
    os << "base.lr=" << base_lr << "\n";
    os << "base.batch=" << base_batch << "\n";
    os << "expert.epochs=" << expert_epochs << "\n";
    os << "expert.warmup_epochs=" << expert_warmup_epochs << "\n";
    os << "expert.mix_ratio=" << expert_mix_ratio << "\n";
    os << "expert.lr=" << expert_lr << "\n";
    os << "expert.batch=" << expert_batch << "\n";
    os << "dmls.epochs=" << dmls_epochs << "\n";
    os << "dmls.lr=" << dmls_lr << "\n";
    os << "dmls.batch=" << dmls_batch << "\n";
    os << "dmls.early_stop_acc=" << dmls_early_stop_acc << "\n";
    os << "finetune.epochs=" << finetune_epochs << "\n";
    os << "finetune.lr=" << finetune_lr << "\n";
    os << "mono.epochs=" << mono_epochs << "\n";
    os << "mono.lr=" << mono_lr << "\n";
    os << "eval.k=" << eval_k << "\n";
    os << "eval.mode=" << eval_mode << "\n";
    os << "eval.batch=" << eval_batch << "\n";
    os << "pipeline.mode=" << pipeline_mode << "\n";
    return os.str();
}

uint64_t PipelineConfig::hash() const { return fnv1a64(serialize()); }

void apply_override(PipelineConfig& cfg, const std::string& key, const std::string& value) {
    auto to_int = [&](const std::string& v) { return std::stoi(v); };
    auto to_u64 = [&](const std::string& v) { return static_cast<uint64_t>(std::stoull(v)); };
    auto to_double = [&](const std::string& v) { return std::stod(v); };
    auto to_bool = [&](const std::string& v) {
        if (v == "1" || v == "true") return true;
        if (v == "0" || v == "false") return false;
        throw ValidationError("boolean key '" + key + "' expects 0/1/true/false");
    };

    try {
        if (key == "seed") cfg.seed = to_u64(value);
        else if (key == "out") cfg.out = value;
        else if (key == "corpus.count") cfg.corpus_count = to_int(value);
        else if (key == "corpus.severity") cfg.corpus_severity = to_int(value);
        else if (key == "rank.schedule") cfg.rank_schedule = value;
        else if (key == "lora.alpha") cfg.lora_alpha = to_double(value);
        else if (key == "lora.final_stage_only") cfg.lora_final_stage_only = to_bool(value);
        else if (key == "task.lambda.semseg") cfg.lambda_semseg = to_double(value);
        else if (key == "task.lambda.saliency") cfg.lambda_saliency = to_double(value);
        else if (key == "task.lambda.normals") cfg.lambda_normals = to_double(value);
        else if (key == "base.epochs") cfg.base_epochs = to_int(value);
        else if (key == "base.lr") cfg.base_lr = to_double(value);
        else if (key == "base.batch") cfg.base_batch = to_int(value);
        else if (key == "expert.epochs") cfg.expert_epochs = to_int(value);
        else if (key == "expert.warmup_epochs") cfg.expert_warmup_epochs = to_int(value);
        else if (key == "expert.mix_ratio") cfg.expert_mix_ratio = to_double(value);
        else if (key == "expert.lr") cfg.expert_lr = to_double(value);
        else if (key == "expert.batch") cfg.expert_batch = to_int(value);
        else if (key == "dmls.epochs") cfg.dmls_epochs = to_int(value);
        else if (key == "dmls.lr") cfg.dmls_lr = to_double(value);
        else if (key == "dmls.batch") cfg.dmls_batch = to_int(value);
        else if (key == "dmls.early_stop_acc") cfg.dmls_early_stop_acc = to_double(value);
        else if (key == "finetune.epochs") cfg.finetune_epochs = to_int(value);
        else if (key == "finetune.lr") cfg.finetune_lr = to_double(value);
        else if (key == "mono.epochs") cfg.mono_epochs = to_int(value);
        else if (key == "mono.lr") cfg.mono_lr = to_double(value);
        else if (key == "eval.k") cfg.eval_k = to_int(value);
        else if (key == "eval.mode") cfg.eval_mode = value;
        else if (key == "eval.batch") cfg.eval_batch = to_int(value);
        else if (key == "pipeline.mode") cfg.pipeline_mode = value;
        else throw ValidationError("unknown config key '" + key + "'");
    } catch (const std::invalid_argument&) {
        throw ValidationError("config key '" + key + "' has malformed value '" + value + "'");
    } catch (const std::out_of_range&) {
        throw ValidationError("config key '" + key + "' has out-of-range value '" + value + "'");
    }
}

PipelineConfig parse_config_text(const std::string& text) {
    PipelineConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        size_t begin = line.find_first_not_of(" \t\r");
        if (begin == std::string::npos) continue;
        size_t end = line.find_last_not_of(" \t\r");
        line = line.substr(begin, end - begin + 1);
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(lineno) + " is not key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        while (!value.empty() && (value.front() == ' ' || value.front() == '\t')) value.erase(0, 1);
        apply_override(cfg, key, value);
    }
    return cfg;
}

PipelineConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

}  // namespace robumtl
