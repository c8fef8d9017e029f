#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>

#include "robumtl/config.hpp"
#include "robumtl/metrics.hpp"
#include "robumtl/optim.hpp"

namespace robumtl {

struct ArtifactPaths {
    std::filesystem::path root;

    std::filesystem::path corpus() const { return root / "corpus"; }
    std::filesystem::path checkpoints() const { return root / "checkpoints"; }
    std::filesystem::path experts_dir() const { return root / "experts"; }
    std::filesystem::path reports() const { return root / "reports"; }
    std::filesystem::path base_ckpt() const { return checkpoints() / "base.ckpt"; }
    std::filesystem::path finetuned_ckpt() const { return checkpoints() / "finetuned.ckpt"; }
    std::filesystem::path dmls_ckpt() const { return checkpoints() / "dmls.ckpt"; }
    std::filesystem::path mono_ckpt() const { return checkpoints() / "monolithic.ckpt"; }
    std::filesystem::path expert_file(PerturbationKind kind) const {
        return experts_dir() / (std::string(kind_name(kind)) + ".lora");
    }
    std::filesystem::path ledger() const { return root / "ledger.csv"; }
};

std::vector<ImageSample> load_split(const CorpusIndex& index, PerturbationKind kind, Split split);

// Rain-then-fog composition on clean test images, the mixed-perturbation
// evaluation set.
std::vector<ImageSample> build_mixed_set(const PipelineConfig& cfg, const CorpusIndex& index,
                                         Split split);

// Append-only experiment ledger; rows are deterministic for a fixed config.
void append_ledger(const ArtifactPaths& paths, const PipelineConfig& cfg, const std::string& stage,
                   const std::vector<std::pair<std::string, std::string>>& fields);

// ---- stages ----

CorpusIndex gen_data(const PipelineConfig& cfg);

struct TrainStats {
    std::vector<double> epoch_losses;
    double initial_val_loss = 0.0;
    double final_val_loss = 0.0;
};

std::unique_ptr<MtlModelF> make_model(const PipelineConfig& cfg);

// Joint training of encoder and decoders on the clean split.
std::unique_ptr<MtlModelF> train_base(const PipelineConfig& cfg, const CorpusIndex& corpus,
                                      TrainStats* stats = nullptr);

// Full fine-tune of an existing model on the pooled perturbed splits
// (comparison baseline for routed evaluation).
void train_monolithic(const PipelineConfig& cfg, MtlModelF& model, const CorpusIndex& corpus,
                      TrainStats* stats = nullptr);

struct ExpertTrainStats {
    double val_loss_init = 0.0;   // with the fresh (zero-delta) expert
    double val_loss_final = 0.0;  // after training
};

// Trains one perturbation expert with the shared weights frozen. In plus
// mode the paired norm/decoder modules train too and are captured in the
// squad; the model itself is restored to its pre-training state.
ExpertSquad<float> train_expert(const PipelineConfig& cfg, MtlModelF& model, PerturbationKind kind,
                                const CorpusIndex& corpus, ExpertTrainStats* stats = nullptr);

struct DmlsTrainStats {
    std::vector<double> epoch_train_losses;
    std::vector<double> epoch_val_accuracy;
    ClassifierMetrics test_metrics;
    std::vector<std::vector<int64_t>> confusion;  // test split, true x predicted
    int epochs_ran = 0;
    int64_t param_count = 0;
};

std::unique_ptr<DmlsNet<float>> train_dmls(const PipelineConfig& cfg, const CorpusIndex& corpus,
                                           DmlsTrainStats* stats = nullptr);

void write_dmls_eval_files(const std::filesystem::path& dir, const DmlsTrainStats& stats,
                           DmlsNet<float>& router, const CorpusIndex& corpus);

// Mean argmax accuracy of batch votes over same-kind batches of the given
// split.
double batch_vote_accuracy(DmlsNet<float>& router, const CorpusIndex& corpus, Split split,
                           int batch_size);

// Adapts decoder and norm layers to the routed-expert distribution
// (RobuMTL only; RobuMTL+ skips fine-tuning).
void finetune_shared(const PipelineConfig& cfg, MtlModelF& model, DmlsNet<float>& router,
                     const ExpertPool<float>& pool, const CorpusIndex& corpus,
                     TrainStats* stats = nullptr);

// ---- evaluation ----

struct EvalTarget {
    enum class Set { AdverseUnion, Mixed, SingleKind, Clean } set = Set::AdverseUnion;
    PerturbationKind kind = PerturbationKind::Noise;  // for SingleKind
};

struct FusionLogRow {
    int batch_id = 0;
    int true_kind = -1;  // -1 for mixed batches
    ScoreVector scores;
    std::vector<int> selected;
    std::vector<double> weights;
};

struct EvalRun {
    std::vector<TaskResult> tasks;
    std::vector<std::vector<int64_t>> confusion;       // votes, single-kind batches only
    std::vector<std::vector<double>> mean_scores;      // true kind x class, mean over batches
    std::vector<FusionLogRow> fusion_log;
    int64_t batches = 0;
    int64_t images = 0;
    int64_t router_invocations_delta = 0;
    double elapsed_seconds = 0.0;
};

// Routed evaluation when router and pool are given, plain forward otherwise.
EvalRun evaluate_model(const PipelineConfig& cfg, MtlModelF& model, DmlsNet<float>* router,
                       const ExpertPool<float>* pool, const CorpusIndex& corpus,
                       const EvalTarget& target, int k, FusionMode mode);

// Full report: routed rows on the target, baseline rows from base_model,
// plus the clean-split pair for delta_m_clean.
EvalReport build_report(const PipelineConfig& cfg, MtlModelF& eval_model, MtlModelF& base_model,
                        DmlsNet<float>* router, const ExpertPool<float>* pool,
                        const CorpusIndex& corpus, const EvalTarget& target, int k, FusionMode mode,
                        const std::filesystem::path& report_dir, const std::string& tag);

void write_fusion_log(const std::filesystem::path& path, const std::vector<FusionLogRow>& rows);
void write_activation_matrix(const std::filesystem::path& path,
                             const std::vector<std::vector<double>>& mean_scores);

// ---- ablations ----

struct KSweepRow {
    int k = 0;
    double delta_m_single = 0.0;
    double delta_m_mixed = 0.0;
};

std::vector<KSweepRow> ablate_k(const PipelineConfig& cfg, MtlModelF& eval_model,
                                MtlModelF& base_model, DmlsNet<float>& router,
                                const ExpertPool<float>& pool, const CorpusIndex& corpus,
                                const std::filesystem::path& csv_path);

struct RankAblationRow {
    std::string schedule;
    int64_t expert_params = 0;
};

std::vector<RankAblationRow> ablate_ranks(const PipelineConfig& cfg,
                                          const std::vector<std::string>& schedules,
                                          const std::filesystem::path& csv_path);

// ---- helpers shared with tests ----

std::set<std::string> all_param_names(MtlModelF& model);
void set_model_trainable(MtlModelF& model, const std::set<std::string>& trainable);

// Loads every artifact produced by the training stages.
struct LoadedArtifacts {
    std::unique_ptr<MtlModelF> base_model;
    std::unique_ptr<MtlModelF> eval_model;  // finetuned when present, else base
    std::unique_ptr<DmlsNet<float>> router;
    ExpertPool<float> pool;
};

LoadedArtifacts load_artifacts(const PipelineConfig& cfg);

}  // namespace robumtl
