#include "robumtl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>

namespace robumtl {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<PerturbationKind> adverse_kinds() {
    return {PerturbationKind::Snow, PerturbationKind::Rain, PerturbationKind::Fog,
            PerturbationKind::Noise, PerturbationKind::Blur};
}

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

// Mean multi-task loss over a sample set, recording nothing.
double eval_mtl_loss(MtlModelF& model, const std::vector<ImageSample>& samples, int batch_size) {
    if (samples.empty()) throw ValidationError("eval_mtl_loss: empty sample set");
    NoGradGuard<float> ng(&model.tape());
    double total = 0.0;
    int64_t count = 0;
    for (size_t begin = 0; begin < samples.size(); begin += static_cast<size_t>(batch_size)) {
        size_t end = std::min(samples.size(), begin + static_cast<size_t>(batch_size));
        std::vector<const ImageSample*> ptrs;
        for (size_t i = begin; i < end; ++i) ptrs.push_back(&samples[i]);
        Batch<float> batch = make_batch(ptrs, &model.tape());
        auto preds = model.forward(batch.images);
        total += static_cast<double>(model.mtl_loss(preds, batch).scalar()) *
                 static_cast<double>(ptrs.size());
        count += static_cast<int64_t>(ptrs.size());
    }
    return total / static_cast<double>(count);
}

// Verifies that exactly the documented trainable set carries gradients.
void assert_trainable_exactly(MtlModelF& model, const std::set<std::string>& trainable) {
    for (auto& [name, p] : model.named_params()) {
        bool expected = trainable.count(name) > 0;
        if (p.has_grad() != expected)
            throw InternalError("parameter '" + name + "' " +
                                (p.has_grad() ? "has" : "is missing") +
                                " a gradient buffer outside the documented trainable set");
    }
}

struct MetricAccum {
    std::vector<int> seg_pred, seg_true;
    std::vector<int> sal_pred, sal_true;
    double normals_sq = 0.0;
    int64_t normals_n = 0;

    void add(const std::vector<Tensor<float>>& preds, const Batch<float>& batch,
             const std::vector<const ImageSample*>& samples) {
        int64_t n = batch.n;
        int64_t hw = preds[0].dim(2) * preds[0].dim(3);
        const auto seg = preds[0].values();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t px = 0; px < hw; ++px) {
                int best = 0;
                float bv = seg[static_cast<size_t>((i * 5 + 0) * hw + px)];
                for (int c = 1; c < 5; ++c) {
                    float v = seg[static_cast<size_t>((i * 5 + c) * hw + px)];
                    if (v > bv) {
                        bv = v;
                        best = c;
                    }
                }
                seg_pred.push_back(best);
                seg_true.push_back(batch.seg[static_cast<size_t>(i * hw + px)]);
            }
        const auto sal = preds[1].values();
        for (int64_t i = 0; i < n * hw; ++i) {
            sal_pred.push_back(sal[static_cast<size_t>(i)] > 0.0f ? 1 : 0);
            sal_true.push_back(batch.saliency.values()[static_cast<size_t>(i)] > 0.5f ? 1 : 0);
        }
        const auto nrm = preds[2].values();
        for (int64_t i = 0; i < n; ++i) {
            const ImageSample& s = *samples[static_cast<size_t>(i)];
            for (int64_t px = 0; px < hw; ++px) {
                float tx = s.labels.normals[static_cast<size_t>(px)];
                float ty = s.labels.normals[static_cast<size_t>(hw + px)];
                if (tx == 0.0f && ty == 0.0f) continue;
                double dx = static_cast<double>(nrm[static_cast<size_t>((i * 2 + 0) * hw + px)]) -
                            static_cast<double>(tx);
                double dy = static_cast<double>(nrm[static_cast<size_t>((i * 2 + 1) * hw + px)]) -
                            static_cast<double>(ty);
                normals_sq += dx * dx + dy * dy;
                normals_n += 2;
            }
        }
    }

    std::vector<TaskResult> results() const {
        if (normals_n == 0) throw ValidationError("evaluation saw no labeled normal pixels");
        std::vector<TaskResult> out;
        out.push_back({"semseg", "miou", miou(seg_pred, seg_true, 5), false});
        out.push_back({"saliency", "miou", miou(sal_pred, sal_true, 2), false});
        out.push_back({"normals", "rmse", std::sqrt(normals_sq / static_cast<double>(normals_n)), true});
        return out;
    }
};

}  // namespace

std::vector<ImageSample> load_split(const CorpusIndex& index, PerturbationKind kind, Split split) {
    std::vector<ImageSample> out;
    for (const auto& entry : index.entries)
        if (entry.split == split) out.push_back(load_sample(index, kind, entry));
    return out;
}

std::vector<ImageSample> build_mixed_set(const PipelineConfig& cfg, const CorpusIndex& index,
                                         Split split) {
    std::vector<ImageSample> out = load_split(index, PerturbationKind::Clean, split);
    const SeverityParams& p = severity_params(cfg.corpus_severity);
    for (size_t i = 0; i < out.size(); ++i) {
        ImageData rained = rain(out[i].pixels, p.rain, derive_seed(cfg.seed, "mixed.rain", i));
        out[i].pixels = fog(rained, p.fog_intensity, derive_seed(cfg.seed, "mixed.fog", i));
        out[i].kind = PerturbationKind::Rain;  // nominal; mixed batches skip confusion rows
    }
    return out;
}

void append_ledger(const ArtifactPaths& paths, const PipelineConfig& cfg, const std::string& stage,
                   const std::vector<std::pair<std::string, std::string>>& fields) {
    std::error_code ec;
    std::filesystem::create_directories(paths.root, ec);
    bool fresh = !std::filesystem::exists(paths.ledger());
    std::ofstream out(paths.ledger(), std::ios::app);
    if (!out) throw IoError("cannot append to ledger at '" + paths.ledger().string() + "'");
    if (fresh) out << "stage,config_hash,seed,key,value\n";
    for (const auto& [key, value] : fields)
        out << stage << "," << cfg.hash() << "," << cfg.seed << "," << key << "," << value << "\n";
}

CorpusIndex gen_data(const PipelineConfig& cfg) {
    cfg.validate();
    ArtifactPaths paths{cfg.out};
    CorpusIndex index = build_corpus(paths.corpus(), all_kinds(), cfg.corpus_severity,
                                     cfg.corpus_count, derive_seed(cfg.seed, "corpus"));
    append_ledger(paths, cfg, "gen-data",
                  {{"count", std::to_string(cfg.corpus_count)},
                   {"severity", std::to_string(cfg.corpus_severity)},
                   {"entries", std::to_string(index.entries.size())}});
    return index;
}

std::unique_ptr<MtlModelF> make_model(const PipelineConfig& cfg) {
    return std::make_unique<MtlModelF>(cfg.model_config(), derive_seed(cfg.seed, "model.init"));
}

std::set<std::string> all_param_names(MtlModelF& model) {
    std::set<std::string> names;
    for (auto& [name, p] : model.named_params()) names.insert(name);
    return names;
}

void set_model_trainable(MtlModelF& model, const std::set<std::string>& trainable) {
    for (auto& [name, p] : model.named_params()) p.set_requires_grad(trainable.count(name) > 0);
}

namespace {

// One pass of shuffled minibatch Adam over the given samples.
double train_one_epoch(MtlModelF& model, Adam<float>& opt, const std::vector<const ImageSample*>& data,
                       int batch_size, uint64_t shuffle_seed,
                       const std::set<std::string>* assert_set) {
    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Pcg32 rng(shuffle_seed);
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    int64_t batches = 0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(batch_size)) {
        size_t end = std::min(order.size(), begin + static_cast<size_t>(batch_size));
        std::vector<const ImageSample*> ptrs;
        for (size_t i = begin; i < end; ++i) ptrs.push_back(data[order[i]]);
        model.tape().clear();
        opt.zero_grad();
        Batch<float> batch = make_batch(ptrs, &model.tape());
        auto preds = model.forward(batch.images);
        auto loss = model.mtl_loss(preds, batch);
        loss_sum += loss.scalar();
        ++batches;
        model.tape().backward(loss);
        if (assert_set) assert_trainable_exactly(model, *assert_set);
        opt.step();
    }
    model.tape().clear();
    return batches ? loss_sum / static_cast<double>(batches) : 0.0;
}

}  // namespace

std::unique_ptr<MtlModelF> train_base(const PipelineConfig& cfg, const CorpusIndex& corpus,
                                      TrainStats* stats) {
    cfg.validate();
    auto model = make_model(cfg);
    auto train = load_split(corpus, PerturbationKind::Clean, Split::Train);
    auto val = load_split(corpus, PerturbationKind::Clean, Split::Val);
    if (train.empty()) throw ValidationError("train_base: empty training split");

    Adam<float> opt({cfg.base_lr});
    for (auto& [name, p] : model->named_params()) opt.add_param(name, p);

    TrainStats local;
    local.initial_val_loss = eval_mtl_loss(*model, val, cfg.base_batch);
    std::vector<const ImageSample*> data;
    for (const auto& s : train) data.push_back(&s);
    for (int epoch = 0; epoch < cfg.base_epochs; ++epoch)
        local.epoch_losses.push_back(train_one_epoch(
            *model, opt, data, cfg.base_batch,
            derive_seed(cfg.seed, "base.shuffle", static_cast<uint64_t>(epoch)), nullptr));
    local.final_val_loss = eval_mtl_loss(*model, val, cfg.base_batch);
    if (cfg.base_epochs > 0 && local.final_val_loss >= local.initial_val_loss)
        throw TrainingError("base training failed to reduce the validation loss");
    for (double l : local.epoch_losses)
        if (std::isnan(l)) throw TrainingError("base training diverged (NaN loss)");
    if (stats) *stats = local;
    return model;
}

void train_monolithic(const PipelineConfig& cfg, MtlModelF& model, const CorpusIndex& corpus,
                      TrainStats* stats) {
    std::vector<ImageSample> pooled;
    for (PerturbationKind kind : adverse_kinds()) {
        auto part = load_split(corpus, kind, Split::Train);
        for (auto& s : part) pooled.push_back(std::move(s));
    }
    if (pooled.empty()) throw ValidationError("train_monolithic: empty pooled split");
    Adam<float> opt({cfg.mono_lr});
    for (auto& [name, p] : model.named_params()) opt.add_param(name, p);
    TrainStats local;
    std::vector<const ImageSample*> data;
    for (const auto& s : pooled) data.push_back(&s);
    for (int epoch = 0; epoch < cfg.mono_epochs; ++epoch)
        local.epoch_losses.push_back(train_one_epoch(
            model, opt, data, cfg.base_batch,
            derive_seed(cfg.seed, "mono.shuffle", static_cast<uint64_t>(epoch)), nullptr));
    if (stats) *stats = local;
}

ExpertSquad<float> train_expert(const PipelineConfig& cfg, MtlModelF& model, PerturbationKind kind,
                                const CorpusIndex& corpus, ExpertTrainStats* stats) {
    cfg.validate();
    bool plus = cfg.plus_mode();
    RankSchedule schedule = cfg.schedule();

    auto expert = new_expert(model, kind, schedule, static_cast<float>(cfg.lora_alpha),
                             derive_seed(cfg.seed, std::string("expert.init.") + kind_name(kind)),
                             cfg.lora_final_stage_only);

    // data: clean warm-up set, target split, mixing pool over the other kinds
    auto clean_train = load_split(corpus, PerturbationKind::Clean, Split::Train);
    std::vector<ImageSample> target_train =
        kind == PerturbationKind::Clean ? std::vector<ImageSample>{} : load_split(corpus, kind, Split::Train);
    std::vector<ImageSample> mix_pool;
    if (kind != PerturbationKind::Clean && cfg.expert_mix_ratio > 0.0) {
        for (PerturbationKind other : all_kinds()) {
            if (other == kind) continue;
            auto part = load_split(corpus, other, Split::Train);
            for (auto& s : part) mix_pool.push_back(std::move(s));
        }
    }
    auto target_val =
        load_split(corpus, kind == PerturbationKind::Clean ? PerturbationKind::Clean : kind, Split::Val);

    // freeze the shared weights; in plus mode the paired norm and decoder
    // modules train alongside the expert
    std::vector<std::pair<std::string, std::vector<float>>> pre_backup;
    std::set<std::string> trainable;
    if (plus) {
        for (const auto& name : model.norm_param_names()) trainable.insert(name);
        for (const auto& name : model.decoder_param_names()) trainable.insert(name);
        for (const auto& name : trainable) {
            auto t = model.param(name);
            pre_backup.emplace_back(name, std::vector<float>(t.values().begin(), t.values().end()));
        }
    }
    set_model_trainable(model, trainable);
    model.set_attachments(expert_attachments(expert));

    Adam<float> opt({cfg.expert_lr});
    for (const auto& s : expert.sites) {
        opt.add_param("lora." + s.site + ".A", s.a);
        opt.add_param("lora." + s.site + ".B", s.b);
    }
    for (const auto& name : trainable) opt.add_param(name, model.param(name));

    ExpertTrainStats local;
    local.val_loss_init = eval_mtl_loss(model, target_val, cfg.expert_batch);

    auto run_epoch = [&](const std::vector<const ImageSample*>& data, uint64_t seed) {
        return train_one_epoch(model, opt, data, cfg.expert_batch, seed, &trainable);
    };

    std::string stream = std::string("expert.") + kind_name(kind);
    std::vector<const ImageSample*> clean_ptrs;
    for (const auto& s : clean_train) clean_ptrs.push_back(&s);

    int warmup = kind == PerturbationKind::Clean ? 0 : cfg.expert_warmup_epochs;
    for (int epoch = 0; epoch < warmup; ++epoch)
        run_epoch(clean_ptrs, derive_seed(cfg.seed, stream + ".warmup", static_cast<uint64_t>(epoch)));

    for (int epoch = 0; epoch < cfg.expert_epochs; ++epoch) {
        std::vector<const ImageSample*> data;
        if (kind == PerturbationKind::Clean) {
            data = clean_ptrs;  // the clean expert sees clean samples only
        } else {
            Pcg32 mix_rng(derive_seed(cfg.seed, stream + ".mix", static_cast<uint64_t>(epoch)));
            for (const auto& s : target_train) {
                if (!mix_pool.empty() && mix_rng.next_double() < cfg.expert_mix_ratio)
                    data.push_back(&mix_pool[mix_rng.next_below(static_cast<uint32_t>(mix_pool.size()))]);
                else
                    data.push_back(&s);
            }
        }
        if (kind == PerturbationKind::Clean)
            for (const auto* s : data)
                if (s->kind != PerturbationKind::Clean)
                    throw InternalError("clean-expert batch contains a perturbed sample");
        run_epoch(data, derive_seed(cfg.seed, stream + ".epoch", static_cast<uint64_t>(epoch)));
    }

    local.val_loss_final = eval_mtl_loss(model, target_val, cfg.expert_batch);
    model.clear_attachments();

    ExpertSquad<float> squad;
    if (plus) {
        squad = make_squad(model, std::move(expert));
        for (auto& [name, backup] : pre_backup) {
            auto t = model.param(name);
            std::copy(backup.begin(), backup.end(), t.values().begin());
        }
    } else {
        squad.expert = std::move(expert);
    }
    set_model_trainable(model, all_param_names(model));
    if (stats) *stats = local;
    return squad;
}

std::vector<ImageData> load_split_pixels(const CorpusIndex& index, PerturbationKind kind,
                                         Split split) {
    std::vector<ImageData> out;
    for (const auto& entry : index.entries)
        if (entry.split == split)
            out.push_back(read_image_file(index.root / kind_name(kind) / split_name(entry.split) /
                                          (entry.id + ".img")));
    return out;
}

namespace {

struct LabeledImages {
    std::vector<ImageData> images;
    std::vector<int> labels;
};

LabeledImages load_labeled(const CorpusIndex& corpus, Split split) {
    LabeledImages out;
    for (PerturbationKind kind : all_kinds()) {
        auto part = load_split_pixels(corpus, kind, split);
        for (auto& img : part) {
            out.images.push_back(std::move(img));
            out.labels.push_back(static_cast<int>(kind));
        }
    }
    return out;
}

// argmax accuracy plus confusion over a labeled image set
std::pair<double, std::vector<std::vector<int64_t>>> dmls_eval(DmlsNet<float>& router,
                                                               const LabeledImages& data,
                                                               int batch) {
    std::vector<std::vector<int64_t>> confusion(kNumKinds, std::vector<int64_t>(kNumKinds, 0));
    int64_t correct = 0;
    for (size_t begin = 0; begin < data.images.size(); begin += static_cast<size_t>(batch)) {
        size_t end = std::min(data.images.size(), begin + static_cast<size_t>(batch));
        std::vector<const ImageData*> ptrs;
        for (size_t i = begin; i < end; ++i) ptrs.push_back(&data.images[i]);
        auto x = router.image_tensor(ptrs);
        auto probs = router.forward_probs(x);
        for (size_t i = 0; i < probs.size(); ++i) {
            int truth = data.labels[begin + i];
            int pred = probs[i].argmax();
            ++confusion[static_cast<size_t>(truth)][static_cast<size_t>(pred)];
            if (pred == truth) ++correct;
        }
    }
    return {static_cast<double>(correct) / static_cast<double>(data.images.size()), confusion};
}

}  // namespace

std::unique_ptr<DmlsNet<float>> train_dmls(const PipelineConfig& cfg, const CorpusIndex& corpus,
                                           DmlsTrainStats* stats) {
    cfg.validate();
    for (PerturbationKind kind : all_kinds()) {
        bool found = false;
        for (PerturbationKind have : corpus.kinds)
            if (have == kind) found = true;
        if (!found)
            throw ValidationError(std::string("dmls training requires all kinds; corpus lacks '") +
                                  kind_name(kind) + "'");
    }
    auto router = std::make_unique<DmlsNet<float>>(derive_seed(cfg.seed, "dmls.init"));

    LabeledImages train = load_labeled(corpus, Split::Train);
    LabeledImages val = load_labeled(corpus, Split::Val);
    LabeledImages test = load_labeled(corpus, Split::Test);

    Adam<float> opt({cfg.dmls_lr});
    for (auto& [name, p] : router->named_params()) opt.add_param(name, p);

    DmlsTrainStats local;
    local.param_count = router->param_count();

    std::vector<size_t> order(train.images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.dmls_epochs; ++epoch) {
        Pcg32 rng(derive_seed(cfg.seed, "dmls.shuffle", static_cast<uint64_t>(epoch)));
        rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.dmls_batch)) {
            size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.dmls_batch));
            std::vector<const ImageData*> ptrs;
            std::vector<int> labels;
            for (size_t i = begin; i < end; ++i) {
                ptrs.push_back(&train.images[order[i]]);
                labels.push_back(train.labels[order[i]]);
            }
            router->tape().clear();
            opt.zero_grad();
            auto x = router->image_tensor(ptrs);
            auto logits = router->forward_logits(x);
            auto loss = cross_entropy(logits, labels);
            loss_sum += loss.scalar();
            ++batches;
            router->tape().backward(loss);
            opt.step();
        }
        router->tape().clear();
        local.epoch_train_losses.push_back(loss_sum / static_cast<double>(batches));
        auto [val_acc, val_conf] = dmls_eval(*router, val, 64);
        local.epoch_val_accuracy.push_back(val_acc);
        local.epochs_ran = epoch + 1;
        if (val_acc >= cfg.dmls_early_stop_acc) break;
    }

    auto [test_acc, confusion] = dmls_eval(*router, test, 64);
    local.confusion = confusion;
    local.test_metrics = classifier_metrics(confusion);
    if (stats) *stats = local;
    return router;
}

void write_dmls_eval_files(const std::filesystem::path& dir, const DmlsTrainStats& stats,
                           DmlsNet<float>& router, const CorpusIndex& corpus) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);

    {
        std::ofstream out(dir / "dmls_confusion.csv", std::ios::trunc);
        if (!out) throw IoError("cannot write dmls confusion csv");
        out << "true_kind,predicted_kind,count\n";
        for (size_t i = 0; i < stats.confusion.size(); ++i)
            for (size_t j = 0; j < stats.confusion[i].size(); ++j)
                out << kind_name(static_cast<PerturbationKind>(i)) << ","
                    << kind_name(static_cast<PerturbationKind>(j)) << "," << stats.confusion[i][j]
                    << "\n";
    }

    // one-vs-rest ROC points from the test-split scores
    LabeledImages test = load_labeled(corpus, Split::Test);
    std::vector<ScoreVector> probs;
    for (size_t begin = 0; begin < test.images.size(); begin += 64) {
        size_t end = std::min(test.images.size(), begin + 64);
        std::vector<const ImageData*> ptrs;
        for (size_t i = begin; i < end; ++i) ptrs.push_back(&test.images[i]);
        auto x = router.image_tensor(ptrs);
        auto p = router.forward_probs(x);
        probs.insert(probs.end(), p.begin(), p.end());
    }
    std::ofstream out(dir / "dmls_roc.csv", std::ios::trunc);
    if (!out) throw IoError("cannot write dmls roc csv");
    out << "kind,threshold_rank,fpr,tpr\n";
    for (int c = 0; c < kNumKinds; ++c) {
        std::vector<std::pair<double, int>> scored;  // (score, is_positive)
        int64_t positives = 0, negatives = 0;
        for (size_t i = 0; i < probs.size(); ++i) {
            int pos = test.labels[i] == c ? 1 : 0;
            scored.emplace_back(probs[i].s[static_cast<size_t>(c)], pos);
            if (pos) ++positives;
            else ++negatives;
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second > b.second;
        });
        int64_t tp = 0, fp = 0;
        int rank = 0;
        for (const auto& [score, pos] : scored) {
            if (pos) ++tp;
            else ++fp;
            ++rank;
            if (rank % 20 == 0 || rank == static_cast<int>(scored.size()))
                out << kind_name(static_cast<PerturbationKind>(c)) << "," << rank << ","
                    << fmt6(static_cast<double>(fp) / static_cast<double>(std::max<int64_t>(1, negatives)))
                    << ","
                    << fmt6(static_cast<double>(tp) / static_cast<double>(std::max<int64_t>(1, positives)))
                    << "\n";
        }
    }
}

double batch_vote_accuracy(DmlsNet<float>& router, const CorpusIndex& corpus, Split split,
                           int batch_size) {
    int64_t batches = 0, correct = 0;
    for (PerturbationKind kind : all_kinds()) {
        auto images = load_split_pixels(corpus, kind, split);
        for (size_t begin = 0; begin + static_cast<size_t>(batch_size) <= images.size();
             begin += static_cast<size_t>(batch_size)) {
            std::vector<const ImageData*> ptrs;
            for (size_t i = begin; i < begin + static_cast<size_t>(batch_size); ++i)
                ptrs.push_back(&images[i]);
            auto vote = router.batch_vote(ptrs);
            ++batches;
            if (vote.argmax() == static_cast<int>(kind)) ++correct;
        }
    }
    if (batches == 0) throw ValidationError("batch_vote_accuracy: split smaller than one batch");
    return static_cast<double>(correct) / static_cast<double>(batches);
}

void finetune_shared(const PipelineConfig& cfg, MtlModelF& model, DmlsNet<float>& router,
                     const ExpertPool<float>& pool, const CorpusIndex& corpus, TrainStats* stats) {
    if (cfg.plus_mode())
        throw ModeError("finetune_shared applies to robumtl mode only; robumtl_plus skips it");

    std::set<std::string> trainable;
    for (const auto& name : model.norm_param_names()) trainable.insert(name);
    for (const auto& name : model.decoder_param_names()) trainable.insert(name);
    set_model_trainable(model, trainable);

    Adam<float> opt({cfg.finetune_lr});
    for (const auto& name : trainable) opt.add_param(name, model.param(name));

    std::map<PerturbationKind, std::vector<ImageSample>> data;
    for (PerturbationKind kind : all_kinds()) data[kind] = load_split(corpus, kind, Split::Train);

    TrainStats local;
    for (int epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
        // round-robin over kinds so every batch is single-kind but the
        // stream cycles the routed experts
        std::map<PerturbationKind, std::vector<size_t>> orders;
        size_t max_batches = 0;
        for (auto& [kind, samples] : data) {
            std::vector<size_t> order(samples.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = i;
            Pcg32 rng(derive_seed(cfg.seed, std::string("finetune.shuffle.") + kind_name(kind),
                                  static_cast<uint64_t>(epoch)));
            rng.shuffle(order.begin(), order.end());
            orders[kind] = std::move(order);
            max_batches = std::max(max_batches,
                                   (samples.size() + static_cast<size_t>(cfg.expert_batch) - 1) /
                                       static_cast<size_t>(cfg.expert_batch));
        }
        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t b = 0; b < max_batches; ++b) {
            for (PerturbationKind kind : all_kinds()) {
                auto& samples = data[kind];
                auto& order = orders[kind];
                size_t begin = b * static_cast<size_t>(cfg.expert_batch);
                if (begin >= order.size()) continue;
                size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.expert_batch));
                std::vector<const ImageSample*> ptrs;
                std::vector<const ImageData*> images;
                for (size_t i = begin; i < end; ++i) {
                    ptrs.push_back(&samples[order[i]]);
                    images.push_back(&samples[order[i]].pixels);
                }
                auto [adapted, decision] =
                    route_and_adapt(model, router, images, pool, {cfg.eval_k, FusionMode::LoraOnly});
                model.tape().clear();
                opt.zero_grad();
                Batch<float> batch = make_batch(ptrs, &model.tape());
                auto preds = model.forward(batch.images);
                auto loss = model.mtl_loss(preds, batch);
                loss_sum += loss.scalar();
                ++batches;
                model.tape().backward(loss);
                assert_trainable_exactly(model, trainable);
                opt.step();
                model.tape().clear();
                adapted.eject();
            }
        }
        local.epoch_losses.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
    }
    set_model_trainable(model, all_param_names(model));
    if (stats) *stats = local;
}

EvalRun evaluate_model(const PipelineConfig& cfg, MtlModelF& model, DmlsNet<float>* router,
                       const ExpertPool<float>* pool, const CorpusIndex& corpus,
                       const EvalTarget& target, int k, FusionMode mode) {
    std::vector<std::pair<int, std::vector<ImageSample>>> groups;  // (true kind or -1, samples)
    switch (target.set) {
        case EvalTarget::Set::AdverseUnion:
            for (PerturbationKind kind : adverse_kinds())
                groups.emplace_back(static_cast<int>(kind), load_split(corpus, kind, Split::Test));
            break;
        case EvalTarget::Set::SingleKind:
            groups.emplace_back(static_cast<int>(target.kind),
                                load_split(corpus, target.kind, Split::Test));
            break;
        case EvalTarget::Set::Clean:
            groups.emplace_back(static_cast<int>(PerturbationKind::Clean),
                                load_split(corpus, PerturbationKind::Clean, Split::Test));
            break;
        case EvalTarget::Set::Mixed:
            groups.emplace_back(-1, build_mixed_set(cfg, corpus, Split::Test));
            break;
    }

    EvalRun run;
    run.confusion.assign(kNumKinds, std::vector<int64_t>(kNumKinds, 0));
    run.mean_scores.assign(kNumKinds, std::vector<double>(kNumKinds, 0.0));
    std::vector<int64_t> score_batches(kNumKinds, 0);
    MetricAccum accum;
    int64_t before_inv = router ? router->invocations() : 0;

    Clock::time_point t0 = Clock::now();
    for (auto& [true_kind, samples] : groups) {
        for (size_t begin = 0; begin < samples.size(); begin += static_cast<size_t>(cfg.eval_batch)) {
            size_t end = std::min(samples.size(), begin + static_cast<size_t>(cfg.eval_batch));
            std::vector<const ImageSample*> ptrs;
            std::vector<const ImageData*> images;
            for (size_t i = begin; i < end; ++i) {
                ptrs.push_back(&samples[i]);
                images.push_back(&samples[i].pixels);
            }
            Batch<float> batch = make_batch(ptrs, &model.tape());
            std::vector<Tensor<float>> preds;
            if (router && pool) {
                auto [adapted, decision] = route_and_adapt(model, *router, images, *pool, {k, mode});
                {
                    NoGradGuard<float> ng(&model.tape());
                    preds = model.forward(batch.images);
                }
                adapted.eject();
                FusionLogRow row;
                row.batch_id = static_cast<int>(run.batches);
                row.true_kind = true_kind;
                row.scores = decision.scores;
                for (const auto& item : decision.selected.items) {
                    row.selected.push_back(item.index);
                    row.weights.push_back(item.weight);
                }
                run.fusion_log.push_back(std::move(row));
                if (true_kind >= 0) {
                    ++run.confusion[static_cast<size_t>(true_kind)]
                                   [static_cast<size_t>(decision.scores.argmax())];
                    for (int j = 0; j < kNumKinds; ++j)
                        run.mean_scores[static_cast<size_t>(true_kind)][static_cast<size_t>(j)] +=
                            decision.scores.s[static_cast<size_t>(j)];
                    ++score_batches[static_cast<size_t>(true_kind)];
                }
            } else {
                NoGradGuard<float> ng(&model.tape());
                preds = model.forward(batch.images);
            }
            accum.add(preds, batch, ptrs);
            ++run.batches;
            run.images += static_cast<int64_t>(ptrs.size());
        }
    }
    run.elapsed_seconds = seconds_since(t0);
    for (int i = 0; i < kNumKinds; ++i)
        if (score_batches[static_cast<size_t>(i)] > 0)
            for (int j = 0; j < kNumKinds; ++j)
                run.mean_scores[static_cast<size_t>(i)][static_cast<size_t>(j)] /=
                    static_cast<double>(score_batches[static_cast<size_t>(i)]);
    run.tasks = accum.results();
    if (router) run.router_invocations_delta = router->invocations() - before_inv;
    return run;
}

void write_fusion_log(const std::filesystem::path& path, const std::vector<FusionLogRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write fusion log to '" + path.string() + "'");
    out << "batch_id,true_kind";
    for (int j = 0; j < kNumKinds; ++j) out << ",score_" << kind_name(static_cast<PerturbationKind>(j));
    out << ",selected,weights\n";
    for (const auto& row : rows) {
        out << row.batch_id << ","
            << (row.true_kind >= 0 ? kind_name(static_cast<PerturbationKind>(row.true_kind)) : "mixed");
        for (int j = 0; j < kNumKinds; ++j) out << "," << fmt6(row.scores.s[static_cast<size_t>(j)]);
        out << ",";
        for (size_t i = 0; i < row.selected.size(); ++i)
            out << (i ? ";" : "") << kind_name(static_cast<PerturbationKind>(row.selected[i]));
        out << ",";
        for (size_t i = 0; i < row.weights.size(); ++i) out << (i ? ";" : "") << fmt6(row.weights[i]);
        out << "\n";
    }
}

void write_activation_matrix(const std::filesystem::path& path,
                             const std::vector<std::vector<double>>& mean_scores) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write activation matrix to '" + path.string() + "'");
    out << "true_kind";
    for (int j = 0; j < kNumKinds; ++j) out << ",mean_score_" << kind_name(static_cast<PerturbationKind>(j));
    out << "\n";
    for (int i = 0; i < kNumKinds; ++i) {
        out << kind_name(static_cast<PerturbationKind>(i));
        for (int j = 0; j < kNumKinds; ++j)
            out << "," << fmt6(mean_scores[static_cast<size_t>(i)][static_cast<size_t>(j)]);
        out << "\n";
    }
}

EvalReport build_report(const PipelineConfig& cfg, MtlModelF& eval_model, MtlModelF& base_model,
                        DmlsNet<float>* router, const ExpertPool<float>* pool,
                        const CorpusIndex& corpus, const EvalTarget& target, int k, FusionMode mode,
                        const std::filesystem::path& report_dir, const std::string& tag) {
    EvalRun routed = evaluate_model(cfg, eval_model, router, pool, corpus, target, k, mode);
    EvalRun base = evaluate_model(cfg, base_model, nullptr, nullptr, corpus, target, k, mode);
    EvalTarget clean_target;
    clean_target.set = EvalTarget::Set::Clean;
    EvalRun routed_clean = evaluate_model(cfg, eval_model, router, pool, corpus, clean_target, k, mode);
    EvalRun base_clean = evaluate_model(cfg, base_model, nullptr, nullptr, corpus, clean_target, k, mode);

    EvalReport report;
    report.tasks = routed.tasks;
    report.baseline = base.tasks;
    report.tasks_clean = routed_clean.tasks;
    report.baseline_clean = base_clean.tasks;
    report.router_confusion = routed.confusion;
    finalize_report(report);

    if (!report_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(report_dir, ec);
        write_report_csv(report_dir / (tag + "_report.csv"), report);
        std::ofstream summary(report_dir / (tag + "_summary.txt"), std::ios::trunc);
        summary << report_summary(report);
        write_fusion_log(report_dir / (tag + "_fusion_log.csv"), routed.fusion_log);
        write_activation_matrix(report_dir / (tag + "_activations.csv"), routed.mean_scores);
        // wall-clock throughput lives outside the deterministic report
        std::ofstream timing(report_dir / (tag + "_timing.txt"), std::ios::trunc);
        timing << "batches=" << routed.batches << "\nimages=" << routed.images
               << "\nelapsed_seconds=" << routed.elapsed_seconds << "\nfps="
               << fps(routed.batches, cfg.eval_batch, std::max(1e-9, routed.elapsed_seconds)) << "\n";
    }
    return report;
}

std::vector<KSweepRow> ablate_k(const PipelineConfig& cfg, MtlModelF& eval_model,
                                MtlModelF& base_model, DmlsNet<float>& router,
                                const ExpertPool<float>& pool, const CorpusIndex& corpus,
                                const std::filesystem::path& csv_path) {
    EvalTarget single;
    single.set = EvalTarget::Set::AdverseUnion;
    EvalTarget mixed;
    mixed.set = EvalTarget::Set::Mixed;
    FusionMode mode = cfg.fusion_mode();

    EvalRun base_single = evaluate_model(cfg, base_model, nullptr, nullptr, corpus, single, 1, mode);
    EvalRun base_mixed = evaluate_model(cfg, base_model, nullptr, nullptr, corpus, mixed, 1, mode);

    auto to_delta = [](const std::vector<TaskResult>& m, const std::vector<TaskResult>& b) {
        std::vector<double> mv, bv;
        std::vector<int> lower;
        for (size_t i = 0; i < m.size(); ++i) {
            mv.push_back(m[i].value);
            bv.push_back(b[i].value);
            lower.push_back(m[i].lower_is_better ? 1 : 0);
        }
        return delta_m(mv, bv, lower);
    };

    std::vector<KSweepRow> rows;
    for (int k = 1; k <= kNumKinds; ++k) {
        EvalRun rs = evaluate_model(cfg, eval_model, &router, &pool, corpus, single, k, mode);
        EvalRun rm = evaluate_model(cfg, eval_model, &router, &pool, corpus, mixed, k, mode);
        rows.push_back({k, to_delta(rs.tasks, base_single.tasks), to_delta(rm.tasks, base_mixed.tasks)});
    }

    if (!csv_path.empty()) {
        if (csv_path.has_parent_path()) {
            std::error_code ec;
            std::filesystem::create_directories(csv_path.parent_path(), ec);
        }
        std::ofstream out(csv_path, std::ios::trunc);
        if (!out) throw IoError("cannot write k-sweep csv to '" + csv_path.string() + "'");
        out << "k,delta_m_single,delta_m_mixed\n";
        for (const auto& row : rows)
            out << row.k << "," << fmt6(row.delta_m_single) << "," << fmt6(row.delta_m_mixed) << "\n";
    }
    return rows;
}

std::vector<RankAblationRow> ablate_ranks(const PipelineConfig& cfg,
                                          const std::vector<std::string>& schedules,
                                          const std::filesystem::path& csv_path) {
    auto model = make_model(cfg);
    std::vector<RankAblationRow> rows;
    for (const auto& s : schedules) {
        RankSchedule schedule = RankSchedule::parse(s);
        rows.push_back({s, expert_param_count_closed_form(*model, schedule, cfg.lora_final_stage_only)});
    }
    if (!csv_path.empty()) {
        if (csv_path.has_parent_path()) {
            std::error_code ec;
            std::filesystem::create_directories(csv_path.parent_path(), ec);
        }
        std::ofstream out(csv_path, std::ios::trunc);
        if (!out) throw IoError("cannot write rank ablation csv");
        out << "schedule,expert_params\n";
        for (const auto& row : rows) out << "\"" << row.schedule << "\"," << row.expert_params << "\n";
    }
    return rows;
}

LoadedArtifacts load_artifacts(const PipelineConfig& cfg) {
    ArtifactPaths paths{cfg.out};
    LoadedArtifacts art;
    if (!std::filesystem::exists(paths.base_ckpt()))
        throw IoError("missing base checkpoint '" + paths.base_ckpt().string() +
                      "'; run train-base first");
    art.base_model = make_model(cfg);
    art.base_model->load_checkpoint(paths.base_ckpt());
    art.eval_model = make_model(cfg);
    if (!cfg.plus_mode() && std::filesystem::exists(paths.finetuned_ckpt()))
        art.eval_model->load_checkpoint(paths.finetuned_ckpt());
    else
        art.eval_model->load_checkpoint(paths.base_ckpt());

    if (!std::filesystem::exists(paths.dmls_ckpt()))
        throw IoError("missing router checkpoint '" + paths.dmls_ckpt().string() +
                      "'; run train-dmls first");
    art.router = std::make_unique<DmlsNet<float>>(derive_seed(cfg.seed, "dmls.init"));
    art.router->load_checkpoint(paths.dmls_ckpt());

    for (PerturbationKind kind : all_kinds()) {
        auto file = paths.expert_file(kind);
        if (!std::filesystem::exists(file))
            throw IoError("missing expert file '" + file.string() + "'; run train-expert --kind " +
                          kind_name(kind));
        art.pool.put(load_expert_file(file, *art.eval_model));
    }
    return art;
}

}  // namespace robumtl
