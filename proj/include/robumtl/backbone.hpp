#pragma once

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "robumtl/ops.hpp"
#include "robumtl/perturb.hpp"
#include "robumtl/rng.hpp"
#include "robumtl/serialize.hpp"

namespace robumtl {

enum class TaskKind { MulticlassSeg, BinarySeg, DenseRegression };

struct TaskSpec {
    std::string name;
    TaskKind kind = TaskKind::MulticlassSeg;
    int64_t channels = 1;
    double lambda = 1.0;
};

inline std::vector<TaskSpec> default_tasks() {
    return {
        {"semseg", TaskKind::MulticlassSeg, 5, 1.0},
        {"saliency", TaskKind::BinarySeg, 1, 1.0},
        {"normals", TaskKind::DenseRegression, 2, 1.0},
    };
}

struct ModelConfig {
    int64_t input = 64;
    int64_t in_channels = 3;
    int64_t patch = 4;  // stage-1 patch embedding; later stages merge 2x2
    std::array<int64_t, 4> channels{16, 32, 64, 128};
    int64_t head_dim = 8;
    int64_t ffn_ratio = 4;
    std::vector<TaskSpec> tasks = default_tasks();

    void validate() const {
        if (input % (patch * 8) != 0)
            throw ValidationError("model input " + std::to_string(input) +
                                  " must be divisible by patch*8");
        for (int64_t c : channels)
            if (c % head_dim != 0)
                throw ValidationError("stage channels must be divisible by head_dim");
        if (tasks.empty()) throw ValidationError("model needs at least one task");
        for (const auto& t : tasks) {
            if (t.lambda <= 0.0) throw ValidationError("task weight must be positive");
            if (t.kind == TaskKind::BinarySeg && t.channels != 1)
                throw ValidationError("binary task '" + t.name + "' must have 1 channel");
        }
    }
};

inline constexpr int kStages = 4;

// The four per-stage low-rank injection sites, in fixed order.
inline const std::array<const char*, 4> kSiteSuffixes = {"attn.qkv", "attn.proj", "ffn.fc1",
                                                         "ffn.fc2"};

inline std::vector<std::string> encoder_site_names() {
    std::vector<std::string> names;
    for (int s = 1; s <= kStages; ++s)
        for (const char* suffix : kSiteSuffixes)
            names.push_back("enc.s" + std::to_string(s) + "." + suffix);
    return names;
}

template <typename T>
struct Features {
    std::array<Tensor<T>, kStages> stage;  // image layout [N, C_s, h_s, w_s]
    int64_t n = 0;
    std::array<int64_t, kStages> spatial{};
};

// Training-time low-rank attachment: the effective site weight W + a*A*B is
// rebuilt in-graph each forward so gradients reach A and B.
template <typename T>
struct SiteAttachment {
    Tensor<T> a;  // d_out x r
    Tensor<T> b;  // r x d_in
    T alpha = T(1);
};

// Test-oracle side path: forward computes W*x + a*A*(B*x) without ever
// materializing A*B.
template <typename T>
struct SidePath {
    Tensor<T> a;
    Tensor<T> b;
    T alpha = T(1);
};

template <typename T>
struct Batch {
    Tensor<T> images;      // N x C x H x W
    std::vector<int> seg;  // N*H*W class ids
    Tensor<T> saliency;    // N x 1 x H x W
    Tensor<T> normals;     // N x 2 x H x W
    int64_t n = 0;
};

template <typename T>
Batch<T> make_batch(const std::vector<const ImageSample*>& samples, Tape<T>* tape) {
    if (samples.empty()) throw ValidationError("make_batch: empty batch");
    int64_t n = static_cast<int64_t>(samples.size());
    int64_t c = samples[0]->pixels.c, h = samples[0]->pixels.h, w = samples[0]->pixels.w;
    Batch<T> batch;
    batch.n = n;
    std::vector<T> img(static_cast<size_t>(n * c * h * w));
    std::vector<T> sal(static_cast<size_t>(n * h * w));
    std::vector<T> nrm(static_cast<size_t>(n * 2 * h * w));
    batch.seg.resize(static_cast<size_t>(n * h * w));
    for (int64_t i = 0; i < n; ++i) {
        const ImageSample& s = *samples[static_cast<size_t>(i)];
        if (s.pixels.c != c || s.pixels.h != h || s.pixels.w != w)
            throw DimensionError("make_batch: inconsistent sample shapes");
        for (int64_t j = 0; j < c * h * w; ++j)
            img[static_cast<size_t>(i * c * h * w + j)] = static_cast<T>(s.pixels.data[static_cast<size_t>(j)]);
        for (int64_t j = 0; j < h * w; ++j) {
            batch.seg[static_cast<size_t>(i * h * w + j)] = s.labels.seg[static_cast<size_t>(j)];
            sal[static_cast<size_t>(i * h * w + j)] = static_cast<T>(s.labels.saliency[static_cast<size_t>(j)]);
        }
        for (int64_t j = 0; j < 2 * h * w; ++j)
            nrm[static_cast<size_t>(i * 2 * h * w + j)] = static_cast<T>(s.labels.normals[static_cast<size_t>(j)]);
    }
    batch.images = Tensor<T>::from_values({n, c, h, w}, std::move(img), false, tape);
    batch.saliency = Tensor<T>::from_values({n, 1, h, w}, std::move(sal), false, tape);
    batch.normals = Tensor<T>::from_values({n, 2, h, w}, std::move(nrm), false, tape);
    return batch;
}

// Shared hierarchical encoder with per-task linear+bilinear decoders.
template <typename T>
class MtlModel {
public:
    explicit MtlModel(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        tape_ = std::make_unique<Tape<T>>();
        init_seed_ = init_seed;
        build();
    }

    const ModelConfig& config() const { return cfg_; }
    Tape<T>& tape() { return *tape_; }

    // ---- parameters ----

    std::vector<std::pair<std::string, Tensor<T>>>& named_params() { return params_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& named_params() const { return params_; }

    Tensor<T> param(const std::string& name) {
        for (auto& [n, t] : params_)
            if (n == name) return t;
        throw LookupError("no parameter named '" + name + "'");
    }

    std::vector<std::string> site_names() const { return encoder_site_names(); }

    // The weight tensor adapted at a given injection site.
    Tensor<T> site_weight(const std::string& site) { return param(site + ".w"); }

    // d_out, d_in of a site weight.
    std::pair<int64_t, int64_t> site_dims(const std::string& site) {
        Tensor<T> w = site_weight(site);
        return {w.dim(0), w.dim(1)};
    }

    int stage_of_site(const std::string& site) const {
        // "enc.s<k>." prefix
        return site[5] - '0';
    }

    std::vector<std::string> norm_param_names() const {
        std::vector<std::string> names;
        for (int s = 1; s <= kStages; ++s) {
            names.push_back("enc.s" + std::to_string(s) + ".ln1.g");
            names.push_back("enc.s" + std::to_string(s) + ".ln1.b");
            names.push_back("enc.s" + std::to_string(s) + ".ln2.g");
            names.push_back("enc.s" + std::to_string(s) + ".ln2.b");
        }
        return names;
    }

    std::vector<std::string> decoder_param_names() const {
        std::vector<std::string> names;
        for (const auto& task : cfg_.tasks)
            for (int s = 1; s <= kStages; ++s) {
                names.push_back("dec." + task.name + ".s" + std::to_string(s) + ".w");
                names.push_back("dec." + task.name + ".s" + std::to_string(s) + ".b");
            }
        return names;
    }

    // Encoder weights that stay frozen under every adaptation mode: site
    // weights, patch merges, and their biases (norm params excluded).
    std::vector<std::string> frozen_encoder_param_names() const {
        std::vector<std::string> names;
        for (int s = 1; s <= kStages; ++s) {
            std::string p = "enc.s" + std::to_string(s) + ".";
            names.push_back(p + "merge.w");
            names.push_back(p + "merge.b");
            for (const char* suffix : kSiteSuffixes) {
                names.push_back(p + suffix + ".w");
                names.push_back(p + suffix + ".b");
            }
        }
        return names;
    }

    uint64_t param_hash(const std::vector<std::string>& names) {
        uint64_t h = 1469598103934665603ull;
        for (const auto& name : names) {
            Tensor<T> t = param(name);
            h = fnv1a64_bytes(name.data(), name.size(), h);
            h = fnv1a64_bytes(t.values().data(), t.values().size() * sizeof(T), h);
        }
        return h;
    }

    uint64_t full_hash() {
        std::vector<std::string> names;
        for (auto& [n, t] : params_) names.push_back(n);
        return param_hash(names);
    }

    int64_t total_param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    // ---- adaptation hooks ----

    void set_attachments(std::map<std::string, SiteAttachment<T>> atts) {
        attachments_ = std::move(atts);
    }
    void clear_attachments() { attachments_.clear(); }

    void set_side_paths(std::map<std::string, SidePath<T>> paths) { side_paths_ = std::move(paths); }
    void clear_side_paths() { side_paths_.clear(); }

    // ---- forward ----

    Features<T> encode(const Tensor<T>& x) {
        if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.input ||
            x.dim(3) != cfg_.input)
            throw DimensionError("encode: expected [N," + std::to_string(cfg_.in_channels) + "," +
                                 std::to_string(cfg_.input) + "," + std::to_string(cfg_.input) +
                                 "], got " + shape_str(x.shape()));
        Features<T> feats;
        int64_t n = x.dim(0);
        feats.n = n;
        Tensor<T> cur = x;
        int64_t res = cfg_.input;
        for (int s = 0; s < kStages; ++s) {
            int64_t patch = s == 0 ? cfg_.patch : 2;
            res /= patch;
            cur = run_stage(s, cur, n, res);
            feats.stage[static_cast<size_t>(s)] = cur;
            feats.spatial[static_cast<size_t>(s)] = res;
        }
        return feats;
    }

    Tensor<T> decode_task(const Features<T>& feats, size_t task_idx) {
        if (task_idx >= cfg_.tasks.size())
            throw LookupError("unknown task index " + std::to_string(task_idx));
        const TaskSpec& task = cfg_.tasks[task_idx];
        Tensor<T> sum;
        for (int s = 0; s < kStages; ++s) {
            std::string p = "dec." + task.name + ".s" + std::to_string(s + 1);
            Tensor<T> rows = space_to_tokens(feats.stage[static_cast<size_t>(s)]);
            Tensor<T> mapped = linear(rows, param(p + ".w"), param(p + ".b"));
            Tensor<T> img = tokens_to_space(mapped, feats.n, feats.spatial[static_cast<size_t>(s)],
                                            feats.spatial[static_cast<size_t>(s)]);
            Tensor<T> up = bilinear_upsample(img, cfg_.input, cfg_.input);
            sum = sum.defined() ? add(sum, up) : up;
        }
        return sum;
    }

    size_t task_index(const std::string& name) const {
        for (size_t i = 0; i < cfg_.tasks.size(); ++i)
            if (cfg_.tasks[i].name == name) return i;
        throw LookupError("unknown task '" + name + "'");
    }

    std::vector<Tensor<T>> forward(const Tensor<T>& x) {
        Features<T> feats = encode(x);
        std::vector<Tensor<T>> preds;
        for (size_t t = 0; t < cfg_.tasks.size(); ++t) preds.push_back(decode_task(feats, t));
        return preds;
    }

    // Weighted multi-task objective: sum_t lambda_t * L_t.
    Tensor<T> mtl_loss(const std::vector<Tensor<T>>& preds, const Batch<T>& batch,
                       const std::vector<double>* lambda_override = nullptr) {
        if (preds.size() != cfg_.tasks.size())
            throw ValidationError("mtl_loss: expected " + std::to_string(cfg_.tasks.size()) +
                                  " predictions, got " + std::to_string(preds.size()));
        Tensor<T> total;
        for (size_t t = 0; t < cfg_.tasks.size(); ++t) {
            Tensor<T> task_loss = this->task_loss(preds[t], batch, t);
            double lambda = lambda_override ? (*lambda_override)[t] : cfg_.tasks[t].lambda;
            total = total.defined() ? add_scaled(total, task_loss, static_cast<T>(lambda))
                                    : scale(task_loss, static_cast<T>(lambda));
        }
        return total;
    }

    Tensor<T> task_loss(const Tensor<T>& pred, const Batch<T>& batch, size_t task_idx) {
        const TaskSpec& task = cfg_.tasks[task_idx];
        switch (task.kind) {
            case TaskKind::MulticlassSeg: {
                Tensor<T> rows = space_to_tokens(pred);  // (N*H*W) x classes
                return cross_entropy(rows, batch.seg);
            }
            case TaskKind::BinarySeg:
                return bce_with_logits(pred, batch.saliency);
            case TaskKind::DenseRegression:
                return l2_loss(pred, batch.normals);
        }
        throw InternalError("unhandled task kind");
    }

    // ---- persistence ----

    std::vector<NamedTensor> to_named_tensors() {
        std::vector<NamedTensor> out;
        for (auto& [name, t] : params_) {
            NamedTensor nt;
            nt.name = name;
            nt.shape = t.shape();
            nt.data.assign(t.values().begin(), t.values().end());
            out.push_back(std::move(nt));
        }
        return out;
    }

    void load_named_tensors(const std::vector<NamedTensor>& tensors) {
        if (tensors.size() != params_.size())
            throw ValidationError("checkpoint has " + std::to_string(tensors.size()) +
                                  " tensors, model has " + std::to_string(params_.size()));
        for (size_t i = 0; i < tensors.size(); ++i) {
            auto& [name, t] = params_[i];
            const NamedTensor& nt = tensors[i];
            if (nt.name != name)
                throw ValidationError("checkpoint tensor '" + nt.name + "' does not match model '" +
                                      name + "'");
            if (nt.shape != t.shape())
                throw ValidationError("checkpoint tensor '" + nt.name + "' shape mismatch");
            for (size_t j = 0; j < nt.data.size(); ++j) t.values()[j] = static_cast<T>(nt.data[j]);
        }
    }

    void save_checkpoint(const std::filesystem::path& path) {
        write_checkpoint(path, to_named_tensors());
    }

    void load_checkpoint(const std::filesystem::path& path) {
        load_named_tensors(read_checkpoint(path));
    }

private:
    void build() {
        int64_t prev_c = cfg_.in_channels;
        for (int s = 0; s < kStages; ++s) {
            int64_t d = cfg_.channels[static_cast<size_t>(s)];
            int64_t patch = s == 0 ? cfg_.patch : 2;
            std::string p = "enc.s" + std::to_string(s + 1) + ".";
            add_param(p + "merge.w", {d, prev_c * patch * patch}, InitKind::Gaussian);
            add_param(p + "merge.b", {d}, InitKind::Zero);
            add_param(p + "ln1.g", {d}, InitKind::One);
            add_param(p + "ln1.b", {d}, InitKind::Zero);
            add_param(p + "attn.qkv.w", {3 * d, d}, InitKind::Gaussian);
            add_param(p + "attn.qkv.b", {3 * d}, InitKind::Zero);
            add_param(p + "attn.proj.w", {d, d}, InitKind::Gaussian);
            add_param(p + "attn.proj.b", {d}, InitKind::Zero);
            add_param(p + "ln2.g", {d}, InitKind::One);
            add_param(p + "ln2.b", {d}, InitKind::Zero);
            add_param(p + "ffn.fc1.w", {cfg_.ffn_ratio * d, d}, InitKind::Gaussian);
            add_param(p + "ffn.fc1.b", {cfg_.ffn_ratio * d}, InitKind::Zero);
            add_param(p + "ffn.fc2.w", {d, cfg_.ffn_ratio * d}, InitKind::Gaussian);
            add_param(p + "ffn.fc2.b", {d}, InitKind::Zero);
            prev_c = d;
        }
        for (const auto& task : cfg_.tasks)
            for (int s = 0; s < kStages; ++s) {
                std::string p = "dec." + task.name + ".s" + std::to_string(s + 1);
                add_param(p + ".w", {task.channels, cfg_.channels[static_cast<size_t>(s)]},
                          InitKind::Gaussian);
                add_param(p + ".b", {task.channels}, InitKind::Zero);
            }
    }

    enum class InitKind { Gaussian, Zero, One };

    void add_param(const std::string& name, Shape shape, InitKind init) {
        int64_t n = shape_numel(shape);
        std::vector<T> vals(static_cast<size_t>(n));
        switch (init) {
            case InitKind::Zero: break;
            case InitKind::One:
                std::fill(vals.begin(), vals.end(), T(1));
                break;
            case InitKind::Gaussian: {
                Pcg32 rng(derive_seed(init_seed_, name));
                for (auto& v : vals) v = static_cast<T>(rng.normal(0.0, 0.02));
                break;
            }
        }
        params_.emplace_back(name, tape_->leaf(std::move(shape), std::move(vals), true));
    }

    Tensor<T> site_linear(const std::string& site, const Tensor<T>& x) {
        Tensor<T> w = site_weight(site);
        Tensor<T> b = param(site + ".b");
        auto side = side_paths_.find(site);
        if (side != side_paths_.end()) {
            Tensor<T> base = linear(x, w, b);
            Tensor<T> low = linear(linear(x, side->second.b), side->second.a);
            return add_scaled(base, low, side->second.alpha);
        }
        auto att = attachments_.find(site);
        if (att != attachments_.end()) {
            Tensor<T> delta = matmul(att->second.a, att->second.b);
            Tensor<T> w_eff = add_scaled(w, delta, att->second.alpha);
            return linear(x, w_eff, b);
        }
        return linear(x, w, b);
    }

    Tensor<T> run_stage(int s, const Tensor<T>& x, int64_t n, int64_t res) {
        int64_t d = cfg_.channels[static_cast<size_t>(s)];
        int64_t patch = s == 0 ? cfg_.patch : 2;
        int64_t heads = d / cfg_.head_dim;
        int64_t tokens_per_img = res * res;
        std::string p = "enc.s" + std::to_string(s + 1) + ".";

        Tensor<T> rows = patchify(x, patch);
        Tensor<T> tok = linear(rows, param(p + "merge.w"), param(p + "merge.b"));

        // attention block with pre-norm residual
        Tensor<T> normed = layer_norm(tok, param(p + "ln1.g"), param(p + "ln1.b"));
        Tensor<T> qkv = site_linear(p + "attn.qkv", normed);
        Tensor<T> q = heads_layout(slice_cols(qkv, 0, d), n, tokens_per_img, heads);
        Tensor<T> k = heads_layout(slice_cols(qkv, d, 2 * d), n, tokens_per_img, heads);
        Tensor<T> v = heads_layout(slice_cols(qkv, 2 * d, 3 * d), n, tokens_per_img, heads);
        Tensor<T> scores = scale(bmm(q, k, true),
                                 static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.head_dim))));
        Tensor<T> attn = softmax(scores, 2);
        Tensor<T> ctx = bmm(attn, v);
        Tensor<T> merged = heads_unlayout(ctx, n, tokens_per_img, heads);
        Tensor<T> projected = site_linear(p + "attn.proj", merged);
        tok = add(tok, projected);

        // feed-forward block with pre-norm residual
        Tensor<T> normed2 = layer_norm(tok, param(p + "ln2.g"), param(p + "ln2.b"));
        Tensor<T> h1 = relu(site_linear(p + "ffn.fc1", normed2));
        Tensor<T> h2 = site_linear(p + "ffn.fc2", h1);
        tok = add(tok, h2);

        return tokens_to_space(tok, n, res, res);
    }

    // (N*L) x d -> (N*heads) x L x dh
    Tensor<T> heads_layout(const Tensor<T>& x, int64_t n, int64_t l, int64_t heads) {
        Tensor<T> t4 = reshape(x, {n, l, heads, cfg_.head_dim});
        Tensor<T> perm = permute4(t4, {0, 2, 1, 3});
        return reshape(perm, {n * heads, l, cfg_.head_dim});
    }

    Tensor<T> heads_unlayout(const Tensor<T>& x, int64_t n, int64_t l, int64_t heads) {
        Tensor<T> t4 = reshape(x, {n, heads, l, cfg_.head_dim});
        Tensor<T> perm = permute4(t4, {0, 2, 1, 3});
        return reshape(perm, {n * l, heads * cfg_.head_dim});
    }

    ModelConfig cfg_;
    uint64_t init_seed_ = 0;
    std::unique_ptr<Tape<T>> tape_;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::map<std::string, SiteAttachment<T>> attachments_;
    std::map<std::string, SidePath<T>> side_paths_;
};

using MtlModelF = MtlModel<float>;

}  // namespace robumtl
