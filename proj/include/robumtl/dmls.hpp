#pragma once

#include <atomic>
#include <cmath>
#include <string>
#include <vector>

#include "robumtl/ops.hpp"
#include "robumtl/perturb.hpp"
#include "robumtl/rng.hpp"
#include "robumtl/serialize.hpp"

namespace robumtl {

// Normalized scores over perturbation classes, indexed by PerturbationKind.
struct ScoreVector {
    std::array<double, kNumKinds> s{};

    double sum() const {
        double t = 0.0;
        for (double v : s) t += v;
        return t;
    }

    int argmax() const {
        int best = 0;
        for (int i = 1; i < kNumKinds; ++i)
            if (s[static_cast<size_t>(i)] > s[static_cast<size_t>(best)]) best = i;
        return best;
    }

    void renormalize() {
        double t = sum();
        if (t <= 0.0) throw ValidationError("score vector sums to zero");
        for (double& v : s) v /= t;
    }
};

struct SelectorLossStats {
    int clamped = 0;  // scores that hit the log floor
};

// L = -(1/N) sum_i log s_{i, y_i}, with the log clamped at 1e-12.
inline double selector_loss(const std::vector<ScoreVector>& scores, const std::vector<int>& labels,
                            SelectorLossStats* stats = nullptr) {
    if (scores.size() != labels.size() || scores.empty())
        throw ValidationError("selector_loss: score/label count mismatch");
    double total = 0.0;
    for (size_t i = 0; i < scores.size(); ++i) {
        int y = labels[i];
        if (y < 0 || y >= kNumKinds)
            throw ValidationError("selector_loss: label " + std::to_string(y) + " out of range");
        double p = scores[i].s[static_cast<size_t>(y)];
        if (p < 1e-12) {
            p = 1e-12;
            if (stats) ++stats->clamped;
        }
        total -= std::log(p);
    }
    return total / static_cast<double>(scores.size());
}

// Lightweight perturbation classifier: three conv stages, a softmax-gated
// SE block, and a two-layer FC head.
template <typename T>
class DmlsNet {
public:
    explicit DmlsNet(uint64_t init_seed, int64_t in_channels = 3) : in_channels_(in_channels) {
        tape_ = std::make_unique<Tape<T>>();
        init_seed_ = init_seed;
        build();
    }

    Tape<T>& tape() { return *tape_; }
    std::vector<std::pair<std::string, Tensor<T>>>& named_params() { return params_; }

    Tensor<T> param(const std::string& name) {
        for (auto& [n, t] : params_)
            if (n == name) return t;
        throw LookupError("dmls has no parameter '" + name + "'");
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    // z = ReLU(W1 * f), e = Softmax(W2 * z), weighted = f (.) e
    std::pair<Tensor<T>, Tensor<T>> se_block(const Tensor<T>& f_global) {
        if (f_global.ndim() != 2 || f_global.dim(1) != 128)
            throw DimensionError("se_block: expected [N,128] features, got " +
                                 shape_str(f_global.shape()));
        Tensor<T> z = relu(linear(f_global, param("se.w1.w"), param("se.w1.b")));
        Tensor<T> e = softmax(linear(z, param("se.w2.w"), param("se.w2.b")), 1);
        Tensor<T> weighted = mul(f_global, e);
        return {e, weighted};
    }

    Tensor<T> forward_logits(const Tensor<T>& images) {
        if (images.ndim() != 4 || images.dim(1) != in_channels_)
            throw DimensionError("dmls: expected [N," + std::to_string(in_channels_) +
                                 ",H,W] input, got " + shape_str(images.shape()));
        Tensor<T> h = relu(conv2d(images, param("stage1.w"), param("stage1.b"), 1, 1));
        h = maxpool2d(h, 2);
        h = relu(depthwise_separable_conv(h, param("stage2.dw.w"), param("stage2.dw.b"),
                                          param("stage2.pw.w"), param("stage2.pw.b"), 1, 1));
        h = maxpool2d(h, 2);
        h = relu(depthwise_separable_conv(h, param("stage3.dw.w"), param("stage3.dw.b"),
                                          param("stage3.pw.w"), param("stage3.pw.b"), 1, 1));
        Tensor<T> f_global = adaptive_avgpool(h);  // N x 128
        auto [e, weighted] = se_block(f_global);
        Tensor<T> fc1 = relu(linear(weighted, param("fc1.w"), param("fc1.b")));
        return linear(fc1, param("fc2.w"), param("fc2.b"));
    }

    // Per-image probability vectors; does not count as a routing invocation.
    std::vector<ScoreVector> forward_probs(const Tensor<T>& images) {
        NoGradGuard<T> ng(tape_.get());
        Tensor<T> probs = softmax(forward_logits(images), 1);
        int64_t n = probs.dim(0);
        std::vector<ScoreVector> out(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i)
            for (int j = 0; j < kNumKinds; ++j)
                out[static_cast<size_t>(i)].s[static_cast<size_t>(j)] =
                    static_cast<double>(probs.values()[static_cast<size_t>(i * kNumKinds + j)]);
        return out;
    }

    // Single-image routing decision.
    ScoreVector forward(const ImageData& img) {
        Tensor<T> x = image_tensor({&img});
        auto probs = forward_probs(x);
        ++invocations_;
        return probs[0];
    }

    // One routing decision per batch: the elementwise mean of the per-image
    // probability vectors (soft voting), renormalized. Hard voting counts
    // per-image argmax wins instead.
    ScoreVector batch_vote(const std::vector<const ImageData*>& images, bool hard_vote = false) {
        if (images.empty()) throw ValidationError("batch_vote: empty batch");
        Tensor<T> x = image_tensor(images);
        auto probs = forward_probs(x);
        ScoreVector vote;
        if (hard_vote) {
            for (const auto& p : probs) vote.s[static_cast<size_t>(p.argmax())] += 1.0;
        } else {
            for (const auto& p : probs)
                for (int j = 0; j < kNumKinds; ++j) vote.s[static_cast<size_t>(j)] += p.s[static_cast<size_t>(j)];
        }
        vote.renormalize();
        ++invocations_;
        return vote;
    }

    int64_t invocations() const { return invocations_.load(); }

    Tensor<T> image_tensor(const std::vector<const ImageData*>& images) {
        int64_t n = static_cast<int64_t>(images.size());
        int64_t c = images[0]->c, h = images[0]->h, w = images[0]->w;
        std::vector<T> buf(static_cast<size_t>(n * c * h * w));
        for (int64_t i = 0; i < n; ++i) {
            const ImageData& img = *images[static_cast<size_t>(i)];
            if (img.c != c || img.h != h || img.w != w)
                throw DimensionError("batch images must share one shape");
            for (int64_t j = 0; j < c * h * w; ++j)
                buf[static_cast<size_t>(i * c * h * w + j)] = static_cast<T>(img.data[static_cast<size_t>(j)]);
        }
        return Tensor<T>::from_values({n, c, h, w}, std::move(buf), false, tape_.get());
    }

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

    void save_checkpoint(const std::filesystem::path& path) {
        write_checkpoint(path, to_named_tensors());
    }

    void load_checkpoint(const std::filesystem::path& path) {
        auto tensors = read_checkpoint(path);
        if (tensors.size() != params_.size())
            throw ValidationError("router checkpoint record count mismatch");
        for (size_t i = 0; i < tensors.size(); ++i) {
            auto& [name, t] = params_[i];
            if (tensors[i].name != name || tensors[i].shape != t.shape())
                throw ValidationError("router checkpoint tensor '" + tensors[i].name +
                                      "' does not match '" + name + "'");
            for (size_t j = 0; j < tensors[i].data.size(); ++j)
                t.values()[j] = static_cast<T>(tensors[i].data[j]);
        }
    }

private:
    void build() {
        // stage1: conv 3->16, stage2: dw-sep 16->48, stage3: dw-sep 48->128
        add_conv("stage1", {16, in_channels_, 3, 3});
        add_conv("stage2.dw", {16, 3, 3});
        add_conv("stage2.pw", {48, 16, 1, 1});
        add_conv("stage3.dw", {48, 3, 3});
        add_conv("stage3.pw", {128, 48, 1, 1});
        add_conv("se.w1", {64, 128});
        add_conv("se.w2", {128, 64});
        add_conv("fc1", {64, 128});
        add_conv("fc2", {kNumKinds, 64});
    }

    void add_conv(const std::string& name, Shape wshape) {
        int64_t fan_in = 1;
        for (size_t i = 1; i < wshape.size(); ++i) fan_in *= wshape[i];
        if (wshape.size() == 3) fan_in = wshape[1] * wshape[2];  // depthwise
        double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        Pcg32 rng(derive_seed(init_seed_, name));
        std::vector<T> wv(static_cast<size_t>(shape_numel(wshape)));
        for (auto& v : wv) v = static_cast<T>(rng.normal(0.0, std));
        params_.emplace_back(name + ".w", tape_->leaf(wshape, std::move(wv), true));
        int64_t bias_n = wshape[0];
        params_.emplace_back(name + ".b",
                             tape_->leaf({bias_n}, std::vector<T>(static_cast<size_t>(bias_n), T(0)), true));
    }

    int64_t in_channels_;
    uint64_t init_seed_ = 0;
    std::unique_ptr<Tape<T>> tape_;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::atomic<int64_t> invocations_{0};
};

}  // namespace robumtl
