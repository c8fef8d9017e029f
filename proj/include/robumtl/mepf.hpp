#pragma once

#include <algorithm>
#include <map>
#include <vector>

#include "robumtl/dmls.hpp"
#include "robumtl/lora.hpp"

namespace robumtl {

enum class FusionMode { LoraOnly, Squad };  // RobuMTL vs RobuMTL+

struct FusionConfig {
    int k = 1;
    FusionMode mode = FusionMode::LoraOnly;
};

struct SelectedExpert {
    int index;      // PerturbationKind index
    double score;   // raw router score
    double weight;  // score / sum of selected scores
};

struct SelectedExperts {
    std::vector<SelectedExpert> items;  // descending score, ties by lower index
};

// Keep the k largest scores; weights renormalize over the selection, so the
// result is invariant to a positive rescaling of the score vector.
inline SelectedExperts top_k(const ScoreVector& s, int k) {
    if (k < 1 || k > kNumKinds)
        throw ValidationError("top_k: k must be in 1.." + std::to_string(kNumKinds) + ", got " +
                              std::to_string(k));
    std::array<int, kNumKinds> order;
    for (int i = 0; i < kNumKinds; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (s.s[static_cast<size_t>(a)] != s.s[static_cast<size_t>(b)])
            return s.s[static_cast<size_t>(a)] > s.s[static_cast<size_t>(b)];
        return a < b;
    });
    double total = 0.0;
    for (int i = 0; i < k; ++i) total += s.s[static_cast<size_t>(order[static_cast<size_t>(i)])];
    if (total <= 0.0) throw ValidationError("top_k: selected scores sum to zero");
    SelectedExperts sel;
    for (int i = 0; i < k; ++i) {
        int idx = order[static_cast<size_t>(i)];
        double score = s.s[static_cast<size_t>(idx)];
        sel.items.push_back({idx, score, score / total});
    }
    return sel;
}

// Per site: fused delta = sum_i w_i * alpha_i * A_i * B_i.
template <typename T>
DeltaMap<T> fuse(const std::vector<const LoraExpert<T>*>& pool, const SelectedExperts& selected) {
    if (selected.items.empty()) throw ValidationError("fuse: nothing selected");
    const LoraExpert<T>* first = nullptr;
    for (const auto& item : selected.items) {
        if (item.index < 0 || item.index >= static_cast<int>(pool.size()) ||
            pool[static_cast<size_t>(item.index)] == nullptr)
            throw LookupError("fuse: pool has no expert for class index " + std::to_string(item.index));
        if (!first) first = pool[static_cast<size_t>(item.index)];
    }
    // all selected experts must cover identical site keys
    for (const auto& item : selected.items) {
        const LoraExpert<T>* e = pool[static_cast<size_t>(item.index)];
        if (e->sites.size() != first->sites.size())
            throw ValidationError("fuse: experts cover different site sets");
        for (size_t i = 0; i < e->sites.size(); ++i)
            if (e->sites[i].site != first->sites[i].site)
                throw ValidationError("fuse: site key mismatch at '" + e->sites[i].site + "'");
    }

    DeltaMap<T> fused;
    for (const auto& site : first->sites) {
        Tensor<T> acc;
        for (const auto& item : selected.items) {
            const LoraExpert<T>* e = pool[static_cast<size_t>(item.index)];
            Tensor<T> d = lora_delta(*e, site.site);
            T w = static_cast<T>(item.weight);
            if (!acc.defined()) {
                acc = d;
                for (auto& v : acc.values()) v *= w;
            } else {
                if (d.shape() != acc.shape())
                    throw ValidationError("fuse: delta shape mismatch at '" + site.site + "'");
                auto av = acc.values();
                auto dv = d.values();
                for (size_t i = 0; i < av.size(); ++i) av[i] += w * dv[i];
            }
        }
        fused[site.site] = acc;
    }
    return fused;
}

namespace detail {

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> fuse_snapshots(
    const std::vector<const std::vector<std::pair<std::string, Tensor<T>>>*>& snapshot_sets,
    const std::vector<double>& weights) {
    std::vector<std::pair<std::string, Tensor<T>>> fused;
    const auto& first = *snapshot_sets[0];
    for (size_t t = 0; t < first.size(); ++t) {
        Tensor<T> acc = Tensor<T>::zeros(first[t].second.shape());
        for (size_t e = 0; e < snapshot_sets.size(); ++e) {
            const auto& [name, tensor] = (*snapshot_sets[e])[t];
            if (name != first[t].first || tensor.shape() != first[t].second.shape())
                throw ValidationError("fuse_squads: incompatible snapshot '" + name + "'");
            T w = static_cast<T>(weights[e]);
            auto av = acc.values();
            auto tv = tensor.values();
            for (size_t i = 0; i < av.size(); ++i) av[i] += w * tv[i];
        }
        fused.emplace_back(first[t].first, acc);
    }
    return fused;
}

}  // namespace detail

// LoRA deltas, norm snapshots, and decoder snapshots all fused with the same
// selection weights.
template <typename T>
FusedSquad<T> fuse_squads(const std::vector<const ExpertSquad<T>*>& pool,
                          const SelectedExperts& selected) {
    if (selected.items.empty()) throw ValidationError("fuse_squads: nothing selected");
    std::vector<const LoraExpert<T>*> experts(pool.size(), nullptr);
    for (size_t i = 0; i < pool.size(); ++i)
        if (pool[i]) experts[i] = &pool[i]->expert;

    std::vector<const std::vector<std::pair<std::string, Tensor<T>>>*> norms, decs;
    std::vector<double> weights;
    for (const auto& item : selected.items) {
        if (item.index < 0 || item.index >= static_cast<int>(pool.size()) ||
            pool[static_cast<size_t>(item.index)] == nullptr)
            throw LookupError("fuse_squads: pool has no squad for class index " +
                              std::to_string(item.index));
        const ExpertSquad<T>* sq = pool[static_cast<size_t>(item.index)];
        if (sq->norm_params.empty() && sq->decoder_params.empty())
            throw ValidationError("fuse_squads: squad for class " + std::to_string(item.index) +
                                  " has no snapshots");
        norms.push_back(&sq->norm_params);
        decs.push_back(&sq->decoder_params);
        weights.push_back(item.weight);
    }

    FusedSquad<T> fused;
    fused.deltas = fuse(experts, selected);
    fused.norm_params = detail::fuse_snapshots<T>(norms, weights);
    fused.decoder_params = detail::fuse_snapshots<T>(decs, weights);
    return fused;
}

// Pool of per-perturbation experts (RobuMTL) or squads (RobuMTL+), indexed
// by PerturbationKind.
template <typename T>
struct ExpertPool {
    std::array<std::unique_ptr<ExpertSquad<T>>, kNumKinds> slots;

    void put(ExpertSquad<T> squad) {
        int idx = static_cast<int>(squad.expert.kind);
        slots[static_cast<size_t>(idx)] = std::make_unique<ExpertSquad<T>>(std::move(squad));
    }

    bool has(PerturbationKind kind) const {
        return slots[static_cast<size_t>(kind)] != nullptr;
    }

    const ExpertSquad<T>& at(PerturbationKind kind) const {
        const auto& p = slots[static_cast<size_t>(kind)];
        if (!p)
            throw LookupError(std::string("pool has no expert for kind '") +
                              kind_name(kind) + "'");
        return *p;
    }

    std::vector<const LoraExpert<T>*> expert_views() const {
        std::vector<const LoraExpert<T>*> v(kNumKinds, nullptr);
        for (int i = 0; i < kNumKinds; ++i)
            if (slots[static_cast<size_t>(i)]) v[static_cast<size_t>(i)] = &slots[static_cast<size_t>(i)]->expert;
        return v;
    }

    std::vector<const ExpertSquad<T>*> squad_views() const {
        std::vector<const ExpertSquad<T>*> v(kNumKinds, nullptr);
        for (int i = 0; i < kNumKinds; ++i)
            if (slots[static_cast<size_t>(i)]) v[static_cast<size_t>(i)] = slots[static_cast<size_t>(i)].get();
        return v;
    }
};

struct RouteDecision {
    ScoreVector scores;
    SelectedExperts selected;
};

// One batch-level routing decision: vote once, pick top-k, fuse in weight
// space, inject. The router is never re-invoked per layer or per image.
template <typename T>
std::pair<AdaptedModel<T>, RouteDecision> route_and_adapt(MtlModel<T>& model, DmlsNet<T>& router,
                                                          const std::vector<const ImageData*>& batch,
                                                          const ExpertPool<T>& pool,
                                                          const FusionConfig& config) {
    int64_t before = router.invocations();
    RouteDecision decision;
    decision.scores = router.batch_vote(batch);
    if (router.invocations() != before + 1)
        throw InternalError("router must be invoked exactly once per batch");
    decision.selected = top_k(decision.scores, config.k);
    for (const auto& item : decision.selected.items)
        if (!pool.has(static_cast<PerturbationKind>(item.index)))
            throw LookupError(std::string("pool has no expert for selected kind '") +
                              kind_name(static_cast<PerturbationKind>(item.index)) + "'");
    if (config.mode == FusionMode::LoraOnly) {
        DeltaMap<T> deltas = fuse(pool.expert_views(), decision.selected);
        return {AdaptedModel<T>(model, deltas), decision};
    }
    FusedSquad<T> squad = fuse_squads(pool.squad_views(), decision.selected);
    return {AdaptedModel<T>(model, squad), decision};
}

}  // namespace robumtl
