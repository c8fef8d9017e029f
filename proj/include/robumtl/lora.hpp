#pragma once

#include <map>
#include <string>
#include <vector>

#include "robumtl/backbone.hpp"

namespace robumtl {

// One LoRA rank per encoder stage, smaller ranks early and larger deep.
struct RankSchedule {
    std::array<int64_t, kStages> ranks{16, 32, 64, 128};

    void validate() const {
        for (int64_t r : ranks)
            if (r < 1) throw ValidationError("rank schedule entries must be >= 1");
    }

    static RankSchedule parse(const std::string& csv) {
        RankSchedule s;
        size_t pos = 0;
        for (int i = 0; i < kStages; ++i) {
            size_t comma = csv.find(',', pos);
            std::string tok = comma == std::string::npos ? csv.substr(pos) : csv.substr(pos, comma - pos);
            s.ranks[static_cast<size_t>(i)] = std::stoll(tok);
            if (comma == std::string::npos && i != kStages - 1)
                throw ValidationError("rank schedule needs " + std::to_string(kStages) + " entries");
            pos = comma + 1;
        }
        s.validate();
        return s;
    }

    std::string str() const {
        std::string out;
        for (int i = 0; i < kStages; ++i)
            out += (i ? "," : "") + std::to_string(ranks[static_cast<size_t>(i)]);
        return out;
    }
};

template <typename T>
struct LoraSite {
    std::string site;
    Tensor<T> a;  // d_out x r, gaussian init
    Tensor<T> b;  // r x d_in, zero init
};

// Per-perturbation adapter: one (A, B) pair for every injection site.
template <typename T>
struct LoraExpert {
    PerturbationKind kind = PerturbationKind::Clean;
    T alpha = T(1);
    RankSchedule schedule;
    bool final_stage_only = false;
    std::vector<LoraSite<T>> sites;

    const LoraSite<T>& site(const std::string& name) const {
        for (const auto& s : sites)
            if (s.site == name) return s;
        throw LookupError("expert has no site '" + name + "'");
    }

    bool has_site(const std::string& name) const {
        for (const auto& s : sites)
            if (s.site == name) return true;
        return false;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& s : sites) n += s.a.numel() + s.b.numel();
        return n;
    }
};

// Closed form: sum over sites of r_stage * (d_in + d_out).
template <typename T>
int64_t expert_param_count_closed_form(MtlModel<T>& model, const RankSchedule& schedule,
                                       bool final_stage_only = false) {
    int64_t total = 0;
    for (const auto& site : model.site_names()) {
        int stage = model.stage_of_site(site);
        if (final_stage_only && stage != kStages) continue;
        auto [dout, din] = model.site_dims(site);
        total += schedule.ranks[static_cast<size_t>(stage - 1)] * (din + dout);
    }
    return total;
}

template <typename T>
LoraExpert<T> new_expert(MtlModel<T>& model, PerturbationKind kind, const RankSchedule& schedule,
                         T alpha, uint64_t init_seed, bool final_stage_only = false) {
    schedule.validate();
    LoraExpert<T> expert;
    expert.kind = kind;
    expert.alpha = alpha;
    expert.schedule = schedule;
    expert.final_stage_only = final_stage_only;
    for (const auto& site : model.site_names()) {
        int stage = model.stage_of_site(site);
        if (final_stage_only && stage != kStages) continue;
        auto [dout, din] = model.site_dims(site);
        int64_t r = schedule.ranks[static_cast<size_t>(stage - 1)];
        Pcg32 rng(derive_seed(init_seed, site));
        std::vector<T> av(static_cast<size_t>(dout * r));
        for (auto& v : av) v = static_cast<T>(rng.normal(0.0, 0.02));
        LoraSite<T> s;
        s.site = site;
        s.a = model.tape().leaf({dout, r}, std::move(av), true);
        s.b = model.tape().leaf({r, din}, std::vector<T>(static_cast<size_t>(r * din), T(0)), true);
        expert.sites.push_back(std::move(s));
    }
    return expert;
}

// alpha * A * B, computed outside any tape.
template <typename T>
Tensor<T> lora_delta(const LoraExpert<T>& expert, const std::string& site_name) {
    const LoraSite<T>& s = expert.site(site_name);
    int64_t dout = s.a.dim(0), r = s.a.dim(1), din = s.b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({dout, din});
    mm_acc(s.a.values().data(), s.b.values().data(), out.values().data(), dout, r, din);
    if (expert.alpha != T(1))
        for (auto& v : out.values()) v *= expert.alpha;
    return out;
}

template <typename T>
using DeltaMap = std::map<std::string, Tensor<T>>;

template <typename T>
DeltaMap<T> expert_delta_map(const LoraExpert<T>& expert) {
    DeltaMap<T> map;
    for (const auto& s : expert.sites) map[s.site] = lora_delta(expert, s.site);
    return map;
}

// Training attachments sharing the expert's A/B storage, so optimizer steps
// on the attachment update the expert.
template <typename T>
std::map<std::string, SiteAttachment<T>> expert_attachments(const LoraExpert<T>& expert) {
    std::map<std::string, SiteAttachment<T>> atts;
    for (const auto& s : expert.sites) atts[s.site] = SiteAttachment<T>{s.a, s.b, expert.alpha};
    return atts;
}

// Expert plus snapshots of the normalization and decoder-head tensors.
template <typename T>
struct ExpertSquad {
    LoraExpert<T> expert;
    std::vector<std::pair<std::string, Tensor<T>>> norm_params;
    std::vector<std::pair<std::string, Tensor<T>>> decoder_params;
};

template <typename T>
ExpertSquad<T> make_squad(MtlModel<T>& model, LoraExpert<T> expert) {
    ExpertSquad<T> squad;
    squad.expert = std::move(expert);
    for (const auto& name : model.norm_param_names())
        squad.norm_params.emplace_back(name, model.param(name).clone_detached());
    for (const auto& name : model.decoder_param_names())
        squad.decoder_params.emplace_back(name, model.param(name).clone_detached());
    return squad;
}

// Weight-space fused squad: materialized deltas plus averaged snapshots.
template <typename T>
struct FusedSquad {
    DeltaMap<T> deltas;
    std::vector<std::pair<std::string, Tensor<T>>> norm_params;
    std::vector<std::pair<std::string, Tensor<T>>> decoder_params;
};

// Merge-semantics injection: deltas are added into the base weights, the
// originals are backed up, and eject restores them bit-exactly.
template <typename T>
class AdaptedModel {
public:
    AdaptedModel(MtlModel<T>& model, const DeltaMap<T>& deltas) : model_(&model) {
        add_deltas(deltas);
        active_ = true;
    }

    AdaptedModel(MtlModel<T>& model, const FusedSquad<T>& squad) : model_(&model) {
        add_deltas(squad.deltas);
        overwrite(squad.norm_params);
        overwrite(squad.decoder_params);
        active_ = true;
    }

    AdaptedModel(const AdaptedModel&) = delete;
    AdaptedModel& operator=(const AdaptedModel&) = delete;
    AdaptedModel(AdaptedModel&& other) noexcept
        : model_(other.model_), backups_(std::move(other.backups_)), active_(other.active_) {
        other.active_ = false;
    }

    ~AdaptedModel() {
        if (active_) eject();
    }

    MtlModel<T>& model() { return *model_; }
    bool active() const { return active_; }

    void eject() {
        if (!active_) throw ValidationError("eject: adaptation already ejected");
        for (auto& [name, backup] : backups_) {
            Tensor<T> t = model_->param(name);
            std::copy(backup.begin(), backup.end(), t.values().begin());
        }
        active_ = false;
    }

private:
    void add_deltas(const DeltaMap<T>& deltas) {
        for (const auto& [site, delta] : deltas) {
            Tensor<T> w = model_->site_weight(site);
            if (delta.shape() != w.shape())
                throw ValidationError("delta for site '" + site + "' has shape " +
                                      shape_str(delta.shape()) + ", weight is " +
                                      shape_str(w.shape()));
            backups_.emplace_back(site + ".w",
                                  std::vector<T>(w.values().begin(), w.values().end()));
            auto wv = w.values();
            auto dv = delta.values();
            for (size_t i = 0; i < wv.size(); ++i) wv[i] += dv[i];
        }
    }

    void overwrite(const std::vector<std::pair<std::string, Tensor<T>>>& snapshots) {
        for (const auto& [name, snap] : snapshots) {
            Tensor<T> t = model_->param(name);
            if (snap.shape() != t.shape())
                throw ValidationError("snapshot '" + name + "' has shape " + shape_str(snap.shape()) +
                                      ", model tensor is " + shape_str(t.shape()));
            backups_.emplace_back(name, std::vector<T>(t.values().begin(), t.values().end()));
            std::copy(snap.values().begin(), snap.values().end(), t.values().begin());
        }
    }

    MtlModel<T>* model_;
    std::vector<std::pair<std::string, std::vector<T>>> backups_;
    bool active_ = false;
};

template <typename T>
AdaptedModel<T> inject(MtlModel<T>& model, const DeltaMap<T>& deltas) {
    return AdaptedModel<T>(model, deltas);
}

template <typename T>
AdaptedModel<T> apply_squad(MtlModel<T>& model, const FusedSquad<T>& squad) {
    return AdaptedModel<T>(model, squad);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
NamedTensor to_named(const std::string& name, const Tensor<T>& t) {
    NamedTensor nt;
    nt.name = name;
    nt.shape = t.shape();
    nt.data.assign(t.values().begin(), t.values().end());
    return nt;
}

template <typename T>
Tensor<T> from_named(const NamedTensor& nt) {
    std::vector<T> vals(nt.data.begin(), nt.data.end());
    return Tensor<T>::from_values(nt.shape, std::move(vals), false, nullptr);
}

}  // namespace detail

template <typename T>
void save_expert(const std::filesystem::path& path, const LoraExpert<T>& expert) {
    ExpertFileMeta meta;
    meta.kind = static_cast<uint8_t>(expert.kind);
    meta.alpha = static_cast<float>(expert.alpha);
    for (int64_t r : expert.schedule.ranks) meta.schedule.push_back(static_cast<uint32_t>(r));
    meta.has_squad = false;
    std::vector<NamedTensor> tensors;
    for (const auto& s : expert.sites) {
        tensors.push_back(detail::to_named("lora." + s.site + ".A", s.a));
        tensors.push_back(detail::to_named("lora." + s.site + ".B", s.b));
    }
    write_expert_file(path, meta, tensors);
}

template <typename T>
void save_squad(const std::filesystem::path& path, const ExpertSquad<T>& squad) {
    ExpertFileMeta meta;
    meta.kind = static_cast<uint8_t>(squad.expert.kind);
    meta.alpha = static_cast<float>(squad.expert.alpha);
    for (int64_t r : squad.expert.schedule.ranks) meta.schedule.push_back(static_cast<uint32_t>(r));
    meta.has_squad = true;
    std::vector<NamedTensor> tensors;
    for (const auto& s : squad.expert.sites) {
        tensors.push_back(detail::to_named("lora." + s.site + ".A", s.a));
        tensors.push_back(detail::to_named("lora." + s.site + ".B", s.b));
    }
    for (const auto& [name, t] : squad.norm_params)
        tensors.push_back(detail::to_named("squad.norm." + name, t));
    for (const auto& [name, t] : squad.decoder_params)
        tensors.push_back(detail::to_named("squad.dec." + name, t));
    write_expert_file(path, meta, tensors);
}

// Parses and shape-checks against the model; site keys must exactly match
// the model's enumerable injection sites for the stored placement mode.
template <typename T>
ExpertSquad<T> load_expert_file(const std::filesystem::path& path, MtlModel<T>& model) {
    auto [meta, tensors] = read_expert_file(path);
    ExpertSquad<T> squad;
    squad.expert.kind = static_cast<PerturbationKind>(meta.kind);
    squad.expert.alpha = static_cast<T>(meta.alpha);
    if (meta.schedule.size() != kStages)
        throw FormatError(path.filename().string() + ": schedule length " +
                              std::to_string(meta.schedule.size()) + ", expected " +
                              std::to_string(kStages),
                          16);
    for (int i = 0; i < kStages; ++i)
        squad.expert.schedule.ranks[static_cast<size_t>(i)] = meta.schedule[static_cast<size_t>(i)];

    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t;

    bool any_stage_before_final = false;
    for (const auto& t : tensors)
        if (t.name.rfind("lora.enc.s4", 0) != 0 && t.name.rfind("lora.", 0) == 0)
            any_stage_before_final = true;
    squad.expert.final_stage_only = !any_stage_before_final;

    for (const auto& site : model.site_names()) {
        int stage = model.stage_of_site(site);
        if (squad.expert.final_stage_only && stage != kStages) continue;
        auto ia = by_name.find("lora." + site + ".A");
        auto ib = by_name.find("lora." + site + ".B");
        if (ia == by_name.end() || ib == by_name.end())
            throw FormatError(path.filename().string() + ": missing tensors for site '" + site + "'",
                              16);
        auto [dout, din] = model.site_dims(site);
        int64_t r = squad.expert.schedule.ranks[static_cast<size_t>(stage - 1)];
        if (ia->second->shape != Shape{dout, r} || ib->second->shape != Shape{r, din})
            throw FormatError(path.filename().string() + ": site '" + site +
                                  "' tensor shapes do not match the model",
                              16);
        LoraSite<T> s;
        s.site = site;
        s.a = detail::from_named<T>(*ia->second);
        s.b = detail::from_named<T>(*ib->second);
        s.a.set_tape(&model.tape());
        s.b.set_tape(&model.tape());
        s.a.set_requires_grad(true);
        s.b.set_requires_grad(true);
        squad.expert.sites.push_back(std::move(s));
    }

    if (meta.has_squad) {
        for (const auto& name : model.norm_param_names()) {
            auto it = by_name.find("squad.norm." + name);
            if (it == by_name.end())
                throw FormatError(path.filename().string() + ": missing squad tensor '" + name + "'",
                                  16);
            if (it->second->shape != model.param(name).shape())
                throw FormatError(path.filename().string() + ": squad tensor '" + name +
                                      "' shape mismatch vs model",
                                  16);
            squad.norm_params.emplace_back(name, detail::from_named<T>(*it->second));
        }
        for (const auto& name : model.decoder_param_names()) {
            auto it = by_name.find("squad.dec." + name);
            if (it == by_name.end())
                throw FormatError(path.filename().string() + ": missing squad tensor '" + name + "'",
                                  16);
            if (it->second->shape != model.param(name).shape())
                throw FormatError(path.filename().string() + ": squad tensor '" + name +
                                      "' shape mismatch vs model",
                                  16);
            squad.decoder_params.emplace_back(name, detail::from_named<T>(*it->second));
        }
    }
    return squad;
}

}  // namespace robumtl
