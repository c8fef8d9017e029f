#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "robumtl/common.hpp"
#include "robumtl/tensor.hpp"

namespace robumtl {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over a fixed set of named parameters. State is per-parameter (m, v)
// plus a shared step counter; updates are deterministic given state.
template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void add_param(const std::string& name, Tensor<T> p) {
        if (!p.requires_grad())
            throw ValidationError("Adam: parameter '" + name + "' does not require grad");
        slots_.push_back(Slot{name, std::move(p),
                              std::vector<T>(static_cast<size_t>(0)),
                              std::vector<T>(static_cast<size_t>(0))});
        slots_.back().m.assign(static_cast<size_t>(slots_.back().param.numel()), T(0));
        slots_.back().v.assign(static_cast<size_t>(slots_.back().param.numel()), T(0));
    }

    size_t param_count() const { return slots_.size(); }

    const std::vector<std::string> param_names() const {
        std::vector<std::string> names;
        names.reserve(slots_.size());
        for (const auto& s : slots_) names.push_back(s.name);
        return names;
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& s : slots_) {
            auto vals = s.param.values();
            auto grads = s.param.grad();
            for (size_t i = 0; i < vals.size(); ++i) {
                T g = grads[i];
                if (std::isnan(static_cast<double>(g)))
                    throw TrainingError("NaN gradient in parameter '" + s.name + "'");
                s.m[i] = static_cast<T>(cfg_.beta1) * s.m[i] + static_cast<T>(1.0 - cfg_.beta1) * g;
                s.v[i] = static_cast<T>(cfg_.beta2) * s.v[i] + static_cast<T>(1.0 - cfg_.beta2) * g * g;
                double mhat = static_cast<double>(s.m[i]) / bc1;
                double vhat = static_cast<double>(s.v[i]) / bc2;
                vals[i] -= static_cast<T>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    int64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    struct Slot {
        std::string name;
        Tensor<T> param;
        std::vector<T> m, v;
    };
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

}  // namespace robumtl
