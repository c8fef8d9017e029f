#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "robumtl/rng.hpp"
#include "robumtl/tensor.hpp"

namespace robumtl::testing {

// Central finite-difference oracle for reverse-mode gradients, run in
// 64-bit. `forward` must be a pure function of the leaf values and return a
// scalar loss tensor recorded on `tape`.
struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int64_t checked = 0;
};

inline GradCheckResult grad_check(Tape<double>& tape, std::vector<Tensor<double>> leaves,
                                  const std::function<Tensor<double>()>& forward,
                                  double eps = 1e-5) {
    tape.clear();
    for (auto& l : leaves) l.zero_grad();
    Tensor<double> loss = forward();
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& l : leaves)
        analytic.emplace_back(l.grad().begin(), l.grad().end());
    tape.clear();

    GradCheckResult res;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        auto vals = leaf.values();
        for (size_t i = 0; i < vals.size(); ++i) {
            double orig = vals[i];
            vals[i] = orig + eps;
            double fp = forward().scalar();
            tape.clear();
            vals[i] = orig - eps;
            double fm = forward().scalar();
            tape.clear();
            vals[i] = orig;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[li][i];
            double abs_err = std::abs(a - numeric);
            double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            res.max_rel_err = std::max(res.max_rel_err, abs_err / denom);
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
            ++res.checked;
        }
    }
    return res;
}

inline std::vector<double> random_values(Pcg32& rng, int64_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Values bounded away from zero, for kinked ops (relu, maxpool).
inline std::vector<double> random_values_away_from(Pcg32& rng, int64_t n, double margin = 1e-2) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) {
        double r = rng.uniform(margin, 1.0);
        x = rng.next_double() < 0.5 ? -r : r;
    }
    return v;
}

}  // namespace robumtl::testing
