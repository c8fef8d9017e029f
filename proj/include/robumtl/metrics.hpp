#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "robumtl/common.hpp"

namespace robumtl {

// Mean IoU over the classes present in the ground truth.
double miou(const std::vector<int>& pred, const std::vector<int>& truth, int num_classes);

// RMSE over valid pixels: those where the true field is nonzero in any
// channel. Fields are planar [channels][h*w].
double rmse(const std::vector<float>& pred, const std::vector<float>& truth, int64_t channels,
            int64_t hw);

// Signed average relative change vs a per-task baseline, in percent.
// lower_is_better flips the sign for metrics where smaller is better.
double delta_m(const std::vector<double>& results, const std::vector<double>& baseline,
               const std::vector<int>& lower_is_better);

struct ClassifierMetrics {
    double accuracy = 0.0;
    double precision = 0.0;  // macro
    double recall = 0.0;     // macro
    double f1 = 0.0;         // macro
};

// confusion[true_class][predicted_class]
ClassifierMetrics classifier_metrics(const std::vector<std::vector<int64_t>>& confusion);

double fps(int64_t num_batches, int64_t batch_size, double elapsed_seconds);

struct TaskResult {
    std::string task;
    std::string metric;  // "miou" or "rmse"
    double value = 0.0;
    bool lower_is_better = false;
};

struct EvalReport {
    std::vector<TaskResult> tasks;           // evaluated model, adverse split
    std::vector<TaskResult> baseline;        // baseline model, adverse split
    std::vector<TaskResult> tasks_clean;     // evaluated model, clean split
    std::vector<TaskResult> baseline_clean;  // baseline model, clean split
    double delta_m_adv = 0.0;
    double delta_m_clean = 0.0;
    bool has_delta = false;
    std::vector<std::vector<int64_t>> router_confusion;  // by true kind x voted kind
};

// Computes both delta rows from the stored task/baseline rows.
void finalize_report(EvalReport& report);

// Deterministic CSV (fixed column order and float formatting).
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);

std::string report_summary(const EvalReport& report);

}  // namespace robumtl
