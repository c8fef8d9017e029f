#include "robumtl/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace robumtl {

double miou(const std::vector<int>& pred, const std::vector<int>& truth, int num_classes) {
    if (pred.size() != truth.size())
        throw ValidationError("miou: prediction and ground truth sizes differ");
    if (pred.empty()) throw ValidationError("miou: empty masks");
    std::vector<int64_t> inter(static_cast<size_t>(num_classes), 0);
    std::vector<int64_t> pred_count(static_cast<size_t>(num_classes), 0);
    std::vector<int64_t> true_count(static_cast<size_t>(num_classes), 0);
    for (size_t i = 0; i < pred.size(); ++i) {
        int p = pred[i], t = truth[i];
        if (p < 0 || p >= num_classes || t < 0 || t >= num_classes)
            throw ValidationError("miou: class id outside [0," + std::to_string(num_classes) + ")");
        ++pred_count[static_cast<size_t>(p)];
        ++true_count[static_cast<size_t>(t)];
        if (p == t) ++inter[static_cast<size_t>(p)];
    }
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        if (true_count[static_cast<size_t>(c)] == 0) continue;  // only classes present in gt
        int64_t uni = pred_count[static_cast<size_t>(c)] + true_count[static_cast<size_t>(c)] -
                      inter[static_cast<size_t>(c)];
        sum += static_cast<double>(inter[static_cast<size_t>(c)]) / static_cast<double>(uni);
        ++present;
    }
    if (present == 0) throw ValidationError("miou: ground truth has no classes");
    return sum / static_cast<double>(present);
}

double rmse(const std::vector<float>& pred, const std::vector<float>& truth, int64_t channels,
            int64_t hw) {
    if (pred.size() != truth.size() || static_cast<int64_t>(pred.size()) != channels * hw)
        throw ValidationError("rmse: field sizes do not match channels*hw");
    double acc = 0.0;
    int64_t valid = 0;
    for (int64_t i = 0; i < hw; ++i) {
        bool labeled = false;
        for (int64_t c = 0; c < channels; ++c)
            if (truth[static_cast<size_t>(c * hw + i)] != 0.0f) {
                labeled = true;
                break;
            }
        if (!labeled) continue;
        for (int64_t c = 0; c < channels; ++c) {
            double d = static_cast<double>(pred[static_cast<size_t>(c * hw + i)]) -
                       static_cast<double>(truth[static_cast<size_t>(c * hw + i)]);
            acc += d * d;
        }
        valid += channels;
    }
    if (valid == 0) throw ValidationError("rmse: no labeled pixels");
    return std::sqrt(acc / static_cast<double>(valid));
}

double delta_m(const std::vector<double>& results, const std::vector<double>& baseline,
               const std::vector<int>& lower_is_better) {
    if (results.size() != baseline.size() || results.size() != lower_is_better.size() ||
        results.empty())
        throw ValidationError("delta_m: task vectors must be nonempty and equally sized");
    double sum = 0.0;
    for (size_t i = 0; i < results.size(); ++i) {
        if (baseline[i] == 0.0)
            throw ValidationError("delta_m: zero baseline for task " + std::to_string(i));
        double rel = (results[i] - baseline[i]) / baseline[i];
        sum += lower_is_better[i] ? -rel : rel;
    }
    return 100.0 * sum / static_cast<double>(results.size());
}

ClassifierMetrics classifier_metrics(const std::vector<std::vector<int64_t>>& confusion) {
    size_t n = confusion.size();
    if (n == 0) throw ValidationError("classifier_metrics: empty matrix");
    int64_t total = 0, correct = 0;
    for (size_t i = 0; i < n; ++i) {
        if (confusion[i].size() != n)
            throw ValidationError("classifier_metrics: matrix must be square");
        for (size_t j = 0; j < n; ++j) {
            if (confusion[i][j] < 0) throw ValidationError("classifier_metrics: negative count");
            total += confusion[i][j];
            if (i == j) correct += confusion[i][j];
        }
    }
    if (total == 0) throw ValidationError("classifier_metrics: all-zero matrix");
    ClassifierMetrics m;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    double psum = 0.0, rsum = 0.0, fsum = 0.0;
    for (size_t c = 0; c < n; ++c) {
        int64_t col = 0, row = 0;
        for (size_t i = 0; i < n; ++i) {
            col += confusion[i][c];
            row += confusion[c][i];
        }
        double precision =
            col > 0 ? static_cast<double>(confusion[c][c]) / static_cast<double>(col) : 0.0;
        double recall =
            row > 0 ? static_cast<double>(confusion[c][c]) / static_cast<double>(row) : 0.0;
        double f1 = (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        psum += precision;
        rsum += recall;
        fsum += f1;
    }
    m.precision = psum / static_cast<double>(n);
    m.recall = rsum / static_cast<double>(n);
    m.f1 = fsum / static_cast<double>(n);
    return m;
}

double fps(int64_t num_batches, int64_t batch_size, double elapsed_seconds) {
    if (elapsed_seconds <= 0.0) throw ValidationError("fps: elapsed time must be positive");
    return static_cast<double>(num_batches * batch_size) / elapsed_seconds;
}

void finalize_report(EvalReport& report) {
    auto compute = [](const std::vector<TaskResult>& results, const std::vector<TaskResult>& base) {
        std::vector<double> m, mst;
        std::vector<int> lower;
        for (size_t i = 0; i < results.size(); ++i) {
            m.push_back(results[i].value);
            mst.push_back(base[i].value);
            lower.push_back(results[i].lower_is_better ? 1 : 0);
        }
        return delta_m(m, mst, lower);
    };
    if (report.tasks.size() != report.baseline.size() || report.tasks.empty())
        throw ValidationError("report needs a baseline row for every task");
    report.delta_m_adv = compute(report.tasks, report.baseline);
    if (!report.tasks_clean.empty()) {
        if (report.tasks_clean.size() != report.baseline_clean.size())
            throw ValidationError("report needs a clean baseline row for every task");
        report.delta_m_clean = compute(report.tasks_clean, report.baseline_clean);
    }
    report.has_delta = true;
}

namespace {
std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}
}  // namespace

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write report to '" + path.string() + "'");
    out << "section,name,metric,value\n";
    for (const auto& t : report.tasks)
        out << "task," << t.task << "," << t.metric << "," << fmt(t.value) << "\n";
    for (const auto& t : report.baseline)
        out << "baseline," << t.task << "," << t.metric << "," << fmt(t.value) << "\n";
    for (const auto& t : report.tasks_clean)
        out << "task_clean," << t.task << "," << t.metric << "," << fmt(t.value) << "\n";
    for (const auto& t : report.baseline_clean)
        out << "baseline_clean," << t.task << "," << t.metric << "," << fmt(t.value) << "\n";
    if (report.has_delta) {
        out << "delta,delta_m_adv,percent," << fmt(report.delta_m_adv) << "\n";
        if (!report.tasks_clean.empty())
            out << "delta,delta_m_clean,percent," << fmt(report.delta_m_clean) << "\n";
    }
    for (size_t i = 0; i < report.router_confusion.size(); ++i)
        for (size_t j = 0; j < report.router_confusion[i].size(); ++j)
            out << "router,confusion_" << i << "_" << j << ",count," << report.router_confusion[i][j]
                << "\n";
}

std::string report_summary(const EvalReport& report) {
    std::ostringstream os;
    os << "=== evaluation report ===\n";
    for (size_t i = 0; i < report.tasks.size(); ++i) {
        const auto& t = report.tasks[i];
        os << t.task << " " << t.metric << ": " << fmt(t.value);
        if (i < report.baseline.size()) os << " (baseline " << fmt(report.baseline[i].value) << ")";
        os << "\n";
    }
    if (report.has_delta) {
        os << "delta_m_adv: " << fmt(report.delta_m_adv) << "%\n";
        if (!report.tasks_clean.empty())
            os << "delta_m_clean: " << fmt(report.delta_m_clean) << "%\n";
    }
    return os.str();
}

}  // namespace robumtl
