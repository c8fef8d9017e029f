#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "robumtl/metrics.hpp"
#include "robumtl/rng.hpp"

using namespace robumtl;

TEST_CASE("miou basics and the 2x2 pixel enumeration case") {
    std::vector<int> a = {0, 1, 2, 1};
    CHECK(miou(a, a, 3) == doctest::Approx(1.0));

    // fully disjoint single-class masks
    std::vector<int> p = {1, 1, 1, 1};
    std::vector<int> t = {0, 0, 0, 0};
    CHECK(miou(p, t, 2) == doctest::Approx(0.0));

    // pred=[0,1;1,1], true=[0,1;0,1]: IoU0=1/2, IoU1=2/3 -> 7/12
    std::vector<int> pred = {0, 1, 1, 1};
    std::vector<int> truth = {0, 1, 0, 1};
    CHECK(miou(pred, truth, 2) == doctest::Approx(7.0 / 12.0));

    CHECK_THROWS_AS(miou(pred, {0, 1}, 2), ValidationError);
    CHECK_THROWS_AS(miou({0, 5}, {0, 1}, 2), ValidationError);
}

TEST_CASE("miou averages only over classes present in ground truth") {
    // class 2 never appears in truth; a spurious prediction of it hurts the
    // predicted classes' IoU but adds no class term
    std::vector<int> pred = {0, 2, 1, 1};
    std::vector<int> truth = {0, 0, 1, 1};
    // IoU0 = 1/2, IoU1 = 1 -> 3/4
    CHECK(miou(pred, truth, 3) == doctest::Approx(0.75));
}

TEST_CASE("rmse over labeled pixels") {
    // identical fields
    std::vector<float> t = {1, 2, 0, 3, 1, 0};  // 1 channel, labels at 0,1,3,4
    CHECK(rmse(t, t, 1, 6) == doctest::Approx(0.0));

    // constant offset on every labeled pixel
    std::vector<float> p = {1.5f, 2.5f, 0.5f, 3.5f, 1.5f, 0.7f};
    CHECK(rmse(p, t, 1, 6) == doctest::Approx(0.5));

    // random 3x3, 2 channels vs a brute-force scalar loop
    Pcg32 rng(3);
    int64_t hw = 9;
    std::vector<float> truth(18), pred(18);
    for (auto& v : truth) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : pred) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    truth[2] = truth[2 + 9] = 0.0f;  // one unlabeled pixel
    double acc = 0.0;
    int64_t n = 0;
    for (int64_t i = 0; i < hw; ++i) {
        if (truth[static_cast<size_t>(i)] == 0.0f && truth[static_cast<size_t>(i + 9)] == 0.0f) continue;
        for (int64_t c = 0; c < 2; ++c) {
            double d = static_cast<double>(pred[static_cast<size_t>(c * 9 + i)]) -
                       static_cast<double>(truth[static_cast<size_t>(c * 9 + i)]);
            acc += d * d;
            ++n;
        }
    }
    CHECK(rmse(pred, truth, 2, 9) == doctest::Approx(std::sqrt(acc / static_cast<double>(n))).epsilon(1e-9));

    std::vector<float> zeros(6, 0.0f);
    CHECK_THROWS_AS(rmse(p, zeros, 1, 6), ValidationError);
}

TEST_CASE("delta_m is zero at the baseline and exactly linear") {
    std::vector<double> base = {50.0, 20.0, 70.0};
    std::vector<int> lower = {0, 1, 0};
    CHECK(delta_m(base, base, lower) == doctest::Approx(0.0));

    // linear in each M_i
    std::vector<double> m1 = {55.0, 20.0, 70.0};
    std::vector<double> m2 = {60.0, 20.0, 70.0};
    double d1 = delta_m(m1, base, lower);
    double d2 = delta_m(m2, base, lower);
    CHECK(d2 == doctest::Approx(2.0 * d1));

    CHECK_THROWS_AS(delta_m({1.0}, {0.0}, {0}), ValidationError);
    CHECK_THROWS_AS(delta_m({1.0, 2.0}, {1.0}, {0}), ValidationError);
}

TEST_CASE("delta_m reproduces the published comparison rows") {
    // four tasks: mIoU up, RMSE down, mIoU up, mIoU up
    std::vector<double> baseline = {61.61, 18.97, 61.97, 53.78};
    std::vector<int> lower = {0, 1, 0, 0};

    double robumtl = delta_m({63.11, 18.52, 62.75, 53.81}, baseline, lower);
    CHECK(robumtl == doctest::Approx(1.53).epsilon(0.02));
    CHECK(robumtl == doctest::Approx(1.530323).epsilon(1e-5));  // frozen hand computation

    double full_ft = delta_m({58.56, 19.35, 61.40, 52.33}, baseline, lower);
    CHECK(std::abs(full_ft - (-2.60)) < 0.1);
    CHECK(full_ft == doctest::Approx(-2.642407).epsilon(1e-5));  // frozen hand computation

    // decoders-only row: the arithmetic gives -13.654, frozen via the same
    // independent hand computation
    double decoders = delta_m({53.17, 21.96, 54.70, 46.56}, baseline, lower);
    CHECK(decoders == doctest::Approx(-13.654337).epsilon(1e-5));
}

TEST_CASE("classifier metrics from confusion matrices") {
    // diagonal matrix: everything perfect
    std::vector<std::vector<int64_t>> diag = {{5, 0, 0}, {0, 3, 0}, {0, 0, 7}};
    auto m = classifier_metrics(diag);
    CHECK(m.accuracy == doctest::Approx(1.0));
    CHECK(m.precision == doctest::Approx(1.0));
    CHECK(m.recall == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(1.0));

    // uniform 6x6 matrix: accuracy 1/6
    std::vector<std::vector<int64_t>> uniform(6, std::vector<int64_t>(6, 4));
    auto mu = classifier_metrics(uniform);
    CHECK(mu.accuracy == doctest::Approx(1.0 / 6.0));

    // hand 3-class case vs per-class oracle
    std::vector<std::vector<int64_t>> cm = {{8, 1, 1}, {2, 6, 2}, {0, 3, 7}};
    auto mh = classifier_metrics(cm);
    double acc = (8.0 + 6.0 + 7.0) / 30.0;
    double p0 = 8.0 / 10.0, p1 = 6.0 / 10.0, p2 = 7.0 / 10.0;
    double r0 = 8.0 / 10.0, r1 = 6.0 / 10.0, r2 = 7.0 / 10.0;
    auto f1 = [](double p, double r) { return 2 * p * r / (p + r); };
    CHECK(mh.accuracy == doctest::Approx(acc));
    CHECK(mh.precision == doctest::Approx((p0 + p1 + p2) / 3.0));
    CHECK(mh.recall == doctest::Approx((r0 + r1 + r2) / 3.0));
    CHECK(mh.f1 == doctest::Approx((f1(p0, r0) + f1(p1, r1) + f1(p2, r2)) / 3.0));

    CHECK_THROWS_AS(classifier_metrics({{0, 0}, {0, 0}}), ValidationError);
    CHECK_THROWS_AS(classifier_metrics({{1, 2}, {1}}), ValidationError);
    CHECK_THROWS_AS(classifier_metrics({}), ValidationError);
}

TEST_CASE("fps formula") {
    CHECK(fps(10, 4, 2.0) == doctest::Approx(20.0));
    CHECK(fps(7, 1, 7.0) == doctest::Approx(1.0));
    CHECK(fps(10, 4, 1.0) == doctest::Approx(2.0 * fps(10, 4, 2.0)));
    CHECK_THROWS_AS(fps(10, 4, 0.0), ValidationError);
    CHECK_THROWS_AS(fps(10, 4, -1.0), ValidationError);
}

TEST_CASE("report finalization and deterministic serialization") {
    namespace fs = std::filesystem;
    EvalReport report;
    report.tasks = {{"semseg", "miou", 0.62, false},
                    {"saliency", "miou", 0.70, false},
                    {"normals", "rmse", 0.31, true}};
    report.baseline = {{"semseg", "miou", 0.60, false},
                       {"saliency", "miou", 0.72, false},
                       {"normals", "rmse", 0.35, true}};
    report.router_confusion.assign(2, std::vector<int64_t>(2, 1));
    finalize_report(report);

    double expected = 100.0 / 3.0 *
                      ((0.62 - 0.60) / 0.60 + (0.70 - 0.72) / 0.72 - (0.31 - 0.35) / 0.35);
    CHECK(report.delta_m_adv == doctest::Approx(expected));

    fs::path a = fs::temp_directory_path() / "robumtl_report_a.csv";
    fs::path b = fs::temp_directory_path() / "robumtl_report_b.csv";
    write_report_csv(a, report);
    write_report_csv(b, report);
    std::ifstream fa(a), fb(b);
    std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(ca == cb);
    CHECK(ca.find("delta,delta_m_adv,percent,") != std::string::npos);
    CHECK(ca.find("task,semseg,miou,0.620000") != std::string::npos);

    std::string summary = report_summary(report);
    CHECK(summary.find("delta_m_adv") != std::string::npos);

    // delta rows require a baseline for every task
    EvalReport partial;
    partial.tasks = report.tasks;
    partial.baseline = {{"semseg", "miou", 0.6, false}};
    CHECK_THROWS_AS(finalize_report(partial), ValidationError);

    fs::remove(a);
    fs::remove(b);
}
