#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "robumtl/perturb.hpp"
#include "robumtl/rng.hpp"

using namespace robumtl;

namespace {

ImageData mid_gray(int64_t h = 64, int64_t w = 64, float v = 0.5f) {
    ImageData img;
    img.c = 3;
    img.h = h;
    img.w = w;
    img.data.assign(static_cast<size_t>(3 * h * w), v);
    return img;
}

ImageData checkerboard(int64_t h = 32, int64_t w = 32) {
    ImageData img;
    img.c = 1;
    img.h = h;
    img.w = w;
    img.data.resize(static_cast<size_t>(h * w));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            img.data[static_cast<size_t>(y * w + x)] = ((x + y) % 2 == 0) ? 1.0f : 0.0f;
    return img;
}

double total_variation(const ImageData& img) {
    double tv = 0.0;
    for (int64_t c = 0; c < img.c; ++c) {
        const float* p = img.data.data() + c * img.h * img.w;
        for (int64_t y = 0; y < img.h; ++y)
            for (int64_t x = 0; x < img.w; ++x) {
                if (x + 1 < img.w) tv += std::abs(p[y * img.w + x + 1] - p[y * img.w + x]);
                if (y + 1 < img.h) tv += std::abs(p[(y + 1) * img.w + x] - p[y * img.w + x]);
            }
    }
    return tv;
}

double mean_pixel(const ImageData& img) {
    double s = 0.0;
    for (float v : img.data) s += v;
    return s / static_cast<double>(img.data.size());
}

double pixel_std(const ImageData& img) {
    double m = mean_pixel(img);
    double s = 0.0;
    for (float v : img.data) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(img.data.size()));
}

bool images_equal(const ImageData& a, const ImageData& b) {
    return a.c == b.c && a.h == b.h && a.w == b.w && a.data == b.data;
}

}  // namespace

TEST_CASE("every generator is the identity at zero severity parameter") {
    ImageData img = mid_gray(16, 16, 0.37f);
    CHECK(images_equal(gaussian_noise(img, 0.0, 1), img));
    CHECK(images_equal(blur(img, {BlurKind::Gaussian, 1, 1.0, 0.0}, 2), img));
    CHECK(images_equal(rain(img, {8, 0.0}, 3), img));
    CHECK(images_equal(snow(img, {2, 0.0, 0.1}, 4), img));
    CHECK(images_equal(fog(img, 0.0, 5), img));
}

TEST_CASE("generators validate their parameters") {
    ImageData img = mid_gray(8, 8);
    CHECK_THROWS_AS(gaussian_noise(img, -0.1, 1), ValidationError);
    CHECK_THROWS_AS(blur(img, {BlurKind::Average, 4, 0.0, 0.0}, 1), ValidationError);
    CHECK_THROWS_AS(blur(img, {BlurKind::Motion, 5, 0.0, 180.0}, 1), ValidationError);
    CHECK_THROWS_AS(rain(img, {8, 1.5}, 1), ValidationError);
    CHECK_THROWS_AS(snow(img, {2, -0.1, 0.0}, 1), ValidationError);
    CHECK_THROWS_AS(fog(img, 1.1, 1), ValidationError);
}

TEST_CASE("generators are deterministic per seed") {
    ImageData img = mid_gray();
    CHECK(images_equal(gaussian_noise(img, 0.1, 42), gaussian_noise(img, 0.1, 42)));
    CHECK(images_equal(rain(img, {8, 0.4}, 42), rain(img, {8, 0.4}, 42)));
    CHECK(images_equal(snow(img, {2, 0.4, 0.1}, 42), snow(img, {2, 0.4, 0.1}, 42)));
    CHECK(images_equal(fog(img, 0.5, 42), fog(img, 0.5, 42)));
    CHECK(!images_equal(gaussian_noise(img, 0.1, 42), gaussian_noise(img, 0.1, 43)));
}

TEST_CASE("noise sigma recovered by sample statistics") {
    ImageData img = mid_gray(64, 64, 0.5f);
    ImageData noisy = gaussian_noise(img, 0.1, 7);
    double s = 0.0;
    for (size_t i = 0; i < noisy.data.size(); ++i) {
        double d = noisy.data[i] - 0.5;
        s += d * d;
    }
    double std_est = std::sqrt(s / static_cast<double>(noisy.data.size()));
    CHECK(std_est > 0.095);
    CHECK(std_est < 0.105);
}

TEST_CASE("blur leaves constant images unchanged and reduces checkerboard TV") {
    ImageData img = mid_gray(16, 16, 0.42f);
    for (auto kind : {BlurKind::Gaussian, BlurKind::Average, BlurKind::Motion}) {
        BlurParams p{kind, 5, 1.4, 45.0};
        ImageData out = blur(img, p, 1);
        for (size_t i = 0; i < out.data.size(); ++i)
            CHECK(out.data[i] == doctest::Approx(img.data[i]).epsilon(1e-6));
    }

    ImageData cb = checkerboard();
    double tv0 = total_variation(cb);
    for (auto kind : {BlurKind::Gaussian, BlurKind::Average, BlurKind::Motion}) {
        BlurParams p{kind, 3, 1.0, 30.0};
        CHECK(total_variation(blur(cb, p, 1)) < tv0);
    }
}

TEST_CASE("snow never darkens and rain coverage tracks density") {
    ImageData img = mid_gray(64, 64, 0.4f);
    ImageData snowy = snow(img, {2, 0.3, 0.1}, 11);
    CHECK(mean_pixel(snowy) >= mean_pixel(img));

    // fraction of touched pixels ~ density * drops_at_full_density * len / (H*W)
    double density = 0.2;
    int len = 8;
    ImageData rainy = rain(img, {len, density}, 13);
    int64_t hw = img.h * img.w;
    int64_t touched = 0;
    for (int64_t i = 0; i < hw; ++i)
        if (std::abs(rainy.data[static_cast<size_t>(i)] - img.data[static_cast<size_t>(i)]) > 1e-6f)
            ++touched;
    double frac = static_cast<double>(touched) / static_cast<double>(hw);
    double expected = density * (64.0 * 64.0 / 32.0) * len / (64.0 * 64.0);
    CHECK(frac > expected * 0.8);
    CHECK(frac < expected * 1.2);
}

TEST_CASE("fog brightens monotonically and lowers contrast") {
    ImageSample s = synth_sample(99, "tex");
    double prev_mean = mean_pixel(s.pixels);
    for (double intensity : {0.2, 0.4, 0.6, 0.8}) {
        ImageData fogged = fog(s.pixels, intensity, 5);
        double m = mean_pixel(fogged);
        CHECK(m >= prev_mean);
        prev_mean = m;
    }
    CHECK(pixel_std(fog(s.pixels, 0.8, 5)) < pixel_std(fog(s.pixels, 0.2, 5)));
}

TEST_CASE("severity tables are monotone in their distortion statistic") {
    for (int level = 1; level < 3; ++level) {
        const auto& lo = severity_params(level);
        const auto& hi = severity_params(level + 1);
        CHECK(hi.noise_sigma >= lo.noise_sigma);
        CHECK(hi.blur_ksize >= lo.blur_ksize);
        CHECK(hi.rain.density >= lo.rain.density);
        CHECK(hi.snow.density >= lo.snow.density);
        CHECK(hi.fog_intensity >= lo.fog_intensity);
    }
    CHECK_THROWS_AS(severity_params(0), ValidationError);
    CHECK_THROWS_AS(severity_params(4), ValidationError);
}

TEST_CASE("synthetic samples have consistent labels") {
    auto samples = synth_base(123, 8);
    REQUIRE(samples.size() == 8);
    for (const auto& s : samples) {
        for (int v : s.labels.seg) {
            CHECK(v >= 0);
            CHECK(v <= 4);
        }
        for (size_t i = 0; i < s.labels.seg.size(); ++i)
            CHECK(s.labels.saliency[i] == (s.labels.seg[i] != 0 ? 1.0f : 0.0f));
        int64_t hw = s.labels.h * s.labels.w;
        int nonzero = 0;
        for (int64_t i = 0; i < hw; ++i) {
            float nx = s.labels.normals[static_cast<size_t>(i)];
            float ny = s.labels.normals[static_cast<size_t>(hw + i)];
            if (nx != 0.0f || ny != 0.0f) {
                ++nonzero;
                CHECK(std::abs(std::sqrt(nx * nx + ny * ny) - 1.0f) < 1e-5f);
            }
        }
        CHECK(nonzero > 0);
        for (float v : s.pixels.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    CHECK_THROWS_AS(synth_base(1, 0), ValidationError);
}

TEST_CASE("split assignment is exact and deterministic") {
    std::vector<std::string> ids;
    for (int i = 0; i < 600; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%06d", i);
        ids.push_back(buf);
    }
    auto splits = assign_splits(ids);
    int train = 0, val = 0, test = 0;
    for (auto s : splits) {
        if (s == Split::Train) ++train;
        if (s == Split::Val) ++val;
        if (s == Split::Test) ++test;
    }
    CHECK(train == 420);
    CHECK(val == 90);
    CHECK(test == 90);
    CHECK(assign_splits(ids) == splits);
}

TEST_CASE("corpus build: layout, counts, label sharing, determinism") {
    namespace fs = std::filesystem;
    fs::path root = fs::temp_directory_path() / "robumtl_test_corpus";
    fs::remove_all(root);

    SUBCASE("clean-only corpus has a single variant directory") {
        auto index = build_corpus(root, {PerturbationKind::Clean}, 2, 10, 5);
        CHECK(fs::exists(root / "clean"));
        CHECK(!fs::exists(root / "noise"));
        CHECK(index.entries.size() == 10);
        fs::remove_all(root);
    }

    SUBCASE("full corpus shares labels byte-for-byte and counts match") {
        int count = 20;
        auto index = build_corpus(root, all_kinds(), 2, count, 5);
        int files = 0;
        for (auto k : all_kinds())
            for (auto s : {Split::Train, Split::Val, Split::Test}) {
                fs::path dir = root / kind_name(k) / split_name(s);
                if (!fs::exists(dir)) continue;
                for (const auto& e : fs::directory_iterator(dir))
                    if (e.path().extension() == ".img") ++files;
            }
        CHECK(files == 6 * count);

        for (const auto& e : index.entries) {
            fs::path clean_lbl = root / "clean" / split_name(e.split) / (e.id + ".lbl");
            for (auto k : {PerturbationKind::Noise, PerturbationKind::Fog}) {
                fs::path lbl = root / kind_name(k) / split_name(e.split) / (e.id + ".lbl");
                CHECK(file_fnv1a(lbl) == file_fnv1a(clean_lbl));
            }
        }

        auto loaded = load_corpus_index(root);
        CHECK(loaded.count == count);
        CHECK(loaded.entries.size() == index.entries.size());
        CHECK(loaded.kinds.size() == 6);

        auto sample = load_sample(loaded, PerturbationKind::Noise, loaded.entries[0]);
        CHECK(sample.pixels.c == 3);
        CHECK(sample.pixels.h == 64);
        CHECK(sample.labels.seg.size() == 64 * 64);
        fs::remove_all(root);
    }

    SUBCASE("same-seed rebuilds are byte-identical") {
        fs::path root_a = fs::temp_directory_path() / "robumtl_corpus_a";
        fs::path root_b = fs::temp_directory_path() / "robumtl_corpus_b";
        fs::remove_all(root_a);
        fs::remove_all(root_b);
        build_corpus(root_a, {PerturbationKind::Clean, PerturbationKind::Rain}, 2, 6, 77);
        build_corpus(root_b, {PerturbationKind::Clean, PerturbationKind::Rain}, 2, 6, 77);
        for (auto& e : fs::recursive_directory_iterator(root_a)) {
            if (!e.is_regular_file()) continue;
            fs::path rel = fs::relative(e.path(), root_a);
            CHECK(file_fnv1a(e.path()) == file_fnv1a(root_b / rel));
        }
        fs::remove_all(root_a);
        fs::remove_all(root_b);
    }
}
