#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "robumtl/serialize.hpp"

namespace robumtl {

// Class index order is fixed and persisted: C, S, R, F, N, B.
enum class PerturbationKind : uint8_t { Clean = 0, Snow = 1, Rain = 2, Fog = 3, Noise = 4, Blur = 5 };
inline constexpr int kNumKinds = 6;

const char* kind_name(PerturbationKind k);
PerturbationKind kind_from_name(const std::string& name);
std::vector<PerturbationKind> all_kinds();

struct TaskLabels {
    int64_t h = 0, w = 0;
    std::vector<int> seg;         // h*w, class ids 0..4 (0 = background)
    std::vector<float> saliency;  // h*w, 0/1
    std::vector<float> normals;   // 2*h*w planar (nx, ny), unit where nonzero
};

struct ImageSample {
    ImageData pixels;  // 3 x h x w in [0,1]
    TaskLabels labels;
    PerturbationKind kind = PerturbationKind::Clean;
    std::string id;
};

// ---- generators (pure functions of image, params, seed) ----

ImageData gaussian_noise(const ImageData& img, double sigma, uint64_t seed);

enum class BlurKind { Gaussian, Average, Motion };

struct BlurParams {
    BlurKind kind = BlurKind::Gaussian;
    int ksize = 5;           // odd, >= 1
    double sigma = 1.0;      // gaussian only
    double angle_deg = 0.0;  // motion only, [0, 180)
};

ImageData blur(const ImageData& img, const BlurParams& params, uint64_t seed);

struct RainParams {
    int drop_size = 8;      // streak length in pixels
    double density = 0.3;   // [0,1]; drops = density * (H*W)/32
};

ImageData rain(const ImageData& img, const RainParams& params, uint64_t seed);

struct SnowParams {
    int flake_radius = 2;
    double density = 0.3;          // [0,1]; flakes = density * (H*W)/64
    double brightness_lift = 0.1;  // global additive lift, applied when density > 0
};

ImageData snow(const ImageData& img, const SnowParams& params, uint64_t seed);

ImageData fog(const ImageData& img, double intensity, uint64_t seed);

// ---- severity tables (implementer calibration; monotone per kind) ----

struct SeverityParams {
    double noise_sigma;
    int blur_ksize;
    double blur_sigma;
    int motion_len;
    RainParams rain;
    SnowParams snow;
    double fog_intensity;
};

const SeverityParams& severity_params(int level);  // level 1..3

ImageData apply_perturbation(const ImageData& img, PerturbationKind kind, int severity,
                             uint64_t seed);

// ---- synthetic base data ----

ImageSample synth_sample(uint64_t seed, const std::string& id);
std::vector<ImageSample> synth_base(uint64_t seed, int count);

// ---- corpus on disk ----

enum class Split { Train = 0, Val = 1, Test = 2 };
const char* split_name(Split s);

// Split by deterministic hash rank of the sample id: exact 70/15/15.
std::vector<Split> assign_splits(const std::vector<std::string>& ids);

struct CorpusEntry {
    std::string id;
    Split split;
};

struct CorpusIndex {
    std::filesystem::path root;
    std::vector<PerturbationKind> kinds;
    int severity = 2;
    uint64_t seed = 0;
    int count = 0;
    std::vector<CorpusEntry> entries;

    std::vector<const CorpusEntry*> split_entries(Split s) const;
};

CorpusIndex build_corpus(const std::filesystem::path& root, const std::vector<PerturbationKind>& kinds,
                         int severity, int count, uint64_t seed);
CorpusIndex load_corpus_index(const std::filesystem::path& root);

ImageSample load_sample(const CorpusIndex& index, PerturbationKind kind, const CorpusEntry& entry);

void write_labels_file(const std::filesystem::path& path, const TaskLabels& labels);
TaskLabels read_labels_file(const std::filesystem::path& path);

}  // namespace robumtl
