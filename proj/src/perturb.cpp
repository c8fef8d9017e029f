#include "robumtl/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "robumtl/rng.hpp"

namespace robumtl {

namespace {

constexpr double kPi = 3.14159265358979323846;

inline float clipf(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

inline int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

// Separate normalized 2-D kernel convolution with reflective padding.
ImageData convolve(const ImageData& img, const std::vector<float>& kernel, int k) {
    ImageData out;
    out.c = img.c;
    out.h = img.h;
    out.w = img.w;
    out.data.resize(img.data.size());
    int h = static_cast<int>(img.h), w = static_cast<int>(img.w);
    int r = k / 2;
    for (int64_t ch = 0; ch < img.c; ++ch) {
        const float* src = img.data.data() + ch * h * w;
        float* dst = out.data.data() + ch * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float acc = 0.0f;
                for (int ky = 0; ky < k; ++ky) {
                    int iy = reflect_index(y + ky - r, h);
                    for (int kx = 0; kx < k; ++kx) {
                        int ix = reflect_index(x + kx - r, w);
                        acc += kernel[static_cast<size_t>(ky * k + kx)] * src[iy * w + ix];
                    }
                }
                dst[y * w + x] = clipf(acc);
            }
    }
    return out;
}

// Low-frequency value noise in [lo, hi]: seeded lattice, bilinear interpolation.
std::vector<float> value_noise(int h, int w, int lattice, float lo, float hi, Pcg32& rng) {
    int g = lattice + 1;
    std::vector<float> grid(static_cast<size_t>(g * g));
    for (auto& v : grid) v = lo + (hi - lo) * static_cast<float>(rng.next_double());
    std::vector<float> out(static_cast<size_t>(h * w));
    for (int y = 0; y < h; ++y) {
        float fy = static_cast<float>(y) / static_cast<float>(h) * lattice;
        int y0 = static_cast<int>(fy);
        float ty = fy - y0;
        for (int x = 0; x < w; ++x) {
            float fx = static_cast<float>(x) / static_cast<float>(w) * lattice;
            int x0 = static_cast<int>(fx);
            float tx = fx - x0;
            float a = grid[static_cast<size_t>(y0 * g + x0)];
            float b = grid[static_cast<size_t>(y0 * g + x0 + 1)];
            float c = grid[static_cast<size_t>((y0 + 1) * g + x0)];
            float d = grid[static_cast<size_t>((y0 + 1) * g + x0 + 1)];
            out[static_cast<size_t>(y * w + x)] =
                (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
        }
    }
    return out;
}

void blend_pixel(ImageData& img, int y, int x, float alpha, float cr, float cg, float cb) {
    int64_t hw = img.h * img.w;
    int64_t idx = static_cast<int64_t>(y) * img.w + x;
    float* p = img.data.data();
    p[idx] = clipf((1.0f - alpha) * p[idx] + alpha * cr);
    if (img.c > 1) p[hw + idx] = clipf((1.0f - alpha) * p[hw + idx] + alpha * cg);
    if (img.c > 2) p[2 * hw + idx] = clipf((1.0f - alpha) * p[2 * hw + idx] + alpha * cb);
}

}  // namespace

const char* kind_name(PerturbationKind k) {
    switch (k) {
        case PerturbationKind::Clean: return "clean";
        case PerturbationKind::Snow: return "snow";
        case PerturbationKind::Rain: return "rain";
        case PerturbationKind::Fog: return "fog";
        case PerturbationKind::Noise: return "noise";
        case PerturbationKind::Blur: return "blur";
    }
    return "?";
}

PerturbationKind kind_from_name(const std::string& name) {
    for (auto k : all_kinds())
        if (name == kind_name(k)) return k;
    throw ValidationError("unknown perturbation kind '" + name + "'");
}

std::vector<PerturbationKind> all_kinds() {
    return {PerturbationKind::Clean, PerturbationKind::Snow, PerturbationKind::Rain,
            PerturbationKind::Fog,   PerturbationKind::Noise, PerturbationKind::Blur};
}

ImageData gaussian_noise(const ImageData& img, double sigma, uint64_t seed) {
    if (sigma < 0.0) throw ValidationError("gaussian_noise: sigma must be >= 0");
    if (sigma == 0.0) return img;
    Pcg32 rng(seed);
    ImageData out = img;
    for (auto& v : out.data) v = clipf(v + static_cast<float>(rng.normal(0.0, sigma)));
    return out;
}

ImageData blur(const ImageData& img, const BlurParams& params, uint64_t seed) {
    (void)seed;  // kernels are parameter-determined
    if (params.ksize < 1 || params.ksize % 2 == 0)
        throw ValidationError("blur: kernel size must be odd and >= 1, got " +
                              std::to_string(params.ksize));
    if (params.kind == BlurKind::Motion && (params.angle_deg < 0.0 || params.angle_deg >= 180.0))
        throw ValidationError("blur: motion angle must be in [0, 180)");
    if (params.ksize == 1) return img;

    int k = params.ksize;
    std::vector<float> kernel(static_cast<size_t>(k * k), 0.0f);
    switch (params.kind) {
        case BlurKind::Average: {
            float v = 1.0f / static_cast<float>(k * k);
            std::fill(kernel.begin(), kernel.end(), v);
            break;
        }
        case BlurKind::Gaussian: {
            double s = params.sigma > 0 ? params.sigma : 0.3 * ((k - 1) * 0.5 - 1) + 0.8;
            int r = k / 2;
            double sum = 0.0;
            for (int y = 0; y < k; ++y)
                for (int x = 0; x < k; ++x) {
                    double dy = y - r, dx = x - r;
                    double e = std::exp(-(dx * dx + dy * dy) / (2.0 * s * s));
                    kernel[static_cast<size_t>(y * k + x)] = static_cast<float>(e);
                    sum += e;
                }
            for (auto& v : kernel) v = static_cast<float>(v / sum);
            break;
        }
        case BlurKind::Motion: {
            double theta = params.angle_deg * kPi / 180.0;
            double cx = (k - 1) / 2.0, cy = (k - 1) / 2.0;
            int hits = 0;
            for (int i = 0; i < k; ++i) {
                double t = i - (k - 1) / 2.0;
                int x = static_cast<int>(std::lround(cx + t * std::cos(theta)));
                int y = static_cast<int>(std::lround(cy + t * std::sin(theta)));
                if (x >= 0 && x < k && y >= 0 && y < k) {
                    kernel[static_cast<size_t>(y * k + x)] += 1.0f;
                    ++hits;
                }
            }
            for (auto& v : kernel) v /= static_cast<float>(hits);
            break;
        }
    }
    return convolve(img, kernel, k);
}

ImageData rain(const ImageData& img, const RainParams& params, uint64_t seed) {
    if (params.density < 0.0 || params.density > 1.0)
        throw ValidationError("rain: density must be in [0,1]");
    if (params.density == 0.0) return img;
    Pcg32 rng(seed);
    ImageData out = img;
    int h = static_cast<int>(img.h), w = static_cast<int>(img.w);
    int len = std::max(2, params.drop_size);
    int max_drops = std::max(1, h * w / 32);
    int n_drops = static_cast<int>(std::lround(params.density * max_drops));
    for (int d = 0; d < n_drops; ++d) {
        // slant 60..80 degrees from horizontal, mostly vertical streaks
        double theta = rng.uniform(60.0, 80.0) * kPi / 180.0;
        double cot = std::cos(theta) / std::sin(theta);
        int span_x = static_cast<int>(std::ceil(len * cot)) + 1;
        if (h - len <= 0 || w - span_x <= 0) continue;
        int y0 = static_cast<int>(rng.next_below(static_cast<uint32_t>(h - len)));
        int x0 = static_cast<int>(rng.next_below(static_cast<uint32_t>(w - span_x)));
        for (int i = 0; i < len; ++i) {
            int y = y0 + i;
            int x = x0 + static_cast<int>(std::lround(i * cot));
            blend_pixel(out, y, x, 0.65f, 0.9f, 0.9f, 0.95f);
        }
    }
    return out;
}

ImageData snow(const ImageData& img, const SnowParams& params, uint64_t seed) {
    if (params.density < 0.0 || params.density > 1.0)
        throw ValidationError("snow: density must be in [0,1]");
    if (params.density == 0.0) return img;
    Pcg32 rng(seed);
    ImageData out = img;
    int h = static_cast<int>(img.h), w = static_cast<int>(img.w);
    int r = std::max(1, params.flake_radius);
    int max_flakes = std::max(1, h * w / 64);
    int n_flakes = static_cast<int>(std::lround(params.density * max_flakes));
    for (int d = 0; d < n_flakes; ++d) {
        int cy = static_cast<int>(rng.next_below(static_cast<uint32_t>(h)));
        int cx = static_cast<int>(rng.next_below(static_cast<uint32_t>(w)));
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                if (dx * dx + dy * dy > r * r) continue;
                int y = cy + dy, x = cx + dx;
                if (y < 0 || y >= h || x < 0 || x >= w) continue;
                blend_pixel(out, y, x, 0.7f, 1.0f, 1.0f, 1.0f);
            }
    }
    float lift = static_cast<float>(params.brightness_lift);
    if (lift > 0.0f)
        for (auto& v : out.data) v = clipf(v + lift);
    return out;
}

ImageData fog(const ImageData& img, double intensity, uint64_t seed) {
    if (intensity < 0.0 || intensity > 1.0)
        throw ValidationError("fog: intensity must be in [0,1]");
    if (intensity == 0.0) return img;
    Pcg32 rng(seed);
    int h = static_cast<int>(img.h), w = static_cast<int>(img.w);
    std::vector<float> mask = value_noise(h, w, 4, 0.5f, 1.0f, rng);
    ImageData out = img;
    int64_t hw = img.h * img.w;
    for (int64_t ch = 0; ch < img.c; ++ch) {
        float* p = out.data.data() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) {
            float t = static_cast<float>(intensity) * mask[static_cast<size_t>(i)];
            p[i] = clipf(p[i] * (1.0f - t) + t);
        }
    }
    return out;
}

const SeverityParams& severity_params(int level) {
    static const SeverityParams tables[3] = {
        // level 1
        {0.05, 3, 0.8, 5, {6, 0.15}, {2, 0.15, 0.05}, 0.35},
        // level 2
        {0.10, 5, 1.4, 7, {8, 0.30}, {2, 0.30, 0.10}, 0.55},
        // level 3
        {0.25, 9, 3.0, 11, {12, 0.55}, {3, 0.55, 0.18}, 0.85},
    };
    if (level < 1 || level > 3)
        throw ValidationError("severity level must be in 1..3, got " + std::to_string(level));
    return tables[level - 1];
}

ImageData apply_perturbation(const ImageData& img, PerturbationKind kind, int severity,
                             uint64_t seed) {
    const SeverityParams& p = severity_params(severity);
    switch (kind) {
        case PerturbationKind::Clean:
            return img;
        case PerturbationKind::Noise:
            return gaussian_noise(img, p.noise_sigma, seed);
        case PerturbationKind::Blur: {
            // the blur corpus mixes average, motion, and gaussian kernels
            Pcg32 rng(seed);
            uint32_t pick = rng.next_below(3);
            BlurParams bp;
            bp.ksize = p.blur_ksize;
            if (pick == 0) {
                bp.kind = BlurKind::Gaussian;
                bp.sigma = p.blur_sigma;
            } else if (pick == 1) {
                bp.kind = BlurKind::Average;
            } else {
                bp.kind = BlurKind::Motion;
                bp.ksize = p.motion_len;
                bp.angle_deg = rng.uniform(0.0, 180.0);
            }
            return blur(img, bp, rng.next_u64());
        }
        case PerturbationKind::Rain:
            return rain(img, p.rain, seed);
        case PerturbationKind::Snow:
            return snow(img, p.snow, seed);
        case PerturbationKind::Fog:
            return fog(img, p.fog_intensity, seed);
    }
    throw ValidationError("unknown perturbation kind");
}

// ---------------------------------------------------------------------------
// Synthetic scenes: 1..4 colored shapes over a textured background.
// ---------------------------------------------------------------------------

namespace {

struct ShapeSpec {
    int type;  // 1..4: circle, square, triangle, diamond
    int cx, cy, r;
    float color[3];
};

bool inside_shape(const ShapeSpec& s, int x, int y) {
    int dx = x - s.cx, dy = y - s.cy;
    switch (s.type) {
        case 1: return dx * dx + dy * dy <= s.r * s.r;
        case 2: return std::abs(dx) <= s.r && std::abs(dy) <= s.r;
        case 3: {
            // upward isoceles triangle
            if (dy < -s.r || dy > s.r) return false;
            double half = (static_cast<double>(dy) + s.r) / (2.0 * s.r) * s.r;
            return std::abs(dx) <= half;
        }
        case 4: return std::abs(dx) + std::abs(dy) <= s.r;
    }
    return false;
}

}  // namespace

ImageSample synth_sample(uint64_t seed, const std::string& id) {
    constexpr int H = 64, W = 64;
    Pcg32 rng(seed);
    ImageSample sample;
    sample.id = id;
    sample.kind = PerturbationKind::Clean;
    sample.pixels.c = 3;
    sample.pixels.h = H;
    sample.pixels.w = W;
    sample.pixels.data.resize(3 * H * W);
    sample.labels.h = H;
    sample.labels.w = W;
    sample.labels.seg.assign(H * W, 0);
    sample.labels.saliency.assign(H * W, 0.0f);
    sample.labels.normals.assign(2 * H * W, 0.0f);

    // textured background: correlated low-frequency noise per channel
    std::vector<float> base = value_noise(H, W, 8, 0.25f, 0.55f, rng);
    float tint[3] = {static_cast<float>(rng.uniform(-0.06, 0.06)),
                     static_cast<float>(rng.uniform(-0.06, 0.06)),
                     static_cast<float>(rng.uniform(-0.06, 0.06))};
    for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < H * W; ++i)
            sample.pixels.data[static_cast<size_t>(ch * H * W + i)] =
                clipf(base[static_cast<size_t>(i)] + tint[ch]);

    // base colors per shape type, jittered per sample
    const float palette[4][3] = {
        {0.85f, 0.25f, 0.20f},  // circle: red
        {0.20f, 0.65f, 0.90f},  // square: blue
        {0.25f, 0.80f, 0.30f},  // triangle: green
        {0.92f, 0.80f, 0.25f},  // diamond: yellow
    };

    int n_shapes = 1 + static_cast<int>(rng.next_below(4));
    std::vector<ShapeSpec> shapes;
    for (int i = 0; i < n_shapes; ++i) {
        ShapeSpec s;
        s.type = 1 + static_cast<int>(rng.next_below(4));
        s.r = 6 + static_cast<int>(rng.next_below(8));
        s.cx = s.r + static_cast<int>(rng.next_below(static_cast<uint32_t>(W - 2 * s.r)));
        s.cy = s.r + static_cast<int>(rng.next_below(static_cast<uint32_t>(H - 2 * s.r)));
        for (int ch = 0; ch < 3; ++ch)
            s.color[ch] = clipf(palette[s.type - 1][ch] + static_cast<float>(rng.uniform(-0.08, 0.08)));
        shapes.push_back(s);
    }

    // draw in order; later shapes overdraw earlier ones
    for (const auto& s : shapes)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (inside_shape(s, x, y)) {
                    sample.labels.seg[static_cast<size_t>(y * W + x)] = s.type;
                    for (int ch = 0; ch < 3; ++ch)
                        sample.pixels.data[static_cast<size_t>(ch * H * W + y * W + x)] = s.color[ch];
                }

    for (int i = 0; i < H * W; ++i)
        sample.labels.saliency[static_cast<size_t>(i)] =
            sample.labels.seg[static_cast<size_t>(i)] != 0 ? 1.0f : 0.0f;

    // boundary pixels: foreground with a 4-neighbor of different class,
    // or background adjacent to foreground
    std::vector<std::pair<int, int>> boundary;
    auto seg_at = [&](int y, int x) {
        if (y < 0 || y >= H || x < 0 || x >= W) return 0;
        return sample.labels.seg[static_cast<size_t>(y * W + x)];
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int c = seg_at(y, x);
            if (c == 0) continue;
            if (seg_at(y - 1, x) != c || seg_at(y + 1, x) != c || seg_at(y, x - 1) != c ||
                seg_at(y, x + 1) != c)
                boundary.emplace_back(y, x);
        }

    // nearest-boundary outward normal within a band of 3 px
    constexpr int kBand = 3;
    std::vector<float> dist2(H * W, 1e9f);
    std::vector<int> nearest(H * W, -1);
    for (size_t bi = 0; bi < boundary.size(); ++bi) {
        auto [by, bx] = boundary[bi];
        for (int dy = -kBand; dy <= kBand; ++dy)
            for (int dx = -kBand; dx <= kBand; ++dx) {
                int y = by + dy, x = bx + dx;
                if (y < 0 || y >= H || x < 0 || x >= W) continue;
                float d2 = static_cast<float>(dx * dx + dy * dy);
                if (d2 > static_cast<float>(kBand * kBand)) continue;
                size_t idx = static_cast<size_t>(y * W + x);
                if (d2 < dist2[idx]) {
                    dist2[idx] = d2;
                    nearest[idx] = static_cast<int>(bi);
                }
            }
    }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            size_t idx = static_cast<size_t>(y * W + x);
            if (nearest[idx] < 0) continue;
            auto [by, bx] = boundary[static_cast<size_t>(nearest[idx])];
            float nx, ny;
            if (by == y && bx == x) {
                // on the boundary: mean direction toward background neighbors
                float sx = 0, sy = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx)
                        if ((dy || dx) && seg_at(y + dy, x + dx) == 0) {
                            sx += static_cast<float>(dx);
                            sy += static_cast<float>(dy);
                        }
                if (sx == 0 && sy == 0) {
                    sx = 1;
                    sy = 0;
                }
                float n = std::sqrt(sx * sx + sy * sy);
                nx = sx / n;
                ny = sy / n;
            } else {
                float dx = static_cast<float>(x - bx), dy = static_cast<float>(y - by);
                float n = std::sqrt(dx * dx + dy * dy);
                // outward: away from the boundary outside, toward it inside
                float sign = sample.labels.seg[idx] == 0 ? 1.0f : -1.0f;
                nx = sign * dx / n;
                ny = sign * dy / n;
            }
            sample.labels.normals[idx] = nx;
            sample.labels.normals[static_cast<size_t>(H * W) + idx] = ny;
        }
    return sample;
}

std::vector<ImageSample> synth_base(uint64_t seed, int count) {
    if (count <= 0) throw ValidationError("synth_base: count must be > 0");
    std::vector<ImageSample> samples;
    samples.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        char id[16];
        std::snprintf(id, sizeof(id), "%06d", i);
        samples.push_back(synth_sample(derive_seed(seed, "sample", static_cast<uint64_t>(i)), id));
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Corpus persistence
// ---------------------------------------------------------------------------

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

std::vector<Split> assign_splits(const std::vector<std::string>& ids) {
    size_t n = ids.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        uint64_t ha = fnv1a64(ids[a]), hb = fnv1a64(ids[b]);
        if (ha != hb) return ha < hb;
        return ids[a] < ids[b];
    });
    size_t n_train = n * 70 / 100;
    size_t n_val = n * 15 / 100;
    std::vector<Split> out(n);
    for (size_t rank = 0; rank < n; ++rank) {
        Split s = rank < n_train ? Split::Train : (rank < n_train + n_val ? Split::Val : Split::Test);
        out[order[rank]] = s;
    }
    return out;
}

void write_labels_file(const std::filesystem::path& path, const TaskLabels& labels) {
    ImageData packed;
    packed.c = 4;
    packed.h = labels.h;
    packed.w = labels.w;
    int64_t hw = labels.h * labels.w;
    packed.data.resize(static_cast<size_t>(4 * hw));
    for (int64_t i = 0; i < hw; ++i)
        packed.data[static_cast<size_t>(i)] = static_cast<float>(labels.seg[static_cast<size_t>(i)]);
    std::copy(labels.saliency.begin(), labels.saliency.end(), packed.data.begin() + hw);
    std::copy(labels.normals.begin(), labels.normals.end(), packed.data.begin() + 2 * hw);
    write_image_file(path, packed);
}

TaskLabels read_labels_file(const std::filesystem::path& path) {
    ImageData packed = read_image_file(path);
    if (packed.c != 4)
        throw FormatError(path.filename().string() + ": label file must have 4 planes, has " +
                              std::to_string(packed.c),
                          4);
    TaskLabels labels;
    labels.h = packed.h;
    labels.w = packed.w;
    int64_t hw = packed.h * packed.w;
    labels.seg.resize(static_cast<size_t>(hw));
    for (int64_t i = 0; i < hw; ++i)
        labels.seg[static_cast<size_t>(i)] = static_cast<int>(packed.data[static_cast<size_t>(i)]);
    labels.saliency.assign(packed.data.begin() + hw, packed.data.begin() + 2 * hw);
    labels.normals.assign(packed.data.begin() + 2 * hw, packed.data.begin() + 4 * hw);
    return labels;
}

std::vector<const CorpusEntry*> CorpusIndex::split_entries(Split s) const {
    std::vector<const CorpusEntry*> out;
    for (const auto& e : entries)
        if (e.split == s) out.push_back(&e);
    return out;
}

CorpusIndex build_corpus(const std::filesystem::path& root, const std::vector<PerturbationKind>& kinds,
                         int severity, int count, uint64_t seed) {
    if (count <= 0) throw ValidationError("build_corpus: count must be > 0");
    if (kinds.empty()) throw ValidationError("build_corpus: no kinds requested");

    std::vector<ImageSample> base = synth_base(derive_seed(seed, "corpus.base"), count);
    std::vector<std::string> ids;
    ids.reserve(base.size());
    for (const auto& s : base) ids.push_back(s.id);
    std::vector<Split> splits = assign_splits(ids);

    CorpusIndex index;
    index.root = root;
    index.kinds = kinds;
    index.severity = severity;
    index.seed = seed;
    index.count = count;

    std::error_code ec;
    std::filesystem::create_directories(root, ec);

    for (size_t i = 0; i < base.size(); ++i) {
        const ImageSample& clean = base[i];
        Split split = splits[i];
        index.entries.push_back({clean.id, split});
        for (PerturbationKind kind : kinds) {
            std::filesystem::path dir = root / kind_name(kind) / split_name(split);
            uint64_t pseed = derive_seed(seed, std::string("corpus.perturb.") + kind_name(kind),
                                         static_cast<uint64_t>(i));
            ImageData px = apply_perturbation(clean.pixels, kind, severity, pseed);
            write_image_file(dir / (clean.id + ".img"), px);
            write_labels_file(dir / (clean.id + ".lbl"), clean.labels);
        }
    }

    nlohmann::json manifest;
    manifest["count"] = count;
    manifest["severity"] = severity;
    manifest["seed"] = seed;
    std::vector<std::string> kind_names;
    for (auto k : kinds) kind_names.push_back(kind_name(k));
    manifest["kinds"] = kind_names;
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& e : index.entries)
        samples.push_back({{"id", e.id}, {"split", split_name(e.split)}});
    manifest["samples"] = samples;
    std::ofstream out(root / "manifest.json");
    if (!out) throw IoError("cannot write manifest under '" + root.string() + "'");
    out << manifest.dump(2) << "\n";
    return index;
}

CorpusIndex load_corpus_index(const std::filesystem::path& root) {
    std::ifstream in(root / "manifest.json");
    if (!in) throw IoError("cannot open manifest under '" + root.string() + "'");
    nlohmann::json manifest = nlohmann::json::parse(in, nullptr, true);
    CorpusIndex index;
    index.root = root;
    index.count = manifest.at("count").get<int>();
    index.severity = manifest.at("severity").get<int>();
    index.seed = manifest.at("seed").get<uint64_t>();
    for (const auto& k : manifest.at("kinds")) index.kinds.push_back(kind_from_name(k.get<std::string>()));
    for (const auto& s : manifest.at("samples")) {
        std::string split = s.at("split").get<std::string>();
        Split sp = split == "train" ? Split::Train : (split == "val" ? Split::Val : Split::Test);
        index.entries.push_back({s.at("id").get<std::string>(), sp});
    }
    return index;
}

ImageSample load_sample(const CorpusIndex& index, PerturbationKind kind, const CorpusEntry& entry) {
    std::filesystem::path dir = index.root / kind_name(kind) / split_name(entry.split);
    ImageSample sample;
    sample.id = entry.id;
    sample.kind = kind;
    sample.pixels = read_image_file(dir / (entry.id + ".img"));
    sample.labels = read_labels_file(dir / (entry.id + ".lbl"));
    return sample;
}

}  // namespace robumtl
