#include <cmath>

#include "doctest.h"
#include "robumtl/mepf.hpp"
#include "robumtl/rng.hpp"

using namespace robumtl;

namespace {

ScoreVector make_scores(std::array<double, 6> v) {
    ScoreVector s;
    s.s = v;
    return s;
}

// Standalone expert with a single synthetic site carrying a given delta
// as A = delta, B = I is awkward; instead use A = delta (d x d... ). For
// fusion tests we want arbitrary small deltas, so A is (rows x 1) times
// B (1 x cols) won't span arbitrary matrices. Use full-rank A = delta and
// B = identity.
LoraExpert<float> expert_with_delta(PerturbationKind kind, const std::vector<float>& delta,
                                    int64_t rows, int64_t cols) {
    LoraExpert<float> e;
    e.kind = kind;
    e.alpha = 1.0f;
    LoraSite<float> s;
    s.site = "enc.s1.attn.qkv";
    s.a = Tensor<float>::from_values({rows, cols}, delta);
    std::vector<float> eye(static_cast<size_t>(cols * cols), 0.0f);
    for (int64_t i = 0; i < cols; ++i) eye[static_cast<size_t>(i * cols + i)] = 1.0f;
    s.b = Tensor<float>::from_values({cols, cols}, eye);
    e.sites.push_back(std::move(s));
    return e;
}

std::vector<float> random_delta(Pcg32& rng, int64_t n) {
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
}

}  // namespace

TEST_CASE("top_k selects the largest scores with normalized weights") {
    auto s = make_scores({0.5, 0.2, 0.1, 0.1, 0.05, 0.05});

    auto one = top_k(s, 1);
    REQUIRE(one.items.size() == 1);
    CHECK(one.items[0].index == 0);
    CHECK(one.items[0].weight == 1.0);

    auto two = top_k(s, 2);
    REQUIRE(two.items.size() == 2);
    CHECK(two.items[0].index == 0);
    CHECK(two.items[1].index == 1);
    CHECK(two.items[0].weight == doctest::Approx(5.0 / 7.0));
    CHECK(two.items[1].weight == doctest::Approx(2.0 / 7.0));

    auto all = top_k(s, 6);
    double wsum = 0.0;
    for (const auto& it : all.items) {
        CHECK(it.weight == doctest::Approx(it.score));  // sum over all = 1
        wsum += it.weight;
    }
    CHECK(wsum == doctest::Approx(1.0));

    CHECK_THROWS_AS(top_k(s, 0), ValidationError);
    CHECK_THROWS_AS(top_k(s, 7), ValidationError);
}

TEST_CASE("top_k breaks ties by lower class index") {
    auto s = make_scores({0.2, 0.3, 0.3, 0.1, 0.05, 0.05});
    auto sel = top_k(s, 2);
    CHECK(sel.items[0].index == 1);
    CHECK(sel.items[1].index == 2);

    auto s2 = make_scores({0.25, 0.25, 0.25, 0.25, 0.0, 0.0});
    auto sel2 = top_k(s2, 3);
    CHECK(sel2.items[0].index == 0);
    CHECK(sel2.items[1].index == 1);
    CHECK(sel2.items[2].index == 2);
}

TEST_CASE("weights are invariant to exact positive rescaling of scores") {
    Pcg32 rng(5);
    for (int it = 0; it < 120; ++it) {
        std::array<double, 6> raw;
        double sum = 0.0;
        for (auto& v : raw) {
            v = rng.uniform(0.01, 1.0);
            sum += v;
        }
        for (auto& v : raw) v /= sum;
        ScoreVector s = make_scores(raw);
        int k = 1 + static_cast<int>(rng.next_below(6));
        auto base = top_k(s, k);
        for (double c : {0.25, 0.5, 2.0, 1024.0, 1.0 / 4096.0}) {
            ScoreVector scaled = s;
            for (auto& v : scaled.s) v *= c;  // exact: powers of two
            auto sel = top_k(scaled, k);
            REQUIRE(sel.items.size() == base.items.size());
            for (size_t i = 0; i < sel.items.size(); ++i) {
                CHECK(sel.items[i].index == base.items[i].index);
                CHECK(sel.items[i].weight == base.items[i].weight);  // bit-identical
            }
        }
    }
}

TEST_CASE("fuse with k=1 reproduces the top expert's delta exactly") {
    Pcg32 rng(7);
    auto e0 = expert_with_delta(PerturbationKind::Clean, random_delta(rng, 4), 2, 2);
    auto e1 = expert_with_delta(PerturbationKind::Snow, random_delta(rng, 4), 2, 2);
    std::vector<const LoraExpert<float>*> pool(6, nullptr);
    pool[0] = &e0;
    pool[1] = &e1;

    auto sel = top_k(make_scores({0.1, 0.8, 0.05, 0.02, 0.02, 0.01}), 1);
    auto fused = fuse(pool, sel);
    auto expected = lora_delta(e1, "enc.s1.attn.qkv");
    CHECK(fused.at("enc.s1.attn.qkv").values_vec() == expected.values_vec());
}

TEST_CASE("equal-score fusion equals the elementwise mean") {
    Pcg32 rng(11);
    auto e0 = expert_with_delta(PerturbationKind::Clean, random_delta(rng, 9), 3, 3);
    auto e1 = expert_with_delta(PerturbationKind::Snow, random_delta(rng, 9), 3, 3);
    std::vector<const LoraExpert<float>*> pool(6, nullptr);
    pool[0] = &e0;
    pool[1] = &e1;

    auto sel = top_k(make_scores({0.5, 0.5, 0.0, 0.0, 0.0, 0.0}), 2);
    auto fused = fuse(pool, sel);
    auto d0 = lora_delta(e0, "enc.s1.attn.qkv");
    auto d1 = lora_delta(e1, "enc.s1.attn.qkv");
    for (size_t i = 0; i < d0.values().size(); ++i) {
        float mean = (d0.values()[i] + d1.values()[i]) / 2.0f;
        CHECK(std::abs(fused.at("enc.s1.attn.qkv").values()[i] - mean) < 1e-7f);
    }
}

TEST_CASE("fused delta equals the brute-force weighted sum oracle") {
    Pcg32 rng(13);
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Pcg32 srng(200 + seed);
        int64_t rows = 2 + static_cast<int64_t>(srng.next_below(7));
        int64_t cols = 2 + static_cast<int64_t>(srng.next_below(7));
        auto e0 = expert_with_delta(PerturbationKind::Clean, random_delta(srng, rows * cols), rows, cols);
        auto e1 = expert_with_delta(PerturbationKind::Snow, random_delta(srng, rows * cols), rows, cols);
        auto e2 = expert_with_delta(PerturbationKind::Rain, random_delta(srng, rows * cols), rows, cols);
        std::vector<const LoraExpert<float>*> pool(6, nullptr);
        pool[0] = &e0;
        pool[1] = &e1;
        pool[2] = &e2;

        auto scores = make_scores({0.6, 0.3, 0.1, 0.0, 0.0, 0.0});
        auto sel = top_k(scores, 3);
        auto fused = fuse(pool, sel);

        auto d0 = lora_delta(e0, "enc.s1.attn.qkv");
        auto d1 = lora_delta(e1, "enc.s1.attn.qkv");
        auto d2 = lora_delta(e2, "enc.s1.attn.qkv");
        float max_diff = 0.0f;
        for (size_t i = 0; i < d0.values().size(); ++i) {
            float expected = 0.6f * d0.values()[i] + 0.3f * d1.values()[i] + 0.1f * d2.values()[i];
            max_diff = std::max(max_diff,
                                std::abs(fused.at("enc.s1.attn.qkv").values()[i] - expected));
        }
        CHECK(max_diff < 1e-7f);
    }
}

TEST_CASE("fusion is linear in the deltas") {
    Pcg32 rng(17);
    auto base_delta = random_delta(rng, 16);
    auto e0 = expert_with_delta(PerturbationKind::Clean, base_delta, 4, 4);
    std::vector<float> scaled_delta = base_delta;
    for (auto& v : scaled_delta) v *= 2.0f;
    auto e0x2 = expert_with_delta(PerturbationKind::Clean, scaled_delta, 4, 4);

    auto e1 = expert_with_delta(PerturbationKind::Snow, random_delta(rng, 16), 4, 4);
    std::vector<const LoraExpert<float>*> pool_a(6, nullptr), pool_b(6, nullptr);
    pool_a[0] = &e0;
    pool_a[1] = &e1;
    pool_b[0] = &e0x2;
    pool_b[1] = &e1;

    // with the second expert's delta zeroed the comparison is exact scaling
    auto zero = expert_with_delta(PerturbationKind::Snow, std::vector<float>(16, 0.0f), 4, 4);
    pool_a[1] = &zero;
    pool_b[1] = &zero;
    auto sel = top_k(make_scores({0.7, 0.3, 0.0, 0.0, 0.0, 0.0}), 2);
    auto fa = fuse(pool_a, sel);
    auto fb = fuse(pool_b, sel);
    for (size_t i = 0; i < 16; ++i)
        CHECK(fb.at("enc.s1.attn.qkv").values()[i] ==
              doctest::Approx(2.0f * fa.at("enc.s1.attn.qkv").values()[i]).epsilon(1e-6));
}

TEST_CASE("k=n fusion is the convex combination with the raw scores") {
    Pcg32 rng(19);
    std::vector<LoraExpert<float>> experts;
    std::vector<const LoraExpert<float>*> pool(6, nullptr);
    for (int i = 0; i < 6; ++i)
        experts.push_back(expert_with_delta(static_cast<PerturbationKind>(i), random_delta(rng, 4), 2, 2));
    for (int i = 0; i < 6; ++i) pool[static_cast<size_t>(i)] = &experts[static_cast<size_t>(i)];

    auto scores = make_scores({0.3, 0.25, 0.2, 0.15, 0.06, 0.04});
    auto sel = top_k(scores, 6);
    auto fused = fuse(pool, sel);
    for (size_t i = 0; i < 4; ++i) {
        double expected = 0.0;
        for (int e = 0; e < 6; ++e)
            expected += scores.s[static_cast<size_t>(e)] *
                        lora_delta(experts[static_cast<size_t>(e)], "enc.s1.attn.qkv").values()[i];
        CHECK(fused.at("enc.s1.attn.qkv").values()[i] == doctest::Approx(expected).epsilon(1e-6));
    }
}

TEST_CASE("fuse validates pool coverage and site keys") {
    Pcg32 rng(23);
    auto e0 = expert_with_delta(PerturbationKind::Clean, random_delta(rng, 4), 2, 2);
    std::vector<const LoraExpert<float>*> pool(6, nullptr);
    pool[0] = &e0;
    auto sel = top_k(make_scores({0.4, 0.6, 0.0, 0.0, 0.0, 0.0}), 2);
    CHECK_THROWS_AS(fuse(pool, sel), LookupError);

    auto e1 = expert_with_delta(PerturbationKind::Snow, random_delta(rng, 4), 2, 2);
    e1.sites[0].site = "enc.s2.attn.qkv";  // different key
    pool[1] = &e1;
    CHECK_THROWS_AS(fuse(pool, sel), ValidationError);
}

TEST_CASE("fuse_squads averages snapshots with the same weights") {
    Pcg32 rng(29);
    ModelConfig cfg;
    cfg.input = 16;
    cfg.patch = 2;
    cfg.channels = {4, 4, 4, 4};
    cfg.head_dim = 2;
    cfg.ffn_ratio = 2;
    MtlModel<float> model(cfg, 31);
    RankSchedule schedule{{2, 2, 2, 2}};

    std::vector<ExpertSquad<float>> squads;
    for (int i = 0; i < 3; ++i) {
        auto expert = new_expert(model, static_cast<PerturbationKind>(i), schedule, 1.0f,
                                 100 + static_cast<uint64_t>(i));
        for (auto& s : expert.sites)
            for (auto& v : s.b.values()) v = static_cast<float>(rng.normal(0.0, 0.1));
        auto squad = make_squad(model, std::move(expert));
        for (auto& [name, t] : squad.norm_params)
            for (auto& v : t.values()) v += static_cast<float>(rng.uniform(-0.2, 0.2));
        for (auto& [name, t] : squad.decoder_params)
            for (auto& v : t.values()) v += static_cast<float>(rng.uniform(-0.2, 0.2));
        squads.push_back(std::move(squad));
    }
    std::vector<const ExpertSquad<float>*> pool(6, nullptr);
    for (int i = 0; i < 3; ++i) pool[static_cast<size_t>(i)] = &squads[static_cast<size_t>(i)];

    SUBCASE("single squad selected equals that squad elementwise") {
        auto sel = top_k(make_scores({0.9, 0.05, 0.05, 0.0, 0.0, 0.0}), 1);
        auto fused = fuse_squads(pool, sel);
        for (size_t i = 0; i < fused.norm_params.size(); ++i)
            CHECK(fused.norm_params[i].second.values_vec() ==
                  squads[0].norm_params[i].second.values_vec());
        for (size_t i = 0; i < fused.decoder_params.size(); ++i)
            CHECK(fused.decoder_params[i].second.values_vec() ==
                  squads[0].decoder_params[i].second.values_vec());
        auto d = lora_delta(squads[0].expert, "enc.s1.attn.qkv");
        CHECK(fused.deltas.at("enc.s1.attn.qkv").values_vec() == d.values_vec());
    }

    SUBCASE("equal-score pair is the elementwise mean of both squads") {
        auto sel = top_k(make_scores({0.5, 0.5, 0.0, 0.0, 0.0, 0.0}), 2);
        auto fused = fuse_squads(pool, sel);
        for (size_t t = 0; t < fused.norm_params.size(); ++t)
            for (size_t i = 0; i < fused.norm_params[t].second.values().size(); ++i) {
                float mean = (squads[0].norm_params[t].second.values()[i] +
                              squads[1].norm_params[t].second.values()[i]) /
                             2.0f;
                CHECK(std::abs(fused.norm_params[t].second.values()[i] - mean) < 1e-7f);
            }
    }

    SUBCASE("weighted 3-squad case matches the per-tensor oracle") {
        auto scores = make_scores({0.6, 0.3, 0.1, 0.0, 0.0, 0.0});
        auto sel = top_k(scores, 3);
        auto fused = fuse_squads(pool, sel);
        for (size_t t = 0; t < fused.decoder_params.size(); ++t)
            for (size_t i = 0; i < fused.decoder_params[t].second.values().size(); ++i) {
                float expected = 0.6f * squads[0].decoder_params[t].second.values()[i] +
                                 0.3f * squads[1].decoder_params[t].second.values()[i] +
                                 0.1f * squads[2].decoder_params[t].second.values()[i];
                CHECK(std::abs(fused.decoder_params[t].second.values()[i] - expected) < 1e-7f);
            }
    }

    SUBCASE("fused injection then eject restores the base model bit-exactly") {
        uint64_t h0 = model.full_hash();
        auto sel = top_k(make_scores({0.5, 0.3, 0.2, 0.0, 0.0, 0.0}), 3);
        auto fused = fuse_squads(pool, sel);
        {
            auto adapted = apply_squad(model, fused);
            CHECK(model.full_hash() != h0);
        }
        CHECK(model.full_hash() == h0);
    }
}

TEST_CASE("route_and_adapt invokes the router exactly once per batch") {
    ModelConfig cfg;
    cfg.input = 32;
    cfg.patch = 2;
    cfg.channels = {4, 4, 4, 4};
    cfg.head_dim = 2;
    cfg.ffn_ratio = 2;
    MtlModel<float> model(cfg, 37);
    DmlsNet<float> router(41);
    RankSchedule schedule{{2, 2, 2, 2}};

    ExpertPool<float> pool;
    for (int i = 0; i < 6; ++i) {
        auto expert = new_expert(model, static_cast<PerturbationKind>(i), schedule, 1.0f,
                                 300 + static_cast<uint64_t>(i));
        pool.put(make_squad(model, std::move(expert)));
    }

    Pcg32 rng(43);
    std::vector<ImageData> storage;
    for (int i = 0; i < 5; ++i) {
        ImageData img;
        img.c = 3;
        img.h = 32;
        img.w = 32;
        img.data.resize(3 * 32 * 32);
        for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
        storage.push_back(std::move(img));
    }
    std::vector<const ImageData*> batch;
    for (const auto& img : storage) batch.push_back(&img);

    uint64_t h0 = model.full_hash();
    int64_t inv0 = router.invocations();
    {
        auto [adapted, decision] = route_and_adapt(model, router, batch, pool, {1, FusionMode::LoraOnly});
        CHECK(router.invocations() == inv0 + 1);
        CHECK(decision.selected.items.size() == 1);
    }
    CHECK(model.full_hash() == h0);

    {
        auto [adapted, decision] = route_and_adapt(model, router, batch, pool, {6, FusionMode::Squad});
        CHECK(router.invocations() == inv0 + 2);
        CHECK(decision.selected.items.size() == 6);
    }
    CHECK(model.full_hash() == h0);

    // missing expert for a selected kind is a lookup error
    ExpertPool<float> sparse;
    sparse.put(make_squad(model, new_expert(model, PerturbationKind::Clean, schedule, 1.0f, 999)));
    CHECK_THROWS_AS(route_and_adapt(model, router, batch, sparse, {6, FusionMode::LoraOnly}),
                    LookupError);
}
