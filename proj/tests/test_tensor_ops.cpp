#include <cmath>

#include "doctest.h"
#include "robumtl/ops.hpp"
#include "robumtl/optim.hpp"
#include "robumtl/rng.hpp"
#include "support/gradcheck.hpp"

using namespace robumtl;
using robumtl::testing::grad_check;
using robumtl::testing::random_values;
using robumtl::testing::random_values_away_from;

namespace {

Tensor<double> leaf(Tape<double>& tape, Shape shape, std::vector<double> vals) {
    return tape.leaf(std::move(shape), std::move(vals), true);
}

// Random fixed projection used to reduce a tensor to a scalar probe.
Tensor<double> probe(Tape<double>& tape, const Tensor<double>& t, uint64_t seed) {
    Pcg32 rng(seed);
    std::vector<double> w(static_cast<size_t>(t.numel()));
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    Tensor<double> proj = Tensor<double>::from_values(t.shape(), std::move(w), false, &tape);
    Tensor<double> prod = mul(t, proj);
    Tensor<double> flat = reshape(prod, {1, t.numel()});
    Tensor<double> ones = Tensor<double>::from_values({t.numel(), 1},
                                                      std::vector<double>(static_cast<size_t>(t.numel()), 1.0),
                                                      false, &tape);
    return reshape(matmul(flat, ones), {1});
}

}  // namespace

TEST_CASE("matmul identity and direct arithmetic") {
    Tape<float> tape;
    auto eye = tape.leaf({2, 2}, {1, 0, 0, 1}, false);
    auto x = tape.leaf({2, 2}, {3, 4, 5, 6}, false);
    auto y = matmul(eye, x);
    CHECK(y.values()[0] == 3.0f);
    CHECK(y.values()[1] == 4.0f);
    CHECK(y.values()[2] == 5.0f);
    CHECK(y.values()[3] == 6.0f);

    auto a = tape.leaf({2, 1}, {1, 1}, false);
    auto b = tape.leaf({1, 2}, {2, 3}, false);
    auto c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 2});
    CHECK(c.values()[0] == 2.0f);
    CHECK(c.values()[1] == 3.0f);
    CHECK(c.values()[2] == 2.0f);
    CHECK(c.values()[3] == 3.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape<float> tape;
    auto a = tape.leaf({2, 3}, std::vector<float>(6, 1.0f), false);
    auto b = tape.leaf({2, 2}, std::vector<float>(4, 1.0f), false);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("matmul gradient vs central finite differences") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Pcg32 rng(100 + seed);
        Tape<double> tape;
        auto a = leaf(tape, {3, 4}, random_values(rng, 12));
        auto b = leaf(tape, {4, 2}, random_values(rng, 8));
        auto res = grad_check(tape, {a, b}, [&]() { return probe(tape, matmul(a, b), 7 + seed); });
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("conv2d trivial cases") {
    Tape<float> tape;
    // 1x1 kernel of value 1 on a single channel is the identity.
    auto x = tape.leaf({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}, false);
    auto w = tape.leaf({1, 1, 1, 1}, {1}, false);
    auto y = conv2d(x, w);
    for (int i = 0; i < 9; ++i) CHECK(y.values()[static_cast<size_t>(i)] == x.values()[static_cast<size_t>(i)]);

    // all-ones 3x3 kernel on all-ones 5x5 input, pad 0 -> all-9 3x3 output
    auto x2 = tape.leaf({1, 1, 5, 5}, std::vector<float>(25, 1.0f), false);
    auto w2 = tape.leaf({1, 1, 3, 3}, std::vector<float>(9, 1.0f), false);
    auto y2 = conv2d(x2, w2);
    CHECK(y2.shape() == Shape{1, 1, 3, 3});
    for (auto v : y2.values()) CHECK(v == doctest::Approx(9.0f));
}

TEST_CASE("conv2d kernel larger than padded input is rejected") {
    Tape<float> tape;
    auto x = tape.leaf({1, 1, 2, 2}, std::vector<float>(4, 1.0f), false);
    auto w = tape.leaf({1, 1, 5, 5}, std::vector<float>(25, 1.0f), false);
    CHECK_THROWS_AS(conv2d(x, w, Tensor<float>(), 1, 0), DimensionError);
}

TEST_CASE("conv2d gradient vs finite differences") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Pcg32 rng(200 + seed);
        Tape<double> tape;
        auto x = leaf(tape, {2, 2, 5, 5}, random_values(rng, 100));
        auto w = leaf(tape, {3, 2, 3, 3}, random_values(rng, 54));
        auto b = leaf(tape, {3}, random_values(rng, 3));
        auto res = grad_check(tape, {x, w, b},
                              [&]() { return probe(tape, conv2d(x, w, b, 1, 1), 11 + seed); });
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("depthwise separable conv identity and oracle") {
    Tape<float> tape;
    // depthwise delta kernel + identity pointwise mixing = identity map
    auto x = tape.leaf({1, 2, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 8, 7, 6, 5, 4, 3, 2, 1}, false);
    std::vector<float> delta(2 * 9, 0.0f);
    delta[4] = 1.0f;
    delta[9 + 4] = 1.0f;
    auto dw = tape.leaf({2, 3, 3}, delta, false);
    std::vector<float> eye(4, 0.0f);
    eye[0] = 1.0f;
    eye[3] = 1.0f;
    auto pw = tape.leaf({2, 2, 1, 1}, eye, false);
    auto y = depthwise_separable_conv(x, dw, Tensor<float>(), pw, Tensor<float>(), 1, 1);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(y.values()[static_cast<size_t>(i)] == doctest::Approx(x.values()[static_cast<size_t>(i)]));
}

TEST_CASE("depthwise separable equals equivalent full conv") {
    // A depthwise+pointwise pair equals a full conv whose kernel is
    // w_full[o][c] = pw[o][c] * dw[c].
    Pcg32 rng(42);
    Tape<double> tape;
    int64_t c_in = 2, c_out = 3, k = 3;
    auto x = leaf(tape, {1, c_in, 5, 5}, random_values(rng, 50));
    auto dw = leaf(tape, {c_in, k, k}, random_values(rng, c_in * k * k));
    auto pw = leaf(tape, {c_out, c_in, 1, 1}, random_values(rng, c_out * c_in));

    auto y = depthwise_separable_conv(x, dw, Tensor<double>(), pw, Tensor<double>(), 1, 1);

    std::vector<double> wf(static_cast<size_t>(c_out * c_in * k * k));
    for (int64_t o = 0; o < c_out; ++o)
        for (int64_t c = 0; c < c_in; ++c)
            for (int64_t i = 0; i < k * k; ++i)
                wf[static_cast<size_t>((o * c_in + c) * k * k + i)] =
                    pw.values()[static_cast<size_t>(o * c_in + c)] *
                    dw.values()[static_cast<size_t>(c * k * k + i)];
    auto w_full = leaf(tape, {c_out, c_in, k, k}, wf);
    auto y_ref = conv2d(x, w_full, Tensor<double>(), 1, 1);
    REQUIRE(y.shape() == y_ref.shape());
    for (int64_t i = 0; i < y.numel(); ++i)
        CHECK(y.values()[static_cast<size_t>(i)] ==
              doctest::Approx(y_ref.values()[static_cast<size_t>(i)]).epsilon(1e-9));
}

TEST_CASE("depthwise separable parameter count closed form") {
    // params = C*k^2 + C*C_out (+ biases), per stage of the router backbone
    auto count = [](int64_t c, int64_t k, int64_t c_out) {
        return c * k * k + c + c * c_out + c_out;  // dw w + dw b + pw w + pw b
    };
    CHECK(count(16, 3, 48) == 16 * 9 + 16 + 16 * 48 + 48);
    CHECK(count(48, 3, 128) == 48 * 9 + 48 + 48 * 128 + 128);
}

TEST_CASE("depthwise channel mismatch rejected") {
    Tape<float> tape;
    auto x = tape.leaf({1, 3, 4, 4}, std::vector<float>(48, 1.0f), false);
    auto w = tape.leaf({2, 3, 3}, std::vector<float>(18, 1.0f), false);
    CHECK_THROWS_AS(depthwise_conv2d(x, w, Tensor<float>(), 1, 1), DimensionError);
}

TEST_CASE("depthwise gradient vs finite differences") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Pcg32 rng(300 + seed);
        Tape<double> tape;
        auto x = leaf(tape, {1, 3, 5, 5}, random_values(rng, 75));
        auto w = leaf(tape, {3, 3, 3}, random_values(rng, 27));
        auto b = leaf(tape, {3}, random_values(rng, 3));
        auto res = grad_check(tape, {x, w, b},
                              [&]() { return probe(tape, depthwise_conv2d(x, w, b, 1, 1), 31 + seed); });
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("pooling trivial cases") {
    Tape<float> tape;
    auto c = tape.leaf({1, 1, 4, 4}, std::vector<float>(16, 2.5f), false);
    auto mp = maxpool2d(c, 2);
    for (auto v : mp.values()) CHECK(v == 2.5f);
    auto ap = adaptive_avgpool(c);
    CHECK(ap.values()[0] == doctest::Approx(2.5f));

    auto x = tape.leaf({1, 1, 2, 2}, {1, 2, 3, 4}, false);
    auto y = maxpool2d(x, 2);
    CHECK(y.numel() == 1);
    CHECK(y.values()[0] == 4.0f);

    CHECK_THROWS_AS(maxpool2d(x, 3), DimensionError);
}

TEST_CASE("adaptive avgpool gradient spreads uniformly") {
    Pcg32 rng(55);
    Tape<double> tape;
    auto x = leaf(tape, {1, 2, 4, 4}, random_values(rng, 32));
    auto res = grad_check(tape, {x}, [&]() { return probe(tape, adaptive_avgpool(x), 17); });
    CHECK(res.max_rel_err < 1e-6);

    // direct check: gradient of the mean is 1/(H*W) everywhere
    tape.clear();
    x.zero_grad();
    auto pooled = adaptive_avgpool(x);
    auto s = slice_cols(pooled, 0, 1);
    auto lossv = reshape(s, {1});
    tape.backward(lossv);
    for (int64_t i = 0; i < 16; ++i) CHECK(x.grad()[static_cast<size_t>(i)] == doctest::Approx(1.0 / 16.0));
    for (int64_t i = 16; i < 32; ++i) CHECK(x.grad()[static_cast<size_t>(i)] == 0.0);
}

TEST_CASE("maxpool gradient vs finite differences") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Pcg32 rng(400 + seed);
        Tape<double> tape;
        auto x = leaf(tape, {1, 2, 4, 4}, random_values(rng, 32));
        auto res = grad_check(tape, {x}, [&]() { return probe(tape, maxpool2d(x, 2), 19 + seed); });
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("relu and softmax basics") {
    Tape<float> tape;
    auto x = tape.leaf({1, 4}, {-1.0f, 2.0f, -3.0f, 0.5f}, false);
    auto r = relu(x);
    CHECK(r.values()[0] == 0.0f);
    CHECK(r.values()[1] == 2.0f);
    CHECK(r.values()[2] == 0.0f);
    CHECK(r.values()[3] == 0.5f);

    auto u = tape.leaf({1, 6}, std::vector<float>(6, 0.7f), false);
    auto s = softmax(u, 1);
    for (auto v : s.values()) CHECK(v == doctest::Approx(1.0f / 6.0f));

    // stabilization: large logits stay finite
    auto big = tape.leaf({1, 2}, {1000.0f, 0.0f}, false);
    auto sb = softmax(big, 1);
    CHECK(std::isfinite(sb.values()[0]));
    CHECK(sb.values()[0] == doctest::Approx(1.0f));
    CHECK(sb.values()[1] == doctest::Approx(0.0f));
}

TEST_CASE("softmax sums to one on arbitrary finite input") {
    Pcg32 rng(77);
    for (int it = 0; it < 25; ++it) {
        Tape<float> tape;
        int64_t m = 1 + rng.next_below(5);
        int64_t d = 2 + rng.next_below(12);
        std::vector<float> v(static_cast<size_t>(m * d));
        for (auto& x : v) x = static_cast<float>(rng.uniform(-50.0, 50.0));
        auto t = tape.leaf({m, d}, v, false);
        auto s = softmax(t, 1);
        for (int64_t i = 0; i < m; ++i) {
            float sum = 0.0f;
            for (int64_t j = 0; j < d; ++j) sum += s.values()[static_cast<size_t>(i * d + j)];
            CHECK(std::abs(sum - 1.0f) < 1e-6f);
        }
    }
}

TEST_CASE("softmax gradient vs finite differences") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Pcg32 rng(500 + seed);
        Tape<double> tape;
        auto x = leaf(tape, {3, 5}, random_values(rng, 15));
        auto res = grad_check(tape, {x}, [&]() { return probe(tape, softmax(x, 1), 23 + seed); });
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("cross entropy values") {
    Tape<float> tape;
    auto u = tape.leaf({2, 6}, std::vector<float>(12, 0.3f), false);
    auto l = cross_entropy(u, {0, 3});
    CHECK(l.scalar() == doctest::Approx(std::log(6.0f)));

    // confident correct prediction drives the loss to zero
    auto conf = tape.leaf({1, 3}, {50.0f, 0.0f, 0.0f}, false);
    auto lc = cross_entropy(conf, {0});
    CHECK(lc.scalar() == doctest::Approx(0.0f).epsilon(1e-6));

    CHECK_THROWS_AS(cross_entropy(u, {0, 6}), ValidationError);
    CHECK_THROWS_AS(cross_entropy(u, {-1, 0}), ValidationError);
}

TEST_CASE("cross entropy gradient vs finite differences") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Pcg32 rng(600 + seed);
        Tape<double> tape;
        auto z = leaf(tape, {4, 6}, random_values(rng, 24));
        std::vector<int> labels = {0, 5, 2, 3};
        auto res = grad_check(tape, {z}, [&]() { return cross_entropy(z, labels); });
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("bce and l2 losses with gradients") {
    Pcg32 rng(700);
    Tape<double> tape;
    auto z = leaf(tape, {2, 3}, random_values(rng, 6));
    std::vector<double> t(6);
    for (auto& v : t) v = rng.uniform(0.05, 0.95);
    auto targets = Tensor<double>::from_values({2, 3}, t, false, &tape);
    auto res = grad_check(tape, {z}, [&]() { return bce_with_logits(z, targets); });
    CHECK(res.max_rel_err < 1e-6);

    auto p = leaf(tape, {2, 3}, random_values(rng, 6));
    auto res2 = grad_check(tape, {p}, [&]() { return l2_loss(p, targets); });
    CHECK(res2.max_rel_err < 1e-6);

    // l2 of identical tensors is zero
    auto same = l2_loss(targets, targets);
    CHECK(same.scalar() == 0.0);
}

TEST_CASE("layer norm gradient vs finite differences") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Pcg32 rng(800 + seed);
        Tape<double> tape;
        auto x = leaf(tape, {3, 6}, random_values(rng, 18));
        auto g = leaf(tape, {6}, random_values(rng, 6, 0.5, 1.5));
        auto b = leaf(tape, {6}, random_values(rng, 6));
        auto res = grad_check(tape, {x, g, b},
                              [&]() { return probe(tape, layer_norm(x, g, b), 29 + seed); });
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("bilinear upsample constant map stays constant") {
    Tape<float> tape;
    auto x = tape.leaf({1, 2, 2, 2}, std::vector<float>(8, 1.25f), false);
    auto y = bilinear_upsample(x, 8, 8);
    CHECK(y.shape() == Shape{1, 2, 8, 8});
    for (auto v : y.values()) CHECK(v == doctest::Approx(1.25f));
}

TEST_CASE("bilinear upsample gradient vs finite differences") {
    Pcg32 rng(900);
    Tape<double> tape;
    auto x = leaf(tape, {1, 2, 3, 3}, random_values(rng, 18));
    auto res = grad_check(tape, {x}, [&]() { return probe(tape, bilinear_upsample(x, 7, 5), 37); });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("structural ops gradients (reshape, permute, slice, bmm, patchify)") {
    Pcg32 rng(1000);
    Tape<double> tape;
    auto x = leaf(tape, {2, 3, 4, 2}, random_values(rng, 48));
    auto res = grad_check(tape, {x}, [&]() {
        auto p = permute4(x, {0, 2, 1, 3});
        auto r = reshape(p, {8, 6});
        auto s = slice_cols(r, 1, 5);
        return probe(tape, s, 41);
    });
    CHECK(res.max_rel_err < 1e-6);

    auto a = leaf(tape, {2, 3, 4}, random_values(rng, 24));
    auto b = leaf(tape, {2, 4, 2}, random_values(rng, 16));
    auto res2 = grad_check(tape, {a, b}, [&]() { return probe(tape, bmm(a, b), 43); });
    CHECK(res2.max_rel_err < 1e-6);

    auto bt = leaf(tape, {2, 2, 4}, random_values(rng, 16));
    auto res3 = grad_check(tape, {a, bt}, [&]() { return probe(tape, bmm(a, bt, true), 47); });
    CHECK(res3.max_rel_err < 1e-6);

    auto img = leaf(tape, {1, 3, 4, 4}, random_values(rng, 48));
    auto res4 = grad_check(tape, {img}, [&]() { return probe(tape, patchify(img, 2), 53); });
    CHECK(res4.max_rel_err < 1e-6);

    auto tok = leaf(tape, {12, 5}, random_values(rng, 60));
    auto res5 = grad_check(tape, {tok}, [&]() { return probe(tape, tokens_to_space(tok, 1, 3, 4), 59); });
    CHECK(res5.max_rel_err < 1e-6);
}

TEST_CASE("linear matches matmul plus bias and has correct gradients") {
    Pcg32 rng(1100);
    Tape<double> tape;
    auto x = leaf(tape, {4, 3}, random_values(rng, 12));
    auto w = leaf(tape, {5, 3}, random_values(rng, 15));
    auto b = leaf(tape, {5}, random_values(rng, 5));
    auto res = grad_check(tape, {x, w, b}, [&]() { return probe(tape, linear(x, w, b), 61); });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
    Tape<float> tape;
    auto p = tape.leaf({3}, {1.0f, -2.0f, 0.5f}, true);
    Adam<float> opt({0.1});
    opt.add_param("p", p);
    opt.zero_grad();
    opt.step();
    CHECK(p.values()[0] == 1.0f);
    CHECK(p.values()[1] == -2.0f);
    CHECK(p.values()[2] == 0.5f);
}

TEST_CASE("adam single scalar step matches hand computation") {
    // theta=1, g=0.5, lr=0.1, from m=v=0:
    //   m=0.05, v=0.00025, mhat=0.5, vhat=0.25
    //   theta' = 1 - 0.1*0.5/(0.5+1e-8) = 0.900000002
    Tape<double> tape;
    auto p = tape.leaf({1}, {1.0}, true);
    p.grad()[0] = 0.5;
    Adam<double> opt({0.1});
    opt.add_param("p", p);
    opt.step();
    CHECK(p.values()[0] == doctest::Approx(0.900000002).epsilon(1e-9));
}

TEST_CASE("adam is deterministic across identical runs") {
    auto run = []() {
        Pcg32 rng(9);
        Tape<float> tape;
        std::vector<float> init(8);
        for (auto& v : init) v = static_cast<float>(rng.normal(0.0, 0.1));
        auto w = tape.leaf({2, 4}, init, true);
        Adam<float> opt({0.01});
        opt.add_param("w", w);
        for (int step = 0; step < 5; ++step) {
            tape.clear();
            opt.zero_grad();
            std::vector<float> xv(8);
            for (auto& v : xv) v = static_cast<float>(rng.normal(0.0, 1.0));
            auto x = Tensor<float>::from_values({4, 2}, xv, false, &tape);
            auto y = matmul(w, x);
            auto t = Tensor<float>::from_values({2, 2}, {1, 0, 0, 1}, false, &tape);
            auto loss = l2_loss(y, t);
            tape.backward(loss);
            opt.step();
        }
        return std::vector<float>(w.values().begin(), w.values().end());
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("adam surfaces NaN gradients with the parameter name") {
    Tape<float> tape;
    auto p = tape.leaf({1}, {1.0f}, true);
    p.grad()[0] = std::nanf("");
    Adam<float> opt;
    opt.add_param("enc.s1.attn.qkv", p);
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("enc.s1.attn.qkv"), TrainingError);
}

TEST_CASE("forward of a composed graph is deterministic") {
    auto run = []() {
        Pcg32 rng(31);
        Tape<float> tape;
        std::vector<float> xv(192);
        for (auto& v : xv) v = static_cast<float>(rng.uniform(0.0, 1.0));
        auto x = tape.leaf({1, 3, 8, 8}, xv, false);
        std::vector<float> wv(16 * 27);
        for (auto& v : wv) v = static_cast<float>(rng.normal(0.0, 0.1));
        auto w = tape.leaf({16, 3, 3, 3}, wv, false);
        auto y = adaptive_avgpool(relu(conv2d(x, w, Tensor<float>(), 1, 1)));
        return std::vector<float>(y.values().begin(), y.values().end());
    };
    auto a = run();
    auto b = run();
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}
