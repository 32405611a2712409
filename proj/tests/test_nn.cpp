#include "doctest.h"

#include <cmath>

#include "psm/common.hpp"
#include "psm/nn/checkpoint.hpp"
#include "psm/nn/ops.hpp"
#include "psm/nn/optim.hpp"
#include "test_util.hpp"

using namespace psm;
using namespace psm::nn;

namespace {

Tensor rand_param(Shape s, std::uint64_t seed, double scale = 1.0) {
    auto v = testutil::random_values(nn::numel(s), seed, -scale, scale);
    return Tensor::from(std::move(s), std::move(v), true);
}

// Deterministic scalar readout that weights every output element differently.
Tensor readout(const Tensor& y, std::uint64_t seed) {
    const Tensor w = Tensor::from(y.shape(), testutil::random_values(y.numel(), seed));
    return sum(mul(y, w));
}

}  // namespace

TEST_CASE("kernel examples") {
    SUBCASE("softmax of zeros is uniform") {
        const Tensor y = softmax(Tensor::zeros({1, 4}));
        for (double v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    }
    SUBCASE("layer_norm of a constant vector returns the affine bias") {
        const Tensor x = Tensor::full({1, 5}, 3.7);
        const Tensor g = Tensor::full({5}, 2.0);
        const Tensor b = Tensor::from({5}, {0.1, 0.2, 0.3, 0.4, 0.5});
        const Tensor y = layer_norm(x, g, b);
        for (int i = 0; i < 5; ++i) CHECK(y.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
    }
    SUBCASE("matmul by identity") {
        const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
        const Tensor i = Tensor::from({2, 2}, {1, 0, 0, 1});
        const Tensor y = matmul(a, i);
        CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{1, 2, 3, 4});
    }
    SUBCASE("layer_norm output has zero mean and unit variance before affine") {
        const Tensor x = Tensor::from({2, 6}, testutil::random_values(12, 3));
        const Tensor y = layer_norm(x, Tensor::full({6}, 1.0), Tensor::zeros({6}), 0.0);
        for (int r = 0; r < 2; ++r) {
            double m = 0.0, v = 0.0;
            for (int i = 0; i < 6; ++i) m += y.data()[r * 6 + i];
            m /= 6;
            for (int i = 0; i < 6; ++i) v += (y.data()[r * 6 + i] - m) * (y.data()[r * 6 + i] - m);
            CHECK(std::abs(m) < 1e-12);
            CHECK(v / 6 == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    SUBCASE("softmax rows sum to one and are shift invariant") {
        const auto v = testutil::random_values(12, 9, -5, 5);
        const Tensor y = softmax(Tensor::from({3, 4}, v));
        auto shifted = v;
        for (auto& x : shifted) x += 17.25;
        const Tensor z = softmax(Tensor::from({3, 4}, shifted));
        for (int r = 0; r < 3; ++r) {
            double s = 0.0;
            for (int i = 0; i < 4; ++i) s += y.data()[r * 4 + i];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
        }
        for (int i = 0; i < 12; ++i) CHECK(std::abs(y.data()[i] - z.data()[i]) <= 1e-12);
    }
    SUBCASE("shape mismatch names both shapes") {
        try {
            (void)add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
            FAIL("expected a shape error");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("(2, 3)") != std::string::npos);
            CHECK(msg.find("(3, 2)") != std::string::npos);
        }
        CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ValidationError);
    }
}

TEST_CASE("backward examples") {
    SUBCASE("x^2 at 3 has gradient 6") {
        Tensor x = Tensor::scalar(3.0, true);
        mul(x, x).backward();
        CHECK(x.grad()[0] == 6.0);
    }
    SUBCASE("a parameter the loss does not depend on gets zero gradient") {
        Tensor x = Tensor::scalar(2.0, true);
        Tensor unused = Tensor::scalar(5.0, true);
        ParamList ps{{"x", x}, {"unused", unused}};
        zero_grad(ps);
        scale(x, 3.0).backward();
        CHECK(unused.grad()[0] == 0.0);
        CHECK(x.grad()[0] == 3.0);
    }
    SUBCASE("repeated calls accumulate until zeroed") {
        Tensor x = Tensor::scalar(1.5, true);
        const Tensor y = scale(x, 2.0);
        Tensor loss = sum(y);
        loss.backward();
        loss.backward();
        CHECK(x.grad()[0] == 4.0);
        x.zero_grad();
        loss.backward();
        CHECK(x.grad()[0] == 2.0);
    }
    SUBCASE("non-scalar loss is rejected") {
        Tensor x = Tensor::zeros({2}, true);
        CHECK_THROWS_AS(scale(x, 1.0).backward(), ValidationError);
    }
    SUBCASE("no graph under NoGradGuard") {
        Tensor x = Tensor::scalar(1.0, true);
        NoGradGuard g;
        CHECK_FALSE(scale(x, 2.0).requires_grad());
    }
}

TEST_CASE("random 3-layer MLP gradient matches finite differences") {
    Tensor x = Tensor::from({5, 6}, testutil::random_values(30, 1));
    ParamList ps{{"w1", rand_param({8, 6}, 2, 0.5)}, {"b1", rand_param({8}, 3, 0.1)},
                 {"w2", rand_param({7, 8}, 4, 0.5)}, {"b2", rand_param({7}, 5, 0.1)},
                 {"w3", rand_param({4, 7}, 6, 0.5)}, {"b3", rand_param({4}, 7, 0.1)}};
    const std::vector<int> labels{0, 3, 1, 2, 1};
    const auto loss = [&] {
        Tensor h = gelu(linear(x, ps[0].tensor, ps[1].tensor));
        h = relu(linear(h, ps[2].tensor, ps[3].tensor));
        return cross_entropy(linear(h, ps[4].tensor, ps[5].tensor), labels);
    };
    const auto r = testutil::check_gradients(ps, loss);
    CHECK_MESSAGE(r.worst <= 1e-4, r.worst_name, " rel err ", r.worst);
}

TEST_CASE("every differentiable op passes a finite-difference check") {
    const auto check = [](const char* name, ParamList ps, const std::function<Tensor()>& fn) {
        const auto r = testutil::check_gradients(ps, fn);
        INFO(name, " worst ", r.worst_name, " rel err ", r.worst);
        CHECK(r.worst <= 1e-4);
    };
    Tensor a = rand_param({2, 3, 4}, 11);
    Tensor b = rand_param({2, 3, 4}, 12);
    Tensor bias = rand_param({3, 4}, 13);
    Tensor m = rand_param({4, 5}, 14);
    Tensor w = rand_param({5, 4}, 15);
    Tensor wb = rand_param({5}, 16);
    Tensor g = rand_param({4}, 17);
    Tensor bt = rand_param({4}, 18);
    Tensor fill = rand_param({4}, 19);
    check("add/sub/mul/scale", {{"a", a}, {"b", b}},
          [&] { return readout(scale(mul(add(a, b), sub(a, b)), 0.7), 100); });
    check("add_bias", {{"a", a}, {"bias", bias}}, [&] { return readout(add_bias(a, bias), 101); });
    check("matmul", {{"a", a}, {"m", m}}, [&] { return readout(matmul(a, m), 102); });
    check("linear", {{"a", a}, {"w", w}, {"b", wb}}, [&] { return readout(linear(a, w, wb), 103); });
    check("linear no bias", {{"a", a}, {"w", w}}, [&] { return readout(linear(a, w, Tensor()), 104); });
    check("bmm", {{"a", a}, {"b", b}}, [&] { return readout(bmm(a, b, true), 105); });
    check("bmm plain", {{"a", a}, {"m", m}},
          [&] { return readout(bmm(a, reshape(expand_batch(m, 2), {2, 4, 5})), 106); });
    check("reshape/transpose", {{"m", m}}, [&] { return readout(transpose(reshape(m, {5, 4})), 107); });
    check("layer_norm", {{"a", a}, {"g", g}, {"b", bt}}, [&] { return readout(layer_norm(a, g, bt), 108); });
    check("gelu", {{"a", a}}, [&] { return readout(gelu(a), 109); });
    check("relu", {{"a", a}}, [&] { return readout(relu(a), 110); });
    check("softmax", {{"a", a}}, [&] { return readout(softmax(a), 111); });
    check("mean", {{"a", a}}, [&] { return mean(mul(a, a)); });
    check("slice/cat", {{"a", a}, {"b", b}}, [&] {
        return readout(cat_tokens(slice_tokens(a, 1, 2), slice_tokens(slice_rows(b, 0, 2), 0, 1)), 112);
    });
    check("gather/scatter", {{"a", a}, {"fill", fill}}, [&] {
        const std::vector<std::vector<int>> idx{{2, 0}, {1, 2}};
        return readout(scatter_tokens(gather_tokens(a, idx), idx, 5, fill), 113);
    });
    Tensor qkv = rand_param({2, 3, 12}, 20);
    check("attention heads", {{"qkv", qkv}}, [&] {
        const Tensor q = split_heads(qkv, 2, 0), k = split_heads(qkv, 2, 1), v = split_heads(qkv, 2, 2);
        return readout(merge_heads(bmm(softmax(bmm(q, k, true)), v), 2), 114);
    });
    Tensor seq = rand_param({2, 6, 3}, 21);
    check("unfold_causal", {{"seq", seq}}, [&] { return readout(unfold_causal(seq, 4, 3), 115); });
    Tensor logits = rand_param({2, 4}, 22, 2.0);
    const std::vector<int> labels{1, 3};
    check("cross_entropy on random 2x4 logits", {{"logits", logits}}, [&] { return cross_entropy(logits, labels); });
    const std::vector<std::vector<bool>> mask{{true, false, true}, {false, true, false}};
    check("masked_mse", {{"a", a}, {"b", b}}, [&] { return masked_mse(a, b, mask); });
}

TEST_CASE("cross_entropy") {
    SUBCASE("uniform logits over 4 classes give ln 4") {
        const std::vector<int> y{0, 1, 2, 3};
        CHECK(std::abs(cross_entropy(Tensor::zeros({4, 4}), y).item() - std::log(4.0)) <= 1e-12);
    }
    SUBCASE("saturated correct logit gives ~0 loss without overflow") {
        const std::vector<int> y{2};
        const double l = cross_entropy(Tensor::from({1, 4}, {0, 0, 1000, 0}), y).item();
        CHECK(std::isfinite(l));
        CHECK(l < 1e-12);
    }
    SUBCASE("label out of range") {
        const std::vector<int> y{4};
        CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 4}), y), ValidationError);
    }
}

TEST_CASE("masked_mse") {
    SUBCASE("pred = target gives 0") {
        const Tensor p = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
        CHECK(masked_mse(p, p, {{true, true}}).item() == 0.0);
    }
    SUBCASE("direct arithmetic: one masked patch with errors 0.1") {
        const Tensor p = Tensor::from({1, 2, 4}, {0.1, 0.1, 0.1, 0.1, 9, 9, 9, 9});
        const Tensor t = Tensor::zeros({1, 2, 4});
        CHECK(masked_mse(p, t, {{true, false}}).item() == doctest::Approx(0.01).epsilon(1e-12));
    }
    SUBCASE("perturbing an unmasked patch leaves loss and gradient unchanged") {
        Tensor p = Tensor::from({1, 2, 4}, testutil::random_values(8, 4), true);
        const Tensor t = Tensor::from({1, 2, 4}, testutil::random_values(8, 5));
        const double before = masked_mse(p, t, {{true, false}}).item();
        p.data()[5] += 3.0;
        masked_mse(p, t, {{true, false}}).backward();
        CHECK(masked_mse(p, t, {{true, false}}).item() == before);
        for (int i = 4; i < 8; ++i) CHECK(p.grad()[i] == 0.0);
    }
    SUBCASE("empty mask") {
        const Tensor p = Tensor::zeros({1, 2, 2});
        CHECK_THROWS_AS(masked_mse(p, p, {{false, false}}), ValidationError);
    }
}

TEST_CASE("adamw_step") {
    SUBCASE("hand-evaluated first step") {
        Tensor th = Tensor::scalar(1.0, true);
        ParamList ps{{"theta", th}};
        AdamW opt(ps, AdamWConfig{0.1, 0.0});
        th.grad()[0] = 1.0;
        opt.step(ps);
        // m_hat = 1, v_hat = 1 -> 1 - 0.1 * 1 / (1 + 1e-8)
        CHECK(th.data()[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
        CHECK(th.data()[0] == doctest::Approx(0.9).epsilon(1e-7));
    }
    SUBCASE("zero gradient, no decay leaves theta unchanged") {
        Tensor th = Tensor::scalar(0.37, true);
        ParamList ps{{"theta", th}};
        AdamW opt(ps, AdamWConfig{0.1, 0.0});
        th.grad()[0] = 0.0;
        opt.step(ps);
        CHECK(th.data()[0] == 0.37);
    }
    SUBCASE("decoupled decay") {
        Tensor th = Tensor::scalar(2.0, true);
        ParamList ps{{"theta", th}};
        AdamW opt(ps, AdamWConfig{0.1, 0.1});
        th.grad()[0] = 0.0;
        opt.step(ps);
        CHECK(th.data()[0] == doctest::Approx(2.0 * (1.0 - 0.01)).epsilon(1e-15));
    }
    SUBCASE("missing gradient") {
        Tensor th = Tensor::scalar(1.0, true);
        ParamList ps{{"theta", th}};
        AdamW opt(ps);
        CHECK_THROWS_AS(opt.step(ps), ValidationError);
    }
}

TEST_CASE("checkpoint round-trips parameters and optimizer state bit-exactly") {
    Tensor w = rand_param({3, 4}, 30);
    Tensor b = rand_param({3}, 31);
    ParamList ps{{"w", w}, {"b", b}};
    AdamW opt(ps, AdamWConfig{0.01, 0.02});
    for (int i = 0; i < 3; ++i) {
        zero_grad(ps);
        sum(mul(w, w)).backward();
        b.grad()[0] = 0.3;
        opt.step(ps);
    }
    Checkpoint c;
    c.kind = "test";
    c.config = {{"k", 1}};
    c.params = ps;
    c.optimizer = opt.state();
    c.trace = {{"loss", {1.0, 0.5}}};
    testutil::TempDir dir("ckpt");
    save_checkpoint(c, dir.path / "m.ckpt");
    const Checkpoint r = load_checkpoint(dir.path / "m.ckpt");
    CHECK(r.kind == "test");
    CHECK(r.config == c.config);
    CHECK(r.trace == c.trace);
    CHECK(checksum(r.params) == checksum(ps));
    REQUIRE(r.optimizer.has_value());
    CHECK(r.optimizer->step == 3);
    CHECK(r.optimizer->m == opt.state().m);
    CHECK(r.optimizer->v == opt.state().v);
    CHECK(r.optimizer->config.weight_decay == 0.02);

    SUBCASE("format version mismatch is reported") {
        auto j = checkpoint_to_json(c);
        j["format_version"] = 99;
        CHECK_THROWS_AS(checkpoint_from_json(j), FormatError);
    }
}
