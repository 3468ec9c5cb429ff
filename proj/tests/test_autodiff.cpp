#include <gtest/gtest.h>

#include "dbrn/autodiff/image_ops.hpp"
#include "dbrn/autodiff/ops.hpp"
#include "dbrn/core/rng.hpp"
#include "support/gradcheck.hpp"

using namespace dbrn;
using dbrn::testing::gradcheck;

namespace {

Tensor<double> randn(Shape s, Rng& rng, double scl = 1.0) {
    Tensor<double> t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scl;
    return t;
}

Var<double> rand_leaf(Shape s, Rng& rng, double scl = 1.0) {
    return Var<double>::leaf(randn(std::move(s), rng, scl), true);
}

} // namespace

TEST(Autodiff, ElementwiseChain) {
    Rng rng(1);
    auto a = rand_leaf({3, 4}, rng);
    auto b = rand_leaf({3, 4}, rng);
    auto f = [&] {
        auto s = mul(sigmoid(a), tanh_(b));
        auto t = add(s, scale(sub(a, b), 0.3));
        return mean_all(mul(t, t));
    };
    auto res = gradcheck(f, {a, b});
    EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
}

TEST(Autodiff, ExpLogDivPow) {
    Rng rng(2);
    auto a = rand_leaf({2, 5}, rng, 0.3);
    auto b = rand_leaf({2, 5}, rng, 0.3);
    auto f = [&] {
        auto ea = exp_(a);                                   // > 0
        auto lb = log_(add_scalar(mul(b, b), 1.5));          // log of positive
        auto d = div(ea, add_scalar(mul(b, b), 1.0));
        auto p = powc(add_scalar(mul(a, a), 0.5), 1.7);
        return sum_all(add(add(d, p), lb));
    };
    auto res = gradcheck(f, {a, b});
    EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
}

TEST(Autodiff, PowcZeroExponentIsConstant) {
    auto x = Var<double>::leaf(Tensor<double>({3}, 2.0), true);
    auto y = sum_all(powc(x, 0.0));
    EXPECT_DOUBLE_EQ(y.val()[0], 3.0);
    backward(y);
    for (int64_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 0.0);
}

TEST(Autodiff, LinearAndBias) {
    Rng rng(3);
    auto x = rand_leaf({2, 3, 4}, rng);
    auto w = rand_leaf({4, 5}, rng, 0.5);
    auto b = rand_leaf({5}, rng, 0.1);
    auto f = [&] { return mean_all(gelu(linear(x, w, b))); };
    auto res = gradcheck(f, {x, w, b});
    EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
}

TEST(Autodiff, BatchedMatmulBothTransposes) {
    Rng rng(4);
    auto a = rand_leaf({2, 3, 4}, rng);
    auto b = rand_leaf({2, 4, 3}, rng);
    {
        auto f = [&] { return mean_all(bmm(a, b)); };
        auto res = gradcheck(f, {a, b});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
    {
        auto b2 = rand_leaf({2, 3, 4}, rng);
        auto f = [&] { return mean_all(bmm(a, b2, false, true)); };
        auto res = gradcheck(f, {a, b2});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
    {
        auto a2 = rand_leaf({2, 4, 3}, rng);
        auto f = [&] { return mean_all(bmm(a2, b, true, false)); };
        auto res = gradcheck(f, {a2, b});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
}

TEST(Autodiff, SoftmaxLastDim) {
    Rng rng(5);
    auto x = rand_leaf({4, 6}, rng);
    auto wsum = Tensor<double>({4, 6});
    Rng r2(6);
    for (int64_t i = 0; i < wsum.numel(); ++i) wsum[i] = r2.normal();
    auto f = [&] { return weighted_sum(softmax_lastdim(x), wsum); };
    auto res = gradcheck(f, {x});
    EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;

    // rows sum to one
    auto p = softmax_lastdim(x);
    for (int64_t r = 0; r < 4; ++r) {
        double s = 0;
        for (int64_t c = 0; c < 6; ++c) s += p.val().at(r, c);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Autodiff, LogSoftmaxNCHW) {
    Rng rng(7);
    auto x = rand_leaf({2, 2, 3, 3}, rng);
    Tensor<double> w({2, 2, 3, 3});
    Rng r2(8);
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = r2.normal();
    auto f = [&] { return weighted_sum(log_softmax_nchw(x), w); };
    auto res = gradcheck(f, {x});
    EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
}

TEST(Autodiff, LayerNorm) {
    Rng rng(9);
    auto x = rand_leaf({3, 4, 8}, rng);
    auto g = rand_leaf({8}, rng, 0.5);
    auto b = rand_leaf({8}, rng, 0.2);
    auto f = [&] { return mean_all(mul(layernorm(x, g, b), layernorm(x, g, b))); };
    auto res = gradcheck(f, {x, g, b});
    EXPECT_LT(res.max_rel_err, 1e-5) << res.worst;
}

TEST(Autodiff, BatchNormTrainAndEval) {
    Rng rng(10);
    auto x = rand_leaf({2, 3, 4, 4}, rng);
    auto g = rand_leaf({3}, rng, 0.5);
    auto b = rand_leaf({3}, rng, 0.2);
    Tensor<double> rm({3}, 0.0), rv({3}, 1.0);
    {
        auto f = [&] {
            Tensor<double> m = rm, v = rv; // keep side effects out of the closure re-runs
            auto y = batchnorm2d(x, g, b, m, v, true);
            return mean_all(mul(y, y));
        };
        auto res = gradcheck(f, {x, g, b});
        EXPECT_LT(res.max_rel_err, 1e-5) << res.worst;
    }
    {
        Tensor<double> m({3}, 0.3), v({3}, 2.0);
        auto f = [&] {
            auto y = batchnorm2d(x, g, b, m, v, false);
            return mean_all(mul(y, y));
        };
        auto res = gradcheck(f, {x, g, b});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
}

TEST(Autodiff, Conv2dStridePad) {
    Rng rng(11);
    auto x = rand_leaf({2, 3, 6, 6}, rng);
    auto w = rand_leaf({4, 3, 3, 3}, rng, 0.4);
    auto b = rand_leaf({4}, rng, 0.1);
    {
        auto f = [&] { return mean_all(conv2d(x, w, b, 1, 1)); };
        auto res = gradcheck(f, {x, w, b});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
    {
        auto f = [&] { return mean_all(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); };
        auto res = gradcheck(f, {x, w, b});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
    // shape: (6 + 2*1 - 3)/2 + 1 = 3
    auto y = conv2d(x, w, b, 2, 1);
    EXPECT_EQ(y.shape(), (Shape{2, 4, 3, 3}));
}

TEST(Autodiff, UpsampleBilinearAndArea) {
    Rng rng(12);
    auto x = rand_leaf({1, 2, 4, 4}, rng);
    Tensor<double> w({1, 2, 8, 8});
    Rng r2(13);
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = r2.normal();
    {
        auto f = [&] { return weighted_sum(upsample_bilinear(x, 8, 8), w); };
        auto res = gradcheck(f, {x});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
    {
        auto f = [&] { return mean_all(mul(downsample_area(x, 2), downsample_area(x, 2))); };
        auto res = gradcheck(f, {x});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
    // area downsample of a constant is the constant
    auto c = Var<double>::constant(Tensor<double>({1, 1, 4, 4}, 0.7));
    auto d = downsample_area(c, 2);
    for (int64_t i = 0; i < d.numel(); ++i) EXPECT_NEAR(d.val()[i], 0.7, 1e-12);
}

TEST(Autodiff, SeparableBlur) {
    Rng rng(14);
    auto x = rand_leaf({1, 1, 7, 7}, rng);
    auto kern = std::make_shared<std::vector<double>>(std::vector<double>{0.25, 0.5, 0.25});
    auto f = [&] { return mean_all(mul(separable_blur_valid(x, kern), separable_blur_valid(x, kern))); };
    auto res = gradcheck(f, {x});
    EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    auto y = separable_blur_valid(x, kern);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
}

TEST(Autodiff, GatherConcatSliceTiled) {
    Rng rng(15);
    auto x = rand_leaf({2, 3, 2, 2}, rng);
    auto y = rand_leaf({2, 2, 2, 2}, rng);
    auto bias = rand_leaf({4}, rng);
    {
        auto idx = std::make_shared<std::vector<int64_t>>();
        for (int64_t i = x.numel() - 1; i >= 0; --i) idx->push_back(i);
        auto f = [&] { return mean_all(mul(gather_flat(x, idx, {24}), gather_flat(x, idx, {24}))); };
        auto res = gradcheck(f, {x});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
    {
        auto f = [&] {
            auto c = concat_channels<double>({x, y});
            auto s = slice_channels(c, 1, 4);
            return mean_all(mul(s, s));
        };
        auto res = gradcheck(f, {x, y});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
    {
        auto f = [&] {
            auto t = add_tiled(reshape(x, {6, 4}), bias, 6);
            return mean_all(mul(t, t));
        };
        auto res = gradcheck(f, {x, bias});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
    {
        auto a = rand_leaf({2, 3}, rng);
        auto b = rand_leaf({2, 2}, rng);
        auto f = [&] {
            auto c = concat_lastdim(a, b);
            return mean_all(mul(c, c));
        };
        auto res = gradcheck(f, {a, b});
        EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
    }
}

TEST(Autodiff, DropoutDeterminismAndScale) {
    Rng rng(77);
    auto x = Var<double>::leaf(Tensor<double>({1000}, 1.0), true);
    Rng d1(5);
    auto y1 = dropout(x, 0.4, d1);
    Rng d2(5);
    auto y2 = dropout(x, 0.4, d2);
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y1.val()[i], y2.val()[i]);
    // kept values are scaled by 1/(1-p); expectation preserved
    double mean = y1.val().mean();
    EXPECT_NEAR(mean, 1.0, 0.15);
}

TEST(Autodiff, NoGradModeBuildsNoGraph) {
    auto w = Var<double>::leaf(Tensor<double>({2, 2}, 1.0), true);
    NoGradGuard ng;
    auto x = Var<double>::constant(Tensor<double>({3, 2}, 0.5));
    auto y = linear(x, w);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Autodiff, DetachStopsGradient) {
    auto x = Var<double>::leaf(Tensor<double>({4}, 2.0), true);
    auto y = sum_all(mul(detach(x), x)); // d/dx = detached value = 2
    backward(y);
    for (int64_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0);
}
