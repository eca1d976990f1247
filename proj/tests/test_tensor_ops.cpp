#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "idg/nn.hpp"
#include "idg/tape.hpp"

using idg::Rng;
using idg::Shape;
using idg::Tape;
using idg::Tensor;
namespace ops = idg::ops;
using idg::testing::random_tensor;

namespace {

/// Direct-loop convolution oracle (2D).
Tensor<double> conv2d_direct(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                             std::int64_t stride, std::int64_t pad) {
    const auto N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const auto Ho = (H + 2 * pad - kh) / stride + 1;
    const auto Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor<double> y({N, Cout, Ho, Wo});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t oh = 0; oh < Ho; ++oh)
                for (std::int64_t ow = 0; ow < Wo; ++ow) {
                    double acc = b.numel() ? b[co] : 0.0;
                    for (std::int64_t ci = 0; ci < Cin; ++ci)
                        for (std::int64_t u = 0; u < kh; ++u)
                            for (std::int64_t v = 0; v < kw; ++v) {
                                const std::int64_t ih = oh * stride - pad + u;
                                const std::int64_t iw = ow * stride - pad + v;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x[((n * Cin + ci) * H + ih) * W + iw] *
                                       w[((co * Cin + ci) * kh + u) * kw + v];
                            }
                    y[((n * Cout + co) * Ho + oh) * Wo + ow] = acc;
                }
    return y;
}

Tensor<double> conv1d_direct(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                             std::int64_t stride, std::int64_t pad) {
    const auto N = x.dim(0), Cin = x.dim(1), L = x.dim(2);
    const auto Cout = w.dim(0), k = w.dim(2);
    const auto Lo = (L + 2 * pad - k) / stride + 1;
    Tensor<double> y({N, Cout, Lo});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t o = 0; o < Lo; ++o) {
                double acc = b.numel() ? b[co] : 0.0;
                for (std::int64_t ci = 0; ci < Cin; ++ci)
                    for (std::int64_t u = 0; u < k; ++u) {
                        const std::int64_t i = o * stride - pad + u;
                        if (i < 0 || i >= L) continue;
                        acc += x[(n * Cin + ci) * L + i] * w[(co * Cin + ci) * k + u];
                    }
                y[(n * Cout + co) * Lo + o] = acc;
            }
    return y;
}

}  // namespace

TEST_CASE("fully-connected with identity weights is the identity") {
    Tape<double> t;
    const int x = t.leaf(Tensor<double>({1, 3}, {1, 2, 3}));
    Tensor<double> eye({3, 3});
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    const int w = t.leaf(std::move(eye));
    const int b = t.leaf(Tensor<double>({3}));
    const int y = ops::linear(t, x, w, b);
    CHECK(t.value(y).values() == std::vector<double>{1, 2, 3});
}

TEST_CASE("softmax of uniform logits is 1/C and cross-entropy is ln C") {
    for (int C : {2, 5, 11}) {
        Tape<double> t;
        const int x = t.leaf(Tensor<double>::full({1, C}, 0.7));
        const int s = ops::softmax(t, x);
        for (std::int64_t i = 0; i < C; ++i) CHECK(t.value(s)[i] == doctest::Approx(1.0 / C));
        const int ce = ops::cross_entropy(t, x, {0});
        CHECK(t.value(ce)[0] == doctest::Approx(std::log(double(C))));
    }
}

TEST_CASE("conv1d with a one-hot kernel shifts its input") {
    Tape<double> t;
    Rng rng(3);
    Tensor<double> x({1, 1, 8});
    rng.fill_normal(x);
    Tensor<double> w({1, 1, 5});
    w[0] = 1.0;  // tap at offset 0, pad 2 -> output[o] = x[o-2]
    const int xid = t.leaf(x);
    const int wid = t.leaf(w);
    const int y = ops::conv1d(t, xid, wid, -1, 1, 2);
    const auto& yv = t.value(y);
    REQUIRE(yv.shape() == Shape{1, 1, 8});
    CHECK(yv[0] == 0.0);
    CHECK(yv[1] == 0.0);
    for (int o = 2; o < 8; ++o) CHECK(yv[o] == doctest::Approx(x[o - 2]));
}

TEST_CASE("im2col convolution path matches the direct-loop oracle") {
    Rng rng(11);
    for (auto [stride, pad] : {std::pair<std::int64_t, std::int64_t>{1, 0}, {1, 2}, {2, 1}, {3, 0}}) {
        Tensor<double> x = random_tensor(rng, {2, 3, 9, 7});
        Tensor<double> w = random_tensor(rng, {4, 3, 3, 3});
        Tensor<double> b = random_tensor(rng, {4});
        Tape<double> t;
        const int y = ops::conv2d(t, t.leaf(x), t.leaf(w), t.leaf(b), stride, pad);
        Tensor<double> ref = conv2d_direct(x, w, b, stride, pad);
        REQUIRE(t.value(y).shape() == ref.shape());
        for (std::int64_t i = 0; i < ref.numel(); ++i) {
            CHECK(t.value(y)[i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
    }
    for (auto [stride, pad] : {std::pair<std::int64_t, std::int64_t>{1, 2}, {2, 2}}) {
        Tensor<double> x = random_tensor(rng, {2, 3, 11});
        Tensor<double> w = random_tensor(rng, {4, 3, 5});
        Tensor<double> b = random_tensor(rng, {4});
        Tape<double> t;
        const int y = ops::conv1d(t, t.leaf(x), t.leaf(w), t.leaf(b), stride, pad);
        Tensor<double> ref = conv1d_direct(x, w, b, stride, pad);
        REQUIRE(t.value(y).shape() == ref.shape());
        for (std::int64_t i = 0; i < ref.numel(); ++i) {
            CHECK(t.value(y)[i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("attention weight rows sum to one: all-ones values reproduce ones") {
    Rng rng(21);
    Tape<double> t;
    const int q = t.leaf(random_tensor(rng, {2, 4, 6}));
    const int k = t.leaf(random_tensor(rng, {2, 4, 6}));
    const int v = t.leaf(Tensor<double>::full({2, 4, 6}, 1.0));
    const int y = ops::attention(t, q, k, v);
    for (std::int64_t i = 0; i < t.value(y).numel(); ++i) CHECK(t.value(y)[i] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("dropout is identity in eval mode and unbiased-scaled in train mode") {
    Rng data_rng(4);
    Tensor<double> x = random_tensor(data_rng, {64, 32});
    {
        Tape<double> t;
        Rng rng(9);
        const int y = ops::dropout(t, t.leaf(x), 0.5, false, rng);
        CHECK(t.value(y) == x);
    }
    {
        Tape<double> t;
        Rng rng(9);
        const int y = ops::dropout(t, t.leaf(x), 0.5, true, rng);
        std::int64_t zeros = 0;
        for (std::int64_t i = 0; i < t.value(y).numel(); ++i) {
            const double v = t.value(y)[i];
            if (v == 0.0) {
                ++zeros;
            } else {
                CHECK(v == doctest::Approx(2.0 * x[i]));
            }
        }
        CHECK(zeros > 700);
        CHECK(zeros < 1350);
    }
}

TEST_CASE("batch norm on constant input: train equals eval once stats converge") {
    idg::ParamStore<double> ps;
    idg::nn::BatchNorm<double> bn(ps, "bn", 3);
    Tensor<double> x = Tensor<double>::full({4, 3, 5}, 2.5);
    // run train-mode forwards until running stats converge to (2.5, 0)
    for (int i = 0; i < 400; ++i) {
        Tape<double> t;
        bn.forward(t, t.leaf(x), idg::Mode::train);
    }
    Tape<double> t;
    const int ytr = bn.forward(t, t.leaf(x), idg::Mode::train);
    const int yev = bn.forward(t, t.leaf(x), idg::Mode::eval);
    for (std::int64_t i = 0; i < t.value(ytr).numel(); ++i) {
        CHECK(t.value(ytr)[i] == doctest::Approx(t.value(yev)[i]).epsilon(1e-9));
        CHECK(t.value(ytr)[i] == doctest::Approx(0.0));
    }
}

TEST_CASE("forward and backward are bit-deterministic") {
    Rng rng(31);
    Tensor<double> x = random_tensor(rng, {2, 3, 8, 8});
    Tensor<double> w = random_tensor(rng, {4, 3, 3, 3});
    auto run = [&]() {
        Tape<double> t;
        const int xid = t.leaf(x, true);
        const int wid = t.leaf(w, true);
        const int y = ops::relu(t, ops::conv2d(t, xid, wid, -1, 1, 1));
        const int loss = ops::sum(t, ops::mul(t, y, y));
        t.backward(loss);
        return std::make_tuple(t.value(loss)[0], t.grad(xid).values(), t.grad(wid).values());
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(std::get<0>(r1) == std::get<0>(r2));
    CHECK(std::get<1>(r1) == std::get<1>(r2));
    CHECK(std::get<2>(r1) == std::get<2>(r2));
}

TEST_CASE("shape mismatches name the primitive and the dims") {
    Tape<double> t;
    const int a = t.leaf(Tensor<double>({2, 3}));
    const int b = t.leaf(Tensor<double>({3, 2}));
    CHECK_THROWS_WITH_AS(ops::add(t, a, b), doctest::Contains("add"), std::invalid_argument);
    const int x = t.leaf(Tensor<double>({1, 2, 4, 4}));
    const int w = t.leaf(Tensor<double>({1, 3, 3, 3}));
    CHECK_THROWS_WITH_AS(ops::conv2d(t, x, w, -1), doctest::Contains("conv2d"), std::invalid_argument);
    CHECK_THROWS(ops::maxpool2d(t, x, 3));  // 4 not divisible by 3
}

TEST_CASE("non-finite trap reports the offending primitive") {
    Tape<double> t;
    t.trap_non_finite = true;
    const int a = t.leaf(Tensor<double>({2}, {1.0, 0.0}));
    const int b = t.leaf(Tensor<double>({2}, {std::numeric_limits<double>::infinity(), 1.0}));
    CHECK_THROWS_WITH_AS(ops::mul(t, a, b), doctest::Contains("mul"), std::runtime_error);
}

TEST_CASE("eval-mode inference is batch-size invariant") {
    idg::ParamStore<double> ps;
    Rng rng(77);
    idg::nn::Conv2d<double> conv(ps, "c", 3, 4, 3, 1, 1, rng);
    idg::nn::BatchNorm<double> bn(ps, "bn", 4);
    Tensor<double> batch = random_tensor(rng, {5, 3, 6, 6});

    auto forward = [&](const Tensor<double>& in) {
        Tape<double> t;
        return t.value(bn.forward(t, conv.forward(t, t.leaf(in)), idg::Mode::eval));
    };
    Tensor<double> all = forward(batch);
    // single-sample forward of sample 2 must equal its slice of the batch
    Tensor<double> one({1, 3, 6, 6});
    std::copy(batch.data() + 2 * 3 * 36, batch.data() + 3 * 3 * 36, one.data());
    Tensor<double> y1 = forward(one);
    for (std::int64_t i = 0; i < y1.numel(); ++i) {
        CHECK(y1[i] == doctest::Approx(all[2 * 4 * 36 + i]).epsilon(1e-12));
    }
}
