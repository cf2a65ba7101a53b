#include "desnow/ops.hpp"
#include "desnow/random.hpp"
#include "desnow/tensor_io.hpp"
#include "support/fd.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <numeric>
#include <sstream>

using namespace desnow;
using desnow::testing::max_grad_error;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1)
{
    Philox rng(seed);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.mutable_values())
        v = rng.uniform(lo, hi);
    return t;
}

ConvSpec spec(int kh, int kw, int dilation = 1)
{
    ConvSpec s;
    s.kernel_h = kh;
    s.kernel_w = kw;
    s.dilation = dilation;
    return s;
}

} // namespace

TEST(Tensor, ShapeAndFill)
{
    Tensor<float> t(Shape{2, 3, 4}, 1.5f);
    EXPECT_EQ(t.numel(), 24u);
    EXPECT_EQ(t.rank(), 3u);
    EXPECT_EQ(t.dim(2), 4);
    for (float v : t.values())
        EXPECT_EQ(v, 1.5f);
    EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
    EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, CloneIsDeep)
{
    Tensor<float> a(Shape{3}, 1.0f);
    auto b = a.clone();
    b.mutable_values()[0] = 7;
    EXPECT_EQ(a[0], 1.0f);
    auto c = a;
    c.mutable_values()[1] = 5;
    EXPECT_EQ(a[1], 5.0f);
}

TEST(Tape, QuadraticGradient)
{
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> w(Shape{1}, std::vector<double>{3});
    w.set_requires_grad();
    auto loss = sum(w * w);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
}

TEST(Tape, PreluChainRule)
{
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> w(Shape{1}, std::vector<double>{-2});
    Tensor<double> s(Shape{1}, std::vector<double>{0.5});
    w.set_requires_grad();
    s.set_requires_grad();
    auto loss = sum(prelu(w, s));
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(w.grad()[0], 0.5);
    EXPECT_DOUBLE_EQ(s.grad()[0], -2.0);
}

TEST(Tape, RejectsNonScalarAndUnrecordedLoss)
{
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> w(Shape{2}, 1.0);
    w.set_requires_grad();
    auto y = w * w;
    EXPECT_THROW(tape.backward(y), GraphError);
    Tensor<double> lone(Shape{1}, 1.0);
    EXPECT_THROW(tape.backward(lone), GraphError);
    auto loss = sum(y);
    tape.reset();
    EXPECT_THROW(tape.backward(loss), GraphError);
}

TEST(Tape, FanOutAccumulates)
{
    // loss = sum(a*b) + sum(a*a): d/da = b + 2a, checked against the closed form.
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto a = random_tensor({4}, 1);
    auto b = random_tensor({4}, 2);
    a.set_requires_grad();
    auto loss = sum(a * b) + sum(a * a);
    tape.backward(loss);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(a.grad()[i], b[i] + 2 * a[i], 1e-12);
}

TEST(Tape, NoGradScopeRecordsNothing)
{
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> w(Shape{2}, 1.0);
    w.set_requires_grad();
    {
        NoGradScope<double> off;
        auto y = w * w;
        EXPECT_EQ(tape.size(), 0u);
    }
    auto y = w * w;
    EXPECT_EQ(tape.size(), 1u);
}

TEST(Tape, RandomGraphMatchesFiniteDifferences)
{
    auto x = random_tensor({1, 2, 5, 5}, 3);
    auto w = random_tensor({3, 2, 3, 3}, 4);
    auto b = random_tensor({3}, 5);
    auto s = random_tensor({3}, 6, 0.1, 0.4);
    auto f = [&] { return sum_squares(prelu(conv2d(x, w, b, spec(3, 3)), s) * 0.5); };
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        for (auto* t : {&x, &w, &b, &s})
            t->set_requires_grad();
        auto loss = f();
        tape.backward(loss);
    }
    auto scalar = [&] { return f().item(); };
    for (auto* t : {&x, &w, &b, &s})
        EXPECT_LT(max_grad_error(scalar, *t), 1e-4);
}

TEST(Conv2d, PointwiseScale)
{
    Tensor<float> x(Shape{1, 1, 3, 3}, 1.0f);
    Tensor<float> w(Shape{1, 1, 1, 1}, 2.0f);
    Tensor<float> b(Shape{1}, 0.0f);
    const auto y = conv2d(x, w, b, spec(1, 1));
    for (float v : y.values())
        EXPECT_EQ(v, 2.0f);
}

TEST(Conv2d, DeltaKernelIsIdentity)
{
    Tensor<float> x(Shape{1, 1, 3, 3});
    x.mutable_values()[4] = 1;
    Tensor<float> w(Shape{1, 1, 3, 3});
    w.mutable_values()[4] = 1;
    auto y = conv2d(x, w, Tensor<float>(Shape{1}), spec(3, 3));
    EXPECT_TRUE(std::equal(y.values().begin(), y.values().end(), x.values().begin()));
}

TEST(Conv2d, DilatedSupport)
{
    Tensor<float> x(Shape{1, 1, 5, 5});
    x.mutable_values()[12] = 1;
    Tensor<float> w(Shape{1, 1, 3, 3}, 1.0f);
    auto y = conv2d(x, w, Tensor<float>(Shape{1}), spec(3, 3, 2));
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            const bool on = (i == 0 || i == 2 || i == 4) && (j == 0 || j == 2 || j == 4);
            EXPECT_EQ(y[static_cast<std::size_t>(i * 5 + j)], on ? 1.0f : 0.0f) << i << "," << j;
        }
}

// Reference values from an independent framework convolution (zero padding
// 2, dilation 2) with the same generated inputs, in float64.
namespace conv_oracle {

Tensor<double> input()
{
    Tensor<double> x(Shape{1, 2, 5, 5});
    for (int k = 0; k < 50; ++k)
        x.mutable_values()[static_cast<std::size_t>(k)] = (k * 7 % 13) / 13.0 - 0.5;
    return x;
}

Tensor<double> weights()
{
    Tensor<double> w(Shape{3, 2, 3, 3});
    for (int k = 0; k < 54; ++k)
        w.mutable_values()[static_cast<std::size_t>(k)] = (k * 5 % 11) / 11.0 - 0.5;
    return w;
}

const std::vector<double> out = {
    0.06503496503496506, -0.2461538461538462, 0.005594405594405535, 0.20839160839160842, 0.3202797202797203,
    0.10000000000000002, 0.10699300699300696, 0.019580419580419603, 0.08601398601398604, 0.10699300699300703,
    -0.036363636363636404, 0.6034965034965035, 0.34825174825174826, 0.03356643356643357, 0.01958041958041956,
    0.26433566433566436, -0.22517482517482515, 0.38671328671328664, 0.10000000000000005, 0.08601398601398598,
    -0.18321678321678322, -0.08181818181818182, 0.22937062937062938, 0.07552447552447547, -0.029370629370629314,
    0.24755244755244754, -0.2664335664335664, -0.43776223776223777, 0.14965034965034968, -0.29790209790209793,
    -0.18601398601398603, -0.19999999999999996, -0.44475524475524486, 0.04825174825174822, -0.4902097902097902,
    -0.17202797202797204, -0.24545454545454556, 0.18111888111888114, -0.12307692307692313, 0.33146853146853145,
    -0.060139860139860196, -0.10909090909090914, -0.15454545454545457, -0.13006993006993006, -0.165034965034965,
    -0.30489510489510496, 0.05524475524475525, -0.15104895104895105, -0.4412587412587412, -0.5671328671328673,
    0.30699300699300697, 0.5902097902097903, 0.45734265734265733, 0.04475524475524467, 0.11468531468531462,
    0.40489510489510483, 0.36993006993006994, 0.4293706293706293, 0.3489510489510489, 0.32797202797202796,
    0.14615384615384613, -0.10209790209790215, 0.006293706293706236, 0.4433566433566434, 0.4433566433566434,
    0.3, 0.3069930069930069, 0.21958041958041957, 0.28601398601398603, 0.306993006993007,
    0.33496503496503494, 0.5692307692307693, 0.4608391608391608, 0.0727272727272727, 0.002797202797202747};

// Gradients of sum(out * g) with g[k] = (3k mod 7) / 7.
const std::vector<double> grad_x = {
    -0.7272727272727272, -0.3896103896103895, -0.16233766233766234, -0.025974025974025983, -0.4025974025974025,
    -0.4025974025974025, -0.20129870129870128, -0.7987012987012988, -0.2272727272727273, 0.1688311688311688,
    -0.11688311688311691, -0.8571428571428571, -0.2987012987012985, -0.7662337662337662, -0.47402597402597396,
    -0.1038961038961038, -0.5649350649350648, 0.2662337662337662, -0.16233766233766234, -0.857142857142857,
    0.27272727272727276, -0.551948051948052, -0.5649350649350648, -0.1363636363636363, -0.19480519480519476,
    -0.23376623376623373, 0.025974025974025955, 0.26623376623376604, -0.3246753246753247, -0.025974025974025934,
    0.06493506493506485, 0.27922077922077926, -0.4610389610389609, -0.603896103896104, 0.3766233766233765,
    0.01298701298701295, -0.1818181818181818, -0.2857142857142856, -0.09090909090909091, -0.16233766233766234,
    -0.3506493506493506, -0.2272727272727273, 0.461038961038961, 0.3181818181818182, -0.36363636363636354,
    -0.14285714285714277, -0.3831168831168831, -0.6428571428571428, 0.3181818181818181, 0.2727272727272727};

const std::vector<double> grad_w = {
    0.15384615384615388, -0.7692307692307692, -0.0439560439560439, -0.4175824175824174, -0.2527472527472525,
    -0.36263736263736274, -0.32417582417582413, -0.18681318681318673, -0.043956043956043966, -0.12087912087912081,
    -0.29670329670329665, -0.18681318681318676, -0.5274725274725274, -0.6593406593406593, -0.29670329670329654,
    0.598901098901099, 0.010989010989011089, -0.45054945054945045, -0.379120879120879, -0.4945054945054944,
    -0.6813186813186813, -0.5384615384615383, -0.4780219780219779, -0.10439560439560436, -0.14285714285714277,
    -0.24725274725274715, -0.19780219780219774, -0.31318681318681313, -0.15384615384615377, 0.05494505494505503,
    0.2197802197802199, -0.5219780219780219, -0.7087912087912086, 0.12087912087912095, 0.28021978021978033,
    0.19780219780219788, -0.21978021978021964, -0.25824175824175816, -0.2417582417582417, -0.39010989010989006,
    -0.35714285714285704, -0.07692307692307679, 0.38461538461538475, 0.1923076923076924, -0.2747252747252747,
    0.18681318681318684, -0.5879120879120878, -0.7032967032967032, -0.30219780219780207, -0.5769230769230768,
    -0.3516483516483515, -0.47252747252747246, -0.412087912087912, 5.551115123125783e-17};

const std::vector<double> grad_b = {10.571428571428571, 10.428571428571427, 11.285714285714285};

} // namespace conv_oracle

template <class T>
void check_conv_oracle(double tol)
{
    auto x = conv_oracle::input().cast<T>();
    auto w = conv_oracle::weights().cast<T>();
    Tensor<T> b(Shape{3}, std::vector<T>{T(0.1), T(-0.2), T(0.3)});
    Tensor<T> g(Shape{1, 3, 5, 5});
    for (int k = 0; k < 75; ++k)
        g.mutable_values()[static_cast<std::size_t>(k)] = static_cast<T>((k * 3 % 7) / 7.0);
    Tape<T> tape;
    TapeScope<T> scope(tape);
    x.set_requires_grad();
    w.set_requires_grad();
    b.set_requires_grad();
    auto y = conv2d(x, w, b, spec(3, 3, 2));
    auto loss = sum(y * g);
    tape.backward(loss);
    for (std::size_t i = 0; i < conv_oracle::out.size(); ++i)
        EXPECT_NEAR(y[i], conv_oracle::out[i], tol) << i;
    for (std::size_t i = 0; i < conv_oracle::grad_x.size(); ++i)
        EXPECT_NEAR(x.grad()[i], conv_oracle::grad_x[i], tol) << i;
    for (std::size_t i = 0; i < conv_oracle::grad_w.size(); ++i)
        EXPECT_NEAR(w.grad()[i], conv_oracle::grad_w[i], tol) << i;
    for (std::size_t i = 0; i < conv_oracle::grad_b.size(); ++i)
        EXPECT_NEAR(b.grad()[i], conv_oracle::grad_b[i], tol * 10) << i;
}

TEST(Conv2d, MatchesReferenceDouble) { check_conv_oracle<double>(1e-12); }
TEST(Conv2d, MatchesReferenceFloat) { check_conv_oracle<float>(1e-5); }

TEST(Conv2d, WideAndNarrowPathsAgree)
{
    // Eight output channels go through im2col; the same kernels split into
    // two four-channel halves take the direct path.
    auto x = random_tensor({2, 5, 9, 7}, 10);
    auto w = random_tensor({8, 5, 3, 5}, 11);
    auto b = random_tensor({8}, 12);
    const auto s = spec(3, 5, 2);
    auto full = conv2d(x, w, b, s);
    auto rows = w.reshape({8, 75});
    auto half = [&](std::int64_t k) {
        return conv2d(x, slice_channels(rows, 4 * k, 4 * k + 4).reshape({4, 5, 3, 5}), slice_channels(b, 4 * k, 4 * k + 4), s);
    };
    auto lo = half(0), hi = half(1);
    auto joined = concat_channels<double>({lo, hi});
    for (std::size_t i = 0; i < full.numel(); ++i)
        EXPECT_NEAR(full[i], joined[i], 1e-12);
}

TEST(Conv2d, GradientsMatchFiniteDifferencesOnBothPaths)
{
    for (int out : {2, 6}) {
        auto x = random_tensor({2, 3, 6, 5}, 20 + out);
        auto w = random_tensor({out, 3, 5, 3}, 21 + out);
        auto b = random_tensor({out}, 22 + out);
        auto f = [&] { return sum_squares(conv2d(x, w, b, spec(5, 3, 2))); };
        Tape<double> tape;
        {
            TapeScope<double> scope(tape);
            for (auto* t : {&x, &w, &b})
                t->set_requires_grad();
            auto loss = f();
            tape.backward(loss);
        }
        auto scalar = [&] { return f().item(); };
        for (auto* t : {&x, &w, &b})
            EXPECT_LT(max_grad_error(scalar, *t), 1e-4) << "out " << out;
    }
}

TEST(Conv2d, SamePaddingPreservesExtentForEveryKernelAndDilation)
{
    auto x = random_tensor({1, 2, 9, 11}, 30);
    for (int k : {1, 3, 5, 7})
        for (int d : {1, 2, 4, 8, 16}) {
            auto w = random_tensor({3, 2, k, k}, 31);
            auto y = conv2d(x, w, Tensor<double>(Shape{3}), spec(k, k, d));
            EXPECT_EQ(y.shape(), (Shape{1, 3, 9, 11})) << k << " " << d;
        }
}

TEST(Conv2d, SeparablePairEqualsOuterProductKernel)
{
    for (int k : {5, 7}) {
        auto x = random_tensor({1, 1, 10, 10}, 40 + k);
        auto row = random_tensor({1, 1, 1, k}, 41 + k);
        auto col = random_tensor({1, 1, k, 1}, 42 + k);
        Tensor<double> full(Shape{1, 1, k, k});
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j)
                full.mutable_values()[static_cast<std::size_t>(i * k + j)] = col[static_cast<std::size_t>(i)] * row[static_cast<std::size_t>(j)];
        const Tensor<double> nob(Shape{1});
        auto two_pass = conv2d(conv2d(x, row, nob, spec(1, k)), col, nob, spec(k, 1));
        auto one_pass = conv2d(x, full, nob, spec(k, k));
        for (std::size_t i = 0; i < x.numel(); ++i)
            EXPECT_NEAR(two_pass[i], one_pass[i], 1e-5);
    }
}

TEST(Conv2d, Errors)
{
    auto x = random_tensor({1, 2, 4, 4}, 50);
    EXPECT_THROW(conv2d(x, random_tensor({1, 3, 3, 3}, 51), Tensor<double>(Shape{1}), spec(3, 3)), ShapeError);
    EXPECT_THROW(conv2d(x, random_tensor({1, 2, 3, 3}, 52), Tensor<double>(Shape{1}), spec(3, 3, 0)), ShapeError);
    EXPECT_THROW(conv2d(x, random_tensor({1, 2, 3, 3}, 53), Tensor<double>(Shape{2}), spec(3, 3)), ShapeError);
}

TEST(Maxpool, IdentityAndWindows)
{
    auto x = random_tensor({1, 2, 3, 4}, 60);
    auto same = maxpool2d(x, 1, 1);
    EXPECT_TRUE(std::equal(same.values().begin(), same.values().end(), x.values().begin()));

    Tensor<float> four(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    auto m = maxpool2d(four, 2, 2);
    EXPECT_EQ(m.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(m[0], 4.0f);

    Tensor<float> iota(Shape{1, 1, 4, 4});
    std::iota(iota.mutable_values().begin(), iota.mutable_values().end(), 0.0f);
    auto p = maxpool2d(iota, 2, 2);
    EXPECT_EQ(std::vector<float>(p.values().begin(), p.values().end()), (std::vector<float>{5, 7, 13, 15}));
}

TEST(Maxpool, ValidDropsRemainderAndRejectsOversizedKernel)
{
    Tensor<float> x(Shape{1, 5, 7}, 1.0f);
    EXPECT_EQ(maxpool2d(x, 2, 2).shape(), (Shape{1, 2, 3}));
    EXPECT_THROW(maxpool2d(x, 8, 8), ShapeError);
}

TEST(Maxpool, SamePaddingGradient)
{
    // Distinct values keep every window's maximum away from ties.
    Tensor<double> x(Shape{1, 2, 5, 5});
    Philox rng(61);
    std::vector<double> vals(50);
    std::iota(vals.begin(), vals.end(), 0.0);
    for (std::size_t i = vals.size() - 1; i > 0; --i)
        std::swap(vals[i], vals[rng.below(i + 1)]);
    std::copy(vals.begin(), vals.end(), x.mutable_values().begin());
    auto w = random_tensor({1, 2, 5, 5}, 62);
    auto f = [&] { return sum(maxpool2d(x, 3, 1, Padding::same) * w); };
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        x.set_requires_grad();
        auto loss = f();
        tape.backward(loss);
    }
    EXPECT_LT(max_grad_error([&] { return f().item(); }, x), 1e-4);
}

TEST(Prelu, Definition)
{
    Tensor<float> x(Shape{3, 1, 1}, std::vector<float>{2.0f, -1.0f, 0.0f});
    Tensor<float> s(Shape{3}, std::vector<float>{0.7f, 0.25f, 0.5f});
    auto y = prelu(x, s);
    EXPECT_EQ(y[0], 2.0f);
    EXPECT_EQ(y[1], -0.25f);
    EXPECT_EQ(y[2], 0.0f);
    EXPECT_THROW(prelu(x, Tensor<float>(Shape{2})), ShapeError);
}

TEST(Concat, SlabsAndRoundTrip)
{
    auto a = random_tensor({2, 2, 3, 3}, 70);
    auto b = random_tensor({2, 3, 3, 3}, 71);
    auto c = concat_channels<double>({a, b});
    EXPECT_EQ(c.shape(), (Shape{2, 5, 3, 3}));
    auto a2 = slice_channels(c, 0, 2), b2 = slice_channels(c, 2, 5);
    EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), a2.values().begin()));
    EXPECT_TRUE(std::equal(b.values().begin(), b.values().end(), b2.values().begin()));
    auto single = concat_channels<double>({a});
    EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), single.values().begin()));
    EXPECT_THROW(concat_channels<double>({a, random_tensor({2, 1, 3, 4}, 72)}), ShapeError);
}

TEST(Elementwise, Identities)
{
    auto a = random_tensor({3, 4}, 80).cast<float>();
    auto b = random_tensor({3, 4}, 81).cast<float>();
    auto m = maximum(a, a);
    EXPECT_TRUE(std::equal(m.values().begin(), m.values().end(), a.values().begin()));
    const auto zero = a * Tensor<float>(Shape{3, 4});
    for (float v : zero.values())
        EXPECT_EQ(v, 0.0f);
    auto back = (a + b) - b;
    for (std::size_t i = 0; i < a.numel(); ++i)
        EXPECT_NEAR(back[i], a[i], 1e-7);
    EXPECT_THROW(a / Tensor<float>(Shape{3, 4}), NumericError);
    EXPECT_THROW(a + Tensor<float>(Shape{4, 3}), ShapeError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences)
{
    auto a = random_tensor({2, 3}, 90, 0.5, 1.5);
    auto b = random_tensor({2, 3}, 91, 2.0, 3.0);
    auto f = [&] { return sum(maximum(a * b, b - a) / (b + 1.0) + a * 2.0); };
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        a.set_requires_grad();
        b.set_requires_grad();
        auto loss = f();
        tape.backward(loss);
    }
    auto scalar = [&] { return f().item(); };
    EXPECT_LT(max_grad_error(scalar, a), 1e-4);
    EXPECT_LT(max_grad_error(scalar, b), 1e-4);
}

TEST(BranchLog, ReplayHoldsPiecewiseChoices)
{
    Tensor<double> x(Shape{2}, std::vector<double>{-0.5, 0.5});
    BranchLog log;
    BranchScope scope(log);
    auto first = relu(x);
    EXPECT_EQ(first[1], 0.5);
    log.rewind();
    x.mutable_values()[0] = 0.25;
    x.mutable_values()[1] = -0.25;
    auto replayed = relu(x);
    EXPECT_EQ(replayed[0], 0.0);
    EXPECT_EQ(replayed[1], -0.25);
    EXPECT_THROW(relu(x), GraphError);
}

TEST(Philox, KnownAnswer)
{
    // Published known-answer vectors for Philox4x32-10.
    using B = Philox::Block;
    using K = Philox::Key;
    EXPECT_EQ(Philox::bijection(B{0, 0, 0, 0}, K{0, 0}), (B{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
    EXPECT_EQ(Philox::bijection(B{0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, K{0xffffffff, 0xffffffff}),
              (B{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
    EXPECT_EQ(Philox::bijection(B{0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, K{0xa4093822, 0x299f31d0}),
              (B{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
    Philox gen(0);
    EXPECT_EQ(gen.next_u32(), 0x6627e8d5u);
}

TEST(Philox, UniformRange)
{
    Philox rng(9);
    double lo = 1, hi = 0, total = 0;
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        lo = std::min(lo, u);
        hi = std::max(hi, u);
        total += u;
    }
    EXPECT_GE(lo, 0.0);
    EXPECT_LT(hi, 1.0);
    EXPECT_NEAR(total / 10000, 0.5, 0.02);
    for (int i = 0; i < 1000; ++i)
        EXPECT_LT(rng.below(7), 7u);
}

TEST(Dsnt, RoundTripIsBitExact)
{
    auto t = random_tensor({2, 3, 5}, 100).cast<float>();
    t.mutable_values()[0] = -0.0f;
    t.mutable_values()[1] = 1e-40f;
    std::stringstream ss;
    write_dsnt(ss, t);
    const auto bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 4), "DSNT");
    EXPECT_EQ(bytes.size(), 4 + 4 + 4 + 3 * 4 + 30 * 4u);
    auto back = read_dsnt(ss);
    ASSERT_EQ(back.shape(), t.shape());
    EXPECT_EQ(std::memcmp(back.data(), t.data(), t.numel() * sizeof(float)), 0);
}

TEST(Dsnt, RejectsBadMagicAndVersion)
{
    std::stringstream bad("DSNX\1\0\0\0");
    EXPECT_THROW(read_dsnt(bad), FormatError);
    std::string v2 = std::string("DSNT") + std::string("\2\0\0\0", 4);
    std::stringstream wrong(v2);
    EXPECT_THROW(read_dsnt(wrong), FormatError);
}
