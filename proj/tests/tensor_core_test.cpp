#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "grad_check.hpp"
#include "mdup/ops.hpp"

namespace mdup {
namespace {

using testing::grad_check;
using testing::random_tensor;
using testing::random_weights;
using D = double;
using F = float;

constexpr double kGradTol = 1e-4;

TEST(Matmul, IdentityTimesMatrix) {
    Tensor<F> eye({2, 2}, {1, 0, 0, 1});
    Tensor<F> b({2, 2}, {3, 4, 5, 6});
    auto c = matmul(eye, b);
    EXPECT_EQ(c.values(), (std::vector<F>{3, 4, 5, 6}));
}

TEST(Matmul, OneByOne) {
    auto c = matmul(Tensor<F>({1, 1}, {2}), Tensor<F>({1, 1}, {3}));
    EXPECT_EQ(c.item(), 6.0f);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        matmul(Tensor<F>::zeros({2, 3}), Tensor<F>::zeros({4, 5}));
        FAIL() << "expected rejection";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
    }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
    auto a = random_tensor<D>({3, 4}, 1);
    auto b = random_tensor<D>({4, 2}, 2);
    a.set_requires_grad(true);
    backward(sum(matmul(a, b)));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(a.grad()[i * 4 + k], b.at(k, 0) + b.at(k, 1));
    auto r = grad_check<D>({{"a", a}, {"b", b}}, [&] { return sum(matmul(a, b)); });
    EXPECT_LE(r.max_rel_error, kGradTol) << r.worst;
}

TEST(RmsNorm, UnitRmsInputIsUnchanged) {
    Tensor<D> x({4}, {1, 1, 1, 1});
    auto y = rms_norm(x, Tensor<D>::full({4}, 1.0), 1e-12);
    for (auto v : y.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(RmsNorm, ZeroInputStaysZero) {
    auto y = rms_norm(Tensor<F>::zeros({2}), Tensor<F>::full({2}, 1.0f), 1e-5f);
    EXPECT_EQ(y.values(), (std::vector<F>{0, 0}));
}

TEST(RmsNorm, RejectsNonPositiveEps) {
    EXPECT_THROW(rms_norm(Tensor<F>::zeros({2}), Tensor<F>::full({2}, 1.0f), 0.0f), std::invalid_argument);
    EXPECT_THROW(rms_norm(Tensor<F>::zeros({2}), Tensor<F>::full({2}, 1.0f), -1.0f), std::invalid_argument);
}

TEST(RmsNorm, RejectsGainLengthMismatch) {
    EXPECT_THROW(rms_norm(Tensor<F>::zeros({2, 3}), Tensor<F>::full({2}, 1.0f), 1e-5f), std::invalid_argument);
}

TEST(RmsNorm, GradientMatchesFiniteDifferences) {
    auto x = random_tensor<D>({3, 5}, 3);
    auto g = random_tensor<D>({5}, 4);
    auto w = random_weights<D>(15, 5);
    auto r = grad_check<D>({{"x", x}, {"gain", g}}, [&] { return weighted_sum(rms_norm(x, g, 1e-5), w); });
    EXPECT_LE(r.max_rel_error, kGradTol) << r.worst;
}

TEST(CausalDepthwiseConv, ZeroKernelGivesZeros) {
    auto x = random_tensor<F>({5, 3}, 6);
    auto y = causal_depthwise_conv(x, Tensor<F>::zeros({4, 3}));
    for (auto v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(CausalDepthwiseConv, IdentityTapReproducesInput) {
    auto x = random_tensor<F>({6, 3}, 7);
    auto k = Tensor<F>::zeros({3, 3});
    for (std::size_t c = 0; c < 3; ++c) k[2 * 3 + c] = 1.0f;
    EXPECT_EQ(causal_depthwise_conv(x, k).values(), x.values());
}

TEST(CausalDepthwiseConv, NoCrossChannelMixing) {
    auto x = Tensor<F>::zeros({4, 3});
    for (std::size_t t = 0; t < 4; ++t) x[t * 3 + 1] = 1.0f;
    auto y = causal_depthwise_conv(x, random_tensor<F>({3, 3}, 8));
    for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_EQ(y.at(t, 0), 0.0f);
        EXPECT_EQ(y.at(t, 2), 0.0f);
    }
}

TEST(CausalDepthwiseConv, FutureInputsNeverLeakBackwards) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t len = 2 + rng() % 7, ch = 1 + rng() % 4, width = 1 + rng() % 4;
        auto x = random_tensor<F>({len, ch}, rng());
        auto k = random_tensor<F>({width, ch}, rng());
        auto y0 = causal_depthwise_conv(x, k);
        const std::size_t t = rng() % (len - 1);
        auto x2 = x.clone();
        for (std::size_t c = 0; c < ch; ++c) x2[(t + 1) * ch + c] += 3.0f;
        auto y1 = causal_depthwise_conv(x2, k);
        for (std::size_t i = 0; i < (t + 1) * ch; ++i) ASSERT_EQ(y0[i], y1[i]);
    }
}

TEST(CausalDepthwiseConv, RejectsChannelMismatch) {
    EXPECT_THROW(causal_depthwise_conv(Tensor<F>::zeros({4, 3}), Tensor<F>::zeros({2, 2})), std::invalid_argument);
}

TEST(CausalDepthwiseConv, GradientMatchesFiniteDifferences) {
    auto x = random_tensor<D>({6, 4}, 10);
    auto k = random_tensor<D>({3, 4}, 11);
    auto w = random_weights<D>(24, 12);
    auto r = grad_check<D>({{"x", x}, {"kernel", k}}, [&] { return weighted_sum(causal_depthwise_conv(x, k), w); });
    EXPECT_LE(r.max_rel_error, kGradTol) << r.worst;
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogVocab) {
    const std::size_t vocab = 7;
    std::vector<std::int32_t> targets{0, 3, 6};
    std::vector<std::uint8_t> mask{1, 1, 1};
    auto loss = softmax_cross_entropy(Tensor<D>::zeros({3, vocab}), targets, mask);
    EXPECT_NEAR(loss.item(), std::log(7.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, ConfidentCorrectLogitsApproachZero) {
    auto logits = Tensor<D>::zeros({2, 4});
    logits[0 * 4 + 1] = 1e3;
    logits[1 * 4 + 2] = 1e3;
    std::vector<std::int32_t> targets{1, 2};
    std::vector<std::uint8_t> mask{1, 1};
    EXPECT_NEAR(softmax_cross_entropy(logits, targets, mask).item(), 0.0, 1e-12);
}

TEST(SoftmaxCrossEntropy, RejectsAllMaskedOut) {
    std::vector<std::int32_t> targets{0, 1};
    std::vector<std::uint8_t> mask{0, 0};
    EXPECT_THROW(softmax_cross_entropy(Tensor<F>::zeros({2, 3}), targets, mask), std::invalid_argument);
}

TEST(SoftmaxCrossEntropy, GradientIsSoftmaxMinusOneHotOnMaskedInRows) {
    const std::size_t rows = 5, vocab = 6;
    auto logits = random_tensor<D>({rows, vocab}, 13, 2.0);
    std::vector<std::int32_t> targets{1, 0, 5, 2, 3};
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
    logits.set_requires_grad(true);
    backward(softmax_cross_entropy(logits, targets, mask));
    for (std::size_t r = 0; r < rows; ++r) {
        double z = 0;
        for (std::size_t j = 0; j < vocab; ++j) z += std::exp(logits.at(r, j));
        for (std::size_t j = 0; j < vocab; ++j) {
            const double expected =
                mask[r] ? (std::exp(logits.at(r, j)) / z - (static_cast<std::int32_t>(j) == targets[r])) / 3.0 : 0.0;
            EXPECT_NEAR(logits.grad()[r * vocab + j], expected, 1e-12);
        }
    }
    auto r = grad_check<D>({{"logits", logits}}, [&] { return softmax_cross_entropy(logits, targets, mask); });
    EXPECT_LE(r.max_rel_error, kGradTol) << r.worst;
}

// Every remaining primitive on random shapes with extents <= 8.
TEST(Primitives, FiniteDifferenceChecksOnRandomShapes) {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t rows = 1 + rng() % 8, cols = 2 * (1 + rng() % 4);
        auto a = random_tensor<D>({rows, cols}, rng());
        auto b = random_tensor<D>({rows, cols}, rng());
        auto w = random_weights<D>(rows * cols, rng());
        auto w2 = random_weights<D>(rows * cols * 2, rng());
        std::vector<bool> pick(rows);
        for (std::size_t r = 0; r < rows; ++r) pick[r] = rng() % 2;
        std::vector<std::int32_t> pos(rows);
        for (std::size_t r = 0; r < rows; ++r) pos[r] = static_cast<std::int32_t>(rng() % 20);
        std::vector<std::int32_t> ids(rows);
        for (auto& id : ids) id = static_cast<std::int32_t>(rng() % rows);

        const std::vector<std::pair<const char*, std::function<Tensor<D>()>>> cases = {
            {"add", [&] { return weighted_sum(add(a, b), w); }},
            {"mul", [&] { return weighted_sum(mul(a, b), w); }},
            {"scale", [&] { return weighted_sum(scale(a, 0.37), w); }},
            {"silu", [&] { return weighted_sum(silu(a), w); }},
            {"gelu", [&] { return weighted_sum(gelu(a), w); }},
            {"transpose", [&] { return weighted_sum(transpose(a), w); }},
            {"rope", [&] { return weighted_sum(rope(a, pos, cols / 2 >= 2 && cols % 4 == 0 ? 2 : 1, 10000.0), w); }},
            {"attention", [&] { return weighted_sum(causal_attention(a, b, mul(a, b), cols % 4 == 0 ? 2 : 1), w); }},
            {"concat_cols", [&] { return weighted_sum(concat_cols(a, b), w2); }},
            {"concat_rows", [&] { return weighted_sum(concat_rows(a, b), w2); }},
            {"slice_cols", [&] { return sum(slice_cols(a, 1, cols - 1)); }},
            {"slice_rows", [&] { return sum(mul(slice_rows(a, 0, rows), b)); }},
            {"where_rows", [&] { return weighted_sum(where_rows(pick, a, mul(a, b)), w); }},
            {"embedding", [&] { return weighted_sum(embedding(a, ids), w); }},
        };
        for (const auto& [name, fn] : cases) {
            auto r = grad_check<D>({{"a", a}, {"b", b}}, fn);
            EXPECT_LE(r.max_rel_error, kGradTol) << name << ": " << r.worst;
        }
    }
}

TEST(Autograd, ReusedTensorAccumulatesGradient) {
    auto x = Tensor<D>({3}, {1, 2, 3});
    x.set_requires_grad(true);
    backward(sum(add(mul(x, x), x)));
    EXPECT_EQ(std::vector<D>(x.grad().begin(), x.grad().end()), (std::vector<D>{3, 5, 7}));
}

TEST(Autograd, TapeVisitsEachNodeOnceInReverseTopologicalOrder) {
    auto x = random_tensor<D>({2, 2}, 15);
    x.set_requires_grad(true);
    auto y = mul(x, x);
    auto z = add(y, y);
    auto loss = sum(add(z, y));
    auto tape = computation_tape(loss);
    ASSERT_EQ(tape.size(), 5u);  // loss, add(z,y), z, y, x
    std::unordered_set<Node<D>*> seen;
    for (std::size_t i = 0; i < tape.size(); ++i) {
        EXPECT_TRUE(seen.insert(tape[i]).second);
        // every parent appears later than its child
        for (const auto& p : tape[i]->parents) {
            auto it = std::find(tape.begin(), tape.end(), p.get());
            EXPECT_GT(it - tape.begin(), static_cast<std::ptrdiff_t>(i));
        }
    }
}

TEST(Autograd, NoGradGuardSkipsRecording) {
    auto x = random_tensor<F>({2, 2}, 16);
    x.set_requires_grad(true);
    NoGradGuard guard;
    EXPECT_FALSE(sum(x).requires_grad());
}

TEST(Determinism, ForwardIsBitIdenticalAcrossRuns) {
    auto q = random_tensor<F>({7, 8}, 17);
    auto k = random_tensor<F>({7, 8}, 18);
    auto v = random_tensor<F>({7, 8}, 19);
    auto pos = std::vector<std::int32_t>{0, 1, 2, 3, 4, 5, 6};
    auto run = [&] { return causal_attention(rope(q, pos, 2, 10000.0), rope(k, pos, 2, 10000.0), v, 2).values(); };
    EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace mdup
