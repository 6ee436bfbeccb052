#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "peterrec/optim.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

using namespace peterrec;
using ref::GradCase;
using ref::Vec;

namespace {

constexpr int kInstances = 20;
constexpr double kGradTolerance = 1e-3;
constexpr double kForwardTolerance = 1e-5;

void expect_grad_ok(const GradCase& c, Rng& rng, const char* what) {
    const auto report = ref::check_gradients(c, rng);
    EXPECT_LT(report.forward_error, kForwardTolerance) << what;
    EXPECT_LT(report.gradient_error, kGradTolerance) << what;
}


} // namespace

TEST(Tensor, RejectsMismatchedData) {
    EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<float>(5)), Error);
    EXPECT_THROW(Tensor(Shape{2, 0}), Error);
    Tensor t(Shape{2, 3}, 1.5f);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.has_grad());
    EXPECT_EQ(t.grad().size(), t.numel());
}

TEST(Tensor, CopiesShareStorageAndCloneDoesNot) {
    Tensor a(Shape{2}, 1.0f);
    Tensor b = a;
    Tensor c = a.clone();
    b.data()[0] = 7.0f;
    EXPECT_EQ(a.data()[0], 7.0f);
    EXPECT_EQ(c.data()[0], 1.0f);
}

TEST(Matmul, IdentityAndHandCases) {
    Tape tape;
    Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
    Tensor col(Shape{2, 1}, {3, 4});
    Tensor y = matmul(tape, eye, col);
    EXPECT_EQ(y.data()[0], 3.0f);
    EXPECT_EQ(y.data()[1], 4.0f);
    Tensor row(Shape{1, 2}, {1, 2});
    EXPECT_EQ(matmul(tape, row, col).item(), 11.0f);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tape tape;
    try {
        matmul(tape, Tensor(Shape{2, 3}), Tensor(Shape{2, 3}));
        FAIL() << "expected a dimension error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kDimension);
        EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
    Rng rng(11);
    Tape tape;
    Tensor a = ref::random_tensor({4, 5}, rng), b = ref::random_tensor({5, 3}, rng);
    a.set_requires_grad(true);
    Tensor loss = sum(tape, matmul(tape, a, b));
    tape.backward(loss);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t p = 0; p < 5; ++p) {
            double expect = 0;
            for (std::size_t q = 0; q < 3; ++q) expect += b.data()[p * 3 + q];
            EXPECT_NEAR(a.grad()[i * 5 + p], expect, 1e-5);
        }
    }
}

TEST(SoftmaxCrossEntropy, UniformOneHotAndReference) {
    Tape tape;
    std::vector<std::int32_t> target{2};
    EXPECT_NEAR(softmax_cross_entropy(tape, Tensor(Shape{1, 4}, 0.5f), target).item(), std::log(4.0), 1e-6);
    Tensor peaked(Shape{1, 4}, 0.0f);
    peaked.data()[2] = 1000.0f;
    EXPECT_NEAR(softmax_cross_entropy(tape, peaked, target).item(), 0.0, 1e-6);

    Rng rng(5);
    Tensor logits = ref::random_tensor({3, 7}, rng, 3.0);
    std::vector<std::int32_t> targets{0, 6, 3};
    double expect = 0;
    for (std::size_t r = 0; r < 3; ++r) {
        Vec row(logits.data().begin() + r * 7, logits.data().begin() + (r + 1) * 7);
        expect += ref::cross_entropy(row, static_cast<std::size_t>(targets[r]));
    }
    EXPECT_NEAR(softmax_cross_entropy(tape, logits, targets).item(), expect / 3, 1e-6);
}

TEST(SoftmaxCrossEntropy, Errors) {
    Tape tape;
    std::vector<std::int32_t> bad{4};
    try {
        softmax_cross_entropy(tape, Tensor(Shape{1, 4}), bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kIndex);
    }
    std::vector<std::int32_t> ok{1};
    std::vector<std::uint8_t> none{0};
    try {
        softmax_cross_entropy(tape, Tensor(Shape{1, 4}), ok, none);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kEmptyBatch);
    }
}

TEST(Softmax, RowsSumToOne) {
    Rng rng(3);
    Tape tape;
    Tensor p = softmax(tape, ref::random_tensor({6, 9}, rng, 4.0));
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 9; ++c) s += p.data()[r * 9 + c];
        EXPECT_NEAR(s, 1.0, 1e-5);
    }
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParameterStore store;
    Tensor p = store.add("p", Tensor::scalar(0.0f), Partition::kTunable, Role::kTaskHead);
    p.grad()[0] = 1.0f;
    AdamState adam(0.001);
    adam_step(store, adam);
    EXPECT_NEAR(p.item(), -0.001f, 1e-9);
    EXPECT_EQ(adam.step(), 1u);
    EXPECT_EQ(p.grad()[0], 0.0f);
}

TEST(Adam, ZeroGradientLeavesParametersAndFrozenUntouched) {
    ParameterStore store;
    Tensor p = store.add("p", Tensor(Shape{3}, 0.25f), Partition::kTunable, Role::kTaskHead);
    Tensor f = store.add("f", Tensor(Shape{2}, 4.0f), Partition::kFrozen, Role::kEmbedding);
    AdamState adam;
    for (int i = 0; i < 10; ++i) {
        p.grad();
        adam_step(store, adam);
    }
    for (float v : p.data()) EXPECT_EQ(v, 0.25f);
    for (float v : f.data()) EXPECT_EQ(v, 4.0f);
    EXPECT_EQ(adam.step(), 10u);
}

TEST(Adam, MissingGradientIsContractViolation) {
    ParameterStore store;
    store.add("p", Tensor::scalar(1.0f), Partition::kTunable, Role::kTaskHead);
    AdamState adam;
    try {
        adam_step(store, adam);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kContract);
    }
}

TEST(Adam, QuadraticDescentMatchesScalarOracle) {
    // Oracle: textbook Adam on f(p) = (p - 3)^2 in plain double arithmetic.
    double op = 0, m = 0, v = 0;
    for (int t = 1; t <= 100; ++t) {
        const double g = 2 * (op - 3);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        op -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    }
    ParameterStore store;
    Tensor p = store.add("p", Tensor::scalar(0.0f), Partition::kTunable, Role::kTaskHead);
    AdamState adam(0.1);
    for (int t = 0; t < 100; ++t) {
        p.grad()[0] = 2.0f * (p.item() - 3.0f);
        adam_step(store, adam);
    }
    EXPECT_LT(std::abs(p.item() - 3.0f), 0.5f);
    EXPECT_NEAR(p.item(), op, 1e-4);
}

TEST(Tape, BackwardLeavesInputsBitIdentical) {
    Rng rng(8);
    Tensor x = ref::random_tensor({3, 4}, rng);
    x.set_requires_grad(true);
    const Vec before = ref::to_vec(x);
    Tape tape;
    Tensor gain(Shape{4}, 1.0f), bias(Shape{4}, 0.0f);
    Tensor loss = sum(tape, relu(tape, layer_norm(tape, x, gain, bias)));
    tape.backward(loss);
    EXPECT_EQ(ref::to_vec(x), before);
}

TEST(Tape, GradientsAccumulateAcrossUses) {
    Tape tape;
    Tensor table(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
    table.set_requires_grad(true);
    std::vector<std::int32_t> ids{1, 1, 2};
    Tensor loss = sum(tape, embedding_lookup(tape, table, ids));
    tape.backward(loss);
    EXPECT_EQ(table.grad()[0], 0.0f);
    EXPECT_EQ(table.grad()[2], 2.0f);
    EXPECT_EQ(table.grad()[4], 1.0f);
}

TEST(EmbeddingLookup, OutOfRangeIsVocabularyError) {
    Tape tape;
    std::vector<std::int32_t> ids{3};
    try {
        embedding_lookup(tape, Tensor(Shape{3, 2}), ids);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kVocabulary);
    }
}

// Finite-difference checks, one per differentiable op, 20 instances each.

TEST(GradCheck, ElementwiseOps) {
    Rng rng(101);
    const ops::CaseSink sink = [&](const GradCase& c, Rng& r, const char* what) { expect_grad_ok(c, r, what); };
    for (int i = 0; i < kInstances; ++i) ops::elementwise(rng, sink);
}

TEST(GradCheck, LinearFamily) {
    Rng rng(202);
    const ops::CaseSink sink = [&](const GradCase& c, Rng& r, const char* what) { expect_grad_ok(c, r, what); };
    for (int i = 0; i < kInstances; ++i) ops::linear_family(rng, sink);
}

TEST(GradCheck, LayerNorm) {
    Rng rng(303);
    const ops::CaseSink sink = [&](const GradCase& c, Rng& r, const char* what) { expect_grad_ok(c, r, what); };
    for (int i = 0; i < kInstances; ++i) ops::layer_norm_cases(rng, sink);
}

TEST(GradCheck, DilatedConvolution) {
    Rng rng(404);
    const ops::CaseSink sink = [&](const GradCase& c, Rng& r, const char* what) { expect_grad_ok(c, r, what); };
    for (int i = 0; i < kInstances; ++i) ops::dilated_convolution(rng, i, sink);
}

TEST(GradCheck, IndexingOps) {
    Rng rng(505);
    const ops::CaseSink sink = [&](const GradCase& c, Rng& r, const char* what) { expect_grad_ok(c, r, what); };
    for (int i = 0; i < kInstances; ++i) ops::indexing(rng, sink);
}

TEST(GradCheck, Reductions) {
    Rng rng(606);
    const ops::CaseSink sink = [&](const GradCase& c, Rng& r, const char* what) { expect_grad_ok(c, r, what); };
    for (int i = 0; i < kInstances; ++i) ops::reductions(rng, sink);
}

TEST(Determinism, SameSeedSameParametersAfterTraining) {
    auto run = [] {
        Rng rng(77);
        ParameterStore store;
        Tensor w = store.add("w", ref::random_tensor({4, 3}, rng), Partition::kTunable, Role::kTaskHead);
        Tensor x = ref::random_tensor({5, 4}, rng);
        AdamState adam;
        for (int step = 0; step < 25; ++step) {
            Tape tape;
            std::vector<std::int32_t> targets{0, 1, 2, 0, 1};
            Tensor loss = softmax_cross_entropy(tape, matmul(tape, x, w), targets);
            tape.backward(loss);
            adam_step(store, adam);
        }
        return ref::to_vec(w);
    };
    EXPECT_EQ(run(), run());
}
