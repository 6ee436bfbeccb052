#include <gtest/gtest.h>

#include "peterrec/backbone.hpp"
#include "support/fixtures.hpp"

using namespace peterrec;
using fixture::tiny_config;
using ref::Vec;

namespace {

Tensor hidden_of(const SequenceModel& model, const Sequence& s) {
    Tape tape = Tape::inference();
    return model.hidden(tape, fixture::single(s));
}

} // namespace

TEST(BackboneConfig, Validation) {
    BackboneConfig cfg;
    cfg.vocab_size = 10;
    EXPECT_NO_THROW(cfg.validate());
    auto expect_config_error = [](BackboneConfig c) {
        try {
            c.validate();
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::kConfig);
        }
    };
    BackboneConfig odd = cfg;
    odd.dilations = {1, 2, 4};
    expect_config_error(odd);
    BackboneConfig even_kernel = cfg;
    even_kernel.causal = false;
    even_kernel.kernel_size = 4;
    expect_config_error(even_kernel);
    BackboneConfig zero_dilation = cfg;
    zero_dilation.dilations = {1, 0};
    expect_config_error(zero_dilation);
    BackboneConfig tiny_kernel = cfg;
    tiny_kernel.kernel_size = 1;
    expect_config_error(tiny_kernel);
}

TEST(ReceptiveField, Examples) {
    BackboneConfig cfg;
    EXPECT_EQ(receptive_field(cfg), 121u);
    cfg.dilations.clear();
    EXPECT_EQ(receptive_field(cfg), 1u);
    cfg.dilations = {1};
    EXPECT_EQ(receptive_field(cfg), 3u);
}

TEST(Conv1dDilated, IdentityKernelNonCausal) {
    Rng rng(1);
    Tape tape;
    Tensor x = ref::random_tensor({6, 3}, rng);
    Tensor w(Shape{3, 3, 3}, 0.0f);
    for (std::size_t c = 0; c < 3; ++c) w.data()[(1 * 3 + c) * 3 + c] = 1.0f;
    EXPECT_EQ(ref::to_vec(conv1d_dilated(tape, x, w, 2, false)), ref::to_vec(x));
}

TEST(Conv1dDilated, CausalFirstOutputSeesOnlyFirstInput) {
    Rng rng(2);
    Tape tape;
    Tensor x = ref::random_tensor({5, 2}, rng), w = ref::random_tensor({3, 2, 2}, rng);
    const Vec base = ref::to_vec(conv1d_dilated(tape, x, w, 2, true));
    for (std::size_t s = 1; s < 5; ++s) {
        Tensor y = x.clone();
        y.data()[s * 2] += 1.0f;
        const Vec out = ref::to_vec(conv1d_dilated(tape, y, w, 2, true));
        EXPECT_EQ(out[0], base[0]);
        EXPECT_EQ(out[1], base[1]);
    }
}

TEST(Conv1dDilated, JacobianSupportMatchesReceptiveField) {
    // Oracle: backpropagate from one output position through a stack of plain
    // convolutions and read which input positions received gradient.
    BackboneConfig cfg;
    const std::size_t n = 150, k = 2, t = 140;
    Rng rng(3);
    Tape tape;
    Tensor x = ref::random_tensor({n, k}, rng);
    x.set_requires_grad(true);
    Tensor h = x;
    for (auto dil : cfg.dilations) h = conv1d_dilated(tape, h, ref::random_tensor({3, k, k}, rng), dil, true);
    Tensor loss = sum(tape, select_position(tape, reshape(tape, h, Shape{1, n, k}), t));
    tape.backward(loss);
    std::size_t support = 0;
    for (std::size_t s = 0; s < n; ++s) {
        const bool nonzero = x.grad()[s * k] != 0.0f || x.grad()[s * k + 1] != 0.0f;
        if (s > t) {
            EXPECT_FALSE(nonzero) << "future position " << s;
        }
        support += nonzero;
    }
    EXPECT_EQ(support, receptive_field(cfg));
    EXPECT_NE(x.grad()[(t - 120) * k] != 0.0f || x.grad()[(t - 120) * k + 1] != 0.0f, false);
}

TEST(BlockForward, ZeroWeightsGiveIdentity) {
    Rng rng(4);
    ResidualBlock block;
    for (auto* s : {&block.first, &block.second}) {
        *s = {Tensor(Shape{3, 4, 4}, 0.0f), Tensor(Shape{4}, 0.0f), Tensor(Shape{4}, 1.0f), Tensor(Shape{4}, 0.0f), 1};
    }
    block.second.dilation = 2;
    Tape tape;
    ForwardContext ctx{tape};
    Tensor e = ref::random_tensor({5, 4}, rng);
    EXPECT_EQ(ref::to_vec(block_forward(ctx, block, e)), ref::to_vec(e));
}

TEST(BlockForward, HandWeightsMatchReferenceForward) {
    ModelConfig cfg = tiny_config(true, 2, 8, 1);
    SequenceModel model(cfg, 5);
    // Hand-set weights: small integers and halves, so every intermediate is exact.
    const std::vector<float> w1{1, 0, 0, 1, 0.5f, -1, 1, 0.5f, -1, 2, 0, 1};
    const std::vector<float> w2{0, 1, 1, 0, 1, 1, -0.5f, 0, 2, -1, 0.5f, 0.5f};
    std::copy(w1.begin(), w1.end(), model.params().get("block0.conv1.weight").data().begin());
    std::copy(w2.begin(), w2.end(), model.params().get("block0.conv2.weight").data().begin());
    model.params().get("block0.ln1.bias").data()[0] = 0.25f;
    model.params().get("block0.ln2.gain").data()[1] = 2.0f;
    Tensor e(Shape{4, 2}, {1, -2, 0.5f, 3, -1, 1, 2, 2.5f});
    Tape tape;
    ForwardContext ctx{tape};
    const Vec got = ref::to_vec(block_forward(ctx, model.block(0), e));

    ModelConfig no_embed = cfg;
    auto params = ref::from_store(model.params());
    // Route the hand-set E through the reference as embedding rows 3..6.
    params["embedding"].assign(8 * 2, 0.0);
    for (std::size_t i = 0; i < 8; ++i) params["embedding"][6 + i] = e.data()[i];
    const Vec expect = ref::hidden(no_embed, params, {3, 4, 5, 6});
    ASSERT_EQ(got.size(), expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-5);
}

TEST(BlockForward, GradientCheck) {
    Rng rng(6);
    ModelConfig cfg = tiny_config(true, 4, 8, 1);
    SequenceModel model(cfg, 6);
    fixture::scramble(model, rng.split("params"));
    const ResidualBlock block = model.block(0);
    ref::GradCase c{{ref::random_tensor({3, 4}, rng)},
                    [&](Tape& t, const auto& in) {
                        ForwardContext ctx{t};
                        return block_forward(ctx, block, in[0]);
                    },
                    [&](const auto& v) {
                        auto p = ref::from_store(model.params());
                        p["embedding"].assign(8 * 4, 0.0);
                        std::copy(v[0].begin(), v[0].end(), p["embedding"].begin() + 3 * 4);
                        return ref::hidden(cfg, p, {3, 4, 5});
                    }};
    const auto report = ref::check_gradients(c, rng);
    EXPECT_LT(report.forward_error, 1e-5);
    EXPECT_LT(report.gradient_error, 1e-3);
}

TEST(BackboneForward, ZeroBlocksReturnEmbeddingRows) {
    ModelConfig cfg = tiny_config(true, 4, 10, 0);
    SequenceModel model(cfg, 7);
    const Sequence s{0, 3, 9, 4};
    const Vec h = ref::to_vec(hidden_of(model, s));
    const auto table = model.params().get("embedding").data();
    for (std::size_t t = 0; t < s.size(); ++t)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(h[t * 4 + c], table[static_cast<std::size_t>(s[t]) * 4 + c]);
}

TEST(BackboneForward, CausalPrefixIsBitIdentical) {
    ModelConfig cfg = tiny_config(true);
    SequenceModel model(cfg, 8);
    fixture::scramble(model, Rng(80));
    Rng rng(9);
    const std::size_t n = 8, k = 16;
    for (int trial = 0; trial < 5; ++trial) {
        Sequence s = fixture::random_items(n, 20, rng);
        const Vec base = ref::to_vec(hidden_of(model, s));
        for (std::size_t t = 0; t < n; ++t) {
            Sequence p = s;
            p[t] = p[t] == 3 ? 4 : 3;
            const Vec h = ref::to_vec(hidden_of(model, p));
            for (std::size_t i = 0; i < t * k; ++i) ASSERT_EQ(h[i], base[i]) << "t=" << t;
        }
    }
}

TEST(BackboneForward, NonCausalSeesTheFuture) {
    ModelConfig cfg = tiny_config(false);
    SequenceModel model(cfg, 10);
    Rng rng(11);
    Sequence s = fixture::random_items(8, 20, rng);
    const Vec base = ref::to_vec(hidden_of(model, s));
    Sequence p = s;
    p[6] = p[6] == 3 ? 4 : 3;
    const Vec h = ref::to_vec(hidden_of(model, p));
    bool changed_before = false;
    for (std::size_t i = 0; i < 6 * 16; ++i) changed_before |= h[i] != base[i];
    EXPECT_TRUE(changed_before);
}

TEST(BackboneForward, MatchesReferenceForBothCausalities) {
    for (bool causal : {true, false}) {
        ModelConfig cfg = tiny_config(causal);
        SequenceModel model(cfg, 12);
        fixture::scramble(model, Rng(120));
        Rng rng(13);
        Sequence s = fixture::random_items(8, 20, rng, 2);
        const Vec got = ref::to_vec(hidden_of(model, s));
        EXPECT_LT(ref::relative_error(got, ref::hidden(cfg, ref::from_store(model.params()), s)), 1e-5);
    }
}

TEST(BackboneForward, OutOfVocabularyIdIsRejected) {
    SequenceModel model(tiny_config(true), 14);
    try {
        hidden_of(model, {3, 4, 20});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kVocabulary);
    }
}

TEST(BackboneForward, ShapePreservedForAnyLength) {
    SequenceModel model(tiny_config(true), 15);
    Rng rng(16);
    for (std::size_t n : {1u, 2u, 7u, 31u}) {
        Tensor h = hidden_of(model, fixture::random_items(n, 20, rng));
        EXPECT_EQ(h.shape(), (Shape{1, n, 16}));
    }
}

TEST(BackboneForward, PaddingBeyondReceptiveFieldIsNeutral) {
    ModelConfig cfg = tiny_config(true);
    SequenceModel model(cfg, 17);
    fixture::scramble(model, Rng(170));
    const std::size_t rf = receptive_field(cfg.backbone);
    Rng rng(18);
    const Sequence s = fixture::random_items(rf, 20, rng);
    Sequence padded(rf + 25, ReservedIds::kPad);
    std::copy(s.begin(), s.end(), padded.end() - static_cast<std::ptrdiff_t>(rf));
    Tape tape = Tape::inference();
    auto last_logits = [&](const Sequence& seq) {
        Tensor h = model.hidden(tape, fixture::single(seq));
        return ref::to_vec(model.pretrain_logits(tape, select_position(tape, h, seq.size() - 1)));
    };
    const Vec a = last_logits(s), b = last_logits(padded);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
}

TEST(PretrainLogits, IdentityHeadAndGradient) {
    Rng rng(19);
    Tape tape;
    Tensor h = ref::random_tensor({3, 2}, rng);
    Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
    EXPECT_EQ(ref::to_vec(pretrain_logits(tape, h, eye, Tensor())), ref::to_vec(h));
    Tensor hand(Shape{2, 2}, {1, 2, 3, 4});
    Tensor one(Shape{1, 2}, {1, 1});
    EXPECT_EQ(ref::to_vec(pretrain_logits(tape, one, hand, Tensor(Shape{2}, 0.5f))), (Vec{4.5, 6.5}));

    ref::GradCase c{{ref::random_tensor({4, 3}, rng), ref::random_tensor({3, 5}, rng), ref::random_tensor({5}, rng)},
                    [](Tape& t, const auto& in) { return pretrain_logits(t, in[0], in[1], in[2]); },
                    [](const auto& v) { return ref::dense(v[0], 4, 3, v[1], v[2], 5); }};
    const auto report = ref::check_gradients(c, rng);
    EXPECT_LT(report.gradient_error, 1e-3);
}

TEST(SequenceModel, EmbeddingAndHeadAreSeparateTensors) {
    SequenceModel model(tiny_config(true), 20);
    EXPECT_FALSE(model.params().get("embedding").same_storage(model.params().get("head.weight")));
    EXPECT_EQ(model.params().get("head.weight").shape(), (Shape{16, 20}));
}

TEST(SequenceModel, InitializationFollowsRoles) {
    SequenceModel model(tiny_config(true, 16, 200), 21);
    for (const auto& p : model.params().items()) {
        const auto v = p.tensor.data();
        if (p.role == Role::kLayerNorm) {
            const float expect = p.name.ends_with(".gain") ? 1.0f : 0.0f;
            for (float x : v) EXPECT_EQ(x, expect);
        } else if (p.name.ends_with(".bias")) {
            for (float x : v) EXPECT_EQ(x, 0.0f);
        } else {
            double sq = 0;
            for (float x : v) {
                EXPECT_LE(std::abs(x), 0.04f + 1e-6f);
                sq += double(x) * x;
            }
            EXPECT_NEAR(std::sqrt(sq / v.size()), 0.0176, 0.004) << p.name;  // std of N(0, .02) cut at 2 sigma
        }
    }
}
