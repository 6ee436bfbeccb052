#include <gtest/gtest.h>

#include "peterrec/optim.hpp"
#include "support/fixtures.hpp"

using namespace peterrec;
using fixture::tiny_config;
using ref::Vec;

namespace {

constexpr InsertionMode kModes[] = {InsertionMode::kSerialTwoPerBlock, InsertionMode::kSerialOnePerBlock,
                                    InsertionMode::kParallelBeforeNorm, InsertionMode::kParallelAfterActivation};

ModelPatch random_patch(std::size_t k, std::size_t d, Rng& rng) {
    return {ref::random_tensor({k, d}, rng), ref::random_tensor({d}, rng), ref::random_tensor({d, k}, rng),
            ref::random_tensor({k}, rng)};
}

std::size_t count_with(const ParameterStore& store, std::string_view needle) {
    std::size_t n = 0;
    for (const auto& p : store.items()) n += p.name.find(needle) != std::string::npos;
    return n;
}

/// Fine-tune model: pre-trained backbone, task head over 5 labels, patches.
SequenceModel finetune_model(InsertionMode mode, const TuningPolicy& policy, std::uint64_t seed = 1) {
    SequenceModel model(tiny_config(true), seed);
    attach_task_head(model, 5, HeadMode::kCausalEndTcl, seed + 1);
    if (mode != InsertionMode::kNone) insert_patches(model, mode, 2, seed + 2);
    apply_partition(model, policy);
    return model;
}

} // namespace

TEST(PatchForward, ZeroUpProjectionIsIdentity) {
    Rng rng(1);
    ModelPatch p = random_patch(8, 2, rng);
    std::fill(p.up_weight.data().begin(), p.up_weight.data().end(), 0.0f);
    std::fill(p.up_bias.data().begin(), p.up_bias.data().end(), 0.0f);
    Tape tape;
    Tensor e = ref::random_tensor({5, 8}, rng);
    EXPECT_EQ(ref::to_vec(patch_forward(tape, p, e)), ref::to_vec(e));
}

TEST(PatchForward, HandArithmetic) {
    ModelPatch p{Tensor(Shape{8, 1}, 1.0f), Tensor(Shape{1}, 0.0f), Tensor(Shape{1, 8}, 1.0f), Tensor(Shape{8}, 0.0f)};
    Tape tape;
    const Vec out = ref::to_vec(patch_forward(tape, p, Tensor(Shape{1, 8}, 0.5f)));
    for (double v : out) EXPECT_EQ(v, 4.5);
}

TEST(PatchForward, ChannelMismatchIsDimensionError) {
    Rng rng(2);
    Tape tape;
    try {
        patch_forward(tape, random_patch(8, 1, rng), Tensor(Shape{2, 6}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kDimension);
    }
}

TEST(PatchForward, GradientCheck) {
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        const std::size_t k = 2 + rng.below(6), d = 1 + rng.below(3), n = 1 + rng.below(4);
        ModelPatch p = random_patch(k, d, rng);
        ref::GradCase c{{ref::random_tensor({n, k}, rng), p.down_weight, p.down_bias, p.up_weight, p.up_bias},
                        [](Tape& t, const auto& in) { return patch_forward(t, {in[1], in[2], in[3], in[4]}, in[0]); },
                        [=](const auto& v) {
                            Vec h = ref::relu(ref::dense(v[0], n, k, v[1], v[2], d));
                            return ref::plus(v[0], ref::dense(h, n, d, v[3], v[4], k));
                        }};
        const auto report = ref::check_gradients(c, rng);
        EXPECT_LT(report.forward_error, 1e-5);
        EXPECT_LT(report.gradient_error, 1e-3);
    }
}

TEST(InsertPatches, PatchCountsPerMode) {
    ModelConfig cfg = tiny_config(true, 16, 20, 8);
    for (auto mode : kModes) {
        SequenceModel model(cfg, 4);
        insert_patches(model, mode, 2, 5);
        EXPECT_EQ(count_with(model.params(), "down.weight"), 8 * patches_per_block(mode)) << to_string(mode);
    }
    SequenceModel c(cfg, 4);
    insert_patches(c, InsertionMode::kSerialOnePerBlock, 2, 5);
    EXPECT_EQ(count_with(c.params(), "down.weight"), 8u);
}

TEST(InsertPatches, IdentityAtInitializationForEveryMode) {
    for (bool causal : {true, false}) {
        SequenceModel base(tiny_config(causal), 6);
        fixture::scramble(base, Rng(60));
        for (auto mode : kModes) {
            SequenceModel patched = base.clone();
            insert_patches(patched, mode, 2, 7);
            Rng rng(8);
            for (int i = 0; i < 10; ++i) {
                const Sequence s = fixture::random_items(8, 20, rng, i % 3);
                Tape tape = Tape::inference();
                Tensor a = base.hidden(tape, fixture::single(s)), b = patched.hidden(tape, fixture::single(s));
                ASSERT_EQ(ref::to_vec(a), ref::to_vec(b)) << to_string(mode);
                ASSERT_EQ(ref::to_vec(base.pretrain_logits(tape, a)), ref::to_vec(patched.pretrain_logits(tape, b)));
            }
        }
    }
}

TEST(InsertPatches, PatchedForwardMatchesReference) {
    for (bool causal : {true, false}) {
        for (auto mode : kModes) {
            SequenceModel model(tiny_config(causal), 9);
            insert_patches(model, mode, 3, 10);
            fixture::scramble(model, Rng(90));
            Rng rng(11);
            const Sequence s = fixture::random_items(8, 20, rng, 1);
            Tape tape = Tape::inference();
            const Vec got = ref::to_vec(model.hidden(tape, fixture::single(s)));
            EXPECT_LT(ref::relative_error(got, ref::hidden(model.config(), ref::from_store(model.params()), s)), 1e-5)
                << to_string(mode);
        }
    }
}

TEST(InsertPatches, Errors) {
    SequenceModel model(tiny_config(true), 12);
    EXPECT_THROW(insert_patches(model, InsertionMode::kNone, 2, 1), Error);
    EXPECT_THROW(insert_patches(model, InsertionMode::kSerialOnePerBlock, 0, 1), Error);
    insert_patches(model, InsertionMode::kParallelAfterActivation, 2, 1);
    EXPECT_THROW(insert_patches(model, InsertionMode::kSerialOnePerBlock, 2, 1), Error);
    try {
        parse_insertion_mode("f");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kConfig);
    }
}

TEST(CountParameters, WidthAuditBetweenSerialModes) {
    // Patch weights only: (b) has two patches per block, (c) one, so (c) needs
    // twice the bottleneck width to match. The reverse pairing differs by 4x.
    ModelConfig cfg = tiny_config(true, 64, 100, 4);
    const TuningPolicy policy;
    auto patch_weights = [&](InsertionMode mode, std::size_t d) {
        ModelConfig c = cfg;
        c.insertion = mode;
        c.bottleneck = d;
        return count_parameters(c, policy).count(Role::kPatchWeight);
    };
    const std::size_t d0 = 4;
    EXPECT_EQ(patch_weights(InsertionMode::kSerialTwoPerBlock, d0), patch_weights(InsertionMode::kSerialOnePerBlock, 2 * d0));
    EXPECT_EQ(patch_weights(InsertionMode::kSerialTwoPerBlock, 2 * d0), 4 * patch_weights(InsertionMode::kSerialOnePerBlock, d0));
}

TEST(CountParameters, PerLayerAndPerBlockRatios) {
    for (std::size_t d : {1u, 4u, 32u}) {
        const std::size_t k = 8 * d;
        ModelConfig cfg = tiny_config(true, k, 50, 1);
        for (auto mode : kModes) {
            cfg.insertion = mode;
            cfg.bottleneck = d;
            const auto report = count_parameters(cfg, TuningPolicy{});
            const double ratio = double(report.count(Role::kPatchWeight)) / double(report.count(Role::kConvWeight));
            const double bound = mode == InsertionMode::kSerialOnePerBlock ? 1.0 / 12 : 1.0 / 6;
            EXPECT_LE(ratio, bound + 1e-15);
            EXPECT_DOUBLE_EQ(ratio, double(patches_per_block(mode)) / 24.0);
        }
        EXPECT_EQ(2 * k * d * 12, 3 * k * k);  // 16 d^2 per patch vs 192 d^2 per layer
    }
}

TEST(CountParameters, EmptyStoreIsAllZero) {
    const auto report = count_parameters(ParameterStore{});
    EXPECT_EQ(report.total, 0u);
    EXPECT_EQ(report.frozen, 0u);
    EXPECT_EQ(report.tunable, 0u);
    EXPECT_TRUE(report.entries.empty());
}

TEST(CountParameters, ShapeOnlyMatchesLiveModel) {
    const TuningPolicy policy{FinetuneMode::kPeterRec};
    SequenceModel model = finetune_model(InsertionMode::kSerialOnePerBlock, policy);
    const auto live = count_parameters(model), shape_only = count_parameters(model.config(), policy);
    EXPECT_EQ(live.total, model.params().numel());
    EXPECT_EQ(live.total, shape_only.total);
    EXPECT_EQ(live.tunable, shape_only.tunable);
    EXPECT_EQ(live.tunable, model.params().numel(Partition::kTunable));
    std::uint64_t sum = 0;
    for (const auto& e : live.entries) sum += e.count;
    EXPECT_EQ(sum, live.total);
}

TEST(Partition, ModesSelectTheDocumentedSets) {
    auto tunable_names = [](const SequenceModel& m) {
        std::vector<std::string> out;
        for (const auto& p : m.params().items())
            if (p.partition == Partition::kTunable) out.push_back(p.name);
        return out;
    };
    const auto cls = tunable_names(finetune_model(InsertionMode::kNone, {FinetuneMode::kFineCls}));
    EXPECT_EQ(cls, (std::vector<std::string>{"task.weight", "task.bias"}));

    SequenceModel all = finetune_model(InsertionMode::kNone, {FinetuneMode::kFineAll});
    EXPECT_EQ(all.params().numel(Partition::kFrozen), 0u);
    EXPECT_FALSE(all.params().contains("head.weight"));

    SequenceModel peter = finetune_model(InsertionMode::kSerialOnePerBlock, {FinetuneMode::kPeterRec});
    for (const auto& p : peter.params().items()) {
        const bool expect = p.role == Role::kPatchWeight || p.role == Role::kPatchBias || p.role == Role::kTaskHead ||
                            p.role == Role::kTclEmbedding;
        EXPECT_EQ(p.partition == Partition::kTunable, expect) << p.name;
    }
    SequenceModel peter_ln = finetune_model(InsertionMode::kSerialOnePerBlock, {FinetuneMode::kPeterRec, 1, true});
    EXPECT_EQ(peter_ln.params().entry("block0.ln1.gain").partition, Partition::kTunable);
    EXPECT_EQ(peter.params().entry("block0.ln1.gain").partition, Partition::kFrozen);

    const auto last1 = tunable_names(finetune_model(InsertionMode::kNone, {FinetuneMode::kFineLast, 1}));
    EXPECT_EQ(last1, (std::vector<std::string>{"block1.conv2.weight", "block1.conv2.bias", "block1.ln2.gain",
                                               "block1.ln2.bias", "tcl", "task.weight", "task.bias"}));
    const auto last2 = tunable_names(finetune_model(InsertionMode::kNone, {FinetuneMode::kFineLast, 2}));
    EXPECT_EQ(last2.size(), 4u + 4u + 3u);
}

TEST(Partition, FrozenAndTunableAreDisjointAndExhaustive) {
    for (auto mode : {FinetuneMode::kPeterRec, FinetuneMode::kFineAll, FinetuneMode::kFineCls, FinetuneMode::kFineLast}) {
        SequenceModel m = finetune_model(uses_patches(mode) ? InsertionMode::kParallelBeforeNorm : InsertionMode::kNone, {mode});
        EXPECT_EQ(m.params().numel(Partition::kFrozen) + m.params().numel(Partition::kTunable), m.params().numel());
        for (const auto& p : m.params().items()) EXPECT_EQ(p.tensor.requires_grad(), p.partition == Partition::kTunable);
    }
}

TEST(Partition, GradientFlowAfterOneUpdate) {
    // Up projections start at zero, which blocks the gradient of the down
    // projections on the very first backward; after one update every tunable
    // tensor must receive gradient, and frozen ones never accumulate any.
    Rng rng(13);
    for (auto mode : kModes) {
        SequenceModel model = finetune_model(mode, {FinetuneMode::kPeterRec}, 14);
        AdamState adam;
        std::vector<Sequence> inputs;
        std::vector<std::int32_t> labels;
        for (int i = 0; i < 6; ++i) {
            Sequence s = fixture::random_items(7, 20, rng);
            s.push_back(ReservedIds::kTcl);
            inputs.push_back(s);
            labels.push_back(static_cast<std::int32_t>(rng.below(5)));
        }
        for (int step = 0; step < 2; ++step) {
            Tape tape;
            FinetuneBatch batch = make_finetune_batch(inputs, labels, LossKind::kCrossEntropy, 5, rng);
            Tensor loss = finetune_loss(tape, model, batch, LossKind::kCrossEntropy);
            tape.backward(loss);
            if (step == 1) {
                for (const auto& p : model.params().items()) {
                    if (p.partition == Partition::kFrozen) {
                        EXPECT_FALSE(p.tensor.has_grad()) << p.name;
                        continue;
                    }
                    bool nonzero = false;
                    for (float g : p.tensor.grad()) nonzero |= g != 0.0f;
                    EXPECT_TRUE(nonzero) << to_string(mode) << " " << p.name;
                }
            }
            adam_step(model.params(), adam);
        }
    }
}
