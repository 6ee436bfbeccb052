#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "peterrec/adapters.hpp"
#include "peterrec/corpus.hpp"
#include "peterrec/error.hpp"
#include "peterrec/model.hpp"
#include "peterrec/objectives.hpp"
#include "peterrec/optim.hpp"
#include "peterrec/random.hpp"

namespace peterrec {

inline constexpr std::size_t kTopK = 5;
inline constexpr std::size_t kSampledNegatives = 99;

inline double mrr_at_k(std::size_t rank, std::size_t k = kTopK) {
    require(rank >= 1, ErrorKind::kContract, "ranks start at 1");
    return rank <= k ? 1.0 / static_cast<double>(rank) : 0.0;
}

inline double hr_at_k(std::size_t rank, std::size_t k = kTopK) {
    require(rank >= 1, ErrorKind::kContract, "ranks start at 1");
    return rank <= k ? 1.0 : 0.0;
}

inline double accuracy(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels) {
    require(predictions.size() == labels.size(), ErrorKind::kDimension, "accuracy: predictions and labels differ in length");
    require(!labels.empty(), ErrorKind::kEmptyBatch, "accuracy of an empty set is undefined");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Constant predictor of the most frequent training label (smallest on ties).
struct MajorityClassifier {
    std::int32_t label = 0;
    std::vector<std::size_t> counts;

    std::int32_t predict() const noexcept { return label; }
};

inline MajorityClassifier labelcs_baseline(std::span<const std::int32_t> train_labels, std::size_t num_labels = 0) {
    require(!train_labels.empty(), ErrorKind::kEmptyBatch, "majority baseline needs training labels");
    const auto top = static_cast<std::size_t>(*std::max_element(train_labels.begin(), train_labels.end()));
    MajorityClassifier out;
    out.counts.assign(std::max(num_labels, top + 1), 0);
    for (auto y : train_labels) {
        require(y >= 0, ErrorKind::kIndex, "negative label");
        ++out.counts[static_cast<std::size_t>(y)];
    }
    out.label = static_cast<std::int32_t>(std::max_element(out.counts.begin(), out.counts.end()) - out.counts.begin());
    return out;
}

/// 1-based rank of candidate `truth` among `scores`. Candidates are visited
/// in a seeded shuffled order and ties are resolved by that order.
inline std::size_t rank_of(std::span<const float> scores, std::size_t truth, Rng& tie_rng) {
    require(truth < scores.size(), ErrorKind::kIndex, "true candidate outside the score list");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    tie_rng.shuffle(order);
    const float s = scores[truth];
    std::size_t rank = 1;
    bool before = true;
    for (auto c : order) {
        if (c == truth) {
            before = false;
            continue;
        }
        rank += scores[c] > s || (before && scores[c] == s);
    }
    return rank;
}

/// The true label followed by `count` distinct labels drawn uniformly from
/// the rest of the label space (all of them when fewer remain).
inline std::vector<std::int32_t> sample_candidates(std::int32_t truth, std::size_t num_labels, std::size_t count, Rng& rng) {
    require(truth >= 0 && static_cast<std::size_t>(truth) < num_labels, ErrorKind::kIndex, "true label outside the label space");
    const std::size_t others = num_labels - 1;
    std::vector<std::int32_t> out{truth};
    if (count >= others) {
        for (std::size_t y = 0; y < num_labels; ++y) {
            if (static_cast<std::int32_t>(y) != truth) out.push_back(static_cast<std::int32_t>(y));
        }
        return out;
    }
    // Floyd's algorithm over the others, indexed with the truth skipped.
    std::vector<std::size_t> picked;
    for (std::size_t j = others - count; j < others; ++j) {
        const auto t = static_cast<std::size_t>(rng.below(j + 1));
        picked.push_back(std::find(picked.begin(), picked.end(), t) == picked.end() ? t : j);
    }
    for (auto p : picked) out.push_back(static_cast<std::int32_t>(p) >= truth ? static_cast<std::int32_t>(p) + 1 : static_cast<std::int32_t>(p));
    return out;
}

struct RankMetrics {
    double mrr = 0.0;
    double hr = 0.0;
};

/// Sampled-negative protocol over full score rows [N x |Y|]: per instance the
/// truth plus `negatives` sampled labels; the stream for instance i is
/// split(i) of `run_rng`, so every epoch and every mode sees the same lists.
inline RankMetrics ranking_metrics(std::span<const float> scores, std::size_t num_labels, std::span<const std::int32_t> truth,
                                   const Rng& run_rng, std::size_t negatives = kSampledNegatives) {
    require(scores.size() == truth.size() * num_labels, ErrorKind::kDimension, "ranking: score rows do not match labels");
    require(!truth.empty(), ErrorKind::kEmptyBatch, "ranking an empty set");
    RankMetrics m;
    std::vector<float> cand;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        Rng rng = run_rng.split(i);
        const auto ids = sample_candidates(truth[i], num_labels, negatives, rng);
        cand.clear();
        for (auto y : ids) cand.push_back(scores[i * num_labels + static_cast<std::size_t>(y)]);
        const auto rank = rank_of(cand, 0, rng);
        m.mrr += mrr_at_k(rank);
        m.hr += hr_at_k(rank);
    }
    m.mrr /= static_cast<double>(truth.size());
    m.hr /= static_cast<double>(truth.size());
    return m;
}

// ---------------------------------------------------------------- pretraining

enum class Objective : std::uint8_t { kAutoregressive, kMasked };

inline std::string_view to_string(Objective o) { return o == Objective::kAutoregressive ? "ar" : "masked"; }

inline Objective parse_objective(std::string_view text) {
    if (text == "ar") return Objective::kAutoregressive;
    if (text == "masked") return Objective::kMasked;
    fail(ErrorKind::kConfig, "unknown objective '" + std::string(text) + "' (expected ar or masked)");
}

inline void check_objective(Objective objective, bool causal) {
    require(objective != Objective::kMasked || !causal, ErrorKind::kConfig,
            "masked pre-training needs a non-causal backbone: a causal convolution cannot see the masked neighbours");
    require(objective != Objective::kAutoregressive || causal, ErrorKind::kConfig,
            "autoregressive pre-training needs a causal backbone, otherwise the next item leaks into its own prediction");
}

struct PretrainOptions {
    std::size_t epochs = 5;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    double mask_rate = 0.3;
    double train_fraction = 0.9;
    std::size_t max_valid_users = 1000;
    std::uint64_t seed = 0;
};

struct PretrainEpoch {
    std::size_t epoch = 0;
    double loss = 0.0;
    double valid_mrr = 0.0;
    double valid_hr = 0.0;
};

/// Users split train/validation by a seeded shuffle; validation users are
/// capped at max_valid_users.
struct PretrainSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> valid;
};

inline PretrainSplit split_source(std::size_t users, const PretrainOptions& options) {
    std::vector<std::size_t> order(users);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng(options.seed).split("pretrain-split");
    rng.shuffle(order);
    const auto n_train = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(options.train_fraction * double(users))), 1, users);
    PretrainSplit out;
    out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.valid.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    if (out.valid.size() > options.max_valid_users) out.valid.resize(options.max_valid_users);
    return out;
}

/// Ranks each user's final item against the whole item pool, predicting it
/// from the preceding items (causal) or from a MASK in its place.
inline RankMetrics full_pool_metrics(const SequenceModel& model, const SourceDataset& data, std::span<const std::size_t> users,
                                     std::uint64_t seed) {
    const auto& cfg = model.config();
    const std::size_t n = data.length, vocab = static_cast<std::size_t>(cfg.backbone.vocab_size);
    Rng tie_root = Rng(seed).split("pool-ties");
    RankMetrics m;
    std::size_t counted = 0;
    constexpr std::size_t kChunk = 128;
    for (std::size_t start = 0; start < users.size(); start += kChunk) {
        const std::size_t end = std::min(users.size(), start + kChunk);
        std::vector<Sequence> inputs;
        std::vector<std::int32_t> truth;
        for (std::size_t i = start; i < end; ++i) {
            Sequence s = data.sequences[users[i]];
            const auto target = s.back();
            if (cfg.backbone.causal) {
                s.pop_back();
                s.insert(s.begin(), ReservedIds::kPad);
            } else {
                s.back() = ReservedIds::kMask;
            }
            inputs.push_back(std::move(s));
            truth.push_back(target);
        }
        Tape tape = Tape::inference();
        Tensor h = model.hidden(tape, detail::stack(inputs));
        std::vector<std::size_t> rows;
        for (std::size_t b = 0; b < inputs.size(); ++b) rows.push_back(b * n + n - 1);
        Tensor logits = model.pretrain_logits(tape, gather_rows(tape, h, rows));
        const auto values = logits.data();
        std::vector<float> pool(vocab - ReservedIds::kFirstItem);
        for (std::size_t b = 0; b < inputs.size(); ++b) {
            std::copy(values.begin() + static_cast<std::ptrdiff_t>(b * vocab + ReservedIds::kFirstItem),
                      values.begin() + static_cast<std::ptrdiff_t>((b + 1) * vocab), pool.begin());
            Rng tie = tie_root.split(start + b);
            const auto rank = rank_of(pool, static_cast<std::size_t>(truth[b] - ReservedIds::kFirstItem), tie);
            m.mrr += mrr_at_k(rank);
            m.hr += hr_at_k(rank);
            ++counted;
        }
    }
    require(counted > 0, ErrorKind::kEmptyBatch, "no validation users");
    m.mrr /= double(counted);
    m.hr /= double(counted);
    return m;
}

/// Expected MRR@k of a scorer that ranks uniformly at random among `pool` items.
inline double random_mrr(std::size_t pool, std::size_t k = kTopK) {
    double s = 0;
    for (std::size_t r = 1; r <= std::min(k, pool); ++r) s += 1.0 / double(r);
    return s / double(pool);
}

inline std::vector<PretrainEpoch> pretrain(SequenceModel& model, const SourceDataset& data, const PretrainOptions& options,
                                           const std::function<void(const PretrainEpoch&)>& on_epoch = {}) {
    const auto& bb = model.config().backbone;
    const Objective objective = bb.causal ? Objective::kAutoregressive : Objective::kMasked;
    require(model.config().pretrain_head, ErrorKind::kConfig, "pre-training needs the softmax head");
    require(data.vocab_size <= bb.vocab_size, ErrorKind::kVocabulary, "dataset vocabulary exceeds the model's");
    require(options.batch_size > 0 && options.epochs > 0, ErrorKind::kConfig, "batch size and epochs must be positive");
    const auto split = split_source(data.size(), options);
    Rng root = Rng(options.seed).split("pretrain");
    AdamState adam(options.learning_rate);
    std::vector<PretrainEpoch> history;
    for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
        Rng rng = root.split(epoch);
        auto order = split.train;
        rng.shuffle(order);
        double total = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            std::vector<Sequence> seqs;
            for (std::size_t i = start; i < std::min(order.size(), start + options.batch_size); ++i) {
                seqs.push_back(data.sequences[order[i]]);
            }
            const PretrainBatch batch = objective == Objective::kAutoregressive ? make_ar_batch(seqs)
                                                                               : make_masked_batch(seqs, options.mask_rate, rng);
            if (std::none_of(batch.mask.begin(), batch.mask.end(), [](auto m) { return m != 0; })) continue;
            Tape tape;
            Tensor loss = pretrain_loss(tape, model, batch, &rng);
            tape.backward(loss);
            adam_step(model.params(), adam);
            total += loss.item();
            ++batches;
        }
        PretrainEpoch record{epoch, batches ? total / double(batches) : 0.0, 0.0, 0.0};
        if (!split.valid.empty()) {
            const auto m = full_pool_metrics(model, data, split.valid, options.seed);
            record.valid_mrr = m.mrr;
            record.valid_hr = m.hr;
        }
        history.push_back(record);
        if (on_epoch) on_epoch(record);
    }
    return history;
}

// ------------------------------------------------------------ fine-tuning runs

struct ExperimentPlan {
    FinetuneMode mode = FinetuneMode::kPeterRec;
    InsertionMode insertion = InsertionMode::kSerialOnePerBlock;
    std::size_t bottleneck = 8;
    HeadMode head = HeadMode::kCausalEndTcl;
    std::size_t last_layers = 1;
    bool tune_layernorm = false;
    std::optional<LossKind> loss;  // defaults by task: CE for classification, BPR for item-rec
    double data_fraction = 1.0;
    std::uint64_t seed = 0;
    std::size_t epochs = 10;
    std::size_t steps_per_epoch = 0;  // 0: one pass over the training instances
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    std::size_t negatives = kSampledNegatives;
    bool record_timing = false;

    void validate() const {
        require(data_fraction > 0.0 && data_fraction <= 1.0, ErrorKind::kConfig, "data fraction must be in (0, 1]");
        require(epochs > 0 && batch_size > 0, ErrorKind::kConfig, "epochs and batch size must be positive");
        require(learning_rate > 0.0, ErrorKind::kConfig, "learning rate must be positive");
        require(mode != FinetuneMode::kFineLast || last_layers >= 1, ErrorKind::kConfig, "FineLast needs at least one layer");
        require(!uses_patches(mode) || (insertion != InsertionMode::kNone && bottleneck >= 1), ErrorKind::kConfig,
                "patch modes need an insertion mode and a positive bottleneck");
    }

    TuningPolicy policy() const { return TuningPolicy{mode, last_layers, tune_layernorm}; }

    LossKind loss_for(TaskKind task) const {
        if (loss) return *loss;
        return task == TaskKind::kClassification ? LossKind::kCrossEntropy : LossKind::kBpr;
    }

    /// Canonical `key=value` lines; the plan hash is taken over this text.
    std::string canonical() const {
        std::ostringstream out;
        char lr[32];
        std::snprintf(lr, sizeof lr, "%.17g", learning_rate);
        char frac[32];
        std::snprintf(frac, sizeof frac, "%.17g", data_fraction);
        out << "mode=" << to_string(mode) << "\ninsertion=" << to_string(insertion) << "\nbottleneck=" << bottleneck
            << "\nhead=" << to_string(head) << "\nlast_layers=" << last_layers << "\ntune_layernorm=" << tune_layernorm
            << "\nloss=" << (loss ? std::string(to_string(*loss)) : std::string("auto")) << "\ndata_fraction=" << frac
            << "\nseed=" << seed << "\nepochs=" << epochs << "\nsteps_per_epoch=" << steps_per_epoch
            << "\nbatch_size=" << batch_size << "\nlearning_rate=" << lr << "\nnegatives=" << negatives << "\n";
        return out.str();
    }

    std::string hash() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(canonical())));
        return buf;
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    std::map<std::string, double> valid;
    std::map<std::string, double> test;
    double elapsed_seconds = 0.0;
};

struct ExperimentReport {
    std::string plan_hash;
    std::string mode;
    std::vector<EpochRecord> epochs;
    std::map<std::string, double> final_test;
    std::uint64_t tunable = 0;
    std::uint64_t total = 0;
    double tunable_fraction = 0.0;
    double elapsed_seconds = 0.0;
    std::vector<std::string> warnings;

    /// Final-epoch test value of the task's headline metric.
    double headline() const { return final_test.count("acc") ? final_test.at("acc") : final_test.at("mrr5"); }

    /// Headline metric per epoch on the test split.
    std::vector<double> test_curve() const {
        std::vector<double> out;
        const std::string key = final_test.count("acc") ? "acc" : "mrr5";
        for (const auto& e : epochs) out.push_back(e.test.at(key));
        return out;
    }
};

struct ExperimentInputs {
    const SourceDataset& source;
    const TargetDataset& target;
    TargetSplit split;
    BackboneConfig backbone;                     // architecture for the *Zero modes without a checkpoint
    const SequenceModel* pretrained = nullptr;   // required by every non-Zero model mode
};

namespace detail {

inline std::vector<Sequence> finetune_inputs(const ExperimentInputs& in, std::span<const std::size_t> instances, HeadMode head,
                                             bool causal) {
    std::vector<Sequence> out;
    out.reserve(instances.size());
    for (auto i : instances) {
        out.push_back(build_finetune_input(in.source.sequences[in.source.index_of(in.target.users[i])], head, causal));
    }
    return out;
}

inline std::vector<std::int32_t> labels_of(const TargetDataset& target, std::span<const std::size_t> instances) {
    std::vector<std::int32_t> out;
    for (auto i : instances) out.push_back(target.labels[i]);
    return out;
}

/// Score rows [N x |Y|] in inference mode.
inline std::vector<float> score_all(const SequenceModel& model, std::span<const Sequence> inputs) {
    std::vector<float> out;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
        const auto chunk = inputs.subspan(start, std::min(kChunk, inputs.size() - start));
        Tape tape = Tape::inference();
        Tensor s = model.task_scores(tape, model.hidden(tape, stack(chunk)));
        out.insert(out.end(), s.data().begin(), s.data().end());
    }
    return out;
}

inline std::map<std::string, double> task_metrics(std::span<const float> scores, std::span<const std::int32_t> labels,
                                                  const TargetDataset& target, const Rng& run_rng, std::size_t negatives) {
    const std::size_t L = target.num_labels;
    if (target.kind == TaskKind::kClassification) {
        std::vector<std::int32_t> pred(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const auto row = scores.subspan(i * L, L);
            pred[i] = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
        }
        return {{"acc", accuracy(pred, labels)}};
    }
    const auto m = ranking_metrics(scores, L, labels, run_rng, negatives);
    return {{"hr5", m.hr}, {"mrr5", m.mrr}};
}

} // namespace detail

/// Builds the fine-tune model for a plan: checkpoint (or fresh init for the
/// *Zero modes), task head, patches, partition.
inline SequenceModel build_finetune_model(const ExperimentPlan& plan, const ExperimentInputs& in) {
    const bool zero = is_zero_init(plan.mode);
    require(zero || in.pretrained != nullptr, ErrorKind::kConfig,
            std::string("mode ") + std::string(to_string(plan.mode)) + " needs a pre-trained checkpoint");
    ModelConfig arch;
    arch.backbone = in.pretrained ? in.pretrained->config().backbone : in.backbone;
    Rng seeds = Rng(plan.seed).split("finetune-init");
    SequenceModel model = zero ? SequenceModel(arch, seeds.split("backbone").next_u64()) : in.pretrained->clone();
    attach_task_head(model, in.target.num_labels, plan.head, seeds.split("head").next_u64());
    if (uses_patches(plan.mode)) insert_patches(model, plan.insertion, plan.bottleneck, seeds.split("patches").next_u64());
    apply_partition(model, plan.policy());
    return model;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains and evaluates one plan. When `trained` is given it receives the
/// fine-tuned model (left empty for LabelCS).
inline ExperimentReport run_experiment(const ExperimentPlan& plan, const ExperimentInputs& in, const EpochCallback& on_epoch = {},
                                       std::optional<SequenceModel>* trained = nullptr) {
    plan.validate();
    const auto started = std::chrono::steady_clock::now();
    auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count(); };

    ExperimentReport report;
    report.plan_hash = plan.hash();
    report.mode = std::string(to_string(plan.mode));
    const LossKind loss_kind = plan.loss_for(in.target.kind);
    if ((loss_kind == LossKind::kBpr) != (in.target.kind == TaskKind::kItemRecommendation)) {
        report.warnings.push_back(std::string("loss ") + std::string(to_string(loss_kind)) + " used for a " +
                                  std::string(to_string(in.target.kind)) + " task");
    }

    std::vector<std::size_t> train = in.split.train;
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(plan.data_fraction * double(train.size()))));
    train.resize(std::min(keep, train.size()));
    const auto train_labels = detail::labels_of(in.target, train);
    const auto valid_labels = detail::labels_of(in.target, in.split.valid);
    const auto test_labels = detail::labels_of(in.target, in.split.test);
    const Rng eval_rng = Rng(plan.seed).split("eval-negatives");
    const Rng valid_rng = eval_rng.split("valid"), test_rng = eval_rng.split("test");

    if (plan.mode == FinetuneMode::kLabelCs) {
        const auto clf = labelcs_baseline(train_labels, in.target.num_labels);
        auto constant = [&](std::size_t rows) {
            std::vector<float> s;
            for (std::size_t r = 0; r < rows; ++r)
                for (auto c : clf.counts) s.push_back(static_cast<float>(c));
            return s;
        };
        EpochRecord record{1, 0.0, {}, {}, 0.0};
        if (!valid_labels.empty())
            record.valid = detail::task_metrics(constant(valid_labels.size()), valid_labels, in.target, valid_rng, plan.negatives);
        record.test = detail::task_metrics(constant(test_labels.size()), test_labels, in.target, test_rng, plan.negatives);
        record.elapsed_seconds = plan.record_timing ? seconds() : 0.0;
        report.epochs.push_back(record);
        report.final_test = record.test;
        report.elapsed_seconds = record.elapsed_seconds;
        if (on_epoch) on_epoch(record);
        return report;
    }

    SequenceModel model = build_finetune_model(plan, in);
    const bool causal = model.config().backbone.causal;
    const auto counts = count_parameters(model);
    report.tunable = counts.tunable;
    report.total = counts.total;
    report.tunable_fraction = counts.tunable_fraction();

    const auto train_inputs = detail::finetune_inputs(in, train, plan.head, causal);
    const auto valid_inputs = detail::finetune_inputs(in, in.split.valid, plan.head, causal);
    const auto test_inputs = detail::finetune_inputs(in, in.split.test, plan.head, causal);

    AdamState adam(plan.learning_rate);
    Rng root = Rng(plan.seed).split("finetune-steps");
    const std::size_t steps = plan.steps_per_epoch ? plan.steps_per_epoch
                                                   : (train.size() + plan.batch_size - 1) / plan.batch_size;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    Rng shuffle_rng = root.split("order");
    Rng negative_rng = root.split("negatives");

    for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
        double total = 0;
        for (std::size_t step = 0; step < steps; ++step) {
            std::vector<Sequence> inputs;
            std::vector<std::int32_t> labels;
            while (inputs.size() < std::min(plan.batch_size, order.size())) {
                if (cursor == order.size()) {
                    shuffle_rng.shuffle(order);
                    cursor = 0;
                }
                inputs.push_back(train_inputs[order[cursor]]);
                labels.push_back(train_labels[order[cursor]]);
                ++cursor;
            }
            const auto batch = make_finetune_batch(inputs, labels, loss_kind, in.target.num_labels, negative_rng);
            Tape tape;
            Tensor loss = finetune_loss(tape, model, batch, loss_kind);
            tape.backward(loss);
            adam_step(model.params(), adam);
            total += loss.item();
        }
        EpochRecord record{epoch, total / double(steps), {}, {}, 0.0};
        if (!valid_inputs.empty())
            record.valid = detail::task_metrics(detail::score_all(model, valid_inputs), valid_labels, in.target, valid_rng, plan.negatives);
        record.test = detail::task_metrics(detail::score_all(model, test_inputs), test_labels, in.target, test_rng, plan.negatives);
        record.elapsed_seconds = plan.record_timing ? seconds() : 0.0;
        report.epochs.push_back(record);
        if (on_epoch) on_epoch(record);
    }
    report.final_test = report.epochs.back().test;
    report.elapsed_seconds = plan.record_timing ? seconds() : 0.0;
    if (trained) trained->emplace(std::move(model));
    return report;
}

/// Task metrics of a fine-tuned model on one split, with the same negative
/// lists run_experiment uses for that split name and seed.
inline std::map<std::string, double> evaluate_split(const SequenceModel& model, const ExperimentInputs& in,
                                                    std::span<const std::size_t> instances, std::uint64_t seed,
                                                    const std::string& split_name, std::size_t negatives = kSampledNegatives) {
    const auto& cfg = model.config();
    require(cfg.has_task_head(), ErrorKind::kConfig, "evaluation needs a fine-tuned model with a task head");
    require(cfg.num_labels == in.target.num_labels, ErrorKind::kConfig,
            "model has " + std::to_string(cfg.num_labels) + " labels, target has " + std::to_string(in.target.num_labels));
    require(!instances.empty(), ErrorKind::kEmptyBatch, "split '" + split_name + "' is empty");
    const auto inputs = detail::finetune_inputs(in, instances, cfg.head, cfg.backbone.causal);
    const auto labels = detail::labels_of(in.target, instances);
    const Rng rng = Rng(seed).split("eval-negatives").split(split_name);
    return detail::task_metrics(detail::score_all(model, inputs), labels, in.target, rng, negatives);
}

// ------------------------------------------------------------------- reports

inline nlohmann::ordered_json to_json(const EpochRecord& e, const std::string& plan_hash, double tunable_fraction, bool timing) {
    nlohmann::ordered_json j;
    j["record"] = "epoch";
    j["plan"] = plan_hash;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    for (const auto& [k, v] : e.valid) j["valid_" + k] = v;
    for (const auto& [k, v] : e.test) j["test_" + k] = v;
    j["tunable_fraction"] = tunable_fraction;
    if (timing) j["elapsed_s"] = e.elapsed_seconds;
    return j;
}

inline nlohmann::ordered_json summary_json(const ExperimentReport& r, bool timing) {
    nlohmann::ordered_json j;
    j["record"] = "summary";
    j["plan"] = r.plan_hash;
    j["mode"] = r.mode;
    j["epochs"] = r.epochs.size();
    for (const auto& [k, v] : r.final_test) j["test_" + k] = v;
    j["tunable"] = r.tunable;
    j["total"] = r.total;
    j["tunable_fraction"] = r.tunable_fraction;
    if (!r.warnings.empty()) j["warnings"] = r.warnings;
    if (timing) j["elapsed_s"] = r.elapsed_seconds;
    return j;
}

/// One JSON object per line: every epoch, then the summary. Wall-clock
/// fields appear only when `timing` is set, so reports of the same plan are
/// byte-identical by default.
inline void write_report(std::ostream& out, const ExperimentReport& r, bool timing = false) {
    for (const auto& e : r.epochs) out << to_json(e, r.plan_hash, r.tunable_fraction, timing).dump() << '\n';
    out << summary_json(r, timing).dump() << '\n';
}

} // namespace peterrec
