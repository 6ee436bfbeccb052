#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peterrec/backbone.hpp"
#include "peterrec/error.hpp"
#include "peterrec/model.hpp"
#include "peterrec/ops.hpp"
#include "peterrec/random.hpp"

namespace peterrec {

using Sequence = std::vector<std::int32_t>;

/// Token ids plus per-position targets; mask selects the positions that count.
struct PretrainBatch {
    TokenBatch inputs;
    std::vector<std::int32_t> targets;
    std::vector<std::uint8_t> mask;
};

namespace detail {

inline TokenBatch stack(std::span<const Sequence> seqs) {
    require(!seqs.empty(), ErrorKind::kEmptyBatch, "batch has no sequences");
    TokenBatch out;
    out.batch = seqs.size();
    out.length = seqs.front().size();
    require(out.length > 0, ErrorKind::kDimension, "sequences must be non-empty");
    out.ids.reserve(out.batch * out.length);
    for (const auto& s : seqs) {
        require(s.size() == out.length, ErrorKind::kDimension,
                "sequences in a batch must share one length, got " + std::to_string(s.size()) + " and " +
                    std::to_string(out.length));
        out.ids.insert(out.ids.end(), s.begin(), s.end());
    }
    return out;
}

} // namespace detail

/// Left-to-right targets: position t predicts the item at t+1. The last
/// position has no target, and positions whose context is still pure padding
/// (or whose target is padding) are masked out.
inline PretrainBatch make_ar_batch(std::span<const Sequence> seqs) {
    PretrainBatch out{detail::stack(seqs), {}, {}};
    const std::size_t n = out.inputs.length;
    out.targets.assign(out.inputs.ids.size(), ReservedIds::kPad);
    out.mask.assign(out.inputs.ids.size(), 0);
    for (std::size_t b = 0; b < out.inputs.batch; ++b) {
        for (std::size_t t = 0; t + 1 < n; ++t) {
            const auto cur = out.inputs.at(b, t), next = out.inputs.at(b, t + 1);
            out.targets[b * n + t] = next;
            out.mask[b * n + t] = cur != ReservedIds::kPad && next >= ReservedIds::kFirstItem;
        }
    }
    return out;
}

struct MaskedSequence {
    Sequence tokens;
    std::vector<std::size_t> positions;  // ascending
};

/// Number of positions masked out of `count` items: ceil(rate * count), at least one.
inline std::size_t mask_count(std::size_t count, double rate) {
    // The small slack keeps products like 0.3 * 10 from rounding up to 4.
    const auto m = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(count) - 1e-9));
    return std::clamp<std::size_t>(m, 1, count);
}

/// Replaces ceil(rate * #items) distinct non-PAD positions with MASK.
inline MaskedSequence mask_sequence(const Sequence& seq, double rate, Rng& rng) {
    require(rate > 0.0 && rate <= 1.0, ErrorKind::kConfig, "mask rate must be in (0, 1]");
    std::vector<std::size_t> items;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        if (seq[t] != ReservedIds::kPad) items.push_back(t);
    }
    require(!items.empty(), ErrorKind::kEmptyBatch, "cannot mask a sequence with no items");
    rng.shuffle(items);
    items.resize(mask_count(items.size(), rate));
    std::sort(items.begin(), items.end());
    MaskedSequence out{seq, items};
    for (auto t : items) out.tokens[t] = ReservedIds::kMask;
    return out;
}

/// Inputs with MASK at the chosen positions; targets are the hidden items.
inline PretrainBatch make_masked_batch(std::span<const Sequence> seqs, double rate, Rng& rng) {
    PretrainBatch out;
    out.inputs = detail::stack(seqs);
    const std::size_t n = out.inputs.length;
    out.targets.assign(out.inputs.ids.size(), ReservedIds::kPad);
    out.mask.assign(out.inputs.ids.size(), 0);
    for (std::size_t b = 0; b < seqs.size(); ++b) {
        const auto m = mask_sequence(seqs[b], rate, rng);
        for (auto t : m.positions) {
            out.targets[b * n + t] = seqs[b][t];
            out.mask[b * n + t] = 1;
            out.inputs.ids[b * n + t] = ReservedIds::kMask;
        }
    }
    return out;
}

namespace detail {

inline Tensor flatten_rows(Tape& tape, const Tensor& logits) {
    if (logits.rank() == 2) return logits;
    return reshape(tape, logits, Shape{logits.numel() / logits.shape().back(), logits.shape().back()});
}

inline std::vector<std::size_t> selected_rows(const PretrainBatch& batch) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < batch.mask.size(); ++i) {
        if (batch.mask[i]) rows.push_back(i);
    }
    require(!rows.empty(), ErrorKind::kEmptyBatch, "loss mask selects no positions");
    return rows;
}

} // namespace detail

/// Mean next-item cross-entropy over masked-in positions of [b x n x |X|] logits.
inline Tensor ar_loss(Tape& tape, const Tensor& logits, const PretrainBatch& batch) {
    return softmax_cross_entropy(tape, detail::flatten_rows(tape, logits), batch.targets, batch.mask);
}

/// Mean cross-entropy over the masked positions only.
inline Tensor masked_loss(Tape& tape, const Tensor& logits, const PretrainBatch& batch) {
    for (std::size_t i = 0; i < batch.mask.size(); ++i) {
        if (batch.mask[i] && batch.inputs.ids[i] != ReservedIds::kMask) {
            fail(ErrorKind::kContract, "masked_loss: target position " + std::to_string(i) + " is not masked in the input");
        }
    }
    return softmax_cross_entropy(tape, detail::flatten_rows(tape, logits), batch.targets, batch.mask);
}

/// Same value as ar_loss/masked_loss on the full logits, but only the rows
/// that carry a target are projected onto the vocabulary.
inline Tensor pretrain_loss(Tape& tape, const SequenceModel& model, const PretrainBatch& batch, Rng* dropout_rng = nullptr) {
    const auto rows = detail::selected_rows(batch);
    Tensor h = model.hidden(tape, batch.inputs, dropout_rng);
    Tensor logits = model.pretrain_logits(tape, gather_rows(tape, h, rows));
    std::vector<std::int32_t> targets(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) targets[i] = batch.targets[rows[i]];
    return softmax_cross_entropy(tape, logits, targets);
}

/// -log sigmoid(pos - neg), evaluated as softplus(neg - pos).
inline double bpr_loss(double score_pos, double score_neg) { return stable_softplus(score_neg - score_pos); }

/// Mean BPR loss of a batch of score rows [B x |Y|].
inline Tensor bpr_loss(Tape& tape, const Tensor& scores, std::span<const std::int32_t> positives,
                       std::span<const std::int32_t> negatives) {
    require(positives.size() == negatives.size(), ErrorKind::kDimension, "bpr_loss: one negative per positive required");
    for (std::size_t i = 0; i < positives.size(); ++i) {
        require(positives[i] != negatives[i], ErrorKind::kContract, "bpr_loss: negative equals the positive label");
    }
    return mean(tape, softplus(tape, sub(tape, pick(tape, scores, negatives), pick(tape, scores, positives))));
}

/// Uniform draw from {0..num_labels-1} \ {label}.
inline std::int32_t sample_negative(std::int32_t label, std::size_t num_labels, Rng& rng) {
    require(num_labels >= 2, ErrorKind::kConfig, "negative sampling needs at least two labels");
    require(label >= 0 && static_cast<std::size_t>(label) < num_labels, ErrorKind::kIndex,
            "label " + std::to_string(label) + " outside the label space");
    const auto r = static_cast<std::int32_t>(rng.below(num_labels - 1));
    return r >= label ? r + 1 : r;
}

enum class LossKind : std::uint8_t { kCrossEntropy, kBpr };

inline std::string_view to_string(LossKind kind) { return kind == LossKind::kCrossEntropy ? "ce" : "bpr"; }

inline LossKind parse_loss_kind(std::string_view text) {
    if (text == "ce") return LossKind::kCrossEntropy;
    if (text == "bpr") return LossKind::kBpr;
    fail(ErrorKind::kConfig, "unknown loss '" + std::string(text) + "' (expected ce or bpr)");
}

/// Fine-tune inputs already carry their [TCL] tokens; negatives are filled
/// only for BPR.
struct FinetuneBatch {
    TokenBatch inputs;
    std::vector<std::int32_t> labels;
    std::vector<std::int32_t> negatives;
};

inline FinetuneBatch make_finetune_batch(std::span<const Sequence> inputs, std::span<const std::int32_t> labels,
                                         LossKind kind, std::size_t num_labels, Rng& rng) {
    require(inputs.size() == labels.size(), ErrorKind::kDimension, "one label per fine-tune sequence required");
    FinetuneBatch out{detail::stack(inputs), {labels.begin(), labels.end()}, {}};
    if (kind == LossKind::kBpr) {
        for (auto y : labels) out.negatives.push_back(sample_negative(y, num_labels, rng));
    }
    return out;
}

inline Tensor finetune_loss(Tape& tape, const SequenceModel& model, const FinetuneBatch& batch, LossKind kind,
                            Rng* dropout_rng = nullptr) {
    Tensor scores = model.task_scores(tape, model.hidden(tape, batch.inputs, dropout_rng));
    if (kind == LossKind::kCrossEntropy) {
        return softmax_cross_entropy(tape, scores, batch.labels);
    }
    return bpr_loss(tape, scores, batch.labels, batch.negatives);
}

} // namespace peterrec
