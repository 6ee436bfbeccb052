#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "peterrec/error.hpp"
#include "peterrec/model.hpp"
#include "peterrec/params.hpp"
#include "peterrec/patch.hpp"

namespace peterrec {

/// Fine-tuning strategies. The *Zero variants share their partner's partition
/// but start from random weights instead of a pre-trained checkpoint.
enum class FinetuneMode : std::uint8_t {
    kPeterRec,
    kPeterZero,
    kFineAll,
    kFineZero,
    kFineCls,
    kFineLast,
    kLabelCs,
};

inline std::string_view to_string(FinetuneMode mode) {
    switch (mode) {
        case FinetuneMode::kPeterRec: return "peterrec";
        case FinetuneMode::kPeterZero: return "peterzero";
        case FinetuneMode::kFineAll: return "fineall";
        case FinetuneMode::kFineZero: return "finezero";
        case FinetuneMode::kFineCls: return "finecls";
        case FinetuneMode::kFineLast: return "finelast";
        case FinetuneMode::kLabelCs: return "labelcs";
    }
    return "unknown";
}

inline FinetuneMode parse_finetune_mode(std::string_view text) {
    for (auto mode : {FinetuneMode::kPeterRec, FinetuneMode::kPeterZero, FinetuneMode::kFineAll, FinetuneMode::kFineZero,
                      FinetuneMode::kFineCls, FinetuneMode::kFineLast, FinetuneMode::kLabelCs}) {
        if (text == to_string(mode)) return mode;
    }
    fail(ErrorKind::kConfig, "unknown fine-tune mode '" + std::string(text) + "'");
}

inline bool is_zero_init(FinetuneMode mode) { return mode == FinetuneMode::kPeterZero || mode == FinetuneMode::kFineZero; }
inline bool uses_patches(FinetuneMode mode) { return mode == FinetuneMode::kPeterRec || mode == FinetuneMode::kPeterZero; }

struct TuningPolicy {
    FinetuneMode mode = FinetuneMode::kPeterRec;
    std::size_t last_layers = 1;  // FineLast only
    bool tune_layernorm = false;  // PeterRec/PeterZero only
};

/// Frozen or tunable for one parameter under `policy`. The task head is
/// always tunable and the pre-training head always frozen. The [TCL] row is
/// tunable except under FineCLS, which keeps the whole input side fixed and
/// uses the network purely as a feature extractor.
inline Partition partition_for(const ParameterSpec& spec, const TuningPolicy& policy, const ModelConfig& cfg) {
    const auto tunable_if = [](bool c) { return c ? Partition::kTunable : Partition::kFrozen; };
    switch (spec.role) {
        case Role::kTaskHead: return Partition::kTunable;
        case Role::kTclEmbedding: return tunable_if(policy.mode != FinetuneMode::kFineCls);
        case Role::kPretrainHead: return Partition::kFrozen;
        default: break;
    }
    switch (policy.mode) {
        case FinetuneMode::kFineAll:
        case FinetuneMode::kFineZero: return Partition::kTunable;
        case FinetuneMode::kPeterRec:
        case FinetuneMode::kPeterZero:
            if (spec.role == Role::kPatchWeight || spec.role == Role::kPatchBias) return Partition::kTunable;
            return tunable_if(spec.role == Role::kLayerNorm && policy.tune_layernorm);
        case FinetuneMode::kFineLast: {
            const auto layers = static_cast<int>(2 * cfg.backbone.num_blocks());
            const bool trailing = spec.layer >= layers - static_cast<int>(policy.last_layers);
            return tunable_if(spec.layer >= 0 && trailing &&
                              (spec.role == Role::kConvWeight || spec.role == Role::kConvBias ||
                               spec.role == Role::kLayerNorm));
        }
        case FinetuneMode::kFineCls:
        case FinetuneMode::kLabelCs: return Partition::kFrozen;
    }
    return Partition::kFrozen;
}

/// Grafts patches of width d into every residual block of a pre-trained model.
/// Up projections start at zero so the model computes exactly what it did before.
inline void insert_patches(SequenceModel& model, InsertionMode mode, std::size_t d, std::uint64_t seed) {
    require(mode != InsertionMode::kNone, ErrorKind::kConfig, "insert_patches: insertion mode must be b, c, d or e");
    require(model.config().insertion == InsertionMode::kNone, ErrorKind::kConfig, "insert_patches: model is already patched");
    require(d >= 1, ErrorKind::kConfig, "insert_patches: bottleneck d must be >= 1");
    ModelConfig next = model.config();
    next.insertion = mode;
    next.bottleneck = d;
    model.reconfigure(std::move(next), seed);
}

/// Replaces the pre-training head with a task head over `num_labels` classes.
inline void attach_task_head(SequenceModel& model, std::size_t num_labels, HeadMode head, std::uint64_t seed) {
    require(num_labels >= 1, ErrorKind::kConfig, "task head needs at least one label");
    ModelConfig next = model.config();
    next.pretrain_head = false;
    next.num_labels = num_labels;
    next.head = head;
    model.reconfigure(std::move(next), seed);
}

inline void apply_partition(SequenceModel& model, const TuningPolicy& policy) {
    for (const auto& spec : parameter_layout(model.config())) {
        model.params().set_partition(spec.name, partition_for(spec, policy, model.config()));
    }
}

struct ParameterReport {
    struct Entry {
        std::string name;
        Shape shape;
        Role role;
        Partition partition;
        std::uint64_t count;
    };
    std::uint64_t total = 0;
    std::uint64_t frozen = 0;
    std::uint64_t tunable = 0;
    std::vector<Entry> entries;

    double tunable_fraction() const { return total == 0 ? 0.0 : static_cast<double>(tunable) / static_cast<double>(total); }

    std::uint64_t count(Role role) const {
        std::uint64_t n = 0;
        for (const auto& e : entries) n += e.role == role ? e.count : 0;
        return n;
    }
};

namespace detail {

inline void add_entry(ParameterReport& report, const ParameterSpec& spec, Partition partition) {
    std::uint64_t n = 1;
    for (auto e : spec.shape) n *= e;
    report.entries.push_back({spec.name, spec.shape, spec.role, partition, n});
    report.total += n;
    (partition == Partition::kTunable ? report.tunable : report.frozen) += n;
}

} // namespace detail

/// Exact counts from shapes alone, so paper-scale configurations cost nothing.
inline ParameterReport count_parameters(const ModelConfig& cfg, const TuningPolicy& policy) {
    ParameterReport report;
    for (const auto& spec : parameter_layout(cfg)) detail::add_entry(report, spec, partition_for(spec, policy, cfg));
    return report;
}

/// Counts of whatever a store holds; an empty store reports all zeros.
inline ParameterReport count_parameters(const ParameterStore& params) {
    ParameterReport report;
    for (const auto& p : params.items()) {
        detail::add_entry(report, ParameterSpec{p.name, p.tensor.shape(), p.role}, p.partition);
    }
    return report;
}

/// Counts of a live model using its current partition.
inline ParameterReport count_parameters(const SequenceModel& model) {
    ParameterReport report;
    for (const auto& spec : parameter_layout(model.config())) {
        detail::add_entry(report, spec, model.params().entry(spec.name).partition);
    }
    return report;
}

} // namespace peterrec
