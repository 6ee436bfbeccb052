#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "peterrec/backbone.hpp"
#include "peterrec/error.hpp"
#include "peterrec/ops.hpp"
#include "peterrec/params.hpp"
#include "peterrec/patch.hpp"
#include "peterrec/random.hpp"
#include "peterrec/tensor.hpp"

namespace peterrec {

inline constexpr double kInitStddev = 0.02;

/// Full architecture: backbone plus whichever heads and patches are attached.
struct ModelConfig {
    BackboneConfig backbone;
    bool pretrain_head = true;
    InsertionMode insertion = InsertionMode::kNone;
    std::size_t bottleneck = 0;  // patch width d; 0 when unpatched
    HeadMode head = HeadMode::kCausalEndTcl;
    std::size_t num_labels = 0;  // |Y|; 0 when no task head is attached

    bool has_task_head() const { return num_labels > 0; }
    bool has_tcl() const { return has_task_head() && uses_tcl(head); }

    void validate() const {
        backbone.validate();
        if (insertion != InsertionMode::kNone) {
            require(bottleneck >= 1, ErrorKind::kConfig, "patched model needs bottleneck d >= 1");
        }
        if (has_task_head()) {
            check_head_compatible(head, backbone.causal);
        }
    }
};

/// Shape-only description of one parameter; enough for exact accounting
/// without allocating anything.
struct ParameterSpec {
    std::string name;
    Shape shape;
    Role role;
    int layer = -1;  // conv layer index for conv, norm and patch parameters
};

namespace detail {

inline std::string block_prefix(std::size_t b) { return "block" + std::to_string(b) + "."; }

} // namespace detail

/// Every parameter of `cfg` in canonical order.
inline std::vector<ParameterSpec> parameter_layout(const ModelConfig& cfg) {
    const auto& bb = cfg.backbone;
    const std::size_t k = bb.embed_dim, d = cfg.bottleneck;
    const auto vocab = static_cast<std::size_t>(bb.vocab_size);
    std::vector<ParameterSpec> out;
    out.push_back({"embedding", {vocab, k}, Role::kEmbedding});
    for (std::size_t b = 0; b < bb.num_blocks(); ++b) {
        const std::string prefix = detail::block_prefix(b);
        for (std::size_t j = 0; j < 2; ++j) {
            const int layer = static_cast<int>(2 * b + j);
            const std::string conv = prefix + "conv" + std::to_string(j + 1) + ".";
            const std::string norm = prefix + "ln" + std::to_string(j + 1) + ".";
            out.push_back({conv + "weight", {bb.kernel_size, k, k}, Role::kConvWeight, layer});
            out.push_back({conv + "bias", {k}, Role::kConvBias, layer});
            out.push_back({norm + "gain", {k}, Role::kLayerNorm, layer});
            out.push_back({norm + "bias", {k}, Role::kLayerNorm, layer});
        }
        for (std::size_t j = 0; j < patches_per_block(cfg.insertion); ++j) {
            // A single tail patch belongs to the block's second layer.
            const int layer = static_cast<int>(2 * b + (patches_per_block(cfg.insertion) == 1 ? 1 : j));
            const std::string patch = prefix + "patch" + std::to_string(j + 1) + ".";
            out.push_back({patch + "down.weight", {k, d}, Role::kPatchWeight, layer});
            out.push_back({patch + "down.bias", {d}, Role::kPatchBias, layer});
            out.push_back({patch + "up.weight", {d, k}, Role::kPatchWeight, layer});
            out.push_back({patch + "up.bias", {k}, Role::kPatchBias, layer});
        }
    }
    if (cfg.pretrain_head) {
        out.push_back({"head.weight", {k, vocab}, Role::kPretrainHead});
        out.push_back({"head.bias", {vocab}, Role::kPretrainHead});
    }
    if (cfg.has_tcl()) {
        out.push_back({"tcl", {1, k}, Role::kTclEmbedding});
    }
    if (cfg.has_task_head()) {
        out.push_back({"task.weight", {k, cfg.num_labels}, Role::kTaskHead});
        out.push_back({"task.bias", {cfg.num_labels}, Role::kTaskHead});
    }
    return out;
}

/// Fresh values for one parameter. The stream depends only on (seed, name),
/// so adding or removing other parameters never changes this one.
inline Tensor initialize_parameter(const ParameterSpec& spec, std::uint64_t seed) {
    Tensor t(spec.shape);
    auto values = t.data();
    const bool is_bias = spec.name.ends_with(".bias");
    if (spec.role == Role::kLayerNorm) {
        if (spec.name.ends_with(".gain")) std::fill(values.begin(), values.end(), 1.0f);
    } else if (is_bias || spec.name.ends_with("up.weight")) {
        // biases and patch up projections start at zero
    } else {
        Rng rng = Rng(seed).split(spec.name);
        for (auto& v : values) v = static_cast<float>(rng.truncated_normal(kInitStddev));
    }
    return t;
}

/// Parameters plus the config that gives them meaning.
class SequenceModel {
public:
    /// Every parameter freshly initialized; all start tunable.
    SequenceModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        for (const auto& spec : parameter_layout(cfg_)) {
            params_.add(spec.name, initialize_parameter(spec, seed), Partition::kTunable, spec.role);
        }
    }

    /// Adopts an existing store (e.g. from a checkpoint); names and shapes must
    /// match the layout exactly.
    SequenceModel(ModelConfig cfg, ParameterStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
        cfg_.validate();
        const auto layout = parameter_layout(cfg_);
        require(layout.size() == params_.size(), ErrorKind::kIntegrity,
                "parameter store has " + std::to_string(params_.size()) + " tensors, config expects " +
                    std::to_string(layout.size()));
        for (std::size_t i = 0; i < layout.size(); ++i) {
            const auto& p = params_.items()[i];
            require(p.name == layout[i].name, ErrorKind::kIntegrity,
                    "parameter " + std::to_string(i) + " is '" + p.name + "', expected '" + layout[i].name + "'");
            require(p.tensor.shape() == layout[i].shape, ErrorKind::kIntegrity,
                    "parameter '" + p.name + "' has shape " + shape_string(p.tensor.shape()) + ", expected " +
                        shape_string(layout[i].shape));
        }
    }

    SequenceModel(const SequenceModel&) = delete;
    SequenceModel& operator=(const SequenceModel&) = delete;
    SequenceModel(SequenceModel&&) = default;
    SequenceModel& operator=(SequenceModel&&) = default;

    SequenceModel clone() const { return SequenceModel(cfg_, params_.clone()); }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    /// Switches to a new architecture. Parameters present in both layouts are
    /// kept (with their partition); new ones are initialized from `seed` and
    /// start tunable; ones no longer in the layout are dropped.
    void reconfigure(ModelConfig next, std::uint64_t seed) {
        next.validate();
        ParameterStore store;
        for (const auto& spec : parameter_layout(next)) {
            if (params_.contains(spec.name)) {
                const auto& old = params_.entry(spec.name);
                require(old.tensor.shape() == spec.shape, ErrorKind::kConfig,
                        "cannot reshape '" + spec.name + "' from " + shape_string(old.tensor.shape()) + " to " +
                            shape_string(spec.shape));
                store.add(spec.name, old.tensor, old.partition, spec.role);
            } else {
                store.add(spec.name, initialize_parameter(spec, seed), Partition::kTunable, spec.role);
            }
        }
        cfg_ = std::move(next);
        params_ = std::move(store);
    }

    ResidualBlock block(std::size_t b) const {
        const std::string prefix = detail::block_prefix(b);
        auto sublayer = [&](int j, std::size_t dilation) {
            const std::string c = prefix + "conv" + std::to_string(j) + ".", n = prefix + "ln" + std::to_string(j) + ".";
            return ResidualBlock::Sublayer{params_.get(c + "weight"), params_.get(c + "bias"), params_.get(n + "gain"),
                                           params_.get(n + "bias"), dilation};
        };
        return ResidualBlock{sublayer(1, cfg_.backbone.dilations[2 * b]), sublayer(2, cfg_.backbone.dilations[2 * b + 1])};
    }

    std::vector<ModelPatch> patches(std::size_t b) const {
        std::vector<ModelPatch> out;
        for (std::size_t j = 0; j < patches_per_block(cfg_.insertion); ++j) {
            const std::string p = detail::block_prefix(b) + "patch" + std::to_string(j + 1) + ".";
            out.push_back(ModelPatch{params_.get(p + "down.weight"), params_.get(p + "down.bias"),
                                     params_.get(p + "up.weight"), params_.get(p + "up.bias")});
        }
        return out;
    }

    /// Embedding lookup (with the tunable [TCL] row when attached) followed by
    /// every residual block. Returns [batch x length x k].
    Tensor hidden(Tape& tape, const TokenBatch& tokens, Rng* dropout_rng = nullptr) const {
        require(tokens.batch > 0 && tokens.length > 0 && tokens.ids.size() == tokens.batch * tokens.length,
                ErrorKind::kDimension, "token batch shape does not match its id count");
        const auto& bb = cfg_.backbone;
        Tensor x = embedding_lookup(tape, params_.get("embedding"), tokens.ids);
        if (cfg_.has_tcl()) {
            std::vector<std::size_t> rows;
            for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
                if (tokens.ids[i] == ReservedIds::kTcl) rows.push_back(i);
            }
            if (!rows.empty()) x = replace_rows(tape, x, rows, params_.get("tcl"));
        }
        x = reshape(tape, x, Shape{tokens.batch, tokens.length, bb.embed_dim});
        ForwardContext ctx{tape, bb.causal, bb.order, bb.layer_norm_eps, bb.dropout, dropout_rng};
        for (std::size_t b = 0; b < bb.num_blocks(); ++b) {
            x = patched_block_forward(ctx, block(b), patches(b), cfg_.insertion, x);
        }
        return x;
    }

    /// Pre-training logits for selected rows of a [N x k] hidden slice.
    Tensor pretrain_logits(Tape& tape, const Tensor& hidden_rows) const {
        require(cfg_.pretrain_head, ErrorKind::kConfig, "model has no pre-training head");
        return peterrec::pretrain_logits(tape, hidden_rows, params_.get("head.weight"), params_.get("head.bias"));
    }

    /// The representation the task head reads, per head mode: [batch x k].
    Tensor pooled(Tape& tape, const Tensor& hidden) const {
        const std::size_t last = hidden.dim(1) - 1;
        switch (cfg_.head) {
            case HeadMode::kCausalEndTcl: return select_position(tape, hidden, last);
            case HeadMode::kNonCausalBothTcl:
                return add(tape, select_position(tape, hidden, 0), select_position(tape, hidden, last));
            case HeadMode::kSumAllHidden: return sum_positions(tape, hidden);
        }
        fail(ErrorKind::kConfig, "unknown head mode");
    }

    /// Task scores over the label space: [batch x |Y|].
    Tensor task_scores(Tape& tape, const Tensor& hidden) const {
        require(cfg_.has_task_head(), ErrorKind::kConfig, "model has no task head");
        Tensor scores = linear(tape, pooled(tape, hidden), params_.get("task.weight"));
        return add_bias(tape, scores, params_.get("task.bias"));
    }

private:
    ModelConfig cfg_;
    ParameterStore params_;
};

} // namespace peterrec
