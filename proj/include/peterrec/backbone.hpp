#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "peterrec/error.hpp"
#include "peterrec/ops.hpp"
#include "peterrec/random.hpp"
#include "peterrec/tensor.hpp"

namespace peterrec {

/// Item ids below kFirstItem are reserved and never used as pre-training targets.
struct ReservedIds {
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kMask = 1;
    static constexpr std::int32_t kTcl = 2;
    static constexpr std::int32_t kFirstItem = 3;
};

/// Order of the three sub-steps that follow each dilated convolution.
enum class SublayerOrder : std::uint8_t {
    kConvNormAct,  // conv -> LN -> ReLU (default)
    kConvActNorm,  // conv -> ReLU -> LN
};

/// Where the [TCL] token goes and which hidden states feed the task head.
enum class HeadMode : std::uint8_t {
    kCausalEndTcl,      // {x, TCL}, read the last position
    kNonCausalBothTcl,  // {TCL, x, TCL}, read first + last positions
    kSumAllHidden,      // {x}, sum over every position
};

inline std::string_view to_string(HeadMode mode) {
    switch (mode) {
        case HeadMode::kCausalEndTcl: return "causal-end-tcl";
        case HeadMode::kNonCausalBothTcl: return "noncausal-both-tcl";
        case HeadMode::kSumAllHidden: return "sum-all-hidden";
    }
    return "unknown";
}

inline constexpr std::string_view kStartTclOnCausalMessage =
    "a [TCL] token at the start of a causal network cannot see any item (every later position is hidden "
    "from it); use causal-end-tcl";

inline HeadMode parse_head_mode(std::string_view text) {
    if (text == "causal-end-tcl") return HeadMode::kCausalEndTcl;
    if (text == "noncausal-both-tcl") return HeadMode::kNonCausalBothTcl;
    if (text == "sum-all-hidden") return HeadMode::kSumAllHidden;
    if (text == "causal-start-tcl") fail(ErrorKind::kConfig, std::string(kStartTclOnCausalMessage));
    fail(ErrorKind::kConfig, "unknown head mode '" + std::string(text) + "'");
}

inline bool uses_tcl(HeadMode mode) { return mode != HeadMode::kSumAllHidden; }

/// CausalEndTcl needs a causal network and NonCausalBothTcl a non-causal one.
inline void check_head_compatible(HeadMode mode, bool causal) {
    if (mode == HeadMode::kCausalEndTcl && !causal) {
        fail(ErrorKind::kConfig, "head mode causal-end-tcl requires a causal backbone");
    }
    if (mode == HeadMode::kNonCausalBothTcl && causal) {
        fail(ErrorKind::kConfig, "head mode noncausal-both-tcl requires a non-causal backbone");
    }
}

/// Row-major [batch x length] token ids.
struct TokenBatch {
    std::vector<std::int32_t> ids;
    std::size_t batch = 0;
    std::size_t length = 0;

    std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
};

struct BackboneConfig {
    std::int32_t vocab_size = 0;  // includes the reserved ids
    std::size_t embed_dim = 256;
    std::size_t kernel_size = 3;
    std::vector<std::size_t> dilations = {1, 2, 4, 8, 1, 2, 4, 8, 1, 2, 4, 8, 1, 2, 4, 8};
    bool causal = true;
    std::size_t max_len = 50;
    SublayerOrder order = SublayerOrder::kConvNormAct;
    float dropout = 0.0f;
    float layer_norm_eps = 1e-8f;

    std::size_t num_blocks() const { return dilations.size() / 2; }

    void validate() const {
        require(vocab_size > ReservedIds::kFirstItem, ErrorKind::kConfig,
                "vocab_size must exceed the reserved ids, got " + std::to_string(vocab_size));
        require(embed_dim > 0, ErrorKind::kConfig, "embed_dim must be positive");
        require(kernel_size >= 2, ErrorKind::kConfig, "kernel_size must be at least 2");
        require(causal || kernel_size % 2 == 1, ErrorKind::kConfig,
                "non-causal convolution needs an odd kernel_size, got " + std::to_string(kernel_size));
        require(dilations.size() % 2 == 0, ErrorKind::kConfig,
                "dilations must come in pairs (two convolutions per residual block)");
        for (auto d : dilations) {
            require(d >= 1, ErrorKind::kConfig, "every dilation must be >= 1");
        }
        require(max_len >= 1, ErrorKind::kConfig, "max_len must be positive");
        require(dropout >= 0.0f && dropout < 1.0f, ErrorKind::kConfig, "dropout must be in [0, 1)");
    }
};

/// Number of input positions visible to one output position: 1 + (K-1) * sum(dilations).
inline std::size_t receptive_field(const BackboneConfig& cfg) {
    const std::size_t total = std::accumulate(cfg.dilations.begin(), cfg.dilations.end(), std::size_t{0});
    return 1 + (cfg.kernel_size - 1) * total;
}

/// Handles to the parameters of one residual block (two dilated convolutions,
/// each followed by layer norm and ReLU) plus the shortcut around them.
struct ResidualBlock {
    struct Sublayer {
        Tensor conv_weight;  // [kernel x k x k]
        Tensor conv_bias;    // [k]
        Tensor norm_gain;    // [k]
        Tensor norm_bias;    // [k]
        std::size_t dilation = 1;
    };
    Sublayer first;
    Sublayer second;
};

/// Per-forward settings shared by all blocks.
struct ForwardContext {
    Tape& tape;
    bool causal = true;
    SublayerOrder order = SublayerOrder::kConvNormAct;
    float layer_norm_eps = 1e-8f;
    float dropout = 0.0f;
    Rng* dropout_rng = nullptr;  // dropout is active only when set
};

/// Dilated convolution plus bias.
inline Tensor conv_step(ForwardContext& ctx, const ResidualBlock::Sublayer& layer, const Tensor& x) {
    return add_bias(ctx.tape, conv1d_dilated(ctx.tape, x, layer.conv_weight, layer.dilation, ctx.causal), layer.conv_bias);
}

/// The layer norm and ReLU that follow a convolution, in the configured order.
inline Tensor norm_act_step(ForwardContext& ctx, const ResidualBlock::Sublayer& layer, const Tensor& x) {
    Tensor y;
    if (ctx.order == SublayerOrder::kConvNormAct) {
        y = relu(ctx.tape, layer_norm(ctx.tape, x, layer.norm_gain, layer.norm_bias, ctx.layer_norm_eps));
    } else {
        y = layer_norm(ctx.tape, relu(ctx.tape, x), layer.norm_gain, layer.norm_bias, ctx.layer_norm_eps);
    }
    if (ctx.dropout > 0.0f && ctx.dropout_rng != nullptr) {
        y = dropout(ctx.tape, y, ctx.dropout, *ctx.dropout_rng);
    }
    return y;
}

/// E + F(E) with F(E) = relu(LN2(conv2(relu(LN1(conv1(E)))))).
inline Tensor block_forward(ForwardContext& ctx, const ResidualBlock& block, const Tensor& input) {
    Tensor h = norm_act_step(ctx, block.first, conv_step(ctx, block.first, input));
    h = norm_act_step(ctx, block.second, conv_step(ctx, block.second, h));
    return add(ctx.tape, input, h);
}

/// Per-position linear map [..., k] -> [..., |X|].
inline Tensor pretrain_logits(Tape& tape, const Tensor& hidden, const Tensor& head_weight, const Tensor& head_bias) {
    Tensor logits = linear(tape, hidden, head_weight);
    return head_bias.defined() ? add_bias(tape, logits, head_bias) : logits;
}

} // namespace peterrec
