#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "peterrec/backbone.hpp"
#include "peterrec/error.hpp"
#include "peterrec/ops.hpp"
#include "peterrec/tensor.hpp"

namespace peterrec {

/// Where model patches sit inside each residual block.
enum class InsertionMode : std::uint8_t {
    kNone,
    kSerialTwoPerBlock,        // (b) after each conv, before its layer norm
    kSerialOnePerBlock,        // (c) once, after the block's final activation
    kParallelBeforeNorm,       // (d) beside each conv, summed before layer norm
    kParallelAfterActivation,  // (e) beside each conv+norm+act path, summed after it; known to train worse
};

inline std::string_view to_string(InsertionMode mode) {
    switch (mode) {
        case InsertionMode::kNone: return "none";
        case InsertionMode::kSerialTwoPerBlock: return "b";
        case InsertionMode::kSerialOnePerBlock: return "c";
        case InsertionMode::kParallelBeforeNorm: return "d";
        case InsertionMode::kParallelAfterActivation: return "e";
    }
    return "unknown";
}

inline InsertionMode parse_insertion_mode(std::string_view text) {
    if (text == "none") return InsertionMode::kNone;
    if (text == "b" || text == "serial-two") return InsertionMode::kSerialTwoPerBlock;
    if (text == "c" || text == "serial-one") return InsertionMode::kSerialOnePerBlock;
    if (text == "d" || text == "parallel-before-norm") return InsertionMode::kParallelBeforeNorm;
    if (text == "e" || text == "parallel-after-activation") return InsertionMode::kParallelAfterActivation;
    fail(ErrorKind::kConfig, "unknown insertion mode '" + std::string(text) + "'");
}

inline std::size_t patches_per_block(InsertionMode mode) {
    switch (mode) {
        case InsertionMode::kNone: return 0;
        case InsertionMode::kSerialOnePerBlock: return 1;
        default: return 2;
    }
}

/// Bottleneck k -> d -> k with ReLU in between. Both projections are 1x1
/// convolutions, i.e. position-wise linear maps.
struct ModelPatch {
    Tensor down_weight;  // [k x d]
    Tensor down_bias;    // [d]
    Tensor up_weight;    // [d x k]
    Tensor up_bias;      // [k]
};

/// up(ReLU(down(E))) without the shortcut.
inline Tensor patch_branch(Tape& tape, const ModelPatch& patch, const Tensor& input) {
    if (input.shape().back() != patch.down_weight.dim(0)) {
        fail(ErrorKind::kDimension, "patch: input has " + std::to_string(input.shape().back()) +
                                        " channels but the patch expects " +
                                        std::to_string(patch.down_weight.dim(0)));
    }
    Tensor h = relu(tape, add_bias(tape, linear(tape, input, patch.down_weight), patch.down_bias));
    return add_bias(tape, linear(tape, h, patch.up_weight), patch.up_bias);
}

/// E + up(ReLU(down(E))).
inline Tensor patch_forward(Tape& tape, const ModelPatch& patch, const Tensor& input) {
    return add(tape, input, patch_branch(tape, patch, input));
}

/// One residual block with patches placed per `mode`. Parallel patches
/// contribute their bottleneck branch only, so a zero up projection leaves the
/// block's function unchanged in every mode.
inline Tensor patched_block_forward(ForwardContext& ctx, const ResidualBlock& block,
                                    const std::vector<ModelPatch>& patches, InsertionMode mode, const Tensor& input) {
    require(patches.size() == patches_per_block(mode), ErrorKind::kContract,
            "block has " + std::to_string(patches.size()) + " patches, insertion mode " +
                std::string(to_string(mode)) + " needs " + std::to_string(patches_per_block(mode)));
    Tape& tape = ctx.tape;
    switch (mode) {
        case InsertionMode::kNone:
            return block_forward(ctx, block, input);
        case InsertionMode::kSerialTwoPerBlock: {
            Tensor h = norm_act_step(ctx, block.first, patch_forward(tape, patches[0], conv_step(ctx, block.first, input)));
            h = norm_act_step(ctx, block.second, patch_forward(tape, patches[1], conv_step(ctx, block.second, h)));
            return add(tape, input, h);
        }
        case InsertionMode::kSerialOnePerBlock: {
            Tensor h = norm_act_step(ctx, block.first, conv_step(ctx, block.first, input));
            h = norm_act_step(ctx, block.second, conv_step(ctx, block.second, h));
            return add(tape, input, patch_forward(tape, patches[0], h));
        }
        case InsertionMode::kParallelBeforeNorm: {
            Tensor a = add(tape, conv_step(ctx, block.first, input), patch_branch(tape, patches[0], input));
            Tensor h = norm_act_step(ctx, block.first, a);
            Tensor b = add(tape, conv_step(ctx, block.second, h), patch_branch(tape, patches[1], h));
            return add(tape, input, norm_act_step(ctx, block.second, b));
        }
        case InsertionMode::kParallelAfterActivation: {
            Tensor h = add(tape, norm_act_step(ctx, block.first, conv_step(ctx, block.first, input)),
                           patch_branch(tape, patches[0], input));
            Tensor h2 = add(tape, norm_act_step(ctx, block.second, conv_step(ctx, block.second, h)),
                            patch_branch(tape, patches[1], h));
            return add(tape, input, h2);
        }
    }
    fail(ErrorKind::kConfig, "unknown insertion mode");
}

} // namespace peterrec
