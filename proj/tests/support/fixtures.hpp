#pragma once

#include <cstdint>
#include <vector>

#include "peterrec/adapters.hpp"
#include "peterrec/model.hpp"
#include "peterrec/objectives.hpp"
#include "support/gradcheck.hpp"

namespace fixture {

using namespace peterrec;

inline ModelConfig tiny_config(bool causal, std::size_t k = 16, std::int32_t vocab = 20, std::size_t blocks = 2) {
    ModelConfig cfg;
    cfg.backbone.vocab_size = vocab;
    cfg.backbone.embed_dim = k;
    cfg.backbone.kernel_size = 3;
    cfg.backbone.causal = causal;
    cfg.backbone.dilations.clear();
    for (std::size_t b = 0; b < blocks; ++b) {
        cfg.backbone.dilations.push_back(1);
        cfg.backbone.dilations.push_back(2);
    }
    cfg.backbone.max_len = 8;
    return cfg;
}

/// Re-draws every parameter at unit-ish scale, including patch up projections
/// and layer-norm gains, so no path through the model is trivially zero.
inline void scramble(SequenceModel& model, Rng rng, double scale = 0.5) {
    for (auto& p : model.params().items()) {
        for (auto& v : p.tensor.data()) v = static_cast<float>(rng.normal() * scale);
        if (p.role == Role::kLayerNorm && p.name.ends_with(".gain")) {
            for (auto& v : p.tensor.data()) v += 1.0f;
        }
    }
}

inline Sequence random_items(std::size_t n, std::int32_t vocab, Rng& rng, std::size_t pads = 0) {
    Sequence s(n, ReservedIds::kPad);
    for (std::size_t t = pads; t < n; ++t) {
        s[t] = ReservedIds::kFirstItem + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab - ReservedIds::kFirstItem)));
    }
    return s;
}

inline TokenBatch single(const Sequence& s) { return TokenBatch{s, 1, s.size()}; }

} // namespace fixture
