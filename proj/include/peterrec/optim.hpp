#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "peterrec/error.hpp"
#include "peterrec/params.hpp"

namespace peterrec {

/// Adam with bias correction. Moments are created lazily per tunable
/// parameter name and start at zero.
class AdamState {
public:
    struct Moments {
        std::vector<float> first;
        std::vector<float> second;
    };

    explicit AdamState(double learning_rate = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
        : learning_rate(learning_rate), beta1(beta1), beta2(beta2), epsilon(epsilon) {}

    double learning_rate;
    double beta1;
    double beta2;
    double epsilon;

    std::uint64_t step() const noexcept { return step_; }
    const std::map<std::string, Moments>& moments() const noexcept { return moments_; }

    /// Updates every tunable parameter from its gradient, then zeroes the
    /// gradients. Frozen parameters are never read or written.
    void apply(ParameterStore& params) {
        for (const auto& p : params.items()) {
            if (p.partition == Partition::kTunable && !p.tensor.has_grad()) {
                fail(ErrorKind::kContract, "adam_step: tunable parameter '" + p.name + "' has no gradient");
            }
        }
        ++step_;
        const double correction1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
        const double correction2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
        for (auto& p : params.items()) {
            if (p.partition != Partition::kTunable) continue;
            auto values = p.tensor.data();
            auto grads = p.tensor.grad();
            auto& m = moments_[p.name];
            if (m.first.size() != values.size()) {
                m.first.assign(values.size(), 0.0f);
                m.second.assign(values.size(), 0.0f);
            }
            for (std::size_t i = 0; i < values.size(); ++i) {
                const double g = grads[i];
                const double m1 = beta1 * m.first[i] + (1.0 - beta1) * g;
                const double m2 = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                m.first[i] = static_cast<float>(m1);
                m.second[i] = static_cast<float>(m2);
                const double update = learning_rate * (m1 / correction1) / (std::sqrt(m2 / correction2) + epsilon);
                values[i] = static_cast<float>(values[i] - update);
            }
            p.tensor.zero_grad();
        }
    }

private:
    std::uint64_t step_ = 0;
    std::map<std::string, Moments> moments_;
};

inline void adam_step(ParameterStore& params, AdamState& state) { state.apply(params); }

} // namespace peterrec
