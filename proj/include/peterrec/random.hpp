#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <utility>
#include <vector>

namespace peterrec {

namespace detail {

constexpr std::uint64_t kGoldenGamma = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

/// Counter-based generator: the i-th draw is a pure function of (key, i), so
/// a stream can be split into independent children without consuming draws.
///
/// Only integer arithmetic and exact bit-to-double conversions are used for
/// uniform and integer draws, which keeps them identical across platforms.
/// Normal draws go through libm and are only reproducible per platform.
class Rng {
public:
    struct State {
        std::uint64_t key = 0;
        std::uint64_t counter = 0;
        friend bool operator==(const State&, const State&) = default;
    };

    explicit Rng(std::uint64_t seed = 0) noexcept : state_{detail::mix64(seed + detail::kGoldenGamma), 0} {}
    explicit Rng(State state) noexcept : state_(state) {}

    State state() const noexcept { return state_; }

    std::uint64_t next_u64() noexcept {
        ++state_.counter;
        return detail::mix64(state_.key + state_.counter * detail::kGoldenGamma);
    }

    /// Independent child stream; does not advance this generator.
    Rng split(std::uint64_t tag) const noexcept {
        return Rng(State{detail::mix64(state_.key ^ detail::mix64(tag + 0x632be59bd9b4e019ULL)), 0});
    }
    Rng split(std::string_view tag) const noexcept { return split(detail::fnv1a(tag)); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Lemire's nearly-divisionless method, unbiased.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n == 0) {
            return 0;
        }
        __uint128_t m = static_cast<__uint128_t>(next_u64()) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                m = static_cast<__uint128_t>(next_u64()) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Normal(0, stddev) resampled until it falls within +-bound standard deviations.
    double truncated_normal(double stddev, double bound = 2.0) noexcept {
        double z = normal();
        while (std::abs(z) > bound) {
            z = normal();
        }
        return z * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& values) noexcept {
        for (std::size_t i = values.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(values[i - 1], values[j]);
        }
    }

private:
    State state_;
};

} // namespace peterrec
