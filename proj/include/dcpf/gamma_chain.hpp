#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dcpf/common.hpp"

namespace dcpf {

/// Draws Gamma(shape, rate); the whole artifact uses the shape/rate
/// parameterization (mean = shape / rate).
inline double sample_gamma(double shape, double rate, Rng& rng) {
    std::gamma_distribution<double> dist(shape, 1.0 / rate);
    return dist(rng);
}

/// Hyperparameters of one conjugate gamma-Markov chain. Each latent
/// state u_t draws Gamma(shape_state, rate_state * z_t) against an
/// interleaved auxiliary state z_t, which itself draws
/// Gamma(shape_aux, rate_aux * u_{t-1}); the first auxiliary state uses
/// a per-entity rate drawn as Gamma(init_shape, init_shape / init_mean).
struct ChainHyper {
    double shape_state = 1.01;  // state draw shape
    double shape_aux = 1.01;    // auxiliary draw shape
    double rate_state = 1.0;    // multiplies z in the state rate
    double rate_aux = 1.0;      // multiplies u in the auxiliary rate
    double init_shape = 1.01;   // shape of the initial-rate draw
    double init_mean = 1.0;     // mean of the initial-rate draw

    void validate() const {
        for (double v : {shape_state, shape_aux, rate_state, rate_aux, init_shape,
                         init_mean})
            if (!(v > 0.0) || !std::isfinite(v))
                throw domain_error("ChainHyper: all parameters must be positive and finite");
    }
};

/// Sampled trajectory of one chain: the initial rate, the auxiliary
/// states and the latent states, all strictly positive.
struct ChainState {
    double init_rate = 0.0;
    std::vector<double> aux;
    std::vector<double> state;

    std::size_t length() const { return state.size(); }
};

/// (shape_state * rate_state) / (rate_aux * shape_aux): the per-step
/// factor of the mean recursion. Below 1 the chain drifts down, above 1
/// it compounds upward.
inline double drift_ratio(const ChainHyper& hyper) {
    hyper.validate();
    return (hyper.shape_state * hyper.rate_state) /
           (hyper.rate_aux * hyper.shape_aux);
}

inline std::string classify_drift(double ratio) {
    if (ratio < 1.0) return "downward";
    if (ratio > 1.0) return "upward";
    return "balanced";
}

/// Samples a chain of length T (ancestral order: initial rate, then
/// alternating auxiliary and latent states). An entity whose components
/// share one initial rate passes it via shared_init_rate.
inline ChainState sample_chain(const ChainHyper& hyper, std::size_t T, Rng& rng,
                               std::optional<double> shared_init_rate = std::nullopt) {
    hyper.validate();
    if (T < 1) throw std::invalid_argument("sample_chain: T must be at least 1");
    ChainState chain;
    chain.aux.resize(T);
    chain.state.resize(T);
    chain.init_rate =
        shared_init_rate.value_or(sample_gamma(
            hyper.init_shape, hyper.init_shape / hyper.init_mean, rng));
    if (!(chain.init_rate > 0.0))
        throw std::invalid_argument("sample_chain: initial rate must be positive");
    chain.aux[0] = sample_gamma(hyper.shape_aux, chain.init_rate, rng);
    chain.state[0] = sample_gamma(hyper.shape_state, hyper.rate_state * chain.aux[0], rng);
    for (std::size_t t = 1; t < T; ++t) {
        chain.aux[t] =
            sample_gamma(hyper.shape_aux, hyper.rate_aux * chain.state[t - 1], rng);
        chain.state[t] =
            sample_gamma(hyper.shape_state, hyper.rate_state * chain.aux[t], rng);
    }
    return chain;
}

enum class MeanRecursion {
    /// Geometric compounding of the drift ratio (treats E[1/z] as 1/E[z]).
    drift_ratio_power,
    /// Uses the exact inverse moment E[1/z] = rate/(shape - 1); valid
    /// only when both shapes exceed 1.
    exact_inverse_moment,
};

/// Expected state trajectory from a given first-state mean.
inline std::vector<double> expected_trajectory(
    const ChainHyper& hyper, double first_state, std::size_t T,
    MeanRecursion recursion = MeanRecursion::drift_ratio_power) {
    hyper.validate();
    if (T < 1) throw std::invalid_argument("expected_trajectory: T must be at least 1");
    if (!(first_state > 0.0))
        throw std::invalid_argument("expected_trajectory: first state must be positive");
    double step = 0.0;
    if (recursion == MeanRecursion::drift_ratio_power) {
        step = drift_ratio(hyper);
    } else {
        if (hyper.shape_aux <= 1.0 || hyper.shape_state <= 1.0)
            throw domain_error(
                "expected_trajectory: exact inverse moment needs both shapes > 1");
        step = (hyper.shape_state * hyper.rate_aux) /
               (hyper.rate_state * (hyper.shape_aux - 1.0));
    }
    std::vector<double> traj(T);
    traj[0] = first_state;
    for (std::size_t t = 1; t < T; ++t) traj[t] = traj[t - 1] * step;
    return traj;
}

/// Mean-recursion extrapolation past the training horizon:
/// last_state * drift_ratio^steps. Balanced chains carry the last
/// state forward unchanged.
inline double forecast_state(double last_state, const ChainHyper& hyper,
                             std::size_t steps) {
    if (steps < 1) throw std::invalid_argument("forecast_state: steps must be at least 1");
    return last_state * std::pow(drift_ratio(hyper), double(steps));
}

}  // namespace dcpf
