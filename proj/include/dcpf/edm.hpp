#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dcpf/common.hpp"
#include "dcpf/math.hpp"

namespace dcpf {

enum class Family : std::uint8_t {
    poisson,
    gamma,
    gaussian,
    zero_truncated_poisson,
};

inline const char* family_name(Family f) {
    switch (f) {
        case Family::poisson: return "po";
        case Family::gamma: return "ga";
        case Family::gaussian: return "n";
        case Family::zero_truncated_poisson: return "ztp";
    }
    return "?";
}

inline Family family_from_name(const std::string& name) {
    if (name == "po") return Family::poisson;
    if (name == "ga") return Family::gamma;
    if (name == "n") return Family::gaussian;
    if (name == "ztp") return Family::zero_truncated_poisson;
    throw std::invalid_argument("unknown element family '" + name + "'");
}

/// One exponential-dispersion element law with natural parameter theta
/// and dispersion kappa. A response is the sum of a Poisson number of
/// i.i.d. element draws; by EDM additivity the conditional response law
/// is the same family with index eta * kappa.
struct ElementDistribution {
    Family family = Family::poisson;
    double theta = 0.0;
    double kappa = 1.0;

    void validate() const {
        if (!std::isfinite(theta))
            throw domain_error("ElementDistribution: theta must be finite");
        if (!(kappa > 0.0) || !std::isfinite(kappa))
            throw domain_error("ElementDistribution: kappa must be positive");
        if (family == Family::gamma && !(theta < 0.0))
            throw domain_error("ElementDistribution: gamma family needs theta < 0");
        if (family == Family::zero_truncated_poisson && kappa != 1.0)
            throw domain_error(
                "ElementDistribution: the zero-truncated element has unit dispersion; "
                "the convolution index is the latent count");
    }
};

namespace detail {

inline bool is_integer(double y) { return std::isfinite(y) && std::floor(y) == y; }

}  // namespace detail

/// Log-partition of the element law on its natural domain.
inline double log_partition(const ElementDistribution& elem) {
    elem.validate();
    switch (elem.family) {
        case Family::poisson: return std::exp(elem.theta);
        case Family::gamma: return -std::log(-elem.theta);
        case Family::gaussian: return 0.5 * elem.theta * elem.theta;
        case Family::zero_truncated_poisson: {
            double mu = std::exp(elem.theta);
            // log(e^mu - 1), stable at both ends
            return mu > 1.0 ? mu + std::log1p(-std::exp(-mu))
                            : std::log(std::expm1(mu));
        }
    }
    throw domain_error("log_partition: unknown family");
}

/// Derivative of the log-partition (the element mean is kappa times this).
inline double log_partition_derivative(const ElementDistribution& elem) {
    elem.validate();
    switch (elem.family) {
        case Family::poisson: return std::exp(elem.theta);
        case Family::gamma: return -1.0 / elem.theta;
        case Family::gaussian: return elem.theta;
        case Family::zero_truncated_poisson: {
            double mu = std::exp(elem.theta);
            return mu / (-std::expm1(-mu));
        }
    }
    throw domain_error("log_partition_derivative: unknown family");
}

/// Log base measure of the eta-fold convolution: p(y | eta) =
/// h(y, index) * exp(theta*y - index*Psi(theta)) with index = eta*kappa
/// for the real-indexed families, and index = eta (integer) for the
/// zero-truncated element.
inline double log_base_measure(Family family, double y, double lambda_index) {
    switch (family) {
        case Family::gaussian: {
            if (!(lambda_index > 0.0))
                throw support_error("log_base_measure: index must be positive");
            return -y * y / (2.0 * lambda_index) -
                   0.5 * std::log(2.0 * 3.14159265358979323846 * lambda_index);
        }
        case Family::gamma: {
            if (!(lambda_index > 0.0))
                throw support_error("log_base_measure: index must be positive");
            if (!(y > 0.0))
                throw support_error("log_base_measure: gamma support is y > 0");
            return (lambda_index - 1.0) * std::log(y) - std::lgamma(lambda_index);
        }
        case Family::poisson: {
            if (!detail::is_integer(y) || y < 0.0)
                throw support_error("log_base_measure: poisson support is 0, 1, 2, ...");
            if (!(lambda_index > 0.0))
                throw support_error("log_base_measure: index must be positive");
            return y * std::log(lambda_index) - std::lgamma(y + 1.0);
        }
        case Family::zero_truncated_poisson: {
            if (!detail::is_integer(y) || !detail::is_integer(lambda_index))
                throw support_error("log_base_measure: zero-truncated support is integer");
            auto eta = std::size_t(lambda_index);
            auto yy = std::size_t(y);
            if (eta < 1 || yy < eta)
                throw support_error(
                    "log_base_measure: zero-truncated convolution needs y >= eta >= 1");
            return std::lgamma(double(eta) + 1.0) + log_stirling2(yy, eta) -
                   std::lgamma(y + 1.0);
        }
    }
    throw domain_error("log_base_measure: unknown family");
}

/// log p(y | eta) for eta >= 1 element draws.
inline double log_conditional_density(const ElementDistribution& elem, double y,
                                      std::size_t eta) {
    double index = elem.family == Family::zero_truncated_poisson
                       ? double(eta)
                       : double(eta) * elem.kappa;
    return elem.theta * y - double(eta) * elem.kappa * log_partition(elem) +
           log_base_measure(elem.family, y, index);
}

/// Truncated posterior over the latent count eta for one observation.
struct EtaPosterior {
    /// Normalized log-probabilities over eta = 0 .. support_max().
    std::vector<double> log_weights;
    double mean = 0.0;
    double zero_prob = 0.0;
    /// Set when the hard truncation cap was hit with tail mass above
    /// the 1e-12 tolerance.
    bool truncated = false;

    std::size_t support_max() const { return log_weights.size() - 1; }
};

inline constexpr std::size_t kEtaDefaultMax = 50;
inline constexpr std::size_t kEtaHardCap = 4096;

namespace detail {

/// Unnormalized log-weights of q(eta) for eta = 0..limit; entries
/// outside the feasible support are -inf. The eta = 0 atom is feasible
/// only at y = 0.
inline std::vector<double> eta_log_weights(double y, double lambda,
                                           const ElementDistribution& elem,
                                           std::size_t limit) {
    const double psi = log_partition(elem);
    const double log_lambda = lambda > 0.0 ? std::log(lambda) : kNegInf;
    std::vector<double> w(limit + 1, kNegInf);

    bool zero_only = false;
    std::size_t lo = 1, hi = limit;
    if (y == 0.0) {
        w[0] = 0.0;
        // for gamma and zero-truncated elements, y = 0 iff eta = 0
        zero_only = elem.family == Family::gamma ||
                    elem.family == Family::zero_truncated_poisson;
    }
    if (elem.family == Family::zero_truncated_poisson && y > 0.0)
        hi = std::min(hi, std::size_t(y));
    if (zero_only || lambda == 0.0) return w;

    for (std::size_t eta = lo; eta <= hi; ++eta) {
        double index = elem.family == Family::zero_truncated_poisson
                           ? double(eta)
                           : double(eta) * elem.kappa;
        w[eta] = -elem.kappa * double(eta) * psi +
                 log_base_measure(elem.family, y, index) +
                 double(eta) * log_lambda - std::lgamma(double(eta) + 1.0);
    }
    return w;
}

inline bool eta_support_is_bounded(const ElementDistribution& elem, double y) {
    bool zero_forces_empty = elem.family == Family::gamma ||
                             elem.family == Family::zero_truncated_poisson;
    return (y == 0.0 && zero_forces_empty) ||
           (elem.family == Family::zero_truncated_poisson && y > 0.0);
}

/// Geometric bound on the mass beyond the last support point; infinity
/// when the weights are not yet decaying there.
inline double eta_tail_bound(const std::vector<double>& w, double log_norm) {
    std::size_t last = w.size() - 1;
    if (w[last] == kNegInf) return 0.0;
    double ratio = std::exp(w[last] - w[last - 1]);
    if (!(ratio < 1.0)) return std::numeric_limits<double>::infinity();
    double last_mass = std::exp(w[last] - log_norm);
    return last_mass * ratio / (1.0 - ratio);
}

struct EtaWeights {
    std::vector<double> log_weights;  // unnormalized
    double log_norm = 0.0;
    bool truncated = false;
};

inline EtaWeights eta_weights_adaptive(double y, double lambda,
                                       const ElementDistribution& elem,
                                       std::size_t eta_max) {
    elem.validate();
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
        throw domain_error("posterior_eta: rate must be finite and non-negative");
    if (eta_max < 1) throw std::invalid_argument("posterior_eta: eta_max must be >= 1");
    if (y != 0.0 && lambda == 0.0)
        throw inconsistency_error(
            "posterior_eta: nonzero observation with zero rate is impossible");
    if ((elem.family == Family::poisson ||
         elem.family == Family::zero_truncated_poisson) &&
        (!is_integer(y) || y < 0.0))
        throw support_error("posterior_eta: discrete families need integer y >= 0");
    if (elem.family == Family::gamma && y != 0.0 && !(y > 0.0))
        throw support_error("posterior_eta: gamma responses are positive (or zero)");

    std::size_t limit = std::min(eta_max, kEtaHardCap);
    if (elem.family == Family::zero_truncated_poisson && y > 0.0) {
        if (y > double(kStirlingMaxN))
            throw support_error(
                "posterior_eta: count exceeds the zero-truncated convolution bound");
        limit = std::size_t(y);  // exact finite support
    }

    EtaWeights out;
    while (true) {
        out.log_weights = eta_log_weights(y, lambda, elem, limit);
        out.log_norm = log_sum_exp(out.log_weights);
        if (eta_support_is_bounded(elem, y)) break;
        double tail = eta_tail_bound(out.log_weights, out.log_norm);
        if (tail < 1e-12) break;
        if (limit >= kEtaHardCap) {
            out.truncated = true;
            log_debug("posterior_eta: truncation cap %zu hit (tail bound %.3g)",
                      kEtaHardCap, tail);
            break;
        }
        limit = std::min(limit * 2, kEtaHardCap);
    }
    if (out.log_norm == kNegInf)
        throw inconsistency_error("posterior_eta: observation has zero probability");
    return out;
}

}  // namespace detail

/// Posterior over the latent count given an observation and its rate,
/// q(eta) proportional to exp(-kappa*eta*Psi) h(y, eta*kappa) Lambda^eta / eta!,
/// truncated adaptively until the tail bound drops below 1e-12.
inline EtaPosterior posterior_eta(double y, double lambda,
                                  const ElementDistribution& elem,
                                  std::size_t eta_max = kEtaDefaultMax) {
    detail::EtaWeights w = detail::eta_weights_adaptive(y, lambda, elem, eta_max);
    EtaPosterior post;
    post.truncated = w.truncated;
    post.log_weights.resize(w.log_weights.size());
    KahanSum mean;
    for (std::size_t eta = 0; eta < w.log_weights.size(); ++eta) {
        post.log_weights[eta] = w.log_weights[eta] - w.log_norm;
        if (w.log_weights[eta] != kNegInf)
            mean.add(double(eta) * std::exp(post.log_weights[eta]));
    }
    post.mean = mean.value();
    post.zero_prob = std::exp(post.log_weights[0]);
    return post;
}

/// log p(y) under the compound law with latent-count mean lambda,
/// marginalized over eta by the same truncated sum as posterior_eta.
inline double compound_log_likelihood(double y, double lambda,
                                      const ElementDistribution& elem,
                                      std::size_t eta_max = kEtaDefaultMax) {
    if (y == 0.0) {
        // closed forms: the eta >= 1 terms vanish for gamma/zero-truncated
        // elements and collapse geometrically for the poisson element
        if (elem.family == Family::gamma ||
            elem.family == Family::zero_truncated_poisson) {
            elem.validate();
            return -lambda;
        }
        if (elem.family == Family::poisson) {
            elem.validate();
            return lambda * std::expm1(-elem.kappa * std::exp(elem.theta)) ;
        }
    }
    detail::EtaWeights w = detail::eta_weights_adaptive(y, lambda, elem, eta_max);
    return w.log_norm + elem.theta * y - lambda;
}

/// E[y] = lambda * kappa * Psi'(theta).
inline double response_mean(const ElementDistribution& elem, double lambda) {
    if (!(lambda >= 0.0)) throw domain_error("response_mean: rate must be non-negative");
    return lambda * elem.kappa * log_partition_derivative(elem);
}

/// P(y != 0). Exact 1 - e^-lambda for gamma/zero-truncated elements,
/// the collapsed geometric series for the poisson element, and 1 for
/// the gaussian element (continuous support; rank by the rate instead).
inline double prob_nonzero(const ElementDistribution& elem, double lambda) {
    elem.validate();
    if (!(lambda >= 0.0)) throw domain_error("prob_nonzero: rate must be non-negative");
    switch (elem.family) {
        case Family::gamma:
        case Family::zero_truncated_poisson:
            return -std::expm1(-lambda);
        case Family::poisson:
            return -std::expm1(lambda * std::expm1(-elem.kappa * std::exp(elem.theta)));
        case Family::gaussian:
            return 1.0;
    }
    throw domain_error("prob_nonzero: unknown family");
}

/// One draw from the element law.
inline double sample_element(const ElementDistribution& elem, Rng& rng) {
    switch (elem.family) {
        case Family::poisson: {
            std::poisson_distribution<long> dist(elem.kappa * std::exp(elem.theta));
            return double(dist(rng));
        }
        case Family::gamma: {
            std::gamma_distribution<double> dist(elem.kappa, -1.0 / elem.theta);
            return dist(rng);
        }
        case Family::gaussian: {
            std::normal_distribution<double> dist(elem.kappa * elem.theta,
                                                  std::sqrt(elem.kappa));
            return dist(rng);
        }
        case Family::zero_truncated_poisson: {
            double mu = std::exp(elem.theta);
            if (mu >= 1.0) {
                std::poisson_distribution<long> dist(mu);
                while (true) {
                    long v = dist(rng);
                    if (v >= 1) return double(v);
                }
            }
            // small-mean inverse cdf: p(y) proportional to mu^y / y!
            std::uniform_real_distribution<double> unif(0.0, 1.0);
            double target = unif(rng) * std::expm1(mu);
            double term = mu, cum = mu;
            long y = 1;
            while (cum < target && y < 500) {
                ++y;
                term *= mu / double(y);
                cum += term;
            }
            return double(y);
        }
    }
    throw domain_error("sample_element: unknown family");
}

/// Draws eta ~ Poisson(lambda) then the sum of eta element draws.
inline double sample_compound(double lambda, const ElementDistribution& elem, Rng& rng) {
    elem.validate();
    if (!(lambda >= 0.0))
        throw domain_error("sample_compound: rate must be non-negative");
    if (lambda == 0.0) return 0.0;
    std::poisson_distribution<long> count(lambda);
    long eta = count(rng);
    double y = 0.0;
    for (long i = 0; i < eta; ++i) y += sample_element(elem, rng);
    return y;
}

/// Result of the single-event maximum-likelihood initialization.
struct MleInit {
    ElementDistribution elem;
    /// Set when a degenerate sample forced the default-dispersion path.
    bool fallback = false;
};

/// Fits (theta, kappa) by maximizing the single-draw element likelihood
/// of a nonzero sample. Closed form for the gaussian family; bracketed
/// 1-D solves for gamma (shape equation on [k/64, k*64] around the
/// moment seed) and zero-truncated poisson (mean equation on
/// [mean-1, mean]). The poisson compound law depends on (theta, kappa)
/// only through kappa*e^theta, so kappa is pinned at 1.
inline MleInit mle_init(const std::vector<double>& sample, Family family) {
    if (sample.empty()) throw std::invalid_argument("mle_init: empty sample");
    MleInit out;
    out.elem.family = family;

    double n = double(sample.size());
    double mean = 0.0;
    for (double y : sample) mean += y;
    mean /= n;

    switch (family) {
        case Family::gaussian: {
            double var = 0.0;
            for (double y : sample) var += (y - mean) * (y - mean);
            var /= n;
            if (var < 1e-12 * (1.0 + mean * mean)) {
                out.fallback = true;
                out.elem.kappa = 1.0;
                out.elem.theta = mean;
                log_info("mle_init: degenerate gaussian sample, using kappa = 1");
            } else {
                out.elem.kappa = var;
                out.elem.theta = mean / var;
            }
            break;
        }
        case Family::gamma: {
            double log_mean_gap = 0.0;  // log(mean) - mean(log y)
            for (double y : sample) {
                if (!(y > 0.0))
                    throw support_error("mle_init: gamma sample must be positive");
                log_mean_gap += std::log(y);
            }
            log_mean_gap = std::log(mean) - log_mean_gap / n;
            if (log_mean_gap < 1e-10) {
                out.fallback = true;
                out.elem.kappa = 1.0;
                out.elem.theta = -1.0 / mean;
                log_info("mle_init: degenerate gamma sample, using kappa = 1");
                break;
            }
            // shape equation: log(k) - digamma(k) = gap, decreasing in k
            double seed = (3.0 - log_mean_gap +
                           std::sqrt((log_mean_gap - 3.0) * (log_mean_gap - 3.0) +
                                     24.0 * log_mean_gap)) /
                          (12.0 * log_mean_gap);
            double lo = seed / 64.0, hi = seed * 64.0;
            for (int i = 0; i < 200; ++i) {
                double mid = 0.5 * (lo + hi);
                if (std::log(mid) - digamma(mid) > log_mean_gap)
                    lo = mid;
                else
                    hi = mid;
            }
            out.elem.kappa = 0.5 * (lo + hi);
            out.elem.theta = -out.elem.kappa / mean;
            break;
        }
        case Family::poisson: {
            for (double y : sample)
                if (!detail::is_integer(y) || y < 0.0)
                    throw support_error("mle_init: poisson sample must be counts");
            if (!(mean > 0.0))
                throw support_error("mle_init: poisson sample mean must be positive");
            out.elem.kappa = 1.0;
            out.elem.theta = std::log(mean);
            break;
        }
        case Family::zero_truncated_poisson: {
            for (double y : sample)
                if (!detail::is_integer(y) || y < 1.0)
                    throw support_error(
                        "mle_init: zero-truncated sample must be positive counts");
            out.elem.kappa = 1.0;
            if (mean < 1.0 + 1e-9) {
                out.fallback = true;
                out.elem.theta = std::log(1e-6);
                log_info("mle_init: all-ones zero-truncated sample, clamping theta");
                break;
            }
            // mean equation: mu / (1 - e^-mu) = mean, root in (mean-1, mean)
            double lo = std::max(mean - 1.0, 1e-12), hi = mean;
            for (int i = 0; i < 200; ++i) {
                double mid = 0.5 * (lo + hi);
                if (mid / (-std::expm1(-mid)) < mean)
                    lo = mid;
                else
                    hi = mid;
            }
            out.elem.theta = std::log(0.5 * (lo + hi));
            break;
        }
    }
    out.elem.validate();
    return out;
}

}  // namespace dcpf
