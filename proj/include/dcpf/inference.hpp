#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dcpf/common.hpp"
#include "dcpf/dataset.hpp"
#include "dcpf/edm.hpp"
#include "dcpf/gamma_chain.hpp"
#include "dcpf/math.hpp"

namespace dcpf {

/// Gamma shape/rate pairs over (entity, component, window), flattened
/// entity-major.
struct GammaSlab {
    std::size_t entities = 0;
    std::size_t components = 0;
    std::size_t windows = 0;
    std::vector<double> shape;
    std::vector<double> rate;

    void resize(std::size_t e, std::size_t k, std::size_t t) {
        entities = e;
        components = k;
        windows = t;
        shape.assign(e * k * t, 0.0);
        rate.assign(e * k * t, 0.0);
    }
    std::size_t index(std::size_t e, std::size_t k, std::size_t t) const {
        return (e * components + k) * windows + t;
    }
    double mean(std::size_t e, std::size_t k, std::size_t t) const {
        std::size_t i = index(e, k, t);
        return shape[i] / rate[i];
    }
};

/// Gamma shape/rate pairs over entities.
struct GammaVec {
    std::vector<double> shape;
    std::vector<double> rate;

    void resize(std::size_t e) {
        shape.assign(e, 0.0);
        rate.assign(e, 0.0);
    }
    double mean(std::size_t e) const { return shape[e] / rate[e]; }
};

/// The mean-field family: independent gammas for every latent state,
/// auxiliary state and per-entity initial rate.
struct VariationalParams {
    GammaSlab user_state;  // u
    GammaSlab user_aux;    // z
    GammaSlab item_state;  // v
    GammaSlab item_aux;    // w
    GammaVec user_init;    // per-user initial rate
    GammaVec item_init;    // per-item initial rate
};

enum class TrainOn { nonmissing, full };

inline const char* train_on_name(TrainOn m) {
    return m == TrainOn::nonmissing ? "nonmissing" : "full";
}

inline TrainOn train_on_from_name(const std::string& s) {
    if (s == "nonmissing") return TrainOn::nonmissing;
    if (s == "full") return TrainOn::full;
    throw std::invalid_argument("unknown train_on mode '" + s + "'");
}

struct FitConfig {
    std::size_t num_components = 70;
    Family family = Family::gamma;
    ChainHyper user_hyper{};
    ChainHyper item_hyper{};
    double learning_delay = 10000.0;  // step-size delay
    double learning_power = 0.7;      // step-size decay exponent
    double convergence_tol = 1e-5;
    std::size_t max_epochs = 500;
    TrainOn train_on = TrainOn::nonmissing;
    TrainOn validation_on = TrainOn::nonmissing;
    std::size_t batch_size = 64;
    /// Exact alternating sweeps with step size 1 over all cells.
    bool full_batch = false;
    std::size_t mle_sample_size = 1000;
    std::size_t eta_max = kEtaDefaultMax;
    std::uint64_t seed = 1;
    std::size_t threads = 1;

    void validate() const {
        if (num_components < 1)
            throw std::invalid_argument("FitConfig: need at least one component");
        if (!(learning_power > 0.5) || !(learning_power <= 1.0))
            throw std::invalid_argument("FitConfig: learning_power must lie in (0.5, 1]");
        if (!(learning_delay >= 0.0))
            throw std::invalid_argument("FitConfig: learning_delay must be non-negative");
        if (!(convergence_tol > 0.0))
            throw std::invalid_argument("FitConfig: convergence_tol must be positive");
        if (batch_size < 1)
            throw std::invalid_argument("FitConfig: batch_size must be positive");
        user_hyper.validate();
        item_hyper.validate();
    }
};

/// rho = (step + delay)^(-power); strictly decreasing in the step.
inline double learning_rate(std::size_t step, double delay, double power) {
    if (step < 1) throw std::invalid_argument("learning_rate: step starts at 1");
    return std::pow(double(step) + delay, -power);
}

/// Per-cell local state: the latent-count rate, its posterior, and the
/// component-allocation probabilities.
struct LocalState {
    double lambda = 0.0;
    EtaPosterior eta;
    std::vector<double> phi;
};

inline LocalState local_step(std::size_t m, std::size_t n, std::size_t t,
                             const VariationalParams& params,
                             const ElementDistribution& elem, double y,
                             std::size_t eta_max = kEtaDefaultMax) {
    const GammaSlab& u = params.user_state;
    const GammaSlab& v = params.item_state;
    std::size_t K = u.components;
    LocalState local;
    local.phi.resize(K);
    double lambda = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        lambda += u.mean(m, k, t) * v.mean(n, k, t);
        std::size_t ui = u.index(m, k, t);
        std::size_t vi = v.index(n, k, t);
        local.phi[k] = digamma(u.shape[ui]) - std::log(u.rate[ui]) +
                       digamma(v.shape[vi]) - std::log(v.rate[vi]);
    }
    double norm = log_sum_exp(local.phi);
    for (std::size_t k = 0; k < K; ++k) local.phi[k] = std::exp(local.phi[k] - norm);
    local.lambda = lambda;
    local.eta = posterior_eta(y, lambda, elem, eta_max);
    return local;
}

/// Locals aggregated over an item (resp. user) batch for one (entity,
/// window): per component, the sum of E[eta]*phi over stored cells and
/// the sum of opposing-side factor means over the whole batch.
struct LocalAggregate {
    std::vector<double> eta_phi;
    std::vector<double> opposing_mean;
};

namespace detail {

struct SideRef {
    GammaSlab& state;
    GammaSlab& aux;
    GammaVec& init;
    const ChainHyper& hyper;
};

inline double guard_rate(double rate, std::size_t* floor_hits) {
    if (rate > 1e-10) return rate;
    if (floor_hits) ++*floor_hits;
    log_debug("global update: rate clamped to floor");
    return 1e-10;
}

/// Blended conjugate update for one (entity, window) of one side; the
/// initial-rate update is folded into the first window's step.
inline void global_update_side(SideRef side, std::size_t e, std::size_t t,
                               const LocalAggregate& agg, double rho, double scale,
                               std::size_t* floor_hits) {
    const ChainHyper& h = side.hyper;
    GammaSlab& st = side.state;
    GammaSlab& ax = side.aux;
    std::size_t K = st.components;
    std::size_t T = st.windows;
    double blend = 1.0 - rho;

    for (std::size_t k = 0; k < K; ++k) {
        std::size_t i = st.index(e, k, t);
        double a_target = h.shape_aux + h.shape_state + scale * agg.eta_phi[k];
        st.shape[i] = blend * st.shape[i] + rho * a_target;
        double b_target = h.rate_state * ax.mean(e, k, t) +
                          scale * agg.opposing_mean[k];
        if (t + 1 < T) b_target += h.rate_aux * ax.mean(e, k, t + 1);
        st.rate[i] = guard_rate(blend * st.rate[i] + rho * b_target, floor_hits);
    }
    for (std::size_t k = 0; k < K; ++k) {
        std::size_t i = ax.index(e, k, t);
        double prev = t == 0 ? side.init.mean(e)
                             : h.rate_aux * st.mean(e, k, t - 1);
        double z_target = h.rate_state * st.mean(e, k, t) + prev;
        ax.rate[i] = guard_rate(blend * ax.rate[i] + rho * z_target, floor_hits);
    }
    if (t == 0) {
        double b_target = h.init_shape / h.init_mean;
        for (std::size_t k = 0; k < K; ++k) b_target += ax.mean(e, k, 0);
        side.init.rate[e] =
            guard_rate(blend * side.init.rate[e] + rho * b_target, floor_hits);
    }
}

}  // namespace detail

/// User-side blended update at (m, t) from locals aggregated over an
/// item batch; scale lifts the batch sums to the full item set.
inline void global_update_user(VariationalParams& params, const ChainHyper& user_hyper,
                               std::size_t m, std::size_t t, const LocalAggregate& agg,
                               double rho, double scale,
                               std::size_t* floor_hits = nullptr) {
    detail::SideRef side{params.user_state, params.user_aux, params.user_init,
                         user_hyper};
    detail::global_update_side(side, m, t, agg, rho, scale, floor_hits);
}

/// Item-side mirror of global_update_user.
inline void global_update_item(VariationalParams& params, const ChainHyper& item_hyper,
                               std::size_t n, std::size_t t, const LocalAggregate& agg,
                               double rho, double scale,
                               std::size_t* floor_hits = nullptr) {
    detail::SideRef side{params.item_state, params.item_aux, params.item_init,
                         item_hyper};
    detail::global_update_side(side, n, t, agg, rho, scale, floor_hits);
}

// ---------------------------------------------------------------------------
// Initialization

struct InitResult {
    VariationalParams params;
    ElementDistribution element;
    ChainHyper user_hyper;
    ChainHyper item_hyper;
    /// Initial factor scale sqrt(E[eta]/K), also the resolved init_mean.
    double factor_scale = 0.0;
    bool mle_fallback = false;
};

/// Fits the element law on a seeded sample of first-window nonzeros,
/// sets the constant shapes, and initializes every factor mean to
/// sqrt(E[eta]/K) with multiplicative jitter.
inline InitResult init_params(const DataSplit& split, const FitConfig& config) {
    config.validate();
    const InteractionTensor& train = split.train;
    std::size_t M = train.num_users();
    std::size_t N = train.num_items();
    std::size_t K = config.num_components;
    std::size_t T = train.num_windows();

    std::span<const Cell> first_window = train.window_cells(0);
    if (first_window.empty())
        throw init_error("init_params: no nonzero ratings in the first window");
    std::vector<double> values;
    values.reserve(first_window.size());
    for (const Cell& c : first_window) values.push_back(c.value);
    if (values.size() > config.mle_sample_size) {
        Rng rng = make_rng(config.seed, 0xA11);
        std::shuffle(values.begin(), values.end(), rng);
        values.resize(config.mle_sample_size);
    }

    InitResult out;
    MleInit mle = mle_init(values, config.family);
    out.element = mle.elem;
    out.mle_fallback = mle.fallback;

    // mean latent count of the sample at unit rate
    KahanSum eta_sum;
    for (double y : values)
        eta_sum.add(posterior_eta(y, 1.0, out.element, config.eta_max).mean);
    double mean_eta = eta_sum.value() / double(values.size());
    double scale = std::sqrt(std::max(mean_eta, 1e-12) / double(K));
    out.factor_scale = scale;

    out.user_hyper = config.user_hyper;
    out.item_hyper = config.item_hyper;
    out.user_hyper.init_mean = scale;
    out.item_hyper.init_mean = scale;

    VariationalParams& p = out.params;
    p.user_state.resize(M, K, T);
    p.user_aux.resize(M, K, T);
    p.item_state.resize(N, K, T);
    p.item_aux.resize(N, K, T);
    p.user_init.resize(M);
    p.item_init.resize(N);

    Rng jitter_rng = make_rng(config.seed, 0x171);
    std::uniform_real_distribution<double> jitter(0.9, 1.1);

    auto init_side = [&](GammaSlab& state, GammaSlab& aux, GammaVec& init,
                         const ChainHyper& h, std::size_t count) {
        double state_shape = h.shape_aux + h.shape_state;
        double aux_shape = h.shape_state + h.shape_aux;
        double init_shape = h.init_shape + double(K) * h.shape_aux;
        for (std::size_t e = 0; e < count; ++e) {
            for (std::size_t k = 0; k < K; ++k) {
                for (std::size_t t = 0; t < T; ++t) {
                    std::size_t i = state.index(e, k, t);
                    state.shape[i] = state_shape;
                    state.rate[i] = state_shape / (scale * jitter(jitter_rng));
                    aux.shape[i] = aux_shape;
                }
            }
            // auxiliary and initial rates start at their coordinate targets
            // given the jittered state means
            for (std::size_t k = 0; k < K; ++k) {
                for (std::size_t t = 0; t < T; ++t) {
                    std::size_t i = aux.index(e, k, t);
                    double prev = t == 0 ? h.init_mean
                                         : h.rate_aux * state.mean(e, k, t - 1);
                    aux.rate[i] = h.rate_state * state.mean(e, k, t) + prev;
                }
            }
            init.shape[e] = init_shape;
            double rate = h.init_shape / h.init_mean;
            for (std::size_t k = 0; k < K; ++k) rate += aux.mean(e, k, 0);
            init.rate[e] = rate;
        }
    };
    init_side(p.user_state, p.user_aux, p.user_init, out.user_hyper, M);
    init_side(p.item_state, p.item_aux, p.item_init, out.item_hyper, N);
    return out;
}

// ---------------------------------------------------------------------------
// Fitted model, scoring and predictive likelihood

struct EpochLog {
    std::size_t epoch = 0;
    double validation_loglik = 0.0;
    double rho = 0.0;
};

struct FittedModel {
    VariationalParams params;
    FitConfig config;
    ElementDistribution element;
    ChainHyper user_hyper;
    ChainHyper item_hyper;
    IdMap users;
    IdMap items;
    TimeGrid grid;  // training grid
    std::vector<EpochLog> history;
    bool converged = false;
    std::size_t best_epoch = 0;
    std::size_t rate_floor_hits = 0;

    std::size_t num_users() const { return params.user_state.entities; }
    std::size_t num_items() const { return params.item_state.entities; }
    std::size_t num_components() const { return params.user_state.components; }
    std::size_t train_windows() const { return params.user_state.windows; }
};

namespace detail {

/// E[state] at (e, k, t), extrapolated by the drift ratio past the
/// training horizon.
inline double factor_mean_at(const GammaSlab& slab, const ChainHyper& hyper,
                             std::size_t e, std::size_t k, std::size_t t) {
    std::size_t T = slab.windows;
    if (t < T) return slab.mean(e, k, t);
    return forecast_state(slab.mean(e, k, T - 1), hyper, t - T + 1);
}

inline std::vector<double> population_mean_factors(const GammaSlab& slab,
                                                   const ChainHyper& hyper,
                                                   std::size_t t) {
    std::vector<double> out(slab.components, 0.0);
    for (std::size_t k = 0; k < slab.components; ++k) {
        KahanSum sum;
        for (std::size_t e = 0; e < slab.entities; ++e)
            sum.add(factor_mean_at(slab, hyper, e, k, t));
        out[k] = slab.entities == 0 ? 0.0 : sum.value() / double(slab.entities);
    }
    return out;
}

}  // namespace detail

/// Latent-count rate Sum_k E[u] E[v] at (m, n, t); windows beyond the
/// training horizon use the forecast extrapolation.
inline double model_lambda(const FittedModel& model, std::size_t m, std::size_t n,
                           std::size_t t) {
    double lambda = 0.0;
    for (std::size_t k = 0; k < model.num_components(); ++k)
        lambda += detail::factor_mean_at(model.params.user_state, model.user_hyper,
                                         m, k, t) *
                  detail::factor_mean_at(model.params.item_state, model.item_hyper,
                                         n, k, t);
    return lambda;
}

struct Score {
    double expected_rating = 0.0;
    double prob_nonzero = 0.0;
    double lambda = 0.0;
    bool cold_start_user = false;
    bool cold_start_item = false;

    /// Score used for binarized ranking: the nonzero probability, or
    /// the rate for the gaussian element whose nonzero probability is 1.
    double ranking_score(Family family) const {
        return family == Family::gaussian ? lambda : prob_nonzero;
    }
};

inline Score score(const FittedModel& model, std::size_t m, std::size_t n,
                   std::size_t t) {
    Score s;
    s.lambda = model_lambda(model, m, n, t);
    s.expected_rating = response_mean(model.element, s.lambda);
    s.prob_nonzero = prob_nonzero(model.element, s.lambda);
    return s;
}

/// Id-based scoring with a cold-start fallback: unknown entities score
/// with population-mean factors and carry a warning flag.
inline Score score_by_id(const FittedModel& model, const std::string& user_id,
                         const std::string& item_id, std::size_t t) {
    auto mi = model.users.get(user_id);
    auto ni = model.items.get(item_id);
    if (mi && ni) return score(model, *mi, *ni, t);

    Score s;
    std::vector<double> fu, fv;
    if (mi) {
        fu.resize(model.num_components());
        for (std::size_t k = 0; k < fu.size(); ++k)
            fu[k] = detail::factor_mean_at(model.params.user_state, model.user_hyper,
                                           *mi, k, t);
    } else {
        s.cold_start_user = true;
        fu = detail::population_mean_factors(model.params.user_state,
                                             model.user_hyper, t);
    }
    if (ni) {
        fv.resize(model.num_components());
        for (std::size_t k = 0; k < fv.size(); ++k)
            fv[k] = detail::factor_mean_at(model.params.item_state, model.item_hyper,
                                           *ni, k, t);
    } else {
        s.cold_start_item = true;
        fv = detail::population_mean_factors(model.params.item_state,
                                             model.item_hyper, t);
    }
    for (std::size_t k = 0; k < fu.size(); ++k) s.lambda += fu[k] * fv[k];
    s.expected_rating = response_mean(model.element, s.lambda);
    s.prob_nonzero = prob_nonzero(model.element, s.lambda);
    return s;
}

struct LoglikResult {
    double sum = 0.0;
    std::size_t cells = 0;
    std::size_t excluded = 0;

    double mean() const { return cells == 0 ? 0.0 : sum / double(cells); }
};

/// Average per-cell log-likelihood of an evaluation tensor. In
/// nonmissing mode only stored cells contribute; in full mode the
/// implicit zeros of the evaluated windows contribute log P(y = 0),
/// except cells stored in the optional `observed_elsewhere` tensor
/// (another held-out partition is not a zero). Cells whose truncated
/// sum hits the cap are excluded and counted.
inline LoglikResult predictive_loglik(
    const FittedModel& model, const InteractionTensor& cells, TrainOn mode,
    std::optional<std::pair<std::size_t, std::size_t>> window_range = std::nullopt,
    const InteractionTensor* observed_elsewhere = nullptr) {
    LoglikResult out;
    KahanSum sum;
    auto add_cell = [&](std::size_t m, std::size_t n, std::size_t t, double y) {
        double lambda = model_lambda(model, m, n, t);
        EtaPosterior post;  // only for truncation detection on stored cells
        if (y != 0.0) {
            post = posterior_eta(y, lambda, model.element, model.config.eta_max);
            if (post.truncated) {
                ++out.excluded;
                log_debug("predictive_loglik: cell (%zu, %zu, %zu) excluded at cap",
                          m, n, t);
                return;
            }
        }
        sum.add(compound_log_likelihood(y, lambda, model.element, model.config.eta_max));
        ++out.cells;
    };

    if (mode == TrainOn::nonmissing) {
        for (const Cell& c : cells.cells()) add_cell(c.user, c.item, c.window, c.value);
    } else {
        std::size_t lo = 0, hi = cells.num_windows();
        if (window_range) {
            lo = window_range->first;
            hi = window_range->second;
        } else {
            // default to the span of windows that hold stored cells
            lo = cells.num_windows();
            hi = 0;
            for (const Cell& c : cells.cells()) {
                lo = std::min<std::size_t>(lo, c.window);
                hi = std::max<std::size_t>(hi, c.window + 1);
            }
            if (lo >= hi) return out;
        }
        for (std::size_t t = lo; t < hi; ++t) {
            for (std::size_t m = 0; m < cells.num_users(); ++m) {
                for (std::size_t n = 0; n < cells.num_items(); ++n) {
                    auto stored = cells.value_at(m, n, t);
                    if (!stored && observed_elsewhere &&
                        observed_elsewhere->value_at(m, n, t))
                        continue;
                    add_cell(m, n, t, stored.value_or(0.0));
                }
            }
        }
    }
    out.sum = sum.value();
    if (out.excluded > 0)
        log_info("predictive_loglik: %zu cells excluded at the truncation cap",
                 out.excluded);
    return out;
}

// ---------------------------------------------------------------------------
// Fitting

namespace detail {

/// Stored cells of one user grouped by window.
struct UserAdjacency {
    // per user, per window: (item, value) pairs in item order
    std::vector<std::vector<std::vector<std::pair<std::uint32_t, double>>>> rows;

    UserAdjacency(const InteractionTensor& tensor) {
        rows.assign(tensor.num_users(), {});
        for (auto& r : rows) r.assign(tensor.num_windows(), {});
        for (const Cell& c : tensor.cells())
            rows[c.user][c.window].emplace_back(c.item, c.value);
    }
};

inline void check_positive_lambda(double lambda, std::size_t m, std::size_t n,
                                  std::size_t t, double y) {
    if (y != 0.0 && !(lambda > 0.0))
        throw error("fit: zero rate at stored cell (" + std::to_string(m) + ", " +
                    std::to_string(n) + ", " + std::to_string(t) + ")");
}

}  // namespace detail

/// Runs stochastic variational inference (or exact alternating sweeps
/// in full-batch mode), monitoring validation predictive likelihood
/// after each epoch; returns the best-validation snapshot.
inline FittedModel fit(const DataSplit& split, const FitConfig& config) {
    config.validate();
    if (split.train.nnz() == 0) throw error("fit: empty training set");
    if (split.validation.nnz() == 0 && config.max_epochs > 0)
        throw error("fit: empty validation set; convergence cannot be monitored");

    InitResult init = init_params(split, config);
    std::size_t M = split.train.num_users();
    std::size_t N = split.train.num_items();
    std::size_t K = config.num_components;
    std::size_t T = split.train.num_windows();

    FittedModel model;
    model.params = std::move(init.params);
    model.config = config;
    model.element = init.element;
    model.user_hyper = init.user_hyper;
    model.item_hyper = init.item_hyper;
    model.users = split.train.users;
    model.items = split.train.items;
    model.grid = split.train.grid;

    auto validation_loglik = [&]() {
        LoglikResult r = predictive_loglik(model, split.validation, config.validation_on);
        if (!std::isfinite(r.mean())) {
            for (const Cell& c : split.validation.cells()) {
                double lambda = model_lambda(model, c.user, c.item, c.window);
                double ll = compound_log_likelihood(c.value, lambda, model.element,
                                                    config.eta_max);
                if (!std::isfinite(ll))
                    throw error("fit: validation likelihood diverged at cell (" +
                                std::to_string(c.user) + ", " + std::to_string(c.item) +
                                ", " + std::to_string(c.window) + "), y = " +
                                format_double(c.value) + ", rate = " +
                                format_double(lambda));
            }
            throw error("fit: validation likelihood diverged");
        }
        return r.mean();
    };

    double vll = validation_loglik();
    model.history.push_back({0, vll, 0.0});
    VariationalParams best = model.params;
    double best_vll = vll;
    model.best_epoch = 0;

    detail::UserAdjacency adjacency(split.train);
    std::size_t step_user = 0, step_item = 0;
    double prev_vll = vll;

    std::vector<std::uint32_t> user_order(M);
    std::iota(user_order.begin(), user_order.end(), 0);

    LocalAggregate agg;
    agg.eta_phi.assign(K, 0.0);
    agg.opposing_mean.assign(K, 0.0);

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        Rng epoch_rng = make_rng(config.seed, 0xE0C, epoch);
        std::shuffle(user_order.begin(), user_order.end(), epoch_rng);
        double rho_user = 1.0;

        if (config.full_batch) {
            // exact alternating coordinate sweeps, step size 1
            auto sweep = [&](bool user_side) {
                const GammaSlab& opposing =
                    user_side ? model.params.item_state : model.params.user_state;
                std::size_t count = user_side ? M : N;
                // opposing-side totals are fixed within the half-sweep
                std::vector<double> totals(K * T, 0.0);
                for (std::size_t e = 0; e < opposing.entities; ++e)
                    for (std::size_t k = 0; k < K; ++k)
                        for (std::size_t t = 0; t < T; ++t)
                            totals[k * T + t] += opposing.mean(e, k, t);
                for (std::size_t e = 0; e < count; ++e) {
                    for (std::size_t t = 0; t < T; ++t) {
                        std::fill(agg.eta_phi.begin(), agg.eta_phi.end(), 0.0);
                        auto accumulate = [&](std::size_t m, std::size_t n, double y) {
                            LocalState local =
                                local_step(m, n, t, model.params, model.element, y,
                                           config.eta_max);
                            detail::check_positive_lambda(local.lambda, m, n, t, y);
                            for (std::size_t k = 0; k < K; ++k)
                                agg.eta_phi[k] += local.eta.mean * local.phi[k];
                        };
                        if (config.train_on == TrainOn::full) {
                            for (std::size_t o = 0; o < opposing.entities; ++o) {
                                std::size_t m = user_side ? e : o;
                                std::size_t n = user_side ? o : e;
                                double y =
                                    split.train.value_at(m, n, t).value_or(0.0);
                                accumulate(m, n, y);
                            }
                        } else if (user_side) {
                            for (auto [n, y] : adjacency.rows[e][t]) accumulate(e, n, y);
                        } else {
                            for (std::uint32_t ci : split.train.item_cells(e)) {
                                const Cell& c = split.train.cells()[ci];
                                if (c.window == t) accumulate(c.user, e, c.value);
                            }
                        }
                        for (std::size_t k = 0; k < K; ++k)
                            agg.opposing_mean[k] = totals[k * T + t];
                        if (user_side)
                            global_update_user(model.params, model.user_hyper, e, t,
                                               agg, 1.0, 1.0, &model.rate_floor_hits);
                        else
                            global_update_item(model.params, model.item_hyper, e, t,
                                               agg, 1.0, 1.0, &model.rate_floor_hits);
                    }
                }
            };
            sweep(true);
            sweep(false);
        } else {
            std::size_t B = std::min(config.batch_size, N);
            double user_scale = double(N) / double(B);
            std::size_t chunk = std::max<std::size_t>(1, config.threads);

            struct BlockResult {
                std::uint32_t user = 0;
                double rho_item = 0.0;
                std::vector<std::uint32_t> batch;
                std::vector<LocalState> locals;  // [bi * T + t]; empty phi = skipped
            };
            std::vector<BlockResult> blocks(std::min(chunk, std::size_t(M)));

            for (std::size_t base = 0; base < M; base += chunk) {
                std::size_t active = std::min(chunk, M - base);
                for (std::size_t c = 0; c < active; ++c) {
                    blocks[c].user = user_order[base + c];
                    // counters advance in block order regardless of threading
                    rho_user = learning_rate(++step_user, config.learning_delay,
                                             config.learning_power);
                    blocks[c].rho_item = learning_rate(
                        ++step_item, config.learning_delay, config.learning_power);
                }
                // phase A: locals and user updates; each worker touches only
                // its own user's slices and reads item slices, which no one
                // writes until phase B
                auto run_block = [&](std::size_t c, double rho_u) {
                    BlockResult& blk = blocks[c];
                    std::uint32_t m = blk.user;
                    Rng block_rng = make_rng(config.seed, 0xB10C, epoch, m);
                    std::vector<std::uint32_t> pool(N);
                    std::iota(pool.begin(), pool.end(), 0);
                    // partial Fisher-Yates for a uniform batch
                    for (std::size_t i = 0; i < B; ++i) {
                        std::uniform_int_distribution<std::size_t> pick(i, N - 1);
                        std::swap(pool[i], pool[pick(block_rng)]);
                    }
                    blk.batch.assign(pool.begin(), pool.begin() + B);
                    blk.locals.assign(B * T, LocalState{});

                    LocalAggregate block_agg;
                    block_agg.eta_phi.assign(K, 0.0);
                    block_agg.opposing_mean.assign(K, 0.0);
                    for (std::size_t t = 0; t < T; ++t) {
                        std::fill(block_agg.eta_phi.begin(), block_agg.eta_phi.end(),
                                  0.0);
                        std::fill(block_agg.opposing_mean.begin(),
                                  block_agg.opposing_mean.end(), 0.0);
                        for (std::size_t bi = 0; bi < B; ++bi) {
                            std::uint32_t n = blk.batch[bi];
                            double y = split.train.value_at(m, n, t).value_or(0.0);
                            LocalState& local = blk.locals[bi * T + t];
                            if (y != 0.0 || config.train_on == TrainOn::full) {
                                local = local_step(m, n, t, model.params,
                                                   model.element, y, config.eta_max);
                                detail::check_positive_lambda(local.lambda, m, n, t, y);
                                for (std::size_t k = 0; k < K; ++k)
                                    block_agg.eta_phi[k] +=
                                        local.eta.mean * local.phi[k];
                            }
                            for (std::size_t k = 0; k < K; ++k)
                                block_agg.opposing_mean[k] +=
                                    model.params.item_state.mean(n, k, t);
                        }
                        global_update_user(model.params, model.user_hyper, m, t,
                                           block_agg, rho_u, user_scale,
                                           &model.rate_floor_hits);
                    }
                };
                if (active == 1 || chunk == 1) {
                    run_block(0, rho_user);
                } else {
                    std::vector<std::thread> pool;
                    pool.reserve(active);
                    std::size_t first_step = step_user - active + 1;
                    for (std::size_t c = 0; c < active; ++c) {
                        double rho_u = learning_rate(first_step + c,
                                                     config.learning_delay,
                                                     config.learning_power);
                        pool.emplace_back(run_block, c, rho_u);
                    }
                    for (auto& th : pool) th.join();
                }

                // phase B: item updates in deterministic block order, one
                // sampled occurrence per (user, item) scaled to the user set
                LocalAggregate item_agg;
                item_agg.eta_phi.assign(K, 0.0);
                item_agg.opposing_mean.assign(K, 0.0);
                for (std::size_t c = 0; c < active; ++c) {
                    const BlockResult& blk = blocks[c];
                    for (std::size_t bi = 0; bi < B; ++bi) {
                        std::uint32_t n = blk.batch[bi];
                        for (std::size_t t = 0; t < T; ++t) {
                            const LocalState& local = blk.locals[bi * T + t];
                            for (std::size_t k = 0; k < K; ++k) {
                                item_agg.eta_phi[k] =
                                    local.phi.empty() ? 0.0
                                                      : local.eta.mean * local.phi[k];
                                item_agg.opposing_mean[k] =
                                    model.params.user_state.mean(blk.user, k, t);
                            }
                            global_update_item(model.params, model.item_hyper, n, t,
                                               item_agg, blk.rho_item, double(M),
                                               &model.rate_floor_hits);
                        }
                    }
                }
            }
        }

        vll = validation_loglik();
        model.history.push_back({epoch, vll, config.full_batch ? 1.0 : rho_user});
        if (vll > best_vll) {
            best_vll = vll;
            best = model.params;
            model.best_epoch = epoch;
        }
        double rel_change = std::abs(vll - prev_vll) /
                            std::max(std::abs(prev_vll), 1e-300);
        log_debug("epoch %zu: validation %.6f (rel change %.3g)", epoch, vll,
                  rel_change);
        if (rel_change < config.convergence_tol) {
            model.converged = true;
            break;
        }
        prev_vll = vll;
    }

    model.params = std::move(best);
    return model;
}

// ---------------------------------------------------------------------------
// Model file format

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian; byte swapping is not implemented");

namespace detail {

inline void write_block(std::ostream& out, const std::vector<double>& v) {
    std::uint64_t count = v.size();
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    out.write(reinterpret_cast<const char*>(v.data()),
              std::streamsize(v.size() * sizeof(double)));
}

inline std::vector<double> read_block(std::istream& in) {
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!in) throw io_error("model file: truncated block header");
    std::vector<double> v(count);
    in.read(reinterpret_cast<char*>(v.data()), std::streamsize(count * sizeof(double)));
    if (!in) throw io_error("model file: truncated block data");
    return v;
}

inline void write_hyper(std::ostream& out, const char* key, const ChainHyper& h) {
    out << key << ' ' << format_double(h.shape_state) << ' '
        << format_double(h.shape_aux) << ' ' << format_double(h.rate_state) << ' '
        << format_double(h.rate_aux) << ' ' << format_double(h.init_shape) << ' '
        << format_double(h.init_mean) << '\n';
}

}  // namespace detail

/// Writes the versioned model file: a text header describing the
/// configuration, then length-prefixed little-endian float64 blocks in
/// a fixed order (user state shape/rate, user aux shape/rate, item
/// state shape/rate, item aux shape/rate, user init shape/rate, item
/// init shape/rate).
inline void write_model(const FittedModel& model, std::ostream& out,
                        const std::string& users_ids_file,
                        const std::string& items_ids_file) {
    out << "DCPF-MODEL v1\n";
    out << "family " << family_name(model.element.family) << '\n';
    out << "theta " << format_double(model.element.theta) << '\n';
    out << "kappa " << format_double(model.element.kappa) << '\n';
    out << "users " << model.num_users() << '\n';
    out << "items " << model.num_items() << '\n';
    out << "windows " << model.train_windows() << '\n';
    out << "components " << model.num_components() << '\n';
    detail::write_hyper(out, "user_hyper", model.user_hyper);
    detail::write_hyper(out, "item_hyper", model.item_hyper);
    out << "learning_delay " << format_double(model.config.learning_delay) << '\n';
    out << "learning_power " << format_double(model.config.learning_power) << '\n';
    out << "convergence_tol " << format_double(model.config.convergence_tol) << '\n';
    out << "max_epochs " << model.config.max_epochs << '\n';
    out << "train_on " << train_on_name(model.config.train_on) << '\n';
    out << "validation_on " << train_on_name(model.config.validation_on) << '\n';
    out << "batch " << model.config.batch_size << '\n';
    out << "full_batch " << (model.config.full_batch ? 1 : 0) << '\n';
    out << "eta_max " << model.config.eta_max << '\n';
    out << "seed " << model.config.seed << '\n';
    out << "converged " << (model.converged ? 1 : 0) << '\n';
    out << "best_epoch " << model.best_epoch << '\n';
    out << "users_ids " << users_ids_file << '\n';
    out << "items_ids " << items_ids_file << '\n';
    out << "blocks 12\n";
    out << "BINARY\n";
    for (const GammaSlab* slab :
         {&model.params.user_state, &model.params.user_aux, &model.params.item_state,
          &model.params.item_aux}) {
        detail::write_block(out, slab->shape);
        detail::write_block(out, slab->rate);
    }
    for (const GammaVec* vec : {&model.params.user_init, &model.params.item_init}) {
        detail::write_block(out, vec->shape);
        detail::write_block(out, vec->rate);
    }
}

struct ModelFileRefs {
    std::string users_ids_file;
    std::string items_ids_file;
};

/// Reads a model file; id maps are left as placeholders and their
/// sidecar file names are returned for the caller to resolve.
inline FittedModel read_model(std::istream& in, ModelFileRefs* refs = nullptr) {
    std::string line;
    if (!std::getline(in, line) || line != "DCPF-MODEL v1")
        throw io_error("model file: bad or missing DCPF-MODEL v1 header");
    FittedModel model;
    std::size_t M = 0, N = 0, T = 0, K = 0;
    ModelFileRefs local_refs;
    while (std::getline(in, line)) {
        if (line == "BINARY") break;
        std::istringstream row(line);
        std::string key;
        row >> key;
        auto want = [&](auto& v) {
            if (!(row >> v)) throw io_error("model file: bad value for " + key);
        };
        if (key == "family") {
            std::string name;
            want(name);
            model.element.family = family_from_name(name);
            model.config.family = model.element.family;
        } else if (key == "theta") want(model.element.theta);
        else if (key == "kappa") want(model.element.kappa);
        else if (key == "users") want(M);
        else if (key == "items") want(N);
        else if (key == "windows") want(T);
        else if (key == "components") want(K);
        else if (key == "user_hyper" || key == "item_hyper") {
            ChainHyper h;
            row >> h.shape_state >> h.shape_aux >> h.rate_state >> h.rate_aux >>
                h.init_shape >> h.init_mean;
            if (!row) throw io_error("model file: bad hyper line");
            (key == "user_hyper" ? model.user_hyper : model.item_hyper) = h;
        } else if (key == "learning_delay") want(model.config.learning_delay);
        else if (key == "learning_power") want(model.config.learning_power);
        else if (key == "convergence_tol") want(model.config.convergence_tol);
        else if (key == "max_epochs") want(model.config.max_epochs);
        else if (key == "train_on") {
            std::string name;
            want(name);
            model.config.train_on = train_on_from_name(name);
        } else if (key == "validation_on") {
            std::string name;
            want(name);
            model.config.validation_on = train_on_from_name(name);
        } else if (key == "batch") want(model.config.batch_size);
        else if (key == "full_batch") {
            int v = 0;
            want(v);
            model.config.full_batch = v != 0;
        } else if (key == "eta_max") want(model.config.eta_max);
        else if (key == "seed") want(model.config.seed);
        else if (key == "converged") {
            int v = 0;
            want(v);
            model.converged = v != 0;
        } else if (key == "best_epoch") want(model.best_epoch);
        else if (key == "users_ids") want(local_refs.users_ids_file);
        else if (key == "items_ids") want(local_refs.items_ids_file);
        else if (key == "blocks") {
            std::size_t v = 0;
            want(v);
            if (v != 12) throw io_error("model file: unexpected block count");
        } else {
            throw io_error("model file: unknown key '" + key + "'");
        }
    }
    if (M == 0 || N == 0 || T == 0 || K == 0)
        throw io_error("model file: missing dimensions");
    model.config.num_components = K;
    model.grid = TimeGrid{0, 1, T};
    model.params.user_state.resize(M, K, T);
    model.params.user_aux.resize(M, K, T);
    model.params.item_state.resize(N, K, T);
    model.params.item_aux.resize(N, K, T);
    model.params.user_init.resize(M);
    model.params.item_init.resize(N);
    for (GammaSlab* slab : {&model.params.user_state, &model.params.user_aux,
                            &model.params.item_state, &model.params.item_aux}) {
        std::vector<double> shape = detail::read_block(in);
        std::vector<double> rate = detail::read_block(in);
        if (shape.size() != slab->shape.size() || rate.size() != slab->rate.size())
            throw io_error("model file: block size mismatch");
        slab->shape = std::move(shape);
        slab->rate = std::move(rate);
    }
    for (GammaVec* vec : {&model.params.user_init, &model.params.item_init}) {
        std::vector<double> shape = detail::read_block(in);
        std::vector<double> rate = detail::read_block(in);
        if (shape.size() != vec->shape.size() || rate.size() != vec->rate.size())
            throw io_error("model file: block size mismatch");
        vec->shape = std::move(shape);
        vec->rate = std::move(rate);
    }
    for (std::size_t i = 0; i < M; ++i) model.users.add("u" + std::to_string(i));
    for (std::size_t i = 0; i < N; ++i) model.items.add("i" + std::to_string(i));
    if (refs) *refs = local_refs;
    return model;
}

}  // namespace dcpf
