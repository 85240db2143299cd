#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcpf/common.hpp"
#include "dcpf/dataset.hpp"
#include "dcpf/edm.hpp"
#include "dcpf/gamma_chain.hpp"
#include "dcpf/inference.hpp"

namespace dcpf {

/// Simulator defaults favor smooth, balanced chains whose scale varies
/// strongly across entities (a long-tailed shared initial rate); they
/// are deliberately distinct from the inference defaults, which
/// describe priors, not a data-generating regime.
inline ChainHyper simulator_chain_defaults(std::size_t num_components,
                                           double target_rate = 0.5) {
    ChainHyper h;
    h.shape_state = 12.0;
    h.shape_aux = 12.0;
    h.rate_state = 1.0;
    h.rate_aux = 1.0;
    h.init_shape = 1.0;
    h.init_mean = std::sqrt(target_rate / double(num_components));
    return h;
}

struct GeneratorConfig {
    std::size_t num_users = 50;
    std::size_t num_items = 50;
    std::size_t num_components = 3;
    std::size_t num_windows = 8;
    ChainHyper user_hyper = simulator_chain_defaults(3);
    ChainHyper item_hyper = simulator_chain_defaults(3);
    ElementDistribution element{Family::gamma, -1.0, 1.0};
    std::uint64_t seed = 1;
    /// Refuse generation when the expected latent-event count
    /// (mean rate times M*N*T) exceeds this budget.
    double max_expected_events = 5e7;
};

/// A complete draw from the generative model with its ground truth.
struct SyntheticDataset {
    InteractionTensor tensor;
    /// truth chains indexed [entity][component]
    std::vector<std::vector<ChainState>> user_truth;
    std::vector<std::vector<ChainState>> item_truth;
    ElementDistribution element;
    GeneratorConfig config;

    double true_lambda(std::size_t m, std::size_t n, std::size_t t) const {
        double lambda = 0.0;
        for (std::size_t k = 0; k < config.num_components; ++k)
            lambda += user_truth[m][k].state[t] * item_truth[n][k].state[t];
        return lambda;
    }
};

/// Samples chains for every (entity, component), then the latent count
/// and compound response per cell. Per-cell and per-chain seeds are
/// derived positionally, so generation order (or parallelism) cannot
/// change the draw.
inline SyntheticDataset generate(const GeneratorConfig& config) {
    config.user_hyper.validate();
    config.item_hyper.validate();
    config.element.validate();
    std::size_t M = config.num_users, N = config.num_items;
    std::size_t K = config.num_components, T = config.num_windows;
    if (M < 1 || N < 1 || K < 1 || T < 1)
        throw std::invalid_argument("generate: all dimensions must be at least 1");

    double mean_rate = double(K) * config.user_hyper.init_mean *
                       config.item_hyper.init_mean;
    double expected_events = mean_rate * double(M) * double(N) * double(T);
    if (expected_events > config.max_expected_events)
        throw budget_error(
            "generate: expected about " + format_double(expected_events) +
            " latent events, over the budget of " +
            format_double(config.max_expected_events) +
            "; lower the factor means, the dimensions, or raise the budget");

    SyntheticDataset data;
    data.element = config.element;
    data.config = config;
    data.user_truth.resize(M);
    data.item_truth.resize(N);
    // the initial rate is drawn once per entity and shared across its
    // component chains
    auto sample_entity = [&](std::vector<std::vector<ChainState>>& truth,
                             const ChainHyper& hyper, std::size_t count,
                             std::uint64_t chain_stream, std::uint64_t init_stream) {
        for (std::size_t e = 0; e < count; ++e) {
            Rng init_rng = make_rng(config.seed, init_stream, e);
            double init_rate = sample_gamma(hyper.init_shape,
                                            hyper.init_shape / hyper.init_mean,
                                            init_rng);
            truth[e].reserve(K);
            for (std::size_t k = 0; k < K; ++k) {
                Rng rng = make_rng(config.seed, chain_stream, e, k);
                truth[e].push_back(sample_chain(hyper, T, rng, init_rate));
            }
        }
    };
    sample_entity(data.user_truth, config.user_hyper, M, 1, 4);
    sample_entity(data.item_truth, config.item_hyper, N, 2, 5);

    data.tensor.grid = TimeGrid{0, 1, T};
    for (std::size_t m = 0; m < M; ++m) data.tensor.users.add("u" + std::to_string(m));
    for (std::size_t n = 0; n < N; ++n) data.tensor.items.add("i" + std::to_string(n));

    std::vector<Cell> cells;
    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t t = 0; t < T; ++t) {
                Rng rng = make_rng(config.seed, 3, m * N + n, t);
                double y = sample_compound(data.true_lambda(m, n, t), data.element, rng);
                if (y == 0.0) continue;
                cells.push_back(Cell{std::uint32_t(m), std::uint32_t(n),
                                     std::uint32_t(t), y});
            }
        }
    }
    data.tensor.finalize(std::move(cells));
    return data;
}

/// Average per-cell log-likelihood of the given cells evaluated at the
/// true rates: the ceiling a fitted model is compared against.
inline LoglikResult oracle_loglik(
    const SyntheticDataset& data, const InteractionTensor& cells, TrainOn mode,
    std::optional<std::pair<std::size_t, std::size_t>> window_range = std::nullopt) {
    LoglikResult out;
    KahanSum sum;
    auto add_cell = [&](std::size_t m, std::size_t n, std::size_t t, double y) {
        double lambda = data.true_lambda(m, n, t);
        sum.add(compound_log_likelihood(y, lambda, data.element));
        ++out.cells;
    };
    if (mode == TrainOn::nonmissing) {
        for (const Cell& c : cells.cells()) add_cell(c.user, c.item, c.window, c.value);
    } else {
        std::size_t lo = 0, hi = cells.num_windows();
        if (window_range) {
            lo = window_range->first;
            hi = window_range->second;
        }
        for (std::size_t t = lo; t < hi; ++t)
            for (std::size_t m = 0; m < cells.num_users(); ++m)
                for (std::size_t n = 0; n < cells.num_items(); ++n)
                    add_cell(m, n, t, cells.value_at(m, n, t).value_or(0.0));
    }
    out.sum = sum.value();
    return out;
}

/// Writes the ground-truth factor trajectories in the tensor format
/// with a DCPF-TRUTH header: one `entity k t value` line per state.
inline void write_truth(const SyntheticDataset& data, std::ostream& out) {
    out << "DCPF-TRUTH v1\n";
    out << data.config.num_users << ' ' << data.config.num_items << ' '
        << data.config.num_components << ' ' << data.config.num_windows << '\n';
    auto dump = [&](const std::vector<std::vector<ChainState>>& truth,
                    const char* side) {
        for (std::size_t e = 0; e < truth.size(); ++e)
            for (std::size_t k = 0; k < truth[e].size(); ++k)
                for (std::size_t t = 0; t < truth[e][k].state.size(); ++t)
                    out << side << ' ' << e << ' ' << k << ' ' << t << ' '
                        << format_double(truth[e][k].state[t]) << '\n';
    };
    dump(data.user_truth, "user");
    dump(data.item_truth, "item");
}

}  // namespace dcpf
