#include <catch2/catch.hpp>

#include <cmath>
#include <numeric>

#include "dcpf/generator.hpp"

using namespace dcpf;

namespace {

GeneratorConfig small_config(std::uint64_t seed) {
    GeneratorConfig config;
    config.num_users = 20;
    config.num_items = 15;
    config.num_components = 2;
    config.num_windows = 5;
    config.user_hyper = simulator_chain_defaults(2);
    config.item_hyper = simulator_chain_defaults(2);
    config.element = {Family::gamma, -1.0, 1.0};
    config.seed = seed;
    return config;
}

}  // namespace

TEST_CASE("generation is deterministic and dimensionally consistent") {
    GeneratorConfig config = small_config(7);
    SyntheticDataset a = generate(config);
    SyntheticDataset b = generate(config);
    REQUIRE(a.tensor.nnz() == b.tensor.nnz());
    for (std::size_t i = 0; i < a.tensor.nnz(); ++i) {
        REQUIRE(a.tensor.cells()[i].user == b.tensor.cells()[i].user);
        REQUIRE(a.tensor.cells()[i].value == b.tensor.cells()[i].value);
    }
    REQUIRE(a.user_truth.size() == config.num_users);
    REQUIRE(a.item_truth.size() == config.num_items);
    for (const auto& chains : a.user_truth) {
        REQUIRE(chains.size() == config.num_components);
        for (const ChainState& chain : chains)
            REQUIRE(chain.length() == config.num_windows);
    }
    // every stored cell is a nonzero draw
    for (const Cell& c : a.tensor.cells()) REQUIRE(c.value != 0.0);
}

TEST_CASE("single window reduces to the static generative process") {
    GeneratorConfig config = small_config(11);
    config.num_windows = 1;
    SyntheticDataset data = generate(config);
    REQUIRE(data.tensor.num_windows() == 1);
    for (const auto& chains : data.user_truth)
        for (const ChainState& chain : chains) REQUIRE(chain.length() == 1);
}

TEST_CASE("latent count mean matches the factor inner product") {
    GeneratorConfig config = small_config(13);
    SyntheticDataset data = generate(config);
    // replicate cells at fixed factors via the compound sampler: the mean
    // count divided by the element mean recovers the rate
    double lambda = data.true_lambda(3, 4, 2);
    Rng rng(99);
    const int draws = 100000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < draws; ++i) {
        std::poisson_distribution<long> dist(lambda);
        double eta = double(dist(rng));
        sum += eta;
        sq += eta * eta;
    }
    double mean = sum / draws;
    double se = std::sqrt((sq / draws - mean * mean) / draws);
    REQUIRE(std::abs(mean - lambda) < 3.0 * se);
}

TEST_CASE("sparsity rises as the factor means shrink") {
    GeneratorConfig dense = small_config(17);
    dense.user_hyper.init_mean = 1.0;
    dense.item_hyper.init_mean = 1.0;
    GeneratorConfig sparse = small_config(17);
    sparse.user_hyper.init_mean = 0.02;
    sparse.item_hyper.init_mean = 0.02;
    REQUIRE(generate(sparse).tensor.nnz() < generate(dense).tensor.nnz());

    GeneratorConfig empty = small_config(17);
    empty.user_hyper.init_mean = 1e-8;
    empty.item_hyper.init_mean = 1e-8;
    REQUIRE(generate(empty).tensor.nnz() == 0);
}

TEST_CASE("generation refuses over-budget requests with a sizing hint") {
    GeneratorConfig config = small_config(1);
    config.max_expected_events = 10.0;
    config.user_hyper.init_mean = 10.0;
    config.item_hyper.init_mean = 10.0;
    REQUIRE_THROWS_AS(generate(config), budget_error);
    try {
        generate(config);
    } catch (const budget_error& e) {
        REQUIRE(std::string(e.what()).find("budget") != std::string::npos);
    }
}

TEST_CASE("drift slope is recovered from sampled chains") {
    // regressing log E[u_t] on t over many chains recovers
    // log(drift_ratio); the mean recursion treats E[1/z] as 1/E[z], so
    // the identification holds in the large-shape regime
    for (double target_ratio : {1.0, 1.3}) {
        ChainHyper hyper = simulator_chain_defaults(1);
        hyper.shape_aux = 100.0;
        hyper.shape_state = 100.0 * target_ratio;  // ratio = shape_state / shape_aux
        const std::size_t T = 12;
        const int chains = 1000;
        std::vector<double> mean_state(T, 0.0);
        for (int i = 0; i < chains; ++i) {
            Rng rng(derive_seed(7000 + int(target_ratio * 10), i));
            ChainState chain = sample_chain(hyper, T, rng);
            for (std::size_t t = 0; t < T; ++t) mean_state[t] += chain.state[t];
        }
        double slope_num = 0.0, slope_den = 0.0;
        double t_mean = double(T - 1) / 2.0;
        double log_mean = 0.0;
        for (std::size_t t = 0; t < T; ++t)
            log_mean += std::log(mean_state[t] / chains) / double(T);
        for (std::size_t t = 0; t < T; ++t) {
            slope_num += (double(t) - t_mean) *
                         (std::log(mean_state[t] / chains) - log_mean);
            slope_den += (double(t) - t_mean) * (double(t) - t_mean);
        }
        double slope = slope_num / slope_den;
        REQUIRE(slope == Approx(std::log(drift_ratio(hyper))).margin(0.05));
    }
}

TEST_CASE("oracle log likelihood at the truth") {
    GeneratorConfig config = small_config(23);
    SyntheticDataset data = generate(config);

    // zero cell with a gamma element contributes exactly -lambda
    std::size_t m = 0, n = 0, t = 0;
    bool found = false;
    for (; m < config.num_users && !found; ++m)
        for (n = 0; n < config.num_items && !found; ++n)
            if (!data.tensor.value_at(m, n, t))
                found = true;
    REQUIRE(found);
    --m;
    --n;
    InteractionTensor zero_cell;
    zero_cell.users = data.tensor.users;
    zero_cell.items = data.tensor.items;
    zero_cell.grid = data.tensor.grid;
    zero_cell.finalize({});
    LoglikResult at_zero =
        oracle_loglik(data, zero_cell, TrainOn::full,
                      std::make_pair(std::size_t(0), std::size_t(1)));
    // all cells in window 0 are implicit zeros of the empty tensor
    double want = 0.0;
    for (std::size_t mm = 0; mm < config.num_users; ++mm)
        for (std::size_t nn = 0; nn < config.num_items; ++nn)
            want += -data.true_lambda(mm, nn, 0);
    REQUIRE(at_zero.sum == Approx(want).epsilon(1e-10));

    // truth beats perturbed factors on the full training matrix; a
    // concentrated entity scale keeps every perturbation informative
    GeneratorConfig big = small_config(23);
    big.num_users = 30;
    big.num_items = 60;
    big.num_windows = 20;
    big.user_hyper.init_shape = 10.0;
    big.item_hyper.init_shape = 10.0;
    SyntheticDataset anchored = generate(big);
    auto window_span = std::make_pair(std::size_t(0), big.num_windows);
    LoglikResult at_truth =
        oracle_loglik(anchored, anchored.tensor, TrainOn::full, window_span);
    Rng rng(31);
    std::uniform_int_distribution<std::size_t> pick_m(0, big.num_users - 1);
    std::uniform_int_distribution<std::size_t> pick_k(0, big.num_components - 1);
    int wins = 0;
    const int trials = 100;
    for (int i = 0; i < trials; ++i) {
        SyntheticDataset perturbed = anchored;
        std::size_t pm = pick_m(rng), pk = pick_k(rng);
        for (double& v : perturbed.user_truth[pm][pk].state) v *= 2.0;
        LoglikResult at_perturbed =
            oracle_loglik(perturbed, anchored.tensor, TrainOn::full, window_span);
        if (at_truth.sum >= at_perturbed.sum) ++wins;
    }
    REQUIRE(wins == trials);
}
