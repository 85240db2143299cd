#include <catch2/catch.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "dcpf/eval.hpp"
#include "dcpf/generator.hpp"

using namespace dcpf;

namespace {

double pairwise_auc(std::span<const double> scores, std::span<const int> labels) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / double(pairs);
}

DataSplit tiny_split() {
    // 2 x 2 grid, one training window and one held-out window with a
    // single observed cell
    InteractionTensor tensor;
    tensor.grid = TimeGrid{0, 1, 2};
    tensor.users.add("a");
    tensor.users.add("b");
    tensor.items.add("x");
    tensor.items.add("y");
    tensor.finalize({Cell{0, 0, 0, 2.0}, Cell{1, 1, 0, 1.0}, Cell{0, 1, 1, 3.0}});
    return split_by_time(tensor, 1, 0.0, 1);
}

FittedModel truth_model(const SyntheticDataset& data) {
    const GeneratorConfig& gen = data.config;
    FittedModel model;
    model.element = data.element;
    model.user_hyper = gen.user_hyper;
    model.item_hyper = gen.item_hyper;
    model.users = data.tensor.users;
    model.items = data.tensor.items;
    model.grid = data.tensor.grid;
    std::size_t K = gen.num_components, T = gen.num_windows;
    model.params.user_state.resize(gen.num_users, K, T);
    model.params.user_aux.resize(gen.num_users, K, T);
    model.params.item_state.resize(gen.num_items, K, T);
    model.params.item_aux.resize(gen.num_items, K, T);
    model.params.user_init.resize(gen.num_users);
    model.params.item_init.resize(gen.num_items);
    auto fill = [&](GammaSlab& slab, const auto& truth) {
        for (std::size_t e = 0; e < slab.entities; ++e)
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t t = 0; t < T; ++t) {
                    std::size_t i = slab.index(e, k, t);
                    slab.shape[i] = truth[e][k].state[t];
                    slab.rate[i] = 1.0;
                }
    };
    fill(model.params.user_state, data.user_truth);
    fill(model.params.item_state, data.item_truth);
    return model;
}

}  // namespace

TEST_CASE("auc closed cases") {
    std::vector<double> separated = {0.9, 0.8, 0.2, 0.1};
    std::vector<int> labels = {1, 1, 0, 0};
    REQUIRE(auc(separated, labels) == 1.0);

    std::vector<double> ties = {0.5, 0.5, 0.5, 0.5};
    REQUIRE(auc(ties, labels) == 0.5);

    std::vector<double> mixed = {0.9, 0.8, 0.3};
    std::vector<int> mixed_labels = {1, 0, 1};
    REQUIRE(auc(mixed, mixed_labels) == 0.5);

    std::vector<int> single = {1, 1, 1};
    REQUIRE_THROWS_AS(auc(mixed, single), metric_error);
}

TEST_CASE("auc equals the exhaustive pairwise statistic") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::size_t n = 10 + std::size_t(unif(rng) * 50);
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool has_pos = false, has_neg = false;
        for (std::size_t i = 0; i < n; ++i) {
            // quantized scores force ties
            scores[i] = std::floor(unif(rng) * 8.0) / 8.0;
            labels[i] = unif(rng) < 0.4 ? 1 : 0;
            has_pos = has_pos || labels[i] == 1;
            has_neg = has_neg || labels[i] == 0;
        }
        if (!has_pos || !has_neg) continue;
        REQUIRE(auc(scores, labels) ==
                Approx(pairwise_auc(scores, labels)).epsilon(1e-12));
    }
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> scores(200);
    std::vector<int> labels(200);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = unif(rng);
        labels[i] = unif(rng) < 0.5 ? 1 : 0;
    }
    double base = auc(scores, labels);
    std::vector<double> expd = scores, affine = scores;
    for (double& s : expd) s = std::exp(s);
    for (double& s : affine) s = 2.0 * s + 1.0;
    REQUIRE(auc(expd, labels) == base);
    REQUIRE(auc(affine, labels) == base);
}

TEST_CASE("random scores give chance-level auc") {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> scores(20000);
    std::vector<int> labels(20000);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = unif(rng);
        labels[i] = i % 2 == 0 ? 1 : 0;
    }
    double value = auc(scores, labels);
    REQUIRE(value > 0.48);
    REQUIRE(value < 0.52);
}

TEST_CASE("roc curve spans the unit square monotonically") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> scores(500);
    std::vector<int> labels(500);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = std::floor(unif(rng) * 20.0) / 20.0;
        labels[i] = unif(rng) < 0.3 ? 1 : 0;
    }
    std::vector<RocPoint> points = roc_curve(scores, labels);
    REQUIRE(points.front().fpr == 0.0);
    REQUIRE(points.front().tpr == 0.0);
    REQUIRE(points.back().fpr == 1.0);
    REQUIRE(points.back().tpr == 1.0);
    for (std::size_t i = 1; i < points.size(); ++i) {
        REQUIRE(points[i].fpr >= points[i - 1].fpr);
        REQUIRE(points[i].tpr >= points[i - 1].tpr);
        REQUIRE(points[i].threshold < points[i - 1].threshold);
    }
}

TEST_CASE("binarize enumerates or samples the unobserved cells") {
    DataSplit split = tiny_split();
    REQUIRE(split.test.nnz() == 1);

    BinarizedTestset all = binarize_testset(split, {NegativeMode::all, 0, 20000, 1});
    REQUIRE(all.positives == 1);
    REQUIRE(all.negatives == 3);
    REQUIRE(all.negative_mode == "all");
    std::size_t label_sum = 0;
    for (int l : all.labels) label_sum += std::size_t(l);
    REQUIRE(label_sum == split.test.nnz());

    BinarizeConfig sampled_config{NegativeMode::sampled, 2, 20000, 7};
    BinarizedTestset s1 = binarize_testset(split, sampled_config);
    BinarizedTestset s2 = binarize_testset(split, sampled_config);
    REQUIRE(s1.cells.size() == s2.cells.size());
    for (std::size_t i = 0; i < s1.cells.size(); ++i) {
        REQUIRE(s1.cells[i].user == s2.cells[i].user);
        REQUIRE(s1.cells[i].item == s2.cells[i].item);
    }
}

TEST_CASE("precision at L") {
    RankedList ranked;
    ranked.items = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    ranked.scores = {10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
    std::unordered_set<std::size_t> relevant = {1, 4, 9};
    REQUIRE(precision_at(ranked, relevant, 10) == Approx(0.3));
    REQUIRE(precision_at(ranked, {}, 10) == 0.0);
    REQUIRE(precision_at(ranked, {0, 1, 2}, 3) == Approx(1.0));
    // fewer than L candidates: missing slots count as misses
    RankedList shorty;
    shorty.items = {0, 1};
    shorty.scores = {2, 1};
    REQUIRE(precision_at(shorty, {0, 1}, 4) == Approx(0.5));
}

TEST_CASE("ndcg at L") {
    RankedList ideal;
    ideal.items = {0, 1, 2};
    ideal.scores = {3, 2, 1};
    std::unordered_map<std::size_t, double> gains = {{0, 3.0}, {1, 2.0}, {2, 1.0}};
    REQUIRE(ndcg_at(ideal, gains, 3) == Approx(1.0));

    std::unordered_map<std::size_t, double> nothing;
    REQUIRE(ndcg_at(ideal, nothing, 3) == 0.0);

    RankedList swapped;
    swapped.items = {101, 100};  // B before A
    swapped.scores = {2, 1};
    std::unordered_map<std::size_t, double> ab = {{100, 3.0}, {101, 1.0}};
    double want = (1.0 / std::log2(2.0) + 3.0 / std::log2(3.0)) /
                  (3.0 / std::log2(2.0) + 1.0 / std::log2(3.0));
    REQUIRE(want == Approx(0.7967076).epsilon(1e-6));
    REQUIRE(ndcg_at(swapped, ab, 2) == Approx(want).epsilon(1e-12));
}

TEST_CASE("ranking depends only on the top-L prefix") {
    std::unordered_map<std::size_t, double> gains = {{3, 2.0}, {7, 1.0}};
    RankedList a, b;
    a.items = {3, 5, 7, 9};
    a.scores = {4, 3, 2, 1};
    b.items = {3, 5, 11, 13};  // same top-2 prefix
    b.scores = {4, 3, 0.5, 0.1};
    REQUIRE(ndcg_at(a, gains, 2) == ndcg_at(b, gains, 2));
    REQUIRE(precision_at(a, {3, 5}, 2) == precision_at(b, {3, 5}, 2));
}

TEST_CASE("evaluate scores a truth model far above chance") {
    GeneratorConfig gen;
    gen.num_users = 50;
    gen.num_items = 50;
    gen.num_components = 3;
    gen.num_windows = 6;
    gen.user_hyper = simulator_chain_defaults(3);
    gen.item_hyper = simulator_chain_defaults(3);
    // a very long-tailed entity scale separates positives sharply
    gen.user_hyper.init_shape = 0.5;
    gen.item_hyper.init_shape = 0.5;
    gen.element = {Family::gamma, -1.0, 1.0};
    gen.seed = 404;
    SyntheticDataset data = generate(gen);
    DataSplit split = split_by_time(data.tensor, 1, 0.05, 3);
    FittedModel model = truth_model(data);

    EvalConfig config;
    config.seed = 9;
    EvalReport report = evaluate(model, split, config);
    REQUIRE(report.auc > 0.9);
    REQUIRE(report.auc_positives == split.test.nnz());
    REQUIRE(report.precision_at.at(10) > 0.0);
    REQUIRE(report.ndcg_at.at(10) > 0.0);
    REQUIRE(report.loglik_per_cell < 0.0);
    REQUIRE(report.loglik_per_nonzero < 0.0);
    for (const auto& [t, wm] : report.per_window) REQUIRE(t >= 5);

    // deterministic: identical runs produce identical reports
    EvalReport again = evaluate(model, split, config);
    std::ostringstream first, second;
    write_report(report, first);
    write_report(again, second);
    REQUIRE(first.str() == second.str());

    // threads do not change the result
    EvalConfig threaded = config;
    threaded.threads = 4;
    EvalReport parallel = evaluate(model, split, threaded);
    std::ostringstream third;
    write_report(parallel, third);
    REQUIRE(first.str() == third.str());
}
