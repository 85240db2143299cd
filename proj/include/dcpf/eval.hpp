#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dcpf/common.hpp"
#include "dcpf/dataset.hpp"
#include "dcpf/inference.hpp"
#include "dcpf/math.hpp"

namespace dcpf {

// ---------------------------------------------------------------------------
// Ranking metrics

/// Mann-Whitney AUC with half credit for ties, computed by average
/// ranks over the sorted score list.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("auc: scores and labels differ in length");
    std::size_t positives = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw std::invalid_argument("auc: labels must be 0/1");
        positives += std::size_t(l);
    }
    std::size_t negatives = scores.size() - positives;
    if (positives == 0 || negatives == 0)
        throw metric_error("auc: undefined with a single label class");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        double avg_rank = 0.5 * (double(i + 1) + double(j));  // ranks are 1-based
        for (std::size_t p = i; p < j; ++p)
            if (labels[order[p]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    double p = double(positives);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * double(negatives));
}

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

/// ROC coordinates swept over the distinct score thresholds, from
/// (0, 0) to (1, 1).
inline std::vector<RocPoint> roc_curve(std::span<const double> scores,
                                       std::span<const int> labels) {
    std::size_t positives = 0;
    for (int l : labels) positives += std::size_t(l);
    std::size_t negatives = scores.size() - positives;
    if (positives == 0 || negatives == 0)
        throw metric_error("roc_curve: undefined with a single label class");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    std::vector<RocPoint> points;
    points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < order.size()) {
        double threshold = scores[order[i]];
        while (i < order.size() && scores[order[i]] == threshold) {
            if (labels[order[i]] == 1)
                ++tp;
            else
                ++fp;
            ++i;
        }
        points.push_back({double(fp) / double(negatives),
                          double(tp) / double(positives), threshold});
    }
    return points;
}

/// Per-user ranking for one window: items in descending score order.
struct RankedList {
    std::size_t user = 0;
    std::size_t window = 0;
    std::vector<std::size_t> items;
    std::vector<double> scores;
};

/// Builds a RankedList from (item, score) candidates; ties break by
/// item index for determinism.
inline RankedList rank_items(std::size_t user, std::size_t window,
                             std::vector<std::pair<std::size_t, double>> candidates) {
    std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    RankedList ranked;
    ranked.user = user;
    ranked.window = window;
    ranked.items.reserve(candidates.size());
    ranked.scores.reserve(candidates.size());
    for (const auto& [item, score] : candidates) {
        ranked.items.push_back(item);
        ranked.scores.push_back(score);
    }
    return ranked;
}

/// |top-L intersect relevant| / L; missing slots count as misses.
inline double precision_at(const RankedList& ranked,
                           const std::unordered_set<std::size_t>& relevant,
                           std::size_t L) {
    if (L < 1) throw std::invalid_argument("precision_at: L must be at least 1");
    std::size_t hits = 0;
    std::size_t depth = std::min(L, ranked.items.size());
    for (std::size_t i = 0; i < depth; ++i)
        if (relevant.count(ranked.items[i])) ++hits;
    return double(hits) / double(L);
}

/// DCG@L with gain/log2(position + 1) discounting, normalized by the
/// ideal DCG@L over the full relevance map; 0 when the ideal is 0.
inline double ndcg_at(const RankedList& ranked,
                      const std::unordered_map<std::size_t, double>& gains,
                      std::size_t L) {
    if (L < 1) throw std::invalid_argument("ndcg_at: L must be at least 1");
    auto discount = [](std::size_t position) {
        return 1.0 / std::log2(double(position) + 2.0);  // position is 0-based
    };
    double dcg = 0.0;
    std::size_t depth = std::min(L, ranked.items.size());
    for (std::size_t i = 0; i < depth; ++i) {
        auto it = gains.find(ranked.items[i]);
        if (it != gains.end()) dcg += it->second * discount(i);
    }
    std::vector<double> ideal;
    ideal.reserve(gains.size());
    for (const auto& [item, gain] : gains) {
        if (gain < 0.0) throw std::invalid_argument("ndcg_at: gains must be non-negative");
        ideal.push_back(gain);
    }
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t i = 0; i < std::min(L, ideal.size()); ++i)
        idcg += ideal[i] * discount(i);
    return idcg == 0.0 ? 0.0 : dcg / idcg;
}

// ---------------------------------------------------------------------------
// Binarized test set

enum class NegativeMode { automatic, all, sampled };

struct BinarizeConfig {
    NegativeMode mode = NegativeMode::automatic;
    std::size_t per_user = 1000;
    /// `automatic` uses exhaustive negatives up to this item count.
    std::size_t exhaustive_item_limit = 20000;
    std::uint64_t seed = 1;
};

struct BinarizedCell {
    std::uint32_t user = 0;
    std::uint32_t item = 0;
    std::uint32_t window = 0;
};

struct BinarizedTestset {
    std::vector<BinarizedCell> cells;
    std::vector<int> labels;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::size_t users_without_negatives = 0;
    std::string negative_mode;  // "all" or "sampled(n)"
};

/// Positives are the observed test cells; negatives are unobserved
/// (user, item, window) triples in the test windows, exhaustive or
/// sampled per user. Validation cells are observed interactions, so
/// they are never emitted as negatives.
inline BinarizedTestset binarize_testset(const DataSplit& split,
                                         const BinarizeConfig& config = {}) {
    const InteractionTensor& test = split.test;
    std::size_t T = test.num_windows();
    std::size_t first_window = T - split.held_out_windows;
    std::size_t N = test.num_items();
    if (test.nnz() == 0) throw split_error("binarize_testset: empty test set");

    bool exhaustive = config.mode == NegativeMode::all ||
                      (config.mode == NegativeMode::automatic &&
                       N <= config.exhaustive_item_limit);

    BinarizedTestset out;
    out.negative_mode =
        exhaustive ? "all" : "sampled(" + std::to_string(config.per_user) + ")";

    auto observed = [&](std::size_t m, std::size_t n, std::size_t t) {
        return test.value_at(m, n, t).has_value() ||
               split.validation.value_at(m, n, t).has_value();
    };

    for (const Cell& c : test.cells()) {
        out.cells.push_back({c.user, c.item, c.window});
        out.labels.push_back(1);
        ++out.positives;
    }

    for (std::size_t t = first_window; t < T; ++t) {
        for (std::size_t m = 0; m < test.num_users(); ++m) {
            if (exhaustive) {
                for (std::size_t n = 0; n < N; ++n) {
                    if (observed(m, n, t)) continue;
                    out.cells.push_back({std::uint32_t(m), std::uint32_t(n),
                                         std::uint32_t(t)});
                    out.labels.push_back(0);
                    ++out.negatives;
                }
            } else {
                Rng rng = make_rng(config.seed, 0xBE6, m, t);
                std::uniform_int_distribution<std::size_t> pick(0, N - 1);
                std::unordered_set<std::size_t> chosen;
                std::size_t found = 0, attempts = 0;
                std::size_t budget = config.per_user * 50 + 100;
                while (found < config.per_user && attempts < budget) {
                    ++attempts;
                    std::size_t n = pick(rng);
                    if (observed(m, n, t) || chosen.count(n)) continue;
                    chosen.insert(n);
                    out.cells.push_back({std::uint32_t(m), std::uint32_t(n),
                                         std::uint32_t(t)});
                    out.labels.push_back(0);
                    ++out.negatives;
                    ++found;
                }
                if (found == 0) ++out.users_without_negatives;
            }
        }
    }
    if (out.negatives == 0)
        throw metric_error("binarize_testset: no candidate negatives");
    return out;
}

// ---------------------------------------------------------------------------
// Full evaluation

struct EvalConfig {
    std::vector<std::size_t> precision_ls = {10, 100};
    std::vector<std::size_t> ndcg_ls = {10, 100};
    bool exclude_train_items = true;
    BinarizeConfig binarize;
    bool with_loglik = true;
    bool collect_per_user = false;
    std::uint64_t seed = 1;
    std::size_t threads = 1;
};

/// Worklist parallel map: runs fn(i) over [0, count) on the given
/// number of threads; outputs must be slot-indexed by the callee.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, count));
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([=, &fn] {
            for (std::size_t i = w; i < count; i += threads) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

struct WindowMetrics {
    std::size_t positives = 0;
    std::size_t negatives = 0;
    double auc = 0.0;
    bool auc_defined = false;
};

struct PerUserMetrics {
    std::size_t user = 0;
    std::size_t window = 0;
    std::map<std::size_t, double> precision_at;
    std::map<std::size_t, double> ndcg_at;
};

struct EvalReport {
    double auc = 0.0;
    std::size_t auc_positives = 0;
    std::size_t auc_negatives = 0;
    std::string auc_negative_mode;
    std::map<std::size_t, double> precision_at;
    std::map<std::size_t, double> ndcg_at;
    /// Mean held-out log-likelihood per stored (nonzero) cell.
    double loglik_per_nonzero = 0.0;
    /// Mean held-out log-likelihood per cell of the full test matrix.
    double loglik_per_cell = 0.0;
    std::size_t loglik_cells = 0;
    std::size_t loglik_excluded = 0;
    std::map<std::size_t, WindowMetrics> per_window;
    std::size_t ranked_users = 0;
    std::size_t skipped_users = 0;
    std::vector<PerUserMetrics> per_user;  // filled when requested
};

/// Scores the binarized test set, ranks candidate items per user and
/// test window, and aggregates AUC, precision@L, NDCG@L and the test
/// log-likelihood (reported per nonzero and per cell).
inline EvalReport evaluate(const FittedModel& model, const DataSplit& split,
                           const EvalConfig& config = {}) {
    if (model.num_users() != split.test.num_users() ||
        model.num_items() != split.test.num_items())
        throw error("evaluate: model and split dimensions do not match");

    EvalReport report;
    std::size_t T = split.test.num_windows();
    std::size_t first_window = T - split.held_out_windows;
    Family family = model.element.family;

    // --- AUC over the binarized test set
    BinarizeConfig bin = config.binarize;
    bin.seed = config.seed;
    BinarizedTestset binarized = binarize_testset(split, bin);
    std::vector<double> scores(binarized.cells.size());
    parallel_for(binarized.cells.size(), config.threads, [&](std::size_t i) {
        const BinarizedCell& c = binarized.cells[i];
        scores[i] = score(model, c.user, c.item, c.window).ranking_score(family);
    });
    report.auc = auc(scores, binarized.labels);
    report.auc_positives = binarized.positives;
    report.auc_negatives = binarized.negatives;
    report.auc_negative_mode = binarized.negative_mode;

    for (std::size_t t = first_window; t < T; ++t) {
        std::vector<double> ws;
        std::vector<int> wl;
        for (std::size_t i = 0; i < binarized.cells.size(); ++i) {
            if (binarized.cells[i].window != t) continue;
            ws.push_back(scores[i]);
            wl.push_back(binarized.labels[i]);
        }
        WindowMetrics wm;
        wm.positives = std::size_t(std::count(wl.begin(), wl.end(), 1));
        wm.negatives = wl.size() - wm.positives;
        if (wm.positives > 0 && wm.negatives > 0) {
            wm.auc = auc(ws, wl);
            wm.auc_defined = true;
        }
        report.per_window[t] = wm;
    }

    // --- per-user rankings on the expected rating
    std::vector<bool> train_seen(model.num_users() * model.num_items(), false);
    if (config.exclude_train_items) {
        for (const Cell& c : split.train.cells())
            train_seen[c.user * model.num_items() + c.item] = true;
    }
    std::size_t max_l = 1;
    for (std::size_t l : config.precision_ls) max_l = std::max(max_l, l);
    for (std::size_t l : config.ndcg_ls) max_l = std::max(max_l, l);

    std::map<std::size_t, KahanSum> precision_sums;
    std::map<std::size_t, KahanSum> ndcg_sums;
    for (std::size_t l : config.precision_ls) precision_sums[l];
    for (std::size_t l : config.ndcg_ls) ndcg_sums[l];

    // relevant items per (user, window) from the test cells
    std::map<std::pair<std::size_t, std::size_t>,
             std::vector<std::pair<std::size_t, double>>>
        relevant;
    for (const Cell& c : split.test.cells())
        relevant[{c.window, c.user}].emplace_back(c.item, c.value);

    std::vector<const std::pair<const std::pair<std::size_t, std::size_t>,
                                std::vector<std::pair<std::size_t, double>>>*>
        work;
    work.reserve(relevant.size());
    for (const auto& entry : relevant) work.push_back(&entry);
    std::vector<std::optional<PerUserMetrics>> results(work.size());

    parallel_for(work.size(), config.threads, [&](std::size_t wi) {
        auto [t, m] = work[wi]->first;
        const auto& items = work[wi]->second;
        std::unordered_set<std::size_t> relevant_set;
        std::unordered_map<std::size_t, double> gains;
        for (const auto& [n, y] : items) {
            relevant_set.insert(n);
            gains[n] = y;
        }
        std::vector<std::pair<std::size_t, double>> candidates;
        candidates.reserve(model.num_items());
        for (std::size_t n = 0; n < model.num_items(); ++n) {
            if (config.exclude_train_items &&
                train_seen[m * model.num_items() + n])
                continue;
            candidates.emplace_back(n, score(model, m, n, t).expected_rating);
        }
        if (candidates.empty()) return;
        RankedList ranked = rank_items(m, t, std::move(candidates));
        if (ranked.items.size() > max_l) {
            ranked.items.resize(max_l);
            ranked.scores.resize(max_l);
        }
        PerUserMetrics row;
        row.user = m;
        row.window = t;
        for (std::size_t l : config.precision_ls)
            row.precision_at[l] = precision_at(ranked, relevant_set, l);
        for (std::size_t l : config.ndcg_ls) row.ndcg_at[l] = ndcg_at(ranked, gains, l);
        results[wi] = std::move(row);
    });

    for (auto& row : results) {
        if (!row) {
            ++report.skipped_users;
            continue;
        }
        ++report.ranked_users;
        for (std::size_t l : config.precision_ls)
            precision_sums[l].add(row->precision_at[l]);
        for (std::size_t l : config.ndcg_ls) ndcg_sums[l].add(row->ndcg_at[l]);
        if (config.collect_per_user) report.per_user.push_back(std::move(*row));
    }
    for (std::size_t l : config.precision_ls)
        report.precision_at[l] = report.ranked_users == 0
                                     ? 0.0
                                     : precision_sums[l].value() /
                                           double(report.ranked_users);
    for (std::size_t l : config.ndcg_ls)
        report.ndcg_at[l] = report.ranked_users == 0
                                ? 0.0
                                : ndcg_sums[l].value() / double(report.ranked_users);

    // --- held-out log-likelihood, both normalizations
    if (config.with_loglik) {
        LoglikResult nonzero = predictive_loglik(model, split.test, TrainOn::nonmissing);
        LoglikResult full = predictive_loglik(model, split.test, TrainOn::full,
                                              std::make_pair(first_window, T));
        report.loglik_per_nonzero = nonzero.mean();
        report.loglik_per_cell = full.mean();
        report.loglik_cells = full.cells;
        report.loglik_excluded = nonzero.excluded + full.excluded;
    }
    return report;
}

/// Flat `key value` lines, one metric per line.
inline void write_report(const EvalReport& report, std::ostream& out) {
    out << "auc " << format_double(report.auc) << '\n';
    out << "auc_positives " << report.auc_positives << '\n';
    out << "auc_negatives " << report.auc_negatives << '\n';
    out << "auc_negative_mode " << report.auc_negative_mode << '\n';
    for (const auto& [l, v] : report.precision_at)
        out << "prec@" << l << ' ' << format_double(v) << '\n';
    for (const auto& [l, v] : report.ndcg_at)
        out << "ndcg@" << l << ' ' << format_double(v) << '\n';
    out << "loglik_per_nonzero " << format_double(report.loglik_per_nonzero) << '\n';
    out << "loglik_per_cell " << format_double(report.loglik_per_cell) << '\n';
    out << "loglik_cells " << report.loglik_cells << '\n';
    out << "loglik_excluded " << report.loglik_excluded << '\n';
    out << "ranked_users " << report.ranked_users << '\n';
    out << "skipped_users " << report.skipped_users << '\n';
    for (const auto& [t, wm] : report.per_window) {
        out << "window." << t << ".positives " << wm.positives << '\n';
        out << "window." << t << ".negatives " << wm.negatives << '\n';
        if (wm.auc_defined)
            out << "window." << t << ".auc " << format_double(wm.auc) << '\n';
    }
}

/// The same report as delimiter-separated `metric,window,value` rows.
inline void write_report_rows(const EvalReport& report, std::ostream& out,
                              char delimiter = ',') {
    auto row = [&](const std::string& metric, const std::string& window,
                   const std::string& value) {
        out << metric << delimiter << window << delimiter << value << '\n';
    };
    row("auc", "all", format_double(report.auc));
    for (const auto& [l, v] : report.precision_at)
        row("prec@" + std::to_string(l), "all", format_double(v));
    for (const auto& [l, v] : report.ndcg_at)
        row("ndcg@" + std::to_string(l), "all", format_double(v));
    row("loglik_per_nonzero", "all", format_double(report.loglik_per_nonzero));
    row("loglik_per_cell", "all", format_double(report.loglik_per_cell));
    for (const auto& [t, wm] : report.per_window)
        if (wm.auc_defined)
            row("auc", std::to_string(t), format_double(wm.auc));
}

inline void write_roc(const std::vector<RocPoint>& points, std::ostream& out) {
    for (const RocPoint& p : points)
        out << format_double(p.fpr) << ' ' << format_double(p.tpr) << ' '
            << format_double(p.threshold) << '\n';
}

}  // namespace dcpf
