#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "dcpf/common.hpp"

namespace dcpf {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Digamma function for x > 0. Argument is shifted past 10 by the
/// recurrence psi(x) = psi(x+1) - 1/x, then the asymptotic series is
/// applied; absolute error is below 1e-14 on the shifted argument.
inline double digamma(double x) {
    if (!(x > 0.0)) throw domain_error("digamma: argument must be positive");
    double acc = 0.0;
    while (x < 10.0) {
        acc -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    double series = inv2 * (1.0 / 12.0
                  - inv2 * (1.0 / 120.0
                  - inv2 * (1.0 / 252.0
                  - inv2 * (1.0 / 240.0
                  - inv2 * (1.0 / 132.0
                  - inv2 * (691.0 / 32760.0))))));
    return acc + std::log(x) - 0.5 * inv - series;
}

/// log(exp(a) + exp(b)) without overflow; -inf operands are identities.
inline double log_add_exp(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    if (a < b) std::swap(a, b);
    return a + std::log1p(std::exp(b - a));
}

/// log(sum_i exp(x_i)); returns -inf for an empty or all -inf input.
inline double log_sum_exp(std::span<const double> xs) {
    double m = kNegInf;
    for (double x : xs)
        if (x > m) m = x;
    if (m == kNegInf) return kNegInf;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

/// Kahan compensated accumulator; summation order still matters, but
/// rounding drift does not, which keeps aggregate metrics reproducible.
struct KahanSum {
    double sum = 0.0;
    double carry = 0.0;

    void add(double v) {
        double y = v - carry;
        double t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    double value() const { return sum; }
};

/// Triangle of log S2(n, k) (Stirling numbers of the second kind),
/// filled once by the recurrence S2(n,k) = k*S2(n-1,k) + S2(n-1,k-1)
/// carried out in log space. Immutable after construction.
class StirlingTable {
public:
    explicit StirlingTable(std::size_t max_n) : max_n_(max_n) {
        rows_.resize(max_n + 1);
        rows_[0] = {0.0};  // log S2(0,0) = log 1
        for (std::size_t n = 1; n <= max_n; ++n) {
            rows_[n].assign(n + 1, kNegInf);
            for (std::size_t k = 1; k <= n; ++k) {
                double carry = std::log(double(k)) + at(n - 1, k);
                double split = at(n - 1, k - 1);
                rows_[n][k] = log_add_exp(carry, split);
            }
        }
    }

    std::size_t max_n() const { return max_n_; }

    /// log S2(n, k); -inf when k > n or when k = 0 with n > 0.
    double log_value(std::size_t n, std::size_t k) const {
        if (n > max_n_)
            throw range_error("stirling2: n exceeds the configured table bound");
        if (k > n) return kNegInf;
        return rows_[n][k];
    }

private:
    double at(std::size_t n, std::size_t k) const {
        return k > n ? kNegInf : rows_[n][k];
    }

    std::size_t max_n_;
    std::vector<std::vector<double>> rows_;
};

inline constexpr std::size_t kStirlingMaxN = 1024;

inline const StirlingTable& shared_stirling_table() {
    static const StirlingTable table(kStirlingMaxN);
    return table;
}

/// log S2(n, k) from the shared table (n bounded by kStirlingMaxN).
inline double log_stirling2(std::size_t n, std::size_t k) {
    return shared_stirling_table().log_value(n, k);
}

/// S2(n, k) as a double: exact integer arithmetic while every value in
/// the row stays below 2^53 (n <= 24), exp of the log-space value above.
inline double stirling2(std::size_t n, std::size_t k) {
    static constexpr std::size_t kExactMaxN = 24;
    static const std::vector<std::vector<double>> exact = [] {
        std::vector<std::vector<double>> rows(kExactMaxN + 1);
        rows[0] = {1.0};
        for (std::size_t m = 1; m <= kExactMaxN; ++m) {
            rows[m].assign(m + 1, 0.0);
            for (std::size_t j = 1; j <= m; ++j)
                rows[m][j] = double(j) * (j <= m - 1 ? rows[m - 1][j] : 0.0) +
                             rows[m - 1][j - 1];
        }
        return rows;
    }();
    if (k > n) return 0.0;
    if (n <= kExactMaxN) return exact[n][k];
    double lv = log_stirling2(n, k);
    return lv == kNegInf ? 0.0 : std::exp(lv);
}

}  // namespace dcpf
