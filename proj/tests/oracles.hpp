#pragma once

// Reference computations used only by tests. They avoid the library's own code
// paths so a shared mistake cannot hide.

#include <cmath>
#include <vector>

namespace oracle {

/// Upper regularized incomplete gamma Q(a, x) in long double: series below a+1,
/// Lentz continued fraction above.
inline long double gamma_q(long double a, long double x) {
    if (x <= 0) return 1.0L;
    const long double log_pre = a * std::log(x) - x - std::lgamma(a);
    if (x < a + 1) {
        long double term = 1.0L / a, sum = term, ap = a;
        for (int n = 0; n < 10000; ++n) {
            ap += 1;
            term *= x / ap;
            sum += term;
            if (std::fabs(term) < std::fabs(sum) * 1e-21L) break;
        }
        return 1.0L - sum * std::exp(log_pre);
    }
    const long double tiny = 1e-300L;
    long double b = x + 1 - a, c = 1 / tiny, d = 1 / b, h = d;
    for (int i = 1; i < 10000; ++i) {
        const long double an = -i * (i - a);
        b += 2;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1 / d;
        const long double del = d * c;
        h *= del;
        if (std::fabs(del - 1) < 1e-21L) break;
    }
    return std::exp(log_pre) * h;
}

/// Chi-square survival function at one degree of freedom.
inline double chi2_sf_df1(double x) { return static_cast<double>(gamma_q(0.5L, static_cast<long double>(x) / 2)); }

/// Pearson statistic from expected counts, the textbook definition.
inline double pearson(double a, double b, double c, double d) {
    const double n = a + b + c + d;
    const double obs[2][2] = {{a, b}, {c, d}};
    const double rows[2] = {a + b, c + d}, cols[2] = {a + c, b + d};
    double s = 0.0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            const double e = rows[i] * cols[j] / n;
            s += (obs[i][j] - e) * (obs[i][j] - e) / e;
        }
    return s;
}

}  // namespace oracle
