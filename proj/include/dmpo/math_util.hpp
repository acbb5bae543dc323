#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace dmpo {

inline constexpr double kPi = 3.14159265358979323846;

inline double clamp(double x, double lo, double hi) {
    return std::min(std::max(x, lo), hi);
}

inline double sigmoid(double x) {
    // Split on sign so exp never overflows.
    if (x >= 0.0) {
        double z = std::exp(-x);
        return 1.0 / (1.0 + z);
    }
    double z = std::exp(x);
    return z / (1.0 + z);
}

// Standard normal CDF.
inline double norm_cdf(double x) {
    return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

// Standard normal inverse CDF. Rational approximation (Acklam) polished
// with two Halley steps, accurate to full double precision away from the
// endpoints. u must lie in (0, 1).
inline double norm_inv_cdf(double u) {
    if (!(u > 0.0 && u < 1.0))
        throw std::invalid_argument("norm_inv_cdf: u must be in (0,1)");

    static const double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                -2.759285104469687e+02, 1.383577518672690e+02,
                                -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                -1.556989798598866e+02, 6.680131188771972e+01,
                                -1.328068155288572e+01};
    static const double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                -2.400758277161838e+00, -2.549732539343734e+00,
                                4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                2.445134137142996e+00, 3.754408661907416e+00};

    const double plow = 0.02425;
    double x;
    if (u < plow) {
        double q = std::sqrt(-2.0 * std::log(u));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (u <= 1.0 - plow) {
        double q = u - 0.5;
        double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        double q = std::sqrt(-2.0 * std::log(1.0 - u));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    for (int it = 0; it < 2; ++it) {
        double e = norm_cdf(x) - u;
        double g = e * std::sqrt(2.0 * kPi) * std::exp(0.5 * x * x);
        x = x - g / (1.0 + 0.5 * x * g);
    }
    return x;
}

// Quantile with linear interpolation between order statistics
// (the common "type 7" rule). q in [0,1].
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw std::invalid_argument("quantile: empty sample");
    std::sort(v.begin(), v.end());
    double pos = q * static_cast<double>(v.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, v.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

inline double median(const std::vector<double>& v) { return quantile(v, 0.5); }

// First n primes, used as Halton bases.
inline const std::vector<int>& prime_table() {
    static const std::vector<int> primes = [] {
        std::vector<int> p;
        int candidate = 2;
        while (p.size() < 256) {
            bool is_prime = true;
            for (int q : p) {
                if (q * q > candidate) break;
                if (candidate % q == 0) { is_prime = false; break; }
            }
            if (is_prime) p.push_back(candidate);
            ++candidate;
        }
        return p;
    }();
    return primes;
}

}  // namespace dmpo
