#pragma once

#include <Eigen/Dense>
#include <stdexcept>

#include "dmpo/math_util.hpp"

namespace dmpo {

// Radical inverse of index i in the given base; i starts at 1, so the
// base-2 sequence opens 1/2, 1/4, 3/4, 1/8, ...
inline double radical_inverse(uint64_t i, int base) {
    double r = 0.0;
    double f = 1.0 / base;
    while (i > 0) {
        r += f * static_cast<double>(i % base);
        i /= base;
        f /= base;
    }
    return r;
}

// N points of the Halton sequence (coprime prime bases per dimension,
// first `skip` points dropped) pushed through the standard-normal
// inverse CDF. Deterministic; rerunning with the same arguments yields
// the same array.
inline Eigen::MatrixXd halton_gaussian(int n, int dims, int skip = 0) {
    if (n < 1) throw std::invalid_argument("halton_gaussian: n must be >= 1");
    const auto& primes = prime_table();
    if (dims < 1 || dims > static_cast<int>(primes.size()))
        throw std::invalid_argument("halton_gaussian: dims exceeds precomputed primes");

    Eigen::MatrixXd out(n, dims);
    for (int d = 0; d < dims; ++d) {
        int base = primes[static_cast<size_t>(d)];
        for (int i = 0; i < n; ++i) {
            double u = radical_inverse(static_cast<uint64_t>(skip + i + 1), base);
            out(i, d) = norm_inv_cdf(u);
        }
    }
    return out;
}

}  // namespace dmpo
