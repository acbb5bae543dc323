#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "dmpo/math_util.hpp"
#include "dmpo/rng.hpp"

namespace dmpo {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Multi-layer perceptron with ReLU hidden layers and a linear output.
// The architecture is fixed at construction; parameters are plain Eigen
// matrices so the reverse pass below can stay hand-written.
struct Mlp {
    std::vector<int> sizes;       // layer widths, input first
    std::vector<MatrixXd> W;      // W[l]: sizes[l+1] x sizes[l]
    std::vector<VectorXd> b;

    int input_dim() const { return sizes.front(); }
    int output_dim() const { return sizes.back(); }
    int layers() const { return static_cast<int>(W.size()); }

    long n_params() const {
        long n = 0;
        for (int l = 0; l < layers(); ++l) n += W[l].size() + b[l].size();
        return n;
    }

    // Canonical flat layout: W0 row-major, b0, W1, b1, ...
    VectorXd flatten_params() const {
        VectorXd out(n_params());
        long at = 0;
        for (int l = 0; l < layers(); ++l) {
            for (int r = 0; r < W[l].rows(); ++r)
                for (int c = 0; c < W[l].cols(); ++c) out(at++) = W[l](r, c);
            for (int r = 0; r < b[l].size(); ++r) out(at++) = b[l](r);
        }
        return out;
    }

    void set_params(const VectorXd& flat) {
        if (flat.size() != n_params())
            throw std::invalid_argument("Mlp::set_params: size mismatch");
        long at = 0;
        for (int l = 0; l < layers(); ++l) {
            for (int r = 0; r < W[l].rows(); ++r)
                for (int c = 0; c < W[l].cols(); ++c) W[l](r, c) = flat(at++);
            for (int r = 0; r < b[l].size(); ++r) b[l](r) = flat(at++);
        }
    }
};

// Forward activations kept for the reverse pass. acts[0] is the input
// batch; acts[l+1] the post-activation output of layer l.
struct MlpCache {
    std::vector<MatrixXd> acts;
};

struct MlpGrads {
    std::vector<MatrixXd> dW;
    std::vector<VectorXd> db;

    explicit MlpGrads(const Mlp& net) {
        dW.reserve(net.W.size());
        db.reserve(net.b.size());
        for (int l = 0; l < net.layers(); ++l) {
            dW.emplace_back(MatrixXd::Zero(net.W[l].rows(), net.W[l].cols()));
            db.emplace_back(VectorXd::Zero(net.b[l].size()));
        }
    }

    void add_scaled(const MlpGrads& other, double scale) {
        for (size_t l = 0; l < dW.size(); ++l) {
            dW[l] += scale * other.dW[l];
            db[l] += scale * other.db[l];
        }
    }

    VectorXd flatten() const {
        long n = 0;
        for (size_t l = 0; l < dW.size(); ++l) n += dW[l].size() + db[l].size();
        VectorXd out(n);
        long at = 0;
        for (size_t l = 0; l < dW.size(); ++l) {
            for (int r = 0; r < dW[l].rows(); ++r)
                for (int c = 0; c < dW[l].cols(); ++c) out(at++) = dW[l](r, c);
            for (int r = 0; r < db[l].size(); ++r) out(at++) = db[l](r);
        }
        return out;
    }
};

// Hidden layers draw from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in));
// the last layer draws weights from N(0, last_layer_std^2) with an
// explicit bias so residual heads can start at a chosen operating point.
// Draw order is fixed (per layer: weights row-major, then biases), so a
// seed pins the parameters.
inline Mlp init_mlp(const std::vector<int>& sizes, double last_layer_std,
                    const VectorXd& last_layer_bias, Rng& rng) {
    if (sizes.size() < 2) throw std::invalid_argument("init_mlp: need >= 2 layer sizes");
    Mlp net;
    net.sizes = sizes;
    const int n_layers = static_cast<int>(sizes.size()) - 1;
    for (int l = 0; l < n_layers; ++l) {
        MatrixXd w(sizes[l + 1], sizes[l]);
        VectorXd bias(sizes[l + 1]);
        const bool last = (l == n_layers - 1);
        if (last) {
            for (int r = 0; r < w.rows(); ++r)
                for (int c = 0; c < w.cols(); ++c) w(r, c) = rng.normal(0.0, last_layer_std);
            if (last_layer_bias.size() == 0)
                bias.setZero();
            else if (last_layer_bias.size() == bias.size())
                bias = last_layer_bias;
            else
                throw std::invalid_argument("init_mlp: last layer bias size mismatch");
        } else {
            double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
            for (int r = 0; r < w.rows(); ++r)
                for (int c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
            for (int r = 0; r < bias.size(); ++r) bias(r) = rng.uniform(-bound, bound);
        }
        net.W.push_back(std::move(w));
        net.b.push_back(std::move(bias));
    }
    return net;
}

inline Mlp init_mlp(const std::vector<int>& sizes, double last_layer_std, Rng& rng) {
    return init_mlp(sizes, last_layer_std, VectorXd(), rng);
}

// Batched forward: columns are samples.
inline MatrixXd forward(const Mlp& net, const MatrixXd& x, MlpCache* cache = nullptr) {
    if (x.rows() != net.input_dim())
        throw std::invalid_argument("forward: input dimension mismatch");
    if (cache) {
        cache->acts.clear();
        cache->acts.push_back(x);
    }
    MatrixXd a = x;
    for (int l = 0; l < net.layers(); ++l) {
        MatrixXd z = (net.W[l] * a).colwise() + net.b[l];
        if (l + 1 < net.layers()) z = z.cwiseMax(0.0);  // ReLU on hidden
        a = std::move(z);
        if (cache) cache->acts.push_back(a);
    }
    return a;
}

inline VectorXd forward(const Mlp& net, const VectorXd& x) {
    return forward(net, MatrixXd(x), nullptr).col(0);
}

// Reverse pass for the batched forward. Returns the gradient w.r.t. the
// input batch; parameter gradients accumulate into `grads`. ReLU uses
// the activation sign, so the cache from the matching forward call is
// required.
inline MatrixXd backward(const Mlp& net, const MlpCache& cache,
                         const MatrixXd& upstream, MlpGrads& grads) {
    if (cache.acts.size() != static_cast<size_t>(net.layers()) + 1)
        throw std::invalid_argument("backward: cache does not match network");
    MatrixXd delta = upstream;
    for (int l = net.layers() - 1; l >= 0; --l) {
        if (l + 1 < net.layers()) {
            // Through the ReLU of layer l's output.
            delta = delta.cwiseProduct(
                (cache.acts[static_cast<size_t>(l) + 1].array() > 0.0).cast<double>().matrix());
        }
        grads.dW[l].noalias() += delta * cache.acts[static_cast<size_t>(l)].transpose();
        grads.db[l] += delta.rowwise().sum();
        delta = net.W[l].transpose() * delta;
    }
    return delta;
}

// Diagonal Gaussian with state-dependent log standard deviation. The
// log_std is clamped to [-5, 2] at construction to keep the policy from
// collapsing or exploding.
struct DiagGaussian {
    VectorXd mean;
    VectorXd log_std;

    DiagGaussian(VectorXd mu, VectorXd ls) : mean(std::move(mu)), log_std(std::move(ls)) {
        if (mean.size() != log_std.size())
            throw std::invalid_argument("DiagGaussian: size mismatch");
        log_std = log_std.cwiseMax(-5.0).cwiseMin(2.0);
    }

    VectorXd sample(Rng& rng) const {
        VectorXd out(mean.size());
        for (int i = 0; i < out.size(); ++i)
            out(i) = mean(i) + std::exp(log_std(i)) * rng.normal();
        return out;
    }

    double log_prob(const VectorXd& x) const {
        double lp = 0.0;
        for (int i = 0; i < mean.size(); ++i) {
            double s = std::exp(log_std(i));
            double z = (x(i) - mean(i)) / s;
            lp += -0.5 * z * z - log_std(i) - 0.5 * std::log(2.0 * kPi);
        }
        return lp;
    }

    double entropy() const {
        double h = 0.0;
        for (int i = 0; i < mean.size(); ++i)
            h += log_std(i) + 0.5 * std::log(2.0 * kPi * std::exp(1.0));
        return h;
    }
};

// Adam moment buffers plus the step counter for one flat parameter
// vector.
struct AdamState {
    VectorXd m;
    VectorXd v;
    long step = 0;

    explicit AdamState(long n = 0) : m(VectorXd::Zero(n)), v(VectorXd::Zero(n)) {}
};

// Bias-corrected Adam. Throws on non-finite gradients: that is the
// trainer's divergence signal.
inline void adam_step(VectorXd& params, AdamState& state, const VectorXd& grads,
                      double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("adam_step: size mismatch");
    if (!grads.allFinite()) throw std::runtime_error("adam_step: non-finite gradient");

    state.step += 1;
    state.m = beta1 * state.m + (1.0 - beta1) * grads;
    state.v = beta2 * state.v + (1.0 - beta2) * grads.cwiseProduct(grads);
    double corr1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    double corr2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    VectorXd m_hat = state.m / corr1;
    VectorXd v_hat = state.v / corr2;
    params -= lr * (m_hat.array() / (v_hat.array().sqrt() + eps)).matrix();
}

}  // namespace dmpo
