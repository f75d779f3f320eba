// SPDX-License-Identifier: Apache-2.0
//
// Frozen base model with patchable linear layers and a deterministic SGD trainer.
//
//   h_0 = x
//   h_{l+1} = act((W_l + s A_l B_l^T) h_l + bias_l)
//   y = head h_L
//
// Training minimises the batch mean of 0.5 * ||y - target||^2, i.e. the negative
// unit-variance Gaussian log-likelihood up to a constant.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modlib/adapters.hpp"
#include "modlib/dataset.hpp"
#include "modlib/error.hpp"
#include "modlib/hash.hpp"
#include "modlib/linalg.hpp"
#include "modlib/rng.hpp"

namespace modlib {

enum class Activation { tanh, identity };

struct ToyModel {
    std::vector<Matrix> weights;  // depth x (d x d)
    std::vector<Vector> biases;   // depth x d
    Matrix head;                  // out x d
    Activation activation = Activation::tanh;
    std::string fingerprint;      // set by freeze()

    std::size_t depth() const noexcept { return weights.size(); }
    std::size_t dim() const noexcept { return head.cols(); }
    std::size_t out_dim() const noexcept { return head.rows(); }
};

inline std::string compute_fingerprint(const ToyModel& m) {
    Sha256 h;
    h.update("modlib-toymodel-v1");
    h.update_u64(m.depth()).update_u64(m.dim()).update_u64(m.out_dim());
    h.update_u64(m.activation == Activation::tanh ? 1 : 0);
    for (std::size_t l = 0; l < m.depth(); ++l) {
        h.update_f32(m.weights[l].data());
        h.update_f32(m.biases[l]);
    }
    h.update_f32(m.head.data());
    return h.hex();
}

/// Rounds every parameter to f32 (so checkpoints are lossless) and records the fingerprint.
inline void freeze(ToyModel& m) {
    auto round = [](std::span<double> v) {
        for (double& x : v) {
            x = static_cast<double>(static_cast<float>(x));
        }
    };
    for (std::size_t l = 0; l < m.depth(); ++l) {
        round(m.weights[l].data());
        round(m.biases[l]);
    }
    round(m.head.data());
    m.fingerprint = compute_fingerprint(m);
}

/// W ~ N(0, gain^2 / d), bias ~ N(0, bias_std^2), head ~ N(0, 1 / d).
inline ToyModel random_model(std::size_t depth, std::size_t dim, std::size_t out_dim, std::uint64_t seed,
                             double gain = 1.0, double bias_std = 0.0) {
    SplitMix64 rng(seed);
    ToyModel m;
    const double wstd = gain / std::sqrt(static_cast<double>(dim));
    for (std::size_t l = 0; l < depth; ++l) {
        Matrix w(dim, dim);
        for (double& v : w.data()) {
            v = rng.normal(0.0, wstd);
        }
        Vector b(dim);
        for (double& v : b) {
            v = bias_std > 0.0 ? rng.normal(0.0, bias_std) : 0.0;
        }
        m.weights.push_back(std::move(w));
        m.biases.push_back(std::move(b));
    }
    m.head = Matrix(out_dim, dim);
    for (double& v : m.head.data()) {
        v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward

struct HiddenTrace {
    std::vector<Vector> hidden;  // pre-adapter input h_l of every layer, l = 0..L-1
};

/// Per-layer routing weights over a set of experts, computed from that layer's
/// pre-adapter hidden state.
using LayerMixer = std::function<Vector(std::size_t layer, std::span<const double> h)>;

struct RoutedExperts {
    std::span<const Expert> experts;
    LayerMixer mixer;
};

struct ForwardResult {
    Vector y;
    HiddenTrace trace;
    Vector final_hidden;  // h_L, the representation fed to the head
};

namespace detail {

inline double activate(Activation a, double z) noexcept { return a == Activation::tanh ? std::tanh(z) : z; }

inline void check_expert_fits(const ToyModel& m, const Expert& e) {
    if (e.depth() != m.depth() || e.dim() != m.dim()) {
        throw DimensionError("expert '" + e.name + "' does not match the model shape");
    }
}

/// z += s * A (B^T h)
inline void add_lora(const Matrix& a, const Matrix& b, double s, std::span<const double> h, std::span<double> z) {
    const std::size_t d = a.rows();
    const std::size_t r = a.cols();
    double u[64];
    std::vector<double> big;
    double* up = u;
    if (r > 64) {
        big.resize(r);
        up = big.data();
    }
    for (std::size_t k = 0; k < r; ++k) {
        up[k] = 0.0;
    }
    for (std::size_t i = 0; i < d; ++i) {
        const double hi = h[i];
        for (std::size_t k = 0; k < r; ++k) {
            up[k] += b(i, k) * hi;
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < r; ++k) {
            acc += a(i, k) * up[k];
        }
        z[i] += s * acc;
    }
}

}  // namespace detail

/// Forward pass. `expert` (static adapter) and `routed` (per-layer input-dependent
/// factor composition) are mutually exclusive; pass neither for the bare base.
inline ForwardResult forward(const ToyModel& m, const Expert* expert, const RoutedExperts* routed,
                             std::span<const double> x) {
    if (x.size() != m.dim()) {
        throw DimensionError("forward: input length " + std::to_string(x.size()) + " != model dim");
    }
    if (expert != nullptr && routed != nullptr) {
        throw ContractError("forward: pass either an expert or a router, not both");
    }
    if (expert != nullptr) {
        detail::check_expert_fits(m, *expert);
    }
    if (routed != nullptr) {
        for (const Expert& e : routed->experts) {
            detail::check_expert_fits(m, e);
        }
    }
    const std::size_t d = m.dim();
    ForwardResult out;
    out.trace.hidden.reserve(m.depth());
    Vector h(x.begin(), x.end());
    Vector z(d);
    for (std::size_t l = 0; l < m.depth(); ++l) {
        out.trace.hidden.push_back(h);
        matvec(m.weights[l], h, z);
        if (expert != nullptr) {
            const LoraAdapter& ad = expert->adapters[l];
            detail::add_lora(ad.a, ad.b, ad.scaling, h, z);
        } else if (routed != nullptr && !routed->experts.empty()) {
            const Vector w = routed->mixer(l, h);
            if (w.size() != routed->experts.size()) {
                throw DimensionError("forward: routing weights length != expert count");
            }
            const Expert& first = routed->experts.front();
            Matrix a(d, first.rank()), b(d, first.rank());
            for (std::size_t i = 0; i < w.size(); ++i) {
                if (w[i] != 0.0) {
                    a.add_scaled(routed->experts[i].adapters[l].a, w[i]);
                    b.add_scaled(routed->experts[i].adapters[l].b, w[i]);
                }
            }
            detail::add_lora(a, b, first.scaling(), h, z);
        }
        for (std::size_t i = 0; i < d; ++i) {
            h[i] = detail::activate(m.activation, z[i] + m.biases[l][i]);
        }
    }
    out.y = matvec(m.head, h);
    out.final_hidden = std::move(h);
    return out;
}

/// Forward with a library, verifying the library was built on this model.
inline ForwardResult forward(const ToyModel& m, const Library& lib, const LayerMixer& mixer, std::span<const double> x) {
    if (lib.base_model_fingerprint != m.fingerprint) {
        throw ContractError("forward: library fingerprint does not match base model");
    }
    RoutedExperts routed{lib.experts, mixer};
    return forward(m, nullptr, &routed, x);
}

inline ForwardResult forward(const ToyModel& m, std::span<const double> x) { return forward(m, nullptr, nullptr, x); }

// ---------------------------------------------------------------------------
// Gradients

/// Effective per-layer factors for one batch (null pointers mean "no adapter").
struct LayerFactors {
    const Matrix* a = nullptr;
    const Matrix* b = nullptr;
};

struct AdapterGrads {
    std::vector<Matrix> a;
    std::vector<Matrix> b;

    static AdapterGrads zeros_like(std::span<const LayerFactors> f) {
        AdapterGrads g;
        for (const LayerFactors& lf : f) {
            g.a.emplace_back(lf.a->rows(), lf.a->cols());
            g.b.emplace_back(lf.b->rows(), lf.b->cols());
        }
        return g;
    }
};

struct BaseGrads {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
    Matrix head;

    static BaseGrads zeros_like(const ToyModel& m) {
        BaseGrads g;
        for (std::size_t l = 0; l < m.depth(); ++l) {
            g.weights.emplace_back(m.dim(), m.dim());
            g.biases.emplace_back(m.dim(), 0.0);
        }
        g.head = Matrix(m.out_dim(), m.dim());
        return g;
    }
};

/// Mean over `rows` of 0.5 * ||f(x) - y||^2. Accumulates (adds) gradients of that
/// mean into `adapter_grads` / `base_grads` when non-null. `factors` may be empty
/// (bare base model) or hold one entry per layer.
inline double loss_and_grads(const ToyModel& m, std::span<const LayerFactors> factors, double scaling, const Split& data,
                             std::span<const std::size_t> rows, AdapterGrads* adapter_grads, BaseGrads* base_grads) {
    const std::size_t depth = m.depth();
    const std::size_t d = m.dim();
    const std::size_t out = m.out_dim();
    const bool patched = !factors.empty();
    if (patched && factors.size() != depth) {
        throw DimensionError("loss_and_grads: need one factor pair per layer");
    }
    if (rows.empty()) {
        throw ContractError("loss_and_grads: empty batch");
    }
    const double inv_n = 1.0 / static_cast<double>(rows.size());

    std::vector<Vector> hs(depth + 1, Vector(d));
    std::vector<Vector> us(depth);
    Vector z(d), y(out), gy(out), gh(d), gz(d), gu, tmp(d);
    double total = 0.0;

    for (std::size_t row : rows) {
        auto x = data.x.row(row);
        std::copy(x.begin(), x.end(), hs[0].begin());
        for (std::size_t l = 0; l < depth; ++l) {
            matvec(m.weights[l], hs[l], z);
            if (patched) {
                const Matrix& a = *factors[l].a;
                const Matrix& b = *factors[l].b;
                us[l].resize(b.cols());
                matvec_t(b, hs[l], us[l]);
                for (std::size_t i = 0; i < d; ++i) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < a.cols(); ++k) {
                        acc += a(i, k) * us[l][k];
                    }
                    z[i] += scaling * acc;
                }
            }
            for (std::size_t i = 0; i < d; ++i) {
                hs[l + 1][i] = detail::activate(m.activation, z[i] + m.biases[l][i]);
            }
        }
        matvec(m.head, hs[depth], y);
        auto target = data.y.row(row);
        double sq = 0.0;
        for (std::size_t i = 0; i < out; ++i) {
            gy[i] = y[i] - target[i];
            sq += gy[i] * gy[i];
        }
        total += 0.5 * sq;
        if (adapter_grads == nullptr && base_grads == nullptr) {
            continue;
        }
        for (double& v : gy) {
            v *= inv_n;
        }
        if (base_grads != nullptr) {
            for (std::size_t i = 0; i < out; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    base_grads->head(i, j) += gy[i] * hs[depth][j];
                }
            }
        }
        matvec_t(m.head, gy, gh);
        for (std::size_t l = depth; l-- > 0;) {
            for (std::size_t i = 0; i < d; ++i) {
                const double hn = hs[l + 1][i];
                gz[i] = m.activation == Activation::tanh ? gh[i] * (1.0 - hn * hn) : gh[i];
            }
            if (base_grads != nullptr) {
                Matrix& gw = base_grads->weights[l];
                for (std::size_t i = 0; i < d; ++i) {
                    base_grads->biases[l][i] += gz[i];
                    for (std::size_t j = 0; j < d; ++j) {
                        gw(i, j) += gz[i] * hs[l][j];
                    }
                }
            }
            matvec_t(m.weights[l], gz, tmp);
            if (patched) {
                const Matrix& a = *factors[l].a;
                const Matrix& b = *factors[l].b;
                const std::size_t r = a.cols();
                gu.assign(r, 0.0);
                for (std::size_t i = 0; i < d; ++i) {
                    for (std::size_t k = 0; k < r; ++k) {
                        gu[k] += a(i, k) * gz[i];
                    }
                }
                for (double& v : gu) {
                    v *= scaling;
                }
                if (adapter_grads != nullptr) {
                    Matrix& ga = adapter_grads->a[l];
                    Matrix& gb = adapter_grads->b[l];
                    for (std::size_t i = 0; i < d; ++i) {
                        for (std::size_t k = 0; k < r; ++k) {
                            ga(i, k) += scaling * gz[i] * us[l][k];
                            gb(i, k) += hs[l][i] * gu[k];
                        }
                    }
                }
                for (std::size_t i = 0; i < d; ++i) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < r; ++k) {
                        acc += b(i, k) * gu[k];
                    }
                    tmp[i] += acc;
                }
            }
            std::swap(gh, tmp);
        }
    }
    return total * inv_n;
}

inline std::vector<LayerFactors> factors_of(const Expert& e) {
    std::vector<LayerFactors> f;
    for (const LoraAdapter& ad : e.adapters) {
        f.push_back({&ad.a, &ad.b});
    }
    return f;
}

// ---------------------------------------------------------------------------
// Training

enum class OptimizerKind { sgd, momentum };

struct TrainConfig {
    std::size_t steps = 1000;
    double learning_rate = 1e-2;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::sgd;
    double momentum = 0.9;
    double warmup_fraction = 0.05;

    /// Linear warmup over ceil(warmup_fraction * steps) steps, then constant.
    double lr_at(std::size_t step) const noexcept {
        const auto warm = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(steps)));
        if (warm == 0 || step >= warm) {
            return learning_rate;
        }
        return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
    }
};

/// Epoch-shuffled mini-batches; the permutation is redrawn at every epoch.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(std::min(batch, n)), rng_(seed) {
        if (n == 0) {
            throw ContractError("BatchSampler: empty dataset");
        }
        reshuffle();
    }

    std::span<const std::size_t> next() {
        if (pos_ + batch_ > n_) {
            reshuffle();
        }
        std::span<const std::size_t> out(order_.data() + pos_, batch_);
        pos_ += batch_;
        return out;
    }

private:
    void reshuffle() {
        order_ = rng_.permutation(n_);
        pos_ = 0;
    }

    std::size_t n_;
    std::size_t batch_;
    SplitMix64 rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

/// Plain or heavy-ball SGD on a list of parameter blocks.
class SgdOptimizer {
public:
    explicit SgdOptimizer(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(std::size_t step_index, std::span<std::span<double>> params, std::span<std::span<const double>> grads) {
        const double lr = cfg_.lr_at(step_index);
        if (cfg_.optimizer == OptimizerKind::sgd) {
            for (std::size_t p = 0; p < params.size(); ++p) {
                for (std::size_t i = 0; i < params[p].size(); ++i) {
                    params[p][i] -= lr * grads[p][i];
                }
            }
            return;
        }
        if (velocity_.size() != params.size()) {
            velocity_.assign(params.size(), {});
            for (std::size_t p = 0; p < params.size(); ++p) {
                velocity_[p].assign(params[p].size(), 0.0);
            }
        }
        for (std::size_t p = 0; p < params.size(); ++p) {
            for (std::size_t i = 0; i < params[p].size(); ++i) {
                velocity_[p][i] = cfg_.momentum * velocity_[p][i] + grads[p][i];
                params[p][i] -= lr * velocity_[p][i];
            }
        }
    }

private:
    TrainConfig cfg_;
    std::vector<Vector> velocity_;
};

struct TrainReport {
    std::size_t steps = 0;
    double final_loss = 0.0;  // loss of the last mini-batch
};

/// Mini-batch SGD on the factors (A, B) of `init`; the base model is untouched.
/// Throws DivergenceError naming the step when the loss stops being finite.
inline Expert train_adapter(const ToyModel& m, const Split& data, const TrainConfig& cfg, Expert init,
                            TrainReport* report = nullptr) {
    if (data.empty()) {
        throw ContractError("train_adapter: empty dataset");
    }
    detail::check_expert_fits(m, init);
    if (cfg.steps == 0) {
        if (report != nullptr) {
            *report = {};
        }
        return init;
    }
    BatchSampler sampler(data.size(), cfg.batch_size, cfg.seed);
    SgdOptimizer opt(cfg);
    const std::vector<LayerFactors> factors = factors_of(init);
    AdapterGrads grads = AdapterGrads::zeros_like(factors);
    std::vector<std::span<double>> params;
    std::vector<std::span<const double>> gspans;
    for (std::size_t l = 0; l < init.depth(); ++l) {
        params.push_back(init.adapters[l].a.data());
        params.push_back(init.adapters[l].b.data());
        gspans.push_back(grads.a[l].data());
        gspans.push_back(grads.b[l].data());
    }
    double loss = 0.0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (std::size_t l = 0; l < init.depth(); ++l) {
            grads.a[l].fill(0.0);
            grads.b[l].fill(0.0);
        }
        loss = loss_and_grads(m, factors, init.scaling(), data, sampler.next(), &grads, nullptr);
        if (!std::isfinite(loss)) {
            throw DivergenceError("train_adapter: non-finite loss for '" + init.name + "'", step);
        }
        opt.step(step, params, gspans);
    }
    if (report != nullptr) {
        *report = {cfg.steps, loss};
    }
    return init;
}

struct AdapterConfig {
    std::size_t rank = 4;
    double alpha = 16.0;
    double b_init_std = 0.05;

    double scaling() const noexcept { return alpha / static_cast<double>(rank); }
};

inline Expert fresh_expert(const ToyModel& m, const AdapterConfig& ac, std::uint64_t seed, std::string name = "expert") {
    return init_expert(std::move(name), m.depth(), m.dim(), ac.rank, ac.scaling(), seed, ac.b_init_std);
}

// ---------------------------------------------------------------------------
// Evaluation

struct Metrics {
    double mse = 0.0;                 // mean over examples of ||y - yhat||^2
    double avg_log_likelihood = 0.0;  // mean over examples of -0.5 ||y - yhat||^2
    std::size_t n = 0;
};

inline Metrics metrics_from_sum(double sum_sq, std::size_t n) {
    if (n == 0) {
        return {};
    }
    const double mse = sum_sq / static_cast<double>(n);
    return {mse, -0.5 * mse, n};
}

/// Exactly one of `expert` / `routed` may be non-null (or neither, for the base).
inline Metrics evaluate(const ToyModel& m, const Expert* expert, const RoutedExperts* routed, const Split& data) {
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const ForwardResult f = forward(m, expert, routed, data.x.row(i));
        auto t = data.y.row(i);
        for (std::size_t j = 0; j < f.y.size(); ++j) {
            const double e = f.y[j] - t[j];
            sum_sq += e * e;
        }
    }
    return metrics_from_sum(sum_sq, data.size());
}

// ---------------------------------------------------------------------------
// Base model pretraining

struct PretrainConfig {
    std::size_t depth = 4;
    std::size_t dim = 16;
    std::size_t out_dim = 16;
    Activation activation = Activation::tanh;
    double init_gain = 1.0;
    TrainConfig train{.steps = 400, .learning_rate = 1e-2, .batch_size = 32, .seed = 0};
};

/// Random init from `cfg.train.seed`, then full-parameter SGD on the pooled mixture,
/// then freeze. Zero steps yields the frozen random initialisation.
inline ToyModel pretrain_base(const PretrainConfig& cfg, const Split& mixture) {
    ToyModel m = random_model(cfg.depth, cfg.dim, cfg.out_dim, derive_seed(cfg.train.seed, {0xBA5E}), cfg.init_gain);
    m.activation = cfg.activation;
    if (cfg.train.steps > 0) {
        if (mixture.empty()) {
            throw ContractError("pretrain_base: empty mixture");
        }
        BatchSampler sampler(mixture.size(), cfg.train.batch_size, derive_seed(cfg.train.seed, {0xDA7A}));
        SgdOptimizer opt(cfg.train);
        BaseGrads g = BaseGrads::zeros_like(m);
        std::vector<std::span<double>> params;
        std::vector<std::span<const double>> gspans;
        for (std::size_t l = 0; l < m.depth(); ++l) {
            params.push_back(m.weights[l].data());
            params.push_back(m.biases[l]);
            gspans.push_back(g.weights[l].data());
            gspans.push_back(g.biases[l]);
        }
        params.push_back(m.head.data());
        gspans.push_back(g.head.data());
        for (std::size_t step = 0; step < cfg.train.steps; ++step) {
            for (std::size_t l = 0; l < m.depth(); ++l) {
                g.weights[l].fill(0.0);
                std::fill(g.biases[l].begin(), g.biases[l].end(), 0.0);
            }
            g.head.fill(0.0);
            const double loss = loss_and_grads(m, {}, 1.0, mixture, sampler.next(), nullptr, &g);
            if (!std::isfinite(loss)) {
                throw DivergenceError("pretrain_base: non-finite loss", step);
            }
            opt.step(step, params, gspans);
        }
    }
    freeze(m);
    return m;
}

}  // namespace modlib
