// SPDX-License-Identifier: Apache-2.0
//
// Routing over a fixed library.
//
// Zero-shot: mu (uniform), Arrow (per-layer prototypes from the factored SVD of
// each expert), CM (per-layer hidden-state centroids), TP (input-level task
// classifier), Oracle (task identity).
// Supervised: Poly / PolyZ (per-layer merging logits trained by SGD, with or
// without the expert factors) and a LoraHub-style elitist evolution strategy.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modlib/adapters.hpp"
#include "modlib/dataset.hpp"
#include "modlib/error.hpp"
#include "modlib/linalg.hpp"
#include "modlib/rng.hpp"
#include "modlib/toymodel.hpp"

namespace modlib {

struct RoutingDistribution {
    Vector weights;
    std::size_t k_active = 0;
    bool degenerate = false;  // set when the input carried no routing signal (uniform fallback)
};

namespace detail {

inline RoutingDistribution finalize(Vector w, bool degenerate = false) {
    RoutingDistribution r{std::move(w), 0, degenerate};
    r.k_active = static_cast<std::size_t>(std::count_if(r.weights.begin(), r.weights.end(), [](double v) { return v > 0.0; }));
    return r;
}

inline RoutingDistribution uniform(std::size_t n, bool degenerate) {
    return finalize(Vector(n, 1.0 / static_cast<double>(n)), degenerate);
}

}  // namespace detail

/// Keeps the k largest logits (ties go to the lower index), masks the rest to
/// -inf and applies a softmax over the full vector; masked entries get exactly 0.
inline RoutingDistribution top_k_softmax(std::span<const double> logits, std::size_t k) {
    const std::size_t n = logits.size();
    if (n == 0) {
        throw ContractError("top_k_softmax: empty logits");
    }
    if (k == 0) {
        throw ContractError("top_k_softmax: k must be >= 1");
    }
    k = std::min(k, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    const double top = logits[order[0]];
    Vector w(n, 0.0);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double e = std::exp(logits[order[i]] - top);
        w[order[i]] = e;
        z += e;
    }
    for (std::size_t i = 0; i < k; ++i) {
        w[order[i]] /= z;
    }
    return detail::finalize(std::move(w));
}

inline Vector softmax(std::span<const double> logits) {
    Vector w(logits.begin(), logits.end());
    const double top = *std::max_element(w.begin(), w.end());
    double z = 0.0;
    for (double& v : w) {
        v = std::exp(v - top);
        z += v;
    }
    for (double& v : w) {
        v /= z;
    }
    return w;
}

// ---------------------------------------------------------------------------
// mu

inline RoutingDistribution mu_route(std::size_t library_size) {
    if (library_size == 0) {
        throw ContractError("mu_route: empty library");
    }
    return detail::uniform(library_size, false);
}

// ---------------------------------------------------------------------------
// Prototype routers (Arrow, CM)

enum class PrototypeSource { arrow, cm };

inline std::string_view to_string(PrototypeSource s) noexcept { return s == PrototypeSource::arrow ? "arrow" : "cm"; }

struct PrototypeBank {
    PrototypeSource source = PrototypeSource::arrow;
    std::vector<Matrix> layers;  // per layer, |L| x d

    std::size_t depth() const noexcept { return layers.size(); }
    std::size_t experts() const noexcept { return layers.empty() ? 0 : layers.front().rows(); }
};

/// Row i of layer l is the first right singular vector of A_{i,l} B_{i,l}^T,
/// unit norm and sign-canonicalized. Zero adapters have no prototype.
inline PrototypeBank arrow_init(const Library& lib) {
    if (lib.experts.empty()) {
        throw ContractError("arrow_init: empty library");
    }
    PrototypeBank bank{PrototypeSource::arrow, {}};
    const std::size_t depth = lib.experts.front().depth();
    const std::size_t d = lib.experts.front().dim();
    for (std::size_t l = 0; l < depth; ++l) {
        Matrix w(lib.size(), d);
        for (std::size_t i = 0; i < lib.size(); ++i) {
            const LoraAdapter& ad = lib.experts[i].adapters[l];
            const SvdResult svd = low_rank_svd(ad.a, ad.b);
            if (svd.rank() == 0) {
                throw NumericError("arrow_init: expert '" + lib.experts[i].name + "' has a zero adapter at layer " +
                                   std::to_string(l));
            }
            for (std::size_t j = 0; j < d; ++j) {
                w(i, j) = svd.v(j, 0);
            }
        }
        bank.layers.push_back(std::move(w));
    }
    return bank;
}

/// logits = |W_l h| / temperature, then top-k softmax. A zero response (h = 0)
/// falls back to uniform over all experts with `degenerate` set.
inline RoutingDistribution arrow_route(const PrototypeBank& bank, std::size_t layer, std::span<const double> h,
                                       std::size_t k, double temperature = 1.0) {
    if (k == 0) {
        throw ContractError("arrow_route: k must be >= 1");
    }
    if (!(temperature > 0.0)) {
        throw ContractError("arrow_route: temperature must be > 0");
    }
    if (layer >= bank.depth()) {
        throw ContractError("arrow_route: layer out of range");
    }
    Vector logits = matvec(bank.layers[layer], h);
    bool all_zero = true;
    for (double& v : logits) {
        v = std::abs(v);
        all_zero = all_zero && v == 0.0;
        v /= temperature;
    }
    if (all_zero) {
        return detail::uniform(logits.size(), true);
    }
    return top_k_softmax(logits, k);
}

/// Row i of layer l is the mean base-model hidden state h_l over expert i's data.
inline PrototypeBank cm_init(const Library& lib, std::span<const Split* const> expert_data, const ToyModel& model) {
    if (lib.experts.empty()) {
        throw ContractError("cm_init: empty library");
    }
    if (expert_data.size() != lib.size()) {
        throw ContractError("cm_init: need one dataset per expert");
    }
    PrototypeBank bank{PrototypeSource::cm, std::vector<Matrix>(model.depth(), Matrix(lib.size(), model.dim()))};
    for (std::size_t i = 0; i < lib.size(); ++i) {
        const Split& data = *expert_data[i];
        if (data.empty()) {
            throw ContractError("cm_init: expert '" + lib.experts[i].name + "' has an empty dataset");
        }
        for (std::size_t n = 0; n < data.size(); ++n) {
            const ForwardResult f = forward(model, data.x.row(n));
            for (std::size_t l = 0; l < model.depth(); ++l) {
                for (std::size_t j = 0; j < model.dim(); ++j) {
                    bank.layers[l](i, j) += f.trace.hidden[l][j];
                }
            }
        }
        const double inv = 1.0 / static_cast<double>(data.size());
        for (std::size_t l = 0; l < model.depth(); ++l) {
            for (double& v : bank.layers[l].row(i)) {
                v *= inv;
            }
        }
    }
    return bank;
}

/// Cosine similarity to each centroid / temperature, then top-k softmax.
inline RoutingDistribution cm_route(const PrototypeBank& bank, std::size_t layer, std::span<const double> h,
                                    std::size_t k, double temperature = 1.0) {
    if (k == 0) {
        throw ContractError("cm_route: k must be >= 1");
    }
    if (!(temperature > 0.0)) {
        throw ContractError("cm_route: temperature must be > 0");
    }
    const Matrix& w = bank.layers.at(layer);
    const double hn = norm2(h);
    if (hn == 0.0) {
        return detail::uniform(w.rows(), true);
    }
    Vector logits(w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const double pn = norm2(w.row(i));
        logits[i] = pn == 0.0 ? 0.0 : dot(w.row(i), h) / (pn * hn) / temperature;
    }
    return top_k_softmax(logits, k);
}

// ---------------------------------------------------------------------------
// Task predictor

struct TaskPredictor {
    std::vector<int> task_ids;  // class order
    Matrix weights;             // classes x features
    Vector bias;                // classes

    std::size_t classes() const noexcept { return task_ids.size(); }
};

struct TpConfig {
    std::size_t iterations = 300;
    double learning_rate = 0.5;
    double l2 = 1e-4;
    std::size_t max_examples_per_task = 256;
};

/// Penultimate features: the final hidden state h_L of the frozen base model.
inline Vector tp_features(const ToyModel& model, std::span<const double> x) { return forward(model, x).final_hidden; }

inline Vector tp_predict(const TaskPredictor& tp, const ToyModel& model, std::span<const double> x) {
    const Vector f = tp_features(model, x);
    Vector logits = matvec(tp.weights, f);
    for (std::size_t c = 0; c < logits.size(); ++c) {
        logits[c] += tp.bias[c];
    }
    return softmax(logits);
}

/// Multinomial logistic regression on base-model features, full-batch gradient
/// descent on the mean cross-entropy plus an L2 penalty.
inline TaskPredictor tp_train(std::span<const TaskDataset* const> tasks, const ToyModel& model, const TpConfig& cfg = {}) {
    if (tasks.empty()) {
        throw ContractError("tp_train: no tasks");
    }
    const std::size_t f_dim = model.dim();
    std::vector<Vector> feats;
    std::vector<std::size_t> labels;
    TaskPredictor tp;
    for (std::size_t c = 0; c < tasks.size(); ++c) {
        tp.task_ids.push_back(tasks[c]->task_id);
        const Split& s = tasks[c]->train;
        const std::size_t n = std::min(s.size(), cfg.max_examples_per_task);
        for (std::size_t i = 0; i < n; ++i) {
            feats.push_back(tp_features(model, s.x.row(i)));
            labels.push_back(c);
        }
    }
    const std::size_t classes = tasks.size();
    tp.weights = Matrix(classes, f_dim);
    tp.bias.assign(classes, 0.0);
    const double inv_n = 1.0 / static_cast<double>(feats.size());
    Matrix gw(classes, f_dim);
    Vector gb(classes);
    Vector logits(classes);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        gw.fill(0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t n = 0; n < feats.size(); ++n) {
            matvec(tp.weights, feats[n], logits);
            for (std::size_t c = 0; c < classes; ++c) {
                logits[c] += tp.bias[c];
            }
            const Vector p = softmax(logits);
            for (std::size_t c = 0; c < classes; ++c) {
                const double g = (p[c] - (c == labels[n] ? 1.0 : 0.0)) * inv_n;
                gb[c] += g;
                for (std::size_t j = 0; j < f_dim; ++j) {
                    gw(c, j) += g * feats[n][j];
                }
            }
        }
        for (std::size_t c = 0; c < classes; ++c) {
            tp.bias[c] -= cfg.learning_rate * gb[c];
            for (std::size_t j = 0; j < f_dim; ++j) {
                tp.weights(c, j) -= cfg.learning_rate * (gw(c, j) + cfg.l2 * tp.weights(c, j));
            }
        }
    }
    return tp;
}

/// Maps task probabilities onto library experts: each expert receives the summed
/// probability of the tasks in its provenance; the result is renormalized.
inline RoutingDistribution aggregate_task_probs(const TaskPredictor& tp, std::span<const double> task_probs,
                                                const Library& lib) {
    Vector w(lib.size(), 0.0);
    for (std::size_t c = 0; c < tp.classes(); ++c) {
        bool covered = false;
        for (std::size_t e = 0; e < lib.size(); ++e) {
            if (lib.experts[e].provenance.covers(tp.task_ids[c])) {
                w[e] += task_probs[c];
                covered = true;
            }
        }
        if (!covered) {
            throw ContractError("tp_route: task " + std::to_string(tp.task_ids[c]) + " is not covered by any expert");
        }
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& v : w) {
        v /= total;
    }
    return detail::finalize(std::move(w));
}

/// Input-level routing: identical for every layer.
inline RoutingDistribution tp_route(const TaskPredictor& tp, const ToyModel& model, std::span<const double> x,
                                    const Library& lib) {
    const Vector probs = tp_predict(tp, model, x);
    return aggregate_task_probs(tp, probs, lib);
}

// ---------------------------------------------------------------------------
// Oracle

inline RoutingDistribution oracle_route(int task_id, const Library& lib) {
    for (std::size_t e = 0; e < lib.size(); ++e) {
        if (lib.experts[e].provenance.covers(task_id)) {
            Vector w(lib.size(), 0.0);
            w[e] = 1.0;
            return detail::finalize(std::move(w));
        }
    }
    throw ContractError("oracle_route: no expert covers task " + std::to_string(task_id));
}

// ---------------------------------------------------------------------------
// Router facade used by evaluation

enum class RouterKind { mu, arrow, cm, tp, oracle };

inline std::string_view to_string(RouterKind k) noexcept {
    switch (k) {
    case RouterKind::mu: return "mu";
    case RouterKind::arrow: return "arrow";
    case RouterKind::cm: return "cm";
    case RouterKind::tp: return "tp";
    case RouterKind::oracle: return "oracle";
    }
    return "unknown";
}

inline RouterKind router_kind_from_string(std::string_view s) {
    if (s == "mu") return RouterKind::mu;
    if (s == "arrow") return RouterKind::arrow;
    if (s == "cm") return RouterKind::cm;
    if (s == "tp") return RouterKind::tp;
    if (s == "oracle") return RouterKind::oracle;
    throw ContractError("unknown router '" + std::string(s) + "'");
}

/// A configured router bound to a library. Prototype banks / predictors are
/// prepared once; mixers are then produced per evaluated task.
struct Router {
    RouterKind kind = RouterKind::mu;
    std::size_t top_k = 4;
    double temperature = 1.0;
    std::optional<PrototypeBank> bank;
    std::optional<TaskPredictor> predictor;
    const ToyModel* model = nullptr;  // TP feature extractor
    const Library* library = nullptr;

    /// Mixer for inputs of `task_id` (only the oracle looks at it).
    LayerMixer mixer(int task_id) const {
        const Library& lib = *library;
        const std::size_t k = std::min(top_k, lib.size());
        switch (kind) {
        case RouterKind::mu: {
            const Vector w = mu_route(lib.size()).weights;
            return [w](std::size_t, std::span<const double>) { return w; };
        }
        case RouterKind::oracle: {
            const Vector w = oracle_route(task_id, lib).weights;
            return [w](std::size_t, std::span<const double>) { return w; };
        }
        case RouterKind::arrow: {
            const PrototypeBank* b = &*bank;
            const double t = temperature;
            return [b, k, t](std::size_t l, std::span<const double> h) { return arrow_route(*b, l, h, k, t).weights; };
        }
        case RouterKind::cm: {
            const PrototypeBank* b = &*bank;
            const double t = temperature;
            return [b, k, t](std::size_t l, std::span<const double> h) { return cm_route(*b, l, h, k, t).weights; };
        }
        case RouterKind::tp: {
            // Layer 0 sees h_0 = x; the distribution is cached for deeper layers.
            const TaskPredictor* p = &*predictor;
            const ToyModel* m = model;
            const Library* lp = library;
            auto cache = std::make_shared<Vector>();
            return [p, m, lp, cache](std::size_t l, std::span<const double> h) {
                if (l == 0) {
                    *cache = tp_route(*p, *m, h, *lp).weights;
                }
                return *cache;
            };
        }
        }
        throw ContractError("Router: unknown kind");
    }
};

struct RouterOptions {
    RouterKind kind = RouterKind::mu;
    std::size_t top_k = 4;
    double temperature = 1.0;
    TpConfig tp{};
};

/// Prepares a router: Arrow needs only the library; CM needs one dataset per
/// expert; TP needs the training tasks.
inline Router make_router(const RouterOptions& opt, const Library& lib, const ToyModel& model,
                          std::span<const Split* const> expert_data = {},
                          std::span<const TaskDataset* const> tp_tasks = {}) {
    if (opt.top_k == 0) {
        throw ContractError("router: top-k must be >= 1");
    }
    if (!(opt.temperature > 0.0)) {
        throw ContractError("router: temperature must be > 0");
    }
    Router r{opt.kind, opt.top_k, opt.temperature, std::nullopt, std::nullopt, &model, &lib};
    if (opt.kind == RouterKind::arrow) {
        r.bank = arrow_init(lib);
    } else if (opt.kind == RouterKind::cm) {
        r.bank = cm_init(lib, expert_data, model);
    } else if (opt.kind == RouterKind::tp) {
        r.predictor = tp_train(tp_tasks, model, opt.tp);
    }
    return r;
}

inline Metrics evaluate_routed(const ToyModel& model, const Library& lib, const LayerMixer& mixer, const Split& data) {
    if (lib.base_model_fingerprint != model.fingerprint) {
        throw ContractError("evaluate: library fingerprint does not match base model");
    }
    RoutedExperts routed{lib.experts, mixer};
    return evaluate(model, nullptr, &routed, data);
}

// ---------------------------------------------------------------------------
// Poly / PolyZ

struct PolyFitConfig {
    TrainConfig train{.steps = 300, .learning_rate = 1e-2, .batch_size = 32, .seed = 0};
    double logit_learning_rate = 0.5;
    bool tune_experts = true;  // Poly; false gives PolyZ
};

struct PolyFitResult {
    std::vector<Vector> layer_logits;
    std::vector<Vector> layer_weights;  // softmax of the logits
    std::vector<Expert> experts;        // updated copies when tune_experts, else the originals
    double final_loss = 0.0;
    std::size_t steps = 0;

    Expert composed(std::string name = "poly") const {
        return compose_per_layer(experts, layer_weights, std::move(name));
    }
};

/// Learns per-layer merging logits (initialized uniform) on a task's training
/// split; optionally co-trains the experts' factors.
inline PolyFitResult poly_fit(const Library& lib, const ToyModel& model, const Split& data, const PolyFitConfig& cfg) {
    if (lib.experts.empty()) {
        throw ContractError("poly_fit: empty library");
    }
    if (data.empty()) {
        throw ContractError("poly_fit: empty dataset");
    }
    const std::size_t n_exp = lib.size();
    const std::size_t depth = model.depth();
    PolyFitResult out;
    out.experts = lib.experts;
    out.layer_logits.assign(depth, Vector(n_exp, 0.0));
    out.layer_weights.assign(depth, Vector(n_exp, 1.0 / static_cast<double>(n_exp)));
    const std::size_t d = model.dim();
    const std::size_t r = lib.experts.front().rank();
    const double s = lib.experts.front().scaling();

    BatchSampler sampler(data.size(), cfg.train.batch_size, cfg.train.seed);
    std::vector<Matrix> eff_a(depth, Matrix(d, r)), eff_b(depth, Matrix(d, r));
    std::vector<LayerFactors> factors(depth);
    for (std::size_t l = 0; l < depth; ++l) {
        factors[l] = {&eff_a[l], &eff_b[l]};
    }
    AdapterGrads g = AdapterGrads::zeros_like(factors);
    double loss = 0.0;
    for (std::size_t step = 0; step < cfg.train.steps; ++step) {
        for (std::size_t l = 0; l < depth; ++l) {
            eff_a[l].fill(0.0);
            eff_b[l].fill(0.0);
            for (std::size_t e = 0; e < n_exp; ++e) {
                eff_a[l].add_scaled(out.experts[e].adapters[l].a, out.layer_weights[l][e]);
                eff_b[l].add_scaled(out.experts[e].adapters[l].b, out.layer_weights[l][e]);
            }
            g.a[l].fill(0.0);
            g.b[l].fill(0.0);
        }
        loss = loss_and_grads(model, factors, s, data, sampler.next(), &g, nullptr);
        if (!std::isfinite(loss)) {
            throw DivergenceError("poly_fit: non-finite loss", step);
        }
        const double lr = cfg.train.lr_at(step);
        const double logit_lr = cfg.logit_learning_rate * lr / cfg.train.learning_rate;
        for (std::size_t l = 0; l < depth; ++l) {
            const Vector& w = out.layer_weights[l];
            Vector gw(n_exp);
            for (std::size_t e = 0; e < n_exp; ++e) {
                gw[e] = dot(g.a[l].data(), out.experts[e].adapters[l].a.data()) +
                        dot(g.b[l].data(), out.experts[e].adapters[l].b.data());
            }
            if (n_exp > 1) {
                const double mean = dot(w, gw);
                for (std::size_t e = 0; e < n_exp; ++e) {
                    out.layer_logits[l][e] -= logit_lr * w[e] * (gw[e] - mean);
                }
            }
            if (cfg.tune_experts) {
                for (std::size_t e = 0; e < n_exp; ++e) {
                    out.experts[e].adapters[l].a.add_scaled(g.a[l], -lr * w[e]);
                    out.experts[e].adapters[l].b.add_scaled(g.b[l], -lr * w[e]);
                }
            }
            out.layer_weights[l] = softmax(out.layer_logits[l]);
        }
    }
    out.final_loss = loss;
    out.steps = cfg.train.steps;
    return out;
}

// ---------------------------------------------------------------------------
// LoraHub-style gradient-free search

/// Euclidean projection onto the probability simplex.
inline Vector project_to_simplex(std::span<const double> v) {
    Vector u(v.begin(), v.end());
    std::sort(u.begin(), u.end(), std::greater<>());
    double cum = 0.0, theta = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        cum += u[i];
        const double t = (cum - 1.0) / static_cast<double>(i + 1);
        if (u[i] - t > 0.0) {
            theta = t;
        }
    }
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::max(v[i] - theta, 0.0);
    }
    return out;
}

struct LoraHubConfig {
    std::size_t forward_budget = 0;      // example forward passes
    std::size_t parents = 4;             // mu
    std::size_t offspring = 8;           // lambda
    double sigma = 0.2;
    double data_fraction = 0.5;          // share of the training split used by the objective
    bool project_to_simplex = true;
    std::uint64_t seed = 0;
    std::optional<std::size_t> max_generations;

    /// Forward budget matched to `poly_steps` SGD steps of `batch` examples: a
    /// forward+backward counts as 2 passes, and the search gets 1.5x that.
    static std::size_t matched_budget(std::size_t poly_steps, std::size_t batch) {
        return static_cast<std::size_t>(1.5 * 2.0 * static_cast<double>(poly_steps * batch));
    }
};

struct LoraHubResult {
    Vector weights;             // weights applied in composition (projected when enabled)
    Vector raw_weights;         // search-space point
    Vector best_history;        // best objective after each generation (index 0: initialization)
    std::size_t evaluations = 0;
    std::size_t generations = 0;
};

/// (mu + lambda) evolution strategy over one weight vector shared by all layers.
/// Objective: mean 0.5||y - yhat||^2 of the composed expert on a fixed seeded
/// subset of the training split. Starts from uniform weights.
inline LoraHubResult lorahub_fit(const Library& lib, const ToyModel& model, const Split& data, const LoraHubConfig& cfg) {
    if (lib.experts.empty()) {
        throw ContractError("lorahub_fit: empty library");
    }
    if (data.empty()) {
        throw ContractError("lorahub_fit: empty dataset");
    }
    const std::size_t n_exp = lib.size();
    LoraHubResult out;
    if (n_exp == 1) {
        out.weights = out.raw_weights = {1.0};
        return out;
    }
    SplitMix64 rng(cfg.seed);
    const std::size_t subset = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(cfg.data_fraction * static_cast<double>(data.size()))));
    std::vector<std::size_t> rows = rng.permutation(data.size());
    rows.resize(std::min(subset, data.size()));
    std::sort(rows.begin(), rows.end());

    const std::size_t eval_budget = cfg.forward_budget / rows.size();
    if (eval_budget < cfg.offspring || cfg.offspring == 0 || cfg.parents == 0) {
        throw ContractError("lorahub_fit: budget of " + std::to_string(eval_budget) +
                            " evaluations is smaller than the population (" + std::to_string(cfg.offspring) + ")");
    }

    auto to_weights = [&](const Vector& raw) {
        if (cfg.project_to_simplex) {
            return project_to_simplex(raw);
        }
        const double sum = std::accumulate(raw.begin(), raw.end(), 0.0);
        Vector w = raw;
        if (std::abs(sum) > 1e-12) {
            for (double& v : w) {
                v /= sum;
            }
        }
        return w;
    };
    auto objective = [&](const Vector& raw) {
        const Expert e = compose_per_layer(lib.experts, std::vector<Vector>(model.depth(), to_weights(raw)));
        const std::vector<LayerFactors> f = factors_of(e);
        ++out.evaluations;
        return loss_and_grads(model, f, e.scaling(), data, rows, nullptr, nullptr);
    };

    struct Candidate {
        Vector raw;
        double value;
    };
    std::vector<Candidate> parents{{Vector(n_exp, 1.0 / static_cast<double>(n_exp)), 0.0}};
    parents[0].value = objective(parents[0].raw);
    out.best_history.push_back(parents[0].value);

    std::size_t generations = (eval_budget - 1) / cfg.offspring;
    if (cfg.max_generations) {
        generations = std::min(generations, *cfg.max_generations);
    }
    for (std::size_t gen = 0; gen < generations; ++gen) {
        std::vector<Candidate> pool = parents;
        for (std::size_t c = 0; c < cfg.offspring; ++c) {
            const Candidate& p = parents[rng.uniform_index(parents.size())];
            Vector child = p.raw;
            for (double& v : child) {
                v += rng.normal(0.0, cfg.sigma);
            }
            const double val = objective(child);
            pool.push_back({std::move(child), std::isfinite(val) ? val : std::numeric_limits<double>::infinity()});
        }
        std::stable_sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) { return a.value < b.value; });
        pool.resize(std::min(cfg.parents, pool.size()));
        parents = std::move(pool);
        out.best_history.push_back(parents.front().value);
    }
    out.generations = generations;
    out.raw_weights = parents.front().raw;
    out.weights = to_weights(out.raw_weights);
    return out;
}

}  // namespace modlib
