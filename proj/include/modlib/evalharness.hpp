// SPDX-License-Identifier: Apache-2.0
//
// Experiments over libraries: weight-similarity vs transfer, norm ratios of
// in-distribution vs random experts, upstream / zero-shot / supervised
// evaluation, cluster-count sweeps and clustering ablations. Results are plain
// structs with CSV (and optional SVG) writers; every run is a deterministic
// function of its seeds.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "modlib/adapters.hpp"
#include "modlib/dataset.hpp"
#include "modlib/error.hpp"
#include "modlib/hash.hpp"
#include "modlib/librarian.hpp"
#include "modlib/linalg.hpp"
#include "modlib/rng.hpp"
#include "modlib/router.hpp"
#include "modlib/synthtasks.hpp"
#include "modlib/toymodel.hpp"

namespace modlib {

// ---------------------------------------------------------------------------
// Statistics

inline double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ContractError("pearson: need two equal-length samples of size >= 2");
    }
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

/// Ranks starting at 1; ties share their average rank.
inline Vector average_ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    Vector r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
    const Vector rx = average_ranks(x);
    const Vector ry = average_ranks(y);
    return pearson(rx, ry);
}

inline double median(Vector v) {
    if (v.empty()) {
        throw ContractError("median: empty sample");
    }
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Hash of every factor at full precision plus names and provenance.
inline std::string library_digest(const Library& lib) {
    Sha256 h;
    h.update("modlib-library-digest-v1");
    h.update(lib.base_model_fingerprint);
    for (const Expert& e : lib.experts) {
        h.update(e.name);
        h.update(to_string(e.provenance.tag));
        for (int t : e.provenance.member_tasks) {
            h.update_u64(static_cast<std::uint64_t>(t));
        }
        for (const LoraAdapter& ad : e.adapters) {
            h.update_f64(ad.a.data()).update_f64(ad.b.data());
            h.update_f64(std::span<const double>(&ad.scaling, 1));
        }
    }
    return h.hex();
}

// ---------------------------------------------------------------------------
// Weight similarity vs transfer

struct TransferRecord {
    int task_i = 0;
    int task_j = 0;
    bool same_cluster = false;
    double weight_cosine_similarity = 0.0;
    double transfer_delta = 0.0;  // joint minus private avg log-likelihood, averaged over both test sets
    bool diverged = false;
};

struct TransferResult {
    std::vector<TransferRecord> records;
    double pearson = 0.0;
    double spearman = 0.0;
    std::size_t excluded = 0;
};

struct TransferConfig {
    std::size_t n_pairs = 20;
    std::size_t steps_per_task = 300;  // private N; the joint adapter gets 2N
    BuildConfig build{};
    std::uint64_t seed = 0;
};

/// Samples task pairs (alternating same / different planted cluster when labels
/// are given), trains two private adapters and a joint adapter on the union per
/// pair, and correlates flattened-weight cosine similarity with transfer.
inline TransferResult run_transfer_experiment(const ToyModel& model, std::span<const TaskDataset* const> tasks,
                                              std::span<const std::size_t> planted, const TransferConfig& cfg) {
    if (cfg.n_pairs < 2) {
        throw ContractError("transfer experiment: n_pairs must be >= 2");
    }
    if (tasks.size() < 2) {
        throw ContractError("transfer experiment: need at least two tasks");
    }
    SplitMix64 rng(derive_seed(cfg.seed, {0x7A}));
    std::set<std::pair<std::size_t, std::size_t>> seen;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    const std::size_t max_pairs = tasks.size() * (tasks.size() - 1) / 2;
    std::size_t guard = 0;
    while (pairs.size() < std::min(cfg.n_pairs, max_pairs) && guard++ < 100000) {
        std::size_t a = rng.uniform_index(tasks.size());
        std::size_t b = rng.uniform_index(tasks.size());
        if (a == b) {
            continue;
        }
        if (a > b) {
            std::swap(a, b);
        }
        if (!planted.empty()) {
            const bool want_same = pairs.size() % 2 == 0;
            if ((planted[a] == planted[b]) != want_same) {
                continue;
            }
        }
        if (seen.insert({a, b}).second) {
            pairs.emplace_back(a, b);
        }
    }

    TransferResult out;
    const BuildBudget budget{cfg.steps_per_task, 0.4};
    for (const auto& [a, b] : pairs) {
        TransferRecord rec;
        rec.task_i = tasks[a]->task_id;
        rec.task_j = tasks[b]->task_id;
        rec.same_cluster = !planted.empty() && planted[a] == planted[b];
        try {
            const TaskDataset* pair_sets[2] = {tasks[a], tasks[b]};
            const Library priv = build_private(model, pair_sets, budget, cfg.build);
            const Library joint = build_shared(model, pair_sets, budget, cfg.build);
            const Vector fa = flatten_expert(priv.experts[0]).values;
            const Vector fb = flatten_expert(priv.experts[1]).values;
            const Vector both[2] = {fa, fb};
            rec.weight_cosine_similarity = cosine_similarity_matrix(std::span<const Vector>(both))(0, 1);
            double delta = 0.0;
            for (std::size_t k = 0; k < 2; ++k) {
                const Split& test = pair_sets[k]->test;
                delta += evaluate(model, &joint.experts[0], nullptr, test).avg_log_likelihood -
                         evaluate(model, &priv.experts[k], nullptr, test).avg_log_likelihood;
            }
            rec.transfer_delta = 0.5 * delta;
        } catch (const DivergenceError&) {
            rec.diverged = true;
            ++out.excluded;
        }
        out.records.push_back(rec);
    }
    Vector xs, ys;
    for (const TransferRecord& r : out.records) {
        if (!r.diverged) {
            xs.push_back(r.weight_cosine_similarity);
            ys.push_back(r.transfer_delta);
        }
    }
    if (xs.size() >= 2) {
        out.pearson = pearson(xs, ys);
        out.spearman = spearman(xs, ys);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Norm ratio

struct Histogram {
    Vector edges;  // bins + 1
    std::vector<std::size_t> counts;
};

inline Histogram histogram(std::span<const double> v, std::size_t bins, double lo, double hi) {
    if (bins == 0 || !(hi > lo)) {
        throw ContractError("histogram: need bins >= 1 and hi > lo");
    }
    Histogram h{Vector(bins + 1), std::vector<std::size_t>(bins, 0)};
    for (std::size_t i = 0; i <= bins; ++i) {
        h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
    }
    for (double x : v) {
        auto b = static_cast<std::ptrdiff_t>(std::floor((x - lo) / (hi - lo) * static_cast<double>(bins)));
        b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

struct NormRatioSample {
    int task_id = 0;
    std::size_t example = 0;
    double ratio = 0.0;
};

struct NormRatioReport {
    std::vector<NormRatioSample> samples;
    Histogram histogram;
    double fraction_above_one = 0.0;
    std::size_t layers = 0;
    std::size_t excluded = 0;
};

/// For each sample: expert i uniform, an example of its task (validation split),
/// hidden states propagated through expert i; at every layer a fresh j != i is
/// drawn and ||s A_i B_i^T h|| / ||s A_j B_j^T h|| is averaged over layers.
inline NormRatioReport run_norm_analysis(const Library& lib, const ToyModel& model,
                                         const std::function<const Split&(int task_id)>& data, std::size_t n_samples,
                                         std::uint64_t seed) {
    if (n_samples == 0) {
        throw ContractError("norm analysis: n_samples must be >= 1");
    }
    if (lib.size() < 2) {
        throw ContractError("norm analysis: need at least two experts");
    }
    for (const Expert& e : lib.experts) {
        if (e.provenance.member_tasks.size() != 1) {
            throw ContractError("norm analysis: expects a private library (one task per expert)");
        }
    }
    SplitMix64 rng(derive_seed(seed, {0x4E}));
    NormRatioReport rep;
    rep.layers = model.depth();
    const std::size_t d = model.dim();
    Vector zi(d), zj(d);
    std::size_t above = 0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        const std::size_t i = rng.uniform_index(lib.size());
        const Expert& ei = lib.experts[i];
        const int task = ei.provenance.member_tasks.front();
        const Split& split = data(task);
        const std::size_t row = rng.uniform_index(split.size());
        const ForwardResult f = forward(model, &ei, nullptr, split.x.row(row));
        double r = 0.0;
        bool bad = false;
        for (std::size_t l = 0; l < model.depth(); ++l) {
            std::size_t j = rng.uniform_index(lib.size() - 1);
            if (j >= i) {
                ++j;
            }
            std::fill(zi.begin(), zi.end(), 0.0);
            std::fill(zj.begin(), zj.end(), 0.0);
            const LoraAdapter& ai = ei.adapters[l];
            const LoraAdapter& aj = lib.experts[j].adapters[l];
            detail::add_lora(ai.a, ai.b, ai.scaling, f.trace.hidden[l], zi);
            detail::add_lora(aj.a, aj.b, aj.scaling, f.trace.hidden[l], zj);
            const double den = norm2(zj);
            if (den < 1e-12) {
                bad = true;
                continue;
            }
            r += norm2(zi) / den;
        }
        if (bad) {
            ++rep.excluded;
            continue;
        }
        r /= static_cast<double>(model.depth());
        rep.samples.push_back({task, row, r});
        above += r > 1.0 ? 1 : 0;
    }
    Vector ratios;
    for (const NormRatioSample& s : rep.samples) {
        ratios.push_back(s.ratio);
    }
    const double hi = ratios.empty() ? 2.0 : std::max(2.0, std::ceil(*std::max_element(ratios.begin(), ratios.end())));
    rep.histogram = histogram(ratios, 40, 0.0, hi);
    rep.fraction_above_one = rep.samples.empty() ? 0.0 : static_cast<double>(above) / static_cast<double>(rep.samples.size());
    return rep;
}

// ---------------------------------------------------------------------------
// Evaluation reports

struct TaskMetrics {
    int task_id = 0;
    double mse = 0.0;
    double avg_log_likelihood = 0.0;
};

struct EvalReport {
    std::string name;         // e.g. "private-arrow"
    std::string fingerprint;  // library digest, router and seeds
    std::vector<TaskMetrics> per_task;
    double mean_log_likelihood = 0.0;
    double mean_mse = 0.0;

    void finalize() {
        double ll = 0.0, mse = 0.0;
        for (const TaskMetrics& t : per_task) {
            ll += t.avg_log_likelihood;
            mse += t.mse;
        }
        const double n = per_task.empty() ? 1.0 : static_cast<double>(per_task.size());
        mean_log_likelihood = ll / n;
        mean_mse = mse / n;
    }
};

inline std::string eval_fingerprint(const Library* lib, std::string_view router, std::uint64_t seed) {
    Sha256 h;
    h.update(lib != nullptr ? library_digest(*lib) : std::string("base"));
    h.update(router);
    h.update_u64(seed);
    return h.hex();
}

enum class SplitKind { train, valid, test };

inline const Split& split_of(const TaskDataset& ds, SplitKind k) {
    switch (k) {
    case SplitKind::train: return ds.train;
    case SplitKind::valid: return ds.valid;
    case SplitKind::test: return ds.test;
    }
    return ds.test;
}

/// Evaluates `router` over `lib` on each task's chosen split.
inline EvalReport evaluate_router(const ToyModel& model, const Library& lib, const Router& router,
                                  std::span<const TaskDataset* const> tasks, SplitKind split, std::string name) {
    EvalReport rep;
    rep.name = std::move(name);
    rep.fingerprint = eval_fingerprint(&lib, to_string(router.kind), 0);
    for (const TaskDataset* t : tasks) {
        const Metrics m = evaluate_routed(model, lib, router.mixer(t->task_id), split_of(*t, split));
        rep.per_task.push_back({t->task_id, m.mse, m.avg_log_likelihood});
    }
    rep.finalize();
    return rep;
}

/// Upstream: every training task's validation split under each router.
inline std::vector<EvalReport> run_upstream_eval(const ToyModel& model, const Library& lib,
                                                 std::span<const Router> routers,
                                                 std::span<const TaskDataset* const> train_tasks) {
    std::vector<EvalReport> out;
    for (const Router& r : routers) {
        out.push_back(evaluate_router(model, lib, r, train_tasks, SplitKind::valid,
                                      lib.builder + "-" + std::string(to_string(r.kind))));
    }
    return out;
}

/// Zero-shot on held-out tasks (test split). `lib == nullptr` evaluates the base
/// model. The library digest is checked before and after; a change is fatal.
inline EvalReport run_zeroshot_eval(const ToyModel& model, const Library* lib, const Router* router,
                                    std::span<const TaskDataset* const> heldout) {
    EvalReport rep;
    if (lib == nullptr) {
        rep.name = "base";
        rep.fingerprint = eval_fingerprint(nullptr, "none", 0);
        for (const TaskDataset* t : heldout) {
            const Metrics m = evaluate(model, nullptr, nullptr, t->test);
            rep.per_task.push_back({t->task_id, m.mse, m.avg_log_likelihood});
        }
        rep.finalize();
        return rep;
    }
    for (const TaskDataset* t : heldout) {
        for (const Expert& e : lib->experts) {
            if (e.provenance.covers(t->task_id) && e.provenance.tag != BuilderTag::poly) {
                throw ContractError("zero-shot: held-out task " + std::to_string(t->task_id) + " was used to build the library");
            }
        }
    }
    const std::string before = library_digest(*lib);
    rep = evaluate_router(model, *lib, *router, heldout, SplitKind::test,
                          lib->builder + "-" + std::string(to_string(router->kind)));
    if (library_digest(*lib) != before) {
        throw IntegrityError("zero-shot evaluation mutated the library");
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Supervised adaptation

enum class AdaptMethod { poly, polyz, lorahub, none, shared_init };

inline std::string_view to_string(AdaptMethod m) noexcept {
    switch (m) {
    case AdaptMethod::poly: return "poly";
    case AdaptMethod::polyz: return "polyz";
    case AdaptMethod::lorahub: return "lorahub";
    case AdaptMethod::none: return "none";
    case AdaptMethod::shared_init: return "shared-init";
    }
    return "unknown";
}

inline AdaptMethod adapt_method_from_string(std::string_view s) {
    if (s == "poly") return AdaptMethod::poly;
    if (s == "polyz") return AdaptMethod::polyz;
    if (s == "lorahub") return AdaptMethod::lorahub;
    if (s == "none") return AdaptMethod::none;
    if (s == "shared-init" || s == "shared_init") return AdaptMethod::shared_init;
    throw ContractError("unknown adaptation method '" + std::string(s) + "'");
}

struct AdaptConfig {
    TrainConfig train{.steps = 300, .learning_rate = 3e-2, .batch_size = 32, .seed = 0};
    double logit_learning_rate = 0.5;
    AdapterConfig adapter{};  // for method none
    LoraHubConfig lorahub{};  // forward_budget 0 -> matched to the Poly budget
};

/// Fits `method` on the (subsampled) training split of each held-out task and
/// evaluates on its untouched test split.
inline EvalReport run_supervised_adaptation(const ToyModel& model, const Library* lib, AdaptMethod method,
                                            std::span<const TaskDataset* const> heldout, double data_fraction,
                                            std::uint64_t seed, const AdaptConfig& cfg = {}) {
    if (!(data_fraction > 0.0) || data_fraction > 1.0) {
        throw ContractError("supervised adaptation: data_fraction must be in (0, 1]");
    }
    if (method != AdaptMethod::none && lib == nullptr) {
        throw ContractError("supervised adaptation: method '" + std::string(to_string(method)) + "' needs a library");
    }
    EvalReport rep;
    rep.name = std::string(to_string(method));
    rep.fingerprint = eval_fingerprint(lib, rep.name, seed);
    for (const TaskDataset* t : heldout) {
        const TaskDataset sub = subsample_fraction(*t, data_fraction, seed);
        const std::uint64_t tseed = derive_seed(seed, {0xAD, static_cast<std::uint64_t>(t->task_id)});
        TrainConfig tc = cfg.train;
        tc.seed = tseed;
        Expert fitted;
        switch (method) {
        case AdaptMethod::poly:
        case AdaptMethod::polyz: {
            const PolyFitConfig pc{tc, cfg.logit_learning_rate, method == AdaptMethod::poly};
            fitted = poly_fit(*lib, model, sub.train, pc).composed();
            break;
        }
        case AdaptMethod::lorahub: {
            LoraHubConfig hc = cfg.lorahub;
            if (hc.forward_budget == 0) {
                hc.forward_budget = LoraHubConfig::matched_budget(tc.steps, tc.batch_size);
            }
            hc.seed = tseed;
            const LoraHubResult r = lorahub_fit(*lib, model, sub.train, hc);
            fitted = compose_per_layer(lib->experts, std::vector<Vector>(model.depth(), r.weights), "lorahub");
            break;
        }
        case AdaptMethod::none:
            fitted = train_adapter(model, sub.train, tc, fresh_expert(model, cfg.adapter, tseed, "none"));
            break;
        case AdaptMethod::shared_init: {
            const Vector w = mu_route(lib->size()).weights;
            fitted = train_adapter(model, sub.train, tc, compose(lib->experts, w, "shared-init"));
            break;
        }
        }
        const Metrics m = evaluate(model, &fitted, nullptr, t->test);
        rep.per_task.push_back({t->task_id, m.mse, m.avg_log_likelihood});
    }
    rep.finalize();
    return rep;
}

// ---------------------------------------------------------------------------
// Cluster sweep and ablation

struct SweepRow {
    std::size_t k = 0;
    double upstream_valid = 0.0;  // oracle routing over the cluster experts, training tasks' valid splits
    double heldout = 0.0;         // zero-shot held-out test metric under the configured router
    double ari = 0.0;
};

struct ExperimentContext {
    const ToyModel* model = nullptr;
    std::vector<const TaskDataset*> train;
    std::vector<const TaskDataset*> heldout;
    std::vector<std::size_t> planted;  // aligned with train
    BuildBudget budget{};
    BuildConfig build{};
    RouterOptions heldout_router{};
};

inline Router router_for(const ExperimentContext& ctx, const RouterOptions& opt, const Library& lib,
                         std::span<const Split> expert_train = {}) {
    std::vector<const Split*> data;
    for (const Split& s : expert_train) {
        data.push_back(&s);
    }
    return make_router(opt, lib, *ctx.model, data, ctx.train);
}

inline std::vector<SweepRow> run_cluster_sweep(const ExperimentContext& ctx, std::span<const std::size_t> k_values) {
    for (std::size_t k : k_values) {
        if (k == 0 || k > ctx.train.size()) {
            throw ContractError("cluster sweep: K=" + std::to_string(k) + " out of range");
        }
    }
    std::vector<SweepRow> rows;
    for (std::size_t k : k_values) {
        const ClusteredBuild cb = build_mbc(*ctx.model, ctx.train, ctx.budget, k, ctx.build, ctx.planted);
        RouterOptions oracle;
        oracle.kind = RouterKind::oracle;
        const Router up = router_for(ctx, oracle, cb.library);
        const Router held = router_for(ctx, ctx.heldout_router, cb.library, cb.expert_train);
        SweepRow row;
        row.k = k;
        row.upstream_valid =
            evaluate_router(*ctx.model, cb.library, up, ctx.train, SplitKind::valid, "upstream").mean_log_likelihood;
        row.heldout = run_zeroshot_eval(*ctx.model, &cb.library, &held, ctx.heldout).mean_log_likelihood;
        row.ari = cb.report.ari_vs_planted;
        rows.push_back(row);
    }
    return rows;
}

struct AblationRow {
    ClusterMethod method = ClusterMethod::mbc;
    double heldout = 0.0;
    double mean_similarity = 0.0;
    double recomputed_similarity = 0.0;
    double ari = 0.0;
};

inline std::vector<AblationRow> run_cluster_ablation(const ExperimentContext& ctx, std::size_t k) {
    std::vector<AblationRow> rows;
    for (ClusterMethod m : {ClusterMethod::mbc, ClusterMethod::random_task, ClusterMethod::random_examples,
                            ClusterMethod::embeddings}) {
        const ClusteredBuild cb = build_clustered(*ctx.model, ctx.train, ctx.budget, k, m, ctx.build, ctx.planted);
        const Router held = router_for(ctx, ctx.heldout_router, cb.library, cb.expert_train);
        AblationRow row;
        row.method = m;
        row.heldout = run_zeroshot_eval(*ctx.model, &cb.library, &held, ctx.heldout).mean_log_likelihood;
        row.mean_similarity = cb.report.mean_pairwise_cluster_similarity;
        row.recomputed_similarity = mean_pairwise_similarity(cb.library.experts);
        row.ari = cb.report.ari_vs_planted;
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Pipeline defaults and task pools

/// Every knob of the end-to-end pipeline; the CLI config file maps onto this.
struct PipelineConfig {
    BenchmarkConfig benchmark{};
    PretrainConfig pretrain = [] {
        PretrainConfig p;
        p.train.steps = 0;
        return p;
    }();
    BuildConfig build{};
    BuildBudget budget{};
    std::size_t k = 4;
    RouterOptions router{};
    AdaptConfig adapt{};
    double data_fraction = 1.0;
    TransferConfig transfer{};
    std::size_t norm_samples = 500;
    std::vector<std::size_t> k_values{1, 2, 4, 8, 16};
    std::uint64_t eval_seed = 0;

    /// Sets benchmark, pretraining, build, transfer and eval seeds from one value.
    void set_seed(std::uint64_t s) {
        benchmark.master_seed = s;
        pretrain.train.seed = s;
        build.seed = s;
        transfer.seed = s;
        transfer.build.seed = s;
        eval_seed = s;
    }
};

/// Non-owning view of the training and held-out tasks.
struct TaskPool {
    std::vector<const TaskDataset*> train;
    std::vector<const TaskDataset*> heldout;
    std::vector<std::size_t> planted;  // aligned with train

    const TaskDataset& task(int id) const {
        for (const auto* list : {&train, &heldout}) {
            for (const TaskDataset* t : *list) {
                if (t->task_id == id) {
                    return *t;
                }
            }
        }
        throw ContractError("unknown task id " + std::to_string(id));
    }

    Split train_mixture() const {
        std::vector<const Split*> parts;
        for (const TaskDataset* t : train) {
            parts.push_back(&t->train);
        }
        return concat_splits(parts);
    }
};

inline TaskPool make_pool(const Benchmark& b, const HeldoutSplit& hs) {
    TaskPool p;
    for (int id : hs.train_tasks) {
        p.train.push_back(&b.dataset(id));
        p.planted.push_back(b.spec(id).cluster_id);
    }
    for (int id : hs.heldout_tasks) {
        p.heldout.push_back(&b.dataset(id));
    }
    return p;
}

/// Generated benchmark, its split and the frozen base; held by pointer so pool views stay valid.
struct Workspace {
    Benchmark bench;
    HeldoutSplit split;
    TaskPool pool;
    ToyModel base;
};

inline std::unique_ptr<Workspace> make_workspace(const PipelineConfig& cfg) {
    auto ws = std::make_unique<Workspace>();
    ws->bench = generate_benchmark(cfg.benchmark);
    ws->split = heldout_split(ws->bench.specs, cfg.benchmark);
    ws->pool = make_pool(ws->bench, ws->split);
    ws->base = pretrain_base(cfg.pretrain, ws->pool.train_mixture());
    return ws;
}

inline ExperimentContext make_context(const PipelineConfig& cfg, const TaskPool& pool, const ToyModel& base) {
    ExperimentContext ctx;
    ctx.model = &base;
    ctx.train = pool.train;
    ctx.heldout = pool.heldout;
    ctx.planted = pool.planted;
    ctx.budget = cfg.budget;
    ctx.build = cfg.build;
    ctx.heldout_router = cfg.router;
    return ctx;
}

/// Joined training data of each expert's member tasks (for centroid prototypes of a loaded library).
inline std::vector<Split> member_training_data(const Library& lib, const TaskPool& pool) {
    std::vector<Split> out;
    for (const Expert& e : lib.experts) {
        std::vector<const Split*> parts;
        for (int id : e.provenance.member_tasks) {
            parts.push_back(&pool.task(id).train);
        }
        out.push_back(concat_splits(parts));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Output

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

}  // namespace detail

inline void write_csv(std::ostream& os, const TransferResult& r) {
    os << "task_i,task_j,same_cluster,weight_cosine_similarity,transfer_delta,diverged\n";
    for (const TransferRecord& t : r.records) {
        os << t.task_i << ',' << t.task_j << ',' << (t.same_cluster ? 1 : 0) << ','
           << detail::fmt(t.weight_cosine_similarity) << ',' << detail::fmt(t.transfer_delta) << ','
           << (t.diverged ? 1 : 0) << '\n';
    }
}

inline void write_csv(std::ostream& os, const NormRatioReport& r) {
    os << "task_id,example,ratio\n";
    for (const NormRatioSample& s : r.samples) {
        os << s.task_id << ',' << s.example << ',' << detail::fmt(s.ratio) << '\n';
    }
}

inline void write_csv(std::ostream& os, std::span<const EvalReport> reports) {
    os << "report,task_id,mse,avg_log_likelihood\n";
    for (const EvalReport& r : reports) {
        for (const TaskMetrics& t : r.per_task) {
            os << r.name << ',' << t.task_id << ',' << detail::fmt(t.mse) << ',' << detail::fmt(t.avg_log_likelihood)
               << '\n';
        }
        os << r.name << ",mean," << detail::fmt(r.mean_mse) << ',' << detail::fmt(r.mean_log_likelihood) << '\n';
    }
}

inline void write_csv(std::ostream& os, std::span<const SweepRow> rows) {
    os << "k,upstream_valid_log_likelihood,heldout_log_likelihood,ari\n";
    for (const SweepRow& r : rows) {
        os << r.k << ',' << detail::fmt(r.upstream_valid) << ',' << detail::fmt(r.heldout) << ',' << detail::fmt(r.ari)
           << '\n';
    }
}

inline void write_csv(std::ostream& os, std::span<const AblationRow> rows) {
    os << "method,heldout_log_likelihood,mean_cluster_similarity,recomputed_similarity,ari\n";
    for (const AblationRow& r : rows) {
        os << to_string(r.method) << ',' << detail::fmt(r.heldout) << ',' << detail::fmt(r.mean_similarity) << ','
           << detail::fmt(r.recomputed_similarity) << ',' << detail::fmt(r.ari) << '\n';
    }
}

/// Minimal SVG scatter plot (transfer experiment).
inline void write_scatter_svg(std::ostream& os, std::span<const double> x, std::span<const double> y,
                              std::string_view xlabel, std::string_view ylabel) {
    constexpr double W = 480, H = 360, M = 48;
    auto [xmin_it, xmax_it] = std::minmax_element(x.begin(), x.end());
    auto [ymin_it, ymax_it] = std::minmax_element(y.begin(), y.end());
    const double x0 = x.empty() ? 0 : *xmin_it, x1 = x.empty() ? 1 : *xmax_it;
    const double y0 = y.empty() ? 0 : *ymin_it, y1 = y.empty() ? 1 : *ymax_it;
    auto sx = [&](double v) { return M + (W - 2 * M) * (x1 > x0 ? (v - x0) / (x1 - x0) : 0.5); };
    auto sy = [&](double v) { return H - M - (H - 2 * M) * (y1 > y0 ? (v - y0) / (y1 - y0) : 0.5); };
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < x.size(); ++i) {
        os << "<circle cx=\"" << detail::fmt(sx(x[i])) << "\" cy=\"" << detail::fmt(sy(y[i]))
           << "\" r=\"3\" fill=\"steelblue\"/>\n";
    }
    os << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
    os << "<text x=\"14\" y=\"" << H / 2 << "\" transform=\"rotate(-90 14 " << H / 2 << ")\" text-anchor=\"middle\">"
       << ylabel << "</text>\n";
    os << "</svg>\n";
}

/// Minimal SVG histogram (norm ratios).
inline void write_histogram_svg(std::ostream& os, const Histogram& h, std::string_view xlabel) {
    constexpr double W = 480, H = 360, M = 48;
    const std::size_t top = h.counts.empty() ? 1 : std::max<std::size_t>(1, *std::max_element(h.counts.begin(), h.counts.end()));
    const double bw = (W - 2 * M) / static_cast<double>(std::max<std::size_t>(1, h.counts.size()));
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        const double bh = (H - 2 * M) * static_cast<double>(h.counts[i]) / static_cast<double>(top);
        os << "<rect x=\"" << detail::fmt(M + bw * static_cast<double>(i)) << "\" y=\"" << detail::fmt(H - M - bh)
           << "\" width=\"" << detail::fmt(bw) << "\" height=\"" << detail::fmt(bh) << "\" fill=\"steelblue\"/>\n";
    }
    os << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel << " ["
       << detail::fmt(h.edges.front()) << ", " << detail::fmt(h.edges.back()) << "]</text>\n";
    os << "</svg>\n";
}

}  // namespace modlib
