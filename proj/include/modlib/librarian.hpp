// SPDX-License-Identifier: Apache-2.0
//
// Library construction: private, shared, clustered (MBC and ablation clusterings)
// and Poly. Builders are deterministic in (tasks, budget, seed) and account for
// every adapter SGD step they spend.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
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
#include "modlib/router.hpp"
#include "modlib/toymodel.hpp"

namespace modlib {

struct BuildBudget {
    std::size_t steps_per_task = 300;   // N
    double clustering_fraction = 0.4;

    std::size_t clustering_steps() const {
        if (!(clustering_fraction > 0.0 && clustering_fraction < 1.0)) {
            throw ContractError("BuildBudget: clustering_fraction must be in (0, 1)");
        }
        return static_cast<std::size_t>(std::llround(clustering_fraction * static_cast<double>(steps_per_task)));
    }
};

struct BuildConfig {
    AdapterConfig adapter{};
    TrainConfig train{.steps = 0, .learning_rate = 3e-2, .batch_size = 32, .seed = 0};  // steps set by the builder
    std::uint64_t seed = 0;
    bool warm_start = true;              // stage-2 experts start from the mean of member stage-1 factors
    bool kmeans_on_similarity = true;    // false: k-means directly on the reduced scores
    std::optional<std::size_t> reduce_dim;  // default min(T, 64)
    double poly_logit_learning_rate = 0.5;
    bool shared_init = true;             // every expert starts from the same seeded factors
};

namespace detail {

inline std::uint64_t members_seed(std::uint64_t seed, std::uint64_t tag, std::span<const int> members) {
    std::uint64_t s = derive_seed(seed, {tag});
    for (int m : members) {
        s = derive_seed(s, {static_cast<std::uint64_t>(m)});
    }
    return s;
}

// Expert init and batch-order seeds depend only on the member set, so reordering
// the task list never changes an expert.
inline std::uint64_t init_seed(const BuildConfig& cfg, std::span<const int> members) {
    return cfg.shared_init ? derive_seed(cfg.seed, {1}) : members_seed(cfg.seed, 1, members);
}
inline std::uint64_t data_seed(std::uint64_t seed, std::span<const int> members) { return members_seed(seed, 2, members); }

inline std::vector<const TaskDataset*> sorted_by_id(std::span<const TaskDataset* const> tasks) {
    std::vector<const TaskDataset*> v(tasks.begin(), tasks.end());
    std::sort(v.begin(), v.end(), [](const TaskDataset* a, const TaskDataset* b) { return a->task_id < b->task_id; });
    return v;
}

inline Split joined_train(std::span<const TaskDataset* const> tasks) {
    std::vector<const Split*> parts;
    for (const TaskDataset* t : sorted_by_id(tasks)) {
        parts.push_back(&t->train);
    }
    return concat_splits(parts);
}

inline std::vector<int> ids_of(std::span<const TaskDataset* const> tasks) {
    std::vector<int> ids;
    for (const TaskDataset* t : sorted_by_id(tasks)) {
        ids.push_back(t->task_id);
    }
    return ids;
}

inline Library empty_library(const ToyModel& model, const BuildConfig& cfg, std::string builder) {
    Library lib;
    lib.base_model_fingerprint = model.fingerprint;
    lib.rank = cfg.adapter.rank;
    lib.scaling = cfg.adapter.scaling();
    lib.builder = std::move(builder);
    lib.seeds["build"] = cfg.seed;
    return lib;
}

inline Expert train_on(const ToyModel& model, const Split& data, const BuildConfig& cfg, std::size_t steps,
                       Expert init, std::span<const int> members) {
    TrainConfig tc = cfg.train;
    tc.steps = steps;
    tc.seed = data_seed(cfg.seed, members);
    return train_adapter(model, data, tc, std::move(init));
}

}  // namespace detail

inline std::string task_expert_name(int task_id) { return "task-" + std::to_string(task_id); }

/// One expert per task, each trained for N steps from its own seeded init.
inline Library build_private(const ToyModel& model, std::span<const TaskDataset* const> tasks, const BuildBudget& budget,
                             const BuildConfig& cfg) {
    Library lib = detail::empty_library(model, cfg, "private");
    for (const TaskDataset* t : tasks) {
        const std::vector<int> members{t->task_id};
        Expert init = fresh_expert(model, cfg.adapter, detail::init_seed(cfg, members), task_expert_name(t->task_id));
        Expert e = detail::train_on(model, t->train, cfg, budget.steps_per_task, std::move(init), members);
        e.provenance = {BuilderTag::private_task, members, {}};
        lib.experts.push_back(std::move(e));
        lib.training_steps += budget.steps_per_task;
    }
    return lib;
}

/// A single expert on the union of all training data for T*N steps.
inline Library build_shared(const ToyModel& model, std::span<const TaskDataset* const> tasks, const BuildBudget& budget,
                            const BuildConfig& cfg) {
    if (tasks.empty()) {
        throw ContractError("build_shared: no tasks");
    }
    Library lib = detail::empty_library(model, cfg, "shared");
    const std::vector<int> members = detail::ids_of(tasks);
    const Split data = detail::joined_train(tasks);
    const std::size_t steps = budget.steps_per_task * tasks.size();
    Expert e = detail::train_on(model, data, cfg, steps,
                                fresh_expert(model, cfg.adapter, detail::init_seed(cfg, members), "shared"), members);
    e.provenance = {BuilderTag::shared, members, {}};
    lib.experts.push_back(std::move(e));
    lib.training_steps = steps;
    return lib;
}

// ---------------------------------------------------------------------------
// Clustering

enum class ClusterMethod { mbc, random_task, random_examples, embeddings };

inline std::string_view to_string(ClusterMethod m) noexcept {
    switch (m) {
    case ClusterMethod::mbc: return "mbc";
    case ClusterMethod::random_task: return "random_task";
    case ClusterMethod::random_examples: return "random_examples";
    case ClusterMethod::embeddings: return "embeddings";
    }
    return "unknown";
}

inline ClusterMethod cluster_method_from_string(std::string_view s) {
    if (s == "mbc") return ClusterMethod::mbc;
    if (s == "random_task" || s == "random-task") return ClusterMethod::random_task;
    if (s == "random_examples" || s == "random-examples") return ClusterMethod::random_examples;
    if (s == "embeddings") return ClusterMethod::embeddings;
    throw ContractError("unknown clustering method '" + std::string(s) + "'");
}

struct ClusteringReport {
    ClusterMethod method = ClusterMethod::mbc;
    ClusterAssignment assignment;        // over tasks, or over pooled examples for random_examples
    double mean_pairwise_cluster_similarity = 1.0;
    bool similarity_degenerate = false;  // K = 1: no pairs, reported as 1.0
    double ari_vs_planted = 0.0;
};

/// MBC: flatten -> svd_reduce -> cosine similarity -> k-means on the rows of S
/// (or on the reduced scores when cfg.kmeans_on_similarity is false).
inline ClusterAssignment mbc_cluster(std::span<const Expert> private_experts, std::size_t k, const BuildConfig& cfg) {
    const std::size_t t = private_experts.size();
    if (t == 0) {
        throw ContractError("mbc: private adapters missing");
    }
    if (k == 0 || k > t) {
        throw ContractError("mbc: K=" + std::to_string(k) + " must be in [1, T=" + std::to_string(t) + "]");
    }
    const FlatVector first = flatten_expert(private_experts.front());
    Matrix flat(t, first.values.size());
    for (std::size_t i = 0; i < t; ++i) {
        const FlatVector f = flatten_expert(private_experts[i]);
        std::copy(f.values.begin(), f.values.end(), flat.row(i).begin());
    }
    const std::size_t reduce = std::min(cfg.reduce_dim.value_or(std::min<std::size_t>(t, 64)), std::min(t, flat.cols()));
    const Matrix scores = svd_reduce(flat, reduce);
    const std::uint64_t km_seed = derive_seed(cfg.seed, {0xC1});
    if (!cfg.kmeans_on_similarity) {
        return kmeans(scores, k, km_seed);
    }
    return kmeans(cosine_similarity_matrix(scores).values, k, km_seed);
}

/// Uniform random partition of T tasks into K non-empty groups.
inline ClusterAssignment random_partition(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k == 0 || k > n) {
        throw ContractError("random partition: K must be in [1, n]");
    }
    SplitMix64 rng(seed);
    const std::vector<std::size_t> perm = rng.permutation(n);
    ClusterAssignment a;
    a.k = k;
    a.seed = seed;
    a.labels.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        a.labels[perm[i]] = i % k;  // balanced, every cluster non-empty
    }
    detail::canonicalize_labels(a.labels, k);
    return a;
}

/// k-means on each task's mean final hidden state of the base model.
inline ClusterAssignment embedding_cluster(const ToyModel& model, std::span<const TaskDataset* const> tasks,
                                           std::size_t k, const BuildConfig& cfg) {
    Matrix emb(tasks.size(), model.dim());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const Split& s = tasks[i]->train;
        for (std::size_t n = 0; n < s.size(); ++n) {
            const Vector h = forward(model, s.x.row(n)).final_hidden;
            for (std::size_t j = 0; j < h.size(); ++j) {
                emb(i, j) += h[j] / static_cast<double>(s.size());
            }
        }
    }
    return kmeans(emb, k, derive_seed(cfg.seed, {0xE3}));
}

inline double mean_pairwise_similarity(std::span<const Expert> experts, bool* degenerate = nullptr) {
    if (experts.size() < 2) {
        if (degenerate != nullptr) {
            *degenerate = true;
        }
        return 1.0;
    }
    std::vector<Vector> flat;
    for (const Expert& e : experts) {
        flat.push_back(flatten_expert(e).values);
    }
    const SimilarityMatrix s = cosine_similarity_matrix(std::span<const Vector>(flat));
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < s.n; ++i) {
        for (std::size_t j = i + 1; j < s.n; ++j) {
            sum += s(i, j);
            ++pairs;
        }
    }
    if (degenerate != nullptr) {
        *degenerate = false;
    }
    return sum / static_cast<double>(pairs);
}

struct ClusteredBuild {
    Library library;
    ClusteringReport report;
    Library stage1;                     // private adapters after n steps
    std::vector<Split> expert_train;    // joined training data of each expert (for CM)
};

/// Two-stage clustered build. Stage 1: private adapters for n = round(f N) steps.
/// Stage 2: one expert per cluster, warm-started from the mean of its members'
/// stage-1 factors and trained on the joined data for |c| (N - n) steps, so the
/// total matches the private build. `planted` (task-aligned) feeds the ARI.
inline ClusteredBuild build_clustered(const ToyModel& model, std::span<const TaskDataset* const> tasks,
                                      const BuildBudget& budget, std::size_t k, ClusterMethod method,
                                      const BuildConfig& cfg, std::span<const std::size_t> planted = {}) {
    const std::size_t t = tasks.size();
    if (k == 0 || k > t) {
        throw ContractError("build_clustered: K=" + std::to_string(k) + " must be in [1, T=" + std::to_string(t) + "]");
    }
    if (!planted.empty() && planted.size() != t) {
        throw DimensionError("build_clustered: planted labels must align with tasks");
    }
    const std::size_t n = budget.clustering_steps();
    const std::size_t rest = budget.steps_per_task - n;

    ClusteredBuild out;
    out.stage1 = build_private(model, tasks, BuildBudget{n, budget.clustering_fraction}, cfg);
    out.report.method = method;

    // Each cluster: member tasks, its training rows and the warm-start weights
    // of each task's stage-1 adapter.
    struct Group {
        std::vector<int> members;
        Split data;
        std::vector<double> warm;  // per task index
        std::size_t steps = 0;
    };
    std::vector<Group> groups(k);

    if (method == ClusterMethod::random_examples) {
        std::size_t total = 0;
        for (const TaskDataset* td : tasks) {
            total += td->train.size();
        }
        const ClusterAssignment a = random_partition(total, k, derive_seed(cfg.seed, {0xE7}));
        std::vector<std::vector<std::vector<std::size_t>>> rows(k, std::vector<std::vector<std::size_t>>(t));
        std::vector<std::size_t> example_planted;
        std::size_t off = 0;
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t r = 0; r < tasks[i]->train.size(); ++r) {
                rows[a.labels[off + r]][i].push_back(r);
                if (!planted.empty()) {
                    example_planted.push_back(planted[i]);
                }
            }
            off += tasks[i]->train.size();
        }
        std::size_t assigned = 0;
        for (std::size_t c = 0; c < k; ++c) {
            Group& g = groups[c];
            g.warm.assign(t, 0.0);
            std::vector<Split> parts;
            std::size_t count = 0;
            for (std::size_t i = 0; i < t; ++i) {
                if (rows[c][i].empty()) {
                    continue;
                }
                g.members.push_back(tasks[i]->task_id);
                parts.push_back(select_rows(tasks[i]->train, rows[c][i]));
                g.warm[i] = static_cast<double>(rows[c][i].size());
                count += rows[c][i].size();
            }
            for (double& w : g.warm) {
                w /= static_cast<double>(count);
            }
            std::vector<const Split*> ptrs;
            for (const Split& p : parts) {
                ptrs.push_back(&p);
            }
            g.data = concat_splits(ptrs);
            g.steps = c + 1 == k ? t * rest - assigned
                                 : static_cast<std::size_t>(std::llround(static_cast<double>(t * rest) *
                                                                         static_cast<double>(count) /
                                                                         static_cast<double>(total)));
            assigned += g.steps;
            std::sort(g.members.begin(), g.members.end());
        }
        out.report.assignment = a;
        if (!planted.empty()) {
            out.report.ari_vs_planted = adjusted_rand_index(a.labels, example_planted);
        }
    } else {
        ClusterAssignment a;
        switch (method) {
        case ClusterMethod::mbc: a = mbc_cluster(out.stage1.experts, k, cfg); break;
        case ClusterMethod::random_task: a = random_partition(t, k, derive_seed(cfg.seed, {0xE5})); break;
        case ClusterMethod::embeddings: a = embedding_cluster(model, tasks, k, cfg); break;
        case ClusterMethod::random_examples: break;
        }
        for (std::size_t c = 0; c < k; ++c) {
            groups[c].warm.assign(t, 0.0);
        }
        for (std::size_t i = 0; i < t; ++i) {
            groups[a.labels[i]].members.push_back(tasks[i]->task_id);
        }
        for (std::size_t c = 0; c < k; ++c) {
            Group& g = groups[c];
            std::vector<const TaskDataset*> member_sets;
            for (std::size_t i = 0; i < t; ++i) {
                if (a.labels[i] == c) {
                    member_sets.push_back(tasks[i]);
                }
            }
            for (std::size_t i = 0; i < t; ++i) {
                if (a.labels[i] == c) {
                    g.warm[i] = 1.0 / static_cast<double>(member_sets.size());
                }
            }
            g.data = detail::joined_train(member_sets);
            g.steps = member_sets.size() * rest;
            std::sort(g.members.begin(), g.members.end());
        }
        out.report.assignment = a;
        if (!planted.empty()) {
            out.report.ari_vs_planted = adjusted_rand_index(a.labels, planted);
        }
    }

    std::string builder = method == ClusterMethod::mbc ? "mbc" : std::string(to_string(method));
    out.library = detail::empty_library(model, cfg, builder);
    out.library.cluster_assignment = out.report.assignment;
    out.library.training_steps = out.stage1.training_steps;
    out.library.seeds["kmeans"] = derive_seed(cfg.seed, {0xC1});
    const FlatVector proto = flatten_expert(out.stage1.experts.front());
    for (std::size_t c = 0; c < k; ++c) {
        Group& g = groups[c];
        const std::string name = "cluster-" + std::to_string(c);
        Expert init;
        if (cfg.warm_start) {
            Vector mean(proto.values.size(), 0.0);
            for (std::size_t i = 0; i < t; ++i) {
                if (g.warm[i] == 0.0) {
                    continue;
                }
                const FlatVector f = flatten_expert(out.stage1.experts[i]);
                for (std::size_t j = 0; j < mean.size(); ++j) {
                    mean[j] += g.warm[i] * f.values[j];
                }
            }
            init = unflatten_expert(mean, model.depth(), model.dim(), cfg.adapter.rank, cfg.adapter.scaling(), name);
        } else {
            init = fresh_expert(model, cfg.adapter, detail::init_seed(cfg, g.members), name);
        }
        Expert e = detail::train_on(model, g.data, cfg, g.steps, std::move(init), g.members);
        e.name = name;
        e.provenance = {BuilderTag::mbc, g.members, {}};
        out.library.experts.push_back(std::move(e));
        out.library.training_steps += g.steps;
        out.expert_train.push_back(std::move(g.data));
    }
    out.report.mean_pairwise_cluster_similarity =
        mean_pairwise_similarity(out.library.experts, &out.report.similarity_degenerate);
    return out;
}

inline ClusteredBuild build_mbc(const ToyModel& model, std::span<const TaskDataset* const> tasks,
                                const BuildBudget& budget, std::size_t k, const BuildConfig& cfg,
                                std::span<const std::size_t> planted = {}) {
    return build_clustered(model, tasks, budget, k, ClusterMethod::mbc, cfg, planted);
}

// ---------------------------------------------------------------------------
// Poly

struct PolyLibrary {
    Library skills;
    std::vector<int> task_ids;  // rows of z
    Matrix z_logits;            // T x K
    Matrix z;                   // row-wise softmax of z_logits

    std::size_t k() const noexcept { return skills.size(); }
};

/// Joint multi-task training of K skills and a T x K routing matrix. Each step
/// draws a batch from one task (cycling through a seeded task order); the
/// task's effective factors are sum_k Z[t,k] (A_k, B_k). T*N steps in total.
inline PolyLibrary build_poly(const ToyModel& model, std::span<const TaskDataset* const> tasks, const BuildBudget& budget,
                              std::size_t k, const BuildConfig& cfg) {
    const std::size_t t = tasks.size();
    if (k == 0 || k > t) {
        throw ContractError("build_poly: K must be in [1, T]");
    }
    const std::vector<const TaskDataset*> sorted = detail::sorted_by_id(tasks);
    PolyLibrary out;
    out.skills = detail::empty_library(model, cfg, "poly");
    out.task_ids = detail::ids_of(tasks);
    out.z_logits = Matrix(t, k);
    out.z = Matrix(t, k, 1.0 / static_cast<double>(k));
    for (std::size_t s = 0; s < k; ++s) {
        const std::vector<int> tag{-1 - static_cast<int>(s)};
        Expert e = fresh_expert(model, cfg.adapter, detail::init_seed(cfg, tag), "skill-" + std::to_string(s));
        e.provenance = {BuilderTag::poly, out.task_ids, {}};
        out.skills.experts.push_back(std::move(e));
    }
    const std::size_t depth = model.depth();
    const std::size_t d = model.dim();
    const std::size_t r = cfg.adapter.rank;
    const double scale = cfg.adapter.scaling();
    const std::size_t steps = budget.steps_per_task * t;

    std::vector<BatchSampler> samplers;
    for (const TaskDataset* td : sorted) {
        const std::vector<int> members{td->task_id};
        samplers.emplace_back(td->train.size(), cfg.train.batch_size, detail::data_seed(cfg.seed, members));
    }
    SplitMix64 order_rng(derive_seed(cfg.seed, {0x9011}));
    std::vector<std::size_t> order;
    std::size_t pos = 0;

    TrainConfig tc = cfg.train;
    tc.steps = steps;
    std::vector<Matrix> eff_a(depth, Matrix(d, r)), eff_b(depth, Matrix(d, r));
    std::vector<LayerFactors> factors(depth);
    for (std::size_t l = 0; l < depth; ++l) {
        factors[l] = {&eff_a[l], &eff_b[l]};
    }
    AdapterGrads g = AdapterGrads::zeros_like(factors);
    for (std::size_t step = 0; step < steps; ++step) {
        if (pos == order.size()) {
            order = order_rng.permutation(t);
            pos = 0;
        }
        const std::size_t ti = order[pos++];
        const auto zrow = out.z.row(ti);
        for (std::size_t l = 0; l < depth; ++l) {
            eff_a[l].fill(0.0);
            eff_b[l].fill(0.0);
            for (std::size_t s = 0; s < k; ++s) {
                eff_a[l].add_scaled(out.skills.experts[s].adapters[l].a, zrow[s]);
                eff_b[l].add_scaled(out.skills.experts[s].adapters[l].b, zrow[s]);
            }
            g.a[l].fill(0.0);
            g.b[l].fill(0.0);
        }
        const double loss = loss_and_grads(model, factors, scale, sorted[ti]->train, samplers[ti].next(), &g, nullptr);
        if (!std::isfinite(loss)) {
            throw DivergenceError("build_poly: non-finite loss", step);
        }
        const double lr = tc.lr_at(step);
        Vector gz(k, 0.0);
        for (std::size_t s = 0; s < k; ++s) {
            for (std::size_t l = 0; l < depth; ++l) {
                gz[s] += dot(g.a[l].data(), out.skills.experts[s].adapters[l].a.data()) +
                         dot(g.b[l].data(), out.skills.experts[s].adapters[l].b.data());
            }
        }
        for (std::size_t s = 0; s < k; ++s) {
            for (std::size_t l = 0; l < depth; ++l) {
                out.skills.experts[s].adapters[l].a.add_scaled(g.a[l], -lr * zrow[s]);
                out.skills.experts[s].adapters[l].b.add_scaled(g.b[l], -lr * zrow[s]);
            }
        }
        if (k > 1) {
            const double logit_lr = cfg.poly_logit_learning_rate * lr / cfg.train.learning_rate;
            const double mean = dot(zrow, gz);
            for (std::size_t s = 0; s < k; ++s) {
                out.z_logits(ti, s) -= logit_lr * zrow[s] * (gz[s] - mean);
            }
            const Vector p = softmax(out.z_logits.row(ti));
            std::copy(p.begin(), p.end(), out.z.row(ti).begin());
        }
    }
    out.skills.training_steps = steps;
    return out;
}

}  // namespace modlib
