// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-task regression benchmark with planted task clusters.
//
// Every task's teacher is a shared reference network (same architecture as the
// toy model) whose layers carry a task-specific low-rank delta U_l V_l^T. The
// flattened (U_l, V_l) factors are the task's teacher parameter vector: cluster
// centers are drawn with a minimum pairwise angle and tasks perturb their center.
//
// Inputs of a task live near a low-dimensional affine subspace,
//   x = m_t + P_t z + input_noise * e,   z ~ N(0, I_p), e ~ N(0, I_d),
// where the basis P_t and offset m_t are the cluster's, jittered per task.
// Targets are teacher(x) + noise_std * N(0, I).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modlib/dataset.hpp"
#include "modlib/error.hpp"
#include "modlib/linalg.hpp"
#include "modlib/rng.hpp"
#include "modlib/toymodel.hpp"

namespace modlib {

struct BenchmarkConfig {
    std::size_t n_clusters_planted = 4;
    std::size_t tasks_per_cluster = 8;
    std::size_t input_dim = 16;   // also the hidden width of teacher and toy model
    std::size_t output_dim = 16;
    std::size_t depth = 4;
    std::size_t train_samples = 512;
    std::size_t valid_samples = 128;
    std::size_t test_samples = 128;
    double intra_cluster_perturbation = 0.1;   // relative std of task factors around the center
    double inter_cluster_separation = 60.0;    // minimum pairwise center angle, degrees
    double noise_std = 0.05;
    std::size_t held_out_task_count = 4;
    std::uint64_t master_seed = 1;

    std::size_t teacher_rank = 4;     // rank of each layer's teacher delta
    double delta_scale = 1.5;         // std multiplier of teacher factors (x 1/sqrt(d))
    double reference_gain = 1.0;
    std::size_t input_rank = 4;       // dimension p of each task's input subspace
    double input_shift = 3.0;         // norm of the input offset m_t
    double input_jitter = 0.1;        // per-task jitter of subspace basis and offset
    double input_noise = 0.1;         // isotropic input noise
    double input_spread = 1.0;        // std of the subspace coordinates z
    bool offset_from_teacher = true;   // m_t along the first input-side teacher direction of layer 0
    double shared_component = 0.3;    // variance share of a center component common to all clusters

    std::size_t total_tasks() const noexcept { return n_clusters_planted * tasks_per_cluster; }

    /// Length of a teacher parameter vector: per layer, U then V (d x teacher_rank each).
    std::size_t teacher_param_count() const noexcept { return depth * 2 * input_dim * teacher_rank; }
};

struct TaskSpec {
    int task_id = 0;
    std::size_t cluster_id = 0;
    Vector teacher_params;
    double noise_std = 0.0;
    Vector input_offset;   // m_t
    Matrix input_basis;    // P_t, d x p with orthonormal columns
};

struct Benchmark {
    BenchmarkConfig config;
    ToyModel reference;  // shared teacher body
    std::vector<TaskSpec> specs;
    std::vector<TaskDataset> datasets;  // same order as specs

    const TaskSpec& spec(int task_id) const {
        for (const TaskSpec& s : specs) {
            if (s.task_id == task_id) {
                return s;
            }
        }
        throw ContractError("unknown task id " + std::to_string(task_id));
    }
    const TaskDataset& dataset(int task_id) const {
        for (const TaskDataset& d : datasets) {
            if (d.task_id == task_id) {
                return d;
            }
        }
        throw ContractError("unknown task id " + std::to_string(task_id));
    }
};

/// The teacher network of a task: reference + per-layer U V^T from its parameters.
inline ToyModel teacher_network(const Benchmark& bench, const TaskSpec& spec) {
    const BenchmarkConfig& cfg = bench.config;
    ToyModel t = bench.reference;
    const std::size_t d = cfg.input_dim;
    const std::size_t q = cfg.teacher_rank;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::size_t off = l * 2 * d * q;
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < q; ++k) {
                    s += spec.teacher_params[off + i * q + k] * spec.teacher_params[off + d * q + j * q + k];
                }
                t.weights[l](i, j) += s;
            }
        }
    }
    return t;
}

namespace detail {

inline double angle_degrees(std::span<const double> a, std::span<const double> b) {
    const double c = std::clamp(dot(a, b) / (norm2(a) * norm2(b)), -1.0, 1.0);
    return std::acos(c) * 180.0 / std::numbers::pi;
}

/// Orthonormal columns via modified Gram-Schmidt (columns assumed independent).
inline Matrix orthonormalize_columns(Matrix m) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
        for (std::size_t k = 0; k < j; ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < m.rows(); ++i) {
                s += m(i, j) * m(i, k);
            }
            for (std::size_t i = 0; i < m.rows(); ++i) {
                m(i, j) -= s * m(i, k);
            }
        }
        double n = 0.0;
        for (std::size_t i = 0; i < m.rows(); ++i) {
            n += m(i, j) * m(i, j);
        }
        n = std::sqrt(n);
        for (std::size_t i = 0; i < m.rows(); ++i) {
            m(i, j) /= n;
        }
    }
    return m;
}

inline void check_config(const BenchmarkConfig& cfg) {
    if (cfg.n_clusters_planted == 0 || cfg.tasks_per_cluster == 0) {
        throw ContractError("BenchmarkConfig: need at least one cluster and one task per cluster");
    }
    if (cfg.input_dim == 0 || cfg.output_dim == 0 || cfg.depth == 0 || cfg.teacher_rank == 0) {
        throw ContractError("BenchmarkConfig: dimensions must be positive");
    }
    if (cfg.input_rank == 0 || cfg.input_rank > cfg.input_dim) {
        throw ContractError("BenchmarkConfig: input_rank must be in [1, input_dim]");
    }
    if (cfg.train_samples == 0) {
        throw ContractError("BenchmarkConfig: train_samples must be positive");
    }
    if (cfg.held_out_task_count >= cfg.total_tasks()) {
        throw ContractError("BenchmarkConfig: held_out_task_count must be < total tasks");
    }
    if (cfg.intra_cluster_perturbation < 0.0 || cfg.noise_std < 0.0 || cfg.inter_cluster_separation < 0.0) {
        throw ContractError("BenchmarkConfig: perturbation, noise and separation must be non-negative");
    }
}

/// Largest achievable minimum pairwise angle for c vectors in dimension p.
inline double max_separation_degrees(std::size_t c, std::size_t p) {
    if (c <= 1) {
        return 180.0;
    }
    if (c <= p + 1) {
        return std::acos(-1.0 / static_cast<double>(c - 1)) * 180.0 / std::numbers::pi;
    }
    // More vectors than a simplex allows; 90 degrees is reachable up to 2p vectors.
    return c <= 2 * p ? 90.0 : 90.0 - 1e-9;
}

}  // namespace detail

/// Generates C clusters x tasks_per_cluster tasks. Fully determined by the config.
/// Throws ContractError when the requested center separation cannot be met.
inline Benchmark generate_benchmark(const BenchmarkConfig& cfg) {
    detail::check_config(cfg);
    const std::size_t c = cfg.n_clusters_planted;
    const std::size_t d = cfg.input_dim;
    const std::size_t p = cfg.input_rank;
    const std::size_t n_params = cfg.teacher_param_count();
    if (cfg.inter_cluster_separation > detail::max_separation_degrees(c, n_params)) {
        throw ContractError("generate_benchmark: cannot place " + std::to_string(c) + " centers " +
                            std::to_string(cfg.inter_cluster_separation) + " degrees apart in dimension " +
                            std::to_string(n_params));
    }

    Benchmark bench;
    bench.config = cfg;
    bench.reference = random_model(cfg.depth, d, cfg.output_dim, derive_seed(cfg.master_seed, {1}),
                                   cfg.reference_gain, 0.1);
    bench.reference.fingerprint = compute_fingerprint(bench.reference);

    const double factor_std = cfg.delta_scale / std::sqrt(static_cast<double>(d));

    // Cluster centers: rejection sampling until every pair meets the angle bound.
    std::vector<Vector> centers;
    Vector common;
    {
        SplitMix64 rng(derive_seed(cfg.master_seed, {2}));
        common.resize(n_params);
        for (double& x : common) {
            x = rng.normal(0.0, factor_std);
        }
        constexpr int kMaxAttempts = 10000;
        int attempts = 0;
        while (centers.size() < c) {
            if (++attempts > kMaxAttempts) {
                throw ContractError("generate_benchmark: separation infeasible after " +
                                    std::to_string(kMaxAttempts) + " draws");
            }
            Vector v(n_params);
            for (std::size_t i = 0; i < n_params; ++i) {
                v[i] = std::sqrt(1.0 - cfg.shared_component) * rng.normal(0.0, factor_std) +
                       std::sqrt(cfg.shared_component) * common[i];
            }
            const bool ok = std::all_of(centers.begin(), centers.end(), [&](const Vector& o) {
                return detail::angle_degrees(v, o) >= cfg.inter_cluster_separation;
            });
            if (ok) {
                centers.push_back(std::move(v));
            }
        }
    }

    // Cluster input geometry: random subspace basis and offset direction.
    std::vector<Matrix> cluster_basis;
    std::vector<Vector> cluster_offset;
    {
        SplitMix64 rng(derive_seed(cfg.master_seed, {3}));
        for (std::size_t k = 0; k < c; ++k) {
            Matrix g(d, p);
            for (double& x : g.data()) {
                x = rng.normal();
            }
            cluster_basis.push_back(detail::orthonormalize_columns(std::move(g)));
            Vector o(d);
            for (double& x : o) {
                x = rng.normal();
            }
            const double n = norm2(o);
            for (double& x : o) {
                x /= n;
            }
            cluster_offset.push_back(std::move(o));
        }
    }

    int next_id = 0;
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t j = 0; j < cfg.tasks_per_cluster; ++j) {
            const int id = next_id++;
            SplitMix64 rng(derive_seed(cfg.master_seed, {4, static_cast<std::uint64_t>(id)}));
            TaskSpec spec;
            spec.task_id = id;
            spec.cluster_id = k;
            spec.noise_std = cfg.noise_std;
            spec.teacher_params = centers[k];
            for (double& x : spec.teacher_params) {
                x += rng.normal(0.0, cfg.intra_cluster_perturbation * factor_std);
            }
            Matrix basis = cluster_basis[k];
            for (double& x : basis.data()) {
                x += rng.normal(0.0, cfg.input_jitter / std::sqrt(static_cast<double>(d)));
            }
            spec.input_basis = detail::orthonormalize_columns(std::move(basis));
            spec.input_offset = cluster_offset[k];
            for (double& x : spec.input_offset) {
                x += rng.normal(0.0, cfg.input_jitter / std::sqrt(static_cast<double>(d)));
            }
            if (cfg.offset_from_teacher) {
                const std::size_t q = cfg.teacher_rank;
                for (std::size_t i = 0; i < d; ++i) {
                    spec.input_offset[i] = spec.teacher_params[d * q + i * q] -
                                           std::sqrt(cfg.shared_component) * common[d * q + i * q];
                }
            }
            const double n = norm2(spec.input_offset);
            for (double& x : spec.input_offset) {
                x *= cfg.input_shift / n;
            }
            bench.specs.push_back(std::move(spec));
        }
    }

    // Generation-time check of the planted structure on the teacher vectors.
    if (c > 1 && cfg.tasks_per_cluster > 1) {
        double intra = 0.0, inter = 0.0;
        std::size_t n_intra = 0, n_inter = 0;
        for (std::size_t i = 0; i < bench.specs.size(); ++i) {
            for (std::size_t j = i + 1; j < bench.specs.size(); ++j) {
                const double s = dot(bench.specs[i].teacher_params, bench.specs[j].teacher_params) /
                                 (norm2(bench.specs[i].teacher_params) * norm2(bench.specs[j].teacher_params));
                if (bench.specs[i].cluster_id == bench.specs[j].cluster_id) {
                    intra += s;
                    ++n_intra;
                } else {
                    inter += s;
                    ++n_inter;
                }
            }
        }
        if (intra / static_cast<double>(n_intra) <= inter / static_cast<double>(n_inter)) {
            throw ContractError("generate_benchmark: planted structure not separable at these settings");
        }
    }

    for (const TaskSpec& spec : bench.specs) {
        const ToyModel teacher = teacher_network(bench, spec);
        SplitMix64 rng(derive_seed(cfg.master_seed, {5, static_cast<std::uint64_t>(spec.task_id)}));
        auto draw = [&](std::size_t n) {
            Split s{Matrix(n, d), Matrix(n, cfg.output_dim)};
            Vector z(p);
            for (std::size_t i = 0; i < n; ++i) {
                for (double& v : z) {
                    v = rng.normal(0.0, cfg.input_spread);
                }
                auto x = s.x.row(i);
                for (std::size_t a = 0; a < d; ++a) {
                    double v = spec.input_offset[a] + cfg.input_noise * rng.normal();
                    for (std::size_t b = 0; b < p; ++b) {
                        v += spec.input_basis(a, b) * z[b];
                    }
                    x[a] = v;
                }
                const ForwardResult f = forward(teacher, x);
                auto y = s.y.row(i);
                for (std::size_t a = 0; a < cfg.output_dim; ++a) {
                    y[a] = f.y[a] + spec.noise_std * rng.normal();
                }
            }
            return s;
        };
        TaskDataset ds;
        ds.task_id = spec.task_id;
        ds.train = draw(cfg.train_samples);
        ds.valid = draw(cfg.valid_samples);
        ds.test = draw(cfg.test_samples);
        bench.datasets.push_back(std::move(ds));
    }
    return bench;
}

struct HeldoutSplit {
    std::vector<int> train_tasks;
    std::vector<int> heldout_tasks;
};

/// Stratified hold-out: clusters are visited round-robin and each contributes a
/// task chosen by a seeded draw among its remaining members.
inline HeldoutSplit heldout_split(std::span<const TaskSpec> specs, const BenchmarkConfig& cfg) {
    if (cfg.held_out_task_count >= specs.size()) {
        throw ContractError("heldout_split: held_out_task_count must be < total tasks");
    }
    std::vector<std::vector<int>> by_cluster;
    for (const TaskSpec& s : specs) {
        if (s.cluster_id >= by_cluster.size()) {
            by_cluster.resize(s.cluster_id + 1);
        }
        by_cluster[s.cluster_id].push_back(s.task_id);
    }
    SplitMix64 rng(derive_seed(cfg.master_seed, {6}));
    std::set<int> held;
    std::size_t cluster = 0;
    while (held.size() < cfg.held_out_task_count) {
        auto& pool = by_cluster[cluster % by_cluster.size()];
        if (pool.size() > 1) {  // never empty a cluster
            const std::size_t pick = rng.uniform_index(pool.size());
            held.insert(pool[pick]);
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        }
        ++cluster;
    }
    HeldoutSplit out;
    for (const TaskSpec& s : specs) {
        (held.count(s.task_id) ? out.heldout_tasks : out.train_tasks).push_back(s.task_id);
    }
    return out;
}

/// Keeps ceil(fraction * n) training examples chosen by a seeded permutation;
/// valid and test splits are untouched.
inline TaskDataset subsample_fraction(const TaskDataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0) {
        throw ContractError("subsample_fraction: fraction must be in (0, 1]");
    }
    if (fraction == 1.0) {
        return ds;
    }
    const std::size_t n = ds.train.size();
    // Guard the ceil against representation error (0.005 * 8000 = 40.000000000000004).
    const double raw = fraction * static_cast<double>(n);
    auto keep = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
    keep = std::clamp<std::size_t>(keep, 1, n);
    SplitMix64 rng(derive_seed(seed, {7, static_cast<std::uint64_t>(ds.task_id)}));
    std::vector<std::size_t> perm = rng.permutation(n);
    perm.resize(keep);
    std::sort(perm.begin(), perm.end());
    TaskDataset out = ds;
    out.train = select_rows(ds.train, perm);
    return out;
}

}  // namespace modlib
