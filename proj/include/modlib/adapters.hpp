// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapter algebra. A layer's delta is s * A * B^T with A, B of shape d x r;
// B projects the input, A maps back out.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modlib/error.hpp"
#include "modlib/linalg.hpp"

namespace modlib {

struct LoraAdapter {
    std::size_t layer_id = 0;
    Matrix a;  // d x r, output side
    Matrix b;  // d x r, input side
    double scaling = 1.0;

    std::size_t rank() const noexcept { return a.cols(); }
    std::size_t dim() const noexcept { return a.rows(); }

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// Validates factor shapes and the s >= 1 constraint (unless `allow_small_scaling`).
inline void validate_adapter(const LoraAdapter& ad, bool allow_small_scaling = false) {
    if (!ad.a.same_shape(ad.b)) {
        throw DimensionError("LoraAdapter: A and B must share shape");
    }
    if (ad.rank() > ad.dim()) {
        throw DimensionError("LoraAdapter: rank exceeds dimension");
    }
    if (!(ad.scaling > 0.0) || (!allow_small_scaling && ad.scaling < 1.0)) {
        throw ContractError("LoraAdapter: scaling must be >= 1 (got " + std::to_string(ad.scaling) + ")");
    }
}

enum class BuilderTag { private_task, shared, mbc, poly, composed };

inline std::string_view to_string(BuilderTag t) noexcept {
    switch (t) {
    case BuilderTag::private_task: return "private";
    case BuilderTag::shared: return "shared";
    case BuilderTag::mbc: return "mbc";
    case BuilderTag::poly: return "poly";
    case BuilderTag::composed: return "composed";
    }
    return "unknown";
}

inline BuilderTag builder_tag_from_string(std::string_view s) {
    if (s == "private") return BuilderTag::private_task;
    if (s == "shared") return BuilderTag::shared;
    if (s == "mbc") return BuilderTag::mbc;
    if (s == "poly") return BuilderTag::poly;
    if (s == "composed") return BuilderTag::composed;
    throw ContractError("unknown provenance tag '" + std::string(s) + "'");
}

struct Provenance {
    BuilderTag tag = BuilderTag::private_task;
    std::vector<int> member_tasks;
    std::vector<double> weights;  // composed experts only

    bool covers(int task_id) const noexcept {
        return std::find(member_tasks.begin(), member_tasks.end(), task_id) != member_tasks.end();
    }

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Expert {
    std::string name;
    std::vector<LoraAdapter> adapters;  // one per patched layer, ascending layer_id
    Provenance provenance;

    std::size_t depth() const noexcept { return adapters.size(); }
    std::size_t rank() const noexcept { return adapters.empty() ? 0 : adapters.front().rank(); }
    std::size_t dim() const noexcept { return adapters.empty() ? 0 : adapters.front().dim(); }
    double scaling() const noexcept { return adapters.empty() ? 1.0 : adapters.front().scaling; }

    friend bool operator==(const Expert&, const Expert&) = default;
};

inline void validate_expert(const Expert& e, bool allow_small_scaling = false) {
    if (e.adapters.empty()) {
        throw ContractError("Expert '" + e.name + "' has no adapters");
    }
    for (std::size_t l = 0; l < e.adapters.size(); ++l) {
        const LoraAdapter& ad = e.adapters[l];
        validate_adapter(ad, allow_small_scaling);
        if (ad.layer_id != l) {
            throw ContractError("Expert '" + e.name + "': adapters must cover layers 0..L-1 in order");
        }
        if (!ad.a.same_shape(e.adapters.front().a) || ad.scaling != e.adapters.front().scaling) {
            throw ContractError("Expert '" + e.name + "': adapters must share rank, dim and scaling");
        }
    }
}

inline bool structurally_compatible(const Expert& x, const Expert& y) noexcept {
    if (x.adapters.size() != y.adapters.size()) {
        return false;
    }
    for (std::size_t l = 0; l < x.adapters.size(); ++l) {
        if (!x.adapters[l].a.same_shape(y.adapters[l].a) || x.adapters[l].scaling != y.adapters[l].scaling) {
            return false;
        }
    }
    return true;
}

/// A fresh expert: A = 0, B ~ N(0, b_init_std^2). Zero A makes the initial delta vanish.
inline Expert init_expert(std::string name, std::size_t depth, std::size_t dim, std::size_t rank, double scaling,
                          std::uint64_t seed, double b_init_std) {
    Expert e{std::move(name), {}, {}};
    SplitMix64 rng(seed);
    for (std::size_t l = 0; l < depth; ++l) {
        LoraAdapter ad{l, Matrix(dim, rank), Matrix(dim, rank), scaling};
        for (double& v : ad.b.data()) {
            v = rng.normal(0.0, b_init_std);
        }
        e.adapters.push_back(std::move(ad));
    }
    return e;
}

/// h = W x + s * A (B^T x). The d x d product A B^T is never formed.
inline Vector apply_adapter(const LoraAdapter& ad, const Matrix& base_weight, std::span<const double> x) {
    if (!ad.a.same_shape(ad.b) || base_weight.rows() != ad.dim() || base_weight.cols() != ad.dim() ||
        x.size() != ad.dim()) {
        throw DimensionError("apply_adapter: shape mismatch");
    }
    Vector out = matvec(base_weight, x);
    const Vector u = matvec_t(ad.b, x);
    const Vector delta = matvec(ad.a, u);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += ad.scaling * delta[i];
    }
    return out;
}

struct Library {
    std::vector<Expert> experts;
    std::string base_model_fingerprint;
    std::size_t rank = 0;
    double scaling = 1.0;
    std::optional<ClusterAssignment> cluster_assignment;
    std::string builder;                          // private, shared, mbc, poly, random-task, ...
    std::map<std::string, std::uint64_t> seeds;   // named build seeds
    std::size_t training_steps = 0;               // total adapter SGD steps spent

    std::size_t size() const noexcept { return experts.size(); }

    std::optional<std::size_t> find(std::string_view name) const noexcept {
        for (std::size_t i = 0; i < experts.size(); ++i) {
            if (experts[i].name == name) {
                return i;
            }
        }
        return std::nullopt;
    }
};

inline void validate_library(const Library& lib) {
    std::set<std::string> names;
    for (const Expert& e : lib.experts) {
        validate_expert(e, /*allow_small_scaling=*/true);
        if (!names.insert(e.name).second) {
            throw ContractError("Library: duplicate expert name '" + e.name + "'");
        }
        if (e.rank() != lib.rank || e.scaling() != lib.scaling) {
            throw ContractError("Library: expert '" + e.name + "' disagrees with library rank/scaling");
        }
        if (!structurally_compatible(e, lib.experts.front())) {
            throw ContractError("Library: experts are not structurally compatible");
        }
    }
}

// ---------------------------------------------------------------------------
// Flattening

struct FlatVector {
    Vector values;
    std::string source_expert;
};

/// Concatenates, in ascending layer order, row-major A then row-major B.
/// The scaling is not part of the vector.
inline FlatVector flatten_expert(const Expert& e) {
    FlatVector out{{}, e.name};
    std::size_t total = 0;
    for (const LoraAdapter& ad : e.adapters) {
        total += ad.a.size() + ad.b.size();
    }
    out.values.reserve(total);
    for (const LoraAdapter& ad : e.adapters) {
        out.values.insert(out.values.end(), ad.a.values().begin(), ad.a.values().end());
        out.values.insert(out.values.end(), ad.b.values().begin(), ad.b.values().end());
    }
    return out;
}

/// Inverse of flatten_expert given the layout (depth, d, r) and shared scaling.
inline Expert unflatten_expert(std::span<const double> flat, std::size_t depth, std::size_t dim, std::size_t rank,
                               double scaling, std::string name = {}, Provenance provenance = {}) {
    const std::size_t block = dim * rank;
    if (flat.size() != depth * 2 * block) {
        throw DimensionError("unflatten_expert: length " + std::to_string(flat.size()) + " does not match layout");
    }
    Expert e{std::move(name), {}, std::move(provenance)};
    std::size_t off = 0;
    for (std::size_t l = 0; l < depth; ++l) {
        std::vector<double> a(flat.begin() + static_cast<std::ptrdiff_t>(off),
                              flat.begin() + static_cast<std::ptrdiff_t>(off + block));
        off += block;
        std::vector<double> b(flat.begin() + static_cast<std::ptrdiff_t>(off),
                              flat.begin() + static_cast<std::ptrdiff_t>(off + block));
        off += block;
        e.adapters.push_back({l, Matrix(dim, rank, std::move(a)), Matrix(dim, rank, std::move(b)), scaling});
    }
    return e;
}

// ---------------------------------------------------------------------------
// Composition

namespace detail {

inline void check_composable(std::span<const Expert> experts) {
    if (experts.empty()) {
        throw ContractError("compose: no experts");
    }
    for (const Expert& e : experts) {
        if (!structurally_compatible(e, experts.front())) {
            throw ContractError("compose: expert '" + e.name + "' is incompatible with '" + experts.front().name + "'");
        }
    }
}

}  // namespace detail

/// Factor-wise composition with a separate weight vector per layer:
/// A*_l = sum_i w[l][i] A_{i,l}, B*_l = sum_i w[l][i] B_{i,l}. No normalization check.
inline Expert compose_per_layer(std::span<const Expert> experts, std::span<const Vector> layer_weights,
                                std::string name = "composed") {
    detail::check_composable(experts);
    const Expert& first = experts.front();
    if (layer_weights.size() != first.depth()) {
        throw DimensionError("compose_per_layer: need one weight vector per layer");
    }
    Expert out{std::move(name), {}, {BuilderTag::composed, {}, {}}};
    for (std::size_t l = 0; l < first.depth(); ++l) {
        const Vector& w = layer_weights[l];
        if (w.size() != experts.size()) {
            throw DimensionError("compose_per_layer: weight vector length != expert count");
        }
        LoraAdapter ad{l, Matrix(first.dim(), first.rank()), Matrix(first.dim(), first.rank()), first.scaling()};
        for (std::size_t i = 0; i < experts.size(); ++i) {
            if (w[i] == 0.0) {
                continue;
            }
            ad.a.add_scaled(experts[i].adapters[l].a, w[i]);
            ad.b.add_scaled(experts[i].adapters[l].b, w[i]);
        }
        out.adapters.push_back(std::move(ad));
    }
    std::set<int> members;
    for (const Expert& e : experts) {
        members.insert(e.provenance.member_tasks.begin(), e.provenance.member_tasks.end());
    }
    out.provenance.member_tasks.assign(members.begin(), members.end());
    return out;
}

/// Linear combination of expert factors with one weight vector shared by all layers.
/// Weights must sum to one within 1e-9. One-hot weights reproduce the selected
/// expert's factors exactly.
inline Expert compose(std::span<const Expert> experts, std::span<const double> weights, std::string name = "composed") {
    detail::check_composable(experts);
    if (weights.size() != experts.size()) {
        throw DimensionError("compose: weights length != expert count");
    }
    double sum = 0.0;
    for (double w : weights) {
        if (!std::isfinite(w)) {
            throw NumericError("compose: non-finite weight");
        }
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ContractError("compose: weights sum to " + std::to_string(sum) + ", expected 1");
    }
    const Vector w(weights.begin(), weights.end());
    std::vector<Vector> per_layer(experts.front().depth(), w);
    Expert out = compose_per_layer(experts, per_layer, std::move(name));
    out.provenance.weights = w;
    return out;
}

}  // namespace modlib
