// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "modlib/error.hpp"
#include "modlib/linalg.hpp"

namespace modlib {

/// Paired inputs/targets, one example per row.
struct Split {
    Matrix x;
    Matrix y;

    std::size_t size() const noexcept { return x.rows(); }
    bool empty() const noexcept { return x.rows() == 0; }

    friend bool operator==(const Split&, const Split&) = default;
};

struct TaskDataset {
    int task_id = 0;
    Split train;
    Split valid;
    Split test;

    friend bool operator==(const TaskDataset&, const TaskDataset&) = default;
};

/// Row-wise concatenation of several splits.
inline Split concat_splits(std::span<const Split* const> parts) {
    if (parts.empty()) {
        return {};
    }
    const std::size_t in = parts.front()->x.cols();
    const std::size_t out = parts.front()->y.cols();
    std::size_t n = 0;
    for (const Split* s : parts) {
        if (s->x.cols() != in || s->y.cols() != out) {
            throw DimensionError("concat_splits: column counts differ");
        }
        n += s->size();
    }
    Split pooled{Matrix(n, in), Matrix(n, out)};
    std::size_t row = 0;
    for (const Split* s : parts) {
        for (std::size_t i = 0; i < s->size(); ++i, ++row) {
            std::copy(s->x.row(i).begin(), s->x.row(i).end(), pooled.x.row(row).begin());
            std::copy(s->y.row(i).begin(), s->y.row(i).end(), pooled.y.row(row).begin());
        }
    }
    return pooled;
}

/// Rows `idx` of a split, in the given order.
inline Split select_rows(const Split& s, std::span<const std::size_t> idx) {
    Split out{Matrix(idx.size(), s.x.cols()), Matrix(idx.size(), s.y.cols())};
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(s.x.row(idx[i]).begin(), s.x.row(idx[i]).end(), out.x.row(i).begin());
        std::copy(s.y.row(idx[i]).begin(), s.y.row(idx[i]).end(), out.y.row(i).begin());
    }
    return out;
}

}  // namespace modlib
