// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "modlib/librarian.hpp"
#include "modlib/synthtasks.hpp"

using namespace modlib;

namespace {

struct Fixture {
    Benchmark bench;
    ToyModel model;
    std::vector<const TaskDataset*> tasks;
    std::vector<std::size_t> planted;

    Fixture() {
        BenchmarkConfig c;
        c.train_samples = 128;
        c.valid_samples = 16;
        c.test_samples = 16;
        bench = generate_benchmark(c);
        PretrainConfig pc;
        pc.train.steps = 0;
        model = pretrain_base(pc, Split{});
        for (const TaskDataset& d : bench.datasets) {
            tasks.push_back(&d);
            planted.push_back(bench.spec(d.task_id).cluster_id);
        }
    }
};

const Fixture& fx() {
    static const Fixture f;
    return f;
}

BuildBudget budget() { return {.steps_per_task = 100, .clustering_fraction = 0.4}; }

std::set<std::set<int>> partition_of(const Library& lib) {
    std::set<std::set<int>> out;
    for (const Expert& e : lib.experts) {
        out.insert(std::set<int>(e.provenance.member_tasks.begin(), e.provenance.member_tasks.end()));
    }
    return out;
}

}  // namespace

TEST(Private, OneExpertPerTaskWithFullBudget) {
    const Library lib = build_private(fx().model, fx().tasks, budget(), BuildConfig{});
    ASSERT_EQ(lib.size(), 32u);
    EXPECT_EQ(lib.training_steps, 32u * 100u);
    EXPECT_EQ(lib.builder, "private");
    for (std::size_t i = 0; i < lib.size(); ++i) {
        EXPECT_EQ(lib.experts[i].name, task_expert_name(fx().tasks[i]->task_id));
        EXPECT_EQ(lib.experts[i].provenance.member_tasks, std::vector<int>{fx().tasks[i]->task_id});
    }
    validate_library(lib);
}

TEST(Private, TaskOrderDoesNotChangeExperts) {
    std::vector<const TaskDataset*> rev(fx().tasks.rbegin(), fx().tasks.rbegin() + 6);
    std::vector<const TaskDataset*> fwd(rev.rbegin(), rev.rend());
    const Library a = build_private(fx().model, fwd, {.steps_per_task = 30}, BuildConfig{});
    const Library b = build_private(fx().model, rev, {.steps_per_task = 30}, BuildConfig{});
    for (const Expert& e : a.experts) {
        EXPECT_EQ(e, b.experts[*b.find(e.name)]);
    }
}

TEST(Shared, SingleExpertOnUnion) {
    std::vector<const TaskDataset*> few(fx().tasks.begin(), fx().tasks.begin() + 4);
    const Library lib = build_shared(fx().model, few, {.steps_per_task = 20}, BuildConfig{});
    ASSERT_EQ(lib.size(), 1u);
    EXPECT_EQ(lib.training_steps, 80u);
    EXPECT_EQ(lib.experts[0].provenance.member_tasks.size(), 4u);
    EXPECT_THROW(build_shared(fx().model, {}, budget(), BuildConfig{}), ContractError);
}

TEST(Mbc, RecoversPlantedClustersAndMatchesPrivateBudget) {
    const ClusteredBuild b = build_mbc(fx().model, fx().tasks, budget(), 4, BuildConfig{}, fx().planted);
    EXPECT_DOUBLE_EQ(b.report.ari_vs_planted, 1.0);
    EXPECT_EQ(b.library.size(), 4u);
    EXPECT_EQ(b.library.training_steps, 32u * 100u);
    EXPECT_EQ(b.stage1.training_steps, 32u * 40u);
    std::multiset<int> covered;
    for (const Expert& e : b.library.experts) {
        covered.insert(e.provenance.member_tasks.begin(), e.provenance.member_tasks.end());
        EXPECT_EQ(e.provenance.tag, BuilderTag::mbc);
    }
    EXPECT_EQ(covered.size(), 32u);
    EXPECT_EQ(std::set<int>(covered.begin(), covered.end()).size(), 32u);
    EXPECT_NEAR(b.report.mean_pairwise_cluster_similarity, mean_pairwise_similarity(b.library.experts), 1e-12);
    EXPECT_FALSE(b.report.similarity_degenerate);

    const Library stage1 = build_private(fx().model, fx().tasks, {.steps_per_task = 40}, BuildConfig{});
    EXPECT_EQ(stage1.experts, b.stage1.experts);

    std::vector<const TaskDataset*> rev(fx().tasks.rbegin(), fx().tasks.rend());
    std::vector<std::size_t> rplanted(fx().planted.rbegin(), fx().planted.rend());
    const ClusteredBuild r = build_mbc(fx().model, rev, budget(), 4, BuildConfig{}, rplanted);
    EXPECT_EQ(partition_of(r.library), partition_of(b.library));
}

TEST(Mbc, SingleClusterIsDegenerateAndRangeIsChecked) {
    std::vector<const TaskDataset*> few(fx().tasks.begin(), fx().tasks.begin() + 4);
    const ClusteredBuild b = build_mbc(fx().model, few, {.steps_per_task = 20}, 1, BuildConfig{});
    EXPECT_TRUE(b.report.similarity_degenerate);
    EXPECT_EQ(b.report.mean_pairwise_cluster_similarity, 1.0);
    EXPECT_THROW(build_mbc(fx().model, few, budget(), 0, BuildConfig{}), ContractError);
    EXPECT_THROW(build_mbc(fx().model, few, budget(), 5, BuildConfig{}), ContractError);
    EXPECT_THROW(build_mbc(fx().model, few, {.steps_per_task = 20, .clustering_fraction = 1.0}, 2, BuildConfig{}),
                 ContractError);
    EXPECT_THROW(mbc_cluster({}, 1, BuildConfig{}), ContractError);
}

TEST(Baselines, StepCountsAndCoverage) {
    std::vector<const TaskDataset*> few(fx().tasks.begin(), fx().tasks.begin() + 8);
    const BuildBudget bb{.steps_per_task = 20, .clustering_fraction = 0.4};
    for (ClusterMethod m : {ClusterMethod::random_task, ClusterMethod::random_examples, ClusterMethod::embeddings}) {
        const ClusteredBuild b = build_clustered(fx().model, few, bb, 3, m, BuildConfig{});
        EXPECT_EQ(b.library.training_steps, 8u * 20u) << to_string(m);
        EXPECT_EQ(b.library.size(), 3u);
        std::size_t rows = 0;
        for (const Split& s : b.expert_train) {
            rows += s.size();
        }
        EXPECT_EQ(rows, 8u * 128u) << to_string(m);
    }
    EXPECT_EQ(cluster_method_from_string("random-task"), ClusterMethod::random_task);
    EXPECT_THROW(cluster_method_from_string("kmeans"), ContractError);
}

TEST(RandomPartition, BalancedNonEmptyDeterministic) {
    for (std::size_t k = 1; k <= 7; ++k) {
        const ClusterAssignment a = random_partition(23, k, 5);
        EXPECT_EQ(a.labels, random_partition(23, k, 5).labels);
        std::vector<std::size_t> sizes(k, 0);
        for (std::size_t l : a.labels) {
            ++sizes[l];
        }
        EXPECT_LE(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()), 1u);
        EXPECT_GT(*std::min_element(sizes.begin(), sizes.end()), 0u);
    }
    EXPECT_THROW(random_partition(3, 4, 1), ContractError);
}

TEST(Poly, RoutingRowsAreDistributions) {
    std::vector<const TaskDataset*> few(fx().tasks.begin(), fx().tasks.begin() + 6);
    const PolyLibrary p = build_poly(fx().model, few, {.steps_per_task = 20}, 2, BuildConfig{});
    EXPECT_EQ(p.k(), 2u);
    EXPECT_EQ(p.skills.training_steps, 120u);
    for (std::size_t t = 0; t < 6; ++t) {
        EXPECT_NEAR(p.z(t, 0) + p.z(t, 1), 1.0, 1e-12);
    }
    EXPECT_THROW(build_poly(fx().model, few, budget(), 7, BuildConfig{}), ContractError);
}
