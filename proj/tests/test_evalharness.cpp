// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "modlib/evalharness.hpp"
#include "oracles.hpp"

using namespace modlib;

namespace {

PipelineConfig small_config() {
    PipelineConfig c;
    c.benchmark.train_samples = 64;
    c.benchmark.valid_samples = 16;
    c.benchmark.test_samples = 16;
    c.budget.steps_per_task = 40;
    c.adapt.train.steps = 40;
    c.transfer.steps_per_task = 40;
    c.transfer.n_pairs = 4;
    c.set_seed(3);
    return c;
}

const Workspace& ws() {
    static const std::unique_ptr<Workspace> w = make_workspace(small_config());
    return *w;
}

const Library& private_library() {
    static const Library lib = build_private(ws().base, ws().pool.train, small_config().budget, BuildConfig{});
    return lib;
}

}  // namespace

TEST(Stats, PearsonSpearmanMedianKnownValues) {
    const Vector x{1, 2, 3, 4, 5};
    EXPECT_NEAR(pearson(x, Vector{2, 4, 5, 4, 5}), 0.7745966692414834, 1e-14);
    EXPECT_NEAR(pearson(x, Vector{10, 8, 6, 4, 2}), -1.0, 1e-15);
    EXPECT_NEAR(spearman(x, Vector{1, 8, 27, 64, 125}), 1.0, 1e-15);
    EXPECT_NEAR(spearman(Vector{1, 2, 2, 3}, Vector{1, 2, 3, 4}), 0.9486832980505138, 1e-14);
    EXPECT_EQ(average_ranks(Vector{3, 1, 3, 2}), (Vector{3.5, 1, 3.5, 2}));
    EXPECT_EQ(pearson(x, Vector(5, 1.0)), 0.0);
    EXPECT_THROW(pearson(Vector{1}, Vector{1}), ContractError);
    EXPECT_EQ(median(Vector{3, 1, 2}), 2.0);
    EXPECT_EQ(median(Vector{4, 1, 2, 3}), 2.5);
    EXPECT_THROW(median(Vector{}), ContractError);
}

TEST(Stats, HistogramBinsAndClamps) {
    const Histogram h = histogram(Vector{-1.0, 0.0, 0.49, 0.5, 0.99, 1.0, 7.0}, 2, 0.0, 1.0);
    EXPECT_EQ(h.edges, (Vector{0.0, 0.5, 1.0}));
    EXPECT_EQ(h.counts, (std::vector<std::size_t>{3, 4}));
    EXPECT_THROW(histogram(Vector{}, 0, 0.0, 1.0), ContractError);
    EXPECT_THROW(histogram(Vector{}, 3, 1.0, 1.0), ContractError);
}

TEST(NormRatio, ScaledTwinGivesExactRatios) {
    Library lib;
    lib.base_model_fingerprint = ws().base.fingerprint;
    Expert e0 = private_library().experts[0];
    Expert e1 = e0;
    e1.name = "twin";
    e1.provenance.member_tasks = {private_library().experts[1].provenance.member_tasks.front()};
    for (LoraAdapter& ad : e1.adapters) {
        ad.a *= 2.0;
    }
    lib.experts = {e0, e1};
    auto data = [](int id) -> const Split& { return ws().pool.task(id).valid; };
    const NormRatioReport r = run_norm_analysis(lib, ws().base, data, 200, 1);
    ASSERT_EQ(r.samples.size(), 200u);
    std::size_t above = 0;
    for (const NormRatioSample& s : r.samples) {
        const double want = s.task_id == e1.provenance.member_tasks.front() ? 2.0 : 0.5;
        EXPECT_NEAR(s.ratio, want, 1e-12);
        above += s.ratio > 1.0 ? 1 : 0;
    }
    EXPECT_DOUBLE_EQ(r.fraction_above_one, static_cast<double>(above) / 200.0);
    std::size_t total = 0;
    for (std::size_t c : r.histogram.counts) {
        total += c;
    }
    EXPECT_EQ(total, 200u);
    EXPECT_EQ(r.histogram.counts.size(), 40u);

    EXPECT_THROW(run_norm_analysis(lib, ws().base, data, 0, 1), ContractError);
    const Library shared = build_shared(ws().base, ws().pool.train, {.steps_per_task = 1}, BuildConfig{});
    EXPECT_THROW(run_norm_analysis(shared, ws().base, data, 5, 1), ContractError);
}

TEST(Zeroshot, BaseReportAndLeakageGuard) {
    const EvalReport base = run_zeroshot_eval(ws().base, nullptr, nullptr, ws().pool.heldout);
    EXPECT_EQ(base.name, "base");
    EXPECT_EQ(base.per_task.size(), ws().pool.heldout.size());
    EXPECT_NEAR(base.mean_log_likelihood, -0.5 * base.mean_mse, 1e-12);

    const Library& lib = private_library();
    const Router mu = make_router({}, lib, ws().base);
    const std::string before = library_digest(lib);
    const EvalReport r = run_zeroshot_eval(ws().base, &lib, &mu, ws().pool.heldout);
    EXPECT_EQ(library_digest(lib), before);
    EXPECT_EQ(r.name, "private-mu");

    EXPECT_THROW(run_zeroshot_eval(ws().base, &lib, &mu, ws().pool.train), ContractError);
}

TEST(Adaptation, ArgumentChecksAndDeterminism) {
    const std::vector<const TaskDataset*> one{ws().pool.heldout.front()};
    EXPECT_THROW(run_supervised_adaptation(ws().base, &private_library(), AdaptMethod::poly, one, 0.0, 1),
                 ContractError);
    EXPECT_THROW(run_supervised_adaptation(ws().base, &private_library(), AdaptMethod::poly, one, 1.5, 1),
                 ContractError);
    EXPECT_THROW(run_supervised_adaptation(ws().base, nullptr, AdaptMethod::lorahub, one, 1.0, 1), ContractError);
    AdaptConfig cfg;
    cfg.train.steps = 20;
    const EvalReport a = run_supervised_adaptation(ws().base, nullptr, AdaptMethod::none, one, 0.5, 4, cfg);
    const EvalReport b = run_supervised_adaptation(ws().base, nullptr, AdaptMethod::none, one, 0.5, 4, cfg);
    EXPECT_EQ(a.mean_log_likelihood, b.mean_log_likelihood);
    EXPECT_EQ(a.fingerprint, b.fingerprint);
    EXPECT_NE(a.fingerprint, run_supervised_adaptation(ws().base, nullptr, AdaptMethod::none, one, 0.5, 5, cfg).fingerprint);
    EXPECT_EQ(adapt_method_from_string("shared_init"), AdaptMethod::shared_init);
    EXPECT_THROW(adapt_method_from_string("x"), ContractError);
}

TEST(Transfer, DeterministicCsvAndAlternatingPairs) {
    const PipelineConfig cfg = small_config();
    const TransferResult a = run_transfer_experiment(ws().base, ws().pool.train, ws().pool.planted, cfg.transfer);
    const TransferResult b = run_transfer_experiment(ws().base, ws().pool.train, ws().pool.planted, cfg.transfer);
    ASSERT_EQ(a.records.size(), 4u);
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        EXPECT_EQ(a.records[i].same_cluster, i % 2 == 0);
    }
    std::ostringstream sa, sb;
    write_csv(sa, a);
    write_csv(sb, b);
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_EQ(sa.str().substr(0, sa.str().find('\n')),
              "task_i,task_j,same_cluster,weight_cosine_similarity,transfer_delta,diverged");
    EXPECT_LE(std::abs(a.pearson), 1.0);

    // Similarity against an independent cosine of the private adapters.
    const TransferRecord& r = a.records.front();
    const TaskDataset* pair[2] = {&ws().pool.task(r.task_i), &ws().pool.task(r.task_j)};
    const Library priv = build_private(ws().base, pair, {cfg.transfer.steps_per_task, 0.4}, cfg.transfer.build);
    const Vector fa = flatten_expert(priv.experts[0]).values;
    const Vector fb = flatten_expert(priv.experts[1]).values;
    const Eigen::Map<const Eigen::VectorXd> ea(fa.data(), static_cast<Eigen::Index>(fa.size()));
    const Eigen::Map<const Eigen::VectorXd> eb(fb.data(), static_cast<Eigen::Index>(fb.size()));
    EXPECT_NEAR(r.weight_cosine_similarity, ea.dot(eb) / (ea.norm() * eb.norm()), 1e-12);

    TransferConfig bad = cfg.transfer;
    bad.n_pairs = 1;
    EXPECT_THROW(run_transfer_experiment(ws().base, ws().pool.train, ws().pool.planted, bad), ContractError);
}

TEST(Ablation, ReportedSimilarityMatchesIndependentCosine) {
    PipelineConfig cfg = small_config();
    const ExperimentContext ctx = make_context(cfg, ws().pool, ws().base);
    const std::vector<AblationRow> rows = run_cluster_ablation(ctx, 4);
    ASSERT_EQ(rows.size(), 4u);
    for (const AblationRow& r : rows) {
        EXPECT_NEAR(r.mean_similarity, r.recomputed_similarity, 1e-12);
    }
    const ClusteredBuild cb = build_mbc(ws().base, ws().pool.train, cfg.budget, 4, cfg.build);
    std::vector<Eigen::VectorXd> flat;
    for (const Expert& e : cb.library.experts) {
        const Vector v = flatten_expert(e).values;
        flat.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    double sum = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < flat.size(); ++i) {
        for (std::size_t j = i + 1; j < flat.size(); ++j) {
            sum += flat[i].dot(flat[j]) / (flat[i].norm() * flat[j].norm());
            ++pairs;
        }
    }
    EXPECT_NEAR(rows[0].mean_similarity, sum / pairs, 1e-12);

    std::ostringstream a, b;
    write_csv(a, std::span<const AblationRow>(rows));
    write_csv(b, std::span<const AblationRow>(run_cluster_ablation(ctx, 4)));
    EXPECT_EQ(a.str(), b.str());
}

TEST(Sweep, RowsAndRangeChecks) {
    const ExperimentContext ctx = make_context(small_config(), ws().pool, ws().base);
    const std::vector<std::size_t> ks{1, 4};
    const std::vector<SweepRow> rows = run_cluster_sweep(ctx, ks);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1].k, 4u);
    EXPECT_LT(rows[0].upstream_valid, 0.0);
    const std::vector<std::size_t> zero{0};
    const std::vector<std::size_t> big{ctx.train.size() + 1};
    EXPECT_THROW(run_cluster_sweep(ctx, zero), ContractError);
    EXPECT_THROW(run_cluster_sweep(ctx, big), ContractError);
}

TEST(Output, SvgWritersProduceDocuments) {
    std::ostringstream s, h;
    write_scatter_svg(s, Vector{0.1, 0.5}, Vector{-1.0, 2.0}, "similarity", "transfer");
    write_histogram_svg(h, histogram(Vector{0.5, 1.5}, 4, 0.0, 2.0), "ratio");
    EXPECT_NE(s.str().find("<svg"), std::string::npos);
    EXPECT_NE(h.str().find("</svg>"), std::string::npos);
}
