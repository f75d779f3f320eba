// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <chrono>
#include <cstdio>
#include <future>
#include <sstream>
#include <string>

#include "modlib/libstore.hpp"
#include "oracles.hpp"

using namespace modlib;

namespace {

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
    std::printf("%s %2d %-28s %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
    std::fflush(stdout);
    failures += pass ? 0 : 1;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string triple(const Vector& v) { return fmt("[%.4f %.4f %.4f]", v[0], v[1], v[2]); }

// ---------------------------------------------------------------------------
// Structural criteria

void svd_oracle() {
    SplitMix64 rng(101);
    double sv_err = 0.0, angle = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = 2 + rng.uniform_index(127);
        const std::size_t r = 1 + rng.uniform_index(std::min<std::size_t>(8, d));
        const Matrix a = oracle::random_matrix(d, r, rng);
        const Matrix b = oracle::random_matrix(d, r, rng);
        const SvdResult s = low_rank_svd(a, b);
        const Eigen::MatrixXd prod = oracle::to_eigen(a) * oracle::to_eigen(b).transpose();
        Eigen::JacobiSVD<Eigen::MatrixXd> dense(prod, Eigen::ComputeThinV);
        if (s.rank() != r) {
            sv_err = INFINITY;
            continue;
        }
        for (std::size_t i = 0; i < r; ++i) {
            sv_err = std::max(sv_err, std::abs(s.singular_values[i] - dense.singularValues()(static_cast<Eigen::Index>(i))));
        }
        angle = std::max(angle, oracle::principal_angle(oracle::to_eigen(s.v).leftCols(1), dense.matrixV().leftCols(1)));
    }
    report(1, "factored-svd-oracle", sv_err <= 1e-9 && angle <= 1e-6,
           fmt("50 instances; max sv err %.2e (tol 1e-9), max angle %.2e (tol 1e-6)", sv_err, angle));
}

void arrow_rank_one() {
    SplitMix64 rng(102);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 2 + rng.uniform_index(63);
        Library lib;
        lib.rank = 1;
        Expert e{"e", {}, {}};
        e.adapters.push_back({0, oracle::random_matrix(d, 1, rng), oracle::random_matrix(d, 1, rng), 1.0});
        lib.experts.push_back(e);
        const PrototypeBank bank = arrow_init(lib);
        const Matrix& b = e.adapters[0].b;
        const double n = frobenius(b);
        double plus = 0.0, minus = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            plus = std::max(plus, std::abs(bank.layers[0](0, j) - b(j, 0) / n));
            minus = std::max(minus, std::abs(bank.layers[0](0, j) + b(j, 0) / n));
        }
        worst = std::max(worst, std::min(plus, minus));
    }
    report(2, "arrow-rank1-prototype", worst <= 1e-10, fmt("100 experts; max deviation %.2e (tol 1e-10)", worst));
}

struct RoutingFixture {
    ToyModel model;
    Library lib;
    std::vector<TaskDataset> tasks;

    RoutingFixture() {
        model = random_model(3, 8, 4, 103, 1.0, 0.1);
        freeze(model);
        lib.base_model_fingerprint = model.fingerprint;
        lib.rank = 2;
        lib.scaling = 2.0;
        SplitMix64 rng(104);
        for (int i = 0; i < 5; ++i) {
            Expert e = init_expert("e" + std::to_string(i), 3, 8, 2, 2.0, rng.next(), 0.3);
            for (LoraAdapter& ad : e.adapters) {
                ad.a = oracle::random_matrix(8, 2, rng, 0.3);
            }
            e.provenance.member_tasks = {i};
            lib.experts.push_back(std::move(e));
            Split s{oracle::random_matrix(16, 8, rng), oracle::random_matrix(16, 4, rng)};
            for (double& v : s.x.data()) {
                v += static_cast<double>(i) - 2.0;
            }
            tasks.push_back({i, s, {}, {}});
        }
    }
};

void routing_invariants() {
    const RoutingFixture fx;
    std::vector<const TaskDataset*> tptr;
    std::vector<const Split*> sptr;
    for (const TaskDataset& t : fx.tasks) {
        tptr.push_back(&t);
        sptr.push_back(&t.train);
    }
    constexpr std::size_t k = 2;
    SplitMix64 rng(105);
    double max_sum_err = 0.0;
    bool nonneg = true, support = true, flip = true;
    std::size_t checks = 0;
    for (RouterKind kind : {RouterKind::mu, RouterKind::arrow, RouterKind::cm, RouterKind::tp, RouterKind::oracle}) {
        const Router router = make_router({kind, k, 1.0, {}}, fx.lib, fx.model, sptr, tptr);
        const std::size_t want = kind == RouterKind::arrow || kind == RouterKind::cm ? k
                                 : kind == RouterKind::oracle                        ? 1
                                                                                     : fx.lib.size();
        for (int n = 0; n < 1000; ++n) {
            const LayerMixer mix = router.mixer(n % 5);
            const Vector x = oracle::random_vector(8, rng, 1.5);
            const ForwardResult f = forward(fx.model, fx.lib, mix, x);
            for (std::size_t l = 0; l < fx.model.depth(); ++l) {
                const Vector w = mix(l, f.trace.hidden[l]);
                double sum = 0.0;
                std::size_t nz = 0;
                for (double v : w) {
                    nonneg = nonneg && v >= 0.0;
                    sum += v;
                    nz += v > 0.0 ? 1 : 0;
                }
                max_sum_err = std::max(max_sum_err, std::abs(sum - 1.0));
                support = support && nz == want;
                ++checks;
                if (kind == RouterKind::arrow) {
                    Vector neg = f.trace.hidden[l];
                    for (double& v : neg) {
                        v = -v;
                    }
                    flip = flip && arrow_route(*router.bank, l, neg, k).weights == w;
                }
            }
        }
    }
    report(3, "routing-invariants", nonneg && support && flip && max_sum_err <= 1e-9,
           fmt("%zu distributions over 5 routers; nonneg=%d support=%d flip=%d max |sum-1| %.1e (tol 1e-9)", checks,
               nonneg, support, flip, max_sum_err));
}

void composition_exactness() {
    const RoutingFixture fx;
    SplitMix64 rng(106);
    bool one_hot = true;
    double mu_err = 0.0;
    for (std::size_t i = 0; i < fx.lib.size(); ++i) {
        Vector w(fx.lib.size(), 0.0);
        w[i] = 1.0;
        const Expert c = compose(fx.lib.experts, w);
        for (std::size_t l = 0; l < c.depth(); ++l) {
            one_hot = one_hot && c.adapters[l].a == fx.lib.experts[i].adapters[l].a &&
                      c.adapters[l].b == fx.lib.experts[i].adapters[l].b;
        }
    }
    const Router mu = make_router({}, fx.lib, fx.model);
    const Expert mean = compose(fx.lib.experts, mu_route(fx.lib.size()).weights);
    for (int n = 0; n < 200; ++n) {
        const Vector x = oracle::random_vector(8, rng);
        const Vector a = forward(fx.model, fx.lib, mu.mixer(0), x).y;
        const Vector b = forward(fx.model, &mean, nullptr, x).y;
        for (std::size_t j = 0; j < a.size(); ++j) {
            mu_err = std::max(mu_err, std::abs(a[j] - b[j]));
        }
    }
    report(4, "composition-exactness", one_hot && mu_err <= 1e-12,
           fmt("one-hot exact=%d; mu-route vs composed forward max err %.2e (tol 1e-12)", one_hot, mu_err));
}

void gradient_check() {
    constexpr double eps = 1e-5;
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        SplitMix64 rng(seed + 200);
        ToyModel m = random_model(3, 6, 4, seed, 1.0, 0.1);
        Expert e = init_expert("g", 3, 6, 2, 2.0, seed, 0.3);
        for (LoraAdapter& ad : e.adapters) {
            ad.a = oracle::random_matrix(6, 2, rng, 0.3);
        }
        const Split data{oracle::random_matrix(10, 6, rng), oracle::random_matrix(10, 4, rng)};
        std::vector<std::size_t> rows(10);
        std::iota(rows.begin(), rows.end(), 0);
        auto loss = [&] { return loss_and_grads(m, factors_of(e), e.scaling(), data, rows, nullptr, nullptr); };
        AdapterGrads ag = AdapterGrads::zeros_like(factors_of(e));
        BaseGrads bg = BaseGrads::zeros_like(m);
        loss_and_grads(m, factors_of(e), e.scaling(), data, rows, &ag, &bg);
        auto probe = [&](double& p, double g) {
            const double keep = p;
            p = keep + eps;
            const double up = loss();
            p = keep - eps;
            const double dn = loss();
            p = keep;
            const double fd = (up - dn) / (2 * eps);
            worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6}));
        };
        for (std::size_t l = 0; l < 3; ++l) {
            for (std::size_t i = 0; i < ag.a[l].size(); ++i) {
                probe(e.adapters[l].a.data()[i], ag.a[l].data()[i]);
                probe(e.adapters[l].b.data()[i], ag.b[l].data()[i]);
            }
            for (std::size_t i = 0; i < bg.weights[l].size(); ++i) {
                probe(m.weights[l].data()[i], bg.weights[l].data()[i]);
            }
            for (std::size_t i = 0; i < m.dim(); ++i) {
                probe(m.biases[l][i], bg.biases[l][i]);
            }
        }
        for (std::size_t i = 0; i < bg.head.size(); ++i) {
            probe(m.head.data()[i], bg.head.data()[i]);
        }
    }
    report(5, "gradient-finite-difference", worst <= 1e-4, fmt("5 seeds; max relative error %.2e (tol 1e-4)", worst));
}

// ---------------------------------------------------------------------------
// Trend criteria on the default benchmark, one run per seed

struct SeedRun {
    double ari = 0.0;
    double transfer_pearson = 0.0;
    std::size_t transfer_pairs = 0;
    double norm_fraction = 0.0;
    std::size_t norm_samples = 0;
    double up_oracle = 0.0, up_arrow = 0.0, up_mu = 0.0;
    double zs_mbc = 0.0, zs_private = 0.0, zs_base = 0.0;
    bool digest_unchanged = false;
    double poly_full = 0.0, polyz_full = 0.0, hub_full = 0.0;
    double poly_low = 0.0, polyz_low = 0.0;
    std::vector<SweepRow> sweep;
    std::vector<AblationRow> ablation;
    double seconds = 0.0;
};

SeedRun run_seed(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    PipelineConfig cfg;
    cfg.set_seed(seed);
    const std::unique_ptr<Workspace> ws = make_workspace(cfg);
    const TaskPool& pool = ws->pool;
    const ToyModel& base = ws->base;
    SeedRun out;

    const Library priv = build_private(base, pool.train, cfg.budget, cfg.build);
    const ClusteredBuild mbc = build_mbc(base, pool.train, cfg.budget, cfg.k, cfg.build, pool.planted);
    out.ari = mbc.report.ari_vs_planted;

    const TransferResult tr = run_transfer_experiment(base, pool.train, pool.planted, cfg.transfer);
    out.transfer_pearson = tr.pearson;
    out.transfer_pairs = tr.records.size() - tr.excluded;

    auto valid = [&](int id) -> const Split& { return pool.task(id).valid; };
    const NormRatioReport nr = run_norm_analysis(priv, base, valid, cfg.norm_samples, cfg.eval_seed);
    out.norm_fraction = nr.fraction_above_one;
    out.norm_samples = nr.samples.size();

    const std::vector<Router> routers{make_router({RouterKind::oracle}, priv, base),
                                      make_router({RouterKind::arrow}, priv, base),
                                      make_router({RouterKind::mu}, priv, base)};
    const std::vector<EvalReport> up = run_upstream_eval(base, priv, routers, pool.train);
    out.up_oracle = up[0].mean_log_likelihood;
    out.up_arrow = up[1].mean_log_likelihood;
    out.up_mu = up[2].mean_log_likelihood;

    const std::string d_priv = library_digest(priv), d_mbc = library_digest(mbc.library);
    const Router mu_priv = make_router({}, priv, base);
    const Router mu_mbc = make_router({}, mbc.library, base);
    out.zs_mbc = run_zeroshot_eval(base, &mbc.library, &mu_mbc, pool.heldout).mean_log_likelihood;
    out.zs_private = run_zeroshot_eval(base, &priv, &mu_priv, pool.heldout).mean_log_likelihood;
    out.zs_base = run_zeroshot_eval(base, nullptr, nullptr, pool.heldout).mean_log_likelihood;
    out.digest_unchanged = d_priv == library_digest(priv) && d_mbc == library_digest(mbc.library);

    auto adapt = [&](AdaptMethod m, double frac) {
        return run_supervised_adaptation(base, &mbc.library, m, pool.heldout, frac, cfg.eval_seed, cfg.adapt)
            .mean_log_likelihood;
    };
    out.poly_full = adapt(AdaptMethod::poly, 1.0);
    out.polyz_full = adapt(AdaptMethod::polyz, 1.0);
    out.hub_full = adapt(AdaptMethod::lorahub, 1.0);
    out.poly_low = adapt(AdaptMethod::poly, 0.005);
    out.polyz_low = adapt(AdaptMethod::polyz, 0.005);

    const ExperimentContext ctx = make_context(cfg, pool, base);
    out.sweep = run_cluster_sweep(ctx, cfg.k_values);
    out.ablation = run_cluster_ablation(ctx, cfg.k);
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

Vector column(const std::vector<SeedRun>& runs, auto field) {
    Vector v;
    for (const SeedRun& r : runs) {
        v.push_back(field(r));
    }
    return v;
}

double relative_degradation(double full, double low) { return (full - low) / std::abs(full); }

void trend_criteria(const std::vector<SeedRun>& runs) {
    const Vector ari = column(runs, [](const SeedRun& r) { return r.ari; });
    report(6, "planted-cluster-recovery", median(ari) >= 0.9, fmt("ARI %s median %.4f (>= 0.9)", triple(ari).c_str(), median(ari)));

    const Vector pr = column(runs, [](const SeedRun& r) { return r.transfer_pearson; });
    report(7, "transfer-correlation", median(pr) > 0.0,
           fmt("pearson %s median %.4f (> 0), %zu pairs", triple(pr).c_str(), median(pr), runs[0].transfer_pairs));

    const Vector nf = column(runs, [](const SeedRun& r) { return r.norm_fraction; });
    report(8, "norm-ratio", median(nf) >= 0.9,
           fmt("fraction_above_one %s median %.4f (>= 0.9), %zu samples", triple(nf).c_str(), median(nf),
               runs[0].norm_samples));

    const double o = median(column(runs, [](const SeedRun& r) { return r.up_oracle; }));
    const double a = median(column(runs, [](const SeedRun& r) { return r.up_arrow; }));
    const double m = median(column(runs, [](const SeedRun& r) { return r.up_mu; }));
    report(9, "upstream-ordering", o >= a && a >= m, fmt("median valid LL oracle %.4f >= arrow %.4f >= mu %.4f", o, a, m));

    const double zm = median(column(runs, [](const SeedRun& r) { return r.zs_mbc; }));
    const double zp = median(column(runs, [](const SeedRun& r) { return r.zs_private; }));
    const double zb = median(column(runs, [](const SeedRun& r) { return r.zs_base; }));
    bool intact = true;
    for (const SeedRun& r : runs) {
        intact = intact && r.digest_unchanged;
    }
    report(10, "zeroshot-ordering", zm >= zp && zp >= zb && intact,
           fmt("median test LL mbc-mu %.4f >= private-mu %.4f >= base %.4f; library digests unchanged=%d", zm, zp, zb,
               intact));

    const double pf = median(column(runs, [](const SeedRun& r) { return r.poly_full; }));
    const double zf = median(column(runs, [](const SeedRun& r) { return r.polyz_full; }));
    const double hf = median(column(runs, [](const SeedRun& r) { return r.hub_full; }));
    const double dpoly = median(column(runs, [](const SeedRun& r) { return relative_degradation(r.poly_full, r.poly_low); }));
    const double dpolyz =
        median(column(runs, [](const SeedRun& r) { return relative_degradation(r.polyz_full, r.polyz_low); }));
    report(11, "supervised-ordering", pf >= zf && pf >= hf && dpolyz < dpoly,
           fmt("median LL poly %.4f, polyz %.4f, lorahub %.4f; degradation at 0.5%%: polyz %.4f < poly %.4f", pf, zf,
               hf, dpolyz, dpoly));

    const std::size_t nk = runs[0].sweep.size();
    Vector med(nk);
    std::string curve;
    std::size_t best = 0;
    for (std::size_t i = 0; i < nk; ++i) {
        Vector v;
        for (const SeedRun& r : runs) {
            v.push_back(r.sweep[i].heldout);
        }
        med[i] = median(v);
        curve += fmt("K=%zu:%.4f ", runs[0].sweep[i].k, med[i]);
        best = med[i] > med[best] ? i : best;
    }
    report(12, "cluster-sweep-optimum", runs[0].sweep[best].k == 4,
           fmt("median held-out LL %sargmax K=%zu (want 4)", curve.c_str(), runs[0].sweep[best].k));

    auto method_median = [&](ClusterMethod cm) {
        Vector v;
        for (const SeedRun& r : runs) {
            for (const AblationRow& row : r.ablation) {
                if (row.method == cm) {
                    v.push_back(row.heldout);
                }
            }
        }
        return median(v);
    };
    double sim_err = 0.0;
    for (const SeedRun& r : runs) {
        for (const AblationRow& row : r.ablation) {
            sim_err = std::max(sim_err, std::abs(row.mean_similarity - row.recomputed_similarity));
        }
    }
    const double rt = method_median(ClusterMethod::random_task);
    const double re = method_median(ClusterMethod::random_examples);
    const double mb = method_median(ClusterMethod::mbc);
    const double em = method_median(ClusterMethod::embeddings);
    report(13, "cluster-ablation-ordering", rt > re && mb >= em && sim_err <= 1e-12,
           fmt("median held-out LL random_task %.4f > random_examples %.4f; mbc %.4f >= embeddings %.4f; similarity "
               "recompute err %.1e (tol 1e-12)",
               rt, re, mb, em, sim_err));
}

// ---------------------------------------------------------------------------
// Determinism and persistence

std::string slurp_tree(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() != ".lock") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::string all;
    for (const fs::path& p : files) {
        const Bytes b = read_bytes(p);
        all += fs::relative(p, dir).string() + '\n' + std::string(b.begin(), b.end());
    }
    return all;
}

void determinism_and_persistence() {
    const fs::path root = fs::temp_directory_path() / ("modlib-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(root);
    PipelineConfig cfg;
    cfg.benchmark.train_samples = 64;
    cfg.benchmark.valid_samples = 32;
    cfg.benchmark.test_samples = 32;
    cfg.budget.steps_per_task = 60;
    cfg.set_seed(7);

    std::string csv[2];
    for (int run = 0; run < 2; ++run) {
        const std::unique_ptr<Workspace> ws = make_workspace(cfg);
        const ClusteredBuild cb = build_mbc(ws->base, ws->pool.train, cfg.budget, cfg.k, cfg.build, ws->pool.planted);
        const fs::path dir = root / ("run" + std::to_string(run));
        save_benchmark(ws->bench, ws->split, dir / "benchmark");
        save_model(ws->base, dir / "base");
        save_library(cb.library, dir / "mbc", Json{{"ari", cb.report.ari_vs_planted}});
        const Router arrow = make_router({RouterKind::arrow}, cb.library, ws->base);
        save_prototypes(*arrow.bank, dir / "prototypes");
        const std::vector<EvalReport> up = run_upstream_eval(ws->base, cb.library, std::span(&arrow, 1), ws->pool.train);
        std::ostringstream os;
        write_csv(os, std::span<const EvalReport>(up));
        csv[run] = os.str();
    }
    const bool bytes_equal = slurp_tree(root / "run0") == slurp_tree(root / "run1") && csv[0] == csv[1];

    const std::unique_ptr<Workspace> ws = make_workspace(cfg);
    const ClusteredBuild cb = build_mbc(ws->base, ws->pool.train, cfg.budget, cfg.k, cfg.build);
    const Library loaded = load_library(root / "run0" / "mbc");
    bool exact = loaded.size() == cb.library.size();
    for (std::size_t i = 0; exact && i < loaded.size(); ++i) {
        for (std::size_t l = 0; l < loaded.experts[i].depth(); ++l) {
            const Matrix* pairs[2][2] = {{&loaded.experts[i].adapters[l].a, &cb.library.experts[i].adapters[l].a},
                                         {&loaded.experts[i].adapters[l].b, &cb.library.experts[i].adapters[l].b}};
            for (auto& pr : pairs) {
                for (std::size_t j = 0; j < pr[1]->size(); ++j) {
                    exact = exact && pr[0]->data()[j] == static_cast<double>(static_cast<float>(pr[1]->data()[j]));
                }
            }
        }
    }
    exact = exact && load_model(root / "run0" / "base").fingerprint == ws->base.fingerprint;

    const fs::path blob = root / "run1" / "mbc" / "experts" / "0" / "layer0.a.mlib";
    Bytes b = read_bytes(blob);
    b[b.size() / 2] ^= 0x40;
    write_bytes(blob, b);
    bool detected = false;
    try {
        load_library(root / "run1" / "mbc");
    } catch (const IntegrityError&) {
        detected = true;
    }
    fs::remove_all(root);
    report(14, "determinism-persistence", bytes_equal && exact && detected,
           fmt("byte-identical artifacts and CSV=%d; f32-exact round trip=%d; corrupted blob detected=%d", bytes_equal,
               exact, detected));
}

}  // namespace

int main() {
    const auto t0 = std::chrono::steady_clock::now();
    try {
        svd_oracle();
        arrow_rank_one();
        routing_invariants();
        composition_exactness();
        gradient_check();

        std::vector<std::future<SeedRun>> jobs;
        for (std::uint64_t seed : {1, 2, 3}) {
            jobs.push_back(std::async(std::launch::async, run_seed, seed));
        }
        std::vector<SeedRun> runs;
        for (auto& j : jobs) {
            runs.push_back(j.get());
        }
        trend_criteria(runs);
        determinism_and_persistence();
    } catch (const std::exception& e) {
        std::printf("FAIL    aborted: %s\n", e.what());
        return 2;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%d criteria failed; %.1f s\n", failures, secs);
    return failures == 0 ? 0 : 1;
}
