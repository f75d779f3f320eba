// SPDX-License-Identifier: Apache-2.0
//
// modlib command line: generate tasks, pretrain the base, build libraries,
// evaluate routers, adapt to held-out tasks and run the experiments.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "modlib/evalharness.hpp"
#include "modlib/libstore.hpp"

namespace {

using namespace modlib;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::string config_file;
    std::string out;
    std::optional<std::uint64_t> seed;
};

fs::path out_root(const Globals& g) {
    if (!g.out.empty()) {
        return g.out;
    }
    if (const char* env = std::getenv("MODLIB_OUT"); env != nullptr && *env != '\0') {
        return env;
    }
    return "modlib-out";
}

PipelineConfig load_pipeline(const Globals& g) {
    PipelineConfig cfg;
    if (!g.config_file.empty()) {
        try {
            apply_config(cfg, load_config(g.config_file));
        } catch (const ContractError& e) {
            throw UsageError(e.what());
        }
    }
    if (g.seed) {
        cfg.set_seed(*g.seed);
    }
    cfg.transfer.build = cfg.build;
    cfg.transfer.steps_per_task = cfg.budget.steps_per_task;
    return cfg;
}

void write_file(const fs::path& p, const std::string& text) {
    write_text(p, text);
    std::cout << "wrote " << p.string() << '\n';
}

template <class F>
std::string render(F&& f) {
    std::ostringstream os;
    f(os);
    return os.str();
}

struct Loaded {
    StoredBenchmark bench;
    TaskPool pool;
    ToyModel base;
};

std::unique_ptr<Loaded> load_inputs(const fs::path& root) {
    auto l = std::make_unique<Loaded>();
    l->bench = load_benchmark(root / "benchmark");
    l->pool = make_pool(l->bench);
    l->base = load_model(root / "base");
    return l;
}

Json report_json(const ClusteringReport& r) {
    Json j;
    j["method"] = std::string(to_string(r.method));
    j["assignment"] = r.assignment.labels;
    j["k"] = r.assignment.k;
    j["mean_pairwise_cluster_similarity"] = r.mean_pairwise_cluster_similarity;
    j["similarity_degenerate"] = r.similarity_degenerate;
    j["ari_vs_planted"] = r.ari_vs_planted;
    return j;
}

Router build_router(const RouterOptions& opt, const Library& lib, const Loaded& in) {
    std::vector<Split> data;
    if (opt.kind == RouterKind::cm) {
        data = member_training_data(lib, in.pool);
    }
    std::vector<const Split*> ptrs;
    for (const Split& s : data) {
        ptrs.push_back(&s);
    }
    return make_router(opt, lib, in.base, ptrs, in.pool.train);
}

void check_router_options(const RouterOptions& opt) {
    if (opt.top_k < 1) {
        throw UsageError("--top-k must be >= 1");
    }
    if (!(opt.temperature > 0.0)) {
        throw UsageError("--temperature must be > 0");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"modlib: adapter libraries, clustering and routing on synthetic tasks"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config_file, "key=value config file")->check(CLI::ExistingFile);
    app.add_option("--out", g.out, "output root (default $MODLIB_OUT or ./modlib-out)");
    app.add_option("--seed", g.seed, "sets every seed (overrides the config)");

    auto* gen = app.add_subcommand("gen-tasks", "generate the synthetic benchmark");
    auto* pre = app.add_subcommand("pretrain-base", "pretrain and freeze the base model");

    auto* build = app.add_subcommand("build-library", "build an adapter library");
    std::string mode = "private";
    std::optional<std::size_t> k;
    std::optional<double> fraction;
    std::string lib_name = "library";
    build->add_option("--mode", mode, "library type")
        ->check(CLI::IsMember({"private", "shared", "mbc", "poly", "random-task", "random-examples", "embeddings"}));
    build->add_option("--k", k, "number of clusters / skills")->check(CLI::PositiveNumber);
    build->add_option("--clustering-fraction", fraction, "share of steps spent on private adapters")
        ->check(CLI::Range(0.0, 1.0));
    build->add_option("--name", lib_name, "library directory under the output root");

    auto* route = app.add_subcommand("route-eval", "evaluate a router over a library");
    std::string router_name = "mu";
    std::optional<long> top_k;
    std::optional<double> temperature;
    route->add_option("--router", router_name)->check(CLI::IsMember({"mu", "arrow", "cm", "tp", "oracle"}));
    route->add_option("--top-k", top_k);
    route->add_option("--temperature", temperature);
    route->add_option("--library", lib_name, "library directory under the output root");

    auto* adapt = app.add_subcommand("adapt", "supervised adaptation on held-out tasks");
    std::string method = "poly";
    std::optional<double> data_fraction;
    adapt->add_option("--method", method)->check(CLI::IsMember({"poly", "polyz", "lorahub", "none", "shared-init"}));
    adapt->add_option("--data-fraction", data_fraction);
    adapt->add_option("--library", lib_name, "library directory under the output root");

    auto* exp = app.add_subcommand("experiment", "run an experiment and write CSV/SVG");
    std::string which;
    exp->add_option("name", which)
        ->required()
        ->check(CLI::IsMember({"transfer", "norm-ratio", "k-sweep", "cluster-ablation", "upstream"}));

    auto* inspect = app.add_subcommand("inspect", "print a library manifest and cluster report");
    std::string inspect_dir;
    inspect->add_option("dir", inspect_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        PipelineConfig cfg = load_pipeline(g);
        const fs::path root = out_root(g);

        if (*gen) {
            const Benchmark b = generate_benchmark(cfg.benchmark);
            save_benchmark(b, heldout_split(b.specs, cfg.benchmark), root / "benchmark");
            std::cout << "benchmark: " << b.datasets.size() << " tasks -> " << (root / "benchmark").string() << '\n';
        } else if (*pre) {
            const StoredBenchmark sb = load_benchmark(root / "benchmark");
            const ToyModel base = pretrain_base(cfg.pretrain, make_pool(sb).train_mixture());
            save_model(base, root / "base");
            std::cout << "base " << base.fingerprint << " -> " << (root / "base").string() << '\n';
        } else if (*build) {
            if (k) {
                cfg.k = *k;
            }
            if (fraction) {
                cfg.budget.clustering_fraction = *fraction;
            }
            const auto in = load_inputs(root);
            const auto& tasks = in->pool.train;
            if (cfg.k > tasks.size()) {
                throw UsageError("--k exceeds the number of training tasks");
            }
            Library lib;
            Json report = nullptr;
            if (mode == "private") {
                lib = build_private(in->base, tasks, cfg.budget, cfg.build);
            } else if (mode == "shared") {
                lib = build_shared(in->base, tasks, cfg.budget, cfg.build);
            } else if (mode == "poly") {
                PolyLibrary p = build_poly(in->base, tasks, cfg.budget, cfg.k, cfg.build);
                report = {{"task_ids", p.task_ids}, {"z", p.z.data()}, {"rows", p.z.rows()}, {"cols", p.z.cols()}};
                lib = std::move(p.skills);
            } else {
                const ClusterMethod m = cluster_method_from_string(mode);
                ClusteredBuild cb = build_clustered(in->base, tasks, cfg.budget, cfg.k, m, cfg.build, in->pool.planted);
                report = report_json(cb.report);
                lib = std::move(cb.library);
            }
            save_library(lib, root / lib_name, report);
            std::cout << lib.builder << " library with " << lib.size() << " experts -> " << (root / lib_name).string()
                      << '\n';
        } else if (*route) {
            cfg.router.kind = router_kind_from_string(router_name);
            if (top_k) {
                if (*top_k < 1) {
                    throw UsageError("--top-k must be >= 1");
                }
                cfg.router.top_k = static_cast<std::size_t>(*top_k);
            }
            if (temperature) {
                cfg.router.temperature = *temperature;
            }
            check_router_options(cfg.router);
            const auto in = load_inputs(root);
            const Library lib = load_library(root / lib_name);
            const Router r = build_router(cfg.router, lib, *in);
            if (r.bank) {
                save_prototypes(*r.bank, root / (lib_name + "-prototypes-" + router_name));
            }
            std::vector<EvalReport> reps;
            reps.push_back(evaluate_router(in->base, lib, r, in->pool.train, SplitKind::valid, "upstream-" + router_name));
            if (r.kind != RouterKind::oracle && r.kind != RouterKind::tp) {
                EvalReport z = run_zeroshot_eval(in->base, &lib, &r, in->pool.heldout);
                z.name = "heldout-" + router_name;
                reps.push_back(std::move(z));
            }
            for (const EvalReport& rep : reps) {
                std::cout << rep.name << ": mean log-likelihood " << rep.mean_log_likelihood << ", mse " << rep.mean_mse
                          << '\n';
            }
            write_file(root / ("route-eval-" + lib_name + "-" + router_name + ".csv"),
                       render([&](std::ostream& os) { write_csv(os, std::span<const EvalReport>(reps)); }));
        } else if (*adapt) {
            if (data_fraction) {
                cfg.data_fraction = *data_fraction;
            }
            if (!(cfg.data_fraction > 0.0) || cfg.data_fraction > 1.0) {
                throw UsageError("--data-fraction must be in (0, 1]");
            }
            const AdaptMethod am = adapt_method_from_string(method);
            const auto in = load_inputs(root);
            std::optional<Library> lib;
            if (am != AdaptMethod::none) {
                lib = load_library(root / lib_name);
            }
            const EvalReport rep = run_supervised_adaptation(in->base, lib ? &*lib : nullptr, am, in->pool.heldout,
                                                             cfg.data_fraction, cfg.eval_seed, cfg.adapt);
            std::cout << rep.name << ": mean log-likelihood " << rep.mean_log_likelihood << '\n';
            std::ostringstream name;
            name << "adapt-" << method << "-" << cfg.data_fraction << ".csv";
            write_file(root / name.str(), render([&](std::ostream& os) { write_csv(os, std::span(&rep, 1)); }));
        } else if (*exp) {
            const auto in = load_inputs(root);
            const ExperimentContext ctx = make_context(cfg, in->pool, in->base);
            if (which == "transfer") {
                const TransferResult r = run_transfer_experiment(in->base, in->pool.train, in->pool.planted, cfg.transfer);
                std::cout << "pearson " << r.pearson << ", spearman " << r.spearman << ", excluded " << r.excluded << '\n';
                write_file(root / "transfer.csv", render([&](std::ostream& os) { write_csv(os, r); }));
                Vector xs, ys;
                for (const TransferRecord& t : r.records) {
                    if (!t.diverged) {
                        xs.push_back(t.weight_cosine_similarity);
                        ys.push_back(t.transfer_delta);
                    }
                }
                write_file(root / "transfer.svg", render([&](std::ostream& os) {
                               write_scatter_svg(os, xs, ys, "weight cosine similarity", "transfer");
                           }));
            } else if (which == "norm-ratio") {
                const Library lib = build_private(in->base, in->pool.train, cfg.budget, cfg.build);
                const NormRatioReport r = run_norm_analysis(
                    lib, in->base, [&](int id) -> const Split& { return in->pool.task(id).valid; }, cfg.norm_samples,
                    cfg.eval_seed);
                std::cout << "fraction above one " << r.fraction_above_one << ", excluded " << r.excluded << '\n';
                write_file(root / "norm_ratio.csv", render([&](std::ostream& os) { write_csv(os, r); }));
                write_file(root / "norm_ratio.svg",
                           render([&](std::ostream& os) { write_histogram_svg(os, r.histogram, "norm ratio"); }));
            } else if (which == "k-sweep") {
                const auto rows = run_cluster_sweep(ctx, cfg.k_values);
                write_file(root / "k_sweep.csv", render([&](std::ostream& os) { write_csv(os, std::span(rows)); }));
            } else if (which == "cluster-ablation") {
                const auto rows = run_cluster_ablation(ctx, cfg.k);
                write_file(root / "cluster_ablation.csv",
                           render([&](std::ostream& os) { write_csv(os, std::span(rows)); }));
            } else {
                const Library lib = build_private(in->base, in->pool.train, cfg.budget, cfg.build);
                std::vector<Router> routers;
                for (RouterKind kind : {RouterKind::oracle, RouterKind::arrow, RouterKind::mu, RouterKind::cm, RouterKind::tp}) {
                    RouterOptions o = cfg.router;
                    o.kind = kind;
                    check_router_options(o);
                    routers.push_back(build_router(o, lib, *in));
                }
                const auto reps = run_upstream_eval(in->base, lib, routers, in->pool.train);
                for (const EvalReport& rep : reps) {
                    std::cout << rep.name << ": " << rep.mean_log_likelihood << '\n';
                }
                write_file(root / "upstream.csv", render([&](std::ostream& os) { write_csv(os, std::span(reps)); }));
            }
        } else if (*inspect) {
            const Json m = read_manifest(inspect_dir);
            std::cout << "builder: " << m.at("builder").get<std::string>() << '\n';
            std::cout << "base model: " << m.at("base_model_fingerprint").get<std::string>() << '\n';
            std::cout << "rank " << m.at("rank") << ", scaling " << m.at("scaling") << ", training steps "
                      << m.at("training_steps") << '\n';
            std::cout << "experts: " << m.at("experts").size() << '\n';
            for (const Json& e : m.at("experts")) {
                std::cout << "  " << e.at("name").get<std::string>() << " [" << e.at("provenance").get<std::string>()
                          << "] tasks " << e.at("member_tasks").dump() << '\n';
            }
            if (m.contains("report")) {
                std::cout << "report: " << m.at("report").dump(2) << '\n';
            }
            std::cout << "content hash: " << m.at("content_hash").get<std::string>() << '\n';
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
