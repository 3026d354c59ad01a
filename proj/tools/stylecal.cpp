// stylecal command line: single transfers, symmetry sweeps, the method bench,
// the study service, desk fixtures and model calibration.

#include <stylecal/fixtures.hpp>
#include <stylecal/harness.hpp>
#include <stylecal/study.hpp>
#include <stylecal/symmetry.hpp>

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

using namespace stylecal;
namespace fs = std::filesystem;

namespace {

std::vector<transfer::Method> parse_methods(const std::string& list) {
    std::vector<transfer::Method> out;
    if (list.empty() || list == "all") {
        for (const auto& [m, _] : transfer::method_names()) out.push_back(m);
        return out;
    }
    std::stringstream ss(list);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(transfer::parse_method(item));
    return out;
}

nn::NetworkSpec network(const std::string& weights, std::uint64_t seed) {
    return weights.empty() ? nn::make_desk_network(seed) : nn::load_weights(weights);
}

httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stylecal: style transfer losses, E/C statistics and method comparison"};
    app.require_subcommand(1);

    std::string net_weights;
    std::uint64_t net_seed = 1;
    app.add_option("--net", net_weights, "network weights file (default: the seeded desk network)");
    app.add_option("--net-seed", net_seed, "seed of the desk network");

    // transfer
    auto* tr = app.add_subcommand("transfer", "run one style transfer");
    std::string method = "Gatys", style_path, content_path, out_path, trace_path;
    transfer::TransferConfig cfg;
    tr->add_option("--method", method, "method name")->capture_default_str();
    tr->add_option("--style", style_path, "style image (PNG or PPM)")->required();
    tr->add_option("--content", content_path, "content image (PNG or PPM)")->required();
    tr->add_option("--weight", cfg.style_weight, "style weight")->capture_default_str();
    tr->add_option("--iters", cfg.iterations, "L-BFGS iterations")->capture_default_str();
    tr->add_option("--seed", cfg.seed, "noise seed")->capture_default_str();
    tr->add_option("--width", cfg.working_width, "working width")->capture_default_str();
    tr->add_option("--gal-outer", cfg.gal.outer_iters, "GAL outer iterations")->capture_default_str();
    tr->add_option("--gal-inner", cfg.gal.inner_iters, "GAL L-BFGS iterations per block")->capture_default_str();
    tr->add_option("--out", out_path, "output image")->required();
    tr->add_option("--trace", trace_path, "loss trace CSV");

    // symmetry-check
    auto* sc = app.add_subcommand("symmetry-check", "verify constructed symmetries on whitened random features");
    int channels = 6, positions = 500, trials = 100;
    std::uint64_t sym_seed = 1;
    std::string mode = "point", report;
    sc->add_option("--channels", channels)->capture_default_str();
    sc->add_option("--positions", positions)->capture_default_str();
    sc->add_option("--mode", mode, "point or homog")->check(CLI::IsMember({"point", "homog"}))->capture_default_str();
    sc->add_option("--trials", trials)->capture_default_str();
    sc->add_option("--seed", sym_seed)->capture_default_str();
    sc->add_option("--report", report, "per-trial CSV");

    // bench
    auto* be = app.add_subcommand("bench", "run the method comparison and write reports");
    std::string methods = "all", dataset = "desk", styles_dir, contents_dir, gt_manifest, bench_out, models_path;
    int threads = 1, n_weights = 0, n_pairs = 15;
    std::uint64_t data_seed = 1;
    bool full_budget = false;
    int bench_iters = 0, bench_width = 64;
    be->add_option("--methods", methods, "comma separated, or all")->capture_default_str();
    be->add_option("--dataset", dataset, "desk, main or aggressive")
        ->check(CLI::IsMember({"desk", "main", "aggressive"}))
        ->capture_default_str();
    be->add_option("--styles", styles_dir, "style image directory (default: desk fixtures)");
    be->add_option("--contents", contents_dir, "content image directory");
    be->add_option("--gt", gt_manifest, "ground-truth manifest for the contents");
    be->add_option("--out", bench_out, "bench directory (ledger, images, reports)")->required();
    be->add_option("--models", models_path, "calibrated models JSON (default: unit weights)");
    be->add_option("--threads", threads)->capture_default_str();
    be->add_option("--weights", n_weights, "number of weights (default 4 for desk, 20 otherwise)");
    be->add_option("--pairs", n_pairs, "pairs per weight for main/aggressive")->capture_default_str();
    be->add_option("--seed", data_seed, "dataset seed")->capture_default_str();
    be->add_option("--iters", bench_iters, "override L-BFGS iterations");
    be->add_option("--width", bench_width, "working width")->capture_default_str();
    be->add_flag("--full-budget", full_budget, "use the full optimiser budget instead of the desk one");

    // serve
    auto* sv = app.add_subcommand("serve", "serve the pairwise study over HTTP");
    std::string pool_dir, log_path, host = "127.0.0.1";
    int port = 8080;
    std::uint64_t serve_seed = std::random_device{}();
    sv->add_option("--pool", pool_dir, "bench directory holding pool.json")->required();
    sv->add_option("--log", log_path, "click log (JSON lines)")->required();
    sv->add_option("--port", port)->capture_default_str();
    sv->add_option("--host", host)->capture_default_str();
    sv->add_option("--seed", serve_seed, "pair sampling seed");

    // fixtures
    auto* fx = app.add_subcommand("fixtures", "write the desk styles, contents and ground truth");
    std::string fx_out;
    int fx_styles = 5, fx_contents = 10, fx_size = 64;
    fx->add_option("--out", fx_out)->required();
    fx->add_option("--styles", fx_styles)->capture_default_str();
    fx->add_option("--contents", fx_contents)->capture_default_str();
    fx->add_option("--size", fx_size)->capture_default_str();

    // calibrate
    auto* ca = app.add_subcommand("calibrate", "fit E and C models from a click log");
    std::string clicks_path, cal_pool, cal_out;
    ca->add_option("--clicks", clicks_path)->required();
    ca->add_option("--pool", cal_pool, "bench directory holding pool.json")->required();
    ca->add_option("--out", cal_out, "models JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*tr) {
            cfg.method = transfer::parse_method(method);
            const auto net = network(net_weights, net_seed);
            const auto r = transfer::run_transfer(read_image(style_path), read_image(content_path), net, cfg);
            write_image(r.image, out_path);
            if (!trace_path.empty()) transfer::write_trace_csv(r.trace, trace_path);
            if (!r.trace.empty())
                std::cout << "final loss " << transfer::format_number(r.trace.back().total) << " after " << r.trace.size()
                          << " trace rows\n";
            return 0;
        }

        if (*sc) {
            const auto m = mode == "point" ? symmetry::MapMode::PointSample : symmetry::MapMode::Homogeneous;
            const auto rows = symmetry::symmetry_sweep(channels, positions, m, trials, sym_seed);
            if (!report.empty()) symmetry::write_sweep_csv(rows, report);
            double constraint = 0, within = 0, pred = 0, generic = std::numeric_limits<double>::infinity();
            for (const auto& r : rows) {
                constraint = std::max(constraint, r.constraint_error);
                within = std::max(within, r.first_layer_deviation);
                pred = std::max(pred, r.prediction_error);
                if (r.b_norm > 0) generic = std::min(generic, r.generic_cross);
            }
            std::cout << "trials " << rows.size() << "\n"
                      << "max constraint error " << constraint << "\n"
                      << "max within-layer Gram deviation " << within << "\n"
                      << "max cross-layer prediction error " << pred << "\n"
                      << "min generic cross-layer deviation " << generic << "\n";
            return 0;
        }

        if (*be) {
            harness::BenchInputs in;
            if (styles_dir.empty()) {
                if (!contents_dir.empty() || !gt_manifest.empty())
                    throw std::invalid_argument("--contents and --gt need --styles");
                in = harness::inputs_from(fixtures::desk_set());
            } else {
                if (contents_dir.empty() || gt_manifest.empty())
                    throw std::invalid_argument("--styles needs --contents and --gt");
                in.styles = harness::load_image_dir(styles_dir);
                in.contents = harness::load_image_dir(contents_dir);
                in.ground_truth = coherence::load_manifest(gt_manifest);
                for (const auto& [id, _] : in.contents)
                    if (!in.ground_truth.count(id)) throw std::invalid_argument("no ground truth for content " + id);
            }
            const auto styles = harness::keys_of(in.styles), contents = harness::keys_of(in.contents);
            const auto ms = parse_methods(methods);
            std::vector<harness::Job> jobs;
            if (dataset == "desk") {
                const int w = n_weights > 0 ? n_weights : 4;
                jobs = harness::plan(ms, harness::desk_dataset(styles, contents, w),
                                     harness::desk_dataset(styles, contents, w, harness::DatasetKind::Aggressive));
            } else {
                const harness::DatasetOptions o{n_weights > 0 ? n_weights : 20, n_pairs};
                const auto main_set = harness::build_dataset(harness::DatasetKind::Main, styles, contents, data_seed, o);
                const auto aggr_set = harness::build_dataset(harness::DatasetKind::Aggressive, styles, contents, data_seed, o);
                jobs = dataset == "main" ? harness::plan(ms, main_set, aggr_set) : harness::plan(ms, aggr_set);
            }
            harness::BenchOptions opt;
            opt.transfer = full_budget ? transfer::TransferConfig{} : harness::desk_transfer_config();
            opt.transfer.working_width = bench_width;
            if (bench_iters > 0) opt.transfer.iterations = bench_iters;
            opt.dir = bench_out;
            opt.threads = threads;
            const auto net = network(net_weights, net_seed);
            const auto basis = harness::style_basis(in, net, bench_width);
            const auto models = models_path.empty() ? calibration::default_models() : calibration::load_models(models_path);
            std::set<std::string> keys;
            for (const auto& j : jobs)
                keys.insert(transfer::to_string(j.method) + '|' + j.triple.style_id + '|' + j.triple.content_id + '|' +
                            transfer::format_number(j.triple.weight));
            std::cout << jobs.size() << " trials planned, " << keys.size() << " distinct\n";
            const auto run = harness::run_matrix(jobs, net, basis, models, in, opt);
            int failed = 0;
            for (const auto& t : run.trials) failed += !t.ok();
            std::cout << run.computed << " computed, " << run.trials.size() << " in ledger, " << failed << " failed\n";
            harness::write_reports(run.trials, models, bench_out);
            harness::write_pool(run.trials, in, bench_out);
            std::ifstream summary(fs::path(bench_out) / "summary.csv");
            std::cout << summary.rdbuf();
            return 0;
        }

        if (*sv) {
            study::Study s(study::load_pool(pool_dir), log_path, serve_seed);
            httplib::Server server;
            study::install_routes(server, s);
            g_server = &server;
            std::signal(SIGINT, [](int) {
                if (g_server) g_server->stop();
            });
            std::cout << "serving " << s.pool().images.size() << " images on http://" << host << ":" << port << "\n"
                      << std::flush;
            if (!server.listen(host, port)) throw std::runtime_error("cannot listen on port " + std::to_string(port));
            return 0;
        }

        if (*fx) {
            const auto d = fixtures::desk_set(fx_styles, fx_contents, fx_size);
            fs::create_directories(fs::path(fx_out) / "styles");
            fs::create_directories(fs::path(fx_out) / "contents");
            std::map<std::string, coherence::GroundTruth> gts;
            for (size_t i = 0; i < d.styles.size(); ++i)
                write_png(d.styles[i], (fs::path(fx_out) / "styles" / (d.style_ids[i] + ".png")).string());
            for (size_t i = 0; i < d.contents.size(); ++i) {
                write_png(d.contents[i].image, (fs::path(fx_out) / "contents" / (d.content_ids[i] + ".png")).string());
                gts[d.content_ids[i]] = d.contents[i].gt;
            }
            coherence::save_manifest(gts, (fs::path(fx_out) / "gt" / "manifest.json").string());
            std::cout << d.styles.size() << " styles, " << d.contents.size() << " contents written to " << fx_out << "\n";
            return 0;
        }

        if (*ca) {
            const auto pool = study::load_pool(cal_pool);
            const auto clicks = calibration::read_clicks(clicks_path);
            const auto stats = pool.image_stats();
            calibration::Models models;
            for (const std::string family : {"E", "C"}) {
                const auto pairs = calibration::pairs_from_clicks(clicks, stats, family);
                std::cout << family << ": " << pairs.size() << " clicks\n";
                const auto sel = calibration::select_model(pairs, family);
                for (const auto& m : sel.candidates) {
                    std::cout << "  ";
                    for (size_t i = 0; i < m.theta.size(); ++i) std::cout << m.feature_names[i] << "=" << m.theta[i] << " ";
                    std::cout << "acc=" << m.cv_accuracy << "+-" << m.cv_stderr << (m.admissible ? "" : " inadmissible")
                              << (m == sel.chosen ? " <- chosen" : "") << "\n";
                }
                (family == "E" ? models.e : models.c) = sel.chosen;
            }
            calibration::save_models(models, cal_out);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
