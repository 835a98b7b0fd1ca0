// kwest: command-line front end.
//
// Exit codes: 0 success, 2 invalid input, 3 tolerance or numerical failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kwest/harness.hpp"
#include "kwest/io.hpp"
#include "kwest/qfm.hpp"
#include "kwest/width_sdp.hpp"

using namespace kwest;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string body;
    std::string config;
    std::string out = "kwest_out";
    std::uint64_t seed = 0;
    int threads = 1;
    bool timing = false;
};

void add_common(CLI::App* app, Common& c, bool body) {
    if (body) app->add_option("--body", c.body, "body description (JSON)")->required()->check(CLI::ExistingFile);
    app->add_option("--config", c.config, "estimation config overrides (JSON)")->check(CLI::ExistingFile);
    app->add_option("--out", c.out, "output directory")->capture_default_str();
    app->add_option("--seed", c.seed, "random seed")->capture_default_str();
}

EstimationConfig load_config(const Common& c) {
    EstimationConfig cfg;
    if (!c.config.empty()) apply_config(read_json(c.config), cfg);
    cfg.seed = c.seed;
    return cfg;
}

fs::path out_dir(const Common& c) {
    const fs::path p(c.out);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw InvalidInput("cannot create output directory " + c.out + ": " + ec.message());
    return p;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw InvalidInput("cannot write " + p.string());
    return f;
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

std::string fd(double x) { return format_double(x); }

void warn_capped(bool capped) {
    if (capped) std::cerr << "warning: width solve stopped at the iteration cap\n";
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    for (const auto& f : detail::split(s, ',')) {
        double x;
        if (!detail::parse_double(f, x)) throw InvalidInput("not a number: " + f);
        out.push_back(x);
    }
    return out;
}

// ---------------------------------------------------------------------------

int cmd_width(const Common& c, double sigma, int m_opt, double dtilde_opt) {
    const ConvexBody body = load_body(c.body);
    const EstimationConfig cfg = load_config(c);
    const int n = body.dim();
    const double dtilde = dtilde_opt > 0.0 ? dtilde_opt : 2.0 * body.outer_radius();
    int m = m_opt;
    if (m < 0) {
        detail::require(sigma > 0.0, "width: give --m or --sigma > 0");
        m = select_width_rank(dtilde, sigma, n, cfg.C);
    }
    WidthSdpConfig wc = cfg.width;
    wc.C = cfg.C;
    const auto oracle = make_oracle(body, cfg.oracle)->intersect(dtilde / 2.0);
    const WidthSdpResult r = solve_width_sdp(oracle->body(), m, *oracle, wc, c.seed);
    warn_capped(r.capped);

    const fs::path dir = out_dir(c);
    auto f = open_out(dir / "width.csv");
    write_csv_row(f, {"n", "m", "dtilde", "C", "kappa", "best_value", "bound_dtilde2_over_C2", "iterations",
                      "iteration_budget", "theoretical_iterations", "capped", "degenerate", "fail_budget"});
    write_csv_row(f, {std::to_string(n), std::to_string(m), fd(dtilde), fd(wc.C), fd(oracle->kappa()),
                      fd(r.best_value), fd(dtilde * dtilde / (wc.C * wc.C)), std::to_string(r.iterations_run),
                      std::to_string(r.iteration_budget), fd(r.theoretical_iterations), r.capped ? "1" : "0",
                      r.degenerate ? "1" : "0", fd(r.nominal_fail_budget)});
    auto g = open_out(dir / "width_matrix.csv");
    std::vector<std::string> header;
    for (int j = 0; j < n; ++j) header.push_back("a" + std::to_string(j + 1));
    write_csv_row(g, header);
    for (int i = 0; i < n; ++i) {
        std::vector<std::string> row;
        for (int j = 0; j < n; ++j) row.push_back(fd(r.A_star2(i, j)));
        write_csv_row(g, row);
    }
    write_json(dir / "width.json", {{"body", body.spec() ? body_spec_to_json(*body.spec()) : json(body.key())},
                                    {"m", m},
                                    {"dtilde", dtilde},
                                    {"seed", c.seed},
                                    {"config", config_to_json(cfg)},
                                    {"X_star2", detail::matrix_json(r.X_star2.matrix())}});
    std::cout << "m = " << m << ", sup p^T X p = " << r.best_value << " (d^2/C^2 = " << dtilde * dtilde / (wc.C * wc.C)
              << ")\n";
    return 0;
}

int cmd_qfm_check(const Common& c, int trials) {
    detail::require(trials >= 1, "qfm-check: trials must be >= 1");
    const ConvexBody body = load_body(c.body);
    const EstimationConfig cfg = load_config(c);
    const auto oracle = make_oracle(body, cfg.oracle);
    const int n = body.dim();
    const fs::path dir = out_dir(c);
    auto f = open_out(dir / "qfm_check.csv");
    write_csv_row(f, {"trial", "oracle_value", "relax_upper", "brute_force", "ratio", "kappa", "within_kappa",
                      "gauge"});
    int ok = 0;
    for (int t = 0; t < trials; ++t) {
        Rng rng = make_rng(derive_seed(c.seed, 11, static_cast<std::uint64_t>(t)));
        Eigen::MatrixXd G(n, n);
        for (int i = 0; i < n; ++i) G.row(i) = gaussian_vector(n, rng).transpose();
        const SymmetricMatrix X(G * G.transpose() / n);
        const QfmResult r = oracle->maximize(X, derive_seed(c.seed, 12, static_cast<std::uint64_t>(t)), 1e-3);
        const QfmResult b = qfm_bruteforce(body, X, cfg.oracle.brute_starts, derive_seed(c.seed, 13, t));
        const double kappa = std::isnan(r.kappa) ? 1.0 : r.kappa;
        const bool within = r.value * kappa >= b.value * (1.0 - 1e-9);
        ok += within;
        write_csv_row(f, {std::to_string(t), fd(r.value), fd(r.relax_upper), fd(b.value),
                          fd(b.value > 0.0 ? r.value / b.value : 1.0), fd(r.kappa), within ? "1" : "0",
                          fd(body.gauge(r.point))});
    }
    std::cout << ok << "/" << trials << " oracle values within kappa of the brute-force maximum\n";
    return 0;
}

int cmd_estimate(const Common& c, const std::string& y_path, double sigma, bool project) {
    const ConvexBody body = load_body(c.body);
    EstimationConfig cfg = load_config(c);
    if (project) cfg.project_early_return = true;
    const Eigen::VectorXd Y = read_vector_file(y_path);
    const EstimationResult r = run_gsm(body, Y, sigma, cfg);
    for (const auto& it : r.trace.iterations) warn_capped(it.width_capped);

    const fs::path dir = out_dir(c);
    auto f = open_out(dir / "estimate.csv");
    write_csv_row(f, {"index", "y", "estimate"});
    for (Eigen::Index i = 0; i < Y.size(); ++i)
        write_csv_row(f, {std::to_string(i), fd(Y(i)), fd(r.estimate(i))});
    auto g = open_out(dir / "trace.csv");
    write_csv_row(g, {"j", "dtilde", "m", "oracle_value", "step_norm", "fail_budget", "width_iterations",
                      "width_capped"});
    for (const auto& it : r.trace.iterations)
        write_csv_row(g, {std::to_string(it.j), fd(it.dtilde), std::to_string(it.m), fd(it.oracle_value),
                          fd(it.step_norm), fd(it.fail_budget), std::to_string(it.width_iterations),
                          it.width_capped ? "1" : "0"});
    write_json(dir / "estimate.json", {{"estimate", detail::vector_json(r.estimate)},
                                       {"sigma", sigma},
                                       {"config", config_to_json(cfg)},
                                       {"trace", trace_to_json(r.trace)}});
    std::cout << r.trace.iterations.size() << " iterations, |estimate| = " << r.estimate.norm()
              << ", gauge = " << body.gauge(r.estimate) << '\n';
    return 0;
}

int cmd_regress(const Common& c, const std::string& data_path, double sigma, bool center) {
    const ConvexBody body = load_body(c.body);
    const EstimationConfig cfg = load_config(c);
    RegressionData d = read_regression_csv(data_path);
    if (center) d = center_pairs(d);
    const EstimationResult r = run_regression(body, d, cfg, sigma);
    for (const auto& it : r.trace.iterations) warn_capped(it.width_capped);

    const fs::path dir = out_dir(c);
    auto f = open_out(dir / "regression.csv");
    write_csv_row(f, {"index", "beta"});
    for (Eigen::Index i = 0; i < r.estimate.size(); ++i) write_csv_row(f, {std::to_string(i), fd(r.estimate(i))});
    auto g = open_out(dir / "trace.csv");
    write_csv_row(g, {"j", "dtilde", "m", "oracle_value", "step_norm", "inner_iterations", "width_capped"});
    for (const auto& it : r.trace.iterations)
        write_csv_row(g, {std::to_string(it.j), fd(it.dtilde), std::to_string(it.m), fd(it.oracle_value),
                          fd(it.step_norm), std::to_string(it.inner_iterations), it.width_capped ? "1" : "0"});
    write_json(dir / "regression.json", {{"estimate", detail::vector_json(r.estimate)},
                                         {"samples", d.samples()},
                                         {"centered", d.centered},
                                         {"sigma", sigma},
                                         {"config", config_to_json(cfg)},
                                         {"trace", trace_to_json(r.trace)}});
    std::cout << d.samples() << " samples, |beta| = " << r.estimate.norm() << '\n';
    return 0;
}

int run_plan(const Common& c, ExperimentPlan& plan, const std::string& name) {
    plan.seed = c.seed;
    plan.threads = c.threads;
    plan.config = load_config(c);
    const fs::path dir = out_dir(c);
    const RiskReport rep = mc_risk(plan);
    auto f = open_out(dir / (name + ".csv"));
    write_csv(f, rep, c.timing);
    write_json(dir / (name + ".json"), plan_to_json(plan));
    std::ostringstream os;
    write_csv(os, rep, c.timing);
    std::cout << os.str();
    return 0;
}

int cmd_bench(Common& c, int n, const std::string& sigmas, int trials, const std::string& suite, int N) {
    ExperimentPlan plan = suite == "regression" ? regression_suite_plan(n, trials) : gsm_suite_plan(n, trials);
    if (suite != "regression" && suite != "gsm") throw InvalidInput("bench: --suite must be gsm or regression");
    if (!c.body.empty()) plan.bodies = {{fs::path(c.body).stem().string(), load_body(c.body)}};
    if (!sigmas.empty()) plan.sigmas = parse_list(sigmas);
    if (N > 0) plan.sample_sizes = {N};
    return run_plan(c, plan, suite == "regression" ? "regression_risk" : "risk");
}

int cmd_robust_bench(Common& c, int n, int N, double sigma, const std::string& eps, const std::string& advs,
                     int trials, const std::string& noise) {
    ExperimentPlan plan = robust_suite_plan(n, trials);
    if (!c.body.empty()) plan.bodies = {{fs::path(c.body).stem().string(), load_body(c.body)}};
    if (N > 0) plan.sample_sizes = {N};
    plan.sigmas = {sigma};
    if (!eps.empty()) plan.contaminations = parse_list(eps);
    if (!advs.empty()) {
        plan.adversaries.clear();
        for (const auto& a : detail::split(advs, ',')) plan.adversaries.push_back(parse_adversary(a));
    }
    plan.noise = parse_noise_model(noise);
    return run_plan(c, plan, "robust_risk");
}

int cmd_fixtures(const Common& c, int n, int trials) {
    const fs::path dir = out_dir(c);
    auto f = open_out(dir / "fixtures.csv");
    write_csv_row(f, {"check", "body", "n", "value", "expected_or_bound", "pass"});
    bool all = true;
    for (int k : {2, 9, 100, n}) {
        if (k < 2) continue;
        const NonQcoWitness w = check_non_qco_witness(k);
        all = all && w.pass;
        write_csv_row(f, {"non_qco_witness", "mixed_norm", std::to_string(k), fd(w.norm_w_sq), fd(w.expected),
                          w.pass ? "1" : "0"});
    }
    const std::vector<std::pair<std::string, ConvexBody>> bodies{
        {"ellipsoid", ConvexBody::ellipsoid(ellipsoid_suite_axes(n))},
        {"l4_ball", ConvexBody::pball(n, 4.0)},
        {"box", ConvexBody::box(Eigen::VectorXd::LinSpaced(n, 0.5, 2.0))},
        {"euclidean_ball", ConvexBody::ball(n)}};
    for (std::size_t i = 0; i < bodies.size(); ++i) {
        const Type2Report r = check_qco_type2(bodies[i].second, trials, derive_seed(c.seed, 21, i));
        all = all && r.pass;
        write_csv_row(f, {"qco_type2_max_ratio", bodies[i].first, std::to_string(n), fd(r.max_ratio), fd(r.bound),
                          r.pass ? "1" : "0"});
    }
    std::cout << (all ? "all fixture checks pass\n" : "some fixture checks FAIL\n");
    return all ? 0 : 3;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Estimation over convex bodies via Kolmogorov-width shrinkage"};
    app.require_subcommand(1);

    Common common;
    double sigma = 1.0, dtilde = -1.0;
    int m = -1, trials = 200, n = 32, N = 0;
    std::string y_path, data_path, sigmas, eps, advs, suite = "gsm", noise = "student_t3";
    bool project = false, center = false;

    auto* width = app.add_subcommand("width", "solve the Kolmogorov-width SDP for a body");
    add_common(width, common, true);
    width->add_option("--sigma", sigma, "noise level used to pick the rank m")->capture_default_str();
    width->add_option("--m", m, "rank (overrides --sigma)");
    width->add_option("--dtilde", dtilde, "localization diameter (default 2R)");

    auto* qfm = app.add_subcommand("qfm-check", "compare a body's QFM oracle against brute force");
    add_common(qfm, common, true);
    qfm->add_option("--trials", trials, "random PSD instances")->capture_default_str();

    auto* est = app.add_subcommand("estimate", "estimate the mean from one observation Y = mu + sigma g");
    add_common(est, common, true);
    est->add_option("--y", y_path, "observation (JSON array or one-column CSV)")->required()->check(CLI::ExistingFile);
    est->add_option("--sigma", sigma, "noise level")->required();
    est->add_flag("--project", project, "project Y onto the body on the low-noise early return");

    auto* reg = app.add_subcommand("regress", "constrained linear regression from (Y, Z) records");
    add_common(reg, common, true);
    reg->add_option("--data", data_path, "CSV rows y,z1,...,zn")->required()->check(CLI::ExistingFile);
    reg->add_option("--sigma", sigma, "noise level (0: noiseless constrained least squares)")->capture_default_str();
    reg->add_flag("--center", center, "difference consecutive pairs first");

    auto* bench = app.add_subcommand("bench", "Monte Carlo risk of the sequence-model estimators");
    add_common(bench, common, false);
    bench->add_option("--body", common.body, "body description (default: the suite ellipsoid)")
        ->check(CLI::ExistingFile);
    bench->add_option("--n", n, "dimension of the suite ellipsoid")->capture_default_str();
    bench->add_option("--sigmas", sigmas, "comma-separated noise levels");
    bench->add_option("--trials", trials, "trials per cell")->capture_default_str();
    bench->add_option("--suite", suite, "gsm or regression")->capture_default_str();
    bench->add_option("--N", N, "sample size (regression suite)");
    bench->add_option("--threads", common.threads, "worker threads (0: all cores)")->capture_default_str();
    bench->add_flag("--timing", common.timing, "add a wall-clock column");

    auto* rb = app.add_subcommand("robust-bench", "Monte Carlo risk of the robust estimator under contamination");
    add_common(rb, common, false);
    rb->add_option("--body", common.body, "body description (default: the suite ellipsoid)")->check(CLI::ExistingFile);
    rb->add_option("--n", n, "dimension of the suite ellipsoid")->capture_default_str();
    rb->add_option("--N", N, "samples per trial (default 20 n)");
    rb->add_option("--sigma", sigma, "noise scale")->capture_default_str();
    rb->add_option("--eps", eps, "comma-separated contamination fractions");
    rb->add_option("--adversaries", advs, "comma-separated: far_cluster, mean_shift, top_eigenvector");
    rb->add_option("--noise", noise, "gaussian or student_t3")->capture_default_str();
    rb->add_option("--trials", trials, "trials per cell")->capture_default_str();
    rb->add_option("--threads", common.threads, "worker threads (0: all cores)")->capture_default_str();
    rb->add_flag("--timing", common.timing, "add a wall-clock column");

    auto* fx = app.add_subcommand("fixtures-check", "type-2 and non-QCO fixture checks");
    add_common(fx, common, false);
    fx->add_option("--n", n, "dimension")->capture_default_str();
    fx->add_option("--trials", trials, "Monte Carlo batches")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (width->parsed()) return cmd_width(common, sigma, m, dtilde);
        if (qfm->parsed()) return cmd_qfm_check(common, trials);
        if (est->parsed()) return cmd_estimate(common, y_path, sigma, project);
        if (reg->parsed()) return cmd_regress(common, data_path, sigma, center);
        if (bench->parsed()) return cmd_bench(common, n, sigmas, trials, suite, N);
        if (rb->parsed()) {
            if (!rb->count("--n") && !rb->count("--N")) n = 16;
            return cmd_robust_bench(common, n, N, sigma, eps, advs, trials, noise);
        }
        if (fx->parsed()) {
            if (!fx->count("--n")) n = 16;
            if (!fx->count("--trials")) trials = 10000;
            return cmd_fixtures(common, n, trials);
        }
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ToleranceNotMet& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
