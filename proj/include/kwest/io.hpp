#pragma once
// JSON and CSV input/output (vendored nlohmann/json).

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "errors.hpp"
#include "estimators.hpp"
#include "geometry.hpp"
#include "harness.hpp"

namespace kwest {

using nlohmann::json;

namespace detail {

inline double json_number(const json& j, const char* what) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    }
    throw InvalidInput(std::string(what) + ": expected a number");
}

inline Eigen::VectorXd json_vector(const json& j, const char* what) {
    require(j.is_array() && !j.empty(), std::string(what) + ": expected a non-empty array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = json_number(j[i], what);
    return v;
}

inline Eigen::MatrixXd json_matrix(const json& j, const char* what) {
    require(j.is_array() && !j.empty() && j[0].is_array(), std::string(what) + ": expected an array of rows");
    const std::size_t rows = j.size(), cols = j[0].size();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows; ++i) {
        require(j[i].is_array() && j[i].size() == cols, std::string(what) + ": ragged rows");
        for (std::size_t c = 0; c < cols; ++c)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = json_number(j[i][c], what);
    }
    return m;
}

inline json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline json matrix_json(const Eigen::MatrixXd& m) {
    json out = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(vector_json(m.row(i).transpose()));
    return out;
}

inline json number_json(double x) {
    if (std::isinf(x)) return "inf";
    return x;
}

} // namespace detail

/**
 * @brief Parses a body description.
 *
 *   {"type": "ellipsoid", "semi_axes": [...]}
 *   {"type": "box", "half_widths": [...]}
 *   {"type": "pball", "n": 8, "p": 4, "radius": 1}           p may be "inf"
 *   {"type": "norm_image", "A": [[...], ...], "inner": "lp" | "mixed", "p": 4}
 *   {"type": "intersection", "base": {...}, "radius": 0.5}
 *
 * Optional "t2_bound" and "kappa_bound" override the declared constants.
 */
inline BodySpec body_spec_from_json(const json& j) {
    using detail::require;
    require(j.is_object() && j.contains("type") && j["type"].is_string(), "body: missing \"type\"");
    const std::string type = j["type"];
    BodySpec s;
    try {
        if (type == "ellipsoid") {
            s.shape = EllipsoidSpec{detail::json_vector(j.at("semi_axes"), "semi_axes")};
        } else if (type == "box") {
            s.shape = BoxSpec{detail::json_vector(j.at("half_widths"), "half_widths")};
        } else if (type == "pball") {
            s.shape = PBallSpec{j.at("n").get<int>(), detail::json_number(j.at("p"), "p"),
                                j.contains("radius") ? detail::json_number(j["radius"], "radius") : 1.0};
        } else if (type == "norm_image") {
            NormImageSpec ni;
            ni.A = detail::json_matrix(j.at("A"), "A");
            const std::string inner = j.value("inner", std::string("lp"));
            require(inner == "lp" || inner == "mixed", "norm_image: inner must be \"lp\" or \"mixed\"");
            ni.inner = inner == "lp" ? InnerNorm::lp : InnerNorm::mixed;
            ni.p = j.contains("p") ? detail::json_number(j["p"], "p") : 2.0;
            s.shape = ni;
        } else if (type == "intersection") {
            s.shape = IntersectionSpec{std::make_shared<const BodySpec>(body_spec_from_json(j.at("base"))),
                                       detail::json_number(j.at("radius"), "radius")};
        } else {
            throw InvalidInput("body: unknown type \"" + type + "\"");
        }
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("body: ") + e.what());
    }
    if (j.contains("t2_bound")) s.t2_bound = detail::json_number(j["t2_bound"], "t2_bound");
    if (j.contains("kappa_bound")) s.kappa_bound = detail::json_number(j["kappa_bound"], "kappa_bound");
    validate(s);
    return s;
}

inline json body_spec_to_json(const BodySpec& s) {
    json j = std::visit(
        [](const auto& v) -> json {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, EllipsoidSpec>)
                return {{"type", "ellipsoid"}, {"semi_axes", detail::vector_json(v.semi_axes)}};
            else if constexpr (std::is_same_v<T, BoxSpec>)
                return {{"type", "box"}, {"half_widths", detail::vector_json(v.half_widths)}};
            else if constexpr (std::is_same_v<T, PBallSpec>)
                return {{"type", "pball"}, {"n", v.n}, {"p", detail::number_json(v.p)}, {"radius", v.radius}};
            else if constexpr (std::is_same_v<T, NormImageSpec>)
                return {{"type", "norm_image"},
                        {"A", detail::matrix_json(v.A)},
                        {"inner", v.inner == InnerNorm::lp ? "lp" : "mixed"},
                        {"p", detail::number_json(v.p)}};
            else
                return {{"type", "intersection"}, {"base", body_spec_to_json(*v.base)}, {"radius", v.radius}};
        },
        s.shape);
    if (s.t2_bound) j["t2_bound"] = *s.t2_bound;
    if (s.kappa_bound) j["kappa_bound"] = *s.kappa_bound;
    return j;
}

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline json read_json(const std::string& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw InvalidInput(path + ": " + e.what());
    }
}

inline ConvexBody load_body(const std::string& path) { return ConvexBody::from_spec(body_spec_from_json(read_json(path))); }

/**
 * @brief Applies overrides from a config object onto `cfg`.
 *
 * Keys: C, L_tilde, C_pilot, max_iter_cap, gamma, box_slack, fixed_rounds, brute_starts,
 * relax_iters, dual_iters, project_early_return, regression_min_ratio, inner_max_iter, seed.
 */
inline void apply_config(const json& j, EstimationConfig& cfg) {
    detail::require(j.is_object(), "config: expected an object");
    static const char* known[] = {"C",           "L_tilde",       "C_pilot",     "max_iter_cap",
                                  "gamma",       "box_slack",     "fixed_rounds", "brute_starts",
                                  "relax_iters", "dual_iters",    "project_early_return",
                                  "regression_min_ratio",         "inner_max_iter", "seed"};
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* name : known) ok = ok || k == name;
        detail::require(ok, "config: unknown key \"" + k + "\"");
    }
    try {
        cfg.C = j.value("C", cfg.C);
        cfg.L_tilde = j.value("L_tilde", cfg.L_tilde);
        cfg.C_pilot = j.value("C_pilot", cfg.C_pilot);
        cfg.width.max_iter_cap = j.value("max_iter_cap", cfg.width.max_iter_cap);
        cfg.width.gamma = j.value("gamma", cfg.width.gamma);
        cfg.oracle.box_slack = j.value("box_slack", cfg.oracle.box_slack);
        cfg.oracle.fixed_rounds = j.value("fixed_rounds", cfg.oracle.fixed_rounds);
        cfg.oracle.brute_starts = j.value("brute_starts", cfg.oracle.brute_starts);
        cfg.oracle.relax_iters = j.value("relax_iters", cfg.oracle.relax_iters);
        cfg.oracle.dual_iters = j.value("dual_iters", cfg.oracle.dual_iters);
        cfg.project_early_return = j.value("project_early_return", cfg.project_early_return);
        cfg.regression_min_ratio = j.value("regression_min_ratio", cfg.regression_min_ratio);
        cfg.inner_max_iter = j.value("inner_max_iter", cfg.inner_max_iter);
        cfg.seed = j.value("seed", cfg.seed);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("config: ") + e.what());
    }
    cfg.validate();
}

inline json config_to_json(const EstimationConfig& cfg) {
    return {{"C", cfg.C},
            {"L_tilde", cfg.L_tilde},
            {"C_pilot", cfg.C_pilot},
            {"max_iter_cap", cfg.width.max_iter_cap},
            {"gamma", cfg.width.gamma},
            {"box_slack", cfg.oracle.box_slack},
            {"fixed_rounds", cfg.oracle.fixed_rounds},
            {"brute_starts", cfg.oracle.brute_starts},
            {"relax_iters", cfg.oracle.relax_iters},
            {"dual_iters", cfg.oracle.dual_iters},
            {"project_early_return", cfg.project_early_return},
            {"regression_min_ratio", cfg.regression_min_ratio},
            {"inner_max_iter", cfg.inner_max_iter},
            {"seed", cfg.seed}};
}

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline bool parse_double(const std::string& s, double& x) {
    std::size_t pos = 0;
    try {
        x = std::stod(s, &pos);
    } catch (const std::exception&) {
        return false;
    }
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    return pos == s.size();
}

/// Numeric CSV rows; a first line that does not parse is taken as a header.
inline std::vector<std::vector<double>> read_numeric_csv(const std::string& path) {
    std::istringstream in(read_text(path));
    std::vector<std::vector<double>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        std::vector<double> row;
        bool ok = true;
        for (const auto& f : split(line, ',')) {
            double x;
            ok = ok && parse_double(f, x);
            row.push_back(x);
        }
        if (!ok) {
            require(rows.empty() && lineno == 1, path + ": non-numeric field on line " + std::to_string(lineno));
            continue;
        }
        require(rows.empty() || row.size() == rows[0].size(), path + ": ragged row on line " + std::to_string(lineno));
        rows.push_back(std::move(row));
    }
    require(!rows.empty(), path + ": no data rows");
    return rows;
}

} // namespace detail

/// Observation vector from a JSON array or a CSV holding one column or one row.
inline Eigen::VectorXd read_vector_file(const std::string& path) {
    const std::string text = read_text(path);
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && (text[first] == '[' || text[first] == '{')) {
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw InvalidInput(path + ": " + e.what());
        }
        if (j.is_object()) {
            detail::require(j.contains("y"), path + ": expected an array or an object with \"y\"");
            j = j["y"];
        }
        return detail::json_vector(j, "observation");
    }
    const auto rows = detail::read_numeric_csv(path);
    if (rows.size() == 1) return Eigen::Map<const Eigen::VectorXd>(rows[0].data(), static_cast<Eigen::Index>(rows[0].size()));
    detail::require(rows[0].size() == 1, path + ": expected one column or one row");
    Eigen::VectorXd v(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) v(static_cast<Eigen::Index>(i)) = rows[i][0];
    return v;
}

/// Regression records: each row is (Y, Z_1, ..., Z_n).
inline RegressionData read_regression_csv(const std::string& path) {
    const auto rows = detail::read_numeric_csv(path);
    detail::require(rows[0].size() >= 2, path + ": need a response and at least one covariate");
    RegressionData d;
    const Eigen::Index N = static_cast<Eigen::Index>(rows.size()), n = static_cast<Eigen::Index>(rows[0].size()) - 1;
    d.Z.resize(N, n);
    d.Y.resize(N);
    for (Eigen::Index i = 0; i < N; ++i) {
        d.Y(i) = rows[static_cast<std::size_t>(i)][0];
        for (Eigen::Index c = 0; c < n; ++c) d.Z(i, c) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c + 1)];
    }
    d.validate();
    return d;
}

inline json trace_to_json(const EstimationTrace& tr) {
    json its = json::array();
    for (const auto& r : tr.iterations)
        its.push_back({{"j", r.j},
                       {"dtilde", r.dtilde},
                       {"m", r.m},
                       {"oracle_value", r.oracle_value},
                       {"step_norm", r.step_norm},
                       {"fail_budget", r.fail_budget},
                       {"width_iterations", r.width_iterations},
                       {"width_capped", r.width_capped},
                       {"blocks", r.blocks},
                       {"inner_iterations", r.inner_iterations}});
    json iterates = json::array();
    for (const auto& x : tr.iterates) iterates.push_back(detail::vector_json(x));
    return {{"iterations", its},
            {"iterates", iterates},
            {"estimate", detail::vector_json(tr.estimate)},
            {"r", tr.r},
            {"max_iterations", tr.max_iterations},
            {"early_return", tr.early_return},
            {"aborted", tr.aborted},
            {"abort_reason", tr.abort_reason},
            {"fail_budget", tr.fail_budget()}};
}

/// Sidecar describing a plan, written next to its CSV report.
inline json plan_to_json(const ExperimentPlan& p) {
    json bodies = json::array();
    for (const auto& b : p.bodies) {
        json e{{"id", b.id}, {"key", b.body.key()}};
        if (b.body.spec()) e["spec"] = body_spec_to_json(*b.body.spec());
        bodies.push_back(e);
    }
    json adv = json::array();
    for (Adversary a : p.adversaries) adv.push_back(to_string(a));
    return {{"suite", to_string(p.suite)},
            {"bodies", bodies},
            {"sigmas", p.sigmas},
            {"sample_sizes", p.sample_sizes},
            {"contaminations", p.contaminations},
            {"adversaries", adv},
            {"estimators", p.resolved_estimators()},
            {"trials", p.trials},
            {"seed", p.seed},
            {"signal", to_string(p.signal)},
            {"noise", to_string(p.noise)},
            {"robust_method", p.robust_method == RobustMeanMethod::geometric_median ? "geometric_median"
                                                                                    : "coordinatewise_median"},
            {"config", config_to_json(p.config)}};
}

} // namespace kwest
