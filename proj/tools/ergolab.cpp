// ergolab command line: direct constructions, estimators and configured experiments.
// Exit status: 0 when every check passes (or an estimate was produced), 1 when a check
// fails, 2 on invalid input or a module error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "ergolab/harness.hpp"

using namespace ergolab;

namespace {

// Inline JSON or the path of a JSON file.
Json json_arg(const std::string& text, const std::string& what) {
    try {
        const auto first = text.find_first_not_of(" \t\n");
        if (first != std::string::npos && (text[first] == '{' || text[first] == '[')) return Json::parse(text);
        std::ifstream in(text);
        require(in.good(), ErrorCode::InvalidConfig, what + ": '" + text + "' is neither JSON nor a readable file");
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, what + ": " + e.what());
    }
}

// Symbol partition of the first shift component, else the half-interval of the rotation.
Partition default_partition(const SystemSpec& spec) {
    if (auto c = detail::find_component(spec, [](const SystemSpec& s) { return s.is_shift(); }))
        return Partition::symbol(spec.component(*c).alphabet(), *c);
    return Partition::half_interval(detail::rotation_component(spec));
}

Partition partition_arg(const std::string& text, const SystemSpec& spec) {
    return text.empty() ? default_partition(spec) : Partition::from_json(json_arg(text, "partition"));
}

void emit(const Json& j, const std::string& out) {
    if (out.empty()) {
        std::cout << j.dump(2) << "\n";
        return;
    }
    if (const auto parent = std::filesystem::path(out).parent_path(); !parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream f(out, std::ios::binary);
    require(f.good(), ErrorCode::InvalidConfig, "cannot write '" + out + "'");
    f << j.dump(2) << "\n";
}

int finish(const RunReport& r, const std::string& out) {
    std::cerr << r.summary() << (r.pass() ? "PASS" : "FAIL") << " (" << r.seconds << " s)\n";
    emit(r.to_json(), out);
    return r.pass() ? 0 : 1;
}

struct Common {
    std::string system;
    std::size_t samples = 0;
    std::uint64_t seed = 42;
    unsigned threads = 1;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool samples_required) {
    cmd->add_option("--system", c.system, "SystemSpec as JSON text or file")->required();
    auto* s = cmd->add_option("--samples", c.samples, "Monte Carlo sample count");
    if (samples_required) s->required();
    cmd->add_option("--seed", c.seed, "Root seed")->capture_default_str();
    cmd->add_option("--threads", c.threads, "Parallel width (results do not depend on it)")->capture_default_str();
    cmd->add_option("--out", c.out, "Write the JSON report to this file instead of stdout");
}

RunReport run_direct(const std::string& experiment, const Common& c, Json params) {
    Json j{{"experiment", experiment}, {"system", json_arg(c.system, "--system")}, {"seed", c.seed}, {"threads", c.threads}, {"params", params}};
    if (c.samples) j["samples"] = c.samples;
    return run_experiment(ExperimentConfig::from_json(j));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ergolab: towers, perturbations and estimators for measure-preserving systems"};
    app.require_subcommand(1);
    int status = 0;

    // tower
    Common tc;
    std::string tower_a;
    std::int64_t tower_n = 0;
    auto* tower = app.add_subcommand("tower", "Build a Kakutani-Rokhlin tower and audit it");
    add_common(tower, tc, true);
    tower->add_option("--A", tower_a, "Base set as a SetQuery JSON (default: the system's default base)");
    tower->add_option("--N", tower_n, "Tower height")->required();
    tower->callback([&] {
        status = finish(run_direct("tower", tc, Json{{"A", tower_a.empty() ? Json(nullptr) : json_arg(tower_a, "--A")}, {"N", tower_n}}), tc.out);
    });

    // rosenblatt
    Common rc;
    std::int64_t ros_n = 10;
    double ros_eps = 0.5;
    std::int64_t ros_gap = 65536;
    std::string ros_mode = "orbit";
    auto* ros = app.add_subcommand("rosenblatt", "Break Rosenblatt mixing of a binary partition and measure the witness");
    add_common(ros, rc, true);
    ros->add_option("--n", ros_n, "Block length")->required();
    ros->add_option("--eps", ros_eps, "Perturbation budget")->required();
    ros->add_option("--mode", ros_mode, "Sampling mode: orbit|independent")->capture_default_str();
    ros->add_option("--orbit-gap", ros_gap, "Gap between orbit samples")->capture_default_str();
    ros->callback([&] {
        status = finish(run_direct("rosenblatt", rc, Json{{"n", ros_n}, {"eps", ros_eps}, {"mode", ros_mode}, {"orbit_gap", ros_gap}}), rc.out);
    });

    // encode
    Common ec;
    std::int64_t enc_n = 840;
    double enc_eps = 0.5;
    std::string enc_p, enc_q;
    auto* enc = app.add_subcommand("encode", "Encode a factor partition into a perturbation and decode it back");
    add_common(enc, ec, false);
    enc->add_option("--n", enc_n, "Tower height")->required();
    enc->add_option("--eps", enc_eps, "Perturbation budget")->required();
    enc->add_option("--P", enc_p, "Binary partition to perturb (JSON)");
    enc->add_option("--Q", enc_q, "Factor partition to encode (JSON)");
    enc->callback([&] {
        Json params{{"n", enc_n}, {"eps", enc_eps}};
        if (!enc_p.empty()) params["P"] = json_arg(enc_p, "--P");
        if (!enc_q.empty()) params["Q"] = json_arg(enc_q, "--Q");
        status = finish(run_direct("encode-factor", ec, params), ec.out);
    });

    // estimate
    auto* est = app.add_subcommand("estimate", "Run a single estimator and print its JSON");
    est->require_subcommand(1);
    Common sc;
    std::size_t est_n = 1, est_k = 0;
    std::string est_p, est_q, est_other;
    bool conditional = false;
    const auto add_estimator = [&](const std::string& name, const std::string& help) {
        auto* cmd = est->add_subcommand(name, help);
        add_common(cmd, sc, false);
        cmd->add_option("--n", est_n, "Block length or radius")->required();
        return cmd;
    };
    const auto plan = [&] { return SamplePlan::independent(sc.samples ? sc.samples : 100000, sc.threads); };
    const auto spec = [&] { return SystemSpec::from_json(json_arg(sc.system, "--system")); };

    auto* alpha = add_estimator("alpha", "Bracket for the alpha-mixing coefficient of the past/future n-blocks");
    alpha->add_option("--k", est_k, "Gap between past and future")->capture_default_str();
    alpha->add_option("--partition", est_p, "Partition JSON (default: time-zero symbol)");
    alpha->callback([&] {
        const auto s = spec();
        emit(alpha_bracket(partition_arg(est_p, s), s, est_n, est_k, plan(), RngStream{sc.seed, 0}).to_json(), sc.out);
    });
    auto* beta = add_estimator("beta", "Beta-mixing coefficient of the past/future n-blocks");
    beta->add_option("--k", est_k, "Gap between past and future")->capture_default_str();
    beta->add_option("--partition", est_p, "Partition JSON (default: time-zero symbol)");
    beta->callback([&] {
        const auto s = spec();
        const auto b = beta_coefficient(partition_arg(est_p, s), s, est_n, est_k, plan(), RngStream{sc.seed, 0});
        emit(Json{{"n", est_n}, {"k", est_k}, {"beta", b.to_json()}}, sc.out);
    });
    auto* entropy = add_estimator("entropy", "Block entropy per symbol, or the conditional next-symbol entropy");
    entropy->add_option("--partition", est_p, "Partition JSON (default: time-zero symbol)");
    entropy->add_flag("--conditional", conditional, "Report H(n) - H(n-1) instead of H(n)/n");
    entropy->callback([&] {
        const auto s = spec();
        const auto p = partition_arg(est_p, s);
        const auto e = conditional ? conditional_block_entropy(p, s, est_n, plan(), RngStream{sc.seed, 0})
                                   : block_entropy(p, s, est_n, plan(), RngStream{sc.seed, 0});
        emit(Json{{"n", est_n}, {"conditional", conditional}, {"entropy_bits", e.to_json()}}, sc.out);
    });
    auto* dbar = add_estimator("dbar", "d-bar distance between the n-block laws of two systems");
    dbar->add_option("--other", est_other, "Second SystemSpec (JSON)")->required();
    dbar->add_option("--partition", est_p, "Partition JSON applied to both (default: time-zero symbol)");
    dbar->callback([&] {
        const auto s = spec();
        const auto o = SystemSpec::from_json(json_arg(est_other, "--other"));
        const auto a = block_distribution(partition_arg(est_p, s), s, est_n, plan(), RngStream{sc.seed, 1});
        const auto b = block_distribution(partition_arg(est_p, o), o, est_n, plan(), RngStream{sc.seed, 2});
        emit(Json{{"n", est_n}, {"dbar", dbar_block(a, b)}}, sc.out);
    });
    auto* fae = add_estimator("factor-error", "Majority-vote error of predicting Q at time 0 from the P-name over [-n, n]");
    fae->add_option("--P", est_p, "Observed partition JSON (default: time-zero symbol)");
    fae->add_option("--Q", est_q, "Target partition JSON")->required();
    fae->callback([&] {
        const auto s = spec();
        const auto e = factor_approx_error(partition_arg(est_p, s), Partition::from_json(json_arg(est_q, "--Q")), s, est_n, plan(),
                                           RngStream{sc.seed, 0});
        emit(Json{{"n", est_n}, {"error", e.to_json()}}, sc.out);
    });

    // experiment
    std::string exp_name, exp_config, exp_out;
    std::optional<std::uint64_t> exp_seed;
    std::optional<std::size_t> exp_samples;
    std::optional<unsigned> exp_threads;
    auto* exp = app.add_subcommand("experiment", "Run a configured experiment and write report.json, timing.json and CSVs");
    exp->add_option("name", exp_name, "Experiment name")->required()->check(CLI::IsMember([] {
        std::vector<std::string> names;
        for (const auto& [k, v] : experiments()) names.push_back(k);
        return names;
    }()));
    exp->add_option("--config", exp_config, "Config JSON file")->required()->check(CLI::ExistingFile);
    exp->add_option("--seed", exp_seed, "Override the config seed");
    exp->add_option("--samples", exp_samples, "Override the config sample count");
    exp->add_option("--threads", exp_threads, "Override the parallel width");
    exp->add_option("--out", exp_out, "Output directory (default: the config's out field, else the working directory)");
    exp->callback([&] {
        auto j = json_arg(exp_config, "--config");
        require(j.is_object() && j.value("experiment", std::string()) == exp_name, ErrorCode::InvalidConfig,
                "config '" + exp_config + "' is not for experiment '" + exp_name + "'");
        if (exp_seed) j["seed"] = *exp_seed;
        if (exp_samples) j["samples"] = *exp_samples;
        if (exp_threads) j["threads"] = *exp_threads;
        const auto cfg = ExperimentConfig::from_json(j);
        const auto r = run_experiment(cfg);
        const std::string dir = !exp_out.empty() ? exp_out : !cfg.out.empty() ? cfg.out : std::string(".");
        write_report(r, dir);
        std::cerr << r.summary() << (r.pass() ? "PASS" : "FAIL") << " (" << r.seconds << " s), report in " << dir << "\n";
        status = r.pass() ? 0 : 1;
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return status;
}
