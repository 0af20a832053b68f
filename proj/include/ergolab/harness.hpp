#pragma once

// Experiment configuration, check records and report emission.
//
// A config is a JSON object
//   {"experiment": name, "system": SystemSpec, "seed": u64, "samples": n,
//    "threads": w, "out": dir, "params": {...}}
// Unknown top-level or parameter keys are rejected. Reports never contain the thread
// count, output directory or timing, so reruns at any width produce identical bytes;
// those live in the timing.json sidecar.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "error.hpp"
#include "estimators.hpp"
#include "montecarlo.hpp"
#include "partitions.hpp"
#include "perturbations.hpp"
#include "rng.hpp"
#include "systems.hpp"
#include "towers.hpp"

namespace ergolab {

struct ExperimentConfig {
    std::string experiment;
    SystemSpec system = SystemSpec::bernoulli({0.5, 0.5});
    std::uint64_t seed = 42;
    std::size_t samples = 0; // 0 = experiment default
    unsigned threads = 1;
    std::string out;
    Json params = Json::object(); // defaults merged in

    RngStream rng() const { return RngStream{seed, 0}; }

    // Echo included in reports: everything that determines the results.
    Json to_json() const {
        return Json{{"experiment", experiment}, {"system", system.to_json()}, {"seed", seed}, {"samples", samples}, {"params", params}};
    }

    static ExperimentConfig from_json(const Json& j);
};

// Parameter defaults per experiment; the key set is also the set of accepted keys.
inline const std::map<std::string, Json>& experiment_defaults() {
    static const std::map<std::string, Json> d{
        {"tower", Json{{"A", nullptr}, {"N", 21}, {"mode", "independent"}, {"orbit_gap", 256}, {"default_samples", 100000}}},
        {"rosenblatt",
         Json{{"n", 10}, {"eps", 0.5}, {"P", nullptr}, {"mode", "orbit"}, {"orbit_gap", 65536}, {"marker_columns", 20}, {"default_samples", 100000}}},
        {"encode-factor",
         Json{{"n", 840}, {"eps", 0.5}, {"P", nullptr}, {"Q", nullptr}, {"codebook_samples", 50000}, {"min_recovery", 0.99},
              {"distance_samples", 20000}, {"default_samples", 10000}}},
        {"generator",
         Json{{"P", nullptr}, {"Q", nullptr}, {"ns", {2, 4, 8, 12}}, {"max_error", 0.05}, {"relabel_N", 180}, {"relabel_eps", 0.5},
              {"relabel_n", 200}, {"relabel_max_error", 0.1}, {"name_samples", 10000}, {"relabel_samples", 20000},
              {"default_samples", 100000}}},
        {"estimator-oracles",
         Json{{"beta_ns", {1, 2, 4, 8}}, {"entropy_n", 8}, {"entropy_tol", 0.02}, {"alpha_max", 0.01}, {"dbar_target", 0.2},
              {"dbar_tol", 0.02}, {"iid_probs", {0.5, 0.5}}, {"dbar_p", {0.5, 0.5}}, {"dbar_q", {0.7, 0.3}},
              {"default_samples", 100000}}},
        {"properties", Json{{"instances", 20}, {"bootstrap", 100}, {"equivariance_points", 2000}, {"default_samples", 20000}}},
    };
    return d;
}

inline ExperimentConfig ExperimentConfig::from_json(const Json& j) {
    try {
        require(j.is_object(), ErrorCode::InvalidConfig, "config must be a JSON object");
        static const std::set<std::string> top{"experiment", "system", "seed", "samples", "threads", "out", "params"};
        for (const auto& [k, v] : j.items()) require(top.count(k) > 0, ErrorCode::InvalidConfig, "unknown config field '" + k + "'");
        ExperimentConfig c;
        c.experiment = j.at("experiment").get<std::string>();
        auto it = experiment_defaults().find(c.experiment);
        require(it != experiment_defaults().end(), ErrorCode::InvalidConfig, "unknown experiment '" + c.experiment + "'");
        c.system = SystemSpec::from_json(j.at("system"));
        c.seed = j.value("seed", std::uint64_t{42});
        c.threads = j.value("threads", 1u);
        require(c.threads >= 1, ErrorCode::InvalidConfig, "threads must be at least 1");
        c.out = j.value("out", std::string());
        c.params = it->second;
        const Json given = j.value("params", Json::object());
        require(given.is_object(), ErrorCode::InvalidConfig, "params must be an object");
        for (const auto& [k, v] : given.items()) {
            require(c.params.contains(k), ErrorCode::InvalidConfig, "unknown parameter '" + k + "' for experiment '" + c.experiment + "'");
            c.params[k] = v;
        }
        c.samples = j.value("samples", c.params.at("default_samples").get<std::size_t>());
        c.params.erase("default_samples");
        require(c.samples >= 1, ErrorCode::InvalidConfig, "samples must be positive");
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, e.what());
    }
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::InvalidConfig, "cannot open config '" + path + "'");
    Json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

// One acceptance check. `relation` states how value (or its interval end) is compared
// with the threshold: "<", "<=", ">", ">=", "==", "in" ([lo, hi]), and "upper95 <" for
// checks that must hold for the whole 95% interval.
struct CheckRecord {
    std::string name;
    double value = 0.0;
    std::optional<double> ci; // 95% half-width
    std::string relation;
    Json threshold;
    bool pass = false;
    std::string note;

    Json to_json() const {
        Json j{{"name", name}, {"value", value}, {"ci", ci ? Json(*ci) : Json(nullptr)}, {"relation", relation},
               {"threshold", threshold}, {"pass", pass}};
        if (!note.empty()) j["note"] = note;
        return j;
    }
};

inline CheckRecord compare(std::string name, double value, const std::string& rel, double thr, std::optional<double> ci = {}) {
    bool pass = false;
    if (rel == "<") pass = value < thr;
    else if (rel == "<=") pass = value <= thr;
    else if (rel == ">") pass = value > thr;
    else if (rel == ">=") pass = value >= thr;
    else if (rel == "==") pass = value == thr;
    else throw Error(ErrorCode::InvalidConfig, "unknown relation '" + rel + "'");
    return {std::move(name), value, ci, rel, thr, pass, {}};
}

inline CheckRecord within(std::string name, double value, double lo, double hi, std::optional<double> ci = {}) {
    return {std::move(name), value, ci, "in", Json::array({lo, hi}), value >= lo && value <= hi, {}};
}

// The upper end of the 95% interval lies below thr.
inline CheckRecord upper_below(std::string name, const ProbEstimate& e, double thr) {
    return {std::move(name), e.mean, e.half_width, "upper95 <", thr, e.upper() < thr, {}};
}

struct Artifact {
    std::string file;
    std::string content;
};

struct RunReport {
    Json config;
    std::vector<CheckRecord> checks;
    Json details = Json::object();
    Json unresolved = Json::object();
    std::vector<Artifact> artifacts;
    std::vector<std::string> errors;
    double seconds = 0.0;
    unsigned threads = 1;

    bool pass() const {
        if (checks.empty()) return false;
        for (const auto& c : checks)
            if (!c.pass) return false;
        return true;
    }

    void add(CheckRecord c) { checks.push_back(std::move(c)); }
    void fail(const std::string& name, const std::string& what) {
        checks.push_back({name, 0.0, std::nullopt, "error", nullptr, false, what});
        errors.push_back(name + ": " + what);
    }

    // Runs a group of checks; an exception marks the group failed and later groups still run.
    void guarded(const std::string& group, const std::function<void()>& body) {
        try {
            body();
        } catch (const std::exception& e) {
            fail(group, e.what());
        }
    }

    Json to_json() const {
        Json cs = Json::array();
        for (const auto& c : checks) cs.push_back(c.to_json());
        Json files = Json::array();
        for (const auto& a : artifacts) files.push_back(a.file);
        return Json{{"config", config},   {"checks", cs},       {"pass", pass()},  {"details", details},
                    {"unresolved", unresolved}, {"artifacts", files}, {"errors", errors}};
    }
    Json timing_json() const { return Json{{"seconds", seconds}, {"threads", threads}}; }

    // One line per check: PASS/FAIL name value [+-ci] relation threshold.
    std::string summary() const {
        std::string s;
        for (const auto& c : checks) {
            s += (c.pass ? "  PASS " : "  FAIL ") + c.name + "  value=" + Json(c.value).dump();
            if (c.ci) s += " +-" + Json(*c.ci).dump();
            s += "  " + c.relation + " " + c.threshold.dump();
            if (!c.note.empty()) s += "  (" + c.note + ")";
            s += "\n";
        }
        return s;
    }
};

// report.json, timing.json and the CSV artifacts.
inline void write_report(const RunReport& r, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto write = [&](const std::string& name, const std::string& text) {
        std::ofstream f(fs::path(dir) / name, std::ios::binary);
        require(f.good(), ErrorCode::InvalidConfig, "cannot write '" + (fs::path(dir) / name).string() + "'");
        f << text;
    };
    write("report.json", r.to_json().dump(2) + "\n");
    write("timing.json", r.timing_json().dump(2) + "\n");
    for (const auto& a : r.artifacts) write(a.file, a.content);
}

// ---------------------------------------------------------------------------------------
// Experiments

namespace detail {

// Depth-first path to the first component satisfying pred.
template <class Pred> std::optional<Component> find_component(const SystemSpec& spec, Pred pred, Component prefix = {}) {
    const auto& s = spec.component(prefix);
    if (pred(s)) return prefix;
    if (!s.is<Product>()) return std::nullopt;
    for (std::uint8_t side : {0, 1}) {
        Component c = prefix;
        c.push_back(side);
        if (auto r = find_component(spec, pred, c)) return r;
    }
    return std::nullopt;
}

inline Component rotation_component(const SystemSpec& spec) {
    auto c = find_component(spec, [](const SystemSpec& s) { return s.is<Rotation>(); });
    require(c.has_value(), ErrorCode::InvalidConfig, "system has no rotation component");
    return *c;
}

inline Component shift_component(const SystemSpec& spec) {
    auto c = find_component(spec, [](const SystemSpec& s) { return s.is_shift(); });
    require(c.has_value(), ErrorCode::InvalidConfig, "system has no shift component");
    return *c;
}

// Binary partition: the time-zero symbol of a binary shift component, else the half-interval of a rotation.
inline Partition default_binary_partition(const SystemSpec& spec) {
    if (auto c = find_component(spec, [](const SystemSpec& s) { return s.is_shift() && s.alphabet() == 2; })) return Partition::symbol(2, *c);
    return Partition::half_interval(rotation_component(spec));
}

inline Partition default_sturmian(const SystemSpec& spec) {
    const auto c = rotation_component(spec);
    return Partition::sturmian(spec.component(c).as<Rotation>().alpha, c);
}

inline Partition partition_param(const Json& j, const std::function<Partition()>& fallback) {
    return j.is_null() ? fallback() : Partition::from_json(j);
}

inline SamplePlan plan_param(const Json& params, std::size_t samples, unsigned threads) {
    auto plan = SamplePlan::from_json(Json{{"mode", params.at("mode")}, {"orbit_gap", params.at("orbit_gap")}}, samples);
    plan.threads = threads;
    return plan;
}

inline void record_unresolved(RunReport& r, const std::string& name, std::size_t unresolved, std::size_t attempted) {
    r.unresolved[name] = Json{{"unresolved", unresolved}, {"attempted", attempted}};
}

inline void record_unresolved(RunReport& r, const std::string& name, const SampledEstimate& e) {
    record_unresolved(r, name, e.unresolved, e.attempted);
}

} // namespace detail

inline void run_tower(const ExperimentConfig& cfg, RunReport& r) {
    const auto& p = cfg.params;
    const auto N = p.at("N").get<std::int64_t>();
    const auto rng = cfg.rng();
    r.guarded("tower", [&] {
        const SetQuery a = p.at("A").is_null() ? default_base(cfg.system, N) : SetQuery::from_json(p.at("A"));
        auto tower = build_tower(cfg.system, a, N, 0, rng.child(1));
        const auto rep = verify_tower(*tower, detail::plan_param(p, cfg.samples, cfg.threads), rng.child(2));
        r.details["base"] = a.to_json();
        r.details["tower"] = rep.to_json();
        detail::record_unresolved(r, "verify_tower", rep.unresolved_budget + rep.unresolved_non_decomposable, rep.samples);
        std::size_t outside = 0;
        std::string csv = "height,count\n";
        for (const auto& [h, c] : rep.height_histogram) {
            if (h != N && h != N + 1) outside += c;
            csv += std::to_string(h) + "," + std::to_string(c) + "\n";
        }
        r.artifacts.push_back({"height_histogram.csv", csv});
        r.add(compare("tower.unresolved_fraction", rep.unresolved_fraction, "<=", 0.001));
        r.add(compare("tower.heights_outside_N_N+1", static_cast<double>(outside), "==", 0.0));
        r.add(compare("tower.level_chi2", rep.level_uniformity_chi2, "<", rep.chi2_critical_999));
        r.add(compare("tower.disjointness_violations", static_cast<double>(rep.disjointness_violations), "==", 0.0));
    });
}

inline void run_rosenblatt(const ExperimentConfig& cfg, RunReport& r) {
    const auto& p = cfg.params;
    const auto n = p.at("n").get<std::int64_t>();
    const auto eps = p.at("eps").get<double>();
    const auto rng = cfg.rng();
    r.guarded("rosenblatt", [&] {
        const auto P = detail::partition_param(p.at("P"), [&] { return detail::default_binary_partition(cfg.system); });
        auto res = rosenblatt_breaker(P, cfg.system, n, eps, rng.child(1));
        const auto plan = detail::plan_param(p, cfg.samples, cfg.threads);
        const auto w = evaluate_witness(res.Q, cfg.system, res.witness, *res.tower, plan, rng.child(2));
        const auto d = partition_distance(P, res.Q, cfg.system, plan, rng.child(3));
        r.details["N"] = res.N;
        r.details["tower_height"] = res.height;
        r.details["tower_base"] = res.tower->base_set().to_json();
        r.details["witness"] = w.to_json();
        r.details["distance"] = d.to_json();
        detail::record_unresolved(r, "evaluate_witness", w.unresolved, w.samples + w.unresolved);
        detail::record_unresolved(r, "partition_distance", d);

        // Spacing of consecutive markers along one orbit.
        const auto cols = p.at("marker_columns").get<std::int64_t>();
        auto x = sample_point(cfg.system, rng.child(4));
        if (auto name = try_name_window(res.Q, x, 0, cols * res.height)) {
            const auto marks = marker_scan(*name, static_cast<std::size_t>(res.N));
            std::map<std::int64_t, std::size_t> gaps;
            for (std::size_t i = 1; i < marks.size(); ++i) ++gaps[static_cast<std::int64_t>(marks[i] - marks[i - 1])];
            Json g = Json::object();
            for (const auto& [k, c] : gaps) g[std::to_string(k)] = c;
            r.details["marker_gaps"] = g;
        }

        r.add(upper_below("rosenblatt.distance", d.estimate, eps));
        r.add(within("rosenblatt.muC", w.muC.mean, 0.30, 0.34, w.muC.half_width));
        r.add(within("rosenblatt.muD", w.muD.mean, 0.30, 0.34, w.muD.half_width));
        r.add(compare("rosenblatt.muCD", w.muCD.mean, "<=", 0.001, w.muCD.half_width));
        r.add(compare("rosenblatt.gap", w.gap, ">", 0.10));
        r.add(compare("rosenblatt.name_agreement", w.name_agreement(), ">=", 0.999));
    });
}

namespace detail {

struct WindowOutcome {
    std::size_t index = 0;
    int outcome = 0; // 0 exact, 1 wrong block, 2 + DecodeFailureReason
    std::size_t false_markers = 0;
};

struct WindowAcc {
    std::vector<WindowOutcome> rows;
    std::size_t unresolved = 0;
    void merge(const WindowAcc& o) {
        rows.insert(rows.end(), o.rows.begin(), o.rows.end());
        unresolved += o.unresolved;
    }
};

} // namespace detail

// Windows are drawn until `samples` of them resolve; the first `samples` resolved windows
// in sample order are scored.
inline void run_encode_factor(const ExperimentConfig& cfg, RunReport& r) {
    const auto& p = cfg.params;
    const auto n = p.at("n").get<std::int64_t>();
    const auto eps = p.at("eps").get<double>();
    const auto rng = cfg.rng();
    r.guarded("encode", [&] {
        const auto P = detail::partition_param(p.at("P"), [&] { return detail::default_binary_partition(cfg.system); });
        const auto Q = detail::partition_param(p.at("Q"), [&] { return detail::default_sturmian(cfg.system); });
        EncodeOptions opts;
        opts.codebook_plan = SamplePlan::independent(p.at("codebook_samples").get<std::size_t>(), cfg.threads);
        const auto e = encode_factor(P, Q, cfg.system, eps, n, rng.child(1), opts);
        const auto& cb = e.codebook;
        r.details["N"] = cb.N;
        r.details["L"] = cb.L;
        r.details["observed_names"] = cb.names.size();
        r.details["spacing_rule_met"] = e.spacing_rule_met;
        r.details["modified_bound"] = e.modified_bound;

        r.guarded("encode.distance", [&] {
            const auto d = partition_distance(P, e.Pp, cfg.system, SamplePlan::independent(p.at("distance_samples").get<std::size_t>(), cfg.threads),
                                              rng.child(2));
            r.details["distance"] = d.to_json();
            detail::record_unresolved(r, "partition_distance", d);
            r.add(upper_below("encode.distance", d.estimate, eps));
        });

        const TimeIndex half = 2 * (n + 1);
        const std::size_t attempts = cfg.samples + cfg.samples / 20 + 64;
        auto acc = sample_reduce<detail::WindowAcc>(cfg.system, SamplePlan::independent(attempts, cfg.threads), rng.child(3),
                                                    [&](const Point& x, std::size_t i, detail::WindowAcc& s) {
            auto w = try_name_window(e.Pp, x, -half, half);
            auto fm = w ? false_markers(*w, cb, *e.tower, x) : std::nullopt;
            auto loc = fm ? e.tower->locate(x) : std::nullopt;
            if (!loc) return ++s.unresolved, void();
            detail::WindowOutcome o{i, 0, *fm};
            auto dr = decode_factor(*w, cb, cb.N);
            if (auto* f = std::get_if<DecodeFailure>(&dr)) {
                o.outcome = 2 + static_cast<int>(f->reason);
            } else {
                const auto& b = std::get<DecodedBlock>(dr);
                const bool exact = b.column_start == loc->block_start_time && b.height == loc->height &&
                                   b.q_block == detail::label_word(Q, x, b.column_start, b.column_start + b.height - 1);
                o.outcome = exact ? 0 : 1;
            }
            s.rows.push_back(o);
        });
        std::sort(acc.rows.begin(), acc.rows.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
        const std::size_t used = std::min(acc.rows.size(), cfg.samples);
        std::size_t exact = 0, false_pos = 0;
        std::map<std::string, std::size_t> reasons;
        for (std::size_t i = 0; i < used; ++i) {
            const auto& o = acc.rows[i];
            exact += o.outcome == 0;
            false_pos += o.false_markers;
            if (o.outcome == 1) ++reasons["WrongBlock"];
            if (o.outcome >= 2) ++reasons[std::string(to_string(static_cast<DecodeFailureReason>(o.outcome - 2)))];
        }
        r.details["windows_resolved"] = used;
        r.details["decode_failures"] = reasons;
        detail::record_unresolved(r, "decode_windows", acc.unresolved, acc.unresolved + acc.rows.size());
        auto rec = compare("encode.exact_recovery", used ? static_cast<double>(exact) / static_cast<double>(used) : 0.0, ">=",
                           p.at("min_recovery").get<double>());
        if (used < cfg.samples) {
            rec.pass = false;
            rec.note = "only " + std::to_string(used) + " resolved windows";
        }
        r.add(rec);
        r.add(compare("encode.false_markers", static_cast<double>(false_pos), "==", 0.0));
    });
}

// Part A: majority-vote factor error of P for Q on the rotation factor, over block radii.
// Part B: generator relabeling of a full-entropy P on the product system.
inline void run_generator(const ExperimentConfig& cfg, RunReport& r) {
    const auto& p = cfg.params;
    const auto rng = cfg.rng();
    const auto factor = [&] { return detail::partition_param(p.at("Q"), [&] { return detail::default_sturmian(cfg.system); }); };

    r.guarded("generator", [&] {
        const auto Q = factor();
        const auto P = detail::partition_param(p.at("P"), [&] { return Partition::half_interval(detail::rotation_component(cfg.system)); });
        const auto ns = p.at("ns").get<std::vector<std::size_t>>();
        require(!ns.empty(), ErrorCode::InvalidConfig, "ns must not be empty");
        std::vector<ProbEstimate> errs;
        Json series = Json::array();
        std::string csv = "n,error,half_width\n";
        for (std::size_t i = 0; i < ns.size(); ++i) {
            const auto e = factor_approx_error(P, Q, cfg.system, ns[i], SamplePlan::independent(cfg.samples, cfg.threads), rng.child(10 + i));
            detail::record_unresolved(r, "factor_approx_error_n" + std::to_string(ns[i]), e);
            errs.push_back(e.estimate);
            series.push_back(Json{{"n", ns[i]}, {"error", e.estimate.to_json()}});
            csv += std::to_string(ns[i]) + "," + Json(e.estimate.mean).dump() + "," + Json(e.estimate.half_width).dump() + "\n";
        }
        r.details["factor_error_series"] = series;
        r.artifacts.push_back({"factor_error.csv", csv});
        double excess = -1.0;
        for (std::size_t i = 1; i < errs.size(); ++i)
            excess = std::max(excess, errs[i].mean - errs[i - 1].mean - errs[i].half_width - errs[i - 1].half_width);
        r.add(compare("generator.factor_error_n" + std::to_string(ns.back()), errs.back().mean, "<=", p.at("max_error").get<double>(),
                      errs.back().half_width));
        if (errs.size() > 1) {
            auto c = compare("generator.non_increasing_excess", excess, "<=", 0.0);
            c.note = "max over consecutive n of err(n') - err(n) - combined half-width";
            r.add(c);
        }
    });

    r.guarded("relabel", [&] {
        const auto Q = factor();
        const auto P = Partition::symbol(cfg.system.component(detail::shift_component(cfg.system)).alphabet(), detail::shift_component(cfg.system));
        const auto eps = p.at("relabel_eps").get<double>();
        const auto N = p.at("relabel_N").get<std::int64_t>();
        const auto n = p.at("relabel_n").get<std::size_t>();
        const auto plan = SamplePlan::independent(p.at("relabel_samples").get<std::size_t>(), cfg.threads);
        const double max_err = p.at("relabel_max_error").get<double>();
        RelabelOptions opts;
        opts.name_plan = SamplePlan::independent(p.at("name_samples").get<std::size_t>(), cfg.threads);
        const auto res = generator_relabel(P, Q, cfg.system, eps, N, rng.child(2), opts);
        const auto& cb = res.codebooks;
        r.details["relabel"] = Json{{"L", cb.L}, {"zero_run", cb.k}, {"c_codewords", cb.c_words.size()}, {"d_codewords", cb.d_words.size()},
                                    {"crowded_names", cb.crowded.size()}};

        const auto fae = factor_approx_error(res.Phat, Q, cfg.system, n, plan, rng.child(3));
        const auto control = factor_approx_error(P, Q, cfg.system, n, plan, rng.child(3));
        r.details["factor_error_unperturbed"] = control.to_json();
        detail::record_unresolved(r, "relabel_factor_error", fae);
        r.add(compare("relabel.factor_error", fae.estimate.mean, "<=", max_err, fae.estimate.half_width));

        RelabelDecoder decoder(cb);
        const auto dec = rule_error(decoder.rule(res.Phat, static_cast<std::int64_t>(n)), Q, cfg.system, plan, rng.child(4));
        detail::record_unresolved(r, "relabel_decoder_error", dec);
        r.add(compare("relabel.decoder_error", dec.estimate.mean, "<=", max_err, dec.estimate.half_width));

        const auto exc = exceptional_fraction(res, cfg.system, plan, rng.child(5));
        detail::record_unresolved(r, "exceptional_fraction", exc);
        r.add(compare("relabel.exceptional_fraction", exc.estimate.mean, "<=", eps / 3.0, exc.estimate.half_width));

        const auto d = partition_distance(P, res.Phat, cfg.system, plan, rng.child(6));
        detail::record_unresolved(r, "relabel_distance", d);
        r.add(upper_below("relabel.distance", d.estimate, eps));
        r.add(compare("relabel.max_refinements", static_cast<double>(res.max_refinements), "<=", res.refinement_bound));
    });
}

namespace detail {

inline double entropy_bits_of(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log2(v);
    return h;
}

// beta(n) = 1/2 sum_i pi_i sum_j |(M^n)_ij - pi_j| for a stationary chain observed through its symbols.
inline double markov_beta(const Markov& m, std::size_t n) {
    const std::size_t a = m.matrix.size();
    auto power = m.matrix;
    for (std::size_t step = 1; step < n; ++step) {
        std::vector<std::vector<double>> next(a, std::vector<double>(a, 0.0));
        for (std::size_t i = 0; i < a; ++i)
            for (std::size_t k = 0; k < a; ++k)
                for (std::size_t j = 0; j < a; ++j) next[i][j] += power[i][k] * m.matrix[k][j];
        power = std::move(next);
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < a; ++j) s += m.stationary[i] * std::abs(power[i][j] - m.stationary[j]);
    return s / 2.0;
}

inline double markov_rate(const Markov& m) {
    double h = 0.0;
    for (std::size_t i = 0; i < m.matrix.size(); ++i) h += m.stationary[i] * entropy_bits_of(m.matrix[i]);
    return h;
}

} // namespace detail

inline void run_estimator_oracles(const ExperimentConfig& cfg, RunReport& r) {
    const auto& p = cfg.params;
    const auto rng = cfg.rng();
    const auto plan = SamplePlan::independent(cfg.samples, cfg.threads);
    require(cfg.system.is<Markov>(), ErrorCode::InvalidConfig, "estimator-oracles needs a markov system");
    const auto& chain = cfg.system.as<Markov>();
    const auto sym = Partition::symbol(chain.matrix.size());

    r.guarded("beta", [&] {
        const auto ns = p.at("beta_ns").get<std::vector<std::size_t>>();
        for (std::size_t i = 0; i < ns.size(); ++i) {
            const auto b = beta_coefficient(sym, cfg.system, ns[i], 0, plan, rng.child(10 + i));
            const double oracle = detail::markov_beta(chain, ns[i]);
            r.details["beta_n" + std::to_string(ns[i])] = Json{{"estimate", b.to_json()}, {"oracle", oracle}};
            auto c = compare("oracles.beta_n" + std::to_string(ns[i]) + "_abs_error", std::abs(b.mean - oracle), "<=", 3.0 * b.half_width,
                             b.half_width);
            c.note = "threshold is 3 x CI half-width";
            r.add(c);
        }
    });

    r.guarded("alpha", [&] {
        const auto iid = SystemSpec::bernoulli(p.at("iid_probs").get<std::vector<double>>());
        const auto a = alpha_bracket(Partition::symbol(iid.alphabet()), iid, 1, 0, plan, rng.child(2));
        r.details["alpha_iid"] = a.to_json();
        r.add(compare("oracles.alpha_iid_upper", a.upper, "<=", p.at("alpha_max").get<double>(), a.half_width));
    });

    r.guarded("dbar", [&] {
        const auto sp = SystemSpec::bernoulli(p.at("dbar_p").get<std::vector<double>>());
        const auto sq = SystemSpec::bernoulli(p.at("dbar_q").get<std::vector<double>>());
        const auto a = block_distribution(Partition::symbol(sp.alphabet()), sp, 1, plan, rng.child(3));
        const auto b = block_distribution(Partition::symbol(sq.alphabet()), sq, 1, plan, rng.child(4));
        const double d = dbar_block(a, b);
        const double target = p.at("dbar_target").get<double>(), tol = p.at("dbar_tol").get<double>();
        r.details["dbar_n1"] = d;
        r.add(within("oracles.dbar_n1", d, target - tol, target + tol));
    });

    r.guarded("entropy", [&] {
        const auto n = p.at("entropy_n").get<std::size_t>();
        const double tol = p.at("entropy_tol").get<double>();
        const double rate = detail::markov_rate(chain);
        const double block = (detail::entropy_bits_of(chain.stationary) + static_cast<double>(n - 1) * rate) / static_cast<double>(n);
        const auto cond = conditional_block_entropy(sym, cfg.system, n, plan, rng.child(5));
        const auto per = block_entropy(sym, cfg.system, n, plan, rng.child(6));
        detail::record_unresolved(r, "conditional_block_entropy", cond);
        detail::record_unresolved(r, "block_entropy", per);
        r.details["entropy"] = Json{{"rate", rate}, {"block_closed_form", block}, {"conditional", cond.to_json()}, {"per_symbol", per.to_json()}};
        auto c1 = compare("oracles.entropy_rate_abs_error", std::abs(cond.estimate.mean - rate), "<=", tol, cond.estimate.half_width);
        c1.note = "H(X_0..X_{n-1}) - H(X_0..X_{n-2}) against the entropy rate";
        r.add(c1);
        auto c2 = compare("oracles.block_entropy_abs_error", std::abs(per.estimate.mean - block), "<=", tol, per.estimate.half_width);
        c2.note = "H(X_0..X_{n-1}) / n against (H(pi) + (n-1) h) / n";
        r.add(c2);
    });
}

namespace detail {

// Partition of the length-len cylinders of a shift, with cylinder code c carrying label lump[c].
inline Partition lumped_block(std::size_t alphabet, std::size_t len, const std::vector<Label>& lump, std::size_t labels) {
    const auto base = Partition::block(alphabet, len);
    std::vector<Partition::Rule> rules;
    for (const auto& rule : base.rules()) rules.push_back({rule.set, lump[rule.label]});
    return Partition(labels, lump[0], std::move(rules));
}

inline Partition random_lumping(std::size_t alphabet, std::size_t len, std::size_t labels, StreamCursor& cur) {
    std::size_t count = 1;
    for (std::size_t i = 0; i < len; ++i) count *= alphabet;
    std::vector<Label> lump(count);
    for (std::size_t c = 0; c < count; ++c) lump[c] = static_cast<Label>(c < labels ? c : cur.next_below(labels));
    for (std::size_t c = count; c-- > 1;) std::swap(lump[c], lump[cur.next_below(c + 1)]);
    return lumped_block(alphabet, len, lump, labels);
}

inline std::vector<double> random_probs(std::size_t a, StreamCursor& cur) {
    std::vector<double> p(a);
    double sum = 0.0;
    for (auto& v : p) sum += v = 0.2 + cur.next_uniform();
    for (auto& v : p) v /= sum;
    return p;
}

inline SystemSpec random_markov(std::size_t a, StreamCursor& cur) {
    std::vector<std::vector<double>> m;
    for (std::size_t i = 0; i < a; ++i) m.push_back(random_probs(a, cur));
    return SystemSpec::markov(std::move(m));
}

// Multinomial resample of a block law with the same sample size.
inline BlockDistribution resample(const BlockDistribution& bd, StreamCursor& cur) {
    std::vector<const Word*> words;
    std::vector<std::size_t> cum;
    std::size_t total = 0;
    for (const auto& [w, c] : bd.counts) {
        words.push_back(&w);
        cum.push_back(total += c);
    }
    BlockDistribution out{bd.n, bd.a, {}, bd.n_samples, 0};
    for (std::size_t i = 0; i < bd.n_samples; ++i) {
        const auto u = cur.next_below(total);
        const auto k = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
        ++out.counts[*words[k]];
    }
    return out;
}

inline double stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = 0.0, q = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) q += (x - m) * (x - m);
    return std::sqrt(q / static_cast<double>(v.size() - 1));
}

} // namespace detail

// Randomized property suites; each check counts the failing instances out of `instances`.
inline void run_properties(const ExperimentConfig& cfg, RunReport& r) {
    const auto& p = cfg.params;
    const auto instances = p.at("instances").get<std::size_t>();
    const auto plan = SamplePlan::independent(cfg.samples, cfg.threads);
    const auto root = cfg.rng();
    const auto suite = [&](const std::string& name, std::uint64_t id, const std::function<Json(std::size_t, const RngStream&, bool&)>& body) {
        r.guarded("properties." + name, [&] {
            std::size_t failed = 0;
            Json rows = Json::array();
            for (std::size_t i = 0; i < instances; ++i) {
                bool ok = true;
                Json row = body(i, root.child(id).child(i), ok);
                row["pass"] = ok;
                rows.push_back(row);
                failed += !ok;
            }
            r.details[name] = rows;
            auto c = compare("properties." + name + "_failures", static_cast<double>(failed), "==", 0.0);
            c.note = std::to_string(instances) + " instances";
            r.add(c);
        });
    };

    // |h_n(P) - h_n(Q)| <= rho(P, Q) for lumpings of a block partition of a Bernoulli shift.
    suite("entropy_lipschitz", 1, [&](std::size_t, const RngStream& rng, bool& ok) {
        StreamCursor cur(rng.child(0));
        const std::size_t a = 2 + cur.next_below(2);
        const auto spec = SystemSpec::bernoulli(detail::random_probs(a, cur));
        const auto P = detail::random_lumping(a, 2, 2 + cur.next_below(2), cur);
        const auto Q = detail::random_lumping(a, 2, 2 + cur.next_below(2), cur);
        const auto rho = rokhlin_metric(P, Q, spec, plan, rng.child(1)).estimate;
        Json row{{"system", spec.to_json()}, {"rho", rho.to_json()}};
        for (std::size_t n : {1, 2, 4}) {
            const auto hp = block_entropy(P, spec, n, plan, rng.child(10 + n)).estimate;
            const auto hq = block_entropy(Q, spec, n, plan, rng.child(20 + n)).estimate;
            const double slack = 3.0 * (hp.half_width + hq.half_width + rho.half_width);
            const double lhs = std::abs(hp.mean - hq.mean);
            ok = ok && lhs <= rho.mean + slack;
            row["n" + std::to_string(n)] = Json{{"abs_diff", lhs}, {"bound", rho.mean + slack}};
        }
        return row;
    });

    // dbar_1 <= dbar_2 <= dbar_4 for pairs of binary Markov chains.
    suite("dbar_monotone", 2, [&](std::size_t, const RngStream& rng, bool& ok) {
        StreamCursor cur(rng.child(0));
        const auto s1 = detail::random_markov(2, cur), s2 = detail::random_markov(2, cur);
        const auto sym = Partition::symbol(2);
        const auto b1 = block_distribution(sym, s1, 4, plan, rng.child(1));
        const auto b2 = block_distribution(sym, s2, 4, plan, rng.child(2));
        const std::vector<std::size_t> ns{1, 2, 4};
        const auto dbars = [&](const BlockDistribution& x, const BlockDistribution& y) {
            std::vector<double> d;
            for (auto n : ns) d.push_back(dbar_block(x.prefix(n), y.prefix(n)));
            return d;
        };
        const auto d = dbars(b1, b2);
        std::vector<std::vector<double>> boot(ns.size());
        StreamCursor bc(rng.child(3));
        for (std::size_t b = 0; b < p.at("bootstrap").get<std::size_t>(); ++b) {
            const auto db = dbars(detail::resample(b1, bc), detail::resample(b2, bc));
            for (std::size_t j = 0; j < ns.size(); ++j) boot[j].push_back(db[j]);
        }
        Json row{{"dbar", d}};
        Json ci = Json::array();
        for (std::size_t j = 0; j < ns.size(); ++j) ci.push_back(kZ975 * detail::stddev(boot[j]));
        for (std::size_t j = 1; j < ns.size(); ++j)
            ok = ok && d[j - 1] <= d[j] + ci[j - 1].get<double>() + ci[j].get<double>();
        row["ci"] = ci;
        return row;
    });

    // Identity, symmetry and triangle inequality for the partition distance and the Rokhlin metric.
    suite("metric_axioms", 3, [&](std::size_t, const RngStream& rng, bool& ok) {
        StreamCursor cur(rng.child(0));
        const std::size_t a = 2 + cur.next_below(2);
        const auto spec = SystemSpec::bernoulli(detail::random_probs(a, cur));
        const std::vector<Partition> ps{detail::random_lumping(a, 2, 2, cur), detail::random_lumping(a, 2, 2, cur),
                                        detail::random_lumping(a, 2, 2, cur)};
        Json row = Json::object();
        std::uint64_t stream = 1;
        for (const std::string metric : {"distance", "rokhlin"}) {
            const auto dist = [&](std::size_t i, std::size_t j) {
                return metric == "distance" ? partition_distance(ps[i], ps[j], spec, plan, rng.child(stream++)).estimate
                                            : rokhlin_metric(ps[i], ps[j], spec, plan, rng.child(stream++)).estimate;
            };
            const auto self = dist(0, 0);
            const auto d01 = dist(0, 1), d10 = dist(1, 0), d12 = dist(1, 2), d02 = dist(0, 2);
            const bool identity = std::abs(self.mean) <= 1e-12;
            const bool symmetric = std::abs(d01.mean - d10.mean) <= 3.0 * (d01.half_width + d10.half_width);
            const bool triangle = d02.mean <= d01.mean + d12.mean + 3.0 * (d01.half_width + d12.half_width + d02.half_width);
            ok = ok && identity && symmetric && triangle;
            row[metric] = Json{{"self", self.mean}, {"d01", d01.mean}, {"d10", d10.mean}, {"d12", d12.mean}, {"d02", d02.mean}};
        }
        return row;
    });

    // locate(T x) advances the level by one inside a column and restarts at level 0 above its top.
    suite("tower_equivariance", 4, [&](std::size_t i, const RngStream& rng, bool& ok) {
        // Systems whose default base is not separated at height N are redrawn.
        StreamCursor cur(rng.child(0));
        std::optional<SystemSpec> spec;
        KRTowerRef tower;
        std::int64_t N = 0;
        std::size_t redraws = 0;
        for (; !tower; ++redraws) {
            require(redraws < 20, ErrorCode::NotSeparated, "no separated tower instance in 20 draws");
            spec = i % 2 == 0 ? SystemSpec::rotation(0.05 + 0.9 * cur.next_uniform()) : SystemSpec::bernoulli(detail::random_probs(2, cur));
            N = static_cast<std::int64_t>(5 + cur.next_below(26));
            try {
                tower = build_tower(*spec, default_base(*spec, N), N, 0, rng.child(1).child(redraws));
            } catch (const Error& e) {
                if (e.code() != ErrorCode::NotSeparated) throw;
            }
        }
        struct Acc {
            std::size_t n = 0, unresolved = 0, violations = 0;
            void merge(const Acc& o) { n += o.n, unresolved += o.unresolved, violations += o.violations; }
        };
        auto acc = sample_reduce<Acc>(*spec, SamplePlan::independent(p.at("equivariance_points").get<std::size_t>(), cfg.threads), rng.child(2),
                                      [&](const Point& x, std::size_t, Acc& s) {
            auto here = tower->locate(x);
            auto next = here ? tower->locate(x, 1) : std::nullopt;
            auto prev = next ? tower->locate(x, -1) : std::nullopt;
            if (!prev) return ++s.unresolved, void();
            ++s.n;
            const bool top = here->level + 1 == here->height;
            const bool fwd = top ? next->level == 0 : next->level == here->level + 1 && next->height == here->height;
            const bool bwd = here->level == 0 ? prev->level == prev->height - 1 : prev->level == here->level - 1 && prev->height == here->height;
            s.violations += !(fwd && bwd);
        });
        ok = acc.violations == 0 && static_cast<double>(acc.unresolved) <= 0.01 * static_cast<double>(acc.n + acc.unresolved);
        return Json{{"system", spec->to_json()}, {"N", N}, {"redraws", redraws - 1}, {"points", acc.n}, {"unresolved", acc.unresolved}, {"violations", acc.violations}};
    });

    // lower <= upper within the interval slack; the exact value, when present, lies in the bracket.
    suite("alpha_bracket_order", 5, [&](std::size_t, const RngStream& rng, bool& ok) {
        StreamCursor cur(rng.child(0));
        const std::size_t a = 2 + cur.next_below(2);
        const auto spec = detail::random_markov(a, cur);
        const std::size_t n = 1 + cur.next_below(2), k = cur.next_below(4);
        const auto b = alpha_bracket(Partition::symbol(a), spec, n, k, plan, rng.child(1));
        ok = b.lower <= b.upper + b.half_width && b.ascent_lower <= b.beta_upper + b.half_width;
        if (b.exact) ok = ok && b.ascent_lower <= *b.exact + 1e-12 && *b.exact <= b.beta_upper + b.half_width;
        return b.to_json();
    });
}

using ExperimentFn = void (*)(const ExperimentConfig&, RunReport&);

inline const std::map<std::string, ExperimentFn>& experiments() {
    static const std::map<std::string, ExperimentFn> m{
        {"tower", run_tower},           {"rosenblatt", run_rosenblatt},       {"encode-factor", run_encode_factor},
        {"generator", run_generator},   {"estimator-oracles", run_estimator_oracles}, {"properties", run_properties},
    };
    return m;
}

// Check names every report of the experiment carries.
inline std::vector<std::string> required_checks(const ExperimentConfig& cfg) {
    const auto& p = cfg.params;
    const auto& e = cfg.experiment;
    if (e == "tower")
        return {"tower.unresolved_fraction", "tower.heights_outside_N_N+1", "tower.level_chi2", "tower.disjointness_violations"};
    if (e == "rosenblatt")
        return {"rosenblatt.distance", "rosenblatt.muC", "rosenblatt.muD", "rosenblatt.muCD", "rosenblatt.gap", "rosenblatt.name_agreement"};
    if (e == "encode-factor") return {"encode.distance", "encode.exact_recovery", "encode.false_markers"};
    if (e == "generator") {
        std::vector<std::string> out;
        const auto ns = p.at("ns").get<std::vector<std::size_t>>();
        if (!ns.empty()) out.push_back("generator.factor_error_n" + std::to_string(ns.back()));
        if (ns.size() > 1) out.push_back("generator.non_increasing_excess");
        for (const char* c : {"relabel.factor_error", "relabel.decoder_error", "relabel.exceptional_fraction", "relabel.distance",
                              "relabel.max_refinements"})
            out.push_back(c);
        return out;
    }
    if (e == "estimator-oracles") {
        std::vector<std::string> out;
        for (auto n : p.at("beta_ns").get<std::vector<std::size_t>>()) out.push_back("oracles.beta_n" + std::to_string(n) + "_abs_error");
        for (const char* c : {"oracles.alpha_iid_upper", "oracles.dbar_n1", "oracles.entropy_rate_abs_error", "oracles.block_entropy_abs_error"})
            out.push_back(c);
        return out;
    }
    if (e == "properties") {
        std::vector<std::string> out;
        for (const char* c : {"entropy_lipschitz", "dbar_monotone", "metric_axioms", "tower_equivariance", "alpha_bracket_order"})
            out.push_back(std::string("properties.") + c + "_failures");
        return out;
    }
    return {};
}

inline RunReport run_experiment(const ExperimentConfig& cfg) {
    const auto it = experiments().find(cfg.experiment);
    require(it != experiments().end(), ErrorCode::InvalidConfig, "unknown experiment '" + cfg.experiment + "'");
    RunReport r;
    r.config = cfg.to_json();
    r.threads = cfg.threads;
    const auto t0 = std::chrono::steady_clock::now();
    it->second(cfg, r);
    for (const auto& name : required_checks(cfg)) {
        const bool present = std::any_of(r.checks.begin(), r.checks.end(), [&](const CheckRecord& c) { return c.name == name; });
        if (!present) r.checks.push_back({name, 0.0, std::nullopt, "not evaluated", nullptr, false, "an earlier step failed"});
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

} // namespace ergolab
