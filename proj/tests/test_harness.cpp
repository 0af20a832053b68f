#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ergolab/harness.hpp"

using namespace ergolab;

namespace {

Json base_config(const std::string& experiment, Json system) {
    return Json{{"experiment", experiment}, {"system", std::move(system)}, {"seed", 7}};
}

Json markov() { return Json{{"kind", "markov"}, {"matrix", {{0.9, 0.1}, {0.2, 0.8}}}}; }
Json rotation() { return Json{{"kind", "rotation"}, {"alpha", 0.41421356237309515}}; }

Json load(const std::string& name) {
    std::ifstream in(std::string(ERGOLAB_CONFIG_DIR) + "/" + name);
    return Json::parse(in);
}

std::set<std::string> check_names(const RunReport& r) {
    std::set<std::string> out;
    for (const auto& c : r.checks) out.insert(c.name);
    return out;
}

void expect_complete(const ExperimentConfig& cfg, const RunReport& r) {
    const auto names = check_names(r);
    for (const auto& n : required_checks(cfg)) EXPECT_TRUE(names.count(n)) << cfg.experiment << " lacks " << n;
}

} // namespace

TEST(Config, RejectsUnknownTopLevelField) {
    auto j = base_config("tower", rotation());
    j["sampels"] = 10;
    try {
        ExperimentConfig::from_json(j);
        FAIL() << "unknown field accepted";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
        EXPECT_NE(std::string(e.what()).find("sampels"), std::string::npos);
    }
}

TEST(Config, RejectsUnknownParameterAndExperiment) {
    auto j = base_config("tower", rotation());
    j["params"] = Json{{"height", 21}};
    EXPECT_THROW(ExperimentConfig::from_json(j), Error);
    EXPECT_THROW(ExperimentConfig::from_json(base_config("mixing", rotation())), Error);
    auto k = base_config("tower", rotation());
    k["params"] = Json::array();
    EXPECT_THROW(ExperimentConfig::from_json(k), Error);
}

TEST(Config, DefaultsMergedAndEchoOmitsWidthAndOutput) {
    auto j = base_config("rosenblatt", Json{{"kind", "bernoulli"}, {"probs", {0.5, 0.5}}});
    j["threads"] = 8;
    j["out"] = "/tmp/x";
    j["params"] = Json{{"n", 12}};
    const auto cfg = ExperimentConfig::from_json(j);
    EXPECT_EQ(cfg.samples, 100000u);
    EXPECT_EQ(cfg.params.at("n"), 12);
    EXPECT_EQ(cfg.params.at("eps"), 0.5);
    EXPECT_FALSE(cfg.params.contains("default_samples"));
    const auto echo = cfg.to_json();
    EXPECT_FALSE(echo.contains("threads"));
    EXPECT_FALSE(echo.contains("out"));
    EXPECT_EQ(ExperimentConfig::from_json(echo).to_json(), echo);
}

TEST(Config, ShippedConfigsParse) {
    for (const auto& entry : std::filesystem::directory_iterator(ERGOLAB_CONFIG_DIR)) {
        if (entry.path().extension() != ".json") continue;
        EXPECT_NO_THROW(load_config(entry.path().string())) << entry.path();
    }
}

TEST(Checks, Relations) {
    EXPECT_TRUE(compare("a", 1.0, "<=", 1.0).pass);
    EXPECT_FALSE(compare("a", 1.0, "<", 1.0).pass);
    EXPECT_TRUE(within("b", 0.31, 0.30, 0.34).pass);
    EXPECT_FALSE(within("b", 0.35, 0.30, 0.34).pass);
    EXPECT_FALSE(upper_below("c", ProbEstimate{0.45, 0.06, 10}, 0.5).pass);
    EXPECT_TRUE(upper_below("c", ProbEstimate{0.45, 0.04, 10}, 0.5).pass);
    EXPECT_THROW(compare("d", 0.0, "~", 0.0), Error);
}

TEST(Report, EmptyReportDoesNotPass) {
    RunReport r;
    EXPECT_FALSE(r.pass());
    r.add(compare("x", 0.0, "==", 0.0));
    EXPECT_TRUE(r.pass());
    r.guarded("boom", [] { throw Error(ErrorCode::ScanBudget, "too deep"); });
    EXPECT_FALSE(r.pass());
    ASSERT_EQ(r.errors.size(), 1u);
}

TEST(Run, OraclesPassAndReportIsComplete) {
    auto j = load("estimator-oracles.json");
    j["samples"] = 40000;
    const auto cfg = ExperimentConfig::from_json(j);
    const auto r = run_experiment(cfg);
    expect_complete(cfg, r);
    EXPECT_TRUE(r.pass()) << r.summary();
}

TEST(Run, FailingGroupDoesNotAbortLaterGroups) {
    auto j = load("estimator-oracles.json");
    j["samples"] = 20000;
    j["params"]["dbar_p"] = {0.5, 0.6};
    const auto cfg = ExperimentConfig::from_json(j);
    const auto r = run_experiment(cfg);
    expect_complete(cfg, r);
    EXPECT_FALSE(r.pass());
    std::map<std::string, bool> pass;
    for (const auto& c : r.checks) pass[c.name] = c.pass;
    EXPECT_FALSE(pass.at("dbar"));
    EXPECT_FALSE(pass.at("oracles.dbar_n1"));
    EXPECT_TRUE(pass.at("oracles.entropy_rate_abs_error"));
    EXPECT_EQ(r.errors.size(), 1u);
}

TEST(Run, FailedConstructionStillListsEveryCheck) {
    auto j = base_config("rosenblatt", Json{{"kind", "bernoulli"}, {"probs", {0.5, 0.5}}});
    j["params"] = Json{{"eps", 1.5}};
    const auto cfg = ExperimentConfig::from_json(j);
    const auto r = run_experiment(cfg);
    expect_complete(cfg, r);
    EXPECT_FALSE(r.pass());
    EXPECT_FALSE(r.errors.empty());

    auto e = base_config("encode-factor", Json{{"kind", "bernoulli"}, {"probs", {0.5, 0.5}}});
    const auto ecfg = ExperimentConfig::from_json(e);
    const auto er = run_experiment(ecfg);
    expect_complete(ecfg, er);
    EXPECT_FALSE(er.pass());
}

TEST(Run, TowerOnRotationPasses) {
    auto j = load("tower-rotation.json");
    j["samples"] = 20000;
    const auto cfg = ExperimentConfig::from_json(j);
    const auto r = run_experiment(cfg);
    expect_complete(cfg, r);
    EXPECT_TRUE(r.pass()) << r.summary();
    ASSERT_EQ(r.artifacts.size(), 1u);
    EXPECT_EQ(r.artifacts[0].file, "height_histogram.csv");
}

TEST(Run, SmallPropertySuitesAreComplete) {
    auto j = base_config("properties", Json{{"kind", "bernoulli"}, {"probs", {0.5, 0.5}}});
    j["samples"] = 5000;
    j["params"] = Json{{"instances", 2}, {"bootstrap", 20}, {"equivariance_points", 300}};
    const auto cfg = ExperimentConfig::from_json(j);
    const auto r = run_experiment(cfg);
    expect_complete(cfg, r);
    EXPECT_TRUE(r.pass()) << r.summary();
    EXPECT_EQ(r.details.at("metric_axioms").size(), 2u);
}

TEST(Reproducibility, ByteIdenticalAcrossWidths) {
    for (const char* name : {"estimator-oracles.json", "tower-bernoulli.json"}) {
        auto j = load(name);
        j["samples"] = 20000;
        j["threads"] = 1;
        const auto one = run_experiment(ExperimentConfig::from_json(j)).to_json().dump(2);
        j["threads"] = 8;
        const auto eight = run_experiment(ExperimentConfig::from_json(j)).to_json().dump(2);
        const auto again = run_experiment(ExperimentConfig::from_json(j)).to_json().dump(2);
        EXPECT_EQ(one, eight) << name;
        EXPECT_EQ(eight, again) << name;
    }
}

TEST(Report, WriteReportFiles) {
    auto j = load("estimator-oracles.json");
    j["samples"] = 5000;
    j["params"]["beta_ns"] = {1};
    const auto r = run_experiment(ExperimentConfig::from_json(j));
    const auto dir = std::filesystem::temp_directory_path() / "ergolab_test_report";
    std::filesystem::remove_all(dir);
    write_report(r, dir.string());
    std::ifstream in(dir / "report.json");
    std::stringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(ss.str(), r.to_json().dump(2) + "\n");
    const auto parsed = Json::parse(ss.str());
    for (const char* key : {"config", "checks", "pass", "details", "unresolved", "artifacts", "errors"}) EXPECT_TRUE(parsed.contains(key)) << key;
    EXPECT_FALSE(parsed.contains("seconds"));
    EXPECT_TRUE(std::filesystem::exists(dir / "timing.json"));
    for (const auto& c : parsed.at("checks"))
        for (const char* key : {"name", "value", "ci", "relation", "threshold", "pass"}) EXPECT_TRUE(c.contains(key)) << key;
}
