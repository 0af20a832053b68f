// Acceptance run: one PASS/FAIL line per criterion, exit status 0 iff all pass.
// Reports are written under ./acceptance_reports/<config>/w<width>/.

#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ergolab/harness.hpp"

using namespace ergolab;

namespace {

struct Run {
    RunReport report;
    std::string bytes;
};

Run run(const std::string& config, unsigned threads) {
    auto cfg = load_config(std::string(ERGOLAB_CONFIG_DIR) + "/" + config + ".json");
    cfg.threads = threads;
    Run out{run_experiment(cfg), {}};
    out.bytes = out.report.to_json().dump(2) + "\n";
    write_report(out.report, "acceptance_reports/" + config + "/w" + std::to_string(threads));
    return out;
}

// Checks belonging to a group: the group's own error record and every "group." check.
bool group_pass(const RunReport& r, const std::string& group, std::string& failed) {
    bool any = false, ok = true;
    for (const auto& c : r.checks) {
        if (c.name != group && c.name.rfind(group + ".", 0) != 0) continue;
        any = true;
        if (!c.pass) {
            ok = false;
            failed += (failed.empty() ? "" : ", ") + c.name + (c.note.empty() ? "" : " [" + c.note + "]");
        }
    }
    if (!any) failed = "no checks for group " + group;
    return any && ok;
}

void line(int id, bool pass, const std::string& what, const std::string& detail) {
    std::printf("criterion %d %s  %s%s%s\n", id, pass ? "PASS" : "FAIL", what.c_str(), detail.empty() ? "" : "  ", detail.c_str());
    std::fflush(stdout);
}

std::string seconds(double s, double target) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.1f s (target < %.0f s)", s, target);
    return buf;
}

} // namespace

int main() {
    const std::vector<std::string> configs{"tower-rotation", "tower-bernoulli", "rosenblatt", "encode-factor",
                                           "generator",      "estimator-oracles", "properties"};
    std::map<std::string, Run> base;
    bool all = true;
    const auto record = [&](int id, bool pass, const std::string& what, const std::string& detail) {
        all = all && pass;
        line(id, pass, what, detail);
    };
    const auto get = [&](const std::string& c) -> const Run& {
        auto it = base.find(c);
        if (it == base.end()) it = base.emplace(c, run(c, 1)).first;
        return it->second;
    };
    const auto guarded = [&](int id, const std::string& what, const std::function<void()>& body) {
        try {
            body();
        } catch (const std::exception& e) {
            record(id, false, what, std::string("error: ") + e.what());
        }
    };

    guarded(1, "tower lemma", [&] {
        const auto& a = get("tower-rotation").report;
        const auto& b = get("tower-bernoulli").report;
        std::string fa, fb;
        const bool pa = group_pass(a, "tower", fa), pb = group_pass(b, "tower", fb);
        record(1, pa && pb, "tower lemma (rotation, Bernoulli)",
               (fa.empty() ? "" : "rotation: " + fa + "; ") + (fb.empty() ? "" : "bernoulli: " + fb + "; ") + seconds(a.seconds + b.seconds, 60));
    });
    const auto single = [&](int id, const std::string& what, const std::string& config, const std::string& group, double target) {
        guarded(id, what, [&] {
            const auto& r = get(config).report;
            std::string failed;
            const bool p = group_pass(r, group, failed);
            record(id, p, what, (failed.empty() ? "" : failed + "; ") + seconds(r.seconds, target));
        });
    };
    single(2, "rosenblatt breaker", "rosenblatt", "rosenblatt", 300);
    single(3, "factor encoding", "encode-factor", "encode", 600);
    single(4, "estimator oracles", "estimator-oracles", "oracles", 120);
    single(5, "generator behaviour", "generator", "generator", 120);
    single(6, "generator relabeling", "generator", "relabel", 600);
    single(7, "property suites", "properties", "properties", 300);

    guarded(8, "reproducibility", [&] {
        std::string differ;
        for (const auto& c : configs) {
            const auto wide = run(c, 8);
            if (wide.bytes != get(c).bytes) differ += (differ.empty() ? "" : ", ") + c;
        }
        record(8, differ.empty(), "reproducibility (widths 1 and 8)", differ.empty() ? "all reports byte-identical" : "differ: " + differ);
    });

    std::printf("overall %s\n", all ? "PASS" : "FAIL");
    return all ? 0 : 1;
}
