#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <catch_amalgamated.hpp>

#include "cantiming/harness/closed_loop.hpp"
#include "cantiming/harness/output.hpp"
#include "cantiming/harness/scenario.hpp"
#include "test_util.hpp"

using namespace cantiming;
using namespace cantiming::harness;
using Catch::Matchers::ContainsSubstring;
using testutil::ms;

namespace fs = std::filesystem;

namespace {

const std::string kScenarios = CANTIMING_SCENARIO_DIR;

nlohmann::json chain_json(double T, double P1, double P2, double first = 0) {
    return {{"T_ms", T}, {"I1_ms", 1}, {"C1_ms", 3}, {"I2_ms", 2}, {"C2_ms", 3}, {"P1", P1}, {"P2", P2}, {"first_arrival_ms", first}};
}

nlohmann::json pendulum_json(int chain, double a, double b, double c) {
    return {{"chain", chain}, {"pendulum", {{"a", a}, {"b", b}, {"c", c}}}, {"x0", {0, 0}}};
}

/// Short three-loop-style scenario with a configurable chain list.
nlohmann::json base(nlohmann::json chains, nlohmann::json plants, double horizon_ms = 300) {
    return {{"name", "t"},
            {"horizon_ms", horizon_ms},
            {"chains", std::move(chains)},
            {"plants", std::move(plants)},
            {"mpc", {{"Tp_ms", 100}, {"Q3", 1.0}, {"reference", {{"type", "square"}, {"amplitude", 0.1}, {"period_s", 0.2}}}}}};
}

std::string error_of(const nlohmann::json& j) {
    try {
        parse_scenario(j, "s");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<Time> deltas(const RunReport& rep, int chain) {
    std::vector<Time> out;
    for (const auto& r : rep.rows)
        if (r.chain == chain && r.delta()) out.push_back(*r.delta());
    return out;
}

}  // namespace

TEST_CASE("scenario loading") {
    SECTION("three-loop experiment") {
        const auto cfg = load_scenario(kScenarios + "/three_loops.json");
        CHECK(cfg.chains.size() == 3);
        CHECK(cfg.loops.size() == 3);
        CHECK(cfg.horizon == ms(2000));
        CHECK(cfg.strategy == Strategy::TimingModel);
        CHECK(cfg.chains[2].segments[0].params.period == ms(40));
        CHECK(cfg.mpc.horizon == ms(100));
    }
    SECTION("runtime-change experiment") {
        const auto cfg = load_scenario(kScenarios + "/three_loops_runtime.json");
        CHECK(cfg.chains.size() == 5);
        CHECK(cfg.sporadic[3]);
        CHECK(cfg.chains[1].params_at(ms(1200)).period == ms(40));
        CHECK(cfg.chains[1].params_at(ms(1600)).period == ms(30));
        CHECK(cfg.chains[3].arrives_at(ms(1000)));
        CHECK_FALSE(cfg.chains[3].arrives_at(ms(1500)));
    }
    SECTION("duplicate priority names the field") {
        const auto msg = error_of(base({chain_json(20, 1, 2), chain_json(30, 3, 4), chain_json(40, 3, 6)}, nlohmann::json::array()));
        CHECK_THAT(msg, ContainsSubstring("s.chains[2].P1"));
        CHECK_THAT(msg, ContainsSubstring("duplicate priority 3"));
    }
    SECTION("time values must align with the quantum") {
        auto j = base({chain_json(20.5, 1, 2)}, nlohmann::json::array());
        CHECK_THAT(error_of(j), ContainsSubstring("s.chains[0].T_ms"));
        j["quantum_us"] = 500;
        CHECK(error_of(j).empty());
    }
    SECTION("no chains is a valid, empty scenario") {
        const auto cfg = parse_scenario(base(nlohmann::json::array(), nlohmann::json::array()), "s");
        CHECK(cfg.chains.empty());
        const auto rep = run_closed_loop(cfg, Strategy::TimingModel);
        CHECK(rep.trace.empty());
        CHECK(rep.verdict.schedulable);
    }
    SECTION("other errors") {
        auto j = base({chain_json(20, 1, 2)}, nlohmann::json::array());
        j.erase("horizon_ms");
        CHECK_THAT(error_of(j), ContainsSubstring("s.horizon_ms"));
        j = base({chain_json(20, 1, 2)}, {pendulum_json(2, 1, 1, 1)});
        CHECK_THAT(error_of(j), ContainsSubstring("s.plants[0].chain"));
        j = base({chain_json(20, 1, 2)}, nlohmann::json::array());
        j["strategy"] = "fastest";
        CHECK_THAT(error_of(j), ContainsSubstring("s.strategy"));
        CHECK_THROWS_AS(load_scenario(kScenarios + "/does_not_exist.json"), ConfigError);
    }
}

TEST_CASE("closed loop on the three-loop experiment") {
    auto cfg = load_scenario(kScenarios + "/three_loops.json");
    cfg.horizon = ms(200);
    SECTION("timing-model strategy") {
        const auto rep = run_closed_loop(cfg, Strategy::TimingModel);
        const auto d3 = deltas(rep, 3);
        REQUIRE(d3.size() >= 4);
        CHECK(std::vector<Time>(d3.begin(), d3.begin() + 4) == std::vector<Time>{ms(21), ms(13), ms(13), ms(21)});
        for (const auto& r : rep.rows) {
            if (r.gamma) CHECK(*r.delta() == *r.gamma - r.alpha);
            if (r.alpha_hat) CHECK(*r.alpha_hat >= r.alpha);
        }
        CHECK(rep.verdict.schedulable);
        for (const auto& l : rep.loops) CHECK(l.solves > 0);
    }
    SECTION("worst-case strategy assumes a constant delay") {
        const auto rep = run_closed_loop(cfg, Strategy::WorstCase);
        CHECK(rep.worst_case_delays.at(1) == ms(10));
        CHECK(rep.worst_case_delays.at(2) == ms(13));
        CHECK(rep.worst_case_delays.at(3) == ms(21));
        for (const auto& r : rep.rows)
            if (r.predicted_delta) CHECK(*r.predicted_delta == rep.worst_case_delays.at(r.chain));
    }
}

TEST_CASE("nothing to track means no control effort") {
    auto j = base({chain_json(20, 1, 2), chain_json(30, 3, 4)}, {pendulum_json(1, 98, 120, 20), pendulum_json(2, 65, 52, 13)});
    j["mpc"]["reference"] = {{"type", "constant"}, {"value", 0}};
    const auto cfg = parse_scenario(j, "s");
    for (auto s : {Strategy::WorstCase, Strategy::TimingModel}) {
        const auto rep = run_closed_loop(cfg, s);
        for (const auto& l : rep.loops) {
            CHECK(l.tracking_cost == 0.0);
            for (const auto& sig : l.signals) CHECK(sig.u.isZero(0.0));
        }
    }
}

TEST_CASE("an uncontended loop behaves the same under both strategies") {
    const auto cfg = parse_scenario(base({chain_json(20, 1, 2)}, {pendulum_json(1, 44, 30, 10)}), "s");
    const auto cmp = compare_strategies(cfg);
    CHECK(cmp.worst_case.loop(1).tracking_cost == cmp.timing_model.loop(1).tracking_cost);
    CHECK(cmp.cost_ratio.at(1) == 1.0);
    for (const auto& r : cmp.timing_model.rows)
        if (r.predicted_delta) CHECK(*r.predicted_delta == ms(9));
}

TEST_CASE("predicted delays are exact when every sampling instant is known exactly") {
    // Staggered chains: control frames contend, sensor frames never wait. First
    // instances are skipped: a chain not yet observed is invisible to the estimate.
    const auto cfg = parse_scenario(base({chain_json(20, 1, 2, 0), chain_json(20, 3, 4, 4)},
                                         {pendulum_json(1, 98, 120, 20), pendulum_json(2, 44, 30, 10)}),
                                    "s");
    const auto rep = run_closed_loop(cfg, Strategy::TimingModel);
    int checked = 0;
    for (const auto& r : rep.rows) {
        if (!r.alpha_hat || !r.gamma || r.k == 0) continue;
        REQUIRE(*r.alpha_hat == r.alpha);
        CHECK(*r.predicted_gamma == *r.gamma);
        ++checked;
    }
    CHECK(checked > 20);
    CHECK(deltas(rep, 1).front() == ms(11));
    CHECK(deltas(rep, 2).front() == ms(10));
}

TEST_CASE("actuation holds between control receptions") {
    auto cfg = load_scenario(kScenarios + "/three_loops.json");
    cfg.horizon = ms(300);
    cfg.mpc.q3_scale = 1.0;
    const auto rep = run_closed_loop(cfg, Strategy::TimingModel);
    for (const auto& l : rep.loops) {
        std::vector<Time> gammas;
        for (const auto& e : select(rep.trace, EventKind::ControlTxEnd, l.chain)) gammas.push_back(e.at);
        bool moved = false;
        for (std::size_t i = 1; i < l.signals.size(); ++i) {
            const auto& a = l.signals[i - 1];
            const auto& b = l.signals[i];
            const bool received = std::any_of(gammas.begin(), gammas.end(), [&](Time g) { return g > a.t && g <= b.t; });
            if (!received) CHECK(a.u == b.u);
            moved = moved || a.u != b.u;
        }
        CHECK(moved);
        // Nothing is applied before the first control reception.
        for (const auto& s : l.signals)
            if (s.t < gammas.front()) CHECK(s.u.isZero(0.0));
    }
}

TEST_CASE("run output is deterministic and round-trips the trace") {
    auto cfg = load_scenario(kScenarios + "/three_loops.json");
    cfg.horizon = ms(150);
    const fs::path root = fs::temp_directory_path() / "cantiming_test_out";
    fs::remove_all(root);
    write_run(root / "a", run_closed_loop(cfg, Strategy::TimingModel));
    write_run(root / "b", run_closed_loop(cfg, Strategy::TimingModel));
    for (const char* f : {"events.csv", "instances.csv", "loop1.csv", "loop2.csv", "loop3.csv", "report.json"}) {
        INFO(f);
        const auto a = slurp(root / "a" / f);
        CHECK_FALSE(a.empty());
        CHECK(a == slurp(root / "b" / f));
    }
    const auto back = read_events_csv((root / "a" / "events.csv").string());
    CHECK(back == timing::simulate_hybrid(cfg.chains, cfg.horizon).trace);
    const auto rep = nlohmann::json::parse(slurp(root / "a" / "report.json"));
    CHECK(rep["schedulable"] == true);
    CHECK(rep["strategy"] == "timing_model");

    std::istringstream bad("time_us,kind,chain,k\n12,Teleport,1,0\n");
    CHECK_THROWS_AS(read_events_csv(bad), ConfigError);
    fs::remove_all(root);
}

TEST_CASE("command-line exit codes") {
    const fs::path dir = fs::temp_directory_path() / "cantiming_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto write = [&](const std::string& name, const nlohmann::json& j) {
        std::ofstream(dir / name) << j.dump();
        return (dir / name).string();
    };
    auto run = [](const std::string& args) {
        const int rc = std::system((std::string(CANTIMING_CLI) + " " + args + " > /dev/null 2>&1").c_str());
        return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    };
    const auto ok = write("ok.json", base({chain_json(20, 1, 2)}, nlohmann::json::array(), 100));
    const auto dup = write("dup.json", base({chain_json(20, 1, 2), chain_json(30, 1, 4)}, nlohmann::json::array(), 100));
    const auto heavy = write("heavy.json", base({chain_json(20, 1, 2), chain_json(30, 3, 4), chain_json(12, 5, 6)}, nlohmann::json::array(), 100));

    CHECK(run("check " + ok) == 0);
    CHECK(run("check " + dup) == 1);
    CHECK(run("check " + heavy) == 2);
    CHECK(run("run " + ok + " --strategy tm --out " + (dir / "o1").string()) == 0);
    CHECK(run("run " + ok + " --strategy tm --out " + (dir / "o2").string()) == 0);
    CHECK(run("diff " + (dir / "o1" / "events.csv").string() + " " + (dir / "o2" / "events.csv").string()) == 0);
    CHECK(slurp(dir / "o1" / "instances.csv") == slurp(dir / "o2" / "instances.csv"));
    fs::remove_all(dir);
}
