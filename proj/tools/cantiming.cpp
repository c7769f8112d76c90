#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "cantiming/harness/closed_loop.hpp"
#include "cantiming/harness/output.hpp"
#include "cantiming/harness/scenario.hpp"

namespace h = cantiming::harness;
using namespace cantiming;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kUnschedulable = 2;
constexpr int kTraceMismatch = 3;

std::optional<h::Strategy> parse_strategy(const std::string& s) {
    if (s == "wc" || s == "worst_case") return h::Strategy::WorstCase;
    if (s == "tm" || s == "timing_model") return h::Strategy::TimingModel;
    return std::nullopt;
}

void print_costs(const h::RunReport& rep) {
    for (const auto& l : rep.loops)
        std::cout << "loop " << l.chain << ": cost " << h::format_real(l.tracking_cost) << ", " << l.solves << " solves\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CAN message-chain timing model and delay-aware MPC co-simulation"};
    app.require_subcommand(1);

    std::string scenario, out_dir, strategy, trace_a, trace_b;
    int reps = 5;
    double horizon_ms = -1;

    auto* run = app.add_subcommand("run", "closed-loop run of one strategy");
    run->add_option("scenario", scenario, "scenario file")->required();
    run->add_option("--strategy", strategy, "wc | tm (default: the scenario's)");
    run->add_option("--out", out_dir, "output directory")->default_val("out");

    auto* compare = app.add_subcommand("compare", "run both strategies and compare tracking costs");
    compare->add_option("scenario", scenario, "scenario file")->required();
    compare->add_option("--out", out_dir, "output directory")->default_val("out");

    auto* check = app.add_subcommand("check", "schedulability verdict over the scenario horizon");
    check->add_option("scenario", scenario, "scenario file")->required();

    auto* bench = app.add_subcommand("bench", "wall-clock comparison of the hybrid model and the tick simulator");
    bench->add_option("scenario", scenario, "scenario file")->required();
    bench->add_option("--reps", reps, "repetitions (median reported)")->check(CLI::PositiveNumber);
    bench->add_option("--horizon-ms", horizon_ms, "override the scenario horizon");

    auto* diff = app.add_subcommand("diff", "compare two event traces");
    diff->add_option("a", trace_a, "events CSV")->required();
    diff->add_option("b", trace_b, "events CSV")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*diff) {
            const auto d = oracle::diff_traces(h::read_events_csv(trace_a), h::read_events_csv(trace_b));
            for (const auto& x : d) std::cout << x.describe() << '\n';
            std::cout << (d.empty() ? "traces identical\n" : std::to_string(d.size()) + " discrepancies\n");
            return d.empty() ? kOk : kTraceMismatch;
        }

        auto cfg = h::load_scenario(scenario);

        if (*run) {
            std::optional<h::Strategy> s = cfg.strategy;
            if (!strategy.empty()) {
                s = parse_strategy(strategy);
                if (!s) throw ConfigError("--strategy: expected wc or tm");
            }
            if (!s) throw ConfigError(scenario + ".strategy: missing (or pass --strategy)");
            const auto rep = h::run_closed_loop(cfg, *s);
            h::write_run(out_dir, rep);
            print_costs(rep);
            std::cout << "wrote " << out_dir << '\n';
            return kOk;
        }
        if (*compare) {
            const auto c = h::compare_strategies(cfg);
            h::write_comparison(out_dir, c);
            for (const auto& [chain, ratio] : c.cost_ratio)
                std::cout << "loop " << chain << ": worst_case " << h::format_real(c.worst_case.loop(chain).tracking_cost)
                          << ", timing_model " << h::format_real(c.timing_model.loop(chain).tracking_cost) << ", ratio "
                          << h::format_real(ratio) << '\n';
            std::cout << "wrote " << out_dir << '\n';
            return kOk;
        }
        if (*check) {
            const auto v = sched::window_check(cfg.chains, cfg.horizon);
            if (v.schedulable) {
                std::cout << "schedulable over " << cfg.horizon.ticks << " us";
                if (!v.margin.is_never()) std::cout << " (min slack " << v.margin.ticks << " us)";
                std::cout << '\n';
                return kOk;
            }
            std::cout << "unschedulable: chain " << v.first_violation->chain << " cannot meet its deadline (detected at "
                      << v.first_violation->at.ticks << " us)\n";
            return kUnschedulable;
        }
        if (*bench) {
            const Time horizon = horizon_ms >= 0 ? Time{std::llround(horizon_ms * 1000.0)} : cfg.horizon;
            const auto b = h::bench_engines(cfg.chains, horizon, reps);
            std::cout << "horizon_us " << b.horizon.ticks << "\nevents " << b.events << "\nhybrid_ms " << h::format_real(b.hybrid_ms)
                      << "\noracle_ms " << h::format_real(b.oracle_ms) << "\nspeedup "
                      << (b.speedup ? h::format_real(*b.speedup) : std::string("n/a")) << '\n';
            return kOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const SchedulabilityViolation& e) {
        std::cerr << "schedulability violation: " << e.what() << '\n';
        return kUnschedulable;
    }
    return kOk;
}
