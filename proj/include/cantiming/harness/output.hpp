#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "closed_loop.hpp"

/// File formats.
///
/// events.csv   time_us,kind,chain,k          one row per event, canonical order
/// loop<N>.csv  time_ms,y,lambda,u            1 ms samples (y_1.. etc. for vector signals)
/// instances.csv chain,k,alpha_us,beta_us,gamma_us,delta_us,alpha_hat_us,predicted_delta_us,predicted_gamma_us,missed
/// report.json  costs, verdict and solver counters
namespace cantiming::harness {

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline void write_events_csv(std::ostream& os, const EventTrace& trace) {
    os << "time_us,kind,chain,k\n";
    for (const auto& e : trace) os << e.at.ticks << ',' << kind_name(e) << ',' << e.chain << ',' << e.k << '\n';
}

inline EventTrace read_events_csv(std::istream& is, const std::string& origin = "trace") {
    EventTrace out;
    std::string line;
    if (!std::getline(is, line) || line.rfind("time_us,kind,chain,k", 0) != 0)
        throw ConfigError(origin + ": missing header 'time_us,kind,chain,k'");
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[4];
        for (auto& x : f)
            if (!std::getline(ss, x, ',')) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 4 fields");
        const auto kind = parse_kind(f[1]);
        if (!kind) throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown event kind '" + f[1] + "'");
        try {
            out.push_back(TimedEvent{Time{std::stoll(f[0])}, kind->first, std::stoi(f[2]), std::stoll(f[3]), kind->second});
        } catch (const std::logic_error&) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    return out;
}

inline EventTrace read_events_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open file");
    return read_events_csv(in, path);
}

inline void write_signals_csv(std::ostream& os, const LoopResult& loop) {
    auto header = [&](const char* name, Eigen::Index size) {
        if (size == 1) {
            os << ',' << name;
            return;
        }
        for (Eigen::Index i = 0; i < size; ++i) os << ',' << name << '_' << i + 1;
    };
    os << "time_ms";
    if (!loop.signals.empty()) {
        header("y", loop.signals.front().y.size());
        header("lambda", loop.signals.front().lambda.size());
        header("u", loop.signals.front().u.size());
    }
    os << '\n';
    for (const auto& s : loop.signals) {
        os << format_real(static_cast<double>(s.t.ticks) / 1000.0);
        for (const auto* v : {&s.y, &s.lambda, &s.u})
            for (Eigen::Index i = 0; i < v->size(); ++i) os << ',' << format_real((*v)(i));
        os << '\n';
    }
}

inline void write_instances_csv(std::ostream& os, const RunReport& rep) {
    os << "chain,k,alpha_us,beta_us,gamma_us,delta_us,alpha_hat_us,predicted_delta_us,predicted_gamma_us,missed\n";
    auto opt = [&](const std::optional<Time>& t) {
        if (t) os << t->ticks;
    };
    for (const auto& r : rep.rows) {
        os << r.chain << ',' << r.k << ',' << r.alpha.ticks << ',';
        opt(r.beta);
        os << ',';
        opt(r.gamma);
        os << ',';
        opt(r.delta());
        os << ',';
        opt(r.alpha_hat);
        os << ',';
        opt(r.predicted_delta);
        os << ',';
        opt(r.predicted_gamma);
        os << ',' << (r.missed ? 1 : 0) << '\n';
    }
}

inline nlohmann::ordered_json report_json(const RunReport& rep) {
    nlohmann::ordered_json j;
    j["scenario"] = rep.scenario;
    j["strategy"] = to_string(rep.strategy);
    j["schedulable"] = rep.verdict.schedulable;
    if (rep.verdict.first_violation)
        j["first_violation"] = {{"chain", rep.verdict.first_violation->chain}, {"at_us", rep.verdict.first_violation->at.ticks}};
    std::size_t misses = 0;
    for (const auto& r : rep.rows) misses += r.missed ? 1 : 0;
    j["deadline_misses"] = misses;
    j["loops"] = nlohmann::ordered_json::array();
    for (const auto& l : rep.loops) {
        nlohmann::ordered_json lj;
        lj["chain"] = l.chain;
        lj["tracking_cost"] = format_real(l.tracking_cost);
        lj["solves"] = l.solves;
        lj["unconverged"] = l.unconverged;
        lj["prediction_fallbacks"] = l.prediction_fallbacks;
        if (auto it = rep.worst_case_delays.find(l.chain); it != rep.worst_case_delays.end())
            lj["worst_case_delay_us"] = it->second.ticks;
        j["loops"].push_back(lj);
    }
    return j;
}

/// Writes events.csv, instances.csv, loop<N>.csv and report.json into `dir`.
inline void write_run(const std::filesystem::path& dir, const RunReport& rep) {
    std::filesystem::create_directories(dir);
    auto open = [&](const std::string& name) {
        std::ofstream f(dir / name);
        if (!f) throw ConfigError((dir / name).string() + ": cannot write");
        return f;
    };
    {
        auto f = open("events.csv");
        write_events_csv(f, rep.trace);
    }
    {
        auto f = open("instances.csv");
        write_instances_csv(f, rep);
    }
    for (const auto& l : rep.loops) {
        auto f = open("loop" + std::to_string(l.chain) + ".csv");
        write_signals_csv(f, l);
    }
    auto f = open("report.json");
    f << report_json(rep).dump(2) << '\n';
}

inline void write_comparison(const std::filesystem::path& dir, const Comparison& c) {
    write_run(dir / "worst_case", c.worst_case);
    write_run(dir / "timing_model", c.timing_model);
    std::ofstream f(dir / "costs.csv");
    if (!f) throw ConfigError((dir / "costs.csv").string() + ": cannot write");
    f << "chain,cost_worst_case,cost_timing_model,ratio\n";
    for (const auto& [chain, ratio] : c.cost_ratio)
        f << chain << ',' << format_real(c.worst_case.loop(chain).tracking_cost) << ','
          << format_real(c.timing_model.loop(chain).tracking_cost) << ',' << format_real(ratio) << '\n';
}

}  // namespace cantiming::harness
