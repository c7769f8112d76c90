#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "../chain.hpp"
#include "../errors.hpp"
#include "../mpc/mpc.hpp"
#include "../mpc/plant.hpp"

/// Scenario files.
///
/// All times are given in milliseconds (fractions allowed) and stored as
/// integer ticks of 1 us. Every time must be a multiple of `quantum_us`.
namespace cantiming::harness {

enum class Strategy { WorstCase, TimingModel };

inline const char* to_string(Strategy s) { return s == Strategy::WorstCase ? "worst_case" : "timing_model"; }

struct ReferenceSpec {
    enum class Kind { Constant, Square, Sinusoid } kind = Kind::Constant;
    double value = 0.0;  // constant level, or offset for the periodic kinds
    double amplitude = 0.0;
    double period_s = 1.0;
    double phase_s = 0.0;

    /// Square waves start at +amplitude and switch sign every half period.
    double at(double t) const {
        switch (kind) {
        case Kind::Constant:
            return value;
        case Kind::Square: {
            const double ph = std::fmod(t + phase_s, period_s);
            const double pos = ph < 0 ? ph + period_s : ph;
            return value + (pos < 0.5 * period_s ? amplitude : -amplitude);
        }
        case Kind::Sinusoid:
            return value + amplitude * std::sin(2.0 * std::numbers::pi * (t + phase_s) / period_s);
        }
        return value;
    }
};

struct LoopConfig {
    int chain = 0;
    mpc::PlantModel plant;
    Eigen::VectorXd x0;
    ReferenceSpec reference;
};

struct MpcConfig {
    Time horizon = Time{100'000};
    std::optional<Eigen::MatrixXd> Q1, Q2, Q3;  // absent: identity, 0.01 identity, zero
    double q1_scale = 1.0, q2_scale = 0.01, q3_scale = 0.0;
    double u_min = -4.0, u_max = 4.0;
    std::optional<double> x_min, x_max;
    double state_penalty = 1e4;
    mpc::SolverOptions solver;
};

struct ScenarioConfig {
    std::string name;
    Time quantum = Time{1000};
    Time horizon = Time::zero();
    MessageSet chains;
    /// Chains that are not part of the off-line design (excluded from the worst-case baseline).
    std::vector<bool> sporadic;
    std::vector<LoopConfig> loops;
    MpcConfig mpc;
    std::optional<Strategy> strategy;

    const LoopConfig* loop_for(int chain) const {
        for (const auto& l : loops)
            if (l.chain == chain) return &l;
        return nullptr;
    }

    /// The problem solved by the controller of one loop.
    mpc::MpcProblem problem_for(const LoopConfig& loop) const {
        const auto n = loop.plant.states(), m = loop.plant.inputs(), p = loop.plant.outputs();
        mpc::MpcProblem pb;
        pb.Q1 = mpc.Q1 ? *mpc.Q1 : Eigen::MatrixXd(mpc.q1_scale * Eigen::MatrixXd::Identity(p, p));
        pb.Q2 = mpc.Q2 ? *mpc.Q2 : Eigen::MatrixXd(mpc.q2_scale * Eigen::MatrixXd::Identity(m, m));
        pb.Q3 = mpc.Q3 ? *mpc.Q3 : Eigen::MatrixXd(mpc.q3_scale * Eigen::MatrixXd::Identity(n, n));
        pb.horizon = static_cast<double>(mpc.horizon.ticks) * 1e-6;
        pb.u_min = Eigen::VectorXd::Constant(m, mpc.u_min);
        pb.u_max = Eigen::VectorXd::Constant(m, mpc.u_max);
        if (mpc.x_min) pb.x_min = Eigen::VectorXd::Constant(n, *mpc.x_min);
        if (mpc.x_max) pb.x_max = Eigen::VectorXd::Constant(n, *mpc.x_max);
        pb.state_penalty = mpc.state_penalty;
        const ReferenceSpec ref = loop.reference;
        pb.reference = [ref, p](double t) { return Eigen::VectorXd::Constant(p, ref.at(t)); };
        return pb;
    }
};

namespace detail {

using nlohmann::json;

class Reader {
public:
    Reader(const json& root, Time quantum) : root_(root), quantum_(quantum) {}

    [[noreturn]] static void fail(const std::string& path, const std::string& what) {
        throw ConfigError(path + ": " + what);
    }

    static const json* find(const json& obj, const char* key) {
        auto it = obj.find(key);
        return it == obj.end() || it->is_null() ? nullptr : &*it;
    }

    static double number(const json& obj, const std::string& path, const char* key, std::optional<double> fallback = {}) {
        const json* v = find(obj, key);
        if (!v) {
            if (fallback) return *fallback;
            fail(path + "." + key, "missing");
        }
        if (!v->is_number()) fail(path + "." + key, "expected a number");
        const double d = v->get<double>();
        if (!std::isfinite(d)) fail(path + "." + key, "must be finite");
        return d;
    }

    /// Milliseconds to ticks, checking exactness and quantum alignment.
    Time ms(const json& obj, const std::string& path, const char* key, std::optional<double> fallback = {}) const {
        const double v = number(obj, path, key, fallback);
        return to_ticks(v, path + "." + key);
    }

    Time to_ticks(double ms_value, const std::string& where) const {
        const double us = ms_value * 1000.0;
        const auto ticks = std::llround(us);
        if (std::abs(us - static_cast<double>(ticks)) > 1e-6) fail(where, "not a whole number of microseconds");
        if (ticks % quantum_.ticks != 0)
            fail(where, "not a multiple of the quantum (" + std::to_string(quantum_.ticks) + " us)");
        return Time{ticks};
    }

    static Eigen::MatrixXd matrix(const json& v, const std::string& path) {
        if (!v.is_array() || v.empty()) fail(path, "expected a non-empty array of rows");
        const auto rows = static_cast<Eigen::Index>(v.size());
        Eigen::Index cols = -1;
        Eigen::MatrixXd M;
        for (Eigen::Index r = 0; r < rows; ++r) {
            const auto& row = v[static_cast<std::size_t>(r)];
            if (!row.is_array()) fail(path, "row " + std::to_string(r) + " is not an array");
            if (cols < 0) {
                cols = static_cast<Eigen::Index>(row.size());
                if (cols == 0) fail(path, "empty row");
                M.resize(rows, cols);
            }
            if (static_cast<Eigen::Index>(row.size()) != cols) fail(path, "ragged rows");
            for (Eigen::Index c = 0; c < cols; ++c) {
                const auto& x = row[static_cast<std::size_t>(c)];
                if (!x.is_number()) fail(path, "non-numeric entry");
                M(r, c) = x.get<double>();
            }
        }
        return M;
    }

    static Eigen::VectorXd vector(const json& v, const std::string& path) {
        if (!v.is_array()) fail(path, "expected an array");
        Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number()) fail(path, "non-numeric entry");
            out(static_cast<Eigen::Index>(i)) = v[i].get<double>();
        }
        return out;
    }

    static ReferenceSpec reference(const json& v, const std::string& path) {
        if (!v.is_object()) fail(path, "expected an object");
        ReferenceSpec r;
        const std::string type = v.value("type", std::string("constant"));
        if (type == "constant") {
            r.kind = ReferenceSpec::Kind::Constant;
            r.value = number(v, path, "value", 0.0);
        } else if (type == "square" || type == "sinusoid") {
            r.kind = type == "square" ? ReferenceSpec::Kind::Square : ReferenceSpec::Kind::Sinusoid;
            r.amplitude = number(v, path, "amplitude");
            r.period_s = number(v, path, "period_s");
            r.value = number(v, path, "offset", 0.0);
            r.phase_s = number(v, path, "phase_s", 0.0);
            if (!(r.period_s > 0)) fail(path + ".period_s", "must be positive");
        } else {
            fail(path + ".type", "unknown reference type '" + type + "'");
        }
        return r;
    }

    const json& root() const { return root_; }

private:
    const json& root_;
    Time quantum_;
};

inline ChainParams read_params(const Reader& rd, const nlohmann::json& v, const std::string& path,
                               const std::optional<ChainParams>& base) {
    ChainParams p;
    auto t = [&](const char* key, std::optional<Time> fb) {
        return rd.ms(v, path, key, fb ? std::optional<double>(static_cast<double>(fb->ticks) / 1000.0) : std::nullopt);
    };
    p.period = t("T_ms", base ? std::optional(base->period) : std::nullopt);
    p.prep_sensor = t("I1_ms", base ? std::optional(base->prep_sensor) : std::nullopt);
    p.tx_sensor = t("C1_ms", base ? std::optional(base->tx_sensor) : std::nullopt);
    p.prep_control = t("I2_ms", base ? base->prep_control : Time::zero());
    p.tx_control = t("C2_ms", base ? base->tx_control : Time::zero());
    auto prio = [&](const char* key, std::optional<std::uint32_t> fb) {
        const double d = Reader::number(v, path, key, fb ? std::optional<double>(*fb) : std::nullopt);
        if (d < 0 || d != std::floor(d) || d > 4294967295.0) Reader::fail(path + "." + key, "expected a non-negative integer");
        return Priority{static_cast<std::uint32_t>(d)};
    };
    p.prio_sensor = prio("P1", base ? std::optional(base->prio_sensor.value) : std::nullopt);
    const bool has_p2 = Reader::find(v, "P2") != nullptr;
    if (p.tx_control > Time::zero() && !has_p2 && !base) Reader::fail(path + ".P2", "missing (required when C2 > 0)");
    p.prio_control = has_p2 || base ? prio("P2", base ? std::optional(base->prio_control.value) : std::nullopt) : Priority{0};
    if (p.period <= Time::zero()) Reader::fail(path + ".T_ms", "must be positive");
    if (p.tx_sensor <= Time::zero()) Reader::fail(path + ".C1_ms", "must be positive");
    if (p.prep_sensor < Time::zero()) Reader::fail(path + ".I1_ms", "must be non-negative");
    if (p.prep_control < Time::zero()) Reader::fail(path + ".I2_ms", "must be non-negative");
    if (p.tx_control < Time::zero()) Reader::fail(path + ".C2_ms", "must be non-negative");
    return p;
}

}  // namespace detail

/// Parses and validates a scenario. `origin` prefixes error messages.
inline ScenarioConfig parse_scenario(const nlohmann::json& root, const std::string& origin = "scenario") {
    using detail::Reader;
    if (!root.is_object()) Reader::fail(origin, "top level must be an object");
    ScenarioConfig cfg;
    cfg.name = root.value("name", origin);

    const double q = Reader::number(root, origin, "quantum_us", 1000.0);
    if (q < 1 || q != std::floor(q)) Reader::fail(origin + ".quantum_us", "must be a positive integer");
    cfg.quantum = Time{static_cast<std::int64_t>(q)};
    const Reader rd(root, cfg.quantum);
    cfg.horizon = rd.ms(root, origin, "horizon_ms");
    if (cfg.horizon < Time::zero()) Reader::fail(origin + ".horizon_ms", "must be non-negative");

    if (const auto* s = Reader::find(root, "strategy")) {
        const std::string v = s->is_string() ? s->get<std::string>() : "";
        if (v == "worst_case" || v == "wc") cfg.strategy = Strategy::WorstCase;
        else if (v == "timing_model" || v == "tm") cfg.strategy = Strategy::TimingModel;
        else Reader::fail(origin + ".strategy", "expected worst_case or timing_model");
    }

    // Chains.
    const nlohmann::json empty = nlohmann::json::array();
    const auto* chains = Reader::find(root, "chains");
    if (chains && !chains->is_array()) Reader::fail(origin + ".chains", "expected an array");
    const auto& chain_list = chains ? *chains : empty;
    for (std::size_t i = 0; i < chain_list.size(); ++i) {
        const auto& c = chain_list[i];
        const std::string path = origin + ".chains[" + std::to_string(i) + "]";
        if (!c.is_object()) Reader::fail(path, "expected an object");
        MessageChainSpec spec;
        spec.id = static_cast<int>(i) + 1;
        if (const auto* id = Reader::find(c, "id")) {
            if (!id->is_number_integer() || id->get<int>() != spec.id)
                Reader::fail(path + ".id", "chain ids must be 1..N in file order");
        }
        const ChainParams base = detail::read_params(rd, c, path, std::nullopt);
        spec.segments.push_back({Time::zero(), base});
        spec.first_arrival = rd.ms(c, path, "first_arrival_ms", 0.0);
        if (Reader::find(c, "active_until_ms")) spec.active_until = rd.ms(c, path, "active_until_ms");
        cfg.sporadic.push_back(c.value("sporadic", false));
        cfg.chains.push_back(std::move(spec));
    }

    // Runtime parameter changes become additional segments.
    if (const auto* changes = Reader::find(root, "runtime_changes")) {
        if (!changes->is_array()) Reader::fail(origin + ".runtime_changes", "expected an array");
        for (std::size_t i = 0; i < changes->size(); ++i) {
            const auto& ch = (*changes)[i];
            const std::string path = origin + ".runtime_changes[" + std::to_string(i) + "]";
            if (!ch.is_object()) Reader::fail(path, "expected an object");
            const double id = Reader::number(ch, path, "chain");
            if (id < 1 || id > static_cast<double>(cfg.chains.size()) || id != std::floor(id))
                Reader::fail(path + ".chain", "no such chain");
            auto& spec = cfg.chains[static_cast<std::size_t>(id) - 1];
            const Time at = rd.ms(ch, path, "at_ms");
            if (at <= spec.segments.back().start) Reader::fail(path + ".at_ms", "changes of a chain must be in increasing time order");
            spec.segments.push_back({at, detail::read_params(rd, ch, path, spec.segments.back().params)});
        }
    }

    // Priorities must be unique over every message that can be on the bus; a
    // runtime change may keep the priority of the same sub-message.
    std::map<std::uint32_t, std::pair<std::pair<std::size_t, int>, std::string>> prio_owner;
    for (std::size_t i = 0; i < cfg.chains.size(); ++i) {
        for (std::size_t s = 0; s < cfg.chains[i].segments.size(); ++s) {
            const auto& p = cfg.chains[i].segments[s].params;
            const std::string where = s == 0 ? origin + ".chains[" + std::to_string(i) + "]"
                                             : origin + ".runtime_changes (chain " + std::to_string(i + 1) + ", change " +
                                                   std::to_string(s) + ")";
            auto claim = [&](Priority pr, int sub, const char* key) {
                const std::string me = where + "." + key;
                const auto owner = std::make_pair(i, sub);
                auto [it, fresh] = prio_owner.emplace(pr.value, std::make_pair(owner, me));
                if (!fresh && it->second.first != owner)
                    Reader::fail(me, "duplicate priority " + std::to_string(pr.value) + " (also " + it->second.second + ")");
            };
            claim(p.prio_sensor, 1, "P1");
            if (p.has_control_message()) claim(p.prio_control, 2, "P2");
        }
    }
    validate(cfg.chains);

    // Plants.
    if (const auto* plants = Reader::find(root, "plants")) {
        if (!plants->is_array()) Reader::fail(origin + ".plants", "expected an array");
        for (std::size_t i = 0; i < plants->size(); ++i) {
            const auto& pl = (*plants)[i];
            const std::string path = origin + ".plants[" + std::to_string(i) + "]";
            if (!pl.is_object()) Reader::fail(path, "expected an object");
            LoopConfig loop;
            const double id = Reader::number(pl, path, "chain");
            if (id < 1 || id > static_cast<double>(cfg.chains.size()) || id != std::floor(id))
                Reader::fail(path + ".chain", "no such chain");
            loop.chain = static_cast<int>(id);
            if (cfg.loop_for(loop.chain)) Reader::fail(path + ".chain", "chain already has a plant");
            for (const auto& seg : cfg.chains[static_cast<std::size_t>(loop.chain - 1)].segments)
                if (!seg.params.has_control_message())
                    Reader::fail(path + ".chain", "chain has no control message (C2 = 0)");
            if (const auto* pd = Reader::find(pl, "pendulum")) {
                loop.plant = mpc::pendulum(Reader::number(*pd, path + ".pendulum", "a"), Reader::number(*pd, path + ".pendulum", "b"),
                                           Reader::number(*pd, path + ".pendulum", "c"));
            } else {
                for (const char* key : {"A", "B", "C"})
                    if (!Reader::find(pl, key)) Reader::fail(path + "." + key, "missing (or give 'pendulum')");
                loop.plant.A = Reader::matrix(pl["A"], path + ".A");
                loop.plant.B = Reader::matrix(pl["B"], path + ".B");
                loop.plant.C = Reader::matrix(pl["C"], path + ".C");
            }
            try {
                loop.plant.validate();
            } catch (const ConfigError& e) {
                Reader::fail(path, e.what());
            }
            loop.x0 = Reader::find(pl, "x0") ? Reader::vector(pl["x0"], path + ".x0")
                                              : Eigen::VectorXd::Zero(loop.plant.states());
            if (loop.x0.size() != loop.plant.states()) Reader::fail(path + ".x0", "wrong dimension");
            if (const auto* ref = Reader::find(pl, "reference")) loop.reference = Reader::reference(*ref, path + ".reference");
            else if (const auto* mp = Reader::find(root, "mpc"); mp && Reader::find(*mp, "reference"))
                loop.reference = Reader::reference((*mp)["reference"], origin + ".mpc.reference");
            cfg.loops.push_back(std::move(loop));
        }
    }

    // MPC.
    if (const auto* mp = Reader::find(root, "mpc")) {
        const std::string path = origin + ".mpc";
        if (!mp->is_object()) Reader::fail(path, "expected an object");
        auto& m = cfg.mpc;
        m.horizon = rd.ms(*mp, path, "Tp_ms", 100.0);
        if (m.horizon <= Time::zero()) Reader::fail(path + ".Tp_ms", "must be positive");
        auto weight = [&](const char* key, std::optional<Eigen::MatrixXd>& mat, double& scale) {
            if (const auto* w = Reader::find(*mp, key)) {
                if (w->is_number()) scale = w->get<double>();
                else mat = Reader::matrix(*w, path + "." + key);
            }
        };
        weight("Q1", m.Q1, m.q1_scale);
        weight("Q2", m.Q2, m.q2_scale);
        weight("Q3", m.Q3, m.q3_scale);
        m.u_min = Reader::number(*mp, path, "u_min", m.u_min);
        m.u_max = Reader::number(*mp, path, "u_max", m.u_max);
        if (Reader::find(*mp, "x_min")) m.x_min = Reader::number(*mp, path, "x_min");
        if (Reader::find(*mp, "x_max")) m.x_max = Reader::number(*mp, path, "x_max");
        m.state_penalty = Reader::number(*mp, path, "state_penalty", m.state_penalty);
        if (const auto* s = Reader::find(*mp, "solver")) {
            m.solver.tolerance = Reader::number(*s, path + ".solver", "tolerance", m.solver.tolerance);
            m.solver.max_iterations = static_cast<int>(Reader::number(*s, path + ".solver", "max_iterations", m.solver.max_iterations));
        }
    }
    for (std::size_t i = 0; i < cfg.loops.size(); ++i) {
        try {
            cfg.problem_for(cfg.loops[i]).validate(cfg.loops[i].plant);
        } catch (const ConfigError& e) {
            Reader::fail(origin + ".mpc (plant of chain " + std::to_string(cfg.loops[i].chain) + ")", e.what());
        }
    }
    return cfg;
}

inline ScenarioConfig load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open file");
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": parse error: " + e.what());
    }
    return parse_scenario(root, path);
}

}  // namespace cantiming::harness
