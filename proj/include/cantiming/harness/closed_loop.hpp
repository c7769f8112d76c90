#pragma once

#include <algorithm>
#include <chrono>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "../events.hpp"
#include "../mpc/mpc.hpp"
#include "../mpc/plant.hpp"
#include "../mpc/predict.hpp"
#include "../observer.hpp"
#include "../oracle.hpp"
#include "../schedulability.hpp"
#include "../timing/hybrid.hpp"
#include "scenario.hpp"

namespace cantiming::harness {

constexpr double kTickSeconds = 1e-6;
constexpr std::int64_t kSignalStep = 1000;  // ticks between signal samples

/// One instance of one chain as it happened, and what the controller assumed about it.
struct InstanceRow {
    int chain = 0;
    std::int64_t k = 0;
    Time alpha;
    std::optional<Time> beta;
    std::optional<Time> gamma;
    std::optional<Time> alpha_hat;
    std::optional<Time> predicted_delta;
    std::optional<Time> predicted_gamma;
    bool missed = false;

    std::optional<Time> delta() const {
        if (!gamma) return std::nullopt;
        return *gamma - alpha;
    }
};

struct SignalSample {
    Time t;
    Eigen::VectorXd y;
    Eigen::VectorXd lambda;
    Eigen::VectorXd u;
};

struct LoopResult {
    int chain = 0;
    double tracking_cost = 0.0;
    int solves = 0;
    int unconverged = 0;
    /// Solves where delay prediction failed and the previous delays were reused.
    int prediction_fallbacks = 0;
    std::vector<SignalSample> signals;
};

struct RunReport {
    std::string scenario;
    Strategy strategy = Strategy::TimingModel;
    sched::SchedVerdict verdict;
    std::vector<LoopResult> loops;
    std::vector<InstanceRow> rows;
    EventTrace trace;
    /// Constant delay assumed per loop under the worst-case strategy.
    std::map<int, Time> worst_case_delays;

    const LoopResult& loop(int chain) const {
        for (const auto& l : loops)
            if (l.chain == chain) return l;
        throw PreconditionViolation("no loop for chain " + std::to_string(chain));
    }
};

/// What a controller can know at `now`: segments already started, chains already
/// activated, and deactivations already passed.
inline MessageSet known_at(const MessageSet& specs, Time now) {
    MessageSet out = specs;
    for (auto& s : out) {
        while (s.segments.size() > 1 && s.segments.back().start > now) s.segments.pop_back();
        if (s.first_arrival > now) s.first_arrival = Time::never();
        if (s.active_until && *s.active_until > now) s.active_until.reset();
    }
    return out;
}

/// The message set designed off-line: first-segment parameters, sporadic chains silent.
inline MessageSet nominal_set(const ScenarioConfig& cfg) {
    MessageSet out = cfg.chains;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].segments.resize(1);
        if (cfg.sporadic[i]) out[i].active_until = out[i].first_arrival;
    }
    return out;
}

/// Probe long enough to cover one hyperperiod of the nominal set after the last first arrival.
inline Time worst_case_probe(const MessageSet& nominal) {
    std::int64_t hyper = 1, offset = 0, longest = 0;
    for (const auto& s : nominal) {
        if (s.active_until && *s.active_until <= s.first_arrival) continue;
        const auto& p = s.segments.front().params;
        hyper = std::min<std::int64_t>(std::lcm(hyper, p.period.ticks), 10'000'000);
        offset = std::max(offset, s.first_arrival.ticks);
        longest = std::max(longest, p.period.ticks);
    }
    return Time{offset + std::max(hyper, 2 * longest) + longest};
}

namespace detail {

struct LoopRuntime {
    const LoopConfig* cfg = nullptr;
    mpc::MpcProblem problem;
    mpc::DiscretizationCache cache;
    Eigen::VectorXd x;
    Eigen::VectorXd u;
    std::map<std::int64_t, Eigen::VectorXd> sampled;
    std::map<std::int64_t, Eigen::VectorXd> first_moves;
    std::optional<Time> last_delta;
    LoopResult result;
    std::optional<double> prev_err;  // integrand at the previous signal sample

    LoopRuntime(const LoopConfig& c, mpc::MpcProblem pb)
        : cfg(&c), problem(std::move(pb)), cache(c.plant), x(c.x0), u(Eigen::VectorXd::Zero(c.plant.inputs())) {
        result.chain = c.chain;
    }

    void integrate(Time h) {
        if (h <= Time::zero()) return;
        const double hs = static_cast<double>(h.ticks) * kTickSeconds;
        const auto& dz = cache.get(hs);
        x = dz.Ad * x + dz.Bd * u;
        result.tracking_cost += hs * u.dot(problem.Q2 * u);
    }

    void sample(Time t, Time prev_t) {
        const double ts = static_cast<double>(t.ticks) * kTickSeconds;
        SignalSample s{t, cfg->plant.C * x, problem.reference(ts), u};
        const Eigen::VectorXd e = s.lambda - s.y;
        const double err = e.dot(problem.Q1 * e);
        if (prev_err) result.tracking_cost += 0.5 * static_cast<double>((t - prev_t).ticks) * kTickSeconds * (*prev_err + err);
        prev_err = err;
        result.signals.push_back(std::move(s));
    }
};

inline mpc::DelaySchedule trim(mpc::DelaySchedule s, double horizon_end) {
    while (s.sampling.size() > 1 && s.boundary(s.sampling.size() - 1) >= horizon_end) {
        s.sampling.pop_back();
        s.delays.pop_back();
    }
    return s;
}

}  // namespace detail

/// Closed-loop co-simulation of every plant over the scenario horizon.
///
/// Bus timing does not depend on control values, so the event trace is computed
/// first and then replayed: arrivals sample the plant, sensor receptions trigger
/// observation, delay prediction and an MPC solve, and control receptions apply
/// the first move, held until the next control reception of the same loop.
inline RunReport run_closed_loop(const ScenarioConfig& cfg, Strategy strategy) {
    RunReport rep;
    rep.scenario = cfg.name;
    rep.strategy = strategy;
    const MessageSet& specs = cfg.chains;
    rep.trace = timing::simulate_hybrid(specs, cfg.horizon).trace;
    rep.verdict = sched::window_check(specs, cfg.horizon);

    std::vector<detail::LoopRuntime> loops;
    loops.reserve(cfg.loops.size());
    for (const auto& l : cfg.loops) loops.emplace_back(l, cfg.problem_for(l));
    auto runtime_for = [&](int chain) -> detail::LoopRuntime* {
        for (auto& l : loops)
            if (l.cfg->chain == chain) return &l;
        return nullptr;
    };

    if (strategy == Strategy::WorstCase && !loops.empty()) {
        const MessageSet nominal = nominal_set(cfg);
        const Time probe = worst_case_probe(nominal);
        for (const auto& l : cfg.loops) rep.worst_case_delays[l.chain] = sched::worst_case_delay(nominal, l.chain, probe);
    }

    // Instance rows straight from the trace.
    std::map<std::pair<int, std::int64_t>, std::size_t> row_of;
    for (const auto& e : rep.trace) {
        if (e.kind == EventKind::Arrival) {
            row_of[{e.chain, e.k}] = rep.rows.size();
            rep.rows.push_back(InstanceRow{e.chain, e.k, e.at, {}, {}, {}, {}, {}, false});
        }
    }
    auto row = [&](int chain, std::int64_t k) -> InstanceRow* {
        auto it = row_of.find({chain, k});
        return it == row_of.end() ? nullptr : &rep.rows[it->second];
    };

    observer::Observer obs(specs);
    const Time Tp = cfg.mpc.horizon;

    auto solve = [&](detail::LoopRuntime& lr, const TimedEvent& e) {
        const int n = e.chain;
        const Time now = e.at;
        const auto est_chain = obs.estimate(n, now);
        if (!est_chain) return;
        const Time alpha_hat = est_chain->alpha_hat;
        const MessageSet known = known_at(specs, now);
        const auto& spec = known[static_cast<std::size_t>(n - 1)];

        mpc::DelayPrediction pred;
        pred.t0 = alpha_hat;
        bool fallback = false;
        if (strategy == Strategy::TimingModel) {
            auto est = obs.estimated_bus(now);
            for (int c = 1; c <= static_cast<int>(specs.size()); ++c) {
                auto& st = est.chains[static_cast<std::size_t>(c - 1)];
                if (st.k < 0) continue;
                const Time next = obs.estimate(c, now)->alpha_hat + st.params.period;
                st.d = known[static_cast<std::size_t>(c - 1)].arrives_at(next) ? next - now : Time::never();
            }
            try {
                pred = mpc::predict_delays(est, known, n, alpha_hat, Tp);
            } catch (const SchedulabilityViolation&) {
                fallback = true;
            }
        }
        if (strategy == Strategy::WorstCase || fallback) {
            const Time delta = strategy == Strategy::WorstCase ? rep.worst_case_delays.at(n)
                               : lr.last_delta                  ? *lr.last_delta
                                                                : est_chain->params.work();
            Time alpha = alpha_hat;
            ChainParams p = est_chain->params;
            for (;;) {
                pred.sampling.push_back(alpha);
                pred.delays.push_back(delta);
                pred.extrapolated.push_back(fallback);
                const Time next = alpha + p.period;
                if (next >= alpha_hat + Tp || !spec.arrives_at(next)) break;
                alpha = next;
                p = spec.params_at(next);
            }
        }
        if (fallback) ++lr.result.prediction_fallbacks;
        if (!pred.extrapolated.front()) lr.last_delta = pred.delays.front();

        if (auto* r = row(n, e.k)) {
            r->alpha_hat = alpha_hat;
            r->predicted_delta = pred.delays.front();
            r->predicted_gamma = alpha_hat + pred.delays.front();
        }

        auto it = lr.sampled.find(e.k);
        if (it == lr.sampled.end()) return;
        auto sch = pred.to_schedule(kTickSeconds, lr.u);
        sch = detail::trim(std::move(sch), sch.t0 + lr.problem.horizon);
        const auto policy = mpc::solve_mpc(lr.cfg->plant, lr.problem, it->second, sch, cfg.mpc.solver);
        ++lr.result.solves;
        if (!policy.converged) ++lr.result.unconverged;
        lr.first_moves[e.k] = mpc::apply_first_move(policy);
        lr.sampled.erase(it);
    };

    // Replay: stops at every event instant and every signal sample instant.
    Time cur = Time::zero();
    Time last_sample = Time::zero();
    std::size_t ei = 0;
    Time next_grid = Time::zero();
    while (true) {
        const Time next_event = ei < rep.trace.size() ? rep.trace[ei].at : Time::never();
        const Time t = std::min(next_event, next_grid);
        if (t.is_never() || t > cfg.horizon) break;
        for (auto& lr : loops) lr.integrate(t - cur);
        cur = t;
        while (ei < rep.trace.size() && rep.trace[ei].at == t) {
            const auto& e = rep.trace[ei++];
            auto* lr = runtime_for(e.chain);
            switch (e.kind) {
            case EventKind::Arrival:
                if (lr) lr->sampled[e.k] = lr->x;
                break;
            case EventKind::SensorTxEnd:
                obs.observe(e);
                if (auto* r = row(e.chain, e.k)) r->beta = e.at;
                if (lr) solve(*lr, e);
                break;
            case EventKind::ControlTxEnd:
                obs.observe(e);
                if (auto* r = row(e.chain, e.k)) r->gamma = e.at;
                if (lr) {
                    auto it = lr->first_moves.find(e.k);
                    if (it != lr->first_moves.end()) {
                        lr->u = it->second;
                        lr->first_moves.erase(it);
                    }
                }
                break;
            case EventKind::DeadlineMiss:
                if (auto* r = row(e.chain, e.k)) r->missed = true;
                if (lr) {
                    lr->sampled.erase(e.k);
                    lr->first_moves.erase(e.k);
                }
                break;
            default:
                break;
            }
        }
        if (t == next_grid) {
            for (auto& lr : loops) lr.sample(t, last_sample);
            last_sample = t;
            next_grid = t + Time{kSignalStep};
            if (next_grid > cfg.horizon && t < cfg.horizon) next_grid = cfg.horizon;
        }
    }

    for (auto& lr : loops) rep.loops.push_back(std::move(lr.result));
    return rep;
}

inline RunReport run_closed_loop(const ScenarioConfig& cfg) {
    if (!cfg.strategy) throw ConfigError(cfg.name + ".strategy: missing");
    return run_closed_loop(cfg, *cfg.strategy);
}

struct Comparison {
    RunReport worst_case;
    RunReport timing_model;
    /// timing_model cost / worst_case cost per loop chain.
    std::map<int, double> cost_ratio;
};

inline Comparison compare_strategies(const ScenarioConfig& cfg) {
    Comparison c{run_closed_loop(cfg, Strategy::WorstCase), run_closed_loop(cfg, Strategy::TimingModel), {}};
    for (const auto& l : c.worst_case.loops) {
        const double wc = l.tracking_cost, tm = c.timing_model.loop(l.chain).tracking_cost;
        c.cost_ratio[l.chain] = wc > 0 ? tm / wc : (tm > 0 ? std::numeric_limits<double>::infinity() : 1.0);
    }
    return c;
}

struct BenchResult {
    Time horizon;
    int repetitions = 0;
    double hybrid_ms = 0.0;  // median wall clock
    double oracle_ms = 0.0;
    std::size_t events = 0;
    /// oracle / hybrid; absent when the hybrid time is too small to divide by.
    std::optional<double> speedup;
};

namespace detail {

template <class F>
double median_ms(int reps, F&& f) {
    std::vector<double> v;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        v.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace detail

/// Median wall-clock time of both engines on the same horizon.
inline BenchResult bench_engines(const MessageSet& specs, Time horizon, int repetitions) {
    if (repetitions < 1) throw PreconditionViolation("need at least one repetition");
    BenchResult b;
    b.horizon = horizon;
    b.repetitions = repetitions;
    std::size_t events = 0;
    b.hybrid_ms = detail::median_ms(repetitions, [&] { events = timing::simulate_hybrid(specs, horizon).trace.size(); });
    b.events = events;
    b.oracle_ms = detail::median_ms(repetitions, [&] { events = oracle::simulate_oracle(specs, horizon).size(); });
    if (b.hybrid_ms > 1e-3 && horizon > Time::zero()) b.speedup = b.oracle_ms / b.hybrid_ms;
    return b;
}

}  // namespace cantiming::harness
