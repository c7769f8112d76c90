#pragma once

#include <map>
#include <optional>
#include <string>

#include "chain.hpp"
#include "errors.hpp"
#include "events.hpp"
#include "timing/hybrid.hpp"

namespace cantiming::sched {

/// A chain is instantaneously schedulable when its least remaining work fits before its next arrival.
inline bool instantaneous_check(const timing::ChainState& st) { return st.r <= st.d; }

struct Violation {
    int chain = 0;
    Time at;
};

struct SchedVerdict {
    bool schedulable = true;
    std::optional<Violation> first_violation;
    /// Smallest d - r seen at a checked moment; Time::never() when nothing was checked.
    Time margin = Time::never();
};

/// Schedulability of every deadline that falls inside (from.now, until].
///
/// States are checked at the left limit of each significant moment. Since
/// d - r never increases between arrivals, r > d at a moment means the chain
/// misses the deadline at now + d; checks whose deadline lies beyond `until`
/// are outside the window and ignored.
inline SchedVerdict window_check(const MessageSet& specs, const timing::BusState& from, Time until) {
    if (until < from.now) throw PreconditionViolation("window end precedes start");
    SchedVerdict v;
    timing::HybridEngine engine(specs, from);
    engine.on_left_limit([&](const timing::BusState& bus) {
        for (std::size_t i = 0; i < bus.chains.size(); ++i) {
            const auto& st = bus.chains[i];
            if (st.d.is_never() || bus.now + st.d > until) continue;
            const Time slack = st.d - st.r;
            if (v.margin.is_never() || slack < v.margin) v.margin = slack;
            if (!instantaneous_check(st) && !v.first_violation) {
                v.schedulable = false;
                v.first_violation = Violation{static_cast<int>(i) + 1, bus.now};
            }
        }
    });
    engine.advance(until);
    return v;
}

inline SchedVerdict window_check(const MessageSet& specs, Time until) {
    return window_check(specs, timing::initial_state(specs), until);
}

/// Per-instance sampling-to-actuation delays (gamma - alpha) of one chain, keyed by instance.
inline std::map<std::int64_t, Time> instance_delays(const EventTrace& trace, int chain) {
    std::map<std::int64_t, Time> alpha, out;
    for (const auto& e : trace) {
        if (e.chain != chain) continue;
        if (e.kind == EventKind::Arrival) alpha[e.k] = e.at;
        if (e.kind == EventKind::ControlTxEnd) {
            auto it = alpha.find(e.k);
            if (it != alpha.end()) out[e.k] = e.at - it->second;
        }
    }
    return out;
}

/// Constant delay baseline: the largest observed delay of `chain` on the given
/// message set over `probe_horizon`. Throws SchedulabilityViolation if any
/// deadline is missed in the probe.
inline Time worst_case_delay(const MessageSet& specs, int chain, Time probe_horizon) {
    if (chain < 1 || chain > static_cast<int>(specs.size())) throw PreconditionViolation("unknown chain");
    const auto run = timing::simulate_hybrid(specs, probe_horizon);
    for (const auto& e : run.trace)
        if (e.kind == EventKind::DeadlineMiss)
            throw SchedulabilityViolation("deadline miss of chain " + std::to_string(e.chain) +
                                          " in the worst-case probe");
    const auto delays = instance_delays(run.trace, chain);
    if (delays.empty()) throw PreconditionViolation("no instance of the chain completes within the probe horizon");
    Time worst = Time::zero();
    for (const auto& [k, d] : delays) worst = std::max(worst, d);
    return worst;
}

}  // namespace cantiming::sched
