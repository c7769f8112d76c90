#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "../chain.hpp"
#include "../errors.hpp"
#include "../events.hpp"
#include "../time.hpp"

/// Hybrid timing model of message chains sharing a CAN bus.
///
/// The state of every chain is the triple (deadline d, residue r, delay o).
/// Between significant moments the state flows linearly; at a significant
/// moment it jumps (new instance, bus grant, end of transmission). The bus
/// index is shared by all chains.
namespace cantiming::timing {

enum class Stage : std::uint8_t {
    PrepSensor = 1,
    WaitSensor = 2,
    TxSensor = 3,
    PrepControl = 4,
    WaitControl = 5,
    TxControl = 6,
    Done = 7,
};

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::PrepSensor: return "S1_PrepSensor";
        case Stage::WaitSensor: return "S2_WaitSensor";
        case Stage::TxSensor: return "S3_TxSensor";
        case Stage::PrepControl: return "S4_PrepControl";
        case Stage::WaitControl: return "S5_WaitControl";
        case Stage::TxControl: return "S6_TxControl";
        case Stage::Done: return "S7_Done";
    }
    return "?";
}

inline bool residue_decreases(Stage s) {
    return s == Stage::PrepSensor || s == Stage::TxSensor || s == Stage::PrepControl || s == Stage::TxControl;
}

/// Dynamic state of one chain. `k == -1` means the chain has not produced an instance yet.
struct ChainState {
    Time d;
    Time r;
    Time o;
    std::int64_t k = -1;
    /// Parameters of the active instance, fixed at its arrival.
    ChainParams params;

    bool operator==(const ChainState&) const = default;
};

struct BusState {
    std::vector<ChainState> chains;
    /// 1-based chain index holding the bus, 0 when idle.
    int bus_id = 0;
    /// Which sub-message of `bus_id` is on the wire. Needed when I2 = 0, where the
    /// end of the sensor frame and the start of the control frame share a residue value.
    SubMessage bus_sub = SubMessage::Sensor;
    Time now;

    bool operator==(const BusState&) const = default;
};

/// Stage implied by the residue. Boundary values follow the stage inequalities:
/// preparation stages are open below, waiting stages are single points.
inline Stage stage_of(const ChainState& st, const ChainParams& p, bool on_bus) {
    const Time r = st.r;
    const Time c2 = p.tx_control;
    const Time i2c2 = p.prep_control + c2;
    const Time c1i2c2 = p.tx_sensor + i2c2;
    if (on_bus) {
        if (i2c2 < r && r <= c1i2c2) return Stage::TxSensor;
        if (Time::zero() < r && r <= c2) return Stage::TxControl;
        std::ostringstream msg;
        msg << "chain on bus with residue " << r << " outside transmission ranges";
        throw ModelCorruption(msg.str());
    }
    if (r == Time::zero()) return Stage::Done;
    if (r == c2) return Stage::WaitControl;
    if (c2 < r && r <= i2c2) return Stage::PrepControl;
    if (r == c1i2c2) return Stage::WaitSensor;
    if (c1i2c2 < r && r <= p.work()) return Stage::PrepSensor;
    std::ostringstream msg;
    msg << "chain off bus with residue " << r << " in no stage";
    throw ModelCorruption(msg.str());
}

/// Stage of chain `idx` (0-based) inside a bus state, using the bus tag for the owner.
inline Stage stage_in(const BusState& bus, std::size_t idx) {
    const auto& st = bus.chains[idx];
    if (bus.bus_id == static_cast<int>(idx) + 1) {
        const Time i2c2 = st.params.prep_control + st.params.tx_control;
        if (bus.bus_sub == SubMessage::Sensor) {
            if (st.r < i2c2 || st.r > i2c2 + st.params.tx_sensor)
                throw ModelCorruption("sensor frame owner has residue outside transmission range");
            return Stage::TxSensor;
        }
        if (st.r < Time::zero() || st.r > st.params.tx_control)
            throw ModelCorruption("control frame owner has residue outside transmission range");
        return Stage::TxControl;
    }
    return stage_of(st, st.params, false);
}

/// Throws ModelCorruption when a bus state breaks a structural invariant.
inline void check_invariants(const BusState& bus) {
    if (bus.bus_id < 0 || bus.bus_id > static_cast<int>(bus.chains.size()))
        throw ModelCorruption("bus index out of range");
    for (std::size_t i = 0; i < bus.chains.size(); ++i) {
        const auto& st = bus.chains[i];
        if (st.d < Time::zero() || st.r < Time::zero() || st.o < Time::zero())
            throw ModelCorruption("negative chain state of chain " + std::to_string(i + 1));
        if (st.r > st.params.work())
            throw ModelCorruption("residue above instance work for chain " + std::to_string(i + 1));
        const Stage s = stage_in(bus, i);
        if (bus.bus_id != static_cast<int>(i) + 1 && (s == Stage::TxSensor || s == Stage::TxControl))
            throw ModelCorruption("chain transmitting without holding the bus");
    }
}

/// Fresh state at `t0`: no instance yet, deadlines count down to first arrivals.
inline BusState initial_state(const MessageSet& specs, Time t0 = Time::zero()) {
    BusState bus;
    bus.now = t0;
    for (const auto& spec : specs) {
        ChainState st;
        st.params = spec.params_at(spec.first_arrival);
        if (spec.first_arrival < t0) throw PreconditionViolation("initial state after the first arrival of a chain");
        st.d = spec.arrives_at(spec.first_arrival) ? spec.first_arrival - t0 : Time::never();
        bus.chains.push_back(st);
    }
    return bus;
}

struct SignificantMoment {
    /// Distance from `now` to the next moment; Time::never() if nothing will ever happen.
    Time S;
    /// Bus-occupancy, preparation and arrival bounds; each never() when not applicable.
    Time remaining_transmission;
    Time remaining_preparation;
    Time next_arrival;
    /// Completions, preparation ends and arrivals due exactly at now + S.
    std::vector<TimedEvent> causes;
    /// The bus is idle while a sub-message waits; S is zero and only arbitration is due.
    bool arbitration_due = false;
};

inline SignificantMoment next_significant_moment(const BusState& bus) {
    SignificantMoment m;
    m.remaining_transmission = Time::never();
    m.remaining_preparation = Time::never();
    m.next_arrival = Time::never();

    bool waiting = false;
    std::vector<Stage> stages(bus.chains.size());
    for (std::size_t i = 0; i < bus.chains.size(); ++i) {
        const auto& st = bus.chains[i];
        const auto& p = st.params;
        const Stage s = stages[i] = stage_in(bus, i);
        switch (s) {
            case Stage::TxSensor:
                m.remaining_transmission = st.r - (p.prep_control + p.tx_control);
                break;
            case Stage::TxControl:
                m.remaining_transmission = st.r;
                break;
            case Stage::PrepSensor:
                m.remaining_preparation =
                    std::min(m.remaining_preparation, st.r - (p.tx_sensor + p.prep_control + p.tx_control));
                break;
            case Stage::PrepControl:
                m.remaining_preparation = std::min(m.remaining_preparation, st.r - p.tx_control);
                break;
            case Stage::WaitSensor:
            case Stage::WaitControl:
                waiting = true;
                break;
            case Stage::Done:
                break;
        }
        m.next_arrival = std::min(m.next_arrival, st.d);
    }

    m.S = std::min({m.remaining_transmission, m.remaining_preparation, m.next_arrival});
    if (bus.bus_id == 0 && waiting) {
        m.arbitration_due = true;
        m.S = Time::zero();
    }
    if (m.S.is_never()) return m;

    const Time at = bus.now + m.S;
    for (std::size_t i = 0; i < bus.chains.size(); ++i) {
        const auto& st = bus.chains[i];
        const auto& p = st.params;
        const int id = static_cast<int>(i) + 1;
        switch (stages[i]) {
            case Stage::TxSensor:
                if (m.remaining_transmission == m.S) m.causes.push_back({at, EventKind::SensorTxEnd, id, st.k, 0});
                break;
            case Stage::TxControl:
                if (m.remaining_transmission == m.S) m.causes.push_back({at, EventKind::ControlTxEnd, id, st.k, 0});
                break;
            case Stage::PrepSensor:
                if (st.r - (p.tx_sensor + p.prep_control + p.tx_control) == m.S)
                    m.causes.push_back({at, EventKind::PrepEnd, id, st.k, 1});
                break;
            case Stage::PrepControl:
                if (st.r - p.tx_control == m.S) m.causes.push_back({at, EventKind::PrepEnd, id, st.k, 2});
                break;
            default:
                break;
        }
        if (st.d == m.S) m.causes.push_back({at, EventKind::Arrival, id, st.k + 1, 0});
    }
    canonicalize(m.causes);
    return m;
}

namespace detail {

inline void flow_unchecked(BusState& bus, Time s) {
    for (std::size_t i = 0; i < bus.chains.size(); ++i) {
        auto& st = bus.chains[i];
        const Stage stage = stage_in(bus, i);
        st.d -= s;
        const bool unfinished = st.r > Time::zero();
        if (residue_decreases(stage)) st.r -= s;
        if (unfinished) st.o += s;
    }
    bus.now += s;
}

}  // namespace detail

/// Continuous evolution over `s` ticks. `s` must not cross the next significant moment.
inline BusState flow(BusState bus, Time s) {
    if (s < Time::zero() || s.is_never()) throw PreconditionViolation("flow duration must be finite and non-negative");
    const auto m = next_significant_moment(bus);
    if (s > m.S) {
        std::ostringstream msg;
        msg << "flow of " << s << " ticks crosses the significant moment at +" << m.S;
        throw PreconditionViolation(msg.str());
    }
    detail::flow_unchecked(bus, s);
    return bus;
}

/// Chain index (1-based) that wins an idle bus, 0 when nothing waits.
inline int arbitrate(const BusState& bus) {
    if (bus.bus_id != 0) throw PreconditionViolation("arbitration requires an idle bus");
    int winner = 0;
    Priority best{};
    for (std::size_t i = 0; i < bus.chains.size(); ++i) {
        const auto& st = bus.chains[i];
        const Stage s = stage_of(st, st.params, false);
        Priority p;
        if (s == Stage::WaitSensor)
            p = st.params.prio_sensor;
        else if (s == Stage::WaitControl)
            p = st.params.prio_control;
        else
            continue;
        if (winner != 0 && p == best) throw ConfigError("duplicate priority among arbitration contenders");
        if (winner == 0 || p < best) {
            winner = static_cast<int>(i) + 1;
            best = p;
        }
    }
    return winner;
}

namespace detail {

inline void push(std::vector<TimedEvent>& out, Time at, EventKind kind, int chain, std::int64_t k, int sub = 0) {
    out.push_back({at, kind, chain, k, sub});
}

/// Jumps at `bus.now`. Order: transmission completions, preparation completions,
/// arrivals (deadline-miss check first), then arbitration.
inline void apply_jumps_in_place(BusState& bus, std::span<const TimedEvent> causes, const MessageSet& specs,
                                 std::vector<TimedEvent>& out) {
    const Time now = bus.now;
    for (const auto& c : causes)
        if (c.at != now) throw PreconditionViolation("jump cause does not occur at the current time");
    if (specs.size() != bus.chains.size()) throw PreconditionViolation("message set does not match bus state");

    std::size_t transitions = 0;
    const std::size_t bound = 4 * std::max<std::size_t>(bus.chains.size(), 1);
    auto step = [&] {
        if (++transitions > bound) throw ModelCorruption("zero-duration cascade did not settle");
    };

    // A sub-message with an empty control part finishes at the end of its last non-empty step.
    auto finish_control_prep = [&](std::size_t i) {
        auto& st = bus.chains[i];
        const int id = static_cast<int>(i) + 1;
        step();
        push(out, now, EventKind::PrepEnd, id, st.k, 2);
        if (st.params.tx_control == Time::zero()) push(out, now, EventKind::ControlTxEnd, id, st.k);
    };

    // 1. End of the current transmission.
    if (bus.bus_id != 0) {
        const std::size_t i = static_cast<std::size_t>(bus.bus_id - 1);
        auto& st = bus.chains[i];
        const auto& p = st.params;
        const int id = bus.bus_id;
        if (bus.bus_sub == SubMessage::Sensor && st.r == p.prep_control + p.tx_control) {
            step();
            push(out, now, EventKind::SensorTxEnd, id, st.k);
            bus.bus_id = 0;
            if (p.prep_control == Time::zero()) finish_control_prep(i);
        } else if (bus.bus_sub == SubMessage::Control && st.r == Time::zero()) {
            step();
            push(out, now, EventKind::ControlTxEnd, id, st.k);
            bus.bus_id = 0;
        }
    }

    // 2. Preparation completions. Off-bus stages are implied by r, so only events are emitted.
    for (const auto& c : causes) {
        if (c.kind != EventKind::PrepEnd) continue;
        const std::size_t i = static_cast<std::size_t>(c.chain - 1);
        auto& st = bus.chains[i];
        const auto& p = st.params;
        if (c.sub == 1) {
            if (st.r != p.tx_sensor + p.prep_control + p.tx_control)
                throw ModelCorruption("sensor preparation end with inconsistent residue");
            step();
            push(out, now, EventKind::PrepEnd, c.chain, st.k, 1);
        } else {
            if (st.r != p.tx_control) throw ModelCorruption("control preparation end with inconsistent residue");
            finish_control_prep(i);
        }
    }

    // 3. Arrivals.
    for (std::size_t i = 0; i < bus.chains.size(); ++i) {
        auto& st = bus.chains[i];
        if (st.d != Time::zero()) continue;
        const int id = static_cast<int>(i) + 1;
        const auto& spec = specs[i];
        if (st.k >= 0 && st.r > Time::zero()) {
            push(out, now, EventKind::DeadlineMiss, id, st.k);
            if (bus.bus_id == id) bus.bus_id = 0;
        }
        if (!spec.arrives_at(now)) throw ModelCorruption("deadline expired for a chain that cannot arrive");
        step();
        st.params = spec.params_at(now);
        st.k += 1;
        st.r = st.params.work();
        st.o = Time::zero();
        st.d = spec.arrives_at(now + st.params.period) ? st.params.period : Time::never();
        push(out, now, EventKind::Arrival, id, st.k);
        if (st.params.prep_sensor == Time::zero()) push(out, now, EventKind::PrepEnd, id, st.k, 1);
    }

    // 4. Arbitration. Every transmission has positive length, so one grant settles the bus.
    if (bus.bus_id == 0) {
        const int winner = arbitrate(bus);
        if (winner != 0) {
            step();
            auto& st = bus.chains[static_cast<std::size_t>(winner - 1)];
            const Stage s = stage_of(st, st.params, false);
            bus.bus_id = winner;
            bus.bus_sub = s == Stage::WaitSensor ? SubMessage::Sensor : SubMessage::Control;
            push(out, now, EventKind::BusGrant, winner, st.k, static_cast<int>(bus.bus_sub));
        }
    }
}

}  // namespace detail

struct JumpResult {
    BusState bus;
    std::vector<TimedEvent> emitted;
};

inline JumpResult apply_jumps(BusState bus, std::span<const TimedEvent> causes, const MessageSet& specs) {
    JumpResult res;
    detail::apply_jumps_in_place(bus, causes, specs, res.emitted);
    canonicalize(res.emitted);
    res.bus = std::move(bus);
    return res;
}

/// Stepping interface over the hybrid model.
///
/// `advance(t)` stops at the left limit of `t`: jumps due exactly at `t` stay
/// pending until `settle()` or the next `advance`.
class HybridEngine {
public:
    using LeftLimitHook = std::function<void(const BusState&)>;

    HybridEngine(MessageSet specs, BusState start) : specs_(std::move(specs)), bus_(std::move(start)) {
        if (bus_.chains.size() != specs_.size()) throw PreconditionViolation("message set does not match bus state");
        check_invariants(bus_);
        auto m = next_significant_moment(bus_);
        if (m.S == Time::zero()) {
            pending_ = true;
            causes_ = std::move(m.causes);
        }
    }

    const BusState& state() const { return bus_; }
    const EventTrace& trace() const { return trace_; }
    EventTrace take_trace() { return std::move(trace_); }
    const MessageSet& specs() const { return specs_; }
    bool has_pending() const { return pending_; }
    std::size_t moments() const { return moments_; }

    /// Called with the state just before the jumps of every significant moment.
    void on_left_limit(LeftLimitHook hook) { hook_ = std::move(hook); }

    void settle() {
        if (!pending_) return;
        pending_ = false;
        const std::size_t first = trace_.size();
        detail::apply_jumps_in_place(bus_, causes_, specs_, trace_);
        std::stable_sort(trace_.begin() + static_cast<std::ptrdiff_t>(first), trace_.end(), canonical_less);
        causes_.clear();
    }

    void advance(Time until) {
        if (until < bus_.now) throw PreconditionViolation("cannot advance backwards in time");
        for (;;) {
            if (pending_) {
                if (bus_.now == until) return;
                settle();
            }
            auto m = next_significant_moment(bus_);
            if (m.S == Time::zero()) {
                pending_ = true;
                causes_ = std::move(m.causes);
                continue;
            }
            if (!m.S.is_never() && bus_.now + m.S <= until) {
                detail::flow_unchecked(bus_, m.S);
                ++moments_;
                if (hook_) hook_(bus_);
                pending_ = true;
                causes_ = std::move(m.causes);
                continue;
            }
            detail::flow_unchecked(bus_, until - bus_.now);
            return;
        }
    }

private:
    MessageSet specs_;
    BusState bus_;
    bool pending_ = false;
    std::vector<TimedEvent> causes_;
    EventTrace trace_;
    LeftLimitHook hook_;
    std::size_t moments_ = 0;
};

struct HybridRun {
    BusState final_state;
    EventTrace trace;
};

/// Runs the model from `from` to `until` inclusive (events at `until` are part of the trace).
inline HybridRun simulate_hybrid(const MessageSet& specs, const BusState& from, Time until) {
    if (until < from.now) throw PreconditionViolation("simulation end precedes start");
    HybridEngine engine(specs, from);
    engine.advance(until);
    engine.settle();
    HybridRun run;
    run.final_state = engine.state();
    run.trace = engine.take_trace();
    return run;
}

inline HybridRun simulate_hybrid(const MessageSet& specs, Time until) {
    return simulate_hybrid(specs, initial_state(specs), until);
}

}  // namespace cantiming::timing
