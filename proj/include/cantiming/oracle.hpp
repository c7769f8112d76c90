#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <tuple>
#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

#include "chain.hpp"
#include "events.hpp"
#include "time.hpp"

/// Tick-by-tick reference simulator for message chains on a CAN bus.
///
/// Deliberately naive: time advances one quantum at a time and every chain's
/// phase is tracked with a plain work counter. It shares only the event
/// vocabulary and the chain specs with the hybrid model.
namespace cantiming::oracle {

enum class Phase : std::uint8_t { Idle, Prep1, Wait1, Tx1, Prep2, Wait2, Tx2, Done };

struct OracleChain {
    Phase phase = Phase::Idle;
    std::int64_t work_done = 0;  // ticks spent in the current phase
    std::int64_t k = -1;
    std::int64_t next_arrival = -1;  // -1: no further arrival
    ChainParams p;
};

struct OracleState {
    std::vector<OracleChain> chains;
    int owner = 0;  // 1-based, 0 when the bus is free
};

namespace detail {

inline std::int64_t phase_length(const OracleChain& c) {
    switch (c.phase) {
        case Phase::Prep1: return c.p.prep_sensor.ticks;
        case Phase::Tx1: return c.p.tx_sensor.ticks;
        case Phase::Prep2: return c.p.prep_control.ticks;
        case Phase::Tx2: return c.p.tx_control.ticks;
        default: return 0;
    }
}

class Runner {
public:
    Runner(const MessageSet& specs, EventTrace& out) : specs_(specs), out_(out) {
        for (const auto& s : specs) {
            OracleChain c;
            c.next_arrival = s.arrives_at(s.first_arrival) ? s.first_arrival.ticks : -1;
            state_.chains.push_back(c);
        }
    }

    void run(std::int64_t until) {
        for (std::int64_t t = 0; t <= until; ++t) {
            now_ = t;
            const std::size_t first = out_.size();
            boundary();
            std::stable_sort(out_.begin() + static_cast<std::ptrdiff_t>(first), out_.end(), canonical_less);
            if (t == until) break;
            tick();
        }
    }

private:
    void emit(EventKind kind, std::size_t i, int sub = 0) {
        out_.push_back({Time{now_}, kind, static_cast<int>(i) + 1, state_.chains[i].k, sub});
    }

    // Enter the phase after `c.phase`, skipping over empty preparation phases.
    void finish_phase(std::size_t i) {
        auto& c = state_.chains[i];
        c.work_done = 0;
        switch (c.phase) {
            case Phase::Prep1:
                emit(EventKind::PrepEnd, i, 1);
                c.phase = Phase::Wait1;
                break;
            case Phase::Tx1:
                emit(EventKind::SensorTxEnd, i);
                state_.owner = 0;
                c.phase = Phase::Prep2;
                if (c.p.prep_control.ticks == 0) finish_phase(i);
                break;
            case Phase::Prep2:
                emit(EventKind::PrepEnd, i, 2);
                c.phase = Phase::Wait2;
                if (c.p.tx_control.ticks == 0) {
                    // Nothing to send: the instance is complete without touching the bus.
                    emit(EventKind::ControlTxEnd, i);
                    c.phase = Phase::Done;
                }
                break;
            case Phase::Tx2:
                emit(EventKind::ControlTxEnd, i);
                state_.owner = 0;
                c.phase = Phase::Done;
                break;
            default:
                break;
        }
    }

    void boundary() {
        // Transmission that used up its frame length.
        if (state_.owner != 0) {
            const auto i = static_cast<std::size_t>(state_.owner - 1);
            auto& c = state_.chains[i];
            if (c.work_done == phase_length(c)) finish_phase(i);
        }
        // Preparations that are complete.
        for (std::size_t i = 0; i < state_.chains.size(); ++i) {
            auto& c = state_.chains[i];
            if ((c.phase == Phase::Prep1 || c.phase == Phase::Prep2) && c.work_done == phase_length(c))
                finish_phase(i);
        }
        // Sampling instants.
        for (std::size_t i = 0; i < state_.chains.size(); ++i) {
            auto& c = state_.chains[i];
            if (c.next_arrival != now_) continue;
            if (c.k >= 0 && c.phase != Phase::Done) {
                emit(EventKind::DeadlineMiss, i);
                if (state_.owner == static_cast<int>(i) + 1) state_.owner = 0;
            }
            const auto& spec = specs_[i];
            c.p = spec.params_at(Time{now_});
            c.k += 1;
            c.phase = Phase::Prep1;
            c.work_done = 0;
            const std::int64_t next = now_ + c.p.period.ticks;
            c.next_arrival = spec.arrives_at(Time{next}) ? next : -1;
            emit(EventKind::Arrival, i);
            if (c.p.prep_sensor.ticks == 0) finish_phase(i);
        }
        // Contention on a free bus: lowest identifier wins, the frame is not preempted.
        if (state_.owner == 0) {
            int best = 0;
            std::uint32_t best_id = 0;
            for (std::size_t i = 0; i < state_.chains.size(); ++i) {
                const auto& c = state_.chains[i];
                std::uint32_t id;
                if (c.phase == Phase::Wait1)
                    id = c.p.prio_sensor.value;
                else if (c.phase == Phase::Wait2)
                    id = c.p.prio_control.value;
                else
                    continue;
                if (best == 0 || id < best_id) {
                    best = static_cast<int>(i) + 1;
                    best_id = id;
                }
            }
            if (best != 0) {
                auto& c = state_.chains[static_cast<std::size_t>(best - 1)];
                const int sub = c.phase == Phase::Wait1 ? 1 : 2;
                c.phase = sub == 1 ? Phase::Tx1 : Phase::Tx2;
                c.work_done = 0;
                state_.owner = best;
                emit(EventKind::BusGrant, static_cast<std::size_t>(best - 1), sub);
            }
        }
    }

    void tick() {
        for (std::size_t i = 0; i < state_.chains.size(); ++i) {
            auto& c = state_.chains[i];
            const bool transmitting = state_.owner == static_cast<int>(i) + 1;
            if (c.phase == Phase::Prep1 || c.phase == Phase::Prep2 || transmitting) ++c.work_done;
        }
    }

    const MessageSet& specs_;
    EventTrace& out_;
    OracleState state_;
    std::int64_t now_ = 0;
};

}  // namespace detail

/// Reference trace from time 0 to `until` inclusive.
inline EventTrace simulate_oracle(const MessageSet& specs, Time until) {
    EventTrace trace;
    if (until < Time::zero()) return trace;
    detail::Runner runner(specs, trace);
    runner.run(until.ticks);
    return trace;
}

enum class DiscrepancyType : std::uint8_t { Missing, Extra, Shifted };

struct Discrepancy {
    DiscrepancyType type;
    /// The event as it appears in trace `a` (Missing, Shifted) or `b` (Extra).
    TimedEvent event;
    /// b.at - a.at for Shifted.
    std::int64_t shift = 0;

    std::string describe() const {
        std::ostringstream os;
        switch (type) {
            case DiscrepancyType::Missing: os << "missing in b: "; break;
            case DiscrepancyType::Extra: os << "extra in b: "; break;
            case DiscrepancyType::Shifted: os << "shifted by " << shift << ": "; break;
        }
        os << kind_name(event) << " chain=" << event.chain << " k=" << event.k << " at=" << event.at;
        return os.str();
    }
};

/// Ordered list of differences between two traces; empty iff they are identical.
///
/// Events are matched by identity (kind, sub, chain, instance); a matched pair at
/// different times is one Shifted entry. Matched pairs at equal times but in a
/// different position are reported as a Missing/Extra pair.
inline std::vector<Discrepancy> diff_traces(const EventTrace& a, const EventTrace& b) {
    std::vector<Discrepancy> out;
    using Key = std::tuple<EventKind, int, int, std::int64_t>;
    auto key = [](const TimedEvent& e) { return Key{e.kind, e.sub, e.chain, e.k}; };
    std::vector<bool> used_b(b.size(), false);
    // Index of b by identity; repeated identities are matched first-come.
    std::map<Key, std::vector<std::size_t>> index;
    for (std::size_t j = 0; j < b.size(); ++j) index[key(b[j])].push_back(j);
    std::map<Key, std::size_t> cursor;
    for (const auto& e : a) {
        auto it = index.find(key(e));
        auto& cur = cursor[key(e)];
        if (it == index.end() || cur >= it->second.size()) {
            out.push_back({DiscrepancyType::Missing, e, 0});
            continue;
        }
        const std::size_t j = it->second[cur++];
        used_b[j] = true;
        if (b[j].at != e.at) out.push_back({DiscrepancyType::Shifted, e, b[j].at.ticks - e.at.ticks});
    }
    for (std::size_t j = 0; j < b.size(); ++j)
        if (!used_b[j]) out.push_back({DiscrepancyType::Extra, b[j], 0});
    if (out.empty() && a != b) {
        // Same events at the same times but in another order.
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!(a[i] == b[i])) {
                out.push_back({DiscrepancyType::Missing, a[i], 0});
                out.push_back({DiscrepancyType::Extra, b[i], 0});
                break;
            }
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const Discrepancy& x, const Discrepancy& y) { return canonical_less(x.event, y.event); });
    return out;
}

}  // namespace cantiming::oracle
