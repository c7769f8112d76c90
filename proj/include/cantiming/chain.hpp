#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "time.hpp"

namespace cantiming {

/// Per-instance parameters of a message chain: sampling period, the two
/// preparation times, the two transmission durations and the two identifiers.
///
/// A general-purpose (single) message is a chain with `prep_control` and
/// `tx_control` both zero; its `prio_control` is then unused.
struct ChainParams {
    Time period;
    Time prep_sensor;
    Time tx_sensor;
    Time prep_control;
    Time tx_control;
    Priority prio_sensor;
    Priority prio_control;

    /// Residue of a fresh instance: I1 + C1 + I2 + C2.
    constexpr Time work() const { return prep_sensor + tx_sensor + prep_control + tx_control; }
    constexpr bool has_control_message() const { return tx_control > Time::zero(); }

    bool operator==(const ChainParams&) const = default;
};

struct Segment {
    Time start;
    ChainParams params;
};

/// Static, piecewise-constant description of one chain.
///
/// Parameters of an instance are those of the last segment starting at or
/// before its arrival. Arrivals happen at `first_arrival` and then every
/// period; none happen at or after `active_until` when it is set.
struct MessageChainSpec {
    int id = 0;
    std::vector<Segment> segments;
    Time first_arrival = Time::zero();
    std::optional<Time> active_until;

    const ChainParams& params_at(Time t) const {
        auto it = std::upper_bound(segments.begin(), segments.end(), t,
                                   [](Time v, const Segment& s) { return v < s.start; });
        if (it == segments.begin()) return segments.front().params;
        return std::prev(it)->params;
    }

    /// True when an arrival at `t` is allowed by the activation window.
    bool arrives_at(Time t) const {
        if (t < first_arrival) return false;
        return !active_until || t < *active_until;
    }
};

using MessageSet = std::vector<MessageChainSpec>;

inline MessageChainSpec make_chain(int id, const ChainParams& p, Time first_arrival = Time::zero()) {
    MessageChainSpec spec;
    spec.id = id;
    spec.segments.push_back({Time::zero(), p});
    spec.first_arrival = first_arrival;
    return spec;
}

/// Checks every structural invariant of a message set; throws ConfigError naming the offender.
inline void validate(const MessageSet& set) {
    std::set<std::uint32_t> used;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto& c = set[i];
        std::ostringstream where;
        where << "chain " << c.id << ": ";
        if (c.id != static_cast<int>(i) + 1)
            throw ConfigError(where.str() + "chain ids must be 1..N in order");
        if (c.segments.empty()) throw ConfigError(where.str() + "no parameter segments");
        if (c.first_arrival < Time::zero()) throw ConfigError(where.str() + "negative first arrival");
        for (std::size_t s = 0; s < c.segments.size(); ++s) {
            const auto& seg = c.segments[s];
            const auto& p = seg.params;
            if (s > 0 && !(c.segments[s - 1].start < seg.start))
                throw ConfigError(where.str() + "segments not strictly ordered by start time");
            if (p.period <= Time::zero()) throw ConfigError(where.str() + "period T must be positive");
            if (p.tx_sensor <= Time::zero()) throw ConfigError(where.str() + "sensor transmission C1 must be positive");
            if (p.prep_sensor < Time::zero() || p.prep_control < Time::zero() || p.tx_control < Time::zero())
                throw ConfigError(where.str() + "negative preparation or transmission time");
            if (p.period.is_never() || p.work().is_never())
                throw ConfigError(where.str() + "unbounded parameter");
        }
        // Identifiers must be unique across every sub-message that can reach the bus.
        std::set<std::uint32_t> mine;
        for (const auto& seg : c.segments) {
            mine.insert(seg.params.prio_sensor.value);
            if (seg.params.has_control_message()) mine.insert(seg.params.prio_control.value);
        }
        for (const auto& seg : c.segments)
            if (seg.params.has_control_message() && seg.params.prio_sensor == seg.params.prio_control)
                throw ConfigError(where.str() + "duplicate priority " + std::to_string(seg.params.prio_sensor.value));
        for (auto v : mine) {
            if (!used.insert(v).second)
                throw ConfigError(where.str() + "duplicate priority " + std::to_string(v));
        }
    }
}

}  // namespace cantiming
