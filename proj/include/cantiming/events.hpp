#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string_view>
#include <tuple>
#include <vector>

#include "time.hpp"

namespace cantiming {

// Shared event vocabulary of the hybrid engine and the reference simulator.
// Nothing timing-related lives here beyond the ordering of a trace.

enum class EventKind : std::uint8_t {
    SensorTxEnd,   // beta: sensor message fully received
    ControlTxEnd,  // gamma: control message fully received (instance done)
    PrepEnd,       // a sub-message finished preparation and is ready for the bus
    DeadlineMiss,  // next instance arrived while the previous one had work left
    Arrival,       // alpha: sampling instant, new instance starts
    BusGrant,      // a waiting sub-message won arbitration
};

struct TimedEvent {
    Time at;
    EventKind kind = EventKind::Arrival;
    int chain = 0;
    std::int64_t k = 0;
    /// 1 or 2 for PrepEnd / BusGrant, 0 otherwise.
    int sub = 0;

    bool operator==(const TimedEvent&) const = default;
};

using EventTrace = std::vector<TimedEvent>;

/// Canonical order inside a trace: time, then kind rank (enum order), then chain, instance, sub.
inline bool canonical_less(const TimedEvent& a, const TimedEvent& b) {
    return std::tie(a.at, a.kind, a.chain, a.k, a.sub) < std::tie(b.at, b.kind, b.chain, b.k, b.sub);
}

inline void canonicalize(EventTrace& trace) { std::stable_sort(trace.begin(), trace.end(), canonical_less); }

inline std::string_view kind_name(const TimedEvent& e) {
    switch (e.kind) {
        case EventKind::SensorTxEnd: return "sensor_tx_end";
        case EventKind::ControlTxEnd: return "control_tx_end";
        case EventKind::PrepEnd: return e.sub == 2 ? "prep_end_2" : "prep_end_1";
        case EventKind::DeadlineMiss: return "deadline_miss";
        case EventKind::Arrival: return "arrival";
        case EventKind::BusGrant: return e.sub == 2 ? "grant_2" : "grant_1";
    }
    return "?";
}

/// Inverse of kind_name; fills kind and sub.
inline std::optional<std::pair<EventKind, int>> parse_kind(std::string_view s) {
    if (s == "sensor_tx_end") return std::pair{EventKind::SensorTxEnd, 0};
    if (s == "control_tx_end") return std::pair{EventKind::ControlTxEnd, 0};
    if (s == "prep_end_1") return std::pair{EventKind::PrepEnd, 1};
    if (s == "prep_end_2") return std::pair{EventKind::PrepEnd, 2};
    if (s == "deadline_miss") return std::pair{EventKind::DeadlineMiss, 0};
    if (s == "arrival") return std::pair{EventKind::Arrival, 0};
    if (s == "grant_1") return std::pair{EventKind::BusGrant, 1};
    if (s == "grant_2") return std::pair{EventKind::BusGrant, 2};
    return std::nullopt;
}

inline std::ostream& operator<<(std::ostream& os, const TimedEvent& e) {
    return os << e.at << ' ' << kind_name(e) << " chain=" << e.chain << " k=" << e.k;
}

/// Events of one kind for one chain, in trace order.
inline std::vector<TimedEvent> select(const EventTrace& trace, EventKind kind, int chain) {
    std::vector<TimedEvent> out;
    for (const auto& e : trace)
        if (e.kind == kind && e.chain == chain) out.push_back(e);
    return out;
}

}  // namespace cantiming
