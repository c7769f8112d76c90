#pragma once

#include <compare>
#include <cstdint>
#include <limits>
#include <ostream>

namespace cantiming {

/// Integer time in ticks of a fixed quantum (1 us unless the scenario says otherwise).
///
/// All timing arithmetic in the bus model is exact. `Time::never()` is a
/// saturating sentinel used for deadlines of chains that will not arrive again.
struct Time {
    std::int64_t ticks = 0;

    constexpr Time() = default;
    constexpr explicit Time(std::int64_t t) : ticks(t) {}

    static constexpr Time zero() { return Time{0}; }
    static constexpr Time never() { return Time{std::numeric_limits<std::int64_t>::max()}; }

    constexpr bool is_never() const { return ticks == never().ticks; }

    constexpr auto operator<=>(const Time&) const = default;

    constexpr Time operator+(Time o) const {
        if (is_never() || o.is_never()) return never();
        return Time{ticks + o.ticks};
    }
    constexpr Time operator-(Time o) const {
        if (is_never()) return never();
        return Time{ticks - o.ticks};
    }
    constexpr Time& operator+=(Time o) { return *this = *this + o; }
    constexpr Time& operator-=(Time o) { return *this = *this - o; }
};

constexpr Time operator""_tk(unsigned long long t) { return Time{static_cast<std::int64_t>(t)}; }

inline std::ostream& operator<<(std::ostream& os, Time t) {
    if (t.is_never()) return os << "never";
    return os << t.ticks;
}

/// CAN identifier. Smaller value wins arbitration.
struct Priority {
    std::uint32_t value = 0;
    constexpr auto operator<=>(const Priority&) const = default;
};

/// Which sub-message of a chain: the sensor message or the control message.
enum class SubMessage : std::uint8_t { Sensor = 1, Control = 2 };

}  // namespace cantiming
