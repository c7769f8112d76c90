#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "chain.hpp"
#include "errors.hpp"
#include "events.hpp"
#include "timing/hybrid.hpp"

/// Estimation of chain states at a controller node from bus receptions.
///
/// A node sees the end of every sensor frame (beta) and control frame (gamma)
/// on the bus but never the sampling instants (alpha). The sampling instant is
/// estimated from above; the error epsilon = alpha_hat - alpha is non-negative
/// and never grows from one instance to the next.
namespace cantiming::observer {

struct ObservedReception {
    int chain = 0;
    std::int64_t k = 0;
    std::optional<Time> beta;
    std::optional<Time> gamma;
};

struct AlphaEstimate {
    int chain = 0;
    std::int64_t k = 0;
    Time alpha_hat;
    /// Filled only by callers that know the true sampling instant.
    std::optional<Time> epsilon_known_bound;
};

/// Parameters needed for one estimate: the previous instance's period and this instance's I1, C1.
struct AlphaParams {
    Time prev_period;
    Time prep_sensor;
    Time tx_sensor;
};

/// alpha_hat[k] = min(alpha_hat[k-1] + T[k-1], beta[k] - C1[k] - I1[k]); the first estimate is the second term alone.
inline AlphaEstimate update_alpha(const std::optional<AlphaEstimate>& prev, int chain, Time beta_k,
                                  const AlphaParams& p) {
    const Time lead = p.tx_sensor + p.prep_sensor;
    if (beta_k < lead) throw MalformedObservation("sensor reception earlier than its own preparation and transmission");
    AlphaEstimate out;
    out.chain = chain;
    const Time from_beta = beta_k - lead;
    if (!prev) {
        out.k = 0;
        out.alpha_hat = from_beta;
        return out;
    }
    out.k = prev->k + 1;
    out.alpha_hat = std::min(prev->alpha_hat + p.prev_period, from_beta);
    out.epsilon_known_bound = prev->epsilon_known_bound;
    return out;
}

struct StateEstimate {
    Time d;
    Time r;
    Time o;
};

/// Estimated (d, r, o) of the instance sampled at `alpha_hat`, given what has been received of it.
inline StateEstimate estimate_states(Time now, Time alpha_hat, const ObservedReception& rx, const ChainParams& p,
                                     std::optional<Time> next_arrival_override = std::nullopt) {
    if (now < alpha_hat) throw PreconditionViolation("estimate requested before the estimated sampling instant");
    if (rx.gamma && !rx.beta) throw MalformedObservation("control reception without sensor reception");
    StateEstimate e;
    const Time next = next_arrival_override ? *next_arrival_override : alpha_hat + p.period;
    if (!next.is_never() && next < now) throw PreconditionViolation("stale estimate: instance already superseded");
    e.d = next.is_never() ? Time::never() : next - now;
    if (rx.gamma) {
        e.o = *rx.gamma - alpha_hat;
        e.r = Time::zero();
    } else if (rx.beta) {
        e.o = now - alpha_hat;
        e.r = p.prep_control + p.tx_control - std::min(now - *rx.beta, p.prep_control);
    } else {
        e.o = now - alpha_hat;
        e.r = p.work() - std::min(now - alpha_hat, p.prep_sensor);
    }
    return e;
}

inline bool estimated_schedulable(Time d_hat, Time r_hat) { return r_hat <= d_hat; }

/// Full estimate of one chain at a given time.
struct ChainEstimate {
    std::int64_t k = 0;
    Time alpha_hat;
    ChainParams params;
    ObservedReception rx;
    StateEstimate state;
};

/// Per-node observer over the broadcast reception stream.
///
/// Instances are matched by counting sensor receptions per chain. A reception
/// that cannot belong to the expected instance (its implied sampling instant is
/// past that instance's next arrival) advances the count.
class Observer {
public:
    explicit Observer(MessageSet schedule) : schedule_(std::move(schedule)), chains_(schedule_.size()) {}

    void observe(const TimedEvent& e) {
        if (e.kind == EventKind::SensorTxEnd)
            on_sensor(e.chain, e.at);
        else if (e.kind == EventKind::ControlTxEnd)
            on_control(e.chain, e.at);
    }

    void on_sensor(int chain, Time beta) {
        auto& c = at(chain);
        const auto& spec = schedule_[static_cast<std::size_t>(chain - 1)];
        if (c.history.empty()) {
            const auto& p = spec.params_at(beta);
            auto est = update_alpha(std::nullopt, chain, beta, {Time::zero(), p.prep_sensor, p.tx_sensor});
            push(c, est, beta, spec);
            return;
        }
        AlphaEstimate prev = c.history.back();
        Time prev_period = c.params.back().period;
        // Skip instances whose sensor frame was never seen.
        for (;;) {
            const Time predicted = prev.alpha_hat + prev_period;
            const auto& p = spec.params_at(predicted);
            if (beta - (p.prep_sensor + p.tx_sensor) < predicted + p.period) break;
            prev.k += 1;
            prev.alpha_hat = predicted;
            prev_period = p.period;
        }
        const auto& p = spec.params_at(prev.alpha_hat + prev_period);
        auto est = update_alpha(prev, chain, beta, {prev_period, p.prep_sensor, p.tx_sensor});
        push(c, est, beta, spec);
    }

    void on_control(int chain, Time gamma) {
        auto& c = at(chain);
        if (c.rx.empty()) return;  // control frame of an instance we never saw start
        auto& rx = c.rx.back();
        if (!rx.gamma) rx.gamma = gamma;
    }

    /// Sampling-instant estimates of a chain, one per observed instance.
    const std::vector<AlphaEstimate>& alphas(int chain) const { return at(chain).history; }

    /// Estimate of the chain's active instance at `now`; empty until its first sensor frame is seen.
    std::optional<ChainEstimate> estimate(int chain, Time now) const {
        const auto& c = at(chain);
        if (c.history.empty()) return std::nullopt;
        const auto& spec = schedule_[static_cast<std::size_t>(chain - 1)];
        ChainEstimate out;
        out.k = c.history.back().k;
        out.alpha_hat = c.history.back().alpha_hat;
        out.params = c.params.back();
        out.rx = c.rx.back();
        // Instances that have started since the last reception are presumed arrived on schedule.
        for (;;) {
            const Time next = out.alpha_hat + out.params.period;
            if (!spec.arrives_at(next) || now < next) break;
            out.k += 1;
            out.alpha_hat = next;
            out.params = spec.params_at(next);
            out.rx = ObservedReception{chain, out.k, std::nullopt, std::nullopt};
        }
        const Time next = out.alpha_hat + out.params.period;
        out.state = estimate_states(now, out.alpha_hat, out.rx, out.params,
                                    spec.arrives_at(next) ? std::optional<Time>{} : std::optional<Time>{Time::never()});
        return out;
    }

    /// Estimated bus state at a reception instant, bus treated as just released.
    /// Chains never observed are invisible (no instance, no future arrival).
    timing::BusState estimated_bus(Time now) const {
        timing::BusState bus;
        bus.now = now;
        for (int n = 1; n <= static_cast<int>(schedule_.size()); ++n) {
            timing::ChainState st;
            if (auto e = estimate(n, now)) {
                st.d = e->state.d;
                st.r = e->state.r;
                st.o = e->state.o;
                st.k = e->k;
                st.params = e->params;
            } else {
                st.d = Time::never();
                st.params = schedule_[static_cast<std::size_t>(n - 1)].segments.front().params;
            }
            bus.chains.push_back(st);
        }
        return bus;
    }

    const MessageSet& schedule() const { return schedule_; }

private:
    struct PerChain {
        std::vector<AlphaEstimate> history;
        std::vector<ChainParams> params;
        std::vector<ObservedReception> rx;
    };

    PerChain& at(int chain) {
        if (chain < 1 || chain > static_cast<int>(chains_.size())) throw MalformedObservation("unknown chain id");
        return chains_[static_cast<std::size_t>(chain - 1)];
    }
    const PerChain& at(int chain) const {
        if (chain < 1 || chain > static_cast<int>(chains_.size())) throw MalformedObservation("unknown chain id");
        return chains_[static_cast<std::size_t>(chain - 1)];
    }

    static void push(PerChain& c, const AlphaEstimate& est, Time beta, const MessageChainSpec& spec) {
        c.history.push_back(est);
        c.params.push_back(spec.params_at(est.alpha_hat));
        c.rx.push_back(ObservedReception{est.chain, est.k, beta, std::nullopt});
    }

    MessageSet schedule_;
    std::vector<PerChain> chains_;
};

}  // namespace cantiming::observer
