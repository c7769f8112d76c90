#pragma once

#include <string>
#include <vector>

#include "../chain.hpp"
#include "../errors.hpp"
#include "../events.hpp"
#include "../timing/hybrid.hpp"
#include "mpc.hpp"

namespace cantiming::mpc {

/// Predicted sampling-to-actuation delays of one chain over a prediction horizon, in ticks.
struct DelayPrediction {
    Time t0;
    std::vector<Time> sampling;  // alpha_j, starting with the current instance
    std::vector<Time> delays;    // delta_j
    /// True where the completion fell beyond the horizon and the delay was filled in.
    std::vector<bool> extrapolated;

    /// Same schedule in seconds. `tick` is the duration of one tick in seconds.
    DelaySchedule to_schedule(double tick, const Eigen::VectorXd& u_before) const {
        DelaySchedule s;
        s.t0 = static_cast<double>(t0.ticks) * tick;
        for (std::size_t j = 0; j < sampling.size(); ++j) {
            s.sampling.push_back(static_cast<double>(sampling[j].ticks) * tick);
            s.delays.push_back(static_cast<double>(delays[j].ticks) * tick);
        }
        s.u_before = u_before;
        return s;
    }
};

/// Delays of the instances of `chain` sampled in [alpha_hat, alpha_hat + horizon).
///
/// The model runs from the (estimated) bus state to the horizon end. For each
/// instance, delta = o at the left limit of the next arrival, which equals
/// gamma - alpha of that instance. An instance whose control frame completes
/// after the horizon reuses the last predicted delay, or the no-contention
/// bound I1 + C1 + I2 + C2 when there is none.
inline DelayPrediction predict_delays(const timing::BusState& est, const MessageSet& specs, int chain, Time alpha_hat,
                                      Time horizon) {
    if (chain < 1 || chain > static_cast<int>(specs.size())) throw PreconditionViolation("unknown chain");
    if (horizon <= Time::zero()) throw PreconditionViolation("prediction horizon must be positive");
    const auto& self = est.chains[static_cast<std::size_t>(chain - 1)];
    if (self.k < 0) throw PreconditionViolation("chain has no active instance to predict from");
    if (est.now < alpha_hat) throw PreconditionViolation("bus estimate precedes the sampling instant");

    const Time end = alpha_hat + horizon;
    const auto run = timing::simulate_hybrid(specs, est, std::max(end, est.now));
    for (const auto& e : run.trace)
        if (e.kind == EventKind::DeadlineMiss)
            throw SchedulabilityViolation("predicted deadline miss of chain " + std::to_string(e.chain) + " at tick " +
                                          std::to_string(e.at.ticks));

    DelayPrediction out;
    out.t0 = alpha_hat;
    const auto& spec = specs[static_cast<std::size_t>(chain - 1)];
    std::int64_t k = self.k;
    Time alpha = alpha_hat;
    ChainParams params = self.params;
    std::optional<Time> last;
    while (alpha < end) {
        std::optional<Time> gamma;
        for (const auto& e : run.trace)
            if (e.chain == chain && e.k == k && e.kind == EventKind::ControlTxEnd) gamma = e.at;
        out.sampling.push_back(alpha);
        if (gamma && *gamma <= end) {
            out.delays.push_back(*gamma - alpha);
            out.extrapolated.push_back(false);
            last = *gamma - alpha;
        } else {
            out.delays.push_back(last ? *last : params.work());
            out.extrapolated.push_back(true);
        }
        const Time next = alpha + params.period;
        if (!spec.arrives_at(next)) break;
        alpha = next;
        params = spec.params_at(next);
        ++k;
    }
    return out;
}

}  // namespace cantiming::mpc
