#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "../errors.hpp"
#include "plant.hpp"

/// Continuous-time MPC with piecewise-constant, delay-shifted control.
///
/// The decision vector is one input value per actuation segment. Segment j
/// starts at alpha_j + delta_j (the instant its control frame is received)
/// and lasts until the next segment starts; before the first segment the
/// previously applied input is held.
namespace cantiming::mpc {

using Reference = std::function<Eigen::VectorXd(double)>;

struct MpcProblem {
    Eigen::MatrixXd Q1;  // output tracking weight (p x p)
    Eigen::MatrixXd Q2;  // input weight (m x m)
    Eigen::MatrixXd Q3;  // terminal state weight (n x n)
    double horizon = 0.1;  // Tp, seconds
    Eigen::VectorXd u_min;
    Eigen::VectorXd u_max;
    std::optional<Eigen::VectorXd> x_min;
    std::optional<Eigen::VectorXd> x_max;
    double state_penalty = 1e4;
    Reference reference;
    double grid_step = 1e-3;

    void validate(const PlantModel& plant) const {
        const auto n = plant.states(), m = plant.inputs(), p = plant.outputs();
        if (Q1.rows() != p || Q1.cols() != p) throw ConfigError("Q1 must be p x p");
        if (Q2.rows() != m || Q2.cols() != m) throw ConfigError("Q2 must be m x m");
        if (Q3.rows() != n || Q3.cols() != n) throw ConfigError("Q3 must be n x n");
        auto psd = [](const Eigen::MatrixXd& Q, const char* name) {
            if (!Q.isApprox(Q.transpose(), 1e-12) && Q.norm() > 0) throw ConfigError(std::string(name) + " must be symmetric");
            if (Q.size() > 0) {
                Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q);
                if (es.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, Q.norm()))
                    throw ConfigError(std::string(name) + " must be positive semidefinite");
            }
        };
        psd(Q1, "Q1");
        psd(Q2, "Q2");
        psd(Q3, "Q3");
        if (!(horizon > 0.0)) throw ConfigError("prediction horizon must be positive");
        if (!(grid_step > 0.0)) throw ConfigError("quadrature grid step must be positive");
        if (u_min.size() != m || u_max.size() != m) throw ConfigError("input bounds must have one entry per input");
        if ((u_min.array() > u_max.array()).any()) throw ConfigError("u_min must not exceed u_max");
        if (x_min && x_min->size() != n) throw ConfigError("x_min must have one entry per state");
        if (x_max && x_max->size() != n) throw ConfigError("x_max must have one entry per state");
        if (!reference) throw ConfigError("reference trajectory missing");
    }
};

/// Actuation segments inside one prediction horizon. Times in seconds.
struct DelaySchedule {
    double t0 = 0.0;
    std::vector<double> sampling;  // alpha_j, j = 1..K
    std::vector<double> delays;    // delta_j
    Eigen::VectorXd u_before;      // input held until the first segment starts

    std::size_t segments() const { return sampling.size(); }
    double boundary(std::size_t j) const { return sampling[j] + delays[j]; }

    void validate(Eigen::Index inputs) const {
        if (sampling.empty()) throw PreconditionViolation("delay schedule needs at least one segment");
        if (delays.size() != sampling.size()) throw PreconditionViolation("one delay per sampling instant");
        if (u_before.size() != inputs) throw PreconditionViolation("held input has wrong dimension");
        for (std::size_t j = 0; j < segments(); ++j) {
            if (delays[j] < 0.0) throw PreconditionViolation("negative delay");
            if (j > 0 && !(boundary(j) > boundary(j - 1))) throw PreconditionViolation("actuation instants must increase");
        }
    }
};

struct ControlPolicy {
    std::vector<Eigen::VectorXd> values;  // mu_1..mu_K
    bool converged = false;
    int iterations = 0;
    double residual = std::numeric_limits<double>::infinity();
    /// Cost after every accepted iterate, starting with the initial point.
    std::vector<double> cost_history;
};

namespace detail {

/// Quadrature nodes: uniform grid from t0, the horizon end, and every actuation instant inside.
inline std::vector<double> quadrature_nodes(const MpcProblem& pb, const DelaySchedule& sch) {
    const double t0 = sch.t0, t1 = sch.t0 + pb.horizon;
    std::vector<double> nodes;
    const auto steps = static_cast<long long>(std::floor(pb.horizon / pb.grid_step + 1e-9));
    for (long long i = 0; i <= steps; ++i) nodes.push_back(t0 + static_cast<double>(i) * pb.grid_step);
    nodes.push_back(t1);
    for (std::size_t j = 0; j < sch.segments(); ++j) {
        const double b = sch.boundary(j);
        if (b > t0 && b < t1) nodes.push_back(b);
    }
    std::sort(nodes.begin(), nodes.end());
    std::vector<double> out;
    for (double t : nodes)
        if (out.empty() || t - out.back() > 1e-12) out.push_back(t);
        else out.back() = std::max(out.back(), t);
    return out;
}

/// Segment active on [t, next node): -1 for the held input.
inline int segment_at(const DelaySchedule& sch, double t) {
    int seg = -1;
    for (std::size_t j = 0; j < sch.segments(); ++j)
        if (sch.boundary(j) <= t + 1e-12) seg = static_cast<int>(j);
    return seg;
}

inline std::vector<double> trapezoid_weights(const std::vector<double>& nodes) {
    std::vector<double> w(nodes.size(), 0.0);
    for (std::size_t i = 0; i + 1 < nodes.size(); ++i) {
        const double h = nodes[i + 1] - nodes[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    return w;
}

inline double box_violation_sq(const Eigen::VectorXd& x, const MpcProblem& pb) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (pb.x_max && x(i) > (*pb.x_max)(i)) s += std::pow(x(i) - (*pb.x_max)(i), 2);
        if (pb.x_min && x(i) < (*pb.x_min)(i)) s += std::pow((*pb.x_min)(i) - x(i), 2);
    }
    return s;
}

}  // namespace detail

/// Cost of a policy by direct forward simulation of the plant.
///
/// J = int (lambda - y)' Q1 (lambda - y) + u' Q2 u dt + x(T)' Q3 x(T), plus the
/// soft state-bound penalty. The tracking part uses the trapezoid rule on the
/// quadrature nodes; the input part is integrated exactly.
inline double evaluate_cost(const PlantModel& plant, const MpcProblem& pb, const Eigen::VectorXd& x0,
                            const ControlPolicy& policy, const DelaySchedule& sch) {
    sch.validate(plant.inputs());
    if (policy.values.size() != sch.segments()) throw PreconditionViolation("one policy value per segment");
    const auto nodes = detail::quadrature_nodes(pb, sch);
    const auto w = detail::trapezoid_weights(nodes);
    DiscretizationCache cache(plant);
    Eigen::VectorXd x = x0;
    double J = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const Eigen::VectorXd e = pb.reference(nodes[i]) - plant.C * x;
        J += w[i] * e.dot(pb.Q1 * e);
        if (pb.x_min || pb.x_max) J += w[i] * pb.state_penalty * detail::box_violation_sq(x, pb);
        if (i + 1 == nodes.size()) break;
        const double h = nodes[i + 1] - nodes[i];
        const int seg = detail::segment_at(sch, nodes[i]);
        const Eigen::VectorXd& u = seg < 0 ? sch.u_before : policy.values[static_cast<std::size_t>(seg)];
        J += h * u.dot(pb.Q2 * u);
        const auto& dz = cache.get(h);
        x = dz.Ad * x + dz.Bd * u;
    }
    J += x.dot(pb.Q3 * x);
    return J;
}

/// The cost as an explicit quadratic J(mu) = mu'H mu + 2 g'mu + c (+ soft penalty),
/// built from the affine maps x_i = c_i + S_i mu at the quadrature nodes.
class QuadraticCost {
public:
    QuadraticCost(const PlantModel& plant, const MpcProblem& pb, const Eigen::VectorXd& x0, const DelaySchedule& sch)
        : pb_(&pb), m_(plant.inputs()), K_(static_cast<Eigen::Index>(sch.segments())) {
        sch.validate(plant.inputs());
        const auto nodes = detail::quadrature_nodes(pb, sch);
        weights_ = detail::trapezoid_weights(nodes);
        const Eigen::Index n = plant.states(), dim = m_ * K_;
        H_ = Eigen::MatrixXd::Zero(dim, dim);
        g_ = Eigen::VectorXd::Zero(dim);
        c_ = 0.0;
        DiscretizationCache cache(plant);
        Eigen::VectorXd ci = x0;
        Eigen::MatrixXd Si = Eigen::MatrixXd::Zero(n, dim);
        const bool bounded = pb.x_min || pb.x_max;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const Eigen::VectorXd a = pb.reference(nodes[i]) - plant.C * ci;
            const Eigen::MatrixXd G = plant.C * Si;
            H_.noalias() += weights_[i] * G.transpose() * pb.Q1 * G;
            g_.noalias() -= weights_[i] * G.transpose() * (pb.Q1 * a);
            c_ += weights_[i] * a.dot(pb.Q1 * a);
            if (bounded) {
                offsets_.push_back(ci);
                sens_.push_back(Si);
            }
            if (i + 1 == nodes.size()) break;
            const double h = nodes[i + 1] - nodes[i];
            const int seg = detail::segment_at(sch, nodes[i]);
            const auto& dz = cache.get(h);
            ci = dz.Ad * ci;
            Si = dz.Ad * Si;
            if (seg < 0) {
                c_ += h * sch.u_before.dot(pb.Q2 * sch.u_before);
                ci += dz.Bd * sch.u_before;
            } else {
                const Eigen::Index off = m_ * seg;
                H_.block(off, off, m_, m_) += h * pb.Q2;
                Si.middleCols(off, m_) += dz.Bd;
            }
        }
        H_.noalias() += Si.transpose() * pb.Q3 * Si;
        g_.noalias() += Si.transpose() * (pb.Q3 * ci);
        c_ += ci.dot(pb.Q3 * ci);
        H_ = 0.5 * (H_ + H_.transpose());
        if (bounded) {
            Eigen::MatrixXd StS = Eigen::MatrixXd::Zero(dim, dim);
            for (std::size_t i = 0; i < sens_.size(); ++i) StS.noalias() += weights_[i] * sens_[i].transpose() * sens_[i];
            penalty_curvature_ = pb.state_penalty * Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(StS).eigenvalues().maxCoeff();
        }
    }

    Eigen::Index dimension() const { return m_ * K_; }
    const Eigen::MatrixXd& hessian_half() const { return H_; }
    const Eigen::VectorXd& linear() const { return g_; }

    double value(const Eigen::VectorXd& mu) const {
        double J = mu.dot(H_ * mu) + 2.0 * g_.dot(mu) + c_;
        for (std::size_t i = 0; i < sens_.size(); ++i)
            J += weights_[i] * pb_->state_penalty * detail::box_violation_sq(offsets_[i] + sens_[i] * mu, *pb_);
        return J;
    }

    Eigen::VectorXd gradient(const Eigen::VectorXd& mu) const {
        Eigen::VectorXd grad = 2.0 * (H_ * mu + g_);
        for (std::size_t i = 0; i < sens_.size(); ++i) {
            const Eigen::VectorXd x = offsets_[i] + sens_[i] * mu;
            Eigen::VectorXd v = Eigen::VectorXd::Zero(x.size());
            for (Eigen::Index s = 0; s < x.size(); ++s) {
                if (pb_->x_max && x(s) > (*pb_->x_max)(s)) v(s) = x(s) - (*pb_->x_max)(s);
                if (pb_->x_min && x(s) < (*pb_->x_min)(s)) v(s) = x(s) - (*pb_->x_min)(s);
            }
            grad.noalias() += 2.0 * weights_[i] * pb_->state_penalty * sens_[i].transpose() * v;
        }
        return grad;
    }

    /// Curvature of the penalty term at mu (active bounds only).
    Eigen::MatrixXd hessian(const Eigen::VectorXd& mu) const {
        Eigen::MatrixXd Hf = 2.0 * H_;
        for (std::size_t i = 0; i < sens_.size(); ++i) {
            const Eigen::VectorXd x = offsets_[i] + sens_[i] * mu;
            for (Eigen::Index s = 0; s < x.size(); ++s) {
                const bool active = (pb_->x_max && x(s) > (*pb_->x_max)(s)) || (pb_->x_min && x(s) < (*pb_->x_min)(s));
                if (active) {
                    const Eigen::RowVectorXd row = sens_[i].row(s);
                    Hf.noalias() += 2.0 * weights_[i] * pb_->state_penalty * row.transpose() * row;
                }
            }
        }
        return Hf;
    }

    double penalty_curvature() const { return penalty_curvature_; }

private:
    const MpcProblem* pb_;
    Eigen::Index m_;
    Eigen::Index K_;
    std::vector<double> weights_;
    Eigen::MatrixXd H_;
    Eigen::VectorXd g_;
    double c_ = 0.0;
    std::vector<Eigen::VectorXd> offsets_;
    std::vector<Eigen::MatrixXd> sens_;
    double penalty_curvature_ = 0.0;
};

struct SolverOptions {
    double tolerance = 1e-8;
    int max_iterations = 10000;
    /// Attempt a Newton step on the free variables every this many gradient steps.
    int polish_every = 25;
};

/// Box-constrained minimization of the MPC cost.
///
/// Projected gradient descent in Jacobi-scaled coordinates with step 1/L; every
/// `polish_every` steps a Newton step restricted to the free variables is tried
/// and kept only if it lowers the cost, so iterates are monotone. Stops when
/// the scaled projected-gradient residual max|mu - P(mu - D^-1 grad)| falls to
/// `tolerance` or after `max_iterations`; the best iterate is returned either way.
inline ControlPolicy solve_mpc(const PlantModel& plant, const MpcProblem& pb, const Eigen::VectorXd& x0,
                               const DelaySchedule& sch, const SolverOptions& opt = {},
                               const std::optional<Eigen::VectorXd>& warm_start = std::nullopt) {
    pb.validate(plant);
    const QuadraticCost cost(plant, pb, x0, sch);
    const Eigen::Index m = plant.inputs(), dim = cost.dimension();
    Eigen::VectorXd lo(dim), hi(dim);
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(sch.segments()); ++j) {
        lo.segment(j * m, m) = pb.u_min;
        hi.segment(j * m, m) = pb.u_max;
    }
    auto project = [&](Eigen::VectorXd v) { return v.cwiseMax(lo).cwiseMin(hi); };

    // Jacobi scaling: D = diag of the curvature, floored to keep it invertible.
    const Eigen::MatrixXd& Hh = cost.hessian_half();
    Eigen::VectorXd diag = 2.0 * Hh.diagonal();
    const double floor = std::max(diag.maxCoeff(), 1.0) * 1e-12;
    diag = diag.cwiseMax(floor);
    const Eigen::VectorXd dinv_sqrt = diag.cwiseInverse().cwiseSqrt();
    const Eigen::MatrixXd scaled = dinv_sqrt.asDiagonal() * (2.0 * Hh) * dinv_sqrt.asDiagonal();
    double L = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(scaled).eigenvalues().maxCoeff();
    L += 2.0 * cost.penalty_curvature() / diag.minCoeff();
    L = std::max(L, 1e-12);
    const Eigen::VectorXd step = diag.cwiseInverse() / L;

    Eigen::VectorXd mu = warm_start && warm_start->size() == dim ? project(*warm_start) : project(Eigen::VectorXd::Zero(dim));
    double J = cost.value(mu);
    ControlPolicy out;
    out.cost_history.push_back(J);

    auto residual = [&](const Eigen::VectorXd& v) {
        const Eigen::VectorXd g = cost.gradient(v);
        return (v - project(v - diag.cwiseInverse().cwiseProduct(g))).cwiseAbs().maxCoeff();
    };

    int it = 0;
    double res = residual(mu);
    while (res > opt.tolerance && it < opt.max_iterations) {
        ++it;
        const Eigen::VectorXd g = cost.gradient(mu);
        Eigen::VectorXd cand = project(mu - step.cwiseProduct(g));
        double Jc = cost.value(cand);

        if (opt.polish_every > 0 && it % opt.polish_every == 1) {
            // Free set: strictly inside the box, or on a bound with the gradient pointing inward.
            std::vector<Eigen::Index> free;
            for (Eigen::Index i = 0; i < dim; ++i) {
                const bool at_lo = mu(i) <= lo(i) && g(i) > 0.0;
                const bool at_hi = mu(i) >= hi(i) && g(i) < 0.0;
                if (!at_lo && !at_hi) free.push_back(i);
            }
            if (!free.empty()) {
                const Eigen::MatrixXd Hf = cost.hessian(mu);
                const auto nf = static_cast<Eigen::Index>(free.size());
                Eigen::MatrixXd Hff(nf, nf);
                Eigen::VectorXd gf(nf);
                for (Eigen::Index a = 0; a < nf; ++a) {
                    gf(a) = g(free[static_cast<std::size_t>(a)]);
                    for (Eigen::Index b = 0; b < nf; ++b)
                        Hff(a, b) = Hf(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]);
                }
                const Eigen::VectorXd dn = Hff.completeOrthogonalDecomposition().solve(-gf);
                Eigen::VectorXd newton = mu;
                for (Eigen::Index a = 0; a < nf; ++a) newton(free[static_cast<std::size_t>(a)]) += dn(a);
                newton = project(newton);
                const double Jn = cost.value(newton);
                if (std::isfinite(Jn) && Jn < Jc) {
                    cand = newton;
                    Jc = Jn;
                }
            }
        }

        if (!(Jc <= J)) break;  // no further decrease representable
        mu = cand;
        J = Jc;
        out.cost_history.push_back(J);
        res = residual(mu);
    }

    out.iterations = it;
    out.residual = res;
    out.converged = res <= opt.tolerance;
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(sch.segments()); ++j) out.values.push_back(mu.segment(j * m, m));
    return out;
}

/// First control value of a policy; it is held until the next actuation instant.
inline const Eigen::VectorXd& apply_first_move(const ControlPolicy& policy) {
    if (policy.values.empty()) throw PreconditionViolation("empty control policy");
    return policy.values.front();
}

}  // namespace cantiming::mpc
