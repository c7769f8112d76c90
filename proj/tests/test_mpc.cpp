#include <random>

#include <catch_amalgamated.hpp>

#include "cantiming/mpc/mpc.hpp"
#include "cantiming/mpc/plant.hpp"
#include "cantiming/mpc/predict.hpp"
#include "cantiming/timing/hybrid.hpp"
#include "mpc_util.hpp"
#include "test_util.hpp"

using namespace cantiming;
using namespace cantiming::mpc;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using testutil::ms;
using namespace testutil;

namespace {

PlantModel scalar(double a, double b) {
    PlantModel p;
    p.A = Eigen::MatrixXd::Constant(1, 1, a);
    p.B = Eigen::MatrixXd::Constant(1, 1, b);
    p.C = Eigen::MatrixXd::Identity(1, 1);
    return p;
}

MpcProblem problem(const PlantModel& p, double tp, double q1, double q2, double q3, Reference ref, double umax = 4.0) {
    MpcProblem pb;
    pb.Q1 = q1 * Eigen::MatrixXd::Identity(p.outputs(), p.outputs());
    pb.Q2 = q2 * Eigen::MatrixXd::Identity(p.inputs(), p.inputs());
    pb.Q3 = q3 * Eigen::MatrixXd::Identity(p.states(), p.states());
    pb.horizon = tp;
    pb.u_min = Eigen::VectorXd::Constant(p.inputs(), -umax);
    pb.u_max = Eigen::VectorXd::Constant(p.inputs(), umax);
    pb.reference = std::move(ref);
    return pb;
}

Reference constant(Eigen::Index p, double v) {
    return [p, v](double) { return Eigen::VectorXd::Constant(p, v); };
}

DelaySchedule schedule(double t0, std::vector<double> alpha, std::vector<double> delta, Eigen::VectorXd u_before) {
    return DelaySchedule{t0, std::move(alpha), std::move(delta), std::move(u_before)};
}

}  // namespace

TEST_CASE("zero-order-hold discretization") {
    SECTION("integrator") {
        const auto d = discretize_segment(scalar(0.0, 1.0), 0.5);
        CHECK_THAT(d.Ad(0, 0), WithinAbs(1.0, 1e-14));
        CHECK_THAT(d.Bd(0, 0), WithinAbs(0.5, 1e-14));
    }
    SECTION("double integrator") {
        PlantModel p;
        p.A = Eigen::MatrixXd(2, 2);
        p.A << 0, 1, 0, 0;
        p.B = Eigen::MatrixXd(2, 1);
        p.B << 0, 1;
        p.C = Eigen::MatrixXd(1, 2);
        p.C << 1, 0;
        const auto d = discretize_segment(p, 1.0);
        Eigen::MatrixXd Ad(2, 2), Bd(2, 1);
        Ad << 1, 1, 0, 1;
        Bd << 0.5, 1;
        CHECK((d.Ad - Ad).cwiseAbs().maxCoeff() < 1e-14);
        CHECK((d.Bd - Bd).cwiseAbs().maxCoeff() < 1e-14);
    }
    SECTION("unstable pendulum against fine integration") {
        const auto p = pendulum(98, 120, 20);
        const auto d = discretize_segment(p, 1e-3);
        for (int trial = 0; trial < 3; ++trial) {
            const Eigen::VectorXd x = Eigen::VectorXd::Unit(2, trial % 2) * (trial + 1);
            const Eigen::VectorXd u = Eigen::VectorXd::Constant(1, trial == 2 ? 3.0 : 0.0);
            const Eigen::VectorXd ref = testutil::rk4(p, x, u, 1e-3, 4000);
            const Eigen::VectorXd got = d.Ad * x + d.Bd * u;
            CHECK((got - ref).norm() <= 1e-8 * ref.norm());
        }
    }
    SECTION("rejects bad input") {
        CHECK_THROWS_AS(discretize_segment(scalar(0, 1), 0.0), PreconditionViolation);
        CHECK_THROWS_AS(discretize_segment(scalar(std::nan(""), 1), 0.1), ConfigError);
    }
}

TEST_CASE("cost evaluation") {
    SECTION("zero everything") {
        const auto p = pendulum(98, 120, 20);
        const auto pb = problem(p, 0.1, 1, 0.01, 1, constant(1, 0.0));
        const auto sch = schedule(0.0, {0.0, 0.02}, {0.01, 0.009}, Eigen::VectorXd::Zero(1));
        CHECK(evaluate_cost(p, pb, Eigen::VectorXd::Zero(2), policy({0, 0}), sch) == 0.0);
    }
    SECTION("integrator away from a unit reference") {
        const auto p = scalar(0.0, 1.0);
        const auto pb = problem(p, 1.0, 1, 0, 0, constant(1, 1.0));
        const auto sch = schedule(0.0, {0.0}, {0.1}, Eigen::VectorXd::Zero(1));
        CHECK_THAT(evaluate_cost(p, pb, Eigen::VectorXd::Zero(1), policy({0}), sch), WithinRel(1.0, 1e-12));
    }
    SECTION("pendulum, zero policy, square reference") {
        const auto p = pendulum(98, 120, 20);
        auto pb = problem(p, 0.1, 1, 0.01, 0, [](double t) { return Eigen::VectorXd::Constant(1, t < 0.55 ? 0.1 : -0.1); });
        const auto sch = schedule(0.5, {0.5, 0.52, 0.54}, {0.01, 0.009, 0.01}, Eigen::VectorXd::Zero(1));
        // Fine-step oracle: RK4 states and a 10 us trapezoid.
        double ref = 0.0;
        const int steps = 10000;
        for (int i = 0; i <= steps; ++i) ref += (i == 0 || i == steps ? 0.5 : 1.0) * 1e-5 * 0.01;
        CHECK_THAT(evaluate_cost(p, pb, Eigen::VectorXd::Zero(2), policy({0, 0, 0}), sch), WithinRel(ref, 1e-6));
    }
    SECTION("propagation matches fine integration at the quadrature nodes") {
        const auto p = pendulum(65, 52, 13);
        const auto pb = problem(p, 0.1, 1, 0.01, 2, constant(1, 0.1));
        const Eigen::VectorXd x0 = (Eigen::VectorXd(2) << 0.01, -0.02).finished();
        const auto sch = schedule(0.2, {0.2, 0.23, 0.26, 0.29}, {0.013, 0.009, 0.013, 0.011}, Eigen::VectorXd::Constant(1, 0.3));
        const auto pol = policy({-1.0, 0.5, 2.0, -0.25});
        // Independent evaluation: RK4 between the same nodes, same trapezoid rule.
        std::vector<double> nodes;
        for (int i = 0; i <= 100; ++i) nodes.push_back(0.2 + i * 1e-3);
        for (std::size_t j = 0; j < 4; ++j) nodes.push_back(sch.sampling[j] + sch.delays[j]);
        std::sort(nodes.begin(), nodes.end());
        nodes.erase(std::unique(nodes.begin(), nodes.end(), [](double a, double b) { return std::abs(a - b) < 1e-12; }), nodes.end());
        while (nodes.back() > 0.3 + 1e-12) nodes.pop_back();
        Eigen::VectorXd x = x0;
        double J = 0.0;
        auto input = [&](double t) {
            Eigen::VectorXd u = sch.u_before;
            for (std::size_t j = 0; j < 4; ++j)
                if (sch.sampling[j] + sch.delays[j] <= t + 1e-12) u = pol.values[j];
            return u;
        };
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const double h_prev = i > 0 ? nodes[i] - nodes[i - 1] : 0.0;
            const double h_next = i + 1 < nodes.size() ? nodes[i + 1] - nodes[i] : 0.0;
            const double e = 0.1 - x(0);
            J += 0.5 * (h_prev + h_next) * e * e;
            if (i + 1 == nodes.size()) break;
            const Eigen::VectorXd u = input(nodes[i]);
            J += h_next * 0.01 * u.squaredNorm();
            x = testutil::rk4(p, x, u, h_next, 200);
        }
        J += 2.0 * x.squaredNorm();
        CHECK_THAT(evaluate_cost(p, pb, x0, pol, sch), WithinRel(J, 1e-8));
    }
    SECTION("inconsistent policy") {
        const auto p = scalar(0, 1);
        const auto pb = problem(p, 1.0, 1, 0, 0, constant(1, 1.0));
        CHECK_THROWS_AS(evaluate_cost(p, pb, Eigen::VectorXd::Zero(1), policy({0, 1}),
                                      schedule(0, {0}, {0.1}, Eigen::VectorXd::Zero(1))),
                        PreconditionViolation);
        CHECK_THROWS_AS(evaluate_cost(p, pb, Eigen::VectorXd::Zero(1), policy({0, 1}),
                                      schedule(0, {0, 0.1}, {0.2, 0.05}, Eigen::VectorXd::Zero(1))),
                        PreconditionViolation);
    }
}

TEST_CASE("quadratic form agrees with direct evaluation") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 30; ++i) {
        const auto r = random_instance(rng);
        const QuadraticCost q(r.plant, r.pb, r.x0, r.sch);
        const auto pol = random_policy(rng, r);
        CHECK_THAT(q.value(flat(pol)), WithinRel(evaluate_cost(r.plant, r.pb, r.x0, pol, r.sch), 1e-9));
    }
}

TEST_CASE("cost gradient matches central differences") {
    std::mt19937_64 rng(12);
    for (int i = 0; i < 50; ++i) {
        const auto r = random_instance(rng);
        const QuadraticCost q(r.plant, r.pb, r.x0, r.sch);
        const Eigen::VectorXd mu = flat(random_policy(rng, r));
        const Eigen::VectorXd g = q.gradient(mu);
        Eigen::VectorXd fd(mu.size());
        const double h = 1e-3;
        for (Eigen::Index j = 0; j < mu.size(); ++j) {
            Eigen::VectorXd a = mu, b = mu;
            a(j) += h;
            b(j) -= h;
            fd(j) = (evaluate_cost(r.plant, r.pb, r.x0, unflat(a, r.plant.inputs()), r.sch) -
                     evaluate_cost(r.plant, r.pb, r.x0, unflat(b, r.plant.inputs()), r.sch)) /
                    (2 * h);
        }
        INFO("instance " << i);
        CHECK((g - fd).cwiseAbs().maxCoeff() <= 1e-5 * std::max(1.0, g.cwiseAbs().maxCoeff()));
    }
}

TEST_CASE("cost is convex in the policy") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int i = 0; i < 30; ++i) {
        const auto r = random_instance(rng);
        const auto a = random_policy(rng, r), b = random_policy(rng, r);
        const double th = U(rng);
        const Eigen::VectorXd mid = th * flat(a) + (1 - th) * flat(b);
        const double lhs = evaluate_cost(r.plant, r.pb, r.x0, unflat(mid, r.plant.inputs()), r.sch);
        const double rhs = th * evaluate_cost(r.plant, r.pb, r.x0, a, r.sch) + (1 - th) * evaluate_cost(r.plant, r.pb, r.x0, b, r.sch);
        CHECK(lhs <= rhs + 1e-9 * std::max(1.0, std::abs(rhs)));
    }
}

TEST_CASE("solver") {
    SECTION("nothing to track") {
        const auto p = pendulum(98, 120, 20);
        const auto pb = problem(p, 0.1, 1, 0.01, 0, constant(1, 0.0));
        const auto sch = schedule(0, {0, 0.02, 0.04, 0.06, 0.08}, {0.01, 0.009, 0.01, 0.01, 0.009}, Eigen::VectorXd::Zero(1));
        const auto pol = solve_mpc(p, pb, Eigen::VectorXd::Zero(2), sch);
        CHECK(pol.converged);
        for (const auto& v : pol.values) CHECK(v(0) == 0.0);
    }
    SECTION("clamps at the input bound") {
        // x' = u from 0 toward 10: the unconstrained optimum is 15.
        const auto p = scalar(0.0, 1.0);
        const auto pb = problem(p, 1.0, 1, 0, 0, constant(1, 10.0));
        const auto sch = schedule(0, {0}, {1e-9}, Eigen::VectorXd::Zero(1));
        const auto pol = solve_mpc(p, pb, Eigen::VectorXd::Zero(1), sch);
        CHECK(pol.values[0](0) == 4.0);
        const QuadraticCost q(p, pb, Eigen::VectorXd::Zero(1), sch);
        const double g = q.gradient(flat(pol))(0);
        CHECK(g < 0.0);  // pushing further would still lower the cost
        CHECK(std::abs(flat(pol)(0) - std::clamp(flat(pol)(0) - g, -4.0, 4.0)) <= 1e-6);
    }
    SECTION("single segment hits the parabola vertex") {
        std::mt19937_64 rng(14);
        int checked = 0;
        for (int i = 0; i < 40 && checked < 10; ++i) {
            auto r = random_instance(rng);
            if (r.plant.inputs() != 1) continue;
            r.sch.sampling.resize(1);
            r.sch.delays.resize(1);
            r.pb.u_min(0) = -1e6;
            r.pb.u_max(0) = 1e6;
            auto J = [&](double v) { return evaluate_cost(r.plant, r.pb, r.x0, policy({v}), r.sch); };
            const double f0 = J(0), fp = J(1), fm = J(-1);
            const double a = 0.5 * (fp + fm) - f0, b = 0.5 * (fp - fm);
            if (a <= 1e-9) continue;
            const double vertex = -b / (2 * a);
            const auto pol = solve_mpc(r.plant, r.pb, r.x0, r.sch);
            CHECK(pol.converged);
            CHECK_THAT(pol.values[0](0), WithinAbs(vertex, 1e-8 * std::max(1.0, std::abs(vertex))));
            ++checked;
        }
        CHECK(checked >= 5);
    }
    SECTION("bounds hold and iterates never increase the cost") {
        std::mt19937_64 rng(15);
        for (int i = 0; i < 40; ++i) {
            auto r = random_instance(rng);
            r.pb.reference = constant(r.plant.outputs(), 5.0);  // far target: bounds become active
            const auto pol = solve_mpc(r.plant, r.pb, r.x0, r.sch);
            for (const auto& v : pol.values) {
                CHECK((v.array() >= r.pb.u_min.array()).all());
                CHECK((v.array() <= r.pb.u_max.array()).all());
            }
            for (std::size_t k = 1; k < pol.cost_history.size(); ++k) CHECK(pol.cost_history[k] <= pol.cost_history[k - 1]);
            CHECK_THAT(evaluate_cost(r.plant, r.pb, r.x0, pol, r.sch),
                       WithinRel(pol.cost_history.back(), 1e-9) || WithinAbs(pol.cost_history.back(), 1e-12));
        }
    }
    SECTION("soft state bounds pull the state inside") {
        const auto p = scalar(0.0, 1.0);
        auto pb = problem(p, 1.0, 1, 0, 0, constant(1, 3.0));
        const auto sch = schedule(0, {0, 0.5}, {1e-9, 1e-9}, Eigen::VectorXd::Zero(1));
        const auto free = solve_mpc(p, pb, Eigen::VectorXd::Zero(1), sch);
        pb.x_max = Eigen::VectorXd::Constant(1, 1.0);
        const auto bounded = solve_mpc(p, pb, Eigen::VectorXd::Zero(1), sch);
        // Final state x(1) = 0.5 (mu1 + mu2).
        CHECK(0.5 * (free.values[0](0) + free.values[1](0)) > 1.5);
        CHECK(0.5 * (bounded.values[0](0) + bounded.values[1](0)) < 1.1);
    }
    SECTION("invalid problem") {
        const auto p = scalar(0, 1);
        auto pb = problem(p, 1.0, 1, 0, 0, constant(1, 1.0));
        pb.Q1(0, 0) = -1;
        CHECK_THROWS_AS(solve_mpc(p, pb, Eigen::VectorXd::Zero(1), schedule(0, {0}, {0.1}, Eigen::VectorXd::Zero(1))), ConfigError);
    }
}

TEST_CASE("first move") {
    CHECK(apply_first_move(policy({2.5, -1, 0}))(0) == 2.5);
    CHECK(apply_first_move(policy({0.7}))(0) == 0.7);
    CHECK_THROWS_AS(apply_first_move(ControlPolicy{}), PreconditionViolation);
}

TEST_CASE("delay prediction from the timing model") {
    const auto specs = testutil::three_loop_set();
    timing::HybridEngine e(specs, timing::initial_state(specs));
    e.settle();
    const auto& bus = e.state();

    const auto p3 = predict_delays(bus, specs, 3, ms(0), ms(160));
    CHECK(p3.sampling == std::vector<Time>{ms(0), ms(40), ms(80), ms(120)});
    CHECK(p3.delays == std::vector<Time>{ms(21), ms(13), ms(13), ms(21)});
    CHECK(std::none_of(p3.extrapolated.begin(), p3.extrapolated.end(), [](bool b) { return b; }));

    const auto p1 = predict_delays(bus, specs, 1, ms(0), ms(80));
    CHECK(p1.delays == std::vector<Time>{ms(10), ms(9), ms(10), ms(10)});

    // Horizon cut inside the last instance: its delay is carried over.
    const auto cut = predict_delays(bus, specs, 3, ms(0), ms(130));
    CHECK(cut.delays == std::vector<Time>{ms(21), ms(13), ms(13), ms(13)});
    CHECK(cut.extrapolated.back());

    MessageSet one{make_chain(1, testutil::params(20, 1, 3, 2, 3, 1, 2))};
    timing::HybridEngine e1(one, timing::initial_state(one));
    e1.settle();
    for (Time d : predict_delays(e1.state(), one, 1, ms(0), ms(100)).delays) CHECK(d == ms(9));
    // Nothing fully predicted: no-contention bound.
    CHECK(predict_delays(e1.state(), one, 1, ms(0), ms(5)).delays == std::vector<Time>{ms(9)});

    const auto s = p3.to_schedule(1e-6, Eigen::VectorXd::Zero(1));
    CHECK_THAT(s.boundary(1), WithinAbs(0.053, 1e-12));

    auto tight = specs;
    tight[2].segments[0].params.period = ms(12);
    timing::HybridEngine et(tight, timing::initial_state(tight));
    et.settle();
    CHECK_THROWS_AS(predict_delays(et.state(), tight, 1, ms(0), ms(100)), SchedulabilityViolation);
}
