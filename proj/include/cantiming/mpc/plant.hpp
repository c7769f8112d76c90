#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <utility>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "../errors.hpp"

namespace cantiming::mpc {

/// Continuous-time LTI plant x' = A x + B u, y = C x.
struct PlantModel {
    Eigen::MatrixXd A;
    Eigen::MatrixXd B;
    Eigen::MatrixXd C;

    Eigen::Index states() const { return A.rows(); }
    Eigen::Index inputs() const { return B.cols(); }
    Eigen::Index outputs() const { return C.rows(); }

    void validate() const {
        if (A.rows() == 0 || A.rows() != A.cols()) throw ConfigError("plant A must be square and non-empty");
        if (B.rows() != A.rows() || B.cols() == 0) throw ConfigError("plant B must have one row per state");
        if (C.cols() != A.rows() || C.rows() == 0) throw ConfigError("plant C must have one column per state");
        if (!A.allFinite() || !B.allFinite() || !C.allFinite()) throw ConfigError("plant matrices must be finite");
    }
};

/// Inverted pendulum form [[0,1],[a,b]], [0;c], [1,0].
inline PlantModel pendulum(double a, double b, double c) {
    PlantModel p;
    p.A = Eigen::MatrixXd(2, 2);
    p.A << 0.0, 1.0, a, b;
    p.B = Eigen::MatrixXd(2, 1);
    p.B << 0.0, c;
    p.C = Eigen::MatrixXd(1, 2);
    p.C << 1.0, 0.0;
    return p;
}

struct Discretization {
    Eigen::MatrixXd Ad;
    Eigen::MatrixXd Bd;
};

/// Zero-order-hold discretization over `h` seconds.
///
/// Uses the augmented-matrix identity exp([[A, B], [0, 0]] h) = [[Ad, Bd], [0, I]],
/// with Eigen's scaling-and-squaring Pade matrix exponential.
inline Discretization discretize_segment(const PlantModel& plant, double h) {
    if (!(h > 0.0) || !std::isfinite(h)) throw PreconditionViolation("discretization step must be positive");
    if (!plant.A.allFinite() || !plant.B.allFinite()) throw ConfigError("non-finite plant matrix");
    const Eigen::Index n = plant.states();
    const Eigen::Index m = plant.inputs();
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n + m, n + m);
    M.topLeftCorner(n, n) = plant.A * h;
    M.topRightCorner(n, m) = plant.B * h;
    const Eigen::MatrixXd E = M.exp();
    return {E.topLeftCorner(n, n), E.topRightCorner(n, m)};
}

/// Memoizes discretizations by step length (keyed at picosecond resolution).
class DiscretizationCache {
public:
    explicit DiscretizationCache(const PlantModel& plant) : plant_(&plant) {}

    const Discretization& get(double h) {
        const auto key = std::llround(h * 1e12);
        auto it = cache_.find(key);
        if (it == cache_.end()) it = cache_.emplace(key, discretize_segment(*plant_, h)).first;
        return it->second;
    }

private:
    const PlantModel* plant_;
    std::map<long long, Discretization> cache_;
};

}  // namespace cantiming::mpc
