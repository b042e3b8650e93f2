#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/matrix.hpp"
#include "mcra/rate.hpp"

namespace mcra {

struct SolverOptions {
    std::size_t max_iters = 500;
    double rel_tol = 1e-5;          // on the weighted-MSE objective, per round
    double bisect_tol = 1e-8;       // guaranteed bound on the budget residual of the
                                    // multiplier search (the search itself runs the
                                    // bracket to floating-point resolution)
    std::size_t bisect_max_steps = 100;

    void validate() const {
        if (max_iters == 0 || !(rel_tol > 0.0) || !(bisect_tol > 0.0) || bisect_max_steps == 0) {
            throw contract_error("SolverOptions: all options must be positive");
        }
    }
};

/// Block-coordinate iterates for the weighted-MSE formulation. v holds
/// square-root powers, u receiver scalars, w the MSE weights, e the MSEs,
/// J the received-energy terms.
struct WmmseState {
    Mat v, u, w, e, J;
    std::vector<double> lambda;           // per-user power multipliers
    std::vector<double> objective_trace;  // weighted-MSE objective per round
};

namespace detail {

inline void received_energy(Mat& J, const Mat& v, const ChannelInstance& inst,
                            const NetworkConfig& config) {
    const std::size_t d = config.pairs;
    for (std::size_t m = 0; m < config.channels; ++m) {
        const Mat& g = inst.gains[m];
        for (std::size_t i = 0; i < d; ++i) {
            double acc = config.noise_power;
            for (std::size_t j = 0; j < d; ++j) {
                const double t = g(i, j) * v(j, m);
                acc += t * t;
            }
            J(i, m) = acc;
        }
    }
}

inline double mse(double u, double g_ii, double v, double J) {
    return u * u * J - 2.0 * u * g_ii * v + 1.0;
}

}  // namespace detail

/// J_i^m = sum_j (g_ij v_j)^2 + sigma^2; u_i^m = g_ii v_i / J_i^m.
inline void update_u(WmmseState& state, const ChannelInstance& inst, const NetworkConfig& config) {
    detail::received_energy(state.J, state.v, inst, config);
    for (std::size_t m = 0; m < config.channels; ++m) {
        const Mat& g = inst.gains[m];
        for (std::size_t i = 0; i < config.pairs; ++i) {
            state.u(i, m) = g(i, i) * state.v(i, m) / state.J(i, m);
        }
    }
}

/// e_i^m = u^2 J - 2 u g_ii v + 1; w_i^m = 1 / e_i^m.
inline void update_w(WmmseState& state, const ChannelInstance& inst, const NetworkConfig& config) {
    for (std::size_t m = 0; m < config.channels; ++m) {
        const Mat& g = inst.gains[m];
        for (std::size_t i = 0; i < config.pairs; ++i) {
            const double e = detail::mse(state.u(i, m), g(i, i), state.v(i, m), state.J(i, m));
            if (!(e > 0.0)) throw numeric_error("update_w: non-positive MSE");
            state.e(i, m) = e;
            state.w(i, m) = 1.0 / e;
        }
    }
}

/// Per-user closed form in the multiplier:
///   v_i^m(l) = a_i w_i u_i g_ii / (sum_j a_j w_j (u_j g_ji)^2 + l).
/// l_i = 0 when the unconstrained solution fits the budget, otherwise
/// bisection on [0, l_hi] drives sum_m v^2 to p_max. The search always
/// returns the feasible end of the bracket.
inline void update_v(WmmseState& state, const ChannelInstance& inst, const NetworkConfig& config,
                     const SolverOptions& opts) {
    const std::size_t d = config.pairs;
    const std::size_t ch = config.channels;
    Mat num(d, ch), den(d, ch);
    for (std::size_t m = 0; m < ch; ++m) {
        const Mat& g = inst.gains[m];
        for (std::size_t j = 0; j < d; ++j) {
            const double s = config.weight(j) * state.w(j, m) * state.u(j, m) * state.u(j, m);
            for (std::size_t i = 0; i < d; ++i) {
                den(i, m) += s * g(j, i) * g(j, i);
            }
        }
        for (std::size_t i = 0; i < d; ++i) {
            num(i, m) = config.weight(i) * state.w(i, m) * state.u(i, m) * g(i, i);
        }
    }

    std::vector<double> scratch(ch);
    for (std::size_t i = 0; i < d; ++i) {
        auto power_at = [&](double lambda) {
            double total = 0.0;
            for (std::size_t m = 0; m < ch; ++m) {
                const double n = num(i, m);
                const double vm = n != 0.0 ? n / (den(i, m) + lambda) : 0.0;
                scratch[m] = vm;
                total += vm * vm;
            }
            return total;
        };

        double lambda = 0.0;
        if (power_at(0.0) > config.p_max) {
            double hi = 1.0;
            while (power_at(hi) > config.p_max) {
                hi *= 2.0;
                if (hi > 0x1p100) throw numeric_error("update_v: multiplier bracket blew up");
            }
            // Run the bracket down to floating-point resolution (the step cap
            // permitting). The objective excess of the accepted point is
            // bounded by 2 p_max (hi - lo), so exhausting the bracket keeps
            // this block update a descent step well below 1e-9, far inside
            // the documented budget-residual tolerance.
            double lo = 0.0;
            for (std::size_t step = 0; step < opts.bisect_max_steps; ++step) {
                const double mid = 0.5 * (lo + hi);
                if (mid <= lo || mid >= hi) break;
                if (power_at(mid) > config.p_max) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lambda = hi;
            power_at(hi);  // leave scratch at the accepted multiplier
        }
        state.lambda[i] = lambda;
        for (std::size_t m = 0; m < ch; ++m) {
            state.v(i, m) = scratch[m];
        }
    }
}

/// Weighted-MSE objective sum alpha (w e - log w) at the current iterates,
/// with J and e refreshed against the current v.
inline double wmmse_objective(WmmseState& state, const ChannelInstance& inst,
                              const NetworkConfig& config) {
    detail::received_energy(state.J, state.v, inst, config);
    double obj = 0.0;
    for (std::size_t m = 0; m < config.channels; ++m) {
        const Mat& g = inst.gains[m];
        for (std::size_t i = 0; i < config.pairs; ++i) {
            const double e = detail::mse(state.u(i, m), g(i, i), state.v(i, m), state.J(i, m));
            state.e(i, m) = e;
            obj += config.weight(i) * (state.w(i, m) * e - std::log(state.w(i, m)));
        }
    }
    return obj;
}

struct WmmseSolve {
    Allocation allocation;
    WmmseState state;
    std::size_t iterations = 0;
};

/// Full block-coordinate loop: equal-split start, (u, w, v) rounds until the
/// objective change falls below the relative tolerance.
inline WmmseSolve solve_ewmmse(const ChannelInstance& inst, const NetworkConfig& config,
                               const SolverOptions& opts = {}) {
    config.validate();
    opts.validate();
    const std::size_t d = config.pairs;
    const std::size_t ch = config.channels;

    WmmseSolve out;
    WmmseState& state = out.state;
    state.v = Mat(d, ch, std::sqrt(config.p_max / static_cast<double>(ch)));
    state.u = Mat(d, ch);
    state.w = Mat(d, ch, 1.0);
    state.e = Mat(d, ch, 1.0);
    state.J = Mat(d, ch);
    state.lambda.assign(d, 0.0);

    double prev_obj = 0.0;
    for (std::size_t iter = 0; iter < opts.max_iters; ++iter) {
        update_u(state, inst, config);
        update_w(state, inst, config);
        update_v(state, inst, config, opts);
        const double obj = wmmse_objective(state, inst, config);
        state.objective_trace.push_back(obj);
        out.iterations = iter + 1;
        if (iter > 0 && std::abs(obj - prev_obj) <= opts.rel_tol * std::max(1.0, std::abs(obj))) {
            break;
        }
        prev_obj = obj;
    }

    Mat power(d, ch);
    for (std::size_t k = 0; k < power.size(); ++k) {
        power.data[k] = state.v.data[k] * state.v.data[k];
    }
    out.allocation = Allocation::from_power(std::move(power), config);
    return out;
}

}  // namespace mcra
