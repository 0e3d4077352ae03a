#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "errors.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace icl {

enum class ScheduleKind { linear };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "linear") {
        return ScheduleKind::linear;
    }
    throw ConfigError("unknown schedule kind '" + s + "'");
}

/// Index t runs over [0, T]; beta[0] is unused and alpha_bar[0] = 1.
struct Schedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
};

inline Schedule make_schedule(int T, ScheduleKind kind = ScheduleKind::linear, double beta_start = 1e-4,
                              double beta_end = 0.02) {
    if (T < 1) {
        throw std::invalid_argument("make_schedule: T must be >= 1, got " + std::to_string(T));
    }
    (void)kind;
    Schedule s;
    s.T = T;
    s.beta.assign(static_cast<size_t>(T) + 1, 0.0);
    s.alpha.assign(static_cast<size_t>(T) + 1, 1.0);
    s.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
    for (int t = 1; t <= T; t++) {
        const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        s.beta[static_cast<size_t>(t)]      = b;
        s.alpha[static_cast<size_t>(t)]     = 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = s.alpha_bar[static_cast<size_t>(t) - 1] * (1.0 - b);
    }
    return s;
}

/// z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per batch item. x0, eps: [B, ...].
template <typename T>
Tensor<T> q_sample(const Schedule& s, const Tensor<T>& x0, const std::vector<int>& ts, const Tensor<T>& eps) {
    check_shape(x0.shape == eps.shape, "q_sample: x0 " + shape_str(x0.shape) + " vs eps " + shape_str(eps.shape));
    check_shape(x0.rank() >= 1 && static_cast<int64_t>(ts.size()) == x0.dim(0), "q_sample: one timestep per item");
    Tensor<T> z(x0.shape);
    const int64_t per = x0.size() / x0.dim(0);
    for (size_t b = 0; b < ts.size(); b++) {
        const int t = ts[b];
        if (t < 0 || t > s.T) {
            throw std::out_of_range("q_sample: timestep " + std::to_string(t) + " outside [0, " + std::to_string(s.T) + "]");
        }
        const double ab = s.alpha_bar[static_cast<size_t>(t)];
        const T a = static_cast<T>(std::sqrt(ab)), c = static_cast<T>(std::sqrt(1.0 - ab));
        for (int64_t i = static_cast<int64_t>(b) * per; i < static_cast<int64_t>(b + 1) * per; i++) {
            z[i] = t == 0 ? x0[i] : a * x0[i] + c * eps[i];
        }
    }
    return z;
}

/// Mean squared error between eps and predict(z_t, ts). A non-finite loss raises with the ids of
/// the items whose own error is non-finite.
template <typename T, typename Predict>
Var<T> training_loss(const Schedule& s, const Tensor<T>& x0, const std::vector<int>& ts, const Tensor<T>& eps,
                     Predict&& predict, const std::vector<std::string>& ids = {}) {
    Var<T> pred = predict(q_sample(s, x0, ts, eps), ts);
    check_shape(pred.shape() == eps.shape, "training_loss: prediction " + shape_str(pred.shape()) + " vs noise " +
                                               shape_str(eps.shape));
    Var<T> loss = mse_loss(pred, eps);
    if (!std::isfinite(static_cast<double>(loss.value()[0]))) {
        const int64_t B = eps.dim(0), per = eps.size() / B;
        std::string bad;
        for (int64_t b = 0; b < B; b++) {
            double e = 0;
            for (int64_t i = b * per; i < (b + 1) * per; i++) {
                const double d = static_cast<double>(pred.value()[i]) - static_cast<double>(eps[i]);
                e += d * d;
            }
            if (!std::isfinite(e)) {
                bad += (bad.empty() ? "" : ", ") +
                       (static_cast<size_t>(b) < ids.size() ? ids[static_cast<size_t>(b)] : "#" + std::to_string(b));
            }
        }
        throw NonFiniteLossError("non-finite loss; offending items: " + (bad.empty() ? std::string("unknown") : bad));
    }
    return loss;
}

template <typename T>
Tensor<T> cfg_noise(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double s) {
    check_shape(eps_cond.shape == eps_uncond.shape, "cfg_noise: shape mismatch " + shape_str(eps_cond.shape) + " vs " +
                                                        shape_str(eps_uncond.shape));
    if (s == 1.0) {
        return eps_cond;  // u + (c - u) is not c in floating point
    }
    Tensor<T> out(eps_cond.shape);
    const T st = static_cast<T>(s);
    for (int64_t i = 0; i < out.size(); i++) {
        out[i] = eps_uncond[i] + st * (eps_cond[i] - eps_uncond[i]);
    }
    return out;
}

/// Evenly spaced visited timesteps in decreasing order, ending at the smallest.
inline std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) {
        throw std::out_of_range("ddim: steps " + std::to_string(steps) + " outside [1, " + std::to_string(T) + "]");
    }
    std::vector<int> ts;
    for (int i = steps - 1; i >= 0; i--) {
        ts.push_back(static_cast<int>(std::lround(static_cast<double>(i + 1) * T / steps)));
    }
    return ts;
}

/// Standard normal initial noise for a batch; item b draws from its own seed so items are independent
/// of batch composition.
template <typename T>
Tensor<T> initial_noise(const Shape& shape, const std::vector<uint64_t>& seeds) {
    check_shape(!shape.empty() && static_cast<int64_t>(seeds.size()) == shape[0], "initial_noise: one seed per item");
    Tensor<T> x(shape);
    const int64_t per = x.size() / shape[0];
    for (size_t b = 0; b < seeds.size(); b++) {
        Rng rng(derive_seed(seeds[b], "ddim/noise"));
        for (int64_t i = 0; i < per; i++) {
            x[static_cast<int64_t>(b) * per + i] = static_cast<T>(rng.normal());
        }
    }
    return x;
}

/// Deterministic DDIM (eta = 0) with classifier-free guidance. eps_cond / eps_uncond map
/// (z_t, t) -> eps prediction; eps_uncond is never called when s == 1. x_T is supplied by the caller.
/// Returns the final sample mapped to [0, 1].
template <typename T>
Tensor<T> ddim_sample(const Schedule& s, Tensor<T> x, int steps, double scale,
                      const std::function<Tensor<T>(const Tensor<T>&, int)>& eps_cond,
                      const std::function<Tensor<T>(const Tensor<T>&, int)>& eps_uncond) {
    const auto ts = ddim_timesteps(s.T, steps);
    for (size_t i = 0; i < ts.size(); i++) {
        const int t      = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        Tensor<T> ec     = eps_cond(x, t);
        check_shape(ec.shape == x.shape, "ddim: prediction shape " + shape_str(ec.shape));
        Tensor<T> eps = scale == 1.0 ? std::move(ec) : cfg_noise(ec, eps_uncond(x, t), scale);
        const double ab = s.alpha_bar[static_cast<size_t>(t)], ab_prev = s.alpha_bar[static_cast<size_t>(t_prev)];
        const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        const double sap = std::sqrt(ab_prev), sbp = std::sqrt(1.0 - ab_prev);
        for (int64_t j = 0; j < x.size(); j++) {
            double x0 = (static_cast<double>(x[j]) - sb * static_cast<double>(eps[j])) / sa;
            x0        = std::clamp(x0, -1.0, 1.0);
            x[j]      = static_cast<T>(sap * x0 + sbp * static_cast<double>(eps[j]));
        }
    }
    for (auto& v : x.data) {
        v = std::clamp((v + T(1)) / T(2), T(0), T(1));
    }
    return x;
}

}  // namespace icl
