#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nn.hpp"

namespace icl {

struct AdamWConfig {
    double lr           = 1e-4;
    double beta1        = 0.9;
    double beta2        = 0.999;
    double eps          = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled weight decay: p -= lr * wd * p, then the bias-corrected Adam step.
template <typename T>
class AdamW {
public:
    AdamW(NamedParams<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto& [n, p] : params_) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    int64_t steps() const { return t_; }

    void zero_grad() {
        for (auto& [n, p] : params_) {
            p.zero_grad();
        }
    }

    /// Parameters without a gradient this step are left untouched (their moments too).
    void step() {
        t_++;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); i++) {
            Var<T>& p = params_[i].second;
            if (!p.has_grad()) {
                continue;
            }
            Tensor<T>& w       = p.mutable_value();
            const Tensor<T>& g = p.grad();
            Tensor<T>& m       = m_[i];
            Tensor<T>& v       = v_[i];
            for (int64_t j = 0; j < w.size(); j++) {
                const double gj = static_cast<double>(g[j]);
                double mj       = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * gj;
                double vj       = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * gj * gj;
                m[j]            = static_cast<T>(mj);
                v[j]            = static_cast<T>(vj);
                double wj       = static_cast<double>(w[j]) * (1.0 - cfg_.lr * cfg_.weight_decay);
                wj -= cfg_.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
                w[j] = static_cast<T>(wj);
            }
        }
    }

private:
    NamedParams<T> params_;
    AdamWConfig cfg_;
    std::vector<Tensor<T>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace icl
