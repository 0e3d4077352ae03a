#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "icldiff/icldiff.hpp"

namespace icl::testing {

/// 16x16 config used by the learning checks.
inline RunConfig tiny_run_config() {
    RunConfig rc;
    rc.corpus.image_size       = 16;
    rc.model.d                 = 64;
    rc.model.text.layers       = 2;
    rc.model.text.heads        = 4;
    rc.model.context.patch     = 4;
    rc.model.context.width     = 64;
    rc.model.context.depth     = 2;
    rc.model.context.heads     = 4;
    rc.model.unet.base         = 32;
    rc.model.unet.mult         = {1, 2};
    rc.model.unet.res_blocks   = 1;
    rc.model.unet.attn_levels  = 2;
    rc.model.unet.heads        = 4;
    rc.model.unet.temb_dim     = 64;
    rc.diffusion.sample_steps  = 20;
    rc.train.batch_size        = 16;
    rc.train.optim.lr          = 1e-3;
    rc.train.log_every         = 10;
    rc.eval.n                  = 64;
    return rc;
}

/// Very small model for exact-arithmetic and gradient checks: 8x8 images, base width 8, one level.
inline ModelConfig micro_model_config(VcMode mode = VcMode::placeholder) {
    ModelConfig m;
    m.image_size       = 8;
    m.d                = 16;
    m.vc_mode          = mode;
    m.text.layers      = 1;
    m.text.heads       = 2;
    m.text.max_len     = 16;
    m.context.patch    = 4;
    m.context.width    = 16;
    m.context.depth    = 1;
    m.context.heads    = 2;
    m.unet.base        = 8;
    m.unet.mult        = {1};
    m.unet.res_blocks  = 1;
    m.unet.attn_levels = 1;
    m.unet.heads       = 2;
    m.unet.temb_dim    = 16;
    m.unet.groups      = 4;
    m.unet.timesteps   = 1000;
    return m;
}

/// Run config around the micro model; a training step takes milliseconds.
inline RunConfig micro_run_config(Stage stage = Stage::A) {
    RunConfig rc;
    const ModelConfig m    = micro_model_config();
    rc.corpus.image_size   = m.image_size;
    rc.model               = m;
    rc.diffusion.sample_steps = 4;
    rc.train.stage         = stage;
    rc.train.steps         = 3;
    rc.train.batch_size    = 2;
    rc.train.log_every     = 1;
    rc.train.optim.lr      = 1e-3;
    rc.eval.n              = 4;
    rc.eval.batch          = 4;
    rc.eval.probe_m        = 4;
    return rc;
}

inline CorpusConfig corpus_of_size(int size) {
    CorpusConfig c;
    c.image_size = size;
    return c;
}

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
    Tensor<double> t(s);
    for (auto& v : t.data) {
        v = rng.normal() * scale;
    }
    return t;
}

struct GradCheckResult {
    std::string worst_tensor;
    double worst_rel_error = 0;
    int64_t checked        = 0;  // elements compared (|g| above the floor)
    int tensors            = 0;  // tensors with at least one compared element
    std::vector<std::string> failures;
};

/// Central finite differences against the analytic gradient for every listed tensor.
/// Up to max_per_tensor elements per tensor are probed, spread evenly over the tensor.
inline GradCheckResult gradient_check(const NamedParams<double>& params, const std::function<Var<double>()>& loss_fn,
                                      int max_per_tensor = 64, double h = 1e-6, double tol = 1e-2, double floor = 1e-6) {
    for (auto& [n, p] : params) {
        auto pp = p;
        pp.zero_grad();
    }
    loss_fn().backward();
    GradCheckResult res;
    for (auto& [name, p] : params) {
        Var<double> v = p;
        const Tensor<double> g = v.has_grad() ? v.grad() : Tensor<double>(v.shape());
        const int64_t n        = v.size();
        const int64_t count    = std::min<int64_t>(n, max_per_tensor);
        bool any               = false;
        for (int64_t c = 0; c < count; c++) {
            const int64_t i   = count == n ? c : (c * n) / count;
            const double orig = v.value()[i];
            v.mutable_value()[i] = orig + h;
            double lp;
            double lm;
            {
                NoGradGuard ng;
                lp                   = loss_fn().value()[0];
                v.mutable_value()[i] = orig - h;
                lm                   = loss_fn().value()[0];
            }
            v.mutable_value()[i] = orig;
            const double num     = (lp - lm) / (2 * h);
            const double ana     = g[i];
            if (std::abs(ana) <= floor && std::abs(num) <= floor) {
                continue;
            }
            if (std::abs(ana) <= floor) {
                continue;
            }
            any = true;
            res.checked++;
            const double rel = std::abs(ana - num) / std::max(std::abs(ana), std::abs(num));
            if (rel > res.worst_rel_error) {
                res.worst_rel_error = rel;
                res.worst_tensor    = name + "[" + std::to_string(i) + "]";
            }
            if (rel > tol) {
                res.failures.push_back(name + "[" + std::to_string(i) + "] analytic " + std::to_string(ana) + " numeric " +
                                       std::to_string(num));
            }
        }
        res.tensors += any;
    }
    return res;
}

/// Builds a fixed two-item stage-B batch and returns a closure computing its training loss.
inline std::function<Var<double>()> micro_loss(const IclModel<double>& model, uint64_t seed, bool with_hint) {
    const auto& mc = model.config();
    CorpusConfig cc = corpus_of_size(mc.image_size);
    cc.min_shape_size = 2;
    cc.max_shape_size = 4;
    Rng rng(seed);
    std::vector<CondRequest> reqs;
    std::vector<DatasetItem> items;
    const TaskSpec tasks[2] = {TaskSpec::parse("img2edge"), TaskSpec::parse("depth2img")};
    for (int b = 0; b < 2; b++) {
        items.push_back(make_item(rng, tasks[b], 1 + b, cc));
        CondRequest r;
        r.prompt          = items.back().caption;
        r.context         = items.back().context;
        r.context_dropped = !model.context;
        if (with_hint) {
            r.hint = items.back().query;
        }
        reqs.push_back(r);
    }
    std::vector<const Image*> tg = {&items[0].target, &items[1].target};
    auto x0                      = stack_model_space<double>(tg);
    auto eps                     = random_tensor(x0.shape, rng);
    std::vector<int> ts          = {37, 640};
    auto sched                   = std::make_shared<Schedule>(make_schedule(mc.unet.timesteps));
    return [&model, reqs, x0, eps, ts, sched]() {
        auto cond = model.condition(reqs);
        return training_loss(*sched, x0, ts, eps, [&](const Tensor<double>& z, const std::vector<int>& t) {
            return model.predict(constant(z), t, cond);
        });
    };
}

/// Overwrites every zero conv of the control branch with small random values.
template <typename T>
void randomize_zero_convs(ControlNet<T>& c, Rng& rng) {
    auto fill = [&](Conv2d<T>& conv) {
        for (auto* p : {&conv.weight, &conv.bias}) {
            for (auto& v : p->mutable_value().data) {
                v = static_cast<T>(rng.normal() * 0.1);
            }
        }
    };
    for (auto& z : c.zero) {
        fill(*z);
    }
    fill(*c.zero_mid);
    fill(*c.hint.back());
}

inline bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape == b.shape && std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace icl::testing
