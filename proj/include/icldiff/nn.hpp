#pragma once

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"

namespace icl {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

/// Parameter container with hierarchical names ("down.0.res.0.conv1.weight").
template <typename T>
class Module {
public:
    virtual ~Module() = default;

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        for (auto& [n, p] : params_) {
            out.emplace_back(prefix + n, p);
        }
        for (auto& [n, m] : children_) {
            m->collect(prefix + n + ".", out);
        }
    }

    NamedParams<T> named_parameters(const std::string& prefix = "") const {
        NamedParams<T> out;
        collect(prefix, out);
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto& [n, p] : named_parameters()) {
            p.set_requires_grad(trainable);
        }
    }

protected:
    Var<T> param(const std::string& name, Tensor<T> init) {
        Var<T> v(std::move(init), true);
        params_.emplace_back(name, v);
        return v;
    }

    template <typename M>
    std::shared_ptr<M> child(const std::string& name, std::shared_ptr<M> m) {
        children_.emplace_back(name, m);
        return m;
    }

private:
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::vector<std::pair<std::string, std::shared_ptr<Module<T>>>> children_;
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) {
        v = static_cast<T>(rng.uniform(-bound, bound));
    }
    return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) {
        v = static_cast<T>(rng.normal() * stddev);
    }
    return t;
}

/// Largest group count <= preferred that divides channels.
inline int norm_groups(int64_t channels, int preferred) {
    return static_cast<int>(std::gcd(channels, static_cast<int64_t>(preferred)));
}

template <typename T>
class Linear : public Module<T> {
public:
    Linear(int64_t in, int64_t out, Rng& rng, bool bias = true, bool zero = false) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight = this->param("weight", zero ? Tensor<T>({out, in}) : uniform_tensor<T>({out, in}, bound, rng));
        if (bias) {
            this->bias = this->param("bias", zero ? Tensor<T>({out}) : uniform_tensor<T>({out}, bound, rng));
        }
    }

    Var<T> forward(const Var<T>& x) const { return linear(x, weight, bias); }

    Var<T> weight;
    Var<T> bias;
};

template <typename T>
class Conv2d : public Module<T> {
public:
    Conv2d(int64_t in, int64_t out, int k, Rng& rng, int stride = 1, int pad = -1, bool zero = false)
        : stride_(stride), pad_(pad < 0 ? k / 2 : pad) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
        weight = this->param("weight", zero ? Tensor<T>({out, in, k, k}) : uniform_tensor<T>({out, in, k, k}, bound, rng));
        bias   = this->param("bias", zero ? Tensor<T>({out}) : uniform_tensor<T>({out}, bound, rng));
    }

    Var<T> forward(const Var<T>& x) const { return conv2d(x, weight, bias, stride_, pad_); }

    Var<T> weight;
    Var<T> bias;

private:
    int stride_;
    int pad_;
};

template <typename T>
class GroupNorm : public Module<T> {
public:
    GroupNorm(int64_t channels, int groups) : groups_(groups) {
        weight = this->param("weight", Tensor<T>({channels}, T(1)));
        bias   = this->param("bias", Tensor<T>({channels}));
    }

    Var<T> forward(const Var<T>& x) const { return group_norm(x, weight, bias, groups_); }

    Var<T> weight;
    Var<T> bias;

private:
    int groups_;
};

template <typename T>
class LayerNorm : public Module<T> {
public:
    explicit LayerNorm(int64_t channels) {
        weight = this->param("weight", Tensor<T>({channels}, T(1)));
        bias   = this->param("bias", Tensor<T>({channels}));
    }

    Var<T> forward(const Var<T>& x) const { return layer_norm(x, weight, bias); }

    Var<T> weight;
    Var<T> bias;
};

/// Multi-head attention from queries of width dim to keys/values of width kv_dim.
template <typename T>
class MultiHeadAttention : public Module<T> {
public:
    MultiHeadAttention(int64_t dim, int64_t kv_dim, int heads, Rng& rng) : heads_(heads) {
        q = this->child("q", std::make_shared<Linear<T>>(dim, dim, rng, false));
        k = this->child("k", std::make_shared<Linear<T>>(kv_dim, dim, rng, false));
        v = this->child("v", std::make_shared<Linear<T>>(kv_dim, dim, rng, false));
        o = this->child("o", std::make_shared<Linear<T>>(dim, dim, rng));
    }

    // x: [B, Lq, dim], ctx: [B, Lk, kv_dim]
    Var<T> forward(const Var<T>& x, const Var<T>& ctx) const {
        return o->forward(attention(q->forward(x), k->forward(ctx), v->forward(ctx), heads_));
    }

    std::shared_ptr<Linear<T>> q, k, v, o;

private:
    int heads_;
};

/// Pre-norm transformer encoder block, bidirectional.
template <typename T>
class TransformerBlock : public Module<T> {
public:
    TransformerBlock(int64_t dim, int heads, Rng& rng, int mlp_ratio = 4) {
        ln1  = this->child("ln1", std::make_shared<LayerNorm<T>>(dim));
        attn = this->child("attn", std::make_shared<MultiHeadAttention<T>>(dim, dim, heads, rng));
        ln2  = this->child("ln2", std::make_shared<LayerNorm<T>>(dim));
        fc1  = this->child("fc1", std::make_shared<Linear<T>>(dim, dim * mlp_ratio, rng));
        fc2  = this->child("fc2", std::make_shared<Linear<T>>(dim * mlp_ratio, dim, rng));
    }

    Var<T> forward(const Var<T>& x) const {
        auto h = ln1->forward(x);
        auto y = add(x, attn->forward(h, h));
        return add(y, fc2->forward(gelu(fc1->forward(ln2->forward(y)))));
    }

    std::shared_ptr<LayerNorm<T>> ln1, ln2;
    std::shared_ptr<MultiHeadAttention<T>> attn;
    std::shared_ptr<Linear<T>> fc1, fc2;
};

/// GN -> SiLU -> conv -> +temb -> GN -> SiLU -> conv, plus a 1x1 skip when widths differ.
template <typename T>
class ResBlock : public Module<T> {
public:
    ResBlock(int64_t in, int64_t out, int64_t temb_dim, int groups, Rng& rng) {
        norm1     = this->child("norm1", std::make_shared<GroupNorm<T>>(in, norm_groups(in, groups)));
        conv1     = this->child("conv1", std::make_shared<Conv2d<T>>(in, out, 3, rng));
        temb_proj = this->child("temb", std::make_shared<Linear<T>>(temb_dim, out, rng));
        norm2     = this->child("norm2", std::make_shared<GroupNorm<T>>(out, norm_groups(out, groups)));
        conv2     = this->child("conv2", std::make_shared<Conv2d<T>>(out, out, 3, rng));
        if (in != out) {
            skip = this->child("skip", std::make_shared<Conv2d<T>>(in, out, 1, rng, 1, 0));
        }
    }

    // x: [N, in, h, w], temb: [N, temb_dim] (already activated)
    Var<T> forward(const Var<T>& x, const Var<T>& temb) const {
        auto h = conv1->forward(silu(norm1->forward(x)));
        h      = add_channel(h, temb_proj->forward(temb));
        h      = conv2->forward(silu(norm2->forward(h)));
        return add(skip ? skip->forward(x) : x, h);
    }

    std::shared_ptr<GroupNorm<T>> norm1, norm2;
    std::shared_ptr<Conv2d<T>> conv1, conv2, skip;
    std::shared_ptr<Linear<T>> temb_proj;
};

/// Residual cross-attention from spatial features to a token sequence.
template <typename T>
class SpatialCrossAttention : public Module<T> {
public:
    SpatialCrossAttention(int64_t channels, int64_t ctx_dim, int heads, int groups, Rng& rng) {
        norm = this->child("norm", std::make_shared<GroupNorm<T>>(channels, norm_groups(channels, groups)));
        attn = this->child("attn", std::make_shared<MultiHeadAttention<T>>(channels, ctx_dim, heads, rng));
    }

    // x: [N, C, h, w], ctx: [N, L, ctx_dim]
    Var<T> forward(const Var<T>& x, const Var<T>& ctx) const {
        const auto& s = x.shape();
        auto tokens   = nchw_to_nlc(norm->forward(x));  // [N, h*w, C]
        return add(x, nlc_to_nchw(attn->forward(tokens, ctx), s[2], s[3]));
    }

    std::shared_ptr<GroupNorm<T>> norm;
    std::shared_ptr<MultiHeadAttention<T>> attn;
};

/// Sinusoidal embedding of integer timesteps: [B, dim] with cos in the first half, sin in the second.
template <typename T>
Tensor<T> timestep_embedding(const std::vector<int>& ts, int64_t dim, double max_period = 10000.0) {
    const int64_t half = dim / 2;
    Tensor<T> out({static_cast<int64_t>(ts.size()), dim});
    for (size_t b = 0; b < ts.size(); b++) {
        for (int64_t i = 0; i < half; i++) {
            const double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
            const double a    = ts[b] * freq;
            out[static_cast<int64_t>(b) * dim + i]        = static_cast<T>(std::cos(a));
            out[static_cast<int64_t>(b) * dim + half + i] = static_cast<T>(std::sin(a));
        }
    }
    return out;
}

}  // namespace icl
