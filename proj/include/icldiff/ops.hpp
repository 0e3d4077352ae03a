#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <type_traits>
#include <vector>

#include "autograd.hpp"

// Differentiable operations over Var<T>. Layouts are row-major; images are [N, C, H, W],
// token sequences [B, L, C].

namespace icl {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Var<T> constant(Tensor<T> t) {
    return Var<T>(std::move(t), false);
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_shape(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.value().ptr();
    const T* pb = b.value().ptr();
    for (int64_t i = 0; i < out.size(); i++) {
        out[i] = pa[i] + pb[i];
    }
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
        const T* g = n.grad.ptr();
        for (size_t k = 0; k < 2; k++) {
            if (T* gp = parent_grad(n, k)) {
                for (int64_t i = 0; i < n.grad.size(); i++) {
                    gp[i] += g[i];
                }
            }
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_shape(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.size(); i++) {
        out[i] = a.value()[i] - b.value()[i];
    }
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
        const T* g = n.grad.ptr();
        if (T* ga = parent_grad(n, 0)) {
            for (int64_t i = 0; i < n.grad.size(); i++) {
                ga[i] += g[i];
            }
        }
        if (T* gb = parent_grad(n, 1)) {
            for (int64_t i = 0; i < n.grad.size(); i++) {
                gb[i] -= g[i];
            }
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_shape(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.size(); i++) {
        out[i] = a.value()[i] * b.value()[i];
    }
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
        const T* g  = n.grad.ptr();
        const T* va = n.parents[0]->value.ptr();
        const T* vb = n.parents[1]->value.ptr();
        if (T* ga = parent_grad(n, 0)) {
            for (int64_t i = 0; i < n.grad.size(); i++) {
                ga[i] += g[i] * vb[i];
            }
        }
        if (T* gb = parent_grad(n, 1)) {
            for (int64_t i = 0; i < n.grad.size(); i++) {
                gb[i] += g[i] * va[i];
            }
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.size(); i++) {
        out[i] = a.value()[i] * s;
    }
    return make_result<T>(std::move(out), {a}, [s](Node<T>& n) {
        if (T* ga = parent_grad(n, 0)) {
            for (int64_t i = 0; i < n.grad.size(); i++) {
                ga[i] += n.grad[i] * s;
            }
        }
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.size(); i++) {
        T x    = a.value()[i];
        out[i] = x / (T(1) + std::exp(-x));
    }
    return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
        if (T* ga = parent_grad(n, 0)) {
            const T* x = n.parents[0]->value.ptr();
            for (int64_t i = 0; i < n.grad.size(); i++) {
                T s = T(1) / (T(1) + std::exp(-x[i]));
                ga[i] += n.grad[i] * s * (T(1) + x[i] * (T(1) - s));
            }
        }
    });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    const T inv_sqrt2 = T(0.70710678118654752440);
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < out.size(); i++) {
        T x    = a.value()[i];
        out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }
    return make_result<T>(std::move(out), {a}, [inv_sqrt2](Node<T>& n) {
        if (T* ga = parent_grad(n, 0)) {
            const T inv_sqrt2pi = T(0.39894228040143267794);
            const T* x          = n.parents[0]->value.ptr();
            for (int64_t i = 0; i < n.grad.size(); i++) {
                T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
                T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
                ga[i] += n.grad[i] * (cdf + x[i] * pdf);
            }
        }
    });
}

/// x + p where p's shape equals the trailing dims of x (positional tables, per-feature offsets).
template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& p) {
    const auto& xs = x.shape();
    const auto& ps = p.shape();
    check_shape(ps.size() <= xs.size() && std::equal(ps.begin(), ps.end(), xs.end() - static_cast<long>(ps.size())),
                "add_broadcast: " + shape_str(ps) + " is not a suffix of " + shape_str(xs));
    const int64_t inner = p.size();
    Tensor<T> out(xs);
    for (int64_t i = 0; i < out.size(); i++) {
        out[i] = x.value()[i] + p.value()[i % inner];
    }
    return make_result<T>(std::move(out), {x, p}, [inner](Node<T>& n) {
        const T* g = n.grad.ptr();
        if (T* gx = parent_grad(n, 0)) {
            for (int64_t i = 0; i < n.grad.size(); i++) {
                gx[i] += g[i];
            }
        }
        if (T* gp = parent_grad(n, 1)) {
            for (int64_t i = 0; i < n.grad.size(); i++) {
                gp[i % inner] += g[i];
            }
        }
    });
}

/// x [N, C, ...] + e [N, C] broadcast over the trailing spatial dims.
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& e) {
    const auto& xs = x.shape();
    check_shape(xs.size() >= 2 && e.shape() == Shape{xs[0], xs[1]},
                "add_channel: expected [N, C] offset for " + shape_str(xs) + ", got " + shape_str(e.shape()));
    const int64_t nc    = xs[0] * xs[1];
    const int64_t inner = x.size() / nc;
    Tensor<T> out(xs);
    for (int64_t j = 0; j < nc; j++) {
        for (int64_t i = 0; i < inner; i++) {
            out[j * inner + i] = x.value()[j * inner + i] + e.value()[j];
        }
    }
    return make_result<T>(std::move(out), {x, e}, [nc, inner](Node<T>& n) {
        const T* g = n.grad.ptr();
        if (T* gx = parent_grad(n, 0)) {
            for (int64_t i = 0; i < n.grad.size(); i++) {
                gx[i] += g[i];
            }
        }
        if (T* ge = parent_grad(n, 1)) {
            for (int64_t j = 0; j < nc; j++) {
                T s = 0;
                for (int64_t i = 0; i < inner; i++) {
                    s += g[j * inner + i];
                }
                ge[j] += s;
            }
        }
    });
}

// ---------------------------------------------------------------- shape plumbing

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    check_shape(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {x}, [](Node<T>& n) {
        if (T* gx = parent_grad(n, 0)) {
            for (int64_t i = 0; i < n.grad.size(); i++) {
                gx[i] += n.grad[i];
            }
        }
    });
}

/// [N, A, B] -> [N, B, A]
template <typename T>
Var<T> swap_last2(const Var<T>& x) {
    check_shape(x.shape().size() == 3, "swap_last2: expected rank 3, got " + shape_str(x.shape()));
    const int64_t N = x.shape()[0], A = x.shape()[1], B = x.shape()[2];
    Tensor<T> out({N, B, A});
    for (int64_t n = 0; n < N; n++) {
        CMatMap<T> src(x.value().ptr() + n * A * B, A, B);
        MatMap<T> dst(out.ptr() + n * A * B, B, A);
        dst = src.transpose();
    }
    return make_result<T>(std::move(out), {x}, [N, A, B](Node<T>& n) {
        if (T* gx = parent_grad(n, 0)) {
            for (int64_t b = 0; b < N; b++) {
                CMatMap<T> g(n.grad.ptr() + b * A * B, B, A);
                MatMap<T> dst(gx + b * A * B, A, B);
                dst += g.transpose();
            }
        }
    });
}

/// [N, C, H, W] -> [N, H*W, C]
template <typename T>
Var<T> nchw_to_nlc(const Var<T>& x) {
    const auto& s = x.shape();
    check_shape(s.size() == 4, "nchw_to_nlc: expected rank 4, got " + shape_str(s));
    return swap_last2(reshape(x, {s[0], s[1], s[2] * s[3]}));
}

/// [N, H*W, C] -> [N, C, H, W]
template <typename T>
Var<T> nlc_to_nchw(const Var<T>& x, int64_t H, int64_t W) {
    const auto& s = x.shape();
    check_shape(s.size() == 3 && s[1] == H * W, "nlc_to_nchw: bad shape " + shape_str(s));
    return reshape(swap_last2(x), {s[0], s[2], H, W});
}

/// Concatenate along dim 1.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    check_shape(sa.size() >= 2 && sa.size() == sb.size() && sa[0] == sb[0] &&
                    std::equal(sa.begin() + 2, sa.end(), sb.begin() + 2),
                "concat_channels: incompatible " + shape_str(sa) + " and " + shape_str(sb));
    const int64_t N     = sa[0];
    const int64_t ia    = a.size() / N;
    const int64_t ib    = b.size() / N;
    Shape so            = sa;
    so[1]               = sa[1] + sb[1];
    Tensor<T> out(so);
    for (int64_t n = 0; n < N; n++) {
        std::copy_n(a.value().ptr() + n * ia, ia, out.ptr() + n * (ia + ib));
        std::copy_n(b.value().ptr() + n * ib, ib, out.ptr() + n * (ia + ib) + ia);
    }
    return make_result<T>(std::move(out), {a, b}, [N, ia, ib](Node<T>& n) {
        const T* g = n.grad.ptr();
        if (T* ga = parent_grad(n, 0)) {
            for (int64_t k = 0; k < N; k++) {
                for (int64_t i = 0; i < ia; i++) {
                    ga[k * ia + i] += g[k * (ia + ib) + i];
                }
            }
        }
        if (T* gb = parent_grad(n, 1)) {
            for (int64_t k = 0; k < N; k++) {
                for (int64_t i = 0; i < ib; i++) {
                    gb[k * ib + i] += g[k * (ia + ib) + ia + i];
                }
            }
        }
    });
}

/// Nearest-neighbour 2x upsampling of [N, C, H, W].
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    const auto& s = x.shape();
    check_shape(s.size() == 4, "upsample2x: expected rank 4, got " + shape_str(s));
    const int64_t NC = s[0] * s[1], H = s[2], W = s[3];
    Tensor<T> out({s[0], s[1], 2 * H, 2 * W});
    for (int64_t c = 0; c < NC; c++) {
        const T* src = x.value().ptr() + c * H * W;
        T* dst       = out.ptr() + c * 4 * H * W;
        for (int64_t y = 0; y < 2 * H; y++) {
            for (int64_t xx = 0; xx < 2 * W; xx++) {
                dst[y * 2 * W + xx] = src[(y / 2) * W + xx / 2];
            }
        }
    }
    return make_result<T>(std::move(out), {x}, [NC, H, W](Node<T>& n) {
        if (T* gx = parent_grad(n, 0)) {
            for (int64_t c = 0; c < NC; c++) {
                const T* g = n.grad.ptr() + c * 4 * H * W;
                T* dst     = gx + c * H * W;
                for (int64_t y = 0; y < 2 * H; y++) {
                    for (int64_t xx = 0; xx < 2 * W; xx++) {
                        dst[(y / 2) * W + xx / 2] += g[y * 2 * W + xx];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------- dense layers

/// y = x W^T + b over the last dim of x; w is [out, in], b is [out] or undefined.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    check_shape(w.shape().size() == 2, "linear: weight must be rank 2, got " + shape_str(w.shape()));
    const int64_t in  = w.shape()[1];
    const int64_t out = w.shape()[0];
    check_shape(!x.shape().empty() && x.shape().back() == in,
                "linear: input " + shape_str(x.shape()) + " does not end in " + std::to_string(in));
    const bool has_bias = b.defined();
    if (has_bias) {
        check_shape(b.shape() == Shape{out}, "linear: bias shape " + shape_str(b.shape()));
    }
    const int64_t rows = x.size() / in;
    Shape so           = x.shape();
    so.back()          = out;
    Tensor<T> y(so);
    MatMap<T> Y(y.ptr(), rows, out);
    CMatMap<T> X(x.value().ptr(), rows, in);
    CMatMap<T> Wm(w.value().ptr(), out, in);
    Y.noalias() = X * Wm.transpose();
    if (has_bias) {
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b.value().ptr(), out);
        Y.rowwise() += bv;
    }
    std::vector<Var<T>> parents = {x, w};
    if (has_bias) {
        parents.push_back(b);
    }
    return make_result<T>(std::move(y), parents, [rows, in, out, has_bias](Node<T>& n) {
        CMatMap<T> G(n.grad.ptr(), rows, out);
        if (T* gx = parent_grad(n, 0)) {
            CMatMap<T> Wm(n.parents[1]->value.ptr(), out, in);
            MatMap<T>(gx, rows, in).noalias() += G * Wm;
        }
        if (T* gw = parent_grad(n, 1)) {
            CMatMap<T> X(n.parents[0]->value.ptr(), rows, in);
            MatMap<T>(gw, out, in).noalias() += G.transpose() * X;
        }
        if (has_bias) {
            if (T* gb = parent_grad(n, 2)) {
                // Plain loops: Eigen's vectorized sums split by address alignment, which would make
                // results depend on where the allocator put the buffer.
                const T* gp = n.grad.ptr();
                for (int64_t r = 0; r < rows; r++) {
                    for (int64_t o = 0; o < out; o++) {
                        gb[o] += gp[r * out + o];
                    }
                }
            }
        }
    });
}

namespace detail {

struct ConvGeom {
    int64_t N, C, H, W, O, kh, kw, stride, pad, Ho, Wo;
    int64_t ck() const { return C * kh * kw; }
    int64_t cols() const { return N * Ho * Wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const int64_t P  = g.Ho * g.Wo;
    const int64_t NP = g.N * P;
    for (int64_t c = 0; c < g.C; c++) {
        for (int64_t i = 0; i < g.kh; i++) {
            for (int64_t j = 0; j < g.kw; j++) {
                T* row = cols + ((c * g.kh + i) * g.kw + j) * NP;
                for (int64_t n = 0; n < g.N; n++) {
                    const T* xc = x + (n * g.C + c) * g.H * g.W;
                    for (int64_t oy = 0; oy < g.Ho; oy++) {
                        T* dst     = row + n * P + oy * g.Wo;
                        int64_t iy = oy * g.stride - g.pad + i;
                        if (iy < 0 || iy >= g.H) {
                            std::fill_n(dst, g.Wo, T(0));
                            continue;
                        }
                        for (int64_t ox = 0; ox < g.Wo; ox++) {
                            int64_t ix = ox * g.stride - g.pad + j;
                            dst[ox]    = (ix >= 0 && ix < g.W) ? xc[iy * g.W + ix] : T(0);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
    const int64_t P  = g.Ho * g.Wo;
    const int64_t NP = g.N * P;
    for (int64_t c = 0; c < g.C; c++) {
        for (int64_t i = 0; i < g.kh; i++) {
            for (int64_t j = 0; j < g.kw; j++) {
                const T* row = cols + ((c * g.kh + i) * g.kw + j) * NP;
                for (int64_t n = 0; n < g.N; n++) {
                    T* xc = dx + (n * g.C + c) * g.H * g.W;
                    for (int64_t oy = 0; oy < g.Ho; oy++) {
                        int64_t iy = oy * g.stride - g.pad + i;
                        if (iy < 0 || iy >= g.H) {
                            continue;
                        }
                        const T* src = row + n * P + oy * g.Wo;
                        for (int64_t ox = 0; ox < g.Wo; ox++) {
                            int64_t ix = ox * g.stride - g.pad + j;
                            if (ix >= 0 && ix < g.W) {
                                xc[iy * g.W + ix] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D convolution. x [N, C, H, W], w [O, C, kh, kw], b [O] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = 0) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    check_shape(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1],
                "conv2d: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
    detail::ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad, 0, 0};
    g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
    g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;
    check_shape(g.Ho > 0 && g.Wo > 0, "conv2d: empty output for input " + shape_str(xs));
    const bool has_bias = b.defined();
    if (has_bias) {
        check_shape(b.shape() == Shape{g.O}, "conv2d: bias shape " + shape_str(b.shape()));
    }
    const int64_t P = g.Ho * g.Wo;

    auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(g.ck() * g.cols()));
    detail::im2col(x.value().ptr(), g, cols->data());
    RowMat<T> M = CMatMap<T>(w.value().ptr(), g.O, g.ck()) * CMatMap<T>(cols->data(), g.ck(), g.cols());

    Tensor<T> y({g.N, g.O, g.Ho, g.Wo});
    for (int64_t n = 0; n < g.N; n++) {
        for (int64_t o = 0; o < g.O; o++) {
            T bias   = has_bias ? b.value()[o] : T(0);
            T* dst   = y.ptr() + (n * g.O + o) * P;
            const T* src = M.data() + o * g.cols() + n * P;
            for (int64_t p = 0; p < P; p++) {
                dst[p] = src[p] + bias;
            }
        }
    }
    std::vector<Var<T>> parents = {x, w};
    if (has_bias) {
        parents.push_back(b);
    }
    bool keep = grad_enabled() && (x.requires_grad() || w.requires_grad() || (has_bias && b.requires_grad()));
    if (!keep) {
        cols.reset();
    }
    return make_result<T>(std::move(y), parents, [g, P, has_bias, cols](Node<T>& n) {
        RowMat<T> G(g.O, g.cols());
        for (int64_t k = 0; k < g.N; k++) {
            for (int64_t o = 0; o < g.O; o++) {
                std::copy_n(n.grad.ptr() + (k * g.O + o) * P, P, G.data() + o * g.cols() + k * P);
            }
        }
        if (T* gw = parent_grad(n, 1)) {
            MatMap<T>(gw, g.O, g.ck()).noalias() += G * CMatMap<T>(cols->data(), g.ck(), g.cols()).transpose();
        }
        if (has_bias) {
            if (T* gb = parent_grad(n, 2)) {
                for (int64_t o = 0; o < g.O; o++) {
                    const T* row = G.data() + o * g.cols();
                    T acc        = T(0);
                    for (int64_t c = 0; c < g.cols(); c++) {
                        acc += row[c];
                    }
                    gb[o] += acc;
                }
            }
        }
        if (T* gx = parent_grad(n, 0)) {
            RowMat<T> dcols = CMatMap<T>(n.parents[1]->value.ptr(), g.O, g.ck()).transpose() * G;
            detail::col2im(dcols.data(), g, gx);
        }
    });
}

/// Group normalization over [N, C, ...] with per-channel affine.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
    const auto& s = x.shape();
    check_shape(s.size() >= 2 && s[1] % groups == 0, "group_norm: " + std::to_string(groups) + " groups do not divide " +
                                                         shape_str(s));
    const int64_t N = s[0], C = s[1];
    check_shape(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "group_norm: affine shape mismatch");
    const int64_t inner = x.size() / (N * C);
    const int64_t cpg   = C / groups;
    const int64_t m     = cpg * inner;
    auto xhat           = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
    auto rstd           = std::make_shared<std::vector<T>>(static_cast<size_t>(N * groups));
    Tensor<T> y(s);
    const T* xv = x.value().ptr();
    for (int64_t n = 0; n < N; n++) {
        for (int64_t gi = 0; gi < groups; gi++) {
            const int64_t off = (n * C + gi * cpg) * inner;
            T mean            = 0;
            for (int64_t i = 0; i < m; i++) {
                mean += xv[off + i];
            }
            mean /= T(m);
            T var = 0;
            for (int64_t i = 0; i < m; i++) {
                T d = xv[off + i] - mean;
                var += d * d;
            }
            var /= T(m);
            T r                                   = T(1) / std::sqrt(var + eps);
            (*rstd)[static_cast<size_t>(n * groups + gi)] = r;
            for (int64_t c = 0; c < cpg; c++) {
                const int64_t ch = gi * cpg + c;
                const T ga = gamma.value()[ch], be = beta.value()[ch];
                for (int64_t i = 0; i < inner; i++) {
                    const int64_t idx                 = off + c * inner + i;
                    T h                               = (xv[idx] - mean) * r;
                    (*xhat)[static_cast<size_t>(idx)] = h;
                    y[idx]                            = h * ga + be;
                }
            }
        }
    }
    return make_result<T>(std::move(y), {x, gamma, beta}, [=](Node<T>& nd) {
        const T* g  = nd.grad.ptr();
        const T* xh = xhat->data();
        if (T* gg = parent_grad(nd, 1)) {
            for (int64_t n = 0; n < N; n++) {
                for (int64_t c = 0; c < C; c++) {
                    const int64_t off = (n * C + c) * inner;
                    T s1              = 0;
                    for (int64_t i = 0; i < inner; i++) {
                        s1 += g[off + i] * xh[off + i];
                    }
                    gg[c] += s1;
                }
            }
        }
        if (T* gb = parent_grad(nd, 2)) {
            for (int64_t n = 0; n < N; n++) {
                for (int64_t c = 0; c < C; c++) {
                    const int64_t off = (n * C + c) * inner;
                    T s1              = 0;
                    for (int64_t i = 0; i < inner; i++) {
                        s1 += g[off + i];
                    }
                    gb[c] += s1;
                }
            }
        }
        if (T* gx = parent_grad(nd, 0)) {
            const T* ga = nd.parents[1]->value.ptr();
            for (int64_t n = 0; n < N; n++) {
                for (int64_t gi = 0; gi < groups; gi++) {
                    const int64_t off = (n * C + gi * cpg) * inner;
                    T mean_d = 0, mean_dx = 0;
                    for (int64_t c = 0; c < cpg; c++) {
                        const T gm = ga[gi * cpg + c];
                        for (int64_t i = 0; i < inner; i++) {
                            const int64_t idx = off + c * inner + i;
                            T d               = g[idx] * gm;
                            mean_d += d;
                            mean_dx += d * xh[idx];
                        }
                    }
                    mean_d /= T(m);
                    mean_dx /= T(m);
                    const T r = (*rstd)[static_cast<size_t>(n * groups + gi)];
                    for (int64_t c = 0; c < cpg; c++) {
                        const T gm = ga[gi * cpg + c];
                        for (int64_t i = 0; i < inner; i++) {
                            const int64_t idx = off + c * inner + i;
                            gx[idx] += r * (g[idx] * gm - mean_d - xh[idx] * mean_dx);
                        }
                    }
                }
            }
        }
    });
}

/// Layer normalization over the last dim.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const int64_t C = x.shape().back();
    check_shape(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "layer_norm: affine shape mismatch");
    const int64_t rows = x.size() / C;
    auto xhat          = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
    auto rstd          = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    Tensor<T> y(x.shape());
    for (int64_t r = 0; r < rows; r++) {
        const T* xr = x.value().ptr() + r * C;
        T mean      = 0;
        for (int64_t c = 0; c < C; c++) {
            mean += xr[c];
        }
        mean /= T(C);
        T var = 0;
        for (int64_t c = 0; c < C; c++) {
            var += (xr[c] - mean) * (xr[c] - mean);
        }
        var /= T(C);
        T rs                                = T(1) / std::sqrt(var + eps);
        (*rstd)[static_cast<size_t>(r)] = rs;
        for (int64_t c = 0; c < C; c++) {
            T h                                       = (xr[c] - mean) * rs;
            (*xhat)[static_cast<size_t>(r * C + c)] = h;
            y[r * C + c]                              = h * gamma.value()[c] + beta.value()[c];
        }
    }
    return make_result<T>(std::move(y), {x, gamma, beta}, [=](Node<T>& nd) {
        const T* g  = nd.grad.ptr();
        const T* xh = xhat->data();
        T* gg       = parent_grad(nd, 1);
        T* gb       = parent_grad(nd, 2);
        T* gx       = parent_grad(nd, 0);
        const T* ga = nd.parents[1]->value.ptr();
        for (int64_t r = 0; r < rows; r++) {
            const int64_t off = r * C;
            T mean_d = 0, mean_dx = 0;
            for (int64_t c = 0; c < C; c++) {
                if (gg) {
                    gg[c] += g[off + c] * xh[off + c];
                }
                if (gb) {
                    gb[c] += g[off + c];
                }
                T d = g[off + c] * ga[c];
                mean_d += d;
                mean_dx += d * xh[off + c];
            }
            if (!gx) {
                continue;
            }
            mean_d /= T(C);
            mean_dx /= T(C);
            const T rs = (*rstd)[static_cast<size_t>(r)];
            for (int64_t c = 0; c < C; c++) {
                gx[off + c] += rs * (g[off + c] * ga[c] - mean_d - xh[off + c] * mean_dx);
            }
        }
    });
}

/// Multi-head scaled dot-product attention without masking.
/// q [B, Lq, C], k and v [B, Lk, C]; heads split C evenly.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
    const auto& qs = q.shape();
    const auto& ks = k.shape();
    check_shape(qs.size() == 3 && ks.size() == 3 && v.shape() == ks && qs[0] == ks[0] && qs[2] == ks[2] &&
                    qs[2] % heads == 0,
                "attention: incompatible q " + shape_str(qs) + ", k " + shape_str(ks) + ", v " + shape_str(v.shape()));
    const int64_t B = qs[0], Lq = qs[1], Lk = ks[1], C = qs[2], dh = C / heads;
    const T sc = T(1) / std::sqrt(T(dh));
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(B * heads * Lq * Lk));
    Tensor<T> out(qs);
    for (int64_t b = 0; b < B; b++) {
        for (int64_t h = 0; h < heads; h++) {
            CStridedMap<T> Q(q.value().ptr() + b * Lq * C + h * dh, Lq, dh, Eigen::OuterStride<>(C));
            CStridedMap<T> K(k.value().ptr() + b * Lk * C + h * dh, Lk, dh, Eigen::OuterStride<>(C));
            CStridedMap<T> V(v.value().ptr() + b * Lk * C + h * dh, Lk, dh, Eigen::OuterStride<>(C));
            MatMap<T> Pm(probs->data() + (b * heads + h) * Lq * Lk, Lq, Lk);
            Pm.noalias() = (Q * K.transpose()) * sc;
            for (int64_t i = 0; i < Lq; i++) {
                T mx = Pm.row(i).maxCoeff();
                T s  = 0;
                for (int64_t j = 0; j < Lk; j++) {
                    T e      = std::exp(Pm(i, j) - mx);
                    Pm(i, j) = e;
                    s += e;
                }
                Pm.row(i) /= s;
            }
            StridedMap<T> O(out.ptr() + b * Lq * C + h * dh, Lq, dh, Eigen::OuterStride<>(C));
            O.noalias() = Pm * V;
        }
    }
    return make_result<T>(std::move(out), {q, k, v}, [=](Node<T>& nd) {
        T* gq = parent_grad(nd, 0);
        T* gk = parent_grad(nd, 1);
        T* gv = parent_grad(nd, 2);
        RowMat<T> dP(Lq, Lk);
        for (int64_t b = 0; b < B; b++) {
            for (int64_t h = 0; h < heads; h++) {
                CStridedMap<T> Q(nd.parents[0]->value.ptr() + b * Lq * C + h * dh, Lq, dh, Eigen::OuterStride<>(C));
                CStridedMap<T> K(nd.parents[1]->value.ptr() + b * Lk * C + h * dh, Lk, dh, Eigen::OuterStride<>(C));
                CStridedMap<T> V(nd.parents[2]->value.ptr() + b * Lk * C + h * dh, Lk, dh, Eigen::OuterStride<>(C));
                CStridedMap<T> G(nd.grad.ptr() + b * Lq * C + h * dh, Lq, dh, Eigen::OuterStride<>(C));
                CMatMap<T> Pm(probs->data() + (b * heads + h) * Lq * Lk, Lq, Lk);
                if (gv) {
                    StridedMap<T>(gv + b * Lk * C + h * dh, Lk, dh, Eigen::OuterStride<>(C)).noalias() +=
                        Pm.transpose() * G;
                }
                if (!gq && !gk) {
                    continue;
                }
                dP.noalias() = G * V.transpose();
                for (int64_t i = 0; i < Lq; i++) {
                    T dot = T(0);
                    for (int64_t j = 0; j < Lk; j++) {
                        dot += Pm(i, j) * dP(i, j);
                    }
                    for (int64_t j = 0; j < Lk; j++) {
                        dP(i, j) = Pm(i, j) * (dP(i, j) - dot) * sc;
                    }
                }
                if (gq) {
                    StridedMap<T>(gq + b * Lq * C + h * dh, Lq, dh, Eigen::OuterStride<>(C)).noalias() += dP * K;
                }
                if (gk) {
                    StridedMap<T>(gk + b * Lk * C + h * dh, Lk, dh, Eigen::OuterStride<>(C)).noalias() +=
                        dP.transpose() * Q;
                }
            }
        }
    });
}

// ---------------------------------------------------------------- token plumbing

/// Embedding lookup: table [V, d], ids of length B*L -> [B, L, d].
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids, int64_t B, int64_t L) {
    check_shape(table.shape().size() == 2 && static_cast<int64_t>(ids.size()) == B * L,
                "gather_rows: bad table " + shape_str(table.shape()) + " or id count");
    const int64_t V = table.shape()[0], d = table.shape()[1];
    Tensor<T> out({B, L, d});
    for (size_t i = 0; i < ids.size(); i++) {
        check_shape(ids[i] >= 0 && ids[i] < V, "gather_rows: id " + std::to_string(ids[i]) + " out of range");
        std::copy_n(table.value().ptr() + ids[i] * d, d, out.ptr() + static_cast<int64_t>(i) * d);
    }
    return make_result<T>(std::move(out), {table}, [ids, d](Node<T>& n) {
        if (T* gt = parent_grad(n, 0)) {
            for (size_t i = 0; i < ids.size(); i++) {
                const T* g = n.grad.ptr() + static_cast<int64_t>(i) * d;
                T* dst     = gt + ids[i] * d;
                for (int64_t c = 0; c < d; c++) {
                    dst[c] += g[c];
                }
            }
        }
    });
}

/// Overwrites x[b, positions[b], :] with rows[b, :] for each b with positions[b] >= 0.
template <typename T>
Var<T> replace_rows(const Var<T>& x, const std::vector<int>& positions, const Var<T>& rows) {
    const auto& s = x.shape();
    check_shape(s.size() == 3 && static_cast<int64_t>(positions.size()) == s[0], "replace_rows: bad sequence shape " +
                                                                                     shape_str(s));
    const int64_t B = s[0], L = s[1], d = s[2];
    check_shape(rows.shape() == Shape{B, d}, "replace_rows: rows shape " + shape_str(rows.shape()) + " expected " +
                                                 shape_str({B, d}));
    Tensor<T> out = x.value();
    for (int64_t b = 0; b < B; b++) {
        int p = positions[static_cast<size_t>(b)];
        if (p < 0) {
            continue;
        }
        check_shape(p < L, "replace_rows: position out of range");
        std::copy_n(rows.value().ptr() + b * d, d, out.ptr() + (b * L + p) * d);
    }
    return make_result<T>(std::move(out), {x, rows}, [positions, B, L, d](Node<T>& n) {
        const T* g = n.grad.ptr();
        if (T* gx = parent_grad(n, 0)) {
            for (int64_t b = 0; b < B; b++) {
                for (int64_t l = 0; l < L; l++) {
                    if (l == positions[static_cast<size_t>(b)]) {
                        continue;
                    }
                    for (int64_t c = 0; c < d; c++) {
                        gx[(b * L + l) * d + c] += g[(b * L + l) * d + c];
                    }
                }
            }
        }
        if (T* gr = parent_grad(n, 1)) {
            for (int64_t b = 0; b < B; b++) {
                int p = positions[static_cast<size_t>(b)];
                if (p < 0) {
                    continue;
                }
                for (int64_t c = 0; c < d; c++) {
                    gr[b * d + c] += g[(b * L + p) * d + c];
                }
            }
        }
    });
}

/// Builds [B, d] where row b is src[index[b]] or fallback when index[b] < 0.
/// src may be undefined when every index is negative.
template <typename T>
Var<T> select_rows(const Var<T>& src, const Var<T>& fallback, const std::vector<int>& index) {
    check_shape(fallback.shape().size() == 1, "select_rows: fallback must be a vector");
    const int64_t d = fallback.shape()[0];
    const int64_t B = static_cast<int64_t>(index.size());
    const bool has_src = src.defined();
    if (has_src) {
        check_shape(src.shape().size() == 2 && src.shape()[1] == d, "select_rows: src shape " + shape_str(src.shape()));
    }
    Tensor<T> out({B, d});
    for (int64_t b = 0; b < B; b++) {
        int i = index[static_cast<size_t>(b)];
        if (i < 0) {
            std::copy_n(fallback.value().ptr(), d, out.ptr() + b * d);
        } else {
            check_shape(has_src && i < src.shape()[0], "select_rows: index out of range");
            std::copy_n(src.value().ptr() + i * d, d, out.ptr() + b * d);
        }
    }
    std::vector<Var<T>> parents = {fallback};
    if (has_src) {
        parents.push_back(src);
    }
    return make_result<T>(std::move(out), parents, [index, d, has_src](Node<T>& n) {
        T* gf = parent_grad(n, 0);
        T* gs = has_src ? parent_grad(n, 1) : nullptr;
        for (size_t b = 0; b < index.size(); b++) {
            const T* g = n.grad.ptr() + static_cast<int64_t>(b) * d;
            T* dst     = index[b] < 0 ? gf : (gs ? gs + index[b] * d : nullptr);
            if (!dst) {
                continue;
            }
            for (int64_t c = 0; c < d; c++) {
                dst[c] += g[c];
            }
        }
    });
}

/// [B, P, d] with a shared [d] token prepended -> [B, P+1, d].
template <typename T>
Var<T> prepend_token(const Var<T>& x, const Var<T>& tok) {
    const auto& s = x.shape();
    check_shape(s.size() == 3 && tok.shape() == Shape{s[2]}, "prepend_token: bad shapes");
    const int64_t B = s[0], P = s[1], d = s[2];
    Tensor<T> out({B, P + 1, d});
    for (int64_t b = 0; b < B; b++) {
        std::copy_n(tok.value().ptr(), d, out.ptr() + b * (P + 1) * d);
        std::copy_n(x.value().ptr() + b * P * d, P * d, out.ptr() + (b * (P + 1) + 1) * d);
    }
    return make_result<T>(std::move(out), {x, tok}, [B, P, d](Node<T>& n) {
        const T* g = n.grad.ptr();
        if (T* gx = parent_grad(n, 0)) {
            for (int64_t b = 0; b < B; b++) {
                for (int64_t i = 0; i < P * d; i++) {
                    gx[b * P * d + i] += g[(b * (P + 1) + 1) * d + i];
                }
            }
        }
        if (T* gt = parent_grad(n, 1)) {
            for (int64_t b = 0; b < B; b++) {
                for (int64_t c = 0; c < d; c++) {
                    gt[c] += g[b * (P + 1) * d + c];
                }
            }
        }
    });
}

/// x[:, idx, :] of a [B, L, d] sequence -> [B, d].
template <typename T>
Var<T> take_token(const Var<T>& x, int64_t idx) {
    const auto& s = x.shape();
    check_shape(s.size() == 3 && idx >= 0 && idx < s[1], "take_token: bad index or shape");
    const int64_t B = s[0], L = s[1], d = s[2];
    Tensor<T> out({B, d});
    for (int64_t b = 0; b < B; b++) {
        std::copy_n(x.value().ptr() + (b * L + idx) * d, d, out.ptr() + b * d);
    }
    return make_result<T>(std::move(out), {x}, [B, L, d, idx](Node<T>& n) {
        if (T* gx = parent_grad(n, 0)) {
            for (int64_t b = 0; b < B; b++) {
                for (int64_t c = 0; c < d; c++) {
                    gx[(b * L + idx) * d + c] += n.grad[b * d + c];
                }
            }
        }
    });
}

/// Concatenate along dim 0; all parts share the trailing shape.
template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& parts) {
    check_shape(!parts.empty(), "stack_rows: no parts");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int64_t rows = 0;
    std::vector<int64_t> offsets;
    for (auto& p : parts) {
        check_shape(!p.shape().empty() && Shape(p.shape().begin() + 1, p.shape().end()) == tail,
                    "stack_rows: part " + shape_str(p.shape()) + " does not match " + shape_str(parts[0].shape()));
        offsets.push_back(rows * numel(tail));
        rows += p.shape()[0];
    }
    Shape so = tail;
    so.insert(so.begin(), rows);
    Tensor<T> out(so);
    for (size_t i = 0; i < parts.size(); i++) {
        std::copy_n(parts[i].value().ptr(), parts[i].size(), out.ptr() + offsets[i]);
    }
    return make_result<T>(std::move(out), parts, [offsets](Node<T>& n) {
        for (size_t i = 0; i < offsets.size(); i++) {
            if (T* g = parent_grad(n, i)) {
                const int64_t len = n.parents[i]->value.size();
                for (int64_t j = 0; j < len; j++) {
                    g[j] += n.grad[offsets[i] + j];
                }
            }
        }
    });
}

/// Mean over consecutive row segments: [sum(counts), d] -> [counts.size(), d].
/// Each coordinate is summed in sorted order in a wider type, so the result does not depend on the
/// order of rows inside a segment, and a segment of identical rows returns that row exactly.
template <typename T>
Var<T> segment_mean(const Var<T>& x, const std::vector<int64_t>& counts) {
    using Acc       = std::conditional_t<std::is_same_v<T, float>, double, long double>;
    const auto& s   = x.shape();
    int64_t total   = 0;
    for (auto c : counts) {
        check_shape(c >= 1, "segment_mean: empty segment");
        total += c;
    }
    check_shape(s.size() == 2 && s[0] == total, "segment_mean: bad shape " + shape_str(s));
    const int64_t B = static_cast<int64_t>(counts.size()), d = s[1];
    Tensor<T> out({B, d});
    std::vector<T> vals;
    int64_t row = 0;
    for (int64_t b = 0; b < B; b++) {
        const int64_t k = counts[static_cast<size_t>(b)];
        for (int64_t c = 0; c < d; c++) {
            vals.clear();
            for (int64_t j = 0; j < k; j++) {
                vals.push_back(x.value()[(row + j) * d + c]);
            }
            std::sort(vals.begin(), vals.end());
            Acc acc = 0;
            for (T v : vals) {
                acc += static_cast<Acc>(v);
            }
            out[b * d + c] = static_cast<T>(acc / static_cast<Acc>(k));
        }
        row += k;
    }
    return make_result<T>(std::move(out), {x}, [counts, d](Node<T>& n) {
        if (T* gx = parent_grad(n, 0)) {
            int64_t r = 0;
            for (size_t b = 0; b < counts.size(); b++) {
                const int64_t k = counts[b];
                for (int64_t j = 0; j < k; j++) {
                    for (int64_t c = 0; c < d; c++) {
                        gx[(r + j) * d + c] += n.grad[static_cast<int64_t>(b) * d + c] / T(k);
                    }
                }
                r += k;
            }
        }
    });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    T s = 0;
    for (int64_t i = 0; i < x.size(); i++) {
        s += x.value()[i];
    }
    const int64_t cnt = x.size();
    return make_result<T>(Tensor<T>({1}, std::vector<T>{s / T(cnt)}), {x}, [cnt](Node<T>& n) {
        if (T* gx = parent_grad(n, 0)) {
            const T g = n.grad[0] / T(cnt);
            for (int64_t i = 0; i < cnt; i++) {
                gx[i] += g;
            }
        }
    });
}

/// Mean squared error against a constant target.
template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target) {
    check_shape(pred.shape() == target.shape, "mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                                  shape_str(target.shape));
    T s = 0;
    for (int64_t i = 0; i < pred.size(); i++) {
        T d = pred.value()[i] - target[i];
        s += d * d;
    }
    const int64_t cnt = pred.size();
    auto tgt          = std::make_shared<Tensor<T>>(target);
    return make_result<T>(Tensor<T>({1}, std::vector<T>{s / T(cnt)}), {pred}, [cnt, tgt](Node<T>& n) {
        if (T* gp = parent_grad(n, 0)) {
            const T g  = n.grad[0] * T(2) / T(cnt);
            const T* p = n.parents[0]->value.ptr();
            for (int64_t i = 0; i < cnt; i++) {
                gp[i] += g * (p[i] - (*tgt)[i]);
            }
        }
    });
}

}  // namespace icl
