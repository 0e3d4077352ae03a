#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "nn.hpp"

namespace icl {

struct UNetConfig {
    int image_size     = 32;
    int channels       = 3;
    int base           = 64;
    std::vector<int> mult = {1, 2, 2};
    int res_blocks     = 2;
    int attn_levels    = 2;  // cross-attention at this many of the coarsest levels
    int heads          = 4;
    int context_dim    = 128;
    int temb_dim       = 128;
    int groups         = 8;
    int timesteps      = 1000;

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("model.unet: " + m); };
        if (mult.empty()) fail("mult must be non-empty");
        if (base < 1 || res_blocks < 1 || heads < 1 || temb_dim < 2 || temb_dim % 2) fail("bad widths");
        if (attn_levels < 0 || attn_levels > static_cast<int>(mult.size())) fail("attn_levels out of range");
        if (image_size % (1 << (mult.size() - 1)) != 0) fail("image_size not divisible by the downsampling factor");
        for (size_t i = 0; i < mult.size(); i++) {
            if (mult[i] < 1 || (base * mult[i]) % heads != 0) fail("level width must be a positive multiple of heads");
        }
    }

    bool has_attention(size_t level) const { return static_cast<int>(level) + attn_levels >= static_cast<int>(mult.size()); }
};

/// Down path + middle block. Also the template of the control branch.
template <typename T>
class UNetEncoder : public Module<T> {
public:
    struct Output {
        std::vector<Var<T>> skips;
        Var<T> mid;
        Var<T> temb;  // activated
    };

    UNetEncoder(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        time1   = this->child("time_embed.0", std::make_shared<Linear<T>>(cfg.temb_dim, cfg.temb_dim, rng));
        time2   = this->child("time_embed.1", std::make_shared<Linear<T>>(cfg.temb_dim, cfg.temb_dim, rng));
        conv_in = this->child("conv_in", std::make_shared<Conv2d<T>>(cfg.channels, cfg.base, 3, rng));
        int64_t ch = cfg.base;
        skip_channels_.push_back(ch);
        const size_t levels = cfg.mult.size();
        for (size_t i = 0; i < levels; i++) {
            const int64_t out = static_cast<int64_t>(cfg.base) * cfg.mult[i];
            Level lv;
            for (int r = 0; r < cfg.res_blocks; r++) {
                const std::string p = "down." + std::to_string(i) + ".";
                lv.res.push_back(this->child(p + "res." + std::to_string(r),
                                             std::make_shared<ResBlock<T>>(ch, out, cfg.temb_dim, cfg.groups, rng)));
                if (cfg.has_attention(i)) {
                    lv.attn.push_back(this->child(p + "attn." + std::to_string(r),
                                                  std::make_shared<SpatialCrossAttention<T>>(out, cfg.context_dim,
                                                                                             cfg.heads, cfg.groups, rng)));
                }
                ch = out;
                skip_channels_.push_back(ch);
            }
            if (i + 1 < levels) {
                lv.down = this->child("down." + std::to_string(i) + ".downsample",
                                      std::make_shared<Conv2d<T>>(ch, ch, 3, rng, 2, 1));
                skip_channels_.push_back(ch);
            }
            levels_.push_back(std::move(lv));
        }
        mid_channels_ = ch;
        mid_res1 = this->child("mid.res1", std::make_shared<ResBlock<T>>(ch, ch, cfg.temb_dim, cfg.groups, rng));
        mid_attn = this->child("mid.attn", std::make_shared<SpatialCrossAttention<T>>(ch, cfg.context_dim, cfg.heads,
                                                                                      cfg.groups, rng));
        mid_res2 = this->child("mid.res2", std::make_shared<ResBlock<T>>(ch, ch, cfg.temb_dim, cfg.groups, rng));
    }

    const UNetConfig& config() const { return cfg_; }
    const std::vector<int64_t>& skip_channels() const { return skip_channels_; }
    int64_t mid_channels() const { return mid_channels_; }

    /// x: [N, C, H, W]; ctx: [N, L, context_dim]; feature_offset (optional) is added after conv_in.
    Output forward(const Var<T>& x, const std::vector<int>& ts, const Var<T>& ctx, const Var<T>& feature_offset = {}) const {
        check_shape(x.shape().size() == 4 && x.shape()[1] == cfg_.channels && x.shape()[2] == cfg_.image_size &&
                        x.shape()[3] == cfg_.image_size,
                    "denoiser: input " + shape_str(x.shape()) + " does not match the configured image size");
        check_shape(static_cast<int64_t>(ts.size()) == x.shape()[0], "denoiser: one timestep per batch item required");
        Output out;
        auto temb = constant(timestep_embedding<T>(ts, cfg_.temb_dim));
        out.temb  = silu(time2->forward(silu(time1->forward(temb))));
        auto h    = conv_in->forward(x);
        if (feature_offset.defined()) {
            h = add(h, feature_offset);
        }
        out.skips.push_back(h);
        for (auto& lv : levels_) {
            for (size_t r = 0; r < lv.res.size(); r++) {
                h = lv.res[r]->forward(h, out.temb);
                if (!lv.attn.empty()) {
                    h = lv.attn[r]->forward(h, ctx);
                }
                out.skips.push_back(h);
            }
            if (lv.down) {
                h = lv.down->forward(h);
                out.skips.push_back(h);
            }
        }
        h       = mid_res1->forward(h, out.temb);
        h       = mid_attn->forward(h, ctx);
        out.mid = mid_res2->forward(h, out.temb);
        return out;
    }

    std::shared_ptr<Linear<T>> time1, time2;
    std::shared_ptr<Conv2d<T>> conv_in;
    std::shared_ptr<ResBlock<T>> mid_res1, mid_res2;
    std::shared_ptr<SpatialCrossAttention<T>> mid_attn;

private:
    struct Level {
        std::vector<std::shared_ptr<ResBlock<T>>> res;
        std::vector<std::shared_ptr<SpatialCrossAttention<T>>> attn;
        std::shared_ptr<Conv2d<T>> down;
    };
    UNetConfig cfg_;
    std::vector<Level> levels_;
    std::vector<int64_t> skip_channels_;
    int64_t mid_channels_ = 0;
};

/// Up path with skip connections and the output head.
template <typename T>
class UNetDecoder : public Module<T> {
public:
    UNetDecoder(const UNetConfig& cfg, const std::vector<int64_t>& skip_channels, int64_t mid_channels, Rng& rng)
        : cfg_(cfg) {
        std::vector<int64_t> skips = skip_channels;
        int64_t ch                 = mid_channels;
        const size_t levels        = cfg.mult.size();
        for (size_t li = levels; li-- > 0;) {
            const int64_t out = static_cast<int64_t>(cfg.base) * cfg.mult[li];
            const std::string p = "up." + std::to_string(li) + ".";
            Level lv;
            for (int r = 0; r <= cfg.res_blocks; r++) {
                const int64_t skip_ch = skips.back();
                skips.pop_back();
                lv.res.push_back(this->child(p + "res." + std::to_string(r),
                                             std::make_shared<ResBlock<T>>(ch + skip_ch, out, cfg.temb_dim, cfg.groups, rng)));
                if (cfg.has_attention(li)) {
                    lv.attn.push_back(this->child(p + "attn." + std::to_string(r),
                                                  std::make_shared<SpatialCrossAttention<T>>(out, cfg.context_dim,
                                                                                             cfg.heads, cfg.groups, rng)));
                }
                ch = out;
            }
            if (li > 0) {
                lv.up = this->child(p + "upsample", std::make_shared<Conv2d<T>>(ch, ch, 3, rng));
            }
            levels_.push_back(std::move(lv));
        }
        norm_out = this->child("norm_out", std::make_shared<GroupNorm<T>>(ch, norm_groups(ch, cfg.groups)));
        conv_out = this->child("conv_out", std::make_shared<Conv2d<T>>(ch, cfg.channels, 3, rng));
    }

    /// enc: encoder output; control: optional additive residuals, one per skip followed by one for the middle.
    Var<T> forward(const typename UNetEncoder<T>::Output& enc, const Var<T>& ctx,
                   const std::vector<Var<T>>* control = nullptr) const {
        std::vector<Var<T>> skips = enc.skips;
        Var<T> h                  = enc.mid;
        if (control) {
            check_shape(control->size() == skips.size() + 1, "denoiser: control residual count mismatch");
            for (size_t i = 0; i < skips.size(); i++) {
                skips[i] = add(skips[i], (*control)[i]);
            }
            h = add(h, control->back());
        }
        for (auto& lv : levels_) {
            for (size_t r = 0; r < lv.res.size(); r++) {
                auto s = skips.back();
                skips.pop_back();
                h = lv.res[r]->forward(concat_channels(h, s), enc.temb);
                if (!lv.attn.empty()) {
                    h = lv.attn[r]->forward(h, ctx);
                }
            }
            if (lv.up) {
                h = lv.up->forward(upsample2x(h));
            }
        }
        return conv_out->forward(silu(norm_out->forward(h)));
    }

    std::shared_ptr<GroupNorm<T>> norm_out;
    std::shared_ptr<Conv2d<T>> conv_out;

private:
    struct Level {
        std::vector<std::shared_ptr<ResBlock<T>>> res;
        std::vector<std::shared_ptr<SpatialCrossAttention<T>>> attn;
        std::shared_ptr<Conv2d<T>> up;
    };
    UNetConfig cfg_;
    std::vector<Level> levels_;
};

/// Denoiser core: noise prediction from (z_t, t, text sequence), optionally with control residuals.
template <typename T>
class UNet : public Module<T> {
public:
    UNet(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
        encoder = this->child("encoder", std::make_shared<UNetEncoder<T>>(cfg, rng));
        decoder = this->child("decoder", std::make_shared<UNetDecoder<T>>(cfg, encoder->skip_channels(),
                                                                          encoder->mid_channels(), rng));
    }

    const UNetConfig& config() const { return cfg_; }

    Var<T> forward(const Var<T>& x, const std::vector<int>& ts, const Var<T>& ctx,
                   const std::vector<Var<T>>* control = nullptr) const {
        return decoder->forward(encoder->forward(x, ts, ctx), ctx, control);
    }

    std::shared_ptr<UNetEncoder<T>> encoder;
    std::shared_ptr<UNetDecoder<T>> decoder;

private:
    UNetConfig cfg_;
};

/// Control branch: hint network, a trainable copy of the down path + middle block, and zero 1x1 convs
/// producing one residual per decoder skip input plus one for the middle block.
template <typename T>
class ControlNet : public Module<T> {
public:
    ControlNet(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
        const int64_t widths[] = {cfg.channels, 16, 16, 32, cfg.base};
        for (int i = 0; i < 4; i++) {
            hint.push_back(this->child("hint." + std::to_string(i),
                                       std::make_shared<Conv2d<T>>(widths[i], widths[i + 1], 3, rng, 1, 1, i == 3)));
        }
        encoder = this->child("encoder", std::make_shared<UNetEncoder<T>>(cfg, rng));
        const auto& sc = encoder->skip_channels();
        for (size_t i = 0; i < sc.size(); i++) {
            zero.push_back(this->child("zero." + std::to_string(i),
                                       std::make_shared<Conv2d<T>>(sc[i], sc[i], 1, rng, 1, 0, true)));
        }
        zero_mid = this->child("zero_mid", std::make_shared<Conv2d<T>>(encoder->mid_channels(), encoder->mid_channels(),
                                                                       1, rng, 1, 0, true));
    }

    const UNetConfig& config() const { return cfg_; }

    /// Copies the encoder weights from a trained core. Names and shapes must match exactly.
    void copy_encoder_from(const UNetEncoder<T>& src) {
        auto from = src.named_parameters();
        auto to   = encoder->named_parameters();
        if (from.size() != to.size()) {
            throw CheckpointError("control branch: architecture mismatch (" + std::to_string(from.size()) + " vs " +
                                  std::to_string(to.size()) + " encoder tensors)");
        }
        for (size_t i = 0; i < from.size(); i++) {
            if (from[i].first != to[i].first || from[i].second.shape() != to[i].second.shape()) {
                throw CheckpointError("control branch: architecture mismatch at " + from[i].first);
            }
            to[i].second.mutable_value() = from[i].second.value();
        }
    }

    /// Residuals for the decoder. hint: model space [N, C, H, W].
    std::vector<Var<T>> forward(const Var<T>& x, const std::vector<int>& ts, const Var<T>& ctx, const Var<T>& hint_image) const {
        check_shape(hint_image.shape() == x.shape(), "control: hint " + shape_str(hint_image.shape()) + " vs input " +
                                                         shape_str(x.shape()));
        Var<T> h = hint_image;
        for (size_t i = 0; i < hint.size(); i++) {
            h = hint[i]->forward(h);
            if (i + 1 < hint.size()) {
                h = silu(h);
            }
        }
        auto enc = encoder->forward(x, ts, ctx, h);
        std::vector<Var<T>> out;
        for (size_t i = 0; i < enc.skips.size(); i++) {
            out.push_back(zero[i]->forward(enc.skips[i]));
        }
        out.push_back(zero_mid->forward(enc.mid));
        return out;
    }

    std::vector<std::shared_ptr<Conv2d<T>>> hint;
    std::shared_ptr<UNetEncoder<T>> encoder;
    std::vector<std::shared_ptr<Conv2d<T>>> zero;
    std::shared_ptr<Conv2d<T>> zero_mid;

private:
    UNetConfig cfg_;
};

/// epsilon prediction. When hint is undefined or there is no control branch, only the core runs.
template <typename T>
Var<T> predict_noise(const UNet<T>& core, const ControlNet<T>* control, const Var<T>& z, const std::vector<int>& ts,
                     const Var<T>& text, const Var<T>& hint) {
    for (int t : ts) {
        if (t < 1 || t > core.config().timesteps) {
            throw std::out_of_range("predict_noise: timestep " + std::to_string(t) + " outside [1, " +
                                    std::to_string(core.config().timesteps) + "]");
        }
    }
    if (control && hint.defined()) {
        auto residuals = control->forward(z, ts, text, hint);
        return core.forward(z, ts, text, &residuals);
    }
    return core.forward(z, ts, text);
}

}  // namespace icl
