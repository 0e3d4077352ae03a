#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "context.hpp"
#include "denoiser.hpp"
#include "text.hpp"

namespace icl {

/// Parameter partition of a checkpoint.
enum class ParamGroup { psi, theta, theta_prime, phi };

inline std::string param_group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::psi: return "psi";
        case ParamGroup::theta: return "theta";
        case ParamGroup::theta_prime: return "theta_prime";
        case ParamGroup::phi: return "phi";
    }
    return "?";
}

inline ParamGroup param_group_of(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    if (starts("text.")) return ParamGroup::psi;
    if (starts("unet.")) return ParamGroup::theta;
    if (starts("control.")) return ParamGroup::theta_prime;
    if (starts("context.")) return ParamGroup::phi;
    throw CheckpointError("tensor '" + name + "' belongs to no parameter group");
}

struct ModelConfig {
    int image_size = 32;
    int d          = 128;  // text width = context vector width = cross-attention width
    VcMode vc_mode = VcMode::placeholder;
    TextConfig text;
    ContextConfig context;
    UNetConfig unet;

    /// Component configs with the shared sizes filled in.
    TextConfig text_config() const {
        TextConfig t = text;
        t.width      = d;
        return t;
    }
    UNetConfig unet_config() const {
        UNetConfig u  = unet;
        u.image_size  = image_size;
        u.context_dim = d;
        return u;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
        if (image_size < 8) fail("image_size must be >= 8");
        if (d < 4 || d % text.heads != 0) fail("d must be a positive multiple of text.heads");
        if (text.layers < 0 || text.max_len < 4) fail("text.layers >= 0 and text.max_len >= 4 required");
        if (context.patch < 1 || image_size % context.patch) fail("context.patch must divide image_size");
        if (context.width % context.heads) fail("context.width must be a multiple of context.heads");
        unet_config().validate();
    }
};

/// One conditioning request: prompt text, context pairs and hint, all in file space [0, 1].
struct CondRequest {
    std::string prompt;
    std::vector<ImagePair> context;
    bool text_dropped    = false;
    bool context_dropped = false;
    std::optional<Image> hint;
};

template <typename T>
struct ConditioningBundle {
    Var<T> text_sequence;  // [B, L, d]
    Var<T> hint;           // [B, 3, H, W] model space, or undefined
    std::vector<uint8_t> text_dropped;
    std::vector<uint8_t> context_dropped;
};

/// Token layout for one request under a model's context mode.
inline TextInput layout_tokens(const CondRequest& r, VcMode mode, const Vocabulary& vocab, int max_len) {
    const std::string words = r.text_dropped ? std::string() : r.prompt;
    if (mode == VcMode::none || (r.text_dropped && r.context_dropped)) {
        return {tokenize(words, false, vocab, max_len), VcMode::none};
    }
    if (mode == VcMode::placeholder) {
        return {tokenize(words, true, vocab, max_len), VcMode::placeholder};
    }
    auto seq = tokenize(words, false, vocab, max_len - 1);
    seq.ids.push_back(kPadId);
    vc_slot(seq, VcMode::concat);
    return {std::move(seq), VcMode::concat};
}

/// Text encoder (psi), denoiser core (theta), and after attach_control the control branch (theta')
/// and context encoder (phi).
template <typename T>
class IclModel {
public:
    IclModel(ModelConfig cfg, Vocabulary vocab, uint64_t seed) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
        cfg_.validate();
        Rng text_rng(derive_seed(seed, "init/text"));
        Rng unet_rng(derive_seed(seed, "init/unet"));
        text = std::make_shared<TextEncoder<T>>(vocab_.size(), cfg_.text_config(), text_rng);
        unet = std::make_shared<UNet<T>>(cfg_.unet_config(), unet_rng);
    }

    const ModelConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    bool has_control() const { return static_cast<bool>(control); }

    /// Adds a control branch copied from the core encoder (zero convs at zero) and a fresh context
    /// encoder; freezes psi and theta.
    void attach_control(uint64_t seed) {
        if (control) {
            throw std::logic_error("control branch already attached");
        }
        Rng control_rng(derive_seed(seed, "init/control"));
        Rng context_rng(derive_seed(seed, "init/context"));
        auto c = std::make_shared<ControlNet<T>>(cfg_.unet_config(), control_rng);
        c->copy_encoder_from(*unet->encoder);
        control = c;
        context = std::make_shared<ContextEncoder<T>>(cfg_.image_size, cfg_.d, cfg_.context, context_rng);
        text->set_trainable(false);
        unet->set_trainable(false);
    }

    NamedParams<T> parameters() const {
        NamedParams<T> out;
        text->collect("text.", out);
        unet->collect("unet.", out);
        if (control) {
            control->collect("control.", out);
            context->collect("context.", out);
        }
        return out;
    }

    NamedParams<T> trainable_parameters() const {
        NamedParams<T> out;
        for (auto& [n, p] : parameters()) {
            if (p.requires_grad()) {
                out.emplace_back(n, p);
            }
        }
        return out;
    }

    ConditioningBundle<T> condition(const std::vector<CondRequest>& reqs) const {
        ConditioningBundle<T> b;
        std::vector<TextInput> inputs;
        std::vector<int> index;
        std::vector<const std::vector<ImagePair>*> sets;
        size_t hints = 0;
        for (auto& r : reqs) {
            inputs.push_back(layout_tokens(r, cfg_.vc_mode, vocab_, cfg_.text.max_len));
            b.text_dropped.push_back(r.text_dropped);
            b.context_dropped.push_back(r.context_dropped);
            int idx = -1;
            if (inputs.back().mode != VcMode::none && !r.context_dropped) {
                if (!context) {
                    throw CheckpointError("model has no context encoder; train stage B first");
                }
                if (r.context.empty()) {
                    throw std::invalid_argument("conditioning: context requested but no pairs given");
                }
                idx = static_cast<int>(sets.size());
                sets.push_back(&r.context);
            }
            index.push_back(idx);
            hints += r.hint.has_value();
        }
        Var<T> vc;
        bool any_slot = false;
        for (auto& in : inputs) {
            any_slot = any_slot || in.mode != VcMode::none;
        }
        if (any_slot) {
            Var<T> src = sets.empty() ? Var<T>() : context->encode_context(sets);
            vc         = select_rows(src, text->null_context, index);
        }
        b.text_sequence = text->encode(inputs, vc);
        if (hints != 0) {
            if (hints != reqs.size()) {
                throw std::invalid_argument("conditioning: hints must be given for all items or none");
            }
            std::vector<const Image*> imgs;
            for (auto& r : reqs) {
                imgs.push_back(&*r.hint);
            }
            b.hint = constant(stack_model_space<T>(imgs));
        }
        return b;
    }

    /// Unconditional counterpart used by guidance: text and context dropped, hints kept.
    static std::vector<CondRequest> unconditional(const std::vector<CondRequest>& reqs) {
        std::vector<CondRequest> out;
        for (auto& r : reqs) {
            CondRequest u;
            u.text_dropped    = true;
            u.context_dropped = true;
            u.hint            = r.hint;
            out.push_back(std::move(u));
        }
        return out;
    }

    Var<T> predict(const Var<T>& z, const std::vector<int>& ts, const ConditioningBundle<T>& cond) const {
        return predict_noise(*unet, control.get(), z, ts, cond.text_sequence, cond.hint);
    }

    std::shared_ptr<TextEncoder<T>> text;
    std::shared_ptr<UNet<T>> unet;
    std::shared_ptr<ControlNet<T>> control;
    std::shared_ptr<ContextEncoder<T>> context;

private:
    ModelConfig cfg_;
    Vocabulary vocab_;
};

}  // namespace icl
