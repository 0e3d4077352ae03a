#pragma once

#include <memory>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "image.hpp"
#include "nn.hpp"

namespace icl {

struct ContextConfig {
    int patch   = 4;
    int width   = 128;
    int depth   = 4;
    int heads   = 4;
    bool zero_output = false;  // zero-initialized output projection
};

/// Converts file-space images [3, H, W] in [0, 1] into one model-space batch [N, 3, H, W].
template <typename T>
Tensor<T> stack_model_space(const std::vector<const Image*>& images) {
    check_shape(!images.empty(), "stack: no images");
    const int64_t H = image_height(*images[0]), W = image_width(*images[0]);
    const auto N    = static_cast<int64_t>(images.size());
    Tensor<T> out({N, 3, H, W});
    const int64_t per = 3 * H * W;
    for (int64_t n = 0; n < N; n++) {
        const Image& img = *images[static_cast<size_t>(n)];
        check_shape(img.shape == Shape{3, H, W}, "stack: image " + shape_str(img.shape) + " != " + shape_str({3, H, W}));
        for (int64_t i = 0; i < per; i++) {
            out[n * per + i] = static_cast<T>(img[i]) * T(2) - T(1);
        }
    }
    return out;
}

/// ViT over channel-concatenated (source, target) pairs; the class token is pooled and projected
/// to the text embedding width.
template <typename T>
class ContextEncoder : public Module<T> {
public:
    ContextEncoder(int image_size, int out_dim, const ContextConfig& cfg, Rng& rng) : cfg_(cfg), out_dim_(out_dim) {
        if (cfg.patch < 1 || image_size % cfg.patch != 0) {
            throw std::invalid_argument("context: patch size must divide the image size");
        }
        const int64_t grid = image_size / cfg.patch;
        patches_           = grid * grid;
        patch_embed = this->child("patch_embed", std::make_shared<Conv2d<T>>(6, cfg.width, cfg.patch, rng, cfg.patch, 0));
        cls_token   = this->param("cls_token", normal_tensor<T>({cfg.width}, 0.02, rng));
        position_embedding = this->param("position_embedding", normal_tensor<T>({patches_ + 1, cfg.width}, 0.02, rng));
        for (int i = 0; i < cfg.depth; i++) {
            blocks.push_back(this->child("blocks." + std::to_string(i),
                                         std::make_shared<TransformerBlock<T>>(cfg.width, cfg.heads, rng)));
        }
        ln_final = this->child("ln_final", std::make_shared<LayerNorm<T>>(cfg.width));
        proj     = this->child("proj", std::make_shared<Linear<T>>(cfg.width, out_dim, rng, true, cfg.zero_output));
    }

    const ContextConfig& config() const { return cfg_; }
    int64_t out_dim() const { return out_dim_; }

    /// source, target: model space [N, 3, H, W] -> [N, out_dim].
    Var<T> encode_pairs(const Var<T>& source, const Var<T>& target) const {
        check_shape(source.shape() == target.shape(), "context: source " + shape_str(source.shape()) + " vs target " +
                                                          shape_str(target.shape()));
        auto x = nchw_to_nlc(patch_embed->forward(concat_channels(source, target)));
        check_shape(x.shape()[1] == patches_, "context: image size differs from the configured one");
        x = add_broadcast(prepend_token(x, cls_token), position_embedding);
        for (auto& b : blocks) {
            x = b->forward(x);
        }
        return proj->forward(take_token(ln_final->forward(x), 0));
    }

    /// One pair of file-space images -> [out_dim].
    Var<T> encode_pair(const Image& source, const Image& target) const {
        auto v = encode_pairs(constant(stack_model_space<T>({&source})), constant(stack_model_space<T>({&target})));
        return reshape(v, {out_dim_});
    }

    /// Mean of per-pair embeddings for each set: sets.size() x [k_i pairs] -> [sets.size(), out_dim].
    Var<T> encode_context(const std::vector<const std::vector<ImagePair>*>& sets) const {
        std::vector<const Image*> src, tgt;
        std::vector<int64_t> counts;
        for (auto* s : sets) {
            if (s->empty()) {
                throw std::invalid_argument("context: empty context set");
            }
            counts.push_back(static_cast<int64_t>(s->size()));
            for (auto& p : *s) {
                src.push_back(&p.source);
                tgt.push_back(&p.target);
            }
        }
        // One forward per pair: batched GEMMs are not bitwise row-invariant, and the mean must not
        // depend on which other pairs share the batch.
        std::vector<Var<T>> rows;
        for (size_t i = 0; i < src.size(); i++) {
            rows.push_back(encode_pairs(constant(stack_model_space<T>({src[i]})), constant(stack_model_space<T>({tgt[i]}))));
        }
        return segment_mean(stack_rows(rows), counts);
    }

    Var<T> encode_context(const std::vector<ImagePair>& set) const {
        return reshape(encode_context(std::vector<const std::vector<ImagePair>*>{&set}), {out_dim_});
    }

    std::shared_ptr<Conv2d<T>> patch_embed;
    Var<T> cls_token;
    Var<T> position_embedding;
    std::vector<std::shared_ptr<TransformerBlock<T>>> blocks;
    std::shared_ptr<LayerNorm<T>> ln_final;
    std::shared_ptr<Linear<T>> proj;

private:
    ContextConfig cfg_;
    int64_t out_dim_;
    int64_t patches_ = 0;
};

}  // namespace icl
