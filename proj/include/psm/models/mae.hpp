#pragma once

#include <cstdint>
#include <vector>

#include "psm/models/vit.hpp"

namespace psm::models {

struct MAEConfig {
    double mask_ratio = 0.75;
    int decoder_dim = 32;
    int decoder_depth = 1;
    int decoder_heads = 2;

    /// round-half-up(mask_ratio * num_patches), required to lie in [1, N-1].
    int mask_count(int num_patches) const;
    void validate(int num_patches) const;
};

nlohmann::json to_json(const MAEConfig& c);

struct PretrainHyper {
    double learning_rate = 1.5e-3;
    double weight_decay = 0.05;
    int steps = 200;
    int batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Encoder plus lightweight decoder used only during pre-training.
class MAE {
public:
    ViT encoder;
    MAEConfig mae;
    Tensor dec_embed_w, dec_embed_b;  // (Dd, D), (Dd)
    Tensor mask_token;                // (Dd)
    Tensor dec_pos;                   // (1 + N, Dd)
    std::vector<Block> dec_blocks;
    Tensor dec_norm_g, dec_norm_b;
    Tensor pred_w, pred_b;  // (C*P*P, Dd), (C*P*P)

    static MAE init(const ViTConfig& cfg, const MAEConfig& mae, std::uint64_t seed);

    template <typename F>
    void visit(F&& f) {
        encoder.visit([&](const std::string& name, Tensor& t) {
            if (!name.starts_with("head.")) f("encoder." + name, t);
        });
        f(std::string("decoder.embed.weight"), dec_embed_w);
        f(std::string("decoder.embed.bias"), dec_embed_b);
        f(std::string("decoder.mask_token"), mask_token);
        f(std::string("decoder.pos_embed"), dec_pos);
        for (std::size_t i = 0; i < dec_blocks.size(); ++i)
            dec_blocks[i].visit("decoder.blocks." + std::to_string(i) + ".", f);
        f(std::string("decoder.norm.gamma"), dec_norm_g);
        f(std::string("decoder.norm.beta"), dec_norm_b);
        f(std::string("decoder.pred.weight"), pred_w);
        f(std::string("decoder.pred.bias"), pred_b);
    }

    /// Trainable parameters (the encoder's classification head is excluded).
    ParamList parameters();
};

/// Per-image split of patch indices into visible (ascending) and masked.
struct PatchMask {
    std::vector<std::vector<int>> visible;
    std::vector<std::vector<bool>> masked;  // B x N
};

/// Uniform sampling without replacement of mask_count patches per image.
PatchMask sample_mask(int batch, int num_patches, int mask_count, Rng& rng);

struct MaeOutput {
    Tensor loss;
    Tensor pred;    // (B, N, C*P*P)
    Tensor target;  // (B, N, C*P*P)
    int encoder_tokens = 0;
};

/// Encodes visible patches only, decodes the full sequence with mask tokens
/// and scores masked patches with masked_mse.
MaeOutput mae_forward(const MAE& model, std::span<const double> images, int batch, const PatchMask& mask);

struct PretrainResult {
    MAE model;
    std::vector<double> loss_trace;
    std::vector<int> encoder_tokens;  // per step, class token included

    /// Encoder checkpoint (kind "vit"; head kept from init) with the trace.
    nn::Checkpoint checkpoint() const;
};

/// Self-supervised pre-training on dataset frames (labels ignored).
PretrainResult mae_pretrain(const ViTConfig& cfg, const MAEConfig& mae, const LabeledDataset& frames,
                            const PretrainHyper& hyper);

}  // namespace psm::models
