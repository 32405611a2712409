#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "psm/common.hpp"
#include "psm/data.hpp"
#include "psm/nn/checkpoint.hpp"
#include "psm/nn/ops.hpp"
#include "psm/nn/optim.hpp"

namespace psm::models {

using nn::ParamList;
using nn::Tensor;

struct ViTConfig {
    int image_rows = 18;
    int image_cols = 18;
    int in_channels = 1;
    int patch_size = 6;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int num_classes = kNumPoses;

    void validate() const;
    int grid_rows() const { return image_rows / patch_size; }
    int grid_cols() const { return image_cols / patch_size; }
    int num_patches() const { return grid_rows() * grid_cols(); }
    int patch_dim() const { return in_channels * patch_size * patch_size; }
    int image_size() const { return in_channels * image_rows * image_cols; }
};

nlohmann::json to_json(const ViTConfig& c);
ViTConfig vit_config_from_json(const nlohmann::json& j);

/// Image layout is channel-planar (C, rows, cols). Patches are taken in
/// row-major grid order; each patch vector is channel-major, then row-major
/// within the patch.
std::vector<double> patchify(std::span<const double> image, int channels, int rows, int cols, int patch);
std::vector<double> unpatchify(std::span<const double> patches, int channels, int rows, int cols, int patch);
/// (B, C*rows*cols) images -> (B, N, C*P*P) constant tensor.
Tensor patchify_batch(std::span<const double> images, int batch, int channels, int rows, int cols, int patch);

/// Truncated normal (cut at two standard deviations).
Tensor trunc_normal(Rng& rng, nn::Shape shape, double std);

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
struct Block {
    Tensor ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;

    static Block init(int dim, int mlp_ratio, Rng& rng);
    Tensor forward(const Tensor& x, int heads) const;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "ln1.gamma", ln1_g);
        f(prefix + "ln1.beta", ln1_b);
        f(prefix + "attn.qkv.weight", qkv_w);
        f(prefix + "attn.qkv.bias", qkv_b);
        f(prefix + "attn.proj.weight", proj_w);
        f(prefix + "attn.proj.bias", proj_b);
        f(prefix + "ln2.gamma", ln2_g);
        f(prefix + "ln2.beta", ln2_b);
        f(prefix + "mlp.fc1.weight", fc1_w);
        f(prefix + "mlp.fc1.bias", fc1_b);
        f(prefix + "mlp.fc2.weight", fc2_w);
        f(prefix + "mlp.fc2.bias", fc2_b);
    }
};

class ViT {
public:
    ViTConfig config;
    Tensor patch_w;    // (D, C*P*P)
    Tensor patch_b;    // (D)
    Tensor cls_token;  // (1, D)
    Tensor pos_embed;  // (1 + N, D); row 0 belongs to the class token
    std::vector<Block> blocks;
    Tensor norm_g, norm_b;
    Tensor head_w;  // (num_classes, D)
    Tensor head_b;

    static ViT init(const ViTConfig& cfg, std::uint64_t seed);

    template <typename F>
    void visit(F&& f) {
        f(std::string("patch_embed.weight"), patch_w);
        f(std::string("patch_embed.bias"), patch_b);
        f(std::string("cls_token"), cls_token);
        f(std::string("pos_embed"), pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("blocks." + std::to_string(i) + ".", f);
        f(std::string("norm.gamma"), norm_g);
        f(std::string("norm.beta"), norm_b);
        f(std::string("head.weight"), head_w);
        f(std::string("head.bias"), head_b);
    }

    ParamList parameters();
    /// Everything except the classification head.
    ParamList backbone_parameters();
    ViT clone() const;

    /// (B, N, C*P*P) patches -> (B, N, D) embeddings with positions added.
    Tensor embed_patches(const Tensor& patches) const;
    /// Prepends the positioned class token and runs blocks + final norm.
    Tensor encode_tokens(const Tensor& tokens) const;
    /// (B, C*rows*cols) images -> (B, 1 + N, D).
    Tensor encode(std::span<const double> images, int batch) const;
    /// Class-token logits (B, num_classes).
    Tensor forward(std::span<const double> images, int batch) const;

    nn::Checkpoint to_checkpoint() const;
    static ViT from_checkpoint(const nn::Checkpoint& ckpt);
};

/// Corner-aligned bilinear resampling of an r1 x c1 grid of embedding vectors
/// (row-major, `values` holds r1*c1*dim entries) to r2 x c2.
std::vector<double> adapt_positional_embeddings(std::span<const double> values, int r1, int c1, int dim, int r2, int c2);

/// Resamples a model's patch positions to a new image size (same patch size);
/// the class-token position passes through unchanged.
ViT adapt_to_image(const ViT& model, int image_rows, int image_cols);

/// (D, 3*P*P) channel-major weights -> (D, P*P) by summing over channels.
Tensor collapse_input_channels(const Tensor& weights, int channels = 3);
ViT collapse_channels(const ViT& model);

enum class HeadMode { Reinit, KeepBackbone };

struct HeadOptions {
    HeadMode mode = HeadMode::KeepBackbone;
    /// Additionally re-randomizes the patch-embedding input layer.
    bool vitpose_style = false;
    std::uint64_t seed = 0;
};

/// New linear head of `num_classes` outputs. Reinit re-randomizes the whole
/// backbone as well (training from scratch with the same architecture).
ViT replace_head(const ViT& model, int num_classes, const HeadOptions& opt);
ViT replace_head(const nn::Checkpoint& ckpt, int num_classes, const HeadOptions& opt);

/// (B, C*rows*cols) batch built from dataset samples; single-channel frames are
/// replicated to `channels`.
std::vector<double> gather_images(const LabeledDataset& ds, std::span<const std::size_t> index, int rows, int cols,
                                  int channels);

struct FinetuneHyper {
    double learning_rate = 1e-3;
    double weight_decay = 0.05;
    int epochs = 10;
    int batch_size = 32;
    std::uint64_t seed = 0;
    /// Records a full-pass training accuracy after every epoch.
    bool track_train_accuracy = false;

    void validate() const;
};

struct FinetuneResult {
    ViT model;
    nn::OptimizerState optimizer;
    std::vector<double> epoch_loss;
    std::vector<double> train_accuracy;
    std::vector<double> valid_accuracy;

    nlohmann::json trace() const;
    nn::Checkpoint checkpoint() const;
};

/// Throws ValidationError naming the first patient present in both sets.
void require_disjoint_patients(const LabeledDataset& a, const LabeledDataset& b);

/// Cross-entropy training of the full model with AdamW; returns the
/// final-epoch model.
FinetuneResult finetune(const ViT& model, const LabeledDataset& train, const LabeledDataset& valid,
                        const FinetuneHyper& hyper);

std::vector<int> predict(const ViT& model, const LabeledDataset& ds, int batch_size = 256);
double accuracy(std::span<const int> pred, std::span<const int> truth);
std::vector<int> labels_of(const LabeledDataset& ds);

}  // namespace psm::models
