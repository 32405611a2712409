#include "psm/models/mae.hpp"

#include <algorithm>
#include <cmath>

namespace psm::models {

using namespace psm::nn;

int MAEConfig::mask_count(int num_patches) const {
    return static_cast<int>(std::floor(mask_ratio * num_patches + 0.5));
}

void MAEConfig::validate(int num_patches) const {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ValidationError("mask_ratio must lie in (0, 1)");
    if (decoder_dim < 1 || decoder_depth < 0 || decoder_heads < 1 || decoder_dim % decoder_heads)
        throw ValidationError("MAE decoder: decoder_dim must be positive and divisible by decoder_heads");
    const int m = mask_count(num_patches);
    if (m < 1 || m > num_patches - 1)
        throw ValidationError("mask count " + std::to_string(m) + " out of bounds [1, " +
                              std::to_string(num_patches - 1) + "] for " + std::to_string(num_patches) + " patches");
}

nlohmann::json to_json(const MAEConfig& c) {
    return {{"mask_ratio", c.mask_ratio},
            {"decoder_dim", c.decoder_dim},
            {"decoder_depth", c.decoder_depth},
            {"decoder_heads", c.decoder_heads}};
}

void PretrainHyper::validate() const {
    if (!(learning_rate > 0.0) || !(weight_decay >= 0.0) || steps < 1 || batch_size < 1)
        throw ValidationError("pretrain hyperparameters: need learning_rate > 0, weight_decay >= 0, steps >= 1, batch_size >= 1");
}

MAE MAE::init(const ViTConfig& cfg, const MAEConfig& mae, std::uint64_t seed) {
    mae.validate(cfg.num_patches());
    MAE m;
    m.encoder = ViT::init(cfg, seed);
    m.mae = mae;
    Rng rng(mix_seed(seed, 0xDEC0));
    const int dd = mae.decoder_dim;
    m.dec_embed_w = trunc_normal(rng, {dd, cfg.embed_dim}, 0.02);
    m.dec_embed_b = Tensor::zeros({dd}, true);
    m.mask_token = trunc_normal(rng, {dd}, 0.02);
    m.dec_pos = trunc_normal(rng, {1 + cfg.num_patches(), dd}, 0.02);
    for (int i = 0; i < mae.decoder_depth; ++i) m.dec_blocks.push_back(Block::init(dd, cfg.mlp_ratio, rng));
    m.dec_norm_g = Tensor::full({dd}, 1.0, true);
    m.dec_norm_b = Tensor::zeros({dd}, true);
    m.pred_w = trunc_normal(rng, {cfg.patch_dim(), dd}, 0.02);
    m.pred_b = Tensor::zeros({cfg.patch_dim()}, true);
    return m;
}

ParamList MAE::parameters() {
    ParamList out;
    visit([&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
    return out;
}

PatchMask sample_mask(int batch, int num_patches, int mask_count, Rng& rng) {
    if (mask_count < 1 || mask_count > num_patches - 1)
        throw ValidationError("mask count " + std::to_string(mask_count) + " out of bounds for " +
                              std::to_string(num_patches) + " patches");
    PatchMask m;
    std::vector<int> perm(static_cast<std::size_t>(num_patches));
    for (int b = 0; b < batch; ++b) {
        for (int i = 0; i < num_patches; ++i) perm[static_cast<std::size_t>(i)] = i;
        rng.shuffle(perm);
        std::vector<bool> masked(static_cast<std::size_t>(num_patches), false);
        for (int i = 0; i < mask_count; ++i) masked[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = true;
        std::vector<int> vis;
        for (int i = 0; i < num_patches; ++i)
            if (!masked[static_cast<std::size_t>(i)]) vis.push_back(i);
        m.visible.push_back(std::move(vis));
        m.masked.push_back(std::move(masked));
    }
    return m;
}

MaeOutput mae_forward(const MAE& model, std::span<const double> images, int batch, const PatchMask& mask) {
    const auto& enc = model.encoder;
    const auto& c = enc.config;
    const int n = c.num_patches();
    const Tensor target = patchify_batch(images, batch, c.in_channels, c.image_rows, c.image_cols, c.patch_size);
    const Tensor visible = gather_tokens(enc.embed_patches(target), mask.visible);
    const Tensor latent = enc.encode_tokens(visible);
    MaeOutput out;
    out.encoder_tokens = latent.dim(1);
    const Tensor z = linear(latent, model.dec_embed_w, model.dec_embed_b);
    const Tensor cls = slice_tokens(z, 0, 1);
    const Tensor full = scatter_tokens(slice_tokens(z, 1, z.dim(1) - 1), mask.visible, n, model.mask_token);
    Tensor x = add_bias(cat_tokens(cls, full), model.dec_pos);
    for (const auto& b : model.dec_blocks) x = b.forward(x, model.mae.decoder_heads);
    x = layer_norm(x, model.dec_norm_g, model.dec_norm_b);
    out.pred = linear(slice_tokens(x, 1, n), model.pred_w, model.pred_b);
    out.target = target;
    out.loss = masked_mse(out.pred, target, mask.masked);
    return out;
}

nn::Checkpoint PretrainResult::checkpoint() const {
    nn::Checkpoint c = model.encoder.to_checkpoint();
    c.trace = {{"mae_loss", loss_trace}, {"encoder_tokens", encoder_tokens}, {"mae", to_json(model.mae)}};
    return c;
}

PretrainResult mae_pretrain(const ViTConfig& cfg, const MAEConfig& mae, const LabeledDataset& frames,
                            const PretrainHyper& hyper) {
    hyper.validate();
    if (frames.samples.empty()) throw ValidationError("mae_pretrain: no frames");
    PretrainResult r{MAE::init(cfg, mae, hyper.seed), {}, {}};
    ParamList params = r.model.parameters();
    AdamW opt(params, AdamWConfig{hyper.learning_rate, hyper.weight_decay});
    Rng rng(mix_seed(hyper.seed, 0x5A3F));
    const int n = cfg.num_patches();
    const int masked = mae.mask_count(n);
    std::vector<std::size_t> order(frames.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::size_t cursor = 0;
    std::vector<std::size_t> idx;
    for (int step = 0; step < hyper.steps; ++step) {
        idx.clear();
        while (idx.size() < static_cast<std::size_t>(hyper.batch_size) && idx.size() < order.size()) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        const int b = static_cast<int>(idx.size());
        const auto images = gather_images(frames, idx, cfg.image_rows, cfg.image_cols, cfg.in_channels);
        const PatchMask mask = sample_mask(b, n, masked, rng);
        MaeOutput out = mae_forward(r.model, images, b, mask);
        zero_grad(params);
        out.loss.backward();
        opt.step(params);
        r.loss_trace.push_back(out.loss.item());
        r.encoder_tokens.push_back(out.encoder_tokens);
    }
    return r;
}

}  // namespace psm::models
