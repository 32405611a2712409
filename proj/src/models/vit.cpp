#include "psm/models/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "psm/grid.hpp"

namespace psm::models {

using namespace psm::nn;

namespace {

constexpr std::uint64_t kHeadStream = 0x4EAD;
constexpr std::uint64_t kPatchStream = 0x9A7C;

Tensor param(Shape s, double v = 0.0) { return Tensor::full(std::move(s), v, true); }

void init_head(ViT& m, std::uint64_t seed) {
    Rng rng(mix_seed(seed, kHeadStream));
    m.head_w = trunc_normal(rng, {m.config.num_classes, m.config.embed_dim}, 0.02);
    m.head_b = param({m.config.num_classes});
}

}  // namespace

void ViTConfig::validate() const {
    if (image_rows < 1 || image_cols < 1 || in_channels < 1 || patch_size < 1 || embed_dim < 1 || depth < 0 ||
        heads < 1 || mlp_ratio < 1 || num_classes < 1)
        throw ValidationError("ViTConfig: all sizes must be positive");
    if (image_rows % patch_size || image_cols % patch_size)
        throw ValidationError("ViTConfig: patch_size " + std::to_string(patch_size) + " does not divide image " +
                              std::to_string(image_rows) + "x" + std::to_string(image_cols));
    if (embed_dim % heads)
        throw ValidationError("ViTConfig: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                              std::to_string(heads));
}

nlohmann::json to_json(const ViTConfig& c) {
    return {{"image_rows", c.image_rows}, {"image_cols", c.image_cols}, {"in_channels", c.in_channels},
            {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},   {"depth", c.depth},
            {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}};
}

ViTConfig vit_config_from_json(const nlohmann::json& j) {
    ViTConfig c;
    try {
        c.image_rows = j.at("image_rows").get<int>();
        c.image_cols = j.at("image_cols").get<int>();
        c.in_channels = j.at("in_channels").get<int>();
        c.patch_size = j.at("patch_size").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.depth = j.at("depth").get<int>();
        c.heads = j.at("heads").get<int>();
        c.mlp_ratio = j.at("mlp_ratio").get<int>();
        c.num_classes = j.at("num_classes").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("ViT config: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<double> patchify(std::span<const double> image, int channels, int rows, int cols, int patch) {
    if (patch < 1 || rows % patch || cols % patch)
        throw ValidationError("patchify: patch " + std::to_string(patch) + " does not divide " + std::to_string(rows) +
                              "x" + std::to_string(cols));
    if (image.size() != static_cast<std::size_t>(channels * rows * cols))
        throw ValidationError("patchify: image has " + std::to_string(image.size()) + " values, expected " +
                              std::to_string(channels * rows * cols));
    const int gr = rows / patch, gc = cols / patch;
    std::vector<double> out;
    out.reserve(image.size());
    for (int pr = 0; pr < gr; ++pr)
        for (int pc = 0; pc < gc; ++pc)
            for (int ch = 0; ch < channels; ++ch)
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        out.push_back(image[static_cast<std::size_t>((ch * rows + pr * patch + y) * cols + pc * patch + x)]);
    return out;
}

std::vector<double> unpatchify(std::span<const double> patches, int channels, int rows, int cols, int patch) {
    if (patch < 1 || rows % patch || cols % patch)
        throw ValidationError("unpatchify: patch " + std::to_string(patch) + " does not divide " +
                              std::to_string(rows) + "x" + std::to_string(cols));
    if (patches.size() != static_cast<std::size_t>(channels * rows * cols))
        throw ValidationError("unpatchify: wrong value count " + std::to_string(patches.size()));
    const int gr = rows / patch, gc = cols / patch;
    std::vector<double> out(patches.size());
    std::size_t k = 0;
    for (int pr = 0; pr < gr; ++pr)
        for (int pc = 0; pc < gc; ++pc)
            for (int ch = 0; ch < channels; ++ch)
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        out[static_cast<std::size_t>((ch * rows + pr * patch + y) * cols + pc * patch + x)] = patches[k++];
    return out;
}

Tensor patchify_batch(std::span<const double> images, int batch, int channels, int rows, int cols, int patch) {
    const auto per = static_cast<std::size_t>(channels * rows * cols);
    if (images.size() != per * static_cast<std::size_t>(batch))
        throw ValidationError("patchify_batch: " + std::to_string(images.size()) + " values for " +
                              std::to_string(batch) + " images of " + std::to_string(per));
    std::vector<double> out;
    out.reserve(images.size());
    for (int b = 0; b < batch; ++b) {
        const auto p = patchify(images.subspan(static_cast<std::size_t>(b) * per, per), channels, rows, cols, patch);
        out.insert(out.end(), p.begin(), p.end());
    }
    const int n = (rows / patch) * (cols / patch);
    return Tensor::from({batch, n, channels * patch * patch}, std::move(out));
}

Tensor trunc_normal(Rng& rng, Shape shape, double std) {
    std::vector<double> v(nn::numel(shape));
    for (auto& x : v) {
        double z = rng.normal();
        while (std::abs(z) > 2.0) z = rng.normal();
        x = z * std;
    }
    return Tensor::from(std::move(shape), std::move(v), true);
}

Block Block::init(int dim, int mlp_ratio, Rng& rng) {
    Block b;
    const int hidden = dim * mlp_ratio;
    b.ln1_g = param({dim}, 1.0);
    b.ln1_b = param({dim});
    b.qkv_w = trunc_normal(rng, {3 * dim, dim}, 0.02);
    b.qkv_b = param({3 * dim});
    b.proj_w = trunc_normal(rng, {dim, dim}, 0.02);
    b.proj_b = param({dim});
    b.ln2_g = param({dim}, 1.0);
    b.ln2_b = param({dim});
    b.fc1_w = trunc_normal(rng, {hidden, dim}, 0.02);
    b.fc1_b = param({hidden});
    b.fc2_w = trunc_normal(rng, {dim, hidden}, 0.02);
    b.fc2_b = param({dim});
    return b;
}

Tensor Block::forward(const Tensor& x, int heads) const {
    const int dh = x.dim(2) / heads;
    const Tensor h = layer_norm(x, ln1_g, ln1_b);
    const Tensor qkv = linear(h, qkv_w, qkv_b);
    const Tensor q = split_heads(qkv, heads, 0);
    const Tensor k = split_heads(qkv, heads, 1);
    const Tensor v = split_heads(qkv, heads, 2);
    const Tensor att = softmax(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))));
    const Tensor o = merge_heads(bmm(att, v), heads);
    const Tensor x1 = add(x, linear(o, proj_w, proj_b));
    const Tensor h2 = layer_norm(x1, ln2_g, ln2_b);
    return add(x1, linear(gelu(linear(h2, fc1_w, fc1_b)), fc2_w, fc2_b));
}

ViT ViT::init(const ViTConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ViT m;
    m.config = cfg;
    const int d = cfg.embed_dim;
    Rng patch_rng(mix_seed(seed, kPatchStream));
    m.patch_w = trunc_normal(patch_rng, {d, cfg.patch_dim()}, 0.02);
    m.patch_b = param({d});
    Rng rng(seed);
    m.cls_token = trunc_normal(rng, {1, d}, 0.02);
    m.pos_embed = trunc_normal(rng, {1 + cfg.num_patches(), d}, 0.02);
    for (int i = 0; i < cfg.depth; ++i) m.blocks.push_back(Block::init(d, cfg.mlp_ratio, rng));
    m.norm_g = param({d}, 1.0);
    m.norm_b = param({d});
    init_head(m, seed);
    return m;
}

ParamList ViT::parameters() {
    ParamList out;
    visit([&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
    return out;
}

ParamList ViT::backbone_parameters() {
    ParamList out;
    visit([&](const std::string& name, Tensor& t) {
        if (!name.starts_with("head.")) out.push_back({name, t});
    });
    return out;
}

ViT ViT::clone() const {
    ViT out = *this;
    out.visit([](const std::string&, Tensor& t) { t = t.clone(true); });
    return out;
}

Tensor ViT::embed_patches(const Tensor& patches) const {
    if (patches.rank() != 3 || patches.dim(1) != config.num_patches() || patches.dim(2) != config.patch_dim())
        throw ValidationError("ViT: patches " + shape_str(patches.shape()) + " do not match config (N=" +
                              std::to_string(config.num_patches()) + ", patch_dim=" + std::to_string(config.patch_dim()) +
                              ")");
    return add_bias(linear(patches, patch_w, patch_b), slice_rows(pos_embed, 1, config.num_patches()));
}

Tensor ViT::encode_tokens(const Tensor& tokens) const {
    const Tensor cls = add(cls_token, slice_rows(pos_embed, 0, 1));
    Tensor x = cat_tokens(expand_batch(cls, tokens.dim(0)), tokens);
    for (const auto& b : blocks) x = b.forward(x, config.heads);
    return layer_norm(x, norm_g, norm_b);
}

Tensor ViT::encode(std::span<const double> images, int batch) const {
    const Tensor patches = patchify_batch(images, batch, config.in_channels, config.image_rows, config.image_cols,
                                          config.patch_size);
    return encode_tokens(embed_patches(patches));
}

Tensor ViT::forward(std::span<const double> images, int batch) const {
    const Tensor enc = encode(images, batch);
    const Tensor cls = reshape(slice_tokens(enc, 0, 1), {batch, config.embed_dim});
    return linear(cls, head_w, head_b);
}

Checkpoint ViT::to_checkpoint() const {
    Checkpoint c;
    c.kind = "vit";
    c.config = to_json(config);
    ViT copy = *this;
    copy.visit([&](const std::string& name, Tensor& t) { c.params.push_back({name, t.clone(false)}); });
    return c;
}

ViT ViT::from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "vit") throw FormatError("expected a vit checkpoint, got '" + ckpt.kind + "'");
    ViT m = init(vit_config_from_json(ckpt.config), 0);
    m.visit([&](const std::string& name, Tensor& t) {
        const Tensor& src = ckpt.param(name);
        if (src.shape() != t.shape())
            throw FormatError("checkpoint parameter " + name + " has shape " + shape_str(src.shape()) + ", expected " +
                              shape_str(t.shape()));
        t = src.clone(true);
    });
    return m;
}

std::vector<double> adapt_positional_embeddings(std::span<const double> values, int r1, int c1, int dim, int r2,
                                                int c2) {
    if (r1 < 1 || c1 < 1 || r2 < 1 || c2 < 1 || dim < 1)
        throw ValidationError("adapt_positional_embeddings: degenerate grid " + std::to_string(r1) + "x" +
                              std::to_string(c1) + " -> " + std::to_string(r2) + "x" + std::to_string(c2));
    if (values.size() != static_cast<std::size_t>(r1 * c1 * dim))
        throw ValidationError("adapt_positional_embeddings: " + std::to_string(values.size()) + " values for a " +
                              std::to_string(r1) + "x" + std::to_string(c1) + "x" + std::to_string(dim) + " grid");
    return bilinear_resize(values, r1, c1, dim, r2, c2);
}

ViT adapt_to_image(const ViT& model, int image_rows, int image_cols) {
    ViTConfig cfg = model.config;
    cfg.image_rows = image_rows;
    cfg.image_cols = image_cols;
    cfg.validate();
    ViT out = model.clone();
    out.config = cfg;
    const int d = cfg.embed_dim;
    const auto src = model.pos_embed.data();
    const auto grid = adapt_positional_embeddings(src.subspan(static_cast<std::size_t>(d)), model.config.grid_rows(),
                                                  model.config.grid_cols(), d, cfg.grid_rows(), cfg.grid_cols());
    std::vector<double> pos(src.begin(), src.begin() + d);
    pos.insert(pos.end(), grid.begin(), grid.end());
    out.pos_embed = Tensor::from({1 + cfg.num_patches(), d}, std::move(pos), true);
    return out;
}

Tensor collapse_input_channels(const Tensor& weights, int channels) {
    if (channels != 3) throw ValidationError("collapse_input_channels: expected 3 input channels, got " + std::to_string(channels));
    if (weights.rank() != 2 || weights.dim(1) % channels)
        throw ValidationError("collapse_input_channels: weights " + shape_str(weights.shape()) +
                              " are not (out, 3 * patch_pixels)");
    const auto d = static_cast<std::size_t>(weights.dim(0));
    const auto pix = static_cast<std::size_t>(weights.dim(1) / channels);
    const auto w = weights.data();
    std::vector<double> out(d * pix, 0.0);
    for (std::size_t o = 0; o < d; ++o)
        for (std::size_t ch = 0; ch < static_cast<std::size_t>(channels); ++ch)
            for (std::size_t p = 0; p < pix; ++p) out[o * pix + p] += w[(o * static_cast<std::size_t>(channels) + ch) * pix + p];
    return Tensor::from({static_cast<int>(d), static_cast<int>(pix)}, std::move(out), true);
}

ViT collapse_channels(const ViT& model) {
    ViT out = model.clone();
    out.patch_w = collapse_input_channels(model.patch_w, model.config.in_channels);
    out.config.in_channels = 1;
    return out;
}

ViT replace_head(const ViT& model, int num_classes, const HeadOptions& opt) {
    if (num_classes < 1) throw ValidationError("replace_head: num_classes must be positive");
    ViTConfig cfg = model.config;
    cfg.num_classes = num_classes;
    if (opt.mode == HeadMode::Reinit) return ViT::init(cfg, opt.seed);
    ViT out = model.clone();
    out.config = cfg;
    init_head(out, opt.seed);
    if (opt.vitpose_style) {
        Rng rng(mix_seed(opt.seed, kPatchStream));
        out.patch_w = trunc_normal(rng, {cfg.embed_dim, cfg.patch_dim()}, 0.02);
        out.patch_b = param({cfg.embed_dim});
    }
    return out;
}

ViT replace_head(const Checkpoint& ckpt, int num_classes, const HeadOptions& opt) {
    const ViTConfig cfg = vit_config_from_json(ckpt.config);
    const Tensor& pw = ckpt.param("patch_embed.weight");
    if (pw.rank() != 2 || pw.dim(0) != cfg.embed_dim)
        throw ValidationError("replace_head: checkpoint patch embedding " + shape_str(pw.shape()) +
                              " is incompatible with embed_dim " + std::to_string(cfg.embed_dim));
    return replace_head(ViT::from_checkpoint(ckpt), num_classes, opt);
}

std::vector<double> gather_images(const LabeledDataset& ds, std::span<const std::size_t> index, int rows, int cols,
                                  int channels) {
    const auto per = static_cast<std::size_t>(rows * cols);
    std::vector<double> out;
    out.reserve(index.size() * per * static_cast<std::size_t>(channels));
    for (std::size_t i : index) {
        const auto& f = ds.samples.at(i).frame;
        if (f.rows() != rows || f.cols() != cols)
            throw ValidationError("frame " + std::to_string(f.rows()) + "x" + std::to_string(f.cols()) +
                                  " does not match model input " + std::to_string(rows) + "x" + std::to_string(cols));
        for (int ch = 0; ch < channels; ++ch) out.insert(out.end(), f.values().begin(), f.values().end());
    }
    return out;
}

void FinetuneHyper::validate() const {
    if (!(learning_rate > 0.0) || !(weight_decay >= 0.0) || epochs < 1 || batch_size < 1)
        throw ValidationError("finetune hyperparameters: need learning_rate > 0, weight_decay >= 0, epochs >= 1, batch_size >= 1");
}

nlohmann::json FinetuneResult::trace() const {
    return {{"epoch_loss", epoch_loss}, {"train_accuracy", train_accuracy}, {"valid_accuracy", valid_accuracy}};
}

Checkpoint FinetuneResult::checkpoint() const {
    Checkpoint c = model.to_checkpoint();
    c.optimizer = optimizer;
    c.trace = trace();
    return c;
}

void require_disjoint_patients(const LabeledDataset& a, const LabeledDataset& b) {
    const auto pa = a.patients();
    const std::set<std::string> sa(pa.begin(), pa.end());
    for (const auto& p : b.patients())
        if (sa.contains(p)) throw ValidationError("patient '" + p + "' appears in both training and evaluation data");
}

std::vector<int> labels_of(const LabeledDataset& ds) {
    std::vector<int> y;
    y.reserve(ds.samples.size());
    for (const auto& s : ds.samples) y.push_back(class_index(s.label));
    return y;
}

double accuracy(std::span<const int> pred, std::span<const int> truth) {
    if (pred.size() != truth.size()) throw ValidationError("accuracy: length mismatch");
    if (pred.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
    return static_cast<double>(ok) / static_cast<double>(pred.size());
}

namespace {

int argmax_row(std::span<const double> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

std::vector<int> predict(const ViT& model, const LabeledDataset& ds, int batch_size) {
    NoGradGuard guard;
    const auto& c = model.config;
    std::vector<int> out;
    out.reserve(ds.samples.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < ds.samples.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(ds.samples.size(), start + static_cast<std::size_t>(batch_size));
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto images = gather_images(ds, idx, c.image_rows, c.image_cols, c.in_channels);
        const Tensor logits = model.forward(images, static_cast<int>(idx.size()));
        const auto k = static_cast<std::size_t>(c.num_classes);
        for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(argmax_row(logits.data().subspan(i * k, k)));
    }
    return out;
}

FinetuneResult finetune(const ViT& model, const LabeledDataset& train, const LabeledDataset& valid,
                        const FinetuneHyper& hyper) {
    hyper.validate();
    require_disjoint_patients(train, valid);
    if (train.samples.empty()) throw ValidationError("finetune: empty training set");
    FinetuneResult r{model.clone(), {}, {}, {}, {}};
    ParamList params = r.model.parameters();
    AdamW opt(params, AdamWConfig{hyper.learning_rate, hyper.weight_decay});
    Rng rng(hyper.seed);
    const auto& c = r.model.config;
    const auto y = labels_of(train);
    const auto yv = labels_of(valid);
    std::vector<std::size_t> order(train.samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> batch_labels;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            batch_labels.clear();
            for (std::size_t i : idx) batch_labels.push_back(y[i]);
            const auto images = gather_images(train, idx, c.image_rows, c.image_cols, c.in_channels);
            Tensor loss = cross_entropy(r.model.forward(images, static_cast<int>(idx.size())), batch_labels);
            zero_grad(params);
            loss.backward();
            opt.step(params);
            loss_sum += loss.item() * static_cast<double>(idx.size());
        }
        r.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
        if (hyper.track_train_accuracy) r.train_accuracy.push_back(accuracy(predict(r.model, train), y));
        if (!valid.samples.empty()) r.valid_accuracy.push_back(accuracy(predict(r.model, valid), yv));
    }
    r.optimizer = opt.state();
    return r;
}

}  // namespace psm::models
