#include "psm/models/tcn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace psm::models {

using namespace psm::nn;

void TcnConfig::validate() const {
    if (frame_dim < 1 || window_len < 1 || filters < 1 || kernel_size < 1 || hidden < 1 || num_classes < 1)
        throw ValidationError("TcnConfig: all sizes must be positive");
    if (window_len < kernel_size)
        throw ValidationError("TcnConfig: window_len " + std::to_string(window_len) + " is shorter than kernel_size " +
                              std::to_string(kernel_size));
}

nlohmann::json to_json(const TcnConfig& c) {
    return {{"frame_dim", c.frame_dim}, {"window_len", c.window_len}, {"filters", c.filters},
            {"kernel_size", c.kernel_size}, {"hidden", c.hidden}, {"num_classes", c.num_classes}};
}

TcnConfig tcn_config_from_json(const nlohmann::json& j) {
    TcnConfig c;
    try {
        c.frame_dim = j.at("frame_dim").get<int>();
        c.window_len = j.at("window_len").get<int>();
        c.filters = j.at("filters").get<int>();
        c.kernel_size = j.at("kernel_size").get<int>();
        c.hidden = j.at("hidden").get<int>();
        c.num_classes = j.at("num_classes").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("TCN config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_param(Rng& rng, Shape s, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(nn::numel(s));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from(std::move(s), std::move(v), true);
}

}  // namespace

Tcn Tcn::init(const TcnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Tcn m;
    m.config = cfg;
    Rng rng(seed);
    const int fan = cfg.kernel_size * cfg.frame_dim;
    m.conv_w = uniform_param(rng, {cfg.filters, fan}, fan);
    m.conv_b = uniform_param(rng, {cfg.filters}, fan);
    m.fc_w = uniform_param(rng, {cfg.hidden, cfg.filters}, cfg.filters);
    m.fc_b = uniform_param(rng, {cfg.hidden}, cfg.filters);
    m.out_w = uniform_param(rng, {cfg.num_classes, cfg.hidden}, cfg.hidden);
    m.out_b = uniform_param(rng, {cfg.num_classes}, cfg.hidden);
    return m;
}

ParamList Tcn::parameters() {
    ParamList out;
    visit([&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
    return out;
}

Tensor Tcn::forward_steps(const Tensor& windows, int steps) const {
    if (windows.rank() != 3 || windows.dim(2) != config.frame_dim)
        throw ValidationError("TCN: windows " + shape_str(windows.shape()) + " do not match frame_dim " +
                              std::to_string(config.frame_dim));
    if (windows.dim(1) < config.kernel_size)
        throw ValidationError("TCN: window of " + std::to_string(windows.dim(1)) + " frames is shorter than kernel_size " +
                              std::to_string(config.kernel_size));
    const Tensor cols = unfold_causal(windows, config.kernel_size, steps);
    const Tensor h = relu(linear(cols, conv_w, conv_b));
    return linear(relu(linear(h, fc_w, fc_b)), out_w, out_b);
}

Tensor Tcn::forward(const Tensor& windows) const {
    return reshape(forward_steps(windows, 1), {windows.dim(0), config.num_classes});
}

Checkpoint Tcn::to_checkpoint() const {
    Checkpoint c;
    c.kind = "tcn";
    c.config = to_json(config);
    Tcn copy = *this;
    copy.visit([&](const std::string& name, Tensor& t) { c.params.push_back({name, t.clone(false)}); });
    return c;
}

Tcn Tcn::from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "tcn") throw FormatError("expected a tcn checkpoint, got '" + ckpt.kind + "'");
    Tcn m = init(tcn_config_from_json(ckpt.config), 0);
    m.visit([&](const std::string& name, Tensor& t) {
        const Tensor& src = ckpt.param(name);
        if (src.shape() != t.shape()) throw FormatError("checkpoint parameter " + name + " has the wrong shape");
        t = src.clone(true);
    });
    return m;
}

WindowSet make_windows(const LabeledDataset& ds, int window_len, bool pad_start) {
    if (window_len < 1) throw ValidationError("window_len must be positive");
    WindowSet w;
    w.window_len = window_len;
    w.frame_dim = ds.samples.empty() ? 0 : static_cast<int>(ds.samples.front().frame.size());
    std::size_t run_start = 0;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        if (i > 0 && ds.samples[i].patient_id != ds.samples[i - 1].patient_id) run_start = i;
        if (pad_start || i + 1 >= run_start + static_cast<std::size_t>(window_len)) {
            w.last.push_back(i);
            w.first.push_back(run_start);
            w.labels.push_back(class_index(ds.samples[i].label));
        }
    }
    return w;
}

Tensor window_batch(const LabeledDataset& ds, const WindowSet& w, std::span<const std::size_t> which) {
    const auto L = static_cast<std::size_t>(w.window_len);
    const auto C = static_cast<std::size_t>(w.frame_dim);
    std::vector<double> out;
    out.reserve(which.size() * L * C);
    for (std::size_t k : which) {
        const std::size_t last = w.last.at(k);
        const std::size_t first = w.first.at(k);
        for (std::size_t step = 0; step < L; ++step) {
            if (last + step + 1 < L + first) {
                out.insert(out.end(), C, 0.0);
                continue;
            }
            const auto v = ds.samples[last + step + 1 - L].frame.values();
            if (v.size() != C) throw ValidationError("window_batch: frames of differing size");
            out.insert(out.end(), v.begin(), v.end());
        }
    }
    return Tensor::from({static_cast<int>(which.size()), w.window_len, w.frame_dim}, std::move(out));
}

TcnResult train_tcn(const TcnConfig& cfg, const LabeledDataset& train, const FinetuneHyper& hyper) {
    hyper.validate();
    const WindowSet w = make_windows(train, cfg.window_len, true);
    if (w.last.empty()) throw ValidationError("train_tcn: empty training set");
    if (w.frame_dim != cfg.frame_dim)
        throw ValidationError("train_tcn: frames have " + std::to_string(w.frame_dim) + " values, config expects " +
                              std::to_string(cfg.frame_dim));
    TcnResult r{Tcn::init(cfg, hyper.seed), {}};
    ParamList params = r.model.parameters();
    AdamW opt(params, AdamWConfig{hyper.learning_rate, hyper.weight_decay});
    Rng rng(mix_seed(hyper.seed, 0x7C4));
    std::vector<std::size_t> order(w.last.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> labels;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(hyper.batch_size)) {
            const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(hyper.batch_size));
            const std::span<const std::size_t> idx(order.data() + s, e - s);
            labels.clear();
            for (std::size_t k : idx) labels.push_back(w.labels[k]);
            Tensor loss = cross_entropy(r.model.forward(window_batch(train, w, idx)), labels);
            zero_grad(params);
            loss.backward();
            opt.step(params);
            loss_sum += loss.item() * static_cast<double>(idx.size());
        }
        r.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    }
    return r;
}

std::vector<int> tcn_predict(const Tcn& model, const LabeledDataset& ds, const WindowSet& w) {
    NoGradGuard guard;
    std::vector<int> out;
    std::vector<std::size_t> idx;
    const auto k = static_cast<std::size_t>(model.config.num_classes);
    for (std::size_t s = 0; s < w.last.size(); s += 128) {
        const std::size_t e = std::min(w.last.size(), s + 128);
        idx.resize(e - s);
        std::iota(idx.begin(), idx.end(), s);
        const Tensor logits = model.forward(window_batch(ds, w, idx));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto row = logits.data().subspan(i * k, k);
            out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
        }
    }
    return out;
}

}  // namespace psm::models
