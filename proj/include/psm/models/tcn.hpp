#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psm/models/vit.hpp"

namespace psm::models {

struct TcnConfig {
    int frame_dim = 324;  // flattened 18x18
    int window_len = 30;
    int filters = 128;
    int kernel_size = 15;
    int hidden = 32;
    int num_classes = kNumPoses;

    void validate() const;
};

nlohmann::json to_json(const TcnConfig& c);
TcnConfig tcn_config_from_json(const nlohmann::json& j);

class Tcn {
public:
    TcnConfig config;
    Tensor conv_w;  // (filters, kernel_size * frame_dim), tap-major
    Tensor conv_b;
    Tensor fc_w, fc_b;    // (hidden, filters)
    Tensor out_w, out_b;  // (num_classes, hidden)

    static Tcn init(const TcnConfig& cfg, std::uint64_t seed);

    template <typename F>
    void visit(F&& f) {
        f(std::string("conv.weight"), conv_w);
        f(std::string("conv.bias"), conv_b);
        f(std::string("fc.weight"), fc_w);
        f(std::string("fc.bias"), fc_b);
        f(std::string("out.weight"), out_w);
        f(std::string("out.bias"), out_b);
    }
    ParamList parameters();

    /// (B, L, frame_dim) windows -> logits read at each of the last `steps`
    /// positions, shape (B, steps, num_classes).
    Tensor forward_steps(const Tensor& windows, int steps) const;
    /// Logits at the last position, (B, num_classes).
    Tensor forward(const Tensor& windows) const;

    nn::Checkpoint to_checkpoint() const;
    static Tcn from_checkpoint(const nn::Checkpoint& ckpt);
};

/// Sliding windows of consecutive retained frames of one patient, labelled by
/// the window's last frame.
struct WindowSet {
    int window_len = 0;
    int frame_dim = 0;
    std::vector<std::size_t> last;   // sample index of each window's last frame
    std::vector<std::size_t> first;  // first sample of that patient's run
    std::vector<int> labels;
};

/// Samples of each patient are taken in dataset order. Without `pad_start` a
/// window needs window_len real frames; with it every sample ends a window and
/// frames before the patient's first sample are zeros.
WindowSet make_windows(const LabeledDataset& ds, int window_len, bool pad_start = false);
/// (B, L, frame_dim) tensor for the given windows.
Tensor window_batch(const LabeledDataset& ds, const WindowSet& w, std::span<const std::size_t> which);

struct TcnResult {
    Tcn model;
    std::vector<double> epoch_loss;
};

TcnResult train_tcn(const TcnConfig& cfg, const LabeledDataset& train, const FinetuneHyper& hyper);
/// One prediction per window of `ds` (see make_windows).
std::vector<int> tcn_predict(const Tcn& model, const LabeledDataset& ds, const WindowSet& w);

}  // namespace psm::models
