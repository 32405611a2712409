#pragma once

#include <cstdint>
#include <vector>

#include "psm/eval/harness.hpp"
#include "psm/models/mae.hpp"

namespace psm::eval {

struct TransferConfig {
    /// Target-domain model; the source model shares its patch size and width.
    models::ViTConfig target;
    /// Source frames are replicated to this many channels for pre-training
    /// and collapsed back to one afterwards (3 mirrors RGB backbones).
    int source_channels = 3;
    models::MAEConfig mae;
    models::PretrainHyper pretrain;
    models::FinetuneHyper finetune;
    double label_fraction = 0.1;
    int folds = 5;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    int jobs = 1;

    void validate() const;
};

struct TransferArm {
    std::vector<EvalReport> reports;  // seed-major, then fold
    std::vector<std::uint64_t> init_checksums;  // backbone before fine-tuning
    double mean_accuracy = 0.0;
    double mean_macro_f1 = 0.0;
};

struct TransferResult {
    TransferArm scratch;     // arm A
    TransferArm pretrained;  // arm B
    std::vector<std::vector<std::size_t>> test_index;  // shared by both arms
    std::vector<std::vector<double>> pretrain_loss;    // per seed

    nlohmann::json to_json() const;
};

/// Arm A fine-tunes from seeded random init; arm B pre-trains an MAE on the
/// source frames (labels ignored), collapses input channels, resamples
/// positional embeddings to the target grid and fine-tunes identically. Both
/// arms share folds, labelled subsets, head init and shuffling seeds.
TransferResult run_transfer_experiment(const LabeledDataset& source, const LabeledDataset& target,
                                       const TransferConfig& cfg);

/// Seeded subset holding ceil(fraction * n) samples, kept in dataset order.
LabeledDataset label_subset(const LabeledDataset& ds, double fraction, std::uint64_t seed);

}  // namespace psm::eval
