#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "psm/data.hpp"

namespace psm::models {

using Matrix = std::vector<std::vector<double>>;

struct ForestConfig {
    int n_trees = 100;
    int max_depth = 12;
    int min_leaf = 2;
    int features_per_split = 0;  // 0 selects floor(sqrt(d))
    bool bootstrap = true;
    std::uint64_t seed = 0;
    int num_classes = kNumPoses;

    void validate() const;
};

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    int label = 0;
};

struct Forest {
    ForestConfig config;
    int num_features = 0;
    std::vector<std::vector<TreeNode>> trees;

    nlohmann::json to_json() const;
    static Forest from_json(const nlohmann::json& j);
};

/// Bootstrap-aggregated Gini trees with per-split feature subsampling. A split
/// sends x[f] <= threshold left, where the threshold is an observed training
/// value, so predictions depend only on the order of each feature. Trees
/// train on up to `jobs` threads; tree t always uses stream t of the seed.
Forest train_forest(const Matrix& x, const std::vector<int>& y, const ForestConfig& cfg, int jobs = 1);
/// Majority vote; ties go to the lowest class index.
std::vector<int> forest_predict(const Forest& forest, const Matrix& x);

struct LinearHyper {
    double learning_rate = 0.05;
    double weight_decay = 1e-4;
    int epochs = 300;
    int num_classes = kNumPoses;

    void validate() const;
};

/// Multinomial logistic regression on standardized features.
struct LinearModel {
    std::vector<double> mean, scale;
    std::vector<double> weights;  // (num_classes, d)
    std::vector<double> bias;
    int num_classes = kNumPoses;
};

/// Full-batch AdamW on the mean cross-entropy.
LinearModel train_linear(const Matrix& x, const std::vector<int>& y, const LinearHyper& hyper);
std::vector<int> linear_predict(const LinearModel& model, const Matrix& x);

}  // namespace psm::models
