#pragma once

#include <array>
#include <filesystem>
#include <string_view>
#include <vector>

#include "psm/data.hpp"

namespace psm::features {

inline constexpr int kNumFeatures = 9;
inline constexpr double kActivityThreshold = 0.02;

/// Fixed order:
///   0 total_pressure   1 cop_row        2 cop_col
///   3 spread_row       4 spread_col     5 active_fraction
///   6 lr_asymmetry     7 upper_share    8 lower_share
using FeatureVector = std::array<double, kNumFeatures>;

const std::array<std::string_view, kNumFeatures>& feature_names();

/// `section_rows` splits the frame into the upper/lower shares; an all-zero
/// frame maps to a centred COP with zero spreads, asymmetry and shares.
FeatureVector extract_features(const PressureFrame& frame, int section_rows);

struct FeatureTable {
    std::vector<FeatureVector> rows;
    std::vector<int> labels;  // class indices
    std::vector<std::string> patients;
    std::vector<double> timestamps;
};

FeatureTable extract_table(const LabeledDataset& ds);

/// `features.csv`: a `#` comment naming the feature order, then
/// patient,t,label,f0..f8.
void write_features(const FeatureTable& table, const std::filesystem::path& path);
FeatureTable read_features(const std::filesystem::path& path);

}  // namespace psm::features
