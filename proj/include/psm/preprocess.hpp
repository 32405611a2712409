#pragma once

#include <vector>

#include "psm/data.hpp"
#include "psm/sync.hpp"

namespace psm::prep {

struct GridSize {
    int rows = 0;
    int cols = 0;
};

struct PreprocessParams {
    double target_rate_hz = 1.0;
    double transient_margin_s = 5.0;
    double dedup_epsilon = 0.01;
    bool resize = true;
    GridSize resize_target{18, 18};
    GridSize pad_target{64, 64};

    void validate() const;
};

struct LabeledFrame {
    PressureFrame frame;
    PoseLabel label = PoseLabel::Supine;
};

/// Nearest-frame decimation onto the whole multiples of 1/target_rate_hz
/// inside the input span. Each input frame is emitted at most once.
std::vector<PressureFrame> downsample(const std::vector<PressureFrame>& frames, double target_rate_hz);

/// Keeps frames lying inside a non-Transient interval shrunk by `margin_s` at
/// both ends, labelled with that interval's pose.
std::vector<LabeledFrame> drop_transients(const std::vector<PressureFrame>& frames, const AnnotationLog& log,
                                          double margin_s);

/// Mean absolute per-sensel difference.
double mean_abs_diff(const PressureFrame& a, const PressureFrame& b);

/// Streaming near-duplicate removal against the last kept sample; a label
/// change always keeps.
std::vector<LabeledFrame> dedup(const std::vector<LabeledFrame>& samples, double epsilon);

PressureFrame resize_bilinear(const PressureFrame& frame, int rows, int cols);

/// Zero-pads to rows x cols with the source centred; odd leftovers go to the
/// bottom/right.
PressureFrame pad_to_target(const PressureFrame& frame, int rows, int cols);

/// downsample -> drop_transients -> dedup -> optional resize for one night.
LabeledDataset preprocess_night(const sync::AlignedNight& night, const PreprocessParams& p = {});

/// Concatenates per-night datasets in input order; nights run on up to `jobs` threads.
LabeledDataset preprocess_nights(const std::vector<sync::AlignedNight>& nights, const PreprocessParams& p = {},
                                 int jobs = 1);

/// Pads every frame of a dataset (e.g. 32x64 external frames to 64x64).
LabeledDataset pad_dataset(const LabeledDataset& ds, int rows, int cols);

/// Resizes every frame of a dataset.
LabeledDataset resize_dataset(const LabeledDataset& ds, int rows, int cols);

}  // namespace psm::prep
