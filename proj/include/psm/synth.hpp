#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "psm/data.hpp"

namespace psm::synth {

/// Body model: two Gaussian load blobs (shoulders, hips). Positions are
/// fractions of the grid height, spreads fractions of the grid extent.
struct BodyParams {
    double shoulder_row = 0.27;
    double hip_row = 0.60;
    double row_spread = 0.085;
    double col_spread = 0.16;
    double shoulder_weight = 0.45;  // hips get the remainder
    double mean_load = 0.08;        // template total = mean_load * rows * cols
};

/// Noise-free pressure pattern for one pose. Every pose template carries the
/// same total load. Transient is rejected.
PressureFrame pose_template(PoseLabel pose, const SensorGeometry& geometry, const BodyParams& body = {});

struct PoseSegment {
    double duration_s = 0.0;
    PoseLabel pose = PoseLabel::Supine;
};

struct BreathingParams {
    double rate_hz = 0.25;
    double amplitude = 0.03;
};

struct BiocalParams {
    double time_s = 4500.0;  // centre of the maneuver
    double amplitude = 0.15;
    double duration_s = 60.0;
};

struct SynthConfig {
    std::uint64_t seed = 0;
    int n_patients = 1;
    std::string patient_id = "P000";
    double night_duration_s = 28800.0;
    std::optional<double> drift_s;  // drawn from [-5, 5] when unset
    double entry_time_s = 3600.0;
    double exit_time_s = 27000.0;
    std::optional<std::vector<PoseSegment>> pose_schedule;  // random when unset
    double mean_dwell_s = 1800.0;
    double transition_duration_s = 8.0;
    BreathingParams breathing;
    BiocalParams biocal;
    double noise_sigma = 0.01;
    double sample_rate_hz = 10.0;
    SensorGeometry geometry = SensorGeometry::composite();
    bool vary_body = true;  // per-night jitter of BodyParams

    void validate() const;
};

struct GroundTruth {
    std::string patient_id;
    double true_drift_s = 0.0;
    double true_entry_s = 0.0;
    double true_exit_s = 0.0;
    double true_biocal_s = 0.0;
    double log_shift_s = 0.0;
    std::vector<PoseInterval> intervals;  // upper clock; Transient marks cross-fades
    BodyParams body;
};

std::pair<NightRecording, GroundTruth> generate_night(const SynthConfig& cfg);

/// `cfg.n_patients` nights, patient i seeded with mix_seed(cfg.seed, i) and
/// named P000, P001, ...
std::vector<std::pair<NightRecording, GroundTruth>> generate_cohort(const SynthConfig& cfg);

/// Independent labelled frames (no night structure), e.g. a higher-resolution
/// stand-in for an external pre-training corpus.
struct StaticSetConfig {
    SensorGeometry geometry{36, 18, 18};
    int n_subjects = 10;
    int frames_per_subject = 200;
    double noise_sigma = 0.01;
    double breathing_amplitude = 0.03;
    std::uint64_t seed = 0;
    std::string id_prefix = "S";

    void validate() const;
};

/// Subject s gets jittered body parameters from mix_seed(seed, s); each frame
/// draws a pose, a breathing phase and sensor noise.
LabeledDataset generate_static_dataset(const StaticSetConfig& cfg);

std::string truth_to_json(const GroundTruth& truth);
GroundTruth truth_from_json(const std::string& text);

}  // namespace psm::synth
