#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psm/data.hpp"

namespace psm::sync {

struct SyncParams {
    double occupancy_threshold = 0.05;  // mean normalized pressure over a section
    double hold_s = 10.0;
    double join_max_gap_s = 0.2;
    double band_low_hz = 0.1;
    double band_high_hz = 0.5;
    double biocal_window_s = 1800.0;  // half-width around the log hint
    bool use_log_hint = true;
    NormalizeMode normalize = NormalizeMode::Strict;

    void validate(double sample_rate_hz = 10.0) const;
};

/// Earliest timestamp from which the section's mean pressure stays above the
/// occupancy threshold for at least `hold_s`. Throws NoOccupancy.
double detect_bed_entry(const DaqStream& stream, const SyncParams& p = {});

/// Upper-minus-lower clock offset from the bed-entry event seen on both
/// sections. Adding it to a lower timestamp maps it onto the upper clock.
double estimate_stream_offset(const DaqStream& upper, const DaqStream& lower, const SyncParams& p = {});

/// Stacks each upper frame over the nearest (offset-corrected) lower frame.
/// Throws EmptyOverlap when nothing pairs.
std::vector<PressureFrame> composite_streams(const DaqStream& upper, const DaqStream& lower, double offset_s,
                                             const SyncParams& p = {});

struct BiocalDetection {
    double time_s = 0.0;
    double envelope_peak = 0.0;
    double envelope_median = 0.0;
    bool low_confidence = false;
};

/// Locates the respiratory maneuver as the strongest band-limited breathing
/// envelope inside the occupancy window.
BiocalDetection detect_biocalibration(const std::vector<PressureFrame>& frames, const SyncParams& p = {},
                                      std::optional<double> hint_s = std::nullopt);

/// Shifts every interval (and the biocal mark) by biocal_psm_s - log.biocal_time_s.
AnnotationLog align_annotations(const AnnotationLog& log, double biocal_psm_s);

struct AlignedNight {
    std::string patient_id;
    std::vector<PressureFrame> frames;
    double offset_s = 0.0;
    double log_shift_s = 0.0;  // PSM time minus log time
    BiocalDetection biocal;
    AnnotationLog log;  // on the PSM clock
};

/// Offset estimation, compositing, biocal detection and log alignment.
AlignedNight synchronize(const NightRecording& rec, const SyncParams& p = {});

void write_aligned(const AlignedNight& night, const std::filesystem::path& dir);
AlignedNight read_aligned(const std::filesystem::path& dir);

/// Time-weighted Jaccard between two labelled interval sets: seconds where
/// both carry the same label over seconds where either carries one.
double time_jaccard(const std::vector<PoseInterval>& a, const std::vector<PoseInterval>& b);

}  // namespace psm::sync
