#pragma once

#include <cassert>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "psm/common.hpp"

namespace psm {

/// Full-scale count reported by the mat electronics.
inline constexpr int kFullScaleCount = 2046;

struct SensorGeometry {
    int rows = 18;
    int cols = 8;
    int section_rows = 9;

    /// Two stacked DAQ sections of `section_rows` x `cols` each.
    static SensorGeometry composite(int section_rows = 9, int cols = 8) {
        return {2 * section_rows, cols, section_rows};
    }
    /// Geometry of one DAQ section.
    SensorGeometry section() const { return {section_rows, cols, section_rows}; }

    int size() const { return rows * cols; }
    void validate() const;
    friend bool operator==(const SensorGeometry&, const SensorGeometry&) = default;
};

struct RawFrame {
    double timestamp = 0.0;
    int rows = 0;
    int cols = 0;
    std::vector<std::int32_t> counts;  // row-major

    std::int32_t at(int r, int c) const { return counts[static_cast<std::size_t>(r * cols + c)]; }
    friend bool operator==(const RawFrame&, const RawFrame&) = default;
};

/// One timestamped grid of normalized pressures. Immutable once built; every
/// value lies in [0, 1] (checked in debug builds).
class PressureFrame {
public:
    PressureFrame() = default;
    PressureFrame(double timestamp, int rows, int cols, std::vector<double> values);

    double timestamp() const { return timestamp_; }
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::span<const double> values() const { return values_; }
    double at(int r, int c) const { return values_[static_cast<std::size_t>(r * cols_ + c)]; }
    std::size_t size() const { return values_.size(); }

    PressureFrame with_timestamp(double t) const { return {t, rows_, cols_, values_}; }
    friend bool operator==(const PressureFrame&, const PressureFrame&) = default;

private:
    double timestamp_ = 0.0;
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> values_;
};

enum class Section { Upper, Lower };

struct DaqStream {
    Section section = Section::Upper;
    double sample_rate_hz = 10.0;
    std::vector<RawFrame> frames;

    /// Checks strictly increasing timestamps, a positive rate and frame dimensions.
    void validate(const SensorGeometry& section_geometry) const;
    friend bool operator==(const DaqStream&, const DaqStream&) = default;
};

enum class PoseLabel { Left = 0, Right = 1, Supine = 2, Prone = 3, Transient = 4 };

inline constexpr int kNumPoses = 4;

std::string_view to_string(PoseLabel label);
PoseLabel parse_pose(std::string_view name);
/// Class index in [0, 4) for the four learnable poses.
int class_index(PoseLabel label);
PoseLabel pose_from_index(int index);

struct PoseInterval {
    double start_s = 0.0;
    double end_s = 0.0;
    PoseLabel label = PoseLabel::Supine;
    friend bool operator==(const PoseInterval&, const PoseInterval&) = default;
};

struct AnnotationLog {
    std::vector<PoseInterval> intervals;
    double biocal_time_s = 0.0;

    void validate() const;
    friend bool operator==(const AnnotationLog&, const AnnotationLog&) = default;
};

struct NightRecording {
    std::string patient_id;
    SensorGeometry geometry = SensorGeometry::composite();
    DaqStream upper{Section::Upper, 10.0, {}};
    DaqStream lower{Section::Lower, 10.0, {}};
    AnnotationLog log;

    void validate() const;
    friend bool operator==(const NightRecording&, const NightRecording&) = default;
};

struct Sample {
    PressureFrame frame;
    PoseLabel label = PoseLabel::Supine;
    std::string patient_id;
};

struct LabeledDataset {
    SensorGeometry geometry;
    std::vector<Sample> samples;

    void validate() const;
    /// Sorted unique patient ids.
    std::vector<std::string> patients() const;
    /// Samples whose patient id is in `ids`, order preserved.
    LabeledDataset subset(const std::vector<std::string>& ids) const;
};

enum class NormalizeMode { Strict, Lenient };

PressureFrame normalize_frame(const RawFrame& raw, NormalizeMode mode = NormalizeMode::Strict);

void write_recording(const NightRecording& rec, const std::filesystem::path& dir);
NightRecording read_recording(const std::filesystem::path& dir);

/// `dataset.csv` (patient,t,label,s0..) plus the `dataset.json` geometry sidecar.
void write_dataset(const LabeledDataset& ds, const std::filesystem::path& dir);
LabeledDataset read_dataset(const std::filesystem::path& dir);

enum class ExternalLayout { FramePerLine };

/// Reads plain-text frame-per-line files listed in `dir/manifest.json`.
/// Values are divided by the manifest's full-scale value.
LabeledDataset read_external_dataset(const std::filesystem::path& dir, const SensorGeometry& geometry,
                                     ExternalLayout layout = ExternalLayout::FramePerLine);

}  // namespace psm
