#include "psm/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <thread>

#include "psm/grid.hpp"

namespace psm::prep {

void PreprocessParams::validate() const {
    if (!(target_rate_hz > 0.0)) throw ValidationError("preprocess: target rate must be positive");
    if (transient_margin_s < 0.0) throw ValidationError("preprocess: transient margin must be >= 0");
    if (dedup_epsilon < 0.0) throw ValidationError("preprocess: dedup epsilon must be >= 0");
    if (resize && (resize_target.rows < 1 || resize_target.cols < 1))
        throw ValidationError("preprocess: resize target must be >= 1x1");
    if (pad_target.rows < 1 || pad_target.cols < 1) throw ValidationError("preprocess: pad target must be >= 1x1");
}

std::vector<PressureFrame> downsample(const std::vector<PressureFrame>& frames, double target_rate_hz) {
    if (!(target_rate_hz > 0.0)) throw ValidationError("downsample: target rate must be positive");
    std::vector<PressureFrame> out;
    if (frames.empty()) return out;
    const double t0 = frames.front().timestamp();
    const double t1 = frames.back().timestamp();
    // Tolerate ms-rounded timestamps sitting a hair off the grid.
    const double eps = 1e-9 * std::max(1.0, std::abs(t1));
    auto m = static_cast<long long>(std::ceil(t0 * target_rate_hz - eps));
    std::size_t j = 0;
    std::size_t last_emitted = frames.size();
    for (;; ++m) {
        const double instant = static_cast<double>(m) / target_rate_hz;
        if (instant > t1 + eps) break;
        while (j + 1 < frames.size() &&
               std::abs(frames[j + 1].timestamp() - instant) < std::abs(frames[j].timestamp() - instant))
            ++j;
        if (j != last_emitted) {
            out.push_back(frames[j]);
            last_emitted = j;
        }
    }
    return out;
}

std::vector<LabeledFrame> drop_transients(const std::vector<PressureFrame>& frames, const AnnotationLog& log,
                                          double margin_s) {
    std::vector<LabeledFrame> out;
    const auto& ivs = log.intervals;
    std::size_t k = 0;
    for (const auto& f : frames) {
        const double t = f.timestamp();
        while (k < ivs.size() && ivs[k].end_s - margin_s < t) ++k;
        // ivs is sorted and non-overlapping; only intervals from k onwards can still contain t.
        for (std::size_t i = k; i < ivs.size() && ivs[i].start_s + margin_s <= t; ++i) {
            const auto& iv = ivs[i];
            if (iv.label != PoseLabel::Transient && t >= iv.start_s + margin_s && t <= iv.end_s - margin_s) {
                out.push_back({f, iv.label});
                break;
            }
        }
    }
    return out;
}

double mean_abs_diff(const PressureFrame& a, const PressureFrame& b) {
    if (a.size() != b.size()) throw ValidationError("mean_abs_diff: frame sizes differ");
    const auto va = a.values();
    const auto vb = b.values();
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) s += std::abs(va[i] - vb[i]);
    return s / static_cast<double>(va.size());
}

std::vector<LabeledFrame> dedup(const std::vector<LabeledFrame>& samples, double epsilon) {
    if (epsilon < 0.0) throw ValidationError("dedup: epsilon must be >= 0");
    std::vector<LabeledFrame> out;
    for (const auto& s : samples) {
        if (out.empty() || s.label != out.back().label || mean_abs_diff(s.frame, out.back().frame) >= epsilon)
            out.push_back(s);
    }
    return out;
}

PressureFrame resize_bilinear(const PressureFrame& frame, int rows, int cols) {
    if (rows < 1 || cols < 1) throw ValidationError("resize_bilinear: zero-sized target");
    auto v = bilinear_resize(frame.values(), frame.rows(), frame.cols(), 1, rows, cols);
    for (auto& x : v) x = std::clamp(x, 0.0, 1.0);
    return {frame.timestamp(), rows, cols, std::move(v)};
}

PressureFrame pad_to_target(const PressureFrame& frame, int rows, int cols) {
    if (rows < frame.rows() || cols < frame.cols())
        throw ValidationError("pad_to_target: target " + std::to_string(rows) + "x" + std::to_string(cols) +
                              " smaller than source " + std::to_string(frame.rows()) + "x" +
                              std::to_string(frame.cols()));
    const int top = (rows - frame.rows()) / 2;
    const int left = (cols - frame.cols()) / 2;
    std::vector<double> v(static_cast<std::size_t>(rows) * cols, 0.0);
    for (int r = 0; r < frame.rows(); ++r)
        for (int c = 0; c < frame.cols(); ++c)
            v[static_cast<std::size_t>((r + top) * cols + c + left)] = frame.at(r, c);
    return {frame.timestamp(), rows, cols, std::move(v)};
}

LabeledDataset preprocess_night(const sync::AlignedNight& night, const PreprocessParams& p) {
    p.validate();
    const auto decimated = downsample(night.frames, p.target_rate_hz);
    const auto labelled = dedup(drop_transients(decimated, night.log, p.transient_margin_s), p.dedup_epsilon);
    LabeledDataset ds;
    if (night.frames.empty()) throw ValidationError("preprocess: night has no frames");
    const int rows = night.frames.front().rows();
    const int cols = night.frames.front().cols();
    ds.geometry = {rows, cols, rows / 2};
    if (p.resize) ds.geometry = {p.resize_target.rows, p.resize_target.cols, p.resize_target.rows / 2};
    ds.samples.reserve(labelled.size());
    for (const auto& s : labelled) {
        auto frame = p.resize ? resize_bilinear(s.frame, p.resize_target.rows, p.resize_target.cols) : s.frame;
        ds.samples.push_back({std::move(frame), s.label, night.patient_id});
    }
    return ds;
}

LabeledDataset preprocess_nights(const std::vector<sync::AlignedNight>& nights, const PreprocessParams& p, int jobs) {
    p.validate();
    std::vector<LabeledDataset> parts(nights.size());
    const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), 1, std::max<std::size_t>(nights.size(), 1));
    std::vector<std::future<void>> pending;
    for (std::size_t w = 0; w < workers; ++w)
        pending.push_back(std::async(std::launch::async, [&, w] {
            for (std::size_t i = w; i < nights.size(); i += workers) parts[i] = preprocess_night(nights[i], p);
        }));
    for (auto& f : pending) f.get();

    LabeledDataset out;
    if (parts.empty()) {
        out.geometry = p.resize ? SensorGeometry{p.resize_target.rows, p.resize_target.cols, p.resize_target.rows / 2}
                                : SensorGeometry::composite();
        return out;
    }
    out.geometry = parts.front().geometry;
    for (auto& part : parts) {
        if (!(part.geometry == out.geometry)) throw ValidationError("preprocess: nights differ in geometry");
        std::move(part.samples.begin(), part.samples.end(), std::back_inserter(out.samples));
    }
    return out;
}

LabeledDataset pad_dataset(const LabeledDataset& ds, int rows, int cols) {
    LabeledDataset out{{rows, cols, std::max(1, rows / 2)}, {}};
    out.samples.reserve(ds.samples.size());
    for (const auto& s : ds.samples) out.samples.push_back({pad_to_target(s.frame, rows, cols), s.label, s.patient_id});
    return out;
}

LabeledDataset resize_dataset(const LabeledDataset& ds, int rows, int cols) {
    LabeledDataset out{{rows, cols, std::max(1, rows / 2)}, {}};
    out.samples.reserve(ds.samples.size());
    for (const auto& s : ds.samples)
        out.samples.push_back({resize_bilinear(s.frame, rows, cols), s.label, s.patient_id});
    return out;
}

}  // namespace psm::prep
