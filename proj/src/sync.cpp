#include "psm/sync.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "text_io.hpp"

namespace psm::sync {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

double section_mean(const RawFrame& f) {
    double s = 0.0;
    for (auto c : f.counts) s += std::clamp(c, 0, kFullScaleCount);
    return s / (static_cast<double>(f.counts.size()) * kFullScaleCount);
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) {
        const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
        m = 0.5 * (m + lo);
    }
    return m;
}

/// Centred moving average of `window` samples over x[lo, hi); entries whose
/// window leaves the range are left at 0 and reported via `valid`.
std::vector<double> centred_mean(const std::vector<double>& prefix, std::size_t lo, std::size_t hi, std::size_t window,
                                 std::size_t& first_valid, std::size_t& last_valid) {
    std::vector<double> out(prefix.size() - 1, 0.0);
    const std::size_t half = window / 2;
    first_valid = lo + half;
    last_valid = hi >= window - half ? hi - (window - half) : 0;  // inclusive
    for (std::size_t k = first_valid; k <= last_valid && k < out.size(); ++k)
        out[k] = (prefix[k - half + window] - prefix[k - half]) / static_cast<double>(window);
    return out;
}

std::vector<double> prefix_sums(const std::vector<double>& x) {
    std::vector<double> p(x.size() + 1, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) p[i + 1] = p[i] + x[i];
    return p;
}

}  // namespace

void SyncParams::validate(double sample_rate_hz) const {
    if (!(occupancy_threshold > 0.0 && hold_s > 0.0 && join_max_gap_s > 0.0 && biocal_window_s > 0.0))
        throw ValidationError("sync: thresholds must be positive");
    if (!(band_low_hz > 0.0 && band_low_hz < band_high_hz && band_high_hz < 0.5 * sample_rate_hz))
        throw ValidationError("sync: need 0 < band low < band high < Nyquist");
}

double detect_bed_entry(const DaqStream& stream, const SyncParams& p) {
    p.validate(stream.sample_rate_hz);
    std::optional<double> run_start;
    for (const auto& f : stream.frames) {
        if (section_mean(f) > p.occupancy_threshold) {
            if (!run_start) run_start = f.timestamp;
            if (f.timestamp - *run_start >= p.hold_s) return *run_start;
        } else {
            run_start.reset();
        }
    }
    throw NoOccupancy(std::string("no bed entry detected on the ") +
                      (stream.section == Section::Upper ? "upper" : "lower") + " section");
}

double estimate_stream_offset(const DaqStream& upper, const DaqStream& lower, const SyncParams& p) {
    return detect_bed_entry(upper, p) - detect_bed_entry(lower, p);
}

std::vector<PressureFrame> composite_streams(const DaqStream& upper, const DaqStream& lower, double offset_s,
                                             const SyncParams& p) {
    std::vector<PressureFrame> out;
    if (upper.frames.empty() || lower.frames.empty())
        throw EmptyOverlap("composite_streams: a section stream is empty");
    out.reserve(upper.frames.size());
    std::size_t j = 0;
    const auto shifted = [&](std::size_t i) { return lower.frames[i].timestamp + offset_s; };
    for (const auto& uf : upper.frames) {
        const double t = uf.timestamp;
        while (j + 1 < lower.frames.size() && std::abs(shifted(j + 1) - t) <= std::abs(shifted(j) - t)) ++j;
        if (std::abs(shifted(j) - t) > p.join_max_gap_s) continue;
        const auto& lf = lower.frames[j];
        if (lf.cols != uf.cols) throw ValidationError("composite_streams: sections differ in column count");
        const auto u = normalize_frame(uf, p.normalize);
        const auto l = normalize_frame(lf, p.normalize);
        std::vector<double> v(u.values().begin(), u.values().end());
        v.insert(v.end(), l.values().begin(), l.values().end());
        out.emplace_back(t, uf.rows + lf.rows, uf.cols, std::move(v));
    }
    if (out.empty()) throw EmptyOverlap("composite_streams: no upper/lower frame pairs within the join gap");
    return out;
}

BiocalDetection detect_biocalibration(const std::vector<PressureFrame>& frames, const SyncParams& p,
                                      std::optional<double> hint_s) {
    if (frames.size() < 2) throw NoOccupancy("detect_biocalibration: too few frames");
    std::vector<double> dts;
    for (std::size_t i = 1; i < std::min<std::size_t>(frames.size(), 1001); ++i)
        dts.push_back(frames[i].timestamp() - frames[i - 1].timestamp());
    const double dt = median(dts);
    if (!(dt > 0.0)) throw ValidationError("detect_biocalibration: frames not time-sorted");
    p.validate(1.0 / dt);

    std::vector<double> total(frames.size());
    std::size_t occ_lo = frames.size();
    std::size_t occ_hi = 0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        double s = 0.0;
        for (double v : frames[i].values()) s += v;
        total[i] = s;
        if (s / static_cast<double>(frames[i].size()) > p.occupancy_threshold) {
            occ_lo = std::min(occ_lo, i);
            occ_hi = i + 1;
        }
    }
    if (occ_lo >= occ_hi) throw NoOccupancy("detect_biocalibration: occupancy window is empty");

    // Band-pass: short moving average (1/high cut) minus long moving average (1/low cut).
    const auto win_short = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(1.0 / (p.band_high_hz * dt))));
    const auto win_long = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(1.0 / (p.band_low_hz * dt))));
    const auto win_env = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(p.hold_s / dt)));
    if (occ_hi - occ_lo < win_long + win_env + 1)
        throw NoOccupancy("detect_biocalibration: occupancy window shorter than the analysis windows");

    const auto prefix = prefix_sums(total);
    std::size_t s_lo = 0, s_hi = 0, l_lo = 0, l_hi = 0;
    const auto ma_short = centred_mean(prefix, occ_lo, occ_hi, win_short, s_lo, s_hi);
    const auto ma_long = centred_mean(prefix, occ_lo, occ_hi, win_long, l_lo, l_hi);
    const std::size_t band_lo = std::max(s_lo, l_lo);
    const std::size_t band_hi = std::min(s_hi, l_hi) + 1;  // exclusive
    std::vector<double> band_sq(frames.size(), 0.0);
    for (std::size_t k = band_lo; k < band_hi; ++k) {
        const double b = ma_short[k] - ma_long[k];
        band_sq[k] = b * b;
    }

    // RMS envelope over hold_s windows.
    const auto sq_prefix = prefix_sums(band_sq);
    std::size_t e_lo = 0, e_hi = 0;
    auto env = centred_mean(sq_prefix, band_lo, band_hi, win_env, e_lo, e_hi);
    for (auto& e : env) e = std::sqrt(std::max(0.0, e));

    std::size_t lo = e_lo;
    std::size_t hi = e_hi + 1;
    if (hint_s) {
        const double a = *hint_s - p.biocal_window_s;
        const double b = *hint_s + p.biocal_window_s;
        while (lo < hi && frames[lo].timestamp() < a) ++lo;
        while (hi > lo && frames[hi - 1].timestamp() > b) --hi;
    }
    if (lo >= hi) throw NoOccupancy("detect_biocalibration: search window does not overlap the occupancy window");

    std::size_t best = lo;
    for (std::size_t k = lo; k < hi; ++k)
        if (env[k] > env[best]) best = k;
    BiocalDetection d;
    d.envelope_peak = env[best];
    d.envelope_median = median(std::vector<double>(env.begin() + static_cast<std::ptrdiff_t>(lo),
                                                   env.begin() + static_cast<std::ptrdiff_t>(hi)));
    d.low_confidence = d.envelope_peak <= 1e-12 || d.envelope_peak < 2.0 * d.envelope_median;

    // The maximizing window sits somewhere on the maneuver's plateau; report
    // the midpoint of the contiguous above-half-peak region containing it.
    const double half = 0.5 * d.envelope_peak;
    std::size_t a = best;
    std::size_t b = best;
    while (a > lo && env[a - 1] >= half) --a;
    while (b + 1 < hi && env[b + 1] >= half) ++b;
    d.time_s = 0.5 * (frames[a].timestamp() + frames[b].timestamp());
    return d;
}

AnnotationLog align_annotations(const AnnotationLog& log, double biocal_psm_s) {
    const long long shift_ms = std::llround((biocal_psm_s - log.biocal_time_s) * 1000.0);
    const auto move = [&](double t) { return static_cast<double>(std::llround(t * 1000.0) + shift_ms) / 1000.0; };
    AnnotationLog out;
    out.intervals.reserve(log.intervals.size());
    for (const auto& iv : log.intervals) out.intervals.push_back({move(iv.start_s), move(iv.end_s), iv.label});
    out.biocal_time_s = move(log.biocal_time_s);
    return out;
}

AlignedNight synchronize(const NightRecording& rec, const SyncParams& p) {
    AlignedNight night;
    night.patient_id = rec.patient_id;
    night.offset_s = estimate_stream_offset(rec.upper, rec.lower, p);
    night.frames = composite_streams(rec.upper, rec.lower, night.offset_s, p);
    std::optional<double> hint;
    if (p.use_log_hint) hint = rec.log.biocal_time_s;
    night.biocal = detect_biocalibration(night.frames, p, hint);
    night.log = align_annotations(rec.log, night.biocal.time_s);
    night.log_shift_s = night.log.biocal_time_s - rec.log.biocal_time_s;
    return night;
}

void write_aligned(const AlignedNight& night, const fs::path& dir) {
    fs::create_directories(dir);
    if (night.frames.empty()) throw ValidationError("write_aligned: no frames");
    const int rows = night.frames.front().rows();
    const int cols = night.frames.front().cols();
    std::string out = "t";
    for (int i = 0; i < rows * cols; ++i) {
        out += ",s";
        detail::append_int(out, i);
    }
    out += '\n';
    for (const auto& f : night.frames) {
        detail::append_fixed(out, f.timestamp(), 3);
        for (double v : f.values()) {
            out += ',';
            detail::append_exact(out, v);
        }
        out += '\n';
    }
    detail::write_file_atomic(dir / "frames.csv", out);

    std::string log = "start,end,label\n";
    for (const auto& iv : night.log.intervals) {
        detail::append_fixed(log, iv.start_s, 3);
        log += ',';
        detail::append_fixed(log, iv.end_s, 3);
        log += ',';
        log += to_string(iv.label);
        log += '\n';
    }
    log += "biocal,";
    detail::append_fixed(log, night.log.biocal_time_s, 3);
    log += '\n';
    detail::write_file_atomic(dir / "log.csv", log);

    json meta = {{"format_version", 1},
                 {"patient_id", night.patient_id},
                 {"geometry", {{"rows", rows}, {"cols", cols}, {"section_rows", rows / 2}}},
                 {"offset_s", night.offset_s},
                 {"log_shift_s", night.log_shift_s},
                 {"biocal",
                  {{"time_s", night.biocal.time_s},
                   {"envelope_peak", night.biocal.envelope_peak},
                   {"envelope_median", night.biocal.envelope_median},
                   {"low_confidence", night.biocal.low_confidence}}}};
    detail::write_file_atomic(dir / "sync.json", meta.dump(2) + "\n");
}

AlignedNight read_aligned(const fs::path& dir) {
    AlignedNight night;
    const auto meta_path = dir / "sync.json";
    json meta;
    try {
        meta = json::parse(detail::read_file(meta_path));
        if (meta.value("format_version", -1) != 1) throw FormatError(meta_path.string() + ": unsupported format_version");
        night.patient_id = meta.at("patient_id").get<std::string>();
        night.offset_s = meta.at("offset_s").get<double>();
        night.log_shift_s = meta.at("log_shift_s").get<double>();
        const auto& b = meta.at("biocal");
        night.biocal = {b.at("time_s").get<double>(), b.at("envelope_peak").get<double>(),
                        b.at("envelope_median").get<double>(), b.at("low_confidence").get<bool>()};
    } catch (const json::exception& e) {
        throw FormatError(meta_path.string() + ": " + e.what());
    }
    const int rows = meta["geometry"]["rows"].get<int>();
    const int cols = meta["geometry"]["cols"].get<int>();
    const auto n = static_cast<std::size_t>(rows * cols);

    const auto frames_path = dir / "frames.csv";
    const auto text = detail::read_file(frames_path);
    const auto ls = detail::lines(text);
    if (ls.empty() || detail::split(ls[0], ',').size() != n + 1)
        throw FormatError(frames_path.string() + ": malformed header or dimension mismatch");
    for (std::size_t li = 1; li < ls.size(); ++li) {
        if (detail::trim(ls[li]).empty()) continue;
        const auto f = detail::split(ls[li], ',');
        const std::string lw = frames_path.string() + ":" + std::to_string(li + 1);
        if (f.size() != n + 1) throw FormatError(lw + ": dimension mismatch");
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = detail::parse_double(f[i + 1], lw);
        const double t = detail::parse_double(f[0], lw);
        if (!night.frames.empty() && !(t > night.frames.back().timestamp()))
            throw FormatError(lw + ": timestamps not strictly increasing");
        night.frames.emplace_back(t, rows, cols, std::move(v));
    }

    const auto log_path = dir / "log.csv";
    const auto log_text = detail::read_file(log_path);
    const auto log_lines = detail::lines(log_text);
    if (log_lines.empty() || detail::trim(log_lines[0]) != "start,end,label")
        throw FormatError(log_path.string() + ": malformed header");
    for (std::size_t li = 1; li < log_lines.size(); ++li) {
        if (detail::trim(log_lines[li]).empty()) continue;
        const auto f = detail::split(log_lines[li], ',');
        const std::string lw = log_path.string() + ":" + std::to_string(li + 1);
        if (f.size() == 2 && f[0] == "biocal") {
            night.log.biocal_time_s = detail::parse_double(f[1], lw);
        } else if (f.size() == 3) {
            night.log.intervals.push_back(
                {detail::parse_double(f[0], lw), detail::parse_double(f[1], lw), parse_pose(detail::trim(f[2]))});
        } else {
            throw FormatError(lw + ": expected start,end,label");
        }
    }
    night.log.validate();
    return night;
}

double time_jaccard(const std::vector<PoseInterval>& a, const std::vector<PoseInterval>& b) {
    std::set<double> cuts;
    for (const auto* set : {&a, &b})
        for (const auto& iv : *set) {
            cuts.insert(iv.start_s);
            cuts.insert(iv.end_s);
        }
    const auto label_at = [](const std::vector<PoseInterval>& v, double t) -> std::optional<PoseLabel> {
        const auto it = std::upper_bound(v.begin(), v.end(), t,
                                         [](double x, const PoseInterval& iv) { return x < iv.end_s; });
        if (it != v.end() && it->start_s <= t) return it->label;
        return std::nullopt;
    };
    double inter = 0.0;
    double uni = 0.0;
    for (auto it = cuts.begin(); it != cuts.end() && std::next(it) != cuts.end(); ++it) {
        const double lo = *it;
        const double hi = *std::next(it);
        const double mid = 0.5 * (lo + hi);
        const auto la = label_at(a, mid);
        const auto lb = label_at(b, mid);
        if (la || lb) uni += hi - lo;
        if (la && lb && *la == *lb) inter += hi - lo;
    }
    return uni > 0.0 ? inter / uni : 1.0;
}

}  // namespace psm::sync
