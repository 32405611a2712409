#include "psm/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

#include <json.hpp>

namespace psm::synth {

using nlohmann::json;

namespace {

struct TimedPose {
    double start_s;
    double end_s;
    PoseLabel pose;
};

long long to_ms(double t) { return std::llround(t * 1000.0); }

PoseLabel draw_pose(Rng& rng, std::optional<PoseLabel> not_this) {
    // Prone is the minority class.
    static constexpr std::array<double, 4> weights{0.3, 0.3, 0.3, 0.1};
    while (true) {
        double u = rng.uniform();
        int k = 0;
        for (; k < 3; ++k) {
            if (u < weights[static_cast<std::size_t>(k)]) break;
            u -= weights[static_cast<std::size_t>(k)];
        }
        const auto p = pose_from_index(k);
        if (!not_this || p != *not_this) return p;
    }
}

/// Pose dwell intervals interleaved with Transient cross-fade intervals,
/// covering [entry, exit) exactly.
std::vector<PoseInterval> build_schedule(const SynthConfig& cfg, Rng& rng) {
    const double entry = round_ms(cfg.entry_time_s);
    const double exit = round_ms(cfg.exit_time_s);
    const double fade = round_ms(cfg.transition_duration_s);
    std::vector<PoseInterval> out;

    if (cfg.pose_schedule) {
        const auto& sched = *cfg.pose_schedule;
        if (sched.empty()) throw ValidationError("pose schedule is empty");
        double need = fade * static_cast<double>(sched.size() - 1);
        for (const auto& seg : sched) {
            if (seg.pose == PoseLabel::Transient) throw ValidationError("pose schedule contains Transient");
            if (!(seg.duration_s > 0.0)) throw ValidationError("pose schedule dwell must be positive");
            need += seg.duration_s;
        }
        if (need > exit - entry + 1e-9)
            throw ValidationError("infeasible schedule: dwells need " + std::to_string(need) + " s but occupancy is " +
                                  std::to_string(exit - entry) + " s");
        double t = entry;
        for (std::size_t i = 0; i < sched.size(); ++i) {
            const bool last = i + 1 == sched.size();
            const double end = last ? exit : round_ms(t + sched[i].duration_s);
            out.push_back({t, end, sched[i].pose});
            if (!last) {
                out.push_back({end, end + fade, PoseLabel::Transient});
                t = end + fade;
            }
        }
        return out;
    }

    const double min_dwell = 0.1 * cfg.mean_dwell_s;
    double t = entry;
    PoseLabel pose = draw_pose(rng, std::nullopt);
    while (true) {
        const double dwell = min_dwell - (cfg.mean_dwell_s - min_dwell) * std::log(1.0 - rng.uniform());
        double end = round_ms(t + dwell);
        if (end + fade + min_dwell >= exit) {
            out.push_back({t, exit, pose});
            break;
        }
        out.push_back({t, end, pose});
        out.push_back({end, end + fade, PoseLabel::Transient});
        t = end + fade;
        pose = draw_pose(rng, pose);
    }
    return out;
}

BodyParams jitter_body(BodyParams b, Rng& rng) {
    b.shoulder_row += rng.uniform(-0.03, 0.03);
    b.hip_row += rng.uniform(-0.03, 0.03);
    b.row_spread *= rng.uniform(0.9, 1.1);
    b.col_spread *= rng.uniform(0.9, 1.1);
    b.shoulder_weight += rng.uniform(-0.03, 0.03);
    b.mean_load *= rng.uniform(0.9, 1.1);
    return b;
}

}  // namespace

PressureFrame pose_template(PoseLabel pose, const SensorGeometry& g, const BodyParams& body) {
    if (pose == PoseLabel::Transient) throw ValidationError("pose_template: Transient has no template");
    g.validate();
    double row_sigma = body.row_spread * g.rows;
    double col_sigma = body.col_spread * g.cols;
    double col_centre = (g.cols - 1) / 2.0;
    double amplitude = 1.0;
    switch (pose) {
        case PoseLabel::Prone:
            row_sigma *= 1.25;
            col_sigma *= 1.25;
            amplitude = 0.8;
            break;
        case PoseLabel::Left:
            col_centre -= 0.25 * g.cols;
            col_sigma *= 0.6;
            break;
        case PoseLabel::Right:
            col_centre += 0.25 * g.cols;
            col_sigma *= 0.6;
            break;
        default: break;
    }
    const double shoulder = body.shoulder_row * (g.rows - 1);
    const double hip = body.hip_row * (g.rows - 1);
    const double ws = body.shoulder_weight;

    std::vector<double> v(static_cast<std::size_t>(g.size()));
    double total = 0.0;
    for (int r = 0; r < g.rows; ++r) {
        const double ds = (r - shoulder) / row_sigma;
        const double dh = (r - hip) / row_sigma;
        const double row_profile = ws * std::exp(-0.5 * ds * ds) + (1.0 - ws) * std::exp(-0.5 * dh * dh);
        for (int c = 0; c < g.cols; ++c) {
            const double dc = (c - col_centre) / col_sigma;
            const double x = amplitude * row_profile * std::exp(-0.5 * dc * dc);
            v[static_cast<std::size_t>(r * g.cols + c)] = x;
            total += x;
        }
    }
    const double scale = body.mean_load * g.size() / total;
    for (auto& x : v) x = std::min(1.0, x * scale);
    return {0.0, g.rows, g.cols, std::move(v)};
}

void SynthConfig::validate() const {
    geometry.validate();
    if (geometry.rows != 2 * geometry.section_rows)
        throw ValidationError("synth: geometry must be two stacked sections");
    if (n_patients < 1) throw ValidationError("synth: n_patients must be >= 1");
    if (!(sample_rate_hz > 0.0)) throw ValidationError("synth: sample rate must be positive");
    if (!(entry_time_s >= 0.0 && entry_time_s < biocal.time_s && biocal.time_s < exit_time_s &&
          exit_time_s <= night_duration_s))
        throw ValidationError("synth: need 0 <= entry < biocal.time < exit <= night_duration");
    if (!(breathing.amplitude > 0.0 && breathing.amplitude < 1.0 && biocal.amplitude > 0.0 && biocal.amplitude < 1.0))
        throw ValidationError("synth: amplitudes must lie in (0, 1)");
    if (!(transition_duration_s > 0.0)) throw ValidationError("synth: transition duration must be positive");
    if (!(biocal.duration_s > 0.0)) throw ValidationError("synth: biocal duration must be positive");
    if (!(breathing.rate_hz > 0.0)) throw ValidationError("synth: breathing rate must be positive");
    if (!(mean_dwell_s > 0.0)) throw ValidationError("synth: mean dwell must be positive");
    if (noise_sigma < 0.0) throw ValidationError("synth: noise sigma must be >= 0");
}

std::pair<NightRecording, GroundTruth> generate_night(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Rng schedule_rng = rng.fork(1);
    Rng body_rng = rng.fork(2);
    Rng upper_noise = rng.fork(3);
    Rng lower_noise = rng.fork(4);

    GroundTruth truth;
    truth.patient_id = cfg.patient_id;
    truth.true_drift_s = round_ms(cfg.drift_s ? *cfg.drift_s : rng.uniform(-5.0, 5.0));
    truth.log_shift_s = round_ms(rng.uniform(-30.0, 30.0));
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    truth.true_entry_s = round_ms(cfg.entry_time_s);
    truth.true_exit_s = round_ms(cfg.exit_time_s);
    truth.true_biocal_s = round_ms(cfg.biocal.time_s);
    truth.intervals = build_schedule(cfg, schedule_rng);
    truth.body = cfg.vary_body ? jitter_body(BodyParams{}, body_rng) : BodyParams{};

    const auto& g = cfg.geometry;
    std::array<std::vector<double>, kNumPoses> templates;
    for (int k = 0; k < kNumPoses; ++k) {
        const auto f = pose_template(pose_from_index(k), g, truth.body);
        templates[static_cast<std::size_t>(k)].assign(f.values().begin(), f.values().end());
    }

    const long long period_ms = std::llround(1000.0 / cfg.sample_rate_hz);
    const long long n_frames = to_ms(cfg.night_duration_s) / period_ms;
    const long long drift_ms = to_ms(truth.true_drift_s);
    const auto section_size = static_cast<std::size_t>(g.section_rows * g.cols);
    const double biocal_lo = cfg.biocal.time_s - 0.5 * cfg.biocal.duration_s;
    const double biocal_hi = cfg.biocal.time_s + 0.5 * cfg.biocal.duration_s;

    NightRecording rec;
    rec.patient_id = cfg.patient_id;
    rec.geometry = g;
    rec.upper = {Section::Upper, cfg.sample_rate_hz, {}};
    rec.lower = {Section::Lower, cfg.sample_rate_hz, {}};
    rec.upper.frames.reserve(static_cast<std::size_t>(n_frames));
    rec.lower.frames.reserve(static_cast<std::size_t>(n_frames));

    std::vector<double> signal(static_cast<std::size_t>(g.size()));
    std::size_t seg = 0;
    for (long long k = 0; k < n_frames; ++k) {
        const long long t_ms = k * period_ms;
        const double t = static_cast<double>(t_ms) / 1000.0;
        std::fill(signal.begin(), signal.end(), 0.0);
        if (t >= truth.true_entry_s && t < truth.true_exit_s) {
            while (seg + 1 < truth.intervals.size() && t >= truth.intervals[seg].end_s) ++seg;
            const auto& iv = truth.intervals[seg];
            const double amp = (t >= biocal_lo && t < biocal_hi) ? cfg.biocal.amplitude : cfg.breathing.amplitude;
            const double breath = 1.0 + amp * std::sin(2.0 * std::numbers::pi * cfg.breathing.rate_hz * t + phase);
            if (iv.label == PoseLabel::Transient) {
                const auto& from = templates[static_cast<std::size_t>(class_index(truth.intervals[seg - 1].label))];
                const auto& to = templates[static_cast<std::size_t>(class_index(truth.intervals[seg + 1].label))];
                const double w = (t - iv.start_s) / (iv.end_s - iv.start_s);
                for (std::size_t i = 0; i < signal.size(); ++i) signal[i] = ((1.0 - w) * from[i] + w * to[i]) * breath;
            } else {
                const auto& tpl = templates[static_cast<std::size_t>(class_index(iv.label))];
                for (std::size_t i = 0; i < signal.size(); ++i) signal[i] = tpl[i] * breath;
            }
        }
        auto emit = [&](Rng& noise, std::size_t offset, double ts) {
            RawFrame f;
            f.timestamp = ts;
            f.rows = g.section_rows;
            f.cols = g.cols;
            f.counts.resize(section_size);
            for (std::size_t i = 0; i < section_size; ++i) {
                const double x = signal[offset + i] + cfg.noise_sigma * noise.normal();
                f.counts[i] = static_cast<std::int32_t>(
                    std::clamp<long long>(std::llround(x * kFullScaleCount), 0, kFullScaleCount));
            }
            return f;
        };
        rec.upper.frames.push_back(emit(upper_noise, 0, t));
        rec.lower.frames.push_back(emit(lower_noise, section_size, static_cast<double>(t_ms + drift_ms) / 1000.0));
    }

    const long long shift_ms = to_ms(truth.log_shift_s);
    auto on_log_clock = [&](double t) { return static_cast<double>(to_ms(t) + shift_ms) / 1000.0; };
    for (const auto& iv : truth.intervals)
        rec.log.intervals.push_back({on_log_clock(iv.start_s), on_log_clock(iv.end_s), iv.label});
    rec.log.biocal_time_s = on_log_clock(truth.true_biocal_s);
    return {std::move(rec), std::move(truth)};
}

std::vector<std::pair<NightRecording, GroundTruth>> generate_cohort(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<NightRecording, GroundTruth>> out;
    out.reserve(static_cast<std::size_t>(cfg.n_patients));
    for (int i = 0; i < cfg.n_patients; ++i) {
        SynthConfig c = cfg;
        c.n_patients = 1;
        c.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(i));
        char id[16];
        std::snprintf(id, sizeof id, "P%03d", i);
        c.patient_id = id;
        out.push_back(generate_night(c));
    }
    return out;
}

void StaticSetConfig::validate() const {
    geometry.validate();
    if (n_subjects < 1 || frames_per_subject < 1) throw ValidationError("static set: need at least one subject and frame");
    if (!(noise_sigma >= 0.0) || !(breathing_amplitude >= 0.0 && breathing_amplitude < 1.0))
        throw ValidationError("static set: noise_sigma >= 0 and breathing_amplitude in [0, 1) required");
}

LabeledDataset generate_static_dataset(const StaticSetConfig& cfg) {
    cfg.validate();
    LabeledDataset ds;
    ds.geometry = cfg.geometry;
    for (int s = 0; s < cfg.n_subjects; ++s) {
        Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(s)));
        const BodyParams body = jitter_body(BodyParams{}, rng);
        char id[32];
        std::snprintf(id, sizeof id, "%s%03d", cfg.id_prefix.c_str(), s);
        for (int f = 0; f < cfg.frames_per_subject; ++f) {
            const PoseLabel pose = draw_pose(rng, std::nullopt);
            const PressureFrame tpl = pose_template(pose, cfg.geometry, body);
            const double breath = 1.0 + cfg.breathing_amplitude * std::sin(rng.uniform(0.0, 2.0 * std::numbers::pi));
            std::vector<double> v(tpl.values().begin(), tpl.values().end());
            for (auto& x : v) x = std::clamp(x * breath + cfg.noise_sigma * rng.normal(), 0.0, 1.0);
            ds.samples.push_back({PressureFrame(static_cast<double>(f), cfg.geometry.rows, cfg.geometry.cols, std::move(v)),
                                  pose, id});
        }
    }
    return ds;
}

std::string truth_to_json(const GroundTruth& t) {
    json intervals = json::array();
    for (const auto& iv : t.intervals)
        intervals.push_back({{"start", iv.start_s}, {"end", iv.end_s}, {"label", std::string(to_string(iv.label))}});
    json j = {{"patient_id", t.patient_id},
              {"true_drift_s", t.true_drift_s},
              {"true_entry_s", t.true_entry_s},
              {"true_exit_s", t.true_exit_s},
              {"true_biocal_s", t.true_biocal_s},
              {"log_shift_s", t.log_shift_s},
              {"intervals", intervals},
              {"body",
               {{"shoulder_row", t.body.shoulder_row},
                {"hip_row", t.body.hip_row},
                {"row_spread", t.body.row_spread},
                {"col_spread", t.body.col_spread},
                {"shoulder_weight", t.body.shoulder_weight},
                {"mean_load", t.body.mean_load}}}};
    return j.dump(2) + "\n";
}

GroundTruth truth_from_json(const std::string& text) {
    try {
        const auto j = json::parse(text);
        GroundTruth t;
        t.patient_id = j.at("patient_id").get<std::string>();
        t.true_drift_s = j.at("true_drift_s").get<double>();
        t.true_entry_s = j.at("true_entry_s").get<double>();
        t.true_exit_s = j.at("true_exit_s").get<double>();
        t.true_biocal_s = j.at("true_biocal_s").get<double>();
        t.log_shift_s = j.at("log_shift_s").get<double>();
        for (const auto& iv : j.at("intervals"))
            t.intervals.push_back({iv.at("start").get<double>(), iv.at("end").get<double>(),
                                   parse_pose(iv.at("label").get<std::string>())});
        const auto& b = j.at("body");
        t.body = {b.at("shoulder_row").get<double>(), b.at("hip_row").get<double>(), b.at("row_spread").get<double>(),
                  b.at("col_spread").get<double>(),   b.at("shoulder_weight").get<double>(),
                  b.at("mean_load").get<double>()};
        return t;
    } catch (const json::exception& e) {
        throw FormatError(std::string("truth.json: ") + e.what());
    }
}

}  // namespace psm::synth
