#include "psm/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "text_io.hpp"

namespace psm {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kRecordingFormatVersion = 1;
constexpr int kDatasetFormatVersion = 1;

std::string section_name(Section s) { return s == Section::Upper ? "upper" : "lower"; }

json geometry_json(const SensorGeometry& g) {
    return {{"rows", g.rows}, {"cols", g.cols}, {"section_rows", g.section_rows}};
}

SensorGeometry geometry_from_json(const json& j, const std::string& where) {
    try {
        SensorGeometry g{j.at("rows").get<int>(), j.at("cols").get<int>(),
                         j.value("section_rows", j.at("rows").get<int>())};
        g.validate();
        return g;
    } catch (const json::exception& e) {
        throw FormatError(where + ": bad geometry: " + e.what());
    }
}

json read_json(const fs::path& path) {
    const auto text = detail::read_file(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void check_version(const json& j, int expected, const fs::path& path) {
    const int v = j.value("format_version", -1);
    if (v != expected)
        throw FormatError(path.string() + ": format_version " + std::to_string(v) + " (expected " +
                          std::to_string(expected) + ")");
}

std::string sensel_header(int n) {
    std::string h = "t";
    for (int i = 0; i < n; ++i) {
        h += ",s";
        detail::append_int(h, i);
    }
    return h;
}

void write_stream(const DaqStream& s, const fs::path& path) {
    const int n = s.frames.empty() ? 0 : s.frames.front().rows * s.frames.front().cols;
    std::string out;
    out.reserve(s.frames.size() * static_cast<std::size_t>(n) * 5 + 64);
    out += sensel_header(n);
    out += '\n';
    for (const auto& f : s.frames) {
        detail::append_fixed(out, f.timestamp, 3);
        for (auto c : f.counts) {
            out += ',';
            detail::append_int(out, c);
        }
        out += '\n';
    }
    detail::write_file_atomic(path, out);
}

DaqStream read_stream(const fs::path& path, Section section, double rate, const SensorGeometry& sg) {
    const auto text = detail::read_file(path);
    const auto ls = detail::lines(text);
    const std::string where = path.string();
    if (ls.empty()) throw FormatError(where + ": empty file");
    const auto header = detail::split(ls[0], ',');
    if (header.empty() || detail::trim(header[0]) != "t")
        throw FormatError(where + ": malformed header, expected t,s0,...");
    const auto n = static_cast<std::size_t>(sg.size());
    if (header.size() != n + 1)
        throw FormatError(where + ": dimension mismatch: header has " + std::to_string(header.size() - 1) +
                          " sensel columns, geometry " + std::to_string(sg.rows) + "x" +
                          std::to_string(sg.cols) + " needs " + std::to_string(n));
    for (std::size_t i = 1; i < header.size(); ++i)
        if (detail::trim(header[i]) != "s" + std::to_string(i - 1))
            throw FormatError(where + ": malformed header column " + std::to_string(i));

    DaqStream s{section, rate, {}};
    s.frames.reserve(ls.size());
    for (std::size_t li = 1; li < ls.size(); ++li) {
        if (detail::trim(ls[li]).empty()) continue;
        const auto fields = detail::split(ls[li], ',');
        const std::string lw = where + ":" + std::to_string(li + 1);
        if (fields.size() != n + 1)
            throw FormatError(lw + ": dimension mismatch: " + std::to_string(fields.size() - 1) + " values, expected " +
                              std::to_string(n));
        RawFrame f;
        f.timestamp = detail::parse_double(fields[0], lw);
        f.rows = sg.rows;
        f.cols = sg.cols;
        f.counts.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            f.counts[i] = static_cast<std::int32_t>(detail::parse_int(fields[i + 1], lw));
        if (!s.frames.empty() && !(f.timestamp > s.frames.back().timestamp))
            throw FormatError(lw + ": timestamps not strictly increasing");
        s.frames.push_back(std::move(f));
    }
    return s;
}

void write_log(const AnnotationLog& log, const fs::path& path) {
    std::string out = "start,end,label\n";
    for (const auto& iv : log.intervals) {
        detail::append_fixed(out, iv.start_s, 3);
        out += ',';
        detail::append_fixed(out, iv.end_s, 3);
        out += ',';
        out += to_string(iv.label);
        out += '\n';
    }
    out += "biocal,";
    detail::append_fixed(out, log.biocal_time_s, 3);
    out += '\n';
    detail::write_file_atomic(path, out);
}

AnnotationLog read_log(const fs::path& path) {
    const auto text = detail::read_file(path);
    const auto ls = detail::lines(text);
    const std::string where = path.string();
    if (ls.empty() || detail::trim(ls[0]) != "start,end,label")
        throw FormatError(where + ": malformed header, expected start,end,label");
    AnnotationLog log;
    bool have_biocal = false;
    for (std::size_t li = 1; li < ls.size(); ++li) {
        if (detail::trim(ls[li]).empty()) continue;
        const auto fields = detail::split(ls[li], ',');
        const std::string lw = where + ":" + std::to_string(li + 1);
        if (fields.size() == 2 && detail::trim(fields[0]) == "biocal") {
            log.biocal_time_s = detail::parse_double(fields[1], lw);
            have_biocal = true;
            continue;
        }
        if (fields.size() != 3) throw FormatError(lw + ": expected start,end,label");
        PoseInterval iv;
        iv.start_s = detail::parse_double(fields[0], lw);
        iv.end_s = detail::parse_double(fields[1], lw);
        try {
            iv.label = parse_pose(detail::trim(fields[2]));
        } catch (const Error& e) {
            throw FormatError(lw + ": " + e.what());
        }
        log.intervals.push_back(iv);
    }
    if (!have_biocal) throw FormatError(where + ": missing biocal row");
    try {
        log.validate();
    } catch (const Error& e) {
        throw FormatError(where + ": " + e.what());
    }
    return log;
}

}  // namespace

void SensorGeometry::validate() const {
    if (rows < 1 || cols < 1) throw ValidationError("geometry: rows and cols must be >= 1");
    if (section_rows < 1 || section_rows > rows) throw ValidationError("geometry: bad section_rows");
}

PressureFrame::PressureFrame(double timestamp, int rows, int cols, std::vector<double> values)
    : timestamp_(timestamp), rows_(rows), cols_(cols), values_(std::move(values)) {
    if (rows_ < 1 || cols_ < 1 || values_.size() != static_cast<std::size_t>(rows_) * static_cast<std::size_t>(cols_))
        throw ValidationError("PressureFrame: " + std::to_string(values_.size()) + " values for " +
                              std::to_string(rows_) + "x" + std::to_string(cols_));
#ifndef NDEBUG
    for (double v : values_) assert(v >= 0.0 && v <= 1.0 && "PressureFrame value outside [0,1]");
#endif
}

void DaqStream::validate(const SensorGeometry& sg) const {
    if (!(sample_rate_hz > 0.0)) throw ValidationError("DaqStream: sample rate must be positive");
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const auto& f = frames[i];
        if (f.rows != sg.rows || f.cols != sg.cols ||
            f.counts.size() != static_cast<std::size_t>(sg.size()))
            throw ValidationError("DaqStream " + section_name(section) + ": frame " + std::to_string(i) +
                                  " dimension mismatch");
        if (i > 0 && !(f.timestamp > frames[i - 1].timestamp))
            throw ValidationError("DaqStream " + section_name(section) + ": timestamps not strictly increasing at " +
                                  std::to_string(i));
    }
}

std::string_view to_string(PoseLabel label) {
    switch (label) {
        case PoseLabel::Left: return "Left";
        case PoseLabel::Right: return "Right";
        case PoseLabel::Supine: return "Supine";
        case PoseLabel::Prone: return "Prone";
        case PoseLabel::Transient: return "Transient";
    }
    return "?";
}

PoseLabel parse_pose(std::string_view name) {
    for (auto l : {PoseLabel::Left, PoseLabel::Right, PoseLabel::Supine, PoseLabel::Prone, PoseLabel::Transient})
        if (to_string(l) == name) return l;
    throw ValidationError("unknown pose label '" + std::string(name) + "'");
}

int class_index(PoseLabel label) {
    if (label == PoseLabel::Transient) throw ValidationError("Transient has no class index");
    return static_cast<int>(label);
}

PoseLabel pose_from_index(int index) {
    if (index < 0 || index >= kNumPoses) throw ValidationError("class index out of range");
    return static_cast<PoseLabel>(index);
}

void AnnotationLog::validate() const {
    for (std::size_t i = 0; i < intervals.size(); ++i) {
        if (!(intervals[i].start_s < intervals[i].end_s))
            throw ValidationError("annotation interval " + std::to_string(i) + " has start >= end");
        if (i > 0 && intervals[i].start_s < intervals[i - 1].end_s)
            throw ValidationError("annotation intervals overlap or are unsorted at " + std::to_string(i));
    }
}

void NightRecording::validate() const {
    geometry.validate();
    if (geometry.rows != 2 * geometry.section_rows)
        throw ValidationError("recording geometry must be two stacked sections");
    upper.validate(geometry.section());
    lower.validate(geometry.section());
    log.validate();
}

void LabeledDataset::validate() const {
    geometry.validate();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (s.label == PoseLabel::Transient)
            throw ValidationError("dataset sample " + std::to_string(i) + " is Transient");
        if (s.frame.rows() != geometry.rows || s.frame.cols() != geometry.cols)
            throw ValidationError("dataset sample " + std::to_string(i) + " geometry mismatch");
    }
}

std::vector<std::string> LabeledDataset::patients() const {
    std::set<std::string> ids;
    for (const auto& s : samples) ids.insert(s.patient_id);
    return {ids.begin(), ids.end()};
}

LabeledDataset LabeledDataset::subset(const std::vector<std::string>& ids) const {
    const std::set<std::string> keep(ids.begin(), ids.end());
    LabeledDataset out{geometry, {}};
    for (const auto& s : samples)
        if (keep.contains(s.patient_id)) out.samples.push_back(s);
    return out;
}

PressureFrame normalize_frame(const RawFrame& raw, NormalizeMode mode) {
    if (raw.rows < 1 || raw.cols < 1 || raw.counts.size() != static_cast<std::size_t>(raw.rows * raw.cols))
        throw ValidationError("normalize_frame: matrix dimensions do not match counts");
    std::vector<double> v(raw.counts.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        auto c = raw.counts[i];
        if (c < 0 || c > kFullScaleCount) {
            if (mode == NormalizeMode::Strict) {
                const int r = static_cast<int>(i) / raw.cols;
                const int col = static_cast<int>(i) % raw.cols;
                throw OutOfRangeError("count " + std::to_string(c) + " out of range [0, 2046] at row " +
                                          std::to_string(r) + ", col " + std::to_string(col),
                                      r, col);
            }
            c = std::clamp<std::int32_t>(c, 0, kFullScaleCount);
        }
        v[i] = static_cast<double>(c) / kFullScaleCount;
    }
    return {raw.timestamp, raw.rows, raw.cols, std::move(v)};
}

void write_recording(const NightRecording& rec, const fs::path& dir) {
    rec.validate();
    fs::create_directories(dir);
    json meta = {{"format_version", kRecordingFormatVersion},
                 {"patient_id", rec.patient_id},
                 {"geometry", geometry_json(rec.geometry)},
                 {"sample_rate_hz", {{"upper", rec.upper.sample_rate_hz}, {"lower", rec.lower.sample_rate_hz}}}};
    detail::write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
    write_stream(rec.upper, dir / "upper.csv");
    write_stream(rec.lower, dir / "lower.csv");
    write_log(rec.log, dir / "log.csv");
}

NightRecording read_recording(const fs::path& dir) {
    const auto meta_path = dir / "meta.json";
    const auto meta = read_json(meta_path);
    check_version(meta, kRecordingFormatVersion, meta_path);
    NightRecording rec;
    try {
        rec.patient_id = meta.at("patient_id").get<std::string>();
        rec.geometry = geometry_from_json(meta.at("geometry"), meta_path.string());
        const auto& rates = meta.at("sample_rate_hz");
        const auto sg = rec.geometry.section();
        rec.upper = read_stream(dir / "upper.csv", Section::Upper, rates.at("upper").get<double>(), sg);
        rec.lower = read_stream(dir / "lower.csv", Section::Lower, rates.at("lower").get<double>(), sg);
    } catch (const json::exception& e) {
        throw FormatError(meta_path.string() + ": " + e.what());
    }
    rec.log = read_log(dir / "log.csv");
    try {
        rec.validate();
    } catch (const ValidationError& e) {
        throw FormatError(dir.string() + ": " + e.what());
    }
    return rec;
}

void write_dataset(const LabeledDataset& ds, const fs::path& dir) {
    ds.validate();
    fs::create_directories(dir);
    const int n = ds.geometry.size();
    std::string out = "patient,";
    out += sensel_header(n);
    out.insert(out.find(",s0"), ",label");
    out += '\n';
    for (const auto& s : ds.samples) {
        out += s.patient_id;
        out += ',';
        detail::append_fixed(out, s.frame.timestamp(), 3);
        out += ',';
        out += to_string(s.label);
        for (double v : s.frame.values()) {
            out += ',';
            detail::append_exact(out, v);
        }
        out += '\n';
    }
    detail::write_file_atomic(dir / "dataset.csv", out);
    json meta = {{"format_version", kDatasetFormatVersion},
                 {"geometry", geometry_json(ds.geometry)},
                 {"n_samples", ds.samples.size()}};
    detail::write_file_atomic(dir / "dataset.json", meta.dump(2) + "\n");
}

LabeledDataset read_dataset(const fs::path& dir) {
    const auto meta_path = dir / "dataset.json";
    const auto meta = read_json(meta_path);
    check_version(meta, kDatasetFormatVersion, meta_path);
    LabeledDataset ds;
    ds.geometry = geometry_from_json(meta.at("geometry"), meta_path.string());
    const auto n = static_cast<std::size_t>(ds.geometry.size());

    const auto csv_path = dir / "dataset.csv";
    const auto text = detail::read_file(csv_path);
    const auto ls = detail::lines(text);
    const std::string where = csv_path.string();
    if (ls.empty()) throw FormatError(where + ": empty file");
    const auto header = detail::split(ls[0], ',');
    if (header.size() < 3 || header[0] != "patient" || header[1] != "t" || header[2] != "label")
        throw FormatError(where + ": malformed header, expected patient,t,label,s0,...");
    if (header.size() != n + 3)
        throw FormatError(where + ": dimension mismatch: " + std::to_string(header.size() - 3) +
                          " sensel columns, geometry needs " + std::to_string(n));
    for (std::size_t li = 1; li < ls.size(); ++li) {
        if (detail::trim(ls[li]).empty()) continue;
        const auto f = detail::split(ls[li], ',');
        const std::string lw = where + ":" + std::to_string(li + 1);
        if (f.size() != n + 3) throw FormatError(lw + ": expected " + std::to_string(n + 3) + " fields");
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = detail::parse_double(f[i + 3], lw);
            if (!(v[i] >= 0.0 && v[i] <= 1.0)) throw FormatError(lw + ": value outside [0,1]");
        }
        Sample s;
        s.patient_id = std::string(f[0]);
        try {
            s.label = parse_pose(detail::trim(f[2]));
        } catch (const Error& e) {
            throw FormatError(lw + ": " + e.what());
        }
        s.frame = PressureFrame(detail::parse_double(f[1], lw), ds.geometry.rows, ds.geometry.cols, std::move(v));
        ds.samples.push_back(std::move(s));
    }
    try {
        ds.validate();
    } catch (const ValidationError& e) {
        throw FormatError(dir.string() + ": " + e.what());
    }
    return ds;
}

LabeledDataset read_external_dataset(const fs::path& dir, const SensorGeometry& geometry, ExternalLayout layout) {
    if (layout != ExternalLayout::FramePerLine) throw ValidationError("unsupported external layout");
    geometry.validate();
    const auto manifest_path = dir / "manifest.json";
    const auto manifest = read_json(manifest_path);
    const std::string mw = manifest_path.string();

    double full_scale = 0.0;
    std::vector<json> entries;
    try {
        full_scale = manifest.at("full_scale").get<double>();
        if (manifest.contains("geometry")) {
            const auto g = geometry_from_json(manifest.at("geometry"), mw);
            if (g.rows != geometry.rows || g.cols != geometry.cols)
                throw FormatError(mw + ": manifest geometry " + std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                                  " does not match requested " + std::to_string(geometry.rows) + "x" +
                                  std::to_string(geometry.cols));
        }
        for (const auto& e : manifest.at("files")) entries.push_back(e);
    } catch (const json::exception& e) {
        throw FormatError(mw + ": " + e.what());
    }
    if (!(full_scale > 0.0)) throw FormatError(mw + ": full_scale must be positive");

    std::map<std::string, const json*> by_file;
    for (const auto& e : entries) {
        if (!e.contains("file") || !e.contains("subject") || !e.contains("label"))
            throw FormatError(mw + ": manifest entry needs file, subject and label");
        by_file[e.at("file").get<std::string>()] = &e;
    }

    // Every data file in the directory must be described by the manifest.
    std::vector<fs::path> files;
    for (const auto& de : fs::directory_iterator(dir))
        if (de.is_regular_file() && de.path().filename() != "manifest.json") files.push_back(de.path());
    std::sort(files.begin(), files.end());

    LabeledDataset ds{geometry, {}};
    const auto n = static_cast<std::size_t>(geometry.size());
    for (const auto& path : files) {
        const auto name = path.filename().string();
        const auto it = by_file.find(name);
        if (it == by_file.end()) throw FormatError(mw + ": missing manifest entry for " + name);
        const auto& entry = *it->second;
        const auto subject = entry.at("subject").get<std::string>();
        PoseLabel label;
        try {
            label = parse_pose(entry.at("label").get<std::string>());
        } catch (const Error& e) {
            throw FormatError(mw + ": " + e.what());
        }
        const auto text = detail::read_file(path);
        const auto ls = detail::lines(text);
        int frame_no = 0;
        for (std::size_t li = 0; li < ls.size(); ++li) {
            const auto tokens = detail::split_ws(ls[li]);
            if (tokens.empty()) continue;
            const std::string lw = path.string() + ":" + std::to_string(li + 1);
            if (tokens.size() != n)
                throw FormatError(lw + ": value-count error: " + std::to_string(tokens.size()) + " values, expected " +
                                  std::to_string(n));
            std::vector<double> v(n);
            for (std::size_t i = 0; i < n; ++i)
                v[i] = std::clamp(detail::parse_double(tokens[i], lw) / full_scale, 0.0, 1.0);
            ds.samples.push_back({PressureFrame(frame_no, geometry.rows, geometry.cols, std::move(v)), label, subject});
            ++frame_no;
        }
    }
    ds.validate();
    return ds;
}

}  // namespace psm
