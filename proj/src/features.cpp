#include "psm/features.hpp"

#include <cmath>

#include "text_io.hpp"

namespace psm::features {

const std::array<std::string_view, kNumFeatures>& feature_names() {
    static const std::array<std::string_view, kNumFeatures> names{
        "total_pressure", "cop_row",      "cop_col",     "spread_row", "spread_col",
        "active_fraction", "lr_asymmetry", "upper_share", "lower_share"};
    return names;
}

FeatureVector extract_features(const PressureFrame& frame, int section_rows) {
    const int rows = frame.rows();
    const int cols = frame.cols();
    FeatureVector f{};
    double total = 0.0, sr = 0.0, sc = 0.0, left = 0.0, right = 0.0, upper = 0.0;
    int active = 0;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double v = frame.at(r, c);
            total += v;
            sr += v * r;
            sc += v * c;
            if (v > kActivityThreshold) ++active;
            // middle column of an odd-width grid belongs to neither half
            if (2 * c + 1 < cols) left += v;
            else if (2 * c + 1 > cols) right += v;
            if (r < section_rows) upper += v;
        }
    f[0] = total;
    f[5] = static_cast<double>(active) / (rows * cols);
    if (total <= 0.0) {
        f[1] = (rows - 1) / 2.0;
        f[2] = (cols - 1) / 2.0;
        return f;
    }
    const double cr = sr / total;
    const double cc = sc / total;
    double vr = 0.0, vc = 0.0;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double v = frame.at(r, c);
            vr += v * (r - cr) * (r - cr);
            vc += v * (c - cc) * (c - cc);
        }
    f[1] = cr;
    f[2] = cc;
    f[3] = std::sqrt(vr / total);
    f[4] = std::sqrt(vc / total);
    f[6] = (left - right) / total;
    f[7] = upper / total;
    f[8] = (total - upper) / total;
    return f;
}

FeatureTable extract_table(const LabeledDataset& ds) {
    FeatureTable t;
    t.rows.reserve(ds.samples.size());
    for (const auto& s : ds.samples) {
        t.rows.push_back(extract_features(s.frame, ds.geometry.section_rows));
        t.labels.push_back(class_index(s.label));
        t.patients.push_back(s.patient_id);
        t.timestamps.push_back(s.frame.timestamp());
    }
    return t;
}

void write_features(const FeatureTable& table, const std::filesystem::path& path) {
    std::string out = "# features:";
    for (int i = 0; i < kNumFeatures; ++i) {
        out += " f";
        detail::append_int(out, i);
        out += '=';
        out += feature_names()[static_cast<std::size_t>(i)];
    }
    out += "\npatient,t,label";
    for (int i = 0; i < kNumFeatures; ++i) {
        out += ",f";
        detail::append_int(out, i);
    }
    out += '\n';
    for (std::size_t k = 0; k < table.rows.size(); ++k) {
        out += table.patients[k];
        out += ',';
        detail::append_fixed(out, table.timestamps[k], 3);
        out += ',';
        out += to_string(pose_from_index(table.labels[k]));
        for (double v : table.rows[k]) {
            out += ',';
            detail::append_exact(out, v);
        }
        out += '\n';
    }
    detail::write_file_atomic(path, out);
}

FeatureTable read_features(const std::filesystem::path& path) {
    const auto text = detail::read_file(path);
    const auto ls = detail::lines(text);
    const std::string where = path.string();
    std::size_t li = 0;
    while (li < ls.size() && !ls[li].empty() && ls[li][0] == '#') ++li;
    if (li >= ls.size() || detail::split(ls[li], ',').size() != kNumFeatures + 3)
        throw FormatError(where + ": malformed header, expected patient,t,label,f0..f8");
    FeatureTable t;
    for (++li; li < ls.size(); ++li) {
        if (detail::trim(ls[li]).empty()) continue;
        const auto f = detail::split(ls[li], ',');
        const std::string lw = where + ":" + std::to_string(li + 1);
        if (f.size() != kNumFeatures + 3) throw FormatError(lw + ": expected " + std::to_string(kNumFeatures + 3) + " fields");
        FeatureVector v{};
        for (int i = 0; i < kNumFeatures; ++i) v[static_cast<std::size_t>(i)] = detail::parse_double(f[static_cast<std::size_t>(i) + 3], lw);
        t.rows.push_back(v);
        t.patients.emplace_back(f[0]);
        t.timestamps.push_back(detail::parse_double(f[1], lw));
        t.labels.push_back(class_index(parse_pose(detail::trim(f[2]))));
    }
    return t;
}

}  // namespace psm::features
