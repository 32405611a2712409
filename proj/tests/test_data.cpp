#include <fstream>

#include "doctest.h"
#include "psm/data.hpp"
#include "psm/synth.hpp"
#include "test_util.hpp"

using namespace psm;

namespace {

RawFrame raw_with(int rows, int cols, std::int32_t value) {
    return {0.5, rows, cols, std::vector<std::int32_t>(static_cast<std::size_t>(rows * cols), value)};
}

NightRecording small_night(std::uint64_t seed) {
    synth::SynthConfig c;
    c.seed = seed;
    c.night_duration_s = 300;
    c.entry_time_s = 30;
    c.exit_time_s = 280;
    c.biocal.time_s = 100;
    c.mean_dwell_s = 60;
    return synth::generate_night(c).first;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream(p, std::ios::binary) << s;
}

std::string repeat_values(int n, const std::string& v) {
    std::string s;
    for (int i = 0; i < n; ++i) s += (i ? " " : "") + v;
    return s + "\n";
}

void write_external(const std::filesystem::path& dir, int rows, int cols, const std::string& body) {
    std::filesystem::create_directories(dir);
    write_text(dir / "a.txt", body);
    write_text(dir / "manifest.json", R"({"full_scale": 1000, "geometry": {"rows": )" + std::to_string(rows) +
                                          R"(, "cols": )" + std::to_string(cols) +
                                          R"(}, "files": [{"file": "a.txt", "subject": "X1", "label": "Supine"}]})");
}

}  // namespace

TEST_CASE("normalize_frame maps counts onto [0, 1]") {
    CHECK(normalize_frame(raw_with(1, 1, 2046)).at(0, 0) == 1.0);
    CHECK(normalize_frame(raw_with(1, 1, 0)).at(0, 0) == 0.0);
    CHECK(normalize_frame(raw_with(1, 1, 1023)).at(0, 0) == 0.5);
    CHECK(normalize_frame(raw_with(2, 3, 7)).timestamp() == 0.5);
}

TEST_CASE("normalize_frame strict mode names the offending sensel") {
    RawFrame r = raw_with(3, 4, 10);
    r.counts[static_cast<std::size_t>(1 * 4 + 2)] = 2047;
    try {
        normalize_frame(r);
        FAIL("expected OutOfRangeError");
    } catch (const OutOfRangeError& e) {
        CHECK(e.row() == 1);
        CHECK(e.col() == 2);
    }
    r.counts[0] = -3;
    const auto f = normalize_frame(r, NormalizeMode::Lenient);
    CHECK(f.at(0, 0) == 0.0);
    CHECK(f.at(1, 2) == 1.0);
}

TEST_CASE("normalize_frame is monotone in the count") {
    double prev = -1.0;
    for (int c = 0; c <= kFullScaleCount; ++c) {
        const double v = normalize_frame(raw_with(1, 1, c)).at(0, 0);
        CHECK(v >= prev);
        prev = v;
    }
}

TEST_CASE("PressureFrame rejects a shape mismatch") {
    CHECK_THROWS_AS(PressureFrame(0.0, 2, 2, {0.5, 0.5}), ValidationError);
}

TEST_CASE("pose label names round-trip") {
    for (int i = 0; i < 5; ++i) {
        const auto p = static_cast<PoseLabel>(i);
        CHECK(parse_pose(to_string(p)) == p);
    }
    CHECK_THROWS(parse_pose("Sitting"));
}

TEST_CASE("annotation log validation") {
    AnnotationLog ok{{{0, 10, PoseLabel::Left}, {10, 20, PoseLabel::Right}}, 5};
    CHECK_NOTHROW(ok.validate());
    AnnotationLog overlap{{{0, 10, PoseLabel::Left}, {9, 20, PoseLabel::Right}}, 5};
    CHECK_THROWS_AS(overlap.validate(), ValidationError);
    AnnotationLog empty_iv{{{3, 3, PoseLabel::Left}}, 5};
    CHECK_THROWS_AS(empty_iv.validate(), ValidationError);
}

TEST_CASE("recording round trip is exact") {
    testutil::TempDir tmp("data_rt");
    const auto rec = small_night(11);
    write_recording(rec, tmp.path / "night");
    const auto back = read_recording(tmp.path / "night");
    CHECK(back == rec);
}

TEST_CASE("recording reader rejects dimension mismatch and non-monotone timestamps") {
    testutil::TempDir tmp("data_bad");
    const auto rec = small_night(12);
    const auto dir = tmp.path / "night";
    write_recording(rec, dir);

    // 143 sensel columns where the 9x8 section needs 72
    std::string header = "t";
    for (int i = 0; i < 143; ++i) header += ",s" + std::to_string(i);
    write_text(dir / "upper.csv", header + "\n");
    CHECK_THROWS_AS(read_recording(dir), FormatError);

    write_recording(rec, dir);
    std::string h = "t";
    for (int i = 0; i < 72; ++i) h += ",s" + std::to_string(i);
    std::string row;
    for (int i = 0; i < 72; ++i) row += ",0";
    write_text(dir / "upper.csv", h + "\n1.000" + row + "\n1.000" + row + "\n");
    CHECK_THROWS_AS(read_recording(dir), FormatError);
}

TEST_CASE("recording reader rejects a wrong geometry row count in the header") {
    testutil::TempDir tmp("data_hdr");
    const auto dir = tmp.path / "night";
    write_recording(small_night(13), dir);
    write_text(dir / "upper.csv", "time,s0\n");
    CHECK_THROWS_AS(read_recording(dir), FormatError);
}

TEST_CASE("dataset round trip and patient subset") {
    testutil::TempDir tmp("data_ds");
    synth::StaticSetConfig c;
    c.geometry = {6, 4, 3};
    c.n_subjects = 3;
    c.frames_per_subject = 5;
    c.seed = 4;
    const auto ds = synth::generate_static_dataset(c);
    write_dataset(ds, tmp.path / "ds");
    const auto back = read_dataset(tmp.path / "ds");
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        CHECK(back.samples[i].frame == ds.samples[i].frame);
        CHECK(back.samples[i].label == ds.samples[i].label);
        CHECK(back.samples[i].patient_id == ds.samples[i].patient_id);
    }
    CHECK(back.geometry == ds.geometry);
    const auto ids = ds.patients();
    REQUIRE(ids.size() == 3);
    const auto sub = ds.subset({ids[1]});
    CHECK(sub.samples.size() == 5);
    for (const auto& s : sub.samples) CHECK(s.patient_id == ids[1]);
}

TEST_CASE("LabeledDataset rejects Transient labels") {
    LabeledDataset ds{{1, 1, 1}, {{PressureFrame(0, 1, 1, {0.0}), PoseLabel::Transient, "p"}}};
    CHECK_THROWS_AS(ds.validate(), ValidationError);
}

TEST_CASE("external dataset: 32x64 frame per line") {
    testutil::TempDir tmp("ext");
    write_external(tmp.path / "ok", 32, 64, repeat_values(2048, "500") + repeat_values(2048, "0"));
    const auto ds = read_external_dataset(tmp.path / "ok", {32, 64, 16});
    REQUIRE(ds.samples.size() == 2);
    CHECK(ds.samples[0].frame.rows() == 32);
    CHECK(ds.samples[0].frame.cols() == 64);
    CHECK(ds.samples[0].frame.at(31, 63) == 0.5);
    CHECK(ds.samples[0].patient_id == "X1");
    CHECK(ds.samples[0].label == PoseLabel::Supine);
    for (double v : ds.samples[1].frame.values()) CHECK(v == 0.0);

    write_external(tmp.path / "short", 32, 64, repeat_values(2047, "1"));
    CHECK_THROWS_AS(read_external_dataset(tmp.path / "short", {32, 64, 16}), FormatError);
}

TEST_CASE("external dataset: file without a manifest entry") {
    testutil::TempDir tmp("ext_missing");
    write_external(tmp.path / "d", 2, 2, repeat_values(4, "1"));
    write_text(tmp.path / "d" / "b.txt", repeat_values(4, "1"));
    CHECK_THROWS_AS(read_external_dataset(tmp.path / "d", {2, 2, 1}), FormatError);
}
