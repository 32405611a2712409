#include "cli_app.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <map>
#include <mutex>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "psm/data.hpp"
#include "psm/eval/harness.hpp"
#include "psm/eval/transfer.hpp"
#include "psm/features.hpp"
#include "psm/models/baselines.hpp"
#include "psm/models/mae.hpp"
#include "psm/models/tcn.hpp"
#include "psm/models/vit.hpp"
#include "psm/nn/checkpoint.hpp"
#include "psm/preprocess.hpp"
#include "psm/synth.hpp"
#include "psm/sync.hpp"
#include "text_io.hpp"

namespace psm::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string file_checksum(const fs::path& path) {
    const std::string bytes = detail::read_file(path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return nn::hex64(h);
}

std::map<std::string, std::string> tree_checksums(const fs::path& dir) {
    std::map<std::string, std::string> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), dir).generic_string();
        if (rel == "manifest.json") continue;
        out[rel] = file_checksum(e.path());
    }
    return out;
}

namespace {

// ---------------------------------------------------------------- plumbing

fs::path data_dir() {
    const char* e = std::getenv("PSM_DATA_DIR");
    return (e && *e) ? fs::path(e) : fs::path("psm-data");
}

/// Empty flag value -> $PSM_DATA_DIR/<stage>; always absolute.
fs::path resolve(const std::string& given, const std::string& stage) {
    return fs::absolute(given.empty() ? data_dir() / stage : fs::path(given)).lexically_normal();
}

void require_dir(const fs::path& p, const std::string& flag) {
    if (!fs::is_directory(p)) throw ValidationError(flag + ": input directory '" + p.string() + "' does not exist");
}

void require_file(const fs::path& p, const std::string& flag) {
    if (!fs::is_regular_file(p)) throw ValidationError(flag + ": input file '" + p.string() + "' does not exist");
}

void make_out_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (!fs::is_directory(p)) throw ValidationError("--out: cannot create directory '" + p.string() + "'");
}

/// Subdirectories of `dir` containing `marker`, sorted by name.
std::vector<fs::path> marked_subdirs(const fs::path& dir, const std::string& marker) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && fs::exists(e.path() / marker)) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<double> csv_doubles(const std::vector<std::string>& v) {
    std::vector<double> out;
    for (const auto& s : v) out.push_back(detail::parse_double(s, "flag value"));
    return out;
}

struct RunInfo {
    std::string command;
    fs::path out_dir;
    std::vector<fs::path> inputs;
    std::optional<std::uint64_t> seed;
    std::map<std::string, std::string> resolved;  // flag -> effective value overriding CLI11's view
};

/// Effective flag list of a parsed subcommand: given values, else captured
/// defaults, with resolved paths substituted.
std::vector<std::string> effective_args(const CLI::App& sub, const RunInfo& info, json& params) {
    std::vector<std::string> args{sub.get_name()};
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_lnames().empty() ? "" : "--" + opt->get_lnames().front();
        if (name.empty() || name == "--help") continue;
        if (opt->get_expected_min() == 0) {
            const bool on = opt->count() > 0;
            params[name.substr(2)] = on;
            if (on) args.push_back(name);
            continue;
        }
        std::string value;
        if (auto it = info.resolved.find(name); it != info.resolved.end()) {
            value = it->second;
        } else if (opt->count() > 0) {
            const auto& r = opt->results();
            for (std::size_t i = 0; i < r.size(); ++i) value += (i ? "," : "") + r[i];
        } else {
            value = opt->get_default_str();
        }
        if (value.empty()) continue;
        params[name.substr(2)] = value;
        args.push_back(name);
        args.push_back(value);
    }
    return args;
}

void write_manifest(const CLI::App& sub, const RunInfo& info, double seconds) {
    json params = json::object();
    const auto args = effective_args(sub, info, params);
    json inputs = json::array();
    for (const auto& p : info.inputs) inputs.push_back(p.string());
    json m;
    m["format_version"] = kManifestFormatVersion;
    m["command"] = info.command;
    m["params"] = params;
    m["seed"] = info.seed ? json(*info.seed) : json(nullptr);
    m["inputs"] = inputs;
    m["output_dir"] = info.out_dir.string();
    m["artifacts"] = tree_checksums(info.out_dir);
    m["duration_s"] = seconds;
    m["replay_args"] = args;
    detail::write_file_atomic(info.out_dir / "manifest.json", m.dump(2) + "\n");
}

json read_json(const fs::path& p) {
    try {
        return json::parse(detail::read_file(p));
    } catch (const json::exception& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

void write_json(const fs::path& p, const json& j) { detail::write_file_atomic(p, j.dump(2) + "\n"); }

// ------------------------------------------------------------ shared options

struct VitOpts {
    int embed = 64, depth = 4, heads = 4, patch = 6, mlp = 4;
    void add(CLI::App* s) {
        s->add_option("--embed-dim", embed, "Transformer width")->check(CLI::PositiveNumber);
        s->add_option("--depth", depth, "Transformer blocks")->check(CLI::NonNegativeNumber);
        s->add_option("--heads", heads, "Attention heads")->check(CLI::PositiveNumber);
        s->add_option("--patch", patch, "Patch size")->check(CLI::PositiveNumber);
        s->add_option("--mlp-ratio", mlp, "MLP hidden ratio")->check(CLI::PositiveNumber);
    }
    models::ViTConfig config(int rows, int cols, int channels) const {
        models::ViTConfig c;
        c.image_rows = rows;
        c.image_cols = cols;
        c.in_channels = channels;
        c.patch_size = patch;
        c.embed_dim = embed;
        c.depth = depth;
        c.heads = heads;
        c.mlp_ratio = mlp;
        c.validate();
        return c;
    }
};

struct MaeOpts {
    double mask_ratio = 0.75, lr = 1.5e-3, wd = 0.05;
    int dec_dim = 32, dec_depth = 1, dec_heads = 2, steps = 200, batch = 32;
    void add(CLI::App* s) {
        s->add_option("--mask-ratio", mask_ratio, "Fraction of patches masked")->check(CLI::Range(0.0, 1.0));
        s->add_option("--decoder-dim", dec_dim, "MAE decoder width")->check(CLI::PositiveNumber);
        s->add_option("--decoder-depth", dec_depth, "MAE decoder blocks")->check(CLI::NonNegativeNumber);
        s->add_option("--decoder-heads", dec_heads, "MAE decoder heads")->check(CLI::PositiveNumber);
        s->add_option("--pretrain-steps", steps, "Pre-training steps")->check(CLI::PositiveNumber);
        s->add_option("--pretrain-batch", batch, "Pre-training batch size")->check(CLI::PositiveNumber);
        s->add_option("--pretrain-lr", lr, "Pre-training learning rate")->check(CLI::PositiveNumber);
        s->add_option("--pretrain-wd", wd, "Pre-training weight decay")->check(CLI::NonNegativeNumber);
    }
    models::MAEConfig mae() const { return {mask_ratio, dec_dim, dec_depth, dec_heads}; }
    models::PretrainHyper hyper(std::uint64_t seed) const { return {lr, wd, steps, batch, seed}; }
};

struct SourceOpts {
    std::string dataset, external;
    int ext_rows = 64, ext_cols = 32, pad_rows = 0, pad_cols = 0;
    void add(CLI::App* s, const std::string& prefix) {
        s->add_option("--" + prefix, dataset, "Source dataset directory (dataset.csv format)");
        s->add_option("--" + prefix + "-external", external, "Source external dataset directory (manifest.json)");
        s->add_option("--ext-rows", ext_rows, "External frame rows")->check(CLI::PositiveNumber);
        s->add_option("--ext-cols", ext_cols, "External frame columns")->check(CLI::PositiveNumber);
        s->add_option("--pad-rows", pad_rows, "Zero-pad source frames to this many rows (0: square, patch multiple)");
        s->add_option("--pad-cols", pad_cols, "Zero-pad source frames to this many columns (0: square, patch multiple)");
    }
    /// Loads and pads source frames so both sides are patch multiples.
    LabeledDataset load(int patch, RunInfo& info, const std::string& flag) const {
        LabeledDataset ds;
        if (!external.empty()) {
            const fs::path p = fs::absolute(external);
            require_dir(p, "--" + flag + "-external");
            info.resolved["--" + flag + "-external"] = p.string();
            info.inputs.push_back(p);
            ds = read_external_dataset(p, {ext_rows, ext_cols, std::max(1, ext_rows / 2)});
        } else {
            const fs::path p = resolve(dataset, "source");
            require_dir(p, "--" + flag);
            info.resolved["--" + flag] = p.string();
            info.inputs.push_back(p);
            ds = read_dataset(p);
        }
        if (ds.samples.empty()) throw ValidationError("--" + flag + ": source dataset is empty");
        const int r = ds.samples.front().frame.rows(), c = ds.samples.front().frame.cols();
        int pr = pad_rows, pc = pad_cols;
        if (pr == 0 || pc == 0) {
            const int side = (std::max(r, c) + patch - 1) / patch * patch;
            if (pr == 0) pr = side;
            if (pc == 0) pc = side;
        }
        if (pr < r || pc < c) throw ValidationError("--pad-rows/--pad-cols smaller than the source frames");
        return (pr == r && pc == c) ? ds : prep::pad_dataset(ds, pr, pc);
    }
};

struct GridOpts {
    std::vector<std::string> lr{"0.001"}, wd{"0.05"};
    std::vector<int> epochs{10};
    void add(CLI::App* s) {
        s->add_option("--lr", lr, "Learning rates (comma list)")->delimiter(',');
        s->add_option("--wd", wd, "Weight decays (comma list)")->delimiter(',');
        s->add_option("--epochs", epochs, "Epoch counts (comma list)")->delimiter(',');
    }
    eval::SweepGrid grid() const {
        eval::SweepGrid g{csv_doubles(lr), csv_doubles(wd), epochs};
        for (double v : g.learning_rates)
            if (!(v > 0.0)) throw ValidationError("--lr: learning rates must be > 0");
        for (double v : g.weight_decays)
            if (!(v >= 0.0)) throw ValidationError("--wd: weight decays must be >= 0");
        for (int v : g.epochs)
            if (v < 1) throw ValidationError("--epochs: epoch counts must be >= 1");
        return g;
    }
};

LabeledDataset load_dataset(const std::string& given, const std::string& stage, const std::string& flag,
                            RunInfo& info) {
    const fs::path p = resolve(given, stage);
    require_dir(p, flag);
    info.resolved[flag] = p.string();
    info.inputs.push_back(p);
    return read_dataset(p);
}

/// Deterministic stride subsample to at most `cap` samples (0 = no cap).
LabeledDataset cap_samples(const LabeledDataset& ds, int cap) {
    if (cap <= 0 || ds.samples.size() <= static_cast<std::size_t>(cap)) return ds;
    LabeledDataset out{ds.geometry, {}};
    const std::size_t n = ds.samples.size();
    for (std::size_t k = 0; k < static_cast<std::size_t>(cap); ++k) out.samples.push_back(ds.samples[k * n / cap]);
    return out;
}

json cells_json(const std::string& model, const eval::SweepResult& r) {
    json cells = json::array();
    for (std::size_t c = 0; c < r.cells.size(); ++c)
        cells.push_back({{"cell", c},
                         {"learning_rate", r.cells[c].learning_rate},
                         {"weight_decay", r.cells[c].weight_decay},
                         {"epochs", r.cells[c].epochs},
                         {"mean_accuracy", r.mean_accuracy[c]},
                         {"mean_macro_f1", r.mean_macro_f1[c]}});
    return {{"model", model}, {"best_cell", r.best}, {"cells", cells}};
}

json folds_json(const std::vector<eval::FoldSplit>& folds) {
    json out = json::array();
    for (const auto& f : folds)
        out.push_back({{"fold", f.fold_index}, {"train", f.train_patients}, {"test", f.test_patients}});
    return out;
}

void write_predictions(const fs::path& path, const eval::SweepResult& r, const LabeledDataset& ds) {
    std::string out = "cell,fold,patient,t,truth,pred\n";
    for (const auto& e : r.evaluations)
        for (std::size_t i = 0; i < e.predictions.size(); ++i) {
            const auto& s = ds.samples[e.test_index[i]];
            detail::append_int(out, static_cast<long long>(e.cell));
            out += ',';
            detail::append_int(out, e.fold);
            out += ',';
            out += s.patient_id;
            out += ',';
            detail::append_fixed(out, s.frame.timestamp(), 3);
            out += ',';
            out += to_string(pose_from_index(e.truths[i]));
            out += ',';
            out += to_string(pose_from_index(e.predictions[i]));
            out += '\n';
        }
    detail::write_file_atomic(path, out);
}

void print_sweep(std::ostream& out, const eval::SweepResult& r) {
    char buf[160];
    for (std::size_t c = 0; c < r.cells.size(); ++c) {
        std::snprintf(buf, sizeof buf, "cell %zu lr=%g wd=%g epochs=%d: mean accuracy %.3f, macro-F1 %.3f%s\n", c,
                      r.cells[c].learning_rate, r.cells[c].weight_decay, r.cells[c].epochs, r.mean_accuracy[c],
                      r.mean_macro_f1[c], c == r.best ? "  (best)" : "");
        out << buf;
    }
}

std::vector<std::vector<double>> feature_matrix(const LabeledDataset& ds) {
    const auto t = features::extract_table(ds);
    models::Matrix x;
    x.reserve(t.rows.size());
    for (const auto& r : t.rows) x.emplace_back(r.begin(), r.end());
    return x;
}

// ------------------------------------------------------------------ report

std::vector<std::vector<std::size_t>> read_confusion(const fs::path& p) {
    const auto text = detail::read_file(p);
    const auto ls = detail::lines(text);
    std::vector<std::vector<std::size_t>> m;
    for (std::size_t i = 1; i < ls.size(); ++i) {
        if (detail::trim(ls[i]).empty()) continue;
        const auto f = detail::split(ls[i], ',');
        std::vector<std::size_t> row;
        for (std::size_t j = 1; j < f.size(); ++j)
            row.push_back(static_cast<std::size_t>(detail::parse_int(f[j], p.string() + ":" + std::to_string(i + 1))));
        m.push_back(std::move(row));
    }
    for (const auto& r : m)
        if (r.size() != m.size()) throw FormatError(p.string() + ": confusion matrix is not square");
    return m;
}

std::string svg_heatmap(const std::vector<std::vector<std::size_t>>& m, double acc, double f1) {
    const int k = static_cast<int>(m.size());
    const int cell = 70, left = 90, top = 60;
    const int w = left + k * cell + 20, h = top + k * cell + 60;
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
                    std::to_string(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    char buf[256];
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"20\">Confusion (rows = truth), accuracy %.3f, macro-F1 %.3f</text>\n",
                  10, acc, f1);
    s += buf;
    for (int c = 0; c < k; ++c) {
        std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%s</text>\n",
                      left + c * cell + cell / 2, top - 8, std::string(to_string(pose_from_index(c))).c_str());
        s += buf;
        std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"end\">%s</text>\n", left - 6,
                      top + c * cell + cell / 2 + 4, std::string(to_string(pose_from_index(c))).c_str());
        s += buf;
    }
    for (int r = 0; r < k; ++r) {
        std::size_t row_sum = 0;
        for (auto v : m[static_cast<std::size_t>(r)]) row_sum += v;
        for (int c = 0; c < k; ++c) {
            const auto v = m[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            const double frac = row_sum ? static_cast<double>(v) / static_cast<double>(row_sum) : 0.0;
            const int shade = static_cast<int>(std::lround(255.0 * (1.0 - frac)));
            std::snprintf(buf, sizeof buf,
                          "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"rgb(%d,%d,255)\" stroke=\"#888\"/>\n"
                          "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\" fill=\"%s\">%zu</text>\n",
                          left + c * cell, top + r * cell, cell, cell, shade, shade, left + c * cell + cell / 2,
                          top + r * cell + cell / 2 + 4, frac > 0.5 ? "white" : "black", v);
            s += buf;
        }
    }
    s += "<text x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(top + k * cell + 30) +
         "\">columns = predicted</text>\n</svg>\n";
    return s;
}

// ---------------------------------------------------------------- commands

struct App {
    std::ostream& out;
    std::ostream& err;
    CLI::App app{"PSM sleep-pose pipeline: synthetic data, synchronization, preprocessing, models and evaluation"};
    std::function<void(RunInfo&)> action;
    std::map<CLI::App*, std::function<void(RunInfo&)>> actions;
    bool writes_manifest = true;

    // option storage
    std::string in, out_dir, init, predictions, results, manifest, model = "forest", target, replay_out;
    std::optional<std::uint64_t> seed;
    int patients = 20, jobs = 1, folds = 5, max_train = 0, batch = 32;
    double night = 28800, entry = 3600, exit_t = 27000, biocal = 4500, dwell = 1800, transition = 8, noise = 0.01;
    std::optional<double> drift;
    bool static_set = false;
    int subjects = 10, frames = 200, rows = 36, cols = 18;
    bool no_hint = false, lenient = false;
    double threshold = 0.05, hold = 10;
    double rate = 1.0, margin = 5, epsilon = 0.01;
    int resize_rows = 18, resize_cols = 18;
    bool no_resize = false;
    int channels = 3;
    bool vitpose = false;
    int trees = 100, max_depth = 12, min_leaf = 2;
    int window = 30, filters = 128, kernel = 15, hidden = 32;
    double label_fraction = 0.1;
    int repeats = 3;
    VitOpts vit;
    MaeOpts mae;
    SourceOpts source;
    GridOpts grid;

    App(std::ostream& o, std::ostream& e) : out(o), err(e) {
        app.require_subcommand(1, 1);
        app.option_defaults()->always_capture_default();
        add_synth();
        add_sync();
        add_preprocess();
        add_features();
        add_pretrain();
        add_finetune();
        add_baseline();
        add_eval();
        add_transfer();
        add_report();
        add_replay();
    }

    CLI::App* sub(const std::string& name, const std::string& desc, std::function<void(RunInfo&)> fn) {
        CLI::App* s = app.add_subcommand(name, desc);
        actions[s] = std::move(fn);
        return s;
    }

    void add_out(CLI::App* s, const std::string& stage) {
        s->add_option("--out", out_dir, "Output directory (default $PSM_DATA_DIR/" + stage + ")");
    }
    void add_seed(CLI::App* s) { s->add_option("--seed", seed, "Random seed")->required(); }
    void add_jobs(CLI::App* s) { s->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber); }

    fs::path open_out(RunInfo& info, const std::string& stage) {
        info.out_dir = resolve(out_dir, stage);
        info.resolved["--out"] = info.out_dir.string();
        make_out_dir(info.out_dir);
        return info.out_dir;
    }

    void add_synth() {
        auto* s = sub("synth", "Generate synthetic nights (or a static labelled frame set)", [this](RunInfo& info) {
            info.seed = *seed;
            if (static_set) {
                synth::StaticSetConfig c;
                c.geometry = {rows, cols, std::max(1, rows / 2)};
                c.n_subjects = subjects;
                c.frames_per_subject = frames;
                c.noise_sigma = noise;
                c.seed = *seed;
                c.validate();
                const auto dir = open_out(info, "raw");
                write_dataset(synth::generate_static_dataset(c), dir);
                out << "wrote " << subjects * frames << " frames to " << dir.string() << "\n";
                return;
            }
            synth::SynthConfig c;
            c.seed = *seed;
            c.n_patients = patients;
            c.night_duration_s = night;
            c.entry_time_s = entry;
            c.exit_time_s = exit_t;
            c.biocal.time_s = biocal;
            c.mean_dwell_s = dwell;
            c.transition_duration_s = transition;
            c.noise_sigma = noise;
            c.drift_s = drift;
            c.validate();
            const auto dir = open_out(info, "raw");
            for (const auto& [rec, truth] : synth::generate_cohort(c)) {
                write_recording(rec, dir / rec.patient_id);
                detail::write_file_atomic(dir / rec.patient_id / "truth.json", synth::truth_to_json(truth));
            }
            out << "wrote " << patients << " nights to " << dir.string() << "\n";
        });
        add_seed(s);
        add_out(s, "raw");
        s->add_option("--patients", patients, "Number of nights")->check(CLI::PositiveNumber);
        s->add_option("--night-duration", night, "Night length [s]")->check(CLI::PositiveNumber);
        s->add_option("--entry", entry, "Bed entry [s]")->check(CLI::NonNegativeNumber);
        s->add_option("--exit", exit_t, "Bed exit [s]")->check(CLI::PositiveNumber);
        s->add_option("--biocal-time", biocal, "Biocalibration centre [s]")->check(CLI::PositiveNumber);
        s->add_option("--mean-dwell", dwell, "Mean pose dwell [s]")->check(CLI::PositiveNumber);
        s->add_option("--transition", transition, "Pose cross-fade [s]")->check(CLI::PositiveNumber);
        s->add_option("--noise", noise, "Sensor noise sigma (normalized)")->check(CLI::NonNegativeNumber);
        s->add_option("--drift", drift, "Lower-clock drift [s] (default: drawn from [-5, 5])");
        s->add_flag("--static-set", static_set, "Write independent labelled frames (dataset format) instead of nights");
        s->add_option("--subjects", subjects, "Static set: subjects")->check(CLI::PositiveNumber);
        s->add_option("--frames", frames, "Static set: frames per subject")->check(CLI::PositiveNumber);
        s->add_option("--rows", rows, "Static set: frame rows")->check(CLI::PositiveNumber);
        s->add_option("--cols", cols, "Static set: frame columns")->check(CLI::PositiveNumber);
    }

    void add_sync() {
        auto* s = sub("sync", "Estimate clock offsets, composite streams and align annotation logs", [this](RunInfo& info) {
            const fs::path src = resolve(in, "raw");
            require_dir(src, "--in");
            info.resolved["--in"] = src.string();
            info.inputs.push_back(src);
            sync::SyncParams p;
            p.use_log_hint = !no_hint;
            p.normalize = lenient ? NormalizeMode::Lenient : NormalizeMode::Strict;
            p.occupancy_threshold = threshold;
            p.hold_s = hold;
            p.validate();
            const auto nights = marked_subdirs(src, "meta.json");
            if (nights.empty()) throw ValidationError("--in: no recordings (meta.json) under '" + src.string() + "'");
            const auto dir = open_out(info, "aligned");
            std::string summary = "patient,offset_s,log_shift_s,biocal_time_s,envelope_peak,envelope_median,low_confidence\n";
            for (const auto& n : nights) {
                const auto aligned = sync::synchronize(read_recording(n), p);
                sync::write_aligned(aligned, dir / aligned.patient_id);
                summary += aligned.patient_id + ',';
                detail::append_fixed(summary, aligned.offset_s, 3);
                summary += ',';
                detail::append_fixed(summary, aligned.log_shift_s, 3);
                summary += ',';
                detail::append_fixed(summary, aligned.biocal.time_s, 3);
                summary += ',';
                detail::append_exact(summary, aligned.biocal.envelope_peak);
                summary += ',';
                detail::append_exact(summary, aligned.biocal.envelope_median);
                summary += aligned.biocal.low_confidence ? ",1\n" : ",0\n";
                if (aligned.biocal.low_confidence)
                    err << "warning: " << aligned.patient_id << ": low-confidence biocalibration detection\n";
            }
            detail::write_file_atomic(dir / "sync_summary.csv", summary);
            out << "synchronized " << nights.size() << " nights into " << dir.string() << "\n";
        });
        s->add_option("--in", in, "Raw recordings directory (default $PSM_DATA_DIR/raw)");
        add_out(s, "aligned");
        s->add_flag("--no-log-hint", no_hint, "Search the whole occupancy window for the biocalibration");
        s->add_flag("--lenient", lenient, "Clamp out-of-range counts instead of rejecting them");
        s->add_option("--occupancy-threshold", threshold, "Bed-entry mean pressure threshold")->check(CLI::PositiveNumber);
        s->add_option("--hold", hold, "Bed-entry hold time [s]")->check(CLI::PositiveNumber);
    }

    void add_preprocess() {
        auto* s = sub("preprocess", "Downsample, drop transients, deduplicate and resize aligned nights", [this](RunInfo& info) {
            const fs::path src = resolve(in, "aligned");
            require_dir(src, "--in");
            info.resolved["--in"] = src.string();
            info.inputs.push_back(src);
            prep::PreprocessParams p;
            p.target_rate_hz = rate;
            p.transient_margin_s = margin;
            p.dedup_epsilon = epsilon;
            p.resize = !no_resize;
            p.resize_target = {resize_rows, resize_cols};
            p.validate();
            const auto dirs = marked_subdirs(src, "sync.json");
            if (dirs.empty()) throw ValidationError("--in: no aligned nights (sync.json) under '" + src.string() + "'");
            std::vector<sync::AlignedNight> nights;
            for (const auto& d : dirs) nights.push_back(sync::read_aligned(d));
            const auto ds = prep::preprocess_nights(nights, p, jobs);
            const auto dir = open_out(info, "dataset");
            write_dataset(ds, dir);
            out << "wrote " << ds.samples.size() << " labelled frames from " << nights.size() << " nights to "
                << dir.string() << "\n";
        });
        s->add_option("--in", in, "Aligned nights directory (default $PSM_DATA_DIR/aligned)");
        add_out(s, "dataset");
        add_jobs(s);
        s->add_option("--rate", rate, "Target frame rate [Hz]")->check(CLI::PositiveNumber);
        s->add_option("--margin", margin, "Transient margin [s]")->check(CLI::NonNegativeNumber);
        s->add_option("--epsilon", epsilon, "Dedup threshold (mean abs difference)")->check(CLI::NonNegativeNumber);
        s->add_option("--resize-rows", resize_rows, "Resize target rows")->check(CLI::PositiveNumber);
        s->add_option("--resize-cols", resize_cols, "Resize target columns")->check(CLI::PositiveNumber);
        s->add_flag("--no-resize", no_resize, "Keep the native sensor grid");
    }

    void add_features() {
        auto* s = sub("features", "Extract engineered per-frame features", [this](RunInfo& info) {
            const auto ds = load_dataset(in, "dataset", "--in", info);
            const auto dir = open_out(info, "features");
            features::write_features(features::extract_table(ds), dir / "features.csv");
            out << "wrote features for " << ds.samples.size() << " frames to " << (dir / "features.csv").string() << "\n";
        });
        s->add_option("--in", in, "Dataset directory (default $PSM_DATA_DIR/dataset)");
        add_out(s, "features");
    }

    void add_pretrain() {
        auto* s = sub("pretrain", "Masked-autoencoder pre-training of a ViT encoder", [this](RunInfo& info) {
            info.seed = *seed;
            const auto src = source.load(vit.patch, info, "in");
            const auto& f = src.samples.front().frame;
            const auto cfg = vit.config(f.rows(), f.cols(), channels);
            mae.mae().validate(cfg.num_patches());
            const auto dir = open_out(info, "pretrain");
            const auto r = models::mae_pretrain(cfg, mae.mae(), src, mae.hyper(*seed));
            nn::save_checkpoint(r.checkpoint(), dir / "encoder.ckpt");
            std::string csv = "step,loss,encoder_tokens\n";
            for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
                detail::append_int(csv, static_cast<long long>(i + 1));
                csv += ',';
                detail::append_exact(csv, r.loss_trace[i]);
                csv += ',';
                detail::append_int(csv, r.encoder_tokens[i]);
                csv += '\n';
            }
            detail::write_file_atomic(dir / "pretrain_loss.csv", csv);
            out << "pre-trained on " << src.samples.size() << " frames (" << cfg.image_rows << "x" << cfg.image_cols
                << ", " << cfg.num_patches() << " patches); loss " << r.loss_trace.front() << " -> "
                << r.loss_trace.back() << "\n";
        });
        add_seed(s);
        source.add(s, "in");
        add_out(s, "pretrain");
        vit.add(s);
        mae.add(s);
        s->add_option("--channels", channels, "Input channels the source is replicated to (3 mimics RGB)")
            ->check(CLI::IsMember({1, 3}));
    }

    /// Pretrained encoder adapted to the target image, or nullopt for scratch.
    std::optional<models::ViT> load_init(const LabeledDataset& ds, RunInfo& info) {
        if (init.empty()) return std::nullopt;
        const fs::path p = fs::absolute(init);
        require_file(p, "--init");
        info.resolved["--init"] = p.string();
        info.inputs.push_back(p);
        models::ViT m = models::ViT::from_checkpoint(nn::load_checkpoint(p));
        if (m.config.in_channels == 3) m = models::collapse_channels(m);
        const auto& f = ds.samples.front().frame;
        return models::adapt_to_image(m, f.rows(), f.cols());
    }

    void add_finetune() {
        auto* s = sub("finetune", "Patient-grouped k-fold ViT fine-tuning with a hyperparameter sweep", [this](RunInfo& info) {
            info.seed = *seed;
            const auto ds = load_dataset(in, "dataset", "--in", info);
            if (ds.samples.empty()) throw ValidationError("--in: dataset is empty");
            const auto g = grid.grid();
            const auto& f0 = ds.samples.front().frame;
            const auto cfg = vit.config(f0.rows(), f0.cols(), 1);
            const auto pre = load_init(ds, info);
            if (pre && pre->config.embed_dim != cfg.embed_dim)
                throw ValidationError("--init: checkpoint embed_dim " + std::to_string(pre->config.embed_dim) +
                                      " differs from --embed-dim " + std::to_string(cfg.embed_dim));
            const auto splits = eval::make_folds(ds.patients(), folds, *seed);
            const auto dir = open_out(info, "finetune");
            std::mutex mu;
            const std::uint64_t base = *seed;
            const auto family = [&](const LabeledDataset& train, const LabeledDataset& test, const eval::HyperCell& cell,
                                    const eval::FoldSplit& fold) {
                const std::uint64_t s = mix_seed(base, static_cast<std::uint64_t>(fold.fold_index));
                const models::ViT start =
                    pre ? models::replace_head(*pre, kNumPoses, {models::HeadMode::KeepBackbone, vitpose, s})
                        : models::ViT::init(cfg, s);
                models::FinetuneHyper h{cell.learning_rate, cell.weight_decay, cell.epochs, batch, s, false};
                const auto r = models::finetune(start, cap_samples(train, max_train), LabeledDataset{train.geometry, {}}, h);
                auto pred = models::predict(r.model, test);
                const auto ck = r.checkpoint();
                std::lock_guard lock(mu);
                std::size_t ci = 0;
                for (const auto& c : g.cells())
                    if (c.learning_rate == cell.learning_rate && c.weight_decay == cell.weight_decay &&
                        c.epochs == cell.epochs)
                        break;
                    else
                        ++ci;
                nn::save_checkpoint(ck, dir / ("model_c" + std::to_string(ci) + "_f" + std::to_string(fold.fold_index) + ".ckpt"));
                return pred;
            };
            const auto r = eval::sweep(family, g, splits, ds, jobs);
            write_predictions(dir / "predictions.csv", r, ds);
            write_json(dir / "cells.json", cells_json("vit", r));
            write_json(dir / "folds.json", folds_json(splits));
            print_sweep(out, r);
        });
        add_seed(s);
        s->add_option("--in", in, "Dataset directory (default $PSM_DATA_DIR/dataset)");
        add_out(s, "finetune");
        add_jobs(s);
        vit.add(s);
        grid.add(s);
        s->add_option("--folds", folds, "Number of patient-grouped folds")->check(CLI::Range(2, 1000000));
        s->add_option("--batch-size", batch, "Mini-batch size")->check(CLI::PositiveNumber);
        s->add_option("--init", init, "Pre-trained encoder checkpoint (default: random init)");
        s->add_flag("--vitpose-style", vitpose, "Re-randomize the patch embedding of the pre-trained encoder");
        s->add_option("--max-train-frames", max_train, "Cap training frames per fold (0 = all)")
            ->check(CLI::NonNegativeNumber);
    }

    void add_baseline() {
        auto* s = sub("train-baseline", "Patient-grouped k-fold baselines: random forest, logistic regression or TCN",
                      [this](RunInfo& info) {
            info.seed = *seed;
            const auto ds = load_dataset(in, "dataset", "--in", info);
            if (ds.samples.empty()) throw ValidationError("--in: dataset is empty");
            auto g = grid.grid();
            if (model == "forest") g = eval::SweepGrid{{0.0}, {0.0}, {0}};
            const auto splits = eval::make_folds(ds.patients(), folds, *seed);
            const auto dir = open_out(info, "baseline");
            const std::uint64_t base = *seed;
            const int frame_dim = static_cast<int>(ds.samples.front().frame.size());
            const auto family = [&](const LabeledDataset& train_full, const LabeledDataset& test,
                                    const eval::HyperCell& cell, const eval::FoldSplit& fold) -> std::vector<int> {
                const std::uint64_t s = mix_seed(base, static_cast<std::uint64_t>(fold.fold_index));
                if (model == "tcn") {
                    models::TcnConfig tc{frame_dim, window, filters, kernel, hidden, kNumPoses};
                    models::FinetuneHyper h{cell.learning_rate, cell.weight_decay, cell.epochs, batch, s, false};
                    const auto r = models::train_tcn(tc, train_full, h);
                    return models::tcn_predict(r.model, test, models::make_windows(test, window, true));
                }
                const auto train = cap_samples(train_full, max_train);
                const auto x = feature_matrix(train);
                const auto y = models::labels_of(train);
                if (model == "forest") {
                    models::ForestConfig fc;
                    fc.n_trees = trees;
                    fc.max_depth = max_depth;
                    fc.min_leaf = min_leaf;
                    fc.seed = s;
                    return models::forest_predict(models::train_forest(x, y, fc), feature_matrix(test));
                }
                models::LinearHyper lh{cell.learning_rate, cell.weight_decay, cell.epochs, kNumPoses};
                return models::linear_predict(models::train_linear(x, y, lh), feature_matrix(test));
            };
            const auto r = eval::sweep(family, g, splits, ds, jobs);
            write_predictions(dir / "predictions.csv", r, ds);
            write_json(dir / "cells.json", cells_json(model, r));
            write_json(dir / "folds.json", folds_json(splits));
            print_sweep(out, r);
        });
        add_seed(s);
        s->add_option("--model", model, "forest | linear | tcn")->check(CLI::IsMember({"forest", "linear", "tcn"}));
        s->add_option("--in", in, "Dataset directory (default $PSM_DATA_DIR/dataset)");
        add_out(s, "baseline");
        add_jobs(s);
        grid.add(s);
        s->add_option("--folds", folds, "Number of patient-grouped folds")->check(CLI::Range(2, 1000000));
        s->add_option("--trees", trees, "Forest: trees")->check(CLI::PositiveNumber);
        s->add_option("--max-depth", max_depth, "Forest: maximum depth")->check(CLI::PositiveNumber);
        s->add_option("--min-leaf", min_leaf, "Forest: minimum leaf size")->check(CLI::PositiveNumber);
        s->add_option("--window", window, "TCN: window length [frames]")->check(CLI::PositiveNumber);
        s->add_option("--filters", filters, "TCN: convolution filters")->check(CLI::PositiveNumber);
        s->add_option("--kernel", kernel, "TCN: kernel size")->check(CLI::PositiveNumber);
        s->add_option("--hidden", hidden, "TCN: hidden units")->check(CLI::PositiveNumber);
        s->add_option("--batch-size", batch, "TCN: mini-batch size")->check(CLI::PositiveNumber);
        s->add_option("--max-train-frames", max_train, "Forest/linear: cap training frames per fold (0 = all)")
            ->check(CLI::NonNegativeNumber);
    }

    void add_eval() {
        auto* s = sub("eval", "Score predictions: results.csv and per-fold confusion matrices", [this](RunInfo& info) {
            const fs::path p = predictions.empty() ? resolve("", "finetune") / "predictions.csv" : fs::absolute(predictions);
            require_file(p, "--predictions");
            info.resolved["--predictions"] = p.string();
            info.inputs.push_back(p);
            const auto text = detail::read_file(p);
            const auto ls = detail::lines(text);
            if (ls.empty() || detail::trim(ls[0]) != "cell,fold,patient,t,truth,pred")
                throw FormatError(p.string() + ": malformed header, expected cell,fold,patient,t,truth,pred");
            std::map<std::pair<std::size_t, int>, std::pair<std::vector<int>, std::vector<int>>> groups;
            for (std::size_t i = 1; i < ls.size(); ++i) {
                if (detail::trim(ls[i]).empty()) continue;
                const auto f = detail::split(ls[i], ',');
                const std::string where = p.string() + ":" + std::to_string(i + 1);
                if (f.size() != 6) throw FormatError(where + ": expected 6 fields");
                auto& g = groups[{static_cast<std::size_t>(detail::parse_int(f[0], where)),
                                  static_cast<int>(detail::parse_int(f[1], where))}];
                g.first.push_back(class_index(parse_pose(detail::trim(f[5]))));
                g.second.push_back(class_index(parse_pose(detail::trim(f[4]))));
            }
            if (groups.empty()) throw ValidationError("--predictions: no prediction rows in '" + p.string() + "'");
            eval::SweepResult r;
            const std::size_t ncells = groups.rbegin()->first.first + 1;
            r.cells.assign(ncells, eval::HyperCell{0.0, 0.0, 0});
            const fs::path cells_path = p.parent_path() / "cells.json";
            if (fs::exists(cells_path)) {
                info.inputs.push_back(cells_path);
                const auto cj = read_json(cells_path);
                for (const auto& c : cj.at("cells")) {
                    const auto i = c.at("cell").get<std::size_t>();
                    if (i < ncells)
                        r.cells[i] = {c.at("learning_rate").get<double>(), c.at("weight_decay").get<double>(),
                                      c.at("epochs").get<int>()};
                }
            }
            std::vector<double> acc(ncells, 0.0), f1(ncells, 0.0);
            std::vector<int> nfold(ncells, 0);
            for (auto& [key, g] : groups) {
                eval::CellFoldResult e;
                e.cell = key.first;
                e.fold = key.second;
                e.report = eval::evaluate(g.first, g.second, kNumPoses);
                acc[e.cell] += e.report.accuracy;
                f1[e.cell] += e.report.macro_f1;
                ++nfold[e.cell];
                r.evaluations.push_back(std::move(e));
            }
            for (std::size_t c = 0; c < ncells; ++c) {
                r.mean_accuracy.push_back(nfold[c] ? acc[c] / nfold[c] : 0.0);
                r.mean_macro_f1.push_back(nfold[c] ? f1[c] / nfold[c] : 0.0);
                if (r.mean_accuracy[c] > r.mean_accuracy[r.best]) r.best = c;
            }
            const auto dir = open_out(info, "eval");
            eval::write_results_csv(r, dir / "results.csv");
            eval::write_confusion_csvs(r, r.best, dir);
            json summary = {{"best_cell", r.best}, {"mean_accuracy", r.mean_accuracy}, {"mean_macro_f1", r.mean_macro_f1}};
            json reports = json::array();
            for (const auto& e : r.evaluations)
                if (e.cell == r.best) reports.push_back({{"fold", e.fold}, {"report", e.report.to_json()}});
            summary["best_cell_reports"] = reports;
            write_json(dir / "eval_summary.json", summary);
            char buf[128];
            for (const auto& e : r.evaluations)
                if (e.cell == r.best) {
                    std::snprintf(buf, sizeof buf, "fold %d: accuracy %.3f, macro-F1 %.3f (n=%zu)\n", e.fold,
                                  e.report.accuracy, e.report.macro_f1, e.report.n_samples);
                    out << buf;
                }
            std::snprintf(buf, sizeof buf, "accuracy %.3f\nmacro-F1 %.3f\n", r.mean_accuracy[r.best],
                          r.mean_macro_f1[r.best]);
            out << buf;
        });
        s->add_option("--predictions", predictions,
                      "predictions.csv (default $PSM_DATA_DIR/finetune/predictions.csv); cells.json beside it is optional");
        add_out(s, "eval");
    }

    void add_transfer() {
        auto* s = sub("transfer", "Scratch vs MAE-pretrained fine-tuning under a reduced label budget", [this](RunInfo& info) {
            info.seed = *seed;
            const auto src = source.load(vit.patch, info, "source");
            const auto tgt = load_dataset(target, "dataset", "--target", info);
            if (tgt.samples.empty()) throw ValidationError("--target: dataset is empty");
            const auto g = grid.grid();
            if (g.cells().size() != 1) throw ValidationError("transfer takes a single --lr/--wd/--epochs value");
            const auto& f0 = tgt.samples.front().frame;
            eval::TransferConfig c;
            c.target = vit.config(f0.rows(), f0.cols(), 1);
            c.source_channels = channels;
            c.mae = mae.mae();
            c.pretrain = mae.hyper(0);
            c.finetune = {g.learning_rates[0], g.weight_decays[0], g.epochs[0], batch, 0, false};
            c.label_fraction = label_fraction;
            c.folds = folds;
            c.seeds.clear();
            for (int i = 0; i < repeats; ++i) c.seeds.push_back(*seed + static_cast<std::uint64_t>(i));
            c.jobs = jobs;
            const auto dir = open_out(info, "transfer");
            const auto r = eval::run_transfer_experiment(src, tgt, c);
            write_json(dir / "transfer.json", r.to_json());
            std::string csv = "arm,seed,fold,accuracy,macro_f1\n";
            for (const auto& [name, arm] : {std::pair{"scratch", &r.scratch}, std::pair{"pretrained", &r.pretrained}})
                for (std::size_t i = 0; i < arm->reports.size(); ++i) {
                    csv += name;
                    csv += ',';
                    detail::append_int(csv, static_cast<long long>(c.seeds[i / static_cast<std::size_t>(folds)]));
                    csv += ',';
                    detail::append_int(csv, static_cast<long long>(i % static_cast<std::size_t>(folds)));
                    csv += ',';
                    detail::append_exact(csv, arm->reports[i].accuracy);
                    csv += ',';
                    detail::append_exact(csv, arm->reports[i].macro_f1);
                    csv += '\n';
                }
            detail::write_file_atomic(dir / "transfer_results.csv", csv);
            char buf[160];
            std::snprintf(buf, sizeof buf, "scratch:    accuracy %.3f, macro-F1 %.3f\npretrained: accuracy %.3f, macro-F1 %.3f\n",
                          r.scratch.mean_accuracy, r.scratch.mean_macro_f1, r.pretrained.mean_accuracy,
                          r.pretrained.mean_macro_f1);
            out << buf;
        });
        add_seed(s);
        source.add(s, "source");
        s->add_option("--target", target, "Target dataset directory (default $PSM_DATA_DIR/dataset)");
        add_out(s, "transfer");
        add_jobs(s);
        vit.add(s);
        mae.add(s);
        grid.add(s);
        s->add_option("--channels", channels, "Source channels for pre-training")->check(CLI::IsMember({1, 3}));
        s->add_option("--batch-size", batch, "Fine-tuning batch size")->check(CLI::PositiveNumber);
        s->add_option("--label-fraction", label_fraction, "Fraction of training frames with labels")
            ->check(CLI::Range(0.0, 1.0));
        s->add_option("--folds", folds, "Number of patient-grouped folds")->check(CLI::Range(2, 1000000));
        s->add_option("--repeats", repeats, "Seeds seed, seed+1, ...")->check(CLI::PositiveNumber);
    }

    void add_report() {
        auto* s = sub("report", "Render a text confusion grid, an SVG heatmap and a metric summary", [this](RunInfo& info) {
            const fs::path p = results.empty() ? resolve("", "eval") / "results.csv" : fs::absolute(results);
            require_file(p, "--results");
            info.resolved["--results"] = p.string();
            info.inputs.push_back(p);
            const auto rows_in = eval::read_results_csv(p);
            if (rows_in.empty()) throw ValidationError("--results: no rows in '" + p.string() + "'");
            std::vector<fs::path> conf;
            for (const auto& e : fs::directory_iterator(p.parent_path())) {
                const auto n = e.path().filename().string();
                if (n.starts_with("confusion_") && n.ends_with(".csv")) conf.push_back(e.path());
            }
            std::sort(conf.begin(), conf.end());
            std::vector<std::vector<std::size_t>> total(kNumPoses, std::vector<std::size_t>(kNumPoses, 0));
            for (const auto& c : conf) {
                info.inputs.push_back(c);
                const auto m = read_confusion(c);
                if (m.size() != static_cast<std::size_t>(kNumPoses)) throw FormatError(c.string() + ": expected 4 classes");
                for (std::size_t i = 0; i < m.size(); ++i)
                    for (std::size_t j = 0; j < m.size(); ++j) total[i][j] += m[i][j];
            }
            std::vector<int> pred, truth;
            for (int i = 0; i < kNumPoses; ++i)
                for (int j = 0; j < kNumPoses; ++j)
                    for (std::size_t n = 0; n < total[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]; ++n) {
                        truth.push_back(i);
                        pred.push_back(j);
                    }
            // per-cell means over folds
            std::map<std::tuple<double, double, int>, std::pair<std::vector<double>, std::vector<double>>> cells;
            for (const auto& r : rows_in) {
                auto& c = cells[{r.cell.learning_rate, r.cell.weight_decay, r.cell.epochs}];
                c.first.push_back(r.accuracy);
                c.second.push_back(r.macro_f1);
            }
            std::string txt = "Per-fold results\n  fold  lr          wd          epochs  accuracy  macro-F1\n";
            char buf[200];
            for (const auto& r : rows_in) {
                std::snprintf(buf, sizeof buf, "  %-4d  %-10g  %-10g  %-6d  %.3f     %.3f\n", r.fold, r.cell.learning_rate,
                              r.cell.weight_decay, r.cell.epochs, r.accuracy, r.macro_f1);
                txt += buf;
            }
            txt += "\nMean over folds\n";
            for (const auto& [k, v] : cells) {
                const auto mean = [](const std::vector<double>& x) {
                    double s = 0.0;
                    for (double d : x) s += d;
                    return s / static_cast<double>(x.size());
                };
                std::snprintf(buf, sizeof buf, "  lr=%g wd=%g epochs=%d: accuracy %.3f, macro-F1 %.3f (%zu folds)\n",
                              std::get<0>(k), std::get<1>(k), std::get<2>(k), mean(v.first), mean(v.second), v.first.size());
                txt += buf;
            }
            double acc = 0.0, f1 = 0.0;
            if (!conf.empty() && !truth.empty()) {
                const auto rep = eval::evaluate(pred, truth, kNumPoses);
                acc = rep.accuracy;
                f1 = rep.macro_f1;
                txt += "\nPooled confusion over " + std::to_string(conf.size()) + " folds (rows = truth, cols = predicted)\n";
                txt += "           ";
                for (int c = 0; c < kNumPoses; ++c) {
                    std::snprintf(buf, sizeof buf, "%10s", std::string(to_string(pose_from_index(c))).c_str());
                    txt += buf;
                }
                txt += '\n';
                for (int r = 0; r < kNumPoses; ++r) {
                    std::snprintf(buf, sizeof buf, "  %-9s", std::string(to_string(pose_from_index(r))).c_str());
                    txt += buf;
                    for (int c = 0; c < kNumPoses; ++c) {
                        std::snprintf(buf, sizeof buf, "%10zu", total[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
                        txt += buf;
                    }
                    txt += '\n';
                }
                std::snprintf(buf, sizeof buf, "\nPooled accuracy %.3f, macro-F1 %.3f\n", acc, f1);
                txt += buf;
            }
            const auto dir = open_out(info, "report");
            detail::write_file_atomic(dir / "report.txt", txt);
            if (!conf.empty()) detail::write_file_atomic(dir / "heatmap.svg", svg_heatmap(total, acc, f1));
            out << txt;
        });
        s->add_option("--results", results, "results.csv (default $PSM_DATA_DIR/eval/results.csv)");
        add_out(s, "report");
    }

    void add_replay() {
        auto* s = sub("replay", "Re-run a command from its manifest.json and compare artifact checksums", [this](RunInfo&) {
            const fs::path mp = fs::absolute(manifest);
            require_file(mp, "--manifest");
            const json m = read_json(mp);
            if (!m.contains("format_version") || m.at("format_version").get<int>() != kManifestFormatVersion)
                throw FormatError(mp.string() + ": unsupported manifest format_version");
            auto args = m.at("replay_args").get<std::vector<std::string>>();
            const fs::path orig = m.at("output_dir").get<std::string>();
            const fs::path dest = replay_out.empty() ? fs::path(orig.string() + "-replay") : fs::absolute(replay_out);
            if (fs::absolute(dest).lexically_normal() == orig.lexically_normal())
                throw ValidationError("--out: the replay directory must differ from the original output");
            bool replaced = false;
            for (std::size_t i = 0; i + 1 < args.size(); ++i)
                if (args[i] == "--out") {
                    args[i + 1] = dest.string();
                    replaced = true;
                }
            if (!replaced) {
                args.push_back("--out");
                args.push_back(dest.string());
            }
            std::ostringstream sink;
            const int rc = run(args, sink, err);
            if (rc != kExitOk) throw Error("replayed command failed with exit code " + std::to_string(rc));
            const auto want = m.at("artifacts").get<std::map<std::string, std::string>>();
            const auto got = tree_checksums(dest);
            std::size_t bad = 0;
            for (const auto& [name, sum] : want) {
                const auto it = got.find(name);
                const bool ok = it != got.end() && it->second == sum;
                if (!ok) ++bad;
                out << (ok ? "identical  " : "DIFFERS    ") << name << "\n";
            }
            for (const auto& [name, sum] : got)
                if (!want.contains(name)) {
                    ++bad;
                    out << "EXTRA      " << name << "\n";
                }
            if (bad) throw Error(std::to_string(bad) + " artifact(s) differ from the manifest");
            out << "replay reproduced " << want.size() << " artifacts byte-identically\n";
        });
        s->add_option("--manifest", manifest, "manifest.json of the run to reproduce")->required();
        s->add_option("--out", replay_out, "Directory for the replayed outputs (default <original>-replay)");
    }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    App a(out, err);
    std::vector<std::string> storage{"psm"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    try {
        a.app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << a.app.help();
        if (auto subs = a.app.get_subcommands(); !subs.empty()) out << subs.front()->help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << a.app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    CLI::App* sub = a.app.get_subcommands().front();
    RunInfo info;
    info.command = sub->get_name();
    const auto t0 = std::chrono::steady_clock::now();
    try {
        a.actions.at(sub)(info);
        if (info.command != "replay") {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            write_manifest(*sub, info, secs);
        }
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

}  // namespace psm::cli
