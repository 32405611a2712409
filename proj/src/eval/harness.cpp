#include "psm/eval/harness.hpp"

#include <algorithm>
#include <future>
#include <set>

#include "psm/common.hpp"
#include "text_io.hpp"

namespace psm::eval {

std::vector<FoldSplit> make_folds(std::vector<std::string> ids, int k, std::uint64_t seed) {
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ValidationError("make_folds: duplicate patient ids");
    if (k < 2) throw ValidationError("make_folds: k must be at least 2");
    if (static_cast<std::size_t>(k) > ids.size())
        throw ValidationError("make_folds: k = " + std::to_string(k) + " exceeds the " + std::to_string(ids.size()) +
                              " patients");
    Rng rng(seed);
    rng.shuffle(ids);
    const std::size_t n = ids.size(), kk = static_cast<std::size_t>(k);
    std::vector<FoldSplit> folds;
    std::size_t start = 0;
    for (std::size_t f = 0; f < kk; ++f) {
        const std::size_t len = n / kk + (f < n % kk ? 1 : 0);
        FoldSplit s;
        s.fold_index = static_cast<int>(f);
        for (std::size_t i = 0; i < n; ++i)
            (i >= start && i < start + len ? s.test_patients : s.train_patients).push_back(ids[i]);
        std::sort(s.test_patients.begin(), s.test_patients.end());
        std::sort(s.train_patients.begin(), s.train_patients.end());
        folds.push_back(std::move(s));
        start += len;
    }
    return folds;
}

void require_disjoint(const FoldSplit& fold) {
    const std::set<std::string> train(fold.train_patients.begin(), fold.train_patients.end());
    for (const auto& p : fold.test_patients)
        if (train.contains(p))
            throw ValidationError("fold " + std::to_string(fold.fold_index) + ": patient '" + p +
                                  "' is in both train and test");
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json pc = nlohmann::json::array();
    for (const auto& c : per_class)
        pc.push_back({{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}});
    return {{"num_classes", num_classes}, {"n_samples", n_samples}, {"accuracy", accuracy},
            {"macro_f1", macro_f1},       {"confusion", confusion}, {"per_class", pc}};
}

EvalReport evaluate(std::span<const int> predictions, std::span<const int> truths, int num_classes) {
    if (predictions.size() != truths.size())
        throw ValidationError("evaluate: " + std::to_string(predictions.size()) + " predictions vs " +
                              std::to_string(truths.size()) + " truths");
    if (num_classes < 1) throw ValidationError("evaluate: num_classes must be positive");
    EvalReport r;
    r.num_classes = num_classes;
    const auto k = static_cast<std::size_t>(num_classes);
    r.confusion.assign(k, std::vector<std::size_t>(k, 0));
    for (std::size_t i = 0; i < truths.size(); ++i) {
        if (truths[i] < 0 || truths[i] >= num_classes || predictions[i] < 0 || predictions[i] >= num_classes)
            throw ValidationError("evaluate: label out of range at position " + std::to_string(i));
        ++r.confusion[static_cast<std::size_t>(truths[i])][static_cast<std::size_t>(predictions[i])];
    }
    r.n_samples = truths.size();
    std::size_t trace = 0;
    double f1_sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t row = 0, col = 0;
        for (std::size_t j = 0; j < k; ++j) {
            row += r.confusion[c][j];
            col += r.confusion[j][c];
        }
        const std::size_t tp = r.confusion[c][c];
        trace += tp;
        ClassMetrics m;
        m.support = row;
        m.precision = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
        m.recall = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
        m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
        f1_sum += m.f1;
        r.per_class.push_back(m);
    }
    r.accuracy = r.n_samples ? static_cast<double>(trace) / static_cast<double>(r.n_samples) : 0.0;
    r.macro_f1 = f1_sum / static_cast<double>(k);
    return r;
}

std::vector<HyperCell> SweepGrid::cells() const {
    std::vector<HyperCell> out;
    for (double lr : learning_rates)
        for (double wd : weight_decays)
            for (int e : epochs) out.push_back({lr, wd, e});
    return out;
}

std::vector<std::size_t> patient_indices(const LabeledDataset& ds, const std::vector<std::string>& patients) {
    const std::set<std::string> want(patients.begin(), patients.end());
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        if (want.contains(ds.samples[i].patient_id)) idx.push_back(i);
    return idx;
}

SweepResult sweep(const ModelFamily& family, const SweepGrid& grid, const std::vector<FoldSplit>& folds,
                  const LabeledDataset& dataset, int jobs) {
    SweepResult r;
    r.cells = grid.cells();
    if (r.cells.empty()) throw ValidationError("sweep: empty grid");
    if (folds.empty()) throw ValidationError("sweep: no folds");
    for (const auto& f : folds) require_disjoint(f);
    std::vector<LabeledDataset> train, test;
    std::vector<std::vector<std::size_t>> test_idx;
    std::vector<std::vector<int>> truths;
    for (const auto& f : folds) {
        train.push_back(dataset.subset(f.train_patients));
        test.push_back(dataset.subset(f.test_patients));
        test_idx.push_back(patient_indices(dataset, f.test_patients));
        std::vector<int> y;
        for (const auto& s : test.back().samples) y.push_back(class_index(s.label));
        truths.push_back(std::move(y));
    }
    const std::size_t nf = folds.size();
    r.evaluations.resize(r.cells.size() * nf);
    const auto run = [&](std::size_t job) {
        const std::size_t c = job / nf, f = job % nf;
        auto pred = family(train[f], test[f], r.cells[c], folds[f]);
        if (pred.size() != truths[f].size())
            throw Error("sweep: model returned " + std::to_string(pred.size()) + " predictions for " +
                        std::to_string(truths[f].size()) + " test samples");
        auto& e = r.evaluations[job];
        e.cell = c;
        e.fold = folds[f].fold_index;
        e.report = evaluate(pred, truths[f], kNumPoses);
        e.predictions = std::move(pred);
        e.truths = truths[f];
        e.test_index = test_idx[f];
    };
    const std::size_t total = r.evaluations.size();
    const auto workers_n = static_cast<std::size_t>(std::clamp(jobs, 1, static_cast<int>(total)));
    std::vector<std::future<void>> workers;
    for (std::size_t w = 0; w < workers_n; ++w)
        workers.push_back(std::async(std::launch::async, [&, w] {
            for (std::size_t j = w; j < total; j += workers_n) run(j);
        }));
    for (auto& w : workers) w.get();
    for (std::size_t c = 0; c < r.cells.size(); ++c) {
        double acc = 0.0, f1 = 0.0;
        for (std::size_t f = 0; f < nf; ++f) {
            acc += r.evaluations[c * nf + f].report.accuracy;
            f1 += r.evaluations[c * nf + f].report.macro_f1;
        }
        r.mean_accuracy.push_back(acc / static_cast<double>(nf));
        r.mean_macro_f1.push_back(f1 / static_cast<double>(nf));
        if (r.mean_accuracy[c] > r.mean_accuracy[r.best]) r.best = c;
    }
    return r;
}

void write_results_csv(const SweepResult& r, const std::filesystem::path& path) {
    std::string out = "fold,cell,learning_rate,weight_decay,epochs,accuracy,macro_f1,n_samples\n";
    for (const auto& e : r.evaluations) {
        const auto& c = r.cells[e.cell];
        detail::append_int(out, e.fold);
        out += ',';
        detail::append_int(out, static_cast<long long>(e.cell));
        out += ',';
        detail::append_exact(out, c.learning_rate);
        out += ',';
        detail::append_exact(out, c.weight_decay);
        out += ',';
        detail::append_int(out, c.epochs);
        out += ',';
        detail::append_exact(out, e.report.accuracy);
        out += ',';
        detail::append_exact(out, e.report.macro_f1);
        out += ',';
        detail::append_int(out, static_cast<long long>(e.report.n_samples));
        out += '\n';
    }
    detail::write_file_atomic(path, out);
}

std::string confusion_csv(const EvalReport& report) {
    std::string out = "truth";
    for (int c = 0; c < report.num_classes; ++c) {
        out += ",pred_";
        out += to_string(pose_from_index(c));
    }
    out += '\n';
    for (int t = 0; t < report.num_classes; ++t) {
        out += to_string(pose_from_index(t));
        for (std::size_t v : report.confusion[static_cast<std::size_t>(t)]) {
            out += ',';
            detail::append_int(out, static_cast<long long>(v));
        }
        out += '\n';
    }
    return out;
}

void write_confusion_csvs(const SweepResult& r, std::size_t cell, const std::filesystem::path& dir) {
    for (const auto& e : r.evaluations)
        if (e.cell == cell)
            detail::write_file_atomic(dir / ("confusion_" + std::to_string(e.fold) + ".csv"), confusion_csv(e.report));
}

std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
    const auto text = detail::read_file(path);
    const auto ls = detail::lines(text);
    if (ls.empty() || detail::split(ls[0], ',').size() != 8)
        throw FormatError(path.string() + ": malformed header, expected fold,cell,learning_rate,weight_decay,epochs,accuracy,macro_f1,n_samples");
    std::vector<ResultRow> rows;
    for (std::size_t i = 1; i < ls.size(); ++i) {
        if (detail::trim(ls[i]).empty()) continue;
        const auto f = detail::split(ls[i], ',');
        const std::string where = path.string() + ":" + std::to_string(i + 1);
        if (f.size() != 8) throw FormatError(where + ": expected 8 fields");
        ResultRow r;
        r.fold = static_cast<int>(detail::parse_int(f[0], where));
        r.cell.learning_rate = detail::parse_double(f[2], where);
        r.cell.weight_decay = detail::parse_double(f[3], where);
        r.cell.epochs = static_cast<int>(detail::parse_int(f[4], where));
        r.accuracy = detail::parse_double(f[5], where);
        r.macro_f1 = detail::parse_double(f[6], where);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace psm::eval
