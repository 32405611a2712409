#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "psm/eval/harness.hpp"
#include "psm/eval/transfer.hpp"
#include "psm/preprocess.hpp"
#include "psm/synth.hpp"
#include "test_util.hpp"

using namespace psm;
using namespace psm::eval;

namespace {

std::vector<std::string> ids(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back("P" + std::to_string(1000 + i));
    return out;
}

LabeledDataset tiny_dataset(int patients, int frames) {
    LabeledDataset ds{{2, 2, 1}, {}};
    for (int p = 0; p < patients; ++p)
        for (int f = 0; f < frames; ++f) {
            const int cls = (p + f) % kNumPoses;
            ds.samples.push_back({PressureFrame(f, 2, 2, std::vector<double>(4, 0.2 * cls)), pose_from_index(cls),
                                  "P" + std::to_string(p)});
        }
    return ds;
}

}  // namespace

TEST_CASE("make_folds: 110 patients into 5 folds of 22") {
    const auto folds = make_folds(ids(110), 5, 3);
    REQUIRE(folds.size() == 5);
    std::multiset<std::string> tested;
    for (const auto& f : folds) {
        CHECK(f.test_patients.size() == 22);
        CHECK(f.train_patients.size() == 88);
        CHECK_NOTHROW(require_disjoint(f));
        tested.insert(f.test_patients.begin(), f.test_patients.end());
    }
    CHECK(tested.size() == 110);
    CHECK(std::set<std::string>(tested.begin(), tested.end()).size() == 110);
}

TEST_CASE("make_folds: near-equal sizes, LOSO, determinism, errors") {
    const auto f7 = make_folds(ids(23), 5, 1);
    std::vector<std::size_t> sizes;
    for (const auto& f : f7) sizes.push_back(f.test_patients.size());
    CHECK(sizes == std::vector<std::size_t>{5, 5, 5, 4, 4});

    const auto loso = make_folds(ids(6), 6, 2);
    for (const auto& f : loso) {
        CHECK(f.test_patients.size() == 1);
        CHECK(f.train_patients.size() == 5);
    }

    auto shuffled = ids(30);
    std::reverse(shuffled.begin(), shuffled.end());
    const auto a = make_folds(ids(30), 5, 9);
    const auto b = make_folds(shuffled, 5, 9);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].test_patients == b[i].test_patients);
    const auto c = make_folds(ids(30), 5, 10);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) any_diff |= a[i].test_patients != c[i].test_patients;
    CHECK(any_diff);

    CHECK_THROWS_AS(make_folds(ids(4), 5, 1), ValidationError);
    CHECK_THROWS_AS(make_folds(ids(4), 1, 1), ValidationError);
    FoldSplit bad{0, {"A", "B"}, {"B"}};
    CHECK_THROWS_AS(require_disjoint(bad), ValidationError);
}

TEST_CASE("evaluate: perfect and constant predictors") {
    const std::vector<int> truth{0, 1, 2, 3, 0, 1, 2, 3};
    const auto perfect = evaluate(truth, truth, 4);
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.macro_f1 == 1.0);

    const std::vector<int> constant(8, 2);
    const auto r = evaluate(constant, truth, 4);
    CHECK(r.accuracy == 0.25);
    // predicted class: precision 0.25, recall 1, F1 0.4; others 0
    CHECK(r.per_class[2].f1 == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(r.macro_f1 == doctest::Approx(0.1).epsilon(1e-15));
    for (int k = 0; k < 4; ++k) {
        std::size_t row = 0;
        for (auto v : r.confusion[static_cast<std::size_t>(k)]) row += v;
        CHECK(row == 2);
    }
    CHECK(r.n_samples == 8);
}

TEST_CASE("evaluate: absent class contributes F1 = 0") {
    const std::vector<int> t{0, 0, 1, 1};
    const auto r = evaluate(t, t, 4);
    CHECK(r.accuracy == 1.0);
    CHECK(r.macro_f1 == 0.5);
}

TEST_CASE("evaluate: permutation invariance and errors") {
    Rng rng(4);
    std::vector<int> p, t;
    for (int i = 0; i < 200; ++i) {
        p.push_back(static_cast<int>(rng.below(4)));
        t.push_back(static_cast<int>(rng.below(4)));
    }
    const auto a = evaluate(p, t, 4);
    std::vector<std::size_t> order(200);
    for (std::size_t i = 0; i < 200; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<int> p2, t2;
    for (auto i : order) {
        p2.push_back(p[i]);
        t2.push_back(t[i]);
    }
    const auto b = evaluate(p2, t2, 4);
    CHECK(a.confusion == b.confusion);
    CHECK(a.macro_f1 == b.macro_f1);
    CHECK(a.accuracy == b.accuracy);
    std::size_t trace = 0;
    for (int k = 0; k < 4; ++k) trace += a.confusion[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)];
    CHECK(a.accuracy == static_cast<double>(trace) / 200.0);

    CHECK_THROWS_AS(evaluate(std::vector<int>{0}, std::vector<int>{0, 1}, 4), ValidationError);
    CHECK_THROWS_AS(evaluate(std::vector<int>{4}, std::vector<int>{0}, 4), ValidationError);
}

TEST_CASE("sweep grid order") {
    SweepGrid g{{1e-3, 1e-4}, {0.0, 0.05}, {5}};
    const auto cells = g.cells();
    REQUIRE(cells.size() == 4);
    CHECK(cells[0].learning_rate == 1e-3);
    CHECK(cells[0].weight_decay == 0.0);
    CHECK(cells[1].weight_decay == 0.05);
    CHECK(cells[2].learning_rate == 1e-4);
}

TEST_CASE("sweep: bookkeeping, argmax with earliest tie, job independence") {
    const auto ds = tiny_dataset(10, 8);
    const auto folds = make_folds(ds.patients(), 5, 1);
    // accuracy grows with the epoch count until it saturates at 3
    const ModelFamily family = [](const LabeledDataset&, const LabeledDataset& test, const HyperCell& cell,
                                  const FoldSplit&) {
        std::vector<int> out;
        for (std::size_t i = 0; i < test.samples.size(); ++i) {
            const int t = class_index(test.samples[i].label);
            out.push_back(static_cast<int>(i % 4) < std::min(cell.epochs, 3) ? t : (t + 1) % 4);
        }
        return out;
    };
    SweepGrid g{{1e-3}, {0.0}, {1, 3, 2, 4}};
    const auto r1 = sweep(family, g, folds, ds, 1);
    const auto r4 = sweep(family, g, folds, ds, 4);
    CHECK(r1.evaluations.size() == 4 * 5);
    CHECK(r1.best == 1);
    for (std::size_t c = 0; c < r1.cells.size(); ++c) CHECK(r1.mean_accuracy[r1.best] >= r1.mean_accuracy[c]);
    CHECK(r1.mean_accuracy == r4.mean_accuracy);
    for (std::size_t i = 0; i < r1.evaluations.size(); ++i) {
        CHECK(r1.evaluations[i].predictions == r4.evaluations[i].predictions);
        CHECK(r1.evaluations[i].cell == i / 5);
        CHECK(r1.evaluations[i].fold == static_cast<int>(i % 5));
    }

    const auto single = sweep(family, SweepGrid{{1e-3}, {0.0}, {2}}, folds, ds);
    CHECK(single.best == 0);
    CHECK(single.evaluations.size() == 5);
}

TEST_CASE("sweep: the family never sees a test patient in training") {
    const auto ds = tiny_dataset(6, 4);
    const auto folds = make_folds(ds.patients(), 3, 2);
    const ModelFamily family = [](const LabeledDataset& train, const LabeledDataset& test, const HyperCell&,
                                  const FoldSplit&) {
        const auto tr = train.patients();
        for (const auto& p : test.patients()) CHECK(std::find(tr.begin(), tr.end(), p) == tr.end());
        return std::vector<int>(test.samples.size(), 0);
    };
    CHECK_NOTHROW(sweep(family, {}, folds, ds));
    auto bad = folds;
    bad[0].train_patients.push_back(bad[0].test_patients.front());
    CHECK_THROWS_AS(sweep(family, {}, bad, ds), ValidationError);
}

TEST_CASE("results.csv and confusion csv round trip") {
    testutil::TempDir tmp("eval_csv");
    const auto ds = tiny_dataset(6, 4);
    const auto folds = make_folds(ds.patients(), 3, 2);
    const ModelFamily family = [](const LabeledDataset&, const LabeledDataset& test, const HyperCell&,
                                  const FoldSplit&) { return std::vector<int>(test.samples.size(), 1); };
    const auto r = sweep(family, SweepGrid{{1e-3, 1e-2}, {0.05}, {3}}, folds, ds);
    write_results_csv(r, tmp.path / "results.csv");
    const auto rows = read_results_csv(tmp.path / "results.csv");
    REQUIRE(rows.size() == 6);
    CHECK(rows[3].cell.learning_rate == 1e-2);
    CHECK(rows[3].fold == 0);
    CHECK(rows[3].accuracy == r.evaluations[3].report.accuracy);
    write_confusion_csvs(r, 0, tmp.path);
    for (int f = 0; f < 3; ++f) CHECK(std::filesystem::exists(tmp.path / ("confusion_" + std::to_string(f) + ".csv")));
    const auto csv = confusion_csv(evaluate(std::vector<int>{0, 1}, std::vector<int>{0, 0}, 4));
    CHECK(csv.starts_with("truth,pred_Left,pred_Right,pred_Supine,pred_Prone\nLeft,1,1,0,0\n"));
}

TEST_CASE("label_subset keeps ceil(fraction) per dataset, seeded") {
    const auto ds = tiny_dataset(4, 25);
    const auto a = label_subset(ds, 0.1, 3);
    const auto b = label_subset(ds, 0.1, 3);
    CHECK(a.samples.size() == 10);
    for (std::size_t i = 0; i < a.samples.size(); ++i) CHECK(a.samples[i].frame == b.samples[i].frame);
    CHECK_THROWS_AS(label_subset(ds, 0.0, 3), ValidationError);
}

TEST_CASE("transfer experiment: shared splits, distinct initial backbones") {
    synth::StaticSetConfig sc;
    sc.n_subjects = 3;
    sc.frames_per_subject = 20;
    sc.seed = 1;
    const auto source = prep::pad_dataset(synth::generate_static_dataset(sc), 36, 36);
    synth::StaticSetConfig tc;
    tc.geometry = {18, 18, 9};
    tc.n_subjects = 4;
    tc.frames_per_subject = 20;
    tc.seed = 2;
    tc.id_prefix = "T";
    const auto target = synth::generate_static_dataset(tc);

    TransferConfig c;
    c.target.embed_dim = 16;
    c.target.depth = 1;
    c.target.heads = 2;
    c.pretrain.steps = 3;
    c.pretrain.batch_size = 8;
    c.finetune.epochs = 1;
    c.folds = 2;
    c.seeds = {1, 2};
    c.label_fraction = 0.5;
    const auto r = run_transfer_experiment(source, target, c);
    REQUIRE(r.scratch.reports.size() == 4);
    REQUIRE(r.pretrained.reports.size() == 4);
    REQUIRE(r.test_index.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(r.scratch.init_checksums[i] != r.pretrained.init_checksums[i]);
        CHECK(r.scratch.reports[i].n_samples == r.pretrained.reports[i].n_samples);
        CHECK(r.scratch.reports[i].n_samples == r.test_index[i].size());
    }
    CHECK(r.pretrain_loss.size() == 2);
    CHECK(r.to_json().contains("scratch"));

    CHECK_THROWS_AS(run_transfer_experiment(prep::pad_dataset(source, 40, 36), target, c), ValidationError);
}
