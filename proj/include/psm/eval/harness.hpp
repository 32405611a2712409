#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "psm/data.hpp"

namespace psm::eval {

struct FoldSplit {
    int fold_index = 0;
    std::vector<std::string> train_patients;
    std::vector<std::string> test_patients;
};

/// Sorted ids, seeded shuffle, then k contiguous near-equal test blocks (the
/// first n mod k blocks get one extra patient).
std::vector<FoldSplit> make_folds(std::vector<std::string> patient_ids, int k, std::uint64_t seed);

/// Throws ValidationError if the split shares a patient between train and test.
void require_disjoint(const FoldSplit& fold);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct EvalReport {
    int num_classes = 0;
    std::vector<std::vector<std::size_t>> confusion;  // rows = truth, cols = prediction
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<ClassMetrics> per_class;
    std::size_t n_samples = 0;

    nlohmann::json to_json() const;
};

/// Undefined precision/recall/F1 (zero denominators) count as 0, so a class
/// absent from both truth and prediction contributes F1 = 0 to the macro mean.
EvalReport evaluate(std::span<const int> predictions, std::span<const int> truths, int num_classes);

struct HyperCell {
    double learning_rate = 1e-3;
    double weight_decay = 0.05;
    int epochs = 10;
};

struct SweepGrid {
    std::vector<double> learning_rates{1e-3};
    std::vector<double> weight_decays{0.05};
    std::vector<int> epochs{10};

    /// Row-major over (learning_rate, weight_decay, epochs).
    std::vector<HyperCell> cells() const;
};

/// Trains on `train` with the cell's hyperparameters and returns one
/// prediction per sample of `test`.
using ModelFamily = std::function<std::vector<int>(const LabeledDataset& train, const LabeledDataset& test,
                                                   const HyperCell& cell, const FoldSplit& fold)>;

struct CellFoldResult {
    std::size_t cell = 0;
    int fold = 0;
    EvalReport report;
    std::vector<int> predictions;
    std::vector<int> truths;
    std::vector<std::size_t> test_index;  // sample indices into the swept dataset
};

struct SweepResult {
    std::vector<HyperCell> cells;
    std::vector<CellFoldResult> evaluations;  // cell-major, then fold
    std::vector<double> mean_accuracy;        // per cell
    std::vector<double> mean_macro_f1;
    std::size_t best = 0;
};

/// Sample indices of `ds` whose patient is in `patients`, in dataset order.
std::vector<std::size_t> patient_indices(const LabeledDataset& ds, const std::vector<std::string>& patients);

/// Every (cell, fold) pair trained and scored on up to `jobs` threads; the
/// best cell maximizes mean fold accuracy, ties going to the earlier cell.
SweepResult sweep(const ModelFamily& family, const SweepGrid& grid, const std::vector<FoldSplit>& folds,
                  const LabeledDataset& dataset, int jobs = 1);

/// results.csv: one row per (cell, fold).
void write_results_csv(const SweepResult& r, const std::filesystem::path& path);
/// confusion_<fold>.csv for the given cell.
void write_confusion_csvs(const SweepResult& r, std::size_t cell, const std::filesystem::path& dir);
std::string confusion_csv(const EvalReport& report);

struct ResultRow {
    int fold = 0;
    HyperCell cell;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
};
std::vector<ResultRow> read_results_csv(const std::filesystem::path& path);

}  // namespace psm::eval
