#include "psm/eval/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

#include "psm/common.hpp"

namespace psm::eval {

void TransferConfig::validate() const {
    target.validate();
    if (target.in_channels != 1) throw ValidationError("transfer: the target model must take 1 channel");
    if (source_channels != 1 && source_channels != 3) throw ValidationError("transfer: source_channels must be 1 or 3");
    if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw ValidationError("transfer: label_fraction must lie in (0, 1]");
    if (seeds.empty()) throw ValidationError("transfer: no seeds");
    pretrain.validate();
    finetune.validate();
}

LabeledDataset label_subset(const LabeledDataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("label fraction must be in (0, 1]");
    std::vector<std::size_t> idx(ds.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size())));
    idx.resize(std::min(keep, idx.size()));
    std::sort(idx.begin(), idx.end());
    LabeledDataset out;
    out.geometry = ds.geometry;
    for (std::size_t i : idx) out.samples.push_back(ds.samples[i]);
    return out;
}

nlohmann::json TransferResult::to_json() const {
    const auto arm = [](const TransferArm& a) {
        nlohmann::json reps = nlohmann::json::array();
        for (const auto& r : a.reports) reps.push_back(r.to_json());
        std::vector<std::string> sums;
        for (auto c : a.init_checksums) sums.push_back(nn::hex64(c));
        return nlohmann::json{{"mean_accuracy", a.mean_accuracy},
                              {"mean_macro_f1", a.mean_macro_f1},
                              {"init_checksums", sums},
                              {"reports", reps}};
    };
    return {{"scratch", arm(scratch)}, {"pretrained", arm(pretrained)}, {"pretrain_loss", pretrain_loss}};
}

TransferResult run_transfer_experiment(const LabeledDataset& source, const LabeledDataset& target,
                                       const TransferConfig& cfg) {
    cfg.validate();
    if (source.samples.empty() || target.samples.empty()) throw ValidationError("transfer: empty dataset");
    const auto& s0 = source.samples.front().frame;
    const auto& t0 = target.samples.front().frame;
    if (t0.rows() != cfg.target.image_rows || t0.cols() != cfg.target.image_cols)
        throw ValidationError("transfer: target frames are " + std::to_string(t0.rows()) + "x" +
                              std::to_string(t0.cols()) + ", model expects " + std::to_string(cfg.target.image_rows) +
                              "x" + std::to_string(cfg.target.image_cols));
    models::ViTConfig src_cfg = cfg.target;
    src_cfg.image_rows = s0.rows();
    src_cfg.image_cols = s0.cols();
    src_cfg.in_channels = cfg.source_channels;
    try {
        src_cfg.validate();
        cfg.mae.validate(src_cfg.num_patches());
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("transfer: source geometry cannot be adapted: ") + e.what());
    }

    const std::size_t ns = cfg.seeds.size();
    const auto jobs = static_cast<std::size_t>(std::max(1, cfg.jobs));
    const auto parallel = [jobs](std::size_t total, const std::function<void(std::size_t)>& fn) {
        std::vector<std::future<void>> w;
        const std::size_t n = std::min(jobs, std::max<std::size_t>(total, 1));
        for (std::size_t k = 0; k < n; ++k)
            w.push_back(std::async(std::launch::async, [&, k] {
                for (std::size_t j = k; j < total; j += n) fn(j);
            }));
        for (auto& f : w) f.get();
    };

    // Pre-training runs once per seed.
    std::vector<models::ViT> adapted(ns);
    TransferResult r;
    r.pretrain_loss.resize(ns);
    parallel(ns, [&](std::size_t i) {
        models::PretrainHyper h = cfg.pretrain;
        h.seed = mix_seed(cfg.seeds[i], 0xB7E);
        auto pre = models::mae_pretrain(src_cfg, cfg.mae, source, h);
        models::ViT enc = pre.model.encoder.clone();
        if (enc.config.in_channels == 3) enc = models::collapse_channels(enc);
        adapted[i] = models::adapt_to_image(enc, cfg.target.image_rows, cfg.target.image_cols);
        r.pretrain_loss[i] = std::move(pre.loss_trace);
    });

    const auto patients = target.patients();
    std::vector<std::vector<FoldSplit>> folds;
    for (auto s : cfg.seeds) folds.push_back(make_folds(patients, cfg.folds, s));
    const auto nf = static_cast<std::size_t>(cfg.folds);
    const std::size_t total = ns * nf;
    r.scratch.reports.resize(total);
    r.pretrained.reports.resize(total);
    r.scratch.init_checksums.resize(total);
    r.pretrained.init_checksums.resize(total);
    r.test_index.resize(total);
    parallel(total, [&](std::size_t job) {
        const std::size_t si = job / nf, fi = job % nf;
        const auto& fold = folds[si][fi];
        require_disjoint(fold);
        const std::uint64_t seed = mix_seed(cfg.seeds[si], 100 + fi);
        const LabeledDataset train = label_subset(target.subset(fold.train_patients), cfg.label_fraction, seed);
        const LabeledDataset test = target.subset(fold.test_patients);
        r.test_index[job] = patient_indices(target, fold.test_patients);
        models::FinetuneHyper h = cfg.finetune;
        h.seed = seed;
        models::HeadOptions head{models::HeadMode::KeepBackbone, false, seed};
        models::ViT a = models::replace_head(models::ViT::init(cfg.target, seed), cfg.target.num_classes,
                                             {models::HeadMode::Reinit, false, seed});
        models::ViT b = models::replace_head(adapted[si], cfg.target.num_classes, head);
        r.scratch.init_checksums[job] = nn::checksum(a.backbone_parameters());
        r.pretrained.init_checksums[job] = nn::checksum(b.backbone_parameters());
        const LabeledDataset none{target.geometry, {}};
        const auto truth = models::labels_of(test);
        const auto ra = models::finetune(a, train, none, h);
        r.scratch.reports[job] = evaluate(models::predict(ra.model, test), truth, cfg.target.num_classes);
        const auto rb = models::finetune(b, train, none, h);
        r.pretrained.reports[job] = evaluate(models::predict(rb.model, test), truth, cfg.target.num_classes);
    });
    for (TransferArm* arm : {&r.scratch, &r.pretrained}) {
        for (const auto& rep : arm->reports) {
            arm->mean_accuracy += rep.accuracy;
            arm->mean_macro_f1 += rep.macro_f1;
        }
        arm->mean_accuracy /= static_cast<double>(total);
        arm->mean_macro_f1 /= static_cast<double>(total);
    }
    return r;
}

}  // namespace psm::eval
