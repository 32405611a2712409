#include "psm/models/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

#include "psm/common.hpp"
#include "psm/nn/ops.hpp"
#include "psm/nn/optim.hpp"

namespace psm::models {

void ForestConfig::validate() const {
    if (n_trees < 1 || max_depth < 1 || min_leaf < 1 || features_per_split < 0 || num_classes < 1)
        throw ValidationError("ForestConfig: n_trees, max_depth, min_leaf, num_classes must be positive");
}

namespace {

int vote(const std::vector<int>& counts) {
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

double gini(const std::vector<int>& counts, int n) {
    if (n == 0) return 0.0;
    double s = 0.0;
    for (int c : counts) s += static_cast<double>(c) * c;
    return 1.0 - s / (static_cast<double>(n) * n);
}

class TreeBuilder {
public:
    TreeBuilder(const Matrix& x, const std::vector<int>& y, const ForestConfig& cfg, int mtry, Rng rng)
        : x_(x), y_(y), cfg_(cfg), mtry_(mtry), rng_(rng), d_(static_cast<int>(x.front().size())) {}

    std::vector<TreeNode> build(std::vector<std::size_t> rows) {
        grow(rows, 0);
        return std::move(nodes_);
    }

private:
    int grow(std::vector<std::size_t>& rows, int depth) {
        const int id = static_cast<int>(nodes_.size());
        nodes_.emplace_back();
        std::vector<int> counts(static_cast<std::size_t>(cfg_.num_classes), 0);
        for (std::size_t r : rows) ++counts[static_cast<std::size_t>(y_[r])];
        const int n = static_cast<int>(rows.size());
        nodes_[static_cast<std::size_t>(id)].label = vote(counts);
        const bool pure = *std::max_element(counts.begin(), counts.end()) == n;
        if (pure || depth >= cfg_.max_depth || n < 2 * cfg_.min_leaf) return id;

        std::vector<int> features(static_cast<std::size_t>(d_));
        std::iota(features.begin(), features.end(), 0);
        rng_.shuffle(features);
        features.resize(static_cast<std::size_t>(mtry_));
        std::sort(features.begin(), features.end());

        const double parent = gini(counts, n);
        double best_gain = 1e-12;
        int best_f = -1;
        double best_t = 0.0;
        std::vector<std::size_t> sorted = rows;
        for (int f : features) {
            const auto fs = static_cast<std::size_t>(f);
            std::stable_sort(sorted.begin(), sorted.end(),
                             [&](std::size_t a, std::size_t b) { return x_[a][fs] < x_[b][fs]; });
            std::vector<int> left(counts.size(), 0);
            std::vector<int> right = counts;
            for (int i = 0; i + 1 < n; ++i) {
                const auto c = static_cast<std::size_t>(y_[sorted[static_cast<std::size_t>(i)]]);
                ++left[c];
                --right[c];
                const double v = x_[sorted[static_cast<std::size_t>(i)]][fs];
                const double next = x_[sorted[static_cast<std::size_t>(i) + 1]][fs];
                if (!(v < next)) continue;
                const int nl = i + 1, nr = n - nl;
                if (nl < cfg_.min_leaf || nr < cfg_.min_leaf) continue;
                const double child = (nl * gini(left, nl) + nr * gini(right, nr)) / n;
                const double gain = parent - child;
                if (gain > best_gain) {
                    best_gain = gain;
                    best_f = f;
                    best_t = v;
                }
            }
        }
        if (best_f < 0) return id;
        std::vector<std::size_t> lrows, rrows;
        for (std::size_t r : rows) (x_[r][static_cast<std::size_t>(best_f)] <= best_t ? lrows : rrows).push_back(r);
        rows.clear();
        rows.shrink_to_fit();
        const int l = grow(lrows, depth + 1);
        const int r = grow(rrows, depth + 1);
        auto& node = nodes_[static_cast<std::size_t>(id)];
        node.feature = best_f;
        node.threshold = best_t;
        node.left = l;
        node.right = r;
        return id;
    }

    const Matrix& x_;
    const std::vector<int>& y_;
    const ForestConfig& cfg_;
    int mtry_;
    Rng rng_;
    int d_;
    std::vector<TreeNode> nodes_;
};

int tree_predict(const std::vector<TreeNode>& t, const std::vector<double>& row) {
    int i = 0;
    while (t[static_cast<std::size_t>(i)].feature >= 0) {
        const auto& n = t[static_cast<std::size_t>(i)];
        i = row[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return t[static_cast<std::size_t>(i)].label;
}

void check_xy(const Matrix& x, const std::vector<int>& y, int num_classes) {
    if (x.empty()) throw ValidationError("empty training set");
    if (x.size() != y.size()) throw ValidationError("feature rows and labels differ in length");
    const auto d = x.front().size();
    if (d == 0) throw ValidationError("zero-dimensional features");
    for (const auto& r : x)
        if (r.size() != d) throw ValidationError("feature dimension is not constant");
    for (int v : y)
        if (v < 0 || v >= num_classes) throw ValidationError("label " + std::to_string(v) + " out of range");
}

}  // namespace

Forest train_forest(const Matrix& x, const std::vector<int>& y, const ForestConfig& cfg, int jobs) {
    cfg.validate();
    check_xy(x, y, cfg.num_classes);
    Forest f;
    f.config = cfg;
    f.num_features = static_cast<int>(x.front().size());
    const int mtry = cfg.features_per_split > 0
                         ? std::min(cfg.features_per_split, f.num_features)
                         : std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(f.num_features)))));
    f.trees.resize(static_cast<std::size_t>(cfg.n_trees));
    const auto build = [&](int t) {
        Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(t)));
        std::vector<std::size_t> rows(x.size());
        if (cfg.bootstrap)
            for (auto& r : rows) r = static_cast<std::size_t>(rng.below(x.size()));
        else
            std::iota(rows.begin(), rows.end(), 0);
        std::sort(rows.begin(), rows.end());
        f.trees[static_cast<std::size_t>(t)] = TreeBuilder(x, y, cfg, mtry, rng.fork(1)).build(std::move(rows));
    };
    jobs = std::max(1, std::min(jobs, cfg.n_trees));
    std::vector<std::future<void>> workers;
    for (int w = 0; w < jobs; ++w)
        workers.push_back(std::async(std::launch::async, [&, w] {
            for (int t = w; t < cfg.n_trees; t += jobs) build(t);
        }));
    for (auto& w : workers) w.get();
    return f;
}

std::vector<int> forest_predict(const Forest& forest, const Matrix& x) {
    std::vector<int> out;
    out.reserve(x.size());
    std::vector<int> counts(static_cast<std::size_t>(forest.config.num_classes));
    for (const auto& row : x) {
        if (static_cast<int>(row.size()) != forest.num_features)
            throw ValidationError("forest_predict: expected " + std::to_string(forest.num_features) + " features, got " +
                                  std::to_string(row.size()));
        std::fill(counts.begin(), counts.end(), 0);
        for (const auto& t : forest.trees) ++counts[static_cast<std::size_t>(tree_predict(t, row))];
        out.push_back(vote(counts));
    }
    return out;
}

nlohmann::json Forest::to_json() const {
    nlohmann::json trees_j = nlohmann::json::array();
    for (const auto& t : trees) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& n : t) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.label});
        trees_j.push_back(std::move(nodes));
    }
    return {{"kind", "forest"},
            {"n_trees", config.n_trees},
            {"max_depth", config.max_depth},
            {"min_leaf", config.min_leaf},
            {"features_per_split", config.features_per_split},
            {"bootstrap", config.bootstrap},
            {"seed", config.seed},
            {"num_classes", config.num_classes},
            {"num_features", num_features},
            {"trees", std::move(trees_j)}};
}

Forest Forest::from_json(const nlohmann::json& j) {
    Forest f;
    try {
        f.config.n_trees = j.at("n_trees").get<int>();
        f.config.max_depth = j.at("max_depth").get<int>();
        f.config.min_leaf = j.at("min_leaf").get<int>();
        f.config.features_per_split = j.at("features_per_split").get<int>();
        f.config.bootstrap = j.at("bootstrap").get<bool>();
        f.config.seed = j.at("seed").get<std::uint64_t>();
        f.config.num_classes = j.at("num_classes").get<int>();
        f.num_features = j.at("num_features").get<int>();
        for (const auto& t : j.at("trees")) {
            std::vector<TreeNode> nodes;
            for (const auto& n : t)
                nodes.push_back({n.at(0).get<int>(), n.at(1).get<double>(), n.at(2).get<int>(), n.at(3).get<int>(),
                                 n.at(4).get<int>()});
            f.trees.push_back(std::move(nodes));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("forest: ") + e.what());
    }
    return f;
}

void LinearHyper::validate() const {
    if (!(learning_rate > 0.0) || !(weight_decay >= 0.0) || epochs < 1 || num_classes < 1)
        throw ValidationError("linear hyperparameters: need learning_rate > 0, weight_decay >= 0, epochs >= 1");
}

namespace {

std::vector<double> standardize(const LinearModel& m, const Matrix& x) {
    const std::size_t d = m.mean.size();
    std::vector<double> out;
    out.reserve(x.size() * d);
    for (const auto& r : x) {
        if (r.size() != d) throw ValidationError("linear: feature dimension mismatch");
        for (std::size_t j = 0; j < d; ++j) out.push_back((r[j] - m.mean[j]) / m.scale[j]);
    }
    return out;
}

}  // namespace

LinearModel train_linear(const Matrix& x, const std::vector<int>& y, const LinearHyper& hyper) {
    hyper.validate();
    check_xy(x, y, hyper.num_classes);
    using namespace psm::nn;
    const std::size_t n = x.size(), d = x.front().size();
    LinearModel m;
    m.num_classes = hyper.num_classes;
    m.mean.assign(d, 0.0);
    m.scale.assign(d, 0.0);
    for (const auto& r : x)
        for (std::size_t j = 0; j < d; ++j) m.mean[j] += r[j];
    for (auto& v : m.mean) v /= static_cast<double>(n);
    for (const auto& r : x)
        for (std::size_t j = 0; j < d; ++j) m.scale[j] += (r[j] - m.mean[j]) * (r[j] - m.mean[j]);
    for (auto& v : m.scale) {
        v = std::sqrt(v / static_cast<double>(n));
        if (!(v > 1e-12)) v = 1.0;
    }
    const Tensor xs = Tensor::from({static_cast<int>(n), static_cast<int>(d)}, standardize(m, x));
    Tensor w = Tensor::zeros({hyper.num_classes, static_cast<int>(d)}, true);
    Tensor b = Tensor::zeros({hyper.num_classes}, true);
    ParamList ps{{"weight", w}, {"bias", b}};
    AdamW opt(ps, AdamWConfig{hyper.learning_rate, hyper.weight_decay});
    for (int e = 0; e < hyper.epochs; ++e) {
        Tensor loss = cross_entropy(linear(xs, w, b), y);
        zero_grad(ps);
        loss.backward();
        opt.step(ps);
    }
    m.weights.assign(w.data().begin(), w.data().end());
    m.bias.assign(b.data().begin(), b.data().end());
    return m;
}

std::vector<int> linear_predict(const LinearModel& model, const Matrix& x) {
    const std::size_t d = model.mean.size();
    const auto xs = standardize(model, x);
    std::vector<int> out;
    out.reserve(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        int best = 0;
        double best_v = -INFINITY;
        for (int k = 0; k < model.num_classes; ++k) {
            double v = model.bias[static_cast<std::size_t>(k)];
            for (std::size_t j = 0; j < d; ++j) v += model.weights[static_cast<std::size_t>(k) * d + j] * xs[i * d + j];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        out.push_back(best);
    }
    return out;
}

}  // namespace psm::models
