#pragma once

// External-modality learners: standardized feature vectors with an explicit
// missing mask, regression trees with default-direction missing routing,
// second-order boosting on logistic loss, a bootstrap forest, and the
// four-member intra-bag ensemble with mask learning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "oanet/common.hpp"
#include "oanet/ocr.hpp"
#include "oanet/rng.hpp"

namespace oanet {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double log_loss(const std::vector<double>& probs, const std::vector<int>& labels) {
    double sum = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        double p = std::clamp(probs[i], 1e-12, 1.0 - 1e-12);
        sum -= labels[i] ? std::log(p) : std::log(1.0 - p);
    }
    return sum / static_cast<double>(probs.size());
}

// ---------------------------------------------------------------------------
// Features.

struct FeatureVector {
    std::vector<double> values;
    std::vector<uint8_t> missing;
};

struct StandardizerStats {
    std::vector<double> mean;
    std::vector<double> stdev;
};

// Per-field mean and sample std over non-missing training values. Fields that
// are always missing (or constant) standardize against (0, 1) / (mean, 1).
inline StandardizerStats fit_standardizer(const std::vector<ParamRecord>& records) {
    if (records.empty()) throw TrainingError("fit_standardizer: no records");
    size_t k = records[0].size();
    StandardizerStats st;
    st.mean.assign(k, 0.0);
    st.stdev.assign(k, 1.0);
    for (size_t j = 0; j < k; ++j) {
        double sum = 0.0;
        int n = 0;
        for (const auto& r : records)
            if (!r.missing(j)) {
                sum += *r.values[j];
                ++n;
            }
        if (n == 0) continue;
        double mean = sum / n;
        st.mean[j] = mean;
        if (n >= 2) {
            double sq = 0.0;
            for (const auto& r : records)
                if (!r.missing(j)) sq += (*r.values[j] - mean) * (*r.values[j] - mean);
            double sd = std::sqrt(sq / (n - 1));
            if (sd > 1e-9) st.stdev[j] = sd;
        }
    }
    return st;
}

inline FeatureVector featurize(const ParamRecord& record, const StandardizerStats& st) {
    if (record.size() != st.mean.size())
        throw InputError("featurize: record does not match standardizer");
    FeatureVector fv;
    fv.values.assign(record.size(), 0.0);
    fv.missing.assign(record.size(), 0);
    for (size_t j = 0; j < record.size(); ++j) {
        if (record.missing(j)) {
            fv.missing[j] = 1;  // sentinel 0 stays in values
        } else {
            fv.values[j] = (*record.values[j] - st.mean[j]) / st.stdev[j];
        }
    }
    return fv;
}

struct FeatureMatrix {
    int n = 0;
    int k = 0;
    std::vector<double> v;
    std::vector<uint8_t> m;

    double at(int i, int j) const { return v[static_cast<size_t>(i) * k + j]; }
    bool miss(int i, int j) const { return m[static_cast<size_t>(i) * k + j] != 0; }
    const double* row(int i) const { return v.data() + static_cast<size_t>(i) * k; }
    const uint8_t* row_miss(int i) const { return m.data() + static_cast<size_t>(i) * k; }

    static FeatureMatrix from(const std::vector<FeatureVector>& rows) {
        FeatureMatrix X;
        X.n = static_cast<int>(rows.size());
        X.k = X.n ? static_cast<int>(rows[0].values.size()) : 0;
        X.v.reserve(static_cast<size_t>(X.n) * X.k);
        X.m.reserve(static_cast<size_t>(X.n) * X.k);
        for (const auto& r : rows) {
            if (static_cast<int>(r.values.size()) != X.k)
                throw InputError("FeatureMatrix: ragged rows");
            X.v.insert(X.v.end(), r.values.begin(), r.values.end());
            X.m.insert(X.m.end(), r.missing.begin(), r.missing.end());
        }
        return X;
    }
};

// ---------------------------------------------------------------------------
// Trees.

struct TreeNode {
    int feature = -1;  // -1: leaf
    double threshold = 0.0;
    bool default_left = true;
    int left = -1;
    int right = -1;
    double value = 0.0;
};

struct Tree {
    std::vector<TreeNode> nodes;

    double eval(const double* x, const uint8_t* miss) const {
        int id = 0;
        while (nodes[id].feature >= 0) {
            const TreeNode& nd = nodes[id];
            bool go_left = miss[nd.feature] ? nd.default_left : x[nd.feature] <= nd.threshold;
            id = go_left ? nd.left : nd.right;
        }
        return nodes[id].value;
    }
};

namespace detail {

struct SplitChoice {
    bool found = false;
    int feature = -1;
    double threshold = 0.0;
    bool default_left = true;
    double gain = 0.0;
};

inline constexpr double kMinSplitGain = 1e-12;

// Exact greedy split on the Newton gain. Candidates are midpoints between
// consecutive distinct present values; missing rows go to whichever side
// scores better (ties keep left). First strictly-better candidate wins, with
// features and thresholds visited in ascending order.
inline SplitChoice best_split_newton(const FeatureMatrix& X, const std::vector<uint8_t>& miss,
                                     const std::vector<int>& idx, const std::vector<double>& g,
                                     const std::vector<double>& h, double lambda,
                                     const std::vector<int>* feature_subset = nullptr) {
    double G = 0.0, H = 0.0;
    for (int i : idx) {
        G += g[i];
        H += h[i];
    }
    double parent = G * G / (H + lambda);

    SplitChoice best;
    std::vector<std::pair<double, int>> vals;
    std::vector<int> features;
    if (feature_subset) {
        features = *feature_subset;
        std::sort(features.begin(), features.end());
    } else {
        features.resize(X.k);
        std::iota(features.begin(), features.end(), 0);
    }

    for (int j : features) {
        vals.clear();
        double Gp = 0.0, Hp = 0.0;
        for (int i : idx) {
            if (!miss[static_cast<size_t>(i) * X.k + j]) {
                vals.emplace_back(X.at(i, j), i);
                Gp += g[i];
                Hp += h[i];
            }
        }
        if (vals.size() < 2) continue;
        std::sort(vals.begin(), vals.end());
        double Gm = G - Gp, Hm = H - Hp;

        double GL = 0.0, HL = 0.0;
        for (size_t t = 0; t + 1 < vals.size(); ++t) {
            GL += g[vals[t].second];
            HL += h[vals[t].second];
            if (vals[t].first == vals[t + 1].first) continue;
            double thr = 0.5 * (vals[t].first + vals[t + 1].first);
            double GR = Gp - GL, HR = Hp - HL;
            // Missing joins the left or the right child.
            double gain_l = (GL + Gm) * (GL + Gm) / (HL + Hm + lambda) + GR * GR / (HR + lambda);
            double gain_r = GL * GL / (HL + lambda) + (GR + Gm) * (GR + Gm) / (HR + Hm + lambda);
            bool to_left = gain_l >= gain_r;
            double gain = 0.5 * ((to_left ? gain_l : gain_r) - parent);
            if (gain > kMinSplitGain && gain > best.gain) {
                best = SplitChoice{true, j, thr, to_left, gain};
            }
        }
    }
    return best;
}

inline bool goes_left(const FeatureMatrix& X, const std::vector<uint8_t>& miss, int i,
                      const SplitChoice& s) {
    if (miss[static_cast<size_t>(i) * X.k + s.feature]) return s.default_left;
    return X.at(i, s.feature) <= s.threshold;
}

inline void build_newton_tree(Tree& tree, int node_id, const FeatureMatrix& X,
                              const std::vector<uint8_t>& miss, std::vector<int>& idx, int lo,
                              int hi, const std::vector<double>& g, const std::vector<double>& h,
                              double lambda, int depth, int max_depth) {
    double G = 0.0, H = 0.0;
    for (int t = lo; t < hi; ++t) {
        G += g[idx[t]];
        H += h[idx[t]];
    }
    SplitChoice split;
    if (depth < max_depth && hi - lo >= 2) {
        std::vector<int> node_idx(idx.begin() + lo, idx.begin() + hi);
        split = best_split_newton(X, miss, node_idx, g, h, lambda);
    }
    if (!split.found) {
        tree.nodes[node_id].feature = -1;
        tree.nodes[node_id].value = -G / (H + lambda);
        return;
    }
    auto mid_it = std::stable_partition(idx.begin() + lo, idx.begin() + hi,
                                        [&](int i) { return goes_left(X, miss, i, split); });
    int mid = static_cast<int>(mid_it - idx.begin());
    int left = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    int right = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();  // may reallocate: re-fetch the node reference
    TreeNode& nd = tree.nodes[node_id];
    nd.feature = split.feature;
    nd.threshold = split.threshold;
    nd.default_left = split.default_left;
    nd.left = left;
    nd.right = right;
    build_newton_tree(tree, left, X, miss, idx, lo, mid, g, h, lambda, depth + 1, max_depth);
    build_newton_tree(tree, right, X, miss, idx, mid, hi, g, h, lambda, depth + 1, max_depth);
}

// Per-round mask learning view: true missing plus random field dropout.
inline std::vector<uint8_t> masked_view(const FeatureMatrix& X, double p_mask, RngStream& rng) {
    std::vector<uint8_t> miss = X.m;
    if (p_mask > 0.0)
        for (auto& b : miss)
            if (rng.uniform() < p_mask) b = 1;
    return miss;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Boosted trees.

struct BoostedConfig {
    int rounds = 100;
    int depth = 3;
    double shrinkage = 0.1;
    double reg_lambda = 1.0;
    double row_subsample = 1.0;  // fraction sampled without replacement per round
    double p_mask = 0.0;
    uint64_t seed = 0;

    void validate() const {
        if (rounds < 0) throw ValidationError("boosted.rounds must be >= 0");
        if (depth < 1) throw ValidationError("boosted.depth must be >= 1");
        if (shrinkage < 0.0) throw ValidationError("boosted.shrinkage must be >= 0");
        if (reg_lambda < 0.0) throw ValidationError("boosted.reg_lambda must be >= 0");
        if (row_subsample <= 0.0 || row_subsample > 1.0)
            throw ValidationError("boosted.row_subsample must be in (0,1]");
        if (p_mask < 0.0 || p_mask >= 1.0) throw ValidationError("boosted.p_mask must be in [0,1)");
    }
};

struct TreeEnsembleModel {
    BoostedConfig config;
    int n_features = 0;
    double init_score = 0.0;
    std::vector<Tree> trees;
    std::vector<double> train_log_loss;  // index 0 = before any tree

    double predict_margin(const FeatureVector& fv) const {
        if (static_cast<int>(fv.values.size()) != n_features)
            throw InputError("TreeEnsembleModel: feature length mismatch");
        double s = init_score;
        for (const Tree& t : trees) s += config.shrinkage * t.eval(fv.values.data(), fv.missing.data());
        return s;
    }
    double predict_prob(const FeatureVector& fv) const { return sigmoid(predict_margin(fv)); }
};

inline TreeEnsembleModel train_boosted(const FeatureMatrix& X, const std::vector<int>& labels,
                                       const BoostedConfig& config) {
    config.validate();
    if (X.n < 2 || static_cast<int>(labels.size()) != X.n)
        throw TrainingError("train_boosted: need >= 2 labeled samples");
    int pos = std::accumulate(labels.begin(), labels.end(), 0);
    if (pos == 0 || pos == X.n) throw TrainingError("train_boosted: single-class labels");

    TreeEnsembleModel model;
    model.config = config;
    model.n_features = X.k;
    double base = std::clamp(static_cast<double>(pos) / X.n, 1e-6, 1.0 - 1e-6);
    model.init_score = std::log(base / (1.0 - base));

    std::vector<double> F(X.n, model.init_score);
    std::vector<double> g(X.n), h(X.n), probs(X.n);
    RngStream mask_rng = RngStream::derived(config.seed, StreamTag::mask_learning);
    RngStream row_rng = RngStream::derived(config.seed, StreamTag::tabular);

    auto record_loss = [&]() {
        for (int i = 0; i < X.n; ++i) probs[i] = sigmoid(F[i]);
        model.train_log_loss.push_back(log_loss(probs, labels));
    };
    record_loss();

    for (int r = 0; r < config.rounds; ++r) {
        std::vector<uint8_t> miss = detail::masked_view(X, config.p_mask, mask_rng);
        std::vector<int> rows;
        if (config.row_subsample < 1.0) {
            int take = std::max(2, static_cast<int>(std::lround(config.row_subsample * X.n)));
            rows = row_rng.choose(X.n, std::min(take, X.n));
            std::sort(rows.begin(), rows.end());
        } else {
            rows.resize(X.n);
            std::iota(rows.begin(), rows.end(), 0);
        }
        for (int i = 0; i < X.n; ++i) {
            double p = sigmoid(F[i]);
            g[i] = p - labels[i];
            h[i] = std::max(p * (1.0 - p), 1e-16);
        }
        Tree tree;
        tree.nodes.emplace_back();
        detail::build_newton_tree(tree, 0, X, miss, rows, 0, static_cast<int>(rows.size()), g, h,
                                  config.reg_lambda, 0, config.depth);
        for (int i = 0; i < X.n; ++i)
            F[i] += config.shrinkage * tree.eval(X.row(i), miss.data() + static_cast<size_t>(i) * X.k);
        model.trees.push_back(std::move(tree));
        record_loss();
    }
    return model;
}

// ---------------------------------------------------------------------------
// Random forest.

struct ForestConfig {
    int trees = 100;
    int depth = 12;
    bool bootstrap = true;
    bool feature_subsample = true;  // round(sqrt(k)) features per node
    double p_mask = 0.0;
    uint64_t seed = 0;

    void validate() const {
        if (trees < 1) throw ValidationError("forest.trees must be >= 1");
        if (depth < 1) throw ValidationError("forest.depth must be >= 1");
        if (p_mask < 0.0 || p_mask >= 1.0) throw ValidationError("forest.p_mask must be in [0,1)");
    }
};

struct ForestModel {
    ForestConfig config;
    int n_features = 0;
    std::vector<Tree> trees;  // leaves hold the voted class (0 or 1)
    double oob_accuracy = 0.0;

    double predict_prob(const FeatureVector& fv) const {
        if (static_cast<int>(fv.values.size()) != n_features)
            throw InputError("ForestModel: feature length mismatch");
        double s = 0.0;
        for (const Tree& t : trees) s += t.eval(fv.values.data(), fv.missing.data());
        return s / static_cast<double>(trees.size());
    }
};

namespace detail {

struct GiniSplit {
    bool found = false;
    int feature = -1;
    double threshold = 0.0;
    bool default_left = true;
    double gain = 0.0;
};

inline double gini(double n0, double n1) {
    double n = n0 + n1;
    if (n <= 0.0) return 0.0;
    double p0 = n0 / n, p1 = n1 / n;
    return 1.0 - p0 * p0 - p1 * p1;
}

inline GiniSplit best_split_gini(const FeatureMatrix& X, const std::vector<uint8_t>& miss,
                                 const std::vector<int>& idx, const std::vector<int>& y,
                                 const std::vector<int>& features) {
    double N0 = 0, N1 = 0;
    for (int i : idx) (y[i] ? N1 : N0) += 1;
    double n = N0 + N1;
    double parent = gini(N0, N1);

    GiniSplit best;
    std::vector<std::pair<double, int>> vals;
    for (int j : features) {
        vals.clear();
        double P0 = 0, P1 = 0;
        for (int i : idx)
            if (!miss[static_cast<size_t>(i) * X.k + j]) {
                vals.emplace_back(X.at(i, j), i);
                (y[i] ? P1 : P0) += 1;
            }
        if (vals.size() < 2) continue;
        std::sort(vals.begin(), vals.end());
        double M0 = N0 - P0, M1 = N1 - P1;

        double L0 = 0, L1 = 0;
        for (size_t t = 0; t + 1 < vals.size(); ++t) {
            (y[vals[t].second] ? L1 : L0) += 1;
            if (vals[t].first == vals[t + 1].first) continue;
            double thr = 0.5 * (vals[t].first + vals[t + 1].first);
            double R0 = P0 - L0, R1 = P1 - L1;
            double score_l = (L0 + M0 + L1 + M1) * gini(L0 + M0, L1 + M1) + (R0 + R1) * gini(R0, R1);
            double score_r = (L0 + L1) * gini(L0, L1) + (R0 + M0 + R1 + M1) * gini(R0 + M0, R1 + M1);
            bool to_left = score_l <= score_r;
            double gain = parent - (to_left ? score_l : score_r) / n;
            if (gain > kMinSplitGain && gain > best.gain) {
                best = GiniSplit{true, j, thr, to_left, gain};
            }
        }
    }
    return best;
}

inline void build_gini_tree(Tree& tree, int node_id, const FeatureMatrix& X,
                            const std::vector<uint8_t>& miss, std::vector<int>& idx, int lo,
                            int hi, const std::vector<int>& y, int depth, int max_depth,
                            int features_per_node, RngStream& rng) {
    double N0 = 0, N1 = 0;
    for (int t = lo; t < hi; ++t) (y[idx[t]] ? N1 : N0) += 1;

    GiniSplit split;
    if (depth < max_depth && hi - lo >= 2 && N0 > 0 && N1 > 0) {
        std::vector<int> features;
        if (features_per_node < X.k) {
            features = rng.choose(X.k, features_per_node);
            std::sort(features.begin(), features.end());
        } else {
            features.resize(X.k);
            std::iota(features.begin(), features.end(), 0);
        }
        std::vector<int> node_idx(idx.begin() + lo, idx.begin() + hi);
        split = best_split_gini(X, miss, node_idx, y, features);
    }
    if (!split.found) {
        tree.nodes[node_id].feature = -1;
        tree.nodes[node_id].value = N1 >= N0 ? 1.0 : 0.0;  // ties vote defect
        return;
    }
    SplitChoice as_choice{true, split.feature, split.threshold, split.default_left, split.gain};
    auto mid_it = std::stable_partition(idx.begin() + lo, idx.begin() + hi,
                                        [&](int i) { return goes_left(X, miss, i, as_choice); });
    int mid = static_cast<int>(mid_it - idx.begin());
    int left = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    int right = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();  // may reallocate: re-fetch the node reference
    TreeNode& nd = tree.nodes[node_id];
    nd.feature = split.feature;
    nd.threshold = split.threshold;
    nd.default_left = split.default_left;
    nd.left = left;
    nd.right = right;
    build_gini_tree(tree, left, X, miss, idx, lo, mid, y, depth + 1, max_depth, features_per_node,
                    rng);
    build_gini_tree(tree, right, X, miss, idx, mid, hi, y, depth + 1, max_depth, features_per_node,
                    rng);
}

}  // namespace detail

inline ForestModel train_forest(const FeatureMatrix& X, const std::vector<int>& labels,
                                const ForestConfig& config) {
    config.validate();
    if (X.n < 2 || static_cast<int>(labels.size()) != X.n)
        throw TrainingError("train_forest: need >= 2 labeled samples");
    int pos = std::accumulate(labels.begin(), labels.end(), 0);
    if (pos == 0 || pos == X.n) throw TrainingError("train_forest: single-class labels");

    ForestModel model;
    model.config = config;
    model.n_features = X.k;

    int features_per_node =
        config.feature_subsample ? std::max(1, static_cast<int>(std::lround(std::sqrt(X.k)))) : X.k;

    std::vector<int> oob_votes1(X.n, 0), oob_votes0(X.n, 0);
    for (int t = 0; t < config.trees; ++t) {
        RngStream rng = RngStream::derived(config.seed, StreamTag::tabular, t);
        RngStream mask_rng =
            RngStream::derived(config.seed, StreamTag::mask_learning, t);
        std::vector<uint8_t> miss = detail::masked_view(X, config.p_mask, mask_rng);

        std::vector<int> rows(X.n);
        std::vector<uint8_t> in_bag(X.n, 0);
        if (config.bootstrap) {
            for (int i = 0; i < X.n; ++i) {
                rows[i] = rng.uniform_int(0, X.n - 1);
                in_bag[rows[i]] = 1;
            }
            std::sort(rows.begin(), rows.end());
        } else {
            std::iota(rows.begin(), rows.end(), 0);
            std::fill(in_bag.begin(), in_bag.end(), 1);
        }

        Tree tree;
        tree.nodes.emplace_back();
        detail::build_gini_tree(tree, 0, X, miss, rows, 0, X.n, labels, 0, config.depth,
                                features_per_node, rng);
        for (int i = 0; i < X.n; ++i)
            if (!in_bag[i]) {
                double v = tree.eval(X.row(i), X.row_miss(i));
                (v >= 0.5 ? oob_votes1[i] : oob_votes0[i]) += 1;
            }
        model.trees.push_back(std::move(tree));
    }

    int correct = 0, counted = 0;
    for (int i = 0; i < X.n; ++i) {
        if (oob_votes0[i] + oob_votes1[i] == 0) continue;
        int vote = oob_votes1[i] >= oob_votes0[i] ? 1 : 0;
        correct += vote == labels[i];
        ++counted;
    }
    model.oob_accuracy = counted ? static_cast<double>(correct) / counted : 0.0;
    return model;
}

// ---------------------------------------------------------------------------
// Intra-bag: 2 boosted configs + 1 forest + 1 row-subsampled boosted model,
// mean-of-probabilities aggregation, all trained with mask learning. Member
// hyperparameters are deliberately close in capability: with heterogeneous
// members the mean probability drifts away from the best member's log-loss
// on the ambiguous rows (visual-only defects share the nominal parameter
// distribution), and the bag-vs-best-member tolerance no longer holds.

struct BagConfig {
    double p_mask = 0.3;
    uint64_t seed = 0;

    void validate() const {
        if (p_mask < 0.0 || p_mask >= 1.0) throw ValidationError("bag.p_mask must be in [0,1)");
    }
};

struct BagMember {
    std::string name;
    bool is_forest = false;
    TreeEnsembleModel boosted;
    ForestModel forest;

    double predict_prob(const FeatureVector& fv) const {
        return is_forest ? forest.predict_prob(fv) : boosted.predict_prob(fv);
    }
};

struct BagModel {
    BagConfig config;
    std::vector<BagMember> members;

    double predict_prob(const FeatureVector& fv) const {
        if (members.empty()) throw InputError("BagModel: no members");
        double s = 0.0;
        for (const auto& m : members) s += m.predict_prob(fv);
        return s / static_cast<double>(members.size());
    }
};

inline BagModel train_intra_bag(const FeatureMatrix& X, const std::vector<int>& labels,
                                const BagConfig& config) {
    config.validate();
    BagModel bag;
    bag.config = config;

    auto boosted_member = [&](const char* name, int rounds, int depth, double shrinkage,
                              double subsample, uint64_t index) {
        BoostedConfig c;
        c.rounds = rounds;
        c.depth = depth;
        c.shrinkage = shrinkage;
        c.row_subsample = subsample;
        c.p_mask = config.p_mask;
        c.seed = derive_seed(config.seed, StreamTag::tabular, index);
        BagMember m;
        m.name = name;
        m.boosted = train_boosted(X, labels, c);
        return m;
    };

    bag.members.push_back(boosted_member("boosted_d3", 150, 3, 0.1, 1.0, 0));
    bag.members.push_back(boosted_member("boosted_d4", 150, 4, 0.08, 1.0, 1));
    {
        ForestConfig c;
        c.p_mask = config.p_mask;
        c.seed = derive_seed(config.seed, StreamTag::tabular, 2);
        BagMember m;
        m.name = "forest";
        m.is_forest = true;
        m.forest = train_forest(X, labels, c);
        bag.members.push_back(std::move(m));
    }
    bag.members.push_back(boosted_member("boosted_sub", 150, 3, 0.1, 0.7, 3));
    return bag;
}

}  // namespace oanet
