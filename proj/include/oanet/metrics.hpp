#pragma once

// Binary classification metrics (defect = positive class) and the stratified
// split machinery shared by training, k-fold evaluation and the experiment
// harnesses.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "oanet/common.hpp"
#include "oanet/rng.hpp"

namespace oanet {

struct ConfusionCounts {
    long tp = 0;
    long fp = 0;
    long tn = 0;
    long fn = 0;

    long total() const { return tp + fp + tn + fn; }

    void add(bool predicted_defect, bool truth_defect) {
        if (predicted_defect && truth_defect)
            ++tp;
        else if (predicted_defect && !truth_defect)
            ++fp;
        else if (!predicted_defect && truth_defect)
            ++fn;
        else
            ++tn;
    }
};

// Undefined ratios (empty denominator) are reported as 0 and flagged rather
// than silently propagating a NaN into report aggregation.
struct MetricsResult {
    double accuracy = 0.0;
    double recall = 0.0;
    double precision = 0.0;
    double f1 = 0.0;
    bool recall_undefined = false;
    bool precision_undefined = false;
    bool f1_undefined = false;
};

inline MetricsResult metrics(const ConfusionCounts& c) {
    if (c.total() == 0) throw InputError("metrics: empty confusion counts");
    if (c.tp < 0 || c.fp < 0 || c.tn < 0 || c.fn < 0)
        throw InputError("metrics: negative confusion counts");
    MetricsResult m;
    m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    if (c.tp + c.fn > 0)
        m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    else
        m.recall_undefined = true;
    if (c.tp + c.fp > 0)
        m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    else
        m.precision_undefined = true;
    if (!m.recall_undefined && !m.precision_undefined && m.precision + m.recall > 0.0)
        m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    else
        m.f1_undefined = true;
    return m;
}

// ---------------------------------------------------------------------------
// Stratified splitting. Class quotas use largest-remainder apportionment so
// the train size equals round(ratio * n) exactly; remainder ties go to the
// lower label.

struct TrainTestSplit {
    std::vector<int> train;  // ascending corpus indices
    std::vector<int> test;
};

namespace detail {

inline std::vector<std::vector<int>> indices_by_class(const std::vector<int>& labels) {
    std::vector<std::vector<int>> by_class(2);
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1)
            throw InputError("split: labels must be 0 or 1");
        by_class[labels[i]].push_back(static_cast<int>(i));
    }
    return by_class;
}

}  // namespace detail

inline TrainTestSplit split_train_test(const std::vector<int>& labels, double ratio,
                                       uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0))
        throw ValidationError("eval.split_ratio must be in (0,1)");
    auto by_class = detail::indices_by_class(labels);
    if (by_class[0].empty() || by_class[1].empty())
        throw StratificationError("split_train_test: both classes must be present");

    long n = static_cast<long>(labels.size());
    long want_train = std::lround(ratio * static_cast<double>(n));
    long floors[2];
    double rema[2];
    long floor_sum = 0;
    for (int c = 0; c < 2; ++c) {
        double exact = ratio * static_cast<double>(by_class[c].size());
        floors[c] = static_cast<long>(exact);
        rema[c] = exact - static_cast<double>(floors[c]);
        floor_sum += floors[c];
    }
    long extras = want_train - floor_sum;
    // Two classes: hand out the extras by remainder, ties to class 0.
    std::vector<int> order = {0, 1};
    if (rema[1] > rema[0]) order = {1, 0};
    for (long e = 0; e < extras; ++e) ++floors[order[e % 2]];

    TrainTestSplit split;
    RngStream rng = RngStream::derived(seed, StreamTag::split);
    for (int c = 0; c < 2; ++c) {
        std::vector<int> idx = by_class[c];
        rng.shuffle(idx);
        long quota = std::min<long>(floors[c], static_cast<long>(idx.size()));
        for (size_t i = 0; i < idx.size(); ++i)
            (static_cast<long>(i) < quota ? split.train : split.test).push_back(idx[i]);
    }
    if (split.train.empty() || split.test.empty())
        throw StratificationError("split_train_test: degenerate split");
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

// Stratified k folds. Each class spreads as evenly as possible (sizes differ
// by at most one per class); the fold offset at which a class starts handing
// out its remainder advances cumulatively so the fold totals also differ by
// at most one.
inline std::vector<std::vector<int>> kfold(const std::vector<int>& labels, int k, uint64_t seed) {
    if (k < 2) throw ValidationError("eval.folds must be >= 2");
    auto by_class = detail::indices_by_class(labels);
    for (int c = 0; c < 2; ++c)
        if (static_cast<int>(by_class[c].size()) < k)
            throw StratificationError(
                strfmt("kfold: class %d has %zu samples, fewer than k=%d", c,
                       by_class[c].size(), k));

    std::vector<std::vector<int>> folds(k);
    RngStream rng = RngStream::derived(seed, StreamTag::split);
    int extra_offset = 0;
    for (int c = 0; c < 2; ++c) {
        std::vector<int> idx = by_class[c];
        rng.shuffle(idx);
        int base = static_cast<int>(idx.size()) / k;
        int extras = static_cast<int>(idx.size()) % k;
        size_t cursor = 0;
        for (int f = 0; f < k; ++f) {
            int take = base;
            // The folds receiving this class's remainder start where the
            // previous class stopped, keeping fold totals within one.
            int slot = (f - extra_offset % k + k) % k;
            if (slot < extras) ++take;
            for (int t = 0; t < take; ++t) folds[f].push_back(idx[cursor++]);
        }
        extra_offset += extras;
    }
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

}  // namespace oanet
