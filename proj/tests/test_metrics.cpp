#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>
#include <vector>

#include "oanet/metrics.hpp"
#include "oanet/rng.hpp"

using namespace oanet;
using Catch::Approx;

namespace {

// 971 labels with 384 defects, deterministically interleaved.
std::vector<int> corpus_labels() {
    std::vector<int> labels(971, 0);
    for (int i = 0; i < 384; ++i) labels[(i * 971) / 384 % 971] = 1;
    int ones = 0;
    for (int v : labels) ones += v;
    // The stride construction can collide; patch up to exactly 384.
    for (int i = 0; ones < 384 && i < 971; ++i)
        if (labels[i] == 0) {
            labels[i] = 1;
            ++ones;
        }
    return labels;
}

}  // namespace

TEST_CASE("metrics on the reference confusion table") {
    ConfusionCounts c{85, 10, 90, 15};
    MetricsResult m = metrics(c);
    CHECK(m.accuracy == Approx(0.875).margin(1e-15));
    CHECK(m.recall == Approx(0.85).margin(1e-15));
    CHECK(m.precision == Approx(85.0 / 95.0).margin(1e-15));
    CHECK(m.f1 == Approx(0.87179).margin(5e-6));
    CHECK_FALSE(m.recall_undefined);
    CHECK_FALSE(m.f1_undefined);
}

TEST_CASE("metrics flag undefined ratios instead of dividing by zero") {
    MetricsResult no_truth = metrics(ConfusionCounts{0, 3, 7, 0});
    CHECK(no_truth.recall_undefined);
    CHECK(no_truth.recall == 0.0);
    CHECK(no_truth.f1_undefined);

    MetricsResult no_positive_pred = metrics(ConfusionCounts{0, 0, 7, 3});
    CHECK(no_positive_pred.precision_undefined);
    CHECK(no_positive_pred.precision == 0.0);
    CHECK(no_positive_pred.f1_undefined);

    MetricsResult all_wrong = metrics(ConfusionCounts{0, 5, 0, 5});
    CHECK(all_wrong.accuracy == 0.0);
    CHECK(all_wrong.recall == 0.0);
    CHECK(all_wrong.f1_undefined);  // precision + recall == 0

    CHECK_THROWS_AS(metrics(ConfusionCounts{}), InputError);
}

TEST_CASE("metrics are scale-free") {
    ConfusionCounts c{17, 4, 23, 9};
    ConfusionCounts scaled{17 * 7, 4 * 7, 23 * 7, 9 * 7};
    MetricsResult a = metrics(c), b = metrics(scaled);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.recall == b.recall);
    CHECK(a.precision == b.precision);
    CHECK(a.f1 == b.f1);
}

TEST_CASE("confusion accumulation covers the four cells") {
    ConfusionCounts c;
    c.add(true, true);
    c.add(true, false);
    c.add(false, true);
    c.add(false, false);
    CHECK(c.tp == 1);
    CHECK(c.fp == 1);
    CHECK(c.fn == 1);
    CHECK(c.tn == 1);
}

TEST_CASE("stratified split honours the documented class quotas") {
    std::vector<int> labels = corpus_labels();
    TrainTestSplit s = split_train_test(labels, 0.7, 7);
    CHECK(s.train.size() == 680);
    CHECK(s.test.size() == 291);

    int train_defect = 0, test_defect = 0;
    for (int i : s.train) train_defect += labels[i];
    for (int i : s.test) test_defect += labels[i];
    CHECK(train_defect == 269);
    CHECK(static_cast<int>(s.train.size()) - train_defect == 411);
    CHECK(test_defect == 115);
    CHECK(static_cast<int>(s.test.size()) - test_defect == 176);

    std::set<int> seen(s.train.begin(), s.train.end());
    seen.insert(s.test.begin(), s.test.end());
    CHECK(seen.size() == labels.size());

    TrainTestSplit again = split_train_test(labels, 0.7, 7);
    CHECK(again.train == s.train);
    TrainTestSplit other = split_train_test(labels, 0.7, 8);
    CHECK(other.train != s.train);
}

TEST_CASE("split validation") {
    std::vector<int> labels = {1, 1, 1, 1};
    CHECK_THROWS_AS(split_train_test(labels, 0.7, 1), StratificationError);
    std::vector<int> ok = {0, 1, 0, 1, 0, 1};
    CHECK_THROWS_AS(split_train_test(ok, 0.0, 1), ValidationError);
    CHECK_THROWS_AS(split_train_test(ok, 1.0, 1), ValidationError);
    std::vector<int> bad = {0, 2, 1};
    CHECK_THROWS_AS(split_train_test(bad, 0.7, 1), InputError);
}

TEST_CASE("kfold produces balanced stratified folds") {
    std::vector<int> labels = corpus_labels();
    auto folds = kfold(labels, 5, 7);
    REQUIRE(folds.size() == 5);

    std::vector<int> sizes;
    for (const auto& f : folds) sizes.push_back(static_cast<int>(f.size()));
    std::vector<int> sorted = sizes;
    std::sort(sorted.rbegin(), sorted.rend());
    CHECK(sorted == std::vector<int>{195, 194, 194, 194, 194});

    // Stratification within one per class.
    std::vector<int> defects;
    for (const auto& f : folds) {
        int d = 0;
        for (int i : f) d += labels[i];
        defects.push_back(d);
    }
    auto [dmin, dmax] = std::minmax_element(defects.begin(), defects.end());
    CHECK(*dmax - *dmin <= 1);

    std::set<int> seen;
    for (const auto& f : folds) seen.insert(f.begin(), f.end());
    CHECK(seen.size() == labels.size());

    auto again = kfold(labels, 5, 7);
    CHECK(again == folds);
    auto other = kfold(labels, 5, 11);
    CHECK(other != folds);
}

TEST_CASE("kfold validation") {
    std::vector<int> labels(20, 0);
    for (int i = 0; i < 4; ++i) labels[i] = 1;
    CHECK_THROWS_AS(kfold(labels, 5, 1), StratificationError);  // 4 defects < 5 folds
    CHECK_NOTHROW(kfold(labels, 4, 1));
    CHECK_THROWS_AS(kfold(labels, 1, 1), ValidationError);
}
