#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "oanet/gate.hpp"
#include "oanet/rng.hpp"

using namespace oanet;
using Catch::Approx;

namespace {

std::vector<std::vector<double>> gaussian_embeds(int n, int d, uint64_t seed, double mean = 0.0,
                                                 double sd = 1.0) {
    RngStream rng = RngStream::derived(seed, StreamTag::fixture);
    std::vector<std::vector<double>> out(n, std::vector<double>(d, 0.0));
    for (auto& e : out)
        for (double& v : e) v = rng.normal(mean, sd);
    return out;
}

}  // namespace

TEST_CASE("kl of a distribution with itself is zero") {
    std::vector<double> mean = {0.3, -1.2, 4.0};
    std::vector<double> var = {0.5, 2.0, 1.0};
    CHECK(kl_diag_gaussian(mean, var, mean, var) == 0.0);
}

TEST_CASE("kl closed forms") {
    // Unit-variance mean shift: KL(N(0,1) || N(1,1)) = 1/2.
    CHECK(kl_diag_gaussian({0.0}, {1.0}, {1.0}, {1.0}) == Approx(0.5).margin(1e-12));
    // Variance widening: KL(N(0,2) || N(0,1)) = (2 - 1 + ln(1/2)) / 2.
    double expected = 0.5 * (2.0 - 1.0 + std::log(0.5));
    CHECK(kl_diag_gaussian({0.0}, {2.0}, {0.0}, {1.0}) == Approx(expected).margin(1e-12));
    CHECK(expected == Approx(0.15342640972002733).margin(1e-12));
    // Dimensions sum.
    CHECK(kl_diag_gaussian({0.0, 0.0}, {1.0, 2.0}, {1.0, 0.0}, {1.0, 1.0}) ==
          Approx(0.5 + expected).margin(1e-12));
}

TEST_CASE("kl is non-negative and detects any mismatch") {
    RngStream rng = RngStream::derived(900, StreamTag::fixture);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> m1(4), m2(4), v1(4), v2(4);
        for (int j = 0; j < 4; ++j) {
            m1[j] = rng.normal();
            m2[j] = rng.normal();
            v1[j] = 0.1 + 3.0 * rng.uniform();
            v2[j] = 0.1 + 3.0 * rng.uniform();
        }
        CHECK(kl_diag_gaussian(m1, v1, m2, v2) >= 0.0);
    }
    CHECK(kl_diag_gaussian({0.0}, {1.0}, {0.0}, {1.0 + 1e-3}) > 0.0);
    CHECK_THROWS_AS(kl_diag_gaussian({0.0}, {1.0}, {0.0, 1.0}, {1.0, 1.0}), InputError);
    CHECK_THROWS_AS(kl_diag_gaussian({0.0}, {0.0}, {0.0}, {1.0}), InputError);
}

TEST_CASE("modality statistics recover a gaussian sample") {
    auto embeds = gaussian_embeds(10000, 3, 901);
    ModalityStats s = fit_modality_stats(embeds);
    for (int j = 0; j < 3; ++j) {
        CHECK(std::abs(s.mean[j]) < 0.05);
        CHECK(std::abs(s.var[j] - 1.0) < 0.1);
    }
}

TEST_CASE("degenerate gate fits") {
    std::vector<std::vector<double>> same(5, {1.0, -2.0});
    ModalityStats s = fit_modality_stats(same);
    CHECK(s.mean[0] == Approx(1.0));
    CHECK(s.var[0] == kGateVarianceFloor);
    CHECK(s.var[1] == kGateVarianceFloor);
    CHECK_THROWS_AS(fit_modality_stats({{1.0}}), TrainingError);
    auto ragged = same;
    ragged[2].pop_back();
    CHECK_THROWS_AS(fit_modality_stats(ragged), InputError);
    CHECK_THROWS_AS(fit_gate(same, same, -1.0, 5.0), ValidationError);
    CHECK_THROWS_AS(fit_gate(same, same, 1.0, 0.0), ValidationError);
}

TEST_CASE("identical train and test batches give uniform weights") {
    auto img = gaussian_embeds(60, 4, 902);
    auto ext = gaussian_embeds(60, 4, 903, 0.5, 1.5);
    GateState g = fit_gate(img, ext);
    GateDecision d = gate_weights(g, img, ext);
    for (int m = 0; m < kNumMembers; ++m) {
        CHECK(d.active[m]);
        CHECK(d.weights[m] == Approx(1.0 / 3.0).margin(1e-9));
    }
    CHECK(d.modality_divergence[0] < 0.05);
    CHECK(d.modality_divergence[1] < 0.05);
    CHECK_FALSE(d.uniform_fallback);
}

TEST_CASE("weighting follows the documented exponential form") {
    GateState g;  // beta 1, tau 5; stats irrelevant for the weighting math
    GateDecision d = detail::gate_from_divergences(g, {0.0, 1.0});
    // Member divergences: image head 0, external bag 1, fused head max(0,1)=1.
    CHECK(d.member_divergence[0] == 0.0);
    CHECK(d.member_divergence[1] == 1.0);
    CHECK(d.member_divergence[2] == 1.0);
    double e = std::exp(1.0);
    CHECK(d.weights[0] == Approx(e / (e + 2.0)).margin(1e-12));
    CHECK(d.weights[1] == Approx(1.0 / (e + 2.0)).margin(1e-12));
    CHECK(d.weights[2] == Approx(1.0 / (e + 2.0)).margin(1e-12));
    CHECK(d.weights[0] == Approx(0.576).margin(5e-4));
    CHECK(d.weights[1] == Approx(0.212).margin(5e-4));
    CHECK(d.weights[0] + d.weights[1] + d.weights[2] == Approx(1.0).margin(1e-9));
}

TEST_CASE("a shifted modality deactivates exactly its consumers") {
    GateState g;
    GateDecision d = detail::gate_from_divergences(g, {0.0, g.tau + 1.0});
    CHECK(d.active[static_cast<int>(Member::image_head)]);
    CHECK_FALSE(d.active[static_cast<int>(Member::external_bag)]);
    CHECK_FALSE(d.active[static_cast<int>(Member::fused_head)]);
    CHECK(d.weights[0] == Approx(1.0).margin(1e-12));
    CHECK(d.weights[1] == 0.0);
    CHECK(d.weights[2] == 0.0);
    CHECK_FALSE(d.uniform_fallback);

    GateDecision flipped = detail::gate_from_divergences(g, {g.tau + 1.0, 0.0});
    CHECK_FALSE(flipped.active[0]);
    CHECK(flipped.active[1]);
    CHECK_FALSE(flipped.active[2]);
    CHECK(flipped.weights[1] == Approx(1.0).margin(1e-12));
}

TEST_CASE("all members beyond tau fall back to uniform weights") {
    GateState g;
    GateDecision d = detail::gate_from_divergences(g, {g.tau + 2.0, g.tau + 3.0});
    CHECK(d.uniform_fallback);
    for (int m = 0; m < kNumMembers; ++m) CHECK(d.weights[m] == Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("a member's weight is non-increasing in its own divergence") {
    GateState g;
    double prev = 2.0;
    for (double div : {0.0, 0.3, 0.7, 1.5, 3.0, 4.9}) {
        GateDecision d = detail::gate_from_divergences(g, {div, 1.0});
        CHECK(d.weights[0] <= prev + 1e-15);
        prev = d.weights[0];
    }
}

TEST_CASE("a genuinely shifted external batch loses weight through the public api") {
    auto img = gaussian_embeds(80, 4, 910);
    auto ext = gaussian_embeds(80, 4, 911);
    GateState g = fit_gate(img, ext);
    auto img_test = gaussian_embeds(40, 4, 912);
    auto ext_test = gaussian_embeds(40, 4, 913, 4.0, 1.0);  // strong mean shift
    GateDecision d = gate_weights(g, img_test, ext_test);
    CHECK(d.modality_divergence[1] > d.modality_divergence[0]);
    CHECK(d.weights[static_cast<int>(Member::image_head)] >
          d.weights[static_cast<int>(Member::external_bag)]);
    double sum = 0.0;
    for (int m = 0; m < kNumMembers; ++m) {
        if (!d.active[m]) CHECK(d.weights[m] == 0.0);
        sum += d.weights[m];
    }
    CHECK(sum == Approx(1.0).margin(1e-9));
}

TEST_CASE("sample-mode divergence uses the standardized deviation surrogate") {
    ModalityStats s;
    s.mean = {0.0};
    s.var = {1.0};
    CHECK(sample_divergence(s, {0.0}) == 0.0);   // s = 0 clips to 0
    CHECK(sample_divergence(s, {1.0}) == 0.0);   // s = 1 is the expected value
    CHECK(sample_divergence(s, {3.0}) == Approx(4.0).margin(1e-12));  // (9-1)/2

    GateState g;
    g.stats[0] = s;
    g.stats[1] = s;
    GateDecision d = gate_weights_single(g, {0.5}, {0.5});
    for (int m = 0; m < kNumMembers; ++m) CHECK(d.weights[m] == Approx(1.0 / 3.0).margin(1e-12));
    GateDecision far = gate_weights_single(g, {0.0}, {10.0});
    CHECK(far.weights[0] > far.weights[1]);
    CHECK_THROWS_AS(sample_divergence(s, {0.0, 1.0}), InputError);
}

TEST_CASE("fused probability is the weighted member mean") {
    GateState g;
    GateDecision one_active = detail::gate_from_divergences(g, {0.0, g.tau + 1.0});
    FusedPrediction p = fuse_predictions({0.9, 0.1, 0.2}, one_active);
    CHECK(p.fused == Approx(0.9).margin(1e-12));
    CHECK(p.defect);

    GateDecision uniform = detail::gate_from_divergences(g, {0.0, 0.0});
    FusedPrediction q = fuse_predictions({0.2, 0.4, 0.9}, uniform);
    CHECK(q.fused == Approx(0.5).margin(1e-12));
    CHECK(q.defect);  // the decision boundary itself counts as defect

    FusedPrediction r = fuse_predictions({0.35, 0.35, 0.35}, uniform);
    CHECK(r.fused == Approx(0.35).margin(1e-12));
    CHECK_FALSE(r.defect);

    // Convexity: fused stays inside the active members' probability range.
    RngStream rng = RngStream::derived(920, StreamTag::fixture);
    for (int t = 0; t < 30; ++t) {
        std::array<double, kNumMembers> probs{};
        for (double& v : probs) v = rng.uniform();
        GateDecision d = detail::gate_from_divergences(
            g, {6.0 * rng.uniform(), 6.0 * rng.uniform()});
        FusedPrediction f = fuse_predictions(probs, d);
        double lo = 1.0, hi = 0.0;
        for (int m = 0; m < kNumMembers; ++m) {
            if (!d.active[m]) continue;
            lo = std::min(lo, probs[m]);
            hi = std::max(hi, probs[m]);
        }
        CHECK(f.fused >= lo - 1e-12);
        CHECK(f.fused <= hi + 1e-12);
    }
    CHECK_THROWS_AS(fuse_predictions({1.2, 0.0, 0.0}, uniform), InputError);
}
