#pragma once

// Distribution-shift gate over the three ensemble members. Per-modality
// embedding distributions are summarized as diagonal Gaussians at training
// time; at inference the divergence of the test distribution from the
// training one decides how much weight each member keeps. A member is only
// as trustworthy as the most shifted modality it consumes.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "oanet/common.hpp"

namespace oanet {

enum class Modality { image = 0, external = 1 };
inline constexpr int kNumModalities = 2;

// Member order is fixed and indexes every per-member array in this module.
enum class Member { image_head = 0, external_bag = 1, fused_head = 2 };
inline constexpr int kNumMembers = 3;

inline const char* member_name(Member m) {
    switch (m) {
        case Member::image_head: return "image_head";
        case Member::external_bag: return "external_bag";
        case Member::fused_head: return "fused_head";
    }
    return "?";
}

// Which modalities each member consumes: the image head sees only image
// embeddings, the parameter bag only external ones, the fused head both.
inline const std::array<std::vector<Modality>, kNumMembers>& member_modalities() {
    static const std::array<std::vector<Modality>, kNumMembers> map = {
        std::vector<Modality>{Modality::image},
        std::vector<Modality>{Modality::external},
        std::vector<Modality>{Modality::image, Modality::external},
    };
    return map;
}

inline constexpr double kGateVarianceFloor = 1e-6;

struct ModalityStats {
    std::vector<double> mean;
    std::vector<double> var;  // diagonal, floored at kGateVarianceFloor
};

struct GateState {
    std::array<ModalityStats, kNumModalities> stats;
    double beta = 1.0;
    double tau = 5.0;
};

// Unbiased diagonal-Gaussian fit. All-equal samples leave only the floor.
inline ModalityStats fit_modality_stats(const std::vector<std::vector<double>>& embeds) {
    if (embeds.size() < 2)
        throw TrainingError("fit_gate: need at least 2 embeddings per modality");
    size_t d = embeds[0].size();
    for (const auto& e : embeds)
        if (e.size() != d) throw InputError("fit_gate: ragged embeddings");
    ModalityStats s;
    s.mean.assign(d, 0.0);
    s.var.assign(d, 0.0);
    for (const auto& e : embeds)
        for (size_t j = 0; j < d; ++j) s.mean[j] += e[j];
    for (double& m : s.mean) m /= static_cast<double>(embeds.size());
    for (const auto& e : embeds)
        for (size_t j = 0; j < d; ++j) {
            double c = e[j] - s.mean[j];
            s.var[j] += c * c;
        }
    for (double& v : s.var) v = std::max(kGateVarianceFloor, v / (embeds.size() - 1.0));
    return s;
}

inline GateState fit_gate(const std::vector<std::vector<double>>& image_embeds,
                          const std::vector<std::vector<double>>& external_embeds,
                          double beta = 1.0, double tau = 5.0) {
    if (!(beta >= 0.0) || !std::isfinite(beta))
        throw ValidationError("gate.beta must be finite and >= 0");
    if (!(tau > 0.0)) throw ValidationError("gate.tau must be positive");
    GateState g;
    g.beta = beta;
    g.tau = tau;
    g.stats[static_cast<int>(Modality::image)] = fit_modality_stats(image_embeds);
    g.stats[static_cast<int>(Modality::external)] = fit_modality_stats(external_embeds);
    return g;
}

// KL(N(mean1, diag var1) || N(mean2, diag var2)), summed over dimensions.
inline double kl_diag_gaussian(const std::vector<double>& mean1, const std::vector<double>& var1,
                               const std::vector<double>& mean2, const std::vector<double>& var2) {
    size_t d = mean1.size();
    if (var1.size() != d || mean2.size() != d || var2.size() != d)
        throw InputError("kl_diag_gaussian: dimension mismatch");
    double kl = 0.0;
    for (size_t j = 0; j < d; ++j) {
        if (!(var1[j] > 0.0) || !(var2[j] > 0.0))
            throw InputError("kl_diag_gaussian: variances must be positive");
        double dm = mean2[j] - mean1[j];
        kl += 0.5 * (var1[j] / var2[j] + dm * dm / var2[j] - 1.0 + std::log(var2[j] / var1[j]));
    }
    return kl;
}

struct GateDecision {
    std::array<double, kNumMembers> weights{};
    std::array<bool, kNumMembers> active{};
    std::array<double, kNumMembers> member_divergence{};
    std::array<double, kNumModalities> modality_divergence{};
    bool uniform_fallback = false;  // every member exceeded tau
};

namespace detail {

inline GateDecision gate_from_divergences(const GateState& g,
                                          const std::array<double, kNumModalities>& div) {
    GateDecision out;
    out.modality_divergence = div;
    std::array<double, kNumMembers> raw{};
    double total = 0.0;
    for (int m = 0; m < kNumMembers; ++m) {
        double d = 0.0;
        for (Modality mod : member_modalities()[m])
            d = std::max(d, div[static_cast<int>(mod)]);
        out.member_divergence[m] = d;
        out.active[m] = d <= g.tau;
        raw[m] = out.active[m] ? std::exp(-g.beta * d) : 0.0;
        total += raw[m];
    }
    if (total <= 0.0) {
        out.uniform_fallback = true;
        for (int m = 0; m < kNumMembers; ++m) {
            out.active[m] = true;
            out.weights[m] = 1.0 / kNumMembers;
        }
        return out;
    }
    for (int m = 0; m < kNumMembers; ++m) out.weights[m] = raw[m] / total;
    return out;
}

}  // namespace detail

// Batch mode: summarize the test batch the same way training was summarized
// and take KL(test || train) per modality.
inline GateDecision gate_weights(const GateState& g,
                                 const std::vector<std::vector<double>>& test_image_embeds,
                                 const std::vector<std::vector<double>>& test_external_embeds) {
    ModalityStats ti = fit_modality_stats(test_image_embeds);
    ModalityStats te = fit_modality_stats(test_external_embeds);
    const ModalityStats& gi = g.stats[static_cast<int>(Modality::image)];
    const ModalityStats& ge = g.stats[static_cast<int>(Modality::external)];
    if (ti.mean.size() != gi.mean.size() || te.mean.size() != ge.mean.size())
        throw InputError("gate_weights: embedding dimension mismatch with gate state");
    std::array<double, kNumModalities> div{};
    div[static_cast<int>(Modality::image)] = kl_diag_gaussian(ti.mean, ti.var, gi.mean, gi.var);
    div[static_cast<int>(Modality::external)] = kl_diag_gaussian(te.mean, te.var, ge.mean, ge.var);
    return detail::gate_from_divergences(g, div);
}

// Sample mode: a single embedding cannot support a KL estimate, so the
// surrogate uses the mean standardized squared deviation s, which satisfies
// E[s] = 1 under the training distribution; (s - 1) / 2 mirrors the KL's
// quadratic term and is clipped at zero.
inline double sample_divergence(const ModalityStats& s, const std::vector<double>& x) {
    if (x.size() != s.mean.size()) throw InputError("sample_divergence: dimension mismatch");
    if (x.empty()) throw InputError("sample_divergence: empty embedding");
    double acc = 0.0;
    for (size_t j = 0; j < x.size(); ++j) {
        double c = x[j] - s.mean[j];
        acc += c * c / s.var[j];
    }
    double mean_dev = acc / static_cast<double>(x.size());
    return std::max(0.0, (mean_dev - 1.0) / 2.0);
}

inline GateDecision gate_weights_single(const GateState& g, const std::vector<double>& image_embed,
                                        const std::vector<double>& external_embed) {
    std::array<double, kNumModalities> div{};
    div[static_cast<int>(Modality::image)] =
        sample_divergence(g.stats[static_cast<int>(Modality::image)], image_embed);
    div[static_cast<int>(Modality::external)] =
        sample_divergence(g.stats[static_cast<int>(Modality::external)], external_embed);
    return detail::gate_from_divergences(g, div);
}

struct FusedPrediction {
    std::array<double, kNumMembers> member_probs{};
    GateDecision gate;
    double fused = 0.0;
    bool defect = false;
};

inline FusedPrediction fuse_predictions(const std::array<double, kNumMembers>& member_probs,
                                        const GateDecision& gate) {
    for (double p : member_probs)
        if (!(p >= 0.0 && p <= 1.0))
            throw InputError("fuse_predictions: member probabilities must be in [0,1]");
    FusedPrediction out;
    out.member_probs = member_probs;
    out.gate = gate;
    for (int m = 0; m < kNumMembers; ++m) out.fused += gate.weights[m] * member_probs[m];
    out.defect = out.fused >= 0.5;
    return out;
}

}  // namespace oanet
