#pragma once

// Cosine alignment objective between two embeddings: loss = 1 - cos(a, b).
// Shared by the image-branch trainer (alignment term against frozen external
// embeddings) and the fused pipeline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "oanet/common.hpp"

namespace oanet {

// Below this norm a vector has no usable direction: the loss saturates at 1
// with zero gradient instead of dividing by ~0.
inline constexpr double kAlignNormFloor = 1e-12;

inline double align_loss(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw InputError("align_loss: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < kAlignNormFloor || nb < kAlignNormFloor) return 1.0;
    if (a == b) return 0.0;  // exact zero: sqrt(x)*sqrt(x) may round off x
    double cosab = std::clamp(dot / (na * nb), -1.0, 1.0);
    return 1.0 - cosab;
}

// Loss plus gradient with respect to `a` (b is treated as a constant).
// d/da [1 - a.b/(|a||b|)] = -(b/(|a||b|) - cos * a/|a|^2).
inline double align_loss_grad(const std::vector<double>& a, const std::vector<double>& b,
                              std::vector<double>& grad_a) {
    if (a.size() != b.size()) throw InputError("align_loss_grad: dimension mismatch");
    grad_a.assign(a.size(), 0.0);
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na2 += a[i] * a[i];
        nb2 += b[i] * b[i];
    }
    double na = std::sqrt(na2);
    double nb = std::sqrt(nb2);
    if (na < kAlignNormFloor || nb < kAlignNormFloor) return 1.0;
    if (a == b) return 0.0;  // exact zero with zero gradient, matching align_loss
    double cosab = std::clamp(dot / (na * nb), -1.0, 1.0);
    for (size_t i = 0; i < a.size(); ++i) {
        grad_a[i] = -(b[i] / (na * nb) - cosab * a[i] / na2);
    }
    return 1.0 - cosab;
}

}  // namespace oanet
