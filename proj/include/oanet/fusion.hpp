#pragma once

// Cross-modality fusion: PCA (cyclic Jacobi eigensolver) with a fixed sign
// convention, the iterated refinement recurrence over image and external
// embeddings, the external MLP branch, and the staged fused-classifier
// training (external branch -> aligned image branch -> refinement PCAs ->
// logistic head).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "oanet/align.hpp"
#include "oanet/common.hpp"
#include "oanet/encoder.hpp"
#include "oanet/rng.hpp"
#include "oanet/tabular.hpp"

namespace oanet {

// ---------------------------------------------------------------------------
// PCA.

struct PcaProjection {
    std::vector<double> mean;
    std::vector<std::vector<double>> components;  // k rows, orthonormal
    std::vector<double> explained_variance;       // descending, >= 0
    bool degenerate = false;                      // selected directions carry no variance

    int input_dim() const { return static_cast<int>(mean.size()); }
    int k() const { return static_cast<int>(components.size()); }

    std::vector<double> project(const std::vector<double>& x) const {
        if (static_cast<int>(x.size()) != input_dim())
            throw InputError("PcaProjection: input dimension mismatch");
        std::vector<double> out(components.size(), 0.0);
        for (size_t r = 0; r < components.size(); ++r) {
            double acc = 0.0;
            for (size_t j = 0; j < mean.size(); ++j) acc += components[r][j] * (x[j] - mean[j]);
            out[r] = acc;
        }
        return out;
    }
};

namespace detail {

// Cyclic Jacobi for symmetric matrices. A is row-major d*d and is destroyed;
// V ends up holding eigenvectors in columns (V[:, j] for eigenvalue j).
inline void jacobi_eigen_sym(std::vector<double>& A, int d, std::vector<double>& eigvals,
                             std::vector<double>& V) {
    V.assign(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) V[static_cast<size_t>(i) * d + i] = 1.0;

    auto a = [&](int r, int c) -> double& { return A[static_cast<size_t>(r) * d + c]; };
    auto v = [&](int r, int c) -> double& { return V[static_cast<size_t>(r) * d + c]; };

    double frob = 0.0;
    for (double x : A) frob += x * x;
    frob = std::sqrt(frob);
    double tol = std::max(1e-300, 1e-15 * frob);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) off += a(p, q) * a(p, q);
        if (std::sqrt(off) <= tol) break;
        for (int p = 0; p < d; ++p) {
            for (int q = p + 1; q < d; ++q) {
                double apq = a(p, q);
                if (std::abs(apq) <= tol * 1e-3) continue;
                double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int i = 0; i < d; ++i) {
                    double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < d; ++i) {
                    double api = a(p, i), aqi = a(q, i);
                    a(p, i) = c * api - s * aqi;
                    a(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < d; ++i) {
                    double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    eigvals.assign(d, 0.0);
    for (int i = 0; i < d; ++i) eigvals[i] = a(i, i);
}

}  // namespace detail

inline PcaProjection fit_pca(const std::vector<std::vector<double>>& X, int k) {
    int n = static_cast<int>(X.size());
    if (n < 2) throw InputError("fit_pca: need at least 2 vectors");
    int d = static_cast<int>(X[0].size());
    for (const auto& row : X)
        if (static_cast<int>(row.size()) != d) throw InputError("fit_pca: ragged input");
    if (k < 1 || k > std::min(n - 1, d))
        throw InputError(strfmt("fit_pca: k=%d exceeds min(n-1, d)=min(%d, %d)", k, n - 1, d));

    PcaProjection p;
    p.mean.assign(d, 0.0);
    for (const auto& row : X)
        for (int j = 0; j < d; ++j) p.mean[j] += row[j];
    for (double& m : p.mean) m /= n;

    // Unbiased covariance of the centered data.
    std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
    std::vector<double> c(d);
    for (const auto& row : X) {
        for (int j = 0; j < d; ++j) c[j] = row[j] - p.mean[j];
        for (int r = 0; r < d; ++r)
            for (int j = r; j < d; ++j) cov[static_cast<size_t>(r) * d + j] += c[r] * c[j];
    }
    for (int r = 0; r < d; ++r)
        for (int j = r; j < d; ++j) {
            cov[static_cast<size_t>(r) * d + j] /= (n - 1);
            cov[static_cast<size_t>(j) * d + r] = cov[static_cast<size_t>(r) * d + j];
        }

    std::vector<double> eigvals, V;
    detail::jacobi_eigen_sym(cov, d, eigvals, V);

    std::vector<int> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return eigvals[a] > eigvals[b]; });

    p.components.assign(k, std::vector<double>(d, 0.0));
    p.explained_variance.assign(k, 0.0);
    for (int r = 0; r < k; ++r) {
        int src = order[r];
        p.explained_variance[r] = std::max(0.0, eigvals[src]);
        for (int j = 0; j < d; ++j) p.components[r][j] = V[static_cast<size_t>(j) * d + src];
        // Sign convention: first coordinate of visible magnitude is positive.
        for (int j = 0; j < d; ++j) {
            if (std::abs(p.components[r][j]) > 1e-12) {
                if (p.components[r][j] < 0.0)
                    for (double& x : p.components[r]) x = -x;
                break;
            }
        }
    }
    p.degenerate = p.explained_variance[k - 1] <= 1e-15;
    return p;
}

// ---------------------------------------------------------------------------
// Refinement: round 1 concatenates the two k-dim projections; later rounds
// re-project the raw embeddings and the previous refined vector, so the
// original modalities stay present at every round.

struct RefineRound {
    PcaProjection image;
    PcaProjection external;
    PcaProjection fused;  // only for rounds >= 2
    bool has_fused = false;
};

struct RefineStack {
    int rounds = 0;
    int k = 0;
    std::vector<RefineRound> per_round;

    int output_dim() const { return rounds == 0 ? 0 : (rounds == 1 ? 2 * k : 3 * k); }
};

inline std::vector<double> refine(const std::vector<double>& z_image,
                                  const std::vector<double>& z_external,
                                  const RefineStack& stack) {
    if (stack.rounds < 1) throw InputError("refine: empty projection stack");
    std::vector<double> f;
    for (int r = 0; r < stack.rounds; ++r) {
        const RefineRound& round = stack.per_round[r];
        std::vector<double> pi = round.image.project(z_image);
        std::vector<double> pe = round.external.project(z_external);
        std::vector<double> next;
        next.reserve(3 * stack.k);
        next.insert(next.end(), pi.begin(), pi.end());
        next.insert(next.end(), pe.begin(), pe.end());
        if (round.has_fused) {
            std::vector<double> pf = round.fused.project(f);
            next.insert(next.end(), pf.begin(), pf.end());
        }
        f = std::move(next);
    }
    return f;
}

struct RefineFitResult {
    RefineStack stack;
    std::vector<std::vector<double>> train_refined;
};

inline RefineFitResult fit_refine(const std::vector<std::vector<double>>& image_embeds,
                                  const std::vector<std::vector<double>>& external_embeds,
                                  int rounds, int k) {
    if (rounds < 1) throw InputError("fit_refine: rounds must be >= 1");
    if (image_embeds.size() != external_embeds.size() || image_embeds.empty())
        throw InputError("fit_refine: embedding lists must be equal and non-empty");
    size_t n = image_embeds.size();

    RefineFitResult out;
    out.stack.rounds = rounds;
    out.stack.k = k;
    std::vector<std::vector<double>> f(n);
    for (int r = 0; r < rounds; ++r) {
        RefineRound round;
        round.image = fit_pca(image_embeds, k);
        round.external = fit_pca(external_embeds, k);
        if (r > 0) {
            round.fused = fit_pca(f, k);
            round.has_fused = true;
        }
        for (size_t i = 0; i < n; ++i) {
            std::vector<double> pi = round.image.project(image_embeds[i]);
            std::vector<double> pe = round.external.project(external_embeds[i]);
            std::vector<double> next;
            next.reserve(3 * static_cast<size_t>(k));
            next.insert(next.end(), pi.begin(), pi.end());
            next.insert(next.end(), pe.begin(), pe.end());
            if (round.has_fused) {
                std::vector<double> pf = round.fused.project(f[i]);
                next.insert(next.end(), pf.begin(), pf.end());
            }
            f[i] = std::move(next);
        }
        out.stack.per_round.push_back(std::move(round));
    }
    out.train_refined = std::move(f);
    return out;
}

// ---------------------------------------------------------------------------
// External branch: 2-layer MLP (k -> hidden -> d) plus a CE head used only
// for training. Masked fields enter as the sentinel 0 (the standardized
// mean); mask learning additionally zeroes fields at p_mask during training.

struct MlpConfig {
    int hidden = 32;
    int embed_dim = 32;
    double learning_rate = 0.01;
    double weight_decay = 0.0005;
    int epochs = 30;
    int batch_size = 32;
    double p_mask = 0.1;
    uint64_t seed = 0;

    void validate() const {
        if (hidden < 1) throw ValidationError("external.hidden must be >= 1");
        if (embed_dim < 1) throw ValidationError("external.embed_dim must be >= 1");
        if (learning_rate <= 0.0) throw ValidationError("external.learning_rate must be positive");
        if (weight_decay < 0.0) throw ValidationError("external.weight_decay must be >= 0");
        if (epochs < 1) throw ValidationError("external.epochs must be >= 1");
        if (batch_size < 1) throw ValidationError("external.batch_size must be >= 1");
        if (p_mask < 0.0 || p_mask >= 1.0) throw ValidationError("external.p_mask must be in [0,1)");
    }
};

struct Mlp {
    MlpConfig config;
    DenseLayer l1;    // in -> hidden, ReLU
    DenseLayer l2;    // hidden -> embed, linear (this output is the embedding)
    DenseLayer head;  // embed -> 2 logits

    std::pair<std::vector<double>, std::vector<double>> forward(
        const std::vector<double>& input) const {
        if (static_cast<int>(input.size()) != l1.in_dim)
            throw InputError("Mlp: input dimension mismatch");
        std::vector<double> h, e, z;
        detail::dense_forward(input, l1, h);
        for (double& x : h) x = x > 0.0 ? x : 0.0;
        detail::dense_forward(h, l2, e);
        detail::dense_forward(e, head, z);
        return {e, z};
    }

    std::vector<double> embedding(const FeatureVector& fv) const {
        return forward(fv.values).first;
    }
};

struct MlpTrainResult {
    Mlp model;
    std::vector<double> ce_trace;
};

inline MlpTrainResult train_external_mlp(const std::vector<FeatureVector>& features,
                                         const std::vector<int>& labels,
                                         const MlpConfig& config) {
    config.validate();
    if (features.empty() || features.size() != labels.size())
        throw TrainingError("train_external_mlp: need equally many features and labels");
    int pos = std::accumulate(labels.begin(), labels.end(), 0);
    if (pos == 0 || pos == static_cast<int>(labels.size()))
        throw TrainingError("train_external_mlp: single-class labels");
    int in_dim = static_cast<int>(features[0].values.size());

    MlpTrainResult out;
    Mlp& m = out.model;
    m.config = config;
    m.l1.in_dim = in_dim;
    m.l1.out_dim = config.hidden;
    m.l1.resize();
    m.l2.in_dim = config.hidden;
    m.l2.out_dim = config.embed_dim;
    m.l2.resize();
    m.head.in_dim = config.embed_dim;
    m.head.out_dim = 2;
    m.head.resize();

    RngStream init = RngStream::derived(config.seed, StreamTag::external_init);
    auto he = [&](DenseLayer& L) {
        double sd = std::sqrt(2.0 / L.in_dim);
        for (double& v : L.w) v = init.normal(0.0, sd);
    };
    he(m.l1);
    he(m.l2);
    he(m.head);

    DenseLayer g1 = m.l1, g2 = m.l2, gh = m.head;
    std::vector<int> order(features.size());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        RngStream shuffle_rng = RngStream::derived(config.seed, StreamTag::external_shuffle, epoch);
        RngStream mask_rng = RngStream::derived(config.seed, StreamTag::mask_learning, epoch);
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);

        // One mask-learning draw per (sample, field), in corpus order so the
        // pattern does not depend on the shuffle.
        std::vector<uint8_t> dropped(features.size() * static_cast<size_t>(in_dim), 0);
        if (config.p_mask > 0.0)
            for (auto& b : dropped)
                if (mask_rng.uniform() < config.p_mask) b = 1;

        double ce_sum = 0.0;
        std::vector<double> input(in_dim), h, e, z, probs, dz, de, dh;
        for (size_t start = 0; start < order.size(); start += config.batch_size) {
            size_t stop = std::min(order.size(), start + config.batch_size);
            auto zero = [](DenseLayer& L) {
                std::fill(L.w.begin(), L.w.end(), 0.0);
                std::fill(L.b.begin(), L.b.end(), 0.0);
            };
            zero(g1);
            zero(g2);
            zero(gh);
            for (size_t t = start; t < stop; ++t) {
                int i = order[t];
                for (int j = 0; j < in_dim; ++j) {
                    bool off = dropped[static_cast<size_t>(i) * in_dim + j] != 0;
                    input[j] = off ? 0.0 : features[i].values[j];
                }
                detail::dense_forward(input, m.l1, h);
                std::vector<double> h_pre = h;
                for (double& x : h) x = x > 0.0 ? x : 0.0;
                detail::dense_forward(h, m.l2, e);
                detail::dense_forward(e, m.head, z);
                ce_sum += detail::softmax_ce(z, labels[i], probs);

                dz = probs;
                dz[labels[i]] -= 1.0;
                detail::dense_backward(e, m.head, dz, gh, &de);
                detail::dense_backward(h, m.l2, de, g2, &dh);
                for (int j = 0; j < config.hidden; ++j)
                    if (h_pre[j] <= 0.0) dh[j] = 0.0;
                detail::dense_backward(input, m.l1, dh, g1, nullptr);
            }
            double inv = 1.0 / static_cast<double>(stop - start);
            auto step = [&](DenseLayer& L, DenseLayer& G) {
                for (size_t i = 0; i < L.w.size(); ++i)
                    L.w[i] -= config.learning_rate * (G.w[i] * inv + config.weight_decay * L.w[i]);
                for (size_t i = 0; i < L.b.size(); ++i)
                    L.b[i] -= config.learning_rate * G.b[i] * inv;
            };
            step(m.l1, g1);
            step(m.l2, g2);
            step(m.head, gh);
        }
        double ce = ce_sum / static_cast<double>(order.size());
        if (!std::isfinite(ce))
            throw DivergenceError(
                strfmt("train_external_mlp: non-finite loss at epoch %d", epoch + 1));
        out.ce_trace.push_back(ce);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear (softmax) head on fixed input vectors, same SGD settings.

struct HeadConfig {
    double learning_rate = 0.01;
    double weight_decay = 0.0005;
    int epochs = 30;
    int batch_size = 32;
    uint64_t seed = 0;

    void validate() const {
        if (learning_rate <= 0.0) throw ValidationError("head.learning_rate must be positive");
        if (weight_decay < 0.0) throw ValidationError("head.weight_decay must be >= 0");
        if (epochs < 1) throw ValidationError("head.epochs must be >= 1");
        if (batch_size < 1) throw ValidationError("head.batch_size must be >= 1");
    }
};

struct HeadTrainResult {
    DenseLayer head;
    std::vector<double> ce_trace;
};

inline HeadTrainResult train_linear_head(const std::vector<std::vector<double>>& inputs,
                                         const std::vector<int>& labels,
                                         const HeadConfig& config) {
    config.validate();
    if (inputs.empty() || inputs.size() != labels.size())
        throw TrainingError("train_linear_head: need equally many inputs and labels");
    int pos = std::accumulate(labels.begin(), labels.end(), 0);
    if (pos == 0 || pos == static_cast<int>(labels.size()))
        throw TrainingError("train_linear_head: single-class labels");
    int in_dim = static_cast<int>(inputs[0].size());

    HeadTrainResult out;
    out.head.in_dim = in_dim;
    out.head.out_dim = 2;
    out.head.resize();
    RngStream init = RngStream::derived(config.seed, StreamTag::head, 0);
    double sd = std::sqrt(2.0 / in_dim);
    for (double& v : out.head.w) v = init.normal(0.0, sd);

    DenseLayer grad = out.head;
    std::vector<int> order(inputs.size());
    std::vector<double> z, probs, dz;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        RngStream shuffle_rng = RngStream::derived(config.seed, StreamTag::head, 1 + epoch);
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);
        double ce_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += config.batch_size) {
            size_t stop = std::min(order.size(), start + config.batch_size);
            std::fill(grad.w.begin(), grad.w.end(), 0.0);
            std::fill(grad.b.begin(), grad.b.end(), 0.0);
            for (size_t t = start; t < stop; ++t) {
                int i = order[t];
                detail::dense_forward(inputs[i], out.head, z);
                ce_sum += detail::softmax_ce(z, labels[i], probs);
                dz = probs;
                dz[labels[i]] -= 1.0;
                detail::dense_backward(inputs[i], out.head, dz, grad, nullptr);
            }
            double inv = 1.0 / static_cast<double>(stop - start);
            for (size_t i = 0; i < out.head.w.size(); ++i)
                out.head.w[i] -=
                    config.learning_rate * (grad.w[i] * inv + config.weight_decay * out.head.w[i]);
            for (size_t i = 0; i < out.head.b.size(); ++i)
                out.head.b[i] -= config.learning_rate * grad.b[i] * inv;
        }
        double ce = ce_sum / static_cast<double>(order.size());
        if (!std::isfinite(ce))
            throw DivergenceError(strfmt("train_linear_head: non-finite loss at epoch %d", epoch + 1));
        out.ce_trace.push_back(ce);
    }
    return out;
}

inline double head_probability(const DenseLayer& head, const std::vector<double>& input) {
    std::vector<double> z, probs;
    detail::dense_forward(input, head, z);
    detail::softmax_ce(z, 0, probs);  // label irrelevant, we only need probs
    return probs[1];
}

// ---------------------------------------------------------------------------
// Fused pipeline training.

struct FusedConfig {
    Preset preset = Preset::small;
    int embed_dim = 32;
    int k = 16;
    int rounds = 2;
    double align_weight = 0.5;
    double head_mask = 0.5;      // field drop rate for the head's mask-learning views
    bool use_alignment = true;   // off: image branch trains with lambda = 0
    bool use_refinement = true;  // off: head consumes concat(z_image, z_external)
    TrainConfig encoder_train;   // align_weight and seed are filled by train_fused
    MlpConfig external_train;    // embed_dim and seed are filled by train_fused
    HeadConfig head_train;       // seed is filled by train_fused
    uint64_t seed = 0;

    void validate() const {
        if (embed_dim < 1) throw ValidationError("fusion.embed_dim must be >= 1");
        if (k < 1 || k > embed_dim) throw ValidationError("fusion.k must be in [1, embed_dim]");
        if (rounds < 1) throw ValidationError("fusion.rounds must be >= 1");
        if (!std::isfinite(align_weight) || align_weight < 0.0)
            throw ValidationError("fusion.align_weight must be finite and >= 0");
        if (head_mask < 0.0 || head_mask >= 1.0)
            throw ValidationError("fusion.head_mask must be in [0,1)");
        encoder_train.validate();
        external_train.validate();
        head_train.validate();
    }
};

struct FusedModel {
    FusedConfig config;
    Mlp external;
    EncoderModel image;
    RefineStack refine_stack;  // rounds == 0 when refinement is off
    DenseLayer head;

    std::vector<double> image_embedding(const Image& img) const {
        return forward(image, img).first;
    }
    std::vector<double> external_embedding(const FeatureVector& fv) const {
        return external.embedding(fv);
    }
    double image_probability(const Image& img) const {
        std::vector<double> probs;
        detail::softmax_ce(forward(image, img).second, 0, probs);
        return probs[1];
    }
    std::vector<double> fused_input(const std::vector<double>& z_image,
                                    const std::vector<double>& z_external) const {
        if (refine_stack.rounds > 0) return refine(z_image, z_external, refine_stack);
        std::vector<double> cat = z_image;
        cat.insert(cat.end(), z_external.begin(), z_external.end());
        return cat;
    }
    double fused_probability(const Image& img, const FeatureVector& fv) const {
        return head_probability(head, fused_input(image_embedding(img), external_embedding(fv)));
    }
};

struct FusedTrainResult {
    FusedModel model;
    std::vector<double> stage1_ce;
    TrainTrace stage2;
    std::vector<double> stage4_ce;
    std::vector<std::vector<double>> train_image_embeddings;
    std::vector<std::vector<double>> train_external_embeddings;
};

namespace detail {

template <typename F>
auto fused_stage(const char* name, F&& f) {
    try {
        return f();
    } catch (const Error& e) {
        throw TrainingError(std::string(name) + ": " + e.what());
    }
}

}  // namespace detail

inline FusedTrainResult train_fused(const std::vector<Image>& images,
                                    const std::vector<FeatureVector>& features,
                                    const std::vector<int>& labels, const FusedConfig& config_in) {
    FusedConfig config = config_in;
    config.validate();
    if (images.size() != features.size() || images.size() != labels.size())
        throw TrainingError("train_fused: images, features and labels must align");

    FusedTrainResult out;
    out.model.config = config;

    // Stage 1: external branch.
    MlpConfig ext_cfg = config.external_train;
    ext_cfg.embed_dim = config.embed_dim;
    ext_cfg.seed = derive_seed(config.seed, StreamTag::external_init);
    detail::fused_stage("stage 1 (external branch)", [&] {
        MlpTrainResult r = train_external_mlp(features, labels, ext_cfg);
        out.model.external = std::move(r.model);
        out.stage1_ce = std::move(r.ce_trace);
        return 0;
    });

    out.train_external_embeddings.reserve(features.size());
    for (const auto& fv : features)
        out.train_external_embeddings.push_back(out.model.external.embedding(fv));

    // Stage 2: image branch, aligned toward the frozen external embeddings.
    TrainConfig enc_cfg = config.encoder_train;
    enc_cfg.align_weight = config.use_alignment ? config.align_weight : 0.0;
    enc_cfg.seed = derive_seed(config.seed, StreamTag::encoder_init);
    detail::fused_stage("stage 2 (image branch)", [&] {
        EncoderTrainResult r = train_encoder(images, labels, config.preset, enc_cfg,
                                             &out.train_external_embeddings, config.embed_dim);
        out.model.image = std::move(r.model);
        out.stage2 = std::move(r.trace);
        return 0;
    });

    out.train_image_embeddings.reserve(images.size());
    for (const auto& img : images)
        out.train_image_embeddings.push_back(forward(out.model.image, img).first);

    // Stage 3: refinement projections.
    std::vector<std::vector<double>> head_inputs;
    if (config.use_refinement) {
        detail::fused_stage("stage 3 (refinement)", [&] {
            RefineFitResult r = fit_refine(out.train_image_embeddings,
                                           out.train_external_embeddings, config.rounds, config.k);
            out.model.refine_stack = std::move(r.stack);
            head_inputs = std::move(r.train_refined);
            return 0;
        });
    } else {
        out.model.refine_stack = RefineStack{};
        head_inputs.reserve(images.size());
        for (size_t i = 0; i < images.size(); ++i)
            head_inputs.push_back(
                out.model.fused_input(out.train_image_embeddings[i],
                                      out.train_external_embeddings[i]));
    }

    // Stage 4: logistic head on the fused vectors. Mask learning reappears
    // here: every sample also contributes a view whose external fields are
    // dropped at head_mask before embedding, so the head keeps weight on the
    // image coordinates and degrades gracefully when external data is
    // missing downstream. View vectors go through the same frozen projections.
    HeadConfig head_cfg = config.head_train;
    head_cfg.seed = derive_seed(config.seed, StreamTag::head);
    std::vector<int> head_labels = labels;
    if (config.head_mask > 0.0) {
        RngStream view_rng = RngStream::derived(head_cfg.seed, StreamTag::mask_learning);
        for (size_t i = 0; i < features.size(); ++i) {
            FeatureVector view = features[i];
            for (size_t j = 0; j < view.values.size(); ++j)
                if (view_rng.uniform() < config.head_mask) {
                    view.values[j] = 0.0;
                    view.missing[j] = 1;
                }
            head_inputs.push_back(out.model.fused_input(out.train_image_embeddings[i],
                                                        out.model.external.embedding(view)));
            head_labels.push_back(labels[i]);
        }
    }
    detail::fused_stage("stage 4 (fused head)", [&] {
        HeadTrainResult r = train_linear_head(head_inputs, head_labels, head_cfg);
        out.model.head = std::move(r.head);
        out.stage4_ce = std::move(r.ce_trace);
        return 0;
    });
    return out;
}

}  // namespace oanet
