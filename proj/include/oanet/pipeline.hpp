#pragma once

// End-to-end wiring at desk scale. A prepared corpus (half-resolution encoder
// inputs plus OCR'd parameter records) feeds per-cell training of either the
// plain image baseline or the three-member ensemble (image head, external
// bag, fused head), which is then evaluated under optional test-time
// perturbations with KL-gated member weighting.

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "encoder.hpp"
#include "fusion.hpp"
#include "gate.hpp"
#include "image.hpp"
#include "metrics.hpp"
#include "ocr.hpp"
#include "rng.hpp"
#include "tabular.hpp"

namespace oanet {

// One shared knob set for the whole run. The single TrainConfig drives every
// SGD stage (image encoder, external MLP, fused head); only the seeds and the
// alignment weight differ per stage, and those are filled in per cell.
// Pipeline training defaults to batch 16: at the stock learning rate the
// image branch needs the extra SGD steps to pick up the narrow text cue.
inline TrainConfig pipeline_train_defaults() {
    TrainConfig t;
    t.batch_size = 16;
    return t;
}

struct PipelineConfig {
    CorpusSpec corpus;
    double ocr_threshold = 0.8;
    BagConfig bag;
    Preset preset = Preset::small;
    TrainConfig encoder_train = pipeline_train_defaults();
    int embed_dim = 32;
    int k = 16;
    int rounds = 2;
    double align_weight = 0.5;
    double gate_beta = 1.0;
    double gate_tau = 5.0;
    double split_ratio = 0.7;
    int folds = 5;
    int repeats = 5;
    uint64_t seed = 0;
    std::string out_dir = "out";

    // Repeats re-split and re-train with consecutive seeds.
    uint64_t repeat_seed(int repeat) const { return seed + static_cast<uint64_t>(repeat); }

    void validate() const {
        corpus.validate();
        if (!(ocr_threshold >= 0.0 && ocr_threshold <= 1.0))
            throw ValidationError("ocr.threshold must be in [0,1]");
        bag.validate();
        encoder_train.validate();
        if (embed_dim < 1) throw ValidationError("fusion.embed_dim must be >= 1");
        if (k < 1 || k > embed_dim) throw ValidationError("fusion.k must be in [1, embed_dim]");
        if (rounds < 1) throw ValidationError("fusion.rounds must be >= 1");
        if (!std::isfinite(align_weight) || align_weight < 0.0)
            throw ValidationError("fusion.align_weight must be finite and >= 0");
        if (!std::isfinite(gate_beta) || gate_beta < 0.0)
            throw ValidationError("gate.beta must be finite and >= 0");
        if (!(gate_tau > 0.0)) throw ValidationError("gate.tau must be positive");
        if (!(split_ratio > 0.0 && split_ratio < 1.0))
            throw ValidationError("eval.split_ratio must be in (0,1)");
        if (folds < 2) throw ValidationError("eval.folds must be >= 2");
        if (repeats < 1) throw ValidationError("eval.repeats must be >= 1");
    }
};

// One grid row: progressive inclusion of the three contributions. The all-off
// row is the plain image encoder with no ensemble around it.
struct PipelineToggles {
    bool alignment = false;
    bool refinement = false;
    bool gate = false;

    bool baseline() const { return !alignment && !refinement && !gate; }
};

inline constexpr std::array<PipelineToggles, 4> kAblationRows{{
    {false, false, false},
    {true, false, false},
    {true, true, false},
    {true, true, true},
}};

inline std::string row_name(const PipelineToggles& t) {
    if (t.baseline()) return "baseline";
    std::string s;
    if (t.alignment) s += "align";
    if (t.refinement) s += s.empty() ? "refine" : "_refine";
    if (t.gate) s += s.empty() ? "gate" : "_gate";
    return s;
}

// ---------------------------------------------------------------------------
// Corpus preparation. OCR and downsampling are deterministic, so both run
// once per corpus and the result is shared read-only by every cell.

struct PipelineData {
    std::vector<Image> images;         // encoder inputs, half resolution
    std::vector<ParamRecord> records;  // OCR readings of the original renders
    std::vector<int> labels;           // 1 = defect
    Rect object_region{0, 0, 0, 0};    // in encoder-input coordinates

    int n() const { return static_cast<int>(labels.size()); }
};

inline PipelineData prepare_data(const std::vector<SyntheticSample>& samples,
                                 const CorpusSpec& spec, double ocr_threshold = 0.8) {
    if (samples.empty()) throw InputError("prepare_data: empty corpus");
    GlyphAtlas atlas(spec.glyph_scale);
    PipelineData d;
    d.images.reserve(samples.size());
    d.records.reserve(samples.size());
    d.labels.reserve(samples.size());
    for (const SyntheticSample& s : samples) {
        d.images.push_back(downsample2(s.image));
        d.records.push_back(extract_params(s, atlas, spec, ocr_threshold));
        d.labels.push_back(s.label == Label::defect ? 1 : 0);
    }
    d.object_region = Rect{spec.object_region.x / 2, spec.object_region.y / 2,
                           spec.object_region.w / 2, spec.object_region.h / 2};
    return d;
}

// ---------------------------------------------------------------------------
// Cell training.

struct EnsembleModel {
    StandardizerStats standardizer;
    BagModel bag;
    FusedModel fused;
    GateState gate;
};

namespace detail {

template <typename T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<int>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(v[static_cast<size_t>(i)]);
    return out;
}

}  // namespace detail

// The baseline is trained exactly like stage 2 of the ensemble with the
// alignment term removed, so baseline-vs-ensemble comparisons isolate the
// contributions rather than the seeding.
inline EncoderModel train_baseline_encoder(const PipelineData& data,
                                           const std::vector<int>& train_idx,
                                           const PipelineConfig& cfg, uint64_t cell_seed) {
    TrainConfig tc = cfg.encoder_train;
    tc.align_weight = 0.0;
    tc.seed = derive_seed(cell_seed, StreamTag::encoder_init);
    return train_encoder(detail::gather(data.images, train_idx),
                         detail::gather(data.labels, train_idx), cfg.preset, tc, nullptr,
                         cfg.embed_dim)
        .model;
}

inline FusedConfig fused_config_for(const PipelineConfig& cfg, const PipelineToggles& t,
                                    uint64_t cell_seed) {
    FusedConfig fc;
    fc.preset = cfg.preset;
    fc.embed_dim = cfg.embed_dim;
    fc.k = cfg.k;
    fc.rounds = cfg.rounds;
    fc.align_weight = cfg.align_weight;
    fc.use_alignment = t.alignment;
    fc.use_refinement = t.refinement;
    fc.encoder_train = cfg.encoder_train;
    fc.external_train.embed_dim = cfg.embed_dim;
    fc.external_train.learning_rate = cfg.encoder_train.learning_rate;
    fc.external_train.weight_decay = cfg.encoder_train.weight_decay;
    fc.external_train.epochs = cfg.encoder_train.epochs;
    fc.external_train.batch_size = cfg.encoder_train.batch_size;
    fc.head_train.learning_rate = cfg.encoder_train.learning_rate;
    fc.head_train.weight_decay = cfg.encoder_train.weight_decay;
    fc.head_train.epochs = cfg.encoder_train.epochs;
    fc.head_train.batch_size = cfg.encoder_train.batch_size;
    fc.seed = cell_seed;
    return fc;
}

inline EnsembleModel train_ensemble(const PipelineData& data, const std::vector<int>& train_idx,
                                    const PipelineConfig& cfg, const PipelineToggles& t,
                                    uint64_t cell_seed) {
    EnsembleModel m;
    std::vector<ParamRecord> records = detail::gather(data.records, train_idx);
    std::vector<int> labels = detail::gather(data.labels, train_idx);
    m.standardizer = fit_standardizer(records);
    std::vector<FeatureVector> fvs;
    fvs.reserve(records.size());
    for (const ParamRecord& r : records) fvs.push_back(featurize(r, m.standardizer));

    BagConfig bc = cfg.bag;
    bc.seed = cell_seed;
    m.bag = train_intra_bag(FeatureMatrix::from(fvs), labels, bc);

    FusedTrainResult fr = train_fused(detail::gather(data.images, train_idx), fvs, labels,
                                      fused_config_for(cfg, t, cell_seed));
    m.fused = std::move(fr.model);
    // The gate is fit regardless of the toggle: it is cheap, and the saved
    // bundle stays uniform so `predict` always has divergence statistics.
    m.gate = fit_gate(fr.train_image_embeddings, fr.train_external_embeddings, cfg.gate_beta,
                      cfg.gate_tau);
    return m;
}

// ---------------------------------------------------------------------------
// Test-time perturbations. Per-sample streams are keyed by corpus index, so a
// given sample draws the same mask in every row and scenario of one repeat.

struct Perturbation {
    double missing_rate = 0.0;  // 0: records pass through unchanged
    bool grid = false;
    GridMaskConfig grid_cfg;  // region defaults to the full encoder input

    bool clean() const { return missing_rate == 0.0 && !grid; }
};

inline Image perturbed_image(const PipelineData& d, int i, const Perturbation& p,
                             uint64_t eval_seed) {
    if (!p.grid) return d.images[static_cast<size_t>(i)];
    const Image& img = d.images[static_cast<size_t>(i)];
    Rect region = grid_region(p.grid_cfg.region, img.width(), img.height(), d.object_region);
    RngStream rng = RngStream::derived(eval_seed, StreamTag::perturb_grid,
                                       static_cast<uint64_t>(i));
    return grid_mask(img, p.grid_cfg, region, rng);
}

inline ParamRecord perturbed_record(const PipelineData& d, int i, const Perturbation& p,
                                    uint64_t eval_seed) {
    if (p.missing_rate <= 0.0) return d.records[static_cast<size_t>(i)];
    RngStream rng = RngStream::derived(eval_seed, StreamTag::perturb_missing,
                                       static_cast<uint64_t>(i));
    return inject_missing(d.records[static_cast<size_t>(i)], p.missing_rate, rng);
}

// ---------------------------------------------------------------------------
// Evaluation. Ties at 0.5 count as defect: missing a defect is the costlier
// error here.

inline double defect_probability(const EncoderModel& m, const Image& img) {
    std::vector<double> probs;
    detail::softmax_ce(forward(m, img).second, 0, probs);
    return probs[1];
}

inline GateDecision uniform_gate() {
    GateDecision g;
    for (int m = 0; m < kNumMembers; ++m) {
        g.weights[static_cast<size_t>(m)] = 1.0 / kNumMembers;
        g.active[static_cast<size_t>(m)] = true;
    }
    return g;
}

struct EvalOutcome {
    ConfusionCounts counts;
    MetricsResult metrics;
    GateDecision gate;  // uniform for baseline rows and ungated ensembles
};

inline EvalOutcome evaluate_baseline(const EncoderModel& m, const PipelineData& d,
                                     const std::vector<int>& test_idx, const Perturbation& p,
                                     uint64_t eval_seed) {
    if (test_idx.empty()) throw InputError("evaluate_baseline: empty test set");
    ConfusionCounts c;
    for (int i : test_idx)
        c.add(defect_probability(m, perturbed_image(d, i, p, eval_seed)) >= 0.5,
              d.labels[static_cast<size_t>(i)] == 1);
    return {c, metrics(c), uniform_gate()};
}

// Batch mode: member weights come from the divergence of the whole evaluation
// batch, then apply to every sample in it.
inline EvalOutcome evaluate_ensemble(const EnsembleModel& m, const PipelineData& d,
                                     const std::vector<int>& test_idx, const PipelineToggles& t,
                                     const Perturbation& p, uint64_t eval_seed) {
    if (test_idx.empty()) throw InputError("evaluate_ensemble: empty test set");
    std::vector<std::vector<double>> z_img, z_ext;
    std::vector<std::array<double, kNumMembers>> member_probs;
    z_img.reserve(test_idx.size());
    z_ext.reserve(test_idx.size());
    member_probs.reserve(test_idx.size());

    for (int i : test_idx) {
        Image img = perturbed_image(d, i, p, eval_seed);
        FeatureVector fv = featurize(perturbed_record(d, i, p, eval_seed), m.standardizer);
        auto [embed, logits] = forward(m.fused.image, img);
        std::vector<double> probs;
        detail::softmax_ce(logits, 0, probs);
        std::vector<double> ze = m.fused.external_embedding(fv);

        std::array<double, kNumMembers> mp{};
        mp[static_cast<size_t>(Member::image_head)] = probs[1];
        mp[static_cast<size_t>(Member::external_bag)] = m.bag.predict_prob(fv);
        mp[static_cast<size_t>(Member::fused_head)] =
            head_probability(m.fused.head, m.fused.fused_input(embed, ze));
        member_probs.push_back(mp);
        z_img.push_back(std::move(embed));
        z_ext.push_back(std::move(ze));
    }

    GateDecision g = t.gate ? gate_weights(m.gate, z_img, z_ext) : uniform_gate();
    ConfusionCounts c;
    for (size_t j = 0; j < member_probs.size(); ++j)
        c.add(fuse_predictions(member_probs[j], g).defect,
              d.labels[static_cast<size_t>(test_idx[j])] == 1);
    return {c, metrics(c), g};
}

// Single-sample inference: the batch KL is unavailable, so the gate falls
// back to the per-sample variance-ratio surrogate.
inline FusedPrediction predict_single(const EnsembleModel& m, const Image& input,
                                      const ParamRecord& record) {
    FeatureVector fv = featurize(record, m.standardizer);
    auto [embed, logits] = forward(m.fused.image, input);
    std::vector<double> probs;
    detail::softmax_ce(logits, 0, probs);
    std::vector<double> ze = m.fused.external_embedding(fv);

    std::array<double, kNumMembers> mp{};
    mp[static_cast<size_t>(Member::image_head)] = probs[1];
    mp[static_cast<size_t>(Member::external_bag)] = m.bag.predict_prob(fv);
    mp[static_cast<size_t>(Member::fused_head)] =
        head_probability(m.fused.head, m.fused.fused_input(embed, ze));
    return fuse_predictions(mp, gate_weights_single(m.gate, embed, ze));
}

// ---------------------------------------------------------------------------
// One experiment cell = train on a split, evaluate under a perturbation.

struct TrainedCell {
    PipelineToggles toggles;
    EncoderModel baseline;   // valid when toggles.baseline()
    EnsembleModel ensemble;  // valid otherwise
};

inline TrainedCell train_cell(const PipelineData& data, const std::vector<int>& train_idx,
                              const PipelineConfig& cfg, const PipelineToggles& t,
                              uint64_t cell_seed) {
    TrainedCell cell;
    cell.toggles = t;
    if (t.baseline())
        cell.baseline = train_baseline_encoder(data, train_idx, cfg, cell_seed);
    else
        cell.ensemble = train_ensemble(data, train_idx, cfg, t, cell_seed);
    return cell;
}

inline EvalOutcome evaluate_cell(const TrainedCell& cell, const PipelineData& data,
                                 const std::vector<int>& test_idx, const Perturbation& p,
                                 uint64_t eval_seed) {
    if (cell.toggles.baseline())
        return evaluate_baseline(cell.baseline, data, test_idx, p, eval_seed);
    return evaluate_ensemble(cell.ensemble, data, test_idx, cell.toggles, p, eval_seed);
}

}  // namespace oanet
