#pragma once

// Image branch: small convolutional encoders (three capacity presets) with
// hand-written forward/backward passes, SGD training with optional cosine
// alignment against frozen external embeddings, a finite-difference gradient
// checker, and the grid-mask perturbation.
//
// Everything runs in double precision with fixed iteration orders; training
// is bit-reproducible for a fixed (data order, seed).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "oanet/align.hpp"
#include "oanet/common.hpp"
#include "oanet/image.hpp"
#include "oanet/rng.hpp"

namespace oanet {

// ---------------------------------------------------------------------------
// Tensors (row-major, channel-last: index = (y*w + x)*c + ch).

struct Tensor {
    int h = 0, w = 0, c = 0;
    std::vector<double> data;

    static Tensor zeros(int h, int w, int c) {
        Tensor t;
        t.h = h;
        t.w = w;
        t.c = c;
        t.data.assign(static_cast<size_t>(h) * w * c, 0.0);
        return t;
    }
    double& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const {
        return data[(static_cast<size_t>(y) * w + x) * c + ch];
    }
    size_t size() const { return data.size(); }
};

inline Tensor image_to_tensor(const Image& img) {
    Tensor t = Tensor::zeros(img.height(), img.width(), 1);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) t.at(y, x, 0) = img.at(y, x);
    return t;
}

// ---------------------------------------------------------------------------
// Layers. Weight layout: conv w[co][ky][kx][ci], dense w[out][in].

struct ConvLayer {
    int ksize = 3;
    int in_ch = 0;
    int out_ch = 0;
    std::vector<double> w;
    std::vector<double> b;

    void resize() {
        w.assign(static_cast<size_t>(out_ch) * ksize * ksize * in_ch, 0.0);
        b.assign(out_ch, 0.0);
    }
};

struct DenseLayer {
    int in_dim = 0;
    int out_dim = 0;
    std::vector<double> w;
    std::vector<double> b;

    void resize() {
        w.assign(static_cast<size_t>(out_dim) * in_dim, 0.0);
        b.assign(out_dim, 0.0);
    }
};

namespace detail {

// Same-size convolution with zero padding (ksize-1)/2.
inline void conv_forward(const Tensor& in, const ConvLayer& L, Tensor& out) {
    int pad = (L.ksize - 1) / 2;
    out = Tensor::zeros(in.h, in.w, L.out_ch);
    for (int y = 0; y < in.h; ++y) {
        for (int x = 0; x < in.w; ++x) {
            double* orow = &out.data[(static_cast<size_t>(y) * in.w + x) * L.out_ch];
            for (int co = 0; co < L.out_ch; ++co) {
                double acc = L.b[co];
                const double* wco =
                    &L.w[static_cast<size_t>(co) * L.ksize * L.ksize * L.in_ch];
                for (int ky = 0; ky < L.ksize; ++ky) {
                    int yy = y + ky - pad;
                    if (yy < 0 || yy >= in.h) continue;
                    for (int kx = 0; kx < L.ksize; ++kx) {
                        int xx = x + kx - pad;
                        if (xx < 0 || xx >= in.w) continue;
                        const double* irow =
                            &in.data[(static_cast<size_t>(yy) * in.w + xx) * L.in_ch];
                        const double* wrow = wco + (static_cast<size_t>(ky) * L.ksize + kx) * L.in_ch;
                        for (int ci = 0; ci < L.in_ch; ++ci) acc += irow[ci] * wrow[ci];
                    }
                }
                orow[co] = acc;
            }
        }
    }
}

// Accumulates weight/bias gradients and (if din) input gradients.
inline void conv_backward(const Tensor& in, const ConvLayer& L, const Tensor& dout,
                          ConvLayer& grad, Tensor* din) {
    int pad = (L.ksize - 1) / 2;
    if (din) *din = Tensor::zeros(in.h, in.w, L.in_ch);
    for (int y = 0; y < in.h; ++y) {
        for (int x = 0; x < in.w; ++x) {
            const double* drow = &dout.data[(static_cast<size_t>(y) * in.w + x) * L.out_ch];
            for (int co = 0; co < L.out_ch; ++co) {
                double d = drow[co];
                if (d == 0.0) continue;
                grad.b[co] += d;
                double* gco = &grad.w[static_cast<size_t>(co) * L.ksize * L.ksize * L.in_ch];
                const double* wco =
                    &L.w[static_cast<size_t>(co) * L.ksize * L.ksize * L.in_ch];
                for (int ky = 0; ky < L.ksize; ++ky) {
                    int yy = y + ky - pad;
                    if (yy < 0 || yy >= in.h) continue;
                    for (int kx = 0; kx < L.ksize; ++kx) {
                        int xx = x + kx - pad;
                        if (xx < 0 || xx >= in.w) continue;
                        const double* irow =
                            &in.data[(static_cast<size_t>(yy) * in.w + xx) * L.in_ch];
                        size_t woff = (static_cast<size_t>(ky) * L.ksize + kx) * L.in_ch;
                        double* grow = gco + woff;
                        for (int ci = 0; ci < L.in_ch; ++ci) grow[ci] += d * irow[ci];
                        if (din) {
                            double* dirow =
                                &din->data[(static_cast<size_t>(yy) * in.w + xx) * L.in_ch];
                            const double* wrow = wco + woff;
                            for (int ci = 0; ci < L.in_ch; ++ci) dirow[ci] += d * wrow[ci];
                        }
                    }
                }
            }
        }
    }
}

// 2x2 max pool, stride 2; ties pick the first element in (y,x) scan order.
inline void maxpool2_forward(const Tensor& in, Tensor& out, std::vector<int>& argmax) {
    if (in.h % 2 != 0 || in.w % 2 != 0) throw InputError("maxpool2: odd input dimensions");
    out = Tensor::zeros(in.h / 2, in.w / 2, in.c);
    argmax.assign(out.size(), 0);
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            for (int ch = 0; ch < in.c; ++ch) {
                double best = -1e300;
                int best_idx = 0;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        int idx = ((2 * y + dy) * in.w + (2 * x + dx)) * in.c + ch;
                        if (in.data[idx] > best) {
                            best = in.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                size_t oidx = (static_cast<size_t>(y) * out.w + x) * out.c + ch;
                out.data[oidx] = best;
                argmax[oidx] = best_idx;
            }
        }
    }
}

inline void maxpool2_backward(const Tensor& dout, const std::vector<int>& argmax, Tensor& din) {
    std::fill(din.data.begin(), din.data.end(), 0.0);
    for (size_t i = 0; i < dout.size(); ++i) din.data[argmax[i]] += dout.data[i];
}

inline void relu_forward(const Tensor& in, Tensor& out) {
    out = in;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
}

// din = dout gated by the sign of the pre-activation.
inline void relu_backward(const Tensor& pre, Tensor& d) {
    for (size_t i = 0; i < d.data.size(); ++i)
        if (pre.data[i] <= 0.0) d.data[i] = 0.0;
}

inline void dense_forward(const std::vector<double>& in, const DenseLayer& L,
                          std::vector<double>& out) {
    out.assign(L.out_dim, 0.0);
    for (int o = 0; o < L.out_dim; ++o) {
        double acc = L.b[o];
        const double* wrow = &L.w[static_cast<size_t>(o) * L.in_dim];
        for (int i = 0; i < L.in_dim; ++i) acc += wrow[i] * in[i];
        out[o] = acc;
    }
}

inline void dense_backward(const std::vector<double>& in, const DenseLayer& L,
                           const std::vector<double>& dout, DenseLayer& grad,
                           std::vector<double>* din) {
    if (din) din->assign(L.in_dim, 0.0);
    for (int o = 0; o < L.out_dim; ++o) {
        double d = dout[o];
        grad.b[o] += d;
        double* grow = &grad.w[static_cast<size_t>(o) * L.in_dim];
        const double* wrow = &L.w[static_cast<size_t>(o) * L.in_dim];
        for (int i = 0; i < L.in_dim; ++i) {
            grow[i] += d * in[i];
            if (din) (*din)[i] += d * wrow[i];
        }
    }
}

inline double softmax_ce(const std::vector<double>& logits, int label,
                         std::vector<double>& probs) {
    double m = *std::max_element(logits.begin(), logits.end());
    probs.assign(logits.size(), 0.0);
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp(logits[i] - m);
        sum += probs[i];
    }
    for (double& p : probs) p /= sum;
    return -std::log(std::max(probs[label], 1e-300));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder presets.

enum class Preset { tiny, small, base };

inline const char* to_string(Preset p) {
    switch (p) {
        case Preset::tiny: return "tiny";
        case Preset::small: return "small";
        case Preset::base: return "base";
    }
    return "?";
}

inline Preset preset_from_string(const std::string& s) {
    if (s == "tiny") return Preset::tiny;
    if (s == "small") return Preset::small;
    if (s == "base") return Preset::base;
    throw ValidationError("unknown preset '" + s + "' (expected tiny|small|base)");
}

// tiny: 2 conv stages; small: 3; base: 3 + a residual block (3x3 conv with a
// 1x1 projection shortcut, ReLU after the add) followed by one more pool.
// Every conv stage is conv3x3 -> ReLU -> maxpool2. Channel means over the
// final map (global average pooling) feed fc_embed; the embedding is its
// linear output (penultimate layer) and fc_logits maps it to 2. Averaging
// the map means occlusion shrinks activation mass rather than presenting
// position-specific holes, so logit margins contract toward the class prior
// instead of wandering.
struct EncoderModel {
    Preset preset = Preset::small;
    int input_size = 64;
    int embedding_dim = 32;
    std::vector<ConvLayer> convs;
    bool has_residual = false;
    ConvLayer res_conv;  // 3x3, last stage channels -> 2x
    ConvLayer res_proj;  // 1x1 shortcut
    DenseLayer fc_embed;
    DenseLayer fc_logits;

    int stages() const { return static_cast<int>(convs.size()) + (has_residual ? 1 : 0); }
    int final_side() const { return input_size >> stages(); }
    int final_channels() const {
        return has_residual ? res_conv.out_ch : convs.back().out_ch;
    }
    int flat_dim() const { return final_side() * final_side() * final_channels(); }
};

inline EncoderModel make_encoder(Preset preset, uint64_t seed, int input_size = 64,
                                 int embedding_dim = 32) {
    int n_stages = preset == Preset::tiny ? 2 : 3;
    bool residual = preset == Preset::base;
    int total_pools = n_stages + (residual ? 1 : 0);
    if (input_size < (1 << total_pools) || input_size % (1 << total_pools) != 0)
        throw ValidationError(strfmt("input_size %d is not divisible by 2^%d pooling stages",
                                     input_size, total_pools));
    if (embedding_dim < 1) throw ValidationError("embedding_dim must be positive");

    EncoderModel m;
    m.preset = preset;
    m.input_size = input_size;
    m.embedding_dim = embedding_dim;
    m.has_residual = residual;

    static constexpr int kChannels[] = {8, 16, 32};
    int in_ch = 1;
    for (int s = 0; s < n_stages; ++s) {
        ConvLayer L;
        L.ksize = 3;
        L.in_ch = in_ch;
        L.out_ch = kChannels[s];
        L.resize();
        m.convs.push_back(std::move(L));
        in_ch = kChannels[s];
    }
    if (residual) {
        m.res_conv.ksize = 3;
        m.res_conv.in_ch = in_ch;
        m.res_conv.out_ch = in_ch * 2;
        m.res_conv.resize();
        m.res_proj.ksize = 1;
        m.res_proj.in_ch = in_ch;
        m.res_proj.out_ch = in_ch * 2;
        m.res_proj.resize();
    }
    m.fc_embed.in_dim = m.flat_dim();
    m.fc_embed.out_dim = embedding_dim;
    m.fc_embed.resize();
    m.fc_logits.in_dim = embedding_dim;
    m.fc_logits.out_dim = 2;
    m.fc_logits.resize();

    // He init, biases zero. Draw order: conv stages, residual pair, fc pair.
    RngStream rng = RngStream::derived(seed, StreamTag::encoder_init);
    auto he_conv = [&](ConvLayer& L) {
        double sd = std::sqrt(2.0 / (L.ksize * L.ksize * L.in_ch));
        for (double& v : L.w) v = rng.normal(0.0, sd);
    };
    auto he_dense = [&](DenseLayer& L) {
        double sd = std::sqrt(2.0 / L.in_dim);
        for (double& v : L.w) v = rng.normal(0.0, sd);
    };
    for (auto& L : m.convs) he_conv(L);
    if (residual) {
        he_conv(m.res_conv);
        he_conv(m.res_proj);
    }
    he_dense(m.fc_embed);
    he_dense(m.fc_logits);
    return m;
}

// Gradient holder with the same shapes as the model.
struct EncoderGrads {
    std::vector<ConvLayer> convs;
    ConvLayer res_conv, res_proj;
    DenseLayer fc_embed, fc_logits;

    static EncoderGrads like(const EncoderModel& m) {
        EncoderGrads g;
        g.convs = m.convs;
        g.res_conv = m.res_conv;
        g.res_proj = m.res_proj;
        g.fc_embed = m.fc_embed;
        g.fc_logits = m.fc_logits;
        g.zero();
        return g;
    }
    void zero() {
        auto z = [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); };
        for (auto& L : convs) {
            z(L.w);
            z(L.b);
        }
        z(res_conv.w);
        z(res_conv.b);
        z(res_proj.w);
        z(res_proj.b);
        z(fc_embed.w);
        z(fc_embed.b);
        z(fc_logits.w);
        z(fc_logits.b);
    }
};

// ---------------------------------------------------------------------------
// Forward / backward.

struct Activations {
    Tensor input;
    std::vector<Tensor> conv_pre;   // pre-ReLU output per conv stage
    std::vector<Tensor> pooled;     // post ReLU+pool per conv stage
    std::vector<std::vector<int>> pool_arg;
    Tensor res_pre;                 // pre-ReLU sum of res_conv + res_proj
    Tensor res_pooled;
    std::vector<int> res_arg;
    std::vector<double> flat;
    std::vector<double> embedding;
    std::vector<double> logits;
};

inline void forward(const EncoderModel& m, const Image& img, Activations& acts) {
    if (img.height() != m.input_size || img.width() != m.input_size)
        throw InputError(strfmt("forward: expected %dx%d input, got %dx%d", m.input_size,
                                m.input_size, img.height(), img.width()));
    acts.input = image_to_tensor(img);
    acts.conv_pre.resize(m.convs.size());
    acts.pooled.resize(m.convs.size());
    acts.pool_arg.resize(m.convs.size());

    const Tensor* cur = &acts.input;
    Tensor relu_t;
    for (size_t s = 0; s < m.convs.size(); ++s) {
        detail::conv_forward(*cur, m.convs[s], acts.conv_pre[s]);
        detail::relu_forward(acts.conv_pre[s], relu_t);
        detail::maxpool2_forward(relu_t, acts.pooled[s], acts.pool_arg[s]);
        cur = &acts.pooled[s];
    }
    if (m.has_residual) {
        Tensor main_t, proj_t;
        detail::conv_forward(*cur, m.res_conv, main_t);
        detail::conv_forward(*cur, m.res_proj, proj_t);
        acts.res_pre = main_t;
        for (size_t i = 0; i < acts.res_pre.data.size(); ++i)
            acts.res_pre.data[i] += proj_t.data[i];
        detail::relu_forward(acts.res_pre, relu_t);
        detail::maxpool2_forward(relu_t, acts.res_pooled, acts.res_arg);
        cur = &acts.res_pooled;
    }
    acts.flat = cur->data;
    detail::dense_forward(acts.flat, m.fc_embed, acts.embedding);
    detail::dense_forward(acts.embedding, m.fc_logits, acts.logits);
}

inline std::pair<std::vector<double>, std::vector<double>> forward(const EncoderModel& m,
                                                                   const Image& img) {
    Activations acts;
    forward(m, img, acts);
    return {acts.embedding, acts.logits};
}

// Per-sample loss pieces and gradient accumulation. The external embedding,
// when present, adds align_weight * align_loss(embedding, external) with its
// gradient flowing into the embedding path. Returns (ce, align) losses.
inline std::pair<double, double> backward(const EncoderModel& m, const Activations& acts,
                                          int label, const std::vector<double>* external,
                                          double align_weight, EncoderGrads& grads) {
    if (label != 0 && label != 1) throw InputError("backward: label must be 0 or 1");
    std::vector<double> probs;
    double ce = detail::softmax_ce(acts.logits, label, probs);
    std::vector<double> dlogits = probs;
    dlogits[label] -= 1.0;

    std::vector<double> dembed;
    detail::dense_backward(acts.embedding, m.fc_logits, dlogits, grads.fc_logits, &dembed);

    double al = 0.0;
    if (external && align_weight != 0.0) {
        std::vector<double> dalign;
        al = align_loss_grad(acts.embedding, *external, dalign);
        for (size_t i = 0; i < dembed.size(); ++i) dembed[i] += align_weight * dalign[i];
    } else if (external) {
        al = align_loss(acts.embedding, *external);
    }

    std::vector<double> dflat;
    detail::dense_backward(acts.flat, m.fc_embed, dembed, grads.fc_embed, &dflat);

    // Gradient flows back through the pooled tensor of the last stage.
    Tensor dcur;
    if (m.has_residual) {
        dcur = acts.res_pooled;
        dcur.data = dflat;
        Tensor drelu = Tensor::zeros(acts.res_pre.h, acts.res_pre.w, acts.res_pre.c);
        detail::maxpool2_backward(dcur, acts.res_arg, drelu);
        detail::relu_backward(acts.res_pre, drelu);
        const Tensor& res_in = acts.pooled.back();
        Tensor dmain, dproj;
        detail::conv_backward(res_in, m.res_conv, drelu, grads.res_conv, &dmain);
        detail::conv_backward(res_in, m.res_proj, drelu, grads.res_proj, &dproj);
        dcur = dmain;
        for (size_t i = 0; i < dcur.data.size(); ++i) dcur.data[i] += dproj.data[i];
    } else {
        dcur = acts.pooled.back();
        dcur.data = dflat;
    }

    // Entering each iteration, dcur holds the gradient at pooled[s].
    for (int s = static_cast<int>(m.convs.size()) - 1; s >= 0; --s) {
        Tensor dpre = Tensor::zeros(acts.conv_pre[s].h, acts.conv_pre[s].w, acts.conv_pre[s].c);
        detail::maxpool2_backward(dcur, acts.pool_arg[s], dpre);
        detail::relu_backward(acts.conv_pre[s], dpre);
        const Tensor& in = s == 0 ? acts.input : acts.pooled[s - 1];
        if (s == 0) {
            detail::conv_backward(in, m.convs[s], dpre, grads.convs[s], nullptr);
        } else {
            detail::conv_backward(in, m.convs[s], dpre, grads.convs[s], &dcur);
        }
    }
    return {ce, al};
}

// Plain SGD step; weight decay applies to weights only, never biases.
inline void sgd_step(EncoderModel& m, const EncoderGrads& g, double lr, double wd) {
    auto step_w = [&](std::vector<double>& w, const std::vector<double>& gw) {
        for (size_t i = 0; i < w.size(); ++i) w[i] -= lr * (gw[i] + wd * w[i]);
    };
    auto step_b = [&](std::vector<double>& b, const std::vector<double>& gb) {
        for (size_t i = 0; i < b.size(); ++i) b[i] -= lr * gb[i];
    };
    for (size_t s = 0; s < m.convs.size(); ++s) {
        step_w(m.convs[s].w, g.convs[s].w);
        step_b(m.convs[s].b, g.convs[s].b);
    }
    if (m.has_residual) {
        step_w(m.res_conv.w, g.res_conv.w);
        step_b(m.res_conv.b, g.res_conv.b);
        step_w(m.res_proj.w, g.res_proj.w);
        step_b(m.res_proj.b, g.res_proj.b);
    }
    step_w(m.fc_embed.w, g.fc_embed.w);
    step_b(m.fc_embed.b, g.fc_embed.b);
    step_w(m.fc_logits.w, g.fc_logits.w);
    step_b(m.fc_logits.b, g.fc_logits.b);
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
    double learning_rate = 0.01;
    double weight_decay = 0.0005;
    int epochs = 30;
    int batch_size = 32;
    double momentum = 0.0;
    double align_weight = 0.0;
    uint64_t seed = 0;

    void validate() const {
        if (learning_rate <= 0.0) throw ValidationError("train.learning_rate must be positive");
        if (weight_decay < 0.0) throw ValidationError("train.weight_decay must be >= 0");
        if (epochs < 1) throw ValidationError("train.epochs must be >= 1");
        if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
        if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("train.momentum must be in [0,1)");
        if (!std::isfinite(align_weight) || align_weight < 0.0)
            throw ValidationError("train.align_weight must be finite and >= 0");
    }
};

// Per-epoch running means over the epoch's samples. total = ce + lambda*align;
// the weight-decay term is an optimizer detail and is not reported.
struct TrainTrace {
    std::vector<double> ce;
    std::vector<double> align;
    std::vector<double> total;
};

struct EncoderTrainResult {
    EncoderModel model;
    TrainTrace trace;
};

inline EncoderTrainResult train_encoder(const std::vector<Image>& images,
                                        const std::vector<int>& labels, Preset preset,
                                        const TrainConfig& config,
                                        const std::vector<std::vector<double>>* external = nullptr,
                                        int embedding_dim = 32) {
    config.validate();
    if (images.empty() || images.size() != labels.size())
        throw TrainingError("train_encoder: need equally many images and labels");
    int pos = std::accumulate(labels.begin(), labels.end(), 0);
    if (pos == 0 || pos == static_cast<int>(labels.size()))
        throw TrainingError("train_encoder: single-class labels");
    if (external && external->size() != images.size())
        throw TrainingError("train_encoder: external embeddings do not match sample count");
    int side = images[0].height();
    for (const Image& img : images)
        if (img.height() != side || img.width() != side)
            throw InputError("train_encoder: images must share one square size");

    EncoderTrainResult out;
    out.model = make_encoder(preset, config.seed, side, embedding_dim);
    EncoderModel& model = out.model;

    EncoderGrads grads = EncoderGrads::like(model);
    EncoderGrads velocity = EncoderGrads::like(model);
    bool use_momentum = config.momentum > 0.0;

    std::vector<int> order(images.size());
    std::iota(order.begin(), order.end(), 0);

    Activations acts;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        RngStream shuffle_rng =
            RngStream::derived(config.seed, StreamTag::encoder_shuffle, epoch);
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);

        double ce_sum = 0.0, align_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += config.batch_size) {
            size_t stop = std::min(order.size(), start + config.batch_size);
            grads.zero();
            for (size_t t = start; t < stop; ++t) {
                int i = order[t];
                forward(model, images[i], acts);
                const std::vector<double>* ext = external ? &(*external)[i] : nullptr;
                auto [ce, al] = backward(model, acts, labels[i], ext, config.align_weight, grads);
                ce_sum += ce;
                align_sum += al;
            }
            double inv = 1.0 / static_cast<double>(stop - start);
            auto scale = [&](std::vector<double>& v) {
                for (double& x : v) x *= inv;
            };
            for (auto& L : grads.convs) {
                scale(L.w);
                scale(L.b);
            }
            scale(grads.res_conv.w);
            scale(grads.res_conv.b);
            scale(grads.res_proj.w);
            scale(grads.res_proj.b);
            scale(grads.fc_embed.w);
            scale(grads.fc_embed.b);
            scale(grads.fc_logits.w);
            scale(grads.fc_logits.b);

            if (use_momentum) {
                // v = mu*v + (g + wd*w); w -= lr*v. Decay still skips biases.
                auto mom_w = [&](std::vector<double>& w, std::vector<double>& v,
                                 const std::vector<double>& g) {
                    for (size_t i = 0; i < w.size(); ++i) {
                        v[i] = config.momentum * v[i] + g[i] + config.weight_decay * w[i];
                        w[i] -= config.learning_rate * v[i];
                    }
                };
                auto mom_b = [&](std::vector<double>& b, std::vector<double>& v,
                                 const std::vector<double>& g) {
                    for (size_t i = 0; i < b.size(); ++i) {
                        v[i] = config.momentum * v[i] + g[i];
                        b[i] -= config.learning_rate * v[i];
                    }
                };
                for (size_t s = 0; s < model.convs.size(); ++s) {
                    mom_w(model.convs[s].w, velocity.convs[s].w, grads.convs[s].w);
                    mom_b(model.convs[s].b, velocity.convs[s].b, grads.convs[s].b);
                }
                if (model.has_residual) {
                    mom_w(model.res_conv.w, velocity.res_conv.w, grads.res_conv.w);
                    mom_b(model.res_conv.b, velocity.res_conv.b, grads.res_conv.b);
                    mom_w(model.res_proj.w, velocity.res_proj.w, grads.res_proj.w);
                    mom_b(model.res_proj.b, velocity.res_proj.b, grads.res_proj.b);
                }
                mom_w(model.fc_embed.w, velocity.fc_embed.w, grads.fc_embed.w);
                mom_b(model.fc_embed.b, velocity.fc_embed.b, grads.fc_embed.b);
                mom_w(model.fc_logits.w, velocity.fc_logits.w, grads.fc_logits.w);
                mom_b(model.fc_logits.b, velocity.fc_logits.b, grads.fc_logits.b);
            } else {
                sgd_step(model, grads, config.learning_rate, config.weight_decay);
            }
        }
        double n = static_cast<double>(order.size());
        double ce_mean = ce_sum / n;
        double align_mean = align_sum / n;
        double total = ce_mean + config.align_weight * align_mean;
        if (!std::isfinite(total))
            throw DivergenceError(strfmt("train_encoder: non-finite loss at epoch %d", epoch + 1));
        out.trace.ce.push_back(ce_mean);
        out.trace.align.push_back(align_mean);
        out.trace.total.push_back(total);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check over every parameter of the full loss
// CE + align_weight*align + wd/2 * sum(w^2) (decay over weights, not biases).

namespace detail {

inline std::vector<std::vector<double>*> weight_arrays(EncoderModel& m) {
    std::vector<std::vector<double>*> out;
    for (auto& L : m.convs) out.push_back(&L.w);
    if (m.has_residual) {
        out.push_back(&m.res_conv.w);
        out.push_back(&m.res_proj.w);
    }
    out.push_back(&m.fc_embed.w);
    out.push_back(&m.fc_logits.w);
    return out;
}

inline std::vector<std::vector<double>*> bias_arrays(EncoderModel& m) {
    std::vector<std::vector<double>*> out;
    for (auto& L : m.convs) out.push_back(&L.b);
    if (m.has_residual) {
        out.push_back(&m.res_conv.b);
        out.push_back(&m.res_proj.b);
    }
    out.push_back(&m.fc_embed.b);
    out.push_back(&m.fc_logits.b);
    return out;
}

inline std::vector<std::vector<double>*> grad_weight_arrays(EncoderGrads& g, bool residual) {
    std::vector<std::vector<double>*> out;
    for (auto& L : g.convs) out.push_back(&L.w);
    if (residual) {
        out.push_back(&g.res_conv.w);
        out.push_back(&g.res_proj.w);
    }
    out.push_back(&g.fc_embed.w);
    out.push_back(&g.fc_logits.w);
    return out;
}

inline std::vector<std::vector<double>*> grad_bias_arrays(EncoderGrads& g, bool residual) {
    std::vector<std::vector<double>*> out;
    for (auto& L : g.convs) out.push_back(&L.b);
    if (residual) {
        out.push_back(&g.res_conv.b);
        out.push_back(&g.res_proj.b);
    }
    out.push_back(&g.fc_embed.b);
    out.push_back(&g.fc_logits.b);
    return out;
}

}  // namespace detail

struct GradCheckSample {
    Image image;
    int label = 0;
    std::optional<std::vector<double>> external;
    double align_weight = 0.0;
    double weight_decay = 0.0;
};

// Max relative error between analytic and central-difference gradients.
// Relative error uses a 1e-6 denominator floor: below that gradient magnitude
// the comparison is absolute (double-precision finite differences carry
// ~1e-10 absolute noise, which would otherwise dominate dead parameters).
inline double gradient_check(const EncoderModel& model, const GradCheckSample& sample,
                             double epsilon) {
    if (epsilon < 1e-7 || epsilon > 1e-3)
        throw InputError("gradient_check: epsilon must be in [1e-7, 1e-3]");

    EncoderModel work = model;
    auto loss_at = [&]() {
        Activations acts;
        forward(work, sample.image, acts);
        std::vector<double> probs;
        double loss = detail::softmax_ce(acts.logits, sample.label, probs);
        if (sample.external && sample.align_weight != 0.0)
            loss += sample.align_weight * align_loss(acts.embedding, *sample.external);
        if (sample.weight_decay != 0.0) {
            double sq = 0.0;
            for (auto* w : detail::weight_arrays(work))
                for (double v : *w) sq += v * v;
            loss += 0.5 * sample.weight_decay * sq;
        }
        return loss;
    };

    // Analytic gradients: data term via backward, decay term added by hand.
    EncoderGrads grads = EncoderGrads::like(model);
    {
        Activations acts;
        forward(work, sample.image, acts);
        const std::vector<double>* ext = sample.external ? &*sample.external : nullptr;
        backward(work, acts, sample.label, ext, sample.align_weight, grads);
    }
    auto model_w = detail::weight_arrays(work);
    auto grad_w = detail::grad_weight_arrays(grads, model.has_residual);
    if (sample.weight_decay != 0.0) {
        for (size_t a = 0; a < model_w.size(); ++a)
            for (size_t i = 0; i < model_w[a]->size(); ++i)
                (*grad_w[a])[i] += sample.weight_decay * (*model_w[a])[i];
    }

    auto model_b = detail::bias_arrays(work);
    auto grad_b = detail::grad_bias_arrays(grads, model.has_residual);
    std::vector<std::vector<double>*> params = model_w;
    params.insert(params.end(), model_b.begin(), model_b.end());
    std::vector<std::vector<double>*> analytic = grad_w;
    analytic.insert(analytic.end(), grad_b.begin(), grad_b.end());

    double max_rel = 0.0;
    for (size_t a = 0; a < params.size(); ++a) {
        std::vector<double>& arr = *params[a];
        for (size_t i = 0; i < arr.size(); ++i) {
            double saved = arr[i];
            arr[i] = saved + epsilon;
            double lp = loss_at();
            arr[i] = saved - epsilon;
            double lm = loss_at();
            arr[i] = saved;
            double numeric = (lp - lm) / (2.0 * epsilon);
            double an = (*analytic[a])[i];
            double denom = std::max({std::abs(an), std::abs(numeric), 1e-6});
            max_rel = std::max(max_rel, std::abs(an - numeric) / denom);
        }
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// Grid mask.

enum class MaskRegion { object, text, full };

inline const char* to_string(MaskRegion r) {
    switch (r) {
        case MaskRegion::object: return "object";
        case MaskRegion::text: return "text";
        case MaskRegion::full: return "full";
    }
    return "?";
}

struct GridMaskConfig {
    int cell = 8;
    double ratio = 0.5;
    MaskRegion region = MaskRegion::full;

    void validate() const {
        if (cell < 2) throw ValidationError("grid_mask.cell must be >= 2");
        if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("grid_mask.ratio must be in (0,1)");
    }
};

// Resolves the symbolic region against the corpus geometry: text is the band
// above the object region, full is the whole image.
inline Rect grid_region(MaskRegion region, int image_width, int image_height,
                        Rect object_region) {
    switch (region) {
        case MaskRegion::object: return object_region;
        case MaskRegion::text: return Rect{0, 0, image_width, object_region.y};
        case MaskRegion::full: return Rect{0, 0, image_width, image_height};
    }
    return Rect{0, 0, image_width, image_height};
}

// Periodic square blocks set to 0 inside the region. The block lattice is
// traversed boustrophedon (even rows left-to-right, odd rows right-to-left)
// and block t is masked iff floor((t+1)*ratio) > floor(t*ratio), which masks
// exactly floor(ratio*N) of N blocks and gives a checkerboard at ratio 0.5.
// The phase shifts the lattice toroidally, so whenever cell divides both
// region dimensions every block keeps its full cell^2 pixels and the masked
// count is independent of phase.
inline Image grid_mask_at(const Image& img, const GridMaskConfig& cfg, Rect region, int phase_x,
                          int phase_y) {
    cfg.validate();
    if (!region.fits_in(img.width(), img.height()))
        throw InputError("grid_mask: region outside image");
    if (phase_x < 0 || phase_x >= cfg.cell || phase_y < 0 || phase_y >= cfg.cell)
        throw InputError("grid_mask: phase must be in [0, cell)");
    Image out = img;
    if (region.w <= 0 || region.h <= 0) return out;
    int bx = (region.w + cfg.cell - 1) / cfg.cell;
    int by = (region.h + cfg.cell - 1) / cfg.cell;
    int span_x = bx * cfg.cell;
    int span_y = by * cfg.cell;
    for (int ly = 0; ly < region.h; ++ly) {
        int sy = (ly + phase_y) % span_y;
        int bi = sy / cfg.cell;
        for (int lx = 0; lx < region.w; ++lx) {
            int sx = (lx + phase_x) % span_x;
            int bj = sx / cfg.cell;
            long t = static_cast<long>(bi) * bx + (bi % 2 == 0 ? bj : bx - 1 - bj);
            bool masked = std::floor((t + 1) * cfg.ratio) > std::floor(t * cfg.ratio);
            if (masked) out.at(region.y + ly, region.x + lx) = 0.0;
        }
    }
    return out;
}

inline Image grid_mask(const Image& img, const GridMaskConfig& cfg, Rect region, RngStream& rng) {
    cfg.validate();
    int phase_x = rng.uniform_int(0, cfg.cell - 1);
    int phase_y = rng.uniform_int(0, cfg.cell - 1);
    return grid_mask_at(img, cfg, region, phase_x, phase_y);
}

}  // namespace oanet
