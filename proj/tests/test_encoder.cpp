#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "oanet/encoder.hpp"

using namespace oanet;
using Catch::Approx;

namespace {

Image random_image(uint64_t seed, int side) {
    RngStream rng = RngStream::derived(seed, StreamTag::fixture);
    Image img(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) img.at(y, x) = rng.uniform();
    return img;
}

// Two trivially separable classes: bright upper half vs bright lower half.
void separable_fixture(int n_per_class, int side, std::vector<Image>& images,
                       std::vector<int>& labels, uint64_t seed) {
    RngStream rng = RngStream::derived(seed, StreamTag::fixture, 1);
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < n_per_class; ++i) {
            Image img(side, side);
            for (int y = 0; y < side; ++y) {
                bool bright = (c == 0) == (y < side / 2);
                for (int x = 0; x < side; ++x)
                    img.at(y, x) = (bright ? 0.8 : 0.1) + rng.uniform(-0.05, 0.05);
            }
            images.push_back(std::move(img));
            labels.push_back(c);
        }
    }
}

int count_masked(const Image& before, const Image& after, Rect region) {
    int masked = 0;
    for (int y = region.y; y < region.y + region.h; ++y)
        for (int x = region.x; x < region.x + region.w; ++x)
            if (after.at(y, x) == 0.0 && before.at(y, x) != 0.0) ++masked;
    return masked;
}

std::vector<double> all_params(const EncoderModel& m) {
    std::vector<double> out;
    auto push = [&](const std::vector<double>& v) { out.insert(out.end(), v.begin(), v.end()); };
    for (const auto& L : m.convs) {
        push(L.w);
        push(L.b);
    }
    if (m.has_residual) {
        push(m.res_conv.w);
        push(m.res_conv.b);
        push(m.res_proj.w);
        push(m.res_proj.b);
    }
    push(m.fc_embed.w);
    push(m.fc_embed.b);
    push(m.fc_logits.w);
    push(m.fc_logits.b);
    return out;
}

}  // namespace

TEST_CASE("presets have the advertised shapes") {
    EncoderModel tiny = make_encoder(Preset::tiny, 1, 64);
    REQUIRE(tiny.convs.size() == 2);
    REQUIRE_FALSE(tiny.has_residual);
    REQUIRE(tiny.flat_dim() == 16 * 16 * 16);
    REQUIRE(tiny.fc_embed.out_dim == 32);
    REQUIRE(tiny.fc_logits.out_dim == 2);

    EncoderModel small = make_encoder(Preset::small, 1, 64);
    REQUIRE(small.convs.size() == 3);
    REQUIRE(small.flat_dim() == 8 * 8 * 32);

    EncoderModel base = make_encoder(Preset::base, 1, 64);
    REQUIRE(base.convs.size() == 3);
    REQUIRE(base.has_residual);
    REQUIRE(base.res_conv.out_ch == 64);
    REQUIRE(base.res_proj.ksize == 1);
    REQUIRE(base.flat_dim() == 4 * 4 * 64);

    REQUIRE_THROWS_AS(make_encoder(Preset::base, 1, 60), ValidationError);
    REQUIRE(preset_from_string("small") == Preset::small);
    REQUIRE_THROWS_AS(preset_from_string("vgg"), ValidationError);
}

TEST_CASE("zero weights give zero logits and half probabilities") {
    EncoderModel m = make_encoder(Preset::tiny, 3, 32);
    for (auto& L : m.convs) {
        std::fill(L.w.begin(), L.w.end(), 0.0);
        std::fill(L.b.begin(), L.b.end(), 0.0);
    }
    std::fill(m.fc_embed.w.begin(), m.fc_embed.w.end(), 0.0);
    std::fill(m.fc_logits.w.begin(), m.fc_logits.w.end(), 0.0);
    auto [embed, logits] = forward(m, random_image(7, 32));
    for (double e : embed) REQUIRE(e == 0.0);
    REQUIRE(logits[0] == 0.0);
    REQUIRE(logits[1] == 0.0);
    std::vector<double> probs;
    detail::softmax_ce(logits, 0, probs);
    REQUIRE(probs[0] == 0.5);
    REQUIRE(probs[1] == 0.5);
}

TEST_CASE("forward is deterministic and validates shape") {
    EncoderModel m = make_encoder(Preset::small, 9, 64);
    Image img = random_image(11, 64);
    auto [e1, l1] = forward(m, img);
    auto [e2, l2] = forward(m, img);
    REQUIRE(e1 == e2);
    REQUIRE(l1 == l2);
    for (double v : e1) REQUIRE(std::isfinite(v));

    EncoderModel again = make_encoder(Preset::small, 9, 64);
    auto [e3, l3] = forward(again, img);
    REQUIRE(e1 == e3);
    REQUIRE(l1 == l3);

    REQUIRE_THROWS_AS(forward(m, random_image(1, 32)), InputError);
}

TEST_CASE("scaling the logits layer doubles the logits") {
    EncoderModel m = make_encoder(Preset::tiny, 13, 32);
    Image img = random_image(17, 32);
    auto [e1, l1] = forward(m, img);
    for (double& v : m.fc_logits.w) v *= 2.0;
    for (double& v : m.fc_logits.b) v *= 2.0;
    auto [e2, l2] = forward(m, img);
    REQUIRE(e1 == e2);
    REQUIRE(l2[0] == Approx(2.0 * l1[0]).epsilon(1e-12));
    REQUIRE(l2[1] == Approx(2.0 * l1[1]).epsilon(1e-12));
}

TEST_CASE("last layer bias gradient equals softmax minus one hot") {
    EncoderModel m = make_encoder(Preset::tiny, 19, 32);
    Image img = random_image(23, 32);
    Activations acts;
    forward(m, img, acts);
    std::vector<double> probs;
    detail::softmax_ce(acts.logits, 1, probs);

    EncoderGrads g = EncoderGrads::like(m);
    backward(m, acts, 1, nullptr, 0.0, g);
    REQUIRE(g.fc_logits.b[0] == Approx(probs[0]).epsilon(1e-14));
    REQUIRE(g.fc_logits.b[1] == Approx(probs[1] - 1.0).epsilon(1e-14));
}

TEST_CASE("gradient check passes for every preset") {
    for (Preset p : {Preset::tiny, Preset::small, Preset::base}) {
        EncoderModel m = make_encoder(p, 29 + static_cast<int>(p), 16);
        GradCheckSample s;
        s.image = random_image(31 + static_cast<int>(p), 16);
        s.label = static_cast<int>(p) % 2;
        s.weight_decay = 0.0005;
        double err = gradient_check(m, s, 1e-5);
        INFO("preset " << to_string(p));
        REQUIRE(err < 1e-4);
    }
}

TEST_CASE("gradient check covers the alignment term") {
    EncoderModel m = make_encoder(Preset::tiny, 37, 16);
    RngStream rng = RngStream::derived(41, StreamTag::fixture);
    GradCheckSample s;
    s.image = random_image(43, 16);
    s.label = 1;
    s.align_weight = 0.7;
    s.weight_decay = 0.0005;
    std::vector<double> ext(32);
    for (double& v : ext) v = rng.normal();
    s.external = ext;
    REQUIRE(gradient_check(m, s, 1e-5) < 1e-4);
}

TEST_CASE("halving epsilon keeps the check second order") {
    EncoderModel m = make_encoder(Preset::tiny, 47, 16);
    GradCheckSample s;
    s.image = random_image(53, 16);
    s.label = 0;
    double e1 = gradient_check(m, s, 1e-3);
    double e2 = gradient_check(m, s, 5e-4);
    REQUIRE(e2 <= 4.0 * e1 + 1e-12);
}

TEST_CASE("gradient check validates epsilon") {
    EncoderModel m = make_encoder(Preset::tiny, 59, 16);
    GradCheckSample s;
    s.image = random_image(61, 16);
    REQUIRE_THROWS_AS(gradient_check(m, s, 1e-2), InputError);
    REQUIRE_THROWS_AS(gradient_check(m, s, 1e-8), InputError);
}

TEST_CASE("sgd step contracts weights by one minus lr times wd") {
    EncoderModel m = make_encoder(Preset::tiny, 67, 16);
    EncoderModel before = m;
    EncoderGrads zero = EncoderGrads::like(m);
    double lr = 0.01, wd = 0.0005;
    sgd_step(m, zero, lr, wd);
    for (size_t s = 0; s < m.convs.size(); ++s) {
        for (size_t i = 0; i < m.convs[s].w.size(); ++i) {
            REQUIRE(m.convs[s].w[i] ==
                    Approx((1.0 - lr * wd) * before.convs[s].w[i]).epsilon(1e-12));
        }
        REQUIRE(m.convs[s].b == before.convs[s].b);  // biases are not decayed
    }
    for (size_t i = 0; i < m.fc_embed.w.size(); ++i)
        REQUIRE(m.fc_embed.w[i] == Approx((1.0 - lr * wd) * before.fc_embed.w[i]).epsilon(1e-12));
    REQUIRE(m.fc_embed.b == before.fc_embed.b);
}

TEST_CASE("training separates a trivial fixture") {
    std::vector<Image> images;
    std::vector<int> labels;
    separable_fixture(10, 16, images, labels, 71);

    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 8;
    cfg.seed = 5;
    EncoderTrainResult r = train_encoder(images, labels, Preset::tiny, cfg);
    REQUIRE(r.trace.ce.size() == 30);
    REQUIRE(r.trace.align.size() == 30);
    REQUIRE(r.trace.total.size() == 30);
    REQUIRE(r.trace.ce.back() < r.trace.ce.front());

    int correct = 0;
    for (size_t i = 0; i < images.size(); ++i) {
        auto [embed, logits] = forward(r.model, images[i]);
        int pred = logits[1] > logits[0] ? 1 : 0;
        correct += pred == labels[i];
    }
    REQUIRE(correct == static_cast<int>(images.size()));
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
    std::vector<Image> images;
    std::vector<int> labels;
    separable_fixture(6, 16, images, labels, 73);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 17;
    EncoderTrainResult a = train_encoder(images, labels, Preset::tiny, cfg);
    EncoderTrainResult b = train_encoder(images, labels, Preset::tiny, cfg);
    REQUIRE(all_params(a.model) == all_params(b.model));
    REQUIRE(a.trace.total == b.trace.total);
}

TEST_CASE("self-aligned external embeddings leave the first step unchanged") {
    // External embeddings equal to the init model's own embeddings make the
    // alignment term an exact zero with zero gradient, so one full-batch step
    // matches the lambda=0 trajectory bit for bit.
    std::vector<Image> images;
    std::vector<int> labels;
    separable_fixture(4, 16, images, labels, 79);

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = static_cast<int>(images.size());
    cfg.seed = 23;

    EncoderModel init = make_encoder(Preset::tiny, cfg.seed, 16);
    std::vector<std::vector<double>> self_embeds;
    for (const Image& img : images) self_embeds.push_back(forward(init, img).first);

    EncoderTrainResult plain = train_encoder(images, labels, Preset::tiny, cfg);
    TrainConfig aligned_cfg = cfg;
    aligned_cfg.align_weight = 0.7;
    EncoderTrainResult aligned =
        train_encoder(images, labels, Preset::tiny, aligned_cfg, &self_embeds);

    REQUIRE(all_params(plain.model) == all_params(aligned.model));
    REQUIRE(aligned.trace.align[0] == Approx(0.0).margin(1e-12));
}

TEST_CASE("training rejects degenerate inputs") {
    std::vector<Image> images;
    std::vector<int> labels;
    separable_fixture(3, 16, images, labels, 83);
    std::vector<int> ones(labels.size(), 1);
    TrainConfig cfg;
    cfg.epochs = 1;
    REQUIRE_THROWS_AS(train_encoder(images, ones, Preset::tiny, cfg), TrainingError);

    TrainConfig bad = cfg;
    bad.learning_rate = 0.0;
    REQUIRE_THROWS_AS(train_encoder(images, labels, Preset::tiny, bad), ValidationError);

    std::vector<std::vector<double>> short_ext(2);
    REQUIRE_THROWS_AS(train_encoder(images, labels, Preset::tiny, cfg, &short_ext),
                      TrainingError);
}

TEST_CASE("align loss matches the closed forms") {
    std::vector<double> z = {0.3, -1.2, 0.8};
    REQUIRE(align_loss(z, z) == Approx(0.0).margin(1e-15));
    REQUIRE(align_loss({1, 0}, {0, 1}) == Approx(1.0).epsilon(1e-15));
    REQUIRE(align_loss({1, 0}, {1, 1}) == Approx(1.0 - std::sqrt(2.0) / 2.0).epsilon(1e-12));
    REQUIRE(align_loss({0, 0}, {1, 1}) == 1.0);  // saturation, not an error

    std::vector<double> grad;
    REQUIRE(align_loss_grad({0, 0}, {1, 1}, grad) == 1.0);
    REQUIRE(grad == std::vector<double>{0.0, 0.0});
    REQUIRE_THROWS_AS(align_loss({1, 2}, {1, 2, 3}), InputError);
}

TEST_CASE("grid mask zero phase masks exactly 2048 pixels at the defaults") {
    Image img(64, 64);
    img.fill(Rect{0, 0, 64, 64}, 0.7);
    GridMaskConfig cfg;
    Rect full{0, 0, 64, 64};
    Image masked = grid_mask_at(img, cfg, full, 0, 0);
    REQUIRE(count_masked(img, masked, full) == 2048);
}

TEST_CASE("grid mask count is phase-invariant on divisible geometry") {
    Image img(64, 64);
    img.fill(Rect{0, 0, 64, 64}, 0.9);
    GridMaskConfig cfg;
    Rect full{0, 0, 64, 64};
    for (int px = 0; px < 8; ++px) {
        for (int py = 0; py < 8; py += 3) {
            Image masked = grid_mask_at(img, cfg, full, px, py);
            REQUIRE(count_masked(img, masked, full) == 2048);
        }
    }
}

TEST_CASE("grid mask is idempotent at fixed phase") {
    Image img = random_image(89, 64);
    GridMaskConfig cfg;
    Rect full{0, 0, 64, 64};
    Image once = grid_mask_at(img, cfg, full, 3, 5);
    Image twice = grid_mask_at(once, cfg, full, 3, 5);
    REQUIRE(once.pixels() == twice.pixels());
}

TEST_CASE("grid mask leaves pixels outside the region untouched") {
    Image img = random_image(97, 64);
    GridMaskConfig cfg;
    Rect text{0, 0, 64, 24};
    RngStream rng = RngStream::derived(101, StreamTag::perturb_grid);
    Image masked = grid_mask(img, cfg, text, rng);
    for (int y = 24; y < 64; ++y)
        for (int x = 0; x < 64; ++x) REQUIRE(masked.at(y, x) == img.at(y, x));
}

TEST_CASE("grid mask fraction stays near ratio on awkward geometry") {
    Image img(50, 70);
    img.fill(Rect{0, 0, 70, 50}, 0.6);
    GridMaskConfig cfg;
    cfg.cell = 8;
    cfg.ratio = 0.3;
    Rect region{3, 2, 61, 45};
    for (int px : {0, 2, 7}) {
        for (int py : {0, 4, 6}) {
            Image masked = grid_mask_at(img, cfg, region, px, py);
            double frac =
                static_cast<double>(count_masked(img, masked, region)) / region.area();
            double slack = static_cast<double>(cfg.cell * (region.w + region.h)) / region.area();
            REQUIRE(std::abs(frac - cfg.ratio) <= slack);
        }
    }
}

TEST_CASE("grid mask draws phase from the stream deterministically") {
    Image img = random_image(103, 64);
    GridMaskConfig cfg;
    Rect full{0, 0, 64, 64};
    RngStream r1 = RngStream::derived(5, StreamTag::perturb_grid);
    RngStream r2 = RngStream::derived(5, StreamTag::perturb_grid);
    Image a = grid_mask(img, cfg, full, r1);
    Image b = grid_mask(img, cfg, full, r2);
    REQUIRE(a.pixels() == b.pixels());

    GridMaskConfig bad;
    bad.ratio = 0.0;
    RngStream r3 = RngStream::derived(5, StreamTag::perturb_grid);
    REQUIRE_THROWS_AS(grid_mask(img, bad, full, r3), ValidationError);
}

TEST_CASE("region helper resolves symbolic regions") {
    Rect object{0, 64, 64, 64};
    Rect full = grid_region(MaskRegion::full, 128, 128, object);
    REQUIRE(full.w == 128);
    REQUIRE(full.h == 128);
    Rect text = grid_region(MaskRegion::text, 128, 128, object);
    REQUIRE(text.y == 0);
    REQUIRE(text.h == 64);
    Rect obj = grid_region(MaskRegion::object, 128, 128, object);
    REQUIRE(obj.y == 64);
}
