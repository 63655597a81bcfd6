#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "oanet/metrics.hpp"
#include "oanet/serialize.hpp"

using namespace oanet;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

FeatureMatrix tiny_matrix(std::vector<int>& labels, int n = 60, uint64_t seed = 31) {
    RngStream rng = RngStream::derived(seed, StreamTag::fixture);
    std::vector<FeatureVector> rows;
    labels.clear();
    for (int i = 0; i < n; ++i) {
        int y = i % 2;
        FeatureVector fv;
        fv.values = {(y ? 1.0 : -1.0) + 0.4 * rng.normal(), rng.normal(), rng.normal()};
        fv.missing = {false, false, rng.uniform() < 0.2};
        if (fv.missing[2]) fv.values[2] = 0.0;
        rows.push_back(fv);
        labels.push_back(y);
    }
    return FeatureMatrix::from(rows);
}

FeatureVector row_fv(const FeatureMatrix& X, int i) {
    FeatureVector fv;
    fv.values.assign(X.row(i), X.row(i) + X.k);
    fv.missing.assign(X.row_miss(i), X.row_miss(i) + X.k);
    return fv;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("oanet_test_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("standardizer survives a save/load/save round trip byte-for-byte") {
    StandardizerStats s;
    s.mean = {0.1, 1.0 / 3.0, -2.5e-17, 42.0};
    s.stdev = {1.0, 0.7071067811865476, 3.0, 1e-9};
    std::string text = save_standardizer(s);
    StandardizerStats back = load_standardizer(text);
    CHECK(back.mean == s.mean);
    CHECK(back.stdev == s.stdev);
    CHECK(save_standardizer(back) == text);
}

TEST_CASE("boosted model round trip preserves predictions exactly") {
    std::vector<int> labels;
    FeatureMatrix X = tiny_matrix(labels);
    BoostedConfig cfg;
    cfg.rounds = 12;
    cfg.depth = 3;
    cfg.seed = 5;
    TreeEnsembleModel m = train_boosted(X, labels, cfg);

    std::string text = save_boosted(m);
    TreeEnsembleModel back = load_boosted(text);
    CHECK(save_boosted(back) == text);
    for (int i = 0; i < X.n; ++i) {
        FeatureVector fv = row_fv(X, i);
        CHECK(back.predict_prob(fv) == m.predict_prob(fv));
    }
}

TEST_CASE("forest model round trip preserves predictions exactly") {
    std::vector<int> labels;
    FeatureMatrix X = tiny_matrix(labels);
    ForestConfig cfg;
    cfg.trees = 15;
    cfg.seed = 6;
    ForestModel m = train_forest(X, labels, cfg);

    std::string text = save_forest(m);
    ForestModel back = load_forest(text);
    CHECK(save_forest(back) == text);
    CHECK(back.oob_accuracy == m.oob_accuracy);
    for (int i = 0; i < X.n; ++i) {
        FeatureVector fv = row_fv(X, i);
        CHECK(back.predict_prob(fv) == m.predict_prob(fv));
    }
}

TEST_CASE("bag round trip keeps all four members") {
    std::vector<int> labels;
    FeatureMatrix X = tiny_matrix(labels);
    BagConfig cfg;
    cfg.seed = 9;
    BagModel m = train_intra_bag(X, labels, cfg);

    std::string text = save_bag(m);
    BagModel back = load_bag(text);
    CHECK(save_bag(back) == text);
    REQUIRE(back.members.size() == m.members.size());
    for (size_t k = 0; k < m.members.size(); ++k)
        CHECK(back.members[k].name == m.members[k].name);
    for (int i = 0; i < X.n; ++i) {
        FeatureVector fv = row_fv(X, i);
        CHECK(back.predict_prob(fv) == m.predict_prob(fv));
    }
}

TEST_CASE("encoder round trip preserves the forward pass exactly") {
    for (Preset preset : {Preset::tiny, Preset::base}) {
        EncoderModel m = make_encoder(preset, 21, 32, 16);
        std::string text = save_encoder(m);
        EncoderModel back = load_encoder(text);
        CHECK(save_encoder(back) == text);

        RngStream rng = RngStream::derived(22, StreamTag::fixture);
        Image img(32, 32);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) img.at(y, x) = rng.uniform();
        auto [e1, z1] = forward(m, img);
        auto [e2, z2] = forward(back, img);
        CHECK(e1 == e2);
        CHECK(z1 == z2);
    }
}

TEST_CASE("mlp and refine stack round trips") {
    RngStream rng = RngStream::derived(23, StreamTag::fixture);
    std::vector<FeatureVector> feats;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        FeatureVector fv;
        fv.values = {(i % 2 ? 1.5 : -1.5) + 0.3 * rng.normal(), rng.normal()};
        fv.missing = {false, false};
        feats.push_back(fv);
        labels.push_back(i % 2);
    }
    MlpConfig mc;
    mc.hidden = 6;
    mc.embed_dim = 5;
    mc.epochs = 5;
    mc.seed = 4;
    Mlp mlp = train_external_mlp(feats, labels, mc).model;
    std::string mtext = save_mlp(mlp);
    Mlp mback = load_mlp(mtext);
    CHECK(save_mlp(mback) == mtext);
    CHECK(mback.forward(feats[0].values) == mlp.forward(feats[0].values));

    std::vector<std::vector<double>> img_e(20, std::vector<double>(5));
    std::vector<std::vector<double>> ext_e(20, std::vector<double>(5));
    for (auto& v : img_e)
        for (double& x : v) x = rng.normal();
    for (auto& v : ext_e)
        for (double& x : v) x = rng.normal();
    RefineStack stack = fit_refine(img_e, ext_e, 2, 2).stack;
    std::string rtext = save_refine(stack);
    RefineStack rback = load_refine(rtext);
    CHECK(save_refine(rback) == rtext);
    CHECK(refine(img_e[3], ext_e[3], rback) == refine(img_e[3], ext_e[3], stack));
}

TEST_CASE("gate round trip") {
    GateState g;
    g.beta = 1.25;
    g.tau = 4.5;
    g.stats[0].mean = {0.5, -1.0};
    g.stats[0].var = {1.5, 2.5};
    g.stats[1].mean = {3.0};
    g.stats[1].var = {kGateVarianceFloor};
    std::string text = save_gate(g);
    GateState back = load_gate(text);
    CHECK(save_gate(back) == text);
    CHECK(back.stats[0].mean == g.stats[0].mean);
    CHECK(back.stats[1].var == g.stats[1].var);
    CHECK(back.beta == g.beta);
    CHECK(back.tau == g.tau);
}

TEST_CASE("fused bundle round trips through a directory") {
    RngStream rng = RngStream::derived(29, StreamTag::fixture);
    std::vector<Image> images;
    std::vector<FeatureVector> feats;
    std::vector<int> labels;
    for (int i = 0; i < 32; ++i) {
        int y = i % 2;
        Image img(16, 16);
        for (int yy = 0; yy < 16; ++yy)
            for (int xx = 0; xx < 16; ++xx)
                img.at(yy, xx) = 0.2 * rng.uniform() + (y && yy < 8 ? 0.6 : 0.0);
        images.push_back(std::move(img));
        FeatureVector fv;
        fv.values = {(y ? 1.0 : -1.0) + 0.3 * rng.normal(), rng.normal()};
        fv.missing = {false, false};
        feats.push_back(fv);
        labels.push_back(y);
    }
    FusedConfig cfg;
    cfg.preset = Preset::tiny;
    cfg.embed_dim = 8;
    cfg.k = 4;
    cfg.rounds = 2;
    cfg.encoder_train.epochs = 2;
    cfg.encoder_train.batch_size = 8;
    cfg.external_train.hidden = 6;
    cfg.external_train.epochs = 3;
    cfg.head_train.epochs = 3;
    cfg.seed = 41;
    FusedModel m = train_fused(images, feats, labels, cfg).model;

    TempDir dir("fused");
    save_fused(m, dir.path / "bundle");
    FusedModel back = load_fused(dir.path / "bundle");
    CHECK(back.fused_probability(images[0], feats[0]) == m.fused_probability(images[0], feats[0]));
    CHECK(back.image_probability(images[1]) == m.image_probability(images[1]));

    save_fused(back, dir.path / "bundle2");
    for (const char* name : {"fused.json", "external.json", "image.json", "refine.json",
                             "head.json"})
        CHECK(read_text_file(dir.path / "bundle" / name) ==
              read_text_file(dir.path / "bundle2" / name));
}

TEST_CASE("loading rejects tampered documents") {
    StandardizerStats s;
    s.mean = {1.0, 2.0};
    s.stdev = {0.5, 0.25};
    std::string good = save_standardizer(s);

    SECTION("foreign format version") {
        std::string bad = good;
        size_t pos = bad.find("\"format_version\":1");
        REQUIRE(pos != std::string::npos);
        bad.replace(pos, 18, "\"format_version\":2");
        try {
            load_standardizer(bad);
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()).find("format_version") != std::string::npos);
        }
    }
    SECTION("truncation") {
        CHECK_THROWS_AS(load_standardizer(good.substr(0, good.size() / 2)), LoadError);
    }
    SECTION("payload edit breaks the digest") {
        std::string bad = good;
        size_t pos = bad.find("\"mean\":[1");
        REQUIRE(pos != std::string::npos);
        bad.replace(pos, 9, "\"mean\":[3");
        try {
            load_standardizer(bad);
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()).find("digest") != std::string::npos);
        }
    }
    SECTION("wrong kind") { CHECK_THROWS_AS(load_gate(good), LoadError); }
    SECTION("missing field names the field") {
        try {
            // A gate document without "tau".
            std::string payload = "{\"beta\":1}";
            load_gate(wrap_document("gate", payload));
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()).find("tau") != std::string::npos);
        }
    }
}
