#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>

#include "oanet/corpus.hpp"

using namespace oanet;

namespace {

CorpusSpec small_spec(int total, int defects, uint64_t seed = 11) {
    CorpusSpec spec;
    spec.total_count = total;
    spec.defect_count = defects;
    spec.seed = seed;
    return spec;
}

int count_region_diffs(const Image& a, const Image& b, const Rect& r) {
    int n = 0;
    for (int y = r.y; y < r.y + r.h; ++y)
        for (int x = r.x; x < r.x + r.w; ++x)
            if (a.at(y, x) != b.at(y, x)) ++n;
    return n;
}

}  // namespace

TEST_CASE("generate_corpus honours counts and mix") {
    auto samples = generate_corpus(small_spec(100, 40));
    REQUIRE(samples.size() == 100);
    std::map<DefectKind, int> kinds;
    int defects = 0;
    for (const auto& s : samples) {
        kinds[s.kind]++;
        if (s.label == Label::defect) ++defects;
        REQUIRE((s.label == Label::defect) == (s.kind != DefectKind::none));
    }
    REQUIRE(defects == 40);
    REQUIRE(kinds[DefectKind::visual] == 16);      // 40 * 0.4
    REQUIRE(kinds[DefectKind::parametric] == 16);  // 40 * 0.4
    REQUIRE(kinds[DefectKind::both] == 8);         // 40 * 0.2
}

TEST_CASE("generate_corpus zero-defect case") {
    auto samples = generate_corpus(small_spec(10, 0));
    for (const auto& s : samples) {
        REQUIRE(s.kind == DefectKind::none);
        REQUIRE(s.label == Label::non_defect);
    }
}

TEST_CASE("generate_corpus custom mix apportionment") {
    CorpusSpec spec = small_spec(100, 40);
    spec.defect_mix = {0.5, 0.25, 0.25};
    auto samples = generate_corpus(spec);
    std::map<DefectKind, int> kinds;
    for (const auto& s : samples) kinds[s.kind]++;
    REQUIRE(kinds[DefectKind::visual] == 20);
    REQUIRE(kinds[DefectKind::parametric] == 10);
    REQUIRE(kinds[DefectKind::both] == 10);
}

TEST_CASE("generate_corpus is deterministic") {
    auto a = generate_corpus(small_spec(30, 12, 5));
    auto b = generate_corpus(small_spec(30, 12, 5));
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].id == b[i].id);
        REQUIRE(a[i].kind == b[i].kind);
        REQUIRE(a[i].param_truth == b[i].param_truth);
        REQUIRE(a[i].image.pixels() == b[i].image.pixels());
    }
    auto c = generate_corpus(small_spec(30, 12, 6));
    bool any_diff = false;
    for (size_t i = 0; i < a.size() && !any_diff; ++i)
        any_diff = a[i].image.pixels() != c[i].image.pixels();
    REQUIRE(any_diff);
}

TEST_CASE("spec validation names the offending field") {
    CorpusSpec spec = small_spec(10, 20);
    REQUIRE_THROWS_WITH(generate_corpus(spec), Catch::Matchers::ContainsSubstring("defect_count"));

    spec = small_spec(10, 2);
    spec.defect_mix = {0.5, 0.5, 0.5};
    REQUIRE_THROWS_WITH(generate_corpus(spec), Catch::Matchers::ContainsSubstring("defect_mix"));

    spec = small_spec(10, 2);
    spec.object_region = Rect{100, 100, 64, 64};
    REQUIRE_THROWS_WITH(generate_corpus(spec), Catch::Matchers::ContainsSubstring("object_region"));

    spec = small_spec(10, 2);
    spec.schema[0].anomalous = {{50.0, 80.0}};  // overlaps nominal [35, 75]
    REQUIRE_THROWS_WITH(generate_corpus(spec), Catch::Matchers::ContainsSubstring("TEMP"));
}

TEST_CASE("clean samples stay inside nominal ranges") {
    CorpusSpec spec = small_spec(40, 0);
    for (const auto& s : generate_corpus(spec)) {
        for (size_t i = 0; i < spec.schema.size(); ++i) {
            REQUIRE(s.param_truth[i] >= spec.schema[i].lo);
            REQUIRE(s.param_truth[i] <= spec.schema[i].hi);
        }
    }
}

TEST_CASE("parametric samples have 2..4 anomalous fields, visual-only none") {
    CorpusSpec spec = small_spec(200, 120, 3);
    auto samples = generate_corpus(spec);
    auto anomalous_count = [&](const SyntheticSample& s) {
        int n = 0;
        for (size_t i = 0; i < spec.schema.size(); ++i) {
            const auto& f = spec.schema[i];
            if (s.param_truth[i] < f.lo || s.param_truth[i] > f.hi) ++n;
        }
        return n;
    };
    for (const auto& s : samples) {
        int n = anomalous_count(s);
        if (s.kind == DefectKind::parametric || s.kind == DefectKind::both) {
            REQUIRE(n >= 2);
            REQUIRE(n <= 4);
        } else {
            REQUIRE(n == 0);
        }
    }
}

TEST_CASE("render_sample stamps exact glyphs at schema slots") {
    CorpusSpec spec = small_spec(1, 0);
    std::vector<double> params;
    for (const auto& f : spec.schema) params.push_back(quantize_value(f.lo, f.decimals));
    params[0] = 42.5;
    RngStream rng(17);
    Image img = render_sample(spec, params, DefectKind::none, rng);

    GlyphAtlas atlas(spec.glyph_scale);
    std::string line0 = field_text(spec.schema[0], params[0]);
    REQUIRE(line0 == "TEMP=42.50");
    Image expected(spec.image_height, spec.image_width, 0.10);
    atlas.stamp_text(expected, spec.text_margin_x, spec.line_y(0), line0, 1.0);
    for (int y = spec.line_y(0); y < spec.line_y(0) + 7; ++y)
        for (int x = 0; x < spec.image_width; ++x) REQUIRE(img.at(y, x) == expected.at(y, x));
}

TEST_CASE("render_sample rejects overflowing lines") {
    CorpusSpec spec = small_spec(1, 0);
    spec.schema[0].key = "AVERYLONGKEYNAMEXX";  // 18 + '=' + value overflows 120 px
    std::vector<double> params(spec.schema.size(), 50.0);
    params[7] = 0.0;
    RngStream rng(1);
    REQUIRE_THROWS_AS(render_sample(spec, params, DefectKind::none, rng), LayoutError);
}

TEST_CASE("render_sample is pure and parametric renders pair with clean ones") {
    CorpusSpec spec = small_spec(1, 0);
    std::vector<double> params;
    for (const auto& f : spec.schema) params.push_back(quantize_value((f.lo + f.hi) / 2, 2));

    RngStream r1(77), r2(77);
    Image a = render_sample(spec, params, DefectKind::none, r1);
    Image b = render_sample(spec, params, DefectKind::none, r2);
    REQUIRE(a.pixels() == b.pixels());

    // Parametric defect: different params, same stream -> identical object region.
    std::vector<double> anom = params;
    anom[0] = 95.0;
    RngStream r3(77);
    Image c = render_sample(spec, anom, DefectKind::parametric, r3);
    REQUIRE(count_region_diffs(a, c, spec.object_region) == 0);

    // Visual defect under the same stream differs only inside the object region.
    RngStream r4(77);
    Image d = render_sample(spec, params, DefectKind::visual, r4);
    int inside = count_region_diffs(a, d, spec.object_region);
    REQUIRE(inside > 0);
    Rect top{0, 0, spec.image_width, spec.object_region.y};
    Rect right{spec.object_region.w, spec.object_region.y,
               spec.image_width - spec.object_region.w, spec.object_region.h};
    REQUIRE(count_region_diffs(a, d, top) == 0);
    REQUIRE(count_region_diffs(a, d, right) == 0);
}

TEST_CASE("inject_visual_defect respects bounds and locality") {
    CorpusSpec spec = small_spec(1, 0);
    std::vector<double> params;
    for (const auto& f : spec.schema) params.push_back(quantize_value((f.lo + f.hi) / 2, 2));
    RngStream rng(123);
    Image base = render_sample(spec, params, DefectKind::none, rng);
    Rect region = spec.object_region;

    for (VisualKind kind : {VisualKind::blob, VisualKind::scratch, VisualKind::brightness}) {
        for (uint64_t seed = 0; seed < 30; ++seed) {
            RngStream r(derive_seed(1000, StreamTag::fixture, seed));
            Image out = inject_visual_defect(base, kind, region, r);
            int changed = count_region_diffs(base, out, region);
            INFO("kind=" << static_cast<int>(kind) << " seed=" << seed);
            REQUIRE(changed >= 41);   // >= 1% of 4096
            REQUIRE(changed <= 1024); // <= 25% of 4096
            // Outside the region nothing moves.
            int total = 0;
            for (int y = 0; y < base.height(); ++y)
                for (int x = 0; x < base.width(); ++x)
                    if (base.at(y, x) != out.at(y, x)) ++total;
            REQUIRE(total == changed);
            // All pixel values stay in [0,1].
            for (double p : out.pixels()) {
                REQUIRE(p >= 0.0);
                REQUIRE(p <= 1.0);
            }
        }
    }

    // Determinism: same stream twice, same output.
    RngStream ra(9), rb(9);
    Image oa = inject_visual_defect(base, VisualKind::blob, region, ra);
    Image ob = inject_visual_defect(base, VisualKind::blob, region, rb);
    REQUIRE(oa.pixels() == ob.pixels());
}

TEST_CASE("corpus write/load round-trip") {
    auto dir = std::filesystem::temp_directory_path() / "oanet_test_corpus";
    std::filesystem::remove_all(dir);
    CorpusSpec spec = small_spec(12, 5, 21);
    auto samples = generate_corpus(spec);
    write_corpus(samples, spec, dir);

    LoadedCorpus loaded = load_corpus(dir);
    REQUIRE(loaded.samples.size() == samples.size());
    REQUIRE(loaded.keys.size() == spec.schema.size());
    REQUIRE(loaded.keys[0] == "TEMP");
    for (size_t i = 0; i < samples.size(); ++i) {
        REQUIRE(loaded.samples[i].id == samples[i].id);
        REQUIRE(loaded.samples[i].label == samples[i].label);
        REQUIRE(loaded.samples[i].kind == samples[i].kind);
        REQUIRE(loaded.samples[i].param_truth == samples[i].param_truth);  // g17 exactness
        REQUIRE(loaded.samples[i].image.size() == samples[i].image.size());
        for (size_t p = 0; p < samples[i].image.size(); ++p)
            REQUIRE(quantize8(loaded.samples[i].image.pixels()[p]) ==
                    quantize8(samples[i].image.pixels()[p]));
    }
}
