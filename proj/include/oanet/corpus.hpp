#pragma once

// Synthetic AOI corpus generator.
//
// Each sample is a 128x128 grayscale render: a textured "object" in the
// lower-left quadrant and a block of KEY=VALUE parameter lines in the top
// half. Defects are visual (object anomaly), parametric (out-of-range field
// values), or both. The printed values are quantized to the schema's decimal
// places before being stored as ground truth, so a correct OCR read is
// bit-equal to the manifest truth.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oanet/common.hpp"
#include "oanet/glyph_atlas.hpp"
#include "oanet/image.hpp"
#include "oanet/rng.hpp"

namespace oanet {

enum class Label : int { non_defect = 0, defect = 1 };
enum class DefectKind : int { none = 0, visual = 1, parametric = 2, both = 3 };
enum class VisualKind : int { blob = 0, scratch = 1, brightness = 2 };

inline const char* to_string(Label l) { return l == Label::defect ? "defect" : "non_defect"; }
inline const char* to_string(DefectKind k) {
    switch (k) {
        case DefectKind::none: return "none";
        case DefectKind::visual: return "visual";
        case DefectKind::parametric: return "parametric";
        case DefectKind::both: return "both";
    }
    return "?";
}

inline Label label_from_string(const std::string& s) {
    if (s == "defect") return Label::defect;
    if (s == "non_defect") return Label::non_defect;
    throw InputError("unknown label: " + s);
}

inline DefectKind defect_kind_from_string(const std::string& s) {
    if (s == "none") return DefectKind::none;
    if (s == "visual") return DefectKind::visual;
    if (s == "parametric") return DefectKind::parametric;
    if (s == "both") return DefectKind::both;
    throw InputError("unknown defect_kind: " + s);
}

struct FieldSpec {
    std::string key;
    double lo = 0.0;
    double hi = 1.0;
    std::vector<std::pair<double, double>> anomalous;
    int decimals = 2;
};

using Schema = std::vector<FieldSpec>;

// Nominal and anomalous bands are separated by enough of a gap that decimal
// quantization can never move a value across the boundary. Six fields print
// anomalies at the same character count and, where possible, the same
// leading digit as nominal values, so only a value-level read can flag them.
// GAIN and FOCUS are wide-format: their anomalies gain one digit and so fill
// the right-justified value box that an in-range print leaves one glyph
// short. The closed key-to-value notch is the one parametric symptom a
// low-resolution image model can sense without resolving digit shapes.
inline Schema default_schema() {
    return {
        {"TEMP", 35.0, 75.0, {{76.0, 79.0}}, 2},
        {"PRESS", 100.0, 400.0, {{405.0, 495.0}}, 2},
        {"EXPO", 10.0, 60.0, {{61.0, 69.0}}, 2},
        {"GAIN", 100.0, 800.0, {{1000.0, 8000.0}}, 0},
        {"POSX", 20.0, 44.0, {{45.0, 49.0}}, 2},
        {"POSY", 20.0, 44.0, {{45.0, 49.0}}, 2},
        {"FOCUS", 100.0, 900.0, {{1000.0, 9000.0}}, 0},
        {"BIAS", 1.0, 3.0, {{3.1, 3.9}}, 2},
    };
}

struct CorpusSpec {
    int total_count = 971;
    int defect_count = 384;
    int image_height = 128;
    int image_width = 128;
    Rect object_region{0, 64, 64, 64};
    Schema schema = default_schema();
    std::array<double, 3> defect_mix{0.3, 0.5, 0.2};  // visual, parametric, both
    uint64_t seed = 0;
    int glyph_scale = 1;
    int text_margin_x = 4;
    int text_jitter_x = 0;

    // Text lines live above the object region, full width, one 8*scale slot
    // per schema field starting at the top edge.
    Rect text_region() const { return Rect{0, 0, image_width, object_region.y}; }
    int line_slot_height() const { return 8 * glyph_scale; }
    int line_y(int index) const { return index * line_slot_height(); }

    void validate() const {
        if (total_count <= 0) throw ValidationError("corpus.total_count must be positive");
        if (defect_count < 0 || defect_count > total_count)
            throw ValidationError("corpus.defect_count must be in [0, total_count]");
        if (image_height < 2 || image_width < 2)
            throw ValidationError("corpus.image size must be at least 2x2");
        if (!object_region.fits_in(image_width, image_height))
            throw ValidationError("corpus.object_region must fit inside the image");
        double mix_sum = defect_mix[0] + defect_mix[1] + defect_mix[2];
        if (std::abs(mix_sum - 1.0) > 1e-12)
            throw ValidationError("corpus.defect_mix fractions must sum to 1");
        for (double m : defect_mix)
            if (m < 0.0) throw ValidationError("corpus.defect_mix fractions must be non-negative");
        if (schema.empty()) throw ValidationError("corpus.param_schema must be non-empty");
        if (glyph_scale < 1) throw ValidationError("corpus.glyph_scale must be >= 1");
        if (text_jitter_x < 0) throw ValidationError("corpus.text_jitter_x must be >= 0");
        for (const auto& f : schema) {
            if (f.key.empty()) throw ValidationError("corpus.param_schema key must be non-empty");
            for (char c : f.key)
                if (c < 'A' || c > 'Z')
                    throw ValidationError("corpus.param_schema key '" + f.key +
                                          "' must use A-Z only");
            if (!(f.lo < f.hi))
                throw ValidationError("corpus.param_schema " + f.key + ": nominal lo must be < hi");
            if (f.anomalous.empty())
                throw ValidationError("corpus.param_schema " + f.key +
                                      ": anomalous_ranges must be non-empty");
            for (auto [a, b] : f.anomalous) {
                if (!(a < b))
                    throw ValidationError("corpus.param_schema " + f.key +
                                          ": anomalous interval lo must be < hi");
                if (std::max(a, f.lo) <= std::min(b, f.hi))
                    throw ValidationError("corpus.param_schema " + f.key +
                                          ": anomalous interval overlaps nominal_range");
            }
            if (f.decimals < 0 || f.decimals > 6)
                throw ValidationError("corpus.param_schema " + f.key + ": decimals must be in [0,6]");
        }
        int lines_height = static_cast<int>(schema.size()) * line_slot_height();
        if (lines_height > text_region().h)
            throw ValidationError("corpus.param_schema does not fit above object_region");
    }
};

struct SyntheticSample {
    std::string id;
    Image image;
    std::vector<double> param_truth;  // schema order
    Label label = Label::non_defect;
    DefectKind kind = DefectKind::none;
};

// Largest-remainder apportionment of `total` into parts proportional to
// `fractions`. Ties in the remainder go to the lower index.
inline std::vector<int> apportion(int total, const std::vector<double>& fractions) {
    size_t n = fractions.size();
    std::vector<int> out(n, 0);
    std::vector<double> rem(n, 0.0);
    int assigned = 0;
    for (size_t i = 0; i < n; ++i) {
        double q = total * fractions[i];
        out[i] = static_cast<int>(std::floor(q));
        rem[i] = q - out[i];
        assigned += out[i];
    }
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return rem[a] > rem[b]; });
    for (int i = 0; i < total - assigned; ++i) out[order[i % n]] += 1;
    return out;
}

// Value exactly as printed, then parsed back, so ground truth equals what a
// perfect read of the image yields.
inline double quantize_value(double v, int decimals) {
    return std::strtod(fixed_decimals(v, decimals).c_str(), nullptr);
}

namespace detail {

// Banded sinusoidal texture plus per-pixel noise. Draw count is a pure
// function of the region size, so parametric and clean renders consume the
// stream identically.
inline void render_texture(Image& img, const Rect& region, RngStream& rng) {
    double theta = rng.uniform(0.0, M_PI);
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    double period = 14.0 + 6.0 * rng.uniform();
    double cx = std::cos(theta), sy = std::sin(theta);
    for (int y = region.y; y < region.y + region.h; ++y) {
        for (int x = region.x; x < region.x + region.w; ++x) {
            double wave = std::sin(2.0 * M_PI * (x * cx + y * sy) / period + phase);
            double noise = rng.uniform(-0.02, 0.02);
            img.at(y, x) = 0.16 + 0.06 * wave + noise;
        }
    }
}

// Benign dark patches: every sample, defect or not, carries a few near-black
// rectangles in the object region, so occlusion-shaped darkness is a normal
// feature of both classes rather than evidence of anything. The draw count
// is fixed regardless of how many patches land, keeping paired renders
// stream-aligned.
inline void render_occlusions(Image& img, const Rect& region, RngStream& rng) {
    int n = rng.uniform_int(3, 8);
    for (int p = 0; p < 8; ++p) {
        int w = rng.uniform_int(12, 28);
        int h = rng.uniform_int(12, 28);
        int x0 = region.x + rng.uniform_int(0, region.w - w - 1);
        int y0 = region.y + rng.uniform_int(0, region.h - h - 1);
        double v = rng.uniform(0.0, 0.05);
        if (p >= n) continue;
        for (int y = y0; y < y0 + h; ++y)
            for (int x = x0; x < x0 + w; ++x) img.at(y, x) = v;
    }
}

}  // namespace detail

// Visual defects are bright anomalies against the dark texture (texture
// peaks at 0.24), sized to stay visible after the encoder's 2x downsample.
// The brightness step of a defect edge is several times the step a zeroed
// occlusion cell leaves, so occlusion starves detection of evidence instead
// of mimicking it.
// Changed-pixel counts stay within [1%, 25%] of a 64x64 region by
// construction: blob 254..707, scratch 160..312, brightness 324..900.
inline Image inject_visual_defect(const Image& input, VisualKind kind, const Rect& region,
                                  RngStream& rng) {
    if (!region.fits_in(input.width(), input.height()))
        throw InputError("inject_visual_defect: region outside image");
    if (region.w < 48 || region.h < 48)
        throw InputError("inject_visual_defect: region must be at least 48x48");
    Image img = input;
    switch (kind) {
        case VisualKind::blob: {
            int r = rng.uniform_int(9, 15);
            int cx = region.x + rng.uniform_int(r + 1, region.w - r - 2);
            int cy = region.y + rng.uniform_int(r + 1, region.h - r - 2);
            double value = rng.uniform(0.92, 1.0);
            for (int y = cy - r; y <= cy + r; ++y)
                for (int x = cx - r; x <= cx + r; ++x)
                    if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) img.at(y, x) = value;
            break;
        }
        case VisualKind::scratch: {
            // Diagonal run so any axis-aligned occlusion stripe crosses it.
            int len = rng.uniform_int(40, std::min(52, std::min(region.w, region.h) - 6));
            int w = rng.uniform_int(4, 6);
            int dir = rng.uniform_int(0, 1);  // 0: down-right, 1: up-right
            int x0 = region.x + rng.uniform_int(0, region.w - len - w);
            int y0 = dir == 0 ? region.y + rng.uniform_int(0, region.h - len - 1)
                              : region.y + rng.uniform_int(len - 1, region.h - 1);
            double value = rng.uniform(0.90, 0.98);
            int sy = dir == 0 ? 1 : -1;
            for (int t = 0; t < len; ++t)
                for (int j = 0; j < w; ++j) img.at(y0 + sy * t, x0 + t + j) = value;
            break;
        }
        case VisualKind::brightness: {
            int w = rng.uniform_int(18, 30);
            int h = rng.uniform_int(18, 30);
            int x0 = region.x + rng.uniform_int(0, region.w - w - 1);
            int y0 = region.y + rng.uniform_int(0, region.h - h - 1);
            double delta = rng.uniform(0.45, 0.60);
            for (int y = y0; y < y0 + h; ++y)
                for (int x = x0; x < x0 + w; ++x)
                    img.at(y, x) = std::min(1.0, img.at(y, x) + delta);
            break;
        }
    }
    return img;
}

inline std::string field_text(const FieldSpec& f, double value) {
    return f.key + "=" + fixed_decimals(value, f.decimals);
}

// Widest print the field can produce, in glyphs. Values are right-justified
// in a box this wide, so an in-range print leaves an ink-free stretch after
// the key and the widest anomalous print fills the box, closing that gap.
inline int value_box_glyphs(const FieldSpec& f) {
    size_t w = std::max(fixed_decimals(f.lo, f.decimals).size(),
                        fixed_decimals(f.hi, f.decimals).size());
    for (auto [a, b] : f.anomalous)
        w = std::max({w, fixed_decimals(a, f.decimals).size(),
                      fixed_decimals(b, f.decimals).size()});
    return static_cast<int>(w);
}

// Pure function of (spec, params, kind, stream): bit-identical images for
// identical inputs. The texture consumes a fixed draw count before any defect
// draw, so a parametric sample's object region matches a clean render pair.
inline Image render_sample(const CorpusSpec& spec, const std::vector<double>& params,
                           DefectKind kind, RngStream& rng) {
    if (params.size() != spec.schema.size())
        throw InputError("render_sample: params do not match schema");
    // Zero background: writing zeros outside glyph ink and the object region
    // is then a no-op, so occlusion in those areas changes nothing and only
    // ink removal is observable.
    Image img(spec.image_height, spec.image_width, 0.0);
    detail::render_texture(img, spec.object_region, rng);
    detail::render_occlusions(img, spec.object_region, rng);

    GlyphAtlas atlas(spec.glyph_scale);
    for (size_t i = 0; i < spec.schema.size(); ++i) {
        const FieldSpec& f = spec.schema[i];
        std::string value = fixed_decimals(params[i], f.decimals);
        int key_glyphs = static_cast<int>(f.key.size()) + 1;  // "KEY="
        int box = std::max(value_box_glyphs(f), static_cast<int>(value.size()));
        int width = atlas.text_width(key_glyphs + box);
        int slack = spec.image_width - 2 * spec.text_margin_x - width;
        if (slack < 0)
            throw LayoutError(strfmt("render_sample: line '%s=%s' is %d px wide, text area is %d px",
                                     f.key.c_str(), value.c_str(), width,
                                     spec.image_width - 2 * spec.text_margin_x));
        // Horizontal jitter per line: glyphs never sit at a repeatable pixel
        // address, so reading a digit's identity from the raster means solving
        // translation too. The value is right-justified in its box, making the
        // key-to-value gap a translation-invariant line feature. The reader
        // concatenates ink runs, so the gap is transparent to it. One jitter
        // draw per line regardless of slack keeps paired renders aligned.
        int dx = rng.uniform_int(0, std::min(slack, spec.text_jitter_x));
        int x0 = spec.text_margin_x + dx;
        int y = spec.line_y(static_cast<int>(i));
        atlas.stamp_text(img, x0, y, f.key + "=", 1.0);
        int pad = box - static_cast<int>(value.size());
        atlas.stamp_text(img, x0 + atlas.pitch() * (key_glyphs + pad), y, value, 1.0);
    }

    if (kind == DefectKind::visual || kind == DefectKind::both) {
        VisualKind vk = static_cast<VisualKind>(rng.uniform_int(0, 2));
        img = inject_visual_defect(img, vk, spec.object_region, rng);
    }
    return img;
}

// True when every anomalous interval of f prints wider than the widest
// nominal value, so an out-of-range draw visibly lengthens the rendered line.
inline bool widens_when_anomalous(const FieldSpec& f) {
    size_t nominal = std::max(fixed_decimals(f.lo, f.decimals).size(),
                              fixed_decimals(f.hi, f.decimals).size());
    for (auto [a, b] : f.anomalous) {
        size_t w = std::min(fixed_decimals(a, f.decimals).size(),
                            fixed_decimals(b, f.decimals).size());
        if (w <= nominal) return false;
    }
    return true;
}

// Draws one parameter vector. Clean fields are uniform in the nominal range;
// parametric defects re-draw 2..4 distinct fields from anomalous intervals.
// At most one re-drawn field is wide-format, included for 80% of parametric
// defects. Keeping wide prints rare and single means the image-side symptom
// of a parametric defect is one extra glyph at one spot, while the
// value-level read still sees every re-drawn field.
inline std::vector<double> draw_params(const CorpusSpec& spec, DefectKind kind, RngStream& rng) {
    size_t k = spec.schema.size();
    std::vector<double> params(k);
    for (size_t i = 0; i < k; ++i) {
        const FieldSpec& f = spec.schema[i];
        params[i] = quantize_value(rng.uniform(f.lo, f.hi), f.decimals);
    }
    if (kind == DefectKind::parametric || kind == DefectKind::both) {
        std::vector<int> wide, narrow;
        for (size_t i = 0; i < k; ++i)
            (widens_when_anomalous(spec.schema[i]) ? wide : narrow).push_back(static_cast<int>(i));
        int m = std::min<int>(static_cast<int>(k), rng.uniform_int(2, 4));
        std::vector<int> fields;
        if (!wide.empty() && (narrow.empty() || rng.uniform() < 0.8))
            fields.push_back(wide[rng.uniform_int(0, static_cast<int>(wide.size()) - 1)]);
        int rest = std::clamp(m - static_cast<int>(fields.size()), fields.empty() ? 1 : 0,
                              static_cast<int>(narrow.size()));
        for (int j : rng.choose(static_cast<int>(narrow.size()), rest))
            fields.push_back(narrow[j]);
        std::sort(fields.begin(), fields.end());
        for (int fi : fields) {
            const FieldSpec& f = spec.schema[fi];
            auto [a, b] = f.anomalous[rng.uniform_int(0, static_cast<int>(f.anomalous.size()) - 1)];
            params[fi] = quantize_value(rng.uniform(a, b), f.decimals);
        }
    }
    return params;
}

inline std::vector<SyntheticSample> generate_corpus(const CorpusSpec& spec) {
    spec.validate();

    std::vector<int> kind_counts = apportion(
        spec.defect_count, {spec.defect_mix[0], spec.defect_mix[1], spec.defect_mix[2]});
    std::vector<DefectKind> kinds;
    kinds.reserve(spec.total_count);
    for (int i = 0; i < kind_counts[0]; ++i) kinds.push_back(DefectKind::visual);
    for (int i = 0; i < kind_counts[1]; ++i) kinds.push_back(DefectKind::parametric);
    for (int i = 0; i < kind_counts[2]; ++i) kinds.push_back(DefectKind::both);
    while (static_cast<int>(kinds.size()) < spec.total_count) kinds.push_back(DefectKind::none);
    RngStream assign = RngStream::derived(spec.seed, StreamTag::corpus_assign);
    assign.shuffle(kinds);

    std::vector<SyntheticSample> samples(spec.total_count);
    for (int i = 0; i < spec.total_count; ++i) {
        uint64_t sample_seed = derive_seed(spec.seed, StreamTag::corpus_sample, i);
        RngStream param_rng(derive_seed(sample_seed, 1));
        RngStream render_rng(derive_seed(sample_seed, 2));
        SyntheticSample& s = samples[i];
        s.id = strfmt("s%05d", i);
        s.kind = kinds[i];
        s.label = s.kind == DefectKind::none ? Label::non_defect : Label::defect;
        s.param_truth = draw_params(spec, s.kind, param_rng);
        s.image = render_sample(spec, s.param_truth, s.kind, render_rng);
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Corpus directory layout: DIR/manifest.csv + DIR/images/<id>.pgm.

inline void write_corpus(const std::vector<SyntheticSample>& samples, const CorpusSpec& spec,
                         const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    std::ofstream man(dir / "manifest.csv");
    if (!man) throw InputError("write_corpus: cannot open manifest in " + dir.string());
    man << "id,path,label,defect_kind";
    for (const auto& f : spec.schema) man << "," << f.key;
    man << "\n";
    for (const auto& s : samples) {
        std::string rel = "images/" + s.id + ".pgm";
        write_pgm(dir / rel, s.image);
        man << s.id << "," << rel << "," << to_string(s.label) << "," << to_string(s.kind);
        for (double v : s.param_truth) man << "," << g17(v);
        man << "\n";
    }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

struct LoadedCorpus {
    std::vector<SyntheticSample> samples;
    std::vector<std::string> keys;  // schema keys as recorded in the manifest
};

inline LoadedCorpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream man(dir / "manifest.csv");
    if (!man) throw InputError("load_corpus: cannot open manifest in " + dir.string());
    std::string line;
    if (!std::getline(man, line)) throw InputError("load_corpus: empty manifest");
    std::vector<std::string> header = split_csv_line(line);
    if (header.size() < 5 || header[0] != "id" || header[1] != "path" || header[2] != "label" ||
        header[3] != "defect_kind")
        throw InputError("load_corpus: unexpected manifest header");
    LoadedCorpus corpus;
    corpus.keys.assign(header.begin() + 4, header.end());
    while (std::getline(man, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols = split_csv_line(line);
        if (cols.size() != header.size())
            throw InputError("load_corpus: bad manifest row for id " +
                             (cols.empty() ? std::string("?") : cols[0]));
        SyntheticSample s;
        s.id = cols[0];
        s.label = label_from_string(cols[2]);
        s.kind = defect_kind_from_string(cols[3]);
        for (size_t i = 4; i < cols.size(); ++i)
            s.param_truth.push_back(std::strtod(cols[i].c_str(), nullptr));
        s.image = read_pgm(dir / cols[1]);
        corpus.samples.push_back(std::move(s));
    }
    return corpus;
}

}  // namespace oanet
