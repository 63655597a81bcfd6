#pragma once

// Template OCR over the glyph atlas.
//
// Pipeline: projection-profile line detection -> column-gap glyph
// segmentation -> normalized cross-correlation against every atlas template.
// A clean render matches its own templates exactly, so any sub-1.0
// confidence observed downstream is attributable to injected perturbation.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "oanet/common.hpp"
#include "oanet/corpus.hpp"
#include "oanet/glyph_atlas.hpp"
#include "oanet/image.hpp"
#include "oanet/rng.hpp"

namespace oanet {

// Pixels above this level count as ink; background is 0, ink 1.0, and the
// grid mask writes 0, so masked ink reads as blank rather than merging runs.
inline constexpr double kInkLevel = 0.5;

struct ParamRecord {
    std::vector<std::optional<double>> values;  // schema order
    std::vector<double> confidence;             // in [0,1], one per field

    size_t size() const { return values.size(); }
    bool missing(size_t i) const { return !values[i].has_value(); }
};

inline std::vector<Rect> detect_text_lines(const Image& img, const Rect& region) {
    if (!region.fits_in(img.width(), img.height()))
        throw InputError("detect_text_lines: region outside image");
    std::vector<Rect> boxes;
    int run_start = -1;
    for (int y = region.y; y <= region.y + region.h; ++y) {
        bool ink = false;
        if (y < region.y + region.h)
            for (int x = region.x; x < region.x + region.w && !ink; ++x)
                ink = img.at(y, x) > kInkLevel;
        if (ink && run_start < 0) run_start = y;
        if (!ink && run_start >= 0) {
            int x_lo = region.x + region.w, x_hi = region.x - 1;
            for (int yy = run_start; yy < y; ++yy)
                for (int x = region.x; x < region.x + region.w; ++x)
                    if (img.at(yy, x) > kInkLevel) {
                        x_lo = std::min(x_lo, x);
                        x_hi = std::max(x_hi, x);
                    }
            boxes.push_back(Rect{x_lo, run_start, x_hi - x_lo + 1, y - run_start});
            run_start = -1;
        }
    }
    return boxes;
}

namespace detail {

// Column span of a glyph's ink within its 5-column cell. Every glyph's span
// is contiguous (no internal blank column), so a column-gap run is always a
// whole glyph.
struct GlyphSpan {
    char ch;
    int c0, c1;
};

inline std::vector<GlyphSpan> glyph_spans(const GlyphAtlas& atlas) {
    std::vector<GlyphSpan> spans;
    for (char c : atlas.alphabet()) {
        const GlyphBitmap& bm = atlas.bitmap(c);
        int c0 = kGlyphCols, c1 = -1;
        for (int col = 0; col < kGlyphCols; ++col)
            for (int row = 0; row < kGlyphRows; ++row)
                if (bm[row * kGlyphCols + col]) {
                    c0 = std::min(c0, col);
                    c1 = std::max(c1, col);
                }
        spans.push_back({c, c0, c1});
    }
    return spans;
}

// NCC between an image window and a binary template, both 5x7 cells at the
// atlas scale. Out-of-image pixels read as 0. Affine intensity changes of the
// window (a*x+b, a>0) leave the value fixed; self-match gives exactly 1 after
// the documented snap.
inline double ncc_cell(const Image& img, int x0, int y0, const GlyphAtlas& atlas, char c) {
    const int cw = atlas.cell_width(), ch = atlas.cell_height();
    const int s = atlas.scale();
    const GlyphBitmap& bm = atlas.bitmap(c);
    const int n = cw * ch;
    double sum_a = 0, sum_b = 0;
    std::vector<double> a(static_cast<size_t>(n));
    std::vector<double> b(static_cast<size_t>(n));
    int idx = 0;
    for (int dy = 0; dy < ch; ++dy) {
        for (int dx = 0; dx < cw; ++dx, ++idx) {
            int y = y0 + dy, x = x0 + dx;
            double av = (y >= 0 && y < img.height() && x >= 0 && x < img.width()) ? img.at(y, x)
                                                                                  : 0.0;
            double bv = bm[(dy / s) * kGlyphCols + (dx / s)] ? 1.0 : 0.0;
            a[idx] = av;
            b[idx] = bv;
            sum_a += av;
            sum_b += bv;
        }
    }
    double mean_a = sum_a / n, mean_b = sum_b / n;
    double sab = 0, saa = 0, sbb = 0;
    for (int i = 0; i < n; ++i) {
        double da = a[i] - mean_a, db = b[i] - mean_b;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    double v = sab / std::sqrt(saa * sbb);
    if (v >= 1.0 - 1e-9) return 1.0;  // snap: exact self-match despite roundoff
    return std::max(0.0, v);
}

}  // namespace detail

struct LineRead {
    std::string text;
    std::vector<double> confidence;  // per glyph
};

// Recognizes one detected line. Cells are column-gap runs; each run is
// matched against every template by aligning the run to that template's own
// ink span, which handles narrow glyphs ('.', '-', '1') on the fixed pitch.
inline LineRead recognize_line(const Image& img, const Rect& box, const GlyphAtlas& atlas) {
    // Spans depend only on the fixed font table, not on the atlas scale.
    static const std::vector<detail::GlyphSpan> spans = detail::glyph_spans(atlas);

    LineRead out;
    const int s = atlas.scale();
    int run_start = -1;
    for (int x = box.x; x <= box.x + box.w; ++x) {
        bool ink = false;
        if (x < box.x + box.w)
            for (int y = box.y; y < box.y + box.h && !ink; ++y) ink = img.at(y, x) > kInkLevel;
        if (ink && run_start < 0) run_start = x;
        if (!ink && run_start >= 0) {
            double best = -2.0;
            char best_ch = '?';
            for (const auto& sp : spans) {
                int cell_x = run_start - sp.c0 * s;
                double v = detail::ncc_cell(img, cell_x, box.y, atlas, sp.ch);
                if (v > best) {
                    best = v;
                    best_ch = sp.ch;
                }
            }
            out.text.push_back(best_ch);
            out.confidence.push_back(best);
            run_start = -1;
        }
    }
    return out;
}

namespace detail {

// Accepts exactly the generator's value grammar: -?digits.digits / -?digits.
inline bool parse_value(const std::string& s, double& out) {
    if (s.empty()) return false;
    size_t i = s[0] == '-' ? 1 : 0;
    size_t digits = 0;
    while (i < s.size() && s[i] >= '0' && s[i] <= '9') {
        ++i;
        ++digits;
    }
    if (digits == 0) return false;
    if (i < s.size()) {
        if (s[i] != '.') return false;
        ++i;
        size_t frac = 0;
        while (i < s.size() && s[i] >= '0' && s[i] <= '9') {
            ++i;
            ++frac;
        }
        if (frac == 0 || i != s.size()) return false;
    }
    out = std::strtod(s.c_str(), nullptr);
    return true;
}

}  // namespace detail

// Reads all schema fields out of an image. A field is Missing when its key
// never shows up, its value fails to parse, or the mean NCC of the value
// glyphs falls below the threshold. Missing fields carry their observed
// confidence (0 when the key was absent entirely).
inline ParamRecord extract_params(const Image& img, const GlyphAtlas& atlas, const Schema& schema,
                                  double confidence_threshold, const Rect& text_region) {
    if (schema.empty()) throw InputError("extract_params: empty schema");
    ParamRecord rec;
    rec.values.assign(schema.size(), std::nullopt);
    rec.confidence.assign(schema.size(), 0.0);
    std::vector<bool> seen(schema.size(), false);

    for (const Rect& box : detect_text_lines(img, text_region)) {
        LineRead line = recognize_line(img, box, atlas);
        size_t eq = line.text.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 >= line.text.size()) continue;
        std::string key = line.text.substr(0, eq);
        std::string value_str = line.text.substr(eq + 1);

        size_t field = schema.size();
        for (size_t i = 0; i < schema.size(); ++i)
            if (schema[i].key == key) {
                field = i;
                break;
            }
        if (field == schema.size()) continue;
        if (seen[field]) continue;  // first occurrence wins
        seen[field] = true;

        double conf = 0.0;
        for (size_t i = eq + 1; i < line.confidence.size(); ++i) conf += line.confidence[i];
        conf /= static_cast<double>(line.confidence.size() - eq - 1);
        rec.confidence[field] = conf;

        double value = 0.0;
        if (!detail::parse_value(value_str, value)) continue;
        if (conf < confidence_threshold) continue;
        rec.values[field] = quantize_value(value, schema[field].decimals);
    }
    return rec;
}

inline ParamRecord extract_params(const SyntheticSample& sample, const GlyphAtlas& atlas,
                                  const CorpusSpec& spec, double confidence_threshold) {
    return extract_params(sample.image, atlas, spec.schema, confidence_threshold,
                          spec.text_region());
}

// Blanks exactly ceil(rate*k) fields, chosen uniformly without replacement.
inline ParamRecord inject_missing(const ParamRecord& record, double rate, RngStream& rng) {
    if (rate < 0.0 || rate > 1.0) throw ValidationError("inject_missing: rate must be in [0,1]");
    ParamRecord out = record;
    int k = static_cast<int>(record.size());
    int count = static_cast<int>(std::ceil(rate * k));
    if (count == 0) return out;
    for (int i : rng.choose(k, std::min(count, k))) {
        out.values[i] = std::nullopt;
        out.confidence[i] = 0.0;
    }
    return out;
}

}  // namespace oanet
