#pragma once

// Fixed-pitch 5x7 bitmap font used both to render the parameter block into
// synthetic images and as the template set for recognition.
//
// Layout invariants the recognizer relies on:
//  - every glyph occupies a 5-column cell, cells advance by 6 columns
//    (one blank gutter), so text is strictly fixed pitch;
//  - every letter A..Z has ink somewhere in column 0 of its cell. Text lines
//    always start with a key letter, which makes the first ink column of a
//    line the anchor for cell segmentation;
//  - digits and punctuation may be narrower than 5 columns but are still
//    stamped on the same pitch.

#include <array>
#include <cstdint>
#include <map>
#include <string>

#include "oanet/common.hpp"
#include "oanet/image.hpp"

namespace oanet {

inline constexpr int kGlyphRows = 7;
inline constexpr int kGlyphCols = 5;
inline constexpr int kGlyphPitchCols = 6;

using GlyphBitmap = std::array<uint8_t, kGlyphRows * kGlyphCols>;

namespace detail {

struct GlyphDef {
    char ch;
    const char* rows[kGlyphRows];
};

// clang-format off
inline constexpr GlyphDef kFont[] = {
    {'0', {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."}},
    {'1', {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."}},
    {'2', {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"}},
    {'3', {".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."}},
    {'4', {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."}},
    {'5', {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."}},
    {'6', {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."}},
    {'7', {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."}},
    {'8', {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."}},
    {'9', {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."}},
{'A', {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
    {'B', {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."}},
    {'C', {".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."}},
    {'D', {"####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."}},
    {'E', {"#####", "#....", "#....", "####.", "#....", "#....", "#####"}},
    {'F', {"#####", "#....", "#....", "####.", "#....", "#....", "#...."}},
    {'G', {".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."}},
    {'H', {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
    {'I', {"###..", ".#...", ".#...", ".#...", ".#...", ".#...", "###.."}},
    {'J', {"..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."}},
    {'K', {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"}},
    {'L', {"#....", "#....", "#....", "#....", "#....", "#....", "#####"}},
    {'M', {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"}},
    {'N', {"#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"}},
    {'O', {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}},
    {'P', {"####.", "#...#", "#...#", "####.", "#....", "#....", "#...."}},
    {'Q', {".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"}},
    {'R', {"####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"}},
    {'S', {".####", "#....", "#....", ".###.", "....#", "....#", "####."}},
    {'T', {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."}},
    {'U', {"#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}},
    {'V', {"#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."}},
    {'W', {"#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"}},
    {'X', {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"}},
    {'Y', {"#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."}},
    {'Z', {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"}},
    {'.', {".....", ".....", ".....", ".....", ".....", ".##..", ".##.."}},
    {'=', {".....", ".....", "#####", ".....", "#####", ".....", "....."}},
    {'-', {".....", ".....", ".....", ".###.", ".....", ".....", "....."}},
    {':', {".....", ".##..", ".##..", ".....", ".##..", ".##..", "....."}},
};
// clang-format on

}  // namespace detail

class GlyphAtlas {
public:
    explicit GlyphAtlas(int scale = 1) : scale_(scale) {
        if (scale < 1) throw ValidationError("GlyphAtlas: scale must be >= 1");
        for (const auto& def : detail::kFont) {
            GlyphBitmap bm{};
            for (int r = 0; r < kGlyphRows; ++r)
                for (int c = 0; c < kGlyphCols; ++c)
                    bm[r * kGlyphCols + c] = def.rows[r][c] == '#' ? 1 : 0;
            glyphs_[def.ch] = bm;
            alphabet_.push_back(def.ch);
        }
    }

    int scale() const { return scale_; }
    int cell_width() const { return kGlyphCols * scale_; }
    int cell_height() const { return kGlyphRows * scale_; }
    int pitch() const { return kGlyphPitchCols * scale_; }
    const std::string& alphabet() const { return alphabet_; }

    bool has(char c) const { return glyphs_.count(c) != 0; }

    const GlyphBitmap& bitmap(char c) const {
        auto it = glyphs_.find(c);
        if (it == glyphs_.end()) throw InputError(strfmt("GlyphAtlas: no glyph '%c'", c));
        return it->second;
    }

    // Ink value of the scaled cell at (y, x), y in [0, 7*scale), x in [0, 5*scale).
    bool cell_ink(char c, int y, int x) const {
        return bitmap(c)[(y / scale_) * kGlyphCols + (x / scale_)] != 0;
    }

    // Width in pixels of an n-glyph run (trailing gutter not counted).
    int text_width(int n) const { return n <= 0 ? 0 : n * pitch() - scale_; }

    void stamp(Image& img, int x, int y, char c, double ink = 1.0) const {
        const GlyphBitmap& bm = bitmap(c);
        for (int r = 0; r < cell_height(); ++r)
            for (int col = 0; col < cell_width(); ++col)
                if (bm[(r / scale_) * kGlyphCols + (col / scale_)]) img.at(y + r, x + col) = ink;
    }

    // Stamps text left to right on the fixed pitch; the caller is responsible
    // for checking text_width() against the available area first.
    void stamp_text(Image& img, int x, int y, const std::string& text, double ink = 1.0) const {
        int cx = x;
        for (char c : text) {
            stamp(img, cx, y, c, ink);
            cx += pitch();
        }
    }

private:
    int scale_;
    std::map<char, GlyphBitmap> glyphs_;
    std::string alphabet_;
};

}  // namespace oanet
