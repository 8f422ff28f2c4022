#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fontgen/common.hpp"
#include "fontgen/corpus.hpp"
#include "fontgen/png_io.hpp"

namespace fontgen {

// Comparison sheet: for every font two adjacent rows (ground truth above its
// generated counterpart), one column per character. Cells carry the source
// glyph pixels verbatim; all annotation lives in the gutter between cells,
// which is drawn black around columns that served as style references.
inline GrayImage compose_comparison_grid(const std::vector<GlyphImage>& generated,
                                         const std::vector<GlyphImage>& ground_truth,
                                         const std::vector<ReferenceSet>& refs) {
  if (generated.empty()) throw ArgumentError("comparison grid needs at least one generated glyph");
  const int size = generated[0].size;

  std::map<std::pair<int, int>, const GlyphImage*> gen, truth;
  std::set<int> fonts;
  std::set<int> chars;
  for (const GlyphImage& g : generated) {
    if (g.size != size) throw ArgumentError("comparison grid: mixed glyph sizes");
    gen[{g.font_id, g.char_id}] = &g;
    fonts.insert(g.font_id);
    chars.insert(g.char_id);
  }
  for (const GlyphImage& g : ground_truth) {
    if (g.size != size) throw ArgumentError("comparison grid: mixed glyph sizes");
    truth[{g.font_id, g.char_id}] = &g;
  }
  std::map<int, std::set<int>> ref_chars;
  for (const ReferenceSet& r : refs) ref_chars[r.font_id].insert(r.char_ids.begin(), r.char_ids.end());

  constexpr int kGutter = 2;
  constexpr unsigned char kGutterGray = 160;
  const int cols = static_cast<int>(chars.size());
  const int rows = 2 * static_cast<int>(fonts.size());
  GrayImage sheet;
  sheet.width = cols * size + (cols + 1) * kGutter;
  sheet.height = rows * size + (rows + 1) * kGutter;
  sheet.pixels.assign(static_cast<std::size_t>(sheet.width) * sheet.height, kGutterGray);

  auto blit = [&](int row, int col, const GlyphImage* g) {
    if (!g) return;  // absent cells keep the gutter tone
    const int top = kGutter + row * (size + kGutter);
    const int left = kGutter + col * (size + kGutter);
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c) {
        const real clamped = std::min<real>(1.0, std::max<real>(0.0, g->at(r, c)));
        sheet.pixels[static_cast<std::size_t>(top + r) * sheet.width + (left + c)] =
            static_cast<unsigned char>(std::lround(clamped * 255.0));
      }
  };
  auto frame = [&](int row, int col) {
    const int top = row * (size + kGutter);
    const int left = col * (size + kGutter);
    const int extent = size + 2 * kGutter;
    for (int r = 0; r < extent; ++r)
      for (int c = 0; c < extent; ++c) {
        const bool border = r < kGutter || r >= extent - kGutter || c < kGutter || c >= extent - kGutter;
        if (border) sheet.pixels[static_cast<std::size_t>(top + r) * sheet.width + (left + c)] = 0;
      }
  };

  int row = 0;
  for (int font : fonts) {
    int col = 0;
    for (int ch : chars) {
      auto t = truth.find({font, ch});
      auto g = gen.find({font, ch});
      blit(row, col, t == truth.end() ? nullptr : t->second);
      blit(row + 1, col, g == gen.end() ? nullptr : g->second);
      auto rf = ref_chars.find(font);
      if (rf != ref_chars.end() && rf->second.count(ch)) {
        frame(row, col);
        frame(row + 1, col);
      }
      ++col;
    }
    row += 2;
  }
  return sheet;
}

inline void emit_comparison_grid(const std::vector<GlyphImage>& generated,
                                 const std::vector<GlyphImage>& ground_truth,
                                 const std::vector<ReferenceSet>& refs, const std::string& out_file) {
  write_gray_png(out_file, compose_comparison_grid(generated, ground_truth, refs));
}

}  // namespace fontgen
