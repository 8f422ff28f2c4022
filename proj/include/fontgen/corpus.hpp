#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fontgen/common.hpp"
#include "fontgen/png_io.hpp"
#include "fontgen/rng.hpp"
#include "fontgen/tensor.hpp"

namespace fontgen {

// Pixel convention throughout: 0 = ink, 1 = background, values in [0,1].
struct GlyphImage {
  int font_id = -1;
  int char_id = -1;
  int size = 0;
  std::vector<real> pixels;  // row-major, size*size

  real at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * size + c]; }
  real& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * size + c]; }
};

struct ReferenceSet {
  int font_id = -1;
  std::vector<int> char_ids;

  int n() const { return static_cast<int>(char_ids.size()); }
};

// Style knobs applied to every skeleton of one synthetic font. Rendering is a
// pure function of (skeleton, StyleParams), so identical inputs re-render to
// identical images.
struct StyleParams {
  int stroke_width = 2;        // 1..3; maps to a stroke radius in pixels
  real slant = 0.0;            // horizontal shear factor
  bool serif = false;          // short cross ticks at stroke endpoints
  real contrast = 1.0;         // peak ink intensity in (0,1]
  std::uint64_t jitter_seed = 0;  // 0 disables per-glyph vertex jitter
};

// A character skeleton is a set of polylines in [0,1]^2 coordinates, shared
// by every font so that "same character" is well defined across styles.
struct CharSkeleton {
  std::vector<std::vector<std::pair<real, real>>> strokes;
};

class GlyphCorpus {
 public:
  int image_size() const { return image_size_; }
  int content_font_id() const { return content_font_id_; }
  const std::vector<int>& train_fonts() const { return train_fonts_; }
  const std::vector<int>& eval_fonts() const { return eval_fonts_; }
  const std::vector<int>& train_chars() const { return train_chars_; }
  const std::vector<int>& val_chars() const { return val_chars_; }

  std::vector<int> all_chars() const {
    std::vector<int> out = train_chars_;
    out.insert(out.end(), val_chars_.begin(), val_chars_.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  std::size_t num_glyphs() const { return glyphs_.size(); }

  bool has_glyph(int font_id, int char_id) const { return glyphs_.count({font_id, char_id}) != 0; }

  const GlyphImage& glyph(int font_id, int char_id) const {
    auto it = glyphs_.find({font_id, char_id});
    if (it == glyphs_.end())
      throw DataError("no glyph for font " + std::to_string(font_id) + ", char " + std::to_string(char_id));
    return it->second;
  }

  const GlyphImage& content_reference(int char_id) const {
    auto it = content_.find(char_id);
    if (it == content_.end()) throw DataError("no content glyph for char " + std::to_string(char_id));
    return it->second;
  }

  // Synthesis metadata; empty for imported corpora.
  const std::map<int, StyleParams>& style_params() const { return style_params_; }
  const std::map<int, CharSkeleton>& skeletons() const { return skeletons_; }

  void validate() const {
    std::set<int> tf(train_fonts_.begin(), train_fonts_.end());
    for (int f : eval_fonts_)
      if (tf.count(f)) throw DataError("font " + std::to_string(f) + " appears in both train and eval splits");
    std::set<int> tc(train_chars_.begin(), train_chars_.end());
    for (int c : val_chars_)
      if (tc.count(c)) throw DataError("char " + std::to_string(c) + " appears in both train and val splits");
    if (tf.count(content_font_id_) ||
        std::count(eval_fonts_.begin(), eval_fonts_.end(), content_font_id_))
      throw DataError("content font must stay outside the train/eval font splits");
    for (const auto& [key, g] : glyphs_) check_pixels(g, key.first, key.second);
    for (const auto& [cid, g] : content_) check_pixels(g, content_font_id_, cid);
  }

  // Mutation is limited to CorpusBuilder; a populated corpus is read-only.
  friend class CorpusBuilder;

 private:
  static void check_pixels(const GlyphImage& g, int font_id, int char_id) {
    if (static_cast<int>(g.pixels.size()) != g.size * g.size)
      throw DataError("glyph pixel buffer inconsistent for font " + std::to_string(font_id) + ", char " +
                      std::to_string(char_id));
    for (real v : g.pixels)
      if (!(v >= 0.0 && v <= 1.0))
        throw DataError("pixel outside [0,1] in font " + std::to_string(font_id) + ", char " +
                        std::to_string(char_id));
  }

  int image_size_ = 64;
  int content_font_id_ = -1;
  std::map<std::pair<int, int>, GlyphImage> glyphs_;  // styled fonts only
  std::map<int, GlyphImage> content_;                 // content font, keyed by char
  std::vector<int> train_fonts_, eval_fonts_, train_chars_, val_chars_;
  std::map<int, StyleParams> style_params_;
  std::map<int, CharSkeleton> skeletons_;
};

class CorpusBuilder {
 public:
  CorpusBuilder& image_size(int s) {
    corpus_.image_size_ = s;
    return *this;
  }
  CorpusBuilder& content_font(int f) {
    corpus_.content_font_id_ = f;
    return *this;
  }
  CorpusBuilder& splits(std::vector<int> train_f, std::vector<int> eval_f, std::vector<int> train_c,
                        std::vector<int> val_c) {
    corpus_.train_fonts_ = std::move(train_f);
    corpus_.eval_fonts_ = std::move(eval_f);
    corpus_.train_chars_ = std::move(train_c);
    corpus_.val_chars_ = std::move(val_c);
    return *this;
  }
  CorpusBuilder& add_glyph(GlyphImage g) {
    corpus_.glyphs_[{g.font_id, g.char_id}] = std::move(g);
    return *this;
  }
  CorpusBuilder& add_content_glyph(GlyphImage g) {
    corpus_.content_[g.char_id] = std::move(g);
    return *this;
  }
  CorpusBuilder& synthesis_metadata(std::map<int, StyleParams> params, std::map<int, CharSkeleton> skels) {
    corpus_.style_params_ = std::move(params);
    corpus_.skeletons_ = std::move(skels);
    return *this;
  }
  GlyphCorpus finish() {
    corpus_.validate();
    return std::move(corpus_);
  }

 private:
  GlyphCorpus corpus_;
};

// ---------------------------------------------------------------------------
// Synthetic corpus generation

namespace synth {

inline std::pair<real, real> lattice_point(Rng& rng) {
  // Endpoints snap to a 5x5 lattice inside the glyph box so strokes of one
  // character meet at consistent junctions.
  const real step = 0.7 / 4.0;
  return {0.15 + step * static_cast<real>(rng.uniform_int(5)), 0.15 + step * static_cast<real>(rng.uniform_int(5))};
}

inline CharSkeleton make_skeleton(Rng& rng) {
  CharSkeleton sk;
  const int num_strokes = 3 + static_cast<int>(rng.uniform_int(4));  // 3..6
  for (int s = 0; s < num_strokes; ++s) {
    auto [x0, y0] = lattice_point(rng);
    auto [x1, y1] = lattice_point(rng);
    if (x0 == x1 && y0 == y1) {
      // Degenerate stroke: nudge to a horizontal bar one lattice step long.
      x1 = x0 + (x0 < 0.5 ? 0.175 : -0.175);
    }
    std::vector<std::pair<real, real>> poly;
    if (rng.uniform() < 0.5) {
      poly = {{x0, y0}, {x1, y1}};
    } else {
      // Quadratic curve flattened to a fixed polyline.
      auto [cx, cy] = lattice_point(rng);
      const int kSteps = 12;
      for (int i = 0; i <= kSteps; ++i) {
        const real t = static_cast<real>(i) / kSteps;
        const real u = 1 - t;
        poly.push_back({u * u * x0 + 2 * u * t * cx + t * t * x1, u * u * y0 + 2 * u * t * cy + t * t * y1});
      }
    }
    sk.strokes.push_back(std::move(poly));
  }
  return sk;
}

inline real point_segment_dist(real px, real py, real ax, real ay, real bx, real by) {
  const real dx = bx - ax, dy = by - ay;
  const real len2 = dx * dx + dy * dy;
  real t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::min<real>(1.0, std::max<real>(0.0, t));
  const real qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

// Pure rasterizer: (skeleton, style, char_id, size) -> glyph. Re-invoking
// with stored metadata must reproduce corpus pixels bit-for-bit.
inline GlyphImage render_glyph(const CharSkeleton& skeleton, const StyleParams& style, int font_id, int char_id,
                               int size) {
  const real px_scale = static_cast<real>(size);
  const real radius = (0.6 + 0.45 * static_cast<real>(style.stroke_width)) * px_scale / 64.0;
  const real aa = 0.6 * px_scale / 64.0;
  const real jitter_amp = 1.2 * px_scale / 64.0;

  // Glyph geometry in pixel coordinates after slant + jitter.
  std::vector<std::vector<std::pair<real, real>>> strokes;
  Rng jrng(Rng::mix(style.jitter_seed, static_cast<std::uint64_t>(char_id) + 1));
  for (const auto& poly : skeleton.strokes) {
    std::vector<std::pair<real, real>> out;
    out.reserve(poly.size());
    for (const auto& [x, y] : poly) {
      real jx = 0, jy = 0;
      if (style.jitter_seed != 0) {
        jx = jrng.uniform(-jitter_amp, jitter_amp);
        jy = jrng.uniform(-jitter_amp, jitter_amp);
      }
      const real sx = x + style.slant * (0.5 - y);
      out.push_back({sx * px_scale + jx, y * px_scale + jy});
    }
    strokes.push_back(std::move(out));
  }
  if (style.serif) {
    const real tick = 2.2 * radius;
    std::vector<std::vector<std::pair<real, real>>> ticks;
    for (const auto& poly : strokes) {
      for (const auto& end : {poly.front(), poly.back()})
        ticks.push_back({{end.first - tick, end.second}, {end.first + tick, end.second}});
    }
    strokes.insert(strokes.end(), ticks.begin(), ticks.end());
  }

  GlyphImage g;
  g.font_id = font_id;
  g.char_id = char_id;
  g.size = size;
  g.pixels.assign(static_cast<std::size_t>(size) * size, 1.0);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const real py = (static_cast<real>(r) + 0.5);
      const real px = (static_cast<real>(c) + 0.5);
      real d = 1e30;
      for (const auto& poly : strokes)
        for (std::size_t i = 0; i + 1 < poly.size(); ++i)
          d = std::min(d, point_segment_dist(px, py, poly[i].first, poly[i].second, poly[i + 1].first,
                                             poly[i + 1].second));
      // Smooth coverage ramp across [radius-aa, radius+aa].
      real cov;
      if (d <= radius - aa)
        cov = 1.0;
      else if (d >= radius + aa)
        cov = 0.0;
      else {
        const real t = (radius + aa - d) / (2 * aa);
        cov = t * t * (3 - 2 * t);
      }
      g.at(r, c) = std::min<real>(1.0, std::max<real>(0.0, 1.0 - style.contrast * cov));
    }
  return g;
}

}  // namespace synth

// Deterministic procedural corpus: num_fonts styled fonts over num_chars
// shared skeletons plus one neutral content font (id = num_fonts). Splits:
// num_fonts/4 eval fonts, num_chars/5 validation chars, both drawn by
// seeded shuffle.
inline GlyphCorpus synthesize_corpus(int num_fonts, int num_chars, std::uint64_t seed, int image_size = 64) {
  if (num_fonts < 2) throw ArgumentError("synthesize_corpus: need at least 2 fonts");
  if (num_chars < 2) throw ArgumentError("synthesize_corpus: need at least 2 characters");
  if (image_size < 8) throw ArgumentError("synthesize_corpus: image size too small");

  Rng root(seed);
  Rng skeleton_rng = root.fork(1);
  Rng style_rng = root.fork(2);
  Rng split_rng = root.fork(3);

  std::map<int, CharSkeleton> skeletons;
  for (int c = 0; c < num_chars; ++c) skeletons[c] = synth::make_skeleton(skeleton_rng);

  std::map<int, StyleParams> styles;
  for (int f = 0; f < num_fonts; ++f) {
    StyleParams sp;
    sp.stroke_width = 1 + static_cast<int>(style_rng.uniform_int(3));
    sp.slant = style_rng.uniform(-0.25, 0.25);
    sp.serif = style_rng.uniform() < 0.4;
    sp.contrast = style_rng.uniform(0.55, 1.0);
    sp.jitter_seed = style_rng.next_u64() | 1;  // never 0: every styled font jitters
    styles[f] = sp;
  }
  StyleParams content_style;  // neutral: medium stroke, upright, full contrast, no jitter

  std::vector<int> fonts(static_cast<std::size_t>(num_fonts));
  for (int f = 0; f < num_fonts; ++f) fonts[static_cast<std::size_t>(f)] = f;
  split_rng.shuffle(fonts);
  const int num_eval = num_fonts / 4;
  std::vector<int> eval_fonts(fonts.begin(), fonts.begin() + num_eval);
  std::vector<int> train_fonts(fonts.begin() + num_eval, fonts.end());

  std::vector<int> chars(static_cast<std::size_t>(num_chars));
  for (int c = 0; c < num_chars; ++c) chars[static_cast<std::size_t>(c)] = c;
  split_rng.shuffle(chars);
  const int num_val = num_chars / 5;
  std::vector<int> val_chars(chars.begin(), chars.begin() + num_val);
  std::vector<int> train_chars(chars.begin() + num_val, chars.end());
  std::sort(eval_fonts.begin(), eval_fonts.end());
  std::sort(train_fonts.begin(), train_fonts.end());
  std::sort(val_chars.begin(), val_chars.end());
  std::sort(train_chars.begin(), train_chars.end());

  CorpusBuilder b;
  b.image_size(image_size).content_font(num_fonts);
  b.splits(train_fonts, eval_fonts, train_chars, val_chars);
  for (int f = 0; f < num_fonts; ++f)
    for (int c = 0; c < num_chars; ++c) b.add_glyph(synth::render_glyph(skeletons[c], styles[f], f, c, image_size));
  for (int c = 0; c < num_chars; ++c) {
    GlyphImage g = synth::render_glyph(skeletons[c], content_style, num_fonts, c, image_size);
    b.add_content_glyph(std::move(g));
  }
  b.synthesis_metadata(std::move(styles), std::move(skeletons));
  return b.finish();
}

// ---------------------------------------------------------------------------
// Import / export

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<int> parse_id_list(const std::string& value, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw DataError("manifest key '" + key + "' has a non-integer entry: '" + item + "'");
    }
  }
  return out;
}

}  // namespace detail

struct CorpusManifest {
  int image_size = 64;
  int content_font = -1;
  std::vector<int> train_fonts, eval_fonts, train_chars, val_chars;
  bool invert = false;
};

inline CorpusManifest parse_corpus_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest: " + manifest_path);
  CorpusManifest m;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw DataError("manifest line is not 'key = value': " + line);
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw DataError("manifest repeats key '" + key + "'");
    if (key == "image_size") {
      m.image_size = static_cast<int>(parse_real(value));
    } else if (key == "content_font") {
      m.content_font = static_cast<int>(parse_real(value));
    } else if (key == "train_fonts") {
      m.train_fonts = detail::parse_id_list(value, key);
    } else if (key == "eval_fonts") {
      m.eval_fonts = detail::parse_id_list(value, key);
    } else if (key == "train_chars") {
      m.train_chars = detail::parse_id_list(value, key);
    } else if (key == "val_chars") {
      m.val_chars = detail::parse_id_list(value, key);
    } else if (key == "invert") {
      if (value == "true" || value == "1")
        m.invert = true;
      else if (value == "false" || value == "0")
        m.invert = false;
      else
        throw DataError("manifest key 'invert' must be true/false, got '" + value + "'");
    } else {
      throw DataError("manifest has unknown key '" + key + "'");
    }
  }
  for (const char* required : {"image_size", "content_font", "train_fonts", "train_chars"})
    if (!seen.count(required)) throw DataError(std::string("manifest is missing key '") + required + "'");
  if (m.image_size < 8) throw DataError("manifest image_size too small");
  return m;
}

// Loads `root/<font_id>/<char_id>.png` for every (font, char) the manifest
// declares, including the content font.
inline GlyphCorpus import_corpus(const std::string& root, const std::string& manifest_path) {
  const CorpusManifest m = parse_corpus_manifest(manifest_path);

  std::vector<int> all_chars = m.train_chars;
  all_chars.insert(all_chars.end(), m.val_chars.begin(), m.val_chars.end());

  auto load = [&](int font_id, int char_id) {
    const std::string path =
        root + "/" + std::to_string(font_id) + "/" + std::to_string(char_id) + ".png";
    GrayImage raw;
    try {
      raw = read_gray_png(path);
    } catch (const DataError& e) {
      throw DataError("font " + std::to_string(font_id) + ", char " + std::to_string(char_id) + ": " +
                      e.what());
    }
    if (raw.width != m.image_size || raw.height != m.image_size)
      throw DataError("font " + std::to_string(font_id) + ", char " + std::to_string(char_id) + ": size " +
                      std::to_string(raw.width) + "x" + std::to_string(raw.height) + " does not match manifest " +
                      std::to_string(m.image_size));
    GlyphImage g;
    g.font_id = font_id;
    g.char_id = char_id;
    g.size = m.image_size;
    g.pixels.resize(raw.pixels.size());
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
      const real v = static_cast<real>(raw.pixels[i]) / 255.0;
      g.pixels[i] = m.invert ? 1.0 - v : v;
    }
    return g;
  };

  CorpusBuilder b;
  b.image_size(m.image_size).content_font(m.content_font);
  b.splits(m.train_fonts, m.eval_fonts, m.train_chars, m.val_chars);
  std::vector<int> styled = m.train_fonts;
  styled.insert(styled.end(), m.eval_fonts.begin(), m.eval_fonts.end());
  for (int f : styled)
    for (int c : all_chars) b.add_glyph(load(f, c));
  for (int c : all_chars) b.add_content_glyph(load(m.content_font, c));
  return b.finish();
}

inline void write_corpus_manifest(const GlyphCorpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot create manifest: " + path);
  auto join = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(v[i]);
    }
    return s;
  };
  out << "image_size = " << corpus.image_size() << "\n";
  out << "content_font = " << corpus.content_font_id() << "\n";
  out << "train_fonts = " << join(corpus.train_fonts()) << "\n";
  out << "eval_fonts = " << join(corpus.eval_fonts()) << "\n";
  out << "train_chars = " << join(corpus.train_chars()) << "\n";
  out << "val_chars = " << join(corpus.val_chars()) << "\n";
  out << "invert = false\n";
}

inline GrayImage glyph_to_gray(const GlyphImage& g) {
  GrayImage img;
  img.width = g.size;
  img.height = g.size;
  img.pixels.resize(g.pixels.size());
  for (std::size_t i = 0; i < g.pixels.size(); ++i)
    img.pixels[i] = static_cast<unsigned char>(std::lround(std::min<real>(1.0, std::max<real>(0.0, g.pixels[i])) * 255.0));
  return img;
}

inline void export_corpus(const GlyphCorpus& corpus, const std::string& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  write_corpus_manifest(corpus, root + "/manifest.txt");
  auto dump_font = [&](int font_id) {
    fs::create_directories(root + "/" + std::to_string(font_id));
  };
  std::vector<int> styled = corpus.train_fonts();
  styled.insert(styled.end(), corpus.eval_fonts().begin(), corpus.eval_fonts().end());
  for (int f : styled) {
    dump_font(f);
    for (int c : corpus.all_chars())
      write_gray_png(root + "/" + std::to_string(f) + "/" + std::to_string(c) + ".png",
                     glyph_to_gray(corpus.glyph(f, c)));
  }
  dump_font(corpus.content_font_id());
  for (int c : corpus.all_chars())
    write_gray_png(root + "/" + std::to_string(corpus.content_font_id()) + "/" + std::to_string(c) + ".png",
                   glyph_to_gray(corpus.content_reference(c)));
}

// ---------------------------------------------------------------------------
// Sampling

// m distinct glyphs drawn uniformly without replacement (partial
// Fisher-Yates over a copy of the id list).
inline std::vector<const GlyphImage*> sample_style_refs(const GlyphCorpus& corpus, const ReferenceSet& refs, int m,
                                                        Rng& rng) {
  if (m < 1) throw ArgumentError("sample_style_refs: m must be positive");
  if (m > refs.n())
    throw ArgumentError("sample_style_refs: m=" + std::to_string(m) + " exceeds reference count n=" +
                        std::to_string(refs.n()));
  std::vector<int> ids = refs.char_ids;
  std::vector<const GlyphImage*> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.uniform_int(ids.size() - static_cast<std::size_t>(i));
    std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
    out.push_back(&corpus.glyph(refs.font_id, ids[static_cast<std::size_t>(i)]));
  }
  return out;
}

// Copies one glyph into channel `c` of batch entry `n` of an NCHW tensor.
inline void copy_glyph_into(Tensor& batch, int n, int c, const GlyphImage& g) {
  if (batch.dim(2) != g.size || batch.dim(3) != g.size) throw ShapeError("copy_glyph_into: size mismatch");
  real* dst = batch.data() + ((static_cast<std::size_t>(n) * batch.dim(1) + c) * g.size) * g.size;
  std::copy(g.pixels.begin(), g.pixels.end(), dst);
}

}  // namespace fontgen
