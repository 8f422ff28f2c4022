#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <map>
#include <set>

#include "fontgen/corpus.hpp"
#include "testutil.hpp"

using namespace fontgen;
using testutil::TempDir;

TEST_CASE("synthesis is deterministic and respects preconditions", "[corpus]") {
  SECTION("same seed twice gives bit-identical corpora") {
    GlyphCorpus a = synthesize_corpus(2, 2, 7, 32);
    GlyphCorpus c = synthesize_corpus(2, 2, 7, 32);
    REQUIRE(a.num_glyphs() == 4);
    for (int f = 0; f < 2; ++f)
      for (int ch = 0; ch < 2; ++ch) REQUIRE(a.glyph(f, ch).pixels == c.glyph(f, ch).pixels);
    for (int ch = 0; ch < 2; ++ch)
      REQUIRE(a.content_reference(ch).pixels == c.content_reference(ch).pixels);
  }

  SECTION("at least two fonts and two characters required") {
    REQUIRE_THROWS_AS(synthesize_corpus(1, 10, 1), ArgumentError);
    REQUIRE_THROWS_AS(synthesize_corpus(10, 1, 1), ArgumentError);
  }

  SECTION("different seeds give different glyphs") {
    GlyphCorpus a = synthesize_corpus(2, 2, 7, 32);
    GlyphCorpus c = synthesize_corpus(2, 2, 8, 32);
    REQUIRE(a.glyph(0, 0).pixels != c.glyph(0, 0).pixels);
  }
}

TEST_CASE("desk-scale corpus has declared counts, ranges, and splits", "[corpus]") {
  GlyphCorpus corpus = synthesize_corpus(20, 50, 1, 32);

  REQUIRE(corpus.num_glyphs() == 20 * 50);
  for (int f = 0; f < 20; ++f)
    for (int c = 0; c < 50; ++c) {
      const GlyphImage& g = corpus.glyph(f, c);
      for (real v : g.pixels) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
      }
    }

  SECTION("splits are disjoint and sized by the default rule") {
    REQUIRE(corpus.eval_fonts().size() == 5);   // 20/4
    REQUIRE(corpus.train_fonts().size() == 15);
    REQUIRE(corpus.val_chars().size() == 10);   // 50/5
    REQUIRE(corpus.train_chars().size() == 40);
    std::set<int> tf(corpus.train_fonts().begin(), corpus.train_fonts().end());
    for (int f : corpus.eval_fonts()) REQUIRE_FALSE(tf.count(f));
    std::set<int> tc(corpus.train_chars().begin(), corpus.train_chars().end());
    for (int c : corpus.val_chars()) REQUIRE_FALSE(tc.count(c));
  }

  SECTION("content font stays outside both font splits") {
    REQUIRE_FALSE(std::count(corpus.train_fonts().begin(), corpus.train_fonts().end(), corpus.content_font_id()));
    REQUIRE_FALSE(std::count(corpus.eval_fonts().begin(), corpus.eval_fonts().end(), corpus.content_font_id()));
    const GlyphImage& g = corpus.content_reference(corpus.train_chars()[0]);
    REQUIRE(g.font_id == corpus.content_font_id());
  }

  SECTION("glyphs are not blank and styles differ across fonts") {
    int distinct = 0;
    const GlyphImage& base = corpus.glyph(corpus.train_fonts()[0], corpus.train_chars()[0]);
    real ink = 0;
    for (real v : base.pixels) ink += 1.0 - v;
    REQUIRE(ink > 1.0);  // some ink present
    for (int f : corpus.train_fonts())
      if (corpus.glyph(f, corpus.train_chars()[0]).pixels != base.pixels) ++distinct;
    REQUIRE(distinct >= static_cast<int>(corpus.train_fonts().size()) - 1);
  }
}

TEST_CASE("stored glyphs re-render exactly from their synthesis metadata", "[corpus]") {
  GlyphCorpus corpus = synthesize_corpus(4, 6, 99, 32);
  for (int f : {0, 3})
    for (int c : {0, 2, 5}) {
      GlyphImage again = synth::render_glyph(corpus.skeletons().at(c), corpus.style_params().at(f), f, c, 32);
      REQUIRE(again.pixels == corpus.glyph(f, c).pixels);
    }
}

TEST_CASE("export then import round-trips counts and quantized pixels", "[corpus]") {
  TempDir dir("roundtrip");
  GlyphCorpus corpus = synthesize_corpus(4, 5, 3, 16);
  export_corpus(corpus, dir.str());
  GlyphCorpus loaded = import_corpus(dir.str(), dir.str() + "/manifest.txt");

  REQUIRE(loaded.num_glyphs() == corpus.num_glyphs());
  REQUIRE(loaded.image_size() == 16);
  REQUIRE(loaded.train_fonts() == corpus.train_fonts());
  REQUIRE(loaded.eval_fonts() == corpus.eval_fonts());
  REQUIRE(loaded.train_chars() == corpus.train_chars());
  REQUIRE(loaded.val_chars() == corpus.val_chars());
  // 8-bit quantization bounds the round-trip error.
  for (std::size_t i = 0; i < loaded.glyph(0, 0).pixels.size(); ++i)
    REQUIRE(loaded.glyph(0, 0).pixels[i] == Catch::Approx(corpus.glyph(0, 0).pixels[i]).margin(0.5 / 255.0 + 1e-9));
}

namespace {

void write_manifest(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  out << body;
}

void write_flat_glyph(const std::string& path, int size, unsigned char value) {
  GrayImage img;
  img.width = size;
  img.height = size;
  img.pixels.assign(static_cast<std::size_t>(size) * size, value);
  write_gray_png(path, img);
}

}  // namespace

TEST_CASE("import validates files, splits, and manifest keys", "[corpus]") {
  TempDir dir("import");
  namespace fs = std::filesystem;

  SECTION("2 fonts x 3 chars with all files present yields 6 glyphs") {
    for (int f : {0, 1, 9})
      fs::create_directories(dir.path() / std::to_string(f));
    for (int f : {0, 1, 9})
      for (int c : {0, 1, 2}) write_flat_glyph((dir.path() / std::to_string(f) / (std::to_string(c) + ".png")).string(), 8, 200);
    write_manifest(dir.str() + "/m.txt",
                   "image_size = 8\ncontent_font = 9\ntrain_fonts = 0\neval_fonts = 1\n"
                   "train_chars = 0,1\nval_chars = 2\n");
    GlyphCorpus corpus = import_corpus(dir.str(), dir.str() + "/m.txt");
    REQUIRE(corpus.num_glyphs() == 6);
    REQUIRE(corpus.glyph(0, 0).pixels[0] == Catch::Approx(200.0 / 255.0));
  }

  SECTION("missing file names the (font, char) pair") {
    fs::create_directories(dir.path() / "0");
    fs::create_directories(dir.path() / "9");
    write_flat_glyph((dir.path() / "0" / "0.png").string(), 8, 10);
    write_manifest(dir.str() + "/m.txt",
                   "image_size = 8\ncontent_font = 9\ntrain_fonts = 0\neval_fonts =\n"
                   "train_chars = 0,1\nval_chars =\n");
    try {
      import_corpus(dir.str(), dir.str() + "/m.txt");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      REQUIRE(msg.find("font 0") != std::string::npos);
      REQUIRE(msg.find("char 1") != std::string::npos);
    }
  }

  SECTION("invert flag maps white-on-black ink to values near 0") {
    fs::create_directories(dir.path() / "0");
    fs::create_directories(dir.path() / "1");
    fs::create_directories(dir.path() / "9");
    for (int f : {0, 1, 9}) write_flat_glyph((dir.path() / std::to_string(f) / "0.png").string(), 8, 250);
    write_manifest(dir.str() + "/m.txt",
                   "image_size = 8\ncontent_font = 9\ntrain_fonts = 0\neval_fonts = 1\n"
                   "train_chars = 0\nval_chars =\ninvert = true\n");
    GlyphCorpus corpus = import_corpus(dir.str(), dir.str() + "/m.txt");
    for (real v : corpus.glyph(0, 0).pixels) REQUIRE(v < 0.05);
  }

  SECTION("overlapping splits are rejected") {
    write_manifest(dir.str() + "/m.txt",
                   "image_size = 8\ncontent_font = 9\ntrain_fonts = 0,1\neval_fonts = 1\n"
                   "train_chars = 0\nval_chars =\n");
    REQUIRE_THROWS_AS(import_corpus(dir.str(), dir.str() + "/m.txt"), DataError);
  }

  SECTION("content font inside a split is rejected") {
    write_manifest(dir.str() + "/m.txt",
                   "image_size = 8\ncontent_font = 0\ntrain_fonts = 0,1\neval_fonts =\n"
                   "train_chars = 0\nval_chars =\n");
    REQUIRE_THROWS_AS(import_corpus(dir.str(), dir.str() + "/m.txt"), DataError);
  }

  SECTION("unknown manifest key is rejected") {
    write_manifest(dir.str() + "/m.txt",
                   "image_size = 8\ncontent_font = 9\ntrain_fonts = 0\neval_fonts =\n"
                   "train_chars = 0\nval_chars =\nbogus = 1\n");
    REQUIRE_THROWS_AS(import_corpus(dir.str(), dir.str() + "/m.txt"), DataError);
  }

  SECTION("wrong image size is rejected") {
    fs::create_directories(dir.path() / "0");
    write_flat_glyph((dir.path() / "0" / "0.png").string(), 4, 10);
    write_manifest(dir.str() + "/m.txt",
                   "image_size = 8\ncontent_font = 9\ntrain_fonts = 0\neval_fonts =\n"
                   "train_chars = 0\nval_chars =\n");
    REQUIRE_THROWS_AS(import_corpus(dir.str(), dir.str() + "/m.txt"), DataError);
  }
}

TEST_CASE("style reference sampling", "[corpus]") {
  GlyphCorpus corpus = synthesize_corpus(3, 8, 5, 16);
  const int font = corpus.train_fonts()[0];
  ReferenceSet refs;
  refs.font_id = font;
  refs.char_ids = {0, 1, 2, 3, 4};

  SECTION("m = n returns the full set, permuted") {
    Rng rng(1);
    auto out = sample_style_refs(corpus, refs, 5, rng);
    std::set<int> got;
    for (const GlyphImage* g : out) got.insert(g->char_id);
    REQUIRE(got == std::set<int>{0, 1, 2, 3, 4});
  }

  SECTION("m > n is rejected") {
    Rng rng(1);
    REQUIRE_THROWS_AS(sample_style_refs(corpus, refs, 6, rng), ArgumentError);
    REQUIRE_THROWS_AS(sample_style_refs(corpus, refs, 0, rng), ArgumentError);
  }

  SECTION("no repeats within one draw") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
      auto out = sample_style_refs(corpus, refs, 3, rng);
      std::set<int> got;
      for (const GlyphImage* g : out) got.insert(g->char_id);
      REQUIRE(got.size() == 3);
    }
  }

  SECTION("m=1 draws are uniform: 10k draws, frequencies within 3 sigma of 1/5") {
    Rng rng(3);
    std::map<int, int> counts;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) ++counts[sample_style_refs(corpus, refs, 1, rng)[0]->char_id];
    // sd of a Bernoulli(0.2) frequency over 10k draws is 0.004; 3 sigma = 0.012.
    for (int c : refs.char_ids)
      REQUIRE(std::fabs(static_cast<real>(counts[c]) / draws - 0.2) <= 0.012);
  }
}

TEST_CASE("content lookups are constant and validated", "[corpus]") {
  GlyphCorpus corpus = synthesize_corpus(2, 3, 11, 16);
  const GlyphImage& a = corpus.content_reference(1);
  const GlyphImage& b = corpus.content_reference(1);
  REQUIRE(a.pixels == b.pixels);
  REQUIRE(&a == &b);
  REQUIRE_THROWS_AS(corpus.content_reference(77), DataError);
  REQUIRE_THROWS_AS(corpus.glyph(0, 77), DataError);
}
