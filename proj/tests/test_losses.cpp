#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "fontgen/losses.hpp"
#include "testutil.hpp"

using namespace fontgen;
using namespace testutil;
using ad::VarPtr;

namespace {

// Independent CX-similarity oracle: plain loops, no autodiff.
double cx_sim_oracle(const Tensor& X, const Tensor& Y) {
  const int P = X.dim(0), Q = Y.dim(0), D = X.dim(1);
  auto normed = [D](const Tensor& M) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(M.dim(0)), std::vector<double>(static_cast<std::size_t>(D)));
    for (int i = 0; i < M.dim(0); ++i) {
      double s = 0;
      for (int j = 0; j < D; ++j) s += M.at2(i, j) * M.at2(i, j);
      const double r = 1.0 / (std::sqrt(s) + 1e-12);
      for (int j = 0; j < D; ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = M.at2(i, j) * r;
    }
    return out;
  };
  const auto xn = normed(X), yn = normed(Y);
  std::vector<std::vector<double>> d(static_cast<std::size_t>(P), std::vector<double>(static_cast<std::size_t>(Q)));
  for (int i = 0; i < P; ++i)
    for (int j = 0; j < Q; ++j) {
      double dot = 0;
      for (int k = 0; k < D; ++k) dot += xn[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] * yn[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)];
      d[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = 1.0 - dot;
    }
  std::vector<std::vector<double>> w(static_cast<std::size_t>(P), std::vector<double>(static_cast<std::size_t>(Q)));
  for (int i = 0; i < P; ++i) {
    double mn = d[static_cast<std::size_t>(i)][0];
    for (int j = 1; j < Q; ++j) mn = std::min(mn, d[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    for (int j = 0; j < Q; ++j) {
      const double rel = d[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] / (mn + 1e-5);
      w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = std::exp((1.0 - rel) / 0.5);
    }
  }
  for (int i = 0; i < P; ++i) {
    double s = 0;
    for (int j = 0; j < Q; ++j) s += w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (int j = 0; j < Q; ++j) w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] /= s;
  }
  double acc = 0;
  for (int j = 0; j < Q; ++j) {
    double mx = w[0][static_cast<std::size_t>(j)];
    for (int i = 1; i < P; ++i) mx = std::max(mx, w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    acc += mx;
  }
  return acc / static_cast<double>(Q);
}

GlyphImage make_glyph(int font, int ch, int size, std::vector<real> px) {
  GlyphImage g;
  g.font_id = font;
  g.char_id = ch;
  g.size = size;
  g.pixels = std::move(px);
  return g;
}

}  // namespace

TEST_CASE("loss weight defaults and validation") {
  LossWeights w;
  CHECK(w.lambda_l1 == 100.0);
  CHECK(w.lambda_adv == 1.0);
  CHECK(w.lambda_cx == 1.0);
  CHECK(w.lambda_local == 1.0);
  CHECK(w.lambda_dml == 1.0);
  CHECK_NOTHROW(w.validate());
  w.lambda_cx = -0.5;
  CHECK_THROWS_AS(w.validate(), ArgumentError);
}

TEST_CASE("classification loss closed forms") {
  SECTION("uniform logits over three classes") {
    VarPtr logits = ad::constant(Tensor({3}, {0.4, 0.4, 0.4}));
    for (int target = 0; target < 3; ++target)
      CHECK(dml_loss(logits, target)->value[0] == Catch::Approx(std::log(3.0)).epsilon(0).margin(1e-12));
  }

  SECTION("unit embedding against opposed class directions") {
    // x = e1 (already unit norm), class columns e1 and -e1, zero bias.
    Rng rng(0);
    for (const auto& [tau, expected] :
         std::vector<std::pair<real, real>>{{1.0, std::log(1.0 + std::exp(-2.0))},
                                            {0.5, std::log(1.0 + std::exp(-4.0))}}) {
      DmlHeadNet head = make_dml_head(2, 2, tau, rng);
      Tensor w({2, 2});
      w.at2(0, 0) = 1.0;
      w.at2(0, 1) = -1.0;
      w.at2(1, 0) = 0.0;
      w.at2(1, 1) = 0.0;
      head.W = ad::parameter(w);
      head.b = ad::parameter(Tensor({2}));
      VarPtr x = normalize_embedding(ad::constant(Tensor({1, 2}, {1.0, 0.0})));
      VarPtr loss = dml_loss_batch(dml_logits(x, head), {0});
      CHECK(loss->value[0] == Catch::Approx(expected).epsilon(0).margin(1e-9));
    }
  }

  SECTION("batch loss is the mean of per-row losses") {
    Rng rng(7);
    Tensor logits = random_tensor({4, 5}, rng, -2.0, 2.0);
    std::vector<int> targets{3, 0, 4, 2};
    VarPtr batch = dml_loss_batch(ad::constant(logits), targets);
    real mean = 0;
    for (int n = 0; n < 4; ++n) {
      Tensor row({5});
      for (int j = 0; j < 5; ++j) row[static_cast<std::size_t>(j)] = logits.at2(n, j);
      mean += dml_loss(ad::constant(row), targets[static_cast<std::size_t>(n)])->value[0];
    }
    mean /= 4.0;
    CHECK(batch->value[0] == Catch::Approx(mean).epsilon(0).margin(1e-12));
  }

  SECTION("invalid class index rejected") {
    VarPtr logits = ad::constant(Tensor({1, 3}, {0.1, 0.2, 0.3}));
    CHECK_THROWS_AS(dml_loss_batch(logits, {-1}), ArgumentError);
    CHECK_THROWS_AS(dml_loss_batch(logits, {3}), ArgumentError);
    CHECK_THROWS_AS(dml_loss(ad::constant(Tensor({2, 3})), 0), ShapeError);
  }

  SECTION("gradcheck through normalization, head, and temperature") {
    Rng rng(11);
    VarPtr emb = ad::parameter(random_tensor({3, 4}, rng, -1.0, 1.0));
    VarPtr W = ad::parameter(random_tensor({4, 5}, rng, -0.5, 0.5));
    VarPtr b = ad::parameter(random_tensor({5}, rng, -0.2, 0.2));
    std::vector<int> targets{1, 4, 0};
    auto forward = [&] {
      DmlHeadNet head;
      head.W = W;
      head.b = b;
      head.tau = 0.5;
      head.num_classes = 5;
      return dml_loss_batch(dml_logits(normalize_embedding(emb), head), targets);
    };
    auto res = gradcheck(forward, {emb, W, b});
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("mean absolute reconstruction loss") {
  SECTION("hand example") {
    Tensor a({1, 1, 2, 2}, {0.0, 0.5, 1.0, 0.25});
    Tensor b({1, 1, 2, 2}, {0.5, 0.5, 0.0, 0.25});
    CHECK(l1_value(a, b) == Catch::Approx(0.375).epsilon(0).margin(1e-12));
    CHECK(l1_value(b, a) == Catch::Approx(0.375).epsilon(0).margin(1e-12));
    CHECK(l1_value(a, a) == 0.0);
  }

  SECTION("per-sample variant matches whole-batch mean") {
    Rng rng(3);
    Tensor a = random_tensor({3, 1, 4, 4}, rng, 0.0, 1.0);
    Tensor b = random_tensor({3, 1, 4, 4}, rng, 0.0, 1.0);
    VarPtr per = l1_per_sample(ad::constant(a), ad::constant(b));
    REQUIRE(per->value.rank() == 1);
    REQUIRE(per->value.dim(0) == 3);
    real mean = (per->value[0] + per->value[1] + per->value[2]) / 3.0;
    CHECK(l1_value(a, b) == Catch::Approx(mean).epsilon(0).margin(1e-12));
  }

  SECTION("gradcheck") {
    Rng rng(5);
    VarPtr y = ad::parameter(random_tensor({2, 1, 3, 3}, rng, 0.0, 1.0));
    VarPtr t = ad::constant(random_tensor({2, 1, 3, 3}, rng, 0.0, 1.0));
    auto res = gradcheck([&] { return l1_loss(y, t); }, {y});
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("adversarial objectives") {
  SECTION("all scores one half") {
    VarPtr half = ad::constant(Tensor({4}, {0.5, 0.5, 0.5, 0.5}));
    CHECK(adv_g_loss(half)->value[0] == Catch::Approx(std::log(0.5)).epsilon(0).margin(1e-12));
    CHECK(adv_d_tex_loss(half, half)->value[0] == Catch::Approx(2.0 * std::log(0.5)).epsilon(0).margin(1e-12));
  }

  SECTION("saturated scores stay finite via the clamp") {
    VarPtr ones = ad::constant(Tensor({2}, {1.0, 1.0}));
    VarPtr zeros = ad::constant(Tensor({2}, {0.0, 0.0}));
    CHECK(std::isfinite(adv_g_loss(ones)->value[0]));
    CHECK(std::isfinite(adv_g_loss(zeros)->value[0]));
    CHECK(std::isfinite(adv_d_tex_loss(zeros, ones)->value[0]));
    CHECK(adv_g_loss(ones)->value[0] == Catch::Approx(std::log(kScoreEps)).epsilon(1e-9));
  }

  SECTION("gradcheck away from the clamp boundaries") {
    Rng rng(9);
    VarPtr r = ad::parameter(random_tensor({5}, rng, 0.1, 0.9));
    VarPtr f = ad::parameter(random_tensor({5}, rng, 0.1, 0.9));
    auto res_g = gradcheck([&] { return adv_g_loss(f); }, {f});
    INFO(res_g.worst);
    CHECK(res_g.max_rel_err < 1e-6);
    auto res_d = gradcheck([&] { return adv_d_tex_loss(r, f); }, {r, f});
    INFO(res_d.worst);
    CHECK(res_d.max_rel_err < 1e-6);
  }
}

TEST_CASE("contextual similarity core") {
  SECTION("identical feature sets score one") {
    Rng rng(21);
    Tensor feats = random_tensor({12, 5}, rng, -1.0, 1.0);
    VarPtr cx = cx_similarity(ad::constant(feats), ad::constant(feats));
    CHECK(cx->value[0] == Catch::Approx(1.0).epsilon(0).margin(1e-9));
    VarPtr loss = contextual_loss_from_features({{ad::constant(feats)}}, {{ad::constant(feats)}});
    CHECK(std::fabs(loss->value[0]) < 1e-6);
  }

  SECTION("matches the independent oracle") {
    Rng rng(22);
    for (const auto& [p, q, d] : std::vector<std::array<int, 3>>{{2, 2, 3}, {3, 5, 4}, {6, 4, 5}, {5, 5, 3}}) {
      Tensor X = random_tensor({p, d}, rng, -1.0, 1.0);
      Tensor Y = random_tensor({q, d}, rng, -1.0, 1.0);
      VarPtr cx = cx_similarity(ad::constant(X), ad::constant(Y));
      CHECK(cx->value[0] == Catch::Approx(cx_sim_oracle(X, Y)).epsilon(0).margin(1e-12));
      CHECK(cx->value[0] > 0.0);
      CHECK(cx->value[0] <= 1.0 + 1e-12);
    }
  }

  SECTION("permuting target features leaves the score unchanged") {
    Rng rng(23);
    Tensor X = random_tensor({6, 4}, rng, -1.0, 1.0);
    Tensor Y = random_tensor({6, 4}, rng, -1.0, 1.0);
    Tensor Yperm({6, 4});
    const int perm[6] = {4, 2, 5, 0, 3, 1};
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 4; ++j) Yperm.at2(i, j) = Y.at2(perm[i], j);
    const real a = cx_similarity(ad::constant(X), ad::constant(Y))->value[0];
    const real b = cx_similarity(ad::constant(X), ad::constant(Yperm))->value[0];
    CHECK(a == Catch::Approx(b).epsilon(0).margin(1e-12));
  }

  SECTION("gradcheck over the generated-image features") {
    Rng rng(24);
    VarPtr X = ad::parameter(random_tensor({5, 4}, rng, -1.0, 1.0));
    VarPtr Y = ad::constant(random_tensor({4, 4}, rng, -1.0, 1.0));
    auto res = gradcheck([&] { return ad::neg(ad::log_(cx_similarity(X, Y))); }, {X});
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-5);
  }

  SECTION("level and sample count mismatches rejected") {
    VarPtr f = ad::constant(Tensor({2, 3}));
    CHECK_THROWS_AS(contextual_loss_from_features({{f}}, {{f}, {f}}), ArgumentError);
    CHECK_THROWS_AS(contextual_loss_from_features({{f, f}}, {{f}}), ArgumentError);
  }
}

TEST_CASE("perceptual extractor") {
  SECTION("level geometry at the default size") {
    PerceptualExtractor ex = make_perceptual_extractor(64, 42);
    Rng rng(1);
    auto feats = ex.features(ad::constant(random_tensor({2, 1, 64, 64}, rng, 0.0, 1.0)));
    REQUIRE(feats.size() == 3);
    const int want_ch[3] = {8, 16, 32};
    for (int l = 0; l < 3; ++l) {
      CHECK(feats[static_cast<std::size_t>(l)]->value.dim(1) == want_ch[l]);
      CHECK(feats[static_cast<std::size_t>(l)]->value.dim(2) == 8);
      CHECK(feats[static_cast<std::size_t>(l)]->value.dim(3) == 8);
    }
  }

  SECTION("level geometry at a small size") {
    PerceptualExtractor ex = make_perceptual_extractor(16, 42);
    Rng rng(1);
    auto feats = ex.features(ad::constant(random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0)));
    REQUIRE(feats.size() == 3);
    CHECK(feats[0]->value.dim(2) == 8);
    CHECK(feats[1]->value.dim(2) == 4);
    CHECK(feats[2]->value.dim(2) == 2);
  }

  SECTION("seeded construction is deterministic and seed-sensitive") {
    Rng rng(2);
    Tensor imgs = random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
    PerceptualExtractor a = make_perceptual_extractor(16, 7);
    PerceptualExtractor b = make_perceptual_extractor(16, 7);
    PerceptualExtractor c = make_perceptual_extractor(16, 8);
    Tensor da = a.descriptors(imgs), db = b.descriptors(imgs), dc = c.descriptors(imgs);
    CHECK(std::memcmp(da.data(), db.data(), da.numel() * sizeof(real)) == 0);
    bool differs = false;
    for (std::size_t i = 0; i < da.numel(); ++i)
      if (da[i] != dc[i]) differs = true;
    CHECK(differs);
    CHECK(da.dim(0) == 2);
    CHECK(da.dim(1) == a.fid_dim);
  }

  SECTION("checkpoint round trip preserves behaviour bit for bit") {
    TempDir dir("extractor");
    PerceptualExtractor ex = make_perceptual_extractor(16, 99, 6);
    const auto path = dir.path() / "ex.ckpt";
    save_checkpoint(path.string(), extractor_to_checkpoint(ex));
    PerceptualExtractor back = extractor_from_checkpoint(load_checkpoint(path.string()));
    CHECK(back.provenance == "imported-weights");
    CHECK(back.fid_dim == 6);
    Rng rng(3);
    Tensor imgs = random_tensor({3, 1, 16, 16}, rng, 0.0, 1.0);
    Tensor da = ex.descriptors(imgs), db = back.descriptors(imgs);
    REQUIRE(da.numel() == db.numel());
    CHECK(std::memcmp(da.data(), db.data(), da.numel() * sizeof(real)) == 0);
  }

  SECTION("input validation") {
    PerceptualExtractor ex = make_perceptual_extractor(16, 1);
    CHECK_THROWS_AS(ex.features(ad::constant(Tensor({1, 1, 8, 8}))), ShapeError);
    CHECK_THROWS_AS(make_perceptual_extractor(4, 1), ArgumentError);
    Checkpoint wrong;
    wrong.kind = "model/agis";
    CHECK_THROWS_AS(extractor_from_checkpoint(wrong), DataError);
  }
}

TEST_CASE("contextual loss over images") {
  PerceptualExtractor ex = make_perceptual_extractor(16, 5);
  Rng rng(31);
  Tensor imgs = random_tensor({2, 1, 16, 16}, rng, 0.1, 0.9);

  SECTION("self comparison scores near zero, mismatch scores higher") {
    VarPtr self_loss = contextual_loss(ad::constant(imgs), ad::constant(imgs), ex);
    Tensor other = random_tensor({2, 1, 16, 16}, rng, 0.1, 0.9);
    VarPtr cross_loss = contextual_loss(ad::constant(imgs), ad::constant(other), ex);
    CHECK(self_loss->value[0] < 0.05);
    CHECK(cross_loss->value[0] > self_loss->value[0]);
    CHECK_THROWS_AS(contextual_loss(ad::constant(imgs), ad::constant(other.reshaped({2, 1, 8, 32})), ex),
                    ShapeError);
  }

  SECTION("batch loss is the mean over single-sample losses") {
    Tensor target = random_tensor({2, 1, 16, 16}, rng, 0.1, 0.9);
    const real batch = contextual_loss(ad::constant(imgs), ad::constant(target), ex)->value[0];
    real acc = 0;
    for (int n = 0; n < 2; ++n) {
      Tensor yi({1, 1, 16, 16}), ti({1, 1, 16, 16});
      for (int i = 0; i < 16 * 16; ++i) {
        yi[static_cast<std::size_t>(i)] = imgs[static_cast<std::size_t>(n * 16 * 16 + i)];
        ti[static_cast<std::size_t>(i)] = target[static_cast<std::size_t>(n * 16 * 16 + i)];
      }
      acc += contextual_loss(ad::constant(yi), ad::constant(ti), ex)->value[0];
    }
    CHECK(batch == Catch::Approx(acc / 2.0).epsilon(0).margin(1e-12));
  }

  SECTION("gradcheck into the generated images") {
    PerceptualExtractor small = make_perceptual_extractor(8, 6);
    Rng r2(32);
    VarPtr y = ad::parameter(random_tensor({2, 1, 8, 8}, r2, 0.2, 0.8));
    VarPtr t = ad::constant(random_tensor({2, 1, 8, 8}, r2, 0.2, 0.8));
    auto res = gradcheck([&] { return contextual_loss(y, t, small); }, {y});
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-5);
  }
}

TEST_CASE("local texture objectives") {
  Rng rng(41);
  DiscNet d_local = make_disc(8, 4, rng);
  Tensor fake = random_tensor({6, 1, 8, 8}, rng, 0.0, 1.0);
  Tensor real_p = random_tensor({6, 1, 8, 8}, rng, 0.0, 1.0);
  VarPtr fake_v = ad::constant(fake);
  VarPtr real_v = ad::constant(real_p);
  VarPtr blur_v = ad::gaussian_blur3(real_v);

  SECTION("terms match the formulas evaluated on raw scores") {
    auto terms = local_losses(fake_v, real_v, blur_v, d_local);
    auto mean_of = [](const Tensor& scores, bool one_minus) {
      real acc = 0;
      for (std::size_t i = 0; i < scores.numel(); ++i) {
        real s = std::min(std::max(scores[i], kScoreEps), 1.0 - kScoreEps);
        acc += std::log(one_minus ? 1.0 - s : s);
      }
      return acc / static_cast<real>(scores.numel());
    };
    const Tensor sf = discriminate(d_local, fake_v)->value;
    const Tensor sr = discriminate(d_local, real_v)->value;
    const Tensor sb = discriminate(d_local, blur_v)->value;
    CHECK(terms.generator_term->value[0] == Catch::Approx(mean_of(sf, true)).epsilon(0).margin(1e-12));
    CHECK(terms.discriminator_term->value[0] ==
          Catch::Approx(mean_of(sr, false) + mean_of(sb, true) + mean_of(sf, true)).epsilon(0).margin(1e-12));
  }

  SECTION("blurring preserves constant patches and unit impulse mass") {
    Tensor flat = Tensor::full({1, 1, 8, 8}, 0.35);
    Tensor blurred = ad::gaussian_blur3(ad::constant(flat))->value;
    for (std::size_t i = 0; i < blurred.numel(); ++i)
      CHECK(blurred[i] == Catch::Approx(0.35).epsilon(0).margin(1e-12));
    Tensor impulse({1, 1, 8, 8});
    impulse.at4(0, 0, 4, 4) = 1.0;
    Tensor bi = ad::gaussian_blur3(ad::constant(impulse))->value;
    real mass = 0;
    for (std::size_t i = 0; i < bi.numel(); ++i) mass += bi[i];
    CHECK(mass == Catch::Approx(1.0).epsilon(0).margin(1e-12));
    const real kcorner = std::exp(-1.0), kedge = std::exp(-0.5);
    const real ksum = 1.0 + 4.0 * kedge + 4.0 * kcorner;
    CHECK(bi.at4(0, 0, 4, 4) == Catch::Approx(1.0 / ksum).epsilon(0).margin(1e-12));
    CHECK(bi.at4(0, 0, 3, 4) == Catch::Approx(kedge / ksum).epsilon(0).margin(1e-12));
    CHECK(bi.at4(0, 0, 3, 3) == Catch::Approx(kcorner / ksum).epsilon(0).margin(1e-12));
  }

  SECTION("patch spot sampling stays in bounds") {
    Rng r2(5);
    auto spots = draw_patch_spots(3, 16, 8, 4, r2);
    REQUIRE(spots.size() == 12);
    for (const auto& s : spots) {
      CHECK(s.top >= 0);
      CHECK(s.left >= 0);
      CHECK(s.top <= 8);
      CHECK(s.left <= 8);
    }
    auto exact = draw_patch_spots(1, 8, 8, 2, r2);
    for (const auto& s : exact) {
      CHECK(s.top == 0);
      CHECK(s.left == 0);
    }
    CHECK_THROWS_AS(draw_patch_spots(1, 8, 9, 1, r2), ArgumentError);
  }
}

TEST_CASE("pixel-weighted reconstruction") {
  SECTION("two black pixels halve the per-pixel weight") {
    // Training set: two glyphs with equal mean ink, so each gets beta = 1/2.
    GlyphCorpus corpus = CorpusBuilder()
                             .image_size(2)
                             .content_font(99)
                             .splits({1, 2}, {}, {7}, {})
                             .add_glyph(make_glyph(1, 7, 2, {0.1, 0.9, 0.2, 0.8}))
                             .add_glyph(make_glyph(2, 7, 2, {0.5, 0.5, 0.5, 0.5}))
                             .finish();
    PixelWeighting w = compute_pixel_weighting(corpus);
    CHECK(w.beta_for(1, 7) == Catch::Approx(0.5).epsilon(0).margin(1e-12));
    CHECK(w.beta_for(2, 7) == Catch::Approx(0.5).epsilon(0).margin(1e-12));

    Tensor target({1, 1, 2, 2}, {0.1, 0.9, 0.2, 0.8});
    bool fellback = true;
    const real alpha = w.alpha(target, &fellback);
    CHECK_FALSE(fellback);
    CHECK(alpha == Catch::Approx(0.5).epsilon(0).margin(1e-12));

    Tensor y({1, 1, 2, 2}, {0.3, 0.7, 0.4, 0.6});  // sum of |y - target| = 0.8
    VarPtr loss = emd_weighted_l1(ad::constant(y), ad::constant(target), alpha, w.beta_for(1, 7));
    CHECK(loss->value[0] == Catch::Approx(0.2).epsilon(0).margin(1e-12));
  }

  SECTION("dataset weights sum to one on a synthesized corpus") {
    GlyphCorpus corpus = synthesize_corpus(6, 10, 123, 16);
    PixelWeighting w = compute_pixel_weighting(corpus);
    REQUIRE(w.beta.size() ==
            corpus.train_fonts().size() * corpus.train_chars().size());
    real total = 0;
    for (const auto& [key, b] : w.beta) {
      CHECK(b > 0.0);
      total += b;
    }
    CHECK(total == Catch::Approx(1.0).epsilon(0).margin(1e-9));
  }

  SECTION("ink-free target falls back to the pixel count") {
    PixelWeighting w;
    Tensor blank = Tensor::full({1, 1, 4, 4}, 1.0);
    bool fellback = false;
    CHECK(w.alpha(blank, &fellback) == Catch::Approx(1.0 / 16.0).epsilon(0).margin(1e-15));
    CHECK(fellback);
  }

  SECTION("unknown glyph weight is an error") {
    PixelWeighting w;
    CHECK_THROWS_AS(w.beta_for(5, 5), ArgumentError);
  }

  SECTION("ink mean switch restricts the average to black pixels") {
    GlyphImage g = make_glyph(1, 1, 2, {0.1, 0.9, 0.2, 0.8});
    CHECK(PixelWeighting::ink_mean(g, 0.5, false) == Catch::Approx(0.5).epsilon(0).margin(1e-12));
    CHECK(PixelWeighting::ink_mean(g, 0.5, true) == Catch::Approx(0.85).epsilon(0).margin(1e-12));
    GlyphImage blank = make_glyph(1, 1, 2, {1.0, 1.0, 1.0, 1.0});
    CHECK(PixelWeighting::ink_mean(blank, 0.5, true) == 0.0);
  }

  SECTION("gradcheck of the weighted sum") {
    Rng rng(55);
    VarPtr y = ad::parameter(random_tensor({1, 1, 3, 3}, rng, 0.0, 1.0));
    VarPtr t = ad::constant(random_tensor({1, 1, 3, 3}, rng, 0.0, 1.0));
    auto res = gradcheck([&] { return emd_weighted_l1(y, t, 0.25, 0.125); }, {y});
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
    CHECK_THROWS_AS(emd_weighted_l1(y, ad::constant(Tensor({1, 1, 2, 2})), 1.0, 1.0), ShapeError);
  }
}

TEST_CASE("combined objectives") {
  SECTION("weighted sum with masks") {
    AgisLossTerms terms;
    terms.l1 = ad::parameter(Tensor::scalar(0.7));
    terms.adv = ad::parameter(Tensor::scalar(-0.3));
    terms.cx = ad::parameter(Tensor::scalar(0.11));
    terms.local_g = ad::parameter(Tensor::scalar(-0.9));
    terms.dml = ad::parameter(Tensor::scalar(1.3));
    LossWeights w;
    w.lambda_l1 = 100.0;
    w.lambda_adv = 2.0;
    w.lambda_cx = 3.0;
    w.lambda_local = 4.0;
    w.lambda_dml = 0.5;

    TermMasks all;
    VarPtr total = total_g_loss_agis(terms, w, all);
    const real want = 100.0 * 0.7 + 2.0 * (-0.3) + 3.0 * 0.11 + 4.0 * (-0.9) + 0.5 * 1.3;
    CHECK(total->value[0] == Catch::Approx(want).epsilon(0).margin(1e-12));

    ad::backward(total);
    CHECK(terms.l1->grad[0] == Catch::Approx(100.0).epsilon(0).margin(1e-12));
    CHECK(terms.dml->grad[0] == Catch::Approx(0.5).epsilon(0).margin(1e-12));

    TermMasks finetune;
    finetune.l1 = 0.0;
    finetune.cx = 0.0;
    finetune.dml = 0.0;
    VarPtr masked = total_g_loss_agis(terms, w, finetune);
    CHECK(masked->value[0] == Catch::Approx(2.0 * (-0.3) + 4.0 * (-0.9)).epsilon(0).margin(1e-12));
  }

  SECTION("absent terms count as zero") {
    AgisLossTerms terms;
    terms.adv = ad::constant(Tensor::scalar(0.25));
    LossWeights w;
    TermMasks masks;
    VarPtr total = total_g_loss_agis(terms, w, masks);
    CHECK(total->value[0] == Catch::Approx(0.25).epsilon(0).margin(1e-12));
  }

  SECTION("supervised total") {
    VarPtr wl1 = ad::constant(Tensor::scalar(0.3));
    VarPtr dml = ad::constant(Tensor::scalar(0.2));
    CHECK(total_g_loss_emd(wl1, dml, 0.5)->value[0] == Catch::Approx(0.4).epsilon(0).margin(1e-12));
  }
}
