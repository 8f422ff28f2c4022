#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include "fontgen/embedding_analysis.hpp"
#include "fontgen/model.hpp"
#include "fontgen/rng.hpp"

#include "testutil.hpp"

using namespace fontgen;
using namespace testutil;

namespace {

// Brute-force neighbor scan written independently of the library: full
// distance table, explicit lexicographic (distance, index) sort.
real recall_oracle(const LabeledEmbeddings& emb, int k) {
  const int n = emb.n(), d = emb.dim();
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    std::vector<std::pair<real, int>> all;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      real s = 0;
      for (int t = 0; t < d; ++t) {
        const real diff = emb.vectors.at2(i, t) - emb.vectors.at2(j, t);
        s += diff * diff;
      }
      all.emplace_back(s, j);
    }
    std::sort(all.begin(), all.end());
    bool hit = false;
    for (int t = 0; t < k; ++t) hit = hit || emb.labels[all[t].second] == emb.labels[i];
    hits += hit ? 1 : 0;
  }
  return static_cast<real>(hits) / n;
}

LabeledEmbeddings make_embeddings(const std::vector<std::vector<real>>& rows, const std::vector<int>& labels) {
  LabeledEmbeddings emb;
  emb.vectors = Tensor({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[0].size(); ++j) emb.vectors.at2(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  emb.labels = labels;
  return emb;
}

// Three tight Gaussian blobs in `dim` dimensions, `per` points each.
LabeledEmbeddings blob_embeddings(int per, int dim, real spread, Rng& rng) {
  const real centers[3][2] = {{0, 0}, {12, 0}, {0, 12}};
  LabeledEmbeddings emb;
  emb.vectors = Tensor({3 * per, dim});
  for (int b = 0; b < 3; ++b)
    for (int i = 0; i < per; ++i) {
      const int row = b * per + i;
      for (int j = 0; j < dim; ++j) {
        const real base = j < 2 ? centers[b][j] : 0.0;
        emb.vectors.at2(row, j) = base + spread * rng.normal();
      }
      emb.labels.push_back(b + 100);
    }
  return emb;
}

}  // namespace

TEST_CASE("recall_at_k closed forms") {
  auto tight = make_embeddings({{0, 0}, {0.01, 0}, {10, 0}, {10.01, 0}}, {1, 1, 2, 2});
  CHECK(recall_at_k(tight, 1) == 1.0);

  auto unique = make_embeddings({{0, 0}, {1, 0}, {2, 0}, {3, 0}}, {1, 2, 3, 4});
  CHECK(recall_at_k(unique, 1) == 0.0);
  CHECK(recall_at_k(unique, 3) == 0.0);

  CHECK_THROWS_AS(recall_at_k(tight, 0), ArgumentError);
  CHECK_THROWS_AS(recall_at_k(tight, 4), ArgumentError);
}

TEST_CASE("recall_at_k matches a brute-force scan") {
  auto hand = make_embeddings({{0, 0}, {1, 0}, {0, 1}, {5, 5}, {5, 6}, {6, 5}}, {1, 2, 1, 2, 1, 1});
  for (int k = 1; k <= 5; ++k) CHECK(recall_at_k(hand, k) == recall_oracle(hand, k));

  Rng rng(321);
  LabeledEmbeddings rand_emb;
  rand_emb.vectors = random_tensor({20, 3}, rng, -1.0, 1.0);
  for (int i = 0; i < 20; ++i) rand_emb.labels.push_back(i % 4);
  for (int k : {1, 2, 5, 10}) CHECK(recall_at_k(rand_emb, k) == recall_oracle(rand_emb, k));
}

TEST_CASE("recall_at_k is invariant under Euclidean isometries") {
  Rng rng(322);
  LabeledEmbeddings emb;
  emb.vectors = random_tensor({15, 2}, rng, -2.0, 2.0);
  for (int i = 0; i < 15; ++i) emb.labels.push_back(i % 3);

  const real theta = 0.7;
  LabeledEmbeddings moved = emb;
  for (int i = 0; i < 15; ++i) {
    const real x = emb.vectors.at2(i, 0), y = emb.vectors.at2(i, 1);
    moved.vectors.at2(i, 0) = std::cos(theta) * x - std::sin(theta) * y + 3.5;
    moved.vectors.at2(i, 1) = std::sin(theta) * x + std::cos(theta) * y - 1.25;
  }
  for (int k : {1, 3, 7}) CHECK(recall_at_k(emb, k) == recall_at_k(moved, k));
}

TEST_CASE("kmeans_pp closed forms") {
  Rng rng(55);
  auto pts = random_tensor({6, 2}, rng, -1.0, 1.0);

  SECTION("k equal to point count isolates every point") {
    auto res = kmeans_pp(pts, 6, rng);
    CHECK(res.inertia == Catch::Approx(0.0).margin(1e-24));
    std::vector<int> seen = res.assignment;
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    CHECK(seen.size() == 6);
  }

  SECTION("single cluster centers on the mean") {
    auto res = kmeans_pp(pts, 1, rng);
    for (int j = 0; j < 2; ++j) {
      real mean = 0;
      for (int i = 0; i < 6; ++i) mean += pts.at2(i, j) / 6;
      CHECK(res.centers.at2(0, j) == Catch::Approx(mean).margin(1e-12));
    }
    CHECK(std::all_of(res.assignment.begin(), res.assignment.end(), [](int a) { return a == 0; }));
  }

  SECTION("argument checks") {
    CHECK_THROWS_AS(kmeans_pp(pts, 7, rng), ArgumentError);
    CHECK_THROWS_AS(kmeans_pp(pts, 0, rng), ArgumentError);
  }
}

TEST_CASE("kmeans_pp recovers separated blobs and decreases inertia") {
  Rng rng(56);
  auto emb = blob_embeddings(8, 2, 0.3, rng);
  bool recovered = false;
  for (int attempt = 0; attempt < 5 && !recovered; ++attempt) {
    auto res = kmeans_pp(emb.vectors, 3, rng);
    for (std::size_t i = 1; i < res.inertia_history.size(); ++i)
      CHECK(res.inertia_history[i] <= res.inertia_history[i - 1] + 1e-12);
    // Partition equality modulo label names: within each true blob the
    // assignment must be constant, and distinct across blobs.
    std::map<int, int> blob_to_cluster;
    bool ok = true;
    for (int i = 0; i < emb.n(); ++i) {
      auto [it, fresh] = blob_to_cluster.emplace(emb.labels[i], res.assignment[i]);
      ok = ok && (fresh || it->second == res.assignment[i]);
    }
    std::vector<int> used;
    for (auto& [blob, cluster] : blob_to_cluster) used.push_back(cluster);
    std::sort(used.begin(), used.end());
    used.erase(std::unique(used.begin(), used.end()), used.end());
    recovered = ok && used.size() == 3;
  }
  CHECK(recovered);
}

TEST_CASE("nmi closed forms and symmetry") {
  CHECK(nmi({0, 0, 1, 1, 2, 2}, {5, 5, 9, 9, 7, 7}) == Catch::Approx(1.0).margin(1e-12));
  CHECK(nmi({1, 1, 1, 1}, {0, 0, 1, 1}) == 0.0);
  CHECK(nmi({3, 3, 3}, {8, 8, 8}) == 1.0);

  // Hand contingency table: pred {0:4, 1:2}, true {0:3, 1:3}, joint
  // {(0,0):3, (0,1):1, (1,1):2}; direct entropy arithmetic below.
  const std::vector<int> pred = {0, 0, 0, 0, 1, 1};
  const std::vector<int> truth = {0, 0, 0, 1, 1, 1};
  auto h2 = [](real a, real b) { return -(a * std::log(a) + b * std::log(b)); };
  const real ha = h2(4.0 / 6, 2.0 / 6), hb = h2(3.0 / 6, 3.0 / 6);
  const real mi = 3.0 / 6 * std::log((3.0 / 6) / (4.0 / 6 * 3.0 / 6)) +
                  1.0 / 6 * std::log((1.0 / 6) / (4.0 / 6 * 3.0 / 6)) +
                  2.0 / 6 * std::log((2.0 / 6) / (2.0 / 6 * 3.0 / 6));
  CHECK(nmi(pred, truth) == Catch::Approx(mi / std::sqrt(ha * hb)).margin(1e-12));
  CHECK(nmi(pred, truth) == nmi(truth, pred));

  // Permutation invariance on either side.
  CHECK(nmi({7, 7, 7, 7, 4, 4}, truth) == Catch::Approx(nmi(pred, truth)).margin(1e-15));
  CHECK(nmi(pred, {2, 2, 2, 6, 6, 6}) == Catch::Approx(nmi(pred, truth)).margin(1e-15));

  CHECK_THROWS_AS(nmi({1, 2}, {1}), ArgumentError);
  CHECK_THROWS_AS(nmi({}, {}), ArgumentError);
}

TEST_CASE("best nmi over restarts") {
  Rng rng(57);
  auto emb = blob_embeddings(6, 3, 0.25, rng);

  SECTION("one restart equals a single seeded run") {
    Rng a(900), b(900);
    const real via_best = best_nmi_over_restarts(emb, 3, 1, a);
    Rng sub(b.next_u64());
    CHECK(via_best == nmi(kmeans_pp(emb.vectors, 3, sub).assignment, emb.labels));
  }

  SECTION("non-decreasing in restarts for nested seed sequences") {
    Rng a(901), b(901);
    const real few = best_nmi_over_restarts(emb, 3, 3, a);
    const real many = best_nmi_over_restarts(emb, 3, 12, b);
    CHECK(many >= few);
  }

  SECTION("separable classes reach full agreement") {
    Rng a(902);
    CHECK(best_nmi_over_restarts(emb, 3, 100, a) == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("pca projection")
{
  Rng rng(58);
  // Points living on a 2-D plane inside 5-D: distances must survive exactly.
  const int n = 12;
  const real inv_sqrt2 = 1.0 / std::sqrt(2.0);
  Tensor plane({n, 2});
  for (std::size_t i = 0; i < plane.numel(); ++i) plane[i] = rng.uniform(-3.0, 3.0);
  Tensor high({n, 5});
  for (int i = 0; i < n; ++i) {
    const real a = plane.at2(i, 0), b = plane.at2(i, 1);
    high.at2(i, 0) = a * inv_sqrt2 + b * inv_sqrt2 + 0.5;
    high.at2(i, 1) = a * inv_sqrt2 - b * inv_sqrt2 - 1.0;
    high.at2(i, 2) = 2.0;
    high.at2(i, 3) = -0.25;
    high.at2(i, 4) = 0.0;
  }
  Tensor proj = project_pca(high);
  REQUIRE(proj.dim(0) == n);
  REQUIRE(proj.dim(1) == 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const real da = std::hypot(plane.at2(i, 0) - plane.at2(j, 0), plane.at2(i, 1) - plane.at2(j, 1));
      const real db = std::hypot(proj.at2(i, 0) - proj.at2(j, 0), proj.at2(i, 1) - proj.at2(j, 1));
      CHECK(db == Catch::Approx(da).margin(1e-6));
    }

  // Duplicate inputs stay coincident.
  Tensor dup({4, 3});
  for (int j = 0; j < 3; ++j) {
    dup.at2(0, j) = dup.at2(2, j) = j * 0.5;
    dup.at2(1, j) = dup.at2(3, j) = 1.0 - j;
  }
  Tensor dp = project_pca(dup);
  CHECK(dp.at2(0, 0) == Catch::Approx(dp.at2(2, 0)).margin(1e-12));
  CHECK(dp.at2(0, 1) == Catch::Approx(dp.at2(2, 1)).margin(1e-12));
  CHECK(dp.at2(1, 0) == Catch::Approx(dp.at2(3, 0)).margin(1e-12));
}

TEST_CASE("tsne projection decreases its objective and stays finite") {
  Rng data_rng(59);
  auto emb = blob_embeddings(6, 4, 0.2, data_rng);

  TsneParams params;
  params.perplexity = 5.0;
  params.steps = 400;
  Rng rng(60);
  auto res = project_tsne(emb.vectors, params, rng);
  REQUIRE(res.coords.dim(0) == emb.n());
  REQUIRE(res.coords.dim(1) == 2);
  REQUIRE(res.kl_history.size() == 400);
  CHECK(res.kl_history.back() < res.kl_history.front());
  for (std::size_t i = 0; i < res.coords.numel(); ++i) CHECK(std::isfinite(res.coords[i]));
  for (real kl : res.kl_history) CHECK(std::isfinite(kl));

  SECTION("duplicate-heavy input stays finite") {
    Tensor pts({9, 2});
    for (int i = 0; i < 9; ++i) {
      pts.at2(i, 0) = static_cast<real>(i / 3);  // three distinct locations
      pts.at2(i, 1) = static_cast<real>(i / 3) * 2.0;
    }
    Rng r2(61);
    TsneParams quick;
    quick.perplexity = 2.0;
    quick.steps = 50;
    auto dup = project_tsne(pts, quick, r2);
    for (std::size_t i = 0; i < dup.coords.numel(); ++i) CHECK(std::isfinite(dup.coords[i]));
  }

  SECTION("too few points") {
    Tensor two({2, 2});
    Rng r3(62);
    CHECK_THROWS_AS(project_tsne(two, params, r3), ArgumentError);
  }

  SECTION("dispatcher") {
    Rng r4(63), r5(63);
    Tensor via_dispatch = project_2d(emb, Projection::pca, params, r4);
    Tensor direct = project_pca(emb.vectors);
    REQUIRE(via_dispatch.numel() == direct.numel());
    CHECK(std::memcmp(via_dispatch.data(), direct.data(), direct.numel() * sizeof(real)) == 0);
    CHECK(projection_from_name("pca") == Projection::pca);
    CHECK(projection_from_name("tsne") == Projection::tsne);
    CHECK_THROWS_AS(projection_from_name("umap"), ArgumentError);
  }
}

TEST_CASE("style embedding extraction") {
  const int size = 16;
  auto corpus = synthesize_corpus(4, 8, 404, size);
  ModelConfig cfg;
  cfg.image_size = size;
  cfg.embed_dim = 8;
  cfg.base_channels = 4;
  cfg.patch_size = 8;
  Rng rng(11);
  auto bundle = make_bundle(Backbone::agis, cfg, 3, rng);

  std::vector<int> fonts = corpus.train_fonts();
  REQUIRE(fonts.size() == 3);
  auto emb = extract_style_embeddings(bundle, corpus, fonts, 4);

  CHECK(emb.n() == 12);  // fonts x glyphs-per-font
  CHECK(emb.dim() == 8);
  for (int i = 0; i < emb.n(); ++i) {
    real norm = 0;
    for (int j = 0; j < emb.dim(); ++j) norm += emb.vectors.at2(i, j) * emb.vectors.at2(i, j);
    CHECK(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-6));
  }
  const auto chars = corpus.all_chars();
  for (int f = 0; f < 3; ++f)
    for (int g = 0; g < 4; ++g) {
      CHECK(emb.labels[static_cast<std::size_t>(f) * 4 + g] == fonts[static_cast<std::size_t>(f)]);
      CHECK(emb.char_ids[static_cast<std::size_t>(f) * 4 + g] == chars[static_cast<std::size_t>(g)]);
    }

  // Determinism: a second pass reproduces every byte.
  auto again = extract_style_embeddings(bundle, corpus, fonts, 4);
  CHECK(std::memcmp(emb.vectors.data(), again.vectors.data(), emb.vectors.numel() * sizeof(real)) == 0);

  CHECK_THROWS_AS(extract_style_embeddings(bundle, corpus, fonts, 9), ArgumentError);
  CHECK_THROWS_AS(extract_style_embeddings(bundle, corpus, {}, 4), ArgumentError);
}

TEST_CASE("embedding dump and projection files") {
  Rng rng(64);
  LabeledEmbeddings emb;
  emb.vectors = random_tensor({5, 3}, rng, -1.0, 1.0);
  emb.labels = {4, 4, 9, 9, 9};
  emb.char_ids = {10, 11, 10, 11, 12};

  TempDir dir("embed");
  const std::string dump = dir.str() + "/emb.txt";
  write_embeddings(emb, dump);
  auto loaded = read_embeddings(dump);
  CHECK(loaded.labels == emb.labels);
  CHECK(loaded.char_ids == emb.char_ids);
  REQUIRE(loaded.vectors.numel() == emb.vectors.numel());
  CHECK(std::memcmp(loaded.vectors.data(), emb.vectors.data(), emb.vectors.numel() * sizeof(real)) == 0);

  std::ifstream in(dump);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "fontgen-embeddings 1");
  REQUIRE(std::getline(in, line));
  CHECK(line == "5 3");
  REQUIRE(std::getline(in, line));
  CHECK(line == "labels 4 9");

  const std::string csv = dir.str() + "/proj.csv";
  Tensor coords({5, 2});
  for (std::size_t i = 0; i < coords.numel(); ++i) coords[i] = 0.5 * static_cast<real>(i);
  write_projection_csv(emb, coords, csv);
  std::ifstream cin_(csv);
  REQUIRE(std::getline(cin_, line));
  CHECK(line == "font_id,char_id,x,y");
  REQUIRE(std::getline(cin_, line));
  CHECK(line == "4,10,0,0.5");

  const std::string bad = dir.str() + "/bad.txt";
  std::ofstream(bad) << "not-an-embedding-dump\n";
  CHECK_THROWS_AS(read_embeddings(bad), DataError);
  Tensor wrong({4, 2});
  CHECK_THROWS_AS(write_projection_csv(emb, wrong, csv), ShapeError);
}
