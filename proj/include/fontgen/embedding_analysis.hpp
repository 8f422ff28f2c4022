#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fontgen/common.hpp"
#include "fontgen/corpus.hpp"
#include "fontgen/model.hpp"
#include "fontgen/rng.hpp"
#include "fontgen/tensor.hpp"

namespace fontgen {

struct LabeledEmbeddings {
  Tensor vectors;             // [N, d]
  std::vector<int> labels;    // font-class id per row
  std::vector<int> char_ids;  // optional per-row char id; empty or size N

  int n() const { return vectors.rank() == 2 ? vectors.dim(0) : 0; }
  int dim() const { return vectors.rank() == 2 ? vectors.dim(1) : 0; }

  void validate() const {
    if (vectors.rank() != 2) throw ShapeError("embeddings must be an [N,d] matrix");
    if (n() < 2) throw ArgumentError("need at least 2 embedding vectors");
    if (static_cast<int>(labels.size()) != n()) throw ArgumentError("label count must match row count");
    if (!char_ids.empty() && static_cast<int>(char_ids.size()) != n())
      throw ArgumentError("char id count must match row count");
  }
};

namespace detail_embed {

inline real sq_dist(const Tensor& x, int i, int j) {
  const int d = x.dim(1);
  const real* a = x.data() + static_cast<std::size_t>(i) * d;
  const real* b = x.data() + static_cast<std::size_t>(j) * d;
  real s = 0;
  for (int t = 0; t < d; ++t) {
    const real diff = a[t] - b[t];
    s += diff * diff;
  }
  return s;
}

}  // namespace detail_embed

// Fraction of points whose k nearest neighbors (Euclidean, self excluded,
// distance ties broken toward the lower index) contain a same-label point.
inline real recall_at_k(const LabeledEmbeddings& emb, int k) {
  emb.validate();
  const int n = emb.n();
  if (k < 1 || k >= n) throw ArgumentError("recall_at_k: need 1 <= k < N");
  int hits = 0;
  std::vector<std::pair<real, int>> order;
  for (int i = 0; i < n; ++i) {
    order.clear();
    for (int j = 0; j < n; ++j)
      if (j != i) order.emplace_back(detail_embed::sq_dist(emb.vectors, i, j), j);
    std::partial_sort(order.begin(), order.begin() + k, order.end());
    for (int t = 0; t < k; ++t)
      if (emb.labels[order[t].second] == emb.labels[i]) {
        ++hits;
        break;
      }
  }
  return static_cast<real>(hits) / static_cast<real>(n);
}

// ---------------------------------------------------------------------------
// k-means++ with Lloyd refinement

struct KmeansResult {
  std::vector<int> assignment;
  Tensor centers;  // [k, d]
  real inertia = 0;
  int iterations = 0;
  std::vector<real> inertia_history;  // one entry per Lloyd iteration
};

inline KmeansResult kmeans_pp(const Tensor& vectors, int k, Rng& rng) {
  if (vectors.rank() != 2) throw ShapeError("kmeans_pp: need an [N,d] matrix");
  const int n = vectors.dim(0), d = vectors.dim(1);
  if (k < 1 || k > n) throw ArgumentError("kmeans_pp: need 1 <= k <= N");

  auto point = [&](int i) { return vectors.data() + static_cast<std::size_t>(i) * d; };

  // Seeding: first center uniform, later centers proportional to the squared
  // distance to the nearest already-chosen center.
  Tensor centers({k, d});
  auto set_center = [&](int c, const real* src) { std::copy_n(src, d, centers.data() + static_cast<std::size_t>(c) * d); };
  set_center(0, point(rng.uniform_int(n)));
  std::vector<real> d2(n);
  for (int c = 1; c < k; ++c) {
    real total = 0;
    for (int i = 0; i < n; ++i) {
      real best = std::numeric_limits<real>::max();
      for (int cc = 0; cc < c; ++cc) {
        real s = 0;
        const real* ctr = centers.data() + static_cast<std::size_t>(cc) * d;
        const real* p = point(i);
        for (int t = 0; t < d; ++t) {
          const real diff = p[t] - ctr[t];
          s += diff * diff;
        }
        best = std::min(best, s);
      }
      d2[i] = best;
      total += best;
    }
    int chosen;
    if (total <= 0) {
      chosen = rng.uniform_int(n);
    } else {
      const real u = rng.uniform(0.0, total);
      real acc = 0;
      chosen = n - 1;
      for (int i = 0; i < n; ++i) {
        acc += d2[i];
        if (u < acc) {
          chosen = i;
          break;
        }
      }
    }
    set_center(c, point(chosen));
  }

  KmeansResult res;
  res.assignment.assign(n, -1);
  std::vector<real> assigned_d2(n, 0);
  for (int iter = 0; iter < 300; ++iter) {
    // Assignment step; ties go to the lower cluster index.
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best_c = 0;
      real best = std::numeric_limits<real>::max();
      for (int c = 0; c < k; ++c) {
        real s = 0;
        const real* ctr = centers.data() + static_cast<std::size_t>(c) * d;
        const real* p = point(i);
        for (int t = 0; t < d; ++t) {
          const real diff = p[t] - ctr[t];
          s += diff * diff;
        }
        if (s < best) {
          best = s;
          best_c = c;
        }
      }
      if (res.assignment[i] != best_c) changed = true;
      res.assignment[i] = best_c;
      assigned_d2[i] = best;
    }

    // Update step: means of members; an empty cluster is reseeded to the
    // point farthest from its current center.
    std::vector<int> counts(k, 0);
    Tensor sums({k, d});
    for (int i = 0; i < n; ++i) {
      ++counts[res.assignment[i]];
      real* dst = sums.data() + static_cast<std::size_t>(res.assignment[i]) * d;
      const real* p = point(i);
      for (int t = 0; t < d; ++t) dst[t] += p[t];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        real* dst = centers.data() + static_cast<std::size_t>(c) * d;
        const real* src = sums.data() + static_cast<std::size_t>(c) * d;
        for (int t = 0; t < d; ++t) dst[t] = src[t] / counts[c];
      } else {
        int far = 0;
        for (int i = 1; i < n; ++i)
          if (assigned_d2[i] > assigned_d2[far]) far = i;
        set_center(c, point(far));
        assigned_d2[far] = 0;  // claimed; the next pass reassigns it
        changed = true;
      }
    }

    res.inertia = 0;
    for (int i = 0; i < n; ++i) {
      const real* ctr = centers.data() + static_cast<std::size_t>(res.assignment[i]) * d;
      const real* p = point(i);
      real s = 0;
      for (int t = 0; t < d; ++t) {
        const real diff = p[t] - ctr[t];
        s += diff * diff;
      }
      res.inertia += s;
    }
    res.inertia_history.push_back(res.inertia);
    res.iterations = iter + 1;
    if (!changed) break;
  }
  res.centers = std::move(centers);
  return res;
}

// ---------------------------------------------------------------------------
// Normalized mutual information: I(a;b) / sqrt(H(a) * H(b)).

inline real nmi(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.empty() || pred.size() != truth.size())
    throw ArgumentError("nmi: label vectors must be nonempty and equal-length");
  const real n = static_cast<real>(pred.size());
  std::map<int, int> ca, cb;
  std::map<std::pair<int, int>, int> joint;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++ca[pred[i]];
    ++cb[truth[i]];
    ++joint[{pred[i], truth[i]}];
  }
  auto entropy = [n](const std::map<int, int>& counts) {
    real h = 0;
    for (const auto& [label, c] : counts) {
      const real p = c / n;
      if (p > 0) h -= p * std::log(p);
    }
    return h;
  };
  const real ha = entropy(ca), hb = entropy(cb);
  if (ha == 0 && hb == 0) return 1.0;  // two trivial partitions agree exactly
  if (ha == 0 || hb == 0) return 0.0;
  real mi = 0;
  for (const auto& [ab, c] : joint) {
    const real pab = c / n;
    const real pa = ca[ab.first] / n, pb = cb[ab.second] / n;
    mi += pab * std::log(pab / (pa * pb));
  }
  return mi / std::sqrt(ha * hb);
}

// Best clustering agreement over independently seeded k-means restarts. The
// per-restart seeds are drawn up front, so the max is order-independent.
inline real best_nmi_over_restarts(const LabeledEmbeddings& emb, int k, int restarts, Rng& rng) {
  emb.validate();
  if (restarts < 1) throw ArgumentError("need at least one restart");
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(restarts));
  for (auto& s : seeds) s = rng.next_u64();
  real best = 0;
  for (std::uint64_t s : seeds) {
    Rng sub(s);
    best = std::max(best, nmi(kmeans_pp(emb.vectors, k, sub).assignment, emb.labels));
  }
  return best;
}

// ---------------------------------------------------------------------------
// 2-D projections

inline Tensor project_pca(const Tensor& vectors) {
  if (vectors.rank() != 2) throw ShapeError("project_pca: need an [N,d] matrix");
  const int n = vectors.dim(0), d = vectors.dim(1);
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = vectors.at2(i, j);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / std::max(1, n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);  // eigenvalues ascending
  Tensor out({n, 2});
  for (int axis = 0; axis < 2 && axis < d; ++axis) {
    const Eigen::VectorXd v = es.eigenvectors().col(d - 1 - axis);
    for (int i = 0; i < n; ++i) out.at2(i, axis) = centered.row(i).dot(v);
  }
  return out;
}

struct TsneParams {
  real perplexity = 30.0;
  int steps = 1000;
  int exaggeration_steps = 250;  // early exaggeration x12 while step <= this
  real exaggeration = 12.0;
  real step_size = 200.0;
  real momentum_early = 0.5;
  real momentum_late = 0.8;
  int momentum_switch = 250;
};

struct TsneResult {
  Tensor coords;                 // [N, 2]
  std::vector<real> kl_history;  // true-P KL divergence after each step
};

// Exact O(N^2) embedding: per-point bandwidths found by binary search on the
// conditional-entropy target, then gradient descent on the KL divergence.
inline TsneResult project_tsne(const Tensor& vectors, const TsneParams& params, Rng& rng) {
  if (vectors.rank() != 2) throw ShapeError("project_tsne: need an [N,d] matrix");
  const int n = vectors.dim(0);
  if (n < 3) throw ArgumentError("project_tsne: need at least 3 points");

  std::vector<real> dist2(static_cast<std::size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const real s = detail_embed::sq_dist(vectors, i, j);
      dist2[static_cast<std::size_t>(i) * n + j] = s;
      dist2[static_cast<std::size_t>(j) * n + i] = s;
    }

  // Conditional distributions at the requested perplexity.
  const real target = std::log(params.perplexity);
  std::vector<real> p(static_cast<std::size_t>(n) * n, 0);
  std::vector<real> row(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    real beta = 1.0, lo = 0.0, hi = std::numeric_limits<real>::infinity();
    for (int it = 0; it < 50; ++it) {
      real sum = 0, wsum = 0;
      for (int j = 0; j < n; ++j) {
        if (j == i) {
          row[j] = 0;
          continue;
        }
        row[j] = std::exp(-beta * dist2[static_cast<std::size_t>(i) * n + j]);
        sum += row[j];
        wsum += row[j] * dist2[static_cast<std::size_t>(i) * n + j];
      }
      // H = log(sum) + beta * E[d^2] for the softmax family.
      const real h = sum > 0 ? std::log(sum) + beta * wsum / sum : 0.0;
      if (std::abs(h - target) < 1e-5) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2 : 0.5 * (lo + hi);
      } else {
        hi = beta;
        beta = 0.5 * (lo + hi);
      }
    }
    real sum = 0;
    for (int j = 0; j < n; ++j) sum += row[j];
    for (int j = 0; j < n; ++j)
      if (j != i && sum > 0) p[static_cast<std::size_t>(i) * n + j] = row[j] / sum;
  }
  // Symmetrized joint distribution, floored for log safety.
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i >= j) continue;
      const real v = (p[static_cast<std::size_t>(i) * n + j] + p[static_cast<std::size_t>(j) * n + i]) / (2.0 * n);
      const real floored = std::max(v, 1e-12);
      p[static_cast<std::size_t>(i) * n + j] = floored;
      p[static_cast<std::size_t>(j) * n + i] = floored;
    }

  TsneResult res;
  res.coords = Tensor({n, 2});
  Tensor inc({n, 2});
  Tensor gains = Tensor::full({n, 2}, 1.0);  // per-coordinate adaptive rates
  for (std::size_t i = 0; i < res.coords.numel(); ++i) res.coords[i] = 1e-4 * rng.normal();

  std::vector<real> q(static_cast<std::size_t>(n) * n, 0);
  std::vector<real> num(static_cast<std::size_t>(n) * n, 0);
  for (int step = 1; step <= params.steps; ++step) {
    real qsum = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const real dy0 = res.coords.at2(i, 0) - res.coords.at2(j, 0);
        const real dy1 = res.coords.at2(i, 1) - res.coords.at2(j, 1);
        const real t = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
        num[static_cast<std::size_t>(i) * n + j] = t;
        num[static_cast<std::size_t>(j) * n + i] = t;
        qsum += 2 * t;
      }
    for (std::size_t t = 0; t < q.size(); ++t) q[t] = std::max(num[t] / qsum, 1e-12);

    const real exag = step <= params.exaggeration_steps ? params.exaggeration : 1.0;
    const real momentum = step < params.momentum_switch ? params.momentum_early : params.momentum_late;
    for (int i = 0; i < n; ++i) {
      real g0 = 0, g1 = 0;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const std::size_t ij = static_cast<std::size_t>(i) * n + j;
        const real coeff = 4.0 * (exag * p[ij] - q[ij]) * num[ij];
        g0 += coeff * (res.coords.at2(i, 0) - res.coords.at2(j, 0));
        g1 += coeff * (res.coords.at2(i, 1) - res.coords.at2(j, 1));
      }
      // A gain grows while the gradient keeps pointing against the current
      // velocity and shrinks once they align; this is what lets the large
      // nominal step size settle instead of oscillating.
      const real g[2] = {g0, g1};
      for (int axis = 0; axis < 2; ++axis) {
        const bool opposed = (g[axis] > 0) != (inc.at2(i, axis) > 0);
        gains.at2(i, axis) = std::max(0.01, opposed ? gains.at2(i, axis) + 0.2 : gains.at2(i, axis) * 0.8);
        inc.at2(i, axis) = momentum * inc.at2(i, axis) - params.step_size * gains.at2(i, axis) * g[axis];
      }
    }
    real m0 = 0, m1 = 0;
    for (int i = 0; i < n; ++i) {
      res.coords.at2(i, 0) += inc.at2(i, 0);
      res.coords.at2(i, 1) += inc.at2(i, 1);
      m0 += res.coords.at2(i, 0);
      m1 += res.coords.at2(i, 1);
    }
    m0 /= n;
    m1 /= n;
    for (int i = 0; i < n; ++i) {
      res.coords.at2(i, 0) -= m0;
      res.coords.at2(i, 1) -= m1;
    }

    real kl = 0;  // monitored against the unexaggerated target
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const std::size_t ij = static_cast<std::size_t>(i) * n + j;
        kl += p[ij] * std::log(p[ij] / q[ij]);
      }
    res.kl_history.push_back(kl);
  }
  return res;
}

enum class Projection { pca, tsne };

inline Projection projection_from_name(const std::string& s) {
  if (s == "pca") return Projection::pca;
  if (s == "tsne") return Projection::tsne;
  throw ArgumentError("unknown projection '" + s + "' (expected pca or tsne)");
}

inline Tensor project_2d(const LabeledEmbeddings& emb, Projection method, const TsneParams& params, Rng& rng) {
  emb.validate();
  if (method == Projection::pca) return project_pca(emb.vectors);
  return project_tsne(emb.vectors, params, rng).coords;
}

// ---------------------------------------------------------------------------
// Style-embedding extraction: each glyph is replicated across all style input
// channels, encoded, and L2-normalized, exactly as the training path does.

inline LabeledEmbeddings extract_style_embeddings(const ModelBundle& bundle, const GlyphCorpus& corpus,
                                                  const std::vector<int>& font_ids, int glyphs_per_font) {
  if (font_ids.empty() || glyphs_per_font < 1) throw ArgumentError("need at least one font and one glyph per font");
  const auto chars = corpus.all_chars();
  if (static_cast<int>(chars.size()) < glyphs_per_font)
    throw ArgumentError("corpus has only " + std::to_string(chars.size()) + " characters");
  const int channels = bundle.style_encoder.in_channels;
  const int size = bundle.config.image_size;
  if (size != corpus.image_size()) throw ArgumentError("corpus image size does not match the model");

  LabeledEmbeddings out;
  out.vectors = Tensor({static_cast<int>(font_ids.size()) * glyphs_per_font, bundle.config.embed_dim});
  int row = 0;
  for (int font : font_ids) {
    Tensor batch({glyphs_per_font, channels, size, size});
    for (int g = 0; g < glyphs_per_font; ++g)
      for (int c = 0; c < channels; ++c) copy_glyph_into(batch, g, c, corpus.glyph(font, chars[g]));
    const VarPtr normed = normalize_embedding(encode(bundle.style_encoder, ad::constant(batch)).embedding);
    for (int g = 0; g < glyphs_per_font; ++g) {
      for (int j = 0; j < bundle.config.embed_dim; ++j) out.vectors.at2(row, j) = normed->value.at2(g, j);
      out.labels.push_back(font);
      out.char_ids.push_back(chars[g]);
      ++row;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline void write_embeddings(const LabeledEmbeddings& emb, const std::string& path) {
  emb.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write embeddings '" + path + "'");
  out << "fontgen-embeddings 1\n" << emb.n() << " " << emb.dim() << "\n";
  std::vector<int> distinct = emb.labels;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  out << "labels";
  for (int v : distinct) out << " " << v;
  out << "\n";
  for (int i = 0; i < emb.n(); ++i) {
    out << emb.labels[i] << " " << (emb.char_ids.empty() ? -1 : emb.char_ids[i]);
    for (int j = 0; j < emb.dim(); ++j) out << " " << format_real(emb.vectors.at2(i, j));
    out << "\n";
  }
}

inline LabeledEmbeddings read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read embeddings '" + path + "'");
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "fontgen-embeddings" || version != 1) throw DataError("'" + path + "' is not an embedding dump");
  int n = 0, d = 0;
  in >> n >> d;
  if (n < 2 || d < 1) throw DataError("embedding dump has a malformed header");
  std::string tag;
  in >> tag;
  if (tag != "labels") throw DataError("embedding dump is missing its label map");
  std::string rest;
  std::getline(in, rest);  // distinct labels are advisory; rows carry the truth
  LabeledEmbeddings emb;
  emb.vectors = Tensor({n, d});
  emb.labels.resize(static_cast<std::size_t>(n));
  emb.char_ids.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    in >> emb.labels[i] >> emb.char_ids[i];
    for (int j = 0; j < d; ++j) {
      std::string cell;
      in >> cell;
      emb.vectors.at2(i, j) = parse_real(cell);
    }
  }
  if (!in) throw DataError("embedding dump ended early");
  return emb;
}

inline void write_projection_csv(const LabeledEmbeddings& emb, const Tensor& coords, const std::string& path) {
  emb.validate();
  if (coords.rank() != 2 || coords.dim(0) != emb.n() || coords.dim(1) != 2)
    throw ShapeError("projection must be [N,2] aligned with the embeddings");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write projection '" + path + "'");
  out << "font_id,char_id,x,y\n";
  for (int i = 0; i < emb.n(); ++i)
    out << emb.labels[i] << "," << (emb.char_ids.empty() ? -1 : emb.char_ids[i]) << ","
        << format_real(coords.at2(i, 0)) << "," << format_real(coords.at2(i, 1)) << "\n";
}

}  // namespace fontgen
