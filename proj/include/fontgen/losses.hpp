#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fontgen/autodiff.hpp"
#include "fontgen/checkpoint.hpp"
#include "fontgen/common.hpp"
#include "fontgen/corpus.hpp"
#include "fontgen/model.hpp"
#include "fontgen/rng.hpp"
#include "fontgen/tensor.hpp"

namespace fontgen {

struct LossWeights {
  real lambda_l1 = 100.0;
  real lambda_adv = 1.0;
  real lambda_cx = 1.0;
  real lambda_local = 1.0;
  real lambda_dml = 1.0;

  void validate() const {
    for (real v : {lambda_l1, lambda_adv, lambda_cx, lambda_local, lambda_dml})
      if (v < 0) throw ArgumentError("loss weights must be nonnegative");
  }
};

// Numerical guard applied to discriminator scores before any log.
inline constexpr real kScoreEps = 1e-7;

// ---------------------------------------------------------------------------
// Classification loss on style embeddings

// -log softmax(logits)[target] for one embedding; class ids are 0-based.
inline VarPtr dml_loss(const VarPtr& logits, int target) {
  VarPtr l = logits;
  if (l->value.rank() == 1) l = ad::reshape(l, {1, l->value.dim(0)});
  if (l->value.rank() != 2 || l->value.dim(0) != 1) throw ShapeError("dml_loss: expected one logit row");
  return ad::cross_entropy_logits(l, {target});
}

// Batch mean over rows of logits.
inline VarPtr dml_loss_batch(const VarPtr& logits, const std::vector<int>& targets) {
  return ad::cross_entropy_logits(logits, targets);
}

// ---------------------------------------------------------------------------
// Reconstruction

// Mean absolute pixel difference. This is the single definition shared by
// training and evaluation.
inline VarPtr l1_loss(const VarPtr& y, const VarPtr& target) { return ad::mean_all(ad::abs_(ad::sub(y, target))); }

inline real l1_value(const Tensor& a, const Tensor& b) {
  return l1_loss(ad::constant(a), ad::constant(b))->value[0];
}

// Per-sample mean absolute difference, [N]; used for masked fine-tuning.
inline VarPtr l1_per_sample(const VarPtr& y, const VarPtr& target) {
  return ad::mean_per_sample(ad::abs_(ad::sub(y, target)));
}

// ---------------------------------------------------------------------------
// Adversarial terms. The generator minimizes E[log(1 - D(fake))]; each
// discriminator maximizes its own objective, so its training step minimizes
// the negation of the value returned here.

inline VarPtr adv_g_loss(const VarPtr& fake_scores) {
  return ad::mean_all(ad::log_(ad::rsub_scalar(1.0, ad::clamp(fake_scores, kScoreEps, 1.0 - kScoreEps))));
}

inline VarPtr adv_d_tex_loss(const VarPtr& real_scores, const VarPtr& fake_scores) {
  VarPtr real_term = ad::mean_all(ad::log_(ad::clamp(real_scores, kScoreEps, 1.0 - kScoreEps)));
  VarPtr fake_term = ad::mean_all(ad::log_(ad::rsub_scalar(1.0, ad::clamp(fake_scores, kScoreEps, 1.0 - kScoreEps))));
  return ad::add(real_term, fake_term);
}

// ---------------------------------------------------------------------------
// Perceptual feature extractor: a frozen convolution pyramid. The contextual
// and distribution metrics only need a fixed Phi, not a trained one; weights
// either come from a seeded generator or are imported from a checkpoint.

struct PerceptualExtractor {
  std::vector<VarPtr> conv_w;  // frozen, one k4 s2 p1 kernel stack per level
  std::vector<int> pools;      // average-pool factor applied to each level
  Tensor proj;                 // [sum(channels), fid_dim] descriptor projection
  std::string provenance;
  int image_size = 64;
  int fid_dim = 8;

  int levels() const { return static_cast<int>(conv_w.size()); }

  // Per-level feature maps; gradients flow into images01 only.
  std::vector<VarPtr> features(const VarPtr& images01) const {
    if (images01->value.rank() != 4 || images01->value.dim(1) != 1 || images01->value.dim(2) != image_size)
      throw ShapeError("extractor: expected [N,1," + std::to_string(image_size) + "," +
                       std::to_string(image_size) + "], got " + images01->value.shape_string());
    std::vector<VarPtr> out;
    VarPtr h = to_net_range(images01);
    for (int l = 0; l < levels(); ++l) {
      h = ad::leaky_relu(ad::conv2d(h, conv_w[static_cast<std::size_t>(l)], nullptr, 2, 1), 0.2);
      out.push_back(ad::avg_pool(h, pools[static_cast<std::size_t>(l)]));
    }
    return out;
  }

  // Spatially averaged features of every level, concatenated and projected
  // to fid_dim; one descriptor row per image.
  Tensor descriptors(const Tensor& images01) const {
    const auto feats = features(ad::constant(images01));
    const int N = images01.dim(0);
    int total_ch = 0;
    for (const auto& f : feats) total_ch += f->value.dim(1);
    Tensor pooled({N, total_ch});
    int col = 0;
    for (const auto& f : feats) {
      const int C = f->value.dim(1);
      const std::size_t plane = static_cast<std::size_t>(f->value.dim(2)) * f->value.dim(3);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const real* p = f->value.data() + (static_cast<std::size_t>(n) * C + c) * plane;
          real s = 0;
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
          pooled.at2(n, col + c) = s / static_cast<real>(plane);
        }
      col += C;
    }
    Tensor out({N, fid_dim});
    for (int n = 0; n < N; ++n)
      for (int j = 0; j < fid_dim; ++j) {
        real s = 0;
        for (int c = 0; c < total_ch; ++c) s += pooled.at2(n, c) * proj.at2(c, j);
        out.at2(n, j) = s;
      }
    return out;
  }
};

inline PerceptualExtractor make_perceptual_extractor(int image_size, std::uint64_t seed, int fid_dim = 8) {
  if (image_size < 8) throw ArgumentError("extractor image size too small");
  PerceptualExtractor ex;
  ex.image_size = image_size;
  ex.fid_dim = fid_dim;
  ex.provenance = "random-fixed(seed=" + std::to_string(seed) + ")";
  Rng rng(Rng::mix(seed, 0x9e3779b97f4a7c15ull));
  const std::vector<int> channels{8, 16, 32};
  int prev = 1, extent = image_size;
  int total_ch = 0;
  for (int c : channels) {
    // Variance-preserving fan-in scale keeps activations O(1) at any depth.
    const real scale = std::sqrt(1.0 / (static_cast<real>(prev) * 16.0));
    ex.conv_w.push_back(ad::constant(init::normal({c, prev, 4, 4}, rng, 0.0, scale)));
    extent /= 2;
    ex.pools.push_back(extent > 8 ? extent / 8 : 1);
    prev = c;
    total_ch += c;
  }
  ex.proj = init::normal({total_ch, fid_dim}, rng, 0.0, std::sqrt(1.0 / static_cast<real>(total_ch)));
  return ex;
}

inline Checkpoint extractor_to_checkpoint(const PerceptualExtractor& ex) {
  Checkpoint ckpt;
  ckpt.kind = "extractor";
  ckpt.meta["image_size"] = ex.image_size;
  ckpt.meta["fid_dim"] = ex.fid_dim;
  ckpt.meta["pools"] = ex.pools;
  ckpt.meta["provenance"] = ex.provenance;
  for (std::size_t l = 0; l < ex.conv_w.size(); ++l)
    ckpt.arrays.emplace_back("conv" + std::to_string(l) + ".w", ex.conv_w[l]->value);
  ckpt.arrays.emplace_back("proj", ex.proj);
  return ckpt;
}

inline PerceptualExtractor extractor_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "extractor") throw DataError("checkpoint kind '" + ckpt.kind + "' is not an extractor");
  PerceptualExtractor ex;
  ex.image_size = ckpt.meta.at("image_size").get<int>();
  ex.fid_dim = ckpt.meta.at("fid_dim").get<int>();
  ex.pools = ckpt.meta.at("pools").get<std::vector<int>>();
  ex.provenance = "imported-weights";
  for (std::size_t l = 0; ckpt.has_array("conv" + std::to_string(l) + ".w"); ++l)
    ex.conv_w.push_back(ad::constant(ckpt.array("conv" + std::to_string(l) + ".w")));
  if (ex.conv_w.size() != ex.pools.size()) throw DataError("extractor checkpoint level mismatch");
  ex.proj = ckpt.array("proj");
  return ex;
}

// ---------------------------------------------------------------------------
// Contextual similarity: cosine distances -> relative distances ->
// exponentiation with bandwidth h -> row normalization -> mean of column
// maxima. Alignment-free by construction.

inline constexpr real kCxBandwidth = 0.5;
inline constexpr real kCxEps = 1e-5;

// cx_similarity of two feature matrices [P,dim] (rows = generated-image
// features) and [Q,dim] (rows = target-image features); scalar in (0,1].
inline VarPtr cx_similarity(const VarPtr& gen_features, const VarPtr& target_features) {
  VarPtr xn = ad::l2_normalize_rows(gen_features);
  VarPtr yn = ad::l2_normalize_rows(target_features);
  VarPtr d = ad::rsub_scalar(1.0, ad::matmul_nt(xn, yn));          // [P,Q] cosine distance
  VarPtr rel = ad::div_rowwise(d, ad::add_scalar(ad::row_min(d), kCxEps));
  VarPtr w = ad::exp_(ad::scale(ad::rsub_scalar(1.0, rel), 1.0 / kCxBandwidth));
  VarPtr cx = ad::div_rowwise(w, ad::row_sum(w));
  return ad::mean_all(ad::col_max(cx));
}

// -(1/L) sum_l log CX(Phi_l(y), Phi_l(target)), mean over the batch.
inline VarPtr contextual_loss(const VarPtr& y, const VarPtr& target, const PerceptualExtractor& ex) {
  if (!y->value.same_shape(target->value)) throw ShapeError("contextual_loss: shape mismatch");
  const int N = y->value.dim(0);
  const auto fy = ex.features(y);
  const auto ft = ex.features(ad::detach(target));
  std::vector<VarPtr> per_sample;
  for (int n = 0; n < N; ++n) {
    std::vector<VarPtr> level_terms;
    for (int l = 0; l < ex.levels(); ++l) {
      VarPtr cx = cx_similarity(ad::sample_features(fy[static_cast<std::size_t>(l)], n),
                                ad::sample_features(ft[static_cast<std::size_t>(l)], n));
      level_terms.push_back(ad::neg(ad::log_(cx)));
    }
    per_sample.push_back(ad::mean_all(ad::stack_scalars(level_terms)));
  }
  return ad::mean_all(ad::stack_scalars(per_sample));
}

// Same contract, but over per-sample feature matrices supplied directly
// (keeps the CX formula testable without an extractor).
inline VarPtr contextual_loss_from_features(const std::vector<std::vector<VarPtr>>& gen_levels,
                                            const std::vector<std::vector<VarPtr>>& target_levels) {
  if (gen_levels.empty() || gen_levels.size() != target_levels.size())
    throw ArgumentError("contextual_loss_from_features: level count mismatch");
  std::vector<VarPtr> level_terms;
  for (std::size_t l = 0; l < gen_levels.size(); ++l) {
    if (gen_levels[l].size() != target_levels[l].size())
      throw ArgumentError("contextual_loss_from_features: sample count mismatch");
    std::vector<VarPtr> sample_terms;
    for (std::size_t n = 0; n < gen_levels[l].size(); ++n)
      sample_terms.push_back(ad::neg(ad::log_(cx_similarity(gen_levels[l][n], target_levels[l][n]))));
    level_terms.push_back(ad::mean_all(ad::stack_scalars(sample_terms)));
  }
  return ad::mean_all(ad::stack_scalars(level_terms));
}

// ---------------------------------------------------------------------------
// Local texture refinement. Blurred real patches count as fakes on the
// discriminator side.

struct LocalLossTerms {
  VarPtr generator_term;      // E[log(1 - D(p_fake))], minimized by G
  VarPtr discriminator_term;  // E[log D(p_real)] + E[log(1-D(p_blur))] + E[log(1-D(p_fake))], maximized by D
};

namespace detail {
inline VarPtr mean_log_one_minus(const VarPtr& s) {
  return ad::mean_all(ad::log_(ad::rsub_scalar(1.0, ad::clamp(s, kScoreEps, 1.0 - kScoreEps))));
}
}  // namespace detail

// Generator-side term alone; the generator step never needs the real/blur
// branches.
inline VarPtr local_g_loss(const VarPtr& fake_patches, const DiscNet& d_local) {
  return detail::mean_log_one_minus(discriminate(d_local, fake_patches));
}

inline LocalLossTerms local_losses(const VarPtr& fake_patches, const VarPtr& real_patches,
                                   const VarPtr& blur_patches, const DiscNet& d_local) {
  LocalLossTerms out;
  out.generator_term = detail::mean_log_one_minus(discriminate(d_local, fake_patches));
  VarPtr real_term = ad::mean_all(ad::log_(ad::clamp(discriminate(d_local, real_patches), kScoreEps, 1.0 - kScoreEps)));
  VarPtr blur_term = detail::mean_log_one_minus(discriminate(d_local, blur_patches));
  VarPtr fake_term = detail::mean_log_one_minus(discriminate(d_local, fake_patches));
  out.discriminator_term = ad::add(real_term, ad::add(blur_term, fake_term));
  return out;
}

// Random patch locations for one NCHW batch.
inline std::vector<ad::PatchSpot> draw_patch_spots(int batch, int image_size, int patch_size, int per_image,
                                                   Rng& rng) {
  if (patch_size > image_size) throw ArgumentError("patch size exceeds image size");
  std::vector<ad::PatchSpot> spots;
  spots.reserve(static_cast<std::size_t>(batch) * per_image);
  const std::uint64_t range = static_cast<std::uint64_t>(image_size - patch_size + 1);
  for (int n = 0; n < batch; ++n)
    for (int p = 0; p < per_image; ++p)
      spots.push_back({n, static_cast<int>(rng.uniform_int(range)), static_cast<int>(rng.uniform_int(range))});
  return spots;
}

// ---------------------------------------------------------------------------
// Pixel-weighted reconstruction for the supervised backbone

struct PixelWeighting {
  real black_threshold = 0.5;
  bool ink_mean_black_only = false;  // switch: mean ink over black pixels only
  std::map<std::pair<int, int>, real> beta;  // (font, char) -> dataset softmax weight

  static real ink_mean(const GlyphImage& g, real threshold, bool black_only) {
    real sum = 0;
    std::size_t count = 0;
    for (real v : g.pixels) {
      if (black_only && !(v < threshold)) continue;
      sum += 1.0 - v;
      ++count;
    }
    return count ? sum / static_cast<real>(count) : 0.0;
  }

  static std::size_t black_count(const Tensor& img, real threshold) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < img.numel(); ++i)
      if (img[i] < threshold) ++n;
    return n;
  }

  // alpha = 1/N_b; an ink-free target falls back to 1/(total pixels).
  real alpha(const Tensor& target, bool* fellback = nullptr) const {
    const std::size_t nb = black_count(target, black_threshold);
    if (fellback) *fellback = (nb == 0);
    return 1.0 / static_cast<real>(nb ? nb : target.numel());
  }

  real beta_for(int font_id, int char_id) const {
    auto it = beta.find({font_id, char_id});
    if (it == beta.end())
      throw ArgumentError("no dataset weight for font " + std::to_string(font_id) + ", char " +
                          std::to_string(char_id) + " (not a training glyph)");
    return it->second;
  }
};

// beta = softmax over the training set (train fonts x train chars) of
// per-image mean ink values.
inline PixelWeighting compute_pixel_weighting(const GlyphCorpus& corpus, real black_threshold = 0.5,
                                              bool ink_mean_black_only = false) {
  PixelWeighting w;
  w.black_threshold = black_threshold;
  w.ink_mean_black_only = ink_mean_black_only;
  std::vector<std::pair<std::pair<int, int>, real>> means;
  real max_mean = -1e300;
  for (int f : corpus.train_fonts())
    for (int c : corpus.train_chars()) {
      const real m = PixelWeighting::ink_mean(corpus.glyph(f, c), black_threshold, ink_mean_black_only);
      means.push_back({{f, c}, m});
      max_mean = std::max(max_mean, m);
    }
  if (means.empty()) throw ArgumentError("pixel weighting needs a nonempty training set");
  real z = 0;
  for (const auto& [key, m] : means) z += std::exp(m - max_mean);
  for (const auto& [key, m] : means) w.beta[key] = std::exp(m - max_mean) / z;
  return w;
}

// alpha * beta * sum |y - target|; the L1 norm here is a sum, not a mean.
inline VarPtr emd_weighted_l1(const VarPtr& y, const VarPtr& target, real alpha, real beta) {
  if (!y->value.same_shape(target->value)) throw ShapeError("emd_weighted_l1: shape mismatch");
  return ad::scale(ad::sum_all(ad::abs_(ad::sub(y, target))), alpha * beta);
}

// ---------------------------------------------------------------------------
// Combined objectives

struct AgisLossTerms {
  VarPtr l1;
  VarPtr adv;
  VarPtr cx;
  VarPtr local_g;
  VarPtr dml;
};

// Per-term multipliers for the fine-tuning masking rules: ground-truth losses
// are zeroed for characters without references, and the metric-learning term
// is zeroed for the whole phase.
struct TermMasks {
  real l1 = 1.0;
  real cx = 1.0;
  real dml = 1.0;
};

inline VarPtr total_g_loss_agis(const AgisLossTerms& terms, const LossWeights& w, const TermMasks& masks) {
  auto or_zero = [](const VarPtr& v) { return v ? v : ad::constant(Tensor::scalar(0.0)); };
  VarPtr stacked = ad::stack_scalars(
      {or_zero(terms.l1), or_zero(terms.adv), or_zero(terms.cx), or_zero(terms.local_g), or_zero(terms.dml)});
  return ad::weighted_sum_const(stacked, {w.lambda_l1 * masks.l1, w.lambda_adv, w.lambda_cx * masks.cx,
                                          w.lambda_local, w.lambda_dml * masks.dml});
}

inline VarPtr total_g_loss_emd(const VarPtr& weighted_l1, const VarPtr& dml, real lambda_dml) {
  return ad::add(weighted_l1, ad::scale(dml, lambda_dml));
}

}  // namespace fontgen
