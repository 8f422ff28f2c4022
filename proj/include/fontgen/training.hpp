#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fontgen/autodiff.hpp"
#include "fontgen/checkpoint.hpp"
#include "fontgen/common.hpp"
#include "fontgen/corpus.hpp"
#include "fontgen/losses.hpp"
#include "fontgen/model.hpp"
#include "fontgen/rng.hpp"
#include "fontgen/tensor.hpp"

namespace fontgen {

// ---------------------------------------------------------------------------
// Schedules

enum class TrainPhase { agis_pretrain, agis_finetune, emd_train };

inline std::string phase_name(TrainPhase p) {
  switch (p) {
    case TrainPhase::agis_pretrain: return "agis_pretrain";
    case TrainPhase::agis_finetune: return "agis_finetune";
    default: return "emd_train";
  }
}

inline TrainPhase phase_from_name(const std::string& s) {
  if (s == "agis_pretrain") return TrainPhase::agis_pretrain;
  if (s == "agis_finetune") return TrainPhase::agis_finetune;
  if (s == "emd_train") return TrainPhase::emd_train;
  throw ArgumentError("unknown training phase '" + s + "'");
}

enum class LrDecay { none, linear_after_half };

struct TrainSchedule {
  TrainPhase phase = TrainPhase::agis_pretrain;
  int epochs = 20;
  real base_lr = 2e-4;
  LrDecay decay = LrDecay::linear_after_half;
  int batch_size = 8;
  std::uint64_t seed = 0;
  int m = 4;  // style references per sample (GAN backbone)
  int n = 5;  // reference count (few-shot budget / channel count)

  void validate() const {
    if (epochs < 1) throw ArgumentError("schedule needs at least one epoch");
    if (decay == LrDecay::linear_after_half && epochs < 2)
      throw ArgumentError("linear decay needs at least two epochs");
    if (base_lr <= 0) throw ArgumentError("base learning rate must be positive");
    if (batch_size < 1) throw ArgumentError("batch size must be positive");
    if (m < 1 || n < 1) throw ArgumentError("reference counts must be positive");
  }
};

inline TrainSchedule schedule_for(TrainPhase phase, std::uint64_t seed = 0) {
  TrainSchedule s;
  s.phase = phase;
  s.seed = seed;
  switch (phase) {
    case TrainPhase::agis_pretrain:
      s.epochs = 20;
      s.base_lr = 2e-4;
      s.decay = LrDecay::linear_after_half;
      break;
    case TrainPhase::agis_finetune:
      s.epochs = 200;
      s.base_lr = 2e-5;
      s.decay = LrDecay::none;
      break;
    case TrainPhase::emd_train:
      s.epochs = 10;
      s.base_lr = 2e-4;
      s.decay = LrDecay::none;
      break;
  }
  return s;
}

// Epochs are 1-based: constant for the first half, then linear to exactly
// zero at the final epoch.
inline real learning_rate(const TrainSchedule& s, int epoch) {
  if (epoch < 1 || epoch > s.epochs) throw ArgumentError("epoch out of schedule range");
  if (s.decay == LrDecay::none) return s.base_lr;
  const int half = s.epochs / 2;
  if (epoch <= half) return s.base_lr;
  return s.base_lr * static_cast<real>(s.epochs - epoch) / static_cast<real>(s.epochs - half);
}

// ---------------------------------------------------------------------------
// Optimizer: adaptive moment estimation with bias correction; one group per
// alternation side so step counts stay independent.

struct AdamGroup {
  real beta1 = 0.5;
  real beta2 = 0.999;
  real eps = 1e-8;
  std::int64_t t = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments;  // name -> (m, v)

  void step(const std::vector<std::pair<std::string, VarPtr>>& params, real lr) {
    ++t;
    const real bc1 = 1.0 - std::pow(beta1, static_cast<real>(t));
    const real bc2 = 1.0 - std::pow(beta2, static_cast<real>(t));
    for (const auto& [name, p] : params) {
      auto& [m, v] = moments[name];
      if (m.numel() == 0) {
        m = Tensor(p->value.shape());
        v = Tensor(p->value.shape());
      }
      const bool has_grad = p->grad.numel() != 0;
      const std::size_t n = p->value.numel();
      for (std::size_t i = 0; i < n; ++i) {
        const real g = has_grad ? p->grad[i] : 0.0;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        p->value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// State

struct LossRecord {
  std::int64_t step = 0;
  std::string term;
  real value = 0;
};

struct TrainState {
  TrainPhase phase = TrainPhase::agis_pretrain;
  ModelBundle bundle;
  PerceptualExtractor extractor;  // frozen; GAN phases only
  LossWeights weights;
  TrainSchedule schedule;
  PixelWeighting weighting;  // supervised phase only
  ReferenceSet target_refs;  // fine-tuning only
  AdamGroup g_opt, d_opt;
  int epoch = 0;             // completed epochs
  std::int64_t step = 0;     // completed generator steps
  Rng rng{0};
  std::vector<LossRecord> history;
  std::vector<std::pair<int, real>> lr_log;  // (epoch, lr), one row per epoch
  std::vector<real> dml_head_grad_norms;     // one entry per generator step
};

namespace detail_train {

inline std::vector<std::pair<std::string, VarPtr>> named_with_prefixes(const ModelBundle& b,
                                                                       std::initializer_list<const char*> prefixes) {
  std::vector<std::pair<std::string, VarPtr>> out;
  for (const auto& [name, p] : b.named_parameters())
    for (const char* pre : prefixes)
      if (name.rfind(pre, 0) == 0) {
        out.emplace_back(name, p);
        break;
      }
  return out;
}

inline std::vector<std::pair<std::string, VarPtr>> generator_group(const ModelBundle& b, bool with_head) {
  auto out = named_with_prefixes(b, {"content_encoder.", "style_encoder.", "mixer.", "decoder."});
  if (with_head) {
    auto head = named_with_prefixes(b, {"dml_head."});
    out.insert(out.end(), head.begin(), head.end());
  }
  return out;
}

inline std::vector<std::pair<std::string, VarPtr>> discriminator_group(const ModelBundle& b) {
  return named_with_prefixes(b, {"tex_disc.", "local_disc."});
}

inline void zero_all_grads(const ModelBundle& b) {
  std::vector<VarPtr> ps;
  for (const auto& [name, p] : b.named_parameters()) ps.push_back(p);
  ad::zero_grad(ps);
}

inline real head_grad_norm(const ModelBundle& b) {
  real acc = 0;
  for (const VarPtr& p : b.dml_parameters()) {
    if (p->grad.numel() == 0) continue;
    for (std::size_t i = 0; i < p->grad.numel(); ++i) acc += p->grad[i] * p->grad[i];
  }
  return std::sqrt(acc);
}

inline void record(TrainState& s, std::int64_t step, const std::string& term, real value) {
  if (!std::isfinite(value))
    throw NumericError("non-finite loss term '" + term + "' at step " + std::to_string(step));
  s.history.push_back({step, term, value});
}

// First k reference ids, sampled without replacement when enough are
// available, cycled deterministically otherwise.
inline std::vector<int> pick_ids(const std::vector<int>& ids, int k, Rng& rng) {
  if (ids.empty()) throw ArgumentError("cannot sample from an empty reference list");
  std::vector<int> out(static_cast<std::size_t>(k));
  if (static_cast<int>(ids.size()) >= k) {
    std::vector<int> pool = ids;
    for (int i = 0; i < k; ++i) {
      const std::size_t j = static_cast<std::size_t>(i) + rng.uniform_int(pool.size() - static_cast<std::size_t>(i));
      std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
      out[static_cast<std::size_t>(i)] = pool[static_cast<std::size_t>(i)];
    }
  } else {
    for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = ids[static_cast<std::size_t>(i) % ids.size()];
  }
  return out;
}

inline std::vector<ad::PatchSpot> draw_ref_patch_spots(int batch, int refs_per_item, int image_size, int patch_size,
                                                       int per_image, Rng& rng) {
  std::vector<ad::PatchSpot> spots;
  spots.reserve(static_cast<std::size_t>(batch) * per_image);
  const std::uint64_t range = static_cast<std::uint64_t>(image_size - patch_size + 1);
  for (int i = 0; i < batch; ++i)
    for (int p = 0; p < per_image; ++p)
      spots.push_back({i * refs_per_item + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(refs_per_item))),
                       static_cast<int>(rng.uniform_int(range)), static_cast<int>(rng.uniform_int(range))});
  return spots;
}

inline int font_class(const GlyphCorpus& corpus, int font_id) {
  const auto& fonts = corpus.train_fonts();
  for (std::size_t i = 0; i < fonts.size(); ++i)
    if (fonts[i] == font_id) return static_cast<int>(i);
  throw ArgumentError("font " + std::to_string(font_id) + " is not a training font");
}

struct AgisBatch {
  Tensor content;            // [B,1,s,s]
  Tensor style;              // [B,m,s,s]
  Tensor target;             // [B,1,s,s]; zero rows for unsupervised items
  std::vector<int> classes;  // pretraining only
  std::vector<int> ref_rows; // fine-tuning: rows with ground truth available
};

inline AgisBatch make_agis_batch(TrainState& s, const GlyphCorpus& corpus,
                                 const std::vector<std::pair<int, int>>& items) {
  const int B = static_cast<int>(items.size());
  const int size = corpus.image_size();
  const int m = s.schedule.m;
  AgisBatch batch;
  batch.content = Tensor({B, 1, size, size});
  batch.style = Tensor({B, m, size, size});
  batch.target = Tensor({B, 1, size, size});
  const bool finetune = s.phase == TrainPhase::agis_finetune;
  std::set<int> ref_set(s.target_refs.char_ids.begin(), s.target_refs.char_ids.end());
  for (int i = 0; i < B; ++i) {
    const auto [font, ch] = items[static_cast<std::size_t>(i)];
    copy_glyph_into(batch.content, i, 0, corpus.content_reference(ch));
    const std::vector<int>& ref_pool = finetune ? s.target_refs.char_ids : corpus.train_chars();
    const std::vector<int> refs = pick_ids(ref_pool, m, s.rng);
    for (int r = 0; r < m; ++r) copy_glyph_into(batch.style, i, r, corpus.glyph(font, refs[static_cast<std::size_t>(r)]));
    if (!finetune) {
      copy_glyph_into(batch.target, i, 0, corpus.glyph(font, ch));
      batch.classes.push_back(font_class(corpus, font));
    } else if (ref_set.count(ch)) {
      copy_glyph_into(batch.target, i, 0, corpus.glyph(font, ch));
      batch.ref_rows.push_back(i);
    }
  }
  return batch;
}

inline void agis_step(TrainState& s, const GlyphCorpus& corpus, const std::vector<std::pair<int, int>>& items,
                      real lr) {
  const bool finetune = s.phase == TrainPhase::agis_finetune;
  const int B = static_cast<int>(items.size());
  const int size = corpus.image_size();
  const int ps = s.bundle.config.patch_size;
  const int ppi = s.bundle.config.patches_per_image;
  const std::int64_t step = s.step + 1;

  AgisBatch batch = make_agis_batch(s, corpus, items);
  zero_all_grads(s.bundle);

  VarPtr content = ad::constant(batch.content);
  VarPtr style = ad::constant(batch.style);
  GeneratorForward fwd = agis_forward(s.bundle, content, style);

  // Discriminator update on detached samples.
  VarPtr fake_d = ad::detach(fwd.fake);
  Tensor real_imgs({B, 1, size, size});
  if (!finetune) {
    real_imgs = batch.target;
  } else {
    for (int i = 0; i < B; ++i) {
      const int c = s.target_refs.char_ids[s.rng.uniform_int(s.target_refs.char_ids.size())];
      copy_glyph_into(real_imgs, i, 0, corpus.glyph(s.target_refs.font_id, c));
    }
  }
  VarPtr real_v = ad::constant(real_imgs);
  VarPtr d_tex = adv_d_tex_loss(discriminate(s.bundle.tex_disc, real_v), discriminate(s.bundle.tex_disc, fake_d));

  VarPtr style_flat = ad::reshape(style, {B * s.schedule.m, 1, size, size});
  VarPtr real_patches =
      ad::extract_patches(style_flat, draw_ref_patch_spots(B, s.schedule.m, size, ps, ppi, s.rng), ps);
  VarPtr fake_patches_d = ad::extract_patches(fake_d, draw_patch_spots(B, size, ps, ppi, s.rng), ps);
  LocalLossTerms local =
      local_losses(fake_patches_d, real_patches, ad::gaussian_blur3(real_patches), s.bundle.local_disc);

  record(s, step, "d_tex", d_tex->value[0]);
  record(s, step, "d_local", local.discriminator_term->value[0]);
  ad::backward(ad::neg(ad::add(d_tex, local.discriminator_term)));
  s.d_opt.step(discriminator_group(s.bundle), lr);
  zero_all_grads(s.bundle);

  // Generator update, re-scored against the just-updated discriminators.
  AgisLossTerms terms;
  if (!finetune) {
    VarPtr target_v = ad::constant(batch.target);
    terms.l1 = l1_loss(fwd.fake, target_v);
    terms.cx = contextual_loss(fwd.fake, target_v, s.extractor);
    terms.dml = dml_loss_batch(dml_logits(fwd.style_norm, s.bundle.dml_head), batch.classes);
  } else if (!batch.ref_rows.empty()) {
    VarPtr fake_ref = ad::select_samples(fwd.fake, batch.ref_rows);
    Tensor target_ref({static_cast<int>(batch.ref_rows.size()), 1, size, size});
    for (std::size_t k = 0; k < batch.ref_rows.size(); ++k) {
      const real* src = batch.target.data() +
                        static_cast<std::size_t>(batch.ref_rows[k]) * static_cast<std::size_t>(size) * size;
      std::copy_n(src, static_cast<std::size_t>(size) * size, target_ref.data() + k * static_cast<std::size_t>(size) * size);
    }
    VarPtr target_v = ad::constant(target_ref);
    terms.l1 = l1_loss(fake_ref, target_v);
    terms.cx = contextual_loss(fake_ref, target_v, s.extractor);
  }
  terms.adv = adv_g_loss(discriminate(s.bundle.tex_disc, fwd.fake));
  terms.local_g =
      local_g_loss(ad::extract_patches(fwd.fake, draw_patch_spots(B, size, ps, ppi, s.rng), ps), s.bundle.local_disc);

  TermMasks masks;
  masks.dml = finetune ? 0.0 : 1.0;
  VarPtr total = total_g_loss_agis(terms, s.weights, masks);

  if (terms.l1) record(s, step, "l1", terms.l1->value[0]);
  record(s, step, "adv", terms.adv->value[0]);
  if (terms.cx) record(s, step, "cx", terms.cx->value[0]);
  record(s, step, "local", terms.local_g->value[0]);
  if (terms.dml) record(s, step, "dml", terms.dml->value[0]);
  record(s, step, "total", total->value[0]);

  ad::backward(total);
  s.g_opt.step(generator_group(s.bundle, /*with_head=*/!finetune), lr);
  s.dml_head_grad_norms.push_back(head_grad_norm(s.bundle));
  s.step = step;
}

inline void emd_step(TrainState& s, const GlyphCorpus& corpus, const std::vector<std::pair<int, int>>& items,
                     real lr) {
  const int B = static_cast<int>(items.size());
  const int size = corpus.image_size();
  const int n = s.schedule.n;
  const std::int64_t step = s.step + 1;

  Tensor content({B, n, size, size});
  Tensor style({B, n, size, size});
  Tensor target({B, 1, size, size});
  std::vector<int> classes;
  std::vector<real> item_weights;
  int alpha_fallbacks = 0;
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int i = 0; i < B; ++i) {
    const auto [font, ch] = items[static_cast<std::size_t>(i)];
    const std::vector<int> style_chars = pick_ids(corpus.train_chars(), n, s.rng);
    for (int r = 0; r < n; ++r) copy_glyph_into(style, i, r, corpus.glyph(font, style_chars[static_cast<std::size_t>(r)]));
    const std::vector<int> content_fonts = pick_ids(corpus.train_fonts(), n, s.rng);
    for (int r = 0; r < n; ++r) copy_glyph_into(content, i, r, corpus.glyph(content_fonts[static_cast<std::size_t>(r)], ch));
    const GlyphImage& gt = corpus.glyph(font, ch);
    copy_glyph_into(target, i, 0, gt);
    classes.push_back(font_class(corpus, font));

    std::size_t nb = 0;
    for (real v : gt.pixels)
      if (v < s.weighting.black_threshold) ++nb;
    if (nb == 0) ++alpha_fallbacks;
    const real alpha = 1.0 / static_cast<real>(nb ? nb : gt.pixels.size());
    item_weights.push_back(alpha * s.weighting.beta_for(font, ch) / static_cast<real>(B));
  }

  zero_all_grads(s.bundle);
  GeneratorForward fwd = emd_forward(s.bundle, ad::constant(content), ad::constant(style));
  VarPtr per_sample_sum =
      ad::scale(ad::mean_per_sample(ad::abs_(ad::sub(fwd.fake, ad::constant(target)))), static_cast<real>(plane));
  VarPtr weighted = ad::weighted_sum_const(per_sample_sum, item_weights);
  VarPtr dml = dml_loss_batch(dml_logits(fwd.style_norm, s.bundle.dml_head), classes);
  VarPtr total = total_g_loss_emd(weighted, dml, s.weights.lambda_dml);

  record(s, step, "weighted_l1", weighted->value[0]);
  record(s, step, "dml", dml->value[0]);
  record(s, step, "total", total->value[0]);
  if (alpha_fallbacks > 0) record(s, step, "alpha_fallback", static_cast<real>(alpha_fallbacks));

  ad::backward(total);
  s.g_opt.step(generator_group(s.bundle, /*with_head=*/true), lr);
  s.dml_head_grad_norms.push_back(head_grad_norm(s.bundle));
  s.step = step;
}

inline std::vector<std::pair<int, int>> epoch_pairs(const TrainState& s, const GlyphCorpus& corpus) {
  std::vector<std::pair<int, int>> pairs;
  if (s.phase == TrainPhase::agis_finetune) {
    for (int c : corpus.all_chars()) pairs.push_back({s.target_refs.font_id, c});
  } else {
    for (int f : corpus.train_fonts())
      for (int c : corpus.train_chars()) pairs.push_back({f, c});
  }
  return pairs;
}

}  // namespace detail_train

// ---------------------------------------------------------------------------
// Epoch loop

inline void run_epoch(TrainState& s, const GlyphCorpus& corpus) {
  if (s.epoch >= s.schedule.epochs) throw ArgumentError("schedule already completed");
  const int epoch = s.epoch + 1;
  const real lr = learning_rate(s.schedule, epoch);
  s.lr_log.push_back({epoch, lr});
  auto pairs = detail_train::epoch_pairs(s, corpus);
  s.rng.shuffle(pairs);
  const int B = s.schedule.batch_size;
  for (std::size_t off = 0; off < pairs.size(); off += static_cast<std::size_t>(B)) {
    const std::size_t end = std::min(pairs.size(), off + static_cast<std::size_t>(B));
    std::vector<std::pair<int, int>> items(pairs.begin() + static_cast<std::ptrdiff_t>(off),
                                           pairs.begin() + static_cast<std::ptrdiff_t>(end));
    if (s.phase == TrainPhase::emd_train)
      detail_train::emd_step(s, corpus, items, lr);
    else
      detail_train::agis_step(s, corpus, items, lr);
  }
  s.epoch = epoch;
}

inline void train(TrainState& s, const GlyphCorpus& corpus) {
  while (s.epoch < s.schedule.epochs) run_epoch(s, corpus);
}

// ---------------------------------------------------------------------------
// Phase constructors

inline TrainState make_pretrain_state(const GlyphCorpus& corpus, const ModelConfig& config,
                                      const TrainSchedule& schedule, const LossWeights& weights = {},
                                      std::uint64_t extractor_seed = 1234) {
  schedule.validate();
  weights.validate();
  if (schedule.phase != TrainPhase::agis_pretrain) throw ArgumentError("schedule phase must be agis_pretrain");
  if (corpus.train_fonts().size() < 2) throw ArgumentError("pretraining needs at least two training fonts");
  if (schedule.m != config.m)
    throw ArgumentError("schedule m=" + std::to_string(schedule.m) + " disagrees with model m=" +
                        std::to_string(config.m));
  if (config.image_size != corpus.image_size()) throw ArgumentError("model and corpus image sizes disagree");
  TrainState s;
  s.phase = TrainPhase::agis_pretrain;
  s.schedule = schedule;
  s.weights = weights;
  s.rng = Rng(Rng::mix(schedule.seed, 0x7261696e5f616769ull));
  s.bundle = make_bundle(Backbone::agis, config, static_cast<int>(corpus.train_fonts().size()), s.rng);
  s.extractor = make_perceptual_extractor(config.image_size, extractor_seed);
  return s;
}

inline TrainState pretrain_agis(const GlyphCorpus& corpus, const ModelConfig& config, const TrainSchedule& schedule,
                                const LossWeights& weights = {}, std::uint64_t extractor_seed = 1234) {
  TrainState s = make_pretrain_state(corpus, config, schedule, weights, extractor_seed);
  train(s, corpus);
  return s;
}

// Deep copy so the pretrained state stays usable for comparisons.
inline ModelBundle clone_bundle(const ModelBundle& b) { return bundle_from_checkpoint(bundle_to_checkpoint(b)); }

inline TrainState make_finetune_state(const TrainState& pretrained, const GlyphCorpus& corpus,
                                      const ReferenceSet& target_refs, const TrainSchedule& schedule) {
  schedule.validate();
  if (schedule.phase != TrainPhase::agis_finetune) throw ArgumentError("schedule phase must be agis_finetune");
  if (pretrained.bundle.kind != Backbone::agis)
    throw ArgumentError("fine-tuning requires a GAN-backbone pretrained state");
  for (int f : corpus.train_fonts())
    if (f == target_refs.font_id)
      throw ArgumentError("target font " + std::to_string(target_refs.font_id) + " is in the training split");
  if (target_refs.char_ids.empty()) throw ArgumentError("fine-tuning needs at least one reference glyph");
  for (int c : target_refs.char_ids) {
    try {
      corpus.glyph(target_refs.font_id, c);
    } catch (const DataError&) {
      throw ArgumentError("reference glyph missing: font " + std::to_string(target_refs.font_id) + ", char " +
                          std::to_string(c));
    }
  }
  TrainState s;
  s.phase = TrainPhase::agis_finetune;
  s.schedule = schedule;
  s.weights = pretrained.weights;
  s.bundle = clone_bundle(pretrained.bundle);
  s.extractor = pretrained.extractor;
  s.target_refs = target_refs;
  s.rng = Rng(Rng::mix(schedule.seed, 0x66696e6574756e65ull));
  return s;
}

inline TrainState finetune_agis(const TrainState& pretrained, const GlyphCorpus& corpus,
                                const ReferenceSet& target_refs, const TrainSchedule& schedule) {
  TrainState s = make_finetune_state(pretrained, corpus, target_refs, schedule);
  train(s, corpus);
  return s;
}

inline TrainState make_emd_state(const GlyphCorpus& corpus, const ModelConfig& config, const TrainSchedule& schedule,
                                 const LossWeights& weights = {}, real black_threshold = 0.5,
                                 bool ink_mean_black_only = false) {
  schedule.validate();
  weights.validate();
  if (schedule.phase != TrainPhase::emd_train) throw ArgumentError("schedule phase must be emd_train");
  if (corpus.train_fonts().size() < 2) throw ArgumentError("training needs at least two training fonts");
  if (schedule.n != config.n)
    throw ArgumentError("schedule n=" + std::to_string(schedule.n) + " disagrees with model n=" +
                        std::to_string(config.n));
  if (config.image_size != corpus.image_size()) throw ArgumentError("model and corpus image sizes disagree");
  TrainState s;
  s.phase = TrainPhase::emd_train;
  s.schedule = schedule;
  s.weights = weights;
  s.rng = Rng(Rng::mix(schedule.seed, 0x7261696e5f656d64ull));
  s.bundle = make_bundle(Backbone::emd, config, static_cast<int>(corpus.train_fonts().size()), s.rng);
  s.weighting = compute_pixel_weighting(corpus, black_threshold, ink_mean_black_only);
  return s;
}

inline TrainState train_emd(const GlyphCorpus& corpus, const ModelConfig& config, const TrainSchedule& schedule,
                            const LossWeights& weights = {}, real black_threshold = 0.5,
                            bool ink_mean_black_only = false) {
  TrainState s = make_emd_state(corpus, config, schedule, weights, black_threshold, ink_mean_black_only);
  train(s, corpus);
  return s;
}

// ---------------------------------------------------------------------------
// Deterministic generation: style channels use the first references in order
// (cycled when short); the supervised backbone reads content references from
// the first training fonts in split order.

inline std::vector<GlyphImage> generate(const TrainState& state, const GlyphCorpus& corpus,
                                        const std::vector<int>& char_ids, const ReferenceSet& style_refs) {
  if (style_refs.char_ids.empty()) throw ArgumentError("generation needs at least one style reference");
  const int size = corpus.image_size();
  const bool agis = state.bundle.kind == Backbone::agis;
  const int channels = agis ? state.bundle.config.m : state.bundle.config.n;
  std::vector<GlyphImage> out;
  for (int c : char_ids) {
    Tensor content({1, agis ? 1 : channels, size, size});
    Tensor style({1, channels, size, size});
    for (int r = 0; r < channels; ++r) {
      const int ref_char = style_refs.char_ids[static_cast<std::size_t>(r) % style_refs.char_ids.size()];
      copy_glyph_into(style, 0, r, corpus.glyph(style_refs.font_id, ref_char));
    }
    if (agis) {
      copy_glyph_into(content, 0, 0, corpus.content_reference(c));
    } else {
      const auto& fonts = corpus.train_fonts();
      if (fonts.empty()) throw ArgumentError("supervised generation needs training fonts for content references");
      for (int r = 0; r < channels; ++r)
        copy_glyph_into(content, 0, r, corpus.glyph(fonts[static_cast<std::size_t>(r) % fonts.size()], c));
    }
    GeneratorForward fwd = generator_forward(state.bundle, ad::constant(content), ad::constant(style));
    GlyphImage g;
    g.font_id = style_refs.font_id;
    g.char_id = c;
    g.size = size;
    g.pixels.assign(fwd.fake->value.data(), fwd.fake->value.data() + fwd.fake->value.numel());
    for (real& v : g.pixels) v = std::min(std::max(v, 0.0), 1.0);
    out.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: model arrays plus optimizer moments, counters, rng state,
// and emitted logs. Dataset-derived pixel weights are recomputed on load.

inline Checkpoint train_state_to_checkpoint(const TrainState& s) {
  Checkpoint ckpt;
  ckpt.kind = "train/" + phase_name(s.phase);
  ckpt.meta["phase"] = phase_name(s.phase);
  ckpt.meta["model_kind"] = backbone_name(s.bundle.kind);
  ckpt.meta["config"] = s.bundle.config;
  ckpt.meta["num_classes"] = s.bundle.num_classes;
  ckpt.meta["schedule"] = {{"phase", phase_name(s.schedule.phase)},
                           {"epochs", s.schedule.epochs},
                           {"base_lr", s.schedule.base_lr},
                           {"decay", s.schedule.decay == LrDecay::none ? "none" : "linear_after_half"},
                           {"batch_size", s.schedule.batch_size},
                           {"seed", s.schedule.seed},
                           {"m", s.schedule.m},
                           {"n", s.schedule.n}};
  ckpt.meta["weights"] = {{"lambda_l1", s.weights.lambda_l1},
                          {"lambda_adv", s.weights.lambda_adv},
                          {"lambda_cx", s.weights.lambda_cx},
                          {"lambda_local", s.weights.lambda_local},
                          {"lambda_dml", s.weights.lambda_dml}};
  ckpt.meta["weighting"] = {{"black_threshold", s.weighting.black_threshold},
                            {"ink_mean_black_only", s.weighting.ink_mean_black_only}};
  ckpt.meta["target_font"] = s.target_refs.font_id;
  ckpt.meta["target_ref_chars"] = s.target_refs.char_ids;
  ckpt.meta["epoch"] = s.epoch;
  ckpt.meta["step"] = s.step;
  ckpt.meta["rng"] = s.rng.save();
  ckpt.meta["g_t"] = s.g_opt.t;
  ckpt.meta["d_t"] = s.d_opt.t;
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : s.history) hist.push_back({r.step, r.term, r.value});
  ckpt.meta["history"] = std::move(hist);
  nlohmann::json lrl = nlohmann::json::array();
  for (const auto& [e, lr] : s.lr_log) lrl.push_back({e, lr});
  ckpt.meta["lr_log"] = std::move(lrl);
  ckpt.meta["dml_head_grad_norms"] = s.dml_head_grad_norms;

  for (const auto& [name, p] : s.bundle.named_parameters()) ckpt.arrays.emplace_back("model." + name, p->value);
  for (const auto& [name, mv] : s.g_opt.moments) {
    ckpt.arrays.emplace_back("adam_g.m." + name, mv.first);
    ckpt.arrays.emplace_back("adam_g.v." + name, mv.second);
  }
  for (const auto& [name, mv] : s.d_opt.moments) {
    ckpt.arrays.emplace_back("adam_d.m." + name, mv.first);
    ckpt.arrays.emplace_back("adam_d.v." + name, mv.second);
  }
  if (!s.extractor.conv_w.empty()) {
    ckpt.meta["extractor"] = {{"image_size", s.extractor.image_size},
                              {"fid_dim", s.extractor.fid_dim},
                              {"pools", s.extractor.pools},
                              {"provenance", s.extractor.provenance}};
    for (std::size_t l = 0; l < s.extractor.conv_w.size(); ++l)
      ckpt.arrays.emplace_back("extractor.conv" + std::to_string(l) + ".w", s.extractor.conv_w[l]->value);
    ckpt.arrays.emplace_back("extractor.proj", s.extractor.proj);
  }
  return ckpt;
}

inline TrainState train_state_from_checkpoint(const Checkpoint& ckpt, const GlyphCorpus& corpus) {
  if (ckpt.kind.rfind("train/", 0) != 0) throw DataError("checkpoint kind '" + ckpt.kind + "' is not a train state");
  TrainState s;
  s.phase = phase_from_name(ckpt.meta.at("phase").get<std::string>());
  const auto& sch = ckpt.meta.at("schedule");
  s.schedule.phase = phase_from_name(sch.at("phase").get<std::string>());
  s.schedule.epochs = sch.at("epochs").get<int>();
  s.schedule.base_lr = sch.at("base_lr").get<real>();
  s.schedule.decay = sch.at("decay").get<std::string>() == "none" ? LrDecay::none : LrDecay::linear_after_half;
  s.schedule.batch_size = sch.at("batch_size").get<int>();
  s.schedule.seed = sch.at("seed").get<std::uint64_t>();
  s.schedule.m = sch.at("m").get<int>();
  s.schedule.n = sch.at("n").get<int>();
  const auto& w = ckpt.meta.at("weights");
  s.weights.lambda_l1 = w.at("lambda_l1").get<real>();
  s.weights.lambda_adv = w.at("lambda_adv").get<real>();
  s.weights.lambda_cx = w.at("lambda_cx").get<real>();
  s.weights.lambda_local = w.at("lambda_local").get<real>();
  s.weights.lambda_dml = w.at("lambda_dml").get<real>();
  s.target_refs.font_id = ckpt.meta.at("target_font").get<int>();
  s.target_refs.char_ids = ckpt.meta.at("target_ref_chars").get<std::vector<int>>();
  s.epoch = ckpt.meta.at("epoch").get<int>();
  s.step = ckpt.meta.at("step").get<std::int64_t>();
  s.rng = Rng::load(ckpt.meta.at("rng").get<std::string>());
  s.g_opt.t = ckpt.meta.at("g_t").get<std::int64_t>();
  s.d_opt.t = ckpt.meta.at("d_t").get<std::int64_t>();
  for (const auto& row : ckpt.meta.at("history"))
    s.history.push_back({row.at(0).get<std::int64_t>(), row.at(1).get<std::string>(), row.at(2).get<real>()});
  for (const auto& row : ckpt.meta.at("lr_log")) s.lr_log.push_back({row.at(0).get<int>(), row.at(1).get<real>()});
  s.dml_head_grad_norms = ckpt.meta.at("dml_head_grad_norms").get<std::vector<real>>();

  const Backbone kind = backbone_from_name(ckpt.meta.at("model_kind").get<std::string>());
  const ModelConfig cfg = ckpt.meta.at("config").get<ModelConfig>();
  const int num_classes = ckpt.meta.at("num_classes").get<int>();
  Rng scratch(0);
  s.bundle = make_bundle(kind, cfg, num_classes, scratch);
  for (const auto& [name, p] : s.bundle.named_parameters()) {
    const Tensor& stored = ckpt.array("model." + name);
    if (!stored.same_shape(p->value))
      throw DataError("train checkpoint array 'model." + name + "' has unexpected shape");
    p->value = stored;
  }
  for (const auto& [name, p] : s.bundle.named_parameters()) {
    if (ckpt.has_array("adam_g.m." + name))
      s.g_opt.moments[name] = {ckpt.array("adam_g.m." + name), ckpt.array("adam_g.v." + name)};
    if (ckpt.has_array("adam_d.m." + name))
      s.d_opt.moments[name] = {ckpt.array("adam_d.m." + name), ckpt.array("adam_d.v." + name)};
  }
  if (ckpt.meta.contains("extractor")) {
    const auto& exm = ckpt.meta.at("extractor");
    s.extractor.image_size = exm.at("image_size").get<int>();
    s.extractor.fid_dim = exm.at("fid_dim").get<int>();
    s.extractor.pools = exm.at("pools").get<std::vector<int>>();
    s.extractor.provenance = exm.at("provenance").get<std::string>();
    for (std::size_t l = 0; ckpt.has_array("extractor.conv" + std::to_string(l) + ".w"); ++l)
      s.extractor.conv_w.push_back(ad::constant(ckpt.array("extractor.conv" + std::to_string(l) + ".w")));
    s.extractor.proj = ckpt.array("extractor.proj");
  }
  const auto& wm = ckpt.meta.at("weighting");
  if (s.phase == TrainPhase::emd_train)
    s.weighting = compute_pixel_weighting(corpus, wm.at("black_threshold").get<real>(),
                                          wm.at("ink_mean_black_only").get<bool>());
  return s;
}

// ---------------------------------------------------------------------------
// Plain-text logs

inline void write_loss_csv(const std::vector<LossRecord>& history, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write loss log '" + path + "'");
  out << "step,term,value\n";
  for (const auto& r : history) out << r.step << "," << r.term << "," << format_real(r.value) << "\n";
}

inline void write_lr_csv(const std::vector<std::pair<int, real>>& lr_log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write learning-rate log '" + path + "'");
  out << "epoch,lr\n";
  for (const auto& [e, lr] : lr_log) out << e << "," << format_real(lr) << "\n";
}

}  // namespace fontgen
