#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fontgen/autodiff.hpp"
#include "fontgen/checkpoint.hpp"
#include "fontgen/common.hpp"
#include "fontgen/rng.hpp"
#include "fontgen/tensor.hpp"

namespace fontgen {

using ad::VarPtr;

struct ModelConfig {
  int image_size = 64;
  int embed_dim = 64;  // d: style/content embedding width for the GAN backbone
  int emd_R = 64;      // style embedding width, second backbone
  int emd_B = 64;      // content embedding width, second backbone
  int emd_K = 64;      // mixed-code width, second backbone
  int m = 4;           // style glyphs concatenated per GAN-backbone forward
  int n = 5;           // few-shot reference budget
  int base_channels = 8;
  int patch_size = 16;
  int patches_per_image = 4;
  real dml_tau = 0.5;

  // Stride-2 stages needed to reduce image_size x image_size to 1x1.
  int stages() const {
    int s = 0, v = image_size;
    while (v > 1) {
      v >>= 1;
      ++s;
    }
    return s;
  }

  void validate() const {
    if (image_size < 8 || (image_size & (image_size - 1)) != 0)
      throw ArgumentError("image_size must be a power of two, at least 8");
    if (patch_size < 8 || (patch_size & (patch_size - 1)) != 0 || patch_size > image_size)
      throw ArgumentError("patch_size must be a power of two in [8, image_size]");
    for (int v : {embed_dim, emd_R, emd_B, emd_K, m, n, base_channels, patches_per_image})
      if (v <= 0) throw ArgumentError("model dimensions must be positive");
    if (dml_tau <= 0) throw ArgumentError("dml temperature must be positive");
  }

  // Channel width after each of the first stages()-1 encoder stages; the
  // final stage emits the embedding.
  std::vector<int> encoder_channels() const {
    std::vector<int> ch;
    int c = base_channels;
    for (int j = 0; j < stages() - 1; ++j) {
      ch.push_back(c);
      c = std::min(c * 2, 64);
    }
    return ch;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"embed_dim", c.embed_dim},
                     {"emd_R", c.emd_R},
                     {"emd_B", c.emd_B},
                     {"emd_K", c.emd_K},
                     {"m", c.m},
                     {"n", c.n},
                     {"base_channels", c.base_channels},
                     {"patch_size", c.patch_size},
                     {"patches_per_image", c.patches_per_image},
                     {"dml_tau", c.dml_tau}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("emd_R").get_to(c.emd_R);
  j.at("emd_B").get_to(c.emd_B);
  j.at("emd_K").get_to(c.emd_K);
  j.at("m").get_to(c.m);
  j.at("n").get_to(c.n);
  j.at("base_channels").get_to(c.base_channels);
  j.at("patch_size").get_to(c.patch_size);
  j.at("patches_per_image").get_to(c.patches_per_image);
  j.at("dml_tau").get_to(c.dml_tau);
}

// ---------------------------------------------------------------------------
// Layer containers. Parameters are tape nodes created once and reused across
// forward passes.

namespace init {
inline Tensor normal(std::vector<int> shape, Rng& rng, real mean, real stddev) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(mean, stddev);
  return t;
}
}  // namespace init

struct ConvLayer {
  VarPtr w;
  VarPtr b;  // null when a normalization layer follows (bias would be redundant
             // there and its gradient identically zero)
  int stride = 2;
  int pad = 1;
};

struct NormLayer {
  VarPtr gamma;
  VarPtr beta;
};

struct ConvBlock {
  ConvLayer conv;
  std::optional<NormLayer> norm;
  bool activate = true;  // leaky ReLU 0.2
  bool transpose = false;
};

inline ConvBlock make_block(int in_ch, int out_ch, bool with_norm, bool activate, bool transpose, Rng& rng) {
  ConvBlock blk;
  blk.transpose = transpose;
  const std::vector<int> wshape = transpose ? std::vector<int>{in_ch, out_ch, 4, 4}
                                            : std::vector<int>{out_ch, in_ch, 4, 4};
  blk.conv.w = ad::parameter(init::normal(wshape, rng, 0.0, 0.02));
  if (!with_norm) blk.conv.b = ad::parameter(Tensor({out_ch}));
  if (with_norm) blk.norm = NormLayer{ad::parameter(init::normal({out_ch}, rng, 1.0, 0.02)), ad::parameter(Tensor({out_ch}))};
  blk.activate = activate;
  return blk;
}

inline VarPtr apply_block(const ConvBlock& blk, const VarPtr& x) {
  VarPtr h = blk.transpose ? ad::conv2d_transpose(x, blk.conv.w, blk.conv.b, blk.conv.stride, blk.conv.pad)
                           : ad::conv2d(x, blk.conv.w, blk.conv.b, blk.conv.stride, blk.conv.pad);
  if (blk.norm) h = ad::instance_norm(h, blk.norm->gamma, blk.norm->beta);
  if (blk.activate) h = ad::leaky_relu(h, 0.2);
  return h;
}

// Encoder: stages()-1 conv+norm+relu blocks halving the extent, then one
// plain conv with bias mapping 2x2 -> 1x1 at the embedding width.
struct EncoderNet {
  std::vector<ConvBlock> blocks;
  int in_channels = 1;
  int out_dim = 0;
};

inline EncoderNet make_encoder(const ModelConfig& cfg, int in_channels, int out_dim, Rng& rng) {
  EncoderNet net;
  net.in_channels = in_channels;
  net.out_dim = out_dim;
  const std::vector<int> ch = cfg.encoder_channels();
  int prev = in_channels;
  for (int j = 0; j < static_cast<int>(ch.size()); ++j) {
    net.blocks.push_back(make_block(prev, ch[static_cast<std::size_t>(j)], true, true, false, rng));
    prev = ch[static_cast<std::size_t>(j)];
  }
  net.blocks.push_back(make_block(prev, out_dim, false, false, false, rng));
  return net;
}

// Post-activation feature maps per stage (extent halves each level; the last
// entry is the 1x1 embedding map) plus the flattened embedding matrix.
struct Pyramid {
  std::vector<VarPtr> levels;
  VarPtr embedding;  // [N, out_dim]
};

// Network input contract: glyph pixels in [0,1]; remapped to [-1,1] here.
inline VarPtr to_net_range(const VarPtr& images01) { return ad::affine(images01, 2.0, -1.0); }

inline Pyramid encode(const EncoderNet& net, const VarPtr& images01) {
  if (images01->value.rank() != 4 || images01->value.dim(1) != net.in_channels)
    throw ShapeError("encode: expected [N," + std::to_string(net.in_channels) + ",H,W], got " +
                     images01->value.shape_string());
  Pyramid pyr;
  VarPtr h = to_net_range(images01);
  for (const ConvBlock& blk : net.blocks) {
    h = apply_block(blk, h);
    pyr.levels.push_back(h);
  }
  pyr.embedding = ad::reshape(h, {h->value.dim(0), net.out_dim});
  return pyr;
}

inline VarPtr normalize_embedding(const VarPtr& emb) { return ad::l2_normalize_rows(emb, 1e-12); }

// Decoder: mirror of the encoder. The mixed code enters at the bottleneck;
// every stage receives the content-pyramid level whose extent matches its
// input (content-side skip connections only).
struct DecoderNet {
  std::vector<ConvBlock> blocks;
  int code_dim = 0;
};

inline DecoderNet make_decoder(const ModelConfig& cfg, int code_dim, int content_out_dim, Rng& rng) {
  DecoderNet net;
  net.code_dim = code_dim;
  const std::vector<int> enc_ch = cfg.encoder_channels();
  const int S = cfg.stages();
  // Pyramid channel count at level j (0-based): enc_ch[j] for j < S-1, else
  // the content embedding width.
  auto level_ch = [&](int j) { return j < S - 1 ? enc_ch[static_cast<std::size_t>(j)] : content_out_dim; };
  int prev = code_dim;
  for (int i = 0; i < S; ++i) {
    const int skip_level = S - 1 - i;  // matches the stage's input extent
    const int in_ch = prev + level_ch(skip_level);
    const bool last = (i == S - 1);
    const int out_ch = last ? 1 : enc_ch[static_cast<std::size_t>(S - 2 - i)];
    ConvBlock blk = make_block(in_ch, out_ch, !last, !last, true, rng);
    net.blocks.push_back(std::move(blk));
    prev = out_ch;
  }
  return net;
}

inline VarPtr decode(const DecoderNet& net, const VarPtr& code, const Pyramid& content) {
  if (code->value.rank() != 2 || code->value.dim(1) != net.code_dim)
    throw ShapeError("decode: expected code [N," + std::to_string(net.code_dim) + "], got " +
                     code->value.shape_string());
  const int N = code->value.dim(0);
  const int S = static_cast<int>(net.blocks.size());
  if (static_cast<int>(content.levels.size()) != S)
    throw ShapeError("decode: content pyramid depth mismatch");
  VarPtr h = ad::reshape(code, {N, net.code_dim, 1, 1});
  for (int i = 0; i < S; ++i) {
    h = ad::concat_channels({h, content.levels[static_cast<std::size_t>(S - 1 - i)]});
    h = apply_block(net.blocks[static_cast<std::size_t>(i)], h);
  }
  return ad::sigmoid(h);  // glyph range [0,1]
}

// Patch/image critics: conv stack down to 4x4, then a dense sigmoid head.
struct DiscNet {
  std::vector<ConvBlock> blocks;
  VarPtr fc_w;
  VarPtr fc_b;
  int input_size = 0;
  int flat_dim = 0;
};

inline DiscNet make_disc(int input_size, int base_channels, Rng& rng) {
  DiscNet net;
  net.input_size = input_size;
  int stages = 0, v = input_size;
  while (v > 4) {
    v >>= 1;
    ++stages;
  }
  int prev = 1, c = base_channels;
  for (int j = 0; j < stages; ++j) {
    net.blocks.push_back(make_block(prev, c, true, true, false, rng));
    prev = c;
    c = std::min(c * 2, 64);
  }
  net.flat_dim = prev * 4 * 4;
  net.fc_w = ad::parameter(init::normal({net.flat_dim, 1}, rng, 0.0, 0.02));
  net.fc_b = ad::parameter(Tensor({1}));
  return net;
}

// Scores in (0,1), one per input image/patch: [N].
inline VarPtr discriminate(const DiscNet& net, const VarPtr& images01) {
  if (images01->value.rank() != 4 || images01->value.dim(1) != 1 || images01->value.dim(2) != net.input_size ||
      images01->value.dim(3) != net.input_size)
    throw ShapeError("discriminate: expected [N,1," + std::to_string(net.input_size) + "," +
                     std::to_string(net.input_size) + "], got " + images01->value.shape_string());
  VarPtr h = to_net_range(images01);
  for (const ConvBlock& blk : net.blocks) h = apply_block(blk, h);
  h = ad::reshape(h, {h->value.dim(0), net.flat_dim});
  h = ad::linear(h, net.fc_w, net.fc_b);
  h = ad::sigmoid(h);
  return ad::reshape(h, {h->value.dim(0)});
}

// Per-class weights over L2-normalized style embeddings, trained with
// temperature-scaled softmax cross-entropy.
struct DmlHeadNet {
  VarPtr W;  // [d, C], column j = class-j weight vector
  VarPtr b;  // [C]
  real tau = 0.5;
  int num_classes = 0;
};

inline DmlHeadNet make_dml_head(int dim, int num_classes, real tau, Rng& rng) {
  if (tau <= 0) throw ArgumentError("dml temperature must be positive");
  if (num_classes < 1) throw ArgumentError("dml head needs at least one class");
  DmlHeadNet head;
  head.W = ad::parameter(init::normal({dim, num_classes}, rng, 0.0, 0.02));
  head.b = ad::parameter(Tensor({num_classes}));
  head.tau = tau;
  head.num_classes = num_classes;
  return head;
}

// logit_j = (w_j . x + b_j) / tau
inline VarPtr dml_logits(const VarPtr& normalized_emb, const DmlHeadNet& head) {
  return ad::scale(ad::linear(normalized_emb, head.W, head.b), 1.0 / head.tau);
}

// Mixers. The GAN backbone concatenates content and style codes; the other
// backbone contracts them through a third-order tensor.
inline VarPtr mix_agis(const VarPtr& content_emb, const VarPtr& style_emb) {
  return ad::concat_cols(content_emb, style_emb);
}

struct BilinearMixer {
  VarPtr W;  // [K, R, B]
};

inline VarPtr mix_emd(const VarPtr& style_emb, const VarPtr& content_emb, const BilinearMixer& mixer) {
  return ad::bilinear_mix(style_emb, content_emb, mixer.W);
}

// ---------------------------------------------------------------------------
// Bundle

enum class Backbone { agis, emd };

inline std::string backbone_name(Backbone b) { return b == Backbone::agis ? "agis" : "emd"; }
inline Backbone backbone_from_name(const std::string& s) {
  if (s == "agis") return Backbone::agis;
  if (s == "emd") return Backbone::emd;
  throw DataError("unknown backbone '" + s + "'");
}

struct ModelBundle {
  Backbone kind = Backbone::agis;
  ModelConfig config;
  int num_classes = 0;  // C: training font count

  EncoderNet content_encoder;
  EncoderNet style_encoder;
  BilinearMixer mixer;  // emd only
  DecoderNet decoder;
  DiscNet tex_disc;    // agis only
  DiscNet local_disc;  // agis only
  DmlHeadNet dml_head;

  std::vector<std::pair<std::string, VarPtr>> named_parameters() const {
    std::vector<std::pair<std::string, VarPtr>> out;
    auto add_block = [&out](const std::string& prefix, const ConvBlock& blk) {
      out.emplace_back(prefix + ".w", blk.conv.w);
      if (blk.conv.b) out.emplace_back(prefix + ".b", blk.conv.b);
      if (blk.norm) {
        out.emplace_back(prefix + ".gamma", blk.norm->gamma);
        out.emplace_back(prefix + ".beta", blk.norm->beta);
      }
    };
    auto add_encoder = [&](const std::string& name, const EncoderNet& net) {
      for (std::size_t j = 0; j < net.blocks.size(); ++j) add_block(name + ".b" + std::to_string(j), net.blocks[j]);
    };
    add_encoder("content_encoder", content_encoder);
    add_encoder("style_encoder", style_encoder);
    if (kind == Backbone::emd) out.emplace_back("mixer.W", mixer.W);
    for (std::size_t j = 0; j < decoder.blocks.size(); ++j)
      add_block("decoder.b" + std::to_string(j), decoder.blocks[j]);
    if (kind == Backbone::agis) {
      for (std::size_t j = 0; j < tex_disc.blocks.size(); ++j)
        add_block("tex_disc.b" + std::to_string(j), tex_disc.blocks[j]);
      out.emplace_back("tex_disc.fc.w", tex_disc.fc_w);
      out.emplace_back("tex_disc.fc.b", tex_disc.fc_b);
      for (std::size_t j = 0; j < local_disc.blocks.size(); ++j)
        add_block("local_disc.b" + std::to_string(j), local_disc.blocks[j]);
      out.emplace_back("local_disc.fc.w", local_disc.fc_w);
      out.emplace_back("local_disc.fc.b", local_disc.fc_b);
    }
    out.emplace_back("dml_head.W", dml_head.W);
    out.emplace_back("dml_head.b", dml_head.b);
    return out;
  }

  std::vector<VarPtr> generator_parameters() const {
    std::vector<VarPtr> out;
    auto add = [&out](const std::vector<std::pair<std::string, VarPtr>>& named, const std::string& prefix) {
      for (const auto& [name, p] : named)
        if (name.rfind(prefix, 0) == 0) out.push_back(p);
    };
    const auto named = named_parameters();
    add(named, "content_encoder.");
    add(named, "style_encoder.");
    add(named, "mixer.");
    add(named, "decoder.");
    return out;
  }

  std::vector<VarPtr> discriminator_parameters() const {
    std::vector<VarPtr> out;
    const auto named = named_parameters();
    for (const auto& [name, p] : named)
      if (name.rfind("tex_disc.", 0) == 0 || name.rfind("local_disc.", 0) == 0) out.push_back(p);
    return out;
  }

  std::vector<VarPtr> dml_parameters() const { return {dml_head.W, dml_head.b}; }
};

// Parameter construction order is fixed so a given seed always produces the
// same initial weights.
inline ModelBundle make_bundle(Backbone kind, const ModelConfig& cfg, int num_classes, Rng& rng) {
  cfg.validate();
  if (num_classes < 1) throw ArgumentError("bundle needs at least one training font class");
  ModelBundle b;
  b.kind = kind;
  b.config = cfg;
  b.num_classes = num_classes;
  if (kind == Backbone::agis) {
    b.content_encoder = make_encoder(cfg, 1, cfg.embed_dim, rng);
    b.style_encoder = make_encoder(cfg, cfg.m, cfg.embed_dim, rng);
    b.decoder = make_decoder(cfg, 2 * cfg.embed_dim, cfg.embed_dim, rng);
    b.tex_disc = make_disc(cfg.image_size, cfg.base_channels, rng);
    b.local_disc = make_disc(cfg.patch_size, cfg.base_channels, rng);
    b.dml_head = make_dml_head(cfg.embed_dim, num_classes, cfg.dml_tau, rng);
  } else {
    b.content_encoder = make_encoder(cfg, cfg.n, cfg.emd_B, rng);
    b.style_encoder = make_encoder(cfg, cfg.n, cfg.emd_R, rng);
    b.mixer.W = ad::parameter(init::normal({cfg.emd_K, cfg.emd_R, cfg.emd_B}, rng, 0.0, 0.02));
    b.decoder = make_decoder(cfg, cfg.emd_K, cfg.emd_B, rng);
    b.dml_head = make_dml_head(cfg.emd_R, num_classes, cfg.dml_tau, rng);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Whole-generator forwards

struct GeneratorForward {
  Pyramid content;
  Pyramid style;
  VarPtr style_norm;  // [N, d] unit rows
  VarPtr code;
  VarPtr fake;  // [N,1,H,W] in [0,1]
};

// content01: [N,1,H,W]; style01: [N,m,H,W]
inline GeneratorForward agis_forward(const ModelBundle& b, const VarPtr& content01, const VarPtr& style01) {
  GeneratorForward f;
  f.content = encode(b.content_encoder, content01);
  f.style = encode(b.style_encoder, style01);
  f.style_norm = normalize_embedding(f.style.embedding);
  f.code = mix_agis(f.content.embedding, f.style.embedding);
  f.fake = decode(b.decoder, f.code, f.content);
  return f;
}

// content01: [N,n,H,W]; style01: [N,n,H,W]
inline GeneratorForward emd_forward(const ModelBundle& b, const VarPtr& content01, const VarPtr& style01) {
  GeneratorForward f;
  f.content = encode(b.content_encoder, content01);
  f.style = encode(b.style_encoder, style01);
  f.style_norm = normalize_embedding(f.style.embedding);
  f.code = mix_emd(f.style.embedding, f.content.embedding, b.mixer);
  f.fake = decode(b.decoder, f.code, f.content);
  return f;
}

inline GeneratorForward generator_forward(const ModelBundle& b, const VarPtr& content01, const VarPtr& style01) {
  return b.kind == Backbone::agis ? agis_forward(b, content01, style01) : emd_forward(b, content01, style01);
}

// ---------------------------------------------------------------------------
// Bundle serialization (bit-exact)

inline Checkpoint bundle_to_checkpoint(const ModelBundle& b) {
  Checkpoint ckpt;
  ckpt.kind = "model/" + backbone_name(b.kind);
  ckpt.meta["config"] = b.config;
  ckpt.meta["num_classes"] = b.num_classes;
  for (const auto& [name, p] : b.named_parameters()) ckpt.arrays.emplace_back(name, p->value);
  return ckpt;
}

inline ModelBundle bundle_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind.rfind("model/", 0) != 0) throw DataError("checkpoint kind '" + ckpt.kind + "' is not a model");
  const Backbone kind = backbone_from_name(ckpt.kind.substr(6));
  ModelConfig cfg = ckpt.meta.at("config").get<ModelConfig>();
  const int num_classes = ckpt.meta.at("num_classes").get<int>();
  Rng scratch(0);  // initializer values are immediately overwritten
  ModelBundle b = make_bundle(kind, cfg, num_classes, scratch);
  const auto named = b.named_parameters();
  if (named.size() != ckpt.arrays.size())
    throw DataError("checkpoint has " + std::to_string(ckpt.arrays.size()) + " arrays, model expects " +
                    std::to_string(named.size()));
  for (const auto& [name, p] : named) {
    const Tensor& stored = ckpt.array(name);
    if (!stored.same_shape(p->value))
      throw DataError("checkpoint array '" + name + "' has shape " + stored.shape_string() + ", expected " +
                      p->value.shape_string());
    p->value = stored;
  }
  return b;
}

}  // namespace fontgen
