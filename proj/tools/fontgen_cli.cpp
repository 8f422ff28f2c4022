#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fontgen/fontgen.hpp"

namespace fs = std::filesystem;
using namespace fontgen;

namespace {

// Options shared by every subcommand: an optional config file, generic
// section.key=value overrides (highest precedence), and the output directory.
struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* sub, CommonOpts& c) {
  sub->add_option("-c,--config", c.config_path, "config file (flat key = value with [sections])");
  sub->add_option("--set", c.sets, "override a resolved key, e.g. --set schedule.epochs=5");
  sub->add_option("-o,--out", c.out, "output directory (default: $FONTGEN_OUT_ROOT/<command>)");
}

std::string resolve_out(const std::string& flag, const std::string& tag) {
  std::string out = flag;
  if (out.empty()) {
    const char* root = std::getenv("FONTGEN_OUT_ROOT");
    if (!root || !*root) throw ArgumentError("no --out given and FONTGEN_OUT_ROOT is unset");
    out = std::string(root) + "/" + tag;
  }
  fs::create_directories(out);
  return out;
}

// Precedence: defaults < config file < subcommand flags < --set overrides.
std::map<std::string, std::string> base_map(const CommonOpts& c,
                                            const std::vector<std::pair<std::string, std::string>>& flag_kv) {
  std::map<std::string, std::string> kv;
  if (!c.config_path.empty()) kv = read_config_file(c.config_path);
  for (const auto& [key, value] : flag_kv) kv[key] = value;
  for (const std::string& s : c.sets) apply_config_override(kv, s);
  return kv;
}

void echo_config(const RunConfig& cfg, TrainPhase phase, const std::string& out) {
  std::ofstream f(out + "/config.resolved.txt", std::ios::binary);
  if (!f) throw DataError("cannot write '" + out + "/config.resolved.txt'");
  f << render_run_config(cfg, phase);
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

GlyphCorpus load_or_synth(const std::string& data_dir, const RunConfig& cfg) {
  if (!data_dir.empty()) {
    GlyphCorpus corpus = import_corpus(data_dir, data_dir + "/manifest.txt");
    corpus.validate();
    return corpus;
  }
  return synthesize_corpus(cfg.data_fonts, cfg.data_chars, cfg.data_seed, cfg.model.image_size);
}

TrainState load_state(const std::string& ckpt_path, const GlyphCorpus& corpus) {
  return train_state_from_checkpoint(load_checkpoint(ckpt_path), corpus);
}

void write_train_outputs(const TrainState& state, const std::string& out) {
  save_checkpoint(out + "/state.ckpt", train_state_to_checkpoint(state));
  write_loss_csv(state.history, out + "/loss.csv");
  write_lr_csv(state.lr_log, out + "/lr.csv");
}

// ---------------------------------------------------------------------------
// Subcommand bodies

void cmd_dataset_synth(const CommonOpts& common, const std::vector<std::pair<std::string, std::string>>& flags) {
  auto kv = base_map(common, flags);
  const TrainPhase phase = config_phase(kv, TrainPhase::agis_pretrain);
  const RunConfig cfg = resolve_run_config(kv, phase);
  const std::string out = resolve_out(common.out, "dataset");
  GlyphCorpus corpus = synthesize_corpus(cfg.data_fonts, cfg.data_chars, cfg.data_seed, cfg.model.image_size);
  export_corpus(corpus, out);
  echo_config(cfg, phase, out);
  std::cout << "wrote " << corpus.num_glyphs() << " glyphs (" << corpus.train_fonts().size() << " train fonts, "
            << corpus.eval_fonts().size() << " eval fonts) to " << out << "\n";
}

void cmd_dataset_import(const CommonOpts& common, const std::string& from,
                        const std::vector<std::pair<std::string, std::string>>& flags) {
  auto kv = base_map(common, flags);
  const TrainPhase phase = config_phase(kv, TrainPhase::agis_pretrain);
  const RunConfig cfg = resolve_run_config(kv, phase);
  const std::string out = resolve_out(common.out, "dataset");
  GlyphCorpus corpus = import_corpus(from, from + "/manifest.txt");
  corpus.validate();
  export_corpus(corpus, out);
  echo_config(cfg, phase, out);
  std::cout << "imported " << corpus.num_glyphs() << " glyphs to " << out << "\n";
}

void cmd_train(TrainPhase phase, const CommonOpts& common, const std::string& data_dir, const std::string& init_ckpt,
               const std::vector<std::pair<std::string, std::string>>& flags) {
  auto kv = base_map(common, flags);
  const RunConfig cfg = resolve_run_config(kv, phase);
  const std::string out = resolve_out(common.out, phase_name(phase));
  GlyphCorpus corpus = load_or_synth(data_dir, cfg);

  TrainState state;
  if (phase == TrainPhase::agis_pretrain) {
    state = pretrain_agis(corpus, cfg.model, cfg.schedule, cfg.weights);
  } else if (phase == TrainPhase::agis_finetune) {
    if (init_ckpt.empty()) throw ArgumentError("fine-tuning needs --init <pretrained state checkpoint>");
    if (cfg.finetune_target < 0) throw ArgumentError("fine-tuning needs finetune.target_font (--target-font)");
    if (cfg.finetune_refs.empty()) throw ArgumentError("fine-tuning needs finetune.ref_chars (--refs)");
    const TrainState pretrained = load_state(init_ckpt, corpus);
    ReferenceSet refs;
    refs.font_id = cfg.finetune_target;
    refs.char_ids = cfg.finetune_refs;
    state = finetune_agis(pretrained, corpus, refs, cfg.schedule);
  } else {
    state = train_emd(corpus, cfg.model, cfg.schedule, cfg.weights, cfg.black_threshold, cfg.ink_mean_black_only);
  }
  write_train_outputs(state, out);
  echo_config(cfg, phase, out);
  std::cout << "trained " << phase_name(phase) << " for " << state.epoch << " epochs (" << state.step
            << " steps); outputs in " << out << "\n";
}

void cmd_generate(const CommonOpts& common, const std::string& ckpt_path, const std::string& data_dir, int font,
                  const std::vector<int>& ref_chars, std::vector<int> char_ids,
                  const std::vector<std::pair<std::string, std::string>>& flags) {
  auto kv = base_map(common, flags);
  const TrainPhase phase = config_phase(kv, TrainPhase::agis_pretrain);
  const RunConfig cfg = resolve_run_config(kv, phase);
  const std::string out = resolve_out(common.out, "generate");
  if (data_dir.empty()) throw ArgumentError("generation needs --data <corpus dir>");
  GlyphCorpus corpus = import_corpus(data_dir, data_dir + "/manifest.txt");
  const TrainState state = load_state(ckpt_path, corpus);

  ReferenceSet refs;
  refs.font_id = font;
  refs.char_ids = ref_chars;
  if (char_ids.empty()) char_ids = corpus.all_chars();
  const std::vector<GlyphImage> images = generate(state, corpus, char_ids, refs);

  // The output directory is itself a loadable corpus: PNGs plus a manifest,
  // with the content references copied over so downstream commands need
  // nothing else.
  CorpusBuilder b;
  b.image_size(corpus.image_size()).content_font(corpus.content_font_id());
  b.splits({font}, {}, char_ids, {});
  for (const GlyphImage& g : images) b.add_glyph(g);
  for (int c : char_ids) b.add_content_glyph(corpus.content_reference(c));
  export_corpus(b.finish(), out);

  std::vector<GlyphImage> truth;
  for (int c : char_ids)
    if (corpus.has_glyph(font, c)) truth.push_back(corpus.glyph(font, c));
  emit_comparison_grid(images, truth, {refs}, out + "/grid.png");
  echo_config(cfg, phase, out);
  std::cout << "generated " << images.size() << " glyphs for font " << font << " in " << out << "\n";
}

void cmd_eval_images(const CommonOpts& common, const std::string& generated_dir, const std::string& truth_dir,
                     const std::vector<std::pair<std::string, std::string>>& flags) {
  auto kv = base_map(common, flags);
  const TrainPhase phase = config_phase(kv, TrainPhase::agis_pretrain);
  const RunConfig cfg = resolve_run_config(kv, phase);
  const std::string out = resolve_out(common.out, "eval_images");
  GlyphCorpus gen = import_corpus(generated_dir, generated_dir + "/manifest.txt");
  GlyphCorpus truth = import_corpus(truth_dir, truth_dir + "/manifest.txt");
  if (gen.image_size() != truth.image_size())
    throw ArgumentError("generated and ground-truth corpora have different image sizes");

  auto styled = [](const GlyphCorpus& c) {
    std::vector<int> fonts = c.train_fonts();
    fonts.insert(fonts.end(), c.eval_fonts().begin(), c.eval_fonts().end());
    std::sort(fonts.begin(), fonts.end());
    return fonts;
  };
  const std::vector<int> truth_fonts = styled(truth);
  std::map<int, FontEvalSet> sets;
  for (int font : styled(gen)) {
    if (!std::binary_search(truth_fonts.begin(), truth_fonts.end(), font)) continue;
    FontEvalSet set;
    for (int c : gen.all_chars())
      if (gen.has_glyph(font, c) && truth.has_glyph(font, c)) {
        set.generated.push_back(gen.glyph(font, c));
        set.truth.push_back(truth.glyph(font, c));
      }
    if (!set.generated.empty()) sets[font] = std::move(set);
  }
  if (sets.empty()) throw ArgumentError("no (font, char) pairs are present in both corpora");

  const PerceptualExtractor extractor = make_perceptual_extractor(gen.image_size(), 1234);
  const MetricReport report = evaluate_font_set(sets, extractor, cfg.model.n, cfg.method_tag, cfg.run_seed);
  write_metric_report_json(report, out + "/report.json");
  write_metric_report_csv(report, out + "/report.csv");
  echo_config(cfg, phase, out);
  std::cout << "evaluated " << report.per_font.size() << " fonts; aggregate l1 " << format_real(report.aggregate.l1)
            << ", ssim " << format_real(report.aggregate.ssim) << "\n";
}

void cmd_eval_embeddings(const CommonOpts& common, const std::string& ckpt_path, const std::string& data_dir,
                         std::vector<int> fonts, const std::vector<std::pair<std::string, std::string>>& flags) {
  auto kv = base_map(common, flags);
  const TrainPhase phase = config_phase(kv, TrainPhase::agis_pretrain);
  const RunConfig cfg = resolve_run_config(kv, phase);
  const std::string out = resolve_out(common.out, "eval_embeddings");
  if (data_dir.empty()) throw ArgumentError("embedding evaluation needs --data <corpus dir>");
  GlyphCorpus corpus = import_corpus(data_dir, data_dir + "/manifest.txt");
  const TrainState state = load_state(ckpt_path, corpus);

  if (fonts.empty()) fonts = corpus.eval_fonts();
  if (fonts.empty()) throw ArgumentError("no fonts to evaluate (corpus has no eval split; pass --fonts)");
  const int available = static_cast<int>(corpus.all_chars().size());
  const int per_font = std::min(cfg.glyphs_per_font, available);

  const LabeledEmbeddings emb = extract_style_embeddings(state.bundle, corpus, fonts, per_font);
  const real recall = recall_at_k(emb, cfg.recall_k);
  const int k = cfg.cluster_k > 0 ? cfg.cluster_k : static_cast<int>(fonts.size());
  Rng rng(cfg.run_seed);
  const real best = best_nmi_over_restarts(emb, k, cfg.restarts, rng);

  write_embeddings(emb, out + "/embeddings.txt");
  nlohmann::json j{{"fonts", fonts},
                   {"glyphs_per_font", per_font},
                   {"points", emb.n()},
                   {"recall_k", cfg.recall_k},
                   {"recall", recall},
                   {"cluster_k", k},
                   {"restarts", cfg.restarts},
                   {"nmi_best", best},
                   {"seed", cfg.run_seed},
                   {"method", cfg.method_tag}};
  std::ofstream f(out + "/embedding_report.json", std::ios::binary);
  if (!f) throw DataError("cannot write '" + out + "/embedding_report.json'");
  f << j.dump(2) << "\n";
  echo_config(cfg, phase, out);
  std::cout << "recall@" << cfg.recall_k << " " << format_real(recall) << ", best NMI " << format_real(best)
            << " over " << cfg.restarts << " restarts\n";
}

void cmd_project(const CommonOpts& common, const std::string& embeddings_path,
                 const std::vector<std::pair<std::string, std::string>>& flags) {
  auto kv = base_map(common, flags);
  const TrainPhase phase = config_phase(kv, TrainPhase::agis_pretrain);
  const RunConfig cfg = resolve_run_config(kv, phase);
  const std::string out = resolve_out(common.out, "project");
  const LabeledEmbeddings emb = read_embeddings(embeddings_path);

  Tensor coords;
  if (cfg.projection == Projection::pca) {
    coords = project_pca(emb.vectors);
  } else {
    Rng rng(cfg.run_seed);
    const TsneResult res = project_tsne(emb.vectors, cfg.tsne, rng);
    coords = res.coords;
    std::ofstream kl(out + "/kl.csv", std::ios::binary);
    if (!kl) throw DataError("cannot write '" + out + "/kl.csv'");
    kl << "step,kl\n";
    for (std::size_t i = 0; i < res.kl_history.size(); ++i)
      kl << (i + 1) << "," << format_real(res.kl_history[i]) << "\n";
  }
  write_projection_csv(emb, coords, out + "/projection.csv");
  echo_config(cfg, phase, out);
  std::cout << "projected " << emb.n() << " points with "
            << (cfg.projection == Projection::pca ? "pca" : "tsne") << " into " << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"few-shot font generation toolkit"};
  app.require_subcommand(1);

  // dataset --------------------------------------------------------------
  CLI::App* dataset = app.add_subcommand("dataset", "create or normalize glyph corpora");
  dataset->require_subcommand(1);

  CommonOpts synth_common;
  int synth_fonts = -1, synth_chars = -1, synth_image = -1;
  std::uint64_t synth_seed = 0;
  CLI::App* synth = dataset->add_subcommand("synth", "render a synthetic corpus");
  add_common(synth, synth_common);
  CLI::Option* synth_fonts_opt = synth->add_option("--fonts", synth_fonts, "number of fonts");
  CLI::Option* synth_chars_opt = synth->add_option("--chars", synth_chars, "number of characters");
  CLI::Option* synth_seed_opt = synth->add_option("--seed", synth_seed, "style/synthesis seed");
  CLI::Option* synth_image_opt = synth->add_option("--image-size", synth_image, "glyph raster size");
  synth->callback([&] {
    std::vector<std::pair<std::string, std::string>> flags;
    if (*synth_fonts_opt) flags.emplace_back("data.fonts", std::to_string(synth_fonts));
    if (*synth_chars_opt) flags.emplace_back("data.chars", std::to_string(synth_chars));
    if (*synth_seed_opt) flags.emplace_back("data.seed", std::to_string(synth_seed));
    if (*synth_image_opt) flags.emplace_back("model.image_size", std::to_string(synth_image));
    cmd_dataset_synth(synth_common, flags);
  });

  CommonOpts import_common;
  std::string import_from;
  CLI::App* import_cmd = dataset->add_subcommand("import", "load, validate, and re-emit a corpus");
  add_common(import_cmd, import_common);
  import_cmd->add_option("--from", import_from, "source corpus directory (with manifest.txt)")->required();
  import_cmd->callback([&] { cmd_dataset_import(import_common, import_from, {}); });

  // train ------------------------------------------------------------------
  CLI::App* train_cmd = app.add_subcommand("train", "run a training schedule");
  train_cmd->require_subcommand(1);

  struct TrainOpts {
    CommonOpts common;
    std::string data, init;
    int target_font = -1;
    std::vector<int> refs;
    int epochs = -1;
    std::uint64_t seed = 0;
    CLI::Option *epochs_opt = nullptr, *seed_opt = nullptr, *target_opt = nullptr, *refs_opt = nullptr;
  };
  auto add_train = [&](const char* name, const char* help, TrainOpts& t, bool finetune) {
    CLI::App* sub = train_cmd->add_subcommand(name, help);
    add_common(sub, t.common);
    sub->add_option("--data", t.data, "corpus directory (default: synthesize from [data])");
    t.epochs_opt = sub->add_option("--epochs", t.epochs, "override schedule.epochs");
    t.seed_opt = sub->add_option("--seed", t.seed, "override schedule.seed");
    if (finetune) {
      sub->add_option("--init", t.init, "pretrained state checkpoint")->required();
      t.target_opt = sub->add_option("--target-font", t.target_font, "held-out font to adapt to");
      t.refs_opt = sub->add_option("--refs", t.refs, "reference char ids")->delimiter(',');
    }
    return sub;
  };
  auto train_flags = [](const TrainOpts& t) {
    std::vector<std::pair<std::string, std::string>> flags;
    if (t.epochs_opt && *t.epochs_opt) flags.emplace_back("schedule.epochs", std::to_string(t.epochs));
    if (t.seed_opt && *t.seed_opt) flags.emplace_back("schedule.seed", std::to_string(t.seed));
    if (t.target_opt && *t.target_opt) flags.emplace_back("finetune.target_font", std::to_string(t.target_font));
    if (t.refs_opt && *t.refs_opt) flags.emplace_back("finetune.ref_chars", join_ints(t.refs));
    return flags;
  };

  TrainOpts pre_opts, fine_opts, emd_opts;
  CLI::App* pre = add_train("agis-pretrain", "adversarial pretraining on the training fonts", pre_opts, false);
  pre->callback([&] { cmd_train(TrainPhase::agis_pretrain, pre_opts.common, pre_opts.data, "", train_flags(pre_opts)); });
  CLI::App* fine = add_train("agis-finetune", "few-shot adaptation to one held-out font", fine_opts, true);
  fine->callback(
      [&] { cmd_train(TrainPhase::agis_finetune, fine_opts.common, fine_opts.data, fine_opts.init, train_flags(fine_opts)); });
  CLI::App* emd = add_train("emd", "supervised style-transfer training", emd_opts, false);
  emd->callback([&] { cmd_train(TrainPhase::emd_train, emd_opts.common, emd_opts.data, "", train_flags(emd_opts)); });

  // generate ---------------------------------------------------------------
  CommonOpts gen_common;
  std::string gen_ckpt, gen_data;
  int gen_font = -1;
  std::vector<int> gen_refs, gen_chars;
  CLI::App* gen = app.add_subcommand("generate", "render glyphs for a target font from its references");
  add_common(gen, gen_common);
  gen->add_option("--ckpt", gen_ckpt, "trained state checkpoint")->required();
  gen->add_option("--data", gen_data, "corpus directory")->required();
  gen->add_option("--font", gen_font, "target font id")->required();
  gen->add_option("--refs", gen_refs, "style reference char ids")->required()->delimiter(',');
  gen->add_option("--chars", gen_chars, "char ids to generate (default: all)")->delimiter(',');
  gen->callback([&] { cmd_generate(gen_common, gen_ckpt, gen_data, gen_font, gen_refs, gen_chars, {}); });

  // eval -------------------------------------------------------------------
  CLI::App* eval_cmd = app.add_subcommand("eval", "measure generated images or style embeddings");
  eval_cmd->require_subcommand(1);

  CommonOpts ei_common;
  std::string ei_generated, ei_truth;
  CLI::App* ei = eval_cmd->add_subcommand("images", "pixel and distribution metrics per font");
  add_common(ei, ei_common);
  ei->add_option("--generated", ei_generated, "generated corpus directory")->required();
  ei->add_option("--truth", ei_truth, "ground-truth corpus directory")->required();
  ei->callback([&] { cmd_eval_images(ei_common, ei_generated, ei_truth, {}); });

  CommonOpts ee_common;
  std::string ee_ckpt, ee_data;
  std::vector<int> ee_fonts;
  CLI::App* ee = eval_cmd->add_subcommand("embeddings", "style-space retrieval and clustering quality");
  add_common(ee, ee_common);
  ee->add_option("--ckpt", ee_ckpt, "trained state checkpoint")->required();
  ee->add_option("--data", ee_data, "corpus directory")->required();
  ee->add_option("--fonts", ee_fonts, "font ids to embed (default: eval split)")->delimiter(',');
  ee->callback([&] { cmd_eval_embeddings(ee_common, ee_ckpt, ee_data, ee_fonts, {}); });

  // project ----------------------------------------------------------------
  CommonOpts proj_common;
  std::string proj_emb;
  CLI::App* proj = app.add_subcommand("project", "2-D projection of an embedding dump");
  add_common(proj, proj_common);
  proj->add_option("--embeddings", proj_emb, "embedding dump file")->required();
  proj->callback([&] { cmd_project(proj_common, proj_emb, {}); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
