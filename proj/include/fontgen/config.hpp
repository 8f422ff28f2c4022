#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fontgen/common.hpp"
#include "fontgen/embedding_analysis.hpp"
#include "fontgen/losses.hpp"
#include "fontgen/model.hpp"
#include "fontgen/training.hpp"

namespace fontgen {

// Flat `key = value` text grouped by [section] headers; keys are addressed as
// "section.key" throughout. Later assignments win, which is what lets a file
// layer over defaults and command-line overrides layer over the file.

namespace detail_config {

inline std::string trim_ws(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail_config

inline void apply_config_line(std::map<std::string, std::string>& kv, std::string& section, const std::string& raw) {
  const std::string line = detail_config::trim_ws(raw);
  if (line.empty() || line[0] == '#') return;
  if (line.front() == '[' && line.back() == ']') {
    section = detail_config::trim_ws(line.substr(1, line.size() - 2));
    if (section.empty()) throw ArgumentError("config section header is empty");
    return;
  }
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ArgumentError("config line is not 'key = value': " + line);
  const std::string key = detail_config::trim_ws(line.substr(0, eq));
  if (key.empty()) throw ArgumentError("config line has an empty key: " + line);
  if (section.empty()) throw ArgumentError("config key '" + key + "' appears before any [section]");
  kv[section + "." + key] = detail_config::trim_ws(line.substr(eq + 1));
}

inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::string section;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) apply_config_line(kv, section, line);
  return kv;
}

inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

// An override is "section.key=value" as passed on the command line.
inline void apply_config_override(std::map<std::string, std::string>& kv, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw ArgumentError("override must be section.key=value, got '" + spec + "'");
  const std::string key = detail_config::trim_ws(spec.substr(0, eq));
  if (key.find('.') == std::string::npos)
    throw ArgumentError("override key must be section-qualified, got '" + key + "'");
  kv[key] = detail_config::trim_ws(spec.substr(eq + 1));
}

// Typed view over the key/value map that remembers what was consumed, so any
// key the resolver never asked about is reported as unknown.
class ConfigReader {
 public:
  explicit ConfigReader(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string str(const std::string& key, const std::string& fallback) {
    consumed_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  real num(const std::string& key, real fallback) {
    consumed_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return parse_real(it->second);
    } catch (const std::exception&) {
      throw ArgumentError("config key '" + key + "' needs a number, got '" + it->second + "'");
    }
  }

  int integer(const std::string& key, int fallback) {
    const real v = num(key, static_cast<real>(fallback));
    const int i = static_cast<int>(v);
    if (static_cast<real>(i) != v) throw ArgumentError("config key '" + key + "' needs an integer");
    return i;
  }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) {
    consumed_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      std::size_t used = 0;
      const std::uint64_t v = std::stoull(it->second, &used);
      if (used != it->second.size()) throw ArgumentError("");
      return v;
    } catch (const std::exception&) {
      throw ArgumentError("config key '" + key + "' needs an unsigned integer, got '" + it->second + "'");
    }
  }

  bool flag(const std::string& key, bool fallback) {
    consumed_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ArgumentError("config key '" + key + "' needs true/false, got '" + it->second + "'");
  }

  std::vector<int> int_list(const std::string& key, const std::vector<int>& fallback) {
    consumed_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<int> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail_config::trim_ws(item);
      if (item.empty()) continue;
      try {
        std::size_t used = 0;
        out.push_back(std::stoi(item, &used));
        if (used != item.size()) throw ArgumentError("");
      } catch (const std::exception&) {
        throw ArgumentError("config key '" + key + "' has a non-integer entry '" + item + "'");
      }
    }
    return out;
  }

  void finish() const {
    std::string unknown;
    for (const auto& [key, value] : kv_)
      if (!consumed_.count(key)) unknown += unknown.empty() ? key : ", " + key;
    if (!unknown.empty()) throw ArgumentError("unknown config keys: " + unknown);
  }

 private:
  std::map<std::string, std::string> kv_;
  std::set<std::string> consumed_;
};

// Everything a run can be parameterized by. Schedule style channels (m/n)
// inherit from the model section unless set explicitly.
struct RunConfig {
  ModelConfig model;
  TrainSchedule schedule;
  LossWeights weights;
  real black_threshold = 0.5;       // EMD pixel weighting
  bool ink_mean_black_only = false;

  int data_fonts = 8;
  int data_chars = 16;
  std::uint64_t data_seed = 1;

  int finetune_target = -1;
  std::vector<int> finetune_refs;

  int recall_k = 1;
  int restarts = 100;
  int cluster_k = 0;  // 0: one cluster per evaluated font
  int glyphs_per_font = 30;

  Projection projection = Projection::tsne;
  TsneParams tsne;

  std::uint64_t run_seed = 0;
  std::string method_tag;
};

inline LrDecay lr_decay_from_name(const std::string& s) {
  if (s == "none") return LrDecay::none;
  if (s == "linear_after_half") return LrDecay::linear_after_half;
  throw ArgumentError("unknown lr_decay '" + s + "' (expected none or linear_after_half)");
}

inline std::string lr_decay_name(LrDecay d) { return d == LrDecay::none ? "none" : "linear_after_half"; }

// Phase declared in the map itself (for commands whose phase is not implied
// by a subcommand); training subcommands pass their own phase instead.
inline TrainPhase config_phase(const std::map<std::string, std::string>& kv, TrainPhase fallback) {
  auto it = kv.find("schedule.phase");
  return it == kv.end() ? fallback : phase_from_name(it->second);
}

inline RunConfig resolve_run_config(const std::map<std::string, std::string>& kv, TrainPhase phase) {
  ConfigReader r(kv);
  RunConfig c;
  c.schedule = schedule_for(phase);

  c.model.image_size = r.integer("model.image_size", c.model.image_size);
  c.model.embed_dim = r.integer("model.embed_dim", c.model.embed_dim);
  c.model.emd_R = r.integer("model.emd_r", c.model.emd_R);
  c.model.emd_B = r.integer("model.emd_b", c.model.emd_B);
  c.model.emd_K = r.integer("model.emd_k", c.model.emd_K);
  c.model.m = r.integer("model.m", c.model.m);
  c.model.n = r.integer("model.n", c.model.n);
  c.model.base_channels = r.integer("model.base_channels", c.model.base_channels);
  c.model.patch_size = r.integer("model.patch_size", c.model.patch_size);
  c.model.patches_per_image = r.integer("model.patches_per_image", c.model.patches_per_image);
  c.model.dml_tau = r.num("model.dml_tau", phase == TrainPhase::emd_train ? 0.1 : c.model.dml_tau);

  const std::string phase_key = r.str("schedule.phase", phase_name(phase));
  if (phase_key != phase_name(phase))
    throw ArgumentError("schedule.phase '" + phase_key + "' does not match the subcommand ('" +
                        phase_name(phase) + "')");
  c.schedule.epochs = r.integer("schedule.epochs", c.schedule.epochs);
  c.schedule.base_lr = r.num("schedule.base_lr", c.schedule.base_lr);
  c.schedule.decay = lr_decay_from_name(r.str("schedule.lr_decay", lr_decay_name(c.schedule.decay)));
  c.schedule.batch_size = r.integer("schedule.batch_size", c.schedule.batch_size);
  c.schedule.seed = r.u64("schedule.seed", c.schedule.seed);
  c.schedule.m = r.integer("schedule.m", c.model.m);
  c.schedule.n = r.integer("schedule.n", c.model.n);

  c.weights.lambda_l1 = r.num("loss.lambda_l1", c.weights.lambda_l1);
  c.weights.lambda_adv = r.num("loss.lambda_adv", c.weights.lambda_adv);
  c.weights.lambda_cx = r.num("loss.lambda_cx", c.weights.lambda_cx);
  c.weights.lambda_local = r.num("loss.lambda_local", c.weights.lambda_local);
  c.weights.lambda_dml = r.num("loss.lambda_dml", c.weights.lambda_dml);
  c.black_threshold = r.num("loss.black_threshold", c.black_threshold);
  c.ink_mean_black_only = r.flag("loss.ink_mean_black_only", c.ink_mean_black_only);

  c.data_fonts = r.integer("data.fonts", c.data_fonts);
  c.data_chars = r.integer("data.chars", c.data_chars);
  c.data_seed = r.u64("data.seed", c.data_seed);

  c.finetune_target = r.integer("finetune.target_font", c.finetune_target);
  c.finetune_refs = r.int_list("finetune.ref_chars", c.finetune_refs);

  c.recall_k = r.integer("analysis.recall_k", c.recall_k);
  c.restarts = r.integer("analysis.restarts", c.restarts);
  c.cluster_k = r.integer("analysis.cluster_k", c.cluster_k);
  c.glyphs_per_font = r.integer("analysis.glyphs_per_font", c.glyphs_per_font);

  c.projection = projection_from_name(r.str("project.method", c.projection == Projection::pca ? "pca" : "tsne"));
  c.tsne.perplexity = r.num("project.perplexity", c.tsne.perplexity);
  c.tsne.steps = r.integer("project.steps", c.tsne.steps);
  c.tsne.exaggeration_steps = r.integer("project.exaggeration_steps", c.tsne.exaggeration_steps);
  c.tsne.exaggeration = r.num("project.exaggeration", c.tsne.exaggeration);
  c.tsne.step_size = r.num("project.step_size", c.tsne.step_size);
  c.tsne.momentum_early = r.num("project.momentum_early", c.tsne.momentum_early);
  c.tsne.momentum_late = r.num("project.momentum_late", c.tsne.momentum_late);
  c.tsne.momentum_switch = r.integer("project.momentum_switch", c.tsne.momentum_switch);

  c.run_seed = r.u64("run.seed", c.run_seed);
  c.method_tag = r.str("run.method", c.method_tag);

  r.finish();
  c.model.validate();
  c.schedule.validate();
  c.weights.validate();
  return c;
}

// Canonical echo: parsing the rendered text yields the same resolved config.
inline std::string render_run_config(const RunConfig& c, TrainPhase phase) {
  std::ostringstream out;
  out << "[model]\n";
  out << "image_size = " << c.model.image_size << "\n";
  out << "embed_dim = " << c.model.embed_dim << "\n";
  out << "emd_r = " << c.model.emd_R << "\n";
  out << "emd_b = " << c.model.emd_B << "\n";
  out << "emd_k = " << c.model.emd_K << "\n";
  out << "m = " << c.model.m << "\n";
  out << "n = " << c.model.n << "\n";
  out << "base_channels = " << c.model.base_channels << "\n";
  out << "patch_size = " << c.model.patch_size << "\n";
  out << "patches_per_image = " << c.model.patches_per_image << "\n";
  out << "dml_tau = " << format_real(c.model.dml_tau) << "\n";
  out << "\n[schedule]\n";
  out << "phase = " << phase_name(phase) << "\n";
  out << "epochs = " << c.schedule.epochs << "\n";
  out << "base_lr = " << format_real(c.schedule.base_lr) << "\n";
  out << "lr_decay = " << lr_decay_name(c.schedule.decay) << "\n";
  out << "batch_size = " << c.schedule.batch_size << "\n";
  out << "seed = " << c.schedule.seed << "\n";
  out << "m = " << c.schedule.m << "\n";
  out << "n = " << c.schedule.n << "\n";
  out << "\n[loss]\n";
  out << "lambda_l1 = " << format_real(c.weights.lambda_l1) << "\n";
  out << "lambda_adv = " << format_real(c.weights.lambda_adv) << "\n";
  out << "lambda_cx = " << format_real(c.weights.lambda_cx) << "\n";
  out << "lambda_local = " << format_real(c.weights.lambda_local) << "\n";
  out << "lambda_dml = " << format_real(c.weights.lambda_dml) << "\n";
  out << "black_threshold = " << format_real(c.black_threshold) << "\n";
  out << "ink_mean_black_only = " << (c.ink_mean_black_only ? "true" : "false") << "\n";
  out << "\n[data]\n";
  out << "fonts = " << c.data_fonts << "\n";
  out << "chars = " << c.data_chars << "\n";
  out << "seed = " << c.data_seed << "\n";
  out << "\n[finetune]\n";
  out << "target_font = " << c.finetune_target << "\n";
  out << "ref_chars = ";
  for (std::size_t i = 0; i < c.finetune_refs.size(); ++i) out << (i ? "," : "") << c.finetune_refs[i];
  out << "\n";
  out << "\n[analysis]\n";
  out << "recall_k = " << c.recall_k << "\n";
  out << "restarts = " << c.restarts << "\n";
  out << "cluster_k = " << c.cluster_k << "\n";
  out << "glyphs_per_font = " << c.glyphs_per_font << "\n";
  out << "\n[project]\n";
  out << "method = " << (c.projection == Projection::pca ? "pca" : "tsne") << "\n";
  out << "perplexity = " << format_real(c.tsne.perplexity) << "\n";
  out << "steps = " << c.tsne.steps << "\n";
  out << "exaggeration_steps = " << c.tsne.exaggeration_steps << "\n";
  out << "exaggeration = " << format_real(c.tsne.exaggeration) << "\n";
  out << "step_size = " << format_real(c.tsne.step_size) << "\n";
  out << "momentum_early = " << format_real(c.tsne.momentum_early) << "\n";
  out << "momentum_late = " << format_real(c.tsne.momentum_late) << "\n";
  out << "momentum_switch = " << c.tsne.momentum_switch << "\n";
  out << "\n[run]\n";
  out << "seed = " << c.run_seed << "\n";
  out << "method = " << c.method_tag << "\n";
  return out.str();
}

}  // namespace fontgen
