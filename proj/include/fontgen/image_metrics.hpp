#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fontgen/common.hpp"
#include "fontgen/corpus.hpp"
#include "fontgen/losses.hpp"
#include "fontgen/tensor.hpp"

namespace fontgen {

// ---------------------------------------------------------------------------
// Pixel metrics. Images are [H,W] tensors with values in [0,1].

inline Tensor glyph_tensor(const GlyphImage& g) { return Tensor({g.size, g.size}, g.pixels); }

// 10*log10(1/MSE) against a unit data range, capped at 100 dB.
inline real psnr(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("psnr: shape mismatch");
  real mse = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const real d = a[i] - b[i];
    mse += d * d;
  }
  mse /= static_cast<real>(a.numel());
  if (mse <= 0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

// Mean local structural similarity over valid 11x11 window positions,
// Gaussian weights sigma=1.5, K1=0.01, K2=0.03, unit data range.
inline real ssim(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) throw ShapeError("ssim: need [H,W] images");
  if (!a.same_shape(b)) throw ShapeError("ssim: shape mismatch");
  constexpr int kWin = 11;
  const int H = a.dim(0), W = a.dim(1);
  if (H < kWin || W < kWin) throw ArgumentError("ssim: image smaller than the 11x11 window");

  real win[kWin][kWin];
  real wsum = 0;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const real di = i - (kWin - 1) / 2.0, dj = j - (kWin - 1) / 2.0;
      win[i][j] = std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
      wsum += win[i][j];
    }
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) win[i][j] /= wsum;

  constexpr real c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  real acc = 0;
  int count = 0;
  for (int top = 0; top + kWin <= H; ++top)
    for (int left = 0; left + kWin <= W; ++left) {
      real mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
          const real w = win[i][j];
          const real x = a.at2(top + i, left + j), y = b.at2(top + i, left + j);
          mx += w * x;
          my += w * y;
          xx += w * x * x;
          yy += w * y * y;
          xy += w * x * y;
        }
      const real vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
      acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return acc / static_cast<real>(count);
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian fits of two descriptor sets [N,k].

namespace detail_metrics {

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

inline void gaussian_fit(const Tensor& f, Eigen::VectorXd& mu, Eigen::MatrixXd& sigma) {
  const int n = f.dim(0), k = f.dim(1);
  Eigen::MatrixXd x(n, k);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) x(i, j) = f.at2(i, j);
  mu = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  sigma = centered.transpose() * centered / static_cast<real>(n - 1);
  sigma += 1e-6 * Eigen::MatrixXd::Identity(k, k);
}

}  // namespace detail_metrics

inline real fid(const Tensor& features_a, const Tensor& features_b) {
  if (features_a.rank() != 2 || features_b.rank() != 2 || features_a.dim(1) != features_b.dim(1))
    throw ShapeError("fid: need [N,k] descriptor matrices with matching k");
  const int k = features_a.dim(1);
  if (features_a.dim(0) < k + 1 || features_b.dim(0) < k + 1)
    throw ArgumentError("fid: need at least k+1 = " + std::to_string(k + 1) + " samples per side");
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd sig_a, sig_b;
  detail_metrics::gaussian_fit(features_a, mu_a, sig_a);
  detail_metrics::gaussian_fit(features_b, mu_b, sig_b);
  const Eigen::MatrixXd sqrt_a = detail_metrics::psd_sqrt(sig_a);
  const Eigen::MatrixXd cross = detail_metrics::psd_sqrt(sqrt_a * sig_b * sqrt_a);
  return (mu_a - mu_b).squaredNorm() + (sig_a + sig_b - 2.0 * cross).trace();
}

// ---------------------------------------------------------------------------
// Per-font evaluation

struct FontMetrics {
  real l1 = 0;
  real psnr = 0;
  real ssim = 0;
  real fid = 0;
};

struct MetricReport {
  std::map<int, FontMetrics> per_font;
  FontMetrics aggregate;
  int n = 0;            // few-shot reference budget used to produce the images
  std::string method;   // run tag
  std::uint64_t seed = 0;
  std::string fid_features = "FID (pluggable features)";
};

struct FontEvalSet {
  std::vector<GlyphImage> generated;
  std::vector<GlyphImage> truth;  // aligned with generated by index
};

inline Tensor stack_glyphs(const std::vector<GlyphImage>& glyphs) {
  if (glyphs.empty()) throw ArgumentError("cannot stack an empty glyph list");
  const int size = glyphs[0].size;
  Tensor out({static_cast<int>(glyphs.size()), 1, size, size});
  for (std::size_t i = 0; i < glyphs.size(); ++i) {
    if (glyphs[i].size != size) throw ArgumentError("stack_glyphs: mixed image sizes");
    copy_glyph_into(out, static_cast<int>(i), 0, glyphs[i]);
  }
  return out;
}

inline MetricReport evaluate_font_set(const std::map<int, FontEvalSet>& sets, const PerceptualExtractor& extractor,
                                      int n = 0, const std::string& method = "", std::uint64_t seed = 0) {
  if (sets.empty()) throw ArgumentError("evaluate_font_set: no fonts to evaluate");
  MetricReport report;
  report.n = n;
  report.method = method;
  report.seed = seed;
  for (const auto& [font_id, set] : sets) {
    if (set.generated.empty() || set.generated.size() != set.truth.size())
      throw ArgumentError("font " + std::to_string(font_id) + ": generated/ground-truth lists must align");
    FontMetrics fm;
    for (std::size_t i = 0; i < set.generated.size(); ++i) {
      const Tensor gen = glyph_tensor(set.generated[i]);
      const Tensor ref = glyph_tensor(set.truth[i]);
      fm.l1 += l1_value(gen, ref);
      fm.psnr += psnr(gen, ref);
      fm.ssim += ssim(gen, ref);
    }
    const real count = static_cast<real>(set.generated.size());
    fm.l1 /= count;
    fm.psnr /= count;
    fm.ssim /= count;
    fm.fid = fid(extractor.descriptors(stack_glyphs(set.generated)), extractor.descriptors(stack_glyphs(set.truth)));
    report.per_font[font_id] = fm;
  }
  const real fonts = static_cast<real>(report.per_font.size());
  for (const auto& [font_id, fm] : report.per_font) {
    report.aggregate.l1 += fm.l1 / fonts;
    report.aggregate.psnr += fm.psnr / fonts;
    report.aggregate.ssim += fm.ssim / fonts;
    report.aggregate.fid += fm.fid / fonts;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json metric_report_json(const MetricReport& r) {
  auto fm_json = [](const FontMetrics& fm) {
    return nlohmann::json{{"l1", fm.l1}, {"psnr", fm.psnr}, {"ssim", fm.ssim}, {"fid", fm.fid}};
  };
  nlohmann::json per_font = nlohmann::json::object();
  for (const auto& [font_id, fm] : r.per_font) per_font[std::to_string(font_id)] = fm_json(fm);
  return nlohmann::json{
      {"metadata", {{"n", r.n}, {"method", r.method}, {"seed", r.seed}, {"fid_features", r.fid_features}}},
      {"per_font", std::move(per_font)},
      {"aggregate", fm_json(r.aggregate)}};
}

inline void write_metric_report_json(const MetricReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write metric report '" + path + "'");
  out << metric_report_json(r).dump(2) << "\n";
}

inline void write_metric_report_csv(const MetricReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write metric table '" + path + "'");
  out << "font_id,l1,psnr,ssim,fid\n";
  for (const auto& [font_id, fm] : r.per_font)
    out << font_id << "," << format_real(fm.l1) << "," << format_real(fm.psnr) << "," << format_real(fm.ssim) << ","
        << format_real(fm.fid) << "\n";
}

}  // namespace fontgen
