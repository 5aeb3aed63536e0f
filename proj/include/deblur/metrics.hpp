#pragma once

// Full-reference image quality metrics and hard-example mining.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "deblur/config.hpp"
#include "deblur/error.hpp"
#include "deblur/image.hpp"
#include "deblur/parallel.hpp"

namespace deblur {

// BT.601 full-range luma of a clamped RGB image, H x W.
inline std::vector<double> rgb_to_y(const Image& img) {
  std::vector<double> y(img.plane());
  const std::size_t p = img.plane();
  for (std::size_t i = 0; i < p; ++i) {
    const double r = std::clamp<double>(img.data[i], 0.0, 1.0);
    const double g = std::clamp<double>(img.data[p + i], 0.0, 1.0);
    const double b = std::clamp<double>(img.data[2 * p + i], 0.0, 1.0);
    y[i] = 0.299 * r + 0.587 * g + 0.114 * b;
  }
  return y;
}

namespace detail {

inline void require_same_size(const Image& a, const Image& b, const char* what) {
  if (!a.same_size(b)) {
    throw ShapeError(std::string(what) + ": image sizes differ (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}

}  // namespace detail

// PSNR in dB on the Y channel. Identical images give +infinity.
inline double psnr(const Image& ref, const Image& test, double max_val = 1.0) {
  detail::require_same_size(ref, test, "psnr");
  const auto a = rgb_to_y(ref), b = rgb_to_y(test);
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

inline std::array<double, kSsimWindow> ssim_gaussian() {
  std::array<double, kSsimWindow> w{};
  double total = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(kSsimWindow / 2);
    w[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Mean SSIM over every fully contained 11x11 window of two luma planes.
inline double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, std::size_t height,
                         std::size_t width, double max_val = 1.0) {
  if (height < kSsimWindow || width < kSsimWindow) {
    throw ShapeError("ssim: image " + std::to_string(height) + "x" + std::to_string(width) + " is smaller than the " +
                     std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
  }
  const auto w = ssim_gaussian();
  const std::size_t oh = height - kSsimWindow + 1, ow = width - kSsimWindow + 1;
  // Five moment planes filtered horizontally, then vertically.
  std::array<std::vector<double>, 5> hfilt;
  for (auto& h : hfilt) h.assign(height * ow, 0.0);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double m[5] = {};
      for (std::size_t k = 0; k < kSsimWindow; ++k) {
        const double u = a[y * width + x + k], v = b[y * width + x + k];
        m[0] += w[k] * u;
        m[1] += w[k] * v;
        m[2] += w[k] * u * u;
        m[3] += w[k] * v * v;
        m[4] += w[k] * u * v;
      }
      for (int i = 0; i < 5; ++i) hfilt[i][y * ow + x] = m[i];
    }
  const double c1 = (kSsimK1 * max_val) * (kSsimK1 * max_val);
  const double c2 = (kSsimK2 * max_val) * (kSsimK2 * max_val);
  double total = 0.0;
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double m[5] = {};
      for (std::size_t k = 0; k < kSsimWindow; ++k)
        for (int i = 0; i < 5; ++i) m[i] += w[k] * hfilt[i][(y + k) * ow + x];
      const double mu_a = m[0], mu_b = m[1];
      const double var_a = m[2] - mu_a * mu_a, var_b = m[3] - mu_b * mu_b, cov = m[4] - mu_a * mu_b;
      total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
  return total / static_cast<double>(oh * ow);
}

inline double ssim(const Image& ref, const Image& test) {
  detail::require_same_size(ref, test, "ssim");
  return ssim_plane(rgb_to_y(ref), rgb_to_y(test), ref.height, ref.width);
}

inline double mae(const Image& ref, const Image& test) {
  detail::require_same_size(ref, test, "mae");
  double total = 0.0;
  for (std::size_t i = 0; i < ref.data.size(); ++i) total += std::abs(static_cast<double>(ref.data[i]) - test.data[i]);
  return total / static_cast<double>(ref.data.size());
}

struct LabColor {
  double l = 0.0, a = 0.0, b = 0.0;
};

inline double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

// sRGB in [0,1] -> linear -> XYZ (D65) -> CIE Lab.
inline LabColor srgb_to_lab(double r, double g, double b) {
  r = srgb_to_linear(std::clamp(r, 0.0, 1.0));
  g = srgb_to_linear(std::clamp(g, 0.0, 1.0));
  b = srgb_to_linear(std::clamp(b, 0.0, 1.0));
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  constexpr double xn = 0.95047, yn = 1.0, zn = 1.08883;
  constexpr double delta = 6.0 / 29.0;
  auto f = [](double t) { return t > delta * delta * delta ? std::cbrt(t) : t / (3 * delta * delta) + 4.0 / 29.0; };
  const double fx = f(x / xn), fy = f(y / yn), fz = f(z / zn);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

// CIEDE2000 with kL = kC = kH = 1.
inline double delta_e2000(const LabColor& c1, const LabColor& c2) {
  constexpr double pi = std::numbers::pi;
  constexpr double deg = 180.0 / pi;
  constexpr double pow25_7 = 6103515625.0;  // 25^7
  const double cab = (std::hypot(c1.a, c1.b) + std::hypot(c2.a, c2.b)) / 2.0;
  const double cab7 = std::pow(cab, 7);
  const double g = 0.5 * (1.0 - std::sqrt(cab7 / (cab7 + pow25_7)));
  const double a1 = (1.0 + g) * c1.a, a2 = (1.0 + g) * c2.a;
  const double cp1 = std::hypot(a1, c1.b), cp2 = std::hypot(a2, c2.b);
  auto hue = [&](double b, double a) {
    if (a == 0.0 && b == 0.0) return 0.0;
    double h = std::atan2(b, a) * deg;
    return h < 0.0 ? h + 360.0 : h;
  };
  const double hp1 = hue(c1.b, a1), hp2 = hue(c2.b, a2);

  const double dl = c2.l - c1.l;
  const double dc = cp2 - cp1;
  double dh = 0.0;
  if (cp1 * cp2 != 0.0) {
    dh = hp2 - hp1;
    if (dh > 180.0) dh -= 360.0;
    else if (dh < -180.0) dh += 360.0;
  }
  const double dH = 2.0 * std::sqrt(cp1 * cp2) * std::sin(dh / 2.0 / deg);

  const double lbar = (c1.l + c2.l) / 2.0;
  const double cbar = (cp1 + cp2) / 2.0;
  double hbar = hp1 + hp2;
  if (cp1 * cp2 != 0.0) {
    if (std::abs(hp1 - hp2) <= 180.0) hbar /= 2.0;
    else if (hbar < 360.0) hbar = (hbar + 360.0) / 2.0;
    else hbar = (hbar - 360.0) / 2.0;
  }
  const double t = 1.0 - 0.17 * std::cos((hbar - 30.0) / deg) + 0.24 * std::cos(2.0 * hbar / deg) +
                   0.32 * std::cos((3.0 * hbar + 6.0) / deg) - 0.20 * std::cos((4.0 * hbar - 63.0) / deg);
  const double dtheta = 30.0 * std::exp(-((hbar - 275.0) / 25.0) * ((hbar - 275.0) / 25.0));
  const double cbar7 = std::pow(cbar, 7);
  const double rc = 2.0 * std::sqrt(cbar7 / (cbar7 + pow25_7));
  const double l50 = (lbar - 50.0) * (lbar - 50.0);
  const double sl = 1.0 + 0.015 * l50 / std::sqrt(20.0 + l50);
  const double sc = 1.0 + 0.045 * cbar;
  const double sh = 1.0 + 0.015 * cbar * t;
  const double rt = -std::sin(2.0 * dtheta / deg) * rc;
  const double tl = dl / sl, tc = dc / sc, th = dH / sh;
  return std::sqrt(tl * tl + tc * tc + th * th + rt * tc * th);
}

// Mean per-pixel CIEDE2000 between two sRGB images.
inline double delta_e2000(const Image& ref, const Image& test) {
  detail::require_same_size(ref, test, "delta_e2000");
  const std::size_t p = ref.plane();
  double total = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    const LabColor a = srgb_to_lab(ref.data[i], ref.data[p + i], ref.data[2 * p + i]);
    const LabColor b = srgb_to_lab(test.data[i], test.data[p + i], test.data[2 * p + i]);
    total += delta_e2000(a, b);
  }
  return total / static_cast<double>(p);
}

enum class HardLabel { kNeither, kHardPositive, kHardNegative };

inline const char* label_name(HardLabel l) {
  switch (l) {
    case HardLabel::kHardPositive: return "hard_positive";
    case HardLabel::kHardNegative: return "hard_negative";
    default: return "neither";
  }
}

inline HardLabel parse_label(const std::string& s) {
  if (s == "hard_positive") return HardLabel::kHardPositive;
  if (s == "hard_negative") return HardLabel::kHardNegative;
  if (s == "neither") return HardLabel::kNeither;
  throw FormatError("unknown label '" + s + "'");
}

struct MiningBand {
  double lo = 20.0;
  double hi = 30.0;
  void validate() const {
    if (!(lo < hi)) throw ConfigError("mining band needs lo < hi, got lo=" + format_double(lo) + " hi=" + format_double(hi));
  }
};

inline HardLabel classify(double psnr_db, const MiningBand& band) {
  if (psnr_db < band.lo) return HardLabel::kHardNegative;
  if (psnr_db > band.hi) return HardLabel::kHardPositive;
  return HardLabel::kNeither;
}

struct ImageMetrics {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
  double mae = 0.0;
  double delta_e = 0.0;
  HardLabel label = HardLabel::kNeither;
};

struct MetricReport {
  std::vector<ImageMetrics> records;
  // Means over records; psnr excludes infinite values, which are counted.
  double mean_psnr = std::numeric_limits<double>::infinity();
  double mean_ssim = 0.0;
  double mean_mae = 0.0;
  double mean_delta_e = 0.0;
  std::size_t psnr_infinite = 0;
  std::size_t hard_positive = 0;
  std::size_t hard_negative = 0;
  std::size_t neither = 0;

  std::size_t total() const { return records.size(); }
};

inline ImageMetrics evaluate_pair(const std::string& id, const Image& restored, const Image& truth) {
  return {id, psnr(truth, restored), ssim(truth, restored), mae(truth, restored), delta_e2000(truth, restored)};
}

// Labels every record and recomputes aggregates in record order.
inline void mine_hard(MetricReport& report, const MiningBand& band = {}) {
  band.validate();
  report.hard_positive = report.hard_negative = report.neither = 0;
  for (auto& r : report.records) {
    r.label = classify(r.psnr, band);
    if (r.label == HardLabel::kHardPositive) ++report.hard_positive;
    else if (r.label == HardLabel::kHardNegative) ++report.hard_negative;
    else ++report.neither;
  }
}

inline void aggregate(MetricReport& report) {
  double ps = 0, ss = 0, ma = 0, de = 0;
  std::size_t finite = 0;
  report.psnr_infinite = 0;
  for (const auto& r : report.records) {
    if (std::isinf(r.psnr)) {
      ++report.psnr_infinite;
    } else {
      ps += r.psnr;
      ++finite;
    }
    ss += r.ssim;
    ma += r.mae;
    de += r.delta_e;
  }
  const double n = static_cast<double>(report.records.size());
  // With no finite PSNR every image matched its reference exactly.
  report.mean_psnr = finite ? ps / static_cast<double>(finite) : std::numeric_limits<double>::infinity();
  report.mean_ssim = n > 0 ? ss / n : 0.0;
  report.mean_mae = n > 0 ? ma / n : 0.0;
  report.mean_delta_e = n > 0 ? de / n : 0.0;
}

inline MetricReport make_report(std::vector<ImageMetrics> records, const MiningBand& band = {}) {
  MetricReport report;
  report.records = std::move(records);
  mine_hard(report, band);
  aggregate(report);
  return report;
}

// Evaluates (restored, truth) pairs concurrently; record order follows input order.
template <class Loader>
MetricReport evaluate(const std::vector<std::string>& ids, Loader&& load_pair, const MiningBand& band = {}) {
  std::vector<ImageMetrics> records(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) {
    const auto [restored, truth] = load_pair(i);
    records[i] = evaluate_pair(ids[i], restored, truth);
  });
  return make_report(std::move(records), band);
}

inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return format_double(v);
}

inline double parse_metric(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("not a number: '" + s + "'");
  }
}

inline constexpr const char* kReportHeader = "id,psnr,ssim,mae,deltaE00,label";

inline std::string report_csv(const MetricReport& r) {
  std::ostringstream os;
  os << kReportHeader << "\n";
  for (const auto& m : r.records) {
    os << m.id << "," << format_metric(m.psnr) << "," << format_metric(m.ssim) << "," << format_metric(m.mae) << ","
       << format_metric(m.delta_e) << "," << label_name(m.label) << "\n";
  }
  return os.str();
}

// Parses report_csv output. Labels are kept as written.
inline MetricReport parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kReportHeader) {
    throw FormatError(std::string("report header must be '") + kReportHeader + "'");
  }
  std::vector<ImageMetrics> records;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(detail::trim(line));
    std::string item;
    while (std::getline(ls, item, ',')) f.push_back(item);
    if (f.size() != 6) throw FormatError("report line " + std::to_string(lineno) + ": expected 6 fields");
    try {
      records.push_back({f[0], parse_metric(f[1]), parse_metric(f[2]), parse_metric(f[3]), parse_metric(f[4]),
                         parse_label(f[5])});
    } catch (const FormatError& e) {
      throw FormatError("report line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  MetricReport report;
  report.records = std::move(records);
  aggregate(report);
  for (const auto& m : report.records) {
    if (m.label == HardLabel::kHardPositive) ++report.hard_positive;
    else if (m.label == HardLabel::kHardNegative) ++report.hard_negative;
    else ++report.neither;
  }
  return report;
}

// One-row table with the column set of the paper's result tables. LPIPS is
// not computed and is written as NA.
inline std::string summary_csv(const MetricReport& r) {
  std::ostringstream os;
  os << "images,psnr,ssim,mae,lpips,deltaE00,psnr_inf,hard_positive,hard_negative\n";
  os << r.total() << "," << format_metric(r.mean_psnr) << "," << format_metric(r.mean_ssim) << ","
     << format_metric(r.mean_mae) << ",NA," << format_metric(r.mean_delta_e) << "," << r.psnr_infinite << ","
     << r.hard_positive << "," << r.hard_negative << "\n";
  return os.str();
}

inline std::string summary_text(const MetricReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  auto num = [&](double v, int prec) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(prec);
    if (std::isinf(v)) s << "inf";
    else s << v;
    return s.str();
  };
  os << "images   " << r.total() << "\n";
  os << "PSNR     " << num(r.mean_psnr, 3) << " dB";
  if (r.psnr_infinite) os << "  (" << r.psnr_infinite << " identical, excluded)";
  os << "\n";
  os << "SSIM     " << num(r.mean_ssim, 4) << "\n";
  os << "MAE      " << num(r.mean_mae, 4) << "\n";
  os << "LPIPS    NA\n";
  os << "DeltaE   " << num(r.mean_delta_e, 3) << "\n";
  return os.str();
}

}  // namespace deblur
