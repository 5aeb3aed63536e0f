#pragma once

// Closed-form parameter and size accounting for a ModelConfig, comparison
// between two configurations, and the search that fixes the reduced
// configuration.

#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "deblur/checkpoint.hpp"
#include "deblur/model.hpp"
#include "deblur/nn_blocks.hpp"

namespace deblur {

inline std::size_t block_param_count(std::size_t channels, std::size_t heads, double gamma) {
  const std::size_t c = channels, hidden = gdfn_hidden(channels, gamma);
  const std::size_t norms = 4 * c;
  const std::size_t mdta = (3 * c * c + 3 * c) + (3 * c * 9 + 3 * c) + (c * c + c) + heads;
  const std::size_t gdfn = (2 * hidden * c + 2 * hidden) + (2 * hidden * 9 + 2 * hidden) + (hidden * c + c);
  return norms + mdta + gdfn;
}

struct StageReport {
  std::string name;
  std::size_t blocks = 0;
  std::size_t channels = 0;
  std::size_t heads = 0;
  std::size_t params = 0;
};

struct ArchReport {
  std::size_t total_params = 0;
  std::size_t total_blocks = 0;
  std::vector<StageReport> stages;
  std::size_t transition_params = 0;  // embed, resampling, channel reduction, output
  std::size_t header_bytes = 0;
  std::size_t serialized_bytes = 0;  // 4 * total_params + header_bytes
};

inline ArchReport param_count(const ModelConfig& cfg) {
  cfg.validate();
  ArchReport r;
  for (const auto& s : stage_layout(cfg)) {
    StageReport st{s.name, s.blocks, s.channels, s.heads, s.blocks * block_param_count(s.channels, s.heads, cfg.gamma)};
    r.total_params += st.params;
    r.total_blocks += st.blocks;
    r.stages.push_back(st);
  }
  const std::size_t c = cfg.base_channels;
  std::size_t t = c * cfg.in_channels * 9;                           // embed
  t += 9 * (c / 2 * c + c * 2 * c + 2 * c * 4 * c);                 // downsample convs
  t += 9 * (16 * c * 8 * c + 8 * c * 4 * c + 4 * c * 2 * c);        // upsample convs
  t += (4 * c * 8 * c + 4 * c) + (2 * c * 4 * c + 2 * c);            // 1x1 reductions
  t += cfg.out_channels * 2 * c * 9;                                 // output
  r.transition_params = t;
  r.total_params += t;
  r.header_bytes = checkpoint_header_bytes(cfg);
  r.serialized_bytes = 4 * r.total_params + r.header_bytes;
  return r;
}

struct ArchComparison {
  ArchReport a, b;
  double param_ratio = 1.0;  // b / a
  double block_ratio = 1.0;
  double size_ratio = 1.0;
  double param_delta_pct() const { return (param_ratio - 1.0) * 100.0; }
  double block_delta_pct() const { return (block_ratio - 1.0) * 100.0; }
  double size_delta_pct() const { return (size_ratio - 1.0) * 100.0; }
};

inline ArchComparison compare_arch(const ModelConfig& a, const ModelConfig& b) {
  ArchComparison cmp{param_count(a), param_count(b)};
  cmp.param_ratio = static_cast<double>(cmp.b.total_params) / static_cast<double>(cmp.a.total_params);
  cmp.block_ratio = static_cast<double>(cmp.b.total_blocks) / static_cast<double>(cmp.a.total_blocks);
  cmp.size_ratio = static_cast<double>(cmp.b.serialized_bytes) / static_cast<double>(cmp.a.serialized_bytes);
  return cmp;
}

struct ReductionTarget {
  double param_ratio = 0.816;
  double block_ratio = 0.70;
  double block_tolerance = 0.03;
};

struct SearchResult {
  ModelConfig config;
  double param_ratio = 0.0;
  double block_ratio = 0.0;
  std::size_t candidates = 0;  // configs satisfying the block constraint
};

// Enumerates mirrored reductions of `base` (decoder level i uses the
// encoder level-i count, every count between 1 and the base count) with
// doubled heads. Among those within the block-ratio tolerance, returns the
// one whose parameter ratio is closest to the target; ties go to the
// lexicographically smallest (enc1, enc2, enc3, latent, refinement).
inline SearchResult search_improved(const ModelConfig& base, const ReductionTarget& target = {}) {
  const ArchReport ref = param_count(base);
  std::optional<SearchResult> best;
  double best_err = 0.0;
  std::size_t candidates = 0;
  for (std::size_t e1 = 1; e1 <= base.enc_blocks[0]; ++e1)
    for (std::size_t e2 = 1; e2 <= base.enc_blocks[1]; ++e2)
      for (std::size_t e3 = 1; e3 <= base.enc_blocks[2]; ++e3)
        for (std::size_t lat = 1; lat <= base.enc_blocks[3]; ++lat)
          for (std::size_t rf = 1; rf <= base.refinement_blocks; ++rf) {
            ModelConfig c = base;
            c.enc_blocks = {e1, e2, e3, lat};
            c.dec_blocks = {e3, e2, e1};
            c.refinement_blocks = rf;
            for (std::size_t i = 0; i < 4; ++i) c.heads[i] = 2 * base.heads[i];
            try {
              c.validate();
            } catch (const ConfigError&) {
              continue;
            }
            const double block_ratio = static_cast<double>(c.total_blocks()) / static_cast<double>(ref.total_blocks);
            if (std::abs(block_ratio - target.block_ratio) > target.block_tolerance) continue;
            ++candidates;
            const double ratio =
                static_cast<double>(param_count(c).total_params) / static_cast<double>(ref.total_params);
            const double err = std::abs(ratio - target.param_ratio);
            if (!best || err < best_err) {
              best = SearchResult{c, ratio, block_ratio, 0};
              best_err = err;
            }
          }
  if (!best) throw ConfigError("no reduced configuration satisfies the block-ratio constraint");
  best->candidates = candidates;
  return *best;
}

inline std::string format_arch_comparison(const ArchComparison& cmp, const std::string& name_a,
                                          const std::string& name_b) {
  std::ostringstream os;
  auto pct = [](double v) {
    std::ostringstream p;
    p.setf(std::ios::fixed);
    p.precision(2);
    p << (v >= 0 ? "+" : "") << v << "%";
    return p.str();
  };
  os << "stage,blocks_" << name_a << ",blocks_" << name_b << ",heads_" << name_a << ",heads_" << name_b << ",params_"
     << name_a << ",params_" << name_b << "\n";
  for (std::size_t i = 0; i < cmp.a.stages.size(); ++i) {
    const auto& x = cmp.a.stages[i];
    const auto& y = cmp.b.stages[i];
    os << x.name << "," << x.blocks << "," << y.blocks << "," << x.heads << "," << y.heads << "," << x.params << ","
       << y.params << "\n";
  }
  os << "\n";
  os << "metric," << name_a << "," << name_b << ",delta\n";
  os << "params," << cmp.a.total_params << "," << cmp.b.total_params << "," << pct(cmp.param_delta_pct()) << "\n";
  os << "blocks," << cmp.a.total_blocks << "," << cmp.b.total_blocks << "," << pct(cmp.block_delta_pct()) << "\n";
  os << "fp32_bytes," << cmp.a.serialized_bytes << "," << cmp.b.serialized_bytes << "," << pct(cmp.size_delta_pct())
     << "\n";
  return os.str();
}

}  // namespace deblur
