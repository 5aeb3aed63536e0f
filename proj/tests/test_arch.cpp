#include <catch_amalgamated.hpp>

#include <cmath>

#include "deblur/arch.hpp"
#include "deblur/checkpoint.hpp"

using namespace deblur;

TEST_CASE("block parameter formula counts every tensor of a block") {
  for (auto [c, h] : std::vector<std::pair<std::size_t, std::size_t>>{{48, 1}, {96, 4}, {8, 2}, {384, 16}}) {
    std::size_t n = 0;
    for (const auto& s : block_param_specs("x.", c, h, kDefaultGamma)) n += shape_numel(s.shape);
    CHECK(block_param_count(c, h, kDefaultGamma) == n);
  }
}

TEST_CASE("improved configuration against the baseline") {
  const ArchComparison cmp = compare_arch(ModelConfig::baseline(), ModelConfig::improved());
  CHECK(cmp.a.total_params == 26266420);
  CHECK(cmp.b.total_blocks == 31);
  CHECK(std::abs(cmp.param_ratio - 0.816) <= 0.010);
  CHECK(std::abs(cmp.block_ratio - 0.70) <= 0.03);
  CHECK(std::abs(cmp.size_ratio - 0.8158) <= 0.010);
  CHECK(cmp.param_ratio == Catch::Approx(0.815903).margin(1e-6));
  for (std::size_t i = 0; i < cmp.a.stages.size(); ++i) CHECK(cmp.b.stages[i].heads == 2 * cmp.a.stages[i].heads);
}

TEST_CASE("serialized size is four bytes per parameter plus the header") {
  for (const ModelConfig& c : {ModelConfig::toy(), ModelConfig::improved()}) {
    const ArchReport r = param_count(c);
    CHECK(r.serialized_bytes == 4 * r.total_params + r.header_bytes);
  }
  const ModelConfig toy = ModelConfig::toy();
  CHECK(serialize_checkpoint(toy, build<float>(toy, 0)).size() == param_count(toy).serialized_bytes);
}

TEST_CASE("search reproduces the frozen improved configuration") {
  const SearchResult s = search_improved(ModelConfig::baseline());
  CHECK(s.config == ModelConfig::improved());
  CHECK(s.candidates == 655);
  CHECK(std::abs(s.block_ratio - 31.0 / 44.0) < 1e-12);
  ReductionTarget impossible;
  impossible.block_ratio = 0.01;
  impossible.block_tolerance = 0.001;
  CHECK_THROWS_AS(search_improved(ModelConfig::baseline(), impossible), ConfigError);
}

TEST_CASE("comparison table lists every stage and the totals") {
  const std::string text = format_arch_comparison(compare_arch(ModelConfig::baseline(), ModelConfig::improved()), "base", "imp");
  for (const char* s : {"enc1", "enc2", "enc3", "latent", "dec3", "dec2", "dec1", "refine"}) {
    CHECK(text.find(std::string(s) + ",") != std::string::npos);
  }
  CHECK(text.find("params,26266420,") != std::string::npos);
  CHECK(text.find("blocks,44,31,-29.55%") != std::string::npos);
}
