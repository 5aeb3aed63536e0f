#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "deblur/nn_blocks.hpp"
#include "support/gradcheck.hpp"

using namespace deblur;
using testing_support::check_gradients;
using testing_support::probe;
using testing_support::random_tensor;

namespace {

struct Block {
  ParamStore<double> store;
  BlockParams<double> p;
};

Block make_block(std::size_t c, std::size_t heads, std::uint64_t seed, double spread = 0.3) {
  Block b{initialize<double>(block_param_specs("b.", c, heads, kDefaultGamma), seed), {}};
  // nonzero biases and wider weights so every term is exercised
  std::uint64_t s = seed * 100;
  for (auto& [name, t] : b.store) {
    if (name.find("alpha") != std::string::npos) continue;
    const bool norm_w = name.find("norm") != std::string::npos && name.find("weight") != std::string::npos;
    const Tensor<double> r = random_tensor(t.shape(), ++s, -spread, spread);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = norm_w ? 1.0 + r[i] : r[i];
  }
  b.p = bind_block(b.store, "b.", heads, kDefaultGamma);
  return b;
}

std::vector<double> pw(const std::vector<double>& x, std::size_t cin, std::size_t plane, const Tensor<double>& w,
                       const Tensor<double>& bias) {
  const std::size_t cout = w.dim(0);
  std::vector<double> out(cout * plane);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t p = 0; p < plane; ++p) {
      double acc = bias[o];
      for (std::size_t i = 0; i < cin; ++i) acc += w[o * cin + i] * x[i * plane + p];
      out[o * plane + p] = acc;
    }
  return out;
}

std::vector<double> dw(const std::vector<double>& x, std::size_t c, std::size_t h, std::size_t w, const Tensor<double>& k,
                       const Tensor<double>& bias) {
  std::vector<double> out(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        double acc = bias[ch];
        for (int ky = -1; ky <= 1; ++ky)
          for (int kx = -1; kx <= 1; ++kx) {
            const long long sy = static_cast<long long>(y) + ky, sx = static_cast<long long>(xx) + kx;
            if (sy < 0 || sx < 0 || sy >= static_cast<long long>(h) || sx >= static_cast<long long>(w)) continue;
            acc += k[ch * 9 + (ky + 1) * 3 + (kx + 1)] * x[(ch * h + sy) * w + sx];
          }
        out[(ch * h + y) * w + xx] = acc;
      }
  return out;
}

// Dense transposed attention for one image, written with explicit loops.
std::vector<double> mdta_oracle(const std::vector<double>& y, std::size_t c, std::size_t h, std::size_t w,
                                const MdtaParams<double>& p) {
  const std::size_t plane = h * w, d = c / p.heads;
  const auto qkv = dw(pw(y, c, plane, p.qkv_weight, p.qkv_bias), 3 * c, h, w, p.qkv_dw_weight, p.qkv_dw_bias);
  auto row = [&](std::size_t part, std::size_t ch) { return &qkv[(part * c + ch) * plane]; };
  std::vector<double> mixed(c * plane, 0.0);
  for (std::size_t hd = 0; hd < p.heads; ++hd) {
    for (std::size_t i = 0; i < d; ++i) {
      const double* q = row(0, hd * d + i);
      double qn = 0;
      for (std::size_t t = 0; t < plane; ++t) qn += q[t] * q[t];
      qn = std::sqrt(qn);
      std::vector<double> logits(d);
      for (std::size_t j = 0; j < d; ++j) {
        const double* k = row(1, hd * d + j);
        double kn = 0, dot = 0;
        for (std::size_t t = 0; t < plane; ++t) {
          kn += k[t] * k[t];
          dot += q[t] * k[t];
        }
        logits[j] = p.alpha[hd] * dot / (qn * std::sqrt(kn));
      }
      double mx = logits[0], z = 0;
      for (double v : logits) mx = std::max(mx, v);
      for (double& v : logits) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < d; ++j) {
        const double* v = row(2, hd * d + j);
        for (std::size_t t = 0; t < plane; ++t) mixed[(hd * d + i) * plane + t] += logits[j] / z * v[t];
      }
    }
  }
  return pw(mixed, c, plane, p.proj_weight, p.proj_bias);
}

}  // namespace

TEST_CASE("gdfn_hidden is floor(gamma * C)") {
  CHECK(gdfn_hidden(48, 2.66) == 127);
  CHECK(gdfn_hidden(96, 2.66) == 255);
  CHECK(gdfn_hidden(192, 2.66) == 510);
  CHECK(gdfn_hidden(384, 2.66) == 1021);
  CHECK(gdfn_hidden(8, 2.66) == 21);
  CHECK(gdfn_hidden(100, 2.0) == 200);
  CHECK_THROWS_AS(gdfn_hidden(1, 0.5), ConfigError);
}

TEST_CASE("heads must divide channels") {
  CHECK_NOTHROW(check_heads(48, 8));
  CHECK_THROWS_AS(check_heads(48, 5), ConfigError);
  CHECK_THROWS_AS(check_heads(8, 0), ConfigError);
  CHECK_THROWS_AS(block_param_specs("x.", 6, 4, 2.66), ConfigError);
}

TEST_CASE("alpha starts at 1/sqrt(C/heads) per head") {
  const auto store = initialize<double>(block_param_specs("b.", 16, 4, kDefaultGamma), 1);
  const Tensor<double>& a = store.at("b.attn.alpha");
  REQUIRE(a.numel() == 4);
  for (double v : a.data()) CHECK(v == Catch::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("MDTA matches a dense loop oracle") {
  for (std::size_t heads : {1u, 2u, 4u}) {
    const std::size_t n = 2, c = 8, h = 5, w = 6;
    Block b = make_block(c, heads, 3 + heads);
    const Tensor<double> x = random_tensor({n, c, h, w}, 50 + heads);
    const Tensor<double> got = mdta_core(x, b.p.mdta);
    for (std::size_t img = 0; img < n; ++img) {
      std::vector<double> y(x.data().begin() + img * c * h * w, x.data().begin() + (img + 1) * c * h * w);
      const auto want = mdta_oracle(y, c, h, w, b.p.mdta);
      double err = 0;
      for (std::size_t i = 0; i < want.size(); ++i) err = std::max(err, std::abs(got[img * c * h * w + i] - want[i]));
      INFO("heads " << heads);
      CHECK(err < 1e-12);
    }
  }
}

TEST_CASE("attention buffer is heads x C/h x C/h regardless of spatial size") {
  Block b = make_block(16, 4, 9);
  for (auto [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{2, 2}, {4, 8}, {9, 5}, {16, 16}}) {
    MdtaTrace<double> trace;
    mdta_core(random_tensor({3, 16, h, w}, h * w), b.p.mdta, &trace);
    CHECK(trace.attention.shape() == Shape{3, 4, 4, 4});
    const Tensor<double>& a = trace.attention;
    for (std::size_t r = 0; r < a.numel() / 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(a[r * 4 + j] >= 0.0);
        s += a[r * 4 + j];
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("zero output projections make each sub-block the identity") {
  Block b = make_block(8, 2, 11);
  const Tensor<double> x = random_tensor({2, 8, 4, 4}, 12);
  for (auto* t : {&b.p.mdta.proj_weight, &b.p.mdta.proj_bias, &b.p.gdfn.out_weight, &b.p.gdfn.out_bias}) {
    for (double& v : t->data()) v = 0.0;
  }
  for (const Tensor<double>& y : {mdta_forward(x, b.p.mdta), gdfn_forward(x, b.p.gdfn), block_forward(x, b.p)}) {
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
}

TEST_CASE("blocks act on each batch element independently") {
  Block b = make_block(8, 2, 13);
  const Tensor<double> x = random_tensor({3, 8, 4, 4}, 14);
  const Tensor<double> y = block_forward(x, b.p);
  const std::size_t per = 8 * 16;
  Tensor<double> perm(x.shape());
  const std::size_t order[3] = {2, 0, 1};
  for (std::size_t i = 0; i < 3; ++i)
    std::copy(x.data().begin() + order[i] * per, x.data().begin() + (order[i] + 1) * per, perm.data().begin() + i * per);
  const Tensor<double> yp = block_forward(perm, b.p);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < per; ++k) CHECK(yp[i * per + k] == y[order[i] * per + k]);
}

TEST_CASE("MDTA output is invariant to a positive per-channel scaling of queries and keys") {
  // scaling q/k rows before L2 normalization leaves attention unchanged
  Block b = make_block(8, 2, 15);
  MdtaParams<double> scaled = b.p.mdta;
  scaled.qkv_dw_weight = b.p.mdta.qkv_dw_weight.clone();
  scaled.qkv_dw_bias = b.p.mdta.qkv_dw_bias.clone();
  for (std::size_t ch = 0; ch < 16; ++ch) {
    const double f = 0.5 + 0.25 * static_cast<double>(ch % 5);
    for (std::size_t k = 0; k < 9; ++k) scaled.qkv_dw_weight[ch * 9 + k] *= f;
    scaled.qkv_dw_bias[ch] *= f;
  }
  const Tensor<double> x = random_tensor({1, 8, 5, 5}, 16);
  const Tensor<double> a = mdta_core(x, b.p.mdta), c = mdta_core(x, scaled);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == Catch::Approx(c[i]).margin(1e-12));
}

TEST_CASE("GDFN gates a GELU branch with a linear branch") {
  Block b = make_block(4, 1, 17);
  const Tensor<double> x = random_tensor({1, 4, 3, 3}, 18);
  const std::size_t hidden = gdfn_hidden(4, kDefaultGamma), plane = 9;
  const GdfnParams<double>& g = b.p.gdfn;
  std::vector<double> xv(x.data().begin(), x.data().end());
  const auto e = dw(pw(xv, 4, plane, g.in_weight, g.in_bias), 2 * hidden, 3, 3, g.dw_weight, g.dw_bias);
  std::vector<double> gate(hidden * plane);
  for (std::size_t i = 0; i < gate.size(); ++i) {
    const double a = e[i];
    gate[i] = 0.5 * a * (1 + std::erf(a / std::sqrt(2.0))) * e[hidden * plane + i];
  }
  const auto want = pw(gate, hidden, plane, g.out_weight, g.out_bias);
  const Tensor<double> got = gdfn_core(x, g);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == Catch::Approx(want[i]).margin(1e-12));
}

TEST_CASE("down and upsampling change resolution and width by two") {
  const Tensor<double> x = random_tensor({1, 8, 6, 4}, 19);
  const auto ds = downsample_spec("d", 8), us = upsample_spec("u", 8);
  CHECK(ds.shape == Shape{4, 8, 3, 3});
  CHECK(us.shape == Shape{16, 8, 3, 3});
  const Tensor<double> d = downsample(x, random_tensor(ds.shape, 20));
  CHECK(d.shape() == Shape{1, 16, 3, 2});
  const Tensor<double> u = upsample(x, random_tensor(us.shape, 21));
  CHECK(u.shape() == Shape{1, 4, 12, 8});
  CHECK_THROWS_AS(downsample(random_tensor({1, 8, 5, 4}, 22), random_tensor(ds.shape, 20)), ShapeError);
}

TEST_CASE("block gradients pass finite differences") {
  Block b = make_block(4, 2, 23);
  Tensor<double> x = random_tensor({2, 4, 4, 4}, 24);
  std::vector<Tensor<double>> leaves{x};
  for (auto& [name, t] : b.store) leaves.push_back(t);
  const auto rep = check_gradients([&] { return probe(block_forward(x, b.p)); }, leaves);
  CHECK(rep.checked > 200);
  CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("resampling gradients pass finite differences") {
  Tensor<double> x = random_tensor({2, 4, 4, 4}, 25);
  Tensor<double> wd = random_tensor(downsample_spec("d", 4).shape, 26);
  Tensor<double> wu = random_tensor(upsample_spec("u", 4).shape, 27);
  CHECK(check_gradients([&] { return probe(downsample(x, wd)); }, {x, wd}).max_rel < 1e-4);
  CHECK(check_gradients([&] { return probe(upsample(x, wu)); }, {x, wu}).max_rel < 1e-4);
}
