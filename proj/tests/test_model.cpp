#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "deblur/arch.hpp"
#include "deblur/checkpoint.hpp"
#include "deblur/model.hpp"
#include "support/gradcheck.hpp"
#include "support/synth.hpp"

using namespace deblur;
using testing_support::check_gradients;
using testing_support::probe;
using testing_support::random_tensor;

namespace {

ModelConfig tiny() {
  ModelConfig c = ModelConfig::toy();
  c.base_channels = 2;
  c.heads = {1, 1, 1, 1};
  return c;
}

template <class T>
void randomize(ParamStore<T>& store, std::uint64_t seed, double spread) {
  for (auto& [name, t] : store) {
    if (name.find("alpha") != std::string::npos) continue;
    const Tensor<double> r = random_tensor(t.shape(), ++seed, -spread, spread);
    const bool norm_w = name.find("norm") != std::string::npos && name.find("weight") != std::string::npos;
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(norm_w ? 1.0 + r[i] : r[i]);
  }
}

}  // namespace

TEST_CASE("config presets") {
  const ModelConfig b = ModelConfig::baseline(), i = ModelConfig::improved(), t = ModelConfig::toy();
  CHECK(b.total_blocks() == 44);
  CHECK(i.total_blocks() == 31);
  CHECK(t.total_blocks() == 8);
  CHECK(b.level_channels() == std::array<std::size_t, 4>{48, 96, 192, 384});
  CHECK(t.level_channels() == std::array<std::size_t, 4>{8, 16, 32, 64});
  for (std::size_t k = 0; k < 4; ++k) CHECK(i.heads[k] == 2 * b.heads[k]);
  CHECK_NOTHROW(b.validate());
  CHECK_NOTHROW(i.validate());
  CHECK_NOTHROW(t.validate());
}

TEST_CASE("config validation rejects bad values") {
  ModelConfig c;
  c.base_channels = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.heads = {5, 2, 4, 8};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.enc_blocks[1] = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.out_channels = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config key/value round trip") {
  for (const ModelConfig& c : {ModelConfig::baseline(), ModelConfig::improved(), tiny()}) {
    CHECK(ModelConfig::from_kv(c.to_kv()) == c);
  }
  KeyValues kv = ModelConfig::toy().to_kv();
  kv.set("model.heads", "1, 2, 4");
  CHECK_THROWS_AS(ModelConfig::from_kv(kv), ConfigError);
}

TEST_CASE("parameter accounting equals the built store") {
  for (const ModelConfig& c : {ModelConfig::baseline(), ModelConfig::improved(), ModelConfig::toy(), tiny()}) {
    const auto store = build<float>(c, 1);
    CHECK(param_count(c).total_params == store.total_numel());
    std::size_t stage_sum = param_count(c).transition_params;
    for (const auto& s : param_count(c).stages) stage_sum += s.params;
    CHECK(stage_sum == store.total_numel());
  }
  CHECK(param_count(ModelConfig::baseline()).total_params == 26266420);
  CHECK(param_count(ModelConfig::toy()).total_params == 211989);
}

TEST_CASE("doubling heads adds exactly one alpha per extra head") {
  ModelConfig a = ModelConfig::improved();
  ModelConfig b = a;
  b.heads = ModelConfig::baseline().heads;
  std::size_t extra = 0;
  const auto la = stage_layout(a), lb = stage_layout(b);
  for (std::size_t s = 0; s < la.size(); ++s) extra += la[s].blocks * (la[s].heads - lb[s].heads);
  CHECK(param_count(a).total_params - param_count(b).total_params == extra);
}

TEST_CASE("build is deterministic per seed") {
  const auto a = build<float>(ModelConfig::toy(), 5), b = build<float>(ModelConfig::toy(), 5),
             c = build<float>(ModelConfig::toy(), 6);
  bool differs = false;
  for (const auto& [name, t] : a) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      CHECK(t[i] == b.at(name)[i]);
      differs = differs || t[i] != c.at(name)[i];
    }
  }
  CHECK(differs);
}

TEST_CASE("initial weights are truncated at two standard deviations") {
  const auto store = build<double>(ModelConfig::toy(), 3);
  for (const auto& [name, t] : store) {
    if (name.find(".bias") != std::string::npos || name.find("norm") != std::string::npos ||
        name.find("alpha") != std::string::npos) {
      continue;
    }
    for (double v : t.data()) CHECK(std::abs(v) <= 2 * kInitStd);
  }
}

TEST_CASE("zero output conv makes the model the identity") {
  auto store = build<float>(ModelConfig::toy(), 7);
  for (float& v : store.at("output.weight").data()) v = 0.0f;
  Restormer<float> model(ModelConfig::toy(), store);
  Tensor<float> x(Shape{2, 3, 16, 24});
  const Tensor<double> r = random_tensor(x.shape(), 8, 0, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(r[i]);
  const Tensor<float> y = model.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  const Tensor<float> odd = restore(model, Tensor<float>(Shape{1, 3, 13, 10}, 0.25f));
  CHECK(odd.shape() == Shape{1, 3, 13, 10});
  for (float v : odd.data()) CHECK(v == 0.25f);
}

TEST_CASE("nonzero output conv changes the prediction") {
  auto store = build<double>(ModelConfig::toy(), 9);
  Restormer<double> model(ModelConfig::toy(), store);
  const Tensor<double> x = random_tensor({1, 3, 16, 16}, 10, 0, 1);
  const Tensor<double> y = model.forward(x);
  double diff = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) diff += std::abs(y[i] - x[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("forward requires spatial sizes divisible by eight") {
  auto store = build<float>(ModelConfig::toy(), 1);
  Restormer<float> model(ModelConfig::toy(), store);
  CHECK_THROWS_AS(model.forward(Tensor<float>(Shape{1, 3, 12, 16})), ShapeError);
  CHECK_THROWS_AS(model.forward(Tensor<float>(Shape{1, 1, 16, 16})), ShapeError);
  CHECK(Restormer<float>::round_up(13) == 16);
  CHECK(Restormer<float>::round_up(16) == 16);
}

TEST_CASE("restore equals forward on aligned sizes and pads otherwise") {
  auto store = build<double>(ModelConfig::toy(), 11);
  Restormer<double> model(ModelConfig::toy(), store);
  const Tensor<double> x = random_tensor({1, 3, 16, 8}, 12, 0, 1);
  const Tensor<double> a = model.forward(x), b = restore(model, x);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  CHECK(restore(model, random_tensor({2, 3, 9, 17}, 13)).shape() == Shape{2, 3, 9, 17});
}

TEST_CASE("batched forward equals per-image forwards") {
  auto store = build<double>(ModelConfig::toy(), 14);
  Restormer<double> model(ModelConfig::toy(), store);
  const Tensor<double> x = random_tensor({2, 3, 8, 8}, 15, 0, 1);
  const Tensor<double> y = model.forward(x);
  for (std::size_t n = 0; n < 2; ++n) {
    Tensor<double> one(Shape{1, 3, 8, 8});
    std::copy(x.data().begin() + n * 192, x.data().begin() + (n + 1) * 192, one.data().begin());
    const Tensor<double> yo = model.forward(one);
    for (std::size_t i = 0; i < 192; ++i) CHECK(yo[i] == Catch::Approx(y[n * 192 + i]).margin(1e-14));
  }
}

TEST_CASE("check_params rejects mismatched stores") {
  auto store = build<float>(ModelConfig::toy(), 1);
  CHECK_THROWS_AS(check_params(ModelConfig::baseline(), store), ConfigError);
  CHECK_NOTHROW(check_params(ModelConfig::toy(), store));
}

TEST_CASE("checkpoint round trip is bit exact") {
  testing_support::TempDir dir("ckpt");
  const ModelConfig cfg = ModelConfig::toy();
  const auto store = build<float>(cfg, 21);
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, cfg, store);
  const auto ck = load_checkpoint<float>(path);
  CHECK(ck.config == cfg);
  for (const auto& [name, t] : store) {
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t[i] == ck.params.at(name)[i]);
  }
  CHECK(std::filesystem::file_size(path) == param_count(cfg).serialized_bytes);
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
}

TEST_CASE("corrupt checkpoints are rejected") {
  const ModelConfig cfg = tiny();
  const std::string bytes = serialize_checkpoint(cfg, build<float>(cfg, 1));
  CHECK_NOTHROW(deserialize_checkpoint<float>(bytes));
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint<float>(bad), FormatError);
  bad = bytes;
  bad[8] = 9;
  CHECK_THROWS_AS(deserialize_checkpoint<float>(bad), FormatError);
  CHECK_THROWS_AS(deserialize_checkpoint<float>(bytes.substr(0, bytes.size() - 3)), FormatError);
  CHECK_THROWS_AS(deserialize_checkpoint<float>(bytes + "x"), FormatError);
  CHECK_THROWS_AS(load_checkpoint<float>("/nonexistent/path.ckpt"), DataError);
}

TEST_CASE("two-block chain gradients pass finite differences") {
  auto store = initialize<double>(
      [] {
        auto a = block_param_specs("a.", 4, 2, kDefaultGamma), b = block_param_specs("b.", 4, 2, kDefaultGamma);
        a.insert(a.end(), b.begin(), b.end());
        return a;
      }(),
      31);
  randomize(store, 32, 0.3);
  const auto pa = bind_block(store, "a.", 2, kDefaultGamma), pb = bind_block(store, "b.", 2, kDefaultGamma);
  Tensor<double> x = random_tensor({2, 4, 4, 4}, 33);
  std::vector<Tensor<double>> leaves{x};
  for (auto& [name, t] : store) leaves.push_back(t);
  const auto rep = check_gradients([&] { return probe(block_forward(block_forward(x, pa), pb)); }, leaves);
  CHECK(rep.max_rel < 1e-3);
}

TEST_CASE("end-to-end model gradients pass finite differences") {
  const ModelConfig cfg = tiny();
  auto store = build<double>(cfg, 41);
  randomize(store, 42, 0.4);
  Restormer<double> model(cfg, store);
  Tensor<double> x = random_tensor({1, 3, 8, 8}, 43, 0, 1);
  const Tensor<double> y = random_tensor({1, 3, 8, 8}, 44, 0, 1);
  std::vector<Tensor<double>> leaves{x};
  for (auto& [name, t] : store) leaves.push_back(t);
  const auto rep = check_gradients(
      [&] {
        const Tensor<double> out = model.forward(x);
        return add(mean(abs(sub(out, y))), scale(mean(mul(out, out)), 0.5));
      },
      leaves, 1e-6, 3);
  CHECK(rep.checked > 300);
  CHECK(rep.max_rel < 1e-3);
}
