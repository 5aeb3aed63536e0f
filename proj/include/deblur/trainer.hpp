#pragma once

// AdamW, cosine learning rate, progressive patch/batch ladder and the
// training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "deblur/augment.hpp"
#include "deblur/checkpoint.hpp"
#include "deblur/config.hpp"
#include "deblur/dataio.hpp"
#include "deblur/error.hpp"
#include "deblur/losses.hpp"
#include "deblur/metrics.hpp"
#include "deblur/model.hpp"
#include "deblur/params.hpp"

namespace deblur {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("AdamW betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("AdamW eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("AdamW weight decay must be >= 0");
  }
};

template <class T>
struct OptimState {
  AdamWConfig hp;
  std::size_t step = 0;
  std::map<std::string, std::vector<T>> m, v;
};

// One AdamW update with decoupled weight decay and bias-corrected moments.
// Parameters without a gradient are treated as having a zero gradient.
template <class T>
void adamw_step(ParamStore<T>& params, OptimState<T>& st, double lr) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
    }
  }
  ++st.step;
  const double b1 = st.hp.beta1, b2 = st.hp.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  const double decay = lr * st.hp.weight_decay;
  for (auto& [name, p] : params) {
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.size() != p.numel()) {
      if (!m.empty()) throw ShapeError("optimizer state for " + name + " does not match the parameter");
      m.assign(p.numel(), T(0));
      v.assign(p.numel(), T(0));
    }
    auto data = p.data();
    const bool has = p.has_grad();
    auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has ? static_cast<double>(grad[i]) : 0.0;
      double theta = data[i];
      if (decay != 0.0) theta -= decay * theta;
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      theta -= lr * (mi / c1) / (std::sqrt(vi / c2) + st.hp.eps);
      data[i] = static_cast<T>(theta);
    }
  }
}

// Global L2 norm over all gradients, accumulated in name order.
template <class T>
double grad_norm(const ParamStore<T>& params) {
  double s = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

template <class T>
void clip_grad_norm(ParamStore<T>& params, double max_norm) {
  const double n = grad_norm(params);
  if (n <= max_norm || n == 0.0) return;
  const double f = max_norm / n;
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T& g : p.grad_mut()) g = static_cast<T>(g * f);
  }
}

struct LadderStep {
  std::size_t start_iter = 0;
  std::size_t patch = 128;
  std::size_t batch = 8;
  bool operator==(const LadderStep&) const = default;
};

struct TrainSchedule {
  std::size_t total_iters = 300000;
  double lr_start = 3e-4;
  double lr_end = 1e-6;
  std::vector<LadderStep> ladder{{0, 128, 8}};

  // Published 8-GPU progressive schedule.
  static TrainSchedule paper_8gpu() {
    TrainSchedule s;
    s.ladder = {{0, 128, 64}, {92000, 160, 40}, {156000, 192, 32}, {204000, 256, 16}, {240000, 320, 8}, {276000, 384, 8}};
    return s;
  }

  // Single-GPU reproduction of the baseline.
  static TrainSchedule baseline_1gpu() {
    TrainSchedule s;
    s.ladder = {{0, 128, 8}, {92000, 160, 4}, {156000, 192, 4}, {204000, 256, 2}, {240000, 320, 1}, {276000, 320, 1}};
    return s;
  }

  // Ladder of the reduced model.
  static TrainSchedule improved() {
    TrainSchedule s;
    s.ladder = {{0, 128, 8}, {92000, 160, 6}, {156000, 192, 4}, {204000, 256, 2}, {240000, 320, 2}, {276000, 384, 1}};
    return s;
  }

  void validate() const {
    if (total_iters == 0) throw ConfigError("train.total_iters must be positive");
    if (!(lr_start > 0.0) || !(lr_end >= 0.0) || lr_end > lr_start) {
      throw ConfigError("learning rates must satisfy 0 <= lr_end <= lr_start, lr_start > 0");
    }
    if (ladder.empty() || ladder.front().start_iter != 0) throw ConfigError("train.ladder must start at iteration 0");
    for (std::size_t i = 0; i < ladder.size(); ++i) {
      const auto& s = ladder[i];
      if (s.batch == 0) throw ConfigError("train.ladder batch sizes must be positive");
      if (s.patch == 0 || s.patch % kSpatialMultiple != 0) throw ConfigError("train.ladder patch sizes must be multiples of 8");
      if (i > 0 && s.start_iter <= ladder[i - 1].start_iter) {
        throw ConfigError("train.ladder start iterations must be strictly increasing");
      }
      if (i > 0 && s.patch < ladder[i - 1].patch) throw ConfigError("train.ladder patch sizes must be nondecreasing");
    }
  }
};

inline std::string format_ladder(const std::vector<LadderStep>& ladder) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    os << (i ? ", " : "") << ladder[i].start_iter << ":" << ladder[i].patch << ":" << ladder[i].batch;
  }
  return os.str();
}

// "start:patch:batch, ..."
inline std::vector<LadderStep> parse_ladder(const std::string& text) {
  std::vector<LadderStep> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const std::string t = detail::trim(item);
    std::size_t a = 0, b = 0, c = 0;
    char s1 = 0, s2 = 0;
    std::istringstream is(t);
    if (!(is >> a >> s1 >> b >> s2 >> c) || s1 != ':' || s2 != ':' || !is.eof()) {
      throw ConfigError("bad ladder entry '" + t + "' (expected start:patch:batch)");
    }
    out.push_back({a, b, c});
  }
  return out;
}

// end + (start - end) * (1 + cos(pi t / T)) / 2, exact at both ends.
inline double cosine_lr(std::size_t iter, const TrainSchedule& s) {
  if (iter > s.total_iters) {
    throw ConfigError("cosine_lr: iteration " + std::to_string(iter) + " outside [0, " + std::to_string(s.total_iters) + "]");
  }
  if (iter == 0) return s.lr_start;
  if (iter == s.total_iters) return s.lr_end;
  const double t = static_cast<double>(iter) / static_cast<double>(s.total_iters);
  const double lr = s.lr_end + 0.5 * (s.lr_start - s.lr_end) * (1.0 + std::cos(std::numbers::pi * t));
  return std::clamp(lr, s.lr_end, s.lr_start);
}

inline LadderStep ladder_lookup(std::size_t iter, const TrainSchedule& s) {
  auto it = std::upper_bound(s.ladder.begin(), s.ladder.end(), iter,
                             [](std::size_t v, const LadderStep& step) { return v < step.start_iter; });
  if (it == s.ladder.begin()) throw ConfigError("ladder has no entry at or before iteration " + std::to_string(iter));
  return *std::prev(it);
}

struct TrainOptions {
  std::uint64_t seed = 0;
  std::size_t val_every = 1000;
  std::size_t checkpoint_every = 1000;
  double clip_grad_norm = 0.0;  // 0 disables clipping
  double target_psnr = 0.0;     // stop once validation PSNR reaches this; 0 disables
  std::size_t stop_after = 0;   // run only this many iterations of the schedule; 0 runs all

  void validate() const {
    if (val_every == 0) throw ConfigError("train.val_every must be positive");
    if (!(clip_grad_norm >= 0.0)) throw ConfigError("train.clip_grad_norm must be >= 0");
  }
};

struct DataOptions {
  std::string root;
  std::string layout = "dirs";
  std::string split;  // file of validation ids; empty validates on the training pairs
};

// Everything a training run reads, as one key/value document.
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  TrainSchedule schedule;
  AdamWConfig adamw;
  TrainOptions train;
  AugmentConfig augment;
  DataOptions data;
  MiningBand mining;

  void validate() const {
    model.validate();
    loss.validate();
    schedule.validate();
    adamw.validate();
    train.validate();
    augment.validate();
    mining.validate();
  }

  KeyValues to_kv() const {
    KeyValues kv = model.to_kv();
    const KeyValues aug = augment.to_kv();
    for (const auto& [k, v] : aug.items()) kv.set(k, v);
    kv.set("loss.lambda_freq", format_double(loss.lambda_freq));
    kv.set("train.total_iters", std::to_string(schedule.total_iters));
    kv.set("train.lr_start", format_double(schedule.lr_start));
    kv.set("train.lr_end", format_double(schedule.lr_end));
    kv.set("train.ladder", format_ladder(schedule.ladder));
    kv.set("train.beta1", format_double(adamw.beta1));
    kv.set("train.beta2", format_double(adamw.beta2));
    kv.set("train.eps", format_double(adamw.eps));
    kv.set("train.weight_decay", format_double(adamw.weight_decay));
    kv.set("train.seed", std::to_string(train.seed));
    kv.set("train.val_every", std::to_string(train.val_every));
    kv.set("train.checkpoint_every", std::to_string(train.checkpoint_every));
    kv.set("train.clip_grad_norm", format_double(train.clip_grad_norm));
    kv.set("train.target_psnr", format_double(train.target_psnr));
    kv.set("train.stop_after", std::to_string(train.stop_after));
    kv.set("data.root", data.root);
    kv.set("data.layout", data.layout);
    kv.set("data.split", data.split);
    kv.set("eval.psnr_lo", format_double(mining.lo));
    kv.set("eval.psnr_hi", format_double(mining.hi));
    return kv;
  }

  static RunConfig from_kv(const KeyValues& kv) {
    auto count = [&](const std::string& key) {
      const long long v = kv.get_int(key);
      if (v < 0) throw ConfigError(key + " must be non-negative");
      return static_cast<std::size_t>(v);
    };
    RunConfig c;
    c.model = ModelConfig::from_kv(kv);
    c.augment = AugmentConfig::from_kv(kv);
    c.loss.lambda_freq = kv.get_double("loss.lambda_freq");
    c.schedule.total_iters = count("train.total_iters");
    c.schedule.lr_start = kv.get_double("train.lr_start");
    c.schedule.lr_end = kv.get_double("train.lr_end");
    c.schedule.ladder = parse_ladder(kv.get("train.ladder"));
    c.adamw.beta1 = kv.get_double("train.beta1");
    c.adamw.beta2 = kv.get_double("train.beta2");
    c.adamw.eps = kv.get_double("train.eps");
    c.adamw.weight_decay = kv.get_double("train.weight_decay");
    c.train.seed = count("train.seed");
    c.train.val_every = count("train.val_every");
    c.train.checkpoint_every = count("train.checkpoint_every");
    c.train.clip_grad_norm = kv.get_double("train.clip_grad_norm");
    c.train.target_psnr = kv.get_double("train.target_psnr");
    c.train.stop_after = count("train.stop_after");
    c.data.root = kv.get("data.root");
    c.data.layout = kv.get("data.layout");
    c.data.split = kv.get("data.split");
    c.mining.lo = kv.get_double("eval.psnr_lo");
    c.mining.hi = kv.get_double("eval.psnr_hi");
    c.validate();
    return c;
  }
};

struct LogRecord {
  std::size_t iter = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> psnr;  // present at validation points
  std::optional<double> ssim;
  double wall_time = 0.0;  // seconds since the start of training
};

struct TrainLog {
  std::vector<LogRecord> records;

  std::vector<double> losses() const {
    std::vector<double> out;
    for (const auto& r : records) out.push_back(r.loss);
    return out;
  }

  // iter,loss,lr,psnr,ssim; psnr and ssim are empty between validations.
  std::string csv() const {
    std::ostringstream os;
    os << "iter,loss,lr,psnr,ssim\n";
    for (const auto& r : records) {
      os << r.iter << "," << format_double(r.loss) << "," << format_double(r.lr) << ","
         << (r.psnr ? format_metric(*r.psnr) : "") << "," << (r.ssim ? format_metric(*r.ssim) : "") << "\n";
    }
    return os.str();
  }
};

struct Quality {
  double psnr = 0.0;  // mean over finite values; +inf when every image is reproduced exactly
  double ssim = 0.0;
};

template <class T>
Quality evaluate_model(const Restormer<T>& model, const std::vector<ImagePair>& pairs) {
  std::vector<ImageMetrics> rec;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Tensor<T> out = restore(model, to_tensor<T>({pairs[i].blur}));
    const Image img = from_tensor(out, 0);
    rec.push_back({std::to_string(i), psnr(pairs[i].sharp, img), ssim(pairs[i].sharp, img), 0.0, 0.0});
  }
  MetricReport r;
  r.records = std::move(rec);
  aggregate(r);
  return {r.mean_psnr, r.mean_ssim};
}

struct TrainResult {
  ParamStore<float> params;
  TrainLog log;
  std::size_t iterations = 0;
  Quality final_quality;
  double best_psnr = -std::numeric_limits<double>::infinity();
};

// Batch of iteration `iter`: example indices drawn without replacement when
// the batch fits in the dataset, with replacement otherwise; then a crop and
// augmentation per slot from per-slot seeds.
inline std::pair<std::vector<Image>, std::vector<Image>> assemble_batch(const std::vector<ImagePair>& data,
                                                                         const LadderStep& step, std::size_t iter,
                                                                         const AugmentConfig& aug, std::uint64_t seed) {
  const std::uint64_t iter_seed = mix_seed(seed, iter);
  std::mt19937_64 rng(iter_seed);
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::vector<std::size_t> pick;
  if (step.batch <= data.size()) {
    for (std::size_t i = 0; i < step.batch; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, idx.size() - 1);
      std::swap(idx[i], idx[d(rng)]);
      pick.push_back(idx[i]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> d(0, data.size() - 1);
    for (std::size_t i = 0; i < step.batch; ++i) pick.push_back(d(rng));
  }
  std::vector<Image> blur(pick.size()), sharp(pick.size());
  parallel_for(pick.size(), [&](std::size_t b) {
    std::mt19937_64 slot(mix_seed(iter_seed ^ aug.seed, b + 1));
    ImagePair patch = sample_patch(data[pick[b]], step.patch, slot);
    patch = apply(patch, aug, slot);
    blur[b] = std::move(patch.blur);
    sharp[b] = std::move(patch.sharp);
  });
  return {std::move(blur), std::move(sharp)};
}

struct TrainHooks {
  std::function<void(const LogRecord&)> on_validate;
};

// Trains from build(cfg.model, cfg.train.seed). When `out_dir` is nonempty,
// writes last.ckpt every checkpoint_every iterations and at the end,
// best.ckpt at each validation improvement, and train_log.csv. A non-finite
// loss or gradient raises NumericError; the checkpoints already written are
// left untouched.
inline TrainResult train(const RunConfig& cfg, const std::vector<ImagePair>& train_pairs,
                         const std::vector<ImagePair>& val_pairs, const std::string& out_dir = {},
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_pairs.empty()) throw DataError("training set is empty");
  const std::vector<ImagePair>& val = val_pairs.empty() ? train_pairs : val_pairs;
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);
  const auto path = [&](const char* name) { return (fs::path(out_dir) / name).string(); };

  TrainResult res;
  res.params = build<float>(cfg.model, cfg.train.seed);
  Restormer<float> model(cfg.model, res.params);
  OptimState<float> opt;
  opt.hp = cfg.adamw;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t iters =
      cfg.train.stop_after ? std::min(cfg.train.stop_after, cfg.schedule.total_iters) : cfg.schedule.total_iters;

  auto write_log = [&] {
    if (out_dir.empty()) return;
    std::ofstream f(path("train_log.csv"));
    f << res.log.csv();
  };

  for (std::size_t it = 0; it < iters; ++it) {
    const LadderStep step = ladder_lookup(it, cfg.schedule);
    const double lr = cosine_lr(it, cfg.schedule);
    auto [blur, sharp] = assemble_batch(train_pairs, step, it, cfg.augment, cfg.train.seed);
    const Tensor<float> x = to_tensor<float>(blur), y = to_tensor<float>(sharp);
    double loss_value = 0.0;
    try {
      Tape<float> tape;
      TapeGuard<float> guard(tape);
      Tensor<float> loss = total_loss(model.forward(x), y, cfg.loss);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");
      res.params.zero_grad();
      tape.backward(loss);
      if (cfg.train.clip_grad_norm > 0.0) clip_grad_norm(res.params, cfg.train.clip_grad_norm);
      adamw_step(res.params, opt, lr);
    } catch (const NumericError& e) {
      write_log();
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }
    res.params.zero_grad();
    res.iterations = it + 1;

    LogRecord rec;
    rec.iter = it;
    rec.loss = loss_value;
    rec.lr = lr;
    const bool last = it + 1 == iters;
    bool stop = false;
    if ((it + 1) % cfg.train.val_every == 0 || last) {
      const Quality q = evaluate_model(model, val);
      rec.psnr = q.psnr;
      rec.ssim = q.ssim;
      res.final_quality = q;
      if (q.psnr > res.best_psnr) {
        res.best_psnr = q.psnr;
        if (!out_dir.empty()) save_checkpoint(path("best.ckpt"), cfg.model, res.params);
      }
      stop = cfg.train.target_psnr > 0.0 && q.psnr >= cfg.train.target_psnr;
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.records.push_back(rec);
    if (rec.psnr && hooks.on_validate) hooks.on_validate(rec);
    if (!out_dir.empty() && ((cfg.train.checkpoint_every && (it + 1) % cfg.train.checkpoint_every == 0) || last || stop)) {
      save_checkpoint(path("last.ckpt"), cfg.model, res.params);
    }
    if (stop) break;
  }
  write_log();
  return res;
}

}  // namespace deblur
