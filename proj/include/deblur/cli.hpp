#pragma once

// Command-line front end: train, infer, eval, mine, arch.
//
// Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric abort.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include "deblur/arch.hpp"
#include "deblur/checkpoint.hpp"
#include "deblur/dataio.hpp"
#include "deblur/metrics.hpp"
#include "deblur/model.hpp"
#include "deblur/trainer.hpp"

namespace deblur::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfigExit = 1, kDataExit = 2, kNumericExit = 3 };

inline constexpr const char* kEffectiveConfig = "effective_config.ini";

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

// Built-in presets selectable by name wherever a config file is expected.
inline std::optional<RunConfig> preset(const std::string& name) {
  RunConfig c;
  if (name == "baseline") {
    c.model = ModelConfig::baseline();
    c.schedule = TrainSchedule::baseline_1gpu();
  } else if (name == "improved") {
    c.model = ModelConfig::improved();
    c.schedule = TrainSchedule::improved();
  } else if (name == "toy") {
    c.model = ModelConfig::toy();
  } else {
    return std::nullopt;
  }
  return c;
}

// Defaults, then the config file (or preset name), then overrides, then --seed.
inline RunConfig resolve_config(const Options& o) {
  KeyValues kv = RunConfig{}.to_kv();
  if (!o.config.empty()) {
    if (fs::is_regular_file(o.config)) {
      kv.merge_known(KeyValues::load(o.config));
    } else if (auto p = preset(o.config)) {
      kv = p->to_kv();
    } else {
      throw ConfigError("config file not found: " + o.config);
    }
  }
  for (const auto& ov : o.overrides) kv.apply_override(ov);
  if (o.seed) kv.set("train.seed", std::to_string(*o.seed));
  return RunConfig::from_kv(kv);
}

inline void echo_config(const std::string& out_dir, const std::string& text) {
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / kEffectiveConfig);
  if (!f) throw DataError("cannot write to output directory " + out_dir);
  f << text;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  if (o.out.empty()) throw ConfigError("train needs --out");
  echo_config(o.out, cfg.to_kv().dump());
  if (cfg.data.root.empty()) throw ConfigError("data.root is not set");
  const PairedDataset all = scan_pairs(cfg.data.root, parse_layout(cfg.data.layout));
  for (const auto& w : all.warnings) out << "warning: " << w << "\n";
  PairedDataset train_set = all, val_set;
  if (!cfg.data.split.empty()) std::tie(train_set, val_set) = split_dataset(all, read_split_file(cfg.data.split));
  out << "train pairs " << train_set.size() << ", validation pairs " << val_set.size() << "\n";
  TrainHooks hooks;
  hooks.on_validate = [&](const LogRecord& r) {
    out << "iter " << r.iter + 1 << " loss " << r.loss << " lr " << r.lr << " psnr " << format_metric(*r.psnr)
        << " ssim " << format_metric(*r.ssim) << "\n";
  };
  const TrainResult res = train(cfg, load_pairs(train_set), load_pairs(val_set), o.out, hooks);
  out << "finished " << res.iterations << " iterations; checkpoint " << (fs::path(o.out) / "last.ckpt").string()
      << "\n";
  return kOk;
}

inline std::vector<fs::path> list_ppm(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("input directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && detail::is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline int cmd_infer(const Options& o, const std::string& checkpoint, const std::string& input, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("infer needs --out");
  if (!fs::is_regular_file(checkpoint)) throw DataError("checkpoint not found: " + checkpoint);
  Checkpoint<float> ck = load_checkpoint<float>(checkpoint);
  if (ck.config.in_channels != Image::channels) throw ShapeError("checkpoint expects " + std::to_string(ck.config.in_channels) + " channels");
  const auto files = list_ppm(input);
  echo_config(o.out, ck.config.to_kv().dump());
  Restormer<float> model(ck.config, ck.params);
  for (const auto& f : files) {
    const Image img = load_image(f.string());
    const Image restored = from_tensor(restore(model, to_tensor<float>({img})), 0);
    save_image(restored, (fs::path(o.out) / f.filename()).string());
  }
  out << "restored " << files.size() << " images into " << o.out << "\n";
  return kOk;
}

inline int cmd_eval(const Options& o, const std::string& restored, const std::string& truth, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  if (o.out.empty()) throw ConfigError("eval needs --out");
  std::vector<std::string> warnings;
  const auto pairs = match_dirs(restored, truth, warnings);
  if (!warnings.empty()) {
    throw DataError("unmatched files between " + restored + " and " + truth + ": " + warnings.front() +
                    (warnings.size() > 1 ? " (and " + std::to_string(warnings.size() - 1) + " more)" : ""));
  }
  std::vector<std::string> ids;
  for (const auto& p : pairs) ids.push_back(p.id);
  const MetricReport report = evaluate(
      ids,
      [&](std::size_t i) {
        std::pair<Image, Image> ab{load_image(pairs[i].blur_path), load_image(pairs[i].sharp_path)};
        if (!ab.first.same_size(ab.second)) throw DataError("size mismatch for " + pairs[i].id);
        return ab;
      },
      cfg.mining);
  echo_config(o.out, cfg.to_kv().dump());
  write_text(fs::path(o.out) / "report.csv", report_csv(report));
  write_text(fs::path(o.out) / "summary.csv", summary_csv(report));
  write_text(fs::path(o.out) / "summary.txt", summary_text(report));
  out << summary_text(report);
  return kOk;
}

inline int cmd_mine(const Options& o, const std::string& report_path, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  if (!fs::is_regular_file(report_path)) throw DataError("report not found: " + report_path);
  MetricReport report = parse_report_csv(read_file(report_path));
  mine_hard(report, cfg.mining);
  std::ostringstream counts;
  counts << "positives,negatives,neither,total\n"
         << report.hard_positive << "," << report.hard_negative << "," << report.neither << "," << report.total()
         << "\n";
  if (!o.out.empty()) {
    echo_config(o.out, cfg.to_kv().dump());
    write_text(fs::path(o.out) / "mine_counts.csv", counts.str());
    std::string pos, neg;
    for (const auto& r : report.records) {
      if (r.label == HardLabel::kHardPositive) pos += r.id + "\n";
      if (r.label == HardLabel::kHardNegative) neg += r.id + "\n";
    }
    write_text(fs::path(o.out) / "hard_positive.txt", pos);
    write_text(fs::path(o.out) / "hard_negative.txt", neg);
  }
  out << counts.str();
  return kOk;
}

inline ModelConfig arch_config(const std::string& spec, const Options& o) {
  Options one = o;
  one.config = spec;
  return resolve_config(one).model;
}

inline int cmd_arch(const Options& o, const std::string& a, const std::string& b, bool search, std::ostream& out) {
  const ModelConfig ca = arch_config(a, o), cb = arch_config(b, o);
  std::string text = format_arch_comparison(compare_arch(ca, cb), "a", "b");
  if (search) {
    const SearchResult s = search_improved(ca);
    std::ostringstream os;
    os << "\nsearch over mirrored reductions of a (heads doubled): " << s.candidates
       << " candidates within the block tolerance\n"
       << "chosen enc_blocks " << join_list(s.config.enc_blocks) << ", dec_blocks " << join_list(s.config.dec_blocks)
       << ", refinement " << s.config.refinement_blocks << ", heads " << join_list(s.config.heads) << "\n"
       << "param ratio " << format_double(s.param_ratio) << ", block ratio " << format_double(s.block_ratio) << "\n";
    text += os.str();
  }
  if (!o.out.empty()) {
    echo_config(o.out, "# a\n" + ca.to_kv().dump() + "\n# b\n" + cb.to_kv().dump());
    write_text(fs::path(o.out) / "arch.csv", text);
  }
  out << text;
  return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Restormer-style motion deblurring: train, infer, eval, mine, arch"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  auto common = [&](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", o.config, "config file or preset name (baseline, improved, toy)");
      sub->add_option("--override", o.overrides, "section.key=value, repeatable")->take_all();
      sub->add_option("--seed", seed, "overrides train.seed");
    }
    sub->add_option("--out", o.out, "output directory");
  };

  auto* train = app.add_subcommand("train", "train a model on a paired dataset");
  common(train, true);

  std::string checkpoint, input;
  auto* infer = app.add_subcommand("infer", "restore every .ppm image in a directory");
  common(infer, false);
  infer->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  infer->add_option("--input", input, "directory of blurred images")->required();

  std::string restored, truth;
  auto* eval = app.add_subcommand("eval", "score restored images against ground truth");
  common(eval, true);
  eval->add_option("--restored", restored, "directory of restored images")->required();
  eval->add_option("--gt", truth, "directory of ground-truth images")->required();

  std::string report;
  auto* mine = app.add_subcommand("mine", "count hard positives and negatives in an eval report");
  common(mine, true);
  mine->add_option("--report", report, "report.csv written by eval")->required();

  std::string arch_a = "baseline", arch_b = "improved";
  bool search = false;
  auto* arch = app.add_subcommand("arch", "compare parameter and block accounting of two configs");
  common(arch, true);
  arch->add_option("--a", arch_a, "first config file or preset");
  arch->add_option("--b", arch_b, "second config file or preset");
  arch->add_flag("--search", search, "also run the reduction search from config a");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigExit;
  }
  for (auto* sub : {train, eval, mine, arch}) {
    if (sub->parsed() && sub->count("--seed")) o.seed = seed;
  }

  try {
    if (train->parsed()) return cmd_train(o, out);
    if (infer->parsed()) return cmd_infer(o, checkpoint, input, out);
    if (eval->parsed()) return cmd_eval(o, restored, truth, out);
    if (mine->parsed()) return cmd_mine(o, report, out);
    if (arch->parsed()) return cmd_arch(o, arch_a, arch_b, search, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumericExit;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kConfigExit;
  }
  return kConfigExit;
}

}  // namespace deblur::cli
