#include "cli.hpp"

#include "promptpix/backbone.hpp"
#include "promptpix/checkpoint.hpp"
#include "promptpix/config.hpp"
#include "promptpix/image.hpp"
#include "promptpix/metrics.hpp"
#include "promptpix/superpixel.hpp"
#include "promptpix/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace promptpix {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class RunDirExists : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void make_run_dir(const fs::path& out) {
  if (fs::exists(out)) throw RunDirExists("output directory already exists: " + out.string());
  fs::create_directories(out);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_loss_csv(const std::vector<double>& loss, const fs::path& path) {
  std::ostringstream os;
  os << std::setprecision(17) << "epoch,loss\n";
  for (std::size_t i = 0; i < loss.size(); ++i) os << i + 1 << ',' << loss[i] << '\n';
  write_text(path, os.str());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int eval_threads(std::size_t work) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PROMPTPIX_THREADS")) {
    try {
      const int cap = std::stoi(env);
      if (cap >= 1) n = std::min(n, static_cast<unsigned>(cap));
    } catch (const std::exception&) {
      throw ConfigError(std::string("PROMPTPIX_THREADS: not an integer: ") + env);
    }
  }
  return static_cast<int>(std::min<std::size_t>(n, std::max<std::size_t>(work, 1)));
}

// Per-sample reports in dataset order; samples are spread over threads.
std::vector<NamedReport> evaluate_dataset(const ModelParams& model, const std::vector<Sample>& data) {
  std::vector<NamedReport> rows(data.size());
  const int threads = eval_threads(data.size());
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  auto work = [&](int t) {
    try {
      for (std::size_t i = static_cast<std::size_t>(t); i < data.size(); i += static_cast<std::size_t>(threads)) {
        rows[i] = {data[i].name, evaluate(predict(model, data[i].image), data[i].mask)};
      }
    } catch (...) {
      errors[static_cast<std::size_t>(t)] = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(work, t);
  work(0);
  for (std::thread& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

void check_dataset(const BackboneConfig& cfg, const std::vector<Sample>& data, const fs::path& root) {
  if (data.empty()) throw std::runtime_error("no samples found under " + root.string());
  for (const Sample& s : data) cfg.validate_image(s.image.height, s.image.width);
}

struct TrainOutcome {
  ModelParams model;
  TrainResult result;
  double seconds = 0;
};

TrainOutcome train_run(const RunConfig& cfg, const std::vector<Sample>& data, const fs::path& out, const std::string& data_root) {
  make_run_dir(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  const auto t0 = std::chrono::steady_clock::now();
  TrainOutcome o{build_model(cfg.backbone), {}, 0};
  o.result = train(o.model, data, cfg.train, [](int epoch, double loss) {
    std::cerr << "epoch " << epoch << "  loss " << std::setprecision(6) << loss << '\n';
  });
  o.seconds = seconds_since(t0);
  save_model(o.model, cfg, out / "checkpoint.bin");
  write_loss_csv(o.result.epoch_loss, out / "loss.csv");

  json manifest = {{"config", to_json(cfg)},
                   {"seed", cfg.train.seed},
                   {"data", data_root},
                   {"checkpoint", "checkpoint.bin"},
                   {"loss", "loss.csv"},
                   {"reports", json::array()},
                   {"tunable_params", count_tunable(o.model)},
                   {"timings_seconds", {{"train", o.seconds}}}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  return o;
}

RunConfig read_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  if (seed) {
    cfg.backbone.seed = *seed;
    cfg.train.seed = *seed;
  }
  cfg.backbone.validate();
  cfg.train.validate();
  return cfg;
}

void write_reports(const std::vector<NamedReport>& rows, const fs::path& out) {
  write_metrics_csv(rows, out / "metrics.csv");
  write_metrics_json(rows, out / "metrics.json");
}

void print_summary(const MetricReport& m) {
  std::cout << std::setprecision(4) << "dice " << m.dice << "  miou " << m.miou << "  mae " << m.mae << "  acc " << m.accuracy
            << "  S " << m.s_measure << "  E " << m.e_measure << '\n';
}

int cmd_superpixel(const std::string& image, int m, int iters, double temp, double pos_scale, const std::string& out) {
  const ImageRGB img = load_image(image);
  if (iters < 1) throw std::invalid_argument("--iters must be at least 1");
  if (!(temp > 0)) throw std::invalid_argument("--temp must be positive");
  const PixelFeatures feats = build_xylab(img, pos_scale);
  Tape tape;
  const SoftSlicResult r = iterate(tape, feats, m, iters, temp);
  const HardAssignment hard = hard_assign(feats.matrix, r.centers.S.value());

  make_run_dir(out);
  const fs::path dir(out);
  save_label_pgm16(hard.labels, img.height, img.width, dir / "labels.pgm");
  save_overlay(img, hard.labels, dir / "overlay.png");
  const Matrix sums = r.assoc.Qhat.value().colwise().sum();
  std::ostringstream os;
  os << std::setprecision(17) << "superpixel,column_sum\n";
  double worst = 0;
  for (Index i = 0; i < sums.cols(); ++i) {
    os << i << ',' << sums(0, i) << '\n';
    worst = std::max(worst, std::abs(sums(0, i) - 1.0));
  }
  write_text(dir / "column_sums.csv", os.str());
  std::cout << "superpixels " << m << "  max |column sum - 1| " << std::scientific << worst << '\n';
  return kExitOk;
}

int cmd_synth(int n, int size, std::uint64_t seed, const std::string& out) {
  std::vector<Sample> data = synth_dataset(n, size, size, seed);
  make_run_dir(out);
  save_dataset(data, out);
  std::cout << "wrote " << data.size() << " samples to " << out << '\n';
  return kExitOk;
}

int cmd_train(const std::string& config, const std::string& data_root, const std::string& out,
              const std::optional<std::uint64_t>& seed) {
  const RunConfig cfg = read_config(config, seed);
  const std::vector<Sample> data = load_dataset(data_root);
  check_dataset(cfg.backbone, data, data_root);
  const TrainOutcome o = train_run(cfg, data, out, data_root);
  std::cout << "trained " << cfg.train.max_epochs << " epochs, final loss " << std::setprecision(6) << o.result.epoch_loss.back()
            << ", tunable params " << count_tunable(o.model) << '\n';
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_root, const std::string& out, const std::string& config) {
  RunConfig override_cfg;
  if (!config.empty()) override_cfg = load_run_config(config);
  const ModelParams model = load_model(checkpoint, nullptr, config.empty() ? nullptr : &override_cfg);
  const std::vector<Sample> data = load_dataset(data_root);
  check_dataset(model.config, data, data_root);
  make_run_dir(out);
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<NamedReport> rows = evaluate_dataset(model, data);
  write_reports(rows, out);
  std::vector<MetricReport> all;
  for (const auto& r : rows) all.push_back(r.second);
  print_summary(mean_report(all));
  std::cerr << "evaluated " << rows.size() << " samples in " << std::fixed << std::setprecision(2) << seconds_since(t0) << " s\n";
  return kExitOk;
}

int cmd_infer(const std::string& checkpoint, const std::string& image, const std::string& out) {
  const ModelParams model = load_model(checkpoint);
  const ImageRGB img = load_image(image);
  model.config.validate_image(img.height, img.width);
  const Matrix prob = predict(model, img);
  BinaryMask mask(img.height, img.width);
  for (Index i = 0; i < prob.size(); ++i) mask.data[static_cast<std::size_t>(i)] = prob.data()[i] >= kBinarizeThreshold ? 1 : 0;
  make_run_dir(out);
  const fs::path dir(out);
  save_gray_png(prob, dir / "prob.png");
  save_mask_png(mask, dir / "mask.png");
  save_overlay(img, mask, dir / "overlay.png");
  std::cout << "foreground fraction " << static_cast<double>(mask.foreground()) / static_cast<double>(mask.pixels()) << '\n';
  return kExitOk;
}

int cmd_ablate(const std::string& config, const std::string& data_root, const std::string& test_root, const std::string& out,
               const std::optional<std::uint64_t>& seed) {
  const RunConfig base = read_config(config, seed);
  const std::vector<Sample> data = load_dataset(data_root);
  check_dataset(base.backbone, data, data_root);
  std::vector<Sample> test;
  if (!test_root.empty()) {
    test = load_dataset(test_root);
    check_dataset(base.backbone, test, test_root);
  }
  make_run_dir(out);
  std::ostringstream summary;
  summary << std::setprecision(17) << "variant,tunable_params,final_loss,dice,miou,mae,accuracy,s_measure,e_measure\n";
  for (PromptVariant v : kAllVariants) {
    RunConfig cfg = base;
    cfg.backbone.ablation_variant = v;
    std::cerr << "variant " << to_string(v) << '\n';
    const fs::path dir = fs::path(out) / to_string(v);
    const TrainOutcome o = train_run(cfg, data, dir, data_root);
    summary << to_string(v) << ',' << count_tunable(o.model) << ',' << o.result.epoch_loss.back();
    if (!test.empty()) {
      const std::vector<NamedReport> rows = evaluate_dataset(o.model, test);
      write_reports(rows, dir);
      std::vector<MetricReport> all;
      for (const auto& r : rows) all.push_back(r.second);
      const MetricReport m = mean_report(all);
      summary << ',' << m.dice << ',' << m.miou << ',' << m.mae << ',' << m.accuracy << ',' << m.s_measure << ',' << m.e_measure;
      std::cout << std::left << std::setw(14) << to_string(v);
      print_summary(m);
    } else {
      summary << ",,,,,,";
    }
    summary << '\n';
  }
  write_text(fs::path(out) / "summary.csv", summary.str());
  return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Prompt-tuned segmentation on a frozen hierarchical transformer"};
  app.require_subcommand(1);

  std::string image, out, config, data, test, checkpoint;
  int m = 16, iters = 5, n = 200, size = 32;
  double temp = 0.05, pos_scale = 1.0;
  std::uint64_t seed_value = 0;

  CLI::App* sp = app.add_subcommand("superpixel", "Soft-SLIC superpixels of one image");
  sp->add_option("--image", image, "Input PNG or PGM")->required();
  sp->add_option("--m", m, "Number of superpixels")->check(CLI::PositiveNumber);
  sp->add_option("--iters", iters, "Soft-SLIC iterations")->check(CLI::PositiveNumber);
  sp->add_option("--temp", temp, "Association temperature")->check(CLI::PositiveNumber);
  sp->add_option("--pos-scale", pos_scale, "Weight of XY against Lab")->check(CLI::PositiveNumber);
  sp->add_option("--out", out, "Output directory (must not exist)")->required();

  CLI::App* sy = app.add_subcommand("synth", "Write a synthetic shapes corpus");
  sy->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  sy->add_option("--size", size, "Image side in pixels")->check(CLI::Range(4, 4096));
  CLI::Option* sy_seed = sy->add_option("--seed", seed_value, "Generator seed");
  sy->add_option("--out", out, "Dataset root (must not exist)")->required();

  CLI::App* tr = app.add_subcommand("train", "Train prompts and decoder");
  tr->add_option("--config", config, "Run config JSON")->check(CLI::ExistingFile);
  tr->add_option("--data", data, "Dataset root")->required();
  tr->add_option("--out", out, "Run directory (must not exist)")->required();
  CLI::Option* tr_seed = tr->add_option("--seed", seed_value, "Overrides the config seed");

  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", data, "Dataset root")->required();
  ev->add_option("--out", out, "Report directory (must not exist)")->required();
  ev->add_option("--config", config, "Config replacing the one stored in the checkpoint")->check(CLI::ExistingFile);

  CLI::App* in = app.add_subcommand("infer", "Segment one image");
  in->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  in->add_option("--image", image, "Input PNG or PGM")->required();
  in->add_option("--out", out, "Output directory (must not exist)")->required();

  CLI::App* ab = app.add_subcommand("ablate", "Train every prompting variant");
  ab->add_option("--config", config, "Base run config JSON")->check(CLI::ExistingFile);
  ab->add_option("--data", data, "Training dataset root")->required();
  ab->add_option("--test", test, "Held-out dataset root for metrics");
  ab->add_option("--out", out, "Sweep directory (must not exist)")->required();
  CLI::Option* ab_seed = ab->add_option("--seed", seed_value, "Overrides the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto seed_of = [&](CLI::Option* opt) { return opt->count() ? std::optional<std::uint64_t>(seed_value) : std::nullopt; };

  try {
    if (*sp) return cmd_superpixel(image, m, iters, temp, pos_scale, out);
    if (*sy) return cmd_synth(n, size, sy_seed->count() ? seed_value : 0, out);
    if (*tr) return cmd_train(config, data, out, seed_of(tr_seed));
    if (*ev) return cmd_eval(checkpoint, data, out, config);
    if (*in) return cmd_infer(checkpoint, image, out);
    if (*ab) return cmd_ablate(config, data, test, out, seed_of(ab_seed));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IncompatibleCheckpointError& e) {
    std::cerr << "incompatible checkpoint: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace promptpix
