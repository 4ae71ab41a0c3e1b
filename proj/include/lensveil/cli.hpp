#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lensveil/eval.hpp"
#include "lensveil/pipeline.hpp"

namespace lensveil::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// ---- flat key=value config files ----

class ConfigMap {
 public:
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw std::runtime_error("cannot open config file " + path);
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error("malformed config line: " + line);
      values_[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  double number(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stod(it->second);
  }

  int integer(const std::string& key, int fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stoi(it->second);
  }

  bool flag(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return it->second == "1" || it->second == "true" || it->second == "yes";
  }

  std::string text(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  void validate_keys(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      bool ok = known.count(k) != 0;
      if (!ok) {
        // per-stage keys: stageN.<field>
        for (int s = 1; s <= 4 && !ok; ++s) {
          const std::string prefix = "stage" + std::to_string(s) + ".";
          if (k.rfind(prefix, 0) == 0) ok = known.count("stage." + k.substr(prefix.size())) != 0;
        }
      }
      if (!ok) throw std::runtime_error("unknown config key: " + k);
    }
  }

  std::string canonical_dump() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << "=" << v << "\n";
    return out.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "wavefront_resolution", "noise_sigma", "pixel_pitch_um", "sensor_distance_mm",
      "depth_min_m", "depth_max_m",
      "stage.epochs", "stage.batch_size", "stage.lens_lr", "stage.head_lr",
      "stage.lens_optimizer", "stage.head_optimizer", "stage.freeze_lens",
      "stage.freeze_nets", "stage.pretrained_lens", "stage.pretrained_net",
      "stage.margin", "stage.hypersphere_r", "stage.histogram_bins", "stage.eval_depth",
      "stage.w_visual", "stage.w_identity", "stage.w_landmark",
      "eval.probe_epochs", "eval.utility_epochs", "eval.pairs_per_id", "eval.snr",
      "eval.probe_lr", "eval.utility_lr",
  };
  return keys;
}

inline optics::OpticalConfig optical_from(const ConfigMap& cfg) {
  optics::OpticalConfig oc;
  oc.wavefront_resolution =
      static_cast<std::size_t>(cfg.integer("wavefront_resolution", 128));
  oc.noise_sigma = cfg.number("noise_sigma", 0.01);
  oc.pixel_pitch_um = cfg.number("pixel_pitch_um", 3.69);
  oc.sensor_distance_mm = cfg.number("sensor_distance_mm", 35.5);
  oc.depth_min_m = cfg.number("depth_min_m", 0.33);
  oc.depth_max_m = cfg.number("depth_max_m", 2.0);
  return oc;
}

inline pipeline::StageConfig stage_from(const ConfigMap& cfg, int stage) {
  pipeline::StageConfig sc = pipeline::stage_defaults(stage);
  const std::string p = "stage" + std::to_string(stage) + ".";
  sc.epochs = cfg.integer(p + "epochs", sc.epochs);
  sc.batch_size = cfg.integer(p + "batch_size", sc.batch_size);
  sc.lens_lr = cfg.number(p + "lens_lr", sc.lens_lr);
  sc.head_lr = cfg.number(p + "head_lr", sc.head_lr);
  sc.lens_optimizer = cfg.text(p + "lens_optimizer", sc.lens_optimizer);
  sc.head_optimizer = cfg.text(p + "head_optimizer", sc.head_optimizer);
  sc.freeze_lens = cfg.flag(p + "freeze_lens", sc.freeze_lens);
  sc.freeze_nets = cfg.flag(p + "freeze_nets", sc.freeze_nets);
  sc.pretrained_lens = cfg.flag(p + "pretrained_lens", sc.pretrained_lens);
  sc.pretrained_net = cfg.flag(p + "pretrained_net", sc.pretrained_net);
  sc.triplet_margin = cfg.number(p + "margin", sc.triplet_margin);
  sc.hypersphere_r = cfg.number(p + "hypersphere_r", sc.hypersphere_r);
  sc.histogram_bins = cfg.integer(p + "histogram_bins", sc.histogram_bins);
  sc.eval_depth_m = cfg.number(p + "eval_depth", sc.eval_depth_m);
  sc.identity_weights.visual = cfg.number(p + "w_visual", sc.identity_weights.visual);
  sc.identity_weights.identity = cfg.number(p + "w_identity", sc.identity_weights.identity);
  sc.identity_weights.landmark = cfg.number(p + "w_landmark", sc.identity_weights.landmark);
  return sc;
}

// ---- run manifests ----

struct RunManifest {
  std::string command_line;
  std::string config_hash;
  std::uint64_t master_seed = 0;
  std::vector<std::string> outputs;
  double wall_clock_s = 0.0;

  void write(const std::string& dir) const {
    fs::create_directories(dir);
    const std::string path = dir + "/run_manifest.txt";
    std::ofstream f(path);
    if (!f.good()) throw std::runtime_error("cannot write manifest " + path);
    f << "toolkit_version " << kVersion << "\n";
    f << "command " << command_line << "\n";
    f << "config_hash " << config_hash << "\n";
    f << "master_seed " << master_seed << "\n";
    for (const auto& o : outputs) f << "output " << o << "\n";
    f << "wall_clock_s " << wall_clock_s << "\n";
    std::cout << path << "\n";
  }
};

inline std::string joined_args(int argc, const char* const* argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += ' ';
    out += argv[i];
  }
  return out;
}

inline std::string hash_hex(const std::string& text) {
  std::ostringstream out;
  out << std::hex << fnv1a(text);
  return out.str();
}

inline std::uint64_t default_master_seed() {
  if (const char* env = std::getenv("LENSVEIL_SEED")) return std::stoull(env);
  return 7;
}

// ---- commands ----

struct GenDataOpts {
  std::size_t ids = 10;
  std::size_t per_id = 20;
  std::uint64_t seed = default_master_seed();
  std::string out;
  bool force = false;
};

inline int cmd_gen_data(const GenDataOpts& opt, const std::string& command_line) {
  const auto t0 = std::chrono::steady_clock::now();
  if (fs::exists(opt.out) && !fs::is_empty(opt.out) && !opt.force) {
    std::cerr << "output directory " << opt.out << " is not empty (use --force)\n";
    return kExitRuntime;
  }
  synthface::make_dataset(opt.ids, opt.per_id, {}, opt.seed, opt.out);
  RunManifest manifest;
  manifest.command_line = command_line;
  std::ostringstream cfg;
  cfg << "ids=" << opt.ids << "\nper_id=" << opt.per_id << "\nseed=" << opt.seed << "\n";
  manifest.config_hash = hash_hex(cfg.str());
  manifest.master_seed = opt.seed;
  manifest.outputs = {opt.out + "/manifest.csv"};
  manifest.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  manifest.write(opt.out);
  return kExitOk;
}

struct PsfOpts {
  std::string alpha_file;
  bool init_default = false;
  std::string depth = "inf";
  std::string out;
  std::size_t resolution = 128;
  bool confirm_large = false;
};

inline std::vector<double> read_alpha_file(const std::string& path) {
  std::ifstream f(path);
  if (!f.good()) throw std::runtime_error("cannot open alpha file " + path);
  std::vector<double> values;
  double v = 0.0;
  while (f >> v) values.push_back(v);
  if (values.empty()) throw std::runtime_error("alpha file holds no values: " + path);
  return values;
}

inline int cmd_psf(const PsfOpts& opt, const std::string& command_line) {
  const auto t0 = std::chrono::steady_clock::now();
  if (opt.resolution > 256 && !opt.confirm_large) {
    std::cerr << "wavefront resolution " << opt.resolution
              << " is expensive; pass --confirm-large to proceed\n";
    return kExitUsage;
  }
  optics::OpticalConfig oc;
  oc.wavefront_resolution = opt.resolution;
  oc.validate();
  zernike::ZernikeBasis basis = zernike::build_basis(oc.wavefront_resolution, 15);
  zernike::LensProfile lens;
  if (opt.init_default) {
    lens = zernike::LensProfile::default_init(basis.q);
  } else {
    lens.alpha = read_alpha_file(opt.alpha_file);
    require(lens.alpha.size() == static_cast<std::size_t>(basis.q),
            "alpha file must hold exactly " + std::to_string(basis.q) + " values");
  }
  const double depth =
      opt.depth == "inf" ? optics::kInfiniteDepth : std::stod(opt.depth);

  fs::create_directories(opt.out);
  RunManifest manifest;
  manifest.command_line = command_line;
  manifest.config_hash = hash_hex(opt.depth + "/" + std::to_string(opt.resolution));

  const optics::PsfStack stack = optics::psf_stack(lens, basis, oc, depth);
  const std::array<const char*, 3> names{"r", "g", "b"};
  for (int c = 0; c < 3; ++c) {
    const Tensor& p = stack.psfs[static_cast<std::size_t>(c)];
    const std::string base = opt.out + "/psf_" + names[static_cast<std::size_t>(c)];
    io::write_pgm8_scaled(base + ".pgm", p);
    Tensor logp = p;
    for (double& v : logp.re) v = std::log10(v + 1e-12) + 12.0;
    io::write_pgm8_scaled(base + "_log.pgm", logp);
    io::write_raw(base + ".raw", p);
    manifest.outputs.push_back(base + ".pgm");
    manifest.outputs.push_back(base + "_log.pgm");
    manifest.outputs.push_back(base + ".raw");
  }
  const Tensor height = zernike::height_map(lens, basis);
  io::write_pgm16_with_sidecar(opt.out + "/height.pgm", height);
  manifest.outputs.push_back(opt.out + "/height.pgm");
  manifest.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  manifest.write(opt.out);
  return kExitOk;
}

struct TrainOpts {
  std::string stage = "all";
  std::string data;
  std::string cfg_file;
  std::string resume;
  std::string out;
  std::string ckpt1, ckpt2, ckpt3;
  std::uint64_t seed = default_master_seed();
  int workers = 1;
  bool confirm_large = false;
  std::map<std::string, std::string> overrides;  // CLI-level config overrides
};

inline int cmd_train(const TrainOpts& opt, const std::string& command_line) {
  const auto t0 = std::chrono::steady_clock::now();
  ConfigMap cfg;
  if (!opt.cfg_file.empty()) cfg.load_file(opt.cfg_file);
  for (const auto& [k, v] : opt.overrides) cfg.set(k, v);
  cfg.validate_keys(known_config_keys());

  optics::OpticalConfig oc = optical_from(cfg);
  if (oc.wavefront_resolution > 256 && !opt.confirm_large) {
    std::cerr << "wavefront resolution " << oc.wavefront_resolution
              << " is expensive; pass --confirm-large to proceed\n";
    return kExitUsage;
  }

  const synthface::DatasetIndex data = synthface::load_dataset(opt.data);
  fs::create_directories(opt.out);
  pipeline::TrainEnv env = pipeline::make_env(data, oc, opt.seed, opt.out);

  RunManifest manifest;
  manifest.command_line = command_line;
  manifest.config_hash = hash_hex(cfg.canonical_dump() + "|seed=" + std::to_string(opt.seed));
  manifest.master_seed = opt.seed;

  auto ckpt_dir = [&](int stage) { return opt.out + "/stage" + std::to_string(stage); };
  auto run_single = [&](int stage, const ckpt::Checkpoint* resume) {
    pipeline::StageConfig sc = stage_from(cfg, stage);
    ckpt::Checkpoint out;
    switch (stage) {
      case 1:
        out = pipeline::run_stage1_identity(env, sc, resume);
        break;
      case 2: {
        const std::string src = opt.ckpt1.empty() ? ckpt_dir(1) : opt.ckpt1;
        const ckpt::Checkpoint ck1 = ckpt::load_checkpoint(src, "identity");
        out = pipeline::run_stage2_emotion(env, ck1, sc, resume);
        break;
      }
      case 3: {
        const std::string src = opt.ckpt2.empty() ? ckpt_dir(2) : opt.ckpt2;
        ckpt::Checkpoint source;
        const bool wants_source = sc.pretrained_lens || sc.pretrained_net;
        if (wants_source) source = ckpt::load_checkpoint(src);
        out = pipeline::run_stage3_depression(env, wants_source ? &source : nullptr, sc, resume);
        break;
      }
      case 4: {
        if (sc.pretrained_net) {
          const std::string s2 = opt.ckpt2.empty() ? ckpt_dir(2) : opt.ckpt2;
          const std::string s3 = opt.ckpt3.empty() ? ckpt_dir(3) : opt.ckpt3;
          if (!fs::exists(s2 + "/manifest.txt") || !fs::exists(s3 + "/manifest.txt"))
            throw std::runtime_error("stage 4 needs stage-2 and stage-3 checkpoints");
          const ckpt::Checkpoint ck2 = ckpt::load_checkpoint(s2, "emotion");
          const ckpt::Checkpoint ck3 = ckpt::load_checkpoint(s3, "depression");
          out = pipeline::run_stage4_fusion(env, &ck2, &ck3, sc, resume);
        } else {
          out = pipeline::run_stage4_fusion(env, nullptr, nullptr, sc, resume);
        }
        break;
      }
      default:
        throw std::runtime_error("bad stage");
    }
    ckpt::save_checkpoint(ckpt_dir(stage), out);
    manifest.outputs.push_back(ckpt_dir(stage));
    manifest.outputs.push_back(opt.out + "/stage" + std::to_string(stage) + "_metrics.csv");
  };

  ckpt::Checkpoint resume_ck;
  const ckpt::Checkpoint* resume = nullptr;
  if (!opt.resume.empty()) {
    resume_ck = ckpt::load_checkpoint(opt.resume);
    resume = &resume_ck;
  }

  if (opt.stage == "all") {
    for (int s = 1; s <= 4; ++s) run_single(s, nullptr);
  } else {
    const int stage = std::stoi(opt.stage);
    require(stage >= 1 && stage <= 4, "stage must be 1..4 or all");
    run_single(stage, resume);
  }

  manifest.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  manifest.write(opt.out);
  return kExitOk;
}

struct EvalOpts {
  std::string ckpt;
  std::string data;
  std::string cfg_file;
  std::vector<std::string> attacks;
  std::vector<std::string> baselines;
  std::string out;
  std::uint64_t seed = default_master_seed();
};

inline std::vector<double> parse_param_list(const std::string& spec, const std::string& kind) {
  // "gaussian:15,25,50" -> {15, 25, 50}
  const auto colon = spec.find(':');
  require(colon != std::string::npos, "baseline spec must look like kind:a,b,c");
  require(spec.substr(0, colon) == kind, "unexpected baseline kind");
  std::vector<double> out;
  std::istringstream ss(spec.substr(colon + 1));
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
  return out;
}

inline int cmd_eval(const EvalOpts& opt, const std::string& command_line) {
  const auto t0 = std::chrono::steady_clock::now();
  ConfigMap cfg;
  if (!opt.cfg_file.empty()) cfg.load_file(opt.cfg_file);
  cfg.validate_keys(known_config_keys());

  if (!fs::exists(opt.ckpt + "/manifest.txt"))
    throw std::runtime_error("missing checkpoint: " + opt.ckpt);
  const ckpt::Checkpoint ck = ckpt::load_checkpoint(opt.ckpt);
  require(ck.has("lens.alpha"), "checkpoint has no lens coefficients");

  const synthface::DatasetIndex data = synthface::load_dataset(opt.data);
  optics::OpticalConfig oc = optical_from(cfg);
  fs::create_directories(opt.out);
  pipeline::TrainEnv env = pipeline::make_env(data, oc, opt.seed);

  eval::SweepConfig sweep;
  sweep.seed = opt.seed;
  sweep.noise_sigma = oc.noise_sigma;
  sweep.probe.epochs = cfg.integer("eval.probe_epochs", sweep.probe.epochs);
  sweep.probe.lr = cfg.number("eval.probe_lr", sweep.probe.lr);
  sweep.utility.epochs = cfg.integer("eval.utility_epochs", sweep.utility.epochs);
  sweep.utility.lr = cfg.number("eval.utility_lr", sweep.utility.lr);
  sweep.pairs_per_id = cfg.integer("eval.pairs_per_id", sweep.pairs_per_id);
  const double snr = cfg.number("eval.snr", 1e4);

  const std::size_t scene = env.images[0][0].shape[0];
  std::vector<eval::MethodSpec> methods;
  methods.push_back(eval::lens_method(env, ck.get("lens.alpha"), 1.0));
  for (const std::string& spec : opt.baselines) {
    if (spec.rfind("gaussian:", 0) == 0) {
      for (double s : parse_param_list(spec, "gaussian"))
        methods.push_back(eval::gaussian_method(s, scene));
    } else if (spec.rfind("defocus:", 0) == 0) {
      for (double d : parse_param_list(spec, "defocus"))
        methods.push_back(eval::defocus_method(d, scene));
    } else {
      throw std::runtime_error("unknown baseline spec: " + spec);
    }
  }

  RunManifest manifest;
  manifest.command_line = command_line;
  manifest.config_hash = hash_hex(cfg.canonical_dump() + "|seed=" + std::to_string(opt.seed));
  manifest.master_seed = opt.seed;

  std::vector<privacy::TradeoffRow> rows;
  for (const auto& method : methods) {
    const eval::MethodReport report = eval::evaluate_method(data, env.images, method, sweep);
    privacy::TradeoffRow row;
    row.method = method.name;
    row.param = method.param_raw;
    row.auc_probe = report.probe_auc;
    row.mae = report.utility.mae;
    row.rmse = report.utility.rmse;
    rows.push_back(row);
    std::ostringstream roc_name;
    roc_name << opt.out << "/roc_" << method.name;
    if (method.param_raw > 0) roc_name << "_" << method.param_raw;
    roc_name << ".csv";
    privacy::write_roc_csv(roc_name.str(), report.roc);
    manifest.outputs.push_back(roc_name.str());
  }

  for (const std::string& attack : opt.attacks) {
    require(attack == "wiener", "unknown attack: " + attack);
    // the probe standing in for pretrained recognizers is trained on clear
    // captures; verification runs on the attacker's restorations
    const auto clear = eval::clear_method(scene);
    const auto clear_rendered =
        privacy::render_all(data, env.images, clear.kernels, sweep.noise_sigma,
                            mix_seed(sweep.seed, 3));
    privacy::ProbeConfig probe_cfg = sweep.probe;
    probe_cfg.noise_sigma = sweep.noise_sigma;
    const neural::EmbedNet clear_probe = privacy::train_probe(data, clear_rendered, probe_cfg);
    const eval::AttackReport report =
        eval::wiener_attack(data, env.images, methods[0], clear_probe, snr, sweep);
    privacy::TradeoffRow row;
    row.method = "wiener_lens";
    row.auc_probe = report.probe_auc;
    row.mae = std::nan("");
    row.rmse = std::nan("");
    rows.push_back(row);
    privacy::write_roc_csv(opt.out + "/roc_wiener_lens.csv", report.roc);
    manifest.outputs.push_back(opt.out + "/roc_wiener_lens.csv");
  }

  privacy::write_tradeoff_csv(opt.out + "/tradeoff.csv", rows);
  privacy::write_tradeoff_svg(opt.out + "/tradeoff.svg", rows);
  manifest.outputs.push_back(opt.out + "/tradeoff.csv");
  manifest.outputs.push_back(opt.out + "/tradeoff.svg");
  manifest.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  manifest.write(opt.out);
  return kExitOk;
}

// ---- entry point ----

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"differentiable lens-and-recognition toolkit"};
  app.require_subcommand(1);
  const std::string command_line = joined_args(argc, argv);

  GenDataOpts gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic face dataset");
  gen_cmd->add_option("--ids", gen.ids, "number of identities")->required();
  gen_cmd->add_option("--per-id", gen.per_id, "samples per identity")->required();
  gen_cmd->add_option("--seed", gen.seed, "master seed");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_flag("--force", gen.force, "allow writing into a non-empty directory");

  PsfOpts psf;
  auto* psf_cmd = app.add_subcommand("psf", "render per-wavelength PSFs of a lens");
  psf_cmd->add_option("--alpha", psf.alpha_file, "text file with 15 coefficients");
  psf_cmd->add_flag("--init-default,--init-paper", psf.init_default,
                    "use the built-in start profile (fourth coefficient -51)");
  psf_cmd->add_option("--depth", psf.depth, "object depth in meters, or 'inf'");
  psf_cmd->add_option("--res", psf.resolution, "wavefront resolution");
  psf_cmd->add_option("--out", psf.out, "output directory")->required();
  psf_cmd->add_flag("--confirm-large", psf.confirm_large, "allow resolutions above 256");

  TrainOpts train;
  std::vector<std::string> train_set_overrides;
  auto* train_cmd = app.add_subcommand("train", "run the progressive training stages");
  train_cmd->add_option("--stage", train.stage, "1|2|3|4|all");
  train_cmd->add_option("--data", train.data, "dataset directory")->required();
  train_cmd->add_option("--cfg", train.cfg_file, "key=value config file");
  train_cmd->add_option("--resume", train.resume, "checkpoint to continue from");
  train_cmd->add_option("--out", train.out, "output directory")->required();
  train_cmd->add_option("--ckpt1", train.ckpt1, "stage-1 checkpoint (for later stages)");
  train_cmd->add_option("--ckpt2", train.ckpt2, "stage-2 checkpoint");
  train_cmd->add_option("--ckpt3", train.ckpt3, "stage-3 checkpoint");
  train_cmd->add_option("--seed", train.seed, "master seed");
  train_cmd->add_option("--workers", train.workers, "parallel workers");
  train_cmd->add_flag("--confirm-large", train.confirm_large, "allow wavefronts above 256");
  train_cmd->add_option("--set", train_set_overrides, "config override key=value");

  EvalOpts eval_opts;
  auto* eval_cmd = app.add_subcommand("eval", "privacy/utility sweep and attacks");
  eval_cmd->add_option("--ckpt", eval_opts.ckpt, "trained checkpoint directory")->required();
  eval_cmd->add_option("--data", eval_opts.data, "dataset directory")->required();
  eval_cmd->add_option("--cfg", eval_opts.cfg_file, "key=value config file");
  eval_cmd->add_option("--attacks", eval_opts.attacks, "attacks to run (wiener)");
  eval_cmd->add_option("--baselines", eval_opts.baselines,
                       "baseline sweeps, e.g. gaussian:15,25,50 defocus:50,150,275");
  eval_cmd->add_option("--out", eval_opts.out, "output directory")->required();
  eval_cmd->add_option("--seed", eval_opts.seed, "master seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen, command_line);
    if (psf_cmd->parsed()) {
      if (!psf.init_default && psf.alpha_file.empty()) {
        std::cerr << "psf needs --alpha FILE or --init-default\n";
        return kExitUsage;
      }
      return cmd_psf(psf, command_line);
    }
    if (train_cmd->parsed()) {
      for (const std::string& kv : train_set_overrides) {
        const auto eq = kv.find('=');
        require(eq != std::string::npos, "override must look like key=value");
        train.overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      return cmd_train(train, command_line);
    }
    if (eval_cmd->parsed()) return cmd_eval(eval_opts, command_line);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace lensveil::cli
