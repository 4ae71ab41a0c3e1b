#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "lensveil/cli.hpp"

using namespace lensveil;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
  std::vector<const char*> argv;
  argv.push_back("lensveil");
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string manifest_field(const std::string& dir, const std::string& key) {
  std::ifstream f(dir + "/run_manifest.txt");
  std::string line;
  while (std::getline(f, line))
    if (line.rfind(key + " ", 0) == 0) return line.substr(key.size() + 1);
  return "";
}

}  // namespace

TEST_CASE("gen-data: sample count, manifest hash stability, usage errors") {
  const std::string dir = "/tmp/lv_cli_ds";
  fs::remove_all(dir);
  REQUIRE(run({"gen-data", "--ids", "6", "--per-id", "3", "--seed", "7", "--out", dir}) == 0);
  const auto data = synthface::load_dataset(dir);
  REQUIRE(data.rows.size() == 18);
  const std::string hash1 = manifest_field(dir, "config_hash");
  REQUIRE_FALSE(hash1.empty());

  // refuse to clobber without --force
  REQUIRE(run({"gen-data", "--ids", "6", "--per-id", "3", "--seed", "7", "--out", dir}) == 1);
  REQUIRE(run({"gen-data", "--ids", "6", "--per-id", "3", "--seed", "7", "--out", dir,
               "--force"}) == 0);
  REQUIRE(manifest_field(dir, "config_hash") == hash1);

  // missing required flag is a usage error
  REQUIRE(run({"gen-data", "--ids", "6", "--per-id", "3"}) == 2);
  fs::remove_all(dir);
}

TEST_CASE("psf command: default profile, depth handling, alpha file validation") {
  const std::string out = "/tmp/lv_cli_psf";
  fs::remove_all(out);
  REQUIRE(run({"psf", "--init-default", "--depth", "inf", "--res", "64", "--out", out}) == 0);
  for (const char* name : {"psf_r", "psf_g", "psf_b"}) {
    const auto raw = io::read_raw(out + "/" + name + ".raw");
    REQUIRE(raw.size() == 1);
    double total = 0.0;
    for (double v : raw[0].re) total += v;
    REQUIRE(total == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(fs::exists(out + "/" + std::string(name) + ".pgm"));
    REQUIRE(fs::exists(out + "/" + std::string(name) + "_log.pgm"));
  }
  REQUIRE(fs::exists(out + "/height.pgm.minmax.txt"));

  // near and far depths give different PSFs
  const std::string near_dir = "/tmp/lv_cli_psf_near";
  const std::string far_dir = "/tmp/lv_cli_psf_far";
  fs::remove_all(near_dir);
  fs::remove_all(far_dir);
  REQUIRE(run({"psf", "--init-default", "--depth", "0.33", "--res", "64", "--out", near_dir}) == 0);
  REQUIRE(run({"psf", "--init-default", "--depth", "2.0", "--res", "64", "--out", far_dir}) == 0);
  const auto near_psf = io::read_raw(near_dir + "/psf_g.raw")[0];
  const auto far_psf = io::read_raw(far_dir + "/psf_g.raw")[0];
  REQUIRE(l1_diff(near_psf, far_psf) > 1e-4);

  // malformed alpha files
  const std::string alpha14 = "/tmp/lv_cli_alpha14.txt";
  std::ofstream a14(alpha14);
  for (int i = 0; i < 14; ++i) a14 << "0.0\n";
  a14.close();
  REQUIRE(run({"psf", "--alpha", alpha14, "--depth", "inf", "--res", "64",
               "--out", "/tmp/lv_cli_psf_bad"}) == 1);
  REQUIRE(run({"psf", "--depth", "inf", "--out", "/tmp/lv_cli_psf_none"}) == 2);

  // large wavefronts need explicit confirmation
  REQUIRE(run({"psf", "--init-default", "--depth", "inf", "--res", "512",
               "--out", "/tmp/lv_cli_psf_large"}) == 2);

  fs::remove_all(out);
  fs::remove_all(near_dir);
  fs::remove_all(far_dir);
  fs::remove(alpha14);
}

TEST_CASE("train command: full chain artifacts, config validation, determinism") {
  const std::string ds = "/tmp/lv_cli_train_ds";
  fs::remove_all(ds);
  REQUIRE(run({"gen-data", "--ids", "5", "--per-id", "4", "--seed", "3", "--out", ds}) == 0);

  const std::string cfg_path = "/tmp/lv_cli_train.cfg";
  {
    std::ofstream cfg(cfg_path);
    cfg << "wavefront_resolution=64\n";
    for (int s = 1; s <= 4; ++s) {
      cfg << "stage" << s << ".epochs=1\n";
      cfg << "stage" << s << ".batch_size=6\n";
    }
  }

  const std::string out_a = "/tmp/lv_cli_train_a";
  const std::string out_b = "/tmp/lv_cli_train_b";
  fs::remove_all(out_a);
  fs::remove_all(out_b);
  REQUIRE(run({"train", "--stage", "all", "--data", ds, "--cfg", cfg_path, "--seed", "11",
               "--out", out_a}) == 0);
  for (int s = 1; s <= 4; ++s) {
    REQUIRE(fs::exists(out_a + "/stage" + std::to_string(s) + "/manifest.txt"));
    REQUIRE(fs::exists(out_a + "/stage" + std::to_string(s) + "_metrics.csv"));
  }

  REQUIRE(run({"train", "--stage", "all", "--data", ds, "--cfg", cfg_path, "--seed", "11",
               "--out", out_b}) == 0);
  for (int s = 1; s <= 4; ++s) {
    const std::string tag = "/stage" + std::to_string(s);
    const auto a = ckpt::load_checkpoint(out_a + tag);
    const auto b = ckpt::load_checkpoint(out_b + tag);
    REQUIRE(a.tensors.size() == b.tensors.size());
    for (const auto& [name, t] : a.tensors) REQUIRE(bit_equal(t, b.tensors.at(name)));
  }

  // unknown config keys are named in the error
  const std::string bad_cfg = "/tmp/lv_cli_bad.cfg";
  std::ofstream(bad_cfg) << "stage1.epoochs=3\n";
  REQUIRE(run({"train", "--stage", "1", "--data", ds, "--cfg", bad_cfg, "--out",
               "/tmp/lv_cli_train_bad"}) == 1);

  // stage 4 without stage-2/3 checkpoints fails
  const std::string lonely = "/tmp/lv_cli_train_lonely";
  fs::remove_all(lonely);
  REQUIRE(run({"train", "--stage", "4", "--data", ds, "--cfg", cfg_path, "--out", lonely}) ==
          1);

  fs::remove_all(ds);
  fs::remove_all(out_a);
  fs::remove_all(out_b);
  fs::remove(cfg_path);
  fs::remove(bad_cfg);
}

TEST_CASE("eval command: lens-only report and the wiener attack row") {
  const std::string ds = "/tmp/lv_cli_eval_ds";
  fs::remove_all(ds);
  REQUIRE(run({"gen-data", "--ids", "5", "--per-id", "6", "--seed", "5", "--out", ds}) == 0);

  const std::string cfg_path = "/tmp/lv_cli_eval.cfg";
  {
    std::ofstream cfg(cfg_path);
    cfg << "wavefront_resolution=64\n";
    cfg << "stage1.epochs=1\nstage1.batch_size=6\n";
    cfg << "eval.probe_epochs=2\neval.utility_epochs=2\neval.pairs_per_id=4\n";
  }
  const std::string train_out = "/tmp/lv_cli_eval_train";
  fs::remove_all(train_out);
  REQUIRE(run({"train", "--stage", "1", "--data", ds, "--cfg", cfg_path, "--seed", "2",
               "--out", train_out}) == 0);

  const std::string eval_out = "/tmp/lv_cli_eval_out";
  fs::remove_all(eval_out);
  REQUIRE(run({"eval", "--ckpt", train_out + "/stage1", "--data", ds, "--cfg", cfg_path,
               "--attacks", "wiener", "--out", eval_out, "--seed", "2"}) == 0);

  std::ifstream csv(eval_out + "/tradeoff.csv");
  REQUIRE(csv.good());
  std::string line;
  std::getline(csv, line);
  REQUIRE(line == "method,param,auc_probe,mae,rmse");
  bool lens_row = false, wiener_row = false;
  while (std::getline(csv, line)) {
    if (line.rfind("lens,", 0) == 0) {
      lens_row = true;
      // auc field parses as a probability
      std::istringstream ss(line.substr(5));
      std::string cell;
      std::getline(ss, cell, ',');
      std::getline(ss, cell, ',');
      const double auc = std::stod(cell);
      REQUIRE(auc >= 0.0);
      REQUIRE(auc <= 1.0);
    }
    if (line.rfind("wiener_lens,", 0) == 0) {
      wiener_row = true;
      std::istringstream ss(line.substr(12));
      std::string cell;
      std::getline(ss, cell, ',');
      std::getline(ss, cell, ',');
      REQUIRE_FALSE(cell.empty());
    }
  }
  REQUIRE(lens_row);
  REQUIRE(wiener_row);
  REQUIRE(fs::exists(eval_out + "/tradeoff.svg"));
  REQUIRE(fs::exists(eval_out + "/roc_lens.csv"));
  REQUIRE(fs::exists(eval_out + "/roc_wiener_lens.csv"));

  // missing checkpoint is a runtime error
  REQUIRE(run({"eval", "--ckpt", "/tmp/does_not_exist", "--data", ds, "--out",
               "/tmp/lv_cli_eval_miss"}) == 1);

  fs::remove_all(ds);
  fs::remove_all(train_out);
  fs::remove_all(eval_out);
  fs::remove(cfg_path);
}
