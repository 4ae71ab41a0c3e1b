#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "lensveil/checkpoint.hpp"
#include "lensveil/image_io.hpp"

using namespace lensveil;
namespace fs = std::filesystem;

TEST_CASE("ppm round trip preserves 8-bit quantized channels") {
  Rng rng(1);
  io::Image3 img{Tensor::zeros({16, 16}), Tensor::zeros({16, 16}), Tensor::zeros({16, 16})};
  for (auto& ch : img)
    for (double& v : ch.re) v = rng.uniform();
  const std::string path = "/tmp/lv_io_test.ppm";
  io::write_ppm(path, img);
  const auto back = io::read_ppm(path);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < img[c].size(); ++i)
      REQUIRE(std::abs(back[c].re[i] - img[c].re[i]) <= 0.5 / 255.0 + 1e-12);
  fs::remove(path);
}

TEST_CASE("raw dumps round trip bit-exactly with a readable header") {
  Rng rng(2);
  Tensor t = Tensor::zeros({8, 4});
  for (double& v : t.re) v = rng.gaussian();
  const std::string path = "/tmp/lv_io_test.raw";
  io::write_raw(path, t);
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  REQUIRE(header == "P-RAW 4 8 1");
  const auto back = io::read_raw(path);
  REQUIRE(back.size() == 1);
  REQUIRE(back[0].re == t.re);
  fs::remove(path);
}

TEST_CASE("pgm16 export writes a min/max sidecar") {
  Tensor t = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < t.size(); ++i) t.re[i] = static_cast<double>(i) - 7.5;
  const std::string path = "/tmp/lv_io_test16.pgm";
  io::write_pgm16_with_sidecar(path, t);
  std::ifstream side(path + ".minmax.txt");
  std::string key;
  double lo = 0, hi = 0;
  side >> key >> lo;
  side >> key >> hi;
  REQUIRE(lo == Catch::Approx(-7.5));
  REQUIRE(hi == Catch::Approx(7.5));
  fs::remove(path);
  fs::remove(path + ".minmax.txt");
}

TEST_CASE("checkpoints round trip bit-exactly") {
  Rng rng(3);
  ckpt::Checkpoint ck;
  ck.stage = "identity";
  Tensor a = Tensor::zeros({15});
  for (double& v : a.re) v = rng.gaussian();
  Tensor w = Tensor::zeros({12, 7});
  for (double& v : w.re) v = rng.gaussian() * 1e-7;
  ck.tensors["lens.alpha"] = a;
  ck.tensors["net.w"] = w;
  ck.history.header = "epoch,train_loss,val_loss";
  ck.history.rows = {{0.0, std::nan(""), 1.25}, {1.0, 0.5, 0.75}};

  const std::string dir = "/tmp/lv_ckpt_test";
  fs::remove_all(dir);
  ckpt::save_checkpoint(dir, ck);
  const auto back = ckpt::load_checkpoint(dir);
  REQUIRE(back.stage == "identity");
  REQUIRE(back.tensors.at("lens.alpha").re == a.re);
  REQUIRE(back.tensors.at("net.w").re == w.re);
  REQUIRE(back.history.header == "epoch,train_loss,val_loss");
  REQUIRE(back.history.rows.size() == 2);
  REQUIRE(back.history.rows[1][2] == 0.75);
  REQUIRE(std::isnan(back.history.rows[0][1]));
  fs::remove_all(dir);
}

TEST_CASE("truncated checkpoint data is rejected") {
  ckpt::Checkpoint ck;
  ck.stage = "emotion";
  ck.tensors["w"] = Tensor::full({64}, 1.0);
  const std::string dir = "/tmp/lv_ckpt_trunc";
  fs::remove_all(dir);
  ckpt::save_checkpoint(dir, ck);
  fs::resize_file(dir + "/data.bin", 100);
  REQUIRE_THROWS_WITH(ckpt::load_checkpoint(dir),
                      Catch::Matchers::ContainsSubstring("corrupt"));
  fs::remove_all(dir);
}

TEST_CASE("stage-mismatched checkpoint loads are rejected") {
  ckpt::Checkpoint ck;
  ck.stage = "emotion";
  ck.tensors["w"] = Tensor::full({4}, 2.0);
  const std::string dir = "/tmp/lv_ckpt_stage";
  fs::remove_all(dir);
  ckpt::save_checkpoint(dir, ck);
  REQUIRE_NOTHROW(ckpt::load_checkpoint(dir, "emotion"));
  REQUIRE_THROWS_WITH(ckpt::load_checkpoint(dir, "identity"),
                      Catch::Matchers::ContainsSubstring("stage"));
  fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoint magic is rejected") {
  const std::string dir = "/tmp/lv_ckpt_magic";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir + "/manifest.txt") << "NOT-A-CHECKPOINT\n";
  std::ofstream(dir + "/data.bin") << "";
  REQUIRE_THROWS_WITH(ckpt::load_checkpoint(dir),
                      Catch::Matchers::ContainsSubstring("magic"));
  fs::remove_all(dir);
}
