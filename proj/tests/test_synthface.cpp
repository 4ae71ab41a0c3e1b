#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "lensveil/synthface.hpp"

using namespace lensveil;
namespace fs = std::filesystem;

TEST_CASE("identity generation is deterministic and range-clamped") {
  const auto a = synthface::generate_identity(1234);
  const auto b = synthface::generate_identity(1234);
  REQUIRE(a.geometry == b.geometry);
  REQUIRE(a.texture == b.texture);
  for (std::size_t i = 0; i < a.geometry.size(); ++i) {
    REQUIRE(a.geometry[i] >= synthface::kGeometryRanges[i].lo);
    REQUIRE(a.geometry[i] <= synthface::kGeometryRanges[i].hi);
  }
}

TEST_CASE("1000 seeds give pairwise-distinct geometry") {
  std::set<std::array<double, 8>> seen;
  for (std::uint64_t seed = 0; seed < 1000; ++seed)
    seen.insert(synthface::generate_identity(seed).geometry);
  REQUIRE(seen.size() == 1000);
}

TEST_CASE("mouth curvature strictly decreases with the depression score") {
  for (int emotion = 0; emotion < synthface::kEmotionClasses; ++emotion) {
    const auto relaxed = synthface::detail::face_params(emotion, 0);
    const auto severe = synthface::detail::face_params(emotion, 63);
    REQUIRE(severe.mouth_curve < relaxed.mouth_curve);
    double prev = relaxed.mouth_curve;
    for (int s = 1; s <= 63; ++s) {
      const double cur = synthface::detail::face_params(emotion, s).mouth_curve;
      REQUIRE(cur < prev);
      prev = cur;
    }
  }
}

TEST_CASE("rendering is byte-deterministic") {
  const auto spec = synthface::generate_identity(9);
  const auto a = synthface::render_sample(spec, 2, 17, 555);
  const auto b = synthface::render_sample(spec, 2, 17, 555);
  for (int c = 0; c < 3; ++c) REQUIRE(bit_equal(a.image[c], b.image[c]));
  REQUIRE(a.landmarks == b.landmarks);
}

TEST_CASE("render_sample validates labels") {
  const auto spec = synthface::generate_identity(1);
  REQUIRE_THROWS_AS(synthface::render_sample(spec, 7, 10, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(synthface::render_sample(spec, -1, 10, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(synthface::render_sample(spec, 0, 64, 1), std::invalid_argument);
}

TEST_CASE("landmarks track the analytic positions and stay in frame") {
  const auto spec = synthface::generate_identity(21);
  const auto sample = synthface::render_sample(spec, 0, 10, 777);
  for (const auto& lm : sample.landmarks) {
    REQUIRE(lm[0] > 0.0);
    REQUIRE(lm[0] < 1.0);
    REQUIRE(lm[1] > 0.0);
    REQUIRE(lm[1] < 1.0);
  }
  // eye landmarks are horizontally symmetric before pose: their midpoint x
  // maps to the rotated face center x
  const auto fp = synthface::detail::face_params(0, 10);
  const auto canon = synthface::canonical_landmarks(spec, fp);
  REQUIRE(canon[0][1] == canon[1][1]);
  REQUIRE(canon[0][0] + canon[1][0] == Catch::Approx(1.0));
  // mouth corners symmetric around the nose
  REQUIRE(canon[3][0] + canon[4][0] == Catch::Approx(1.0));
}

TEST_CASE("eye darkness responds to depression via eye openness") {
  const auto spec = synthface::generate_identity(33);
  // same pose seed: images differ only through the deformation
  const auto mild = synthface::render_sample(spec, 0, 0, 42);
  const auto severe = synthface::render_sample(spec, 0, 63, 42);
  double dark_mild = 0.0, dark_severe = 0.0;
  for (std::size_t i = 0; i < mild.image[1].size(); ++i) {
    dark_mild += mild.image[1].re[i] < 0.2 ? 1.0 : 0.0;
    dark_severe += severe.image[1].re[i] < 0.2 ? 1.0 : 0.0;
  }
  // severe depression closes the eyes: fewer dark eye pixels
  REQUIRE(dark_severe < dark_mild);
}

TEST_CASE("make_dataset writes a loadable, identity-disjoint, reproducible set") {
  const std::string dir = "/tmp/lensveil_test_ds";
  fs::remove_all(dir);
  const auto index = synthface::make_dataset(10, 5, {}, 7, dir);
  REQUIRE(index.rows.size() == 50);

  const auto loaded = synthface::load_dataset(dir);
  REQUIRE(loaded.rows.size() == 50);
  REQUIRE(loaded.master_seed == 7);

  // identity-disjoint splits
  std::map<int, std::set<synthface::Split>> id_splits;
  for (const auto& row : loaded.rows) id_splits[row.identity].insert(row.split);
  for (const auto& [id, splits] : id_splits) REQUIRE(splits.size() == 1);
  REQUIRE(!loaded.rows_in(synthface::Split::kTrain).empty());
  REQUIRE(!loaded.rows_in(synthface::Split::kVal).empty());
  REQUIRE(!loaded.rows_in(synthface::Split::kTest).empty());

  // landmark round trip through the CSV
  for (std::size_t r = 0; r < index.rows.size(); ++r)
    for (std::size_t k = 0; k < 10; ++k)
      REQUIRE(std::abs(index.rows[r].landmarks[k] - loaded.rows[r].landmarks[k]) <= 1e-9);

  // regeneration with the same master seed is byte-identical
  const std::string dir2 = "/tmp/lensveil_test_ds2";
  fs::remove_all(dir2);
  synthface::make_dataset(10, 5, {}, 7, dir2);
  for (const auto& row : index.rows) {
    std::ifstream f1(dir + "/" + row.path, std::ios::binary);
    std::ifstream f2(dir2 + "/" + row.path, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(b1 == b2);
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("make_dataset rejects degenerate requests") {
  REQUIRE_THROWS_AS(synthface::make_dataset(1, 5, {}, 7, "/tmp/lv_bad"),
                    std::invalid_argument);
}

TEST_CASE("emotion deformation is independent of identity geometry") {
  // correlation between mouth curvature and each geometry coordinate
  const std::size_t n = 1000;
  std::vector<double> curv(n);
  std::array<std::vector<double>, 8> geom;
  for (auto& g : geom) g.resize(n);
  Rng rng(515);
  for (std::size_t i = 0; i < n; ++i) {
    const auto spec = synthface::generate_identity(rng.raw());
    const int emotion = static_cast<int>(rng.randint(0, 6));
    const int score = static_cast<int>(rng.randint(0, 63));
    curv[i] = synthface::detail::face_params(emotion, score).mouth_curve;
    for (std::size_t k = 0; k < 8; ++k) geom[k][i] = spec.geometry[k];
  }
  auto mean_of = [&](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double cm = mean_of(curv);
  for (std::size_t k = 0; k < 8; ++k) {
    const double gm = mean_of(geom[k]);
    double cov = 0.0, vc = 0.0, vg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      cov += (curv[i] - cm) * (geom[k][i] - gm);
      vc += (curv[i] - cm) * (curv[i] - cm);
      vg += (geom[k][i] - gm) * (geom[k][i] - gm);
    }
    REQUIRE(std::abs(cov / std::sqrt(vc * vg)) < 0.1);
  }
}
