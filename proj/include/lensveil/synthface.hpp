#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lensveil/common.hpp"
#include "lensveil/image_io.hpp"
#include "lensveil/tensor.hpp"

namespace lensveil::synthface {

using io::Image3;

inline constexpr int kEmotionClasses = 7;
inline constexpr int kLandmarks = 5;  // eye centers x2, nose tip, mouth corners x2
inline constexpr std::size_t kSceneSize = 64;
inline constexpr int kMaxScore = 63;

// Facial geometry in normalized image coordinates. Ranges are clamped at
// generation time; identity lives in the geometry, while skin tone is kept
// in a narrow band and per-sample illumination jitter is wider than it, so
// the mean color of a blurred image does not give identity away for free.
struct IdentitySpec {
  int id = 0;
  std::array<double, 8> geometry{};  // face_rx, face_ry, eye_spacing, eye_height,
                                     // nose_length, mouth_width, brow_height, jaw_curvature
  std::array<double, 3> texture{};   // base RGB skin tone
};

struct GeometryRange {
  double lo, hi;
};

inline constexpr std::array<GeometryRange, 8> kGeometryRanges{{
    {0.24, 0.34},   // face_rx
    {0.30, 0.42},   // face_ry
    {0.09, 0.17},   // eye_spacing
    {0.05, 0.13},   // eye_height
    {0.05, 0.13},   // nose_length
    {0.06, 0.14},   // mouth_width
    {0.025, 0.065}, // brow_height
    {0.80, 1.20},   // jaw_curvature
}};

inline constexpr std::array<GeometryRange, 3> kToneRanges{{
    {0.64, 0.68},  // r
    {0.53, 0.57},  // g
    {0.46, 0.50},  // b
}};

struct SyntheticSample {
  Image3 image;
  int identity = 0;
  int emotion = 0;
  int depression_score = 0;
  std::array<std::array<double, 2>, kLandmarks> landmarks{};
  std::uint64_t seed = 0;
};

inline IdentitySpec generate_identity(std::uint64_t rng_seed) {
  Rng rng(mix_seed(rng_seed, 0xfacef00dULL));
  IdentitySpec spec;
  spec.id = static_cast<int>(rng_seed & 0x7fffffffULL);
  for (std::size_t i = 0; i < spec.geometry.size(); ++i)
    spec.geometry[i] = rng.uniform(kGeometryRanges[i].lo, kGeometryRanges[i].hi);
  for (std::size_t i = 0; i < spec.texture.size(); ++i)
    spec.texture[i] = rng.uniform(kToneRanges[i].lo, kToneRanges[i].hi);
  return spec;
}

namespace detail {

struct EmotionShape {
  double mouth_curve;  // >0 corners up
  double brow_angle;   // radians, >0 outer end raised
  double eye_open;
};

inline constexpr std::array<EmotionShape, kEmotionClasses> kEmotionTable{{
    {0.000, 0.00, 1.00},   // neutral
    {0.035, 0.12, 0.95},   // happy
    {-0.030, -0.17, 0.85}, // sad
    {0.005, 0.28, 1.00},   // surprise
    {-0.022, -0.30, 0.80}, // anger
    {-0.015, -0.10, 0.72}, // disgust
    {-0.005, 0.22, 0.97},  // fear
}};

// Deformation parameters actually drawn on the face. Mouth curvature is
// strictly decreasing in the depression score.
struct FaceParams {
  double mouth_curve = 0.0;
  double eye_open = 1.0;
  double brow_angle = 0.0;
};

inline FaceParams face_params(int emotion, int score) {
  const EmotionShape& e = kEmotionTable[static_cast<std::size_t>(emotion)];
  FaceParams p;
  p.mouth_curve = e.mouth_curve - 0.0011 * static_cast<double>(score);
  p.eye_open = e.eye_open * (1.0 - 0.0062 * static_cast<double>(score));
  if (p.eye_open < 0.22) p.eye_open = 0.22;
  p.brow_angle = e.brow_angle;
  return p;
}

struct Pose {
  double angle = 0.0;  // radians
  double dx = 0.0;     // normalized units
  double dy = 0.0;
  double gain = 1.0;   // illumination

  // canonical face coords -> image coords
  std::array<double, 2> fwd(double x, double y) const {
    const double cx = x - 0.5, cy = y - 0.5;
    const double ca = std::cos(angle), sa = std::sin(angle);
    return {0.5 + ca * cx - sa * cy + dx, 0.5 + sa * cx + ca * cy + dy};
  }

  // image coords -> canonical face coords
  std::array<double, 2> inv(double x, double y) const {
    const double cx = x - 0.5 - dx, cy = y - 0.5 - dy;
    const double ca = std::cos(angle), sa = std::sin(angle);
    return {0.5 + ca * cx + sa * cy, 0.5 - sa * cx + ca * cy};
  }
};

inline bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double u = (x - cx) / rx, v = (y - cy) / ry;
  return u * u + v * v <= 1.0;
}

inline bool in_segment(double x, double y, double x0, double y0, double x1, double y1,
                       double half_width) {
  const double vx = x1 - x0, vy = y1 - y0;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((x - x0) * vx + (y - y0) * vy) / len2 : 0.0;
  t = t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
  const double px = x0 + t * vx, py = y0 + t * vy;
  return (x - px) * (x - px) + (y - py) * (y - py) <= half_width * half_width;
}

struct Rgb {
  double r, g, b;
};

// Flat-shaded face in canonical coordinates. Painted back to front.
inline Rgb shade(const IdentitySpec& id, const FaceParams& fp, double x, double y) {
  const double face_rx = id.geometry[0], face_ry = id.geometry[1];
  const double eye_dx = id.geometry[2], eye_dy = id.geometry[3];
  const double nose_len = id.geometry[4], mouth_w = id.geometry[5];
  const double brow_h = id.geometry[6], jaw = id.geometry[7];
  const double cx = 0.5, cy = 0.5;

  Rgb out{0.12, 0.12, 0.14};  // background

  const double ry_here = y > cy ? face_ry * jaw : face_ry;
  if (!in_ellipse(x, y, cx, cy, face_rx, ry_here)) return out;
  out = {id.texture[0], id.texture[1], id.texture[2]};

  const double eye_y = cy - eye_dy;
  const double eye_rx = 0.042 * (face_rx / 0.29);
  const double eye_ry = eye_rx * 0.62 * fp.eye_open;
  for (double side : {-1.0, 1.0}) {
    const double ex = cx + side * eye_dx;
    if (in_ellipse(x, y, ex, eye_y, eye_rx, std::max(eye_ry, 1e-4))) {
      out = {0.10, 0.08, 0.08};
      return out;
    }
    // brow: straight stroke above the eye, outer end tilted by emotion
    const double bw = eye_rx * 1.25;
    const double by = eye_y - brow_h - eye_rx * 0.35;
    const double tilt = side * std::tan(fp.brow_angle) * bw;
    if (in_segment(x, y, ex - bw, by + (side < 0 ? tilt : 0.0), ex + bw,
                   by + (side > 0 ? tilt : 0.0), 0.011)) {
      out = {0.16, 0.12, 0.10};
      return out;
    }
  }

  // nose: short vertical stroke ending at the tip
  if (in_segment(x, y, cx, cy - 0.01, cx, cy + nose_len, 0.010)) {
    out = {id.texture[0] * 0.72, id.texture[1] * 0.70, id.texture[2] * 0.70};
    return out;
  }

  // mouth: parabolic band; corners sit at curve value of mouth_curve above
  // the center when the curve is positive (a smile)
  const double mouth_y = cy + nose_len + 0.105;
  if (std::abs(x - cx) <= mouth_w) {
    const double t = (x - cx) / mouth_w;  // [-1, 1]
    const double curve_y = mouth_y - fp.mouth_curve * (t * t - 0.5) * 2.0;
    if (std::abs(y - curve_y) <= 0.014) {
      out = {0.55, 0.22, 0.22};
      return out;
    }
  }
  return out;
}

}  // namespace detail

// Closed-form landmark positions in canonical coordinates (before pose).
inline std::array<std::array<double, 2>, kLandmarks> canonical_landmarks(
    const IdentitySpec& id, const detail::FaceParams& fp) {
  const double cx = 0.5, cy = 0.5;
  const double eye_dx = id.geometry[2], eye_dy = id.geometry[3];
  const double nose_len = id.geometry[4], mouth_w = id.geometry[5];
  const double mouth_y = cy + nose_len + 0.105;
  const double corner_y = mouth_y - fp.mouth_curve;  // t = +-1 -> curve-0.5*2 = 1
  return {{{cx - eye_dx, cy - eye_dy},
           {cx + eye_dx, cy - eye_dy},
           {cx, cy + nose_len},
           {cx - mouth_w, corner_y},
           {cx + mouth_w, corner_y}}};
}

inline SyntheticSample render_sample(const IdentitySpec& spec, int emotion, int depression_score,
                                     std::uint64_t pose_jitter_seed) {
  require(emotion >= 0 && emotion < kEmotionClasses, "emotion class out of range");
  require(depression_score >= 0 && depression_score <= kMaxScore,
          "depression score out of range");
  const detail::FaceParams fp = detail::face_params(emotion, depression_score);

  Rng rng(mix_seed(pose_jitter_seed, 0x9a5eULL));
  detail::Pose pose;
  pose.angle = rng.uniform(-5.0, 5.0) * M_PI / 180.0;
  pose.dx = rng.uniform(-3.0, 3.0) / static_cast<double>(kSceneSize);
  pose.dy = rng.uniform(-3.0, 3.0) / static_cast<double>(kSceneSize);
  pose.gain = rng.uniform(0.82, 1.18);

  SyntheticSample sample;
  sample.identity = spec.id;
  sample.emotion = emotion;
  sample.depression_score = depression_score;
  sample.seed = pose_jitter_seed;
  for (auto& ch : sample.image) ch = Tensor::zeros({kSceneSize, kSceneSize});

  const double px = 1.0 / static_cast<double>(kSceneSize);
  for (std::size_t r = 0; r < kSceneSize; ++r) {
    for (std::size_t c = 0; c < kSceneSize; ++c) {
      // 2x2 supersampling for anti-aliased edges
      double acc_r = 0.0, acc_g = 0.0, acc_b = 0.0;
      for (int sr = 0; sr < 2; ++sr)
        for (int sc = 0; sc < 2; ++sc) {
          const double ix = (static_cast<double>(c) + 0.25 + 0.5 * sc) * px;
          const double iy = (static_cast<double>(r) + 0.25 + 0.5 * sr) * px;
          const auto [fx, fy] = pose.inv(ix, iy);
          const detail::Rgb col = detail::shade(spec, fp, fx, fy);
          acc_r += col.r;
          acc_g += col.g;
          acc_b += col.b;
        }
      const std::size_t i = r * kSceneSize + c;
      sample.image[0].re[i] = std::min(1.0, acc_r * 0.25 * pose.gain);
      sample.image[1].re[i] = std::min(1.0, acc_g * 0.25 * pose.gain);
      sample.image[2].re[i] = std::min(1.0, acc_b * 0.25 * pose.gain);
    }
  }

  const auto lm = canonical_landmarks(spec, fp);
  for (int k = 0; k < kLandmarks; ++k) {
    const auto [x, y] = pose.fwd(lm[k][0], lm[k][1]);
    sample.landmarks[k] = {x, y};
  }
  return sample;
}

// ---- dataset persistence ----

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

struct DatasetIndex {
  struct Row {
    std::string path;
    int identity = 0;
    int emotion = 0;
    int score = 0;
    std::array<double, 2 * kLandmarks> landmarks{};
    Split split = Split::kTrain;
    std::uint64_t seed = 0;
  };
  std::string root;
  std::uint64_t master_seed = 0;
  std::vector<Row> rows;

  std::vector<std::size_t> rows_in(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].split == s) out.push_back(i);
    return out;
  }

  Image3 load_image(std::size_t row) const {
    return io::read_ppm(root + "/" + rows[row].path);
  }
};

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    default: return "test";
  }
}

inline constexpr const char* kManifestColumns =
    "path,identity,emotion,score,"
    "lm0x,lm0y,lm1x,lm1y,lm2x,lm2y,lm3x,lm3y,lm4x,lm4y,split,seed";

inline DatasetIndex make_dataset(std::size_t n_identities, std::size_t samples_per_id,
                                 SplitSpec splits, std::uint64_t master_seed,
                                 const std::string& out_dir) {
  require(n_identities >= 2, "need at least two identities");
  require(samples_per_id >= 1, "need at least one sample per identity");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  // identity-disjoint splits; val and test take their floors (at least one
  // identity each), train keeps the remainder
  const auto n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(splits.val * static_cast<double>(n_identities)));
  const auto n_test = std::max<std::size_t>(
      1, static_cast<std::size_t>(splits.test * static_cast<double>(n_identities)));
  require(n_val + n_test < n_identities, "splits leave no identities for training");
  const std::size_t n_train = n_identities - n_val - n_test;

  DatasetIndex index;
  index.root = out_dir;
  index.master_seed = master_seed;

  std::ofstream manifest(out_dir + "/manifest.csv");
  io::check_stream(manifest, out_dir + "/manifest.csv");
  manifest.precision(17);
  manifest << "# master_seed " << master_seed << "\n" << kManifestColumns << "\n";

  for (std::size_t i = 0; i < n_identities; ++i) {
    IdentitySpec spec = generate_identity(mix_seed(master_seed, i));
    spec.id = static_cast<int>(i);
    const Split split =
        i < n_train ? Split::kTrain : (i < n_train + n_val ? Split::kVal : Split::kTest);
    for (std::size_t s = 0; s < samples_per_id; ++s) {
      const std::uint64_t sample_seed = mix_seed(master_seed, 0x10000ULL + i * 4096 + s);
      Rng label_rng(sample_seed);
      const int emotion = static_cast<int>(label_rng.randint(0, kEmotionClasses - 1));
      const int score = static_cast<int>(label_rng.randint(0, kMaxScore));
      SyntheticSample sample = render_sample(spec, emotion, score, sample_seed);
      sample.identity = spec.id;

      std::ostringstream name;
      name << "id" << i << "_s" << s << ".ppm";
      io::write_ppm(out_dir + "/" + name.str(), sample.image);

      DatasetIndex::Row row;
      row.path = name.str();
      row.identity = spec.id;
      row.emotion = emotion;
      row.score = score;
      for (int k = 0; k < kLandmarks; ++k) {
        row.landmarks[2 * k] = sample.landmarks[k][0];
        row.landmarks[2 * k + 1] = sample.landmarks[k][1];
      }
      row.split = split;
      row.seed = sample_seed;
      index.rows.push_back(row);

      manifest << row.path << "," << row.identity << "," << row.emotion << "," << row.score;
      for (double v : row.landmarks) manifest << "," << v;
      manifest << "," << split_name(split) << "," << row.seed << "\n";
    }
  }
  io::check_stream(manifest, out_dir + "/manifest.csv");
  return index;
}

inline DatasetIndex load_dataset(const std::string& dir) {
  std::ifstream f(dir + "/manifest.csv");
  if (!f.good()) throw std::runtime_error("cannot open manifest in " + dir);
  DatasetIndex index;
  index.root = dir;
  std::string line;
  std::getline(f, line);
  if (line.rfind("# master_seed ", 0) != 0) throw std::runtime_error("bad manifest header");
  index.master_seed = std::stoull(line.substr(14));
  std::getline(f, line);  // column header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    DatasetIndex::Row row;
    std::getline(ss, row.path, ',');
    auto next = [&]() {
      std::getline(ss, field, ',');
      return field;
    };
    row.identity = std::stoi(next());
    row.emotion = std::stoi(next());
    row.score = std::stoi(next());
    for (double& v : row.landmarks) v = std::stod(next());
    const std::string sp = next();
    row.split = sp == "train" ? Split::kTrain : (sp == "val" ? Split::kVal : Split::kTest);
    row.seed = std::stoull(next());
    index.rows.push_back(row);
  }
  return index;
}

}  // namespace lensveil::synthface
