#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "lensveil/neural.hpp"
#include "lensveil/optics.hpp"
#include "lensveil/optim.hpp"
#include "lensveil/synthface.hpp"

namespace lensveil::privacy {

using io::Image3;

// ---- fixed-blur baseline kernels ----

struct BaselinePsf {
  enum class Kind { kGaussian, kDefocus };
  Kind kind = Kind::kGaussian;
  double parameter = 0.0;  // sigma or bokeh diameter, pixels
  Tensor kernel;           // unit sum, center at (size/2, size/2)
};

// Isotropic Gaussian sampled at pixel centers, truncated to the support
// and renormalized.
inline BaselinePsf gaussian_psf(double sigma_px, std::size_t size) {
  require(sigma_px > 0.0, "sigma must be positive");
  require(size >= 3, "kernel support too small");
  BaselinePsf out;
  out.kind = BaselinePsf::Kind::kGaussian;
  out.parameter = sigma_px;
  out.kernel = Tensor::zeros({size, size});
  const double c = static_cast<double>(size / 2);  // exact pixel for either parity
  double total = 0.0;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t col = 0; col < size; ++col) {
      const double dx = static_cast<double>(col) - c;
      const double dy = static_cast<double>(r) - c;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma_px * sigma_px));
      out.kernel.re[r * size + col] = v;
      total += v;
    }
  for (double& v : out.kernel.re) v /= total;
  return out;
}

// Anti-aliased uniform disk (4x4 coverage sampling), unit sum.
inline BaselinePsf defocus_psf(double diameter_px, std::size_t size) {
  require(diameter_px >= 1.0, "bokeh diameter below one pixel");
  require(diameter_px <= static_cast<double>(size), "bokeh diameter exceeds support");
  BaselinePsf out;
  out.kind = BaselinePsf::Kind::kDefocus;
  out.parameter = diameter_px;
  out.kernel = Tensor::zeros({size, size});
  const double c = static_cast<double>(size / 2);
  const double radius = diameter_px / 2.0;
  double total = 0.0;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t col = 0; col < size; ++col) {
      double cover = 0.0;
      for (int sr = 0; sr < 4; ++sr)
        for (int sc = 0; sc < 4; ++sc) {
          const double x = static_cast<double>(col) + (sc + 0.5) / 4.0 - 0.5 - c;
          const double y = static_cast<double>(r) + (sr + 0.5) / 4.0 - 0.5 - c;
          if (x * x + y * y <= radius * radius) cover += 1.0;
        }
      const double v = cover / 16.0;
      out.kernel.re[r * size + col] = v;
      total += v;
    }
  require(total > 0.0, "empty defocus kernel");
  for (double& v : out.kernel.re) v /= total;
  return out;
}

// Identity kernel: used to push clear images through the same render path.
inline Tensor delta_kernel(std::size_t size) {
  Tensor k = Tensor::zeros({size, size});
  k.re[(size / 2) * size + size / 2] = 1.0;
  return k;
}

// ---- non-blind Wiener deconvolution ----

// Per channel: Xf = conj(Hf) Yf / (|Hf|^2 + 1/snr). The PSF is given
// center-origin convention like every kernel here; snr may be infinite.
inline Image3 wiener_deconvolve(const Image3& blurred, const Tensor& psf, double snr) {
  require(snr > 0.0, "snr must be positive");
  double mass = 0.0;
  for (double v : psf.re) mass += std::abs(v);
  require(mass > 0.0, "all-zero PSF");
  const std::size_t rows = psf.shape[0], cols = psf.shape[1];
  require(blurred[0].shape == psf.shape, "psf support must match image");

  // kernel center -> origin, then to the frequency domain
  Tensor shifted = Tensor::zeros(psf.shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      shifted.re[((r + rows / 2) % rows) * cols + (c + cols / 2) % cols] =
          psf.re[r * cols + c];
  auto hf = fft::to_cplx(shifted);
  fft::fft2_pow2(hf.data(), rows, cols, false);
  const double noise_power = std::isinf(snr) ? 0.0 : 1.0 / snr;

  Image3 restored;
  for (int ch = 0; ch < 3; ++ch) {
    auto yf = fft::to_cplx(blurred[static_cast<std::size_t>(ch)]);
    fft::fft2_pow2(yf.data(), rows, cols, false);
    for (std::size_t i = 0; i < yf.size(); ++i) {
      const double denom = std::norm(hf[i]) + noise_power;
      yf[i] = std::conj(hf[i]) * yf[i] / denom;
    }
    fft::fft2_pow2(yf.data(), rows, cols, true);
    Tensor t = Tensor::zeros(psf.shape);
    const double scale = 1.0 / static_cast<double>(t.size());
    for (std::size_t i = 0; i < yf.size(); ++i) t.re[i] = yf[i].real() * scale;
    restored[static_cast<std::size_t>(ch)] = std::move(t);
  }
  return restored;
}

// ---- verification metrics ----

struct VerificationTrial {
  std::vector<double> scores;
  std::vector<std::uint8_t> same;  // 1 for same-identity pairs

  void add(double score, bool same_identity) {
    scores.push_back(score);
    same.push_back(same_identity ? 1 : 0);
  }
};

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

struct RocResult {
  double auc = 0.0;
  std::vector<RocPoint> points;
};

// AUC by the rank statistic (ties count one half), plus the ROC polygon at
// every distinct threshold.
inline RocResult roc_auc(const VerificationTrial& trial) {
  std::size_t n_pos = 0, n_neg = 0;
  for (std::uint8_t s : trial.same) (s ? n_pos : n_neg) += 1;
  require(n_pos >= 1 && n_neg >= 1, "verification needs both pair kinds");

  RocResult out;
  double wins = 0.0;
  for (std::size_t i = 0; i < trial.scores.size(); ++i) {
    if (!trial.same[i]) continue;
    for (std::size_t j = 0; j < trial.scores.size(); ++j) {
      if (trial.same[j]) continue;
      if (trial.scores[i] > trial.scores[j]) wins += 1.0;
      else if (trial.scores[i] == trial.scores[j]) wins += 0.5;
    }
  }
  out.auc = wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));

  std::vector<double> thresholds = trial.scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  for (double th : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < trial.scores.size(); ++i) {
      if (trial.scores[i] >= th) (trial.same[i] ? tp : fp) += 1;
    }
    out.points.push_back({th, static_cast<double>(fp) / static_cast<double>(n_neg),
                          static_cast<double>(tp) / static_cast<double>(n_pos)});
  }
  return out;
}

struct RegressionMetrics {
  double mae = 0.0;
  double rmse = 0.0;
};

inline RegressionMetrics regression_metrics(const std::vector<double>& preds,
                                            const std::vector<double>& truths) {
  require(!preds.empty() && preds.size() == truths.size(), "empty or mismatched inputs");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double d = preds[i] - truths[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  const double n = static_cast<double>(preds.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

// ---- probe recognizer ----

// The adversarial identity verifier: a fresh embed net trained with a
// standard triplet loss (squared euclidean on L2-normalized embeddings)
// on images pushed through a given kernel set.
struct ProbeConfig {
  int epochs = 10;
  int batch_triplets = 8;
  double lr = 1e-3;
  double margin = 0.2;
  double eval_depth_m = 1.0;
  double noise_sigma = 0.01;
  std::uint64_t seed = 1;
};

namespace detail {

inline ad::Var normalized_row(ad::Tape& t, ad::Var embeddings, std::size_t row) {
  const std::size_t dim = embeddings.value().shape[1];
  std::vector<std::size_t> idx(dim);
  for (std::size_t i = 0; i < dim; ++i) idx[i] = row * dim + i;
  ad::Var e = gather(embeddings, idx);
  ad::Var n = vsqrt(ad::max_const(sq_norm(e), 1e-24));
  return e / n;
}

inline std::vector<double> plain_embedding(const neural::EmbedNet& net, const Image3& img) {
  ad::Tape t;
  std::vector<double> flat;
  flat.reserve(3 * img[0].size());
  for (const Tensor& ch : img) flat.insert(flat.end(), ch.re.begin(), ch.re.end());
  const std::size_t dim = flat.size();
  ad::Var x = t.constant(Tensor::from({1, dim}, std::move(flat)));
  auto vars = neural::to_vars(t, const_cast<neural::EmbedNet&>(net), false);
  ad::Var e = neural::embed_forward(t, vars, x);
  return e.value().re;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-24);
}

}  // namespace detail

// Push every dataset row through one kernel set (single render path); this
// is the "captured dataset" a given camera produces.
inline std::vector<Image3> render_all(const synthface::DatasetIndex& data,
                                      const std::vector<Image3>& images,
                                      const std::array<Tensor, 3>& kernels, double noise_sigma,
                                      std::uint64_t seed) {
  std::vector<Image3> out(data.rows.size());
  optics::PsfStack stack;
  stack.psfs = kernels;
  for (std::size_t r = 0; r < data.rows.size(); ++r)
    out[r] = optics::render(images[r], stack, noise_sigma, mix_seed(seed, r)).channels;
  return out;
}

// Trains the probe on pre-rendered training-split images.
inline neural::EmbedNet train_probe(const synthface::DatasetIndex& data,
                                    const std::vector<Image3>& rendered,
                                    const ProbeConfig& cfg) {
  const auto train_rows = data.rows_in(synthface::Split::kTrain);
  require(train_rows.size() >= 4, "probe training needs a few samples");

  // identity -> rows
  std::vector<std::vector<std::size_t>> by_id;
  for (std::size_t r : train_rows) {
    const auto id = static_cast<std::size_t>(data.rows[r].identity);
    if (by_id.size() <= id) by_id.resize(id + 1);
    by_id[id].push_back(r);
  }
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < by_id.size(); ++i)
    if (by_id[i].size() >= 2) ids.push_back(i);
  require(ids.size() >= 2, "probe training needs two identities with pairs");

  Rng init_rng(mix_seed(cfg.seed, 0x9906eULL));
  neural::EmbedNet net;
  net.init(3 * rendered[train_rows[0]][0].size(), init_rng);

  std::map<std::string, opt::AdamState> adam;
  opt::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 0xe90c0000ULL + static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> anchors = train_rows;
    for (std::size_t i = anchors.size(); i > 1; --i)
      std::swap(anchors[i - 1], anchors[static_cast<std::size_t>(rng.randint(
                                    0, static_cast<std::int64_t>(i) - 1))]);

    for (std::size_t start = 0; start < anchors.size();
         start += static_cast<std::size_t>(cfg.batch_triplets)) {
      const std::size_t stop =
          std::min(anchors.size(), start + static_cast<std::size_t>(cfg.batch_triplets));
      ad::Tape tape;
      auto vars = neural::to_vars(tape, net, true);

      std::vector<ad::Var> flat_rows;
      struct Triplet {
        std::size_t a, p, n;
      };
      std::vector<Triplet> triplets;
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t a = anchors[i];
        const auto aid = static_cast<std::size_t>(data.rows[a].identity);
        if (by_id[aid].size() < 2) continue;
        std::size_t p = a;
        while (p == a)
          p = by_id[aid][static_cast<std::size_t>(
              rng.randint(0, static_cast<std::int64_t>(by_id[aid].size()) - 1))];
        std::size_t nid = aid;
        while (nid == aid)
          nid = ids[static_cast<std::size_t>(
              rng.randint(0, static_cast<std::int64_t>(ids.size()) - 1))];
        const std::size_t n = by_id[nid][static_cast<std::size_t>(
            rng.randint(0, static_cast<std::int64_t>(by_id[nid].size()) - 1))];
        Triplet tr;
        tr.a = flat_rows.size();
        for (std::size_t r : {a, p, n}) {
          std::vector<double> flat;
          for (const Tensor& ch : rendered[r])
            flat.insert(flat.end(), ch.re.begin(), ch.re.end());
          const std::size_t dim = flat.size();
          flat_rows.push_back(tape.constant(Tensor::from({1, dim}, std::move(flat))));
        }
        tr.p = tr.a + 1;
        tr.n = tr.a + 2;
        triplets.push_back(tr);
      }
      if (triplets.empty()) continue;

      ad::Var x = tape.concat(flat_rows);
      x = reshape(x, {flat_rows.size(), rendered[anchors[start]][0].size() * 3});
      ad::Var emb = neural::embed_forward(tape, vars, x);

      ad::Var loss;
      for (std::size_t k = 0; k < triplets.size(); ++k) {
        ad::Var ea = detail::normalized_row(tape, emb, triplets[k].a);
        ad::Var ep = detail::normalized_row(tape, emb, triplets[k].p);
        ad::Var en = detail::normalized_row(tape, emb, triplets[k].n);
        ad::Var term =
            relu(affine(sq_norm(ea - ep) - sq_norm(ea - en), 1.0, cfg.margin));
        loss = k == 0 ? term : loss + term;
      }
      loss = affine(loss, 1.0 / static_cast<double>(triplets.size()));

      auto grads = tape.backward(loss);
      std::map<std::string, std::pair<ad::Var, Tensor*>> params{
          {"l1.w", {vars.l1.w, &net.l1.w}}, {"l1.b", {vars.l1.b, &net.l1.b}},
          {"l2.w", {vars.l2.w, &net.l2.w}}, {"l2.b", {vars.l2.b, &net.l2.b}}};
      for (auto& [name, pv] : params) {
        auto it = grads.find(pv.first.id);
        if (it != grads.end()) opt::adam_step(*pv.second, it->second, adam[name], adam_cfg);
      }
    }
  }
  return net;
}

// 10 positive and 10 negative pairs per identity, fixed seed.
struct VerificationPairs {
  struct Pair {
    std::size_t row_a, row_b;
    bool same;
  };
  std::vector<Pair> pairs;
};

inline VerificationPairs build_verification_pairs(const synthface::DatasetIndex& data,
                                                  int per_id_pos, int per_id_neg,
                                                  std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_id;
  for (std::size_t r = 0; r < data.rows.size(); ++r) {
    const auto id = static_cast<std::size_t>(data.rows[r].identity);
    if (by_id.size() <= id) by_id.resize(id + 1);
    by_id[id].push_back(r);
  }
  VerificationPairs out;
  Rng rng(mix_seed(seed, 0x9a125ULL));
  for (std::size_t id = 0; id < by_id.size(); ++id) {
    const auto& rows = by_id[id];
    if (rows.size() < 2) continue;
    for (int k = 0; k < per_id_pos; ++k) {
      const std::size_t a = rows[static_cast<std::size_t>(
          rng.randint(0, static_cast<std::int64_t>(rows.size()) - 1))];
      std::size_t b = a;
      while (b == a)
        b = rows[static_cast<std::size_t>(
            rng.randint(0, static_cast<std::int64_t>(rows.size()) - 1))];
      out.pairs.push_back({a, b, true});
    }
    for (int k = 0; k < per_id_neg; ++k) {
      const std::size_t a = rows[static_cast<std::size_t>(
          rng.randint(0, static_cast<std::int64_t>(rows.size()) - 1))];
      std::size_t other = id;
      while (other == id || by_id[other].empty())
        other = static_cast<std::size_t>(
            rng.randint(0, static_cast<std::int64_t>(by_id.size()) - 1));
      const std::size_t b = by_id[other][static_cast<std::size_t>(
          rng.randint(0, static_cast<std::int64_t>(by_id[other].size()) - 1))];
      out.pairs.push_back({a, b, false});
    }
  }
  return out;
}

// Cosine-similarity verification of a probe over pre-rendered images.
inline RocResult probe_verification(const neural::EmbedNet& probe,
                                    const std::vector<Image3>& rendered,
                                    const VerificationPairs& pairs) {
  std::map<std::size_t, std::vector<double>> cache;
  auto embed_of = [&](std::size_t row) -> const std::vector<double>& {
    auto it = cache.find(row);
    if (it == cache.end())
      it = cache.emplace(row, detail::plain_embedding(probe, rendered[row])).first;
    return it->second;
  };
  VerificationTrial trial;
  for (const auto& p : pairs.pairs)
    trial.add(detail::cosine(embed_of(p.row_a), embed_of(p.row_b)), p.same);
  return roc_auc(trial);
}

// ---- report rendering ----

inline void write_roc_csv(const std::string& path, const RocResult& roc) {
  std::ofstream f(path);
  io::check_stream(f, path);
  f << "threshold,fpr,tpr\n";
  f.precision(17);
  for (const auto& p : roc.points) f << p.threshold << "," << p.fpr << "," << p.tpr << "\n";
}

struct TradeoffRow {
  std::string method;
  double param = 0.0;
  double auc_probe = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
};

inline void write_tradeoff_csv(const std::string& path, const std::vector<TradeoffRow>& rows) {
  std::ofstream f(path);
  io::check_stream(f, path);
  f << "method,param,auc_probe,mae,rmse\n";
  f.precision(17);
  for (const auto& r : rows)
    f << r.method << "," << r.param << "," << r.auc_probe << "," << r.mae << "," << r.rmse
      << "\n";
}

// Scatter of prediction error against probe AUC, one labeled marker per
// method.
inline void write_tradeoff_svg(const std::string& path, const std::vector<TradeoffRow>& rows) {
  const int w = 640, h = 480, margin = 60;
  double mae_lo = 1e30, mae_hi = -1e30;
  for (const auto& r : rows) {
    mae_lo = std::min(mae_lo, r.mae);
    mae_hi = std::max(mae_hi, r.mae);
  }
  if (rows.empty()) {
    mae_lo = 0.0;
    mae_hi = 1.0;
  }
  const double pad = std::max(0.5, 0.08 * (mae_hi - mae_lo));
  mae_lo -= pad;
  mae_hi += pad;
  auto sx = [&](double mae) {
    return margin + (mae - mae_lo) / (mae_hi - mae_lo) * (w - 2 * margin);
  };
  auto sy = [&](double auc) { return h - margin - (auc - 0.4) / 0.6 * (h - 2 * margin); };

  std::ofstream f(path);
  io::check_stream(f, path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  f << "<rect width='100%' height='100%' fill='white'/>\n";
  f << "<line x1='" << margin << "' y1='" << h - margin << "' x2='" << w - margin << "' y2='"
    << h - margin << "' stroke='black'/>\n";
  f << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin << "' y2='"
    << h - margin << "' stroke='black'/>\n";
  f << "<text x='" << w / 2 << "' y='" << h - 15 << "' text-anchor='middle'>MAE</text>\n";
  f << "<text x='18' y='" << h / 2 << "' transform='rotate(-90 18 " << h / 2
    << ")' text-anchor='middle'>probe AUC</text>\n";
  for (double auc = 0.4; auc <= 1.001; auc += 0.1)
    f << "<text x='" << margin - 8 << "' y='" << sy(auc) + 4
      << "' text-anchor='end' font-size='11'>" << auc << "</text>\n";
  for (const auto& r : rows) {
    f << "<circle cx='" << sx(r.mae) << "' cy='" << sy(r.auc_probe)
      << "' r='5' fill='steelblue'/>\n";
    f << "<text x='" << sx(r.mae) + 7 << "' y='" << sy(r.auc_probe) - 5 << "' font-size='11'>"
      << r.method << (r.param > 0 ? " " + std::to_string(static_cast<int>(r.param)) : "")
      << "</text>\n";
  }
  f << "</svg>\n";
}

}  // namespace lensveil::privacy
