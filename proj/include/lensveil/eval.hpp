#pragma once

#include <array>
#include <string>
#include <vector>

#include "lensveil/pipeline.hpp"
#include "lensveil/privacy.hpp"

namespace lensveil::eval {

using io::Image3;

inline constexpr double kPaperImageSide = 256.0;  // blur parameters are quoted at this size

// Block-sum downsample outside the tape (kernel mass preserved).
inline Tensor box_down_plain(const Tensor& t, int factor) {
  ad::Tape tape;
  return ad::box_down_sum(tape.constant(t), factor).value();
}

struct MethodSpec {
  std::string name;            // "none", "gaussian", "defocus", "lens"
  double param_raw = 0.0;      // parameter at paper scale
  double param_scaled = 0.0;   // parameter after rescaling to the scene size
  bool param_clamped = false;  // defocus diameter clipped to the support
  std::array<Tensor, 3> kernels;
};

inline MethodSpec clear_method(std::size_t scene_size) {
  MethodSpec m;
  m.name = "none";
  const Tensor k = privacy::delta_kernel(scene_size);
  m.kernels = {k, k, k};
  return m;
}

inline MethodSpec gaussian_method(double sigma_paper, std::size_t scene_size) {
  MethodSpec m;
  m.name = "gaussian";
  m.param_raw = sigma_paper;
  m.param_scaled = sigma_paper * static_cast<double>(scene_size) / kPaperImageSide;
  const Tensor k = privacy::gaussian_psf(m.param_scaled, scene_size).kernel;
  m.kernels = {k, k, k};
  return m;
}

// Diameters that rescale beyond the support are clipped to it (the disk
// then covers the whole frame); the raw parameter stays in the reports.
inline MethodSpec defocus_method(double diameter_paper, std::size_t scene_size) {
  MethodSpec m;
  m.name = "defocus";
  m.param_raw = diameter_paper;
  m.param_scaled = diameter_paper * static_cast<double>(scene_size) / kPaperImageSide;
  if (m.param_scaled > static_cast<double>(scene_size)) {
    m.param_scaled = static_cast<double>(scene_size);
    m.param_clamped = true;
  }
  const Tensor k = privacy::defocus_psf(m.param_scaled, scene_size).kernel;
  m.kernels = {k, k, k};
  return m;
}

inline MethodSpec lens_method(pipeline::TrainEnv& env, const Tensor& alpha, double depth_m) {
  MethodSpec m;
  m.name = "lens";
  m.kernels = pipeline::lens_kernels(env, alpha, depth_m);
  return m;
}

// ---- lightweight utility protocol ----

// Identical for every method: a fresh embed net plus a linear score head,
// trained with MSE on normalized scores over the method's captured images.
// Reported MAE/RMSE come from the test split.
struct UtilityConfig {
  int epochs = 12;
  int batch = 16;
  double lr = 3e-3;
  std::uint64_t seed = 11;
};

inline privacy::RegressionMetrics utility_metrics(const synthface::DatasetIndex& data,
                                                  const std::vector<Image3>& rendered,
                                                  const UtilityConfig& cfg) {
  const auto train_rows = data.rows_in(synthface::Split::kTrain);
  const auto test_rows = data.rows_in(synthface::Split::kTest);
  require(!train_rows.empty() && !test_rows.empty(), "utility protocol needs train and test");

  Rng init_rng(mix_seed(cfg.seed, 0x07117ULL));
  neural::EmbedNet net;
  net.init(3 * rendered[train_rows[0]][0].size(), init_rng);
  neural::Dense head;
  head.init(neural::kEmbedDim, 1, init_rng);

  std::map<std::string, opt::AdamState> adam;
  opt::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;

  auto flat_row = [&](ad::Tape& tape, std::size_t row) {
    std::vector<double> flat;
    for (const Tensor& ch : rendered[row]) flat.insert(flat.end(), ch.re.begin(), ch.re.end());
    const std::size_t dim = flat.size();
    return tape.constant(Tensor::from({1, dim}, std::move(flat)));
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 0xab0000ULL + static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order = train_rows;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.randint(
                                  0, static_cast<std::int64_t>(i) - 1))]);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      ad::Tape tape;
      auto net_vars = neural::to_vars(tape, net, true);
      auto head_vars = neural::to_vars(tape, head, true);
      std::vector<ad::Var> rows;
      Tensor truth = Tensor::zeros({stop - start});
      for (std::size_t i = start; i < stop; ++i) {
        rows.push_back(flat_row(tape, order[i]));
        truth.re[i - start] = static_cast<double>(data.rows[order[i]].score) / 63.0;
      }
      ad::Var x = reshape(tape.concat(rows), {stop - start, rendered[order[start]][0].size() * 3});
      ad::Var emb = neural::embed_forward(tape, net_vars, x);
      ad::Var pred = reshape(neural::dense_forward(tape, head_vars, emb), {stop - start});
      ad::Var loss = neural::loss_score(pred, tape.constant(truth));
      auto grads = tape.backward(loss);
      auto update = [&](const std::string& name, ad::Var v, Tensor& t) {
        auto it = grads.find(v.id);
        if (it != grads.end()) opt::adam_step(t, it->second, adam[name], adam_cfg);
      };
      update("l1.w", net_vars.l1.w, net.l1.w);
      update("l1.b", net_vars.l1.b, net.l1.b);
      update("l2.w", net_vars.l2.w, net.l2.w);
      update("l2.b", net_vars.l2.b, net.l2.b);
      update("h.w", head_vars.w, head.w);
      update("h.b", head_vars.b, head.b);
    }
  }

  std::vector<double> preds, truths;
  {
    ad::Tape tape;
    auto net_vars = neural::to_vars(tape, net, false);
    auto head_vars = neural::to_vars(tape, head, false);
    std::vector<ad::Var> rows;
    for (std::size_t r : test_rows) rows.push_back(flat_row(tape, r));
    ad::Var x = reshape(tape.concat(rows), {test_rows.size(), rendered[test_rows[0]][0].size() * 3});
    ad::Var emb = neural::embed_forward(tape, net_vars, x);
    ad::Var pred = neural::dense_forward(tape, head_vars, emb);
    for (std::size_t i = 0; i < test_rows.size(); ++i) {
      preds.push_back(neural::clamp_score(pred.value().re[i] * 63.0));
      truths.push_back(static_cast<double>(data.rows[test_rows[i]].score));
    }
  }
  return privacy::regression_metrics(preds, truths);
}

// ---- full method evaluation ----

struct SweepConfig {
  privacy::ProbeConfig probe;
  UtilityConfig utility;
  int pairs_per_id = 10;
  double noise_sigma = 0.01;
  std::uint64_t seed = 17;
};

struct MethodReport {
  MethodSpec method;
  double probe_auc = 0.0;
  privacy::RegressionMetrics utility;
  privacy::RocResult roc;
};

inline MethodReport evaluate_method(const synthface::DatasetIndex& data,
                                    const std::vector<Image3>& images, const MethodSpec& method,
                                    const SweepConfig& cfg) {
  MethodReport report;
  report.method = method;
  const auto rendered =
      privacy::render_all(data, images, method.kernels, cfg.noise_sigma, mix_seed(cfg.seed, 1));
  privacy::ProbeConfig probe_cfg = cfg.probe;
  probe_cfg.noise_sigma = cfg.noise_sigma;
  const neural::EmbedNet probe = privacy::train_probe(data, rendered, probe_cfg);
  const auto pairs =
      privacy::build_verification_pairs(data, cfg.pairs_per_id, cfg.pairs_per_id, cfg.seed);
  report.roc = privacy::probe_verification(probe, rendered, pairs);
  report.probe_auc = report.roc.auc;
  report.utility = utility_metrics(data, rendered, cfg.utility);
  return report;
}

// ---- the non-blind deconvolution attack ----

struct AttackReport {
  double probe_auc = 0.0;  // verification on restored images, clear-trained probe
  privacy::RocResult roc;
};

// The attacker knows the PSF set, deconvolves every captured image, and a
// probe trained on clear images is scored on the restorations.
inline AttackReport wiener_attack(const synthface::DatasetIndex& data,
                                  const std::vector<Image3>& images, const MethodSpec& method,
                                  const neural::EmbedNet& clear_probe, double snr,
                                  const SweepConfig& cfg) {
  const auto captured =
      privacy::render_all(data, images, method.kernels, cfg.noise_sigma, mix_seed(cfg.seed, 2));
  const std::size_t scene = images[0][0].shape[0];
  std::array<Tensor, 3> kernels = method.kernels;
  for (Tensor& k : kernels) {
    if (k.shape[0] > scene)
      k = box_down_plain(k, static_cast<int>(k.shape[0] / scene));
  }
  std::vector<Image3> restored(captured.size());
  for (std::size_t r = 0; r < captured.size(); ++r) {
    for (int c = 0; c < 3; ++c) {
      Image3 mono{captured[r][static_cast<std::size_t>(c)],
                  captured[r][static_cast<std::size_t>(c)],
                  captured[r][static_cast<std::size_t>(c)]};
      restored[r][static_cast<std::size_t>(c)] =
          privacy::wiener_deconvolve(mono, kernels[static_cast<std::size_t>(c)], snr)[0];
    }
  }
  AttackReport report;
  const auto pairs =
      privacy::build_verification_pairs(data, cfg.pairs_per_id, cfg.pairs_per_id, cfg.seed);
  report.roc = privacy::probe_verification(clear_probe, restored, pairs);
  report.probe_auc = report.roc.auc;
  return report;
}

}  // namespace lensveil::eval
