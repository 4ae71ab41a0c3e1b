#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "lensveil/autodiff.hpp"
#include "lensveil/common.hpp"

namespace lensveil::neural {

inline constexpr int kEmbedDim = 32;
inline constexpr int kHiddenDim = 128;
inline constexpr int kEmotionClasses = 7;
inline constexpr int kDepressionLevels = 4;
inline constexpr int kLandmarkCount = 5;
inline constexpr int kFusionTokens = 8;
inline constexpr int kFusionTokenDim = 4;
inline constexpr int kFusionHeads = 4;
inline constexpr int kFusionBlocks = 2;

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

namespace detail {

inline Tensor xavier(Shape shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape[0]);
  const double fan_out = static_cast<double>(shape.size() > 1 ? shape[1] : 1);
  const double s = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.re) v = rng.uniform(-s, s);
  return t;
}

}  // namespace detail

struct Dense {
  Tensor w;
  Tensor b;

  void init(std::size_t in, std::size_t out, Rng& rng) {
    w = detail::xavier({in, out}, rng);
    b = Tensor::zeros({1, out});
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

struct DenseVars {
  ad::Var w, b;
};

inline DenseVars to_vars(ad::Tape& t, Dense& d, bool trainable) {
  return {t.leaf(d.w, trainable), t.leaf(d.b, trainable)};
}

// X: (B, in) -> (B, out); bias broadcast across rows via a ones column.
inline ad::Var dense_forward(ad::Tape& t, const DenseVars& d, ad::Var x) {
  const std::size_t batch = x.value().shape[0];
  ad::Var ones = t.constant(Tensor::full({batch, 1}, 1.0));
  return matmul(x, d.w) + matmul(ones, d.b);
}

inline ad::Var sigmoid(ad::Var x) {
  ad::Var one = x.tape->constant(1.0);
  return one / (one + vexp(affine(x, -1.0)));
}

// Two dense layers with tanh between: flattened image -> 128 -> 32.
struct EmbedNet {
  Dense l1, l2;
  std::size_t input_dim = 0;

  void init(std::size_t in, Rng& rng) {
    input_dim = in;
    l1.init(in, kHiddenDim, rng);
    l2.init(kHiddenDim, kEmbedDim, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    l1.visit(prefix + ".l1", f);
    l2.visit(prefix + ".l2", f);
  }
};

struct EmbedNetVars {
  DenseVars l1, l2;
};

inline EmbedNetVars to_vars(ad::Tape& t, EmbedNet& net, bool trainable) {
  return {to_vars(t, net.l1, trainable), to_vars(t, net.l2, trainable)};
}

inline ad::Var embed_forward(ad::Tape& t, const EmbedNetVars& v, ad::Var x_rows) {
  return dense_forward(t, v.l2, vtanh(dense_forward(t, v.l1, x_rows)));
}

// ---- losses ----

// L_v: mean squared difference over all pixels and channels.
inline ad::Var loss_visual(ad::Tape& t, const std::array<ad::Var, 3>& captured,
                           const std::array<ad::Var, 3>& scene) {
  std::size_t total = 0;
  ad::Var acc;
  for (int c = 0; c < 3; ++c) {
    require(captured[c].value().same_shape(scene[c].value()), "visual loss shape mismatch");
    ad::Var se = sum(square(captured[c] - scene[c]));
    acc = c == 0 ? se : acc + se;
    total += scene[c].value().size();
  }
  return affine(acc, 1.0 / static_cast<double>(total));
}

// d(x, y) = | ||x||^2 - ||y||^2 | + r
inline ad::Var hypersphere_distance(ad::Var x, ad::Var y, double r) {
  require(x.value().size() == y.value().size(), "embedding dimensions differ");
  return affine(vabs(sq_norm(x) - sq_norm(y)), 1.0, r);
}

// Inverse triplet: max(d(a,n) - d(a,p) + m, 0). Minimizing pulls different
// identities together and pushes same-identity embeddings apart.
inline ad::Var loss_inverse_triplet(ad::Var fa, ad::Var fp, ad::Var fn, double margin,
                                    double r) {
  ad::Var d_an = hypersphere_distance(fa, fn, r);
  ad::Var d_ap = hypersphere_distance(fa, fp, r);
  return relu(affine(d_an - d_ap, 1.0, margin));
}

// Mean squared coordinate difference over all 2K coordinates.
inline ad::Var loss_landmark(ad::Var predicted, ad::Var truth) {
  require(predicted.value().size() == truth.value().size(), "landmark count mismatch");
  return mean(square(predicted - truth));
}

struct IdentityStageWeights {
  double visual = -0.1;
  double identity = 1.0;
  double landmark = 1.0;
};

inline ad::Var loss_identity_stage(ad::Var lv, ad::Var lid, ad::Var llm,
                                   const IdentityStageWeights& w = {}) {
  return affine(lv, w.visual) + affine(lid, w.identity) + affine(llm, w.landmark);
}

// -log p_label; probabilities below 1e-12 are clamped (reported via flag).
inline ad::Var loss_emotion(ad::Var probs, int label, bool* clamped = nullptr) {
  const Tensor& p = probs.value();
  require(label >= 0 && static_cast<std::size_t>(label) < p.size(), "label out of range");
  if (clamped != nullptr) *clamped = p.re[static_cast<std::size_t>(label)] < 1e-12;
  ad::Var picked = gather(probs, {static_cast<std::size_t>(label)});
  return affine(vlog(ad::max_const(picked, 1e-12)), -1.0);
}

// BDI-II score bands -> severity level.
struct DepressionLevelMap {
  // upper bound of each level, inclusive
  std::array<int, kDepressionLevels> upper{13, 19, 28, 63};
};

inline int score_to_level(int score, const DepressionLevelMap& map = {}) {
  require(score >= 0 && score <= 63, "score out of range");
  for (int level = 0; level < kDepressionLevels; ++level)
    if (score <= map.upper[static_cast<std::size_t>(level)]) return level;
  return kDepressionLevels - 1;
}

// One-hot on the level smoothed by [0.05, 0.9, 0.05] across adjacent
// levels; edge levels renormalized.
inline std::array<double, kDepressionLevels> target_distribution(int level) {
  std::array<double, kDepressionLevels> t{};
  double mass = 0.0;
  for (int k = 0; k < kDepressionLevels; ++k) {
    double v = 0.0;
    if (k == level) v = 0.9;
    else if (k == level - 1 || k == level + 1) v = 0.05;
    t[static_cast<std::size_t>(k)] = v;
    mass += v;
  }
  for (double& v : t) v /= mass;
  return t;
}

struct DepressionLossParts {
  ad::Var total;
  ad::Var kl;
  ad::Var histogram;       // valid only when !histogram_skipped
  bool histogram_skipped = false;
};

struct HistogramConfig {
  int bins = 32;
};

namespace detail {

// Soft histogram of similarity samples: R bins of width 2/R on [-1, 1],
// triangular kernel, tails clamped to the end bin centers so each sample
// contributes unit mass. Returns a (1, R) row.
inline ad::Var soft_histogram(ad::Tape& t, ad::Var sims, int bins) {
  const std::size_t count = sims.value().size();
  const double width = 2.0 / static_cast<double>(bins);
  const double c0 = -1.0 + width / 2.0;
  const double c_last = 1.0 - width / 2.0;
  ad::Var clamped = affine(ad::max_const(affine(ad::max_const(sims, c0), -1.0), -c_last), -1.0);
  Tensor centers = Tensor::zeros({1, static_cast<std::size_t>(bins)});
  for (int r = 0; r < bins; ++r) centers.re[static_cast<std::size_t>(r)] = c0 + width * r;
  ad::Var s_col = reshape(clamped, {count, 1});
  ad::Var s_mat = matmul(s_col, t.constant(Tensor::full({1, static_cast<std::size_t>(bins)}, 1.0)));
  ad::Var c_mat = matmul(t.constant(Tensor::full({count, 1}, 1.0)), t.constant(centers));
  ad::Var weights = relu(affine(vabs(s_mat - c_mat), -1.0 / width, 1.0));
  ad::Var ones_row = t.constant(Tensor::full({1, count}, 1.0));
  return affine(matmul(ones_row, weights), 1.0 / static_cast<double>(count));
}

}  // namespace detail

// L_d: mean KL(target || predicted) plus the histogram ranking term, the
// estimated probability that a negative pair (different levels) is more
// similar than a positive pair (same level) under cosine similarity.
inline DepressionLossParts loss_depression(ad::Tape& t, ad::Var embeddings, ad::Var pred_dists,
                                           const std::vector<int>& scores,
                                           const HistogramConfig& hist_cfg = {},
                                           const DepressionLevelMap& map = {}) {
  const std::size_t batch = embeddings.value().shape[0];
  require(batch >= 2, "depression loss needs a batch of at least 2");
  require(pred_dists.value().shape[0] == batch && scores.size() == batch,
          "batch size mismatch");

  // KL(target || pred) = sum t log t - sum t log p, averaged over the batch
  Tensor target = Tensor::zeros({batch, static_cast<std::size_t>(kDepressionLevels)});
  double entropy_sum = 0.0;
  std::vector<int> levels(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    levels[i] = score_to_level(scores[i], map);
    const auto dist = target_distribution(levels[i]);
    for (int k = 0; k < kDepressionLevels; ++k) {
      const double tv = dist[static_cast<std::size_t>(k)];
      target.re[i * kDepressionLevels + static_cast<std::size_t>(k)] = tv;
      if (tv > 0.0) entropy_sum += tv * std::log(tv);
    }
  }
  ad::Var cross = sum(t.constant(target) * vlog(ad::max_const(pred_dists, 1e-12)));
  ad::Var kl = affine(cross, -1.0 / static_cast<double>(batch),
                      entropy_sum / static_cast<double>(batch));

  // pairwise cosine similarities
  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = i + 1; j < batch; ++j)
      (levels[i] == levels[j] ? pos_idx : neg_idx).push_back(i * batch + j);

  DepressionLossParts parts;
  parts.kl = kl;
  if (pos_idx.empty() || neg_idx.empty()) {
    parts.histogram_skipped = true;
    parts.total = kl;
    return parts;
  }

  ad::Var gram = matmul(embeddings, embeddings, false, true);  // (B, B)
  std::vector<std::size_t> diag(batch);
  for (std::size_t i = 0; i < batch; ++i) diag[i] = i * batch + i;
  ad::Var norms = vsqrt(ad::max_const(gather(gram, diag), 1e-24));
  ad::Var outer = matmul(reshape(norms, {batch, 1}), reshape(norms, {1, batch}));
  ad::Var sims = gram / outer;

  ad::Var h_pos = detail::soft_histogram(t, gather(sims, pos_idx), hist_cfg.bins);
  ad::Var h_neg = detail::soft_histogram(t, gather(sims, neg_idx), hist_cfg.bins);
  const auto bins = static_cast<std::size_t>(hist_cfg.bins);
  Tensor cumsum = Tensor::zeros({bins, bins});  // upper triangular incl. diagonal
  for (std::size_t q = 0; q < bins; ++q)
    for (std::size_t r = q; r < bins; ++r) cumsum.re[q * bins + r] = 1.0;
  ad::Var phi = matmul(h_pos, t.constant(cumsum));        // (1, R) cumulative
  ad::Var term = matmul(h_neg, phi, false, true);         // (1, 1)
  parts.histogram = reshape(term, {1});
  parts.total = kl + parts.histogram;
  return parts;
}

// ---- cross-attention fusion ----

struct AttentionBlock {
  Tensor wq, wk, wv, wo;  // (4, 4), no biases

  void init(Rng& rng) {
    wq = detail::xavier({kFusionTokenDim, kFusionTokenDim}, rng);
    wk = detail::xavier({kFusionTokenDim, kFusionTokenDim}, rng);
    wv = detail::xavier({kFusionTokenDim, kFusionTokenDim}, rng);
    wo = detail::xavier({kFusionTokenDim, kFusionTokenDim}, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".wk", wk);
    f(prefix + ".wv", wv);
    f(prefix + ".wo", wo);
  }
};

struct AttentionBlockVars {
  ad::Var wq, wk, wv, wo;
};

// Two stacked cross-attention blocks per direction, then the score layer.
struct FusionParams {
  std::array<AttentionBlock, kFusionBlocks> e_to_d;  // queries from D, keys/values from E
  std::array<AttentionBlock, kFusionBlocks> d_to_e;
  Dense score;  // 64 -> 1

  void init(Rng& rng) {
    for (auto& b : e_to_d) b.init(rng);
    for (auto& b : d_to_e) b.init(rng);
    score.init(2 * kEmbedDim, 1, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    for (int i = 0; i < kFusionBlocks; ++i) {
      e_to_d[static_cast<std::size_t>(i)].visit(prefix + ".ed" + std::to_string(i), f);
      d_to_e[static_cast<std::size_t>(i)].visit(prefix + ".de" + std::to_string(i), f);
    }
    score.visit(prefix + ".score", f);
  }
};

struct FusionVars {
  std::array<AttentionBlockVars, kFusionBlocks> e_to_d;
  std::array<AttentionBlockVars, kFusionBlocks> d_to_e;
  DenseVars score;
};

inline FusionVars to_vars(ad::Tape& t, FusionParams& p, bool trainable) {
  FusionVars v;
  for (int i = 0; i < kFusionBlocks; ++i) {
    auto& src_ed = p.e_to_d[static_cast<std::size_t>(i)];
    auto& src_de = p.d_to_e[static_cast<std::size_t>(i)];
    v.e_to_d[static_cast<std::size_t>(i)] = {
        t.leaf(src_ed.wq, trainable), t.leaf(src_ed.wk, trainable),
        t.leaf(src_ed.wv, trainable), t.leaf(src_ed.wo, trainable)};
    v.d_to_e[static_cast<std::size_t>(i)] = {
        t.leaf(src_de.wq, trainable), t.leaf(src_de.wk, trainable),
        t.leaf(src_de.wv, trainable), t.leaf(src_de.wo, trainable)};
  }
  v.score = to_vars(t, p.score, trainable);
  return v;
}

namespace detail {

inline std::vector<std::size_t> column_indices(int col) {
  std::vector<std::size_t> idx(kFusionTokens);
  for (int tk = 0; tk < kFusionTokens; ++tk)
    idx[static_cast<std::size_t>(tk)] =
        static_cast<std::size_t>(tk * kFusionTokenDim + col);
  return idx;
}

// Multi-head cross attention over (tokens, dim) sequences; head dim is
// token_dim / heads = 1 here, so each head is one column.
inline ad::Var cross_attention(ad::Tape& t, const AttentionBlockVars& w, ad::Var queries_from,
                               ad::Var keys_values_from) {
  ad::Var q = matmul(queries_from, w.wq);
  ad::Var k = matmul(keys_values_from, w.wk);
  ad::Var v = matmul(keys_values_from, w.wv);
  std::vector<ad::Var> heads;
  for (int h = 0; h < kFusionHeads; ++h) {
    const auto cols = column_indices(h);
    ad::Var qh = reshape(gather(q, cols), {kFusionTokens, 1});
    ad::Var kh = reshape(gather(k, cols), {kFusionTokens, 1});
    ad::Var vh = reshape(gather(v, cols), {kFusionTokens, 1});
    ad::Var attn = softmax_rows(matmul(qh, kh, false, true));  // head dim 1: no scale
    heads.push_back(reshape(matmul(attn, vh), {kFusionTokens}));
  }
  // heads are column slices: reassemble row-major (tokens, dim)
  ad::Var stacked = t.concat(heads);  // head-major, length 32
  std::vector<std::size_t> perm(kFusionTokens * kFusionTokenDim);
  for (int tk = 0; tk < kFusionTokens; ++tk)
    for (int h = 0; h < kFusionHeads; ++h)
      perm[static_cast<std::size_t>(tk * kFusionHeads + h)] =
          static_cast<std::size_t>(h * kFusionTokens + tk);
  ad::Var joined = reshape(gather(stacked, perm), {kFusionTokens, kFusionTokenDim});
  return matmul(joined, w.wo);
}

}  // namespace detail

// Z = [Z_{E->D}; Z_{D->E}], each direction two stacked cross-attention
// blocks over 8-token x 4-dim reshapes of the 32-d features.
inline ad::Var fuse(ad::Tape& t, const FusionVars& w, ad::Var f_e, ad::Var f_d) {
  require(f_e.value().size() == kEmbedDim && f_d.value().size() == kEmbedDim,
          "fuse expects 32-d features");
  ad::Var e_tok = reshape(f_e, {kFusionTokens, kFusionTokenDim});
  ad::Var d_tok = reshape(f_d, {kFusionTokens, kFusionTokenDim});
  ad::Var z_ed = d_tok;
  for (const auto& block : w.e_to_d) z_ed = detail::cross_attention(t, block, z_ed, e_tok);
  ad::Var z_de = e_tok;
  for (const auto& block : w.d_to_e) z_de = detail::cross_attention(t, block, z_de, d_tok);
  return t.concat({reshape(z_ed, {static_cast<std::size_t>(kEmbedDim)}),
                   reshape(z_de, {static_cast<std::size_t>(kEmbedDim)})});
}

inline ad::Var fused_score(ad::Tape& t, const FusionVars& w, ad::Var fused) {
  ad::Var row = reshape(fused, {1, static_cast<std::size_t>(2 * kEmbedDim)});
  return reshape(dense_forward(t, w.score, row), {1});
}

// L_s: mean squared error over the batch.
inline ad::Var loss_score(ad::Var preds, ad::Var truths) {
  require(preds.value().size() == truths.value().size(), "score batch mismatch");
  return mean(square(preds - truths));
}

inline double clamp_score(double s) { return s < 0.0 ? 0.0 : (s > 63.0 ? 63.0 : s); }

}  // namespace lensveil::neural
