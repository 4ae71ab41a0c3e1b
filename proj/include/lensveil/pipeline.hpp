#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lensveil/checkpoint.hpp"
#include "lensveil/neural.hpp"
#include "lensveil/optics.hpp"
#include "lensveil/optim.hpp"
#include "lensveil/privacy.hpp"
#include "lensveil/synthface.hpp"
#include "lensveil/zernike.hpp"

namespace lensveil::pipeline {

using io::Image3;

// rng stream purposes
inline constexpr std::uint64_t kStreamInit = 1;
inline constexpr std::uint64_t kStreamShuffle = 2;
inline constexpr std::uint64_t kStreamTriplet = 3;
inline constexpr std::uint64_t kStreamDepth = 4;
inline constexpr std::uint64_t kStreamNoise = 5;
inline constexpr std::uint64_t kStreamVal = 6;

inline std::uint64_t stream_seed(std::uint64_t master, std::uint64_t purpose,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(master, purpose), a), b);
}

inline constexpr std::array<double, 4> kLevelCenters{6.5, 16.5, 24.0, 46.0};

struct StageConfig {
  int stage = 1;
  double lens_lr = 1.0;
  double head_lr = 0.01;
  std::string lens_optimizer = "adadelta";
  std::string head_optimizer = "adam";
  int epochs = 30;
  int batch_size = 8;
  bool freeze_lens = false;
  bool freeze_nets = false;      // stage 4 freezes everything but the fusion block
  bool pretrained_lens = true;   // stage-3/4 ablation switches
  bool pretrained_net = true;
  double triplet_margin = 1.0;
  double hypersphere_r = 0.1;
  neural::IdentityStageWeights identity_weights{};
  int histogram_bins = 32;
  double eval_depth_m = 1.0;

  void validate() const {
    require(stage >= 1 && stage <= 4, "stage must be 1..4");
    require(epochs >= 0 && batch_size >= 1, "bad epoch/batch settings");
    if (stage == 4 && freeze_nets)
      require(pretrained_net, "frozen stage 4 requires pretrained nets");
  }
};

// Per-stage defaults: optimizers and learning rates follow the protocol
// (lens Adadelta 1 then 0.01; heads Adam 0.01 then 1e-4); epoch budgets are
// desk-scale.
inline StageConfig stage_defaults(int stage) {
  StageConfig cfg;
  cfg.stage = stage;
  switch (stage) {
    case 1:
      cfg.lens_lr = 1.0;
      cfg.head_lr = 0.01;
      cfg.epochs = 30;
      break;
    case 2:
      cfg.lens_lr = 0.01;
      cfg.head_lr = 1e-4;
      cfg.epochs = 30;
      break;
    case 3:
      cfg.lens_lr = 0.01;
      cfg.head_lr = 1e-4;
      cfg.epochs = 30;
      cfg.batch_size = 12;
      break;
    case 4:
      cfg.head_lr = 1e-4;
      cfg.epochs = 20;
      cfg.freeze_lens = true;
      cfg.freeze_nets = true;
      break;
    default:
      require(false, "stage must be 1..4");
  }
  return cfg;
}

struct TrainEnv {
  const synthface::DatasetIndex* data = nullptr;
  std::vector<Image3> images;  // indexed by dataset row
  optics::OpticalConfig optical;
  zernike::ZernikeBasis basis;
  std::uint64_t master_seed = 7;
  std::string metrics_dir;  // when set, per-stage CSVs land here
};

inline TrainEnv make_env(const synthface::DatasetIndex& data, optics::OpticalConfig optical,
                         std::uint64_t master_seed, std::string metrics_dir = "") {
  optical.validate();
  TrainEnv env;
  env.data = &data;
  env.optical = optical;
  env.basis = zernike::build_basis(optical.wavefront_resolution, 15);
  env.master_seed = master_seed;
  env.metrics_dir = std::move(metrics_dir);
  env.images.reserve(data.rows.size());
  for (std::size_t r = 0; r < data.rows.size(); ++r) env.images.push_back(data.load_image(r));
  return env;
}

namespace detail {

// Named parameter tensors with per-name optimizer state. Frozen entries are
// recorded as tape constants, so no gradient can accumulate on them.
class Trainer {
 public:
  struct Entry {
    std::string name;
    Tensor* tensor;
    bool frozen;
    bool lens_group;  // uses the lens optimizer/learning rate
  };

  explicit Trainer(const StageConfig& cfg) : cfg_(cfg) {}

  void add(const std::string& name, Tensor* t, bool frozen, bool lens_group) {
    entries_.push_back({name, t, frozen, lens_group});
  }

  std::map<std::string, ad::Var> record(ad::Tape& tape) {
    std::map<std::string, ad::Var> vars;
    last_ids_.clear();
    for (const Entry& e : entries_) {
      ad::Var v = tape.leaf(*e.tensor, !e.frozen);
      vars.emplace(e.name, v);
      if (!e.frozen) last_ids_.emplace(v.id, e.name);
    }
    return vars;
  }

  // Backward plus one optimizer update per trainable entry. Verifies that
  // gradients arrived for exactly the trainable set. Returns false when a
  // NaN gradient aborted an update.
  bool step(ad::Tape& tape, ad::Var loss) {
    ad::GradMap grads = tape.backward(loss);
    require(grads.size() == last_ids_.size(), "gradient set does not match trainable set");
    bool ok = true;
    for (const Entry& e : entries_) {
      if (e.frozen) continue;
      const Tensor* grad = nullptr;
      for (const auto& [id, name] : last_ids_) {
        if (name == e.name) {
          grad = &grads.at(id);
          break;
        }
      }
      require(grad != nullptr, "missing gradient for " + e.name);
      const bool lens = e.lens_group;
      const std::string& kind = lens ? cfg_.lens_optimizer : cfg_.head_optimizer;
      if (kind == "adadelta") {
        opt::AdadeltaConfig oc;
        oc.lr = lens ? cfg_.lens_lr : cfg_.head_lr;
        ok &= opt::adadelta_step(*e.tensor, *grad, adadelta_[e.name], oc);
      } else {
        opt::AdamConfig oc;
        oc.lr = lens ? cfg_.lens_lr : cfg_.head_lr;
        ok &= opt::adam_step(*e.tensor, *grad, adam_[e.name], oc);
      }
    }
    return ok;
  }

  void snapshot_into(ckpt::Checkpoint& ck, const std::string& prefix) const {
    for (const Entry& e : entries_) ck.tensors[prefix + e.name] = *e.tensor;
  }

  void save_opt_state(ckpt::Checkpoint& ck) const {
    for (const auto& [name, st] : adam_) {
      if (st.m.re.empty()) continue;
      ck.tensors["opt.adam." + name + ".m"] = st.m;
      ck.tensors["opt.adam." + name + ".v"] = st.v;
      ck.tensors["opt.adam." + name + ".step"] =
          Tensor::scalar(static_cast<double>(st.step));
    }
    for (const auto& [name, st] : adadelta_) {
      if (st.accum_grad2.re.empty()) continue;
      ck.tensors["opt.adadelta." + name + ".g2"] = st.accum_grad2;
      ck.tensors["opt.adadelta." + name + ".dx2"] = st.accum_dx2;
    }
  }

  void load_opt_state(const ckpt::Checkpoint& ck) {
    for (const Entry& e : entries_) {
      if (ck.has("opt.adam." + e.name + ".m")) {
        opt::AdamState st;
        st.m = ck.get("opt.adam." + e.name + ".m");
        st.v = ck.get("opt.adam." + e.name + ".v");
        st.step = static_cast<long>(ck.get("opt.adam." + e.name + ".step").item());
        adam_[e.name] = std::move(st);
      }
      if (ck.has("opt.adadelta." + e.name + ".g2")) {
        opt::AdadeltaState st;
        st.accum_grad2 = ck.get("opt.adadelta." + e.name + ".g2");
        st.accum_dx2 = ck.get("opt.adadelta." + e.name + ".dx2");
        adadelta_[e.name] = std::move(st);
      }
    }
  }

  const std::vector<Entry>& entries() const { return entries_; }

 private:
  StageConfig cfg_;
  std::vector<Entry> entries_;
  std::map<std::string, opt::AdamState> adam_;
  std::map<std::string, opt::AdadeltaState> adadelta_;
  std::map<int, std::string> last_ids_;
};

struct RenderedBatch {
  ad::Var rows;  // (B, 3*S*S)
  std::vector<std::array<ad::Var, 3>> rendered;
  std::vector<std::array<ad::Var, 3>> scenes;
};

// Render a set of dataset rows through the current lens PSFs on the tape.
inline RenderedBatch render_batch(ad::Tape& tape, const TrainEnv& env,
                                  const std::array<ad::Var, 3>& psfs,
                                  const std::vector<std::size_t>& rows, double noise_sigma,
                                  std::uint64_t noise_seed_base) {
  RenderedBatch out;
  std::vector<ad::Var> flat;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Image3& img = env.images[rows[k]];
    std::array<ad::Var, 3> scene{tape.constant(img[0]), tape.constant(img[1]),
                                 tape.constant(img[2])};
    auto rendered = optics::render_vars(tape, scene, psfs, noise_sigma,
                                        mix_seed(noise_seed_base, rows[k]));
    const std::size_t n = img[0].size();
    flat.push_back(tape.concat({reshape(rendered[0], {n}), reshape(rendered[1], {n}),
                                reshape(rendered[2], {n})}));
    out.rendered.push_back(rendered);
    out.scenes.push_back(scene);
  }
  ad::Var joined = tape.concat(flat);
  out.rows = reshape(joined, {rows.size(), env.images[rows[0]][0].size() * 3});
  return out;
}

inline ad::Var batch_visual_loss(ad::Tape& tape, const RenderedBatch& batch) {
  ad::Var acc;
  for (std::size_t i = 0; i < batch.rendered.size(); ++i) {
    ad::Var lv = neural::loss_visual(tape, batch.rendered[i], batch.scenes[i]);
    acc = i == 0 ? lv : acc + lv;
  }
  return affine(acc, 1.0 / static_cast<double>(batch.rendered.size()));
}

inline Tensor landmark_truth(const TrainEnv& env, const std::vector<std::size_t>& rows) {
  Tensor t = Tensor::zeros({rows.size(), 2ul * synthface::kLandmarks});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < 2ul * synthface::kLandmarks; ++k)
      t.re[i * 2 * synthface::kLandmarks + k] = env.data->rows[rows[i]].landmarks[k];
  return t;
}

inline ad::Var embedding_row(ad::Tape& tape, ad::Var embeddings, std::size_t row) {
  const std::size_t dim = embeddings.value().shape[1];
  std::vector<std::size_t> idx(dim);
  for (std::size_t i = 0; i < dim; ++i) idx[i] = row * dim + i;
  return gather(embeddings, idx);
}

struct Triplet {
  std::size_t anchor, positive, negative;  // dataset rows
};

inline std::vector<std::vector<std::size_t>> rows_by_identity(
    const synthface::DatasetIndex& data, const std::vector<std::size_t>& rows) {
  std::vector<std::vector<std::size_t>> by_id;
  for (std::size_t r : rows) {
    const auto id = static_cast<std::size_t>(data.rows[r].identity);
    if (by_id.size() <= id) by_id.resize(id + 1);
    by_id[id].push_back(r);
  }
  return by_id;
}

// One triplet per anchor; positives need a second sample of the identity.
inline std::vector<Triplet> make_triplets(const synthface::DatasetIndex& data,
                                          const std::vector<std::size_t>& anchor_rows,
                                          const std::vector<std::size_t>& pool_rows,
                                          Rng& rng) {
  auto by_id = rows_by_identity(data, pool_rows);
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < by_id.size(); ++i)
    if (!by_id[i].empty()) ids.push_back(i);
  std::vector<Triplet> out;
  for (std::size_t a : anchor_rows) {
    const auto aid = static_cast<std::size_t>(data.rows[a].identity);
    if (aid >= by_id.size() || by_id[aid].size() < 2) continue;
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
    out.push_back({a, p, n});
  }
  return out;
}

inline void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1],
              v[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(i) - 1))]);
}

inline void write_metrics_csv(const TrainEnv& env, int stage, const ckpt::MetricHistory& hist) {
  if (env.metrics_dir.empty()) return;
  const std::string path =
      env.metrics_dir + "/stage" + std::to_string(stage) + "_metrics.csv";
  std::ofstream f(path);
  io::check_stream(f, path);
  f.precision(17);
  f << hist.header << "\n";
  for (const auto& row : hist.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
    f << "\n";
  }
}

// Best-checkpoint bookkeeping shared by all stages.
struct BestTracker {
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::map<std::string, Tensor> best;

  void consider(double val_loss, int epoch, const Trainer& trainer) {
    if (val_loss < best_val) {
      best_val = val_loss;
      best_epoch = epoch;
      best.clear();
      for (const auto& e : trainer.entries()) best[e.name] = *e.tensor;
    }
  }
};

struct Progress {
  int next_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
};

inline void save_progress(ckpt::Checkpoint& ck, const Progress& p) {
  Tensor t = Tensor::zeros({3});
  t.re = {static_cast<double>(p.next_epoch), p.best_val, static_cast<double>(p.best_epoch)};
  ck.tensors["meta.progress"] = t;
}

inline Progress load_progress(const ckpt::Checkpoint& ck) {
  Progress p;
  if (ck.has("meta.progress")) {
    const Tensor& t = ck.get("meta.progress");
    p.next_epoch = static_cast<int>(t.re[0]);
    p.best_val = t.re[1];
    p.best_epoch = static_cast<int>(t.re[2]);
  }
  return p;
}

// Assemble the final stage checkpoint: best weights under their plain
// names, current weights under cur.*, optimizer state, history, progress.
inline ckpt::Checkpoint finish_checkpoint(const std::string& stage_tag, Trainer& trainer,
                                          const BestTracker& best,
                                          const ckpt::MetricHistory& hist, int next_epoch) {
  ckpt::Checkpoint ck;
  ck.stage = stage_tag;
  ck.history = hist;
  for (const auto& [name, t] : best.best) ck.tensors[name] = t;
  trainer.snapshot_into(ck, "cur.");
  trainer.save_opt_state(ck);
  Progress p;
  p.next_epoch = next_epoch;
  p.best_val = best.best_val;
  p.best_epoch = best.best_epoch;
  save_progress(ck, p);
  return ck;
}

inline void restore_for_resume(const ckpt::Checkpoint& ck, Trainer& trainer,
                               BestTracker& best, ckpt::MetricHistory& hist) {
  for (const auto& e : trainer.entries()) {
    if (ck.has("cur." + e.name)) *e.tensor = ck.get("cur." + e.name);
  }
  trainer.load_opt_state(ck);
  const Progress p = load_progress(ck);
  best.best_val = p.best_val;
  best.best_epoch = p.best_epoch;
  for (const auto& e : trainer.entries()) {
    if (ck.has(e.name)) best.best[e.name] = ck.get(e.name);
  }
  hist = ck.history;
}

}  // namespace detail

// ---- stage 1: identity obfuscation ----

inline ckpt::Checkpoint run_stage1_identity(TrainEnv& env, const StageConfig& cfg,
                                            const ckpt::Checkpoint* resume = nullptr) {
  cfg.validate();
  require(cfg.stage == 1, "config is not a stage-1 config");
  const auto& data = *env.data;
  auto train_rows = data.rows_in(synthface::Split::kTrain);
  auto val_rows = data.rows_in(synthface::Split::kVal);
  {
    auto by_id = detail::rows_by_identity(data, train_rows);
    int ids_with_pairs = 0;
    for (const auto& v : by_id) ids_with_pairs += v.size() >= 2 ? 1 : 0;
    require(ids_with_pairs >= 2, "stage 1 needs at least two identities with pairs");
  }

  Rng init_rng(stream_seed(env.master_seed, kStreamInit, 1));
  zernike::LensProfile lens = zernike::LensProfile::default_init(env.basis.q);
  neural::EmbedNet net;
  net.init(3 * env.images[0][0].size(), init_rng);
  neural::Dense landmark_head;
  landmark_head.init(neural::kEmbedDim, 2 * synthface::kLandmarks, init_rng);

  Tensor alpha = Tensor::from({static_cast<std::size_t>(env.basis.q)}, lens.alpha);
  detail::Trainer trainer(cfg);
  trainer.add("lens.alpha", &alpha, cfg.freeze_lens, true);
  net.visit("net", [&](const std::string& n, Tensor& t) { trainer.add(n, &t, false, false); });
  landmark_head.visit("landmark",
                      [&](const std::string& n, Tensor& t) { trainer.add(n, &t, false, false); });

  ckpt::MetricHistory hist;
  hist.header = "epoch,train_loss,val_loss,val_lv,val_lid,val_llm";
  detail::BestTracker best;
  int first_epoch = 0;
  if (resume != nullptr) {
    require(resume->stage == "identity", "resume checkpoint is for another stage");
    detail::restore_for_resume(*resume, trainer, best, hist);
    first_epoch = detail::load_progress(*resume).next_epoch;
  }

  // validation triplets are fixed across epochs; if the val split has a
  // single identity, negatives are borrowed from train rows
  std::vector<std::size_t> val_pool = val_rows;
  {
    auto by_id = detail::rows_by_identity(data, val_rows);
    int ids = 0;
    for (const auto& v : by_id) ids += v.empty() ? 0 : 1;
    if (ids < 2) val_pool.insert(val_pool.end(), train_rows.begin(), train_rows.end());
  }
  Rng val_rng(stream_seed(env.master_seed, kStreamVal, 1));
  const auto val_triplets = detail::make_triplets(data, val_rows, val_pool, val_rng);
  require(!val_triplets.empty(), "no validation triplets available");

  auto evaluate = [&](double* lv_out, double* lid_out, double* llm_out) {
    ad::Tape tape;
    ad::Var alpha_v = tape.leaf(alpha, false);
    auto net_vars = neural::to_vars(tape, net, false);
    auto lm_vars = neural::to_vars(tape, landmark_head, false);
    auto psfs = optics::psf_stack_vars(tape, alpha_v, env.basis, env.optical, cfg.eval_depth_m);
    std::vector<std::size_t> rows;
    for (const auto& t : val_triplets) {
      rows.push_back(t.anchor);
      rows.push_back(t.positive);
      rows.push_back(t.negative);
    }
    auto batch = detail::render_batch(tape, env, psfs, rows, env.optical.noise_sigma,
                                      stream_seed(env.master_seed, kStreamVal, 2));
    ad::Var emb = neural::embed_forward(tape, net_vars, batch.rows);
    ad::Var lv = detail::batch_visual_loss(tape, batch);
    ad::Var lid;
    for (std::size_t k = 0; k < val_triplets.size(); ++k) {
      ad::Var term = neural::loss_inverse_triplet(
          detail::embedding_row(tape, emb, 3 * k), detail::embedding_row(tape, emb, 3 * k + 1),
          detail::embedding_row(tape, emb, 3 * k + 2), cfg.triplet_margin, cfg.hypersphere_r);
      lid = k == 0 ? term : lid + term;
    }
    lid = affine(lid, 1.0 / static_cast<double>(val_triplets.size()));
    ad::Var lm_pred = neural::sigmoid(neural::dense_forward(tape, lm_vars, emb));
    ad::Var llm = neural::loss_landmark(lm_pred, tape.constant(detail::landmark_truth(env, rows)));
    ad::Var li = neural::loss_identity_stage(lv, lid, llm, cfg.identity_weights);
    if (lv_out) *lv_out = lv.value().item();
    if (lid_out) *lid_out = lid.value().item();
    if (llm_out) *llm_out = llm.value().item();
    return li.value().item();
  };

  if (resume == nullptr) {
    double lv = 0, lid = 0, llm = 0;
    const double v0 = evaluate(&lv, &lid, &llm);
    hist.rows.push_back({0.0, std::nan(""), v0, lv, lid, llm});
    best.consider(v0, 0, trainer);
  }

  for (int epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    double train_loss_sum = 0.0;
    std::size_t steps = 0;
    Rng shuffle_rng(stream_seed(env.master_seed, kStreamShuffle, 1, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> anchors = train_rows;
    detail::shuffle(anchors, shuffle_rng);
    Rng triplet_rng(stream_seed(env.master_seed, kStreamTriplet, 1, static_cast<std::uint64_t>(epoch)));
    const auto triplets = detail::make_triplets(data, anchors, train_rows, triplet_rng);
    Rng depth_rng(stream_seed(env.master_seed, kStreamDepth, 1, static_cast<std::uint64_t>(epoch)));

    for (std::size_t start = 0; start < triplets.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(triplets.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double depth = depth_rng.uniform(env.optical.depth_min_m, env.optical.depth_max_m);

      ad::Tape tape;
      auto vars = trainer.record(tape);
      auto net_vars = neural::EmbedNetVars{{vars.at("net.l1.w"), vars.at("net.l1.b")},
                                           {vars.at("net.l2.w"), vars.at("net.l2.b")}};
      auto lm_vars = neural::DenseVars{vars.at("landmark.w"), vars.at("landmark.b")};
      auto psfs = optics::psf_stack_vars(tape, vars.at("lens.alpha"), env.basis, env.optical, depth);

      std::vector<std::size_t> rows;
      for (std::size_t k = start; k < stop; ++k) {
        rows.push_back(triplets[k].anchor);
        rows.push_back(triplets[k].positive);
        rows.push_back(triplets[k].negative);
      }
      auto batch = detail::render_batch(
          tape, env, psfs, rows, env.optical.noise_sigma,
          stream_seed(env.master_seed, kStreamNoise, 1,
                      static_cast<std::uint64_t>(epoch) * 100000 + start));
      ad::Var emb = neural::embed_forward(tape, net_vars, batch.rows);

      ad::Var lv = detail::batch_visual_loss(tape, batch);
      ad::Var lid;
      for (std::size_t k = 0; k < stop - start; ++k) {
        ad::Var term = neural::loss_inverse_triplet(
            detail::embedding_row(tape, emb, 3 * k),
            detail::embedding_row(tape, emb, 3 * k + 1),
            detail::embedding_row(tape, emb, 3 * k + 2), cfg.triplet_margin,
            cfg.hypersphere_r);
        lid = k == 0 ? term : lid + term;
      }
      lid = affine(lid, 1.0 / static_cast<double>(stop - start));
      ad::Var lm_pred = neural::sigmoid(neural::dense_forward(tape, lm_vars, emb));
      ad::Var llm =
          neural::loss_landmark(lm_pred, tape.constant(detail::landmark_truth(env, rows)));
      ad::Var li = neural::loss_identity_stage(lv, lid, llm, cfg.identity_weights);

      trainer.step(tape, li);
      train_loss_sum += li.value().item();
      steps += 1;
    }

    double lv = 0, lid = 0, llm = 0;
    const double val_loss = evaluate(&lv, &lid, &llm);
    hist.rows.push_back({static_cast<double>(epoch + 1),
                         steps ? train_loss_sum / static_cast<double>(steps) : std::nan(""),
                         val_loss, lv, lid, llm});
    best.consider(val_loss, epoch + 1, trainer);
  }

  detail::write_metrics_csv(env, 1, hist);
  return detail::finish_checkpoint("identity", trainer, best, hist, cfg.epochs);
}

// ---- stage 2: emotion ----

inline ckpt::Checkpoint run_stage2_emotion(TrainEnv& env, const ckpt::Checkpoint& ck1,
                                           const StageConfig& cfg,
                                           const ckpt::Checkpoint* resume = nullptr) {
  cfg.validate();
  require(cfg.stage == 2, "config is not a stage-2 config");
  require(ck1.stage == "identity", "stage 2 wants an identity-stage checkpoint");
  const auto& data = *env.data;
  const auto train_rows = data.rows_in(synthface::Split::kTrain);
  const auto val_rows = data.rows_in(synthface::Split::kVal);

  Rng init_rng(stream_seed(env.master_seed, kStreamInit, 2));
  Tensor alpha = ck1.get("lens.alpha");
  neural::EmbedNet net;
  net.init(3 * env.images[0][0].size(), init_rng);
  net.l1.w = ck1.get("net.l1.w");
  net.l1.b = ck1.get("net.l1.b");
  net.l2.w = ck1.get("net.l2.w");
  net.l2.b = ck1.get("net.l2.b");
  neural::Dense emotion_head;
  emotion_head.init(neural::kEmbedDim, neural::kEmotionClasses, init_rng);

  detail::Trainer trainer(cfg);
  trainer.add("lens.alpha", &alpha, cfg.freeze_lens, true);
  net.visit("net", [&](const std::string& n, Tensor& t) { trainer.add(n, &t, false, false); });
  emotion_head.visit("emotion",
                     [&](const std::string& n, Tensor& t) { trainer.add(n, &t, false, false); });

  ckpt::MetricHistory hist;
  hist.header = "epoch,train_loss,val_loss,val_accuracy";
  detail::BestTracker best;
  int first_epoch = 0;
  if (resume != nullptr) {
    require(resume->stage == "emotion", "resume checkpoint is for another stage");
    detail::restore_for_resume(*resume, trainer, best, hist);
    first_epoch = detail::load_progress(*resume).next_epoch;
  }

  auto evaluate = [&](double* accuracy) {
    ad::Tape tape;
    ad::Var alpha_v = tape.leaf(alpha, false);
    auto net_vars = neural::to_vars(tape, net, false);
    auto head_vars = neural::to_vars(tape, emotion_head, false);
    auto psfs = optics::psf_stack_vars(tape, alpha_v, env.basis, env.optical, cfg.eval_depth_m);
    auto batch = detail::render_batch(tape, env, psfs, val_rows, env.optical.noise_sigma,
                                      stream_seed(env.master_seed, kStreamVal, 22));
    ad::Var emb = neural::embed_forward(tape, net_vars, batch.rows);
    ad::Var probs = softmax_rows(neural::dense_forward(tape, head_vars, emb));
    std::vector<std::size_t> label_idx(val_rows.size());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < val_rows.size(); ++i) {
      const int label = data.rows[val_rows[i]].emotion;
      label_idx[i] = i * neural::kEmotionClasses + static_cast<std::size_t>(label);
      const double* row = probs.value().re.data() + i * neural::kEmotionClasses;
      int arg = 0;
      for (int c = 1; c < neural::kEmotionClasses; ++c)
        if (row[c] > row[arg]) arg = c;
      hits += arg == label ? 1 : 0;
    }
    if (accuracy) *accuracy = static_cast<double>(hits) / static_cast<double>(val_rows.size());
    ad::Var picked = gather(probs, label_idx);
    ad::Var ce = affine(mean(vlog(ad::max_const(picked, 1e-12))), -1.0);
    return ce.value().item();
  };

  if (resume == nullptr) {
    double acc = 0.0;
    const double v0 = evaluate(&acc);
    hist.rows.push_back({0.0, std::nan(""), v0, acc});
    best.consider(v0, 0, trainer);
  }

  for (int epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    double train_loss_sum = 0.0;
    std::size_t steps = 0;
    Rng shuffle_rng(stream_seed(env.master_seed, kStreamShuffle, 2, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order = train_rows;
    detail::shuffle(order, shuffle_rng);
    Rng depth_rng(stream_seed(env.master_seed, kStreamDepth, 2, static_cast<std::uint64_t>(epoch)));

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<std::size_t> rows(order.begin() + static_cast<long>(start),
                                          order.begin() + static_cast<long>(stop));
      const double depth = depth_rng.uniform(env.optical.depth_min_m, env.optical.depth_max_m);

      ad::Tape tape;
      auto vars = trainer.record(tape);
      auto net_vars = neural::EmbedNetVars{{vars.at("net.l1.w"), vars.at("net.l1.b")},
                                           {vars.at("net.l2.w"), vars.at("net.l2.b")}};
      auto head_vars = neural::DenseVars{vars.at("emotion.w"), vars.at("emotion.b")};
      auto psfs = optics::psf_stack_vars(tape, vars.at("lens.alpha"), env.basis, env.optical, depth);
      auto batch = detail::render_batch(
          tape, env, psfs, rows, env.optical.noise_sigma,
          stream_seed(env.master_seed, kStreamNoise, 2,
                      static_cast<std::uint64_t>(epoch) * 100000 + start));
      ad::Var emb = neural::embed_forward(tape, net_vars, batch.rows);
      ad::Var probs = softmax_rows(neural::dense_forward(tape, head_vars, emb));
      std::vector<std::size_t> label_idx(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i)
        label_idx[i] = i * neural::kEmotionClasses +
                       static_cast<std::size_t>(data.rows[rows[i]].emotion);
      ad::Var picked = gather(probs, label_idx);
      ad::Var ce = affine(mean(vlog(ad::max_const(picked, 1e-12))), -1.0);

      trainer.step(tape, ce);
      train_loss_sum += ce.value().item();
      steps += 1;
    }

    double acc = 0.0;
    const double val_loss = evaluate(&acc);
    hist.rows.push_back({static_cast<double>(epoch + 1),
                         steps ? train_loss_sum / static_cast<double>(steps) : std::nan(""),
                         val_loss, acc});
    best.consider(val_loss, epoch + 1, trainer);
  }

  detail::write_metrics_csv(env, 2, hist);
  return detail::finish_checkpoint("emotion", trainer, best, hist, cfg.epochs);
}

// ---- stage 3: depression ----

// `source` provides pretrained weights: pass the stage-2 checkpoint for the
// full protocol, the stage-1 checkpoint for the lens-only ablation, or null
// when both cfg.pretrained_* flags are off.
inline ckpt::Checkpoint run_stage3_depression(TrainEnv& env, const ckpt::Checkpoint* source,
                                              const StageConfig& cfg,
                                              const ckpt::Checkpoint* resume = nullptr) {
  cfg.validate();
  require(cfg.stage == 3, "config is not a stage-3 config");
  if (cfg.pretrained_lens || cfg.pretrained_net)
    require(source != nullptr, "pretrained flags need a source checkpoint");
  const auto& data = *env.data;
  const auto train_rows = data.rows_in(synthface::Split::kTrain);
  const auto val_rows = data.rows_in(synthface::Split::kVal);

  Rng init_rng(stream_seed(env.master_seed, kStreamInit, 3));
  Tensor alpha;
  if (cfg.pretrained_lens) {
    alpha = source->get("lens.alpha");
  } else {
    zernike::LensProfile lens = zernike::LensProfile::default_init(env.basis.q);
    alpha = Tensor::from({static_cast<std::size_t>(env.basis.q)}, lens.alpha);
  }
  neural::EmbedNet net;
  net.init(3 * env.images[0][0].size(), init_rng);
  if (cfg.pretrained_net) {
    net.l1.w = source->get("net.l1.w");
    net.l1.b = source->get("net.l1.b");
    net.l2.w = source->get("net.l2.w");
    net.l2.b = source->get("net.l2.b");
  }
  neural::Dense depression_head;
  depression_head.init(neural::kEmbedDim, neural::kDepressionLevels, init_rng);

  detail::Trainer trainer(cfg);
  trainer.add("lens.alpha", &alpha, cfg.freeze_lens, true);
  net.visit("net", [&](const std::string& n, Tensor& t) { trainer.add(n, &t, false, false); });
  depression_head.visit(
      "depression", [&](const std::string& n, Tensor& t) { trainer.add(n, &t, false, false); });

  ckpt::MetricHistory hist;
  hist.header = "epoch,train_loss,val_loss,val_mae,val_hist_term";
  detail::BestTracker best;
  int first_epoch = 0;
  if (resume != nullptr) {
    require(resume->stage == "depression", "resume checkpoint is for another stage");
    detail::restore_for_resume(*resume, trainer, best, hist);
    first_epoch = detail::load_progress(*resume).next_epoch;
  }

  neural::HistogramConfig hist_cfg;
  hist_cfg.bins = cfg.histogram_bins;

  auto evaluate = [&](double* mae_out, double* hist_out) {
    ad::Tape tape;
    ad::Var alpha_v = tape.leaf(alpha, false);
    auto net_vars = neural::to_vars(tape, net, false);
    auto head_vars = neural::to_vars(tape, depression_head, false);
    auto psfs = optics::psf_stack_vars(tape, alpha_v, env.basis, env.optical, cfg.eval_depth_m);
    auto batch = detail::render_batch(tape, env, psfs, val_rows, env.optical.noise_sigma,
                                      stream_seed(env.master_seed, kStreamVal, 33));
    ad::Var emb = neural::embed_forward(tape, net_vars, batch.rows);
    ad::Var probs = softmax_rows(neural::dense_forward(tape, head_vars, emb));
    std::vector<int> scores(val_rows.size());
    for (std::size_t i = 0; i < val_rows.size(); ++i) scores[i] = data.rows[val_rows[i]].score;
    auto parts = neural::loss_depression(tape, emb, probs, scores, hist_cfg);
    if (mae_out) {
      double abs_sum = 0.0;
      for (std::size_t i = 0; i < val_rows.size(); ++i) {
        double expect = 0.0;
        for (int l = 0; l < neural::kDepressionLevels; ++l)
          expect += probs.value().re[i * neural::kDepressionLevels + static_cast<std::size_t>(l)] *
                    kLevelCenters[static_cast<std::size_t>(l)];
        abs_sum += std::abs(expect - static_cast<double>(scores[i]));
      }
      *mae_out = abs_sum / static_cast<double>(val_rows.size());
    }
    if (hist_out)
      *hist_out = parts.histogram_skipped ? std::nan("") : parts.histogram.value().item();
    return parts.total.value().item();
  };

  if (resume == nullptr) {
    double mae = 0, ht = 0;
    const double v0 = evaluate(&mae, &ht);
    hist.rows.push_back({0.0, std::nan(""), v0, mae, ht});
    best.consider(v0, 0, trainer);
  }

  for (int epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    double train_loss_sum = 0.0;
    std::size_t steps = 0;
    Rng shuffle_rng(stream_seed(env.master_seed, kStreamShuffle, 3, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order = train_rows;
    detail::shuffle(order, shuffle_rng);
    Rng depth_rng(stream_seed(env.master_seed, kStreamDepth, 3, static_cast<std::uint64_t>(epoch)));

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (stop - start < 2) continue;  // depression loss needs a pairable batch
      const std::vector<std::size_t> rows(order.begin() + static_cast<long>(start),
                                          order.begin() + static_cast<long>(stop));
      const double depth = depth_rng.uniform(env.optical.depth_min_m, env.optical.depth_max_m);

      ad::Tape tape;
      auto vars = trainer.record(tape);
      auto net_vars = neural::EmbedNetVars{{vars.at("net.l1.w"), vars.at("net.l1.b")},
                                           {vars.at("net.l2.w"), vars.at("net.l2.b")}};
      auto head_vars = neural::DenseVars{vars.at("depression.w"), vars.at("depression.b")};
      auto psfs = optics::psf_stack_vars(tape, vars.at("lens.alpha"), env.basis, env.optical, depth);
      auto batch = detail::render_batch(
          tape, env, psfs, rows, env.optical.noise_sigma,
          stream_seed(env.master_seed, kStreamNoise, 3,
                      static_cast<std::uint64_t>(epoch) * 100000 + start));
      ad::Var emb = neural::embed_forward(tape, net_vars, batch.rows);
      ad::Var probs = softmax_rows(neural::dense_forward(tape, head_vars, emb));
      std::vector<int> scores(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) scores[i] = data.rows[rows[i]].score;
      auto parts = neural::loss_depression(tape, emb, probs, scores, hist_cfg);

      trainer.step(tape, parts.total);
      train_loss_sum += parts.total.value().item();
      steps += 1;
    }

    double mae = 0, ht = 0;
    const double val_loss = evaluate(&mae, &ht);
    hist.rows.push_back({static_cast<double>(epoch + 1),
                         steps ? train_loss_sum / static_cast<double>(steps) : std::nan(""),
                         val_loss, mae, ht});
    best.consider(val_loss, epoch + 1, trainer);
  }

  detail::write_metrics_csv(env, 3, hist);
  return detail::finish_checkpoint("depression", trainer, best, hist, cfg.epochs);
}

// ---- stage 4: fusion ----

// With the default config everything outside the fusion block is frozen
// (and asserted gradient-free each step). The from-scratch ablation is
// cfg.freeze_* = false with pretrained_net = false and null checkpoints:
// the whole model trains under the score loss alone.
inline ckpt::Checkpoint run_stage4_fusion(TrainEnv& env, const ckpt::Checkpoint* ck2,
                                          const ckpt::Checkpoint* ck3, const StageConfig& cfg,
                                          const ckpt::Checkpoint* resume = nullptr) {
  cfg.validate();
  require(cfg.stage == 4, "config is not a stage-4 config");
  if (cfg.pretrained_net) {
    require(ck2 != nullptr && ck3 != nullptr, "stage 4 needs stage-2 and stage-3 checkpoints");
    require(ck2->stage == "emotion", "stage 4 wants an emotion-stage checkpoint");
    require(ck3->stage == "depression", "stage 4 wants a depression-stage checkpoint");
  }
  const auto& data = *env.data;
  const auto train_rows = data.rows_in(synthface::Split::kTrain);
  const auto val_rows = data.rows_in(synthface::Split::kVal);

  Rng init_rng(stream_seed(env.master_seed, kStreamInit, 4));
  Tensor alpha;
  neural::EmbedNet emotion_net, depression_net;
  emotion_net.init(3 * env.images[0][0].size(), init_rng);
  depression_net.init(3 * env.images[0][0].size(), init_rng);
  if (cfg.pretrained_net) {
    alpha = ck3->get("lens.alpha");
    emotion_net.l1.w = ck2->get("net.l1.w");
    emotion_net.l1.b = ck2->get("net.l1.b");
    emotion_net.l2.w = ck2->get("net.l2.w");
    emotion_net.l2.b = ck2->get("net.l2.b");
    depression_net.l1.w = ck3->get("net.l1.w");
    depression_net.l1.b = ck3->get("net.l1.b");
    depression_net.l2.w = ck3->get("net.l2.w");
    depression_net.l2.b = ck3->get("net.l2.b");
  } else {
    zernike::LensProfile lens = zernike::LensProfile::default_init(env.basis.q);
    alpha = Tensor::from({static_cast<std::size_t>(env.basis.q)}, lens.alpha);
  }
  neural::FusionParams fusion;
  fusion.init(init_rng);

  detail::Trainer trainer(cfg);
  trainer.add("lens.alpha", &alpha, cfg.freeze_lens, true);
  emotion_net.visit("emotion_net", [&](const std::string& n, Tensor& t) {
    trainer.add(n, &t, cfg.freeze_nets, false);
  });
  depression_net.visit("depression_net", [&](const std::string& n, Tensor& t) {
    trainer.add(n, &t, cfg.freeze_nets, false);
  });
  fusion.visit("fusion",
               [&](const std::string& n, Tensor& t) { trainer.add(n, &t, false, false); });

  ckpt::MetricHistory hist;
  hist.header = "epoch,train_loss,val_loss,val_mae";
  detail::BestTracker best;
  int first_epoch = 0;
  if (resume != nullptr) {
    require(resume->stage == "fusion", "resume checkpoint is for another stage");
    detail::restore_for_resume(*resume, trainer, best, hist);
    first_epoch = detail::load_progress(*resume).next_epoch;
  }

  // weights that must stay bit-identical under the freeze contract
  std::map<std::string, Tensor> frozen_snapshot;
  for (const auto& e : trainer.entries())
    if (e.frozen) frozen_snapshot[e.name] = *e.tensor;

  auto forward_scores = [&](ad::Tape& tape, const std::map<std::string, ad::Var>& vars,
                            const std::vector<std::size_t>& rows, std::uint64_t noise_seed,
                            double depth) {
    auto e_vars = neural::EmbedNetVars{{vars.at("emotion_net.l1.w"), vars.at("emotion_net.l1.b")},
                                       {vars.at("emotion_net.l2.w"), vars.at("emotion_net.l2.b")}};
    auto d_vars = neural::EmbedNetVars{
        {vars.at("depression_net.l1.w"), vars.at("depression_net.l1.b")},
        {vars.at("depression_net.l2.w"), vars.at("depression_net.l2.b")}};
    neural::FusionVars f_vars;
    for (int i = 0; i < neural::kFusionBlocks; ++i) {
      const std::string ed = "fusion.ed" + std::to_string(i);
      const std::string de = "fusion.de" + std::to_string(i);
      f_vars.e_to_d[static_cast<std::size_t>(i)] = {vars.at(ed + ".wq"), vars.at(ed + ".wk"),
                                                    vars.at(ed + ".wv"), vars.at(ed + ".wo")};
      f_vars.d_to_e[static_cast<std::size_t>(i)] = {vars.at(de + ".wq"), vars.at(de + ".wk"),
                                                    vars.at(de + ".wv"), vars.at(de + ".wo")};
    }
    f_vars.score = neural::DenseVars{vars.at("fusion.score.w"), vars.at("fusion.score.b")};

    auto psfs = optics::psf_stack_vars(tape, vars.at("lens.alpha"), env.basis, env.optical, depth);
    auto batch = detail::render_batch(tape, env, psfs, rows, env.optical.noise_sigma, noise_seed);
    ad::Var f_e = neural::embed_forward(tape, e_vars, batch.rows);
    ad::Var f_d = neural::embed_forward(tape, d_vars, batch.rows);
    std::vector<ad::Var> preds;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      ad::Var fused = neural::fuse(tape, f_vars, detail::embedding_row(tape, f_e, i),
                                   detail::embedding_row(tape, f_d, i));
      preds.push_back(neural::fused_score(tape, f_vars, fused));
    }
    return tape.concat(preds);
  };

  auto evaluate = [&](double* mae_out) {
    ad::Tape tape;
    std::map<std::string, ad::Var> vars;
    for (const auto& e : trainer.entries()) vars.emplace(e.name, tape.leaf(*e.tensor, false));
    ad::Var preds =
        forward_scores(tape, vars, val_rows, stream_seed(env.master_seed, kStreamVal, 44),
                       cfg.eval_depth_m);
    Tensor truth = Tensor::zeros({val_rows.size()});
    for (std::size_t i = 0; i < val_rows.size(); ++i)
      truth.re[i] = static_cast<double>(data.rows[val_rows[i]].score);
    ad::Var ls = neural::loss_score(preds, tape.constant(truth));
    if (mae_out) {
      double abs_sum = 0.0;
      for (std::size_t i = 0; i < val_rows.size(); ++i)
        abs_sum += std::abs(neural::clamp_score(preds.value().re[i]) - truth.re[i]);
      *mae_out = abs_sum / static_cast<double>(val_rows.size());
    }
    return ls.value().item();
  };

  if (resume == nullptr) {
    double mae = 0;
    const double v0 = evaluate(&mae);
    hist.rows.push_back({0.0, std::nan(""), v0, mae});
    best.consider(v0, 0, trainer);
  }

  for (int epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    double train_loss_sum = 0.0;
    std::size_t steps = 0;
    Rng shuffle_rng(stream_seed(env.master_seed, kStreamShuffle, 4, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order = train_rows;
    detail::shuffle(order, shuffle_rng);
    Rng depth_rng(stream_seed(env.master_seed, kStreamDepth, 4, static_cast<std::uint64_t>(epoch)));

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<std::size_t> rows(order.begin() + static_cast<long>(start),
                                          order.begin() + static_cast<long>(stop));
      const double depth = depth_rng.uniform(env.optical.depth_min_m, env.optical.depth_max_m);

      ad::Tape tape;
      auto vars = trainer.record(tape);
      ad::Var preds = forward_scores(
          tape, vars, rows,
          stream_seed(env.master_seed, kStreamNoise, 4,
                      static_cast<std::uint64_t>(epoch) * 100000 + start),
          depth);
      Tensor truth = Tensor::zeros({rows.size()});
      for (std::size_t i = 0; i < rows.size(); ++i)
        truth.re[i] = static_cast<double>(data.rows[rows[i]].score);
      ad::Var ls = neural::loss_score(preds, tape.constant(truth));

      trainer.step(tape, ls);
      train_loss_sum += ls.value().item();
      steps += 1;
    }

    double mae = 0;
    const double val_loss = evaluate(&mae);
    hist.rows.push_back({static_cast<double>(epoch + 1),
                         steps ? train_loss_sum / static_cast<double>(steps) : std::nan(""),
                         val_loss, mae});
    best.consider(val_loss, epoch + 1, trainer);
  }

  // freeze contract: frozen weights bit-identical before/after training
  for (const auto& [name, snap] : frozen_snapshot) {
    for (const auto& e : trainer.entries()) {
      if (e.name == name)
        require(bit_equal(*e.tensor, snap), "frozen parameter drifted: " + name);
    }
  }

  detail::write_metrics_csv(env, 4, hist);
  return detail::finish_checkpoint("fusion", trainer, best, hist, cfg.epochs);
}

// ---- prediction and evaluation on the trained chain ----

// Full prediction path: render -> f_e, f_d -> fuse -> score, clamped to
// the BDI-II range.
inline std::vector<double> predict_scores(TrainEnv& env, const ckpt::Checkpoint& ck4,
                                          const std::vector<std::size_t>& rows,
                                          double depth_m = 1.0) {
  require(ck4.stage == "fusion", "prediction needs a fusion checkpoint");
  ad::Tape tape;
  ad::Var alpha_v = tape.leaf(ck4.get("lens.alpha"), false);

  neural::EmbedNetVars e_vars{
      {tape.leaf(ck4.get("emotion_net.l1.w"), false), tape.leaf(ck4.get("emotion_net.l1.b"), false)},
      {tape.leaf(ck4.get("emotion_net.l2.w"), false), tape.leaf(ck4.get("emotion_net.l2.b"), false)}};
  neural::EmbedNetVars d_vars{{tape.leaf(ck4.get("depression_net.l1.w"), false),
                               tape.leaf(ck4.get("depression_net.l1.b"), false)},
                              {tape.leaf(ck4.get("depression_net.l2.w"), false),
                               tape.leaf(ck4.get("depression_net.l2.b"), false)}};
  neural::FusionVars f_vars;
  for (int i = 0; i < neural::kFusionBlocks; ++i) {
    const std::string ed = "fusion.ed" + std::to_string(i);
    const std::string de = "fusion.de" + std::to_string(i);
    f_vars.e_to_d[static_cast<std::size_t>(i)] = {
        tape.leaf(ck4.get(ed + ".wq"), false), tape.leaf(ck4.get(ed + ".wk"), false),
        tape.leaf(ck4.get(ed + ".wv"), false), tape.leaf(ck4.get(ed + ".wo"), false)};
    f_vars.d_to_e[static_cast<std::size_t>(i)] = {
        tape.leaf(ck4.get(de + ".wq"), false), tape.leaf(ck4.get(de + ".wk"), false),
        tape.leaf(ck4.get(de + ".wv"), false), tape.leaf(ck4.get(de + ".wo"), false)};
  }
  f_vars.score =
      neural::DenseVars{tape.leaf(ck4.get("fusion.score.w"), false),
                        tape.leaf(ck4.get("fusion.score.b"), false)};

  auto psfs = optics::psf_stack_vars(tape, alpha_v, env.basis, env.optical, depth_m);
  auto batch = detail::render_batch(tape, env, psfs, rows, env.optical.noise_sigma,
                                    stream_seed(env.master_seed, kStreamVal, 99));
  ad::Var f_e = neural::embed_forward(tape, e_vars, batch.rows);
  ad::Var f_d = neural::embed_forward(tape, d_vars, batch.rows);
  std::vector<double> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ad::Var fused = neural::fuse(tape, f_vars, detail::embedding_row(tape, f_e, i),
                                 detail::embedding_row(tape, f_d, i));
    out.push_back(neural::clamp_score(neural::fused_score(tape, f_vars, fused).value().item()));
  }
  return out;
}

inline privacy::RegressionMetrics eval_mae_stage4(TrainEnv& env, const ckpt::Checkpoint& ck4,
                                                  synthface::Split split, double depth_m = 1.0) {
  const auto rows = env.data->rows_in(split);
  const auto preds = predict_scores(env, ck4, rows, depth_m);
  std::vector<double> truths;
  for (std::size_t r : rows) truths.push_back(static_cast<double>(env.data->rows[r].score));
  return privacy::regression_metrics(preds, truths);
}

// Stage-3 models carry only the 4-level head; score readout is the
// expected level center.
inline privacy::RegressionMetrics eval_mae_stage3(TrainEnv& env, const ckpt::Checkpoint& ck3,
                                                  synthface::Split split, double depth_m = 1.0) {
  require(ck3.stage == "depression", "expected a depression-stage checkpoint");
  const auto rows = env.data->rows_in(split);
  ad::Tape tape;
  ad::Var alpha_v = tape.leaf(ck3.get("lens.alpha"), false);
  neural::EmbedNetVars net_vars{
      {tape.leaf(ck3.get("net.l1.w"), false), tape.leaf(ck3.get("net.l1.b"), false)},
      {tape.leaf(ck3.get("net.l2.w"), false), tape.leaf(ck3.get("net.l2.b"), false)}};
  neural::DenseVars head_vars{tape.leaf(ck3.get("depression.w"), false),
                              tape.leaf(ck3.get("depression.b"), false)};
  auto psfs = optics::psf_stack_vars(tape, alpha_v, env.basis, env.optical, depth_m);
  auto batch = detail::render_batch(tape, env, psfs, rows, env.optical.noise_sigma,
                                    stream_seed(env.master_seed, kStreamVal, 98));
  ad::Var emb = neural::embed_forward(tape, net_vars, batch.rows);
  ad::Var probs = softmax_rows(neural::dense_forward(tape, head_vars, emb));
  std::vector<double> preds, truths;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double expect = 0.0;
    for (int l = 0; l < neural::kDepressionLevels; ++l)
      expect += probs.value().re[i * neural::kDepressionLevels + static_cast<std::size_t>(l)] *
                kLevelCenters[static_cast<std::size_t>(l)];
    preds.push_back(expect);
    truths.push_back(static_cast<double>(env.data->rows[rows[i]].score));
  }
  return privacy::regression_metrics(preds, truths);
}

// PSFs of a trained lens at the evaluation depth, for probes and attacks.
inline std::array<Tensor, 3> lens_kernels(TrainEnv& env, const Tensor& alpha,
                                          double depth_m = 1.0) {
  zernike::LensProfile lens;
  lens.alpha = alpha.re;
  return optics::psf_stack(lens, env.basis, env.optical, depth_m).psfs;
}

}  // namespace lensveil::pipeline
