#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cavinet/augment.hpp"
#include "cavinet/checkpoint.hpp"
#include "cavinet/dataset.hpp"
#include "cavinet/evaluation.hpp"
#include "cavinet/model.hpp"
#include "cavinet/synthetic.hpp"

namespace cavinet {

// Plain mini-batch SGD with an inverse-time learning-rate schedule
// eta_t = eta / (1 + decay * t). Gradients are averaged over the batch so the
// learning rate is batch-size independent. No momentum, no weight decay.

struct TrainConfig {
  double eta = 1e-3;
  double decay = 1e-6;
  Index batch_size = 25;
  Index epochs = 30;
  double weight_alpha = 55, weight_beta = 30, weight_gamma = 15;  // ratios
  double lambda = 0.2;
  double dropout_p = 0.6;
  Index freeze_depth = 0;
  bool tied_weights = false;
  std::uint64_t seed = 1;

  Index pairs_per_epoch = 600;
  double positive_fraction = 0.5;
  bool augment = false;
  AugmentPolicy augment_policy;
  Index eval_pairs = 200;   // fixed verification pair sets for epoch metrics
  Index eval_images = 200;  // cap on rank-1 evaluation images per modality

  LossWeights loss_weights() const {
    return LossWeights::from_ratios(weight_alpha, weight_beta, weight_gamma);
  }

  void validate() const {
    if (eta <= 0) raise<ConfigError>("train: eta must be > 0");
    if (decay < 0) raise<ConfigError>("train: decay must be >= 0");
    if (batch_size < 1) raise<ConfigError>("train: batch_size must be >= 1");
    if (epochs < 0) raise<ConfigError>("train: epochs must be >= 0");
    if (lambda < 0) raise<ConfigError>("train: lambda must be >= 0");
    if (dropout_p < 0 || dropout_p >= 1)
      raise<ConfigError>("train: dropout_p must lie in [0, 1)");
    if (pairs_per_epoch < 1) raise<ConfigError>("train: pairs_per_epoch must be >= 1");
    (void)loss_weights();
  }
};

inline double learning_rate_at(const TrainConfig& cfg, Index step) {
  return cfg.eta / (1.0 + cfg.decay * static_cast<double>(step));
}

struct EpochRecord {
  Index epoch = 0;  // 1-based
  LossBreakdown mean_loss;
  double train_ver_acc = 0, val_ver_acc = 0;
  double train_rank1_cari = 0, train_rank1_visual = 0;
  double val_rank1_cari = 0, val_rank1_visual = 0;
  double lr = 0;
  double wall_sec = 0;
};

struct RunLog {
  std::vector<EpochRecord> epochs;
  Index best_epoch = 0;  // 1-based, 0 = none
  double best_val_ver_acc = -1.0;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},
       {"loss",
        {{"verification", r.mean_loss.verification},
         {"cari_id", r.mean_loss.cari_id},
         {"visual_id", r.mean_loss.visual_id},
         {"ortho", r.mean_loss.ortho},
         {"total", r.mean_loss.total}}},
       {"train_ver_acc", r.train_ver_acc},
       {"val_ver_acc", r.val_ver_acc},
       {"train_rank1_cari", r.train_rank1_cari},
       {"train_rank1_visual", r.train_rank1_visual},
       {"val_rank1_cari", r.val_rank1_cari},
       {"val_rank1_visual", r.val_rank1_visual},
       {"lr", r.lr},
       {"wall_sec", r.wall_sec}};
}

// ---------------------------------------------------------------------------
// update rule

// Applies p <- p - eta_t * g over the registry. Frozen entries are skipped
// (their gradients are zero anyway). In tied mode the two branches' gradients
// are averaged and the same update is written to both, keeping them
// bit-identical step after step.
template <class Scalar>
void sgd_apply(std::vector<ParamRef<Scalar>>& refs, std::vector<Tensor<Scalar>>& grads,
               double eta_t, bool tied) {
  if (refs.size() != grads.size())
    raise<UsageError>("sgd: ", grads.size(), " gradients for ", refs.size(),
                      " parameters");
  if (tied) {
    std::size_t nb = 0;
    while (nb < refs.size() && refs[nb].name.rfind("branch_c.", 0) == 0) ++nb;
    for (std::size_t i = 0; i < nb; ++i) {
      auto& gc = grads[i];
      auto& gv = grads[i + nb];
      gc.array() = Scalar(0.5) * (gc.array() + gv.array());
      gv = gc;
    }
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].frozen) continue;
    if (grads[i].size() != refs[i].size)
      raise<UsageError>("sgd: gradient size mismatch for ", refs[i].name);
    Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> p(refs[i].data, refs[i].size);
    p -= static_cast<Scalar>(eta_t) * grads[i].array();
  }
}

template <class Scalar>
struct Batch {
  Tensor<Scalar> cari;    // (N,C,H,W)
  Tensor<Scalar> visual;  // (N,C,H,W)
  std::vector<PairLabels> labels;
};

// One optimizer step; throws NumericError naming the first non-finite tensor.
template <class Scalar>
LossBreakdown sgd_step(CaViNet<Scalar>& model, const Batch<Scalar>& batch,
                       const LossWeights& weights, double eta_t, bool tied,
                       RandomStream* dropout_rng) {
  if (batch.labels.empty()) raise<UsageError>("sgd: empty batch");
  ModelTrace<Scalar> trace =
      forward_model(model, batch.cari, batch.visual, Mode::kTrain, dropout_rng);
  LossBreakdown lb = compute_loss(model, trace, batch.labels, weights);
  if (!std::isfinite(lb.total)) {
    std::string name = first_nonfinite(trace);
    raise<NumericError>("training aborted: non-finite loss (first bad tensor: ",
                        name.empty() ? "loss terms" : name, ")");
  }
  auto grads = flatten_gradients(model, backward_model(model, trace, batch.labels, weights));
  auto refs = param_refs(model);
  sgd_apply(refs, grads, eta_t, tied);
  return lb;
}

// ---------------------------------------------------------------------------
// training driver

template <class Scalar>
struct TrainData {
  const DatasetManifest* manifest = nullptr;
  const SplitSpec* split = nullptr;
  ImageStore<Scalar>* store = nullptr;
};

namespace detail {

template <class Scalar>
Batch<Scalar> assemble_batch(const TrainConfig& cfg, TrainData<Scalar>& data,
                             const std::vector<PairSample>& pairs, std::size_t lo,
                             std::size_t hi, const Shape& img_shape, Index epoch) {
  Batch<Scalar> batch;
  Index n = static_cast<Index>(hi - lo);
  batch.cari = Tensor<Scalar>({n, img_shape[0], img_shape[1], img_shape[2]});
  batch.visual = Tensor<Scalar>({n, img_shape[0], img_shape[1], img_shape[2]});
  Index stride = shape_size(img_shape);
  for (std::size_t i = lo; i < hi; ++i) {
    const PairSample& p = pairs[i];
    Tensor<Scalar> cimg = data.store->image(p.cari_record);
    Tensor<Scalar> vimg = data.store->image(p.visual_record);
    if (cfg.augment) {
      RandomStream arng = substream(cfg.seed, "augment",
                                    static_cast<std::uint64_t>(epoch),
                                    static_cast<std::uint64_t>(i));
      cimg = augment(cimg, cfg.augment_policy, arng);
      vimg = augment(vimg, cfg.augment_policy, arng);
    }
    Index at = static_cast<Index>(i - lo) * stride;
    std::copy(cimg.data(), cimg.data() + stride, batch.cari.data() + at);
    std::copy(vimg.data(), vimg.data() + stride, batch.visual.data() + at);
    batch.labels.push_back(p.labels);
  }
  return batch;
}

// Deterministic capped subset of a partition's records for rank-1 metrics.
inline std::vector<Index> rank1_subset(const DatasetManifest& m, const SplitSpec& split,
                                       Partition part, Modality mod, Index cap,
                                       std::uint64_t seed) {
  auto recs = split.records_in(m, part, mod);
  RandomStream rng = substream(seed, "eval/rank1_subset",
                               static_cast<std::uint64_t>(part) * 2 +
                                   (mod == Modality::kVisual ? 1 : 0));
  for (Index i = static_cast<Index>(recs.size()) - 1; i > 0; --i)
    std::swap(recs[static_cast<std::size_t>(i)],
              recs[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  if (static_cast<Index>(recs.size()) > cap)
    recs.resize(static_cast<std::size_t>(cap));
  return recs;
}

}  // namespace detail

// Trains in place. When out_dir is non-empty, writes runlog.jsonl and
// summary.json there plus best.ckpt (highest validation verification accuracy,
// earliest epoch on ties) and final.ckpt.
template <class Scalar>
RunLog train(CaViNet<Scalar>& model, TrainData<Scalar> data, const TrainConfig& cfg,
             const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  if (!data.manifest || !data.split || !data.store)
    raise<UsageError>("train: dataset not wired");
  if (model.config.identity_count != data.split->class_count)
    raise<ConfigError>("train: model built for ", model.config.identity_count,
                       " identities but split has ", data.split->class_count);

  const LossWeights weights = cfg.loss_weights();
  const Shape& img_shape = model.config.input_shape;
  const bool has_val =
      !data.split->records_in(*data.manifest, Partition::kVal, Modality::kCaricature)
           .empty();

  // fixed evaluation sets, independent of the epoch streams
  RandomStream tp_rng = substream(cfg.seed, "eval/train_pairs");
  auto train_eval_pairs = sample_pairs(*data.manifest, *data.split, Partition::kTrain,
                                       cfg.eval_pairs, 0.5, tp_rng);
  std::vector<PairSample> val_eval_pairs;
  if (has_val) {
    RandomStream vp_rng = substream(cfg.seed, "eval/val_pairs");
    val_eval_pairs = sample_pairs(*data.manifest, *data.split, Partition::kVal,
                                  cfg.eval_pairs, 0.5, vp_rng);
  }
  auto r1 = [&](Partition part, Modality mod) {
    return detail::rank1_subset(*data.manifest, *data.split, part, mod,
                                cfg.eval_images, cfg.seed);
  };
  auto train_cari = r1(Partition::kTrain, Modality::kCaricature);
  auto train_vis = r1(Partition::kTrain, Modality::kVisual);
  auto val_cari = has_val ? r1(Partition::kVal, Modality::kCaricature)
                          : std::vector<Index>{};
  auto val_vis = has_val ? r1(Partition::kVal, Modality::kVisual)
                         : std::vector<Index>{};

  std::ofstream runlog_os;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    runlog_os.open(out_dir / "runlog.jsonl");
    if (!runlog_os)
      raise<IoError>("train: cannot write run log under '", out_dir.string(), "'");
  }

  RunLog log;
  Index step = 0;
  double eta_t = cfg.eta;
  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    RandomStream pair_rng = substream(cfg.seed, "pairs/train",
                                      static_cast<std::uint64_t>(epoch));
    auto pairs = sample_pairs(*data.manifest, *data.split, Partition::kTrain,
                              cfg.pairs_per_epoch, cfg.positive_fraction, pair_rng);

    LossBreakdown mean;
    Index steps_this_epoch = 0;
    for (std::size_t lo = 0; lo < pairs.size();
         lo += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t hi =
          std::min(pairs.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      Batch<Scalar> batch =
          detail::assemble_batch(cfg, data, pairs, lo, hi, img_shape, epoch);
      eta_t = learning_rate_at(cfg, step);
      RandomStream drop_rng = substream(cfg.seed, "dropout",
                                        static_cast<std::uint64_t>(step));
      LossBreakdown lb = sgd_step(model, batch, weights, eta_t, cfg.tied_weights,
                                  &drop_rng);
      mean.verification += lb.verification;
      mean.cari_id += lb.cari_id;
      mean.visual_id += lb.visual_id;
      mean.ortho += lb.ortho;
      mean.total += lb.total;
      ++step;
      ++steps_this_epoch;
    }
    double inv = 1.0 / static_cast<double>(steps_this_epoch);
    mean.verification *= inv;
    mean.cari_id *= inv;
    mean.visual_id *= inv;
    mean.ortho *= inv;
    mean.total *= inv;
    mean.weights = weights;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = mean;
    rec.lr = eta_t;
    rec.train_ver_acc =
        evaluate_verification(model, *data.store, train_eval_pairs).accuracy;
    rec.train_rank1_cari = evaluate_identification(
        model, *data.store, *data.manifest, *data.split, train_cari,
        Modality::kCaricature);
    rec.train_rank1_visual = evaluate_identification(
        model, *data.store, *data.manifest, *data.split, train_vis, Modality::kVisual);
    if (has_val) {
      rec.val_ver_acc =
          evaluate_verification(model, *data.store, val_eval_pairs).accuracy;
      rec.val_rank1_cari = evaluate_identification(
          model, *data.store, *data.manifest, *data.split, val_cari,
          Modality::kCaricature);
      rec.val_rank1_visual = evaluate_identification(
          model, *data.store, *data.manifest, *data.split, val_vis, Modality::kVisual);
    }
    rec.wall_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                       .count();
    log.epochs.push_back(rec);

    if (rec.val_ver_acc > log.best_val_ver_acc) {
      log.best_val_ver_acc = rec.val_ver_acc;
      log.best_epoch = epoch;
      if (!out_dir.empty()) save_checkpoint(model, out_dir / "best.ckpt");
    }
    if (runlog_os) {
      nlohmann::json j = rec;
      runlog_os << j.dump() << '\n';
      runlog_os.flush();
    }
  }

  if (!out_dir.empty()) {
    save_checkpoint(model, out_dir / "final.ckpt");
    if (log.best_epoch == 0) save_checkpoint(model, out_dir / "best.ckpt");
    nlohmann::json summary;
    summary["epochs"] = cfg.epochs;
    summary["steps"] = step;
    summary["best_epoch"] = log.best_epoch;
    summary["best_val_ver_acc"] = log.best_val_ver_acc;
    if (!log.epochs.empty()) summary["final"] = log.epochs.back();
    std::ofstream os(out_dir / "summary.json");
    os << summary.dump(2) << '\n';
  }
  return log;
}

}  // namespace cavinet
