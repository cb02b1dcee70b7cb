#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cavinet/dataset.hpp"
#include "cavinet/image.hpp"
#include "cavinet/model.hpp"

namespace cavinet {

// Verification follows the fixed convention: predicted same-identity iff
// score >= threshold (ties count positive). Rank-1 identification takes the
// argmax with lowest-index tie-break.

struct ConfusionCounts {
  Index tp = 0, tn = 0, fp = 0, fn = 0;
  Index total() const { return tp + tn + fp + fn; }
};

struct VerificationResult {
  double accuracy = 0.0;
  ConfusionCounts counts;
  double threshold = 0.5;
};

// Metric kernels over plain scores and labels, separate from the model so an
// independent oracle can replicate them verbatim.
inline VerificationResult verification_metrics(const std::vector<double>& scores,
                                               const std::vector<int>& labels,
                                               double threshold = 0.5) {
  if (scores.empty()) raise<ConfigError>("verification: empty prediction stream");
  if (scores.size() != labels.size())
    raise<ConfigError>("verification: ", scores.size(), " scores vs ",
                       labels.size(), " labels");
  VerificationResult out;
  out.threshold = threshold;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool predicted = scores[i] >= threshold;
    bool actual = labels[i] != 0;
    if (predicted && actual) out.counts.tp++;
    else if (predicted && !actual) out.counts.fp++;
    else if (!predicted && actual) out.counts.fn++;
    else out.counts.tn++;
  }
  out.accuracy = static_cast<double>(out.counts.tp + out.counts.tn) /
                 static_cast<double>(out.counts.total());
  return out;
}

inline double rank1_accuracy(const std::vector<std::vector<double>>& scores,
                             const std::vector<Index>& labels) {
  if (scores.empty()) raise<ConfigError>("rank1: empty prediction stream");
  if (scores.size() != labels.size())
    raise<ConfigError>("rank1: ", scores.size(), " score rows vs ", labels.size(),
                       " labels");
  Index correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    correct += argmax_lowest(scores[i]) == labels[i];
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// model scoring paths

namespace detail {

template <class Scalar>
Tensor<Scalar> gather_images(ImageStore<Scalar>& store, const std::vector<Index>& recs,
                             const Shape& image_shape) {
  Tensor<Scalar> batch(
      {static_cast<Index>(recs.size()), image_shape[0], image_shape[1], image_shape[2]});
  Index stride = shape_size(image_shape);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const Tensor<Scalar>& img = store.image(recs[i]);
    if (img.shape() != image_shape)
      raise<ShapeError>("images: record ", recs[i], " has shape ",
                        shape_str(img.shape()), ", expected ",
                        shape_str(image_shape));
    std::copy(img.data(), img.data() + stride,
              batch.data() + static_cast<Index>(i) * stride);
  }
  return batch;
}

}  // namespace detail

// Verification path only: branches -> shared projections -> verification head.
// The identification heads are never consulted, which is what makes the
// unseen-identity protocol possible.
template <class Scalar>
std::vector<double> verify_scores(const CaViNet<Scalar>& model,
                                  const Tensor<Scalar>& cari_batch,
                                  const Tensor<Scalar>& visual_batch) {
  Tensor<Scalar> xc = extract_features(model.cari_branch, cari_batch, Mode::kEval);
  Tensor<Scalar> xv = extract_features(model.visual_branch, visual_batch, Mode::kEval);
  Tensor<Scalar> fc = detail::project_rows(xc, model.proj.shared);
  Tensor<Scalar> fv = detail::project_rows(xv, model.proj.shared);
  Tensor<Scalar> in = detail::hcat(fc, fv);
  Tensor<Scalar> out = stack_forward(model.verify_head.layers, in, Mode::kEval);
  return std::vector<double>(out.data(), out.data() + out.size());
}

// Identification distribution for single-modality images, honoring the model's
// feature wiring (in visual-features-only mode both tasks read the visual
// branch).
template <class Scalar>
std::vector<std::vector<double>> identification_scores(const CaViNet<Scalar>& model,
                                                       const Tensor<Scalar>& batch,
                                                       Modality modality) {
  const bool visual_only = model.config.feature_mode == FeatureMode::kVisualOnly;
  const ModalityBranch<Scalar>& branch =
      (modality == Modality::kVisual || visual_only) ? model.visual_branch
                                                     : model.cari_branch;
  const auto& specific = (modality == Modality::kVisual || visual_only)
                             ? model.proj.visual_specific
                             : model.proj.cari_specific;
  const Head<Scalar>& head = modality == Modality::kCaricature ? model.cari_id_head
                                                               : model.visual_id_head;

  Tensor<Scalar> x = extract_features(branch, batch, Mode::kEval);
  Tensor<Scalar> in;
  if (model.config.feature_mode == FeatureMode::kSharedOnly)
    in = detail::project_rows(x, model.proj.shared);
  else
    in = detail::hcat(detail::project_rows(x, model.proj.shared),
                      detail::project_rows(x, specific));
  Tensor<Scalar> out = stack_forward(head.layers, in, Mode::kEval);

  Index n = batch.rank() == 4 ? batch.dim(0) : 1;
  Index width = out.size() / n;
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    rows[static_cast<std::size_t>(i)].assign(out.data() + i * width,
                                             out.data() + (i + 1) * width);
  return rows;
}

template <class Scalar>
struct PairScores {
  std::vector<double> scores;
  std::vector<int> labels;
};

template <class Scalar>
PairScores<Scalar> score_pairs(const CaViNet<Scalar>& model, ImageStore<Scalar>& store,
                               const std::vector<PairSample>& pairs,
                               Index batch_size = 64) {
  if (pairs.empty()) raise<ConfigError>("score_pairs: empty pair stream");
  const Shape& img_shape = model.config.input_shape;
  PairScores<Scalar> out;
  for (std::size_t at = 0; at < pairs.size(); at += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(pairs.size(), at + static_cast<std::size_t>(batch_size));
    std::vector<Index> cari, vis;
    for (std::size_t i = at; i < end; ++i) {
      cari.push_back(pairs[i].cari_record);
      vis.push_back(pairs[i].visual_record);
      out.labels.push_back(pairs[i].labels.verification);
    }
    auto scores = verify_scores(model, detail::gather_images(store, cari, img_shape),
                                detail::gather_images(store, vis, img_shape));
    out.scores.insert(out.scores.end(), scores.begin(), scores.end());
  }
  return out;
}

template <class Scalar>
VerificationResult evaluate_verification(const CaViNet<Scalar>& model,
                                         ImageStore<Scalar>& store,
                                         const std::vector<PairSample>& pairs,
                                         double threshold = 0.5) {
  auto scored = score_pairs(model, store, pairs);
  return verification_metrics(scored.scores, scored.labels, threshold);
}

// Rank-1 accuracy over single-modality records. Identification is defined over
// seen identities only; an unseen-identity record is rejected.
template <class Scalar>
double evaluate_identification(const CaViNet<Scalar>& model, ImageStore<Scalar>& store,
                               const DatasetManifest& manifest, const SplitSpec& split,
                               const std::vector<Index>& records, Modality modality,
                               Index batch_size = 64) {
  if (records.empty()) raise<ConfigError>("rank1: empty image stream");
  std::vector<std::vector<double>> scores;
  std::vector<Index> labels;
  const Shape& img_shape = model.config.input_shape;
  for (std::size_t at = 0; at < records.size(); at += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(records.size(), at + static_cast<std::size_t>(batch_size));
    std::vector<Index> chunk(records.begin() + static_cast<std::ptrdiff_t>(at),
                             records.begin() + static_cast<std::ptrdiff_t>(end));
    for (Index r : chunk) {
      const auto& rec = manifest.records[static_cast<std::size_t>(r)];
      if (rec.modality != modality)
        raise<ConfigError>("rank1: record ", r, " is not ", modality_name(modality));
      Index cls = split.identity_class[static_cast<std::size_t>(rec.identity)];
      if (cls < 0)
        raise<ConfigError>("rank1: identity '",
                           manifest.identities[static_cast<std::size_t>(rec.identity)],
                           "' is unseen; identification covers seen identities only");
      labels.push_back(cls);
    }
    auto rows = identification_scores(
        model, detail::gather_images(store, chunk, img_shape), modality);
    scores.insert(scores.end(), rows.begin(), rows.end());
  }
  return rank1_accuracy(scores, labels);
}

// ---------------------------------------------------------------------------
// report and confusion-example export

struct EvalReport {
  double verification_acc_seen = -1.0;
  double verification_acc_unseen = -1.0;
  double rank1_cari = -1.0;
  double rank1_visual = -1.0;
  ConfusionCounts seen_counts;
  ConfusionCounts unseen_counts;
  double threshold = 0.5;
  Index seen_pairs = 0;
  Index unseen_pairs = 0;
  double positive_fraction = 0.5;
};

inline void to_json(nlohmann::json& j, const ConfusionCounts& c) {
  j = {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}};
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json::object();
  j["threshold"] = r.threshold;
  j["positive_fraction"] = r.positive_fraction;
  if (r.verification_acc_seen >= 0) {
    j["seen"] = {{"verification_accuracy", r.verification_acc_seen},
                 {"confusion", r.seen_counts},
                 {"pairs", r.seen_pairs}};
    if (r.rank1_cari >= 0) j["seen"]["rank1_caricature"] = r.rank1_cari;
    if (r.rank1_visual >= 0) j["seen"]["rank1_visual"] = r.rank1_visual;
  }
  if (r.verification_acc_unseen >= 0)
    j["unseen"] = {{"verification_accuracy", r.verification_acc_unseen},
                   {"confusion", r.unseen_counts},
                   {"pairs", r.unseen_pairs}};
}

// Writes up to k example montages per confusion cell under
// out/tp|tn|fp|fn/, each a caricature|visual pair with the predicted score
// stamped top-left. Empty cells get a note instead of an error.
template <class Scalar>
void export_confusions(const CaViNet<Scalar>& model, ImageStore<Scalar>& store,
                       const std::vector<PairSample>& pairs,
                       const std::filesystem::path& out_dir, Index k = 4,
                       double threshold = 0.5) {
  if (k < 1) raise<ConfigError>("confusions: k must be >= 1");
  auto scored = score_pairs(model, store, pairs);
  const char* cell_names[4] = {"tp", "tn", "fp", "fn"};
  std::vector<std::vector<std::size_t>> cells(4);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    bool predicted = scored.scores[i] >= threshold;
    bool actual = scored.labels[i] != 0;
    int cell = predicted ? (actual ? 0 : 2) : (actual ? 3 : 1);
    cells[static_cast<std::size_t>(cell)].push_back(i);
  }
  for (int c = 0; c < 4; ++c) {
    auto dir = out_dir / cell_names[c];
    std::filesystem::create_directories(dir);
    if (cells[static_cast<std::size_t>(c)].empty()) {
      std::ofstream note(dir / "empty.txt");
      note << "no " << cell_names[c] << " examples in the evaluated stream\n";
      continue;
    }
    Index written = 0;
    for (std::size_t idx : cells[static_cast<std::size_t>(c)]) {
      if (written >= k) break;
      Tensor<Scalar> montage = hstack_with_separator(
          store.image(pairs[idx].cari_record), store.image(pairs[idx].visual_record));
      char score_text[8];
      std::snprintf(score_text, sizeof(score_text), "%.2f", scored.scores[idx]);
      stamp_text(montage, score_text, 1, 1);
      char name[32];
      std::snprintf(name, sizeof(name), "%s_%02lld.png", cell_names[c],
                    static_cast<long long>(written));
      write_png(montage, dir / name);
      ++written;
    }
  }
}

}  // namespace cavinet
