#pragma once

#include <Eigen/Core>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "cavinet/layers.hpp"
#include "cavinet/rng.hpp"
#include "cavinet/tensor.hpp"

namespace cavinet {

// CaViNet: two untied convolutional branches, a projection block splitting the
// branch features into a shared subspace and a modality-specific subspace held
// apart by an orthogonality penalty, and three fully-connected heads trained
// jointly: cross-modal verification on [F_c|F_v], caricature identification on
// [F_c|G_c], visual identification on [F_v|G_v]. Concatenation order is fixed
// project-wide: shared before specific, caricature before visual.

enum class FeatureMode { kSharedPlusSpecific, kSharedOnly, kVisualOnly };

inline const char* feature_mode_name(FeatureMode m) {
  switch (m) {
    case FeatureMode::kSharedPlusSpecific: return "shared_plus_specific";
    case FeatureMode::kSharedOnly: return "shared_only";
    case FeatureMode::kVisualOnly: return "visual_features_only";
  }
  return "?";
}

inline FeatureMode feature_mode_from_name(const std::string& s) {
  if (s == "shared_plus_specific") return FeatureMode::kSharedPlusSpecific;
  if (s == "shared_only") return FeatureMode::kSharedOnly;
  if (s == "visual_features_only") return FeatureMode::kVisualOnly;
  raise<ConfigError>("unknown feature mode '", s, "'");
}

struct ConvBlockSpec {
  Index channels = 16;
  Index ksize = 3;
  Index stride = 1;
  Index pad = 0;
  bool pool = true;
  Index pool_size = 2;
  Index pool_stride = 2;
};

struct ModelConfig {
  Shape input_shape{3, 32, 32};
  std::vector<ConvBlockSpec> blocks{{16}, {32}, {128}};
  Index shared_dim = 256;
  Index specific_dim = 256;
  std::vector<Index> head_hidden{512, 128};
  Index identity_count = 0;
  double dropout_p = 0.6;
  double lambda_c = 0.2;
  double lambda_v = 0.2;
  bool tied_weights = false;
  FeatureMode feature_mode = FeatureMode::kSharedPlusSpecific;
  Index freeze_depth = 0;  // leading conv layers excluded from updates

  void validate() const {
    if (input_shape.size() != 3)
      raise<ConfigError>("model: input shape must be (C,H,W), got ",
                         shape_str(input_shape));
    if (identity_count <= 0)
      raise<ConfigError>("model: identity_count must be positive");
    if (shared_dim <= 0 || specific_dim <= 0)
      raise<ConfigError>("model: subspace dimensions must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
      raise<ConfigError>("model: dropout_p must lie in [0, 1)");
    if (lambda_c < 0.0 || lambda_v < 0.0)
      raise<ConfigError>("model: penalty multipliers must be >= 0");
    if (freeze_depth < 0 || freeze_depth > static_cast<Index>(blocks.size()))
      raise<ConfigError>("model: freeze_depth ", freeze_depth, " outside [0, ",
                         blocks.size(), "]");
  }
};

inline void to_json(nlohmann::json& j, const ConvBlockSpec& b) {
  j = {{"channels", b.channels}, {"ksize", b.ksize},         {"stride", b.stride},
       {"pad", b.pad},           {"pool", b.pool},           {"pool_size", b.pool_size},
       {"pool_stride", b.pool_stride}};
}

inline void from_json(const nlohmann::json& j, ConvBlockSpec& b) {
  b.channels = j.value("channels", Index(16));
  b.ksize = j.value("ksize", Index(3));
  b.stride = j.value("stride", Index(1));
  b.pad = j.value("pad", Index(0));
  b.pool = j.value("pool", true);
  b.pool_size = j.value("pool_size", Index(2));
  b.pool_stride = j.value("pool_stride", Index(2));
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"input_shape", c.input_shape},
       {"blocks", c.blocks},
       {"shared_dim", c.shared_dim},
       {"specific_dim", c.specific_dim},
       {"head_hidden", c.head_hidden},
       {"identity_count", c.identity_count},
       {"dropout_p", c.dropout_p},
       {"lambda_c", c.lambda_c},
       {"lambda_v", c.lambda_v},
       {"tied_weights", c.tied_weights},
       {"feature_mode", feature_mode_name(c.feature_mode)},
       {"freeze_depth", c.freeze_depth},
       {"concat_order", "shared_first,caricature_first"}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.input_shape = j.value("input_shape", Shape{3, 32, 32});
  c.blocks = j.value("blocks", std::vector<ConvBlockSpec>{{16}, {32}, {128}});
  c.shared_dim = j.value("shared_dim", Index(256));
  c.specific_dim = j.value("specific_dim", Index(256));
  c.head_hidden = j.value("head_hidden", std::vector<Index>{512, 128});
  c.identity_count = j.value("identity_count", Index(0));
  c.dropout_p = j.value("dropout_p", 0.6);
  c.lambda_c = j.value("lambda_c", 0.2);
  c.lambda_v = j.value("lambda_v", 0.2);
  c.tied_weights = j.value("tied_weights", false);
  c.feature_mode =
      feature_mode_from_name(j.value("feature_mode", std::string("shared_plus_specific")));
  c.freeze_depth = j.value("freeze_depth", Index(0));
}

// Loss-term weights; the canonical storage form is normalized to sum 1.
struct LossWeights {
  double alpha = 0.55;
  double beta = 0.30;
  double gamma = 0.15;

  static LossWeights from_ratios(double a, double b, double g) {
    if (a < 0 || b < 0 || g < 0)
      raise<ConfigError>("loss weights must be >= 0");
    double s = a + b + g;
    if (s <= 0) raise<ConfigError>("loss weights must not all be zero");
    return {a / s, b / s, g / s};
  }
};

struct PairLabels {
  int verification = 0;       // 1 iff the two identities match
  Index cari_identity = 0;
  Index visual_identity = 0;
};

struct LossBreakdown {
  double verification = 0.0;
  double cari_id = 0.0;
  double visual_id = 0.0;
  double ortho = 0.0;  // full penalty, multipliers included
  double total = 0.0;
  LossWeights weights;
};

template <class Scalar>
struct ModalityBranch {
  std::vector<LayerKernel<Scalar>> layers;
  Index freeze_depth = 0;  // leading conv layers excluded from updates
  Shape input_shape;
};

template <class Scalar>
struct ProjectionBlock {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Mat shared;            // d x k
  Mat cari_specific;     // d x m
  Mat visual_specific;   // d x m
  Scalar lambda_c = 0;
  Scalar lambda_v = 0;
};

template <class Scalar>
struct Head {
  std::vector<LayerKernel<Scalar>> layers;
};

template <class Scalar>
struct CaViNet {
  ModelConfig config;
  ModalityBranch<Scalar> cari_branch;
  ModalityBranch<Scalar> visual_branch;
  ProjectionBlock<Scalar> proj;
  Head<Scalar> verify_head;
  Head<Scalar> cari_id_head;
  Head<Scalar> visual_id_head;
  Index feature_dim = 0;  // d, shared by both branches
};

// ---------------------------------------------------------------------------
// construction

namespace detail {

template <class Scalar>
void he_init(Tensor<Scalar>& w, Index fan_in, RandomStream& rng) {
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < w.size(); ++i)
    w[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
}

template <class Scalar>
ModalityBranch<Scalar> build_branch(const ModelConfig& cfg, RandomStream rng) {
  ModalityBranch<Scalar> branch;
  branch.input_shape = cfg.input_shape;
  branch.freeze_depth = cfg.freeze_depth;
  Index channels = cfg.input_shape[0];
  for (const ConvBlockSpec& b : cfg.blocks) {
    auto conv = Conv2D<Scalar>::make(channels, b.channels, b.ksize, b.stride, b.pad);
    he_init(conv.weight, channels * b.ksize * b.ksize, rng);
    branch.layers.push_back(std::move(conv));
    branch.layers.push_back(ReLU<Scalar>{});
    if (b.pool)
      branch.layers.push_back(MaxPool2D<Scalar>{b.pool_size, b.pool_stride});
    channels = b.channels;
  }
  // Shape-check the whole stack now so bad configs fail at build time.
  stack_forward_shape(branch.layers, cfg.input_shape);
  return branch;
}

// Three affine layers; hidden ones get relu + dropout. The output affine uses
// a small Xavier-style init rather than zeros: a zero output layer would cut
// the backward signal to everything upstream at step 0.
template <class Scalar>
Head<Scalar> build_head(Index in_dim, const std::vector<Index>& hidden, Index out_dim,
                        double dropout_p, bool binary, RandomStream rng) {
  Head<Scalar> head;
  Index d = in_dim;
  for (Index width : hidden) {
    auto aff = Affine<Scalar>::make(d, width);
    he_init(aff.weight, d, rng);
    head.layers.push_back(std::move(aff));
    head.layers.push_back(ReLU<Scalar>{});
    if (dropout_p > 0.0) head.layers.push_back(Dropout<Scalar>{dropout_p});
    d = width;
  }
  auto out = Affine<Scalar>::make(d, out_dim);
  double stddev = 0.5 / std::sqrt(static_cast<double>(d));
  for (Index i = 0; i < out.weight.size(); ++i)
    out.weight[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
  head.layers.push_back(std::move(out));
  if (binary)
    head.layers.push_back(Sigmoid<Scalar>{});
  else
    head.layers.push_back(Softmax<Scalar>{});
  return head;
}

}  // namespace detail

template <class Scalar>
Index branch_output_dim(const ModalityBranch<Scalar>& branch) {
  return shape_size(stack_forward_shape(branch.layers, branch.input_shape));
}

// Head input widths per feature mode. Verification always reads [F_c|F_v];
// identification reads [F|G], [F] alone in shared-only mode.
inline Index id_head_input_dim(const ModelConfig& cfg) {
  return cfg.feature_mode == FeatureMode::kSharedOnly
             ? cfg.shared_dim
             : cfg.shared_dim + cfg.specific_dim;
}

template <class Scalar>
CaViNet<Scalar> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CaViNet<Scalar> model;
  model.config = cfg;
  model.cari_branch =
      detail::build_branch<Scalar>(cfg, substream(seed, "init/branch_c"));
  if (cfg.tied_weights)
    model.visual_branch = model.cari_branch;
  else
    model.visual_branch =
        detail::build_branch<Scalar>(cfg, substream(seed, "init/branch_v"));
  model.feature_dim = branch_output_dim(model.cari_branch);

  // The projections start as orthonormal blocks with the specific transforms
  // exactly orthogonal to the shared one, so the penalty is zero at
  // initialization and training never pays a transient for violated
  // constraints it did not cause. When the subspaces cannot all fit
  // (k + m > d), the overflow columns fall back to a gaussian fill.
  const Index d = model.feature_dim;
  using Mat = typename ProjectionBlock<Scalar>::Mat;
  RandomStream prng = substream(seed, "init/projections");
  auto gaussian_mat = [&](Index rows, Index cols, double stddev) {
    Mat m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i)
        m(i, j) = static_cast<Scalar>(prng.normal(0.0, stddev));
    return m;
  };
  Mat basis = gaussian_mat(d, d, 1.0);
  Eigen::HouseholderQR<Mat> qr(basis);
  Mat q = qr.householderQ() * Mat::Identity(d, d);

  auto take_cols = [&](Index from, Index want) {
    Index have = std::max<Index>(0, std::min(want, d - from));
    Mat m(d, want);
    if (have > 0) m.leftCols(have) = q.middleCols(from, have);
    if (have < want)
      m.rightCols(want - have) =
          gaussian_mat(d, want - have, 1.0 / std::sqrt(static_cast<double>(d)));
    return m;
  };
  model.proj.shared = take_cols(0, cfg.shared_dim);
  Index comp = std::min(cfg.shared_dim, d);  // complement starts past span(S)
  if (d > comp) {
    // rotate the complement differently for the two specific transforms
    Mat complement = q.rightCols(d - comp);
    auto rotate = [&](Index want) {
      Mat r = gaussian_mat(d - comp, want, 1.0);
      Eigen::HouseholderQR<Mat> rqr(r);
      Mat rq = rqr.householderQ() * Mat::Identity(d - comp, std::min(want, d - comp));
      Mat m(d, want);
      Index have = std::min(want, d - comp);
      m.leftCols(have).noalias() = complement * rq;
      if (have < want)
        m.rightCols(want - have) =
            gaussian_mat(d, want - have, 1.0 / std::sqrt(static_cast<double>(d)));
      return m;
    };
    model.proj.cari_specific = rotate(cfg.specific_dim);
    model.proj.visual_specific = rotate(cfg.specific_dim);
  } else {
    model.proj.cari_specific =
        gaussian_mat(d, cfg.specific_dim, 1.0 / std::sqrt(static_cast<double>(d)));
    model.proj.visual_specific =
        gaussian_mat(d, cfg.specific_dim, 1.0 / std::sqrt(static_cast<double>(d)));
  }
  model.proj.lambda_c = static_cast<Scalar>(cfg.lambda_c);
  model.proj.lambda_v = static_cast<Scalar>(cfg.lambda_v);

  model.verify_head = detail::build_head<Scalar>(
      2 * cfg.shared_dim, cfg.head_hidden, 1, cfg.dropout_p, true,
      substream(seed, "init/head_ve"));
  model.cari_id_head = detail::build_head<Scalar>(
      id_head_input_dim(cfg), cfg.head_hidden, cfg.identity_count, cfg.dropout_p,
      false, substream(seed, "init/head_ci"));
  model.visual_id_head = detail::build_head<Scalar>(
      id_head_input_dim(cfg), cfg.head_hidden, cfg.identity_count, cfg.dropout_p,
      false, substream(seed, "init/head_vi"));
  return model;
}

// Zeroes every head's output affine; sigmoid(0) = 0.5 and a uniform softmax
// make the untrained predictions maximally uncertain, exactly.
template <class Scalar>
void zero_head_outputs(CaViNet<Scalar>& model) {
  for (Head<Scalar>* head :
       {&model.verify_head, &model.cari_id_head, &model.visual_id_head}) {
    auto& aff = std::get<Affine<Scalar>>(head->layers[head->layers.size() - 2]);
    aff.weight.set_zero();
    aff.bias.set_zero();
  }
}

// ---------------------------------------------------------------------------
// parameter registry: stable names in a stable order, used by the optimizer,
// the checkpoint format and the gradient checker alike.

template <class Scalar>
struct ParamRef {
  std::string name;
  Scalar* data = nullptr;
  Index size = 0;
  Shape shape;
  bool frozen = false;
};

namespace detail {

template <class Scalar>
void collect_stack_params(std::vector<LayerKernel<Scalar>>& layers,
                          const std::string& prefix, Index freeze_depth,
                          std::vector<ParamRef<Scalar>>& out) {
  Index conv_seen = 0;
  Index ordinal = 0;
  for (auto& layer : layers) {
    auto params = kernel_params(layer);
    if (params.empty()) continue;
    bool is_conv = kind(layer) == KernelKind::kConv2D;
    bool frozen = is_conv && conv_seen < freeze_depth;
    const char* tag = is_conv ? "conv" : "affine";
    out.push_back({prefix + "." + tag + std::to_string(ordinal) + ".weight",
                   params[0]->data(), params[0]->size(), params[0]->shape(), frozen});
    out.push_back({prefix + "." + tag + std::to_string(ordinal) + ".bias",
                   params[1]->data(), params[1]->size(), params[1]->shape(), frozen});
    if (is_conv) ++conv_seen;
    ++ordinal;
  }
}

template <class Scalar>
void collect_matrix_param(typename ProjectionBlock<Scalar>::Mat& m,
                          const std::string& name,
                          std::vector<ParamRef<Scalar>>& out) {
  out.push_back({name, m.data(), m.size(), Shape{m.rows(), m.cols()}, false});
}

}  // namespace detail

template <class Scalar>
std::vector<ParamRef<Scalar>> param_refs(CaViNet<Scalar>& model) {
  std::vector<ParamRef<Scalar>> refs;
  detail::collect_stack_params(model.cari_branch.layers, "branch_c",
                               model.cari_branch.freeze_depth, refs);
  detail::collect_stack_params(model.visual_branch.layers, "branch_v",
                               model.visual_branch.freeze_depth, refs);
  detail::collect_matrix_param<Scalar>(model.proj.shared, "proj.shared", refs);
  detail::collect_matrix_param<Scalar>(model.proj.cari_specific, "proj.cari_specific",
                                       refs);
  detail::collect_matrix_param<Scalar>(model.proj.visual_specific,
                                       "proj.visual_specific", refs);
  detail::collect_stack_params(model.verify_head.layers, "head_ve", 0, refs);
  detail::collect_stack_params(model.cari_id_head.layers, "head_ci", 0, refs);
  detail::collect_stack_params(model.visual_id_head.layers, "head_vi", 0, refs);
  return refs;
}

// ---------------------------------------------------------------------------
// feature extraction and projection

template <class Scalar>
Tensor<Scalar> extract_features(const ModalityBranch<Scalar>& branch,
                                const Tensor<Scalar>& image, Mode mode,
                                RandomStream* rng = nullptr,
                                StackTrace<Scalar>* trace = nullptr) {
  bool batched = image.rank() == 4;
  Shape expected = branch.input_shape;
  Shape actual = image.shape();
  if (batched) actual = Shape(actual.begin() + 1, actual.end());
  if (actual != expected)
    raise<ShapeError>("branch: expected input shape ", shape_str(expected), ", got ",
                      shape_str(actual));
  Tensor<Scalar> y = stack_forward(branch.layers, image, mode, rng, trace);
  Index n = batched ? image.dim(0) : 1;
  Index d = y.size() / n;
  if (batched)
    y.reshape({n, d});
  else
    y.reshape({d});
  return y;
}

// F = S^T x per sample; batched as rows: F = X * S for row-major X (N x d).
template <class Scalar>
struct ProjectedFeatures {
  Tensor<Scalar> shared_c, specific_c;  // F_c (N,k), G_c (N,m)
  Tensor<Scalar> shared_v, specific_v;  // F_v (N,k), G_v (N,m)
};

namespace detail {
template <class Scalar>
Tensor<Scalar> project_rows(const Tensor<Scalar>& x,
                            const typename ProjectionBlock<Scalar>::Mat& m) {
  Index n, d;
  if (!split_dense(x.shape(), n, d) || d != m.rows())
    raise<ShapeError>("project: feature dim ", shape_str(x.shape()),
                      " does not match transform rows ", m.rows());
  Tensor<Scalar> out(x.rank() == 1 ? Shape{m.cols()} : Shape{n, m.cols()});
  out.matrix(n, m.cols()).noalias() = x.matrix(n, d) * m;
  return out;
}
}  // namespace detail

template <class Scalar>
ProjectedFeatures<Scalar> project(const ProjectionBlock<Scalar>& proj,
                                  const Tensor<Scalar>& x_cari,
                                  const Tensor<Scalar>& x_visual) {
  ProjectedFeatures<Scalar> f;
  f.shared_c = detail::project_rows(x_cari, proj.shared);
  f.specific_c = detail::project_rows(x_cari, proj.cari_specific);
  f.shared_v = detail::project_rows(x_visual, proj.shared);
  f.specific_v = detail::project_rows(x_visual, proj.visual_specific);
  return f;
}

// lambda_c * ||S_c^T S||_F^2 + lambda_v * ||S_v^T S||_F^2
template <class Scalar>
double ortho_penalty(const ProjectionBlock<Scalar>& proj) {
  double pc = (proj.cari_specific.transpose() * proj.shared).squaredNorm();
  double pv = (proj.visual_specific.transpose() * proj.shared).squaredNorm();
  return static_cast<double>(proj.lambda_c) * pc +
         static_cast<double>(proj.lambda_v) * pv;
}

// Analytic penalty gradients; these are the extra terms the constraints add to
// the plain chained gradients.
template <class Scalar>
void add_penalty_gradients(const ProjectionBlock<Scalar>& proj,
                           typename ProjectionBlock<Scalar>::Mat& g_shared,
                           typename ProjectionBlock<Scalar>::Mat& g_cari,
                           typename ProjectionBlock<Scalar>::Mat& g_visual) {
  const auto& s = proj.shared;
  const auto& sc = proj.cari_specific;
  const auto& sv = proj.visual_specific;
  if (proj.lambda_c != Scalar(0)) {
    g_shared.noalias() += Scalar(2) * proj.lambda_c * (sc * (sc.transpose() * s));
    g_cari.noalias() += Scalar(2) * proj.lambda_c * (s * (s.transpose() * sc));
  }
  if (proj.lambda_v != Scalar(0)) {
    g_shared.noalias() += Scalar(2) * proj.lambda_v * (sv * (sv.transpose() * s));
    g_visual.noalias() += Scalar(2) * proj.lambda_v * (s * (s.transpose() * sv));
  }
}

// ---------------------------------------------------------------------------
// full forward/backward

template <class Scalar>
struct ModelTrace {
  Mode mode = Mode::kEval;
  Index batch = 0;
  StackTrace<Scalar> cari_trace, visual_trace, extra_trace;
  Tensor<Scalar> x_cari, x_visual, x_extra;  // (N,d); extra: caricature image
                                             // through the visual branch in
                                             // visual-features-only mode
  ProjectedFeatures<Scalar> feats;
  Tensor<Scalar> extra_shared, extra_specific;
  Tensor<Scalar> verify_in, cari_id_in, visual_id_in;
  StackTrace<Scalar> verify_trace, cari_id_trace, visual_id_trace;
  Tensor<Scalar> verify_out;    // (N,1) sigmoid outputs
  Tensor<Scalar> cari_id_out;   // (N,n) softmax outputs
  Tensor<Scalar> visual_id_out;
};

namespace detail {

template <class Scalar>
Tensor<Scalar> hcat(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Index n, da, db;
  split_dense(a.shape(), n, da);
  Index nb;
  split_dense(b.shape(), nb, db);
  if (n != nb) raise<ShapeError>("hcat: batch mismatch");
  Tensor<Scalar> out(a.rank() == 1 ? Shape{da + db} : Shape{n, da + db});
  out.matrix(n, da + db).leftCols(da) = a.matrix(n, da);
  out.matrix(n, da + db).rightCols(db) = b.matrix(n, db);
  return out;
}

template <class Scalar>
void hsplit_add(const Tensor<Scalar>& g, Tensor<Scalar>& ga, Tensor<Scalar>& gb) {
  Index n, da, db;
  split_dense(ga.shape(), n, da);
  Index nb;
  split_dense(gb.shape(), nb, db);
  ga.matrix(n, da) += g.matrix(n, da + db).leftCols(da);
  gb.matrix(n, db) += g.matrix(n, da + db).rightCols(db);
}

}  // namespace detail

// Runs both branches, the projection block and all three heads over a batch of
// cross-modal pairs. Dropout draws from `rng` in train mode.
template <class Scalar>
ModelTrace<Scalar> forward_model(const CaViNet<Scalar>& model, const Tensor<Scalar>& cari,
                                 const Tensor<Scalar>& visual, Mode mode,
                                 RandomStream* rng = nullptr) {
  ModelTrace<Scalar> trace;
  trace.mode = mode;
  trace.batch = cari.rank() == 4 ? cari.dim(0) : 1;
  if ((visual.rank() == 4 ? visual.dim(0) : 1) != trace.batch)
    raise<ShapeError>("forward: caricature and visual batch sizes differ");

  trace.x_cari =
      extract_features(model.cari_branch, cari, mode, rng, &trace.cari_trace);
  trace.x_visual =
      extract_features(model.visual_branch, visual, mode, rng, &trace.visual_trace);
  trace.feats = project(model.proj, trace.x_cari, trace.x_visual);

  trace.verify_in = detail::hcat(trace.feats.shared_c, trace.feats.shared_v);
  switch (model.config.feature_mode) {
    case FeatureMode::kSharedPlusSpecific:
      trace.cari_id_in = detail::hcat(trace.feats.shared_c, trace.feats.specific_c);
      trace.visual_id_in = detail::hcat(trace.feats.shared_v, trace.feats.specific_v);
      break;
    case FeatureMode::kSharedOnly:
      trace.cari_id_in = trace.feats.shared_c;
      trace.visual_id_in = trace.feats.shared_v;
      break;
    case FeatureMode::kVisualOnly:
      // Both identification tasks read features extracted by the visual
      // branch from their own image.
      trace.x_extra =
          extract_features(model.visual_branch, cari, mode, rng, &trace.extra_trace);
      trace.extra_shared = detail::project_rows(trace.x_extra, model.proj.shared);
      trace.extra_specific =
          detail::project_rows(trace.x_extra, model.proj.visual_specific);
      trace.cari_id_in = detail::hcat(trace.extra_shared, trace.extra_specific);
      trace.visual_id_in = detail::hcat(trace.feats.shared_v, trace.feats.specific_v);
      break;
  }

  trace.verify_out = stack_forward(model.verify_head.layers, trace.verify_in, mode,
                                   rng, &trace.verify_trace);
  trace.cari_id_out = stack_forward(model.cari_id_head.layers, trace.cari_id_in, mode,
                                    rng, &trace.cari_id_trace);
  trace.visual_id_out = stack_forward(model.visual_id_head.layers, trace.visual_id_in,
                                      mode, rng, &trace.visual_id_trace);
  return trace;
}

inline constexpr double kProbClamp = 1e-12;

namespace detail {
inline double clamp_prob(double p) {
  return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
}
}  // namespace detail

// Batch-mean loss terms; the penalty enters once, not per sample.
template <class Scalar>
LossBreakdown compute_loss(const CaViNet<Scalar>& model,
                           const ModelTrace<Scalar>& trace,
                           const std::vector<PairLabels>& labels,
                           const LossWeights& weights) {
  const Index n = trace.batch;
  if (static_cast<Index>(labels.size()) != n)
    raise<ShapeError>("loss: ", labels.size(), " labels for batch of ", n);
  const Index n_id = model.config.identity_count;
  for (const PairLabels& l : labels) {
    if (l.cari_identity < 0 || l.cari_identity >= n_id || l.visual_identity < 0 ||
        l.visual_identity >= n_id)
      raise<ShapeError>("loss: identity label outside [0, ", n_id, ")");
    if (l.verification != 0 && l.verification != 1)
      raise<ShapeError>("loss: verification label must be 0 or 1");
  }

  LossBreakdown out;
  out.weights = weights;
  for (Index i = 0; i < n; ++i) {
    double o = detail::clamp_prob(static_cast<double>(trace.verify_out[i]));
    double y = labels[static_cast<std::size_t>(i)].verification;
    out.verification += -(y * std::log(o) + (1.0 - y) * std::log(1.0 - o));
    double oc = detail::clamp_prob(static_cast<double>(
        trace.cari_id_out[i * n_id + labels[static_cast<std::size_t>(i)].cari_identity]));
    out.cari_id += -std::log(oc);
    double ov = detail::clamp_prob(static_cast<double>(
        trace.visual_id_out[i * n_id +
                            labels[static_cast<std::size_t>(i)].visual_identity]));
    out.visual_id += -std::log(ov);
  }
  out.verification /= static_cast<double>(n);
  out.cari_id /= static_cast<double>(n);
  out.visual_id /= static_cast<double>(n);
  out.ortho = ortho_penalty(model.proj);
  out.total = weights.alpha * out.verification + weights.beta * out.cari_id +
              weights.gamma * out.visual_id + out.ortho;
  return out;
}

// Single-pair convenience wrapper.
template <class Scalar>
LossBreakdown loss(const CaViNet<Scalar>& model, const Tensor<Scalar>& cari,
                   const Tensor<Scalar>& visual, const PairLabels& labels,
                   const LossWeights& weights, Mode mode = Mode::kEval,
                   RandomStream* rng = nullptr) {
  ModelTrace<Scalar> trace = forward_model(model, cari, visual, mode, rng);
  return compute_loss(model, trace, {labels}, weights);
}

template <class Scalar>
struct ModelGradients {
  using Mat = typename ProjectionBlock<Scalar>::Mat;
  std::vector<std::vector<Tensor<Scalar>>> cari_branch, visual_branch;
  Mat shared, cari_specific, visual_specific;
  std::vector<std::vector<Tensor<Scalar>>> verify_head, cari_id_head, visual_id_head;
};

namespace detail {

// Zeroes the gradients of the first freeze_depth conv layers. Frozen
// parameters still get (zero) entries, never omissions.
template <class Scalar>
void zero_frozen(const std::vector<LayerKernel<Scalar>>& layers, Index freeze_depth,
                 std::vector<std::vector<Tensor<Scalar>>>& grads) {
  Index conv_seen = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (kind(layers[i]) != KernelKind::kConv2D) continue;
    if (conv_seen < freeze_depth)
      for (auto& g : grads[i]) g.set_zero();
    ++conv_seen;
  }
}

template <class Scalar>
Tensor<Scalar> branch_backward(const ModalityBranch<Scalar>& branch,
                               const StackTrace<Scalar>& trace,
                               const Tensor<Scalar>& grad_features, Index batch,
                               Mode mode,
                               std::vector<std::vector<Tensor<Scalar>>>& grads) {
  Shape out_shape = stack_forward_shape(branch.layers, branch.input_shape);
  Shape full = out_shape;
  if (batch > 1 || grad_features.rank() == 2) full.insert(full.begin(), batch);
  Tensor<Scalar> g = grad_features.reshaped(full);
  std::vector<std::vector<Tensor<Scalar>>> local;
  Tensor<Scalar> gx = stack_backward(branch.layers, trace, g, mode, &local);
  zero_frozen(branch.layers, branch.freeze_depth, local);
  if (grads.empty()) {
    grads = std::move(local);
  } else {
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (std::size_t p = 0; p < grads[i].size(); ++p)
        grads[i][p].array() += local[i][p].array();
  }
  return gx;
}

}  // namespace detail

// Gradient of the batch-mean objective (weighted losses plus penalty) with
// respect to every parameter. The projection gradients carry the chained head
// terms plus the penalty terms 2*lambda_c*S_c*S_c^T*S + 2*lambda_v*S_v*S_v^T*S
// (for S), 2*lambda_c*S*S^T*S_c (for S_c) and 2*lambda_v*S*S^T*S_v (for S_v).
template <class Scalar>
ModelGradients<Scalar> backward_model(const CaViNet<Scalar>& model,
                                      const ModelTrace<Scalar>& trace,
                                      const std::vector<PairLabels>& labels,
                                      const LossWeights& weights) {
  using Mat = typename ProjectionBlock<Scalar>::Mat;
  const Index n = trace.batch;
  const Index n_id = model.config.identity_count;
  const Index k = model.config.shared_dim;
  const Index m = model.config.specific_dim;
  const double inv_n = 1.0 / static_cast<double>(n);

  // Seed gradients at the head outputs.
  Tensor<Scalar> g_ver(trace.verify_out.shape());
  Tensor<Scalar> g_ci(trace.cari_id_out.shape());
  Tensor<Scalar> g_vi(trace.visual_id_out.shape());
  for (Index i = 0; i < n; ++i) {
    const PairLabels& l = labels[static_cast<std::size_t>(i)];
    double o = detail::clamp_prob(static_cast<double>(trace.verify_out[i]));
    double y = l.verification;
    g_ver[i] = static_cast<Scalar>(weights.alpha * inv_n *
                                   (-y / o + (1.0 - y) / (1.0 - o)));
    double oc = detail::clamp_prob(
        static_cast<double>(trace.cari_id_out[i * n_id + l.cari_identity]));
    g_ci[i * n_id + l.cari_identity] =
        static_cast<Scalar>(-weights.beta * inv_n / oc);
    double ov = detail::clamp_prob(
        static_cast<double>(trace.visual_id_out[i * n_id + l.visual_identity]));
    g_vi[i * n_id + l.visual_identity] =
        static_cast<Scalar>(-weights.gamma * inv_n / ov);
  }

  ModelGradients<Scalar> grads;
  Tensor<Scalar> g_ver_in =
      stack_backward(model.verify_head.layers, trace.verify_trace, g_ver, trace.mode,
                     &grads.verify_head);
  Tensor<Scalar> g_ci_in =
      stack_backward(model.cari_id_head.layers, trace.cari_id_trace, g_ci, trace.mode,
                     &grads.cari_id_head);
  Tensor<Scalar> g_vi_in =
      stack_backward(model.visual_id_head.layers, trace.visual_id_trace, g_vi,
                     trace.mode, &grads.visual_id_head);

  // Split head-input gradients back onto the projected features.
  auto zeros_like = [&](const Tensor<Scalar>& t) { return Tensor<Scalar>(t.shape()); };
  Tensor<Scalar> g_fc = zeros_like(trace.feats.shared_c);
  Tensor<Scalar> g_gc = zeros_like(trace.feats.specific_c);
  Tensor<Scalar> g_fv = zeros_like(trace.feats.shared_v);
  Tensor<Scalar> g_gv = zeros_like(trace.feats.specific_v);
  detail::hsplit_add(g_ver_in, g_fc, g_fv);

  Tensor<Scalar> g_f_extra, g_g_extra;
  switch (model.config.feature_mode) {
    case FeatureMode::kSharedPlusSpecific:
      detail::hsplit_add(g_ci_in, g_fc, g_gc);
      detail::hsplit_add(g_vi_in, g_fv, g_gv);
      break;
    case FeatureMode::kSharedOnly:
      g_fc.array() += g_ci_in.array();
      g_fv.array() += g_vi_in.array();
      break;
    case FeatureMode::kVisualOnly:
      g_f_extra = zeros_like(trace.extra_shared);
      g_g_extra = zeros_like(trace.extra_specific);
      detail::hsplit_add(g_ci_in, g_f_extra, g_g_extra);
      detail::hsplit_add(g_vi_in, g_fv, g_gv);
      break;
  }

  // Projection backward: F = X S  =>  gS += X^T gF, gX += gF S^T.
  const Index d = model.feature_dim;
  auto xc = trace.x_cari.matrix(n, d);
  auto xv = trace.x_visual.matrix(n, d);
  grads.shared.noalias() = xc.transpose() * g_fc.matrix(n, k);
  grads.shared.noalias() += xv.transpose() * g_fv.matrix(n, k);
  grads.cari_specific.noalias() = xc.transpose() * g_gc.matrix(n, m);
  grads.visual_specific.noalias() = xv.transpose() * g_gv.matrix(n, m);

  Tensor<Scalar> g_xc(trace.x_cari.shape());
  Tensor<Scalar> g_xv(trace.x_visual.shape());
  g_xc.matrix(n, d).noalias() = g_fc.matrix(n, k) * model.proj.shared.transpose();
  g_xc.matrix(n, d).noalias() +=
      g_gc.matrix(n, m) * model.proj.cari_specific.transpose();
  g_xv.matrix(n, d).noalias() = g_fv.matrix(n, k) * model.proj.shared.transpose();
  g_xv.matrix(n, d).noalias() +=
      g_gv.matrix(n, m) * model.proj.visual_specific.transpose();

  if (model.config.feature_mode == FeatureMode::kVisualOnly) {
    auto xe = trace.x_extra.matrix(n, d);
    grads.shared.noalias() += xe.transpose() * g_f_extra.matrix(n, k);
    grads.visual_specific.noalias() += xe.transpose() * g_g_extra.matrix(n, m);
  }

  add_penalty_gradients(model.proj, grads.shared, grads.cari_specific,
                        grads.visual_specific);

  detail::branch_backward(model.cari_branch, trace.cari_trace, g_xc, n, trace.mode,
                          grads.cari_branch);
  detail::branch_backward(model.visual_branch, trace.visual_trace, g_xv, n,
                          trace.mode, grads.visual_branch);
  if (model.config.feature_mode == FeatureMode::kVisualOnly) {
    Tensor<Scalar> g_xe(trace.x_extra.shape());
    g_xe.matrix(n, d).noalias() =
        g_f_extra.matrix(n, k) * model.proj.shared.transpose();
    g_xe.matrix(n, d).noalias() +=
        g_g_extra.matrix(n, m) * model.proj.visual_specific.transpose();
    detail::branch_backward(model.visual_branch, trace.extra_trace, g_xe, n,
                            trace.mode, grads.visual_branch);
  }
  return grads;
}

// Flattens gradients into the param_refs order.
template <class Scalar>
std::vector<Tensor<Scalar>> flatten_gradients(const CaViNet<Scalar>& model,
                                              const ModelGradients<Scalar>& g) {
  std::vector<Tensor<Scalar>> flat;
  auto push_stack = [&](const std::vector<std::vector<Tensor<Scalar>>>& stack) {
    for (const auto& layer : stack)
      for (const auto& t : layer) flat.push_back(t);
  };
  auto push_mat = [&](const typename ProjectionBlock<Scalar>::Mat& m) {
    Tensor<Scalar> t({m.rows(), m.cols()});
    std::copy(m.data(), m.data() + m.size(), t.data());
    flat.push_back(std::move(t));
  };
  push_stack(g.cari_branch);
  push_stack(g.visual_branch);
  push_mat(g.shared);
  push_mat(g.cari_specific);
  push_mat(g.visual_specific);
  push_stack(g.verify_head);
  push_stack(g.cari_id_head);
  push_stack(g.visual_id_head);
  (void)model;
  return flat;
}

// ---------------------------------------------------------------------------
// prediction

struct PairPrediction {
  double verify_score = 0.0;                 // in (0,1); decide same at >= 0.5
  std::vector<double> cari_id_dist;
  std::vector<double> visual_id_dist;
};

template <class Scalar>
PairPrediction predict(const CaViNet<Scalar>& model, const Tensor<Scalar>& cari,
                       const Tensor<Scalar>& visual) {
  ModelTrace<Scalar> trace = forward_model(model, cari, visual, Mode::kEval);
  PairPrediction p;
  p.verify_score = static_cast<double>(trace.verify_out[0]);
  p.cari_id_dist.assign(trace.cari_id_out.data(),
                        trace.cari_id_out.data() + trace.cari_id_out.size());
  p.visual_id_dist.assign(trace.visual_id_out.data(),
                          trace.visual_id_out.data() + trace.visual_id_out.size());
  return p;
}

// argmax with lowest-index tie-break
inline Index argmax_lowest(const std::vector<double>& v) {
  Index best = 0;
  for (Index i = 1; i < static_cast<Index>(v.size()); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  return best;
}

// Name of the first non-finite tensor along the forward path, or empty.
template <class Scalar>
std::string first_nonfinite(const ModelTrace<Scalar>& trace) {
  auto scan_stack = [](const StackTrace<Scalar>& st, const std::string& prefix)
      -> std::string {
    for (std::size_t i = 0; i < st.size(); ++i)
      if (st[i].valid && !st[i].input.empty() && !st[i].input.all_finite())
        return prefix + ".layer" + std::to_string(i) + ".input";
    return {};
  };
  if (auto s = scan_stack(trace.cari_trace, "branch_c"); !s.empty()) return s;
  if (auto s = scan_stack(trace.visual_trace, "branch_v"); !s.empty()) return s;
  if (!trace.x_cari.all_finite()) return "features.cari";
  if (!trace.x_visual.all_finite()) return "features.visual";
  if (!trace.verify_out.all_finite()) return "head_ve.output";
  if (!trace.cari_id_out.all_finite()) return "head_ci.output";
  if (!trace.visual_id_out.all_finite()) return "head_vi.output";
  return {};
}

}  // namespace cavinet
