#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cavinet/image.hpp"
#include "cavinet/model.hpp"

namespace cavinet {

// Qualitative analysis tools: activation maximization with a translation
// (jitter) prior, and rectified saliency over the concatenated shared +
// modality-specific features. Both are deterministic given their seed.

struct VizTarget {
  enum class Kind { kCariIdNeuron, kVisualIdNeuron, kFeature };
  Kind kind = Kind::kCariIdNeuron;
  Index neuron = 0;            // head logit index, or feature index
  Modality feature_modality = Modality::kCaricature;  // for kFeature
};

struct ActMaxConfig {
  Index steps = 64;
  double step_size = 0.5;
  Index jitter = 2;  // max translation in pixels, circular
  std::uint64_t seed = 7;
};

namespace detail {

// Circular translation; exactly invertible, which the jitter prior relies on.
template <class Scalar>
Tensor<Scalar> roll(const Tensor<Scalar>& img, Index dy, Index dx) {
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<Scalar> out(img.shape());
  for (Index k = 0; k < c; ++k)
    for (Index y = 0; y < h; ++y) {
      Index sy = ((y - dy) % h + h) % h;
      for (Index x = 0; x < w; ++x) {
        Index sx = ((x - dx) % w + w) % w;
        out(k, y, x) = img(k, sy, sx);
      }
    }
  return out;
}

// Single-modality forward through branch + projections + one id head, stopping
// at the head's logits (the affine feeding softmax).
template <class Scalar>
struct SingleModalityTrace {
  StackTrace<Scalar> branch_trace;
  Tensor<Scalar> features;           // (d)
  Tensor<Scalar> head_in;
  StackTrace<Scalar> head_trace;     // over the prefix ending at logits
  Tensor<Scalar> logits;
};

template <class Scalar>
const ModalityBranch<Scalar>& branch_for(const CaViNet<Scalar>& model, Modality m) {
  if (model.config.feature_mode == FeatureMode::kVisualOnly) return model.visual_branch;
  return m == Modality::kCaricature ? model.cari_branch : model.visual_branch;
}

template <class Scalar>
const typename ProjectionBlock<Scalar>::Mat& specific_for(const CaViNet<Scalar>& model,
                                                          Modality m) {
  if (model.config.feature_mode == FeatureMode::kVisualOnly)
    return model.proj.visual_specific;
  return m == Modality::kCaricature ? model.proj.cari_specific
                                    : model.proj.visual_specific;
}

template <class Scalar>
SingleModalityTrace<Scalar> id_logits_forward(const CaViNet<Scalar>& model,
                                              const Tensor<Scalar>& image,
                                              Modality modality) {
  SingleModalityTrace<Scalar> t;
  const auto& branch = branch_for(model, modality);
  t.features = stack_forward(branch.layers, image, Mode::kEval, nullptr,
                             &t.branch_trace);
  t.features.reshape({t.features.size()});
  Tensor<Scalar> shared = project_rows(t.features, model.proj.shared);
  if (model.config.feature_mode == FeatureMode::kSharedOnly)
    t.head_in = shared;
  else
    t.head_in = hcat(shared, project_rows(t.features, specific_for(model, modality)));

  const Head<Scalar>& head = modality == Modality::kCaricature ? model.cari_id_head
                                                               : model.visual_id_head;
  // prefix: everything up to (excluding) the terminal softmax
  std::vector<LayerKernel<Scalar>> prefix(head.layers.begin(), head.layers.end() - 1);
  t.logits = stack_forward(prefix, t.head_in, Mode::kEval, nullptr, &t.head_trace);
  return t;
}

// Gradient of a scalar at the logits (or directly at the features) with
// respect to the input image, optionally rectified after every layer.
template <class Scalar>
Tensor<Scalar> input_gradient(const CaViNet<Scalar>& model,
                              const SingleModalityTrace<Scalar>& t, Modality modality,
                              const Tensor<Scalar>& grad_logits,
                              const Tensor<Scalar>& grad_features_direct,
                              bool rectify,
                              const std::function<void(const Tensor<Scalar>&)>&
                                  observer = nullptr) {
  std::function<void(Tensor<Scalar>&)> hook;
  if (rectify)
    hook = [&](Tensor<Scalar>& g) {
      g.array() = g.array().max(Scalar(0));
      if (observer) observer(g);
    };

  Tensor<Scalar> g_feat;
  const Index k = model.config.shared_dim;
  if (!grad_logits.empty()) {
    const Head<Scalar>& head = modality == Modality::kCaricature
                                   ? model.cari_id_head
                                   : model.visual_id_head;
    std::vector<LayerKernel<Scalar>> prefix(head.layers.begin(),
                                            head.layers.end() - 1);
    Tensor<Scalar> g_head_in = stack_backward(prefix, t.head_trace, grad_logits,
                                              Mode::kEval, nullptr, hook);
    // split onto F (and G), then back through the projections
    g_feat = Tensor<Scalar>({t.features.size()});
    if (model.config.feature_mode == FeatureMode::kSharedOnly) {
      g_feat.vector().noalias() = model.proj.shared * g_head_in.vector();
    } else {
      const auto& spec = specific_for(model, modality);
      g_feat.vector().noalias() =
          model.proj.shared * g_head_in.vector().head(k) +
          spec * g_head_in.vector().tail(g_head_in.size() - k);
    }
  } else {
    g_feat = Tensor<Scalar>({t.features.size()});
    if (model.config.feature_mode == FeatureMode::kSharedOnly) {
      g_feat.vector().noalias() = model.proj.shared * grad_features_direct.vector().head(k);
    } else {
      const auto& spec = specific_for(model, modality);
      g_feat.vector().noalias() =
          model.proj.shared * grad_features_direct.vector().head(k) +
          spec * grad_features_direct.vector().tail(grad_features_direct.size() - k);
    }
  }
  if (hook) hook(g_feat);

  const auto& branch = branch_for(model, modality);
  Shape out_shape = stack_forward_shape(branch.layers, branch.input_shape);
  Tensor<Scalar> g = g_feat.reshaped(out_shape);
  return stack_backward(branch.layers, t.branch_trace, g, Mode::kEval, nullptr, hook);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// activation maximization

template <class Scalar>
struct ActMaxResult {
  Tensor<Scalar> image;
  std::vector<double> activation_trace;  // target value before each step + final
};

template <class Scalar>
double target_activation(const CaViNet<Scalar>& model, const Tensor<Scalar>& image,
                         const VizTarget& target) {
  Modality m = target.kind == VizTarget::Kind::kVisualIdNeuron
                   ? Modality::kVisual
                   : target.feature_modality;
  if (target.kind == VizTarget::Kind::kCariIdNeuron) m = Modality::kCaricature;
  auto t = detail::id_logits_forward(model, image, m);
  if (target.kind == VizTarget::Kind::kFeature) {
    if (target.neuron < 0 || target.neuron >= t.head_in.size())
      raise<ConfigError>("viz: feature index ", target.neuron, " outside [0, ",
                         t.head_in.size(), ")");
    return static_cast<double>(t.head_in[target.neuron]);
  }
  if (target.neuron < 0 || target.neuron >= t.logits.size())
    raise<ConfigError>("viz: neuron ", target.neuron, " outside head width ",
                       t.logits.size());
  return static_cast<double>(t.logits[target.neuron]);
}

// Gradient ascent on the input pixels with a random circular translation of at
// most cfg.jitter pixels applied before each step and inverted after; pixels
// are clamped to [0,1] after each update.
template <class Scalar>
ActMaxResult<Scalar> activation_maximize(const CaViNet<Scalar>& model,
                                         const VizTarget& target,
                                         const ActMaxConfig& cfg,
                                         const Tensor<Scalar>* init = nullptr) {
  if (cfg.steps < 1) raise<ConfigError>("viz: steps must be >= 1");
  if (cfg.jitter < 0) raise<ConfigError>("viz: jitter must be >= 0");
  Modality modality = target.kind == VizTarget::Kind::kVisualIdNeuron
                          ? Modality::kVisual
                          : Modality::kCaricature;
  if (target.kind == VizTarget::Kind::kFeature) modality = target.feature_modality;

  RandomStream rng = substream(cfg.seed, "viz/actmax");
  ActMaxResult<Scalar> result;
  if (init) {
    result.image = *init;
  } else {
    result.image = Tensor<Scalar>(model.config.input_shape);
    for (Index i = 0; i < result.image.size(); ++i)
      result.image[i] = static_cast<Scalar>(0.5 + rng.uniform(-0.05, 0.05));
  }

  for (Index step = 0; step < cfg.steps; ++step) {
    result.activation_trace.push_back(
        target_activation(model, result.image, target));
    Index dy = cfg.jitter > 0 ? rng.uniform_int(-cfg.jitter, cfg.jitter) : 0;
    Index dx = cfg.jitter > 0 ? rng.uniform_int(-cfg.jitter, cfg.jitter) : 0;
    Tensor<Scalar> jittered = detail::roll(result.image, dy, dx);

    auto t = detail::id_logits_forward(model, jittered, modality);
    Tensor<Scalar> g;
    if (target.kind == VizTarget::Kind::kFeature) {
      Tensor<Scalar> g_feat(t.head_in.shape());
      g_feat[target.neuron] = Scalar(1);
      g = detail::input_gradient(model, t, modality, Tensor<Scalar>(), g_feat, false);
    } else {
      Tensor<Scalar> g_logits(t.logits.shape());
      if (target.neuron < 0 || target.neuron >= t.logits.size())
        raise<ConfigError>("viz: neuron ", target.neuron, " outside head width ",
                           t.logits.size());
      g_logits[target.neuron] = Scalar(1);
      g = detail::input_gradient(model, t, modality, g_logits, Tensor<Scalar>(),
                                 false);
    }
    if (!g.all_finite())
      raise<NumericError>("viz: non-finite gradient at step ", step);

    if (cfg.step_size != 0.0) {
      jittered.array() += static_cast<Scalar>(cfg.step_size) * g.array();
      jittered.array() = jittered.array().max(Scalar(0)).min(Scalar(1));
      result.image = detail::roll(jittered, -dy, -dx);
    }
    // with a zero step size the jitter/unjitter round trip is exact
  }
  result.activation_trace.push_back(target_activation(model, result.image, target));
  return result;
}

// ---------------------------------------------------------------------------
// rectified saliency

template <class Scalar>
struct SaliencyResult {
  Tensor<Scalar> heatmap;  // (1,H,W), min-max normalized to [0,1]
  Tensor<Scalar> overlay;  // (3,H,W)
};

// Backpropagates the sum of the concatenated shared + specific feature vector
// to the input pixels, zeroing negative gradients after every layer. The
// heatmap is the per-pixel max over channels, min-max normalized; a constant
// map normalizes to all zeros.
template <class Scalar>
SaliencyResult<Scalar> saliency_map(
    const CaViNet<Scalar>& model, const Tensor<Scalar>& image, Modality modality,
    const std::function<void(const Tensor<Scalar>&)>& observer = nullptr) {
  auto t = detail::id_logits_forward(model, image, modality);
  Tensor<Scalar> g_feat = Tensor<Scalar>::ones(t.head_in.shape());
  Tensor<Scalar> g = detail::input_gradient(model, t, modality, Tensor<Scalar>(),
                                            g_feat, true, observer);

  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  SaliencyResult<Scalar> out;
  out.heatmap = Tensor<Scalar>({1, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      Scalar m = g(0, y, x);
      for (Index k = 1; k < c; ++k) m = std::max(m, g(k, y, x));
      out.heatmap(0, y, x) = m;
    }
  Scalar lo = out.heatmap.vector().minCoeff();
  Scalar hi = out.heatmap.vector().maxCoeff();
  if (hi > lo)
    out.heatmap.array() = (out.heatmap.array() - lo) / (hi - lo);
  else
    out.heatmap.set_zero();  // constant map convention

  out.overlay = Tensor<Scalar>({3, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double gray = 0;
      for (Index k = 0; k < c; ++k) gray += static_cast<double>(image(k, y, x));
      gray /= static_cast<double>(c);
      double heat = static_cast<double>(out.heatmap(0, y, x));
      out.overlay(0, y, x) = static_cast<Scalar>(std::min(1.0, 0.5 * gray + heat));
      out.overlay(1, y, x) = static_cast<Scalar>(0.5 * gray);
      out.overlay(2, y, x) = static_cast<Scalar>(0.5 * gray);
    }
  return out;
}

}  // namespace cavinet
