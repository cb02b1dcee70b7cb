#pragma once

#include <cmath>

#include "cavinet/image.hpp"
#include "cavinet/rng.hpp"
#include "cavinet/tensor.hpp"

namespace cavinet {

// Per-draw augmentation: horizontal flip, small rotation + translation in one
// affine warp with edge replication, then additive Gaussian pixel noise. The
// caps below are hard maxima; a policy asking for more is a config error. An
// all-zero policy is the identity map, bitwise.
struct AugmentPolicy {
  double max_translate = 0.10;   // fraction of each axis extent
  double max_rotate_deg = 15.0;
  double noise_sigma = 0.05;     // on unit-scaled pixels
  double flip_prob = 0.5;

  static constexpr double kTranslateCap = 0.10;
  static constexpr double kRotateCap = 15.0;
  static constexpr double kNoiseCap = 0.05;

  static AugmentPolicy identity() { return {0.0, 0.0, 0.0, 0.0}; }

  void validate() const {
    if (max_translate < 0.0 || max_translate > kTranslateCap + 1e-12)
      raise<ConfigError>("augment: translation range ", max_translate,
                         " exceeds cap ", kTranslateCap);
    if (max_rotate_deg < 0.0 || max_rotate_deg > kRotateCap + 1e-12)
      raise<ConfigError>("augment: rotation range ", max_rotate_deg, " exceeds cap ",
                         kRotateCap);
    if (noise_sigma < 0.0 || noise_sigma > kNoiseCap + 1e-12)
      raise<ConfigError>("augment: noise sigma ", noise_sigma, " exceeds cap ",
                         kNoiseCap);
    if (flip_prob < 0.0 || flip_prob > 1.0)
      raise<ConfigError>("augment: flip probability ", flip_prob, " outside [0,1]");
  }
};

template <class Scalar>
Tensor<Scalar> augment(const Tensor<Scalar>& image, const AugmentPolicy& policy,
                       RandomStream& rng) {
  policy.validate();
  if (image.rank() != 3)
    raise<ShapeError>("augment: expected (C,H,W), got ", shape_str(image.shape()));
  const Index h = image.dim(1), w = image.dim(2);

  // fixed draw order: flip, angle, tx, ty, then noise
  bool flip = policy.flip_prob > 0.0 && rng.bernoulli(policy.flip_prob);
  double angle =
      rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg) * M_PI / 180.0;
  double tx = rng.uniform(-policy.max_translate, policy.max_translate) *
              static_cast<double>(w);
  double ty = rng.uniform(-policy.max_translate, policy.max_translate) *
              static_cast<double>(h);

  Tensor<Scalar> out = flip ? flip_horizontal(image) : image;
  if (angle != 0.0 || tx != 0.0 || ty != 0.0) {
    // inverse map: rotate by -angle, shift by -t
    double ca = std::cos(angle), sa = std::sin(angle);
    out = warp_affine(out, ca, sa, -sa, ca, -tx, -ty);
  }
  if (policy.noise_sigma > 0.0) {
    for (Index i = 0; i < out.size(); ++i) {
      double v = static_cast<double>(out[i]) + rng.normal(0.0, policy.noise_sigma);
      out[i] = static_cast<Scalar>(v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v));
    }
  }
  return out;
}

}  // namespace cavinet
