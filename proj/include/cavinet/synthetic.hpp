#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "cavinet/dataset.hpp"
#include "cavinet/image.hpp"
#include "cavinet/rng.hpp"

namespace cavinet {

// Deterministic two-modality synthetic face dataset. Every identity is a
// composition of colored geometric glyphs placed by a seeded stream; the
// visual modality renders the prototype with mild affine jitter and low noise,
// the caricature modality re-renders it with one glyph's scale exaggerated,
// then applies a smooth control-point displacement warp and a palette shift.
// The whole dataset is a pure function of the spec.

struct SynthSpec {
  Index identity_count = 10;
  Index images_per_identity = 12;  // per modality
  Index image_size = 32;
  double distortion = 0.5;  // caricature warp/exaggeration strength
  std::uint64_t seed = 1;

  void validate() const {
    if (identity_count < 1) raise<ConfigError>("synth: identity_count must be >= 1");
    if (images_per_identity < 1)
      raise<ConfigError>("synth: images_per_identity must be >= 1");
    if (image_size < 16)
      raise<ConfigError>("synth: image_size ", image_size,
                         " too small to place glyphs (minimum 16)");
    if (distortion < 0.0) raise<ConfigError>("synth: distortion must be >= 0");
  }
};

enum class GlyphType { kEllipse, kCircle, kBar, kTriangle };

struct Glyph {
  GlyphType type = GlyphType::kCircle;
  double cx = 0.5, cy = 0.5;   // center, normalized
  double sx = 0.1, sy = 0.1;   // half-extents, normalized
  double rot = 0.0;
  double r = 1, g = 1, b = 1;
};

struct IdentityPrototype {
  double bg_r = 0.1, bg_g = 0.1, bg_b = 0.1;
  std::vector<Glyph> glyphs;
};

namespace detail {

inline double sd_ellipse(double px, double py, const Glyph& g) {
  double ca = std::cos(-g.rot), sa = std::sin(-g.rot);
  double x = ca * (px - g.cx) - sa * (py - g.cy);
  double y = sa * (px - g.cx) + ca * (py - g.cy);
  double k = std::sqrt((x * x) / (g.sx * g.sx) + (y * y) / (g.sy * g.sy));
  return (k - 1.0) * std::min(g.sx, g.sy);
}

inline double sd_bar(double px, double py, const Glyph& g) {
  double ca = std::cos(-g.rot), sa = std::sin(-g.rot);
  double x = std::abs(ca * (px - g.cx) - sa * (py - g.cy)) - g.sx;
  double y = std::abs(sa * (px - g.cx) + ca * (py - g.cy)) - g.sy;
  double ox = std::max(x, 0.0), oy = std::max(y, 0.0);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(x, y), 0.0);
}

inline double sd_triangle(double px, double py, const Glyph& g) {
  // point-down isoceles triangle inscribed in the glyph box
  double ca = std::cos(-g.rot), sa = std::sin(-g.rot);
  double x = ca * (px - g.cx) - sa * (py - g.cy);
  double y = sa * (px - g.cx) + ca * (py - g.cy);
  // vertices: (-sx,-sy), (sx,-sy), (0,sy)
  double vx[3] = {-g.sx, g.sx, 0.0};
  double vy[3] = {-g.sy, -g.sy, g.sy};
  double d = -1e9;
  bool inside = true;
  for (int e = 0; e < 3; ++e) {
    double ax = vx[e], ay = vy[e];
    double bx = vx[(e + 1) % 3], by = vy[(e + 1) % 3];
    double nx = by - ay, ny = -(bx - ax);
    double len = std::sqrt(nx * nx + ny * ny);
    double dist = ((x - ax) * nx + (y - ay) * ny) / len;
    d = std::max(d, dist);
    if (dist > 0) inside = false;
  }
  (void)inside;
  return d;
}

inline double glyph_distance(double px, double py, const Glyph& g) {
  switch (g.type) {
    case GlyphType::kEllipse:
    case GlyphType::kCircle: return sd_ellipse(px, py, g);
    case GlyphType::kBar: return sd_bar(px, py, g);
    case GlyphType::kTriangle: return sd_triangle(px, py, g);
  }
  return 1.0;
}

}  // namespace detail

inline IdentityPrototype identity_prototype(const SynthSpec& spec, Index identity) {
  RandomStream rng = substream(spec.seed, "synth/prototype",
                               static_cast<std::uint64_t>(identity));
  IdentityPrototype p;
  // background is a weak cue on purpose; identity lives in the glyphs
  p.bg_r = rng.uniform(0.10, 0.18);
  p.bg_g = rng.uniform(0.10, 0.18);
  p.bg_b = rng.uniform(0.10, 0.18);

  Glyph face;
  face.type = GlyphType::kEllipse;
  face.cx = 0.5 + rng.uniform(-0.04, 0.04);
  face.cy = 0.52 + rng.uniform(-0.04, 0.04);
  face.sx = rng.uniform(0.26, 0.36);
  face.sy = rng.uniform(0.30, 0.40);
  face.rot = rng.uniform(-0.15, 0.15);
  face.r = rng.uniform(0.45, 0.95);
  face.g = rng.uniform(0.35, 0.85);
  face.b = rng.uniform(0.30, 0.80);
  p.glyphs.push_back(face);

  double eye_y = 0.40 + rng.uniform(-0.05, 0.05);
  double eye_dx = rng.uniform(0.09, 0.17);
  double eye_r = rng.uniform(0.030, 0.065);
  double er = rng.uniform(0.0, 0.45), eg = rng.uniform(0.0, 0.45),
         eb = rng.uniform(0.0, 0.6);
  for (int side : {-1, 1}) {
    Glyph eye;
    eye.type = GlyphType::kCircle;
    eye.cx = face.cx + side * eye_dx;
    eye.cy = eye_y;
    eye.sx = eye.sy = eye_r;
    eye.r = er;
    eye.g = eg;
    eye.b = eb;
    p.glyphs.push_back(eye);
  }

  double brow_len = rng.uniform(0.04, 0.09);
  double brow_tilt = rng.uniform(-0.35, 0.35);
  for (int side : {-1, 1}) {
    Glyph brow;
    brow.type = GlyphType::kBar;
    brow.cx = face.cx + side * eye_dx;
    brow.cy = eye_y - rng.uniform(0.06, 0.10);
    brow.sx = brow_len;
    brow.sy = rng.uniform(0.008, 0.020);
    brow.rot = side * brow_tilt;
    brow.r = rng.uniform(0.0, 0.35);
    brow.g = rng.uniform(0.0, 0.35);
    brow.b = rng.uniform(0.0, 0.35);
    p.glyphs.push_back(brow);
  }

  Glyph nose;
  nose.type = GlyphType::kTriangle;
  nose.cx = face.cx + rng.uniform(-0.02, 0.02);
  nose.cy = 0.53 + rng.uniform(-0.03, 0.05);
  nose.sx = rng.uniform(0.030, 0.060);
  nose.sy = rng.uniform(0.035, 0.075);
  nose.rot = 0.0;  // apex points down (y grows downward)
  nose.r = face.r * rng.uniform(0.6, 0.9);
  nose.g = face.g * rng.uniform(0.5, 0.8);
  nose.b = face.b * rng.uniform(0.5, 0.8);
  p.glyphs.push_back(nose);

  Glyph mouth;
  mouth.type = GlyphType::kBar;
  mouth.cx = face.cx + rng.uniform(-0.03, 0.03);
  mouth.cy = 0.69 + rng.uniform(-0.05, 0.05);
  mouth.sx = rng.uniform(0.06, 0.14);
  mouth.sy = rng.uniform(0.012, 0.032);
  mouth.rot = rng.uniform(-0.25, 0.25);
  mouth.r = rng.uniform(0.55, 0.95);
  mouth.g = rng.uniform(0.05, 0.35);
  mouth.b = rng.uniform(0.10, 0.45);
  p.glyphs.push_back(mouth);

  if (rng.bernoulli(0.5)) {
    Glyph spot;
    spot.type = GlyphType::kCircle;
    int side = rng.bernoulli(0.5) ? 1 : -1;
    spot.cx = face.cx + side * rng.uniform(0.14, 0.20);
    spot.cy = 0.55 + rng.uniform(-0.03, 0.06);
    spot.sx = spot.sy = rng.uniform(0.018, 0.040);
    spot.r = rng.uniform(0.3, 1.0);
    spot.g = rng.uniform(0.2, 0.8);
    spot.b = rng.uniform(0.2, 0.8);
    p.glyphs.push_back(spot);
  }
  return p;
}

template <class Scalar>
Tensor<Scalar> render_prototype(const IdentityPrototype& proto, Index size) {
  Tensor<Scalar> img({3, size, size});
  const double px_scale = static_cast<double>(size);
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      double nx = (static_cast<double>(x) + 0.5) / px_scale;
      double ny = (static_cast<double>(y) + 0.5) / px_scale;
      double r = proto.bg_r, g = proto.bg_g, b = proto.bg_b;
      for (const Glyph& gl : proto.glyphs) {
        double d = detail::glyph_distance(nx, ny, gl) * px_scale;  // in pixels
        double alpha = 0.5 - d;
        if (alpha <= 0) continue;
        if (alpha > 1) alpha = 1;
        r = (1 - alpha) * r + alpha * gl.r;
        g = (1 - alpha) * g + alpha * gl.g;
        b = (1 - alpha) * b + alpha * gl.b;
      }
      img(0, y, x) = static_cast<Scalar>(r);
      img(1, y, x) = static_cast<Scalar>(g);
      img(2, y, x) = static_cast<Scalar>(b);
    }
  }
  return img;
}

namespace detail {

template <class Scalar>
void add_clamped_noise(Tensor<Scalar>& img, double sigma, RandomStream& rng) {
  if (sigma <= 0) return;
  for (Index i = 0; i < img.size(); ++i) {
    double v = static_cast<double>(img[i]) + rng.normal(0.0, sigma);
    img[i] = static_cast<Scalar>(v < 0 ? 0 : (v > 1 ? 1 : v));
  }
}

// Smooth displacement field from a jittered control grid, bilinear-upsampled.
template <class Scalar>
void control_grid_field(Index size, double amplitude_px, RandomStream& rng,
                        Tensor<Scalar>& dx, Tensor<Scalar>& dy) {
  constexpr Index kGrid = 4;
  double gx[kGrid][kGrid], gy[kGrid][kGrid];
  for (Index i = 0; i < kGrid; ++i)
    for (Index j = 0; j < kGrid; ++j) {
      gx[i][j] = rng.uniform(-amplitude_px, amplitude_px);
      gy[i][j] = rng.uniform(-amplitude_px, amplitude_px);
    }
  dx = Tensor<Scalar>({size, size});
  dy = Tensor<Scalar>({size, size});
  for (Index y = 0; y < size; ++y) {
    double fy = static_cast<double>(y) / static_cast<double>(size - 1) * (kGrid - 1);
    Index i0 = std::min<Index>(static_cast<Index>(fy), kGrid - 2);
    double ty = fy - static_cast<double>(i0);
    for (Index x = 0; x < size; ++x) {
      double fx = static_cast<double>(x) / static_cast<double>(size - 1) * (kGrid - 1);
      Index j0 = std::min<Index>(static_cast<Index>(fx), kGrid - 2);
      double tx = fx - static_cast<double>(j0);
      auto lerp2 = [&](double g00, double g01, double g10, double g11) {
        return (1 - ty) * ((1 - tx) * g00 + tx * g01) +
               ty * ((1 - tx) * g10 + tx * g11);
      };
      dx(y, x) = static_cast<Scalar>(lerp2(gx[i0][j0], gx[i0][j0 + 1],
                                           gx[i0 + 1][j0], gx[i0 + 1][j0 + 1]));
      dy(y, x) = static_cast<Scalar>(lerp2(gy[i0][j0], gy[i0][j0 + 1],
                                           gy[i0 + 1][j0], gy[i0 + 1][j0 + 1]));
    }
  }
}

}  // namespace detail

// Renders one image of the dataset; pure in (spec, identity, modality, index).
template <class Scalar>
Tensor<Scalar> synth_image(const SynthSpec& spec, Index identity, Modality modality,
                           Index index) {
  spec.validate();
  IdentityPrototype proto = identity_prototype(spec, identity);

  if (modality == Modality::kVisual) {
    RandomStream rng = substream(spec.seed, "synth/visual",
                                 static_cast<std::uint64_t>(identity),
                                 static_cast<std::uint64_t>(index));
    Tensor<Scalar> img = render_prototype<Scalar>(proto, spec.image_size);
    double angle = rng.uniform(-5.0, 5.0) * M_PI / 180.0;
    double scale = rng.uniform(0.95, 1.05);
    double tx = rng.uniform(-0.025, 0.025) * static_cast<double>(spec.image_size);
    double ty = rng.uniform(-0.025, 0.025) * static_cast<double>(spec.image_size);
    double ca = std::cos(angle) / scale, sa = std::sin(angle) / scale;
    img = warp_affine(img, ca, sa, -sa, ca, -(ca * tx + sa * ty),
                      -(-sa * tx + ca * ty));
    detail::add_clamped_noise(img, 0.02, rng);
    return img;
  }

  RandomStream rng = substream(spec.seed, "synth/caricature",
                               static_cast<std::uint64_t>(identity),
                               static_cast<std::uint64_t>(index));
  // exaggerate one non-face glyph's scale
  IdentityPrototype cari = proto;
  Index g = rng.uniform_int(1, static_cast<Index>(cari.glyphs.size()) - 1);
  double factor = 1.0 + spec.distortion * rng.uniform(0.8, 2.2);
  cari.glyphs[static_cast<std::size_t>(g)].sx *= factor;
  cari.glyphs[static_cast<std::size_t>(g)].sy *= factor;
  // small per-image layout jitter
  for (std::size_t i = 1; i < cari.glyphs.size(); ++i) {
    cari.glyphs[i].cx += rng.uniform(-0.012, 0.012);
    cari.glyphs[i].cy += rng.uniform(-0.012, 0.012);
  }
  Tensor<Scalar> img = render_prototype<Scalar>(cari, spec.image_size);

  Tensor<Scalar> dx, dy;
  detail::control_grid_field(spec.image_size,
                             spec.distortion * 0.14 *
                                 static_cast<double>(spec.image_size),
                             rng, dx, dy);
  img = warp_field(img, dx, dy);

  // palette shift toward rotated channels
  double t = spec.distortion * rng.uniform(0.45, 0.95);
  for (Index y = 0; y < spec.image_size; ++y)
    for (Index x = 0; x < spec.image_size; ++x) {
      double r = img(0, y, x), gg = img(1, y, x), b = img(2, y, x);
      img(0, y, x) = static_cast<Scalar>((1 - t) * r + t * gg);
      img(1, y, x) = static_cast<Scalar>((1 - t) * gg + t * b);
      img(2, y, x) = static_cast<Scalar>((1 - t) * b + t * r);
    }
  detail::add_clamped_noise(img, 0.015, rng);
  return img;
}

namespace detail {
inline std::string synth_identity_name(Index id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "id_%03d", static_cast<int>(id));
  return buf;
}
inline std::string synth_file_name(Index id, Modality m, Index index) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "images/id_%03d_%s_%02d.png",
                static_cast<int>(id), modality_name(m), static_cast<int>(index));
  return buf;
}
}  // namespace detail

inline DatasetManifest synthetic_manifest(const SynthSpec& spec) {
  spec.validate();
  DatasetManifest m;
  for (Index id = 0; id < spec.identity_count; ++id) {
    m.identities.push_back(detail::synth_identity_name(id));
    for (Modality mod : {Modality::kCaricature, Modality::kVisual})
      for (Index i = 0; i < spec.images_per_identity; ++i)
        m.records.push_back(
            {id, mod, detail::synth_file_name(id, mod, i)});
  }
  return m;
}

// Renders the whole dataset into an in-memory store (no disk I/O).
template <class Scalar>
void generate_in_memory(const SynthSpec& spec, DatasetManifest& manifest,
                        ImageStore<Scalar>& store) {
  for (Index r = 0; r < static_cast<Index>(manifest.records.size()); ++r) {
    const auto& rec = manifest.records[static_cast<std::size_t>(r)];
    Index index = 0;  // recover per-(identity,modality) index from record order
    for (Index q = 0; q < r; ++q) {
      const auto& other = manifest.records[static_cast<std::size_t>(q)];
      if (other.identity == rec.identity && other.modality == rec.modality) ++index;
    }
    store.put(r, synth_image<Scalar>(spec, rec.identity, rec.modality, index));
  }
}

// Writes PNGs plus manifest.csv under out_dir and returns the manifest.
template <class Scalar>
DatasetManifest generate_synthetic(const SynthSpec& spec,
                                   const std::filesystem::path& out_dir) {
  spec.validate();
  DatasetManifest manifest = synthetic_manifest(spec);
  manifest.base_dir = out_dir;
  std::filesystem::create_directories(out_dir / "images");
  for (Index id = 0; id < spec.identity_count; ++id)
    for (Modality mod : {Modality::kCaricature, Modality::kVisual})
      for (Index i = 0; i < spec.images_per_identity; ++i)
        write_png(synth_image<Scalar>(spec, id, mod, i),
                  out_dir / detail::synth_file_name(id, mod, i));
  save_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace cavinet
