#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cavinet/checkpoint.hpp>
#include <cavinet/grad_check.hpp>
#include <cavinet/model.hpp>

#include <filesystem>

using namespace cavinet;

using T = Tensor<double>;
using Mat = Eigen::MatrixXd;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_shape = {1, 6, 6};
  cfg.blocks = {{3, 3, 1, 0, true, 2, 2}};  // 6 -> 4 -> pool -> 2, d = 12
  cfg.shared_dim = 4;
  cfg.specific_dim = 3;
  cfg.head_hidden = {6, 5};
  cfg.identity_count = 3;
  cfg.dropout_p = 0.0;
  cfg.lambda_c = 0.2;
  cfg.lambda_v = 0.2;
  return cfg;
}

// Flat-branch config: features are the raw flattened image, d = 8.
ModelConfig flat_config(Index k = 3, Index m = 2) {
  ModelConfig cfg;
  cfg.input_shape = {1, 2, 4};
  cfg.blocks = {};
  cfg.shared_dim = k;
  cfg.specific_dim = m;
  cfg.head_hidden = {4};
  cfg.identity_count = 2;
  cfg.dropout_p = 0.0;
  cfg.lambda_c = 1.0;
  cfg.lambda_v = 0.0;
  return cfg;
}

std::vector<PairLabels> random_labels(Index n, Index n_id, RandomStream& rng) {
  std::vector<PairLabels> out;
  for (Index i = 0; i < n; ++i) {
    PairLabels l;
    l.cari_identity = rng.uniform_int(0, n_id - 1);
    if (rng.bernoulli(0.5)) {
      l.visual_identity = l.cari_identity;
    } else {
      l.visual_identity = rng.uniform_int(0, n_id - 1);
    }
    l.verification = l.cari_identity == l.visual_identity ? 1 : 0;
    out.push_back(l);
  }
  return out;
}

}  // namespace

TEST_CASE("default toy stack yields d = 512 per the shape rule") {
  // Shape arithmetic oracle: out = floor((in - k)/stride) + 1, pool halves.
  auto conv_out = [](Index in, Index k, Index s) { return (in - k) / s + 1; };
  Index h = 32;
  h = conv_out(h, 3, 1);  // 30
  h = conv_out(h, 2, 2);  // 15
  h = conv_out(h, 3, 1);  // 13
  h = conv_out(h, 2, 2);  // 6
  h = conv_out(h, 3, 1);  // 4
  h = conv_out(h, 2, 2);  // 2
  CHECK(h * h * 128 == 512);

  ModelConfig cfg;
  cfg.identity_count = 5;
  auto model = build_model<double>(cfg, 1);
  CHECK(model.feature_dim == 512);
  RandomStream rng(2);
  T img = T::uniform({3, 32, 32}, rng, 0.0, 1.0);
  T x = extract_features(model.cari_branch, img, Mode::kEval);
  CHECK(x.shape() == Shape{512});
}

TEST_CASE("zero image through the bias-free relu stack gives zero features") {
  auto model = build_model<double>(tiny_config(), 3);
  T img = T::zeros({1, 6, 6});
  T x = extract_features(model.cari_branch, img, Mode::kEval);
  for (Index i = 0; i < x.size(); ++i) CHECK(x[i] == 0.0);
}

TEST_CASE("feature extraction is deterministic in eval mode") {
  auto model = build_model<double>(tiny_config(), 4);
  RandomStream rng(9);
  T img = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  T a = extract_features(model.cari_branch, img, Mode::kEval);
  T b = extract_features(model.cari_branch, img, Mode::kEval);
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("branch rejects wrong input shape") {
  auto model = build_model<double>(tiny_config(), 4);
  T img = T::zeros({1, 5, 5});
  CHECK_THROWS_AS((void)extract_features(model.cari_branch, img, Mode::kEval),
                  ShapeError);
}

TEST_CASE("projection: identity transform, linearity, dot-product oracle") {
  ProjectionBlock<double> proj;
  Index d = 5;
  proj.shared = Mat::Identity(d, d);
  proj.cari_specific = Mat::Zero(d, 2);
  proj.visual_specific = Mat::Zero(d, 2);

  RandomStream rng(11);
  T xc = T::uniform({d}, rng);
  T xv = T::uniform({d}, rng);
  auto f = project(proj, xc, xv);
  for (Index i = 0; i < d; ++i) CHECK(f.shared_c[i] == xc[i]);

  T zero = T::zeros({d});
  auto fz = project(proj, zero, xv);
  for (Index i = 0; i < d; ++i) CHECK(fz.shared_c[i] == 0.0);
  for (Index i = 0; i < 2; ++i) CHECK(fz.specific_c[i] == 0.0);

  // random transform vs independent per-entry dot products
  proj.shared = Mat::Random(d, 3);
  auto fr = project(proj, xc, xv);
  for (Index j = 0; j < 3; ++j) {
    double dot = 0;
    for (Index i = 0; i < d; ++i) dot += xc[i] * proj.shared(i, j);
    CHECK(fr.shared_c[j] == doctest::Approx(dot).epsilon(1e-14));
  }

  T bad = T::zeros({d + 1});
  CHECK_THROWS_AS((void)project(proj, bad, xv), ShapeError);
}

TEST_CASE("orthogonality penalty: zero at orthogonality, unit at identical columns") {
  ProjectionBlock<double> proj;
  proj.lambda_c = 1.0;
  proj.lambda_v = 0.0;

  // disjoint coordinate supports -> orthogonal -> penalty 0
  proj.shared = Mat::Zero(4, 2);
  proj.shared(0, 0) = 1.0;
  proj.shared(1, 1) = 1.0;
  proj.cari_specific = Mat::Zero(4, 2);
  proj.cari_specific(2, 0) = 1.0;
  proj.cari_specific(3, 1) = 1.0;
  proj.visual_specific = Mat::Zero(4, 2);
  CHECK(ortho_penalty(proj) == 0.0);

  // S_c == S, single unit column
  proj.shared = Mat::Zero(4, 1);
  proj.shared(2, 0) = 1.0;
  proj.cari_specific = proj.shared;
  CHECK(ortho_penalty(proj) == 1.0);
}

TEST_CASE("orthogonality penalty matches the brute-force product oracle") {
  RandomStream rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    ProjectionBlock<double> proj;
    proj.lambda_c = rng.uniform(0.0, 2.0);
    proj.lambda_v = rng.uniform(0.0, 2.0);
    proj.shared = Mat::Random(8, 3);
    proj.cari_specific = Mat::Random(8, 2);
    proj.visual_specific = Mat::Random(8, 2);

    auto frob2 = [](const Mat& a, const Mat& b) {
      // explicit product, entrywise sum of squares
      double sum = 0;
      for (Index i = 0; i < a.cols(); ++i)
        for (Index j = 0; j < b.cols(); ++j) {
          double e = 0;
          for (Index r = 0; r < a.rows(); ++r) e += a(r, i) * b(r, j);
          sum += e * e;
        }
      return sum;
    };
    double expect = proj.lambda_c * frob2(proj.cari_specific, proj.shared) +
                    proj.lambda_v * frob2(proj.visual_specific, proj.shared);
    CHECK(ortho_penalty(proj) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("penalty gradient identity: 2*L*Sc*Sc^T*S and 2*L*S*S^T*Sc") {
  RandomStream rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    ProjectionBlock<double> proj;
    proj.lambda_c = rng.uniform(0.0, 1.0);
    proj.lambda_v = rng.uniform(0.0, 1.0);
    proj.shared = Mat::Random(8, 3);
    proj.cari_specific = Mat::Random(8, 2);
    proj.visual_specific = Mat::Random(8, 2);

    Mat gs = Mat::Zero(8, 3), gc = Mat::Zero(8, 2), gv = Mat::Zero(8, 2);
    add_penalty_gradients(proj, gs, gc, gv);

    Mat expect_s =
        2.0 * proj.lambda_c * proj.cari_specific * proj.cari_specific.transpose() *
            proj.shared +
        2.0 * proj.lambda_v * proj.visual_specific * proj.visual_specific.transpose() *
            proj.shared;
    Mat expect_c = 2.0 * proj.lambda_c * proj.shared * proj.shared.transpose() *
                   proj.cari_specific;
    Mat expect_v = 2.0 * proj.lambda_v * proj.shared * proj.shared.transpose() *
                   proj.visual_specific;
    CHECK((gs - expect_s).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((gc - expect_c).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((gv - expect_v).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("penalty gradient is exactly zero at orthogonality") {
  ProjectionBlock<double> proj;
  proj.lambda_c = 0.7;
  proj.lambda_v = 0.3;
  proj.shared = Mat::Zero(6, 2);
  proj.shared(0, 0) = 1.0;
  proj.shared(1, 1) = 1.0;
  proj.cari_specific = Mat::Zero(6, 2);
  proj.cari_specific(2, 0) = 1.0;
  proj.cari_specific(3, 1) = 1.0;
  proj.visual_specific = Mat::Zero(6, 2);
  proj.visual_specific(4, 0) = 1.0;
  proj.visual_specific(5, 1) = 1.0;

  Mat gs = Mat::Zero(6, 2), gc = Mat::Zero(6, 2), gv = Mat::Zero(6, 2);
  add_penalty_gradients(proj, gs, gc, gv);
  CHECK(gs.cwiseAbs().maxCoeff() == 0.0);
  CHECK(gc.cwiseAbs().maxCoeff() == 0.0);
  CHECK(gv.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("loss values: maximal uncertainty, confident correct, decomposition") {
  auto cfg = tiny_config();
  auto model = build_model<double>(cfg, 21);
  RandomStream rng(22);
  T cari = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  T vis = T::uniform({1, 6, 6}, rng, 0.0, 1.0);

  // final affines are zero-initialized: o_ve is exactly 0.5
  for (int y : {0, 1}) {
    PairLabels l{y, 0, y == 1 ? Index(0) : Index(1)};
    auto lb = loss(model, cari, vis, l, LossWeights{});
    CHECK(lb.verification == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }

  // Crank the caricature head's final bias toward class 1: confident correct.
  auto& final_affine = std::get<Affine<double>>(
      model.cari_id_head.layers[model.cari_id_head.layers.size() - 2]);
  final_affine.bias(1) = 60.0;
  PairLabels l{1, 1, 1};
  auto lb = loss(model, cari, vis, l, LossWeights{});
  CHECK(lb.cari_id >= 0.0);
  CHECK(lb.cari_id < 1e-9);

  // decomposition invariant: total recomputed from parts matches to 1e-12
  double recomputed = lb.weights.alpha * lb.verification +
                      lb.weights.beta * lb.cari_id + lb.weights.gamma * lb.visual_id +
                      lb.ortho;
  CHECK(lb.total == doctest::Approx(recomputed).epsilon(1e-12));

  PairLabels bad{1, 7, 0};
  CHECK_THROWS_AS((void)loss(model, cari, vis, bad, LossWeights{}), ShapeError);
}

TEST_CASE("default loss weights are 55:30:15 normalized") {
  LossWeights w;
  CHECK(w.alpha == doctest::Approx(0.55));
  CHECK(w.beta == doctest::Approx(0.30));
  CHECK(w.gamma == doctest::Approx(0.15));
  auto r = LossWeights::from_ratios(55, 30, 15);
  CHECK(r.alpha + r.beta + r.gamma == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.alpha == doctest::Approx(0.55).epsilon(1e-15));
}

TEST_CASE("with zero multipliers the S-gradient is the pure chained term") {
  auto cfg = flat_config();
  cfg.lambda_c = 0.0;
  cfg.lambda_v = 0.0;
  auto model = build_model<double>(cfg, 30);
  RandomStream rng(31);
  T cari = T::uniform({1, 2, 4}, rng);
  T vis = T::uniform({1, 2, 4}, rng);
  std::vector<PairLabels> labels{{1, 0, 0}};

  auto trace = forward_model(model, cari, vis, Mode::kEval);
  auto g0 = backward_model(model, trace, labels, LossWeights{});

  // Same model, nonzero multipliers: difference must be exactly the penalty term.
  model.proj.lambda_c = 0.9;
  model.proj.lambda_v = 0.4;
  auto trace2 = forward_model(model, cari, vis, Mode::kEval);
  auto g1 = backward_model(model, trace2, labels, LossWeights{});
  Mat penalty = Mat::Zero(model.feature_dim, cfg.shared_dim);
  Mat pc = Mat::Zero(model.feature_dim, cfg.specific_dim);
  Mat pv = Mat::Zero(model.feature_dim, cfg.specific_dim);
  add_penalty_gradients(model.proj, penalty, pc, pv);
  CHECK(((g1.shared - g0.shared) - penalty).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("pipeline gradient with all weights zero equals the closed form") {
  RandomStream rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    auto cfg = flat_config();
    auto model = build_model<double>(cfg, 40 + static_cast<std::uint64_t>(trial));
    model.proj.shared = Mat::Random(8, 3);
    model.proj.cari_specific = Mat::Random(8, 2);
    model.proj.visual_specific = Mat::Random(8, 2);
    model.proj.lambda_c = 1.0;
    model.proj.lambda_v = 0.0;

    T cari = T::uniform({1, 2, 4}, rng);
    T vis = T::uniform({1, 2, 4}, rng);
    auto trace = forward_model(model, cari, vis, Mode::kEval);
    auto g = backward_model(model, trace, {{1, 0, 0}}, LossWeights{0.0, 0.0, 0.0});

    Mat expect = 2.0 * model.proj.cari_specific *
                 model.proj.cari_specific.transpose() * model.proj.shared;
    CHECK((g.shared - expect).cwiseAbs().maxCoeff() <= 1e-10);
    Mat expect_c =
        2.0 * model.proj.shared * model.proj.shared.transpose() * model.proj.cari_specific;
    CHECK((g.cari_specific - expect_c).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("full model gradients match finite differences at 1e-5") {
  auto cfg = tiny_config();
  cfg.dropout_p = 0.4;  // exercise dropout in the chain
  auto model = build_model<double>(cfg, 50);
  RandomStream drng(51);
  T cari = T::uniform({2, 1, 6, 6}, drng, 0.0, 1.0);
  T vis = T::uniform({2, 1, 6, 6}, drng, 0.0, 1.0);
  std::vector<PairLabels> labels{{1, 0, 0}, {0, 1, 2}};
  LossWeights w = LossWeights::from_ratios(55, 30, 15);
  const std::uint64_t mask_seed = 99;

  auto objective = [&]() -> double {
    RandomStream rng = substream(mask_seed, "dropout");
    auto trace = forward_model(model, cari, vis, Mode::kTrain, &rng);
    return compute_loss(model, trace, labels, w).total;
  };

  RandomStream rng = substream(mask_seed, "dropout");
  auto trace = forward_model(model, cari, vis, Mode::kTrain, &rng);
  auto grads = flatten_gradients(model, backward_model(model, trace, labels, w));
  auto refs = param_refs(model);
  REQUIRE(grads.size() == refs.size());

  // every parameter tensor, checked in one pass
  std::vector<Tensor<double>*> params;
  std::vector<Tensor<double>> analytic;
  std::vector<Tensor<double>> views;
  views.reserve(refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    // wrap raw storage in tensors sharing no memory; copy in/out manually
    CHECK(grads[i].size() == refs[i].size);
  }
  // Perturb through the live parameter storage via ParamRef.
  GradCheckReport report;
  report.pass = true;
  double base_step = 1e-6;
  for (std::size_t t = 0; t < refs.size(); ++t) {
    auto& r = refs[t];
    for (Index i = 0; i < r.size; ++i) {
      double saved = r.data[i];
      r.data[i] = saved + base_step;
      double fp = objective();
      r.data[i] = saved - base_step;
      double fm = objective();
      r.data[i] = saved;
      double numeric = (fp - fm) / (2 * base_step);
      double analytic_v = grads[t][i];
      double denom = std::max({1.0, std::abs(numeric), std::abs(analytic_v)});
      report.max_rel_err =
          std::max(report.max_rel_err, std::abs(numeric - analytic_v) / denom);
      report.num_params_checked++;
    }
  }
  report.pass = report.max_rel_err <= 1e-5;
  INFO("max rel err ", report.max_rel_err, " over ", report.num_params_checked);
  CHECK(report.pass);
}

TEST_CASE("untied by default: mutating the caricature branch leaves visual outputs") {
  auto model = build_model<double>(tiny_config(), 60);
  RandomStream rng(61);
  T img = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  T before = extract_features(model.visual_branch, img, Mode::kEval);
  auto& conv = std::get<Conv2D<double>>(model.cari_branch.layers[0]);
  conv.weight.array() += 1.0;
  T after = extract_features(model.visual_branch, img, Mode::kEval);
  CHECK(bitwise_equal(before, after));
}

TEST_CASE("tied construction makes both branches bit-identical") {
  auto cfg = tiny_config();
  cfg.tied_weights = true;
  auto model = build_model<double>(cfg, 62);
  auto& cw = std::get<Conv2D<double>>(model.cari_branch.layers[0]).weight;
  auto& vw = std::get<Conv2D<double>>(model.visual_branch.layers[0]).weight;
  CHECK(bitwise_equal(cw, vw));
}

TEST_CASE("predict: fresh model gives o_ve = 0.5 and uniform identity posteriors") {
  auto model = build_model<double>(tiny_config(), 70);
  RandomStream rng(71);
  T cari = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  T vis = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  auto p = predict(model, cari, vis);
  CHECK(p.verify_score == 0.5);
  for (double v : p.cari_id_dist)
    CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(argmax_lowest(p.cari_id_dist) == 0);  // lowest-index tie-break
}

TEST_CASE("frozen conv layers receive zero gradients, present not omitted") {
  auto cfg = tiny_config();
  cfg.freeze_depth = 1;
  auto model = build_model<double>(cfg, 80);
  RandomStream rng(81);
  T cari = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  T vis = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  auto trace = forward_model(model, cari, vis, Mode::kEval);
  auto g = backward_model(model, trace, {{1, 0, 0}}, LossWeights{});
  REQUIRE(g.cari_branch[0].size() == 2);
  CHECK(g.cari_branch[0][0].array().abs().maxCoeff() == 0.0);
  CHECK(g.cari_branch[0][1].array().abs().maxCoeff() == 0.0);
  // deeper, unfrozen parameters do move
  bool any_nonzero = false;
  for (auto& layer : g.verify_head)
    for (auto& t : layer)
      if (t.array().abs().maxCoeff() > 0) any_nonzero = true;
  CHECK(any_nonzero);

  auto refs = param_refs(model);
  CHECK(refs[0].frozen);
  CHECK(refs[1].frozen);
}

TEST_CASE("feature modes change identification head wiring") {
  auto cfg = tiny_config();
  cfg.feature_mode = FeatureMode::kSharedOnly;
  auto model = build_model<double>(cfg, 90);
  auto& first = std::get<Affine<double>>(model.cari_id_head.layers[0]);
  CHECK(first.in_dim() == cfg.shared_dim);  // k, not k+m

  cfg.feature_mode = FeatureMode::kVisualOnly;
  auto model2 = build_model<double>(cfg, 91);
  RandomStream rng(92);
  T cari = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  T vis = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  auto trace = forward_model(model2, cari, vis, Mode::kEval);
  CHECK(trace.x_extra.size() == model2.feature_dim);
  // gradient check still holds in this wiring
  std::vector<PairLabels> labels{{1, 0, 0}};
  LossWeights w = LossWeights::from_ratios(40, 35, 25);
  auto grads = flatten_gradients(model2, backward_model(model2, trace, labels, w));
  auto refs = param_refs(model2);
  double max_err = 0;
  for (std::size_t t = 0; t < refs.size(); ++t) {
    auto& r = refs[t];
    for (Index i = 0; i < std::min<Index>(r.size, 6); ++i) {
      double saved = r.data[i];
      r.data[i] = saved + 1e-6;
      auto tp = forward_model(model2, cari, vis, Mode::kEval);
      double fp = compute_loss(model2, tp, labels, w).total;
      r.data[i] = saved - 1e-6;
      auto tm = forward_model(model2, cari, vis, Mode::kEval);
      double fm = compute_loss(model2, tm, labels, w).total;
      r.data[i] = saved;
      double numeric = (fp - fm) / 2e-6;
      double denom = std::max({1.0, std::abs(numeric), std::abs(grads[t][i])});
      max_err = std::max(max_err, std::abs(numeric - grads[t][i]) / denom);
    }
  }
  CHECK(max_err <= 1e-5);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  auto cfg = tiny_config();
  cfg.dropout_p = 0.3;
  auto model = build_model<double>(cfg, 100);
  auto dir = std::filesystem::temp_directory_path() / "cavinet_test_ckpt";
  std::filesystem::create_directories(dir);
  auto path = dir / "model.ckpt";
  save_checkpoint(model, path);
  auto loaded = load_checkpoint<double>(path);

  auto refs_a = param_refs(model);
  auto refs_b = param_refs(loaded);
  REQUIRE(refs_a.size() == refs_b.size());
  for (std::size_t i = 0; i < refs_a.size(); ++i) {
    CHECK(refs_a[i].name == refs_b[i].name);
    CHECK(std::memcmp(refs_a[i].data, refs_b[i].data,
                      sizeof(double) * static_cast<std::size_t>(refs_a[i].size)) == 0);
  }
  CHECK(loaded.config.dropout_p == 0.3);

  RandomStream rng(101);
  T cari = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  T vis = T::uniform({1, 6, 6}, rng, 0.0, 1.0);
  auto pa = predict(model, cari, vis);
  auto pb = predict(loaded, cari, vis);
  CHECK(pa.verify_score == pb.verify_score);

  CHECK_THROWS_AS((void)load_checkpoint<double>(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}
