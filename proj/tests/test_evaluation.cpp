#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cavinet/evaluation.hpp>
#include <cavinet/synthetic.hpp>

#include <filesystem>

using namespace cavinet;
using T = Tensor<double>;
namespace fs = std::filesystem;

namespace {

// Brute-force metric oracles, deliberately restating the definitions.
struct OracleCounts {
  long tp = 0, tn = 0, fp = 0, fn = 0;
};

OracleCounts oracle_confusion(const std::vector<double>& s, const std::vector<int>& y,
                              double thr) {
  OracleCounts c;
  for (std::size_t i = 0; i < s.size(); ++i) {
    bool pred = s[i] >= thr;
    if (pred && y[i]) c.tp++;
    if (pred && !y[i]) c.fp++;
    if (!pred && y[i]) c.fn++;
    if (!pred && !y[i]) c.tn++;
  }
  return c;
}

double oracle_rank1(const std::vector<std::vector<double>>& rows,
                    const std::vector<Index>& y) {
  long ok = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < rows[i].size(); ++j)
      if (rows[i][j] > rows[i][best]) best = j;
    ok += static_cast<Index>(best) == y[i];
  }
  return static_cast<double>(ok) / static_cast<double>(rows.size());
}

}  // namespace

TEST_CASE("verification metrics match the brute-force oracle on random sets") {
  RandomStream rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    Index n = rng.uniform_int(1, 40);
    std::vector<double> scores;
    std::vector<int> labels;
    for (Index i = 0; i < n; ++i) {
      scores.push_back(rng.uniform());
      labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
    }
    double thr = rng.uniform(0.2, 0.8);
    auto got = verification_metrics(scores, labels, thr);
    auto want = oracle_confusion(scores, labels, thr);
    CHECK(got.counts.tp == want.tp);
    CHECK(got.counts.tn == want.tn);
    CHECK(got.counts.fp == want.fp);
    CHECK(got.counts.fn == want.fn);
    CHECK(got.counts.total() == n);
    CHECK(got.accuracy ==
          static_cast<double>(want.tp + want.tn) / static_cast<double>(n));
  }
}

TEST_CASE("threshold ties count as positive; constant-0.5 scores on balance") {
  std::vector<double> scores(10, 0.5);
  std::vector<int> labels = {1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
  auto r = verification_metrics(scores, labels, 0.5);
  CHECK(r.counts.tp == 5);
  CHECK(r.counts.fp == 5);
  CHECK(r.counts.tn == 0);
  CHECK(r.accuracy == 0.5);

  // oracle scores: accuracy 1.0
  std::vector<double> perfect;
  for (int y : labels) perfect.push_back(y ? 0.9 : 0.1);
  CHECK(verification_metrics(perfect, labels, 0.5).accuracy == 1.0);

  CHECK_THROWS_AS((void)verification_metrics({}, {}, 0.5), ConfigError);
}

TEST_CASE("rank-1 matches the brute-force oracle and tie-break convention") {
  RandomStream rng(43);
  for (int trial = 0; trial < 200; ++trial) {
    Index n = rng.uniform_int(1, 30);
    Index classes = rng.uniform_int(2, 8);
    std::vector<std::vector<double>> rows;
    std::vector<Index> labels;
    for (Index i = 0; i < n; ++i) {
      std::vector<double> row;
      for (Index c = 0; c < classes; ++c) row.push_back(rng.uniform());
      rows.push_back(row);
      labels.push_back(rng.uniform_int(0, classes - 1));
    }
    CHECK(rank1_accuracy(rows, labels) == oracle_rank1(rows, labels));
  }

  // uniform logits: lowest index wins, so accuracy = share of class-0 labels
  std::vector<std::vector<double>> uniform(6, std::vector<double>(4, 0.25));
  std::vector<Index> labels = {0, 0, 1, 2, 3, 0};
  CHECK(rank1_accuracy(uniform, labels) == doctest::Approx(3.0 / 6.0));

  std::vector<std::vector<double>> oracle_rows;
  for (Index y : labels) {
    std::vector<double> row(4, 0.0);
    row[static_cast<std::size_t>(y)] = 1.0;
    oracle_rows.push_back(row);
  }
  CHECK(rank1_accuracy(oracle_rows, labels) == 1.0);
}

TEST_CASE("identification rejects unseen identities; verification skips id heads") {
  SynthSpec spec;
  spec.identity_count = 6;
  spec.images_per_identity = 5;
  spec.image_size = 20;
  spec.seed = 47;
  auto manifest = synthetic_manifest(spec);
  auto split = make_splits(manifest, 2, {}, 47);
  ImageStore<double> store(manifest);
  generate_in_memory(spec, manifest, store);

  ModelConfig mc;
  mc.input_shape = {3, 20, 20};
  mc.blocks = {{8}};
  mc.shared_dim = 16;
  mc.specific_dim = 8;
  mc.head_hidden = {16};
  mc.identity_count = split.class_count;
  mc.dropout_p = 0.0;
  auto model = build_model<double>(mc, 49);

  auto unseen_recs = split.records_in(manifest, Partition::kUnseen,
                                      Modality::kCaricature);
  REQUIRE(!unseen_recs.empty());
  CHECK_THROWS_WITH_AS(
      (void)evaluate_identification(model, store, manifest, split, unseen_recs,
                                    Modality::kCaricature),
      doctest::Contains("unseen"), ConfigError);

  // unseen verification works fine without identification machinery
  RandomStream prng = substream(50, "pairs");
  auto pairs = sample_pairs(manifest, split, Partition::kUnseen, 30, 0.5, prng);
  auto r = evaluate_verification(model, store, pairs);
  CHECK(r.counts.total() == 30);
  // fresh model scores everything exactly 0.5 -> all predicted positive
  CHECK(r.counts.tp + r.counts.fp == 30);
}

TEST_CASE("confusion export: layout arithmetic, cell files, empty-cell notes") {
  SynthSpec spec;
  spec.identity_count = 4;
  spec.images_per_identity = 4;
  spec.image_size = 20;
  spec.seed = 53;
  auto manifest = synthetic_manifest(spec);
  auto split = make_splits(manifest, 0, {}, 53);
  ImageStore<double> store(manifest);
  generate_in_memory(spec, manifest, store);

  ModelConfig mc;
  mc.input_shape = {3, 20, 20};
  mc.blocks = {{8}};
  mc.shared_dim = 16;
  mc.specific_dim = 8;
  mc.head_hidden = {16};
  mc.identity_count = split.class_count;
  mc.dropout_p = 0.0;
  auto model = build_model<double>(mc, 55);

  // montage layout: width = 2*W + separator(4)
  T left = T::ones({3, 20, 20});
  T right = T::zeros({3, 20, 20});
  T mont = hstack_with_separator(left, right);
  CHECK(mont.shape() == Shape{3, 20, 44});
  CHECK(mont(0, 3, 21) == 0.5);  // separator band

  auto dir = fs::temp_directory_path() / "cavinet_confusions";
  fs::remove_all(dir);
  RandomStream prng = substream(56, "pairs");
  auto pairs = sample_pairs(manifest, split, Partition::kTest, 24, 0.5, prng);
  export_confusions(model, store, pairs, dir, 1);

  // fresh model: every score is 0.5 -> only tp and fp cells are populated
  CHECK(fs::exists(dir / "tp" / "tp_00.png"));
  CHECK(fs::exists(dir / "fp" / "fp_00.png"));
  CHECK(fs::exists(dir / "tn" / "empty.txt"));
  CHECK(fs::exists(dir / "fn" / "empty.txt"));
  // k=1: at most one montage per cell
  Index pngs = 0;
  for (auto& e : fs::recursive_directory_iterator(dir))
    if (e.path().extension() == ".png") ++pngs;
  CHECK(pngs <= 4);
  auto img = read_png<double>(dir / "tp" / "tp_00.png");
  CHECK(img.shape() == Shape{3, 20, 44});
  fs::remove_all(dir);
}

TEST_CASE("eval report JSON carries confusion-consistent accuracies") {
  EvalReport r;
  r.verification_acc_seen = 0.75;
  r.seen_counts = {6, 9, 3, 2};
  r.seen_pairs = 20;
  r.rank1_cari = 0.5;
  r.rank1_visual = 0.8;
  nlohmann::json j = r;
  CHECK(j["seen"]["verification_accuracy"] == 0.75);
  CHECK(j["seen"]["confusion"]["tp"] == 6);
  double recomputed =
      (j["seen"]["confusion"]["tp"].get<double>() +
       j["seen"]["confusion"]["tn"].get<double>()) /
      j["seen"]["pairs"].get<double>();
  CHECK(recomputed == 0.75);
  CHECK(!j.contains("unseen"));
}
