#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cavinet/augment.hpp>
#include <cavinet/dataset.hpp>
#include <cavinet/synthetic.hpp>

#include <filesystem>
#include <fstream>
#include <set>

using namespace cavinet;
using T = Tensor<double>;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("cavinet_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

DatasetManifest toy_manifest(Index n_ids, Index per_modality) {
  DatasetManifest m;
  for (Index id = 0; id < n_ids; ++id) {
    m.identities.push_back("p" + std::to_string(id));
    for (Index i = 0; i < per_modality; ++i) {
      m.records.push_back({id, Modality::kCaricature,
                           "c" + std::to_string(id) + "_" + std::to_string(i)});
      m.records.push_back({id, Modality::kVisual,
                           "v" + std::to_string(id) + "_" + std::to_string(i)});
    }
  }
  return m;
}

}  // namespace

TEST_CASE("manifest parsing, counting, and validation errors") {
  auto dir = temp_dir("manifest");

  write_file(dir / "ok.csv",
             "identity,modality,relative_path\n"
             "alice,caricature,a0.png\n"
             "alice,visual,a1.png\n"
             "bob,caricature,b0.png\n"
             "bob,visual,b1.png\n"
             "bob,visual,b2.png\n");
  auto m = load_manifest(dir / "ok.csv");
  CHECK(m.identities.size() == 2);
  CHECK(m.count(Modality::kCaricature) == 2);
  CHECK(m.count(Modality::kVisual) == 3);

  // identity with an empty modality
  write_file(dir / "empty_mod.csv",
             "identity,modality,relative_path\n"
             "alice,caricature,a0.png\n");
  CHECK_THROWS_WITH_AS(load_manifest(dir / "empty_mod.csv"),
                       doctest::Contains("alice"), ConfigError);

  // parse error carries the line number
  write_file(dir / "bad_line.csv",
             "identity,modality,relative_path\n"
             "alice,caricature,a0.png\n"
             "garbage-without-commas\n");
  CHECK_THROWS_WITH_AS(load_manifest(dir / "bad_line.csv"), doctest::Contains("line 3"),
                       ConfigError);

  write_file(dir / "dup.csv",
             "identity,modality,relative_path\n"
             "alice,caricature,same.png\n"
             "alice,visual,same.png\n");
  CHECK_THROWS_WITH_AS(load_manifest(dir / "dup.csv"), doctest::Contains("duplicate"),
                       ConfigError);

  write_file(dir / "bad_mod.csv",
             "identity,modality,relative_path\n"
             "alice,sketch,a0.png\n");
  CHECK_THROWS_AS(load_manifest(dir / "bad_mod.csv"), ConfigError);

  fs::remove_all(dir);
}

TEST_CASE("a full-size manifest shape loads with the expected counts") {
  // 205 identities, 5091 caricatures, 6427 visual images
  auto dir = temp_dir("manifest_big");
  std::ofstream os(dir / "big.csv");
  os << "identity,modality,relative_path\n";
  Index cari_left = 5091, vis_left = 6427;
  for (Index id = 0; id < 205; ++id) {
    Index nc = std::min<Index>(cari_left - (204 - id) * 10, 35);
    nc = std::max<Index>(nc, 10);
    if (id == 204) nc = cari_left;
    Index nv = std::min<Index>(vis_left - (204 - id) * 10, 45);
    nv = std::max<Index>(nv, 10);
    if (id == 204) nv = vis_left;
    for (Index i = 0; i < nc; ++i)
      os << "id" << id << ",caricature,c" << id << "_" << i << ".png\n";
    for (Index i = 0; i < nv; ++i)
      os << "id" << id << ",visual,v" << id << "_" << i << ".png\n";
    cari_left -= nc;
    vis_left -= nv;
  }
  os.close();
  REQUIRE(cari_left == 0);
  REQUIRE(vis_left == 0);
  auto m = load_manifest(dir / "big.csv");
  CHECK(m.identities.size() == 205);
  CHECK(m.count(Modality::kCaricature) == 5091);
  CHECK(m.count(Modality::kVisual) == 6427);
  fs::remove_all(dir);
}

TEST_CASE("splits: determinism, unseen handling, full partition coverage") {
  auto m = toy_manifest(20, 6);

  auto s0 = make_splits(m, 0, {}, 5);
  CHECK(s0.unseen_identities.empty());
  CHECK(s0.seen_identities.size() == 20);

  auto s1 = make_splits(m, 2, {}, 5);
  auto s2 = make_splits(m, 2, {}, 5);
  CHECK(s1.seen_identities == s2.seen_identities);
  CHECK(s1.record_partition == s2.record_partition);
  auto s3 = make_splits(m, 2, {}, 6);
  CHECK(s1.record_partition != s3.record_partition);

  // seen/unseen disjoint
  std::set<Index> seen(s1.seen_identities.begin(), s1.seen_identities.end());
  for (Index u : s1.unseen_identities) CHECK(seen.count(u) == 0);

  // every seen identity appears in all three partitions, in both modalities
  for (Index id : s1.seen_identities) {
    for (Modality mod : {Modality::kCaricature, Modality::kVisual}) {
      std::set<Partition> present;
      for (Index r : m.records_of(id, mod))
        present.insert(s1.record_partition[static_cast<std::size_t>(r)]);
      CHECK(present.count(Partition::kTrain) == 1);
      CHECK(present.count(Partition::kVal) == 1);
      CHECK(present.count(Partition::kTest) == 1);
      CHECK(present.count(Partition::kUnseen) == 0);
    }
  }
  // unseen identities' records sit only in the unseen partition
  for (Index u : s1.unseen_identities)
    for (Modality mod : {Modality::kCaricature, Modality::kVisual})
      for (Index r : m.records_of(u, mod))
        CHECK(s1.record_partition[static_cast<std::size_t>(r)] == Partition::kUnseen);
}

TEST_CASE("splits reject identities with too few images, naming them") {
  auto m = toy_manifest(3, 6);
  m.identities.push_back("tiny");
  m.records.push_back({3, Modality::kCaricature, "t0"});
  m.records.push_back({3, Modality::kCaricature, "t1"});
  m.records.push_back({3, Modality::kVisual, "t2"});
  CHECK_THROWS_WITH_AS(make_splits(m, 0, {}, 1), doctest::Contains("tiny"),
                       ConfigError);
}

TEST_CASE("splits validate ratios and unseen_count") {
  auto m = toy_manifest(4, 5);
  CHECK_THROWS_AS(make_splits(m, 4, {}, 1), ConfigError);
  CHECK_THROWS_AS(make_splits(m, 0, {0.5, 0.2, 0.2}, 1), ConfigError);
  CHECK_THROWS_AS(make_splits(m, 0, {0.9, 0.0, 0.1}, 1), ConfigError);
}

TEST_CASE("pair sampling: exact positive counts and label consistency") {
  auto m = toy_manifest(10, 6);
  auto split = make_splits(m, 0, {}, 7);

  RandomStream rng = substream(7, "pairs");
  auto pairs = sample_pairs(m, split, Partition::kTrain, 1000, 0.5, rng);
  CHECK(pairs.size() == 1000);
  Index pos = 0;
  for (const auto& p : pairs) {
    pos += p.labels.verification;
    CHECK((p.labels.verification == 1) ==
          (p.labels.cari_identity == p.labels.visual_identity));
    CHECK(m.records[static_cast<std::size_t>(p.cari_record)].modality ==
          Modality::kCaricature);
    CHECK(m.records[static_cast<std::size_t>(p.visual_record)].modality ==
          Modality::kVisual);
    CHECK(split.record_partition[static_cast<std::size_t>(p.cari_record)] ==
          Partition::kTrain);
  }
  CHECK(pos == 500);

  RandomStream rng2 = substream(8, "pairs");
  auto all_pos = sample_pairs(m, split, Partition::kVal, 64, 1.0, rng2);
  for (const auto& p : all_pos) CHECK(p.labels.verification == 1);

  RandomStream rng3 = substream(9, "pairs");
  CHECK_THROWS_AS(
      (void)sample_pairs(m, split, Partition::kTrain, 10, 1.5, rng3), ConfigError);

  // determinism
  RandomStream ra = substream(11, "pairs");
  RandomStream rb = substream(11, "pairs");
  auto pa = sample_pairs(m, split, Partition::kTrain, 50, 0.5, ra);
  auto pb = sample_pairs(m, split, Partition::kTrain, 50, 0.5, rb);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].cari_record == pb[i].cari_record);
    CHECK(pa[i].visual_record == pb[i].visual_record);
  }
}

TEST_CASE("negative pairs are uniform over ordered identity pairs (chi-square)") {
  auto m = toy_manifest(10, 6);
  auto split = make_splits(m, 0, {}, 13);
  RandomStream rng = substream(13, "pairs/chi2");
  auto pairs = sample_pairs(m, split, Partition::kTrain, 10000, 0.0, rng);

  std::map<std::pair<Index, Index>, Index> cells;
  for (const auto& p : pairs) {
    CHECK(p.labels.cari_identity != p.labels.visual_identity);
    cells[{p.labels.cari_identity, p.labels.visual_identity}]++;
  }
  CHECK(cells.size() == 90);
  double expected = 10000.0 / 90.0;
  double chi2 = 0;
  for (const auto& [cell, n] : cells) {
    double d = static_cast<double>(n) - expected;
    chi2 += d * d / expected;
  }
  // 99th percentile of chi-square with 89 degrees of freedom
  CHECK(chi2 < 122.94);
}

TEST_CASE("augmentation: identity policy is bitwise identity") {
  RandomStream img_rng(21);
  T img = T::uniform({3, 16, 16}, img_rng, 0.0, 1.0);
  RandomStream rng = substream(21, "aug");
  T out = augment(img, AugmentPolicy::identity(), rng);
  CHECK(bitwise_equal(out, img));
}

TEST_CASE("augmentation: double flip restores the original") {
  RandomStream img_rng(22);
  T img = T::uniform({3, 12, 14}, img_rng, 0.0, 1.0);
  AugmentPolicy flip_only{0.0, 0.0, 0.0, 1.0};
  RandomStream r1 = substream(22, "a");
  RandomStream r2 = substream(23, "b");
  T once = augment(img, flip_only, r1);
  T twice = augment(once, flip_only, r2);
  CHECK_FALSE(bitwise_equal(once, img));
  CHECK(bitwise_equal(twice, img));
}

TEST_CASE("augmentation: caps enforced, output in range, deterministic") {
  RandomStream img_rng(24);
  T img = T::uniform({3, 16, 16}, img_rng, 0.0, 1.0);

  AugmentPolicy over;
  over.max_translate = 0.2;
  RandomStream r0 = substream(24, "x");
  CHECK_THROWS_AS((void)augment(img, over, r0), ConfigError);
  over = AugmentPolicy{};
  over.max_rotate_deg = 20.0;
  CHECK_THROWS_AS((void)augment(img, over, r0), ConfigError);

  AugmentPolicy full{};  // defaults sit at the caps
  RandomStream ra = substream(25, "y");
  RandomStream rb = substream(25, "y");
  T a = augment(img, full, ra);
  T b = augment(img, full, rb);
  CHECK(bitwise_equal(a, b));
  for (Index i = 0; i < a.size(); ++i) {
    CHECK(a[i] >= 0.0);
    CHECK(a[i] <= 1.0);
  }
}

TEST_CASE("png round trip is 8-bit faithful") {
  auto dir = temp_dir("png");
  RandomStream rng(31);
  T img = T::uniform({3, 9, 7}, rng, 0.0, 1.0);
  write_png(img, dir / "x.png");
  T back = read_png<double>(dir / "x.png");
  REQUIRE(back.shape() == img.shape());
  for (Index i = 0; i < img.size(); ++i)
    CHECK(std::abs(back[i] - img[i]) <= 0.5 / 255.0 + 1e-12);
  // a second write of the already-quantized image is exact
  write_png(back, dir / "y.png");
  T again = read_png<double>(dir / "y.png");
  CHECK(bitwise_equal(again, back));
  fs::remove_all(dir);
}

TEST_CASE("synthetic generation is a pure function of the spec") {
  SynthSpec spec;
  spec.identity_count = 3;
  spec.images_per_identity = 2;
  spec.seed = 99;
  T a = synth_image<double>(spec, 1, Modality::kCaricature, 0);
  T b = synth_image<double>(spec, 1, Modality::kCaricature, 0);
  CHECK(bitwise_equal(a, b));
  T c = synth_image<double>(spec, 1, Modality::kCaricature, 1);
  CHECK_FALSE(bitwise_equal(a, c));
  T v = synth_image<double>(spec, 1, Modality::kVisual, 0);
  CHECK_FALSE(bitwise_equal(a, v));
}

TEST_CASE("distinct identities get distinct prototypes (collision check)") {
  SynthSpec spec;
  spec.identity_count = 12;
  for (Index i = 0; i < 12; ++i)
    for (Index j = i + 1; j < 12; ++j) {
      auto a = identity_prototype(spec, i);
      auto b = identity_prototype(spec, j);
      double diff = std::abs(a.bg_r - b.bg_r);
      std::size_t n = std::min(a.glyphs.size(), b.glyphs.size());
      for (std::size_t g = 0; g < n; ++g) {
        diff = std::max(diff, std::abs(a.glyphs[g].cx - b.glyphs[g].cx));
        diff = std::max(diff, std::abs(a.glyphs[g].sx - b.glyphs[g].sx));
        diff = std::max(diff, std::abs(a.glyphs[g].r - b.glyphs[g].r));
      }
      CHECK(diff > 1e-6);
    }
}

TEST_CASE("synthetic manifest counting: 10 identities x 12 + 12") {
  SynthSpec spec;
  spec.identity_count = 10;
  spec.images_per_identity = 12;
  auto m = synthetic_manifest(spec);
  CHECK(m.count(Modality::kCaricature) == 120);
  CHECK(m.count(Modality::kVisual) == 120);
  m.validate();

  SynthSpec bad = spec;
  bad.image_size = 8;
  CHECK_THROWS_AS((void)synthetic_manifest(bad), ConfigError);
}

TEST_CASE("synthetic dataset writes PNGs and a loadable manifest") {
  auto dir = temp_dir("synth");
  SynthSpec spec;
  spec.identity_count = 2;
  spec.images_per_identity = 3;
  spec.seed = 5;
  auto m = generate_synthetic<double>(spec, dir);
  CHECK(fs::exists(dir / "manifest.csv"));
  auto loaded = load_manifest(dir / "manifest.csv");
  CHECK(loaded.identities.size() == 2);
  CHECK(loaded.count(Modality::kCaricature) == 6);

  ImageStore<double> store(loaded);
  const T& img = store.image(0);
  CHECK(img.shape() == Shape{3, 32, 32});
  fs::remove_all(dir);
}

TEST_CASE("nearest-prototype on raw pixels: above chance, below perfect") {
  SynthSpec spec;
  spec.identity_count = 10;
  spec.images_per_identity = 8;
  spec.seed = 3;

  // prototypes: mean of the visual images; probes: caricature images
  std::vector<T> prototypes;
  for (Index id = 0; id < spec.identity_count; ++id) {
    T mean = T::zeros({3, 32, 32});
    for (Index i = 0; i < spec.images_per_identity; ++i)
      mean.array() +=
          synth_image<double>(spec, id, Modality::kVisual, i).array();
    mean.array() /= static_cast<double>(spec.images_per_identity);
    prototypes.push_back(std::move(mean));
  }
  Index correct = 0, total = 0;
  for (Index id = 0; id < spec.identity_count; ++id)
    for (Index i = 0; i < spec.images_per_identity; ++i) {
      T probe = synth_image<double>(spec, id, Modality::kCaricature, i);
      Index best = 0;
      double best_d = 1e300;
      for (Index p = 0; p < spec.identity_count; ++p) {
        double d = (probe.vector() - prototypes[static_cast<std::size_t>(p)].vector())
                       .squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = p;
        }
      }
      correct += best == id;
      ++total;
    }
  double acc = static_cast<double>(correct) / static_cast<double>(total);
  INFO("nearest-prototype caricature accuracy ", acc);
  CHECK(acc > 0.2);   // clearly above the 0.1 chance floor
  CHECK(acc < 0.999);  // but the task is not trivial
}
