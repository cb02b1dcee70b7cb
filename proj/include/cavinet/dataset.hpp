#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cavinet/image.hpp"
#include "cavinet/model.hpp"
#include "cavinet/rng.hpp"

namespace cavinet {

enum class Modality { kCaricature, kVisual };

inline const char* modality_name(Modality m) {
  return m == Modality::kCaricature ? "caricature" : "visual";
}

struct ManifestRecord {
  Index identity = 0;  // index into DatasetManifest::identities
  Modality modality = Modality::kCaricature;
  std::string path;    // relative to the manifest's base directory
};

// Dataset manifest: identities plus (identity, modality, path) records.
// The on-disk form is a CSV with the header `identity,modality,relative_path`,
// chosen for hand-editability. Identity indices follow first appearance.
struct DatasetManifest {
  std::vector<std::string> identities;
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;

  Index count(Modality m) const {
    Index n = 0;
    for (const auto& r : records) n += r.modality == m;
    return n;
  }

  std::vector<Index> records_of(Index identity, Modality m) const {
    std::vector<Index> out;
    for (Index i = 0; i < static_cast<Index>(records.size()); ++i)
      if (records[static_cast<std::size_t>(i)].identity == identity &&
          records[static_cast<std::size_t>(i)].modality == m)
        out.push_back(i);
    return out;
  }

  void validate() const {
    if (identities.empty()) raise<ConfigError>("manifest: no identities");
    std::set<std::string> paths;
    std::vector<int> has_cari(identities.size(), 0), has_vis(identities.size(), 0);
    for (const auto& r : records) {
      if (r.identity < 0 || r.identity >= static_cast<Index>(identities.size()))
        raise<ConfigError>("manifest: record with unknown identity index ",
                           r.identity);
      if (!paths.insert(r.path).second)
        raise<ConfigError>("manifest: duplicate path '", r.path, "'");
      (r.modality == Modality::kCaricature ? has_cari : has_vis)
          [static_cast<std::size_t>(r.identity)] = 1;
    }
    for (std::size_t i = 0; i < identities.size(); ++i)
      if (!has_cari[i] || !has_vis[i])
        raise<ConfigError>("manifest: identity '", identities[i],
                           "' lacks images in the ",
                           has_cari[i] ? "visual" : "caricature", " modality");
  }
};

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) raise<IoError>("manifest: cannot write '", path.string(), "'");
  os << "identity,modality,relative_path\n";
  for (const auto& r : m.records)
    os << m.identities[static_cast<std::size_t>(r.identity)] << ','
       << modality_name(r.modality) << ',' << r.path << '\n';
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) raise<IoError>("manifest: cannot open '", path.string(), "'");
  DatasetManifest m;
  m.base_dir = path.parent_path();
  std::map<std::string, Index> index_of;

  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != "identity,modality,relative_path")
        raise<ConfigError>("manifest: line 1: expected header "
                           "'identity,modality,relative_path', got '", line, "'");
      continue;
    }
    if (line.empty()) continue;
    auto c1 = line.find(',');
    auto c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      raise<ConfigError>("manifest: line ", line_no, ": expected 3 comma-separated "
                         "fields, got '", line, "'");
    std::string identity = line.substr(0, c1);
    std::string modality = line.substr(c1 + 1, c2 - c1 - 1);
    std::string rel_path = line.substr(c2 + 1);
    if (identity.empty() || rel_path.empty())
      raise<ConfigError>("manifest: line ", line_no, ": empty field");

    ManifestRecord r;
    if (modality == "caricature")
      r.modality = Modality::kCaricature;
    else if (modality == "visual")
      r.modality = Modality::kVisual;
    else
      raise<ConfigError>("manifest: line ", line_no, ": unknown modality '", modality,
                         "'");
    auto it = index_of.find(identity);
    if (it == index_of.end()) {
      it = index_of.emplace(identity, static_cast<Index>(m.identities.size())).first;
      m.identities.push_back(identity);
    }
    r.identity = it->second;
    r.path = std::move(rel_path);
    m.records.push_back(std::move(r));
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// seen/unseen identity splits with per-identity train/val/test image partitions

enum class Partition { kTrain, kVal, kTest, kUnseen };

struct SplitRatios {
  double train = 0.70, val = 0.15, test = 0.15;
  void validate() const {
    if (train <= 0 || val <= 0 || test <= 0)
      raise<ConfigError>("splits: ratios must be positive");
    if (std::abs(train + val + test - 1.0) > 1e-9)
      raise<ConfigError>("splits: ratios must sum to 1");
  }
};

struct SplitSpec {
  std::vector<Index> seen_identities;    // manifest identity indices
  std::vector<Index> unseen_identities;
  std::vector<Partition> record_partition;  // aligned with manifest records
  std::vector<Index> identity_class;        // manifest identity -> class id, -1 unseen
  Index class_count = 0;

  std::vector<Index> records_in(const DatasetManifest& m, Partition p,
                                Modality mod) const {
    std::vector<Index> out;
    for (Index i = 0; i < static_cast<Index>(m.records.size()); ++i)
      if (record_partition[static_cast<std::size_t>(i)] == p &&
          m.records[static_cast<std::size_t>(i)].modality == mod)
        out.push_back(i);
    return out;
  }
};

inline SplitSpec make_splits(const DatasetManifest& manifest, Index unseen_count,
                             SplitRatios ratios, std::uint64_t seed) {
  ratios.validate();
  const Index n_id = static_cast<Index>(manifest.identities.size());
  if (unseen_count < 0 || unseen_count >= n_id)
    raise<ConfigError>("splits: unseen_count ", unseen_count,
                       " must lie in [0, ", n_id, ")");

  std::vector<Index> order(static_cast<std::size_t>(n_id));
  for (Index i = 0; i < n_id; ++i) order[static_cast<std::size_t>(i)] = i;
  RandomStream rng = substream(seed, "splits/identities");
  for (Index i = n_id - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(rng.uniform_int(0, i))]);

  SplitSpec spec;
  spec.unseen_identities.assign(order.end() - unseen_count, order.end());
  spec.seen_identities.assign(order.begin(), order.end() - unseen_count);
  std::sort(spec.seen_identities.begin(), spec.seen_identities.end());
  std::sort(spec.unseen_identities.begin(), spec.unseen_identities.end());

  spec.identity_class.assign(static_cast<std::size_t>(n_id), -1);
  for (std::size_t c = 0; c < spec.seen_identities.size(); ++c)
    spec.identity_class[static_cast<std::size_t>(spec.seen_identities[c])] =
        static_cast<Index>(c);
  spec.class_count = static_cast<Index>(spec.seen_identities.size());

  spec.record_partition.assign(manifest.records.size(), Partition::kUnseen);
  std::set<Index> unseen_set(spec.unseen_identities.begin(),
                             spec.unseen_identities.end());

  for (Index id = 0; id < n_id; ++id) {
    if (unseen_set.count(id)) continue;
    for (Modality mod : {Modality::kCaricature, Modality::kVisual}) {
      auto recs = manifest.records_of(id, mod);
      const Index n = static_cast<Index>(recs.size());
      if (n < 3)
        raise<ConfigError>("splits: identity '",
                           manifest.identities[static_cast<std::size_t>(id)],
                           "' has only ", n, " ", modality_name(mod),
                           " images; needs at least 3 to cover train/val/test");
      RandomStream prng = substream(seed, "splits/partition",
                                    static_cast<std::uint64_t>(id),
                                    mod == Modality::kCaricature ? 0 : 1);
      for (Index i = n - 1; i > 0; --i)
        std::swap(recs[static_cast<std::size_t>(i)],
                  recs[static_cast<std::size_t>(prng.uniform_int(0, i))]);

      // floor allocation, remainder by largest fraction, every bucket >= 1
      double want[3] = {ratios.train * n, ratios.val * n, ratios.test * n};
      Index cnt[3];
      for (int b = 0; b < 3; ++b) cnt[b] = static_cast<Index>(want[b]);
      Index rem = n - cnt[0] - cnt[1] - cnt[2];
      while (rem > 0) {
        int best = 0;
        double best_frac = -1;
        for (int b = 0; b < 3; ++b) {
          double frac = want[b] - static_cast<double>(cnt[b]);
          if (frac > best_frac + 1e-12) {
            best_frac = frac;
            best = b;
          }
        }
        cnt[best]++;
        --rem;
      }
      for (int b = 0; b < 3; ++b) {
        while (cnt[b] == 0) {
          int donor = cnt[0] >= cnt[1] && cnt[0] >= cnt[2] ? 0 : (cnt[1] >= cnt[2] ? 1 : 2);
          cnt[donor]--;
          cnt[b]++;
        }
      }

      Index at = 0;
      const Partition parts[3] = {Partition::kTrain, Partition::kVal,
                                  Partition::kTest};
      for (int b = 0; b < 3; ++b)
        for (Index i = 0; i < cnt[b]; ++i)
          spec.record_partition[static_cast<std::size_t>(recs[static_cast<std::size_t>(at++)])] =
              parts[b];
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// cross-modal pair sampling

struct PairSample {
  Index cari_record = 0;
  Index visual_record = 0;
  PairLabels labels;
};

// Draws `count` cross-modal pairs from one partition. Positives pair two
// images of one identity; negatives pair distinct identities uniformly over
// ordered pairs. The positive count is exact up to rounding. Labels carry
// class ids for seen partitions and manifest identity ids for the unseen
// partition (which is used for verification only).
inline std::vector<PairSample> sample_pairs(const DatasetManifest& manifest,
                                            const SplitSpec& split, Partition part,
                                            Index count, double positive_fraction,
                                            RandomStream& rng) {
  if (positive_fraction < 0.0 || positive_fraction > 1.0)
    raise<ConfigError>("pairs: positive_fraction ", positive_fraction,
                       " outside [0,1]");
  const auto& ids =
      part == Partition::kUnseen ? split.unseen_identities : split.seen_identities;

  // per-identity record pools within the partition
  std::vector<std::vector<Index>> cari_pool, vis_pool;
  std::vector<Index> pool_identity;
  for (Index id : ids) {
    std::vector<Index> c, v;
    for (Index r = 0; r < static_cast<Index>(manifest.records.size()); ++r) {
      if (split.record_partition[static_cast<std::size_t>(r)] != part) continue;
      const auto& rec = manifest.records[static_cast<std::size_t>(r)];
      if (rec.identity != id) continue;
      (rec.modality == Modality::kCaricature ? c : v).push_back(r);
    }
    if (!c.empty() && !v.empty()) {
      cari_pool.push_back(std::move(c));
      vis_pool.push_back(std::move(v));
      pool_identity.push_back(id);
    }
  }
  const Index n_ids = static_cast<Index>(pool_identity.size());
  if (n_ids == 0)
    raise<ConfigError>("pairs: partition holds no identity with both modalities");
  if (n_ids < 2 && positive_fraction < 1.0)
    raise<ConfigError>("pairs: negatives need at least two identities");

  auto label_of = [&](Index pool_idx) {
    Index id = pool_identity[static_cast<std::size_t>(pool_idx)];
    Index cls = split.identity_class[static_cast<std::size_t>(id)];
    return cls >= 0 ? cls : id;
  };
  auto pick = [&](const std::vector<Index>& v) {
    return v[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<Index>(v.size()) - 1))];
  };

  const Index n_pos = static_cast<Index>(
      std::llround(static_cast<double>(count) * positive_fraction));
  std::vector<PairSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    PairSample s;
    if (i < n_pos) {
      Index p = rng.uniform_int(0, n_ids - 1);
      s.cari_record = pick(cari_pool[static_cast<std::size_t>(p)]);
      s.visual_record = pick(vis_pool[static_cast<std::size_t>(p)]);
      s.labels.cari_identity = label_of(p);
      s.labels.visual_identity = label_of(p);
      s.labels.verification = 1;
    } else {
      Index pc = rng.uniform_int(0, n_ids - 1);
      Index pv = rng.uniform_int(0, n_ids - 2);
      if (pv >= pc) ++pv;  // uniform over ordered distinct pairs
      s.cari_record = pick(cari_pool[static_cast<std::size_t>(pc)]);
      s.visual_record = pick(vis_pool[static_cast<std::size_t>(pv)]);
      s.labels.cari_identity = label_of(pc);
      s.labels.visual_identity = label_of(pv);
      s.labels.verification = 0;
    }
    out.push_back(s);
  }
  // interleave positives and negatives
  for (Index i = count - 1; i > 0; --i)
    std::swap(out[static_cast<std::size_t>(i)],
              out[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  return out;
}

// ---------------------------------------------------------------------------
// image store: loads referenced images once, keeps them in memory

template <class Scalar>
class ImageStore {
 public:
  explicit ImageStore(const DatasetManifest& manifest) : manifest_(&manifest) {
    images_.resize(manifest.records.size());
    loaded_.assign(manifest.records.size(), false);
  }

  const Tensor<Scalar>& image(Index record) {
    auto i = static_cast<std::size_t>(record);
    if (!loaded_[i]) {
      images_[i] =
          read_png<Scalar>(manifest_->base_dir / manifest_->records[i].path);
      loaded_[i] = true;
    }
    return images_[i];
  }

  // For synthetic in-memory datasets that never touch disk.
  void put(Index record, Tensor<Scalar> image) {
    auto i = static_cast<std::size_t>(record);
    images_[i] = std::move(image);
    loaded_[i] = true;
  }

 private:
  const DatasetManifest* manifest_;
  std::vector<Tensor<Scalar>> images_;
  std::vector<bool> loaded_;
};

}  // namespace cavinet
