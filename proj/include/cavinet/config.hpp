#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cavinet/augment.hpp"
#include "cavinet/dataset.hpp"
#include "cavinet/model.hpp"
#include "cavinet/synthetic.hpp"
#include "cavinet/training.hpp"

namespace cavinet {

// Versioned JSON run config driving every CLI command. Exactly one dataset
// source (manifest file or synthetic spec) must be present; flags may override
// individual keys, and the fully resolved config is written next to outputs so
// a run can be reproduced from its artifacts.

inline constexpr int kConfigSchemaVersion = 1;

struct DatasetSection {
  std::optional<std::string> manifest;  // path to manifest.csv
  std::optional<SynthSpec> synth;
  Index unseen_count = 0;
  SplitRatios ratios;
  std::uint64_t split_seed = 0;  // 0 = derive from the global seed
};

struct EvalSection {
  double threshold = 0.5;
  Index pairs = 400;
  Index unseen_pairs = 200;
  double positive_fraction = 0.5;
};

struct AblationSection {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> lambda_grid{0.0, 0.05, 0.1, 0.2, 0.4, 0.8};
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/out";
  DatasetSection dataset;
  ModelConfig model;
  TrainConfig train;
  EvalSection eval;
  AblationSection ablation;

  void validate() const {
    if (schema_version != kConfigSchemaVersion)
      raise<ConfigError>("config: schema_version ", schema_version,
                         " unsupported (expected ", kConfigSchemaVersion, ")");
    if (dataset.manifest.has_value() == dataset.synth.has_value())
      raise<ConfigError>(
          "config: exactly one of dataset.manifest / dataset.synth is required");
    if (dataset.manifest && !std::filesystem::exists(*dataset.manifest))
      raise<ConfigError>("config: manifest path '", *dataset.manifest,
                         "' does not resolve");
    dataset.ratios.validate();
    if (dataset.synth) dataset.synth->validate();
    train.validate();
    if (output_dir.empty()) raise<ConfigError>("config: output_dir is empty");
  }
};

// --- JSON bindings ---------------------------------------------------------

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"identity_count", s.identity_count},
       {"images_per_identity", s.images_per_identity},
       {"image_size", s.image_size},
       {"distortion", s.distortion},
       {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  s.identity_count = j.value("identity_count", Index(10));
  s.images_per_identity = j.value("images_per_identity", Index(12));
  s.image_size = j.value("image_size", Index(32));
  s.distortion = j.value("distortion", 0.5);
  s.seed = j.value("seed", std::uint64_t(1));
}

inline void to_json(nlohmann::json& j, const SplitRatios& r) {
  j = {{"train", r.train}, {"val", r.val}, {"test", r.test}};
}
inline void from_json(const nlohmann::json& j, SplitRatios& r) {
  r.train = j.value("train", 0.70);
  r.val = j.value("val", 0.15);
  r.test = j.value("test", 0.15);
}

inline void to_json(nlohmann::json& j, const DatasetSection& d) {
  j = nlohmann::json::object();
  if (d.manifest) j["manifest"] = *d.manifest;
  if (d.synth) j["synth"] = *d.synth;
  j["unseen_count"] = d.unseen_count;
  j["ratios"] = d.ratios;
  j["split_seed"] = d.split_seed;
}
inline void from_json(const nlohmann::json& j, DatasetSection& d) {
  if (j.contains("manifest")) d.manifest = j.at("manifest").get<std::string>();
  if (j.contains("synth")) d.synth = j.at("synth").get<SynthSpec>();
  d.unseen_count = j.value("unseen_count", Index(0));
  d.ratios = j.value("ratios", SplitRatios{});
  d.split_seed = j.value("split_seed", std::uint64_t(0));
}

inline void to_json(nlohmann::json& j, const AugmentPolicy& p) {
  j = {{"max_translate", p.max_translate},
       {"max_rotate_deg", p.max_rotate_deg},
       {"noise_sigma", p.noise_sigma},
       {"flip_prob", p.flip_prob}};
}
inline void from_json(const nlohmann::json& j, AugmentPolicy& p) {
  p.max_translate = j.value("max_translate", 0.10);
  p.max_rotate_deg = j.value("max_rotate_deg", 15.0);
  p.noise_sigma = j.value("noise_sigma", 0.05);
  p.flip_prob = j.value("flip_prob", 0.5);
}

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = {{"eta", t.eta},
       {"decay", t.decay},
       {"batch_size", t.batch_size},
       {"epochs", t.epochs},
       {"weights", {t.weight_alpha, t.weight_beta, t.weight_gamma}},
       {"lambda", t.lambda},
       {"dropout", t.dropout_p},
       {"freeze_depth", t.freeze_depth},
       {"tied_weights", t.tied_weights},
       {"pairs_per_epoch", t.pairs_per_epoch},
       {"positive_fraction", t.positive_fraction},
       {"augment", t.augment},
       {"augment_policy", t.augment_policy},
       {"eval_pairs", t.eval_pairs},
       {"eval_images", t.eval_images}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  t.eta = j.value("eta", 1e-3);
  t.decay = j.value("decay", 1e-6);
  t.batch_size = j.value("batch_size", Index(25));
  t.epochs = j.value("epochs", Index(30));
  if (j.contains("weights")) {
    auto w = j.at("weights");
    t.weight_alpha = w.at(0).get<double>();
    t.weight_beta = w.at(1).get<double>();
    t.weight_gamma = w.at(2).get<double>();
  }
  t.lambda = j.value("lambda", 0.2);
  t.dropout_p = j.value("dropout", 0.6);
  t.freeze_depth = j.value("freeze_depth", Index(0));
  t.tied_weights = j.value("tied_weights", false);
  t.pairs_per_epoch = j.value("pairs_per_epoch", Index(600));
  t.positive_fraction = j.value("positive_fraction", 0.5);
  t.augment = j.value("augment", false);
  t.augment_policy = j.value("augment_policy", AugmentPolicy{});
  t.eval_pairs = j.value("eval_pairs", Index(200));
  t.eval_images = j.value("eval_images", Index(200));
}

inline void to_json(nlohmann::json& j, const EvalSection& e) {
  j = {{"threshold", e.threshold},
       {"pairs", e.pairs},
       {"unseen_pairs", e.unseen_pairs},
       {"positive_fraction", e.positive_fraction}};
}
inline void from_json(const nlohmann::json& j, EvalSection& e) {
  e.threshold = j.value("threshold", 0.5);
  e.pairs = j.value("pairs", Index(400));
  e.unseen_pairs = j.value("unseen_pairs", Index(200));
  e.positive_fraction = j.value("positive_fraction", 0.5);
}

inline void to_json(nlohmann::json& j, const AblationSection& a) {
  j = {{"seeds", a.seeds}, {"lambda_grid", a.lambda_grid}};
}
inline void from_json(const nlohmann::json& j, AblationSection& a) {
  a.seeds = j.value("seeds", std::vector<std::uint64_t>{1, 2, 3});
  a.lambda_grid =
      j.value("lambda_grid", std::vector<double>{0.0, 0.05, 0.1, 0.2, 0.4, 0.8});
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"schema_version", c.schema_version},
       {"seed", c.seed},
       {"output_dir", c.output_dir},
       {"dataset", c.dataset},
       {"model", c.model},
       {"train", c.train},
       {"eval", c.eval},
       {"ablation", c.ablation}};
}
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  c.schema_version = j.value("schema_version", kConfigSchemaVersion);
  c.seed = j.value("seed", std::uint64_t(1));
  c.output_dir = j.value("output_dir", std::string("runs/out"));
  c.dataset = j.value("dataset", DatasetSection{});
  c.model = j.value("model", ModelConfig{});
  c.train = j.value("train", TrainConfig{});
  c.eval = j.value("eval", EvalSection{});
  c.ablation = j.value("ablation", AblationSection{});
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) raise<IoError>("config: cannot open '", path.string(), "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    raise<ConfigError>("config: '", path.string(), "' is not valid JSON: ", e.what());
  }
  return j.get<RunConfig>();
}

inline void write_resolved_config(const RunConfig& cfg,
                                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = cfg;
  std::ofstream os(dir / "config.resolved.json");
  os << j.dump(2) << '\n';
}

}  // namespace cavinet
