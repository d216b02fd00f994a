#include "nnmil/fingerprint.hpp"

#include <algorithm>
#include <cmath>

#include "nnmil/errors.hpp"
#include "nnmil/stats.hpp"

namespace nnmil {

using nlohmann::json;

void DataFingerprint::validate() const {
  if (!(patch_count_p5 <= patch_count_median && patch_count_median <= patch_count_p95)) {
    throw ValidationError("fingerprint: percentiles out of order");
  }
  if (embed_dim < 1) throw ValidationError("fingerprint: embed_dim must be >= 1");
  if (task == Task::classification) {
    double total = 0.0;
    for (double p : class_prevalence) total += p;
    if (class_prevalence.empty() || std::abs(total - 1.0) > 1e-9) {
      throw ValidationError("fingerprint: class prevalences must sum to 1");
    }
  }
  if (event_rate && (*event_rate < 0.0 || *event_rate > 1.0)) {
    throw ValidationError("fingerprint: event_rate outside [0, 1]");
  }
}

DataFingerprint compute_fingerprint(const DatasetManifest& manifest,
                                    std::span<const BagShape> shapes) {
  if (shapes.size() != manifest.entries.size()) {
    throw ValidationError("fingerprint: one bag shape per manifest entry is required");
  }
  const auto train = manifest.indices(Split::train);
  if (train.empty()) throw ValidationError("fingerprint: train split is empty");

  DataFingerprint fp;
  fp.task = manifest.task;
  fp.n_train = train.size();
  fp.n_val = manifest.indices(Split::val).size();
  fp.n_test = manifest.indices(Split::test).size();

  std::vector<double> counts;
  counts.reserve(train.size());
  fp.embed_dim = shapes[train.front()].embed_dim;
  for (std::size_t i : train) {
    if (shapes[i].embed_dim != fp.embed_dim) {
      throw ValidationError("fingerprint: slide '" + manifest.entries[i].slide_id +
                            "' has a different embedding dimension");
    }
    counts.push_back(static_cast<double>(shapes[i].n_patches));
  }
  std::sort(counts.begin(), counts.end());
  fp.patch_count_median = stats::percentile_sorted(counts, 0.5);
  fp.patch_count_p5 = stats::percentile_sorted(counts, 0.05);
  fp.patch_count_p95 = stats::percentile_sorted(counts, 0.95);
  fp.patch_count_iqr =
      stats::percentile_sorted(counts, 0.75) - stats::percentile_sorted(counts, 0.25);

  switch (manifest.task) {
    case Task::classification: {
      fp.class_prevalence.assign(static_cast<std::size_t>(manifest.n_classes), 0.0);
      for (std::size_t i : train) fp.class_prevalence[static_cast<std::size_t>(manifest.class_label(i))] += 1.0;
      for (auto& p : fp.class_prevalence) p /= static_cast<double>(train.size());
      break;
    }
    case Task::regression: {
      double lo = manifest.target(train.front()), hi = lo;
      for (std::size_t i : train) {
        lo = std::min(lo, manifest.target(i));
        hi = std::max(hi, manifest.target(i));
      }
      fp.target_min = lo;
      fp.target_max = hi;
      break;
    }
    case Task::survival: {
      double events = 0.0, horizon = 0.0;
      for (std::size_t i : train) {
        events += manifest.survival(i).event;
        horizon = std::max(horizon, manifest.survival(i).time);
      }
      fp.event_rate = events / static_cast<double>(train.size());
      fp.time_horizon_max = horizon;
      break;
    }
  }
  fp.validate();
  return fp;
}

DataFingerprint compute_fingerprint(const DatasetManifest& manifest,
                                    std::span<const SlideBag> bags) {
  std::vector<BagShape> shapes;
  shapes.reserve(bags.size());
  for (const auto& b : bags) shapes.push_back({b.n_patches(), b.embed_dim()});
  return compute_fingerprint(manifest, std::span<const BagShape>(shapes));
}

std::size_t chunk_count(std::size_t embed_dim, std::size_t hidden_dim, std::size_t stride) {
  if (hidden_dim > embed_dim || hidden_dim < 1 || stride < 1) {
    throw ValidationError("chunk_count: requires 1 <= H <= D and S >= 1");
  }
  return (embed_dim - hidden_dim) / stride + 1;
}

void RunConfig::validate() const {
  if (embed_dim < 1) throw ValidationError("config: embed_dim must be >= 1");
  if (bag_size < 1) throw ValidationError("config: bag_size must be >= 1");
  if (hidden_dim < 1 || hidden_dim > embed_dim) {
    throw ValidationError("config: hidden_dim must lie in [1, embed_dim]");
  }
  if (stride < 1) throw ValidationError("config: stride must be >= 1");
  if (batch_size < 1) throw ValidationError("config: batch_size must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("config: dropout must lie in [0, 1)");
  if (!(learning_rate > 0.0)) throw ValidationError("config: learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ValidationError("config: weight_decay must be >= 0");
  if (max_epochs < 1) throw ValidationError("config: max_epochs must be >= 1");
  if (n_outputs < 1) throw ValidationError("config: n_outputs must be >= 1");
  if (ensemble_chunks != chunk_count(embed_dim, hidden_dim, stride)) {
    throw ValidationError("config: ensemble_chunks disagrees with floor((D - H) / S) + 1");
  }
}

namespace {

template <typename T>
void apply_override(const json& overrides, const char* key, T& field) {
  if (overrides.contains(key)) field = overrides.at(key).get<T>();
}

}  // namespace

RunConfig derive_config(const DataFingerprint& fp, Task task, const json& overrides) {
  if (fp.embed_dim < 1) throw ValidationError("derive_config: D must be >= 1");
  if (!overrides.is_object()) throw ValidationError("derive_config: overrides must be an object");

  RunConfig cfg;
  cfg.task = task;
  cfg.embed_dim = fp.embed_dim;
  cfg.n_outputs = task == Task::classification ? std::max<std::size_t>(fp.class_prevalence.size(), 2) : 1;
  cfg.bag_size = static_cast<std::size_t>(std::max(1L, std::lround(fp.patch_count_median / 2.0)));
  cfg.hidden_dim = std::min<std::size_t>(256, fp.embed_dim);
  cfg.dropout = 0.25;
  cfg.batch_size = 32;
  cfg.learning_rate = task == Task::survival ? 1e-4 : 3e-4;
  cfg.weight_decay = 1e-4;
  cfg.warmup_epochs = 5;
  cfg.max_epochs = 100;
  cfg.patience = 10;
  cfg.seed = 42;
  cfg.training_mode = TrainingMode::nnmil;

  static const char* const kKnown[] = {"bag_size",     "hidden_dim",    "stride",     "dropout",
                                       "batch_size",   "learning_rate", "weight_decay",
                                       "warmup_epochs", "max_epochs",   "patience",   "seed",
                                       "training_mode"};
  for (const auto& [key, value] : overrides.items()) {
    if (std::find(std::begin(kKnown), std::end(kKnown), key) == std::end(kKnown)) {
      throw ValidationError("derive_config: '" + key + "' cannot be overridden");
    }
  }
  try {
    apply_override(overrides, "bag_size", cfg.bag_size);
    apply_override(overrides, "hidden_dim", cfg.hidden_dim);
    cfg.stride = std::max<std::size_t>(1, cfg.hidden_dim / 4);
    apply_override(overrides, "stride", cfg.stride);
    apply_override(overrides, "dropout", cfg.dropout);
    apply_override(overrides, "batch_size", cfg.batch_size);
    apply_override(overrides, "learning_rate", cfg.learning_rate);
    apply_override(overrides, "weight_decay", cfg.weight_decay);
    apply_override(overrides, "warmup_epochs", cfg.warmup_epochs);
    apply_override(overrides, "max_epochs", cfg.max_epochs);
    apply_override(overrides, "patience", cfg.patience);
    apply_override(overrides, "seed", cfg.seed);
    if (overrides.contains("training_mode")) {
      cfg.training_mode = parse_training_mode(overrides.at("training_mode").get<std::string>());
    }
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("derive_config: bad override value: ") + ex.what());
  }
  if (cfg.hidden_dim < 1 || cfg.hidden_dim > cfg.embed_dim) {
    throw ValidationError("derive_config: hidden_dim must lie in [1, D]");
  }
  cfg.ensemble_chunks = chunk_count(cfg.embed_dim, cfg.hidden_dim, cfg.stride);
  cfg.overrides = overrides;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> get_opt(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

void to_json(json& j, const DataFingerprint& fp) {
  j = json{{"task", to_string(fp.task)},
           {"patch_count_median", fp.patch_count_median},
           {"patch_count_iqr", fp.patch_count_iqr},
           {"patch_count_p5", fp.patch_count_p5},
           {"patch_count_p95", fp.patch_count_p95},
           {"embed_dim", fp.embed_dim},
           {"class_prevalence", fp.class_prevalence},
           {"target_min", opt(fp.target_min)},
           {"target_max", opt(fp.target_max)},
           {"event_rate", opt(fp.event_rate)},
           {"time_horizon_max", opt(fp.time_horizon_max)},
           {"magnification", opt(fp.magnification)},
           {"n_train", fp.n_train},
           {"n_val", fp.n_val},
           {"n_test", fp.n_test}};
}

void from_json(const json& j, DataFingerprint& fp) {
  fp.task = parse_task(j.at("task").get<std::string>());
  fp.patch_count_median = j.at("patch_count_median").get<double>();
  fp.patch_count_iqr = j.at("patch_count_iqr").get<double>();
  fp.patch_count_p5 = j.at("patch_count_p5").get<double>();
  fp.patch_count_p95 = j.at("patch_count_p95").get<double>();
  fp.embed_dim = j.at("embed_dim").get<std::size_t>();
  fp.class_prevalence = j.value("class_prevalence", std::vector<double>{});
  fp.target_min = get_opt(j, "target_min");
  fp.target_max = get_opt(j, "target_max");
  fp.event_rate = get_opt(j, "event_rate");
  fp.time_horizon_max = get_opt(j, "time_horizon_max");
  fp.magnification = get_opt(j, "magnification");
  fp.n_train = j.value("n_train", std::size_t{0});
  fp.n_val = j.value("n_val", std::size_t{0});
  fp.n_test = j.value("n_test", std::size_t{0});
  fp.validate();
}

void to_json(json& j, const RunConfig& cfg) {
  j = json{{"task", to_string(cfg.task)},
           {"embed_dim", cfg.embed_dim},
           {"n_outputs", cfg.n_outputs},
           {"bag_size", cfg.bag_size},
           {"hidden_dim", cfg.hidden_dim},
           {"stride", cfg.stride},
           {"dropout", cfg.dropout},
           {"batch_size", cfg.batch_size},
           {"learning_rate", cfg.learning_rate},
           {"weight_decay", cfg.weight_decay},
           {"warmup_epochs", cfg.warmup_epochs},
           {"max_epochs", cfg.max_epochs},
           {"patience", cfg.patience},
           {"seed", cfg.seed},
           {"ensemble_chunks", cfg.ensemble_chunks},
           {"training_mode", to_string(cfg.training_mode)},
           {"overrides", cfg.overrides}};
}

void from_json(const json& j, RunConfig& cfg) {
  cfg.task = parse_task(j.at("task").get<std::string>());
  cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
  cfg.n_outputs = j.at("n_outputs").get<std::size_t>();
  cfg.bag_size = j.at("bag_size").get<std::size_t>();
  cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  cfg.stride = j.at("stride").get<std::size_t>();
  cfg.dropout = j.at("dropout").get<double>();
  cfg.batch_size = j.at("batch_size").get<std::size_t>();
  cfg.learning_rate = j.at("learning_rate").get<double>();
  cfg.weight_decay = j.at("weight_decay").get<double>();
  cfg.warmup_epochs = j.at("warmup_epochs").get<std::size_t>();
  cfg.max_epochs = j.at("max_epochs").get<std::size_t>();
  cfg.patience = j.at("patience").get<std::size_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.ensemble_chunks = j.at("ensemble_chunks").get<std::size_t>();
  cfg.training_mode = parse_training_mode(j.at("training_mode").get<std::string>());
  cfg.overrides = j.value("overrides", json::object());
  cfg.validate();
}

}  // namespace nnmil
