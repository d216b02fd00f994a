#include "cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nnmil/aggregator.hpp"
#include "nnmil/data_model.hpp"
#include "nnmil/errors.hpp"
#include "nnmil/fingerprint.hpp"
#include "nnmil/inference.hpp"
#include "nnmil/metrics.hpp"
#include "nnmil/rng.hpp"
#include "nnmil/stats.hpp"
#include "nnmil/trainer.hpp"

namespace nnmil::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// File helpers

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

json read_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<json> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError("'" + path.string() + "' line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

/// FNV-1a 64-bit, printed as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Every command records what it consumed in <out>/run.json.
struct RunRecord {
  std::string command;
  std::vector<std::string> args;
  std::uint64_t seed = 42;
  std::map<std::string, fs::path> inputs;
  std::optional<json> config;

  void write(const fs::path& out_dir) const {
    json inputs_doc = json::object();
    for (const auto& [role, path] : inputs) {
      std::string hash;
      if (fs::is_regular_file(path)) hash = fnv1a_hex(read_text(path));
      inputs_doc[role] = {{"path", path.string()}, {"fnv1a64", hash}};
    }
    json doc = {{"command", command},
                {"args", args},
                {"seed", seed},
                {"inputs", inputs_doc},
                {"config_hash", config ? json(fnv1a_hex(config->dump())) : json(nullptr)},
                {"timestamp", utc_timestamp()}};
    write_json(out_dir / "run.json", doc);
  }
};

DatasetManifest load_manifest_with(const fs::path& manifest_path, const std::string& data_dir) {
  DatasetManifest m = load_manifest(manifest_path);
  if (!data_dir.empty()) m.base_dir = data_dir;
  return m;
}

std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> dims;
  std::stringstream s(text);
  std::string part;
  while (std::getline(s, part, 'x')) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
      dims.push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("--dims expects DxH, got '" + text + "'");
    }
  }
  if (dims.size() != 2) throw ValidationError("--dims expects DxH, got '" + text + "'");
  return dims;
}

std::vector<double> parse_fractions(const std::string& text) {
  std::vector<double> out;
  std::stringstream s(text);
  std::string part;
  while (std::getline(s, part, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ValidationError("--fractions expects comma-separated numbers, got '" + text + "'");
    }
  }
  if (out.empty()) throw ValidationError("--fractions is empty");
  return out;
}

/// key=value; the value is parsed as JSON when possible, else kept as a string.
void apply_override(json& overrides, const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("--override expects key=value, got '" + item + "'");
  const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
  try {
    overrides[key] = json::parse(value);
  } catch (const json::exception&) {
    overrides[key] = value;
  }
}

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json label_json(const DatasetManifest& m, std::size_t i) {
  switch (m.task) {
    case Task::classification: return m.class_label(i);
    case Task::regression: return m.target(i);
    case Task::survival: return {{"time", m.survival(i).time}, {"event", m.survival(i).event}};
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Commands

struct SynthArgs {
  std::string out;
  std::string task = "classification";
  std::size_t n_bags = 100;
  std::size_t min_patches = 50;
  std::size_t max_patches = 100;
  std::size_t embed_dim = 32;
  double signal_fraction = 0.1;
  double signal_strength = 1.0;
  double positive_rate = 0.5;
  double coefficient_scale = 1.0;
  double censoring_rate = 0.3;
  std::optional<double> noise_std;
  std::uint64_t seed = 42;
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  SyntheticSpec spec;
  spec.task = parse_task(a.task);
  spec.n_bags = a.n_bags;
  spec.min_patches = a.min_patches;
  spec.max_patches = a.max_patches;
  spec.embed_dim = a.embed_dim;
  spec.signal_fraction = a.signal_fraction;
  spec.signal_strength = a.signal_strength;
  spec.positive_rate = a.positive_rate;
  spec.coefficient_scale = a.coefficient_scale;
  spec.censoring_rate = a.censoring_rate;
  spec.noise_std = a.noise_std;
  spec.seed = a.seed;
  const SyntheticDataset data = generate_synthetic_dataset(spec);
  ensure_dir(a.out);
  write_synthetic_dataset(data, a.out);

  json truth = json::array();
  for (std::size_t b = 0; b < data.bags.size(); ++b) {
    truth.push_back({{"slide_id", data.bags[b].slide_id}, {"signal_indices", data.signal_indices[b]}});
  }
  write_json(fs::path(a.out) / "signal.json", {{"direction", data.direction}, {"bags", truth}});
  RunRecord{"synth", args, a.seed, {}, std::nullopt}.write(a.out);
  out << "wrote " << data.bags.size() << " bags to " << a.out << "\n";
  return kOk;
}

struct CommonArgs {
  std::string manifest;
  std::string data_dir;
  std::string config;
  std::string fingerprint;
  std::string out;
  std::string split = "test";
  std::string mode;
  std::string task;
  std::string checkpoint;
  std::string predictions;
  std::string fractions = "0,0.1,0.2,0.3,0.4,0.5";
  std::string kappa_weighting = "none";
  std::string eval_time = "median";
  std::string metric;
  std::string dims = "8x4";
  std::vector<std::string> overrides;
  std::size_t outputs = 3;
  std::size_t trials = 3;
  std::size_t n_bootstrap = 1000;
  double eps = 1e-5;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epoch_budget;
  bool quiet = false;

  std::uint64_t seed_or_default() const { return seed.value_or(42); }
};

int cmd_fingerprint(const CommonArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  const DatasetManifest manifest = load_manifest_with(a.manifest, a.data_dir);
  std::vector<BagShape> shapes;
  shapes.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) shapes.push_back(read_embedding_header(manifest.resolve(e)));
  const DataFingerprint fp = compute_fingerprint(manifest, shapes);
  ensure_dir(a.out);
  write_json(fs::path(a.out) / "fingerprint.json", fp);
  RunRecord{"fingerprint", args, a.seed_or_default(), {{"manifest", a.manifest}}, std::nullopt}.write(a.out);
  out << json(fp).dump(2) << "\n";
  return kOk;
}

json collect_overrides(const CommonArgs& a) {
  json overrides = json::object();
  if (!a.config.empty()) {
    overrides = read_json(a.config);
    if (!overrides.is_object()) throw ValidationError("--config must hold a JSON object of overrides");
  }
  for (const auto& item : a.overrides) apply_override(overrides, item);
  if (!a.mode.empty()) overrides["training_mode"] = std::string(to_string(parse_training_mode(a.mode)));
  if (a.seed) overrides["seed"] = *a.seed;
  return overrides;
}

int cmd_plan(const CommonArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  DataFingerprint fp;
  try {
    fp = read_json(a.fingerprint).get<DataFingerprint>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("fingerprint: ") + e.what());
  }
  const Task task = a.task.empty() ? fp.task : parse_task(a.task);
  const RunConfig cfg = derive_config(fp, task, collect_overrides(a));
  const json doc = cfg;
  ensure_dir(a.out);
  write_json(fs::path(a.out) / "config.json", doc);
  std::map<std::string, fs::path> inputs{{"fingerprint", a.fingerprint}};
  if (!a.config.empty()) inputs["overrides"] = a.config;
  RunRecord{"plan", args, cfg.seed, inputs, std::optional<json>(std::in_place, doc)}.write(a.out);
  out << doc.dump(2) << "\n";
  return kOk;
}

/// A full RunConfig file is used as is (flags still apply on top); anything
/// else is treated as overrides to the derived configuration.
RunConfig resolve_config(const CommonArgs& a, const DatasetManifest& manifest, std::span<const SlideBag> bags) {
  if (!a.config.empty()) {
    const json doc = read_json(a.config);
    if (doc.is_object() && doc.contains("embed_dim") && doc.contains("hidden_dim") && doc.contains("bag_size")) {
      RunConfig cfg;
      try {
        cfg = doc.get<RunConfig>();
      } catch (const json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
      }
      if (!a.mode.empty()) cfg.training_mode = parse_training_mode(a.mode);
      if (a.seed) cfg.seed = *a.seed;
      for (const auto& item : a.overrides) {
        json o = json::object();
        apply_override(o, item);
        json merged = cfg;
        for (auto& [k, v] : o.items()) merged[k] = v;
        cfg = merged.get<RunConfig>();
      }
      cfg.validate();
      return cfg;
    }
  }
  const DataFingerprint fp = compute_fingerprint(manifest, bags);
  return derive_config(fp, manifest.task, collect_overrides(a));
}

int cmd_train(const CommonArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  const DatasetManifest manifest = load_manifest_with(a.manifest, a.data_dir);
  const std::vector<SlideBag> bags = load_bags(manifest);
  const RunConfig cfg = resolve_config(a, manifest, bags);
  ensure_dir(a.out);
  TrainOptions options;
  options.checkpoint_path = fs::path(a.out) / "checkpoint.nnmil";
  options.epoch_budget = a.epoch_budget;
  if (!a.quiet) {
    options.on_epoch = [&out](const EpochRecord& e) {
      out << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss " << e.val_loss << " lr "
          << e.learning_rate << "\n";
    };
  }
  const TrainResult result = train(cfg, manifest, bags, options);
  write_json(fs::path(a.out) / "report.json", result.report);
  write_json(fs::path(a.out) / "config.json", cfg);
  std::map<std::string, fs::path> inputs{{"manifest", a.manifest}};
  if (!a.config.empty()) inputs["config"] = a.config;
  RunRecord{"train", args, cfg.seed, inputs, std::optional<json>(std::in_place, json(cfg))}.write(a.out);
  out << "stopped at epoch " << result.report.stopped_epoch << ", checkpoint "
      << result.report.checkpoint_path << "\n";
  return kOk;
}

json classification_row(const ClsPrediction& p) {
  json chunks = json::array();
  for (Eigen::Index k = 0; k < p.per_chunk_probs.rows(); ++k) {
    chunks.push_back(vec_json(p.per_chunk_probs.row(k).transpose()));
  }
  return {{"predicted_class", p.predicted_class},
          {"mean_logits", vec_json(p.mean_logits)},
          {"mean_probs", vec_json(p.mean_probs)},
          {"per_chunk_probs", chunks},
          {"h_total", p.h_total},
          {"h_aleatoric", p.h_aleatoric},
          {"mutual_information", p.mutual_information},
          {"uncertainty", p.h_aleatoric}};
}

json survival_row(const SurvPrediction& p) {
  return {{"risk", p.risk},
          {"mean_risk", p.mean_risk},
          {"var_risk", p.var_risk},
          {"per_chunk_risk", p.per_chunk_risk},
          {"eval_times", p.eval_times},
          {"per_chunk_survival", p.per_chunk_survival},
          {"mean_survival", p.mean_survival},
          {"unc_survival", p.unc_survival},
          {"uncertainty", p.unc_survival.front()}};
}

int cmd_predict(const CommonArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  const DatasetManifest manifest = load_manifest_with(a.manifest, a.data_dir);
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  if (ckpt.config.task != manifest.task) throw ValidationError("checkpoint task differs from manifest task");
  const Split split = parse_split(a.split);
  const ChunkWindows windows = windows_for(ckpt.config);
  const std::vector<std::size_t> idx = manifest.indices(split);
  if (idx.empty()) throw ValidationError("split '" + a.split + "' is empty");

  auto load = [&](std::size_t i) {
    SlideBag bag = read_embedding_file(manifest.resolve(manifest.entries[i]));
    bag.slide_id = manifest.entries[i].slide_id;
    bag.patient_id = manifest.entries[i].patient_id;
    return bag;
  };

  // Survival needs the baseline hazard from the training split.
  std::optional<BaselineSurvival> baseline;
  std::vector<double> eval_times;
  if (manifest.task == Task::survival) {
    std::vector<double> risks;
    std::vector<SurvivalRecord> records;
    for (std::size_t i : manifest.indices(Split::train)) {
      const Eigen::MatrixXd chunks = chunk_outputs(ckpt.params, load(i), windows);
      risks.push_back(ensemble_output(chunks, Task::survival)(0));
      records.push_back(manifest.survival(i));
    }
    baseline = estimate_baseline_survival(risks, records);
    if (a.eval_time == "median") {
      eval_times.push_back(median_event_time(records));
    } else {
      try {
        std::size_t used = 0;
        eval_times.push_back(std::stod(a.eval_time, &used));
        if (used != a.eval_time.size()) throw std::invalid_argument(a.eval_time);
      } catch (const std::exception&) {
        throw ValidationError("--eval-time expects 'median' or a number, got '" + a.eval_time + "'");
      }
    }
  }

  std::ostringstream slides;
  std::map<std::string, std::vector<ClsPrediction>> patient_cls;
  std::map<std::string, std::vector<SurvPrediction>> patient_surv;
  std::map<std::string, std::vector<RegPrediction>> patient_reg;
  for (std::size_t i : idx) {
    const SlideBag bag = load(i);
    json row = {{"slide_id", bag.slide_id},
                {"patient_id", bag.patient_id},
                {"task", std::string(to_string(manifest.task))},
                {"label", label_json(manifest, i)}};
    switch (manifest.task) {
      case Task::classification: {
        const ClsPrediction p = predict_classification(ckpt.params, bag, windows);
        row.update(classification_row(p));
        patient_cls[bag.patient_id].push_back(p);
        break;
      }
      case Task::regression: {
        const RegPrediction p = predict_regression(ckpt.params, bag, windows);
        row.update({{"prediction", p.mean}, {"std", p.stddev}, {"per_chunk", p.per_chunk}, {"uncertainty", p.stddev}});
        patient_reg[bag.patient_id].push_back(p);
        break;
      }
      case Task::survival: {
        const SurvPrediction p = predict_survival(ckpt.params, bag, windows, *baseline, eval_times);
        row.update(survival_row(p));
        patient_surv[bag.patient_id].push_back(p);
        break;
      }
    }
    slides << row.dump() << "\n";
  }

  std::ostringstream patients;
  for (const auto& [pid, preds] : patient_cls) {
    const PatientClsPrediction p = aggregate_patient(std::span<const ClsPrediction>(preds));
    json row = classification_row(p.combined);
    row.erase("per_chunk_probs");
    row["patient_id"] = pid;
    row["n_wsi"] = p.n_wsi;
    row["uncertainty"] = p.uncertainty;
    patients << row.dump() << "\n";
  }
  for (const auto& [pid, preds] : patient_surv) {
    const PatientSurvPrediction p = aggregate_patient(std::span<const SurvPrediction>(preds));
    patients << json{{"patient_id", pid},         {"n_wsi", p.n_wsi},
                     {"risk", p.risk},            {"var_risk", p.var_risk},
                     {"eval_times", p.eval_times}, {"mean_survival", p.mean_survival},
                     {"unc_survival", p.unc_survival}, {"uncertainty", p.unc_survival.front()}}
                    .dump()
             << "\n";
  }
  for (const auto& [pid, preds] : patient_reg) {
    std::vector<double> means, stds;
    for (const auto& p : preds) {
      means.push_back(p.mean);
      stds.push_back(p.stddev);
    }
    patients << json{{"patient_id", pid},
                     {"n_wsi", preds.size()},
                     {"prediction", stats::mean(means)},
                     {"uncertainty", adjust_patient_uncertainty(stats::mean(stds), preds.size())}}
                    .dump()
             << "\n";
  }

  ensure_dir(a.out);
  write_text(fs::path(a.out) / "predictions.jsonl", slides.str());
  write_text(fs::path(a.out) / "patients.jsonl", patients.str());
  RunRecord{"predict", args, a.seed_or_default(), {{"manifest", a.manifest}, {"checkpoint", a.checkpoint}},
            std::optional<json>(std::in_place, json(ckpt.config))}
      .write(a.out);
  out << "wrote " << idx.size() << " predictions to " << (fs::path(a.out) / "predictions.jsonl").string() << "\n";
  return kOk;
}

/// Per-slide columns pulled from a predictions file.
struct PredictionTable {
  Task task = Task::classification;
  std::vector<int> classes, predicted;
  std::vector<double> score;  // p(class 1) for binary classification, prediction for regression, risk for survival
  std::vector<double> values;
  std::vector<SurvivalRecord> survival;
  std::vector<double> uncertainty;
  int n_classes = 0;

  std::size_t size() const { return uncertainty.size(); }
};

PredictionTable load_predictions(const fs::path& path) {
  const std::vector<json> rows = read_jsonl(path);
  if (rows.empty()) throw ValidationError("predictions file is empty");
  PredictionTable t;
  try {
    t.task = parse_task(rows.front().at("task").get<std::string>());
    for (const auto& r : rows) {
      if (parse_task(r.at("task").get<std::string>()) != t.task) throw ValidationError("mixed tasks in predictions");
      t.uncertainty.push_back(r.at("uncertainty").get<double>());
      switch (t.task) {
        case Task::classification: {
          t.classes.push_back(r.at("label").get<int>());
          t.predicted.push_back(r.at("predicted_class").get<int>());
          const auto probs = r.at("mean_probs").get<std::vector<double>>();
          t.n_classes = static_cast<int>(probs.size());
          t.score.push_back(probs.size() == 2 ? probs[1] : 0.0);
          break;
        }
        case Task::regression:
          t.values.push_back(r.at("label").get<double>());
          t.score.push_back(r.at("prediction").get<double>());
          break;
        case Task::survival:
          t.survival.push_back({r.at("label").at("time").get<double>(), r.at("label").at("event").get<int>()});
          t.score.push_back(r.at("risk").get<double>());
          break;
      }
    }
  } catch (const json::exception& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  return t;
}

template <typename V>
std::vector<V> pick(const std::vector<V>& v, std::span<const std::size_t> idx) {
  std::vector<V> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

SampleMetric make_metric(const PredictionTable& t, const std::string& name, KappaWeighting weighting) {
  if (name == "accuracy") return [&t](auto idx) { return accuracy(pick(t.classes, idx), pick(t.predicted, idx)); };
  if (name == "bacc") {
    return [&t](auto idx) { return balanced_accuracy(pick(t.classes, idx), pick(t.predicted, idx)); };
  }
  if (name == "kappa") {
    return [&t, weighting](auto idx) {
      return cohens_kappa(pick(t.classes, idx), pick(t.predicted, idx), weighting,
                          static_cast<std::size_t>(t.n_classes));
    };
  }
  if (name == "auc") {
    if (t.n_classes != 2) throw ValidationError("auc needs a binary classification task");
    return [&t](auto idx) { return auc(pick(t.classes, idx), pick(t.score, idx)); };
  }
  if (name == "pearson") return [&t](auto idx) { return pearson(pick(t.score, idx), pick(t.values, idx)); };
  if (name == "cindex") {
    return [&t](auto idx) { return concordance_index(pick(t.survival, idx), pick(t.score, idx)); };
  }
  throw ValidationError("unknown metric '" + name + "'");
}

std::vector<std::string> metric_battery(const PredictionTable& t) {
  switch (t.task) {
    case Task::classification:
      return t.n_classes == 2 ? std::vector<std::string>{"accuracy", "bacc", "kappa", "auc"}
                              : std::vector<std::string>{"accuracy", "bacc", "kappa"};
    case Task::regression: return {"pearson"};
    case Task::survival: return {"cindex"};
  }
  return {};
}

json bootstrap_json(const BootstrapResult& b) {
  return {{"point", b.point}, {"mean", b.mean},     {"sd", b.stddev},
          {"ci_low", b.ci_low}, {"ci_high", b.ci_high}, {"n_replicates", b.n_replicates},
          {"n_redrawn", b.n_redrawn}};
}

int cmd_evaluate(const CommonArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  const PredictionTable t = load_predictions(a.predictions);
  const KappaWeighting weighting = parse_kappa_weighting(a.kappa_weighting);
  BootstrapOptions boot;
  boot.seed = a.seed_or_default();
  boot.n_replicates = a.n_bootstrap;

  json report = {{"task", std::string(to_string(t.task))}, {"n", t.size()}};
  if (t.task == Task::classification) report["kappa_weighting"] = std::string(to_string(weighting));
  json metrics = json::object();
  for (const auto& name : metric_battery(t)) {
    metrics[name] = bootstrap_json(bootstrap_ci(make_metric(t, name, weighting), t.size(), boot));
  }
  report["metrics"] = metrics;
  ensure_dir(a.out);

  if (t.task == Task::survival) {
    // Kaplan-Meier curves for the groups above and at-or-below the median risk.
    const double cut = stats::median(t.score);
    std::vector<SurvivalRecord> high, low;
    for (std::size_t i = 0; i < t.size(); ++i) (t.score[i] > cut ? high : low).push_back(t.survival[i]);
    json km = {{"risk_cut", cut}, {"n_high", high.size()}, {"n_low", low.size()}};
    if (!high.empty() && !low.empty()) {
      write_text(fs::path(a.out) / "km_high.csv", km_csv(km_curve(high)));
      write_text(fs::path(a.out) / "km_low.csv", km_csv(km_curve(low)));
      try {
        const LogRankResult lr = logrank_test(high, low);
        km["logrank"] = {{"statistic", lr.statistic}, {"p_value", lr.p_value}};
      } catch (const ValidationError& e) {
        km["logrank"] = {{"error", e.what()}};
      }
    }
    report["km_split"] = km;
  }

  write_json(fs::path(a.out) / "evaluation.json", report);
  RunRecord{"evaluate", args, boot.seed, {{"predictions", a.predictions}}, std::nullopt}.write(a.out);
  out << report.dump(2) << "\n";
  return kOk;
}

int cmd_reject_curve(const CommonArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  const PredictionTable t = load_predictions(a.predictions);
  const std::vector<double> fractions = parse_fractions(a.fractions);
  std::string metric = a.metric;
  if (metric.empty()) metric = t.task == Task::classification ? "bacc" : t.task == Task::regression ? "pearson" : "cindex";
  const auto curve = rejection_curve(make_metric(t, metric, parse_kappa_weighting(a.kappa_weighting)),
                                     t.uncertainty, fractions);
  json points = json::array();
  for (const auto& p : curve) {
    points.push_back({{"fraction", p.fraction},
                      {"value", p.value ? json(*p.value) : json(nullptr)},
                      {"n_retained", p.n_retained}});
  }
  ensure_dir(a.out);
  write_text(fs::path(a.out) / "rejection.csv", rejection_csv(curve));
  const json doc = {{"metric", metric}, {"points", points}};
  write_json(fs::path(a.out) / "rejection.json", doc);
  RunRecord{"reject-curve", args, a.seed_or_default(), {{"predictions", a.predictions}}, std::nullopt}.write(a.out);
  out << rejection_csv(curve);
  return kOk;
}

int cmd_gradcheck(const CommonArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  const auto dims = parse_dims(a.dims);
  GradCheckOptions opt;
  opt.embed_dim = dims[0];
  opt.hidden_dim = dims[1];
  opt.task = a.task.empty() ? Task::classification : parse_task(a.task);
  opt.n_outputs = opt.task == Task::classification ? a.outputs : 1;
  opt.n_trials = a.trials;
  opt.eps = a.eps;
  Rng rng(a.seed_or_default());
  const GradCheckResult r = grad_check(opt, rng);
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_json(fs::path(a.out) / "gradcheck.json",
               {{"max_relative_error", r.max_relative_error}, {"entries_checked", r.entries_checked}});
    RunRecord{"gradcheck", args, a.seed_or_default(), {}, std::nullopt}.write(a.out);
  }
  std::ostringstream line;
  line << std::setprecision(3) << std::scientific << r.max_relative_error;
  out << "max relative error " << line.str() << " over " << r.entries_checked << " entries\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multiple instance learning on pre-extracted slide embeddings", "nnmil"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  CommonArgs c;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth->add_option("--out", synth_args.out, "Output directory")->required();
  synth->add_option("--task", synth_args.task, "classification | regression | survival");
  synth->add_option("--n-bags", synth_args.n_bags);
  synth->add_option("--min-patches", synth_args.min_patches);
  synth->add_option("--max-patches", synth_args.max_patches);
  synth->add_option("--embed-dim", synth_args.embed_dim);
  synth->add_option("--signal-fraction", synth_args.signal_fraction);
  synth->add_option("--signal-strength", synth_args.signal_strength);
  synth->add_option("--positive-rate", synth_args.positive_rate);
  synth->add_option("--coefficient-scale", synth_args.coefficient_scale);
  synth->add_option("--censoring-rate", synth_args.censoring_rate);
  synth->add_option("--noise-std", synth_args.noise_std, "Background per-coordinate std (default 1/sqrt(D))");
  synth->add_option("--seed", synth_args.seed);

  auto* fingerprint = app.add_subcommand("fingerprint", "Compute the dataset fingerprint");
  fingerprint->add_option("--manifest", c.manifest)->required();
  fingerprint->add_option("--data-dir", c.data_dir, "Directory embedding paths resolve against");
  fingerprint->add_option("--out", c.out)->required();
  fingerprint->add_option("--seed", c.seed);

  auto* plan = app.add_subcommand("plan", "Derive a run configuration from a fingerprint");
  plan->add_option("--fingerprint", c.fingerprint)->required();
  plan->add_option("--config", c.config, "JSON object of overrides");
  plan->add_option("--override", c.overrides, "key=value override (repeatable)");
  plan->add_option("--task", c.task);
  plan->add_option("--mode", c.mode, "nnmil | full_bag_batch1");
  plan->add_option("--out", c.out)->required();
  plan->add_option("--seed", c.seed);

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--manifest", c.manifest)->required();
  train_cmd->add_option("--data-dir", c.data_dir);
  train_cmd->add_option("--config", c.config, "RunConfig JSON, or a JSON object of overrides");
  train_cmd->add_option("--override", c.overrides, "key=value override (repeatable)");
  train_cmd->add_option("--mode", c.mode, "nnmil | full_bag_batch1");
  train_cmd->add_option("--epoch-budget", c.epoch_budget, "Stop after this many epochs");
  train_cmd->add_option("--out", c.out)->required();
  train_cmd->add_option("--seed", c.seed);
  train_cmd->add_flag("--quiet", c.quiet);

  auto* predict = app.add_subcommand("predict", "Chunk-ensemble inference over a split");
  predict->add_option("--manifest", c.manifest)->required();
  predict->add_option("--data-dir", c.data_dir);
  predict->add_option("--checkpoint", c.checkpoint)->required();
  predict->add_option("--split", c.split, "train | val | test");
  predict->add_option("--eval-time", c.eval_time, "median | <time>");
  predict->add_option("--out", c.out)->required();
  predict->add_option("--seed", c.seed);

  auto* evaluate = app.add_subcommand("evaluate", "Metric battery with bootstrap intervals");
  evaluate->add_option("--predictions", c.predictions)->required();
  evaluate->add_option("--kappa-weighting", c.kappa_weighting, "none | quadratic");
  evaluate->add_option("--n-bootstrap", c.n_bootstrap);
  evaluate->add_option("--out", c.out)->required();
  evaluate->add_option("--seed", c.seed);

  auto* reject = app.add_subcommand("reject-curve", "Metric after rejecting the most uncertain slides");
  reject->add_option("--predictions", c.predictions)->required();
  reject->add_option("--fractions", c.fractions, "Comma-separated rejection fractions in [0, 1)");
  reject->add_option("--metric", c.metric, "accuracy | bacc | kappa | auc | pearson | cindex");
  reject->add_option("--kappa-weighting", c.kappa_weighting, "none | quadratic");
  reject->add_option("--out", c.out)->required();
  reject->add_option("--seed", c.seed);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gradcheck->add_option("--dims", c.dims, "DxH, e.g. 8x4");
  gradcheck->add_option("--task", c.task);
  gradcheck->add_option("--outputs", c.outputs, "Classes for the classification head");
  gradcheck->add_option("--trials", c.trials);
  gradcheck->add_option("--eps", c.eps);
  gradcheck->add_option("--out", c.out);
  gradcheck->add_option("--seed", c.seed);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "nnmil: " << e.what() << "\n";
    out << app.help();
    return kValidationFailure;
  }

  try {
    if (*synth) return cmd_synth(synth_args, args, out);
    if (*fingerprint) return cmd_fingerprint(c, args, out);
    if (*plan) return cmd_plan(c, args, out);
    if (*train_cmd) return cmd_train(c, args, out);
    if (*predict) return cmd_predict(c, args, out);
    if (*evaluate) return cmd_evaluate(c, args, out);
    if (*reject) return cmd_reject_curve(c, args, out);
    if (*gradcheck) return cmd_gradcheck(c, args, out);
  } catch (const ValidationError& e) {
    err << "nnmil: " << e.what() << "\n";
    return kValidationFailure;
  } catch (const IoError& e) {
    err << "nnmil: " << e.what() << "\n";
    return kIoFailure;
  } catch (const FormatError& e) {
    err << "nnmil: " << e.what() << "\n";
    return kIoFailure;
  } catch (const CorruptionError& e) {
    err << "nnmil: " << e.what() << "\n";
    return kIoFailure;
  } catch (const std::exception& e) {
    err << "nnmil: " << e.what() << "\n";
    return kValidationFailure;
  }
  out << app.help();
  return kValidationFailure;
}

}  // namespace nnmil::cli
