#include "nnmil/trainer.hpp"

#include <cmath>
#include <numbers>

#include "nnmil/errors.hpp"
#include "nnmil/inference.hpp"
#include "nnmil/sampling.hpp"

namespace nnmil {

double lr_schedule(std::size_t epoch, const RunConfig& config) {
  const double lr = config.learning_rate;
  const std::size_t warmup = config.warmup_epochs;
  if (epoch < warmup) {
    return lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
  }
  if (config.max_epochs <= warmup) return lr;
  const double progress =
      static_cast<double>(epoch - warmup) / static_cast<double>(config.max_epochs - warmup);
  return std::max(0.0, lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

template <typename T>
void adamw_step(AggregatorParams<T>& params, const Gradients<T>& grads, OptimizerState<T>& state,
                double lr, const AdamConfig& adam) {
  std::vector<std::span<T>> theta, m, v;
  std::vector<std::span<const T>> g;
  std::vector<std::string> names;
  params.visit([&](std::string_view name, const std::vector<std::size_t>&, std::span<T> s) {
    names.emplace_back(name);
    theta.push_back(s);
  });
  grads.visit([&](std::string_view, const std::vector<std::size_t>&, std::span<const T> s) { g.push_back(s); });
  state.m.visit([&](std::string_view, const std::vector<std::size_t>&, std::span<T> s) { m.push_back(s); });
  state.v.visit([&](std::string_view, const std::vector<std::size_t>&, std::span<T> s) { v.push_back(s); });

  for (std::size_t t = 0; t < theta.size(); ++t) {
    if (g[t].size() != theta[t].size() || m[t].size() != theta[t].size() || v[t].size() != theta[t].size()) {
      throw ShapeError("adamw: shape mismatch for tensor '" + names[t] + "'");
    }
    for (T x : g[t]) {
      if (!std::isfinite(x)) throw ValidationError("adamw: non-finite gradient in tensor '" + names[t] + "'");
    }
  }

  ++state.step;
  const double step = static_cast<double>(state.step);
  const T b1 = static_cast<T>(adam.beta1);
  const T b2 = static_cast<T>(adam.beta2);
  const T one_minus_b1 = static_cast<T>(1.0 - adam.beta1);
  const T one_minus_b2 = static_cast<T>(1.0 - adam.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(adam.beta1, step));
  const T bc2 = static_cast<T>(1.0 - std::pow(adam.beta2, step));
  const T decay = static_cast<T>(1.0 - lr * adam.weight_decay);
  const T rate = static_cast<T>(lr);
  const T eps = static_cast<T>(adam.eps);

  for (std::size_t t = 0; t < theta.size(); ++t) {
    for (std::size_t i = 0; i < theta[t].size(); ++i) {
      const T gi = g[t][i];
      theta[t][i] *= decay;
      m[t][i] = b1 * m[t][i] + one_minus_b1 * gi;
      v[t][i] = b2 * v[t][i] + one_minus_b2 * gi * gi;
      const T m_hat = m[t][i] / bc1;
      const T v_hat = v[t][i] / bc2;
      theta[t][i] -= rate * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

template void adamw_step<float>(AggregatorParams<float>&, const Gradients<float>&, OptimizerState<float>&,
                                double, const AdamConfig&);
template void adamw_step<double>(AggregatorParams<double>&, const Gradients<double>&,
                                 OptimizerState<double>&, double, const AdamConfig&);

bool EarlyStopping::observe(std::size_t epoch, double loss) {
  last_epoch_ = epoch;
  if (!std::isnan(loss) && loss < best_loss_) {
    best_loss_ = loss;
    best_epoch_ = epoch;
    return false;
  }
  if (!best_epoch_) return false;
  return epoch - *best_epoch_ >= patience_;
}

void to_json(nlohmann::json& j, const TrainReport& report) {
  auto number = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : report.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", number(e.train_loss)},
                      {"val_loss", number(e.val_loss)},
                      {"learning_rate", e.learning_rate},
                      {"steps", e.steps}});
  }
  j = {{"epochs", epochs},
       {"stopped_epoch", report.stopped_epoch},
       {"best_epoch", report.best_epoch ? nlohmann::json(*report.best_epoch) : nlohmann::json(nullptr)},
       {"best_val_loss", number(report.best_val_loss)},
       {"checkpoint_path", report.checkpoint_path},
       {"notes", report.notes}};
}

namespace {

BatchTargets targets_for(const DatasetManifest& manifest, std::span<const std::size_t> indices) {
  BatchTargets t;
  t.task = manifest.task;
  for (std::size_t i : indices) {
    switch (manifest.task) {
      case Task::classification: t.classes.push_back(manifest.class_label(i)); break;
      case Task::regression: t.values.push_back(manifest.target(i)); break;
      case Task::survival: t.survival.push_back(manifest.survival(i)); break;
    }
  }
  return t;
}

bool has_event(const BatchTargets& t) {
  for (const auto& r : t.survival) {
    if (r.event == 1) return true;
  }
  return false;
}

BatchPlan plan_epoch(const RunConfig& cfg, const DatasetManifest& manifest,
                     std::span<const std::size_t> train_idx, Rng& rng) {
  if (cfg.training_mode == TrainingMode::full_bag_batch1) {
    return shuffled_batches(train_idx.size(), 1, rng);
  }
  const BatchTargets all = targets_for(manifest, train_idx);
  switch (cfg.task) {
    case Task::classification: return balanced_batches(all.classes, cfg.batch_size, rng);
    case Task::regression:
      return regression_batches(all.values, cfg.batch_size, std::min<std::size_t>(10, all.values.size()), rng);
    case Task::survival: return survival_batches(all.survival, cfg.batch_size, rng);
  }
  throw ValidationError("train: unknown task");
}

void check_inputs(const RunConfig& cfg, const DatasetManifest& manifest, std::span<const SlideBag> bags) {
  cfg.validate();
  manifest.validate();
  if (cfg.task != manifest.task) throw ValidationError("train: config task differs from manifest task");
  if (bags.size() != manifest.entries.size()) {
    throw ValidationError("train: bag count differs from manifest entry count");
  }
  for (const auto& bag : bags) {
    if (bag.embed_dim() != cfg.embed_dim) {
      throw ShapeError("train: slide '" + bag.slide_id + "' has D=" + std::to_string(bag.embed_dim()) +
                       " but the config has D=" + std::to_string(cfg.embed_dim));
    }
  }
  if (cfg.task == Task::classification && cfg.n_outputs != manifest.n_classes) {
    throw ValidationError("train: n_outputs differs from the manifest class count");
  }
}

}  // namespace

double ensemble_loss(const AggregatorParams<float>& params, const RunConfig& config,
                     const DatasetManifest& manifest, std::span<const SlideBag> bags,
                     std::span<const std::size_t> indices) {
  if (indices.empty()) return std::numeric_limits<double>::quiet_NaN();
  const ChunkWindows windows = windows_for(config);
  MatrixX<double> outputs(static_cast<Eigen::Index>(indices.size()),
                          static_cast<Eigen::Index>(params.n_outputs()));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Eigen::MatrixXd chunks = chunk_outputs(params, bags[indices[r]], windows);
    outputs.row(static_cast<Eigen::Index>(r)) = ensemble_output(chunks, config.task).transpose();
  }
  const BatchTargets targets = targets_for(manifest, indices);
  if (config.task == Task::survival && !has_event(targets)) return std::numeric_limits<double>::quiet_NaN();
  if (config.task == Task::classification && config.training_mode == TrainingMode::nnmil) {
    // Balanced batches weight every class equally, so the validation loss
    // does too: the mean over classes of the per-class mean cross-entropy.
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < config.n_outputs; ++c) {
      std::vector<Eigen::Index> rows;
      BatchTargets sub;
      sub.task = Task::classification;
      for (std::size_t r = 0; r < targets.classes.size(); ++r) {
        if (targets.classes[r] == static_cast<int>(c)) {
          rows.push_back(static_cast<Eigen::Index>(r));
          sub.classes.push_back(targets.classes[r]);
        }
      }
      if (rows.empty()) continue;
      const MatrixX<double> sub_outputs = outputs(rows, Eigen::all);
      sum += evaluate_loss<double>(sub_outputs, sub).value;
      ++present;
    }
    return sum / static_cast<double>(present);
  }
  return evaluate_loss<double>(outputs, targets).value;
}

TrainResult train(const RunConfig& config, const DatasetManifest& manifest, std::span<const SlideBag> bags,
                  const TrainOptions& options) {
  check_inputs(config, manifest, bags);
  const std::vector<std::size_t> train_idx = manifest.indices(Split::train);
  const std::vector<std::size_t> val_idx = manifest.indices(Split::val);
  if (train_idx.empty() || val_idx.empty()) throw ValidationError("train: train and val splits must be nonempty");

  const bool full_bag = config.training_mode == TrainingMode::full_bag_batch1;
  Rng rng(config.seed);
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.params = init_params<float>(config.embed_dim, config.hidden_dim, config.n_outputs, rng);
  ckpt.optimizer = OptimizerState<float>::zeros_like(ckpt.params);
  const AdamConfig adam{0.9, 0.999, 1e-8, config.weight_decay};
  const FeatureIndexSet all_features = contiguous_features(0, config.embed_dim);

  TrainReport report;
  EarlyStopping stopper(config.patience);
  std::size_t skipped = 0;

  const std::size_t n_epochs = std::min(config.max_epochs, options.epoch_budget.value_or(config.max_epochs));
  for (std::size_t epoch = 0; epoch < n_epochs; ++epoch) {
    const double lr = lr_schedule(epoch, config);
    const BatchPlan plan = plan_epoch(config, manifest, train_idx, rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;

    for (const auto& positions : plan.batches) {
      std::vector<std::size_t> idx;
      idx.reserve(positions.size());
      for (std::size_t p : positions) idx.push_back(train_idx[p]);
      const BatchTargets targets = targets_for(manifest, idx);
      if (config.task == Task::survival && !has_event(targets)) {
        ++skipped;
        continue;
      }

      std::vector<FixedBag> batch;
      batch.reserve(idx.size());
      for (std::size_t i : idx) {
        batch.push_back(full_bag ? whole_bag(bags[i]) : sample_patches(bags[i], config.bag_size, rng));
      }
      const FeatureIndexSet features =
          full_bag ? all_features : sample_feature_indices(config.embed_dim, config.hidden_dim, rng);
      const ForwardOptions fwd{true, config.dropout, &rng};
      const auto cache = forward<float>(ckpt.params, batch, features, fwd);
      const auto lv = evaluate_loss<float>(cache.outputs, targets);
      const auto grads = backward_from_outputs<float>(ckpt.params, cache, batch, lv.grad);
      adamw_step(ckpt.params, grads, ckpt.optimizer, lr, adam);
      loss_sum += static_cast<double>(lv.value);
      ++steps;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    rec.steps = steps;
    rec.train_loss = steps > 0 ? loss_sum / static_cast<double>(steps) : std::numeric_limits<double>::quiet_NaN();
    rec.val_loss = ensemble_loss(ckpt.params, config, manifest, bags, val_idx);
    report.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    report.stopped_epoch = epoch;
    if (stopper.observe(epoch, rec.val_loss)) break;
  }

  report.best_epoch = stopper.best_epoch();
  if (report.best_epoch) report.best_val_loss = stopper.best_loss();
  if (skipped > 0) {
    report.notes.push_back("skipped " + std::to_string(skipped) + " event-free survival batches");
  }
  if (std::none_of(report.epochs.begin(), report.epochs.end(),
                   [](const EpochRecord& e) { return std::isfinite(e.val_loss); })) {
    report.notes.push_back("validation loss undefined in every epoch; early stopping inactive");
  }
  if (options.checkpoint_path) {
    save_checkpoint(ckpt, *options.checkpoint_path);
    report.checkpoint_path = options.checkpoint_path->string();
  }
  return {std::move(ckpt), std::move(report)};
}

}  // namespace nnmil
