#include "nnmil/inference.hpp"

#include <algorithm>
#include <cmath>

#include "nnmil/errors.hpp"
#include "nnmil/stats.hpp"

namespace nnmil {

ChunkWindows chunk_windows(std::size_t embed_dim, std::size_t hidden_dim, std::size_t stride) {
  if (hidden_dim > embed_dim) throw ValidationError("chunk_windows: H exceeds D");
  if (hidden_dim < 1 || stride < 1) throw ValidationError("chunk_windows: requires H >= 1 and S >= 1");
  ChunkWindows out;
  out.embed_dim = embed_dim;
  const std::size_t last_start = embed_dim - hidden_dim;
  for (std::size_t start = 0; start <= last_start; start += stride) {
    out.windows.emplace_back(start, start + hidden_dim);
  }
  if (out.windows.back().first != last_start) out.windows.emplace_back(last_start, embed_dim);
  return out;
}

ChunkWindows windows_for(const RunConfig& config) {
  if (config.training_mode == TrainingMode::full_bag_batch1) {
    return chunk_windows(config.embed_dim, config.embed_dim, 1);
  }
  return chunk_windows(config.embed_dim, config.hidden_dim, config.stride);
}

namespace {

template <typename T>
void check_dims(const AggregatorParams<T>& params, const SlideBag& bag, const ChunkWindows& windows) {
  if (bag.embed_dim() != params.embed_dim()) {
    throw ShapeError("slide '" + bag.slide_id + "' has D=" + std::to_string(bag.embed_dim()) +
                     " but the model expects D=" + std::to_string(params.embed_dim()));
  }
  if (windows.embed_dim != params.embed_dim() || windows.windows.empty()) {
    throw ShapeError("chunk windows do not match the model dimension");
  }
}

}  // namespace

template <typename T>
Eigen::MatrixXd chunk_outputs(const AggregatorParams<T>& params, const SlideBag& bag,
                              const ChunkWindows& windows) {
  check_dims(params, bag, windows);
  const FixedBag whole = whole_bag(bag);
  const std::span<const FixedBag> batch(&whole, 1);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(windows.count()), static_cast<Eigen::Index>(params.n_outputs()));
  for (std::size_t k = 0; k < windows.count(); ++k) {
    const auto [start, end] = windows.windows[k];
    const auto cache = forward<T>(params, batch, contiguous_features(start, end - start));
    out.row(static_cast<Eigen::Index>(k)) = cache.outputs.row(0).template cast<double>();
  }
  return out;
}

template <typename T>
Eigen::VectorXd chunk_attention(const AggregatorParams<T>& params, const SlideBag& bag,
                                const ChunkWindows& windows) {
  check_dims(params, bag, windows);
  const FixedBag whole = whole_bag(bag);
  const std::span<const FixedBag> batch(&whole, 1);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bag.n_patches()));
  for (const auto& [start, end] : windows.windows) {
    acc += forward<T>(params, batch, contiguous_features(start, end - start)).slides[0].attention().template cast<double>();
  }
  return acc / static_cast<double>(windows.count());
}

double log_mean_exp(std::span<const double> values) {
  if (values.empty()) throw ValidationError("log_mean_exp of an empty sequence");
  const double m = *std::max_element(values.begin(), values.end());
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - m);
  return m + std::log(acc / static_cast<double>(values.size()));
}

Eigen::VectorXd ensemble_output(const Eigen::MatrixXd& outputs, Task task) {
  if (outputs.rows() < 1) throw ValidationError("ensemble_output: no chunks");
  Eigen::VectorXd out(outputs.cols());
  for (Eigen::Index c = 0; c < outputs.cols(); ++c) {
    std::vector<double> col(outputs.col(c).data(), outputs.col(c).data() + outputs.rows());
    out(c) = task == Task::survival ? log_mean_exp(col) : stats::mean(col);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification

double entropy(const Eigen::VectorXd& probs) {
  double h = 0.0;
  for (Eigen::Index c = 0; c < probs.size(); ++c) {
    const double p = probs(c);
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

namespace {

Eigen::VectorXd column_means(const Eigen::MatrixXd& m) {
  Eigen::VectorXd out(m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    std::vector<double> col(m.rows());
    for (Eigen::Index k = 0; k < m.rows(); ++k) col[static_cast<std::size_t>(k)] = m(k, c);
    out(c) = stats::mean(col);
  }
  return out;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const Eigen::ArrayXd e = (logits.array() - logits.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

}  // namespace

ClsPrediction summarize_probabilities(const Eigen::MatrixXd& per_chunk_probs,
                                      const Eigen::VectorXd& mean_logits) {
  if (per_chunk_probs.rows() < 1 || per_chunk_probs.cols() < 1) {
    throw ValidationError("classification summary: no chunks");
  }
  ClsPrediction p;
  p.per_chunk_probs = per_chunk_probs;
  p.mean_logits = mean_logits;
  p.mean_probs = column_means(per_chunk_probs);
  p.h_total = entropy(p.mean_probs);
  std::vector<double> chunk_entropy(static_cast<std::size_t>(per_chunk_probs.rows()));
  for (Eigen::Index k = 0; k < per_chunk_probs.rows(); ++k) {
    chunk_entropy[static_cast<std::size_t>(k)] = entropy(per_chunk_probs.row(k).transpose());
  }
  p.h_aleatoric = stats::mean(chunk_entropy);
  double mi = p.h_total - p.h_aleatoric;
  if (mi < 0.0) {
    if (mi < -1e-9) throw ValidationError("classification summary: negative mutual information");
    // Rounding only: move the residual into the aleatoric term so the
    // decomposition stays exact.
    p.h_aleatoric = p.h_total;
    mi = 0.0;
  }
  p.mutual_information = mi;
  Eigen::Index best = 0;
  mean_logits.maxCoeff(&best);
  p.predicted_class = static_cast<int>(best);
  return p;
}

ClsPrediction summarize_classification(const Eigen::MatrixXd& chunk_logits) {
  if (chunk_logits.rows() < 1) throw ValidationError("classification summary: no chunks");
  Eigen::MatrixXd probs(chunk_logits.rows(), chunk_logits.cols());
  for (Eigen::Index k = 0; k < chunk_logits.rows(); ++k) {
    probs.row(k) = softmax(chunk_logits.row(k).transpose()).transpose();
  }
  return summarize_probabilities(probs, column_means(chunk_logits));
}

template <typename T>
ClsPrediction predict_classification(const AggregatorParams<T>& params, const SlideBag& bag,
                                     const ChunkWindows& windows) {
  return summarize_classification(chunk_outputs(params, bag, windows));
}

// ---------------------------------------------------------------------------
// Regression

RegPrediction summarize_regression(std::span<const double> chunk_values) {
  RegPrediction r;
  r.per_chunk.assign(chunk_values.begin(), chunk_values.end());
  r.mean = stats::mean(chunk_values);
  r.stddev = chunk_values.size() == 1 ? 0.0 : stats::population_stddev(chunk_values);
  return r;
}

template <typename T>
RegPrediction predict_regression(const AggregatorParams<T>& params, const SlideBag& bag,
                                 const ChunkWindows& windows) {
  if (params.n_outputs() != 1) throw ShapeError("predict_regression: model must have one output");
  const Eigen::MatrixXd out = chunk_outputs(params, bag, windows);
  return summarize_regression(std::span<const double>(out.data(), static_cast<std::size_t>(out.rows())));
}

// ---------------------------------------------------------------------------
// Survival

double BaselineSurvival::cumulative_hazard_at(double t) const {
  const auto it = std::upper_bound(event_times.begin(), event_times.end(), t);
  if (it == event_times.begin()) return 0.0;
  return cumulative_hazard[static_cast<std::size_t>(it - event_times.begin()) - 1];
}

BaselineSurvival estimate_baseline_survival(std::span<const double> risks,
                                            std::span<const SurvivalRecord> records) {
  if (risks.size() != records.size()) throw ValidationError("baseline: risks and records differ in length");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].time < records[b].time; });
  const double m = risks.empty() ? 0.0 : *std::max_element(risks.begin(), risks.end());

  // Risk-set sums from the latest time backwards, in units of exp(m).
  std::vector<double> at_risk(records.size());
  double running = 0.0;
  for (std::size_t k = order.size(); k > 0; --k) {
    running += std::exp(risks[order[k - 1]] - m);
    at_risk[k - 1] = running;
  }

  BaselineSurvival out;
  double cumulative = 0.0;
  for (std::size_t k = 0; k < order.size();) {
    const double t = records[order[k]].time;
    std::size_t end = k;
    double deaths = 0.0;
    while (end < order.size() && records[order[end]].time == t) deaths += records[order[end++]].event;
    if (deaths > 0.0) {
      cumulative += deaths / at_risk[k] * std::exp(-m);
      out.event_times.push_back(t);
      out.cumulative_hazard.push_back(cumulative);
    }
    k = end;
  }
  if (out.event_times.empty()) throw ValidationError("baseline: no events");
  return out;
}

double median_event_time(std::span<const SurvivalRecord> records) {
  std::vector<double> times;
  for (const auto& r : records) {
    if (r.event == 1) times.push_back(r.time);
  }
  if (times.empty()) throw ValidationError("median_event_time: no events");
  return stats::median(times);
}

SurvPrediction summarize_survival(std::span<const double> chunk_risks, const BaselineSurvival& baseline,
                                  std::span<const double> eval_times) {
  if (chunk_risks.empty()) throw ValidationError("survival summary: no chunks");
  SurvPrediction p;
  p.per_chunk_risk.assign(chunk_risks.begin(), chunk_risks.end());
  p.risk = log_mean_exp(chunk_risks);
  p.mean_risk = stats::mean(chunk_risks);
  p.var_risk = chunk_risks.size() == 1 ? 0.0 : stats::population_variance(chunk_risks);
  p.eval_times.assign(eval_times.begin(), eval_times.end());
  for (double t : eval_times) {
    const double s0 = baseline.survival_at(t);
    std::vector<double> s(chunk_risks.size());
    for (std::size_t k = 0; k < chunk_risks.size(); ++k) s[k] = std::pow(s0, std::exp(chunk_risks[k]));
    p.mean_survival.push_back(stats::mean(s));
    p.unc_survival.push_back(s.size() == 1 ? 0.0 : stats::population_stddev(s));
    p.per_chunk_survival.push_back(std::move(s));
  }
  return p;
}

template <typename T>
SurvPrediction predict_survival(const AggregatorParams<T>& params, const SlideBag& bag,
                                const ChunkWindows& windows, const BaselineSurvival& baseline,
                                std::span<const double> eval_times) {
  if (params.n_outputs() != 1) throw ShapeError("predict_survival: model must have one output");
  const Eigen::MatrixXd out = chunk_outputs(params, bag, windows);
  return summarize_survival(std::span<const double>(out.data(), static_cast<std::size_t>(out.rows())),
                            baseline, eval_times);
}

// ---------------------------------------------------------------------------
// Patient level

double adjust_patient_uncertainty(double uncertainty, std::size_t n_wsi) {
  if (n_wsi < 1) throw ValidationError("adjust_patient_uncertainty: n_wsi must be >= 1");
  return uncertainty / std::sqrt(static_cast<double>(n_wsi));
}

PatientClsPrediction aggregate_patient(std::span<const ClsPrediction> slides) {
  if (slides.empty()) throw ValidationError("aggregate_patient: no slides");
  if (slides.size() == 1) {
    return {slides.front(), 1, slides.front().h_aleatoric};
  }
  Eigen::Index rows = 0;
  const Eigen::Index C = slides.front().per_chunk_probs.cols();
  for (const auto& s : slides) {
    if (s.per_chunk_probs.cols() != C) throw ShapeError("aggregate_patient: class count differs across slides");
    rows += s.per_chunk_probs.rows();
  }
  Eigen::MatrixXd pooled(rows, C);
  Eigen::MatrixXd logits(static_cast<Eigen::Index>(slides.size()), C);
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < slides.size(); ++i) {
    pooled.middleRows(r, slides[i].per_chunk_probs.rows()) = slides[i].per_chunk_probs;
    r += slides[i].per_chunk_probs.rows();
    logits.row(static_cast<Eigen::Index>(i)) = slides[i].mean_logits.transpose();
  }
  PatientClsPrediction out;
  out.combined = summarize_probabilities(pooled, column_means(logits));
  out.n_wsi = slides.size();
  out.uncertainty = adjust_patient_uncertainty(out.combined.h_aleatoric, out.n_wsi);
  return out;
}

PatientSurvPrediction aggregate_patient(std::span<const SurvPrediction> slides) {
  if (slides.empty()) throw ValidationError("aggregate_patient: no slides");
  const std::size_t n_times = slides.front().eval_times.size();
  std::vector<double> risk, var;
  for (const auto& s : slides) {
    if (s.eval_times != slides.front().eval_times) {
      throw ValidationError("aggregate_patient: slides evaluated at different times");
    }
    risk.push_back(s.risk);
    var.push_back(s.var_risk);
  }
  PatientSurvPrediction out;
  out.n_wsi = slides.size();
  out.risk = stats::mean(risk);
  out.var_risk = stats::mean(var);
  out.eval_times = slides.front().eval_times;
  for (std::size_t t = 0; t < n_times; ++t) {
    std::vector<double> s, u;
    for (const auto& sl : slides) {
      s.push_back(sl.mean_survival[t]);
      u.push_back(sl.unc_survival[t]);
    }
    out.mean_survival.push_back(stats::mean(s));
    out.unc_survival.push_back(adjust_patient_uncertainty(stats::mean(u), out.n_wsi));
  }
  return out;
}

#define NNMIL_INSTANTIATE(T)                                                                              \
  template Eigen::MatrixXd chunk_outputs<T>(const AggregatorParams<T>&, const SlideBag&, const ChunkWindows&); \
  template Eigen::VectorXd chunk_attention<T>(const AggregatorParams<T>&, const SlideBag&,                  \
                                              const ChunkWindows&);                                         \
  template ClsPrediction predict_classification<T>(const AggregatorParams<T>&, const SlideBag&,             \
                                                   const ChunkWindows&);                                    \
  template RegPrediction predict_regression<T>(const AggregatorParams<T>&, const SlideBag&,                 \
                                               const ChunkWindows&);                                        \
  template SurvPrediction predict_survival<T>(const AggregatorParams<T>&, const SlideBag&,                  \
                                              const ChunkWindows&, const BaselineSurvival&,                 \
                                              std::span<const double>);

NNMIL_INSTANTIATE(float)
NNMIL_INSTANTIATE(double)

#undef NNMIL_INSTANTIATE

}  // namespace nnmil
