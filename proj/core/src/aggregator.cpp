#include "nnmil/aggregator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "nnmil/errors.hpp"

namespace nnmil {

template <typename T>
AggregatorParams<T> AggregatorParams<T>::zeros(std::size_t embed_dim, std::size_t hidden_dim,
                                               std::size_t n_outputs) {
  const auto D = static_cast<Eigen::Index>(embed_dim);
  const auto H = static_cast<Eigen::Index>(hidden_dim);
  const auto O = static_cast<Eigen::Index>(n_outputs);
  return {MatrixX<T>::Zero(H, D), MatrixX<T>::Zero(H, D), VectorX<T>::Zero(H), MatrixX<T>::Zero(O, D),
          VectorX<T>::Zero(O)};
}

template <typename T>
void AggregatorParams<T>::validate() const {
  if (V.rows() < 1 || V.cols() < 1) throw ShapeError("params: V must be non-empty");
  if (U.rows() != V.rows() || U.cols() != V.cols()) throw ShapeError("params: U and V shapes differ");
  if (w.size() != V.rows()) throw ShapeError("params: w length differs from H");
  if (cls_weight.cols() != V.cols() || cls_weight.rows() < 1) {
    throw ShapeError("params: cls_weight must be n_outputs x D");
  }
  if (cls_bias.size() != cls_weight.rows()) throw ShapeError("params: cls_bias length differs from n_outputs");
  bool finite = true;
  visit([&](std::string_view, const std::vector<std::size_t>&, std::span<const T> data) {
    for (T v : data) finite = finite && std::isfinite(v);
  });
  if (!finite) throw ValidationError("params: non-finite entries");
}

template <typename T>
AggregatorParams<T> init_params(std::size_t embed_dim, std::size_t hidden_dim, std::size_t n_outputs,
                                Rng& rng) {
  if (embed_dim < 1 || hidden_dim < 1 || n_outputs < 1 || hidden_dim > embed_dim) {
    throw ValidationError("init_params: requires 1 <= H <= D and n_outputs >= 1");
  }
  auto p = AggregatorParams<T>::zeros(embed_dim, hidden_dim, n_outputs);
  auto fill = [&](auto& m, double bound) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  };
  // Each forward applies H x H blocks of V and U, so their fan-in is H.
  const double attn_bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  fill(p.V, attn_bound);
  fill(p.U, attn_bound);
  fill(p.w, attn_bound);
  fill(p.cls_weight, 1.0 / std::sqrt(static_cast<double>(embed_dim)));
  return p;
}

template <typename T>
VectorX<T> SlideCache<T>::attention() const {
  VectorX<T> full = VectorX<T>::Zero(static_cast<Eigen::Index>(total_rows));
  for (std::size_t r = 0; r < valid_rows.size(); ++r) full(valid_rows[r]) = alpha(static_cast<Eigen::Index>(r));
  return full;
}

namespace {

template <typename T>
MatrixX<T> gather_valid(const FixedBag& bag, const std::vector<Eigen::Index>& rows) {
  MatrixX<T> out(static_cast<Eigen::Index>(rows.size()), bag.embeddings.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = bag.embeddings.row(rows[r]).template cast<T>();
  }
  return out;
}

template <typename T>
void check_batch(const AggregatorParams<T>& params, std::span<const FixedBag> batch,
                 const FeatureIndexSet& features) {
  if (batch.empty()) throw ValidationError("forward: empty batch");
  features.validate(params.embed_dim());
  for (const auto& bag : batch) {
    bag.validate();
    if (bag.embed_dim() != params.embed_dim()) {
      throw ShapeError("forward: slide '" + bag.source_slide + "' has D=" + std::to_string(bag.embed_dim()) +
                       " but the model expects D=" + std::to_string(params.embed_dim()));
    }
  }
}

// Shared forward. When `masks` is non-null its dropout scales are reused.
template <typename T>
ForwardCache<T> run_forward(const AggregatorParams<T>& params, std::span<const FixedBag> batch,
                            const FeatureIndexSet& features, const ForwardOptions& options,
                            const ForwardCache<T>* masks) {
  check_batch(params, batch, features);
  const bool use_dropout = masks == nullptr && options.training && options.dropout > 0.0;
  if (use_dropout && options.rng == nullptr) throw ValidationError("forward: dropout requires an rng");

  const auto H = static_cast<Eigen::Index>(params.hidden_dim());
  const MatrixX<T> v_sub = params.V(Eigen::all, features.indices);
  const MatrixX<T> u_sub = params.U(Eigen::all, features.indices);

  ForwardCache<T> cache;
  cache.features = features;
  cache.slides.resize(batch.size());
  cache.outputs.resize(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(params.n_outputs()));

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const FixedBag& bag = batch[b];
    SlideCache<T>& sc = cache.slides[b];
    sc.total_rows = bag.rows();
    for (std::size_t r = 0; r < bag.rows(); ++r) {
      if (bag.valid_mask[r]) sc.valid_rows.push_back(static_cast<Eigen::Index>(r));
    }
    const auto nv = static_cast<Eigen::Index>(sc.valid_rows.size());
    const MatrixX<T> x = gather_valid<T>(bag, sc.valid_rows);
    sc.x_sub = x(Eigen::all, features.indices);

    const MatrixX<T> pre_v = sc.x_sub * v_sub.transpose();
    const MatrixX<T> pre_u = sc.x_sub * u_sub.transpose();
    sc.tanh_v = pre_v.array().tanh().matrix();
    sc.sig_u = (T(1) + (-pre_u.array()).exp()).inverse().matrix();
    sc.gated = sc.tanh_v.cwiseProduct(sc.sig_u);

    if (masks != nullptr) {
      const auto& src = masks->slides.at(b).dropout;
      if (src.size() > 0) {
        if (src.rows() != nv || src.cols() != H) throw ShapeError("forward: dropout mask shape mismatch");
        sc.dropout = src;
        sc.gated = sc.gated.cwiseProduct(sc.dropout);
      }
    } else if (use_dropout) {
      const T keep_scale = T(1) / static_cast<T>(1.0 - options.dropout);
      sc.dropout.resize(nv, H);
      for (Eigen::Index i = 0; i < sc.dropout.size(); ++i) {
        sc.dropout.data()[i] = options.rng->uniform() < options.dropout ? T(0) : keep_scale;
      }
      sc.gated = sc.gated.cwiseProduct(sc.dropout);
    }

    sc.scores = sc.gated * params.w;
    const T max_score = sc.scores.maxCoeff();
    sc.alpha = (sc.scores.array() - max_score).exp().matrix();
    sc.alpha /= sc.alpha.sum();
    sc.h = x.transpose() * sc.alpha;
    cache.outputs.row(static_cast<Eigen::Index>(b)) =
        (params.cls_weight * sc.h + params.cls_bias).transpose();
  }
  if (!cache.outputs.allFinite()) throw ValidationError("forward: non-finite outputs");
  return cache;
}

}  // namespace

template <typename T>
ForwardCache<T> forward(const AggregatorParams<T>& params, std::span<const FixedBag> batch,
                        const FeatureIndexSet& features, const ForwardOptions& options) {
  return run_forward<T>(params, batch, features, options, nullptr);
}

template <typename T>
ForwardCache<T> forward_with_masks(const AggregatorParams<T>& params, std::span<const FixedBag> batch,
                                   const ForwardCache<T>& masks) {
  if (masks.slides.size() != batch.size()) throw ShapeError("forward: mask batch size mismatch");
  return run_forward<T>(params, batch, masks.features, {}, &masks);
}

// ---------------------------------------------------------------------------
// Losses

std::size_t BatchTargets::size() const {
  switch (task) {
    case Task::classification: return classes.size();
    case Task::regression: return values.size();
    case Task::survival: return survival.size();
  }
  return 0;
}

namespace {

template <typename T>
LossValue<T> cross_entropy(const MatrixX<T>& outputs, const std::vector<int>& classes) {
  const Eigen::Index n = outputs.rows();
  LossValue<T> out;
  out.grad.resize(n, outputs.cols());
  T total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = classes[static_cast<std::size_t>(i)];
    if (y < 0 || y >= outputs.cols()) throw ValidationError("cross-entropy: class index out of range");
    const T m = outputs.row(i).maxCoeff();
    const auto shifted = (outputs.row(i).array() - m).eval();
    const T log_z = std::log(shifted.exp().sum());
    total += log_z - shifted(y);
    out.grad.row(i) = (shifted - log_z).exp().matrix();
    out.grad(i, y) -= T(1);
  }
  out.value = total / static_cast<T>(n);
  out.grad /= static_cast<T>(n);
  return out;
}

template <typename T>
LossValue<T> squared_error(const MatrixX<T>& outputs, const std::vector<double>& values) {
  const Eigen::Index n = outputs.rows();
  if (outputs.cols() != 1) throw ShapeError("squared error: expects a single output column");
  LossValue<T> out;
  out.grad.resize(n, 1);
  T total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const T diff = outputs(i, 0) - static_cast<T>(values[static_cast<std::size_t>(i)]);
    total += diff * diff;
    out.grad(i, 0) = T(2) * diff / static_cast<T>(n);
  }
  out.value = total / static_cast<T>(n);
  return out;
}

template <typename T>
LossValue<T> cox_partial_likelihood(const MatrixX<T>& outputs, const std::vector<SurvivalRecord>& records) {
  const std::size_t n = static_cast<std::size_t>(outputs.rows());
  if (outputs.cols() != 1) throw ShapeError("cox loss: expects a single output column");
  std::size_t n_events = 0;
  for (const auto& r : records) n_events += r.event == 1 ? 1 : 0;
  if (n_events == 0) throw ValidationError("cox loss: batch contains no events");

  const T m = outputs.col(0).maxCoeff();
  std::vector<T> e(n);
  for (std::size_t i = 0; i < n; ++i) e[i] = std::exp(outputs(static_cast<Eigen::Index>(i), 0) - m);

  std::vector<std::size_t> desc(n);
  std::iota(desc.begin(), desc.end(), std::size_t{0});
  std::stable_sort(desc.begin(), desc.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].time > records[b].time; });

  // Risk-set sums R(t_i) = sum_{t_j >= t_i} exp(eta_j - m), ties included.
  std::vector<T> risk_sum(n, T(0));
  T running = 0;
  for (std::size_t k = 0; k < n;) {
    std::size_t end = k;
    while (end < n && records[desc[end]].time == records[desc[k]].time) running += e[desc[end++]];
    for (std::size_t q = k; q < end; ++q) risk_sum[desc[q]] = running;
    k = end;
  }

  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (records[i].event != 1) continue;
    total += (outputs(static_cast<Eigen::Index>(i), 0) - m) - std::log(risk_sum[i]);
  }

  // d/d eta_k = -(1/E) [delta_k - e_k * sum_{events i : t_i <= t_k} 1 / R(t_i)]
  std::vector<T> inv_cum(n, T(0));
  T acc = 0;
  for (std::size_t k = n; k > 0;) {
    std::size_t begin = k;
    const double t = records[desc[k - 1]].time;
    while (begin > 0 && records[desc[begin - 1]].time == t) {
      --begin;
      if (records[desc[begin]].event == 1) acc += T(1) / risk_sum[desc[begin]];
    }
    for (std::size_t q = begin; q < k; ++q) inv_cum[desc[q]] = acc;
    k = begin;
  }

  const T scale = T(1) / static_cast<T>(n_events);
  LossValue<T> out;
  out.value = -total * scale;
  out.grad.resize(static_cast<Eigen::Index>(n), 1);
  for (std::size_t k = 0; k < n; ++k) {
    out.grad(static_cast<Eigen::Index>(k), 0) =
        -scale * (static_cast<T>(records[k].event) - e[k] * inv_cum[k]);
  }
  return out;
}

}  // namespace

template <typename T>
LossValue<T> evaluate_loss(const MatrixX<T>& outputs, const BatchTargets& targets) {
  if (static_cast<std::size_t>(outputs.rows()) != targets.size() || outputs.rows() == 0) {
    throw ShapeError("loss: output rows differ from target count");
  }
  if (!outputs.allFinite()) throw ValidationError("loss: non-finite outputs");
  switch (targets.task) {
    case Task::classification: return cross_entropy(outputs, targets.classes);
    case Task::regression: return squared_error(outputs, targets.values);
    case Task::survival: return cox_partial_likelihood(outputs, targets.survival);
  }
  throw ValidationError("loss: unknown task");
}

// ---------------------------------------------------------------------------
// Backward

template <typename T>
Gradients<T> backward_from_outputs(const AggregatorParams<T>& params, const ForwardCache<T>& cache,
                                   std::span<const FixedBag> batch, const MatrixX<T>& grad_outputs) {
  if (cache.slides.size() != batch.size() || grad_outputs.rows() != static_cast<Eigen::Index>(batch.size()) ||
      grad_outputs.cols() != static_cast<Eigen::Index>(params.n_outputs())) {
    throw ShapeError("backward: cache, batch and output gradient disagree");
  }
  Gradients<T> grads = params.zeros_like();
  const auto& idx = cache.features.indices;
  MatrixX<T> dv_sub = MatrixX<T>::Zero(params.V.rows(), static_cast<Eigen::Index>(idx.size()));
  MatrixX<T> du_sub = dv_sub;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const SlideCache<T>& sc = cache.slides[b];
    if (sc.h.size() != params.cls_weight.cols()) throw ShapeError("backward: cache/param shape mismatch");
    const VectorX<T> delta = grad_outputs.row(static_cast<Eigen::Index>(b)).transpose();

    grads.cls_weight.noalias() += delta * sc.h.transpose();
    grads.cls_bias += delta;
    const VectorX<T> dh = params.cls_weight.transpose() * delta;

    // h = X^T alpha  =>  d alpha_i = x_i . dh
    const MatrixX<T> x = gather_valid<T>(batch[b], sc.valid_rows);
    const VectorX<T> dalpha = x * dh;
    // softmax Jacobian
    const T mean_dalpha = sc.alpha.dot(dalpha);
    const VectorX<T> dscore = sc.alpha.cwiseProduct((dalpha.array() - mean_dalpha).matrix());

    grads.w.noalias() += sc.gated.transpose() * dscore;
    MatrixX<T> dgated = dscore * params.w.transpose();
    if (sc.dropout.size() > 0) dgated = dgated.cwiseProduct(sc.dropout);

    const MatrixX<T> dpre_v =
        (dgated.array() * sc.sig_u.array() * (T(1) - sc.tanh_v.array().square())).matrix();
    const MatrixX<T> dpre_u =
        (dgated.array() * sc.tanh_v.array() * sc.sig_u.array() * (T(1) - sc.sig_u.array())).matrix();
    dv_sub.noalias() += dpre_v.transpose() * sc.x_sub;
    du_sub.noalias() += dpre_u.transpose() * sc.x_sub;
  }
  grads.V(Eigen::all, idx) = dv_sub;
  grads.U(Eigen::all, idx) = du_sub;
  return grads;
}

// ---------------------------------------------------------------------------
// Gradient check

namespace {

BatchTargets random_targets(const GradCheckOptions& opt, Rng& rng) {
  BatchTargets t;
  t.task = opt.task;
  const std::size_t n = opt.batch_size;
  switch (opt.task) {
    case Task::classification:
      for (std::size_t i = 0; i < n; ++i) t.classes.push_back(static_cast<int>(rng.uniform_index(opt.n_outputs)));
      break;
    case Task::regression:
      for (std::size_t i = 0; i < n; ++i) t.values.push_back(rng.normal());
      break;
    case Task::survival: {
      for (std::size_t i = 0; i < n; ++i) t.survival.push_back({rng.uniform(0.1, 5.0), 0});
      if (opt.events == 0) {
        for (auto& r : t.survival) r.event = rng.bernoulli(0.5) ? 1 : 0;
        t.survival[rng.uniform_index(n)].event = 1;
      } else {
        const auto chosen = rng.sample_without_replacement(n, std::min(opt.events, n));
        for (std::size_t i : chosen) t.survival[i].event = 1;
      }
      break;
    }
  }
  return t;
}

}  // namespace

GradCheckResult grad_check(const GradCheckOptions& opt, Rng& rng) {
  if (opt.embed_dim < 1 || opt.hidden_dim < 1 || opt.hidden_dim > opt.embed_dim) {
    throw ValidationError("grad_check: requires 1 <= H <= D");
  }
  if (opt.task != Task::classification && opt.n_outputs != 1) {
    throw ValidationError("grad_check: regression and survival use a single output");
  }
  GradCheckResult result;
  for (std::size_t trial = 0; trial < opt.n_trials; ++trial) {
    auto params = init_params<double>(opt.embed_dim, opt.hidden_dim, opt.n_outputs, rng);
    // Nonzero bias and a larger score vector keep attention away from uniform.
    for (Eigen::Index i = 0; i < params.cls_bias.size(); ++i) params.cls_bias(i) = rng.uniform(-0.5, 0.5);
    params.w *= 2.0;

    std::vector<FixedBag> batch;
    for (std::size_t b = 0; b < opt.batch_size; ++b) {
      const std::size_t n_real = rng.uniform_int(1, opt.bag_rows);
      SlideBag bag;
      bag.slide_id = "gc" + std::to_string(b);
      bag.embeddings.resize(static_cast<Eigen::Index>(n_real), static_cast<Eigen::Index>(opt.embed_dim));
      for (Eigen::Index i = 0; i < bag.embeddings.size(); ++i) {
        bag.embeddings.data()[i] = static_cast<float>(rng.normal());
      }
      batch.push_back(sample_patches(bag, opt.bag_rows, rng));
    }
    const auto features = sample_feature_indices(opt.embed_dim, opt.hidden_dim, rng);
    const BatchTargets targets = random_targets(opt, rng);

    ForwardOptions fo{true, opt.dropout, &rng};
    const auto cache = forward<double>(params, batch, features, fo);
    const auto analytic = backward<double>(params, cache, batch, targets);

    auto loss_at = [&](const AggregatorParams<double>& p) {
      return loss<double>(forward_with_masks<double>(p, batch, cache).outputs, targets);
    };

    std::vector<std::span<const double>> analytic_tensors;
    analytic.visit([&](std::string_view, const std::vector<std::size_t>&, std::span<const double> data) {
      analytic_tensors.push_back(data);
    });
    std::size_t tensor = 0;
    params.visit([&](std::string_view, const std::vector<std::size_t>&, std::span<double> data) {
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + opt.eps;
        const double up = loss_at(params);
        data[i] = saved - opt.eps;
        const double down = loss_at(params);
        data[i] = saved;
        const double numeric = (up - down) / (2.0 * opt.eps);
        const double a = analytic_tensors[tensor][i];
        const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
        const double rel = std::abs(a - numeric) / denom;
        result.max_relative_error = std::isnan(rel) ? std::numeric_limits<double>::infinity()
                                                    : std::max(result.max_relative_error, rel);
        ++result.entries_checked;
      }
      ++tensor;
    });
  }
  return result;
}

double grad_check(std::size_t embed_dim, std::size_t hidden_dim, std::size_t n_outputs, Task task,
                  std::size_t n_trials, double eps, Rng& rng) {
  GradCheckOptions opt;
  opt.embed_dim = embed_dim;
  opt.hidden_dim = hidden_dim;
  opt.n_outputs = n_outputs;
  opt.task = task;
  opt.n_trials = n_trials;
  opt.eps = eps;
  return grad_check(opt, rng).max_relative_error;
}

// ---------------------------------------------------------------------------

#define NNMIL_INSTANTIATE(T)                                                                          \
  template struct AggregatorParams<T>;                                                               \
  template struct SlideCache<T>;                                                                     \
  template AggregatorParams<T> init_params<T>(std::size_t, std::size_t, std::size_t, Rng&);          \
  template ForwardCache<T> forward<T>(const AggregatorParams<T>&, std::span<const FixedBag>,         \
                                      const FeatureIndexSet&, const ForwardOptions&);                \
  template ForwardCache<T> forward_with_masks<T>(const AggregatorParams<T>&,                         \
                                                 std::span<const FixedBag>, const ForwardCache<T>&); \
  template LossValue<T> evaluate_loss<T>(const MatrixX<T>&, const BatchTargets&);                    \
  template Gradients<T> backward_from_outputs<T>(const AggregatorParams<T>&, const ForwardCache<T>&, \
                                                 std::span<const FixedBag>, const MatrixX<T>&);

NNMIL_INSTANTIATE(float)
NNMIL_INSTANTIATE(double)

#undef NNMIL_INSTANTIATE

}  // namespace nnmil
