#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "nnmil/data_model.hpp"
#include "nnmil/errors.hpp"
#include "nnmil/rng.hpp"

namespace nnmil {

namespace fs = std::filesystem;

void SyntheticSpec::validate() const {
  if (n_bags < 1) throw ValidationError("synthetic: n_bags must be >= 1");
  if (min_patches < 1 || min_patches > max_patches) {
    throw ValidationError("synthetic: patches_per_bag range must be nonempty and >= 1");
  }
  if (embed_dim < 1) throw ValidationError("synthetic: embed_dim must be >= 1");
  if (!(signal_fraction > 0.0 && signal_fraction < 1.0)) {
    throw ValidationError("synthetic: signal_fraction must lie in (0, 1)");
  }
  if (!(signal_strength >= 0.0) || !std::isfinite(signal_strength)) {
    throw ValidationError("synthetic: signal_strength must be finite and >= 0");
  }
  if (task == Task::classification && !(positive_rate > 0.0 && positive_rate < 1.0)) {
    throw ValidationError("synthetic: positive_rate must lie in (0, 1)");
  }
  if (task == Task::survival && !(censoring_rate >= 0.0 && censoring_rate < 1.0)) {
    throw ValidationError("synthetic: censoring_rate must lie in [0, 1)");
  }
  if (noise_std && !(*noise_std > 0.0 && std::isfinite(*noise_std))) {
    throw ValidationError("synthetic: noise_std must be positive and finite");
  }
  if (!coefficients.empty() && coefficients.size() != embed_dim) {
    throw ValidationError("synthetic: coefficient vector length must equal embed_dim");
  }
  if (val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction >= 1.0) {
    throw ValidationError("synthetic: val_fraction + test_fraction must lie in [0, 1)");
  }
}

namespace {

// Rate c of an independent exponential censoring time such that the
// expected censored fraction mean_b c / (c + rate_b) equals `target`.
double calibrate_censoring_rate(const std::vector<double>& event_rates, double target) {
  auto censored_fraction = [&](double c) {
    double acc = 0.0;
    for (double r : event_rates) acc += c / (c + r);
    return acc / static_cast<double>(event_rates.size());
  };
  double lo = -60.0, hi = 60.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (censored_fraction(std::exp(mid)) < target) lo = mid; else hi = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

void assign_splits(std::vector<std::size_t> members, const SyntheticSpec& spec, Rng& rng,
                   std::vector<Split>& splits) {
  rng.shuffle(members);
  const auto n = static_cast<double>(members.size());
  const auto n_test = static_cast<std::size_t>(std::lround(spec.test_fraction * n));
  const auto n_val = static_cast<std::size_t>(std::lround(spec.val_fraction * n));
  for (std::size_t k = 0; k < members.size(); ++k) {
    Split s = Split::train;
    if (k < n_test) s = Split::test;
    else if (k < n_test + n_val) s = Split::val;
    splits[members[k]] = s;
  }
}

}  // namespace

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t D = spec.embed_dim;

  SyntheticDataset out;
  out.direction.resize(D);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& v : out.direction) {
      v = rng.normal();
      norm += v * v;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& v : out.direction) v /= norm;

  std::vector<double> beta = spec.coefficients;
  if (beta.empty()) {
    beta.resize(D);
    for (std::size_t d = 0; d < D; ++d) beta[d] = spec.coefficient_scale * out.direction[d];
  }

  // Classification: exactly round(n_bags * positive_rate) positives.
  std::vector<int> positive(spec.n_bags, 0);
  if (spec.task == Task::classification) {
    const auto n_pos = static_cast<std::size_t>(
        std::lround(static_cast<double>(spec.n_bags) * spec.positive_rate));
    std::fill_n(positive.begin(), std::min(n_pos, spec.n_bags), 1);
    rng.shuffle(positive);
  }

  out.bags.resize(spec.n_bags);
  out.signal_indices.resize(spec.n_bags);
  std::vector<double> bag_scale(spec.n_bags, 0.0);
  const double sigma = spec.noise_std.value_or(1.0 / std::sqrt(static_cast<double>(D)));
  for (std::size_t b = 0; b < spec.n_bags; ++b) {
    const std::size_t N = rng.uniform_int(spec.min_patches, spec.max_patches);
    SlideBag& bag = out.bags[b];
    char id[32];
    std::snprintf(id, sizeof(id), "S%05zu", b);
    bag.slide_id = id;
    std::snprintf(id, sizeof(id), "P%05zu", b);
    bag.patient_id = id;
    bag.embeddings.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
    for (Eigen::Index i = 0; i < bag.embeddings.size(); ++i) {
      bag.embeddings.data()[i] = static_cast<float>(sigma * rng.normal());
    }

    double shift = 0.0;
    bool planted = false;
    if (spec.task == Task::classification) {
      planted = positive[b] == 1;
      shift = spec.signal_strength;
    } else {
      planted = true;
      bag_scale[b] = rng.normal();
      shift = spec.signal_strength * bag_scale[b];
    }
    if (planted) {
      const auto k = static_cast<std::size_t>(std::lround(spec.signal_fraction * static_cast<double>(N)));
      out.signal_indices[b] = rng.sample_without_replacement(N, k);
      for (std::size_t i : out.signal_indices[b]) {
        for (std::size_t d = 0; d < D; ++d) {
          float& x = bag.embeddings(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d));
          x = static_cast<float>(static_cast<double>(x) + shift * out.direction[d]);
        }
      }
    }
  }

  // Regression / survival targets from the stored (float) embeddings.
  if (spec.task != Task::classification) {
    out.latent.resize(spec.n_bags);
    for (std::size_t b = 0; b < spec.n_bags; ++b) {
      const auto mean = out.bags[b].embeddings.cast<double>().colwise().mean();
      double acc = 0.0;
      for (std::size_t d = 0; d < D; ++d) acc += beta[d] * mean(static_cast<Eigen::Index>(d));
      out.latent[b] = acc;
    }
  }

  std::vector<Label> labels(spec.n_bags);
  switch (spec.task) {
    case Task::classification:
      for (std::size_t b = 0; b < spec.n_bags; ++b) labels[b] = positive[b];
      break;
    case Task::regression:
      for (std::size_t b = 0; b < spec.n_bags; ++b) labels[b] = out.latent[b];
      break;
    case Task::survival: {
      std::vector<double> rates(spec.n_bags);
      for (std::size_t b = 0; b < spec.n_bags; ++b) rates[b] = std::exp(out.latent[b]);
      const double censor_rate =
          spec.censoring_rate > 0.0 ? calibrate_censoring_rate(rates, spec.censoring_rate) : 0.0;
      for (std::size_t b = 0; b < spec.n_bags; ++b) {
        const double t_event = rng.exponential(rates[b]);
        double t_censor = std::numeric_limits<double>::infinity();
        if (censor_rate > 0.0) t_censor = rng.exponential(censor_rate);
        if (t_event <= t_censor) labels[b] = SurvivalRecord{t_event, 1};
        else labels[b] = SurvivalRecord{t_censor, 0};
      }
      break;
    }
  }

  std::vector<Split> splits(spec.n_bags, Split::train);
  if (spec.task == Task::classification) {
    for (int cls : {0, 1}) {
      std::vector<std::size_t> members;
      for (std::size_t b = 0; b < spec.n_bags; ++b) {
        if (positive[b] == cls) members.push_back(b);
      }
      assign_splits(std::move(members), spec, rng, splits);
    }
  } else {
    std::vector<std::size_t> all(spec.n_bags);
    for (std::size_t b = 0; b < spec.n_bags; ++b) all[b] = b;
    assign_splits(std::move(all), spec, rng, splits);
  }

  DatasetManifest& m = out.manifest;
  m.task = spec.task;
  m.n_classes = spec.task == Task::classification ? 2 : 0;
  for (std::size_t b = 0; b < spec.n_bags; ++b) {
    m.entries.push_back({out.bags[b].slide_id, out.bags[b].patient_id,
                         fs::path("bags") / (out.bags[b].slide_id + ".nnmb"), splits[b], labels[b]});
  }
  m.validate();
  return out;
}

void write_synthetic_dataset(const SyntheticDataset& data, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "bags", ec);
  if (ec) throw IoError("cannot create '" + (dir / "bags").string() + "': " + ec.message());
  for (std::size_t b = 0; b < data.bags.size(); ++b) {
    write_embedding_file(data.bags[b], dir / data.manifest.entries[b].embedding_path);
  }
  save_manifest(data.manifest, dir / "manifest.json");
}

}  // namespace nnmil
