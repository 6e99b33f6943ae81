#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "eeg4d/model.hpp"
#include "eeg4d/repr4d.hpp"

namespace eeg4d {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  AdamConfig adam;
  int batch_size = 12;
  int max_epochs = 150;
  int folds = 5;
  std::uint64_t seed = 1;
  int jobs = 1;
  int eval_batch = 24;
  ModelConfig model;

  void validate() const {
    if (folds < 2) throw std::invalid_argument("folds must be >= 2");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (max_epochs < 0) throw std::invalid_argument("max_epochs must be >= 0");
    if (!(adam.lr > 0)) throw std::invalid_argument("learning rate must be positive");
  }
};

// splitmix64 finalizer; used to derive independent per-fold seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t s = mix_seed(master);
  for (auto p : parts) s = mix_seed(s ^ mix_seed(p + 0x632BE59BD9B4E019ull));
  return s;
}

// -ln(max(p[label], 1e-12)), averaged over the batch.
template <class T>
diff::Var<T> cross_entropy(const diff::Var<T>& probs, const std::vector<int>& labels) {
  return diff::nll_loss(probs, labels);
}

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t step = 0;
};

// Bias-corrected Adam over every tensor in the store.
template <class T>
void adam_step(diff::ParamStore<T>& params, AdamState<T>& state, const AdamConfig& cfg) {
  auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& e : entries) {
      state.m.emplace_back(e.var.size(), T(0));
      state.v.emplace_back(e.var.size(), T(0));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(cfg.lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& val = entries[p].var.value();
    auto grad = entries[p].var.grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (grad.size() != val.size()) continue;
    for (std::size_t i = 0; i < val.size(); ++i) {
      const T g = grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      val[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps);
    }
  }
}

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Stratified, seeded k-fold partition. Each class is shuffled, the classes are
// concatenated and dealt round-robin, so fold sizes differ by at most one and
// every fold's per-class count is within one of proportional.
inline std::vector<FoldSplit> kfold_split(const std::vector<int>& labels, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_split: k must be >= 2");
  if (labels.size() < static_cast<std::size_t>(k)) throw std::invalid_argument("kfold_split: fewer samples than folds");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order;
  for (auto& [label, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    order.insert(order.end(), idx.begin(), idx.end());
  }
  std::vector<FoldSplit> folds(k);
  for (std::size_t i = 0; i < order.size(); ++i) folds[i % k].test.push_back(order[i]);
  for (auto& f : folds) {
    std::sort(f.test.begin(), f.test.end());
    std::vector<bool> in_test(labels.size(), false);
    for (auto i : f.test) in_test[i] = true;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (!in_test[i]) f.train.push_back(i);
  }
  return folds;
}

inline std::vector<FoldSplit> kfold_split(std::size_t n_samples, int k, std::uint64_t seed) {
  return kfold_split(std::vector<int>(n_samples, 0), k, seed);
}

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
};

struct FoldResult {
  int fold = 0;
  double test_acc = 0.0;        // final epoch
  double best_test_acc = 0.0;
  int best_epoch = 0;
  double train_acc = 0.0;       // final model re-evaluated on the training split
  std::vector<EpochRecord> curve;
};

struct ExperimentResult {
  int subject = 0;
  int experiment = 0;
  std::vector<FoldResult> folds;
  double acc() const {
    double s = 0.0;
    for (const auto& f : folds) s += f.test_acc;
    return folds.empty() ? 0.0 : s / static_cast<double>(folds.size());
  }
  double best_acc() const {
    double s = 0.0;
    for (const auto& f : folds) s += f.best_test_acc;
    return folds.empty() ? 0.0 : s / static_cast<double>(folds.size());
  }
  double train_acc() const {
    double s = 0.0;
    for (const auto& f : folds) s += f.train_acc;
    return folds.empty() ? 0.0 : s / static_cast<double>(folds.size());
  }
};

struct SubjectSummary {
  int subject = 0;
  double acc = 0.0;
  double std = 0.0;
  std::vector<const ExperimentResult*> experiments;
};

// fold -> experiment (mean of folds) -> subject (mean and population std over
// experiments) -> overall (mean of subject ACC, mean of subject STD).
struct RunMetrics {
  std::vector<ExperimentResult> experiments;

  std::vector<SubjectSummary> subjects() const {
    std::map<int, SubjectSummary> by;
    for (const auto& e : experiments) {
      auto& s = by[e.subject];
      s.subject = e.subject;
      s.experiments.push_back(&e);
    }
    std::vector<SubjectSummary> out;
    for (auto& [id, s] : by) {
      double mean = 0.0;
      for (auto* e : s.experiments) mean += e->acc();
      mean /= static_cast<double>(s.experiments.size());
      double var = 0.0;
      for (auto* e : s.experiments) var += (e->acc() - mean) * (e->acc() - mean);
      s.acc = mean;
      s.std = std::sqrt(var / static_cast<double>(s.experiments.size()));
      out.push_back(s);
    }
    return out;
  }

  double overall_acc() const {
    auto subj = subjects();
    double s = 0.0;
    for (const auto& x : subj) s += x.acc;
    return subj.empty() ? 0.0 : s / static_cast<double>(subj.size());
  }
  double overall_std() const {
    auto subj = subjects();
    double s = 0.0;
    for (const auto& x : subj) s += x.std;
    return subj.empty() ? 0.0 : s / static_cast<double>(subj.size());
  }
  double mean_fold_test_acc() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& e : experiments)
      for (const auto& f : e.folds) s += f.test_acc, ++n;
    return n ? s / static_cast<double>(n) : 0.0;
  }
  double mean_fold_train_acc() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& e : experiments)
      for (const auto& f : e.folds) s += f.train_acc, ++n;
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

inline nlohmann::json summary_json(const RunMetrics& m) {
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& s : m.subjects()) {
    nlohmann::json exps = nlohmann::json::array();
    for (const auto* e : s.experiments) {
      nlohmann::json folds = nlohmann::json::array();
      for (const auto& f : e->folds)
        folds.push_back({{"fold", f.fold},
                         {"accuracy", f.test_acc},
                         {"best_accuracy", f.best_test_acc},
                         {"best_epoch", f.best_epoch},
                         {"train_accuracy", f.train_acc}});
      exps.push_back({{"experiment", e->experiment}, {"acc", e->acc()}, {"best_epoch_acc", e->best_acc()}, {"folds", folds}});
    }
    subjects.push_back({{"subject", s.subject}, {"acc", s.acc}, {"std", s.std}, {"experiments", exps}});
  }
  return {{"overall", {{"acc", m.overall_acc()}, {"std", m.overall_std()}}}, {"subjects", subjects}};
}

inline std::string metrics_csv(const RunMetrics& m) {
  std::string out = "subject,experiment,fold,accuracy\n";
  char buf[64];
  for (const auto& e : m.experiments)
    for (const auto& f : e.folds) {
      std::snprintf(buf, sizeof buf, "%.17g", f.test_acc);
      out += std::to_string(e.subject) + "," + std::to_string(e.experiment) + "," + std::to_string(f.fold) + "," + buf + "\n";
    }
  return out;
}

inline std::string curve_csv(const FoldResult& f) {
  std::string out = "epoch,loss,train_acc,test_acc\n";
  char buf[160];
  for (const auto& r : f.curve) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g\n", r.epoch, r.loss, r.train_acc, r.test_acc);
    out += buf;
  }
  return out;
}

inline int argmax_row(const std::vector<float>& v, int row, int cols) {
  const float* p = v.data() + static_cast<std::size_t>(row) * cols;
  return static_cast<int>(std::max_element(p, p + cols) - p);
}

// Accuracy of argmax predictions, computed without recording a graph.
inline double evaluate_accuracy(const Model<float>& model, const std::vector<const Sample4D*>& samples, int batch = 24) {
  if (samples.empty()) return 0.0;
  diff::NoGradGuard guard;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    std::vector<const Sample4D*> chunk(samples.begin() + start, samples.begin() + end);
    auto out = model.forward(chunk);
    const int c = out.probs.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      if (argmax_row(out.probs.value(), static_cast<int>(i), c) == chunk[i]->label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

struct FoldOutput {
  FoldResult result;
  std::optional<Model<float>> model;
  Normalizer normalizer;
};

// Fits the normalizer on the training split only, trains for cfg.max_epochs,
// and scores the test split after every epoch.
inline FoldOutput train_fold(const std::vector<Sample4D>& samples, const FoldSplit& split, const ElectrodeLayout& layout,
                             const TrainConfig& cfg, std::uint64_t fold_seed, bool keep_model = false) {
  std::vector<const Sample4D*> train_raw;
  for (auto i : split.train) train_raw.push_back(&samples[i]);
  const Normalizer norm = fit_normalizer(train_raw, layout);
  std::vector<Sample4D> train_set, test_set;
  for (auto i : split.train) train_set.push_back(normalize(samples[i], norm));
  for (auto i : split.test) test_set.push_back(normalize(samples[i], norm));
  std::vector<const Sample4D*> train_ptrs, test_ptrs;
  for (const auto& s : train_set) train_ptrs.push_back(&s);
  for (const auto& s : test_set) test_ptrs.push_back(&s);

  Model<float> model(cfg.model);
  model.initialize(derive_seed(fold_seed, {1}));
  AdamState<float> adam;
  std::mt19937_64 shuffle_rng(derive_seed(fold_seed, {2}));

  FoldResult res;
  std::vector<std::size_t> order(train_ptrs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Sample4D*> batch;
      std::vector<int> labels;
      for (std::size_t j = start; j < end; ++j) {
        batch.push_back(train_ptrs[order[j]]);
        labels.push_back(train_ptrs[order[j]]->label);
      }
      auto out = model.forward(batch);
      auto loss = cross_entropy(out.probs, labels);
      model.params().zero_grad();
      diff::backward(loss);
      adam_step(model.params(), adam, cfg.adam);
      loss_sum += loss.item() * static_cast<double>(batch.size());
      const int c = out.probs.dim(1);
      for (std::size_t i = 0; i < batch.size(); ++i)
        if (argmax_row(out.probs.value(), static_cast<int>(i), c) == labels[i]) ++correct;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(order.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    rec.test_acc = evaluate_accuracy(model, test_ptrs, cfg.eval_batch);
    res.curve.push_back(rec);
    if (rec.test_acc > res.best_test_acc || res.best_epoch == 0) {
      res.best_test_acc = rec.test_acc;
      res.best_epoch = epoch;
    }
  }
  res.test_acc = res.curve.empty() ? evaluate_accuracy(model, test_ptrs, cfg.eval_batch) : res.curve.back().test_acc;
  res.train_acc = evaluate_accuracy(model, train_ptrs, cfg.eval_batch);
  FoldOutput out{res, std::nullopt, norm};
  if (keep_model) out.model.emplace(std::move(model));
  return out;
}

using FoldCallback =
    std::function<void(int subject, int experiment, const FoldResult&, const Model<float>*, const Normalizer&)>;

// Runs `count` independent jobs on up to `workers` threads. Results are
// indexed by job, so the outcome does not depend on scheduling.
inline void run_parallel(int count, int workers, const std::function<void(int)>& job) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mu;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i; (i = next++) < count;) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// k-fold cross-validation within one experiment's samples.
inline ExperimentResult train_experiment(const std::vector<Sample4D>& samples, const ElectrodeLayout& layout,
                                         const TrainConfig& cfg, const FoldCallback& on_fold = {}) {
  cfg.validate();
  if (samples.size() < static_cast<std::size_t>(cfg.folds))
    throw std::invalid_argument("train_experiment: " + std::to_string(samples.size()) + " samples for " +
                                std::to_string(cfg.folds) + " folds");
  ExperimentResult er;
  er.subject = samples.front().subject;
  er.experiment = samples.front().experiment;
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  const auto exp_seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(er.subject), static_cast<std::uint64_t>(er.experiment)});
  const auto splits = kfold_split(labels, cfg.folds, exp_seed);
  er.folds.resize(cfg.folds);
  std::mutex cb_mu;
  run_parallel(cfg.folds, cfg.jobs, [&](int f) {
    auto out = train_fold(samples, splits[f], layout, cfg, derive_seed(exp_seed, {100u + static_cast<std::uint64_t>(f)}),
                          static_cast<bool>(on_fold));
    out.result.fold = f;
    er.folds[f] = out.result;
    if (on_fold) {
      std::lock_guard lock(cb_mu);
      on_fold(er.subject, er.experiment, out.result, out.model ? &*out.model : nullptr, out.normalizer);
    }
  });
  return er;
}

// Groups samples by (subject, experiment) and cross-validates each group.
inline RunMetrics train_all(const std::vector<Sample4D>& samples, const ElectrodeLayout& layout, const TrainConfig& cfg,
                            const FoldCallback& on_fold = {}) {
  if (samples.empty()) throw std::invalid_argument("no samples to train on");
  std::map<std::pair<int, int>, std::vector<Sample4D>> groups;
  for (const auto& s : samples) groups[{s.subject, s.experiment}].push_back(s);
  RunMetrics m;
  for (auto& [key, group] : groups) m.experiments.push_back(train_experiment(group, layout, cfg, on_fold));
  return m;
}

inline std::vector<AttentionFlags> ablation_combos() {
  return {{true, true, true}, {false, true, true}, {true, false, true}, {true, true, false}, {false, false, false}};
}

struct AblationRow {
  AttentionFlags flags;
  RunMetrics metrics;
};

// Same seed, same splits, same initial weights for every combination; only
// the attention switches differ.
inline std::vector<AblationRow> ablation_sweep(const std::vector<Sample4D>& samples, const ElectrodeLayout& layout,
                                               const TrainConfig& cfg) {
  std::vector<AblationRow> rows;
  for (const auto& flags : ablation_combos()) {
    TrainConfig c = cfg;
    c.model.flags = flags;
    rows.push_back({flags, train_all(samples, layout, c)});
  }
  return rows;
}

inline nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"combo", r.flags.label()},
                   {"spectral", r.flags.spectral},
                   {"spatial", r.flags.spatial},
                   {"temporal", r.flags.temporal},
                   {"acc", r.metrics.overall_acc()},
                   {"std", r.metrics.overall_std()},
                   {"mean_fold_test_acc", r.metrics.mean_fold_test_acc()}});
  return out;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "combo,spectral,spatial,temporal,acc,std\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.6f,%.6f\n", r.flags.label().c_str(), r.flags.spectral, r.flags.spatial,
                  r.flags.temporal, r.metrics.overall_acc(), r.metrics.overall_std());
    out += buf;
  }
  return out;
}

enum class FeatureMode { both, de_only, psd_only };

// Keeps the DE half, the PSD half, or both of the feature axis. With
// `slice` the excluded half is removed (2f -> f); otherwise it is zeroed.
inline std::vector<Sample4D> feature_subset(const std::vector<Sample4D>& samples, FeatureMode mode, bool slice = true) {
  if (mode == FeatureMode::both) return samples;
  std::vector<Sample4D> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.features % 2) throw std::invalid_argument("feature_subset: odd feature axis");
    const int half = s.features / 2;
    const int keep_from = mode == FeatureMode::de_only ? 0 : half;
    if (slice) {
      Sample4D r = Sample4D::zeros(s.h, s.w, half, s.slices);
      r.label = s.label;
      r.subject = s.subject;
      r.experiment = s.experiment;
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
          for (int k = 0; k < half; ++k)
            for (int t = 0; t < s.slices; ++t) r.at(y, x, k, t) = s.at(y, x, keep_from + k, t);
      out.push_back(std::move(r));
    } else {
      Sample4D r = s;
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
          for (int k = 0; k < s.features; ++k)
            if (k < keep_from || k >= keep_from + half)
              for (int t = 0; t < s.slices; ++t) r.at(y, x, k, t) = 0.0f;
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace eeg4d
