#pragma once

// Black-box model stealing: train a surrogate encoder so its features match a
// victim's answers over a query set, under one of three per-sample
// similarity objectives. The victim is reachable only through an opaque
// query function.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "encmark/data.hpp"
#include "encmark/eval.hpp"
#include "encmark/nets.hpp"

namespace encmark {

enum class SimilarityKind { Cosine, Mse, Mae };

inline std::string similarity_name(SimilarityKind k) {
  switch (k) {
    case SimilarityKind::Cosine: return "cosine";
    case SimilarityKind::Mse: return "mse";
    case SimilarityKind::Mae: return "mae";
  }
  throw ConfigError("unknown similarity kind");
}

inline SimilarityKind similarity_from_name(const std::string& s) {
  if (s == "cosine") return SimilarityKind::Cosine;
  if (s == "mse") return SimilarityKind::Mse;
  if (s == "mae") return SimilarityKind::Mae;
  throw ConfigError("unknown similarity kind: " + s);
}

// Per-sample similarity with reduction over the feature axis only.
template <typename T>
Tensor<T> similarity(const Tensor<T>& a, const Tensor<T>& b, SimilarityKind kind) {
  if (a.rank() != 2 || !a.same_shape(b)) throw InputError("similarity expects matching (N,D) batches");
  int64_t n = a.shape[0], d = a.shape[1];
  Tensor<T> out({n});
  for (int64_t i = 0; i < n; ++i) {
    const T* x = a.ptr() + i * d;
    const T* y = b.ptr() + i * d;
    double v = 0.0;
    switch (kind) {
      case SimilarityKind::Cosine: v = cosine_d(x, y, d); break;
      case SimilarityKind::Mse: {
        for (int64_t j = 0; j < d; ++j) {
          double e = static_cast<double>(x[j]) - static_cast<double>(y[j]);
          v += e * e;
        }
        v /= static_cast<double>(d);
        break;
      }
      case SimilarityKind::Mae: {
        for (int64_t j = 0; j < d; ++j)
          v += std::abs(static_cast<double>(x[j]) - static_cast<double>(y[j]));
        v /= static_cast<double>(d);
        break;
      }
    }
    out.data[static_cast<size_t>(i)] = static_cast<T>(v);
  }
  return out;
}

// Opaque query access to a victim encoder. Holds no parameters.
struct VictimHandle {
  std::function<Tensor<float>(const Tensor<float>&)> query;
  int64_t feature_dim = 0;
};

inline VictimHandle make_victim(Encoder& enc) {
  return VictimHandle{[&enc](const Tensor<float>& batch) { return enc.encode(batch); },
                      enc.output_dim()};
}

struct StealConfig {
  EncoderSpec surrogate_spec;
  std::string query_dataset;  // id resolved by the caller
  SimilarityKind kind = SimilarityKind::Cosine;
  int64_t epochs = 10;
  int64_t batch_size = 32;
  double lr = 0.05;
  uint64_t seed = 0;
  std::string name;  // label for grids/reports

  void validate() const {
    surrogate_spec.validate();
    if (epochs < 1) throw ConfigError("attack epochs must be at least 1");
    if (batch_size <= 0) throw ConfigError("batch size must be positive");
    if (lr <= 0) throw ConfigError("learning rate must be positive");
  }
};

namespace detail {

// Loss + gradient w.r.t. surrogate features for one batch. Cosine similarity
// is maximized (loss is its negation); error kinds are minimized directly.
inline double match_loss(const Tensor<float>& s, const Tensor<float>& v, SimilarityKind kind,
                         Tensor<float>* ds) {
  int64_t n = s.shape[0], d = s.shape[1];
  if (ds) {
    *ds = Tensor<float>({n, d});
    ds->fill(0.0f);
  }
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const float* x = s.ptr() + i * d;
    const float* y = v.ptr() + i * d;
    switch (kind) {
      case SimilarityKind::Cosine: {
        double nx = norm_d(x, d), ny = norm_d(y, d);
        double denom = nx * ny + kCosineEps;
        double c = dot_d(x, y, d) / denom;
        loss += -c;
        if (ds) {
          double inv_xx = 1.0 / (nx * nx + kCosineEps);
          for (int64_t j = 0; j < d; ++j)
            ds->data[static_cast<size_t>(i * d + j)] = static_cast<float>(
                (-1.0 / static_cast<double>(n)) *
                (static_cast<double>(y[j]) / denom - c * static_cast<double>(x[j]) * inv_xx));
        }
        break;
      }
      case SimilarityKind::Mse: {
        for (int64_t j = 0; j < d; ++j) {
          double e = static_cast<double>(x[j]) - static_cast<double>(y[j]);
          loss += e * e / static_cast<double>(d);
          if (ds)
            ds->data[static_cast<size_t>(i * d + j)] =
                static_cast<float>(2.0 * e / static_cast<double>(n * d));
        }
        break;
      }
      case SimilarityKind::Mae: {
        for (int64_t j = 0; j < d; ++j) {
          double e = static_cast<double>(x[j]) - static_cast<double>(y[j]);
          loss += std::abs(e) / static_cast<double>(d);
          if (ds)
            ds->data[static_cast<size_t>(i * d + j)] =
                static_cast<float>((e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0)) / static_cast<double>(n * d));
        }
        break;
      }
    }
  }
  return loss / static_cast<double>(n);
}

}  // namespace detail

// Trains `surrogate` in place to match cached victim answers. Returns the
// mean training-set cosine similarity after each epoch (inference mode).
inline std::vector<double> train_to_match(Encoder& surrogate, const VictimHandle& victim,
                                          const Dataset& queries, SimilarityKind kind,
                                          int64_t epochs, int64_t batch_size, double lr,
                                          uint64_t seed) {
  if (queries.size() == 0) throw InputError("query dataset is empty");
  if (surrogate.output_dim() != victim.feature_dim)
    throw ConfigError("surrogate width does not match victim feature width");
  Tensor<float> answers = victim.query(queries.images);
  if (answers.shape[0] != queries.size() || answers.shape[1] != victim.feature_dim)
    throw InputError("victim returned a misshapen feature batch");

  auto epoch_cosine = [&]() {
    Tensor<float> f = detail::encode_all(surrogate, queries.images);
    Tensor<float> sims = similarity(f, answers, SimilarityKind::Cosine);
    double s = 0.0;
    for (float v : sims.data) s += v;
    return s / static_cast<double>(sims.numel());
  };

  std::vector<double> history;
  Sgd<float> opt(lr);
  Rng order = make_stream(seed, "attack-order");
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int64_t> idx = shuffled_indices(queries.size(), order);
    for (const auto& rows_local : batch_indices(queries.size(), batch_size)) {
      std::vector<int64_t> rows;
      for (int64_t r : rows_local) rows.push_back(idx[static_cast<size_t>(r)]);
      Tensor<float> xb = gather_rows(queries.images, rows);
      Tensor<float> vb = gather_rows(answers, rows);
      Tensor<float> fb = surrogate.net().forward(xb, true);
      Tensor<float> dfb;
      double loss = detail::match_loss(fb, vb, kind, &dfb);
      if (!std::isfinite(loss)) throw TrainingError("non-finite attack loss");
      surrogate.net().zero_grad();
      surrogate.net().backward(dfb);
      opt.step(surrogate.net());
    }
    history.push_back(epoch_cosine());
  }
  return history;
}

struct StealResult {
  Encoder surrogate;
  std::vector<double> epoch_cosine;  // mean train-query cosine after each epoch
  double final_loss = 0.0;           // final-epoch loss under the configured kind
};

// Builds a fresh surrogate (auto-inserting a width adapter when needed) and
// trains it against the victim. epochs == 0 returns the initialized
// surrogate untouched.
inline StealResult steal(const VictimHandle& victim, const Dataset& queries,
                         const StealConfig& cfg) {
  if (queries.size() == 0) throw InputError("query dataset is empty");
  EncoderSpec spec = cfg.surrogate_spec;
  if (spec.output_dim() != victim.feature_dim) {
    if (spec.adapter_dim)
      throw ConfigError("surrogate adapter width disagrees with victim feature width");
    spec.adapter_dim = victim.feature_dim;
  }
  spec.validate();
  StealResult res{build_encoder(spec, derive_seed(cfg.seed, "surrogate-init")), {}, 0.0};
  if (cfg.epochs == 0) return res;
  res.epoch_cosine = train_to_match(res.surrogate, victim, queries, cfg.kind, cfg.epochs,
                                    cfg.batch_size, cfg.lr, cfg.seed);
  Tensor<float> f = detail::encode_all(res.surrogate, queries.images);
  Tensor<float> answers = victim.query(queries.images);
  res.final_loss = detail::match_loss(f, answers, cfg.kind, nullptr);
  return res;
}

// Optional downstream task evaluated for each grid cell.
struct ProbeTask {
  std::string name;
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;
  ProbeConfig config;
  uint64_t seed = 0;
};

struct AttackCell {
  StealConfig config;
  std::optional<StealResult> result;
  double final_cosine = 0.0;
  std::map<std::string, double> da_per_task;
  std::string error;  // empty on success
};

using DatasetResolver = std::function<const Dataset&(const std::string&)>;

// Runs every attack in the grid; a failing cell records its error and the
// rest of the grid still runs.
inline std::vector<AttackCell> run_attack_grid(const VictimHandle& victim,
                                               const std::vector<StealConfig>& grid,
                                               const DatasetResolver& resolve,
                                               const std::vector<ProbeTask>& tasks = {}) {
  std::vector<AttackCell> cells;
  for (const StealConfig& cfg : grid) {
    AttackCell cell;
    cell.config = cfg;
    try {
      cfg.validate();
      const Dataset& queries = resolve(cfg.query_dataset);
      StealResult r = steal(victim, queries, cfg);
      cell.final_cosine = r.epoch_cosine.empty() ? 0.0 : r.epoch_cosine.back();
      for (const ProbeTask& t : tasks) {
        Classifier probe = train_probe(r.surrogate, *t.train, t.config, t.seed);
        cell.da_per_task[t.name] = downstream_accuracy(r.surrogate, probe, *t.test);
      }
      cell.result = std::move(r);
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    cells.push_back(std::move(cell));
  }
  return cells;
}

}  // namespace encmark
