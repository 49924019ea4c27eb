#pragma once

// Self-supervised pretraining of image encoders: contrastive loss over paired
// views (simclr), momentum-encoder dictionary lookup (moco-v2), and
// predict-the-target-projection bootstrapping (byol). All losses expose
// analytic gradients and accumulate in double so finite-difference tests can
// pin them down.

#include <string>
#include <utility>
#include <vector>

#include "encmark/augment.hpp"
#include "encmark/data.hpp"
#include "encmark/nets.hpp"

namespace encmark {

enum class SSLAlgorithm { Simclr, MocoV2, Byol };

inline std::string ssl_algorithm_name(SSLAlgorithm a) {
  switch (a) {
    case SSLAlgorithm::Simclr: return "simclr";
    case SSLAlgorithm::MocoV2: return "moco-v2";
    case SSLAlgorithm::Byol: return "byol";
  }
  throw ConfigError("unknown ssl algorithm");
}

inline SSLAlgorithm ssl_algorithm_from_name(const std::string& s) {
  if (s == "simclr") return SSLAlgorithm::Simclr;
  if (s == "moco-v2") return SSLAlgorithm::MocoV2;
  if (s == "byol") return SSLAlgorithm::Byol;
  throw ConfigError("unknown ssl algorithm: " + s);
}

struct SSLConfig {
  SSLAlgorithm algorithm = SSLAlgorithm::Simclr;
  double temperature = 0.5;   // moco-v2 runs typically want a sharper 0.2
  int64_t queue_size = 256;   // moco dictionary size K
  double momentum = 0.99;     // moco key-encoder momentum m
  double byol_decay = 0.99;   // byol target decay
  int64_t epochs = 5;
  int64_t batch_size = 32;
  double lr = 0.05;
  AugmentationPolicy augmentation;

  void validate() const {
    if (temperature <= 0) throw ConfigError("temperature must be positive");
    if (epochs <= 0 || batch_size <= 0) throw ConfigError("epochs and batch_size must be positive");
    if (lr <= 0) throw ConfigError("learning rate must be positive");
    if (algorithm == SSLAlgorithm::MocoV2) {
      if (momentum < 0 || momentum >= 1) throw ConfigError("moco momentum must lie in [0,1)");
      if (queue_size <= 0 || queue_size % batch_size != 0)
        throw ConfigError("queue_size must be a positive multiple of batch_size");
    }
    if (algorithm == SSLAlgorithm::Byol && (byol_decay < 0 || byol_decay > 1))
      throw ConfigError("byol decay must lie in [0,1]");
    augmentation.validate();
  }
};

// ---------------------------------------------------------------------------
// losses (value + analytic gradient, double accumulation)

namespace detail {

template <typename T>
std::vector<double> row_norms(const Tensor<T>& z) {
  int64_t n = z.shape[0], d = z.shape[1];
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = norm_d(z.ptr() + i * d, d);
  return out;
}

}  // namespace detail

// Contrastive loss over 2N projections where rows (2k, 2k+1) are positive
// pairs. Returns the scalar; `grad` (if non-null) receives dL/dprojections.
template <typename T>
double ntxent_loss(const Tensor<T>& proj, double tau, Tensor<T>* grad = nullptr) {
  if (proj.rank() != 2) throw InputError("ntxent_loss expects a (2N,D) batch");
  if (tau <= 0) throw ConfigError("temperature must be positive");
  int64_t m = proj.shape[0], d = proj.shape[1];
  if (m < 4 || m % 2 != 0) throw InputError("ntxent_loss needs at least two positive pairs");

  std::vector<double> nrm = detail::row_norms(proj);
  std::vector<double> s(static_cast<size_t>(m * m), 0.0);  // cosine matrix
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = i + 1; j < m; ++j) {
      double v = dot_d(proj.ptr() + i * d, proj.ptr() + j * d, d) /
                 (nrm[static_cast<size_t>(i)] * nrm[static_cast<size_t>(j)] + kCosineEps);
      s[static_cast<size_t>(i * m + j)] = v;
      s[static_cast<size_t>(j * m + i)] = v;
    }

  // softmax over k != i of s_ik / tau, row-stabilized
  std::vector<double> p(static_cast<size_t>(m * m), 0.0);
  double loss = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    int64_t partner = i ^ 1;
    double mx = -1e300;
    for (int64_t k = 0; k < m; ++k)
      if (k != i) mx = std::max(mx, s[static_cast<size_t>(i * m + k)] / tau);
    double denom = 0.0;
    for (int64_t k = 0; k < m; ++k)
      if (k != i) denom += std::exp(s[static_cast<size_t>(i * m + k)] / tau - mx);
    for (int64_t k = 0; k < m; ++k)
      if (k != i)
        p[static_cast<size_t>(i * m + k)] =
            std::exp(s[static_cast<size_t>(i * m + k)] / tau - mx) / denom;
    loss += -(s[static_cast<size_t>(i * m + partner)] / tau - mx) + std::log(denom);
  }
  loss /= static_cast<double>(m);

  if (grad) {
    // dL/ds_ik for ordered (i,k), k != i
    std::vector<double> g(static_cast<size_t>(m * m), 0.0);
    for (int64_t i = 0; i < m; ++i) {
      int64_t partner = i ^ 1;
      for (int64_t k = 0; k < m; ++k) {
        if (k == i) continue;
        double v = p[static_cast<size_t>(i * m + k)] - (k == partner ? 1.0 : 0.0);
        g[static_cast<size_t>(i * m + k)] = v / (tau * static_cast<double>(m));
      }
    }
    *grad = Tensor<T>({m, d});
    for (int64_t a = 0; a < m; ++a) {
      double na = nrm[static_cast<size_t>(a)];
      std::vector<double> acc(static_cast<size_t>(d), 0.0);
      for (int64_t k = 0; k < m; ++k) {
        if (k == a) continue;
        // s_ak enters both loss rows a and k; cosine is symmetric in its args
        double w = g[static_cast<size_t>(a * m + k)] + g[static_cast<size_t>(k * m + a)];
        if (w == 0.0) continue;
        double nk = nrm[static_cast<size_t>(k)];
        double sak = s[static_cast<size_t>(a * m + k)];
        double inv_ak = 1.0 / (na * nk + kCosineEps);
        double inv_aa = 1.0 / (na * na + kCosineEps);
        const T* zk = proj.ptr() + k * d;
        const T* za = proj.ptr() + a * d;
        for (int64_t t = 0; t < d; ++t)
          acc[static_cast<size_t>(t)] +=
              w * (static_cast<double>(zk[t]) * inv_ak - sak * static_cast<double>(za[t]) * inv_aa);
      }
      for (int64_t t = 0; t < d; ++t) grad->data[static_cast<size_t>(a * d + t)] = static_cast<T>(acc[static_cast<size_t>(t)]);
    }
  }
  return loss;
}

// Dictionary-lookup loss: logits are dot products of each query against its
// positive key then every queue entry, softmax cross-entropy on index 0.
// Operates on the vectors verbatim (callers normalize). `dq` gets dL/dq.
template <typename T>
double moco_loss(const Tensor<T>& q, const Tensor<T>& k_pos, const Tensor<T>& queue, double tau,
                 Tensor<T>* dq = nullptr) {
  if (q.rank() != 2 || k_pos.rank() != 2 || queue.rank() != 2)
    throw InputError("moco_loss expects (N,D) queries/keys and a (K,D) queue");
  if (!q.same_shape(k_pos) || q.shape[1] != queue.shape[1])
    throw InputError("moco_loss shape mismatch");
  if (tau <= 0) throw ConfigError("temperature must be positive");
  int64_t n = q.shape[0], d = q.shape[1], kq = queue.shape[0];

  if (dq) {
    *dq = Tensor<T>({n, d});
    dq->fill(T(0));
  }
  double loss = 0.0;
  std::vector<double> logits(static_cast<size_t>(kq + 1));
  for (int64_t i = 0; i < n; ++i) {
    logits[0] = dot_d(q.ptr() + i * d, k_pos.ptr() + i * d, d) / tau;
    for (int64_t j = 0; j < kq; ++j)
      logits[static_cast<size_t>(j + 1)] = dot_d(q.ptr() + i * d, queue.ptr() + j * d, d) / tau;
    double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double l : logits) denom += std::exp(l - mx);
    loss += -(logits[0] - mx) + std::log(denom);
    if (dq) {
      for (int64_t j = 0; j <= kq; ++j) {
        double pj = std::exp(logits[static_cast<size_t>(j)] - mx) / denom;
        double w = (pj - (j == 0 ? 1.0 : 0.0)) / (tau * static_cast<double>(n));
        const T* key = j == 0 ? k_pos.ptr() + i * d : queue.ptr() + (j - 1) * d;
        for (int64_t t = 0; t < d; ++t)
          dq->data[static_cast<size_t>(i * d + t)] += static_cast<T>(w * static_cast<double>(key[t]));
      }
    }
  }
  return loss / static_cast<double>(n);
}

// One bootstrap branch: mean over the batch of 2 - 2 cos(pred_i, target_i).
// `dpred` gets dL/dpred; the target side is treated as constant.
template <typename T>
double byol_branch_loss(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* dpred = nullptr) {
  if (pred.rank() != 2 || !pred.same_shape(target))
    throw InputError("byol_branch_loss expects matching (N,D) batches");
  int64_t n = pred.shape[0], d = pred.shape[1];
  if (dpred) {
    *dpred = Tensor<T>({n, d});
    dpred->fill(T(0));
  }
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const T* p = pred.ptr() + i * d;
    const T* t = target.ptr() + i * d;
    double np = norm_d(p, d), nt = norm_d(t, d);
    double denom = np * nt + kCosineEps;
    double c = dot_d(p, t, d) / denom;
    loss += 2.0 - 2.0 * c;
    if (dpred) {
      double inv_pp = 1.0 / (np * np + kCosineEps);
      for (int64_t j = 0; j < d; ++j)
        dpred->data[static_cast<size_t>(i * d + j)] = static_cast<T>(
            (-2.0 / static_cast<double>(n)) *
            (static_cast<double>(t[j]) / denom - c * static_cast<double>(p[j]) * inv_pp));
    }
  }
  return loss / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// row normalization (with backward), used by the moco step

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  int64_t n = x.shape[0], d = x.shape[1];
  Tensor<T> out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    double nm = norm_d(x.ptr() + i * d, d) + kCosineEps;
    for (int64_t j = 0; j < d; ++j)
      out.data[static_cast<size_t>(i * d + j)] = static_cast<T>(static_cast<double>(x.data[static_cast<size_t>(i * d + j)]) / nm);
  }
  return out;
}

template <typename T>
Tensor<T> normalize_rows_backward(const Tensor<T>& x_raw, const Tensor<T>& dy) {
  int64_t n = x_raw.shape[0], d = x_raw.shape[1];
  Tensor<T> dx({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const T* x = x_raw.ptr() + i * d;
    const T* g = dy.ptr() + i * d;
    double nm = norm_d(x, d) + kCosineEps;
    double xg = dot_d(x, g, d);
    for (int64_t j = 0; j < d; ++j)
      dx.data[static_cast<size_t>(i * d + j)] = static_cast<T>(
          static_cast<double>(g[j]) / nm -
          static_cast<double>(x[j]) * xg / (nm * nm * nm));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// training state + steps

struct PretrainResult {
  Encoder encoder;
  std::vector<double> epoch_loss;
};

namespace detail {

// Two stacked views (2B,H,W,C) with rows (2i, 2i+1) the pair for sample i of
// `rows`; per-sample rng streams keyed by (seed, dataset row, epoch) so the
// result is independent of batch schedule.
inline std::pair<Tensor<float>, Tensor<float>> paired_views(const Dataset& data,
                                                            const std::vector<int64_t>& rows,
                                                            const AugmentationPolicy& policy,
                                                            uint64_t seed, int64_t epoch) {
  int64_t b = static_cast<int64_t>(rows.size());
  int64_t h = data.height(), w = data.width(), c = data.channels();
  Tensor<float> va({b, h, w, c}), vb({b, h, w, c});
  for (int64_t i = 0; i < b; ++i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(rows[static_cast<size_t>(i)]),
                        static_cast<uint64_t>(epoch)));
    auto [x1, x2] = augment_pair(image_row(data.images, rows[static_cast<size_t>(i)]), policy, rng);
    set_image_row(va, i, x1);
    set_image_row(vb, i, x2);
  }
  return {std::move(va), std::move(vb)};
}

inline Tensor<float> interleave_rows(const Tensor<float>& a, const Tensor<float>& b) {
  int64_t n = a.shape[0];
  std::vector<int64_t> sh = a.shape;
  sh[0] = 2 * n;
  Tensor<float> out(sh);
  int64_t stride = a.numel() / n;
  for (int64_t i = 0; i < n; ++i) {
    std::copy_n(a.data.begin() + i * stride, stride, out.data.begin() + (2 * i) * stride);
    std::copy_n(b.data.begin() + i * stride, stride, out.data.begin() + (2 * i + 1) * stride);
  }
  return out;
}

}  // namespace detail

inline PretrainResult pretrain_simclr(const Dataset& data, const EncoderSpec& spec,
                                      const SSLConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (data.size() == 0) throw InputError("pretraining dataset is empty");
  Encoder enc = build_encoder(spec, derive_seed(seed, "encoder-seed"));
  Net<float> head = build_projection_head(spec.output_dim(), derive_seed(seed, "head-seed"));
  Sgd<float> opt(cfg.lr);
  Rng order = make_stream(seed, "epoch-order");
  std::vector<double> epoch_loss;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int64_t> idx = shuffled_indices(data.size(), order);
    double sum = 0.0;
    int64_t steps = 0;
    for (const auto& rows_local : batch_indices(data.size(), cfg.batch_size, true)) {
      std::vector<int64_t> rows;
      rows.reserve(rows_local.size());
      for (int64_t r : rows_local) rows.push_back(idx[static_cast<size_t>(r)]);
      if (static_cast<int64_t>(rows.size()) < 2) continue;
      auto [va, vb] = detail::paired_views(data, rows, cfg.augmentation, seed, epoch);
      Tensor<float> batch = detail::interleave_rows(va, vb);
      Tensor<float> feats = enc.net().forward(batch, true);
      Tensor<float> proj = head.forward(feats, true);
      Tensor<float> dproj;
      double loss = ntxent_loss(proj, cfg.temperature, &dproj);
      if (!std::isfinite(loss)) throw TrainingError("non-finite contrastive loss");
      enc.net().zero_grad();
      head.zero_grad();
      Tensor<float> dfeat = head.backward(dproj);
      enc.net().backward(dfeat);
      opt.step(head);
      opt.step(enc.net());
      sum += loss;
      ++steps;
    }
    if (steps == 0) throw InputError("dataset smaller than one batch");
    epoch_loss.push_back(sum / static_cast<double>(steps));
  }
  return {std::move(enc), std::move(epoch_loss)};
}

struct MocoState {
  Encoder query_enc;
  Net<float> query_head;
  Encoder key_enc;
  Net<float> key_head;
  Tensor<float> queue;  // (K, proj_dim), unit rows
  int64_t queue_pos = 0;
};

// One optimization step: encode two provided views, contrast the query view
// against positive keys plus the queue, update the query side by SGD, move
// the key side by EMA, and rotate the queue. Returns the loss.
inline double moco_step(MocoState& st, const Tensor<float>& view_q, const Tensor<float>& view_k,
                        double m, double tau, double lr) {
  if (st.queue.shape[0] % view_q.shape[0] != 0)
    throw ConfigError("queue length must be a multiple of the batch size");
  if (m < 0 || m >= 1) throw ConfigError("moco momentum must lie in [0,1)");

  Tensor<float> fq = st.query_enc.net().forward(view_q, true);
  Tensor<float> zq_raw = st.query_head.forward(fq, true);
  Tensor<float> zq = normalize_rows(zq_raw);

  Tensor<float> fk = st.key_enc.net().forward(view_k, true);
  Tensor<float> zk = normalize_rows(st.key_head.forward(fk, true));

  Tensor<float> dzq;
  double loss = moco_loss(zq, zk, st.queue, tau, &dzq);
  if (!std::isfinite(loss)) throw TrainingError("non-finite dictionary loss");

  st.query_enc.net().zero_grad();
  st.query_head.zero_grad();
  Tensor<float> dzq_raw = normalize_rows_backward(zq_raw, dzq);
  Tensor<float> dfq = st.query_head.backward(dzq_raw);
  st.query_enc.net().backward(dfq);
  Sgd<float> opt(lr);
  opt.step(st.query_head);
  opt.step(st.query_enc.net());

  ema_update(st.key_enc.net(), st.query_enc.net(), m);
  ema_update(st.key_head, st.query_head, m);

  // enqueue current keys, overwriting the oldest batch
  int64_t b = zk.shape[0], d = zk.shape[1];
  for (int64_t i = 0; i < b; ++i) {
    std::copy_n(zk.data.begin() + i * d, d,
                st.queue.data.begin() + ((st.queue_pos + i) % st.queue.shape[0]) * d);
  }
  st.queue_pos = (st.queue_pos + b) % st.queue.shape[0];
  return loss;
}

inline MocoState make_moco_state(const Dataset& data, const EncoderSpec& spec,
                                 const SSLConfig& cfg, uint64_t seed) {
  MocoState st{build_encoder(spec, derive_seed(seed, "encoder-seed")),
               build_projection_head(spec.output_dim(), derive_seed(seed, "head-seed")),
               build_encoder(spec, derive_seed(seed, "encoder-seed")),
               build_projection_head(spec.output_dim(), derive_seed(seed, "head-seed")),
               Tensor<float>(),
               0};
  // seed the dictionary with encoded random samples, unit-normalized
  Rng pick = make_stream(seed, "queue-init");
  std::vector<int64_t> rows(static_cast<size_t>(cfg.queue_size));
  std::uniform_int_distribution<int64_t> uni(0, data.size() - 1);
  for (auto& r : rows) r = uni(pick);
  Tensor<float> imgs = gather_rows(data.images, rows);
  Tensor<float> feats = st.key_enc.net().forward(imgs, false);
  st.queue = normalize_rows(st.key_head.forward(feats, false));
  return st;
}

inline PretrainResult pretrain_moco(const Dataset& data, const EncoderSpec& spec,
                                    const SSLConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (data.size() == 0) throw InputError("pretraining dataset is empty");
  MocoState st = make_moco_state(data, spec, cfg, seed);
  Rng order = make_stream(seed, "epoch-order");
  std::vector<double> epoch_loss;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int64_t> idx = shuffled_indices(data.size(), order);
    double sum = 0.0;
    int64_t steps = 0;
    for (const auto& rows_local : batch_indices(data.size(), cfg.batch_size, true)) {
      std::vector<int64_t> rows;
      for (int64_t r : rows_local) rows.push_back(idx[static_cast<size_t>(r)]);
      auto [vq, vk] = detail::paired_views(data, rows, cfg.augmentation, seed, epoch);
      sum += moco_step(st, vq, vk, cfg.momentum, cfg.temperature, cfg.lr);
      ++steps;
    }
    if (steps == 0) throw InputError("dataset smaller than one batch");
    epoch_loss.push_back(sum / static_cast<double>(steps));
  }
  return {std::move(st.query_enc), std::move(epoch_loss)};
}

struct ByolState {
  Encoder online_enc;
  Net<float> online_proj;
  Net<float> online_pred;
  Encoder target_enc;
  Net<float> target_proj;
};

inline ByolState make_byol_state(const EncoderSpec& spec, uint64_t seed) {
  ByolState st{build_encoder(spec, derive_seed(seed, "encoder-seed")),
               build_projection_head(spec.output_dim(), derive_seed(seed, "head-seed")),
               build_predictor(spec.output_dim() / 2, derive_seed(seed, "pred-seed")),
               build_encoder(spec, derive_seed(seed, "encoder-seed")),
               build_projection_head(spec.output_dim(), derive_seed(seed, "head-seed"))};
  return st;
}

// Symmetric bootstrap step on two views. Gradients from both branches
// accumulate on the online networks before one SGD step; the target follows
// by EMA with decay tau_byol. Returns the summed two-branch loss.
inline double byol_step(ByolState& st, const Tensor<float>& view_a, const Tensor<float>& view_b,
                        double tau_byol, double lr) {
  if (tau_byol < 0 || tau_byol > 1) throw ConfigError("byol decay must lie in [0,1]");
  st.online_enc.net().zero_grad();
  st.online_proj.zero_grad();
  st.online_pred.zero_grad();

  double loss = 0.0;
  auto branch = [&](const Tensor<float>& vo, const Tensor<float>& vt) {
    Tensor<float> f = st.online_enc.net().forward(vo, true);
    Tensor<float> z = st.online_proj.forward(f, true);
    Tensor<float> p = st.online_pred.forward(z, true);
    Tensor<float> ft = st.target_enc.net().forward(vt, true);
    Tensor<float> zt = st.target_proj.forward(ft, true);
    Tensor<float> dp;
    double l = byol_branch_loss(p, zt, &dp);
    Tensor<float> dz = st.online_pred.backward(dp);
    Tensor<float> df = st.online_proj.backward(dz);
    st.online_enc.net().backward(df);
    return l;
  };
  loss += branch(view_a, view_b);
  loss += branch(view_b, view_a);
  if (!std::isfinite(loss)) throw TrainingError("non-finite bootstrap loss");

  Sgd<float> opt(lr);
  opt.step(st.online_pred);
  opt.step(st.online_proj);
  opt.step(st.online_enc.net());
  ema_update(st.target_enc.net(), st.online_enc.net(), tau_byol);
  ema_update(st.target_proj, st.online_proj, tau_byol);
  return loss;
}

inline PretrainResult pretrain_byol(const Dataset& data, const EncoderSpec& spec,
                                    const SSLConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (data.size() == 0) throw InputError("pretraining dataset is empty");
  ByolState st = make_byol_state(spec, seed);
  Rng order = make_stream(seed, "epoch-order");
  std::vector<double> epoch_loss;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int64_t> idx = shuffled_indices(data.size(), order);
    double sum = 0.0;
    int64_t steps = 0;
    for (const auto& rows_local : batch_indices(data.size(), cfg.batch_size, true)) {
      std::vector<int64_t> rows;
      for (int64_t r : rows_local) rows.push_back(idx[static_cast<size_t>(r)]);
      auto [va, vb] = detail::paired_views(data, rows, cfg.augmentation, seed, epoch);
      sum += byol_step(st, va, vb, cfg.byol_decay, cfg.lr);
      ++steps;
    }
    if (steps == 0) throw InputError("dataset smaller than one batch");
    epoch_loss.push_back(sum / static_cast<double>(steps));
  }
  return {std::move(st.online_enc), std::move(epoch_loss)};
}

inline PretrainResult pretrain(const Dataset& data, const EncoderSpec& spec, const SSLConfig& cfg,
                               uint64_t seed) {
  switch (cfg.algorithm) {
    case SSLAlgorithm::Simclr: return pretrain_simclr(data, spec, cfg, seed);
    case SSLAlgorithm::MocoV2: return pretrain_moco(data, spec, cfg, seed);
    case SSLAlgorithm::Byol: return pretrain_byol(data, spec, cfg, seed);
  }
  throw ConfigError("unknown ssl algorithm");
}

}  // namespace encmark
