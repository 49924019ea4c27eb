#pragma once

// Watermark embedding: jointly optimizes the watermarked encoder, a shadow
// encoder, the trigger, and the decoder so that triggered private images
// decode to the secret key while clean behavior is preserved. Four parameter
// groups, three sequential phases per step, all on the same per-step batches.

#include <optional>
#include <vector>

#include "encmark/checkpoint.hpp"
#include "encmark/data.hpp"
#include "encmark/wm.hpp"

namespace encmark {

struct EmbedConfig {
  int64_t steps = 200;
  int64_t batch_train = 32;
  int64_t batch_shadow = 32;
  int64_t batch_verif = 50;  // capped at |D_priv|
  double lr_w = 0.01;
  double lr_s = 0.01;
  double lr_trigger = 0.005;
  double lr_decoder = 0.005;
  double th_w = 0.5;
  double th_v = 0.5;
  EncoderSpec shadow_spec;
  uint64_t seed = 0;
  int64_t key_dim = 128;
  double trigger_coverage = 0.35;
  std::optional<DecoderSpec> decoder_spec;  // defaults derived from widths
  bool use_shadow = true;                   // ablation: drop the shadow branch

  void validate() const {
    if (steps <= 0) throw ConfigError("embed steps must be positive");
    if (batch_train <= 0 || batch_shadow <= 0 || batch_verif <= 0)
      throw ConfigError("embed batch sizes must be positive");
    if (lr_w <= 0 || lr_s <= 0 || lr_trigger <= 0 || lr_decoder <= 0)
      throw ConfigError("embed learning rates must be positive");
    if (th_w <= 0 || th_w >= 1 || th_v <= 0 || th_v >= 1)
      throw ConfigError("thresholds must lie in (0,1)");
    if (key_dim < 8) throw ConfigError("key dimension must be at least 8");
    if (trigger_coverage <= 0 || trigger_coverage >= 1)
      throw ConfigError("trigger coverage must lie in (0,1)");
    shadow_spec.validate();
  }
};

struct EmbedResult {
  Encoder watermarked;
  Encoder shadow;
  KeyTuple key;
  std::vector<double> loss_shadow;   // per step
  std::vector<double> loss_encoder;  // per step
  std::vector<double> loss_trigger;  // per step
};

namespace detail {

// Draws `count` row indices, reshuffling the pool whenever it runs dry.
class BatchSampler {
 public:
  BatchSampler(int64_t n, Rng rng) : n_(n), rng_(std::move(rng)) { refill(); }

  std::vector<int64_t> draw(int64_t count) {
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
      if (pos_ == static_cast<int64_t>(pool_.size())) refill();
      out.push_back(pool_[static_cast<size_t>(pos_++)]);
    }
    return out;
  }

 private:
  void refill() {
    pool_ = shuffled_indices(n_, rng_);
    pos_ = 0;
  }
  int64_t n_;
  Rng rng_;
  std::vector<int64_t> pool_;
  int64_t pos_ = 0;
};

// Accumulates masked input gradients into the trigger gradient:
// dL/dT += sum_n M o dX_v[n].
inline void add_trigger_grad(const Tensor<float>& dxv, const Mask& mask, Tensor<float>& dtrigger) {
  int64_t stride = dtrigger.numel();
  for (int64_t n = 0; n < dxv.shape[0]; ++n)
    for (int64_t i = 0; i < stride; ++i)
      if (mask.m.data[static_cast<size_t>(i)] != 0.0f)
        dtrigger.data[static_cast<size_t>(i)] += dxv.data[static_cast<size_t>(n * stride + i)];
}

}  // namespace detail

// Embeds a watermark into a copy of `clean`. The clean encoder itself is a
// frozen reference: it is forwarded (and back-propagated through for trigger
// gradients) but its parameters are never stepped.
inline EmbedResult embed(Encoder& clean, const Dataset& d_train, const Dataset& d_shadow,
                         const Dataset& d_priv, const EmbedConfig& cfg) {
  cfg.validate();
  if (d_train.size() == 0 || d_priv.size() == 0) throw InputError("embedding datasets are empty");
  if (cfg.use_shadow && d_shadow.size() == 0) throw InputError("shadow dataset is empty");
  if (cfg.shadow_spec.output_dim() != clean.output_dim())
    throw ConfigError("shadow encoder output width must match the clean encoder");
  int64_t h = d_train.height(), w = d_train.width(), c = d_train.channels();

  // --- initialize the four groups ------------------------------------------
  Encoder wmk = clone_encoder(clean);
  freeze_batchnorm(wmk);
  Encoder shadow = build_encoder(cfg.shadow_spec, derive_seed(cfg.seed, "shadow-init"));

  DecoderSpec dec_spec = cfg.decoder_spec
                             ? *cfg.decoder_spec
                             : DecoderSpec::defaults(clean.output_dim(), cfg.key_dim);
  if (dec_spec.input_dim != clean.output_dim() || dec_spec.key_dim() != cfg.key_dim)
    throw ConfigError("decoder widths disagree with encoder/key dimensions");
  Decoder decoder = build_decoder(dec_spec, derive_seed(cfg.seed, "decoder-init"));

  std::vector<float> sk = sample_sk(cfg.key_dim, derive_seed(cfg.seed, "key-seed"));
  Mask mask = make_mask(h, w, c, cfg.trigger_coverage);
  Tensor<float> trigger({h, w, c});
  {
    Rng trng = make_stream(cfg.seed, "trigger-init");
    fill_uniform(trigger.data, trng, 0.0, 1.0);
  }

  Sgd<float> opt_w(cfg.lr_w), opt_s(cfg.lr_s), opt_g(cfg.lr_decoder);
  detail::BatchSampler sample_train(d_train.size(), make_stream(cfg.seed, "train-order"));
  detail::BatchSampler sample_shadow(cfg.use_shadow ? d_shadow.size() : 1,
                                     make_stream(cfg.seed, "shadow-order"));
  detail::BatchSampler sample_verif(d_priv.size(), make_stream(cfg.seed, "verif-order"));
  int64_t batch_verif = std::min(cfg.batch_verif, d_priv.size());

  EmbedResult res{std::move(wmk), std::move(shadow), KeyTuple{}, {}, {}, {}};
  Net<float>& fw = res.watermarked.net();
  Net<float>& fs = res.shadow.net();
  Net<float>& fc = clean.net();
  Net<float>& g = decoder.net();

  auto check_finite = [&](double loss, int64_t step, const char* which) {
    if (!std::isfinite(loss))
      throw TrainingError(std::string("non-finite ") + which + " loss at step " +
                          std::to_string(step));
  };

  for (int64_t step = 0; step < cfg.steps; ++step) {
    // fresh batches per step, shared across the three phases
    Tensor<float> xt = gather_rows(d_train.images, sample_train.draw(cfg.batch_train));
    Tensor<float> xp = gather_rows(d_priv.images, sample_verif.draw(batch_verif));
    Tensor<float> xs;
    if (cfg.use_shadow) xs = gather_rows(d_shadow.images, sample_shadow.draw(cfg.batch_shadow));

    // --- phase 1: shadow encoder follows the watermarked encoder ----------
    double l_s = 0.0;
    if (cfg.use_shadow) {
      Tensor<float> f_star = fw.forward(xs, false);
      Tensor<float> f_sh = fs.forward(xs, true);
      Tensor<float> dfs;
      l_s = detail::match_from_features(f_star, f_sh, nullptr, &dfs);
      check_finite(l_s, step, "shadow");
      fs.zero_grad();
      fs.backward(dfs);
      opt_s.step(fs);
    }
    res.loss_shadow.push_back(l_s);

    // --- phase 2: watermarked encoder --------------------------------------
    // match(D_train: clean, watermarked) + uncorr(D_train, wmk) + corr(D_v, wmk);
    // decoder treated as fixed (its gradients are wiped before phase 3).
    double l_w = 0.0;
    fw.zero_grad();
    {
      Tensor<float> f_clean = fc.forward(xt, false);
      Tensor<float> f_w = fw.forward(xt, true);
      Tensor<float> df_w;
      l_w += detail::match_from_features(f_clean, f_w, nullptr, &df_w);
      Tensor<float> dec_t = g.forward(f_w, true);
      Tensor<float> ddec;
      l_w += detail::uncorr_from_decoded(dec_t, sk, &ddec);
      g.zero_grad();
      Tensor<float> df_w2 = g.backward(ddec);
      for (size_t i = 0; i < df_w.data.size(); ++i) df_w.data[i] += df_w2.data[i];
      fw.backward(df_w);
    }
    {
      Tensor<float> xv = apply_trigger_batch(xp, trigger, mask);
      Tensor<float> f_wv = fw.forward(xv, true);
      Tensor<float> dec_v = g.forward(f_wv, true);
      Tensor<float> ddec;
      double term = detail::corr_from_decoded(dec_v, sk, &ddec);
      l_w += term;
      g.zero_grad();
      Tensor<float> df_wv = g.backward(ddec);
      fw.backward(df_wv);
    }
    check_finite(l_w, step, "encoder");
    opt_w.step(fw);
    res.loss_encoder.push_back(l_w);

    // --- phase 3: trigger + decoder jointly --------------------------------
    // corr(D_v, wmk) + corr(D_v, shadow) + uncorr(D_train, clean)
    // + uncorr(D_v, clean) + uncorr(D_train, wmk) + uncorr(D_train, shadow).
    // Trigger gradients flow through the encoders' inputs on the D_v terms.
    double l_t = 0.0;
    g.zero_grad();
    Tensor<float> dtrigger({h, w, c});
    dtrigger.fill(0.0f);
    Tensor<float> xv = apply_trigger_batch(xp, trigger, mask);

    // terms through D_v (need input gradients)
    auto verif_term = [&](Net<float>& enc, bool correlated) {
      Tensor<float> f = enc.forward(xv, false);
      Tensor<float> dec = g.forward(f, true);
      Tensor<float> ddec;
      double term = correlated ? detail::corr_from_decoded(dec, sk, &ddec)
                               : detail::uncorr_from_decoded(dec, sk, &ddec);
      Tensor<float> df = g.backward(ddec);
      enc.zero_grad();  // scratch: these grads are never stepped
      Tensor<float> dxv = enc.backward(df);
      detail::add_trigger_grad(dxv, mask, dtrigger);
      return term;
    };
    l_t += verif_term(fw, true);
    if (cfg.use_shadow) l_t += verif_term(fs, true);
    l_t += verif_term(fc, false);

    // terms through D_train (decoder gradients only)
    auto train_term = [&](Net<float>& enc) {
      Tensor<float> f = enc.forward(xt, false);
      Tensor<float> dec = g.forward(f, true);
      Tensor<float> ddec;
      double term = detail::uncorr_from_decoded(dec, sk, &ddec);
      g.backward(ddec);
      return term;
    };
    l_t += train_term(fc);
    l_t += train_term(fw);
    if (cfg.use_shadow) l_t += train_term(fs);
    check_finite(l_t, step, "trigger");

    opt_g.step(g);
    for (int64_t i = 0; i < trigger.numel(); ++i) {
      float v = trigger.data[static_cast<size_t>(i)] -
                static_cast<float>(cfg.lr_trigger) * dtrigger.data[static_cast<size_t>(i)];
      trigger.data[static_cast<size_t>(i)] = std::clamp(v, 0.0f, 1.0f);
    }
    fw.zero_grad();
    fs.zero_grad();
    fc.zero_grad();
    res.loss_trigger.push_back(l_t);
  }

  res.key = KeyTuple{d_priv.images,  std::move(trigger),    std::move(mask), std::move(sk),
                     std::move(decoder), cfg.th_w, cfg.th_v};
  return res;
}

}  // namespace encmark
