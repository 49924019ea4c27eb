#pragma once

// Encoder watermarking core: secret-key sampling, trigger masks and
// injection, the correlated / uncorrelated / embedding-match loss primitives,
// extraction of decoded keys from a suspect encoder, and verification.

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "encmark/checkpoint.hpp"
#include "encmark/data.hpp"
#include "encmark/eval.hpp"
#include "encmark/nets.hpp"

namespace encmark {

// ---------------------------------------------------------------------------
// mask + trigger

enum class MaskPlacement { BottomRight, Center, TopLeft };

struct Mask {
  Tensor<float> m;  // (H,W,C), entries in {0,1}

  double coverage() const {
    double s = 0.0;
    for (float v : m.data) s += v;
    return s / static_cast<double>(m.numel());
  }
};

// Contiguous square patch of side round(sqrt(coverage*H*W)), replicated
// across channels.
inline Mask make_mask(int64_t h, int64_t w, int64_t c, double coverage = 0.35,
                      MaskPlacement placement = MaskPlacement::BottomRight) {
  if (coverage <= 0.0 || coverage >= 1.0) throw ConfigError("mask coverage must lie in (0,1)");
  auto side = static_cast<int64_t>(std::llround(std::sqrt(coverage * static_cast<double>(h * w))));
  if (side > std::min(h, w))
    throw ConfigError("mask coverage needs a patch larger than the image side");
  if (side < 1) throw ConfigError("mask coverage rounds to an empty patch");
  int64_t top = 0, left = 0;
  switch (placement) {
    case MaskPlacement::BottomRight: top = h - side; left = w - side; break;
    case MaskPlacement::Center: top = (h - side) / 2; left = (w - side) / 2; break;
    case MaskPlacement::TopLeft: top = 0; left = 0; break;
  }
  Mask mk;
  mk.m = Tensor<float>({h, w, c});
  mk.m.fill(0.0f);
  for (int64_t y = top; y < top + side; ++y)
    for (int64_t x = left; x < left + side; ++x)
      for (int64_t ch = 0; ch < c; ++ch) mk.m.data[static_cast<size_t>((y * w + x) * c + ch)] = 1.0f;
  return mk;
}

// P(x, T) = (1-M)x + MT. With a binary mask this is an exact select, so
// pixels outside the mask are bit-identical to the input.
inline Tensor<float> apply_trigger(const Tensor<float>& x, const Tensor<float>& trigger,
                                   const Mask& mask) {
  if (!x.same_shape(trigger) || !x.same_shape(mask.m))
    throw InputError("image, trigger, and mask shapes must match");
  Tensor<float> out = x;
  for (size_t i = 0; i < out.data.size(); ++i)
    if (mask.m.data[i] != 0.0f) out.data[i] = trigger.data[i];
  return out;
}

inline Tensor<float> apply_trigger_batch(const Tensor<float>& batch, const Tensor<float>& trigger,
                                         const Mask& mask) {
  if (batch.rank() != 4) throw InputError("apply_trigger_batch expects (N,H,W,C)");
  int64_t stride = trigger.numel();
  if (batch.numel() != batch.shape[0] * stride) throw InputError("trigger shape mismatch");
  Tensor<float> out = batch;
  for (int64_t n = 0; n < batch.shape[0]; ++n)
    for (int64_t i = 0; i < stride; ++i)
      if (mask.m.data[static_cast<size_t>(i)] != 0.0f)
        out.data[static_cast<size_t>(n * stride + i)] = trigger.data[static_cast<size_t>(i)];
  return out;
}

// ---------------------------------------------------------------------------
// secret key

inline std::vector<float> sample_sk(int64_t m, uint64_t seed) {
  if (m < 8) throw InputError("secret key dimension must be at least 8");
  Rng rng = make_stream(seed, "secret-key");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(static_cast<size_t>(m));
  for (auto& x : v) x = gauss(rng);
  double nrm = 0.0;
  for (double x : v) nrm += x * x;
  nrm = std::sqrt(nrm) + kCosineEps;
  std::vector<float> out(static_cast<size_t>(m));
  for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / nrm);
  return out;
}

// ---------------------------------------------------------------------------
// loss primitives on decoded keys / feature batches (value + gradient)

namespace detail {

inline std::vector<double> cos_to_key(const Tensor<float>& decoded, const std::vector<float>& sk) {
  int64_t n = decoded.shape[0], m = decoded.shape[1];
  if (m != static_cast<int64_t>(sk.size())) throw InputError("decoded key width mismatch");
  std::vector<double> c(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) c[static_cast<size_t>(i)] = cosine_d(decoded.ptr() + i * m, sk.data(), m);
  return c;
}

// d cos(x, k) / dx for one row.
inline void cos_grad_row(const float* x, const float* k, int64_t m, double c, double scale,
                         float* out) {
  double nx = norm_d(x, m), nk = norm_d(k, m);
  double denom = nx * nk + kCosineEps;
  double inv_xx = 1.0 / (nx * nx + kCosineEps);
  for (int64_t j = 0; j < m; ++j)
    out[j] += static_cast<float>(scale * (static_cast<double>(k[j]) / denom -
                                          c * static_cast<double>(x[j]) * inv_xx));
}

// L = -mean_i cos(decoded_i, sk); gradient accumulates into ddecoded.
inline double corr_from_decoded(const Tensor<float>& decoded, const std::vector<float>& sk,
                                Tensor<float>* ddecoded) {
  int64_t n = decoded.shape[0], m = decoded.shape[1];
  std::vector<double> c = cos_to_key(decoded, sk);
  double mean = 0.0;
  for (double v : c) mean += v;
  mean /= static_cast<double>(n);
  if (ddecoded) {
    if (!ddecoded->same_shape(decoded)) {
      *ddecoded = Tensor<float>(decoded.shape);
      ddecoded->fill(0.0f);
    }
    for (int64_t i = 0; i < n; ++i)
      cos_grad_row(decoded.ptr() + i * m, sk.data(), m, c[static_cast<size_t>(i)],
                   -1.0 / static_cast<double>(n), ddecoded->ptr() + i * m);
  }
  return -mean;
}

// L = (mean_i cos(decoded_i, sk))^2; gradient accumulates into ddecoded.
inline double uncorr_from_decoded(const Tensor<float>& decoded, const std::vector<float>& sk,
                                  Tensor<float>* ddecoded) {
  int64_t n = decoded.shape[0], m = decoded.shape[1];
  std::vector<double> c = cos_to_key(decoded, sk);
  double mean = 0.0;
  for (double v : c) mean += v;
  mean /= static_cast<double>(n);
  if (ddecoded) {
    if (!ddecoded->same_shape(decoded)) {
      *ddecoded = Tensor<float>(decoded.shape);
      ddecoded->fill(0.0f);
    }
    for (int64_t i = 0; i < n; ++i)
      cos_grad_row(decoded.ptr() + i * m, sk.data(), m, c[static_cast<size_t>(i)],
                   2.0 * mean / static_cast<double>(n), ddecoded->ptr() + i * m);
  }
  return mean * mean;
}

// L = -mean_i cos(a_i, b_i); gradients accumulate into da and/or db.
inline double match_from_features(const Tensor<float>& a, const Tensor<float>& b, Tensor<float>* da,
                                  Tensor<float>* db) {
  if (a.rank() != 2 || !a.same_shape(b)) throw InputError("match loss feature width mismatch");
  int64_t n = a.shape[0], d = a.shape[1];
  double mean = 0.0;
  auto prep = [&](Tensor<float>* g) {
    if (g && !g->same_shape(a)) {
      *g = Tensor<float>(a.shape);
      g->fill(0.0f);
    }
  };
  prep(da);
  prep(db);
  for (int64_t i = 0; i < n; ++i) {
    double c = cosine_d(a.ptr() + i * d, b.ptr() + i * d, d);
    mean += c;
    if (da) cos_grad_row(a.ptr() + i * d, b.ptr() + i * d, d, c, -1.0 / static_cast<double>(n), da->ptr() + i * d);
    if (db) cos_grad_row(b.ptr() + i * d, a.ptr() + i * d, d, c, -1.0 / static_cast<double>(n), db->ptr() + i * d);
  }
  return -mean / static_cast<double>(n);
}

}  // namespace detail

// Value-level loss primitives over image batches, inference mode.
inline double corr_loss(const Tensor<float>& batch, Encoder& e, Decoder& g,
                        const std::vector<float>& sk) {
  if (batch.shape[0] == 0) throw InputError("empty batch");
  Tensor<float> decoded = g.net().forward(e.encode(batch), false);
  return detail::corr_from_decoded(decoded, sk, nullptr);
}

inline double uncorr_loss(const Tensor<float>& batch, Encoder& e, Decoder& g,
                          const std::vector<float>& sk) {
  if (batch.shape[0] == 0) throw InputError("empty batch");
  Tensor<float> decoded = g.net().forward(e.encode(batch), false);
  return detail::uncorr_from_decoded(decoded, sk, nullptr);
}

inline double match_loss(const Tensor<float>& batch, Encoder& ea, Encoder& eb) {
  if (batch.shape[0] == 0) throw InputError("empty batch");
  if (ea.output_dim() != eb.output_dim()) throw InputError("encoder output widths differ");
  Tensor<float> fa = ea.encode(batch);
  Tensor<float> fb = eb.encode(batch);
  return detail::match_from_features(fa, fb, nullptr, nullptr);
}

// ---------------------------------------------------------------------------
// key tuple

struct KeyTuple {
  Tensor<float> private_images;  // (P,H,W,C), the held-out originals x_p
  Tensor<float> trigger;         // (H,W,C), final trigger T_F
  Mask mask;
  std::vector<float> sk;  // unit norm
  Decoder decoder;
  double th_w = 0.5;
  double th_v = 0.5;

  Tensor<float> verification_images() const {
    return apply_trigger_batch(private_images, trigger, mask);
  }
};

// ---------------------------------------------------------------------------
// extraction + verification

inline std::vector<double> extract(Encoder& suspect, KeyTuple& key) {
  if (key.private_images.shape[0] == 0) throw InputError("key tuple has no verification images");
  if (suspect.output_dim() != key.decoder.spec().input_dim)
    throw InputError("suspect feature width does not match decoder input width");
  Tensor<float> dv = key.verification_images();
  Tensor<float> feats = detail::encode_all(suspect, dv);
  Tensor<float> decoded = key.decoder.net().forward(feats, false);
  return detail::cos_to_key(decoded, key.sk);
}

inline double watermark_rate(const std::vector<double>& sims, double th_w) {
  if (sims.empty()) throw InputError("no similarities");
  int64_t hits = 0;
  for (double s : sims)
    if (s > th_w) ++hits;
  return static_cast<double>(hits) / static_cast<double>(sims.size());
}

inline double watermark_rate(Encoder& suspect, KeyTuple& key, double th_w = 0.5) {
  return watermark_rate(extract(suspect, key), th_w);
}

inline WatermarkReport verify(Encoder& suspect, KeyTuple& key, double th_w = 0.5,
                              double th_v = 0.5, const std::string& suspect_id = "") {
  WatermarkReport r;
  r.similarities = extract(suspect, key);
  r.th_w = th_w;
  r.th_v = th_v;
  r.wr = watermark_rate(r.similarities, th_w);
  r.verdict = r.wr > th_v ? 1 : 0;  // strict: a tie is not ownership
  r.suspect_id = suspect_id;
  return r;
}

// ---------------------------------------------------------------------------
// key tuple directory io

inline void save_key_tuple(const KeyTuple& key, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_decoder(key.decoder, dir / "decoder.ckpt");
  auto write_blob = [&](const std::filesystem::path& p, const std::vector<int64_t>& shape,
                        const float* data, size_t count) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw InputError("cannot open for write: " + p.string());
    write_u64(os, shape.size());
    for (int64_t s : shape) write_u64(os, static_cast<uint64_t>(s));
    write_f32_blob(os, data, count);
  };
  write_blob(dir / "sk.f32", {static_cast<int64_t>(key.sk.size())}, key.sk.data(), key.sk.size());
  write_blob(dir / "trigger.f32", key.trigger.shape, key.trigger.ptr(),
             static_cast<size_t>(key.trigger.numel()));
  write_blob(dir / "mask.f32", key.mask.m.shape, key.mask.m.ptr(),
             static_cast<size_t>(key.mask.m.numel()));
  write_blob(dir / "private_images.f32", key.private_images.shape, key.private_images.ptr(),
             static_cast<size_t>(key.private_images.numel()));

  nlohmann::ordered_json man;
  man["format"] = "encmark-key-1";
  man["key_dim"] = static_cast<int64_t>(key.sk.size());
  man["image_shape"] = key.trigger.shape;
  man["private_count"] = key.private_images.shape[0];
  man["th_w"] = key.th_w;
  man["th_v"] = key.th_v;
  man["sk_fnv1a64"] = hex64(fnv1a64(key.sk.data(), key.sk.size() * sizeof(float)));
  man["trigger_fnv1a64"] =
      hex64(fnv1a64(key.trigger.ptr(), static_cast<size_t>(key.trigger.numel()) * sizeof(float)));
  man["mask_fnv1a64"] =
      hex64(fnv1a64(key.mask.m.ptr(), static_cast<size_t>(key.mask.m.numel()) * sizeof(float)));
  man["private_images_fnv1a64"] = hex64(fnv1a64(
      key.private_images.ptr(), static_cast<size_t>(key.private_images.numel()) * sizeof(float)));
  std::ofstream os(dir / "manifest.json");
  if (!os) throw InputError("cannot write key manifest");
  os << man.dump(2) << "\n";
}

inline KeyTuple load_key_tuple(const std::filesystem::path& dir) {
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw InputError("cannot open key manifest in " + dir.string());
  nlohmann::ordered_json man = nlohmann::ordered_json::parse(ms);
  if (man.at("format").get<std::string>() != "encmark-key-1")
    throw IntegrityError("unrecognized key tuple format");

  auto read_blob = [&](const std::filesystem::path& p, const char* hash_field) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw InputError("cannot open " + p.string());
    uint64_t rank = read_u64(is);
    std::vector<int64_t> shape(rank);
    for (auto& s : shape) s = static_cast<int64_t>(read_u64(is));
    Tensor<float> t(shape);
    read_f32_blob(is, t.ptr(), static_cast<size_t>(t.numel()));
    std::string got = hex64(fnv1a64(t.ptr(), static_cast<size_t>(t.numel()) * sizeof(float)));
    if (got != man.at(hash_field).get<std::string>())
      throw IntegrityError(std::string("hash mismatch (field ") + hash_field + ") in " + p.string());
    return t;
  };

  Tensor<float> skt = read_blob(dir / "sk.f32", "sk_fnv1a64");
  KeyTuple key{read_blob(dir / "private_images.f32", "private_images_fnv1a64"),
               read_blob(dir / "trigger.f32", "trigger_fnv1a64"),
               Mask{read_blob(dir / "mask.f32", "mask_fnv1a64")},
               std::vector<float>(skt.data.begin(), skt.data.end()),
               load_decoder(dir / "decoder.ckpt"),
               man.at("th_w").get<double>(),
               man.at("th_v").get<double>()};
  if (static_cast<int64_t>(key.sk.size()) != man.at("key_dim").get<int64_t>())
    throw IntegrityError("key dimension disagrees with manifest");
  if (key.private_images.shape[0] != man.at("private_count").get<int64_t>())
    throw IntegrityError("private image count disagrees with manifest");
  return key;
}

}  // namespace encmark
