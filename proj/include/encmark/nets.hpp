#pragma once

// Encoder/decoder/probe architectures and their builders. The three encoder
// families are desk-scale stand-ins with increasing capacity: a plain 4-block
// conv net and two shallow residual nets of growing width/depth.

#include <cmath>
#include <optional>
#include <string>

#include "encmark/layers.hpp"

namespace encmark {

enum class EncoderFamily { TinyCnn, ResnetSmall, ResnetWide };

inline const char* family_name(EncoderFamily f) {
  switch (f) {
    case EncoderFamily::TinyCnn: return "tiny-cnn";
    case EncoderFamily::ResnetSmall: return "resnet-small";
    case EncoderFamily::ResnetWide: return "resnet-wide";
  }
  return "?";
}

inline EncoderFamily family_from_name(const std::string& s) {
  if (s == "tiny-cnn") return EncoderFamily::TinyCnn;
  if (s == "resnet-small") return EncoderFamily::ResnetSmall;
  if (s == "resnet-wide") return EncoderFamily::ResnetWide;
  throw ConfigError("unknown encoder family: " + s);
}

struct EncoderSpec {
  EncoderFamily family = EncoderFamily::TinyCnn;
  int64_t height = 24, width = 24, channels = 3;
  int64_t feature_dim = 64;                 // native output width
  std::optional<int64_t> adapter_dim;       // linear adapter to this width when set

  int64_t output_dim() const { return adapter_dim ? *adapter_dim : feature_dim; }

  void validate() const {
    if (height <= 0 || width <= 0 || channels <= 0) throw ConfigError("encoder input shape must be positive");
    if (feature_dim < 8) throw ConfigError("feature_dim must be >= 8");
    if (adapter_dim && *adapter_dim <= 0) throw ConfigError("adapter_dim must be positive");
    if (family == EncoderFamily::TinyCnn && feature_dim % 8 != 0)
      throw ConfigError("tiny-cnn feature_dim must be a multiple of 8");
    if (family != EncoderFamily::TinyCnn && feature_dim % 4 != 0)
      throw ConfigError("resnet feature_dim must be a multiple of 4");
  }

  bool operator==(const EncoderSpec&) const = default;
};

enum class Activation { Relu, Tanh };

struct DecoderSpec {
  int64_t input_dim = 64;
  std::vector<int64_t> layer_widths;  // last entry is the key dimension m
  Activation activation = Activation::Relu;

  // Default stack [d, round(sqrt(d*m)), m]: a geometric taper from feature
  // width down to key width; at d=512, m=128 this is exactly [512, 256, 128].
  static DecoderSpec defaults(int64_t input_dim, int64_t key_dim) {
    DecoderSpec s;
    s.input_dim = input_dim;
    int64_t mid = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(input_dim) * key_dim)));
    s.layer_widths = {input_dim, mid, key_dim};
    return s;
  }

  int64_t key_dim() const { return layer_widths.empty() ? 0 : layer_widths.back(); }

  void validate() const {
    if (input_dim <= 0) throw ConfigError("decoder input_dim must be positive");
    if (layer_widths.empty()) throw ConfigError("decoder needs at least one layer");
    for (int64_t w : layer_widths)
      if (w <= 0) throw ConfigError("decoder widths must be positive");
  }
};

// ---------------------------------------------------------------------------
// Encoder: spec + net. Inference (encode) always runs in eval mode; training
// code drives net() directly with train=true.

class Encoder {
 public:
  Encoder() = default;
  Encoder(EncoderSpec spec, Net<float> net) : spec_(spec), net_(std::move(net)) {}

  const EncoderSpec& spec() const { return spec_; }
  Net<float>& net() { return net_; }
  const Net<float>& net() const { return net_; }
  int64_t output_dim() const { return spec_.output_dim(); }

  Tensor<float> encode(const Tensor<float>& batch) {
    check_batch(batch);
    Tensor<float> f = net_.forward(batch, /*train=*/false);
    if (!f.all_finite()) throw NumericError("encoder produced non-finite features");
    return f;
  }

  void check_batch(const Tensor<float>& batch) const {
    if (batch.rank() != 4 || batch.dim(1) != spec_.height || batch.dim(2) != spec_.width ||
        batch.dim(3) != spec_.channels)
      throw InputError("batch shape does not match encoder input shape");
  }

 private:
  EncoderSpec spec_;
  Net<float> net_;
};

namespace detail {

inline void add_conv_block(Net<float>& net, const std::string& name, int64_t cin, int64_t cout,
                           Rng& rng, bool pool) {
  net.add(std::make_unique<Conv2D<float>>(name, cin, cout, 3, rng));
  net.add(std::make_unique<BatchNorm2D<float>>(name + ".bn", cout));
  net.add(std::make_unique<ReLU<float>>());
  if (pool) net.add(std::make_unique<MaxPool2<float>>());
}

}  // namespace detail

inline Encoder build_encoder(const EncoderSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng = make_stream(seed, "encoder-init");
  Net<float> net;
  const int64_t d = spec.feature_dim;
  switch (spec.family) {
    case EncoderFamily::TinyCnn: {
      int64_t c = d / 8;
      detail::add_conv_block(net, "block1", spec.channels, c, rng, true);
      detail::add_conv_block(net, "block2", c, 2 * c, rng, true);
      detail::add_conv_block(net, "block3", 2 * c, 4 * c, rng, true);
      detail::add_conv_block(net, "block4", 4 * c, 8 * c, rng, false);
      net.add(std::make_unique<GlobalAvgPool<float>>());
      break;
    }
    case EncoderFamily::ResnetSmall: {
      int64_t c = d / 2;
      detail::add_conv_block(net, "stem", spec.channels, c, rng, true);
      net.add(std::make_unique<ResidualBlock<float>>("res1", c, c, rng));
      net.add(std::make_unique<MaxPool2<float>>());
      net.add(std::make_unique<ResidualBlock<float>>("res2", c, d, rng));
      net.add(std::make_unique<GlobalAvgPool<float>>());
      break;
    }
    case EncoderFamily::ResnetWide: {
      int64_t c = d / 4;
      detail::add_conv_block(net, "stem", spec.channels, c, rng, true);
      net.add(std::make_unique<ResidualBlock<float>>("res1", c, c, rng));
      net.add(std::make_unique<MaxPool2<float>>());
      net.add(std::make_unique<ResidualBlock<float>>("res2", c, 2 * c, rng));
      net.add(std::make_unique<MaxPool2<float>>());
      net.add(std::make_unique<ResidualBlock<float>>("res3", 2 * c, d, rng));
      net.add(std::make_unique<GlobalAvgPool<float>>());
      break;
    }
  }
  if (spec.adapter_dim)
    net.add(std::make_unique<Dense<float>>("adapter", d, *spec.adapter_dim, rng));
  return Encoder(spec, std::move(net));
}

inline Tensor<float> encode(Encoder& enc, const Tensor<float>& batch) { return enc.encode(batch); }

// Marks normalization affine parameters non-trainable and stops running-stat
// updates. No-op for nets without normalization layers.
inline void freeze_batchnorm(Encoder& enc) { enc.net().freeze_norm(); }

// ---------------------------------------------------------------------------
// Decoder: MLP over feature vectors, last layer linear.

class Decoder {
 public:
  Decoder() = default;
  Decoder(DecoderSpec spec, Net<float> net) : spec_(spec), net_(std::move(net)) {}

  const DecoderSpec& spec() const { return spec_; }
  Net<float>& net() { return net_; }
  int64_t key_dim() const { return spec_.key_dim(); }

  Tensor<float> decode(const Tensor<float>& features) {
    if (features.rank() != 2 || features.dim(1) != spec_.input_dim)
      throw InputError("decoder: feature width " + std::to_string(features.rank() == 2 ? features.dim(1) : -1) +
                       " does not match input width " + std::to_string(spec_.input_dim));
    return net_.forward(features, /*train=*/false);
  }

 private:
  DecoderSpec spec_;
  Net<float> net_;
};

inline Decoder build_decoder(const DecoderSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng = make_stream(seed, "decoder-init");
  Net<float> net;
  int64_t in = spec.input_dim;
  for (size_t i = 0; i < spec.layer_widths.size(); ++i) {
    int64_t out = spec.layer_widths[i];
    net.add(std::make_unique<Dense<float>>("fc" + std::to_string(i + 1), in, out, rng));
    if (i + 1 < spec.layer_widths.size()) net.add(std::make_unique<ReLU<float>>());
    in = out;
  }
  return Decoder(spec, std::move(net));
}

inline Tensor<float> decode(Decoder& dec, const Tensor<float>& features) { return dec.decode(features); }

// ---------------------------------------------------------------------------
// Projection heads and probes are plain MLP nets.

// 2-layer MLP head: d -> d -> d/2 (shared shape across SSL algorithms).
inline Net<float> build_projection_head(int64_t feature_dim, uint64_t seed) {
  Rng rng = make_stream(seed, "projection-head-init");
  Net<float> net;
  net.add(std::make_unique<Dense<float>>("proj1", feature_dim, feature_dim, rng));
  net.add(std::make_unique<ReLU<float>>());
  net.add(std::make_unique<Dense<float>>("proj2", feature_dim, feature_dim / 2, rng));
  return net;
}

// BYOL predictor over projection space.
inline Net<float> build_predictor(int64_t proj_dim, uint64_t seed) {
  Rng rng = make_stream(seed, "predictor-init");
  Net<float> net;
  net.add(std::make_unique<Dense<float>>("pred1", proj_dim, proj_dim, rng));
  net.add(std::make_unique<ReLU<float>>());
  net.add(std::make_unique<Dense<float>>("pred2", proj_dim, proj_dim, rng));
  return net;
}

}  // namespace encmark
