#pragma once

// Single-file checkpoint container: magic, u64 manifest length, JSON manifest,
// then a flat little-endian float32 blob in manifest-declared order. The blob
// hash is validated on load, so a truncated or bit-flipped file fails loudly.

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "encmark/nets.hpp"

namespace encmark {

using json = nlohmann::ordered_json;

constexpr char kCkptMagic[8] = {'E', 'N', 'C', 'M', 'K', 'P', 'T', '1'};

inline json spec_to_json(const EncoderSpec& s) {
  json j;
  j["family"] = family_name(s.family);
  j["height"] = s.height;
  j["width"] = s.width;
  j["channels"] = s.channels;
  j["feature_dim"] = s.feature_dim;
  if (s.adapter_dim) j["adapter_dim"] = *s.adapter_dim;
  return j;
}

inline EncoderSpec encoder_spec_from_json(const json& j) {
  EncoderSpec s;
  s.family = family_from_name(j.at("family").get<std::string>());
  s.height = j.at("height").get<int64_t>();
  s.width = j.at("width").get<int64_t>();
  s.channels = j.at("channels").get<int64_t>();
  s.feature_dim = j.at("feature_dim").get<int64_t>();
  if (j.contains("adapter_dim")) s.adapter_dim = j.at("adapter_dim").get<int64_t>();
  return s;
}

inline json spec_to_json(const DecoderSpec& s) {
  json j;
  j["input_dim"] = s.input_dim;
  j["layer_widths"] = s.layer_widths;
  j["activation"] = s.activation == Activation::Relu ? "relu" : "tanh";
  return j;
}

inline DecoderSpec decoder_spec_from_json(const json& j) {
  DecoderSpec s;
  s.input_dim = j.at("input_dim").get<int64_t>();
  s.layer_widths = j.at("layer_widths").get<std::vector<int64_t>>();
  s.activation = j.at("activation").get<std::string>() == "tanh" ? Activation::Tanh : Activation::Relu;
  return s;
}

namespace detail {

inline json manifest_for(Net<float>& net, const std::string& kind, const json& spec,
                         uint64_t seed, const json& provenance) {
  ParamVector<float> pv = flatten(net);
  json params = json::array();
  for (const auto& e : pv.entries) {
    json p;
    p["name"] = e.name;
    p["shape"] = e.shape;
    p["offset"] = e.offset;
    p["count"] = e.count;
    p["trainable"] = e.trainable;
    p["buffer"] = e.is_buffer;
    params.push_back(p);
  }
  json m;
  m["format"] = "encmark-ckpt-1";
  m["kind"] = kind;
  m["spec"] = spec;
  m["seed"] = seed;
  m["provenance"] = provenance;
  m["params"] = params;
  m["value_count"] = static_cast<int64_t>(pv.values.size());
  m["blob_fnv1a64"] = hex64(fnv1a64(pv.values.data(), pv.values.size() * sizeof(float)));
  return m;
}

inline void write_container(const std::filesystem::path& path, const json& manifest,
                            const std::vector<float>& blob) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open for write: " + path.string());
  std::string m = manifest.dump(2);
  os.write(kCkptMagic, 8);
  write_u64(os, m.size());
  os.write(m.data(), static_cast<std::streamsize>(m.size()));
  write_f32_blob(os, blob.data(), blob.size());
  if (!os) throw InputError("write failed: " + path.string());
}

inline std::pair<json, std::vector<float>> read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw IntegrityError("bad checkpoint magic in " + path.string());
  uint64_t mlen = read_u64(is);
  std::string mtxt(mlen, '\0');
  is.read(mtxt.data(), static_cast<std::streamsize>(mlen));
  if (static_cast<uint64_t>(is.gcount()) != mlen) throw IntegrityError("manifest truncated");
  json manifest = json::parse(mtxt);
  auto count = manifest.at("value_count").get<int64_t>();
  std::vector<float> blob(count);
  read_f32_blob(is, blob.data(), blob.size());
  std::string want = manifest.at("blob_fnv1a64").get<std::string>();
  std::string got = hex64(fnv1a64(blob.data(), blob.size() * sizeof(float)));
  if (want != got) throw IntegrityError("blob hash mismatch (field blob_fnv1a64) in " + path.string());
  return {std::move(manifest), std::move(blob)};
}

inline void load_into(Net<float>& net, const json& manifest, std::vector<float> blob) {
  ParamVector<float> pv;
  pv.values = std::move(blob);
  for (const auto& p : manifest.at("params")) {
    ParamVectorEntry<float> e;
    e.name = p.at("name").get<std::string>();
    e.shape = p.at("shape").get<std::vector<int64_t>>();
    e.offset = p.at("offset").get<int64_t>();
    e.count = p.at("count").get<int64_t>();
    e.trainable = p.at("trainable").get<bool>();
    e.is_buffer = p.at("buffer").get<bool>();
    pv.entries.push_back(std::move(e));
  }
  unflatten(net, pv);
  // restore trainability flags (frozen batchnorm survives the round-trip)
  size_t i = 0;
  for (auto* p : net.params()) {
    if (i < pv.entries.size() && pv.entries[i].name == p->name) p->trainable = pv.entries[i].trainable;
    ++i;
  }
}

}  // namespace detail

inline void save_encoder(const Encoder& enc, const std::filesystem::path& path, uint64_t seed = 0,
                         const json& provenance = json::object()) {
  auto& net = const_cast<Encoder&>(enc).net();
  json manifest = detail::manifest_for(net, "encoder", spec_to_json(enc.spec()), seed, provenance);
  detail::write_container(path, manifest, flatten(net).values);
}

inline Encoder load_encoder(const std::filesystem::path& path) {
  auto [manifest, blob] = detail::read_container(path);
  if (manifest.at("kind").get<std::string>() != "encoder")
    throw IntegrityError("checkpoint is not an encoder: " + path.string());
  EncoderSpec spec = encoder_spec_from_json(manifest.at("spec"));
  Encoder enc = build_encoder(spec, 0);
  detail::load_into(enc.net(), manifest, std::move(blob));
  return enc;
}

inline void save_decoder(const Decoder& dec, const std::filesystem::path& path, uint64_t seed = 0,
                         const json& provenance = json::object()) {
  auto& net = const_cast<Decoder&>(dec).net();
  json manifest = detail::manifest_for(net, "decoder", spec_to_json(dec.spec()), seed, provenance);
  detail::write_container(path, manifest, flatten(net).values);
}

inline Decoder load_decoder(const std::filesystem::path& path) {
  auto [manifest, blob] = detail::read_container(path);
  if (manifest.at("kind").get<std::string>() != "decoder")
    throw IntegrityError("checkpoint is not a decoder: " + path.string());
  DecoderSpec spec = decoder_spec_from_json(manifest.at("spec"));
  Decoder dec = build_decoder(spec, 0);
  detail::load_into(dec.net(), manifest, std::move(blob));
  return dec;
}

// Value-identical copy (parameters, buffers, trainability).
inline Encoder clone_encoder(const Encoder& enc) {
  Encoder out = build_encoder(enc.spec(), 0);
  auto& src = const_cast<Encoder&>(enc).net();
  ParamVector<float> pv = flatten(src);
  unflatten(out.net(), pv);
  auto sp = src.params();
  auto dp = out.net().params();
  for (size_t i = 0; i < sp.size(); ++i) dp[i]->trainable = sp[i]->trainable;
  return out;
}

}  // namespace encmark
