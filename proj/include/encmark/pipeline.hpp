#pragma once

// Experiment plumbing: one structured config per experiment, named seed
// streams, self-describing run directories, and CSV/manifest writers whose
// output is byte-stable given the same numbers.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "encmark/checkpoint.hpp"
#include "encmark/embed.hpp"
#include "encmark/eval.hpp"
#include "encmark/ssl.hpp"
#include "encmark/steal.hpp"

namespace encmark {

// ---------------------------------------------------------------------------
// named seed streams

struct SeedRegistry {
  uint64_t global = 0;

  uint64_t seed_for(std::string_view name) const { return derive_seed(global, name); }
  Rng stream(std::string_view name) const { return Rng(seed_for(name)); }
};

inline SeedRegistry seed_everything(uint64_t global_seed) { return SeedRegistry{global_seed}; }

// ---------------------------------------------------------------------------
// experiment config

struct ExperimentConfig {
  std::string scale = "desk";
  uint64_t seed = 17;
  std::string output_dir = "runs";
  std::string data_dir;  // optional root for external binary image batches

  int64_t image_size = 24;
  int64_t channels = 3;
  int64_t n_pretrain = 510;
  int64_t n_shadow = 250;
  int64_t n_queries = 510;
  int64_t n_ood = 380;
  int64_t n_probe_train = 500;
  int64_t n_test = 500;
  int64_t n_finetune = 250;
  int64_t n_priv = 50;

  EncoderSpec victim;
  SSLConfig ssl;
  EmbedConfig embedding;
  ProbeConfig probe;
  std::vector<StealConfig> attacks;

  std::vector<double> prune_rates = {0.1, 0.3, 0.5};
  int64_t finetune_epochs = 20;
  double finetune_lr = 0.01;
  int64_t finetune_batch = 32;
  int64_t trial_seeds = 2;   // robustness trial repetitions
  int64_t trial_epochs = 4;  // reduced attack budget inside trials

  void validate() const {
    victim.validate();
    ssl.validate();
    embedding.validate();
    probe.validate();
    for (const auto& a : attacks) a.validate();
    if (image_size < 8) throw ConfigError("image size too small");
    if (n_pretrain <= 0 || n_shadow <= 0 || n_queries <= 0 || n_probe_train <= 0 ||
        n_test <= 0 || n_priv <= 0)
      throw ConfigError("corpus slice sizes must be positive");
    for (double r : prune_rates)
      if (r < 0 || r >= 1) throw ConfigError("prune rates must lie in [0,1)");
    if (finetune_epochs < 0 || finetune_lr <= 0) throw ConfigError("bad finetune settings");
    if (trial_seeds < 1 || trial_epochs < 1) throw ConfigError("bad trial settings");
  }
};

inline nlohmann::json steal_config_to_json(const StealConfig& a) {
  nlohmann::json j;
  j["name"] = a.name;
  j["surrogate"] = spec_to_json(a.surrogate_spec);
  j["query_dataset"] = a.query_dataset;
  j["similarity"] = similarity_name(a.kind);
  j["epochs"] = a.epochs;
  j["batch_size"] = a.batch_size;
  j["lr"] = a.lr;
  j["seed"] = a.seed;
  return j;
}

inline StealConfig steal_config_from_json(const nlohmann::json& j) {
  StealConfig a;
  a.name = j.at("name").get<std::string>();
  a.surrogate_spec = encoder_spec_from_json(j.at("surrogate"));
  a.query_dataset = j.at("query_dataset").get<std::string>();
  a.kind = similarity_from_name(j.at("similarity").get<std::string>());
  a.epochs = j.at("epochs").get<int64_t>();
  a.batch_size = j.at("batch_size").get<int64_t>();
  a.lr = j.at("lr").get<double>();
  a.seed = j.at("seed").get<uint64_t>();
  return a;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["scale"] = c.scale;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["data_dir"] = c.data_dir;
  j["image_size"] = c.image_size;
  j["channels"] = c.channels;
  j["n_pretrain"] = c.n_pretrain;
  j["n_shadow"] = c.n_shadow;
  j["n_queries"] = c.n_queries;
  j["n_ood"] = c.n_ood;
  j["n_probe_train"] = c.n_probe_train;
  j["n_test"] = c.n_test;
  j["n_finetune"] = c.n_finetune;
  j["n_priv"] = c.n_priv;
  j["victim"] = spec_to_json(c.victim);
  j["ssl"]["algorithm"] = ssl_algorithm_name(c.ssl.algorithm);
  j["ssl"]["temperature"] = c.ssl.temperature;
  j["ssl"]["queue_size"] = c.ssl.queue_size;
  j["ssl"]["momentum"] = c.ssl.momentum;
  j["ssl"]["byol_decay"] = c.ssl.byol_decay;
  j["ssl"]["epochs"] = c.ssl.epochs;
  j["ssl"]["batch_size"] = c.ssl.batch_size;
  j["ssl"]["lr"] = c.ssl.lr;
  j["ssl"]["augmentation"]["crop_scale_min"] = c.ssl.augmentation.crop_scale_min;
  j["ssl"]["augmentation"]["crop_scale_max"] = c.ssl.augmentation.crop_scale_max;
  j["ssl"]["augmentation"]["flip_prob"] = c.ssl.augmentation.flip_prob;
  j["ssl"]["augmentation"]["brightness"] = c.ssl.augmentation.brightness;
  j["ssl"]["augmentation"]["contrast"] = c.ssl.augmentation.contrast;
  j["ssl"]["augmentation"]["saturation"] = c.ssl.augmentation.saturation;
  j["ssl"]["augmentation"]["blur_prob"] = c.ssl.augmentation.blur_prob;
  j["embedding"]["steps"] = c.embedding.steps;
  j["embedding"]["batch_train"] = c.embedding.batch_train;
  j["embedding"]["batch_shadow"] = c.embedding.batch_shadow;
  j["embedding"]["batch_verif"] = c.embedding.batch_verif;
  j["embedding"]["lr_w"] = c.embedding.lr_w;
  j["embedding"]["lr_s"] = c.embedding.lr_s;
  j["embedding"]["lr_trigger"] = c.embedding.lr_trigger;
  j["embedding"]["lr_decoder"] = c.embedding.lr_decoder;
  j["embedding"]["th_w"] = c.embedding.th_w;
  j["embedding"]["th_v"] = c.embedding.th_v;
  j["embedding"]["shadow"] = spec_to_json(c.embedding.shadow_spec);
  j["embedding"]["seed"] = c.embedding.seed;
  j["embedding"]["key_dim"] = c.embedding.key_dim;
  j["embedding"]["trigger_coverage"] = c.embedding.trigger_coverage;
  j["embedding"]["use_shadow"] = c.embedding.use_shadow;
  j["probe"]["hidden_width"] = c.probe.hidden_width;
  j["probe"]["epochs"] = c.probe.epochs;
  j["probe"]["lr"] = c.probe.lr;
  j["probe"]["batch_size"] = c.probe.batch_size;
  j["attacks"] = nlohmann::json::array();
  for (const auto& a : c.attacks) j["attacks"].push_back(steal_config_to_json(a));
  j["prune_rates"] = c.prune_rates;
  j["finetune_epochs"] = c.finetune_epochs;
  j["finetune_lr"] = c.finetune_lr;
  j["finetune_batch"] = c.finetune_batch;
  j["trial_seeds"] = c.trial_seeds;
  j["trial_epochs"] = c.trial_epochs;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.scale = j.value("scale", c.scale);
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.data_dir = j.value("data_dir", c.data_dir);
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.n_pretrain = j.value("n_pretrain", c.n_pretrain);
  c.n_shadow = j.value("n_shadow", c.n_shadow);
  c.n_queries = j.value("n_queries", c.n_queries);
  c.n_ood = j.value("n_ood", c.n_ood);
  c.n_probe_train = j.value("n_probe_train", c.n_probe_train);
  c.n_test = j.value("n_test", c.n_test);
  c.n_finetune = j.value("n_finetune", c.n_finetune);
  c.n_priv = j.value("n_priv", c.n_priv);
  if (j.contains("victim")) c.victim = encoder_spec_from_json(j.at("victim"));
  if (j.contains("ssl")) {
    const auto& s = j.at("ssl");
    c.ssl.algorithm = ssl_algorithm_from_name(s.value("algorithm", std::string("simclr")));
    c.ssl.temperature = s.value("temperature", c.ssl.temperature);
    c.ssl.queue_size = s.value("queue_size", c.ssl.queue_size);
    c.ssl.momentum = s.value("momentum", c.ssl.momentum);
    c.ssl.byol_decay = s.value("byol_decay", c.ssl.byol_decay);
    c.ssl.epochs = s.value("epochs", c.ssl.epochs);
    c.ssl.batch_size = s.value("batch_size", c.ssl.batch_size);
    c.ssl.lr = s.value("lr", c.ssl.lr);
    if (s.contains("augmentation")) {
      const auto& a = s.at("augmentation");
      auto& p = c.ssl.augmentation;
      p.crop_scale_min = a.value("crop_scale_min", p.crop_scale_min);
      p.crop_scale_max = a.value("crop_scale_max", p.crop_scale_max);
      p.flip_prob = a.value("flip_prob", p.flip_prob);
      p.brightness = a.value("brightness", p.brightness);
      p.contrast = a.value("contrast", p.contrast);
      p.saturation = a.value("saturation", p.saturation);
      p.blur_prob = a.value("blur_prob", p.blur_prob);
    }
  }
  if (j.contains("embedding")) {
    const auto& e = j.at("embedding");
    c.embedding.steps = e.value("steps", c.embedding.steps);
    c.embedding.batch_train = e.value("batch_train", c.embedding.batch_train);
    c.embedding.batch_shadow = e.value("batch_shadow", c.embedding.batch_shadow);
    c.embedding.batch_verif = e.value("batch_verif", c.embedding.batch_verif);
    c.embedding.lr_w = e.value("lr_w", c.embedding.lr_w);
    c.embedding.lr_s = e.value("lr_s", c.embedding.lr_s);
    c.embedding.lr_trigger = e.value("lr_trigger", c.embedding.lr_trigger);
    c.embedding.lr_decoder = e.value("lr_decoder", c.embedding.lr_decoder);
    c.embedding.th_w = e.value("th_w", c.embedding.th_w);
    c.embedding.th_v = e.value("th_v", c.embedding.th_v);
    if (e.contains("shadow")) c.embedding.shadow_spec = encoder_spec_from_json(e.at("shadow"));
    c.embedding.seed = e.value("seed", c.embedding.seed);
    c.embedding.key_dim = e.value("key_dim", c.embedding.key_dim);
    c.embedding.trigger_coverage = e.value("trigger_coverage", c.embedding.trigger_coverage);
    c.embedding.use_shadow = e.value("use_shadow", c.embedding.use_shadow);
  }
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    c.probe.hidden_width = p.value("hidden_width", c.probe.hidden_width);
    c.probe.epochs = p.value("epochs", c.probe.epochs);
    c.probe.lr = p.value("lr", c.probe.lr);
    c.probe.batch_size = p.value("batch_size", c.probe.batch_size);
  }
  if (j.contains("attacks")) {
    c.attacks.clear();
    for (const auto& a : j.at("attacks")) c.attacks.push_back(steal_config_from_json(a));
  }
  if (j.contains("prune_rates")) c.prune_rates = j.at("prune_rates").get<std::vector<double>>();
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
  c.finetune_batch = j.value("finetune_batch", c.finetune_batch);
  c.trial_seeds = j.value("trial_seeds", c.trial_seeds);
  c.trial_epochs = j.value("trial_epochs", c.trial_epochs);
  return c;
}

// Hash of the canonical (key-sorted) JSON form; insensitive to key order.
inline std::string config_hash(const ExperimentConfig& c) {
  return hex64(fnv1a64(config_to_json(c).dump()));
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open config: " + path.string());
  return config_from_json(nlohmann::json::parse(is));
}

inline void save_config(const ExperimentConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write config: " + path.string());
  os << config_to_json(c).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// table data + CSV emission

struct TableData {
  std::vector<std::string> columns;
  std::vector<std::vector<nlohmann::json>> rows;  // string or number cells
};

inline std::string format_cell(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<int64_t>());
  if (v.is_number_unsigned()) return std::to_string(v.get<uint64_t>());
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v.get<double>());
  return buf;
}

inline std::string table_to_csv(const TableData& t) {
  std::string out;
  for (size_t i = 0; i < t.columns.size(); ++i) {
    if (i) out += ',';
    out += t.columns[i];
  }
  out += '\n';
  for (const auto& row : t.rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += format_cell(row[i]);
    }
    out += '\n';
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline nlohmann::json table_to_json(const TableData& t) {
  nlohmann::json j;
  j["columns"] = t.columns;
  j["rows"] = t.rows;
  return j;
}

inline TableData table_from_json(const nlohmann::json& j) {
  TableData t;
  t.columns = j.at("columns").get<std::vector<std::string>>();
  for (const auto& r : j.at("rows")) t.rows.push_back(r.get<std::vector<nlohmann::json>>());
  return t;
}

// ---------------------------------------------------------------------------
// run directories

// Append-only run directories: name carries a timestamp plus a sequence
// suffix, contents remain timestamp-free so reruns are comparable.
inline std::filesystem::path create_run_dir(const std::filesystem::path& root,
                                            const std::string& kind) {
  std::filesystem::create_directories(root);
  std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::gmtime(&now));
  for (int i = 0;; ++i) {
    std::filesystem::path dir =
        root / (kind + "-" + stamp + (i == 0 ? "" : "-" + std::to_string(i)));
    if (!std::filesystem::exists(dir)) {
      std::filesystem::create_directories(dir);
      return dir;
    }
  }
}

// Writes table CSVs named from the manifest's "tables" object.
inline void write_tables_from_manifest(const nlohmann::json& manifest,
                                       const std::filesystem::path& dir) {
  for (const auto& [name, tj] : manifest.at("tables").items())
    write_text(dir / (name + ".csv"), table_to_csv(table_from_json(tj)));
}

// Regenerates every CSV of a run directory from its manifest alone.
inline void report(const std::filesystem::path& run_dir) {
  nlohmann::json manifest = nlohmann::json::parse(read_text(run_dir / "manifest.json"));
  write_tables_from_manifest(manifest, run_dir);
}

}  // namespace encmark
