// Command-line front end: pretrain encoders, embed/verify watermarks, run
// attacks and removal schemes, and reproduce the full experiment grid.
//
// Exit codes: 0 success, 1 failed precondition or runtime fault (diagnostic on
// stderr), 2 usage error (unknown subcommand or flag).

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "encmark/encmark.hpp"

namespace fs = std::filesystem;
using namespace encmark;

namespace {

struct CommonOpts {
  std::string scale = "desk";
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> data_dir;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--scale", c.scale, "config preset: desk or tiny");
  cmd->add_option("--config", c.config_path, "experiment config JSON (overrides the preset)");
  cmd->add_option("--seed", c.seed, "override the global seed");
  cmd->add_option("--out", c.out_dir, "output root directory");
  cmd->add_option("--data-dir", c.data_dir, "root for external binary image batches");
}

// Precedence, lowest to highest: scale preset < config file < environment
// (data dir only) < explicit flags.
ExperimentConfig effective_config(const CommonOpts& c) {
  ExperimentConfig cfg = config_for_scale(c.scale);
  if (!c.config_path.empty()) cfg = load_config(c.config_path);
  if (const char* env = std::getenv("ENCMARK_DATA_DIR"); env && *env) cfg.data_dir = env;
  if (c.seed) cfg.seed = *c.seed;
  if (c.out_dir) cfg.output_dir = *c.out_dir;
  if (c.data_dir) cfg.data_dir = *c.data_dir;
  return cfg;
}

// Dataset ids name corpus slices; "file:<path>" loads a binary image batch
// relative to the configured data directory.
Dataset named_dataset(const ExperimentConfig& cfg, const Corpora& corpora, const std::string& id) {
  if (id.rfind("file:", 0) == 0) {
    fs::path p = id.substr(5);
    if (p.is_relative() && !cfg.data_dir.empty()) p = fs::path(cfg.data_dir) / p;
    return load_binary_batch(p);
  }
  return resolve_dataset(corpora, id);
}

int run(int argc, char** argv) {
  CLI::App app{"encoder watermark workbench"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  CommonOpts common;

  // pretrain
  auto* c_pre = app.add_subcommand("pretrain", "pretrain a clean encoder on the corpus");
  CommonOpts pre_opts;
  add_common(c_pre, pre_opts);
  std::string pre_alg;
  std::string pre_out = "clean.ckpt";
  c_pre->add_option("--algorithm", pre_alg, "simclr, moco-v2 or byol");
  c_pre->add_option("--out-ckpt", pre_out, "checkpoint path for the trained encoder");

  // embed
  auto* c_emb = app.add_subcommand("embed", "embed a watermark into a clean encoder");
  CommonOpts emb_opts;
  add_common(c_emb, emb_opts);
  std::string emb_clean, emb_dir = "embedded";
  c_emb->add_option("--clean", emb_clean, "clean encoder checkpoint")->required();
  c_emb->add_option("--out-dir", emb_dir, "directory for watermarked/shadow/key artifacts");

  // steal
  auto* c_steal = app.add_subcommand("steal", "train a surrogate against a victim encoder");
  CommonOpts steal_opts;
  add_common(c_steal, steal_opts);
  std::string st_victim, st_out = "surrogate.ckpt", st_data = "queries";
  std::string st_arch = "resnet-small", st_kind = "cosine";
  int64_t st_width = 128, st_epochs = 16, st_batch = 32;
  double st_lr = 0.1;
  uint64_t st_seed = 101;
  c_steal->add_option("--victim", st_victim, "victim encoder checkpoint")->required();
  c_steal->add_option("--out-ckpt", st_out, "surrogate checkpoint path");
  c_steal->add_option("--dataset", st_data, "query dataset id or file:<path>");
  c_steal->add_option("--arch", st_arch, "surrogate family");
  c_steal->add_option("--width", st_width, "surrogate feature width");
  c_steal->add_option("--similarity", st_kind, "cosine, mse or mae");
  c_steal->add_option("--epochs", st_epochs);
  c_steal->add_option("--batch", st_batch);
  c_steal->add_option("--lr", st_lr);
  c_steal->add_option("--attack-seed", st_seed);

  // prune
  auto* c_prune = app.add_subcommand("prune", "zero the smallest conv weights of an encoder");
  std::string pr_in, pr_out = "pruned.ckpt";
  double pr_rate = 0.5;
  c_prune->add_option("--encoder", pr_in, "encoder checkpoint")->required();
  c_prune->add_option("--rate", pr_rate, "fraction of conv weights to zero");
  c_prune->add_option("--out-ckpt", pr_out);

  // finetune
  auto* c_ft = app.add_subcommand("finetune", "finetune an encoder to match a victim");
  CommonOpts ft_opts;
  add_common(c_ft, ft_opts);
  std::string ft_in, ft_victim, ft_out = "finetuned.ckpt", ft_data = "finetune";
  std::optional<int64_t> ft_epochs;
  std::optional<double> ft_lr;
  c_ft->add_option("--encoder", ft_in, "encoder checkpoint to finetune")->required();
  c_ft->add_option("--victim", ft_victim, "victim encoder checkpoint")->required();
  c_ft->add_option("--dataset", ft_data, "finetuning dataset id or file:<path>");
  c_ft->add_option("--epochs", ft_epochs);
  c_ft->add_option("--lr", ft_lr);
  c_ft->add_option("--out-ckpt", ft_out);

  // probe
  auto* c_probe = app.add_subcommand("probe", "linear-probe downstream accuracy of an encoder");
  CommonOpts probe_opts;
  add_common(c_probe, probe_opts);
  std::string pb_in;
  c_probe->add_option("--encoder", pb_in, "encoder checkpoint")->required();

  // verify
  auto* c_ver = app.add_subcommand("verify", "check a suspect encoder against a key tuple");
  std::string v_suspect, v_key;
  double v_thw = 0.5, v_thv = 0.5;
  c_ver->add_option("--suspect", v_suspect, "suspect encoder checkpoint")->required();
  c_ver->add_option("--key", v_key, "key tuple directory")->required();
  c_ver->add_option("--th-w", v_thw, "per-sample similarity threshold");
  c_ver->add_option("--th-v", v_thv, "watermark-rate threshold for the verdict");

  // reproduce
  auto* c_rep = app.add_subcommand("reproduce", "run the full experiment grid");
  CommonOpts rep_opts;
  add_common(c_rep, rep_opts);

  // report
  auto* c_report = app.add_subcommand("report", "regenerate CSV tables from a run manifest");
  std::string rp_run;
  c_report->add_option("--run", rp_run, "run directory containing manifest.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (c_pre->parsed()) {
    ExperimentConfig cfg = effective_config(pre_opts);
    if (!pre_alg.empty()) cfg.ssl.algorithm = ssl_algorithm_from_name(pre_alg);
    Corpora corpora = build_corpora(cfg);
    SeedRegistry seeds = seed_everything(cfg.seed);
    PretrainResult r = pretrain(corpora.pretrain, cfg.victim, cfg.ssl, seeds.seed_for("pretrain"));
    save_encoder(r.encoder, pre_out, cfg.seed, "pretrained:" + ssl_algorithm_name(cfg.ssl.algorithm));
    std::cout << "saved " << pre_out << " (first-epoch loss " << r.epoch_loss.front()
              << ", last " << r.epoch_loss.back() << ")\n";
    return 0;
  }

  if (c_emb->parsed()) {
    ExperimentConfig cfg = effective_config(emb_opts);
    Corpora corpora = build_corpora(cfg);
    SeedRegistry seeds = seed_everything(cfg.seed);
    Encoder clean = load_encoder(emb_clean);
    EmbedConfig ec = cfg.embedding;
    ec.seed = seeds.seed_for("embed-a");
    EmbedResult r = embed(clean, corpora.pretrain, corpora.shadow, corpora.priv, ec);
    fs::create_directories(emb_dir);
    save_encoder(r.watermarked, fs::path(emb_dir) / "watermarked.ckpt", cfg.seed, "watermarked");
    save_encoder(r.shadow, fs::path(emb_dir) / "shadow.ckpt", cfg.seed, "shadow");
    save_key_tuple(r.key, fs::path(emb_dir) / "key");
    double wr = watermark_rate(r.watermarked, r.key);
    std::cout << "saved " << emb_dir << " (wr=" << wr << ")\n";
    return 0;
  }

  if (c_steal->parsed()) {
    ExperimentConfig cfg = effective_config(steal_opts);
    Corpora corpora = build_corpora(cfg);
    Encoder victim_enc = load_encoder(st_victim);
    VictimHandle victim = make_victim(victim_enc);
    StealConfig sc;
    sc.surrogate_spec = cfg.victim;
    sc.surrogate_spec.family = family_from_name(st_arch);
    sc.surrogate_spec.feature_dim = st_width;
    sc.query_dataset = st_data;
    sc.kind = similarity_from_name(st_kind);
    sc.epochs = st_epochs;
    sc.batch_size = st_batch;
    sc.lr = st_lr;
    sc.seed = st_seed;
    sc.validate();
    Dataset queries = named_dataset(cfg, corpora, st_data);
    StealResult r = steal(victim, queries, sc);
    save_encoder(r.surrogate, st_out, sc.seed, "surrogate:" + st_arch);
    std::cout << "saved " << st_out << " (final train cosine " << r.epoch_cosine.back() << ")\n";
    return 0;
  }

  if (c_prune->parsed()) {
    Encoder enc = load_encoder(pr_in);
    Encoder pruned = prune(enc, pr_rate);
    save_encoder(pruned, pr_out, 0, "pruned");
    std::cout << "saved " << pr_out << "\n";
    return 0;
  }

  if (c_ft->parsed()) {
    ExperimentConfig cfg = effective_config(ft_opts);
    Corpora corpora = build_corpora(cfg);
    Encoder enc = load_encoder(ft_in);
    Encoder victim_enc = load_encoder(ft_victim);
    VictimHandle victim = make_victim(victim_enc);
    Dataset data = named_dataset(cfg, corpora, ft_data);
    Encoder tuned = finetune_under_victim(enc, victim, data,
                                          ft_epochs.value_or(cfg.finetune_epochs),
                                          ft_lr.value_or(cfg.finetune_lr), cfg.finetune_batch,
                                          cfg.seed);
    save_encoder(tuned, ft_out, cfg.seed, "finetuned");
    std::cout << "saved " << ft_out << "\n";
    return 0;
  }

  if (c_probe->parsed()) {
    ExperimentConfig cfg = effective_config(probe_opts);
    Corpora corpora = build_corpora(cfg);
    SeedRegistry seeds = seed_everything(cfg.seed);
    Encoder enc = load_encoder(pb_in);
    Classifier probe = train_probe(enc, corpora.probe_train, cfg.probe, seeds.seed_for("probe"));
    double da = downstream_accuracy(enc, probe, corpora.test);
    std::cout << "da=" << da << "\n";
    return 0;
  }

  if (c_ver->parsed()) {
    Encoder suspect = load_encoder(v_suspect);
    KeyTuple key = load_key_tuple(v_key);
    WatermarkReport r = verify(suspect, key, v_thw, v_thv, v_suspect);
    std::cout << "wr=" << r.wr << "\nverdict=" << r.verdict << "\n";
    return 0;
  }

  if (c_rep->parsed()) {
    ExperimentConfig cfg = effective_config(rep_opts);
    fs::path run_dir = create_run_dir(cfg.output_dir, "reproduce-" + cfg.scale);
    ReproduceResult r = reproduce(cfg, run_dir);
    std::cout << "run " << run_dir.string() << "\n"
              << "wr_watermarked=" << r.wr_watermarked << " wr_clean=" << r.wr_clean << "\n";
    return 0;
  }

  if (c_report->parsed()) {
    report(rp_run);
    std::cout << "tables written to " << rp_run << "\n";
    return 0;
  }

  return 2;  // unreachable: require_subcommand(1)
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
