#pragma once

// End-to-end desk-scale experiment chain: pretrain a clean encoder, embed the
// watermark twice (independent keys), run the stealing grid, the removal
// grid, and the statistics figures, then write a self-describing run
// directory (manifest + CSV tables + checkpoints).

#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "encmark/pipeline.hpp"
#include "encmark/removal.hpp"
#include "encmark/trials.hpp"
#include "encmark/wm.hpp"

namespace encmark {

struct Corpora {
  Dataset pretrain;     // victim pretraining pool; also same-distribution queries
  Dataset shadow;       // shadow-encoder stream
  Dataset queries;      // fresh same-distribution pool for attack queries
  Dataset ood;          // shifted-style corpus for off-distribution queries
  Dataset probe_train;  // labeled probe training split
  Dataset test;         // held-out evaluation split
  Dataset finetune;     // split used by removal finetuning
  Dataset priv;         // private verification originals
};

// Pastes random rectangles (mostly pixel noise, some solid) over a share of
// the images. Attack query pools get this treatment: occlusion-style query
// augmentation exposes how the target model reacts to patch-structured
// inputs, which plain shape scenes rarely probe.
inline void paste_random_patches(Dataset& d, uint64_t seed, double prob = 1.0) {
  int64_t n = d.images.shape[0], h = d.images.shape[1], w = d.images.shape[2],
          c = d.images.shape[3];
  int64_t smax = std::min<int64_t>(16, std::min(h, w) - 4);
  int64_t smin = std::min<int64_t>(8, smax);
  for (int64_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    if (uni(rng) >= prob) continue;
    double u = uni(rng);
    int n_patch = u < 0.3 ? 3 : (u < 0.7 ? 2 : 1);
    float* img = d.images.ptr() + i * h * w * c;
    for (int p = 0; p < n_patch; ++p) {
      int64_t pw = smin + static_cast<int64_t>(uni(rng) * static_cast<double>(smax - smin + 1));
      int64_t ph = smin + static_cast<int64_t>(uni(rng) * static_cast<double>(smax - smin + 1));
      pw = std::min(pw, w);
      ph = std::min(ph, h);
      int64_t x0 = static_cast<int64_t>(uni(rng) * static_cast<double>(w - pw + 1));
      int64_t y0 = static_cast<int64_t>(uni(rng) * static_cast<double>(h - ph + 1));
      bool textured = uni(rng) < 0.7;
      double base[4] = {0, 0, 0, 0};
      for (int64_t ch = 0; ch < c; ++ch) base[ch % 4] = uni(rng);
      for (int64_t y = y0; y < y0 + ph; ++y)
        for (int64_t x = x0; x < x0 + pw; ++x)
          for (int64_t ch = 0; ch < c; ++ch) {
            double v = textured ? uni(rng) : base[ch % 4];
            img[(y * w + x) * c + ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
    }
  }
}

// All slices come from one deterministic corpus per style; offsets are
// multiples of the class count, so every slice stays label-balanced and
// pairwise disjoint.
inline Corpora build_corpora(const ExperimentConfig& cfg) {
  SeedRegistry seeds = seed_everything(cfg.seed);
  int64_t hw = cfg.image_size, ch = cfg.channels;
  int64_t n_std = cfg.n_pretrain + cfg.n_shadow + cfg.n_queries + cfg.n_probe_train +
                  cfg.n_test + cfg.n_finetune + cfg.n_priv;
  Dataset std_corpus =
      make_shape_corpus(n_std, hw, hw, ch, CorpusStyle::Standard, seeds.seed_for("corpus-standard"));
  Corpora c;
  int64_t off = 0;
  auto take = [&](int64_t n) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), off);
    off += n;
    return std_corpus.subset(idx);
  };
  c.pretrain = take(cfg.n_pretrain);
  c.shadow = take(cfg.n_shadow);
  c.queries = take(cfg.n_queries);
  paste_random_patches(c.queries, seeds.seed_for("query-patches"));
  c.probe_train = take(cfg.n_probe_train);
  c.test = take(cfg.n_test);
  c.finetune = take(cfg.n_finetune);
  c.priv = take(cfg.n_priv);
  c.ood = make_shape_corpus(cfg.n_ood, hw, hw, ch, CorpusStyle::Shifted,
                            seeds.seed_for("corpus-shifted"));
  return c;
}

inline const Dataset& resolve_dataset(const Corpora& c, const std::string& id) {
  if (id == "pretrain") return c.pretrain;
  if (id == "shadow") return c.shadow;
  if (id == "queries") return c.queries;
  if (id == "ood") return c.ood;
  if (id == "probe-train") return c.probe_train;
  if (id == "test") return c.test;
  if (id == "finetune") return c.finetune;
  if (id == "priv") return c.priv;
  throw ConfigError("unknown dataset id: " + id);
}

// Desk-scale defaults: a small contrastive victim, one shadow spec, and the
// three stealing analogs (same-distribution wider, shifted-distribution,
// widest) plus an absolute-error variant for the similarity-kind comparison.
inline ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.victim.family = EncoderFamily::ResnetSmall;
  c.victim.height = c.image_size;
  c.victim.width = c.image_size;
  c.victim.channels = c.channels;
  c.victim.feature_dim = 64;

  c.ssl.algorithm = SSLAlgorithm::Simclr;
  c.ssl.temperature = 0.5;
  c.ssl.epochs = 30;
  c.ssl.batch_size = 32;
  c.ssl.lr = 0.05;

  c.embedding.shadow_spec.family = EncoderFamily::ResnetWide;
  c.embedding.shadow_spec.height = c.image_size;
  c.embedding.shadow_spec.width = c.image_size;
  c.embedding.shadow_spec.channels = c.channels;
  c.embedding.shadow_spec.feature_dim = 64;
  c.embedding.steps = 300;
  c.embedding.lr_trigger = 0.01;
  c.embedding.lr_decoder = 0.02;
  c.embedding.batch_verif = c.n_priv;

  auto attack = [&](const std::string& name, EncoderFamily fam, int64_t width,
                    const std::string& queries, SimilarityKind kind) {
    StealConfig a;
    a.name = name;
    a.surrogate_spec.family = fam;
    a.surrogate_spec.height = c.image_size;
    a.surrogate_spec.width = c.image_size;
    a.surrogate_spec.channels = c.channels;
    a.surrogate_spec.feature_dim = width;
    a.query_dataset = queries;
    a.kind = kind;
    a.epochs = 16;
    a.batch_size = 32;
    a.lr = 0.1;
    a.seed = 101;
    return a;
  };
  c.attacks = {
      attack("steal-1", EncoderFamily::ResnetSmall, 128, "queries", SimilarityKind::Cosine),
      attack("steal-2", EncoderFamily::ResnetSmall, 128, "ood", SimilarityKind::Cosine),
      attack("steal-3", EncoderFamily::ResnetWide, 256, "pretrain", SimilarityKind::Cosine),
      attack("steal-mae", EncoderFamily::ResnetSmall, 128, "queries", SimilarityKind::Mae),
  };
  return c;
}

// A minimal profile for fast functional checks (not meant to satisfy the
// learning-quality properties).
inline ExperimentConfig tiny_config() {
  ExperimentConfig c = desk_config();
  c.scale = "tiny";
  c.image_size = 16;
  c.n_pretrain = 60;
  c.n_shadow = 30;
  c.n_queries = 30;
  c.n_ood = 30;
  c.n_probe_train = 60;
  c.n_test = 30;
  c.n_finetune = 30;
  c.n_priv = 10;
  c.victim.height = c.victim.width = 16;
  c.victim.feature_dim = 16;
  c.ssl.epochs = 1;
  c.embedding.steps = 5;
  c.embedding.batch_verif = 10;
  c.embedding.key_dim = 16;
  c.embedding.shadow_spec.height = c.embedding.shadow_spec.width = 16;
  c.embedding.shadow_spec.feature_dim = 16;
  for (auto& a : c.attacks) {
    a.surrogate_spec.height = a.surrogate_spec.width = 16;
    a.surrogate_spec.feature_dim = a.surrogate_spec.family == EncoderFamily::ResnetWide ? 32 : 16;
    a.epochs = 1;
  }
  c.probe.epochs = 3;
  c.prune_rates = {0.5};
  c.finetune_epochs = 1;
  c.trial_seeds = 1;
  c.trial_epochs = 1;
  return c;
}

inline ExperimentConfig config_for_scale(const std::string& scale) {
  if (scale == "desk") return desk_config();
  if (scale == "tiny") return tiny_config();
  throw ConfigError("unknown scale: " + scale);
}

struct RemovalRow {
  std::string encoder;
  double r = 0.0;
  int finetuned = 0;
  double wr = 0.0;
  double da = 0.0;
};

struct ReproduceResult {
  ExperimentConfig config;
  Corpora corpora;
  Encoder clean;
  EmbedResult emb_a;
  EmbedResult emb_b;
  std::vector<AttackCell> attack_cells;

  double da_clean = 0.0;
  double da_watermarked = 0.0;
  double fidelity_cos = 0.0;  // mean cos(clean, watermarked) on held-out images
  double wr_clean = 0.0;
  double wr_watermarked = 0.0;
  double wr_shadow = 0.0;
  double wr_cross[2][2] = {{0, 0}, {0, 0}};  // [key a/b][encoder a/b]
  std::vector<RemovalRow> removal_rows;
  TrialTable trials;

  nlohmann::json manifest;
};

namespace detail {

inline double mean_pairwise_cosine(Encoder& a, Encoder& b, const Tensor<float>& images) {
  Tensor<float> fa = encode_all(a, images);
  Tensor<float> fb = encode_all(b, images);
  int64_t n = fa.shape[0], d = fa.shape[1];
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += cosine_d(fa.ptr() + i * d, fb.ptr() + i * d, d);
  return s / static_cast<double>(n);
}

inline uint64_t file_fnv(const std::filesystem::path& p) {
  std::string bytes = read_text(p);
  return fnv1a64(bytes);
}

}  // namespace detail

inline ReproduceResult reproduce(const ExperimentConfig& cfg_in,
                                 const std::filesystem::path& run_dir) {
  cfg_in.validate();
  std::filesystem::create_directories(run_dir);

  ReproduceResult res;
  res.config = cfg_in;
  const ExperimentConfig& c = res.config;
  SeedRegistry seeds = seed_everything(c.seed);

  res.corpora = build_corpora(c);
  DatasetResolver resolve = [&res](const std::string& id) -> const Dataset& {
    return resolve_dataset(res.corpora, id);
  };

  // --- clean victim ---------------------------------------------------------
  PretrainResult pre = pretrain(res.corpora.pretrain, c.victim, c.ssl, seeds.seed_for("pretrain"));
  res.clean = std::move(pre.encoder);

  // --- two independent embeddings -------------------------------------------
  EmbedConfig ec_a = c.embedding;
  ec_a.seed = seeds.seed_for("embed-a");
  EmbedConfig ec_b = c.embedding;
  ec_b.seed = seeds.seed_for("embed-b");
  res.emb_a = embed(res.clean, res.corpora.pretrain, res.corpora.shadow, res.corpora.priv, ec_a);
  res.emb_b = embed(res.clean, res.corpora.pretrain, res.corpora.shadow, res.corpora.priv, ec_b);

  // --- effectiveness + fidelity ---------------------------------------------
  res.wr_clean = watermark_rate(res.clean, res.emb_a.key, res.emb_a.key.th_w);
  res.wr_watermarked = watermark_rate(res.emb_a.watermarked, res.emb_a.key, res.emb_a.key.th_w);
  res.wr_shadow = watermark_rate(res.emb_a.shadow, res.emb_a.key, res.emb_a.key.th_w);
  res.wr_cross[0][0] = res.wr_watermarked;
  res.wr_cross[0][1] = watermark_rate(res.emb_b.watermarked, res.emb_a.key, res.emb_a.key.th_w);
  res.wr_cross[1][0] = watermark_rate(res.emb_a.watermarked, res.emb_b.key, res.emb_b.key.th_w);
  res.wr_cross[1][1] = watermark_rate(res.emb_b.watermarked, res.emb_b.key, res.emb_b.key.th_w);

  Classifier probe_clean =
      train_probe(res.clean, res.corpora.probe_train, c.probe, seeds.seed_for("probe"));
  res.da_clean = downstream_accuracy(res.clean, probe_clean, res.corpora.test);
  Classifier probe_wmk = train_probe(res.emb_a.watermarked, res.corpora.probe_train, c.probe,
                                     seeds.seed_for("probe"));
  res.da_watermarked = downstream_accuracy(res.emb_a.watermarked, probe_wmk, res.corpora.test);
  res.fidelity_cos =
      detail::mean_pairwise_cosine(res.clean, res.emb_a.watermarked, res.corpora.test.images);

  // --- stealing grid ---------------------------------------------------------
  VictimHandle victim = make_victim(res.emb_a.watermarked);
  std::vector<ProbeTask> tasks{{"shapes", &res.corpora.probe_train, &res.corpora.test, c.probe,
                                seeds.seed_for("probe")}};
  res.attack_cells = run_attack_grid(victim, c.attacks, resolve, tasks);

  // --- removal grid ----------------------------------------------------------
  const Encoder* surrogate1 = nullptr;
  for (size_t i = 0; i < res.attack_cells.size(); ++i)
    if (res.attack_cells[i].error.empty() && res.attack_cells[i].config.kind == SimilarityKind::Cosine) {
      surrogate1 = &res.attack_cells[i].result->surrogate;
      break;
    }
  std::vector<std::pair<std::string, const Encoder*>> removal_targets;
  removal_targets.emplace_back("watermarked", &res.emb_a.watermarked);
  if (surrogate1) removal_targets.emplace_back("surrogate-1", surrogate1);
  for (auto& [nm, encp] : removal_targets) {
    for (double r : c.prune_rates) {
      Encoder pruned = prune(*encp, r);
      Classifier pp = train_probe(pruned, res.corpora.probe_train, c.probe,
                                  seeds.seed_for("probe"));
      res.removal_rows.push_back({nm, r, 0, watermark_rate(pruned, res.emb_a.key),
                                  downstream_accuracy(pruned, pp, res.corpora.test)});
      Encoder tuned = finetune_under_victim(pruned, victim, res.corpora.finetune,
                                            c.finetune_epochs, c.finetune_lr, c.finetune_batch,
                                            seeds.seed_for("finetune"));
      Classifier tp = train_probe(tuned, res.corpora.probe_train, c.probe,
                                  seeds.seed_for("probe"));
      res.removal_rows.push_back({nm, r, 1, watermark_rate(tuned, res.emb_a.key),
                                  downstream_accuracy(tuned, tp, res.corpora.test)});
    }
  }

  // --- statistics figures -----------------------------------------------------
  Tensor<float> dv = res.emb_a.key.verification_images();
  Tensor<float> sk_row({1, static_cast<int64_t>(res.emb_a.key.sk.size())});
  std::copy(res.emb_a.key.sk.begin(), res.emb_a.key.sk.end(), sk_row.data.begin());
  Histogram fig7_match =
      similarity_histogram(res.emb_a.watermarked, res.emb_a.key.decoder, dv, sk_row);
  int64_t n_refs = 20;
  Tensor<float> refs({n_refs, static_cast<int64_t>(res.emb_a.key.sk.size())});
  for (int64_t i = 0; i < n_refs; ++i) {
    std::vector<float> v = sample_sk(static_cast<int64_t>(res.emb_a.key.sk.size()),
                                     derive_seed(seeds.seed_for("fig7-refs"), static_cast<uint64_t>(i)));
    std::copy(v.begin(), v.end(), refs.data.begin() + i * refs.shape[1]);
  }
  Histogram fig7_rand = similarity_histogram(res.emb_a.watermarked, res.emb_a.key.decoder, dv, refs);

  std::vector<StealConfig> trial_attacks;
  for (const auto& a : c.attacks) {
    if (a.kind != SimilarityKind::Cosine) continue;
    StealConfig t = a;
    t.epochs = c.trial_epochs;
    trial_attacks.push_back(t);
  }
  res.trials = model_level_trial(victim, res.emb_a.key, trial_attacks, resolve, c.trial_seeds);

  // --- tables -----------------------------------------------------------------
  auto jnum = [](double v) { return nlohmann::json(v); };
  TableData table2{{"encoder", "wr"},
                   {{"clean", jnum(res.wr_clean)},
                    {"watermarked", jnum(res.wr_watermarked)},
                    {"shadow", jnum(res.wr_shadow)}}};
  TableData table4{{"key", "encoder", "wr"},
                   {{"key-a", "watermarked-a", jnum(res.wr_cross[0][0])},
                    {"key-a", "watermarked-b", jnum(res.wr_cross[0][1])},
                    {"key-b", "watermarked-a", jnum(res.wr_cross[1][0])},
                    {"key-b", "watermarked-b", jnum(res.wr_cross[1][1])}}};

  TableData table6{{"encoder", "wr", "da"}, {}};
  table6.rows.push_back({"watermarked", jnum(res.wr_watermarked), jnum(res.da_watermarked)});
  TableData attacks_table{
      {"name", "config_hash", "similarity", "final_loss", "final_cosine", "da", "error"}, {}};
  for (auto& cell : res.attack_cells) {
    std::string ahash = hex64(fnv1a64(steal_config_to_json(cell.config).dump()));
    double da = cell.da_per_task.count("shapes") ? cell.da_per_task.at("shapes") : 0.0;
    if (cell.error.empty()) {
      double wr = watermark_rate(cell.result->surrogate, res.emb_a.key);
      table6.rows.push_back({cell.config.name, jnum(wr), jnum(da)});
      attacks_table.rows.push_back({cell.config.name, ahash,
                                    similarity_name(cell.config.kind),
                                    jnum(cell.result->final_loss), jnum(cell.final_cosine),
                                    jnum(da), ""});
    } else {
      attacks_table.rows.push_back({cell.config.name, ahash, similarity_name(cell.config.kind),
                                    jnum(0.0), jnum(0.0), jnum(0.0), cell.error});
    }
  }

  TableData table7{{"encoder", "r", "finetuned", "wr", "da"}, {}};
  for (const auto& row : res.removal_rows)
    table7.rows.push_back(
        {row.encoder, jnum(row.r), nlohmann::json(row.finetuned), jnum(row.wr), jnum(row.da)});

  TableData fig7{{"bin_lo", "bin_hi", "count_matching", "count_random"}, {}};
  for (size_t b = 0; b < fig7_match.counts.size(); ++b) {
    double lo = fig7_match.lo + fig7_match.bin_width * static_cast<double>(b);
    fig7.rows.push_back({jnum(lo), jnum(lo + fig7_match.bin_width),
                         nlohmann::json(fig7_match.counts[b]),
                         nlohmann::json(fig7_rand.counts[b])});
  }

  TableData fig8{{"attack", "trial", "wr", "verdict"}, {}};
  {
    std::map<std::string, int64_t> trial_no;
    for (const auto& row : res.trials.rows)
      fig8.rows.push_back({row.attack, nlohmann::json(trial_no[row.attack]++),
                           jnum(row.wr), nlohmann::json(row.verdict)});
  }

  // --- artifacts ---------------------------------------------------------------
  save_config(c, run_dir / "config.json");
  save_encoder(res.clean, run_dir / "clean.ckpt", seeds.seed_for("pretrain"));
  save_encoder(res.emb_a.watermarked, run_dir / "watermarked.ckpt", ec_a.seed);
  save_encoder(res.emb_a.shadow, run_dir / "shadow.ckpt", ec_a.seed);
  save_encoder(res.emb_b.watermarked, run_dir / "watermarked-b.ckpt", ec_b.seed);
  save_key_tuple(res.emb_a.key, run_dir / "key");
  save_key_tuple(res.emb_b.key, run_dir / "key-b");
  for (auto& cell : res.attack_cells)
    if (cell.error.empty())
      save_encoder(cell.result->surrogate, run_dir / ("surrogate-" + cell.config.name + ".ckpt"),
                   cell.config.seed);

  nlohmann::json manifest;
  manifest["format"] = "encmark-run-1";
  manifest["kind"] = "reproduce";
  manifest["config"] = config_to_json(c);
  manifest["config_hash"] = config_hash(c);
  manifest["seed"] = c.seed;
  manifest["numbers"]["da_clean"] = res.da_clean;
  manifest["numbers"]["da_watermarked"] = res.da_watermarked;
  manifest["numbers"]["fidelity_cos"] = res.fidelity_cos;
  manifest["numbers"]["wr_clean"] = res.wr_clean;
  manifest["numbers"]["wr_watermarked"] = res.wr_watermarked;
  manifest["numbers"]["wr_shadow"] = res.wr_shadow;
  manifest["tables"]["table2"] = table_to_json(table2);
  manifest["tables"]["table4"] = table_to_json(table4);
  manifest["tables"]["table6"] = table_to_json(table6);
  manifest["tables"]["table7"] = table_to_json(table7);
  manifest["tables"]["attacks"] = table_to_json(attacks_table);
  manifest["tables"]["fig7"] = table_to_json(fig7);
  manifest["tables"]["fig8"] = table_to_json(fig8);
  nlohmann::json artifacts = nlohmann::json::object();
  for (const char* f : {"clean.ckpt", "watermarked.ckpt", "shadow.ckpt", "watermarked-b.ckpt"})
    artifacts[f] = hex64(detail::file_fnv(run_dir / f));
  manifest["artifacts"] = artifacts;

  write_text(run_dir / "manifest.json", manifest.dump(2) + "\n");
  write_tables_from_manifest(manifest, run_dir);
  res.manifest = std::move(manifest);
  return res;
}

}  // namespace encmark
