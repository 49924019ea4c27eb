// Plumbing: seed streams, config serialization and hashing, checkpoint and
// key-tuple containers, CSV emission, run directories, corpus construction,
// and the end-to-end run at the minimal profile.

#include <gtest/gtest.h>
#include <sys/types.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "encmark/encmark.hpp"

namespace fs = std::filesystem;
using namespace encmark;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() /
                 ("encmark-test-" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

template <typename E, typename F>
void expect_throws_with(F&& fn, const std::string& substr) {
  try {
    fn();
    FAIL() << "expected an exception mentioning \"" << substr << "\"";
  } catch (const E& e) {
    EXPECT_NE(std::string(e.what()).find(substr), std::string::npos)
        << "actual message: " << e.what();
  }
}

EncoderSpec spec16(EncoderFamily fam = EncoderFamily::ResnetSmall) {
  EncoderSpec s;
  s.family = fam;
  s.height = s.width = 16;
  s.channels = 3;
  s.feature_dim = 16;
  return s;
}

KeyTuple small_key(uint64_t seed, int64_t m = 16, int64_t n_priv = 6) {
  Dataset priv = make_shape_corpus(n_priv, 16, 16, 3, CorpusStyle::Standard, seed);
  KeyTuple key;
  key.private_images = priv.images;
  key.trigger = Tensor<float>({16, 16, 3});
  Rng rng(derive_seed(seed, "trigger"));
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  for (float& v : key.trigger.data) v = uni(rng);
  key.mask = make_mask(16, 16, 3, 0.35);
  key.sk = sample_sk(m, derive_seed(seed, "sk"));
  key.decoder = build_decoder(DecoderSpec::defaults(16, m), derive_seed(seed, "decoder"));
  return key;
}

uint64_t row_hash(const Tensor<float>& images, int64_t i) {
  int64_t stride = images.numel() / images.shape[0];
  return fnv1a64(images.ptr() + i * stride, static_cast<size_t>(stride) * sizeof(float));
}

}  // namespace

// ---------------------------------------------------------------------------
// seed streams

TEST(Seeds, NamedStreamsAreStableAndMutuallyIndependent) {
  SeedRegistry reg = seed_everything(17);
  EXPECT_EQ(reg.seed_for("pretrain"), reg.seed_for("pretrain"));
  EXPECT_NE(reg.seed_for("pretrain"), reg.seed_for("embed-a"));
  EXPECT_NE(reg.seed_for("embed-a"), reg.seed_for("embed-b"));

  Rng a = reg.stream("pretrain");
  Rng b = reg.stream("embed-a");
  EXPECT_NE(a(), b());

  SeedRegistry other = seed_everything(18);
  EXPECT_NE(reg.seed_for("pretrain"), other.seed_for("pretrain"));
}

// ---------------------------------------------------------------------------
// experiment config

TEST(Config, JsonFileRoundTripPreservesEverySetting) {
  fs::path dir = fresh_dir("config-roundtrip");
  ExperimentConfig c = desk_config();
  c.scale = "custom";
  c.seed = 99;
  c.n_priv = 40;
  c.embedding.lr_trigger = 0.015;
  c.attacks[1].epochs = 7;
  c.prune_rates = {0.2, 0.6};

  save_config(c, dir / "config.json");
  ExperimentConfig back = load_config(dir / "config.json");
  EXPECT_EQ(config_to_json(back).dump(), config_to_json(c).dump());
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, HashIgnoresJsonKeyOrder) {
  fs::path dir = fresh_dir("config-keyorder");
  nlohmann::json j = config_to_json(desk_config());

  // Same settings, top-level keys written in reverse order.
  std::vector<std::pair<std::string, nlohmann::json>> kv;
  for (auto& [k, v] : j.items()) kv.emplace_back(k, v);
  nlohmann::ordered_json reversed;
  for (auto it = kv.rbegin(); it != kv.rend(); ++it) reversed[it->first] = it->second;

  write_text(dir / "a.json", j.dump(2));
  write_text(dir / "b.json", reversed.dump(2));
  ASSERT_NE(read_text(dir / "a.json"), read_text(dir / "b.json"));

  EXPECT_EQ(config_hash(load_config(dir / "a.json")), config_hash(load_config(dir / "b.json")));
}

TEST(Config, HashSeparatesDifferentSettings) {
  ExperimentConfig a = desk_config();
  ExperimentConfig b = desk_config();
  b.seed += 1;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, ValidateCatchesBadSettings) {
  ExperimentConfig c = tiny_config();
  c.prune_rates = {1.0};
  EXPECT_THROW(c.validate(), ConfigError);

  c = tiny_config();
  c.image_size = 4;
  EXPECT_THROW(c.validate(), ConfigError);

  EXPECT_THROW(config_for_scale("galactic"), ConfigError);
  EXPECT_EQ(config_for_scale("tiny").scale, "tiny");
  EXPECT_EQ(config_for_scale("desk").scale, "desk");
}

// ---------------------------------------------------------------------------
// checkpoints

TEST(Checkpoint, EncoderRoundTripIsBitExactIncludingBuffersAndFreezes) {
  fs::path dir = fresh_dir("ckpt-encoder");
  Encoder enc = build_encoder(spec16(), 21);
  // Move the normalization statistics off their init, then freeze them, so the
  // round trip must preserve buffers and trainability flags, not just weights.
  Dataset d = make_shape_corpus(8, 16, 16, 3, CorpusStyle::Standard, 2);
  enc.net().forward(d.images, /*train=*/true);
  freeze_batchnorm(enc);

  save_encoder(enc, dir / "enc.ckpt", /*seed=*/21);
  Encoder back = load_encoder(dir / "enc.ckpt");

  EXPECT_EQ(back.spec(), enc.spec());
  EXPECT_EQ(flatten(back.net()).values, flatten(enc.net()).values);
  auto pa = enc.net().params();
  auto pb = back.net().params();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pb[i]->trainable, pa[i]->trainable);
}

TEST(Checkpoint, DecoderRoundTripIsBitExact) {
  fs::path dir = fresh_dir("ckpt-decoder");
  Decoder dec = build_decoder(DecoderSpec::defaults(16, 8), 23);
  save_decoder(dec, dir / "dec.ckpt");
  Decoder back = load_decoder(dir / "dec.ckpt");
  EXPECT_EQ(flatten(back.net()).values, flatten(dec.net()).values);
  EXPECT_EQ(back.spec().layer_widths, dec.spec().layer_widths);
}

TEST(Checkpoint, TruncatedFileFailsLoudly) {
  fs::path dir = fresh_dir("ckpt-truncated");
  Encoder enc = build_encoder(spec16(), 25);
  save_encoder(enc, dir / "enc.ckpt");

  std::string bytes = read_text(dir / "enc.ckpt");
  write_text(dir / "short.ckpt", bytes.substr(0, bytes.size() - 64));
  expect_throws_with<IntegrityError>([&] { load_encoder(dir / "short.ckpt"); }, "blob truncated");
}

TEST(Checkpoint, CorruptedBlobFailsNamingTheHashField) {
  fs::path dir = fresh_dir("ckpt-corrupt");
  Encoder enc = build_encoder(spec16(), 27);
  save_encoder(enc, dir / "enc.ckpt");

  std::string bytes = read_text(dir / "enc.ckpt");
  bytes.back() = static_cast<char>(bytes.back() ^ 0x40);  // flip a payload bit
  write_text(dir / "bad.ckpt", bytes);
  expect_throws_with<IntegrityError>([&] { load_encoder(dir / "bad.ckpt"); }, "blob_fnv1a64");
}

TEST(Checkpoint, KindMismatchAndBadMagicAreRejected) {
  fs::path dir = fresh_dir("ckpt-kind");
  Decoder dec = build_decoder(DecoderSpec::defaults(16, 8), 29);
  save_decoder(dec, dir / "dec.ckpt");
  EXPECT_THROW(load_encoder(dir / "dec.ckpt"), IntegrityError);

  write_text(dir / "junk.ckpt", "definitely not a checkpoint");
  EXPECT_THROW(load_encoder(dir / "junk.ckpt"), IntegrityError);
}

// ---------------------------------------------------------------------------
// key-tuple container

TEST(KeyTupleIo, DirectoryRoundTripIsBitExact) {
  fs::path dir = fresh_dir("key-roundtrip");
  KeyTuple key = small_key(31);
  save_key_tuple(key, dir / "key");
  KeyTuple back = load_key_tuple(dir / "key");

  EXPECT_EQ(back.sk, key.sk);
  EXPECT_EQ(back.trigger.data, key.trigger.data);
  EXPECT_EQ(back.mask.m.data, key.mask.m.data);
  EXPECT_EQ(back.private_images.data, key.private_images.data);
  EXPECT_EQ(flatten(back.decoder.net()).values, flatten(key.decoder.net()).values);
  EXPECT_DOUBLE_EQ(back.th_w, key.th_w);
  EXPECT_DOUBLE_EQ(back.th_v, key.th_v);

  // Identical evidence: extraction through the reloaded key matches exactly.
  Encoder suspect = build_encoder(spec16(), 33);
  EXPECT_EQ(extract(suspect, back), extract(suspect, key));
}

TEST(KeyTupleIo, CorruptedComponentFailsNamingItsField) {
  fs::path dir = fresh_dir("key-corrupt");
  KeyTuple key = small_key(35);
  save_key_tuple(key, dir / "key");

  std::string bytes = read_text(dir / "key" / "trigger.f32");
  bytes.back() = static_cast<char>(bytes.back() ^ 0x40);
  write_text(dir / "key" / "trigger.f32", bytes);
  expect_throws_with<IntegrityError>([&] { load_key_tuple(dir / "key"); }, "trigger_fnv1a64");
}

// ---------------------------------------------------------------------------
// CSV emission

TEST(Tables, CsvFormattingIsByteStable) {
  TableData t;
  t.columns = {"encoder", "r", "wr"};
  t.rows.push_back({"watermarked", nlohmann::json(1), nlohmann::json(0.25)});
  t.rows.push_back({"surrogate-1", nlohmann::json(0), nlohmann::json(1.0)});
  EXPECT_EQ(table_to_csv(t),
            "encoder,r,wr\n"
            "watermarked,1,0.250000\n"
            "surrogate-1,0,1.000000\n");

  TableData back = table_from_json(table_to_json(t));
  EXPECT_EQ(table_to_csv(back), table_to_csv(t));
}

// ---------------------------------------------------------------------------
// run directories

TEST(RunDirs, CreatedDirectoriesAreUniqueTimestampedAndAppendOnly) {
  fs::path root = fresh_dir("runs");
  fs::path a = create_run_dir(root, "reproduce-tiny");
  fs::path b = create_run_dir(root, "reproduce-tiny");
  EXPECT_NE(a, b);
  EXPECT_TRUE(fs::exists(a));
  EXPECT_TRUE(fs::exists(b));
  EXPECT_EQ(a.parent_path(), root);

  // Name: kind, a 8+6 digit UTC stamp, optional collision counter.
  std::string name = a.filename().string();
  ASSERT_EQ(name.rfind("reproduce-tiny-", 0), 0u);
  std::string stamp = name.substr(std::string("reproduce-tiny-").size());
  ASSERT_GE(stamp.size(), 15u);
  EXPECT_EQ(stamp[8], '-');
  for (size_t i : {0u, 1u, 2u, 3u, 4u, 5u, 6u, 7u, 9u, 10u, 11u, 12u, 13u, 14u})
    EXPECT_TRUE(std::isdigit(static_cast<unsigned char>(stamp[i]))) << name;

  // Creating more runs never deletes earlier ones.
  fs::path c = create_run_dir(root, "reproduce-tiny");
  EXPECT_TRUE(fs::exists(a));
  EXPECT_TRUE(fs::exists(b));
  EXPECT_TRUE(fs::exists(c));
}

// ---------------------------------------------------------------------------
// corpus construction

TEST(Corpus, DeterministicPrefixStableAndLabelCycling) {
  Dataset small = make_shape_corpus(20, 16, 16, 3, CorpusStyle::Standard, 7);
  Dataset big = make_shape_corpus(50, 16, 16, 3, CorpusStyle::Standard, 7);
  for (int64_t i = 0; i < 20; ++i) {
    EXPECT_EQ(row_hash(big.images, i), row_hash(small.images, i)) << "row " << i;
    EXPECT_EQ(small.labels[static_cast<size_t>(i)], static_cast<int>(i % 10));
  }

  Dataset again = make_shape_corpus(20, 16, 16, 3, CorpusStyle::Standard, 7);
  EXPECT_EQ(again.images.data, small.images.data);

  Dataset shifted = make_shape_corpus(20, 16, 16, 3, CorpusStyle::Shifted, 7);
  EXPECT_NE(shifted.images.data, small.images.data);
  EXPECT_THROW(make_shape_corpus(0, 16, 16, 3, CorpusStyle::Standard, 7), InputError);
}

TEST(Corpus, BinaryBatchReaderEnforcesWholeRecords) {
  fs::path dir = fresh_dir("binary-batch");
  constexpr int64_t kRecord = 1 + 3 * 32 * 32;

  // Two valid records: labels 3 and 7, pixel value == (byte index % 251).
  std::string bytes(2 * kRecord, '\0');
  bytes[0] = 3;
  bytes[kRecord] = 7;
  for (int64_t r = 0; r < 2; ++r)
    for (int64_t i = 1; i < kRecord; ++i)
      bytes[static_cast<size_t>(r * kRecord + i)] = static_cast<char>((i + r) % 251);
  write_text(dir / "batch.bin", bytes);

  Dataset d = load_binary_batch(dir / "batch.bin");
  ASSERT_EQ(d.size(), 2);
  EXPECT_EQ(d.labels[0], 3);
  EXPECT_EQ(d.labels[1], 7);
  // Channel-planar layout: red plane first, pixel (0,0) of record 0 is byte 1.
  EXPECT_NEAR(d.images.at4(0, 0, 0, 0), 1.0f / 255.0f, 1e-7);
  EXPECT_NEAR(d.images.at4(0, 0, 1, 0), 2.0f / 255.0f, 1e-7);
  EXPECT_NEAR(d.images.at4(0, 0, 0, 1), static_cast<float>((1 + 32 * 32) % 251) / 255.0f, 1e-7);

  EXPECT_EQ(load_binary_batch(dir / "batch.bin", 1).size(), 1);

  write_text(dir / "ragged.bin", bytes.substr(0, bytes.size() - 10));
  expect_throws_with<IntegrityError>([&] { load_binary_batch(dir / "ragged.bin"); },
                                     "whole record count");
  EXPECT_THROW(load_binary_batch(dir / "missing.bin"), InputError);
}

TEST(Corpus, StratifiedSampleBalancesClasses) {
  Dataset d = make_shape_corpus(100, 16, 16, 3, CorpusStyle::Standard, 11);
  Dataset s = stratified_sample(d, 30, 5);
  ASSERT_EQ(s.size(), 30);
  std::vector<int> per_class(10, 0);
  for (int y : s.labels) per_class[static_cast<size_t>(y)]++;
  for (int count : per_class) EXPECT_EQ(count, 3);
}

TEST(Corpora, SlicesAreSizedDisjointAndResolvableByName) {
  ExperimentConfig cfg = tiny_config();
  Corpora c = build_corpora(cfg);

  EXPECT_EQ(c.pretrain.size(), cfg.n_pretrain);
  EXPECT_EQ(c.shadow.size(), cfg.n_shadow);
  EXPECT_EQ(c.queries.size(), cfg.n_queries);
  EXPECT_EQ(c.ood.size(), cfg.n_ood);
  EXPECT_EQ(c.probe_train.size(), cfg.n_probe_train);
  EXPECT_EQ(c.test.size(), cfg.n_test);
  EXPECT_EQ(c.finetune.size(), cfg.n_finetune);
  EXPECT_EQ(c.priv.size(), cfg.n_priv);

  // No image appears in two slices (pairwise over the standard-style slices).
  std::vector<const Dataset*> slices{&c.pretrain, &c.shadow,   &c.queries, &c.probe_train,
                                     &c.test,     &c.finetune, &c.priv};
  std::set<uint64_t> seen;
  int64_t total = 0;
  for (const Dataset* s : slices)
    for (int64_t i = 0; i < s->size(); ++i) {
      seen.insert(row_hash(s->images, i));
      ++total;
    }
  EXPECT_EQ(static_cast<int64_t>(seen.size()), total);

  EXPECT_EQ(&resolve_dataset(c, "pretrain"), &c.pretrain);
  EXPECT_EQ(&resolve_dataset(c, "ood"), &c.ood);
  EXPECT_EQ(&resolve_dataset(c, "priv"), &c.priv);
  expect_throws_with<ConfigError>([&] { resolve_dataset(c, "bogus"); }, "unknown dataset id");
}

TEST(Corpora, QueryPatchAugmentationIsDeterministicAndProbabilityGated) {
  Dataset a = make_shape_corpus(12, 16, 16, 3, CorpusStyle::Standard, 13);
  Dataset b = a;
  Dataset untouched = a;

  paste_random_patches(a, 99, 1.0);
  paste_random_patches(b, 99, 1.0);
  EXPECT_EQ(a.images.data, b.images.data);
  EXPECT_NE(a.images.data, untouched.images.data);
  for (float v : a.images.data) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }

  Dataset c = untouched;
  paste_random_patches(c, 99, 0.0);
  EXPECT_EQ(c.images.data, untouched.images.data);
}

// ---------------------------------------------------------------------------
// end-to-end run at the minimal profile

TEST(Reproduce, MinimalProfileRunsAreByteIdenticalAndReportable) {
  fs::path dir1 = fresh_dir("reproduce-1");
  fs::path dir2 = fresh_dir("reproduce-2");
  ExperimentConfig cfg = tiny_config();

  ReproduceResult r1 = reproduce(cfg, dir1);
  ReproduceResult r2 = reproduce(cfg, dir2);

  const std::vector<std::string> csvs{"table2.csv", "table4.csv", "table6.csv", "table7.csv",
                                      "attacks.csv", "fig7.csv", "fig8.csv"};
  for (const auto& f : csvs) {
    ASSERT_TRUE(fs::exists(dir1 / f)) << f;
    EXPECT_EQ(read_text(dir1 / f), read_text(dir2 / f)) << f;
  }
  EXPECT_EQ(read_text(dir1 / "manifest.json"), read_text(dir2 / "manifest.json"));
  EXPECT_EQ(read_text(dir1 / "clean.ckpt"), read_text(dir2 / "clean.ckpt"));
  EXPECT_EQ(read_text(dir1 / "watermarked.ckpt"), read_text(dir2 / "watermarked.ckpt"));

  // The manifest records true artifact hashes.
  nlohmann::json manifest = nlohmann::json::parse(read_text(dir1 / "manifest.json"));
  EXPECT_EQ(manifest.at("artifacts").at("clean.ckpt").get<std::string>(),
            hex64(detail::file_fnv(dir1 / "clean.ckpt")));
  EXPECT_EQ(manifest.at("config_hash").get<std::string>(), config_hash(cfg));

  // Key material on disk equals the in-memory key.
  KeyTuple key = load_key_tuple(dir1 / "key");
  EXPECT_EQ(key.sk, r1.emb_a.key.sk);
  EXPECT_EQ(key.trigger.data, r1.emb_a.key.trigger.data);

  // The tables cover every expected row.
  ASSERT_EQ(r1.attack_cells.size(), cfg.attacks.size());
  for (const auto& cell : r1.attack_cells) EXPECT_TRUE(cell.error.empty()) << cell.error;
  EXPECT_EQ(r1.removal_rows.size(), 2 * cfg.prune_rates.size() * 2);  // 2 encoders x rates x {pruned,tuned}
  EXPECT_EQ(r1.trials.rows.size(),
            static_cast<size_t>(cfg.trial_seeds) * 3);  // three cosine attacks

  // report() regenerates every CSV from the manifest alone.
  for (const auto& f : csvs) fs::remove(dir1 / f);
  report(dir1);
  for (const auto& f : csvs) {
    ASSERT_TRUE(fs::exists(dir1 / f)) << f;
    EXPECT_EQ(read_text(dir1 / f), read_text(dir2 / f)) << f;
  }

  (void)r2;
}
