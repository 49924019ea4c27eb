// Evaluation: the random-direction angle density, frozen-feature probes and
// downstream accuracy, similarity histograms, and the verification report.

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "encmark/eval.hpp"
#include "encmark/ssl.hpp"
#include "encmark/wm.hpp"

using namespace encmark;

namespace {

EncoderSpec spec16() {
  EncoderSpec s;
  s.family = EncoderFamily::TinyCnn;
  s.height = s.width = 16;
  s.channels = 3;
  s.feature_dim = 16;
  return s;
}

Dataset tiny_corpus(int64_t n, uint64_t seed) {
  return make_shape_corpus(n, 16, 16, 3, CorpusStyle::Standard, seed);
}

// Composite Simpson quadrature: the independent check on the density's
// normalization constant.
double simpson(double (*f)(double, int64_t), int64_t n_dim, double a, double b, int64_t panels) {
  double h = (b - a) / static_cast<double>(2 * panels);
  double s = f(a, n_dim) + f(b, n_dim);
  for (int64_t i = 1; i < 2 * panels; ++i)
    s += f(a + h * static_cast<double>(i), n_dim) * ((i % 2) ? 4.0 : 2.0);
  return s * h / 3.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// angle_pdf

TEST(AnglePdf, TwoDimensionsIsUniformOneOverPi) {
  const double expect = 1.0 / M_PI;
  for (double theta : {0.0, 0.3, M_PI / 2, 2.9, M_PI})
    EXPECT_NEAR(angle_pdf(theta, 2), expect, 1e-12) << "theta " << theta;
}

TEST(AnglePdf, IntegratesToOneForRepresentativeDimensions) {
  for (int64_t n : {int64_t{2}, int64_t{8}, int64_t{64}, int64_t{128}}) {
    double integral = simpson(&angle_pdf, n, 0.0, M_PI, 20000);
    EXPECT_NEAR(integral, 1.0, 1e-6) << "dimension " << n;
  }
}

TEST(AnglePdf, ModeSitsAtTheRightAngleFromThreeDimensionsUp) {
  for (int64_t n : {int64_t{3}, int64_t{8}, int64_t{128}}) {
    double peak = angle_pdf(M_PI / 2, n);
    EXPECT_GT(peak, angle_pdf(M_PI / 2 - 0.2, n)) << "dimension " << n;
    EXPECT_GT(peak, angle_pdf(M_PI / 2 + 0.2, n)) << "dimension " << n;
  }
  // The density is symmetric about pi/2.
  for (double theta : {0.4, 1.0, 1.4})
    EXPECT_NEAR(angle_pdf(theta, 64), angle_pdf(M_PI - theta, 64), 1e-12);
}

TEST(AnglePdf, RejectsOutOfRangeArguments) {
  EXPECT_THROW(angle_pdf(-0.1, 8), InputError);
  EXPECT_THROW(angle_pdf(M_PI + 0.1, 8), InputError);
  EXPECT_THROW(angle_pdf(1.0, 1), InputError);
  // Endpoints are legal; sin^(n-2) vanishes there for n >= 3.  sin(0) is an
  // exact 0 in doubles but sin(M_PI) is ~1.2e-16, so the upper endpoint lands
  // at ~1e-96 rather than exactly 0.
  EXPECT_EQ(angle_pdf(0.0, 8), 0.0);
  EXPECT_LT(angle_pdf(M_PI, 8), 1e-90);
}

// ---------------------------------------------------------------------------
// frozen-feature probes

TEST(Probe, ChunkedEncodingMatchesSingleBatchBitExactly) {
  Encoder enc = build_encoder(spec16(), 3);
  Dataset d = tiny_corpus(10, 21);
  Tensor<float> chunked = detail::encode_all(enc, d.images, /*chunk=*/3);
  Tensor<float> whole = enc.encode(d.images);
  EXPECT_EQ(chunked.shape, whole.shape);
  EXPECT_EQ(chunked.data, whole.data);
}

TEST(Probe, TrainingLeavesTheEncoderBitFrozen) {
  Encoder enc = build_encoder(spec16(), 5);
  Dataset d = tiny_corpus(40, 23);
  uint64_t hash_before = param_hash(enc.net());
  std::vector<float> values_before = flatten(enc.net()).values;

  ProbeConfig cfg;
  cfg.epochs = 3;
  Classifier probe = train_probe(enc, d, cfg, 7);
  (void)probe;

  EXPECT_EQ(param_hash(enc.net()), hash_before);
  EXPECT_EQ(flatten(enc.net()).values, values_before);
}

TEST(Probe, DegenerateTrainingSetsAreRejected) {
  Encoder enc = build_encoder(spec16(), 5);
  ProbeConfig cfg;

  Dataset single = tiny_corpus(20, 25);
  single.labels.assign(single.labels.size(), 3);
  EXPECT_THROW(train_probe(enc, single, cfg, 1), ConfigError);

  Dataset unlabeled = tiny_corpus(20, 25);
  unlabeled.labels.clear();
  EXPECT_THROW(train_probe(enc, unlabeled, cfg, 1), InputError);

  EXPECT_THROW(train_probe(enc, Dataset{}, cfg, 1), InputError);

  ProbeConfig bad = cfg;
  bad.epochs = 0;
  EXPECT_THROW(train_probe(enc, tiny_corpus(20, 25), bad, 1), ConfigError);
  bad = cfg;
  bad.lr = 0.0;
  EXPECT_THROW(train_probe(enc, tiny_corpus(20, 25), bad, 1), ConfigError);
}

// A probe that always answers one class scores exactly that class's share of
// the test split: the chance-level anchor for accuracy numbers. The corpus
// cycles labels, so 100 images hold exactly 10 of each of the 10 classes.
TEST(Probe, ConstantClassifierScoresExactlyTheClassShare) {
  Encoder enc = build_encoder(spec16(), 9);
  Dataset test = tiny_corpus(100, 27);

  const int64_t d = enc.output_dim();
  const int64_t classes = 10;
  Rng rng(0);
  Net<float> net;
  net.add(std::make_unique<Dense<float>>("const", d, classes, rng));
  for (Param<float>* p : net.params()) {
    if (p->numel() == d * classes) std::fill(p->value.begin(), p->value.end(), 0.0f);
    if (p->numel() == classes) {
      std::fill(p->value.begin(), p->value.end(), 0.0f);
      p->value[4] = 1.0f;  // always argmax to class 4
    }
  }
  Classifier constant(std::move(net), d, classes);

  std::vector<int> pred = constant.predict(enc.encode(test.images));
  for (int y : pred) ASSERT_EQ(y, 4);
  EXPECT_DOUBLE_EQ(downstream_accuracy(enc, constant, test), 0.1);
}

TEST(Probe, PretrainedFeaturesBeatRandomFeaturesWellAboveChance) {
  // Grayscale corpus: with color channels, every image carries a random
  // (bg, fg) color pair that instance discrimination latches onto -- a
  // shortcut that is crop-invariant yet carries nothing about the shape
  // class, so at this scale contrastive features transfer WORSE than random
  // conv features.  One channel plus brightness jitter removes the shortcut
  // and the pretraining advantage becomes visible (measured 0.40 vs 0.30).
  EncoderSpec spec;
  spec.family = EncoderFamily::TinyCnn;
  spec.height = spec.width = 24;
  spec.channels = 1;
  spec.feature_dim = 32;
  Dataset corpus = make_shape_corpus(320, 24, 24, 1, CorpusStyle::Standard, 29);
  auto [train, test] = split_dataset(corpus, 240);

  SSLConfig cfg;
  cfg.algorithm = SSLAlgorithm::Simclr;
  cfg.epochs = 12;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  PretrainResult pre = pretrain(train, spec, cfg, 41);

  Encoder random_enc = build_encoder(spec, 43);

  ProbeConfig probe_cfg;
  probe_cfg.epochs = 30;
  Classifier probe_pre = train_probe(pre.encoder, train, probe_cfg, 11);
  Classifier probe_rand = train_probe(random_enc, train, probe_cfg, 11);

  double da_pre = downstream_accuracy(pre.encoder, probe_pre, test);
  double da_rand = downstream_accuracy(random_enc, probe_rand, test);

  EXPECT_GT(da_pre, da_rand);
  EXPECT_GE(da_pre, 0.3);  // at least three times the 10-class chance level
}

// ---------------------------------------------------------------------------
// similarity histograms

TEST(Histogram, FortyBinsSpanMinusOneToOne) {
  Histogram h = make_similarity_histogram();
  EXPECT_EQ(h.counts.size(), 40u);
  EXPECT_DOUBLE_EQ(h.lo, -1.0);
  EXPECT_DOUBLE_EQ(h.hi, 1.0);
  EXPECT_DOUBLE_EQ(h.bin_width, 0.05);
  EXPECT_EQ(h.total(), 0);
}

TEST(Histogram, AddPlacesValuesAndClampsTheEdges) {
  Histogram h = make_similarity_histogram();
  histogram_add(h, -1.0);    // lowest bin
  histogram_add(h, -0.999);  // still lowest
  histogram_add(h, 0.0);     // first bin at or above zero
  histogram_add(h, 0.999);   // highest bin
  histogram_add(h, 1.0);     // clamped into the highest bin
  EXPECT_EQ(h.counts[0], 2);
  EXPECT_EQ(h.counts[20], 1);
  EXPECT_EQ(h.counts[39], 2);
  EXPECT_EQ(h.total(), 5);
}

TEST(Histogram, SimilarityHistogramCountsEveryImageReferencePair) {
  Encoder enc = build_encoder(spec16(), 13);
  Decoder dec = build_decoder(DecoderSpec::defaults(16, 8), 15);
  Dataset d = tiny_corpus(5, 31);

  Tensor<float> refs({3, 8});
  Rng rng(17);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  for (float& v : refs.data) v = gauss(rng);

  Histogram h = similarity_histogram(enc, dec, d.images, refs);
  EXPECT_EQ(h.total(), 5 * 3);

  Tensor<float> wrong({3, 9});
  for (float& v : wrong.data) v = gauss(rng);
  EXPECT_THROW(similarity_histogram(enc, dec, d.images, wrong), InputError);
  EXPECT_THROW(similarity_histogram(enc, dec, Tensor<float>({0, 16, 16, 3}), refs), InputError);
}

// ---------------------------------------------------------------------------
// verification report

TEST(Report, JsonRoundTripPreservesEveryField) {
  WatermarkReport r;
  r.similarities = {0.91, 0.42, 0.77, -0.05};
  r.th_w = 0.5;
  r.th_v = 0.5;
  r.wr = watermark_rate(r.similarities, r.th_w);
  r.verdict = r.wr > r.th_v ? 1 : 0;
  r.suspect_id = "suspect-a";
  r.da_per_task = {{"shapes", 0.71}, {"shifted", 0.64}};
  r.config_hash = "00000000deadbeef";

  WatermarkReport back = report_from_json(report_to_json(r));
  EXPECT_DOUBLE_EQ(back.wr, r.wr);
  EXPECT_EQ(back.similarities, r.similarities);
  EXPECT_EQ(back.verdict, r.verdict);
  EXPECT_DOUBLE_EQ(back.th_w, r.th_w);
  EXPECT_DOUBLE_EQ(back.th_v, r.th_v);
  EXPECT_EQ(back.suspect_id, r.suspect_id);
  EXPECT_EQ(back.da_per_task, r.da_per_task);
  EXPECT_EQ(back.config_hash, r.config_hash);
}

// The report carries enough evidence to recompute its own headline numbers.
TEST(Report, RateAndVerdictAreRecomputableFromStoredSimilarities) {
  WatermarkReport r;
  r.similarities = {0.9, 0.6, 0.5, 0.2};  // 0.5 ties the threshold: not counted
  r.th_w = 0.5;
  r.th_v = 0.5;
  r.wr = watermark_rate(r.similarities, r.th_w);
  r.verdict = r.wr > r.th_v ? 1 : 0;
  EXPECT_DOUBLE_EQ(r.wr, 0.5);
  EXPECT_EQ(r.verdict, 0);

  WatermarkReport back = report_from_json(report_to_json(r));
  EXPECT_DOUBLE_EQ(watermark_rate(back.similarities, back.th_w), back.wr);
  EXPECT_EQ(back.wr > back.th_v ? 1 : 0, back.verdict);
}
