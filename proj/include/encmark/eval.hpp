#pragma once

// Evaluation utilities: frozen-encoder downstream probes, the closed-form
// density of angles between random high-dimensional vectors, similarity
// histograms for decoded keys, and the report record that verification emits.

#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "encmark/data.hpp"
#include "encmark/nets.hpp"

namespace encmark {

struct ProbeConfig {
  int64_t hidden_width = 64;  // scaled-down two-layer MLP head
  int64_t epochs = 20;
  double lr = 0.005;  // adaptive-moment optimizer
  int64_t batch_size = 32;

  void validate() const {
    if (hidden_width <= 0 || epochs <= 0 || batch_size <= 0)
      throw ConfigError("probe widths/epochs/batches must be positive");
    if (lr <= 0) throw ConfigError("probe learning rate must be positive");
  }
};

class Classifier {
 public:
  Classifier(Net<float> net, int64_t input_dim, int64_t classes)
      : net_(std::move(net)), input_dim_(input_dim), classes_(classes) {}

  Net<float>& net() { return net_; }
  int64_t input_dim() const { return input_dim_; }
  int64_t classes() const { return classes_; }

  Tensor<float> logits(const Tensor<float>& features) { return net_.forward(features, false); }

  std::vector<int> predict(const Tensor<float>& features) {
    Tensor<float> lg = logits(features);
    int64_t n = lg.shape[0], c = lg.shape[1];
    std::vector<int> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      int best = 0;
      float bv = lg.data[static_cast<size_t>(i * c)];
      for (int64_t j = 1; j < c; ++j)
        if (lg.data[static_cast<size_t>(i * c + j)] > bv) {
          bv = lg.data[static_cast<size_t>(i * c + j)];
          best = static_cast<int>(j);
        }
      out[static_cast<size_t>(i)] = best;
    }
    return out;
  }

 private:
  Net<float> net_;
  int64_t input_dim_;
  int64_t classes_;
};

namespace detail {

// Encode a dataset in fixed-size chunks with the encoder in inference mode.
inline Tensor<float> encode_all(Encoder& enc, const Tensor<float>& images, int64_t chunk = 128) {
  int64_t n = images.shape[0];
  Tensor<float> out({n, enc.output_dim()});
  for (int64_t s = 0; s < n; s += chunk) {
    int64_t e = std::min(n, s + chunk);
    std::vector<int64_t> idx(static_cast<size_t>(e - s));
    std::iota(idx.begin(), idx.end(), s);
    Tensor<float> f = enc.encode(gather_rows(images, idx));
    std::copy(f.data.begin(), f.data.end(), out.data.begin() + s * enc.output_dim());
  }
  return out;
}

// Softmax cross-entropy over logits; returns mean loss, writes dlogits.
inline double softmax_ce(const Tensor<float>& logits, const std::vector<int>& labels,
                         Tensor<float>* dlogits) {
  int64_t n = logits.shape[0], c = logits.shape[1];
  if (dlogits) {
    *dlogits = Tensor<float>({n, c});
  }
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    int y = labels[static_cast<size_t>(i)];
    loss += -(static_cast<double>(row[y]) - mx) + std::log(denom);
    if (dlogits)
      for (int64_t j = 0; j < c; ++j) {
        double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
        dlogits->data[static_cast<size_t>(i * c + j)] =
            static_cast<float>((p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
      }
  }
  return loss / static_cast<double>(n);
}

}  // namespace detail

// Trains a two-layer MLP on frozen features. The encoder is only ever run in
// inference mode, so its parameters and buffers stay bit-identical.
inline Classifier train_probe(Encoder& encoder, const Dataset& labeled, const ProbeConfig& cfg,
                              uint64_t seed) {
  cfg.validate();
  if (!labeled.labeled()) throw InputError("probe training needs labels");
  if (labeled.size() == 0) throw InputError("probe training set is empty");
  int classes = 0;
  for (int y : labeled.labels) {
    if (y < 0) throw InputError("negative label");
    classes = std::max(classes, y + 1);
  }
  {
    std::vector<char> seen(static_cast<size_t>(classes), 0);
    for (int y : labeled.labels) seen[static_cast<size_t>(y)] = 1;
    int distinct = 0;
    for (char s : seen) distinct += s;
    if (distinct < 2) throw ConfigError("probe training set has a single class");
  }

  Tensor<float> features = detail::encode_all(encoder, labeled.images);
  int64_t d = encoder.output_dim();
  Rng init = make_stream(seed, "probe-init");
  Net<float> net;
  net.add(std::make_unique<Dense<float>>("probe_fc1", d, cfg.hidden_width, init));
  net.add(std::make_unique<ReLU<float>>());
  net.add(std::make_unique<Dense<float>>("probe_fc2", cfg.hidden_width, classes, init));

  Adam<float> opt(cfg.lr);
  Rng order = make_stream(seed, "probe-order");
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int64_t> idx = shuffled_indices(labeled.size(), order);
    for (const auto& rows_local : batch_indices(labeled.size(), cfg.batch_size)) {
      std::vector<int64_t> rows;
      std::vector<int> ys;
      for (int64_t r : rows_local) {
        rows.push_back(idx[static_cast<size_t>(r)]);
        ys.push_back(labeled.labels[static_cast<size_t>(idx[static_cast<size_t>(r)])]);
      }
      Tensor<float> fb = gather_rows(features, rows);
      Tensor<float> logits = net.forward(fb, true);
      Tensor<float> dlogits;
      double loss = detail::softmax_ce(logits, ys, &dlogits);
      if (!std::isfinite(loss)) throw TrainingError("non-finite probe loss");
      net.zero_grad();
      net.backward(dlogits);
      opt.step(net);
    }
  }
  return Classifier(std::move(net), d, classes);
}

inline double downstream_accuracy(Encoder& encoder, Classifier& probe, const Dataset& test) {
  if (test.size() == 0) throw InputError("empty evaluation split");
  if (!test.labeled()) throw InputError("evaluation split needs labels");
  Tensor<float> features = detail::encode_all(encoder, test.images);
  std::vector<int> pred = probe.predict(features);
  int64_t correct = 0;
  for (int64_t i = 0; i < test.size(); ++i)
    if (pred[static_cast<size_t>(i)] == test.labels[static_cast<size_t>(i)]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

// Density of the angle between two independent isotropic directions in R^n:
// f(theta) = (1/sqrt(pi)) * Gamma(n/2)/Gamma((n-1)/2) * sin(theta)^(n-2).
inline double angle_pdf(double theta, int64_t n) {
  if (theta < 0.0 || theta > M_PI) throw InputError("angle outside [0, pi]");
  if (n < 2) throw InputError("dimension must be at least 2");
  double logc = std::lgamma(static_cast<double>(n) / 2.0) -
                std::lgamma((static_cast<double>(n) - 1.0) / 2.0) - 0.5 * std::log(M_PI);
  double s = std::sin(theta);
  if (n == 2) return std::exp(logc);
  if (s <= 0.0) return 0.0;
  return std::exp(logc + (static_cast<double>(n) - 2.0) * std::log(s));
}

struct Histogram {
  double lo = -1.0;
  double hi = 1.0;
  double bin_width = 0.05;
  std::vector<int64_t> counts;  // 40 bins over [-1, 1]

  int64_t total() const {
    int64_t t = 0;
    for (int64_t c : counts) t += c;
    return t;
  }
};

inline Histogram make_similarity_histogram() {
  Histogram h;
  h.counts.assign(static_cast<size_t>(std::llround((h.hi - h.lo) / h.bin_width)), 0);
  return h;
}

inline void histogram_add(Histogram& h, double v) {
  auto bins = static_cast<int64_t>(h.counts.size());
  auto b = static_cast<int64_t>(std::floor((v - h.lo) / h.bin_width));
  b = std::clamp<int64_t>(b, 0, bins - 1);
  ++h.counts[static_cast<size_t>(b)];
}

// Histogram of cos(decoder(encoder(x)), ref) over all (image, reference
// vector) pairs. Total count is |images| * |refs|.
inline Histogram similarity_histogram(Encoder& encoder, Decoder& decoder,
                                      const Tensor<float>& images, const Tensor<float>& refs) {
  if (images.rank() != 4 || images.shape[0] == 0) throw InputError("histogram needs images");
  if (refs.rank() != 2 || refs.shape[0] == 0) throw InputError("histogram needs reference vectors");
  Tensor<float> feats = detail::encode_all(encoder, images);
  Tensor<float> decoded = decoder.net().forward(feats, false);
  int64_t n = decoded.shape[0], m = decoded.shape[1], r = refs.shape[0];
  if (refs.shape[1] != m) throw InputError("reference vector width mismatch");
  Histogram h = make_similarity_histogram();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < r; ++j)
      histogram_add(h, cosine_d(decoded.ptr() + i * m, refs.ptr() + j * m, m));
  return h;
}

// Verification outcome: rate of per-sample key agreement plus the evidence
// needed to recompute it.
struct WatermarkReport {
  double wr = 0.0;
  std::vector<double> similarities;
  int verdict = 0;
  double th_w = 0.5;
  double th_v = 0.5;
  std::string suspect_id;
  std::map<std::string, double> da_per_task;
  std::string config_hash;
};

inline nlohmann::ordered_json report_to_json(const WatermarkReport& r) {
  nlohmann::ordered_json j;
  j["wr"] = r.wr;
  j["similarities"] = r.similarities;
  j["verdict"] = r.verdict;
  j["th_w"] = r.th_w;
  j["th_v"] = r.th_v;
  j["suspect_id"] = r.suspect_id;
  j["da_per_task"] = r.da_per_task;
  j["config_hash"] = r.config_hash;
  return j;
}

inline WatermarkReport report_from_json(const nlohmann::ordered_json& j) {
  WatermarkReport r;
  r.wr = j.at("wr").get<double>();
  r.similarities = j.at("similarities").get<std::vector<double>>();
  r.verdict = j.at("verdict").get<int>();
  r.th_w = j.at("th_w").get<double>();
  r.th_v = j.at("th_v").get<double>();
  r.suspect_id = j.at("suspect_id").get<std::string>();
  r.da_per_task = j.at("da_per_task").get<std::map<std::string, double>>();
  r.config_hash = j.at("config_hash").get<std::string>();
  return r;
}

}  // namespace encmark
