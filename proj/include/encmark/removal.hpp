#pragma once

// Watermark-removal attacks an adversary might run on a stolen encoder:
// per-layer magnitude pruning of convolution weights, and fine-pruning
// (pruning followed by further training against the victim's outputs).

#include <algorithm>
#include <numeric>
#include <vector>

#include "encmark/checkpoint.hpp"
#include "encmark/steal.hpp"

namespace encmark {

// Zeroes the floor(r*k) smallest-magnitude weights in every convolution
// weight tensor, independently per layer. Ties break by parameter order, and
// existing zeros rank smallest, so pruning twice at the same r is a no-op.
inline Encoder prune(const Encoder& enc, double r) {
  if (r < 0.0 || r >= 1.0) throw InputError("prune fraction must lie in [0,1)");
  Encoder out = clone_encoder(enc);
  for (Param<float>* p : out.net().params()) {
    if (!p->is_conv_weight) continue;
    int64_t k = p->numel();
    auto zcount = static_cast<int64_t>(std::floor(r * static_cast<double>(k)));
    if (zcount <= 0) continue;
    std::vector<int64_t> idx(static_cast<size_t>(k));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
      return std::abs(p->value[static_cast<size_t>(a)]) <
             std::abs(p->value[static_cast<size_t>(b)]);
    });
    for (int64_t i = 0; i < zcount; ++i) p->value[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 0.0f;
  }
  return out;
}

inline int64_t nonzero_conv_weights(Encoder& enc) {
  int64_t n = 0;
  for (Param<float>* p : enc.net().params()) {
    if (!p->is_conv_weight) continue;
    for (float v : p->value)
      if (v != 0.0f) ++n;
  }
  return n;
}

// Continues training a (typically pruned) surrogate against the victim with
// the cosine steal objective. Zeroed weights are free to regrow.
inline Encoder finetune_under_victim(const Encoder& surrogate, const VictimHandle& victim,
                                     const Dataset& data, int64_t epochs = 20, double lr = 0.01,
                                     int64_t batch_size = 32, uint64_t seed = 0) {
  if (data.size() == 0) throw InputError("finetuning dataset is empty");
  if (epochs < 0) throw InputError("epochs must be non-negative");
  Encoder out = clone_encoder(surrogate);
  if (epochs == 0) return out;
  train_to_match(out, victim, data, SimilarityKind::Cosine, epochs, batch_size, lr, seed);
  return out;
}

}  // namespace encmark
