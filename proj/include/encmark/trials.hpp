#pragma once

// Model-level robustness trials: rerun each stealing attack across many
// seeds against a watermarked victim and tabulate the watermark rate of
// every surrogate.

#include <string>
#include <vector>

#include "encmark/steal.hpp"
#include "encmark/wm.hpp"

namespace encmark {

struct TrialRow {
  std::string attack;
  uint64_t seed = 0;
  double wr = 0.0;
  int verdict = 0;
};

struct TrialSummary {
  std::string attack;
  double wr_min = 0.0;
  double wr_mean = 0.0;
};

struct TrialTable {
  std::vector<TrialRow> rows;
  std::vector<TrialSummary> summaries;
};

inline TrialTable model_level_trial(const VictimHandle& victim, KeyTuple& key,
                                    const std::vector<StealConfig>& attacks,
                                    const DatasetResolver& resolve, int64_t n_seeds = 10) {
  if (n_seeds < 1) throw InputError("trial needs at least one seed");
  TrialTable table;
  for (const StealConfig& base : attacks) {
    double mn = 2.0, sum = 0.0;
    for (int64_t s = 0; s < n_seeds; ++s) {
      StealConfig cfg = base;
      cfg.seed = derive_seed(derive_seed(base.seed, "trial-seed"), static_cast<uint64_t>(s));
      StealResult r = steal(victim, resolve(cfg.query_dataset), cfg);
      WatermarkReport rep = verify(r.surrogate, key, key.th_w, key.th_v, cfg.name);
      table.rows.push_back({base.name, cfg.seed, rep.wr, rep.verdict});
      mn = std::min(mn, rep.wr);
      sum += rep.wr;
    }
    table.summaries.push_back({base.name, mn, sum / static_cast<double>(n_seeds)});
  }
  return table;
}

}  // namespace encmark
