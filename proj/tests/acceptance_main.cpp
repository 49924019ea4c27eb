// Acceptance gate for the full workbench at the desk profile. Runs the
// experiment chain twice plus a no-shadow ablation, then prints exactly one
// PASS/FAIL line per criterion. Exit status is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "encmark/encmark.hpp"

namespace fs = std::filesystem;
using namespace encmark;

namespace {

int g_failures = 0;

void criterion(int n, bool ok, const std::string& what, const std::string& detail = "") {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << n << ": " << what;
  if (!detail.empty()) std::cout << "  [" << detail << "]";
  std::cout << std::endl;
  if (!ok) ++g_failures;
}

std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4f", v);
  return b;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Self-contained oracles: direct scalar enumeration of the loss definitions,
// sharing no code with the implementations under test.

double cos_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / (std::sqrt(na) * std::sqrt(nb));
}

double ntxent_oracle(const std::vector<std::vector<double>>& z, double tau) {
  int m = static_cast<int>(z.size());
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    int partner = i ^ 1;
    double denom = 0.0;
    for (int k = 0; k < m; ++k)
      if (k != i) denom += std::exp(cos_oracle(z[i], z[k]) / tau);
    total += -std::log(std::exp(cos_oracle(z[i], z[partner]) / tau) / denom);
  }
  return total / m;
}

double moco_oracle(const std::vector<std::vector<double>>& q,
                   const std::vector<std::vector<double>>& kpos,
                   const std::vector<std::vector<double>>& queue, double tau) {
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  double total = 0.0;
  for (size_t i = 0; i < q.size(); ++i) {
    double pos = std::exp(dot(q[i], kpos[i]) / tau);
    double denom = pos;
    for (const auto& key : queue) denom += std::exp(dot(q[i], key) / tau);
    total += -std::log(pos / denom);
  }
  return total / static_cast<double>(q.size());
}

double byol_oracle(const Tensor<float>& pred, const Tensor<float>& target) {
  int64_t n = pred.dim(0), d = pred.dim(1);
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> p(static_cast<size_t>(d)), t(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j) {
      p[static_cast<size_t>(j)] = pred.data[static_cast<size_t>(i * d + j)];
      t[static_cast<size_t>(j)] = target.data[static_cast<size_t>(i * d + j)];
    }
    total += 2.0 - 2.0 * cos_oracle(p, t);
  }
  return total / static_cast<double>(n);
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

Tensor<double> rows_to_tensor(const std::vector<std::vector<double>>& rows) {
  Tensor<double> t({static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows[0].size())});
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[0].size(); ++j) t.data[i * rows[0].size() + j] = rows[i][j];
  return t;
}

std::vector<std::vector<double>> to_rows(const Tensor<float>& t) {
  std::vector<std::vector<double>> rows(static_cast<size_t>(t.dim(0)));
  for (int64_t i = 0; i < t.dim(0); ++i)
    for (int64_t j = 0; j < t.dim(1); ++j)
      rows[static_cast<size_t>(i)].push_back(t.data[static_cast<size_t>(i * t.dim(1) + j)]);
  return rows;
}

double simpson_integral(int64_t n_dim, int64_t panels) {
  double a = 0.0, b = M_PI;
  double h = (b - a) / static_cast<double>(2 * panels);
  double s = angle_pdf(a, n_dim) + angle_pdf(b, n_dim);
  for (int64_t i = 1; i < 2 * panels; ++i)
    s += angle_pdf(a + h * static_cast<double>(i), n_dim) * ((i % 2) ? 4.0 : 2.0);
  return s * h / 3.0;
}

// ---------------------------------------------------------------------------
// lookup helpers over the run result

AttackCell* find_cell(std::vector<AttackCell>& cells, const std::string& name) {
  for (auto& c : cells)
    if (c.config.name == name) return &c;
  return nullptr;
}

const RemovalRow* find_row(const std::vector<RemovalRow>& rows, const std::string& enc, double r,
                           int finetuned) {
  for (const auto& row : rows)
    if (row.encoder == enc && std::abs(row.r - r) < 1e-9 && row.finetuned == finetuned) return &row;
  return nullptr;
}

}  // namespace

int main() {
  std::cout << "[info] desk-profile acceptance: two full runs plus a no-shadow ablation"
            << std::endl;
  try {
    fs::path root = "acceptance-runs";
    fs::remove_all(root);
    fs::path dir_a = root / "run-a";
    fs::path dir_b = root / "run-b";

    ExperimentConfig cfg = desk_config();

    auto t0 = std::chrono::steady_clock::now();
    ReproduceResult a = reproduce(cfg, dir_a);
    std::cout << "[info] run A finished in " << fmt(elapsed_s(t0)) << " s" << std::endl;

    auto t1 = std::chrono::steady_clock::now();
    ReproduceResult b = reproduce(cfg, dir_b);
    std::cout << "[info] run B finished in " << fmt(elapsed_s(t1)) << " s" << std::endl;

    // ----- criterion 1: effectiveness ---------------------------------------
    criterion(1,
              a.wr_watermarked >= 0.95 && a.wr_shadow >= 0.95 && a.wr_clean <= 0.10,
              "watermarked and shadow encoders verify, the clean encoder does not",
              "wr(watermarked)=" + fmt(a.wr_watermarked) + " wr(shadow)=" + fmt(a.wr_shadow) +
                  " wr(clean)=" + fmt(a.wr_clean));

    // ----- criterion 2: key uniqueness ---------------------------------------
    criterion(2, a.wr_cross[0][1] <= 0.10 && a.wr_cross[1][0] <= 0.10,
              "independently embedded keys do not fire on each other's encoders",
              "cross a->b=" + fmt(a.wr_cross[0][1]) + " b->a=" + fmt(a.wr_cross[1][0]) +
                  " diag=" + fmt(a.wr_cross[0][0]) + "/" + fmt(a.wr_cross[1][1]));

    // ----- criterion 3: fidelity ---------------------------------------------
    double da_gap = std::abs(a.da_watermarked - a.da_clean);
    criterion(3, da_gap <= 0.02 && a.fidelity_cos >= 0.95,
              "embedding keeps downstream accuracy and feature geometry",
              "da clean=" + fmt(a.da_clean) + " watermarked=" + fmt(a.da_watermarked) +
                  " gap=" + fmt(da_gap) + " mean-cos=" + fmt(a.fidelity_cos));

    // ----- criterion 4: stealing robustness ----------------------------------
    std::vector<std::string> steal_names{"steal-1", "steal-2", "steal-3"};
    bool all_verdicts = true;
    std::string steal_detail;
    std::vector<double> steal_wr;
    for (const auto& name : steal_names) {
      AttackCell* cell = find_cell(a.attack_cells, name);
      double wr = 0.0;
      if (cell && cell->error.empty())
        wr = watermark_rate(cell->result->surrogate, a.emb_a.key, a.emb_a.key.th_w);
      else
        all_verdicts = false;
      steal_wr.push_back(wr);
      all_verdicts = all_verdicts && wr > a.emb_a.key.th_v;
      steal_detail += (steal_detail.empty() ? "" : " ") + name + "=" + fmt(wr);
    }
    criterion(4, all_verdicts, "every stolen surrogate still carries the watermark",
              steal_detail);

    // ----- criterion 5: the attack grid is a real threat model ----------------
    AttackCell* c1 = find_cell(a.attack_cells, "steal-1");
    AttackCell* cm = find_cell(a.attack_cells, "steal-mae");
    bool c5 = c1 && cm && c1->error.empty() && cm->error.empty();
    double da_sur = 0, agree_cos = 0, agree_mae = 0;
    if (c5) {
      da_sur = c1->da_per_task.count("shapes") ? c1->da_per_task.at("shapes") : 0.0;
      agree_cos = detail::mean_pairwise_cosine(c1->result->surrogate, a.emb_a.watermarked,
                                               a.corpora.test.images);
      agree_mae = detail::mean_pairwise_cosine(cm->result->surrogate, a.emb_a.watermarked,
                                               a.corpora.test.images);
      c5 = std::abs(da_sur - a.da_watermarked) <= 0.10 && agree_cos > agree_mae;
    }
    criterion(5, c5,
              "the cosine surrogate nearly matches victim utility and beats the "
              "absolute-error objective",
              "da(surrogate)=" + fmt(da_sur) + " da(victim)=" + fmt(a.da_watermarked) +
                  " agree cos=" + fmt(agree_cos) + " mae=" + fmt(agree_mae));

    // ----- criterion 6: pruning / fine-pruning robustness ----------------------
    bool c6 = true;
    std::string c6_detail;
    for (const char* enc : {"watermarked", "surrogate-1"})
      for (double r : {0.1, 0.3, 0.5})
        for (int ft : {0, 1}) {
          const RemovalRow* row = find_row(a.removal_rows, enc, r, ft);
          if (!row) {
            c6 = false;
            continue;
          }
          c6 = c6 && row->wr > 0.5;
        }
    const RemovalRow* half_raw = find_row(a.removal_rows, "watermarked", 0.5, 0);
    const RemovalRow* half_tuned = find_row(a.removal_rows, "watermarked", 0.5, 1);
    bool da_recovers = half_raw && half_tuned && half_tuned->da > half_raw->da;
    c6 = c6 && da_recovers;
    if (half_raw && half_tuned)
      c6_detail = "worst wr>0.5 over 12 rows; da r=0.5 pruned=" + fmt(half_raw->da) +
                  " finetuned=" + fmt(half_tuned->da);
    criterion(6, c6, "the watermark survives pruning and fine-pruning at every rate",
              c6_detail);

    // ----- criterion 7: the shadow encoder is what buys robustness -------------
    bool c7 = false;
    std::string c7_detail;
    try {
      auto t2 = std::chrono::steady_clock::now();
      SeedRegistry seeds = seed_everything(cfg.seed);
      EmbedConfig no_shadow = cfg.embedding;
      no_shadow.seed = seeds.seed_for("embed-a");
      no_shadow.use_shadow = false;
      EmbedResult ablated = embed(a.clean, a.corpora.pretrain, a.corpora.shadow, a.corpora.priv,
                                  no_shadow);
      bool any_below = false;
      for (const auto& name : steal_names) {
        AttackCell* cell = find_cell(a.attack_cells, name);
        if (!cell) continue;
        StealConfig sc = cell->config;
        VictimHandle victim = make_victim(ablated.watermarked);
        StealResult sr = steal(victim, resolve_dataset(a.corpora, sc.query_dataset), sc);
        double wr = watermark_rate(sr.surrogate, ablated.key, ablated.key.th_w);
        any_below = any_below || wr < 0.5;
        c7_detail += (c7_detail.empty() ? "no-shadow: " : " ") + name + "=" + fmt(wr);
      }
      bool full_all_above = true;
      for (double wr : steal_wr) full_all_above = full_all_above && wr > 0.5;
      c7 = any_below && full_all_above;
      std::cout << "[info] ablation finished in " << fmt(elapsed_s(t2)) << " s" << std::endl;
    } catch (const std::exception& e) {
      c7_detail = std::string("ablation failed: ") + e.what();
    }
    criterion(7, c7, "dropping the shadow encoder breaks robustness to at least one attack",
              c7_detail);

    // ----- criterion 8: statistics of random directions -------------------------
    bool integrals_ok = true;
    std::string c8_detail;
    for (int64_t n : {int64_t{2}, int64_t{64}, int64_t{128}}) {
      double integral = simpson_integral(n, 20000);
      integrals_ok = integrals_ok && std::abs(integral - 1.0) <= 1e-6;
    }
    {
      const int64_t pairs = 1000, dim = 128;
      double sum = 0, sum2 = 0;
      for (int64_t i = 0; i < pairs; ++i) {
        std::vector<float> u = sample_sk(dim, derive_seed(0x8a11, static_cast<uint64_t>(2 * i)));
        std::vector<float> v =
            sample_sk(dim, derive_seed(0x8a11, static_cast<uint64_t>(2 * i + 1)));
        double c = 0;
        for (int64_t j = 0; j < dim; ++j)
          c += static_cast<double>(u[static_cast<size_t>(j)]) * v[static_cast<size_t>(j)];
        sum += c;
        sum2 += c * c;
      }
      double mean = sum / pairs;
      double sd = std::sqrt(sum2 / pairs - mean * mean);
      bool mc_ok = std::abs(mean) < 0.01 && sd >= 0.07 && sd <= 0.106;
      c8_detail = "integrals within 1e-6; 1000-pair cos mean=" + fmt(mean) + " sd=" + fmt(sd);
      criterion(8, integrals_ok && mc_ok,
                "the angle density normalizes and independent keys look orthogonal", c8_detail);
    }

    // ----- criterion 9: losses against oracles and finite differences ------------
    bool c9 = true;
    std::string c9_detail;
    {
      // brute-force enumeration on hand vectors
      std::vector<std::vector<double>> z = {
          {1.0, 0.2, -0.3}, {0.8, 0.4, -0.1}, {-0.5, 1.1, 0.7}, {-0.6, 0.9, 0.9}};
      double e_nt = rel_err(ntxent_loss(rows_to_tensor(z), 0.5), ntxent_oracle(z, 0.5));
      c9 = c9 && e_nt <= 1e-5;

      // moco step through real encoders, against scalar enumeration
      Dataset data = make_shape_corpus(16, 16, 16, 3, CorpusStyle::Standard, 5);
      EncoderSpec tiny;
      tiny.family = EncoderFamily::TinyCnn;
      tiny.height = tiny.width = 16;
      tiny.feature_dim = 16;
      SSLConfig mcfg;
      mcfg.algorithm = SSLAlgorithm::MocoV2;
      mcfg.queue_size = 4;
      mcfg.batch_size = 2;
      MocoState oracle_state = make_moco_state(data, tiny, mcfg, 31);
      MocoState step_state = make_moco_state(data, tiny, mcfg, 31);
      Tensor<float> vq = data.images.slice_rows(0, 2);
      Tensor<float> vk = data.images.slice_rows(2, 4);
      Tensor<float> zq = normalize_rows(
          oracle_state.query_head.forward(oracle_state.query_enc.net().forward(vq, true), true));
      Tensor<float> zk = normalize_rows(
          oracle_state.key_head.forward(oracle_state.key_enc.net().forward(vk, true), true));
      double moco_expect = moco_oracle(to_rows(zq), to_rows(zk), to_rows(oracle_state.queue), 0.2);
      double e_mc = rel_err(moco_step(step_state, vq, vk, 0.99, 0.2, 0.01), moco_expect);
      c9 = c9 && e_mc <= 1e-5;

      // byol step against the two-branch oracle
      ByolState byol_oracle_state = make_byol_state(tiny, 23);
      ByolState byol_step_state = make_byol_state(tiny, 23);
      auto branch = [&](ByolState& st, const Tensor<float>& vo, const Tensor<float>& vt) {
        Tensor<float> p = st.online_pred.forward(
            st.online_proj.forward(st.online_enc.net().forward(vo, true), true), true);
        Tensor<float> zt = st.target_proj.forward(st.target_enc.net().forward(vt, true), true);
        return byol_oracle(p, zt);
      };
      double byol_expect =
          branch(byol_oracle_state, vq, vk) + branch(byol_oracle_state, vk, vq);
      double e_by = rel_err(byol_step(byol_step_state, vq, vk, 0.99, 0.01), byol_expect);
      c9 = c9 && e_by <= 1e-5;

      // central finite differences on every loss, double precision
      Rng rng(15);
      std::normal_distribution<double> gauss(0.0, 1.0);
      auto fd_worst_ntxent = [&] {
        Tensor<double> zt({6, 4});
        for (auto& v : zt.data) v = gauss(rng);
        Tensor<double> grad;
        ntxent_loss(zt, 0.5, &grad);
        double worst = 0;
        const double h = 1e-6;
        for (int64_t i = 0; i < zt.numel(); ++i) {
          Tensor<double> p = zt, m = zt;
          p.data[static_cast<size_t>(i)] += h;
          m.data[static_cast<size_t>(i)] -= h;
          double fd = (ntxent_loss(p, 0.5) - ntxent_loss(m, 0.5)) / (2 * h);
          worst = std::max(worst, rel_err(grad.data[static_cast<size_t>(i)], fd));
        }
        return worst;
      };
      auto fd_worst_moco = [&] {
        Tensor<double> q({3, 4}), kp({3, 4}), queue({5, 4});
        for (auto& v : q.data) v = gauss(rng);
        for (auto& v : kp.data) v = gauss(rng);
        for (auto& v : queue.data) v = gauss(rng);
        Tensor<double> grad;
        moco_loss(q, kp, queue, 0.2, &grad);
        double worst = 0;
        const double h = 1e-6;
        for (int64_t i = 0; i < q.numel(); ++i) {
          Tensor<double> p = q, m = q;
          p.data[static_cast<size_t>(i)] += h;
          m.data[static_cast<size_t>(i)] -= h;
          double fd = (moco_loss(p, kp, queue, 0.2) - moco_loss(m, kp, queue, 0.2)) / (2 * h);
          worst = std::max(worst, rel_err(grad.data[static_cast<size_t>(i)], fd));
        }
        return worst;
      };
      auto fd_worst_byol = [&] {
        Tensor<double> p({6, 4}), t({6, 4});
        for (auto& v : p.data) v = gauss(rng);
        for (auto& v : t.data) v = gauss(rng);
        Tensor<double> grad;
        byol_branch_loss(p, t, &grad);
        double worst = 0;
        const double h = 1e-6;
        for (int64_t i = 0; i < p.numel(); ++i) {
          Tensor<double> pp = p, pm = p;
          pp.data[static_cast<size_t>(i)] += h;
          pm.data[static_cast<size_t>(i)] -= h;
          double fd = (byol_branch_loss(pp, t) - byol_branch_loss(pm, t)) / (2 * h);
          worst = std::max(worst, rel_err(grad.data[static_cast<size_t>(i)], fd));
        }
        return worst;
      };
      double w_nt = fd_worst_ntxent(), w_mc = fd_worst_moco(), w_by = fd_worst_byol();
      c9 = c9 && w_nt <= 1e-3 && w_mc <= 1e-3 && w_by <= 1e-3;
      c9_detail = "oracle rel err nt=" + fmt(e_nt) + " moco=" + fmt(e_mc) + " byol=" + fmt(e_by) +
                  "; fd worst nt=" + fmt(w_nt) + " moco=" + fmt(w_mc) + " byol=" + fmt(w_by);
    }
    criterion(9, c9, "losses agree with brute-force oracles and finite differences", c9_detail);

    // ----- criterion 10: reproducibility -----------------------------------------
    bool c10 = true;
    std::string c10_detail;
    for (const char* f :
         {"table2.csv", "table4.csv", "table6.csv", "table7.csv", "fig7.csv", "fig8.csv"}) {
      bool same = fs::exists(dir_a / f) && fs::exists(dir_b / f) &&
                  read_text(dir_a / f) == read_text(dir_b / f);
      if (!same) c10_detail += std::string(c10_detail.empty() ? "" : " ") + f + " differs;";
      c10 = c10 && same;
    }
    {
      Encoder reloaded = load_encoder(dir_a / "watermarked.ckpt");
      bool enc_ok = flatten(reloaded.net()).values == flatten(a.emb_a.watermarked.net()).values;
      KeyTuple key = load_key_tuple(dir_a / "key");
      bool key_ok = key.sk == a.emb_a.key.sk && key.trigger.data == a.emb_a.key.trigger.data &&
                    key.mask.m.data == a.emb_a.key.mask.m.data &&
                    key.private_images.data == a.emb_a.key.private_images.data &&
                    flatten(key.decoder.net()).values ==
                        flatten(a.emb_a.key.decoder.net()).values;
      if (!enc_ok) c10_detail += " checkpoint round-trip differs;";
      if (!key_ok) c10_detail += " key-tuple round-trip differs;";
      c10 = c10 && enc_ok && key_ok;
    }
    if (c10) c10_detail = "rerun CSVs byte-identical; checkpoint and key round-trips bit-exact";
    criterion(10, c10, "reruns are byte-identical and artifacts round-trip bit-exactly",
              c10_detail);

    (void)b;
  } catch (const std::exception& e) {
    std::cout << "FAIL criterion 0: acceptance run aborted [" << e.what() << "]" << std::endl;
    return 1;
  }

  std::cout << (g_failures == 0 ? "[info] all criteria passed"
                                : "[info] " + std::to_string(g_failures) + " criteria failed")
            << std::endl;
  return g_failures;
}
