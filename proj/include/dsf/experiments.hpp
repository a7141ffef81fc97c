#pragma once

// Experiment drivers shared by the CLI and the test suite: the optimal-case
// InfoNCE floor grid, concentration curves, randomized equivalence and
// gradient-check reports, and the orchestration that trains, evaluates, and
// writes artifacts (metrics JSONL, per-epoch CSV summary, checkpoint,
// embedding tables, comparison CSVs).

#include "dsf/common.hpp"
#include "dsf/config.hpp"
#include "dsf/eval.hpp"
#include "dsf/loss.hpp"
#include "dsf/train.hpp"
#include "dsf/vmf.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace dsf {

enum class OutputFormat { text, csv, json };

inline OutputFormat parse_format(const std::string& name) {
  if (name == "text") return OutputFormat::text;
  if (name == "csv") return OutputFormat::csv;
  if (name == "json") return OutputFormat::json;
  throw ValidationError("format", "must be text, csv, or json");
}

// The reference grid of worst-case cosine InfoNCE losses (positive
// similarity 1, all negatives at -1).
inline UniformityFloorTable reference_floor_grid() {
  return cosine_loss_floor_table({1.0, 0.5, 0.2, 0.1}, {256, 4096, 65536});
}

inline void write_floor_table(const UniformityFloorTable& t, OutputFormat format,
                              std::ostream& out) {
  if (format == OutputFormat::json) {
    nlohmann::json j;
    j["taus"] = t.taus;
    j["ks"] = t.ks;
    nlohmann::json rows = nlohmann::json::array();
    for (long r = 0; r < t.values.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (long c = 0; c < t.values.cols(); ++c) row.push_back(t.values(r, c));
      rows.push_back(std::move(row));
    }
    j["values"] = std::move(rows);
    out << j.dump(2) << '\n';
    return;
  }
  const char sep = format == OutputFormat::csv ? ',' : ' ';
  if (format == OutputFormat::csv) {
    out << "tau";
    for (long k : t.ks) out << ",K=" << k;
    out << '\n';
  } else {
    out << "Optimal-case InfoNCE loss (s+ = 1, all negatives at -1)\n";
    out << std::setw(6) << "tau";
    for (long k : t.ks) out << std::setw(12) << ("K=" + std::to_string(k));
    out << '\n';
  }
  for (std::size_t r = 0; r < t.taus.size(); ++r) {
    if (format == OutputFormat::csv) {
      out << t.taus[r];
    } else {
      out << std::setw(6) << std::fixed << std::setprecision(2) << t.taus[r];
    }
    for (long c = 0; c < t.values.cols(); ++c) {
      if (format == OutputFormat::csv) {
        out << sep << std::fixed << std::setprecision(4) << t.values(r, c);
      } else {
        out << std::setw(12) << std::fixed << std::setprecision(4) << t.values(r, c);
      }
    }
    out << '\n';
  }
  out.unsetf(std::ios::fixed);
}

// CSV sweep of the moment approximation for kappa: the raw curve (which
// blows up at r = 1) and the stabilized curve (scaled by lambda, clamped,
// divided by the dimension).
inline void write_kappa_curves(int p, double lambda_r, std::ostream& out) {
  if (p < 2) throw ValidationError("p", "dimension must be >= 2");
  StabilizationPolicy policy;
  policy.lambda_r = lambda_r;
  policy.validate();
  out << "r_bar,kappa_raw,kappa_stabilized\n";
  out << std::setprecision(10);
  for (int i = 1; i <= 100; ++i) {
    const double r = 0.01 * i;
    const double raw = r < 1.0 ? concentration_approx(p, r)
                               : std::numeric_limits<double>::infinity();
    const double clamped = std::min(lambda_r * r, 1.0 - 1e-9);
    const double stabilized = concentration_approx(p, clamped) / p;
    out << r << ',' << raw << ',' << stabilized << '\n';
  }
}

// Randomized check that the divergence InfoNCE with the temperature-matched
// shared concentration equals the tempered cosine InfoNCE.
inline nlohmann::json theorem_trial_report(std::uint64_t seed, int trials,
                                           double tolerance = 1e-8) {
  if (trials < 0) throw ValidationError("trials", "must be >= 0");
  nlohmann::json report;
  report["trials"] = trials;
  report["tolerance"] = tolerance;
  if (trials == 0) {
    report["max_abs_diff"] = nullptr;
    report["worst"] = nullptr;
    report["pass"] = true;
    return report;
  }

  const int ps[] = {3, 8, 64};
  const double taus[] = {0.2, 0.5, 1.0};
  std::mt19937_64 rng(derive_seed(seed, "theorem-trials"));
  double max_diff = -1.0;
  nlohmann::json worst;
  for (int t = 0; t < trials; ++t) {
    const int p = ps[rng() % 3];
    const double tau = taus[rng() % 3];
    const int n_neg = 1 + static_cast<int>(rng() % 32);
    const Eigen::MatrixXd pts = sample_uniform_sphere(n_neg + 2, p, rng());
    const Eigen::VectorXd zq = pts.row(0).transpose();
    const Eigen::VectorXd zp = pts.row(1).transpose();
    const Eigen::MatrixXd negs = pts.bottomRows(n_neg);
    const auto rep = equivalence_report<double>(zq, zp, negs, tau);
    if (rep.abs_diff > max_diff) {
      max_diff = rep.abs_diff;
      worst = {{"trial", t},        {"p", p},
               {"tau", tau},        {"negatives", n_neg},
               {"kappa_hat", rep.kappa_hat}, {"loss_divergence", rep.loss_divergence},
               {"loss_cosine", rep.loss_cosine}, {"abs_diff", rep.abs_diff}};
    }
  }
  report["max_abs_diff"] = max_diff;
  report["worst"] = worst;
  report["pass"] = max_diff < tolerance;
  return report;
}

namespace detail {

template <typename LossFn>
void finite_difference_sweep(const MultiViewBatch<double>& batch,
                             const LossOutput<double>& analytic, LossFn&& loss_of,
                             std::mt19937_64& rng, int coords, double& max_rel) {
  const double h = 1e-5;
  for (int c = 0; c < coords; ++c) {
    const long row = static_cast<long>(rng() % batch.features.rows());
    const long col = static_cast<long>(rng() % batch.features.cols());
    const auto probe = [&](double delta) {
      MultiViewBatch<double> b = batch;
      b.features(row, col) += delta;
      b.features.row(row) /= b.features.row(row).norm();
      return loss_of(b);
    };
    const double fd = (probe(h) - probe(-h)) / (2 * h);
    const double an = analytic.grad_features(row, col);
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3});
    max_rel = std::max(max_rel, rel);
  }
}

inline double max_tangency_violation(const MultiViewBatch<double>& batch,
                                     const LossOutput<double>& out) {
  double worst = 0.0;
  for (long i = 0; i < batch.features.rows(); ++i) {
    worst = std::max(worst, std::abs(batch.features.row(i).dot(out.grad_features.row(i))));
  }
  return worst;
}

}  // namespace detail

// Finite-difference audit of every loss's analytic gradient over randomized
// small batches, in both negative modes.
inline nlohmann::json gradcheck_report(std::uint64_t seed, int coords_per_case = 50,
                                       double tolerance = 1e-4,
                                       double tangency_tolerance = 1e-6) {
  std::mt19937_64 rng(derive_seed(seed, "gradcheck"));
  const int ps[] = {3, 8, 16};
  const StabilizationPolicy policy;

  nlohmann::json combos = nlohmann::json::array();
  double overall_rel = 0.0, overall_tan = 0.0;
  for (const std::string method : {"dsf", "loss_avg", "fea_avg"}) {
    for (const std::string negatives : {"in_batch", "queue"}) {
      double max_rel = 0.0, max_tan = 0.0;
      for (int trial = 0; trial < 2; ++trial) {
        const int b = 2 + static_cast<int>(rng() % 3);
        const int m = 1 + static_cast<int>(rng() % 3);
        const int p = ps[rng() % 3];
        const auto batch = MultiViewBatch<double>::from_features(
            sample_uniform_sphere(static_cast<long>(b) * 2 * m, p, rng()), b, m);

        NegativeSet<double> negs = NegativeSet<double>::in_batch();
        if (negatives == "queue") {
          std::vector<QueueEntry<double>> entries;
          for (int e = 0; e < 3; ++e) {
            QueueEntry<double> entry;
            entry.views = sample_uniform_sphere(m, p, rng());
            try {
              entry.dist = estimate(entry.views, policy);
              entry.has_dist = true;
            } catch (const DegenerateDirectionError&) {
              entry.has_dist = false;
            }
            entries.push_back(std::move(entry));
          }
          negs = NegativeSet<double>::queue(std::move(entries));
        }

        const TemperatureSetting temp{0.5};
        const auto loss_of = [&](const MultiViewBatch<double>& bb) {
          if (method == "dsf") return divergence_loss(bb, negs, policy, temp).loss;
          if (method == "fea_avg") return mean_feature_loss(bb, negs, temp).loss;
          return pairwise_cosine_loss(bb, negs, temp).loss;
        };
        const LossOutput<double> out =
            method == "dsf"  ? divergence_loss(batch, negs, policy, temp)
            : method == "fea_avg" ? mean_feature_loss(batch, negs, temp)
                                  : pairwise_cosine_loss(batch, negs, temp);
        detail::finite_difference_sweep(batch, out, loss_of, rng, coords_per_case, max_rel);
        max_tan = std::max(max_tan, detail::max_tangency_violation(batch, out));
      }
      combos.push_back({{"method", method},
                        {"negatives", negatives},
                        {"max_rel_err", max_rel},
                        {"max_tangency", max_tan}});
      overall_rel = std::max(overall_rel, max_rel);
      overall_tan = std::max(overall_tan, max_tan);
    }
  }

  nlohmann::json report;
  report["tolerance"] = tolerance;
  report["tangency_tolerance"] = tangency_tolerance;
  report["max_rel_err"] = overall_rel;
  report["max_tangency"] = overall_tan;
  report["combos"] = std::move(combos);
  report["pass"] = overall_rel < tolerance && overall_tan < tangency_tolerance;
  return report;
}

namespace detail {

inline double final_epoch_mean_loss(const std::vector<MetricsRecord>& records,
                                    long steps_per_epoch) {
  if (records.empty()) return std::numeric_limits<double>::quiet_NaN();
  const long take = std::min<long>(steps_per_epoch, static_cast<long>(records.size()));
  double sum = 0.0;
  for (long i = 0; i < take; ++i) sum += records[records.size() - 1 - i].loss;
  return sum / static_cast<double>(take);
}

inline void write_epoch_summary_csv(const std::string& path,
                                    const std::vector<MetricsRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "epoch,steps,loss,margin_pos,margin_neg,margin,mean_kappa,skipped_instances\n";
  out << std::setprecision(10);
  long i = 0;
  const long n = static_cast<long>(records.size());
  while (i < n) {
    const int epoch = records[i].epoch;
    double loss = 0, mp = 0, mn = 0, mg = 0, kap = 0;
    long steps = 0, skipped = 0;
    bool kappa_seen = false;
    for (; i < n && records[i].epoch == epoch; ++i) {
      loss += records[i].loss;
      mp += records[i].margin_pos;
      mn += records[i].margin_neg;
      mg += records[i].margin;
      if (!std::isnan(records[i].mean_kappa)) {
        kap += records[i].mean_kappa;
        kappa_seen = true;
      }
      skipped += records[i].skipped_instances;
      ++steps;
    }
    const double d = static_cast<double>(steps);
    out << epoch << ',' << steps << ',' << loss / d << ',' << mp / d << ',' << mn / d << ','
        << mg / d << ',';
    if (kappa_seen) {
      out << kap / d;
    } else {
      out << "nan";
    }
    out << ',' << skipped << '\n';
  }
}

inline std::pair<double, double> evaluate_trainer(const Trainer& t, const EvalSpec& eval) {
  const auto train = t.embed_split("train");
  const auto test = t.embed_split("test");
  const int k = eval.knn_k == 0 ? default_knn_k(train.count()) : eval.knn_k;
  return {knn_eval(train, test, k), linear_probe(train, test, eval.probe_epochs,
                                                 eval.probe_lr)};
}

}  // namespace detail

// Full training run with artifacts: metrics.jsonl (one JSON object per
// step), summary.csv (per-epoch means), checkpoint.json, the two embedding
// tables, the resolved config, and result.json with the final evaluation.
inline nlohmann::json run_training(const ExperimentConfig& cfg_in,
                                   const nlohmann::json* resume = nullptr) {
  ExperimentConfig cfg = cfg_in;
  if (cfg.out_dir.empty()) {
    throw ValidationError("out_dir", "training needs an output directory");
  }
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const auto path = [&](const char* name) { return (fs::path(cfg.out_dir) / name).string(); };

  Trainer trainer = resume != nullptr ? Trainer(cfg, *resume) : Trainer(cfg);
  const bool appending = resume != nullptr && trainer.state().step > 0;
  std::ofstream(path("config.json")) << config_to_json(cfg).dump(2) << '\n';

  const auto t0 = std::chrono::steady_clock::now();
  std::ofstream jsonl(path("metrics.jsonl"),
                      appending ? std::ios::app : std::ios::trunc);
  const auto records = trainer.run(&jsonl);
  jsonl.close();
  const double wall_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  detail::write_epoch_summary_csv(path("summary.csv"), records);
  std::ofstream(path("checkpoint.json")) << trainer.checkpoint().dump() << '\n';
  write_embeddings_csv(path("embeddings_train.csv"), trainer.embed_split("train"));
  write_embeddings_csv(path("embeddings_test.csv"), trainer.embed_split("test"));

  const auto [knn, probe] = detail::evaluate_trainer(trainer, cfg.eval);
  long skipped = 0;
  for (const auto& r : records) skipped += r.skipped_instances;

  nlohmann::json result;
  result["method"] = cfg.loss.method;
  result["seed"] = cfg.seed;
  result["views_per_group"] = cfg.augmentation.views_per_group;
  result["batch_size"] = cfg.optimizer.batch_size;
  result["epochs"] = cfg.optimizer.epochs;
  result["steps"] = trainer.state().step;
  result["final_epoch_loss"] =
      detail::final_epoch_mean_loss(records, trainer.steps_per_epoch());
  result["knn_accuracy"] = knn;
  result["probe_accuracy"] = probe;
  result["skipped_instances"] = skipped;
  result["wall_seconds"] = wall_s;
  result["out_dir"] = cfg.out_dir;
  std::ofstream(path("result.json")) << result.dump(2) << '\n';
  return result;
}

// Evaluation of stored embedding tables: kNN + linear probe, one JSON record.
inline nlohmann::json run_eval(const std::string& train_csv, const std::string& test_csv,
                               int k, int probe_epochs, double probe_lr) {
  const auto train = read_embeddings_csv(train_csv, "train");
  const auto test = read_embeddings_csv(test_csv, "test");
  const int kk = k == 0 ? default_knn_k(train.count()) : k;
  nlohmann::json j;
  j["train_count"] = train.count();
  j["test_count"] = test.count();
  j["dim"] = train.embeddings.cols();
  j["k"] = kk;
  j["knn_accuracy"] = knn_eval(train, test, kk);
  j["probe_accuracy"] = linear_probe(train, test, probe_epochs, probe_lr);
  return j;
}

// Trains every run of the comparison suite across the seed list (all under
// the same view budget), evaluates each, and writes per-seed and aggregated
// CSVs.
inline nlohmann::json run_comparison(const CompareSpec& spec, const std::string& out_dir,
                                     std::ostream* progress = nullptr) {
  spec.validate();
  if (out_dir.empty()) throw ValidationError("out_dir", "comparison needs an output directory");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  std::ofstream per_seed((fs::path(out_dir) / "comparison.csv").string());
  per_seed << "method,views_per_group,batch_size,seed,final_epoch_loss,knn_accuracy,"
              "probe_accuracy\n"
           << std::setprecision(10);

  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : spec.runs) {
    std::vector<double> knns, probes, losses;
    nlohmann::json per_seed_json = nlohmann::json::array();
    for (const std::uint64_t seed : spec.seeds) {
      const ExperimentConfig cfg = spec.config_for(run, seed);
      Trainer trainer(cfg);
      const auto records = trainer.run();
      const double loss =
          detail::final_epoch_mean_loss(records, trainer.steps_per_epoch());
      const auto [knn, probe] = detail::evaluate_trainer(trainer, cfg.eval);
      knns.push_back(knn);
      probes.push_back(probe);
      losses.push_back(loss);
      per_seed << run.method << ',' << run.views_per_group << ',' << run.batch_size << ','
               << seed << ',' << loss << ',' << knn << ',' << probe << '\n';
      per_seed_json.push_back(
          {{"seed", seed}, {"final_epoch_loss", loss}, {"knn", knn}, {"probe", probe}});
      if (progress != nullptr) {
        *progress << run.method << " m=" << run.views_per_group << " B=" << run.batch_size
                  << " seed=" << seed << ": loss " << loss << ", knn " << knn << ", probe "
                  << probe << '\n';
      }
    }
    const auto mean = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    const auto sample_std = [&](const std::vector<double>& v) {
      if (v.size() < 2) return 0.0;
      const double mu = mean(v);
      double s = 0.0;
      for (double x : v) s += (x - mu) * (x - mu);
      return std::sqrt(s / static_cast<double>(v.size() - 1));
    };
    runs.push_back({{"method", run.method},
                    {"views_per_group", run.views_per_group},
                    {"batch_size", run.batch_size},
                    {"seeds", per_seed_json},
                    {"knn_mean", mean(knns)},
                    {"knn_std", sample_std(knns)},
                    {"probe_mean", mean(probes)},
                    {"probe_std", sample_std(probes)},
                    {"loss_mean", mean(losses)}});
  }

  std::ofstream summary((fs::path(out_dir) / "comparison_summary.csv").string());
  summary << "method,views_per_group,batch_size,knn_mean,knn_std,probe_mean,probe_std,"
             "final_epoch_loss_mean\n"
          << std::setprecision(10);
  for (const auto& r : runs) {
    summary << r.at("method").get<std::string>() << ',' << r.at("views_per_group") << ','
            << r.at("batch_size") << ',' << r.at("knn_mean") << ',' << r.at("knn_std") << ','
            << r.at("probe_mean") << ',' << r.at("probe_std") << ',' << r.at("loss_mean")
            << '\n';
  }

  nlohmann::json out;
  out["budget"] = spec.budget;
  out["seeds"] = spec.seeds;
  out["runs"] = std::move(runs);
  out["out_dir"] = out_dir;
  return out;
}

}  // namespace dsf
